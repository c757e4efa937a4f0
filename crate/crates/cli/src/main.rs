use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use emovq::audio::{load_wav, save_wav};
use emovq::config::{ConfigError, RunConfig};
use emovq::data::build_synthetic_corpus;
use emovq::generator::convert;
use emovq::persist::{load_classifier, load_generator, save_classifier, save_generator};
use emovq::pipeline::{
    ablate, echo_config, embed, evaluate, fit_classifier, fit_generator, write_json, write_mel_csv,
    write_rows, Corpus, EvalMode,
};

#[derive(Parser)]
#[command(
    name = "emovq",
    version,
    about = "Reference-driven emotion transfer for speech"
)]
struct Cli {
    /// JSON run configuration; unknown keys are rejected
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides every seed in the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and its index
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Clips per emotion, speaker and language
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        speakers: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=2))]
        languages: Option<u64>,
    },
    /// Train the emotion classifier
    TrainClassifier {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        epochs: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Linear head instead of the codebook lookup
        #[arg(long)]
        no_vq: bool,
    },
    /// Train the mel generator against a frozen classifier
    TrainGenerator {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        epochs: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        batch: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Plain convolution in place of the spectral block
        #[arg(long)]
        no_spectral_conv: bool,
    },
    /// Transfer the emotion of a reference clip onto an input clip
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generated log-mel as CSV (frames x bands)
        #[arg(long)]
        emit_mel: Option<PathBuf>,
    },
    /// Convert the test split and write the report tables
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "same-speaker")]
        mode: EvalMode,
    },
    /// Paired comparisons of the codebook and spectral-block ablations
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        trials: Option<u64>,
    },
    /// Export encoder outputs, codes and a 3-d PCA projection
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// `dir/name.ext` -> `dir/name.<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn open_corpus(path: &Path) -> Result<Corpus> {
    Corpus::open(path).with_context(|| format!("opening corpus {}", path.display()))
}

fn echo(path: &Path, cfg: &RunConfig) -> Result<()> {
    log::info!("effective config:\n{}", cfg.to_json());
    echo_config(path, cfg)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match cli.command {
        Command::Synth {
            out,
            n,
            speakers,
            languages,
        } => {
            if let Some(n) = n {
                cfg.synth.n_per_emotion = n as usize;
            }
            if let Some(s) = speakers {
                cfg.synth.speakers = s as usize;
            }
            if let Some(l) = languages {
                cfg.synth.languages = l as usize;
            }
            cfg.validate()?;
            let idx = build_synthetic_corpus(&out, &cfg.synth)?;
            echo(&out.join("config.json"), &cfg)?;
            println!("wrote {} clips to {}", idx.entries.len(), out.display());
        }
        Command::TrainClassifier {
            corpus,
            epochs,
            out,
            no_vq,
        } => {
            if let Some(e) = epochs {
                cfg.classifier_train.epochs = e as usize;
            }
            if no_vq {
                cfg.classifier.use_vq = false;
            }
            cfg.validate()?;
            let corpus = open_corpus(&corpus)?;
            ensure_parent(&out)?;
            echo(&sibling(&out, "config.json"), &cfg)?;
            let (model, history) = fit_classifier(&corpus, &cfg.classifier, &cfg.classifier_train)?;
            save_classifier(&model, &out)?;
            write_rows(&sibling(&out, "history.csv"), &history)?;
            if let Some(last) = history.last() {
                println!(
                    "classifier: train acc {:.3}, val acc {:.3} after {} epochs",
                    last.train_accuracy, last.val_accuracy, last.epoch
                );
            }
        }
        Command::TrainGenerator {
            corpus,
            classifier,
            epochs,
            batch,
            out,
            no_spectral_conv,
        } => {
            if let Some(e) = epochs {
                cfg.generator_train.epochs = e as usize;
            }
            if let Some(b) = batch {
                cfg.generator_train.batch_size = b as usize;
            }
            if no_spectral_conv {
                cfg.generator.use_spectral_conv = false;
            }
            let cls = load_classifier(&classifier)?;
            cfg.classifier = cls.config().clone();
            cfg.validate()?;
            let corpus = open_corpus(&corpus)?;
            ensure_parent(&out)?;
            echo(&sibling(&out, "config.json"), &cfg)?;
            let (model, history) =
                fit_generator(&corpus, &cls, &cfg.generator, &cfg.generator_train)?;
            save_generator(&model, &out)?;
            write_rows(&sibling(&out, "history.csv"), &history)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!(
                    "generator: total loss {:.4} -> {:.4}",
                    first.total, last.total
                );
            }
        }
        Command::Convert {
            input,
            reference,
            classifier,
            generator,
            out,
            emit_mel,
        } => {
            let cls = load_classifier(&classifier)?;
            let gen = load_generator(&generator)?;
            cfg.classifier = cls.config().clone();
            cfg.generator = gen.config().clone();
            let spec = &gen.config().spectrogram;
            let load = |p: &Path| -> Result<_> {
                let clip = load_wav(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(clip.resample(spec.sample_rate))
            };
            let src = load(&input)?;
            let refc = load(&reference)?;
            for (name, p, c) in [("input", &input, &src), ("reference", &reference, &refc)] {
                if c.len() < spec.win_length {
                    bail!(
                        "{name} {} has {} samples; the minimum length is one analysis window of {} samples",
                        p.display(),
                        c.len(),
                        spec.win_length
                    );
                }
            }
            let (audio, conv) = convert(&gen, &cls, &src, &refc, cfg.eval.griffin_lim_iterations)?;
            ensure_parent(&out)?;
            save_wav(&audio, &out)?;
            write_json(&sibling(&out, "json"), &conv.diagnostics)?;
            if let Some(p) = emit_mel {
                ensure_parent(&p)?;
                write_mel_csv(&p, &conv.mel)?;
            }
            echo(&sibling(&out, "config.json"), &cfg)?;
            println!(
                "reference code {} ({}), {} frames",
                conv.diagnostics.reference_code,
                conv.diagnostics.reference_label,
                conv.diagnostics.frames
            );
        }
        Command::Evaluate {
            corpus,
            classifier,
            generator,
            out,
            mode,
        } => {
            let cls = load_classifier(&classifier)?;
            let gen = load_generator(&generator)?;
            cfg.classifier = cls.config().clone();
            cfg.generator = gen.config().clone();
            cfg.validate()?;
            let corpus = open_corpus(&corpus)?;
            let report = evaluate(&corpus, &cls, &gen, mode, &cfg.eval)?;
            report.write(&out)?;
            echo(&out.join("config.json"), &cfg)?;
            println!(
                "{:<10} {:>4} {:>8} {:>7} {:>6} {:>7}",
                "emotion", "n", "MCD", "SSIM", "SER", "PCC"
            );
            for q in &report.quality {
                println!(
                    "{:<10} {:>4} {:>8.3} {:>7.3} {:>6.2} {:>7.3}",
                    q.emotion.name(),
                    q.n,
                    q.mcd,
                    q.ssim,
                    q.ser_accuracy,
                    q.pcc
                );
            }
        }
        Command::Ablate {
            corpus,
            out,
            trials,
        } => {
            if let Some(t) = trials {
                cfg.ablation.trials = t as usize;
            }
            cfg.validate()?;
            let corpus = open_corpus(&corpus)?;
            let report = ablate(&corpus, &cfg)?;
            report.write(&out)?;
            echo(&out.join("config.json"), &cfg)?;
            for row in &report.table {
                println!(
                    "{:<10} t {:>8.3} p {:.4}",
                    row.emotion.name(),
                    row.t,
                    row.p_value
                );
            }
            println!(
                "ssim spectral {:.4} vs conv {:.4}: V {} p {:.4}",
                report.wilcoxon.mean_spectral,
                report.wilcoxon.mean_conv,
                report.wilcoxon.v,
                report.wilcoxon.p_value
            );
        }
        Command::Embed {
            corpus,
            classifier,
            out,
        } => {
            let cls = load_classifier(&classifier)?;
            cfg.classifier = cls.config().clone();
            let corpus = open_corpus(&corpus)?;
            let emb = embed(&corpus, &cls)?;
            let upath = emb.write(&out)?;
            echo(&sibling(&out, "config.json"), &cfg)?;
            println!(
                "wrote {} rows to {} and {}",
                emb.rows.len(),
                out.display(),
                upath.display()
            );
        }
    }
    Ok(())
}

/// The cause chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if msg.ends_with(&s) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&s);
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
