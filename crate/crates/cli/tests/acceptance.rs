//! Acceptance run: one PASS/FAIL line per criterion. `ACCEPTANCE_ONLY=1,4`
//! restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::f64::consts::{LN_10, PI};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use emovq::audio::{
    extract_f0, griffin_lim, mel_spectrogram, mel_to_magnitude, AudioClip, F0Contour,
    MelSpectrogram, SpectrogramConfig,
};
use emovq::autodiff::{Graph, Tensor};
use emovq::classifier::{
    self, commitment_loss, quantize, train_classifier, ClassifierConfig, ClassifierModel,
    ClassifierTrainConfig, Codebook, EMBED_DIM, NUM_CODES,
};
use emovq::data::{synthetic_index, Language, Split, SynthConfig, INDEX_FILE};
use emovq::generator::{
    convert, convert_mel, GeneratorConfig, GeneratorModel, GeneratorTrainConfig,
};
use emovq::metrics::{self, MCD_COEFFS};
use emovq::nn::unit_sphere_rows;
use emovq::pipeline::{fit_classifier, fit_generator, Corpus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn index_corpus(dir: &Path, cfg: &SynthConfig) -> Corpus {
    synthetic_index(cfg)
        .unwrap()
        .save(&dir.join(INDEX_FILE))
        .unwrap();
    Corpus::open(dir).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let ops = oracles::op_grad_errors(3);
    let bad: Vec<String> = ops
        .iter()
        .filter(|(_, e, tol)| e >= tol)
        .map(|(n, e, tol)| format!("{n} {e:.2e} >= {tol:.0e}"))
        .collect();
    let worst_op = ops.iter().map(|o| o.1).fold(0.0, f64::max);
    let (vq_name, vq) = oracles::vq_loss_grad_check(11)?;
    let (gen_name, gen) = oracles::generator_loss_grad_check(10);
    let secs = t0.elapsed().as_secs_f64();
    check(
        bad.is_empty() && vq < 1e-3 && gen < 1e-3 && secs < 60.0,
        format!(
            "{} ops, worst {worst_op:.2e}{}; L_vq {vq:.2e} ({vq_name}); L_gen {gen:.2e} ({gen_name}); {secs:.1}s < 60s",
            ops.len(),
            if bad.is_empty() { String::new() } else { format!(" [{}]", bad.join(", ")) }
        ),
    )
}

fn spectral_oracle() -> Outcome {
    let err = oracles::spectral_conv_max_error(4, 100);
    check(
        err < 1e-5,
        format!("100 cases, T in [8, 64], max relative error {err:.2e} < 1e-5"),
    )
}

fn vq_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = unit_sphere_rows(&mut rng, NUM_CODES, EMBED_DIM);
    let cb = Codebook::new(&table).unwrap();
    let idempotent = (0..NUM_CODES).all(|i| {
        let p = quantize(&cb, cb.row(i), 0.1).unwrap();
        p.hard_index == i && p.embedding == cb.row(i)
    });
    let mut scale_fail = 0;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = 10f64.powf(rng.gen_range(-3.0..3.0));
        let zs: Vec<f64> = z.iter().map(|v| v * c).collect();
        let (a, b) = (
            quantize(&cb, &z, 0.1).unwrap(),
            quantize(&cb, &zs, 0.1).unwrap(),
        );
        let soft_close = a
            .soft
            .iter()
            .zip(&b.soft)
            .all(|(x, y)| (x - y).abs() < 1e-9);
        if a.hard_index != b.hard_index || !soft_close {
            scale_fail += 1;
        }
    }
    let mut commit_zero = true;
    for i in [0, 12, 24] {
        let mut g = Graph::new();
        let z = g.param(Tensor::vector(cb.row(i).to_vec()));
        let e = g.param(Tensor::vector(cb.row(i).to_vec()));
        let l = commitment_loss(&mut g, z, e, 0.25).unwrap();
        commit_zero &= g.value(l).item() == 0.0;
    }
    // duplicated rows and an equal-angle bisector
    let mut t = table.clone();
    let row: Vec<f64> = t.data()[9 * EMBED_DIM..10 * EMBED_DIM].to_vec();
    for r in [14, 22] {
        t.data_mut()[r * EMBED_DIM..(r + 1) * EMBED_DIM].copy_from_slice(&row);
    }
    let dup = quantize(&Codebook::new(&t).unwrap(), &row, 0.1)
        .unwrap()
        .hard_index;
    let mut t = Tensor::zeros(&[NUM_CODES, EMBED_DIM]);
    for i in 0..NUM_CODES {
        t.data_mut()[i * EMBED_DIM + i] = 1.0;
    }
    let mut z = vec![0.0; EMBED_DIM];
    z[3] = 1.0;
    z[17] = 1.0;
    let bis = quantize(&Codebook::new(&t).unwrap(), &z, 0.1)
        .unwrap()
        .hard_index;
    check(
        idempotent && scale_fail == 0 && commit_zero && dup == 9 && bis == 3,
        format!(
            "idempotent on 25 rows: {idempotent}; scale failures {scale_fail}/1000; commitment 0 at z=e: {commit_zero}; ties -> {dup} (want 9), {bis} (want 3)"
        ),
    )
}

fn metric_oracles() -> Outcome {
    let cfg = SpectrogramConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mel = |v: Vec<f64>, t: usize| MelSpectrogram::new(v, t, cfg.clone()).unwrap();
    let t = 12;
    let base: Vec<f64> = (0..t * 80).map(|_| rng.gen_range(-8.0..0.0)).collect();
    let x = mel(base.clone(), t);
    let mcd0 = metrics::mcd(&x, &x).unwrap();
    let expect = 10.0 / LN_10 * 2f64.sqrt();
    let mut mcd_unit = 0.0f64;
    for d in 1..=MCD_COEFFS {
        let shifted: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(k, v)| {
                v + (2.0 / 80.0f64).sqrt() * (PI * d as f64 * ((k % 80) as f64 + 0.5) / 80.0).cos()
            })
            .collect();
        mcd_unit = mcd_unit.max((metrics::mcd(&mel(shifted, t), &x).unwrap() - expect).abs());
    }
    let ssim_err = (metrics::ssim(&x, &x).unwrap() - 1.0).abs();
    let f: Vec<f64> = (0..50)
        .map(|i| 120.0 + 30.0 * (i as f64 * 0.3).sin() + i as f64)
        .collect();
    let fc = F0Contour::new(f.clone(), 300);
    let affine = F0Contour::new(f.iter().map(|v| 2.5 * v + 40.0).collect(), 300);
    let mirrored = F0Contour::new(f.iter().map(|v| 500.0 - v).collect(), 300);
    let pcc_err = [
        (metrics::pcc(&fc, &fc).unwrap() - 1.0).abs(),
        (metrics::pcc(&fc, &affine).unwrap() - 1.0).abs(),
        (metrics::pcc(&fc, &mirrored).unwrap() + 1.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let mut wil_mismatch = 0;
    let mut wil_checked = 0;
    for (a, b) in oracles::wilcoxon_trials(4, 200) {
        if a == b {
            continue;
        }
        wil_checked += 1;
        let (v, p) = oracles::wilcoxon_enumerated(&a, &b);
        match metrics::wilcoxon_signed_rank(&a, &b) {
            Ok(r) if r.exact && r.statistic == v && (r.p_value - p).abs() < 1e-12 => {}
            _ => wil_mismatch += 1,
        }
    }
    let mut t_err = 0.0f64;
    for trial in 0..40 {
        let n = 2 + trial % 30;
        let shift = rng.gen_range(-0.5..0.5);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0) + shift).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r = metrics::one_tailed_t_test(&a, &b).unwrap();
        t_err = t_err
            .max((r.p_value - oracles::t_sf_quadrature(oracles::paired_t(&a, &b), n - 1)).abs());
    }
    check(
        mcd0 == 0.0 && mcd_unit < 1e-6 && ssim_err < 1e-9 && pcc_err < 1e-9 && wil_mismatch == 0 && t_err < 1e-6,
        format!(
            "mcd(x,x) {mcd0}; unit coefficient |err| {mcd_unit:.1e}; ssim(x,x) |err| {ssim_err:.1e}; pcc |err| {pcc_err:.1e}; Wilcoxon {wil_mismatch} mismatches over {wil_checked} n<=10 samples; t-test |dp| {t_err:.1e}"
        ),
    )
}

fn classifier_training() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = index_corpus(dir.path(), &SynthConfig::default());
    let spec = SpectrogramConfig::default();
    let train = corpus.labelled(Split::Train, &spec).unwrap();
    let val = corpus.labelled(Split::Val, &spec).unwrap();
    let mut model = ClassifierModel::new(ClassifierConfig::default()).unwrap();
    let cfg = ClassifierTrainConfig::default();
    train_classifier(&mut model, &train, &val, &cfg).map_err(|e| e.to_string())?;
    let (_, train_acc) = classifier::evaluate(&model, &train).unwrap();
    let (_, val_acc) = classifier::evaluate(&model, &val).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    check(
        train_acc >= 0.95 && val_acc >= 0.85 && secs <= 600.0,
        format!(
            "{} train / {} val clips, {} epochs: train acc {train_acc:.3} >= 0.95, val acc {val_acc:.3} >= 0.85, {secs:.0}s <= 600s",
            train.len(),
            val.len(),
            cfg.epochs
        ),
    )
}

struct ToyRun {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    classifier: ClassifierModel,
    generator: GeneratorModel,
}

fn toy_run() -> (ToyRun, Vec<emovq::generator::GeneratorEpoch>, f64) {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = index_corpus(
        dir.path(),
        &SynthConfig {
            n_per_emotion: 20,
            ..SynthConfig::default()
        },
    );
    let (classifier, _) = fit_classifier(
        &corpus,
        &ClassifierConfig::default(),
        &ClassifierTrainConfig {
            epochs: 10,
            ..ClassifierTrainConfig::default()
        },
    )
    .unwrap();
    let (generator, history) = fit_generator(
        &corpus,
        &classifier,
        &GeneratorConfig::toy(),
        &GeneratorTrainConfig::default(),
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    (
        ToyRun {
            _dir: dir,
            corpus,
            classifier,
            generator,
        },
        history,
        secs,
    )
}

fn generator_training(run: &mut Option<ToyRun>) -> Outcome {
    let (toy, history, secs) = toy_run();
    let first = history[0].total;
    let tail = &history[history.len().saturating_sub(5)..];
    let ma = tail.iter().map(|h| h.total).sum::<f64>() / tail.len() as f64;
    let drop = 1.0 - ma / first;
    let spec = &toy.generator.config().spectrogram;
    let mut scores = Vec::new();
    for e in toy.corpus.index().emotional(Split::Test) {
        let clip = toy.corpus.clip(e, spec).unwrap();
        let out = convert_mel(&toy.generator, &toy.classifier, &clip, &clip).unwrap();
        scores.push(metrics::ssim(&out.mel, &mel_spectrogram(&clip, spec).unwrap()).unwrap());
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    *run = Some(toy);
    check(
        drop >= 0.5 && mean >= 0.7 && secs <= 1200.0,
        format!(
            "width 64, {} epochs, batch 10: total {first:.3} -> 5-epoch average {ma:.3} ({:.0}% decrease, need 50%); identity SSIM over {} held-out clips mean {mean:.3} >= 0.7 (min {min:.3}); training {secs:.0}s <= 1200s",
            history.len(),
            100.0 * drop,
            scores.len()
        ),
    )
}

fn cross_language(run: &Option<ToyRun>) -> Outcome {
    let toy = run
        .as_ref()
        .ok_or("needs the generator run of criterion 6")?;
    let spec = &toy.generator.config().spectrogram;
    let test: Vec<_> = toy.corpus.index().split(Split::Test).collect();
    let inputs: Vec<_> = test.iter().filter(|e| e.language == Language::A).collect();
    let refs: Vec<_> = test.iter().filter(|e| e.language == Language::B).collect();
    let mut failures = Vec::new();
    let mut codes = BTreeMap::new();
    for (k, r) in refs.iter().enumerate() {
        let input = toy.corpus.clip(inputs[k % inputs.len()], spec).unwrap();
        let reference = toy.corpus.clip(r, spec).unwrap();
        match convert(&toy.generator, &toy.classifier, &input, &reference, 8) {
            Ok((audio, c)) if c.diagnostics.reference_code < NUM_CODES && !audio.is_empty() => {
                *codes.entry(c.diagnostics.reference_code).or_insert(0) += 1;
            }
            Ok((_, c)) => {
                failures.push(format!("{}: code {}", r.id(), c.diagnostics.reference_code))
            }
            Err(e) => failures.push(format!("{}: {e}", r.id())),
        }
    }
    check(
        failures.is_empty() && !refs.is_empty(),
        format!(
            "{} language-B test references, {} failures, {} distinct codes used{}",
            refs.len(),
            failures.len(),
            codes.len(),
            failures
                .first()
                .map(|f| format!(" (first: {f})"))
                .unwrap_or_default()
        ),
    )
}

fn emovq(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_emovq"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "emovq {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

const ABLATE_CONFIG: &str = r#"{"ablation": {"classifier_epochs": 2, "generator_epochs": 2}}"#;

/// Runs every subcommand in `dir` at toy scale.
fn cli_pipeline(dir: &Path) -> Result<(), String> {
    fs::write(dir.join("ablate.json"), ABLATE_CONFIG).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 8] = [
        &["synth", "--out", "corpus", "--n", "10", "--seed", "1"],
        &[
            "train-classifier",
            "--corpus",
            "corpus",
            "--epochs",
            "3",
            "--out",
            "models/cls.aeck",
            "--seed",
            "1",
        ],
        &[
            "train-generator",
            "--corpus",
            "corpus",
            "--classifier",
            "models/cls.aeck",
            "--epochs",
            "2",
            "--batch",
            "10",
            "--out",
            "models/gen.aeck",
            "--seed",
            "1",
        ],
        &[
            "convert",
            "--input",
            "corpus/clips/spk00/parallel/A-angry-0000.wav",
            "--reference",
            "corpus/clips/spk01/Angry/B-angry-0001.wav",
            "--classifier",
            "models/cls.aeck",
            "--generator",
            "models/gen.aeck",
            "--out",
            "conv/out.wav",
            "--emit-mel",
            "conv/mel.csv",
        ],
        &[
            "evaluate",
            "--corpus",
            "corpus",
            "--classifier",
            "models/cls.aeck",
            "--generator",
            "models/gen.aeck",
            "--out",
            "eval",
            "--mode",
            "same-speaker",
        ],
        &[
            "evaluate",
            "--corpus",
            "corpus",
            "--classifier",
            "models/cls.aeck",
            "--generator",
            "models/gen.aeck",
            "--out",
            "eval-cross",
            "--mode",
            "cross-language",
        ],
        &[
            "--config",
            "ablate.json",
            "ablate",
            "--corpus",
            "corpus",
            "--out",
            "ablate",
            "--trials",
            "50",
            "--seed",
            "1",
        ],
        &[
            "embed",
            "--corpus",
            "corpus",
            "--classifier",
            "models/cls.aeck",
            "--out",
            "embed/emb.csv",
        ],
    ];
    for s in steps {
        emovq(s, dir)?;
    }
    Ok(())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header = r
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(String::from)
        .collect();
    let rows = r
        .records()
        .map(|x| x.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    Ok((header, rows))
}

fn report_structure(dir: &Path) -> Outcome {
    cli_pipeline(dir)?;
    let mut problems = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            problems.push(what.to_string());
        }
    };
    let emotions4 = ["Angry", "Happy", "Sad", "Surprised"];
    let emotions5 = ["Angry", "Happy", "Neutral", "Sad", "Surprised"];
    for ev in ["eval", "eval-cross"] {
        let d = dir.join(ev);
        let (h, rows) = read_csv(&d.join("quality.csv"))?;
        expect(
            h == ["emotion", "n", "mcd", "ssim", "ser_accuracy", "pcc"],
            "quality header",
        );
        expect(
            rows.iter().map(|r| r[0].as_str()).eq(emotions4),
            "quality rows",
        );
        for f in ["confusion.csv", "utilization.csv"] {
            let (h, rows) = read_csv(&d.join(f))?;
            expect(
                h.len() == 6
                    && h[1..]
                        .iter()
                        .map(String::as_str)
                        .eq(if f == "confusion.csv" {
                            emotions5.to_vec()
                        } else {
                            vec!["code_0", "code_1", "code_2", "code_3", "code_4"]
                        }),
                f,
            );
            expect(rows.iter().map(|r| r[0].as_str()).eq(emotions5), f);
            for r in &rows {
                let s: f64 = r[1..]
                    .iter()
                    .map(|v| v.parse::<f64>().unwrap_or(f64::NAN))
                    .sum();
                expect(
                    (s - 100.0).abs() <= 0.01,
                    &format!("{f} row {} sums to {s}", r[0]),
                );
            }
        }
        let (h, rows) = read_csv(&d.join("significance.csv"))?;
        expect(
            h == ["emotion", "n", "t", "t_p", "wilcoxon_v", "wilcoxon_p"],
            "significance header",
        );
        expect(
            rows.iter().map(|r| r[0].as_str()).eq(emotions4),
            "significance rows",
        );
        let (h, _) = read_csv(&d.join("pcc_by_code.csv"))?;
        expect(h == ["emotion", "code", "n", "pcc"], "pcc_by_code header");
        let (h, rows) = read_csv(&d.join("per_pair.csv"))?;
        expect(h.len() == 12 && !rows.is_empty(), "per_pair");
    }
    let a = dir.join("ablate");
    let (h, rows) = read_csv(&a.join("table10.csv"))?;
    expect(
        h == ["emotion", "trials", "mean_vq", "mean_plain", "t", "p_value"],
        "table10 header",
    );
    expect(
        rows.iter().map(|r| r[0].as_str()).eq(emotions5),
        "table10 rows",
    );
    let (h, rows) = read_csv(&a.join("ssim_trials.csv"))?;
    expect(
        h == ["trial", "spectral", "conv"] && rows.len() == 50,
        "ssim_trials has 50 rows",
    );
    let (h, rows) = read_csv(&a.join("wilcoxon.csv"))?;
    expect(
        h == ["trials", "mean_spectral", "mean_conv", "v", "p_value"]
            && rows.len() == 1
            && rows[0][0] == "50",
        "wilcoxon over 50 trials",
    );
    let p: Vec<&str> = rows
        .first()
        .map(|r| vec![r[3].as_str(), r[4].as_str()])
        .unwrap_or_default();
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("6 evaluation CSVs x 2 modes, Table-10 CSV with 5 emotions, 50 paired SSIM trials (V {}, p {})", p[0], p[1])
        } else {
            problems.join("; ")
        },
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(first: Option<&Path>) -> Outcome {
    let a_tmp;
    let a = match first {
        Some(p) => p.to_path_buf(),
        None => {
            a_tmp = tempfile::tempdir().unwrap();
            cli_pipeline(a_tmp.path())?;
            a_tmp.path().to_path_buf()
        }
    };
    let b = tempfile::tempdir().unwrap();
    cli_pipeline(b.path())?;
    let (fa, fb) = (files_under(&a), files_under(b.path()));
    if fa != fb {
        return Err(format!(
            "file sets differ: {} vs {} files",
            fa.len(),
            fb.len()
        ));
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.path().join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    // replay from the echoed configuration
    emovq(
        &[
            "--config",
            "models/cls.config.json",
            "train-classifier",
            "--corpus",
            "corpus",
            "--out",
            "replay/cls.aeck",
        ],
        b.path(),
    )?;
    let replay_same = fs::read(b.path().join("replay/cls.aeck")).unwrap()
        == fs::read(a.join("models/cls.aeck")).unwrap();
    check(
        differing.is_empty() && replay_same,
        format!(
            "{} output files compared across two runs, {} differ{}; checkpoint replayed from echoed config identical: {replay_same}",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    )
}

fn dsp_round_trips() -> Outcome {
    let cfg = SpectrogramConfig::default();
    let sr = cfg.sample_rate as f64;
    let mut worst_f0 = 0.0f64;
    let mut unvoiced = 0;
    for f in [70.0, 100.0, 150.0, 220.0, 330.0, 440.0, 550.0] {
        let s = (0..24_000)
            .map(|i| 0.5 * (2.0 * PI * f * i as f64 / sr).sin())
            .collect();
        let c = extract_f0(&AudioClip::new(s, cfg.sample_rate).unwrap(), &cfg).unwrap();
        for (v, ok) in c.f0().iter().zip(c.voiced()) {
            if *ok {
                worst_f0 = worst_f0.max((v - f).abs());
            } else {
                unvoiced += 1;
            }
        }
    }
    let mut frame_errors = 0;
    for len in [1200, 1201, 1499, 1500, 1501, 9000, 24_000, 36_123] {
        let clip = AudioClip::new(vec![0.1; len], cfg.sample_rate).unwrap();
        let expected = 1 + (len - cfg.win_length) / cfg.hop_length;
        if mel_spectrogram(&clip, &cfg).unwrap().n_frames() != expected {
            frame_errors += 1;
        }
    }
    let x: Vec<f64> = (0..12_000)
        .map(|i| {
            let t = i as f64 / sr;
            0.3 * (2.0 * PI * 180.0 * t).sin() + 0.2 * (2.0 * PI * 523.0 * t * (1.0 + t)).sin()
        })
        .collect();
    let mel = mel_spectrogram(&AudioClip::new(x, cfg.sample_rate).unwrap(), &cfg).unwrap();
    let e = griffin_lim(&mel_to_magnitude(&mel), &cfg, 50)
        .unwrap()
        .spectral_convergence;
    let increases = e.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-9)).count();
    check(
        worst_f0 <= 2.0 && unvoiced == 0 && frame_errors == 0 && increases == 0,
        format!(
            "sine F0 max |error| {worst_f0:.3} Hz <= 2 ({unvoiced} unvoiced frames); frame-count mismatches {frame_errors}/8; Griffin-Lim convergence {:.4} -> {:.4} with {increases} increases over 50 iterations",
            e[0],
            e[e.len() - 1]
        ),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut toy: Option<ToyRun> = None;
    let cli_dir = tempfile::tempdir().unwrap();
    let mut cli_ok = false;
    let mut failed = 0;
    let mut run = |k: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(k) {
            return;
        }
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {k:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {k:>2} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    };
    run(1, "gradient fidelity", &mut gradient_fidelity);
    run(2, "spectral-conv oracle", &mut spectral_oracle);
    run(3, "VQ invariants", &mut vq_invariants);
    run(4, "metric oracles", &mut metric_oracles);
    run(5, "classifier training", &mut classifier_training);
    run(6, "generator training", &mut || {
        generator_training(&mut toy)
    });
    run(7, "cross-language totality", &mut || {
        if toy.is_none() {
            toy = Some(toy_run().0);
        }
        cross_language(&toy)
    });
    run(8, "report structure", &mut || {
        let r = report_structure(cli_dir.path());
        cli_ok = r.is_ok();
        r
    });
    run(9, "determinism", &mut || {
        determinism(cli_ok.then(|| cli_dir.path()))
    });
    run(10, "DSP round-trips", &mut dsp_round_trips);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
