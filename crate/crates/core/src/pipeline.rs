//! Corpus-level runs: training, evaluation, ablation and embedding export,
//! with their CSV reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::audio::{
    extract_f0, mel_spectrogram, resample_frames, AudioClip, DspError, F0Contour, MelSpectrogram,
    SpectrogramConfig,
};
use crate::classifier::{
    nearest_in_block, quantize, train_classifier, ClassifierConfig, ClassifierEpoch,
    ClassifierModel, ClassifierTrainConfig, EmotionLabel, Utilization, CODES_PER_EMOTION,
    EMBED_DIM,
};
use crate::config::{AblationConfig, ConfigError, EvalConfig, RunConfig};
use crate::data::{load_clip, open_corpus, CorpusEntry, CorpusError, CorpusIndex, Language, Split};
use crate::generator::{
    convert, convert_mel, make_triple, train_generator, GeneratorConfig, GeneratorEpoch,
    GeneratorModel, GeneratorTrainConfig, Triple,
};
use crate::metrics::{self, Confusion, MetricError, TestResult};
use crate::persist::CheckpointError;
use crate::ModelError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Context {
        context: String,
        source: Box<PipelineError>,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn context<T, E: Into<PipelineError>>(
    r: std::result::Result<T, E>,
    what: impl FnOnce() -> String,
) -> Result<T> {
    r.map_err(|e| PipelineError::Context {
        context: what(),
        source: Box::new(e.into()),
    })
}

/// A corpus directory with its index.
pub struct Corpus {
    root: PathBuf,
    index: CorpusIndex,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Corpus {
            root: root.to_path_buf(),
            index: open_corpus(root)?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> &CorpusIndex {
        &self.index
    }

    /// Audio of an entry at the analysis sample rate.
    pub fn clip(&self, entry: &CorpusEntry, cfg: &SpectrogramConfig) -> Result<AudioClip> {
        let clip = context(load_clip(&self.root, entry), || entry.id())?;
        Ok(clip.resample(cfg.sample_rate))
    }

    pub fn mel(&self, entry: &CorpusEntry, cfg: &SpectrogramConfig) -> Result<MelSpectrogram> {
        let clip = self.clip(entry, cfg)?;
        context(mel_spectrogram(&clip, cfg), || entry.id())
    }

    /// Labelled mels of the emotional clips in a split.
    pub fn labelled(
        &self,
        split: Split,
        cfg: &SpectrogramConfig,
    ) -> Result<Vec<(MelSpectrogram, EmotionLabel)>> {
        self.index
            .emotional(split)
            .map(|e| Ok((self.mel(e, cfg)?, e.emotion)))
            .collect()
    }

    fn position(&self, entry: &CorpusEntry) -> usize {
        self.index
            .entries
            .iter()
            .position(|e| std::ptr::eq(e, entry))
            .expect("entry belongs to the index")
    }

    fn entry(&self, i: usize) -> &CorpusEntry {
        &self.index.entries[i]
    }
}

pub fn fit_classifier(
    corpus: &Corpus,
    config: &ClassifierConfig,
    train: &ClassifierTrainConfig,
) -> Result<(ClassifierModel, Vec<ClassifierEpoch>)> {
    let tr = corpus.labelled(Split::Train, &config.spectrogram)?;
    let val = corpus.labelled(Split::Val, &config.spectrogram)?;
    log::info!(
        "classifier: {} train and {} validation clips",
        tr.len(),
        val.len()
    );
    let mut model = ClassifierModel::new(config.clone())?;
    let history = train_classifier(&mut model, &tr, &val, train)?;
    Ok((model, history))
}

/// One triple per emotional training clip: its neutral rendition as source
/// and the clip itself as both reference and target. Clips without a
/// neutral source are skipped.
pub fn training_triples(
    corpus: &Corpus,
    classifier: &ClassifierModel,
    cfg: &SpectrogramConfig,
) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for e in corpus.index.emotional(Split::Train) {
        let Some(src) = corpus.index.neutral_source(e) else {
            log::warn!("{}: no neutral source, skipped", e.id());
            continue;
        };
        let source = corpus.clip(src, cfg)?;
        let target = corpus.clip(e, cfg)?;
        out.push(context(
            make_triple(classifier, &source, &target, &target, cfg),
            || e.id(),
        )?);
    }
    Ok(out)
}

pub fn fit_generator(
    corpus: &Corpus,
    classifier: &ClassifierModel,
    config: &GeneratorConfig,
    train: &GeneratorTrainConfig,
) -> Result<(GeneratorModel, Vec<GeneratorEpoch>)> {
    let triples = training_triples(corpus, classifier, &config.spectrogram)?;
    log::info!("generator: {} training triples", triples.len());
    let mut model = GeneratorModel::new(config.clone())?;
    let history = train_generator(&mut model, classifier, &triples, train)?;
    Ok((model, history))
}

/// How evaluation references are chosen for each target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Same speaker and language, another utterance when one exists.
    SameSpeaker,
    /// Same language, another speaker.
    SpeakerIndependent,
    /// The other language, another speaker when one exists.
    CrossLanguage,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [
        EvalMode::SameSpeaker,
        EvalMode::SpeakerIndependent,
        EvalMode::CrossLanguage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::SameSpeaker => "same-speaker",
            EvalMode::SpeakerIndependent => "speaker-independent",
            EvalMode::CrossLanguage => "cross-language",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!("unknown mode {s:?}; expected same-speaker, speaker-independent or cross-language")
            })
    }
}

/// Indices into the corpus index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub target: usize,
    pub source: usize,
    pub reference: usize,
}

/// Targets are the non-neutral emotional test clips that have a neutral
/// source; references come from the emotional test clips of the same
/// emotion, drawn with a seeded generator.
pub fn eval_pairs(corpus: &Corpus, mode: EvalMode, seed: u64) -> Result<Vec<EvalPair>> {
    let idx = &corpus.index;
    let pool: Vec<&CorpusEntry> = idx.emotional(Split::Test).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in pool.iter().filter(|e| e.emotion != EmotionLabel::Neutral) {
        let Some(src) = idx.neutral_source(t) else {
            log::warn!("{}: no neutral source, skipped", t.id());
            continue;
        };
        let same_emotion = pool.iter().filter(|r| r.emotion == t.emotion);
        let candidates: Vec<&&CorpusEntry> = match mode {
            EvalMode::SameSpeaker => {
                let c: Vec<_> = same_emotion
                    .filter(|r| r.speaker == t.speaker && r.language == t.language)
                    .filter(|r| r.utterance != t.utterance)
                    .collect();
                if c.is_empty() {
                    vec![t]
                } else {
                    c
                }
            }
            EvalMode::SpeakerIndependent => same_emotion
                .filter(|r| r.speaker != t.speaker && r.language == t.language)
                .collect(),
            EvalMode::CrossLanguage => {
                let other: Vec<_> = same_emotion.filter(|r| r.language != t.language).collect();
                let diff: Vec<_> = other
                    .iter()
                    .copied()
                    .filter(|r| r.speaker != t.speaker)
                    .collect();
                if diff.is_empty() {
                    other
                } else {
                    diff
                }
            }
        };
        if candidates.is_empty() {
            return Err(PipelineError::Invalid(format!(
                "{mode}: no reference candidate for {}",
                t.id()
            )));
        }
        let r = candidates[rng.gen_range(0..candidates.len())];
        out.push(EvalPair {
            target: corpus.position(t),
            source: corpus.position(src),
            reference: corpus.position(r),
        });
    }
    if out.is_empty() {
        return Err(PipelineError::Invalid(
            "no evaluation targets in the test split".into(),
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairResult {
    pub target: String,
    pub source: String,
    pub reference: String,
    pub emotion: EmotionLabel,
    pub reference_emotion: EmotionLabel,
    pub reference_language: Language,
    pub reference_code: usize,
    pub predicted: EmotionLabel,
    pub mcd: f64,
    pub ssim: f64,
    /// SSIM of the unconverted input against the target.
    pub ssim_input: f64,
    pub pcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmotionQuality {
    pub emotion: EmotionLabel,
    pub n: usize,
    pub mcd: f64,
    pub ssim: f64,
    pub ser_accuracy: f64,
    pub pcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodePcc {
    pub emotion: EmotionLabel,
    pub code: usize,
    pub n: usize,
    pub pcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Significance {
    pub emotion: EmotionLabel,
    pub n: usize,
    pub t: f64,
    pub t_p: f64,
    pub wilcoxon_v: f64,
    pub wilcoxon_p: f64,
}

pub struct EvalReport {
    pub mode: EvalMode,
    pub pairs: Vec<PairResult>,
    pub quality: Vec<EmotionQuality>,
    /// Classification of the test clips of all five emotions.
    pub confusion: Confusion,
    pub utilization: Utilization,
    pub pcc_by_code: Vec<CodePcc>,
    pub significance: Vec<Significance>,
}

pub const EVAL_FILES: [&str; 6] = [
    "quality.csv",
    "confusion.csv",
    "utilization.csv",
    "pcc_by_code.csv",
    "significance.csv",
    "per_pair.csv",
];

/// Nearest-frame resampling of a contour to `n` frames.
fn warp_contour(c: &F0Contour, n: usize) -> F0Contour {
    let len = c.len();
    let f0 = (0..n)
        .map(|i| {
            if len == 0 {
                0.0
            } else if n == 1 {
                c.f0()[0]
            } else {
                c.f0()[(i as f64 * (len - 1) as f64 / (n - 1) as f64).round() as usize]
            }
        })
        .collect();
    F0Contour::new(f0, c.hop_length())
}

fn mean_finite(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v
        .into_iter()
        .filter(|x| x.is_finite())
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn or_nan(what: impl fmt::Display, r: std::result::Result<TestResult, MetricError>) -> (f64, f64) {
    match r {
        Ok(t) => (t.statistic, t.p_value),
        Err(e) => {
            log::warn!("{what}: {e}; reporting NaN");
            (f64::NAN, f64::NAN)
        }
    }
}

/// Converts every pair with Griffin-Lim resynthesis and scores it. The
/// target mel is time-warped to the output length for MCD and SSIM.
pub fn evaluate(
    corpus: &Corpus,
    classifier: &ClassifierModel,
    generator: &GeneratorModel,
    mode: EvalMode,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let spec = &generator.config().spectrogram;
    if classifier.config().spectrogram != *spec {
        return Err(PipelineError::Invalid(
            "classifier and generator use different spectrogram settings".into(),
        ));
    }
    let pairs = eval_pairs(corpus, mode, cfg.seed)?;
    log::info!("evaluating {} pairs ({mode})", pairs.len());
    let mut results = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let (t, s, r) = (
            corpus.entry(p.target),
            corpus.entry(p.source),
            corpus.entry(p.reference),
        );
        let what = || format!("pair {} <- {}", t.id(), r.id());
        let source = corpus.clip(s, spec)?;
        let reference = corpus.clip(r, spec)?;
        let target = corpus.clip(t, spec)?;
        let (audio, conv) = context(
            convert(
                generator,
                classifier,
                &source,
                &reference,
                cfg.griffin_lim_iterations,
            ),
            what,
        )?;
        let n = conv.mel.n_frames();
        let target_mel = resample_frames(&mel_spectrogram(&target, spec)?, n)?;
        let input_mel = mel_spectrogram(&source, spec)?;
        let target_f0 = extract_f0(&target, spec)?;
        let out_f0 = extract_f0(&audio, spec)?;
        let pcc =
            metrics::pcc(&out_f0, &warp_contour(&target_f0, out_f0.len())).unwrap_or(f64::NAN);
        results.push(PairResult {
            target: t.id(),
            source: s.id(),
            reference: r.id(),
            emotion: t.emotion,
            reference_emotion: r.emotion,
            reference_language: r.language,
            reference_code: conv.diagnostics.reference_code,
            predicted: classifier.classify(&conv.mel)?.label,
            mcd: metrics::mcd(&conv.mel, &target_mel)?,
            ssim: metrics::ssim(&conv.mel, &target_mel)?,
            ssim_input: metrics::ssim(&input_mel, &target_mel)?,
            pcc,
        });
    }

    let mut by_emotion: BTreeMap<EmotionLabel, Vec<&PairResult>> = BTreeMap::new();
    for r in &results {
        by_emotion.entry(r.emotion).or_default().push(r);
    }
    let quality = by_emotion
        .iter()
        .map(|(e, rs)| EmotionQuality {
            emotion: *e,
            n: rs.len(),
            mcd: mean_finite(rs.iter().map(|r| r.mcd)),
            ssim: mean_finite(rs.iter().map(|r| r.ssim)),
            ser_accuracy: rs
                .iter()
                .filter(|r| r.predicted == r.reference_emotion)
                .count() as f64
                / rs.len() as f64,
            pcc: mean_finite(rs.iter().map(|r| r.pcc)),
        })
        .collect();
    let significance = by_emotion
        .iter()
        .map(|(e, rs)| {
            let a: Vec<f64> = rs.iter().map(|r| r.ssim).collect();
            let b: Vec<f64> = rs.iter().map(|r| r.ssim_input).collect();
            let (t, t_p) = or_nan(format!("{e} t-test"), metrics::one_tailed_t_test(&a, &b));
            let (wilcoxon_v, wilcoxon_p) = or_nan(
                format!("{e} Wilcoxon"),
                metrics::wilcoxon_signed_rank(&a, &b),
            );
            Significance {
                emotion: *e,
                n: rs.len(),
                t,
                t_p,
                wilcoxon_v,
                wilcoxon_p,
            }
        })
        .collect();
    let mut by_code: BTreeMap<(EmotionLabel, usize), Vec<f64>> = BTreeMap::new();
    for r in &results {
        by_code
            .entry((r.emotion, r.reference_code))
            .or_default()
            .push(r.pcc);
    }
    let pcc_by_code = by_code
        .into_iter()
        .map(|((emotion, code), v)| CodePcc {
            emotion,
            code,
            n: v.len(),
            pcc: mean_finite(v),
        })
        .collect();

    let test = corpus.labelled(Split::Test, spec)?;
    let predictions = test
        .iter()
        .map(|(m, l)| Ok((*l, classifier.classify(m)?.label)))
        .collect::<Result<Vec<_>>>()?;
    let confusion = metrics::ser_accuracy(&predictions)?;
    let utilization = crate::classifier::codebook_utilization(classifier, &test)?;
    Ok(EvalReport {
        mode,
        pairs: results,
        quality,
        confusion,
        utilization,
        pcc_by_code,
        significance,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| PipelineError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |source| PipelineError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes rows with a header taken from the field names.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes the effective configuration next to a run's outputs.
pub fn echo_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(path, cfg)
}

fn pct_header(first: &str, cols: impl Iterator<Item = String>) -> Vec<String> {
    std::iter::once(first.to_string()).chain(cols).collect()
}

fn utilization_table(u: &Utilization) -> (Vec<String>, Vec<Vec<String>>) {
    let header = pct_header(
        "emotion",
        (0..CODES_PER_EMOTION).map(|q| format!("code_{q}")),
    );
    let rows = EmotionLabel::ALL
        .iter()
        .map(|e| {
            std::iter::once(e.name().to_string())
                .chain(u.percent[e.index()].iter().map(|v| v.to_string()))
                .collect()
        })
        .collect();
    (header, rows)
}

impl EvalReport {
    /// Writes the six report CSVs into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_rows(&dir.join("quality.csv"), &self.quality)?;
        let header = pct_header(
            "true",
            EmotionLabel::ALL.iter().map(|e| e.name().to_string()),
        );
        let rows: Vec<Vec<String>> = EmotionLabel::ALL
            .iter()
            .map(|e| {
                std::iter::once(e.name().to_string())
                    .chain(
                        self.confusion.percent[e.index()]
                            .iter()
                            .map(|v| v.to_string()),
                    )
                    .collect()
            })
            .collect();
        write_table(&dir.join("confusion.csv"), &header, &rows)?;
        let (header, rows) = utilization_table(&self.utilization);
        write_table(&dir.join("utilization.csv"), &header, &rows)?;
        write_rows(&dir.join("pcc_by_code.csv"), &self.pcc_by_code)?;
        write_rows(&dir.join("significance.csv"), &self.significance)?;
        write_rows(&dir.join("per_pair.csv"), &self.pairs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyTrial {
    pub trial: usize,
    pub emotion: EmotionLabel,
    pub vq: f64,
    pub plain: f64,
}

/// One row of the per-emotion ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyTest {
    pub emotion: EmotionLabel,
    pub trials: usize,
    pub mean_vq: f64,
    pub mean_plain: f64,
    pub t: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SsimTrial {
    pub trial: usize,
    pub spectral: f64,
    pub conv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WilcoxonSummary {
    pub trials: usize,
    pub mean_spectral: f64,
    pub mean_conv: f64,
    pub v: f64,
    pub p_value: f64,
}

pub struct AblationReport {
    pub table: Vec<AccuracyTest>,
    pub accuracy_trials: Vec<AccuracyTrial>,
    pub ssim_trials: Vec<SsimTrial>,
    pub wilcoxon: WilcoxonSummary,
}

pub const ABLATION_FILES: [&str; 4] = [
    "table10.csv",
    "accuracy_trials.csv",
    "ssim_trials.csv",
    "wilcoxon.csv",
];

fn sample_mean(rng: &mut ChaCha8Rng, v: &[f64], k: usize) -> f64 {
    (0..k).map(|_| v[rng.gen_range(0..v.len())]).sum::<f64>() / k as f64
}

/// Trains the codebook and codebook-free classifiers and the spectral and
/// convolutional generators, then compares them over bootstrap trials:
/// per-emotion test accuracy (one-tailed t-test, codebook > plain) and
/// mean identity-conversion SSIM (Wilcoxon, spectral > conv).
pub fn ablate(corpus: &Corpus, cfg: &RunConfig) -> Result<AblationReport> {
    let ab: &AblationConfig = &cfg.ablation;
    let spec = &cfg.classifier.spectrogram;
    let ctrain = ClassifierTrainConfig {
        epochs: ab.classifier_epochs,
        ..cfg.classifier_train.clone()
    };
    let (vq, _) = fit_classifier(
        corpus,
        &ClassifierConfig {
            use_vq: true,
            ..cfg.classifier.clone()
        },
        &ctrain,
    )?;
    let (plain, _) = fit_classifier(
        corpus,
        &ClassifierConfig {
            use_vq: false,
            ..cfg.classifier.clone()
        },
        &ctrain,
    )?;
    let test = corpus.labelled(Split::Test, spec)?;
    let mut hits: BTreeMap<EmotionLabel, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (mel, label) in &test {
        let h = hits.entry(*label).or_default();
        h.0.push(f64::from(u8::from(vq.classify(mel)?.label == *label)));
        h.1.push(f64::from(u8::from(plain.classify(mel)?.label == *label)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ab.seed);
    let mut accuracy_trials = Vec::new();
    for trial in 0..ab.trials {
        for (e, (a, b)) in &hits {
            // both models see the same draws
            let mut r2 = rng.clone();
            let vq_acc = sample_mean(&mut rng, a, ab.samples_per_trial);
            let plain_acc = sample_mean(&mut r2, b, ab.samples_per_trial);
            accuracy_trials.push(AccuracyTrial {
                trial,
                emotion: *e,
                vq: vq_acc,
                plain: plain_acc,
            });
        }
    }
    let table = hits
        .keys()
        .map(|e| {
            let (a, b): (Vec<f64>, Vec<f64>) = accuracy_trials
                .iter()
                .filter(|r| r.emotion == *e)
                .map(|r| (r.vq, r.plain))
                .unzip();
            let (t, p_value) = or_nan(
                format!("{e} accuracy t-test"),
                metrics::one_tailed_t_test(&a, &b),
            );
            AccuracyTest {
                emotion: *e,
                trials: a.len(),
                mean_vq: mean_finite(a.iter().copied()),
                mean_plain: mean_finite(b.iter().copied()),
                t,
                p_value,
            }
        })
        .collect();

    let gtrain = GeneratorTrainConfig {
        epochs: ab.generator_epochs,
        ..cfg.generator_train.clone()
    };
    let triples = training_triples(corpus, &vq, spec)?;
    let fit = |use_spectral_conv: bool| -> Result<GeneratorModel> {
        let mut g = GeneratorModel::new(GeneratorConfig {
            use_spectral_conv,
            ..cfg.generator.clone()
        })?;
        train_generator(&mut g, &vq, &triples, &gtrain)?;
        Ok(g)
    };
    let spectral = fit(true)?;
    let conv = fit(false)?;
    let pairs = eval_pairs(corpus, EvalMode::SameSpeaker, ab.seed)?;
    let mut scores = (Vec::new(), Vec::new());
    for p in &pairs {
        let source = corpus.clip(corpus.entry(p.source), spec)?;
        let target = corpus.clip(corpus.entry(p.target), spec)?;
        for (model, out) in [(&spectral, &mut scores.0), (&conv, &mut scores.1)] {
            let c = convert_mel(model, &vq, &source, &target)?;
            let t = resample_frames(&mel_spectrogram(&target, spec)?, c.mel.n_frames())?;
            out.push(metrics::ssim(&c.mel, &t)?);
        }
    }
    let mut ssim_trials = Vec::with_capacity(ab.trials);
    for trial in 0..ab.trials {
        let mut r2 = rng.clone();
        ssim_trials.push(SsimTrial {
            trial,
            spectral: sample_mean(&mut rng, &scores.0, ab.samples_per_trial),
            conv: sample_mean(&mut r2, &scores.1, ab.samples_per_trial),
        });
    }
    let a: Vec<f64> = ssim_trials.iter().map(|s| s.spectral).collect();
    let b: Vec<f64> = ssim_trials.iter().map(|s| s.conv).collect();
    let (v, p_value) = or_nan("SSIM Wilcoxon", metrics::wilcoxon_signed_rank(&a, &b));
    let wilcoxon = WilcoxonSummary {
        trials: a.len(),
        mean_spectral: mean_finite(a.iter().copied()),
        mean_conv: mean_finite(b.iter().copied()),
        v,
        p_value,
    };
    Ok(AblationReport {
        table,
        accuracy_trials,
        ssim_trials,
        wilcoxon,
    })
}

impl AblationReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_rows(&dir.join("table10.csv"), &self.table)?;
        write_rows(&dir.join("accuracy_trials.csv"), &self.accuracy_trials)?;
        write_rows(&dir.join("ssim_trials.csv"), &self.ssim_trials)?;
        write_rows(
            &dir.join("wilcoxon.csv"),
            std::slice::from_ref(&self.wilcoxon),
        )
    }
}

pub struct EmbeddingRow {
    pub id: String,
    pub split: Split,
    pub emotion: EmotionLabel,
    /// Global nearest code.
    pub code: usize,
    /// Nearest code within the clip's own emotion block.
    pub block_code: usize,
    pub z: Vec<f64>,
    pub pca: [f64; 3],
}

pub struct Embedding {
    pub rows: Vec<EmbeddingRow>,
    pub utilization: Utilization,
}

/// First three principal-component scores of the rows of `x`. Each
/// component is signed so that its largest-magnitude loading is positive.
pub fn pca3(x: &[Vec<f64>]) -> Vec<[f64; 3]> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let d = x[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let mut out = vec![[0.0; 3]; n];
    for (k, &c) in order.iter().take(3).enumerate() {
        let mut v: Vec<f64> = vt.row(c).iter().copied().collect();
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, w| if w.abs() > acc.abs() { w } else { acc });
        if big < 0.0 {
            v.iter_mut().for_each(|w| *w = -*w);
        }
        for (i, o) in out.iter_mut().enumerate() {
            o[k] = (0..d).map(|j| m[(i, j)] * v[j]).sum();
        }
    }
    out
}

/// Encoder outputs and code assignments of every emotional clip.
pub fn embed(corpus: &Corpus, classifier: &ClassifierModel) -> Result<Embedding> {
    let cb = classifier.codebook().ok_or_else(|| {
        PipelineError::Invalid("embedding export needs a codebook classifier".into())
    })?;
    let spec = &classifier.config().spectrogram;
    let mut rows = Vec::new();
    for e in corpus
        .index
        .entries
        .iter()
        .filter(|e| e.role == crate::data::ClipRole::Emotional)
    {
        let z = classifier.encode(&corpus.mel(e, spec)?)?;
        let post = quantize(&cb, &z, classifier.config().temperature)?;
        let block_code = nearest_in_block(&cb.cosines(&z)?, e.emotion);
        rows.push(EmbeddingRow {
            id: e.id(),
            split: e.split,
            emotion: e.emotion,
            code: post.hard_index,
            block_code,
            z,
            pca: [0.0; 3],
        });
    }
    if rows.is_empty() {
        return Err(PipelineError::Invalid(
            "corpus has no emotional clips".into(),
        ));
    }
    let zs: Vec<Vec<f64>> = rows.iter().map(|r| r.z.clone()).collect();
    for (r, p) in rows.iter_mut().zip(pca3(&zs)) {
        r.pca = p;
    }
    let assignments: Vec<_> = rows.iter().map(|r| (r.emotion, r.block_code)).collect();
    let utilization = Utilization::from_assignments(&assignments)?;
    Ok(Embedding { rows, utilization })
}

impl Embedding {
    /// Writes the per-clip table to `path` and the utilization summary to
    /// `<stem>_utilization.csv` beside it.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        let mut header: Vec<String> = [
            "id",
            "split",
            "emotion",
            "code",
            "code_emotion",
            "block_code",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..EMBED_DIM).map(|j| format!("z_{j}")));
        header.extend((0..3).map(|k| format!("pca_{k}")));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let split = match r.split {
                    Split::Train => "train",
                    Split::Val => "val",
                    Split::Test => "test",
                };
                let mut row = vec![
                    r.id.clone(),
                    split.to_string(),
                    r.emotion.name().to_string(),
                    r.code.to_string(),
                    EmotionLabel::of_code(r.code).name().to_string(),
                    r.block_code.to_string(),
                ];
                row.extend(r.z.iter().map(|v| v.to_string()));
                row.extend(r.pca.iter().map(|v| v.to_string()));
                row
            })
            .collect();
        write_table(path, &header, &rows)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("embeddings");
        let upath = path.with_file_name(format!("{stem}_utilization.csv"));
        let (header, rows) = utilization_table(&self.utilization);
        write_table(&upath, &header, &rows)?;
        Ok(upath)
    }
}

/// One row per frame, one column per mel band, no header.
pub fn write_mel_csv(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    for t in 0..mel.n_frames() {
        w.write_record(mel.frame(t).iter().map(|v| v.to_string()))
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
