//! Synthetic emotional speech, corpus indexes and the ESD directory layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_wav, save_wav, AudioClip, DspError};
use crate::classifier::EmotionLabel;

pub const SYNTH_SAMPLE_RATE: u32 = 24_000;
/// Speaking rate at which syllables take their base durations.
const REFERENCE_RATE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("no usable clips under {0}")]
    Empty(String),
    #[error("invalid corpus request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContourShape {
    Rising,
    Falling,
    Flat,
    Peaked,
}

impl ContourShape {
    /// Zero-mean offset in `[-0.5, 0.5]` at utterance position `u ∈ [0, 1]`.
    fn at(self, u: f64) -> f64 {
        match self {
            ContourShape::Rising => u - 0.5,
            ContourShape::Falling => 0.5 - u,
            ContourShape::Flat => 0.0,
            ContourShape::Peaked => (std::f64::consts::PI * u).sin() - 2.0 / std::f64::consts::PI,
        }
    }
}

/// Prosodic parameters of one emotion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionProfile {
    /// Hz.
    pub f0_mean: f64,
    /// Peak-to-peak excursion of the contour, Hz.
    pub f0_range: f64,
    pub energy: f64,
    /// Syllables per second.
    pub rate: f64,
    /// Fractional per-period F0 perturbation.
    pub jitter: f64,
    pub contour_shape: ContourShape,
}

impl EmotionProfile {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.f0_mean > 0.0) {
            return Err(CorpusError::Invalid("f0_mean must be positive".into()));
        }
        if !(0.0..0.2).contains(&self.jitter) {
            return Err(CorpusError::Invalid("jitter must be in [0, 0.2)".into()));
        }
        if !(self.rate > 0.0 && self.energy >= 0.0 && self.f0_range >= 0.0) {
            return Err(CorpusError::Invalid(
                "rate must be positive and energy, f0_range non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Default profile per emotion. Angry, Happy and Surprised sit close
    /// together; Sad is far from all three.
    pub fn default_for(emotion: EmotionLabel) -> EmotionProfile {
        let p = |f0_mean, f0_range, energy, rate, jitter, contour_shape| EmotionProfile {
            f0_mean,
            f0_range,
            energy,
            rate,
            jitter,
            contour_shape,
        };
        match emotion {
            EmotionLabel::Angry => p(225.0, 60.0, 0.9, 5.4, 0.03, ContourShape::Falling),
            EmotionLabel::Happy => p(250.0, 80.0, 0.75, 4.8, 0.015, ContourShape::Rising),
            EmotionLabel::Neutral => p(160.0, 20.0, 0.5, 4.0, 0.01, ContourShape::Flat),
            EmotionLabel::Sad => p(120.0, 15.0, 0.28, 3.0, 0.02, ContourShape::Falling),
            EmotionLabel::Surprised => p(285.0, 110.0, 0.7, 4.4, 0.015, ContourShape::Peaked),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Language {
    A,
    B,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::A => "A",
            Language::B => "B",
        })
    }
}

impl FromStr for Language {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Language::A),
            "B" | "b" => Ok(Language::B),
            _ => Err(format!("unknown language tag {s:?}")),
        }
    }
}

// (F1, F2, F3) in Hz
const VOWELS_A: [(f64, f64, f64); 5] = [
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (300.0, 870.0, 2240.0),
    (530.0, 1840.0, 2480.0),
    (570.0, 840.0, 2410.0),
];
const VOWELS_B: [(f64, f64, f64); 5] = [
    (850.0, 1220.0, 2810.0),
    (290.0, 2100.0, 3200.0),
    (350.0, 1300.0, 2300.0),
    (460.0, 1650.0, 2650.0),
    (620.0, 1000.0, 2600.0),
];

#[derive(Clone, Copy)]
enum Tone {
    Level,
    Rise,
    Fall,
    Dip,
}

impl Tone {
    fn at(self, v: f64) -> f64 {
        match self {
            Tone::Level => 0.0,
            Tone::Rise => v - 0.5,
            Tone::Fall => 0.5 - v,
            Tone::Dip => 2.0 / std::f64::consts::PI - (std::f64::consts::PI * v).sin(),
        }
    }
}

struct Syllable {
    formants: (f64, f64, f64),
    start: usize,
    len: usize,
    tone: Tone,
}

/// Two-pole resonator with unit gain at DC.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, sr: f64) -> Self {
        let r = (-std::f64::consts::PI * bandwidth / sr).exp();
        let theta = std::f64::consts::TAU * freq / sr;
        let a1 = 2.0 * r * theta.cos();
        let a2 = -r * r;
        Resonator {
            a1,
            a2,
            gain: 1.0 - a1 - a2,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Rosenberg glottal pulse at phase `p ∈ [0, 1)` with opening fraction `oq`.
fn glottal(p: f64, oq: f64) -> f64 {
    let open = 0.65 * oq;
    let close = 0.35 * oq;
    if p < open {
        0.5 * (1.0 - (std::f64::consts::PI * p / open).cos())
    } else if p < open + close {
        (std::f64::consts::FRAC_PI_2 * (p - open) / close).cos()
    } else {
        0.0
    }
}

const OUTPUT_GAIN: f64 = 0.025;

/// Formant-filtered glottal-pulse "speech". Content (syllables, base
/// durations, jitter sequence) depends only on the seeds and language, so
/// two profiles rendered with the same seeds differ only in prosody, with
/// every segment's duration scaled by `4 / rate`.
pub fn synth_clip(
    profile: &EmotionProfile,
    speaker_seed: u64,
    utterance_seed: u64,
    language: Language,
) -> Result<AudioClip, CorpusError> {
    profile.validate()?;
    let sr = SYNTH_SAMPLE_RATE as f64;
    let mut spk = ChaCha8Rng::seed_from_u64(speaker_seed);
    let formant_scale = spk.gen_range(0.9..1.1);
    let open_quotient = spk.gen_range(0.5..0.7);
    let breath = spk.gen_range(0.01..0.03);

    let mut utt = ChaCha8Rng::seed_from_u64(utterance_seed);
    let scale = REFERENCE_RATE / profile.rate;
    let samples_for = |secs: f64| (secs * scale * sr).round() as usize;
    let n_syl = utt.gen_range(3..=5);
    let inventory = match language {
        Language::A => &VOWELS_A,
        Language::B => &VOWELS_B,
    };
    let mut pos = samples_for(0.04);
    let mut syllables = Vec::with_capacity(n_syl);
    for _ in 0..n_syl {
        let v = inventory[utt.gen_range(0..inventory.len())];
        let len = samples_for(utt.gen_range(0.12..0.2));
        let gap = samples_for(utt.gen_range(0.02..0.05));
        let tone = match language {
            Language::A => Tone::Level,
            Language::B => [Tone::Level, Tone::Rise, Tone::Fall, Tone::Dip][utt.gen_range(0..4)],
        };
        syllables.push(Syllable {
            formants: (
                v.0 * formant_scale,
                v.1 * formant_scale,
                v.2 * formant_scale,
            ),
            start: pos,
            len,
            tone,
        });
        pos += len + gap;
    }
    let total = pos + samples_for(0.04);

    let mut noise_rng = ChaCha8Rng::seed_from_u64(utterance_seed ^ speaker_seed.rotate_left(17));
    let mut out = vec![0.0; total];
    let tone_depth = 0.35 * profile.f0_range + 15.0;
    let mut phase = 0.0;
    let mut period_jitter = 0.0;
    let mut prev_pulse = 0.0;
    for s in &syllables {
        let mut chain = [
            Resonator::new(s.formants.0, 130.0, sr),
            Resonator::new(s.formants.1, 160.0, sr),
            Resonator::new(s.formants.2, 200.0, sr),
        ];
        let ramp = (0.015 * sr) as usize;
        for i in 0..s.len {
            let n = s.start + i;
            let u = n as f64 / total as f64;
            let v = i as f64 / s.len as f64;
            let f0 = (profile.f0_mean
                + profile.f0_range * profile.contour_shape.at(u)
                + tone_depth * s.tone.at(v))
            .max(50.0)
                * (1.0 + period_jitter);
            phase += f0 / sr;
            if phase >= 1.0 {
                phase -= 1.0;
                period_jitter = profile.jitter * noise_rng.gen_range(-1.0..1.0);
            }
            let pulse = glottal(phase, open_quotient);
            let mut x = (pulse - prev_pulse) * (sr / f0) + breath * noise_rng.gen_range(-1.0..1.0);
            prev_pulse = pulse;
            for r in chain.iter_mut() {
                x = r.step(x);
            }
            let env = if i < ramp {
                0.5 * (1.0 - (std::f64::consts::PI * i as f64 / ramp as f64).cos())
            } else if s.len - i <= ramp {
                0.5 * (1.0 - (std::f64::consts::PI * (s.len - i) as f64 / ramp as f64).cos())
            } else {
                1.0
            };
            out[n] = OUTPUT_GAIN * profile.energy * env * x;
        }
    }
    // quantize to the 16-bit grid so that a WAV round trip is lossless
    for (n, v) in out.iter_mut().enumerate() {
        let _ = n;
        *v = ((*v + 3e-4 * noise_rng.gen_range(-1.0..1.0)).clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0)
            / 32768.0;
    }
    Ok(AudioClip::new(out, SYNTH_SAMPLE_RATE)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// `Emotional` clips carry their label's prosody; `Parallel` clips are the
/// neutral rendition of the same utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipRole {
    Emotional,
    Parallel,
}

/// Parameters from which a synthetic clip can be regenerated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub speaker_seed: u64,
    pub utterance_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    /// Path relative to the corpus root, if the clip exists on disk.
    pub path: Option<String>,
    pub synth: Option<SynthSpec>,
    pub speaker: String,
    pub emotion: EmotionLabel,
    pub language: Language,
    pub utterance: String,
    pub role: ClipRole,
    pub split: Split,
}

impl CorpusEntry {
    /// Stable identifier from speaker, utterance and emotion (or role).
    pub fn id(&self) -> String {
        let tag = match self.role {
            ClipRole::Emotional => self.emotion.name().to_ascii_lowercase(),
            ClipRole::Parallel => "parallel".into(),
        };
        format!("{}_{}_{tag}", self.speaker, self.utterance)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusIndex {
    pub entries: Vec<CorpusEntry>,
}

pub const INDEX_FILE: &str = "index.jsonl";

impl CorpusIndex {
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let f = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("entries serialize");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(CorpusError::Empty(path.display().to_string()));
        }
        Ok(CorpusIndex { entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Labelled clips of a split (`Emotional` role only).
    pub fn emotional(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.split(split).filter(|e| e.role == ClipRole::Emotional)
    }

    /// The neutral source for an entry: its parallel rendition if the corpus
    /// has one, otherwise a Neutral-labelled clip of the same speaker and
    /// utterance.
    pub fn neutral_source(&self, entry: &CorpusEntry) -> Option<&CorpusEntry> {
        let same = |e: &&CorpusEntry| e.speaker == entry.speaker && e.utterance == entry.utterance;
        self.entries
            .iter()
            .filter(same)
            .find(|e| e.role == ClipRole::Parallel)
            .or_else(|| {
                self.entries
                    .iter()
                    .filter(same)
                    .find(|e| e.emotion == EmotionLabel::Neutral && e.role == ClipRole::Emotional)
            })
    }
}

/// Loads the audio of an entry, regenerating synthetic clips that are not
/// on disk.
pub fn load_clip(root: &Path, entry: &CorpusEntry) -> Result<AudioClip, CorpusError> {
    if let Some(p) = &entry.path {
        let full = root.join(p);
        if full.exists() || entry.synth.is_none() {
            return Ok(load_wav(full)?);
        }
    }
    render_synthetic(entry)
}

/// Synthesizes an entry from its [`SynthSpec`].
pub fn render_synthetic(entry: &CorpusEntry) -> Result<AudioClip, CorpusError> {
    match &entry.synth {
        Some(s) => {
            let emotion = match entry.role {
                ClipRole::Emotional => entry.emotion,
                ClipRole::Parallel => EmotionLabel::Neutral,
            };
            synth_clip(
                &EmotionProfile::default_for(emotion),
                s.speaker_seed,
                s.utterance_seed,
                entry.language,
            )
        }
        None => Err(CorpusError::Invalid(format!(
            "entry {} has neither a path nor a synthesis spec",
            entry.id()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_emotion: usize,
    pub speakers: usize,
    pub languages: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_emotion: 100,
            speakers: 2,
            languages: 2,
            seed: 0,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn seed_of(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, p| mix(acc ^ mix(*p)))
}

/// Assigns 70/20/10 splits to the sorted utterance ids of each group, after
/// a seeded shuffle.
fn assign_splits(groups: BTreeMap<String, Vec<String>>, seed: u64) -> BTreeMap<String, Split> {
    let mut out = BTreeMap::new();
    for (g, mut utts) in groups {
        utts.sort();
        utts.dedup();
        let name_hash = g.bytes().fold(0u64, |h, b| mix(h ^ u64::from(b)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed_of(&[seed, name_hash]));
        utts.shuffle(&mut rng);
        let n = utts.len();
        let n_train = (n as f64 * 0.7).round() as usize;
        let n_val = ((n as f64 * 0.2).round() as usize).min(n - n_train);
        for (i, u) in utts.into_iter().enumerate() {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            out.insert(u, s);
        }
    }
    out
}

/// Index of the synthetic corpus without rendering audio. Every emotional
/// clip has a neutral parallel with the same utterance id.
pub fn synthetic_index(cfg: &SynthConfig) -> Result<CorpusIndex, CorpusError> {
    if cfg.n_per_emotion == 0 || cfg.speakers == 0 || !(1..=2).contains(&cfg.languages) {
        return Err(CorpusError::Invalid(
            "need n_per_emotion >= 1, speakers >= 1 and languages in 1..=2".into(),
        ));
    }
    let languages = [Language::A, Language::B];
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut plan = Vec::new();
    for &lang in &languages[..cfg.languages] {
        for emotion in EmotionLabel::ALL {
            for i in 0..cfg.n_per_emotion {
                let utt = format!("{lang}-{}-{i:04}", emotion.name().to_ascii_lowercase());
                groups
                    .entry(format!("{lang}-{emotion}"))
                    .or_default()
                    .push(utt.clone());
                plan.push((lang, emotion, i, utt));
            }
        }
    }
    let splits = assign_splits(groups, cfg.seed);
    let mut entries = Vec::with_capacity(plan.len() * cfg.speakers * 2);
    for (lang, emotion, i, utt) in plan {
        let utterance_seed = seed_of(&[cfg.seed, 1, lang as u64, emotion.index() as u64, i as u64]);
        for s in 0..cfg.speakers {
            let speaker = format!("spk{s:02}");
            let synth = SynthSpec {
                speaker_seed: seed_of(&[cfg.seed, 2, s as u64]),
                utterance_seed,
            };
            for role in [ClipRole::Emotional, ClipRole::Parallel] {
                let (dir, label) = match role {
                    ClipRole::Emotional => (emotion.name(), emotion),
                    ClipRole::Parallel => ("parallel", EmotionLabel::Neutral),
                };
                entries.push(CorpusEntry {
                    path: Some(format!("clips/{speaker}/{dir}/{utt}.wav")),
                    synth: Some(synth.clone()),
                    speaker: speaker.clone(),
                    emotion: label,
                    language: lang,
                    utterance: utt.clone(),
                    role,
                    split: splits[&utt],
                });
            }
        }
    }
    Ok(CorpusIndex { entries })
}

/// Renders the synthetic corpus under `out` and writes `index.jsonl`.
pub fn build_synthetic_corpus(out: &Path, cfg: &SynthConfig) -> Result<CorpusIndex, CorpusError> {
    let index = synthetic_index(cfg)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for e in &index.entries {
        let rel = e.path.as_ref().expect("synthetic entries have paths");
        let path = out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        save_wav(&render_synthetic(e)?, &path)?;
    }
    index.save(&out.join(INDEX_FILE))?;
    Ok(index)
}

/// Language by ESD speaker number: 0001-0010 are tagged B (Chinese),
/// 0011-0020 A (English); anything else defaults to A.
fn esd_language(speaker: &str) -> Language {
    match speaker.parse::<u32>() {
        Ok(1..=10) => Language::B,
        Ok(11..=20) => Language::A,
        _ => {
            log::warn!("speaker {speaker:?} outside 0001-0020; tagging language A");
            Language::A
        }
    }
}

/// Sentence id shared by the five emotional renditions: ESD numbers clips
/// consecutively in blocks of 350 per emotion.
fn esd_utterance(speaker: &str, stem: &str) -> String {
    let num = stem.rsplit('_').next().and_then(|n| n.parse::<u32>().ok());
    match num {
        Some(n) if n > 0 => format!("{speaker}-{:03}", (n - 1) % 350),
        _ => format!("{speaker}-{stem}"),
    }
}

/// Indexes a `speaker/emotion/*.wav` tree. Unreadable WAVs are skipped with
/// a warning; splits are 70/20/10 over sentence ids (seed 0).
pub fn load_esd_layout(root: &Path) -> Result<CorpusIndex, CorpusError> {
    let mut found = Vec::new();
    let mut speakers: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.is_dir())
        .collect();
    speakers.sort();
    for sp in speakers {
        let speaker = sp.file_name().unwrap().to_string_lossy().into_owned();
        let mut seen = BTreeSet::new();
        for entry in walkdir::WalkDir::new(&sp)
            .min_depth(1)
            .max_depth(1)
            .sort_by_file_name()
        {
            let entry = entry.map_err(|e| CorpusError::Io {
                path: sp.display().to_string(),
                source: e.into(),
            })?;
            if !entry.file_type().is_dir() {
                continue;
            }
            let folder = entry.file_name().to_string_lossy().into_owned();
            let Ok(emotion) = folder.parse::<EmotionLabel>() else {
                log::warn!("{}: unknown emotion folder skipped", entry.path().display());
                continue;
            };
            seen.insert(emotion);
            for wav in walkdir::WalkDir::new(entry.path())
                .min_depth(1)
                .sort_by_file_name()
                .into_iter()
                .filter_map(Result::ok)
                .filter(|w| {
                    w.file_type().is_file()
                        && w.path()
                            .extension()
                            .is_some_and(|x| x.eq_ignore_ascii_case("wav"))
                })
            {
                if let Err(e) = hound::WavReader::open(wav.path()) {
                    log::warn!("{}: skipped ({e})", wav.path().display());
                    continue;
                }
                let rel = wav.path().strip_prefix(root).unwrap_or(wav.path());
                let stem = wav
                    .path()
                    .file_stem()
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                found.push((
                    speaker.clone(),
                    emotion,
                    rel.to_string_lossy().into_owned(),
                    stem,
                ));
            }
        }
        for e in EmotionLabel::ALL {
            if !seen.contains(&e) {
                log::warn!("speaker {speaker}: no {e} folder");
            }
        }
    }
    if found.is_empty() {
        return Err(CorpusError::Empty(root.display().to_string()));
    }
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (speaker, _, _, stem) in &found {
        groups
            .entry("all".into())
            .or_default()
            .push(esd_utterance(speaker, stem));
    }
    let splits = assign_splits(groups, 0);
    let entries = found
        .into_iter()
        .map(|(speaker, emotion, path, stem)| {
            let utterance = esd_utterance(&speaker, &stem);
            CorpusEntry {
                path: Some(path),
                synth: None,
                language: esd_language(&speaker),
                split: splits[&utterance],
                speaker,
                emotion,
                utterance,
                role: ClipRole::Emotional,
            }
        })
        .collect();
    Ok(CorpusIndex { entries })
}

/// Loads `index.jsonl` if present, otherwise indexes an ESD-style tree.
pub fn open_corpus(root: &Path) -> Result<CorpusIndex, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::Io {
            path: root.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        });
    }
    let idx = root.join(INDEX_FILE);
    if idx.exists() {
        CorpusIndex::load(&idx)
    } else {
        load_esd_layout(root)
    }
}
