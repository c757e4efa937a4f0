//! Emotion encoder with a 25-entry cosine codebook, five codes per emotion.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelSpectrogram, NormStats, SpectrogramConfig};
use crate::autodiff::{AdamConfig, Graph, OptimizerState, Tensor, TensorError, Var};
use crate::nn::{unit_sphere_rows, Bound, Conv1d, Linear, ParamId, ParamStore, TransformerBlock};
use crate::ModelError;

pub const NUM_EMOTIONS: usize = 5;
pub const CODES_PER_EMOTION: usize = 5;
pub const NUM_CODES: usize = NUM_EMOTIONS * CODES_PER_EMOTION;
pub const EMBED_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionLabel {
    Angry,
    Happy,
    Neutral,
    Sad,
    Surprised,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_EMOTIONS] = [
        EmotionLabel::Angry,
        EmotionLabel::Happy,
        EmotionLabel::Neutral,
        EmotionLabel::Sad,
        EmotionLabel::Surprised,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Angry => "Angry",
            EmotionLabel::Happy => "Happy",
            EmotionLabel::Neutral => "Neutral",
            EmotionLabel::Sad => "Sad",
            EmotionLabel::Surprised => "Surprised",
        }
    }

    /// Codebook rows owned by this emotion.
    pub fn codes(self) -> Range<usize> {
        let k = self.index() * CODES_PER_EMOTION;
        k..k + CODES_PER_EMOTION
    }

    pub fn of_code(code: usize) -> EmotionLabel {
        Self::ALL[code / CODES_PER_EMOTION]
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = String;

    /// Case-insensitive; "Surprise" is accepted for Surprised.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "angry" => Ok(EmotionLabel::Angry),
            "happy" => Ok(EmotionLabel::Happy),
            "neutral" => Ok(EmotionLabel::Neutral),
            "sad" => Ok(EmotionLabel::Sad),
            "surprise" | "surprised" => Ok(EmotionLabel::Surprised),
            _ => Err(format!("unknown emotion {s:?}")),
        }
    }
}

/// The 25 × 64 code matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Vec<f64>,
}

impl Codebook {
    pub fn new(entries: &Tensor) -> Result<Self, ModelError> {
        if entries.shape() != [NUM_CODES, EMBED_DIM] {
            return Err(ModelError::Invalid(format!(
                "codebook must be [{NUM_CODES}, {EMBED_DIM}], got {:?}",
                entries.shape()
            )));
        }
        if !entries.is_finite() {
            return Err(ModelError::Invalid(
                "codebook has non-finite entries".into(),
            ));
        }
        let cb = Codebook {
            entries: entries.data().to_vec(),
        };
        if let Some(i) = (0..NUM_CODES).find(|&i| cb.row(i).iter().all(|v| *v == 0.0)) {
            return Err(ModelError::Invalid(format!("codebook row {i} is all zero")));
        }
        Ok(cb)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    pub fn dominant(&self, i: usize) -> EmotionLabel {
        EmotionLabel::of_code(i)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![NUM_CODES, EMBED_DIM], self.entries.clone()).expect("fixed shape")
    }

    /// Cosine similarity of `z` with every row.
    pub fn cosines(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        if z.len() != EMBED_DIM {
            return Err(ModelError::Invalid(format!(
                "embedding has {} values, expected {EMBED_DIM}",
                z.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid("embedding is not finite".into()));
        }
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if zn == 0.0 {
            return Err(ModelError::Invalid(
                "cannot quantize the zero vector (cosine undefined)".into(),
            ));
        }
        let unit: Vec<f64> = z.iter().map(|v| v / zn).collect();
        Ok((0..NUM_CODES)
            .map(|i| {
                let e = self.row(i);
                let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                unit.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / en
            })
            .collect())
    }
}

/// Lookup result for one encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionPosterior {
    pub hard_index: usize,
    pub soft: Vec<f64>,
    pub embedding: Vec<f64>,
    pub encoder_output: Vec<f64>,
}

impl EmotionPosterior {
    pub fn label(&self) -> EmotionLabel {
        EmotionLabel::of_code(self.hard_index)
    }
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Nearest code (by cosine) among the five owned by `label`.
pub fn nearest_in_block(cosines: &[f64], label: EmotionLabel) -> usize {
    let r = label.codes();
    r.start + first_argmax(&cosines[r])
}

/// Hard cosine lookup (ties to the lowest index) and `softmax(cos/τ)`.
pub fn quantize(
    codebook: &Codebook,
    z: &[f64],
    temperature: f64,
) -> Result<EmotionPosterior, ModelError> {
    if !(temperature > 0.0) {
        return Err(ModelError::Invalid("temperature must be positive".into()));
    }
    let cos = codebook.cosines(z)?;
    let hard_index = first_argmax(&cos);
    let top = cos[hard_index] / temperature;
    let exps: Vec<f64> = cos.iter().map(|c| (c / temperature - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(EmotionPosterior {
        hard_index,
        soft: exps.iter().map(|e| e / total).collect(),
        embedding: codebook.row(hard_index).to_vec(),
        encoder_output: z.to_vec(),
    })
}

/// `z + sg(e - z)`: forward value `e`, gradient passed to `z` unchanged.
pub fn straight_through(g: &mut Graph, z: Var, e: Var) -> Result<Var, TensorError> {
    let d = g.sub(e, z)?;
    let d = g.stop_gradient(d)?;
    g.add(z, d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub spectrogram: SpectrogramConfig,
    pub channels: usize,
    pub ffn_dim: usize,
    pub blocks: usize,
    pub kernel_size: usize,
    /// Softmax temperature of the soft posterior.
    pub temperature: f64,
    /// Commitment weight inside the codebook loss.
    pub beta: f64,
    /// Weight of the codebook loss relative to cross-entropy.
    pub alpha: f64,
    pub use_vq: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            spectrogram: SpectrogramConfig::default(),
            channels: 64,
            ffn_dim: 128,
            blocks: 2,
            kernel_size: 3,
            temperature: 0.1,
            beta: 0.25,
            alpha: 0.01,
            use_vq: true,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Invalid(format!("classifier config: {m}")));
        self.spectrogram.validate()?;
        if self.channels == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.beta >= 0.0 && self.alpha >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Output of [`ClassifierModel::classify`]. `posterior` is absent for the
/// codebook-free ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub label: EmotionLabel,
    pub embedding: Vec<f64>,
    pub posterior: Option<EmotionPosterior>,
}

/// Scalar loss values for one clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierLoss {
    pub total: f64,
    pub ce: f64,
    pub commitment: f64,
    pub predicted: EmotionLabel,
}

/// Graph handles of the loss terms.
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub commitment: Option<Var>,
    pub predicted: EmotionLabel,
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    params: ParamStore,
    conv1: Conv1d,
    conv2: Conv1d,
    blocks: Vec<TransformerBlock>,
    proj: Linear,
    codebook: Option<ParamId>,
    head: Option<Linear>,
    norm: NormStats,
    trained_epochs: usize,
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let c = config.channels;
        let k = config.kernel_size;
        let conv1 = Conv1d::new(
            &mut s,
            &mut rng,
            "enc.conv1",
            config.spectrogram.n_mels,
            c,
            k,
            2,
        );
        let conv2 = Conv1d::new(&mut s, &mut rng, "enc.conv2", c, c, k, 2);
        let blocks = (0..config.blocks)
            .map(|i| {
                TransformerBlock::new(
                    &mut s,
                    &mut rng,
                    &format!("enc.block{i}"),
                    c,
                    config.ffn_dim,
                )
            })
            .collect();
        let proj = Linear::new(&mut s, &mut rng, "enc.proj", c, EMBED_DIM);
        let (codebook, head) = if config.use_vq {
            let e = unit_sphere_rows(&mut rng, NUM_CODES, EMBED_DIM);
            (Some(s.add("codebook", e)), None)
        } else {
            let h = Linear::new(&mut s, &mut rng, "head", EMBED_DIM, NUM_EMOTIONS);
            (None, Some(h))
        };
        Ok(ClassifierModel {
            config,
            params: s,
            conv1,
            conv2,
            blocks,
            proj,
            codebook,
            head,
            norm: NormStats::default(),
            trained_epochs: 0,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn norm(&self) -> NormStats {
        self.norm
    }

    pub fn set_norm(&mut self, norm: NormStats) {
        self.norm = norm;
    }

    /// Epochs of training applied so far (0 for a fresh model).
    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn set_trained_epochs(&mut self, epochs: usize) {
        self.trained_epochs = epochs;
    }

    pub fn use_vq(&self) -> bool {
        self.config.use_vq
    }

    pub fn codebook(&self) -> Option<Codebook> {
        self.codebook
            .map(|id| Codebook::new(self.params.get(id)).expect("codebook shape is fixed"))
    }

    pub fn codebook_id(&self) -> Option<ParamId> {
        self.codebook
    }

    /// Encoder output `z` ([64]) for a normalized `[T, n_mels]` input.
    pub fn encode_var(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.conv1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        let mut h = g.gelu(h)?;
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        let pooled = g.mean_rows(h)?;
        self.proj.forward(g, p, pooled)
    }

    /// Cosine similarities of `z` with every code, as a `[25]` variable.
    pub fn cosine_var(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, ModelError> {
        let id = self
            .codebook
            .ok_or_else(|| ModelError::Invalid("model has no codebook".into()))?;
        let zr = g.reshape(z, &[1, EMBED_DIM])?;
        let zn = g.normalize_rows(zr, 1e-12)?;
        let en = g.normalize_rows(p.var(id), 1e-12)?;
        let znt = g.transpose(zn)?;
        let cos = g.matmul(en, znt)?;
        Ok(g.reshape(cos, &[NUM_CODES])?)
    }

    /// `log softmax(cos/τ)` over the 25 codes.
    pub fn log_posterior_var(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, ModelError> {
        let cos = self.cosine_var(g, p, z)?;
        let s = g.scale(cos, 1.0 / self.config.temperature)?;
        Ok(g.log_softmax(s)?)
    }

    /// Training loss for a normalized input.
    ///
    /// With the codebook: the target is the nearest of the label's five
    /// codes, `ce = -log q̃[target] / 25` and
    /// `commitment = ‖sg z − e‖² + β‖z − sg e‖²` with `e` that target code.
    /// Without it: plain 5-way cross-entropy on the linear head.
    pub fn loss_var(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        label: EmotionLabel,
    ) -> Result<LossVars, ModelError> {
        let z = self.encode_var(g, p, x)?;
        match (self.codebook, &self.head) {
            (Some(id), _) => vq_loss(g, z, p.var(id), label, &self.config),
            (None, Some(head)) => {
                let logits = head.forward(g, p, z)?;
                let predicted = EmotionLabel::ALL[first_argmax(g.value(logits).data())];
                let logp = g.log_softmax(logits)?;
                let picked = g.pick(logp, label.index())?;
                let ce = g.scale(picked, -1.0)?;
                Ok(LossVars {
                    total: ce,
                    ce,
                    commitment: None,
                    predicted,
                })
            }
            (None, None) => unreachable!("model has either a codebook or a head"),
        }
    }

    fn input_tensor(&self, mel: &MelSpectrogram) -> Result<Tensor, ModelError> {
        if mel.n_mels() != self.config.spectrogram.n_mels {
            return Err(ModelError::Invalid(format!(
                "mel has {} bands, model expects {}",
                mel.n_mels(),
                self.config.spectrogram.n_mels
            )));
        }
        Ok(self.norm.normalize(mel).to_tensor())
    }

    /// Encoder output for a raw (unnormalized) log-mel spectrogram.
    pub fn encode(&self, mel: &MelSpectrogram) -> Result<Vec<f64>, ModelError> {
        let x = self.input_tensor(mel)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x);
        let z = self.encode_var(&mut g, &p, x)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn classify(&self, mel: &MelSpectrogram) -> Result<Classification, ModelError> {
        let z = self.encode(mel)?;
        match (self.codebook(), &self.head) {
            (Some(cb), _) => {
                let post = quantize(&cb, &z, self.config.temperature)?;
                Ok(Classification {
                    label: post.label(),
                    embedding: z,
                    posterior: Some(post),
                })
            }
            (None, Some(head)) => {
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, false);
                let zv = g.constant(Tensor::vector(z.clone()));
                let logits = head.forward(&mut g, &p, zv)?;
                Ok(Classification {
                    label: EmotionLabel::ALL[first_argmax(g.value(logits).data())],
                    embedding: z,
                    posterior: None,
                })
            }
            (None, None) => unreachable!("model has either a codebook or a head"),
        }
    }

    /// Loss values for a raw log-mel spectrogram and its label.
    pub fn loss(
        &self,
        mel: &MelSpectrogram,
        label: EmotionLabel,
    ) -> Result<ClassifierLoss, ModelError> {
        let x = self.input_tensor(mel)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x);
        let l = self.loss_var(&mut g, &p, x, label)?;
        Ok(ClassifierLoss {
            total: g.value(l.total).item(),
            ce: g.value(l.ce).item(),
            commitment: l.commitment.map_or(0.0, |c| g.value(c).item()),
            predicted: l.predicted,
        })
    }
}

/// Codebook loss for encoder output `z` ([64]) against `codebook` ([25, 64]):
/// `ce + α·commitment` with the target code picked inside the label's block.
pub fn vq_loss(
    g: &mut Graph,
    z: Var,
    codebook: Var,
    label: EmotionLabel,
    cfg: &ClassifierConfig,
) -> Result<LossVars, ModelError> {
    let zr = g.reshape(z, &[1, EMBED_DIM])?;
    let zn = g.normalize_rows(zr, 1e-12)?;
    let en = g.normalize_rows(codebook, 1e-12)?;
    let znt = g.transpose(zn)?;
    let cos = g.matmul(en, znt)?;
    let cos = g.reshape(cos, &[NUM_CODES])?;
    let cos_vals = g.value(cos).data().to_vec();
    let predicted = EmotionLabel::of_code(first_argmax(&cos_vals));
    let target = nearest_in_block(&cos_vals, label);
    let s = g.scale(cos, 1.0 / cfg.temperature)?;
    let logq = g.log_softmax(s)?;
    let picked = g.pick(logq, target)?;
    let ce = g.scale(picked, -1.0 / NUM_CODES as f64)?;
    let e = g.row(codebook, target)?;
    let commitment = commitment_loss(g, z, e, cfg.beta)?;
    let weighted = g.scale(commitment, cfg.alpha)?;
    let total = g.add(ce, weighted)?;
    Ok(LossVars {
        total,
        ce,
        commitment: Some(commitment),
        predicted,
    })
}

/// `‖sg z − e‖² + β‖z − sg e‖²`.
pub fn commitment_loss(g: &mut Graph, z: Var, e: Var, beta: f64) -> Result<Var, TensorError> {
    let sz = g.stop_gradient(z)?;
    let se = g.stop_gradient(e)?;
    let a = g.sub(sz, e)?;
    let a = g.square(a)?;
    let a = g.sum(a)?;
    let b = g.sub(z, se)?;
    let b = g.square(b)?;
    let b = g.sum(b)?;
    let b = g.scale(b, beta)?;
    g.add(a, b)
}

pub fn classifier_loss(
    model: &ClassifierModel,
    mel: &MelSpectrogram,
    label: EmotionLabel,
) -> Result<ClassifierLoss, ModelError> {
    model.loss(mel, label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 20,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Minibatch Adam on the classifier loss. Normalization statistics are
/// refit on `train`. Training accuracy is measured on the fly (before each
/// update); validation after each epoch.
pub fn train_classifier(
    model: &mut ClassifierModel,
    train: &[(MelSpectrogram, EmotionLabel)],
    val: &[(MelSpectrogram, EmotionLabel)],
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<ClassifierEpoch>, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyCorpus("no training clips".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ModelError::Invalid(
            "epochs and batch_size must be at least 1".into(),
        ));
    }
    model.norm = NormStats::fit(train.iter().map(|(m, _)| m));
    let inputs: Vec<Tensor> = train
        .iter()
        .map(|(m, _)| model.input_tensor(m))
        .collect::<Result<_, _>>()?;
    let mut opt = OptimizerState::new(cfg.adam.clone(), model.params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true);
                let x = g.constant(inputs[i].clone());
                let l = model.loss_var(&mut g, &p, x, train[i].1)?;
                loss_sum += g.value(l.total).item();
                correct += usize::from(l.predicted == train[i].1);
                let grads = p.grads(&g.backward(l.total)?, &model.params);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (s, t) in a.iter_mut().zip(&grads) {
                            for (u, v) in s.data_mut().iter_mut().zip(t.data()) {
                                *u += v;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            opt.step(model.params.tensors_mut(), &grads)?;
        }
        let (val_loss, val_accuracy) = evaluate(model, val)?;
        let stats = ClassifierEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "classifier epoch {epoch}: loss {:.4} acc {:.3} val loss {:.4} val acc {:.3}",
            stats.train_loss,
            stats.train_accuracy,
            stats.val_loss,
            stats.val_accuracy
        );
        history.push(stats);
        model.trained_epochs += 1;
    }
    Ok(history)
}

/// Mean loss and accuracy; `(NaN, NaN)` for an empty set.
pub fn evaluate(
    model: &ClassifierModel,
    data: &[(MelSpectrogram, EmotionLabel)],
) -> Result<(f64, f64), ModelError> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for (mel, label) in data {
        let l = model.loss(mel, *label)?;
        loss += l.total;
        correct += usize::from(l.predicted == *label);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Per-emotion distribution of clips over that emotion's five codes, in
/// percent. Each clip counts toward the nearest code of its own label's block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Utilization {
    pub percent: [[f64; CODES_PER_EMOTION]; NUM_EMOTIONS],
    pub counts: [[usize; CODES_PER_EMOTION]; NUM_EMOTIONS],
    /// False for emotions with no clips (their row is all zero).
    pub present: [bool; NUM_EMOTIONS],
}

impl Utilization {
    /// From `(label, code)` pairs; codes outside the label's block are rejected.
    pub fn from_assignments(items: &[(EmotionLabel, usize)]) -> Result<Self, ModelError> {
        let mut counts = [[0usize; CODES_PER_EMOTION]; NUM_EMOTIONS];
        for &(label, code) in items {
            if !label.codes().contains(&code) {
                return Err(ModelError::Invalid(format!(
                    "code {code} does not belong to {label}"
                )));
            }
            counts[label.index()][code - label.codes().start] += 1;
        }
        let mut percent = [[0.0; CODES_PER_EMOTION]; NUM_EMOTIONS];
        let mut present = [false; NUM_EMOTIONS];
        for k in 0..NUM_EMOTIONS {
            let n: usize = counts[k].iter().sum();
            present[k] = n > 0;
            if n > 0 {
                for q in 0..CODES_PER_EMOTION {
                    percent[k][q] = 100.0 * counts[k][q] as f64 / n as f64;
                }
            } else {
                log::warn!("no clips for {} in utilization", EmotionLabel::ALL[k]);
            }
        }
        Ok(Utilization {
            percent,
            counts,
            present,
        })
    }
}

pub fn codebook_utilization(
    model: &ClassifierModel,
    data: &[(MelSpectrogram, EmotionLabel)],
) -> Result<Utilization, ModelError> {
    let cb = model
        .codebook()
        .ok_or_else(|| ModelError::Invalid("utilization needs a codebook model".into()))?;
    let items = data
        .iter()
        .map(|(mel, label)| {
            let cos = cb.cosines(&model.encode(mel)?)?;
            Ok((*label, nearest_in_block(&cos, *label)))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Utilization::from_assignments(&items)
}
