//! Emotion-conditioned mel-to-mel generator and its training losses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    extract_f0, invert_mel, mel_spectrogram, resample_frames, AudioClip, F0Contour, MelSpectrogram,
    NormStats, SpectrogramConfig,
};
use crate::autodiff::{AdamConfig, Graph, OptimizerState, Tensor, TensorError, Var};
use crate::classifier::{
    quantize, ClassifierModel, EmotionLabel, EmotionPosterior, EMBED_DIM, NUM_CODES,
};
use crate::metrics;
use crate::nn::{Bound, Conv1d, LayerNorm, Linear, ParamStore, SpectralBlock, TransformerBlock};
use crate::ModelError;

/// Number of F0 summary statistics fed to the style projection.
pub const STYLE_FEATURES: usize = 5;

/// Centered F0 summary of a clip: voiced log-F0 mean (around ln 200) and
/// std, voiced ratio (around 0.5), and the log-F0 delta mean and std
/// (scaled by 10).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleFeatures(pub [f64; STYLE_FEATURES]);

impl StyleFeatures {
    pub fn from_contour(c: &F0Contour) -> Self {
        let [m, s, r, dm, ds] = c.summary();
        let m = if r > 0.0 { m - 200f64.ln() } else { 0.0 };
        StyleFeatures([m, s, r - 0.5, 10.0 * dm, 10.0 * ds])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Spectral convergence.
    pub alpha1: f64,
    /// Pitch flow.
    pub alpha2: f64,
    /// Speech emotion.
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 0.1,
            alpha3: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Use `‖y − G‖/‖y‖` instead of `|(‖G‖ − ‖y‖)/‖G‖|`.
    pub standard_spectral_convergence: bool,
    /// Match only the summed (endpoint) differences in the pitch-flow term.
    pub telescoped_pitch_flow: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub spectrogram: SpectrogramConfig,
    pub width: usize,
    pub modes: usize,
    pub style_dim: usize,
    pub ffn_dim: usize,
    pub encoder_stages: usize,
    pub decoder_stages: usize,
    pub kernel_size: usize,
    pub use_spectral_conv: bool,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            spectrogram: SpectrogramConfig::default(),
            width: 128,
            modes: 16,
            style_dim: 32,
            ffn_dim: 256,
            encoder_stages: 3,
            decoder_stages: 3,
            kernel_size: 3,
            use_spectral_conv: true,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Small variant for desk-scale runs.
    pub fn toy() -> Self {
        GeneratorConfig {
            width: 64,
            ffn_dim: 128,
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.spectrogram.validate()?;
        let bad = |m: &str| Err(ModelError::Invalid(format!("generator config: {m}")));
        if self.width == 0 || self.modes == 0 || self.ffn_dim == 0 {
            return bad("width, modes and ffn_dim must be positive");
        }
        if self.style_dim == 0 || self.style_dim >= self.width {
            return bad("style_dim must be in 1..width");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        let w = &self.loss.weights;
        if !(w.alpha1 >= 0.0 && w.alpha2 >= 0.0 && w.alpha3 >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum FrontBlock {
    Spectral(SpectralBlock),
    Conv(Conv1d),
}

/// Pre-norm residual convolution stage, optionally FiLM-modulated.
#[derive(Clone, Debug)]
struct ResStage {
    norm: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    film: Option<(Linear, Linear)>,
}

impl ResStage {
    fn new(
        s: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        kernel: usize,
        film: bool,
    ) -> Self {
        ResStage {
            norm: LayerNorm::new(s, &format!("{name}.norm"), width),
            conv1: Conv1d::new(s, rng, &format!("{name}.conv1"), width, width, kernel, 1),
            conv2: Conv1d::zeros(s, &format!("{name}.conv2"), width, width, kernel),
            film: film.then(|| {
                (
                    Linear::zeros(s, &format!("{name}.film_scale"), width, width),
                    Linear::zeros(s, &format!("{name}.film_shift"), width, width),
                )
            }),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var, TensorError> {
        let mut h = self.norm.forward(g, p, x)?;
        if let (Some((scale, shift)), Some(c)) = (&self.film, cond) {
            let gamma = scale.forward(g, p, c)?;
            let gamma = g.add_scalar(gamma, 1.0)?;
            let beta = shift.forward(g, p, c)?;
            h = g.mul_row(h, gamma)?;
            h = g.add_row(h, beta)?;
        }
        let h = self.conv1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.conv2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Graph handles of the four loss parts and their weighted sum.
pub struct GeneratorLossVars {
    pub rc: Var,
    pub sc: Var,
    pub pf: Var,
    pub ser: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rc: f64,
    pub sc: f64,
    pub pf: f64,
    pub ser: f64,
}

/// `rc + α₁·sc + α₂·pf + α₃·ser`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.rc + w.alpha1 * parts.sc + w.alpha2 * parts.pf + w.alpha3 * parts.ser
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    params: ParamStore,
    input: Linear,
    front: FrontBlock,
    transformer: TransformerBlock,
    encoder: Vec<ResStage>,
    style_proj: Linear,
    emotion_proj: Linear,
    decoder: Vec<ResStage>,
    out_norm: LayerNorm,
    output: Linear,
    norm: NormStats,
    trained_epochs: usize,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let (w, k, m) = (config.width, config.kernel_size, config.spectrogram.n_mels);
        let input = Linear::new(&mut s, &mut rng, "gen.input", m, w);
        let front = if config.use_spectral_conv {
            FrontBlock::Spectral(SpectralBlock::new(
                &mut s,
                &mut rng,
                "gen.front",
                w,
                config.modes,
            ))
        } else {
            FrontBlock::Conv(Conv1d::new(&mut s, &mut rng, "gen.front", w, w, k, 1))
        };
        let transformer =
            TransformerBlock::new(&mut s, &mut rng, "gen.transformer", w, config.ffn_dim);
        let encoder = (0..config.encoder_stages)
            .map(|i| ResStage::new(&mut s, &mut rng, &format!("gen.enc{i}"), w, k, false))
            .collect();
        let style_proj = Linear::new(
            &mut s,
            &mut rng,
            "gen.style",
            STYLE_FEATURES,
            config.style_dim,
        );
        let emotion_proj = Linear::new(
            &mut s,
            &mut rng,
            "gen.emotion",
            EMBED_DIM,
            w - config.style_dim,
        );
        let decoder = (0..config.decoder_stages)
            .map(|i| ResStage::new(&mut s, &mut rng, &format!("gen.dec{i}"), w, k, true))
            .collect();
        let out_norm = LayerNorm::new(&mut s, "gen.out_norm", w);
        let output = Linear::zeros(&mut s, "gen.output", w, m);
        Ok(GeneratorModel {
            config,
            params: s,
            input,
            front,
            transformer,
            encoder,
            style_proj,
            emotion_proj,
            decoder,
            out_norm,
            output,
            norm: NormStats::default(),
            trained_epochs: 0,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
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

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn set_trained_epochs(&mut self, epochs: usize) {
        self.trained_epochs = epochs;
    }

    /// Conditioning vector: projected style (`style_dim`) followed by the
    /// projected emotion embedding (`width − style_dim`).
    pub fn condition_var(
        &self,
        g: &mut Graph,
        p: &Bound,
        style: Var,
        emotion: Var,
    ) -> Result<Var, TensorError> {
        let s = self.style_proj.forward(g, p, style)?;
        let s = g.gelu(s)?;
        let e = self.emotion_proj.forward(g, p, emotion)?;
        g.concat(s, e)
    }

    /// Normalized `[T, n_mels]` in, normalized `[T, n_mels]` out.
    pub fn forward_var(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        style: Var,
        emotion: Var,
    ) -> Result<Var, TensorError> {
        let t = g.shape(x)[0];
        let mut h = self.input.forward(g, p, x)?;
        h = match &self.front {
            FrontBlock::Spectral(b) => b.forward(g, p, h)?,
            FrontBlock::Conv(c) => {
                let y = c.forward(g, p, h)?;
                g.gelu(y)?
            }
        };
        h = self.transformer.forward(g, p, h)?;
        for st in &self.encoder {
            h = st.forward(g, p, h, None)?;
        }
        let cond = self.condition_var(g, p, style, emotion)?;
        let cb = g.broadcast_rows(cond, t)?;
        h = g.add(h, cb)?;
        for st in &self.decoder {
            h = st.forward(g, p, h, Some(cond))?;
        }
        let h = self.out_norm.forward(g, p, h)?;
        let y = self.output.forward(g, p, h)?;
        g.add(x, y)
    }

    fn check_inputs(&self, mel: &MelSpectrogram, emotion: &[f64]) -> Result<(), ModelError> {
        if mel.n_mels() != self.config.spectrogram.n_mels {
            return Err(ModelError::Invalid(format!(
                "mel has {} bands, generator expects {}",
                mel.n_mels(),
                self.config.spectrogram.n_mels
            )));
        }
        if emotion.len() != EMBED_DIM {
            return Err(ModelError::Invalid(format!(
                "emotion embedding has {} values, expected {EMBED_DIM}",
                emotion.len()
            )));
        }
        Ok(())
    }

    /// Raw log-mel in, raw log-mel out, same frame count.
    pub fn generate(
        &self,
        mel: &MelSpectrogram,
        style: &StyleFeatures,
        emotion: &[f64],
    ) -> Result<MelSpectrogram, ModelError> {
        self.check_inputs(mel, emotion)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(self.norm.normalize(mel).to_tensor());
        let s = g.constant(Tensor::vector(style.0.to_vec()));
        let e = g.constant(Tensor::vector(emotion.to_vec()));
        let y = self.forward_var(&mut g, &p, x, s, e)?;
        let out = MelSpectrogram::from_tensor(g.value(y), mel.config().clone())?;
        Ok(self.norm.denormalize(&out))
    }
}

/// Mean absolute difference.
pub fn reconstruction_loss_var(g: &mut Graph, gen: Var, target: Var) -> Result<Var, TensorError> {
    let d = g.sub(gen, target)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `|(‖G‖ − ‖y‖) / ‖G‖|`, or `‖y − G‖ / ‖y‖` with `standard`.
pub fn spectral_convergence_var(
    g: &mut Graph,
    gen: Var,
    target: Var,
    standard: bool,
) -> Result<Var, TensorError> {
    if standard {
        let ny = g
            .value(target)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if ny == 0.0 {
            return Err(TensorError::invalid(
                "spectral_convergence",
                "target has zero norm",
            ));
        }
        let d = g.sub(target, gen)?;
        let n = g.l2_norm(d)?;
        g.scale(n, 1.0 / ny)
    } else {
        let ng = g.l2_norm(gen)?;
        if g.value(ng).item() == 0.0 {
            return Err(TensorError::invalid(
                "spectral_convergence",
                "generated spectrogram has zero norm",
            ));
        }
        let ny = g.l2_norm(target)?;
        let ny = g.stop_gradient(ny)?;
        let d = g.sub(ng, ny)?;
        let r = g.div(d, ng)?;
        g.abs(r)
    }
}

/// Per-step `‖Δgen − Δtarget‖₂` over first differences in time, or the
/// telescoped `‖(g_T − g_1) − (y_T − y_1)‖₂`.
pub fn pitch_flow_var(
    g: &mut Graph,
    gen: Var,
    target: Var,
    telescoped: bool,
) -> Result<Var, TensorError> {
    let t = g.shape(gen)[0];
    if t < 2 {
        return Err(TensorError::invalid("pitch_flow", "need at least 2 frames"));
    }
    if telescoped {
        let d = g.sub(gen, target)?;
        let last = g.row(d, t - 1)?;
        let first = g.row(d, 0)?;
        let e = g.sub(last, first)?;
        g.l2_norm(e)
    } else {
        let dg = g.time_diff(gen)?;
        let dt = g.time_diff(target)?;
        let d = g.sub(dg, dt)?;
        g.l2_norm(d)
    }
}

/// `−log q̃[reference_code] / 25` on the frozen classifier's soft posterior
/// of the (normalized) generated mel.
pub fn speech_emotion_var(
    g: &mut Graph,
    classifier: &ClassifierModel,
    cls_params: &Bound,
    gen: Var,
    reference_code: usize,
) -> Result<Var, ModelError> {
    let z = classifier.encode_var(g, cls_params, gen)?;
    let logq = classifier.log_posterior_var(g, cls_params, z)?;
    let picked = g.pick(logq, reference_code)?;
    Ok(g.scale(picked, -1.0 / NUM_CODES as f64)?)
}

pub fn generator_loss_var(
    g: &mut Graph,
    cfg: &LossConfig,
    classifier: &ClassifierModel,
    cls_params: &Bound,
    gen: Var,
    target: Var,
    reference_code: usize,
) -> Result<GeneratorLossVars, ModelError> {
    let rc = reconstruction_loss_var(g, gen, target)?;
    let sc = spectral_convergence_var(g, gen, target, cfg.standard_spectral_convergence)?;
    let pf = pitch_flow_var(g, gen, target, cfg.telescoped_pitch_flow)?;
    let ser = speech_emotion_var(g, classifier, cls_params, gen, reference_code)?;
    let w = &cfg.weights;
    let a = g.scale(sc, w.alpha1)?;
    let b = g.scale(pf, w.alpha2)?;
    let c = g.scale(ser, w.alpha3)?;
    let total = g.add(rc, a)?;
    let total = g.add(total, b)?;
    let total = g.add(total, c)?;
    Ok(GeneratorLossVars {
        rc,
        sc,
        pf,
        ser,
        total,
    })
}

fn pair_vars(
    g: &mut Graph,
    gen: &MelSpectrogram,
    target: &MelSpectrogram,
) -> Result<(Var, Var), ModelError> {
    if gen.n_frames() != target.n_frames() || gen.n_mels() != target.n_mels() {
        return Err(ModelError::Invalid(format!(
            "shape mismatch: {}x{} vs {}x{}",
            gen.n_frames(),
            gen.n_mels(),
            target.n_frames(),
            target.n_mels()
        )));
    }
    Ok((g.constant(gen.to_tensor()), g.constant(target.to_tensor())))
}

pub fn reconstruction_loss(
    gen: &MelSpectrogram,
    target: &MelSpectrogram,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let (a, b) = pair_vars(&mut g, gen, target)?;
    let l = reconstruction_loss_var(&mut g, a, b)?;
    Ok(g.value(l).item())
}

pub fn spectral_convergence_loss(
    gen: &MelSpectrogram,
    target: &MelSpectrogram,
    standard: bool,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let (a, b) = pair_vars(&mut g, gen, target)?;
    let l = spectral_convergence_var(&mut g, a, b, standard)?;
    Ok(g.value(l).item())
}

pub fn pitch_flow_loss(
    gen: &MelSpectrogram,
    target: &MelSpectrogram,
    telescoped: bool,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let (a, b) = pair_vars(&mut g, gen, target)?;
    let l = pitch_flow_var(&mut g, a, b, telescoped)?;
    Ok(g.value(l).item())
}

/// Speech-emotion loss of a raw generated mel against the hard code of a
/// raw reference mel.
pub fn speech_emotion_loss(
    classifier: &ClassifierModel,
    gen: &MelSpectrogram,
    reference: &MelSpectrogram,
) -> Result<f64, ModelError> {
    let cb = classifier.codebook().ok_or_else(|| {
        ModelError::Invalid("speech-emotion loss needs a codebook classifier".into())
    })?;
    let code = quantize(
        &cb,
        &classifier.encode(reference)?,
        classifier.config().temperature,
    )?
    .hard_index;
    let mut g = Graph::new();
    let p = classifier.params().bind(&mut g, false);
    let x = g.constant(classifier.norm().normalize(gen).to_tensor());
    let l = speech_emotion_var(&mut g, classifier, &p, x, code)?;
    Ok(g.value(l).item())
}

/// One training example. Mels are raw log-mel; `source` already has the
/// target's frame count.
#[derive(Clone, Debug)]
pub struct Triple {
    pub source: MelSpectrogram,
    pub style: StyleFeatures,
    pub emotion: Vec<f64>,
    pub reference_code: usize,
    pub target: MelSpectrogram,
    pub label: EmotionLabel,
}

/// Builds a triple from audio: the source mel is linearly time-warped to
/// the target's length and the style comes from the source's F0.
pub fn make_triple(
    classifier: &ClassifierModel,
    source: &AudioClip,
    reference: &AudioClip,
    target: &AudioClip,
    cfg: &SpectrogramConfig,
) -> Result<Triple, ModelError> {
    let target_mel = mel_spectrogram(target, cfg)?;
    let source_mel = resample_frames(&mel_spectrogram(source, cfg)?, target_mel.n_frames())?;
    let style = StyleFeatures::from_contour(&extract_f0(source, cfg)?);
    let post = reference_posterior(classifier, &mel_spectrogram(reference, cfg)?)?;
    Ok(Triple {
        source: source_mel,
        style,
        emotion: post.embedding.clone(),
        reference_code: post.hard_index,
        target: target_mel,
        label: post.label(),
    })
}

fn reference_posterior(
    classifier: &ClassifierModel,
    mel: &MelSpectrogram,
) -> Result<EmotionPosterior, ModelError> {
    let cb = classifier
        .codebook()
        .ok_or_else(|| ModelError::Invalid("conversion needs a codebook classifier".into()))?;
    quantize(
        &cb,
        &classifier.encode(mel)?,
        classifier.config().temperature,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            epochs: 50,
            batch_size: 10,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub rc: f64,
    pub sc: f64,
    pub pf: f64,
    pub ser: f64,
    pub total: f64,
    /// Mean SSIM of generated vs. target log-mel over the epoch.
    pub train_ssim: f64,
}

/// Minibatch Adam on the weighted generator loss with the classifier
/// frozen. The generator adopts the classifier's normalization statistics.
pub fn train_generator(
    model: &mut GeneratorModel,
    classifier: &ClassifierModel,
    triples: &[Triple],
    cfg: &GeneratorTrainConfig,
) -> Result<Vec<GeneratorEpoch>, ModelError> {
    if triples.is_empty() {
        return Err(ModelError::EmptyCorpus("no training triples".into()));
    }
    if classifier.trained_epochs() == 0 {
        return Err(ModelError::Invalid("classifier is untrained".into()));
    }
    if classifier.codebook().is_none() {
        return Err(ModelError::Invalid(
            "generator training needs a codebook classifier".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ModelError::Invalid(
            "epochs and batch_size must be at least 1".into(),
        ));
    }
    model.norm = classifier.norm();
    let norm = model.norm;
    let prepared: Vec<(Tensor, Tensor)> = triples
        .iter()
        .map(|t| {
            model.check_inputs(&t.source, &t.emotion)?;
            if t.source.n_frames() != t.target.n_frames() {
                return Err(ModelError::Invalid(
                    "source and target frame counts differ".into(),
                ));
            }
            Ok((
                norm.normalize(&t.source).to_tensor(),
                norm.normalize(&t.target).to_tensor(),
            ))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut opt = OptimizerState::new(cfg.adam.clone(), model.params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let (mut total_sum, mut ssim_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let tr = &triples[i];
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true);
                let cp = classifier.params().bind(&mut g, false);
                let x = g.constant(prepared[i].0.clone());
                let y = g.constant(prepared[i].1.clone());
                let s = g.constant(Tensor::vector(tr.style.0.to_vec()));
                let e = g.constant(Tensor::vector(tr.emotion.clone()));
                let out = model.forward_var(&mut g, &p, x, s, e)?;
                let l = generator_loss_var(
                    &mut g,
                    &model.config.loss,
                    classifier,
                    &cp,
                    out,
                    y,
                    tr.reference_code,
                )?;
                sums.rc += g.value(l.rc).item();
                sums.sc += g.value(l.sc).item();
                sums.pf += g.value(l.pf).item();
                sums.ser += g.value(l.ser).item();
                total_sum += g.value(l.total).item();
                let gen = norm.denormalize(&MelSpectrogram::from_tensor(
                    g.value(out),
                    tr.target.config().clone(),
                )?);
                ssim_sum += metrics::ssim(&gen, &tr.target)
                    .map_err(|e| ModelError::Invalid(e.to_string()))?;
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
        let n = triples.len() as f64;
        let stats = GeneratorEpoch {
            epoch,
            rc: sums.rc / n,
            sc: sums.sc / n,
            pf: sums.pf / n,
            ser: sums.ser / n,
            total: total_sum / n,
            train_ssim: ssim_sum / n,
        };
        log::info!(
            "generator epoch {epoch}: total {:.4} (rc {:.4} sc {:.4} pf {:.4} ser {:.4}) ssim {:.3}",
            stats.total,
            stats.rc,
            stats.sc,
            stats.pf,
            stats.ser,
            stats.train_ssim
        );
        history.push(stats);
        model.trained_epochs += 1;
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConversionDiagnostics {
    pub reference_code: usize,
    pub reference_label: EmotionLabel,
    pub reference_soft: Vec<f64>,
    pub frames: usize,
}

pub struct Conversion {
    pub mel: MelSpectrogram,
    pub diagnostics: ConversionDiagnostics,
}

/// Mel-domain conversion: style from the input's F0, emotion embedding from
/// the reference's codebook lookup.
pub fn convert_mel(
    generator: &GeneratorModel,
    classifier: &ClassifierModel,
    input: &AudioClip,
    reference: &AudioClip,
) -> Result<Conversion, ModelError> {
    let cfg = &generator.config.spectrogram;
    let mel = mel_spectrogram(input, cfg)?;
    let style = StyleFeatures::from_contour(&extract_f0(input, cfg)?);
    let post = reference_posterior(classifier, &mel_spectrogram(reference, cfg)?)?;
    let out = generator.generate(&mel, &style, &post.embedding)?;
    Ok(Conversion {
        diagnostics: ConversionDiagnostics {
            reference_code: post.hard_index,
            reference_label: post.label(),
            reference_soft: post.soft,
            frames: out.n_frames(),
        },
        mel: out,
    })
}

/// [`convert_mel`] followed by Griffin-Lim.
pub fn convert(
    generator: &GeneratorModel,
    classifier: &ClassifierModel,
    input: &AudioClip,
    reference: &AudioClip,
    griffin_lim_iterations: usize,
) -> Result<(AudioClip, Conversion), ModelError> {
    let c = convert_mel(generator, classifier, input, reference)?;
    let clip = invert_mel(&c.mel, griffin_lim_iterations)?;
    Ok((clip, c))
}
