use serde::{Deserialize, Serialize};

use super::stft::stft_power;
use super::{AudioClip, DspError, SpectrogramConfig};
use crate::autodiff::Tensor;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `n_mels × (n_fft/2 + 1)`, unnormalized
/// (each triangle peaks at 1). Also returns the `n_mels + 2` edge frequencies.
pub fn mel_filterbank(cfg: &SpectrogramConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_bins = cfg.n_bins();
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let fb = (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect();
    (fb, edges)
}

/// Log mel energies, `T × n_mels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: Vec<f64>,
    n_frames: usize,
    config: SpectrogramConfig,
}

impl MelSpectrogram {
    pub fn new(
        frames: Vec<f64>,
        n_frames: usize,
        config: SpectrogramConfig,
    ) -> Result<Self, DspError> {
        if n_frames == 0 {
            return Err(DspError::InvalidMel("at least one frame required".into()));
        }
        if frames.len() != n_frames * config.n_mels {
            return Err(DspError::InvalidMel(format!(
                "{} values for {n_frames} frames of {} bands",
                frames.len(),
                config.n_mels
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DspError::InvalidMel("non-finite entry".into()));
        }
        Ok(MelSpectrogram {
            frames,
            n_frames,
            config,
        })
    }

    pub fn from_tensor(t: &Tensor, config: SpectrogramConfig) -> Result<Self, DspError> {
        if t.shape().len() != 2 || t.shape()[1] != config.n_mels {
            return Err(DspError::InvalidMel(format!(
                "tensor shape {:?} is not [T, {}]",
                t.shape(),
                config.n_mels
            )));
        }
        MelSpectrogram::new(t.data().to_vec(), t.shape()[0], config)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_frames, self.n_mels()], self.frames.clone())
            .expect("shape matches by construction")
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.config.n_mels
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.config
    }

    pub fn data(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let m = self.n_mels();
        &self.frames[t * m..(t + 1) * m]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> MelSpectrogram {
        MelSpectrogram {
            frames: self.frames.iter().map(|v| f(*v)).collect(),
            n_frames: self.n_frames,
            config: self.config.clone(),
        }
    }

    /// Contiguous frame range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<MelSpectrogram, DspError> {
        if start >= end || end > self.n_frames {
            return Err(DspError::InvalidMel(format!(
                "frame range {start}..{end} outside 0..{}",
                self.n_frames
            )));
        }
        let m = self.n_mels();
        MelSpectrogram::new(
            self.frames[start * m..end * m].to_vec(),
            end - start,
            self.config.clone(),
        )
    }
}

/// `log(filterbank · |STFT|² + log_floor)` per frame, Hann window, no
/// center padding.
pub fn mel_spectrogram(
    clip: &AudioClip,
    cfg: &SpectrogramConfig,
) -> Result<MelSpectrogram, DspError> {
    let power = stft_power(clip.samples(), cfg)?;
    let (fb, _) = mel_filterbank(cfg);
    let mut frames = Vec::with_capacity(power.len() * cfg.n_mels);
    for p in &power {
        for filt in &fb {
            let e: f64 = filt.iter().zip(p).map(|(w, v)| w * v).sum();
            frames.push((e + cfg.log_floor).ln());
        }
    }
    MelSpectrogram::new(frames, power.len(), cfg.clone())
}

/// Linear interpolation of a mel-spectrogram to `n` frames.
pub fn resample_frames(mel: &MelSpectrogram, n: usize) -> Result<MelSpectrogram, DspError> {
    if n == 0 {
        return Err(DspError::InvalidMel("target frame count is zero".into()));
    }
    let t = mel.n_frames();
    if n == t {
        return Ok(mel.clone());
    }
    let m = mel.n_mels();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let pos = if n == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (n - 1) as f64
        };
        let j = (pos.floor() as usize).min(t - 1);
        let frac = pos - j as f64;
        let (a, b) = (mel.frame(j), mel.frame((j + 1).min(t - 1)));
        out.extend(a.iter().zip(b).map(|(x, y)| x * (1.0 - frac) + y * frac));
    }
    MelSpectrogram::new(out, n, mel.config().clone())
}

/// Corpus-level affine normalization of log-mel values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl NormStats {
    /// Mean and standard deviation over every entry of every spectrogram.
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> NormStats {
        let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
        for m in mels {
            for v in m.data() {
                n += 1;
                s += v;
                s2 += v * v;
            }
        }
        if n == 0 {
            return NormStats::default();
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        NormStats {
            mean,
            std: if var > 1e-12 { var.sqrt() } else { 1.0 },
        }
    }

    pub fn normalize(&self, mel: &MelSpectrogram) -> MelSpectrogram {
        mel.map(|v| (v - self.mean) / self.std)
    }

    pub fn denormalize(&self, mel: &MelSpectrogram) -> MelSpectrogram {
        mel.map(|v| v * self.std + self.mean)
    }
}
