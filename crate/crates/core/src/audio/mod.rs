//! Waveform, mel-spectrogram and F0 processing.

mod griffin_lim;
mod mel;
mod pitch;
mod stft;
mod wav;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use griffin_lim::{griffin_lim, invert_mel, mel_to_magnitude, GriffinLimOutput};
pub use mel::{mel_filterbank, mel_spectrogram, resample_frames, MelSpectrogram, NormStats};
pub use pitch::{extract_f0, extract_f0_with, F0Contour, PitchConfig};
pub use stft::{frame_count, hann_window, stft_power};
pub use wav::{load_wav, save_wav};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("invalid spectrogram config: {0}")]
    InvalidConfig(String),
    #[error("clip has {len} samples but at least {min} (one analysis window) are required")]
    TooShort { len: usize, min: usize },
    #[error("{path}: {msg}")]
    Wav { path: String, msg: String },
    #[error("invalid mel-spectrogram: {0}")]
    InvalidMel(String),
}

/// Mono audio with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if samples.is_empty() {
            return Err(DspError::InvalidAudio("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(DspError::InvalidAudio(
                "sample rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(DspError::InvalidAudio(format!("sample {i} is not finite")));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, rate: u32) -> AudioClip {
        if rate == self.sample_rate {
            return self.clone();
        }
        let ratio = self.sample_rate as f64 / rate as f64;
        let n = ((self.samples.len() as f64) / ratio).floor().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n)
            .map(|i| {
                let pos = i as f64 * ratio;
                let j = (pos.floor() as usize).min(last);
                let frac = pos - j as f64;
                let next = self.samples[(j + 1).min(last)];
                self.samples[j] * (1.0 - frac) + next * frac
            })
            .collect();
        AudioClip {
            samples,
            sample_rate: rate,
        }
    }
}

/// Analysis parameters shared by every spectral operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            sample_rate: 24_000,
            n_mels: 80,
            n_fft: 2048,
            win_length: 1200,
            hop_length: 300,
            f_min: 0.0,
            f_max: 12_000.0,
            log_floor: 1e-5,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: String| Err(DspError::InvalidConfig(m));
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad(format!(
                "win_length {} must be in 1..={}",
                self.win_length, self.n_fft
            ));
        }
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return bad(format!(
                "hop_length {} must be in 1..={}",
                self.hop_length, self.win_length
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got {} and {}",
                self.f_min, self.f_max
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}
