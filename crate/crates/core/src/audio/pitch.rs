//! Frame-wise F0 by normalized autocorrelation.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::stft::frame_count;
use super::{AudioClip, DspError, SpectrogramConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub f0_min: f64,
    pub f0_max: f64,
    /// Minimum normalized autocorrelation peak for a voiced frame.
    pub voicing_threshold: f64,
    /// Earliest lag whose peak reaches this fraction of the best peak wins;
    /// guards against picking a subharmonic.
    pub octave_tolerance: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig {
            f0_min: 60.0,
            f0_max: 600.0,
            voicing_threshold: 0.3,
            octave_tolerance: 0.9,
        }
    }
}

/// Per-frame F0 in Hz (0 when unvoiced), one frame per hop.
#[derive(Clone, Debug, PartialEq)]
pub struct F0Contour {
    f0: Vec<f64>,
    voiced: Vec<bool>,
    hop_length: usize,
}

impl F0Contour {
    pub fn new(f0: Vec<f64>, hop_length: usize) -> Self {
        let voiced = f0.iter().map(|v| *v > 0.0).collect();
        F0Contour {
            f0,
            voiced,
            hop_length,
        }
    }

    pub fn f0(&self) -> &[f64] {
        &self.f0
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    pub fn hop_length(&self) -> usize {
        self.hop_length
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0.iter().copied().filter(|v| *v > 0.0)
    }

    /// Summary features: mean and std of voiced log-F0, voiced ratio, and
    /// mean and std of frame-to-frame log-F0 deltas over voiced pairs.
    pub fn summary(&self) -> [f64; 5] {
        let logs: Vec<f64> = self.voiced_values().map(f64::ln).collect();
        let n = self.f0.len().max(1) as f64;
        let (mean, std) = mean_std(&logs);
        let deltas: Vec<f64> = self
            .f0
            .windows(2)
            .filter(|w| w[0] > 0.0 && w[1] > 0.0)
            .map(|w| w[1].ln() - w[0].ln())
            .collect();
        let (dmean, dstd) = mean_std(&deltas);
        [mean, std, logs.len() as f64 / n, dmean, dstd]
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

pub fn extract_f0(clip: &AudioClip, cfg: &SpectrogramConfig) -> Result<F0Contour, DspError> {
    extract_f0_with(clip, cfg, &PitchConfig::default())
}

pub fn extract_f0_with(
    clip: &AudioClip,
    cfg: &SpectrogramConfig,
    pitch: &PitchConfig,
) -> Result<F0Contour, DspError> {
    cfg.validate()?;
    let x = clip.samples();
    let win = cfg.win_length;
    if x.len() < win {
        return Err(DspError::TooShort {
            len: x.len(),
            min: win,
        });
    }
    let sr = clip.sample_rate() as f64;
    let lag_min = ((sr / pitch.f0_max).floor() as usize).max(2);
    let lag_max = ((sr / pitch.f0_min).ceil() as usize).min(win - 2);
    if lag_min + 2 > lag_max {
        return Err(DspError::InvalidConfig(format!(
            "window of {win} samples cannot resolve {}-{} Hz",
            pitch.f0_min, pitch.f0_max
        )));
    }
    let n_fft = (2 * win).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);

    let frames = frame_count(x.len(), win, cfg.hop_length);
    let mut f0 = Vec::with_capacity(frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut nr = vec![0.0; lag_max + 2];
    for t in 0..frames {
        let seg = &x[t * cfg.hop_length..t * cfg.hop_length + win];
        let energy: f64 = seg.iter().map(|v| v * v).sum();
        if energy < 1e-10 * win as f64 {
            f0.push(0.0);
            continue;
        }
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(if i < win { seg[i] } else { 0.0 }, 0.0);
        }
        fwd.process(&mut buf);
        for b in buf.iter_mut() {
            *b = Complex64::new(b.norm_sqr(), 0.0);
        }
        inv.process(&mut buf);
        // prefix sums of squares for the overlap energies
        let mut pre = vec![0.0; win + 1];
        for i in 0..win {
            pre[i + 1] = pre[i] + seg[i] * seg[i];
        }
        for (lag, r) in nr
            .iter_mut()
            .enumerate()
            .take(lag_max + 2)
            .skip(lag_min - 1)
        {
            let head = pre[win - lag];
            let tail = pre[win] - pre[lag];
            let denom = (head * tail).sqrt();
            *r = if denom > 0.0 {
                buf[lag].re / n_fft as f64 / denom
            } else {
                0.0
            };
        }
        let best = (lag_min..=lag_max)
            .map(|l| nr[l])
            .fold(f64::NEG_INFINITY, f64::max);
        if best < pitch.voicing_threshold {
            f0.push(0.0);
            continue;
        }
        let pick = (lag_min..=lag_max)
            .find(|&l| {
                nr[l] >= pitch.octave_tolerance * best && nr[l] >= nr[l - 1] && nr[l] >= nr[l + 1]
            })
            .unwrap_or_else(|| {
                (lag_min..=lag_max)
                    .max_by(|a, b| nr[*a].partial_cmp(&nr[*b]).unwrap())
                    .unwrap()
            });
        let (a, b, c) = (nr[pick - 1], nr[pick], nr[pick + 1]);
        let curv = a - 2.0 * b + c;
        let shift = if curv.abs() > 1e-12 {
            (0.5 * (a - c) / curv).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let hz = sr / (pick as f64 + shift);
        f0.push(if (pitch.f0_min..=pitch.f0_max).contains(&hz) {
            hz
        } else {
            0.0
        });
    }
    Ok(F0Contour::new(f0, cfg.hop_length))
}
