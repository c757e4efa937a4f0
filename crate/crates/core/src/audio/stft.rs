//! Short-time Fourier transform without center padding.
//!
//! Frame `t` covers samples `[t·hop, t·hop + win)`, multiplied by a periodic
//! Hann window and zero-padded to `n_fft`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{DspError, SpectrogramConfig};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of complete frames: `1 + (len - win) / hop`, or 0 when `len < win`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        1 + (len - win) / hop
    }
}

pub(crate) struct Stft {
    pub n_fft: usize,
    pub win: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &SpectrogramConfig) -> Self {
        let mut planner = FftPlanner::new();
        Stft {
            n_fft: cfg.n_fft,
            win: cfg.win_length,
            hop: cfg.hop_length,
            window: hann_window(cfg.win_length),
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Half spectra (`n_fft/2 + 1` bins) of every frame.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        let t = frame_count(x.len(), self.win, self.hop);
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        (0..t)
            .map(|f| {
                let seg = &x[f * self.hop..f * self.hop + self.win];
                let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
                for ((b, s), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                    b.re = s * w;
                }
                self.fwd.process_with_scratch(&mut buf, &mut scratch);
                buf.truncate(self.n_bins());
                buf
            })
            .collect()
    }

    /// Least-squares inverse: windowed overlap-add divided by the summed
    /// squared window. Samples no window touches are zero.
    pub fn inverse(&self, frames: &[Vec<Complex64>]) -> Vec<f64> {
        let t = frames.len();
        if t == 0 {
            return Vec::new();
        }
        let len = (t - 1) * self.hop + self.win;
        let mut out = vec![0.0; len];
        let mut wsum = vec![0.0; len];
        let n = self.n_fft;
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inv.get_inplace_scratch_len()];
        for (f, half) in frames.iter().enumerate() {
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            for k in 0..half.len() {
                if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
                    buf[k] = Complex64::new(half[k].re, 0.0);
                } else {
                    buf[k] = half[k];
                    buf[n - k] = half[k].conj();
                }
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            let off = f * self.hop;
            for i in 0..self.win {
                let w = self.window[i];
                out[off + i] += w * buf[i].re / n as f64;
                wsum[off + i] += w * w;
            }
        }
        for (o, w) in out.iter_mut().zip(&wsum) {
            *o = if *w > 1e-12 { *o / w } else { 0.0 };
        }
        out
    }
}

/// Power spectrogram `|STFT|²`, frames × (`n_fft/2 + 1`).
pub fn stft_power(x: &[f64], cfg: &SpectrogramConfig) -> Result<Vec<Vec<f64>>, DspError> {
    cfg.validate()?;
    if x.len() < cfg.win_length {
        return Err(DspError::TooShort {
            len: x.len(),
            min: cfg.win_length,
        });
    }
    let stft = Stft::new(cfg);
    Ok(stft
        .forward(x)
        .into_iter()
        .map(|f| f.iter().map(|c| c.norm_sqr()).collect())
        .collect())
}
