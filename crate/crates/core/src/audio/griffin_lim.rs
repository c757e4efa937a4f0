use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::mel::mel_filterbank;
use super::stft::Stft;
use super::{AudioClip, DspError, MelSpectrogram, SpectrogramConfig};

pub struct GriffinLimOutput {
    pub clip: AudioClip,
    /// `‖S − |STFT(x_i)|‖ / ‖S‖` for each iterate, first to last.
    pub spectral_convergence: Vec<f64>,
}

type PinvCache = Mutex<HashMap<String, Arc<Vec<Vec<f64>>>>>;

/// Pseudo-inverse of the mel filterbank, `n_bins × n_mels`.
fn filterbank_pinv(cfg: &SpectrogramConfig) -> Arc<Vec<Vec<f64>>> {
    static CACHE: OnceLock<PinvCache> = OnceLock::new();
    let key = format!(
        "{}:{}:{}:{}:{}",
        cfg.sample_rate,
        cfg.n_fft,
        cfg.n_mels,
        cfg.f_min.to_bits(),
        cfg.f_max.to_bits()
    );
    let cache = CACHE.get_or_init(Default::default);
    if let Some(p) = cache.lock().unwrap().get(&key) {
        return p.clone();
    }
    let (fb, _) = mel_filterbank(cfg);
    let (m, n) = (fb.len(), cfg.n_bins());
    let mat = DMatrix::from_fn(m, n, |i, j| fb[i][j]);
    let pinv = mat
        .pseudo_inverse(1e-10)
        .expect("SVD of a finite filterbank converges");
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| pinv[(j, i)]).collect())
        .collect();
    let rows = Arc::new(rows);
    cache.lock().unwrap().insert(key, rows.clone());
    rows
}

fn fold_weight(k: usize, n_fft: usize) -> f64 {
    if k == 0 || (n_fft.is_multiple_of(2) && k == n_fft / 2) {
        1.0
    } else {
        2.0
    }
}

/// Linear magnitudes estimated from a log-mel spectrogram through the
/// filterbank pseudo-inverse (negative power clamped to zero).
pub fn mel_to_magnitude(mel: &MelSpectrogram) -> Vec<Vec<f64>> {
    let cfg = mel.config();
    let pinv = filterbank_pinv(cfg);
    (0..mel.n_frames())
        .map(|t| {
            let power: Vec<f64> = mel
                .frame(t)
                .iter()
                .map(|v| (v.exp() - cfg.log_floor).max(0.0))
                .collect();
            pinv.iter()
                .map(|row| {
                    let p: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
                    p.max(0.0).sqrt()
                })
                .collect()
        })
        .collect()
}

/// Griffin-Lim phase reconstruction from linear STFT magnitudes.
pub fn griffin_lim(
    magnitudes: &[Vec<f64>],
    cfg: &SpectrogramConfig,
    iterations: usize,
) -> Result<GriffinLimOutput, DspError> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(DspError::InvalidConfig(
            "iterations must be at least 1".into(),
        ));
    }
    if magnitudes.is_empty() || magnitudes.iter().any(|m| m.len() != cfg.n_bins()) {
        return Err(DspError::InvalidMel(format!(
            "expected frames of {} bins",
            cfg.n_bins()
        )));
    }
    let stft = Stft::new(cfg);
    let weights: Vec<f64> = (0..cfg.n_bins())
        .map(|k| fold_weight(k, cfg.n_fft))
        .collect();
    let target_norm = magnitudes
        .iter()
        .flat_map(|f| f.iter().zip(&weights).map(|(m, w)| w * m * m))
        .sum::<f64>()
        .sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let initial: Vec<Vec<Complex64>> = magnitudes
        .iter()
        .map(|f| {
            f.iter()
                .map(|m| Complex64::from_polar(*m, rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let mut x = stft.inverse(&initial);
    let mut errors = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let spec = stft.forward(&x);
        let mut err = 0.0;
        let projected: Vec<Vec<Complex64>> = spec
            .iter()
            .zip(magnitudes)
            .map(|(frame, mags)| {
                frame
                    .iter()
                    .zip(mags)
                    .zip(&weights)
                    .map(|((c, m), w)| {
                        let a = c.norm();
                        err += w * (m - a) * (m - a);
                        if a > 1e-12 {
                            c * (m / a)
                        } else {
                            Complex64::new(*m, 0.0)
                        }
                    })
                    .collect()
            })
            .collect();
        errors.push(if target_norm > 0.0 {
            err.sqrt() / target_norm
        } else {
            0.0
        });
        x = stft.inverse(&projected);
    }
    Ok(GriffinLimOutput {
        clip: AudioClip::new(x, cfg.sample_rate)?,
        spectral_convergence: errors,
    })
}

/// Waveform from a (denormalized) log-mel spectrogram. Output length is
/// `(T - 1)·hop + win`.
pub fn invert_mel(mel: &MelSpectrogram, iterations: usize) -> Result<AudioClip, DspError> {
    let mags = mel_to_magnitude(mel);
    Ok(griffin_lim(&mags, mel.config(), iterations)?.clip)
}
