//! FFT kernels behind [`Graph::spectral_conv`](super::Graph::spectral_conv).
//!
//! Layout: `x` is `[T, C]` row-major, weights are `[modes, C]`. Channels are
//! transformed independently. The inverse follows the usual real-FFT
//! convention: imaginary parts at DC (and at Nyquist for even `T`) are
//! discarded.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

fn column(x: &[f64], t: usize, c: usize, ch: usize) -> Vec<Complex64> {
    (0..t).map(|i| Complex64::new(x[i * c + ch], 0.0)).collect()
}

/// Weight on bin `k` when a half spectrum is folded back to a real signal.
fn fold_weight(k: usize, t: usize) -> f64 {
    if k == 0 || (t.is_multiple_of(2) && k == t / 2) {
        1.0
    } else {
        2.0
    }
}

pub(crate) fn forward(
    x: &[f64],
    t: usize,
    c: usize,
    wr: &[f64],
    wi: &[f64],
    modes: usize,
) -> Vec<f64> {
    let (fwd, inv) = plans(t);
    let half = t / 2;
    let mut out = vec![0.0; t * c];
    for ch in 0..c {
        let mut buf = column(x, t, c, ch);
        fwd.process(&mut buf);
        let mut spec = vec![Complex64::new(0.0, 0.0); t];
        for k in 0..modes {
            let w = Complex64::new(wr[k * c + ch], wi[k * c + ch]);
            let y = w * buf[k];
            if k == 0 || (t.is_multiple_of(2) && k == half) {
                spec[k] = Complex64::new(y.re, 0.0);
            } else {
                spec[k] = y;
                spec[t - k] = y.conj();
            }
        }
        inv.process(&mut spec);
        for i in 0..t {
            out[i * c + ch] = spec[i].re / t as f64;
        }
    }
    out
}

pub(crate) struct SpectralGrads {
    pub dx: Vec<f64>,
    pub dwr: Vec<f64>,
    pub dwi: Vec<f64>,
}

pub(crate) fn backward(
    g: &[f64],
    x: &[f64],
    t: usize,
    c: usize,
    wr: &[f64],
    wi: &[f64],
    modes: usize,
) -> SpectralGrads {
    let (fwd, inv) = plans(t);
    let mut dx = vec![0.0; t * c];
    let mut dwr = vec![0.0; modes * c];
    let mut dwi = vec![0.0; modes * c];
    for ch in 0..c {
        let mut xs = column(x, t, c, ch);
        fwd.process(&mut xs);
        let mut gs = column(g, t, c, ch);
        fwd.process(&mut gs);
        // complex gradient w.r.t. the kept output bins: (c_k / T) · FFT(g)_k
        let mut gx_spec = vec![Complex64::new(0.0, 0.0); t];
        for k in 0..modes {
            let gy = gs[k] * (fold_weight(k, t) / t as f64);
            let w = Complex64::new(wr[k * c + ch], wi[k * c + ch]);
            let gw = gy * xs[k].conj();
            dwr[k * c + ch] = gw.re;
            dwi[k * c + ch] = gw.im;
            gx_spec[k] = gy * w.conj();
        }
        inv.process(&mut gx_spec);
        for i in 0..t {
            dx[i * c + ch] = gx_spec[i].re;
        }
    }
    SpectralGrads { dx, dwr, dwi }
}
