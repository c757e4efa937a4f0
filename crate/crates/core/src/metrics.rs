//! Objective quality metrics and paired significance tests.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::audio::{F0Contour, MelSpectrogram};
use crate::classifier::{EmotionLabel, NUM_EMOTIONS};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error("empty input: {0}")]
    Empty(String),
}

type Result<T> = std::result::Result<T, MetricError>;

/// Number of cepstral coefficients compared by [`mcd`], excluding `c0`.
pub const MCD_COEFFS: usize = 13;

/// Orthonormal DCT-II of one frame.
pub fn dct2(x: &[f64]) -> Vec<f64> {
    let m = x.len() as f64;
    (0..x.len())
        .map(|d| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * d as f64 * (i as f64 + 0.5) / m).cos())
                .sum();
            s * if d == 0 {
                (1.0 / m).sqrt()
            } else {
                (2.0 / m).sqrt()
            }
        })
        .collect()
}

/// Mel-cepstral distortion in dB: per frame
/// `(10 / ln 10)·sqrt(2·Σ_{d=1..13} (c_d − c'_d)²)` on orthonormal DCT-II
/// cepstra of the log-mel frames, averaged over frames. No time alignment.
pub fn mcd(gen: &MelSpectrogram, reference: &MelSpectrogram) -> Result<f64> {
    if gen.n_frames() != reference.n_frames() || gen.n_mels() != reference.n_mels() {
        return Err(MetricError::Shape(format!(
            "{}x{} vs {}x{}",
            gen.n_frames(),
            gen.n_mels(),
            reference.n_frames(),
            reference.n_mels()
        )));
    }
    if gen.n_mels() <= MCD_COEFFS {
        return Err(MetricError::Shape(format!(
            "need more than {MCD_COEFFS} mel bands, got {}",
            gen.n_mels()
        )));
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let total: f64 = (0..gen.n_frames())
        .map(|t| {
            let a = dct2(gen.frame(t));
            let b = dct2(reference.frame(t));
            let s: f64 = (1..=MCD_COEFFS).map(|d| (a[d] - b[d]).powi(2)).sum();
            k * (2.0 * s).sqrt()
        })
        .sum();
    Ok(total / gen.n_frames() as f64)
}

pub const SSIM_WINDOW: usize = 7;

/// Mean SSIM over every 7×7 window (valid positions only) of two
/// `rows × cols` arrays, with `L` the dynamic range of `reference`
/// (1 when it is constant).
pub fn ssim_2d(gen: &[f64], reference: &[f64], rows: usize, cols: usize) -> Result<f64> {
    if gen.len() != rows * cols || reference.len() != rows * cols {
        return Err(MetricError::Shape(format!(
            "{} and {} values for {rows}x{cols}",
            gen.len(),
            reference.len()
        )));
    }
    let w = SSIM_WINDOW;
    if rows < w || cols < w {
        return Err(MetricError::Shape(format!(
            "{rows}x{cols} is smaller than the {w}x{w} window"
        )));
    }
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rows - w {
        for q0 in 0..=cols - w {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for q in q0..q0 + w {
                    let x = gen[r * cols + q];
                    let y = reference[r * cols + q];
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cxy = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// [`ssim_2d`] over the `T × n_mels` log-mel values.
pub fn ssim(gen: &MelSpectrogram, reference: &MelSpectrogram) -> Result<f64> {
    if gen.n_frames() != reference.n_frames() || gen.n_mels() != reference.n_mels() {
        return Err(MetricError::Shape(format!(
            "{}x{} vs {}x{}",
            gen.n_frames(),
            gen.n_mels(),
            reference.n_frames(),
            reference.n_mels()
        )));
    }
    ssim_2d(gen.data(), reference.data(), gen.n_frames(), gen.n_mels())
}

/// Pearson correlation of two equal-length series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricError::Shape(format!(
            "{} vs {} values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(MetricError::Undefined(format!(
            "{} paired values; at least 2 required",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation over frames voiced in both contours.
pub fn pcc(f: &F0Contour, g: &F0Contour) -> Result<f64> {
    if f.len() != g.len() {
        return Err(MetricError::Shape(format!(
            "{} vs {} frames",
            f.len(),
            g.len()
        )));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = f
        .f0()
        .iter()
        .zip(g.f0())
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (*a, *b))
        .unzip();
    pearson(&x, &y)
}

/// Counts and row percentages of a 5×5 true-by-predicted table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Confusion {
    pub counts: [[usize; NUM_EMOTIONS]; NUM_EMOTIONS],
    /// Row `r`, column `c`: percent of true-`r` clips predicted `c`.
    pub percent: [[f64; NUM_EMOTIONS]; NUM_EMOTIONS],
    pub accuracy: f64,
}

impl Confusion {
    pub fn from_pairs(pairs: &[(EmotionLabel, EmotionLabel)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(MetricError::Empty("no classified clips".into()));
        }
        let mut counts = [[0usize; NUM_EMOTIONS]; NUM_EMOTIONS];
        for (t, p) in pairs {
            counts[t.index()][p.index()] += 1;
        }
        let mut percent = [[0.0; NUM_EMOTIONS]; NUM_EMOTIONS];
        for r in 0..NUM_EMOTIONS {
            let n: usize = counts[r].iter().sum();
            if n > 0 {
                for c in 0..NUM_EMOTIONS {
                    percent[r][c] = 100.0 * counts[r][c] as f64 / n as f64;
                }
            }
        }
        let correct: usize = (0..NUM_EMOTIONS).map(|i| counts[i][i]).sum();
        Ok(Confusion {
            counts,
            percent,
            accuracy: correct as f64 / pairs.len() as f64,
        })
    }

    pub fn row_present(&self, label: EmotionLabel) -> bool {
        self.counts[label.index()].iter().any(|c| *c > 0)
    }
}

/// SER accuracy and confusion from `(reference label, predicted label)`.
pub fn ser_accuracy(pairs: &[(EmotionLabel, EmotionLabel)]) -> Result<Confusion> {
    Confusion::from_pairs(pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Number of informative pairs (non-zero differences for Wilcoxon).
    pub n: usize,
    pub exact: bool,
}

/// Largest `n` for which the Wilcoxon p-value is computed exactly.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Ranks 1..n of `v` with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One-sided (a > b) Wilcoxon signed-rank test. `V` is the sum of ranks of
/// positive differences; zero differences are dropped. Exact null
/// distribution for up to 12 pairs, otherwise a normal approximation with
/// tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(format!(
            "{} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(MetricError::Empty("no pairs".into()));
    }
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    if d.is_empty() {
        return Err(MetricError::Undefined("all differences are zero".into()));
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let v: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    if n <= WILCOXON_EXACT_MAX {
        // doubled ranks are integers even with ties
        let twice: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = twice.iter().sum();
        let mut ways = vec![0f64; max + 1];
        ways[0] = 1.0;
        for r in &twice {
            for s in (*r..=max).rev() {
                ways[s] += ways[s - r];
            }
        }
        let target = (2.0 * v).round() as usize;
        let tail: f64 = ways[target..].iter().sum();
        return Ok(TestResult {
            statistic: v,
            p_value: tail / 2f64.powi(n as i32),
            n,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = (v - mean - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(TestResult {
        statistic: v,
        p_value: normal.sf(z),
        n,
        exact: false,
    })
}

/// One-tailed paired t-test of mean(a − b) > 0.
pub fn one_tailed_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(format!(
            "{} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(MetricError::Shape(format!(
            "{} pairs; at least 2 required",
            a.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(MetricError::Undefined(
            "differences have zero variance".into(),
        ));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("positive degrees of freedom");
    Ok(TestResult {
        statistic: t,
        p_value: dist.sf(t),
        n: d.len(),
        exact: true,
    })
}
