//! Independent reference computations shared by the integration tests and
//! the acceptance run.
#![allow(dead_code)]

use std::f64::consts::PI;

use emovq::audio::{MelSpectrogram, SpectrogramConfig};
use emovq::autodiff::{grad_check, Graph, Result, Tensor, Var};
use emovq::classifier::{
    nearest_in_block, ClassifierConfig, ClassifierModel, EmotionLabel, EMBED_DIM, NUM_CODES,
};
use emovq::generator::{generator_loss_var, GeneratorConfig, GeneratorModel};
use emovq::nn::{Bound, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn sum_weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    // random fixed projection so every output coordinate matters
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Builds a unary test case: x -> weighted sum of op(x).
pub type Case = (
    &'static str,
    Vec<usize>,
    fn(&mut Graph, Var) -> Result<Var>,
    f64,
);

pub fn unary_cases() -> Vec<Case> {
    vec![
        ("add", vec![3, 4], |g, x| g.add(x, x), 1e-5),
        (
            "sub",
            vec![3, 4],
            |g, x| {
                let y = g.scale(x, 3.0)?;
                g.sub(x, y)
            },
            1e-5,
        ),
        ("mul", vec![3, 4], |g, x| g.mul(x, x), 1e-3),
        (
            "div",
            vec![5],
            |g, x| {
                let d = g.add_scalar(x, 3.0)?;
                g.div(x, d)
            },
            1e-3,
        ),
        ("scale", vec![2, 5], |g, x| g.scale(x, -0.7), 1e-5),
        ("transpose", vec![3, 5], |g, x| g.transpose(x), 1e-5),
        (
            "matmul",
            vec![4, 3],
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let w = g.constant(rand_tensor(&mut rng, &[3, 5]));
                g.matmul(x, w)
            },
            1e-5,
        ),
        (
            "matmul_rhs",
            vec![3, 5],
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                let a = g.constant(rand_tensor(&mut rng, &[4, 3]));
                g.matmul(a, x)
            },
            1e-5,
        ),
        (
            "add_row",
            vec![4],
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(13);
                let a = g.constant(rand_tensor(&mut rng, &[3, 4]));
                g.add_row(a, x)
            },
            1e-5,
        ),
        (
            "mul_row",
            vec![3, 4],
            |g, x| {
                let b = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.3]));
                g.mul_row(x, b)
            },
            1e-5,
        ),
        (
            "conv1d_input",
            vec![9, 3],
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(14);
                let w = g.constant(rand_tensor(&mut rng, &[3, 3, 4]));
                g.conv1d(x, w, 2, 1)
            },
            1e-5,
        ),
        (
            "conv1d_weight",
            vec![3, 2, 4],
            |g, w| {
                let mut rng = ChaCha8Rng::seed_from_u64(15);
                let x = g.constant(rand_tensor(&mut rng, &[7, 2]));
                g.conv1d(x, w, 1, 1)
            },
            1e-5,
        ),
        ("layer_norm", vec![3, 6], |g, x| g.layer_norm(x, 1e-5), 1e-3),
        (
            "relu",
            vec![3, 4],
            |g, x| {
                // keep inputs away from the kink
                let s = g.scale(x, 1.0)?;
                let y = g.add_scalar(s, 2.0)?;
                g.relu(y)
            },
            1e-5,
        ),
        ("gelu", vec![3, 4], |g, x| g.gelu(x), 1e-3),
        ("exp", vec![6], |g, x| g.exp(x), 1e-3),
        (
            "log",
            vec![6],
            |g, x| {
                let y = g.add_scalar(x, 2.0)?;
                g.log(y)
            },
            1e-3,
        ),
        (
            "sqrt",
            vec![6],
            |g, x| {
                let y = g.add_scalar(x, 2.0)?;
                g.sqrt(y)
            },
            1e-3,
        ),
        (
            "abs",
            vec![6],
            |g, x| {
                let y = g.add_scalar(x, 3.0)?;
                g.abs(y)
            },
            1e-5,
        ),
        ("square", vec![2, 3], |g, x| g.square(x), 1e-3),
        ("softmax", vec![3, 5], |g, x| g.softmax(x), 1e-3),
        ("log_softmax", vec![2, 25], |g, x| g.log_softmax(x), 1e-3),
        ("mean", vec![3, 4], |g, x| g.mean(x), 1e-5),
        ("sum", vec![3, 4], |g, x| g.sum(x), 1e-5),
        ("mean_rows", vec![5, 3], |g, x| g.mean_rows(x), 1e-5),
        (
            "l1_norm",
            vec![6],
            |g, x| {
                let y = g.add_scalar(x, 3.0)?;
                g.l1_norm(y)
            },
            1e-5,
        ),
        ("l2_norm", vec![2, 4], |g, x| g.l2_norm(x), 1e-3),
        (
            "normalize_rows",
            vec![3, 5],
            |g, x| g.normalize_rows(x, 1e-12),
            1e-3,
        ),
        (
            "attention",
            vec![5, 4],
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(16);
                let wq = g.constant(rand_tensor(&mut rng, &[4, 4]));
                let wk = g.constant(rand_tensor(&mut rng, &[4, 4]));
                let q = g.matmul(x, wq)?;
                let k = g.matmul(x, wk)?;
                g.attention(q, k, x)
            },
            1e-3,
        ),
        (
            "concat",
            vec![4],
            |g, x| {
                let s = g.scale(x, 2.0)?;
                g.concat(x, s)
            },
            1e-5,
        ),
        ("reshape", vec![3, 4], |g, x| g.reshape(x, &[2, 6]), 1e-5),
        ("row", vec![4, 3], |g, x| g.row(x, 2), 1e-5),
        ("rows", vec![5, 3], |g, x| g.rows(x, 1, 4), 1e-5),
        ("pick", vec![7], |g, x| g.pick(x, 4), 1e-5),
        (
            "broadcast_rows",
            vec![4],
            |g, x| g.broadcast_rows(x, 3),
            1e-5,
        ),
        ("time_diff", vec![5, 3], |g, x| g.time_diff(x), 1e-5),
        (
            "spectral_conv_input",
            vec![12, 3],
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(17);
                let wr = g.constant(rand_tensor(&mut rng, &[7, 3]));
                let wi = g.constant(rand_tensor(&mut rng, &[7, 3]));
                g.spectral_conv(x, wr, wi, 7)
            },
            1e-5,
        ),
        (
            "spectral_conv_real_weight",
            vec![4, 2],
            |g, wr| {
                let mut rng = ChaCha8Rng::seed_from_u64(18);
                let x = g.constant(rand_tensor(&mut rng, &[9, 2]));
                let wi = g.constant(rand_tensor(&mut rng, &[4, 2]));
                g.spectral_conv(x, wr, wi, 4)
            },
            1e-5,
        ),
        (
            "spectral_conv_imag_weight",
            vec![5, 2],
            |g, wi| {
                let mut rng = ChaCha8Rng::seed_from_u64(19);
                let x = g.constant(rand_tensor(&mut rng, &[8, 2]));
                let wr = g.constant(rand_tensor(&mut rng, &[5, 2]));
                g.spectral_conv(x, wr, wi, 5)
            },
            1e-5,
        ),
    ]
}

/// Circular convolution with the kernel whose half spectrum is the
/// weights, both evaluated by direct O(T²) sums.
pub fn direct_spectral_conv(x: &Tensor, wr: &[f64], wi: &[f64], modes: usize) -> Vec<f64> {
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; t * c];
    for ch in 0..c {
        let mut h = vec![0.0; t];
        for (s, hs) in h.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..modes {
                let (a, b) = (wr[k * c + ch], wi[k * c + ch]);
                let th = 2.0 * PI * (k * s) as f64 / t as f64;
                let re = a * th.cos() - b * th.sin();
                let edge = k == 0 || (t % 2 == 0 && k == t / 2);
                acc += if edge { re } else { 2.0 * re };
            }
            *hs = acc / t as f64;
        }
        for tt in 0..t {
            let mut acc = 0.0;
            for s in 0..t {
                acc += h[s] * x.data()[((tt + t - s) % t) * c + ch];
            }
            out[tt * c + ch] = acc;
        }
    }
    out
}

pub fn fast_spectral_conv(x: &Tensor, wr: &Tensor, wi: &Tensor, modes: usize) -> Tensor {
    let mut g = Graph::new();
    let (xv, a, b) = (
        g.constant(x.clone()),
        g.constant(wr.clone()),
        g.constant(wi.clone()),
    );
    let y = g.spectral_conv(xv, a, b, modes).unwrap();
    g.value(y).clone()
}

/// Largest relative L2 error between the FFT path and the direct sum over
/// `cases` random draws with T in 8..=64.
pub fn spectral_conv_max_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let t = rng.gen_range(8..=64);
        let c = rng.gen_range(1..=3);
        let modes = rng.gen_range(1..=t / 2 + 1);
        let x = rand_tensor(&mut rng, &[t, c]);
        let wr = rand_tensor(&mut rng, &[modes, c]);
        let wi = rand_tensor(&mut rng, &[modes, c]);
        let fast = fast_spectral_conv(&x, &wr, &wi, modes);
        let slow = direct_spectral_conv(&x, wr.data(), wi.data(), modes);
        let num: f64 = fast
            .data()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = slow.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
    }
    worst
}

/// Grad-check error of every op case over `trials` random inputs, as
/// `(name, error, tolerance)` with the worst trial per op.
pub fn op_grad_errors(trials: u64) -> Vec<(&'static str, f64, f64)> {
    let mut out: Vec<(&'static str, f64, f64)> = Vec::new();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        for (k, (name, shape, op, tol)) in unary_cases().into_iter().enumerate() {
            let x = rand_tensor(&mut rng, &shape);
            let err = grad_check(
                |g, v| {
                    let y = op(g, v)?;
                    sum_weighted(g, y, 7 + trial)
                },
                &x,
                1e-5,
            )
            .unwrap();
            if trial == 0 {
                out.push((name, err, tol));
            } else {
                out[k].1 = out[k].1.max(err);
            }
        }
    }
    out
}

pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

pub fn tiny_classifier() -> ClassifierModel {
    ClassifierModel::new(ClassifierConfig {
        channels: 8,
        ffn_dim: 8,
        blocks: 1,
        ..ClassifierConfig::default()
    })
    .unwrap()
}

pub fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        width: 8,
        modes: 3,
        style_dim: 3,
        ffn_dim: 8,
        encoder_stages: 1,
        decoder_stages: 1,
        ..GeneratorConfig::default()
    }
}

/// L_vq with the stopped quantities (`z` in the codebook term, `e` in the
/// β term) frozen at their values for the unperturbed model. Its value and
/// analytic gradient agree with the stop-gradient form at that point, and
/// unlike it, central differences apply.
pub fn frozen_vq_loss(
    model: &ClassifierModel,
    g: &mut Graph,
    p: &Bound,
    x: Var,
    z0: &Tensor,
    e0: &Tensor,
    target: usize,
) -> Var {
    let cfg = model.config();
    let z = model.encode_var(g, p, x).unwrap();
    let logq = model.log_posterior_var(g, p, z).unwrap();
    let picked = g.pick(logq, target).unwrap();
    let ce = g.scale(picked, -1.0 / NUM_CODES as f64).unwrap();
    let e = g.row(p.var(model.codebook_id().unwrap()), target).unwrap();
    let zc = g.constant(z0.clone());
    let ec = g.constant(e0.clone());
    let a = g.sub(zc, e).unwrap();
    let a = g.square(a).unwrap();
    let a = g.sum(a).unwrap();
    let b = g.sub(z, ec).unwrap();
    let b = g.square(b).unwrap();
    let b = g.sum(b).unwrap();
    let b = g.scale(b, cfg.beta).unwrap();
    let c = g.add(a, b).unwrap();
    let c = g.scale(c, cfg.alpha).unwrap();
    g.add(ce, c).unwrap()
}

/// Worst `(tensor, relative error)` from central differences on the
/// classifier loss of a tiny randomized model, checked against the input
/// (h = 1e-5) and every parameter tensor (h = 1e-4). Fails if the real
/// loss and the frozen surrogate disagree in value or analytic gradient.
pub fn vq_loss_grad_check(seed: u64) -> std::result::Result<(String, f64), String> {
    let mut model = tiny_classifier();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.3..0.3));
    }
    let x = rand_tensor(&mut rng, &[7, 80]);
    let cb_id = model.codebook_id().unwrap();
    let mut worst = (String::new(), 0.0f64);
    for label in [EmotionLabel::Angry, EmotionLabel::Surprised] {
        // frozen quantities and the target at the base point
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = model.encode_var(&mut g, &p, xv).unwrap();
        let z0 = g.value(z).clone();
        let cos = model.codebook().unwrap().cosines(z0.data()).unwrap();
        let target = nearest_in_block(&cos, label);
        let table = model.params().get(cb_id);
        let e0 =
            Tensor::vector(table.data()[target * EMBED_DIM..(target + 1) * EMBED_DIM].to_vec());

        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let xv = g.param(x.clone());
        let real = model.loss_var(&mut g, &p, xv, label).unwrap().total;
        let gr = g.backward(real).unwrap();
        let real_val = g.value(real).item();
        let real_grads = p.grads(&gr, model.params());
        let real_x = gr.get(xv).unwrap().clone();
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let xv = g.param(x.clone());
        let sur = frozen_vq_loss(&model, &mut g, &p, xv, &z0, &e0, target);
        if (g.value(sur).item() - real_val).abs() >= 1e-12 {
            return Err("surrogate value differs from the loss".into());
        }
        let gs = g.backward(sur).unwrap();
        let close = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(u, v)| (u - v).abs() <= 1e-12 * (1.0 + u.abs()))
        };
        if !close(&real_x, gs.get(xv).unwrap())
            || !real_grads
                .iter()
                .zip(p.grads(&gs, model.params()))
                .all(|(a, b)| close(a, &b))
        {
            return Err("surrogate gradient differs from the loss gradient".into());
        }

        let err = grad_check(
            |g, xv| {
                let p = model.params().bind(g, false);
                Ok(frozen_vq_loss(&model, g, &p, xv, &z0, &e0, target))
            },
            &x,
            1e-5,
        )
        .unwrap();
        if err > worst.1 {
            worst = ("input".into(), err);
        }
        for (i, t) in model.params().tensors().iter().enumerate() {
            let err = grad_check(
                |g, pv| {
                    let xv = g.constant(x.clone());
                    let p = model.params().bind_with(g, false, i, pv);
                    Ok(frozen_vq_loss(&model, g, &p, xv, &z0, &e0, target))
                },
                t,
                1e-4,
            )
            .unwrap();
            if err > worst.1 {
                worst = (model.params().names()[i].clone(), err);
            }
        }
    }
    Ok(worst)
}

fn random_mel(rng: &mut ChaCha8Rng, t: usize, cfg: &SpectrogramConfig) -> MelSpectrogram {
    let v = (0..t * cfg.n_mels)
        .map(|_| rng.gen_range(-8.0..0.0))
        .collect();
    MelSpectrogram::new(v, t, cfg.clone()).unwrap()
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / s).collect()
}

/// Worst `(tensor, relative error)` from central differences on the full
/// weighted generator loss of a tiny randomized model against a tiny
/// randomized classifier.
pub fn generator_loss_grad_check(seed: u64) -> (String, f64) {
    let cfg = SpectrogramConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cls = tiny_classifier();
    randomize(cls.params_mut(), seed + 1, 0.3);
    let mut model = GeneratorModel::new(tiny_generator_config()).unwrap();
    randomize(model.params_mut(), seed + 2, 0.3);
    // unit-scale inputs keep round-off below the tolerance
    let x = random_mel(&mut rng, 6, &cfg)
        .map(|v| v / 4.0 + 1.0)
        .to_tensor();
    let y = random_mel(&mut rng, 6, &cfg)
        .map(|v| v / 4.0 + 1.0)
        .to_tensor();
    let s = Tensor::vector(vec![0.1, 0.2, 0.3, -0.1, 0.4]);
    let e = Tensor::vector(unit_vector(&mut rng, EMBED_DIM));
    let loss_cfg = model.config().loss.clone();

    let forward = |g: &mut Graph, p: &Bound, xv| {
        let yv = g.constant(y.clone());
        let sv = g.constant(s.clone());
        let ev = g.constant(e.clone());
        let out = model.forward_var(g, p, xv, sv, ev).unwrap();
        let cp = cls.params().bind(g, false);
        Ok(generator_loss_var(g, &loss_cfg, &cls, &cp, out, yv, 3)
            .unwrap()
            .total)
    };
    let mut worst = (
        "input".to_string(),
        grad_check(
            |g, xv| {
                let p = model.params().bind(g, false);
                forward(g, &p, xv)
            },
            &x,
            1e-5,
        )
        .unwrap(),
    );
    for (i, t) in model.params().tensors().iter().enumerate() {
        let err = grad_check(
            |g, pv| {
                let xv = g.constant(x.clone());
                let p = model.params().bind_with(g, false, i, pv);
                forward(g, &p, xv)
            },
            t,
            1e-4,
        )
        .unwrap();
        if err > worst.1 {
            worst = (model.params().names()[i].clone(), err);
        }
    }
    worst
}

/// Upper-tail Wilcoxon statistic and p-value by enumerating all 2^n sign
/// assignments.
pub fn wilcoxon_enumerated(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    // average ranks by counting, independent of the library's sort
    let ranks: Vec<f64> = abs
        .iter()
        .map(|x| {
            let less = abs.iter().filter(|y| *y < x).count() as f64;
            let equal = abs.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let v: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = d.len();
    let mut hits = 0u64;
    for mask in 0u64..1 << n {
        let s: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        if s >= v - 1e-9 {
            hits += 1;
        }
    }
    (v, hits as f64 / (1u64 << n) as f64)
}

/// Random paired samples on a coarse grid (so ties and zero differences
/// occur) with n cycling through 1..=10.
pub fn wilcoxon_trials(seed: u64, trials: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|trial| {
            let n = 1 + trial % 10;
            let a = (0..n)
                .map(|_| f64::from(rng.gen_range(0..8)) / 4.0)
                .collect();
            let b = (0..n)
                .map(|_| f64::from(rng.gen_range(0..8)) / 4.0)
                .collect();
            (a, b)
        })
        .collect()
}

/// Γ((ν+1)/2) / Γ(ν/2) for integer ν by the two-step recurrence.
pub fn gamma_ratio(nu: usize) -> f64 {
    let mut r = if nu % 2 == 1 {
        1.0 / PI.sqrt()
    } else {
        PI.sqrt() / 2.0
    };
    let mut k = if nu % 2 == 1 { 1 } else { 2 };
    while k < nu {
        r *= (k as f64 + 1.0) / k as f64;
        k += 2;
    }
    r
}

/// Student-t upper tail by composite Simpson integration of the density.
pub fn t_sf_quadrature(t: f64, nu: usize) -> f64 {
    let v = nu as f64;
    let c = gamma_ratio(nu) / (v * PI).sqrt();
    let pdf = |x: f64| c * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0);
    let steps = 200_000;
    let h = t.abs() / steps as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..steps {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let area = s * h / 3.0;
    if t >= 0.0 {
        0.5 - area
    } else {
        0.5 + area
    }
}

/// Paired t statistic computed directly from the differences.
pub fn paired_t(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = d.iter().sum::<f64>() / n;
    let s2 = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    m / (s2 / n).sqrt()
}
