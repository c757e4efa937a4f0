//! Parameter storage and the layers shared by the classifier and generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    /// Like [`bind`](Self::bind), with parameter `index` replaced by `var`.
    pub fn bind_with(&self, g: &mut Graph, trainable: bool, index: usize, var: Var) -> Bound {
        Bound(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == index {
                        var
                    } else {
                        g.leaf(t.clone(), trainable)
                    }
                })
                .collect(),
        )
    }

    /// Replaces the tensor values, keeping names. Shapes must match.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> std::result::Result<(), String> {
        if values.len() != self.tensors.len() {
            return Err(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            ));
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&values) {
            if old.shape() != new.shape() {
                return Err(format!(
                    "tensor {name}: expected shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                ));
            }
        }
        self.tensors = values;
        Ok(())
    }
}

/// Graph variables for a bound [`ParamStore`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradient per parameter, zeros where none flowed.
    pub fn grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..bound) as f32 as f64)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Rows drawn uniformly on the unit sphere (normalized Gaussians).
pub fn unit_sphere_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        data.extend(v.iter().map(|x| (x / n) as f32 as f64));
    }
    Tensor::new(vec![rows, cols], data).expect("shape and data agree")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[input, output], input),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Linear { w, b }
    }

    /// Zero-initialized variant (used for residual output projections).
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[input, output]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Linear { w, b }
    }

    /// Accepts `[T, in]` or a vector `[in]` (returned as a vector).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        if g.shape(x).len() == 1 {
            let n = g.shape(x)[0];
            let x2 = g.reshape(x, &[1, n])?;
            let y = self.forward(g, p, x2)?;
            let m = g.shape(y)[1];
            return g.reshape(y, &[m]);
        }
        let y = g.matmul(x, p.var(self.w))?;
        g.add_row(y, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[kernel, input, output], kernel * input),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Conv1d {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    /// Zero-initialized variant.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            Tensor::zeros(&[kernel, input, output]),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Conv1d {
            w,
            b,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv1d(x, p.var(self.w), self.stride, self.pad)?;
        g.add_row(y, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, 1e-5)?;
        let s = g.mul_row(n, p.var(self.gain))?;
        g.add_row(s, p.var(self.bias))
    }
}

/// Pre-norm transformer block with single-head attention and a GELU MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        ffn: usize,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, ffn),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ffn, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let q = self.q.forward(g, p, h)?;
        let k = self.k.forward(g, p, h)?;
        let v = self.v.forward(g, p, h)?;
        let a = g.attention(q, k, v)?;
        let a = self.o.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.ff1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Spectral convolution over time plus a pointwise linear path, then GELU.
#[derive(Clone, Debug)]
pub struct SpectralBlock {
    wr: ParamId,
    wi: ParamId,
    pointwise: Linear,
    modes: usize,
}

impl SpectralBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        modes: usize,
    ) -> Self {
        let scale = 1.0 / (modes as f64).sqrt();
        let init = |rng: &mut ChaCha8Rng| {
            let data = (0..modes * dim)
                .map(|_| rng.gen_range(-scale..scale) as f32 as f64)
                .collect();
            Tensor::new(vec![modes, dim], data).expect("shape and data agree")
        };
        let wr = store.add(format!("{name}.spectral_re"), init(rng));
        let wi = store.add(format!("{name}.spectral_im"), init(rng));
        SpectralBlock {
            wr,
            wi,
            pointwise: Linear::new(store, rng, &format!("{name}.pointwise"), dim, dim),
            modes,
        }
    }

    /// Inputs shorter than `2·(modes - 1)` frames use the modes they have.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let m = self.modes.min(t / 2 + 1);
        let (wr, wi) = if m < self.modes {
            (g.rows(p.var(self.wr), 0, m)?, g.rows(p.var(self.wi), 0, m)?)
        } else {
            (p.var(self.wr), p.var(self.wi))
        };
        let s = g.spectral_conv(x, wr, wi, m)?;
        let l = self.pointwise.forward(g, p, x)?;
        let y = g.add(s, l)?;
        g.gelu(y)
    }
}
