//! Toy differentiable models with exact per-sample gradients.
//!
//! A local model is a stack of dense layers (tanh on hidden layers, linear
//! output, no biases). Optional low-rank adapters read the input of every
//! dense layer and add `s · B A a` to the final embedding, `s = α / r`.
//! The global model is one dense layer with bias followed by softmax
//! cross-entropy.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn uniform(rng: &mut ChaCha20Rng, rows: usize, cols: usize, fan_in: usize) -> DMatrix<f64> {
    let lim = 1.0 / (fan_in as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-lim..lim))
}

/// Row-major flattening.
pub fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unflatten(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalShape {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    /// 0 disables adapters
    pub rank: usize,
    pub lora_alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `r × d_in`
    pub a: DMatrix<f64>,
    /// `d_H × r`
    pub b: DMatrix<f64>,
    pub scale: f64,
}

impl Adapter {
    pub fn n_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `[A (row-major), B (row-major)]`
    pub fn params(&self) -> Vec<f64> {
        let mut p = flatten(&self.a);
        p.extend(flatten(&self.b));
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let na = self.a.len();
        self.a = unflatten(&p[..na], self.a.nrows(), self.a.ncols());
        self.b = unflatten(&p[na..], self.b.nrows(), self.b.ncols());
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.b * (&self.a * x)) * self.scale
    }

    /// Parameter gradient for upstream gradient `g` at input `x`.
    fn grad(&self, x: &DVector<f64>, g: &DVector<f64>) -> Vec<f64> {
        let u = &self.a * x;
        let ga = (self.b.transpose() * g) * self.scale * x.transpose();
        let gb = g * self.scale * u.transpose();
        let mut p = flatten(&ga);
        p.extend(flatten(&gb));
        p
    }
}

/// Which local parameters a Jacobian or update refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalLayer {
    Adapter(usize),
    Final,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    /// `layers[k]` maps the input of layer `k` (dim `in_k`) to `out_k`.
    pub layers: Vec<DMatrix<f64>>,
    pub adapters: Vec<Adapter>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// input of each dense layer
    pub inputs: Vec<DVector<f64>>,
    /// pre-activations of hidden layers
    pub pre: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

impl LocalModel {
    pub fn new(shape: &LocalShape, rng: &mut ChaCha20Rng) -> Self {
        let dims = [shape.input, shape.hidden, shape.embed];
        let layers: Vec<DMatrix<f64>> = dims
            .windows(2)
            .map(|w| uniform(rng, w[1], w[0], w[0]))
            .collect();
        let adapters = if shape.rank == 0 {
            Vec::new()
        } else {
            dims[..2]
                .iter()
                .map(|&d_in| Adapter {
                    a: uniform(rng, shape.rank, d_in, d_in),
                    b: uniform(rng, shape.embed, shape.rank, shape.rank),
                    scale: shape.lora_alpha / shape.rank as f64,
                })
                .collect()
        };
        Self { layers, adapters }
    }

    pub fn zeros(shape: &LocalShape) -> Self {
        let mut m = Self::new(shape, &mut ChaCha20Rng::seed_from_u64(0));
        for l in &mut m.layers {
            l.fill(0.0);
        }
        for a in &mut m.adapters {
            a.a.fill(0.0);
            a.b.fill(0.0);
        }
        m
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().expect("layers").nrows()
    }

    pub fn n_params(&self, layer: LocalLayer) -> usize {
        match layer {
            LocalLayer::Adapter(k) => self.adapters[k].n_params(),
            LocalLayer::Final => self.layers.last().expect("layers").len(),
        }
    }

    pub fn trace(&self, x: &DVector<f64>) -> Trace {
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::new();
        let last = self.layers.len() - 1;
        for (k, w) in self.layers.iter().enumerate().take(last) {
            let z = w * &inputs[k];
            inputs.push(z.map(f64::tanh));
            pre.push(z);
        }
        let mut output = &self.layers[last] * &inputs[last];
        for (a, inp) in self.adapters.iter().zip(&inputs) {
            output += a.forward(inp);
        }
        Trace { inputs, pre, output }
    }

    /// `B × d_H` embeddings of a `B × d_x` batch.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() == 0 || x.ncols() != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "batch {}x{} for input dim {}",
                x.nrows(),
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut out = DMatrix::zeros(x.nrows(), self.embed_dim());
        for i in 0..x.nrows() {
            let h = self.trace(&x.row(i).transpose()).output;
            out.row_mut(i).copy_from(&h.transpose());
        }
        Ok(out)
    }

    /// `n^L × d_H` Jacobian of the embedding with respect to one parameter group.
    pub fn jacobian(&self, x: &DVector<f64>, layer: LocalLayer) -> DMatrix<f64> {
        let t = self.trace(x);
        let d = self.embed_dim();
        match layer {
            LocalLayer::Final => {
                let inp = t.inputs.last().expect("input");
                let n = inp.len();
                DMatrix::from_fn(d * n, d, |p, k| if p / n == k { inp[p % n] } else { 0.0 })
            }
            LocalLayer::Adapter(idx) => {
                let ad = &self.adapters[idx];
                let a = &t.inputs[idx];
                let (r, din) = (ad.a.nrows(), ad.a.ncols());
                let u = &ad.a * a;
                let mut j = DMatrix::zeros(ad.n_params(), d);
                for l in 0..r {
                    for m in 0..din {
                        for k in 0..d {
                            j[(l * din + m, k)] = ad.scale * ad.b[(k, l)] * a[m];
                        }
                    }
                }
                for k in 0..d {
                    for l in 0..r {
                        j[(r * din + k * r + l, k)] = ad.scale * u[l];
                    }
                }
                j
            }
        }
    }

    /// Gradients of `g · H(x)` with respect to each adapter.
    pub fn adapter_grads(&self, x: &DVector<f64>, g: &DVector<f64>) -> Vec<Vec<f64>> {
        let t = self.trace(x);
        self.adapters
            .iter()
            .zip(&t.inputs)
            .map(|(a, inp)| a.grad(inp, g))
            .collect()
    }

    /// Gradients of `g · H(x)` for the dense layers (row-major), back-propagated
    /// through the adapters as well.
    pub fn layer_grads(&self, x: &DVector<f64>, g: &DVector<f64>) -> Vec<Vec<f64>> {
        let t = self.trace(x);
        let n = self.layers.len();
        let mut grads = vec![Vec::new(); n];
        // upstream gradient at the input of each layer, from the output side
        let mut up = g.clone();
        for k in (0..n).rev() {
            grads[k] = flatten(&(&up * t.inputs[k].transpose()));
            if k == 0 {
                break;
            }
            let mut g_in = self.layers[k].transpose() * &up;
            if let Some(a) = self.adapters.get(k) {
                g_in += a.a.transpose() * (a.b.transpose() * g) * a.scale;
            }
            let dz = t.pre[k - 1].map(|z| 1.0 - z.tanh().powi(2));
            up = g_in.component_mul(&dz);
        }
        grads
    }

    /// Structured design `[J_1 … J_B]` for the adapter `idx` over a batch.
    pub fn adapter_design(&self, xs: &DMatrix<f64>, idx: usize) -> AdapterDesign {
        let ad = &self.adapters[idx];
        let (acts, us): (Vec<_>, Vec<_>) = (0..xs.nrows())
            .map(|i| {
                let t = self.trace(&xs.row(i).transpose());
                let a = t.inputs[idx].clone();
                let u = (&ad.a * &a) * ad.scale;
                (a, u)
            })
            .unzip();
        AdapterDesign {
            b: ad.b.clone(),
            scale: ad.scale,
            acts,
            us,
        }
    }

    pub fn all_matrices(&self) -> Vec<DMatrix<f64>> {
        let mut v = self.layers.clone();
        for a in &self.adapters {
            v.push(a.a.clone());
            v.push(a.b.clone());
        }
        v
    }
}

/// `H = [J_1 … J_B]` for one adapter, `J_j = [s Bᵀ ⊗ a_j ; I ⊗ u_j]` with
/// `u_j = s A a_j`; Gram products use the Kronecker structure.
#[derive(Debug, Clone)]
pub struct AdapterDesign {
    b: DMatrix<f64>,
    scale: f64,
    acts: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
}

impl AdapterDesign {
    fn dims(&self) -> (usize, usize, usize) {
        (self.b.ncols(), self.acts[0].len(), self.b.nrows())
    }

    pub fn batch(&self) -> usize {
        self.acts.len()
    }

    pub fn n_rows(&self) -> usize {
        let (r, din, d) = self.dims();
        r * din + d * r
    }

    pub fn n_cols(&self) -> usize {
        self.dims().2 * self.batch()
    }

    /// `H x` for `x` stacked per sample.
    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let (r, din, d) = self.dims();
        let mut ya = DMatrix::zeros(r, din);
        let mut yb = DMatrix::zeros(d, r);
        for (j, (a, u)) in self.acts.iter().zip(&self.us).enumerate() {
            let xj = x.rows(j * d, d);
            ya += (self.b.transpose() * xj) * self.scale * a.transpose();
            yb += xj * u.transpose();
        }
        let mut out = flatten(&ya);
        out.extend(flatten(&yb));
        DVector::from_vec(out)
    }

    /// `Hᵀ y`.
    pub fn mul_t(&self, y: &DVector<f64>) -> DVector<f64> {
        let (r, din, d) = self.dims();
        let ya = unflatten(&y.as_slice()[..r * din], r, din);
        let yb = unflatten(&y.as_slice()[r * din..], d, r);
        let mut out = Vec::with_capacity(self.n_cols());
        for (a, u) in self.acts.iter().zip(&self.us) {
            let v = (&self.b * (&ya * a)) * self.scale + &yb * u;
            out.extend(v.iter());
        }
        DVector::from_vec(out)
    }

    /// `H Hᵀ`.
    pub fn outer_gram(&self) -> DMatrix<f64> {
        let (r, din, d) = self.dims();
        let mut saa = DMatrix::zeros(din, din);
        let mut suu = DMatrix::zeros(r, r);
        let mut sau = DMatrix::zeros(din, r);
        for (a, u) in self.acts.iter().zip(&self.us) {
            saa += a * a.transpose();
            suu += u * u.transpose();
            sau += a * u.transpose();
        }
        let btb = self.b.transpose() * &self.b * (self.scale * self.scale);
        let na = r * din;
        let n = self.n_rows();
        let mut g = DMatrix::zeros(n, n);
        for l in 0..r {
            for m in 0..din {
                let row = l * din + m;
                for l2 in 0..r {
                    for m2 in 0..din {
                        g[(row, l2 * din + m2)] = btb[(l, l2)] * saa[(m, m2)];
                    }
                }
                for k in 0..d {
                    for l2 in 0..r {
                        let v = self.scale * self.b[(k, l)] * sau[(m, l2)];
                        g[(row, na + k * r + l2)] = v;
                        g[(na + k * r + l2, row)] = v;
                    }
                }
            }
        }
        for k in 0..d {
            for l in 0..r {
                for l2 in 0..r {
                    g[(na + k * r + l, na + k * r + l2)] = suu[(l, l2)];
                }
            }
        }
        g
    }

    /// `Hᵀ H`: block `(j, j')` is `s²(a_j·a_j') B Bᵀ + (u_j·u_j') I`.
    pub fn inner_gram(&self) -> DMatrix<f64> {
        let d = self.dims().2;
        let bbt = &self.b * self.b.transpose() * (self.scale * self.scale);
        let n = self.n_cols();
        let mut g = DMatrix::zeros(n, n);
        for j in 0..self.batch() {
            for j2 in 0..self.batch() {
                let aa = self.acts[j].dot(&self.acts[j2]);
                let uu = self.us[j].dot(&self.us[j2]);
                for k in 0..d {
                    for k2 in 0..d {
                        g[(j * d + k, j2 * d + k2)] = aa * bbt[(k, k2)] + if k == k2 { uu } else { 0.0 };
                    }
                }
            }
        }
        g
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n_cols();
        let mut h = DMatrix::zeros(self.n_rows(), n);
        for c in 0..n {
            let mut e = DVector::zeros(n);
            e[c] = 1.0;
            h.set_column(c, &self.mul(&e));
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    /// `S × d_H`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Per-sample loss and gradients for a batch.
#[derive(Debug, Clone)]
pub struct PerSample {
    pub loss: Vec<f64>,
    pub probs: DMatrix<f64>,
    /// `B × n_θ`, each row `[vec(g_W), g_b]`
    pub g_theta: DMatrix<f64>,
    /// `B × d_H`
    pub g_h: DMatrix<f64>,
}

pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

impl GlobalModel {
    pub fn new(d_h: usize, classes: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            w: uniform(rng, classes, d_h, d_h),
            b: DVector::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = flatten(&self.w);
        p.extend(self.b.iter());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nw = self.w.len();
        self.w = unflatten(&p[..nw], self.w.nrows(), self.w.ncols());
        self.b = DVector::from_column_slice(&p[nw..]);
    }

    pub fn logits(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = h * self.w.transpose();
        for mut row in z.row_iter_mut() {
            row += self.b.transpose();
        }
        z
    }

    pub fn predict(&self, h: &DMatrix<f64>) -> Vec<usize> {
        let z = self.logits(h);
        z.row_iter().map(|r| r.transpose().argmax().0).collect()
    }

    pub fn loss_and_per_sample_grads(&self, h: &DMatrix<f64>, y: &[usize]) -> Result<PerSample> {
        if h.ncols() != self.embed_dim() || h.nrows() != y.len() {
            return Err(ModelError::Shape(format!(
                "embeddings {}x{} with {} labels",
                h.nrows(),
                h.ncols(),
                y.len()
            )));
        }
        let s = self.classes();
        let (bsz, d) = (h.nrows(), h.ncols());
        let z = self.logits(h);
        let mut probs = DMatrix::zeros(bsz, s);
        let mut loss = Vec::with_capacity(bsz);
        let mut g_theta = DMatrix::zeros(bsz, self.n_params());
        let mut g_h = DMatrix::zeros(bsz, d);
        for j in 0..bsz {
            let zj = z.row(j).transpose();
            let p = softmax(&zj);
            let m = zj.max();
            let lse = m + zj.map(|v| (v - m).exp()).sum().ln();
            loss.push(lse - zj[y[j]]);
            let mut gz = p.clone();
            gz[y[j]] -= 1.0;
            for c in 0..s {
                for k in 0..d {
                    g_theta[(j, c * d + k)] = gz[c] * h[(j, k)];
                }
                g_theta[(j, s * d + c)] = gz[c];
            }
            g_h.row_mut(j).copy_from(&(self.w.transpose() * &gz).transpose());
            probs.row_mut(j).copy_from(&p.transpose());
        }
        Ok(PerSample {
            loss,
            probs,
            g_theta,
            g_h,
        })
    }
}

pub fn sgd_step(params: &mut [f64], grad: &[f64], eta: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(ModelError::Shape(format!("{} params, {} grads", params.len(), grad.len())));
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= eta * g;
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    let hit = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    hit as f64 / y.len().max(1) as f64
}

const MAGIC: &[u8; 4] = b"VFLM";

/// `"VFLM"`, `u32` tensor count, then per tensor `u32 rows`, `u32 cols` and
/// row-major `f64` values, all little-endian.
pub fn write_checkpoint<W: Write>(mut out: W, tensors: &[DMatrix<f64>]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.nrows() as u32).to_le_bytes())?;
        out.write_all(&(t.ncols() as u32).to_le_bytes())?;
        for v in flatten(t) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut inp: R) -> Result<Vec<DMatrix<f64>>> {
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut u = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut u)?;
        Ok(u32::from_le_bytes(u) as usize)
    };
    let n = read_u32(&mut inp)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = read_u32(&mut inp)?;
        let cols = read_u32(&mut inp)?;
        let mut vals = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            inp.read_exact(&mut b)?;
            vals.push(f64::from_le_bytes(b));
        }
        out.push(unflatten(&vals, rows, cols));
    }
    Ok(out)
}
