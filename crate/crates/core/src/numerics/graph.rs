//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node to the tape; node ids increase
//! monotonically, so the tape is always topologically ordered and a single
//! reverse sweep yields every gradient.

use std::collections::HashMap;

use super::kernels;
use super::params::ParameterStore;
use super::rng::Rng;
use super::tensor::{c, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Controls the stochastic and statistics-dependent primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch norm uses batch statistics.
    Train,
    /// Dropout is identity, batch norm uses running statistics.
    Eval,
    /// Batch statistics but no dropout: deterministic for finite differences.
    GradCheck,
}

impl Mode {
    pub fn batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::GradCheck)
    }

    pub fn dropout_active(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

impl TryFrom<usize> for Axis {
    type Error = Error;
    fn try_from(v: usize) -> Result<Self> {
        match v {
            0 => Ok(Axis::Rows),
            1 => Ok(Axis::Cols),
            _ => Err(Error::Domain(format!("axis {v} out of range for rank 2"))),
        }
    }
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulConst(Var, Tensor<T>),
    DivScalar(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<T>),
    BatchNormCols(Var, Vec<T>),
    L2NormalizeRows(Var, Vec<T>, T),
    Rope {
        x: Var,
        heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumRows(Var),
    SumAll(Var),
    DownsampleRows(Var, usize),
    Bce(Var, Vec<T>),
    CrossEntropy(Var, Vec<Option<usize>>, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    named: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not influence it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Parameter gradients by name. Frozen or phase-disabled parameters that
    /// appeared on the tape map to zero tensors.
    pub fn named(&self) -> impl Iterator<Item = (&str, Tensor<T>)> + '_ {
        self.named.iter().map(|(n, v)| (n.as_str(), self.get(*v)))
    }

    pub fn by_name(&self, name: &str) -> Option<Tensor<T>> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.get(*v))
    }

    pub fn into_map(self) -> std::collections::BTreeMap<String, Tensor<T>> {
        self.named
            .iter()
            .map(|(n, v)| (n.clone(), self.get(*v)))
            .collect()
    }
}

/// The tape. Single-writer; build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    mode: Mode,
    rng: Rng,
    check_finite: bool,
    clamp_events: usize,
    running: Vec<RunningUpdate<T>>,
    gelu_fault: Option<T>,
}

fn same_shape(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            mode,
            rng: Rng::new(seed, 0x64726f70),
            check_finite: false,
            clamp_events: 0,
            running: Vec::new(),
            gelu_fault: None,
        }
    }

    /// Scales the GELU backward rule by `factor`. Exists so the gradient
    /// checker can be shown to reject a wrong derivative.
    #[doc(hidden)]
    pub fn inject_gelu_backward_fault(&mut self, factor: f64) {
        self.gelu_fault = Some(c(factor));
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Makes every primitive fail on non-finite output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Number of probabilities clamped into `[1e-12, 1 - 1e-12]` by BCE.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.param_order.clear();
        self.running.clear();
        self.clamp_events = 0;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.running)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Domain(format!(
                "non-finite value produced at tape entry {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf not tied to a named parameter.
    pub fn var(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated lookups return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            needs_grad: p.updates(),
        });
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let ng = self.ng(a);
        self.push(t, Op::Transpose(a), ng)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    fn row_broadcast(&self, name: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(r).len() != n {
            return Err(Error::shape(name, self.shape(x), self.shape(r)));
        }
        Ok((m, n))
    }

    /// `x[i, j] + r[j]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("add_row", x, r)?;
        let rv = self.value(r).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + rv[i % n]).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(x) || self.ng(r);
        self.push(t, Op::AddRow(x, r), ng)
    }

    /// `x[i, j] * r[j]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast("mul_row", x, r)?;
        let rv = self.value(r).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * rv[i % n]).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(x) || self.ng(r);
        self.push(t, Op::MulRow(x, r), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s: T = c(s);
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    /// Adds a constant tensor; `-inf` entries act as attention masks.
    pub fn add_const(&mut self, x: Var, k: &Tensor<T>) -> Result<Var> {
        same_shape("add_const", self.value(x), k)?;
        let data = self.value(x).data().iter().zip(k.data()).map(|(&a, &b)| a + b).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(x);
        self.push(t, Op::AddConst(x), ng)
    }

    pub fn mul_const(&mut self, x: Var, k: Tensor<T>) -> Result<Var> {
        same_shape("mul_const", self.value(x), &k)?;
        let data = self.value(x).data().iter().zip(k.data()).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(x);
        self.push(t, Op::MulConst(x, k), ng)
    }

    /// `x / s` for a single-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("div_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v / sv);
        let ng = self.ng(x) || self.ng(s);
        self.push(t, Op::DivScalar(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| kernels::gelu(v).0);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            kernels::softmax_inplace(&mut out[i * n..(i + 1) * n]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[m, n], out)?, Op::SoftmaxRows(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        match axis {
            Axis::Cols => self.softmax_rows(x),
            Axis::Rows => {
                let t = self.transpose(x)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
        }
    }

    /// Softmax of `x / tau` along `axis` (`Rows` normalizes each column).
    pub fn softmax_temp(&mut self, x: Var, axis: Axis, tau: Var) -> Result<Var> {
        let tv = self.value(tau).item();
        if !(tv > T::zero()) {
            return Err(Error::Domain(format!(
                "softmax temperature must be positive, got {tv:?}"
            )));
        }
        let scaled = self.div_scalar(x, tau)?;
        self.softmax(scaled, axis)
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let (out, rstd) = kernels::normalize_rows(self.value(x).data(), m, n, c(eps));
        let ng = self.ng(x);
        self.push(Tensor::new(&[m, n], out)?, Op::LayerNormRows(x, rstd), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm_rows(x, eps)?;
        let s = self.mul_row(n, gamma)?;
        self.add_row(s, beta)
    }

    /// Normalizes each column over the rows with batch statistics (no
    /// affine). Returns the normalized node plus the batch mean and biased
    /// variance.
    pub fn batch_norm_cols(&mut self, x: Var, eps: f64) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let (m, n) = self.value(x).dims2()?;
        let xt = self.value(x).transpose()?;
        let (norm_t, rstd) = kernels::normalize_rows(xt.data(), n, m, c(eps));
        let mut mean = vec![T::zero(); n];
        let mut var = vec![T::zero(); n];
        let inv_m: T = c(1.0 / m as f64);
        for j in 0..n {
            let row = xt.row(j);
            let mu = row.iter().copied().sum::<T>() * inv_m;
            mean[j] = mu;
            var[j] = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_m;
        }
        let out = Tensor::new(&[n, m], norm_t)?.transpose()?;
        let ng = self.ng(x);
        let v = self.push(out, Op::BatchNormCols(x, rstd), ng)?;
        Ok((v, Tensor::new(&[n], mean)?, Tensor::new(&[n], var)?))
    }

    /// Batch normalization over the row (frame) axis with affine `gamma`,
    /// `beta`. Train/grad-check modes use batch statistics and queue a
    /// running-statistics update under `name`; eval mode uses the stored
    /// running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        name: &str,
        eps: f64,
    ) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let normed = if self.mode.batch_stats() {
            let (v, mean, var) = self.batch_norm_cols(x, eps)?;
            if self.mode == Mode::Train {
                self.running.push(RunningUpdate {
                    name: name.to_string(),
                    mean,
                    var,
                });
            }
            v
        } else {
            if running_mean.len() != n || running_var.len() != n {
                return Err(Error::shape("batch_norm_1d", self.shape(x), running_mean.shape()));
            }
            let mut shift = Vec::with_capacity(m * n);
            let mut scale = Vec::with_capacity(m * n);
            for _ in 0..m {
                for j in 0..n {
                    let r = T::one() / (running_var.data()[j] + c(eps)).sqrt();
                    scale.push(r);
                    shift.push(-running_mean.data()[j]);
                }
            }
            let centered = self.add_const(x, &Tensor::new(&[m, n], shift)?)?;
            self.mul_const(centered, Tensor::new(&[m, n], scale)?)?
        };
        let s = self.mul_row(normed, gamma)?;
        self.add_row(s, beta)
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let eps: T = c(eps);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = if nrm > eps { nrm } else { eps };
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / d));
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[m, n], out)?, Op::L2NormalizeRows(x, norms, eps), ng)
    }

    /// Cosine similarities between the rows of `a: [T, D]` and the columns of
    /// `b: [D, U]`, each side guarded by `max(‖·‖, 1e-8)`.
    pub fn cosine_sim_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, da) = self.value(a).dims2()?;
        let (db, _) = self.value(b).dims2()?;
        if da != db {
            return Err(Error::shape("cosine_sim_matrix", self.shape(a), self.shape(b)));
        }
        let an = self.l2_normalize_rows(a, 1e-8)?;
        let bt = self.transpose(b)?;
        let bn = self.l2_normalize_rows(bt, 1e-8)?;
        self.matmul_nt(an, bn)
    }

    /// Rotary position embedding on `x: [T, heads * d_head]`. Dimension pairs
    /// `(2i, 2i + 1)` of every head at row `t` rotate by
    /// `positions[t] * base^(-2i / d_head)`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let (t, d) = self.value(x).dims2()?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} features do not split into {heads} heads")));
        }
        let dh = d / heads;
        if !dh.is_multiple_of(2) {
            return Err(Error::Config(format!("RoPE needs an even head dimension, got {dh}")));
        }
        if positions.len() != t {
            return Err(Error::shape("rope", self.shape(x), &[positions.len()]));
        }
        let (cos, sin) = kernels::rope_tables::<T>(positions, dh, base);
        let out = kernels::rope_apply(self.value(x).data(), t, heads, dh, &cos, &sin, false);
        let ng = self.ng(x);
        self.push(
            Tensor::new(&[t, d], out)?,
            Op::Rope { x, heads, cos, sin },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start > end || end > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[m, end - start], out)?, Op::SliceCols(x, start, end), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&[m, total], out)?, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start > end || end > m {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&[end - start, n], out)?, Op::SliceRows(x, start, end), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, w) = self.value(p).dims2()?;
            if w != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&[rows, n], out)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row lookup, e.g. token embeddings.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Tokenization(i));
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let ng = self.ng(table);
        self.push(
            Tensor::new(&[idx.len(), n], out)?,
            Op::GatherRows(table, idx.to_vec()),
            ng,
        )
    }

    /// Column sums as a `[1, n]` row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[1, n], out)?, Op::SumRows(x), ng)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).dims2()?.0;
        let s = self.sum_rows(x)?;
        self.scale(s, 1.0 / m as f64)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Means over consecutive groups of `factor` rows; a short final group is
    /// averaged over the rows it has.
    pub fn downsample_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if factor == 0 {
            return Err(Error::Config("downsample factor must be positive".into()));
        }
        let groups = m.div_ceil(factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); groups * n];
        for g in 0..groups {
            let lo = g * factor;
            let hi = (lo + factor).min(m);
            let inv: T = c(1.0 / (hi - lo) as f64);
            for i in lo..hi {
                for j in 0..n {
                    out[g * n + j] += src[i * n + j] * inv;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[groups, n], out)?, Op::DownsampleRows(x, factor), ng)
    }

    /// Inverted dropout drawn from the graph's stream. Identity unless the
    /// mode is [`Mode::Train`].
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 || !self.mode.dropout_active() {
            return Ok(x);
        }
        let keep: T = c(1.0 / (1.0 - p));
        let shape = self.shape(x).to_vec();
        let n = self.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.uniform() < p { T::zero() } else { keep })
            .collect();
        self.mul_const(x, Tensor::new(&shape, mask)?)
    }

    /// Mean binary cross-entropy of probabilities `pred` against binary
    /// `target`. Probabilities are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce_mean(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::shape("bce_mean", p.shape(), &[target.len()]));
        }
        if p.is_empty() {
            return Err(Error::Domain("bce over zero entries".into()));
        }
        let (lo, hi) = (1e-12, 1.0 - 1e-12);
        let mut clamped = 0;
        let mut total = 0.0;
        for (&pv, &tv) in p.data().iter().zip(target) {
            let mut q = pv.as_f64();
            if !(lo..=hi).contains(&q) {
                clamped += 1;
                q = q.clamp(lo, hi);
            }
            let t = tv.as_f64();
            total -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        self.clamp_events += clamped;
        let loss = total / target.len() as f64;
        let ng = self.ng(pred);
        self.push(Tensor::scalar(c(loss)), Op::Bce(pred, target.to_vec()), ng)
    }

    /// Mean over non-ignored rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (m, v) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy_logits", &[m, v], &[targets.len()]));
        }
        let tg: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| if Some(t) == ignore { None } else { Some(t) })
            .collect();
        let count = tg.iter().flatten().count();
        if count == 0 {
            return Err(Error::Domain("every target position is ignored".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, t) in tg.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            let lse = kernels::log_sum_exp(row);
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Domain(format!("target id {t} outside vocabulary of {v}")));
                }
                total += lse.as_f64() - row[t].as_f64();
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = total / count as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(c(loss)),
            Op::CrossEntropy(logits, tg, Tensor::new(&[m, v], probs)?),
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            named: self.param_order.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(delta) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(
                        Tensor::new(self.nodes[v.0].value.shape(), delta)
                            .expect("gradient shape matches node"),
                    );
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.ng(*a) {
                    acc(*a, kernels::matmul_nt(gd, self.value(*b).data(), m, n, k));
                }
                if self.ng(*b) {
                    acc(*b, kernels::matmul_tn(self.value(*a).data(), gd, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.0;
                if self.ng(*a) {
                    acc(*a, kernels::matmul(gd, self.value(*b).data(), m, n, k));
                }
                if self.ng(*b) {
                    acc(*b, kernels::matmul_tn(gd, self.value(*a).data(), m, n, k));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?.into_data()),
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                acc(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::AddRow(x, r) => {
                acc(*x, gd.to_vec());
                let n = self.value(*r).len();
                let mut dr = vec![T::zero(); n];
                for (i, &v) in gd.iter().enumerate() {
                    dr[i % n] += v;
                }
                acc(*r, dr);
            }
            Op::MulRow(x, r) => {
                let n = self.value(*r).len();
                let (vx, vr) = (self.value(*x).data(), self.value(*r).data());
                acc(*x, gd.iter().enumerate().map(|(i, &v)| v * vr[i % n]).collect());
                let mut dr = vec![T::zero(); n];
                for (i, &v) in gd.iter().enumerate() {
                    dr[i % n] += v * vx[i];
                }
                acc(*r, dr);
            }
            Op::Scale(x, s) => acc(*x, gd.iter().map(|&v| v * *s).collect()),
            Op::AddConst(x) => acc(*x, gd.to_vec()),
            Op::MulConst(x, k) => acc(*x, gd.iter().zip(k.data()).map(|(&a, &b)| a * b).collect()),
            Op::DivScalar(x, s) => {
                let sv = self.value(*s).item();
                acc(*x, gd.iter().map(|&v| v / sv).collect());
                if self.ng(*s) {
                    // d(x/s)/ds = -x/s² = -out/s
                    let ds = gd
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &o)| g * o)
                        .sum::<T>()
                        * (-T::one() / sv);
                    acc(*s, vec![ds]);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                let f = self.gelu_fault.unwrap_or(T::one());
                acc(*x, gd.iter().zip(vx).map(|(&g, &v)| g * kernels::gelu(v).1 * f).collect());
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = node.value.dims2()?;
                let y = node.value.data();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: T = gd[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in r {
                        dx[j] = y[j] * (gd[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNormRows(x, rstd) => {
                let (m, n) = node.value.dims2()?;
                acc(*x, kernels::normalize_rows_backward(node.value.data(), gd, rstd, m, n));
            }
            Op::BatchNormCols(x, rstd) => {
                let (m, n) = node.value.dims2()?;
                let yt = node.value.transpose()?;
                let gt = g.transpose()?;
                let dxt = kernels::normalize_rows_backward(yt.data(), gt.data(), rstd, n, m);
                acc(*x, Tensor::new(&[n, m], dxt)?.transpose()?.into_data());
            }
            Op::L2NormalizeRows(x, norms, eps) => {
                let (m, n) = node.value.dims2()?;
                let y = node.value.data();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    if norms[i] > *eps {
                        let dot: T = gd[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in r {
                            dx[j] = (gd[j] - y[j] * dot) / norms[i];
                        }
                    } else {
                        for j in r {
                            dx[j] = gd[j] / *eps;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Rope { x, heads, cos, sin } => {
                let (t, d) = node.value.dims2()?;
                acc(*x, kernels::rope_apply(gd, t, *heads, d / heads, cos, sin, true));
            }
            Op::SliceCols(x, start, end) => {
                let (m, n) = self.value(*x).dims2()?;
                let w = end - start;
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                    }
                    acc(p, dp);
                    off += w;
                }
            }
            Op::SliceRows(x, start, end) => {
                let (m, n) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); m * n];
                dx[start * n..end * n].copy_from_slice(gd);
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, gd[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::GatherRows(table, idx) => {
                let (m, n) = self.value(*table).dims2()?;
                let mut dt = vec![T::zero(); m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dt[i * n + j] += gd[r * n + j];
                    }
                }
                acc(*table, dt);
            }
            Op::SumRows(x) => {
                let (m, n) = self.value(*x).dims2()?;
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend_from_slice(gd);
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => acc(*x, vec![gd[0]; self.value(*x).len()]),
            Op::DownsampleRows(x, factor) => {
                let (m, n) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let gi = i / factor;
                    let lo = gi * factor;
                    let cnt = ((lo + factor).min(m) - lo) as f64;
                    let inv: T = c(1.0 / cnt);
                    for j in 0..n {
                        dx[i * n + j] = gd[gi * n + j] * inv;
                    }
                }
                acc(*x, dx);
            }
            Op::Bce(pred, target) => {
                let (lo, hi) = (1e-12, 1.0 - 1e-12);
                let u = target.len() as f64;
                let dx = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let q = p.as_f64().clamp(lo, hi);
                        let t = t.as_f64();
                        c::<T>((-t / q + (1.0 - t) / (1.0 - q)) / u) * gd[0]
                    })
                    .collect();
                acc(*pred, dx);
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let v = probs.dims2()?.1;
                let count = targets.iter().flatten().count() as f64;
                let scale = gd[0] * c::<T>(1.0 / count);
                let mut dx = vec![T::zero(); probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..v {
                            dx[i * v + j] = probs.data()[i * v + j] * scale;
                        }
                        dx[i * v + t] -= scale;
                    }
                }
                acc(*logits, dx);
            }
        }
        Ok(())
    }
}
