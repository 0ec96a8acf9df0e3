//! Transformer building blocks shared by the encoders and the decoder.

use crate::error::Result;
use crate::numerics::{c, Element, Graph, ParameterStore, Rng, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Low-rank adapter settings for a frozen projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lora {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

pub fn init_linear<T: Element>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut Rng,
    frozen: bool,
) -> Result<()> {
    store.init_normal(&format!("{prefix}.w"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng, frozen)?;
    store.init_const(&format!("{prefix}.b"), &[d_out], 0.0, frozen)
}

pub fn init_identity_linear<T: Element>(store: &mut ParameterStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(&format!("{prefix}.w"), Tensor::eye(d), false)?;
    store.init_const(&format!("{prefix}.b"), &[d], 0.0, false)
}

/// Frozen base projection plus a trainable adapter: `A ~ N(0, 1/d_in)`,
/// `B = 0`.
pub fn init_lora_linear<T: Element>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
    rng: &mut Rng,
) -> Result<()> {
    init_linear(store, prefix, d_in, d_out, rng, true)?;
    if rank > 0 {
        store.init_normal(&format!("{prefix}.lora_a"), &[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng, false)?;
        store.init_const(&format!("{prefix}.lora_b"), &[d_out, rank], 0.0, false)?;
    }
    Ok(())
}

pub fn init_layer_norm<T: Element>(store: &mut ParameterStore<T>, prefix: &str, d: usize, frozen: bool) -> Result<()> {
    store.init_const(&format!("{prefix}.g"), &[d], 1.0, frozen)?;
    store.init_const(&format!("{prefix}.b"), &[d], 0.0, frozen)
}

pub fn linear<T: Element>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// `x·W + b + (alpha / rank) · dropout(x)·Aᵀ·Bᵀ`.
pub fn lora_linear<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    prefix: &str,
    x: Var,
    lora: Lora,
) -> Result<Var> {
    let base = linear(g, store, prefix, x)?;
    if lora.rank == 0 {
        return Ok(base);
    }
    let a = g.param(store, &format!("{prefix}.lora_a"))?;
    let b = g.param(store, &format!("{prefix}.lora_b"))?;
    let xd = g.dropout(x, lora.dropout)?;
    let h = g.matmul_nt(xd, a)?;
    let d = g.matmul_nt(h, b)?;
    let d = g.scale(d, lora.alpha / lora.rank as f64)?;
    g.add(base, d)
}

pub fn layer_norm<T: Element>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.g"))?;
    let beta = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Additive mask allowing `|i - j| <= window / 2`.
pub fn band_mask<T: Element>(t: usize, window: usize) -> Tensor<T> {
    let half = window / 2;
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            if i.abs_diff(j) > half {
                m.data_mut()[i * t + j] = T::neg_infinity();
            }
        }
    }
    m
}

/// Additive mask allowing `j <= i`.
pub fn causal_mask<T: Element>(t: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = T::neg_infinity();
        }
    }
    m
}

pub struct AttentionSpec<'a, T> {
    pub prefix: &'a str,
    pub heads: usize,
    /// Adapters on the query and value projections.
    pub lora: Option<Lora>,
    /// Query positions, key positions and base for rotary embeddings.
    pub rope: Option<(&'a [usize], &'a [usize], f64)>,
    pub mask: Option<&'a Tensor<T>>,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head `[T_q, T_k]` attention weights.
    pub weights: Vec<Var>,
}

pub fn init_attention<T: Element>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    d: usize,
    lora_rank: Option<usize>,
    rng: &mut Rng,
    frozen: bool,
) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        let name = format!("{prefix}.{p}");
        match lora_rank {
            Some(r) if p == "q" || p == "v" => init_lora_linear(store, &name, d, d, r, rng)?,
            // A key bias shifts every score of a query row equally, which the
            // softmax ignores, so keys have weights only.
            _ if p == "k" => {
                store.init_normal(&format!("{name}.w"), &[d, d], 1.0 / (d as f64).sqrt(), rng, frozen)?
            }
            _ => init_linear(store, &name, d, d, rng, frozen)?,
        }
    }
    Ok(())
}

pub fn attention<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    spec: &AttentionSpec<'_, T>,
    xq: Var,
    xkv: Var,
) -> Result<AttentionOutput> {
    let pre = spec.prefix;
    let proj = |g: &mut Graph<T>, name: &str, x: Var, adapt: bool| -> Result<Var> {
        let full = format!("{pre}.{name}");
        match spec.lora {
            Some(l) if adapt => lora_linear(g, store, &full, x, l),
            _ => linear(g, store, &full, x),
        }
    };
    let mut q = proj(g, "q", xq, true)?;
    let wk = g.param(store, &format!("{pre}.k.w"))?;
    let mut k = g.matmul(xkv, wk)?;
    let v = proj(g, "v", xkv, true)?;
    if let Some((qp, kp, base)) = spec.rope {
        q = g.rope(q, spec.heads, qp, base)?;
        k = g.rope(k, spec.heads, kp, base)?;
    }
    let d = g.value(q).dims2()?.1;
    let dh = d / spec.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.heads);
    let mut weights = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = if spec.heads == 1 { q } else { g.slice_cols(q, lo, hi)? };
        let kh = if spec.heads == 1 { k } else { g.slice_cols(k, lo, hi)? };
        let vh = if spec.heads == 1 { v } else { g.slice_cols(v, lo, hi)? };
        let s = g.matmul_nt(qh, kh)?;
        let mut s = g.scale(s, scale)?;
        if let Some(m) = spec.mask {
            s = g.add_const(s, m)?;
        }
        let w = g.softmax_rows(s)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = linear(g, store, &format!("{pre}.o"), merged)?;
    Ok(AttentionOutput { out, weights })
}

pub fn init_ffn<T: Element>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut Rng,
    frozen: bool,
) -> Result<()> {
    init_linear(store, &format!("{prefix}.1"), d, hidden, rng, frozen)?;
    init_linear(store, &format!("{prefix}.2"), hidden, d, rng, frozen)
}

pub fn ffn<T: Element>(g: &mut Graph<T>, store: &ParameterStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.1"), x)?;
    let h = g.gelu(h)?;
    linear(g, store, &format!("{prefix}.2"), h)
}

/// Pre-norm residual: `x + dropout(f(LN(x)))`.
pub fn residual<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    ln_prefix: &str,
    x: Var,
    dropout: f64,
    f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let h = layer_norm(g, store, ln_prefix, x)?;
    let y = f(g, h)?;
    let y = g.dropout(y, dropout)?;
    g.add(x, y)
}

pub fn positions(t: usize) -> Vec<usize> {
    (0..t).collect()
}

pub(crate) fn scalar<T: Element>(v: f64) -> Tensor<T> {
    Tensor::scalar(c(v))
}
