//! Pre-training objectives: pseudo-gloss localization with binary
//! cross-entropy, and symmetric contrastive video–sentence alignment.

use crate::encoders::layers::{init_linear, linear, scalar};
use crate::error::{Error, Result};
use crate::numerics::{Axis, Element, Graph, ParameterStore, Rng, Var};
use crate::pseudo_gloss::{GlossLabel, PrototypeMatrix};

pub const PREFIX: &str = "align";
pub const PROJ: &str = "align.proj";
pub const PROTOTYPES: &str = "align.prototypes";
pub const TAU_T: &str = "align.tau_t";
pub const TAU_U: &str = "align.tau_u";
pub const TAU_C: &str = "align.tau_c";

pub const TAU_T_INIT: f64 = 0.1;
pub const TAU_U_INIT: f64 = 0.1;
pub const TAU_C_INIT: f64 = 0.07;
/// Temperatures are clamped into this range after every optimizer step.
pub const TAU_RANGE: (f64, f64) = (1e-3, 100.0);

/// Projection `D → D′`, the frozen prototype bank and the three
/// temperatures.
pub fn init_alignment<T: Element>(
    store: &mut ParameterStore<T>,
    hidden: usize,
    prototypes: &PrototypeMatrix,
    rng: &mut Rng,
) -> Result<()> {
    init_linear(store, PROJ, hidden, prototypes.dim(), rng, false)?;
    store.insert(PROTOTYPES, prototypes.cast(), true)?;
    store.insert(TAU_T, scalar(TAU_T_INIT), false)?;
    store.insert(TAU_U, scalar(TAU_U_INIT), false)?;
    store.insert(TAU_C, scalar(TAU_C_INIT), false)
}

pub fn clamp_temperatures<T: Element>(store: &mut ParameterStore<T>) -> Result<()> {
    let (lo, hi) = (T::from_f64(TAU_RANGE.0), T::from_f64(TAU_RANGE.1));
    for name in [TAU_T, TAU_U, TAU_C] {
        if store.contains(name) {
            for v in store.get_mut(name)?.value.data_mut() {
                *v = v.max(lo).min(hi);
            }
        }
    }
    Ok(())
}

/// `Z: [T, D]` → `Z′: [T, D′]`.
pub fn project_segments<T: Element>(g: &mut Graph<T>, store: &ParameterStore<T>, z: Var) -> Result<Var> {
    linear(g, store, PROJ, z)
}

/// Cosine similarity of each projected segment with each prototype,
/// `[T, U + 1]`. `prototypes` is expected to be a constant or frozen node.
pub fn similarity_scores<T: Element>(g: &mut Graph<T>, zp: Var, prototypes: Var) -> Result<Var> {
    g.cosine_sim_matrix(zp, prototypes)
}

#[derive(Clone, Copy, Debug)]
pub struct Localization {
    /// Softmax over time of `S / tau_T`, `[T, U + 1]`.
    pub st: Var,
    /// Softmax over prototypes of `S / tau_U`, `[T, U + 1]`.
    pub su: Var,
    /// Presence scores `Σ_t st ⊙ su`, `[1, U + 1]`.
    pub e_hat: Var,
}

pub fn localize<T: Element>(g: &mut Graph<T>, s: Var, tau_t: Var, tau_u: Var) -> Result<Localization> {
    let st = g.softmax_temp(s, Axis::Rows, tau_t)?;
    let su = g.softmax_temp(s, Axis::Cols, tau_u)?;
    let prod = g.mul(st, su)?;
    let e_hat = g.sum_rows(prod)?;
    Ok(Localization { st, su, e_hat })
}

/// Mean binary cross-entropy over the `U` gloss entries of `e_hat`; the
/// non-sign entry (column 0) carries no target.
pub fn psp_loss<T: Element>(g: &mut Graph<T>, e_hat: Var, label: &GlossLabel) -> Result<Var> {
    let cols = *g.shape(e_hat).last().unwrap_or(&0);
    if cols != label.bits().len() + 1 {
        return Err(Error::shape("psp_loss", g.shape(e_hat), &[1, label.bits().len() + 1]));
    }
    let glosses = g.slice_cols(e_hat, 1, cols)?;
    g.bce_mean(glosses, &label.targets::<T>())
}

/// Symmetric InfoNCE over in-batch pairs: rows of `mt` (pooled video) and
/// `lt` (pooled sentence) with the same index are positives.
pub fn align_loss<T: Element>(g: &mut Graph<T>, mt: Var, lt: Var, tau_c: Var) -> Result<Var> {
    let (b, d) = g.value(mt).dims2()?;
    if g.shape(lt) != [b, d] {
        return Err(Error::shape("align_loss", &[b, d], g.shape(lt)));
    }
    if b == 0 {
        return Err(Error::Domain("contrastive loss over an empty batch".into()));
    }
    let mn = g.l2_normalize_rows(mt, 1e-8)?;
    let ln = g.l2_normalize_rows(lt, 1e-8)?;
    let sim = g.matmul_nt(mn, ln)?;
    let logits = g.div_scalar(sim, tau_c)?;
    let diag: Vec<usize> = (0..b).collect();
    let v2t = g.cross_entropy_logits(logits, &diag, None)?;
    let lt_logits = g.transpose(logits)?;
    let t2v = g.cross_entropy_logits(lt_logits, &diag, None)?;
    let both = g.add(v2t, t2v)?;
    g.scale(both, 0.5)
}

/// `l_align + lambda · l_psp`.
pub fn pretrain_loss<T: Element>(g: &mut Graph<T>, l_align: Var, l_psp: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("lambda must be a finite non-negative number, got {lambda}")));
    }
    let weighted = g.scale(l_psp, lambda)?;
    g.add(l_align, weighted)
}
