//! Frame → segment → video feature hierarchy.
//!
//! * frame encoder: linear projection plus batch norm over frames
//! * temporal encoder: pre-norm transformer with windowed local attention,
//!   rotary positions and one temporal downsampling step
//! * LLM-encoder stand-in: full-attention transformer with low-rank
//!   adapters on the query/value projections
//! * frozen text encoder used as the contrastive target
//! * mapper: identity-initialized linear layer inserted for fine-tuning

pub mod config;
pub mod layers;

pub use config::EncoderConfig;
pub use layers::{band_mask, causal_mask, lora_linear, positions, AttentionOutput, Lora};

use layers::{
    attention, ffn, init_attention, init_ffn, init_identity_linear, init_layer_norm,
    layer_norm, linear, residual, AttentionSpec,
};

use crate::error::{Error, Result};
use crate::numerics::{c, Element, Graph, ParameterStore, Rng, RunningUpdate, Tensor, Var};

pub const FRAME: &str = "frame";
pub const TEMPORAL: &str = "temporal";
pub const LLM: &str = "llm";
pub const TEXT: &str = "text";
pub const MAPPER: &str = "mapper";

impl EncoderConfig {
    pub fn lora(&self) -> Lora {
        Lora {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
        }
    }
}

pub fn init_frame_encoder<T: Element>(store: &mut ParameterStore<T>, cfg: &EncoderConfig, rng: &mut Rng) -> Result<()> {
    // No bias: batch norm removes any per-feature offset.
    let std = 1.0 / (cfg.input_dim as f64).sqrt();
    store.init_normal("frame.proj.w", &[cfg.input_dim, cfg.hidden], std, rng, false)?;
    init_layer_norm(store, "frame.bn", cfg.hidden, false)?;
    store.init_const("frame.bn.running_mean", &[cfg.hidden], 0.0, true)?;
    store.init_const("frame.bn.running_var", &[cfg.hidden], 1.0, true)
}

/// `raw: [T*, D_in]` → `F: [T*, D]`. Batch statistics are taken over every
/// row of `raw`, so callers stack the valid frames of a whole batch.
pub fn frame_encode<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    raw: Var,
) -> Result<Var> {
    let (n, d) = g.value(raw).dims2()?;
    if n == 0 {
        return Err(Error::Domain("frame encoder received no frames".into()));
    }
    if d != cfg.input_dim {
        return Err(Error::shape("frame_encode", &[n, d], &[n, cfg.input_dim]));
    }
    let w = g.param(store, "frame.proj.w")?;
    let h = g.matmul(raw, w)?;
    let gamma = g.param(store, "frame.bn.g")?;
    let beta = g.param(store, "frame.bn.b")?;
    let rm = store.value("frame.bn.running_mean")?.clone();
    let rv = store.value("frame.bn.running_var")?.clone();
    g.batch_norm_1d(h, gamma, beta, &rm, &rv, "frame.bn", 1e-5)
}

/// Folds queued batch-norm statistics into the stored running estimates.
pub fn apply_running_updates<T: Element>(
    store: &mut ParameterStore<T>,
    updates: &[RunningUpdate<T>],
    momentum: f64,
) -> Result<()> {
    let m: T = c(momentum);
    for u in updates {
        for (suffix, fresh) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let p = store.get_mut(&format!("{}.{suffix}", u.name))?;
            for (r, &f) in p.value.data_mut().iter_mut().zip(fresh.data()) {
                *r = (T::one() - m) * *r + m * f;
            }
        }
    }
    Ok(())
}

fn init_block<T: Element>(
    store: &mut ParameterStore<T>,
    prefix: &str,
    cfg: &EncoderConfig,
    lora: bool,
    rng: &mut Rng,
    frozen: bool,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), cfg.hidden, frozen)?;
    let rank = lora.then_some(cfg.lora_rank);
    init_attention(store, &format!("{prefix}.attn"), cfg.hidden, rank, rng, frozen)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), cfg.hidden, frozen)?;
    init_ffn(store, &format!("{prefix}.ffn"), cfg.hidden, cfg.ffn, rng, frozen)
}

/// One pre-norm self-attention block with RoPE. `mask` is additive.
#[allow(clippy::too_many_arguments)]
fn encoder_block<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    prefix: &str,
    x: Var,
    mask: Option<&Tensor<T>>,
    lora: Option<Lora>,
    dropout: f64,
) -> Result<(Var, Vec<Var>)> {
    let t = g.value(x).dims2()?.0;
    let pos = positions(t);
    let attn_prefix = format!("{prefix}.attn");
    let spec = AttentionSpec {
        prefix: &attn_prefix,
        heads: cfg.heads,
        lora,
        rope: Some((&pos, &pos, cfg.rope_base)),
        mask,
    };
    let mut weights = Vec::new();
    let x = residual(g, store, &format!("{prefix}.ln1"), x, dropout, |g, h| {
        let a = attention(g, store, &spec, h, h)?;
        weights = a.weights;
        Ok(a.out)
    })?;
    let x = residual(g, store, &format!("{prefix}.ln2"), x, dropout, |g, h| {
        ffn(g, store, &format!("{prefix}.ffn"), h)
    })?;
    Ok((x, weights))
}

pub fn init_temporal_encoder<T: Element>(store: &mut ParameterStore<T>, cfg: &EncoderConfig, rng: &mut Rng) -> Result<()> {
    for l in 0..cfg.temporal_layers {
        init_block(store, &format!("temporal.{l}"), cfg, false, rng, false)?;
    }
    init_layer_norm(store, "temporal.ln_f", cfg.hidden, false)
}

/// Windowed multi-head self-attention: row `i` attends to `|i - j| <=
/// window / 2` only, with rotary positions on queries and keys.
pub fn local_self_attention<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    prefix: &str,
    x: Var,
) -> Result<AttentionOutput> {
    let t = g.value(x).dims2()?.0;
    let pos = positions(t);
    let mask = band_mask::<T>(t, cfg.window);
    let spec = AttentionSpec {
        prefix,
        heads: cfg.heads,
        lora: None,
        rope: Some((&pos, &pos, cfg.rope_base)),
        mask: Some(&mask),
    };
    attention(g, store, &spec, x, x)
}

/// Adjacent-group mean over time; a short trailing group stands alone.
pub fn temporal_downsample<T: Element>(g: &mut Graph<T>, x: Var, factor: usize) -> Result<Var> {
    g.downsample_rows(x, factor)
}

/// `F: [T*, D]` → `Z: [ceil(T*/factor), D]`.
pub fn temporal_encode<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    f: Var,
) -> Result<Var> {
    let mut x = f;
    for l in 0..cfg.temporal_layers {
        if l == cfg.downsample_after_layer {
            x = temporal_downsample(g, x, cfg.downsample_factor)?;
        }
        let t = g.value(x).dims2()?.0;
        let mask = band_mask::<T>(t, cfg.window);
        x = encoder_block(g, store, cfg, &format!("temporal.{l}"), x, Some(&mask), None, cfg.dropout)?.0;
    }
    if cfg.downsample_after_layer == cfg.temporal_layers {
        x = temporal_downsample(g, x, cfg.downsample_factor)?;
    }
    layer_norm(g, store, "temporal.ln_f", x)
}

pub fn init_llm_encoder<T: Element>(store: &mut ParameterStore<T>, cfg: &EncoderConfig, rng: &mut Rng) -> Result<()> {
    for l in 0..cfg.llm_layers {
        init_block(store, &format!("llm.{l}"), cfg, true, rng, false)?;
    }
    init_layer_norm(store, "llm.ln_f", cfg.hidden, false)
}

/// Segment (or mapped) features → video features `M`, same shape.
pub fn llm_encode<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    z: Var,
) -> Result<Var> {
    let mut x = z;
    for l in 0..cfg.llm_layers {
        x = encoder_block(g, store, cfg, &format!("llm.{l}"), x, None, Some(cfg.lora()), cfg.dropout)?.0;
    }
    layer_norm(g, store, "llm.ln_f", x)
}

/// Frozen text encoder: embedding table plus transformer, all frozen.
pub fn init_text_encoder<T: Element>(
    store: &mut ParameterStore<T>,
    cfg: &EncoderConfig,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<()> {
    store.init_normal("text.embed", &[vocab_size, cfg.hidden], 1.0, rng, true)?;
    for l in 0..cfg.text_layers {
        init_block(store, &format!("text.{l}"), cfg, false, rng, true)?;
    }
    init_layer_norm(store, "text.ln_f", cfg.hidden, true)
}

/// Token ids → `L: [T̄, D]`. Runs without dropout whatever the graph mode.
pub fn text_encode_frozen<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    ids: &[usize],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Domain("text encoder received an empty sentence".into()));
    }
    let table = g.param(store, "text.embed")?;
    let mut x = g.gather_rows(table, ids)?;
    for l in 0..cfg.text_layers {
        x = encoder_block(g, store, cfg, &format!("text.{l}"), x, None, None, 0.0)?.0;
    }
    layer_norm(g, store, "text.ln_f", x)
}

/// Mean over the rows whose mask entry is true (all rows when `None`).
pub fn mean_pool<T: Element>(g: &mut Graph<T>, seq: Var, mask: Option<&[bool]>) -> Result<Var> {
    let n = g.value(seq).dims2()?.0;
    match mask {
        None if n > 0 => g.mean_rows(seq),
        None => Err(Error::Domain("mean pooling over zero rows".into())),
        Some(m) => {
            if m.len() != n {
                return Err(Error::shape("mean_pool", g.shape(seq), &[m.len()]));
            }
            let keep: Vec<usize> = (0..n).filter(|&i| m[i]).collect();
            if keep.is_empty() {
                return Err(Error::Domain("mean pooling with every position masked".into()));
            }
            if keep.len() == n {
                return g.mean_rows(seq);
            }
            let rows = g.gather_rows(seq, &keep)?;
            g.mean_rows(rows)
        }
    }
}

pub fn init_mapper<T: Element>(store: &mut ParameterStore<T>, cfg: &EncoderConfig) -> Result<()> {
    init_identity_linear(store, "mapper", cfg.hidden)
}

pub fn mapper<T: Element>(g: &mut Graph<T>, store: &ParameterStore<T>, z: Var) -> Result<Var> {
    linear(g, store, "mapper", z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mode;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            input_dim: 5,
            hidden: 8,
            heads: 2,
            ffn: 12,
            proto_dim: 6,
            lora_rank: 2,
            lora_alpha: 4.0,
            ..Default::default()
        }
    }

    fn rand(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn frame_encode_shapes_and_empty_input() {
        let cfg = tiny();
        let mut rng = Rng::new(0, 0);
        let mut s = ParameterStore::<f64>::new();
        init_frame_encoder(&mut s, &cfg, &mut rng).unwrap();
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.constant(rand(&[7, 5], &mut rng));
        let f = frame_encode(&mut g, &s, &cfg, x).unwrap();
        assert_eq!(g.shape(f), &[7, 8]);
        // pre-affine (gamma = 1, beta = 0) output has per-feature mean ~ 0
        let v = g.value(f);
        for j in 0..8 {
            let m: f64 = (0..7).map(|i| v.at2(i, j)).sum::<f64>() / 7.0;
            assert!(m.abs() < 1e-5);
        }
        assert_eq!(g.take_running_updates().len(), 1);
        let e = g.constant(Tensor::zeros(&[0, 5]));
        assert!(matches!(frame_encode(&mut g, &s, &cfg, e), Err(Error::Domain(_))));
    }

    #[test]
    fn frame_encode_eval_identity_passthrough() {
        let cfg = EncoderConfig { input_dim: 8, ..tiny() };
        let mut s = ParameterStore::<f64>::new();
        init_frame_encoder(&mut s, &cfg, &mut Rng::new(0, 0)).unwrap();
        s.set_value("frame.proj.w", Tensor::eye(8));
        let mut g = Graph::new(Mode::Eval, 0);
        let raw = rand(&[3, 8], &mut Rng::new(1, 0));
        let x = g.constant(raw.clone());
        let f = frame_encode(&mut g, &s, &cfg, x).unwrap();
        assert!(g.value(f).max_abs_diff(&raw) < 1e-4);
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let cfg = tiny();
        let mut s = ParameterStore::<f64>::new();
        init_frame_encoder(&mut s, &cfg, &mut Rng::new(0, 0)).unwrap();
        let u = RunningUpdate {
            name: "frame.bn".into(),
            mean: Tensor::full(&[8], 1.0),
            var: Tensor::full(&[8], 3.0),
        };
        apply_running_updates(&mut s, &[u], 0.5).unwrap();
        assert_eq!(s.value("frame.bn.running_mean").unwrap().data()[0], 0.5);
        assert_eq!(s.value("frame.bn.running_var").unwrap().data()[0], 2.0);
    }

    #[test]
    fn temporal_downsample_cases() {
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let x = g.constant(Tensor::full(&[4, 3], 2.0));
        let y = temporal_downsample(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
        let x = g.constant(rand(&[5, 3], &mut Rng::new(2, 0)));
        let y = temporal_downsample(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(y), &[3, 3]);
        assert_eq!(g.value(y).row(2), g.value(x).row(4));
    }

    #[test]
    fn local_attention_single_position_is_value_projection() {
        let cfg = tiny();
        let mut rng = Rng::new(3, 0);
        let mut s = ParameterStore::<f64>::new();
        init_temporal_encoder(&mut s, &cfg, &mut rng).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(rand(&[1, 8], &mut rng));
        let a = local_self_attention(&mut g, &s, &cfg, "temporal.0.attn", x).unwrap();
        let v = linear(&mut g, &s, "temporal.0.attn.v", x).unwrap();
        let o = linear(&mut g, &s, "temporal.0.attn.o", v).unwrap();
        assert!(g.value(a.out).max_abs_diff(g.value(o)) < 1e-12);
    }

    #[test]
    fn mean_pool_cases() {
        let mut g = Graph::<f64>::new(Mode::Eval, 0);
        let one = g.constant(Tensor::from_f64(&[1, 2], &[3.0, -1.0]).unwrap());
        let p = mean_pool(&mut g, one, None).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, -1.0]);
        let two = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 5.0, 6.0]).unwrap());
        let p = mean_pool(&mut g, two, Some(&[false, true])).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, 6.0]);
        assert!(matches!(mean_pool(&mut g, two, Some(&[false, false])), Err(Error::Domain(_))));
        let cst = g.constant(Tensor::full(&[4, 3], 0.25));
        let p = mean_pool(&mut g, cst, None).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn mapper_identity_init() {
        let cfg = tiny();
        let mut s = ParameterStore::<f64>::new();
        init_mapper(&mut s, &cfg).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let z = g.constant(rand(&[3, 8], &mut Rng::new(4, 0)));
        let m = mapper(&mut g, &s, z).unwrap();
        assert_eq!(g.value(m), g.value(z));
    }

    #[test]
    fn text_encoder_rejects_out_of_vocab() {
        let cfg = tiny();
        let mut s = ParameterStore::<f64>::new();
        init_text_encoder(&mut s, &cfg, 5, &mut Rng::new(0, 0)).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        assert!(matches!(text_encode_frozen(&mut g, &s, &cfg, &[1, 9]), Err(Error::Tokenization(9))));
        let l = text_encode_frozen(&mut g, &s, &cfg, &[1, 2, 4]).unwrap();
        assert_eq!(g.shape(l), &[3, 8]);
    }
}
