//! Wiring of the encoders, alignment heads and decoder into the pre-training
//! and translation forward passes.

use crate::alignment::{self, align_loss, localize, pretrain_loss, project_segments, psp_loss, similarity_scores};
use crate::encoders::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Mode, ParameterStore, Rng, Tensor, Var};
use crate::pseudo_gloss::{GlossLabel, PrototypeMatrix};
use crate::translation::{self, decode_teacher_forced, greedy_decode, shift_targets, slt_loss};

/// Parameters of the pre-training model: frame, temporal and LLM encoders,
/// the frozen text encoder and the alignment heads.
pub fn init_pretrain_params<T: Element>(
    cfg: &EncoderConfig,
    prototypes: &PrototypeMatrix,
    text_vocab: usize,
    seed: u64,
) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    if prototypes.dim() != cfg.proto_dim {
        return Err(Error::Config(format!(
            "prototype dimension {} does not match proto_dim {}",
            prototypes.dim(),
            cfg.proto_dim
        )));
    }
    let mut store = ParameterStore::new();
    init_encoder_stack(&mut store, cfg, seed)?;
    encoders::init_text_encoder(&mut store, cfg, text_vocab, &mut Rng::new(seed, 13))?;
    alignment::init_alignment(&mut store, cfg.hidden, prototypes, &mut Rng::new(seed, 14))?;
    Ok(store)
}

fn init_encoder_stack<T: Element>(store: &mut ParameterStore<T>, cfg: &EncoderConfig, seed: u64) -> Result<()> {
    encoders::init_frame_encoder(store, cfg, &mut Rng::new(seed, 10))?;
    encoders::init_temporal_encoder(store, cfg, &mut Rng::new(seed, 11))?;
    encoders::init_llm_encoder(store, cfg, &mut Rng::new(seed, 12))
}

/// Turns a pre-trained store (or a fresh one when `pretrained` is `None`)
/// into the translation model: alignment heads and text encoder dropped,
/// mapper and decoder added.
pub fn init_translation_params<T: Element>(
    cfg: &EncoderConfig,
    pretrained: Option<ParameterStore<T>>,
    vocab_size: usize,
    seed: u64,
) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut store = match pretrained {
        Some(mut s) => {
            s.remove_prefix(&format!("{}.", alignment::PREFIX));
            s.remove_prefix(&format!("{}.", encoders::TEXT));
            s
        }
        None => {
            let mut s = ParameterStore::new();
            init_encoder_stack(&mut s, cfg, seed)?;
            s
        }
    };
    encoders::init_mapper(&mut store, cfg)?;
    translation::init_decoder(&mut store, cfg, vocab_size, &mut Rng::new(seed, 20))?;
    Ok(store)
}

/// Frame encoding over the stacked frames of every sample (batch
/// statistics span the whole batch), then the temporal encoder per sample.
pub fn encode_segments<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    frames: &[Tensor<T>],
) -> Result<Vec<Var>> {
    if frames.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let lens: Vec<usize> = frames.iter().map(|f| f.shape()[0]).collect();
    if lens.contains(&0) {
        return Err(Error::Domain("frame encoder received no frames".into()));
    }
    let raw: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
    let stacked = if raw.len() == 1 { raw[0] } else { g.concat_rows(&raw)? };
    let f = encoders::frame_encode(g, store, cfg, stacked)?;
    let mut out = Vec::with_capacity(frames.len());
    let mut start = 0;
    for &len in &lens {
        let fi = if lens.len() == 1 { f } else { g.slice_rows(f, start, start + len)? };
        start += len;
        out.push(encoders::temporal_encode(g, store, cfg, fi)?);
    }
    Ok(out)
}

/// Pooled text features of a sentence (word ids without markers), `[1, D]`.
/// The text encoder is frozen, so this is computed once and cached.
pub fn text_features<T: Element>(store: &ParameterStore<T>, cfg: &EncoderConfig, ids: &[usize]) -> Result<Tensor<T>> {
    let mut g = Graph::new(Mode::Eval, 0);
    let l = encoders::text_encode_frozen(&mut g, store, cfg, ids)?;
    let pooled = encoders::mean_pool(&mut g, l, None)?;
    Ok(g.value(pooled).clone())
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainLosses {
    pub total: Var,
    pub align: Var,
    /// Mean over the batch of the per-sample localization loss.
    pub psp: Var,
}

/// One pre-training batch: `text[i]` is the pooled `[1, D]` sentence
/// feature and `labels[i]` the gloss presence vector of sample `i`.
pub fn pretrain_losses<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    frames: &[Tensor<T>],
    text: &[Tensor<T>],
    labels: &[GlossLabel],
    lambda: f64,
) -> Result<PretrainLosses> {
    if text.len() != frames.len() || labels.len() != frames.len() {
        return Err(Error::Contract("frames, text features and labels must align".into()));
    }
    let zs = encode_segments(g, store, cfg, frames)?;
    let protos = g.param(store, alignment::PROTOTYPES)?;
    let tau_t = g.param(store, alignment::TAU_T)?;
    let tau_u = g.param(store, alignment::TAU_U)?;
    let tau_c = g.param(store, alignment::TAU_C)?;
    let mut psps = Vec::with_capacity(zs.len());
    let mut pooled = Vec::with_capacity(zs.len());
    for (z, label) in zs.iter().zip(labels) {
        let zp = project_segments(g, store, *z)?;
        let s = similarity_scores(g, zp, protos)?;
        let loc = localize(g, s, tau_t, tau_u)?;
        psps.push(psp_loss(g, loc.e_hat, label)?);
        let m = encoders::llm_encode(g, store, cfg, *z)?;
        pooled.push(encoders::mean_pool(g, m, None)?);
    }
    let psp = mean_of(g, &psps)?;
    let mt = if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled)? };
    let text_rows: Vec<Var> = text.iter().map(|t| g.constant(t.clone())).collect();
    let lt = if text_rows.len() == 1 { text_rows[0] } else { g.concat_rows(&text_rows)? };
    let align = align_loss(g, mt, lt, tau_c)?;
    let total = pretrain_loss(g, align, psp, lambda)?;
    Ok(PretrainLosses { total, align, psp })
}

fn mean_of<T: Element>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

/// Video features for translation: mapper then LLM encoder.
pub fn encode_video<T: Element>(g: &mut Graph<T>, store: &ParameterStore<T>, cfg: &EncoderConfig, z: Var) -> Result<Var> {
    let mapped = encoders::mapper(g, store, z)?;
    encoders::llm_encode(g, store, cfg, mapped)
}

/// Token-averaged teacher-forced cross-entropy over a batch; `targets[i]`
/// is `<bos> … <eos>` for sample `i`.
pub fn slt_batch_loss<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    frames: &[Tensor<T>],
    targets: &[Vec<usize>],
) -> Result<Var> {
    if targets.len() != frames.len() {
        return Err(Error::Contract("frames and targets must align".into()));
    }
    let zs = encode_segments(g, store, cfg, frames)?;
    let mut logits = Vec::with_capacity(zs.len());
    let mut next = Vec::new();
    for (z, ids) in zs.iter().zip(targets) {
        let m = encode_video(g, store, cfg, *z)?;
        let (inp, tgt) = shift_targets(ids)?;
        logits.push(decode_teacher_forced(g, store, cfg, m, &inp)?);
        next.extend(tgt);
    }
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    slt_loss(g, all, &next)
}

/// Greedy translation of one video; the result excludes `<bos>`.
pub fn translate<T: Element>(
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    frames: &Tensor<T>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut g = Graph::new(Mode::Eval, 0);
    let z = encode_segments(&mut g, store, cfg, std::slice::from_ref(frames))?[0];
    let m = encode_video(&mut g, store, cfg, z)?;
    let m = g.value(m).clone();
    greedy_decode(store, cfg, &m, max_len)
}
