//! Word-level target vocabulary, the autoregressive decoder, its
//! teacher-forced loss and greedy decoding.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::encoders::layers::{
    attention, causal_mask, ffn, init_attention, init_ffn, init_layer_norm, init_linear, layer_norm, linear,
    positions, residual, AttentionSpec,
};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Mode, ParameterStore, Rng, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    /// Reserved ids followed by every distinct word of `sentences` in
    /// sorted order.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>]) -> Self {
        let words: BTreeSet<&str> = sentences.iter().flatten().map(|w| w.as_ref()).collect();
        Self::from_tokens(RESERVED.iter().copied().chain(words).map(String::from).collect())
            .expect("reserved tokens are distinct")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config("token vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?} in vocabulary")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word ids without markers.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// `<bos> w_1 … w_n <eos>`.
    pub fn encode_target<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend(self.encode(words));
        ids.push(EOS);
        ids
    }

    /// Words up to the first `<eos>`, skipping `<bos>` and `<pad>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(String::from).collect()).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// Splits `<bos> … <eos>` into decoder inputs and next-token targets.
pub fn shift_targets(ids: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if ids.len() < 2 || ids[0] != BOS {
        return Err(Error::Contract("target sequence must start with <bos> and hold a next token".into()));
    }
    Ok((ids[..ids.len() - 1].to_vec(), ids[1..].to_vec()))
}

pub fn init_decoder<T: Element>(
    store: &mut ParameterStore<T>,
    cfg: &EncoderConfig,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<()> {
    let d = cfg.hidden;
    store.init_normal("decoder.embed", &[vocab_size, d], 1.0, rng, false)?;
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        init_layer_norm(store, &format!("{p}.ln1"), d, false)?;
        init_attention(store, &format!("{p}.self"), d, Some(cfg.lora_rank), rng, false)?;
        init_layer_norm(store, &format!("{p}.ln2"), d, false)?;
        init_attention(store, &format!("{p}.cross"), d, Some(cfg.lora_rank), rng, false)?;
        init_layer_norm(store, &format!("{p}.ln3"), d, false)?;
        init_ffn(store, &format!("{p}.ffn"), d, cfg.ffn, rng, false)?;
    }
    init_layer_norm(store, "decoder.ln_f", d, false)?;
    init_linear(store, "decoder.head", d, vocab_size, rng, false)
}

/// Causal decoder over `inputs` (starting with `<bos>`) with cross-attention
/// to the video features `m`. Row `j` of the result holds the logits for
/// the token following `inputs[..=j]`.
pub fn decode_teacher_forced<T: Element>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    m: Var,
    inputs: &[usize],
) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Contract("decoder input is empty".into()));
    }
    if inputs[0] != BOS {
        return Err(Error::Contract("decoder input must start with <bos>".into()));
    }
    let t = inputs.len();
    let table = g.param(store, "decoder.embed")?;
    let mut x = g.gather_rows(table, inputs)?;
    let pos = positions(t);
    let mask = causal_mask::<T>(t);
    let lora = Some(cfg.lora());
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        let self_prefix = format!("{p}.self");
        let self_spec = AttentionSpec {
            prefix: &self_prefix,
            heads: cfg.heads,
            lora,
            rope: Some((&pos, &pos, cfg.rope_base)),
            mask: Some(&mask),
        };
        x = residual(g, store, &format!("{p}.ln1"), x, cfg.dropout, |g, h| {
            Ok(attention(g, store, &self_spec, h, h)?.out)
        })?;
        let cross_prefix = format!("{p}.cross");
        let cross_spec = AttentionSpec {
            prefix: &cross_prefix,
            heads: cfg.heads,
            lora,
            rope: None,
            mask: None,
        };
        x = residual(g, store, &format!("{p}.ln2"), x, cfg.dropout, |g, h| {
            Ok(attention(g, store, &cross_spec, h, m)?.out)
        })?;
        x = residual(g, store, &format!("{p}.ln3"), x, cfg.dropout, |g, h| {
            ffn(g, store, &format!("{p}.ffn"), h)
        })?;
    }
    let x = layer_norm(g, store, "decoder.ln_f", x)?;
    linear(g, store, "decoder.head", x)
}

/// Mean next-token cross-entropy with `<pad>` targets ignored.
pub fn slt_loss<T: Element>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy_logits(logits, targets, Some(PAD))
}

/// Greedy decoding from `<bos>`: appends the arg-max token (lowest id on
/// ties) until `<eos>` or `max_len` tokens. The result excludes `<bos>` and
/// includes `<eos>` when produced.
pub fn greedy_decode<T: Element>(
    store: &ParameterStore<T>,
    cfg: &EncoderConfig,
    m: &Tensor<T>,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut ids = vec![BOS];
    let mut g = Graph::new(Mode::Eval, 0);
    while ids.len() <= max_len {
        g.reset();
        let mv = g.constant(m.clone());
        let logits = decode_teacher_forced(&mut g, store, cfg, mv, &ids)?;
        let last = g.value(logits).row(ids.len() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        ids.push(best);
        if best == EOS {
            break;
        }
    }
    ids.remove(0);
    Ok(ids)
}
