//! Pre-training, two-stage fine-tuning and evaluation loops.

use std::collections::BTreeMap;
use std::io::Write;

use serde_json::json;

use super::checkpoint::{Checkpoint, Phase};
use super::config::RunConfig;
use super::optim::{clip_grad_norm, one_cycle_cosine_lr, AdamW};
use crate::alignment::clamp_temperatures;
use crate::data::{make_batches, Batch, Corpus, Sample};
use crate::encoders::{apply_running_updates, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate as score, EvalReport};
use crate::model::{self, init_pretrain_params, init_translation_params, pretrain_losses, slt_batch_loss};
use crate::numerics::{Graph, Mode, ParameterStore, Rng, Tensor};
use crate::pseudo_gloss::{labels_for, GlossLabel, PrototypeMatrix, PseudoGlossVocab};
use crate::translation::TokenVocab;

pub const PRETRAIN_METRIC: &str = "val_loss";
pub const FINETUNE_METRIC: &str = "dev_bleu4";

/// Target-word and pseudo-gloss vocabularies, both built from the training
/// split.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabularies {
    pub tokens: TokenVocab,
    pub glosses: PseudoGlossVocab,
}

impl Vocabularies {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        if corpus.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let sentences: Vec<&[String]> = corpus.train.iter().map(|s| s.sentence.as_slice()).collect();
        let owned: Vec<Vec<&str>> = sentences.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
        Ok(Self {
            tokens: TokenVocab::build(&owned),
            glosses: PseudoGlossVocab::build(&owned, &corpus.lexicon)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_align: f64,
    pub train_psp: f64,
    pub val_loss: f64,
    pub val_align: f64,
    pub val_psp: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<PretrainRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_bleu4: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub best: Checkpoint,
    /// The model after the last epoch, with its dev BLEU-4 as the value.
    pub last: Checkpoint,
    pub history: Vec<FinetuneRecord>,
}

fn emit(log: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(log, "{value}").map_err(|e| Error::io("<training log>", e))
}

/// Weight decay applies to matrices only; biases, norms and temperatures
/// are left alone.
fn decays(_name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2
}

fn step_seed(seed: u64, phase: u64, epoch: usize, step: usize) -> u64 {
    seed ^ (phase << 56) ^ ((epoch as u64) << 24) ^ step as u64
}

fn batch_frames(batch: &Batch, jitter: Option<(&mut Rng, f64)>) -> Vec<Tensor<f32>> {
    let mut frames: Vec<Tensor<f32>> = (0..batch.len()).map(|i| batch.sample_frames(i)).collect();
    if let Some((rng, sigma)) = jitter {
        if sigma > 0.0 {
            for f in &mut frames {
                for x in f.data_mut() {
                    *x += (sigma * rng.normal()) as f32;
                }
            }
        }
    }
    frames
}

struct Stepper<'a> {
    cfg: &'a RunConfig,
    opt: AdamW<f32>,
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
}

impl Stepper<'_> {
    fn lr(&self) -> f64 {
        one_cycle_cosine_lr(self.step.min(self.total_steps), self.total_steps, self.warmup_steps, self.cfg.train.lr)
    }

    /// Backward, clip, AdamW, temperature clamp and batch-norm statistics.
    fn apply(&mut self, g: &mut Graph<f32>, loss: crate::Var, store: &mut ParameterStore<f32>, epoch: usize) -> Result<f64> {
        let value = g.value(loss).item() as f64;
        let diverged = |detail: String| Error::Divergence {
            epoch,
            step: self.step,
            detail,
        };
        if !value.is_finite() {
            return Err(diverged(format!("loss is {value}")));
        }
        let mut grads: BTreeMap<String, Tensor<f32>> = g
            .backward(loss)?
            .into_map()
            .into_iter()
            .filter(|(n, _)| store.get(n).map(|p| p.updates()).unwrap_or(false))
            .collect();
        clip_grad_norm(&mut grads, self.cfg.train.clip_norm);
        let lr = self.lr();
        self.opt
            .step(store, &grads, lr, decays)
            .map_err(|e| diverged(e.to_string()))?;
        clamp_temperatures(store)?;
        let updates = g.take_running_updates();
        if store.get("frame.bn.g").map(|p| p.updates()).unwrap_or(false) {
            apply_running_updates(store, &updates, self.cfg.encoder.bn_momentum)?;
        }
        self.step += 1;
        Ok(value)
    }
}

struct PretrainSet {
    text: Vec<Tensor<f32>>,
    labels: Vec<GlossLabel>,
}

fn pretrain_set(
    samples: &[Sample],
    store: &ParameterStore<f32>,
    enc: &EncoderConfig,
    corpus: &Corpus,
    vocab: &Vocabularies,
) -> Result<PretrainSet> {
    let mut text = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        text.push(model::text_features(store, enc, &vocab.tokens.encode(&s.sentence))?);
        labels.push(labels_for(&s.sentence, &corpus.lexicon, &vocab.glosses));
    }
    Ok(PretrainSet { text, labels })
}

fn pick<X: Clone>(xs: &[X], idx: &[usize]) -> Vec<X> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

fn pretrain_eval(
    store: &ParameterStore<f32>,
    cfg: &RunConfig,
    batches: &[Batch],
    set: &PretrainSet,
) -> Result<(f64, f64, f64)> {
    let mut sums = (0.0, 0.0, 0.0);
    let mut g = Graph::new(Mode::Eval, 0);
    for b in batches {
        g.reset();
        let frames = batch_frames(b, None);
        let l = pretrain_losses(
            &mut g,
            store,
            &cfg.encoder,
            &frames,
            &pick(&set.text, &b.indices),
            &pick(&set.labels, &b.indices),
            cfg.train.lambda,
        )?;
        sums.0 += g.value(l.total).item() as f64;
        sums.1 += g.value(l.align).item() as f64;
        sums.2 += g.value(l.psp).item() as f64;
    }
    let n = batches.len().max(1) as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

/// Optimizes `align + lambda * psp` and keeps the parameters with the lowest
/// validation loss.
pub fn pretrain(cfg: &RunConfig, corpus: &Corpus, log: &mut dyn Write) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.dev.is_empty() {
        return Err(Error::Config("pre-training needs a non-empty dev split".into()));
    }
    let enc = &cfg.encoder;
    let tc = &cfg.train;
    let vocab = Vocabularies::build(corpus)?;
    let protos = PrototypeMatrix::build(&vocab.glosses, &corpus.embeddings, enc.proto_dim)?;
    let mut store = init_pretrain_params::<f32>(enc, &protos, vocab.tokens.len(), tc.seed)?;
    let train_set = pretrain_set(&corpus.train, &store, enc, corpus, &vocab)?;
    let dev_set = pretrain_set(&corpus.dev, &store, enc, corpus, &vocab)?;
    let dev_batches = make_batches(&corpus.dev, &vocab.tokens, tc.batch_size, 0, false)?;

    let steps_per_epoch = corpus.train.len().div_ceil(tc.batch_size);
    let total_steps = (tc.pretrain_epochs * steps_per_epoch).max(1);
    let mut stepper = Stepper {
        cfg,
        opt: AdamW::new(tc.weight_decay),
        step: 0,
        total_steps,
        warmup_steps: (tc.warmup_epochs * steps_per_epoch).min(total_steps - 1),
    };
    let mut jitter_rng = Rng::new(tc.seed, 0x6a69);
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    for epoch in 1..=tc.pretrain_epochs {
        let batches = make_batches(&corpus.train, &vocab.tokens, tc.batch_size, tc.seed ^ epoch as u64, true)?;
        let mut sums = (0.0, 0.0, 0.0);
        for b in &batches {
            let mut g = Graph::new(Mode::Train, step_seed(tc.seed, 1, epoch, stepper.step));
            g.set_check_finite(tc.check_finite);
            let frames = batch_frames(b, Some((&mut jitter_rng, tc.feature_jitter)));
            let l = pretrain_losses(
                &mut g,
                &store,
                enc,
                &frames,
                &pick(&train_set.text, &b.indices),
                &pick(&train_set.labels, &b.indices),
                tc.lambda,
            )?;
            sums.1 += g.value(l.align).item() as f64;
            sums.2 += g.value(l.psp).item() as f64;
            sums.0 += stepper.apply(&mut g, l.total, &mut store, epoch)?;
        }
        let n = batches.len() as f64;
        let lr = stepper.lr();
        let (val_loss, val_align, val_psp) = pretrain_eval(&store, cfg, &dev_batches, &dev_set)?;
        let rec = PretrainRecord {
            epoch,
            lr,
            train_loss: sums.0 / n,
            train_align: sums.1 / n,
            train_psp: sums.2 / n,
            val_loss,
            val_align,
            val_psp,
        };
        emit(
            log,
            json!({"phase": "pretrain", "epoch": epoch, "split": "train", "loss": rec.train_loss,
                   "align": rec.train_align, "psp": rec.train_psp, "lr": lr}),
        )?;
        emit(
            log,
            json!({"phase": "pretrain", "epoch": epoch, "split": "dev", "loss": val_loss,
                   "align": val_align, "psp": val_psp}),
        )?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: stepper.step,
                detail: format!("validation loss is {val_loss}"),
            });
        }
        if best.as_ref().is_none_or(|b| val_loss < b.meta.best_value) {
            best = Some(Checkpoint::new(
                Phase::Pretrain,
                epoch,
                PRETRAIN_METRIC,
                val_loss,
                cfg,
                vocab.tokens.tokens().to_vec(),
                vocab.glosses.lemmas().to_vec(),
                store.clone(),
                stepper.opt.clone(),
            ));
        }
        history.push(rec);
    }
    let best = match best {
        Some(b) => b,
        None => Checkpoint::new(
            Phase::Pretrain,
            0,
            PRETRAIN_METRIC,
            pretrain_eval(&store, cfg, &dev_batches, &dev_set)?.0,
            cfg,
            vocab.tokens.tokens().to_vec(),
            vocab.glosses.lemmas().to_vec(),
            store,
            stepper.opt,
        ),
    };
    Ok(PretrainOutcome { best, history })
}

/// Decoded sentences plus corpus scores for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub hypotheses: Vec<Vec<String>>,
}

impl Evaluation {
    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes") + "\n"
    }

    /// One sentence per line, tokens joined by single spaces.
    pub fn hypotheses_text(&self) -> String {
        self.hypotheses.iter().map(|h| h.join(" ") + "\n").collect()
    }
}

pub fn evaluate_store(
    store: &ParameterStore<f32>,
    enc: &EncoderConfig,
    tokens: &TokenVocab,
    samples: &[Sample],
    max_len: usize,
) -> Result<Evaluation> {
    let mut hyps = Vec::with_capacity(samples.len());
    for s in samples {
        let ids = model::translate(store, enc, &s.frames, max_len)?;
        hyps.push(tokens.decode(&ids));
    }
    let refs: Vec<Vec<String>> = samples.iter().map(|s| s.sentence.clone()).collect();
    Ok(Evaluation {
        report: score(&hyps, &refs)?,
        hypotheses: hyps,
    })
}

/// Greedy-decodes and scores `split` with a fine-tuned checkpoint.
pub fn evaluate(ckpt: &Checkpoint, corpus: &Corpus, split: &str) -> Result<Evaluation> {
    require_translation_model(ckpt)?;
    let tokens = checkpoint_vocab(ckpt)?;
    let cfg = &ckpt.meta.config;
    evaluate_store(&ckpt.params, &cfg.encoder, &tokens, corpus.split(split)?, cfg.train.max_decode_len)
}

/// Translates one `[T*, D_in]` feature sequence.
pub fn translate_features(ckpt: &Checkpoint, frames: &Tensor<f32>) -> Result<Vec<String>> {
    require_translation_model(ckpt)?;
    let tokens = checkpoint_vocab(ckpt)?;
    let cfg = &ckpt.meta.config;
    let (_, d) = frames.dims2()?;
    if d != cfg.encoder.input_dim {
        return Err(Error::shape("translate", frames.shape(), &[frames.shape()[0], cfg.encoder.input_dim]));
    }
    let ids = model::translate(&ckpt.params, &cfg.encoder, frames, cfg.train.max_decode_len)?;
    Ok(tokens.decode(&ids))
}

fn require_translation_model(ckpt: &Checkpoint) -> Result<()> {
    if ckpt.meta.phase != Phase::Finetune {
        return Err(Error::Contract("checkpoint holds a pre-trained model without a decoder; fine-tune it first".into()));
    }
    Ok(())
}

fn checkpoint_vocab(ckpt: &Checkpoint) -> Result<TokenVocab> {
    let v = TokenVocab::build::<&str>(&[]);
    let words: Vec<&str> = ckpt.meta.token_vocab.iter().skip(v.len()).map(String::as_str).collect();
    let rebuilt = TokenVocab::build(&[words]);
    if rebuilt.tokens() != ckpt.meta.token_vocab.as_slice() {
        return Err(Error::Load {
            entry: "token_vocab".into(),
            detail: "stored vocabulary is not in canonical order".into(),
        });
    }
    Ok(rebuilt)
}

/// Checks that a pre-trained checkpoint fits the configured architecture
/// and corpus before any training starts.
fn check_compatible(ckpt: &Checkpoint, cfg: &RunConfig, vocab: &Vocabularies) -> Result<()> {
    if ckpt.meta.phase != Phase::Pretrain {
        return Err(Error::Load {
            entry: "phase".into(),
            detail: "fine-tuning must start from a pre-training checkpoint".into(),
        });
    }
    if ckpt.meta.token_vocab != vocab.tokens.tokens() {
        return Err(Error::Load {
            entry: "token_vocab".into(),
            detail: "checkpoint vocabulary differs from the corpus training vocabulary".into(),
        });
    }
    let reference = init_translation_params::<f32>(&cfg.encoder, None, vocab.tokens.len(), 0)?;
    for (name, p) in reference.iter() {
        if name.starts_with("mapper.") || name.starts_with("decoder.") {
            continue;
        }
        let got = ckpt.params.get(name).map_err(|_| Error::Load {
            entry: name.clone(),
            detail: "missing from the checkpoint".into(),
        })?;
        if got.value.shape() != p.value.shape() {
            return Err(Error::Load {
                entry: name.clone(),
                detail: format!("shape {:?} but the config expects {:?}", got.value.shape(), p.value.shape()),
            });
        }
    }
    Ok(())
}

/// Stage 1 trains the mapper and decoder only; stage 2 trains every
/// non-frozen parameter. The kept model has the best dev BLEU-4.
pub fn finetune(cfg: &RunConfig, corpus: &Corpus, init: Option<&Checkpoint>, log: &mut dyn Write) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if corpus.dev.is_empty() {
        return Err(Error::Config("fine-tuning needs a non-empty dev split".into()));
    }
    let enc = &cfg.encoder;
    let tc = &cfg.train;
    let vocab = Vocabularies::build(corpus)?;
    let pretrained = match init {
        Some(ckpt) => {
            check_compatible(ckpt, cfg, &vocab)?;
            let mut s = ckpt.params.clone();
            s.set_trainable_where(|_| true);
            Some(s)
        }
        None => None,
    };
    let mut store = init_translation_params::<f32>(enc, pretrained, vocab.tokens.len(), tc.seed)?;
    let steps_per_epoch = corpus.train.len().div_ceil(tc.batch_size);
    let mut jitter_rng = Rng::new(tc.seed, 0x6a6a);
    let mut opt = AdamW::new(tc.weight_decay);
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let mut epoch = 0;
    for (stage, epochs) in [(1u8, tc.stage1_epochs), (2u8, tc.stage2_epochs)] {
        if epochs == 0 {
            continue;
        }
        match stage {
            1 => store.set_trainable_where(|n| n.starts_with("mapper.") || n.starts_with("decoder.")),
            _ => store.set_trainable_where(|_| true),
        }
        emit(log, json!({"phase": "finetune", "event": "stage_start", "stage": stage, "epoch": epoch + 1}))?;
        let total_steps = (epochs * steps_per_epoch).max(1);
        let mut stepper = Stepper {
            cfg,
            opt,
            step: 0,
            total_steps,
            warmup_steps: (tc.warmup_epochs * steps_per_epoch).min(total_steps - 1),
        };
        for _ in 0..epochs {
            epoch += 1;
            let batches = make_batches(&corpus.train, &vocab.tokens, tc.batch_size, tc.seed ^ (epoch as u64) << 8, true)?;
            let mut sum = 0.0;
            for b in &batches {
                let mut g = Graph::new(Mode::Train, step_seed(tc.seed, 2, epoch, stepper.step));
                g.set_check_finite(tc.check_finite);
                let frames = batch_frames(b, Some((&mut jitter_rng, tc.feature_jitter)));
                let targets: Vec<Vec<usize>> = (0..b.len()).map(|i| b.sample_tokens(i).to_vec()).collect();
                let loss = slt_batch_loss(&mut g, &store, enc, &frames, &targets)?;
                sum += stepper.apply(&mut g, loss, &mut store, epoch)?;
            }
            let lr = stepper.lr();
            let train_loss = sum / batches.len() as f64;
            let dev = evaluate_store(&store, enc, &vocab.tokens, &corpus.dev, tc.max_decode_len)?;
            emit(
                log,
                json!({"phase": "finetune", "stage": stage, "epoch": epoch, "split": "train",
                       "loss": train_loss, "lr": lr}),
            )?;
            emit(
                log,
                json!({"phase": "finetune", "stage": stage, "epoch": epoch, "split": "dev",
                       "bleu4": dev.report.bleu4, "rouge_l": dev.report.rouge_l}),
            )?;
            let bleu4 = dev.report.bleu4;
            if best.as_ref().is_none_or(|b| bleu4 > b.meta.best_value) {
                best = Some(Checkpoint::new(
                    Phase::Finetune,
                    epoch,
                    FINETUNE_METRIC,
                    bleu4,
                    cfg,
                    vocab.tokens.tokens().to_vec(),
                    vocab.glosses.lemmas().to_vec(),
                    store.clone(),
                    stepper.opt.clone(),
                ));
            }
            history.push(FinetuneRecord {
                epoch,
                stage,
                lr,
                train_loss,
                dev_bleu4: bleu4,
            });
        }
        opt = stepper.opt;
    }
    let last_bleu4 = match history.last() {
        Some(r) => r.dev_bleu4,
        None => evaluate_store(&store, enc, &vocab.tokens, &corpus.dev, tc.max_decode_len)?.report.bleu4,
    };
    let last = Checkpoint::new(
        Phase::Finetune,
        epoch,
        FINETUNE_METRIC,
        last_bleu4,
        cfg,
        vocab.tokens.tokens().to_vec(),
        vocab.glosses.lemmas().to_vec(),
        store,
        opt,
    );
    let best = best.unwrap_or_else(|| last.clone());
    Ok(FinetuneOutcome { best, last, history })
}
