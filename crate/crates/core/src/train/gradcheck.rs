//! End-to-end gradient checks of every training loss at tiny dimensions.

use serde::Serialize;

use super::config::RunConfig;
use crate::data::{generate_corpus, SyntheticCorpusConfig};
use crate::error::Result;
use crate::model::{init_pretrain_params, init_translation_params, pretrain_losses, slt_batch_loss, text_features};
use crate::numerics::gradcheck::gradcheck;
use crate::numerics::{Graph, ParameterStore, Rng, Tensor, Var};
use crate::pseudo_gloss::{labels_for, PrototypeMatrix};
use crate::train::pipeline::Vocabularies;

pub const GRADCHECK_EPSILON: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub params_checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub checks: Vec<LossCheck>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// `cfg` with every dimension forced small: hidden 8 with 2 heads, at most
/// 6 frames per video, at most 4 pseudo-glosses and 3 samples per batch.
/// Layer counts and other settings are kept.
pub fn tiny_config(cfg: &RunConfig) -> RunConfig {
    let mut t = cfg.clone();
    t.encoder.input_dim = 4;
    t.encoder.hidden = 8;
    t.encoder.heads = 2;
    t.encoder.ffn = 12;
    t.encoder.proto_dim = 6;
    t.encoder.lora_rank = t.encoder.lora_rank.clamp(1, 2);
    t.corpus = SyntheticCorpusConfig {
        glosses: 4,
        function_word_prob: 0.5,
        frames_per_gloss: [1, 2],
        input_dim: 4,
        noise: 0.3,
        pad_prob: 0.0,
        glosses_per_sample: [2, 3],
        embedding_dim: 6,
        train: 3,
        dev: 0,
        test: 0,
        seed: cfg.corpus.seed,
        ..Default::default()
    };
    t
}

pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradcheckSummary> {
    run(cfg, None)
}

/// Same checks with the GELU backward rule scaled by `factor`; used to show
/// that the checker rejects a wrong derivative.
#[doc(hidden)]
pub fn run_gradcheck_with_fault(cfg: &RunConfig, factor: f64) -> Result<GradcheckSummary> {
    run(cfg, Some(factor))
}

fn perturb_adapters(store: &mut ParameterStore<f64>, rng: &mut Rng) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".lora_b")).cloned().collect();
    for n in names {
        let p = store.get_mut(&n).expect("listed name");
        for x in p.value.data_mut() {
            *x = 0.2 * rng.normal();
        }
    }
}

fn run(cfg: &RunConfig, fault: Option<f64>) -> Result<GradcheckSummary> {
    let tiny = tiny_config(cfg);
    tiny.encoder.validate()?;
    let enc = &tiny.encoder;
    let corpus = generate_corpus(&tiny.corpus)?;
    let vocab = Vocabularies::build(&corpus)?;
    let protos = PrototypeMatrix::build(&vocab.glosses, &corpus.embeddings, enc.proto_dim)?;
    let seed = tiny.train.seed;
    let mut rng = Rng::new(seed, 0x6763);

    let frames: Vec<Tensor<f64>> = corpus.train.iter().map(|s| s.frames.cast()).collect();
    let labels: Vec<_> = corpus
        .train
        .iter()
        .map(|s| labels_for(&s.sentence, &corpus.lexicon, &vocab.glosses))
        .collect();

    let mut pre = init_pretrain_params::<f64>(enc, &protos, vocab.tokens.len(), seed)?;
    perturb_adapters(&mut pre, &mut rng);
    let text: Vec<Tensor<f64>> = corpus
        .train
        .iter()
        .map(|s| text_features(&pre, enc, &vocab.tokens.encode(&s.sentence)))
        .collect::<Result<_>>()?;

    let mut checks = Vec::new();
    let mut record = |name: String, store: &ParameterStore<f64>, f: &dyn Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>| -> Result<()> {
        let report = gradcheck(store, GRADCHECK_EPSILON, GRADCHECK_TOLERANCE, |g, s| {
            if let Some(k) = fault {
                g.inject_gelu_backward_fault(k);
            }
            f(g, s)
        })?;
        checks.push(LossCheck {
            loss: name,
            max_rel_err: report.max_rel_err(),
            worst_param: report.worst().map(|w| w.name.clone()),
            params_checked: report.params.len(),
            passed: report.passed(),
        });
        Ok(())
    };

    record("psp".into(), &pre, &|g, s| {
        Ok(pretrain_losses(g, s, enc, &frames, &text, &labels, 1.0)?.psp)
    })?;
    record("align".into(), &pre, &|g, s| {
        Ok(pretrain_losses(g, s, enc, &frames, &text, &labels, 1.0)?.align)
    })?;
    for lambda in [0.0, 0.5, 1.0] {
        record(format!("pretrain(lambda={lambda})"), &pre, &|g, s| {
            Ok(pretrain_losses(g, s, enc, &frames, &text, &labels, lambda)?.total)
        })?;
    }

    let mut slt = init_translation_params::<f64>(enc, Some(pre.clone()), vocab.tokens.len(), seed)?;
    perturb_adapters(&mut slt, &mut rng);
    let targets: Vec<Vec<usize>> = corpus.train.iter().map(|s| vocab.tokens.encode_target(&s.sentence)).collect();
    record("slt".into(), &slt, &|g, s| slt_batch_loss(g, s, enc, &frames, &targets))?;

    Ok(GradcheckSummary {
        tolerance: GRADCHECK_TOLERANCE,
        checks,
    })
}
