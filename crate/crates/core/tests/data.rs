use hialign_core::data::{generate_corpus, load_corpus, make_batches, save_corpus, Batch, SyntheticCorpusConfig};
use hialign_core::encoders::EncoderConfig;
use hialign_core::model::{init_pretrain_params, init_translation_params, pretrain_losses, slt_batch_loss, text_features};
use hialign_core::numerics::{Graph, Mode, ParameterStore, Tensor};
use hialign_core::pseudo_gloss::{labels_for, PrototypeMatrix};
use hialign_core::train::Vocabularies;
use proptest::prelude::*;

fn small() -> SyntheticCorpusConfig {
    SyntheticCorpusConfig {
        glosses: 12,
        input_dim: 6,
        embedding_dim: 8,
        train: 20,
        dev: 4,
        test: 4,
        seed: 3,
        ..Default::default()
    }
}

fn enc() -> EncoderConfig {
    EncoderConfig {
        input_dim: 6,
        hidden: 8,
        heads: 2,
        ffn: 12,
        proto_dim: 8,
        lora_rank: 2,
        lora_alpha: 4.0,
        ..Default::default()
    }
}

/// Batch with every padded frame position overwritten by `fill`.
fn with_padding(batch: &Batch, fill: f32) -> Batch {
    let mut b = batch.clone();
    let (tmax, d) = (b.frames.shape()[1], b.frames.shape()[2]);
    for (i, mask) in batch.frame_mask.iter().enumerate() {
        for (t, &valid) in mask.iter().enumerate() {
            if !valid {
                let start = (i * tmax + t) * d;
                b.frames.data_mut()[start..start + d].fill(fill);
            }
        }
    }
    b
}

fn frames64(b: &Batch) -> Vec<Tensor<f64>> {
    (0..b.len()).map(|i| b.sample_frames(i).cast()).collect()
}

#[test]
fn padded_frames_never_reach_the_losses() {
    let corpus = generate_corpus(&small()).unwrap();
    let vocab = Vocabularies::build(&corpus).unwrap();
    let cfg = enc();
    let protos = PrototypeMatrix::build(&vocab.glosses, &corpus.embeddings, cfg.proto_dim).unwrap();
    let pre: ParameterStore<f64> = init_pretrain_params(&cfg, &protos, vocab.tokens.len(), 1).unwrap();
    let slt: ParameterStore<f64> = init_translation_params(&cfg, Some(pre.clone()), vocab.tokens.len(), 1).unwrap();
    let batches = make_batches(&corpus.train, &vocab.tokens, 5, 0, true).unwrap();
    let mut padded = 0;
    for b in &batches {
        padded += b.frame_mask.iter().flatten().filter(|&&m| !m).count();
        let text: Vec<Tensor<f64>> = b
            .indices
            .iter()
            .map(|&i| text_features(&pre, &cfg, &vocab.tokens.encode(&corpus.train[i].sentence)).unwrap())
            .collect();
        let labels: Vec<_> = b
            .indices
            .iter()
            .map(|&i| labels_for(&corpus.train[i].sentence, &corpus.lexicon, &vocab.glosses))
            .collect();
        let targets: Vec<Vec<usize>> = (0..b.len()).map(|i| b.sample_tokens(i).to_vec()).collect();
        let losses = |batch: &Batch| {
            let frames = frames64(batch);
            let mut g = Graph::new(Mode::GradCheck, 0);
            let p = pretrain_losses(&mut g, &pre, &cfg, &frames, &text, &labels, 1.0).unwrap();
            let s = slt_batch_loss(&mut g, &slt, &cfg, &frames, &targets).unwrap();
            (g.value(p.total).item(), g.value(s).item())
        };
        let (p0, s0) = losses(b);
        let (p1, s1) = losses(&with_padding(b, 1e3));
        assert!((p0 - p1).abs() < 1e-6 && (s0 - s1).abs() < 1e-6);
    }
    assert!(padded > 0, "no batch exercised padding");
}

#[test]
fn corpus_statistics_are_seed_deterministic() {
    let stats = |seed: u64| {
        let c = generate_corpus(&SyntheticCorpusConfig { seed, ..small() }).unwrap();
        let frames: f64 = c.train.iter().flat_map(|s| s.frames.data()).map(|&x| x as f64).sum();
        let words: usize = c.train.iter().map(|s| s.sentence.len()).sum();
        let lengths: Vec<usize> = c.train.iter().map(|s| s.frames.shape()[0]).collect();
        (frames, words, lengths)
    };
    assert_eq!(stats(3), stats(3));
    assert_ne!(stats(3), stats(4));
}

#[test]
fn generated_labels_recover_the_true_gloss_sets() {
    let corpus = generate_corpus(&SyntheticCorpusConfig { train: 80, ..small() }).unwrap();
    let vocab = Vocabularies::build(&corpus).unwrap();
    for s in &corpus.train {
        let label = labels_for(&s.sentence, &corpus.lexicon, &vocab.glosses);
        let mut want: Vec<usize> = s.glosses.clone();
        want.sort_unstable();
        want.dedup();
        assert_eq!(label.popcount(), want.len());
        assert!(!s.sentence.is_empty());
    }
}

#[test]
fn saved_corpus_reloads_identically() {
    let corpus = generate_corpus(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
    std::fs::remove_file(dir.path().join("sentences.txt")).unwrap();
    assert!(load_corpus(dir.path()).unwrap_err().is_io());
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        SyntheticCorpusConfig { glosses: 1, ..small() },
        SyntheticCorpusConfig { frames_per_gloss: [0, 2], ..small() },
        SyntheticCorpusConfig { noise: -0.1, ..small() },
    ] {
        assert!(generate_corpus(&bad).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batches_partition_the_split(batch_size in 1usize..9, seed in any::<u64>(), shuffle in any::<bool>()) {
        let corpus = generate_corpus(&small()).unwrap();
        let vocab = Vocabularies::build(&corpus).unwrap();
        let batches = make_batches(&corpus.train, &vocab.tokens, batch_size, seed, shuffle).unwrap();
        prop_assert_eq!(batches.len(), corpus.train.len().div_ceil(batch_size));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..corpus.train.len()).collect::<Vec<_>>());
        for b in &batches {
            for (k, &i) in b.indices.iter().enumerate() {
                prop_assert_eq!(&b.sample_frames(k), &corpus.train[i].frames);
                let ids = vocab.tokens.encode_target(&corpus.train[i].sentence);
                prop_assert_eq!(b.sample_tokens(k), ids.as_slice());
            }
        }
        let again = make_batches(&corpus.train, &vocab.tokens, batch_size, seed, shuffle).unwrap();
        prop_assert_eq!(batches, again);
    }
}
