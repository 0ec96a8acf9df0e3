use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hialign_bench::{random_matrix, random_sentences};
use hialign_core::encoders::{frame_encode, init_frame_encoder, init_temporal_encoder, temporal_encode, EncoderConfig};
use hialign_core::metrics::bleu;
use hialign_core::numerics::{kernels, Rng};
use hialign_core::{Graph, Mode, ParameterStore};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128, 256] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| kernels::matmul(a.data(), b.data(), n, n, n))
        });
    }
    group.finish();
}

fn temporal_encoder(c: &mut Criterion) {
    let cfg = EncoderConfig {
        input_dim: 64,
        hidden: 64,
        heads: 4,
        ffn: 128,
        proto_dim: 64,
        dropout: 0.0,
        ..Default::default()
    };
    let mut store = ParameterStore::<f32>::new();
    init_frame_encoder(&mut store, &cfg, &mut Rng::new(0, 0)).unwrap();
    init_temporal_encoder(&mut store, &cfg, &mut Rng::new(0, 1)).unwrap();
    let mut group = c.benchmark_group("temporal_encode");
    group.sample_size(20);
    for t in [32usize, 128] {
        let raw = random_matrix(t, cfg.input_dim, 3);
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new(Mode::Eval, 0);
                let x = g.constant(raw.clone());
                let f = frame_encode(&mut g, &store, &cfg, x).unwrap();
                temporal_encode(&mut g, &store, &cfg, f).unwrap()
            })
        });
    }
    group.finish();
}

fn corpus_bleu(c: &mut Criterion) {
    let hyps = random_sentences(1000, 4);
    let refs = random_sentences(1000, 5);
    c.bench_function("bleu4/1000", |bench| bench.iter(|| bleu(&hyps, &refs, 4).unwrap()));
}

criterion_group!(benches, matmul, temporal_encoder, corpus_bleu);
criterion_main!(benches);
