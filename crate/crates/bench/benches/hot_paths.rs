use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use relctr::ctr::EmbeddingCache;
use relctr::encoder::format_text;
use relctr::metrics::{auc, gauc};
use relctr::preference::BehaviorPool;
use relctr::train::{build_requests, generate_data, init_params, prepare_encoder, ExperimentConfig};
use relctr::{rng, Tape};

fn metrics(c: &mut Criterion) {
    let mut r = rng::stream(7, "bench.metrics");
    let n = 100_000;
    let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let labels: Vec<bool> = scores.iter().map(|&s| r.random::<f64>() < s).collect();
    let users: Vec<u32> = (0..n).map(|_| r.random_range(0..2000)).collect();
    c.bench_function("auc_100k", |b| b.iter(|| auc(black_box(&scores), black_box(&labels)).unwrap()));
    c.bench_function("gauc_100k", |b| b.iter(|| gauc(black_box(&scores), black_box(&labels), black_box(&users)).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::default();
    cfg.pretrain.enabled = false;
    let (world, logs) = generate_data(&cfg).unwrap();
    let (encoder, _) = prepare_encoder(&cfg, &world).unwrap();
    let model = cfg.rank_model().unwrap();
    let params = init_params(&cfg, &model, &encoder);
    let pool = BehaviorPool::new(&logs.history);
    let requests = build_requests(&logs.train, &pool, &cfg.mining, cfg.seed).unwrap();
    let batch: Vec<_> = requests
        .iter()
        .take(16)
        .map(|q| (&logs.train[q.rows.clone()], &q.seq))
        .collect();
    let debias = cfg.active_debias().cloned();
    let mut cache = EmbeddingCache::new();
    c.bench_function("forward_backward_16_requests", |b| {
        b.iter(|| {
            let mut r = rng::stream(1, "bench.debias");
            let (fb, targets) = model.training_batch(&batch, debias.as_ref(), &mut r).unwrap();
            let tape = Tape::new();
            let fwd = model.forward(&tape, &params, &fb, Some(&mut cache)).unwrap();
            let loss = model.main_loss(&fwd, &targets, debias.as_ref()).unwrap();
            black_box(tape.backward(loss.total).unwrap())
        })
    });
    let texts: Vec<Vec<u32>> = logs.train.iter().take(64).map(|s| format_text(&cfg.vocab().ids(&s.query_text), cfg.encoder.max_seq_len).unwrap())
        .collect();
    let text = cfg.text_encoder().unwrap();
    c.bench_function("encoder_embed_64", |b| {
        b.iter(|| text.encoder.embed(black_box(&encoder), black_box(&texts), 64).unwrap())
    });
}

criterion_group!(benches, metrics, training_step);
criterion_main!(benches);
