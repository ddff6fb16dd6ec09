use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use tcpool::eval::{retrieval_scores, segment, class_embeddings, ScoreMode, SegMode, DEFAULT_TEMPLATES};
use tcpool::losses::{pairwise_nll, LossParams};
use tcpool::pairing::{build_pairs, NegativeType};
use tcpool::pooling::attn_pool;
use tcpool::rng;
use tcpool::synth::{class_names, SyntheticScene};
use tcpool_bench::{scenes, trainer, training_set};

fn pooling(c: &mut Criterion) {
    let data = training_set(16);
    let t = trainer(&data);
    let model = t.model();
    let tokens = model.encode_image(&data.images[0]).unwrap();
    let text = model.encode_texts(&["There is a red square in the top left."]).unwrap();
    let pool = model.pool_params().unwrap();
    c.bench_function("attn_pool d64 n16", |b| {
        b.iter(|| attn_pool(text[0].t_g.data(), &tokens.v_loc, &pool).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let p = LossParams::new(10.0, 0.0).unwrap();
    let sims: Vec<f64> = (0..1024).map(|i| (i as f64 / 512.0) - 1.0).collect();
    c.bench_function("pairwise_nll x1024", |b| {
        b.iter(|| sims.iter().enumerate().map(|(i, &s)| pairwise_nll(s, if i % 5 == 0 { 1 } else { -1 }, &p)).sum::<f64>())
    });
    let mut r = rng::stream(0, &[]);
    c.bench_function("build_pairs B16 K4", |b| b.iter(|| build_pairs(16, 4, NegativeType::JkJk, &mut r).unwrap()));
}

fn evaluation(c: &mut Criterion) {
    let data = training_set(16);
    let t = trainer(&data);
    let model = t.model();
    let sc = scenes(32);
    let images: Vec<_> = sc.iter().map(SyntheticScene::image).collect();
    let img = model.encode_images(&images).unwrap();
    let texts: Vec<String> = sc.iter().map(|s| s.caption.text()).collect();
    let txt = model.encode_texts(&texts).unwrap();
    c.bench_function("retrieval conditioned 32x32", |b| {
        b.iter(|| retrieval_scores(model, &img, &txt, ScoreMode::Conditioned).unwrap())
    });
    let classes = class_embeddings(model, &class_names(), &DEFAULT_TEMPLATES).unwrap();
    for mode in [SegMode::Clip, SegMode::Tc] {
        c.bench_function(&format!("segment {mode:?} 24 classes"), |b| {
            b.iter(|| segment(model, &img[0], &classes, mode).unwrap())
        });
    }
}

fn training(c: &mut Criterion) {
    let data = training_set(64);
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("step B16 K4 d64", |b| {
        b.iter_batched(|| trainer(&data), |mut t| t.step().unwrap(), BatchSize::LargeInput)
    });
    g.finish();
}

criterion_group!(benches, pooling, losses, evaluation, training);
criterion_main!(benches);
