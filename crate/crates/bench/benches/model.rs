use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use tdu_bench::fixture;
use tdu_core::model::{example_gradients, forward};
use tdu_core::numerics::Tape;
use tdu_core::params::{Init, ParamStore};
use tdu_core::tokenizer::encode;
use tdu_core::transformer::{multi_head_attention, Attention};
use tdu_core::{Mode, Prng, Tensor};

fn tokenization(c: &mut Criterion) {
    let f = fixture(16, 2);
    c.bench_function("encode 100 instructions", |b| {
        b.iter(|| {
            for text in f.instructions.iter().take(100) {
                black_box(encode(text, &f.vocab, 32));
            }
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for &(seq, hidden) in &[(16, 64), (48, 64), (48, 256)] {
        let mut store = ParamStore::default();
        let attn = Attention::new(&mut store, &mut Init::new(0), "a", hidden, 4).unwrap();
        let mut rng = Prng::new(1);
        let x: Tensor<f32> =
            Tensor::new(vec![seq, hidden], (0..seq * hidden).map(|_| rng.normal() as f32).collect()).unwrap();
        let mask = vec![true; seq];
        group.bench_with_input(BenchmarkId::from_parameter(format!("{seq}x{hidden}")), &x, |b, x| {
            b.iter(|| {
                let mut tape = Tape::new();
                let v = tape.leaf(x.clone());
                black_box(multi_head_attention(&mut tape, &store, &attn, v, &mask).unwrap());
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    for &hidden in &[64, 256] {
        let f = fixture(hidden, 4);
        let example = &f.examples[0];
        group.bench_function(BenchmarkId::new("forward", hidden), |b| {
            b.iter(|| black_box(forward(&f.params, example, Mode::Infer, &mut Prng::new(0)).unwrap()))
        });
        group.bench_function(BenchmarkId::new("forward+backward", hidden), |b| {
            b.iter(|| black_box(example_gradients(&f.params, example, Mode::Train, &mut Prng::new(0)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, tokenization, attention, model);
criterion_main!(benches);
