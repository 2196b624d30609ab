use cfdebias::resplit::greedy_resplit;
use cfdebias::trainer::{fit, TrainConfig};
use cfdebias::Tape;
use cfdebias_bench::{default_model, resplit_groups, sample, synth_corpus};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

fn tape(c: &mut Criterion) {
    let model = default_model();
    let s = sample(3);
    c.bench_function("forward", |b| {
        b.iter(|| {
            let mut t = Tape::with_params(&model.store);
            black_box(model.forward(&mut t, &s).unwrap());
        })
    });
    c.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut t = Tape::with_params(&model.store);
            let n = model.forward(&mut t, &s).unwrap();
            let l = t.cross_entropy(n.te, 1).unwrap();
            t.backward(l).unwrap();
            black_box(t.param_grads().count());
        })
    });
}

fn resplit(c: &mut Criterion) {
    for n in [200, 2000] {
        let groups = resplit_groups(n);
        c.bench_function(&format!("greedy_resplit_{n}"), |b| {
            b.iter(|| black_box(greedy_resplit(&groups, 0.3, 0).unwrap()))
        });
    }
}

fn training(c: &mut Criterion) {
    let data: Vec<_> = (0..32).map(sample).collect();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    c.bench_function("train_batch_32", |b| {
        b.iter_batched(
            default_model,
            |mut m| black_box(fit(&mut m, &data, &cfg).unwrap()),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("synth_generate_500", |b| {
        b.iter(|| black_box(synth_corpus(500)))
    });
}

criterion_group!(benches, tape, resplit, training);
criterion_main!(benches);
