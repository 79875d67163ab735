use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use attd_bench::default_fixture;
use attd_core::losses::stage1_objective;
use attd_core::model::{forward_batch, Binder, GroupSet, Mode};
use attd_core::numcore::{Tape, Tensor};
use attd_core::trainloop::{train_stage1, MetricsLog, TrainConfig, TrainState};
use attd_core::Sample;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = Tensor::randn(&[n, 64], 1.0, &mut rng);
        let b = Tensor::randn(&[64, 64], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(a.clone());
                let w = tape.constant(b.clone());
                tape.matmul(x, w).unwrap()
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let (data, params) = default_fixture(32);
    let batch: Vec<&Sample> = data.train.iter().collect();
    c.bench_function("forward_batch32_train", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let mut b = Binder::frozen(&params);
            forward_batch(&mut tape, &mut b, &batch, Mode::Train).unwrap()
        })
    });
    c.bench_function("forward_backward_batch32", |bench| {
        let targets: Vec<usize> = batch.iter().map(|s| s.correct_index).collect();
        bench.iter(|| {
            let mut tape = Tape::new();
            let mut b = Binder::new(&params, GroupSet::all());
            let fwd = forward_batch(&mut tape, &mut b, &batch, Mode::Train).unwrap();
            let (loss, _) = stage1_objective(&mut tape, &fwd, &targets).unwrap();
            tape.backward(loss).unwrap();
        })
    });
}

fn train_epoch(c: &mut Criterion) {
    let (data, params) = default_fixture(64);
    let cfg = TrainConfig {
        stage1_epochs: 1,
        log_every: 0,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("stage1_epoch_64_samples", |bench| {
        bench.iter_batched(
            || TrainState::init(params.config(), 1).unwrap(),
            |state| train_stage1(&data, &cfg, state, &mut MetricsLog::in_memory()).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, matmul, forward, train_epoch);
criterion_main!(benches);
