use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use graphrecon_core::predictor::predict_batch;
use graphrecon_core::prompt::render_user_prompt;
use graphrecon_core::spectral::{graph_convolve, train_filter};
use graphrecon_core::synthetic::{bandlimited_signal, random_geometric_graph, BandlimitedSpec};
use graphrecon_core::{MockBackend, NodeTask, ObservationModel, PredictorConfig, TrainConfig};
use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_vector(n: usize, rng: &mut StdRng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

fn gft(c: &mut Criterion) {
    let mut group = c.benchmark_group("gft");
    for n in [50, 323] {
        let graph = random_geometric_graph(n, 0.25, 1).unwrap();
        group.bench_with_input(BenchmarkId::new("eigendecompose", n), &graph, |b, g| {
            b.iter(|| g.gft().unwrap())
        });
        let basis = graph.gft().unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let x = random_vector(n, &mut rng);
        let gains = random_vector(n, &mut rng);
        group.bench_with_input(BenchmarkId::new("convolve", n), &x, |b, x| {
            b.iter(|| graph_convolve(&basis, &gains, black_box(x)).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let n = 50;
    let basis = random_geometric_graph(n, 0.3, 3).unwrap().gft().unwrap();
    let spec = BandlimitedSpec {
        n_steps: 100,
        ..Default::default()
    };
    let train = bandlimited_signal(&basis, &spec).unwrap();
    let model = ObservationModel::sample(n, 0.7, 4).unwrap();
    let cfg = TrainConfig {
        max_iters: 200,
        patience: 200,
        ..Default::default()
    };
    c.bench_function("train_filter/200_steps", |b| {
        b.iter(|| train_filter(&basis, &train, &model, &cfg).unwrap())
    });
}

fn tasks(count: usize) -> Vec<NodeTask> {
    (0..count)
        .map(|node| NodeTask {
            node,
            t: 1439,
            previous: 61.5 + node as f64,
            earlier: vec![],
            neighbor_values: vec![63.9, 57.4, 60.2, 58.8],
            precision: 1,
        })
        .collect()
}

fn prompting(c: &mut Criterion) {
    let batch = tasks(97);
    c.bench_function("render_user_prompt/97", |b| {
        b.iter(|| render_user_prompt(black_box(&batch)).unwrap())
    });

    let cfg = PredictorConfig {
        tasks_per_prompt: 1,
        max_concurrency: 4,
        ..Default::default()
    };
    c.bench_function("predict_batch/mock/97", |b| {
        b.iter_batched(
            || batch.clone(),
            |t| predict_batch(&t, &cfg, &MockBackend).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, gft, training, prompting);
criterion_main!(benches);
