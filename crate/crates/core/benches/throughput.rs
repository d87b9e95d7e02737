use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use jcrnn::dataset::{generate_with, normalize, SynthConfig};
use jcrnn::network::gradcheck::check_gradients;
use jcrnn::network::{forward_sequences, Model, ModelConfig};
use jcrnn::numerics::Rng;
use jcrnn::parallel::Execution;
use jcrnn::pipeline::{detect_all, evaluate_runs, RunConfig};
use jcrnn::targets::FrameTargets;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (RunConfig, Model, Vec<jcrnn::dataset::SkeletonSequence>) {
    let mut cfg = RunConfig::default();
    cfg.synth.num_sequences = 16;
    let seqs = generate_with(&cfg.synth, Execution::Sequential).unwrap();
    let model = Model::init(&cfg.model, &mut Rng::new(1)).unwrap();
    (cfg, model, seqs)
}

fn batch_inference(c: &mut Criterion) {
    let (_, model, seqs) = setup();
    let frames: Vec<Vec<Vec<f64>>> = seqs.iter().map(|s| normalize(s).features()).collect();
    let mut group = c.benchmark_group("batch_inference");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| forward_sequences(&model, black_box(&frames), exec).unwrap())
        });
    }
    group.finish();
}

fn detection_and_evaluation(c: &mut Criterion) {
    let (cfg, model, seqs) = setup();
    let mut group = c.benchmark_group("detect_and_evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let runs = detect_all(&model, &seqs, &cfg.detector, exec).unwrap();
                evaluate_runs(&seqs, &runs, model.config.num_outputs(), &cfg.eval).unwrap()
            })
        });
    }
    group.finish();
}

fn gradient_check(c: &mut Criterion) {
    let cfg = ModelConfig {
        input_dim: 6,
        layer_sizes: vec![3; 6],
        num_classes: 2,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(2);
    let model = Model::init(&cfg, &mut rng).unwrap();
    let frames: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
    let targets: Vec<FrameTargets> = (0..5)
        .map(|i| FrameTargets { label: i % 3, c_start: 0.3, c_end: 0.6 })
        .collect();
    let mut group = c.benchmark_group("gradient_check");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| check_gradients(&model, &frames, &targets, 1.0, 3, 1e-5, exec).unwrap())
        });
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    let cfg = SynthConfig { num_sequences: 64, ..SynthConfig::default() };
    let mut group = c.benchmark_group("generate");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_with(black_box(&cfg), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_inference, detection_and_evaluation, gradient_check, generation);
criterion_main!(benches);
