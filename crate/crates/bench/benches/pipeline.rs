use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use unitflow::cfm::PathConfig;
use unitflow::dsp::{log_mel, mel_to_audio, resample, Waveform};
use unitflow::sampler::{generate, GenerationRequest, OdeMethod, RequestCond, SwayConfig};
use unitflow::trainer::{train_step, Stage, TrainConfig, TrainState};
use unitflow::units::{assign, fit_kmeans_with, KmeansConfig};
use unitflow::vfnet::{FieldNet, ModelParams};
use unitflow_bench::Fixture;

fn tone(seconds: f64, rate: u32) -> Waveform {
    let n = (seconds * rate as f64) as usize;
    let samples = (0..n).map(|i| 0.3 * (i as f32 * 0.07).sin() + 0.1 * (i as f32 * 0.31).sin()).collect();
    Waveform::new(samples, rate).unwrap()
}

fn dsp(c: &mut Criterion) {
    let audio = tone(1.0, 16_000);
    c.bench_function("log_mel_1s", |b| b.iter(|| log_mel(black_box(&audio)).unwrap()));
    let low = tone(1.0, 8_000);
    c.bench_function("resample_8k_to_16k_1s", |b| b.iter(|| resample(black_box(&low), 16_000).unwrap()));
    let mel = log_mel(&audio).unwrap();
    c.bench_function("griffin_lim_1s_8iters", |b| b.iter(|| mel_to_audio(black_box(&mel), 8).unwrap()));
}

fn units(c: &mut Criterion) {
    let fx = Fixture::new(64);
    let cfg = KmeansConfig { n_init: 1, ..KmeansConfig::default() };
    c.bench_function("kmeans_fit_k12", |b| b.iter(|| fit_kmeans_with(black_box(&fx.features), 12, 3, &cfg).unwrap()));
    c.bench_function("assign_k12", |b| b.iter(|| assign(black_box(&fx.features), &fx.codebook).unwrap()));
}

fn model(c: &mut Criterion) {
    let fx = Fixture::new(16);
    let model = fx.model();
    let k = fx.codebook.k();
    let mut train = TrainConfig::tiny(Stage::Pretrain);
    train.seed = 1;
    let batch: Vec<_> = fx.examples.iter().take(10).collect();
    let mut state = TrainState::new(ModelParams::init(&model, 1).unwrap());
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("train_step_tiny_10_utts", |b| b.iter(|| train_step(&mut state, black_box(&batch), k, &train).unwrap()));

    let net = FieldNet::new(state.params().clone());
    let units = match &fx.examples[0].cond {
        unitflow::trainer::ExampleCond::Units(u) => u.clone(),
        _ => unreachable!(),
    };
    let req = GenerationRequest {
        cond: RequestCond::Units { units, ref_units: None, k },
        ref_mel: Array2::zeros((0, 80)),
        target_frames: 48,
        seed: 5,
    };
    let sway = SwayConfig { n_steps: 16, s: -1.0, method: OdeMethod::Euler };
    group.bench_function("generate_48_frames_16_steps", |b| {
        b.iter(|| generate(black_box(&req), &net, &sway, &PathConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, dsp, units, model);
criterion_main!(benches);
