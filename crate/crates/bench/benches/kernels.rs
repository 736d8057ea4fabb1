use criterion::{criterion_group, criterion_main, Criterion};
use flowiid_core::backbone::{FlowNetwork, ModelConfig};
use flowiid_core::config::TrainSchedule;
use flowiid_core::data::synth_generate;
use flowiid_core::metrics::{lmse, ssim};
use flowiid_core::rng::{seeded, standard_normal};
use flowiid_core::pipeline::FlowStage;
use flowiid_core::{DType, Device, FlowConfig, Vae};
use std::hint::black_box;

fn metrics(c: &mut Criterion) {
    let scenes = synth_generate(1, 2, 256);
    let (p, g) = (&scenes[0].albedo, &scenes[1].albedo);
    c.bench_function("ssim_256", |b| b.iter(|| ssim(black_box(p), black_box(g)).unwrap()));
    c.bench_function("lmse_256", |b| b.iter(|| lmse(black_box(p), black_box(g), 20, 10).unwrap()));
}

fn network(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let net = FlowNetwork::new(&cfg, 0, DType::F32).unwrap();
    let mut rng = seeded(0);
    let img = standard_normal((1, 3, 64, 64), &mut rng, &Device::Cpu, DType::F32).unwrap();
    let x = standard_normal((1, 8, 8, 8), &mut rng, &Device::Cpu, DType::F32).unwrap();
    let mut group = c.benchmark_group("tiny_network");
    group.sample_size(20);
    group.bench_function("encode", |b| b.iter(|| net.encode(black_box(&img)).unwrap()));
    let bundle = net.encode(&img).unwrap();
    group.bench_function("velocity", |b| b.iter(|| net.velocity(black_box(&x), &bundle, &[0.5]).unwrap()));
    group.finish();
}

fn decompose(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let scenes = synth_generate(2, 4, 64);
    let vae = Vae::new(&cfg, 1, DType::F32).unwrap();
    let stage = FlowStage::new(&cfg, FlowConfig::default(), &TrainSchedule::default(), 0, &vae, 1.0, &scenes).unwrap();
    let model = stage.inference_model().unwrap();
    let mut group = c.benchmark_group("tiny_pipeline");
    group.sample_size(20);
    group.bench_function("decompose_64", |b| b.iter(|| model.decompose(black_box(&scenes[0].image), 0).unwrap()));
    group.finish();
}

criterion_group!(benches, metrics, network, decompose);
criterion_main!(benches);
