use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use omninav_core::datagen::{generate_dataset, DatasetTag, GenConfig, Modality, HISTORY};
use omninav_core::geometry::Pose2D;
use omninav_core::numerics::{adam_step, AdamConfig, OptimizerState};
use omninav_core::policy::{forward_policy, init_params, GoalSpec, ModalityMask, PolicyConfig};
use omninav_core::reannotate::{reannotate_chunk, ReannotateConfig};
use omninav_core::training::{batch_gradients, Mixture, MixtureConfig};
use omninav_core::worldsim::{generate_world, render_ego, WorldGenConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_render(c: &mut Criterion) {
    let world = generate_world(0, &WorldGenConfig::default()).unwrap();
    let pose = Pose2D::new(20.0, 20.0, 0.3);
    c.bench_function("render_ego", |b| {
        b.iter(|| render_ego(black_box(&world), &pose).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let cfg = PolicyConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let world = generate_world(0, &WorldGenConfig::default()).unwrap();
    let obs = render_ego(&world, &Pose2D::new(20.0, 20.0, 0.0)).unwrap();
    let history = vec![obs.clone(); HISTORY];
    let goal = GoalSpec {
        pose: Some([4.0, 1.0]),
        image: Some(obs),
        lang: None,
        sat: None,
        mask: ModalityMask::of(&[Modality::Pose, Modality::Image]),
    };
    c.bench_function("forward_policy", |b| {
        b.iter(|| forward_policy(&params, &cfg, black_box(&history), &goal, 0).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = PolicyConfig::default();
    let shards = [DatasetTag::Lelan, DatasetTag::Frodo]
        .into_iter()
        .map(|t| generate_dataset(&GenConfig::new(t, 0, 2, 16, 0), None).unwrap())
        .collect();
    let mut mc = MixtureConfig::new(Vec::new());
    mc.ratio = [(DatasetTag::Lelan, 1.0), (DatasetTag::Frodo, 1.0)].into();
    let mixture = Mixture::from_shards(shards, &mc).unwrap();
    let items = mixture.sample_batch(&mut ChaCha8Rng::seed_from_u64(0), 8);
    let mut params = init_params(&cfg, 0).unwrap();
    let mut state = OptimizerState::new(AdamConfig::default());
    c.bench_function("train_step_batch8", |b| {
        b.iter(|| {
            let (_, grads) = batch_gradients(&params, &cfg, &mixture, black_box(&items)).unwrap();
            adam_step(&mut state, &mut params, &grads).unwrap();
        })
    });
}

fn bench_reannotate(c: &mut Criterion) {
    let world = generate_world(0, &WorldGenConfig::default()).unwrap();
    let cfg = ReannotateConfig::default();
    let pose = Pose2D::new(20.0, 20.0, 0.0);
    c.bench_function("reannotate_chunk", |b| {
        b.iter(|| {
            reannotate_chunk(Some((&world, pose)), black_box([2.5, 0.8]), None, &cfg).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_render, bench_forward, bench_train_step, bench_reannotate
}
criterion_main!(benches);
