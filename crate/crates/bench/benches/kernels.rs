use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use std::hint::black_box;

use trajflow_core::attention::{rope, temporal_positions, FusionBlock, DEFAULT_ROPE_BASE};
use trajflow_core::mask::{blur_frames, build_mask};
use trajflow_core::rng::gaussian_noise;
use trajflow_core::toy::scene::random_path;
use trajflow_core::toy::{SceneParams, VelocityField, VelocityNet};
use trajflow_core::trajectory::to_latent_grid;
use trajflow_core::Seed;

fn matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let t = gaussian_noise(&[rows, cols], Seed(seed)).unwrap();
    Array2::from_shape_vec((rows, cols), t.into_data()).unwrap()
}

fn attention(c: &mut Criterion) {
    let (d, frames, objects, la) = (32, 16, 2, 128);
    let h_a = matrix(la, d, 1);
    let h_kin = matrix(frames * objects, d, 2);
    let (pos_a, _) = temporal_positions(frames, objects, la);
    c.bench_function("rope 128x32", |b| {
        b.iter(|| rope(black_box(&h_a), &pos_a, DEFAULT_ROPE_BASE).unwrap())
    });
    let block = FusionBlock::new(d, 4, Seed(3)).unwrap();
    c.bench_function("fuse 128 audio x 32 kinematic tokens", |b| {
        b.iter(|| block.fuse(black_box(&h_a), &h_kin, frames).unwrap())
    });
}

fn mask(c: &mut Criterion) {
    let cfg = SceneParams::default();
    let (pt, _) = random_path(&cfg, Seed(4)).unwrap();
    let lt = to_latent_grid(&pt, 1, 16, 16).unwrap();
    let binary = build_mask(&lt, 16, 16, 16, 0.0, Seed(5)).unwrap().binary;
    c.bench_function("blur 16x16x16 sigma 0.5", |b| {
        b.iter(|| blur_frames(black_box(&binary), 16, 16, 16, 0.5))
    });
}

fn velocity_net(c: &mut Criterion) {
    let cfg = SceneParams::default();
    let (pt, _) = random_path(&cfg, Seed(6)).unwrap();
    let lt = to_latent_grid(&pt, 1, 16, 16).unwrap();
    let m = build_mask(&lt, 16, 16, 16, 0.5, Seed(7)).unwrap();
    let x_t = gaussian_noise(&[16, 16, 16, 1], Seed(8)).unwrap();
    let xtraj = gaussian_noise(&[16, 16, 16, 1], Seed(9)).unwrap();
    let net = VelocityNet::new(Default::default(), Seed(10)).unwrap();
    c.bench_function("velocity net 16x16x16", |b| {
        b.iter(|| net.velocity(black_box(&x_t), &xtraj, &m, 0.4).unwrap())
    });
}

criterion_group!(benches, attention, mask, velocity_net);
criterion_main!(benches);
