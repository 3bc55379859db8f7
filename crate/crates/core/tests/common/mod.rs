#![allow(dead_code)]

use gs3_core::math::Vec3;
use gs3_core::{Frame, GaussianGeom, Rotation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_geom(rng: &mut ChaCha8Rng, spread: f64) -> GaussianGeom {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    GaussianGeom {
        mu: Vec3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread)),
        rot: Rotation::new(q),
        scale_log: Vec3::new(rng.random_range(-3.5..-1.5), rng.random_range(-3.5..-1.5), rng.random_range(-3.5..-1.5)),
        opacity_logit: rng.random_range(-3.0..4.0),
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianGeom> {
    (0..n).map(|_| random_geom(rng, 0.6)).collect()
}

pub fn random_camera(rng: &mut ChaCha8Rng, size: u32) -> Frame {
    let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.6..0.6), rng.random_range(0.5..1.0)).normalized();
    Frame::look_at(d * rng.random_range(2.0..3.0), Vec3::ZERO, Vec3::Y, rng.random_range(0.5..0.9), size, size).unwrap()
}
