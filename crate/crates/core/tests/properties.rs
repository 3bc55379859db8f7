mod common;

use gs3_core::appearance::{eval_diffuse, half_vector};
use gs3_core::math::{Vec3, PI};
use gs3_core::shadow::{shadow_splat, ShadowAccumulator, ShadowSettings};
use gs3_core::train::{adam_step, compute_loss, AdamState};
use gs3_core::{Exec, ImageBuffer, LightDescriptor, RenderSettings, Rotation, SceneBounds};
use gs3_core::render::Rasterization;
use proptest::prelude::*;
use rand::Rng;

fn unit() -> impl Strategy<Value = Vec3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-3)
        .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalized())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_preserves_length(q in prop::array::uniform4(-1.0..1.0f64), v in prop::array::uniform3(-10.0..10.0f64)) {
        prop_assume!(q.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let v = Vec3::new(v[0], v[1], v[2]);
        let r = Rotation::new(q);
        prop_assert!((r.rotate(v).norm() - v.norm()).abs() <= 1e-6 * v.norm().max(1.0));
    }

    #[test]
    fn diffuse_lobe_is_bounded_and_monotone(a in -1.0..1.0f64, b in -1.0..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(eval_diffuse(lo) >= -1e-15);
        prop_assert!(eval_diffuse(hi) <= 1.0 / PI + 1e-15);
        prop_assert!(eval_diffuse(lo) <= eval_diffuse(hi));
    }

    #[test]
    fn half_vector_is_unit_and_bisects(wi in unit(), wo in unit()) {
        prop_assume!((wi + wo).norm() > 1e-3);
        let h = half_vector(wi, wo).unwrap();
        prop_assert!((h.norm() - 1.0).abs() < 1e-12);
        prop_assert!((h.dot(wi) - h.dot(wo)).abs() < 1e-9);
    }

    #[test]
    fn shadow_aggregate_stays_in_unit_interval(pairs in prop::collection::vec((0.0..1.0f64, 0.0..=1.0f64), 0..20)) {
        let mut acc = ShadowAccumulator::default();
        for (b, t) in &pairs {
            acc.add(*b, *t);
        }
        let v = acc.value();
        prop_assert!((0.0..=1.0).contains(&v), "{v}");
        let lo = pairs.iter().filter(|p| p.0 > 0.0).map(|p| p.1).fold(1.0, f64::min);
        let hi = pairs.iter().filter(|p| p.0 > 0.0).map(|p| p.1).fold(0.0, f64::max);
        if pairs.iter().any(|p| p.0 > 0.0) {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_zero_on_equal_images(seed in any::<u64>(), lambda in 0.0..=1.0f64) {
        let mut rng = common::rng(seed);
        let a = ImageBuffer::from_data(12, 12, 3, (0..432).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let b = ImageBuffer::from_data(12, 12, 3, (0..432).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let l = compute_loss(&a, &b, lambda).unwrap();
        prop_assert!(l.total >= 0.0 && l.l1 >= 0.0 && l.dssim >= -1e-12);
        prop_assert!(compute_loss(&a, &a, lambda).unwrap().total.abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_moves_against_the_gradient(g in prop::collection::vec(-5.0..5.0f64, 1..8), lr in 1e-4..1e-1f64) {
        let mut x = vec![0.0; g.len()];
        let mut st = AdamState::new(g.len());
        adam_step(&mut st, &mut x, &g, lr, 0.9, 0.999, 1e-8);
        for (xi, gi) in x.iter().zip(&g) {
            // bias-corrected first step is -lr * g / (|g| + eps)
            prop_assert!((xi + lr * gi / (gi.abs() + 1e-8)).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Composited images of unit-bounded payloads stay in [0, 1] and the
    /// final transmittance is a probability.
    #[test]
    fn compositing_is_a_convex_combination(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = common::rng(seed);
        let geoms = common::random_scene(&mut rng, n);
        let frame = common::random_camera(&mut rng, 24);
        let payload: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = RenderSettings::default();
        let out = Rasterization::new(&geoms, &frame, &s).render(&payload, 3, &[0.0; 3], &s, Exec::Serial);
        prop_assert!(out.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.final_transmittance.iter().all(|t| (0.0..=1.0).contains(t)));
        for (p, t) in out.final_transmittance.iter().enumerate() {
            for c in 0..3 {
                prop_assert!(out.image.data[3 * p + c] <= 1.0 - t + 1e-12);
            }
        }
    }

    /// Adding fully transparent Gaussians changes neither the image nor the
    /// visibility of the others.
    #[test]
    fn transparent_gaussians_are_invisible(seed in any::<u64>(), n in 1usize..30, extra in 1usize..10) {
        let mut rng = common::rng(seed);
        let geoms = common::random_scene(&mut rng, n);
        let frame = common::random_camera(&mut rng, 24);
        let mut more = geoms.clone();
        for _ in 0..extra {
            let mut g = common::random_geom(&mut rng, 0.6);
            g.opacity_logit = -60.0;
            more.push(g);
        }
        let payload: Vec<f64> = (0..3 * more.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = RenderSettings::default();
        let a = Rasterization::new(&geoms, &frame, &s).render(&payload[..3 * n], 3, &[0.0; 3], &s, Exec::Serial);
        let b = Rasterization::new(&more, &frame, &s).render(&payload, 3, &[0.0; 3], &s, Exec::Serial);
        prop_assert_eq!(a.image, b.image);

        let light = LightDescriptor::point(Vec3::new(0.5, 2.5, 1.0), [1.0; 3]);
        let bounds = SceneBounds { center: Vec3::ZERO, radius: 1.2 };
        let ss = ShadowSettings::default();
        let ta = shadow_splat(&geoms, &light, &bounds, 32, 32, &ss, Exec::Serial).unwrap().transmittance();
        let tb = shadow_splat(&more, &light, &bounds, 32, 32, &ss, Exec::Serial).unwrap().transmittance();
        prop_assert_eq!(&ta[..], &tb[..n]);
        prop_assert!(ta.iter().all(|t| (0.0..=1.0).contains(t)));
    }
}
