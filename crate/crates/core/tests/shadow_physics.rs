use gs3_core::math::Vec3;
use gs3_core::oracle::{line_optical_depth, spearman};
use gs3_core::shadow::{shadow_splat, ShadowSettings, SHADOW_BIAS};
use gs3_core::{generate_toy_dataset, Exec, GaussianGeom, Rotation, ToyConfig, ToyKind};

#[test]
fn splatted_visibility_ranks_like_ray_marched_transmittance() {
    let toy = generate_toy_dataset(&ToyConfig { kind: ToyKind::OccluderPair, n_views: 2, n_lights: 2, resolution: 16, seed: 9 }).unwrap();
    let data = toy.to_dataset();
    let scale = 0.3 * data.bounds.radius / 20.0;
    let geoms: Vec<GaussianGeom> = data
        .seed_points
        .iter()
        .map(|&mu| GaussianGeom { mu, rot: Rotation::IDENTITY, scale_log: Vec3::splat(scale.ln()), opacity_logit: 2.0 })
        .collect();
    for view in &data.views {
        let light = view.light;
        let pass = shadow_splat(&geoms, &light, &data.bounds, 128, 128, &ShadowSettings::default(), Exec::Serial).unwrap();
        let t = pass.transmittance();
        let lp = light.position().unwrap();
        let marched: Vec<f64> = geoms
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let to_light = (lp - g.mu).normalized();
                (-line_optical_depth(&geoms, g.mu + to_light * SHADOW_BIAS, lp, 128, i) / scale).exp()
            })
            .collect();
        let rho = spearman(&t, &marched);
        assert!(rho > 0.9, "Spearman {rho}");
    }
}
