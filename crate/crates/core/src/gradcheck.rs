//! Central finite-difference checks of the hand-written backward passes.
//!
//! Each check differentiates a random linear functional `sum(w * output)`
//! analytically and numerically and reports the pairs; callers decide on
//! tolerances.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::frame::{Frame, SceneBounds};
use crate::image::ImageBuffer;
use crate::math::Vec3;
use crate::model::{CloudField, SceneModel};
use crate::neural::Mlp;
use crate::pipeline::{backward, forward, ModelGrad, PipelineOptions};
use crate::render::RenderSettings;
use crate::shadow::LightDescriptor;

/// One trainable parameter array of a [`SceneModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    Cloud(CloudField),
    BasisRot,
    BasisSigma,
    Phi,
    Psi,
}

impl ParamSlot {
    /// Every family, per-Gaussian fields first.
    pub fn all() -> Vec<ParamSlot> {
        let mut v: Vec<ParamSlot> = CloudField::ALL.iter().map(|&f| ParamSlot::Cloud(f)).collect();
        v.extend([ParamSlot::BasisRot, ParamSlot::BasisSigma, ParamSlot::Phi, ParamSlot::Psi]);
        v
    }

    pub fn params_mut<'a>(&self, m: &'a mut SceneModel) -> &'a mut [f64] {
        match self {
            ParamSlot::Cloud(f) => m.cloud.field_mut(*f),
            ParamSlot::BasisRot => &mut m.basis_rot,
            ParamSlot::BasisSigma => &mut m.basis_sigma_log,
            ParamSlot::Phi => &mut m.phi.params,
            ParamSlot::Psi => &mut m.psi.params,
        }
    }

    pub fn grad<'a>(&self, g: &'a ModelGrad) -> &'a [f64] {
        match self {
            ParamSlot::Cloud(f) => g.cloud.field(*f),
            ParamSlot::BasisRot => &g.basis_rot,
            ParamSlot::BasisSigma => &g.basis_sigma_log,
            ParamSlot::Phi => &g.phi,
            ParamSlot::Psi => &g.psi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradSample {
    pub slot: ParamSlot,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest analytic magnitude in the family, for an absolute floor.
    pub family_scale: f64,
}

impl GradSample {
    /// `|numeric - analytic| <= rel * max(|numeric|, |analytic|) + floor * family_scale`.
    pub fn within(&self, rel: f64, floor: f64) -> bool {
        let err = (self.numeric - self.analytic).abs();
        err <= rel * self.numeric.abs().max(self.analytic.abs()) + floor * self.family_scale.max(1e-3)
    }

    pub fn relative_error(&self) -> f64 {
        let d = self.numeric.abs().max(self.analytic.abs());
        if d == 0.0 {
            0.0
        } else {
            (self.numeric - self.analytic).abs() / d
        }
    }
}

/// Settings without hard cutoffs: no minimum alpha and a wide support, so
/// the rendered image is smooth in every parameter near the test point.
pub fn smooth_options() -> PipelineOptions {
    PipelineOptions::default().with_raster(RenderSettings { min_alpha: 0.0, extent_sigma: 8.0, ..RenderSettings::default() })
}

/// A model of `n` Gaussians around the origin with mixed opacities, `J = 4`.
pub fn test_model(seed: u64, n: usize) -> SceneModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<Vec3> = (0..n)
        .map(|_| Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)))
        .collect();
    let mut m = SceneModel::initialize(&seeds, SceneBounds::UNIT, 4, &mut rng).expect("valid test model");
    for i in 0..n {
        m.cloud.opacity_logit[i] = rng.random_range(-1.0..2.0);
        for k in 0..3 {
            m.cloud.scale_log[3 * i + k] = rng.random_range(-2.6..-1.8);
        }
    }
    m
}

pub fn test_camera(size: u32) -> Frame {
    Frame::look_at(Vec3::new(0.4, 0.3, 2.2), Vec3::ZERO, Vec3::Y, 0.5, size, size).expect("valid test camera")
}

fn weighted_sum(img: &ImageBuffer, w: &[f64]) -> f64 {
    img.data.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Checks `per_family` entries of every parameter family of the full
/// forward pass: the largest-magnitude gradient entry, then random ones.
pub fn end_to_end(
    model: &SceneModel,
    camera: &Frame,
    light: &LightDescriptor,
    options: &PipelineOptions,
    per_family: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w_px, h_px) = (camera.width, camera.height);
    let w: Vec<f64> = (0..w_px as usize * h_px as usize * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let state = forward(model, camera, light, options)?;
    let up = ImageBuffer::from_data(w_px, h_px, 3, w.clone())?;
    let grad = backward(model, &state, &up)?;
    let loss = |m: &SceneModel| -> Result<f64> { Ok(weighted_sum(&forward(m, camera, light, options)?.images.final_image, &w)) };

    let mut out = Vec::new();
    for slot in ParamSlot::all() {
        let g = slot.grad(&grad);
        let family_scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let big = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
        let mut picks = alloc::vec![big];
        picks.extend((1..per_family).map(|_| rng.random_range(0..g.len())));
        for index in picks {
            let mut m = model.clone();
            slot.params_mut(&mut m)[index] += h;
            let lp = loss(&m)?;
            slot.params_mut(&mut m)[index] -= 2.0 * h;
            let lm = loss(&m)?;
            out.push(GradSample { slot, index, analytic: g[index], numeric: (lp - lm) / (2.0 * h), family_scale });
        }
    }
    Ok(out)
}

/// Standalone MLP check on a random batch: `n_params` random weights and
/// `n_inputs` random input entries, labelled with `slot`. Input samples are
/// reported with `index = usize::MAX - k`.
#[allow(clippy::too_many_arguments)]
pub fn mlp(m: &Mlp, slot: ParamSlot, batch: usize, n_params: usize, n_inputs: usize, h: f64, seed: u64) -> Result<Vec<GradSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..batch * m.input_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..batch * m.output_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |m: &Mlp, x: &[f64]| -> Result<f64> { Ok(m.forward(x, batch)?.output().iter().zip(&w).map(|(a, b)| a * b).sum()) };
    let tr = m.forward(&x, batch)?;
    let (g, gx) = m.backward(&tr, &w);
    let mut out = Vec::with_capacity(n_params + n_inputs);
    for _ in 0..n_params {
        let i = rng.random_range(0..m.params.len());
        let (mut a, mut b) = (m.clone(), m.clone());
        a.params[i] += h;
        b.params[i] -= h;
        let numeric = (loss(&a, &x)? - loss(&b, &x)?) / (2.0 * h);
        out.push(GradSample { slot, index: i, analytic: g[i], numeric, family_scale: 0.0 });
    }
    for k in 0..n_inputs {
        let i = rng.random_range(0..x.len());
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += h;
        b[i] -= h;
        let numeric = (loss(m, &a)? - loss(m, &b)?) / (2.0 * h);
        out.push(GradSample { slot, index: usize::MAX - k, analytic: gx[i], numeric, family_scale: 0.0 });
    }
    Ok(out)
}
