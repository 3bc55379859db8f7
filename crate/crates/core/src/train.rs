//! Optimization: loss, Adam, learning-rate schedules, adaptive density
//! control and the two-stage training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::appearance::DEFAULT_BASIS_COUNT;
use crate::error::{Error, Result};
use crate::frame::{Frame, SceneBounds};
use crate::image::ImageBuffer;
use crate::math::{self, sigmoid, Vec3};
use crate::metrics;
use crate::model::{retain_rows, to_f32_grid, CloudField, GaussianCloud, SceneModel};
use crate::pipeline::{self, ModelGrad, PipelineOptions, Toggles};
use crate::render::Exec;
use crate::shadow::LightDescriptor;

pub use crate::pipeline::compose_final;

/// Per-group learning rates and schedule milestones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub shading_frame: f64,
    pub albedo: f64,
    pub angular: f64,
    pub angular_final: f64,
    pub angular_decay_start: u64,
    pub angular_decay_end: u64,
    pub networks: f64,
    pub latent: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 0.05,
            shading_frame: 1e-3,
            albedo: 0.01,
            angular: 0.01,
            angular_final: 1e-4,
            angular_decay_start: 40_000,
            angular_decay_end: 90_000,
            networks: 1e-3,
            latent: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    /// Average screen-space gradient norm above which a Gaussian is densified.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    pub interval: u64,
    /// Densification stops at this fraction of the total iterations.
    pub stop_fraction: f64,
    /// Gaussians larger than this fraction of the scene radius are split, smaller ones cloned.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub max_gaussians: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            interval: 100,
            stop_fraction: 0.5,
            percent_dense: 0.01,
            split_factor: 1.6,
            max_gaussians: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub stage1_iters: u64,
    pub total_iters: u64,
    pub lr: LearningRates,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub basis_count: usize,
    pub toggles: Toggles,
    pub density: DensityConfig,
    pub seed: u64,
    /// Gaussians placed uniformly in the scene bound when the dataset has no seed points.
    pub init_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.2,
            stage1_iters: 15_000,
            total_iters: 115_000,
            lr: LearningRates::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            basis_count: DEFAULT_BASIS_COUNT,
            toggles: Toggles::default(),
            density: DensityConfig::default(),
            seed: 0,
            init_points: 1000,
        }
    }
}

impl TrainConfig {
    /// Shortens (or lengthens) the run to `total` iterations, scaling the
    /// stage boundary and the angular decay milestones proportionally.
    pub fn scaled_to(mut self, total: u64) -> Self {
        let f = total as f64 / self.total_iters as f64;
        let scale = |v: u64| math::floor(v as f64 * f + 0.5) as u64;
        self.stage1_iters = scale(self.stage1_iters).min(total.saturating_sub(1));
        self.lr.angular_decay_start = scale(self.lr.angular_decay_start);
        self.lr.angular_decay_end = scale(self.lr.angular_decay_end).max(self.lr.angular_decay_start + 1);
        self.total_iters = total;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.stage1_iters >= self.total_iters {
            return Err(Error::Config(format!(
                "stage-1 iterations ({}) must be fewer than total iterations ({})",
                self.stage1_iters, self.total_iters
            )));
        }
        if !crate::appearance::SUPPORTED_BASIS_COUNTS.contains(&self.basis_count) {
            return Err(Error::Config(format!("unsupported basis count {}", self.basis_count)));
        }
        if self.lr.angular_decay_end <= self.lr.angular_decay_start {
            return Err(Error::Config("angular decay must end after it starts".into()));
        }
        Ok(())
    }

    pub fn density_stop(&self) -> u64 {
        (self.density.stop_fraction * self.total_iters as f64) as u64
    }
}

/// Optimizer parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Opacity,
    ShadingFrame,
    DiffuseAlbedo,
    SpecularAlbedo,
    LobeWeights,
    Latent,
    BasisFrame,
    BasisSigma,
    ShadowMlp,
    ResidualMlp,
}

impl ParamGroup {
    pub fn of_field(f: CloudField) -> ParamGroup {
        match f {
            CloudField::Means => ParamGroup::Position,
            CloudField::ScaleLog => ParamGroup::Scale,
            CloudField::Rot => ParamGroup::Rotation,
            CloudField::OpacityLogit => ParamGroup::Opacity,
            CloudField::Frame => ParamGroup::ShadingFrame,
            CloudField::RhoD => ParamGroup::DiffuseAlbedo,
            CloudField::RhoS => ParamGroup::SpecularAlbedo,
            CloudField::Alpha => ParamGroup::LobeWeights,
            CloudField::Latent => ParamGroup::Latent,
        }
    }

    /// Groups that only matter once the specular term is enabled.
    pub fn is_specular(self) -> bool {
        matches!(self, ParamGroup::SpecularAlbedo | ParamGroup::LobeWeights | ParamGroup::BasisFrame | ParamGroup::BasisSigma)
    }
}

fn log_lerp(a: f64, b: f64, t: f64) -> f64 {
    math::exp(math::ln(a) * (1.0 - t) + math::ln(b) * t)
}

/// Learning rate of `group` at iteration `iter`.
pub fn lr_schedule(group: ParamGroup, iter: u64, config: &TrainConfig) -> f64 {
    let lr = &config.lr;
    match group {
        ParamGroup::Position => {
            let t = (iter as f64 / config.total_iters.max(1) as f64).clamp(0.0, 1.0);
            log_lerp(lr.position, lr.position_final, t)
        }
        ParamGroup::Scale => lr.scale,
        ParamGroup::Rotation => lr.rotation,
        ParamGroup::Opacity => lr.opacity,
        ParamGroup::ShadingFrame => lr.shading_frame,
        ParamGroup::DiffuseAlbedo | ParamGroup::SpecularAlbedo => lr.albedo,
        ParamGroup::LobeWeights | ParamGroup::BasisFrame | ParamGroup::BasisSigma => {
            if iter < lr.angular_decay_start {
                lr.angular
            } else if iter >= lr.angular_decay_end {
                lr.angular_final
            } else {
                let t = (iter - lr.angular_decay_start) as f64 / (lr.angular_decay_end - lr.angular_decay_start) as f64;
                log_lerp(lr.angular, lr.angular_final, t)
            }
        }
        ParamGroup::ShadowMlp | ParamGroup::ResidualMlp => lr.networks,
        ParamGroup::Latent => lr.latent,
    }
}

/// First and second moments of one parameter array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(state.m.len(), params.len());
    state.step += 1;
    let bc1 = 1.0 - math::powf(beta1, state.step as f64);
    let bc2 = 1.0 - math::powf(beta2, state.step as f64);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (math::sqrt(v_hat) + eps);
    }
}

/// Loss value and its gradient w.r.t. the rendered image.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub grad: ImageBuffer,
}

/// `(1 - lambda) * L1 + lambda * (1 - SSIM)`.
pub fn compute_loss(render: &ImageBuffer, target: &ImageBuffer, lambda: f64) -> Result<Loss> {
    let (l1, g1) = metrics::l1(render, target)?;
    let (dssim, gs) = if lambda > 0.0 {
        let (s, g) = metrics::ssim_with_grad(render, target)?;
        (1.0 - s, g)
    } else {
        (1.0 - metrics::ssim(render, target)?, vec![0.0; render.data.len()])
    };
    let total = (1.0 - lambda) * l1 + lambda * dssim;
    let mut grad = ImageBuffer::new(render.width, render.height, render.channels);
    for ((d, a), b) in grad.data.iter_mut().zip(&g1).zip(&gs) {
        *d = (1.0 - lambda) * a - lambda * b;
    }
    Ok(Loss { total, l1, dssim, grad })
}

/// One training image with its camera and light.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: Frame,
    pub light: LightDescriptor,
    pub target: ImageBuffer,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub views: Vec<TrainView>,
    pub bounds: SceneBounds,
    /// Optional initial Gaussian positions.
    pub seed_points: Vec<Vec3>,
}

/// Screen-gradient statistics collected between densification steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensityStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensityStats {
    pub fn new(n: usize) -> Self {
        DensityStats { grad_sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn record(&mut self, grad: &ModelGrad) {
        for i in 0..self.count.len() {
            if grad.visible[i] {
                self.grad_sum[i] += grad.screen_grad[i];
                self.count[i] += 1;
            }
        }
    }

    pub fn average(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensityReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Adam moments for every per-Gaussian field, kept row-aligned with the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudMoments {
    pub states: Vec<(CloudField, AdamState)>,
}

impl CloudMoments {
    pub fn new(cloud: &GaussianCloud) -> Self {
        CloudMoments { states: CloudField::ALL.iter().map(|&f| (f, AdamState::new(cloud.field(f).len()))).collect() }
    }
}

/// Clones small and splits large Gaussians whose average screen gradient
/// exceeds the threshold, then prunes nearly transparent ones. New rows get
/// zero optimizer moments; statistics are reset.
pub fn density_control<R: Rng>(
    model: &mut SceneModel,
    moments: Option<&mut CloudMoments>,
    stats: &mut DensityStats,
    config: &DensityConfig,
    rng: &mut R,
) -> DensityReport {
    let n = model.cloud.len();
    let extent = config.percent_dense * model.bounds.radius;
    let mut report = DensityReport::default();
    let mut remove = vec![false; n];
    let mut new_rows: Vec<usize> = Vec::new();
    let mut split_rows: Vec<(usize, Vec3, Vec3)> = Vec::new();
    for i in 0..n {
        if stats.average(i) < config.grad_threshold {
            continue;
        }
        if n + new_rows.len() + split_rows.len() >= config.max_gaussians {
            break;
        }
        let g = model.cloud.geom(i);
        let scale = Vec3::new(math::exp(g.scale_log.x), math::exp(g.scale_log.y), math::exp(g.scale_log.z));
        if scale.max_elem() <= extent {
            new_rows.push(i);
            report.cloned += 1;
        } else {
            let r = g.rot.matrix();
            for _ in 0..2 {
                let z: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(rng));
                let offset = r.mul_vec(Vec3::new(z[0] * scale.x, z[1] * scale.y, z[2] * scale.z));
                split_rows.push((i, g.mu + offset, g.scale_log - Vec3::splat(math::ln(config.split_factor))));
            }
            remove[i] = true;
            report.split += 1;
        }
    }
    let cloud = &mut model.cloud;
    for &i in &new_rows {
        cloud.push_copy(i);
    }
    for &(i, mu, scale_log) in &split_rows {
        cloud.push_copy(i);
        let k = cloud.len() - 1;
        for c in 0..3 {
            cloud.means[3 * k + c] = to_f32_grid(mu[c]);
            cloud.scale_log[3 * k + c] = to_f32_grid(scale_log[c]);
        }
    }
    let added = new_rows.len() + split_rows.len();
    remove.extend(core::iter::repeat_n(false, added));
    for (i, r) in remove.iter_mut().enumerate() {
        if !*r && sigmoid(cloud.opacity_logit[i]) < config.prune_opacity {
            *r = true;
            report.pruned += 1;
        }
    }
    let keep: Vec<bool> = remove.iter().map(|r| !r).collect();
    cloud.retain(&keep);
    if let Some(moments) = moments {
        for (f, st) in &mut moments.states {
            let w = cloud.width(*f);
            st.m.extend(core::iter::repeat_n(0.0, w * added));
            st.v.extend(core::iter::repeat_n(0.0, w * added));
            retain_rows(&mut st.m, w, &keep);
            retain_rows(&mut st.v, w, &keep);
        }
    }
    *stats = DensityStats::new(cloud.len());
    report
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    pub stage: u8,
    pub loss: f64,
    pub l1: f64,
    pub dssim: f64,
    pub num_gaussians: usize,
}

/// Stateful training loop.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SceneModel,
    pub dataset: Dataset,
    pub iteration: u64,
    pub options: PipelineOptions,
    cloud_moments: CloudMoments,
    basis_rot: AdamState,
    basis_sigma: AdamState,
    phi: AdamState,
    psi: AdamState,
    stats: DensityStats,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(dataset: Dataset, config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        if dataset.views.is_empty() {
            return Err(Error::Dataset("dataset has no views".into()));
        }
        for (k, v) in dataset.views.iter().enumerate() {
            if v.target.channels != 3 || v.target.width != v.camera.width || v.target.height != v.camera.height {
                return Err(Error::Dataset(format!(
                    "frame {k}: image is {}x{}x{}, camera expects {}x{}x3",
                    v.target.width, v.target.height, v.target.channels, v.camera.width, v.camera.height
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let seeds = if dataset.seed_points.is_empty() {
            SceneModel::uniform_seeds(&dataset.bounds, config.init_points, &mut rng)
        } else {
            dataset.seed_points.clone()
        };
        let model = SceneModel::initialize(&seeds, dataset.bounds, config.basis_count, &mut rng)?;
        Self::resume(dataset, config, model, 0, exec)
    }

    /// Continues from an existing model with fresh optimizer state.
    pub fn resume(dataset: Dataset, config: TrainConfig, model: SceneModel, iteration: u64, exec: Exec) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let options = PipelineOptions { toggles: config.toggles, exec, ..PipelineOptions::default() };
        Ok(Trainer {
            cloud_moments: CloudMoments::new(&model.cloud),
            basis_rot: AdamState::new(model.basis_rot.len()),
            basis_sigma: AdamState::new(model.basis_sigma_log.len()),
            phi: AdamState::new(model.phi.params.len()),
            psi: AdamState::new(model.psi.params.len()),
            stats: DensityStats::new(model.cloud.len()),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15),
            config,
            model,
            dataset,
            iteration,
            options,
        })
    }

    pub fn stage(&self) -> u8 {
        if self.iteration < self.config.stage1_iters {
            1
        } else {
            2
        }
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.total_iters
    }

    /// Runs one iteration on a uniformly sampled view.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration;
        let stage = self.stage();
        let k = self.rng.random_range(0..self.dataset.views.len());
        let view = &self.dataset.views[k];
        let opts = PipelineOptions { specular: stage == 2, ..self.options };
        let state = pipeline::forward(&self.model, &view.camera, &view.light, &opts)?;
        let loss = compute_loss(&state.images.final_image, &view.target, self.config.lambda)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite { iter: it, detail: format!("loss = {} on view {k} (l1 {}, dssim {})", loss.total, loss.l1, loss.dssim) });
        }
        let grad = pipeline::backward(&self.model, &state, &loss.grad)?;
        if let Some(what) = first_non_finite(&grad) {
            return Err(Error::NonFinite { iter: it, detail: format!("gradient of {what} on view {k}") });
        }
        let densify = stage == 2 && it < self.config.density_stop();
        if densify {
            self.stats.record(&grad);
        }
        self.apply(&grad, it, stage);
        let record =
            LossRecord { iter: it, stage, loss: loss.total, l1: loss.l1, dssim: loss.dssim, num_gaussians: self.model.cloud.len() };
        self.iteration += 1;
        let d = &self.config.density;
        if densify && (it + 1 - self.config.stage1_iters).is_multiple_of(d.interval) {
            density_control(&mut self.model, Some(&mut self.cloud_moments), &mut self.stats, d, &mut self.rng);
            self.model.snap_to_f32();
        }
        Ok(record)
    }

    fn apply(&mut self, grad: &ModelGrad, it: u64, stage: u8) {
        let c = &self.config;
        let (b1, b2, eps) = (c.adam_beta1, c.adam_beta2, c.adam_eps);
        let active = |g: ParamGroup| stage == 2 || !g.is_specular();
        for (f, st) in &mut self.cloud_moments.states {
            let group = ParamGroup::of_field(*f);
            if active(group) {
                adam_step(st, self.model.cloud.field_mut(*f), grad.cloud.field(*f), lr_schedule(group, it, c), b1, b2, eps);
            }
        }
        if active(ParamGroup::BasisFrame) {
            adam_step(&mut self.basis_rot, &mut self.model.basis_rot, &grad.basis_rot, lr_schedule(ParamGroup::BasisFrame, it, c), b1, b2, eps);
            let lr = lr_schedule(ParamGroup::BasisSigma, it, c);
            adam_step(&mut self.basis_sigma, &mut self.model.basis_sigma_log, &grad.basis_sigma_log, lr, b1, b2, eps);
        }
        if c.toggles.phi {
            adam_step(&mut self.phi, &mut self.model.phi.params, &grad.phi, lr_schedule(ParamGroup::ShadowMlp, it, c), b1, b2, eps);
        }
        if c.toggles.psi {
            adam_step(&mut self.psi, &mut self.model.psi.params, &grad.psi, lr_schedule(ParamGroup::ResidualMlp, it, c), b1, b2, eps);
        }
        self.model.snap_to_f32();
    }

    /// Runs to completion, calling `on_step` after every iteration.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut log = Vec::with_capacity((self.config.total_iters - self.iteration) as usize);
        while !self.is_done() {
            let r = self.step()?;
            on_step(&r);
            log.push(r);
        }
        Ok(log)
    }
}

fn first_non_finite(g: &ModelGrad) -> Option<String> {
    for f in CloudField::ALL {
        if g.cloud.field(f).iter().any(|v| !v.is_finite()) {
            return Some(format!("{f:?}"));
        }
    }
    for (name, v) in [("basis frames", &g.basis_rot), ("basis sigmas", &g.basis_sigma_log), ("shadow mlp", &g.phi), ("residual mlp", &g.psi)] {
        if v.iter().any(|x| !x.is_finite()) {
            return Some(name.into());
        }
    }
    None
}
