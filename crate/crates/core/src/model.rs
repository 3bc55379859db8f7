//! The trainable scene: a structure-of-arrays Gaussian cloud, the shared
//! angular basis, and the two networks.
//!
//! Values are held as `f64` but are kept on the `f32` grid (after
//! initialization and every optimizer step) so a checkpoint stores them
//! exactly.

use alloc::vec::Vec;

use arrayvec::ArrayVec;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::appearance::{AngularGaussian, AngularGaussianBasis, Rotation, SpatialGaussian, SUPPORTED_BASIS_COUNTS};
use crate::error::{Error, Result};
use crate::frame::SceneBounds;
use crate::math::{self, Mat3, Vec3};
use crate::neural::{Mlp, OutputActivation, LATENT_DIM, RESIDUAL_MLP_WIDTHS, SHADOW_MLP_WIDTHS};
use crate::render::GaussianGeom;

pub const INIT_OPACITY: f64 = 0.1;
pub const INIT_ALBEDO: f64 = 1.0;
pub const INIT_LOBE_WEIGHT: f64 = 0.5;
pub const INIT_SIGMA_X: f64 = 0.5;
pub const INIT_SIGMA_Y: f64 = 1.0;
pub const INIT_SIGMA_Z_RANGE: (f64, f64) = (0.13, 0.69);
pub const INIT_LATENT_SCALE: f64 = 0.1;

/// Rounds to the nearest `f32`.
#[inline]
pub fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

/// Per-Gaussian parameter arrays. Row `i` of a group with width `w` is
/// `group[w * i..w * (i + 1)]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub basis_count: usize,
    pub means: Vec<f64>,
    pub scale_log: Vec<f64>,
    pub rot: Vec<f64>,
    pub opacity_logit: Vec<f64>,
    pub frame: Vec<f64>,
    pub rho_d: Vec<f64>,
    pub rho_s: Vec<f64>,
    pub alpha: Vec<f64>,
    pub latent: Vec<f64>,
}

/// Identifies one per-Gaussian parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CloudField {
    Means,
    ScaleLog,
    Rot,
    OpacityLogit,
    Frame,
    RhoD,
    RhoS,
    Alpha,
    Latent,
}

impl CloudField {
    pub const ALL: [CloudField; 9] = [
        CloudField::Means,
        CloudField::ScaleLog,
        CloudField::Rot,
        CloudField::OpacityLogit,
        CloudField::Frame,
        CloudField::RhoD,
        CloudField::RhoS,
        CloudField::Alpha,
        CloudField::Latent,
    ];
}

impl GaussianCloud {
    pub fn empty(basis_count: usize) -> Self {
        GaussianCloud { basis_count, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self, field: CloudField) -> usize {
        match field {
            CloudField::Means | CloudField::ScaleLog | CloudField::RhoD | CloudField::RhoS => 3,
            CloudField::Rot | CloudField::Frame => 4,
            CloudField::OpacityLogit => 1,
            CloudField::Alpha => self.basis_count,
            CloudField::Latent => LATENT_DIM,
        }
    }

    pub fn field(&self, field: CloudField) -> &Vec<f64> {
        match field {
            CloudField::Means => &self.means,
            CloudField::ScaleLog => &self.scale_log,
            CloudField::Rot => &self.rot,
            CloudField::OpacityLogit => &self.opacity_logit,
            CloudField::Frame => &self.frame,
            CloudField::RhoD => &self.rho_d,
            CloudField::RhoS => &self.rho_s,
            CloudField::Alpha => &self.alpha,
            CloudField::Latent => &self.latent,
        }
    }

    pub fn field_mut(&mut self, field: CloudField) -> &mut Vec<f64> {
        match field {
            CloudField::Means => &mut self.means,
            CloudField::ScaleLog => &mut self.scale_log,
            CloudField::Rot => &mut self.rot,
            CloudField::OpacityLogit => &mut self.opacity_logit,
            CloudField::Frame => &mut self.frame,
            CloudField::RhoD => &mut self.rho_d,
            CloudField::RhoS => &mut self.rho_s,
            CloudField::Alpha => &mut self.alpha,
            CloudField::Latent => &mut self.latent,
        }
    }

    /// Checks that every array holds `len()` rows.
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BASIS_COUNTS.contains(&self.basis_count) {
            return Err(Error::Config(alloc::format!(
                "basis count {} not in {:?}",
                self.basis_count, SUPPORTED_BASIS_COUNTS
            )));
        }
        let n = self.len();
        for f in CloudField::ALL {
            let want = n * self.width(f);
            if self.field(f).len() != want {
                return Err(Error::shape(want, self.field(f).len()));
            }
        }
        Ok(())
    }

    pub fn mean(&self, i: usize) -> Vec3 {
        Vec3::new(self.means[3 * i], self.means[3 * i + 1], self.means[3 * i + 2])
    }

    fn vec3(v: &[f64], i: usize) -> Vec3 {
        Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])
    }

    fn quat(v: &[f64], i: usize) -> [f64; 4] {
        [v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]]
    }

    pub fn geom(&self, i: usize) -> GaussianGeom {
        GaussianGeom {
            mu: self.mean(i),
            rot: Rotation::from_raw(Self::quat(&self.rot, i)),
            scale_log: Self::vec3(&self.scale_log, i),
            opacity_logit: self.opacity_logit[i],
        }
    }

    pub fn geoms(&self) -> Vec<GaussianGeom> {
        (0..self.len()).map(|i| self.geom(i)).collect()
    }

    pub fn gaussian(&self, i: usize) -> SpatialGaussian {
        let j = self.basis_count;
        let mut latent = [0.0; LATENT_DIM];
        latent.copy_from_slice(&self.latent[LATENT_DIM * i..LATENT_DIM * (i + 1)]);
        SpatialGaussian {
            mu: self.mean(i),
            scale_log: Self::vec3(&self.scale_log, i),
            rot: Rotation::from_raw(Self::quat(&self.rot, i)),
            opacity_logit: self.opacity_logit[i],
            frame: Rotation::from_raw(Self::quat(&self.frame, i)),
            rho_d_raw: Self::vec3(&self.rho_d, i),
            rho_s_raw: Self::vec3(&self.rho_s, i),
            alpha_raw: self.alpha[j * i..j * (i + 1)].iter().copied().collect::<ArrayVec<f64, 16>>(),
            latent,
        }
    }

    pub fn push(&mut self, g: &SpatialGaussian) {
        self.means.extend(g.mu.to_array());
        self.scale_log.extend(g.scale_log.to_array());
        self.rot.extend(g.rot.quat());
        self.opacity_logit.push(g.opacity_logit);
        self.frame.extend(g.frame.quat());
        self.rho_d.extend(g.rho_d_raw.to_array());
        self.rho_s.extend(g.rho_s_raw.to_array());
        self.alpha.extend(g.alpha_raw.iter().copied());
        self.latent.extend(g.latent);
    }

    /// Appends a copy of row `i` of every field.
    pub fn push_copy(&mut self, i: usize) {
        for f in CloudField::ALL {
            let w = self.width(f);
            let v = self.field_mut(f);
            v.extend_from_within(w * i..w * (i + 1));
        }
    }

    /// Keeps the rows where `keep` is true.
    pub fn retain(&mut self, keep: &[bool]) {
        for f in CloudField::ALL {
            let w = self.width(f);
            retain_rows(self.field_mut(f), w, keep);
        }
    }

    /// Renormalizes all quaternions in place.
    pub fn normalize_quaternions(&mut self) {
        for v in [&mut self.rot, &mut self.frame] {
            for q in v.chunks_exact_mut(4) {
                let n = math::sqrt(q.iter().map(|x| x * x).sum::<f64>());
                if n > 0.0 {
                    q.iter_mut().for_each(|x| *x /= n);
                } else {
                    q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
                }
            }
        }
    }
}

/// Keeps rows (of `width` values) of `v` where `keep` is true.
pub fn retain_rows(v: &mut Vec<f64>, width: usize, keep: &[bool]) {
    let mut out = 0;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            v.copy_within(width * i..width * (i + 1), width * out);
            out += 1;
        }
    }
    v.truncate(width * out);
}

/// Everything a checkpoint stores except the training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub cloud: GaussianCloud,
    /// Lobe frame quaternions, 4 per lobe.
    pub basis_rot: Vec<f64>,
    /// Log lobe sigmas, 3 per lobe.
    pub basis_sigma_log: Vec<f64>,
    pub bounds: SceneBounds,
    pub phi: Mlp,
    pub psi: Mlp,
}

/// Mean distance-squared to the `k` nearest other points (brute force).
fn mean_sq_knn(points: &[Vec3], i: usize, k: usize) -> f64 {
    let mut best: ArrayVec<f64, 3> = ArrayVec::new();
    for (j, p) in points.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = (*p - points[i]).norm_sq();
        if best.len() < k.min(3) {
            best.push(d);
        } else if let Some(worst) = best.iter_mut().max_by(|a, b| a.total_cmp(b)) {
            if d < *worst {
                *worst = d;
            }
        }
    }
    if best.is_empty() {
        return 1e-4;
    }
    best.iter().sum::<f64>() / best.len() as f64
}

impl SceneModel {
    pub fn basis_count(&self) -> usize {
        self.cloud.basis_count
    }

    /// Initializes Gaussians at `seeds` (isotropic scale from the three
    /// nearest neighbours) with a fresh basis and networks.
    pub fn initialize<R: Rng>(seeds: &[Vec3], bounds: SceneBounds, basis_count: usize, rng: &mut R) -> Result<Self> {
        if !SUPPORTED_BASIS_COUNTS.contains(&basis_count) {
            return Err(Error::Config(alloc::format!("basis count {basis_count} not in {SUPPORTED_BASIS_COUNTS:?}")));
        }
        if seeds.is_empty() {
            return Err(Error::Config("no seed points to initialize from".into()));
        }
        let mut cloud = GaussianCloud::empty(basis_count);
        let albedo = math::softplus_inv(INIT_ALBEDO);
        let weight = math::softplus_inv(INIT_LOBE_WEIGHT);
        let latent = Normal::new(0.0, INIT_LATENT_SCALE).map_err(|e| Error::Config(alloc::format!("{e}")))?;
        for (i, p) in seeds.iter().enumerate() {
            let d2 = mean_sq_knn(seeds, i, 3).max(1e-7);
            let s = 0.5 * math::ln(d2);
            let mut lat = [0.0; LATENT_DIM];
            lat.iter_mut().for_each(|v| *v = latent.sample(rng));
            cloud.push(&SpatialGaussian {
                mu: *p,
                scale_log: Vec3::splat(s),
                rot: Rotation::IDENTITY,
                opacity_logit: math::logit(INIT_OPACITY),
                frame: Rotation::IDENTITY,
                rho_d_raw: Vec3::splat(albedo),
                rho_s_raw: Vec3::splat(albedo),
                alpha_raw: core::iter::repeat_n(weight, basis_count).collect(),
                latent: lat,
            });
        }
        let mut basis_rot = Vec::with_capacity(4 * basis_count);
        let mut basis_sigma_log = Vec::with_capacity(3 * basis_count);
        for _ in 0..basis_count {
            basis_rot.extend(Rotation::IDENTITY.quat());
            let sz = rng.random_range(INIT_SIGMA_Z_RANGE.0..INIT_SIGMA_Z_RANGE.1);
            basis_sigma_log.extend([math::ln(INIT_SIGMA_X), math::ln(INIT_SIGMA_Y), math::ln(sz)]);
        }
        let phi = Mlp::init(&SHADOW_MLP_WIDTHS, OutputActivation::Sigmoid, rng);
        let psi = Mlp::init(&RESIDUAL_MLP_WIDTHS, OutputActivation::Sigmoid, rng);
        let mut model = SceneModel { cloud, basis_rot, basis_sigma_log, bounds, phi, psi };
        model.snap_to_f32();
        Ok(model)
    }

    /// Random seed points uniformly inside the bounding sphere.
    pub fn uniform_seeds<R: Rng>(bounds: &SceneBounds, n: usize, rng: &mut R) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if p.norm_sq() <= 1.0 {
                out.push(bounds.center + p * bounds.radius);
            }
        }
        out
    }

    pub fn basis(&self) -> AngularGaussianBasis {
        let lobes = (0..self.basis_count())
            .map(|j| {
                let q = [self.basis_rot[4 * j], self.basis_rot[4 * j + 1], self.basis_rot[4 * j + 2], self.basis_rot[4 * j + 3]];
                let s = &self.basis_sigma_log[3 * j..3 * j + 3];
                AngularGaussian { frame: Rotation::from_raw(q), sigma_log: Vec3::new(s[0], s[1], s[2]) }
            })
            .collect();
        AngularGaussianBasis { lobes }
    }

    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        let j = self.basis_count();
        if self.basis_rot.len() != 4 * j {
            return Err(Error::shape(4 * j, self.basis_rot.len()));
        }
        if self.basis_sigma_log.len() != 3 * j {
            return Err(Error::shape(3 * j, self.basis_sigma_log.len()));
        }
        if self.phi.widths != SHADOW_MLP_WIDTHS || self.psi.widths != RESIDUAL_MLP_WIDTHS {
            return Err(Error::Config("network widths do not match the model layout".into()));
        }
        if !(self.bounds.radius > 0.0) {
            return Err(Error::Config("scene bound radius must be positive".into()));
        }
        Ok(())
    }

    /// Renormalizes quaternions and rounds every parameter to `f32`.
    pub fn snap_to_f32(&mut self) {
        self.cloud.normalize_quaternions();
        for q in self.basis_rot.chunks_exact_mut(4) {
            let n = math::sqrt(q.iter().map(|x| x * x).sum::<f64>());
            if n > 0.0 {
                q.iter_mut().for_each(|x| *x /= n);
            }
        }
        for f in CloudField::ALL {
            self.cloud.field_mut(f).iter_mut().for_each(|v| *v = to_f32_grid(*v));
        }
        for v in self.basis_rot.iter_mut().chain(&mut self.basis_sigma_log).chain(&mut self.phi.params).chain(&mut self.psi.params) {
            *v = to_f32_grid(*v);
        }
        let c = &mut self.bounds.center;
        for v in [&mut c.x, &mut c.y, &mut c.z, &mut self.bounds.radius] {
            *v = to_f32_grid(*v);
        }
    }

    pub fn all_finite(&self) -> bool {
        CloudField::ALL.iter().all(|&f| self.cloud.field(f).iter().all(|v| v.is_finite()))
            && self.basis_rot.iter().chain(&self.basis_sigma_log).all(|v| v.is_finite())
            && self.phi.params.iter().chain(&self.psi.params).all(|v| v.is_finite())
    }

    /// Covariance of Gaussian `i`.
    pub fn covariance(&self, i: usize) -> Mat3 {
        self.cloud.geom(i).covariance()
    }
}
