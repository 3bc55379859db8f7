//! Spatial and angular Gaussians and the per-Gaussian reflectance function.
//!
//! Reflectance is `rho_d * f_d(n'.wi') + rho_s * sum_j alpha_j G_j(h')`, where
//! primes denote directions expressed in the Gaussian's shading frame and
//! `G_j` are anisotropic angular Gaussians shared by every spatial Gaussian.
//!
//! Stored parameters are unconstrained: opacity is a logit, scales and lobe
//! sigmas are logs, albedos and lobe weights go through softplus. Every
//! `*_backward` function returns gradients with respect to the stored
//! (raw) parameters.

use alloc::vec::Vec;

use arrayvec::ArrayVec;

use crate::error::{Error, Result};
use crate::math::{self, quat_to_matrix, quat_to_matrix_backward, sigmoid, softplus, Mat3, Vec3};

/// Largest supported number of shared angular lobes.
pub const MAX_BASIS: usize = 16;
/// Basis sizes the trainer accepts.
pub const SUPPORTED_BASIS_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];
/// Basis size used unless configured otherwise.
pub const DEFAULT_BASIS_COUNT: usize = 8;

/// ELU slope parameter of the modified Lambertian.
pub const ELU_ALPHA: f64 = 0.01;
/// Offset of the modified Lambertian.
pub const DIFFUSE_EPS: f64 = 0.01;
/// Below this projected length `h` is treated as lying on the lobe axis.
pub const POLE_EPS: f64 = 1e-8;
/// Below this `|wi + wo|` the half vector is undefined.
pub const HALF_VECTOR_EPS: f64 = 1e-8;

/// A rotation stored as a quaternion `(w, x, y, z)`.
///
/// The stored quaternion is used as-is; [`Rotation::matrix`] normalizes on
/// read so gradients flow through the normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    q: [f64; 4],
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation { q: [1.0, 0.0, 0.0, 0.0] };

    /// Normalized rotation from `q`.
    pub fn new(q: [f64; 4]) -> Self {
        let n = math::sqrt(q.iter().map(|v| v * v).sum::<f64>());
        Rotation { q: q.map(|v| v / n) }
    }

    /// Keeps `q` as given (it may be slightly off unit length).
    pub fn from_raw(q: [f64; 4]) -> Self {
        Rotation { q }
    }

    pub fn from_f32(q: &[f32]) -> Self {
        Rotation { q: [q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64] }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = (math::sin(angle * 0.5), math::cos(angle * 0.5));
        Rotation { q: [c, a.x * s, a.y * s, a.z * s] }
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        Rotation { q: math::matrix_to_quat(m) }
    }

    #[inline]
    pub fn quat(&self) -> [f64; 4] {
        self.q
    }

    #[inline]
    pub fn matrix(&self) -> Mat3 {
        quat_to_matrix(self.q)
    }

    /// `R v`.
    #[inline]
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        self.matrix().mul_vec(v)
    }

    /// `Rᵀ v`.
    #[inline]
    pub fn inverse_rotate(&self, v: Vec3) -> Vec3 {
        self.matrix().tmul_vec(v)
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { q: [self.q[0], -self.q[1], -self.q[2], -self.q[3]] }
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation { q: math::quat_mul(self.q, other.q) }
    }

    /// Gradient w.r.t. the stored quaternion given `dL/dR`.
    #[inline]
    pub fn matrix_backward(&self, g: &Mat3) -> [f64; 4] {
        quat_to_matrix_backward(self.q, g)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::IDENTITY
    }
}

/// A spatial Gaussian decoded to `f64`, with raw (unconstrained) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGaussian {
    pub mu: Vec3,
    /// Log of the per-axis standard deviation.
    pub scale_log: Vec3,
    pub rot: Rotation,
    pub opacity_logit: f64,
    /// Rotation from the world to the shading frame `[t, b, n]`.
    pub frame: Rotation,
    /// Diffuse albedo before softplus.
    pub rho_d_raw: Vec3,
    /// Specular albedo before softplus.
    pub rho_s_raw: Vec3,
    /// Lobe weights before softplus, one per basis lobe.
    pub alpha_raw: ArrayVec<f64, MAX_BASIS>,
    pub latent: [f64; 6],
}

impl SpatialGaussian {
    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    #[inline]
    pub fn scale(&self) -> Vec3 {
        Vec3::new(math::exp(self.scale_log.x), math::exp(self.scale_log.y), math::exp(self.scale_log.z))
    }

    #[inline]
    pub fn rho_d(&self) -> Vec3 {
        softplus3(self.rho_d_raw)
    }

    #[inline]
    pub fn rho_s(&self) -> Vec3 {
        softplus3(self.rho_s_raw)
    }

    pub fn alpha(&self) -> ArrayVec<f64, MAX_BASIS> {
        self.alpha_raw.iter().map(|&a| softplus(a)).collect()
    }

    pub fn covariance(&self) -> Mat3 {
        build_covariance(&self.rot, self.scale())
    }
}

#[inline]
fn softplus3(v: Vec3) -> Vec3 {
    Vec3::new(softplus(v.x), softplus(v.y), softplus(v.z))
}

#[inline]
fn sigmoid3(v: Vec3) -> Vec3 {
    Vec3::new(sigmoid(v.x), sigmoid(v.y), sigmoid(v.z))
}

/// A modified anisotropic spherical Gaussian over half vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngularGaussian {
    /// Lobe axes `[x, y, z]` as the columns of this rotation, in shading-frame coordinates.
    pub frame: Rotation,
    pub sigma_log: Vec3,
}

impl AngularGaussian {
    pub fn new(frame: Rotation, sigma: Vec3) -> Self {
        AngularGaussian { frame, sigma_log: Vec3::new(math::ln(sigma.x), math::ln(sigma.y), math::ln(sigma.z)) }
    }

    #[inline]
    pub fn sigma(&self) -> Vec3 {
        Vec3::new(math::exp(self.sigma_log.x), math::exp(self.sigma_log.y), math::exp(self.sigma_log.z))
    }
}

/// The lobes shared by every spatial Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularGaussianBasis {
    pub lobes: Vec<AngularGaussian>,
}

impl AngularGaussianBasis {
    pub fn len(&self) -> usize {
        self.lobes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lobes.is_empty()
    }
}

/// Gradients on the shared basis, accumulated across Gaussians.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BasisGrad {
    pub frame_q: Vec<[f64; 4]>,
    pub sigma_log: Vec<Vec3>,
}

impl BasisGrad {
    pub fn zeros(j: usize) -> Self {
        BasisGrad { frame_q: alloc::vec![[0.0; 4]; j], sigma_log: alloc::vec![Vec3::ZERO; j] }
    }

    pub fn add(&mut self, other: &BasisGrad) {
        for (a, b) in self.frame_q.iter_mut().zip(&other.frame_q) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.sigma_log.iter_mut().zip(&other.sigma_log) {
            *a += *b;
        }
    }
}

/// `R diag(s²) Rᵀ`.
pub fn build_covariance(rot: &Rotation, scale: Vec3) -> Mat3 {
    let r = rot.matrix();
    let s2 = scale.mul_elem(scale);
    let rs = Mat3::from_cols(r.col(0) * s2.x, r.col(1) * s2.y, r.col(2) * s2.z);
    let mut out = rs.mul(&r.transpose());
    // exact symmetry
    for i in 0..3 {
        for j in (i + 1)..3 {
            let m = 0.5 * (out.0[i][j] + out.0[j][i]);
            out.0[i][j] = m;
            out.0[j][i] = m;
        }
    }
    out
}

/// Gradients of a scalar w.r.t. `rot` (stored quaternion) and `scale_log`,
/// given `dL/dΣ` (treated as a full matrix).
pub fn covariance_backward(rot: &Rotation, scale_log: Vec3, g_sigma: &Mat3) -> ([f64; 4], Vec3) {
    let r = rot.matrix();
    let s = Vec3::new(math::exp(scale_log.x), math::exp(scale_log.y), math::exp(scale_log.z));
    let s2 = s.mul_elem(s);
    // symmetrize the upstream so (G + Gᵀ)/2 acts on symmetric Σ
    let gs = g_sigma.add(&g_sigma.transpose()).scale(0.5);
    // dΣ/dR: Σ = R D Rᵀ  ->  G_R = 2 G_s R D
    let rd = Mat3::from_cols(r.col(0) * s2.x, r.col(1) * s2.y, r.col(2) * s2.z);
    let g_r = gs.mul(&rd).scale(2.0);
    let dq = rot.matrix_backward(&g_r);
    // dΣ/ds_k = 2 s_k r_k r_kᵀ ; d/dlog s_k = s_k d/ds_k
    let mut ds = Vec3::ZERO;
    for k in 0..3 {
        let rk = r.col(k);
        let proj = rk.dot(gs.mul_vec(rk));
        ds[k] = 2.0 * s2[k] * proj;
    }
    (dq, ds)
}

/// `Σ⁻¹ = R diag(1/s²) Rᵀ`.
fn precision(g: &SpatialGaussian) -> Mat3 {
    let inv = g.scale();
    build_covariance(&g.rot, Vec3::new(1.0 / inv.x, 1.0 / inv.y, 1.0 / inv.z))
}

/// Unnormalized density `exp(-½ (p-μ)ᵀ Σ⁻¹ (p-μ))`.
pub fn eval_spatial_density(g: &SpatialGaussian, p: Vec3) -> f64 {
    let d = p - g.mu;
    math::exp(-0.5 * d.dot(precision(g).mul_vec(d)))
}

/// Gradients of [`eval_spatial_density`] scaled by `upstream`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityGrad {
    pub mu: Vec3,
    pub rot_q: [f64; 4],
    pub scale_log: Vec3,
}

pub fn spatial_density_backward(g: &SpatialGaussian, p: Vec3, upstream: f64) -> DensityGrad {
    let d = p - g.mu;
    let r = g.rot.matrix();
    let s = g.scale();
    // local coords l = Rᵀ d ; q = Σ_k l_k² / s_k²
    let l = r.tmul_vec(d);
    let q: f64 = (0..3).map(|k| l[k] * l[k] / (s[k] * s[k])).sum();
    let val = math::exp(-0.5 * q);
    let dq = -0.5 * val * upstream;
    let mut dl = Vec3::ZERO;
    let mut dscale_log = Vec3::ZERO;
    for k in 0..3 {
        dl[k] = dq * 2.0 * l[k] / (s[k] * s[k]);
        // d(l²/s²)/dlog s = -2 l²/s²
        dscale_log[k] = dq * -2.0 * l[k] * l[k] / (s[k] * s[k]);
    }
    // l = Rᵀ d -> dd = R dl, dR = d dlᵀ
    let dd = r.mul_vec(dl);
    let g_r = Mat3::outer(d, dl);
    DensityGrad { mu: -dd, rot_q: g.rot.matrix_backward(&g_r), scale_log: dscale_log }
}

/// Expresses the world direction `v` in the frame `f` (applies `f⁻¹`).
#[inline]
pub fn rotate_to_frame(f: &Rotation, v: Vec3) -> Vec3 {
    f.inverse_rotate(v)
}

const fn diffuse_offset() -> f64 {
    // ε (1 - 1/e)
    DIFFUSE_EPS * (1.0 - 0.367_879_441_171_442_33)
}

/// Modified Lambertian `(ELU(c) + ε(1-1/e)) / ((1 + ε(1-1/e)) π)`.
#[inline]
pub fn eval_diffuse(c: f64) -> f64 {
    let elu = if c >= 0.0 { c } else { ELU_ALPHA * (math::exp(c) - 1.0) };
    (elu + diffuse_offset()) / ((1.0 + diffuse_offset()) * math::PI)
}

/// `d f_d / d c`.
#[inline]
pub fn eval_diffuse_derivative(c: f64) -> f64 {
    let delu = if c >= 0.0 { 1.0 } else { ELU_ALPHA * math::exp(c) };
    delu / ((1.0 + diffuse_offset()) * math::PI)
}

/// Normalized `wi + wo`.
pub fn half_vector(wi: Vec3, wo: Vec3) -> Result<Vec3> {
    let s = wi + wo;
    let n = s.norm();
    if n < HALF_VECTOR_EPS {
        return Err(Error::DegenerateDirection(n));
    }
    Ok(s * (1.0 / n))
}

struct LobeTerms {
    value: f64,
    theta: f64,
    aniso: f64,
    local: Vec3,
    rho_sq: f64,
    sigma: Vec3,
}

fn lobe_terms(ag: &AngularGaussian, h: Vec3) -> LobeTerms {
    let sigma = ag.sigma();
    let local = ag.frame.inverse_rotate(h);
    let rho_sq = local.x * local.x + local.y * local.y;
    // angle to the lobe axis; atan2 keeps the derivative finite at both poles
    let theta = math::atan2(math::sqrt(rho_sq), local.z);
    let aniso = if math::sqrt(rho_sq) < POLE_EPS {
        1.0 / sigma.x
    } else {
        let a2 = local.x * local.x / (sigma.x * sigma.x) + local.y * local.y / (sigma.y * sigma.y);
        math::sqrt(a2 / rho_sq)
    };
    let u = theta * aniso / sigma.z;
    let value = math::exp(-0.5 * u * u) / sigma.z;
    LobeTerms { value, theta, aniso, local, rho_sq, sigma }
}

/// Evaluates one angular Gaussian at the half vector `h`.
pub fn eval_angular_gaussian(ag: &AngularGaussian, h: Vec3) -> f64 {
    lobe_terms(ag, h).value
}

/// Gradients of one lobe evaluation scaled by `upstream`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LobeGrad {
    pub frame_q: [f64; 4],
    pub sigma_log: Vec3,
    pub h: Vec3,
}

pub fn angular_gaussian_backward(ag: &AngularGaussian, h: Vec3, upstream: f64) -> LobeGrad {
    let t = lobe_terms(ag, h);
    let s = t.sigma;
    let u = t.theta * t.aniso / s.z;
    let dval = upstream;
    // G = exp(-u²/2)/σz
    let du = dval * -t.value * u;
    let mut dsigma = Vec3::ZERO;
    dsigma.z = dval * -t.value / s.z + du * -u / s.z;
    let dtheta = du * t.aniso / s.z;
    let daniso = du * t.theta / s.z;
    let mut dlocal = Vec3::ZERO;
    let rho = math::sqrt(t.rho_sq);
    let len_sq = t.rho_sq + t.local.z * t.local.z;
    dlocal.z = dtheta * -rho / len_sq;
    if rho < POLE_EPS {
        dsigma.x -= daniso / (s.x * s.x);
    } else {
        let dtheta_drho = dtheta * t.local.z / len_sq;
        dlocal.x += dtheta_drho * t.local.x / rho;
        dlocal.y += dtheta_drho * t.local.y / rho;
        let (lx, ly, a) = (t.local.x, t.local.y, t.aniso);
        let r2 = t.rho_sq;
        dlocal.x += daniso * lx / (a * r2) * (1.0 / (s.x * s.x) - a * a);
        dlocal.y += daniso * ly / (a * r2) * (1.0 / (s.y * s.y) - a * a);
        dsigma.x += daniso * -(lx * lx) / (a * s.x * s.x * s.x * r2);
        dsigma.y += daniso * -(ly * ly) / (a * s.y * s.y * s.y * r2);
    }
    let r = ag.frame.matrix();
    let dh = r.mul_vec(dlocal);
    let g_r = Mat3::outer(h, dlocal);
    LobeGrad { frame_q: ag.frame.matrix_backward(&g_r), sigma_log: dsigma.mul_elem(s), h: dh }
}

/// `Σ_j α_j G_j(h)` with already-activated weights.
pub fn eval_specular(alpha: &[f64], basis: &AngularGaussianBasis, h: Vec3) -> f64 {
    debug_assert_eq!(alpha.len(), basis.len());
    alpha.iter().zip(&basis.lobes).map(|(a, lobe)| a * eval_angular_gaussian(lobe, h)).sum()
}

/// Full reflectance (diffuse + specular) for world directions.
pub fn eval_reflectance(g: &SpatialGaussian, basis: &AngularGaussianBasis, wi: Vec3, wo: Vec3) -> Result<Vec3> {
    reflectance(g, basis, wi, wo, true)
}

/// Reflectance with the specular term optionally masked out.
///
/// With `specular == false` the half vector is never formed, so antipodal
/// directions are not an error.
pub fn reflectance(
    g: &SpatialGaussian,
    basis: &AngularGaussianBasis,
    wi: Vec3,
    wo: Vec3,
    specular: bool,
) -> Result<Vec3> {
    let r = g.frame.matrix();
    let wi_l = r.tmul_vec(wi);
    let mut out = g.rho_d() * eval_diffuse(wi_l.z);
    if specular {
        let wo_l = r.tmul_vec(wo);
        let h = half_vector(wi_l, wo_l)?;
        let fs = eval_specular(&g.alpha(), basis, h);
        out += g.rho_s() * fs;
    }
    Ok(out)
}

/// Gradients of `upstream · reflectance(...)` w.r.t. one Gaussian's raw
/// appearance parameters and the world directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectanceGrad {
    pub frame_q: [f64; 4],
    pub rho_d_raw: Vec3,
    pub rho_s_raw: Vec3,
    pub alpha_raw: ArrayVec<f64, MAX_BASIS>,
    pub wi: Vec3,
    pub wo: Vec3,
}

/// Backward of [`reflectance`]. Basis gradients are added into `basis_grad`.
pub fn reflectance_backward(
    g: &SpatialGaussian,
    basis: &AngularGaussianBasis,
    wi: Vec3,
    wo: Vec3,
    specular: bool,
    upstream: Vec3,
    basis_grad: &mut BasisGrad,
) -> Result<ReflectanceGrad> {
    let r = g.frame.matrix();
    let wi_l = r.tmul_vec(wi);
    let wo_l = r.tmul_vec(wo);
    let fd = eval_diffuse(wi_l.z);
    let rho_d = g.rho_d();
    let d_rho_d = upstream * fd;
    let dfd = upstream.dot(rho_d);
    let mut dwi_l = Vec3::new(0.0, 0.0, dfd * eval_diffuse_derivative(wi_l.z));
    let mut dwo_l = Vec3::ZERO;
    let mut d_rho_s = Vec3::ZERO;
    let mut d_alpha: ArrayVec<f64, MAX_BASIS> = g.alpha_raw.iter().map(|_| 0.0).collect();

    if specular {
        let h = half_vector(wi_l, wo_l)?;
        let alpha = g.alpha();
        let rho_s = g.rho_s();
        let lobes: ArrayVec<f64, MAX_BASIS> = basis.lobes.iter().map(|l| eval_angular_gaussian(l, h)).collect();
        let fs: f64 = alpha.iter().zip(&lobes).map(|(a, v)| a * v).sum();
        d_rho_s = upstream * fs;
        let dfs = upstream.dot(rho_s);
        let mut dh = Vec3::ZERO;
        for (j, lobe) in basis.lobes.iter().enumerate() {
            d_alpha[j] = dfs * lobes[j] * sigmoid(g.alpha_raw[j]);
            let lg = angular_gaussian_backward(lobe, h, dfs * alpha[j]);
            for k in 0..4 {
                basis_grad.frame_q[j][k] += lg.frame_q[k];
            }
            basis_grad.sigma_log[j] += lg.sigma_log;
            dh += lg.h;
        }
        let ds = (wi_l + wo_l).normalize_backward(dh);
        dwi_l += ds;
        dwo_l += ds;
    }

    let g_r = Mat3::outer(wi, dwi_l).add(&Mat3::outer(wo, dwo_l));
    Ok(ReflectanceGrad {
        frame_q: g.frame.matrix_backward(&g_r),
        rho_d_raw: d_rho_d.mul_elem(sigmoid3(g.rho_d_raw)),
        rho_s_raw: d_rho_s.mul_elem(sigmoid3(g.rho_s_raw)),
        alpha_raw: d_alpha,
        wi: r.mul_vec(dwi_l),
        wo: r.mul_vec(dwo_l),
    })
}
