//! Light visibility by splatting the cloud toward the light.
//!
//! Every pixel of a light-centered frame is a shadow ray. Along a ray the
//! splats are visited in depth order; a receiving splat records the
//! transmittance of all splats nearer than its own depth minus a bias, weighted
//! by its own 2D density at the ray. A Gaussian's raw visibility is the
//! density-weighted mean of those records over all its rays.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{look_at_rotation, Frame, Projection, SceneBounds};
use crate::math::{self, Sym2, Vec3};
use crate::render::{for_tile_blocks, Splat2D, tile_rect, GaussianGeom, GeomGrad, Rasterization, RenderSettings, SplatGrads, MAX_CHANNELS};
use crate::render::Exec;

/// Depth offset (scene units) an occluder must lead a receiver by.
pub const SHADOW_BIAS: f64 = 0.015;
/// Margin applied to the scene bounding sphere when framing the light view.
pub const LIGHT_FRAME_MARGIN: f64 = 1.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LightKind {
    Point { position: [f64; 3] },
    /// `direction` points from the scene toward the light.
    Directional { direction: [f64; 3] },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Falloff {
    None,
    #[default]
    InverseSquare,
}

fn unit_intensity() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightDescriptor {
    #[serde(flatten)]
    pub kind: LightKind,
    #[serde(default = "unit_intensity")]
    pub intensity: [f64; 3],
    /// Ignored for directional lights.
    #[serde(default)]
    pub falloff: Falloff,
}

impl LightDescriptor {
    pub fn point(position: Vec3, intensity: [f64; 3]) -> Self {
        LightDescriptor { kind: LightKind::Point { position: position.to_array() }, intensity, falloff: Falloff::InverseSquare }
    }

    pub fn directional(direction: Vec3, intensity: [f64; 3]) -> Self {
        let d = direction.normalized();
        LightDescriptor { kind: LightKind::Directional { direction: d.to_array() }, intensity, falloff: Falloff::None }
    }

    /// Checks ranges and normalizes a directional light's direction.
    pub fn validated(mut self) -> Result<Self> {
        if self.intensity.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(alloc::format!("light intensity must be finite and >= 0, got {:?}", self.intensity)));
        }
        match &mut self.kind {
            LightKind::Point { position } => {
                if position.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("non-finite light position".into()));
                }
            }
            LightKind::Directional { direction } => {
                let d = Vec3::new(direction[0], direction[1], direction[2]);
                let n = d.norm();
                if !(n > 1e-12) || !n.is_finite() {
                    return Err(Error::DegenerateDirection(n));
                }
                *direction = (d * (1.0 / n)).to_array();
            }
        }
        Ok(self)
    }

    pub fn is_directional(&self) -> bool {
        matches!(self.kind, LightKind::Directional { .. })
    }

    pub fn position(&self) -> Option<Vec3> {
        match self.kind {
            LightKind::Point { position: p } => Some(Vec3::new(p[0], p[1], p[2])),
            LightKind::Directional { .. } => None,
        }
    }

    pub fn intensity(&self) -> Vec3 {
        Vec3::new(self.intensity[0], self.intensity[1], self.intensity[2])
    }

    pub fn scaled(&self, s: [f64; 3]) -> Self {
        LightDescriptor { intensity: core::array::from_fn(|k| self.intensity[k] * s[k]), ..*self }
    }

    /// The same light after the world is mapped through `t.normalize`. An
    /// inverse-square intensity is rescaled so that received radiance is
    /// unchanged.
    pub fn normalized(&self, t: &SceneBounds) -> Self {
        match self.kind {
            LightKind::Point { position } => {
                let p = t.normalize(Vec3::new(position[0], position[1], position[2]));
                let k = if self.falloff == Falloff::InverseSquare { 1.0 / (t.radius * t.radius) } else { 1.0 };
                LightDescriptor {
                    kind: LightKind::Point { position: p.to_array() },
                    intensity: self.intensity.map(|v| v * k),
                    falloff: self.falloff,
                }
            }
            LightKind::Directional { .. } => *self,
        }
    }

    /// Unit direction toward the light at `p` and the distance attenuation.
    pub fn incident(&self, p: Vec3) -> (Vec3, f64) {
        match self.kind {
            LightKind::Point { position } => {
                let v = Vec3::new(position[0], position[1], position[2]) - p;
                let d2 = v.norm_sq();
                let atten = match self.falloff {
                    Falloff::None => 1.0,
                    Falloff::InverseSquare => 1.0 / d2,
                };
                (v * (1.0 / math::sqrt(d2)), atten)
            }
            LightKind::Directional { direction: d } => (Vec3::new(d[0], d[1], d[2]), 1.0),
        }
    }

    /// Gradient w.r.t. `p` of [`LightDescriptor::incident`] given gradients
    /// on its two outputs.
    pub fn incident_backward(&self, p: Vec3, g_dir: Vec3, g_atten: f64) -> Vec3 {
        match self.kind {
            LightKind::Point { position } => {
                let v = Vec3::new(position[0], position[1], position[2]) - p;
                // dir = v/|v| and v = light - p
                let mut g = -v.normalize_backward(g_dir);
                if self.falloff == Falloff::InverseSquare {
                    let d2 = v.norm_sq();
                    g += v * (2.0 * g_atten / (d2 * d2));
                }
                g
            }
            LightKind::Directional { .. } => Vec3::ZERO,
        }
    }
}

/// Frame looking from the light at the scene, covering the enlarged
/// bounding sphere. Point lights use a perspective frame, directional
/// lights an orthographic one.
pub fn light_frame(light: &LightDescriptor, bounds: &SceneBounds, width: u32, height: u32) -> Result<Frame> {
    let r = LIGHT_FRAME_MARGIN * bounds.radius;
    let half_px = 0.5 * width.min(height) as f64;
    let (cx, cy) = (0.5 * width as f64, 0.5 * height as f64);
    let up_for = |forward: Vec3| if forward.y.abs() < 0.9 { Vec3::Y } else { Vec3::Z };
    match light.kind {
        LightKind::Point { .. } => {
            let eye = light.position().unwrap_or_default();
            let d = (eye - bounds.center).norm();
            if !(d > r) {
                return Err(Error::Config(alloc::format!(
                    "point light at distance {d:.4} from the scene center lies inside the scene bound (radius {r:.4})"
                )));
            }
            let half_angle = math::asin(r / d);
            let f = half_px / math::tan(half_angle);
            let (rot, center) = look_at_rotation(eye, bounds.center, up_for((bounds.center - eye).normalized()));
            Frame::from_camera_to_world(rot, center, f, f, cx, cy, width, height, Projection::Perspective)
        }
        LightKind::Directional { direction } => {
            let dir = Vec3::new(direction[0], direction[1], direction[2]);
            let eye = bounds.center + dir * (2.0 * r);
            let f = half_px / r;
            let (rot, center) = look_at_rotation(eye, bounds.center, up_for(-dir));
            Frame::from_camera_to_world(rot, center, f, f, cx, cy, width, height, Projection::Orthographic)
        }
    }
}

/// Density-weighted transmittance sums for one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShadowAccumulator {
    pub num: f64,
    pub den: f64,
    pub rays: u32,
}

impl ShadowAccumulator {
    pub fn add(&mut self, beta: f64, transmittance: f64) {
        self.num += beta * transmittance;
        self.den += beta;
        self.rays += 1;
    }

    pub fn merge(&mut self, o: &ShadowAccumulator) {
        self.num += o.num;
        self.den += o.den;
        self.rays += o.rays;
    }

    /// `num / den`, or 1 when nothing was recorded.
    pub fn value(&self) -> f64 {
        if self.den > 0.0 {
            self.num / self.den
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadowSettings {
    pub bias: f64,
    pub raster: RenderSettings,
}

impl Default for ShadowSettings {
    fn default() -> Self {
        ShadowSettings { bias: SHADOW_BIAS, raster: RenderSettings::default() }
    }
}

/// Per-entry data of one shadow ray.
#[derive(Clone, Copy, Default)]
struct RayEntry {
    hit: bool,
    beta: f64,
    alpha: f64,
    occludes: bool,
    depth: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

/// Evaluates one shadow ray over the candidate positions, in depth order.
fn trace_ray(
    local: &[Splat2D],
    candidates: &[usize],
    px: f64,
    py: f64,
    s: &ShadowSettings,
    entries: &mut Vec<RayEntry>,
) {
    entries.clear();
    let k2 = s.raster.extent_sigma * s.raster.extent_sigma;
    for &pos in candidates {
        let sp = &local[pos];
        let dx = px - sp.mean2d[0];
        let dy = py - sp.mean2d[1];
        let q = sp.conic.quad(dx, dy);
        let mut e = RayEntry { dx, dy, depth: sp.depth, ..RayEntry::default() };
        if q <= k2 {
            e.hit = true;
            e.beta = math::exp(-0.5 * q);
            e.alpha = (e.beta * sp.opacity).min(s.raster.max_alpha);
            e.occludes = e.alpha >= s.raster.min_alpha;
        }
        entries.push(e);
    }
    // occluders strictly nearer than depth - bias, in depth order
    let mut t = 1.0;
    let mut p = 0;
    for i in 0..entries.len() {
        let limit = entries[i].depth - s.bias;
        while p < entries.len() && entries[p].depth < limit {
            if entries[p].occludes {
                t *= 1.0 - entries[p].alpha;
            }
            p += 1;
        }
        entries[i].transmittance = t;
    }
}

/// Result of one shadow splatting pass.
#[derive(Clone, Debug)]
pub struct ShadowPass {
    pub raster: Rasterization,
    /// Per Gaussian.
    pub accumulators: Vec<ShadowAccumulator>,
}

impl ShadowPass {
    /// Raw visibility per Gaussian.
    pub fn transmittance(&self) -> Vec<f64> {
        self.accumulators.iter().map(ShadowAccumulator::value).collect()
    }
}

fn for_tiles<T: Send>(n: usize, exec: Exec, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Splats the cloud toward `light` and aggregates per-Gaussian visibility.
pub fn shadow_splat(
    geoms: &[GaussianGeom],
    light: &LightDescriptor,
    bounds: &SceneBounds,
    width: u32,
    height: u32,
    settings: &ShadowSettings,
    exec: Exec,
) -> Result<ShadowPass> {
    let frame = light_frame(light, bounds, width, height)?;
    let raster = Rasterization::new(geoms, &frame, &settings.raster);
    let k2 = settings.raster.extent_sigma * settings.raster.extent_sigma;
    let partials = for_tiles(raster.bins.lists.len(), exec, |tile| {
        let list = &raster.bins.lists[tile];
        let mut acc = vec![ShadowAccumulator::default(); list.len()];
        // (list position, depth, beta, occluder alpha or None) of one ray's hits
        let mut hits: Vec<(usize, f64, f64, Option<f64>)> = Vec::with_capacity(list.len());
        for_tile_blocks(&raster.splats, list, tile_rect(&raster.bins, &raster.frame, tile), |x, y, local, candidates| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            hits.clear();
            for &pos in candidates {
                let sp = &local[pos];
                let q = sp.conic.quad(px - sp.mean2d[0], py - sp.mean2d[1]);
                if q <= k2 {
                    let beta = math::exp(-0.5 * q);
                    let alpha = (beta * sp.opacity).min(settings.raster.max_alpha);
                    hits.push((pos, sp.depth, beta, (alpha >= settings.raster.min_alpha).then_some(alpha)));
                }
            }
            // same order of products as `trace_ray`
            let mut t = 1.0;
            let mut p = 0;
            for &(pos, depth, beta, _) in &hits {
                let limit = depth - settings.bias;
                while p < hits.len() && hits[p].1 < limit {
                    if let Some(alpha) = hits[p].3 {
                        t *= 1.0 - alpha;
                    }
                    p += 1;
                }
                acc[pos].add(beta, t);
            }
        });
        acc
    });
    let mut accumulators = vec![ShadowAccumulator::default(); geoms.len()];
    for (tile, acc) in partials.iter().enumerate() {
        for (pos, &idx) in raster.bins.lists[tile].iter().enumerate() {
            accumulators[raster.splats[idx as usize].gaussian_index].merge(&acc[pos]);
        }
    }
    Ok(ShadowPass { raster, accumulators })
}

/// Chains a gradient on every Gaussian's raw visibility back to geometry.
pub fn shadow_splat_backward(
    pass: &ShadowPass,
    geoms: &[GaussianGeom],
    d_transmittance: &[f64],
    settings: &ShadowSettings,
    exec: Exec,
) -> Vec<GeomGrad> {
    let raster = &pass.raster;
    let splats = &raster.splats;
    // per-splat receiver weights: g / den and the aggregated value
    let recv: Vec<(f64, f64)> = splats
        .iter()
        .map(|s| {
            let a = &pass.accumulators[s.gaussian_index];
            if a.den > 0.0 {
                (d_transmittance[s.gaussian_index] / a.den, a.value())
            } else {
                (0.0, 1.0)
            }
        })
        .collect();
    let partials = for_tiles(raster.bins.lists.len(), exec, |tile| {
        let list = &raster.bins.lists[tile];
        let n = list.len();
        let mut d_beta = Vec::with_capacity(n);
        let mut d_mean = vec![[0.0; 2]; n];
        let mut d_conic = vec![Sym2::default(); n];
        let mut d_opacity = vec![0.0; n];
        let mut entries = Vec::with_capacity(n);
        for_tile_blocks(splats, list, tile_rect(&raster.bins, &raster.frame, tile), |x, y, local, candidates| {
            trace_ray(local, candidates, x as f64 + 0.5, y as f64 + 0.5, settings, &mut entries);
            let m = entries.len();
            d_beta.clear();
            d_beta.resize(m, 0.0);
            let mut suffix = 0.0;
            let mut r = m;
            for k in (0..m).rev() {
                let dk = entries[k].depth;
                while r > 0 && entries[r - 1].depth - settings.bias > dk {
                    r -= 1;
                    let e = &entries[r];
                    if e.hit {
                        suffix += recv[list[candidates[r]] as usize].0 * e.beta * e.transmittance;
                    }
                }
                let e = &entries[k];
                if !e.hit {
                    continue;
                }
                let pos = candidates[k];
                let (w, value) = recv[list[pos] as usize];
                // as a receiver
                d_beta[k] += w * (e.transmittance - value);
                // as an occluder of everything farther than its depth + bias
                if e.occludes && suffix != 0.0 {
                    let d_alpha = -suffix / (1.0 - e.alpha);
                    let sp = &local[pos];
                    if e.beta * sp.opacity <= settings.raster.max_alpha {
                        d_beta[k] += d_alpha * sp.opacity;
                        d_opacity[pos] += d_alpha * e.beta;
                    }
                }
            }
            for k in 0..m {
                if d_beta[k] == 0.0 {
                    continue;
                }
                let e = &entries[k];
                let pos = candidates[k];
                let sp = &local[pos];
                let d_q = d_beta[k] * e.beta * -0.5;
                let cd = [sp.conic.a * e.dx + sp.conic.b * e.dy, sp.conic.b * e.dx + sp.conic.c * e.dy];
                d_mean[pos][0] += d_q * -2.0 * cd[0];
                d_mean[pos][1] += d_q * -2.0 * cd[1];
                d_conic[pos].a += d_q * e.dx * e.dx;
                d_conic[pos].b += d_q * 2.0 * e.dx * e.dy;
                d_conic[pos].c += d_q * e.dy * e.dy;
            }
        });
        (d_mean, d_conic, d_opacity)
    });
    let mut grads = SplatGrads {
        payload: Vec::new(),
        mean2d: vec![[0.0; 2]; splats.len()],
        conic: vec![Sym2::default(); splats.len()],
        opacity: vec![0.0; splats.len()],
    };
    for (tile, (dm, dc, dop)) in partials.iter().enumerate() {
        for (pos, &idx) in raster.bins.lists[tile].iter().enumerate() {
            let i = idx as usize;
            grads.mean2d[i][0] += dm[pos][0];
            grads.mean2d[i][1] += dm[pos][1];
            grads.conic[i].a += dc[pos].a;
            grads.conic[i].b += dc[pos].b;
            grads.conic[i].c += dc[pos].c;
            grads.opacity[i] += dop[pos];
        }
    }
    raster.geometry_backward(geoms, &grads, &settings.raster)
}

/// Composites per-Gaussian visibility into a one-channel image in `camera`,
/// with unoccluded (1) background.
pub fn shadow_image(
    geoms: &[GaussianGeom],
    visibility: &[f64],
    camera: &Frame,
    settings: &RenderSettings,
    exec: Exec,
) -> crate::image::ImageBuffer {
    let mut bg = [0.0; MAX_CHANNELS];
    bg[0] = 1.0;
    Rasterization::new(geoms, camera, settings).render(visibility, 1, &bg, settings, exec).image
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iso(mu: Vec3, sigma: f64, opacity: f64) -> GaussianGeom {
        GaussianGeom { mu, rot: Rotation::IDENTITY, scale_log: Vec3::splat(math::ln(sigma)), opacity_logit: math::logit(opacity) }
    }

    fn top_light() -> LightDescriptor {
        LightDescriptor::point(Vec3::new(0.0, 3.0, 0.0), [1.0; 3])
    }

    #[test]
    fn accumulator_weighted_mean() {
        let mut a = ShadowAccumulator::default();
        assert_eq!(a.value(), 1.0);
        a.add(0.6, 0.4);
        a.add(0.3, 0.6);
        assert!((a.num - 0.42).abs() < 1e-15);
        assert!((a.value() - 0.42 / 0.9).abs() < 1e-15);
    }

    #[test]
    fn directional_is_normalized_and_zero_rejected() {
        let l = LightDescriptor { kind: LightKind::Directional { direction: [0.0, 0.0, 2.0] }, intensity: [1.0; 3], falloff: Falloff::None };
        assert_eq!(l.validated().unwrap().kind, LightKind::Directional { direction: [0.0, 0.0, 1.0] });
        let z = LightDescriptor { kind: LightKind::Directional { direction: [0.0; 3] }, ..l };
        assert!(z.validated().is_err());
        let neg = LightDescriptor { intensity: [-1.0, 0.0, 0.0], ..l };
        assert!(neg.validated().is_err());
    }

    #[test]
    fn normalization_preserves_received_radiance() {
        let t = SceneBounds { center: Vec3::new(1.0, 2.0, 0.0), radius: 4.0 };
        let l = LightDescriptor::point(Vec3::new(5.0, 2.0, 3.0), [2.0, 1.0, 0.5]);
        let p = Vec3::new(1.5, 1.0, -0.5);
        let (w, a) = l.incident(p);
        let n = l.normalized(&t);
        let (w2, a2) = n.incident(t.normalize(p));
        assert!((w - w2).norm() < 1e-12);
        for k in 0..3 {
            assert!((l.intensity[k] * a - n.intensity[k] * a2).abs() < 1e-12);
        }
    }

    #[test]
    fn point_light_inside_bounds_is_rejected() {
        let l = LightDescriptor::point(Vec3::new(0.0, 0.5, 0.0), [1.0; 3]);
        assert!(light_frame(&l, &SceneBounds::UNIT, 32, 32).is_err());
        assert!(light_frame(&top_light(), &SceneBounds::UNIT, 32, 32).is_ok());
    }

    #[test]
    fn light_frames_see_the_bound_center() {
        for l in [top_light(), LightDescriptor::directional(Vec3::new(1.0, 1.0, 0.0), [1.0; 3])] {
            let f = light_frame(&l, &SceneBounds::UNIT, 32, 32).unwrap();
            let v = f.to_view(Vec3::ZERO);
            assert!(v.z > 0.5);
            let u = match f.mode {
                Projection::Perspective => f.fx * v.x / v.z + f.cx,
                Projection::Orthographic => f.fx * v.x + f.cx,
            };
            assert!((u - 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn incident_gradient_matches_finite_differences() {
        let l = LightDescriptor::point(Vec3::new(0.3, 2.0, -1.0), [1.0; 3]);
        let p = Vec3::new(0.1, -0.2, 0.3);
        let gd = Vec3::new(0.4, -0.7, 0.2);
        let ga = 1.3;
        let f = |p: Vec3| {
            let (d, a) = l.incident(p);
            d.dot(gd) + a * ga
        };
        let g = l.incident_backward(p, gd, ga);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p;
            a[k] += h;
            let mut b = p;
            b[k] -= h;
            assert!(((f(a) - f(b)) / (2.0 * h) - g[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_gaussian_is_fully_lit() {
        let g = [iso(Vec3::ZERO, 0.1, 0.9)];
        let pass = shadow_splat(&g, &top_light(), &SceneBounds::UNIT, 32, 32, &ShadowSettings::default(), Exec::Serial).unwrap();
        assert_eq!(pass.transmittance(), vec![1.0]);
        assert!(pass.accumulators[0].rays > 0);
    }

    #[test]
    fn occluder_darkens_receiver() {
        let receiver = iso(Vec3::ZERO, 0.08, 0.9);
        let occluder = iso(Vec3::new(0.0, 0.5, 0.0), 0.08, 0.9);
        let s = ShadowSettings::default();
        let pass = shadow_splat(&[receiver, occluder], &top_light(), &SceneBounds::UNIT, 32, 32, &s, Exec::Serial).unwrap();
        let t = pass.transmittance();
        assert!(t[0] < 0.5, "{t:?}");
        assert_eq!(t[1], 1.0);
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianGeom> {
        (0..n)
            .map(|_| {
                let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
                GaussianGeom {
                    mu: Vec3::new(r(-0.4, 0.4), r(-0.4, 0.4), r(-0.4, 0.4)),
                    rot: Rotation::new([r(-1.0, 1.0), r(-1.0, 1.0), r(-1.0, 1.0), r(-1.0, 1.0)]),
                    scale_log: Vec3::new(r(-3.0, -2.0), r(-3.0, -2.0), r(-3.0, -2.0)),
                    opacity_logit: r(-1.0, 2.0),
                }
            })
            .collect()
    }

    #[test]
    fn raw_transmittance_is_bounded_and_parallel_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = ShadowSettings::default();
        for _ in 0..5 {
            let g = random_cloud(&mut rng, 40);
            let a = shadow_splat(&g, &top_light(), &SceneBounds::UNIT, 32, 32, &s, Exec::Serial).unwrap().transmittance();
            let b = shadow_splat(&g, &top_light(), &SceneBounds::UNIT, 32, 32, &s, Exec::Parallel).unwrap().transmittance();
            assert!(a.iter().all(|t| (0.0..=1.0).contains(t)));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn raising_an_occluder_opacity_never_brightens_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = ShadowSettings::default();
        for _ in 0..20 {
            let mut g = random_cloud(&mut rng, 20);
            let k = rng.random_range(0..g.len());
            let before = shadow_splat(&g, &top_light(), &SceneBounds::UNIT, 24, 24, &s, Exec::Serial).unwrap().transmittance();
            g[k].opacity_logit += rng.random_range(0.1..3.0);
            let after = shadow_splat(&g, &top_light(), &SceneBounds::UNIT, 24, 24, &s, Exec::Serial).unwrap().transmittance();
            for i in (0..g.len()).filter(|&i| i != k) {
                assert!(after[i] <= before[i] + 1e-12, "gaussian {i}: {} -> {}", before[i], after[i]);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // smooth support so finite differences never straddle a cutoff
        let s = ShadowSettings { raster: RenderSettings { min_alpha: 0.0, extent_sigma: 8.0, ..RenderSettings::default() }, ..ShadowSettings::default() };
        for (seed, light) in [(1u64, top_light()), (2, LightDescriptor::directional(Vec3::new(0.3, 1.0, 0.2), [1.0; 3]))] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_cloud(&mut rng, 8);
            let w: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |g: &[GaussianGeom]| -> f64 {
                let t = shadow_splat(g, &light, &SceneBounds::UNIT, 16, 16, &s, Exec::Serial).unwrap().transmittance();
                t.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let pass = shadow_splat(&g, &light, &SceneBounds::UNIT, 16, 16, &s, Exec::Serial).unwrap();
            let grads = shadow_splat_backward(&pass, &g, &w, &s, Exec::Serial);
            let h = 1e-6;
            for i in 0..g.len() {
                let fd = |f: &dyn Fn(&mut GaussianGeom, f64)| {
                    let (mut a, mut b) = (g.clone(), g.clone());
                    f(&mut a[i], h);
                    f(&mut b[i], -h);
                    (loss(&a) - loss(&b)) / (2.0 * h)
                };
                let chk = |num: f64, an: f64, what: &str| {
                    assert!((num - an).abs() <= 1e-3 * num.abs().max(an.abs()).max(1e-4), "{what} {i}: fd {num} an {an}");
                };
                for c in 0..3 {
                    chk(fd(&|g, d| g.mu[c] += d), grads[i].mu[c], "mu");
                    chk(fd(&|g, d| g.scale_log[c] += d), grads[i].scale_log[c], "scale");
                }
                chk(fd(&|g, d| g.opacity_logit += d), grads[i].opacity_logit, "opacity");
            }
        }
    }

    #[test]
    fn shadow_image_of_all_ones_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_cloud(&mut rng, 30);
        let cam = Frame::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::ZERO, Vec3::Y, 0.8, 24, 24).unwrap();
        let img = shadow_image(&g, &vec![1.0; g.len()], &cam, &RenderSettings::default(), Exec::Serial);
        assert!(img.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
