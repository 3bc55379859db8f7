//! Analytic toy scenes: ray-traced spheres under a point light, with exact
//! hard shadows. Used as small ground-truth datasets.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, SceneBounds};
use crate::image::ImageBuffer;
use crate::math::{self, Vec3, PI};
use crate::shadow::LightDescriptor;
use crate::train::{Dataset, TrainView};

/// Largest supported image side.
pub const MAX_TOY_RESOLUTION: u32 = 256;
/// Distance of the cameras from the origin.
pub const CAMERA_DISTANCE: f64 = 2.5;
/// Tangent of the half field of view.
pub const TAN_HALF_FOV: f64 = 0.3;
const LIGHT_DISTANCE: (f64, f64) = (2.2, 3.0);
/// Light intensity relative to the squared light distance.
const LIGHT_POWER: f64 = 2.0;
const SEED_POINTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    DiffuseSphere,
    GlossySphere,
    OccluderPair,
}

impl ToyKind {
    pub const ALL: [ToyKind; 3] = [ToyKind::DiffuseSphere, ToyKind::GlossySphere, ToyKind::OccluderPair];

    pub fn name(self) -> &'static str {
        match self {
            ToyKind::DiffuseSphere => "diffuse-sphere",
            ToyKind::GlossySphere => "glossy-sphere",
            ToyKind::OccluderPair => "occluder-pair",
        }
    }
}

impl FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ToyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown toy kind '{s}' (expected diffuse-sphere, glossy-sphere or occluder-pair)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: Vec3,
    /// Weight of the normalized Blinn-Phong lobe; 0 for Lambertian.
    pub specular: f64,
    pub shininess: f64,
}

impl Sphere {
    /// Nearest hit distance along a unit-direction ray, if any.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let oc = origin - self.center;
        let b = oc.dot(dir);
        let c = oc.norm_sq() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let s = math::sqrt(disc);
        let t0 = -b - s;
        if t0 > 1e-9 {
            return Some(t0);
        }
        let t1 = -b + s;
        (t1 > 1e-9).then_some(t1)
    }

    fn brdf(&self, n: Vec3, wi: Vec3, wo: Vec3) -> Vec3 {
        let mut f = self.albedo * (1.0 / PI);
        if self.specular > 0.0 {
            let h = (wi + wo).normalized();
            let c = n.dot(h).max(0.0);
            f += Vec3::splat(self.specular * (self.shininess + 2.0) / (8.0 * PI) * math::powf(c, self.shininess));
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub spheres: Vec<Sphere>,
}

impl ToyScene {
    pub fn new(kind: ToyKind) -> Self {
        let s = |center: Vec3, radius: f64, albedo: Vec3, specular: f64| Sphere { center, radius, albedo, specular, shininess: 40.0 };
        let spheres = match kind {
            ToyKind::DiffuseSphere => alloc::vec![s(Vec3::ZERO, 0.5, Vec3::new(0.8, 0.55, 0.3), 0.0)],
            ToyKind::GlossySphere => alloc::vec![s(Vec3::ZERO, 0.5, Vec3::new(0.5, 0.35, 0.25), 0.6)],
            ToyKind::OccluderPair => alloc::vec![
                s(Vec3::new(0.0, -0.15, 0.0), 0.45, Vec3::new(0.7, 0.7, 0.7), 0.0),
                s(Vec3::new(0.05, 0.5, 0.0), 0.15, Vec3::new(0.3, 0.5, 0.8), 0.0),
            ],
        };
        ToyScene { spheres }
    }

    /// Sphere enclosing the geometry with a 10% margin.
    pub fn bounds(&self) -> SceneBounds {
        let r = self.spheres.iter().map(|s| s.center.norm() + s.radius).fold(0.0, f64::max);
        SceneBounds { center: Vec3::ZERO, radius: 1.1 * r }
    }

    fn hit(&self, origin: Vec3, dir: Vec3) -> Option<(f64, usize)> {
        self.spheres
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.intersect(origin, dir).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Whether the segment from `p` to `light` is unobstructed.
    pub fn visible(&self, p: Vec3, light: Vec3) -> bool {
        let v = light - p;
        let d = v.norm();
        match self.hit(p, v * (1.0 / d)) {
            Some((t, _)) => t >= d,
            None => true,
        }
    }

    /// Radiance along the ray through the center of pixel `(x, y)`.
    pub fn shade_pixel(&self, camera: &Frame, light: &LightDescriptor, x: u32, y: u32) -> Vec3 {
        let v = Vec3::new((x as f64 + 0.5 - camera.cx) / camera.fx, (y as f64 + 0.5 - camera.cy) / camera.fy, 1.0);
        let dir = camera.rotation.tmul_vec(v).normalized();
        let origin = camera.center();
        let Some((t, i)) = self.hit(origin, dir) else { return Vec3::ZERO };
        let s = &self.spheres[i];
        let p = origin + dir * t;
        let n = (p - s.center).normalized();
        let (wi, atten) = light.incident(p);
        let cos = n.dot(wi);
        if cos <= 0.0 {
            return Vec3::ZERO;
        }
        let lit = match light.position() {
            Some(lp) => self.visible(p + n * 1e-7, lp),
            None => self.hit(p + n * 1e-7, wi).is_none(),
        };
        if !lit {
            return Vec3::ZERO;
        }
        s.brdf(n, wi, -dir).mul_elem(light.intensity()) * (cos * atten)
    }

    pub fn render(&self, camera: &Frame, light: &LightDescriptor) -> ImageBuffer {
        let mut img = ImageBuffer::new(camera.width, camera.height, 3);
        for y in 0..camera.height {
            for x in 0..camera.width {
                let c = self.shade_pixel(camera, light, x, y);
                for k in 0..3 {
                    img.set(x, y, k as u32, c[k]);
                }
            }
        }
        img
    }

    /// Points scattered on the sphere surfaces, proportional to area.
    pub fn surface_points<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        let areas: Vec<f64> = self.spheres.iter().map(|s| s.radius * s.radius).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        for (s, a) in self.spheres.iter().zip(&areas) {
            let k = if core::ptr::eq(s, self.spheres.last().unwrap()) { n - out.len() } else { (n as f64 * a / total) as usize };
            for _ in 0..k {
                let d = random_unit(rng);
                let jitter = rng.random_range(-0.02..0.02);
                out.push(s.center + d * (s.radius + jitter));
            }
        }
        out
    }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = math::sqrt((1.0 - z * z).max(0.0));
    Vec3::new(r * math::cos(phi), r * math::sin(phi), z)
}

/// `n` nearly uniform unit vectors on a Fibonacci lattice.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - math::sqrt(5.0));
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = math::sqrt(1.0 - y * y);
            let phi = golden * i as f64;
            Vec3::new(r * math::cos(phi), y, r * math::sin(phi))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub kind: ToyKind,
    pub n_views: usize,
    pub n_lights: usize,
    pub resolution: u32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { kind: ToyKind::DiffuseSphere, n_views: 50, n_lights: 50, resolution: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyView {
    pub camera: Frame,
    pub light: LightDescriptor,
    pub image: ImageBuffer,
}

/// Rendered toy dataset in world units.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub views: Vec<ToyView>,
    pub seed_points: Vec<Vec3>,
    /// Bound of the geometry.
    pub bounds: SceneBounds,
}

/// Camera looking at the origin from `eye`.
pub fn toy_camera(eye: Vec3, resolution: u32) -> Result<Frame> {
    let up = if eye.normalized().y.abs() > 0.99 { Vec3::Z } else { Vec3::Y };
    Frame::look_at(eye, Vec3::ZERO, up, 2.0 * math::atan2(TAN_HALF_FOV, 1.0), resolution, resolution)
}

pub fn generate_toy_dataset(config: &ToyConfig) -> Result<ToyDataset> {
    if config.resolution == 0 || config.resolution > MAX_TOY_RESOLUTION {
        return Err(Error::Config(format!("toy resolution must be in 1..={MAX_TOY_RESOLUTION}, got {}", config.resolution)));
    }
    if config.n_views == 0 || config.n_lights == 0 {
        return Err(Error::Config("toy datasets need at least one view and one light".into()));
    }
    let scene = ToyScene::new(config.kind);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lights: Vec<LightDescriptor> = (0..config.n_lights)
        .map(|_| {
            let mut d = random_unit(&mut rng);
            if config.kind == ToyKind::OccluderPair && d.y < 0.4 {
                // keep the occluder between the light and the receiver
                d.y = 0.4 + 0.6 * (d.y + 1.0) / 1.4;
                d = d.normalized();
            }
            let r = rng.random_range(LIGHT_DISTANCE.0..LIGHT_DISTANCE.1);
            LightDescriptor::point(d * r, [LIGHT_POWER * r * r; 3])
        })
        .collect();
    let views = fibonacci_sphere(config.n_views)
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let camera = toy_camera(d * CAMERA_DISTANCE, config.resolution)?;
            let light = lights[i % lights.len()];
            let image = scene.render(&camera, &light);
            Ok(ToyView { camera, light, image })
        })
        .collect::<Result<Vec<_>>>()?;
    let seed_points = scene.surface_points(SEED_POINTS, &mut rng);
    Ok(ToyDataset { config: *config, views, seed_points, bounds: scene.bounds() })
}

impl ToyDataset {
    /// Normalization mapping cameras and point lights into the unit sphere.
    pub fn normalization(&self) -> SceneBounds {
        let pts: Vec<Vec3> = self.views.iter().flat_map(|v| [Some(v.camera.center()), v.light.position()]).flatten().collect();
        SceneBounds::enclosing(&pts).unwrap_or_default()
    }

    /// Training dataset in normalized scene units.
    pub fn to_dataset(&self) -> Dataset {
        let t = self.normalization();
        Dataset {
            views: self
                .views
                .iter()
                .map(|v| TrainView { camera: v.camera.normalized(&t), light: v.light.normalized(&t), target: v.image.clone() })
                .collect(),
            bounds: self.bounds.normalized_by(&t),
            seed_points: self.seed_points.iter().map(|p| t.normalize(*p)).collect(),
        }
    }
}
