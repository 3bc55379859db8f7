//! Rendering a trained model under point, directional and environment light.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::image::ImageBuffer;
use crate::math::{self, Vec3, PI};
use crate::model::SceneModel;
use crate::pipeline::{self, PipelineOptions, Toggles};
use crate::render::Exec;
use crate::shadow::LightDescriptor;
use crate::toy::fibonacci_sphere;

/// Default number of directional samples for environment lighting.
pub const DEFAULT_ENV_SAMPLES: usize = 64;

/// Equirectangular RGB radiance map, `width == 2 * height`. Row 0 looks
/// straight up (`+y`); the middle column faces `-z` and columns advance
/// toward `+x`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl EnvironmentMap {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::Config(format!("environment map must be 2h x h, got {width}x{height}")));
        }
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::Config(format!("environment map has {} values, expected {}", data.len(), width * height * 3)));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("environment radiance must be finite and non-negative".into()));
        }
        Ok(EnvironmentMap { width, height, data })
    }

    pub fn constant(height: u32, rgb: [f64; 3]) -> Self {
        let n = 2 * height as usize * height as usize;
        EnvironmentMap { width: 2 * height, height, data: (0..n).flat_map(|_| rgb).collect() }
    }

    pub fn from_image(img: &ImageBuffer) -> Result<Self> {
        if img.channels != 3 {
            return Err(Error::Config(format!("environment map needs 3 channels, got {}", img.channels)));
        }
        EnvironmentMap::new(img.width, img.height, img.data.clone())
    }

    pub fn scaled(&self, s: f64) -> Self {
        EnvironmentMap { data: self.data.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    /// Texel holding direction `d`.
    pub fn texel(&self, d: Vec3) -> (u32, u32) {
        let d = d.normalized();
        let u = math::atan2(d.x, -d.z) / (2.0 * PI) + 0.5;
        let v = math::acos(d.y.clamp(-1.0, 1.0)) / PI;
        let x = ((u * self.width as f64) as u32).min(self.width - 1);
        let y = ((v * self.height as f64) as u32).min(self.height - 1);
        (x, y)
    }

    /// Radiance arriving from direction `d` (nearest texel).
    pub fn lookup(&self, d: Vec3) -> [f64; 3] {
        let (x, y) = self.texel(d);
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Lighting {
    Light(LightDescriptor),
    Environment { map: EnvironmentMap, samples: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderRequest {
    pub camera: Frame,
    pub lighting: Lighting,
    pub toggles: Toggles,
    /// Multiplies the final image.
    pub exposure: f64,
}

/// Toggles as they appear on the wire and on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderToggles {
    pub phi: bool,
    pub psi: bool,
    pub shadow: bool,
}

impl Default for RenderToggles {
    fn default() -> Self {
        RenderToggles { phi: true, psi: true, shadow: true }
    }
}

impl From<RenderToggles> for Toggles {
    fn from(t: RenderToggles) -> Self {
        Toggles { shadow_splat: t.shadow, phi: t.phi, psi: t.psi }
    }
}

fn options(toggles: Toggles, exec: Exec) -> PipelineOptions {
    PipelineOptions { toggles, specular: true, exec, ..PipelineOptions::default() }
}

/// `shading * shadow + residual` under one point or directional light.
pub fn render_frame(model: &SceneModel, camera: &Frame, light: &LightDescriptor, toggles: Toggles, exec: Exec) -> Result<ImageBuffer> {
    let light = light.validated()?;
    Ok(pipeline::forward(model, camera, &light, &options(toggles, exec))?.images.final_image)
}

/// Sum over Fibonacci directions `d_k` of `(4π / n) E(d_k)` times the frame
/// rendered under a unit directional light from `d_k`. The whole frame,
/// residual included, scales with the sampled radiance, so the result is
/// linear in the map.
pub fn render_env(model: &SceneModel, camera: &Frame, env: &EnvironmentMap, samples: usize, toggles: Toggles, exec: Exec) -> Result<ImageBuffer> {
    if samples == 0 {
        return Err(Error::Config("environment lighting needs at least one sample".into()));
    }
    let weight = 4.0 * PI / samples as f64;
    let mut out = ImageBuffer::new(camera.width, camera.height, 3);
    for d in fibonacci_sphere(samples) {
        let e = env.lookup(d);
        if e.iter().all(|&v| v == 0.0) {
            continue;
        }
        let img = render_frame(model, camera, &LightDescriptor::directional(d, [1.0; 3]), toggles, exec)?;
        for (o, px) in out.data.chunks_exact_mut(3).zip(img.data.chunks_exact(3)) {
            for k in 0..3 {
                o[k] += weight * e[k] * px[k];
            }
        }
    }
    Ok(out)
}

pub fn render_request(model: &SceneModel, request: &RenderRequest, exec: Exec) -> Result<ImageBuffer> {
    let img = match &request.lighting {
        Lighting::Light(l) => render_frame(model, &request.camera, l, request.toggles, exec)?,
        Lighting::Environment { map, samples } => render_env(model, &request.camera, map, *samples, request.toggles, exec)?,
    };
    Ok(if request.exposure == 1.0 { img } else { img.scaled(request.exposure) })
}
