//! Camera and light frames.
//!
//! View space follows the usual computer-vision convention: `+x` right,
//! `+y` down, `+z` forward. A pixel `(i, j)` is sampled at its center
//! `(i + 0.5, j + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

/// Default near plane in scene units.
pub const DEFAULT_NEAR: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[default]
    Perspective,
    /// `u = fx * x + cx`; `fx` is pixels per scene unit.
    Orthographic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    /// World-to-view rotation.
    pub rotation: Mat3,
    /// World-to-view translation: `p_view = rotation * p_world + translation`.
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub mode: Projection,
    pub near: f64,
}

impl Frame {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        mode: Projection,
    ) -> Result<Self> {
        let frame = Frame { rotation, translation, fx, fy, cx, cy, width, height, mode, near: DEFAULT_NEAR };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(alloc::format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(alloc::format!("empty frame {}x{}", self.width, self.height)));
        }
        if !self.rotation.is_finite() || !self.translation.norm().is_finite() {
            return Err(Error::Config("non-finite pose".into()));
        }
        Ok(())
    }

    /// Builds a frame from a camera-to-world rotation (view axes as columns)
    /// and the camera center.
    #[allow(clippy::too_many_arguments)]
    pub fn from_camera_to_world(
        cam_to_world: Mat3,
        center: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        mode: Projection,
    ) -> Result<Self> {
        let rotation = cam_to_world.transpose();
        let translation = -rotation.mul_vec(center);
        Frame::new(rotation, translation, fx, fy, cx, cy, width, height, mode)
    }

    /// Perspective frame at `eye` looking at `target`; `up` is a world hint.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: u32, height: u32) -> Result<Self> {
        let fy = 0.5 * height as f64 / crate::math::tan(0.5 * fov_y);
        let (rot, center) = look_at_rotation(eye, target, up);
        Frame::from_camera_to_world(rot, center, fy, fy, 0.5 * width as f64, 0.5 * height as f64, width, height, Projection::Perspective)
    }

    #[inline]
    pub fn to_view(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Camera center in world space (meaningful for perspective frames).
    pub fn center(&self) -> Vec3 {
        -self.rotation.tmul_vec(self.translation)
    }

    /// Viewing axis (`+z` of view space) in world space.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2)
    }

    /// Unit direction from `p` toward the viewer.
    pub fn direction_to_viewer(&self, p: Vec3) -> Vec3 {
        match self.mode {
            Projection::Perspective => (self.center() - p).normalized(),
            Projection::Orthographic => -self.forward(),
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// The same camera after the world is mapped through `t.normalize`.
    pub fn normalized(&self, t: &SceneBounds) -> Frame {
        let center = t.normalize(self.center());
        Frame { translation: -self.rotation.mul_vec(center), ..*self }
    }

    /// Same pose and projection at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Frame {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Frame { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy, width, height, ..*self }
    }
}

/// Bounding sphere of the scene in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds {
    pub center: Vec3,
    pub radius: f64,
}

impl SceneBounds {
    pub const UNIT: SceneBounds = SceneBounds { center: Vec3::ZERO, radius: 1.0 };

    /// Maps `p` into roughly `[-1, 1]³`.
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        (p - self.center) * (1.0 / self.radius)
    }

    /// This sphere expressed in the space normalized by `t`.
    pub fn normalized_by(&self, t: &SceneBounds) -> SceneBounds {
        SceneBounds { center: t.normalize(self.center), radius: self.radius / t.radius }
    }

    /// Sphere centered at the centroid that contains every point.
    pub fn enclosing(points: &[Vec3]) -> Option<SceneBounds> {
        if points.is_empty() {
            return None;
        }
        let mut c = Vec3::ZERO;
        for p in points {
            c += *p;
        }
        let c = c * (1.0 / points.len() as f64);
        let r = points.iter().map(|p| (*p - c).norm()).fold(0.0, f64::max);
        Some(SceneBounds { center: c, radius: r })
    }
}

impl Default for SceneBounds {
    fn default() -> Self {
        SceneBounds::UNIT
    }
}

/// Camera-to-world rotation (columns `x`, `y`, `z` of view space) for a
/// camera at `eye` looking at `target`, plus the eye itself.
pub fn look_at_rotation(eye: Vec3, target: Vec3, up: Vec3) -> (Mat3, Vec3) {
    let z = (target - eye).normalized();
    let mut x = (-up).cross(z);
    if x.norm() < 1e-9 {
        // up parallel to the view axis
        let alt = if z.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
        x = alt.cross(z);
    }
    let x = x.normalized();
    let y = z.cross(x);
    (Mat3::from_cols(x, y, z), eye)
}
