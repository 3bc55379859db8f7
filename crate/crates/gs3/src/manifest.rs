//! Dataset manifests: a NeRF-style JSON file with one light per frame.
//!
//! ```json
//! {
//!   "intrinsics": {"fx": 106.7, "fy": 106.7, "cx": 32, "cy": 32, "width": 64, "height": 64},
//!   "frames": [
//!     {"image_path": "images/000.png",
//!      "camera_to_world": [[1,0,0,0],[0,1,0,0],[0,0,1,3],[0,0,0,1]],
//!      "light": {"kind": "point", "position": [0, 3, 0], "intensity": [10, 10, 10]}}
//!   ]
//! }
//! ```
//!
//! Poses default to the OpenGL/NeRF camera convention (`-z` forward, `+y`
//! up); set `"convention": "opencv"` for `+z` forward, `+y` down. Optional
//! fields: `scene_scale` (radius used for normalization), `scene_bounds`
//! (`{"center": [..], "radius": r}` bounding the geometry) and `seed_points`.

use std::path::{Path, PathBuf};

use gs3_core::math::{Mat3, Vec3};
use gs3_core::{Dataset, Frame, LightDescriptor, Projection, SceneBounds, TrainView};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{IoError, IoResult};
use crate::image_io::load_image;

/// Orthonormality tolerance for pose rotations.
pub const RIGID_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseConvention {
    #[default]
    OpenGl,
    OpenCv,
}

/// 4x4 row-major matrix, written as nested rows; a flat list of 16 is also accepted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "MatrixRepr", into = "MatrixRepr")]
pub struct Pose(pub [[f64; 4]; 4]);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixRepr {
    Rows([[f64; 4]; 4]),
    Flat([f64; 16]),
}

impl From<MatrixRepr> for Pose {
    fn from(m: MatrixRepr) -> Self {
        match m {
            MatrixRepr::Rows(r) => Pose(r),
            MatrixRepr::Flat(f) => Pose(std::array::from_fn(|i| std::array::from_fn(|j| f[4 * i + j]))),
        }
    }
}

impl From<Pose> for MatrixRepr {
    fn from(p: Pose) -> Self {
        MatrixRepr::Rows(p.0)
    }
}

impl Pose {
    pub fn rotation(&self) -> Mat3 {
        Mat3(std::array::from_fn(|i| std::array::from_fn(|j| self.0[i][j])))
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.0[0][3], self.0[1][3], self.0[2][3])
    }

    /// Checks the last row and that the rotation is orthonormal and right-handed.
    pub fn validate(&self) -> Result<(), String> {
        if self.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err("camera_to_world has non-finite entries".into());
        }
        if self.0[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(format!("camera_to_world last row must be [0, 0, 0, 1], got {:?}", self.0[3]));
        }
        let r = self.rotation();
        let rtr = r.transpose().mul(&r);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr.0[i][j] - want).abs() > RIGID_TOLERANCE {
                    return Err(format!("camera_to_world rotation is not orthonormal (RᵀR[{i}][{j}] = {:.6})", rtr.0[i][j]));
                }
            }
        }
        if r.det() < 0.0 {
            return Err("camera_to_world rotation is a reflection (det < 0)".into());
        }
        Ok(())
    }

    /// Camera frame with the given intrinsics.
    pub fn to_frame(&self, convention: PoseConvention, k: &Intrinsics) -> gs3_core::Result<Frame> {
        let r = self.rotation();
        let cols = match convention {
            PoseConvention::OpenCv => r,
            PoseConvention::OpenGl => Mat3::from_cols(r.col(0), -r.col(1), -r.col(2)),
        };
        Frame::from_camera_to_world(cols, self.translation(), k.fx, k.fy, k.cx, k.cy, k.width, k.height, Projection::Perspective)
    }

    pub fn from_frame(frame: &Frame, convention: PoseConvention) -> Pose {
        let r = frame.rotation.transpose();
        let r = match convention {
            PoseConvention::OpenCv => r,
            PoseConvention::OpenGl => Mat3::from_cols(r.col(0), -r.col(1), -r.col(2)),
        };
        let c = frame.center();
        let t = [c.x, c.y, c.z];
        Pose(std::array::from_fn(|i| if i == 3 { [0.0, 0.0, 0.0, 1.0] } else { [r.0[i][0], r.0[i][1], r.0[i][2], t[i]] }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub image_path: String,
    pub camera_to_world: Pose,
    pub light: LightDescriptor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsSpec {
    pub center: [f64; 3],
    pub radius: f64,
}

impl From<SceneBounds> for BoundsSpec {
    fn from(b: SceneBounds) -> Self {
        BoundsSpec { center: b.center.to_array(), radius: b.radius }
    }
}

impl From<BoundsSpec> for SceneBounds {
    fn from(b: BoundsSpec) -> Self {
        SceneBounds { center: Vec3::new(b.center[0], b.center[1], b.center[2]), radius: b.radius }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub convention: PoseConvention,
    pub frames: Vec<ManifestFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_bounds: Option<BoundsSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed_points: Vec<[f64; 3]>,
}

/// Manifest mapped into normalized scene units.
#[derive(Clone, Debug)]
pub struct NormalizedScene {
    /// Maps source units to normalized ones (`(p - center) / radius`).
    pub transform: SceneBounds,
    pub cameras: Vec<Frame>,
    pub lights: Vec<LightDescriptor>,
    pub bounds: SceneBounds,
    pub seed_points: Vec<Vec3>,
}

fn parse_frame(index: usize, v: Value) -> IoResult<ManifestFrame> {
    let f: ManifestFrame = serde_json::from_value(v).map_err(|e| IoError::Frame { index, message: e.to_string() })?;
    f.camera_to_world.validate().map_err(|message| IoError::Frame { index, message })?;
    let light = f.light.validated().map_err(|e| IoError::Frame { index, message: e.to_string() })?;
    Ok(ManifestFrame { light, ..f })
}

impl DatasetManifest {
    /// Parses and validates manifest JSON. Errors in a frame name its index.
    pub fn from_json(text: &str) -> IoResult<Self> {
        let mut root: Value = serde_json::from_str(text)?;
        let frames = match root.get_mut("frames").map(Value::take) {
            Some(Value::Array(a)) => a,
            Some(_) => return Err(IoError::Manifest("\"frames\" must be an array".into())),
            None => return Err(IoError::Manifest("missing field \"frames\"".into())),
        };
        root.as_object_mut().expect("object root").insert("frames".into(), Value::Array(vec![]));
        let mut m: DatasetManifest = serde_json::from_value(root).map_err(|e| IoError::Manifest(e.to_string()))?;
        m.frames = frames.into_iter().enumerate().map(|(i, v)| parse_frame(i, v)).collect::<IoResult<_>>()?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> IoResult<()> {
        if self.frames.is_empty() {
            return Err(IoError::Manifest("manifest has no frames".into()));
        }
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) || k.width == 0 || k.height == 0 {
            return Err(IoError::Manifest(format!("invalid intrinsics {k:?}")));
        }
        if let Some(s) = self.scene_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(IoError::Manifest(format!("scene_scale must be positive, got {s}")));
            }
        }
        if let Some(b) = self.scene_bounds {
            if !(b.radius > 0.0) {
                return Err(IoError::Manifest(format!("scene_bounds radius must be positive, got {}", b.radius)));
            }
        }
        for (index, f) in self.frames.iter().enumerate() {
            f.camera_to_world.validate().map_err(|message| IoError::Frame { index, message })?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Sphere around camera centers and point lights (the `scene_scale`
    /// hint, when present, replaces the radius).
    pub fn normalization(&self) -> SceneBounds {
        let pts: Vec<Vec3> = self
            .frames
            .iter()
            .flat_map(|f| [Some(f.camera_to_world.translation()), f.light.position()])
            .flatten()
            .collect();
        let mut t = SceneBounds::enclosing(&pts).expect("at least one frame");
        if let Some(s) = self.scene_scale {
            t.radius = s;
        }
        if !(t.radius > 0.0) {
            t.radius = 1.0;
        }
        t
    }

    pub fn normalized(&self) -> IoResult<NormalizedScene> {
        let t = self.normalization();
        let cameras = self
            .frames
            .iter()
            .enumerate()
            .map(|(index, f)| {
                f.camera_to_world
                    .to_frame(self.convention, &self.intrinsics)
                    .map(|c| c.normalized(&t))
                    .map_err(|e| IoError::Frame { index, message: e.to_string() })
            })
            .collect::<IoResult<Vec<_>>>()?;
        let lights: Vec<LightDescriptor> = self.frames.iter().map(|f| f.light.normalized(&t)).collect();
        let bounds = match self.scene_bounds {
            Some(b) => SceneBounds::from(b).normalized_by(&t),
            None => {
                let nearest = cameras
                    .iter()
                    .map(|c| c.center().norm())
                    .chain(lights.iter().filter_map(|l| l.position()).map(|p| p.norm()))
                    .fold(f64::INFINITY, f64::min);
                SceneBounds { center: Vec3::ZERO, radius: nearest / 1.1 }
            }
        };
        let seed_points = self.seed_points.iter().map(|p| t.normalize(Vec3::new(p[0], p[1], p[2]))).collect();
        Ok(NormalizedScene { transform: t, cameras, lights, bounds, seed_points })
    }

    /// Loads every image (paths relative to `base`) into a normalized dataset.
    pub fn load_dataset(&self, base: &Path) -> IoResult<Dataset> {
        let scene = self.normalized()?;
        let mut views = Vec::with_capacity(self.frames.len());
        for (index, ((f, camera), light)) in self.frames.iter().zip(scene.cameras).zip(scene.lights).enumerate() {
            let path = base.join(&f.image_path);
            let target = load_image(&path).map_err(|e| IoError::Frame { index, message: e.to_string() })?;
            if target.width != camera.width || target.height != camera.height {
                return Err(IoError::Frame {
                    index,
                    message: format!(
                        "{} is {}x{}, intrinsics say {}x{}",
                        path.display(),
                        target.width,
                        target.height,
                        camera.width,
                        camera.height
                    ),
                });
            }
            views.push(TrainView { camera, light, target });
        }
        Ok(Dataset { views, bounds: scene.bounds, seed_points: scene.seed_points })
    }
}

pub fn load_manifest(path: &Path) -> IoResult<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    DatasetManifest::from_json(&text).map_err(|e| match e {
        IoError::Json(j) => IoError::format(path, j.to_string()),
        other => other,
    })
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> IoResult<()> {
    std::fs::write(path, m.to_json()).map_err(|e| IoError::io(path, e))
}

/// Loads the manifest at `path` and its images.
pub fn load_dataset(path: &Path) -> IoResult<(DatasetManifest, Dataset)> {
    let m = load_manifest(path)?;
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let d = m.load_dataset(&base)?;
    Ok((m, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "intrinsics": {"fx": 50, "fy": 50, "cx": 16, "cy": 16, "width": 32, "height": 32},
        "frames": [{
            "image_path": "a.png",
            "camera_to_world": [[1,0,0,0],[0,1,0,0],[0,0,1,3],[0,0,0,1]],
            "light": {"kind": "point", "position": [0, 3, 0], "intensity": [2, 2, 2]}
        }]
    }"#;

    #[test]
    fn minimal_manifest_parses() {
        let m = DatasetManifest::from_json(MINIMAL).unwrap();
        assert_eq!(m.frames.len(), 1);
        assert_eq!(m.convention, PoseConvention::OpenGl);
        assert_eq!(m.frames[0].camera_to_world.translation(), Vec3::new(0.0, 0.0, 3.0));
    }

    #[test]
    fn missing_light_names_the_frame() {
        let text = MINIMAL.replace(r#""light": {"kind": "point", "position": [0, 3, 0], "intensity": [2, 2, 2]}"#, r#""note": 1"#);
        let err = DatasetManifest::from_json(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frame 0") && msg.contains("light"), "{msg}");
    }

    #[test]
    fn non_rigid_pose_is_rejected() {
        let text = MINIMAL.replace("[[1,0,0,0],[0,1,0,0]", "[[1.1,0,0,0],[0,1,0,0]");
        let msg = DatasetManifest::from_json(&text).unwrap_err().to_string();
        assert!(msg.contains("frame 0") && msg.contains("orthonormal"), "{msg}");
        let text = MINIMAL.replace("[[1,0,0,0],[0,1,0,0]", "[[-1,0,0,0],[0,1,0,0]");
        assert!(DatasetManifest::from_json(&text).unwrap_err().to_string().contains("reflection"));
        let text = MINIMAL.replace(r#""frames": ["#, r#""frames": [], "x": ["#);
        assert!(DatasetManifest::from_json(&text).is_err());
    }

    #[test]
    fn flat_matrices_are_accepted() {
        let text = MINIMAL.replace("[[1,0,0,0],[0,1,0,0],[0,0,1,3],[0,0,0,1]]", "[1,0,0,0, 0,1,0,0, 0,0,1,3, 0,0,0,1]");
        let m = DatasetManifest::from_json(&text).unwrap();
        assert_eq!(m, DatasetManifest::from_json(MINIMAL).unwrap());
    }

    #[test]
    fn opengl_camera_looks_down_minus_z() {
        let m = DatasetManifest::from_json(MINIMAL).unwrap();
        let f = m.frames[0].camera_to_world.to_frame(m.convention, &m.intrinsics).unwrap();
        assert!((f.forward() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        // world +y appears toward the top of the image
        assert!(f.to_view(Vec3::Y).y < 0.0);
        let back = Pose::from_frame(&f, PoseConvention::OpenGl);
        assert_eq!(back, m.frames[0].camera_to_world);
    }

    #[test]
    fn normalization_is_idempotent() {
        let m = DatasetManifest::from_json(MINIMAL).unwrap();
        let n = m.normalized().unwrap();
        let renorm = DatasetManifest {
            frames: vec![ManifestFrame {
                camera_to_world: Pose::from_frame(&n.cameras[0], PoseConvention::OpenGl),
                light: n.lights[0],
                ..m.frames[0].clone()
            }],
            ..m.clone()
        };
        let t = renorm.normalization();
        assert!(t.center.norm() < 1e-9 && (t.radius - 1.0).abs() < 1e-9, "{t:?}");
    }
}
