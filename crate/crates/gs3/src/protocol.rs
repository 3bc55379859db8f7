//! Messages exchanged with the render service.
//!
//! Clients send JSON text:
//!
//! ```json
//! {"type": "state", "seq": 7,
//!  "camera": {"camera_to_world": [[1,0,0,0],[0,1,0,0],[0,0,1,3],[0,0,0,1]], "fov_y": 40},
//!  "light": {"kind": "point", "position": [0, 3, 0], "intensity": [10, 10, 10]},
//!  "toggles": {"phi": true, "psi": true, "shadow": true},
//!  "quality": {"width": 256, "height": 256}}
//! {"type": "ping", "seq": 3}
//! ```
//!
//! `light` is a point/directional light or `{"kind": "env", "map": "white",
//! "samples": 64, "intensity": 1}`. Optional `"format": "f32"` and
//! `"exposure"` fields apply per state. Poses and lights use the units of
//! the training manifest.
//!
//! The server answers pings with `{"type": "pong", "seq": n}`, bad input
//! with `{"type": "error", "message": ...}` and renders as binary frames:
//! `GS3F`, `u32` sequence, `u32` width, `u32` height (little-endian), then
//! RGB rows, either 8-bit `round(clamp(v, 0, 1) * 255)` or `f32` linear.

use std::collections::HashMap;

use gs3_core::math::{self, Vec3};
use gs3_core::{EnvironmentMap, Frame, ImageBuffer, LightDescriptor, Lighting, RenderRequest, RenderToggles, SceneBounds};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::manifest::{Intrinsics, Pose, PoseConvention};

pub const FRAME_MAGIC: &[u8; 4] = b"GS3F";
pub const FRAME_HEADER_BYTES: usize = 16;
pub const DEFAULT_RESOLUTION: u32 = 256;
pub const MAX_RESOLUTION: u32 = 4096;
pub const DEFAULT_FOV_Y_DEGREES: f64 = 40.0;
pub const MAX_ENV_SAMPLES: usize = 4096;

fn default_fov() -> f64 {
    DEFAULT_FOV_Y_DEGREES
}

/// Camera pose plus optional pinhole intrinsics. Without `fx`/`fy` the
/// focal length follows from `fov_y` (degrees, vertical).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub camera_to_world: Pose,
    #[serde(default)]
    pub convention: PoseConvention,
    #[serde(default = "default_fov")]
    pub fov_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    /// Resolution the intrinsics refer to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl CameraSpec {
    pub fn look_at(eye: Vec3, target: Vec3, fov_y: f64) -> CameraSpec {
        let (rot, center) = gs3_core::frame::look_at_rotation(eye, target, Vec3::Y);
        let f = Frame::from_camera_to_world(rot, center, 1.0, 1.0, 0.5, 0.5, 1, 1, gs3_core::Projection::Perspective)
            .expect("unit frame is valid");
        CameraSpec {
            camera_to_world: Pose::from_frame(&f, PoseConvention::OpenGl),
            convention: PoseConvention::OpenGl,
            fov_y,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
            width: None,
            height: None,
        }
    }

    /// Frame at `size`, or at the camera's own resolution when `size` is `None`.
    pub fn to_frame(&self, size: Option<(u32, u32)>) -> Result<Frame, String> {
        let (w0, h0) = match (self.width, self.height) {
            (Some(w), Some(h)) => (w, h),
            (None, None) => size.unwrap_or((DEFAULT_RESOLUTION, DEFAULT_RESOLUTION)),
            _ => return Err("camera width and height must be given together".into()),
        };
        let (w, h) = size.unwrap_or((w0, h0));
        for v in [w0, h0, w, h] {
            if v == 0 || v > MAX_RESOLUTION {
                return Err(format!("resolution must be in 1..={MAX_RESOLUTION}, got {w}x{h}"));
            }
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return Err(format!("fov_y must be in (0, 180) degrees, got {}", self.fov_y));
        }
        let from_fov = 0.5 * h0 as f64 / math::tan(0.5 * self.fov_y.to_radians());
        let fy = self.fy.or(self.fx).unwrap_or(from_fov);
        let k = Intrinsics {
            fx: self.fx.unwrap_or(fy),
            fy,
            cx: self.cx.unwrap_or(0.5 * w0 as f64),
            cy: self.cy.unwrap_or(0.5 * h0 as f64),
            width: w0,
            height: h0,
        };
        self.camera_to_world.validate()?;
        let frame = self.camera_to_world.to_frame(self.convention, &k).map_err(|e| e.to_string())?;
        Ok(frame.resized(w, h))
    }
}

fn one() -> f64 {
    1.0
}

fn default_map() -> String {
    "white".into()
}

fn default_samples() -> usize {
    gs3_core::relight::DEFAULT_ENV_SAMPLES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    #[serde(default = "default_map")]
    pub map: String,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Scalar multiplier on the map.
    #[serde(default = "one")]
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LightSpec {
    Light(LightDescriptor),
    Environment(EnvSpec),
}

impl<'de> Deserialize<'de> for LightSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        if v.get("kind").and_then(Value::as_str) == Some("env") {
            serde_json::from_value(v).map(LightSpec::Environment).map_err(D::Error::custom)
        } else {
            serde_json::from_value(v).map(LightSpec::Light).map_err(D::Error::custom)
        }
    }
}

impl Serialize for LightSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LightSpec::Light(l) => l.serialize(s),
            LightSpec::Environment(e) => {
                let mut v = serde_json::to_value(e).map_err(serde::ser::Error::custom)?;
                v["kind"] = "env".into();
                v.serialize(s)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quality {
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    #[default]
    Rgb8,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u32>,
    pub camera: CameraSpec,
    pub light: LightSpec,
    #[serde(default)]
    pub toggles: RenderToggles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<Quality>,
    #[serde(default)]
    pub format: FrameFormat,
    #[serde(default = "one")]
    pub exposure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    State(Box<StateMessage>),
    Ping {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u32>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Pong {
        seq: u32,
    },
    Error {
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u32>,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

pub fn parse_client_message(text: &str) -> Result<ClientMessage, String> {
    serde_json::from_str(text).map_err(|e| format!("invalid message: {e}"))
}

/// What a session needs to turn a state message into a render request.
#[derive(Clone, Debug)]
pub struct SceneContext {
    /// Maps manifest units to the model's normalized units.
    pub normalization: SceneBounds,
    pub env_maps: HashMap<String, EnvironmentMap>,
}

impl Default for SceneContext {
    fn default() -> Self {
        SceneContext::new(SceneBounds::UNIT)
    }
}

impl SceneContext {
    /// Context with the built-in `"white"` environment (unit radiance).
    pub fn new(normalization: SceneBounds) -> Self {
        let mut env_maps = HashMap::new();
        env_maps.insert("white".to_string(), EnvironmentMap::constant(16, [1.0; 3]));
        SceneContext { normalization, env_maps }
    }

    pub fn lighting(&self, light: &LightSpec) -> Result<Lighting, String> {
        match light {
            LightSpec::Light(l) => {
                let l = l.validated().map_err(|e| e.to_string())?;
                Ok(Lighting::Light(l.normalized(&self.normalization)))
            }
            LightSpec::Environment(e) => {
                let map = self.env_maps.get(&e.map).ok_or_else(|| {
                    let mut names: Vec<&str> = self.env_maps.keys().map(String::as_str).collect();
                    names.sort();
                    format!("unknown environment map {:?} (available: {})", e.map, names.join(", "))
                })?;
                if e.samples == 0 || e.samples > MAX_ENV_SAMPLES {
                    return Err(format!("samples must be in 1..={MAX_ENV_SAMPLES}, got {}", e.samples));
                }
                if !(e.intensity.is_finite() && e.intensity >= 0.0) {
                    return Err(format!("environment intensity must be finite and >= 0, got {}", e.intensity));
                }
                let map = if e.intensity == 1.0 { map.clone() } else { map.scaled(e.intensity) };
                Ok(Lighting::Environment { map, samples: e.samples })
            }
        }
    }

    pub fn request(&self, state: &StateMessage) -> Result<RenderRequest, String> {
        let size = state.quality.map(|q| (q.width, q.height));
        let camera = state.camera.to_frame(size)?.normalized(&self.normalization);
        if !(state.exposure.is_finite() && state.exposure >= 0.0) {
            return Err(format!("exposure must be finite and >= 0, got {}", state.exposure));
        }
        Ok(RenderRequest { camera, lighting: self.lighting(&state.light)?, toggles: state.toggles.into(), exposure: state.exposure })
    }
}

pub fn encode_frame(seq: u32, img: &ImageBuffer, format: FrameFormat) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + img.pixel_count() * 12);
    out.extend_from_slice(FRAME_MAGIC);
    for v in [seq, img.width, img.height] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match format {
        FrameFormat::Rgb8 => out.extend_from_slice(&img.to_rgb8()),
        FrameFormat::F32 => {
            let c = img.channels as usize;
            for px in img.data.chunks_exact(c) {
                for k in 0..3 {
                    let v = if c == 1 { px[0] } else { px[k] };
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameHeader {
    pub seq: u32,
    pub width: u32,
    pub height: u32,
}

/// Splits a frame into header and payload; the payload length decides the format.
pub fn decode_frame(bytes: &[u8]) -> Result<(FrameHeader, FrameFormat, &[u8]), String> {
    if bytes.len() < FRAME_HEADER_BYTES {
        return Err(format!("frame of {} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != FRAME_MAGIC {
        return Err(format!("bad frame magic {:?}", &bytes[..4]));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let h = FrameHeader { seq: u(4), width: u(8), height: u(12) };
    let payload = &bytes[FRAME_HEADER_BYTES..];
    let px = h.width as usize * h.height as usize * 3;
    let format = if payload.len() == px {
        FrameFormat::Rgb8
    } else if payload.len() == 4 * px {
        FrameFormat::F32
    } else {
        return Err(format!("payload of {} bytes does not fit {}x{}", payload.len(), h.width, h.height));
    };
    Ok((h, format, payload))
}
