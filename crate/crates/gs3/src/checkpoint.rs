//! Binary checkpoints.
//!
//! Layout (little-endian): magic `GS3C`, `u32` version, `u32` N, `u32` J,
//! then `f32` arrays in this order:
//!
//! | array            | length |
//! |------------------|--------|
//! | means            | 3N     |
//! | scale_log        | 3N     |
//! | rotation         | 4N     |
//! | opacity_logit    | N      |
//! | shading frame    | 4N     |
//! | rho_d (raw)      | 3N     |
//! | rho_s (raw)      | 3N     |
//! | alpha (raw)      | JN     |
//! | latent           | 6N     |
//! | basis rotations  | 4J     |
//! | basis log sigmas | 3J     |
//! | bounds           | 4      |
//! | Φ weights        | 4129   |
//! | Ψ weights        | 41219  |
//!
//! followed by `u32` iteration, `u32` byte length and a UTF-8 JSON object
//! `{"config": TrainConfig, "normalization": {"center", "radius"} | null}`.

use std::path::Path;

use gs3_core::math::Vec3;
use gs3_core::model::CloudField;
use gs3_core::neural::{Mlp, OutputActivation, RESIDUAL_MLP_WIDTHS, SHADOW_MLP_WIDTHS};
use gs3_core::{GaussianCloud, SceneBounds, SceneModel, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, IoResult};
use crate::manifest::BoundsSpec;

pub const MAGIC: &[u8; 4] = b"GS3C";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;

/// Everything stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(skip)]
    pub iteration: u32,
    pub config: TrainConfig,
    /// Source-to-normalized scene transform of the training data, if known.
    pub normalization: Option<BoundsSpec>,
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(model: &SceneModel, meta: &CheckpointMeta) -> Vec<u8> {
    let c = &model.cloud;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, c.len() as u32, c.basis_count as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in CloudField::ALL {
        push_f32(&mut out, c.field(f));
    }
    push_f32(&mut out, &model.basis_rot);
    push_f32(&mut out, &model.basis_sigma_log);
    let b = model.bounds;
    push_f32(&mut out, &[b.center.x, b.center.y, b.center.z, b.radius]);
    push_f32(&mut out, &model.phi.params);
    push_f32(&mut out, &model.psi.params);
    let json = serde_json::to_vec(meta).expect("config serializes");
    out.extend_from_slice(&meta.iteration.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> IoResult<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(IoError::Truncated(format!("checkpoint ends inside {what} (offset {})", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> IoResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> IoResult<Vec<f64>> {
        Ok(self.take(4 * n, what)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
    }
}

pub fn decode(bytes: &[u8]) -> IoResult<(SceneModel, CheckpointMeta)> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(IoError::Magic { expected: "GS3C".into(), found: String::from_utf8_lossy(magic).into_owned() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(IoError::Version { found: version, expected: VERSION });
    }
    let n = r.u32("header")? as usize;
    let j = r.u32("header")? as usize;
    let mut cloud = GaussianCloud::empty(j);
    for f in CloudField::ALL {
        let w = cloud.width(f);
        *cloud.field_mut(f) = r.f32s(w * n, &format!("{f:?}"))?;
    }
    let basis_rot = r.f32s(4 * j, "basis rotations")?;
    let basis_sigma_log = r.f32s(3 * j, "basis sigmas")?;
    let b = r.f32s(4, "bounds")?;
    let phi_len = Mlp::param_count(&SHADOW_MLP_WIDTHS);
    let psi_len = Mlp::param_count(&RESIDUAL_MLP_WIDTHS);
    let phi = Mlp::from_params(&SHADOW_MLP_WIDTHS, OutputActivation::Sigmoid, r.f32s(phi_len, "shadow MLP")?)?;
    let psi = Mlp::from_params(&RESIDUAL_MLP_WIDTHS, OutputActivation::Sigmoid, r.f32s(psi_len, "residual MLP")?)?;
    let iteration = r.u32("iteration")?;
    let json_len = r.u32("config length")? as usize;
    let json = r.take(json_len, "config")?;
    if r.at != bytes.len() {
        return Err(IoError::Truncated(format!("{} trailing bytes after the config", bytes.len() - r.at)));
    }
    let mut meta: CheckpointMeta = serde_json::from_slice(json)?;
    meta.iteration = iteration;
    let model = SceneModel {
        cloud,
        basis_rot,
        basis_sigma_log,
        bounds: SceneBounds { center: Vec3::new(b[0], b[1], b[2]), radius: b[3] },
        phi,
        psi,
    };
    model.validate()?;
    Ok((model, meta))
}

pub fn save_checkpoint(model: &SceneModel, meta: &CheckpointMeta, path: &Path) -> IoResult<()> {
    std::fs::write(path, encode(model, meta)).map_err(|e| IoError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> IoResult<(SceneModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(n: usize, j: usize) -> SceneModel {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let seeds = SceneModel::uniform_seeds(&SceneBounds::UNIT, n, &mut rng);
        SceneModel::initialize(&seeds, SceneBounds::UNIT, j, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(100, 8);
        let meta = CheckpointMeta { iteration: 1234, config: TrainConfig { seed: 9, ..TrainConfig::default() }, normalization: None };
        let (back, meta2) = decode(&encode(&m, &meta)).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
    }

    #[test]
    fn size_follows_the_layout() {
        let (n, j) = (100usize, 8usize);
        let meta = CheckpointMeta::default();
        let bytes = encode(&model(n, j), &meta);
        let json = serde_json::to_vec(&meta).unwrap().len();
        let per_gaussian = 3 + 3 + 4 + 1 + 4 + 3 + 3 + j + 6;
        let floats = n * per_gaussian + 4 * j + 3 * j + 4 + 4129 + 41219;
        assert_eq!(bytes.len(), 16 + 4 * floats + 8 + json);
    }

    #[test]
    fn corrupted_files_fail_loudly() {
        let bytes = encode(&model(5, 2), &CheckpointMeta::default());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(IoError::Magic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(IoError::Version { found: 2, expected: 1 })));
        assert!(matches!(decode(&bytes[..bytes.len() / 2]), Err(IoError::Truncated(_))));
    }
}
