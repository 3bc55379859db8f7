//! Relightable Gaussian splatting engine core.
//!
//! Geometry is a cloud of anisotropic 3D Gaussians. Each one carries a
//! shading frame, diffuse/specular albedos and weights over a small set of
//! shared angular Gaussian lobes, plus a latent code consumed by two small
//! MLPs: one refines per-Gaussian light visibility obtained by splatting the
//! cloud toward the light, the other predicts a view-dependent residual.
//! A frame is rendered as `shading * shadow + residual`, each term produced
//! by alpha-compositing per-Gaussian payloads in camera space.
//!
//! The crate is `no_std` + `alloc`. Enable `parallel` for tile-parallel
//! rasterization backed by rayon.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod appearance;
pub mod error;
pub mod frame;
pub mod gradcheck;
pub mod image;
pub mod math;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod oracle;
pub mod pipeline;
pub mod relight;
pub mod render;
pub mod shadow;
pub mod toy;
pub mod train;

pub use appearance::{AngularGaussian, AngularGaussianBasis, Rotation, SpatialGaussian};
pub use error::{Error, Result};
pub use frame::{Frame, Projection, SceneBounds};
pub use image::ImageBuffer;
pub use model::{CloudField, GaussianCloud, SceneModel};
pub use render::{Exec, GaussianGeom, RenderSettings, Splat2D};
pub use shadow::{Falloff, LightDescriptor, LightKind};
pub use pipeline::{compose_final, PipelineOptions, Toggles};
pub use relight::{render_env, render_frame, EnvironmentMap, Lighting, RenderRequest, RenderToggles};
pub use toy::{generate_toy_dataset, ToyConfig, ToyDataset, ToyKind};
pub use train::{adam_step, compute_loss, lr_schedule, AdamState, Dataset, LossRecord, TrainConfig, TrainView, Trainer};
