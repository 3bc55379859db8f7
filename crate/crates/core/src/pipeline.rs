//! One view under one light: shading, shadow and residual images from a
//! single seven-channel composite, their deferred combination, and the
//! gradient of a loss on the final image w.r.t. every model parameter.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::appearance::{reflectance, reflectance_backward, AngularGaussianBasis, BasisGrad, HALF_VECTOR_EPS};
use crate::error::{Error, Result};
use crate::frame::{Frame, Projection};
use crate::image::ImageBuffer;
use crate::math::Vec3;
use crate::model::{GaussianCloud, SceneModel};
use crate::neural::{
    residual_mlp_input, residual_mlp_input_backward, shadow_mlp_input, shadow_mlp_input_backward, MlpTrace, LATENT_DIM,
};
use crate::render::{Exec, GaussianGeom, GeomGrad, Rasterization, RenderOutput, RenderSettings};
use crate::shadow::{shadow_splat, shadow_splat_backward, LightDescriptor, ShadowPass, ShadowSettings};

/// Payload layout of the combined composite.
pub const CHANNELS: usize = 7;
const SHADING: usize = 0;
const SHADOW: usize = 3;
const RESIDUAL: usize = 4;
const BACKGROUND: [f64; CHANNELS] = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub shadow_splat: bool,
    pub phi: bool,
    pub psi: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { shadow_splat: true, phi: true, psi: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineOptions {
    pub toggles: Toggles,
    /// `false` masks the specular term (first training stage).
    pub specular: bool,
    pub raster: RenderSettings,
    pub shadow: ShadowSettings,
    /// Light-view resolution; defaults to the camera resolution.
    pub shadow_resolution: Option<(u32, u32)>,
    pub exec: Exec,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            toggles: Toggles::default(),
            specular: true,
            raster: RenderSettings::default(),
            shadow: ShadowSettings::default(),
            shadow_resolution: None,
            exec: Exec::Serial,
        }
    }
}

impl PipelineOptions {
    /// Same raster settings for the camera and the light view.
    pub fn with_raster(mut self, raster: RenderSettings) -> Self {
        self.raster = raster;
        self.shadow.raster = raster;
        self
    }
}

/// `shading ⊙ shadow + residual`; the shadow image may have one channel.
pub fn compose_final(shading: &ImageBuffer, shadow: &ImageBuffer, residual: &ImageBuffer) -> Result<ImageBuffer> {
    shading.check_same_shape(residual)?;
    if shadow.width != shading.width || shadow.height != shading.height {
        return Err(Error::shape(shading.pixel_count(), shadow.pixel_count()));
    }
    let c = shading.channels as usize;
    let sc = shadow.channels as usize;
    if sc != 1 && sc != c {
        return Err(Error::shape(c, sc));
    }
    let mut out = ImageBuffer::new(shading.width, shading.height, shading.channels);
    for p in 0..shading.pixel_count() {
        for k in 0..c {
            let s = shadow.data[p * sc + if sc == 1 { 0 } else { k }];
            out.data[p * c + k] = shading.data[p * c + k] * s + residual.data[p * c + k];
        }
    }
    Ok(out)
}

/// The four images of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameImages {
    pub shading: ImageBuffer,
    pub shadow: ImageBuffer,
    pub residual: ImageBuffer,
    pub final_image: ImageBuffer,
}

/// Forward intermediates retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub images: FrameImages,
    pub geoms: Vec<GaussianGeom>,
    pub camera: Rasterization,
    pub composite: RenderOutput,
    pub payload: Vec<f64>,
    /// Gaussians with a camera splat, ascending.
    pub visible: Vec<usize>,
    pub shadow_pass: Option<ShadowPass>,
    /// Raw and refined visibility per Gaussian.
    pub raw_visibility: Vec<f64>,
    pub visibility: Vec<f64>,
    /// Whether the shading term of a visible Gaussian used the specular lobes.
    specular_used: Vec<bool>,
    phi_trace: Option<MlpTrace>,
    psi_trace: Option<MlpTrace>,
    light: LightDescriptor,
    options: PipelineOptions,
    forced_unit_shadow: bool,
}

fn shading_color(
    model: &SceneModel,
    basis: &AngularGaussianBasis,
    i: usize,
    wi: Vec3,
    wo: Vec3,
    specular: bool,
) -> Result<(Vec3, bool)> {
    let g = model.cloud.gaussian(i);
    let frame = g.frame.matrix();
    // a degenerate half vector drops the specular term for this Gaussian
    let use_spec = specular && (frame.tmul_vec(wi) + frame.tmul_vec(wo)).norm() >= HALF_VECTOR_EPS;
    Ok((reflectance(&g, basis, wi, wo, use_spec)?, use_spec))
}

/// Renders all images of one view.
pub fn forward(model: &SceneModel, camera: &Frame, light: &LightDescriptor, options: &PipelineOptions) -> Result<ForwardState> {
    let n = model.cloud.len();
    let geoms = model.cloud.geoms();
    let raster = Rasterization::new(&geoms, camera, &options.raster);
    let mut visible: Vec<usize> = raster.splats.iter().map(|s| s.gaussian_index).collect();
    visible.sort_unstable();
    let basis = model.basis();
    let toggles = options.toggles;

    let shadow_pass = if toggles.shadow_splat {
        let (w, h) = options.shadow_resolution.unwrap_or((camera.width, camera.height));
        Some(shadow_splat(&geoms, light, &model.bounds, w, h, &options.shadow, options.exec)?)
    } else {
        None
    };
    let raw_visibility = match &shadow_pass {
        Some(p) => p.transmittance(),
        None => vec![1.0; n],
    };

    let mut payload = vec![0.0; n * CHANNELS];
    let mut specular_used = vec![false; visible.len()];
    let intensity = light.intensity();
    for (v, &i) in visible.iter().enumerate() {
        let mu = model.cloud.mean(i);
        let (wi, atten) = light.incident(mu);
        let wo = camera.direction_to_viewer(mu);
        let (c, spec) = shading_color(model, &basis, i, wi, wo, options.specular)?;
        specular_used[v] = spec;
        let c = c.mul_elem(intensity) * atten;
        payload[i * CHANNELS + SHADING..i * CHANNELS + SHADING + 3].copy_from_slice(&c.to_array());
    }

    let mut visibility = raw_visibility.clone();
    let phi_trace = if toggles.phi && !visible.is_empty() {
        let width = model.phi.input_width();
        let mut rows = vec![0.0; visible.len() * width];
        for (v, &i) in visible.iter().enumerate() {
            let mu = model.cloud.mean(i);
            let (wi, _) = light.incident(mu);
            shadow_mlp_input(raw_visibility[i], model.bounds.normalize(mu), wi, &latent_of(&model.cloud, i), &mut rows[v * width..(v + 1) * width]);
        }
        let trace = model.phi.forward(&rows, visible.len())?;
        for (v, &i) in visible.iter().enumerate() {
            visibility[i] = trace.output()[v];
        }
        Some(trace)
    } else {
        None
    };
    for &i in &visible {
        payload[i * CHANNELS + SHADOW] = visibility[i];
    }

    let psi_trace = if toggles.psi && !visible.is_empty() {
        let width = model.psi.input_width();
        let mut rows = vec![0.0; visible.len() * width];
        for (v, &i) in visible.iter().enumerate() {
            let mu = model.cloud.mean(i);
            let wo = camera.direction_to_viewer(mu);
            residual_mlp_input(wo, model.bounds.normalize(mu), &latent_of(&model.cloud, i), &mut rows[v * width..(v + 1) * width]);
        }
        let trace = model.psi.forward(&rows, visible.len())?;
        for (v, &i) in visible.iter().enumerate() {
            payload[i * CHANNELS + RESIDUAL..i * CHANNELS + RESIDUAL + 3].copy_from_slice(&trace.output()[3 * v..3 * v + 3]);
        }
        Some(trace)
    } else {
        None
    };

    let composite = raster.render(&payload, CHANNELS, &BACKGROUND, &options.raster, options.exec);
    let (w, h) = (camera.width, camera.height);
    let mut shading = ImageBuffer::new(w, h, 3);
    let mut shadow = ImageBuffer::new(w, h, 1);
    let mut residual = ImageBuffer::new(w, h, 3);
    for p in 0..camera.pixel_count() {
        let src = &composite.image.data[p * CHANNELS..(p + 1) * CHANNELS];
        shading.data[3 * p..3 * p + 3].copy_from_slice(&src[SHADING..SHADING + 3]);
        shadow.data[p] = src[SHADOW];
        residual.data[3 * p..3 * p + 3].copy_from_slice(&src[RESIDUAL..RESIDUAL + 3]);
    }
    let forced_unit_shadow = !toggles.shadow_splat && !toggles.phi;
    if forced_unit_shadow {
        shadow.data.iter_mut().for_each(|v| *v = 1.0);
    }
    let final_image = compose_final(&shading, &shadow, &residual)?;
    Ok(ForwardState {
        images: FrameImages { shading, shadow, residual, final_image },
        geoms,
        camera: raster,
        composite,
        payload,
        visible,
        shadow_pass,
        raw_visibility,
        visibility,
        specular_used,
        phi_trace,
        psi_trace,
        light: *light,
        options: *options,
        forced_unit_shadow,
    })
}

fn latent_of(cloud: &GaussianCloud, i: usize) -> [f64; LATENT_DIM] {
    let mut l = [0.0; LATENT_DIM];
    l.copy_from_slice(&cloud.latent[LATENT_DIM * i..LATENT_DIM * (i + 1)]);
    l
}

/// Gradients with the same layout as [`SceneModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub cloud: GaussianCloud,
    pub basis_rot: Vec<f64>,
    pub basis_sigma_log: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// Per Gaussian: norm of the gradient on its projected camera mean, in
    /// normalized device units (pixels scaled by half the frame size).
    pub screen_grad: Vec<f64>,
    /// Per Gaussian: whether it produced a camera splat.
    pub visible: Vec<bool>,
}

impl ModelGrad {
    pub fn zeros(model: &SceneModel) -> Self {
        let c = &model.cloud;
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        ModelGrad {
            cloud: GaussianCloud {
                basis_count: c.basis_count,
                means: z(&c.means),
                scale_log: z(&c.scale_log),
                rot: z(&c.rot),
                opacity_logit: z(&c.opacity_logit),
                frame: z(&c.frame),
                rho_d: z(&c.rho_d),
                rho_s: z(&c.rho_s),
                alpha: z(&c.alpha),
                latent: z(&c.latent),
            },
            basis_rot: z(&model.basis_rot),
            basis_sigma_log: z(&model.basis_sigma_log),
            phi: z(&model.phi.params),
            psi: z(&model.psi.params),
            screen_grad: vec![0.0; c.len()],
            visible: vec![false; c.len()],
        }
    }

    fn add_geom(&mut self, i: usize, g: &GeomGrad) {
        let c = &mut self.cloud;
        for k in 0..3 {
            c.means[3 * i + k] += g.mu[k];
            c.scale_log[3 * i + k] += g.scale_log[k];
        }
        for k in 0..4 {
            c.rot[4 * i + k] += g.rot_q[k];
        }
        c.opacity_logit[i] += g.opacity_logit;
    }

    fn add_mean(&mut self, i: usize, g: Vec3) {
        for k in 0..3 {
            self.cloud.means[3 * i + k] += g[k];
        }
    }

    fn add_latent(&mut self, i: usize, g: &[f64; LATENT_DIM]) {
        for (dst, v) in self.cloud.latent[LATENT_DIM * i..LATENT_DIM * (i + 1)].iter_mut().zip(g) {
            *dst += v;
        }
    }
}

/// Gradient of `sum(upstream ⊙ final_image)` w.r.t. every model parameter.
pub fn backward(model: &SceneModel, state: &ForwardState, upstream: &ImageBuffer) -> Result<ModelGrad> {
    let imgs = &state.images;
    imgs.final_image.check_same_shape(upstream)?;
    let opts = &state.options;
    let camera = &state.camera.frame;
    let light = &state.light;
    let mut grad = ModelGrad::zeros(model);

    // split the final-image gradient over the three composited images
    let npx = camera.pixel_count();
    let mut up7 = ImageBuffer::new(camera.width, camera.height, CHANNELS as u32);
    for p in 0..npx {
        let g = &upstream.data[3 * p..3 * p + 3];
        let dst = &mut up7.data[p * CHANNELS..(p + 1) * CHANNELS];
        let s = imgs.shadow.data[p];
        let mut d_shadow = 0.0;
        for k in 0..3 {
            dst[SHADING + k] = g[k] * s;
            d_shadow += g[k] * imgs.shading.data[3 * p + k];
            if opts.toggles.psi {
                dst[RESIDUAL + k] = g[k];
            }
        }
        if !state.forced_unit_shadow {
            dst[SHADOW] = d_shadow;
        }
    }
    let splat_grads =
        state.camera.backward(&state.payload, CHANNELS, &BACKGROUND, &opts.raster, &state.composite, &up7, opts.exec);
    for (si, s) in state.camera.splats.iter().enumerate() {
        let i = s.gaussian_index;
        grad.visible[i] = true;
        let m = splat_grads.mean2d[si];
        let nx = m[0] * 0.5 * camera.width as f64;
        let ny = m[1] * 0.5 * camera.height as f64;
        grad.screen_grad[i] = crate::math::sqrt(nx * nx + ny * ny);
    }
    for (i, g) in state.camera.geometry_backward(&state.geoms, &splat_grads, &opts.raster).iter().enumerate() {
        grad.add_geom(i, g);
    }
    let d_payload = &splat_grads.payload;

    // shading payload
    let basis = model.basis();
    let mut basis_grad = BasisGrad::zeros(basis.len());
    let intensity = light.intensity();
    let j = model.basis_count();
    for (v, &i) in state.visible.iter().enumerate() {
        let dc = Vec3::new(d_payload[i * CHANNELS], d_payload[i * CHANNELS + 1], d_payload[i * CHANNELS + 2]);
        if dc == Vec3::ZERO {
            continue;
        }
        let g = model.cloud.gaussian(i);
        let mu = g.mu;
        let (wi, atten) = light.incident(mu);
        let wo = camera.direction_to_viewer(mu);
        let spec = state.specular_used[v];
        let refl = reflectance(&g, &basis, wi, wo, spec)?;
        let rg = reflectance_backward(&g, &basis, wi, wo, spec, dc.mul_elem(intensity) * atten, &mut basis_grad)?;
        let d_atten = dc.dot(refl.mul_elem(intensity));
        let c = &mut grad.cloud;
        for k in 0..4 {
            c.frame[4 * i + k] += rg.frame_q[k];
        }
        for k in 0..3 {
            c.rho_d[3 * i + k] += rg.rho_d_raw[k];
            c.rho_s[3 * i + k] += rg.rho_s_raw[k];
        }
        for (k, a) in rg.alpha_raw.iter().enumerate() {
            c.alpha[j * i + k] += a;
        }
        let d_mu = light.incident_backward(mu, rg.wi, d_atten) + viewer_backward(camera, mu, rg.wo);
        grad.add_mean(i, d_mu);
    }
    for (l, (q, s)) in basis_grad.frame_q.iter().zip(&basis_grad.sigma_log).enumerate() {
        for (dst, v) in grad.basis_rot[4 * l..4 * l + 4].iter_mut().zip(q) {
            *dst += v;
        }
        for k in 0..3 {
            grad.basis_sigma_log[3 * l + k] += s[k];
        }
    }

    // visibility payload, through the refinement network
    let mut d_raw = vec![0.0; model.cloud.len()];
    if !state.forced_unit_shadow {
        match &state.phi_trace {
            Some(trace) => {
                let up: Vec<f64> = state.visible.iter().map(|&i| d_payload[i * CHANNELS + SHADOW]).collect();
                let (gp, gx) = model.phi.backward(trace, &up);
                grad.phi = gp;
                let width = model.phi.input_width();
                for (v, &i) in state.visible.iter().enumerate() {
                    let mu = model.cloud.mean(i);
                    let (wi, _) = light.incident(mu);
                    let ig = shadow_mlp_input_backward(model.bounds.normalize(mu), wi, &gx[v * width..(v + 1) * width]);
                    d_raw[i] = ig.t;
                    grad.add_latent(i, &ig.latent);
                    let d_mu = ig.mu_normalized * (1.0 / model.bounds.radius) + light.incident_backward(mu, ig.wi, 0.0);
                    grad.add_mean(i, d_mu);
                }
            }
            None => {
                for &i in &state.visible {
                    d_raw[i] = d_payload[i * CHANNELS + SHADOW];
                }
            }
        }
    }
    if let Some(pass) = &state.shadow_pass {
        if d_raw.iter().any(|&v| v != 0.0) {
            for (i, g) in shadow_splat_backward(pass, &state.geoms, &d_raw, &opts.shadow, opts.exec).iter().enumerate() {
                grad.add_geom(i, g);
            }
        }
    }

    // residual payload
    if let Some(trace) = &state.psi_trace {
        let mut up = Vec::with_capacity(3 * state.visible.len());
        for &i in &state.visible {
            up.extend_from_slice(&d_payload[i * CHANNELS + RESIDUAL..i * CHANNELS + RESIDUAL + 3]);
        }
        let (gp, gx) = model.psi.backward(trace, &up);
        grad.psi = gp;
        let width = model.psi.input_width();
        for (v, &i) in state.visible.iter().enumerate() {
            let mu = model.cloud.mean(i);
            let wo = camera.direction_to_viewer(mu);
            let ig = residual_mlp_input_backward(wo, model.bounds.normalize(mu), &gx[v * width..(v + 1) * width]);
            grad.add_latent(i, &ig.latent);
            let d_mu = ig.mu_normalized * (1.0 / model.bounds.radius) + viewer_backward(camera, mu, ig.wo);
            grad.add_mean(i, d_mu);
        }
    }
    Ok(grad)
}

/// Gradient w.r.t. `p` of [`Frame::direction_to_viewer`].
fn viewer_backward(camera: &Frame, p: Vec3, g: Vec3) -> Vec3 {
    match camera.mode {
        Projection::Perspective => -(camera.center() - p).normalize_backward(g),
        Projection::Orthographic => Vec3::ZERO,
    }
}
