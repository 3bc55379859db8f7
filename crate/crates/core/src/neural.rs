//! Small dense networks: positional encoding, batched MLP forward/backward,
//! and the input layouts of the shadow-refinement and residual networks.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{self, sigmoid, Vec3, PI};

pub const PE_BANDS: usize = 4;
/// Encoded width of one scalar: itself plus a sin/cos pair per band.
pub const PE_WIDTH: usize = 1 + 2 * PE_BANDS;
pub const LATENT_DIM: usize = 6;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Shadow refinement: `[T, PE(mu), PE(wi), latent]` -> visibility.
pub const SHADOW_MLP_WIDTHS: [usize; 5] = [1 + 6 * PE_WIDTH + LATENT_DIM, 32, 32, 32, 1];
/// Residual: `[PE(wo), PE(mu), latent]` -> RGB.
pub const RESIDUAL_MLP_WIDTHS: [usize; 5] = [6 * PE_WIDTH + LATENT_DIM, 128, 128, 128, 3];

/// `(sin, cos)` of `2^k pi v` for every band, by the double-angle identities.
fn band_pairs(v: f64) -> [(f64, f64); PE_BANDS] {
    let mut out = [(0.0, 0.0); PE_BANDS];
    let (mut sk, mut ck) = (math::sin(PI * v), math::cos(PI * v));
    for pair in out.iter_mut() {
        *pair = (sk, ck);
        (sk, ck) = (2.0 * sk * ck, (ck - sk) * (ck + sk));
    }
    out
}

/// Writes `[x, sin(2^k pi x), cos(2^k pi x) for k in 0..4]` per component.
pub fn positional_encode_into(x: &[f64], out: &mut [f64]) {
    for (i, &v) in x.iter().enumerate() {
        let o = &mut out[i * PE_WIDTH..(i + 1) * PE_WIDTH];
        o[0] = v;
        for (k, (sk, ck)) in band_pairs(v).into_iter().enumerate() {
            o[1 + 2 * k] = sk;
            o[2 + 2 * k] = ck;
        }
    }
}

pub fn positional_encode(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len() * PE_WIDTH];
    positional_encode_into(x, &mut out);
    out
}

/// Gradient w.r.t. `x` of the encoding, given the gradient on its output.
pub fn positional_encode_backward(x: &[f64], upstream: &[f64], out: &mut [f64]) {
    for (i, &v) in x.iter().enumerate() {
        let g = &upstream[i * PE_WIDTH..(i + 1) * PE_WIDTH];
        let mut d = g[0];
        let mut freq = PI;
        for (k, (sk, ck)) in band_pairs(v).into_iter().enumerate() {
            d += g[1 + 2 * k] * freq * ck - g[2 + 2 * k] * freq * sk;
            freq *= 2.0;
        }
        out[i] = d;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputActivation {
    #[default]
    Sigmoid,
    Identity,
}

/// Fully connected network with leaky-ReLU hidden layers.
///
/// Parameters are packed layer by layer: the `out x in` weight matrix
/// (row-major) followed by the `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub output: OutputActivation,
    pub params: Vec<f64>,
}

/// Activations kept by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` is the post-activation output of layer `l`.
    pub acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// `c = beta * c + a * b` for row-major views given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || (a.len() > last(m, k, rsa, csa) && b.len() > last(k, n, rsb, csb)));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(widths: &[usize], output: OutputActivation) -> Self {
        Mlp { widths: widths.to_vec(), output, params: vec![0.0; Self::param_count(widths)] }
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init<R: Rng>(widths: &[usize], output: OutputActivation, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(Self::param_count(widths));
        for w in widths.windows(2) {
            let bound = math::sqrt(6.0 / (w[0] + w[1]) as f64);
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)));
            params.extend(core::iter::repeat_n(0.0, w[1]));
        }
        Mlp { widths: widths.to_vec(), output, params }
    }

    pub fn from_params(widths: &[usize], output: OutputActivation, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(widths);
        if params.len() != expected {
            return Err(Error::shape(expected, params.len()));
        }
        Ok(Mlp { widths: widths.to_vec(), output, params })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (in, out, parameter offset)
        self.widths.windows(2).scan(0, |off, w| {
            let cur = *off;
            *off += w[0] * w[1] + w[1];
            Some((w[0], w[1], cur))
        })
    }

    /// Evaluates `batch` rows of `input` (row-major, `batch x input_width`).
    pub fn forward(&self, input: &[f64], batch: usize) -> Result<MlpTrace> {
        if input.len() != batch * self.input_width() {
            return Err(Error::shape(batch * self.input_width(), input.len()));
        }
        let n_layers = self.widths.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for (l, (fan_in, fan_out, off)) in self.layers().enumerate() {
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let mut h = Vec::with_capacity(batch * fan_out);
            for _ in 0..batch {
                h.extend_from_slice(b);
            }
            gemm(batch, fan_in, fan_out, &acts[l], (fan_in, 1), w, (1, fan_in), 1.0, &mut h);
            if l + 1 < n_layers {
                for v in &mut h {
                    if *v < 0.0 {
                        *v *= LEAKY_SLOPE;
                    }
                }
            } else if self.output == OutputActivation::Sigmoid {
                for v in &mut h {
                    *v = sigmoid(*v);
                }
            }
            acts.push(h);
        }
        Ok(MlpTrace { batch, acts })
    }

    /// Returns `(parameter gradients, input gradients)` for an upstream
    /// gradient on the outputs.
    pub fn backward(&self, trace: &MlpTrace, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let batch = trace.batch;
        let n_layers = self.widths.len() - 1;
        let layers: Vec<_> = self.layers().collect();
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out, off) = layers[l];
            let out = &trace.acts[l + 1];
            // through the activation: derivative from the stored output
            if l + 1 < n_layers {
                for (d, &y) in delta.iter_mut().zip(out) {
                    if y < 0.0 {
                        *d *= LEAKY_SLOPE;
                    }
                }
            } else if self.output == OutputActivation::Sigmoid {
                for (d, &y) in delta.iter_mut().zip(out) {
                    *d *= y * (1.0 - y);
                }
            }
            let input = &trace.acts[l];
            let (gw, gb) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            // dW = deltaᵀ X
            gemm(fan_out, batch, fan_in, &delta, (1, fan_out), input, (fan_in, 1), 0.0, gw);
            for r in 0..batch {
                for (g, d) in gb.iter_mut().zip(&delta[r * fan_out..(r + 1) * fan_out]) {
                    *g += d;
                }
            }
            // dX = delta W
            let w = &self.params[off..off + fan_in * fan_out];
            let mut next = vec![0.0; batch * fan_in];
            gemm(batch, fan_out, fan_in, &delta, (fan_out, 1), w, (fan_in, 1), 0.0, &mut next);
            delta = next;
        }
        (grads, delta)
    }
}

/// Writes one shadow-refinement input row.
pub fn shadow_mlp_input(t: f64, mu_normalized: Vec3, wi: Vec3, latent: &[f64; LATENT_DIM], out: &mut [f64]) {
    out[0] = t;
    positional_encode_into(&mu_normalized.to_array(), &mut out[1..1 + 3 * PE_WIDTH]);
    positional_encode_into(&wi.to_array(), &mut out[1 + 3 * PE_WIDTH..1 + 6 * PE_WIDTH]);
    out[1 + 6 * PE_WIDTH..].copy_from_slice(latent);
}

/// Writes one residual input row.
pub fn residual_mlp_input(wo: Vec3, mu_normalized: Vec3, latent: &[f64; LATENT_DIM], out: &mut [f64]) {
    positional_encode_into(&wo.to_array(), &mut out[..3 * PE_WIDTH]);
    positional_encode_into(&mu_normalized.to_array(), &mut out[3 * PE_WIDTH..6 * PE_WIDTH]);
    out[6 * PE_WIDTH..].copy_from_slice(latent);
}

/// Gradients of one shadow-refinement input row w.r.t. its sources.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShadowInputGrad {
    pub t: f64,
    pub mu_normalized: Vec3,
    pub wi: Vec3,
    pub latent: [f64; LATENT_DIM],
}

pub fn shadow_mlp_input_backward(mu_normalized: Vec3, wi: Vec3, g: &[f64]) -> ShadowInputGrad {
    let mut dm = [0.0; 3];
    let mut dw = [0.0; 3];
    positional_encode_backward(&mu_normalized.to_array(), &g[1..1 + 3 * PE_WIDTH], &mut dm);
    positional_encode_backward(&wi.to_array(), &g[1 + 3 * PE_WIDTH..1 + 6 * PE_WIDTH], &mut dw);
    let mut latent = [0.0; LATENT_DIM];
    latent.copy_from_slice(&g[1 + 6 * PE_WIDTH..]);
    ShadowInputGrad { t: g[0], mu_normalized: Vec3::new(dm[0], dm[1], dm[2]), wi: Vec3::new(dw[0], dw[1], dw[2]), latent }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResidualInputGrad {
    pub wo: Vec3,
    pub mu_normalized: Vec3,
    pub latent: [f64; LATENT_DIM],
}

pub fn residual_mlp_input_backward(wo: Vec3, mu_normalized: Vec3, g: &[f64]) -> ResidualInputGrad {
    let mut dw = [0.0; 3];
    let mut dm = [0.0; 3];
    positional_encode_backward(&wo.to_array(), &g[..3 * PE_WIDTH], &mut dw);
    positional_encode_backward(&mu_normalized.to_array(), &g[3 * PE_WIDTH..6 * PE_WIDTH], &mut dm);
    let mut latent = [0.0; LATENT_DIM];
    latent.copy_from_slice(&g[6 * PE_WIDTH..]);
    ResidualInputGrad { wo: Vec3::new(dw[0], dw[1], dw[2]), mu_normalized: Vec3::new(dm[0], dm[1], dm[2]), latent }
}

/// Refined visibility `T'` for one Gaussian.
pub fn refine_shadow(phi: &Mlp, t: f64, wi: Vec3, mu_normalized: Vec3, latent: &[f64; LATENT_DIM]) -> Result<f64> {
    let mut row = vec![0.0; phi.input_width()];
    if row.len() != SHADOW_MLP_WIDTHS[0] {
        return Err(Error::shape(SHADOW_MLP_WIDTHS[0], row.len()));
    }
    shadow_mlp_input(t, mu_normalized, wi, latent, &mut row);
    Ok(phi.forward(&row, 1)?.output()[0])
}

/// View-dependent residual color for one Gaussian.
pub fn eval_residual(psi: &Mlp, wo: Vec3, mu_normalized: Vec3, latent: &[f64; LATENT_DIM]) -> Result<[f64; 3]> {
    let mut row = vec![0.0; psi.input_width()];
    if row.len() != RESIDUAL_MLP_WIDTHS[0] {
        return Err(Error::shape(RESIDUAL_MLP_WIDTHS[0], row.len()));
    }
    residual_mlp_input(wo, mu_normalized, latent, &mut row);
    let out = psi.forward(&row, 1)?;
    let o = out.output();
    Ok([o[0], o[1], o[2]])
}
