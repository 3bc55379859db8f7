//! Brute-force reference implementations used to validate the tiled
//! renderer and the shadow pass. Deliberately naive: plain arrays, a global
//! sort and a loop over every Gaussian at every pixel.

use alloc::vec;
use alloc::vec::Vec;

use crate::frame::{Frame, Projection};
use crate::image::ImageBuffer;
use crate::math::{self, Vec3};
use crate::render::{GaussianGeom, RenderSettings};

type M3 = [[f64; 3]; 3];

fn quat_matrix(q: [f64; 4]) -> M3 {
    let n = math::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]
}

fn matmul(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn transpose(a: &M3) -> M3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

/// A Gaussian as seen from one frame.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    index: usize,
    depth: f64,
    center: [f64; 2],
    /// Inverse dilated covariance `[[a, b], [b, c]]`.
    inv: [f64; 3],
    opacity: f64,
}

fn footprint(g: &GaussianGeom, index: usize, frame: &Frame, dilation: f64) -> Option<Footprint> {
    let w = frame.rotation.0;
    let p = [g.mu.x, g.mu.y, g.mu.z];
    let mut v = [frame.translation.x, frame.translation.y, frame.translation.z];
    for i in 0..3 {
        for k in 0..3 {
            v[i] += w[i][k] * p[k];
        }
    }
    if v[2] <= frame.near {
        return None;
    }
    let r = quat_matrix(g.rot.quat());
    let s = [math::exp(g.scale_log.x), math::exp(g.scale_log.y), math::exp(g.scale_log.z)];
    let mut rs = r;
    for row in rs.iter_mut() {
        for k in 0..3 {
            row[k] *= s[k];
        }
    }
    let sigma = matmul(&rs, &transpose(&rs));
    let (j, center) = match frame.mode {
        Projection::Perspective => {
            let z = v[2];
            (
                [[frame.fx / z, 0.0, -frame.fx * v[0] / (z * z)], [0.0, frame.fy / z, -frame.fy * v[1] / (z * z)], [0.0; 3]],
                [frame.fx * v[0] / z + frame.cx, frame.fy * v[1] / z + frame.cy],
            )
        }
        Projection::Orthographic => {
            ([[frame.fx, 0.0, 0.0], [0.0, frame.fy, 0.0], [0.0; 3]], [frame.fx * v[0] + frame.cx, frame.fy * v[1] + frame.cy])
        }
    };
    let t = matmul(&j, &w);
    let cov = matmul(&matmul(&t, &sigma), &transpose(&t));
    let (a, b, c) = (cov[0][0] + dilation, cov[0][1], cov[1][1] + dilation);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    Some(Footprint { index, depth: v[2], center, inv: [c / det, -b / det, a / det], opacity: 1.0 / (1.0 + math::exp(-g.opacity_logit)) })
}

fn sorted_footprints(geoms: &[GaussianGeom], frame: &Frame, dilation: f64) -> Vec<Footprint> {
    let mut fps: Vec<Footprint> = geoms.iter().enumerate().filter_map(|(i, g)| footprint(g, i, frame, dilation)).collect();
    fps.sort_by(|x, y| x.depth.total_cmp(&y.depth).then(x.index.cmp(&y.index)));
    fps
}

/// Density `beta` of a footprint at a pixel center, zero outside the support ellipse.
fn density(f: &Footprint, px: f64, py: f64, extent_sigma: f64) -> f64 {
    let (dx, dy) = (px - f.center[0], py - f.center[1]);
    let q = f.inv[0] * dx * dx + 2.0 * f.inv[1] * dx * dy + f.inv[2] * dy * dy;
    if q > extent_sigma * extent_sigma {
        0.0
    } else {
        math::exp(-0.5 * q)
    }
}

/// Reference render: every pixel walks the globally depth-sorted list of all
/// Gaussians. Compositing follows the same rules as the production
/// rasterizer (alpha floor and clamp, and the transmittance floor below
/// which nothing more is added), evaluated without tiles.
pub fn oracle_render(geoms: &[GaussianGeom], payload: &[f64], channels: usize, frame: &Frame, settings: &RenderSettings) -> ImageBuffer {
    let fps = sorted_footprints(geoms, frame, settings.dilation);
    let mut img = ImageBuffer::new(frame.width, frame.height, channels as u32);
    for y in 0..frame.height {
        for x in 0..frame.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut acc = vec![0.0; channels];
            let mut t = 1.0;
            let mut saturated = false;
            for f in &fps {
                let alpha = (density(f, px, py, settings.extent_sigma) * f.opacity).min(settings.max_alpha);
                if saturated || alpha < settings.min_alpha {
                    continue;
                }
                if t * (1.0 - alpha) < settings.min_transmittance {
                    saturated = true;
                    continue;
                }
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += payload[f.index * channels + k] * alpha * t;
                }
                t *= 1.0 - alpha;
            }
            for (k, a) in acc.iter().enumerate() {
                img.set(x, y, k as u32, *a);
            }
        }
    }
    img
}

/// Reference shadow aggregation: for every ray and every Gaussian it hits,
/// multiplies `1 - alpha` over all hit Gaussians strictly nearer than
/// `depth - bias`. Returns `(num, den)` per Gaussian.
pub fn oracle_shadow_sums(geoms: &[GaussianGeom], light_frame: &Frame, bias: f64, settings: &RenderSettings) -> Vec<(f64, f64)> {
    let fps = sorted_footprints(geoms, light_frame, settings.dilation);
    let mut sums = vec![(0.0, 0.0); geoms.len()];
    for y in 0..light_frame.height {
        for x in 0..light_frame.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hits: Vec<(f64, f64)> = fps
                .iter()
                .map(|f| {
                    let beta = density(f, px, py, settings.extent_sigma);
                    (beta, (beta * f.opacity).min(settings.max_alpha))
                })
                .collect();
            for (i, fi) in fps.iter().enumerate() {
                let (beta, _) = hits[i];
                let inside = {
                    let (dx, dy) = (px - fi.center[0], py - fi.center[1]);
                    fi.inv[0] * dx * dx + 2.0 * fi.inv[1] * dx * dy + fi.inv[2] * dy * dy <= settings.extent_sigma * settings.extent_sigma
                };
                if !inside {
                    continue;
                }
                let mut t = 1.0;
                for (k, fk) in fps.iter().enumerate() {
                    let (bk, ak) = hits[k];
                    if fk.depth < fi.depth - bias && bk > 0.0 && ak >= settings.min_alpha {
                        t *= 1.0 - ak;
                    }
                }
                let s = &mut sums[fi.index];
                s.0 += beta * t;
                s.1 += beta;
            }
        }
    }
    sums
}

/// Raw per-Gaussian visibility from [`oracle_shadow_sums`].
pub fn oracle_shadow(geoms: &[GaussianGeom], light_frame: &Frame, bias: f64, settings: &RenderSettings) -> Vec<f64> {
    oracle_shadow_sums(geoms, light_frame, bias, settings).into_iter().map(|(n, d)| if d > 0.0 { n / d } else { 1.0 }).collect()
}

/// Optical depth `∫ sum_k gamma_k G_k(x) dx` along the segment from `from`
/// to `to`, midpoint rule with `steps` samples. Gaussian `exclude` is skipped.
pub fn line_optical_depth(geoms: &[GaussianGeom], from: Vec3, to: Vec3, steps: usize, exclude: usize) -> f64 {
    let inv: Vec<M3> = geoms
        .iter()
        .map(|g| {
            let r = quat_matrix(g.rot.quat());
            let s = [math::exp(g.scale_log.x), math::exp(g.scale_log.y), math::exp(g.scale_log.z)];
            // R S^-2 R^T
            let mut rs = r;
            for row in rs.iter_mut() {
                for k in 0..3 {
                    row[k] /= s[k];
                }
            }
            matmul(&rs, &transpose(&rs))
        })
        .collect();
    let d = to - from;
    let len = d.norm();
    let mut total = 0.0;
    for i in 0..steps {
        let p = from + d * ((i as f64 + 0.5) / steps as f64);
        for (k, g) in geoms.iter().enumerate() {
            if k == exclude {
                continue;
            }
            let m = &inv[k];
            let e = [p.x - g.mu.x, p.y - g.mu.y, p.z - g.mu.z];
            let mut q = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    q += e[a] * m[a][b] * e[b];
                }
            }
            total += g.opacity() * math::exp(-0.5 * q);
        }
    }
    total * len / steps as f64
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = 0.5 * (i + j) as f64 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / math::sqrt(va * vb)
}
