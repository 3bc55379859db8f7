//! Tile-based splatting: projection, binning, front-to-back compositing and
//! the matching backward pass.
//!
//! Every splat covers the ellipse `dᵀ conic d <= extent_sigma²` around its
//! projected mean. Forward and backward process 16x16 tiles independently;
//! gradients are kept per tile and merged in tile order, so the result does
//! not depend on how many threads ran the tiles.

use alloc::vec;
use alloc::vec::Vec;

use crate::appearance::{build_covariance, covariance_backward, Rotation};
use crate::frame::{Frame, Projection};
use crate::image::ImageBuffer;
use crate::math::{self, sigmoid, Mat3, Sym2, Vec3};

/// Upper bound on payload channels per splat.
pub const MAX_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    /// Contributions with `beta * gamma` below this are skipped.
    pub min_alpha: f64,
    /// Per-splat alpha is clamped to this value.
    pub max_alpha: f64,
    /// Compositing stops before transmittance would fall below this.
    pub min_transmittance: f64,
    /// Added to the diagonal of every 2D covariance (pixels²).
    pub dilation: f64,
    pub tile_size: u32,
    /// Splat support radius in standard deviations.
    pub extent_sigma: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            min_alpha: 1.0 / 255.0,
            max_alpha: 0.99,
            min_transmittance: 1e-4,
            dilation: 0.3,
            tile_size: 16,
            extent_sigma: 3.0,
        }
    }
}

/// How tiles are scheduled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    #[default]
    Serial,
    /// Tiles run on the rayon pool; falls back to serial without the `parallel` feature.
    Parallel,
}

/// Geometry of one Gaussian as needed for projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianGeom {
    pub mu: Vec3,
    pub rot: Rotation,
    pub scale_log: Vec3,
    pub opacity_logit: f64,
}

impl GaussianGeom {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Mat3 {
        let s = self.scale_log;
        build_covariance(&self.rot, Vec3::new(math::exp(s.x), math::exp(s.y), math::exp(s.z)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub gaussian_index: usize,
    pub mean2d: [f64; 2],
    /// Inverse of the dilated 2D covariance.
    pub conic: Sym2,
    /// View-space depth.
    pub depth: f64,
    pub opacity: f64,
    /// Half extents of the axis-aligned box around the support ellipse (pixels).
    pub half_extent: [f64; 2],
}

/// Projection Jacobian (2x3) of view-space `t`.
fn projection_jacobian(frame: &Frame, t: Vec3) -> [[f64; 3]; 2] {
    match frame.mode {
        Projection::Perspective => {
            let iz = 1.0 / t.z;
            [[frame.fx * iz, 0.0, -frame.fx * t.x * iz * iz], [0.0, frame.fy * iz, -frame.fy * t.y * iz * iz]]
        }
        Projection::Orthographic => [[frame.fx, 0.0, 0.0], [0.0, frame.fy, 0.0]],
    }
}

fn project_mean(frame: &Frame, t: Vec3) -> [f64; 2] {
    match frame.mode {
        Projection::Perspective => [frame.fx * t.x / t.z + frame.cx, frame.fy * t.y / t.z + frame.cy],
        Projection::Orthographic => [frame.fx * t.x + frame.cx, frame.fy * t.y + frame.cy],
    }
}

/// `M = J W` (2x3).
fn jw(frame: &Frame, t: Vec3) -> [[f64; 3]; 2] {
    let j = projection_jacobian(frame, t);
    let w = &frame.rotation;
    core::array::from_fn(|r| core::array::from_fn(|c| (0..3).map(|k| j[r][k] * w.0[k][c]).sum()))
}

/// `M Σ Mᵀ` for a 2x3 `M`.
fn sandwich(m: &[[f64; 3]; 2], sigma: &Mat3) -> Sym2 {
    let ms: [[f64; 3]; 2] = core::array::from_fn(|r| core::array::from_fn(|c| (0..3).map(|k| m[r][k] * sigma.0[k][c]).sum()));
    let e = |r: usize, c: usize| (0..3).map(|k| ms[r][k] * m[c][k]).sum::<f64>();
    Sym2::new(e(0, 0), 0.5 * (e(0, 1) + e(1, 0)), e(1, 1))
}

/// Projects one Gaussian. Returns `None` when culled: behind the near plane,
/// degenerate, or with a support box that misses the viewport.
pub fn project_gaussian(g: &GaussianGeom, index: usize, frame: &Frame, settings: &RenderSettings) -> Option<Splat2D> {
    let t = frame.to_view(g.mu);
    if !(t.z > frame.near) {
        return None;
    }
    let m = jw(frame, t);
    let cov = sandwich(&m, &g.covariance());
    let dil = Sym2::new(cov.a + settings.dilation, cov.b, cov.c + settings.dilation);
    let conic = dil.inverse()?;
    let mean2d = project_mean(frame, t);
    let k = settings.extent_sigma;
    let half_extent = [k * math::sqrt(dil.a), k * math::sqrt(dil.c)];
    let (w, h) = (frame.width as f64, frame.height as f64);
    let inside = mean2d[0] + half_extent[0] > 0.0
        && mean2d[0] - half_extent[0] < w
        && mean2d[1] + half_extent[1] > 0.0
        && mean2d[1] - half_extent[1] < h;
    if !inside || !mean2d[0].is_finite() || !mean2d[1].is_finite() {
        return None;
    }
    Some(Splat2D { gaussian_index: index, mean2d, conic, depth: t.z, opacity: g.opacity(), half_extent })
}

/// The dilated 2D covariance of a Gaussian (for inspection and tests).
pub fn projected_covariance(g: &GaussianGeom, frame: &Frame, settings: &RenderSettings) -> Sym2 {
    let t = frame.to_view(g.mu);
    let cov = sandwich(&jw(frame, t), &g.covariance());
    Sym2::new(cov.a + settings.dilation, cov.b, cov.c + settings.dilation)
}

/// Gradient of a loss w.r.t. one Gaussian's geometry.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeomGrad {
    pub mu: Vec3,
    pub rot_q: [f64; 4],
    pub scale_log: Vec3,
    pub opacity_logit: f64,
}

impl GeomGrad {
    pub fn add(&mut self, o: &GeomGrad) {
        self.mu += o.mu;
        for k in 0..4 {
            self.rot_q[k] += o.rot_q[k];
        }
        self.scale_log += o.scale_log;
        self.opacity_logit += o.opacity_logit;
    }
}

/// Chains gradients on a splat's mean, conic entries `(a, b, c)` and opacity
/// back to the 3D parameters. `d_conic.b` is the gradient w.r.t. the shared
/// off-diagonal entry.
pub fn project_gaussian_backward(
    g: &GaussianGeom,
    frame: &Frame,
    settings: &RenderSettings,
    d_mean2d: [f64; 2],
    d_conic: Sym2,
    d_opacity: f64,
) -> GeomGrad {
    let t = frame.to_view(g.mu);
    let m = jw(frame, t);
    let sigma = g.covariance();
    let cov = sandwich(&m, &sigma);
    let dil = Sym2::new(cov.a + settings.dilation, cov.b, cov.c + settings.dilation);
    let c = dil.inverse().unwrap_or_default();

    // dL/dC as a symmetric matrix; the off-diagonal gradient is split over both entries
    let gc = Sym2::new(d_conic.a, 0.5 * d_conic.b, d_conic.c);
    // G_A = -C G_C C
    let cg = c.mul(&gc);
    let ga = {
        let e = |r: usize, k: usize| -(cg[r][0] * [c.a, c.b][k] + cg[r][1] * [c.b, c.c][k]);
        [[e(0, 0), e(0, 1)], [e(1, 0), e(1, 1)]]
    };
    // G_Σ = Mᵀ G_A M
    let mut g_sigma = Mat3::ZERO;
    for i in 0..3 {
        for j in 0..3 {
            g_sigma.0[i][j] = (0..2).flat_map(|r| (0..2).map(move |s| (r, s))).map(|(r, s)| m[r][i] * ga[r][s] * m[s][j]).sum();
        }
    }
    // G_M = 2 G_A M Σ
    let ms: [[f64; 3]; 2] = core::array::from_fn(|r| core::array::from_fn(|cc| (0..3).map(|k| m[r][k] * sigma.0[k][cc]).sum()));
    let g_m: [[f64; 3]; 2] = core::array::from_fn(|r| core::array::from_fn(|cc| 2.0 * (ga[r][0] * ms[0][cc] + ga[r][1] * ms[1][cc])));
    // M = J W  ->  G_J = G_M Wᵀ
    let w = &frame.rotation;
    let g_j: [[f64; 3]; 2] = core::array::from_fn(|r| core::array::from_fn(|k| (0..3).map(|cc| g_m[r][cc] * w.0[k][cc]).sum()));

    let mut dt = Vec3::ZERO;
    match frame.mode {
        Projection::Perspective => {
            let (fx, fy) = (frame.fx, frame.fy);
            let iz = 1.0 / t.z;
            let iz2 = iz * iz;
            let iz3 = iz2 * iz;
            // Jacobian entries as functions of t
            dt.z += g_j[0][0] * -fx * iz2 + g_j[1][1] * -fy * iz2;
            dt.x += g_j[0][2] * -fx * iz2;
            dt.z += g_j[0][2] * 2.0 * fx * t.x * iz3;
            dt.y += g_j[1][2] * -fy * iz2;
            dt.z += g_j[1][2] * 2.0 * fy * t.y * iz3;
            // projected mean
            dt.x += d_mean2d[0] * fx * iz;
            dt.z += d_mean2d[0] * -fx * t.x * iz2;
            dt.y += d_mean2d[1] * fy * iz;
            dt.z += d_mean2d[1] * -fy * t.y * iz2;
        }
        Projection::Orthographic => {
            dt.x += d_mean2d[0] * frame.fx;
            dt.y += d_mean2d[1] * frame.fy;
        }
    }
    let (rot_q, scale_log) = covariance_backward(&g.rot, g.scale_log, &g_sigma);
    let gamma = g.opacity();
    GeomGrad { mu: w.tmul_vec(dt), rot_q, scale_log, opacity_logit: d_opacity * gamma * (1.0 - gamma) }
}

/// Per-tile splat lists, each in ascending `(depth, gaussian_index)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBins {
    pub tile_size: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Indices into the splat slice, per tile (row-major tile order).
    pub lists: Vec<Vec<u32>>,
}

/// Bins splats into square tiles and depth-sorts each tile.
pub fn bin_and_sort(splats: &[Splat2D], frame: &Frame, tile_size: u32) -> TileBins {
    let tiles_x = frame.width.div_ceil(tile_size);
    let tiles_y = frame.height.div_ceil(tile_size);
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth.total_cmp(&sb.depth).then(sa.gaussian_index.cmp(&sb.gaussian_index))
    });
    let mut lists = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    let ts = tile_size as f64;
    for idx in order {
        let s = &splats[idx as usize];
        let x0 = math::floor((s.mean2d[0] - s.half_extent[0]) / ts).max(0.0);
        let x1 = math::floor((s.mean2d[0] + s.half_extent[0]) / ts).min(tiles_x as f64 - 1.0);
        let y0 = math::floor((s.mean2d[1] - s.half_extent[1]) / ts).max(0.0);
        let y1 = math::floor((s.mean2d[1] + s.half_extent[1]) / ts).min(tiles_y as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            continue;
        }
        for ty in y0 as u32..=y1 as u32 {
            for tx in x0 as u32..=x1 as u32 {
                lists[(ty * tiles_x + tx) as usize].push(idx);
            }
        }
    }
    TileBins { tile_size, tiles_x, tiles_y, lists }
}

/// Density and clamped alpha of a splat at a pixel center, or `None` when the
/// splat does not contribute there.
#[inline]
pub fn splat_alpha(s: &Splat2D, px: f64, py: f64, settings: &RenderSettings) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let q = s.conic.quad(dx, dy);
    if !(q <= settings.extent_sigma * settings.extent_sigma) {
        return None;
    }
    let beta = math::exp(-0.5 * q);
    let alpha = (beta * s.opacity).min(settings.max_alpha);
    if alpha < settings.min_alpha {
        return None;
    }
    Some((beta, alpha, dx, dy))
}

/// Result of compositing one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelComposite {
    pub final_transmittance: f64,
    /// Number of list entries consumed (for the backward pass).
    pub consumed: u32,
}

/// Front-to-back compositing of a depth-ordered list at one pixel center.
///
/// `visit(list_position, beta, alpha, transmittance_before)` is called for
/// every contributing splat. `out` receives `sum c a T + T_final * background`.
#[allow(clippy::too_many_arguments)]
pub fn composite_pixel(
    splats: &[Splat2D],
    list: &[u32],
    payload: &[f64],
    channels: usize,
    background: &[f64],
    px: f64,
    py: f64,
    settings: &RenderSettings,
    out: &mut [f64],
    visit: impl FnMut(usize, f64, f64, f64),
) -> PixelComposite {
    let entries = list.iter().enumerate().map(|(pos, &idx)| (pos, &splats[idx as usize]));
    composite_entries(entries, payload, channels, background, px, py, settings, out, visit)
}

/// [`composite_pixel`] over `(list position, splat)` pairs in list order;
/// omitted entries must not reach the pixel.
#[allow(clippy::too_many_arguments)]
fn composite_entries<'a>(
    entries: impl IntoIterator<Item = (usize, &'a Splat2D)>,
    payload: &[f64],
    channels: usize,
    background: &[f64],
    px: f64,
    py: f64,
    settings: &RenderSettings,
    out: &mut [f64],
    mut visit: impl FnMut(usize, f64, f64, f64),
) -> PixelComposite {
    out[..channels].fill(0.0);
    let mut t = 1.0;
    let mut consumed = 0;
    for (pos, s) in entries {
        let Some((beta, alpha, _, _)) = splat_alpha(s, px, py, settings) else { continue };
        let next_t = t * (1.0 - alpha);
        if next_t < settings.min_transmittance {
            break;
        }
        let c = &payload[s.gaussian_index * channels..][..channels];
        for k in 0..channels {
            out[k] += c[k] * alpha * t;
        }
        visit(pos, beta, alpha, t);
        t = next_t;
        consumed = pos as u32 + 1;
    }
    for k in 0..channels {
        out[k] += t * background[k];
    }
    PixelComposite { final_transmittance: t, consumed }
}

/// Forward result of one rasterization.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    pub final_transmittance: Vec<f64>,
    pub consumed: Vec<u32>,
}

/// Splat gradients from one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    /// Indexed like the payload (by Gaussian index, `channels` per entry).
    pub payload: Vec<f64>,
    /// The following are indexed by splat position.
    pub mean2d: Vec<[f64; 2]>,
    pub conic: Vec<Sym2>,
    pub opacity: Vec<f64>,
}

struct TileForward {
    colors: Vec<f64>,
    final_t: Vec<f64>,
    consumed: Vec<u32>,
}

struct TileBackward {
    payload: Vec<f64>,
    mean2d: Vec<[f64; 2]>,
    conic: Vec<Sym2>,
    opacity: Vec<f64>,
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` of one tile.
pub(crate) fn tile_rect(bins: &TileBins, frame: &Frame, tile: usize) -> (u32, u32, u32, u32) {
    let ts = bins.tile_size;
    let (x0, y0) = (tile as u32 % bins.tiles_x * ts, tile as u32 / bins.tiles_x * ts);
    (x0, y0, (x0 + ts).min(frame.width), (y0 + ts).min(frame.height))
}

/// Side of the pixel blocks that share one culled candidate list.
const BLOCK: u32 = 4;

/// Calls `f(x, y, local, candidates)` for every pixel of a tile, block by
/// block. `local` is the tile's splats copied in list order; `candidates`
/// holds the positions whose support box may reach the block, and every
/// other entry fails the support test there.
pub(crate) fn for_tile_blocks(
    splats: &[Splat2D],
    list: &[u32],
    rect: (u32, u32, u32, u32),
    mut f: impl FnMut(u32, u32, &[Splat2D], &[usize]),
) {
    let (x0, y0, x1, y1) = rect;
    let local: Vec<Splat2D> = list.iter().map(|&idx| splats[idx as usize]).collect();
    let mut candidates = Vec::with_capacity(list.len());
    for by in (y0..y1).step_by(BLOCK as usize) {
        let by1 = (by + BLOCK).min(y1);
        for bx in (x0..x1).step_by(BLOCK as usize) {
            let bx1 = (bx + BLOCK).min(x1);
            // pixel centers of the block, widened against rounding in the box
            let (lo_x, hi_x) = (bx as f64 + 0.5 - 1e-6, bx1 as f64 - 0.5 + 1e-6);
            let (lo_y, hi_y) = (by as f64 + 0.5 - 1e-6, by1 as f64 - 0.5 + 1e-6);
            candidates.clear();
            candidates.extend(local.iter().enumerate().filter_map(|(pos, s)| {
                let reach = s.mean2d[0] + s.half_extent[0] >= lo_x
                    && s.mean2d[0] - s.half_extent[0] <= hi_x
                    && s.mean2d[1] + s.half_extent[1] >= lo_y
                    && s.mean2d[1] - s.half_extent[1] <= hi_y;
                // NaN extents stay in and are rejected by the support test
                (reach || !s.half_extent[0].is_finite() || !s.half_extent[1].is_finite()).then_some(pos)
            }));
            for y in by..by1 {
                for x in bx..bx1 {
                    f(x, y, &local, &candidates);
                }
            }
        }
    }
}

fn map_tiles<T: Send>(n: usize, exec: Exec, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// A projected and binned set of splats for one frame.
#[derive(Clone, Debug)]
pub struct Rasterization {
    pub frame: Frame,
    pub splats: Vec<Splat2D>,
    pub bins: TileBins,
}

impl Rasterization {
    pub fn new(geoms: &[GaussianGeom], frame: &Frame, settings: &RenderSettings) -> Self {
        let splats: Vec<Splat2D> =
            geoms.iter().enumerate().filter_map(|(i, g)| project_gaussian(g, i, frame, settings)).collect();
        let bins = bin_and_sort(&splats, frame, settings.tile_size);
        Rasterization { frame: *frame, splats, bins }
    }

    /// Composites `payload` (indexed by Gaussian, `channels` values each).
    pub fn render(
        &self,
        payload: &[f64],
        channels: usize,
        background: &[f64],
        settings: &RenderSettings,
        exec: Exec,
    ) -> RenderOutput {
        assert!(channels <= MAX_CHANNELS && background.len() >= channels);
        let frame = &self.frame;
        let tiles = map_tiles(self.bins.lists.len(), exec, |tile| {
            let list = &self.bins.lists[tile];
            let rect = tile_rect(&self.bins, frame, tile);
            let tw = (rect.2 - rect.0) as usize;
            let count = tw * (rect.3 - rect.1) as usize;
            let mut out = TileForward { colors: vec![0.0; count * channels], final_t: vec![1.0; count], consumed: vec![0; count] };
            let mut px_out = [0.0; MAX_CHANNELS];
            for_tile_blocks(&self.splats, list, rect, |x, y, local, candidates| {
                let r = composite_entries(
                    candidates.iter().map(|&pos| (pos, &local[pos])),
                    payload,
                    channels,
                    background,
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    settings,
                    &mut px_out,
                    |_, _, _, _| {},
                );
                let k = (y - rect.1) as usize * tw + (x - rect.0) as usize;
                out.colors[k * channels..(k + 1) * channels].copy_from_slice(&px_out[..channels]);
                out.final_t[k] = r.final_transmittance;
                out.consumed[k] = r.consumed;
            });
            out
        });
        let mut image = ImageBuffer::new(frame.width, frame.height, channels as u32);
        let mut final_transmittance = vec![1.0; frame.pixel_count()];
        let mut consumed = vec![0; frame.pixel_count()];
        for (tile, tf) in tiles.iter().enumerate() {
            let (x0, y0, x1, _) = tile_rect(&self.bins, frame, tile);
            let tw = (x1 - x0) as usize;
            for (k, &t) in tf.final_t.iter().enumerate() {
                let (x, y) = (x0 + (k % tw) as u32, y0 + (k / tw) as u32);
                let p = (y * frame.width + x) as usize;
                image.data[p * channels..(p + 1) * channels].copy_from_slice(&tf.colors[k * channels..(k + 1) * channels]);
                final_transmittance[p] = t;
                consumed[p] = tf.consumed[k];
            }
        }
        RenderOutput { image, final_transmittance, consumed }
    }

    /// Reverse of [`Rasterization::render`] for an upstream image gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        payload: &[f64],
        channels: usize,
        background: &[f64],
        settings: &RenderSettings,
        forward: &RenderOutput,
        upstream: &ImageBuffer,
        exec: Exec,
    ) -> SplatGrads {
        let frame = &self.frame;
        let tiles = map_tiles(self.bins.lists.len(), exec, |tile| {
            let list = &self.bins.lists[tile];
            let n = list.len();
            let mut tb = TileBackward {
                payload: vec![0.0; n * channels],
                mean2d: vec![[0.0; 2]; n],
                conic: vec![Sym2::default(); n],
                opacity: vec![0.0; n],
            };
            for_tile_blocks(&self.splats, list, tile_rect(&self.bins, frame, tile), |x, y, local, candidates| {
                let p = (y * frame.width + x) as usize;
                let g = &upstream.data[p * channels..(p + 1) * channels];
                if g.iter().all(|&v| v == 0.0) {
                    return;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = forward.final_transmittance[p];
                let mut after = [0.0; MAX_CHANNELS];
                for k in 0..channels {
                    after[k] = background[k] * t;
                }
                let end = candidates.partition_point(|&pos| pos < forward.consumed[p] as usize);
                for &pos in candidates[..end].iter().rev() {
                    let s = &local[pos];
                    let Some((beta, alpha, dx, dy)) = splat_alpha(s, px, py, settings) else { continue };
                    let t_j = t / (1.0 - alpha);
                    let c = &payload[s.gaussian_index * channels..][..channels];
                    let mut d_alpha = 0.0;
                    for k in 0..channels {
                        tb.payload[pos * channels + k] += g[k] * alpha * t_j;
                        d_alpha += g[k] * (c[k] * t_j - after[k] / (1.0 - alpha));
                        after[k] += c[k] * alpha * t_j;
                    }
                    t = t_j;
                    if beta * s.opacity > settings.max_alpha {
                        continue;
                    }
                    tb.opacity[pos] += d_alpha * beta;
                    let d_q = d_alpha * s.opacity * beta * -0.5;
                    let cd = [s.conic.a * dx + s.conic.b * dy, s.conic.b * dx + s.conic.c * dy];
                    tb.mean2d[pos][0] += d_q * -2.0 * cd[0];
                    tb.mean2d[pos][1] += d_q * -2.0 * cd[1];
                    let gc = &mut tb.conic[pos];
                    gc.a += d_q * dx * dx;
                    gc.b += d_q * 2.0 * dx * dy;
                    gc.c += d_q * dy * dy;
                }
            });
            tb
        });
        let n_gauss = payload.len() / channels.max(1);
        let mut grads = SplatGrads {
            payload: vec![0.0; n_gauss * channels],
            mean2d: vec![[0.0; 2]; self.splats.len()],
            conic: vec![Sym2::default(); self.splats.len()],
            opacity: vec![0.0; self.splats.len()],
        };
        for (tile, tb) in tiles.iter().enumerate() {
            for (pos, &idx) in self.bins.lists[tile].iter().enumerate() {
                let i = idx as usize;
                let gi = self.splats[i].gaussian_index;
                for k in 0..channels {
                    grads.payload[gi * channels + k] += tb.payload[pos * channels + k];
                }
                grads.mean2d[i][0] += tb.mean2d[pos][0];
                grads.mean2d[i][1] += tb.mean2d[pos][1];
                grads.conic[i].a += tb.conic[pos].a;
                grads.conic[i].b += tb.conic[pos].b;
                grads.conic[i].c += tb.conic[pos].c;
                grads.opacity[i] += tb.opacity[pos];
            }
        }
        grads
    }

    /// Chains splat gradients to every Gaussian's geometry (indexed by Gaussian).
    pub fn geometry_backward(&self, geoms: &[GaussianGeom], grads: &SplatGrads, settings: &RenderSettings) -> Vec<GeomGrad> {
        let mut out = vec![GeomGrad::default(); geoms.len()];
        for (i, s) in self.splats.iter().enumerate() {
            let gi = s.gaussian_index;
            out[gi] = project_gaussian_backward(&geoms[gi], &self.frame, settings, grads.mean2d[i], grads.conic[i], grads.opacity[i]);
        }
        out
    }
}

/// Projects, bins and composites a payload image in one call.
pub fn render_splat_image(
    geoms: &[GaussianGeom],
    payload: &[f64],
    channels: usize,
    frame: &Frame,
    settings: &RenderSettings,
    exec: Exec,
) -> ImageBuffer {
    let background = [0.0; MAX_CHANNELS];
    Rasterization::new(geoms, frame, settings).render(payload, channels, &background, settings, exec).image
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_32() -> Frame {
        Frame::new(Mat3::IDENTITY, Vec3::ZERO, 100.0, 100.0, 16.0, 16.0, 32, 32, Projection::Perspective).unwrap()
    }

    fn iso(mu: Vec3, sigma: f64, opacity: f64) -> GaussianGeom {
        GaussianGeom { mu, rot: Rotation::IDENTITY, scale_log: Vec3::splat(math::ln(sigma)), opacity_logit: math::logit(opacity) }
    }

    fn splat_at(x: f64, y: f64, depth: f64, index: usize, alpha_at_center: f64) -> Splat2D {
        Splat2D {
            gaussian_index: index,
            mean2d: [x, y],
            conic: Sym2::new(1.0, 0.0, 1.0),
            depth,
            opacity: alpha_at_center,
            half_extent: [3.0, 3.0],
        }
    }

    #[test]
    fn projection_on_axis_matches_focal_scaling() {
        let g = iso(Vec3::new(0.0, 0.0, 2.0), 0.1, 0.5);
        let f = frame_32();
        let cov = projected_covariance(&g, &f, &RenderSettings::default());
        assert!((cov.a - 25.3).abs() < 1e-9 && (cov.c - 25.3).abs() < 1e-9 && cov.b.abs() < 1e-12);
        let s = project_gaussian(&g, 0, &f, &RenderSettings::default()).unwrap();
        assert_eq!(s.mean2d, [16.0, 16.0]);
        assert_eq!(s.depth, 2.0);
    }

    #[test]
    fn projection_culls_behind_camera() {
        let f = frame_32();
        assert!(project_gaussian(&iso(Vec3::new(0.0, 0.0, -1.0), 0.1, 0.5), 0, &f, &RenderSettings::default()).is_none());
        assert!(project_gaussian(&iso(Vec3::new(0.0, 0.0, 0.005), 0.1, 0.5), 0, &f, &RenderSettings::default()).is_none());
        // far outside the viewport
        assert!(project_gaussian(&iso(Vec3::new(50.0, 0.0, 2.0), 0.01, 0.5), 0, &f, &RenderSettings::default()).is_none());
    }

    #[test]
    fn orthographic_projection_ignores_depth() {
        let mut f = frame_32();
        f.mode = Projection::Orthographic;
        f.fx = 40.0;
        f.fy = 40.0;
        for z in [1.0, 5.0, 50.0] {
            let cov = projected_covariance(&iso(Vec3::new(0.0, 0.0, z), 0.1, 0.5), &f, &RenderSettings::default());
            assert!((cov.a - (0.01 * 1600.0 + 0.3)).abs() < 1e-9);
            assert!((cov.c - (0.01 * 1600.0 + 0.3)).abs() < 1e-9);
        }
    }

    #[test]
    fn binning_examples() {
        let f = frame_32();
        let s = splat_at(8.0, 8.0, 1.0, 0, 0.5);
        let bins = bin_and_sort(&[s], &f, 16);
        assert_eq!(bins.lists[0], vec![0]);
        assert!(bins.lists[1..].iter().all(|l| l.is_empty()));

        let far = splat_at(8.0, 8.0, 2.0, 0, 0.5);
        let near = splat_at(7.0, 8.0, 1.0, 1, 0.5);
        let bins = bin_and_sort(&[far, near], &f, 16);
        assert_eq!(bins.lists[0], vec![1, 0]);

        let tie_a = splat_at(8.0, 8.0, 1.0, 5, 0.5);
        let tie_b = splat_at(8.0, 8.0, 1.0, 2, 0.5);
        let bins = bin_and_sort(&[tie_a, tie_b], &f, 16);
        assert_eq!(bins.lists[0], vec![1, 0]);

        let outside = splat_at(-20.0, 8.0, 1.0, 0, 0.5);
        let bins = bin_and_sort(&[outside], &f, 16);
        assert!(bins.lists.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn composite_examples() {
        let settings = RenderSettings::default();
        let mut out = [0.0; 3];
        let r = composite_pixel(&[], &[], &[], 3, &[0.0; 3], 0.5, 0.5, &settings, &mut out, |_, _, _, _| {});
        assert_eq!(out, [0.0; 3]);
        assert_eq!(r.final_transmittance, 1.0);

        // beta = 1 at the mean, so alpha = opacity
        let s1 = splat_at(0.5, 0.5, 1.0, 0, 0.6);
        let payload = [1.0; 6];
        let mut ts = Vec::new();
        let r = composite_pixel(&[s1], &[0], &payload, 3, &[0.0; 3], 0.5, 0.5, &settings, &mut out, |_, _, _, t| ts.push(t));
        assert!(out.iter().all(|v| (v - 0.6).abs() < 1e-15));
        assert!((r.final_transmittance - 0.4).abs() < 1e-15);

        let s2 = splat_at(0.5, 0.5, 2.0, 1, 0.3);
        ts.clear();
        let r = composite_pixel(&[s1, s2], &[0, 1], &payload, 3, &[0.0; 3], 0.5, 0.5, &settings, &mut out, |_, _, _, t| ts.push(t));
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0], 1.0);
        assert!((ts[1] - 0.4).abs() < 1e-15);
        let brute: f64 = [0.6f64, 0.3].iter().map(|a| 1.0 - a).product();
        assert!((r.final_transmittance - brute).abs() < 1e-15);
        assert!((r.final_transmittance - 0.28).abs() < 1e-15);
    }

    #[test]
    fn single_gaussian_at_its_mean() {
        let f = frame_32();
        let g = iso(Vec3::new(0.0, 0.0, 2.0), 0.05, 0.7);
        // put the projected mean exactly on a pixel center
        let g = GaussianGeom { mu: Vec3::new(0.5 / 50.0, 0.5 / 50.0, 2.0), ..g };
        let img = render_splat_image(&[g], &[0.2, 0.4, 0.8], 3, &f, &RenderSettings::default(), Exec::Serial);
        let px = img.pixel(16, 16);
        assert!((px[0] - 0.2 * 0.7).abs() < 1e-12);
        assert!((px[2] - 0.8 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_opacity_renders_black() {
        let f = frame_32();
        let geoms: Vec<_> = (0..5).map(|i| iso(Vec3::new(0.02 * i as f64, 0.0, 2.0), 0.05, 1e-12)).collect();
        let img = render_splat_image(&geoms, &[1.0; 15], 3, &f, &RenderSettings::default(), Exec::Serial);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> (Vec<GaussianGeom>, Vec<f64>) {
        let mut geoms = Vec::new();
        let mut payload = Vec::new();
        for _ in 0..n {
            let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
            geoms.push(GaussianGeom {
                mu: Vec3::new(r(-0.3, 0.3), r(-0.3, 0.3), r(1.5, 3.0)),
                rot: Rotation::new([r(-1.0, 1.0), r(-1.0, 1.0), r(-1.0, 1.0), r(-1.0, 1.0)]),
                scale_log: Vec3::new(r(-4.0, -2.5), r(-4.0, -2.5), r(-4.0, -2.5)),
                opacity_logit: r(-2.0, 2.0),
            });
            payload.extend([r(0.0, 1.0), r(0.0, 1.0), r(0.0, 1.0)]);
        }
        (geoms, payload)
    }

    #[test]
    fn transmittance_is_bounded_and_adding_invisible_splat_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = frame_32();
        let s = RenderSettings::default();
        for _ in 0..10 {
            let (mut geoms, mut payload) = random_scene(&mut rng, 30);
            let r = Rasterization::new(&geoms, &f, &s);
            let out = r.render(&payload, 3, &[0.0; 3], &s, Exec::Serial);
            assert!(out.final_transmittance.iter().all(|t| (0.0..=1.0).contains(t)));
            geoms.push(GaussianGeom { opacity_logit: f64::NEG_INFINITY, ..geoms[0] });
            payload.extend([5.0, 5.0, 5.0]);
            let out2 = Rasterization::new(&geoms, &f, &s).render(&payload, 3, &[0.0; 3], &s, Exec::Serial);
            assert_eq!(out.image, out2.image);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (geoms, payload) = random_scene(&mut rng, 60);
        let f = frame_32();
        let s = RenderSettings::default();
        let a = render_splat_image(&geoms, &payload, 3, &f, &s, Exec::Serial);
        let b = render_splat_image(&geoms, &payload, 3, &f, &s, Exec::Serial);
        let c = render_splat_image(&geoms, &payload, 3, &f, &s, Exec::Parallel);
        assert_eq!(a, b);
        for (x, y) in a.data.iter().zip(&c.data) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (geoms, payload) = random_scene(&mut rng, 10);
        let f = frame_32();
        let s = RenderSettings::default();
        let r = Rasterization::new(&geoms, &f, &s);
        let fwd = r.render(&payload, 3, &[0.0; 3], &s, Exec::Serial);
        let g = r.backward(&payload, 3, &[0.0; 3], &s, &fwd, &ImageBuffer::new(32, 32, 3), Exec::Serial);
        assert!(g.payload.iter().all(|&v| v == 0.0));
        assert!(g.opacity.iter().all(|&v| v == 0.0));
        assert!(g.mean2d.iter().all(|v| v == &[0.0, 0.0]));
    }

    #[test]
    fn single_splat_payload_gradient_is_opacity_at_mean() {
        let f = frame_32();
        let g = GaussianGeom { mu: Vec3::new(0.5 / 50.0, 0.5 / 50.0, 2.0), ..iso(Vec3::ZERO, 0.05, 0.7) };
        let s = RenderSettings::default();
        let r = Rasterization::new(&[g], &f, &s);
        let payload = [0.3, 0.3, 0.3];
        let fwd = r.render(&payload, 3, &[0.0; 3], &s, Exec::Serial);
        let mut up = ImageBuffer::new(32, 32, 3);
        up.set(16, 16, 0, 1.0);
        let grads = r.backward(&payload, 3, &[0.0; 3], &s, &fwd, &up, Exec::Serial);
        assert!((grads.payload[0] - 0.7).abs() < 1e-12);
    }

    /// Loss = Σ w ⊙ image for a fixed random weight image.
    fn weighted_loss(geoms: &[GaussianGeom], payload: &[f64], w: &ImageBuffer, f: &Frame, s: &RenderSettings) -> f64 {
        let img = render_splat_image(geoms, payload, 3, f, s, Exec::Serial);
        img.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    #[allow(clippy::type_complexity)]
    fn backward_matches_finite_differences() {
        // smooth support so finite differences never straddle a cutoff
        let s = RenderSettings { min_alpha: 0.0, extent_sigma: 8.0, ..RenderSettings::default() };
        let f = frame_32();
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (geoms, payload) = random_scene(&mut rng, 10);
            let w = ImageBuffer::from_data(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let r = Rasterization::new(&geoms, &f, &s);
            let fwd = r.render(&payload, 3, &[0.0; 3], &s, Exec::Serial);
            let sg = r.backward(&payload, 3, &[0.0; 3], &s, &fwd, &w, Exec::Serial);
            let gg = r.geometry_backward(&geoms, &sg, &s);
            let h = 1e-5;
            let fd = |mutate: &dyn Fn(&mut Vec<GaussianGeom>, &mut Vec<f64>, f64)| {
                let (mut ga, mut pa) = (geoms.clone(), payload.clone());
                mutate(&mut ga, &mut pa, h);
                let (mut gb, mut pb) = (geoms.clone(), payload.clone());
                mutate(&mut gb, &mut pb, -h);
                (weighted_loss(&ga, &pa, &w, &f, &s) - weighted_loss(&gb, &pb, &w, &f, &s)) / (2.0 * h)
            };
            for i in 0..geoms.len() {
                let chk = |num: f64, an: f64, what: &str| {
                    assert!(rel_err(num, an) < 1e-3, "seed {seed} gaussian {i} {what}: fd {num} an {an}");
                };
                for c in 0..3 {
                    chk(fd(&|_, p, d| p[i * 3 + c] += d), sg.payload[i * 3 + c], "payload");
                    chk(fd(&|g, _, d| g[i].mu[c] += d), gg[i].mu[c], "mu");
                    chk(fd(&|g, _, d| g[i].scale_log[c] += d), gg[i].scale_log[c], "scale");
                }
                for k in 0..4 {
                    chk(
                        fd(&|g, _, d| {
                            let mut q = g[i].rot.quat();
                            q[k] += d;
                            g[i].rot = Rotation::from_raw(q);
                        }),
                        gg[i].rot_q[k],
                        "rot",
                    );
                }
                chk(fd(&|g, _, d| g[i].opacity_logit += d), gg[i].opacity_logit, "opacity");
            }
        }
    }
}
