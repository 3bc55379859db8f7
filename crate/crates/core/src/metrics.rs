//! Image metrics: L1, SSIM (with gradient) and PSNR.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::image::ImageBuffer;
use crate::math;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean absolute difference and its gradient w.r.t. `a` (sign / count).
pub fn l1(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    a.check_same_shape(b)?;
    let n = a.data.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(a.data.len());
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        sum += d.abs();
        grad.push(if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    Ok((sum / n, grad))
}

/// `10 log10(1 / MSE)` with peak 1. Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * math::log10(1.0 / mse))
}

fn gaussian_kernel(radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (0..2 * radius + 1)
        .map(|i| {
            let x = i as f64 - radius as f64;
            math::exp(-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode correlation of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow x oh` map back to `w x h`.
fn filter_adjoint(map: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..n {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
/// Inputs are clamped to `[0, 1]`. Images smaller than the window use the
/// largest odd window that fits.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient w.r.t. `a` (zero where `a` was clamped).
pub fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    ssim_impl(a, b, true)
}

fn ssim_impl(a: &ImageBuffer, b: &ImageBuffer, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    a.check_same_shape(b)?;
    let (w, h, ch) = (a.width as usize, a.height as usize, a.channels as usize);
    let radius = ((SSIM_WINDOW - 1) / 2).min((w.min(h) - 1) / 2);
    let k = gaussian_kernel(radius);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n_win = (w - 2 * radius) * (h - 2 * radius);
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; a.data.len()] } else { Vec::new() };
    let plane = |img: &ImageBuffer, c: usize| -> Vec<f64> { (0..w * h).map(|p| img.data[p * ch + c].clamp(0.0, 1.0)).collect() };
    for c in 0..ch {
        let pa = plane(a, c);
        let pb = plane(b, c);
        let sq = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let saa = filter_valid(&sq(&pa, &pa), w, h, &k);
        let sbb = filter_valid(&sq(&pb, &pb), w, h, &k);
        let sab = filter_valid(&sq(&pa, &pb), w, h, &k);
        let mut d_mu = vec![0.0; n_win];
        let mut d_saa = vec![0.0; n_win];
        let mut d_sab = vec![0.0; n_win];
        let scale = 1.0 / (n_win * ch) as f64;
        for i in 0..n_win {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = saa[i] - ma * ma;
            let var_b = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = var_a + var_b + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s * scale;
            if want_grad {
                let den = b1 * b2;
                d_mu[i] = scale * ((2.0 * mb * a2 - 2.0 * mb * a1) / den - s * (2.0 * ma / b1 - 2.0 * ma / b2));
                d_saa[i] = scale * (-s / b2);
                d_sab[i] = scale * (2.0 * a1 / den);
            }
        }
        if want_grad {
            let g_mu = filter_adjoint(&d_mu, w, h, &k);
            let g_saa = filter_adjoint(&d_saa, w, h, &k);
            let g_sab = filter_adjoint(&d_sab, w, h, &k);
            for p in 0..w * h {
                let raw = a.data[p * ch + c];
                if !(0.0..=1.0).contains(&raw) {
                    continue;
                }
                grad[p * ch + c] = g_mu[p] + 2.0 * pa[p] * g_saa[p] + pb[p] * g_sab[p];
            }
        }
    }
    Ok((total, grad))
}
