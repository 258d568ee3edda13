//! Kernel similarity (MNC) and image quality (PSNR, SSIM).

use ndarray::{s, Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

/// Reported in place of +inf for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Maximum over all integer shifts of the normalized cross-correlation
/// `<a shifted, b> / (|a| |b|)`, searched exhaustively over the full
/// `(2K-1)²` range with zeros outside the kernels.
pub fn mnc(estimate: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    if estimate.iter().any(|&v| v < 0.0) || reference.iter().any(|&v| v < 0.0) {
        return Err(Error::Param("MNC expects non-negative kernels".into()));
    }
    let na = estimate.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Param("MNC is undefined for a zero-norm kernel".into()));
    }
    let (ah, aw) = estimate.dim();
    let (bh, bw) = reference.dim();
    // Sparse taps of the estimate keep the exhaustive search cheap.
    let taps: Vec<(isize, isize, f64)> = estimate
        .indexed_iter()
        .filter(|(_, &v)| v != 0.0)
        .map(|((i, j), &v)| (i as isize, j as isize, v))
        .collect();
    let mut best = 0.0f64;
    for dy in -(ah as isize - 1)..bh as isize {
        for dx in -(aw as isize - 1)..bw as isize {
            let mut acc = 0.0;
            for &(i, j, v) in &taps {
                let (y, x) = (i + dy, j + dx);
                if y >= 0 && x >= 0 && (y as usize) < bh && (x as usize) < bw {
                    acc += v * reference[[y as usize, x as usize]];
                }
            }
            best = best.max(acc);
        }
    }
    Ok((best / (na * nb)).min(1.0))
}

fn check_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// PSNR in dB with the given peak; capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Array3<f64>, y: &Array3<f64>, peak: f64) -> Result<f64> {
    check_same(x, y)?;
    let mse = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with a 1-D window.
fn filter_valid(img: ArrayView2<f64>, win: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = win.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..n).map(|k| win[k] * img[[y, x + k]]).sum();
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|k| win[k] * rows[[y + k, x]]).sum();
        }
    }
    out
}

fn ssim_channel(x: ArrayView2<f64>, y: ArrayView2<f64>, win: &[f64], peak: f64) -> f64 {
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mx = filter_valid(x, win);
    let my = filter_valid(y, win);
    let xx = filter_valid((&x * &x).view(), win);
    let yy = filter_valid((&y * &y).view(), win);
    let xy = filter_valid((&x * &y).view(), win);
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let sxx = xx.as_slice().unwrap()[i] - a * a;
        let syy = yy.as_slice().unwrap()[i] - b * b;
        let sxy = xy.as_slice().unwrap()[i] - a * b;
        acc += ((2.0 * a * b + c1) * (2.0 * sxy + c2)) / ((a * a + b * b + c1) * (sxx + syy + c2));
    }
    acc / mx.len() as f64
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, averaged over channels. Images smaller than the window use a
/// window clipped to the image size.
pub fn ssim(x: &Array3<f64>, y: &Array3<f64>) -> Result<f64> {
    check_same(x, y)?;
    let (h, w, ch) = x.dim();
    let size = 11.min(h).min(w);
    let win = gaussian_window(size, 1.5);
    let total: f64 = (0..ch)
        .map(|c| ssim_channel(x.slice(s![.., .., c]), y.slice(s![.., .., c]), &win, 1.0))
        .sum();
    Ok(total / ch as f64)
}

/// Removes a `border`-pixel frame; metrics on deblurred images use
/// `border = K` so boundary-model differences are excluded.
pub fn central_crop(img: &Array3<f64>, border: usize) -> Result<Array3<f64>> {
    let (h, w, _) = img.dim();
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::Shape(format!("border {border} leaves nothing of {h}x{w}")));
    }
    Ok(img.slice(s![border..h - border, border..w - border, ..]).to_owned())
}
