//! Frame metrics on `[0, 1]` images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Maps a model-range frame (`[-1, 1]`) to `[0, 1]`, clamping strays.
pub fn to_unit_range(frame: &Tensor) -> Tensor {
    frame.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 0.5)
}

pub fn mse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    pred.expect_same_dims(gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(pred: &Tensor, gt: &Tensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?, peak))
}

/// Channel mean of a `[C, H, W]` image.
pub fn grayscale(img: &Tensor) -> Vec<f64> {
    let (c, h, w) = img.chw();
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(img.channel(ch)) {
            *o += v / c as f64;
        }
    }
    out
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11x11 Gaussian windows that fit inside the image
/// (grayscale by channel mean, dynamic range 1). Images smaller than the
/// window use one global, uniformly weighted window.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    pred.expect_same_dims(gt)?;
    if pred.dims().len() != 3 {
        return Err(Error::Structural(format!(
            "ssim needs [C, H, W], got {:?}",
            pred.dims()
        )));
    }
    let (_, h, w) = pred.chw();
    let (x, y) = (grayscale(pred), grayscale(gt));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = (h * w) as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
        let cxy = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        return Ok(ssim_term(mx, my, vx, vy, cxy));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let exx = filter_valid(&prod(&x, &x), h, w, &taps);
    let eyy = filter_valid(&prod(&y, &y), h, w, &taps);
    let exy = filter_valid(&prod(&x, &y), h, w, &taps);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let vx = exx[i] - mx[i] * mx[i];
            let vy = eyy[i] - my[i] * my[i];
            let cxy = exy[i] - mx[i] * my[i];
            ssim_term(mx[i], my[i], vx, vy, cxy)
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct FrameScores {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// All three metrics for model-range frames.
pub fn frame_scores(pred: &Tensor, gt: &Tensor) -> Result<FrameScores> {
    let (p, g) = (to_unit_range(pred), to_unit_range(gt));
    let m = mse(&p, &g)?;
    Ok(FrameScores {
        mse: m,
        psnr: psnr_from_mse(m, 1.0),
        ssim: ssim(&p, &g)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_anchors() {
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
        assert_eq!(psnr_from_mse(0.0, 1.0), PSNR_CAP_DB);
        let a = Tensor::zeros(&[3, 4, 4]);
        let b = Tensor::full(&[3, 4, 4], 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }

    #[test]
    fn small_images_use_global_window() {
        let a = Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
