//! Reconstruction quality metrics on 8-bit images.

use crate::data::RawImage;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn check_shapes(a: &RawImage, b: &RawImage) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "metric inputs are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels, in 8-bit units.
pub fn mse_pixels(reference: &RawImage, reconstruction: &RawImage) -> Result<f64> {
    check_shapes(reference, reconstruction)?;
    let sum: f64 = reference
        .pixels
        .iter()
        .zip(&reconstruction.pixels)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.pixels.len() as f64)
}

/// `10 log10(255^2 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(reference: &RawImage, reconstruction: &RawImage) -> Result<f64> {
    let mse = mse_pixels(reference, reconstruction)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Formats a PSNR for tables; infinity is written as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// ITU-R BT.601 luma, unrounded.
pub fn luminance(img: &RawImage) -> Vec<f64> {
    img.pixels
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                acc += t * x[y * w + ox + i];
            }
            rows[y * ow + ox] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (i, &t) in taps.iter().enumerate() {
                acc += t * rows[(oy + i) * ow + ox];
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

/// Mean local SSIM on luminance with an 11x11 Gaussian window (sigma 1.5).
/// Images smaller than the window fall back to whole-image statistics.
pub fn ssim(reference: &RawImage, reconstruction: &RawImage) -> Result<f64> {
    check_shapes(reference, reconstruction)?;
    let (h, w) = (reference.height, reference.width);
    let x = luminance(reference);
    let y = luminance(reconstruction);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Ok(global_ssim(&x, &y));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let mxx = filter_valid(&xx, h, w, &taps);
    let myy = filter_valid(&yy, h, w, &taps);
    let mxy = filter_valid(&xy, h, w, &taps);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            ssim_term(
                mx[i],
                my[i],
                mxx[i] - mx[i] * mx[i],
                myy[i] - my[i] * my[i],
                mxy[i] - mx[i] * my[i],
            )
        })
        .sum();
    Ok(total / n as f64)
}

fn global_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    ssim_term(mx, my, vx, vy, cxy)
}

/// Per-image and mean metrics for a set of reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<(f64, f64)>,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(references: &[RawImage], reconstructions: &[RawImage]) -> Result<Self> {
        if references.len() != reconstructions.len() || references.is_empty() {
            return Err(Error::Shape(format!(
                "{} references for {} reconstructions",
                references.len(),
                reconstructions.len()
            )));
        }
        let per_image = references
            .iter()
            .zip(reconstructions)
            .map(|(a, b)| Ok((psnr(a, b)?, ssim(a, b)?)))
            .collect::<Result<Vec<_>>>()?;
        let n = per_image.len() as f64;
        Ok(MetricReport {
            psnr_db: per_image.iter().map(|p| p.0).sum::<f64>() / n,
            ssim: per_image.iter().map(|p| p.1).sum::<f64>() / n,
            per_image,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> RawImage {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 255) / (w - 1) + y * 3).min(255) as u8;
                px.extend_from_slice(&[v, v, v]);
            }
        }
        RawImage::new(h, w, px, "ramp").unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = ramp(8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
        let x = RawImage::filled(4, 4, [100, 100, 100], "x");
        let y = RawImage::filled(4, 4, [116, 84, 116], "y");
        assert!((psnr(&x, &y).unwrap() - 24.048).abs() < 1e-3);
        let black = RawImage::filled(2, 2, [0, 0, 0], "b");
        let white = RawImage::filled(2, 2, [255, 255, 255], "w");
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = ramp(16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = RawImage::new(16, 16, a.pixels.iter().map(|&p| 255 - p).collect(), "inv").unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn small_images_use_global_statistics() {
        let a = ramp(6, 9);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let x = luminance(&a);
        let b = RawImage::filled(6, 9, [10, 10, 10], "c");
        assert_eq!(ssim(&a, &b).unwrap(), global_ssim(&x, &luminance(&b)));
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(psnr(&ramp(4, 4), &ramp(4, 5)).is_err());
        assert!(ssim(&ramp(4, 4), &ramp(5, 4)).is_err());
    }

    #[test]
    fn taps_are_normalized() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[0] - t[10]).abs() < 1e-18);
    }
}
