//! Separation-based digital reference: JPEG source coding sent over an ideal,
//! capacity-achieving channel code.
//!
//! The image gets through only if some JPEG quality fits within the capacity
//! budget `B = k log2(1 + SNR)` bits. Otherwise the receiver has nothing to
//! decode and the reconstruction is a flat mid-gray image.

use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;

use crate::channel::{budget_for, RateBudget};
use crate::data::RawImage;
use crate::error::{Error, Result};

pub const MIN_QUALITY: u8 = 1;
pub const MAX_QUALITY: u8 = 95;
pub const FAILURE_GRAY: u8 = 128;

pub fn encode_jpeg(img: &RawImage, quality: u8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality)
        .encode(&img.pixels, img.width as u32, img.height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out)
}

pub fn decode_jpeg(bytes: &[u8], source_id: &str) -> Result<RawImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Encode(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    RawImage::new(h as usize, w as usize, img.into_raw(), source_id)
}

/// Encoded size in bytes at every quality on the standard grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityTable {
    pub sizes: Vec<(u8, usize)>,
}

impl QualityTable {
    pub fn build(img: &RawImage) -> Result<Self> {
        let sizes = (MIN_QUALITY..=MAX_QUALITY)
            .map(|q| Ok((q, encode_jpeg(img, q)?.len())))
            .collect::<Result<Vec<_>>>()?;
        Ok(QualityTable { sizes })
    }

    /// Smallest encoded size in bits over the grid.
    pub fn min_bits(&self) -> usize {
        self.sizes.iter().map(|&(_, s)| s * 8).min().unwrap_or(usize::MAX)
    }

    /// Highest quality whose encoded size fits in `bits`.
    pub fn best_fit(&self, bits: f64) -> Option<(u8, usize)> {
        self.sizes
            .iter()
            .rev()
            .find(|&&(_, s)| (s * 8) as f64 <= bits)
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub reconstruction: RawImage,
    pub failed: bool,
    pub bits_used: usize,
    pub quality: Option<u8>,
    pub bit_budget: f64,
}

pub fn digital_baseline(img: &RawImage, budget: &RateBudget) -> Result<BaselineResult> {
    digital_baseline_with_table(img, &QualityTable::build(img)?, budget)
}

pub fn digital_baseline_with_table(img: &RawImage, table: &QualityTable, budget: &RateBudget) -> Result<BaselineResult> {
    match table.best_fit(budget.bit_budget) {
        Some((q, bytes)) => {
            let encoded = encode_jpeg(img, q)?;
            debug_assert_eq!(encoded.len(), bytes);
            Ok(BaselineResult {
                reconstruction: decode_jpeg(&encoded, &img.source_id)?,
                failed: false,
                bits_used: bytes * 8,
                quality: Some(q),
                bit_budget: budget.bit_budget,
            })
        }
        None => Ok(BaselineResult {
            reconstruction: RawImage::filled(img.height, img.width, [FAILURE_GRAY; 3], img.source_id.clone()),
            failed: true,
            bits_used: 0,
            quality: None,
            bit_budget: budget.bit_budget,
        }),
    }
}

/// Lowest SNR (dB) at which the baseline succeeds for `real_count` channel
/// reals, located by bisection on the pass/fail outcome against actual
/// encoded sizes. Returns the bracket `(fail_db, pass_db)` once it is
/// narrower than `tol_db`.
pub fn failure_threshold(img: &RawImage, table: &QualityTable, real_count: usize, tol_db: f64) -> Result<(f64, f64)> {
    let n = 3 * img.height * img.width;
    let passes = |snr: f64| -> Result<bool> {
        let b = budget_for(n, real_count, snr);
        Ok(!digital_baseline_with_table(img, table, &b)?.failed)
    };
    let (mut lo, mut hi) = (-50.0f64, 200.0f64);
    if passes(lo)? || !passes(hi)? {
        return Err(Error::Argument(format!("no pass/fail transition in [{lo}, {hi}] dB")));
    }
    while hi - lo > tol_db {
        let mid = 0.5 * (lo + hi);
        if passes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::capacity_bits;

    fn img() -> RawImage {
        let mut px = Vec::new();
        for y in 0..32 {
            for x in 0..32 {
                px.extend_from_slice(&[(x * 8) as u8, (y * 8) as u8, ((x ^ y) * 8) as u8]);
            }
        }
        RawImage::new(32, 32, px, "t").unwrap()
    }

    #[test]
    fn zero_budget_fails_with_gray() {
        let b = budget_for(3 * 32 * 32, 0, 10.0);
        let r = digital_baseline(&img(), &b).unwrap();
        assert!(r.failed);
        assert_eq!(r.bits_used, 0);
        assert!(r.reconstruction.pixels.iter().all(|&p| p == FAILURE_GRAY));
    }

    #[test]
    fn huge_budget_picks_max_quality() {
        let b = budget_for(3 * 32 * 32, 1 << 20, 30.0);
        let r = digital_baseline(&img(), &b).unwrap();
        assert_eq!(r.quality, Some(MAX_QUALITY));
        assert!(!r.failed);
        assert!(r.bits_used as f64 <= r.bit_budget);
    }

    #[test]
    fn threshold_brackets_the_analytic_crossing() {
        let im = img();
        let table = QualityTable::build(&im).unwrap();
        let reals = 1536;
        let (lo, hi) = failure_threshold(&im, &table, reals, 1e-6).unwrap();
        assert!(capacity_bits(reals / 2, lo) < table.min_bits() as f64);
        assert!(capacity_bits(reals / 2, hi) >= table.min_bits() as f64);
    }
}
