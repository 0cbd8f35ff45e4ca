//! Model hyperparameters and their cross-field constraints.

use crate::error::{Error, Result};

/// Which semantic branches a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoCaption,
    NoSegmentation,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoCaption, Variant::NoSegmentation];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCaption => "no_caption",
            Variant::NoSegmentation => "no_segmentation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_caption" => Ok(Variant::NoCaption),
            "no_segmentation" => Ok(Variant::NoSegmentation),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }

    pub fn has_caption(&self) -> bool {
        *self != Variant::NoCaption
    }

    pub fn has_segmentation(&self) -> bool {
        *self != Variant::NoSegmentation
    }

    /// Latent channel count for `l` levels.
    pub fn latent_width(&self, l: usize) -> usize {
        match self {
            Variant::Full => 3 * l - 4,
            Variant::NoCaption => 3 * l - 5,
            Variant::NoSegmentation => 3 * l - 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Spatial downsampling factor between image and latent grid.
    pub t: usize,
    /// Number of semantic levels (encoder branches).
    pub l: usize,
    /// Transmitted latent channels.
    pub e: usize,
    /// Decoder module output width (half of it for the caption and
    /// segmentation decoders).
    pub o: usize,
    /// Kernel size for the caption, segmentation, and low-level encoders.
    pub base_kernel: usize,
    pub seed: u64,
    /// Image size the model is built for; the caption projection depends on it.
    pub height: usize,
    pub width: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub fusion_hidden: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t: 8,
            l: 5,
            e: 11,
            o: 32,
            base_kernel: 3,
            seed: 0,
            height: 128,
            width: 128,
            enc_hidden: 32,
            dec_hidden: 32,
            fusion_hidden: 64,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn latent_width(&self) -> usize {
        self.variant.latent_width(self.l)
    }

    pub fn latent_h(&self) -> usize {
        self.height / self.t
    }

    pub fn latent_w(&self) -> usize {
        self.width / self.t
    }

    /// Real channel uses per image.
    pub fn symbol_count(&self) -> usize {
        self.latent_h() * self.latent_w() * self.e
    }

    /// Source dimensions per image, `3hw`.
    pub fn source_dims(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if ![2, 4, 8, 16].contains(&self.t) {
            return fail(format!("t must be one of 2, 4, 8, 16; got {}", self.t));
        }
        if self.l < 3 {
            return fail(format!("l must be at least 3; got {}", self.l));
        }
        let width = self.latent_width();
        if self.e < 1 || self.e > width {
            return fail(format!(
                "e must be in 1..={width} for l={} ({}); got {}",
                self.l,
                self.variant.as_str(),
                self.e
            ));
        }
        if self.o < 2 || self.o % 2 != 0 {
            return fail(format!("o must be even and positive; got {}", self.o));
        }
        if self.base_kernel < 3 || self.base_kernel % 2 == 0 {
            return fail(format!("base_kernel must be odd and >= 3; got {}", self.base_kernel));
        }
        if self.height == 0 || self.width == 0 || self.height % self.t != 0 || self.width % self.t != 0 {
            return fail(format!(
                "image size {}x{} must be positive and divisible by t={}",
                self.height, self.width, self.t
            ));
        }
        if self.enc_hidden == 0 || self.dec_hidden == 0 || self.fusion_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Channel uses per source dimension, `e / (3 t^2)`, as a reduced fraction.
pub fn ratio_fraction(e: usize, t: usize) -> (usize, usize) {
    let (num, den) = (e, 3 * t * t);
    let g = gcd(num, den);
    (num / g, den / g)
}

/// Inverse of [`ratio_fraction`]: the `e` giving `num/den` at factor `t`.
pub fn e_for_ratio(num: usize, den: usize, t: usize) -> Result<usize> {
    let scaled = num * 3 * t * t;
    if den == 0 || scaled % den != 0 {
        return Err(Error::Config(format!("ratio {num}/{den} is not reachable at t={t}")));
    }
    Ok(scaled / den)
}

/// Parses `"1/48"` (or a plain integer) into a fraction.
pub fn parse_ratio(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("ratio {s:?} is not of the form a/b"));
    match s.split_once('/') {
        Some((a, b)) => Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)),
        None => Ok((s.trim().parse().map_err(|_| bad())?, 1)),
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}
