//! Transmit power normalization, the AWGN channel, and rate accounting.
//!
//! The channel is simulated on real symbols. A frame of `2k` reals stands for
//! `k` complex channel uses; each real component sees noise of variance
//! `sigma^2 = 10^(-snr/10)` so that measured signal-to-noise power equals the
//! configured SNR at unit transmit power.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Power-normalized transmit symbols for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame<T> {
    pub symbols: Vec<T>,
    /// Norm of the latent before scaling, kept for the backward pass.
    pub latent_norm: T,
}

impl<T: Scalar> SymbolFrame<T> {
    /// Complex channel uses.
    pub fn k(&self) -> usize {
        self.symbols.len() / 2
    }

    pub fn power(&self) -> f64 {
        mean_power(&self.symbols)
    }
}

pub fn mean_power<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / x.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// SNR in dB; `f64::INFINITY` means a noiseless channel.
    pub snr_db: f64,
    pub seed: u64,
}

/// `x = sqrt(n) * r / |r|`, so the mean squared symbol is exactly one.
pub fn power_normalize<T: Scalar>(latent: &[T]) -> Result<SymbolFrame<T>> {
    // accumulate in f64 so f32 frames also meet the power tolerance
    let norm = latent.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroLatent { sample: 0 });
    }
    let scale = (latent.len() as f64).sqrt() / norm;
    Ok(SymbolFrame {
        symbols: latent.iter().map(|&v| T::from_f64_lossy(v.as_f64() * scale)).collect(),
        latent_norm: T::from_f64_lossy(norm),
    })
}

/// Gradient of [`power_normalize`]: `sqrt(n)/|r| * (g - u (u . g))`, `u = r/|r|`.
pub fn power_normalize_backward<T: Scalar>(frame: &SymbolFrame<T>, grad: &[T]) -> Vec<T> {
    let n = T::from_f64_lossy(frame.symbols.len() as f64);
    let sqrt_n = n.sqrt();
    // u = x / sqrt(n)
    let dot: T = frame.symbols.iter().zip(grad).map(|(&x, &g)| x * g).sum::<T>() / sqrt_n;
    let scale = sqrt_n / frame.latent_norm;
    frame
        .symbols
        .iter()
        .zip(grad)
        .map(|(&x, &g)| scale * (g - x / sqrt_n * dot))
        .collect()
}

/// Noise variance per real symbol at unit signal power.
pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// Draws an i.i.d. zero-mean Gaussian noise vector of variance `sigma^2`.
pub fn noise<T: Scalar, R: Rng>(len: usize, snr_db: f64, rng: &mut R) -> Vec<T> {
    let sigma = snr_to_sigma2(snr_db).sqrt();
    if sigma == 0.0 {
        return vec![T::zero(); len];
    }
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(sigma * z)
        })
        .collect()
}

/// `y = x + w`. The gradient of `y` with respect to `x` is the identity.
pub fn awgn<T: Scalar, R: Rng>(frame: &SymbolFrame<T>, snr_db: f64, rng: &mut R) -> Vec<T> {
    let w = noise::<T, R>(frame.symbols.len(), snr_db, rng);
    frame.symbols.iter().zip(&w).map(|(&x, &n)| x + n).collect()
}

/// Measured SNR in dB of `received` against `sent`.
pub fn empirical_snr_db<T: Scalar>(sent: &[T], received: &[T]) -> f64 {
    let ps = mean_power(sent);
    let pn = sent
        .iter()
        .zip(received)
        .map(|(a, b)| (b.as_f64() - a.as_f64()).powi(2))
        .sum::<f64>()
        / sent.len().max(1) as f64;
    10.0 * (ps / pn).log10()
}

/// Capacity-derived bit budget for one image at an operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBudget {
    /// Source dimensions, `3hw`.
    pub n: usize,
    /// Real channel uses, `h/t * w/t * e`.
    pub real_count: usize,
    /// Complex channel uses, `real_count / 2`.
    pub k: usize,
    /// `real_count / n = e / (3t^2)`.
    pub ratio: f64,
    /// Maximum reliable source rate in bits per source dimension.
    pub r_max: f64,
    /// Bits per image the channel can carry at capacity.
    pub bit_budget: f64,
    pub snr_db: f64,
}

pub fn capacity_bits(k: usize, snr_db: f64) -> f64 {
    let snr = 10f64.powf(snr_db / 10.0);
    k as f64 * (1.0 + snr).log2()
}

pub fn rate_accounting(cfg: &ModelConfig, h: usize, w: usize, snr_db: f64) -> Result<RateBudget> {
    if h % cfg.t != 0 || w % cfg.t != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by t={}", cfg.t)));
    }
    Ok(budget_for(3 * h * w, (h / cfg.t) * (w / cfg.t) * cfg.e, snr_db))
}

/// Budget for `real_count` channel reals carrying `n` source dimensions.
pub fn budget_for(n: usize, real_count: usize, snr_db: f64) -> RateBudget {
    let k = real_count / 2;
    let bit_budget = capacity_bits(k, snr_db);
    RateBudget {
        n,
        real_count,
        k,
        ratio: real_count as f64 / n as f64,
        r_max: bit_budget / n as f64,
        bit_budget,
        snr_db,
    }
}
