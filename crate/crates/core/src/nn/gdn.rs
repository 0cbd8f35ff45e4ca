//! Generalized divisive normalization.
//!
//! ```text
//! gdn:  y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2)
//! igdn: y_i = x_i * sqrt(beta_i + sum_j gamma_ij * x_j^2)
//! ```
//!
//! The norm is taken across channels at each pixel. Stored parameters are
//! unconstrained; the effective values are `beta = softplus(raw) + 1e-6` and
//! `gamma = softplus(raw)`, so beta stays strictly positive and gamma
//! non-negative under any optimizer step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound added to the reparameterized beta.
pub const BETA_FLOOR: f64 = 1e-6;

pub fn softplus<T: Scalar>(x: T) -> T {
    let zero = T::zero();
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(zero) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus inverse needs a positive value");
    // log(e^y - 1) = y + log(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn effective_beta<T: Scalar>(raw: &[T]) -> Vec<T> {
    let floor = T::from_f64_lossy(BETA_FLOOR);
    raw.iter().map(|&r| softplus(r) + floor).collect()
}

pub fn effective_gamma<T: Scalar>(raw: &[T]) -> Vec<T> {
    raw.iter().map(|&r| softplus(r)).collect()
}

/// Chain rule through the softplus reparameterization (in place).
pub fn reparam_backward<T: Scalar>(raw: &[T], grad: &mut [T]) {
    for (g, &r) in grad.iter_mut().zip(raw) {
        *g *= sigmoid(r);
    }
}

/// Per-pixel norms `beta_i + sum_j gamma_ij x_j^2` for a `pixels x c` matrix.
fn norms<T: Scalar>(x: &[T], c: usize, beta: &[T], gamma: &[T]) -> Vec<T> {
    let pixels = x.len() / c;
    let sq: Vec<T> = x.iter().map(|&v| v * v).collect();
    let mut n = vec![T::zero(); x.len()];
    for px in n.chunks_exact_mut(c) {
        px.copy_from_slice(beta);
    }
    // n[p, i] += sum_j sq[p, j] * gamma[i, j]
    T::gemm(pixels, c, c, T::one(), &sq, false, gamma, true, T::one(), &mut n);
    n
}

/// Forward pass on a `pixels x c` buffer with effective parameters.
/// Returns the output and the per-pixel norms needed by the backward pass.
pub fn forward<T: Scalar>(x: &[T], c: usize, beta: &[T], gamma: &[T], inverse: bool) -> (Vec<T>, Vec<T>) {
    let n = norms(x, c, beta, gamma);
    let y = x
        .iter()
        .zip(&n)
        .map(|(&v, &nv)| if inverse { v * nv.sqrt() } else { v / nv.sqrt() })
        .collect();
    (y, n)
}

pub struct GdnGrads<T> {
    pub dx: Vec<T>,
    pub dbeta: Vec<T>,
    pub dgamma: Vec<T>,
}

/// Gradients with respect to the input and the effective parameters.
pub fn backward<T: Scalar>(
    x: &[T],
    norm: &[T],
    c: usize,
    gamma: &[T],
    dy: &[T],
    inverse: bool,
) -> GdnGrads<T> {
    let pixels = x.len() / c;
    let half = T::from_f64_lossy(0.5);
    // gdn:  dx_k = dy_k n_k^-1/2 - x_k sum_i a_i gamma_ik,  a_i = dy_i x_i n_i^-3/2
    // igdn: dx_k = dy_k n_k^1/2  + x_k sum_i a_i gamma_ik,  a_i = dy_i x_i n_i^-1/2
    let mut a = vec![T::zero(); x.len()];
    let mut dx = vec![T::zero(); x.len()];
    for idx in 0..x.len() {
        let s = norm[idx].sqrt();
        if inverse {
            a[idx] = dy[idx] * x[idx] / s;
            dx[idx] = dy[idx] * s;
        } else {
            a[idx] = dy[idx] * x[idx] / (norm[idx] * s);
            dx[idx] = dy[idx] / s;
        }
    }
    let mut ag = vec![T::zero(); x.len()];
    T::gemm(pixels, c, c, T::one(), &a, false, gamma, false, T::zero(), &mut ag);
    let sign = if inverse { T::one() } else { -T::one() };
    for idx in 0..x.len() {
        dx[idx] += sign * x[idx] * ag[idx];
    }
    let coef = sign * half;
    let mut dbeta = vec![T::zero(); c];
    for px in a.chunks_exact(c) {
        for (d, &v) in dbeta.iter_mut().zip(px) {
            *d += coef * v;
        }
    }
    let sq: Vec<T> = x.iter().map(|&v| v * v).collect();
    let mut dgamma = vec![T::zero(); c * c];
    T::gemm(c, pixels, c, coef, &a, true, &sq, false, T::zero(), &mut dgamma);
    GdnGrads { dx, dbeta, dgamma }
}

fn check_params<T: Scalar>(c: usize, beta: &[T], gamma: &[T]) -> Result<()> {
    if beta.len() != c || gamma.len() != c * c {
        return Err(Error::Shape(format!(
            "gdn over {c} channels needs beta[{c}] and gamma[{c}x{c}], got {} and {}",
            beta.len(),
            gamma.len()
        )));
    }
    if let Some(b) = beta.iter().find(|b| !(**b > T::zero())) {
        return Err(Error::Parameter(format!("gdn beta must be positive, found {b}")));
    }
    if let Some(g) = gamma.iter().find(|g| !(**g >= T::zero())) {
        return Err(Error::Parameter(format!("gdn gamma must be non-negative, found {g}")));
    }
    Ok(())
}

/// GDN over the last axis of `x` with effective parameters.
pub fn gdn<T: Scalar>(x: &Tensor<T>, beta: &[T], gamma: &[T]) -> Result<Tensor<T>> {
    let c = x.channels();
    check_params(c, beta, gamma)?;
    Tensor::from_vec(x.shape(), forward(x.data(), c, beta, gamma, false).0)
}

/// IGDN over the last axis of `x` with effective parameters.
pub fn igdn<T: Scalar>(x: &Tensor<T>, beta: &[T], gamma: &[T]) -> Result<Tensor<T>> {
    let c = x.channels();
    check_params(c, beta, gamma)?;
    Tensor::from_vec(x.shape(), forward(x.data(), c, beta, gamma, true).0)
}

/// Exact algebraic inverse of [`gdn`].
///
/// With `u = x^2` the forward map gives `u_i = y_i^2 (beta_i + sum_j gamma_ij u_j)`,
/// a linear system per pixel. Fails when `y` lies outside the range of `gdn`.
pub fn gdn_inverse<T: Scalar>(y: &Tensor<T>, beta: &[T], gamma: &[T]) -> Result<Tensor<T>> {
    let c = y.channels();
    check_params(c, beta, gamma)?;
    let beta: Vec<f64> = beta.iter().map(|v| v.as_f64()).collect();
    let gamma: Vec<f64> = gamma.iter().map(|v| v.as_f64()).collect();
    let mut out = Vec::with_capacity(y.len());
    for px in y.data().chunks_exact(c) {
        let y2: Vec<f64> = px.iter().map(|v| v.as_f64().powi(2)).collect();
        let mut m = vec![0.0; c * (c + 1)];
        for i in 0..c {
            for j in 0..c {
                m[i * (c + 1) + j] = f64::from(u8::from(i == j)) - y2[i] * gamma[i * c + j];
            }
            m[i * (c + 1) + c] = y2[i] * beta[i];
        }
        let u = solve_augmented(&mut m, c)
            .ok_or_else(|| Error::Argument("value outside the range of gdn".into()))?;
        for i in 0..c {
            if u[i] < -1e-12 {
                return Err(Error::Argument("value outside the range of gdn".into()));
            }
            let n: f64 = beta[i] + (0..c).map(|j| gamma[i * c + j] * u[j].max(0.0)).sum::<f64>();
            out.push(T::from_f64_lossy(px[i].as_f64() * n.sqrt()));
        }
    }
    Tensor::from_vec(y.shape(), out)
}

/// Gaussian elimination with partial pivoting on an `n x (n+1)` system.
fn solve_augmented(m: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let w = n + 1;
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a * w + col].abs().total_cmp(&m[b * w + col].abs()))?;
        if m[piv * w + col].abs() < 1e-300 {
            return None;
        }
        for k in 0..w {
            m.swap(col * w + k, piv * w + k);
        }
        for row in col + 1..n {
            let f = m[row * w + col] / m[col * w + col];
            for k in col..w {
                m[row * w + k] -= f * m[col * w + k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row * w + k] * x[k]).sum();
        x[row] = (m[row * w + n] - s) / m[row * w + row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn identity_when_gamma_zero_beta_one() {
        let x = Tensor::from_vec(&[2, 2, 3], rand_vec(12, 1)).unwrap();
        let y = gdn(&x, &[1.0; 3], &[0.0; 9]).unwrap();
        assert_eq!(y, x);
        assert_eq!(igdn(&x, &[1.0; 3], &[0.0; 9]).unwrap(), x);
    }

    #[test]
    fn zero_maps_to_zero() {
        let x = Tensor::<f64>::zeros(&[3, 3, 2]);
        let y = gdn(&x, &[0.5, 2.0], &[0.1, 0.3, 0.2, 0.4]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_nonpositive_beta() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2]);
        assert!(matches!(gdn(&x, &[1.0, 0.0], &[0.0; 4]), Err(Error::Parameter(_))));
        assert!(matches!(igdn(&x, &[1.0, 1.0], &[0.0, -0.1, 0.0, 0.0]), Err(Error::Parameter(_))));
    }

    #[test]
    fn exact_inverse_recovers_input() {
        let c = 4;
        let x = Tensor::from_vec(&[5, 5, c], rand_vec(100, 3)).unwrap();
        let beta: Vec<f64> = rand_vec(c, 4).iter().map(|v| v.abs() + 0.1).collect();
        let gamma: Vec<f64> = rand_vec(c * c, 5).iter().map(|v| v.abs() * 0.5).collect();
        let y = gdn(&x, &beta, &gamma).unwrap();
        let back = gdn_inverse(&y, &beta, &gamma).unwrap();
        let err: f64 = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err / x.sum_squares().sqrt() < 1e-10);
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-4, 0.1, 1.0, 5.0, 30.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = 3;
        let x = rand_vec(4 * c, 7);
        let dy = rand_vec(4 * c, 8);
        let beta = vec![0.7, 1.2, 0.9];
        let gamma: Vec<f64> = rand_vec(c * c, 9).iter().map(|v| v.abs() * 0.3).collect();
        for inverse in [false, true] {
            let loss = |x: &[f64], b: &[f64], g: &[f64]| -> f64 {
                forward(x, c, b, g, inverse).0.iter().zip(&dy).map(|(a, b)| a * b).sum()
            };
            let (_, n) = forward(&x, c, &beta, &gamma, inverse);
            let gr = backward(&x, &n, c, &gamma, &dy, inverse);
            let h = 1e-6;
            for i in 0..x.len() {
                let mut p = x.clone();
                p[i] += h;
                let mut m = x.clone();
                m[i] -= h;
                let fd = (loss(&p, &beta, &gamma) - loss(&m, &beta, &gamma)) / (2.0 * h);
                assert!((fd - gr.dx[i]).abs() < 1e-7, "dx[{i}] inverse={inverse}");
            }
            for i in 0..c {
                let mut p = beta.clone();
                p[i] += h;
                let mut m = beta.clone();
                m[i] -= h;
                let fd = (loss(&x, &p, &gamma) - loss(&x, &m, &gamma)) / (2.0 * h);
                assert!((fd - gr.dbeta[i]).abs() < 1e-7);
            }
            for i in 0..c * c {
                let mut p = gamma.clone();
                p[i] += h;
                let mut m = gamma.clone();
                m[i] -= h;
                let fd = (loss(&x, &beta, &p) - loss(&x, &beta, &m)) / (2.0 * h);
                assert!((fd - gr.dgamma[i]).abs() < 1e-7);
            }
        }
    }
}
