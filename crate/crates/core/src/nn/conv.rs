//! Channels-last 2-D convolution and transpose convolution via im2col + GEMM.
//!
//! A transpose convolution is computed as the adjoint of the ordinary
//! convolution that maps its output grid back onto its input grid, so both
//! ops share the same geometry, lowering, and gradient code.

use crate::scalar::Scalar;

/// Geometry of a "same"-padded convolution from a `h x w x c` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Lowers `x` (`h x w x c`) into a `(out_h*out_w) x (k*k*c)` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let pad = g.pad() as isize;
    let mut cols = vec![T::zero(); oh * ow * pl];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.c;
                    let dst = (ky * g.k + kx) * g.c;
                    row[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the `h x w x c` grid.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let pad = g.pad() as isize;
    let mut x = vec![T::zero(); g.h * g.w * g.c];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * pl..(oy * ow + ox + 1) * pl];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c;
                    let src = (ky * g.k + kx) * g.c;
                    for (d, &s) in x[dst..dst + g.c].iter_mut().zip(&row[src..src + g.c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    let c = bias.len();
    for px in y.chunks_exact_mut(c) {
        for (v, &b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], c: usize) -> Vec<T> {
    let mut g = vec![T::zero(); c];
    for px in dy.chunks_exact(c) {
        for (acc, &v) in g.iter_mut().zip(px) {
            *acc += v;
        }
    }
    g
}

/// Convolution forward. `kernel` is `[k, k, cin, cout]`; `g` describes the input.
pub fn conv_forward<T: Scalar>(x: &[T], g: &ConvGeometry, kernel: &[T], bias: &[T]) -> Vec<T> {
    let cout = bias.len();
    let cols = im2col(x, g);
    let p = g.out_pixels();
    let mut y = vec![T::zero(); p * cout];
    T::gemm(p, g.patch_len(), cout, T::one(), &cols, false, kernel, false, T::zero(), &mut y);
    add_bias(&mut y, bias);
    y
}

pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dkernel: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn conv_backward<T: Scalar>(
    x: &[T],
    g: &ConvGeometry,
    kernel: &[T],
    cout: usize,
    dy: &[T],
) -> ConvGrads<T> {
    let cols = im2col(x, g);
    let (p, pl) = (g.out_pixels(), g.patch_len());
    let mut dkernel = vec![T::zero(); pl * cout];
    T::gemm(pl, p, cout, T::one(), &cols, true, dy, false, T::zero(), &mut dkernel);
    let mut dcols = vec![T::zero(); p * pl];
    T::gemm(p, cout, pl, T::one(), dy, false, kernel, true, T::zero(), &mut dcols);
    ConvGrads {
        dx: col2im(&dcols, g),
        dkernel,
        dbias: bias_grad(dy, cout),
    }
}

/// Geometry of the convolution whose adjoint is a transpose convolution from
/// `h x w x cin` with the given stride: its input grid is the upsampled output.
pub fn transpose_geometry(h: usize, w: usize, cout: usize, k: usize, stride: usize) -> ConvGeometry {
    ConvGeometry {
        h: h * stride,
        w: w * stride,
        c: cout,
        k,
        stride,
    }
}

/// Transpose convolution forward. `x` is `h x w x cin`, `kernel` is
/// `[k, k, cout, cin]`, output is `(h*stride) x (w*stride) x cout`.
pub fn conv_transpose_forward<T: Scalar>(
    x: &[T],
    g: &ConvGeometry,
    cin: usize,
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let p = g.out_pixels();
    let pl = g.patch_len();
    let mut cols = vec![T::zero(); p * pl];
    T::gemm(p, cin, pl, T::one(), x, false, kernel, true, T::zero(), &mut cols);
    let mut y = col2im(&cols, g);
    add_bias(&mut y, bias);
    y
}

pub fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    g: &ConvGeometry,
    cin: usize,
    kernel: &[T],
    dy: &[T],
) -> ConvGrads<T> {
    let dcols = im2col(dy, g);
    let (p, pl) = (g.out_pixels(), g.patch_len());
    let mut dx = vec![T::zero(); p * cin];
    T::gemm(p, pl, cin, T::one(), &dcols, false, kernel, false, T::zero(), &mut dx);
    let mut dkernel = vec![T::zero(); pl * cin];
    T::gemm(pl, p, cin, T::one(), &dcols, true, x, false, T::zero(), &mut dkernel);
    ConvGrads {
        dx,
        dkernel,
        dbias: bias_grad(dy, g.c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn direct_conv(x: &[f64], g: &ConvGeometry, kernel: &[f64], cout: usize) -> Vec<f64> {
        let pad = g.pad() as isize;
        let mut y = vec![0.0; g.out_pixels() * cout];
        for oy in 0..g.out_h() {
            for ox in 0..g.out_w() {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - pad;
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            for ci in 0..g.c {
                                let xv = x[(iy as usize * g.w + ix as usize) * g.c + ci];
                                let kv = kernel[((ky * g.k + kx) * g.c + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    y[(oy * g.out_w() + ox) * cout + co] = acc;
                }
            }
        }
        y
    }

    fn seq(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * f).sin()).collect()
    }

    #[test]
    fn strided_shapes_halve() {
        for k in [3, 5, 7] {
            let g = ConvGeometry { h: 64, w: 32, c: 3, k, stride: 2 };
            assert_eq!((g.out_h(), g.out_w()), (32, 16));
        }
        let g = ConvGeometry { h: 9, w: 9, c: 1, k: 3, stride: 1 };
        assert_eq!((g.out_h(), g.out_w()), (9, 9));
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let g = ConvGeometry { h: 7, w: 6, c: 2, k: 5, stride: 2 };
        let cout = 3;
        let x = seq(g.h * g.w * g.c, 0.3);
        let kern = seq(g.patch_len() * cout, 0.7);
        let y = conv_forward(&x, &g, &kern, &[0.0; 3]);
        let want = direct_conv(&x, &g, &kern, cout);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeometry { h: 5, w: 4, c: 2, k: 3, stride: 2 };
        let x = seq(g.h * g.w * g.c, 0.9);
        let c = seq(g.out_pixels() * g.patch_len(), 0.4);
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transpose_conv_doubles_grid() {
        let (h, w, cin, cout) = (4, 3, 2, 5);
        let g = transpose_geometry(h, w, cout, 3, 2);
        assert_eq!((g.out_h(), g.out_w()), (h, w));
        let x = seq(h * w * cin, 0.2);
        let kern = seq(g.patch_len() * cin, 0.5);
        let y = conv_transpose_forward(&x, &g, cin, &kern, &[0.0; 5]);
        assert_eq!(y.len(), 8 * 6 * cout);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let g = transpose_geometry(3, 3, 4, 3, 2);
        let y = conv_transpose_forward(&[0.0f64; 18], &g, 2, &seq(g.patch_len() * 2, 0.1), &[0.0; 4]);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
