//! Per-sample layers with explicit forward caches and backward passes.
//!
//! Activations are single-sample `h x w x c` tensors (or flat vectors for
//! [`Layer::Dense`]). Batching happens one level up.

use rand::Rng;

use super::conv::{self, ConvGeometry};
use super::gdn;
use super::params::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Initial effective value of GDN off-diagonal couplings. Exactly zero is not
/// reachable through softplus.
pub const GDN_OFF_DIAGONAL_INIT: f64 = 1e-4;
pub const GDN_DIAGONAL_INIT: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { name: String, nin: usize, nout: usize },
    Conv { name: String, k: usize, stride: usize, cin: usize, cout: usize },
    ConvTranspose { name: String, k: usize, stride: usize, cin: usize, cout: usize },
    Gdn { name: String, channels: usize, inverse: bool },
    Prelu { name: String, channels: usize },
    Sigmoid,
}

enum Cache<T> {
    None,
    Norm(Vec<T>),
    Output(Vec<T>),
}

/// Values kept from a forward pass for the matching backward pass.
pub struct Tape<T> {
    inputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect()
}

impl Layer {
    /// Inserts freshly initialized parameters for this layer.
    pub fn init<T: Scalar, R: Rng>(&self, params: &mut ParameterSet<T>, rng: &mut R) {
        match self {
            Layer::Dense { name, nin, nout } => {
                let bound = (3.0 / *nin as f64).sqrt();
                params.insert(format!("{name}.weight"), tensor(&[*nin, *nout], uniform(rng, nin * nout, bound)));
                params.insert(format!("{name}.bias"), Tensor::zeros(&[*nout]));
            }
            Layer::Conv { name, k, cin, cout, .. } => {
                let fan_in = (k * k * cin) as f64;
                let bound = (3.0 / fan_in).sqrt();
                params.insert(format!("{name}.kernel"), tensor(&[*k, *k, *cin, *cout], uniform(rng, k * k * cin * cout, bound)));
                params.insert(format!("{name}.bias"), Tensor::zeros(&[*cout]));
            }
            Layer::ConvTranspose { name, k, stride, cin, cout } => {
                let fan_in = ((k * k * cin) as f64 / (stride * stride) as f64).max(1.0);
                let bound = (3.0 / fan_in).sqrt();
                params.insert(format!("{name}.kernel"), tensor(&[*k, *k, *cout, *cin], uniform(rng, k * k * cin * cout, bound)));
                params.insert(format!("{name}.bias"), Tensor::zeros(&[*cout]));
            }
            Layer::Gdn { name, channels, .. } => {
                let c = *channels;
                let beta = T::from_f64_lossy(gdn::softplus_inverse(1.0 - gdn::BETA_FLOOR));
                params.insert(format!("{name}.beta"), Tensor::full(&[c], beta));
                let diag = T::from_f64_lossy(gdn::softplus_inverse(GDN_DIAGONAL_INIT));
                let off = T::from_f64_lossy(gdn::softplus_inverse(GDN_OFF_DIAGONAL_INIT));
                let gamma = (0..c * c).map(|i| if i / c == i % c { diag } else { off }).collect();
                params.insert(format!("{name}.gamma"), tensor(&[c, c], gamma));
            }
            Layer::Prelu { name, channels } => {
                params.insert(format!("{name}.alpha"), Tensor::full(&[*channels], T::from_f64_lossy(PRELU_INIT)));
            }
            Layer::Sigmoid => {}
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        match self {
            Layer::Dense { nout, .. } => vec![*nout],
            Layer::Conv { k, stride, cin, cout, .. } => {
                let g = ConvGeometry { h: input[0], w: input[1], c: *cin, k: *k, stride: *stride };
                vec![g.out_h(), g.out_w(), *cout]
            }
            Layer::ConvTranspose { stride, cout, .. } => vec![input[0] * stride, input[1] * stride, *cout],
            _ => input.to_vec(),
        }
    }

    fn forward<T: Scalar>(&self, params: &ParameterSet<T>, x: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
        match self {
            Layer::Dense { name, nin, nout } => {
                assert_eq!(x.len(), *nin, "{name}: dense input length");
                let mut y = params.get(&format!("{name}.bias")).data().to_vec();
                let w = params.get(&format!("{name}.weight"));
                T::gemm(1, *nin, *nout, T::one(), x.data(), false, w.data(), false, T::one(), &mut y);
                (tensor(&[*nout], y), Cache::None)
            }
            Layer::Conv { name, k, stride, cin, cout } => {
                let s = x.shape();
                assert_eq!(s[2], *cin, "{name}: input channels");
                let g = ConvGeometry { h: s[0], w: s[1], c: *cin, k: *k, stride: *stride };
                let y = conv::conv_forward(
                    x.data(),
                    &g,
                    params.get(&format!("{name}.kernel")).data(),
                    params.get(&format!("{name}.bias")).data(),
                );
                (tensor(&[g.out_h(), g.out_w(), *cout], y), Cache::None)
            }
            Layer::ConvTranspose { name, k, stride, cin, cout } => {
                let s = x.shape();
                assert_eq!(s[2], *cin, "{name}: input channels");
                let g = conv::transpose_geometry(s[0], s[1], *cout, *k, *stride);
                let y = conv::conv_transpose_forward(
                    x.data(),
                    &g,
                    *cin,
                    params.get(&format!("{name}.kernel")).data(),
                    params.get(&format!("{name}.bias")).data(),
                );
                (tensor(&[g.h, g.w, *cout], y), Cache::None)
            }
            Layer::Gdn { name, channels, inverse } => {
                let beta = gdn::effective_beta(params.get(&format!("{name}.beta")).data());
                let gamma = gdn::effective_gamma(params.get(&format!("{name}.gamma")).data());
                let (y, n) = gdn::forward(x.data(), *channels, &beta, &gamma, *inverse);
                (tensor(x.shape(), y), Cache::Norm(n))
            }
            Layer::Prelu { name, channels } => {
                let alpha = params.get(&format!("{name}.alpha")).data();
                let mut y = x.data().to_vec();
                for px in y.chunks_exact_mut(*channels) {
                    for (v, &a) in px.iter_mut().zip(alpha) {
                        if *v < T::zero() {
                            *v *= a;
                        }
                    }
                }
                (tensor(x.shape(), y), Cache::None)
            }
            Layer::Sigmoid => {
                let y: Vec<T> = x.data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
                (tensor(x.shape(), y.clone()), Cache::Output(y))
            }
        }
    }

    fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        x: &Tensor<T>,
        cache: &Cache<T>,
        dy: &Tensor<T>,
        grads: &mut ParameterSet<T>,
    ) -> Tensor<T> {
        match self {
            Layer::Dense { name, nin, nout } => {
                let w = params.get(&format!("{name}.weight"));
                let mut dx = vec![T::zero(); *nin];
                T::gemm(1, *nout, *nin, T::one(), dy.data(), false, w.data(), true, T::zero(), &mut dx);
                let mut dw = vec![T::zero(); nin * nout];
                T::gemm(*nin, 1, *nout, T::one(), x.data(), true, dy.data(), false, T::zero(), &mut dw);
                grads.accumulate(&format!("{name}.weight"), &dw);
                grads.accumulate(&format!("{name}.bias"), dy.data());
                tensor(&[*nin], dx)
            }
            Layer::Conv { name, k, stride, cin, cout } => {
                let s = x.shape();
                let g = ConvGeometry { h: s[0], w: s[1], c: *cin, k: *k, stride: *stride };
                let kern = params.get(&format!("{name}.kernel"));
                let gr = conv::conv_backward(x.data(), &g, kern.data(), *cout, dy.data());
                grads.accumulate(&format!("{name}.kernel"), &gr.dkernel);
                grads.accumulate(&format!("{name}.bias"), &gr.dbias);
                tensor(s, gr.dx)
            }
            Layer::ConvTranspose { name, k, stride, cin, cout } => {
                let s = x.shape();
                let g = conv::transpose_geometry(s[0], s[1], *cout, *k, *stride);
                let kern = params.get(&format!("{name}.kernel"));
                let gr = conv::conv_transpose_backward(x.data(), &g, *cin, kern.data(), dy.data());
                grads.accumulate(&format!("{name}.kernel"), &gr.dkernel);
                grads.accumulate(&format!("{name}.bias"), &gr.dbias);
                tensor(s, gr.dx)
            }
            Layer::Gdn { name, channels, inverse } => {
                let Cache::Norm(norm) = cache else { unreachable!("gdn cache") };
                let beta_name = format!("{name}.beta");
                let gamma_name = format!("{name}.gamma");
                let raw_gamma = params.get(&gamma_name).data();
                let gamma = gdn::effective_gamma(raw_gamma);
                let mut gr = gdn::backward(x.data(), norm, *channels, &gamma, dy.data(), *inverse);
                gdn::reparam_backward(params.get(&beta_name).data(), &mut gr.dbeta);
                gdn::reparam_backward(raw_gamma, &mut gr.dgamma);
                grads.accumulate(&beta_name, &gr.dbeta);
                grads.accumulate(&gamma_name, &gr.dgamma);
                tensor(x.shape(), gr.dx)
            }
            Layer::Prelu { name, channels } => {
                let alpha_name = format!("{name}.alpha");
                let alpha = params.get(&alpha_name).data();
                let mut dalpha = vec![T::zero(); *channels];
                let mut dx = dy.data().to_vec();
                for (gpx, xpx) in dx.chunks_exact_mut(*channels).zip(x.data().chunks_exact(*channels)) {
                    for c in 0..*channels {
                        if xpx[c] < T::zero() {
                            dalpha[c] += gpx[c] * xpx[c];
                            gpx[c] *= alpha[c];
                        }
                    }
                }
                grads.accumulate(&alpha_name, &dalpha);
                tensor(x.shape(), dx)
            }
            Layer::Sigmoid => {
                let Cache::Output(y) = cache else { unreachable!("sigmoid cache") };
                let dx = dy.data().iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                tensor(x.shape(), dx)
            }
        }
    }
}

fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_vec(shape, data).expect("layer produced inconsistent shape")
}

/// A chain of layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn init<T: Scalar, R: Rng>(&self, params: &mut ParameterSet<T>, rng: &mut R) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        self.layers.iter().fold(input.to_vec(), |s, l| l.output_shape(&s))
    }

    pub fn forward<T: Scalar>(&self, params: &ParameterSet<T>, x: Tensor<T>) -> (Tensor<T>, Tape<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for l in &self.layers {
            let (y, c) = l.forward(params, &cur);
            inputs.push(cur);
            caches.push(c);
            cur = y;
        }
        (cur, Tape { inputs, caches })
    }

    /// Forward pass without keeping a tape.
    pub fn infer<T: Scalar>(&self, params: &ParameterSet<T>, x: Tensor<T>) -> Tensor<T> {
        self.layers.iter().fold(x, |cur, l| l.forward(params, &cur).0)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        tape: &Tape<T>,
        dy: Tensor<T>,
        grads: &mut ParameterSet<T>,
    ) -> Tensor<T> {
        let mut g = dy;
        for (i, l) in self.layers.iter().enumerate().rev() {
            g = l.backward(params, &tape.inputs[i], &tape.caches[i], &g, grads);
        }
        g
    }
}
