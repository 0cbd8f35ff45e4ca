//! Joint semantic-channel encoder, receiver-side split, decoder modules, and
//! the multi-feature fusion reconstructor.
//!
//! Branch `i` (1-based) encodes one level of side information to a latent
//! of `h/t x w/t x c_i`:
//!
//! | branch | input                 | width | kernel        |
//! |--------|-----------------------|-------|---------------|
//! | 1      | caption embedding     | 1     | `base_kernel` |
//! | 2      | segmentation map      | 1     | `base_kernel` |
//! | 3      | low-level stack       | 3     | `base_kernel` |
//! | i >= 4 | normalized image      | 3     | `2i - 5`      |
//!
//! The concatenated latent is truncated to `e` channels in selection order
//! (branch 3 first, then 1, 2, 4, ...), power-normalized, sent over the
//! channel, and split back per branch at the receiver. Branches whose
//! channels were not sent receive zeros.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{self, SymbolFrame};
use crate::config::{ModelConfig, Variant};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::extractors::{embedding_len, CaptionEmbedding, LowLevelStack, SegmentationMap, SemanticFeatures};
use crate::nn::{Layer, ParameterSet, Sequential, Tape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DECODER_KERNEL: usize = 3;
pub const FUSION_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Caption,
    Segmentation,
    LowLevel,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    /// 1-based branch index `i`.
    pub index: usize,
    pub kind: BranchKind,
    /// Latent channels `c_i`.
    pub width: usize,
    pub kernel: usize,
    /// Channels of the encoder input.
    pub in_channels: usize,
    /// Channels of the decoder output `d_i`.
    pub out_channels: usize,
}

/// Encoder kernel for image branch `i >= 4`.
pub fn image_branch_kernel(i: usize) -> usize {
    2 * i - 5
}

/// Branches present for a config, in concatenation order.
pub fn branch_specs(cfg: &ModelConfig) -> Vec<BranchSpec> {
    let mut v = Vec::with_capacity(cfg.l);
    let k = cfg.base_kernel;
    if cfg.variant.has_caption() {
        v.push(BranchSpec { index: 1, kind: BranchKind::Caption, width: 1, kernel: k, in_channels: 1, out_channels: cfg.o / 2 });
    }
    if cfg.variant.has_segmentation() {
        v.push(BranchSpec { index: 2, kind: BranchKind::Segmentation, width: 1, kernel: k, in_channels: 1, out_channels: cfg.o / 2 });
        v.push(BranchSpec { index: 3, kind: BranchKind::LowLevel, width: 3, kernel: k, in_channels: 4, out_channels: cfg.o });
    } else {
        // The low-level stack loses its segmentation channel and its latent narrows by one.
        v.push(BranchSpec { index: 3, kind: BranchKind::LowLevel, width: 2, kernel: k, in_channels: 3, out_channels: cfg.o });
    }
    for i in 4..=cfg.l {
        v.push(BranchSpec { index: i, kind: BranchKind::Image, width: 3, kernel: image_branch_kernel(i), in_channels: 3, out_channels: cfg.o });
    }
    v
}

/// One latent channel: `(position in branch list, channel within branch)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub branch: usize,
    pub channel: usize,
}

/// Latent layout: branch widths, their offsets in `r`, and the order in
/// which channels are kept when truncating to `e`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelLayout {
    pub widths: Vec<usize>,
    pub offsets: Vec<usize>,
    pub branch_ids: Vec<usize>,
    pub selection: Vec<Slot>,
}

impl ChannelLayout {
    /// Default priority: branch 3, then 1, 2, then 4..l.
    pub fn new(branches: &[BranchSpec]) -> Self {
        let mut priority: Vec<usize> = vec![3, 1, 2];
        priority.extend(branches.iter().map(|b| b.index).filter(|&i| i >= 4));
        Self::with_priority(branches, &priority).expect("default priority is valid")
    }

    /// Layout with a caller-chosen branch priority (1-based branch ids).
    /// Ids of absent branches are skipped; every present branch must appear.
    pub fn with_priority(branches: &[BranchSpec], priority: &[usize]) -> Result<Self> {
        let widths: Vec<usize> = branches.iter().map(|b| b.width).collect();
        let branch_ids: Vec<usize> = branches.iter().map(|b| b.index).collect();
        let mut offsets = Vec::with_capacity(widths.len());
        let mut acc = 0;
        for w in &widths {
            offsets.push(acc);
            acc += w;
        }
        let mut selection = Vec::with_capacity(acc);
        let mut used = vec![false; branches.len()];
        for id in priority {
            if let Some(pos) = branch_ids.iter().position(|b| b == id) {
                if used[pos] {
                    return Err(Error::Config(format!("branch {id} listed twice in priority")));
                }
                used[pos] = true;
                selection.extend((0..widths[pos]).map(|channel| Slot { branch: pos, channel }));
            }
        }
        if used.iter().any(|u| !u) {
            return Err(Error::Config(format!("priority {priority:?} does not cover branches {branch_ids:?}")));
        }
        Ok(ChannelLayout {
            widths,
            offsets,
            branch_ids,
            selection,
        })
    }

    pub fn total_width(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Index into `r` of a slot.
    pub fn latent_index(&self, s: Slot) -> usize {
        self.offsets[s.branch] + s.channel
    }
}

/// Encoder output for a batch: `b x h/t x w/t x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor<T> {
    pub data: Tensor<T>,
    /// Branch id when this is a single `c_i`; `None` for the concatenated `r`.
    pub branch_id: Option<usize>,
}

/// Decoder outputs and their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFeatureSet<T> {
    pub d: Vec<Tensor<T>>,
    pub v: Tensor<T>,
}

struct BranchNet {
    spec: BranchSpec,
    fc: Option<Sequential>,
    encoder: Sequential,
    decoder: Sequential,
}

/// Architecture for a [`ModelConfig`]. Parameters live in a separate
/// [`ParameterSet`] so the same model can be evaluated at any parameter point.
pub struct Model {
    cfg: ModelConfig,
    layout: ChannelLayout,
    branches: Vec<BranchNet>,
    fusion: Sequential,
}

fn log2(x: usize) -> usize {
    x.trailing_zeros() as usize
}

fn build_encoder(cfg: &ModelConfig, b: &BranchSpec) -> Sequential {
    let p = format!("branch{}.enc", b.index);
    let mut layers = Vec::new();
    let mut cin = b.in_channels;
    let push = |layers: &mut Vec<Layer>, j: usize, stride: usize, cin: usize, cout: usize| {
        layers.push(Layer::Conv { name: format!("{p}.layer{j}"), k: b.kernel, stride, cin, cout });
        layers.push(Layer::Gdn { name: format!("{p}.gdn{j}"), channels: cout, inverse: false });
    };
    if b.kind == BranchKind::Caption {
        push(&mut layers, 0, 1, cin, cfg.enc_hidden);
        push(&mut layers, 1, 1, cfg.enc_hidden, b.width);
    } else {
        let n = log2(cfg.t);
        for j in 0..n {
            push(&mut layers, j, 2, cin, cfg.enc_hidden);
            cin = cfg.enc_hidden;
        }
        push(&mut layers, n, 1, cin, b.width);
    }
    Sequential::new(layers)
}

fn build_decoder(cfg: &ModelConfig, b: &BranchSpec) -> Sequential {
    let p = format!("branch{}.dec", b.index);
    let h = cfg.dec_hidden;
    let k = DECODER_KERNEL;
    Sequential::new(vec![
        Layer::ConvTranspose { name: format!("{p}.layer0"), k, stride: 1, cin: b.width, cout: h },
        Layer::Gdn { name: format!("{p}.igdn0"), channels: h, inverse: true },
        Layer::ConvTranspose { name: format!("{p}.layer1"), k, stride: 1, cin: h, cout: h },
        Layer::Gdn { name: format!("{p}.igdn1"), channels: h, inverse: true },
        Layer::ConvTranspose { name: format!("{p}.layer2"), k, stride: 2, cin: h, cout: b.out_channels },
    ])
}

fn build_fusion(cfg: &ModelConfig, v_width: usize) -> Sequential {
    let mut layers = Vec::new();
    let mut cin = v_width;
    let n = log2(cfg.t / 2);
    for j in 0..n {
        layers.push(Layer::ConvTranspose { name: format!("fusion.layer{j}"), k: FUSION_KERNEL, stride: 2, cin, cout: cfg.fusion_hidden });
        layers.push(Layer::Prelu { name: format!("fusion.prelu{j}"), channels: cfg.fusion_hidden });
        cin = cfg.fusion_hidden;
    }
    layers.push(Layer::ConvTranspose { name: format!("fusion.layer{n}"), k: FUSION_KERNEL, stride: 1, cin, cout: 3 });
    layers.push(Layer::Sigmoid);
    Sequential::new(layers)
}

/// Per-sample encoder inputs.
#[derive(Debug, Clone)]
pub struct SampleInputs<T> {
    pub image: Tensor<T>,
    pub caption: Option<Tensor<T>>,
    pub segmentation: Option<Tensor<T>>,
    pub lowlevel: Tensor<T>,
}

/// How the channel acts on one sample.
#[derive(Debug, Clone)]
pub enum ChannelDraw<T> {
    /// Received = transmitted.
    Identity,
    /// Additive noise realization, one value per real symbol.
    Noise(Vec<T>),
}

/// Everything a training step needs from one forward pass.
pub struct SampleForward<T> {
    pub output: Tensor<T>,
    pub frame: SymbolFrame<T>,
    branch_tapes: Vec<(Option<Tape<T>>, Tape<T>, Tape<T>)>,
    fusion_tape: Tape<T>,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let specs = branch_specs(cfg);
        let layout = ChannelLayout::new(&specs);
        debug_assert_eq!(layout.total_width(), cfg.latent_width());
        let branches = specs
            .iter()
            .map(|b| BranchNet {
                fc: (b.kind == BranchKind::Caption).then(|| {
                    Sequential::new(vec![Layer::Dense {
                        name: format!("branch{}.fc", b.index),
                        nin: embedding_len(cfg.height, cfg.width, cfg.t),
                        nout: cfg.latent_h() * cfg.latent_w(),
                    }])
                }),
                encoder: build_encoder(cfg, b),
                decoder: build_decoder(cfg, b),
                spec: b.clone(),
            })
            .collect::<Vec<_>>();
        let v_width = specs.iter().map(|b| b.out_channels).sum();
        Ok(Model {
            cfg: cfg.clone(),
            layout,
            branches,
            fusion: build_fusion(cfg, v_width),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ChannelLayout {
        &self.layout
    }

    pub fn branch_specs(&self) -> Vec<BranchSpec> {
        self.branches.iter().map(|b| b.spec.clone()).collect()
    }

    /// Width of the fused decoder features `v`.
    pub fn fused_width(&self) -> usize {
        self.branches.iter().map(|b| b.spec.out_channels).sum()
    }

    /// Seeded initial parameters; identical for identical configs.
    pub fn init_params<T: Scalar>(&self) -> ParameterSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut params = ParameterSet::new();
        for b in &self.branches {
            if let Some(fc) = &b.fc {
                fc.init(&mut params, &mut rng);
            }
            b.encoder.init(&mut params, &mut rng);
            b.decoder.init(&mut params, &mut rng);
        }
        self.fusion.init(&mut params, &mut rng);
        params
    }

    fn check_features<T: Scalar>(&self, images: &ImageBatch<T>, feats: &SemanticFeatures<T>) -> Result<()> {
        let c = &self.cfg;
        if images.height() != c.height || images.width() != c.width {
            return Err(Error::Shape(format!(
                "model is built for {}x{} images, got {}x{}",
                c.height,
                c.width,
                images.height(),
                images.width()
            )));
        }
        let b = images.batch_size();
        let ll = if c.variant.has_segmentation() { 4 } else { 3 };
        if feats.lowlevel.data.shape() != [b, c.height, c.width, ll] {
            return Err(Error::Shape(format!(
                "low-level stack {:?}, expected {:?}",
                feats.lowlevel.data.shape(),
                [b, c.height, c.width, ll]
            )));
        }
        match (&feats.caption, c.variant.has_caption()) {
            (Some(p), true) => {
                let want = [b, embedding_len(c.height, c.width, c.t)];
                if p.data.shape() != want {
                    return Err(Error::Shape(format!("caption embedding {:?}, expected {want:?}", p.data.shape())));
                }
            }
            (None, true) => return Err(Error::Shape("model needs a caption embedding".into())),
            (Some(_), false) => return Err(Error::Shape("no_caption model does not accept a caption embedding".into())),
            (None, false) => {}
        }
        match (&feats.segmentation, c.variant.has_segmentation()) {
            (Some(a), true) => {
                if a.data.shape() != [b, c.height, c.width, 1] {
                    return Err(Error::Shape(format!("segmentation map {:?}", a.data.shape())));
                }
            }
            (None, true) => return Err(Error::Shape("model needs a segmentation map".into())),
            (Some(_), false) => {
                return Err(Error::Shape("no_segmentation model does not accept a segmentation map".into()))
            }
            (None, false) => {}
        }
        Ok(())
    }

    /// Splits batch-level features into per-sample inputs.
    pub fn sample_inputs<T: Scalar>(&self, images: &ImageBatch<T>, feats: &SemanticFeatures<T>) -> Result<Vec<SampleInputs<T>>> {
        self.check_features(images, feats)?;
        let imgs = images.samples();
        let caps = feats.caption.as_ref().map(|p| p.data.unstack());
        let segs = feats.segmentation.as_ref().map(|a| a.data.unstack());
        let lls = feats.lowlevel.data.unstack();
        Ok(imgs
            .into_iter()
            .zip(lls)
            .enumerate()
            .map(|(i, (image, lowlevel))| SampleInputs {
                image,
                caption: caps.as_ref().map(|c| c[i].clone()),
                segmentation: segs.as_ref().map(|s| s[i].clone()),
                lowlevel,
            })
            .collect())
    }

    fn branch_input<T: Scalar>(&self, b: &BranchNet, inp: &SampleInputs<T>) -> Tensor<T> {
        match b.spec.kind {
            BranchKind::Caption => inp.caption.clone().expect("checked caption"),
            BranchKind::Segmentation => inp.segmentation.clone().expect("checked segmentation"),
            BranchKind::LowLevel => inp.lowlevel.clone(),
            BranchKind::Image => inp.image.clone(),
        }
    }

    fn encode_branch<T: Scalar>(&self, params: &ParameterSet<T>, b: &BranchNet, inp: &SampleInputs<T>) -> (Tensor<T>, Option<Tape<T>>, Tape<T>) {
        let x = self.branch_input(b, inp);
        let (x, fc_tape) = match &b.fc {
            Some(fc) => {
                let (y, tape) = fc.forward(params, x);
                let y = y.reshape(&[self.cfg.latent_h(), self.cfg.latent_w(), 1]).expect("fc output size");
                (y, Some(tape))
            }
            None => (x, None),
        };
        let (c, tape) = b.encoder.forward(params, x);
        (c, fc_tape, tape)
    }

    /// Selected latent channels, `h' x w' x e`, from a per-sample `r`.
    fn select<T: Scalar>(&self, r: &Tensor<T>, e: usize) -> Tensor<T> {
        let wtot = self.layout.total_width();
        let idx: Vec<usize> = self.layout.selection[..e].iter().map(|&s| self.layout.latent_index(s)).collect();
        let mut out = Vec::with_capacity(r.len() / wtot * e);
        for px in r.data().chunks_exact(wtot) {
            out.extend(idx.iter().map(|&i| px[i]));
        }
        let s = r.shape();
        Tensor::from_vec(&[s[0], s[1], e], out).expect("selection shape")
    }

    /// Scatters `h' x w' x e` back to `h' x w' x W` with zeros elsewhere.
    fn unselect<T: Scalar>(&self, y: &Tensor<T>) -> Tensor<T> {
        let e = y.channels();
        let wtot = self.layout.total_width();
        let idx: Vec<usize> = self.layout.selection[..e].iter().map(|&s| self.layout.latent_index(s)).collect();
        let pixels = y.len() / e;
        let mut out = vec![T::zero(); pixels * wtot];
        for (p, px) in y.data().chunks_exact(e).enumerate() {
            for (&i, &v) in idx.iter().zip(px) {
                out[p * wtot + i] = v;
            }
        }
        let s = y.shape();
        Tensor::from_vec(&[s[0], s[1], wtot], out).expect("unselect shape")
    }

    fn split_latent<T: Scalar>(&self, full: &Tensor<T>) -> Vec<Tensor<T>> {
        self.layout
            .offsets
            .iter()
            .zip(&self.layout.widths)
            .map(|(&o, &w)| full.slice_channels(o, w).expect("layout slice"))
            .collect()
    }

    /// Full per-sample pass. `channel` supplies the noise realization.
    pub fn forward_sample<T: Scalar>(&self, params: &ParameterSet<T>, inp: &SampleInputs<T>, channel: &ChannelDraw<T>) -> Result<SampleForward<T>> {
        let mut cs = Vec::with_capacity(self.branches.len());
        let mut branch_tapes = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (c, fc_tape, enc_tape) = self.encode_branch(params, b, inp);
            cs.push(c);
            branch_tapes.push((fc_tape, enc_tape));
        }
        let refs: Vec<&Tensor<T>> = cs.iter().collect();
        let r = Tensor::concat_channels(&refs)?;
        let sel = self.select(&r, self.cfg.e);
        let frame = channel::power_normalize(sel.data())?;
        let received: Vec<T> = match channel {
            ChannelDraw::Identity => frame.symbols.clone(),
            ChannelDraw::Noise(w) => {
                if w.len() != frame.symbols.len() {
                    return Err(Error::Shape(format!("noise length {} for {} symbols", w.len(), frame.symbols.len())));
                }
                frame.symbols.iter().zip(w).map(|(&x, &n)| x + n).collect()
            }
        };
        let y = Tensor::from_vec(sel.shape(), received)?;
        let qs = self.split_latent(&self.unselect(&y));
        let mut ds = Vec::with_capacity(qs.len());
        let mut tapes = Vec::with_capacity(qs.len());
        for ((b, q), (fc_tape, enc_tape)) in self.branches.iter().zip(qs).zip(branch_tapes) {
            let (d, dec_tape) = b.decoder.forward(params, q);
            ds.push(d);
            tapes.push((fc_tape, enc_tape, dec_tape));
        }
        let drefs: Vec<&Tensor<T>> = ds.iter().collect();
        let v = Tensor::concat_channels(&drefs)?;
        let (output, fusion_tape) = self.fusion.forward(params, v);
        Ok(SampleForward {
            output,
            frame,
            branch_tapes: tapes,
            fusion_tape,
        })
    }

    /// Parameter gradients for output gradient `d_out` (noise is constant).
    pub fn backward_sample<T: Scalar>(&self, params: &ParameterSet<T>, fwd: &SampleForward<T>, d_out: Tensor<T>) -> ParameterSet<T> {
        let mut grads = params.zeros_like();
        let dv = self.fusion.backward(params, &fwd.fusion_tape, d_out, &mut grads);
        let mut offset = 0;
        let mut dq = Vec::with_capacity(self.branches.len());
        for (b, (_, _, dec_tape)) in self.branches.iter().zip(&fwd.branch_tapes) {
            let dd = dv.slice_channels(offset, b.spec.out_channels).expect("fused slice");
            offset += b.spec.out_channels;
            dq.push(b.decoder.backward(params, dec_tape, dd, &mut grads));
        }
        let dq_refs: Vec<&Tensor<T>> = dq.iter().collect();
        let d_full = Tensor::concat_channels(&dq_refs).expect("latent concat");
        // received = x + w, so dL/dx = dL/dy
        let d_sel = self.select(&d_full, self.cfg.e);
        let d_r_sel = channel::power_normalize_backward(&fwd.frame, d_sel.data());
        let d_r = self.unselect(&Tensor::from_vec(d_sel.shape(), d_r_sel).expect("grad shape"));
        let dcs = self.split_latent(&d_r);
        for ((b, (fc_tape, enc_tape, _)), dc) in self.branches.iter().zip(&fwd.branch_tapes).zip(dcs) {
            let dx = b.encoder.backward(params, enc_tape, dc, &mut grads);
            if let (Some(fc), Some(tape)) = (&b.fc, fc_tape) {
                let n = dx.len();
                fc.backward(params, tape, dx.reshape(&[n]).expect("flatten"), &mut grads);
            }
        }
        grads
    }

    /// Reconstruction for a batch; `draws[i]` is the channel for sample `i`.
    pub fn reconstruct<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        images: &ImageBatch<T>,
        feats: &SemanticFeatures<T>,
        draws: &[ChannelDraw<T>],
    ) -> Result<ImageBatch<T>> {
        let inputs = self.sample_inputs(images, feats)?;
        if draws.len() != inputs.len() {
            return Err(Error::Shape(format!("{} channel draws for {} samples", draws.len(), inputs.len())));
        }
        let outs: Result<Vec<Tensor<T>>> = inputs
            .par_iter()
            .zip(draws.par_iter())
            .enumerate()
            .map(|(i, (inp, draw))| {
                self.forward_sample(params, inp, draw)
                    .map(|f| f.output)
                    .map_err(|e| match e {
                        Error::ZeroLatent { .. } => Error::ZeroLatent { sample: i },
                        other => other,
                    })
            })
            .collect();
        ImageBatch::new(Tensor::stack(&outs?)?)
    }

    /// Loss `(1/b) sum_k (1/n) |S_k - S^_k|^2` and its parameter gradient.
    /// Per-sample gradients are reduced in sample order.
    pub fn loss_and_grad<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        images: &ImageBatch<T>,
        feats: &SemanticFeatures<T>,
        draws: &[ChannelDraw<T>],
    ) -> Result<(T, ParameterSet<T>)> {
        let inputs = self.sample_inputs(images, feats)?;
        if draws.len() != inputs.len() {
            return Err(Error::Shape(format!("{} channel draws for {} samples", draws.len(), inputs.len())));
        }
        let b = T::from_f64_lossy(inputs.len() as f64);
        let per: Vec<Result<(T, ParameterSet<T>)>> = inputs
            .par_iter()
            .zip(draws.par_iter())
            .enumerate()
            .map(|(i, (inp, draw))| {
                let fwd = self.forward_sample(params, inp, draw).map_err(|e| match e {
                    Error::ZeroLatent { .. } => Error::ZeroLatent { sample: i },
                    other => other,
                })?;
                let n = T::from_f64_lossy(fwd.output.len() as f64);
                let mut loss = T::zero();
                let mut d = Vec::with_capacity(fwd.output.len());
                let two = T::from_f64_lossy(2.0);
                for (&o, &s) in fwd.output.data().iter().zip(inp.image.data()) {
                    let diff = o - s;
                    loss += diff * diff;
                    d.push(two * diff / (n * b));
                }
                let d = Tensor::from_vec(fwd.output.shape(), d)?;
                let g = self.backward_sample(params, &fwd, d);
                Ok((loss / (n * b), g))
            })
            .collect();
        let mut total = T::zero();
        let mut grads = params.zeros_like();
        for r in per {
            let (l, g) = r?;
            total += l;
            grads.add_assign(&g);
        }
        Ok((total, grads))
    }

    // Stage-level operations on whole batches.

    /// `r`: concatenated branch latents, `b x h/t x w/t x (3l-4)`.
    pub fn encode<T: Scalar>(&self, params: &ParameterSet<T>, images: &ImageBatch<T>, feats: &SemanticFeatures<T>) -> Result<LatentTensor<T>> {
        Ok(LatentTensor {
            data: Tensor::stack(&self.encode_branches(params, images, feats)?.into_iter().map(|cs| {
                let refs: Vec<&Tensor<T>> = cs.iter().collect();
                Tensor::concat_channels(&refs).expect("branch concat")
            }).collect::<Vec<_>>())?,
            branch_id: None,
        })
    }

    /// Per-sample list of branch latents `c_i`.
    pub fn encode_branches<T: Scalar>(&self, params: &ParameterSet<T>, images: &ImageBatch<T>, feats: &SemanticFeatures<T>) -> Result<Vec<Vec<Tensor<T>>>> {
        let inputs = self.sample_inputs(images, feats)?;
        Ok(inputs
            .par_iter()
            .map(|inp| self.branches.iter().map(|b| self.encode_branch(params, b, inp).0).collect())
            .collect())
    }

    /// Branch latents stacked over the batch, one [`LatentTensor`] per branch.
    pub fn encode_each<T: Scalar>(&self, params: &ParameterSet<T>, images: &ImageBatch<T>, feats: &SemanticFeatures<T>) -> Result<Vec<LatentTensor<T>>> {
        let per = self.encode_branches(params, images, feats)?;
        (0..self.branches.len())
            .map(|bi| {
                let items: Vec<Tensor<T>> = per.iter().map(|cs| cs[bi].clone()).collect();
                Ok(LatentTensor {
                    data: Tensor::stack(&items)?,
                    branch_id: Some(self.branches[bi].spec.index),
                })
            })
            .collect()
    }

    pub fn decoder_module_forward<T: Scalar>(&self, params: &ParameterSet<T>, branch_id: usize, q: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self
            .branches
            .iter()
            .find(|b| b.spec.index == branch_id)
            .ok_or_else(|| Error::Argument(format!("no branch {branch_id} in this model")))?;
        let s = q.shape();
        if s.len() != 4 || s[1] != self.cfg.latent_h() || s[2] != self.cfg.latent_w() || s[3] != b.spec.width {
            return Err(Error::Shape(format!(
                "decoder {branch_id} expects b x {} x {} x {}, got {s:?}",
                self.cfg.latent_h(),
                self.cfg.latent_w(),
                b.spec.width
            )));
        }
        let outs: Vec<Tensor<T>> = q.unstack().into_par_iter().map(|x| b.decoder.infer(params, x)).collect();
        Tensor::stack(&outs)
    }

    /// Decoder outputs for every branch, plus their concatenation `v`.
    pub fn decode<T: Scalar>(&self, params: &ParameterSet<T>, qs: &[Tensor<T>]) -> Result<DecodedFeatureSet<T>> {
        if qs.len() != self.branches.len() {
            return Err(Error::Shape(format!("{} branch inputs for {} branches", qs.len(), self.branches.len())));
        }
        let d: Vec<Tensor<T>> = self
            .branches
            .iter()
            .zip(qs)
            .map(|(b, q)| self.decoder_module_forward(params, b.spec.index, q))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = d.iter().collect();
        let v = Tensor::concat_channels(&refs)?;
        Ok(DecodedFeatureSet { d, v })
    }

    pub fn fuse_reconstruct<T: Scalar>(&self, params: &ParameterSet<T>, decoded: &DecodedFeatureSet<T>) -> Result<ImageBatch<T>> {
        let s = decoded.v.shape();
        let want = [2 * self.cfg.latent_h(), 2 * self.cfg.latent_w(), self.fused_width()];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Shape(format!("fused features {s:?}, expected b x {want:?}")));
        }
        let outs: Vec<Tensor<T>> = decoded.v.unstack().into_par_iter().map(|v| self.fusion.infer(params, v)).collect();
        ImageBatch::new(Tensor::stack(&outs)?)
    }
}

/// Keeps the first `e` channels of `r` in the layout's selection order.
pub fn select_channels<T: Scalar>(r: &LatentTensor<T>, layout: &ChannelLayout, e: usize) -> Result<LatentTensor<T>> {
    let wtot = layout.total_width();
    if e < 1 || e > wtot {
        return Err(Error::Argument(format!("e must be in 1..={wtot}, got {e}")));
    }
    if r.data.channels() != wtot {
        return Err(Error::Shape(format!("latent has {} channels, layout {wtot}", r.data.channels())));
    }
    let idx: Vec<usize> = layout.selection[..e].iter().map(|&s| layout.latent_index(s)).collect();
    let mut out = Vec::with_capacity(r.data.len() / wtot * e);
    for px in r.data.data().chunks_exact(wtot) {
        out.extend(idx.iter().map(|&i| px[i]));
    }
    let mut shape = r.data.shape().to_vec();
    *shape.last_mut().unwrap() = e;
    Ok(LatentTensor {
        data: Tensor::from_vec(&shape, out)?,
        branch_id: None,
    })
}

/// Receiver split: per-branch `q_i` in branch order, zeros for channels
/// that were not transmitted.
pub fn decode_split<T: Scalar>(y: &Tensor<T>, layout: &ChannelLayout) -> Result<Vec<Tensor<T>>> {
    let e = y.channels();
    let wtot = layout.total_width();
    if e < 1 || e > wtot {
        return Err(Error::Shape(format!("received {e} channels, layout carries at most {wtot}")));
    }
    let pixels = y.len() / e;
    let mut qs: Vec<Vec<T>> = layout.widths.iter().map(|&w| vec![T::zero(); pixels * w]).collect();
    for (p, px) in y.data().chunks_exact(e).enumerate() {
        for (slot, &v) in layout.selection[..e].iter().zip(px) {
            let w = layout.widths[slot.branch];
            qs[slot.branch][p * w + slot.channel] = v;
        }
    }
    let lead = &y.shape()[..y.shape().len() - 1];
    qs.into_iter()
        .zip(&layout.widths)
        .map(|(d, &w)| {
            let mut shape = lead.to_vec();
            shape.push(w);
            Tensor::from_vec(&shape, d)
        })
        .collect()
}

/// Batch-level features from raw tensors, for callers that bypass the extractor.
pub fn features_from_parts<T: Scalar>(
    caption: Option<Tensor<T>>,
    segmentation: Option<Tensor<T>>,
    lowlevel: Tensor<T>,
) -> SemanticFeatures<T> {
    SemanticFeatures {
        caption: caption.map(|data| CaptionEmbedding { data }),
        segmentation: segmentation.map(|data| SegmentationMap { data }),
        lowlevel: LowLevelStack { data: lowlevel },
    }
}

impl Variant {
    /// Convenience used by ablation tables.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.variant = *self;
        c.e = c.e.min(self.latent_width(c.l));
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(l: usize) -> ModelConfig {
        ModelConfig { l, e: 3 * l - 4, ..Default::default() }
    }

    #[test]
    fn kernel_schedule() {
        assert_eq!(image_branch_kernel(4), 3);
        assert_eq!(image_branch_kernel(5), 5);
        assert_eq!(image_branch_kernel(6), 7);
        let specs = branch_specs(&cfg(6));
        let kernels: Vec<usize> = specs.iter().map(|b| b.kernel).collect();
        assert_eq!(kernels, vec![3, 3, 3, 3, 5, 7]);
    }

    #[test]
    fn layout_widths_and_selection_order() {
        let specs = branch_specs(&cfg(5));
        let layout = ChannelLayout::new(&specs);
        assert_eq!(layout.widths, vec![1, 1, 3, 3, 3]);
        assert_eq!(layout.total_width(), 11);
        let first: Vec<usize> = layout.selection.iter().map(|&s| layout.latent_index(s)).collect();
        // c3 occupies r[2..5], c1 r[0], c2 r[1], c4 r[5..8], c5 r[8..11]
        assert_eq!(first, vec![2, 3, 4, 0, 1, 5, 6, 7, 8, 9, 10]);
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn custom_priority_must_cover_all_branches() {
        let specs = branch_specs(&cfg(4));
        assert!(ChannelLayout::with_priority(&specs, &[4, 3, 2, 1]).is_ok());
        assert!(ChannelLayout::with_priority(&specs, &[3, 1, 2]).is_err());
        assert!(ChannelLayout::with_priority(&specs, &[3, 3, 1, 2, 4]).is_err());
    }

    #[test]
    fn select_then_split_recovers_surviving_channels() {
        let specs = branch_specs(&cfg(4));
        let layout = ChannelLayout::new(&specs);
        let w = layout.total_width();
        let data: Vec<f64> = (0..2 * 2 * 2 * w).map(|i| i as f64 + 1.0).collect();
        let r = LatentTensor { data: Tensor::from_vec(&[2, 2, 2, w], data).unwrap(), branch_id: None };
        for e in [1, 5, w] {
            let y = select_channels(&r, &layout, e).unwrap();
            assert_eq!(y.data.channels(), e);
            let qs = decode_split(&y.data, &layout).unwrap();
            let kept: Vec<usize> = layout.selection[..e].iter().map(|&s| layout.latent_index(s)).collect();
            let back = Tensor::concat_channels(&qs.iter().collect::<Vec<_>>()).unwrap();
            for (a, b) in back.data().chunks_exact(w).zip(r.data.data().chunks_exact(w)) {
                for c in 0..w {
                    if kept.contains(&c) {
                        assert_eq!(a[c], b[c]);
                    } else {
                        assert_eq!(a[c], 0.0);
                    }
                }
            }
        }
        assert!(select_channels(&r, &layout, 0).is_err());
        assert!(select_channels(&r, &layout, w + 1).is_err());
    }

    #[test]
    fn e1_sends_only_c3() {
        let specs = branch_specs(&cfg(3));
        let layout = ChannelLayout::new(&specs);
        let s = layout.selection[0];
        assert_eq!(layout.branch_ids[s.branch], 3);
        let y = Tensor::<f64>::full(&[1, 2, 2, 1], 0.5);
        let qs = decode_split(&y, &layout).unwrap();
        assert!(qs[0].data().iter().all(|&v| v == 0.0));
        assert!(qs[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(qs[2].slice_channels(0, 1).unwrap().data(), y.data());
        assert!(qs[2].slice_channels(1, 2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn e5_is_c3_c1_c2() {
        let specs = branch_specs(&cfg(5));
        let layout = ChannelLayout::new(&specs);
        let ids: Vec<(usize, usize)> = layout.selection[..5].iter().map(|s| (layout.branch_ids[s.branch], s.channel)).collect();
        assert_eq!(ids, vec![(3, 0), (3, 1), (3, 2), (1, 0), (2, 0)]);
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig { height: 16, width: 16, t: 4, l: 3, e: 5, o: 4, ..Default::default() };
        let m = Model::new(&c).unwrap();
        let a = m.init_params::<f32>();
        let b = m.init_params::<f32>();
        assert_eq!(a.digest(), b.digest());
        assert!(a.names().any(|n| n == "branch1.enc.layer0.kernel"));
        assert!(a.names().any(|n| n == "branch3.dec.igdn1.gamma"));
        assert!(a.names().any(|n| n == "fusion.prelu0.alpha"));
    }
}
