//! The three levels of semantic side information fed to the encoder:
//! a caption-style embedding, a segmentation map, and the low-level stack
//! (image concatenated with the segmentation map).
//!
//! Two kinds of extractor exist. `ToyFrozen` computes features with fixed,
//! seeded, parameter-frozen stand-ins; `FilePrecomputed` reads features that
//! were produced offline by real networks. Neither kind is ever trained.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Batch, DatasetManifest, ImageBatch, LabelMap};
use crate::error::{Error, Result};
use crate::nn::conv::{self, ConvGeometry};
use crate::nn::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"MLSCEMB1";

/// Width of the toy caption model's pooled feature vector.
const TOY_FEATURES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorKind {
    ToyFrozen,
    FilePrecomputed,
}

impl ExtractorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExtractorKind::ToyFrozen => "toy-frozen",
            ExtractorKind::FilePrecomputed => "file-precomputed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy-frozen" => Ok(ExtractorKind::ToyFrozen),
            "file-precomputed" => Ok(ExtractorKind::FilePrecomputed),
            other => Err(Error::Config(format!("unknown extractor kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub seed: u64,
    /// Number of segmentation levels; at least 2.
    pub levels: u32,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec {
            kind: ExtractorKind::ToyFrozen,
            seed: 7,
            levels: 8,
        }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("segmentation levels must be >= 2, got {}", self.levels)));
        }
        Ok(())
    }
}

/// Caption-style embedding, `b x (2hw/t^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbedding<T> {
    pub data: Tensor<T>,
}

/// Segmentation map, `b x h x w x 1`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap<T> {
    pub data: Tensor<T>,
}

/// Low-level stack, `b x h x w x 4` as `[R, G, B, seg]` (or `b x h x w x 3`
/// when the segmentation branch is ablated).
#[derive(Debug, Clone, PartialEq)]
pub struct LowLevelStack<T> {
    pub data: Tensor<T>,
}

/// All side information for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFeatures<T> {
    pub caption: Option<CaptionEmbedding<T>>,
    pub segmentation: Option<SegmentationMap<T>>,
    pub lowlevel: LowLevelStack<T>,
}

pub fn embedding_len(h: usize, w: usize, t: usize) -> usize {
    2 * h * w / (t * t)
}

/// Precomputed embedding vectors keyed by source id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    /// Layout: magic, `count: u32`, `dim: u32`, then per record
    /// `id_len: u32`, id bytes (UTF-8), `dim` little-endian `f32`s.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut ids: Vec<&String> = self.vectors.keys().collect();
        ids.sort();
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for id in ids {
            let v = &self.vectors[id];
            if v.len() != self.dim {
                return Err(Error::Shape(format!("embedding {id} has length {}, store dim {}", v.len(), self.dim)));
            }
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != EMBEDDING_MAGIC {
            return Err(bad("missing MLSCEMB1 header"));
        }
        let u32_at = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated embedding file"))
        };
        let count = u32_at(8)? as usize;
        let dim = u32_at(12)? as usize;
        let mut pos = 16;
        let mut vectors = HashMap::with_capacity(count);
        for _ in 0..count {
            let n = u32_at(pos)? as usize;
            pos += 4;
            let id = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated embedding file"))?;
            let id = String::from_utf8(id.to_vec()).map_err(|_| bad("source id is not UTF-8"))?;
            pos += n;
            let raw = bytes.get(pos..pos + 4 * dim).ok_or_else(|| bad("truncated embedding file"))?;
            let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 4 * dim;
            vectors.insert(id, v);
        }
        Ok(EmbeddingStore { dim, vectors })
    }

    pub fn merge(&mut self, other: EmbeddingStore) -> Result<()> {
        if !self.vectors.is_empty() && other.dim != self.dim {
            return Err(Error::Shape(format!("embedding dims {} and {} differ", self.dim, other.dim)));
        }
        self.dim = other.dim;
        self.vectors.extend(other.vectors);
        Ok(())
    }
}

/// A frozen feature extractor instance for one image size.
#[derive(Debug, Clone)]
pub struct SemanticExtractor<T> {
    spec: ExtractorSpec,
    height: usize,
    width: usize,
    t: usize,
    frozen: ParameterSet<T>,
    store: Option<EmbeddingStore>,
}

impl<T: Scalar> SemanticExtractor<T> {
    /// Toy extractor; its parameters are drawn once from `spec.seed`.
    pub fn new(spec: ExtractorSpec, height: usize, width: usize, t: usize) -> Result<Self> {
        spec.validate()?;
        if t == 0 || height % t != 0 || width % t != 0 {
            return Err(Error::Shape(format!("{height}x{width} is not divisible by t={t}")));
        }
        let mut frozen = ParameterSet::new();
        if spec.kind == ExtractorKind::ToyFrozen {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut normal = |n: usize, scale: f64| -> Vec<T> {
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::from_f64_lossy(z * scale)
                    })
                    .collect()
            };
            let k = 3 * 3 * 3 * TOY_FEATURES;
            frozen.insert("caption.conv.kernel", Tensor::from_vec(&[3, 3, 3, TOY_FEATURES], normal(k, (1.0f64 / 27.0).sqrt()))?);
            frozen.insert("caption.conv.bias", Tensor::from_vec(&[TOY_FEATURES], normal(TOY_FEATURES, 0.1))?);
            let len = embedding_len(height, width, t);
            frozen.insert(
                "caption.proj",
                Tensor::from_vec(&[TOY_FEATURES, len], normal(TOY_FEATURES * len, (1.0 / TOY_FEATURES as f64).sqrt()))?,
            );
        }
        Ok(SemanticExtractor {
            spec,
            height,
            width,
            t,
            frozen,
            store: None,
        })
    }

    /// File-backed extractor with embeddings loaded from `files`.
    pub fn with_store(spec: ExtractorSpec, height: usize, width: usize, t: usize, store: EmbeddingStore) -> Result<Self> {
        let mut ex = Self::new(spec, height, width, t)?;
        ex.store = Some(store);
        Ok(ex)
    }

    /// Extractor for `manifest`: the toy model, or the merged embedding
    /// files the manifest references.
    pub fn for_manifest(spec: ExtractorSpec, height: usize, width: usize, t: usize, manifest: &DatasetManifest) -> Result<Self> {
        if spec.kind == ExtractorKind::ToyFrozen {
            return Self::new(spec, height, width, t);
        }
        let mut store = EmbeddingStore::default();
        for f in manifest.caption_files() {
            store.merge(EmbeddingStore::read(&f)?)?;
        }
        Self::with_store(spec, height, width, t, store)
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    /// Hash of every frozen parameter; constant for the extractor's lifetime.
    pub fn digest(&self) -> String {
        self.frozen.digest()
    }

    fn check_batch(&self, batch: &ImageBatch<T>) -> Result<()> {
        if batch.height() != self.height || batch.width() != self.width {
            return Err(Error::Shape(format!(
                "extractor built for {}x{}, batch is {}x{}",
                self.height,
                self.width,
                batch.height(),
                batch.width()
            )));
        }
        Ok(())
    }

    pub fn extract_caption_embedding(&self, batch: &ImageBatch<T>, source_ids: &[String]) -> Result<CaptionEmbedding<T>> {
        self.check_batch(batch)?;
        let len = embedding_len(self.height, self.width, self.t);
        let b = batch.batch_size();
        let mut data = Vec::with_capacity(b * len);
        match self.spec.kind {
            ExtractorKind::ToyFrozen => {
                for sample in batch.samples() {
                    data.extend(self.toy_caption(&sample));
                }
            }
            ExtractorKind::FilePrecomputed => {
                let store = self
                    .store
                    .as_ref()
                    .ok_or_else(|| Error::Lookup("no caption embedding file was loaded".into()))?;
                if source_ids.len() != b {
                    return Err(Error::Shape(format!("{} source ids for a batch of {b}", source_ids.len())));
                }
                for id in source_ids {
                    let v = store
                        .vectors
                        .get(id)
                        .ok_or_else(|| Error::Lookup(format!("no caption embedding for {id:?}")))?;
                    if v.len() != len {
                        return Err(Error::Shape(format!("embedding for {id:?} has length {}, expected {len}", v.len())));
                    }
                    data.extend(v.iter().map(|&x| T::from_f32_exact(x)));
                }
            }
        }
        Ok(CaptionEmbedding {
            data: Tensor::from_vec(&[b, len], data)?,
        })
    }

    /// conv3x3 -> ReLU -> global average pool -> fixed projection.
    fn toy_caption(&self, sample: &Tensor<T>) -> Vec<T> {
        let g = ConvGeometry {
            h: self.height,
            w: self.width,
            c: 3,
            k: 3,
            stride: 1,
        };
        let feat = conv::conv_forward(
            sample.data(),
            &g,
            self.frozen.get("caption.conv.kernel").data(),
            self.frozen.get("caption.conv.bias").data(),
        );
        let mut pooled = vec![T::zero(); TOY_FEATURES];
        for px in feat.chunks_exact(TOY_FEATURES) {
            for (p, &v) in pooled.iter_mut().zip(px) {
                *p += v.max(T::zero());
            }
        }
        let inv = T::from_f64_lossy(1.0 / g.out_pixels() as f64);
        for p in &mut pooled {
            *p *= inv;
        }
        let len = embedding_len(self.height, self.width, self.t);
        let mut out = vec![T::zero(); len];
        T::gemm(
            1,
            TOY_FEATURES,
            len,
            T::one(),
            &pooled,
            false,
            self.frozen.get("caption.proj").data(),
            false,
            T::zero(),
            &mut out,
        );
        out
    }

    pub fn extract_segmentation(&self, batch: &ImageBatch<T>, labels: Option<&[LabelMap]>) -> Result<SegmentationMap<T>> {
        self.check_batch(batch)?;
        let (b, h, w) = (batch.batch_size(), batch.height(), batch.width());
        let top = (self.spec.levels - 1) as f64;
        let data = match self.spec.kind {
            ExtractorKind::ToyFrozen => luminance_levels(batch, self.spec.levels),
            ExtractorKind::FilePrecomputed => {
                let labels = labels.ok_or_else(|| Error::Lookup("batch carries no segmentation label maps".into()))?;
                if labels.len() != b {
                    return Err(Error::Shape(format!("{} label maps for a batch of {b}", labels.len())));
                }
                let mut out = Vec::with_capacity(b * h * w);
                for m in labels {
                    if m.height != h || m.width != w {
                        return Err(Error::Shape(format!("label map is {}x{}, images are {h}x{w}", m.height, m.width)));
                    }
                    out.extend(m.labels.iter().map(|&id| T::from_f64_lossy((id as f64 / top).min(1.0))));
                }
                out
            }
        };
        Ok(SegmentationMap {
            data: Tensor::from_vec(&[b, h, w, 1], data)?,
        })
    }

    /// Runs every level for a batch, honoring which branches are in use.
    pub fn extract(&self, batch: &Batch<T>, want_caption: bool, want_segmentation: bool) -> Result<SemanticFeatures<T>> {
        let caption = if want_caption {
            Some(self.extract_caption_embedding(&batch.images, &batch.source_ids)?)
        } else {
            None
        };
        let (segmentation, lowlevel) = if want_segmentation {
            let seg = self.extract_segmentation(&batch.images, batch.labels.as_deref())?;
            let stack = build_lowlevel_stack(&batch.images, &seg)?;
            (Some(seg), stack)
        } else {
            (None, LowLevelStack { data: batch.images.data.clone() })
        };
        Ok(SemanticFeatures {
            caption,
            segmentation,
            lowlevel,
        })
    }
}

/// Luminance `0.299R + 0.587G + 0.114B` quantized to `levels` bins,
/// emitted as `bin / (levels - 1)`.
fn luminance_levels<T: Scalar>(batch: &ImageBatch<T>, levels: u32) -> Vec<T> {
    let top = (levels - 1) as f64;
    batch
        .data
        .data()
        .chunks_exact(3)
        .map(|px| {
            let y = 0.299 * px[0].as_f64() + 0.587 * px[1].as_f64() + 0.114 * px[2].as_f64();
            let bin = ((y * levels as f64).floor()).clamp(0.0, top);
            T::from_f64_lossy(bin / top)
        })
        .collect()
}

pub fn build_lowlevel_stack<T: Scalar>(batch: &ImageBatch<T>, seg: &SegmentationMap<T>) -> Result<LowLevelStack<T>> {
    let bs = batch.data.shape();
    let ss = seg.data.shape();
    if ss.len() != 4 || ss[..3] != bs[..3] || ss[3] != 1 {
        return Err(Error::Shape(format!("segmentation {ss:?} does not match images {bs:?}")));
    }
    Ok(LowLevelStack {
        data: Tensor::concat_channels(&[&batch.data, &seg.data])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawImage;

    fn batch_of(images: &[RawImage]) -> ImageBatch<f64> {
        ImageBatch::from_images(images).unwrap()
    }

    #[test]
    fn embedding_length_formula() {
        assert_eq!(embedding_len(128, 128, 8), 512);
        let ex = SemanticExtractor::<f64>::new(ExtractorSpec::default(), 128, 128, 8).unwrap();
        let b = batch_of(&[RawImage::filled(128, 128, [10, 200, 30], "a")]);
        let p = ex.extract_caption_embedding(&b, &["a".into()]).unwrap();
        assert_eq!(p.data.shape(), &[1, 512]);
        assert!(p.data.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_images_identical_embeddings() {
        let ex = SemanticExtractor::<f64>::new(ExtractorSpec::default(), 16, 16, 4).unwrap();
        let img = RawImage::filled(16, 16, [1, 2, 3], "a");
        let p = ex.extract_caption_embedding(&batch_of(&[img.clone(), img]), &[]).unwrap();
        let rows = p.data.unstack();
        assert_eq!(rows[0], rows[1]);
    }

    #[test]
    fn constant_image_constant_map() {
        let ex = SemanticExtractor::<f64>::new(ExtractorSpec::default(), 8, 8, 4).unwrap();
        let a = ex.extract_segmentation(&batch_of(&[RawImage::filled(8, 8, [90, 140, 20], "c")]), None).unwrap();
        let first = a.data.data()[0];
        assert!(a.data.data().iter().all(|&v| v == first));
    }

    #[test]
    fn half_black_half_white_two_levels() {
        let mut px = Vec::new();
        for _y in 0..4 {
            for x in 0..4 {
                let v = if x < 2 { 0 } else { 255 };
                px.extend_from_slice(&[v, v, v]);
            }
        }
        let spec = ExtractorSpec { levels: 2, ..Default::default() };
        let ex = SemanticExtractor::<f64>::new(spec, 4, 4, 4).unwrap();
        let a = ex
            .extract_segmentation(&batch_of(&[RawImage::new(4, 4, px, "bw").unwrap()]), None)
            .unwrap();
        for (i, &v) in a.data.data().iter().enumerate() {
            assert_eq!(v, if i % 4 < 2 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn lowlevel_stack_layout() {
        let ex = SemanticExtractor::<f64>::new(ExtractorSpec::default(), 8, 8, 4).unwrap();
        let b = batch_of(&[RawImage::filled(8, 8, [250, 3, 77], "x"), RawImage::filled(8, 8, [0, 90, 7], "y")]);
        let a = ex.extract_segmentation(&b, None).unwrap();
        let f = build_lowlevel_stack(&b, &a).unwrap();
        assert_eq!(f.data.shape(), &[2, 8, 8, 4]);
        assert_eq!(f.data.slice_channels(0, 3).unwrap(), b.data);
        assert_eq!(f.data.slice_channels(3, 1).unwrap(), a.data);
    }

    #[test]
    fn lowlevel_stack_rejects_mismatch() {
        let b = batch_of(&[RawImage::filled(8, 8, [0, 0, 0], "x")]);
        let seg = SegmentationMap { data: Tensor::<f64>::zeros(&[1, 4, 8, 1]) };
        assert!(matches!(build_lowlevel_stack(&b, &seg), Err(Error::Shape(_))));
    }

    #[test]
    fn precomputed_lookup_errors() {
        let spec = ExtractorSpec { kind: ExtractorKind::FilePrecomputed, ..Default::default() };
        let mut store = EmbeddingStore { dim: 5, ..Default::default() };
        store.vectors.insert("short".into(), vec![0.0; 5]);
        let ex = SemanticExtractor::<f64>::with_store(spec, 8, 8, 4, store).unwrap();
        let b = batch_of(&[RawImage::filled(8, 8, [0, 0, 0], "x")]);
        assert!(matches!(ex.extract_caption_embedding(&b, &["missing".into()]), Err(Error::Lookup(_))));
        assert!(matches!(ex.extract_caption_embedding(&b, &["short".into()]), Err(Error::Shape(_))));
    }

    #[test]
    fn embedding_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut store = EmbeddingStore { dim: 3, ..Default::default() };
        store.vectors.insert("img0".into(), vec![1.5, -2.0, f32::MIN_POSITIVE]);
        store.vectors.insert("img1".into(), vec![0.0, 7.25, -0.125]);
        store.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"MLSCEMB1");
        assert_eq!(EmbeddingStore::read(&path).unwrap(), store);
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(EmbeddingStore::read(&path).is_err());
    }
}
