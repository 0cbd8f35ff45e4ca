//! Image ingestion, normalization, cropping, manifests, and batching.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major `h x w x 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub source_id: String,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, source_id: impl Into<String>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(RawImage {
            height,
            width,
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3], source_id: impl Into<String>) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        RawImage {
            height,
            width,
            pixels,
            source_id: source_id.into(),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Single-channel integer label map (precomputed segmentation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

/// Normalized images `b x h x w x 3` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[3] != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!("image batch must be b x h x w x 3, got {s:?}")));
        }
        Ok(ImageBatch { data })
    }

    pub fn from_images(images: &[RawImage]) -> Result<Self> {
        let items: Vec<Tensor<T>> = images.iter().map(normalize).collect();
        ImageBatch::new(Tensor::stack(&items)?)
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Per-sample `h x w x 3` tensors.
    pub fn samples(&self) -> Vec<Tensor<T>> {
        self.data.unstack()
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.data().iter().all(|&v| v >= T::zero() && v <= T::one())
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RawImage::new(h as usize, w as usize, rgb.into_raw(), source_id_for(path))
}

/// Source id used to match side data: the file stem.
pub fn source_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn save_png(img: &RawImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| Error::Shape("pixel buffer does not match dimensions".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Encode(other.to_string()),
    })
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    let is_8bit = matches!(img.color(), image::ColorType::L8 | image::ColorType::La8 | image::ColorType::Rgb8 | image::ColorType::Rgba8);
    let labels = luma
        .into_raw()
        .into_iter()
        .map(|v| if is_8bit { v / 257 } else { v })
        .collect();
    Ok(LabelMap {
        height: h as usize,
        width: w as usize,
        labels,
    })
}

/// `pixels / 255` as an `h x w x 3` tensor.
pub fn normalize<T: Scalar>(img: &RawImage) -> Tensor<T> {
    let scale = T::from_f64_lossy(255.0);
    let data = img.pixels.iter().map(|&p| T::from_f64_lossy(p as f64) / scale).collect();
    Tensor::from_vec(&[img.height, img.width, 3], data).expect("raw image invariant")
}

/// `round(clamp(v, 0, 1) * 255)` per sample.
pub fn denormalize<T: Scalar>(batch: &ImageBatch<T>) -> Vec<RawImage> {
    batch
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| denormalize_sample(s, format!("sample{i}")))
        .collect()
}

pub fn denormalize_sample<T: Scalar>(sample: &Tensor<T>, source_id: impl Into<String>) -> RawImage {
    let s = sample.shape();
    let pixels = sample
        .data()
        .iter()
        .map(|&v| {
            let v = v.as_f64();
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            (v * 255.0).round() as u8
        })
        .collect();
    RawImage {
        height: s[0],
        width: s[1],
        pixels,
        source_id: source_id.into(),
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads so the image is at least `h x w`, splitting padding evenly.
fn pad_to(img: &RawImage, h: usize, w: usize) -> RawImage {
    if img.height >= h && img.width >= w {
        return img.clone();
    }
    let nh = img.height.max(h);
    let nw = img.width.max(w);
    let top = ((nh - img.height) / 2) as isize;
    let left = ((nw - img.width) / 2) as isize;
    let mut pixels = Vec::with_capacity(nh * nw * 3);
    for y in 0..nh {
        let sy = reflect(y as isize - top, img.height);
        for x in 0..nw {
            let sx = reflect(x as isize - left, img.width);
            pixels.extend_from_slice(&img.pixel(sy, sx));
        }
    }
    RawImage {
        height: nh,
        width: nw,
        pixels,
        source_id: img.source_id.clone(),
    }
}

fn window(img: &RawImage, top: usize, left: usize, h: usize, w: usize) -> RawImage {
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in top..top + h {
        let row = (y * img.width + left) * 3;
        pixels.extend_from_slice(&img.pixels[row..row + w * 3]);
    }
    RawImage {
        height: h,
        width: w,
        pixels,
        source_id: img.source_id.clone(),
    }
}

/// Crop origin chosen for a crop, so side data can be cut identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

fn check_crop(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Argument(format!("crop size must be positive, got {h}x{w}")));
    }
    Ok(())
}

pub fn random_crop<R: Rng>(img: &RawImage, h: usize, w: usize, rng: &mut R) -> Result<RawImage> {
    random_crop_window(img, h, w, rng).map(|(c, _)| c)
}

/// Random crop that also reports the window (in padded coordinates).
pub fn random_crop_window<R: Rng>(img: &RawImage, h: usize, w: usize, rng: &mut R) -> Result<(RawImage, CropWindow)> {
    check_crop(h, w)?;
    let padded = pad_to(img, h, w);
    let top = rng.random_range(0..=padded.height - h);
    let left = rng.random_range(0..=padded.width - w);
    let win = CropWindow { top, left, height: h, width: w };
    Ok((window(&padded, top, left, h, w), win))
}

pub fn center_crop(img: &RawImage, h: usize, w: usize) -> Result<(RawImage, CropWindow)> {
    check_crop(h, w)?;
    let padded = pad_to(img, h, w);
    let top = (padded.height - h) / 2;
    let left = (padded.width - w) / 2;
    let win = CropWindow { top, left, height: h, width: w };
    Ok((window(&padded, top, left, h, w), win))
}

/// Largest size not exceeding the image that is divisible by `t` in both axes.
pub fn divisible_size(height: usize, width: usize, t: usize) -> (usize, usize) {
    ((height / t) * t, (width / t) * t)
}

fn crop_labels(map: &LabelMap, win: CropWindow) -> LabelMap {
    // Pad labels the same way as the image before cutting the window.
    let nh = map.height.max(win.height);
    let nw = map.width.max(win.width);
    let top = ((nh - map.height) / 2) as isize;
    let left = ((nw - map.width) / 2) as isize;
    let mut labels = Vec::with_capacity(win.height * win.width);
    for y in win.top..win.top + win.height {
        let sy = reflect(y as isize - top, map.height);
        for x in win.left..win.left + win.width {
            let sx = reflect(x as isize - left, map.width);
            labels.push(map.labels[sy * map.width + sx]);
        }
    }
    LabelMap {
        height: win.height,
        width: win.width,
        labels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub segmentation: Option<PathBuf>,
    pub caption_embedding: Option<PathBuf>,
}

/// A list of images with optional precomputed side data.
///
/// On disk: one record per line, tab separated:
/// `image_path<TAB>seg_path|-<TAB>caption_emb_path|-`. Relative paths are
/// resolved against the manifest's directory. Blank lines and lines starting
/// with `#` are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Dataset(format!(
                    "{}:{}: expected 3 tab-separated fields, found {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let resolve = |f: &str| -> Option<PathBuf> {
                if f == "-" || f.is_empty() {
                    None
                } else {
                    Some(base.join(f))
                }
            };
            let entry = ManifestEntry {
                image: resolve(fields[0]).ok_or_else(|| {
                    Error::Dataset(format!("{}:{}: image path is required", path.display(), lineno + 1))
                })?,
                segmentation: resolve(fields[1]),
                caption_embedding: resolve(fields[2]),
            };
            entries.push(entry);
        }
        let m = DatasetManifest { entries, split };
        m.validate()?;
        Ok(m)
    }

    pub fn from_images(paths: impl IntoIterator<Item = PathBuf>, split: Split) -> Self {
        DatasetManifest {
            entries: paths
                .into_iter()
                .map(|image| ManifestEntry {
                    image,
                    segmentation: None,
                    caption_embedding: None,
                })
                .collect(),
            split,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let field = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.image.display(),
                field(&e.segmentation),
                field(&e.caption_embedding)
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Every referenced path must exist.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            for p in std::iter::once(&e.image).chain(e.segmentation.iter()).chain(e.caption_embedding.iter()) {
                if !p.exists() {
                    return Err(Error::Dataset(format!("manifest references missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Distinct caption-embedding files referenced by the manifest.
    pub fn caption_files(&self) -> Vec<PathBuf> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter_map(|e| e.caption_embedding.clone())
            .filter(|p| seen.insert(p.clone()))
            .collect()
    }
}

/// Fails if any image appears in more than one manifest.
pub fn check_disjoint(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut seen = HashSet::new();
    for m in manifests {
        for e in &m.entries {
            let key = fs::canonicalize(&e.image).unwrap_or_else(|_| e.image.clone());
            if !seen.insert(key) {
                return Err(Error::Dataset(format!("{} appears in more than one split", e.image.display())));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffle every epoch and drop the final partial batch.
    Train,
    /// Manifest order, center crops, final partial batch kept.
    Eval,
}

/// One batch of images plus the side data attached to each sample.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: ImageBatch<T>,
    pub raw: Vec<RawImage>,
    pub source_ids: Vec<String>,
    /// Present only when every entry in the manifest carries a label map.
    pub labels: Option<Vec<LabelMap>>,
}

struct Loaded {
    image: RawImage,
    labels: Option<LabelMap>,
}

/// Streams batches from a manifest. Images are decoded once and kept in memory.
pub struct Batcher {
    items: Vec<Loaded>,
    batch_size: usize,
    mode: BatchMode,
    crop: (usize, usize),
}

impl Batcher {
    pub fn new(manifest: &DatasetManifest, batch_size: usize, mode: BatchMode, crop: (usize, usize)) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if manifest.entries.is_empty() {
            return Err(Error::Dataset("manifest is empty".into()));
        }
        check_crop(crop.0, crop.1)?;
        let all_labels = manifest.entries.iter().all(|e| e.segmentation.is_some());
        let mut items = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let image = load_image(&e.image)?;
            let labels = match (&e.segmentation, all_labels) {
                (Some(p), true) => {
                    let map = load_label_map(p)?;
                    if map.height != image.height || map.width != image.width {
                        return Err(Error::Shape(format!(
                            "label map {} is {}x{}, image is {}x{}",
                            p.display(),
                            map.height,
                            map.width,
                            image.height,
                            image.width
                        )));
                    }
                    Some(map)
                }
                _ => None,
            };
            items.push(Loaded { image, labels });
        }
        Ok(Batcher {
            items,
            batch_size,
            mode,
            crop,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        match self.mode {
            BatchMode::Train => self.items.len() / self.batch_size,
            BatchMode::Eval => self.items.len().div_ceil(self.batch_size),
        }
    }

    /// All batches of one epoch. Train mode consumes randomness for the
    /// shuffle and the crops; eval mode is deterministic and ignores `rng`.
    pub fn epoch<T: Scalar, R: Rng>(&self, rng: &mut R) -> Result<Vec<Batch<T>>> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        if self.mode == BatchMode::Train {
            order.shuffle(rng);
        }
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.batch_size) {
            if self.mode == BatchMode::Train && chunk.len() < self.batch_size {
                break;
            }
            let mut raw = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let it = &self.items[i];
                let (img, win) = match self.mode {
                    BatchMode::Train => random_crop_window(&it.image, self.crop.0, self.crop.1, rng)?,
                    BatchMode::Eval => center_crop(&it.image, self.crop.0, self.crop.1)?,
                };
                if let Some(l) = &it.labels {
                    labels.push(crop_labels(l, win));
                }
                raw.push(img);
            }
            let images = ImageBatch::from_images(&raw)?;
            debug_assert!(images.in_unit_range());
            out.push(Batch {
                images,
                source_ids: raw.iter().map(|r| r.source_id.clone()).collect(),
                raw,
                labels: if labels.is_empty() { None } else { Some(labels) },
            });
        }
        Ok(out)
    }
}

/// Convenience wrapper: a batcher over `manifest` at the given crop size.
pub fn make_batches(manifest: &DatasetManifest, batch_size: usize, mode: BatchMode, crop: (usize, usize)) -> Result<Batcher> {
    Batcher::new(manifest, batch_size, mode, crop)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gradient(h: usize, w: usize) -> RawImage {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        RawImage::new(h, w, px, "g").unwrap()
    }

    #[test]
    fn normalize_endpoints() {
        let img = RawImage::new(1, 3, vec![255, 0, 128, 1, 2, 3, 4, 5, 6], "x").unwrap();
        let t = normalize::<f64>(&img);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn denormalize_clamps() {
        let t = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![1.0, 1.2, -0.3]).unwrap();
        let raw = denormalize(&ImageBatch::new(t).unwrap());
        assert_eq!(raw[0].pixels, vec![255, 255, 0]);
    }

    #[test]
    fn denormalize_inverts_normalize_for_every_byte() {
        let px: Vec<u8> = (0..=255u8).flat_map(|v| [v, v, v]).collect();
        let img = RawImage::new(16, 16, px, "all").unwrap();
        for back in [
            denormalize_sample(&normalize::<f32>(&img), "all"),
            denormalize_sample(&normalize::<f64>(&img), "all"),
        ] {
            assert_eq!(back, img);
        }
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = gradient(8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&img, 8, 6, &mut rng).unwrap(), img);
    }

    #[test]
    fn crop_shape_and_determinism() {
        let img = gradient(512, 768);
        let a = random_crop(&img, 128, 128, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&img, 128, 128, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!((a.height, a.width, a.pixels.len()), (128, 128, 128 * 128 * 3));
        assert_eq!(a, b);
    }

    #[test]
    fn undersized_images_are_reflect_padded() {
        let img = gradient(3, 4);
        let (c, _) = center_crop(&img, 5, 4).unwrap();
        assert_eq!((c.height, c.width), (5, 4));
        // one row of padding on each side mirrors rows 1 and 1
        assert_eq!(c.pixel(0, 0), img.pixel(1, 0));
        assert_eq!(c.pixel(1, 2), img.pixel(0, 2));
        assert_eq!(c.pixel(4, 3), img.pixel(1, 3));
    }

    #[test]
    fn nonpositive_crop_is_argument_error() {
        let img = gradient(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(random_crop(&img, 0, 4, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn reflect_index() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn divisible_size_rounds_down() {
        assert_eq!(divisible_size(512, 768, 8), (512, 768));
        assert_eq!(divisible_size(130, 67, 8), (128, 64));
    }
}
