//! Shared fixtures: deterministic synthetic images and manifests.

#![allow(dead_code)]

use std::path::Path;

use mlsc_core::data::{save_png, DatasetManifest, RawImage, Split};
use mlsc_core::training::TrainConfig;
use mlsc_core::ModelConfig;

/// Smooth color field with one soft-edged disc; `seed` varies phase and layout.
pub fn synthetic_image(h: usize, w: usize, seed: usize) -> RawImage {
    let s = seed as f64;
    let (cx, cy) = (0.3 + 0.4 * ((s * 1.7).sin() * 0.5 + 0.5), 0.3 + 0.4 * ((s * 2.3).cos() * 0.5 + 0.5));
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let disc = 1.0 / (1.0 + ((d - 0.18) * 40.0).exp());
            let r = 0.5 + 0.35 * (6.0 * fx + s).sin() - 0.25 * disc;
            let g = 0.5 + 0.35 * (5.0 * fy - 0.7 * s).cos() + 0.2 * disc;
            let b = 0.5 + 0.35 * (4.0 * (fx + fy) + 1.3 * s).sin();
            for v in [r, g, b] {
                px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RawImage::new(h, w, px, format!("synthetic{seed}")).unwrap()
}

/// Writes `n` synthetic images plus a manifest into `dir`.
pub fn write_dataset(dir: &Path, n: usize, h: usize, w: usize, first_seed: usize, split: Split) -> DatasetManifest {
    let paths: Vec<_> = (0..n)
        .map(|i| {
            let p = dir.join(format!("img{:03}.png", first_seed + i));
            save_png(&synthetic_image(h, w, first_seed + i), &p).unwrap();
            p
        })
        .collect();
    let m = DatasetManifest::from_images(paths, split);
    m.write(dir.join(match split {
        Split::Train => "train.tsv",
        Split::Val => "val.tsv",
        Split::Test => "test.tsv",
    }))
    .unwrap();
    m
}

/// The overfit benchmark model: 64x64, t=8, l=4, e=8.
pub fn overfit_model() -> ModelConfig {
    ModelConfig {
        height: 64,
        width: 64,
        t: 8,
        l: 4,
        e: 8,
        o: 16,
        enc_hidden: 64,
        dec_hidden: 64,
        fusion_hidden: 64,
        seed: 3,
        ..Default::default()
    }
}

pub fn overfit_train(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-4,
        batch_size: 8,
        steps,
        train_snr_db: 10.0,
        cfg: overfit_model(),
        seed: 11,
        ..Default::default()
    }
}

/// Tiny configuration for exhaustive checks.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        t: 4,
        l: 3,
        e: 5,
        o: 4,
        enc_hidden: 4,
        dec_hidden: 4,
        fusion_hidden: 4,
        ..Default::default()
    }
}
