//! Evaluation harnesses: rate/SNR sweeps against the digital baseline, the
//! train/test SNR mismatch matrix, and branch ablations.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baseline::{digital_baseline_with_table, QualityTable};
use crate::channel::budget_for;
use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::codec::Model;
use crate::config::{e_for_ratio, ratio_fraction, ModelConfig, Variant};
use crate::data::{denormalize, Batch, BatchMode, Batcher, DatasetManifest, RawImage};
use crate::error::{Error, Result};
use crate::extractors::{ExtractorSpec, SemanticExtractor};
use crate::metrics::{format_db, MetricReport};
use crate::nn::ParameterSet;
use crate::scalar::Scalar;
use crate::training::{batch_features, channel_draws, train, TrainConfig};

pub const LEARNED: &str = "mlsc";
pub const BASELINE: &str = "jpeg";

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub system: String,
    pub ratio: (usize, usize),
    /// `None` for systems that are not trained (the digital baseline).
    pub train_snr_db: Option<f64>,
    pub test_snr_db: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Fraction of images the system failed to deliver.
    pub failed: f64,
}

impl ResultRow {
    fn key_cmp(&self, other: &Self) -> Ordering {
        let r = |x: &Self| x.ratio.0 as f64 / x.ratio.1 as f64;
        self.system
            .cmp(&other.system)
            .then(r(self).total_cmp(&r(other)))
            .then(
                self.train_snr_db
                    .unwrap_or(f64::NEG_INFINITY)
                    .total_cmp(&other.train_snr_db.unwrap_or(f64::NEG_INFINITY)),
            )
            .then(self.test_snr_db.total_cmp(&other.test_snr_db))
    }
}

pub const RESULTS_HEADER: &str = "system,ratio,train_snr_db,test_snr_db,psnr_db,ssim,failed";

/// Sorts by `(system, ratio, train_snr_db, test_snr_db)`.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.key_cmp(b));
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in &rows {
        let _ = writeln!(
            s,
            "{},{}/{},{},{},{},{:.6},{:.6}",
            r.system,
            r.ratio.0,
            r.ratio.1,
            r.train_snr_db.map(format_db).unwrap_or_else(|| "-".into()),
            format_db(r.test_snr_db),
            format_db(r.psnr_db),
            r.ssim,
            r.failed
        );
    }
    s
}

/// Evaluation images, center-cropped once.
pub struct EvalSet<T> {
    pub batches: Vec<Batch<T>>,
}

impl<T: Scalar> EvalSet<T> {
    pub fn load(manifest: &DatasetManifest, height: usize, width: usize, batch_size: usize) -> Result<Self> {
        let batcher = Batcher::new(manifest, batch_size, BatchMode::Eval, (height, width))?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        Ok(EvalSet {
            batches: batcher.epoch(&mut unused)?,
        })
    }

    pub fn raw_images(&self) -> Vec<RawImage> {
        self.batches.iter().flat_map(|b| b.raw.iter().cloned()).collect()
    }

    pub fn len(&self) -> usize {
        self.batches.iter().map(|b| b.raw.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A trained model ready for evaluation.
pub struct LearnedSystem<T> {
    pub model: Model,
    pub params: ParameterSet<T>,
    pub extractor: SemanticExtractor<T>,
    pub train_snr_db: f64,
}

impl<T: Scalar> LearnedSystem<T> {
    pub fn new(cfg: &ModelConfig, params: ParameterSet<T>, extractor: ExtractorSpec, train_snr_db: f64) -> Result<Self> {
        let model = Model::new(cfg)?;
        model.init_params::<T>().check_compatible(&params)?;
        Ok(LearnedSystem {
            extractor: SemanticExtractor::new(extractor, cfg.height, cfg.width, cfg.t)?,
            model,
            params,
            train_snr_db,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::new(&ck.model, ck.params.cast(), ck.extractor, ck.train_snr_db)
    }

    /// Rebinds the extractor to the embedding files of `manifest`.
    pub fn bind_manifest(mut self, manifest: &DatasetManifest) -> Result<Self> {
        let c = self.model.config();
        self.extractor = SemanticExtractor::for_manifest(*self.extractor.spec(), c.height, c.width, c.t, manifest)?;
        Ok(self)
    }

    /// Reconstructions at `snr_db`. Batch `j` uses noise stream `(seed, j)`,
    /// so equal-width systems see identical realizations.
    pub fn reconstruct(&self, set: &EvalSet<T>, snr_db: f64, seed: u64) -> Result<Vec<RawImage>> {
        let mut out = Vec::with_capacity(set.len());
        for (j, batch) in set.batches.iter().enumerate() {
            let feats = batch_features(&self.model, &self.extractor, batch)?;
            let draws = channel_draws::<T>(self.model.config(), batch.images.batch_size(), snr_db, seed, j as u64);
            let rec = self.model.reconstruct(&self.params, &batch.images, &feats, &draws)?;
            for (mut img, src) in denormalize(&rec).into_iter().zip(&batch.source_ids) {
                img.source_id = src.clone();
                out.push(img);
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, set: &EvalSet<T>, snr_db: f64, seed: u64) -> Result<MetricReport> {
        MetricReport::compute(&set.raw_images(), &self.reconstruct(set, snr_db, seed)?)
    }

    pub fn ratio(&self) -> (usize, usize) {
        let c = self.model.config();
        ratio_fraction(c.e, c.t)
    }

    pub fn rows(&self, set: &EvalSet<T>, snrs: &[f64], seed: u64, system: &str) -> Result<Vec<ResultRow>> {
        snrs.iter()
            .map(|&snr| {
                let m = self.evaluate(set, snr, seed)?;
                Ok(ResultRow {
                    system: system.to_string(),
                    ratio: self.ratio(),
                    train_snr_db: Some(self.train_snr_db),
                    test_snr_db: snr,
                    psnr_db: m.psnr_db,
                    ssim: m.ssim,
                    failed: 0.0,
                })
            })
            .collect()
    }
}

/// The digital reference with per-image quality tables built once.
pub struct BaselineSystem {
    pub images: Vec<RawImage>,
    pub tables: Vec<QualityTable>,
}

impl BaselineSystem {
    pub fn new(images: Vec<RawImage>) -> Result<Self> {
        let tables = images.par_iter().map(QualityTable::build).collect::<Result<Vec<_>>>()?;
        Ok(BaselineSystem { images, tables })
    }

    /// Mean metrics and failure fraction for `real_count` channel reals per image.
    pub fn evaluate(&self, real_count: usize, snr_db: f64) -> Result<(MetricReport, f64)> {
        let mut recs = Vec::with_capacity(self.images.len());
        let mut failures = 0usize;
        for (img, table) in self.images.iter().zip(&self.tables) {
            let budget = budget_for(3 * img.height * img.width, real_count, snr_db);
            let r = digital_baseline_with_table(img, table, &budget)?;
            failures += r.failed as usize;
            recs.push(r.reconstruction);
        }
        Ok((MetricReport::compute(&self.images, &recs)?, failures as f64 / self.images.len() as f64))
    }

    pub fn rows(&self, ratio: (usize, usize), t: usize, snrs: &[f64]) -> Result<Vec<ResultRow>> {
        let e = e_for_ratio(ratio.0, ratio.1, t)?;
        let img = self
            .images
            .first()
            .ok_or_else(|| Error::Dataset("baseline has no images".into()))?;
        let real_count = (img.height / t) * (img.width / t) * e;
        snrs.iter()
            .map(|&snr| {
                let (m, failed) = self.evaluate(real_count, snr)?;
                Ok(ResultRow {
                    system: BASELINE.to_string(),
                    ratio: ratio_fraction(e, t),
                    train_snr_db: None,
                    test_snr_db: snr,
                    psnr_db: m.psnr_db,
                    ssim: m.ssim,
                    failed,
                })
            })
            .collect()
    }
}

/// Sorted, de-duplicated SNR list.
pub fn sorted_snrs(snrs: &[f64]) -> Vec<f64> {
    let mut v = snrs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<ResultRow>,
    /// Operating points whose checkpoint was missing or unreadable.
    pub absent: Vec<String>,
}

/// One `(ratio, checkpoint)` operating point per entry. `t` applies to the
/// baseline when a checkpoint is absent.
pub fn sweep(points: &[((usize, usize), PathBuf)], snrs: &[f64], manifest: &DatasetManifest, t: usize, seed: u64) -> Result<SweepResult> {
    let snrs = sorted_snrs(snrs);
    let mut rows = Vec::new();
    let mut absent = Vec::new();
    let mut baseline: Option<(usize, usize, BaselineSystem)> = None;
    for (ratio, path) in points {
        let learned = load_checkpoint(path).and_then(|ck| {
            let e = e_for_ratio(ratio.0, ratio.1, ck.model.t)?;
            if ck.model.e != e {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint {} has e={}, ratio {}/{} needs e={e}",
                    path.display(),
                    ck.model.e,
                    ratio.0,
                    ratio.1
                )));
            }
            LearnedSystem::<f32>::from_checkpoint(&ck)?.bind_manifest(manifest)
        });
        let (h, w, t) = match &learned {
            Ok(s) => (s.model.config().height, s.model.config().width, s.model.config().t),
            Err(_) => {
                let d = ModelConfig::default();
                (d.height, d.width, t)
            }
        };
        let set = EvalSet::<f32>::load(manifest, h, w, 8)?;
        match learned {
            Ok(sys) => rows.extend(sys.rows(&set, &snrs, seed, LEARNED)?),
            Err(e) => absent.push(format!("{}/{} ({}): {e}", ratio.0, ratio.1, path.display())),
        }
        let reuse = matches!(&baseline, Some((bh, bw, _)) if (*bh, *bw) == (h, w));
        if !reuse {
            baseline = Some((h, w, BaselineSystem::new(set.raw_images())?));
        }
        rows.extend(baseline.as_ref().unwrap().2.rows(*ratio, t, &snrs)?);
    }
    sort_rows(&mut rows);
    Ok(SweepResult { rows, absent })
}

/// PSNR for every `(train_snr, test_snr)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrMatrix {
    pub train_snrs: Vec<f64>,
    pub test_snrs: Vec<f64>,
    /// `psnr[i][j]` for train SNR `i` and test SNR `j`.
    pub psnr: Vec<Vec<f64>>,
    pub rows: Vec<ResultRow>,
    pub absent: Vec<String>,
}

impl SnrMatrix {
    pub fn csv(&self) -> String {
        let mut s = String::from("train_snr_db");
        for t in &self.test_snrs {
            let _ = write!(s, ",{}", format_db(*t));
        }
        s.push('\n');
        for (tr, row) in self.train_snrs.iter().zip(&self.psnr) {
            s.push_str(&format_db(*tr));
            for v in row {
                let _ = write!(s, ",{}", format_db(*v));
            }
            s.push('\n');
        }
        s
    }
}

pub fn snr_mismatch_matrix(
    ckpts_by_train_snr: &[(f64, PathBuf)],
    test_snrs: &[f64],
    manifest: &DatasetManifest,
    seed: u64,
) -> Result<SnrMatrix> {
    let test_snrs = sorted_snrs(test_snrs);
    let mut pts: Vec<(f64, PathBuf)> = ckpts_by_train_snr.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut m = SnrMatrix {
        train_snrs: Vec::new(),
        test_snrs: test_snrs.clone(),
        psnr: Vec::new(),
        rows: Vec::new(),
        absent: Vec::new(),
    };
    for (train_snr, path) in pts {
        let sys = match load_checkpoint(&path).and_then(|ck| LearnedSystem::<f32>::from_checkpoint(&ck)?.bind_manifest(manifest)) {
            Ok(mut s) => {
                s.train_snr_db = train_snr;
                s
            }
            Err(e) => {
                m.absent.push(format!("{} ({}): {e}", format_db(train_snr), path.display()));
                continue;
            }
        };
        let c = sys.model.config();
        let set = EvalSet::<f32>::load(manifest, c.height, c.width, 8)?;
        let rows = sys.rows(&set, &test_snrs, seed, LEARNED)?;
        m.train_snrs.push(train_snr);
        m.psnr.push(rows.iter().map(|r| r.psnr_db).collect());
        m.rows.extend(rows);
    }
    sort_rows(&mut m.rows);
    Ok(m)
}

/// Results for one ablation variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantTable {
    pub variant: Variant,
    pub latent_width: usize,
    pub e: usize,
    pub rows: Vec<ResultRow>,
}

/// Retrains each variant from scratch on `train_set` and evaluates all of
/// them on `eval_set` with the same noise seed.
pub fn ablation(
    train_set: &DatasetManifest,
    eval_set: &DatasetManifest,
    tcfg: &TrainConfig,
    variants: &[Variant],
    test_snrs: &[f64],
    seed: u64,
) -> Result<Vec<VariantTable>> {
    let test_snrs = sorted_snrs(test_snrs);
    let mut out = Vec::new();
    for &v in variants {
        let mut t = tcfg.clone();
        t.cfg = v.model_config(&tcfg.cfg);
        let state = train::<f32>(train_set, &t, None)?;
        let sys = LearnedSystem::new(&t.cfg, state.params, t.extractor, t.train_snr_db)?.bind_manifest(eval_set)?;
        let set = EvalSet::<f32>::load(eval_set, t.cfg.height, t.cfg.width, t.batch_size)?;
        out.push(VariantTable {
            variant: v,
            latent_width: t.cfg.latent_width(),
            e: t.cfg.e,
            rows: sys.rows(&set, &test_snrs, seed, v.as_str())?,
        });
    }
    Ok(out)
}

/// Variant-by-SNR PSNR/SSIM table.
pub fn ablation_csv(tables: &[VariantTable]) -> String {
    let mut s = String::from("variant,latent_width,e,test_snr_db,psnr_db,ssim\n");
    for t in tables {
        for r in &t.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6}",
                t.variant.as_str(),
                t.latent_width,
                t.e,
                format_db(r.test_snr_db),
                format_db(r.psnr_db),
                r.ssim
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(system: &str, ratio: (usize, usize), test: f64) -> ResultRow {
        ResultRow {
            system: system.into(),
            ratio,
            train_snr_db: Some(10.0),
            test_snr_db: test,
            psnr_db: 20.0,
            ssim: 0.5,
            failed: 0.0,
        }
    }

    #[test]
    fn csv_is_sorted_by_key() {
        let rows = vec![row("mlsc", (1, 16), 5.0), row("jpeg", (1, 48), 0.0), row("mlsc", (1, 48), 20.0), row("mlsc", (1, 48), -5.0)];
        let csv = results_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RESULTS_HEADER);
        assert!(lines[1].starts_with("jpeg,1/48"));
        assert!(lines[2].starts_with("mlsc,1/48,10.000000,-5.000000"));
        assert!(lines[3].starts_with("mlsc,1/48,10.000000,20.000000"));
        assert!(lines[4].starts_with("mlsc,1/16"));
    }

    #[test]
    fn snr_lists_are_sorted() {
        assert_eq!(sorted_snrs(&[10.0, 0.0, 5.0, 0.0]), vec![0.0, 5.0, 10.0]);
    }
}
