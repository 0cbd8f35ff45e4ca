//! MSE objective, Adam optimizer and the step-count training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::codec::{ChannelDraw, Model};
use crate::config::ModelConfig;
use crate::data::{Batch, BatchMode, Batcher, DatasetManifest, ImageBatch};
use crate::error::{Error, Result};
use crate::extractors::{ExtractorSpec, SemanticExtractor, SemanticFeatures};
use crate::nn::ParameterSet;
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `(1/N) sum_k (1/n) |S_k - S^_k|^2`, `n = 3hw`, on normalized images.
pub fn mse_loss<T: Scalar>(s: &ImageBatch<T>, s_hat: &ImageBatch<T>) -> Result<f64> {
    if s.data.shape() != s_hat.data.shape() {
        return Err(Error::Shape(format!(
            "loss inputs are {:?} and {:?}",
            s.data.shape(),
            s_hat.data.shape()
        )));
    }
    let b = s.batch_size();
    let n = s.data.len() / b;
    let total: f64 = s
        .data
        .data()
        .chunks(n)
        .zip(s_hat.data.data().chunks(n))
        .map(|(a, c)| {
            a.iter()
                .zip(c)
                .map(|(&x, &y)| {
                    let d = x.as_f64() - y.as_f64();
                    d * d
                })
                .sum::<f64>()
                / n as f64
        })
        .sum();
    Ok(total / b as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, params: &ParameterSet<T>) -> Self {
        Adam {
            lr,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let b1 = T::from_f64_lossy(ADAM_BETA1);
        let b2 = T::from_f64_lossy(ADAM_BETA2);
        let one = T::one();
        let step = T::from_f64_lossy(self.lr / c1);
        let c2s = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(ADAM_EPS);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).data();
            let m = self.m.get_mut(name).data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let v = self.v.get_mut(name).data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let m = self.m.get(name).data();
            let v = self.v.get(name).data();
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= step * mi / ((vi * c2s).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub train_snr_db: f64,
    pub cfg: ModelConfig,
    pub seed: u64,
    pub extractor: ExtractorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            steps: 1000,
            train_snr_db: 10.0,
            cfg: ModelConfig::default(),
            seed: 0,
            extractor: ExtractorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive; got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.train_snr_db.is_nan() {
            return Err(Error::Config("train_snr_db is NaN".into()));
        }
        self.extractor.validate()?;
        self.cfg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ParameterSet<T>,
    pub optimizer: Adam<T>,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

impl<T: Scalar> TrainState<T> {
    pub fn checkpoint(&self, tcfg: &TrainConfig) -> Checkpoint {
        Checkpoint::new(&tcfg.cfg, &tcfg.extractor, self.step, tcfg.train_snr_db, &self.params)
    }
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,snr_db\n");
    for r in history {
        let _ = writeln!(s, "{},{:.9e},{}", r.step, r.loss, crate::metrics::format_db(r.snr_db));
    }
    s
}

/// Independent stream for `(seed, a, b)` via splitmix64 mixing.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b)
}

/// Channel realizations for a batch: one independent noise vector per sample.
pub fn channel_draws<T: Scalar>(cfg: &ModelConfig, batch: usize, snr_db: f64, seed: u64, step: u64) -> Vec<ChannelDraw<T>> {
    if snr_db == f64::INFINITY {
        return (0..batch).map(|_| ChannelDraw::Identity).collect();
    }
    let len = cfg.symbol_count();
    (0..batch)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step, i as u64));
            ChannelDraw::Noise(channel::noise(len, snr_db, &mut rng))
        })
        .collect()
}

/// Features for a batch as the model variant consumes them.
pub fn batch_features<T: Scalar>(model: &Model, extractor: &SemanticExtractor<T>, batch: &Batch<T>) -> Result<SemanticFeatures<T>> {
    let v = model.config().variant;
    extractor.extract(batch, v.has_caption(), v.has_segmentation())
}

/// Step-by-step trainer. Extractors are never written to.
pub struct Trainer<T> {
    pub model: Model,
    pub extractor: SemanticExtractor<T>,
    pub tcfg: TrainConfig,
    pub state: TrainState<T>,
    batcher: Batcher,
    data_rng: ChaCha8Rng,
    pending: Vec<Batch<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(manifest: &DatasetManifest, tcfg: &TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        let cfg = &tcfg.cfg;
        let model = Model::new(cfg)?;
        let extractor = SemanticExtractor::for_manifest(tcfg.extractor, cfg.height, cfg.width, cfg.t, manifest)?;
        let batch = tcfg.batch_size.min(manifest.entries.len().max(1));
        let batcher = Batcher::new(manifest, batch, BatchMode::Train, (cfg.height, cfg.width))?;
        let params = model.init_params::<T>();
        Ok(Trainer {
            state: TrainState {
                optimizer: Adam::new(tcfg.lr, &params),
                params,
                step: 0,
                history: Vec::new(),
            },
            model,
            extractor,
            tcfg: tcfg.clone(),
            batcher,
            data_rng: ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, u64::MAX, 0)),
            pending: Vec::new(),
        })
    }

    fn next_batch(&mut self) -> Result<Batch<T>> {
        if self.pending.is_empty() {
            let mut b = self.batcher.epoch::<T, _>(&mut self.data_rng)?;
            b.reverse();
            self.pending = b;
        }
        self.pending
            .pop()
            .ok_or_else(|| Error::Dataset("training manifest yields no full batch".into()))
    }

    /// One optimizer step. Returns the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.next_batch()?;
        let feats = batch_features(&self.model, &self.extractor, &batch)?;
        let draws = channel_draws::<T>(
            &self.tcfg.cfg,
            batch.images.batch_size(),
            self.tcfg.train_snr_db,
            self.tcfg.seed,
            self.state.step as u64,
        );
        let (loss, grads) = self.model.loss_and_grad(&self.state.params, &batch.images, &feats, &draws)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.state.step,
                loss,
            });
        }
        self.state.optimizer.step(&mut self.state.params, &grads);
        self.state.history.push(LossRecord {
            step: self.state.step,
            loss,
            snr_db: self.tcfg.train_snr_db,
        });
        self.state.step += 1;
        Ok(loss)
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains for `tcfg.steps` steps. With `out_dir`, writes `checkpoint.mlsc`
/// and `loss.csv`; on divergence writes `diverged.mlsc` and the partial
/// history before returning the error.
pub fn train<T: Scalar>(manifest: &DatasetManifest, tcfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainState<T>> {
    let mut trainer = Trainer::<T>::new(manifest, tcfg)?;
    let frozen = trainer.extractor.digest();
    let result = trainer.run(tcfg.steps);
    debug_assert_eq!(trainer.extractor.digest(), frozen);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("loss.csv");
        fs::write(&csv, loss_csv(&trainer.state.history)).map_err(|e| Error::io(&csv, e))?;
        let name = if result.is_ok() { "checkpoint.mlsc" } else { "diverged.mlsc" };
        save_checkpoint(&trainer.state.checkpoint(tcfg), dir.join(name))?;
    }
    result.map(|_| trainer.state)
}
