//! Command implementations. Each command writes into its own run directory
//! `<output root>/<command>-<config hash>/`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mlsc_core::baseline::failure_threshold;
use mlsc_core::checkpoint::load_checkpoint;
use mlsc_core::config::{e_for_ratio, ratio_fraction, ModelConfig, Variant};
use mlsc_core::data::{DatasetManifest, Split};
use mlsc_core::experiments::{
    ablation, ablation_csv, results_csv, snr_mismatch_matrix, sorted_snrs, sweep, BaselineSystem, EvalSet, LearnedSystem, ResultRow,
};
use mlsc_core::metrics::format_db;
use mlsc_core::training::{loss_csv, train};
use mlsc_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::plot::{line_chart, Series};

pub const COMMANDS: &[&str] = &["train", "eval", "sweep", "matrix", "ablate", "baseline"];

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let path = cfg.output_dir.join(cfg.run_id(command));
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let dir = RunDir { path };
        dir.write("config.toml", &cfg.snapshot())?;
        Ok(dir)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// The only file allowed to differ between identical reruns.
    fn manifest(&self, command: &str, cfg: &ExperimentConfig, started: u64) -> Result<()> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let text = format!(
            "command = {command:?}\nrun_id = {:?}\ntool_version = {:?}\nstarted_unix = {started}\nfinished_unix = {now}\n",
            cfg.run_id(command),
            env!("CARGO_PKG_VERSION")
        );
        self.write("run-manifest.toml", &text).map(|_| ())
    }
}

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))
}

fn manifest(cfg: &ExperimentConfig, key: &str, split: Split) -> Result<DatasetManifest> {
    let p = match key {
        "train_manifest" => require(&cfg.data.train_manifest, key)?,
        _ => require(&cfg.data.eval_manifest, key)?,
    };
    DatasetManifest::load(p, split)
}

/// Rejects a checkpoint whose model differs from explicitly configured keys.
pub fn check_explicit_keys(cfg: &ExperimentConfig, ck: &ModelConfig) -> Result<()> {
    let m = &cfg.model;
    let mut diffs = Vec::new();
    for &k in &cfg.explicit_model_keys {
        let (want, got) = match k {
            "t" => (m.t.to_string(), ck.t.to_string()),
            "l" => (m.l.to_string(), ck.l.to_string()),
            "e" | "ratio" => (m.e.to_string(), ck.e.to_string()),
            "o" => (m.o.to_string(), ck.o.to_string()),
            "base_kernel" => (m.base_kernel.to_string(), ck.base_kernel.to_string()),
            "model_seed" => (m.seed.to_string(), ck.seed.to_string()),
            "height" => (m.height.to_string(), ck.height.to_string()),
            "width" => (m.width.to_string(), ck.width.to_string()),
            "enc_hidden" => (m.enc_hidden.to_string(), ck.enc_hidden.to_string()),
            "dec_hidden" => (m.dec_hidden.to_string(), ck.dec_hidden.to_string()),
            "fusion_hidden" => (m.fusion_hidden.to_string(), ck.fusion_hidden.to_string()),
            "variant" => (m.variant.as_str().to_string(), ck.variant.as_str().to_string()),
            _ => continue,
        };
        if want != got {
            diffs.push(format!("{k}: config {want}, checkpoint {got}"));
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(diffs.join("; ")))
    }
}

fn snr_series(rows: &[ResultRow], label: impl Fn(&ResultRow) -> String, metric: impl Fn(&ResultRow) -> f64) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        let l = label(r);
        match out.iter_mut().find(|s| s.label == l) {
            Some(s) => s.points.push((r.test_snr_db, metric(r))),
            None => out.push(Series {
                label: l,
                points: vec![(r.test_snr_db, metric(r))],
            }),
        }
    }
    out
}

fn system_label(r: &ResultRow) -> String {
    format!("{} {}/{}", r.system, r.ratio.0, r.ratio.1)
}

fn write_metric_plots(dir: &RunDir, rows: &[ResultRow], title: &str, label: impl Fn(&ResultRow) -> String + Copy) -> Result<()> {
    dir.write(
        "psnr.svg",
        &line_chart(&format!("{title}: PSNR"), "channel SNR (dB)", "PSNR (dB)", &snr_series(rows, label, |r| r.psnr_db)),
    )?;
    dir.write(
        "ssim.svg",
        &line_chart(&format!("{title}: SSIM"), "channel SNR (dB)", "SSIM", &snr_series(rows, label, |r| r.ssim)),
    )?;
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let started = now();
    let m = manifest(cfg, "train_manifest", Split::Train)?;
    let dir = RunDir::create(cfg, "train")?;
    let state = train::<f32>(&m, &cfg.train, Some(&dir.path))?;
    let pts: Vec<(f64, f64)> = state.history.iter().map(|r| (r.step as f64, r.loss)).collect();
    dir.write(
        "loss.svg",
        &line_chart("training loss", "step", "MSE", &[Series { label: "loss".into(), points: pts }]),
    )?;
    debug_assert_eq!(fs::read_to_string(dir.path.join("loss.csv")).ok(), Some(loss_csv(&state.history)));
    dir.manifest("train", cfg, started)?;
    Ok(dir.path.join("checkpoint.mlsc"))
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let started = now();
    let ck = load_checkpoint(require(&cfg.checkpoint, "checkpoint")?)?;
    check_explicit_keys(cfg, &ck.model)?;
    let m = manifest(cfg, "eval_manifest", Split::Test)?;
    let snrs = sorted_snrs(&cfg.channel.test_snrs);
    let sys = LearnedSystem::<f32>::from_checkpoint(&ck)?.bind_manifest(&m)?;
    let set = EvalSet::<f32>::load(&m, ck.model.height, ck.model.width, cfg.train.batch_size)?;
    let mut rows = sys.rows(&set, &snrs, cfg.channel.eval_seed, mlsc_core::experiments::LEARNED)?;
    let ratio = ratio_fraction(ck.model.e, ck.model.t);
    rows.extend(BaselineSystem::new(set.raw_images())?.rows(ratio, ck.model.t, &snrs)?);
    let dir = RunDir::create(cfg, "eval")?;
    let out = dir.write("results.csv", &results_csv(&rows))?;
    write_metric_plots(&dir, &rows, "held-out evaluation", system_label)?;
    dir.manifest("eval", cfg, started)?;
    Ok(out)
}

fn paired<'a, K: Copy>(keys: &[K], cfg: &'a ExperimentConfig, what: &str) -> Result<Vec<(K, &'a PathBuf)>> {
    if keys.len() != cfg.checkpoints.len() {
        return Err(Error::Config(format!(
            "{} {what} but {} checkpoints; they pair up one to one",
            keys.len(),
            cfg.checkpoints.len()
        )));
    }
    Ok(keys.iter().copied().zip(&cfg.checkpoints).collect())
}

fn warn_absent(absent: &[String], dir: &RunDir) -> Result<()> {
    if absent.is_empty() {
        return Ok(());
    }
    for a in absent {
        eprintln!("warning: skipping {a}");
    }
    dir.write("absent.txt", &(absent.join("\n") + "\n")).map(|_| ())
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let started = now();
    if cfg.ratios.is_empty() {
        return Err(Error::Config("`ratios` is required for sweep".into()));
    }
    let points: Vec<((usize, usize), PathBuf)> = paired(&cfg.ratios, cfg, "ratios")?.into_iter().map(|(r, p)| (r, p.clone())).collect();
    let m = manifest(cfg, "eval_manifest", Split::Test)?;
    let res = sweep(&points, &cfg.channel.test_snrs, &m, cfg.model.t, cfg.channel.eval_seed)?;
    let dir = RunDir::create(cfg, "sweep")?;
    warn_absent(&res.absent, &dir)?;
    let out = dir.write("results.csv", &results_csv(&res.rows))?;
    write_metric_plots(&dir, &res.rows, "rate/SNR sweep", system_label)?;
    dir.manifest("sweep", cfg, started)?;
    Ok(out)
}

pub fn cmd_matrix(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let started = now();
    if cfg.train_snrs.is_empty() {
        return Err(Error::Config("`train_snrs` is required for matrix".into()));
    }
    let pts: Vec<(f64, PathBuf)> = paired(&cfg.train_snrs, cfg, "train_snrs")?.into_iter().map(|(s, p)| (s, p.clone())).collect();
    let m = manifest(cfg, "eval_manifest", Split::Test)?;
    let mat = snr_mismatch_matrix(&pts, &cfg.channel.test_snrs, &m, cfg.channel.eval_seed)?;
    let dir = RunDir::create(cfg, "matrix")?;
    warn_absent(&mat.absent, &dir)?;
    let out = dir.write("matrix.csv", &mat.csv())?;
    dir.write("results.csv", &results_csv(&mat.rows))?;
    write_metric_plots(&dir, &mat.rows, "train/test SNR mismatch", |r| {
        format!("trained at {} dB", format_db(r.train_snr_db.unwrap_or(f64::NAN)))
    })?;
    dir.manifest("matrix", cfg, started)?;
    Ok(out)
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let started = now();
    let train_m = manifest(cfg, "train_manifest", Split::Train)?;
    let eval_m = match &cfg.data.eval_manifest {
        Some(p) => DatasetManifest::load(p, Split::Test)?,
        None => train_m.clone(),
    };
    let tables = ablation(&train_m, &eval_m, &cfg.train, &Variant::ALL, &cfg.channel.test_snrs, cfg.channel.eval_seed)?;
    let dir = RunDir::create(cfg, "ablate")?;
    let out = dir.write("ablation.csv", &ablation_csv(&tables))?;
    let mut all = Vec::new();
    for t in &tables {
        dir.write(&format!("ablation-{}.csv", t.variant.as_str()), &ablation_csv(std::slice::from_ref(t)))?;
        all.extend(t.rows.iter().cloned());
    }
    write_metric_plots(&dir, &all, "branch ablation", |r| r.system.clone())?;
    dir.manifest("ablate", cfg, started)?;
    Ok(out)
}

pub fn cmd_baseline(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let started = now();
    let m = manifest(cfg, "eval_manifest", Split::Test)?;
    let t = cfg.model.t;
    let ratios = if cfg.ratios.is_empty() {
        vec![ratio_fraction(cfg.model.e, t)]
    } else {
        cfg.ratios.clone()
    };
    let snrs = sorted_snrs(&cfg.channel.test_snrs);
    let set = EvalSet::<f32>::load(&m, cfg.model.height, cfg.model.width, cfg.train.batch_size)?;
    let base = BaselineSystem::new(set.raw_images())?;
    let mut rows = Vec::new();
    let mut thresholds = String::from("image,ratio,fail_below_db,pass_at_db\n");
    for &r in &ratios {
        rows.extend(base.rows(r, t, &snrs)?);
        let e = e_for_ratio(r.0, r.1, t)?;
        for (img, table) in base.images.iter().zip(&base.tables) {
            let reals = (img.height / t) * (img.width / t) * e;
            let cell = match failure_threshold(img, table, reals, 1e-3) {
                Ok((lo, hi)) => format!("{lo:.4},{hi:.4}"),
                Err(_) => "-,-".into(),
            };
            let _ = writeln!(thresholds, "{},{}/{},{cell}", img.source_id, r.0, r.1);
        }
    }
    let dir = RunDir::create(cfg, "baseline")?;
    let out = dir.write("results.csv", &results_csv(&rows))?;
    dir.write("thresholds.csv", &thresholds)?;
    write_metric_plots(&dir, &rows, "digital baseline", system_label)?;
    dir.manifest("baseline", cfg, started)?;
    Ok(out)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn dispatch(command: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
    match command {
        "train" => cmd_train(cfg),
        "eval" => cmd_eval(cfg),
        "sweep" => cmd_sweep(cfg),
        "matrix" => cmd_matrix(cfg),
        "ablate" => cmd_ablate(cfg),
        "baseline" => cmd_baseline(cfg),
        other => Err(Error::Argument(format!("unknown command {other:?}; expected one of {}", COMMANDS.join(", ")))),
    }
}
