//! Flat TOML experiment configuration.
//!
//! Every key is optional and falls back to the library defaults. The file
//! must declare `version = 1`. Command-line flags `--key=value` override file
//! values and go through the same validation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mlsc_core::config::{e_for_ratio, parse_ratio, ModelConfig, Variant};
use mlsc_core::extractors::{ExtractorKind, ExtractorSpec};
use mlsc_core::training::TrainConfig;
use mlsc_core::{Error, Result};
use serde::Deserialize;
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "MLSC_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// An SNR or learning rate written as an integer, a float, or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Real(pub f64);

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            I(i64),
            F(f64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::I(i) => Ok(Real(i as f64)),
            Repr::F(f) => Ok(Real(f)),
            Repr::S(s) => match s.trim() {
                "inf" | "+inf" => Ok(Real(f64::INFINITY)),
                other => other
                    .parse()
                    .map(Real)
                    .map_err(|_| serde::de::Error::custom(format!("{other:?} is not a number"))),
            },
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub version: Option<u32>,

    pub t: Option<usize>,
    pub l: Option<usize>,
    pub e: Option<usize>,
    pub ratio: Option<String>,
    pub o: Option<usize>,
    pub base_kernel: Option<usize>,
    pub model_seed: Option<u64>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub enc_hidden: Option<usize>,
    pub dec_hidden: Option<usize>,
    pub fusion_hidden: Option<usize>,
    pub variant: Option<String>,

    pub lr: Option<Real>,
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub train_snr_db: Option<Real>,
    pub seed: Option<u64>,

    pub extractor: Option<String>,
    pub extractor_seed: Option<u64>,
    pub extractor_levels: Option<u32>,

    pub test_snrs: Option<Vec<Real>>,
    pub eval_seed: Option<u64>,

    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,

    pub checkpoint: Option<PathBuf>,
    pub checkpoints: Option<Vec<PathBuf>>,
    pub ratios: Option<Vec<String>>,
    pub train_snrs: Option<Vec<Real>>,

    pub output_dir: Option<PathBuf>,
}

const LIST_KEYS: &[&str] = &["test_snrs", "checkpoints", "ratios", "train_snrs"];
const PATH_KEYS: &[&str] = &["train_manifest", "eval_manifest", "checkpoint", "checkpoints", "output_dir"];
const MODEL_KEYS: &[&str] = &[
    "t", "l", "e", "ratio", "o", "base_kernel", "model_seed", "height", "width", "enc_hidden", "dec_hidden", "fusion_hidden", "variant",
];

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl FileConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: FileConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        match cfg.version {
            Some(CONFIG_VERSION) => Ok(cfg),
            Some(v) => Err(Error::Config(format!("{origin}: unsupported config version {v}; expected {CONFIG_VERSION}"))),
            None => Err(Error::Config(format!("{origin}: missing `version = {CONFIG_VERSION}`"))),
        }
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.train_manifest, &mut cfg.eval_manifest, &mut cfg.checkpoint, &mut cfg.output_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        if let Some(ps) = &mut cfg.checkpoints {
            ps.iter_mut().for_each(fix);
        }
        Ok(cfg)
    }

    /// Parses `--key=value` flags into a partial config.
    pub fn from_overrides(flags: &[(String, String)]) -> Result<Self> {
        let mut table = toml::Table::new();
        for (k, v) in flags {
            let value = parse_flag_value(k, v);
            if table.insert(k.clone(), value).is_some() {
                return Err(Error::Config(format!("flag --{k} given twice")));
            }
        }
        let cfg: FileConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("command-line flags: {}", e.message())))?;
        if cfg.version.is_some_and(|v| v != CONFIG_VERSION) {
            return Err(Error::Config(format!("unsupported config version; expected {CONFIG_VERSION}")));
        }
        Ok(cfg)
    }

    pub fn overlay(&mut self, o: &FileConfig) {
        overlay!(
            self, o, version, t, l, e, ratio, o, base_kernel, model_seed, height, width, enc_hidden, dec_hidden, fusion_hidden, variant, lr,
            batch_size, steps, train_snr_db, seed, extractor, extractor_seed, extractor_levels, test_snrs, eval_seed, train_manifest,
            eval_manifest, checkpoint, checkpoints, ratios, train_snrs, output_dir
        );
    }

    /// Model keys that were set explicitly.
    pub fn model_keys_set(&self) -> Vec<&'static str> {
        let set = [
            self.t.is_some(),
            self.l.is_some(),
            self.e.is_some(),
            self.ratio.is_some(),
            self.o.is_some(),
            self.base_kernel.is_some(),
            self.model_seed.is_some(),
            self.height.is_some(),
            self.width.is_some(),
            self.enc_hidden.is_some(),
            self.dec_hidden.is_some(),
            self.fusion_hidden.is_some(),
            self.variant.is_some(),
        ];
        MODEL_KEYS.iter().zip(set).filter(|(_, s)| *s).map(|(k, _)| *k).collect()
    }
}

fn toml_value(s: &str) -> Option<toml::Value> {
    format!("v = {s}").parse::<toml::Table>().ok().and_then(|mut t| t.remove("v"))
}

fn parse_flag_value(key: &str, raw: &str) -> toml::Value {
    let scalar = |s: &str| -> toml::Value {
        if PATH_KEYS.contains(&key) {
            return toml::Value::String(s.to_string());
        }
        toml_value(s).unwrap_or_else(|| toml::Value::String(s.to_string()))
    };
    if LIST_KEYS.contains(&key) {
        if let Some(v @ toml::Value::Array(_)) = toml_value(raw) {
            return v;
        }
        return toml::Value::Array(raw.split(',').filter(|s| !s.trim().is_empty()).map(|s| scalar(s.trim())).collect());
    }
    scalar(raw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSettings {
    pub test_snrs: Vec<f64>,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
}

/// Fully resolved, validated configuration for one command.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub channel: ChannelSettings,
    pub data: DataPaths,
    pub checkpoint: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub ratios: Vec<(usize, usize)>,
    pub train_snrs: Vec<f64>,
    pub output_dir: PathBuf,
    /// Model keys given explicitly, checked against loaded checkpoints.
    pub explicit_model_keys: Vec<&'static str>,
}

impl ExperimentConfig {
    pub fn resolve(f: &FileConfig, env_output_root: Option<PathBuf>) -> Result<Self> {
        let d = ModelConfig::default();
        let mut model = ModelConfig {
            t: f.t.unwrap_or(d.t),
            l: f.l.unwrap_or(d.l),
            e: f.e.unwrap_or(d.e),
            o: f.o.unwrap_or(d.o),
            base_kernel: f.base_kernel.unwrap_or(d.base_kernel),
            seed: f.model_seed.unwrap_or(d.seed),
            height: f.height.unwrap_or(d.height),
            width: f.width.unwrap_or(d.width),
            enc_hidden: f.enc_hidden.unwrap_or(d.enc_hidden),
            dec_hidden: f.dec_hidden.unwrap_or(d.dec_hidden),
            fusion_hidden: f.fusion_hidden.unwrap_or(d.fusion_hidden),
            variant: f.variant.as_deref().map(Variant::parse).transpose()?.unwrap_or(d.variant),
        };
        if let Some(r) = &f.ratio {
            let (num, den) = parse_ratio(r)?;
            let e = e_for_ratio(num, den, model.t)?;
            if f.e.is_some_and(|x| x != e) {
                return Err(Error::Config(format!("ratio {r} implies e={e}, but e={} is also set", model.e)));
            }
            model.e = e;
        }
        model.validate()?;

        let de = ExtractorSpec::default();
        let extractor = ExtractorSpec {
            kind: f.extractor.as_deref().map(ExtractorKind::parse).transpose()?.unwrap_or(de.kind),
            seed: f.extractor_seed.unwrap_or(de.seed),
            levels: f.extractor_levels.unwrap_or(de.levels),
        };
        let dt = TrainConfig::default();
        let train = TrainConfig {
            lr: f.lr.map(|r| r.0).unwrap_or(dt.lr),
            batch_size: f.batch_size.unwrap_or(dt.batch_size),
            steps: f.steps.unwrap_or(dt.steps),
            train_snr_db: f.train_snr_db.map(|r| r.0).unwrap_or(dt.train_snr_db),
            cfg: model.clone(),
            seed: f.seed.unwrap_or(dt.seed),
            extractor,
        };
        train.validate()?;

        let reals = |v: &Option<Vec<Real>>, default: &[f64]| -> Vec<f64> {
            v.as_ref().map(|v| v.iter().map(|r| r.0).collect()).unwrap_or_else(|| default.to_vec())
        };
        let test_snrs = reals(&f.test_snrs, &[0.0, 5.0, 10.0, 15.0, 20.0]);
        let train_snrs = reals(&f.train_snrs, &[]);
        if test_snrs.iter().chain(&train_snrs).any(|s| s.is_nan()) {
            return Err(Error::Config("SNR lists must not contain NaN".into()));
        }
        let ratios = f
            .ratios
            .as_ref()
            .map(|rs| rs.iter().map(|r| parse_ratio(r)).collect::<Result<Vec<_>>>())
            .transpose()?
            .unwrap_or_default();
        for &(num, den) in &ratios {
            e_for_ratio(num, den, model.t)?;
        }
        let output_dir = f
            .output_dir
            .clone()
            .or(env_output_root)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        Ok(ExperimentConfig {
            model,
            train,
            channel: ChannelSettings {
                test_snrs,
                eval_seed: f.eval_seed.unwrap_or(1234),
            },
            data: DataPaths {
                train_manifest: f.train_manifest.clone(),
                eval_manifest: f.eval_manifest.clone(),
            },
            checkpoint: f.checkpoint.clone(),
            checkpoints: f.checkpoints.clone().unwrap_or_default(),
            ratios,
            train_snrs,
            output_dir,
            explicit_model_keys: f.model_keys_set(),
        })
    }

    /// Loads `path` (if any), applies the flags and resolves.
    pub fn from_sources(path: Option<&Path>, flags: &[(String, String)], env_output_root: Option<PathBuf>) -> Result<Self> {
        let mut f = match path {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        f.overlay(&FileConfig::from_overrides(flags)?);
        Self::resolve(&f, env_output_root)
    }

    /// Canonical resolved config, written into every run directory.
    pub fn snapshot(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let list = |v: &[f64]| v.iter().map(|x| toml_real(*x)).collect::<Vec<_>>().join(", ");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| format!("{:?}", p.display().to_string()));
        let mut s = String::new();
        let _ = writeln!(s, "version = {CONFIG_VERSION}");
        for (k, v) in [
            ("t", m.t),
            ("l", m.l),
            ("e", m.e),
            ("o", m.o),
            ("base_kernel", m.base_kernel),
            ("height", m.height),
            ("width", m.width),
            ("enc_hidden", m.enc_hidden),
            ("dec_hidden", m.dec_hidden),
            ("fusion_hidden", m.fusion_hidden),
            ("batch_size", t.batch_size),
            ("steps", t.steps),
            ("extractor_levels", t.extractor.levels as usize),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "model_seed = {}", m.seed);
        let _ = writeln!(s, "variant = {:?}", m.variant.as_str());
        let _ = writeln!(s, "lr = {}", toml_real(t.lr));
        let _ = writeln!(s, "train_snr_db = {}", toml_real(t.train_snr_db));
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "extractor = {:?}", t.extractor.kind.as_str());
        let _ = writeln!(s, "extractor_seed = {}", t.extractor.seed);
        let _ = writeln!(s, "test_snrs = [{}]", list(&self.channel.test_snrs));
        let _ = writeln!(s, "eval_seed = {}", self.channel.eval_seed);
        if !self.train_snrs.is_empty() {
            let _ = writeln!(s, "train_snrs = [{}]", list(&self.train_snrs));
        }
        if !self.ratios.is_empty() {
            let rs: Vec<String> = self.ratios.iter().map(|(a, b)| format!("\"{a}/{b}\"")).collect();
            let _ = writeln!(s, "ratios = [{}]", rs.join(", "));
        }
        for (k, v) in [
            ("train_manifest", path(&self.data.train_manifest)),
            ("eval_manifest", path(&self.data.eval_manifest)),
            ("checkpoint", path(&self.checkpoint)),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        if !self.checkpoints.is_empty() {
            let ps: Vec<String> = self.checkpoints.iter().map(|p| format!("{:?}", p.display().to_string())).collect();
            let _ = writeln!(s, "checkpoints = [{}]", ps.join(", "));
        }
        s
    }

    /// Short content hash naming the run directory.
    pub fn run_id(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(self.snapshot().as_bytes());
        let digest = h.finalize();
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("{command}-{hex}")
    }
}

fn toml_real(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_reports_its_line() {
        let err = FileConfig::parse("version = 1\nsteps = 3\nstpes = 4\n", "x.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("stpes"), "{msg}");
    }

    #[test]
    fn version_is_required() {
        assert!(FileConfig::parse("steps = 3\n", "x.toml").is_err());
        assert!(FileConfig::parse("version = 2\n", "x.toml").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let mut f = FileConfig::parse("version = 1\nsteps = 3\ntrain_snr_db = 5\n", "x").unwrap();
        let fl = |k: &str, v: &str| (k.to_string(), v.to_string());
        f.overlay(&FileConfig::from_overrides(&[fl("steps", "7"), fl("test_snrs", "10,0,inf"), fl("ratios", "1/48,1/16")]).unwrap());
        let c = ExperimentConfig::resolve(&f, None).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.train_snr_db, 5.0);
        assert_eq!(c.channel.test_snrs, vec![10.0, 0.0, f64::INFINITY]);
        assert_eq!(c.ratios, vec![(1, 48), (1, 16)]);
    }

    #[test]
    fn defaults_follow_library() {
        let c = ExperimentConfig::resolve(&FileConfig::default(), None).unwrap();
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.model.t, 8);
        assert_eq!(c.output_dir, PathBuf::from(DEFAULT_OUTPUT_ROOT));
    }

    #[test]
    fn ratio_sets_e() {
        let f = FileConfig { ratio: Some("1/16".into()), l: Some(6), ..Default::default() };
        assert_eq!(ExperimentConfig::resolve(&f, None).unwrap().model.e, 12);
        let f = FileConfig { ratio: Some("1/16".into()), ..Default::default() };
        assert!(ExperimentConfig::resolve(&f, None).is_err(), "e=12 exceeds 3l-4 at l=5");
        let f = FileConfig { ratio: Some("1/16".into()), l: Some(6), e: Some(4), ..Default::default() };
        assert!(ExperimentConfig::resolve(&f, None).is_err());
    }

    #[test]
    fn run_id_is_stable() {
        let c = ExperimentConfig::resolve(&FileConfig::default(), None).unwrap();
        assert_eq!(c.run_id("train"), c.run_id("train"));
        assert_ne!(c.run_id("train"), c.run_id("eval"));
        let text = c.snapshot();
        let back = ExperimentConfig::resolve(&FileConfig::parse(&text, "snap").unwrap(), None).unwrap();
        assert_eq!(back.snapshot(), text);
    }
}
