//! Checkpoint archive: a versioned key-value text header followed by named
//! little-endian `f32` arrays.
//!
//! ```text
//! MLSC-CHECKPOINT
//! version=1
//! t=8
//! ...
//! <empty line>
//! u32 array count
//! per array: u32 name length, name, u32 rank, u32 dims..., f32 values
//! MLSCEND!
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::extractors::{ExtractorKind, ExtractorSpec};
use crate::nn::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "MLSC-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;
const TRAILER: &[u8; 8] = b"MLSCEND!";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub extractor: ExtractorSpec,
    pub step: usize,
    pub train_snr_db: f64,
    pub params: ParameterSet<f32>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(model: &ModelConfig, extractor: &ExtractorSpec, step: usize, train_snr_db: f64, params: &ParameterSet<T>) -> Self {
        Checkpoint {
            model: model.clone(),
            extractor: *extractor,
            step,
            train_snr_db,
            params: params.cast(),
        }
    }

    fn header(&self) -> String {
        let m = &self.model;
        let fields: Vec<(&str, String)> = vec![
            ("version", CHECKPOINT_VERSION.to_string()),
            ("t", m.t.to_string()),
            ("l", m.l.to_string()),
            ("e", m.e.to_string()),
            ("o", m.o.to_string()),
            ("base_kernel", m.base_kernel.to_string()),
            ("seed", m.seed.to_string()),
            ("height", m.height.to_string()),
            ("width", m.width.to_string()),
            ("enc_hidden", m.enc_hidden.to_string()),
            ("dec_hidden", m.dec_hidden.to_string()),
            ("fusion_hidden", m.fusion_hidden.to_string()),
            ("variant", m.variant.as_str().to_string()),
            ("extractor_kind", self.extractor.kind.as_str().to_string()),
            ("extractor_seed", self.extractor.seed.to_string()),
            ("extractor_levels", self.extractor.levels.to_string()),
            ("step", self.step.to_string()),
            // bit pattern keeps the value exact, including infinity
            ("train_snr_db_bits", format!("{:016x}", self.train_snr_db.to_bits())),
        ];
        let mut s = format!("{CHECKPOINT_MAGIC}\n");
        for (k, v) in fields {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push('\n');
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(TRAILER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("header is truncated".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut kv = BTreeMap::new();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> { kv.get(k).ok_or_else(|| bad(format!("header is missing {k}"))) };
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("header field {k} is not a number"))) };
        let version = num("version")? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let model = ModelConfig {
            t: num("t")? as usize,
            l: num("l")? as usize,
            e: num("e")? as usize,
            o: num("o")? as usize,
            base_kernel: num("base_kernel")? as usize,
            seed: num("seed")?,
            height: num("height")? as usize,
            width: num("width")? as usize,
            enc_hidden: num("enc_hidden")? as usize,
            dec_hidden: num("dec_hidden")? as usize,
            fusion_hidden: num("fusion_hidden")? as usize,
            variant: Variant::parse(get("variant")?)?,
        };
        let extractor = ExtractorSpec {
            kind: ExtractorKind::parse(get("extractor_kind")?)?,
            seed: num("extractor_seed")?,
            levels: num("extractor_levels")? as u32,
        };
        let step = num("step")? as usize;
        let train_snr_db = f64::from_bits(
            u64::from_str_radix(get("train_snr_db_bits")?, 16).map_err(|_| bad("bad train_snr_db_bits".into()))?,
        );

        let mut pos = end + 2;
        let truncated = || Error::Checkpoint("parameter data is truncated".into());
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(truncated)?;
            pos += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut params = ParameterSet::new();
        for _ in 0..count {
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            if rank > 8 {
                return Err(bad(format!("parameter {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let raw = take(len.checked_mul(4).ok_or_else(truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if take(TRAILER.len())? != TRAILER {
            return Err(bad("missing end marker".into()));
        }
        Ok(Checkpoint {
            model,
            extractor,
            step,
            train_snr_db,
            params,
        })
    }

    /// Confirms the checkpoint was produced for `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has t={} l={} e={} o={} {}x{} {}; run expects t={} l={} e={} o={} {}x{} {}",
                self.model.t,
                self.model.l,
                self.model.e,
                self.model.o,
                self.model.height,
                self.model.width,
                self.model.variant.as_str(),
                expected.t,
                expected.l,
                expected.e,
                expected.o,
                expected.height,
                expected.width,
                expected.variant.as_str()
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
