//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "RGMM"  u32 version  u64 file_length
//! u64 config_len  config (UTF-8 `key = value` lines)
//! u32 array_count  { u32 name_len  name  u32 rank  u64 dims[rank] }*
//! u8 has_optimizer  [u64 step  f64 lr  f64 beta1  f64 beta2  f64 eps  f64 weight_decay]
//! f64 payload: every array, then (with optimizer) first moments, then second moments
//! [u8; 32] SHA-256 of all preceding bytes
//! ```

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::DataError;
use crate::model::tree::Tree;
use crate::model::{self, EncoderParams, ModelConfig, Params};
use crate::numerics::Tensor;
use crate::training::{AdamWConfig, AdamWState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RGMM";
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 16;

/// Everything stored in a checkpoint file. Arrays keep the parameter tree's
/// visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub arrays: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamWState>,
}

impl Checkpoint {
    pub fn new(params: &Params, config: &str, optimizer: Option<&AdamWState>) -> Self {
        Self {
            config: config.to_string(),
            arrays: params.named_leaves().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Rebuilds the parameter tree for `cfg`. The decoder and head are
    /// present exactly when the file holds arrays for them. Every array
    /// must match its configured shape, and no array may be left over.
    pub fn params(&self, cfg: &ModelConfig) -> Result<Params, DataError> {
        let shapes = model::model_shapes(cfg, self.has_prefix("decoder."), self.has_prefix("head."));
        let mut by_name: HashMap<&str, &Tensor> = self.arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut error = None;
        let params = shapes.map("", &mut |name, shape: &Vec<usize>| match by_name.remove(name) {
            Some(t) if t.shape() == shape.as_slice() => t.clone(),
            found => {
                error.get_or_insert_with(|| match found {
                    Some(t) => DataError::Shape {
                        name: name.to_string(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    },
                    None => DataError::MissingArray(name.to_string()),
                });
                Tensor::zeros(shape)
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if let Some((name, _)) = self.arrays.iter().find(|(n, _)| by_name.contains_key(n.as_str())) {
            return Err(DataError::UnexpectedArray(name.clone()));
        }
        Ok(params)
    }

    /// The encoder alone, ignoring any decoder or head arrays.
    pub fn encoder(&self, cfg: &ModelConfig) -> Result<EncoderParams, DataError> {
        let only = Self {
            config: String::new(),
            arrays: self.arrays.iter().filter(|(n, _)| n.starts_with("encoder.")).cloned().collect(),
            optimizer: None,
        };
        Ok(only.params(cfg)?.encoder)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        let put = |out: &mut Vec<u8>, tensors: &mut dyn Iterator<Item = &Tensor>| {
            for t in tensors {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                for v in [s.lr, s.config.beta1, s.config.beta2, s.config.eps, s.config.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        put(&mut out, &mut self.arrays.iter().map(|(_, t)| t));
        if let Some(s) = &self.optimizer {
            put(&mut out, &mut s.first.iter());
            put(&mut out, &mut s.second.iter());
        }
        let total = (out.len() + DIGEST_LEN) as u64;
        out[8..16].copy_from_slice(&total.to_le_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, DataError> {
        let truncated = |what| DataError::Truncated {
            path: path.to_path_buf(),
            what,
        };
        let malformed = |message: String| DataError::Malformed {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(DataError::Magic { path: path.to_path_buf() });
        }
        if bytes.len() < PREAMBLE_LEN {
            return Err(truncated("header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(DataError::Version {
                path: path.to_path_buf(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let declared = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if (bytes.len() as u64) < declared {
            return Err(truncated("file body"));
        }
        if bytes.len() as u64 != declared {
            return Err(malformed(format!("{} trailing bytes", bytes.len() as u64 - declared)));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(DataError::Checksum { path: path.to_path_buf() });
        }

        let mut r = Reader { bytes: body, pos: PREAMBLE_LEN };
        let config_len = r.u64().ok_or_else(|| truncated("config length"))? as usize;
        let config = r.take(config_len).ok_or_else(|| truncated("config"))?;
        let config = String::from_utf8(config.to_vec()).map_err(|_| malformed("config is not UTF-8".into()))?;
        let count = r.u32().ok_or_else(|| truncated("array table"))? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32().ok_or_else(|| truncated("array name"))? as usize;
            let name = r.take(len).ok_or_else(|| truncated("array name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| malformed("array name is not UTF-8".into()))?;
            let rank = r.u32().ok_or_else(|| truncated("array rank"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| truncated("array shape"))?;
            table.push((name, shape));
        }
        let optimizer_header = match r.take(1).ok_or_else(|| truncated("optimizer flag"))?[0] {
            0 => None,
            1 => {
                let step = r.u64().ok_or_else(|| truncated("optimizer step"))?;
                let mut v = [0.0; 5];
                for slot in &mut v {
                    *slot = r.f64().ok_or_else(|| truncated("optimizer settings"))?;
                }
                Some((step, v))
            }
            flag => return Err(malformed(format!("bad optimizer flag {flag}"))),
        };
        let mut read_tensors = |what| {
            table
                .iter()
                .map(|(name, shape)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| r.f64()).collect::<Option<Vec<_>>>().ok_or_else(|| truncated(what))?;
                    Tensor::new(shape.clone(), data).map_err(|e| malformed(format!("array {name}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()
        };
        let values = read_tensors("parameter payload")?;
        let optimizer = match optimizer_header {
            None => None,
            Some((step, [lr, beta1, beta2, eps, weight_decay])) => Some(AdamWState {
                config: AdamWConfig {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                },
                lr,
                step,
                first: read_tensors("first moments")?,
                second: read_tensors("second moments")?,
            }),
        };
        if r.pos != body.len() {
            return Err(malformed(format!("{} unread payload bytes", body.len() - r.pos)));
        }
        let arrays = table.into_iter().map(|(n, _)| n).zip(values).collect();
        Ok(Self {
            config,
            arrays,
            optimizer,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Writes through a temporary sibling file and an atomic rename.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), DataError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, checkpoint.to_bytes()).map_err(|e| DataError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
