//! Checkpoint persistence: named parameter tensors, the config snapshot,
//! iteration counter and optimizer state, in one checksummed binary file.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0   8    magic b"COFCKPT1"
//! 8   32   sha-256 of the payload
//! 40  ...  payload:
//!          u32 config_len, config key-value text
//!          u64 iteration
//!          u16 pretrained-prefix count, then u16-length-prefixed strings
//!          u8 optimizer kind (0 none, 1 sgd, 2 adam), u64 optimizer step
//!          tensor section (params), tensor section (optimizer tensors)
//! tensor section: u32 count, entries of
//!          u16 name_len, name, u8 ndim, ndim x u64 dims, numel x f64
//! ```
//!
//! Writes are atomic (temp file + rename). A checkpoint restores bit-exactly:
//! save -> load -> save produces identical bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::separation::CofModel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"COFCKPT1";

/// Optimizer slots carried across restarts.
#[derive(Debug, Clone, PartialEq)]
pub enum OptState {
    None,
    /// Momentum buffers per parameter.
    Sgd(BTreeMap<String, Tensor>),
    /// First/second moment estimates and the shared step counter.
    Adam {
        step: u64,
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub iteration: u64,
    /// Namespace prefixes whose weights were loaded from external files and
    /// therefore train at the pretrained learning rate.
    pub pretrained: Vec<String>,
    pub opt: OptState,
    pub params: ParamStore,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor_map(buf: &mut Vec<u8>, map: &BTreeMap<String, Tensor>) {
    buf.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, t) in map {
        put_str(buf, name);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, "non-utf8 string"))
    }

    fn tensor_map(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name = self.string()?;
            let ndim = self.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = self.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            map.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(map)
    }
}

fn payload(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    let config = ckpt.config.to_kv_string();
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    buf.extend_from_slice(&ckpt.iteration.to_le_bytes());
    buf.extend_from_slice(&(ckpt.pretrained.len() as u16).to_le_bytes());
    for p in &ckpt.pretrained {
        put_str(&mut buf, p);
    }
    let (kind, step) = match &ckpt.opt {
        OptState::None => (0u8, 0u64),
        OptState::Sgd(_) => (1, 0),
        OptState::Adam { step, .. } => (2, *step),
    };
    buf.push(kind);
    buf.extend_from_slice(&step.to_le_bytes());
    let params: BTreeMap<String, Tensor> = ckpt
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    put_tensor_map(&mut buf, &params);
    let state: BTreeMap<String, Tensor> = match &ckpt.opt {
        OptState::None => BTreeMap::new(),
        OptState::Sgd(vel) => vel
            .iter()
            .map(|(k, v)| (format!("vel.{k}"), v.clone()))
            .collect(),
        OptState::Adam { m, v, .. } => m
            .iter()
            .map(|(k, t)| (format!("m.{k}"), t.clone()))
            .chain(v.iter().map(|(k, t)| (format!("v.{k}"), t.clone())))
            .collect(),
    };
    put_tensor_map(&mut buf, &state);
    buf
}

/// Atomic checksummed write.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let body = payload(ckpt);
    let digest = Sha256::digest(&body);
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(MAGIC).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&digest).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&body).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read and checksum-verify a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 40 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "missing COFCKPT1 magic"));
    }
    let stored = &bytes[8..40];
    let body = &bytes[40..];
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            reason: "sha-256 mismatch (corrupt checkpoint)".into(),
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
        path,
    };
    let config_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::format(path, "non-utf8 config"))?;
    let config = Config::parse_kv(&config_text, Config::default())?;
    let iteration = r.u64()?;
    let n_pre = r.u16()? as usize;
    let mut pretrained = Vec::with_capacity(n_pre);
    for _ in 0..n_pre {
        pretrained.push(r.string()?);
    }
    let kind = r.u8()?;
    let step = r.u64()?;
    let params_map = r.tensor_map()?;
    let state = r.tensor_map()?;
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let mut params = ParamStore::new();
    for (k, v) in params_map {
        params.insert(k, v);
    }
    let opt = match kind {
        0 => OptState::None,
        1 => OptState::Sgd(
            state
                .into_iter()
                .map(|(k, v)| (k.trim_start_matches("vel.").to_string(), v))
                .collect(),
        ),
        2 => {
            let mut m = BTreeMap::new();
            let mut vv = BTreeMap::new();
            for (k, t) in state {
                if let Some(rest) = k.strip_prefix("m.") {
                    m.insert(rest.to_string(), t);
                } else if let Some(rest) = k.strip_prefix("v.") {
                    vv.insert(rest.to_string(), t);
                } else {
                    return Err(Error::format(path, format!("unknown state tensor {k}")));
                }
            }
            OptState::Adam { step, m, v: vv }
        }
        other => {
            return Err(Error::format(
                path,
                format!("unknown optimizer kind {other}"),
            ))
        }
    };
    Ok(Checkpoint {
        config,
        iteration,
        pretrained,
        opt,
        params,
    })
}

/// Rebuild the model a checkpoint was trained with, validating that the
/// stored tensors exactly cover the architecture derived from its config.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<CofModel> {
    let mut rng = ChaCha20Rng::seed_from_u64(ckpt.config.seed);
    let mut model = CofModel::new(ckpt.config.clone(), &mut rng)?;
    // Every architecture tensor must be present with the right shape.
    for (name, slot) in model.store.iter_mut() {
        match ckpt.params.get(name) {
            Some(stored) => {
                if stored.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch {
                        what: format!("checkpoint tensor {name}"),
                        expected: slot.shape().to_vec(),
                        got: stored.shape().to_vec(),
                    });
                }
                *slot = stored.clone();
            }
            None => {
                return Err(Error::Format {
                    path: PathBuf::new(),
                    reason: format!("checkpoint is missing tensor {name}"),
                })
            }
        }
    }
    for name in ckpt.params.names() {
        if model.store.get(name).is_none() {
            return Err(Error::Format {
                path: PathBuf::new(),
                reason: format!("checkpoint has extraneous tensor {name}"),
            });
        }
    }
    Ok(model)
}
