//! Binary checkpoint files.
//!
//! ```text
//! "MVF1"                  magic
//! u32                     format version
//! u64                     metadata length in bytes
//! [u8]                    metadata, compact JSON
//! u32                     tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank × u64 dims
//!   f64 data, row-major
//! ```
//!
//! All integers and reals are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub config: RunConfig,
    /// Model layout with corpus-dependent widths resolved.
    pub model: ModelConfig,
    /// Completed epochs when saved; for an average, the latest source epoch.
    pub epoch: usize,
    pub step: usize,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    /// Epochs whose parameters were averaged into this file; empty otherwise.
    pub source_epochs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(64 + meta.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses checkpoint bytes; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic bytes)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| Ok(r.u64()? as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| Error::format(path, "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
            if params.get(&name).is_some() {
                return Err(Error::format(path, format!("duplicate tensor {name}")));
            }
            params.push(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Elementwise mean of the parameters of `checkpoints`.
///
/// The result keeps the metadata of the first input except that `epoch`
/// becomes the latest source epoch and `source_epochs` lists every
/// input's epoch. Validation metrics are copied unchanged and should be
/// recomputed by the caller.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Incompatible("no checkpoints to average".into()))?;
    for c in &checkpoints[1..] {
        if c.meta.config_hash != first.meta.config_hash {
            return Err(Error::Incompatible(format!(
                "config hash {} differs from {}",
                c.meta.config_hash, first.meta.config_hash
            )));
        }
        if !c.params.same_layout(&first.params) {
            return Err(Error::Incompatible(
                "parameter names or shapes differ".into(),
            ));
        }
    }
    // running mean: identical inputs average to themselves exactly
    let mut mean = first.params.clone();
    for (k, c) in checkpoints.iter().enumerate().skip(1) {
        let kf = (k + 1) as f64;
        for ((_, m), (_, x)) in mean.iter_mut().zip(c.params.iter()) {
            for (mi, xi) in m.data_mut().iter_mut().zip(x.data()) {
                *mi += (xi - *mi) / kf;
            }
        }
    }
    let mut meta = first.meta.clone();
    meta.source_epochs = checkpoints.iter().map(|c| c.meta.epoch).collect();
    meta.epoch = checkpoints.iter().map(|c| c.meta.epoch).max().unwrap_or(0);
    meta.step = checkpoints.iter().map(|c| c.meta.step).max().unwrap_or(0);
    Ok(Checkpoint { meta, params: mean })
}

/// Loads and averages checkpoint files.
pub fn average_checkpoint_files(paths: &[&Path]) -> Result<Checkpoint> {
    let cks = paths
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    average_checkpoints(&cks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(epoch: usize, seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        params.push("a.b", Tensor::randn(&[4], 1.0, &mut rng));
        let config = RunConfig::default();
        Checkpoint {
            meta: CheckpointMeta {
                config_hash: config.hash(),
                model: ModelConfig::default(),
                config,
                epoch,
                step: epoch * 10,
                valid_loss: 0.1 + 1.0 / 3.0,
                valid_accuracy: 0.5,
                source_epochs: vec![],
            },
            params,
        }
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample(3, 1);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let mut bytes = sample(1, 1).to_bytes();
        let p = Path::new("broken.ckpt");
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).unwrap_err();
        assert!(err.to_string().contains("broken.ckpt"));
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, p).unwrap_err();
        assert!(err.to_string().contains("magic"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn averaging() {
        let a = sample(1, 1);
        let mut b = sample(2, 2);
        b.params = a.params.clone();
        for (_, t) in b.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 2.0);
        }
        let mut a0 = a.clone();
        for (_, t) in a0.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let avg = average_checkpoints(&[a0, b]).unwrap();
        assert!(avg
            .params
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| v == 1.0)));
        assert_eq!(avg.meta.source_epochs, vec![1, 2]);
        assert_eq!(avg.meta.epoch, 2);

        let same = vec![a.clone(); 10];
        assert_eq!(average_checkpoints(&same).unwrap().params, a.params);
    }

    #[test]
    fn mixed_hashes_rejected() {
        let a = sample(1, 1);
        let mut b = sample(2, 2);
        b.meta.config_hash = "other".into();
        assert!(matches!(
            average_checkpoints(&[a, b]),
            Err(Error::Incompatible(_))
        ));
    }
}
