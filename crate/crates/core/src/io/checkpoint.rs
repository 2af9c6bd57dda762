//! Binary checkpoints: `TURBO1\n`, an 8-byte little-endian header length,
//! a JSON header, then little-endian `f32` blobs in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TurboError};
use crate::model::TurboNet;
use crate::tensor::Tensor;
use crate::train::{OptimState, TrainParams, Trainer};

pub const MAGIC: &[u8; 7] = b"TURBO1\n";
pub const VERSION: u32 = 1;

const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: crate::model::TurboConfig,
    pub train: TrainParams,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer step counter, present when moments are stored.
    pub optim_step: Option<u64>,
    /// Seconds since the Unix epoch; excluded from comparisons.
    pub timestamp: u64,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    /// Snapshot of a trainer; optimizer moments only when `with_optim`.
    pub fn from_trainer(t: &Trainer, with_optim: bool, timestamp: u64) -> Result<Self> {
        let mut named: Vec<(String, Tensor<f32>)> =
            t.net.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        if with_optim {
            let shapes: Vec<(String, Vec<usize>)> =
                t.net.params.iter().map(|(n, v)| (n.to_string(), v.shape().to_vec())).collect();
            for (prefix, moments) in [(OPTIM_M, &t.opt.m), (OPTIM_V, &t.opt.v)] {
                for ((name, shape), data) in shapes.iter().zip(moments) {
                    named.push((format!("{prefix}{name}"), Tensor::new(shape.clone(), data.clone())?));
                }
            }
        }
        let mut offset = 0u64;
        let manifest = named
            .iter()
            .map(|(name, v)| {
                let e = ManifestEntry { name: name.clone(), shape: v.shape().to_vec(), dtype: "f32".into(), offset };
                offset += 4 * v.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            version: VERSION,
            config: t.net.config.clone(),
            train: t.params.clone(),
            step: t.step,
            epoch: t.epoch,
            optim_step: with_optim.then_some(t.opt.step),
            timestamp,
            manifest,
        };
        Ok(Self { header, tensors: named.into_iter().map(|(_, v)| v).collect() })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let blob_len: usize = self.tensors.iter().map(|t| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| TurboError::Checkpoint(m);
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let header_len = u64::from_le_bytes(len);
        let start = (MAGIC.len() + 8) as u64;
        if header_len > bytes.len() as u64 - start {
            return Err(bad(format!("header length {header_len} exceeds file size {}", bytes.len())));
        }
        let blobs_at = (start + header_len) as usize;
        let header: Header = serde_json::from_slice(&bytes[start as usize..blobs_at])?;
        if header.version != VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let blobs = &bytes[blobs_at..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(bad(format!("{}: offset {} but previous blobs end at {expected}", e.name, e.offset)));
            }
            let numel = e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            let size = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| bad(format!("{}: shape overflows", e.name)))?;
            let end = expected.checked_add(size).filter(|&end| end <= blobs.len() as u64);
            let end = end.ok_or_else(|| bad(format!("{}: blob runs past end of file", e.name)))?;
            let data = blobs[expected as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), data)?);
            expected = end;
        }
        if expected != blobs.len() as u64 {
            return Err(bad(format!("{} trailing bytes after the last blob", blobs.len() as u64 - expected)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TurboError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the encoding with the timestamp zeroed, as hex.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.header.timestamp = 0;
        Ok(hex::encode(Sha256::digest(c.to_bytes()?)))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.header.manifest.iter().position(|e| e.name == name).map(|i| &self.tensors[i])
    }

    /// Model with the stored weights.
    pub fn to_net(&self) -> Result<TurboNet<f32>> {
        let mut net = TurboNet::new(self.header.config.clone(), 0)?;
        let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let t = self.tensor(name).ok_or_else(|| TurboError::Checkpoint(format!("missing tensor {name}")))?;
            net.params.set(name, t.clone())?;
        }
        let extra = self
            .header
            .manifest
            .iter()
            .find(|e| !e.name.starts_with(OPTIM_M) && !e.name.starts_with(OPTIM_V) && !names.contains(&e.name));
        if let Some(e) = extra {
            return Err(TurboError::Checkpoint(format!("tensor {} does not belong to the configured model", e.name)));
        }
        Ok(net)
    }

    /// Trainer positioned after the stored step. Without stored moments the
    /// optimizer restarts from zero moments.
    pub fn to_trainer(&self) -> Result<Trainer> {
        self.restore(self.header.train.clone())
    }

    /// Like [`Checkpoint::to_trainer`], with different training settings.
    pub fn restore(&self, params: TrainParams) -> Result<Trainer> {
        let net = self.to_net()?;
        let mut t = Trainer::from_net(net, params)?;
        t.step = self.header.step;
        t.epoch = self.header.epoch;
        if let Some(step) = self.header.optim_step {
            let mut opt = OptimState { step, m: Vec::new(), v: Vec::new() };
            for (name, _) in t.net.params.iter() {
                let get = |p: &str| {
                    self.tensor(&format!("{p}{name}"))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| TurboError::Checkpoint(format!("missing optimizer state for {name}")))
                };
                opt.m.push(get(OPTIM_M)?);
                opt.v.push(get(OPTIM_V)?);
            }
            t.opt = opt;
        }
        Ok(t)
    }
}

pub fn unix_time() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
