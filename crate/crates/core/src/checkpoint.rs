//! Binary checkpoints: a JSON header followed by raw little-endian f64
//! tensors. Serialization iterates name-sorted maps, so save -> load -> save
//! is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{Adam, Arr, VarStore};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DSCKPT01";
const FORMAT_VERSION: u32 = 1;

/// Optimizer state detached from the live [`Adam`] instance.
#[derive(Clone, Debug)]
pub struct AdamSnapshot {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Arr>,
    pub v: BTreeMap<String, Arr>,
}

impl AdamSnapshot {
    pub fn capture(opt: &Adam) -> Self {
        let (m, v) = opt.moments();
        AdamSnapshot {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            step: opt.step_count(),
            m: m.clone(),
            v: v.clone(),
        }
    }

    pub fn into_adam(self) -> Adam {
        Adam::restore(
            self.lr,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.step,
            self.m,
            self.v,
        )
    }
}

/// One trainable-state snapshot: weights, optimizer, progress counters and
/// the hash of the configuration that produced it.
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    pub config_hash: String,
    pub weights: VarStore,
    pub optimizer: Option<AdamSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    step: u64,
    entries: Vec<(String, Vec<usize>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    epoch: u64,
    config_hash: String,
    weights: Vec<TensorMeta>,
    optimizer: Option<OptimizerMeta>,
}

/// SHA-256 of the canonical JSON encoding of any serializable config.
pub fn hash_config<T: Serialize>(cfg: &T) -> Result<String> {
    let json = serde_json::to_string(cfg)?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

/// Refuse to resume when the checkpoint was produced under a different config.
pub fn verify_config_hash<T: Serialize>(ckpt: &Checkpoint, cfg: &T) -> Result<()> {
    let now = hash_config(cfg)?;
    if now != ckpt.config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {} vs current {now}",
            ckpt.config_hash
        )));
    }
    Ok(())
}

fn push_tensor(buf: &mut Vec<u8>, t: &Arr) {
    for v in t.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(bytes: &[u8], offset: &mut usize, shape: &[usize]) -> Result<Arr> {
    let count: usize = shape.iter().product();
    let need = count * 8;
    if *offset + need > bytes.len() {
        return Err(Error::Checkpoint("tensor payload truncated".into()));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let at = *offset + i * 8;
        values.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
    }
    *offset += need;
    Arr::from_shape_vec(ndarray::IxDyn(shape), values)
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape {shape:?}: {e}")))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let weights_meta: Vec<TensorMeta> = ckpt
        .weights
        .iter()
        .map(|(name, t)| TensorMeta {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            trainable: ckpt.weights.is_trainable(name),
        })
        .collect();
    let optimizer_meta = ckpt.optimizer.as_ref().map(|o| OptimizerMeta {
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        weight_decay: o.weight_decay,
        step: o.step,
        entries: o
            .m
            .iter()
            .map(|(name, t)| (name.clone(), t.shape().to_vec()))
            .collect(),
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        step: ckpt.step,
        epoch: ckpt.epoch,
        config_hash: ckpt.config_hash.clone(),
        weights: weights_meta,
        optimizer: optimizer_meta,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, t) in ckpt.weights.iter() {
        push_tensor(&mut buf, t);
    }
    if let Some(o) = &ckpt.optimizer {
        for t in o.m.values() {
            push_tensor(&mut buf, t);
        }
        for t in o.v.values() {
            push_tensor(&mut buf, t);
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Checkpoint("header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut offset = 16 + header_len;
    let mut weights = VarStore::new();
    for meta in &header.weights {
        let t = read_tensor(&bytes, &mut offset, &meta.shape)?;
        weights.insert(&meta.name, t, meta.trainable);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(om) => {
            let mut m = BTreeMap::new();
            for (name, shape) in &om.entries {
                m.insert(name.clone(), read_tensor(&bytes, &mut offset, shape)?);
            }
            let mut v = BTreeMap::new();
            for (name, shape) in &om.entries {
                v.insert(name.clone(), read_tensor(&bytes, &mut offset, shape)?);
            }
            Some(AdamSnapshot {
                lr: om.lr,
                beta1: om.beta1,
                beta2: om.beta2,
                weight_decay: om.weight_decay,
                step: om.step,
                m,
                v,
            })
        }
    };
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    Ok(Checkpoint {
        step: header.step,
        epoch: header.epoch,
        config_hash: header.config_hash,
        weights,
        optimizer,
    })
}

/// Copy tensors from a checkpoint file into an existing store, restricted to
/// names under `prefix` (all names when empty). Every matching target entry
/// must be present in the file with the same shape. Returns the copy count.
pub fn load_weights_into(store: &mut VarStore, path: impl AsRef<Path>, prefix: &str) -> Result<usize> {
    let ckpt = load_checkpoint(path)?;
    let targets: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect();
    let mut copied = 0;
    for name in &targets {
        let Some(src) = ckpt.weights.get(name) else {
            return Err(Error::Checkpoint(format!("checkpoint is missing tensor {name}")));
        };
        let dst = store.get_mut(name).expect("listed name");
        if dst.shape() != src.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.assign(src);
        copied += 1;
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn sample_store() -> VarStore {
        let mut s = VarStore::new();
        s.insert("a.weight", Arr::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] * 3 + ix[1]) as f64 * 0.25), true);
        s.insert("a.bias", Arr::from_elem(IxDyn(&[3]), -1.5), true);
        s.insert("frozen.w", Arr::from_elem(IxDyn(&[4]), 0.125), false);
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let store = sample_store();
        let mut opt = Adam::new(1e-3, 0.9, 0.999, 5e-4);
        let mut grads = BTreeMap::new();
        grads.insert("a.weight".to_string(), Arr::from_elem(IxDyn(&[2, 3]), 0.3));
        let mut store2 = store.clone();
        opt.step(&mut store2, &grads);

        let ckpt = Checkpoint {
            step: 17,
            epoch: 2,
            config_hash: "abc123".into(),
            weights: store2,
            optimizer: Some(AdamSnapshot::capture(&opt)),
        };
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.epoch, 2);
        assert_eq!(loaded.config_hash, "abc123");
        assert_eq!(loaded.weights.content_hash(), ckpt.weights.content_hash());
        assert!(!loaded.weights.is_trainable("frozen.w"));
        assert!(loaded.weights.is_trainable("a.bias"));
        let snap = loaded.optimizer.as_ref().unwrap();
        assert_eq!(snap.step, 1);
        assert_eq!(snap.m.len(), 1);

        let reloaded = Checkpoint {
            step: loaded.step,
            epoch: loaded.epoch,
            config_hash: loaded.config_hash.clone(),
            weights: loaded.weights,
            optimizer: loaded.optimizer,
        };
        save_checkpoint(&reloaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn config_hash_gates_resume() {
        #[derive(Serialize)]
        struct Cfg {
            lr: f64,
        }
        let ckpt = Checkpoint {
            step: 0,
            epoch: 0,
            config_hash: hash_config(&Cfg { lr: 0.1 }).unwrap(),
            weights: VarStore::new(),
            optimizer: None,
        };
        assert!(verify_config_hash(&ckpt, &Cfg { lr: 0.1 }).is_ok());
        assert!(verify_config_hash(&ckpt, &Cfg { lr: 0.2 }).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.ckpt");
        let ckpt = Checkpoint {
            step: 0,
            epoch: 0,
            config_hash: String::new(),
            weights: sample_store(),
            optimizer: None,
        };
        save_checkpoint(&ckpt, &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();

        let bad_magic = dir.path().join("magic.ckpt");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(load_checkpoint(&bad_magic).is_err());

        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&truncated).is_err());

        let padded = dir.path().join("long.ckpt");
        let mut b = bytes.clone();
        b.extend_from_slice(&[0u8; 8]);
        std::fs::write(&padded, &b).unwrap();
        assert!(load_checkpoint(&padded).is_err());
    }

    #[test]
    fn prefixed_load_copies_matching_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let ckpt = Checkpoint {
            step: 0,
            epoch: 0,
            config_hash: String::new(),
            weights: sample_store(),
            optimizer: None,
        };
        save_checkpoint(&ckpt, &path).unwrap();

        let mut target = VarStore::new();
        target.insert("a.weight", Arr::zeros(IxDyn(&[2, 3])), true);
        target.insert("a.bias", Arr::zeros(IxDyn(&[3])), true);
        target.insert("other", Arr::zeros(IxDyn(&[1])), true);
        let copied = load_weights_into(&mut target, &path, "a.").unwrap();
        assert_eq!(copied, 2);
        assert_eq!(target.get("a.bias").unwrap()[[0]], -1.5);
        assert_eq!(target.get("other").unwrap()[[0]], 0.0);

        // shape mismatch refuses
        let mut bad = VarStore::new();
        bad.insert("a.bias", Arr::zeros(IxDyn(&[4])), true);
        assert!(load_weights_into(&mut bad, &path, "a.").is_err());

        // missing tensor refuses
        let mut missing = VarStore::new();
        missing.insert("a.nope", Arr::zeros(IxDyn(&[1])), true);
        assert!(load_weights_into(&mut missing, &path, "a.").is_err());
    }
}
