//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MTLCKPT\0" | u32 version | u32 len + fingerprint (UTF-8)
//! | u32 len + header JSON (model config and head allocation)
//! | u32 tensor count | per tensor: u32 len + name, u32 ndim, u64 dims..., f64 data...
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{MtlModel, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::HeadAllocation;
use crate::ndcore::Tensor;

const MAGIC: &[u8; 8] = b"MTLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    allocation: HeadAllocation,
}

pub struct Checkpoint {
    pub fingerprint: String,
    pub model: MtlModel,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    put_u32(out, b.len())?;
    out.extend_from_slice(b);
    Ok(())
}

pub fn encode(model: &MtlModel, fingerprint: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut out, fingerprint.as_bytes())?;
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        allocation: model.allocation.clone(),
    })
    .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    put_bytes(&mut out, &header)?;
    put_u32(&mut out, model.store.len())?;
    for (_, p) in model.store.iter() {
        put_bytes(&mut out, p.name.as_bytes())?;
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let fingerprint = r.string()?;
    let header: Header = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = MtlModel::new(header.config, header.allocation, 0)
        .map_err(|e| Error::Checkpoint(format!("header describes an invalid model: {e}")))?;
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, model needs {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        let slot = &mut model.store.get_mut(id).value;
        if slot.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, model expects {:?}",
                slot.shape()
            )));
        }
        *slot = Tensor::new(shape, data)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint { fingerprint, model })
}

pub fn save(path: &Path, model: &MtlModel, fingerprint: &str) -> Result<()> {
    let bytes = encode(model, fingerprint)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::datagen::{generate, GenConfig};
    use crate::evalsuite::Classifier;
    use crate::ndcore::Tape;

    fn model() -> (MtlModel, crate::datagen::MultiTaskDataset) {
        let ds = generate(&GenConfig {
            num_tasks: 4,
            vocab_size: 32,
            latent_dim: 4,
            image_dim: 3,
            size_median: 20.0,
            classes_max: 5,
            tokens_per_example: 4,
            ..GenConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                layers: 1,
                hidden: 8,
                heads: 2,
                ff: 8,
                vocab_size: 32,
                max_len: 10,
                max_images: 2,
                image_dim: 3,
            },
            ..ModelConfig::default()
        };
        let cfg = ModelConfig { head: super::super::model::HeadSpec { d_t: 4, ..Default::default() }, ..cfg };
        (MtlModel::for_dataset(&cfg, &ds, 5).unwrap(), ds)
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let (m, ds) = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &m, "fp").unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.fingerprint, "fp");
        let seqs = m.assemble(&ds.test[1]).unwrap();
        let (mut t1, mut t2) = (Tape::new(&m.store), Tape::new(&back.model.store));
        let a = m.logits(&mut t1, 1, &seqs).unwrap();
        let b = back.model.logits(&mut t2, 1, &seqs).unwrap();
        assert!(t1.value(a).max_abs_diff(t2.value(b)) <= 1e-12);
        assert_eq!(back.model.predict(2, &ds.test[2]).unwrap(), m.predict(2, &ds.test[2]).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let (m, _) = model();
        let bytes = encode(&m, "x").unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(decode(&bytes).is_ok());
    }
}
