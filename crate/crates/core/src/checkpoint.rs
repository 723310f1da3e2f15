//! On-disk checkpoints: a JSON manifest plus one binary blob per network and
//! parameter group.
//!
//! Blob layout (little endian): magic `SNPB`, `u32` version, `u32` tensor
//! count, then per tensor a `u32` name length, the UTF-8 name, a `u32` rank,
//! `u64` dimensions and the `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::supernet::{Supernet, SupernetConfig};
use crate::tensor::Tensor;
use crate::trainer::{EpochRecord, SupernetPair, TrainConfig, TrainState};

pub const FORMAT: &str = "segnas-checkpoint";
pub const VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SNPB";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub supernet: SupernetConfig,
    /// Construction seeds of the two networks.
    pub seeds: [u64; 2],
    pub train: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub blobs: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub pair: SupernetPair,
}

fn blob_name(net: usize, group: ParamGroup) -> String {
    format!("net{net}_{}.bin", group.tag())
}

pub fn save(dir: &Path, pair: &SupernetPair, train: &TrainConfig, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blobs = Vec::new();
    for (k, net) in pair.nets().into_iter().enumerate() {
        for group in ParamGroup::ALL {
            let name = blob_name(k + 1, group);
            let path = dir.join(&name);
            fs::write(&path, encode_group(&net.store, group)).map_err(|e| Error::io(&path, e))?;
            blobs.push(name);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        epoch: state.epoch,
        supernet: pair.net1.config().clone(),
        seeds: [pair.net1.seed(), pair.net2.seed()],
        train: train.clone(),
        history: state.history.clone(),
        blobs,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("manifest.json");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut nets = Vec::with_capacity(2);
    for k in 1..=2 {
        let mut net = Supernet::new(&manifest.supernet, manifest.seeds[k - 1])?;
        let mut seen = vec![false; net.store.len()];
        for group in ParamGroup::ALL {
            let path = dir.join(blob_name(k, group));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            for (name, t) in decode(&bytes).map_err(|m| Error::Format(format!("{}: {m}", path.display())))? {
                let id = net
                    .store
                    .find(&name)
                    .filter(|&id| net.store.entry(id).group == group)
                    .ok_or_else(|| Error::Format(format!("unknown {} parameter {name}", group.tag())))?;
                if net.store.get(id).shape() != t.shape() {
                    return Err(Error::Format(format!("parameter {name} has shape {:?}", t.shape())));
                }
                *net.store.get_mut(id) = t;
                seen[id.index()] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "checkpoint lacks parameter {}",
                net.store.entries()[i].name
            )));
        }
        nets.push(net);
    }
    let net2 = nets.pop().unwrap();
    let net1 = nets.pop().unwrap();
    Ok(Checkpoint {
        manifest,
        pair: SupernetPair { net1, net2 },
    })
}

pub fn encode_group(store: &ParamStore, group: ParamGroup) -> Vec<u8> {
    let entries: Vec<_> = store.entries().iter().filter(|e| e.group == group).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let shape = e.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated blob")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported blob version {version}"));
    }
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflow")?;
        let raw = r.take(numel.checked_mul(8).ok_or("shape overflow")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::supernet::ArchMode;

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = SupernetConfig {
            encoder: EncoderConfig {
                layers: 2,
                nodes: 2,
                c_base: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let pair = SupernetPair::new(&cfg, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState {
            epoch: 3,
            ..Default::default()
        };
        save(dir.path(), &pair, &TrainConfig::default(), &state).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.manifest.epoch, 3);
        assert_eq!(back.pair.net1.store, pair.net1.store);
        assert_eq!(back.pair.net2.store, pair.net2.store);
        let x = Tensor::from_fn(&[1, 1, 32, 32], |i| (i % 13) as f64 / 13.0);
        let a = pair.net2.logits(&x, &ArchMode::Relaxed).unwrap();
        let b = back.pair.net2.logits(&x, &ArchMode::Relaxed).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn corrupt_blobs_rejected() {
        let mut store = ParamStore::new();
        store.add("a", ParamGroup::Alpha, Tensor::full(&[2, 3], 0.5), false);
        let bytes = encode_group(&store, ParamGroup::Alpha);
        assert_eq!(decode(&bytes).unwrap()[0].1, Tensor::full(&[2, 3], 0.5));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
