//! Binary parameter container.
//!
//! Layout: the 8-byte magic `LANECKPT`, a little-endian `u64` header
//! length, the JSON header, then every parameter as little-endian `f64` in
//! header order. When the header carries optimizer state, the first and
//! then second moments follow in the same order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::params::ParamStore;
use super::{Result, Tensor, TensorError};

const MAGIC: &[u8; 8] = b"LANECKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHeader {
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub adam: Option<AdamHeader>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Tensor>,
    pub adam: Option<AdamState>,
}

fn ck(e: impl std::fmt::Display) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes()).map_err(ck)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|_| ck("truncated parameter data"))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_checkpoint(
    path: &Path,
    store: &ParamStore,
    config_hash: &str,
    config: serde_json::Value,
    adam: Option<&AdamState>,
) -> Result<()> {
    let header = CheckpointHeader {
        config_hash: config_hash.to_string(),
        config,
        params: store
            .ids()
            .map(|id| ParamEntry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
            })
            .collect(),
        adam: adam.map(|a| AdamHeader {
            step: a.step,
            config: a.config,
        }),
    };
    let json = serde_json::to_vec(&header).map_err(ck)?;
    let file = File::create(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(ck)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(ck)?;
    w.write_all(&json).map_err(ck)?;
    for id in store.ids() {
        write_f64s(&mut w, store.get(id).data())?;
    }
    if let Some(a) = adam {
        for m in &a.m {
            write_f64s(&mut w, m)?;
        }
        for v in &a.v {
            write_f64s(&mut w, v)?;
        }
    }
    w.flush().map_err(ck)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ck("file too short"))?;
    if &magic != MAGIC {
        return Err(ck("bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| ck("file too short"))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(ck("header length implausible"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| ck("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(ck)?;
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n = p.shape.iter().product();
        values.push(Tensor::new(p.shape.clone(), read_f64s(&mut r, n)?)?);
    }
    let adam = match &header.adam {
        Some(h) => {
            let mut m = Vec::new();
            for t in &values {
                m.push(read_f64s(&mut r, t.len())?);
            }
            let mut v = Vec::new();
            for t in &values {
                v.push(read_f64s(&mut r, t.len())?);
            }
            Some(AdamState {
                config: h.config,
                step: h.step,
                m,
                v,
            })
        }
        None => None,
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(ck)?;
    if !rest.is_empty() {
        return Err(ck(format!("{} trailing bytes", rest.len())));
    }
    if values.iter().any(|t| !t.is_finite()) {
        return Err(ck("non-finite parameter value"));
    }
    Ok(Checkpoint { header, values, adam })
}

impl Checkpoint {
    /// Copies values into a store with the same names and shapes, after
    /// checking the configuration hash.
    pub fn load_into(&self, store: &mut ParamStore, expected_hash: &str) -> Result<()> {
        if self.header.config_hash != expected_hash {
            return Err(ck(format!(
                "config hash mismatch: checkpoint {} vs expected {}",
                self.header.config_hash, expected_hash
            )));
        }
        if self.header.params.len() != store.len() {
            return Err(ck(format!(
                "{} parameters in checkpoint, model has {}",
                self.header.params.len(),
                store.len()
            )));
        }
        for (entry, value) in self.header.params.iter().zip(&self.values) {
            let id = store
                .lookup(&entry.name)
                .ok_or_else(|| ck(format!("unknown parameter {}", entry.name)))?;
            store.set(id, value.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LrSchedule;

    #[test]
    fn round_trip_with_optimizer() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        s.add("b", Tensor::scalar(f64::MIN_POSITIVE));
        let mut st = AdamState::new(&s, AdamConfig::new(LrSchedule::Constant { lr: 0.1 }));
        st.step(&mut s, &[Some(vec![1.0, 2.0, 3.0, 4.0]), Some(vec![0.5])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        write_checkpoint(&p, &s, "abc", serde_json::json!({"d": 2}), Some(&st)).unwrap();
        let c = read_checkpoint(&p).unwrap();
        assert_eq!(c.adam.as_ref().unwrap(), &st);
        let mut s2 = s.clone();
        s2.get_mut(s2.lookup("a").unwrap()).data_mut()[0] = 99.0;
        c.load_into(&mut s2, "abc").unwrap();
        for id in s.ids() {
            assert_eq!(s.get(id), s2.get(id));
        }
        assert!(c.load_into(&mut s2, "xyz").is_err());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"NOTACKPT\0\0\0\0\0\0\0\0").unwrap();
        assert!(read_checkpoint(&p).is_err());
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[3]));
        write_checkpoint(&p, &s, "h", serde_json::Value::Null, None).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_checkpoint(&p).is_err());
    }
}
