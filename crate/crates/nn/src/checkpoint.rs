//! Versioned checkpoint files.
//!
//! Layout: `b"SSCK"`, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order. The
//! header carries the producing network's architecture so that loading into a
//! differently configured network fails before any tensor is touched.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{NnError, ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"SSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Header {
    kind: String,
    arch: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// An in-memory checkpoint: architecture header plus named tensor groups.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub arch: serde_json::Value,
    groups: Vec<(String, Vec<(String, Tensor)>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, arch: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            arch,
            groups: Vec::new(),
        }
    }

    /// Adds every tensor of `store` (weights and buffers) under `group`.
    pub fn with_store(mut self, group: &str, store: &ParamStore) -> Self {
        let items = store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        self.groups.push((group.to_string(), items));
        self
    }

    /// Verifies the header against the expected kind and architecture.
    pub fn expect(&self, kind: &str, arch: &serde_json::Value) -> Result<(), NnError> {
        if self.kind != kind {
            return Err(NnError::Checkpoint(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.kind
            )));
        }
        if &self.arch != arch {
            return Err(NnError::Checkpoint(format!(
                "architecture mismatch: checkpoint {}, expected {}",
                self.arch, arch
            )));
        }
        Ok(())
    }

    /// Copies a tensor group into `store`, requiring identical names and shapes.
    pub fn restore(&self, group: &str, store: &mut ParamStore) -> Result<(), NnError> {
        let (_, items) = self
            .groups
            .iter()
            .find(|(g, _)| g == group)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor group {group}")))?;
        if items.len() != store.len() {
            return Err(NnError::Checkpoint(format!(
                "group {group}: {} tensors in file, {} in model",
                items.len(),
                store.len()
            )));
        }
        for (name, t) in items {
            store.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let header = Header {
            kind: self.kind.clone(),
            arch: self.arch.clone(),
            tensors: self
                .groups
                .iter()
                .flat_map(|(g, items)| {
                    items.iter().map(move |(n, t)| TensorEntry {
                        group: g.clone(),
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                    })
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, items) in &self.groups {
            for (_, t) in items {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint(format!("{} is not a checkpoint file", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut groups: Vec<(String, Vec<(String, Tensor)>)> = Vec::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&e.shape, data);
            match groups.iter_mut().find(|(g, _)| *g == e.group) {
                Some((_, items)) => items.push((e.name, t)),
                None => groups.push((e.group, vec![(e.name, t)])),
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes after tensors", rest.len())));
        }
        Ok(Self {
            kind: header.kind,
            arch: header.arch,
            groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Init;

    #[test]
    fn round_trip_is_bit_exact_and_checks_arch() {
        let mut ps = ParamStore::new(3);
        ps.add("a.weight", &[2, 3], Init::Normal { std: 1.0 });
        ps.add_buffer("a.stat", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]));
        let arch = serde_json::json!({"width": 4});
        let dir = std::env::temp_dir().join(format!("ssck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        Checkpoint::new("toy", arch.clone()).with_store("net", &ps).save(&path).unwrap();

        let ck = Checkpoint::load(&path).unwrap();
        ck.expect("toy", &arch).unwrap();
        assert!(ck.expect("toy", &serde_json::json!({"width": 8})).is_err());
        assert!(ck.expect("other", &arch).is_err());

        let mut fresh = ParamStore::new(99);
        fresh.add("a.weight", &[2, 3], Init::Zeros);
        fresh.add_buffer("a.stat", Tensor::zeros(&[2]));
        ck.restore("net", &mut fresh).unwrap();
        assert!(fresh.same_values(&ps));

        let mut wrong = ParamStore::new(1);
        wrong.add("a.weight", &[3, 2], Init::Zeros);
        wrong.add_buffer("a.stat", Tensor::zeros(&[2]));
        assert!(ck.restore("net", &mut wrong).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
