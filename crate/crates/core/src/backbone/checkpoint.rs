//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes ("FGLS" for stores, "FGLA" for adapters)
//! version          u32 = 1
//! entry count      u32
//! per entry:
//!   name length    u16, then UTF-8 name
//!   rank           u8
//!   extents        u32 * rank
//!   data           f64 * product(extents)
//! checksum         u64 FNV-1a over all preceding bytes
//! ```
//!
//! Metadata key/value pairs ride along as zero-length entries named
//! `__meta__.key=value`, which keeps the byte layout uniform.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::fnv1a;
use crate::tensor::Tensor;

use super::store::ParamStore;

pub const MAGIC_STORE: [u8; 4] = *b"FGLS";
pub const MAGIC_ADAPTER: [u8; 4] = *b"FGLA";
pub const VERSION: u32 = 1;

const META_PREFIX: &str = "__meta__.";

/// In-memory checkpoint: versioned tensors plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub metadata: BTreeMap<String, String>,
}

/// Outcome of a tolerant partial load.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub matched: usize,
    pub total_in_store: usize,
    /// Checkpoint entries that were not applied (missing name or wrong shape).
    pub skipped_names: Vec<String>,
    /// Store entries that no checkpoint entry filled.
    pub unmatched_store: Vec<String>,
}

impl LoadReport {
    /// The paper-style one-liner, e.g. "loaded 59/82 keys".
    pub fn summary(&self) -> String {
        format!("loaded {}/{} keys", self.matched, self.total_in_store)
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        let mut entries = BTreeMap::new();
        for (name, p) in store.iter() {
            entries.insert(name.to_string(), (p.tensor.shape().to_vec(), p.tensor.data().to_vec()));
        }
        Checkpoint { entries, metadata: store.metadata().clone() }
    }

    pub fn into_store(self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, (shape, data)) in self.entries {
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        for (k, v) in self.metadata {
            store.set_metadata(&k, &v);
        }
        Ok(store)
    }

    pub fn to_bytes(&self, magic: [u8; 4]) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let count = self.entries.len() + self.metadata.len();
        buf.extend_from_slice(&(count as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_entry(&mut buf, &format!("{META_PREFIX}{k}={v}"), &[0], &[]);
        }
        for (name, (shape, data)) in &self.entries {
            write_entry(&mut buf, name, shape, data);
        }
        let checksum = fnv1a(&buf);
        buf.extend_from_slice(&checksum.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 {
            return Err(Error::Truncated("header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != expected_magic {
            return Err(Error::BadMagic { expected: expected_magic, got: magic });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch { expected: VERSION, got: version });
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Truncated("entry name"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            if let Some(kv) = name.strip_prefix(META_PREFIX) {
                let (k, v) = kv.split_once('=').ok_or(Error::Truncated("metadata entry"))?;
                ckpt.metadata.insert(k.to_string(), v.to_string());
            } else {
                ckpt.entries.insert(name, (shape, data));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Truncated("trailing bytes"));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn write_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &e in shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Save a store to disk under the given magic.
pub fn save_checkpoint_as(store: &ParamStore, path: &Path, magic: [u8; 4]) -> Result<()> {
    let bytes = Checkpoint::from_store(store).to_bytes(magic);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    save_checkpoint_as(store, path, MAGIC_STORE)
}

pub fn load_checkpoint_as(path: &Path, magic: [u8; 4]) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, magic)?.into_store()
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    load_checkpoint_as(path, MAGIC_STORE)
}

/// Copy every checkpoint entry whose name AND shape match into the store.
/// Mismatches are skipped and reported, never fatal.
pub fn load_partial(store: &mut ParamStore, ckpt: &Checkpoint) -> LoadReport {
    let mut matched = 0;
    let mut skipped = Vec::new();
    let mut filled = std::collections::BTreeSet::new();
    for (name, (shape, data)) in &ckpt.entries {
        let fits = store
            .get(name)
            .map(|p| p.tensor.shape() == shape.as_slice())
            .unwrap_or(false);
        if fits {
            let t = &mut store.get_mut(name).expect("checked").tensor;
            t.data_mut().copy_from_slice(data);
            matched += 1;
            filled.insert(name.clone());
        } else {
            skipped.push(name.clone());
        }
    }
    let unmatched_store = store
        .names()
        .filter(|n| !filled.contains(*n))
        .map(|n| n.to_string())
        .collect();
    LoadReport { matched, total_in_store: store.len(), skipped_names: skipped, unmatched_store }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn store_with(names: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        for (name, shape) in names {
            s.insert(name, Tensor::gaussian(shape.clone(), 1.0, &mut rng)).unwrap();
        }
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = store_with(
            &[("a.weight", vec![3, 2]), ("a.bias", vec![3]), ("b.weight", vec![4, 3, 1, 1, 1])],
            5,
        );
        s.set_metadata("task_id", "t1");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.fgls");
        save_checkpoint(&s, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(s.hash_map(), loaded.hash_map());
        assert_eq!(loaded.metadata().get("task_id").unwrap(), "t1");
    }

    #[test]
    fn empty_store_round_trips() {
        let s = ParamStore::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fgls");
        save_checkpoint(&s, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 0);
    }

    #[test]
    fn corruption_is_detected_not_silent() {
        let s = store_with(&[("w", vec![4, 4])], 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.fgls");
        save_checkpoint(&s, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, MAGIC_STORE),
            Err(Error::ChecksumMismatch)
        ));
        // truncation is also an error
        let keep = bytes.len() - 20;
        assert!(Checkpoint::from_bytes(&bytes[..keep], MAGIC_STORE).is_err());
    }

    #[test]
    fn wrong_magic_and_version_are_errors() {
        let s = store_with(&[("w", vec![2])], 1);
        let bytes = Checkpoint::from_store(&s).to_bytes(MAGIC_ADAPTER);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, MAGIC_STORE),
            Err(Error::BadMagic { .. })
        ));
        let mut bytes = Checkpoint::from_store(&s).to_bytes(MAGIC_STORE);
        bytes[4] = 9; // bump version, then re-stamp the checksum
        let n = bytes.len() - 8;
        let sum = fnv1a(&bytes[..n]);
        bytes[n..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, MAGIC_STORE),
            Err(Error::VersionMismatch { expected: 1, got: 9 })
        ));
    }

    #[test]
    fn partial_load_matches_name_and_shape() {
        let mut store = store_with(
            &[
                ("encoder.w", vec![2, 2]),
                ("encoder.b", vec![2]),
                ("decoder.w", vec![3, 3]),
            ],
            11,
        );
        let donor = store_with(
            &[
                ("encoder.w", vec![2, 2]),
                ("encoder.b", vec![2]),
                ("decoder.w", vec![4, 4]), // shape mismatch -> skip
                ("extra.w", vec![1]),      // unknown name -> skip
            ],
            12,
        );
        let before_decoder = store.param_hash("decoder.w").unwrap();
        let ckpt = Checkpoint::from_store(&donor);
        let report = load_partial(&mut store, &ckpt);
        assert_eq!(report.matched, 2);
        assert_eq!(report.total_in_store, 3);
        assert_eq!(report.skipped_names, vec!["decoder.w".to_string(), "extra.w".to_string()]);
        assert_eq!(report.unmatched_store, vec!["decoder.w".to_string()]);
        assert_eq!(store.param_hash("decoder.w").unwrap(), before_decoder);
        assert_eq!(
            store.param_hash("encoder.w").unwrap(),
            donor.param_hash("encoder.w").unwrap()
        );
    }

    #[test]
    fn report_renders_paper_style_counts() {
        // fixture with 82 store keys, 59 of them fed by the checkpoint
        let mut store = ParamStore::new();
        for i in 0..82 {
            store.insert(&format!("p{i:03}"), Tensor::zeros(vec![2])).unwrap();
        }
        let mut donor = ParamStore::new();
        for i in 0..59 {
            donor.insert(&format!("p{i:03}"), Tensor::full(vec![2], 1.0)).unwrap();
        }
        let report = load_partial(&mut store, &Checkpoint::from_store(&donor));
        assert_eq!(report.summary(), "loaded 59/82 keys");
        assert_eq!(report.unmatched_store.len(), 82 - 59);
    }
}
