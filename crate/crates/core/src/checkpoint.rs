//! Checkpoint files: magic `BMFACKPT`, u32 format version, u32 entry count,
//! then per entry a u32-length-prefixed UTF-8 name followed by a BTF1 tensor.
//!
//! Names are the dotted parameter paths of the store, e.g.
//! `backbone.stage2.block1.conv1.weight` or `topdown.afm3.W1.weight`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{read_tensor_from, write_tensor_to, AnyTensor, Scalar};

pub const CKPT_MAGIC: &[u8; 8] = b"BMFACKPT";
pub const CKPT_VERSION: u32 = 1;

/// Upper bound on a parameter name, to fail fast on corrupt files.
const MAX_NAME_LEN: usize = 4096;

pub fn write_checkpoint<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for e in store.entries() {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        write_tensor_to(&mut w, &e.value)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads all entries, in file order.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, AnyTensor)>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "truncated checkpoint header"))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CKPT_VERSION,
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > MAX_NAME_LEN {
            return Err(Error::format(path, format!("parameter name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let t = read_tensor_from(&mut r, path)?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format(path, "trailing bytes after last entry"));
    }
    Ok(out)
}

/// Overwrites every store entry from `entries`. The name sets must be equal
/// and shapes must match; values are converted to the store's precision.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, entries: Vec<(String, AnyTensor)>) -> Result<()> {
    let mut by_name: BTreeMap<String, AnyTensor> = BTreeMap::new();
    for (n, t) in entries {
        if by_name.insert(n.clone(), t).is_some() {
            return Err(Error::InvalidInput(format!("duplicate checkpoint entry `{n}`")));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let t = by_name
            .remove(&name)
            .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks `{name}`")))?;
        if t.shape() != store.value(id).shape() {
            return Err(Error::shape(format!(
                "`{name}`: checkpoint {} vs model {}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t.into_precision();
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::InvalidInput(format!(
            "checkpoint entry `{extra}` does not belong to this model"
        )));
    }
    Ok(())
}

pub fn load_into<T: Scalar>(path: impl AsRef<Path>, store: &mut ParamStore<T>) -> Result<()> {
    restore(store, read_checkpoint(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::{Shape, Tensor};

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(Shape::new(2, 3, 1, 1), |[n, c, _, _]| (n * 3 + c) as f32), ParamKind::Trainable)
            .unwrap();
        s.add("a.bn.running_var", Tensor::full(Shape::new(1, 3, 1, 1), 0.5), ParamKind::Buffer)
            .unwrap();
        s
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let s = store();
        write_checkpoint(&p, &s).unwrap();
        let mut t = store();
        t.value_mut(crate::params::ParamId(0)).fill(0.0);
        load_into(&p, &mut t).unwrap();
        assert_eq!(s.entries()[0].value, t.entries()[0].value);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], CKPT_MAGIC);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
    }

    #[test]
    fn future_version_and_mismatches_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        write_checkpoint(&p, &store()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 2;
        let q = dir.path().join("future.ckpt");
        std::fs::write(&q, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&q),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));

        let mut other = ParamStore::<f32>::new();
        other.add("a.weight", Tensor::zeros(Shape::new(3, 2, 1, 1)), ParamKind::Trainable).unwrap();
        other.add("a.bn.running_var", Tensor::zeros(Shape::new(1, 3, 1, 1)), ParamKind::Buffer).unwrap();
        assert!(matches!(load_into(&p, &mut other), Err(Error::Shape(_))));

        let mut smaller = ParamStore::<f32>::new();
        smaller.add("a.weight", Tensor::zeros(Shape::new(2, 3, 1, 1)), ParamKind::Trainable).unwrap();
        assert!(load_into(&p, &mut smaller).is_err());
    }
}
