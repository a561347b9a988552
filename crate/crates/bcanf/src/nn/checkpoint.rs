//! Checkpoint file: little-endian binary with magic "BCNP", version byte,
//! parameter count, then per parameter: name length (u16) + UTF-8 name,
//! shape (4 x u32), raw 32-bit values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BCNP";
const VERSION: u8 = 1;

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, id) in store.iter_names() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("parameter name too long: {name}")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        let t = store.value(id);
        for d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Loads values into an already-constructed store. The file must contain
/// exactly the store's parameters with matching shapes.
pub fn load<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".into()));
    }
    let version = take(&mut pos, 1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model expects {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n)?;
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if store.value(id).shape() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?} vs model {:?}",
                shape,
                store.value(id).shape()
            )));
        }
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store.set_value(id, Tensor::new(shape, data)?)?;
    }
    if pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn save_load_roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bcnp");
        let mut rng = StdRng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let a = store
            .register(
                "a.w",
                Tensor::new([2, 3, 1, 1], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            )
            .unwrap();
        let b = store.register("b.bias", Tensor::full([1, 4, 1, 1], 0.25)).unwrap();
        save(&store, &path).unwrap();
        let keep_a = store.value(a).clone();
        let keep_b = store.value(b).clone();
        store.set_value(a, Tensor::zeros([2, 3, 1, 1])).unwrap();
        store.set_value(b, Tensor::zeros([1, 4, 1, 1])).unwrap();
        load(&mut store, &path).unwrap();
        assert_eq!(store.value(a), &keep_a);
        assert_eq!(store.value(b), &keep_b);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bcnp");
        std::fs::write(&path, b"XXNP\x01\x00\x00\x00\x00").unwrap();
        let mut store = ParamStore::<f32>::new();
        assert!(load(&mut store, &path).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bcnp");
        let mut store = ParamStore::<f32>::new();
        store.register("p", Tensor::zeros([1, 2, 1, 1])).unwrap();
        save(&store, &path).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.register("p", Tensor::zeros([1, 3, 1, 1])).unwrap();
        assert!(load(&mut other, &path).is_err());
    }
}
