//! Self-describing weight container.
//!
//! Layout (all integers little-endian):
//! `DYTX` magic, u32 format version, u32 entry count, then per entry:
//! u32 name length + UTF-8 name, u32 rank, u64 extents, f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DytxError, Result};
use crate::model::Model;
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DYTX";
pub const VERSION: u32 = 1;

pub fn save_entries(path: &Path, entries: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_entries(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        DytxError::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| DytxError::Checkpoint(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(DytxError::Checkpoint(format!(
            "bad magic {magic:?}, not a checkpoint file"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DytxError::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| DytxError::Checkpoint(format!("invalid entry name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let e = u64::from_le_bytes(b) as usize;
            shape.push(e);
            len *= e;
        }
        let mut data = vec![0f32; len];
        let mut b = [0u8; 4];
        for v in data.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
        entries.push((name, Tensor::new(shape, data)));
    }
    Ok(entries)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| DytxError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_model(path: &Path, model: &Model<f32>) -> Result<()> {
    let params = model.params();
    let entries: Vec<(String, &Tensor<f32>)> = params
        .iter()
        .map(|(n, p)| (n.clone(), &p.value))
        .collect();
    save_entries(path, &entries)
}

/// Load weights into an already-constructed model; every parameter must be
/// present with a matching shape.
pub fn load_model(path: &Path, model: &mut Model<f32>) -> Result<()> {
    let entries = load_entries(path)?;
    let mut map: std::collections::HashMap<String, Tensor<f32>> = entries.into_iter().collect();
    for (name, p) in model.params_mut() {
        let t = map.remove(&name).ok_or_else(|| {
            DytxError::Checkpoint(format!("missing parameter '{name}' in checkpoint"))
        })?;
        if t.shape() != p.value.shape() {
            return Err(DytxError::Checkpoint(format!(
                "shape mismatch for '{name}': file {:?} vs model {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    if let Some(extra) = map.keys().next() {
        return Err(DytxError::Checkpoint(format!(
            "checkpoint has unknown entry '{extra}'"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::ExitsConfig;
    use crate::rng::RandomState;

    #[test]
    fn model_round_trip_bit_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.dytx");
        let mut rng = RandomState::new(3);
        let model =
            Model::init(&BackboneConfig::default(), &ExitsConfig::default(), &mut rng).unwrap();
        save_model(&path, &model).unwrap();
        let mut rng2 = RandomState::new(999);
        let mut other =
            Model::init(&BackboneConfig::default(), &ExitsConfig::default(), &mut rng2).unwrap();
        load_model(&path, &mut other).unwrap();
        for ((na, pa), (nb, pb)) in model.params().iter().zip(other.params()) {
            assert_eq!(na, &nb);
            let a: Vec<u32> = pa.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = pb.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "param {na} differs after round trip");
        }
    }

    #[test]
    fn header_starts_with_magic() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.dytx");
        let t = Tensor::from_vec(vec![1.0f32, 2.0]);
        save_entries(&path, &[("w".to_string(), &t)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"DYTX");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }

    #[test]
    fn rejects_garbage_and_shape_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.dytx");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_entries(&path).is_err());

        let good = tmp.path().join("good.dytx");
        let t = Tensor::from_vec(vec![0.5f32; 4]);
        save_entries(&good, &[("only".to_string(), &t)]).unwrap();
        let mut rng = RandomState::new(1);
        let mut model =
            Model::init(&BackboneConfig::default(), &ExitsConfig::default(), &mut rng).unwrap();
        let err = load_model(&good, &mut model).unwrap_err();
        assert!(err.to_string().contains("missing parameter"));
    }
}
