//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u64`, values little-endian `f64`):
//!
//! ```text
//! tensor_count
//! for each tensor: rank, extent_0 .. extent_{rank-1}
//! all tensor data, concatenated in table order
//! ```
//!
//! A sidecar `<path>.manifest` holds `key = value` lines describing how to
//! rebuild the owning object (model spec, seed, ...).

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::models::{ModelDims, ModelSpec, SplitModel};
use crate::numcore::{NumError, Tensor};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Shape(#[from] NumError),
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<u8> {
    let tensors: Vec<&Tensor> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    for t in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&[u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u64("tensor count")? as usize;
    if count > bytes.len() / 8 {
        return Err(CheckpointError::Malformed(format!(
            "tensor count {count} exceeds file size"
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u64("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Malformed(format!("tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64("tensor extent").map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

pub fn write_manifest(path: &Path, entries: &[(&str, String)]) -> Result<(), CheckpointError> {
    let text: String = entries
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let mp = manifest_path(path);
    fs::write(&mp, text).map_err(|source| CheckpointError::Io { path: mp, source })
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>, CheckpointError> {
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|source| CheckpointError::Io {
        path: mp.clone(),
        source,
    })?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("manifest line `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn write_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = &'a Tensor>,
) -> Result<(), CheckpointError> {
    fs::write(path, encode_tensors(tensors)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_tensors(&bytes)
}

pub(crate) fn manifest_field<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
) -> Result<T, CheckpointError> {
    map.get(key)
        .ok_or_else(|| CheckpointError::Malformed(format!("manifest missing `{key}`")))?
        .parse()
        .map_err(|_| CheckpointError::Malformed(format!("manifest field `{key}` unparsable")))
}

pub fn save_model(path: &Path, model: &SplitModel, seed: u64) -> Result<(), CheckpointError> {
    write_tensors(path, model.parameters())?;
    let spec = model.spec();
    write_manifest(
        path,
        &[
            ("kind", "split-model".to_string()),
            ("family", spec.family.name().to_string()),
            ("capacity", spec.capacity.name().to_string()),
            ("input_extent", spec.dims.input_extent.to_string()),
            ("feature_extent", spec.dims.feature_extent.to_string()),
            ("class_count", spec.dims.class_count.to_string()),
            ("seed", seed.to_string()),
        ],
    )
}

/// Loads a model and the seed it was built from.
pub fn load_model(path: &Path) -> Result<(SplitModel, u64), CheckpointError> {
    let m = read_manifest(path)?;
    if m.get("kind").map(String::as_str) != Some("split-model") {
        return Err(CheckpointError::Malformed("manifest kind is not split-model".into()));
    }
    let family = m
        .get("family")
        .ok_or_else(|| CheckpointError::Malformed("manifest missing `family`".into()))?
        .parse()
        .map_err(CheckpointError::Malformed)?;
    let capacity = m
        .get("capacity")
        .ok_or_else(|| CheckpointError::Malformed("manifest missing `capacity`".into()))?
        .parse()
        .map_err(CheckpointError::Malformed)?;
    let dims = ModelDims {
        input_extent: manifest_field(&m, "input_extent")?,
        feature_extent: manifest_field(&m, "feature_extent")?,
        class_count: manifest_field(&m, "class_count")?,
    };
    let seed: u64 = manifest_field(&m, "seed")?;
    let mut model = SplitModel::build(ModelSpec::new(family, capacity, dims), seed);
    let tensors = read_tensors(path)?;
    let shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
    if shapes != model.parameter_shapes() {
        return Err(CheckpointError::Malformed(
            "tensor table does not match the manifest spec".into(),
        ));
    }
    let flat: Vec<f64> = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    model.set_flat_parameters(&flat)?;
    Ok((model, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Capacity, Family};
    use proptest::prelude::*;

    #[test]
    fn model_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let dims = ModelDims {
            input_extent: 6,
            feature_extent: 4,
            class_count: 3,
        };
        let mut model = SplitModel::build(ModelSpec::new(Family::Deep, Capacity::Half, dims), 17);
        let mut flat = model.flat_parameters();
        flat[0] = 0.123_456_789;
        model.set_flat_parameters(&flat).unwrap();
        save_model(&path, &model, 17).unwrap();
        let (loaded, seed) = load_model(&path).unwrap();
        assert_eq!(seed, 17);
        assert_eq!(loaded, model);
    }

    #[test]
    fn header_layout_is_little_endian_u64() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]);
        let bytes = encode_tensors([&t]);
        assert_eq!(&bytes[0..8], &1u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &2u64.to_le_bytes());
        assert_eq!(&bytes[32..40], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 48);
    }

    #[test]
    fn truncated_and_trailing_bytes_are_rejected() {
        let t = Tensor::vector(vec![3.0, 4.0]);
        let bytes = encode_tensors([&t]);
        assert!(matches!(
            decode_tensors(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_tensors(&extra), Err(CheckpointError::Malformed(_))));
    }

    proptest! {
        #[test]
        fn tensor_table_round_trips(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 1..4),
            seed in any::<u64>(),
        ) {
            let tensors: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n: usize = s.iter().product();
                    let data = (0..n).map(|k| ((seed ^ (i * 31 + k) as u64) % 1000) as f64 / 7.0).collect();
                    Tensor::new(s.clone(), data).unwrap()
                })
                .collect();
            let decoded = decode_tensors(&encode_tensors(tensors.iter())).unwrap();
            prop_assert_eq!(decoded, tensors);
        }
    }
}
