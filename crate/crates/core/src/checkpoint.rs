//! Versioned tensor files in the safetensors layout.
//!
//! Files are written with a key-sorted header so identical inputs produce
//! identical bytes; the reference reader (the `safetensors` crate) parses them.
//! Writes go through a temporary file and a rename, so an existing checkpoint
//! is never left half-written.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors};
use serde_json::json;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Version tag stored in every file this crate writes.
pub const FORMAT_VERSION: &str = "1";

/// Parsed checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {key:?}")))
    }
}

fn dtype_of<T: Scalar>() -> (&'static str, usize) {
    match T::DTYPE {
        "f64" => ("F64", 8),
        _ => ("F32", 4),
    }
}

fn encode_values<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        if T::DTYPE == "f64" {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        } else {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

/// Serializes `tensors` with `metadata`; `format_version` and `dtype` keys are
/// added automatically.
pub fn to_bytes<T: Scalar>(
    tensors: &BTreeMap<String, &Tensor<T>>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let (dtype, width) = dtype_of::<T>();
    let mut meta = metadata.clone();
    meta.insert("format_version".into(), FORMAT_VERSION.into());
    meta.insert("dtype".into(), T::DTYPE.into());

    let mut header = serde_json::Map::new();
    header.insert("__metadata__".into(), json!(meta));
    let mut offset = 0usize;
    let mut body = Vec::new();
    for (name, t) in tensors {
        if name == "__metadata__" {
            return Err(Error::Invalid("reserved tensor name".into()));
        }
        let n = t.len() * width;
        header
            .insert(name.clone(), json!({ "dtype": dtype, "shape": t.shape(), "data_offsets": [offset, offset + n] }));
        offset += n;
        encode_values(t, &mut body);
    }
    // Keys are inserted in a fixed order and serde_json maps are either sorted
    // or insertion-ordered, so the header is canonical either way.
    let mut head = serde_json::to_vec(&serde_json::Value::Object(header))?;
    head.resize(head.len().div_ceil(8) * 8, b' ');
    let mut bytes = Vec::with_capacity(8 + head.len() + body.len());
    bytes.extend_from_slice(&(head.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&head);
    bytes.extend_from_slice(&body);
    Ok(bytes)
}

pub fn save<T: Scalar>(
    path: &Path,
    tensors: &BTreeMap<String, &Tensor<T>>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = to_bytes(tensors, metadata)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads one of this crate's checkpoints, checking the version tag.
pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let ck = load_weights(path)?;
    match ck.metadata.get("format_version").map(String::as_str) {
        Some(FORMAT_VERSION) => Ok(ck),
        Some(v) => {
            Err(Error::Checkpoint(format!("{}: format version {v}, this build reads {FORMAT_VERSION}", path.display())))
        }
        None => Err(Error::Checkpoint(format!("{}: no format version", path.display()))),
    }
}

/// Reads any safetensors file (e.g. third-party weights), converting every
/// floating-point tensor to `T`.
pub fn load_weights<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.is_file() {
        return Err(Error::Missing { path: path.to_path_buf(), what: "checkpoint file".into() });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e:?}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
    let metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
    let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let values = decode(view.dtype(), view.data()).ok_or_else(|| {
            Error::Checkpoint(format!("{}: tensor {name} has unsupported dtype {:?}", path.display(), view.dtype()))
        })?;
        let data = values.into_iter().map(T::lit).collect();
        tensors.insert(name, Tensor::from_vec(view.shape(), data)?);
    }
    Ok(Checkpoint { tensors, metadata })
}

fn decode(dtype: Dtype, raw: &[u8]) -> Option<Vec<f64>> {
    let v = match dtype {
        Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|c| f64::from(f32::from_bits(u32::from(u16::from_le_bytes([c[0], c[1]])) << 16)))
            .collect(),
        Dtype::F16 => raw.chunks_exact(2).map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]]))).collect(),
        _ => return None,
    };
    Some(v)
}

fn f16_to_f64(h: u16) -> f64 {
    let sign = if h >> 15 == 1 { -1.0 } else { 1.0 };
    let exp = i32::from((h >> 10) & 0x1f);
    let frac = f64::from(h & 0x3ff);
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 if frac == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
    }
}

/// Writes every parameter of `store` under its own name.
pub fn save_store<T: Scalar>(path: &Path, store: &ParamStore<T>, metadata: &BTreeMap<String, String>) -> Result<()> {
    let tensors = store.iter().map(|(n, t)| (n.to_string(), t)).collect();
    save(path, &tensors, metadata)
}

/// Overwrites every parameter of `store` from `ck`, requiring names and shapes
/// to match exactly.
pub fn restore_store<T: Scalar>(store: &mut ParamStore<T>, ck: &Checkpoint<T>) -> Result<()> {
    if ck.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            ck.tensors.len(),
            store.len()
        )));
    }
    let names: Vec<String> = store.names().to_vec();
    for name in names {
        let t = ck.tensor(&name)?;
        store.set(&name, t.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Tensor<f32>, Tensor<f32>) {
        (Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0), Tensor::full(&[4], 2.5))
    }

    #[test]
    fn round_trip_preserves_values_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let (a, b) = sample();
        let tensors = BTreeMap::from([("w".to_string(), &a), ("b".to_string(), &b)]);
        let meta = BTreeMap::from([("seed".to_string(), "7".to_string())]);
        save(&path, &tensors, &meta).unwrap();
        let ck = load::<f32>(&path).unwrap();
        assert_eq!(ck.tensor("w").unwrap(), &a);
        assert_eq!(ck.tensor("b").unwrap(), &b);
        assert_eq!(ck.meta("seed").unwrap(), "7");
        assert_eq!(ck.meta("format_version").unwrap(), FORMAT_VERSION);
        assert_eq!(ck.meta("dtype").unwrap(), "f32");
    }

    #[test]
    fn serialization_is_canonical() {
        let (a, b) = sample();
        let m1 = BTreeMap::from([("x".to_string(), "1".to_string()), ("a".to_string(), "2".to_string())]);
        let t1 = BTreeMap::from([("w".to_string(), &a), ("b".to_string(), &b)]);
        let first = to_bytes(&t1, &m1).unwrap();
        for _ in 0..5 {
            assert_eq!(to_bytes(&t1, &m1.clone()).unwrap(), first);
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("old.safetensors");
        let (a, _) = sample();
        let mut bytes = to_bytes(&BTreeMap::from([("w".to_string(), &a)]), &BTreeMap::new()).unwrap();
        let needle = b"\"format_version\":\"1\"";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[at + needle.len() - 2] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
        assert!(load_weights::<f32>(&path).is_ok());
    }

    #[test]
    fn half_precision_decodes() {
        assert_eq!(f16_to_f64(0x3c00), 1.0);
        assert_eq!(f16_to_f64(0xc000), -2.0);
        assert_eq!(f16_to_f64(0x3555), 0.333_251_953_125);
        assert_eq!(f16_to_f64(0x0001), 2f64.powi(-24));
    }

    #[test]
    fn store_round_trip_requires_matching_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.safetensors");
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::full(&[2], 1.0));
        s.insert("b", Tensor::full(&[1, 3], -1.0));
        save_store(&path, &s, &BTreeMap::new()).unwrap();
        let ck = load::<f64>(&path).unwrap();
        let mut t = ParamStore::<f64>::new();
        t.insert("a", Tensor::zeros(&[2]));
        t.insert("b", Tensor::zeros(&[1, 3]));
        restore_store(&mut t, &ck).unwrap();
        assert_eq!(t.content_hash(), s.content_hash());
        let mut u = ParamStore::<f64>::new();
        u.insert("c", Tensor::zeros(&[2]));
        u.insert("b", Tensor::zeros(&[1, 3]));
        assert!(restore_store(&mut u, &ck).is_err());
    }
}
