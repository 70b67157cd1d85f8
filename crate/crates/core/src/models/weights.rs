//! Portable weight files.
//!
//! Layout: the magic `DGWT`, a little-endian `u32` header length, a JSON
//! header (model kind, architecture, dtype, tensor names and shapes, payload
//! SHA-256), then the raw little-endian scalars of every tensor in order.
//! `f32` files are widened to `f64` on load with a plain `as` cast, so a
//! 32-bit save of 64-bit weights rounds each value to the nearest `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ClassifierArch, ClassifierModel, DenoiserArch, DenoiserModel, Network};
use crate::numerics::Tensor;

pub const WEIGHT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DGWT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: String,
    arch: serde_json::Value,
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    checksum: String,
}

/// Decoded contents of a weight file.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub model: String,
    pub arch: serde_json::Value,
    pub dtype: Dtype,
    pub tensors: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for (_, t) in &self.tensors {
            for &v in t.data() {
                match self.dtype {
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        let header = Header {
            version: WEIGHT_FORMAT_VERSION,
            model: self.model.clone(),
            arch: self.arch.clone(),
            dtype: self.dtype,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            payload_bytes: payload.len(),
            checksum: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing DGWT magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(&e.to_string()))?;
        if header.version != WEIGHT_FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: header.version, expected: WEIGHT_FORMAT_VERSION });
        }
        let payload = &bytes[8 + hlen..];
        let computed = hex::encode(Sha256::digest(payload));
        if payload.len() != header.payload_bytes || computed != header.checksum {
            return Err(Error::Checksum { expected: header.checksum, computed });
        }
        let width = header.dtype.width();
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let chunk = payload
                .get(offset..offset + n * width)
                .ok_or_else(|| bad("payload shorter than declared tensors"))?;
            offset += n * width;
            let data = chunk
                .chunks_exact(width)
                .map(|c| match header.dtype {
                    Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                    Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                })
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if offset != payload.len() {
            return Err(bad("trailing payload bytes"));
        }
        Ok(Self { model: header.model, arch: header.arch, dtype: header.dtype, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

/// A model restored from disk.
#[derive(Clone, Debug)]
pub enum StoredModel {
    Denoiser(DenoiserModel),
    Classifier(ClassifierModel),
}

impl StoredModel {
    pub fn into_denoiser(self) -> Result<DenoiserModel> {
        match self {
            StoredModel::Denoiser(m) => Ok(m),
            StoredModel::Classifier(_) => Err(Error::InvalidParameter("expected denoiser weights".into())),
        }
    }

    pub fn into_classifier(self) -> Result<ClassifierModel> {
        match self {
            StoredModel::Classifier(m) => Ok(m),
            StoredModel::Denoiser(_) => Err(Error::InvalidParameter("expected classifier weights".into())),
        }
    }
}

fn named(model: &impl Network) -> Vec<(String, Tensor)> {
    model.param_names().into_iter().zip(model.params().iter().cloned()).collect()
}

pub fn save_weights(model: &StoredModel, path: &Path, dtype: Dtype) -> Result<()> {
    let file = match model {
        StoredModel::Denoiser(m) => WeightFile {
            model: "denoiser".into(),
            arch: serde_json::to_value(m.arch())?,
            dtype,
            tensors: named(m),
        },
        StoredModel::Classifier(m) => WeightFile {
            model: "classifier".into(),
            arch: serde_json::to_value(m.arch())?,
            dtype,
            tensors: named(m),
        },
    };
    file.write(path)
}

pub fn load_weights(path: &Path) -> Result<StoredModel> {
    let file = WeightFile::read(path)?;
    let params: Vec<Tensor> = file.tensors.into_iter().map(|(_, t)| t).collect();
    match file.model.as_str() {
        "denoiser" => {
            let arch: DenoiserArch = serde_json::from_value(file.arch)?;
            Ok(StoredModel::Denoiser(DenoiserModel::from_params(arch, params)?))
        }
        "classifier" => {
            let arch: ClassifierArch = serde_json::from_value(file.arch)?;
            Ok(StoredModel::Classifier(ClassifierModel::from_params(arch, params)?))
        }
        other => Err(Error::Format { path: path.to_path_buf(), reason: format!("unknown model kind {other}") }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, standard_normal, Purpose};

    fn random_denoiser() -> DenoiserModel {
        let mut m = DenoiserModel::new(DenoiserArch::tiny(3), 1).unwrap();
        let mut rng = rng_for(1, Purpose::Init, 7);
        for p in m.params_mut() {
            *p = standard_normal(&mut rng, p.shape());
        }
        m
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dgw");
        let m = random_denoiser();
        save_weights(&StoredModel::Denoiser(m.clone()), &path, Dtype::F64).unwrap();
        let back = load_weights(&path).unwrap().into_denoiser().unwrap();
        assert_eq!(back.params(), m.params());
        let x = standard_normal(&mut rng_for(2, Purpose::Sampling, 0), &[3, 4, 4]);
        let (a, b) = (m.predict_noise(&x, 0.3).unwrap(), back.predict_noise(&x, 0.3).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dgw");
        save_weights(&StoredModel::Denoiser(random_denoiser()), &path, Dtype::F64).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dgw");
        let m = random_denoiser();
        save_weights(&StoredModel::Denoiser(m), &path, Dtype::F64).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let needle = b"\"version\":1";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[pos + needle.len() - 1] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::VersionMismatch { found: 9, .. })));
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Format { .. })));
        assert!(matches!(load_weights(&dir.path().join("missing")), Err(Error::Missing(_))));
    }

    #[test]
    fn f32_file_loads_as_rounded_f64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dgw");
        let m = ClassifierModel::new(ClassifierArch::tiny(3, 3), 2).unwrap();
        save_weights(&StoredModel::Classifier(m.clone()), &path, Dtype::F32).unwrap();
        let back = load_weights(&path).unwrap().into_classifier().unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, (*x as f32) as f64);
            }
        }
        let x = standard_normal(&mut rng_for(3, Purpose::Sampling, 0), &[3, 4, 4]);
        let (la, lb) = (m.logits(&x).unwrap(), back.logits(&x).unwrap());
        assert!(la.sub(&lb).unwrap().max_abs() < 1e-5);
        assert!(load_weights(&path).unwrap().into_denoiser().is_err());
    }
}
