//! Binary weight and tensor files.
//!
//! Layout: `b"SHVW"`, format version (`u32` LE), header length (`u64` LE),
//! UTF-8 JSON header, then the payload of little-endian `f32` tensors in
//! manifest order. Byte offsets in the manifest are relative to the start
//! of the payload.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"SHVW";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// Architecture; absent in single-tensor files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    /// Whether normalization layers have been folded away.
    #[serde(default)]
    pub fused: bool,
    pub tensors: Vec<TensorEntry>,
}

fn encode(header: &Header, tensors: &[Tensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let payload: u64 = header.tensors.iter().map(|e| e.byte_len).sum();
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.to_vec_f32() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn manifest<'a>(named: impl Iterator<Item = (String, &'a Tensor)>) -> Vec<TensorEntry> {
    let mut offset = 0u64;
    named
        .map(|(name, t)| {
            let byte_len = 4 * t.numel() as u64;
            let e = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_offset: offset,
                byte_len,
            };
            offset += byte_len;
            e
        })
        .collect()
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serialized model: config, fusion state, and every parameter and buffer.
pub fn model_bytes(model: &Model) -> Result<Vec<u8>> {
    let named = model.named_tensors();
    let header = Header {
        config: Some(model.config.clone()),
        fused: model.is_fused(),
        tensors: manifest(named.iter().map(|(n, t, _)| (n.clone(), t))),
    };
    let tensors: Vec<Tensor> = named.into_iter().map(|(_, t, _)| t).collect();
    encode(&header, &tensors)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &model_bytes(model)?)
}

/// Parses the fixed prefix and header, checking the manifest's own
/// consistency and that the payload is fully present.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREFIX_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        return Err(Error::Truncated {
            what: "file prefix",
            expected: PREFIX_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = (bytes.len() - PREFIX_LEN) as u64;
    if hlen > rest {
        return Err(Error::Truncated {
            what: "header",
            expected: hlen,
            found: rest,
        });
    }
    let end = PREFIX_LEN + hlen as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..end])?;
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        let mismatch = |detail: String| Error::ManifestMismatch {
            name: e.name.clone(),
            detail,
        };
        if e.dtype != "f32" {
            return Err(mismatch(format!("dtype {:?} (only f32 is stored)", e.dtype)));
        }
        let numel = e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
        if numel.and_then(|n| n.checked_mul(4)) != Some(e.byte_len) {
            return Err(mismatch(format!("{} bytes for shape {:?}", e.byte_len, e.shape)));
        }
        if e.byte_offset != expected_offset {
            return Err(mismatch(format!("offset {} where {expected_offset} was expected", e.byte_offset)));
        }
        expected_offset += e.byte_len;
    }
    let payload = &bytes[end..];
    if (payload.len() as u64) < expected_offset {
        return Err(Error::Truncated {
            what: "payload",
            expected: expected_offset,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected_offset {
        return Err(Error::Invalid(format!(
            "{} trailing bytes after the payload",
            payload.len() as u64 - expected_offset
        )));
    }
    Ok((header, payload))
}

fn decode(entry: &TensorEntry, payload: &[u8]) -> Result<Tensor> {
    let raw = &payload[entry.byte_offset as usize..(entry.byte_offset + entry.byte_len) as usize];
    let v = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(v, &entry.shape)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, payload) = read_header(bytes)?;
    let config = header
        .config
        .ok_or_else(|| Error::Invalid("file holds no model config".into()))?;
    config.validate()?;
    let mut model = Model::build(&config, &mut Rng::new(0))?;
    if header.fused {
        model = model.fuse_all_bn()?;
    }
    // Every expected tensor must be listed with its exact shape before any
    // payload byte is interpreted.
    let expected = model.named_tensors();
    let entries: HashMap<&str, &TensorEntry> = header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, t, _) in &expected {
        match entries.get(name.as_str()) {
            None => {
                return Err(Error::ManifestMismatch {
                    name: name.clone(),
                    detail: "missing from manifest".into(),
                })
            }
            Some(e) if e.shape != t.shape() => {
                return Err(Error::ManifestMismatch {
                    name: name.clone(),
                    detail: format!("shape {:?}, architecture needs {:?}", e.shape, t.shape()),
                })
            }
            Some(_) => {}
        }
    }
    if header.tensors.len() != expected.len() {
        let known: Vec<&str> = expected.iter().map(|(n, _, _)| n.as_str()).collect();
        let extra = header
            .tensors
            .iter()
            .find(|e| !known.contains(&e.name.as_str()))
            .map_or_else(|| "duplicate entry".to_string(), |e| e.name.clone());
        return Err(Error::ManifestMismatch {
            name: extra,
            detail: "not part of the architecture".into(),
        });
    }
    let mut failure = None;
    model.visit_mut("", &mut |name, t, _| {
        if failure.is_some() {
            return;
        }
        match decode(entries[name], payload) {
            Ok(v) => *t = v,
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_bytes(&std::fs::read(path)?)
}

/// Single-tensor file, stored under the name `tensor`.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let t = t.to_dtype(DType::F32);
    let header = Header {
        config: None,
        fused: false,
        tensors: manifest(std::iter::once(("tensor".to_string(), &t))),
    };
    encode(&header, &[t])
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &tensor_bytes(t)?)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let (header, payload) = read_header(bytes)?;
    match header.tensors.as_slice() {
        [entry] => decode(entry, payload),
        other => Err(Error::Invalid(format!("expected one tensor, file has {}", other.len()))),
    }
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::build(&ModelConfig::tiny(), &mut Rng::new(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = tiny();
        let bytes = model_bytes(&m).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        for ((na, ta, _), (nb, tb, _)) in m.named_tensors().iter().zip(back.named_tensors().iter()) {
            assert_eq!(na, nb);
            let (a, b): (Vec<u32>, Vec<u32>) = (
                ta.to_vec_f32().iter().map(|v| v.to_bits()).collect(),
                tb.to_vec_f32().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(a, b, "{na}");
        }
        assert_eq!(model_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn fused_models_round_trip() {
        let f = tiny().fuse_all_bn().unwrap();
        let back = model_from_bytes(&model_bytes(&f).unwrap()).unwrap();
        assert!(back.is_fused());
        assert_eq!(model_bytes(&back).unwrap(), model_bytes(&f).unwrap());
    }

    #[test]
    fn tensor_files() {
        let t = Rng::new(1).normal_tensor(&[1, 3, 4, 4], 1.0);
        let back = tensor_from_bytes(&tensor_bytes(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.to_vec_f32(), t.to_vec_f32());
        assert!(model_from_bytes(&tensor_bytes(&t).unwrap()).is_err());
    }

    #[test]
    fn distinct_errors() {
        let bytes = model_bytes(&tiny()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(Error::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            model_from_bytes(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            model_from_bytes(cut),
            Err(Error::Truncated { what: "payload", .. })
        ));
        assert!(matches!(model_from_bytes(&bytes[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.shw");
        std::fs::write(&p, b"old").unwrap();
        save_model(&tiny(), &p).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..4], b"SHVW");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
