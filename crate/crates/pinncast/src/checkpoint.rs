//! Checkpoint file format.
//!
//! Layout: the magic string `PINNCAST1`, a little-endian u32 header length,
//! a JSON header (format version, model config, parameter names and shapes
//! in order), then the parameter values as consecutive little-endian f32
//! blobs in header order. Decoding never panics on malformed input.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::{Error, Result};

pub const MAGIC: &[u8; 9] = b"PINNCAST1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

/// A parameter decoded from a checkpoint.
#[derive(Debug, Clone)]
pub struct DecodedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode(cfg: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        version: 1,
        model: cfg.clone(),
        params: store
            .iter()
            .map(|(_, name, t)| ParamMeta {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

/// Parses a checkpoint byte stream into its config and parameters,
/// validating magic, header bounds, declared shapes, and blob length.
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, Vec<DecodedParam>)> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Format("checkpoint shorter than its fixed header".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic string".into()));
    }
    let mut len_bytes = [0u8; 4];
    len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 4]);
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let header_start = MAGIC.len() + 4;
    let blob_start = header_start
        .checked_add(header_len)
        .ok_or_else(|| Error::Length("header length overflows".into()))?;
    if blob_start > bytes.len() {
        return Err(Error::Length(format!(
            "header wants {header_len} bytes, {} available",
            bytes.len() - header_start
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..blob_start])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    header.model.validate()?;

    let mut expected: usize = 0;
    let mut counts = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let mut numel: usize = 1;
        for &d in &p.shape {
            if d == 0 {
                return Err(Error::Format(format!("parameter {} has a zero extent", p.name)));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Length("parameter shape overflows".into()))?;
        }
        counts.push(numel);
        expected = expected
            .checked_add(numel)
            .ok_or_else(|| Error::Length("parameter sizes overflow".into()))?;
    }
    let blob = &bytes[blob_start..];
    let expected_bytes = expected
        .checked_mul(4)
        .ok_or_else(|| Error::Length("blob size overflows".into()))?;
    if blob.len() != expected_bytes {
        return Err(Error::Length(format!(
            "blob has {} bytes, header declares {expected_bytes}",
            blob.len()
        )));
    }

    let mut params = Vec::with_capacity(header.params.len());
    let mut offset = 0usize;
    for (meta, numel) in header.params.into_iter().zip(counts) {
        let raw = &blob[offset * 4..(offset + numel) * 4];
        offset += numel;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("parameter {} is not finite", meta.name)));
        }
        params.push(DecodedParam {
            name: meta.name,
            shape: meta.shape,
            values,
        });
    }
    Ok((header.model, params))
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let bytes = encode(&model.cfg, &model.store)?;
    crate::write_file(path, bytes)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint; every stored parameter must match a
/// model parameter by name and size.
pub fn load(path: &Path) -> Result<Model> {
    let bytes = crate::read_file(path)?;
    let (cfg, params) = decode(&bytes)?;
    let mut model = Model::new(cfg, 0)?;
    if params.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model wants {}",
            params.len(),
            model.store.len()
        )));
    }
    for p in params {
        let values: Vec<f64> = p.values.iter().map(|&v| v as f64).collect();
        model.store.set_by_name(&p.name, &values)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odesolve::OdeMethod;

    fn tiny_model() -> Model {
        let mut cfg = ModelConfig::new(vec!["t2m".into(), "u10".into(), "v10".into()], 8, 8);
        cfg.embed_dim = 8;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.ode.method = OdeMethod::Rk4Fixed;
        Model::new(cfg, 3).unwrap()
    }

    #[test]
    fn roundtrip_preserves_config_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model();
        save(&path, &model).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        for ((_, _, a), (_, _, b)) in model.store.iter().zip(loaded.store.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let model = tiny_model();
        let a = encode(&model.cfg, &model.store).unwrap();
        let b = encode(&model.cfg, &model.store).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[..9], MAGIC);
    }

    #[test]
    fn rejects_corrupt_input() {
        let model = tiny_model();
        let bytes = encode(&model.cfg, &model.store).unwrap();

        assert!(matches!(decode(&bytes[..5]), Err(Error::Format(_))));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Format(_))));

        let truncated = &bytes[..bytes.len() - 4];
        assert!(matches!(decode(truncated), Err(Error::Length(_))));

        let mut huge_header = bytes.clone();
        huge_header[9..13].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&huge_header), Err(Error::Length(_))));
    }
}
