//! Binary checkpoints.
//!
//! Layout: the magic `DUETTCKP`, a little-endian `u32` format version, a
//! little-endian `u32` header length, the JSON header, then every parameter
//! as little-endian `f32` in manifest order. Manifest offsets are byte
//! offsets from the start of the payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use duett_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{NormStats, Vocabulary};
use crate::model::{DuettModel, HeadSpec, ModelConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DUETTCKP";
pub const FORMAT_VERSION: u32 = 1;
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Everything besides the weights needed to reuse a model on new data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocabulary: Vocabulary,
    pub norm: Option<NormStats>,
    /// Resolved run settings, for provenance.
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config_hash: String,
    model: ModelConfig,
    head: Option<HeadSpec>,
    meta: CheckpointMeta,
    params: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the model configuration, head and settings.
pub fn config_hash(model: &ModelConfig, head: Option<&HeadSpec>, settings: &BTreeMap<String, String>) -> Result<String> {
    let text = serde_json::to_string(&(model, head, settings))?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn save<T: Real, W: Write>(model: &DuettModel<T>, meta: &CheckpointMeta, mut out: W) -> Result<()> {
    let head = model.cls.as_ref().map(|(s, _)| s.clone());
    let mut offset = 0u64;
    let params = model
        .store
        .entries()
        .iter()
        .map(|e| {
            let entry = ManifestEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset,
            };
            offset += 4 * e.value.numel() as u64;
            entry
        })
        .collect();
    let header = Header {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash(&model.config, head.as_ref(), &meta.settings)?,
        model: model.config.clone(),
        head,
        meta: meta.clone(),
        params,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for e in model.store.entries() {
        for v in e.value.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load<T: Real, R: Read>(mut input: R) -> Result<(DuettModel<T>, CheckpointMeta)> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = read_u32(&mut input)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = read_u32(&mut input)? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema version {}", header.schema_version)));
    }
    let expected = config_hash(&header.model, header.head.as_ref(), &header.meta.settings)?;
    if expected != header.config_hash {
        return Err(bad("config hash does not match the header contents".into()));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;

    let mut model = DuettModel::<T>::new(&header.model, 0)?;
    if let Some(spec) = header.head.clone() {
        model = model.with_head(spec, 0)?;
    }
    if model.store.len() != header.params.len() {
        return Err(bad(format!(
            "manifest lists {} parameters, configuration defines {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let mut next = 0u64;
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let current = model.store.entry(id);
        if current.name != entry.name || current.value.shape() != entry.shape.as_slice() {
            return Err(bad(format!("manifest entry {} does not match parameter {}", entry.name, current.name)));
        }
        if entry.offset != next {
            return Err(bad(format!("offset of {} is {}, expected {next}", entry.name, entry.offset)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let bytes = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| bad(format!("payload truncated in {}", entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        model.store.set(id, Tensor::new(entry.shape.clone(), data)?)?;
        next += 4 * n as u64;
    }
    if next as usize != payload.len() {
        return Err(bad(format!("{} trailing payload bytes", payload.len() - next as usize)));
    }
    Ok((model, header.meta))
}

pub fn save_file<T: Real>(model: &DuettModel<T>, meta: &CheckpointMeta, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    save(model, meta, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_file<T: Real>(path: &std::path::Path) -> Result<(DuettModel<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    load(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DuettModel<f32> {
        let mut cfg = ModelConfig::new(2, 3, 1);
        cfg.d = 4;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.ffn_hidden = 8;
        DuettModel::new(&cfg, 3)
            .unwrap()
            .with_head(HeadSpec { tasks: vec!["y".into()], linear: false }, 3)
            .unwrap()
    }

    fn meta() -> CheckpointMeta {
        let mut settings = BTreeMap::new();
        settings.insert("seed".to_string(), "3".to_string());
        CheckpointMeta {
            vocabulary: Vocabulary::from(vec!["a".to_string(), "b".to_string()]),
            norm: None,
            settings,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut first = Vec::new();
        save(&model(), &meta(), &mut first).unwrap();
        let (loaded, m) = load::<f32, _>(first.as_slice()).unwrap();
        assert_eq!(m, meta());
        let mut second = Vec::new();
        save(&loaded, &m, &mut second).unwrap();
        assert_eq!(first, second);
        // through the 64-bit representation as well
        let (wide, m) = load::<f64, _>(first.as_slice()).unwrap();
        let mut third = Vec::new();
        save(&wide, &m, &mut third).unwrap();
        assert_eq!(first, third);
    }

    #[test]
    fn manifest_is_contiguous() {
        let mut buf = Vec::new();
        save(&model(), &meta(), &mut buf).unwrap();
        let len = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&buf[16..16 + len]).unwrap();
        let mut next = 0;
        for e in &header.params {
            assert_eq!(e.offset, next);
            next += 4 * e.shape.iter().product::<usize>() as u64;
        }
        assert_eq!(next as usize, buf.len() - 16 - len);
        assert_eq!(header.config_hash.len(), 64);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        save(&model(), &meta(), &mut buf).unwrap();
        assert!(load::<f32, _>(&buf[..buf.len() - 4]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(load::<f32, _>(bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut extra = buf.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(load::<f32, _>(extra.as_slice()).is_err());
    }
}
