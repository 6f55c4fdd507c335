//! Model archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CN3ARCH\0"
//! version  u32
//! hlen     u64      length of the header in bytes
//! header   hlen     UTF-8 JSON: config snapshot, model config, vocabularies,
//!                   seed and the name, shape and trainable flag of every
//!                   parameter in store order
//! blocks            each parameter's values as f64, row-major, in header order
//! ```
//!
//! Saving the same model twice yields the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use cn3::model::{Cn3Model, ModelConfig, Vocabs};
use cn3::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CN3ARCH\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: BTreeMap<String, String>,
    model: ModelConfig,
    vocabs: Vocabs,
    seed: u64,
    params: Vec<ParamEntry>,
}

/// A loaded archive: the run configuration snapshot and the model.
#[derive(Debug)]
pub struct Archive {
    pub config: BTreeMap<String, String>,
    pub model: Cn3Model,
}

pub fn to_bytes(model: &Cn3Model, config: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let header = Header {
        config: config.clone(),
        model: model.config.clone(),
        vocabs: model.vocabs.clone(),
        seed: model.seed,
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Archive(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Archive> {
    let b = &mut bytes;
    if take(b, 8, "magic")? != MAGIC {
        return Err(Error::Archive("not a model archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported archive version {version}")));
    }
    let hlen = u64::from_le_bytes(take(b, 8, "header length")?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| Error::Archive("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(b, hlen, "header")?)?;

    let (mut model, _) = Cn3Model::initialise(header.model, header.vocabs, None, header.seed)?;
    if model.store.len() != header.params.len() {
        return Err(Error::Archive(format!(
            "archive lists {} parameters, the model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let p = model.store.get_mut(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Archive(format!(
                "parameter {} {:?} does not match archived {} {:?}",
                p.name,
                p.value.shape(),
                entry.name,
                entry.shape
            )));
        }
        p.trainable = entry.trainable;
        let raw = take(b, 8 * p.value.numel(), &entry.name)?;
        for (x, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if !b.is_empty() {
        return Err(Error::Archive(format!("{} trailing bytes", b.len())));
    }
    Ok(Archive {
        config: header.config,
        model,
    })
}

pub fn save(path: &Path, model: &Cn3Model, config: &BTreeMap<String, String>) -> Result<()> {
    fs::write(path, to_bytes(model, config)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::Archive(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cn3::synthetic::keyword_task;

    fn model() -> Cn3Model {
        let data = keyword_task(6, 1);
        let mut cfg = ModelConfig::new(cn3::model::Task::Classify);
        cfg.word_dim = 4;
        cfg.hidden_dim = 4;
        cfg.attn_dim = 3;
        cfg.attrs.lstm_hidden = 2;
        let v = Vocabs::build(&cfg, &data, 1).unwrap();
        Cn3Model::initialise(cfg, v, None, 3).unwrap().0
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let m = model();
        let bytes = to_bytes(&m, &BTreeMap::new()).unwrap();
        assert!(from_bytes(&bytes).is_ok());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Archive(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }
}
