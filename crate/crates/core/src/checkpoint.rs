//! Model persistence as safetensors with a validated content hash.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::corpus::RelationSplit;
use crate::encoder::tensor_f64;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tokenizer::Tokenizer;

const FORMAT: &str = "dre-checkpoint-1";

/// Metadata keys, in hashing order.
const KEYS: [&str; 7] = ["format", "backend", "kind", "config", "tokenizer", "split", "labels"];

fn metadata(model: &Model) -> Result<Vec<(&'static str, String)>> {
    Ok(vec![
        ("format", FORMAT.to_string()),
        ("backend", model.config.encoder.backend.as_str().to_string()),
        ("kind", serde_json::to_string(&model.config.kind)?),
        ("config", serde_json::to_string(&model.config)?),
        ("tokenizer", serde_json::to_string(&model.tokenizer)?),
        ("split", serde_json::to_string(&model.split)?),
        ("labels", serde_json::to_string(model.labels())?),
    ])
}

fn tensor_bytes(a: &Array2<f64>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// SHA-256 over metadata values and every tensor (sorted by name).
fn content_hash<'a>(
    meta: &[(&str, String)],
    tensors: impl IntoIterator<Item = (&'a str, Vec<usize>, &'a [u8])>,
) -> String {
    let mut h = Sha256::new();
    for (k, v) in meta {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k.as_bytes());
        h.update((v.len() as u64).to_le_bytes());
        h.update(v.as_bytes());
    }
    let mut tensors: Vec<_> = tensors.into_iter().collect();
    tensors.sort_by(|a, b| a.0.cmp(b.0));
    for (name, shape, data) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in &shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(data);
    }
    hex::encode(h.finalize())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let meta = metadata(model)?;
    let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store
        .iter()
        .map(|(_, name, v)| (name.to_string(), v.shape().to_vec(), tensor_bytes(v)))
        .collect();
    let hash = content_hash(&meta, blobs.iter().map(|(n, s, d)| (n.as_str(), s.clone(), d.as_slice())));
    let views = blobs
        .iter()
        .map(|(n, s, d)| Ok((n.clone(), TensorView::new(Dtype::F64, s.clone(), d)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut info: HashMap<String, String> = meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    info.insert("content_hash".into(), hash);
    safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let ck = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck)?;
    let info = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
    let field = |k: &str| {
        info.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata field `{k}`")))
    };
    if field("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", field("format")?)));
    }
    let meta: Vec<(&str, String)> = KEYS.iter().map(|&k| Ok((k, field(k)?))).collect::<Result<_>>()?;

    let tensors = SafeTensors::deserialize(bytes).map_err(ck)?;
    let views = tensors.tensors();
    if let Some((name, v)) = views.iter().find(|(_, v)| v.dtype() != Dtype::F64) {
        return Err(Error::Checkpoint(format!("{name}: expected F64, found {:?}", v.dtype())));
    }
    let expected = field("content_hash")?;
    let actual = content_hash(&meta, views.iter().map(|(n, v)| (n.as_str(), v.shape().to_vec(), v.data())));
    if expected != actual {
        return Err(Error::Checkpoint(format!(
            "content hash mismatch: recorded {expected}, computed {actual}"
        )));
    }

    let config: ModelConfig = serde_json::from_str(&field("config")?)?;
    if field("backend")? != config.encoder.backend.as_str() {
        return Err(Error::Checkpoint("backend field disagrees with config".into()));
    }
    let tokenizer: Tokenizer = serde_json::from_str::<Tokenizer>(&field("tokenizer")?)?.reindex()?;
    let split: RelationSplit = serde_json::from_str(&field("split")?)?;
    let labels: Vec<String> = serde_json::from_str(&field("labels")?)?;

    let mut sorted = views;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut store = ParamStore::new();
    for (name, view) in sorted {
        let data = tensor_f64(view.dtype(), view.data()).expect("checked F64");
        let value = match view.shape() {
            [r, c] => Array2::from_shape_vec((*r, *c), data),
            s => return Err(Error::Checkpoint(format!("{name}: expected rank 2, found {s:?}"))),
        }
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.insert(name, value);
    }
    Model::bind(config, tokenizer, split, labels, store)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
