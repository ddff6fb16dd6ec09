//! Checkpoint files.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, 32-byte SHA-256
//! of everything after it, the JSON manifest, then raw little-endian `f64`
//! tensor data. The manifest lists every tensor's name, shape, dtype, byte
//! offset (relative to the data section) and byte length, plus the training
//! configuration, vocabulary, step counter and the seed all per-step random
//! streams are derived from.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::Array;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::tokenizer::Tokenizer;
use crate::trainer::{TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"TCPOOL\x00\x01";
const HEADER_LEN: usize = 8 + 8 + 32;
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

/// Per-step generators are ChaCha8 streams keyed by SplitMix64 hashes of
/// `(seed, stream id, step)`; recording the seed and step pins them all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub next_step_stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub vocab: Tokenizer,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Serializes a training state to bytes.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    let groups: [(&str, Vec<&Array>); 3] = [
        ("param", state.model.params.iter().map(|p| &p.value).collect()),
        ("adam_m", state.adam_m.iter().collect()),
        ("adam_v", state.adam_v.iter().collect()),
    ];
    let names = state.model.params.names();
    for (prefix, arrays) in groups {
        if arrays.len() != names.len() {
            return Err(Error::Internal(format!("{prefix} has {} tensors, expected {}", arrays.len(), names.len())));
        }
        for (name, a) in names.iter().zip(arrays) {
            let offset = data.len() as u64;
            for v in a.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: format!("{prefix}/{name}"),
                shape: a.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                length: data.len() as u64 - offset,
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        vocab: state.model.tokenizer.clone(),
        step: state.step as u64,
        rng: RngState {
            algorithm: "chacha8".into(),
            seed: state.config.seed,
            next_step_stream: rng::derive(state.config.seed, &[rng::STREAM_TRAIN_LOOP, state.step as u64]),
        },
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Internal(format!("manifest: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hasher.update(&data);
    let digest = hasher.finalize();
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses bytes produced by [`encode`]; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "missing checkpoint header"));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if json_len > body.len() {
        return Err(corrupt(path, "manifest length exceeds file size"));
    }
    let digest = Sha256::digest(body);
    if digest.as_slice() != &bytes[16..48] {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..json_len]).map_err(|e| corrupt(path, format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {}", manifest.format_version)));
    }
    let data = &body[json_len..];

    // the configuration determines every tensor's name and shape
    let mut model = Model::init(manifest.config.model, manifest.vocab.clone(), &mut rng::stream(0, &[]))
        .map_err(|e| corrupt(path, format!("config: {e}")))?;
    let names = model.params.names();
    let expected: Vec<(String, Vec<usize>)> = ["param", "adam_m", "adam_v"]
        .iter()
        .flat_map(|prefix| {
            model
                .params
                .iter()
                .map(move |p| (format!("{prefix}/{}", p.name), p.value.shape().to_vec()))
        })
        .collect();
    if manifest.tensors.len() != expected.len() {
        return Err(corrupt(
            path,
            format!("{} tensors listed, configuration needs {}", manifest.tensors.len(), expected.len()),
        ));
    }
    let mut arrays = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape || entry.dtype != "f64" {
            return Err(corrupt(
                path,
                format!("tensor {} {:?} {} does not match expected {name} {shape:?}", entry.name, entry.shape, entry.dtype),
            ));
        }
        let count: usize = shape.iter().product();
        let (start, len) = (entry.offset as usize, entry.length as usize);
        if len != count * 8 || start.checked_add(len).is_none_or(|end| end > data.len()) {
            return Err(corrupt(path, format!("tensor {name} lies outside the data section")));
        }
        let values = data[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(Array::new(shape.clone(), values)?);
    }
    let n = names.len();
    let adam_v = arrays.split_off(2 * n);
    let adam_m = arrays.split_off(n);
    model.params.set_values(&arrays)?;
    Ok(TrainState {
        config: manifest.config,
        model,
        step: manifest.step as usize,
        adam_m,
        adam_v,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
