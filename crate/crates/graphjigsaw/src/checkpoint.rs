//! Single-file checkpoints: magic, version, a JSON header, then raw little-endian f64 data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use graphjigsaw_core::params::Parameterized;
use graphjigsaw_core::training::GraphJigsawModel;
use graphjigsaw_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{AppError, AppResult};

const MAGIC: &[u8; 8] = b"GJCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
    Momentum,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

/// Every random stream is derived from the seed and the position in training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub iteration: u64,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: Config,
    identities: Vec<String>,
    with_heads: bool,
    iteration: u64,
    epochs_completed: usize,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub identities: Vec<String>,
    pub iteration: u64,
    pub epochs_completed: usize,
    pub model: GraphJigsawModel,
    pub momentum: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.config.train.seed,
            iteration: self.iteration,
            epoch: self.epochs_completed,
        }
    }
}

fn bad(msg: impl Into<String>) -> AppError {
    AppError::Checkpoint(msg.into())
}

pub fn save(path: &Path, ck: &Checkpoint) -> AppResult<()> {
    let mut entries = Vec::new();
    let mut blobs: Vec<&Tensor> = Vec::new();
    for (name, t) in ck.model.named_params("") {
        entries.push(TensorEntry {
            name,
            kind: TensorKind::Param,
            shape: t.shape().to_vec(),
        });
        blobs.push(t);
    }
    for (name, t) in ck.model.named_buffers("") {
        entries.push(TensorEntry {
            name,
            kind: TensorKind::Buffer,
            shape: t.shape().to_vec(),
        });
        blobs.push(t);
    }
    for (name, t) in &ck.momentum {
        entries.push(TensorEntry {
            name: name.clone(),
            kind: TensorKind::Momentum,
            shape: t.shape().to_vec(),
        });
        blobs.push(t);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: ck.config.clone(),
        identities: ck.identities.clone(),
        with_heads: ck.model.heads.is_some(),
        iteration: ck.iteration,
        epochs_completed: ck.epochs_completed,
        rng: ck.rng_state(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 20 + blobs.iter().map(|t| t.len() * 8).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in blobs {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(AppError::io(&tmp))?;
    f.write_all(&buf).map_err(AppError::io(&tmp))?;
    f.sync_all().map_err(AppError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(AppError::io(path))
}

pub fn load(path: &Path) -> AppResult<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(AppError::io(path))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;

    let mut cursor = 20 + hlen;
    let mut params = BTreeMap::new();
    let mut momentum = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(cursor..cursor + 8 * n)
            .ok_or_else(|| bad(format!("truncated data for {}", e.name)))?;
        cursor += 8 * n;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data)?;
        match e.kind {
            TensorKind::Momentum => momentum.insert(e.name, t),
            _ => params.insert(e.name, t),
        };
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let config = header.config;
    let heads = header
        .with_heads
        .then_some((config.jigsaw.t_enc, config.jigsaw.t_dec));
    let mut model = GraphJigsawModel::init(
        config.backbone(header.identities.len()),
        heads,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    model.load_from("", &params)?;
    Ok(Checkpoint {
        config,
        identities: header.identities,
        iteration: header.iteration,
        epochs_completed: header.epochs_completed,
        model,
        momentum,
    })
}
