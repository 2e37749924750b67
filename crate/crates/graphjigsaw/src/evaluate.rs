//! Embedding extraction, embedding dumps, and identification reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use graphjigsaw_core::eval::{build_protocol, cmc, CmcResult, LabeledEmbedding, Protocol};
use graphjigsaw_core::training::GraphJigsawModel;
use crate::data::{augment_eval, load_image, stack, Manifest, Sample};
use crate::error::{AppError, AppResult};

const EMBED_BATCH: usize = 64;

/// One dumped embedding: image path, identity name, unit vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub path: String,
    pub identity: String,
    pub vector: Vec<f64>,
}

pub fn embed_samples(
    model: &GraphJigsawModel,
    manifest: &Manifest,
    samples: &[&Sample],
    resize: usize,
) -> AppResult<Vec<EmbeddingRecord>> {
    let r = model.backbone.config().input_resolution;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EMBED_BATCH) {
        let images = chunk
            .iter()
            .map(|s| load_image(&manifest.full_path(s), resize).map(|img| augment_eval(&img, r)))
            .collect::<AppResult<Vec<_>>>()?;
        let e = model.embed(&stack(images, r))?;
        let d = e.shape()[1];
        for (s, row) in chunk.iter().zip(e.data().chunks(d)) {
            out.push(EmbeddingRecord {
                path: s.path.to_string_lossy().into_owned(),
                identity: manifest.identities[s.identity].clone(),
                vector: row.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Tab-separated `path identity v1 … vd`, each component with a sign and 8 decimals.
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> AppResult<()> {
    let mut s = String::new();
    for r in records {
        if r.path.contains(['\t', '\n']) || r.identity.contains(['\t', '\n']) {
            return Err(AppError::Data(format!("cannot dump {:?}: tab or newline in name", r.path)));
        }
        s.push_str(&r.path);
        s.push('\t');
        s.push_str(&r.identity);
        for v in &r.vector {
            write!(s, "\t{v:+.8}").expect("string write");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(AppError::io(path))
}

pub fn read_embeddings(path: &Path) -> AppResult<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path).map_err(AppError::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut fields = line.split('\t');
            let (Some(p), Some(id)) = (fields.next(), fields.next()) else {
                return Err(AppError::Data(format!("{}:{}: expected path and identity", path.display(), n + 1)));
            };
            let vector = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| AppError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            Ok(EmbeddingRecord {
                path: p.to_string(),
                identity: id.to_string(),
                vector,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Rank@k for each requested k.
    pub ranks: BTreeMap<usize, f64>,
    pub num_probes: usize,
    pub excluded_identities: Vec<String>,
    pub cmc: CmcResult,
}

impl EvalReport {
    /// `{rank<k>…, num_probes}` exactly.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, v) in &self.ranks {
            m.insert(format!("rank{k}"), serde_json::json!(v));
        }
        m.insert("num_probes".into(), serde_json::json!(self.num_probes));
        serde_json::Value::Object(m)
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("k,identification_rate\n");
        for (i, r) in self.cmc.ranks.iter().enumerate() {
            writeln!(s, "{},{r:.6}", i + 1).expect("string write");
        }
        s
    }
}

/// Identities are matched by name across the two record sets.
pub fn protocol_from_records(probes: &[EmbeddingRecord], distractors: &[EmbeddingRecord]) -> AppResult<(Protocol, Vec<String>)> {
    let mut names: Vec<String> = Vec::new();
    let mut id_of = |name: &str| match names.iter().position(|n| n == name) {
        Some(i) => i,
        None => {
            names.push(name.to_string());
            names.len() - 1
        }
    };
    let mut convert = |rs: &[EmbeddingRecord]| -> AppResult<Vec<LabeledEmbedding>> {
        rs.iter()
            .map(|r| Ok(LabeledEmbedding::normalized(id_of(&r.identity), r.vector.clone(), r.path.clone())?))
            .collect()
    };
    let p = convert(probes)?;
    let d = convert(distractors)?;
    let protocol = build_protocol(p, d)?;
    Ok((protocol, names))
}

pub fn evaluate(probes: &[EmbeddingRecord], distractors: &[EmbeddingRecord], ks: &[usize]) -> AppResult<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(AppError::Config("K values must be positive".into()));
    }
    let (protocol, names) = protocol_from_records(probes, distractors)?;
    if protocol.num_probes() == 0 {
        return Err(AppError::Data("no identity in the probe set has two or more images".into()));
    }
    let excluded: Vec<String> = protocol.excluded_identities.iter().map(|&i| names[i].clone()).collect();
    if !excluded.is_empty() {
        log::warn!("{} probe identities with fewer than 2 images were skipped", excluded.len());
    }
    let curve = cmc(&protocol, protocol.gallery_size())?;
    let ranks = ks.iter().map(|&k| (k, curve.rank(k))).collect();
    Ok(EvalReport {
        ranks,
        num_probes: protocol.num_probes(),
        excluded_identities: excluded,
        cmc: curve,
    })
}
