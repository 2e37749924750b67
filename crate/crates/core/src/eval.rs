//! Gallery/probe identification: Rank@K and CMC curves.
//!
//! For every identity with `m ≥ 2` images, each image in turn is added to the
//! distractor gallery while the other `m − 1` serve as probes. A gallery is the
//! distractors in their given order followed by the held-in image; equal
//! similarities are broken by that insertion order, so a distractor tied with
//! the true match outranks it.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub id: usize,
    vector: Vec<f64>,
    pub source: String,
}

impl LabeledEmbedding {
    pub fn new(id: usize, vector: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        let norm = libm::sqrt(vector.iter().map(|v| v * v).sum());
        if norm.is_nan() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Protocol(alloc::format!("embedding norm {norm} is not 1")));
        }
        Ok(Self {
            id,
            vector,
            source: source.into(),
        })
    }

    /// Normalizes `vector` first; rejects the zero vector.
    pub fn normalized(id: usize, mut vector: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        let norm = libm::sqrt(vector.iter().map(|v| v * v).sum());
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Protocol(String::from("cannot normalize a zero or non-finite embedding")));
        }
        vector.iter_mut().for_each(|v| *v /= norm);
        Self::new(id, vector, source)
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }
}

/// Cosine similarity of unit vectors.
pub fn similarity(a: &LabeledEmbedding, b: &LabeledEmbedding) -> f64 {
    a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum()
}

/// One probe searched against `distractors ++ [held_in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trial {
    pub probe: usize,
    pub held_in: usize,
}

#[derive(Clone, Debug)]
pub struct Protocol {
    pub probes: Vec<LabeledEmbedding>,
    pub distractors: Vec<LabeledEmbedding>,
    /// Indices into `probes`.
    pub trials: Vec<Trial>,
    /// Identities dropped for having fewer than two images.
    pub excluded_identities: Vec<usize>,
}

pub fn build_protocol(probe_pool: Vec<LabeledEmbedding>, distractors: Vec<LabeledEmbedding>) -> Result<Protocol> {
    let dim = probe_pool.first().or(distractors.first()).map_or(0, |e| e.vector.len());
    if probe_pool.iter().chain(&distractors).any(|e| e.vector.len() != dim) {
        return Err(Error::Protocol(String::from("embeddings differ in dimension")));
    }
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, e) in probe_pool.iter().enumerate() {
        match groups.iter_mut().find(|(id, _)| *id == e.id) {
            Some((_, members)) => members.push(i),
            None => groups.push((e.id, alloc::vec![i])),
        }
    }
    if let Some(d) = distractors.iter().find(|d| groups.iter().any(|(id, _)| *id == d.id)) {
        return Err(Error::Protocol(alloc::format!(
            "distractor {} shares identity {} with the probe pool",
            d.source, d.id
        )));
    }
    let mut trials = Vec::new();
    let mut excluded_identities = Vec::new();
    for (id, members) in &groups {
        if members.len() < 2 {
            excluded_identities.push(*id);
            continue;
        }
        for &held_in in members {
            for &probe in members.iter().filter(|&&p| p != held_in) {
                trials.push(Trial { probe, held_in });
            }
        }
    }
    Ok(Protocol {
        probes: probe_pool,
        distractors,
        trials,
        excluded_identities,
    })
}

impl Protocol {
    pub fn gallery_size(&self) -> usize {
        self.distractors.len() + 1
    }

    /// 1-based position of the true match in each trial's sorted gallery.
    pub fn match_ranks(&self) -> Vec<usize> {
        self.trials
            .iter()
            .map(|t| {
                let probe = &self.probes[t.probe];
                let target = similarity(probe, &self.probes[t.held_in]);
                1 + self
                    .distractors
                    .iter()
                    .filter(|d| similarity(probe, d) >= target)
                    .count()
            })
            .collect()
    }

    pub fn num_probes(&self) -> usize {
        self.trials.len()
    }
}

/// Fraction of trials whose match is within the top `k`; `k` is clamped to the gallery size.
pub fn rank_at_k(protocol: &Protocol, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Protocol(String::from("K must be at least 1")));
    }
    Ok(rate(&protocol.match_ranks(), k.min(protocol.gallery_size())))
}

fn rate(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmcResult {
    /// `ranks[k - 1]` is Rank@k.
    pub ranks: Vec<f64>,
    pub num_probes: usize,
}

impl CmcResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.ranks[k.clamp(1, self.ranks.len()) - 1]
    }
}

pub fn cmc(protocol: &Protocol, k_max: usize) -> Result<CmcResult> {
    if k_max == 0 {
        return Err(Error::Protocol(String::from("K must be at least 1")));
    }
    let ranks = protocol.match_ranks();
    let g = protocol.gallery_size();
    Ok(CmcResult {
        ranks: (1..=k_max).map(|k| rate(&ranks, k.min(g))).collect(),
        num_probes: ranks.len(),
    })
}
