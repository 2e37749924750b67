//! The per-stage jigsaw head: pool, shuffle, encode, attend, decode, score.
//!
//! Training works on whole batches: the `B` puzzle graphs of a batch are laid
//! side by side as a block-diagonal graph with `(C, B·M²)` node features, each
//! sample shuffled by its own permutation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::decoder::{attention_logits_var, decode_var, DecoderParams, DecoderVars, JigsawRecord};
use crate::encoder::{encode_var, tile_rows, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::params::{collect_grads, join, Binding, Parameterized};
use crate::shuffled_graph::{
    check_grid_side, grid_adjacency, normalize_adjacency, sample_permutation, MapKind, Permutation,
    PooledGrid, StageFeatureMap,
};
use crate::tensor::Tensor;

/// Encoder and decoder solving one stage's puzzle.
#[derive(Clone, Debug, PartialEq)]
pub struct StageJigsaw {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl StageJigsaw {
    /// Head for a stage with `in_channels` input and `out_channels` output channels.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        t_enc: usize,
        t_dec: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = EncoderParams::init(in_channels, t_enc, rng)?;
        let decoder = DecoderParams::init(encoder.out_channels(), out_channels, t_dec, rng)?;
        Ok(Self { encoder, decoder })
    }

    pub(crate) fn bind(&self, g: &mut Graph, binding: Binding) -> StageJigsawVars {
        StageJigsawVars {
            encoder: self.encoder.bind(g, binding),
            decoder: self.decoder.bind(g, binding),
        }
    }
}

impl Parameterized for StageJigsaw {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

pub(crate) struct StageJigsawVars {
    encoder: EncoderVars,
    decoder: DecoderVars,
}

impl StageJigsawVars {
    /// All bound variables in `Parameterized::visit` order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.encoder.vars.clone();
        v.extend(self.decoder.all());
        v
    }
}

/// Graph nodes of one batched jigsaw evaluation.
pub(crate) struct BatchJigsaw {
    /// Mean over samples of the per-sample squared Frobenius loss.
    pub loss: Var,
    pub per_sample: Vec<f64>,
    /// `(C, B·M²)` shuffled node attributes.
    pub shuffled: Var,
    /// `(C', B·M²)` decoded grid, unshuffled row-major positions.
    pub reconstruction: Var,
    /// `(C', B·M²)` detached pooled stage output.
    pub target: Tensor,
}

/// `(N, C, M, M)` → `(C, N·M²)` with sample `b`'s cells permuted by `perms[b]`.
fn node_layout_index(n: usize, c: usize, cells: usize, perms: Option<&[Permutation]>) -> Vec<usize> {
    let mut index = Vec::with_capacity(n * c * cells);
    for ch in 0..c {
        for b in 0..n {
            for q in 0..cells {
                let src = perms.map_or(q, |p| p[b].forward()[q]);
                index.push((b * c + ch) * cells + src);
            }
        }
    }
    index
}

pub(crate) fn batch_jigsaw(
    g: &mut Graph,
    head: &StageJigsawVars,
    x_in: Var,
    x_out: Var,
    m: usize,
    perms: &[Permutation],
) -> Result<BatchJigsaw> {
    check_grid_side(m)?;
    let (is, os) = (g.shape(x_in).to_vec(), g.shape(x_out).to_vec());
    let batch = is[0];
    for s in [&is, &os] {
        if s.len() != 4 || s[0] != batch {
            return Err(Error::Shape {
                context: "stage capture batch",
                expected: vec![batch, 0, 0, 0],
                found: s.to_vec(),
            });
        }
        if m > s[2] || m > s[3] {
            return Err(Error::GridTooLarge {
                grid: m,
                height: s[2],
                width: s[3],
            });
        }
    }
    let cells = m * m;
    if perms.len() != batch || perms.iter().any(|p| p.len() != cells) {
        return Err(Error::PermutationSize {
            expected: cells,
            found: perms.first().map_or(0, Permutation::len),
        });
    }
    let (c_in, c_out) = (is[1], os[1]);

    let pooled_in = g.adaptive_avg_pool(x_in, m, m)?;
    let shuffled = g.gather(
        pooled_in,
        node_layout_index(batch, c_in, cells, Some(perms)),
        &[c_in, batch * cells],
    )?;

    // The target is a constant: no gradient flows back through the stage output.
    let frozen_out = g.detach(x_out);
    let pooled_out = g.adaptive_avg_pool(frozen_out, m, m)?;
    let target = g.gather(
        pooled_out,
        node_layout_index(batch, c_out, cells, None),
        &[c_out, batch * cells],
    )?;

    let adjacency = grid_adjacency(m)?;
    let a_hat = g.constant(tile_rows(&normalize_adjacency(adjacency.matrix())?, batch));
    let encoded = encode_var(g, shuffled, a_hat, &head.encoder, cells)?;
    let logits = attention_logits_var(g, encoded, &head.decoder, cells)?;
    let attention = g.masked_softmax(logits, &adjacency.mask(), cells)?;
    let reconstruction = decode_var(g, encoded, attention, &head.decoder, cells)?;

    let total = g.squared_distance(reconstruction, target)?;
    let loss = g.scale(total, 1.0 / batch as f64);

    let (r, t) = (g.value(reconstruction).data(), g.value(target).data());
    let wide = batch * cells;
    let mut per_sample = vec![0.0; batch];
    for ch in 0..c_out {
        for (b, acc) in per_sample.iter_mut().enumerate() {
            for q in 0..cells {
                let k = ch * wide + b * cells + q;
                *acc += (r[k] - t[k]) * (r[k] - t[k]);
            }
        }
    }
    Ok(BatchJigsaw {
        loss,
        per_sample,
        shuffled,
        reconstruction,
        target: g.value(target).clone(),
    })
}

/// Column block `b` of a `(C, B·n)` node layout as a `(C, M, M)` grid.
fn sample_grid(t: &Tensor, b: usize, m: usize) -> Tensor {
    let (c, wide) = (t.shape()[0], t.shape()[1]);
    let cells = m * m;
    Tensor::from_fn(&[c, m, m], |k| t.data()[(k / cells) * wide + b * cells + k % cells])
}

/// Gradients of a single-sample jigsaw loss.
#[derive(Clone, Debug)]
pub struct JigsawGradients {
    /// With respect to the `(C, H, W)` stage input.
    pub input: Tensor,
    /// With respect to every head parameter, keyed `encoder.*` / `decoder.*`.
    pub params: BTreeMap<String, Tensor>,
}

fn check_pair(x_in: &StageFeatureMap, x_out: &StageFeatureMap) -> Result<()> {
    if x_in.kind() != MapKind::StageInput || x_out.kind() != MapKind::StageOutput {
        return Err(Error::Config(String::from(
            "jigsaw expects a stage input and a stage output map",
        )));
    }
    if x_in.stage_index() != x_out.stage_index() {
        return Err(Error::Config(alloc::format!(
            "stage mismatch: input {} vs output {}",
            x_in.stage_index(),
            x_out.stage_index()
        )));
    }
    Ok(())
}

/// Solve one stage puzzle under a given permutation, returning the record and
/// gradients of its loss.
pub fn stage_jigsaw_with_permutation(
    x_in: &StageFeatureMap,
    x_out: &StageFeatureMap,
    m: usize,
    head: &StageJigsaw,
    permutation: &Permutation,
) -> Result<(JigsawRecord, JigsawGradients)> {
    check_pair(x_in, x_out)?;
    let mut g = Graph::new();
    let to_batch = |x: &StageFeatureMap| {
        let s = x.data().shape();
        x.data().clone().reshape(&[1, s[0], s[1], s[2]])
    };
    let xi = g.param(to_batch(x_in)?);
    let xo = g.constant(to_batch(x_out)?);
    let vars = head.bind(&mut g, Binding::Trainable);
    let out = batch_jigsaw(&mut g, &vars, xi, xo, m, core::slice::from_ref(permutation))?;
    let grads = g.backward(out.loss);
    let mut params = BTreeMap::new();
    collect_grads(head, "", &vars.all(), &grads, &mut params);
    let input = grads
        .get_or_zeros(xi, g.shape(xi))
        .reshape(x_in.data().shape())?;
    let record = JigsawRecord {
        stage_index: x_in.stage_index(),
        shuffled_input: PooledGrid::new(sample_grid(g.value(out.shuffled), 0, m))?,
        target: PooledGrid::new(sample_grid(&out.target, 0, m))?,
        reconstruction: sample_grid(g.value(out.reconstruction), 0, m),
        loss: out.per_sample[0],
    };
    Ok((record, JigsawGradients { input, params }))
}

/// Pool both maps, shuffle the input with a fresh permutation, solve, and score.
pub fn run_stage_jigsaw<R: Rng + ?Sized>(
    x_in: &StageFeatureMap,
    x_out: &StageFeatureMap,
    m: usize,
    head: &StageJigsaw,
    rng: &mut R,
) -> Result<JigsawRecord> {
    let permutation = sample_permutation(m, rng)?;
    stage_jigsaw_with_permutation(x_in, x_out, m, head, &permutation).map(|(record, _)| record)
}
