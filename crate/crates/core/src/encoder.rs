//! Jigsaw encoding: iterated normalized neighbor aggregation over the shuffled graph.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{bind, fan_in_uniform, join, Binding, Parameterized};
use crate::shuffled_graph::{normalize_adjacency, ShuffledGraph};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl EncoderParams {
    /// `iterations` layers mapping `in_channels → in_channels`.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, iterations: usize, rng: &mut R) -> Result<Self> {
        Self::init_with_widths(&vec![in_channels; iterations + 1], rng)
    }

    /// Layers with widths `d_0, …, d_T`.
    pub fn init_with_widths<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(String::from(
                "encoder needs at least one iteration and positive widths",
            )));
        }
        let weights = widths
            .windows(2)
            .map(|w| fan_in_uniform(&[w[1], w[0]], w[0], rng))
            .collect();
        let biases = widths[1..].iter().map(|&d| Tensor::zeros(&[d])).collect();
        Ok(Self { weights, biases })
    }

    pub fn from_parts(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config(String::from("encoder layer count mismatch")));
        }
        for (t, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rank() != 2 || b.shape() != [w.shape()[0]] {
                return Err(Error::Shape {
                    context: "encoder layer",
                    expected: vec![w.shape()[0]],
                    found: b.shape().to_vec(),
                });
            }
            if t > 0 && weights[t - 1].shape()[0] != w.shape()[1] {
                return Err(Error::Shape {
                    context: "encoder layer chaining",
                    expected: vec![weights[t - 1].shape()[0]],
                    found: vec![w.shape()[1]],
                });
            }
        }
        Ok(Self { weights, biases })
    }

    pub fn iterations(&self) -> usize {
        self.weights.len()
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights[self.weights.len() - 1].shape()[0]
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub(crate) fn bind(&self, g: &mut Graph, binding: Binding) -> EncoderVars {
        let mut vars = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            vars.push(bind(g, w, binding));
            vars.push(bind(g, b, binding));
        }
        EncoderVars { vars }
    }
}

impl Parameterized for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (t, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            f(join(prefix, &alloc::format!("layer{t}.weight")), w);
            f(join(prefix, &alloc::format!("layer{t}.bias")), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (t, (w, b)) in self.weights.iter_mut().zip(&mut self.biases).enumerate() {
            f(join(prefix, &alloc::format!("layer{t}.weight")), w);
            f(join(prefix, &alloc::format!("layer{t}.bias")), b);
        }
    }
}

/// Encoder parameters bound on a graph, interleaved `[w0, b0, w1, b1, …]`.
pub(crate) struct EncoderVars {
    pub vars: Vec<Var>,
}

/// `(d_T, M²)` encoded node features; column `i` belongs to node `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedNodeFeatures {
    data: Tensor,
}

impl EncodedNodeFeatures {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::Shape {
                context: "encoded node features",
                expected: vec![0, 0],
                found: data.shape().to_vec(),
            });
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn width(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Repeat an `n × n` matrix `blocks` times vertically, giving `(blocks·n, n)`.
pub(crate) fn tile_rows(m: &Tensor, blocks: usize) -> Tensor {
    let mut data = Vec::with_capacity(m.len() * blocks);
    for _ in 0..blocks {
        data.extend_from_slice(m.data());
    }
    Tensor::new(&[blocks * m.shape()[0], m.shape()[1]], data).expect("tile rows")
}

/// One propagation layer on graph variables: `act(W · (z aggregated by att) + b)`.
///
/// `z` is `(d_in, B·n)` and `att` the `(B·n, n)` per-graph weights.
pub(crate) fn propagate_var(
    g: &mut Graph,
    z: Var,
    att: Var,
    w: Var,
    b: Var,
    block: usize,
    relu: bool,
) -> Result<Var> {
    let agg = g.block_aggregate(z, att, block)?;
    let y = g.matmul(w, agg)?;
    let y = g.add_leading_bias(y, b)?;
    Ok(if relu { g.relu(y) } else { y })
}

pub(crate) fn encode_var(
    g: &mut Graph,
    z: Var,
    a_hat: Var,
    params: &EncoderVars,
    block: usize,
) -> Result<Var> {
    let mut h = z;
    for pair in params.vars.chunks(2) {
        h = propagate_var(g, h, a_hat, pair[0], pair[1], block, true)?;
    }
    Ok(h)
}

/// `out[:, i] = ReLU(w · Σ_j a_hat[i][j] · z[:, j] + b)`.
pub fn gcn_layer(z: &Tensor, a_hat: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 || a_hat.shape() != [z.shape()[1], z.shape()[1]] {
        return Err(Error::Shape {
            context: "gcn layer adjacency",
            expected: vec![z.shape().get(1).copied().unwrap_or(0); 2],
            found: a_hat.shape().to_vec(),
        });
    }
    if w.rank() != 2 || w.shape()[1] != z.shape()[0] {
        return Err(Error::Shape {
            context: "gcn layer weight",
            expected: vec![0, z.shape()[0]],
            found: w.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let n = z.shape()[1];
    let (zv, av, wv, bv) = (
        g.constant(z.clone()),
        g.constant(a_hat.clone()),
        g.constant(w.clone()),
        g.constant(b.clone()),
    );
    let out = propagate_var(&mut g, zv, av, wv, bv, n, true)?;
    Ok(g.value(out).clone())
}

/// Applies `T_enc` GCN layers on the normalized grid adjacency.
pub fn encode(graph: &ShuffledGraph, params: &EncoderParams) -> Result<EncodedNodeFeatures> {
    if params.in_channels() != graph.channels() {
        return Err(Error::Shape {
            context: "encoder input channels",
            expected: vec![params.in_channels()],
            found: vec![graph.channels()],
        });
    }
    let a_hat = normalize_adjacency(graph.adjacency().matrix())?;
    let mut g = Graph::new();
    let z = g.constant(graph.attributes().clone());
    let a = g.constant(a_hat);
    let vars = params.bind(&mut g, Binding::Frozen);
    let out = encode_var(&mut g, z, a, &vars, graph.num_nodes())?;
    EncodedNodeFeatures::new(g.value(out).clone())
}
