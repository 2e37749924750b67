//! Jigsaw decoding: masked attention over grid neighbors, attention-weighted
//! propagation back to an `M × M` layout, and the reconstruction loss.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{propagate_var, EncodedNodeFeatures};
use crate::error::{Error, Result};
use crate::params::{bind, fan_in_uniform, join, Binding, Parameterized};
use crate::shuffled_graph::{Adjacency, PooledGrid};
use crate::tensor::Tensor;

/// Negative slope of the attention activation.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `W^a`, `(d_a, d')`.
    projection: Tensor,
    /// Scorer weights over the concatenated pair, `(2·d_a)`.
    scorer: Tensor,
    /// Scorer bias, `(1)`.
    scorer_bias: Tensor,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl DecoderParams {
    /// Decoder for `d'`-wide encodings, reconstructing `out_channels` per cell.
    ///
    /// The projection keeps width `d_a = d'`; hidden decode layers keep `d'`
    /// and the last one maps to `out_channels`.
    pub fn init<R: Rng + ?Sized>(
        in_width: usize,
        out_channels: usize,
        iterations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_width == 0 || out_channels == 0 || iterations == 0 {
            return Err(Error::Config(String::from(
                "decoder needs positive widths and at least one iteration",
            )));
        }
        let d_a = in_width;
        let projection = fan_in_uniform(&[d_a, in_width], in_width, rng);
        let scorer = fan_in_uniform(&[2 * d_a], 2 * d_a, rng);
        let mut widths = vec![in_width; iterations];
        widths.push(out_channels);
        let weights = widths
            .windows(2)
            .map(|w| fan_in_uniform(&[w[1], w[0]], w[0], rng))
            .collect();
        let biases = widths[1..].iter().map(|&d| Tensor::zeros(&[d])).collect();
        Ok(Self {
            projection,
            scorer,
            scorer_bias: Tensor::zeros(&[1]),
            weights,
            biases,
        })
    }

    pub fn from_parts(
        projection: Tensor,
        scorer: Tensor,
        scorer_bias: f64,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
    ) -> Result<Self> {
        let bad = |context| Error::Shape {
            context,
            expected: vec![],
            found: vec![],
        };
        if projection.rank() != 2 || scorer.shape() != [2 * projection.shape()[0]] {
            return Err(bad("decoder attention parameters"));
        }
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(bad("decoder layer count"));
        }
        let mut width = projection.shape()[1];
        for (w, b) in weights.iter().zip(&biases) {
            if w.rank() != 2 || w.shape()[1] != width || b.shape() != [w.shape()[0]] {
                return Err(bad("decoder layer chaining"));
            }
            width = w.shape()[0];
        }
        Ok(Self {
            projection,
            scorer,
            scorer_bias: Tensor::new(&[1], vec![scorer_bias])?,
            weights,
            biases,
        })
    }

    pub fn iterations(&self) -> usize {
        self.weights.len()
    }

    pub fn in_width(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn attention_width(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weights[self.weights.len() - 1].shape()[0]
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn scorer(&self) -> &Tensor {
        &self.scorer
    }

    pub fn scorer_bias(&self) -> f64 {
        self.scorer_bias.item()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub(crate) fn bind(&self, g: &mut Graph, binding: Binding) -> DecoderVars {
        let projection = bind(g, &self.projection, binding);
        let scorer = bind(g, &self.scorer, binding);
        let scorer_bias = bind(g, &self.scorer_bias, binding);
        let mut layers = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            layers.push(bind(g, w, binding));
            layers.push(bind(g, b, binding));
        }
        DecoderVars {
            projection,
            scorer,
            scorer_bias,
            layers,
        }
    }
}

impl Parameterized for DecoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "attention.projection"), &self.projection);
        f(join(prefix, "attention.scorer"), &self.scorer);
        f(join(prefix, "attention.scorer_bias"), &self.scorer_bias);
        for (t, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            f(join(prefix, &alloc::format!("layer{t}.weight")), w);
            f(join(prefix, &alloc::format!("layer{t}.bias")), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "attention.projection"), &mut self.projection);
        f(join(prefix, "attention.scorer"), &mut self.scorer);
        f(join(prefix, "attention.scorer_bias"), &mut self.scorer_bias);
        for (t, (w, b)) in self.weights.iter_mut().zip(&mut self.biases).enumerate() {
            f(join(prefix, &alloc::format!("layer{t}.weight")), w);
            f(join(prefix, &alloc::format!("layer{t}.bias")), b);
        }
    }
}

pub(crate) struct DecoderVars {
    pub projection: Var,
    pub scorer: Var,
    pub scorer_bias: Var,
    /// Interleaved `[w0, b0, w1, b1, …]`.
    pub layers: Vec<Var>,
}

impl DecoderVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.projection, self.scorer, self.scorer_bias];
        v.extend_from_slice(&self.layers);
        v
    }
}

/// Row-normalized attention restricted to grid neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    values: Tensor,
}

impl AttentionMatrix {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Uniform weights over each node's neighbors.
    pub fn uniform(adjacency: &Adjacency) -> Self {
        let n = adjacency.nodes();
        let m = adjacency.matrix();
        let deg: Vec<f64> = m.data().chunks(n).map(|r| r.iter().sum()).collect();
        Self {
            values: Tensor::from_fn(&[n, n], |k| m.data()[k] / deg[k / n]),
        }
    }
}

/// Pairwise attention scores `LeakyReLU(a · [W^a z_i ‖ W^a z_j] + c)` on graph variables.
pub(crate) fn attention_logits_var(g: &mut Graph, z: Var, vars: &DecoderVars, block: usize) -> Result<Var> {
    let d_a = g.shape(vars.projection)[0];
    let h = g.matmul(vars.projection, z)?;
    let left = g.gather(vars.scorer, (0..d_a).collect(), &[1, d_a])?;
    let right = g.gather(vars.scorer, (d_a..2 * d_a).collect(), &[1, d_a])?;
    let s_left = g.matmul(left, h)?;
    let s_right = g.matmul(right, h)?;
    let raw = g.block_outer_sum(s_left, s_right, vars.scorer_bias, block)?;
    Ok(g.leaky_relu(raw, ATTENTION_SLOPE))
}

/// Stacked propagation layers with attention weights in place of the adjacency.
/// Hidden layers use ReLU; the last layer is affine.
pub(crate) fn decode_var(g: &mut Graph, z: Var, att: Var, vars: &DecoderVars, block: usize) -> Result<Var> {
    let layers = vars.layers.len() / 2;
    let mut h = z;
    for (t, pair) in vars.layers.chunks(2).enumerate() {
        h = propagate_var(g, h, att, pair[0], pair[1], block, t + 1 < layers)?;
    }
    Ok(h)
}

fn check_encoding(z: &EncodedNodeFeatures, params: &DecoderParams) -> Result<()> {
    if z.width() != params.in_width() {
        return Err(Error::Shape {
            context: "decoder input width",
            expected: vec![params.in_width()],
            found: vec![z.width()],
        });
    }
    Ok(())
}

/// `(M², M²)` attention logits; generally asymmetric.
pub fn attention_logits(z: &EncodedNodeFeatures, params: &DecoderParams) -> Result<Tensor> {
    check_encoding(z, params)?;
    let mut g = Graph::new();
    let zv = g.constant(z.data().clone());
    let vars = params.bind(&mut g, Binding::Frozen);
    let out = attention_logits_var(&mut g, zv, &vars, z.nodes())?;
    Ok(g.value(out).clone())
}

/// Softmax of each row over the node's grid neighbors; non-neighbors are zero.
pub fn normalize_attention(logits: &Tensor, adjacency: &Adjacency) -> Result<AttentionMatrix> {
    let n = adjacency.nodes();
    logits.expect_shape(&[n, n], "attention logits")?;
    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let out = g.masked_softmax(lv, &adjacency.mask(), n)?;
    Ok(AttentionMatrix {
        values: g.value(out).clone(),
    })
}

/// Reconstruct a `(C', M, M)` grid from encodings and attention.
pub fn decode(z: &EncodedNodeFeatures, attn: &AttentionMatrix, params: &DecoderParams) -> Result<Tensor> {
    check_encoding(z, params)?;
    let n = z.nodes();
    attn.values.expect_shape(&[n, n], "attention matrix")?;
    let m = libm::sqrt(n as f64) as usize;
    if m * m != n {
        return Err(Error::Shape {
            context: "decoder node count is not a square grid",
            expected: vec![m * m],
            found: vec![n],
        });
    }
    let mut g = Graph::new();
    let zv = g.constant(z.data().clone());
    let av = g.constant(attn.values.clone());
    let vars = params.bind(&mut g, Binding::Frozen);
    let out = decode_var(&mut g, zv, av, &vars, n)?;
    g.value(out).clone().reshape(&[params.out_channels(), m, m])
}

/// Squared Frobenius norm of `reconstruction − target`.
pub fn jigsaw_loss(reconstruction: &Tensor, target: &PooledGrid) -> Result<f64> {
    reconstruction.expect_shape(target.data().shape(), "jigsaw loss")?;
    let mut g = Graph::new();
    let a = g.constant(reconstruction.clone());
    let b = g.constant(target.data().clone());
    let loss = g.squared_distance(a, b)?;
    Ok(g.value(loss).item())
}

/// One stage's puzzle, solution, and score.
#[derive(Clone, Debug, PartialEq)]
pub struct JigsawRecord {
    pub stage_index: usize,
    pub shuffled_input: PooledGrid,
    pub target: PooledGrid,
    pub reconstruction: Tensor,
    pub loss: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shuffled_graph::grid_adjacency;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn leaky(v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            ATTENTION_SLOPE * v
        }
    }

    #[test]
    fn identical_features_give_constant_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = DecoderParams::init(3, 2, 1, &mut rng).unwrap();
        let v = [0.4, -1.0, 0.25];
        let z = EncodedNodeFeatures::new(Tensor::from_fn(&[3, 9], |k| v[k / 9])).unwrap();
        let l = attention_logits(&z, &params).unwrap();
        assert!(l.data().iter().all(|&x| x == l.data()[0]));
        let zero = EncodedNodeFeatures::new(Tensor::zeros(&[3, 9])).unwrap();
        assert!(attention_logits(&zero, &params).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn logits_match_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = DecoderParams::from_parts(
            rand_tensor(&[3, 3], &mut rng),
            rand_tensor(&[6], &mut rng),
            0.3,
            vec![rand_tensor(&[2, 3], &mut rng)],
            vec![rand_tensor(&[2], &mut rng)],
        )
        .unwrap();
        let z = rand_tensor(&[3, 4], &mut rng);
        let logits = attention_logits(&EncodedNodeFeatures::new(z.clone()).unwrap(), &params).unwrap();
        let proj = params.projection().matmul(&z).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = params.scorer_bias();
                for c in 0..3 {
                    s += params.scorer().get(&[c]) * proj.get(&[c, i]);
                    s += params.scorer().get(&[3 + c]) * proj.get(&[c, j]);
                }
                assert!((logits.get(&[i, j]) - leaky(s)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_on_neighbor_supports() {
        let adj = grid_adjacency(3).unwrap();
        let att = normalize_attention(&Tensor::zeros(&[9, 9]), &adj).unwrap();
        for q in [1, 3, 5, 7] {
            assert!((att.values().get(&[4, q]) - 0.25).abs() < 1e-15);
        }
        assert!((att.values().get(&[0, 1]) - 0.5).abs() < 1e-15);
        assert_eq!(att.values().get(&[0, 4]), 0.0);
        assert_eq!(att, AttentionMatrix::uniform(&adj));

        // Node 0 has neighbors {1, 3}: logits 1.0 and 2.0.
        let mut l = Tensor::zeros(&[9, 9]);
        l.set(&[0, 1], 1.0);
        l.set(&[0, 3], 2.0);
        l.set(&[0, 8], 50.0);
        let att = normalize_attention(&l, &adj).unwrap();
        let e = core::f64::consts::E;
        assert!((att.values().get(&[0, 1]) - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((att.values().get(&[0, 3]) - e / (1.0 + e)).abs() < 1e-12);
        assert_eq!(att.values().get(&[0, 8]), 0.0);
    }

    #[test]
    fn masking_ignores_non_neighbor_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let adj = grid_adjacency(4).unwrap();
        let l = rand_tensor(&[16, 16], &mut rng).scale(10.0);
        let mut zeroed = l.clone();
        for p in 0..16 {
            for q in 0..16 {
                if !adj.is_edge(p, q) {
                    zeroed.set(&[p, q], 0.0);
                }
            }
        }
        let a = normalize_attention(&l, &adj).unwrap();
        assert_eq!(a, normalize_attention(&zeroed, &adj).unwrap());
        for p in 0..16 {
            let row: f64 = (0..16).map(|q| a.values().get(&[p, q])).sum();
            assert!((row - 1.0).abs() < 1e-6);
        }
        assert!(a.values().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decode_constant_field_and_bias() {
        let adj = grid_adjacency(3).unwrap();
        let att = AttentionMatrix::uniform(&adj);
        let v = [1.5, -0.5];
        let z = EncodedNodeFeatures::new(Tensor::from_fn(&[2, 9], |k| v[k / 9])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DecoderParams::from_parts(
            rand_tensor(&[2, 2], &mut rng),
            rand_tensor(&[4], &mut rng),
            0.0,
            vec![Tensor::eye(2)],
            vec![Tensor::zeros(&[2])],
        )
        .unwrap();
        let out = decode(&z, &att, &params).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3]);
        for c in 0..2 {
            for p in 0..9 {
                assert!((out.get(&[c, p / 3, p % 3]) - v[c]).abs() < 1e-15);
            }
        }
        let beta = [0.25, -2.0];
        let params = DecoderParams::from_parts(
            rand_tensor(&[2, 2], &mut rng),
            rand_tensor(&[4], &mut rng),
            0.0,
            vec![rand_tensor(&[2, 2], &mut rng)],
            vec![Tensor::new(&[2], beta.to_vec()).unwrap()],
        )
        .unwrap();
        let zero = EncodedNodeFeatures::new(Tensor::zeros(&[2, 9])).unwrap();
        let out = decode(&zero, &att, &params).unwrap();
        for (k, &x) in out.data().iter().enumerate() {
            assert_eq!(x, beta[k / 9]);
        }
    }

    #[test]
    fn decode_matches_node_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let adj = grid_adjacency(2).unwrap();
        let params = DecoderParams::init(3, 4, 1, &mut rng).unwrap();
        let z = rand_tensor(&[3, 4], &mut rng);
        let enc = EncodedNodeFeatures::new(z.clone()).unwrap();
        let att = normalize_attention(&attention_logits(&enc, &params).unwrap(), &adj).unwrap();
        let out = decode(&enc, &att, &params).unwrap();
        let (w, b) = (&params.weights()[0], &params.biases()[0]);
        for i in 0..4 {
            for o in 0..4 {
                let mut want = b.get(&[o]);
                for j in adj.neighbors(i) {
                    let a = att.values().get(&[i, j]);
                    for c in 0..3 {
                        want += w.get(&[o, c]) * a * z.get(&[c, j]);
                    }
                }
                assert!((out.get(&[o, i / 2, i % 2]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn final_decode_layer_can_go_negative() {
        let adj = grid_adjacency(2).unwrap();
        let z = EncodedNodeFeatures::new(Tensor::full(&[1, 4], 1.0)).unwrap();
        let params = DecoderParams::from_parts(
            Tensor::eye(1),
            Tensor::zeros(&[2]),
            0.0,
            vec![Tensor::full(&[1, 1], -1.0)],
            vec![Tensor::zeros(&[1])],
        )
        .unwrap();
        let out = decode(&z, &AttentionMatrix::uniform(&adj), &params).unwrap();
        assert!(out.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn loss_values() {
        let t = PooledGrid::new(Tensor::full(&[2, 2, 2], 3.0)).unwrap();
        assert_eq!(jigsaw_loss(t.data(), &t).unwrap(), 0.0);
        assert_eq!(jigsaw_loss(&Tensor::full(&[2, 2, 2], 4.0), &t).unwrap(), 8.0);
        assert!(jigsaw_loss(&Tensor::zeros(&[1, 2, 2]), &t).is_err());
    }
}
