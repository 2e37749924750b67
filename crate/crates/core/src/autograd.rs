//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly: the forward value of each node
//! is computed as soon as the node is created, and [`Graph::backward`] walks the
//! tape in reverse. Nodes that do not depend on a gradient-carrying leaf are
//! never differentiated and keep no saved buffers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, MatRef, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    /// `x (r, ...) + bias (r)`, broadcast over trailing axes.
    AddLeadingBias(Var, Var),
    /// `x (..., c) + bias (c)`, broadcast over leading axes.
    AddTrailingBias(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Conv2d {
        input: Var,
        weight: Var,
        spec: Conv2dSpec,
        cols: Option<Tensor>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        input: Var,
        scale: Vec<f64>,
    },
    AdaptiveAvgPool {
        input: Var,
    },
    GlobalAvgPool(Var),
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    BlockAggregate {
        z: Var,
        att: Var,
        block: usize,
    },
    BlockOuterSum {
        rows: Var,
        cols: Var,
        bias: Var,
        block: usize,
    },
    MaskedSoftmax {
        logits: Var,
        mask: Vec<bool>,
        block: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    SquaredDistance(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when no gradient reached it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(context: &'static str, expected: &[usize], found: &[usize]) -> Error {
    Error::Shape {
        context,
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

fn pool_bin(b: usize, extent: usize, bins: usize) -> (usize, usize) {
    (b * extent / bins, (b + 1) * extent / bins)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `var`'s current value as a new constant leaf.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let value = self.value(a).scale(alpha);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, alpha), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Rank-2 product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul operands", sa, sb));
        }
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err("matmul inner dimension", sa, sb));
        }
        let av = view(self.value(a), trans_a);
        let bv = view(self.value(b), trans_b);
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, 1.0, av, bv, 0.0, &mut out);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add_leading_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.is_empty() || bs != [xs[0]] {
            return Err(shape_err("leading bias", &xs[..1.min(xs.len())], bs));
        }
        let inner = numel(&xs[1..]);
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (k, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[k / inner];
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddLeadingBias(x, bias), rg))
    }

    pub fn add_trailing_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.is_empty() || bs != [xs[xs.len() - 1]] {
            return Err(shape_err("trailing bias", &xs[xs.len().saturating_sub(1)..], bs));
        }
        let c = bs[0];
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (k, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[k % c];
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddTrailingBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    /// 2-D convolution of an NCHW batch with an OIKK kernel (square kernel, no bias).
    pub fn conv2d(&mut self, input: Var, weight: Var, spec: Conv2dSpec) -> Result<Var> {
        let (is, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if is.len() != 4 || ws.len() != 4 || ws[1] != is[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", &is, &ws));
        }
        let geo = ConvGeometry::new(&is, &ws, spec)?;
        let cols = im2col(self.value(input), &geo);
        let rows = geo.out_channels;
        let wide = geo.batch * geo.out_pixels();
        let mut out2 = vec![0.0; rows * wide];
        gemm(
            rows,
            geo.patch(),
            wide,
            1.0,
            MatRef::row_major(self.value(weight).data(), geo.patch()),
            MatRef::row_major(&cols, wide),
            0.0,
            &mut out2,
        );
        let px = geo.out_pixels();
        let mut out = vec![0.0; rows * wide];
        for o in 0..rows {
            for n in 0..geo.batch {
                let src = &out2[o * wide + n * px..o * wide + (n + 1) * px];
                out[(n * rows + o) * px..(n * rows + o + 1) * px].copy_from_slice(src);
            }
        }
        let value = Tensor::new(&[geo.batch, rows, geo.out_h, geo.out_w], out)?;
        let rg = self.any_grad(&[input, weight]);
        let cols = if rg {
            Some(Tensor::new(&[geo.patch(), wide], cols)?)
        } else {
            None
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                spec,
                cols,
            },
            rg,
        ))
    }

    /// Training-mode batch normalization over (N, H, W) per channel.
    ///
    /// Returns the normalized output along with the batch mean and the
    /// unbiased batch variance (for running-statistics updates).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let is = self.shape(input).to_vec();
        if is.len() != 4 || self.shape(gamma) != [is[1]] || self.shape(beta) != [is[1]] {
            return Err(shape_err("batch norm", &is, self.shape(gamma)));
        }
        let (n, c, hw) = (is[0], is[1], is[2] * is[3]);
        let count = (n * hw) as f64;
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let s = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for b in 0..n {
            for ch in 0..c {
                let s = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                var[ch] += s.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / libm::sqrt(v / count + eps))
            .collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for k in base..base + hw {
                    let h = (x[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = g[ch] * h + be[ch];
                }
            }
        }
        let unbiased: Vec<f64> = var
            .iter()
            .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
            .collect();
        let value = Tensor::new(&is, out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: Tensor::new(&is, xhat)?,
                inv_std,
            },
            rg,
        );
        Ok((var_out, mean, unbiased))
    }

    /// Per-channel affine map with constant coefficients on an NCHW batch.
    pub fn channel_affine(&mut self, input: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let is = self.shape(input).to_vec();
        if is.len() != 4 || scale.len() != is[1] || shift.len() != is[1] {
            return Err(shape_err("channel affine", &is, &[scale.len()]));
        }
        let (c, hw) = (is[1], is[2] * is[3]);
        let mut value = self.value(input).clone();
        for (k, v) in value.data_mut().iter_mut().enumerate() {
            let ch = (k / hw) % c;
            *v = *v * scale[ch] + shift[ch];
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::ChannelAffine {
                input,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// Adaptive average pooling of an NCHW batch to `(N, C, out_h, out_w)`.
    ///
    /// Bin `b` of an extent `E` split into `B` bins covers `[⌊bE/B⌋, ⌊(b+1)E/B⌋)`.
    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let is = self.shape(input).to_vec();
        if is.len() != 4 || out_h == 0 || out_w == 0 || out_h > is[2] || out_w > is[3] {
            return Err(shape_err("adaptive pool", &[out_h, out_w], &is));
        }
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for bi in 0..out_h {
                let (r0, r1) = pool_bin(bi, h, out_h);
                for bj in 0..out_w {
                    let (c0, c1) = pool_bin(bj, w, out_w);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += src[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    out[(plane * out_h + bi) * out_w + bj] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::AdaptiveAvgPool { input }, rg))
    }

    /// Spatial mean of an NCHW batch, giving `(N, C)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        if is.len() != 4 {
            return Err(shape_err("global pool", &[0, 0, 0, 0], &is));
        }
        let hw = is[2] * is[3];
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[is[0], is[1]], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// `out.data[k] = input.data[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(shape_err("gather", shape, &[index.len()]));
        }
        let src = self.value(input).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err("gather index", &[src.len()], &[bad]));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Gather { input, index }, rg))
    }

    /// Block-diagonal neighbor aggregation.
    ///
    /// `z` is `(d, B·n)` holding `B` graphs of `n` nodes side by side and `att`
    /// is `(B·n, n)` holding one row-stochastic (or arbitrary) `n × n` weight
    /// matrix per graph. Output column `b·n + i` is `Σ_j att[b·n+i][j] · z[:, b·n+j]`.
    pub fn block_aggregate(&mut self, z: Var, att: Var, block: usize) -> Result<Var> {
        let (zs, as_) = (self.shape(z).to_vec(), self.shape(att).to_vec());
        if zs.len() != 2 || as_.len() != 2 || as_[1] != block || as_[0] != zs[1] || block == 0 {
            return Err(shape_err("block aggregate", &zs, &as_));
        }
        let (d, wide) = (zs[0], zs[1]);
        let (zv, av) = (self.value(z).data(), self.value(att).data());
        let mut out = vec![0.0; d * wide];
        for b in 0..wide / block {
            for i in 0..block {
                let row = &av[(b * block + i) * block..(b * block + i + 1) * block];
                for (j, &w) in row.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let col = b * block + j;
                    let dst = b * block + i;
                    for c in 0..d {
                        out[c * wide + dst] += w * zv[c * wide + col];
                    }
                }
            }
        }
        let value = Tensor::new(&zs, out)?;
        let rg = self.any_grad(&[z, att]);
        Ok(self.push(value, Op::BlockAggregate { z, att, block }, rg))
    }

    /// Pairwise scores `out[b·n+i][j] = rows[b·n+i] + cols[b·n+j] + bias`.
    pub fn block_outer_sum(&mut self, rows: Var, cols: Var, bias: Var, block: usize) -> Result<Var> {
        let wide = numel(self.shape(rows));
        if numel(self.shape(cols)) != wide || numel(self.shape(bias)) != 1 || block == 0 || !wide.is_multiple_of(block) {
            return Err(shape_err("block outer sum", self.shape(rows), self.shape(cols)));
        }
        let (r, c, b0) = (
            self.value(rows).data(),
            self.value(cols).data(),
            self.value(bias).data()[0],
        );
        let mut out = vec![0.0; wide * block];
        for row in 0..wide {
            let base = (row / block) * block;
            for j in 0..block {
                out[row * block + j] = r[row] + c[base + j] + b0;
            }
        }
        let value = Tensor::new(&[wide, block], out)?;
        let rg = self.any_grad(&[rows, cols, bias]);
        Ok(self.push(
            value,
            Op::BlockOuterSum {
                rows,
                cols,
                bias,
                block,
            },
            rg,
        ))
    }

    /// Row softmax restricted to the support of an `n × n` mask, repeated per block.
    ///
    /// Entries outside the support are excluded from normalization and set to zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool], block: usize) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[1] != block || mask.len() != block * block || !ls[0].is_multiple_of(block) {
            return Err(shape_err("masked softmax", &[block, block], &ls));
        }
        let x = self.value(logits).data();
        let mut out = vec![0.0; x.len()];
        for row in 0..ls[0] {
            let local = row % block;
            let support = &mask[local * block..(local + 1) * block];
            let xs = &x[row * block..(row + 1) * block];
            let mut max = f64::NEG_INFINITY;
            for (j, &keep) in support.iter().enumerate() {
                if keep && xs[j] > max {
                    max = xs[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptySupport(local));
            }
            let ys = &mut out[row * block..(row + 1) * block];
            let mut total = 0.0;
            for (j, &keep) in support.iter().enumerate() {
                if keep {
                    let e = libm::exp(xs[j] - max);
                    ys[j] = e;
                    total += e;
                }
            }
            for y in ys.iter_mut() {
                *y /= total;
            }
        }
        let value = Tensor::new(&ls, out)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                logits,
                mask: mask.to_vec(),
                block,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || labels.iter().any(|&l| l >= ls[1]) {
            return Err(shape_err("cross entropy", &[labels.len()], &ls));
        }
        let (n, k) = (ls[0], ls[1]);
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..k {
                let e = libm::exp(row[j] - max);
                probs[r * k + j] = e;
                total += e;
            }
            for j in 0..k {
                probs[r * k + j] /= total;
            }
            loss -= row[labels[r]] - max - libm::log(total);
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Tensor::new(&ls, probs)?,
            },
            rg,
        ))
    }

    /// `Σ (a − b)²` over all entries.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let value = Tensor::scalar(d.data().iter().map(|v| v * v).sum());
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::SquaredDistance(a, b), rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Scale(a, alpha) => self.accumulate(grads, *a, g.scale(*alpha)),
            Op::Sum(a) => {
                let s = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(s, g.item()));
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.shape(*a)).expect("reshape grad");
                self.accumulate(grads, *a, t);
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = if *trans_a { sa[0] } else { sa[1] };
                if self.wants(*a) {
                    // grad of op(a) = g · op(b)ᵀ; transpose back if a was transposed.
                    let bv = self.value(*b);
                    let mut ga = vec![0.0; sa[0] * sa[1]];
                    if *trans_a {
                        // a is (k × m): grad = op(b) · gᵀ
                        gemm(k, n, m, 1.0, view(bv, *trans_b), MatRef::transposed(g.data(), n), 0.0, &mut ga);
                    } else {
                        gemm(m, n, k, 1.0, MatRef::row_major(g.data(), n), view_t(bv, *trans_b), 0.0, &mut ga);
                    }
                    self.accumulate(grads, *a, Tensor::new(&sa, ga).expect("matmul grad a"));
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let mut gb = vec![0.0; sb[0] * sb[1]];
                    if *trans_b {
                        // b is (n × k): grad = gᵀ · op(a)
                        gemm(n, m, k, 1.0, MatRef::transposed(g.data(), n), view(av, *trans_a), 0.0, &mut gb);
                    } else {
                        gemm(k, m, n, 1.0, view_t(av, *trans_a), MatRef::row_major(g.data(), n), 0.0, &mut gb);
                    }
                    self.accumulate(grads, *b, Tensor::new(&sb, gb).expect("matmul grad b"));
                }
            }
            Op::AddLeadingBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let r = self.shape(*bias)[0];
                    let inner = g.len() / r;
                    let gb: Vec<f64> = g.data().chunks(inner).map(|c| c.iter().sum()).collect();
                    self.accumulate(grads, *bias, Tensor::new(&[r], gb).expect("bias grad"));
                }
            }
            Op::AddTrailingBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let c = self.shape(*bias)[0];
                    let mut gb = vec![0.0; c];
                    for (k, v) in g.data().iter().enumerate() {
                        gb[k % c] += v;
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[c], gb).expect("bias grad"));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let t = g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { 0.0 }).expect("relu");
                self.accumulate(grads, *x, t);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let s = *slope;
                let t = g
                    .zip_map(xv, |gv, v| if v > 0.0 { gv } else { s * gv })
                    .expect("leaky relu");
                self.accumulate(grads, *x, t);
            }
            Op::Conv2d {
                input,
                weight,
                spec,
                cols,
            } => {
                let geo = ConvGeometry::new(self.shape(*input), self.shape(*weight), *spec)
                    .expect("conv geometry");
                let (rows, px) = (geo.out_channels, geo.out_pixels());
                let wide = geo.batch * px;
                let mut g2 = vec![0.0; rows * wide];
                let gd = g.data();
                for n in 0..geo.batch {
                    for o in 0..rows {
                        g2[o * wide + n * px..o * wide + (n + 1) * px]
                            .copy_from_slice(&gd[(n * rows + o) * px..(n * rows + o + 1) * px]);
                    }
                }
                let cols = cols.as_ref().expect("conv cols saved");
                if self.wants(*weight) {
                    let mut gw = vec![0.0; rows * geo.patch()];
                    gemm(
                        rows,
                        wide,
                        geo.patch(),
                        1.0,
                        MatRef::row_major(&g2, wide),
                        MatRef::transposed(cols.data(), wide),
                        0.0,
                        &mut gw,
                    );
                    let ws = self.shape(*weight).to_vec();
                    self.accumulate(grads, *weight, Tensor::new(&ws, gw).expect("conv grad w"));
                }
                if self.wants(*input) {
                    let mut gcols = vec![0.0; geo.patch() * wide];
                    gemm(
                        geo.patch(),
                        rows,
                        wide,
                        1.0,
                        MatRef::transposed(self.value(*weight).data(), geo.patch()),
                        MatRef::row_major(&g2, wide),
                        0.0,
                        &mut gcols,
                    );
                    let gi = col2im(&gcols, &geo);
                    let is = self.shape(*input).to_vec();
                    self.accumulate(grads, *input, Tensor::new(&is, gi).expect("conv grad x"));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let is = self.shape(*input);
                let (n, c, hw) = (is[0], is[1], is[2] * is[3]);
                let count = (n * hw) as f64;
                let (gd, xh) = (g.data(), xhat.data());
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for k in base..base + hw {
                            sum_g[ch] += gd[k];
                            sum_gx[ch] += gd[k] * xh[k];
                        }
                    }
                }
                if self.wants(*input) {
                    let gam = self.value(*gamma).data();
                    let mut gi = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch] / count;
                            for k in base..base + hw {
                                gi[k] = scale * (count * gd[k] - sum_g[ch] - xh[k] * sum_gx[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(is, gi).expect("bn grad x"));
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_gx).expect("bn grad g"));
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_g).expect("bn grad b"));
            }
            Op::ChannelAffine { input, scale } => {
                let is = self.shape(*input);
                let (c, hw) = (is[1], is[2] * is[3]);
                let mut t = g.clone();
                for (k, v) in t.data_mut().iter_mut().enumerate() {
                    *v *= scale[(k / hw) % c];
                }
                self.accumulate(grads, *input, t);
            }
            Op::AdaptiveAvgPool { input } => {
                let is = self.shape(*input).to_vec();
                let (h, w) = (is[2], is[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let mut gi = vec![0.0; numel(&is)];
                let gd = g.data();
                for plane in 0..is[0] * is[1] {
                    for bi in 0..oh {
                        let (r0, r1) = pool_bin(bi, h, oh);
                        for bj in 0..ow {
                            let (c0, c1) = pool_bin(bj, w, ow);
                            let share =
                                gd[(plane * oh + bi) * ow + bj] / ((r1 - r0) * (c1 - c0)) as f64;
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    gi[plane * h * w + r * w + cc] += share;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(&is, gi).expect("pool grad"));
            }
            Op::GlobalAvgPool(input) => {
                let is = self.shape(*input).to_vec();
                let hw = is[2] * is[3];
                let gd = g.data();
                let gi = (0..numel(&is)).map(|k| gd[k / hw] / hw as f64).collect();
                self.accumulate(grads, *input, Tensor::new(&is, gi).expect("gap grad"));
            }
            Op::Gather { input, index } => {
                let is = self.shape(*input).to_vec();
                let mut gi = vec![0.0; numel(&is)];
                for (k, &src) in index.iter().enumerate() {
                    gi[src] += g.data()[k];
                }
                self.accumulate(grads, *input, Tensor::new(&is, gi).expect("gather grad"));
            }
            Op::BlockAggregate { z, att, block } => {
                let zs = self.shape(*z).to_vec();
                let (d, wide, n) = (zs[0], zs[1], *block);
                let (zv, av, gd) = (self.value(*z).data(), self.value(*att).data(), g.data());
                if self.wants(*z) {
                    let mut gz = vec![0.0; d * wide];
                    for b in 0..wide / n {
                        for i in 0..n {
                            for j in 0..n {
                                let w = av[(b * n + i) * n + j];
                                if w == 0.0 {
                                    continue;
                                }
                                for c in 0..d {
                                    gz[c * wide + b * n + j] += w * gd[c * wide + b * n + i];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *z, Tensor::new(&zs, gz).expect("agg grad z"));
                }
                if self.wants(*att) {
                    let mut ga = vec![0.0; wide * n];
                    for b in 0..wide / n {
                        for i in 0..n {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for c in 0..d {
                                    acc += gd[c * wide + b * n + i] * zv[c * wide + b * n + j];
                                }
                                ga[(b * n + i) * n + j] = acc;
                            }
                        }
                    }
                    self.accumulate(grads, *att, Tensor::new(&[wide, n], ga).expect("agg grad a"));
                }
            }
            Op::BlockOuterSum {
                rows,
                cols,
                bias,
                block,
            } => {
                let n = *block;
                let wide = g.shape()[0];
                let gd = g.data();
                let mut gr = vec![0.0; wide];
                let mut gc = vec![0.0; wide];
                for row in 0..wide {
                    let base = (row / n) * n;
                    for j in 0..n {
                        let v = gd[row * n + j];
                        gr[row] += v;
                        gc[base + j] += v;
                    }
                }
                let total = g.sum();
                let (rs, cs, bs) = (
                    self.shape(*rows).to_vec(),
                    self.shape(*cols).to_vec(),
                    self.shape(*bias).to_vec(),
                );
                self.accumulate(grads, *rows, Tensor::new(&rs, gr).expect("outer grad r"));
                self.accumulate(grads, *cols, Tensor::new(&cs, gc).expect("outer grad c"));
                self.accumulate(grads, *bias, Tensor::new(&bs, vec![total]).expect("outer grad b"));
            }
            Op::MaskedSoftmax {
                logits,
                mask,
                block,
            } => {
                let n = *block;
                let y = node.value.data();
                let gd = g.data();
                let mut gx = vec![0.0; y.len()];
                for row in 0..y.len() / n {
                    let local = row % n;
                    let r = row * n..(row + 1) * n;
                    let dot: f64 = y[r.clone()].iter().zip(&gd[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        if mask[local * n + j] {
                            gx[row * n + j] = y[row * n + j] * (gd[row * n + j] - dot);
                        }
                    }
                }
                let ls = self.shape(*logits).to_vec();
                self.accumulate(grads, *logits, Tensor::new(&ls, gx).expect("softmax grad"));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, k) = (probs.shape()[0], probs.shape()[1]);
                let scale = g.item() / n as f64;
                let mut gl = probs.data().to_vec();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * k + l] -= 1.0;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(&[n, k], gl).expect("ce grad"));
            }
            Op::SquaredDistance(a, b) => {
                let s = 2.0 * g.item();
                let d = self
                    .value(*a)
                    .zip_map(self.value(*b), |x, y| s * (x - y))
                    .expect("sqdist");
                if self.wants(*b) {
                    self.accumulate(grads, *b, d.scale(-1.0));
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}

fn view(t: &Tensor, transposed: bool) -> MatRef<'_> {
    let cols = t.shape()[1];
    if transposed {
        MatRef::transposed(t.data(), cols)
    } else {
        MatRef::row_major(t.data(), cols)
    }
}

/// View of `op(t)ᵀ`.
fn view_t(t: &Tensor, transposed: bool) -> MatRef<'_> {
    view(t, !transposed)
}

struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let k = weight[2];
        let (h, w) = (input[2] + 2 * spec.padding, input[3] + 2 * spec.padding);
        if spec.stride == 0 || h < k || w < k {
            return Err(shape_err("conv2d geometry", weight, input));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            in_h: input[2],
            in_w: input[3],
            out_channels: weight[0],
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            out_h: (h - k) / spec.stride + 1,
            out_w: (w - k) / spec.stride + 1,
        })
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Source pixel for output `(oy, ox)` at kernel offset `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

fn im2col(input: &Tensor, geo: &ConvGeometry) -> Vec<f64> {
    let px = geo.out_pixels();
    let wide = geo.batch * px;
    let k = geo.kernel;
    let x = input.data();
    let mut cols = vec![0.0; geo.patch() * wide];
    for c in 0..geo.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut cols[row * wide..(row + 1) * wide];
                for n in 0..geo.batch {
                    let plane = &x[(n * geo.in_channels + c) * geo.in_h * geo.in_w..];
                    for oy in 0..geo.out_h {
                        for ox in 0..geo.out_w {
                            if let Some((y, xx)) = geo.source(oy, ox, ky, kx) {
                                dst_row[n * px + oy * geo.out_w + ox] = plane[y * geo.in_w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let px = geo.out_pixels();
    let wide = geo.batch * px;
    let k = geo.kernel;
    let plane_len = geo.in_h * geo.in_w;
    let mut out = vec![0.0; geo.batch * geo.in_channels * plane_len];
    for c in 0..geo.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &cols[row * wide..(row + 1) * wide];
                for n in 0..geo.batch {
                    let base = (n * geo.in_channels + c) * plane_len;
                    for oy in 0..geo.out_h {
                        for ox in 0..geo.out_w {
                            if let Some((y, xx)) = geo.source(oy, ox, ky, kx) {
                                out[base + y * geo.in_w + xx] += src_row[n * px + oy * geo.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
