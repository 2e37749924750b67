//! Stage-structured residual classifier with taps at every stage boundary.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{bind, fan_in_uniform, join, Binding, Parameterized};
use crate::shuffled_graph::{MapKind, StageFeatureMap};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_resolution: usize,
    /// Output width `C'_s` of each stage. Stage `s > 1` takes `C_s = C'_{s-1}`;
    /// stage 1 takes the stem output, which has `C'_1` channels.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Spatial downsampling entering each stage; the first entry is applied by the stem.
    pub strides: Vec<usize>,
    pub num_classes: usize,
}

impl BackboneConfig {
    /// Four-stage residual network sized for small synthetic images.
    pub fn desk(num_classes: usize, input_resolution: usize) -> Self {
        Self {
            input_channels: 3,
            input_resolution,
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            strides: vec![2, 2, 2, 2],
            num_classes,
        }
    }

    /// A ResNet-50-scale layout for 224-pixel inputs (basic blocks).
    pub fn wide(num_classes: usize) -> Self {
        Self {
            input_channels: 3,
            input_resolution: 224,
            widths: vec![256, 512, 1024, 2048],
            blocks_per_stage: 3,
            strides: vec![4, 2, 2, 2],
            num_classes,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Embedding width: the final stage's channel count.
    pub fn embedding_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(String::from(m)));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail("stage widths must be non-empty and positive");
        }
        if self.strides.len() != self.widths.len() || self.strides.contains(&0) {
            return fail("one positive stride per stage is required");
        }
        if self.blocks_per_stage == 0 || self.num_classes == 0 || self.input_channels == 0 {
            return fail("blocks, classes, and input channels must be positive");
        }
        if self.stage_shapes().iter().any(|s| s.out_size == 0) {
            return fail("input resolution too small for the stride schedule");
        }
        Ok(())
    }

    fn stem_kernel(&self) -> usize {
        if self.strides[0] > 2 {
            7
        } else {
            3
        }
    }

    /// Channel counts and spatial sizes at every stage boundary.
    pub fn stage_shapes(&self) -> Vec<StageShape> {
        let conv_out = |size: usize, k: usize, stride: usize| {
            let padded = size + 2 * (k / 2);
            if padded < k {
                0
            } else {
                (padded - k) / stride + 1
            }
        };
        let mut size = conv_out(self.input_resolution, self.stem_kernel(), self.strides[0]);
        let mut channels = self.widths[0];
        let mut out = Vec::with_capacity(self.stages());
        for (s, &w) in self.widths.iter().enumerate() {
            let stride = if s == 0 { 1 } else { self.strides[s] };
            let next = conv_out(size, 3, stride);
            out.push(StageShape {
                in_channels: channels,
                in_size: size,
                out_channels: w,
                out_size: next,
            });
            channels = w;
            size = next;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub in_channels: usize,
    pub in_size: usize,
    pub out_channels: usize,
    pub out_size: usize,
}

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBn {
    weight: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvBn {
    fn init<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        // He-uniform: half-width √(6 / fan_in).
        let fan_in = cin * k * k;
        let weight = fan_in_uniform(&[cout, cin, k, k], fan_in, rng).scale(libm::sqrt(6.0));
        Self {
            weight,
            gamma: Tensor::full(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
            running_mean: Tensor::zeros(&[cout]),
            running_var: Tensor::full(&[cout], 1.0),
            stride,
            padding: k / 2,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let w = bind(g, &self.weight, ctx.binding);
        ctx.vars.push(w);
        let gamma = bind(g, &self.gamma, ctx.binding);
        let beta = bind(g, &self.beta, ctx.binding);
        ctx.vars.push(gamma);
        ctx.vars.push(beta);
        let y = g.conv2d(
            x,
            w,
            Conv2dSpec {
                stride: self.stride,
                padding: self.padding,
            },
        )?;
        match ctx.mode {
            Mode::Train => {
                let (out, mean, var) = g.batch_norm(y, gamma, beta, BN_EPS)?;
                ctx.stats.push((mean, var));
                Ok(out)
            }
            Mode::Eval => {
                // Folded into a constant affine map; gradients still reach `x`.
                let (scale, shift): (Vec<f64>, Vec<f64>) = (0..self.gamma.len())
                    .map(|c| {
                        let a = self.gamma.data()[c] / libm::sqrt(self.running_var.data()[c] + BN_EPS);
                        (a, self.beta.data()[c] - self.running_mean.data()[c] * a)
                    })
                    .unzip();
                g.channel_affine(y, &scale, &shift)
            }
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "conv.weight"), &self.weight);
        f(join(prefix, "bn.gamma"), &self.gamma);
        f(join(prefix, "bn.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "conv.weight"), &mut self.weight);
        f(join(prefix, "bn.gamma"), &mut self.gamma);
        f(join(prefix, "bn.beta"), &mut self.beta);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "bn.running_mean"), &self.running_mean);
        f(join(prefix, "bn.running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "bn.running_mean"), &mut self.running_mean);
        f(join(prefix, "bn.running_var"), &mut self.running_var);
    }

    fn update_stats(&mut self, mean: &[f64], var: &[f64]) {
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    fn conv_bns_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvBn>) {
        out.push(self);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn init<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = ConvBn::init(cin, cout, 3, stride, rng);
        let conv2 = ConvBn::init(cout, cout, 3, 1, rng);
        let shortcut = (cin != cout || stride != 1).then(|| ConvBn::init(cin, cout, 1, stride, rng));
        Self {
            conv1,
            conv2,
            shortcut,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.conv1.forward(g, x, ctx)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h, ctx)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x, ctx)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }

    fn parts(&self) -> Vec<(&'static str, &ConvBn)> {
        let mut v = vec![("conv1", &self.conv1), ("conv2", &self.conv2)];
        if let Some(s) = &self.shortcut {
            v.push(("shortcut", s));
        }
        v
    }

    fn conv_bns_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvBn>) {
        // Same order as `forward` pushes statistics.
        self.conv1.conv_bns_mut(out);
        self.conv2.conv_bns_mut(out);
        if let Some(s) = &mut self.shortcut {
            s.conv_bns_mut(out);
        }
    }
}

struct Ctx {
    binding: Binding,
    mode: Mode,
    vars: Vec<Var>,
    stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Batch-norm statistics from a training-mode forward pass, in layer order.
#[derive(Clone, Debug, Default)]
pub struct BatchStats(Vec<(Vec<f64>, Vec<f64>)>);

/// Graph nodes produced by [`Backbone::forward_graph`].
pub struct BackboneGraph {
    pub logits: Var,
    /// Global-average-pooled final features, `(N, C'_S)`.
    pub pooled: Var,
    /// `(input, output)` of every stage, each an NCHW batch.
    pub stages: Vec<(Var, Var)>,
    /// Bound parameters in `Parameterized::visit` order.
    pub params: Vec<Var>,
    pub stats: BatchStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    fc_weight: Tensor,
    fc_bias: Tensor,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::init(
            config.input_channels,
            config.widths[0],
            config.stem_kernel(),
            config.strides[0],
            rng,
        );
        let mut cin = config.widths[0];
        let mut stages = Vec::with_capacity(config.stages());
        for (s, &w) in config.widths.iter().enumerate() {
            let stride = if s == 0 { 1 } else { config.strides[s] };
            let blocks = (0..config.blocks_per_stage)
                .map(|b| {
                    let block = BasicBlock::init(cin, w, if b == 0 { stride } else { 1 }, rng);
                    cin = w;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        let d = config.embedding_dim();
        let fc_weight = fan_in_uniform(&[config.num_classes, d], d, rng);
        let fc_bias = Tensor::zeros(&[config.num_classes]);
        Ok(Self {
            config,
            stem,
            stages,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.input_channels || s[2] != c.input_resolution || s[3] != c.input_resolution {
            return Err(Error::Shape {
                context: "backbone input (N, C, R, R)",
                expected: vec![s.first().copied().unwrap_or(0), c.input_channels, c.input_resolution, c.input_resolution],
                found: s.to_vec(),
            });
        }
        if s[0] == 0 {
            return Err(Error::Config(String::from("empty image batch")));
        }
        Ok(())
    }

    /// Record the full forward pass on `g`. Images enter as `input`.
    pub fn forward_graph(&self, g: &mut Graph, input: Var, binding: Binding, mode: Mode) -> Result<BackboneGraph> {
        self.check_images(g.value(input))?;
        let mut ctx = Ctx {
            binding,
            mode,
            vars: Vec::new(),
            stats: Vec::new(),
        };
        let h = self.stem.forward(g, input, &mut ctx)?;
        let mut x = g.relu(h);
        let mut stages = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            let stage_in = x;
            for block in blocks {
                x = block.forward(g, x, &mut ctx)?;
            }
            stages.push((stage_in, x));
        }
        let pooled = g.global_avg_pool(x)?;
        let w = bind(g, &self.fc_weight, binding);
        let b = bind(g, &self.fc_bias, binding);
        ctx.vars.push(w);
        ctx.vars.push(b);
        let logits = g.matmul_t(pooled, w, false, true)?;
        let logits = g.add_trailing_bias(logits, b)?;
        Ok(BackboneGraph {
            logits,
            pooled,
            stages,
            params: ctx.vars,
            stats: BatchStats(ctx.stats),
        })
    }

    /// Fold batch statistics from a training pass into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let mut layers = Vec::new();
        self.stem.conv_bns_mut(&mut layers);
        for block in self.stages.iter_mut().flatten() {
            block.conv_bns_mut(&mut layers);
        }
        debug_assert_eq!(layers.len(), stats.0.len());
        for (layer, (mean, var)) in layers.into_iter().zip(&stats.0) {
            layer.update_stats(mean, var);
        }
    }

    /// Evaluation-mode logits `(N, num_classes)` and every stage's input/output per image.
    pub fn forward_with_capture(&self, images: &Tensor) -> Result<(Tensor, Vec<StageCapture>)> {
        let mut g = Graph::new();
        let input = g.constant(images.clone());
        let out = self.forward_graph(&mut g, input, Binding::Frozen, Mode::Eval)?;
        let n = images.shape()[0];
        let mut captures: Vec<StageCapture> = (0..n).map(|_| StageCapture { stages: Vec::new() }).collect();
        for (s, (vin, vout)) in out.stages.iter().enumerate() {
            for (b, cap) in captures.iter_mut().enumerate() {
                let x_in = StageFeatureMap::new(sample_of(g.value(*vin), b), s + 1, MapKind::StageInput)?;
                let x_out = StageFeatureMap::new(sample_of(g.value(*vout), b), s + 1, MapKind::StageOutput)?;
                cap.stages.push((x_in, x_out));
            }
        }
        Ok((g.value(out.logits).clone(), captures))
    }

    /// Evaluation-mode logits without retaining stage maps.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.constant(images.clone());
        let out = self.forward_graph(&mut g, input, Binding::Frozen, Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    /// Unit-norm pooled final-stage features, `(N, C'_S)`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.constant(images.clone());
        let out = self.forward_graph(&mut g, input, Binding::Frozen, Mode::Eval)?;
        Ok(l2_normalize_rows(g.value(out.pooled)))
    }
}

fn sample_of(batch: &Tensor, b: usize) -> Tensor {
    let s = batch.shape();
    let n = s[1] * s[2] * s[3];
    Tensor::new(&s[1..], batch.data()[b * n..(b + 1) * n].to_vec()).expect("sample slice")
}

/// Normalize each row of a matrix to unit L2 norm; zero rows stay zero.
pub fn l2_normalize_rows(m: &Tensor) -> Tensor {
    let d = m.shape()[1];
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(d) {
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Per-image stage boundary maps; `stages[s]` is stage `s + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCapture {
    pub stages: Vec<(StageFeatureMap, StageFeatureMap)>,
}

impl Parameterized for Backbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                for (name, part) in block.parts() {
                    part.visit(&join(prefix, &format!("stage{}.block{b}.{name}", s + 1)), f);
                }
            }
        }
        f(join(prefix, "fc.weight"), &self.fc_weight);
        f(join(prefix, "fc.bias"), &self.fc_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                let p = join(prefix, &format!("stage{}.block{b}", s + 1));
                block.conv1.visit_mut(&join(&p, "conv1"), f);
                block.conv2.visit_mut(&join(&p, "conv2"), f);
                if let Some(sc) = &mut block.shortcut {
                    sc.visit_mut(&join(&p, "shortcut"), f);
                }
            }
        }
        f(join(prefix, "fc.weight"), &mut self.fc_weight);
        f(join(prefix, "fc.bias"), &mut self.fc_bias);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.stem.visit_buffers(&join(prefix, "stem"), f);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                for (name, part) in block.parts() {
                    part.visit_buffers(&join(prefix, &format!("stage{}.block{b}.{name}", s + 1)), f);
                }
            }
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_buffers_mut(&join(prefix, "stem"), f);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                let p = join(prefix, &format!("stage{}.block{b}", s + 1));
                block.conv1.visit_buffers_mut(&join(&p, "conv1"), f);
                block.conv2.visit_buffers_mut(&join(&p, "conv2"), f);
                if let Some(sc) = &mut block.shortcut {
                    sc.visit_buffers_mut(&join(&p, "shortcut"), f);
                }
            }
        }
    }
}
