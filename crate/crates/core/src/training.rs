//! Joint optimization of the classifier and its per-stage jigsaw heads.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, Mode};
use crate::error::{Error, Result};
use crate::jigsaw::{batch_jigsaw, StageJigsaw};
use crate::params::{collect_grads, join, Binding, Parameterized};
use crate::shuffled_graph::{check_grid_side, sample_permutation, Permutation};
use crate::tensor::Tensor;

/// Which stages contribute a jigsaw term at a given iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageMode {
    /// One stage per iteration, cycling 1, 2, …, S.
    StageWiseProgressive,
    /// Always the same stage (1-based).
    SingleStage(usize),
    /// Every stage at every iteration. Known to train poorly; kept for ablations.
    Simultaneous,
    Disabled,
}

impl StageMode {
    /// Active stages (1-based, ascending) at `iteration`.
    pub fn active(self, iteration: u64, stages: usize) -> Vec<usize> {
        match self {
            StageMode::StageWiseProgressive => alloc::vec![progressive_stage_selector(iteration, stages)],
            StageMode::SingleStage(s) => alloc::vec![s],
            StageMode::Simultaneous => (1..=stages).collect(),
            StageMode::Disabled => Vec::new(),
        }
    }
}

/// Stage active at `iteration` under the progressive schedule.
pub fn progressive_stage_selector(iteration: u64, stages: usize) -> usize {
    (iteration % stages as u64) as usize + 1
}

/// `ζ_cls + λ Σ ζ_jig`. Each jigsaw term is paired with its stage for diagnostics.
pub fn total_loss(cls_loss: f64, jigsaw: &[(usize, f64)], lambda: f64) -> Result<f64> {
    if !cls_loss.is_finite() {
        return Err(Error::NonFinite(String::from("classification loss")));
    }
    let mut sum = 0.0;
    for &(stage, l) in jigsaw {
        if !l.is_finite() || l < 0.0 {
            return Err(Error::NonFinite(format!("jigsaw loss at stage {stage}: {l}")));
        }
        sum += l;
    }
    Ok(cls_loss + lambda * sum)
}

#[derive(Clone, Debug, PartialEq)]
pub struct JigsawConfig {
    pub grid: usize,
    pub t_enc: usize,
    pub t_dec: usize,
    pub lambda: f64,
    pub stage_mode: StageMode,
}

impl Default for JigsawConfig {
    fn default() -> Self {
        Self {
            grid: 3,
            t_enc: 1,
            t_dec: 1,
            lambda: 0.1,
            stage_mode: StageMode::StageWiseProgressive,
        }
    }
}

impl JigsawConfig {
    /// Whether any jigsaw loss is ever evaluated.
    pub fn enabled(&self) -> bool {
        self.lambda != 0.0 && self.stage_mode != StageMode::Disabled
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub jigsaw: JigsawConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate at batch size 96; scaled linearly with `batch_size`.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            jigsaw: JigsawConfig::default(),
            epochs: 60,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn scaled_lr(&self) -> f64 {
        self.lr * self.batch_size as f64 / 96.0
    }

    /// Cosine decay from `scaled_lr` to zero over `total` iterations.
    pub fn lr_at(&self, iteration: u64, total: u64) -> f64 {
        let t = (iteration as f64 / total.max(1) as f64).min(1.0);
        0.5 * self.scaled_lr() * (1.0 + libm::cos(core::f64::consts::PI * t))
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let j = &self.jigsaw;
        if !(j.lambda >= 0.0 && j.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", j.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(String::from("epochs and batch_size must be positive")));
        }
        if j.t_enc == 0 || j.t_dec == 0 {
            return Err(Error::Config(String::from("t_enc and t_dec must be at least 1")));
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return Err(Error::Config(String::from("invalid optimizer settings")));
        }
        let stages = backbone.stages();
        if let StageMode::SingleStage(s) = j.stage_mode {
            if s == 0 || s > stages {
                return Err(Error::StageOutOfRange { stage: s, stages });
            }
        }
        if j.enabled() {
            check_grid_side(j.grid)?;
            let shapes = backbone.stage_shapes();
            for s in 1..=stages {
                let used = match j.stage_mode {
                    StageMode::SingleStage(k) => k == s,
                    _ => true,
                };
                let sh = shapes[s - 1];
                if used && j.grid > sh.in_size.min(sh.out_size) {
                    return Err(Error::GridTooLarge {
                        grid: j.grid,
                        height: sh.in_size.min(sh.out_size),
                        width: sh.in_size.min(sh.out_size),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A backbone with optional jigsaw heads, one per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphJigsawModel {
    pub backbone: Backbone,
    pub heads: Option<Vec<StageJigsaw>>,
}

impl GraphJigsawModel {
    /// The backbone is drawn from `rng` first, so a model built with heads and
    /// one built without share backbone weights under the same seed.
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, with_heads: Option<(usize, usize)>, rng: &mut R) -> Result<Self> {
        let backbone = Backbone::init(config, rng)?;
        let heads = match with_heads {
            Some((t_enc, t_dec)) => Some(
                backbone
                    .config()
                    .stage_shapes()
                    .iter()
                    .map(|s| StageJigsaw::init(s.in_channels, s.out_channels, t_enc, t_dec, rng))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Self { backbone, heads })
    }

    /// Backbone only; inference never touches the heads.
    pub fn without_heads(&self) -> Self {
        Self {
            backbone: self.backbone.clone(),
            heads: None,
        }
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.logits(images)
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.embed(images)
    }
}

impl Parameterized for GraphJigsawModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        for (s, h) in self.heads.iter().flatten().enumerate() {
            h.visit(&join(prefix, &format!("jigsaw.stage{}", s + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        for (s, h) in self.heads.iter_mut().flatten().enumerate() {
            h.visit_mut(&join(prefix, &format!("jigsaw.stage{}", s + 1)), f);
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.backbone.visit_buffers(&join(prefix, "backbone"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_buffers_mut(&join(prefix, "backbone"), f);
    }
}

/// What happened during one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub lr: f64,
    pub loss_cls: f64,
    /// `(stage, ζ_jig)` for every stage whose jigsaw loss was computed.
    pub loss_jig: Vec<(usize, f64)>,
    pub loss_total: f64,
    /// Training-mode classification accuracy on this batch.
    pub accuracy: f64,
}

const PERMUTATION_DOMAIN: u64 = 0x6a69_6773_6177_0001;

/// Stochastic gradient descent with momentum and L2 weight decay.
pub struct Trainer {
    pub model: GraphJigsawModel,
    config: TrainConfig,
    total_iterations: u64,
    iteration: u64,
    velocity: BTreeMap<String, Tensor>,
}

impl Trainer {
    pub fn new(model: GraphJigsawModel, config: TrainConfig, iterations_per_epoch: usize) -> Result<Self> {
        config.validate(model.backbone.config())?;
        if config.jigsaw.enabled() && model.heads.is_none() {
            return Err(Error::Config(String::from("jigsaw loss enabled but model has no jigsaw heads")));
        }
        Ok(Self {
            model,
            total_iterations: (config.epochs * iterations_per_epoch.max(1)) as u64,
            config,
            iteration: 0,
            velocity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn total_iterations(&self) -> u64 {
        self.total_iterations
    }

    /// Momentum buffers keyed by parameter name.
    pub fn optimizer_state(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn restore(&mut self, iteration: u64, velocity: BTreeMap<String, Tensor>) {
        self.iteration = iteration;
        self.velocity = velocity;
    }

    /// Stages whose jigsaw loss will be computed at `iteration`.
    pub fn active_stages(&self, iteration: u64) -> Vec<usize> {
        if !self.config.jigsaw.enabled() {
            return Vec::new();
        }
        self.config
            .jigsaw
            .stage_mode
            .active(iteration, self.model.backbone.config().stages())
    }

    /// Per-sample permutations for `iteration`, reproducible from the seed alone.
    fn permutations(&self, iteration: u64, stage: usize, batch: usize) -> Result<Vec<Permutation>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ PERMUTATION_DOMAIN);
        rng.set_stream(iteration.wrapping_mul(64).wrapping_add(stage as u64));
        (0..batch)
            .map(|_| sample_permutation(self.config.jigsaw.grid, &mut rng))
            .collect()
    }

    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepReport> {
        let iteration = self.iteration;
        let batch = images.shape().first().copied().unwrap_or(0);
        if labels.len() != batch {
            return Err(Error::Shape {
                context: "labels per image",
                expected: alloc::vec![batch],
                found: alloc::vec![labels.len()],
            });
        }
        let num_classes = self.model.backbone.config().num_classes;
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {bad} out of range for {num_classes} classes")));
        }
        let active = self.active_stages(iteration);
        let lambda = self.config.jigsaw.lambda;

        let mut g = Graph::new();
        let input = g.constant(images.clone());
        let out = self
            .model
            .backbone
            .forward_graph(&mut g, input, Binding::Trainable, Mode::Train)?;
        let cls = g.softmax_cross_entropy(out.logits, labels)?;
        let loss_cls = g.value(cls).item();

        let mut total = cls;
        let mut loss_jig = Vec::with_capacity(active.len());
        let mut head_vars: Vec<(usize, Vec<Var>)> = Vec::with_capacity(active.len());
        if let Some(heads) = &self.model.heads {
            for &s in &active {
                let perms = self.permutations(iteration, s, batch)?;
                let vars = heads[s - 1].bind(&mut g, Binding::Trainable);
                let (x_in, x_out) = out.stages[s - 1];
                let jig = batch_jigsaw(&mut g, &vars, x_in, x_out, self.config.jigsaw.grid, &perms)?;
                loss_jig.push((s, g.value(jig.loss).item()));
                let term = g.scale(jig.loss, lambda);
                total = g.add(total, term)?;
                head_vars.push((s, vars.all()));
            }
        }
        let loss_total = total_loss(loss_cls, &loss_jig, lambda)?;

        let grads = g.backward(total);
        let mut named = BTreeMap::new();
        collect_grads(&self.model.backbone, "backbone", &out.params, &grads, &mut named);
        if let Some(heads) = &self.model.heads {
            for (s, vars) in &head_vars {
                collect_grads(&heads[s - 1], &format!("jigsaw.stage{s}"), vars, &grads, &mut named);
            }
        }
        if let Some((name, _)) = named.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }

        let accuracy = batch_accuracy(g.value(out.logits), labels);
        let lr = self.config.lr_at(iteration, self.total_iterations);
        self.apply(&named, lr);
        self.model.backbone.update_running_stats(&out.stats);
        self.iteration += 1;
        Ok(StepReport {
            iteration,
            lr,
            loss_cls,
            loss_jig,
            loss_total,
            accuracy,
        })
    }

    /// Parameters without a gradient this step (inactive heads) are left untouched.
    fn apply(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        let velocity = &mut self.velocity;
        self.model.visit_mut("", &mut |name, p| {
            let Some(grad) = grads.get(&name) else { return };
            let v = velocity.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            for ((w, &dw), vel) in p.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                *vel = mu * *vel + dw + wd * *w;
                *w -= lr * *vel;
            }
        });
    }
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
