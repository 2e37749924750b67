//! Named parameter traversal shared by models, optimizers, and checkpoints.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A model component owning named tensors.
///
/// `visit` and `visit_mut` must traverse parameters in the same order, and
/// bound-variable lists returned by a component's `bind` follow that order too.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    /// Non-trainable state (e.g. running statistics), saved with checkpoints.
    fn visit_buffers<'a>(&'a self, _prefix: &str, _f: &mut dyn FnMut(String, &'a Tensor)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Tensor)) {}

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_buffers(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit_buffers(prefix, &mut |name, t| out.push((name, t)));
        out
    }

    /// Overwrite parameters and buffers from a name → tensor map, checking shapes.
    fn load_from(&mut self, prefix: &str, source: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut failure = None;
        let mut load = |name: String, t: &mut Tensor| {
            if failure.is_some() {
                return;
            }
            match source.get(&name) {
                Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
                Some(src) => {
                    failure = Some(Error::Shape {
                        context: "parameter load",
                        expected: t.shape().to_vec(),
                        found: src.shape().to_vec(),
                    })
                }
                None => failure = Some(Error::MissingParameter(name)),
            }
        };
        self.visit_mut(prefix, &mut load);
        self.visit_buffers_mut(prefix, &mut load);
        failure.map_or(Ok(()), Err)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// How parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

pub(crate) fn bind(g: &mut Graph, t: &Tensor, binding: Binding) -> Var {
    match binding {
        Binding::Trainable => g.param(t.clone()),
        Binding::Frozen => g.constant(t.clone()),
    }
}

/// Collect gradients for `vars` (bound in `visit` order) keyed by parameter name.
pub fn collect_grads<P: Parameterized + ?Sized>(
    module: &P,
    prefix: &str,
    vars: &[Var],
    grads: &Gradients,
    out: &mut BTreeMap<String, Tensor>,
) {
    let named = module.named_params(prefix);
    debug_assert_eq!(named.len(), vars.len());
    for ((name, t), var) in named.into_iter().zip(vars) {
        out.insert(name, grads.get_or_zeros(*var, t.shape()));
    }
}

/// Zero-mean uniform initialization with half-width `1/√fan_in`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
