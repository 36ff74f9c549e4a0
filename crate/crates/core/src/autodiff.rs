//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every differentiable operation returns a [`Var`] that remembers its
//! parents and a [`Backward`] rule. The resulting graph is the gradient
//! tape: [`Var::backward`] walks it in a fixed topological order, so replaying
//! the same tape always accumulates gradients in the same order and yields
//! bit-identical results.
//!
//! Inside [`no_grad`] nothing is recorded and intermediates are freed as soon
//! as their last handle is dropped, which keeps large inference runs cheap.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording a tape.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Vector-Jacobian product rule of a recorded operation.
pub trait Backward {
    fn name(&self) -> &'static str;

    /// Given the operation output and the gradient flowing into it, returns
    /// one gradient per parent (`None` for parents that take no gradient).
    fn backward(&self, out: &Tensor, grad: &Tensor, parents: &[Var]) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Handle to a value on the tape.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(|o| o.name()))
            .finish()
    }
}

impl Var {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad: false,
        }))
    }

    /// A leaf whose gradient is tracked (a trainable parameter or a
    /// differentiated input).
    pub fn param(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad: grad_enabled(),
        }))
    }

    /// Records the result of an operation. Outside of gradient mode, or when
    /// no parent needs a gradient, the parents are not retained.
    pub fn from_op(value: Tensor, parents: Vec<Var>, op: impl Backward + 'static) -> Var {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Var(Rc::new(Node {
                value,
                parents,
                op: Some(Box::new(op)),
                requires_grad: true,
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Extracts the value, cloning only if other handles still exist.
    pub fn into_value(self) -> Tensor {
        match Rc::try_unwrap(self.0) {
            Ok(node) => node.value,
            Err(rc) => rc.value.clone(),
        }
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Back-propagates from this scalar through the recorded graph.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value().numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topological_order();
        let index: HashMap<*const Node, usize> =
            order.iter().enumerate().map(|(i, v)| (v.key(), i)).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; order.len()];
        if let Some(last) = grads.last_mut() {
            *last = Some(Tensor::full(self.shape(), 1.0));
        }
        let mut leaves = HashMap::new();
        for (pos, var) in order.iter().enumerate().rev() {
            let Some(grad) = grads[pos].take() else {
                continue;
            };
            let node = &var.0;
            let Some(op) = node.op.as_ref() else {
                leaves.insert(var.key(), (var.clone(), grad));
                continue;
            };
            let parent_grads = op.backward(&node.value, &grad, &node.parents)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", op.name());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pg), true) = (pg, parent.requires_grad()) else {
                    continue;
                };
                if pg.shape() != parent.shape() {
                    return Err(Error::shape(format!(
                        "{}: gradient shape {:?} does not match parent {:?}",
                        op.name(),
                        pg.shape(),
                        parent.shape()
                    )));
                }
                let slot = &mut grads[index[&parent.key()]];
                *slot = Some(match slot.take() {
                    None => pg,
                    Some(acc) => acc.zip_map(&pg, |a, b| a + b)?,
                });
            }
        }
        Ok(Gradients { leaves })
    }

    /// Post-order over nodes that require a gradient; `self` comes last.
    fn topological_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        if !self.requires_grad() {
            return order;
        }
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.key());
        while let Some((var, next)) = stack.pop() {
            if next < var.0.parents.len() {
                let child = var.0.parents[next].clone();
                stack.push((var, next + 1));
                if child.requires_grad() && seen.insert(child.key()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(var);
            }
        }
        order
    }
}

/// Gradients of a scalar with respect to the leaves of its tape.
pub struct Gradients {
    leaves: HashMap<*const Node, (Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.leaves.get(&var.key()).map(|(_, g)| g)
    }

    /// Gradient of `var`, or zeros when no path reaches it.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// A named trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            gradient,
        }
    }

    pub fn zero_grad(&mut self) {
        self.gradient = Tensor::zeros(self.value.shape());
    }
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Worst-case disagreement between tape gradients and central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares tape gradients of the scalar `f(params)` with central finite
/// differences for every parameter element.
///
/// The relative error of each element uses
/// `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)` as denominator. Below the
/// floor, central differences of an O(1) loss in f64 cannot resolve the
/// gradient to four digits.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    grad_check_impl(f, params, eps, None)
}

/// Like [`grad_check`] but only probes `samples` randomly chosen elements per
/// parameter, for parameter sets too large to sweep exhaustively.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    grad_check_impl(f, params, eps, Some((samples, seed)))
}

fn grad_check_impl<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    sampling: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidValue(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let vars: Vec<Var> = params.iter().map(|p| Var::param(p.clone())).collect();
    let out = f(&vars)?;
    if out.value().numel() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = out.backward()?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(out);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        no_grad(|| {
            let vs: Vec<Var> = perturbed.iter().map(|t| Var::constant(t.clone())).collect();
            f(&vs)?.value().item()
        })
    };

    let mut rng = sampling.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut worst = 0.0_f64;
    let mut worst_at = None;
    let mut checked = 0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let indices: Vec<usize> = match (&mut rng, sampling) {
            (Some(rng), Some((samples, _))) if samples < param.numel() => {
                (0..samples).map(|_| rng.gen_range(0..param.numel())).collect()
            }
            _ => (0..param.numel()).collect(),
        };
        for idx in indices {
            let base = param.data()[idx];
            work[pi] = with_element(param, idx, base + eps);
            let plus = eval(&work)?;
            work[pi] = with_element(param, idx, base - eps);
            let minus = eval(&work)?;
            work[pi] = param.clone();
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if worst_at.is_none() || rel > worst {
                worst = rel;
                worst_at = Some((pi, idx, a, numeric));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
        worst: worst_at,
    })
}

fn with_element(t: &Tensor, idx: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[idx] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}
