//! Central-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{Graph, Mode, NodeId};
use crate::layers::Sequential;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Graph seed used for every evaluation, so dropout masks stay fixed.
const CHECK_SEED: u64 = 0x5eed;

/// Gradients below this magnitude are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub failures: usize,
    pub tol: f64,
    pub pass: bool,
}

pub type GradMap = BTreeMap<String, Tensor>;

/// Loss heads for checking a plain [`Sequential`].
#[derive(Debug, Clone)]
pub enum Loss {
    Bce(Tensor),
    Mse(Tensor),
    WeightedSum(Tensor),
}

impl Loss {
    pub fn apply(&self, g: &mut Graph, out: NodeId) -> Result<NodeId> {
        match self {
            Loss::Bce(t) => {
                let t = g.constant(t.clone())?;
                g.bce_mean(out, t)
            }
            Loss::Mse(t) => {
                let t = g.constant(t.clone())?;
                g.mse_mean(out, t)
            }
            Loss::WeightedSum(w) => {
                let w = g.constant(w.clone())?;
                g.weighted_sum(out, w)
            }
        }
    }
}

fn eval_loss<F>(params: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new(Mode::Train, CHECK_SEED);
    let loss = build(&mut g, params)?;
    Ok(g.value(loss).item())
}

/// Gradients of the scalar produced by `build` via the backward pass.
pub fn analytic_gradients<F>(params: &ParamStore, build: &F) -> Result<GradMap>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut work = params.clone();
    work.zero_grads();
    let mut g = Graph::new(Mode::Train, CHECK_SEED);
    let loss = build(&mut g, &work)?;
    g.backward(loss, &Tensor::scalar(1.0), &mut work)?;
    Ok(work
        .iter()
        .map(|(name, p)| {
            let grad = p
                .grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            (name.to_string(), grad)
        })
        .collect())
}

/// Central differences `(f(θ + h) - f(θ - h)) / 2h` for every scalar parameter.
pub fn numerical_gradients<F>(params: &ParamStore, build: &F, h: f64) -> Result<GradMap>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut out = GradMap::new();
    for name in names {
        let len = work.value(&name)?.len();
        let mut grad = Tensor::zeros(work.value(&name)?.shape());
        for i in 0..len {
            let orig = work.value(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let plus = eval_loss(&work, build)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let minus = eval_loss(&work, build)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn compare_gradients(analytic: &GradMap, numeric: &GradMap, tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        failures: 0,
        tol,
        pass: true,
    };
    for (name, num) in numeric {
        let Some(ana) = analytic.get(name) else {
            report.failures += num.len();
            report.pass = false;
            continue;
        };
        for (i, (&a, &n)) in ana.data().iter().zip(num.data()).enumerate() {
            let err = relative_error(a, n);
            report.checked += 1;
            if err > tol || !err.is_finite() {
                report.failures += 1;
            }
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report.pass = report.failures == 0;
    report
}

/// Checks every parameter gradient of an arbitrary scalar-valued graph.
pub fn grad_check_with<F>(params: &ParamStore, build: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let analytic = analytic_gradients(params, &build)?;
    let numeric = numerical_gradients(params, &build, h)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

/// Entries checked by [`grad_check_sampled`]: all of them up to `max`,
/// otherwise `max` evenly strided positions.
pub fn sampled_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|k| k * len / max).collect()
}

/// Like [`grad_check_with`], but central differences are taken only at
/// [`sampled_indices`] of each parameter tensor.
pub fn grad_check_sampled<F>(
    params: &ParamStore,
    build: F,
    h: f64,
    tol: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let analytic = analytic_gradients(params, &build)?;
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        failures: 0,
        tol,
        pass: true,
    };
    for name in names {
        let len = work.value(&name)?.len();
        for i in sampled_indices(len, max_per_param) {
            let orig = work.value(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let plus = eval_loss(&work, &build)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let minus = eval_loss(&work, &build)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[&name].data()[i], numeric);
            report.checked += 1;
            if err > tol || !err.is_finite() {
                report.failures += 1;
            }
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report.pass = report.failures == 0;
    Ok(report)
}

pub fn grad_check(
    layers: &Sequential,
    params: &ParamStore,
    input: &Tensor,
    loss: &Loss,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_with(
        params,
        |g, p| {
            let x = g.constant(input.clone())?;
            let out = layers.apply(g, p, x)?;
            loss.apply(g, out)
        },
        h,
        tol,
    )
}
