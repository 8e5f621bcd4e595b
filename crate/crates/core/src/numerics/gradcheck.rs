use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

use super::{Graph, Tensor, Var};

/// Output of a differentiated evaluation: the op value and the gradient of
/// `sum(value)` with respect to every named input.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub value: Tensor,
    pub grads: BTreeMap<String, Tensor>,
}

/// Builds a graph from `inputs` (each bound as a named parameter) and runs `f` on it.
pub fn eval_with_grads<F>(inputs: &BTreeMap<String, Tensor>, f: F) -> Result<GradResult>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = inputs
        .iter()
        .map(|(n, t)| (n.clone(), g.param(n.clone(), t.clone())))
        .collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let grads = vars
        .iter()
        .map(|(n, &v)| (n.clone(), grads.get_or_zeros(v, g.value(v))))
        .collect();
    Ok(GradResult {
        value: g.value(out).clone(),
        grads,
    })
}

fn eval_value<F>(inputs: &BTreeMap<String, Tensor>, f: &F) -> Result<Tensor>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = inputs
        .iter()
        .map(|(n, t)| (n.clone(), g.leaf(t.clone())))
        .collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `sum(f(inputs))` against central differences.
pub fn grad_check<F>(
    f: F,
    inputs: &BTreeMap<String, Tensor>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let analytic = eval_with_grads(inputs, &f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe = inputs.clone();
    for (name, t) in inputs {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < t.len() => sample(&mut rng, t.len(), k).into_vec(),
            _ => (0..t.len()).collect(),
        };
        let grad = &analytic.grads[name];
        for i in coords {
            let x = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x + cfg.eps;
            let plus = eval_value(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x - cfg.eps;
            let minus = eval_value(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x;
            // summing elementwise differences keeps untouched outputs exactly cancelled
            let diff: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .map(|(p, m)| p - m)
                .sum();
            let numeric = diff / (2.0 * cfg.eps);
            let err = relative_error(grad.data()[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_input.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_input = name.clone();
                report.worst_index = i;
                report.worst_analytic = grad.data()[i];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_has_exact_gradient() {
        let inputs = BTreeMap::from([("x".to_string(), Tensor::new(&[1], vec![0.7]).unwrap())]);
        let r = grad_check(
            |g, v| Ok(g.scale(v["x"], 3.0)),
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        let res = eval_with_grads(&inputs, |g, v| Ok(g.scale(v["x"], 3.0))).unwrap();
        assert_eq!(res.grads["x"].data(), &[3.0]);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // y = x * x but with the product recorded through a detached copy of x
        let inputs = BTreeMap::from([("x".to_string(), Tensor::new(&[1], vec![1.5]).unwrap())]);
        let r = grad_check(
            |g, v| {
                let c = g.leaf(g.value(v["x"]).clone());
                g.mul(v["x"], c)
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
