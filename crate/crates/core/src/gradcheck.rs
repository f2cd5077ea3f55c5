//! Central finite-difference gradient checks.

use ndarray::Array2;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

/// Denominator floor for the relative error of near-zero gradients.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Worst mismatch found by a parameter check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub worst_relative_error: f64,
    pub worst_param: String,
    pub worst_index: (usize, usize),
    pub checked: usize,
}

/// Checks d(loss)/d(input) for every entry of every input leaf.
pub fn check_input_gradients<F>(inputs: &[Array2<f64>], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array2<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.input(v.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.input(v.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss);

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let zeros = Array2::zeros(inputs[k].dim());
        let analytic = grads.wrt(var).unwrap_or(&zeros).clone();
        for idx in 0..inputs[k].len() {
            let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let orig = values[k][[r, c]];
            values[k][[r, c]] = orig + h;
            let plus = eval(&values)?;
            values[k][[r, c]] = orig - h;
            let minus = eval(&values)?;
            values[k][[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[[r, c]], numeric));
        }
    }
    Ok(worst)
}

/// Checks d(loss)/d(param) for the selected parameters (all when `only` is empty).
pub fn check_param_gradients<F>(
    store: &ParamStore,
    only: &[ParamId],
    h: f64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss);

    let mut report = GradReport {
        worst_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: (0, 0),
        checked: 0,
    };
    let mut work = store.clone();
    let ids: Vec<ParamId> = if only.is_empty() {
        store.ids().collect()
    } else {
        only.to_vec()
    };
    for id in ids {
        let param = store.get(id);
        if !param.trainable {
            continue;
        }
        let zeros = Array2::zeros(param.value.dim());
        let analytic = grads.param(id).unwrap_or(&zeros);
        for ((r, c), &orig) in param.value.indexed_iter() {
            if param.frozen_rows.contains(&r) {
                continue;
            }
            work.value_mut(id)[[r, c]] = orig + h;
            let plus = eval_loss(&work, &build)?;
            work.value_mut(id)[[r, c]] = orig - h;
            let minus = eval_loss(&work, &build)?;
            work.value_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[[r, c]], numeric);
            report.checked += 1;
            if err > report.worst_relative_error {
                report.worst_relative_error = err;
                report.worst_param = param.name.clone();
                report.worst_index = (r, c);
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    Ok(g.scalar(loss))
}
