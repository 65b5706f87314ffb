//! Central finite-difference checks of graph gradients (64-bit).

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradCheck {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            checked: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }

    pub fn merge(mut self, other: GradCheck) -> Self {
        if other.max_rel_error > self.max_rel_error {
            self.worst = other.worst;
            self.max_rel_error = other.max_rel_error;
        }
        self.checked += other.checked;
        self
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Evenly spread element indices, at most `max` of them.
fn probe_indices(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let mut out: Vec<usize> = (0..max).map(|i| i * (numel - 1) / (max - 1).max(1)).collect();
    out.dedup();
    out
}

fn scalar_of(v: &Var<f64>) -> Result<f64> {
    v.value().item()
}

/// Check gradients of `f` with respect to each of `inputs`.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    step: f64,
    max_per_tensor: usize,
    f: impl Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
) -> Result<GradCheck> {
    let g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(&loss)?;
    let mut report = GradCheck::empty();
    for (k, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.wrt(var).unwrap_or(&zeros);
        for i in probe_indices(input.numel(), max_per_tensor) {
            let eval = |delta: f64| -> Result<f64> {
                let g = Graph::inference();
                let vars: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        g.constant(t)
                    })
                    .collect();
                scalar_of(&f(&g, &vars)?)
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            report.record(analytic.data()[i], numeric, || format!("input {k}[{i}]"));
        }
    }
    Ok(report)
}

/// Check gradients of `f` with respect to every trainable parameter.
pub fn check_params(
    store: &ParamStore<f64>,
    step: f64,
    max_per_tensor: usize,
    f: impl Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
) -> Result<GradCheck> {
    let g = Graph::new();
    let loss = f(&g, store)?;
    let grads = g.backward(&loss)?;
    let mut report = GradCheck::empty();
    let mut work = store.clone();
    for (id, entry) in store.iter() {
        if !entry.trainable {
            continue;
        }
        let zeros = Tensor::zeros(entry.value.shape());
        let analytic = grads.param(id).unwrap_or(&zeros);
        for i in probe_indices(entry.value.numel(), max_per_tensor) {
            let original = entry.value.data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[i] = x;
                let g = Graph::inference();
                scalar_of(&f(&g, &work)?)
            };
            let numeric = (eval(original + step)? - eval(original - step)?) / (2.0 * step);
            work.value_mut(id).data_mut()[i] = original;
            report.record(analytic.data()[i], numeric, || format!("{}[{i}]", entry.name));
        }
    }
    if report.checked == 0 {
        return Err(Error::invalid("gradient check found no trainable parameters"));
    }
    Ok(report)
}
