//! Central finite-difference oracle for tape gradients.

use crate::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Magnitudes below this are compared absolutely; FD rounding noise sits
/// around 1e-11 for O(1) losses.
pub const FD_ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, flat entry, analytic, numeric) at the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR)
}

fn eval(f: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Analytic gradients of a scalar-valued graph builder.
pub fn analytic_gradients(f: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    vars.iter().map(|&v| grads.get(v)).collect()
}

/// Entry-wise comparison. `entries` limits how many entries per input are
/// probed (evenly strided); `None` probes all of them.
pub fn check_entries(
    f: &dyn Fn(&mut Graph, &[Var]) -> Var,
    inputs: &[Tensor],
    entries: Option<usize>,
) -> GradCheck {
    let analytic = analytic_gradients(f, inputs);
    let mut report = GradCheck { checked: 0, max_rel_err: 0.0, worst: None };
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = match entries {
            Some(e) if e > 0 && e < n => n.div_ceil(e),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(f, &plus) - eval(f, &minus)) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report
}

/// Directional comparison along `direction` (same shapes as `inputs`).
pub fn check_direction(
    f: &dyn Fn(&mut Graph, &[Var]) -> Var,
    inputs: &[Tensor],
    direction: &[Tensor],
) -> (f64, f64) {
    let analytic = analytic_gradients(f, inputs);
    let a: f64 = analytic
        .iter()
        .zip(direction)
        .map(|(g, d)| g.data().iter().zip(d.data()).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    let shifted = |s: f64| -> Vec<Tensor> {
        inputs
            .iter()
            .zip(direction)
            .map(|(t, d)| {
                let mut t = t.clone();
                for (x, y) in t.data_mut().iter_mut().zip(d.data()) {
                    *x += s * y;
                }
                t
            })
            .collect()
    };
    let numeric = (eval(f, &shifted(FD_STEP)) - eval(f, &shifted(-FD_STEP))) / (2.0 * FD_STEP);
    (a, numeric)
}
