//! Central finite differences for checking analytic gradients.

use crate::error::Result;
use crate::model::{ForwardPass, Model};
use crate::tensor::{Graph, Tensor, Var};

/// Step used by the gradient checks.
pub const FD_STEP: f64 = 1e-6;

/// Magnitude below which errors are measured absolutely. Central
/// differences at `FD_STEP` carry about 1e-9 of rounding noise on O(1)
/// losses, so smaller gradients cannot be resolved relatively.
pub const REL_FLOOR: f64 = 1e-4;

/// `(f(+h) − f(−h)) / 2h` for each of `n` coordinates, where `f(i, d)`
/// evaluates the function with coordinate `i` shifted by `d`.
pub fn numeric_gradient(n: usize, h: f64, mut f: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..n).map(|i| (f(i, h) - f(i, -h)) / (2.0 * h)).collect()
}

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest [`relative_error`] and its index.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .enumerate()
        .fold(
            (0.0, 0),
            |best, (i, e)| if e > best.0 { (e, i) } else { best },
        )
}

/// A scalar recorded on a fresh graph from the model and input leaves,
/// plus the passes whose parameter gradients it depends on.
pub type Objective<'a> = dyn Fn(&Model, &mut Graph, &[Var]) -> Result<(Var, Vec<ForwardPass>)> + 'a;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_error: f64,
    /// Coordinate with the largest error, as `param[index]` or `inputN[index]`.
    pub worst: String,
    pub coordinates: usize,
    /// Coordinates that needed the smaller step.
    pub retried: usize,
}

fn value(model: &Model, inputs: &[Tensor], f: &Objective<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.input(t.shape(), t.data().to_vec(), false))
        .collect::<Result<Vec<_>>>()?;
    let (loss, _) = f(model, &mut g, &vars)?;
    Ok(g.scalar_value(loss))
}

/// Compares analytic gradients of `f` with central differences for every
/// input element and, if `params` is set, every parameter element. A
/// coordinate over `tol` is retried with a step a hundred times smaller,
/// since its difference quotient may straddle a ReLU or argmax kink.
///
/// Parameters are perturbed in place and restored bit-exactly.
pub fn check_gradients(
    model: &mut Model,
    inputs: &[Tensor],
    params: bool,
    tol: f64,
    f: &Objective<'_>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.input(t.shape(), t.data().to_vec(), true))
        .collect::<Result<Vec<_>>>()?;
    let (loss, passes) = f(model, &mut g, &vars)?;
    g.backward(loss)?;
    model.zero_grads();
    for p in &passes {
        model.accumulate_grads(&g, p)?;
    }

    let mut report = GradReport::default();
    let record = |report: &mut GradReport, (err, retried): (f64, bool), what: String| {
        report.coordinates += 1;
        report.retried += retried as usize;
        if err > report.max_error {
            report.max_error = err;
            report.worst = what;
        }
    };
    let compare =
        |eval: &mut dyn FnMut(f64) -> Result<f64>, analytic: f64| -> Result<(f64, bool)> {
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let err = relative_error(analytic, numeric);
            if err <= tol {
                return Ok((err, false));
            }
            let h = FD_STEP * 1e-2;
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            Ok((err.min(relative_error(analytic, numeric)), true))
        };

    if params {
        let analytic: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| {
                p.tensor
                    .grad()
                    .map_or(vec![0.0; p.tensor.numel()], <[f64]>::to_vec)
            })
            .collect();
        for (pi, grads) in analytic.iter().enumerate() {
            for (j, &a) in grads.iter().enumerate() {
                let original = model.params()[pi].tensor.data()[j];
                let mut eval = |d: f64| {
                    model.params_mut()[pi].tensor.data_mut()[j] = original + d;
                    let v = value(model, inputs, f);
                    model.params_mut()[pi].tensor.data_mut()[j] = original;
                    v
                };
                let outcome = compare(&mut eval, a)?;
                record(
                    &mut report,
                    outcome,
                    format!("{}[{j}]", model.params()[pi].name),
                );
            }
        }
    }

    for (ii, (t, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec);
        for (j, &a) in analytic.iter().enumerate() {
            let mut eval = |d: f64| {
                let mut shifted = inputs.to_vec();
                shifted[ii].data_mut()[j] += d;
                value(model, &shifted, f)
            };
            let outcome = compare(&mut eval, a)?;
            record(&mut report, outcome, format!("input{ii}[{j}]"));
        }
    }
    Ok(report)
}
