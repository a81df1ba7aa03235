use super::{Tape, Tensor, TensorError, Var};
use crate::par::Execution;

pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Function value at the unperturbed parameters.
    pub value: f64,
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_relative_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.scalar(root);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite(format!("function value {v}")))
    }
}

/// Compares tape gradients of `f` against central differences
/// `(f(x + h) - f(x - h)) / 2h` for every coordinate of every parameter.
pub fn grad_check<F>(
    params: &[Tensor],
    step: f64,
    exec: Execution,
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, TensorError> + Sync + Send,
{
    if !(step > 0.0) {
        return Err(TensorError::BadStep(step));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(TensorError::NonFinite(format!("function value {value}")));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros_like(p)))
        .collect();
    for g in &analytic {
        if !g.is_finite() {
            return Err(TensorError::NonFinite("analytic gradient".into()));
        }
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |c| (pi, c)))
        .collect();
    let errors = exec.map(&coords, |&(pi, c)| -> Result<f64, TensorError> {
        let mut shifted = params.to_vec();
        let base = params[pi].data()[c];
        shifted[pi].data_mut()[c] = base + step;
        let plus = evaluate(&shifted, &f)?;
        shifted[pi].data_mut()[c] = base - step;
        let minus = evaluate(&shifted, &f)?;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[pi].data()[c];
        Ok((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()))
    });

    let mut report = GradCheckReport {
        value,
        max_relative_error: 0.0,
        worst: None,
        coordinates: coords.len(),
    };
    for (&coord, err) in coords.iter().zip(errors) {
        let err = err?;
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some(coord);
        }
    }
    Ok(report)
}
