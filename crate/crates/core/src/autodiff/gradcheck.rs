//! Finite-difference verification of autodiff gradients.

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// One compared gradient entry.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    g.value(out).item().ok_or_else(|| {
        Error::Usage(format!(
            "grad_check closure must return a scalar, got shape {:?}",
            g.shape(out)
        ))
    })
}

/// Autodiff gradients of `f` at `inputs`, one tensor per input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = scalar_output(&g, out)?;
    g.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_output(&g, out)
}

/// Compares autodiff against central differences `(f(x+h) − f(x−h)) / 2h`
/// on the listed `(input index, element index)` pairs.
pub fn grad_check_entries<F>(f: F, inputs: &[Tensor], entries: &[(usize, usize)], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Usage(format!("grad_check step must be positive, got {step}")));
    }
    let (_, analytic) = analytic_gradients(&f, inputs)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for &(i, e) in entries {
        let original = work[i].data()[e];
        work[i].data_mut()[e] = original + step;
        let plus = evaluate(&f, &work)?;
        work[i].data_mut()[e] = original - step;
        let minus = evaluate(&f, &work)?;
        work[i].data_mut()[e] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i].data()[e];
        report.entries.push(GradCheckEntry {
            input: i,
            element: e,
            analytic: a,
            numeric,
            relative_error: relative_error(a, numeric),
        });
    }
    Ok(report)
}

/// Maximum relative error over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    Ok(grad_check_entries(f, inputs, &entries, step)?.max_relative_error())
}
