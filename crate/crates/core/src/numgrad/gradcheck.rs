use serde::Serialize;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(autodiff: f64, finite_diff: f64) -> f64 {
    (autodiff - finite_diff).abs() / (autodiff.abs() + finite_diff.abs()).max(1e-8)
}

/// [`relative_error`] with Euclidean norms of whole gradient tensors.
pub fn tensor_relative_error(autodiff: &[f64], finite_diff: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut autodiff.iter().zip(finite_diff).map(|(a, b)| a - b));
    diff / (norm(&mut autodiff.iter().copied()) + norm(&mut finite_diff.iter().copied())).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub entries: usize,
    /// Norm-wise relative error of the whole gradient tensor.
    pub rel_err: f64,
    /// Worst elementwise relative error; dominated by round-off on entries
    /// whose gradient is near the finite-difference noise floor.
    pub max_entry_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest autodiff gradient magnitude, to show the check was not vacuous.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub value: f64,
    pub params: Vec<ParamReport>,
}

impl GradReport {
    /// Worst norm-wise relative error over all parameters.
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn param(&self, name: &str) -> Option<&ParamReport> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` receives a fresh tape and one leaf per parameter (in order) and must
/// return a single-element output. It is evaluated twice at the base point; a
/// mismatch means hidden state such as unfrozen sampler noise, and is rejected.
pub fn gradcheck<F>(f: F, params: &[(String, Tensor)]) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    if eval(&base)?.to_bits() != value.to_bits() {
        return Err(Error::Contract("function is not deterministic under a fixed seed".into()));
    }
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(params.len());
    let mut work = base.clone();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let ad = grads.get(vars[pi]);
        let mut max_entry_rel_err: f64 = 0.0;
        let mut fds = Vec::with_capacity(tensor.len());
        let mut max_abs_grad: f64 = 0.0;
        let mut max_abs_err: f64 = 0.0;
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            work[pi].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            fds.push(fd);
            max_entry_rel_err = max_entry_rel_err.max(relative_error(ad.data()[i], fd));
            max_abs_err = max_abs_err.max((ad.data()[i] - fd).abs());
            max_abs_grad = max_abs_grad.max(ad.data()[i].abs());
        }
        reports.push(ParamReport {
            name: name.clone(),
            entries: tensor.len(),
            rel_err: tensor_relative_error(ad.data(), &fds),
            max_entry_rel_err,
            max_abs_err,
            max_abs_grad,
        });
    }
    Ok(GradReport { value, params: reports })
}
