//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

/// Gradient magnitude below which an element is judged by absolute error.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGradError {
    pub max_rel: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamGradError>,
    pub max_rel: f64,
    pub max_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares backward-pass gradients of `f` against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every element of every parameter.
///
/// An element passes when its relative error is within `tol`, or, when both
/// gradients are smaller than [`ABS_FLOOR`], when its absolute error is.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::InvalidArgument(format!(
            "grad_check: eps must lie in (0, 1e-3], got {eps}"
        )));
    }
    let leaves: Vec<Tensor> = params.iter().map(|p| p.to_leaf(true)).collect();
    let loss = f(&leaves)?;
    if !loss.item()?.is_finite() {
        return Err(TensorError::InvalidArgument(
            "grad_check: objective is not finite at the unperturbed point".into(),
        ));
    }
    loss.backward()?;

    let mut report = GradReport {
        params: Vec::with_capacity(leaves.len()),
        max_rel: 0.0,
        max_abs: 0.0,
        tolerance: tol,
        pass: true,
    };
    let mut probe: Vec<Tensor> = leaves.iter().map(|p| p.detach()).collect();
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut err = ParamGradError {
            max_rel: 0.0,
            max_abs: 0.0,
        };
        let mut values = leaf.data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = values[j];
            let mut eval = |x: f64| -> Result<f64> {
                values[j] = x;
                probe[pi] = Tensor::new(values.clone(), leaf.shape())?;
                let v = no_grad(|| f(&probe))?.item()?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(TensorError::NonFinite {
                        param: pi,
                        index: j,
                    })
                }
            };
            let plus = eval(orig + eps)?;
            let minus = eval(orig - eps)?;
            values[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let ok = if scale < ABS_FLOOR {
                abs <= tol
            } else {
                let rel = abs / scale;
                err.max_rel = err.max_rel.max(rel);
                rel <= tol
            };
            err.max_abs = err.max_abs.max(abs);
            report.pass &= ok;
        }
        probe[pi] = leaf.detach();
        report.max_rel = report.max_rel.max(err.max_rel);
        report.max_abs = report.max_abs.max(err.max_abs);
        report.params.push(err);
    }
    Ok(report)
}
