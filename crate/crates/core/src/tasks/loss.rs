//! End-point error, scale-invariant log loss and depth metrics.

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Variance weight of the scale-invariant log loss.
pub const SILOG_LAMBDA: f64 = 0.85;
pub const EPE_EPS: f64 = 1e-8;
pub const SILOG_EPS: f64 = 1e-16;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn epe_with(pred: &Tensor, gt: &Tensor, eps: f64) -> Result<f64> {
    check_same("epe", pred, gt)?;
    let n = pred.len() / 2;
    let total: f64 = pred
        .data()
        .chunks_exact(2)
        .zip(gt.data().chunks_exact(2))
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + eps).sqrt())
        .sum();
    Ok(total / n as f64)
}

/// Mean end-point error with the `1e-8` smoothing used in training.
pub fn epe_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    epe_with(pred, gt, EPE_EPS)
}

/// Mean end-point error, unsmoothed.
pub fn epe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    epe_with(pred, gt, 0.0)
}

/// Differentiable EPE of an `(H * W) x 2` prediction.
pub fn epe_loss_var<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    let gt = pred.tape().leaf(gt.reshape(&pred.shape())?);
    pred.sub(gt)?.square()?.sum_rows()?.add_scalar(EPE_EPS)?.sqrt()?.mean_all()
}

fn log_residuals(pred_log: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    check_same("silog", pred_log, gt)?;
    if gt.data().iter().any(|&g| g <= 0.0) {
        return Err(Error::Data("ground-truth depth must be positive".into()));
    }
    Ok(pred_log.data().iter().zip(gt.data()).map(|(p, g)| p - g.ln()).collect())
}

/// `sqrt(mean(d^2) - lambda mean(d)^2)` with `d = pred_log - ln(gt)`.
pub fn silog_loss(pred_log: &Tensor, gt: &Tensor, lambda: f64) -> Result<f64> {
    let d = log_residuals(pred_log, gt)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let mean_sq = d.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((mean_sq - lambda * mean * mean).max(0.0).sqrt())
}

/// Differentiable SILog with `1e-16` inside the root.
pub fn silog_loss_var<'t>(pred_log: Var<'t>, gt: &Tensor, lambda: f64) -> Result<Var<'t>> {
    if gt.data().iter().any(|&g| g <= 0.0) {
        return Err(Error::Data("ground-truth depth must be positive".into()));
    }
    let log_gt = gt.map("ln", f64::ln)?.reshape(&pred_log.shape())?;
    let d = pred_log.sub(pred_log.tape().leaf(log_gt))?;
    let mean = d.mean_all()?;
    d.square()?
        .mean_all()?
        .sub(mean.square()?.scale(lambda)?)?
        .add_scalar(SILOG_EPS)?
        .sqrt()
}

/// Mean `|exp(pred) - gt| / gt`.
pub fn abs_rel(pred_log: &Tensor, gt: &Tensor) -> Result<f64> {
    log_residuals(pred_log, gt)?;
    let n = gt.len() as f64;
    Ok(pred_log
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p.exp() - g).abs() / g)
        .sum::<f64>()
        / n)
}

/// Root mean squared error of `exp(pred)` against `gt`.
pub fn rmse(pred_log: &Tensor, gt: &Tensor) -> Result<f64> {
    log_residuals(pred_log, gt)?;
    let n = gt.len() as f64;
    Ok((pred_log
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p.exp() - g).powi(2))
        .sum::<f64>()
        / n)
        .sqrt())
}
