//! Optimal-transport conditional flow matching.
//!
//! The path from noise `x0` to data `x1` is
//! `x_t = (1 - (1 - sigma_min) t) x0 + t x1`, whose velocity
//! `u = x1 - (1 - sigma_min) x0` does not depend on `t`.

use rand::Rng;
use rand_distr::StandardNormal;
use symupe_tensor::Array;
use thiserror::Error;

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("flow time {0} outside [0, 1]")]
    Domain(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn check_t(t: f64) -> Result<(), FlowError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(FlowError::Domain(t))
    }
}

fn same_shape(a: &Array, b: &Array) -> Result<(), FlowError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(FlowError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

pub fn ot_interpolate(x0: &Array, x1: &Array, t: f64, sigma_min: f64) -> Result<Array, FlowError> {
    check_t(t)?;
    same_shape(x0, x1)?;
    let a = 1.0 - (1.0 - sigma_min) * t;
    Ok(x0.zip_map(x1, |p, q| a * p + t * q).expect("shapes checked"))
}

pub fn ot_target_field(x0: &Array, x1: &Array, sigma_min: f64) -> Result<Array, FlowError> {
    same_shape(x0, x1)?;
    let c = 1.0 - sigma_min;
    Ok(x0.zip_map(x1, |p, q| q - c * p).expect("shapes checked"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    /// Set when no entry was masked and the loss is zero by convention.
    pub degenerate: bool,
}

/// Mean squared error over the entries of masked rows.
pub fn masked_cfm_loss(v_pred: &Array, u_target: &Array, mask: &[bool]) -> Result<MaskedLoss, FlowError> {
    same_shape(v_pred, u_target)?;
    if v_pred.rows() != mask.len() {
        return Err(FlowError::Shape(format!("{} rows, mask of {}", v_pred.rows(), mask.len())));
    }
    let cols = v_pred.cols();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (p, q) in v_pred.row(i).iter().zip(u_target.row(i)) {
            sum += (p - q) * (p - q);
        }
        count += cols;
    }
    if count == 0 {
        return Ok(MaskedLoss { value: 0.0, degenerate: true });
    }
    Ok(MaskedLoss { value: sum / count as f64, degenerate: false })
}

/// `alpha * v_cond + (1 - alpha) * v_uncond`; `alpha > 1` extrapolates.
pub fn guided_field(v_cond: &Array, v_uncond: &Array, alpha: f64) -> Result<Array, FlowError> {
    same_shape(v_cond, v_uncond)?;
    if alpha == 1.0 {
        return Ok(v_cond.clone());
    }
    if alpha == 0.0 {
        return Ok(v_uncond.clone());
    }
    // written as a step from v_uncond so equal inputs come back unchanged
    Ok(v_cond.zip_map(v_uncond, |c, u| u + alpha * (c - u)).expect("shapes checked"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTarget {
    pub t: f64,
    pub x0: Array,
    pub x_t: Array,
    /// Data with masked rows zeroed.
    pub x_ctx: Array,
    pub u: Array,
}

/// Draws `t ~ U[0, 1]` and `x0 ~ N(0, I)` and builds the regression target.
pub fn make_training_target<R: Rng + ?Sized>(
    x1: &Array,
    mask: &[bool],
    rng: &mut R,
    sigma_min: f64,
) -> Result<TrainingTarget, FlowError> {
    if x1.rows() != mask.len() {
        return Err(FlowError::Shape(format!("{} rows, mask of {}", x1.rows(), mask.len())));
    }
    let t: f64 = rng.random();
    let x0 = Array::from_fn(x1.shape(), |_| rng.sample(StandardNormal));
    let x_t = ot_interpolate(&x0, x1, t, sigma_min)?;
    let u = ot_target_field(&x0, x1, sigma_min)?;
    let mut x_ctx = x1.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            x_ctx.row_mut(i).fill(0.0);
        }
    }
    Ok(TrainingTarget { t, x0, x_t, x_ctx, u })
}
