use serde::{Deserialize, Serialize};

use crate::diffnum::{linalg, Tape, Tensor, Var};
use crate::error::Result;
use crate::par::Exec;

/// Squared-exponential kernel `σ² exp(-‖a - b‖² / 2l²)`, stored in log space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    pub log_sigma: f64,
    pub log_lengthscale: f64,
}

impl Default for RbfKernel {
    fn default() -> Self {
        RbfKernel {
            log_sigma: 0.0,
            log_lengthscale: 0.0,
        }
    }
}

impl RbfKernel {
    pub fn new(sigma: f64, lengthscale: f64) -> Self {
        RbfKernel {
            log_sigma: sigma.ln(),
            log_lengthscale: lengthscale.ln(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    /// `k(z, z)`.
    pub fn variance(&self) -> f64 {
        (2.0 * self.log_sigma).exp()
    }

    /// Entry for a given squared distance.
    #[inline]
    pub fn eval_sq(&self, sq: f64) -> f64 {
        (2.0 * self.log_sigma - 0.5 * sq * (-2.0 * self.log_lengthscale).exp()).exp()
    }
}

pub fn kernel_matrix(kern: &RbfKernel, z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    kernel_matrix_with(Exec::default(), kern, z1, z2)
}

/// Gram matrix between the rows of `z1` and `z2`.
pub fn kernel_matrix_with(exec: Exec, kern: &RbfKernel, z1: &Tensor, z2: &Tensor) -> Result<Tensor> {
    let d = linalg::sqdist_with(exec, z1, z2)?;
    Ok(d.map(|sq| kern.eval_sq(sq)))
}

/// Gram matrix on the tape, differentiable in both inputs and both
/// log-hyperparameters (each `1 x 1`).
pub fn kernel_on_tape(tape: &mut Tape, log_sigma: Var, log_lengthscale: Var, z1: Var, z2: Var) -> Result<Var> {
    let sq = tape.sqdist(z1, z2)?;
    let neg2 = tape.scale(log_lengthscale, -2.0);
    let inv_l2 = tape.exp(neg2);
    let scaled = tape.mul_scalar(sq, inv_l2)?;
    let half = tape.scale(scaled, -0.5);
    let log_var = tape.scale(log_sigma, 2.0);
    let expo = tape.add_scalar(half, log_var)?;
    Ok(tape.exp(expo))
}
