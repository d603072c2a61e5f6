//! Exact Gaussian-process regression, used as the small-N reference for the
//! sparse head.

use std::f64::consts::PI;

use crate::diffnum::{adam_step, linalg, value_and_grad, AdamConfig, AdamState, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::kernel::{kernel_matrix, kernel_on_tape, RbfKernel};

/// Variances below this are reported before clamping to zero.
pub(crate) const NEGATIVE_VARIANCE_TOL: f64 = -1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactGp {
    pub kernel: RbfKernel,
    /// `log σ_n²`; `-inf` means noiseless.
    pub log_noise: f64,
    /// Lowest rung of the jitter ladder.
    pub min_jitter: f64,
    train: Option<(Tensor, Tensor)>,
}

/// `log N(y | 0, K_zz + σ_n² I)` on the tape. `z` is `N x S`, `y` is `N x 1`.
pub fn log_marginal_on_tape(
    tape: &mut Tape,
    log_sigma: Var,
    log_lengthscale: Var,
    log_noise: Var,
    z: Var,
    y: Var,
    min_jitter: f64,
) -> Result<Var> {
    let n = tape.value(z).rows();
    let kzz = kernel_on_tape(tape, log_sigma, log_lengthscale, z, z)?;
    let noise = tape.exp(log_noise);
    let eye = tape.constant(Tensor::eye(n));
    let noise_eye = tape.mul_scalar(eye, noise)?;
    let kn = tape.add(kzz, noise_eye)?;
    let l = tape.cholesky(kn, min_jitter)?;
    let alpha = tape.solve_lower(l, y)?;
    let sq = tape.square(alpha);
    let quad = tape.sum(sq);
    let logdet = tape.logdet_from_cholesky(l)?;
    let s = tape.add(quad, logdet)?;
    let half = tape.scale(s, -0.5);
    Ok(tape.add_const(half, -0.5 * n as f64 * (2.0 * PI).ln()))
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub steps: usize,
    pub adam: AdamConfig,
    pub train_kernel: bool,
    pub train_noise: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            steps: 200,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            train_kernel: true,
            train_noise: true,
        }
    }
}

/// Log marginal after each accepted step (first entry is the start point).
#[derive(Clone, Debug, Default)]
pub struct FitTrace {
    pub log_marginals: Vec<f64>,
    pub rejected_steps: usize,
}

impl ExactGp {
    pub fn new(kernel: RbfKernel, noise_variance: f64) -> Self {
        ExactGp {
            kernel,
            log_noise: noise_variance.ln(),
            min_jitter: 0.0,
            train: None,
        }
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("log_sigma", Tensor::scalar(self.kernel.log_sigma))
            .expect("fresh");
        p.insert("log_lengthscale", Tensor::scalar(self.kernel.log_lengthscale))
            .expect("fresh");
        p.insert("log_noise", Tensor::scalar(self.log_noise)).expect("fresh");
        p
    }

    fn set_params(&mut self, p: &ParamSet) {
        self.kernel.log_sigma = p.get("log_sigma").expect("bound").item();
        self.kernel.log_lengthscale = p.get("log_lengthscale").expect("bound").item();
        self.log_noise = p.get("log_noise").expect("bound").item();
    }

    fn check_data(z: &Tensor, y: &[f64]) -> Result<()> {
        if z.rows() == 0 {
            return Err(Error::Data("exact GP needs at least one training point".into()));
        }
        if z.rows() != y.len() {
            return Err(Error::shape(format!("{} inputs, {} labels", z.rows(), y.len())));
        }
        Ok(())
    }

    pub fn exact_log_marginal(&self, z: &Tensor, y: &[f64]) -> Result<f64> {
        Self::check_data(z, y)?;
        let mut tape = Tape::new();
        let ls = tape.scalar(self.kernel.log_sigma);
        let ll = tape.scalar(self.kernel.log_lengthscale);
        let ln = tape.scalar(self.log_noise);
        let zv = tape.constant(z.clone());
        let yv = tape.constant(Tensor::column(y.to_vec()));
        let out = log_marginal_on_tape(&mut tape, ls, ll, ln, zv, yv, self.min_jitter)?;
        Ok(tape.value(out).item())
    }

    /// Stores the training set used by [`Self::exact_posterior`].
    pub fn condition(&mut self, z: &Tensor, y: &[f64]) -> Result<()> {
        Self::check_data(z, y)?;
        self.train = Some((z.clone(), Tensor::column(y.to_vec())));
        Ok(())
    }

    /// Latent posterior mean and variance at each row of `queries`.
    pub fn exact_posterior(&self, queries: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (z, y) = self
            .train
            .as_ref()
            .ok_or_else(|| Error::Config("exact GP has no training data".into()))?;
        let n = z.rows();
        let mut kzz = kernel_matrix(&self.kernel, z, z)?;
        let noise = self.noise_variance();
        for i in 0..n {
            kzz.set(i, i, kzz.get(i, i) + noise);
        }
        let (l, _) = linalg::cholesky_jittered(&kzz, self.min_jitter)?;
        let alpha = linalg::cho_solve(&l, y)?;
        let kzq = kernel_matrix(&self.kernel, z, queries)?;
        let mean = linalg::matmul_tn(&kzq, &alpha)?.into_data();
        let v = linalg::solve_lower(&l, &kzq)?;
        let prior = self.kernel.variance();
        let var = (0..queries.rows())
            .map(|q| {
                let s: f64 = (0..n).map(|i| v.get(i, q).powi(2)).sum();
                clamp_variance(prior - s)
            })
            .collect();
        Ok((mean, var))
    }

    /// Gradient ascent on the log marginal. A step that lowers the objective
    /// is undone and the learning rate halved, so the trace is nondecreasing.
    pub fn fit_exact(&mut self, z: &Tensor, y: &[f64], opts: &FitOptions) -> Result<FitTrace> {
        Self::check_data(z, y)?;
        self.condition(z, y)?;
        let mut trace = FitTrace {
            log_marginals: vec![self.exact_log_marginal(z, y)?],
            rejected_steps: 0,
        };
        if !opts.train_kernel && !opts.train_noise {
            return Ok(trace);
        }
        let zt = z.clone();
        let yt = Tensor::column(y.to_vec());
        let objective = |p: &ParamSet| {
            value_and_grad(p, |tape, b| {
                let zv = tape.constant(zt.clone());
                let yv = tape.constant(yt.clone());
                let lml = log_marginal_on_tape(
                    tape,
                    b.var("log_sigma"),
                    b.var("log_lengthscale"),
                    b.var("log_noise"),
                    zv,
                    yv,
                    self.min_jitter,
                )?;
                Ok(tape.neg(lml))
            })
        };
        let mut params = self.params();
        let mut state = AdamState::new(&params);
        let mut cfg = opts.adam;
        let (mut loss, mut grads) = objective(&params)?;
        for _ in 0..opts.steps {
            if !opts.train_kernel {
                *grads.get_mut("log_sigma").expect("bound") = Tensor::scalar(0.0);
                *grads.get_mut("log_lengthscale").expect("bound") = Tensor::scalar(0.0);
            }
            if !opts.train_noise {
                *grads.get_mut("log_noise").expect("bound") = Tensor::scalar(0.0);
            }
            let mut candidate = params.clone();
            let mut cand_state = state.clone();
            adam_step(&mut candidate, &grads, &mut cand_state, &cfg)?;
            match objective(&candidate) {
                Ok((new_loss, new_grads)) if new_loss <= loss => {
                    params = candidate;
                    state = cand_state;
                    loss = new_loss;
                    grads = new_grads;
                    trace.log_marginals.push(-loss);
                }
                _ => {
                    trace.rejected_steps += 1;
                    cfg.lr *= 0.5;
                }
            }
        }
        self.set_params(&params);
        Ok(trace)
    }
}

pub(crate) fn clamp_variance(v: f64) -> f64 {
    if v < NEGATIVE_VARIANCE_TOL {
        log::warn!("negative predictive variance {v:e} clamped to 0");
    }
    v.max(0.0)
}
