//! Sparse variational GP head with `q(u) = N(μ_u, L_u L_uᵀ)` over `M`
//! inducing inputs (unwhitened).
//!
//! With `A = L_m⁻¹ K_mn` and `B = K_mm⁻¹ K_mn`, the marginals of `q(f)` at the
//! inputs are `μ̃ = Bᵀ μ_u` and `Σ̃_ii = σ² - ‖A_i‖² + ‖L_uᵀ B_i‖²`, so every
//! term of the bound costs `O(M² N)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ArrayEntry};
use crate::diffnum::{linalg, softplus_inv, Bindings, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::exact::clamp_variance;
use super::kernel::{kernel_matrix, kernel_on_tape, RbfKernel};

pub const INITIAL_NOISE_VARIANCE: f64 = 0.1;
pub const HEAD_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SvgpHead {
    pub kernel: RbfKernel,
    /// `log σ_n²`.
    pub log_noise: f64,
    /// `M x S`.
    pub inducing: Tensor,
    /// `M x 1`.
    pub mu_u: Tensor,
    /// Unconstrained `M x M`; only the lower triangle is read, the diagonal
    /// through softplus.
    pub l_u_raw: Tensor,
    /// Label standardization: the head models `(y - y_mean) / y_std`.
    pub y_mean: f64,
    pub y_std: f64,
    pub min_jitter: f64,
}

/// Tape handles for one head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub log_sigma: Var,
    pub log_lengthscale: Var,
    pub log_noise: Var,
    pub inducing: Var,
    pub mu_u: Var,
    pub l_u_raw: Var,
}

impl HeadVars {
    pub fn from_bindings(b: &Bindings, prefix: &str) -> Self {
        let v = |name: &str| b.var(&format!("{prefix}{name}"));
        HeadVars {
            log_sigma: v("log_sigma"),
            log_lengthscale: v("log_lengthscale"),
            log_noise: v("log_noise"),
            inducing: v("inducing"),
            mu_u: v("mu_u"),
            l_u_raw: v("l_u_raw"),
        }
    }
}

/// Marginals of `q(f)` at a set of inputs: mean `N x 1`, variance `1 x N`.
#[derive(Clone, Copy, Debug)]
pub struct MarginalVars {
    pub mean: Var,
    pub var: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub elbo: Var,
    pub expected_log_lik: Var,
    pub kl: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub elbo: f64,
    pub expected_log_lik: f64,
    pub kl: f64,
}

struct Factors {
    lm: Var,
    lu: Var,
}

fn factors(tape: &mut Tape, h: &HeadVars, min_jitter: f64) -> Result<Factors> {
    let kmm = kernel_on_tape(tape, h.log_sigma, h.log_lengthscale, h.inducing, h.inducing)?;
    let lm = tape.cholesky(kmm, min_jitter)?;
    let lu = tape.lower_tri_softplus(h.l_u_raw)?;
    Ok(Factors { lm, lu })
}

fn marginals_with(tape: &mut Tape, h: &HeadVars, f: &Factors, z: Var) -> Result<MarginalVars> {
    let kmn = kernel_on_tape(tape, h.log_sigma, h.log_lengthscale, h.inducing, z)?;
    let a = tape.solve_lower(f.lm, kmn)?;
    let b = tape.solve_lower_t(f.lm, a)?;
    let bt = tape.transpose(b);
    let mean = tape.matmul(bt, h.mu_u)?;

    let a2 = tape.square(a);
    let explained = tape.col_sum(a2);
    let lut = tape.transpose(f.lu);
    let lutb = tape.matmul(lut, b)?;
    let lutb2 = tape.square(lutb);
    let retained = tape.col_sum(lutb2);
    let two_ls = tape.scale(h.log_sigma, 2.0);
    let prior = tape.exp(two_ls);
    let neg = tape.neg(explained);
    let reduced = tape.add_scalar(neg, prior)?;
    let var = tape.add(reduced, retained)?;
    Ok(MarginalVars { mean, var })
}

/// Marginal mean and variance of `q(f)` at the rows of `z`.
pub fn marginals_on_tape(tape: &mut Tape, h: &HeadVars, z: Var, min_jitter: f64) -> Result<MarginalVars> {
    let f = factors(tape, h, min_jitter)?;
    marginals_with(tape, h, &f, z)
}

/// `KL(q(u) ‖ p(u))` between `N(μ_u, L_u L_uᵀ)` and `N(0, K_mm)`.
fn kl_with(tape: &mut Tape, h: &HeadVars, f: &Factors) -> Result<Var> {
    let m = tape.value(h.mu_u).rows() as f64;
    let lm_lu = tape.solve_lower(f.lm, f.lu)?;
    let sq = tape.square(lm_lu);
    let trace = tape.sum(sq);
    let lm_mu = tape.solve_lower(f.lm, h.mu_u)?;
    let sq = tape.square(lm_mu);
    let maha = tape.sum(sq);
    let logdet_kmm = tape.logdet_from_cholesky(f.lm)?;
    let logdet_ku = tape.logdet_from_cholesky(f.lu)?;
    let s = tape.add(trace, maha)?;
    let s = tape.add(s, logdet_kmm)?;
    let s = tape.sub(s, logdet_ku)?;
    let s = tape.add_const(s, -m);
    Ok(tape.scale(s, 0.5))
}

/// Evidence lower bound for labels `y` (`N x 1`, already standardized) at
/// inputs `z` (`N x S`), with a closed-form Gaussian expected log-likelihood.
pub fn elbo_on_tape(tape: &mut Tape, h: &HeadVars, z: Var, y: Var, min_jitter: f64) -> Result<ElboVars> {
    let n = tape.value(z).rows() as f64;
    let f = factors(tape, h, min_jitter)?;
    let marg = marginals_with(tape, h, &f, z)?;
    let resid = tape.sub(y, marg.mean)?;
    let sq = tape.square(resid);
    let sse = tape.sum(sq);
    let trace = tape.sum(marg.var);
    let total = tape.add(sse, trace)?;
    let noise = tape.exp(h.log_noise);
    let scaled = tape.div_scalar(total, noise)?;
    let quad = tape.scale(scaled, -0.5);
    let lognorm = tape.scale(h.log_noise, -0.5 * n);
    let ell = tape.add(quad, lognorm)?;
    let ell = tape.add_const(ell, -0.5 * n * (2.0 * PI).ln());
    let kl = kl_with(tape, h, &f)?;
    let elbo = tape.sub(ell, kl)?;
    Ok(ElboVars {
        elbo,
        expected_log_lik: ell,
        kl,
    })
}

/// Predictive marginals in label units.
#[derive(Clone, Debug, PartialEq)]
pub struct GpPrediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn lower_to_raw(l: &Tensor) -> Tensor {
    let n = l.rows();
    let mut raw = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            raw.set(i, j, l.get(i, j));
        }
        raw.set(i, i, softplus_inv(l.get(i, i)));
    }
    raw
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and sample standard deviation (`n - 1`); a degenerate spread maps
/// to 1 so standardization stays finite.
pub fn label_moments(y: &[f64]) -> (f64, f64) {
    let n = y.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 1.0);
    }
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

#[derive(Serialize, Deserialize)]
struct HeadManifest {
    format_version: u32,
    y_mean: f64,
    y_std: f64,
    min_jitter: f64,
    arrays: Vec<ArrayEntry>,
}

impl SvgpHead {
    /// Head at the prior: `μ_u = 0`, `L_u = chol(K_mm)`, so the KL term is 0.
    /// Inducing inputs are `min(M, N)` distinct rows of `z`; the lengthscale
    /// starts at their median pairwise distance.
    pub fn init(z: &Tensor, y: &[f64], num_inducing: usize, seed: u64, min_jitter: f64) -> Result<Self> {
        let n = z.rows();
        if n == 0 || num_inducing == 0 {
            return Err(Error::Data(
                "SVGP head needs at least one input and one inducing point".into(),
            ));
        }
        if y.len() != n {
            return Err(Error::shape(format!("{n} inputs, {} labels", y.len())));
        }
        let m = num_inducing.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        let inducing = z.select_rows(&idx);
        let d = linalg::sqdist(&inducing, &inducing)?;
        let dists: Vec<f64> = (0..m)
            .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
            .map(|(i, j)| d.get(i, j).sqrt())
            .collect();
        let ls = if dists.is_empty() { 1.0 } else { median(dists) };
        let ls = if ls > 1e-6 && ls.is_finite() { ls } else { 1.0 };
        let (y_mean, y_std) = label_moments(y);
        Self::at_prior(
            RbfKernel::new(1.0, ls),
            INITIAL_NOISE_VARIANCE,
            inducing,
            y_mean,
            y_std,
            min_jitter,
        )
    }

    pub fn at_prior(
        kernel: RbfKernel,
        noise_variance: f64,
        inducing: Tensor,
        y_mean: f64,
        y_std: f64,
        min_jitter: f64,
    ) -> Result<Self> {
        let m = inducing.rows();
        let kmm = kernel_matrix(&kernel, &inducing, &inducing)?;
        let (l, _) = linalg::cholesky_jittered(&kmm, min_jitter)?;
        Ok(SvgpHead {
            kernel,
            log_noise: noise_variance.ln(),
            inducing,
            mu_u: Tensor::zeros(m, 1),
            l_u_raw: lower_to_raw(&l),
            y_mean,
            y_std,
            min_jitter,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.rows()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    /// Sets `q(u)` from a mean and a lower Cholesky factor of its covariance.
    pub fn set_variational(&mut self, mean: Tensor, chol: &Tensor) -> Result<()> {
        let m = self.num_inducing();
        if mean.dims() != (m, 1) || chol.dims() != (m, m) {
            return Err(Error::shape(format!(
                "variational parameters {:?}, {:?} for {m} inducing points",
                mean.dims(),
                chol.dims()
            )));
        }
        self.mu_u = mean;
        self.l_u_raw = lower_to_raw(chol);
        Ok(())
    }

    /// Trainable parameters: `log_sigma`, `log_lengthscale`, `log_noise`,
    /// `inducing`, `mu_u`, `l_u_raw`.
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        let entries = [
            ("log_sigma", Tensor::scalar(self.kernel.log_sigma)),
            ("log_lengthscale", Tensor::scalar(self.kernel.log_lengthscale)),
            ("log_noise", Tensor::scalar(self.log_noise)),
            ("inducing", self.inducing.clone()),
            ("mu_u", self.mu_u.clone()),
            ("l_u_raw", self.l_u_raw.clone()),
        ];
        for (k, v) in entries {
            p.insert(k, v).expect("fixed names");
        }
        p
    }

    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        let get = |k: &str, like: &Tensor| -> Result<Tensor> {
            let t = p
                .get(k)
                .ok_or_else(|| Error::Config(format!("missing head parameter `{k}`")))?;
            if !t.same_shape(like) {
                return Err(Error::shape(format!("`{k}`: {:?} vs {:?}", t.dims(), like.dims())));
            }
            Ok(t.clone())
        };
        let one = Tensor::scalar(0.0);
        self.kernel.log_sigma = get("log_sigma", &one)?.item();
        self.kernel.log_lengthscale = get("log_lengthscale", &one)?.item();
        self.log_noise = get("log_noise", &one)?.item();
        self.inducing = get("inducing", &self.inducing)?;
        self.mu_u = get("mu_u", &self.mu_u)?;
        self.l_u_raw = get("l_u_raw", &self.l_u_raw)?;
        Ok(())
    }

    pub fn standardize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_std).collect()
    }

    fn check_inputs(&self, z: &Tensor) -> Result<()> {
        if z.cols() != self.inducing.cols() {
            return Err(Error::shape(format!(
                "inputs have width {}, inducing points {}",
                z.cols(),
                self.inducing.cols()
            )));
        }
        Ok(())
    }

    /// Bound for labels `y` in label units (standardized internally).
    pub fn elbo(&self, z: &Tensor, y: &[f64]) -> Result<ElboTerms> {
        self.check_inputs(z)?;
        if z.rows() != y.len() || y.is_empty() {
            return Err(Error::shape(format!("{} inputs, {} labels", z.rows(), y.len())));
        }
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &self.params(), false);
        let h = HeadVars::from_bindings(&b, "");
        let zv = tape.constant(z.clone());
        let yv = tape.constant(Tensor::column(self.standardize(y)));
        let e = elbo_on_tape(&mut tape, &h, zv, yv, self.min_jitter)?;
        Ok(ElboTerms {
            elbo: tape.value(e.elbo).item(),
            expected_log_lik: tape.value(e.expected_log_lik).item(),
            kl: tape.value(e.kl).item(),
        })
    }

    /// Monte Carlo estimate of the expected log-likelihood term and its
    /// standard error, sampling each `f_i` from its `q` marginal.
    pub fn expected_log_lik_mc(&self, z: &Tensor, y: &[f64], n_samples: usize, seed: u64) -> Result<(f64, f64)> {
        if n_samples < 2 {
            return Err(Error::Config("MC estimate needs at least 2 samples".into()));
        }
        let (mean, var) = self.marginals_standardized(z)?;
        let ys = self.standardize(y);
        let noise = self.noise_variance();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<f64> = (0..n_samples)
            .map(|_| {
                ys.iter()
                    .zip(mean.iter().zip(&var))
                    .map(|(yi, (m, v))| {
                        let f = m + v.sqrt() * rng.sample::<f64, _>(StandardNormal);
                        -0.5 * (2.0 * PI * noise).ln() - (yi - f).powi(2) / (2.0 * noise)
                    })
                    .sum()
            })
            .collect();
        let s = n_samples as f64;
        let est = draws.iter().sum::<f64>() / s;
        let var_draw = draws.iter().map(|d| (d - est).powi(2)).sum::<f64>() / (s - 1.0);
        Ok((est, (var_draw / s).sqrt()))
    }

    fn marginals_standardized(&self, z: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(z)?;
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &self.params(), false);
        let h = HeadVars::from_bindings(&b, "");
        let zv = tape.constant(z.clone());
        let m = marginals_on_tape(&mut tape, &h, zv, self.min_jitter)?;
        let mean = tape.value(m.mean).data().to_vec();
        let var = tape.value(m.var).data().iter().map(|&v| clamp_variance(v)).collect();
        Ok((mean, var))
    }

    /// Latent predictive marginals at `queries`, in label units; with
    /// `include_noise` the observation variance is added.
    pub fn predict(&self, queries: &Tensor, include_noise: bool) -> Result<GpPrediction> {
        let (mean, var) = self.marginals_standardized(queries)?;
        let noise = if include_noise { self.noise_variance() } else { 0.0 };
        let s2 = self.y_std * self.y_std;
        Ok(GpPrediction {
            mean: mean.iter().map(|m| self.y_mean + self.y_std * m).collect(),
            var: var.iter().map(|v| s2 * (v + noise)).collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let entries = checkpoint::write_arrays(dir, &self.params())?;
        let m = HeadManifest {
            format_version: HEAD_FORMAT_VERSION,
            y_mean: self.y_mean,
            y_std: self.y_std,
            min_jitter: self.min_jitter,
            arrays: entries,
        };
        checkpoint::write_json(&dir.join("head.json"), &m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("head.json");
        let m: HeadManifest = checkpoint::read_json(&path)?;
        if m.format_version != HEAD_FORMAT_VERSION {
            return Err(Error::io(
                &path,
                format!("unsupported head format version {}", m.format_version),
            ));
        }
        let p = checkpoint::read_arrays(dir, &m.arrays)?;
        let get = |k: &str| {
            p.get(k)
                .cloned()
                .ok_or_else(|| Error::io(&path, format!("missing array `{k}`")))
        };
        let inducing = get("inducing")?;
        let mu_u = get("mu_u")?;
        let l_u_raw = get("l_u_raw")?;
        let mm = inducing.rows();
        if mu_u.dims() != (mm, 1) || l_u_raw.dims() != (mm, mm) {
            return Err(Error::io(&path, "variational arrays do not match inducing count"));
        }
        Ok(SvgpHead {
            kernel: RbfKernel {
                log_sigma: get("log_sigma")?.item(),
                log_lengthscale: get("log_lengthscale")?.item(),
            },
            log_noise: get("log_noise")?.item(),
            inducing,
            mu_u,
            l_u_raw,
            y_mean: m.y_mean,
            y_std: m.y_std,
            min_jitter: m.min_jitter,
        })
    }
}

/// Variational optimum when the inducing inputs are the training inputs:
/// `μ_u = K (K + σ²I)⁻¹ y`, `K_u = K - K (K + σ²I)⁻¹ K`.
pub fn optimal_variational_head(kernel: RbfKernel, noise_variance: f64, z: &Tensor, y: &[f64]) -> Result<SvgpHead> {
    let n = z.rows();
    let k = kernel_matrix(&kernel, z, z)?;
    let mut kn = k.clone();
    for i in 0..n {
        kn.set(i, i, kn.get(i, i) + noise_variance);
    }
    let (l, _) = linalg::cholesky_jittered(&kn, 0.0)?;
    let mean = linalg::matmul(&k, &linalg::cho_solve(&l, &Tensor::column(y.to_vec()))?)?;
    let half = linalg::solve_lower(&l, &k)?;
    let mut cov = k.clone();
    let reduce = linalg::matmul_tn(&half, &half)?;
    for (c, r) in cov.data_mut().iter_mut().zip(reduce.data()) {
        *c -= r;
    }
    // symmetrize before factoring
    let cov = cov.zip_map(&cov.transpose(), |a, b| 0.5 * (a + b));
    let (lu, _) = linalg::cholesky_jittered(&cov, 0.0)?;
    let mut head = SvgpHead::at_prior(kernel, noise_variance, z.clone(), 0.0, 1.0, 0.0)?;
    head.set_variational(mean, &lu)?;
    Ok(head)
}
