use indexmap::IndexMap;

use crate::error::Result;

use super::params::{value_and_grad, value_only, Bindings, ParamSet};
use super::{Tape, Var};

/// Agreement between reverse-mode and central-difference gradients for one
/// parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Components where `|analytic - numeric| > atol + rtol * max(|analytic|, |numeric|)`.
    pub failures: usize,
    pub numel: usize,
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub value: f64,
    pub per_param: IndexMap<String, ParamCheck>,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.per_param.values().all(|c| c.failures == 0)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.per_param.values().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, &ParamCheck)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
            .map(|(k, v)| (k.as_str(), v))
    }
}

/// Compares [`value_and_grad`] against `(f(p+h) - f(p-h)) / 2h` for every
/// scalar component of every parameter.
pub fn finite_diff_check<F>(f: F, params: &ParamSet, h: f64, rtol: f64, atol: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (value, grads) = value_and_grad(params, &f)?;
    let mut per_param = IndexMap::new();
    for (name, g) in grads.iter() {
        let mut check = ParamCheck {
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            failures: 0,
            numel: g.len(),
        };
        for k in 0..g.len() {
            let mut plus = params.clone();
            plus.get_mut(name).expect("name from grads").data_mut()[k] += h;
            let mut minus = params.clone();
            minus.get_mut(name).expect("name from grads").data_mut()[k] -= h;
            let numeric = (value_only(&plus, &f)? - value_only(&minus, &f)?) / (2.0 * h);
            let analytic = g.data()[k];
            let abs = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            check.max_abs_err = check.max_abs_err.max(abs);
            if abs > atol {
                check.max_rel_err = check.max_rel_err.max(rel);
            }
            if abs > atol + rtol * scale {
                check.failures += 1;
            }
        }
        per_param.insert(name.to_string(), check);
    }
    Ok(FiniteDiffReport { value, per_param })
}
