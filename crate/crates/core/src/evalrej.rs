//! ITE metrics and the uncertainty-rejection evaluation protocol.
//!
//! A rejection curve discards the `floor(p * Q)` most uncertain of `Q` test
//! predictions for each proportion `p` and reports the root-mean-squared ITE
//! error over what is left.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::ItePrediction;
use crate::synthgen::PositivityReport;

/// Default rejection grid.
pub const DEFAULT_PROPORTIONS: [f64; 10] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.50, 0.70, 0.90];

/// Absorbs products such as `0.7 * 30 = 20.999999999999996`.
const COUNT_EPS: f64 = 1e-9;

/// One test prediction as seen by a rejection policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub node: usize,
    pub ite: f64,
    pub uncertainty: f64,
}

impl From<&ItePrediction> for Scored {
    fn from(p: &ItePrediction) -> Self {
        Scored {
            node: p.node,
            ite: p.ite,
            uncertainty: p.uncertainty,
        }
    }
}

/// Root-mean-squared difference between predicted and true effects.
pub fn pehe(ite_pred: &[f64], ite_true: &[f64]) -> Result<f64> {
    if ite_pred.len() != ite_true.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} predictions, {} true effects",
            ite_pred.len(),
            ite_true.len()
        )));
    }
    if ite_pred.is_empty() {
        return Err(Error::Metric("pehe of an empty set".into()));
    }
    let sse: f64 = ite_pred.iter().zip(ite_true).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / ite_pred.len() as f64).sqrt())
}

/// Number of predictions rejected at proportion `p` out of `q`.
pub fn rejected_count(p: f64, q: usize) -> usize {
    let r = (p * q as f64 + COUNT_EPS).floor() as usize;
    r.min(q.saturating_sub(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionCurve {
    pub proportions: Vec<f64>,
    pub retained_pehe: Vec<f64>,
    pub n_retained: Vec<usize>,
}

/// Proportions must lie in `[0, 1)` and increase strictly.
pub fn check_proportions(proportions: &[f64]) -> Result<()> {
    for &p in proportions {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Metric(format!("rejection proportion {p} outside [0, 1)")));
        }
    }
    if proportions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Metric(
            "rejection proportions must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn check_inputs(preds: &[Scored], ite_true: &[f64], proportions: &[f64]) -> Result<()> {
    check_proportions(proportions)?;
    if preds.len() != ite_true.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} predictions, {} true effects",
            preds.len(),
            ite_true.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Metric("rejection curve of an empty set".into()));
    }
    if let Some(p) = preds.iter().find(|p| !p.uncertainty.is_finite() || !p.ite.is_finite()) {
        return Err(Error::Metric(format!("non-finite prediction for node {}", p.node)));
    }
    Ok(())
}

/// Curve for a fixed rejection order: `order[..r]` is rejected first.
fn curve_from_order(order: &[usize], sq_err: &[f64], proportions: &[f64]) -> RejectionCurve {
    let q = order.len();
    let mut retained_pehe = Vec::with_capacity(proportions.len());
    let mut n_retained = Vec::with_capacity(proportions.len());
    let mut kept = vec![true; q];
    for &p in proportions {
        kept.fill(true);
        for &i in &order[..rejected_count(p, q)] {
            kept[i] = false;
        }
        // summed in input order so that p = 0 reproduces `pehe` bit for bit
        let (sse, n) = sq_err
            .iter()
            .zip(&kept)
            .filter(|(_, &k)| k)
            .fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
        retained_pehe.push((sse / n as f64).sqrt());
        n_retained.push(n);
    }
    RejectionCurve {
        proportions: proportions.to_vec(),
        retained_pehe,
        n_retained,
    }
}

fn squared_errors(preds: &[Scored], ite_true: &[f64]) -> Vec<f64> {
    preds
        .iter()
        .zip(ite_true)
        .map(|(p, t)| (p.ite - t) * (p.ite - t))
        .collect()
}

/// Rejects the most uncertain predictions first; ties go to the larger node
/// index first.
pub fn rejection_curve(preds: &[Scored], ite_true: &[f64], proportions: &[f64]) -> Result<RejectionCurve> {
    check_inputs(preds, ite_true, proportions)?;
    let sq_err = squared_errors(preds, ite_true);
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .uncertainty
            .total_cmp(&preds[a].uncertainty)
            .then(preds[b].node.cmp(&preds[a].node))
    });
    Ok(curve_from_order(&order, &sq_err, proportions))
}

/// Null policy: rejects a seeded uniformly random subset. Subsets are nested
/// across proportions.
pub fn random_rejection_curve(
    preds: &[Scored],
    ite_true: &[f64],
    proportions: &[f64],
    seed: u64,
) -> Result<RejectionCurve> {
    check_inputs(preds, ite_true, proportions)?;
    let sq_err = squared_errors(preds, ite_true);
    // canonical node order so the draw does not depend on input order
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by_key(|&i| preds[i].node);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(curve_from_order(&order, &sq_err, proportions))
}

/// Per-point mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub proportions: Vec<f64>,
    pub retained_pehe: Vec<f64>,
    pub std: Vec<f64>,
    pub n_retained: Vec<f64>,
    pub n_seeds: usize,
}

impl AggregateCurve {
    /// Standard error of the mean at grid point `i`.
    pub fn std_error(&self, i: usize) -> f64 {
        self.std[i] / (self.n_seeds as f64).sqrt()
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn aggregate_curves(curves: &[RejectionCurve]) -> Result<AggregateCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Metric("no curves to aggregate".into()))?;
    if let Some(c) = curves.iter().find(|c| c.proportions != first.proportions) {
        return Err(Error::Metric(format!(
            "mismatched proportion grids: {:?} vs {:?}",
            first.proportions, c.proportions
        )));
    }
    let k = first.proportions.len();
    let mut out = AggregateCurve {
        proportions: first.proportions.clone(),
        retained_pehe: Vec::with_capacity(k),
        std: Vec::with_capacity(k),
        n_retained: Vec::with_capacity(k),
        n_seeds: curves.len(),
    };
    for i in 0..k {
        let vals: Vec<f64> = curves.iter().map(|c| c.retained_pehe[i]).collect();
        let counts: Vec<f64> = curves.iter().map(|c| c.n_retained[i] as f64).collect();
        let (m, s) = mean_std(&vals);
        out.retained_pehe.push(m);
        out.std.push(s);
        out.n_retained.push(mean_std(&counts).0);
    }
    Ok(out)
}

/// Everything measured on one seed's test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub seed: u64,
    pub full_pehe: f64,
    pub curve: RejectionCurve,
    pub random_curve: RejectionCurve,
    pub positivity: PositivityReport,
}

/// Evaluates one seed: uncertainty-ordered and random curves on the same
/// predictions. `ite_true` is aligned with `preds`.
pub fn evaluate_seed(
    seed: u64,
    preds: &[Scored],
    ite_true: &[f64],
    proportions: &[f64],
    positivity: PositivityReport,
) -> Result<SeedEvaluation> {
    let ite: Vec<f64> = preds.iter().map(|p| p.ite).collect();
    Ok(SeedEvaluation {
        seed,
        full_pehe: pehe(&ite, ite_true)?,
        curve: rejection_curve(preds, ite_true, proportions)?,
        random_curve: random_rejection_curve(preds, ite_true, proportions, seed)?,
        positivity,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub full_pehe_mean: f64,
    pub full_pehe_std: f64,
    pub mean_curve: AggregateCurve,
    pub random_mean_curve: AggregateCurve,
    pub seeds: Vec<SeedEvaluation>,
}

pub fn aggregate(config: serde_json::Value, seeds: Vec<SeedEvaluation>) -> Result<EvalReport> {
    let curves: Vec<RejectionCurve> = seeds.iter().map(|s| s.curve.clone()).collect();
    let random: Vec<RejectionCurve> = seeds.iter().map(|s| s.random_curve.clone()).collect();
    let mean_curve = aggregate_curves(&curves)?;
    let random_mean_curve = aggregate_curves(&random)?;
    let full: Vec<f64> = seeds.iter().map(|s| s.full_pehe).collect();
    let (full_pehe_mean, full_pehe_std) = mean_std(&full);
    Ok(EvalReport {
        config,
        full_pehe_mean,
        full_pehe_std,
        mean_curve,
        random_mean_curve,
        seeds,
    })
}

/// `proportion,retained_pehe,n_retained,std`.
pub fn curve_csv(curve: &AggregateCurve) -> String {
    let mut s = String::from("proportion,retained_pehe,n_retained,std\n");
    for i in 0..curve.proportions.len() {
        s.push_str(&format!(
            "{:?},{:?},{},{:?}\n",
            curve.proportions[i], curve.retained_pehe[i], curve.n_retained[i], curve.std[i]
        ));
    }
    s
}

pub fn write_curve_csv(path: &Path, curve: &AggregateCurve) -> Result<()> {
    fs::write(path, curve_csv(curve)).map_err(|e| Error::io(path, e))
}
