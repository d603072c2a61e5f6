//! Semi-synthetic networked causal datasets with a tunable imbalance knob `k`.
//!
//! Recipe, per node `i`:
//!
//! 1. cluster `c_i ~ U{0..C}`, centroids `~ N(0, I_D)`,
//!    `x_i = centroid(c_i) + N(0, 0.5² I)`;
//! 2. stochastic block model edges with `p_in` / `p_out`;
//! 3. contextual features `x̄_i = ½ (x_i + mean_{j ∈ N(i)} x_j)` (`x̄_i = x_i` if isolated);
//! 4. score `s_i = w_pᵀ x̄_i`, `π_i = sigmoid(k (s_i - median s))`, `t_i ~ Bernoulli(π_i)`;
//! 5. `mu0_i = β₀ᵀ x̄_i`, `mu1_i = mu0_i + β_τᵀ x̄_i + 1`, `y_i = mu_{t_i, i} + N(0, σ_y²)`.
//!
//! Coefficient vectors `w_p, β₀, β_τ` are drawn from `N(0, I/√D)`. Each stage
//! reads its own ChaCha stream of the seed, so stages never share randomness.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnum::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::graph::{FeatureMatrix, Graph};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Beyond this `|k (s - median)|` the logistic link is considered saturated.
pub const MAX_LOGIT: f64 = 36.0;

const FEATURE_NOISE_STD: f64 = 0.5;
const EFFECT_OFFSET: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub k: f64,
    pub sigma_y: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 1000,
            d: 16,
            c: 4,
            p_in: 0.05,
            p_out: 0.005,
            k: 1.0,
            sigma_y: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.c < 1 || self.n < self.c {
            return bad(format!("need N >= C >= 1 (N={}, C={})", self.n, self.c));
        }
        if self.d < 1 {
            return bad("feature dimension must be >= 1".into());
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} outside [0, 1]"));
            }
        }
        if self.p_in < self.p_out {
            return bad(format!(
                "p_in={} < p_out={} (graph must be assortative)",
                self.p_in, self.p_out
            ));
        }
        if !self.k.is_finite() || self.k < 0.0 {
            return bad(format!("imbalance k={} must be finite and >= 0", self.k));
        }
        if !self.sigma_y.is_finite() || self.sigma_y <= 0.0 {
            return bad(format!("sigma_y={} must be > 0", self.sigma_y));
        }
        Ok(())
    }
}

/// Observed data plus the ground-truth potential-outcome means.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalDataset {
    pub graph: Graph,
    pub x: FeatureMatrix,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub propensity: Vec<f64>,
    /// Generating configuration, when known.
    pub config: Option<SynthConfig>,
}

impl CausalDataset {
    pub fn num_nodes(&self) -> usize {
        self.t.len()
    }

    pub fn true_ite(&self) -> Vec<f64> {
        self.mu1.iter().zip(&self.mu0).map(|(a, b)| a - b).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        let lens = [
            ("X", self.x.num_nodes()),
            ("t", self.t.len()),
            ("y", self.y.len()),
            ("mu0", self.mu0.len()),
            ("mu1", self.mu1.len()),
            ("propensity", self.propensity.len()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::Data(format!("{name} has {len} rows, graph has {n} nodes")));
            }
        }
        if self.t.iter().any(|&t| t > 1) {
            return Err(Error::Data("treatment must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// Intermediate quantities of the generator, exposed for diagnostics and tests.
#[derive(Clone, Debug)]
pub struct GenerativeTruth {
    pub clusters: Vec<usize>,
    pub x_context: Tensor,
    pub w_p: Vec<f64>,
    pub beta0: Vec<f64>,
    pub beta_tau: Vec<f64>,
    pub score: Vec<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stochastic block model over fixed cluster labels.
pub fn sbm_edges(clusters: &[usize], p_in: f64, p_out: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let n = clusters.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if clusters[i] == clusters[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// `x̄_i = ½ (x_i + mean of neighbors)`, or `x_i` for isolated nodes.
pub fn contextual_features(g: &Graph, x: &Tensor) -> Tensor {
    let (n, d) = x.dims();
    let mut out = x.clone();
    for i in 0..n {
        let nb = g.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let inv = 1.0 / nb.len() as f64;
        for k in 0..d {
            let m: f64 = nb.iter().map(|&j| x.get(j, k)).sum::<f64>() * inv;
            out.set(i, k, 0.5 * (x.get(i, k) + m));
        }
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<CausalDataset> {
    generate_with_truth(cfg).map(|(ds, _)| ds)
}

pub fn generate_with_truth(cfg: &SynthConfig) -> Result<(CausalDataset, GenerativeTruth)> {
    cfg.validate()?;
    let (n, d) = (cfg.n, cfg.d);

    let mut rng = stream(cfg.seed, 0);
    let clusters: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.c)).collect();
    let centroids: Vec<Vec<f64>> = (0..cfg.c).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
    let mut xdata = Vec::with_capacity(n * d);
    for &c in &clusters {
        let noise = normal_vec(&mut rng, d, FEATURE_NOISE_STD);
        xdata.extend(centroids[c].iter().zip(noise).map(|(m, e)| m + e));
    }
    let x = Tensor::from_rows(n, d, xdata)?;

    let mut rng = stream(cfg.seed, 1);
    let edges = sbm_edges(&clusters, cfg.p_in, cfg.p_out, &mut rng);
    let graph = Graph::from_edges(n, &edges)?;

    let xbar = contextual_features(&graph, &x);

    let mut rng = stream(cfg.seed, 2);
    let coef_std = (d as f64).powf(-0.25);
    let w_p = normal_vec(&mut rng, d, coef_std);
    let beta0 = normal_vec(&mut rng, d, coef_std);
    let beta_tau = normal_vec(&mut rng, d, coef_std);

    let score: Vec<f64> = (0..n).map(|i| dot(&w_p, xbar.row_slice(i))).collect();
    let med = median(&score);
    let mut propensity = Vec::with_capacity(n);
    for s in &score {
        let logit = cfg.k * (s - med);
        if logit.abs() >= MAX_LOGIT {
            return Err(Error::Config(format!(
                "propensity logit {logit:.2} saturates the sigmoid (|k (s - median)| >= {MAX_LOGIT}); lower k"
            )));
        }
        propensity.push(sigmoid(logit));
    }

    let mut rng = stream(cfg.seed, 3);
    let t: Vec<u8> = propensity.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();

    let mu0: Vec<f64> = (0..n).map(|i| dot(&beta0, xbar.row_slice(i))).collect();
    let mu1: Vec<f64> = (0..n)
        .map(|i| mu0[i] + dot(&beta_tau, xbar.row_slice(i)) + EFFECT_OFFSET)
        .collect();

    let mut rng = stream(cfg.seed, 4);
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mean = if t[i] == 1 { mu1[i] } else { mu0[i] };
            mean + cfg.sigma_y * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();

    let ds = CausalDataset {
        graph,
        x: FeatureMatrix::new(x)?,
        t,
        y,
        mu0,
        mu1,
        propensity,
        config: Some(cfg.clone()),
    };
    let truth = GenerativeTruth {
        clusters,
        x_context: xbar,
        w_p,
        beta0,
        beta_tau,
        score,
    };
    Ok((ds, truth))
}

/// Node indices partitioned into train/val/test at 3/1/1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Uniform shuffle by `seed`; val and test get `floor(N/5)` each and
    /// train takes the remainder.
    pub fn random(n: usize, seed: u64) -> Result<Self> {
        if n < 5 {
            return Err(Error::Data(format!("need at least 5 nodes to split, got {n}")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = stream(seed, 100);
        perm.shuffle(&mut rng);
        let fifth = n / 5;
        let n_train = n - 2 * fifth;
        Ok(Split {
            train: perm[..n_train].to_vec(),
            val: perm[n_train..n_train + fifth].to_vec(),
            test: perm[n_train + fifth..].to_vec(),
        })
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

pub fn split(ds: &CausalDataset, seed: u64) -> Result<Split> {
    Split::random(ds.num_nodes(), seed)
}

/// Nodes whose propensity falls outside `[eps, 1 - eps]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub threshold: f64,
    pub below: usize,
    pub above: usize,
    pub total: usize,
}

impl PositivityReport {
    pub fn violations(&self) -> usize {
        self.below + self.above
    }
}

pub fn positivity_report(propensity: &[f64], threshold: f64) -> PositivityReport {
    PositivityReport {
        threshold,
        below: propensity.iter().filter(|&&p| p < threshold).count(),
        above: propensity.iter().filter(|&&p| p > 1.0 - threshold).count(),
        total: propensity.len(),
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    num_nodes: usize,
    num_features: usize,
    seed: Option<u64>,
    config: Option<SynthConfig>,
}

fn write_column(path: &Path, values: impl Iterator<Item = String>) -> Result<()> {
    let mut s = String::new();
    for v in values {
        s.push_str(&v);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_column<T: std::str::FromStr>(path: &Path, expected: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(expected);
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            line.parse::<T>()
                .map_err(|e| Error::parse(path, Some(k + 1), e.to_string()))?,
        );
    }
    if out.len() != expected {
        return Err(Error::parse(
            path,
            None,
            format!("expected {expected} rows, found {}", out.len()),
        ));
    }
    Ok(out)
}

/// Writes `graph.txt`, `X.csv`, `t.csv`, `y.csv`, `mu0.csv`, `mu1.csv`,
/// `propensity.csv` and `manifest.json` into `dir`.
pub fn save_dataset(ds: &CausalDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.graph.save_edge_list(&dir.join("graph.txt"))?;
    ds.x.save_csv(&dir.join("X.csv"))?;
    write_column(&dir.join("t.csv"), ds.t.iter().map(|v| v.to_string()))?;
    for (name, col) in [
        ("y.csv", &ds.y),
        ("mu0.csv", &ds.mu0),
        ("mu1.csv", &ds.mu1),
        ("propensity.csv", &ds.propensity),
    ] {
        write_column(&dir.join(name), col.iter().map(|v| format!("{v:?}")))?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        num_nodes: ds.num_nodes(),
        num_features: ds.x.dim(),
        seed: ds.config.as_ref().map(|c| c.seed),
        config: ds.config.clone(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<CausalDataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, Some(e.line()), e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::io(
            &mpath,
            format!("unsupported dataset format version {}", manifest.format_version),
        ));
    }
    let n = manifest.num_nodes;
    let graph = Graph::load_edge_list(&dir.join("graph.txt"))?;
    if graph.num_nodes() != n {
        return Err(Error::parse(
            dir.join("graph.txt"),
            Some(1),
            format!("graph declares {} nodes, manifest {n}", graph.num_nodes()),
        ));
    }
    let xpath = dir.join("X.csv");
    let x = FeatureMatrix::load_csv(&xpath)?;
    if x.num_nodes() != n || x.dim() != manifest.num_features {
        return Err(Error::parse(
            &xpath,
            None,
            format!(
                "expected {n}x{} features, found {}x{}",
                manifest.num_features,
                x.num_nodes(),
                x.dim()
            ),
        ));
    }
    let t: Vec<u8> = read_column(&dir.join("t.csv"), n)?;
    let ds = CausalDataset {
        graph,
        x,
        t,
        y: read_column(&dir.join("y.csv"), n)?,
        mu0: read_column(&dir.join("mu0.csv"), n)?,
        mu1: read_column(&dir.join("mu1.csv"), n)?,
        propensity: read_column(&dir.join("propensity.csv"), n)?,
        config: manifest.config,
    };
    ds.validate()?;
    Ok(ds)
}
