//! Lipschitz-constrained graph encoder.
//!
//! `L` mean-aggregation graph layers map node features to a shared
//! representation `H`; two treatment-specific MLP branches map `H` to the
//! arm representations `z⁰`, `z¹`. With spectral normalization each weight is
//! divided by a power-iteration estimate of its largest singular value, ReLU
//! and closed-neighborhood averaging are non-expansive, so every layer is
//! (approximately) 1-Lipschitz row-wise. The last graph layer and the last
//! branch layer are linear.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ArrayEntry};
use crate::diffnum::{linalg, Bindings, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Power-iteration steps for standalone estimates, audits and finalization.
pub const STANDALONE_POWER_ITERS: usize = 30;

/// `τ` at or below this is treated as a zero matrix and left unnormalized.
const TAU_FLOOR: f64 = 1e-12;

pub const ENCODER_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

fn unit_random(n: usize, rng: &mut impl Rng) -> Tensor {
    loop {
        let t = Tensor::column((0..n).map(|_| rng.sample(StandardNormal)).collect());
        let norm = t.norm();
        if norm > 1e-12 {
            return t.scale(1.0 / norm);
        }
    }
}

fn normalized(t: &Tensor) -> Option<Tensor> {
    let n = t.norm();
    (n > 0.0 && n.is_finite()).then(|| t.scale(1.0 / n))
}

/// Power iteration for the largest singular value of `w` (`in x out`),
/// warm-started from and updating the unit vectors `u` (`in x 1`) and `v`
/// (`out x 1`). Returns `τ = uᵀ w v`, a lower bound on `σ_max(w)`.
pub fn spectral_norm_estimate(w: &Tensor, n_iters: usize, u: &mut Tensor, v: &mut Tensor) -> f64 {
    if w.data().iter().all(|&x| x == 0.0) {
        log::warn!("spectral norm of a zero matrix; normalization skipped");
        return 0.0;
    }
    let wt = w.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..n_iters {
        let next_v = loop {
            let cand = linalg::matmul(&wt, u).expect("u matches weight rows");
            match normalized(&cand) {
                Some(t) => break t,
                // u orthogonal to the range of w: restart from a random direction
                None => *u = unit_random(w.rows(), &mut rng),
            }
        };
        *v = next_v;
        let cand = linalg::matmul(w, v).expect("v matches weight cols");
        *u = normalized(&cand).expect("w v is nonzero after a nonzero wᵀu");
    }
    bilinear(u, w, v)
}

fn bilinear(u: &Tensor, w: &Tensor, v: &Tensor) -> f64 {
    let wv = linalg::matmul(w, v).expect("v matches weight cols");
    u.dot(&wv)
}

/// Largest singular value estimate from a fresh start.
pub fn spectral_norm(w: &Tensor, n_iters: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut u = unit_random(w.rows(), &mut rng);
    let mut v = unit_random(w.cols(), &mut rng);
    spectral_norm_estimate(w, n_iters, &mut u, &mut v)
}

/// `w / τ`.
pub fn normalize_weight(w: &Tensor, tau: f64) -> Result<Tensor> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::numeric(format!("cannot normalize by spectral norm {tau}")));
    }
    Ok(w.scale(1.0 / tau))
}

/// Affine map `h ↦ act(h W̄ + b)` with persistent power-iteration vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralLinear {
    pub weight: Tensor,
    /// `1 x out`.
    pub bias: Tensor,
    /// `in x 1`, unit norm.
    pub u: Tensor,
    /// `out x 1`, unit norm.
    pub v: Tensor,
    pub activation: Activation,
}

/// `rows x cols` matrix with orthonormal rows (if `rows <= cols`) or columns,
/// by Gram-Schmidt on Gaussian draws.
fn semi_orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let (short, long) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // a near-dependent draw is discarded and redrawn
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut w = Tensor::zeros(rows, cols);
    for (k, b) in basis.iter().enumerate() {
        for (l, &x) in b.iter().enumerate() {
            if rows <= cols {
                w.set(k, l, x);
            } else {
                w.set(l, k, x);
            }
        }
    }
    w
}

impl SpectralLinear {
    /// Random semi-orthogonal weight: every singular value is 1, so the
    /// normalized layer starts as an isometry on its row space.
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let weight = semi_orthogonal(in_dim, out_dim, rng);
        SpectralLinear {
            weight,
            bias: Tensor::zeros(1, out_dim),
            u: unit_random(in_dim, rng),
            v: unit_random(out_dim, rng),
            activation,
        }
    }

    pub fn from_weight(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let (i, o) = weight.dims();
        if bias.dims() != (1, o) {
            return Err(Error::shape(format!("bias {:?} for {i}x{o} weight", bias.dims())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(SpectralLinear {
            weight,
            bias,
            u: unit_random(i, &mut rng),
            v: unit_random(o, &mut rng),
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Advances the persistent vectors by `n_iters` steps; returns the new `τ`.
    pub fn power_iterate(&mut self, n_iters: usize) -> f64 {
        spectral_norm_estimate(&self.weight, n_iters, &mut self.u, &mut self.v)
    }

    /// `τ` at the current vectors, without iterating.
    pub fn tau(&self) -> f64 {
        bilinear(&self.u, &self.weight, &self.v)
    }

    /// Weight actually applied in the forward pass.
    pub fn effective_weight(&self, spectral_norm: bool) -> Tensor {
        let tau = self.tau();
        if spectral_norm && tau > TAU_FLOOR {
            self.weight.scale(1.0 / tau)
        } else {
            self.weight.clone()
        }
    }

    /// Pushes the effective weight onto the tape. `τ = uᵀ W v` stays
    /// differentiable in `W`; `u`, `v` are constants.
    fn weight_on_tape(&self, tape: &mut Tape, weight: Var, spectral_norm: bool) -> Result<Var> {
        if !spectral_norm {
            return Ok(weight);
        }
        let ut = tape.constant(self.u.transpose());
        let v = tape.constant(self.v.clone());
        let uw = tape.matmul(ut, weight)?;
        let tau = tape.matmul(uw, v)?;
        if tape.value(tau).item() <= TAU_FLOOR {
            return Ok(weight);
        }
        tape.div_scalar(weight, tau)
    }

    fn apply_on_tape(&self, tape: &mut Tape, input: Var, weight: Var, bias: Var, spectral_norm: bool) -> Result<Var> {
        let w = self.weight_on_tape(tape, weight, spectral_norm)?;
        let lin = tape.matmul(input, w)?;
        let out = tape.add_row(lin, bias)?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(out),
            Activation::Linear => out,
        })
    }
}

/// Graph layer `H ↦ act(MEAN(H) W̄ + b)` over closed neighborhoods.
#[derive(Clone, Debug, PartialEq)]
pub struct SageLayer {
    pub linear: SpectralLinear,
}

/// Dense layer `H ↦ act(H W̄ + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayer {
    pub linear: SpectralLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Output width of each graph layer; the last one is the shared width `S`.
    pub sage_widths: Vec<usize>,
    /// Output width of each branch layer.
    pub branch_widths: Vec<usize>,
    pub spectral_norm: bool,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, depth: usize, branch_depth: usize, width: usize) -> Self {
        EncoderConfig {
            input_dim,
            sage_widths: vec![width; depth],
            branch_widths: vec![width; branch_depth],
            spectral_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("encoder input dimension is 0".into()));
        }
        if self.sage_widths.is_empty() || self.branch_widths.is_empty() {
            return Err(Error::Config(
                "encoder needs at least one graph layer and one branch layer".into(),
            ));
        }
        if self.sage_widths.iter().chain(&self.branch_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.branch_widths.last().expect("validated")
    }
}

fn chain(input: usize, widths: &[usize], rng: &mut impl Rng) -> Vec<SpectralLinear> {
    let mut prev = input;
    widths
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let act = if k + 1 == widths.len() {
                Activation::Linear
            } else {
                Activation::Relu
            };
            let layer = SpectralLinear::new(prev, w, act, rng);
            prev = w;
            layer
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzEncoder {
    pub sage_layers: Vec<SageLayer>,
    /// Control (index 0) and treated (index 1) branches.
    pub branches: [Vec<MlpLayer>; 2],
    pub spectral_norm_enabled: bool,
}

#[derive(Serialize, Deserialize)]
struct EncoderManifest {
    format_version: u32,
    spectral_norm_enabled: bool,
    sage_activations: Vec<Activation>,
    branch_activations: [Vec<Activation>; 2],
    arrays: Vec<ArrayEntry>,
}

impl LipschitzEncoder {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sage_layers = chain(cfg.input_dim, &cfg.sage_widths, &mut rng)
            .into_iter()
            .map(|linear| SageLayer { linear })
            .collect::<Vec<_>>();
        let shared = *cfg.sage_widths.last().expect("validated");
        let mut branch = || {
            chain(shared, &cfg.branch_widths, &mut rng)
                .into_iter()
                .map(|linear| MlpLayer { linear })
                .collect::<Vec<_>>()
        };
        let b0 = branch();
        let b1 = branch();
        let mut enc = LipschitzEncoder {
            sage_layers,
            branches: [b0, b1],
            spectral_norm_enabled: cfg.spectral_norm,
        };
        enc.power_iterate(STANDALONE_POWER_ITERS);
        Ok(enc)
    }

    pub fn from_layers(
        sage_layers: Vec<SageLayer>,
        branches: [Vec<MlpLayer>; 2],
        spectral_norm_enabled: bool,
    ) -> Result<Self> {
        let enc = LipschitzEncoder {
            sage_layers,
            branches,
            spectral_norm_enabled,
        };
        enc.check_chain()?;
        Ok(enc)
    }

    fn check_chain(&self) -> Result<()> {
        if self.sage_layers.is_empty() {
            return Err(Error::Config("encoder has no graph layers".into()));
        }
        let mut prev = self.sage_layers[0].linear.in_dim();
        for l in &self.sage_layers {
            if l.linear.in_dim() != prev {
                return Err(Error::shape(format!(
                    "graph layer expects width {}, previous layer gives {prev}",
                    l.linear.in_dim()
                )));
            }
            prev = l.linear.out_dim();
        }
        let shared = prev;
        for b in &self.branches {
            let mut prev = shared;
            if b.is_empty() {
                return Err(Error::Config("encoder branch has no layers".into()));
            }
            for l in b {
                if l.linear.in_dim() != prev {
                    return Err(Error::shape(format!(
                        "branch layer expects width {}, previous layer gives {prev}",
                        l.linear.in_dim()
                    )));
                }
                prev = l.linear.out_dim();
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sage_layers[0].linear.in_dim()
    }

    pub fn shared_dim(&self) -> usize {
        self.sage_layers.last().expect("nonempty").linear.out_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.branches[0].last().expect("nonempty").linear.out_dim()
    }

    fn linears(&self) -> impl Iterator<Item = (String, &SpectralLinear)> {
        let sage = self
            .sage_layers
            .iter()
            .enumerate()
            .map(|(l, s)| (format!("sage.{l}"), &s.linear));
        let branches = self.branches.iter().enumerate().flat_map(|(t, b)| {
            b.iter()
                .enumerate()
                .map(move |(l, m)| (format!("branch{t}.{l}"), &m.linear))
        });
        sage.chain(branches)
    }

    fn linears_mut(&mut self) -> impl Iterator<Item = (String, &mut SpectralLinear)> {
        let sage = self
            .sage_layers
            .iter_mut()
            .enumerate()
            .map(|(l, s)| (format!("sage.{l}"), &mut s.linear));
        let branches = self.branches.iter_mut().enumerate().flat_map(|(t, b)| {
            b.iter_mut()
                .enumerate()
                .map(move |(l, m)| (format!("branch{t}.{l}"), &mut m.linear))
        });
        sage.chain(branches)
    }

    /// Trainable weights and biases, named `sage.{l}.w`, `branch{t}.{l}.b`, ...
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, lin) in self.linears() {
            p.insert(format!("{name}.w"), lin.weight.clone())
                .expect("unique layer names");
            p.insert(format!("{name}.b"), lin.bias.clone())
                .expect("unique layer names");
        }
        p
    }

    /// Copies weights and biases from `p` (names as in [`Self::params`]).
    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        for (name, lin) in self.linears_mut() {
            for (suffix, slot) in [("w", &mut lin.weight), ("b", &mut lin.bias)] {
                let key = format!("{name}.{suffix}");
                let t = p
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("missing encoder parameter `{key}`")))?;
                if !t.same_shape(slot) {
                    return Err(Error::shape(format!("`{key}`: {:?} vs {:?}", t.dims(), slot.dims())));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    /// Power-iteration vectors, named `sage.{l}.u`, `sage.{l}.v`, ...
    pub fn buffers(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, lin) in self.linears() {
            p.insert(format!("{name}.u"), lin.u.clone()).expect("unique");
            p.insert(format!("{name}.v"), lin.v.clone()).expect("unique");
        }
        p
    }

    pub fn set_buffers(&mut self, p: &ParamSet) -> Result<()> {
        for (name, lin) in self.linears_mut() {
            for (suffix, slot) in [("u", &mut lin.u), ("v", &mut lin.v)] {
                let key = format!("{name}.{suffix}");
                let t = p
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("missing encoder buffer `{key}`")))?;
                if !t.same_shape(slot) {
                    return Err(Error::shape(format!("`{key}` has shape {:?}", t.dims())));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    /// Advances every layer's power iteration; returns the per-layer `τ`.
    pub fn power_iterate(&mut self, n_iters: usize) -> Vec<f64> {
        self.linears_mut().map(|(_, lin)| lin.power_iterate(n_iters)).collect()
    }

    /// Spectral norm estimate (fresh start, 30 iterations) of every effective
    /// weight, in layer order.
    pub fn effective_spectral_norms(&self) -> Vec<f64> {
        self.linears()
            .map(|(_, lin)| {
                spectral_norm(
                    &lin.effective_weight(self.spectral_norm_enabled),
                    STANDALONE_POWER_ITERS,
                )
            })
            .collect()
    }

    /// Graph layers on the tape. Parameters are looked up in `bound` under
    /// `prefix` followed by the names of [`Self::params`].
    pub fn sage_on_tape(&self, tape: &mut Tape, bound: &Bindings, prefix: &str, g: &Arc<Graph>, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, layer) in self.sage_layers.iter().enumerate() {
            let agg = tape.mean_aggregate(h, g)?;
            h = layer.linear.apply_on_tape(
                tape,
                agg,
                bound.var(&format!("{prefix}sage.{l}.w")),
                bound.var(&format!("{prefix}sage.{l}.b")),
                self.spectral_norm_enabled,
            )?;
        }
        Ok(h)
    }

    pub fn branch_on_tape(&self, tape: &mut Tape, bound: &Bindings, prefix: &str, h: Var, arm: usize) -> Result<Var> {
        let layers = self.branch(arm)?;
        let mut z = h;
        for (l, layer) in layers.iter().enumerate() {
            z = layer.linear.apply_on_tape(
                tape,
                z,
                bound.var(&format!("{prefix}branch{arm}.{l}.w")),
                bound.var(&format!("{prefix}branch{arm}.{l}.b")),
                self.spectral_norm_enabled,
            )?;
        }
        Ok(z)
    }

    fn branch(&self, arm: usize) -> Result<&[MlpLayer]> {
        self.branches
            .get(arm)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("treatment arm must be 0 or 1, got {arm}")))
    }

    /// Shared representation `H` (`N x S`).
    pub fn sage_forward(&self, g: &Arc<Graph>, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "features have width {}, encoder expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if x.rows() != g.num_nodes() {
            return Err(Error::shape(format!(
                "{} feature rows for a {}-node graph",
                x.rows(),
                g.num_nodes()
            )));
        }
        let mut tape = Tape::new();
        let bound = Bindings::bind(&mut tape, &self.params(), false);
        let xv = tape.constant(x.clone());
        let h = self.sage_on_tape(&mut tape, &bound, "", g, xv)?;
        Ok(tape.value(h).clone())
    }

    /// Arm representation `z^arm` from `H`.
    pub fn branch_forward(&self, h: &Tensor, arm: usize) -> Result<Tensor> {
        if h.cols() != self.shared_dim() {
            return Err(Error::shape(format!(
                "representation width {}, branch expects {}",
                h.cols(),
                self.shared_dim()
            )));
        }
        let mut tape = Tape::new();
        let bound = Bindings::bind(&mut tape, &self.params(), false);
        let hv = tape.constant(h.clone());
        let z = self.branch_on_tape(&mut tape, &bound, "", hv, arm)?;
        Ok(tape.value(z).clone())
    }

    /// Both arm representations.
    pub fn encode(&self, g: &Arc<Graph>, x: &Tensor) -> Result<[Tensor; 2]> {
        let h = self.sage_forward(g, x)?;
        Ok([self.branch_forward(&h, 0)?, self.branch_forward(&h, 1)?])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut arrays = self.params();
        arrays.extend(&self.buffers())?;
        let entries = checkpoint::write_arrays(dir, &arrays)?;
        let manifest = EncoderManifest {
            format_version: ENCODER_FORMAT_VERSION,
            spectral_norm_enabled: self.spectral_norm_enabled,
            sage_activations: self.sage_layers.iter().map(|l| l.linear.activation).collect(),
            branch_activations: [0, 1].map(|t| self.branches[t].iter().map(|l| l.linear.activation).collect()),
            arrays: entries,
        };
        checkpoint::write_json(&dir.join("encoder.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("encoder.json");
        let m: EncoderManifest = checkpoint::read_json(&path)?;
        if m.format_version != ENCODER_FORMAT_VERSION {
            return Err(Error::io(
                &path,
                format!("unsupported encoder format version {}", m.format_version),
            ));
        }
        let arrays = checkpoint::read_arrays(dir, &m.arrays)?;
        let get = |key: String| {
            arrays
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::io(&path, format!("missing array `{key}`")))
        };
        let layer = |name: String, act: Activation| -> Result<SpectralLinear> {
            Ok(SpectralLinear {
                weight: get(format!("{name}.w"))?,
                bias: get(format!("{name}.b"))?,
                u: get(format!("{name}.u"))?,
                v: get(format!("{name}.v"))?,
                activation: act,
            })
        };
        let sage_layers = m
            .sage_activations
            .iter()
            .enumerate()
            .map(|(l, &a)| layer(format!("sage.{l}"), a).map(|linear| SageLayer { linear }))
            .collect::<Result<Vec<_>>>()?;
        let mut branches: [Vec<MlpLayer>; 2] = [Vec::new(), Vec::new()];
        for (t, acts) in m.branch_activations.iter().enumerate() {
            for (l, &a) in acts.iter().enumerate() {
                branches[t].push(MlpLayer {
                    linear: layer(format!("branch{t}.{l}"), a)?,
                });
            }
        }
        LipschitzEncoder::from_layers(sage_layers, branches, m.spectral_norm_enabled).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzAudit {
    /// Largest `‖z_i − z_j‖ / ‖x_i − x_j‖` over both arms.
    pub max_ratio: f64,
    pub max_ratio_per_arm: [f64; 2],
    pub pairs_evaluated: usize,
    /// Sampled pairs with `‖x_i − x_j‖ ≤ 1e-9`.
    pub pairs_skipped: usize,
}

/// Empirical Lipschitz ratio of the full pipeline over `n_pairs` node pairs
/// sampled uniformly (without self-pairs).
pub fn lipschitz_audit(
    enc: &LipschitzEncoder,
    g: &Arc<Graph>,
    x: &Tensor,
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzAudit> {
    let z = enc.encode(g, x)?;
    Ok(pairwise_ratio_audit(x, &z, n_pairs, seed))
}

/// Ratio audit on precomputed representations.
pub fn pairwise_ratio_audit(x: &Tensor, z: &[Tensor; 2], n_pairs: usize, seed: u64) -> LipschitzAudit {
    let n = x.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_arm = [0.0f64; 2];
    let (mut evaluated, mut skipped) = (0, 0);
    if n >= 2 {
        for _ in 0..n_pairs {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let dx = row_dist(x, i, j);
            if dx <= 1e-9 {
                skipped += 1;
                continue;
            }
            evaluated += 1;
            for (arm, zt) in z.iter().enumerate() {
                per_arm[arm] = per_arm[arm].max(row_dist(zt, i, j) / dx);
            }
        }
    }
    LipschitzAudit {
        max_ratio: per_arm[0].max(per_arm[1]),
        max_ratio_per_arm: per_arm,
        pairs_evaluated: evaluated,
        pairs_skipped: skipped,
    }
}

fn row_dist(t: &Tensor, i: usize, j: usize) -> f64 {
    t.row_slice(i)
        .iter()
        .zip(t.row_slice(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn seeded(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_rows(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap()
    }

    /// One-sided Jacobi: orthogonalize the columns of `a`; singular values are
    /// the resulting column norms.
    fn jacobi_singular_values(a: &Tensor) -> Vec<f64> {
        let (m, n) = a.dims();
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                    let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                    let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                    if gamma.abs() < 1e-300 {
                        continue;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt());
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..m {
                        let (xp, xq) = (cols[p][i], cols[q][i]);
                        cols[p][i] = c * xp - s * xq;
                        cols[q][i] = s * xp + c * xq;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut sv: Vec<f64> = cols
            .iter()
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    #[test]
    fn jacobi_oracle_matches_known_values() {
        let d = Tensor::from_rows(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let sv = jacobi_singular_values(&d);
        assert!((sv[0] - 3.0).abs() < 1e-12 && (sv[1] - 1.0).abs() < 1e-12);
        // rank-one outer product: single singular value |a||b|
        let r = Tensor::from_rows(2, 3, vec![1.0, 2.0, 2.0, 2.0, 4.0, 4.0]).unwrap();
        let sv = jacobi_singular_values(&r);
        assert!((sv[0] - 5.0_f64.sqrt() * 3.0).abs() < 1e-10);
    }

    #[test]
    fn diagonal_and_identity_norms() {
        let d = Tensor::from_rows(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((spectral_norm(&d, 30) - 3.0).abs() < 1e-9);
        assert!((spectral_norm(&Tensor::eye(4), 30) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_5x7_within_one_percent_of_svd() {
        let w = seeded(5, 7, 42);
        let sigma = jacobi_singular_values(&w)[0];
        let tau = spectral_norm(&w, 30);
        assert!(tau <= sigma * (1.0 + 1e-12));
        assert!((sigma - tau) / sigma < 0.01, "tau {tau} sigma {sigma}");
    }

    #[test]
    fn zero_matrix_gives_zero() {
        assert_eq!(spectral_norm(&Tensor::zeros(3, 4), 30), 0.0);
    }

    #[test]
    fn estimate_is_lower_bound_and_updates_vectors() {
        let w = seeded(6, 4, 3);
        let sigma = jacobi_singular_values(&w)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut u = unit_random(6, &mut rng);
        let mut v = unit_random(4, &mut rng);
        let u0 = u.clone();
        let mut prev = 0.0;
        for _ in 0..10 {
            let tau = spectral_norm_estimate(&w, 1, &mut u, &mut v);
            assert!(tau <= sigma * (1.0 + 1e-12));
            assert!(tau >= prev - 1e-12, "power iteration is monotone");
            prev = tau;
            assert!((u.norm() - 1.0).abs() < 1e-12 && (v.norm() - 1.0).abs() < 1e-12);
        }
        assert_ne!(u, u0);
    }

    #[test]
    fn normalize_weight_examples() {
        let w = Tensor::from_rows(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let tau = spectral_norm(&w, 30);
        assert!((tau - 2.0).abs() < 1e-9);
        assert_eq!(normalize_weight(&w, 2.0).unwrap().data(), &[1.0, 0.0, 0.0, 0.5]);
        assert_eq!(normalize_weight(&w, 1.0).unwrap(), w);
        assert!(matches!(normalize_weight(&w, 0.0), Err(Error::Numeric { .. })));
        assert!(matches!(normalize_weight(&w, -1.0), Err(Error::Numeric { .. })));

        let w = seeded(8, 5, 1);
        let wbar = normalize_weight(&w, spectral_norm(&w, 30)).unwrap();
        let again = spectral_norm(&wbar, 30);
        assert!((0.99..=1.001).contains(&again), "{again}");
        let twice = normalize_weight(&wbar, spectral_norm(&wbar, 30)).unwrap();
        for (a, b) in twice.data().iter().zip(wbar.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
        }
    }

    fn identity_encoder(dim: usize, depth: usize, branch_depth: usize, sn: bool) -> LipschitzEncoder {
        let lin = |act| SpectralLinear::from_weight(Tensor::eye(dim), Tensor::zeros(1, dim), act).unwrap();
        let act = |k: usize, n: usize| {
            if k + 1 == n {
                Activation::Linear
            } else {
                Activation::Relu
            }
        };
        let sage = (0..depth)
            .map(|k| SageLayer {
                linear: lin(act(k, depth)),
            })
            .collect();
        let branch = || {
            (0..branch_depth)
                .map(|k| MlpLayer {
                    linear: lin(act(k, branch_depth)),
                })
                .collect()
        };
        let mut enc = LipschitzEncoder::from_layers(sage, [branch(), branch()], sn).unwrap();
        enc.power_iterate(30);
        enc
    }

    #[test]
    fn single_node_relu_identity() {
        let mut enc = identity_encoder(3, 1, 1, true);
        enc.sage_layers[0].linear.activation = Activation::Relu;
        let g = Arc::new(Graph::edgeless(1));
        let x = Tensor::from_rows(1, 3, vec![0.5, 2.0, 0.0]).unwrap();
        // τ of the identity is 1 up to rounding
        assert!(enc.sage_forward(&g, &x).unwrap().max_abs_diff(&x) < 1e-14);
        let neg = Tensor::from_rows(1, 3, vec![-1.0, 2.0, -3.0]).unwrap();
        let want = Tensor::from_rows(1, 3, vec![0.0, 2.0, 0.0]).unwrap();
        assert!(enc.sage_forward(&g, &neg).unwrap().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn two_node_edge_reduces_to_mean() {
        let enc = identity_encoder(2, 1, 1, true);
        let g = Arc::new(Graph::from_edges(2, &[(0, 1)]).unwrap());
        let x = Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let h = enc.sage_forward(&g, &x).unwrap();
        assert!(h.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn branch_identity_and_zero_weights() {
        let enc = identity_encoder(3, 1, 1, true);
        let h = seeded(4, 3, 5);
        assert!(enc.branch_forward(&h, 1).unwrap().max_abs_diff(&h) < 1e-15);

        let bias = Tensor::row(vec![0.1, -0.2, 0.3]);
        let zero = SpectralLinear::from_weight(Tensor::zeros(3, 3), bias.clone(), Activation::Linear).unwrap();
        let mut enc = enc;
        enc.branches[0] = vec![MlpLayer { linear: zero }];
        let z = enc.branch_forward(&h, 0).unwrap();
        for i in 0..4 {
            assert_eq!(z.row_slice(i), bias.data());
        }
        assert!(matches!(enc.branch_forward(&h, 2), Err(Error::Config(_))));
    }

    /// Weight rows, bias, τ, ReLU flag.
    type OracleLayer = (Vec<Vec<f64>>, Vec<f64>, f64, bool);

    /// Straight-line forward: closed-neighborhood mean, `x W / τ + b`, ReLU.
    fn oracle_forward(adj: &[Vec<usize>], x: &[Vec<f64>], layers: &[OracleLayer], aggregate: bool) -> Vec<Vec<f64>> {
        let mut h = x.to_vec();
        for (w, b, tau, relu) in layers {
            let src = if aggregate {
                (0..h.len())
                    .map(|i| {
                        let mut acc = h[i].clone();
                        for &j in &adj[i] {
                            for (a, v) in acc.iter_mut().zip(&h[j]) {
                                *a += v;
                            }
                        }
                        let k = (adj[i].len() + 1) as f64;
                        acc.iter().map(|a| a / k).collect::<Vec<f64>>()
                    })
                    .collect::<Vec<_>>()
            } else {
                h.clone()
            };
            h = src
                .iter()
                .map(|row| {
                    (0..b.len())
                        .map(|o| {
                            let mut s = b[o];
                            for (i, r) in row.iter().enumerate() {
                                s += r * w[i][o] / tau;
                            }
                            if *relu {
                                s.max(0.0)
                            } else {
                                s
                            }
                        })
                        .collect()
                })
                .collect();
        }
        h
    }

    fn as_rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
    }

    fn oracle_layers(layers: &[&SpectralLinear], sn: bool) -> Vec<OracleLayer> {
        layers
            .iter()
            .map(|l| {
                let tau = if sn {
                    let (u, w, v) = (&l.u, &l.weight, &l.v);
                    let mut s = 0.0;
                    for i in 0..w.rows() {
                        for j in 0..w.cols() {
                            s += u.data()[i] * w.get(i, j) * v.data()[j];
                        }
                    }
                    s
                } else {
                    1.0
                };
                (
                    as_rows(&l.weight),
                    l.bias.data().to_vec(),
                    tau,
                    l.activation == Activation::Relu,
                )
            })
            .collect()
    }

    #[test]
    fn three_node_path_matches_straight_line_oracle() {
        for sn in [true, false] {
            let cfg = EncoderConfig {
                input_dim: 3,
                sage_widths: vec![4, 5],
                branch_widths: vec![4, 2],
                spectral_norm: sn,
            };
            let mut enc = LipschitzEncoder::new(&cfg, 17).unwrap();
            for l in enc.sage_layers.iter_mut() {
                l.linear.bias = Tensor::row((0..l.linear.out_dim()).map(|k| 0.1 * k as f64 - 0.15).collect());
            }
            let g = Arc::new(Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap());
            let adj = vec![vec![1], vec![0, 2], vec![1]];
            let x = seeded(3, 3, 23);
            let h = enc.sage_forward(&g, &x).unwrap();
            let sage: Vec<&SpectralLinear> = enc.sage_layers.iter().map(|l| &l.linear).collect();
            let want_h = oracle_forward(&adj, &as_rows(&x), &oracle_layers(&sage, sn), true);
            for (row, want) in as_rows(&h).iter().zip(&want_h) {
                for (a, b) in row.iter().zip(want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            for arm in 0..2 {
                let z = enc.branch_forward(&h, arm).unwrap();
                let br: Vec<&SpectralLinear> = enc.branches[arm].iter().map(|l| &l.linear).collect();
                let want = oracle_forward(&adj, &want_h, &oracle_layers(&br, sn), false);
                for (row, w) in as_rows(&z).iter().zip(&want) {
                    for (a, b) in row.iter().zip(w) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn initial_weights_are_semi_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (r, c) in [(4, 9), (9, 4), (6, 6), (1, 3)] {
            let w = semi_orthogonal(r, c, &mut rng);
            let gram = if r <= c {
                linalg::matmul(&w, &w.transpose()).unwrap()
            } else {
                linalg::matmul(&w.transpose(), &w).unwrap()
            };
            assert!(gram.max_abs_diff(&Tensor::eye(r.min(c))) < 1e-12, "{r}x{c}");
            assert!((spectral_norm(&w, STANDALONE_POWER_ITERS) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn disabled_flag_is_plain_graph_network() {
        let cfg = EncoderConfig::new(4, 2, 2, 6);
        let mut enc = LipschitzEncoder::new(&cfg, 3).unwrap();
        // semi-orthogonal init has τ = 1; scale so normalization matters
        for (_, l) in enc.linears_mut() {
            l.weight = l.weight.map(|w| 2.5 * w);
        }
        enc.power_iterate(STANDALONE_POWER_ITERS);
        let mut plain = enc.clone();
        plain.spectral_norm_enabled = false;
        // same weights with every τ folded in reproduces the normalized network
        let mut folded = plain.clone();
        let normalized: Vec<Tensor> = enc.linears().map(|(_, l)| l.effective_weight(true)).collect();
        for ((_, l), w) in folded.linears_mut().zip(normalized) {
            l.weight = w;
        }
        let g = Arc::new(Graph::from_edges(5, &[(0, 1), (1, 2), (3, 4)]).unwrap());
        let x = seeded(5, 4, 8);
        let a = enc.encode(&g, &x).unwrap();
        let b = folded.encode(&g, &x).unwrap();
        for t in 0..2 {
            assert!(a[t].max_abs_diff(&b[t]) < 1e-12);
        }
        let c = plain.encode(&g, &x).unwrap();
        assert!(a[0].max_abs_diff(&c[0]) > 1e-6);
    }

    #[test]
    fn audit_identity_and_halved_pipelines() {
        let g = Arc::new(Graph::edgeless(30));
        let x = seeded(30, 3, 4);
        let enc = identity_encoder(3, 1, 1, false);
        let audit = lipschitz_audit(&enc, &g, &x, 200, 1).unwrap();
        assert!((audit.max_ratio - 1.0).abs() < 1e-12);
        assert_eq!(audit.pairs_evaluated + audit.pairs_skipped, 200);

        let mut halved = identity_encoder(3, 2, 2, false);
        for (_, l) in halved.linears_mut() {
            l.weight = l.weight.scale(0.5);
        }
        let audit = lipschitz_audit(&halved, &g, &x, 500, 2).unwrap();
        assert!(audit.max_ratio <= 0.5 + 1e-9, "{}", audit.max_ratio);
        assert!(audit.max_ratio > 0.0);
    }

    #[test]
    fn audit_skips_duplicate_features() {
        let g = Arc::new(Graph::edgeless(4));
        let x = Tensor::from_rows(4, 1, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let enc = identity_encoder(1, 1, 1, true);
        let audit = lipschitz_audit(&enc, &g, &x, 50, 0).unwrap();
        assert_eq!((audit.pairs_evaluated, audit.pairs_skipped), (0, 50));
        assert_eq!(audit.max_ratio, 0.0);
    }

    #[test]
    fn effective_norms_at_most_one_after_iteration() {
        let cfg = EncoderConfig::new(16, 2, 2, 32);
        let enc = LipschitzEncoder::new(&cfg, 11).unwrap();
        for n in enc.effective_spectral_norms() {
            assert!(n <= 1.0 + 1e-3, "{n}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig::new(5, 2, 1, 7);
        let enc = LipschitzEncoder::new(&cfg, 2).unwrap();
        enc.save(dir.path()).unwrap();
        let back = LipschitzEncoder::load(dir.path()).unwrap();
        assert_eq!(back, enc);
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let enc = LipschitzEncoder::new(&EncoderConfig::new(3, 1, 1, 4), 0).unwrap();
        let g = Arc::new(Graph::edgeless(2));
        assert!(matches!(
            enc.sage_forward(&g, &Tensor::zeros(2, 5)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            LipschitzEncoder::new(&EncoderConfig::new(3, 0, 1, 4), 0),
            Err(Error::Config(_))
        ));
    }

    fn row_dist_between(a: &Tensor, b: &Tensor, i: usize) -> f64 {
        a.row_slice(i)
            .iter()
            .zip(b.row_slice(i))
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn dense_ratio(layer: &SpectralLinear, a: &Tensor, b: &Tensor) -> f64 {
        let apply = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let w = tape.constant(layer.weight.clone());
            let bias = tape.constant(layer.bias.clone());
            let out = layer.apply_on_tape(&mut tape, xv, w, bias, true).unwrap();
            tape.value(out).clone()
        };
        row_dist_between(&apply(a), &apply(b), 0) / row_dist_between(a, b, 0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        /// Row-wise Lipschitz bound of one normalized dense layer.
        #[test]
        fn normalized_dense_layer_is_nonexpansive(seed in 0u64..10_000, relu in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let act = if relu { Activation::Relu } else { Activation::Linear };
            let mut layer = SpectralLinear::new(6, 5, act, &mut rng);
            layer.power_iterate(STANDALONE_POWER_ITERS);
            let a = seeded(1, 6, seed + 1);
            let b = seeded(1, 6, seed + 2);
            prop_assert!(dense_ratio(&layer, &a, &b) <= 1.0 + 1e-3);
        }

        /// Aggregation then normalized layer: outputs move no more than the
        /// largest input row displacement.
        #[test]
        fn normalized_graph_layer_bounded_by_max_row_shift(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let edges: Vec<(usize, usize)> = (0..8)
                .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
                .collect();
            let g = Arc::new(Graph::from_edges(n, &edges).unwrap());
            let mut layer = SpectralLinear::new(4, 4, Activation::Relu, &mut rng);
            layer.power_iterate(STANDALONE_POWER_ITERS);
            let a = seeded(n, 4, seed + 10);
            let b = seeded(n, 4, seed + 20);
            let apply = |x: &Tensor| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let agg = tape.mean_aggregate(xv, &g).unwrap();
                let w = tape.constant(layer.weight.clone());
                let bias = tape.constant(layer.bias.clone());
                let out = layer.apply_on_tape(&mut tape, agg, w, bias, true).unwrap();
                tape.value(out).clone()
            };
            let (fa, fb) = (apply(&a), apply(&b));
            let max_in = (0..n).map(|i| row_dist_between(&a, &b, i)).fold(0.0, f64::max);
            for i in 0..n {
                prop_assert!(row_dist_between(&fa, &fb, i) <= (1.0 + 1e-3) * max_in);
            }
        }
    }
}
