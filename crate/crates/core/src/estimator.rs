//! The full model: a shared graph encoder, two treatment branches and one
//! sparse GP head per arm, trained jointly on `-(ELBO₀ + ELBO₁)`.
//!
//! Training is transductive: the encoder always runs over the whole graph,
//! while each head sees only the factual outcomes of training nodes in its
//! own arm. Predictions report `ITE = μ₁ - μ₀` and the uncertainty
//! `σ₁² + σ₀²` of the latent predictive posteriors, in outcome units.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ArrayEntry};
use crate::diffnum::{
    adam_step, finite_diff_check, value_and_grad, AdamConfig, AdamState, Bindings, FiniteDiffReport, ParamSet, Tape,
    Tensor, Var,
};
use crate::encoder::{EncoderConfig, LipschitzEncoder, STANDALONE_POWER_ITERS};
use crate::error::{Error, Result};
use crate::gp::{elbo_on_tape, HeadVars, SvgpHead};
use crate::graph::Graph;
use crate::synthgen::{CausalDataset, Split};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const TRAIN_STATE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub spectral_norm: bool,
    /// Graph layers `L`.
    pub depth: usize,
    /// Layers per treatment branch `L'`.
    pub branch_depth: usize,
    pub width: usize,
    pub num_inducing: usize,
    /// Epochs without validation improvement before stopping; `None` trains
    /// for all epochs and keeps the last model.
    pub patience: Option<usize>,
    /// Train only the GP heads on top of the initial encoder.
    pub freeze_encoder: bool,
    pub min_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            adam: AdamConfig::default(),
            seed: 0,
            spectral_norm: true,
            depth: 2,
            branch_depth: 2,
            width: 32,
            num_inducing: 64,
            patience: Some(50),
            freeze_encoder: false,
            min_jitter: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth == 0 || self.branch_depth == 0 || self.width == 0 {
            return bad("depth, branch depth and width must be positive");
        }
        if self.num_inducing == 0 {
            return bad("number of inducing points must be positive");
        }
        if !self.adam.lr.is_finite() || self.adam.lr <= 0.0 {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive (omit it to disable early stopping)");
        }
        if self.min_jitter.is_nan() || self.min_jitter < 0.0 {
            return bad("min_jitter must be >= 0");
        }
        Ok(())
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            spectral_norm: self.spectral_norm,
            ..EncoderConfig::new(input_dim, self.depth, self.branch_depth, self.width)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDklModel {
    pub encoder: LipschitzEncoder,
    /// Control head (index 0) and treated head (index 1).
    pub heads: [SvgpHead; 2],
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItePrediction {
    pub node: usize,
    pub ite: f64,
    pub uncertainty: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub var0: f64,
    pub var1: f64,
}

/// Nodes of one arm with their standardized factual outcomes.
#[derive(Clone, Debug)]
struct ArmData {
    nodes: Arc<[usize]>,
    y: Tensor,
}

#[derive(Clone, Debug)]
struct Problem {
    graph: Arc<Graph>,
    x: Tensor,
    train: [ArmData; 2],
    val: [ArmData; 2],
}

fn arm_nodes(ds: &CausalDataset, nodes: &[usize], arm: u8) -> Vec<usize> {
    nodes.iter().copied().filter(|&i| ds.t[i] == arm).collect()
}

fn arm_data(ds: &CausalDataset, nodes: &[usize], arm: u8, head: &SvgpHead) -> ArmData {
    let idx = arm_nodes(ds, nodes, arm);
    let y: Vec<f64> = idx.iter().map(|&i| ds.y[i]).collect();
    ArmData {
        y: Tensor::column(head.standardize(&y)),
        nodes: idx.into(),
    }
}

fn check_nodes(ds: &CausalDataset, nodes: &[usize]) -> Result<()> {
    let n = ds.num_nodes();
    match nodes.iter().find(|&&i| i >= n) {
        Some(bad) => Err(Error::Data(format!("node index {bad} out of range for {n} nodes"))),
        None => Ok(()),
    }
}

/// Model parameters under `enc.`, `head0.`, `head1.` prefixes.
fn model_params(model: &GraphDklModel, with_encoder: bool) -> ParamSet {
    let mut p = ParamSet::new();
    let mut add = |prefix: &str, set: ParamSet| {
        for (k, v) in set.iter() {
            p.insert(format!("{prefix}{k}"), v.clone())
                .expect("prefixed names are unique");
        }
    };
    if with_encoder {
        add("enc.", model.encoder.params());
    }
    add("head0.", model.heads[0].params());
    add("head1.", model.heads[1].params());
    p
}

fn apply_params(model: &mut GraphDklModel, p: &ParamSet, with_encoder: bool) -> Result<()> {
    if with_encoder {
        model.encoder.set_params(&p.with_prefix("enc."))?;
    }
    model.heads[0].set_params(&p.with_prefix("head0."))?;
    model.heads[1].set_params(&p.with_prefix("head1."))
}

fn encoder_constants(model: &GraphDklModel, tape: &mut Tape) -> Bindings {
    let mut p = ParamSet::new();
    for (k, v) in model.encoder.params().iter() {
        p.insert(format!("enc.{k}"), v.clone()).expect("unique");
    }
    Bindings::bind(tape, &p, false)
}

/// `-(ELBO₀ + ELBO₁)` over the given arm data; arms without nodes are skipped.
fn negative_elbo_on_tape(
    model: &GraphDklModel,
    tape: &mut Tape,
    bound: &Bindings,
    graph: &Arc<Graph>,
    x: &Tensor,
    arms: &[ArmData; 2],
) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let h = model.encoder.sage_on_tape(tape, bound, "enc.", graph, xv)?;
    let mut total = tape.scalar(0.0);
    for (arm, data) in arms.iter().enumerate() {
        if data.nodes.is_empty() {
            continue;
        }
        let rows = tape.gather_rows(h, &data.nodes)?;
        let z = model.encoder.branch_on_tape(tape, bound, "enc.", rows, arm)?;
        let head = HeadVars::from_bindings(bound, &format!("head{arm}."));
        let y = tape.constant(data.y.clone());
        let e = elbo_on_tape(tape, &head, z, y, model.heads[arm].min_jitter)?;
        total = tape.sub(total, e.elbo)?;
    }
    Ok(total)
}

impl GraphDklModel {
    /// Fresh encoder from `cfg.seed`; each head starts at its prior with
    /// inducing points drawn from the initial representations of its arm's
    /// training nodes.
    pub fn init(ds: &CausalDataset, split: &Split, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        ds.validate()?;
        check_nodes(ds, &split.train)?;
        check_nodes(ds, &split.val)?;
        check_nodes(ds, &split.test)?;
        let train_arms = [arm_nodes(ds, &split.train, 0), arm_nodes(ds, &split.train, 1)];
        for (arm, nodes) in train_arms.iter().enumerate() {
            if nodes.is_empty() {
                return Err(Error::Data(format!("training split has no nodes with treatment {arm}")));
            }
        }
        let encoder = LipschitzEncoder::new(&cfg.encoder_config(ds.x.dim()), cfg.seed)?;
        let graph = Arc::new(ds.graph.clone());
        let h = encoder.sage_forward(&graph, ds.x.tensor())?;
        let mut heads = Vec::with_capacity(2);
        for (arm, nodes) in train_arms.iter().enumerate() {
            let z = encoder.branch_forward(&h.select_rows(nodes), arm)?;
            let y: Vec<f64> = nodes.iter().map(|&i| ds.y[i]).collect();
            let seed = cfg.seed.wrapping_add(1 + arm as u64);
            heads.push(SvgpHead::init(&z, &y, cfg.num_inducing, seed, cfg.min_jitter)?);
        }
        let head1 = heads.pop().expect("two heads");
        let head0 = heads.pop().expect("two heads");
        Ok(GraphDklModel {
            encoder,
            heads: [head0, head1],
            config: cfg.clone(),
        })
    }

    fn problem(&self, ds: &CausalDataset, split: &Split) -> Problem {
        let arm = |nodes: &[usize], t: u8| arm_data(ds, nodes, t, &self.heads[t as usize]);
        Problem {
            graph: Arc::new(ds.graph.clone()),
            x: ds.x.tensor().clone(),
            train: [arm(&split.train, 0), arm(&split.train, 1)],
            val: [arm(&split.val, 0), arm(&split.val, 1)],
        }
    }

    /// All trainable parameters (encoder and both heads), prefixed
    /// `enc.`, `head0.`, `head1.`.
    pub fn params(&self) -> ParamSet {
        model_params(self, true)
    }

    pub fn set_params(&mut self, p: &ParamSet) -> Result<()> {
        apply_params(self, p, true)
    }

    /// `-(ELBO₀ + ELBO₁)` over the factual nodes of `nodes`, evaluated with
    /// every parameter held constant.
    pub fn negative_elbo(&self, ds: &CausalDataset, nodes: &[usize]) -> Result<f64> {
        check_nodes(ds, nodes)?;
        let arms = [
            arm_data(ds, nodes, 0, &self.heads[0]),
            arm_data(ds, nodes, 1, &self.heads[1]),
        ];
        let graph = Arc::new(ds.graph.clone());
        let mut tape = Tape::new();
        let bound = Bindings::bind(&mut tape, &self.params(), false);
        let loss = negative_elbo_on_tape(self, &mut tape, &bound, &graph, ds.x.tensor(), &arms)?;
        Ok(tape.value(loss).item())
    }

    /// Central-difference check of the gradient of [`Self::negative_elbo`]
    /// with respect to every trainable parameter.
    pub fn check_loss_gradient(
        &self,
        ds: &CausalDataset,
        nodes: &[usize],
        h: f64,
        rtol: f64,
        atol: f64,
    ) -> Result<FiniteDiffReport> {
        check_nodes(ds, nodes)?;
        let arms = [
            arm_data(ds, nodes, 0, &self.heads[0]),
            arm_data(ds, nodes, 1, &self.heads[1]),
        ];
        let graph = Arc::new(ds.graph.clone());
        finite_diff_check(
            |tape, b| negative_elbo_on_tape(self, tape, b, &graph, ds.x.tensor(), &arms),
            &self.params(),
            h,
            rtol,
            atol,
        )
    }

    /// ITE and uncertainty for each node in `nodes`.
    pub fn predict(&self, ds: &CausalDataset, nodes: &[usize]) -> Result<Vec<ItePrediction>> {
        check_nodes(ds, nodes)?;
        let graph = Arc::new(ds.graph.clone());
        let h = self.encoder.sage_forward(&graph, ds.x.tensor())?;
        let rows = h.select_rows(nodes);
        let p0 = self.heads[0].predict(&self.encoder.branch_forward(&rows, 0)?, false)?;
        let p1 = self.heads[1].predict(&self.encoder.branch_forward(&rows, 1)?, false)?;
        Ok(nodes
            .iter()
            .enumerate()
            .map(|(k, &node)| ItePrediction {
                node,
                ite: p1.mean[k] - p0.mean[k],
                uncertainty: p0.var[k] + p1.var[k],
                mu0: p0.mean[k],
                mu1: p1.mean[k],
                var0: p0.var[k],
                var1: p1.var[k],
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.encoder.save(&dir.join("encoder"))?;
        self.heads[0].save(&dir.join("head0"))?;
        self.heads[1].save(&dir.join("head1"))?;
        checkpoint::write_json(
            &dir.join("model.json"),
            &ModelManifest {
                format_version: MODEL_FORMAT_VERSION,
                config: self.config.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let m: ModelManifest = checkpoint::read_json(&path)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::io(
                &path,
                format!(
                    "model format version {} (expected {MODEL_FORMAT_VERSION})",
                    m.format_version
                ),
            ));
        }
        let model = GraphDklModel {
            encoder: LipschitzEncoder::load(&dir.join("encoder"))?,
            heads: [SvgpHead::load(&dir.join("head0"))?, SvgpHead::load(&dir.join("head1"))?],
            config: m.config,
        };
        for (arm, head) in model.heads.iter().enumerate() {
            if head.inducing.cols() != model.encoder.output_dim() {
                return Err(Error::io(
                    dir.join(format!("head{arm}")),
                    "head input width does not match the encoder output",
                ));
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    config: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss before each epoch's update.
    pub train_loss: Vec<f64>,
    /// Validation loss after each epoch's update (empty without validation nodes).
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Resumable training loop.
pub struct Trainer {
    model: GraphDklModel,
    problem: Problem,
    adam: AdamState,
    epoch: usize,
    best: Option<(f64, GraphDklModel)>,
    since_best: usize,
    report: TrainReport,
}

#[derive(Serialize, Deserialize)]
struct TrainStateManifest {
    format_version: u32,
    epoch: usize,
    since_best: usize,
    best_val: Option<f64>,
    report: TrainReport,
    adam_t: u64,
    adam_m: Vec<ArrayEntry>,
    adam_v: Vec<ArrayEntry>,
}

impl Trainer {
    pub fn new(ds: &CausalDataset, split: &Split, cfg: &TrainConfig) -> Result<Self> {
        let model = GraphDklModel::init(ds, split, cfg)?;
        Ok(Self::from_model(model, ds, split))
    }

    fn from_model(model: GraphDklModel, ds: &CausalDataset, split: &Split) -> Self {
        let problem = model.problem(ds, split);
        let adam = AdamState::new(&model_params(&model, !model.config.freeze_encoder));
        Trainer {
            model,
            problem,
            adam,
            epoch: 0,
            best: None,
            since_best: 0,
            report: TrainReport::default(),
        }
    }

    pub fn model(&self) -> &GraphDklModel {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn is_finished(&self) -> bool {
        self.report.stopped_early || self.epoch >= self.model.config.epochs
    }

    /// Changes the epoch budget, e.g. to continue a resumed run further.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.model.config.epochs = epochs;
        if let Some((_, best)) = &mut self.best {
            best.config.epochs = epochs;
        }
    }

    fn trains_encoder(&self) -> bool {
        !self.model.config.freeze_encoder
    }

    fn loss_and_grad(&self) -> Result<(f64, ParamSet)> {
        let with_encoder = self.trains_encoder();
        let params = model_params(&self.model, with_encoder);
        let model = &self.model;
        let pr = &self.problem;
        value_and_grad(&params, |tape, bound| {
            let mut all = bound.clone();
            if !with_encoder {
                all.merge(encoder_constants(model, tape));
            }
            negative_elbo_on_tape(model, tape, &all, &pr.graph, &pr.x, &pr.train)
        })
    }

    fn validation_loss(&self) -> Result<Option<f64>> {
        if self.problem.val.iter().all(|a| a.nodes.is_empty()) {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let bound = Bindings::bind(&mut tape, &self.model.params(), false);
        let loss = negative_elbo_on_tape(
            &self.model,
            &mut tape,
            &bound,
            &self.problem.graph,
            &self.problem.x,
            &self.problem.val,
        )?;
        Ok(Some(tape.value(loss).item()))
    }

    /// One full-batch update. Returns `false` once training is finished.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        let epoch = self.epoch;
        let ctx = |e: Error| e.with_context(&format!("epoch {epoch}"));
        if self.model.config.spectral_norm && self.trains_encoder() {
            self.model.encoder.power_iterate(1);
        }
        let (loss, grads) = self.loss_and_grad().map_err(ctx)?;
        let with_encoder = self.trains_encoder();
        let mut params = model_params(&self.model, with_encoder);
        adam_step(&mut params, &grads, &mut self.adam, &self.model.config.adam)?;
        apply_params(&mut self.model, &params, with_encoder)?;
        self.report.train_loss.push(loss);
        self.epoch += 1;
        self.report.epochs_run = self.epoch;

        if let Some(val) = self.validation_loss().map_err(ctx)? {
            self.report.val_loss.push(val);
            let improved = self.best.as_ref().is_none_or(|(b, _)| val < *b);
            if improved {
                self.best = Some((val, self.model.clone()));
                self.report.best_epoch = Some(epoch);
                self.since_best = 0;
            } else {
                self.since_best += 1;
            }
            if let Some(p) = self.model.config.patience {
                if self.since_best >= p {
                    self.report.stopped_early = true;
                }
            }
        }
        Ok(!self.is_finished())
    }

    /// Runs until the epoch budget or early stopping ends training.
    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    /// Runs at most `n` more epochs.
    pub fn run_for(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if !self.step()? {
                break;
            }
        }
        Ok(())
    }

    /// Selected model: best validation snapshot when early stopping is on,
    /// last iterate otherwise; power iteration is then run to convergence.
    pub fn finish(self) -> (GraphDklModel, TrainReport) {
        let use_best = self.model.config.patience.is_some();
        let mut model = match self.best {
            Some((_, best)) if use_best => best,
            _ => self.model,
        };
        if self.epoch > 0 && model.config.spectral_norm && !model.config.freeze_encoder {
            model.encoder.power_iterate(STANDALONE_POWER_ITERS);
        }
        (model, self.report)
    }

    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join("current"))?;
        if let Some((_, best)) = &self.best {
            best.save(&dir.join("best"))?;
        }
        let manifest = TrainStateManifest {
            format_version: TRAIN_STATE_FORMAT_VERSION,
            epoch: self.epoch,
            since_best: self.since_best,
            best_val: self.best.as_ref().map(|(v, _)| *v),
            report: self.report.clone(),
            adam_t: self.adam.t,
            adam_m: checkpoint::write_arrays(&dir.join("adam_m"), &self.adam.m)?,
            adam_v: checkpoint::write_arrays(&dir.join("adam_v"), &self.adam.v)?,
        };
        checkpoint::write_json(&dir.join("state.json"), &manifest)
    }

    /// Restores a loop saved by [`Self::save_state`] on the same data and split.
    pub fn resume(dir: &Path, ds: &CausalDataset, split: &Split) -> Result<Self> {
        let path = dir.join("state.json");
        let m: TrainStateManifest = checkpoint::read_json(&path)?;
        if m.format_version != TRAIN_STATE_FORMAT_VERSION {
            return Err(Error::io(
                &path,
                format!("unsupported training state version {}", m.format_version),
            ));
        }
        let model = GraphDklModel::load(&dir.join("current"))?;
        let mut t = Trainer::from_model(model, ds, split);
        let adam = AdamState {
            m: checkpoint::read_arrays(&dir.join("adam_m"), &m.adam_m)?,
            v: checkpoint::read_arrays(&dir.join("adam_v"), &m.adam_v)?,
            t: m.adam_t,
        };
        if !adam.m.same_layout(&t.adam.m) || !adam.v.same_layout(&t.adam.v) {
            return Err(Error::io(&path, "optimizer state does not match the model"));
        }
        t.adam = adam;
        t.epoch = m.epoch;
        t.since_best = m.since_best;
        t.report = m.report;
        t.best = match m.best_val {
            Some(v) => Some((v, GraphDklModel::load(&dir.join("best"))?)),
            None => None,
        };
        Ok(t)
    }
}

/// Initializes and trains a model to completion.
pub fn train(ds: &CausalDataset, split: &Split, cfg: &TrainConfig) -> Result<(GraphDklModel, TrainReport)> {
    let mut trainer = Trainer::new(ds, split, cfg)?;
    trainer.run()?;
    Ok(trainer.finish())
}

pub fn write_predictions_csv(path: &Path, preds: &[ItePrediction]) -> Result<()> {
    let mut s = String::from("node,ite,uncertainty,mu0,mu1,var0,var1\n");
    for p in preds {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            p.node, p.ite, p.uncertainty, p.mu0, p.mu1, p.var0, p.var1
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::lipschitz_audit;
    use crate::synthgen::{generate, SynthConfig};

    fn small(n: usize, k: f64, seed: u64) -> (CausalDataset, Split) {
        let ds = generate(&SynthConfig {
            n,
            d: 4,
            c: 2,
            p_in: 0.3,
            p_out: 0.02,
            k,
            sigma_y: 0.3,
            seed,
        })
        .unwrap();
        let split = Split::random(n, seed).unwrap();
        (ds, split)
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            depth: 1,
            branch_depth: 1,
            width: 4,
            num_inducing: 6,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (ds, split) = small(30, 0.0, 1);
        let cfg = tiny_cfg(0);
        let (model, report) = train(&ds, &split, &cfg).unwrap();
        assert_eq!(model, GraphDklModel::init(&ds, &split, &cfg).unwrap());
        assert_eq!(report.epochs_run, 0);

        let a = tempfile::tempdir().unwrap();
        model.save(a.path()).unwrap();
        let back = GraphDklModel::load(a.path()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn training_lowers_loss() {
        let (ds, split) = small(20, 0.0, 2);
        let cfg = TrainConfig {
            patience: None,
            ..tiny_cfg(200)
        };
        let (_, report) = train(&ds, &split, &cfg).unwrap();
        assert_eq!(report.train_loss.len(), 200);
        assert!(report.train_loss[199] < report.train_loss[0]);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let (ds, split) = small(10, 0.0, 5);
        let cfg = TrainConfig {
            width: 3,
            num_inducing: 3,
            ..tiny_cfg(0)
        };
        let model = GraphDklModel::init(&ds, &split, &cfg).unwrap();
        let report = model.check_loss_gradient(&ds, &split.train, 1e-5, 1e-4, 1e-6).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        assert!(report.per_param.keys().any(|k| k.starts_with("enc.sage")));
    }

    #[test]
    fn prior_heads_predict_standardization_means() {
        let (ds, split) = small(40, 1.0, 7);
        let model = GraphDklModel::init(&ds, &split, &tiny_cfg(0)).unwrap();
        let preds = model.predict(&ds, &split.test).unwrap();
        let [h0, h1] = &model.heads;
        for p in &preds {
            assert!((p.ite - (h1.y_mean - h0.y_mean)).abs() < 1e-9);
            let want = h0.y_std.powi(2) * h0.kernel.variance() + h1.y_std.powi(2) * h1.kernel.variance();
            assert!((p.uncertainty - want).abs() < 1e-9 * want);
            assert!(p.uncertainty >= 0.0);
        }
    }

    #[test]
    fn out_of_range_query_is_data_error() {
        let (ds, split) = small(20, 0.0, 1);
        let model = GraphDklModel::init(&ds, &split, &tiny_cfg(0)).unwrap();
        assert!(matches!(model.predict(&ds, &[20]), Err(Error::Data(_))));
    }

    #[test]
    fn one_armed_split_is_data_error() {
        let (mut ds, split) = small(20, 0.0, 1);
        for t in ds.t.iter_mut() {
            *t = 1;
        }
        assert!(matches!(train(&ds, &split, &tiny_cfg(1)), Err(Error::Data(_))));
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_predictions() {
        let (ds, split) = small(40, 1.0, 4);
        let cfg = tiny_cfg(30);
        let (a, _) = train(&ds, &split, &cfg).unwrap();
        let (b, _) = train(&ds, &split, &cfg).unwrap();
        let pa = a.predict(&ds, &split.test).unwrap();
        let pb = b.predict(&ds, &split.test).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (ds, split) = small(40, 1.0, 8);
        let cfg = tiny_cfg(20);
        let mut full = Trainer::new(&ds, &split, &cfg).unwrap();
        full.run().unwrap();

        let mut first = Trainer::new(&ds, &split, &cfg).unwrap();
        first.run_for(9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        first.save_state(dir.path()).unwrap();
        let mut resumed = Trainer::resume(dir.path(), &ds, &split).unwrap();
        assert_eq!(resumed.epoch(), 9);
        resumed.run().unwrap();

        assert_eq!(resumed.report(), full.report());
        let (a, _) = full.finish();
        let (b, _) = resumed.finish();
        assert_eq!(a, b);
    }

    #[test]
    fn heads_only_see_their_own_arm() {
        let (ds, split) = small(40, 1.0, 9);
        let cfg = TrainConfig {
            freeze_encoder: true,
            patience: None,
            ..tiny_cfg(15)
        };
        let (a, _) = train(&ds, &split, &cfg).unwrap();
        let mut shuffled = ds.clone();
        let arm1: Vec<usize> = split.train.iter().copied().filter(|&i| ds.t[i] == 1).collect();
        for (k, &i) in arm1.iter().enumerate() {
            shuffled.y[i] = ds.y[arm1[(k + 1) % arm1.len()]];
        }
        let (b, _) = train(&shuffled, &split, &cfg).unwrap();
        assert_eq!(a.heads[0], b.heads[0]);
        assert_eq!(a.encoder, b.encoder);
    }

    #[test]
    fn saved_checkpoints_pass_lipschitz_audit() {
        // sweep-style generator settings (sparse SBM, 16-D features)
        let ds = generate(&SynthConfig {
            n: 300,
            k: 2.0,
            seed: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let split = Split::random(300, 10).unwrap();
        let cfg = TrainConfig {
            width: 8,
            num_inducing: 16,
            ..tiny_cfg(40)
        };
        let mut trainer = Trainer::new(&ds, &split, &cfg).unwrap();
        let g = Arc::new(ds.graph.clone());
        let mut nodes = split.train.clone();
        nodes.extend(&split.test);
        let x = ds.x.tensor().select_rows(&nodes);
        let dir = tempfile::tempdir().unwrap();
        for _ in 0..4 {
            trainer.run_for(10).unwrap();
            trainer.save_state(dir.path()).unwrap();
            let saved = GraphDklModel::load(&dir.path().join("current")).unwrap();
            let z = saved.encoder.encode(&g, ds.x.tensor()).unwrap();
            let z = [z[0].select_rows(&nodes), z[1].select_rows(&nodes)];
            let audit = crate::encoder::pairwise_ratio_audit(&x, &z, 1000, 0);
            assert!(audit.max_ratio <= 1.0 + 1e-3, "{}", audit.max_ratio);
        }
        let (model, _) = trainer.finish();
        let full = lipschitz_audit(&model.encoder, &g, ds.x.tensor(), 1000, 1).unwrap();
        assert!(full.max_ratio <= 1.0 + 1e-3, "{}", full.max_ratio);
    }

    #[test]
    fn version_mismatch_and_corrupt_array_are_io_errors() {
        let (ds, split) = small(20, 0.0, 1);
        let model = GraphDklModel::init(&ds, &split, &tiny_cfg(0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let mpath = dir.path().join("model.json");
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
        assert!(matches!(GraphDklModel::load(dir.path()), Err(Error::Io { .. })));

        model.save(dir.path()).unwrap();
        let head = dir.path().join("head0");
        let bin = fs::read_dir(&head)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|e| e == "bin"))
            .unwrap();
        fs::write(&bin, [1u8; 5]).unwrap();
        assert!(matches!(GraphDklModel::load(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn predictions_csv_has_header_and_rows() {
        let (ds, split) = small(20, 0.0, 1);
        let model = GraphDklModel::init(&ds, &split, &tiny_cfg(0)).unwrap();
        let preds = model.predict(&ds, &[0, 3, 5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_predictions_csv(&path, &preds).unwrap();
        let text = fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "node,ite,uncertainty,mu0,mu1,var0,var1");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("3,"));
    }
}
