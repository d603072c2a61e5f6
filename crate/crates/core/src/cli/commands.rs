use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::ExperimentConfig;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::estimator::{write_predictions_csv, GraphDklModel, ItePrediction, TrainReport, Trainer};
use crate::evalrej::{aggregate, evaluate_seed, write_curve_csv, EvalReport, Scored, SeedEvaluation};
use crate::par::{self, Exec};
use crate::synthgen::{generate, load_dataset, positivity_report, save_dataset, CausalDataset, Split};

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Wall-clock bookkeeping, kept out of every other output so reruns are
/// byte-identical elsewhere.
#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    version: &'a str,
    started_unix_s: f64,
    finished_unix_s: f64,
    elapsed_s: f64,
}

pub(crate) struct RunClock {
    command: &'static str,
    started: SystemTime,
    timer: Instant,
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunClock {
    pub(crate) fn start(command: &'static str) -> Self {
        RunClock {
            command,
            started: SystemTime::now(),
            timer: Instant::now(),
        }
    }

    pub(crate) fn write(&self, out: &Path) -> Result<()> {
        let meta = RunMeta {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            started_unix_s: unix_seconds(self.started),
            finished_unix_s: unix_seconds(SystemTime::now()),
            elapsed_s: self.timer.elapsed().as_secs_f64(),
        };
        checkpoint::write_json(&out.join("run_meta.json"), &meta)
    }
}

fn write_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    checkpoint::write_json(&out.join("config.json"), cfg)
}

fn config_echo(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config is plain data")
}

/// Generates a dataset from `cfg` (imbalance `cfg.k`) into `out`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<CausalDataset> {
    cfg.validate()?;
    let clock = RunClock::start("generate");
    let ds = generate(&cfg.synth_config(cfg.k, cfg.seed))?;
    ensure_dir(out)?;
    save_dataset(&ds, out)?;
    write_config(out, cfg)?;
    let pos = positivity_report(&ds.propensity, cfg.positivity_threshold);
    log::info!(
        "generated {} nodes, {} edges; {} positivity violations at {}",
        ds.num_nodes(),
        ds.graph.num_edges(),
        pos.violations(),
        pos.threshold
    );
    clock.write(out)?;
    Ok(ds)
}

/// `epoch,train_loss,val_loss`, one row per epoch run.
pub fn loss_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for (e, loss) in report.train_loss.iter().enumerate() {
        let val = report.val_loss.get(e).map(|v| format!("{v:?}")).unwrap_or_default();
        s.push_str(&format!("{e},{loss:?},{val}\n"));
    }
    s
}

fn check_split(split: &Split, ds: &CausalDataset) -> Result<()> {
    let n = ds.num_nodes();
    let total = split.train.len() + split.val.len() + split.test.len();
    if total != n || split.train.iter().chain(&split.val).chain(&split.test).any(|&i| i >= n) {
        return Err(Error::Data(format!("split does not partition the {n} dataset nodes")));
    }
    Ok(())
}

/// Outputs of one training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: GraphDklModel,
    pub report: TrainReport,
    pub split: Split,
}

/// Trains on the dataset in `data`, writing the selected model to
/// `out/model`, resumable state to `out/state` and the loss trace to
/// `out/loss.csv`. With `resume`, continues from `out/state` up to
/// `cfg.epochs`; every other training setting must match the saved run.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let clock = RunClock::start("train");
    let ds = load_dataset(data)?;
    let split = Split::random(ds.num_nodes(), cfg.seed)?;
    let train_cfg = cfg.train_config(cfg.seed);
    let state_dir = out.join("state");
    let mut trainer = if resume {
        let mut t = Trainer::resume(&state_dir, &ds, &split)?;
        let saved = t.model().config.clone();
        let mut wanted = train_cfg.clone();
        wanted.epochs = saved.epochs;
        if saved != wanted {
            return Err(Error::Config(
                "resume: training settings differ from the saved run (only epochs may change)".into(),
            ));
        }
        t.set_epochs(train_cfg.epochs);
        log::info!("resuming at epoch {}", t.epoch());
        t
    } else {
        Trainer::new(&ds, &split, &train_cfg)?
    };
    ensure_dir(out)?;
    while trainer.step()? {
        let e = trainer.epoch();
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 {
            trainer.save_state(&state_dir)?;
        }
        if e % 50 == 0 {
            log::info!("epoch {e}: loss {:.4}", trainer.report().train_loss[e - 1]);
        }
    }
    trainer.save_state(&state_dir)?;
    let (model, report) = trainer.finish();
    model.save(&out.join("model"))?;
    checkpoint::write_json(&out.join("split.json"), &split)?;
    checkpoint::write_json(&out.join("train_report.json"), &report)?;
    write_text(&out.join("loss.csv"), &loss_csv(&report))?;
    write_config(out, cfg)?;
    log::info!(
        "trained {} epochs (best {:?}, early stop {})",
        report.epochs_run,
        report.best_epoch,
        report.stopped_early
    );
    clock.write(out)?;
    Ok(TrainOutcome { model, report, split })
}

/// Predictions and both rejection curves of `model` on `nodes`.
pub fn evaluate_nodes(
    cfg: &ExperimentConfig,
    seed: u64,
    model: &GraphDklModel,
    ds: &CausalDataset,
    nodes: &[usize],
) -> Result<(Vec<ItePrediction>, SeedEvaluation)> {
    let preds = model.predict(ds, nodes)?;
    let scored: Vec<Scored> = preds.iter().map(Scored::from).collect();
    let truth: Vec<f64> = nodes.iter().map(|&i| ds.mu1[i] - ds.mu0[i]).collect();
    let pos = positivity_report(&ds.propensity, cfg.positivity_threshold);
    let ev = evaluate_seed(seed, &scored, &truth, &cfg.proportions, pos)?;
    Ok((preds, ev))
}

fn write_report_files(out: &Path, report: &EvalReport) -> Result<()> {
    write_curve_csv(&out.join("curve.csv"), &report.mean_curve)?;
    write_curve_csv(&out.join("random_curve.csv"), &report.random_mean_curve)?;
    checkpoint::write_json(&out.join("report.json"), report)
}

/// Scores the model trained into `checkpoint` (a `train` output directory)
/// on its test split of the dataset in `data`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint_dir: &Path, data: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let clock = RunClock::start("evaluate");
    let ds = load_dataset(data)?;
    let model = GraphDklModel::load(&checkpoint_dir.join("model"))?;
    let split: Split = checkpoint::read_json(&checkpoint_dir.join("split.json"))?;
    check_split(&split, &ds)?;
    let (preds, ev) = evaluate_nodes(cfg, cfg.seed, &model, &ds, &split.test)?;
    log::info!("test sqrt(PEHE) {:.4} on {} nodes", ev.full_pehe, split.test.len());
    let report = aggregate(config_echo(cfg), vec![ev])?;
    ensure_dir(out)?;
    write_predictions_csv(&out.join("predictions.csv"), &preds)?;
    write_report_files(out, &report)?;
    write_config(out, cfg)?;
    clock.write(out)?;
    Ok(report)
}

/// One replication: generate with `(k, seed)`, split, train, evaluate.
pub struct SeedRun {
    pub model: GraphDklModel,
    pub evaluation: SeedEvaluation,
    pub report: TrainReport,
    pub predictions: Vec<ItePrediction>,
}

pub fn run_seed(cfg: &ExperimentConfig, k: f64, seed: u64) -> Result<SeedRun> {
    let ds = generate(&cfg.synth_config(k, seed))?;
    let split = Split::random(ds.num_nodes(), seed)?;
    let mut trainer = Trainer::new(&ds, &split, &cfg.train_config(seed))?;
    trainer.run()?;
    let (model, report) = trainer.finish();
    let (predictions, evaluation) = evaluate_nodes(cfg, seed, &model, &ds, &split.test)?;
    log::info!("k={k} seed={seed}: sqrt(PEHE) {:.4}", evaluation.full_pehe);
    Ok(SeedRun {
        model,
        evaluation,
        report,
        predictions,
    })
}

/// All seeds of one setting, run in parallel worker slots.
pub fn run_setting(cfg: &ExperimentConfig, k: f64) -> Result<(EvalReport, Vec<SeedRun>)> {
    cfg.validate()?;
    let runs: Vec<Result<SeedRun>> =
        par::map_indices(Exec::default(), cfg.n_seeds, |i| run_seed(cfg, k, cfg.seed + i as u64));
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut echo = config_echo(cfg);
    echo["k"] = serde_json::json!(k);
    let report = aggregate(echo, runs.iter().map(|r| r.evaluation.clone()).collect())?;
    Ok((report, runs))
}

fn setting_dir(out: &Path, k: f64) -> PathBuf {
    out.join(format!("k_{k}"))
}

/// Wide table: one row per setting, one column per rejection proportion.
pub fn table_csv(settings: &[(f64, EvalReport)], std: bool) -> String {
    let mut s = String::from("k");
    if let Some((_, r)) = settings.first() {
        for p in &r.mean_curve.proportions {
            s.push_str(&format!(",{p:?}"));
        }
    }
    s.push('\n');
    for (k, r) in settings {
        s.push_str(&format!("{k:?}"));
        let vals = if std {
            &r.mean_curve.std
        } else {
            &r.mean_curve.retained_pehe
        };
        for v in vals {
            s.push_str(&format!(",{v:?}"));
        }
        s.push('\n');
    }
    s
}

/// Every `k` in `cfg.k_grid` over `cfg.n_seeds` seeds. Per-seed traces go to
/// `out/k_<k>/seed_<s>/`, aggregates to `out/k_<k>/` and the mean and std
/// tables to `out/table.csv` and `out/table_std.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(f64, EvalReport)>> {
    cfg.validate()?;
    let clock = RunClock::start("sweep");
    ensure_dir(out)?;
    let mut settings = Vec::with_capacity(cfg.k_grid.len());
    for &k in &cfg.k_grid {
        let (report, runs) = run_setting(cfg, k)?;
        let dir = setting_dir(out, k);
        for run in &runs {
            let seed_dir = dir.join(format!("seed_{}", run.evaluation.seed));
            ensure_dir(&seed_dir)?;
            write_text(&seed_dir.join("loss.csv"), &loss_csv(&run.report))?;
            write_predictions_csv(&seed_dir.join("predictions.csv"), &run.predictions)?;
        }
        write_report_files(&dir, &report)?;
        log::info!(
            "k={k}: mean sqrt(PEHE) {:.4} (std {:.4}) over {} seeds",
            report.full_pehe_mean,
            report.full_pehe_std,
            cfg.n_seeds
        );
        settings.push((k, report));
    }
    write_text(&out.join("table.csv"), &table_csv(&settings, false))?;
    write_text(&out.join("table_std.csv"), &table_csv(&settings, true))?;
    write_config(out, cfg)?;
    clock.write(out)?;
    Ok(settings)
}
