//! Feature-collapse toy: four 2-D Gaussian classes on a graph where the
//! held-out class is wired into class 0's neighborhood. A one-layer graph
//! encoder plus softmax classifier is trained on classes 0-2 with and without
//! spectral normalization, and the 2-D latents of every node are exported.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::commands::{ensure_dir, RunClock};
use crate::checkpoint;
use crate::diffnum::{adam_step, value_and_grad, AdamConfig, AdamState, ParamSet, Tensor};
use crate::encoder::{pairwise_ratio_audit, EncoderConfig, LipschitzAudit, LipschitzEncoder, STANDALONE_POWER_ITERS};
use crate::error::{Error, Result};
use crate::graph::Graph;

pub const CLASS_CENTERS: [[f64; 2]; 4] = [[-2.0, 0.0], [0.0, 2.0], [2.0, 0.0], [0.0, -2.0]];
pub const NODES_PER_CLASS: usize = 50;
pub const CLASS_SPREAD: f64 = 0.35;
pub const P_INTRA: f64 = 0.1;
/// Edges from every class-3 node into class 0.
pub const CROSS_EDGES: usize = 3;
pub const HELD_OUT_CLASS: usize = 3;
pub const DEMO_EPOCHS: usize = 300;
pub const DEMO_LR: f64 = 0.05;
pub const AUDIT_PAIRS: usize = 1000;

pub struct CollapseToy {
    pub graph: Arc<Graph>,
    pub x: Tensor,
    pub classes: Vec<usize>,
}

pub fn collapse_toy(seed: u64) -> Result<CollapseToy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = CLASS_CENTERS.len() * NODES_PER_CLASS;
    let classes: Vec<usize> = (0..n).map(|i| i / NODES_PER_CLASS).collect();
    let mut x = Tensor::zeros(n, 2);
    for (i, &c) in classes.iter().enumerate() {
        for (d, &center) in CLASS_CENTERS[c].iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            x.set(i, d, center + CLASS_SPREAD * noise);
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if classes[i] == classes[j] && rng.random::<f64>() < P_INTRA {
                edges.push((i, j));
            }
        }
    }
    let class0: Vec<usize> = (0..n).filter(|&i| classes[i] == 0).collect();
    for i in (0..n).filter(|&i| classes[i] == HELD_OUT_CLASS) {
        for &j in class0.choose_multiple(&mut rng, CROSS_EDGES) {
            edges.push((i, j));
        }
    }
    Ok(CollapseToy {
        graph: Arc::new(Graph::from_edges(n, &edges)?),
        x,
        classes,
    })
}

/// Trained encoder of one variant together with its training summary.
pub struct DemoVariant {
    pub encoder: LipschitzEncoder,
    pub latents: Tensor,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

fn classifier_loss(
    enc: &LipschitzEncoder,
    toy: &CollapseToy,
    train: &Arc<[usize]>,
    onehot: &Tensor,
    params: &ParamSet,
) -> Result<(f64, ParamSet)> {
    value_and_grad(params, |tape, bound| {
        let x = tape.constant(toy.x.clone());
        let z = enc.sage_on_tape(tape, bound, "", &toy.graph, x)?;
        let zt = tape.gather_rows(z, train)?;
        let lin = tape.matmul(zt, bound.var("clf.w"))?;
        let logits = tape.add_row(lin, bound.var("clf.b"))?;
        let e = tape.exp(logits);
        let norm = tape.row_sum(e);
        let lse = tape.log(norm);
        let target = tape.constant(onehot.clone());
        let picked = tape.mul(logits, target)?;
        let picked = tape.row_sum(picked);
        let nll = tape.sub(lse, picked)?;
        Ok(tape.mean(nll))
    })
}

pub fn train_variant(toy: &CollapseToy, spectral_norm: bool, seed: u64) -> Result<DemoVariant> {
    let cfg = EncoderConfig {
        input_dim: 2,
        sage_widths: vec![2],
        branch_widths: vec![2],
        spectral_norm,
    };
    let mut enc = LipschitzEncoder::new(&cfg, seed)?;
    let n_train_classes = HELD_OUT_CLASS;
    let train: Vec<usize> = (0..toy.classes.len())
        .filter(|&i| toy.classes[i] != HELD_OUT_CLASS)
        .collect();
    let mut onehot = Tensor::zeros(train.len(), n_train_classes);
    for (r, &i) in train.iter().enumerate() {
        onehot.set(r, toy.classes[i], 1.0);
    }
    let train: Arc<[usize]> = train.into();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = ParamSet::new();
    for (name, t) in enc.params().iter().filter(|(name, _)| name.starts_with("sage.")) {
        params.insert(name, t.clone())?;
    }
    let w: Vec<f64> = (0..2 * n_train_classes)
        .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    params.insert("clf.w", Tensor::from_rows(2, n_train_classes, w)?)?;
    params.insert("clf.b", Tensor::zeros(1, n_train_classes))?;

    let adam_cfg = AdamConfig {
        lr: DEMO_LR,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&params);
    let mut final_loss = f64::NAN;
    for epoch in 0..DEMO_EPOCHS {
        if spectral_norm {
            enc.power_iterate(1);
        }
        let (loss, grads) = classifier_loss(&enc, toy, &train, &onehot, &params)
            .map_err(|e| e.with_context(&format!("demo epoch {epoch}")))?;
        final_loss = loss;
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        let mut full = enc.params();
        for (name, t) in params.iter().filter(|(name, _)| name.starts_with("sage.")) {
            *full.get_mut(name).expect("sage parameter") = t.clone();
        }
        enc.set_params(&full)?;
    }
    if spectral_norm {
        enc.power_iterate(STANDALONE_POWER_ITERS);
    }

    let latents = enc.sage_forward(&toy.graph, &toy.x)?;
    let w = params.get("clf.w").expect("classifier weight");
    let b = params.get("clf.b").expect("classifier bias");
    let correct = train
        .iter()
        .filter(|&&i| {
            let score = |c: usize| b.get(0, c) + latents.get(i, 0) * w.get(0, c) + latents.get(i, 1) * w.get(1, c);
            let best = (0..n_train_classes)
                .max_by(|&a, &c| score(a).total_cmp(&score(c)))
                .expect("classes");
            best == toy.classes[i]
        })
        .count();
    Ok(DemoVariant {
        encoder: enc,
        latents,
        final_loss,
        train_accuracy: correct as f64 / train.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub spectral_norm: bool,
    pub audit: LipschitzAudit,
    pub effective_spectral_norm: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub seed: u64,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub held_out_class: usize,
    pub audit_pairs: usize,
    pub with_spectral_norm: VariantSummary,
    pub without_spectral_norm: VariantSummary,
}

/// `node,class,z1,z2`.
pub fn latent_csv(latents: &Tensor, classes: &[usize]) -> String {
    let mut s = String::from("node,class,z1,z2\n");
    for (i, c) in classes.iter().enumerate() {
        writeln!(s, "{i},{c},{:?},{:?}", latents.get(i, 0), latents.get(i, 1)).expect("string write");
    }
    s
}

fn summarize(v: &DemoVariant, toy: &CollapseToy, spectral_norm: bool, seed: u64) -> VariantSummary {
    let audit = pairwise_ratio_audit(&toy.x, &[v.latents.clone(), v.latents.clone()], AUDIT_PAIRS, seed);
    VariantSummary {
        spectral_norm,
        audit,
        effective_spectral_norm: v.encoder.effective_spectral_norms()[0],
        final_loss: v.final_loss,
        train_accuracy: v.train_accuracy,
    }
}

/// Writes `latent_sn.csv`, `latent_nosn.csv` and `audit.json` into `out`.
pub fn cmd_demo_collapse(seed: u64, out: &Path) -> Result<DemoReport> {
    let clock = RunClock::start("demo-collapse");
    let toy = collapse_toy(seed)?;
    let sn = train_variant(&toy, true, seed)?;
    let plain = train_variant(&toy, false, seed)?;
    let report = DemoReport {
        seed,
        n_nodes: toy.classes.len(),
        n_edges: toy.graph.num_edges(),
        held_out_class: HELD_OUT_CLASS,
        audit_pairs: AUDIT_PAIRS,
        with_spectral_norm: summarize(&sn, &toy, true, seed),
        without_spectral_norm: summarize(&plain, &toy, false, seed),
    };
    ensure_dir(out)?;
    for (name, v) in [("latent_sn.csv", &sn), ("latent_nosn.csv", &plain)] {
        let path = out.join(name);
        std::fs::write(&path, latent_csv(&v.latents, &toy.classes)).map_err(|e| Error::io(&path, e))?;
    }
    checkpoint::write_json(&out.join("audit.json"), &report)?;
    log::info!(
        "collapse demo: audit max ratio {:.4} with spectral norm, {:.4} without",
        report.with_spectral_norm.audit.max_ratio,
        report.without_spectral_norm.audit.max_ratio
    );
    clock.write(out)?;
    Ok(report)
}
