//! InfoNCE-trained linear encoders on the vMF half-sphere views, scored by
//! held-out excess loss over the oracle score.

use std::path::PathBuf;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::ResultRow;
use super::train::{train_encoder, BatchMode, TrainOptions};
use super::{config_error, require_grid, require_positive, require_real};
use crate::augmentation::{stream_rng, Scenario, VmfHalves};
use crate::contrastive_losses::{loss_from_scores, LinkFunction, LossKind, PairBatchSet};
use crate::downstream::Estimate;
use crate::encoder_nn::{Encoder, LinearEncoder};
use crate::error::Result;

const TAG: &str = "vmf";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    #[default]
    Random,
    Coordinate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmfConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "d_d")]
    pub d: usize,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub basis: Basis,
    /// Operator-norm bound `B_W`.
    #[serde(default = "d_bound")]
    pub bound_w: f64,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "d_reps")]
    pub repetitions: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// Held-out batches of `K` pairs.
    #[serde(default = "d_eval")]
    pub eval_batches: usize,
}

fn d_d() -> usize {
    20
}
fn d_sigma() -> f64 {
    2.0
}
fn d_bound() -> f64 {
    1.0
}
fn d_k() -> usize {
    16
}
fn d_n_grid() -> Vec<usize> {
    vec![1000, 3000, 10_000]
}
fn d_reps() -> usize {
    3
}
fn d_epochs() -> usize {
    300
}
fn d_lr() -> f64 {
    0.02
}
fn d_eval() -> usize {
    4000
}

impl VmfConfig {
    pub fn new(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults parse")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("repetitions", self.repetitions),
            ("eval_batches", self.eval_batches),
        ] {
            require_positive(name, v)?;
        }
        if self.d < 2 || self.d % 2 != 0 {
            return config_error("d must be even and at least 2");
        }
        if self.k < 2 {
            return config_error("InfoNCE needs K >= 2");
        }
        require_grid("n_grid", &self.n_grid)?;
        if self.n_grid.iter().any(|&n| n < self.k) {
            return config_error("every n must be at least K");
        }
        require_real("sigma", self.sigma, true)?;
        require_real("bound_w", self.bound_w, true)?;
        require_real("lr", self.lr, true)
    }

    pub fn scenario(&self, rep: u64) -> Result<VmfHalves> {
        match self.basis {
            Basis::Random => VmfHalves::random(&mut stream_rng(self.seed, TAG, rep, "basis"), self.d, self.sigma),
            Basis::Coordinate => VmfHalves::coordinate(self.d, self.sigma),
        }
    }
}

fn batch_loss<F>(pairs: &PairBatchSet<f64>, b: usize, score: &F) -> Result<f64>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> Result<f64> + Sync,
{
    let batch = &pairs.batches()[b];
    let k = pairs.k();
    let mut m = Array2::zeros((k, k));
    for j in 0..k {
        for l in 0..k {
            m[[j, l]] = score(batch.z1.row(j), batch.z2.row(l))?;
        }
    }
    loss_from_scores(LossKind::InfoNce, &[m])
}

/// Mean over held-out batches of `R_K(S_f) - R_K(S*)`, with the standard
/// error of the per-batch differences.
pub fn excess_proxy<E: Encoder<f64> + ?Sized>(
    sc: &Scenario,
    enc: &E,
    kappa: f64,
    held_out: &PairBatchSet<f64>,
) -> Result<Estimate> {
    let learned = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> Result<f64> {
        let (fa, fb) = (enc.forward(a)?, enc.forward(b)?);
        Ok(kappa * fa.dot(&fb))
    };
    let oracle = |a: ArrayView1<f64>, b: ArrayView1<f64>| sc.oracle_log_density_ratio(a, b);
    let diffs: Vec<f64> = (0..held_out.n_batches())
        .into_par_iter()
        .map(|b| Ok(batch_loss(held_out, b, &learned)? - batch_loss(held_out, b, &oracle)?))
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&diffs))
}

pub fn run_vmf(cfg: &VmfConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let rows: Vec<Vec<ResultRow>> = (0..cfg.repetitions as u64)
        .into_par_iter()
        .map(|rep| run_repetition(cfg, rep))
        .collect::<Result<_>>()?;
    super::report::finalize(rows.into_iter().flatten().collect())
}

fn run_repetition(cfg: &VmfConfig, rep: u64) -> Result<Vec<ResultRow>> {
    let vmf = cfg.scenario(rep)?;
    let (d, p, kappa) = (vmf.d, vmf.p, vmf.kappa);
    let oracle_w = vmf.u1().t().to_owned();
    let sc = Scenario::VmfHalves(vmf);
    let held_out = sc.sample_pairs::<f64, _>(cfg.eval_batches, cfg.k, &mut stream_rng(cfg.seed, TAG, rep, "eval"))?;
    let link = LinkFunction::Scale(kappa);
    let row = |method: &str, param: usize, est: Estimate| {
        ResultRow::new(TAG, method, param as u64, rep, cfg.seed, "excess_proxy", est.value).with_stderr(est.stderr)
    };

    let oracle = LinearEncoder::new(oracle_w, Some(cfg.bound_w))?;
    let init = LinearEncoder::random(&mut stream_rng(cfg.seed, TAG, rep, "init"), d, p, Some(cfg.bound_w))?;
    let mut rows = vec![
        row("oracle_w", 0, excess_proxy(&sc, &oracle, kappa, &held_out)?),
        row("random_w", 0, excess_proxy(&sc, &init, kappa, &held_out)?),
    ];
    for &n in &cfg.n_grid {
        let pairs = sc.sample_pairs::<f64, _>(n / cfg.k, cfg.k, &mut stream_rng(cfg.seed, TAG, rep, &format!("pairs-{n}")))?;
        let mut enc = init.clone();
        let opts = TrainOptions {
            epochs: cfg.epochs,
            lr: cfg.lr,
            mode: BatchMode::Full,
            batch: None,
            dump: cfg.out_dir.as_ref().map(|o| o.join(format!("vmf_rep{rep}_n{n}_last.json"))),
        };
        let mut shuffle = stream_rng(cfg.seed, TAG, rep, &format!("shuffle-{n}"));
        train_encoder(&mut enc, &pairs, LossKind::InfoNce, link, &opts, &mut shuffle)?;
        rows.push(row("trained", n, excess_proxy(&sc, &enc, kappa, &held_out)?));
    }
    Ok(rows)
}
