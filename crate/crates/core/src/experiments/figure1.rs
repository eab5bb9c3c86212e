//! Downstream excess risk of linear heads on KL- and χ²-pretrained MLP
//! features versus linear regression on the raw input.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::ResultRow;
use super::train::{train_encoder_from, BatchMode, PairSource, TrainOptions};
use super::{config_error, require_grid, require_positive, require_real};
use crate::augmentation::{stream_rng, Labeled, NoisySubspace, Scenario};
use crate::contrastive_losses::{LinkFunction, LossKind};
use crate::downstream::{regression_excess_risk, LinearHead, RiskMode};
use crate::encoder_nn::{Encoder, IdentityEncoder, MlpEncoder};
use crate::error::Result;

const TAG: &str = "figure1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Figure1Config {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub d: usize,
    pub s: usize,
    pub sigma1: f64,
    pub sigma: f64,
    /// Raw pretraining samples; their views are redrawn every epoch.
    pub n: usize,
    pub k: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub m_grid: Vec<usize>,
    pub repetitions: usize,
    pub eval_size: usize,
    /// Truncation level of the linear heads.
    pub head_bound: f64,
    pub intercept: bool,
}

impl Default for Figure1Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            d: 100,
            s: 10,
            sigma1: 0.1,
            sigma: 1.0,
            n: 500,
            k: 64,
            hidden: 64,
            lr: 0.001,
            epochs: 1000,
            m_grid: vec![150, 500, 5000],
            repetitions: 10,
            eval_size: 100_000,
            head_bound: 10.0,
            intercept: false,
        }
    }
}

impl Figure1Config {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("s", self.s),
            ("n", self.n),
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("repetitions", self.repetitions),
            ("eval_size", self.eval_size),
        ] {
            require_positive(name, v)?;
        }
        if self.s >= self.d {
            return config_error("need s < d");
        }
        if self.k < 2 || self.k > self.n {
            return config_error("need 2 <= K <= n");
        }
        require_grid("m_grid", &self.m_grid)?;
        require_real("sigma1", self.sigma1, false)?;
        require_real("sigma", self.sigma, false)?;
        require_real("lr", self.lr, true)?;
        require_real("head_bound", self.head_bound, true)
    }
}

pub const METHODS: [&str; 3] = ["kl", "chisq", "direct_lr"];

fn pretrain(cfg: &Figure1Config, sc: &Scenario, kind: LossKind) -> Result<MlpEncoder<f64>> {
    let raw = sc.sample_raw(cfg.n, &mut stream_rng(cfg.seed, TAG, 0, "raw"))?;
    let mut rng = stream_rng(cfg.seed, TAG, 0, &format!("init-{}", kind.token()));
    let mut enc = MlpEncoder::random(&mut rng, cfg.d, cfg.hidden, cfg.s);
    let opts = TrainOptions {
        epochs: cfg.epochs,
        lr: cfg.lr,
        mode: BatchMode::Minibatch,
        batch: Some(cfg.k),
        dump: cfg
            .out_dir
            .as_ref()
            .map(|d| d.join(format!("figure1_{}_last.json", kind.token()))),
    };
    let mut rng = stream_rng(cfg.seed, TAG, 0, &format!("shuffle-{}", kind.token()));
    let source = PairSource::Reaugmented { scenario: sc, raw: raw.view(), k: cfg.k };
    train_encoder_from(&mut enc, source, kind, LinkFunction::Identity, &opts, &mut rng)?;
    Ok(enc)
}

/// Trains both encoders once, then for every `(m, rep)` fits the three heads
/// on a shared downstream sample and scores them on a shared evaluation stream.
pub fn run_figure1(cfg: &Figure1Config) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let sc = Scenario::NoisySubspace(NoisySubspace::new(cfg.d, cfg.s, cfg.sigma1, cfg.sigma)?);
    let (kl, chisq) = rayon::join(
        || pretrain(cfg, &sc, LossKind::InfoNce),
        || pretrain(cfg, &sc, LossKind::ChiSq),
    );
    let (kl, chisq) = (kl?, chisq?);
    let raw = IdentityEncoder { dim: cfg.d };
    let encoders: [&dyn Encoder<f64>; 3] = [&kl, &chisq, &raw];

    let cells: Vec<(usize, usize)> = cfg
        .m_grid
        .iter()
        .flat_map(|&m| (0..cfg.repetitions).map(move |r| (m, r)))
        .collect();
    let rows: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(m, rep)| {
            let mut rng = stream_rng(cfg.seed, TAG, rep as u64, &format!("downstream-{m}"));
            let Labeled::Regression { x, y } = sc.sample_downstream(m, &mut rng)? else {
                unreachable!("regression scenario")
            };
            let mut out = Vec::with_capacity(METHODS.len());
            for (method, enc) in METHODS.iter().zip(encoders) {
                let feats = enc.forward_batch(x.view())?;
                let head = LinearHead::fit(feats.view(), y.view(), cfg.intercept, cfg.head_bound)?;
                let mut eval = stream_rng(cfg.seed, TAG, rep as u64, &format!("eval-{m}"));
                let est = regression_excess_risk(&sc, enc, &head, cfg.eval_size, RiskMode::Raw, &mut eval)?;
                out.push(
                    ResultRow::new(TAG, method, m as u64, rep as u64, cfg.seed, "excess_risk", est.value)
                        .with_stderr(est.stderr),
                );
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    super::report::finalize(rows.into_iter().flatten().collect())
}
