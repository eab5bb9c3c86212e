//! χ²-pretrained topic encoders: score sufficiency, statistic sufficiency and
//! downstream topic classification, all computed by enumeration.

use std::path::PathBuf;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::report::ResultRow;
use super::train::{train_encoder, BatchMode, TrainOptions};
use super::{config_error, require_grid, require_positive, require_real};
use crate::augmentation::{build_topic_model, stream_rng, topic_joint_exact, Labeled, Scenario, TopicModel};
use crate::contrastive_losses::{LinkFunction, LossKind};
use crate::discrete_prob::{score_sufficiency, suff_ils, DiscreteJoint, ScoreTable};
use crate::downstream::{
    augmentation_error_classification, bayes_head, classification_risk_kl, fit_classifier,
    word_features, ClassifierOptions,
};
use crate::encoder_nn::{AugLinearEncoder, Encoder};
use crate::error::Result;
use crate::fdivergence::FGenerator;

const TAG: &str = "topic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "d_topics")]
    pub n_topics: usize,
    #[serde(default = "d_words")]
    pub n_words: usize,
    /// Log-floor `B` of the generated models, `P(y | s) >= exp(-B)`.
    #[serde(default = "d_floor")]
    pub floor_b: f64,
    /// Column-norm bound `B_W`; defaults to `M`.
    #[serde(default)]
    pub bound_w: Option<f64>,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "d_m_grid")]
    pub m_grid: Vec<usize>,
    #[serde(default = "d_reps")]
    pub repetitions: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_head_steps")]
    pub head_steps: usize,
    #[serde(default = "d_head_lr")]
    pub head_lr: f64,
    /// `B_Gamma`.
    #[serde(default = "d_head_bound")]
    pub head_bound: f64,
}

fn d_topics() -> usize {
    3
}
fn d_words() -> usize {
    12
}
fn d_floor() -> f64 {
    4.0
}
fn d_k() -> usize {
    8
}
fn d_n_grid() -> Vec<usize> {
    vec![500, 1000, 2000, 4000]
}
fn d_m_grid() -> Vec<usize> {
    vec![1000, 10_000]
}
fn d_reps() -> usize {
    3
}
fn d_epochs() -> usize {
    400
}
fn d_lr() -> f64 {
    0.05
}
fn d_head_steps() -> usize {
    2000
}
fn d_head_lr() -> f64 {
    0.05
}
fn d_head_bound() -> f64 {
    10.0
}

impl TopicConfig {
    pub fn new(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults parse")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_topics", self.n_topics),
            ("epochs", self.epochs),
            ("repetitions", self.repetitions),
            ("head_steps", self.head_steps),
        ] {
            require_positive(name, v)?;
        }
        if self.n_words < 4 * self.n_topics {
            return config_error("need n_words >= 4 n_topics");
        }
        if self.k < LossKind::ChiSq.min_batch() {
            return config_error("chi2 training needs K >= 3");
        }
        require_grid("n_grid", &self.n_grid)?;
        require_grid("m_grid", &self.m_grid)?;
        if self.n_grid.iter().any(|&n| n < self.k) {
            return config_error("every n must be at least K");
        }
        if !(self.floor_b >= (self.n_topics as f64).ln()) || !self.floor_b.is_finite() {
            return config_error("floor_b must be finite and at least ln M");
        }
        if let Some(b) = self.bound_w {
            require_real("bound_w", b, true)?;
        }
        require_real("lr", self.lr, true)?;
        require_real("head_lr", self.head_lr, true)?;
        require_real("head_bound", self.head_bound, true)
    }

    fn bound_w(&self) -> f64 {
        self.bound_w.unwrap_or(self.n_topics as f64)
    }
}

/// Encoder with `W* = E*/sqrt(2)` and scale `sqrt(S/2)`, whose inner products
/// are the view density ratio.
pub fn gold_encoder(t: &TopicModel, bound: Option<f64>) -> Result<AugLinearEncoder<f64>> {
    let w = t.gold_representation() / 2f64.sqrt();
    AugLinearEncoder::new(w, (t.n_words() as f64 / 2.0).sqrt(), bound)
}

/// `S(a, b) = <f(a), f(b)>` over all word pairs.
pub fn score_table(features: ArrayView2<f64>) -> Result<ScoreTable<f64>> {
    ScoreTable::new(features.dot(&features.t()))
}

/// `R_chi2(S_f) - inf R_chi2` on the exact view joint.
pub fn score_sufficiency_proxy(joint: &DiscreteJoint<f64>, features: ArrayView2<f64>) -> Result<f64> {
    Ok(score_sufficiency(joint, &score_table(features)?, FGenerator::ChiSquared)?.value())
}

/// Quantities of the classification bound for the Bayes head on given features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundInstance {
    pub risk: f64,
    pub suff_kl: f64,
    pub aug_error: f64,
    pub log_floor: f64,
}

impl BoundInstance {
    /// `c (B sqrt(Suff_kl) + eps_cls)`.
    pub fn rhs(&self, c: f64) -> f64 {
        c * (self.log_floor * self.suff_kl.max(0.0).sqrt() + self.aug_error)
    }
}

pub fn bound_instance(t: &TopicModel, joint: &DiscreteJoint<f64>, features: ArrayView2<f64>) -> Result<BoundInstance> {
    let head = bayes_head(t, features)?;
    Ok(BoundInstance {
        risk: classification_risk_kl(t, features, &head)?,
        suff_kl: suff_ils(joint, head.statistic(), FGenerator::Kl)?,
        aug_error: augmentation_error_classification(t)?,
        log_floor: t.achieved_b,
    })
}

/// Downstream features for each labeled pair: both dropout views, each the
/// `W z` block of the encoder output.
fn head_data(features: ArrayView2<f64>, n_topics: usize, words: &[(usize, usize)], labels: &[usize]) -> (Array2<f64>, Vec<usize>) {
    let block = features.slice(s![.., ..n_topics]);
    let mut x = Array2::zeros((2 * words.len(), n_topics));
    let mut y = Vec::with_capacity(2 * words.len());
    for (i, (&(a, b), &label)) in words.iter().zip(labels).enumerate() {
        x.row_mut(2 * i).assign(&block.row(a));
        x.row_mut(2 * i + 1).assign(&block.row(b));
        y.extend([label, label]);
    }
    (x, y)
}

/// KL classification risk of a head fit on `m` labeled pairs through `W z`.
pub fn downstream_risk<R: Rng>(
    t: &TopicModel,
    features: ArrayView2<f64>,
    m: usize,
    opts: ClassifierOptions,
    rng: &mut R,
) -> Result<f64> {
    let sc = Scenario::TopicModel(t.clone());
    let Labeled::Topic { words, labels } = sc.sample_downstream(m, rng)? else {
        unreachable!("topic scenario")
    };
    let (x, y) = head_data(features, t.n_topics(), &words, &labels);
    let head = fit_classifier(x.view(), &y, t.n_topics(), opts)?;
    let block = features.slice(s![.., ..t.n_topics()]).to_owned();
    classification_risk_kl(t, block.view(), &head)
}

pub fn run_topic(cfg: &TopicConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let (m, s) = (cfg.n_topics, cfg.n_words);
    let bound = Some(cfg.bound_w());
    let work: Vec<Vec<ResultRow>> = {
        use rayon::prelude::*;
        (0..cfg.repetitions)
            .into_par_iter()
            .map(|rep| run_repetition(cfg, rep as u64, m, s, bound))
            .collect::<Result<_>>()?
    };
    super::report::finalize(work.into_iter().flatten().collect())
}

fn run_repetition(cfg: &TopicConfig, rep: u64, m: usize, s: usize, bound: Option<f64>) -> Result<Vec<ResultRow>> {
    let row = |method: &str, param: usize, metric: &str, value: f64| {
        ResultRow::new(TAG, method, param as u64, rep, cfg.seed, metric, value)
    };
    let topic = build_topic_model(m, s, cfg.floor_b, &mut stream_rng(cfg.seed, TAG, rep, "model"))?;
    let joint = topic_joint_exact(&topic)?;
    let sc = Scenario::TopicModel(topic.clone());
    let head_opts = ClassifierOptions {
        floor: topic.achieved_b,
        bound: cfg.head_bound,
        steps: cfg.head_steps,
        lr: cfg.head_lr,
    };
    let mut rows = vec![row("model", 0, "aug_error_cls", augmentation_error_classification(&topic)?)];

    let gold = gold_encoder(&topic, bound)?;
    let gold_feats = word_features(&gold, s)?;
    rows.push(row("gold", 0, "score_suff_proxy", score_sufficiency_proxy(&joint, gold_feats.view())?));
    let b = bound_instance(&topic, &joint, gold_feats.view())?;
    rows.push(row("gold", 0, "bayes_risk_kl", b.risk));
    rows.push(row("gold", 0, "bound_rhs", b.rhs(8.0)));
    for &md in &cfg.m_grid {
        let mut rng = stream_rng(cfg.seed, TAG, rep, &format!("downstream-{md}"));
        let r = downstream_risk(&topic, gold_feats.view(), md, head_opts, &mut rng)?;
        rows.push(row("gold", md, "cls_risk_kl", r));
    }

    for &n in &cfg.n_grid {
        let pairs = sc.sample_pairs::<f64, _>(n / cfg.k, cfg.k, &mut stream_rng(cfg.seed, TAG, rep, &format!("pairs-{n}")))?;
        let mut enc = AugLinearEncoder::random(&mut stream_rng(cfg.seed, TAG, rep, "init"), m, s, bound)?;
        let opts = TrainOptions {
            epochs: cfg.epochs,
            lr: cfg.lr,
            mode: BatchMode::Full,
            batch: None,
            dump: cfg
                .out_dir
                .as_ref()
                .map(|d| d.join(format!("topic_rep{rep}_n{n}_last.json"))),
        };
        let mut shuffle = stream_rng(cfg.seed, TAG, rep, &format!("shuffle-{n}"));
        let trace = train_encoder(&mut enc, &pairs, LossKind::ChiSq, LinkFunction::Identity, &opts, &mut shuffle)?;
        let feats = word_features(&enc, s)?;
        rows.push(row("chisq", n, "train_loss", *trace.epoch_loss.last().expect("epochs >= 1")));
        rows.push(row("chisq", n, "score_suff_proxy", score_sufficiency_proxy(&joint, feats.view())?));
        let b = bound_instance(&topic, &joint, feats.view())?;
        rows.push(row("chisq", n, "suff_kl_stat", b.suff_kl));
        for &md in &cfg.m_grid {
            let mut rng = stream_rng(cfg.seed, TAG, rep, &format!("downstream-{md}"));
            let r = downstream_risk(&topic, feats.view(), md, head_opts, &mut rng)?;
            rows.push(row(&format!("chisq_m{md}"), n, "cls_risk_kl", r));
        }
        debug_assert_eq!(enc.output_dim(), m + s);
    }
    Ok(rows)
}
