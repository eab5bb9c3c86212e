//! Contrastive pretraining loop shared by the runners.

use std::path::PathBuf;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::Scenario;
use crate::contrastive_losses::{loss_and_grad, LinkFunction, LossKind, PairBatchSet};
use crate::encoder_nn::{Adam, Encoder};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One Adam step per batch, batches re-drawn from a shuffled order every epoch.
    Minibatch,
    /// One Adam step per epoch on the loss over all batches.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub mode: BatchMode,
    /// Minibatch size; defaults to the batch size of the pair set.
    pub batch: Option<usize>,
    /// Where to write the last finite checkpoint if the loss blows up.
    pub dump: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    /// Loss on the full pair set after every epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

/// Where training pairs come from.
#[derive(Clone, Copy, Debug)]
pub enum PairSource<'a> {
    /// A fixed set of pairs.
    Fixed(&'a PairBatchSet<f64>),
    /// Fixed raw samples whose two views are redrawn every epoch.
    Reaugmented {
        scenario: &'a Scenario,
        raw: ArrayView2<'a, f64>,
        k: usize,
    },
}

/// All pairs in a fresh random order, cut into batches of `k` with the
/// remainder dropped.
fn reshuffled(pairs: &PairBatchSet<f64>, k: usize, rng: &mut impl Rng) -> Result<PairBatchSet<f64>> {
    let z1: Vec<_> = pairs.batches().iter().map(|b| b.z1.view()).collect();
    let z2: Vec<_> = pairs.batches().iter().map(|b| b.z2.view()).collect();
    let z1 = ndarray::concatenate(Axis(0), &z1).expect("batches share width");
    let z2 = ndarray::concatenate(Axis(0), &z2).expect("batches share width");
    let mut order: Vec<usize> = (0..z1.nrows()).collect();
    order.shuffle(rng);
    order.truncate(z1.nrows() / k * k);
    let pick = |z: &Array2<f64>| z.select(Axis(0), &order);
    PairBatchSet::from_stacked(pick(&z1).view(), pick(&z2).view(), k)
}

/// Fresh views of the raw samples in a random order, remainder dropped.
fn reaugmented<R: Rng>(sc: &Scenario, raw: ArrayView2<f64>, k: usize, rng: &mut R) -> Result<PairBatchSet<f64>> {
    let mut order: Vec<usize> = (0..raw.nrows()).collect();
    order.shuffle(rng);
    order.truncate(raw.nrows() / k * k);
    let d = sc.view_dim();
    let mut z1 = Array2::zeros((order.len(), d));
    let mut z2 = Array2::zeros((order.len(), d));
    for (j, &i) in order.iter().enumerate() {
        z1.row_mut(j).assign(&sc.transform(raw.row(i), rng)?);
        z2.row_mut(j).assign(&sc.transform(raw.row(i), rng)?);
    }
    PairBatchSet::from_stacked(z1.view(), z2.view(), k)
}

impl PairSource<'_> {
    fn epoch<R: Rng>(&self, mode: BatchMode, batch: Option<usize>, rng: &mut R) -> Result<PairBatchSet<f64>> {
        match (*self, mode) {
            (PairSource::Fixed(p), BatchMode::Full) => Ok(p.clone()),
            (PairSource::Fixed(p), BatchMode::Minibatch) => reshuffled(p, batch.unwrap_or(p.k()), rng),
            (PairSource::Reaugmented { scenario, raw, k }, _) => {
                reaugmented(scenario, raw, batch.unwrap_or(k), rng)
            }
        }
    }
}

fn fail<E: Encoder<f64> + ?Sized>(enc: &E, dump: &Option<PathBuf>, what: String) -> Error {
    let mut msg = what;
    if let Some(path) = dump {
        match enc.checkpoint().to_json().map(|js| std::fs::write(path, js)) {
            Ok(Ok(())) => msg.push_str(&format!("; last checkpoint written to {}", path.display())),
            _ => msg.push_str("; checkpoint dump failed"),
        }
    }
    Error::Training(msg)
}

/// Minimizes the empirical contrastive loss with Adam, projecting after every step.
pub fn train_encoder<E: Encoder<f64> + ?Sized, R: Rng>(
    enc: &mut E,
    pairs: &PairBatchSet<f64>,
    kind: LossKind,
    link: LinkFunction,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainTrace> {
    train_encoder_from(enc, PairSource::Fixed(pairs), kind, link, opts, rng)
}

pub fn train_encoder_from<E: Encoder<f64> + ?Sized, R: Rng>(
    enc: &mut E,
    source: PairSource<'_>,
    kind: LossKind,
    link: LinkFunction,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainTrace> {
    let mut adam = Adam::new(enc.n_params(), opts.lr);
    let mut epoch_loss = Vec::with_capacity(opts.epochs);
    enc.project()?;
    for epoch in 0..opts.epochs {
        let set = source.epoch(opts.mode, opts.batch, rng)?;
        let steps: Vec<PairBatchSet<f64>> = match opts.mode {
            BatchMode::Full => vec![set],
            BatchMode::Minibatch => set
                .batches()
                .iter()
                .map(|b| PairBatchSet::new(vec![b.clone()]))
                .collect::<Result<_>>()?,
        };
        let mut total = 0.0;
        for one in &steps {
            let (loss, grad) = loss_and_grad(one, &*enc, link, kind)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(fail(enc, &opts.dump, format!("non-finite loss at epoch {epoch}")));
            }
            total += loss;
            adam.step_encoder(enc, grad.view())?;
        }
        epoch_loss.push(total / steps.len() as f64);
    }
    Ok(TrainTrace {
        epoch_loss,
        steps: adam.steps(),
    })
}
