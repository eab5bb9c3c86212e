//! Empirical InfoNCE and χ²-contrastive losses over batches of augmented
//! pairs, their gradients, and exact population InfoNCE on finite joints.
//!
//! Within a batch of `K` pairs the score matrix is
//! `S[j, k] = tau(<f(z1_j), f(z2_k)>)`, so positives sit on the diagonal.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrete_prob::{DiscreteJoint, ScoreTable};
use crate::encoder_nn::Encoder;
use crate::error::{argument, Error, Result};
use crate::scalar::Real;

/// One batch of `K` pairs, rows aligned: `(z1[j], z2[j])` is a positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T> {
    pub z1: Array2<T>,
    pub z2: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatchSet<T> {
    k: usize,
    batches: Vec<PairBatch<T>>,
}

impl<T: Real> PairBatchSet<T> {
    pub fn new(batches: Vec<PairBatch<T>>) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Argument("at least one batch required".into()))?;
        let (k, d) = first.z1.dim();
        for b in &batches {
            if b.z1.dim() != (k, d) || b.z2.dim() != (k, d) {
                return argument("every batch must hold K pairs of equal dimension");
            }
        }
        Ok(Self { k, batches })
    }

    /// Splits `n = n1 K` stacked pairs into consecutive batches.
    pub fn from_stacked(z1: ArrayView2<T>, z2: ArrayView2<T>, k: usize) -> Result<Self> {
        if z1.dim() != z2.dim() {
            return argument("view matrices differ in shape");
        }
        if k == 0 || z1.nrows() % k != 0 || z1.nrows() == 0 {
            return argument(format!(
                "{} pairs do not split into batches of {k}",
                z1.nrows()
            ));
        }
        let batches = (0..z1.nrows() / k)
            .map(|i| PairBatch {
                z1: z1.slice(ndarray::s![i * k..(i + 1) * k, ..]).to_owned(),
                z2: z2.slice(ndarray::s![i * k..(i + 1) * k, ..]).to_owned(),
            })
            .collect();
        Self::new(batches)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.k * self.batches.len()
    }

    pub fn batches(&self) -> &[PairBatch<T>] {
        &self.batches
    }

    /// The same pairs with the two views exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            k: self.k,
            batches: self
                .batches
                .iter()
                .map(|b| PairBatch {
                    z1: b.z2.clone(),
                    z2: b.z1.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum LinkFunction {
    Identity,
    /// `tau(u) = kappa u`.
    Scale(f64),
    /// `tau(u) = exp(u / t)`.
    ExpTemperature(f64),
}

impl LinkFunction {
    pub fn validate(self) -> Result<Self> {
        match self {
            LinkFunction::Scale(a) | LinkFunction::ExpTemperature(a)
                if !(a > 0.0 && a.is_finite()) =>
            {
                argument(format!("link parameter must be positive, got {a}"))
            }
            _ => Ok(self),
        }
    }

    pub fn apply<T: Real>(self, u: T) -> T {
        match self {
            LinkFunction::Identity => u,
            LinkFunction::Scale(k) => T::lit(k) * u,
            LinkFunction::ExpTemperature(t) => (u / T::lit(t)).exp(),
        }
    }

    pub fn derivative<T: Real>(self, u: T) -> T {
        match self {
            LinkFunction::Identity => T::one(),
            LinkFunction::Scale(k) => T::lit(k),
            LinkFunction::ExpTemperature(t) => (u / T::lit(t)).exp() / T::lit(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[serde(rename = "infonce")]
    InfoNce,
    #[serde(rename = "chisq")]
    ChiSq,
}

impl LossKind {
    pub fn min_batch(self) -> usize {
        match self {
            LossKind::InfoNce => 2,
            LossKind::ChiSq => 3,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            LossKind::InfoNce => "infonce",
            LossKind::ChiSq => "chisq",
        }
    }

    /// Weight applied to a batch sum so that the batch sums add up to the loss.
    fn weight<T: Real>(self, n_pairs: usize) -> T {
        let n = T::from_usize_lossy(n_pairs);
        match self {
            LossKind::InfoNce => T::one() / (T::lit(2.0) * n),
            LossKind::ChiSq => T::one() / n,
        }
    }
}

/// Which algebraic form of the χ² batch estimator to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChisqForm {
    /// Triple sum over ordered `(k, l)` exactly as written.
    Naive,
    /// `O(K)` per anchor via row sums and sums of squares.
    Reduced,
    /// Reduced for `K > 16`, naive otherwise.
    Auto,
}

/// Inner products `U = F1 F2^T` and scores `S = tau(U)`.
pub fn score_matrix<T: Real>(
    f1: ArrayView2<T>,
    f2: ArrayView2<T>,
    link: LinkFunction,
) -> (Array2<T>, Array2<T>) {
    let u = f1.dot(&f2.t());
    let s = u.mapv(|v| link.apply(v));
    (s, u)
}

fn check_square<T>(s: &ArrayView2<T>, min_k: usize) -> Result<usize> {
    let (r, c) = s.dim();
    if r != c {
        return argument("score matrix must be square");
    }
    if r < min_k {
        return argument(format!("batch size K = {r} but at least {min_k} required"));
    }
    Ok(r)
}

/// Sum over anchors of the row and column InfoNCE terms of one batch, and its
/// derivative with respect to every score.
pub fn infonce_batch<T: Real>(s: ArrayView2<T>) -> Result<(T, Array2<T>)> {
    let k = check_square(&s, 2)?;
    let mut value = T::zero();
    let mut grad = Array2::<T>::zeros((k, k));
    for (axis, transpose) in [(Axis(0), false), (Axis(1), true)] {
        for (j, lane) in s.axis_iter(axis).enumerate() {
            let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = lane.iter().map(|&v| (v - max).exp()).sum();
            value += max + z.ln() - lane[j];
            for (l, &v) in lane.iter().enumerate() {
                let p = (v - max).exp() / z;
                let (r, c) = if transpose { (l, j) } else { (j, l) };
                grad[[r, c]] += p;
            }
            grad[[j, j]] -= T::one();
        }
    }
    Ok((value, grad))
}

/// Sum over anchors of the χ² batch estimator, as the literal triple sum.
pub fn chisq_batch_naive<T: Real>(s: ArrayView2<T>) -> Result<(T, Array2<T>)> {
    let k = check_square(&s, 3)?;
    let km1 = T::from_usize_lossy(k - 1);
    let coef = T::one() / (T::lit(4.0) * km1 * T::from_usize_lossy(k - 2));
    let mut value = T::zero();
    let mut grad = Array2::<T>::zeros((k, k));
    for j in 0..k {
        for a in (0..k).filter(|&a| a != j) {
            for b in (0..k).filter(|&b| b != j && b != a) {
                let d = s[[j, a]] - s[[j, b]];
                value += coef * d * d;
                grad[[j, a]] += T::lit(2.0) * coef * d;
                grad[[j, b]] -= T::lit(2.0) * coef * d;
            }
            value += s[[j, a]] / km1;
            grad[[j, a]] += T::one() / km1;
        }
        value -= s[[j, j]];
        grad[[j, j]] -= T::one();
    }
    Ok((value, grad))
}

/// Same value as [`chisq_batch_naive`] from `Q = sum_{k != j} S_jk^2` and
/// `L = sum_{k != j} S_jk`: the squared-difference sum equals `2(K-1)Q - 2L^2`.
pub fn chisq_batch_reduced<T: Real>(s: ArrayView2<T>) -> Result<(T, Array2<T>)> {
    let k = check_square(&s, 3)?;
    let km1 = T::from_usize_lossy(k - 1);
    let km2 = T::from_usize_lossy(k - 2);
    let two = T::lit(2.0);
    let mut value = T::zero();
    let mut grad = Array2::<T>::zeros((k, k));
    for j in 0..k {
        let row = s.row(j);
        let (mut q, mut l) = (T::zero(), T::zero());
        for (a, &v) in row.iter().enumerate() {
            if a != j {
                q += v * v;
                l += v;
            }
        }
        value += (two * km1 * q - two * l * l) / (T::lit(4.0) * km1 * km2) + l / km1 - row[j];
        let mean = l / km1;
        for a in 0..k {
            grad[[j, a]] = if a == j {
                -T::one()
            } else {
                (row[a] - mean) / km2 + T::one() / km1
            };
        }
    }
    Ok((value, grad))
}

pub fn chisq_batch<T: Real>(s: ArrayView2<T>, form: ChisqForm) -> Result<(T, Array2<T>)> {
    match form {
        ChisqForm::Naive => chisq_batch_naive(s),
        ChisqForm::Reduced => chisq_batch_reduced(s),
        ChisqForm::Auto if s.nrows() > 16 => chisq_batch_reduced(s),
        ChisqForm::Auto => chisq_batch_naive(s),
    }
}

fn batch_loss<T: Real>(kind: LossKind, s: ArrayView2<T>) -> Result<(T, Array2<T>)> {
    match kind {
        LossKind::InfoNce => infonce_batch(s),
        LossKind::ChiSq => chisq_batch(s, ChisqForm::Auto),
    }
}

/// Loss from precomputed per-batch score matrices (all `K x K`).
pub fn loss_from_scores<T: Real>(kind: LossKind, scores: &[Array2<T>]) -> Result<T> {
    let k = scores
        .first()
        .map(|s| s.nrows())
        .ok_or_else(|| Error::Argument("no score matrices".into()))?;
    if scores.iter().any(|s| s.dim() != (k, k)) {
        return argument("score matrices differ in shape");
    }
    let mut total = T::zero();
    for s in scores {
        total += batch_loss(kind, s.view())?.0;
    }
    Ok(total * kind.weight::<T>(k * scores.len()))
}

/// Loss with batch scores built by an arbitrary pairwise function.
pub fn loss_with_score_fn<T: Real, F>(
    kind: LossKind,
    batches: &PairBatchSet<T>,
    score: F,
) -> Result<T>
where
    F: Fn(ndarray::ArrayView1<T>, ndarray::ArrayView1<T>) -> T,
{
    let k = batches.k();
    let mats: Vec<Array2<T>> = batches
        .batches()
        .iter()
        .map(|b| Array2::from_shape_fn((k, k), |(j, l)| score(b.z1.row(j), b.z2.row(l))))
        .collect();
    loss_from_scores(kind, &mats)
}

pub fn empirical_loss<T: Real, E: Encoder<T> + ?Sized>(
    batches: &PairBatchSet<T>,
    encoder: &E,
    link: LinkFunction,
    kind: LossKind,
) -> Result<T> {
    let link = link.validate()?;
    if batches.k() < kind.min_batch() {
        return argument(format!("{} needs K >= {}", kind.token(), kind.min_batch()));
    }
    let sums: Vec<T> = batches
        .batches()
        .par_iter()
        .map(|b| {
            let f1 = encoder.forward_batch(b.z1.view())?;
            let f2 = encoder.forward_batch(b.z2.view())?;
            let (s, _) = score_matrix(f1.view(), f2.view(), link);
            Ok(batch_loss(kind, s.view())?.0)
        })
        .collect::<Result<_>>()?;
    Ok(sums.into_iter().fold(T::zero(), |a, b| a + b) * kind.weight::<T>(batches.n_pairs()))
}

pub fn infonce_empirical<T: Real, E: Encoder<T> + ?Sized>(
    batches: &PairBatchSet<T>,
    encoder: &E,
    link: LinkFunction,
) -> Result<T> {
    empirical_loss(batches, encoder, link, LossKind::InfoNce)
}

pub fn chisq_empirical<T: Real, E: Encoder<T> + ?Sized>(
    batches: &PairBatchSet<T>,
    encoder: &E,
    link: LinkFunction,
) -> Result<T> {
    empirical_loss(batches, encoder, link, LossKind::ChiSq)
}

/// Loss and its gradient with respect to the flat encoder parameters.
/// Batches are evaluated in parallel and reduced in batch order, so the result
/// does not depend on the thread count.
pub fn loss_and_grad<T: Real, E: Encoder<T> + ?Sized>(
    batches: &PairBatchSet<T>,
    encoder: &E,
    link: LinkFunction,
    kind: LossKind,
) -> Result<(T, Array1<T>)> {
    let link = link.validate()?;
    if batches.k() < kind.min_batch() {
        return argument(format!("{} needs K >= {}", kind.token(), kind.min_batch()));
    }
    let w = kind.weight::<T>(batches.n_pairs());
    let parts: Vec<(T, Array1<T>)> = batches
        .batches()
        .par_iter()
        .map(|b| {
            let f1 = encoder.forward_batch(b.z1.view())?;
            let f2 = encoder.forward_batch(b.z2.view())?;
            let (s, u) = score_matrix(f1.view(), f2.view(), link);
            let (v, ds) = batch_loss(kind, s.view())?;
            let mut du = ds;
            du.zip_mut_with(&u, |g, &x| *g = *g * link.derivative(x));
            let df1 = du.dot(&f2);
            let df2 = du.t().dot(&f1);
            let g = encoder.backward_batch(b.z1.view(), df1.view())?
                + encoder.backward_batch(b.z2.view(), df2.view())?;
            Ok((v, g))
        })
        .collect::<Result<_>>()?;
    let mut value = T::zero();
    let mut grad = Array1::<T>::zeros(encoder.n_params());
    for (v, g) in parts {
        value += v;
        grad += &g;
    }
    Ok((value * w, grad * w))
}

/// Default cap on the number of enumerated terms in exact population InfoNCE.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 50_000_000;

/// Count vectors of `k` draws over the support of `weights`, with their
/// multinomial probabilities.
fn compositions<T: Real>(weights: &[T], draws: usize) -> Vec<(Vec<usize>, T)> {
    let support: Vec<usize> = (0..weights.len())
        .filter(|&i| weights[i] > T::zero())
        .collect();
    let mut out = Vec::new();
    let mut counts = vec![0usize; weights.len()];
    fn rec<T: Real>(
        pos: usize,
        left: usize,
        support: &[usize],
        weights: &[T],
        counts: &mut Vec<usize>,
        log_w: f64,
        out: &mut Vec<(Vec<usize>, T)>,
        draws: usize,
    ) {
        if pos + 1 == support.len() {
            let i = support[pos];
            counts[i] = left;
            let lw = log_w + left as f64 * weights[i].as_f64().ln() - ln_factorial(left);
            out.push((counts.clone(), T::lit((lw + ln_factorial(draws)).exp())));
            counts[i] = 0;
            return;
        }
        let i = support[pos];
        for c in 0..=left {
            counts[i] = c;
            let lw = log_w + c as f64 * weights[i].as_f64().ln() - ln_factorial(c);
            rec(pos + 1, left - c, support, weights, counts, lw, out, draws);
        }
        counts[i] = 0;
    }
    if !support.is_empty() {
        rec(
            0,
            draws,
            &support,
            weights,
            &mut counts,
            0.0,
            &mut out,
            draws,
        );
    }
    out
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn n_compositions(draws: usize, bins: usize) -> u128 {
    // C(draws + bins - 1, bins - 1)
    let mut c: u128 = 1;
    for i in 1..bins as u128 {
        c = c.saturating_mul(draws as u128 + i) / i;
    }
    c
}

/// Exact symmetrized population InfoNCE `R_K(S)` on a finite joint, with the
/// gradient with respect to every cell of `S`. The `K - 1` negatives of the
/// row term are i.i.d. from `p(y)` and those of the column term from `p(x)`;
/// they are enumerated as multinomial count vectors.
pub fn infonce_population_exact_with_grad<T: Real>(
    joint: &DiscreteJoint<T>,
    score: &ScoreTable<T>,
    k: usize,
    budget: u128,
) -> Result<(T, Array2<T>)> {
    if k < 2 {
        return argument("population InfoNCE needs K >= 2");
    }
    if score.dim() != (joint.nx(), joint.ny()) {
        return argument("score table does not match the joint");
    }
    let (px, py) = (joint.px(), joint.py());
    let sx = px.iter().filter(|&&v| v > T::zero()).count();
    let sy = py.iter().filter(|&&v| v > T::zero()).count();
    let cells = joint.table().iter().filter(|&&v| v > T::zero()).count() as u128;
    let needed =
        cells.saturating_mul(n_compositions(k - 1, sy).saturating_add(n_compositions(k - 1, sx)));
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    let comp_y = compositions(py.as_slice().expect("contiguous"), k - 1);
    let comp_x = compositions(px.as_slice().expect("contiguous"), k - 1);
    let (p, s) = (joint.table(), score.values());
    let half = T::lit(0.5);
    let mut value = T::zero();
    let mut grad = Array2::<T>::zeros(s.dim());
    for a in 0..joint.nx() {
        for b in 0..joint.ny() {
            let pab = p[[a, b]];
            if pab <= T::zero() {
                continue;
            }
            let pos = s[[a, b]];
            // row term: negatives S(a, y); column term: negatives S(x, b)
            for (comps, row) in [(&comp_y, true), (&comp_x, false)] {
                let lane = if row { s.row(a) } else { s.column(b) };
                let max = lane.iter().copied().fold(pos, T::max);
                for (counts, w) in comps.iter() {
                    let mut z = (pos - max).exp();
                    for (i, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            z += T::from_usize_lossy(c) * (lane[i] - max).exp();
                        }
                    }
                    let weight = half * pab * *w;
                    value += weight * (max + z.ln() - pos);
                    grad[[a, b]] += weight * ((pos - max).exp() / z - T::one());
                    for (i, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            let g = weight * T::from_usize_lossy(c) * (lane[i] - max).exp() / z;
                            if row {
                                grad[[a, i]] += g;
                            } else {
                                grad[[i, b]] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((value, grad))
}

pub fn infonce_population_exact<T: Real>(
    joint: &DiscreteJoint<T>,
    score: &ScoreTable<T>,
    k: usize,
    budget: u128,
) -> Result<T> {
    Ok(infonce_population_exact_with_grad(joint, score, k, budget)?.0)
}
