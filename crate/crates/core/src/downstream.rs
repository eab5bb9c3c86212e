//! Downstream heads on frozen encoder features and the risk functionals used to
//! judge them: truncated least squares for regression, a truncated softmax-linear
//! classifier for the topic model, and the augmentation errors.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{Scenario, TopicModel};
use crate::discrete_prob::{divergence, DivergenceKind, Statistic};
use crate::encoder_nn::{Encoder, IdentityEncoder};
use crate::error::{argument, domain, Error, Result};
use crate::linalg::{clip_singular_values, lstsq_min_norm};
use crate::scalar::Real;

/// Minimum-norm least-squares coefficients of `targets` on `features`.
pub fn fit_ols<T: Real>(features: ArrayView2<T>, targets: ArrayView1<T>) -> Result<Array1<T>> {
    if features.nrows() == 0 {
        return argument("need at least one sample");
    }
    lstsq_min_norm(features, targets)
}

/// `h(u) = clamp(<u, eta> + intercept, -B, B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T> {
    pub eta: Array1<T>,
    pub intercept: T,
    pub bound: T,
}

impl<T: Real> LinearHead<T> {
    pub fn new(eta: Array1<T>, intercept: T, bound: T) -> Result<Self> {
        if !(bound > T::zero()) {
            return argument("truncation level must be positive");
        }
        Ok(Self {
            eta,
            intercept,
            bound,
        })
    }

    pub fn fit(
        features: ArrayView2<T>,
        targets: ArrayView1<T>,
        intercept: bool,
        bound: T,
    ) -> Result<Self> {
        if intercept {
            let (m, p) = features.dim();
            let mut design = Array2::<T>::ones((m, p + 1));
            design.slice_mut(s![.., ..p]).assign(&features);
            let coef = fit_ols(design.view(), targets)?;
            Self::new(coef.slice(s![..p]).to_owned(), coef[p], bound)
        } else {
            Self::new(fit_ols(features, targets)?, T::zero(), bound)
        }
    }

    pub fn predict_raw(&self, u: ArrayView1<T>) -> T {
        u.dot(&self.eta) + self.intercept
    }

    pub fn predict(&self, u: ArrayView1<T>) -> T {
        self.predict_raw(u).max(-self.bound).min(self.bound)
    }

    pub fn predict_batch(&self, u: ArrayView2<T>) -> Result<Array1<T>> {
        if u.ncols() != self.eta.len() {
            return argument("feature dimension does not match the head");
        }
        Ok(u.rows().into_iter().map(|r| self.predict(r)).collect())
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            value: mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// Whether the encoder sees a transformed input `g(x)` or the raw `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMode {
    Augmented,
    Raw,
}

const EVAL_CHUNK: usize = 8192;

/// Excess risk `E[(y - h(f(z)))^2] - sigma^2` with `z = g(x)` or `z = x`.
/// The label noise is integrated out, so each term is `(<x, theta> - h)^2`.
pub fn regression_excess_risk<T: Real, E: Encoder<T> + ?Sized, R: Rng>(
    scenario: &Scenario,
    encoder: &E,
    head: &LinearHead<T>,
    eval_size: usize,
    mode: RiskMode,
    rng: &mut R,
) -> Result<Estimate> {
    if eval_size == 0 {
        return argument("need eval_size >= 1");
    }
    let (theta, _) = scenario.regression_target()?;
    let mut terms = Vec::with_capacity(eval_size);
    let mut left = eval_size;
    while left > 0 {
        let n = left.min(EVAL_CHUNK);
        left -= n;
        let x = scenario.sample_raw(n, rng)?;
        let z = match mode {
            RiskMode::Raw => x.clone(),
            RiskMode::Augmented => {
                let mut z = Array2::zeros(x.dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    z.row_mut(i).assign(&scenario.transform(row, rng)?);
                }
                z
            }
        };
        let feats = encoder.forward_batch(z.mapv(T::lit).view())?;
        let pred = head.predict_batch(feats.view())?;
        let target = x.dot(&theta);
        terms.extend(
            target
                .iter()
                .zip(pred.iter())
                .map(|(t, p)| (t - p.as_f64()).powi(2)),
        );
    }
    let est = Estimate::from_samples(&terms);
    if !est.value.is_finite() {
        return domain("excess risk is not finite");
    }
    Ok(est)
}

/// Excess risk of OLS on the raw input, the direct linear-regression baseline.
pub fn direct_regression_risk<R: Rng>(
    scenario: &Scenario,
    head: &LinearHead<f64>,
    eval_size: usize,
    rng: &mut R,
) -> Result<Estimate> {
    let enc = IdentityEncoder {
        dim: scenario.view_dim(),
    };
    regression_excess_risk(scenario, &enc, head, eval_size, RiskMode::Raw, rng)
}

/// `E[<g(x) - x, theta>^2]`.
pub fn augmentation_error_regression<R: Rng>(
    scenario: &Scenario,
    mc_size: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if mc_size == 0 {
        return argument("need mc_size >= 1");
    }
    let (theta, _) = scenario.regression_target()?;
    let x = scenario.sample_raw(mc_size, rng)?;
    let mut terms = Vec::with_capacity(mc_size);
    for row in x.rows() {
        let g = scenario.transform(row, rng)?;
        terms.push((&g - &row).dot(&theta).powi(2));
    }
    Ok(Estimate::from_samples(&terms))
}

/// A map from features to a distribution over the `M` topics.
pub trait ClassHead {
    fn predict(&self, u: ArrayView1<f64>) -> Result<Array1<f64>>;
}

/// `softmax(log trun(Gw u + Gb))` with `trun(v) = clamp(v, exp(-B), 1)`, so the
/// output is the truncated vector rescaled to sum one.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    /// `M x p`.
    pub gw: Array2<T>,
    pub gb: Array1<T>,
    /// Truncation floor exponent `B`.
    pub floor: T,
    /// Constraint `||Gw||_op, ||Gb||_2 <= B_Gamma`.
    pub bound: T,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new(gw: Array2<T>, gb: Array1<T>, floor: T, bound: T) -> Result<Self> {
        if gw.nrows() != gb.len() {
            return argument("Gw and Gb disagree on the number of classes");
        }
        if !(floor > T::zero()) || !(bound > T::zero()) {
            return argument("floor and bound must be positive");
        }
        Ok(Self {
            gw,
            gb,
            floor,
            bound,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.gb.len()
    }

    fn linear(&self, u: ArrayView1<T>) -> Array1<T> {
        self.gw.dot(&u) + &self.gb
    }

    fn truncate(&self, v: T) -> T {
        v.max((-self.floor).exp()).min(T::one())
    }

    pub fn probabilities(&self, u: ArrayView1<T>) -> Result<Array1<T>> {
        if u.len() != self.gw.ncols() {
            return argument("feature dimension does not match the head");
        }
        let t = self.linear(u).mapv(|v| self.truncate(v));
        let z = t.sum();
        Ok(t / z)
    }

    pub fn project(&mut self) -> Result<()> {
        self.gw = clip_singular_values(self.gw.view(), self.bound)?;
        let n = self.gb.dot(&self.gb).sqrt();
        if n > self.bound {
            let c = self.bound / n;
            self.gb.mapv_inplace(|v| v * c);
        }
        Ok(())
    }

    /// Mean cross-entropy and its gradient with respect to `(Gw, Gb)`. The
    /// clamp contributes a zero derivative outside `[exp(-B), 1]`.
    pub fn loss_and_grad(
        &self,
        features: ArrayView2<T>,
        labels: &[usize],
    ) -> Result<(T, Array2<T>, Array1<T>)> {
        let m = features.nrows();
        if labels.len() != m || features.ncols() != self.gw.ncols() {
            return argument("features and labels do not match the head");
        }
        let lo = (-self.floor).exp();
        let mut g = features.dot(&self.gw.t()) + &self.gb;
        let mut loss = T::zero();
        for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
            let z = row.iter().map(|&v| self.truncate(v)).sum::<T>();
            let ty = self.truncate(row[y]);
            loss += z.ln() - ty.ln();
            for (k, v) in row.iter_mut().enumerate() {
                *v = if *v > lo && *v < T::one() {
                    T::one() / z - if k == y { T::one() / ty } else { T::zero() }
                } else {
                    T::zero()
                };
            }
        }
        let gw = g.t().dot(&features);
        let gb = g.sum_axis(Axis(0));
        let w = T::one() / T::from_usize_lossy(m);
        Ok((loss * w, gw * w, gb * w))
    }
}

impl ClassHead for ClassifierHead<f64> {
    fn predict(&self, u: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.probabilities(u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierOptions {
    /// Truncation floor exponent `B`.
    pub floor: f64,
    /// `B_Gamma`.
    pub bound: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self {
            floor: 5.0,
            bound: 10.0,
            steps: 2000,
            lr: 0.05,
        }
    }
}

/// Full-batch projected gradient descent on the empirical cross-entropy,
/// starting from `Gw = 0`, `Gb = 1_M / M`.
pub fn fit_classifier<T: Real>(
    features: ArrayView2<T>,
    labels: &[usize],
    n_classes: usize,
    opts: ClassifierOptions,
) -> Result<ClassifierHead<T>> {
    let m = features.nrows();
    if m == 0 || labels.len() != m {
        return argument("need one label per feature row and at least one row");
    }
    if n_classes == 0 || labels.iter().any(|&y| y >= n_classes) {
        return argument("labels must lie in [M]");
    }
    let mut head = ClassifierHead::new(
        Array2::zeros((n_classes, features.ncols())),
        Array1::from_elem(n_classes, T::one() / T::from_usize_lossy(n_classes)),
        T::lit(opts.floor),
        T::lit(opts.bound),
    )?;
    head.project()?;
    let lr = T::lit(opts.lr);
    for step in 0..opts.steps {
        let (loss, gw, gb) = head.loss_and_grad(features, labels)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite classifier loss at step {step}"
            )));
        }
        head.gw.scaled_add(-lr, &gw);
        head.gb.scaled_add(-lr, &gb);
        head.project()?;
    }
    Ok(head)
}

/// Encoder features of every word, one row per word.
pub fn word_features<T: Real, E: Encoder<T> + ?Sized>(
    encoder: &E,
    n_words: usize,
) -> Result<Array2<f64>> {
    if encoder.input_dim() != n_words {
        return argument("encoder input dimension is not the vocabulary size");
    }
    Ok(encoder
        .forward_batch(Array2::<T>::eye(n_words).view())?
        .mapv(Real::as_f64))
}

fn check_features(t: &TopicModel, features: &ArrayView2<f64>) -> Result<()> {
    if features.nrows() != t.n_words() {
        return argument("need one feature row per word");
    }
    Ok(())
}

/// `E[KL(P(y|x) || h(f(g(x))))]` by enumerating both words and the dropout choice.
pub fn classification_risk_kl<H: ClassHead + ?Sized>(
    t: &TopicModel,
    features: ArrayView2<f64>,
    head: &H,
) -> Result<f64> {
    check_features(t, &features)?;
    let s = t.n_words();
    let preds: Vec<Array1<f64>> = (0..s)
        .map(|z| head.predict(features.row(z)))
        .collect::<Result<_>>()?;
    if preds.iter().any(|p| p.len() != t.n_topics()) {
        return argument("head predicts the wrong number of classes");
    }
    let mut risk = 0.0;
    for a in 0..s {
        for b in 0..s {
            let px = t.pair_probability(a, b);
            if px == 0.0 {
                continue;
            }
            let post = t.topic_given_pair(a, b);
            let post = post.as_slice().expect("contiguous");
            for z in [a, b] {
                let q = preds[z].as_slice().expect("contiguous");
                risk += 0.5 * px * divergence(post, q, DivergenceKind::Kl)?;
            }
        }
    }
    Ok(risk)
}

/// `P(y | f(z))`: views are grouped by their feature vector after rounding to
/// a `1e-9` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesHead {
    groups: HashMap<Vec<i64>, usize>,
    dists: Vec<Array1<f64>>,
    stat: Statistic,
}

fn quantize(u: ArrayView1<f64>) -> Vec<i64> {
    u.iter().map(|v| (v / 1e-9).round() as i64).collect()
}

impl BayesHead {
    /// Statistic sending each word to its feature group.
    pub fn statistic(&self) -> &Statistic {
        &self.stat
    }

    pub fn group_distribution(&self, g: usize) -> ArrayView1<'_, f64> {
        self.dists[g].view()
    }
}

impl ClassHead for BayesHead {
    fn predict(&self, u: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.groups
            .get(&quantize(u))
            .map(|&g| self.dists[g].clone())
            .ok_or_else(|| Error::Argument("feature vector not produced by any word".into()))
    }
}

pub fn bayes_head(t: &TopicModel, features: ArrayView2<f64>) -> Result<BayesHead> {
    check_features(t, &features)?;
    let mut groups = HashMap::new();
    let mut map = Vec::with_capacity(t.n_words());
    for z in 0..t.n_words() {
        let next = groups.len();
        map.push(*groups.entry(quantize(features.row(z))).or_insert(next));
    }
    let n = groups.len();
    let mut mass = vec![Array1::<f64>::zeros(t.n_topics()); n];
    for (z, &g) in map.iter().enumerate() {
        mass[g] += &t.table().column(z);
    }
    let dists = mass
        .into_iter()
        .map(|w| {
            let z = w.sum();
            w / z
        })
        .collect();
    Ok(BayesHead {
        groups,
        dists,
        stat: Statistic::new(map, n)?,
    })
}

/// `E[D_2(P(y|x) || P(y|z)) + D_2(P(y|z) || P(y|x))]` with `z = g(x)`.
/// Fails with a domain error when the two conditionals have different supports.
pub fn augmentation_error_classification(t: &TopicModel) -> Result<f64> {
    let s = t.n_words();
    let posts: Vec<Array1<f64>> = (0..s).map(|z| t.topic_given_word(z)).collect();
    let renyi = DivergenceKind::Renyi(2.0);
    let mut total = 0.0;
    for a in 0..s {
        for b in 0..s {
            let px = t.pair_probability(a, b);
            if px == 0.0 {
                continue;
            }
            let post = t.topic_given_pair(a, b);
            let post = post.as_slice().expect("contiguous");
            for z in [a, b] {
                let q = posts[z].as_slice().expect("contiguous");
                total += 0.5 * px * (divergence(post, q, renyi)? + divergence(q, post, renyi)?);
            }
        }
    }
    Ok(total)
}

/// Serialized head parameters, stored next to an encoder checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadCheckpoint {
    Linear {
        eta: Vec<f64>,
        intercept: f64,
        bound: f64,
    },
    Classifier {
        classes: usize,
        dim: usize,
        gw: Vec<f64>,
        gb: Vec<f64>,
        floor: f64,
        bound: f64,
    },
}

impl<T: Real> From<&LinearHead<T>> for HeadCheckpoint {
    fn from(h: &LinearHead<T>) -> Self {
        HeadCheckpoint::Linear {
            eta: h.eta.iter().map(|v| v.as_f64()).collect(),
            intercept: h.intercept.as_f64(),
            bound: h.bound.as_f64(),
        }
    }
}

impl<T: Real> From<&ClassifierHead<T>> for HeadCheckpoint {
    fn from(h: &ClassifierHead<T>) -> Self {
        HeadCheckpoint::Classifier {
            classes: h.gw.nrows(),
            dim: h.gw.ncols(),
            gw: h.gw.iter().map(|v| v.as_f64()).collect(),
            gb: h.gb.iter().map(|v| v.as_f64()).collect(),
            floor: h.floor.as_f64(),
            bound: h.bound.as_f64(),
        }
    }
}

impl HeadCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn into_linear<T: Real>(&self) -> Result<LinearHead<T>> {
        match self {
            HeadCheckpoint::Linear {
                eta,
                intercept,
                bound,
            } => LinearHead::new(
                eta.iter().map(|&v| T::lit(v)).collect(),
                T::lit(*intercept),
                T::lit(*bound),
            ),
            _ => argument("checkpoint does not hold a linear head"),
        }
    }

    pub fn into_classifier<T: Real>(&self) -> Result<ClassifierHead<T>> {
        match self {
            HeadCheckpoint::Classifier {
                classes,
                dim,
                gw,
                gb,
                floor,
                bound,
            } => {
                let gw = Array2::from_shape_vec(
                    (*classes, *dim),
                    gw.iter().map(|&v| T::lit(v)).collect(),
                )
                .map_err(|e| Error::Argument(format!("bad classifier shape: {e}")))?;
                ClassifierHead::new(
                    gw,
                    gb.iter().map(|&v| T::lit(v)).collect(),
                    T::lit(*floor),
                    T::lit(*bound),
                )
            }
            _ => argument("checkpoint does not hold a classifier head"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{build_topic_model, topic_joint_exact, NoisySubspace};
    use crate::discrete_prob::suff_ils;
    use crate::linalg::{operator_norm, solve_spd};
    use crate::FGenerator;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn topic(seed: u64, m: usize, s: usize) -> TopicModel {
        build_topic_model(m, s, 6.0, &mut rng(seed)).unwrap()
    }

    /// Word features `P(y | z)` scaled by `sqrt(M / 2)`, the first block of the
    /// gold encoder.
    fn gold_features(t: &TopicModel) -> Array2<f64> {
        t.gold_representation().t().to_owned() / 2.0f64.sqrt()
    }

    #[test]
    fn ols_exact_fit_and_mean() {
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0], [-2.0, 1.0]];
        let beta = array![0.7, -1.3];
        let y = x.dot(&beta);
        let eta = fit_ols(x.view(), y.view()).unwrap();
        assert_abs_diff_eq!(
            (x.dot(&eta) - &y).mapv(f64::abs).sum(),
            0.0,
            epsilon = 1e-12
        );
        let ones = Array2::<f64>::ones((5, 1));
        let t = array![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_abs_diff_eq!(
            fit_ols(ones.view(), t.view()).unwrap()[0],
            3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut r = rng(3);
        let x = Array2::from_shape_fn((100, 5), |_| r.random_range(-1.0f64..1.0));
        let y = Array1::from_shape_fn(100, |_| r.random_range(-1.0..1.0));
        let eta = fit_ols(x.view(), y.view()).unwrap();
        let want = solve_spd(x.t().dot(&x).view(), x.t().dot(&y).view()).unwrap();
        for (a, b) in eta.iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        let grad = x.t().dot(&(x.dot(&eta) - &y));
        assert!(grad.dot(&grad).sqrt() <= 1e-8 * x.iter().map(|v| v * v).sum::<f64>().sqrt());
    }

    #[test]
    fn ols_rank_deficient_is_min_norm() {
        let x = array![[1.0, 1.0], [2.0, 2.0], [-1.0, -1.0]];
        let y = array![2.0, 4.0, -2.0];
        let eta = fit_ols(x.view(), y.view()).unwrap();
        assert_abs_diff_eq!(eta[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eta[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn intercept_head() {
        let x = array![[0.0], [1.0], [2.0]];
        let y = array![1.0, 3.0, 5.0];
        let h = LinearHead::fit(x.view(), y.view(), true, 100.0).unwrap();
        assert_abs_diff_eq!(h.eta[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h.intercept, 1.0, epsilon = 1e-12);
        let tight = LinearHead::new(array![2.0], 1.0, 2.0).unwrap();
        assert_eq!(tight.predict(array![5.0].view()), 2.0);
        assert_eq!(tight.predict(array![-5.0].view()), -2.0);
    }

    #[test]
    fn perfect_head_on_noiseless_scenario() {
        let n = NoisySubspace::new(6, 2, 1.0, 0.0).unwrap();
        let theta = n.theta.clone();
        let sc = Scenario::NoisySubspace(n);
        let head = LinearHead::new(theta, 0.0, 1e6).unwrap();
        let est = direct_regression_risk(&sc, &head, 10_000, &mut rng(1)).unwrap();
        assert_abs_diff_eq!(est.value, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn zero_head_risk_is_signal_variance() {
        let sc = Scenario::NoisySubspace(NoisySubspace::new(10, 4, 1.0, 1.0).unwrap());
        let head = LinearHead::new(Array1::zeros(10), 0.0, 10.0).unwrap();
        let est = direct_regression_risk(&sc, &head, 100_000, &mut rng(2)).unwrap();
        assert!((est.value - 1.0).abs() <= 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn direct_lr_large_m() {
        let sc = Scenario::NoisySubspace(NoisySubspace::new(100, 10, 1.0, 1.0).unwrap());
        let crate::augmentation::Labeled::Regression { x, y } =
            sc.sample_downstream(5000, &mut rng(5)).unwrap()
        else {
            panic!()
        };
        let head = LinearHead::fit(x.view(), y.view(), false, 10.0).unwrap();
        let est = direct_regression_risk(&sc, &head, 100_000, &mut rng(6)).unwrap();
        assert!(est.value < 0.05, "{est:?}");
    }

    #[test]
    fn truncation_never_hurts_bounded_targets() {
        let mut r = rng(7);
        for _ in 0..50 {
            let x = Array2::from_shape_fn((30, 3), |_| r.random_range(-3.0..3.0));
            let y = Array1::from_shape_fn(30, |_| r.random_range(-1.0..1.0));
            let eta = Array1::from_shape_fn(3, |_| r.random_range(-2.0..2.0));
            let clipped = LinearHead::new(eta.clone(), 0.0, 1.0).unwrap();
            let raw = LinearHead::new(eta, 0.0, 1e300).unwrap();
            let risk = |h: &LinearHead<f64>| {
                (h.predict_batch(x.view()).unwrap() - &y)
                    .mapv(|v| v * v)
                    .sum()
            };
            assert!(risk(&clipped) <= risk(&raw) + 1e-12);
        }
    }

    #[test]
    fn regression_augmentation_error() {
        let sc = Scenario::NoisySubspace(NoisySubspace::new(20, 5, 1.0, 1.0).unwrap());
        let est = augmentation_error_regression(&sc, 100_000, &mut rng(9)).unwrap();
        assert!((est.value - 1.0).abs() <= 3.0 * est.stderr, "{est:?}");
        let zero = Scenario::NoisySubspace(NoisySubspace::new(20, 5, 0.0, 1.0).unwrap());
        assert_eq!(
            augmentation_error_regression(&zero, 1000, &mut rng(9))
                .unwrap()
                .value,
            0.0
        );
        let flat = Scenario::NoisySubspace(
            NoisySubspace::with_theta(20, 5, 1.0, 1.0, Array1::zeros(20)).unwrap(),
        );
        assert_eq!(
            augmentation_error_regression(&flat, 1000, &mut rng(9))
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn single_class_classifier() {
        let f = Array2::from_shape_fn((10, 2), |(i, j)| (i + j) as f64);
        let head = fit_classifier(f.view(), &[0; 10], 1, ClassifierOptions::default()).unwrap();
        let (loss, _, _) = head.loss_and_grad(f.view(), &[0; 10]).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            head.probabilities(f.row(3)).unwrap()[0],
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn separable_loss_decreases() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let f = Array2::from_shape_fn((30, 3), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
        let mut head = ClassifierHead::new(
            Array2::zeros((3, 3)),
            Array1::from_elem(3, 1.0 / 3.0),
            20.0,
            100.0,
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for _i in 0..300 {
            let (loss, gw, gb) = head.loss_and_grad(f.view(), &labels).unwrap();
            assert!(loss <= prev + 1e-12, "step {_i}");
            prev = loss;
            head.gw.scaled_add(-0.002, &gw);
            head.gb.scaled_add(-0.002, &gb);
            head.project().unwrap();
        }
        assert!(prev < (3.0f64).ln() - 0.1);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let mut r = rng(4);
        let f = Array2::from_shape_fn((12, 4), |_| r.random_range(0.0..1.0));
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let head = ClassifierHead::new(
            Array2::from_shape_fn((3, 4), |_| r.random_range(-0.2..0.2)),
            Array1::from_elem(3, 0.4),
            3.0,
            10.0,
        )
        .unwrap();
        let (_, gw, gb) = head.loss_and_grad(f.view(), &labels).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut up = head.clone();
                up.gw[[i, j]] += h;
                let mut dn = head.clone();
                dn.gw[[i, j]] -= h;
                let fd = (up.loss_and_grad(f.view(), &labels).unwrap().0
                    - dn.loss_and_grad(f.view(), &labels).unwrap().0)
                    / (2.0 * h);
                assert_abs_diff_eq!(fd, gw[[i, j]], epsilon = 1e-7);
            }
            let mut up = head.clone();
            up.gb[i] += h;
            let mut dn = head.clone();
            dn.gb[i] -= h;
            let fd = (up.loss_and_grad(f.view(), &labels).unwrap().0
                - dn.loss_and_grad(f.view(), &labels).unwrap().0)
                / (2.0 * h);
            assert_abs_diff_eq!(fd, gb[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn fitted_classifier_is_feasible() {
        let t = topic(2, 3, 12);
        let sc = Scenario::TopicModel(t.clone());
        let crate::augmentation::Labeled::Topic { words, labels } =
            sc.sample_downstream(400, &mut rng(3)).unwrap()
        else {
            panic!()
        };
        let feats = Array2::from_shape_fn((400, 3), |(i, k)| 10.0 * (i % 7 + k) as f64);
        let opts = ClassifierOptions {
            bound: 0.5,
            steps: 200,
            ..Default::default()
        };
        let head = fit_classifier(feats.view(), &labels, 3, opts).unwrap();
        assert!(operator_norm(head.gw.view()) <= 0.5 + 1e-9);
        assert!(head.gb.dot(&head.gb).sqrt() <= 0.5 + 1e-9);
        assert_eq!(words.len(), 400);
    }

    #[test]
    fn gold_classifier_beats_initial_head() {
        let t = topic(8, 3, 12);
        let sc = Scenario::TopicModel(t.clone());
        let gold = gold_features(&t);
        let crate::augmentation::Labeled::Topic { words, labels } =
            sc.sample_downstream(4000, &mut rng(4)).unwrap()
        else {
            panic!()
        };
        let mut r = rng(5);
        let views: Vec<usize> = words
            .iter()
            .map(|&(a, b)| if r.random::<bool>() { a } else { b })
            .collect();
        let feats = Array2::from_shape_fn((4000, 3), |(i, k)| gold[[views[i], k]]);
        let head = fit_classifier(feats.view(), &labels, 3, ClassifierOptions::default()).unwrap();
        let init = ClassifierHead::new(
            Array2::zeros((3, 3)),
            Array1::from_elem(3, 1.0 / 3.0),
            5.0,
            10.0,
        )
        .unwrap();
        let fitted = classification_risk_kl(&t, gold.view(), &head).unwrap();
        let base = classification_risk_kl(&t, gold.view(), &init).unwrap();
        let eps = augmentation_error_classification(&t).unwrap();
        assert!(fitted < base, "fitted {fitted}, base {base}");
        assert!(fitted <= 8.0 * eps + 0.05, "fitted {fitted}, eps {eps}");
    }

    #[test]
    fn exact_gold_head_reaches_word_posterior() {
        // Gw = sqrt(2 / M) I on the gold features returns P(y | z)
        let t = topic(6, 3, 12);
        let gold = gold_features(&t);
        let head = ClassifierHead::new(
            Array2::eye(3) * (2.0f64 / 3.0).sqrt(),
            Array1::zeros(3),
            t.achieved_b + 1.0,
            10.0,
        )
        .unwrap();
        for z in 0..12 {
            let p = head.predict(gold.row(z)).unwrap();
            let want = t.topic_given_word(z);
            for y in 0..3 {
                assert_abs_diff_eq!(p[y], want[y], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn uniform_head_risk_by_direct_enumeration() {
        let t = topic(10, 2, 8);
        let f = Array2::<f64>::zeros((8, 2));
        let head = ClassifierHead::new(Array2::zeros((2, 2)), Array1::from_elem(2, 0.5), 5.0, 10.0)
            .unwrap();
        let got = classification_risk_kl(&t, f.view(), &head).unwrap();
        let mut want = 0.0;
        for a in 0..8 {
            for b in 0..8 {
                let p: Vec<f64> = (0..2)
                    .map(|y| 0.5 * t.word_given_topic(y, a) * t.word_given_topic(y, b))
                    .collect();
                let px: f64 = p.iter().sum();
                for q in &p {
                    let post = q / px;
                    want += px * post * (post / 0.5).ln();
                }
            }
        }
        assert_abs_diff_eq!(got, want, epsilon = 1e-13);
    }

    #[test]
    fn bayes_head_cases() {
        let t = topic(11, 2, 8);
        let injective = Array2::from_shape_fn((8, 8), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let bh = bayes_head(&t, injective.view()).unwrap();
        for z in 0..8 {
            let p = bh.predict(injective.row(z)).unwrap();
            assert_abs_diff_eq!(
                (p - t.topic_given_word(z)).mapv(f64::abs).sum(),
                0.0,
                epsilon = 1e-14
            );
        }
        let constant = Array2::<f64>::ones((8, 1));
        let bh = bayes_head(&t, constant.view()).unwrap();
        let p = bh.predict(constant.row(0)).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        // merging words 0 and 1 averages their posteriors, both words have mass 1/S
        let mut merged = injective.clone();
        merged.row_mut(1).assign(&injective.row(0));
        let bh = bayes_head(&t, merged.view()).unwrap();
        let want = (t.topic_given_word(0) + t.topic_given_word(1)) / 2.0;
        let p = bh.predict(merged.row(1)).unwrap();
        assert_abs_diff_eq!((p - want).mapv(f64::abs).sum(), 0.0, epsilon = 1e-14);
        assert_eq!(bh.statistic().n_out(), 7);
        assert!(bh
            .predict(array![9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0].view())
            .is_err());
    }

    #[test]
    fn bayes_head_minimizes_risk_among_heads() {
        // for a fixed grouping the group conditional is the KL-optimal constant,
        // so perturbing any group's prediction cannot lower the risk
        let t = topic(12, 2, 8);
        let feats = Array2::from_shape_fn((8, 1), |(z, _)| (z % 3) as f64);
        let bh = bayes_head(&t, feats.view()).unwrap();
        let best = classification_risk_kl(&t, feats.view(), &bh).unwrap();
        struct Shifted<'a>(&'a BayesHead, usize, f64);
        impl ClassHead for Shifted<'_> {
            fn predict(&self, u: ArrayView1<f64>) -> Result<Array1<f64>> {
                let mut p = self.0.predict(u)?;
                if (u[0] - self.1 as f64).abs() < 0.5 {
                    p[0] += self.2;
                    p[1] -= self.2;
                }
                Ok(p)
            }
        }
        for g in 0..3 {
            for d in [-0.05, -0.01, 0.01, 0.05] {
                let r = classification_risk_kl(&t, feats.view(), &Shifted(&bh, g, d)).unwrap();
                assert!(r >= best - 1e-10);
            }
        }
    }

    #[test]
    fn classification_augmentation_error() {
        let t1 = topic(1, 1, 4);
        assert_abs_diff_eq!(
            augmentation_error_classification(&t1).unwrap(),
            0.0,
            epsilon = 1e-14
        );
        let t = topic(13, 2, 8);
        let got = augmentation_error_classification(&t).unwrap();
        let d2 = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * a / b).sum::<f64>().ln();
        let mut want = 0.0;
        for a in 0..8 {
            for b in 0..8 {
                let px = t.pair_probability(a, b);
                let post: Vec<f64> = t.topic_given_pair(a, b).to_vec();
                for z in [a, b] {
                    let q: Vec<f64> = t.topic_given_word(z).to_vec();
                    want += 0.5 * px * (d2(&post, &q) + d2(&q, &post));
                }
            }
        }
        assert!(got >= 0.0);
        assert_abs_diff_eq!(got, want, epsilon = 1e-13);
    }

    #[test]
    fn deterministic_words_give_zero_error() {
        // each word belongs to one topic and both words repeat the topic, so a
        // single word carries all the label information
        let mut tab = Array2::<f64>::zeros((2, 8));
        for j in 0..8 {
            tab[[j / 4, j]] = 1.0 / 8.0;
        }
        let t = TopicModel::new(tab).unwrap();
        let bh = bayes_head(&t, Array2::eye(8).view()).unwrap();
        assert_abs_diff_eq!(
            classification_risk_kl(&t, Array2::eye(8).view(), &bh).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(augmentation_error_classification(&t).unwrap(), 0.0);
    }

    #[test]
    fn bound_instance_holds_for_merged_encoders() {
        for seed in 0..5 {
            let t = topic(seed, 3, 12);
            let joint = topic_joint_exact(&t).unwrap();
            let eps = augmentation_error_classification(&t).unwrap();
            let feats = Array2::from_shape_fn((12, 1), |(z, _)| (z % 4) as f64);
            let bh = bayes_head(&t, feats.view()).unwrap();
            let risk = classification_risk_kl(&t, feats.view(), &bh).unwrap();
            let suff = suff_ils(&joint, bh.statistic(), FGenerator::Kl).unwrap();
            assert!(risk <= 8.0 * (t.achieved_b * suff.sqrt() + eps));
        }
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let lin = LinearHead::new(array![0.1, -0.25], 0.5, 3.0).unwrap();
        let js = HeadCheckpoint::from(&lin).to_json().unwrap();
        assert_eq!(
            HeadCheckpoint::from_json(&js)
                .unwrap()
                .into_linear::<f64>()
                .unwrap(),
            lin
        );
        let cls = ClassifierHead::new(array![[0.1, 0.2], [0.3, 0.4]], array![0.5, 0.6], 4.0, 9.0)
            .unwrap();
        let js = HeadCheckpoint::from(&cls).to_json().unwrap();
        let back = HeadCheckpoint::from_json(&js).unwrap();
        assert_eq!(back.into_classifier::<f64>().unwrap(), cls);
        assert!(back.into_linear::<f64>().is_err());
    }

    #[test]
    fn word_features_from_encoder() {
        let enc = crate::encoder_nn::AugLinearEncoder::new(array![[1.0, 2.0, 3.0, 4.0]], 0.5, None)
            .unwrap();
        let f = word_features(&enc, 4).unwrap();
        assert_eq!(f.row(2).to_vec(), vec![3.0, 0.0, 0.0, 0.5, 0.0]);
        assert!(word_features(&enc, 5).is_err());
    }

    proptest! {
        #[test]
        fn classifier_output_is_distribution(
            seed in 0u64..1000,
            m in 1usize..5,
            p in 1usize..5,
        ) {
            let mut r = rng(seed);
            let head = ClassifierHead::new(
                Array2::from_shape_fn((m, p), |_| r.random_range(-3.0f64..3.0)),
                Array1::from_shape_fn(m, |_| r.random_range(-3.0..3.0)),
                4.0,
                10.0,
            ).unwrap();
            let u = Array1::from_shape_fn(p, |_| r.random_range(-3.0f64..3.0));
            let q = head.probabilities(u.view()).unwrap();
            prop_assert!((q.sum() - 1.0).abs() < 1e-12);
            let lo = (-4.0f64).exp() / (m as f64);
            prop_assert!(q.iter().all(|&v| v >= lo - 1e-15));
        }

        #[test]
        fn projection_is_feasible(seed in 0u64..1000, bound in 0.1f64..5.0) {
            let mut r = rng(seed);
            let mut head = ClassifierHead::new(
                Array2::from_shape_fn((3, 3), |_| r.random_range(-10.0..10.0)),
                Array1::from_shape_fn(3, |_| r.random_range(-10.0..10.0)),
                4.0,
                bound,
            ).unwrap();
            head.project().unwrap();
            prop_assert!(operator_norm(head.gw.view()) <= bound + 1e-9);
            prop_assert!(head.gb.dot(&head.gb).sqrt() <= bound + 1e-9);
        }
    }
}
