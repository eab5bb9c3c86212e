//! Generative scenarios for contrastive pretraining: raw-data samplers, random
//! transformations, augmented pairs, downstream labels, and each scenario's
//! closed-form density ratio.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::contrastive_losses::PairBatchSet;
use crate::discrete_prob::DiscreteJoint;
use crate::error::{argument, domain, Error, Result};
use crate::linalg::orthogonal_factor;
use crate::scalar::Real;

/// `x ~ N(0, I_d)`; the view keeps the first `s` coordinates with additive
/// `N(0, sigma1^2)` noise and replaces the rest by fresh standard normals.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySubspace {
    pub d: usize,
    pub s: usize,
    pub sigma1: f64,
    /// Label noise.
    pub sigma: f64,
    pub theta: Array1<f64>,
}

impl NoisySubspace {
    /// `theta = (1_s / sqrt(s), 0)`.
    pub fn new(d: usize, s: usize, sigma1: f64, sigma: f64) -> Result<Self> {
        let theta = Array1::from_shape_fn(d, |i| if i < s { 1.0 / (s as f64).sqrt() } else { 0.0 });
        Self::with_theta(d, s, sigma1, sigma, theta)
    }

    pub fn with_theta(
        d: usize,
        s: usize,
        sigma1: f64,
        sigma: f64,
        theta: Array1<f64>,
    ) -> Result<Self> {
        if s == 0 || s >= d {
            return argument(format!("need 0 < s < d, got s = {s}, d = {d}"));
        }
        check_nonneg("sigma1", sigma1)?;
        check_nonneg("sigma", sigma)?;
        if theta.len() != d {
            return argument("theta must have length d");
        }
        Ok(Self {
            d,
            s,
            sigma1,
            sigma,
            theta,
        })
    }

    /// `E[<g(x) - x, theta>^2]`.
    pub fn augmentation_error_closed_form(&self) -> f64 {
        let head: f64 = self.theta.slice(s![..self.s]).iter().map(|t| t * t).sum();
        let tail: f64 = self.theta.slice(s![self.s..]).iter().map(|t| t * t).sum();
        self.sigma1 * self.sigma1 * head + 2.0 * tail
    }
}

/// `x ~ N(0, I_d / p)`; the view is `U1 U1^T x + eta` with
/// `eta ~ N(0, sigma^2 I_d / p)`, after which the components in the column
/// spaces of `U1` and `U2` are each scaled to unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct VmfHalves {
    pub d: usize,
    pub p: usize,
    pub sigma: f64,
    /// `d x d` orthogonal, `U1` = first `p` columns.
    pub u: Array2<f64>,
    pub kappa: f64,
    /// Noise of the downstream regression labels.
    pub label_sigma: f64,
}

impl VmfHalves {
    /// `U` is the orthogonal factor of a Gaussian matrix drawn from `rng`.
    pub fn random<R: Rng>(rng: &mut R, d: usize, sigma: f64) -> Result<Self> {
        let g = Array2::from_shape_fn((d, d), |_| normal(rng));
        Self::with_basis(d, sigma, orthogonal_factor(g.view()))
    }

    /// `U = I`: the halves are the first and last `d / 2` coordinates.
    pub fn coordinate(d: usize, sigma: f64) -> Result<Self> {
        Self::with_basis(d, sigma, Array2::eye(d))
    }

    pub fn with_basis(d: usize, sigma: f64, u: Array2<f64>) -> Result<Self> {
        if d < 2 || d % 2 != 0 {
            return argument(format!("d must be even and at least 2, got {d}"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return argument("sigma must be positive");
        }
        if u.dim() != (d, d) {
            return argument("U must be d x d");
        }
        let dev = (u.t().dot(&u) - Array2::<f64>::eye(d))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if dev > 1e-10 {
            return argument(format!("U is not orthogonal (deviation {dev:e})"));
        }
        let p = d / 2;
        let kappa = p as f64 / (sigma * sigma * (sigma * sigma + 2.0));
        Ok(Self {
            d,
            p,
            sigma,
            u,
            kappa,
            label_sigma: 1.0,
        })
    }

    pub fn u1(&self) -> ndarray::ArrayView2<'_, f64> {
        self.u.slice(s![.., ..self.p])
    }

    /// `theta = U1 1_p / sqrt(p)`.
    pub fn theta(&self) -> Array1<f64> {
        self.u1().sum_axis(Axis(1)) / (self.p as f64).sqrt()
    }
}

/// Topic model over `M` topics and `S` words with `P(y, s)` having uniform
/// marginals. A raw sample is two words drawn independently given a uniform
/// topic; a view keeps one of the two words, chosen uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicModel {
    /// `M x S` joint `P(y, s)`.
    table: Array2<f64>,
    /// `-log min_{y, s} P(y | s)`.
    pub achieved_b: f64,
}

const MARGIN_TOL: f64 = 1e-10;

impl TopicModel {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        let (m, s) = table.dim();
        if m == 0 || s < 4 * m {
            return argument(format!("need S >= 4M, got M = {m}, S = {s}"));
        }
        if table.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return domain("topic table must be finite and nonnegative");
        }
        let dev = marginal_deviation(&table);
        if dev > MARGIN_TOL {
            return domain(format!(
                "topic table marginals are not uniform (deviation {dev:e})"
            ));
        }
        let min_post = table.iter().fold(f64::INFINITY, |a, &v| a.min(v)) * s as f64;
        Ok(Self {
            table,
            achieved_b: -min_post.ln(),
        })
    }

    pub fn n_topics(&self) -> usize {
        self.table.nrows()
    }

    pub fn n_words(&self) -> usize {
        self.table.ncols()
    }

    pub fn table(&self) -> ndarray::ArrayView2<'_, f64> {
        self.table.view()
    }

    /// `P(s | y) = M P(y, s)`.
    pub fn word_given_topic(&self, y: usize, s: usize) -> f64 {
        self.n_topics() as f64 * self.table[[y, s]]
    }

    /// `P(y | s) = S P(y, s)` as a vector over topics.
    pub fn topic_given_word(&self, s: usize) -> Array1<f64> {
        self.table.column(s).to_owned() * self.n_words() as f64
    }

    /// `P(y | x1, x2)`.
    pub fn topic_given_pair(&self, x1: usize, x2: usize) -> Array1<f64> {
        let w = Array1::from_shape_fn(self.n_topics(), |y| {
            self.table[[y, x1]] * self.table[[y, x2]]
        });
        let z = w.sum();
        w / z
    }

    /// `P(x1, x2) = sum_y P(y) P(x1 | y) P(x2 | y)`.
    pub fn pair_probability(&self, x1: usize, x2: usize) -> f64 {
        let m = self.n_topics() as f64;
        (0..self.n_topics())
            .map(|y| m * self.table[[y, x1]] * self.table[[y, x2]])
            .sum()
    }

    /// Gold representation `E*`: column `s` is `P(. | s) / sqrt(P(y))`.
    pub fn gold_representation(&self) -> Array2<f64> {
        let (m, s) = self.table.dim();
        Array2::from_shape_fn((m, s), |(y, j)| {
            s as f64 * self.table[[y, j]] * (m as f64).sqrt()
        })
    }

    /// Density ratio of the two views from the closed form
    /// `(1/2) sum_y P(y|z1) P(y|z2) / P(y) + (S/2) 1{z1 = z2}`.
    pub fn view_ratio(&self, z1: usize, z2: usize) -> f64 {
        let (m, s) = self.table.dim();
        let (s, m) = (s as f64, m as f64);
        let cross: f64 = self
            .table
            .column(z1)
            .iter()
            .zip(self.table.column(z2))
            .map(|(a, b)| s * a * s * b * m)
            .sum();
        0.5 * cross + if z1 == z2 { 0.5 * s } else { 0.0 }
    }
}

fn marginal_deviation(t: &Array2<f64>) -> f64 {
    let (m, s) = t.dim();
    let rows = t
        .sum_axis(Axis(1))
        .iter()
        .map(|r| (r - 1.0 / m as f64).abs())
        .fold(0.0, f64::max);
    let cols = t
        .sum_axis(Axis(0))
        .iter()
        .map(|c| (c - 1.0 / s as f64).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        argument(format!("{name} must be finite and nonnegative, got {v}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scenario {
    NoisySubspace(NoisySubspace),
    VmfHalves(VmfHalves),
    TopicModel(TopicModel),
}

/// Downstream samples.
#[derive(Clone, Debug, PartialEq)]
pub enum Labeled {
    Regression {
        x: Array2<f64>,
        y: Array1<f64>,
    },
    Topic {
        words: Vec<(usize, usize)>,
        labels: Vec<usize>,
    },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::NoisySubspace(_) => "noisy_subspace",
            Scenario::VmfHalves(_) => "vmf_halves",
            Scenario::TopicModel(_) => "topic_model",
        }
    }

    /// Dimension of a view.
    pub fn view_dim(&self) -> usize {
        match self {
            Scenario::NoisySubspace(n) => n.d,
            Scenario::VmfHalves(v) => v.d,
            Scenario::TopicModel(t) => t.n_words(),
        }
    }

    pub fn as_topic(&self) -> Result<&TopicModel> {
        match self {
            Scenario::TopicModel(t) => Ok(t),
            other => argument(format!("{} is not a topic model", other.name())),
        }
    }

    /// Raw inputs of a continuous scenario, one per row.
    pub fn sample_raw<R: Rng>(&self, m: usize, rng: &mut R) -> Result<Array2<f64>> {
        match self {
            Scenario::NoisySubspace(n) => Ok(gaussian(rng, m, n.d, 1.0)),
            Scenario::VmfHalves(v) => Ok(gaussian(rng, m, v.d, 1.0 / (v.p as f64).sqrt())),
            Scenario::TopicModel(_) => {
                argument("topic inputs are word pairs, use sample_downstream")
            }
        }
    }

    /// One random transformation `g(x)` of a continuous raw input.
    pub fn transform<R: Rng>(&self, x: ArrayView1<f64>, rng: &mut R) -> Result<Array1<f64>> {
        if x.len() != self.view_dim() {
            return argument("input has the wrong dimension");
        }
        match self {
            Scenario::NoisySubspace(n) => Ok(Array1::from_shape_fn(n.d, |i| {
                let e: f64 = normal(rng);
                if i < n.s {
                    x[i] + n.sigma1 * e
                } else {
                    e
                }
            })),
            Scenario::VmfHalves(v) => {
                let sd = v.sigma / (v.p as f64).sqrt();
                let u1 = v.u1();
                let coef = u1.t().dot(&x);
                let mut w = u1.dot(&coef);
                w.mapv_inplace(|a| a + sd * normal(rng));
                Ok(normalize_halves(v, &w))
            }
            Scenario::TopicModel(_) => argument("topic views come from sample_pairs"),
        }
    }

    /// `n1` batches of `k` augmented pairs, each pair from one raw sample.
    /// Topic views are one-hot rows over the `S` words.
    pub fn sample_pairs<T: Real, R: Rng>(
        &self,
        n1: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<PairBatchSet<T>> {
        let n = n1 * k;
        if n == 0 {
            return argument("need n1 K >= 1");
        }
        let d = self.view_dim();
        let mut z1 = Array2::<T>::zeros((n, d));
        let mut z2 = Array2::<T>::zeros((n, d));
        match self {
            Scenario::TopicModel(t) => {
                for i in 0..n {
                    let (a, b) = t.sample_words(rng);
                    let pick = |rng: &mut R| if rng.random::<bool>() { a } else { b };
                    z1[[i, pick(rng)]] = T::one();
                    z2[[i, pick(rng)]] = T::one();
                }
            }
            _ => {
                let x = self.sample_raw(n, rng)?;
                for i in 0..n {
                    let g1 = self.transform(x.row(i), rng)?;
                    let g2 = self.transform(x.row(i), rng)?;
                    z1.row_mut(i).assign(&g1.mapv(T::lit));
                    z2.row_mut(i).assign(&g2.mapv(T::lit));
                }
            }
        }
        PairBatchSet::from_stacked(z1.view(), z2.view(), k)
    }

    /// Labeled downstream samples: `y = <x, theta> + N(0, sigma^2)` for the
    /// continuous scenarios, `(word pair, topic)` for the topic model.
    pub fn sample_downstream<R: Rng>(&self, m: usize, rng: &mut R) -> Result<Labeled> {
        if m == 0 {
            return argument("need m >= 1");
        }
        match self {
            Scenario::TopicModel(t) => {
                let mut words = Vec::with_capacity(m);
                let mut labels = Vec::with_capacity(m);
                for _ in 0..m {
                    let y = rng.random_range(0..t.n_topics());
                    words.push((t.sample_word(y, rng), t.sample_word(y, rng)));
                    labels.push(y);
                }
                Ok(Labeled::Topic { words, labels })
            }
            _ => {
                let (theta, sigma) = self.regression_target()?;
                let x = self.sample_raw(m, rng)?;
                let mut y = x.dot(&theta);
                y.mapv_inplace(|v| v + sigma * normal(rng));
                Ok(Labeled::Regression { x, y })
            }
        }
    }

    /// `(theta*, label noise)` of a regression scenario.
    pub fn regression_target(&self) -> Result<(Array1<f64>, f64)> {
        match self {
            Scenario::NoisySubspace(n) => Ok((n.theta.clone(), n.sigma)),
            Scenario::VmfHalves(v) => Ok((v.theta(), v.label_sigma)),
            Scenario::TopicModel(_) => argument("topic model has no regression target"),
        }
    }

    /// Log density ratio `log P(z1, z2) / (P(z1) P(z2))`. For `VmfHalves` the
    /// value is `kappa <z1, U1 U1^T z2>` and omits the additive normalizer.
    pub fn oracle_log_density_ratio(
        &self,
        z1: ArrayView1<f64>,
        z2: ArrayView1<f64>,
    ) -> Result<f64> {
        let d = self.view_dim();
        if z1.len() != d || z2.len() != d {
            return argument("views have the wrong dimension");
        }
        match self {
            Scenario::NoisySubspace(n) => {
                if n.sigma1 == 0.0 {
                    return domain(
                        "views share their signal coordinates exactly; no density ratio",
                    );
                }
                let a = 1.0 + n.sigma1 * n.sigma1;
                let rho = 1.0 / a;
                let one_m = 1.0 - rho * rho;
                let mut acc = -0.5 * n.s as f64 * one_m.ln();
                for i in 0..n.s {
                    let (u, v) = (z1[i], z2[i]);
                    acc -= (rho * rho * (u * u + v * v) - 2.0 * rho * u * v) / (2.0 * a * one_m);
                }
                Ok(acc)
            }
            Scenario::VmfHalves(v) => {
                let u1 = v.u1();
                let c1 = u1.t().dot(&z1);
                let c2 = u1.t().dot(&z2);
                Ok(v.kappa * c1.dot(&c2))
            }
            Scenario::TopicModel(t) => {
                let (a, b) = (one_hot_index(z1)?, one_hot_index(z2)?);
                Ok(t.view_ratio(a, b).ln())
            }
        }
    }
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian<R: Rng>(rng: &mut R, r: usize, c: usize, sd: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| sd * normal(rng))
}

fn normalize_halves(v: &VmfHalves, w: &Array1<f64>) -> Array1<f64> {
    let coef = v.u.t().dot(w);
    let mut out = Array1::zeros(v.d);
    for half in [0..v.p, v.p..v.d] {
        let c = coef.slice(s![half.clone()]);
        let norm = c.dot(&c).sqrt();
        if norm > 0.0 {
            out += &(v.u.slice(s![.., half]).dot(&c) / norm);
        }
    }
    out
}

pub(crate) fn one_hot_index(z: ArrayView1<f64>) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in z.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return argument("view is not one-hot");
        }
    }
    hot.ok_or_else(|| Error::Argument("view is all zeros".into()))
}

impl TopicModel {
    fn sample_word<R: Rng>(&self, y: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() / self.n_topics() as f64;
        let row = self.table.row(y);
        let mut acc = 0.0;
        for (s, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        // rounding at the top of the cumulative sum
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    fn sample_words<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let y = rng.random_range(0..self.n_topics());
        (self.sample_word(y, rng), self.sample_word(y, rng))
    }
}

/// Joint of the two views by enumerating topic, both words and both dropout
/// choices.
pub fn topic_joint_enumerated(t: &TopicModel) -> Array2<f64> {
    let (m, s) = (t.n_topics(), t.n_words());
    let mut out = Array2::<f64>::zeros((s, s));
    for y in 0..m {
        for a in 0..s {
            for b in 0..s {
                let p = t.word_given_topic(y, a) * t.word_given_topic(y, b) / m as f64;
                if p == 0.0 {
                    continue;
                }
                let x = [a, b];
                for i in 0..2 {
                    for j in 0..2 {
                        out[[x[i], x[j]]] += 0.25 * p;
                    }
                }
            }
        }
    }
    out
}

/// Joint of the two views from the closed-form ratio times uniform marginals.
pub fn topic_joint_from_ratio(t: &TopicModel) -> Array2<f64> {
    let s = t.n_words();
    let w = 1.0 / (s * s) as f64;
    Array2::from_shape_fn((s, s), |(a, b)| t.view_ratio(a, b) * w)
}

/// Exact `S x S` joint of `(z1, z2)`, checked against both constructions.
pub fn topic_joint_exact(t: &TopicModel) -> Result<DiscreteJoint<f64>> {
    let e = topic_joint_enumerated(t);
    let r = topic_joint_from_ratio(t);
    let dev = (&e - &r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if dev > 1e-12 {
        return Err(Error::Construction(format!(
            "enumerated and closed-form view joints disagree by {dev:e}"
        )));
    }
    DiscreteJoint::new(e)
}

/// Draws a positive `M x S` matrix, scales it to uniform marginals by
/// alternating row and column normalization, then mixes in the uniform table
/// just enough that `P(y | s) >= exp(-B)` everywhere.
pub fn build_topic_model<R: Rng>(m: usize, s: usize, b: f64, rng: &mut R) -> Result<TopicModel> {
    if m == 0 || s < 4 * m {
        return argument(format!("need S >= 4M, got M = {m}, S = {s}"));
    }
    if !(b >= (m as f64).ln()) {
        return argument(format!("floor exp(-B) exceeds 1/M: B = {b}, M = {m}"));
    }
    let mut t = Array2::from_shape_fn((m, s), |_| {
        let g: f64 = normal(rng);
        (1.5 * g).exp()
    });
    let (row, col) = (1.0 / m as f64, 1.0 / s as f64);
    let mut converged = false;
    for _ in 0..10_000 {
        for mut r in t.rows_mut() {
            let z = r.sum();
            r.mapv_inplace(|v| v * row / z);
        }
        for mut c in t.columns_mut() {
            let z = c.sum();
            c.mapv_inplace(|v| v * col / z);
        }
        if marginal_deviation(&t) <= 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Construction(format!(
            "Sinkhorn did not reach uniform marginals in 10000 sweeps (deviation {:e})",
            marginal_deviation(&t)
        )));
    }
    let floor = (-b).exp() * col;
    let min = t.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if min < floor {
        let uniform = row * col;
        let lambda = (floor - min) / (uniform - min);
        t.mapv_inplace(|v| (1.0 - lambda) * v + lambda * uniform);
    }
    TopicModel::new(t)
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    })
}

/// Sub-seed `mix(mix(mix(seed ^ fnv(tag)) ^ rep) ^ fnv(role))` with the
/// SplitMix64 finalizer as `mix` and 64-bit FNV-1a as `fnv`.
pub fn stream_seed(master: u64, tag: &str, rep: u64, role: &str) -> u64 {
    mix64(mix64(mix64(master ^ fnv1a(tag)) ^ rep) ^ fnv1a(role))
}

pub fn stream_rng(master: u64, tag: &str, rep: u64, role: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, tag, rep, role))
}
