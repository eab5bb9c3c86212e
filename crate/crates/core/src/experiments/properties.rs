//! The discrete invariant suite behind the `equivalence` command.

use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::ResultRow;
use super::{config_error, require_positive};
use crate::augmentation::stream_rng;
use crate::contrastive_losses::{infonce_population_exact, loss_from_scores, LossKind};
use crate::discrete_prob::{
    c2_constant, expected_tv_to_coarse, induced_conditional, minimize_risk_through,
    optimal_score, population_risk_f, renyi_or_kl, suff_cbs_signed, suff_ils, suff_vfs,
    DiscreteJoint, NewtonOptions, ScoreTable, Statistic, VfsMode,
};
use crate::error::Result;
use crate::fdivergence::FGenerator;

const TAG: &str = "equivalence";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Random instances for the equivalence property.
    #[serde(default = "default_instances")]
    pub instances: usize,
    /// Test hook: flips the sign of every Bregman term in the CBS form.
    #[serde(default)]
    pub inject_sign_flip: bool,
}

fn default_instances() -> usize {
    100
}

impl EquivalenceConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            out_dir: None,
            instances: default_instances(),
            inject_sign_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        require_positive("instances", self.instances)?;
        if self.instances > 100_000 {
            return config_error("instances above 100000");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub passed: bool,
    /// Largest deviation seen, in the units of `tolerance`.
    pub max_dev: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub detail: String,
}

impl PropertyOutcome {
    fn new(name: &str, max_dev: f64, tolerance: f64, instances: usize, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: max_dev.is_finite() && max_dev <= tolerance,
            max_dev,
            tolerance,
            instances,
            detail,
        }
    }

    pub fn to_row(&self, seed: u64) -> ResultRow {
        ResultRow::new(TAG, &self.name, self.instances as u64, 0, seed, "max_deviation", self.max_dev)
    }
}

/// Fixed-width table, one line per property.
pub fn format_table(outcomes: &[PropertyOutcome]) -> String {
    let mut out = format!("{:<22} {:<6} {:>12} {:>10}  detail\n", "property", "result", "max_dev", "tol");
    for o in outcomes {
        out.push_str(&format!(
            "{:<22} {:<6} {:>12.3e} {:>10.1e}  {}\n",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.max_dev,
            o.tolerance,
            o.detail
        ));
    }
    out
}

fn random_joint<R: Rng>(rng: &mut R, nx: usize, ny: usize) -> Result<DiscreteJoint<f64>> {
    DiscreteJoint::from_weights(Array2::from_shape_fn((nx, ny), |_| rng.random_range(0.05..1.0)))
}

fn random_statistic<R: Rng>(rng: &mut R, n: usize) -> Result<Statistic> {
    let n_out = rng.random_range(1..=n);
    Statistic::new((0..n).map(|_| rng.random_range(0..n_out)).collect(), n_out)
}

fn random_distribution<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..1.0)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn sized<R: Rng>(rng: &mut R) -> (usize, usize) {
    (rng.random_range(2..=6), rng.random_range(2..=5))
}

/// ILS, CBS and both VFS modes on random joints and statistics.
pub fn check_equivalence(seed: u64, instances: usize, flip: bool) -> Result<Vec<PropertyOutcome>> {
    let mut rng: ChaCha8Rng = stream_rng(seed, TAG, 0, "forms");
    let sign = if flip { -1.0 } else { 1.0 };
    let (mut cbs_dev, mut vfs_dev, mut num_dev) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let (nx, ny) = sized(&mut rng);
        let joint = random_joint(&mut rng, nx, ny)?;
        let stat = random_statistic(&mut rng, nx)?;
        for gen in FGenerator::ALL {
            let ils = suff_ils(&joint, &stat, gen)?;
            cbs_dev = cbs_dev.max((ils - suff_cbs_signed(&joint, &stat, gen, sign)?).abs());
            vfs_dev = vfs_dev.max((ils - suff_vfs(&joint, &stat, gen, VfsMode::ClosedForm)?).abs());
            if gen != FGenerator::SquaredHellinger {
                num_dev = num_dev.max((ils - suff_vfs(&joint, &stat, gen, VfsMode::Numeric)?).abs());
            }
        }
    }
    Ok(vec![
        PropertyOutcome::new("ils_vs_cbs", cbs_dev, 1e-10, instances, "max |ILS - CBS|, 3 generators".into()),
        PropertyOutcome::new("ils_vs_vfs_closed", vfs_dev, 1e-10, instances, "max |ILS - VFS closed form|".into()),
        PropertyOutcome::new("ils_vs_vfs_numeric", num_dev, 1e-6, instances, "max |ILS - VFS numeric|, KL and chi2".into()),
    ])
}

/// `E_x TV(p(y|x), p(y|T(x))) <= c2 sqrt(Suff_f)`; reports the largest excess.
pub fn check_pinsker(seed: u64, instances: usize) -> Result<PropertyOutcome> {
    let mut rng: ChaCha8Rng = stream_rng(seed, TAG, 0, "pinsker");
    let (mut worst, mut violations) = (f64::NEG_INFINITY, 0);
    for _ in 0..instances {
        let (nx, ny) = sized(&mut rng);
        let joint = random_joint(&mut rng, nx, ny)?;
        let stat = random_statistic(&mut rng, nx)?;
        let tv = expected_tv_to_coarse(&joint, &stat)?;
        for gen in FGenerator::ALL {
            let rhs = c2_constant(&joint, gen)? * suff_cbs_signed(&joint, &stat, gen, 1.0)?.max(0.0).sqrt();
            let excess = tv - rhs;
            worst = worst.max(excess);
            violations += usize::from(excess > 1e-10);
        }
    }
    Ok(violation_outcome("pinsker", worst, violations, instances))
}

/// `D_a(P||Q) <= ka/(ka-1) D_{(ka-1)/(k-1)}(P||T) + D_{ka}(T||Q)` at the two
/// orders used downstream.
pub fn check_renyi_triangle(seed: u64, instances: usize) -> Result<PropertyOutcome> {
    let mut rng: ChaCha8Rng = stream_rng(seed, TAG, 0, "renyi");
    let (mut worst, mut violations) = (f64::NEG_INFINITY, 0);
    for _ in 0..instances {
        let n = rng.random_range(2..=6);
        let p = random_distribution(&mut rng, n);
        let t = random_distribution(&mut rng, n);
        let q = random_distribution(&mut rng, n);
        for (k, a) in [(1.5, 4.0 / 3.0), (4.0 / 3.0, 1.0)] {
            let ka: f64 = k * a;
            let lhs = renyi_or_kl(&p, &q, a)?;
            let rhs = ka / (ka - 1.0) * renyi_or_kl(&p, &t, (ka - 1.0) / (k - 1.0))?
                + renyi_or_kl(&t, &q, ka)?;
            let excess = lhs - rhs;
            worst = worst.max(excess);
            violations += usize::from(excess > 1e-10);
        }
    }
    Ok(violation_outcome("renyi_triangle", worst, violations, instances))
}

fn violation_outcome(name: &str, worst: f64, violations: usize, instances: usize) -> PropertyOutcome {
    let mut o = PropertyOutcome::new(
        name,
        worst.max(0.0),
        1e-10,
        instances,
        format!("{violations} violations, largest lhs - rhs {worst:.3e}"),
    );
    o.passed = violations == 0;
    o
}

/// Newton minimization of `R_f` recovers `p(y|x)`; row offsets leave `R_f` unchanged.
pub fn check_minimizer(seed: u64, instances: usize) -> Result<Vec<PropertyOutcome>> {
    let mut rng: ChaCha8Rng = stream_rng(seed, TAG, 0, "minimizer");
    let (mut cond_dev, mut offset_dev) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let (nx, ny) = sized(&mut rng);
        let joint = random_joint(&mut rng, nx, ny)?;
        let truth = joint.conditional();
        for gen in [FGenerator::Kl, FGenerator::ChiSquared] {
            let min = minimize_risk_through(&joint, &Statistic::identity(nx), gen, NewtonOptions::default())?;
            let induced = induced_conditional(&joint, &min.scores, gen)?;
            for (a, b) in induced.iter().zip(truth.iter()) {
                cond_dev = cond_dev.max((a - b).abs());
            }
            let star = optimal_score(&joint, gen)?;
            let offsets: Vec<f64> = (0..nx).map(|_| rng.random_range(-3.0..3.0)).collect();
            let base = population_risk_f(&joint, &star, gen)?;
            let shifted = population_risk_f(&joint, &star.with_row_offsets(&offsets)?, gen)?;
            offset_dev = offset_dev.max((shifted - base).abs());
        }
    }
    Ok(vec![
        PropertyOutcome::new("minimizer_conditional", cond_dev, 1e-6, instances, "max |P_S(y|x) - p(y|x)|".into()),
        PropertyOutcome::new("minimizer_offsets", offset_dev, 1e-10, instances, "max |R_f(S* + c(x)) - R_f(S*)|".into()),
    ])
}

/// Three-word joint with the structure of the dropout topic model: half the
/// mass on repeated words, half spread through two topics.
pub fn three_state_joint() -> Result<DiscreteJoint<f64>> {
    let prior = [0.4, 0.6];
    let words = [[0.6, 0.3, 0.1], [0.15, 0.25, 0.6]];
    let marginal: Vec<f64> = (0..3).map(|a| prior[0] * words[0][a] + prior[1] * words[1][a]).collect();
    DiscreteJoint::new(Array2::from_shape_fn((3, 3), |(a, b)| {
        let shared: f64 = (0..2).map(|y| prior[y] * words[y][a] * words[y][b]).sum();
        0.5 * shared + if a == b { 0.5 * marginal[a] } else { 0.0 }
    }))
}

/// A fixed score table that is not a minimizer of either risk.
pub fn fixed_scores() -> Result<ScoreTable<f64>> {
    ScoreTable::new(ndarray::array![[0.9, -0.4, 0.2], [0.1, 1.3, -0.7], [-0.5, 0.3, 0.6]])
}

/// Expectation of the χ² batch estimator over every tuple of `k` i.i.d. pairs.
pub fn chisq_batch_expectation(joint: &DiscreteJoint<f64>, score: &ScoreTable<f64>, k: usize) -> Result<f64> {
    let (p, s) = (joint.table(), score.values());
    let cells: Vec<(usize, usize)> = p.indexed_iter().filter(|(_, &v)| v > 0.0).map(|(c, _)| c).collect();
    let mut idx = vec![0usize; k];
    let mut total = 0.0;
    loop {
        let pairs: Vec<(usize, usize)> = idx.iter().map(|&i| cells[i]).collect();
        let weight: f64 = pairs.iter().map(|&c| p[c]).product();
        let m = Array2::from_shape_fn((k, k), |(j, l)| s[[pairs[j].0, pairs[l].1]]);
        total += weight * loss_from_scores(LossKind::ChiSq, &[m])?;
        // odometer over tuples of cell indices
        let mut pos = 0;
        while pos < k {
            idx[pos] += 1;
            if idx[pos] < cells.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
        if pos == k {
            return Ok(total);
        }
    }
}

pub fn check_chisq_unbiased() -> Result<PropertyOutcome> {
    let joint = three_state_joint()?;
    let score = fixed_scores()?;
    let expected = chisq_batch_expectation(&joint, &score, 3)?;
    let population = population_risk_f(&joint, &score, FGenerator::ChiSquared)?;
    Ok(PropertyOutcome::new(
        "chisq_unbiased",
        (expected - population).abs(),
        1e-12,
        729,
        format!("enumerated {expected:.12} vs population {population:.12}"),
    ))
}

/// `R_K - log K` for `K = 2..=5` at the KL-optimal scores: nonincreasing, with
/// the gap to `R_kl` shrinking by roughly `K/(K+1)` per step.
pub fn check_infonce_limit() -> Result<PropertyOutcome> {
    let joint = three_state_joint()?;
    let star = optimal_score(&joint, FGenerator::Kl)?;
    let limit = population_risk_f(&joint, &star, FGenerator::Kl)?;
    let shifted: Vec<f64> = (2..=5)
        .map(|k| Ok(infonce_population_exact(&joint, &star, k, u128::MAX)? - (k as f64).ln()))
        .collect::<Result<_>>()?;
    let mut dev = 0.0f64;
    let mut detail = Vec::new();
    for (i, w) in shifted.windows(2).enumerate() {
        let k = (i + 2) as f64;
        let increase = (w[1] - w[0]).max(0.0);
        let ratio = (w[1] - limit) / (w[0] - limit);
        let miss = ((ratio - k / (k + 1.0)).abs() - 0.1).max(0.0);
        dev = dev.max(increase).max(miss);
        detail.push(format!("K={k}->{}: ratio {ratio:.3}", k + 1.0));
    }
    Ok(PropertyOutcome::new("infonce_limit", dev, 0.0, 4, detail.join(", ")))
}

/// Runs the whole suite; failures are outcomes, not errors.
pub fn run_equivalence(cfg: &EquivalenceConfig) -> Result<Vec<PropertyOutcome>> {
    cfg.validate()?;
    let mut out = check_equivalence(cfg.seed, cfg.instances, cfg.inject_sign_flip)?;
    out.push(check_pinsker(cfg.seed, 200)?);
    out.push(check_renyi_triangle(cfg.seed, 200)?);
    out.extend(check_minimizer(cfg.seed, 20)?);
    out.push(check_chisq_unbiased()?);
    out.push(check_infonce_limit()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_state_joint_is_symmetric_with_repeats_on_the_diagonal() {
        let j = three_state_joint().unwrap();
        let t = j.table();
        for a in 0..3 {
            for b in 0..3 {
                assert!((t[[a, b]] - t[[b, a]]).abs() < 1e-15);
            }
            assert!(t[[a, a]] > 0.5 * j.px()[a]);
        }
    }

    #[test]
    fn odometer_visits_every_tuple() {
        // scores constant at zero: every chi2 batch has the same value
        let j = three_state_joint().unwrap();
        let zero = ScoreTable::constant(3, 3, 0.0);
        let e = chisq_batch_expectation(&j, &zero, 3).unwrap();
        let one: f64 = loss_from_scores(LossKind::ChiSq, &[Array2::zeros((3, 3))]).unwrap();
        assert!((e - one).abs() < 1e-14);
    }

    #[test]
    fn default_suite_passes_and_flip_fails() {
        let cfg = EquivalenceConfig { instances: 10, ..EquivalenceConfig::new(3) };
        let good = run_equivalence(&cfg).unwrap();
        assert!(good.iter().all(|o| o.passed), "{}", format_table(&good));
        let bad = check_equivalence(3, 10, true).unwrap();
        assert!(!bad[0].passed);
        assert!(bad[1].passed);
    }

    #[test]
    fn table_has_one_line_per_property() {
        let o = vec![
            PropertyOutcome::new("a", 0.0, 1.0, 1, String::new()),
            PropertyOutcome::new("b", 2.0, 1.0, 1, String::new()),
        ];
        let t = format_table(&o);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("FAIL"));
    }
}
