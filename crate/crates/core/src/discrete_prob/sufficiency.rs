use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::divergence::{divergence, DivergenceKind};
use super::joint::{DiscreteJoint, Statistic};
use super::risk::{minimize_risk_through, optimal_score, population_risk_f, NewtonOptions};
use crate::error::{argument, Result};
use crate::fdivergence::FGenerator;
use crate::scalar::Real;

/// `I_f(X, Y) = E_{p(x)p(y)} f(p(x,y) / (p(x)p(y)))`.
pub fn mutual_information_f<T: Real>(joint: &DiscreteJoint<T>, gen: FGenerator) -> Result<T> {
    let mut total = T::zero();
    let (px, py) = (joint.px(), joint.py());
    for ((x, y), r) in joint.ratio_table().indexed_iter() {
        if let Some(r) = *r {
            total += px[x] * py[y] * gen.eval(r)?;
        }
    }
    Ok(total.max(T::zero()))
}

/// Joint law of `(T(X), Y)`.
pub fn pushforward<T: Real>(
    joint: &DiscreteJoint<T>,
    stat: &Statistic,
) -> Result<DiscreteJoint<T>> {
    check_stat(joint, stat)?;
    let mut q = Array2::<T>::zeros((stat.n_out(), joint.ny()));
    let p = joint.table();
    for x in 0..joint.nx() {
        let t = stat.apply(x);
        for y in 0..joint.ny() {
            q[[t, y]] += p[[x, y]];
        }
    }
    DiscreteJoint::new(q)
}

/// `p(y | T(x))` lifted back to the rows of `X`.
fn coarse_conditional<T: Real>(joint: &DiscreteJoint<T>, stat: &Statistic) -> Result<Array2<T>> {
    let coarse = pushforward(joint, stat)?.conditional();
    Ok(Array2::from_shape_fn((joint.nx(), joint.ny()), |(x, y)| {
        coarse[[stat.apply(x), y]]
    }))
}

/// Information-loss form: `I_f(X, Y) - I_f(T(X), Y)`.
pub fn suff_ils<T: Real>(joint: &DiscreteJoint<T>, stat: &Statistic, gen: FGenerator) -> Result<T> {
    let coarse = pushforward(joint, stat)?;
    Ok(mutual_information_f(joint, gen)? - mutual_information_f(&coarse, gen)?)
}

/// Conditional Bregman form:
/// `E_{p(x)p(y)} B_f(p(y|x)/p(y), p(y|T(x))/p(y))`.
pub fn suff_cbs<T: Real>(joint: &DiscreteJoint<T>, stat: &Statistic, gen: FGenerator) -> Result<T> {
    suff_cbs_signed(joint, stat, gen, T::one())
}

/// [`suff_cbs`] with every Bregman term multiplied by `sign`; lets tests check
/// that the equivalence checks catch a flipped term.
#[doc(hidden)]
pub fn suff_cbs_signed<T: Real>(
    joint: &DiscreteJoint<T>,
    stat: &Statistic,
    gen: FGenerator,
    sign: T,
) -> Result<T> {
    check_stat(joint, stat)?;
    let cond = joint.conditional();
    let coarse = coarse_conditional(joint, stat)?;
    let (px, py) = (joint.px(), joint.py());
    let mut total = T::zero();
    for x in 0..joint.nx() {
        for y in 0..joint.ny() {
            let w = px[x] * py[y];
            // p(y|T(x)) = 0 forces p(y|x) = 0, so the term vanishes
            if w <= T::zero() || coarse[[x, y]] <= T::zero() {
                continue;
            }
            let a = cond[[x, y]] / py[y];
            let b = coarse[[x, y]] / py[y];
            total += sign * w * gen.bregman(a, b)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VfsMode {
    /// Optimal scores `f'(ratio)` on the original and pushforward joints.
    ClosedForm,
    /// Newton minimization over tables that factor through the statistic.
    Numeric,
}

/// Variational form: `inf_S R_f(S ∘ T) - inf_S R_f(S)`.
pub fn suff_vfs<T: Real>(
    joint: &DiscreteJoint<T>,
    stat: &Statistic,
    gen: FGenerator,
    mode: VfsMode,
) -> Result<T> {
    check_stat(joint, stat)?;
    let unrestricted = -mutual_information_f(joint, gen)?;
    let restricted = match mode {
        VfsMode::ClosedForm => {
            let coarse = optimal_score(&pushforward(joint, stat)?, gen)?;
            population_risk_f(joint, &coarse.lift(stat)?, gen)?
        }
        VfsMode::Numeric => minimize_risk_through(joint, stat, gen, NewtonOptions::default())?.risk,
    };
    Ok(restricted - unrestricted)
}

/// All three forms side by side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SufficiencyReport<T> {
    pub ils: T,
    pub cbs: T,
    pub vfs: T,
}

impl<T: Real> SufficiencyReport<T> {
    pub fn max_disagreement(&self) -> T {
        let d1 = (self.ils - self.cbs).abs();
        let d2 = (self.ils - self.vfs).abs();
        let d3 = (self.cbs - self.vfs).abs();
        d1.max(d2).max(d3)
    }
}

pub fn sufficiency_report<T: Real>(
    joint: &DiscreteJoint<T>,
    stat: &Statistic,
    gen: FGenerator,
    mode: VfsMode,
) -> Result<SufficiencyReport<T>> {
    Ok(SufficiencyReport {
        ils: suff_ils(joint, stat, gen)?,
        cbs: suff_cbs(joint, stat, gen)?,
        vfs: suff_vfs(joint, stat, gen, mode)?,
    })
}

/// `(2 min f''(ratio))^{-1/2}` over the support. Cells with zero ratio are
/// skipped for KL and Hellinger because `f''(0) = +inf` there.
pub fn c2_constant<T: Real>(joint: &DiscreteJoint<T>, gen: FGenerator) -> Result<T> {
    let mut min = T::infinity();
    for r in joint.ratio_table().iter().flatten() {
        if *r > T::zero() || gen == FGenerator::ChiSquared {
            min = min.min(gen.second_derivative(*r)?);
        }
    }
    if !min.is_finite() {
        return argument("joint has no support cell with positive ratio");
    }
    Ok((T::lit(2.0) * min).sqrt().recip())
}

/// `E_x TV(p(y|x), p(y|T(x)))`.
pub fn expected_tv_to_coarse<T: Real>(joint: &DiscreteJoint<T>, stat: &Statistic) -> Result<T> {
    check_stat(joint, stat)?;
    let cond = joint.conditional();
    let coarse = coarse_conditional(joint, stat)?;
    let px = joint.px();
    let mut total = T::zero();
    for x in 0..joint.nx() {
        if px[x] > T::zero() {
            let a: Vec<T> = cond.row(x).to_vec();
            let b: Vec<T> = coarse.row(x).to_vec();
            total += px[x] * divergence(&a, &b, DivergenceKind::Tv)?;
        }
    }
    Ok(total)
}

fn check_stat<T: Real>(joint: &DiscreteJoint<T>, stat: &Statistic) -> Result<()> {
    if stat.n_in() != joint.nx() {
        return argument(format!(
            "statistic takes {} inputs but the joint has {} rows",
            stat.n_in(),
            joint.nx()
        ));
    }
    Ok(())
}
