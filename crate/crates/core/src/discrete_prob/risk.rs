//! The f-contrastive population risk
//!
//! ```text
//! R_f(S) = E_{p(x,y)}[-S] + sum_x p(x) min_c E_{p(y)}[ f*(S(x, .) - c) + c ]
//! ```
//!
//! together with the inner offset that attains the minimum, the conditional
//! law a score induces, and a Newton solver for the outer minimization over
//! score tables that factor through a statistic.

use ndarray::{Array1, Array2, ArrayView1};

use super::joint::{DiscreteJoint, ScoreTable, Statistic};
use super::sufficiency::mutual_information_f;
use crate::error::{argument, domain, Error, Result};
use crate::fdivergence::FGenerator;
use crate::linalg;
use crate::scalar::Real;

/// Minimizer `c` of `E_w[f*(s - c) + c]` over one row of scores, where `w`
/// is the (sub-)probability weight on `y`. Entries with zero weight are ignored.
///
/// KL and χ² have closed forms; squared Hellinger is solved by bisection on
/// `E_w[(f')^{-1}(s - c)] = 1`.
pub fn inner_offset<T: Real>(
    gen: FGenerator,
    scores: ArrayView1<T>,
    weights: ArrayView1<T>,
) -> Result<T> {
    if scores.len() != weights.len() {
        return argument("score row and weights differ in length");
    }
    let active: Vec<(T, T)> = scores
        .iter()
        .zip(weights.iter())
        .filter(|(_, &w)| w > T::zero())
        .map(|(&s, &w)| (s, w))
        .collect();
    if active.is_empty() {
        return argument("row has no positive weight");
    }
    let total: T = active.iter().map(|&(_, w)| w).sum();
    match gen {
        FGenerator::Kl => {
            let max = active
                .iter()
                .map(|&(s, _)| s)
                .fold(T::neg_infinity(), T::max);
            let lse: T = active.iter().map(|&(s, w)| w * (s - max).exp()).sum::<T>() / total;
            Ok(max + lse.ln() - T::one())
        }
        FGenerator::ChiSquared => Ok(active.iter().map(|&(s, w)| w * s).sum::<T>() / total),
        FGenerator::SquaredHellinger => hellinger_offset(&active, total),
    }
}

fn hellinger_offset<T: Real>(active: &[(T, T)], total: T) -> Result<T> {
    let max = active
        .iter()
        .map(|&(s, _)| s)
        .fold(T::neg_infinity(), T::max);
    let min = active.iter().map(|&(s, _)| s).fold(T::infinity(), T::min);
    let spread = max - min;
    // E_w[1/(4 (s - c)^2)] - 1, strictly decreasing in c on (max, inf)
    let excess = |c: T| -> T {
        active
            .iter()
            .map(|&(s, w)| w / (T::lit(4.0) * (s - c) * (s - c)))
            .sum::<T>()
            / total
            - T::one()
    };
    let mut lo = max + T::lit(1e-12) * (T::one() + max.abs());
    let mut hi = max + T::lit(10.0) * (T::one() + spread);
    if !(excess(lo) > T::zero()) {
        return Err(Error::Solver(
            "hellinger offset bracket: constraint below one at the lower end".into(),
        ));
    }
    let mut doublings = 0;
    while excess(hi) > T::zero() {
        hi = max + (hi - max) * T::lit(2.0);
        doublings += 1;
        if doublings > 200 || !hi.is_finite() {
            return Err(Error::Solver(
                "hellinger offset bracket did not close".into(),
            ));
        }
    }
    for _ in 0..400 {
        let mid = lo + (hi - lo) / T::lit(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = lo + (hi - lo) / T::lit(2.0);
    let tol = T::lit(1e-12).max(T::epsilon() * T::lit(1e4));
    let residual = excess(c).abs();
    if residual > tol {
        return Err(Error::Solver(format!(
            "hellinger offset residual {residual} above tolerance"
        )));
    }
    Ok(c)
}

/// Population f-contrastive risk of a score table on a joint.
pub fn population_risk_f<T: Real>(
    joint: &DiscreteJoint<T>,
    score: &ScoreTable<T>,
    gen: FGenerator,
) -> Result<T> {
    check_dims(joint, score)?;
    let (p, s) = (joint.table(), score.values());
    let (px, py) = (joint.px(), joint.py());
    let mut risk = T::zero();
    for x in 0..joint.nx() {
        for y in 0..joint.ny() {
            if p[[x, y]] > T::zero() {
                risk -= p[[x, y]] * s[[x, y]];
            }
        }
        if px[x] > T::zero() {
            risk += px[x] * row_inner_value(gen, s.row(x), py.view())?;
        }
    }
    Ok(risk)
}

/// `min_c E_w[f*(s - c) + c]` for one row.
fn row_inner_value<T: Real>(gen: FGenerator, s: ArrayView1<T>, w: ArrayView1<T>) -> Result<T> {
    let c = inner_offset(gen, s, w)?;
    let mut v = c;
    for (&si, &wi) in s.iter().zip(w.iter()) {
        if wi > T::zero() {
            v += wi * gen.loss_conjugate(si - c)?;
        }
    }
    Ok(v)
}

/// `P_S(y | x) = p(y) (f')^{-1}(S(x, y) - S_x(x))` with `S_x` the inner offset.
/// Rows with zero marginal mass are returned as zeros.
pub fn induced_conditional<T: Real>(
    joint: &DiscreteJoint<T>,
    score: &ScoreTable<T>,
    gen: FGenerator,
) -> Result<Array2<T>> {
    check_dims(joint, score)?;
    let (px, py) = (joint.px(), joint.py());
    let s = score.values();
    let mut out = Array2::zeros(s.dim());
    for x in 0..joint.nx() {
        if px[x] <= T::zero() {
            continue;
        }
        let c = inner_offset(gen, s.row(x), py.view())?;
        for y in 0..joint.ny() {
            if py[y] > T::zero() {
                out[[x, y]] = py[y] * gen.inverse_derivative(s[[x, y]] - c)?;
            }
        }
    }
    Ok(out)
}

/// The global minimizer `S*(x, y) = f'(p(x, y) / (p(x) p(y)))`; cells outside
/// the product support get score zero. KL and Hellinger reject zero-ratio cells
/// inside the support, where `f'(0) = -inf`.
pub fn optimal_score<T: Real>(joint: &DiscreteJoint<T>, gen: FGenerator) -> Result<ScoreTable<T>> {
    let ratios = joint.ratio_table();
    let mut s = Array2::zeros(ratios.dim());
    for ((x, y), r) in ratios.indexed_iter() {
        if let Some(r) = *r {
            if r == T::zero() && gen != FGenerator::ChiSquared {
                return domain(format!(
                    "zero density ratio at ({x}, {y}): the optimal {gen} score is -inf"
                ));
            }
            s[[x, y]] = gen.derivative(r)?;
        }
    }
    ScoreTable::new(s)
}

/// Sufficiency of a score table in its two equivalent forms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreSufficiency<T> {
    /// `R_f(S) - inf R_f = R_f(S) + I_f(X, Y)`.
    pub variational: T,
    /// `E_{p(x)p(y)} B_f(p(y|x)/p(y), P_S(y|x)/p(y))`.
    pub bregman: T,
}

impl<T: Real> ScoreSufficiency<T> {
    pub fn value(&self) -> T {
        self.variational
    }

    pub fn disagreement(&self) -> T {
        (self.variational - self.bregman).abs()
    }
}

pub fn score_sufficiency<T: Real>(
    joint: &DiscreteJoint<T>,
    score: &ScoreTable<T>,
    gen: FGenerator,
) -> Result<ScoreSufficiency<T>> {
    let variational = population_risk_f(joint, score, gen)? + mutual_information_f(joint, gen)?;
    let induced = induced_conditional(joint, score, gen)?;
    let cond = joint.conditional();
    let (px, py) = (joint.px(), joint.py());
    let mut bregman = T::zero();
    for x in 0..joint.nx() {
        for y in 0..joint.ny() {
            let w = px[x] * py[y];
            if w > T::zero() {
                let a = cond[[x, y]] / py[y];
                let b = induced[[x, y]] / py[y];
                bregman += w * bregman_any(gen, a, b)?;
            }
        }
    }
    Ok(ScoreSufficiency {
        variational: variational.max(T::zero()),
        bregman,
    })
}

/// Bregman divergence allowing the χ² second argument anywhere on the line,
/// matching the quadratic conjugate used by the risk.
fn bregman_any<T: Real>(gen: FGenerator, a: T, b: T) -> Result<T> {
    match gen {
        FGenerator::ChiSquared => Ok((a - b) * (a - b) / T::lit(2.0)),
        _ => gen.bregman(a, b),
    }
}

/// Result of minimizing `R_f(S ∘ T)` over tables `S` on `T(X) x Y`.
#[derive(Clone, Debug)]
pub struct RestrictedMinimum<T> {
    /// Minimizing table on `T(X) x Y` (rows of empty cells left at zero).
    pub scores: ScoreTable<T>,
    /// `R_f` of the lifted table on the original joint.
    pub risk: T,
    /// Euclidean norm of the gradient at the returned table.
    pub grad_norm: T,
    pub max_iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            max_iter: 200,
        }
    }
}

/// Minimizes `R_f(S ∘ T)` by damped Newton steps, one independent block per
/// statistic value. With the inner offset solved exactly, the gradient of the
/// block for `t` is `sum_{x: T(x)=t} (p(x) P_S(y|x) - p(x, y))`; constant
/// shifts are invariant directions and are pinned with a `(E_{p(y)} s)^2 / 2`
/// penalty that does not move the minimum value.
pub fn minimize_risk_through<T: Real>(
    joint: &DiscreteJoint<T>,
    stat: &Statistic,
    gen: FGenerator,
    opts: NewtonOptions,
) -> Result<RestrictedMinimum<T>> {
    if stat.n_in() != joint.nx() {
        return argument("statistic domain must match joint rows");
    }
    let (p, px, py) = (joint.table(), joint.px(), joint.py());
    let ny = joint.ny();
    let mut scores = Array2::<T>::zeros((stat.n_out(), ny));
    let mut grad_sq = T::zero();
    let mut max_iterations = 0;

    for t in 0..stat.n_out() {
        let mut a = Array1::<T>::zeros(ny);
        let mut w = T::zero();
        for x in (0..joint.nx()).filter(|&x| stat.apply(x) == t) {
            w += px[x];
            for y in 0..ny {
                a[y] += p[[x, y]];
            }
        }
        if w <= T::zero() {
            continue;
        }
        let block = RowProblem {
            gen,
            a: a.view(),
            w,
            py: py.view(),
        };
        let (s, g, iters) = block.solve(opts)?;
        grad_sq += g * g;
        max_iterations = max_iterations.max(iters);
        scores.row_mut(t).assign(&s);
    }

    let scores = ScoreTable::new(scores)?;
    let risk = population_risk_f(joint, &scores.lift(stat)?, gen)?;
    Ok(RestrictedMinimum {
        scores,
        risk,
        grad_norm: grad_sq.sqrt(),
        max_iterations,
    })
}

struct RowProblem<'a, T> {
    gen: FGenerator,
    a: ArrayView1<'a, T>,
    w: T,
    py: ArrayView1<'a, T>,
}

impl<T: Real> RowProblem<'_, T> {
    fn objective(&self, s: &Array1<T>) -> Result<T> {
        let linear: T = self.a.iter().zip(s.iter()).map(|(&a, &v)| a * v).sum();
        let gauge: T = self.py.iter().zip(s.iter()).map(|(&q, &v)| q * v).sum();
        Ok(-linear
            + self.w * row_inner_value(self.gen, s.view(), self.py)?
            + gauge * gauge / T::lit(2.0))
    }

    /// Gradient of the unpenalized block, and the inner offset used.
    fn gradient(&self, s: &Array1<T>) -> Result<(Array1<T>, T)> {
        let c = inner_offset(self.gen, s.view(), self.py)?;
        let mut g = Array1::zeros(s.len());
        for y in 0..s.len() {
            if self.py[y] > T::zero() {
                g[y] = self.w * self.py[y] * self.gen.inverse_derivative(s[y] - c)? - self.a[y];
            }
        }
        Ok((g, c))
    }

    fn solve(&self, opts: NewtonOptions) -> Result<(Array1<T>, T, usize)> {
        let n = self.a.len();
        let active: Vec<usize> = (0..n).filter(|&y| self.py[y] > T::zero()).collect();
        let m = active.len();
        let mut s = Array1::<T>::zeros(n);
        let tol = T::lit(opts.grad_tol);
        let mut gnorm = T::infinity();

        for iter in 0..=opts.max_iter {
            let (g, c) = self.gradient(&s)?;
            gnorm = norm(&g);
            if gnorm <= tol {
                return Ok((s, gnorm, iter));
            }
            if iter == opts.max_iter {
                break;
            }
            // penalized gradient and Hessian on the active coordinates
            let gauge: T = active.iter().map(|&y| self.py[y] * s[y]).sum();
            let mut hess = Array2::<T>::zeros((m, m));
            let mut rhs = Array1::<T>::zeros(m);
            let curv: Vec<T> = active
                .iter()
                .map(|&y| Ok(self.py[y] * self.gen.loss_conjugate_hess(s[y] - c)?))
                .collect::<Result<_>>()?;
            let curv_total: T = curv.iter().copied().sum();
            for (i, &yi) in active.iter().enumerate() {
                rhs[i] = -(g[yi] + self.py[yi] * gauge);
                for (j, &yj) in active.iter().enumerate() {
                    let diag = if i == j { curv[i] } else { T::zero() };
                    hess[[i, j]] = self.w * (diag - curv[i] * curv[j] / curv_total)
                        + self.py[yi] * self.py[yj];
                }
            }
            let step = linalg::solve_spd(hess.view(), rhs.view())?;

            let f0 = self.objective(&s)?;
            let mut scale = T::one();
            let mut accepted = false;
            for _ in 0..60 {
                let mut trial = s.clone();
                for (i, &y) in active.iter().enumerate() {
                    trial[y] += scale * step[i];
                }
                let ok = match (self.objective(&trial), self.gradient(&trial)) {
                    (Ok(f1), Ok((g1, _))) => f1 <= f0 || norm(&g1) < gnorm,
                    _ => false,
                };
                if ok {
                    s = trial;
                    accepted = true;
                    break;
                }
                scale /= T::lit(2.0);
            }
            if !accepted {
                break;
            }
        }
        Err(Error::Convergence {
            iterations: opts.max_iter,
            residual: gnorm.as_f64(),
        })
    }
}

fn norm<T: Real>(v: &Array1<T>) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn check_dims<T: Real>(joint: &DiscreteJoint<T>, score: &ScoreTable<T>) -> Result<()> {
    if score.dim() != (joint.nx(), joint.ny()) {
        return argument(format!(
            "score table {:?} does not match joint {:?}",
            score.dim(),
            (joint.nx(), joint.ny())
        ));
    }
    Ok(())
}
