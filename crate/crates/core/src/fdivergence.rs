//! Convex generators `f` with `f(1) = 0` and the calculus the contrastive
//! losses need: derivative, inverse derivative, Fenchel conjugate and the
//! Bregman divergence `B_f(a, b) = f(a) - f(b) - (a - b) f'(b)`.
//!
//! | kind        | f(t)          | f'(t)          | f*(s)                      |
//! |-------------|---------------|----------------|----------------------------|
//! | `kl`        | t log t       | log t + 1      | e^(s-1)                    |
//! | `chisq`     | (t - 1)^2 / 2 | t - 1          | s^2/2 + s (s >= -1), -1/2  |
//! | `hellinger` | 1 - sqrt(t)   | -1 / (2 sqrt t)| -1 - 1/(4s), s < 0         |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FGenerator {
    #[serde(rename = "kl")]
    Kl,
    #[serde(rename = "chisq")]
    ChiSquared,
    #[serde(rename = "hellinger")]
    SquaredHellinger,
}

impl FGenerator {
    pub const ALL: [FGenerator; 3] = [
        FGenerator::Kl,
        FGenerator::ChiSquared,
        FGenerator::SquaredHellinger,
    ];

    pub fn token(self) -> &'static str {
        match self {
            FGenerator::Kl => "kl",
            FGenerator::ChiSquared => "chisq",
            FGenerator::SquaredHellinger => "hellinger",
        }
    }

    /// `f(t)` for `t >= 0`, with `0 log 0 = 0` for KL.
    pub fn eval<T: Real>(self, t: T) -> Result<T> {
        check_nonnegative(t)?;
        Ok(match self {
            FGenerator::Kl => {
                if t == T::zero() {
                    T::zero()
                } else {
                    t * t.ln()
                }
            }
            FGenerator::ChiSquared => (t - T::one()).powi(2) / T::lit(2.0),
            FGenerator::SquaredHellinger => T::one() - t.sqrt(),
        })
    }

    /// `f'(t)`. KL and Hellinger diverge at zero, so `t > 0` is required there.
    pub fn derivative<T: Real>(self, t: T) -> Result<T> {
        check_nonnegative(t)?;
        match self {
            FGenerator::Kl => {
                check_positive(t)?;
                Ok(t.ln() + T::one())
            }
            FGenerator::ChiSquared => Ok(t - T::one()),
            FGenerator::SquaredHellinger => {
                check_positive(t)?;
                Ok(-T::one() / (T::lit(2.0) * t.sqrt()))
            }
        }
    }

    pub fn second_derivative<T: Real>(self, t: T) -> Result<T> {
        check_nonnegative(t)?;
        match self {
            FGenerator::Kl => {
                check_positive(t)?;
                Ok(t.recip())
            }
            FGenerator::ChiSquared => Ok(T::one()),
            FGenerator::SquaredHellinger => {
                check_positive(t)?;
                Ok(T::one() / (T::lit(4.0) * t.powf(T::lit(1.5))))
            }
        }
    }

    /// `(f')^{-1}(s)`. For `chisq` this is the affine inverse `s + 1` on the whole
    /// line; values below zero only arise for `s < -1`. Hellinger requires `s < 0`.
    pub fn inverse_derivative<T: Real>(self, s: T) -> Result<T> {
        check_finite(s)?;
        match self {
            FGenerator::Kl => Ok((s - T::one()).exp()),
            FGenerator::ChiSquared => Ok(s + T::one()),
            FGenerator::SquaredHellinger => {
                hellinger_arg(s)?;
                Ok(T::one() / (T::lit(4.0) * s * s))
            }
        }
    }

    /// Fenchel conjugate `sup_{t >= 0} { s t - f(t) }`.
    pub fn conjugate<T: Real>(self, s: T) -> Result<T> {
        check_finite(s)?;
        match self {
            FGenerator::Kl => Ok((s - T::one()).exp()),
            FGenerator::ChiSquared => {
                if s >= -T::one() {
                    Ok(s * s / T::lit(2.0) + s)
                } else {
                    Ok(T::lit(-0.5))
                }
            }
            FGenerator::SquaredHellinger => {
                hellinger_arg(s)?;
                Ok(-T::one() - T::one() / (T::lit(4.0) * s))
            }
        }
    }

    /// Conjugate used inside the f-contrastive risk. Identical to
    /// [`conjugate`](Self::conjugate) except for `chisq`, where the quadratic
    /// `s^2/2 + s` is kept on the whole line; this is the form whose inner
    /// infimum reduces to the centred-variance χ² loss.
    pub fn loss_conjugate<T: Real>(self, s: T) -> Result<T> {
        match self {
            FGenerator::ChiSquared => {
                check_finite(s)?;
                Ok(s * s / T::lit(2.0) + s)
            }
            _ => self.conjugate(s),
        }
    }

    /// Derivative of [`loss_conjugate`](Self::loss_conjugate); equals `(f')^{-1}`.
    pub fn loss_conjugate_grad<T: Real>(self, s: T) -> Result<T> {
        self.inverse_derivative(s)
    }

    /// Second derivative of [`loss_conjugate`](Self::loss_conjugate).
    pub fn loss_conjugate_hess<T: Real>(self, s: T) -> Result<T> {
        check_finite(s)?;
        match self {
            FGenerator::Kl => Ok((s - T::one()).exp()),
            FGenerator::ChiSquared => Ok(T::one()),
            FGenerator::SquaredHellinger => {
                hellinger_arg(s)?;
                Ok(-T::one() / (T::lit(2.0) * s * s * s))
            }
        }
    }

    /// `B_f(a, b)` for `a >= 0`, `b > 0`.
    pub fn bregman<T: Real>(self, a: T, b: T) -> Result<T> {
        check_nonnegative(a)?;
        if !(b > T::zero()) {
            return domain(format!("bregman second argument must be positive, got {b}"));
        }
        let value = self.eval(a)? - self.eval(b)? - (a - b) * self.derivative(b)?;
        // rounding can push an exact zero slightly negative
        Ok(value.max(T::zero()))
    }
}

fn check_finite<T: Real>(s: T) -> Result<()> {
    if s.is_finite() {
        Ok(())
    } else {
        domain(format!("argument must be finite, got {s}"))
    }
}

fn check_nonnegative<T: Real>(t: T) -> Result<()> {
    if t >= T::zero() && t.is_finite() {
        Ok(())
    } else {
        domain(format!(
            "generator argument must be a finite t >= 0, got {t}"
        ))
    }
}

fn check_positive<T: Real>(t: T) -> Result<()> {
    if t > T::zero() {
        Ok(())
    } else {
        domain("derivative is unbounded at t = 0")
    }
}

fn hellinger_arg<T: Real>(s: T) -> Result<()> {
    if s < T::zero() {
        Ok(())
    } else {
        domain(format!(
            "squared-Hellinger conjugate is +inf for s >= 0 (got {s})"
        ))
    }
}

impl fmt::Display for FGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for FGenerator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(FGenerator::Kl),
            "chisq" => Ok(FGenerator::ChiSquared),
            "hellinger" => Ok(FGenerator::SquaredHellinger),
            other => Err(Error::Argument(format!(
                "unknown generator '{other}' (expected kl, chisq or hellinger)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use FGenerator::*;

    fn grid() -> Vec<f64> {
        // log-spaced points on (1e-3, 1e3)
        (0..=120)
            .map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 120.0))
            .collect()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(Kl.eval(1.0).unwrap(), 0.0);
        assert_eq!(ChiSquared.eval(3.0).unwrap(), 2.0);
        assert_eq!(SquaredHellinger.eval(4.0).unwrap(), -1.0);
        assert_eq!(Kl.eval(0.0).unwrap(), 0.0);
        for g in FGenerator::ALL {
            assert_eq!(g.eval(1.0f64).unwrap(), 0.0);
            assert!(matches!(g.eval(-0.1f64), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn conjugate_examples() {
        assert_eq!(ChiSquared.conjugate(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            SquaredHellinger.conjugate(-0.5).unwrap(),
            -0.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(Kl.conjugate(1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(ChiSquared.conjugate(-3.0).unwrap(), -0.5);
        assert!(matches!(
            SquaredHellinger.conjugate(0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            SquaredHellinger.conjugate(0.3),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kl_conjugate_matches_grid_supremum() {
        // sup over t in (0, 20) of t - t log t, finely gridded
        let best = (1..=200_000)
            .map(|i| i as f64 * 1e-4)
            .map(|t| t - t * t.ln())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(best, Kl.conjugate(1.0).unwrap(), epsilon = 1e-7);
    }

    #[test]
    fn bregman_examples() {
        for g in FGenerator::ALL {
            assert_abs_diff_eq!(g.bregman(0.7, 0.7).unwrap(), 0.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(
            Kl.bregman(2.0, 1.0).unwrap(),
            2.0 * 2f64.ln() - 1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(Kl.bregman(2.0, 1.0).unwrap(), 0.386294, epsilon = 1e-6);
        assert_eq!(ChiSquared.bregman(3.0, 1.0).unwrap(), 2.0);
        // 0 log 0 convention: B(0, b) = b
        assert_abs_diff_eq!(Kl.bregman(0.0, 0.3).unwrap(), 0.3, epsilon = 1e-15);
        assert!(matches!(Kl.bregman(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(
            ChiSquared.bregman(1.0, -1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn inverse_derivative_and_duality_on_grid() {
        for g in FGenerator::ALL {
            for t in grid() {
                let s = g.derivative(t).unwrap();
                let back = g.inverse_derivative(s).unwrap();
                assert!(
                    (back - t).abs() <= 1e-10 * t.max(1.0),
                    "{g}: (f')^-1(f'({t})) = {back}"
                );
                let lhs = g.conjugate(s).unwrap();
                let rhs = t * s - g.eval(t).unwrap();
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0),
                    "{g}: f*(f'({t})) = {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        for g in FGenerator::ALL {
            for i in 0..100 {
                let t = 0.05 + 0.2 * i as f64;
                let h = 1e-5 * t;
                let fd = (g.eval(t + h).unwrap() - g.eval(t - h).unwrap()) / (2.0 * h);
                let exact = g.derivative(t).unwrap();
                let rel = (fd - exact).abs() / exact.abs().max(1e-12);
                // absolute slack for the chisq zero crossing at t = 1
                assert!(
                    rel <= 1e-7 || (fd - exact).abs() <= 1e-9,
                    "{g} at {t}: {fd} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn second_derivative_matches_differences_of_derivative() {
        for g in FGenerator::ALL {
            for t in [0.1f64, 0.5, 1.0, 3.0, 20.0] {
                let h = 1e-5 * t;
                let fd = (g.derivative(t + h).unwrap() - g.derivative(t - h).unwrap()) / (2.0 * h);
                let exact = g.second_derivative(t).unwrap();
                assert!((fd - exact).abs() <= 1e-6 * exact.abs(), "{g} {t}");
            }
        }
    }

    #[test]
    fn loss_conjugate_derivatives_are_consistent() {
        for g in FGenerator::ALL {
            for s in [-3.0, -1.5, -0.9, -0.2] {
                let h = 1e-6;
                let fd = (g.loss_conjugate(s + h).unwrap() - g.loss_conjugate(s - h).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(fd, g.loss_conjugate_grad(s).unwrap(), epsilon = 1e-7);
                let fd2 = (g.loss_conjugate_grad(s + h).unwrap()
                    - g.loss_conjugate_grad(s - h).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(fd2, g.loss_conjugate_hess(s).unwrap(), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn tokens_round_trip() {
        for g in FGenerator::ALL {
            assert_eq!(g.token().parse::<FGenerator>().unwrap(), g);
        }
        assert!("tv".parse::<FGenerator>().is_err());
    }

    #[test]
    fn works_in_single_precision() {
        assert_eq!(ChiSquared.eval(3.0f32).unwrap(), 2.0f32);
        assert!((Kl.bregman(2.0f32, 1.0).unwrap() - 0.386_294).abs() < 1e-6);
    }

    fn admissible(g: FGenerator, u: f64) -> f64 {
        match g {
            FGenerator::Kl => -2.0 + 4.0 * u,
            FGenerator::ChiSquared => -3.0 + 6.0 * u,
            FGenerator::SquaredHellinger => -3.0 + 2.9 * u,
        }
    }

    proptest! {
        #[test]
        fn convexity(a in 1e-3f64..50.0, b in 1e-3f64..50.0, lam in 0.0f64..1.0) {
            for g in FGenerator::ALL {
                let mid = g.eval(lam * a + (1.0 - lam) * b).unwrap();
                let chord = lam * g.eval(a).unwrap() + (1.0 - lam) * g.eval(b).unwrap();
                prop_assert!(mid <= chord + 1e-12);
            }
        }

        #[test]
        fn bregman_strictly_positive_off_diagonal(a in 1e-2f64..20.0, b in 1e-2f64..20.0) {
            prop_assume!((a - b).abs() > 1e-6);
            for g in FGenerator::ALL {
                prop_assert!(g.bregman(a, b).unwrap() > 0.0);
            }
        }

        #[test]
        fn conjugate_matches_brute_force_supremum(u in 0.0f64..1.0) {
            for g in FGenerator::ALL {
                let s = admissible(g, u);
                // log grid on (1e-4, 50) then local refinement around the best point
                let n = 20_000;
                let (lo, hi) = (1e-4f64.ln(), 50f64.ln());
                let obj = |t: f64| s * t - g.eval(t).unwrap();
                let mut best_t = 1e-4;
                let mut best = f64::NEG_INFINITY;
                for i in 0..=n {
                    let t = (lo + (hi - lo) * i as f64 / n as f64).exp();
                    if obj(t) > best { best = obj(t); best_t = t; }
                }
                let (mut a, mut b) = (best_t * 0.999, (best_t * 1.001).min(50.0));
                for _ in 0..200 {
                    let m1 = a + (b - a) / 3.0;
                    let m2 = b - (b - a) / 3.0;
                    if obj(m1) < obj(m2) { a = m1 } else { b = m2 }
                }
                best = best.max(obj(0.5 * (a + b)));
                if g == FGenerator::Kl || g == FGenerator::ChiSquared {
                    best = best.max(obj(0.0));
                }
                let exact = g.conjugate(s).unwrap();
                prop_assert!((best - exact).abs() <= 1e-6, "{g} s={s}: grid {best} vs {exact}");
            }
        }
    }
}
