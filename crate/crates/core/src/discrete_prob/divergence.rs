use serde::{Deserialize, Serialize};

use crate::error::{argument, domain, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DivergenceKind {
    /// Total variation, half the L1 distance.
    Tv,
    Kl,
    ChiSquared,
    /// `H^2(p, q) = (1/2) sum (sqrt p - sqrt q)^2`.
    Hellinger2,
    /// Rényi divergence of order `alpha > 0`, `alpha != 1`.
    Renyi(f64),
}

/// Divergence between two distributions on the same finite set.
pub fn divergence<T: Real>(p: &[T], q: &[T], kind: DivergenceKind) -> Result<T> {
    if p.len() != q.len() {
        return argument(format!("length mismatch: {} vs {}", p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let needs_abs_cont = !matches!(kind, DivergenceKind::Tv | DivergenceKind::Hellinger2);
    if needs_abs_cont
        && p.iter()
            .zip(q)
            .any(|(&a, &b)| a > T::zero() && b == T::zero())
    {
        return domain("p is not absolutely continuous with respect to q");
    }
    let half = T::lit(0.5);
    let value = match kind {
        DivergenceKind::Tv => half * p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<T>(),
        DivergenceKind::Kl => p
            .iter()
            .zip(q)
            .filter(|(&a, _)| a > T::zero())
            .map(|(&a, &b)| a * (a / b).ln())
            .sum::<T>(),
        DivergenceKind::ChiSquared => p
            .iter()
            .zip(q)
            .filter(|(_, &b)| b > T::zero())
            .map(|(&a, &b)| (a - b) * (a - b) / b)
            .sum::<T>(),
        DivergenceKind::Hellinger2 => {
            half * p
                .iter()
                .zip(q)
                .map(|(&a, &b)| (a.sqrt() - b.sqrt()).powi(2))
                .sum::<T>()
        }
        DivergenceKind::Renyi(alpha) => {
            if !(alpha > 0.0) || (alpha - 1.0).abs() < 1e-12 {
                return argument(format!(
                    "Rényi order must be positive and != 1, got {alpha}"
                ));
            }
            let a = T::lit(alpha);
            let s: T = p
                .iter()
                .zip(q)
                .filter(|(&pi, _)| pi > T::zero())
                .map(|(&pi, &qi)| pi * (pi / qi).powf(a - T::one()))
                .sum();
            s.ln() / (a - T::one())
        }
    };
    // identical inputs can round to a tiny negative number
    Ok(value.max(T::zero()))
}

/// KL for order one, Rényi otherwise.
pub fn renyi_or_kl<T: Real>(p: &[T], q: &[T], alpha: f64) -> Result<T> {
    if (alpha - 1.0).abs() < 1e-12 {
        divergence(p, q, DivergenceKind::Kl)
    } else {
        divergence(p, q, DivergenceKind::Renyi(alpha))
    }
}

fn check_distribution<T: Real>(p: &[T]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return domain("distribution entries must be finite and nonnegative");
    }
    let total: T = p.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-9).max(T::epsilon() * T::lit(64.0)) {
        return domain(format!("distribution must sum to one, got {total}"));
    }
    Ok(())
}
