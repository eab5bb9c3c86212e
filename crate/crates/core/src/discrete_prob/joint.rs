use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{argument, domain, Result};
use crate::scalar::Real;

/// Finite joint probability table `p(x, y)`, rows indexed by `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint<T> {
    p: Array2<T>,
}

impl<T: Real> DiscreteJoint<T> {
    /// Validates nonnegativity and a total mass of one (within `1e-12`, or a few
    /// hundred ulps for `f32`).
    pub fn new(p: Array2<T>) -> Result<Self> {
        if p.is_empty() {
            return argument("joint table must be non-empty");
        }
        if p.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return domain("joint entries must be finite and nonnegative");
        }
        let total: T = p.iter().copied().sum();
        if (total - T::one()).abs() > mass_tolerance::<T>(p.len()) {
            return domain(format!("joint must sum to one, got {total}"));
        }
        Ok(Self { p })
    }

    /// Normalizes a nonnegative table to unit mass.
    pub fn from_weights(w: Array2<T>) -> Result<Self> {
        let total: T = w.iter().copied().sum();
        if !(total > T::zero()) {
            return domain("weights must have positive total mass");
        }
        Self::new(w.mapv(|v| v / total))
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let ncols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != ncols) {
            return argument("ragged joint rows");
        }
        let flat: Vec<T> = rows.iter().flatten().copied().collect();
        let p = Array2::from_shape_vec((rows.len(), ncols), flat)
            .map_err(|e| crate::Error::Argument(e.to_string()))?;
        Self::new(p)
    }

    pub fn table(&self) -> ArrayView2<'_, T> {
        self.p.view()
    }

    pub fn nx(&self) -> usize {
        self.p.nrows()
    }

    pub fn ny(&self) -> usize {
        self.p.ncols()
    }

    pub fn px(&self) -> Array1<T> {
        self.p.sum_axis(Axis(1))
    }

    pub fn py(&self) -> Array1<T> {
        self.p.sum_axis(Axis(0))
    }

    /// Rows `p(y | x)`; rows with zero marginal mass are left at zero.
    pub fn conditional(&self) -> Array2<T> {
        let px = self.px();
        let mut c = self.p.clone();
        for (mut row, &m) in c.rows_mut().into_iter().zip(px.iter()) {
            if m > T::zero() {
                row.mapv_inplace(|v| v / m);
            }
        }
        c
    }

    /// Density ratio `p(x, y) / (p(x) p(y))`, `None` off the product support.
    pub fn ratio_table(&self) -> Array2<Option<T>> {
        let (px, py) = (self.px(), self.py());
        Array2::from_shape_fn(self.p.dim(), |(x, y)| {
            let q = px[x] * py[y];
            (q > T::zero()).then(|| self.p[[x, y]] / q)
        })
    }

    /// The joint with rows and columns swapped.
    pub fn transposed(&self) -> Self {
        Self {
            p: self.p.t().to_owned(),
        }
    }
}

pub(crate) fn mass_tolerance<T: Real>(cells: usize) -> T {
    let eps = T::epsilon() * T::from_usize_lossy(cells.max(1)) * T::lit(4.0);
    eps.max(T::lit(1e-12))
}

/// An index map `T: X -> {0, .., n_out - 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statistic {
    map: Vec<usize>,
    n_out: usize,
}

impl Statistic {
    pub fn new(map: Vec<usize>, n_out: usize) -> Result<Self> {
        if let Some(bad) = map.iter().find(|&&t| t >= n_out) {
            return argument(format!("statistic value {bad} out of range 0..{n_out}"));
        }
        Ok(Self { map, n_out })
    }

    /// Uses `max + 1` as the output cardinality.
    pub fn from_map(map: Vec<usize>) -> Self {
        let n_out = map.iter().copied().max().map_or(0, |m| m + 1);
        Self { map, n_out }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
            n_out: n,
        }
    }

    pub fn constant(n: usize) -> Self {
        Self {
            map: vec![0; n],
            n_out: 1,
        }
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn n_in(&self) -> usize {
        self.map.len()
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn apply(&self, x: usize) -> usize {
        self.map[x]
    }

    /// `then ∘ self`: first `self`, then `then`.
    pub fn compose(&self, then: &Statistic) -> Result<Statistic> {
        if then.n_in() != self.n_out {
            return argument(format!(
                "cannot compose: inner has {} outputs, outer takes {} inputs",
                self.n_out,
                then.n_in()
            ));
        }
        Ok(Statistic {
            map: self.map.iter().map(|&t| then.map[t]).collect(),
            n_out: then.n_out,
        })
    }
}

/// Similarity scores `S(x, y)` on a finite grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable<T> {
    s: Array2<T>,
}

impl<T: Real> ScoreTable<T> {
    pub fn new(s: Array2<T>) -> Result<Self> {
        if s.iter().any(|v| !v.is_finite()) {
            return domain("score entries must be finite");
        }
        Ok(Self { s })
    }

    pub fn constant(nx: usize, ny: usize, value: T) -> Self {
        Self {
            s: Array2::from_elem((nx, ny), value),
        }
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.s.view()
    }

    pub fn into_inner(self) -> Array2<T> {
        self.s
    }

    pub fn dim(&self) -> (usize, usize) {
        self.s.dim()
    }

    /// `S(x, y) + g(x)`.
    pub fn with_row_offsets(&self, offsets: &[T]) -> Result<Self> {
        if offsets.len() != self.s.nrows() {
            return argument("one offset per row required");
        }
        let mut s = self.s.clone();
        for (mut row, &g) in s.rows_mut().into_iter().zip(offsets) {
            row.mapv_inplace(|v| v + g);
        }
        Self::new(s)
    }

    /// Lifts a table on `T(X) x Y` to `X x Y` through `stat`.
    pub fn lift(&self, stat: &Statistic) -> Result<Self> {
        if stat.n_out() != self.s.nrows() {
            return argument("score rows must match statistic outputs");
        }
        let s = Array2::from_shape_fn((stat.n_in(), self.s.ncols()), |(x, y)| {
            self.s[[stat.apply(x), y]]
        });
        Ok(Self { s })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_invalid_tables() {
        assert!(DiscreteJoint::new(array![[0.5, 0.6]]).is_err());
        assert!(DiscreteJoint::new(array![[1.5, -0.5]]).is_err());
        assert!(DiscreteJoint::<f64>::new(Array2::zeros((0, 0))).is_err());
        assert!(DiscreteJoint::new(array![[0.25, 0.25], [0.25, 0.25]]).is_ok());
    }

    #[test]
    fn conditionals_sum_to_one_and_skip_empty_rows() {
        let j = DiscreteJoint::new(array![[0.2f64, 0.3], [0.0, 0.0], [0.4, 0.1]]).unwrap();
        let c = j.conditional();
        assert!((c.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(c.row(1).sum(), 0.0);
        assert!((c.row(2).sum() - 1.0).abs() < 1e-12);
        assert!(j.ratio_table()[[1, 0]].is_none());
    }

    #[test]
    fn statistic_validation_and_composition() {
        assert!(Statistic::new(vec![0, 2], 2).is_err());
        let merge = Statistic::new(vec![0, 0, 1], 2).unwrap();
        let collapse = Statistic::constant(2);
        let both = merge.compose(&collapse).unwrap();
        assert_eq!(both.map(), &[0, 0, 0]);
        assert!(collapse.compose(&merge).is_err());
    }

    #[test]
    fn score_lift_follows_the_statistic() {
        let s = ScoreTable::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let stat = Statistic::new(vec![1, 0, 1], 2).unwrap();
        let lifted = s.lift(&stat).unwrap();
        assert_eq!(lifted.values(), array![[3.0, 4.0], [1.0, 2.0], [3.0, 4.0]]);
        assert!(ScoreTable::new(array![[f64::NAN]]).is_err());
    }
}
