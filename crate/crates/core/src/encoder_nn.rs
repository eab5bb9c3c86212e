//! Encoders `f: X -> R^p` with hand-written reverse-mode gradients, norm
//! projections, and the Adam optimizer.
//!
//! Every encoder works on row-major batches: an `n x d` input matrix maps to an
//! `n x p` feature matrix. Parameters are exposed as one flat vector so the
//! optimizer does not need to know the architecture.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::linalg;
use crate::scalar::Real;

pub trait Encoder<T: Real>: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn forward_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>>;

    /// Vector-Jacobian product: gradient of `sum(upstream * forward(z))` with
    /// respect to the flat parameter vector.
    fn backward_batch(&self, z: ArrayView2<T>, upstream: ArrayView2<T>) -> Result<Array1<T>>;

    fn params(&self) -> Array1<T>;
    fn set_params(&mut self, theta: ArrayView1<T>) -> Result<()>;

    fn n_params(&self) -> usize {
        self.params().len()
    }

    /// Projects onto the constraint set, if the encoder carries one.
    fn project(&mut self) -> Result<()> {
        Ok(())
    }

    fn forward(&self, z: ArrayView1<T>) -> Result<Array1<T>> {
        let batch = z.insert_axis(Axis(0));
        Ok(self.forward_batch(batch)?.row(0).to_owned())
    }

    fn checkpoint(&self) -> Checkpoint;
}

fn check_input<T>(z: &ArrayView2<T>, d: usize) -> Result<()> {
    if z.ncols() != d {
        return argument(format!(
            "input has {} columns, encoder expects {d}",
            z.ncols()
        ));
    }
    Ok(())
}

fn check_upstream<T>(z: &ArrayView2<T>, g: &ArrayView2<T>, p: usize) -> Result<()> {
    if g.dim() != (z.nrows(), p) {
        return argument(format!(
            "upstream has shape {:?}, expected ({}, {p})",
            g.dim(),
            z.nrows()
        ));
    }
    Ok(())
}

fn uniform_matrix<T: Real, R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Array2<T> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::lit(rng.random_range(-a..a)))
}

fn check_len<T>(theta: &ArrayView1<T>, n: usize) -> Result<()> {
    if theta.len() != n {
        return argument(format!("expected {n} parameters, got {}", theta.len()));
    }
    Ok(())
}

fn take<T: Real>(theta: &ArrayView1<T>, offset: &mut usize, shape: (usize, usize)) -> Array2<T> {
    let n = shape.0 * shape.1;
    let block = theta.slice(s![*offset..*offset + n]).to_owned();
    *offset += n;
    block
        .into_shape_with_order(shape)
        .expect("block length matches shape")
}

/// `W2 relu(W1 z + b1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
}

impl<T: Real> MlpEncoder<T> {
    pub fn new(w1: Array2<T>, b1: Array1<T>, w2: Array2<T>) -> Result<Self> {
        if b1.len() != w1.nrows() || w2.ncols() != w1.nrows() {
            return argument("inconsistent MLP layer shapes");
        }
        Ok(Self { w1, b1, w2 })
    }

    pub fn random<R: Rng>(rng: &mut R, d: usize, hidden: usize, p: usize) -> Self {
        Self {
            w1: uniform_matrix(rng, hidden, d, d),
            b1: Array1::zeros(hidden),
            w2: uniform_matrix(rng, p, hidden, hidden),
        }
    }

    pub fn zeros(d: usize, hidden: usize, p: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, d)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((p, hidden)),
        }
    }

    fn preactivation(&self, z: ArrayView2<T>) -> Array2<T> {
        z.dot(&self.w1.t()) + &self.b1
    }
}

impl<T: Real> Encoder<T> for MlpEncoder<T> {
    fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    fn forward_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        check_input(&z, self.input_dim())?;
        let h = self.preactivation(z).mapv(|v| v.max(T::zero()));
        Ok(h.dot(&self.w2.t()))
    }

    fn backward_batch(&self, z: ArrayView2<T>, upstream: ArrayView2<T>) -> Result<Array1<T>> {
        check_input(&z, self.input_dim())?;
        check_upstream(&z, &upstream, self.output_dim())?;
        let pre = self.preactivation(z);
        let h = pre.mapv(|v| v.max(T::zero()));
        let dw2 = upstream.t().dot(&h);
        let mut dh = upstream.dot(&self.w2);
        // subgradient 0 at the kink
        dh.zip_mut_with(&pre, |g, &a| {
            if a <= T::zero() {
                *g = T::zero();
            }
        });
        let dw1 = dh.t().dot(&z);
        let db1 = dh.sum_axis(Axis(0));
        Ok(dw1
            .iter()
            .chain(db1.iter())
            .chain(dw2.iter())
            .copied()
            .collect())
    }

    fn params(&self) -> Array1<T> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .copied()
            .collect()
    }

    fn set_params(&mut self, theta: ArrayView1<T>) -> Result<()> {
        check_len(&theta, self.w1.len() + self.b1.len() + self.w2.len())?;
        let mut off = 0;
        self.w1 = take(&theta, &mut off, self.w1.dim());
        self.b1 = take(&theta, &mut off, (1, self.b1.len())).remove_axis(Axis(0));
        self.w2 = take(&theta, &mut off, self.w2.dim());
        Ok(())
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_blocks(
            "mlp",
            vec![
                (vec![self.w1.nrows(), self.w1.ncols()], flat(self.w1.iter())),
                (vec![self.b1.len()], flat(self.b1.iter())),
                (vec![self.w2.nrows(), self.w2.ncols()], flat(self.w2.iter())),
            ],
            None,
        )
    }
}

/// `W z` with an optional operator-norm bound.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEncoder<T> {
    pub w: Array2<T>,
    pub bound: Option<T>,
}

impl<T: Real> LinearEncoder<T> {
    pub fn new(w: Array2<T>, bound: Option<T>) -> Result<Self> {
        if let Some(b) = bound {
            if !(b > T::zero()) {
                return argument("operator-norm bound must be positive");
            }
        }
        Ok(Self { w, bound })
    }

    pub fn random<R: Rng>(rng: &mut R, d: usize, p: usize, bound: Option<T>) -> Result<Self> {
        let mut e = Self::new(uniform_matrix(rng, p, d, d), bound)?;
        e.project()?;
        Ok(e)
    }
}

impl<T: Real> Encoder<T> for LinearEncoder<T> {
    fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    fn forward_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        check_input(&z, self.input_dim())?;
        Ok(z.dot(&self.w.t()))
    }

    fn backward_batch(&self, z: ArrayView2<T>, upstream: ArrayView2<T>) -> Result<Array1<T>> {
        check_input(&z, self.input_dim())?;
        check_upstream(&z, &upstream, self.output_dim())?;
        Ok(upstream.t().dot(&z).iter().copied().collect())
    }

    fn params(&self) -> Array1<T> {
        self.w.iter().copied().collect()
    }

    fn set_params(&mut self, theta: ArrayView1<T>) -> Result<()> {
        check_len(&theta, self.w.len())?;
        let mut off = 0;
        self.w = take(&theta, &mut off, self.w.dim());
        Ok(())
    }

    fn project(&mut self) -> Result<()> {
        if let Some(b) = self.bound {
            self.w = linalg::clip_singular_values(self.w.view(), b)?;
        }
        Ok(())
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_blocks(
            "linear",
            vec![(vec![self.w.nrows(), self.w.ncols()], flat(self.w.iter()))],
            self.bound.map(Real::as_f64),
        )
    }
}

/// One-hot input `z` over `[S]` mapped to `((W z)^T, w z^T)^T` in `R^{M+S}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugLinearEncoder<T> {
    /// `M x S`.
    pub w: Array2<T>,
    pub scale: T,
    pub bound: Option<T>,
}

impl<T: Real> AugLinearEncoder<T> {
    pub fn new(w: Array2<T>, scale: T, bound: Option<T>) -> Result<Self> {
        if let Some(b) = bound {
            if !(b > T::zero()) {
                return argument("norm bound must be positive");
            }
        }
        Ok(Self { w, scale, bound })
    }

    pub fn random<R: Rng>(rng: &mut R, m: usize, s: usize, bound: Option<T>) -> Result<Self> {
        let mut e = Self::new(uniform_matrix(rng, m, s, s), T::one(), bound)?;
        e.project()?;
        Ok(e)
    }

    pub fn n_topics(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_words(&self) -> usize {
        self.w.ncols()
    }

    /// Features of word `s` without going through a one-hot vector.
    pub fn features_of(&self, s: usize) -> Array1<T> {
        let mut out = Array1::zeros(self.output_dim());
        out.slice_mut(s![..self.n_topics()])
            .assign(&self.w.column(s));
        out[self.n_topics() + s] = self.scale;
        out
    }

    fn word_indices(&self, z: &ArrayView2<T>) -> Result<Vec<usize>> {
        check_input(z, self.n_words())?;
        z.rows()
            .into_iter()
            .map(|row| {
                let mut hot = None;
                for (i, &v) in row.iter().enumerate() {
                    if v == T::one() && hot.is_none() {
                        hot = Some(i);
                    } else if v != T::zero() {
                        return argument("input row is not one-hot");
                    }
                }
                hot.ok_or_else(|| Error::Argument("input row is all zeros".into()))
            })
            .collect()
    }
}

impl<T: Real> Encoder<T> for AugLinearEncoder<T> {
    fn input_dim(&self) -> usize {
        self.n_words()
    }

    fn output_dim(&self) -> usize {
        self.n_topics() + self.n_words()
    }

    fn forward_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        let idx = self.word_indices(&z)?;
        let mut out = Array2::zeros((idx.len(), self.output_dim()));
        for (mut row, &s) in out.rows_mut().into_iter().zip(&idx) {
            row.assign(&self.features_of(s));
        }
        Ok(out)
    }

    fn backward_batch(&self, z: ArrayView2<T>, upstream: ArrayView2<T>) -> Result<Array1<T>> {
        let idx = self.word_indices(&z)?;
        check_upstream(&z, &upstream, self.output_dim())?;
        let m = self.n_topics();
        let mut dw = Array2::<T>::zeros(self.w.dim());
        let mut dscale = T::zero();
        for (g, &s) in upstream.rows().into_iter().zip(&idx) {
            let mut col = dw.column_mut(s);
            col += &g.slice(s![..m]);
            dscale += g[m + s];
        }
        Ok(dw.iter().copied().chain(std::iter::once(dscale)).collect())
    }

    fn params(&self) -> Array1<T> {
        self.w
            .iter()
            .copied()
            .chain(std::iter::once(self.scale))
            .collect()
    }

    fn set_params(&mut self, theta: ArrayView1<T>) -> Result<()> {
        check_len(&theta, self.w.len() + 1)?;
        let mut off = 0;
        self.w = take(&theta, &mut off, self.w.dim());
        self.scale = theta[off];
        Ok(())
    }

    /// Rescales every column of `W` to norm at most `B_W` (so that
    /// `sup_z ||W z||_2 <= B_W` over one-hot `z`) and clips `|w| <= sqrt(S) B_W`.
    fn project(&mut self) -> Result<()> {
        if let Some(b) = self.bound {
            for mut col in self.w.columns_mut() {
                let norm = col.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > b {
                    col.mapv_inplace(|v| v * b / norm);
                }
            }
            let cap = T::from_usize_lossy(self.n_words()).sqrt() * b;
            self.scale = self.scale.max(-cap).min(cap);
        }
        Ok(())
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_blocks(
            "aug_linear",
            vec![
                (vec![self.w.nrows(), self.w.ncols()], flat(self.w.iter())),
                (vec![1], flat(std::slice::from_ref(&self.scale).iter())),
            ],
            self.bound.map(Real::as_f64),
        )
    }
}

/// `f(z) = z`; the raw-feature baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityEncoder {
    pub dim: usize,
}

impl<T: Real> Encoder<T> for IdentityEncoder {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn forward_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        check_input(&z, self.dim)?;
        Ok(z.to_owned())
    }

    fn backward_batch(&self, z: ArrayView2<T>, upstream: ArrayView2<T>) -> Result<Array1<T>> {
        check_input(&z, self.dim)?;
        check_upstream(&z, &upstream, self.dim)?;
        Ok(Array1::zeros(0))
    }

    fn params(&self) -> Array1<T> {
        Array1::zeros(0)
    }

    fn set_params(&mut self, theta: ArrayView1<T>) -> Result<()> {
        check_len(&theta, 0)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "identity".into(),
            shapes: vec![vec![self.dim]],
            data: vec![Vec::new()],
            bound: None,
        }
    }
}

fn flat<'a, T: Real>(it: impl Iterator<Item = &'a T>) -> Vec<f64> {
    it.map(|v| v.as_f64()).collect()
}

/// JSON checkpoint `{"type", "shapes", "data"}` with one flat row-major array
/// per parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(rename = "type")]
    pub kind: String,
    pub shapes: Vec<Vec<usize>>,
    pub data: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

impl Checkpoint {
    fn from_blocks(kind: &str, blocks: Vec<(Vec<usize>, Vec<f64>)>, bound: Option<f64>) -> Self {
        let (shapes, data) = blocks.into_iter().unzip();
        Self {
            kind: kind.into(),
            shapes,
            data,
            bound,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    fn block<T: Real>(&self, i: usize) -> Result<Array2<T>> {
        let shape = self
            .shapes
            .get(i)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing block {i}")))?;
        let data = &self.data[i];
        let (r, c) = match shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Config("checkpoint blocks must be 1-d or 2-d".into())),
        };
        if data.len() != r * c {
            return Err(Error::Config(format!(
                "block {i} has {} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Array2::from_shape_fn((r, c), |(a, b)| {
            T::lit(data[a * c + b])
        }))
    }

    pub fn into_encoder<T: Real>(&self) -> Result<AnyEncoder<T>> {
        if self.shapes.len() != self.data.len() {
            return Err(Error::Config(
                "checkpoint shapes and data differ in length".into(),
            ));
        }
        let bound = self.bound.map(T::lit);
        match self.kind.as_str() {
            "mlp" => Ok(AnyEncoder::Mlp(MlpEncoder::new(
                self.block(0)?,
                self.block(1)?.remove_axis(Axis(0)),
                self.block(2)?,
            )?)),
            "linear" => Ok(AnyEncoder::Linear(LinearEncoder::new(
                self.block(0)?,
                bound,
            )?)),
            "aug_linear" => Ok(AnyEncoder::AugLinear(AugLinearEncoder::new(
                self.block(0)?,
                self.block::<T>(1)?[[0, 0]],
                bound,
            )?)),
            "identity" => Ok(AnyEncoder::Identity(IdentityEncoder {
                dim: self.shapes[0][0],
            })),
            other => Err(Error::Config(format!("unknown encoder type {other:?}"))),
        }
    }
}

/// Closed set of encoders for configs and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyEncoder<T> {
    Mlp(MlpEncoder<T>),
    Linear(LinearEncoder<T>),
    AugLinear(AugLinearEncoder<T>),
    Identity(IdentityEncoder),
}

macro_rules! dispatch {
    ($self:expr, $e:ident => $body:expr) => {
        match $self {
            AnyEncoder::Mlp($e) => $body,
            AnyEncoder::Linear($e) => $body,
            AnyEncoder::AugLinear($e) => $body,
            AnyEncoder::Identity($e) => $body,
        }
    };
}

impl<T: Real> Encoder<T> for AnyEncoder<T> {
    fn input_dim(&self) -> usize {
        dispatch!(self, e => Encoder::<T>::input_dim(e))
    }

    fn output_dim(&self) -> usize {
        dispatch!(self, e => Encoder::<T>::output_dim(e))
    }

    fn forward_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        dispatch!(self, e => e.forward_batch(z))
    }

    fn backward_batch(&self, z: ArrayView2<T>, upstream: ArrayView2<T>) -> Result<Array1<T>> {
        dispatch!(self, e => e.backward_batch(z, upstream))
    }

    fn params(&self) -> Array1<T> {
        dispatch!(self, e => e.params())
    }

    fn set_params(&mut self, theta: ArrayView1<T>) -> Result<()> {
        dispatch!(self, e => e.set_params(theta))
    }

    fn project(&mut self) -> Result<()> {
        dispatch!(self, e => Encoder::<T>::project(e))
    }

    fn checkpoint(&self) -> Checkpoint {
        dispatch!(self, e => Encoder::<T>::checkpoint(e))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Array1<T>,
    v: Array1<T>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(n_params: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: Array1::zeros(n_params),
            v: Array1::zeros(n_params),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Array1<T>, grads: ArrayView1<T>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return argument(format!(
                "adam state has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.t as i32);
        let c2 = T::one() - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// One optimizer step on an encoder followed by its projection.
    pub fn step_encoder<E: Encoder<T> + ?Sized>(
        &mut self,
        enc: &mut E,
        grads: ArrayView1<T>,
    ) -> Result<()> {
        let mut theta = enc.params();
        self.step(&mut theta, grads)?;
        enc.set_params(theta.view())?;
        enc.project()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `backward_batch` against `sum(G * forward)`.
    fn max_rel_grad_error<E: Encoder<f64> + Clone>(
        enc: &E,
        z: &Array2<f64>,
        g: &Array2<f64>,
    ) -> f64 {
        let analytic = enc.backward_batch(z.view(), g.view()).unwrap();
        let theta = enc.params();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let mut e = enc.clone();
            let mut t = theta.clone();
            t[i] += h;
            e.set_params(t.view()).unwrap();
            let up = (&e.forward_batch(z.view()).unwrap() * g).sum();
            t[i] -= 2.0 * h;
            e.set_params(t.view()).unwrap();
            let dn = (&e.forward_batch(z.view()).unwrap() * g).sum();
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        use rand_distr::{Distribution, StandardNormal};
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    fn one_hot(idx: &[usize], s: usize) -> Array2<f64> {
        let mut z = Array2::zeros((idx.len(), s));
        for (r, &i) in idx.iter().enumerate() {
            z[[r, i]] = 1.0;
        }
        z
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let z = array![[1.0, -2.0, 0.5]];
        let mlp = MlpEncoder::<f64>::zeros(3, 4, 2);
        assert_eq!(
            mlp.forward_batch(z.view()).unwrap(),
            Array2::<f64>::zeros((1, 2))
        );
        let lin = LinearEncoder::new(Array2::<f64>::zeros((2, 3)), None).unwrap();
        assert_eq!(
            lin.forward_batch(z.view()).unwrap(),
            Array2::<f64>::zeros((1, 2))
        );
    }

    #[test]
    fn identity_block_copies_leading_coordinates() {
        let lin = LinearEncoder::new(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], None).unwrap();
        let out = lin.forward(array![3.0, -1.0, 7.0].view()).unwrap();
        assert_eq!(out, array![3.0, -1.0]);
    }

    #[test]
    fn mlp_hand_forward_pass() {
        // pre = [1 - 2 + 0.5, 2 + 0 - 1] = [-0.5, 1]; relu = [0, 1]; out = 3 * 1
        let mlp = MlpEncoder::new(
            array![[1.0, 1.0], [2.0, 0.0]],
            array![0.5, -1.0],
            array![[10.0, 3.0]],
        )
        .unwrap();
        let out = mlp.forward(array![1.0, -2.0].view()).unwrap();
        assert_eq!(out, array![3.0]);
        // the dead unit passes no gradient to its weights
        let g = mlp
            .backward_batch(array![[1.0, -2.0]].view(), array![[1.0]].view())
            .unwrap();
        assert_eq!(&g.as_slice().unwrap()[..2], &[0.0, 0.0]);
        assert_eq!(g[4], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mlp = MlpEncoder::<f64>::zeros(3, 4, 2);
        assert!(mlp.forward_batch(Array2::zeros((1, 2)).view()).is_err());
        assert!(mlp
            .backward_batch(Array2::zeros((1, 3)).view(), Array2::zeros((1, 3)).view())
            .is_err());
        let aug = AugLinearEncoder::new(Array2::<f64>::zeros((2, 4)), 1.0, None).unwrap();
        assert!(aug
            .forward_batch(array![[0.5, 0.5, 0.0, 0.0]].view())
            .is_err());
        assert!(aug
            .forward_batch(array![[0.0, 0.0, 0.0, 0.0]].view())
            .is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpEncoder::<f64>::random(&mut rng, 3, 5, 2);
        let z = normal_matrix(&mut rng, 4, 3);
        let g = mlp
            .backward_batch(z.view(), Array2::zeros((4, 2)).view())
            .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let mut mlp = MlpEncoder::<f64>::random(&mut rng, 4, 6, 3);
            mlp.b1 = Array1::from_shape_fn(6, |_| rng.random_range(-0.5..0.5));
            let z = normal_matrix(&mut rng, 5, 4);
            let g = normal_matrix(&mut rng, 5, 3);
            assert!(max_rel_grad_error(&mlp, &z, &g) <= 1e-6);

            let lin = LinearEncoder::random(&mut rng, 4, 3, None).unwrap();
            assert!(max_rel_grad_error(&lin, &z, &g) <= 1e-6);

            let aug = AugLinearEncoder::<f64>::random(&mut rng, 2, 5, None).unwrap();
            let za = one_hot(&[0, 3, 3, 1], 5);
            let ga = normal_matrix(&mut rng, 4, 7);
            assert!(max_rel_grad_error(&aug, &za, &ga) <= 1e-6);
        }
    }

    #[test]
    fn linear_projection_clips_operator_norm() {
        let mut lin = LinearEncoder::new(array![[2.0, 0.0], [0.0, 0.5]], Some(1.0)).unwrap();
        lin.project().unwrap();
        assert_abs_diff_eq!(linalg::operator_norm(lin.w.view()), 1.0, epsilon = 1e-12);
        let once = lin.clone();
        lin.project().unwrap();
        assert_eq!(lin, once);
    }

    #[test]
    fn aug_projection_preserves_column_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = 5.0 * normal_matrix(&mut rng, 3, 6);
        let mut aug = AugLinearEncoder::new(w.clone(), 100.0, Some(1.0)).unwrap();
        aug.project().unwrap();
        for (before, after) in w.columns().into_iter().zip(aug.w.columns()) {
            let nb = before.dot(&before).sqrt();
            let na = after.dot(&after).sqrt();
            assert!(na <= 1.0 + 1e-12);
            assert_abs_diff_eq!(before.dot(&after) / (nb * na), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(aug.scale, 6f64.sqrt(), epsilon = 1e-12);
        let once = aug.clone();
        aug.project().unwrap();
        assert_eq!(aug, once);
        // feasible encoders are untouched
        let mut small = AugLinearEncoder::new(array![[0.1, 0.2]], 0.5, Some(1.0)).unwrap();
        let copy = small.clone();
        small.project().unwrap();
        assert_eq!(small, copy);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(3, 0.1);
        let mut p = array![1.0, -2.0, 3.0];
        adam.step(&mut p, Array1::zeros(3).view()).unwrap();
        assert_eq!(p, array![1.0, -2.0, 3.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        let mut adam = Adam::new(2, 0.01);
        let mut p = array![0.0, 0.0];
        adam.step(&mut p, array![3.0, -0.2].view()).unwrap();
        // mhat = g, vhat = g^2 after bias correction
        assert_abs_diff_eq!(p[0], -0.01 * 3.0 / (3.0 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.01 * 0.2 / (0.2 + 1e-8), epsilon = 1e-15);
        // persistent constant gradient keeps steps at the learning rate
        for _ in 0..500 {
            let before = p[0];
            adam.step(&mut p, array![3.0, -0.2].view()).unwrap();
            assert_abs_diff_eq!(before - p[0], 0.01, epsilon = 1e-6);
        }
        assert!(adam.step(&mut p, array![1.0].view()).is_err());
    }

    #[test]
    fn checkpoints_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let encoders: Vec<AnyEncoder<f64>> = vec![
            AnyEncoder::Mlp(MlpEncoder::random(&mut rng, 3, 4, 2)),
            AnyEncoder::Linear(LinearEncoder::random(&mut rng, 3, 2, Some(1.5)).unwrap()),
            AnyEncoder::AugLinear(AugLinearEncoder::random(&mut rng, 2, 5, Some(2.0)).unwrap()),
            AnyEncoder::Identity(IdentityEncoder { dim: 4 }),
        ];
        for e in encoders {
            let json = e.checkpoint().to_json().unwrap();
            let back = Checkpoint::from_json(&json)
                .unwrap()
                .into_encoder::<f64>()
                .unwrap();
            assert_eq!(back, e);
        }
        assert!(
            Checkpoint::from_json(r#"{"type":"conv","shapes":[],"data":[]}"#)
                .unwrap()
                .into_encoder::<f64>()
                .is_err()
        );
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut mlp = MlpEncoder::<f64>::random(&mut rng, 3, 4, 2);
            let mut adam = Adam::new(mlp.n_params(), 0.01);
            for _ in 0..20 {
                let z = normal_matrix(&mut rng, 6, 3);
                let g = normal_matrix(&mut rng, 6, 2);
                let grad = mlp.backward_batch(z.view(), g.view()).unwrap();
                adam.step_encoder(&mut mlp, grad.view()).unwrap();
            }
            mlp.params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn f32_forward_matches_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m64 = MlpEncoder::<f64>::random(&mut rng, 3, 4, 2);
        let m32 = MlpEncoder::new(
            m64.w1.mapv(|v| v as f32),
            m64.b1.mapv(|v| v as f32),
            m64.w2.mapv(|v| v as f32),
        )
        .unwrap();
        let z = array![[0.3, -1.2, 0.8]];
        let a = m64.forward_batch(z.view()).unwrap();
        let b = m32.forward_batch(z.mapv(|v| v as f32).view()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn linear_projection_is_idempotent(vals in proptest::collection::vec(-5.0f64..5.0, 6), b in 0.1f64..3.0) {
            let w = Array2::from_shape_vec((2, 3), vals).unwrap();
            let mut e = LinearEncoder::new(w, Some(b)).unwrap();
            e.project().unwrap();
            prop_assert!(linalg::operator_norm(e.w.view()) <= b + 1e-9);
            let once = e.w.clone();
            e.project().unwrap();
            for (x, y) in once.iter().zip(e.w.iter()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
