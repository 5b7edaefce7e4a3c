//! Dense building blocks with hand-written backward passes.
//!
//! Everything here works on row-major `(rows, features)` matrices. Backward
//! functions accumulate parameter gradients into a caller-provided gradient
//! struct of the same shape and return the gradient with respect to the input.

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;

use crate::{Error, Result};

/// Scalar type the trainable head is generic over. Training runs in `f32`;
/// gradient checks instantiate the same code at `f64`.
pub trait Real: NdFloat + FromPrimitive + std::iter::Sum {
    fn extend_le_bytes(self, out: &mut Vec<u8>);
}

impl Real for f32 {
    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Real for f64 {
    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in target float type")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &x.t().dot(&dy);
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.t())
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.mapv(cast_scalar),
            bias: self.bias.as_ref().map(|b| b.mapv(cast_scalar)),
        }
    }
}

pub(crate) fn cast_scalar<T: Real, U: Real>(x: T) -> U {
    U::from_f64(x.to_f64().expect("finite")).expect("representable")
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let (rows, dim) = x.dim();
        let d = lit::<T>(dim as f64);
        let eps = lit::<T>(LAYER_NORM_EPS);
        let mut xhat = Array2::zeros((rows, dim));
        let mut inv_std = Array1::zeros(rows);
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            Zip::from(xhat.row_mut(r))
                .and(row)
                .for_each(|h, &v| *h = (v - mean) * inv);
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let dim = self.dim();
        let d = lit::<T>(dim as f64);
        let dxhat = &dy * &self.gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for r in 0..dy.nrows() {
            let gh = dxhat.row(r);
            let xh = cache.xhat.row(r);
            let sum_g = gh.sum();
            let sum_gx = gh.dot(&xh);
            let inv = cache.inv_std[r];
            Zip::from(dx.row_mut(r))
                .and(&gh)
                .and(&xh)
                .for_each(|o, &g, &h| *o = inv / d * (d * g - sum_g - h * sum_gx));
        }
        dx
    }

    pub fn cast<U: Real>(&self) -> LayerNorm<U> {
        LayerNorm {
            gain: self.gain.mapv(cast_scalar),
            bias: self.bias.mapv(cast_scalar),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(u: T) -> T {
    let k = lit::<T>(GELU_K);
    let c = lit::<T>(GELU_C);
    let half = lit::<T>(0.5);
    half * u * (T::one() + (k * (u + c * u * u * u)).tanh())
}

pub fn gelu_grad<T: Real>(u: T) -> T {
    let k = lit::<T>(GELU_K);
    let c = lit::<T>(GELU_C);
    let half = lit::<T>(0.5);
    let t = (k * (u + c * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * k * (T::one() + lit::<T>(3.0) * c * u * u)
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<T: Real>(scores: &mut Array2<T>) -> Result<()> {
    for mut row in scores.outer_iter_mut() {
        // `max` skips NaN, so finiteness is checked per element
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite attention logits".into()));
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if !max.is_finite() {
            return Err(Error::Numerical("non-finite attention logits".into()));
        }
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    Ok(())
}

/// Backward of a row softmax: `dS = P * (dP - rowsum(dP * P))`.
pub fn softmax_rows_backward<T: Real>(probs: ArrayView2<T>, dprobs: ArrayView2<T>) -> Array2<T> {
    let mut out = Array2::zeros(probs.raw_dim());
    for r in 0..probs.nrows() {
        let p = probs.row(r);
        let dp = dprobs.row(r);
        let inner = p.dot(&dp);
        Zip::from(out.row_mut(r))
            .and(&p)
            .and(&dp)
            .for_each(|o, &pv, &dv| *o = pv * (dv - inner));
    }
    out
}

pub fn all_finite<T: Real>(x: ArrayView2<T>) -> bool {
    x.iter().all(|v| v.is_finite())
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus<T: Real>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
