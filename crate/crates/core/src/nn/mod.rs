//! Minimal neural-network toolkit with hand-written backward passes.
//!
//! Every network stores its parameters as named [`Tensor`]s so optimizers,
//! checkpoints and gradient checks can treat all of them uniformly.

mod conv;
mod mlp;

pub use conv::{col2im, im2col, Conv2d, ConvTranspose2d, FeatureMap};
pub use mlp::{Linear, MlpCache, ResMlp, ResMlpConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::Real;

/// Slope of the negative half of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { name: name.into(), shape: shape.to_vec(), data: vec![T::zero(); len] }
    }

    /// Gaussian initialisation drawn in `f64`, so `f32` and `f64` networks
    /// built from the same RNG stream hold the same values up to rounding.
    pub fn normal<R: Rng>(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(name, shape);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in &mut t.data {
                *v = T::from_f64_lossy(dist.sample(rng));
            }
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// A container of trainable tensors.
pub trait Module<T: Real> {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero_all(&mut self) {
        for t in self.tensors_mut() {
            t.fill_zero();
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero_all();
        z
    }

    /// Copies values from a same-architecture module of another precision.
    fn load_from<U: Real, M: Module<U>>(&mut self, other: &M) {
        let src = other.tensors();
        let dst = self.tensors_mut();
        assert_eq!(src.len(), dst.len(), "module structure mismatch");
        for (d, s) in dst.into_iter().zip(src) {
            assert_eq!(d.shape, s.shape, "tensor {} shape mismatch", d.name);
            for (a, &b) in d.data.iter_mut().zip(&s.data) {
                *a = T::from_f64_lossy(b.to_f64_lossy());
            }
        }
    }
}

#[inline]
pub fn leaky<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::from_f64_lossy(LEAKY_SLOPE)
    }
}

pub fn leaky_inplace<T: Real>(xs: &mut [T]) {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    for x in xs {
        if *x <= T::zero() {
            *x = *x * slope;
        }
    }
}

/// Multiplies `grad` by the activation derivative, read off the activation
/// output (the sign of the output equals the sign of the pre-activation).
pub fn leaky_backward_inplace<T: Real>(grad: &mut [T], activated: &[T]) {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = *g * slope;
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
