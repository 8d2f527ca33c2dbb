use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floating-point type the aggregation head runs in.
pub trait Scalar: Float + Sum + Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from(x).expect("representable")
}

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    /// Linear test mode.
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(0.2)
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, h: T) -> T {
        match self {
            Activation::LeakyRelu(s) => {
                if h > T::zero() {
                    h
                } else {
                    h * lit(s)
                }
            }
            Activation::Relu => {
                if h > T::zero() {
                    h
                } else {
                    T::zero()
                }
            }
            Activation::Identity => h,
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, h: T) -> T {
        match self {
            Activation::LeakyRelu(s) => {
                if h > T::zero() {
                    T::one()
                } else {
                    lit(s)
                }
            }
            Activation::Relu => {
                if h > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Dense layer `y = W x + b`, `W` stored row-major as `out x inp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub inp: usize,
    pub out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            inp,
            out,
            weight: vec![T::zero(); inp * out],
            bias: vec![T::zero(); out],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Self::zeros(n, n);
        for i in 0..n {
            l.weight[i * n + i] = T::one();
        }
        l
    }

    /// Uniform in `±1/sqrt(inp)` for weights and biases.
    pub fn random(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self::random_scaled(inp, out, 1.0, rng)
    }

    /// Weights uniform in `±gain/sqrt(inp)`, biases in `±1/sqrt(inp)`.
    pub fn random_scaled(inp: usize, out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = (0..inp * out)
            .map(|_| lit::<T>(gain * rng.gen_range(-bound..bound)))
            .collect();
        let bias = (0..out).map(|_| lit::<T>(rng.gen_range(-bound..bound))).collect();
        Self {
            inp,
            out,
            weight,
            bias,
        }
    }

    #[inline]
    pub fn forward(&self, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.inp);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inp..(o + 1) * self.inp];
            let mut acc = self.bias[o];
            for (w, xi) in row.iter().zip(x) {
                acc = acc + *w * *xi;
            }
            *yo = acc;
        }
    }

    /// Accumulates parameter gradients into `grad` and, if requested, the
    /// input gradient into `dx`.
    #[inline]
    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Linear<T>, dx: Option<&mut [T]>) {
        for (o, &g) in dy.iter().enumerate() {
            grad.bias[o] = grad.bias[o] + g;
            let row = &mut grad.weight[o * self.inp..(o + 1) * self.inp];
            for (w, xi) in row.iter_mut().zip(x) {
                *w = *w + g * *xi;
            }
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                let row = &self.weight[o * self.inp..(o + 1) * self.inp];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d = *d + g * *w;
                }
            }
        }
    }

    /// Forward-mode tangent: `W dx` (the bias drops out).
    #[inline]
    pub fn tangent(&self, dx: &[T], dy: &mut [T]) {
        for (o, yo) in dy.iter_mut().enumerate() {
            let row = &self.weight[o * self.inp..(o + 1) * self.inp];
            *yo = row.iter().zip(dx).map(|(w, x)| *w * *x).sum();
        }
    }
}

/// Two-layer perceptron `l2(act(l1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
    pub activation: Activation,
}

impl<T: Scalar> Mlp<T> {
    pub fn random(inp: usize, hidden: usize, out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::random(inp, hidden, rng),
            l2: Linear::random(hidden, out, rng),
            activation,
        }
    }

    /// As [`Mlp::random`] with weights scaled by `gain`.
    pub fn random_scaled(
        inp: usize,
        hidden: usize,
        out: usize,
        gain: f64,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            l1: Linear::random_scaled(inp, hidden, gain, rng),
            l2: Linear::random_scaled(hidden, out, gain, rng),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            l1: Linear::zeros(self.l1.inp, self.l1.out),
            l2: Linear::zeros(self.l2.inp, self.l2.out),
            activation: self.activation,
        }
    }

    pub fn inp(&self) -> usize {
        self.l1.inp
    }

    pub fn hidden(&self) -> usize {
        self.l1.out
    }

    pub fn out(&self) -> usize {
        self.l2.out
    }

    /// Writes the hidden pre-activation into `h` and the output into `y`.
    #[inline]
    pub fn forward(&self, x: &[T], h: &mut [T], y: &mut [T]) {
        self.l1.forward(x, h);
        let a: Vec<T> = h.iter().map(|&v| self.activation.apply(v)).collect();
        self.l2.forward(&a, y);
    }

    pub fn eval(&self, x: &[T]) -> Vec<T> {
        let mut h = vec![T::zero(); self.hidden()];
        let mut y = vec![T::zero(); self.out()];
        self.forward(x, &mut h, &mut y);
        y
    }

    #[inline]
    pub fn backward(&self, x: &[T], h: &[T], dy: &[T], grad: &mut Mlp<T>, dx: Option<&mut [T]>) {
        let a: Vec<T> = h.iter().map(|&v| self.activation.apply(v)).collect();
        let mut da = vec![T::zero(); h.len()];
        self.l2.backward(&a, dy, &mut grad.l2, Some(&mut da));
        for (d, &v) in da.iter_mut().zip(h) {
            *d = *d * self.activation.derivative(v);
        }
        self.l1.backward(x, &da, &mut grad.l1, dx);
    }

    /// Jacobian-vector product at the point whose hidden pre-activation is `h`.
    #[inline]
    pub fn tangent(&self, h: &[T], dx: &[T], dy: &mut [T]) {
        let mut dh = vec![T::zero(); h.len()];
        self.l1.tangent(dx, &mut dh);
        for (d, &v) in dh.iter_mut().zip(h) {
            *d = *d * self.activation.derivative(v);
        }
        self.l2.tangent(&dh, dy);
    }

    pub(crate) fn tensors(&self) -> [&Vec<T>; 4] {
        [&self.l1.weight, &self.l1.bias, &self.l2.weight, &self.l2.bias]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Vec<T>; 4] {
        [
            &mut self.l1.weight,
            &mut self.l1.bias,
            &mut self.l2.weight,
            &mut self.l2.bias,
        ]
    }

    pub(crate) fn shapes(&self) -> [Vec<usize>; 4] {
        [
            vec![self.l1.out, self.l1.inp],
            vec![self.l1.out],
            vec![self.l2.out, self.l2.inp],
            vec![self.l2.out],
        ]
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from(*x).expect("castable")).collect();
        Mlp {
            l1: Linear {
                inp: self.l1.inp,
                out: self.l1.out,
                weight: c(&self.l1.weight),
                bias: c(&self.l1.bias),
            },
            l2: Linear {
                inp: self.l2.inp,
                out: self.l2.out,
                weight: c(&self.l2.weight),
                bias: c(&self.l2.bias),
            },
            activation: self.activation,
        }
    }
}
