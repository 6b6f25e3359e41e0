//! Dense tensors over a generic scalar, plus forward-mode dual numbers.
//!
//! Every network in this crate runs its forward *and* backward pass generically
//! over [`Scalar`]. Instantiated with `f64` that yields ordinary values and
//! first-order gradients; instantiated with [`Dual`] the same code propagates a
//! directional derivative alongside each value, so running a backward pass on
//! dual numbers produces exact Hessian-vector products (forward-over-reverse).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Numeric scalar the tape can differentiate over.
pub trait Scalar:
    Copy
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    /// Real (value) part.
    fn re(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    /// Round to nearest integer with a straight-through derivative.
    fn round_st(self) -> Self;

    /// Branch on real parts; ties keep `self`.
    fn max_by_re(self, other: Self) -> Self {
        if self.re() >= other.re() {
            self
        } else {
            other
        }
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn round_st(self) -> Self {
        self.round()
    }
}

/// First-order dual number: value plus one directional derivative.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }
    pub fn constant(re: f64) -> Self {
        Dual { re, du: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}
impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}
impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}
impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.re / o.re, (self.du * o.re - self.re * o.du) / (o.re * o.re))
    }
}
impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}
impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.du += o.du;
    }
}
impl PartialOrd for Dual {
    fn partial_cmp(&self, o: &Dual) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&o.re)
    }
}

impl Scalar for Dual {
    const ZERO: Self = Dual { re: 0.0, du: 0.0 };
    const ONE: Self = Dual { re: 1.0, du: 0.0 };

    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.du / (2.0 * s))
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
    #[inline]
    fn abs(self) -> Self {
        if self.re >= 0.0 {
            self
        } else {
            -self
        }
    }
    #[inline]
    fn round_st(self) -> Self {
        Dual::new(self.re.round(), self.du)
    }
}

/// Dense row-major tensor. Shape `[]` is a scalar, `[c,h,w]` an image/feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data length disagree"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![S::ZERO; shape.iter().product()] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_f64_slice(shape: &[usize], vals: &[f64]) -> Self {
        Tensor::new(shape.to_vec(), vals.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[S] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// The single element of a shape-`[]` tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v.re()).collect() }
    }

    /// Index helper for `[c,h,w]` tensors.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> S {
        let (_, h, w) = self.dims3();
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

impl Tensor<f64> {
    pub fn from_fn3(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Tensor { shape: vec![c, h, w], data }
    }

    pub fn max_abs_diff(&self, other: &Tensor<f64>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-exact equality, the contract used by freezing/checkpoint tests.
    pub fn bitwise_eq(&self, other: &Tensor<f64>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Lift into any scalar type as constants.
    pub fn lift<S: Scalar>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| S::from_f64(v)).collect(),
        }
    }
}

/// A face image: rank-3 `[3,h,w]` tensor with values in `[-1, 1]`.
pub type ImageTensor = Tensor<f64>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_arithmetic_chain_rule() {
        // d/dx (x^2 * exp(x)) at x=1.3 is (2x + x^2) exp(x)
        let x = Dual::new(1.3, 1.0);
        let y = x * x * x.exp();
        let expect = (2.0 * 1.3 + 1.3 * 1.3) * 1.3f64.exp();
        assert!((y.du - expect).abs() < 1e-12);
    }

    #[test]
    fn dual_div_and_sqrt() {
        let x = Dual::new(2.0, 1.0);
        let y = Dual::constant(4.0) / x; // 4/x, d = -4/x^2 = -1
        assert!((y.du + 1.0).abs() < 1e-12);
        let z = x.sqrt(); // d = 1/(2 sqrt 2)
        assert!((z.du - 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn round_straight_through_keeps_derivative() {
        let x = Dual::new(1.7, 3.0);
        let y = x.round_st();
        assert_eq!(y.re, 2.0);
        assert_eq!(y.du, 3.0);
    }

    #[test]
    fn tensor_indexing() {
        let t = Tensor::<f64>::from_fn3(2, 2, 3, |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(t.at3(1, 1, 2), 112.0);
        assert_eq!(t.shape(), &[2, 2, 3]);
    }

    #[test]
    fn bitwise_eq_detects_single_bit() {
        let a = Tensor::new(vec![2], vec![1.0f64, 2.0]);
        let mut b = a.clone();
        assert!(a.bitwise_eq(&b));
        b.data_mut()[1] = f64::from_bits(2.0f64.to_bits() + 1);
        assert!(!a.bitwise_eq(&b));
    }
}
