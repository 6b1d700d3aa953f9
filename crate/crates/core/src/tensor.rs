//! Dense row-major tensors over a handful of element types.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// On-disk element type code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I32 = 2,
    Bool = 3,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I32),
            3 => Some(DType::Bool),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::Bool => 1,
        }
    }
}

/// A storable tensor element.
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);

    /// `bytes` has exactly `DTYPE.size()` entries.
    fn read_le(bytes: &[u8]) -> Result<Self>;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Result<Self> {
        Ok(f32::from_le_bytes(bytes.try_into().expect("4 bytes")))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Result<Self> {
        Ok(f64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }
}

impl Element for i32 {
    const DTYPE: DType = DType::I32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Result<Self> {
        Ok(i32::from_le_bytes(bytes.try_into().expect("4 bytes")))
    }
}

impl Element for bool {
    const DTYPE: DType = DType::Bool;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }
    fn read_le(bytes: &[u8]) -> Result<Self> {
        match bytes[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("boolean byte {b} is neither 0 nor 1"))),
        }
    }
}

/// Floating point element used by every numerical routine.
pub trait Real:
    Element
    + Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + PartialOrd
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::default())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major flat offset of a full index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| {
                debug_assert!(i < s);
                acc * s + i
            })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Size of the trailing dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    pub fn expect_ndim(&self, ndim: usize, what: &str) -> Result<()> {
        if self.shape.len() != ndim {
            return Err(Error::Shape(format!(
                "{what}: expected {ndim} dimensions, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::lit(v.as_f64()))
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Replace every last-dimension vector `v` by `v / max(|v|, eps)`.
pub fn l2_normalize_lastdim<T: Real>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = x.clone();
    if d == 0 {
        return out;
    }
    for v in out.data.chunks_mut(d) {
        let n = norm(v).max(eps);
        v.iter_mut().for_each(|e| *e /= n);
    }
    out
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Normalisation epsilon shared by queries, keys and `l2_normalize_lastdim`.
pub const NORM_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_three_four() {
        let x = Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap();
        let y = l2_normalize_lastdim(&x, 1e-12);
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_vector_is_preserved() {
        let x = Tensor::from_vec(&[2], vec![0.0f64, 0.0]).unwrap();
        let y = l2_normalize_lastdim(&x, 1e-12);
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_random_norms_are_one() {
        let mut rng = crate::rng::Rng::new(3, 0);
        let x = Tensor::from_fn(&[4, 4, 8], |_| rng.uniform(-2.0, 2.0));
        let y = l2_normalize_lastdim(&x, 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0f64;
                for k in 0..8 {
                    let v = y.get(&[i, j, k]);
                    s += v * v;
                }
                assert!((s.sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<i32>::zeros(&[2, 3, 4]);
        assert_eq!(t.offset(&[1, 2, 3]), (1 * 3 + 2) * 4 + 3);
        assert!(Tensor::from_vec(&[2, 2], vec![1i32; 3]).is_err());
    }
}
