use super::Scalar;
use crate::error::{Error, Result};

/// N×C×H×W array, sample-major then channel-major, row-major within a plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

pub type Shape = (usize, usize, usize, usize);

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        let (n, c, h, w) = shape;
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot form a {n}x{c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let (n, c, h, w) = shape;
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![T::ZERO; n * c * h * w],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> Shape {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
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

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn ensure_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {shape:?}, got {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    /// Fails on NaN/Inf. Only active in builds with debug assertions.
    pub fn check_finite(&self, after: &str) -> Result<()> {
        if cfg!(debug_assertions) && !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(after.to_string()));
        }
        Ok(())
    }
}
