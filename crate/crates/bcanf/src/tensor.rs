//! Dense 4-D tensors in NCHW layout, the universal signal carrier for
//! frames, flows, features, and latents.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape as (batch, channels, height, width).
pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    /// Scalar tensor of shape [1,1,1,1].
    pub fn scalar(v: T) -> Self {
        Tensor { shape: [1, 1, 1, 1], data: vec![v] }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "zip_map on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_assign on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    /// Sum of all elements, accumulated in a fixed order.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0f64;
        for &v in &self.data {
            acc += v.as_f64().abs();
        }
        acc / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        let mut m = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let d = (a.as_f64() - b.as_f64()).abs();
            if d > m {
                m = d;
            }
        }
        m
    }

    /// Hard failure on NaN/Inf; used by the debug verification paths.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::NonFinite(what.to_string()));
            }
        }
        Ok(())
    }

    /// Convert element type; used to move data between precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Slices the channel dimension, copying out `[start, start+len)`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if start + len > c {
        return Err(Error::ShapeMismatch(format!(
            "channel slice {}..{} out of {} channels",
            start,
            start + len,
            c
        )));
    }
    let mut out = Tensor::zeros([n, len, h, w]);
    for ni in 0..n {
        for ci in 0..len {
            let src = x.index(ni, start + ci, 0, 0);
            let dst = out.index(ni, ci, 0, 0);
            out.data_mut()[dst..dst + h * w].copy_from_slice(&x.data()[src..src + h * w]);
        }
    }
    Ok(out)
}

/// Concatenates tensors along the channel dimension.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Contract("concat of zero tensors".into()));
    }
    let [n, _, h, w] = parts[0].shape();
    let mut total_c = 0;
    for p in parts {
        let s = p.shape();
        if s[0] != n || s[2] != h || s[3] != w {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels {:?} vs {:?}",
                parts[0].shape(),
                s
            )));
        }
        total_c += s[1];
    }
    let mut out = Tensor::zeros([n, total_c, h, w]);
    let mut c0 = 0;
    for p in parts {
        let pc = p.channels();
        for ni in 0..n {
            for ci in 0..pc {
                let src = p.index(ni, ci, 0, 0);
                let dst = out.index(ni, c0 + ci, 0, 0);
                out.data_mut()[dst..dst + h * w].copy_from_slice(&p.data()[src..src + h * w]);
            }
        }
        c0 += pc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::<f32>::new([1, 2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(0, 1, 1, 1), 10.0);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let a = Tensor::<f32>::full([1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full([1, 3, 2, 2], 2.0);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [1, 5, 2, 2]);
        let back = slice_channels(&cat, 2, 3).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn check_finite_flags_nan() {
        let mut t = Tensor::<f32>::zeros([1, 1, 1, 2]);
        t.data_mut()[1] = f32::NAN;
        assert!(t.check_finite("t").is_err());
    }
}
