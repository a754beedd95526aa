use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Dense `n x c x h x w` tensor, row-major in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per batch item.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?} along channels",
                a.shape(),
                b.shape()
            )));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Ok(Self { n: a.n, c: a.c + b.c, h: a.h, w: a.w, data })
    }

    /// Inverse of [`Tensor4::concat_channels`]: the first `c_first` channels and the rest.
    pub fn split_channels(&self, c_first: usize) -> (Self, Self) {
        let plane = self.plane();
        let (la, lb) = (c_first * plane, (self.c - c_first) * plane);
        let mut a = Vec::with_capacity(self.n * la);
        let mut b = Vec::with_capacity(self.n * lb);
        for i in 0..self.n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..la]);
            b.extend_from_slice(&s[la..]);
        }
        (
            Self { n: self.n, c: c_first, h: self.h, w: self.w, data: a },
            Self { n: self.n, c: self.c - c_first, h: self.h, w: self.w, data: b },
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor4::<f64>::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor4::<f64>::from_vec(2, 2, 1, 2, (0..8).map(|v| v as f64 * 10.0).collect()).unwrap();
        let cat = Tensor4::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), [2, 3, 1, 2]);
        assert_eq!(cat.sample(1), &[3.0, 4.0, 40.0, 50.0, 60.0, 70.0]);
        let (x, y) = cat.split_channels(1);
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::<f32>::from_vec(1, 2, 3, 4, vec![0.0; 23]).is_err());
    }
}
