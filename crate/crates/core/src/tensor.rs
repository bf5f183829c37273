//! Dense row-major tensors.
//!
//! Images and feature maps use the `[batch, channels, height, width]` layout.
//! Parameters may have any rank (convolution biases are rank 1).

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        ensure!(
            expected == data.len(),
            Dimension,
            "shape {:?} needs {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a rank-4 tensor from a function of `(n, c, y, x)`.
    pub fn from_fn4(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// `(n, c, h, w)` of a rank-4 tensor.
    ///
    /// Panics on other ranks; public entry points validate with [`Tensor::expect_rank4`].
    #[inline]
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn expect_rank4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        ensure!(
            self.shape.len() == 4,
            Dimension,
            "{what} must be [batch, channels, height, width], got {:?}",
            self.shape
        );
        Ok(self.dims4())
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, ch, h, w) = self.dims4();
        self.data[((n * ch + c) * h + y) * w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let (_, ch, h, w) = self.dims4();
        &mut self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        ensure!(
            expected == self.data.len(),
            Dimension,
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Dimension,
            "{op}: shape {:?} does not match {:?}",
            self.shape,
            other.shape
        );
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, k: T) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.data.len())
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    /// Copy of batch entry `index`, keeping a leading batch axis of 1.
    pub fn batch_item(&self, index: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(index < n);
        let plane = c * h * w;
        Self {
            shape: vec![1, c, h, w],
            data: self.data[index * plane..(index + 1) * plane].to_vec(),
        }
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack an empty list".into()))?;
        let (_, c, h, w) = first.expect_rank4("stack item")?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for item in items {
            let (bn, bc, bh, bw) = item.expect_rank4("stack item")?;
            ensure!(
                (bc, bh, bw) == (c, h, w),
                Dimension,
                "stack: item {:?} does not match {:?}",
                item.shape,
                first.shape
            );
            n += bn;
            data.extend_from_slice(&item.data);
        }
        Ok(Self {
            shape: vec![n, c, h, w],
            data,
        })
    }

    /// Channel `c` of every batch entry as a `[n, 1, h, w]` tensor.
    pub fn channel(&self, c: usize) -> Self {
        let (n, ch, h, w) = self.dims4();
        assert!(c < ch);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * plane);
        for b in 0..n {
            let start = (b * ch + c) * plane;
            data.extend_from_slice(&self.data[start..start + plane]);
        }
        Self {
            shape: vec![n, 1, h, w],
            data,
        }
    }

    /// Bilinear resampling of every channel with half-pixel centers.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        let (n, c, h, w) = self.dims4();
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let sample = |pos: usize, src: usize, dst: usize| -> (usize, usize, T) {
            let f = ((pos as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
            let lo = (f.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, T::of(f - lo as f64))
        };
        Self::from_fn4([n, c, out_h, out_w], |b, ch, y, x| {
            let (y0, y1, fy) = sample(y, h, out_h);
            let (x0, x1, fx) = sample(x, w, out_w);
            let top = self.at(b, ch, y0, x0) * (T::one() - fx) + self.at(b, ch, y0, x1) * fx;
            let bottom = self.at(b, ch, y1, x0) * (T::one() - fx) + self.at(b, ch, y1, x1) * fx;
            top * (T::one() - fy) + bottom * fy
        })
    }
}
