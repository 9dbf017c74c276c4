//! Dense NCHW tensors of `f64`.
//!
//! Every activation in the network is a batch of feature maps, so the shape is
//! fixed at rank 4. Per-sample ("rank-3") views are plain slices into the batch.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    /// Height and width.
    #[inline]
    pub fn spatial(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }
    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }
    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copies sample `n` out as a batch of one.
    pub fn select(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor { shape: [1, c, h, w], data: self.sample(n).to_vec() }
    }

    /// Concatenates along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::Shape(format!("cannot stack {:?} with {:?}", p.shape, first.shape)));
            }
            data.extend_from_slice(&p.data);
            n += p.shape[0];
        }
        Ok(Tensor { shape: [n, c, h, w], data })
    }

    /// Concatenates along the channel axis.
    pub fn cat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.n() != b.n() || a.spatial() != b.spatial() {
            return Err(Error::Shape(format!("cannot concatenate {:?} and {:?}", a.shape, b.shape)));
        }
        let (sa, sb) = (a.sample_len(), b.sample_len());
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for n in 0..a.n() {
            data.extend_from_slice(&a.data[n * sa..(n + 1) * sa]);
            data.extend_from_slice(&b.data[n * sb..(n + 1) * sb]);
        }
        Ok(Tensor { shape: [a.n(), a.c() + b.c(), a.h(), a.w()], data })
    }

    /// Inverse of [`Tensor::cat_channels`]: splits off the first `ca` channels.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let [n, c, h, w] = self.shape;
        let plane = h * w;
        let mut a = Vec::with_capacity(n * ca * plane);
        let mut b = Vec::with_capacity(n * (c - ca) * plane);
        for s in self.data.chunks(c * plane) {
            a.extend_from_slice(&s[..ca * plane]);
            b.extend_from_slice(&s[ca * plane..]);
        }
        (Tensor { shape: [n, ca, h, w], data: a }, Tensor { shape: [n, c - ca, h, w], data: b })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: [usize; 4]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("expected shape {:?}, found {:?}", shape, self.shape)));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}
