//! Dense NCHW `f32` tensors.

use std::fmt;

/// Tensor shape, always `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics when `data.len()` does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec([1, 1, 1, 1], vec![value])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Elements in one batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// Elements in one channel plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip_map");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy of batch items `start..start + len`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Tensor {
        let item = self.item_len();
        assert!(start + len <= self.n(), "batch slice out of range");
        Tensor::from_vec(
            [len, self.shape[1], self.shape[2], self.shape[3]],
            self.data[start * item..(start + len) * item].to_vec(),
        )
    }

    /// Stack single-item tensors of equal shape along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of zero tensors");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::numel).sum());
        let mut n = 0;
        for t in items {
            assert_eq!([c, h, w], [t.shape[1], t.shape[2], t.shape[3]]);
            data.extend_from_slice(&t.data);
            n += t.shape[0];
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
