use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// An `H×W×C` feature grid sampled every `stride` input pixels.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, stride: usize) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(dim_err(format!("feature map must be HxWxC, got {:?}", tensor.shape())));
        }
        Ok(Self { tensor, stride })
    }

    /// Wraps a grayscale image given as row-major intensities.
    pub fn from_gray(h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&[h, w, 1], pixels)?, 1)
    }

    pub fn h(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn c(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.h(), self.w(), self.c())
    }

    /// `(H·W)×C` view, one row per cell.
    pub fn flat(&self) -> Result<Tensor> {
        self.tensor.reshape(&[self.h() * self.w(), self.c()])
    }

    pub fn with_tensor(&self, tensor: Tensor) -> Result<Self> {
        Self::new(tensor, self.stride)
    }

    /// Position in input pixels of the center of cell `(row, col)`, as `[x, y]`
    /// with pixel `i` centered on coordinate `i`.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        cell_center(self.stride, row, col)
    }
}

pub fn cell_center(stride: usize, row: usize, col: usize) -> [f64; 2] {
    let half = (stride as f64 - 1.0) / 2.0;
    [(stride * col) as f64 + half, (stride * row) as f64 + half]
}
