//! Dense row-major `f64` tensor, the sole numeric carrier of the crate.

use crate::error::{Error, Result};

/// N-dimensional array of `f64` in row-major order (last axis fastest).
///
/// Image-like data uses the `[height, width, channels]` layout throughout the
/// crate; label maps are `[height, width]` tensors holding integral values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Structure(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index for a `[h, w]` tensor.
    pub fn idx2(&self, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        y * self.shape[1] + x
    }

    /// Flat index for a `[h, w, c]` tensor.
    pub fn idx3(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (y * self.shape[1] + x) * self.shape[2] + c
    }

    pub fn at2(&self, y: usize, x: usize) -> f64 {
        self.data[self.idx2(y, x)]
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx3(y, x, c)]
    }

    /// Reads a `[h, w]` label map entry as a class index.
    ///
    /// Errors when the stored value is not integral or lies outside `[0, k)`.
    pub fn label_at(&self, y: usize, x: usize, k: usize) -> Result<usize> {
        let v = self.at2(y, x);
        if !v.is_finite() || v.fract() != 0.0 || v < 0.0 || v >= k as f64 {
            return Err(Error::Data(format!(
                "label {} at ({}, {}) outside [0, {})",
                v, y, x, k
            )));
        }
        Ok(v as usize)
    }

    /// Element-wise `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Structure(format!(
                "shape mismatch in add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Element-wise `self += factor * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Structure(format!(
                "shape mismatch in add_scaled: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 1), 1.0);
        assert_eq!(t.at3(0, 1, 0), 2.0);
        assert_eq!(t.at3(1, 0, 0), 6.0);
        assert_eq!(t.at3(1, 2, 1), 11.0);
    }

    #[test]
    fn label_at_validates() {
        let t = Tensor::new(vec![1, 2], vec![1.0, 2.5]).unwrap();
        assert_eq!(t.label_at(0, 0, 4).unwrap(), 1);
        assert!(t.label_at(0, 1, 4).is_err()); // non-integral
        assert!(t.label_at(0, 0, 1).is_err()); // out of range
    }
}
