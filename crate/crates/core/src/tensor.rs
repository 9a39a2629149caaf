//! Dense f64 tensors, the unit of all communication and computation.

use crate::error::{Error, Result};

/// A dense tensor of 64-bit floats with an explicit shape.
///
/// Invariant: `shape.iter().product() == data.len()`. Communication
/// operations additionally require every element to be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let volume: usize = shape.iter().product();
        if volume != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                volume,
                data.len()
            )));
        }
        Ok(Tensor { data, shape })
    }

    /// 1-d tensor from a slice.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        Tensor {
            data: if data.is_empty() { vec![0.0] } else { data },
            shape: vec![n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            data: vec![v],
            shape: vec![1],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let volume: usize = shape.iter().product::<usize>().max(1);
        Tensor {
            data: vec![0.0; volume],
            shape: if shape.is_empty() {
                vec![1]
            } else {
                shape.to_vec()
            },
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            data: vec![0.0; other.len()],
            shape: other.shape.clone(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// Byte size of the payload when serialized (8 bytes per element).
    pub fn byte_len(&self) -> usize {
        self.data.len() * 8
    }

    /// Rejects NaN/Inf entries; `name` is used in the diagnostic.
    pub fn check_finite(&self, name: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// self := self + c * other
    pub fn add_scaled(&mut self, c: f64, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn scaled(&self, c: f64) -> Tensor {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    pub fn add(&mut self, other: &Tensor) {
        self.add_scaled(1.0, other);
    }

    pub fn sub(&mut self, other: &Tensor) {
        self.add_scaled(-1.0, other);
    }

    /// Element-wise division. Errors when a divisor's magnitude is at or
    /// below `floor` (degeneracy guard for push-sum ratios).
    pub fn div_elementwise(&self, other: &Tensor, floor: f64) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(Error::Dimension("element-wise division shape mismatch".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(other.data.iter()) {
            if b.abs() <= floor {
                return Err(Error::Degeneracy(format!(
                    "division by near-zero value {b:e}"
                )));
            }
            *a /= b;
        }
        Ok(out)
    }

    pub fn fill(&mut self, v: f64) {
        for a in self.data.iter_mut() {
            *a = v;
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Serializes element data as little-endian f64 words.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8], shape: Vec<usize>) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Wire(format!(
                "payload length {} not a multiple of 8",
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(data, shape)
    }

    /// Concatenates tensors into one flat 1-d tensor (fusion buffer).
    pub fn concat(parts: &[Tensor]) -> Tensor {
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::vector(data)
    }

    /// Splits a flat tensor back into tensors with the given shapes.
    pub fn split(&self, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if total != self.len() {
            return Err(Error::Dimension(format!(
                "split shapes cover {} elements, tensor has {}",
                total,
                self.len()
            )));
        }
        let mut out = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for s in shapes {
            let vol: usize = s.iter().product();
            out.push(Tensor::new(self.data[off..off + vol].to_vec(), s.clone())?);
            off += vol;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_volume_must_match() {
        assert!(Tensor::new(vec![1.0, 2.0], vec![3]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).is_ok());
    }

    #[test]
    fn finite_check_reports_index() {
        let t = Tensor::vector(vec![0.0, f64::NAN]);
        match t.check_finite("x") {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::new(vec![1.0, 2.0], vec![2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2]).unwrap();
        let fused = Tensor::concat(&[a.clone(), b.clone()]);
        let parts = fused.split(&[vec![2], vec![2, 2]]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn div_guards_degeneracy() {
        let x = Tensor::vector(vec![1.0]);
        let p = Tensor::vector(vec![1e-15]);
        assert!(x.div_elementwise(&p, 1e-12).is_err());
    }
}
