//! Dense row-major tensors over `f64`.
//!
//! This is the sole numeric carrier in the crate: 64-bit reals
//! everywhere, no broadcasting beyond row-vector bias addition, and no
//! implicit NaN/Inf propagation — constructors and compute kernels
//! reject non-finite values instead of letting them spread silently.

use crate::error::{Error, Result};

/// Dense tensor with a contiguous row-major buffer.
///
/// Invariant: `data.len() == shape.iter().product()` and every element
/// is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Dimension {
                context: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "Tensor::new: element {pos} is {}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 2-D constructor from nested rows; rows must be rectangular.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Dimension {
                    context: "Tensor::from_rows",
                    left: vec![i, row.len()],
                    right: vec![r, c],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Matrix product of 2-D tensors `[r,k] x [k,c] -> [r,c]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Dimension {
                context: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (r, k, c) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for t in 0..k {
                let a = self.data[i * k + t];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[t * c..(t + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        if let Some(pos) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matmul: output element {pos} overflowed"
            )));
        }
        Ok(Tensor {
            shape: vec![r, c],
            data: out,
        })
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                context: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                context: "sub",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Add a length-`c` bias row to every row of a `[r,c]` tensor — the
    /// only broadcasting rule in the crate.
    pub fn add_row(&self, bias: &[f64]) -> Result<Tensor> {
        if self.shape.len() != 2 || self.shape[1] != bias.len() {
            return Err(Error::Dimension {
                context: "add_row",
                left: self.shape.clone(),
                right: vec![bias.len()],
            });
        }
        let c = self.shape[1];
        let mut data = self.data.clone();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Row-wise softmax of a `[n,M]` tensor at the given temperature,
    /// computed with max-subtraction so large logits cannot overflow.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                context: "softmax_rows",
                left: self.shape.clone(),
                right: vec![2],
            });
        }
        let c = self.shape[1];
        let mut data = vec![0.0; self.data.len()];
        for (out, row) in data.chunks_mut(c).zip(self.data.chunks(c)) {
            softmax_into(row, temperature, out);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }
}

/// Softmax of one logit slice at a temperature, written into `out`.
pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = ((z - max) / temperature).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
