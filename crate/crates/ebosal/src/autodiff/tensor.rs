//! Dense row-major tensors.
//!
//! A scalar has the empty shape `[]` and exactly one element (the empty
//! product is 1). All entries are finite by construction; constructors
//! reject NaN and infinities so they cannot propagate silently.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape product
    /// and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor entry {} is {}",
                bad, data[bad]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dim("from_rows needs at least one row".into()));
        }
        let w = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != w {
                return Err(Error::Dim(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    w
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), w], data)
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Dim(format!(
                "item() on non-scalar shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dim(format!("expected 2-D tensor, got {:?}", other))),
        }
    }

    /// Elementwise accumulate, validating shape and finiteness of the sum.
    pub(crate) fn add_assign_checked(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (d, s) in self.data.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
        if let Some(bad) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {} overflowed during accumulation",
                bad
            )));
        }
        Ok(())
    }
}
