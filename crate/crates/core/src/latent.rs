use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N × d` matrix of latent codes, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl LatentBatch {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("latent dimension must be ≥ 1".into()));
        }
        if data.len() != n * d {
            return Err(Error::InvalidArgument(format!(
                "latent batch {n}×{d} needs {} values, got {}",
                n * d,
                data.len()
            )));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("ragged latent rows".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl DoubleEndedIterator<Item = &[f64]> + ExactSizeIterator {
        self.data.chunks_exact(self.d)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.d + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Stack `other` underneath `self`.
    pub fn concat(&self, other: &LatentBatch) -> Result<LatentBatch> {
        if self.d != other.d {
            return Err(Error::InvalidArgument(format!(
                "cannot stack latent batches of width {} and {}",
                self.d, other.d
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(self.n + other.n, self.d, data)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.n, self.d, self.data.clone())
    }
}

impl TryFrom<Tensor> for LatentBatch {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [n, d] => Self::new(n, d, t.into_data()),
            _ => Err(Error::InvalidArgument(format!(
                "latent batch must be 2-d, got {:?}",
                t.shape()
            ))),
        }
    }
}
