//! Nearest-neighbour quantization against the codebook.

use crate::error::{Error, Result};
use crate::format::content_hash;
use crate::numerics::Tensor;

/// The `N_ρ × D_ρ` matrix of code vectors plus last-epoch usage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    rho_hat: Tensor,
    pub usage: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub index: usize,
    pub distance_sq: f64,
    pub rho: Vec<f64>,
}

impl Quantized {
    pub fn one_hot(&self, n_codes: usize) -> Vec<f64> {
        let mut c = vec![0.0; n_codes];
        c[self.index] = 1.0;
        c
    }
}

/// Result of K-nearest quantization: the multi-hot code and its embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHot {
    /// The K selected rows, nearest first.
    pub indices: Vec<usize>,
    pub rho: Vec<f64>,
}

impl MultiHot {
    pub fn code(&self, n_codes: usize) -> Vec<f64> {
        let mut c = vec![0.0; n_codes];
        for &i in &self.indices {
            c[i] = 1.0;
        }
        c
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(rho_hat: Tensor) -> Result<Self> {
        if rho_hat.shape().len() != 2 || rho_hat.rows() == 0 {
            return Err(Error::param(format!("codebook needs at least one row, got shape {:?}", rho_hat.shape())));
        }
        if !rho_hat.is_finite() {
            return Err(Error::numeric("codebook has non-finite entries"));
        }
        let n = rho_hat.rows();
        Ok(Codebook {
            rho_hat,
            usage: vec![0; n],
        })
    }

    pub fn rho_hat(&self) -> &Tensor {
        &self.rho_hat
    }

    pub(crate) fn rho_hat_mut(&mut self) -> &mut Tensor {
        &mut self.rho_hat
    }

    pub fn n_codes(&self) -> usize {
        self.rho_hat.rows()
    }

    pub fn dim(&self) -> usize {
        self.rho_hat.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rho_hat.row(i)
    }

    /// SHA-256 of the stored (`f32`) codebook.
    pub fn hash(&self) -> [u8; 32] {
        content_hash([&self.rho_hat])
    }

    fn check(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(Error::dim(format!("latent of length {} for codebook dim {}", f.len(), self.dim())));
        }
        Ok(())
    }

    pub fn distances(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check(f)?;
        Ok((0..self.n_codes()).map(|i| sq_dist(f, self.row(i))).collect())
    }

    /// Nearest row, lowest index on ties.
    pub fn quantize(&self, f: &[f64]) -> Result<Quantized> {
        self.check(f)?;
        let mut best = (0, f64::INFINITY);
        for i in 0..self.n_codes() {
            let d = sq_dist(f, self.row(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        if !best.1.is_finite() {
            return Err(Error::numeric("non-finite distance while quantizing"));
        }
        Ok(Quantized {
            index: best.0,
            distance_sq: best.1,
            rho: self.row(best.0).to_vec(),
        })
    }

    /// The `k` nearest distinct rows ordered by (distance, index).
    pub fn quantize_topk(&self, f: &[f64], k: usize) -> Result<MultiHot> {
        if k == 0 || k > self.n_codes() {
            return Err(Error::param(format!("expansion {k} outside 1..={}", self.n_codes())));
        }
        let d = self.distances(f)?;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite distance while quantizing"));
        }
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        order.truncate(k);
        let mut rho = vec![0.0; self.dim()];
        for &i in &order {
            for (r, v) in rho.iter_mut().zip(self.row(i)) {
                *r += v;
            }
        }
        Ok(MultiHot { indices: order, rho })
    }
}
