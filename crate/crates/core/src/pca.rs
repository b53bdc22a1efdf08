//! Principal component projection used to bring per-cell channel vectors of
//! different layer combinations to one common width.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::PcaError;

/// Requested output size of a fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PcaTarget {
    /// Keep exactly this many components.
    Dim(usize),
    /// Keep the fewest components whose eigenvalues reach this fraction of the total.
    Energy(f64),
}

/// Affine projection `basis * (v - mean)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    /// `output_dim x input_dim`, row-major; rows are orthonormal.
    pub basis: Vec<f64>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Retained fraction of the total variance.
    pub energy: f64,
    #[serde(skip)]
    basis_f32: Vec<f32>,
    #[serde(skip)]
    mean_f32: Vec<f32>,
    #[serde(skip)]
    is_identity: bool,
}

/// Result of [`pca_fit`]; `rank_limited` is set when the data had fewer
/// non-zero directions than were requested and the output width was reduced.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub projector: PcaProjector,
    pub requested_dim: usize,
    pub rank_limited: bool,
}

impl PcaProjector {
    pub fn new(input_dim: usize, output_dim: usize, mean: Vec<f64>, basis: Vec<f64>, eigenvalues: Vec<f64>, energy: f64) -> Result<Self, PcaError> {
        if output_dim == 0 || output_dim > input_dim || mean.len() != input_dim || basis.len() != input_dim * output_dim {
            return Err(PcaError::Target(format!(
                "inconsistent projector: {input_dim}->{output_dim}, mean {}, basis {}",
                mean.len(),
                basis.len()
            )));
        }
        let mut p = PcaProjector { input_dim, output_dim, mean, basis, eigenvalues, energy, basis_f32: Vec::new(), mean_f32: Vec::new(), is_identity: false };
        p.refresh_cache();
        Ok(p)
    }

    /// Zero mean, identity basis.
    pub fn identity(dim: usize) -> Self {
        let mut basis = vec![0.0; dim * dim];
        for i in 0..dim {
            basis[i * dim + i] = 1.0;
        }
        let mut p = PcaProjector {
            input_dim: dim,
            output_dim: dim,
            mean: vec![0.0; dim],
            basis,
            eigenvalues: vec![1.0; dim],
            energy: 1.0,
            basis_f32: Vec::new(),
            mean_f32: Vec::new(),
            is_identity: false,
        };
        p.refresh_cache();
        p
    }

    /// Rebuilds the single-precision copies; call after deserializing.
    pub fn refresh_cache(&mut self) {
        self.basis_f32 = self.basis.iter().map(|&v| v as f32).collect();
        self.mean_f32 = self.mean.iter().map(|&v| v as f32).collect();
        let n = self.input_dim;
        self.is_identity = n == self.output_dim
            && self.mean.iter().all(|&m| m == 0.0)
            && self.basis.iter().enumerate().all(|(i, &b)| b == if i / n == i % n { 1.0 } else { 0.0 });
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.basis[k * self.input_dim..(k + 1) * self.input_dim]
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, PcaError> {
        if v.len() != self.input_dim {
            return Err(PcaError::LengthMismatch { got: v.len(), expected: self.input_dim });
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.output_dim).map(|k| self.row(k).iter().zip(&centered).map(|(b, c)| b * c).sum()).collect())
    }

    /// Single-precision projection into `out` (length `output_dim`), using
    /// `scratch` for the centered input.
    pub fn project_f32_into(&self, v: &[f32], scratch: &mut Vec<f32>, out: &mut [f32]) -> Result<(), PcaError> {
        if v.len() != self.input_dim {
            return Err(PcaError::LengthMismatch { got: v.len(), expected: self.input_dim });
        }
        self.project_cells_f32(v, scratch, out)
    }

    /// Projects consecutive `input_dim` blocks of `cells` into consecutive
    /// `output_dim` blocks of `out`. Each basis row is read once for all
    /// blocks; every value equals what [`Self::project_f32_into`] gives for
    /// that block alone.
    pub fn project_cells_f32(&self, cells: &[f32], scratch: &mut Vec<f32>, out: &mut [f32]) -> Result<(), PcaError> {
        let (n, d) = (self.input_dim, self.output_dim);
        if !cells.len().is_multiple_of(n) || out.len() < cells.len() / n * d {
            return Err(PcaError::LengthMismatch { got: cells.len(), expected: n });
        }
        if self.basis_f32.len() != self.basis.len() {
            return Err(PcaError::Target("projector cache not initialised".into()));
        }
        let blocks = cells.len() / n;
        if self.is_identity {
            // adding zero maps -0 to +0, as the dot product would
            for (o, &v) in out.iter_mut().zip(cells) {
                *o = v + 0.0;
            }
            return Ok(());
        }
        scratch.clear();
        for block in cells.chunks_exact(n) {
            scratch.extend(block.iter().zip(&self.mean_f32).map(|(a, m)| a - m));
        }
        for k in 0..d {
            let row = &self.basis_f32[k * n..(k + 1) * n];
            for c in 0..blocks {
                out[c * d + k] = dot_f32(row, &scratch[c * n..(c + 1) * n]);
            }
        }
        Ok(())
    }

    /// Maps a projected vector back to input space: `mean + basis^T * y`.
    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, &yk) in y.iter().enumerate().take(self.output_dim) {
            for (o, b) in out.iter_mut().zip(self.row(k)) {
                *o += yk * b;
            }
        }
        out
    }
}

/// Eight-lane dot product; the split accumulators let the compiler vectorise.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Fits a projector from equal-length samples.
///
/// The sample covariance (divided by `n - 1`) is eigendecomposed; the leading
/// eigenvectors become the basis rows, each flipped so that its first
/// non-zero component is positive.
pub fn pca_fit<S: AsRef<[f32]>>(samples: &[S], target: PcaTarget) -> Result<PcaFit, PcaError> {
    let n = samples.len();
    if n < 2 {
        return Err(PcaError::TooFewSamples(n));
    }
    let dim = samples[0].as_ref().len();
    if dim == 0 {
        return Err(PcaError::Target("samples are empty vectors".into()));
    }
    for (index, s) in samples.iter().enumerate() {
        if s.as_ref().len() != dim {
            return Err(PcaError::RaggedSamples { index, len: s.as_ref().len(), expected: dim });
        }
    }
    match target {
        PcaTarget::Dim(d) if d == 0 || d > dim => return Err(PcaError::Target(format!("dimension {d} not in 1..={dim}"))),
        PcaTarget::Energy(e) if !(e > 0.0 && e <= 1.0) => return Err(PcaError::Target(format!("energy {e} not in (0, 1]"))),
        _ => {}
    }

    let mut mean = vec![0.0f64; dim];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.as_ref()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::<f64>::from_fn(n, dim, |i, j| samples[i].as_ref()[j] as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let tol = values[0].max(f64::MIN_POSITIVE) * 1e-12 * dim as f64;
    let rank = values.iter().filter(|&&v| v > tol).count().max(1);

    let requested = match target {
        PcaTarget::Dim(d) => d,
        PcaTarget::Energy(e) => {
            let mut acc = 0.0;
            let mut d = dim;
            for (k, v) in values.iter().enumerate() {
                acc += v;
                if total <= 0.0 || acc / total >= e - 1e-15 {
                    d = k + 1;
                    break;
                }
            }
            d
        }
    };
    let kept = requested.min(rank);

    let mut basis = Vec::with_capacity(kept * dim);
    for &col in order.iter().take(kept) {
        let v = eig.eigenvectors.column(col);
        let norm = v.norm();
        let flip = match v.iter().find(|x| x.abs() > 1e-12) {
            Some(&x) if x < 0.0 => -1.0,
            _ => 1.0,
        };
        basis.extend(v.iter().map(|&x| flip * x / norm));
    }
    let retained: f64 = values[..kept].iter().sum();
    let energy = if total > 0.0 { (retained / total).min(1.0) } else { 1.0 };
    let projector = PcaProjector::new(dim, kept, mean, basis, values[..kept].to_vec(), energy)?;
    Ok(PcaFit { projector, requested_dim: requested, rank_limited: kept < requested })
}
