//! Calibration statistics: the uncentered second moment of layer inputs and
//! its shrinkage-regularized square root.
//!
//! `C = (1/N) Σ_b X_bᵀ X_b` is deliberately *not* mean-centered. The centered
//! covariance `E[(x-μ)(x-μ)ᵀ]` would break the identity
//! `(1/N) Σ ‖X_b ΔW‖² = ‖√C ΔW‖²` that the factorizer relies on.

use crate::error::{invalid, mismatch, CareError, Result};
use crate::linalg::{sqrt_psd, Matrix};

/// One batch of layer inputs, `T_b × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBatch {
    pub layer: usize,
    pub x: Matrix,
}

impl CalibrationBatch {
    pub fn new(layer: usize, x: Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(invalid("calibration batch has no tokens"));
        }
        Ok(Self { layer, x })
    }
}

/// Running `Σ X_bᵀ X_b` and batch count for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAccumulator {
    dim: usize,
    batch_count: usize,
    sum_xtx: Matrix,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            batch_count: 0,
            sum_xtx: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batch_count(&self) -> usize {
        self.batch_count
    }

    pub fn sum_xtx(&self) -> &Matrix {
        &self.sum_xtx
    }

    /// Adds `XᵀX` of one batch. Only the upper triangle is computed and then
    /// mirrored, so the sum stays exactly symmetric.
    pub fn accumulate(mut self, batch: &CalibrationBatch) -> Result<Self> {
        let x = &batch.x;
        if x.cols() != self.dim {
            return Err(mismatch(format!(
                "batch has {} features, accumulator expects {}",
                x.cols(),
                self.dim
            )));
        }
        let d = self.dim;
        let sum = self.sum_xtx.data_mut();
        for t in 0..x.rows() {
            let row = x.row(t);
            for i in 0..d {
                let xi = row[i];
                if xi == 0.0 {
                    continue;
                }
                for j in i..d {
                    sum[i * d + j] += xi * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                sum[i * d + j] = sum[j * d + i];
            }
        }
        self.batch_count += 1;
        Ok(self)
    }

    /// Sums and counts of two shards.
    pub fn merge(&self, other: &CovarianceAccumulator) -> Result<Self> {
        if self.dim != other.dim {
            return Err(mismatch(format!(
                "cannot merge accumulators of dim {} and {}",
                self.dim, other.dim
            )));
        }
        Ok(Self {
            dim: self.dim,
            batch_count: self.batch_count + other.batch_count,
            sum_xtx: self.sum_xtx.add(&other.sum_xtx)?,
        })
    }

    /// `C = sum / N`.
    pub fn finalize(&self) -> Result<Matrix> {
        if self.batch_count == 0 {
            return Err(CareError::NoCalibrationData);
        }
        Ok(self.sum_xtx.scale(1.0 / self.batch_count as f64))
    }
}

/// Covariance of a list of batches, accumulated in list order.
pub fn covariance_of(batches: &[CalibrationBatch]) -> Result<Matrix> {
    let dim = batches
        .first()
        .ok_or(CareError::NoCalibrationData)?
        .x
        .cols();
    batches
        .iter()
        .try_fold(CovarianceAccumulator::new(dim), |acc, b| acc.accumulate(b))?
        .finalize()
}

/// Shrinkage target scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    /// Mean eigenvalue of the base whitener, `trace / D`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageParams {
    pub alpha: f64,
    pub lambda: Lambda,
}

impl Default for ShrinkageParams {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            lambda: Lambda::Auto,
        }
    }
}

impl ShrinkageParams {
    pub fn new(alpha: f64, lambda: Lambda) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if let Lambda::Fixed(l) = lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(invalid(format!("lambda must be positive, got {l}")));
            }
        }
        Ok(Self { alpha, lambda })
    }

    /// Concrete λ for a given base whitener.
    pub fn resolve_lambda(&self, base: &Matrix) -> Result<f64> {
        match self.lambda {
            Lambda::Fixed(l) => Ok(l),
            Lambda::Auto => {
                let l = base.trace() / base.rows().max(1) as f64;
                if l > 0.0 {
                    Ok(l)
                } else {
                    Err(invalid("auto lambda resolved to zero (covariance is zero)"))
                }
            }
        }
    }
}

/// Which operator whitens the weight before factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `√C`, the operator for which the activation identity holds.
    #[default]
    SqrtC,
    /// `C` itself; squares the covariance spectrum.
    C,
}

impl Weighting {
    /// Unshrunk whitener for a covariance.
    pub fn base(&self, c: &Matrix) -> Result<Matrix> {
        match self {
            Weighting::SqrtC => sqrt_psd(c),
            Weighting::C => {
                // same PSD validation as the square-root path
                sqrt_psd(c)?;
                c.symmetrize()
            }
        }
    }
}

/// `(1−α)·B + α·λ·I` for the chosen base whitener `B`.
pub fn shrunk_whitener(
    c: &Matrix,
    params: &ShrinkageParams,
    weighting: Weighting,
) -> Result<Matrix> {
    let base = weighting.base(c)?;
    let lambda = params.resolve_lambda(&base)?;
    let n = base.rows();
    base.scale(1.0 - params.alpha)
        .add(&Matrix::identity(n).scale(params.alpha * lambda))
}

/// `(1−α)·√C + α·λ·I`.
pub fn shrunk_sqrt(c: &Matrix, params: &ShrinkageParams) -> Result<Matrix> {
    shrunk_whitener(c, params, Weighting::SqrtC)
}
