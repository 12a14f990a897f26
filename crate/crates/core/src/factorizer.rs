//! Covariance-aware low-rank factorization and the GQA → MLA weight mapping.
//!
//! For a weight `W` and whitener `S` (the shrunk `√C`, or `C` in the
//! C-weighted variant):
//!
//! ```text
//! S·W = U Σ Vᵀ,   W_a = S⁻¹ U_r Σ_r,   W_b = V_rᵀ,   Ŵ = W_a W_b
//! ```
//!
//! With `S = √C` this is the rank-`r` minimizer of `(1/N) Σ ‖X_b W − X_b Ŵ‖²`.

use crate::calibration::CalibrationBatch;
use crate::error::{invalid, mismatch, CareError, Result};
use crate::linalg::{inv_spd, svd, truncate_svd, Matrix, SvdResult};

/// A grouped-query attention layer's projection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GqaLayer {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_groups: usize,
    /// `D × n_h·d_h`
    pub w_q: Matrix,
    /// `D × g_h·d_h`
    pub w_k_g: Matrix,
    /// `D × g_h·d_h`
    pub w_v_g: Matrix,
}

impl GqaLayer {
    pub fn new(
        n_heads: usize,
        head_dim: usize,
        n_groups: usize,
        w_q: Matrix,
        w_k_g: Matrix,
        w_v_g: Matrix,
    ) -> Result<Self> {
        check_grouping(n_heads, n_groups)?;
        if head_dim == 0 {
            return Err(invalid("head_dim must be positive"));
        }
        let d_model = n_heads * head_dim;
        let kv = n_groups * head_dim;
        for (name, m, cols) in [
            ("w_q", &w_q, d_model),
            ("w_k_g", &w_k_g, kv),
            ("w_v_g", &w_v_g, kv),
        ] {
            if m.shape() != (d_model, cols) {
                return Err(mismatch(format!(
                    "{name} is {}x{}, expected {d_model}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self {
            d_model,
            n_heads,
            head_dim,
            n_groups,
            w_q,
            w_k_g,
            w_v_g,
        })
    }

    /// Per-token KV width of the grouped cache (`g_h·d_h` for each of K, V).
    pub fn kv_width(&self) -> usize {
        self.n_groups * self.head_dim
    }

    /// `W̃_K`, `D × n_h·d_h`.
    pub fn replicated_k(&self) -> Result<Matrix> {
        replicate_groups(&self.w_k_g, self.n_heads, self.n_groups, self.head_dim)
    }

    /// `W̃_V`, `D × n_h·d_h`.
    pub fn replicated_v(&self) -> Result<Matrix> {
        replicate_groups(&self.w_v_g, self.n_heads, self.n_groups, self.head_dim)
    }
}

fn check_grouping(n_heads: usize, n_groups: usize) -> Result<()> {
    if n_heads == 0 || n_groups == 0 || !n_heads.is_multiple_of(n_groups) {
        return Err(invalid(format!(
            "{n_groups} groups do not divide {n_heads} heads"
        )));
    }
    Ok(())
}

/// Down/up factors of a converted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlaFactors {
    /// `D × r_K`
    pub w_a_k: Matrix,
    /// `r_K × n_h·d_h`
    pub w_b_k: Matrix,
    /// `D × r_V`
    pub w_a_v: Matrix,
    /// `r_V × n_h·d_h`
    pub w_b_v: Matrix,
    pub r_k: usize,
    pub r_v: usize,
}

impl MlaFactors {
    pub fn new(k: FactorPair, v: FactorPair) -> Result<Self> {
        if k.a.rows() != v.a.rows() || k.b.cols() != v.b.cols() {
            return Err(mismatch("K and V factors disagree on model or head width"));
        }
        Ok(Self {
            r_k: k.rank(),
            r_v: v.rank(),
            w_a_k: k.a,
            w_b_k: k.b,
            w_a_v: v.a,
            w_b_v: v.b,
        })
    }

    pub fn k_product(&self) -> Result<Matrix> {
        self.w_a_k.matmul(&self.w_b_k)
    }

    pub fn v_product(&self) -> Result<Matrix> {
        self.w_a_v.matmul(&self.w_b_v)
    }

    /// `blkdiag(W_b_K, W_b_V)`.
    pub fn join(&self) -> Result<Matrix> {
        join_weights(&self.w_b_k, &self.w_b_v)
    }
}

/// `W_a` (`D × r`) and `W_b` (`r × n`) with `W_a W_b = Ŵ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl FactorPair {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn product(&self) -> Result<Matrix> {
        self.a.matmul(&self.b)
    }
}

/// Residuals of one factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationReport {
    /// `‖W − Ŵ‖²`
    pub weight_residual_sq: f64,
    /// `‖S(W − Ŵ)‖²` against the whitener that was factorized.
    pub whitened_residual_sq: f64,
    /// `‖S·W‖²`, for relative comparisons.
    pub whitened_energy: f64,
    /// Activation-space residual, when calibration data was supplied.
    pub activation_residual_sq: Option<f64>,
    pub rank_used: usize,
}

impl FactorizationReport {
    pub fn relative_whitened_residual(&self) -> f64 {
        if self.whitened_energy > 0.0 {
            self.whitened_residual_sq / self.whitened_energy
        } else {
            self.whitened_residual_sq
        }
    }
}

/// Builds `W̃` by copying each group's `d_h`-wide column block to the heads
/// it serves: head `h` reads group `⌊h·g_h / n_h⌋`.
pub fn replicate_groups(w_g: &Matrix, n_h: usize, g_h: usize, d_h: usize) -> Result<Matrix> {
    check_grouping(n_h, g_h)?;
    if w_g.cols() != g_h * d_h {
        return Err(mismatch(format!(
            "grouped weight has {} columns, expected {g_h}·{d_h}",
            w_g.cols()
        )));
    }
    let blocks: Vec<Matrix> = (0..n_h)
        .map(|h| w_g.column_block((h * g_h / n_h) * d_h, d_h))
        .collect::<Result<_>>()?;
    Matrix::hcat(&blocks.iter().collect::<Vec<_>>())
}

/// Latent rank that keeps the MLA cache as wide as the GQA one.
pub fn kv_parity_rank(g_h: usize, d_h: usize) -> usize {
    g_h * d_h
}

fn check_rank(w: &Matrix, r: usize) -> Result<()> {
    let max = w.rows().min(w.cols());
    if r == 0 || r > max {
        return Err(invalid(format!("rank {r} outside 1..={max}")));
    }
    Ok(())
}

fn split(svd_r: &SvdResult) -> Result<(Matrix, Matrix)> {
    Ok((
        svd_r.u.scale_columns(&svd_r.singular_values)?,
        svd_r.v_t.clone(),
    ))
}

/// Covariance-aware rank-`r` factorization against `whitener`.
pub fn care_factorize(
    w: &Matrix,
    whitener: &Matrix,
    r: usize,
) -> Result<(FactorPair, FactorizationReport)> {
    if !whitener.is_square() || whitener.rows() != w.rows() {
        return Err(mismatch(format!(
            "whitener {}x{} does not match weight with {} rows",
            whitener.rows(),
            whitener.cols(),
            w.rows()
        )));
    }
    check_rank(w, r)?;
    let scale = whitener.max_abs();
    let inverse =
        inv_spd(whitener, (scale * 1e-14).max(f64::MIN_POSITIVE)).map_err(|e| match e {
            CareError::Singular { .. } | CareError::InvalidArgument(_) => {
                invalid(format!("singular whitener ({e}); apply shrinkage first"))
            }
            other => other,
        })?;
    let whitened = whitener.matmul(w)?;
    let top = truncate_svd(&svd(&whitened)?, r)?;
    let (us, v_t) = split(&top)?;
    let pair = FactorPair {
        a: inverse.matmul(&us)?,
        b: v_t,
    };
    let report = residuals(w, &pair, Some(whitener))?;
    Ok((pair, report))
}

/// Plain weight-space truncated SVD, `W_a = U_r Σ_r`, `W_b = V_rᵀ`.
pub fn plain_factorize(w: &Matrix, r: usize) -> Result<(FactorPair, FactorizationReport)> {
    check_rank(w, r)?;
    let top = truncate_svd(&svd(w)?, r)?;
    let (a, b) = split(&top)?;
    let pair = FactorPair { a, b };
    let report = residuals(w, &pair, None)?;
    Ok((pair, report))
}

fn residuals(
    w: &Matrix,
    pair: &FactorPair,
    whitener: Option<&Matrix>,
) -> Result<FactorizationReport> {
    let delta = w.sub(&pair.product()?)?;
    let (whitened_residual_sq, whitened_energy) = match whitener {
        Some(s) => (
            s.matmul(&delta)?.frobenius_norm_sq(),
            s.matmul(w)?.frobenius_norm_sq(),
        ),
        None => (delta.frobenius_norm_sq(), w.frobenius_norm_sq()),
    };
    Ok(FactorizationReport {
        weight_residual_sq: delta.frobenius_norm_sq(),
        whitened_residual_sq,
        whitened_energy,
        activation_residual_sq: None,
        rank_used: pair.rank(),
    })
}

/// `(1/N) Σ_b ‖X_b W − X_b Ŵ‖²`.
pub fn activation_residual(
    batches: &[CalibrationBatch],
    w: &Matrix,
    w_hat: &Matrix,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(CareError::NoCalibrationData);
    }
    let delta = w.sub(w_hat)?;
    let mut total = 0.0;
    for b in batches {
        total += b.x.matmul(&delta)?.frobenius_norm_sq();
    }
    Ok(total / batches.len() as f64)
}

/// `tr(ΔWᵀ C ΔW)`, the activation residual expressed through the covariance.
pub fn covariance_residual(c: &Matrix, w: &Matrix, w_hat: &Matrix) -> Result<f64> {
    let delta = w.sub(w_hat)?;
    let cd = c.matmul(&delta)?;
    Ok(delta
        .as_slice()
        .iter()
        .zip(cd.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

/// `blkdiag(W_b_K, W_b_V)`, so that
/// `[X W_a_K, X W_a_V] · W_join = [K_C, V_C]`.
pub fn join_weights(w_b_k: &Matrix, w_b_v: &Matrix) -> Result<Matrix> {
    if w_b_k.cols() != w_b_v.cols() {
        return Err(mismatch(format!(
            "up-projections have {} and {} output columns",
            w_b_k.cols(),
            w_b_v.cols()
        )));
    }
    Ok(Matrix::block_diag(w_b_k, w_b_v))
}

/// Reconstructs `W` with its `index`-th (1-based) singular value zeroed.
/// Returns `W` unchanged when that singular value is already zero.
pub fn ablate_singular_value(w: &Matrix, index: usize) -> Result<Matrix> {
    let mut s = svd(w)?;
    let p = s.singular_values.len();
    if index == 0 || index > p {
        return Err(invalid(format!(
            "singular value index {index} outside 1..={p}"
        )));
    }
    if s.singular_values[index - 1] == 0.0 {
        return Ok(w.clone());
    }
    s.singular_values[index - 1] = 0.0;
    Ok(s.reconstruct())
}

/// Per-kind reports of one layer conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConversion {
    pub factors: MlaFactors,
    pub report_k: FactorizationReport,
    pub report_v: FactorizationReport,
}

/// Replicates K and V groups, then factorizes each against `whitener`.
pub fn convert_layer(
    layer: &GqaLayer,
    whitener: &Matrix,
    r_k: usize,
    r_v: usize,
) -> Result<LayerConversion> {
    let (k, report_k) = care_factorize(&layer.replicated_k()?, whitener, r_k)?;
    let (v, report_v) = care_factorize(&layer.replicated_v()?, whitener, r_v)?;
    Ok(LayerConversion {
        factors: MlaFactors::new(k, v)?,
        report_k,
        report_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{covariance_of, shrunk_whitener, Lambda, ShrinkageParams, Weighting};
    use crate::linalg::sqrt_psd;
    use crate::rng::GaussianStream;
    use proptest::prelude::*;

    fn random_layer(g: &mut GaussianStream, n_h: usize, d_h: usize, g_h: usize) -> GqaLayer {
        let d = n_h * d_h;
        let s = 1.0 / (d as f64).sqrt();
        GqaLayer::new(
            n_h,
            d_h,
            g_h,
            g.matrix(d, d, s),
            g.matrix(d, g_h * d_h, s),
            g.matrix(d, g_h * d_h, s),
        )
        .unwrap()
    }

    fn anisotropic_batches(
        g: &mut GaussianStream,
        n: usize,
        t: usize,
        d: usize,
    ) -> Vec<CalibrationBatch> {
        let scales: Vec<f64> = (0..d)
            .map(|i| 10f64.powf(-(i as f64) / d as f64 * 1.5))
            .collect();
        let mix = g.matrix(d, d, 1.0 / (d as f64).sqrt());
        (0..n)
            .map(|_| {
                let z = g.matrix(t, d, 1.0).scale_columns(&scales).unwrap();
                CalibrationBatch::new(0, z.matmul(&mix).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn replicate_examples() {
        let mut g = GaussianStream::new(1);
        let w = g.matrix(4, 4, 1.0);
        assert_eq!(replicate_groups(&w, 2, 2, 2).unwrap(), w);

        let b = g.matrix(3, 2, 1.0);
        let rep = replicate_groups(&b, 2, 1, 2).unwrap();
        assert_eq!(rep, Matrix::hcat(&[&b, &b]).unwrap());

        assert!(replicate_groups(&w, 3, 2, 2).is_err());
        assert!(replicate_groups(&w, 4, 2, 3).is_err());
    }

    #[test]
    fn replicate_layout_and_rank() {
        let mut g = GaussianStream::new(2);
        let (n_h, g_h, d_h) = (8, 2, 4);
        let w_g = g.matrix(32, g_h * d_h, 1.0);
        let rep = replicate_groups(&w_g, n_h, g_h, d_h).unwrap();
        for h in 0..n_h {
            let group = h * g_h / n_h;
            assert_eq!(
                rep.column_block(h * d_h, d_h).unwrap(),
                w_g.column_block(group * d_h, d_h).unwrap()
            );
        }
        let sigma = svd(&rep).unwrap().singular_values;
        assert!(sigma[g_h * d_h] <= 1e-10 * sigma[0]);
    }

    #[test]
    fn parity_rank_examples() {
        assert_eq!(kv_parity_rank(8, 128), 1024);
        assert_eq!(kv_parity_rank(1, 1), 1);
        assert_eq!(kv_parity_rank(2, 64), 128);
    }

    #[test]
    fn identity_whitener_matches_plain_bitwise() {
        let mut g = GaussianStream::new(3);
        let w = g.matrix(12, 16, 1.0);
        for r in [1, 5, 12] {
            let care = care_factorize(&w, &Matrix::identity(12), r).unwrap();
            let plain = plain_factorize(&w, r).unwrap();
            assert_eq!(care, plain);
        }
    }

    #[test]
    fn plain_examples() {
        let w = Matrix::from_diag(&[3.0, 2.0, 1.0]).unwrap();
        let (pair, report) = plain_factorize(&w, 2).unwrap();
        let expect = Matrix::from_diag(&[3.0, 2.0, 0.0]).unwrap();
        assert!(pair.product().unwrap().max_abs_diff(&expect).unwrap() < 1e-15);
        assert!((report.weight_residual_sq - 1.0).abs() < 1e-15);

        let mut g = GaussianStream::new(4);
        let w = g.matrix(7, 9, 1.0);
        let sigma = svd(&w).unwrap().singular_values;
        for r in 1..=7 {
            let (pair, report) = plain_factorize(&w, r).unwrap();
            let tail: f64 = sigma[r..].iter().map(|s| s * s).sum();
            let denom = tail.max(f64::EPSILON * w.frobenius_norm_sq());
            assert!((report.weight_residual_sq - tail).abs() <= 1e-9 * denom);
            if r == 7 {
                assert!(pair.product().unwrap().max_abs_diff(&w).unwrap() < 1e-12);
            }
        }
        assert!(plain_factorize(&w, 0).is_err());
        assert!(plain_factorize(&w, 8).is_err());
    }

    #[test]
    fn care_rejects_singular_whitener() {
        let w = Matrix::identity(2);
        let s = Matrix::from_diag(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            care_factorize(&w, &s, 1),
            Err(CareError::InvalidArgument(_))
        ));
        assert!(care_factorize(&w, &Matrix::identity(3), 1).is_err());
    }

    #[test]
    fn care_product_matches_what_and_parity_is_exact() {
        let mut g = GaussianStream::new(5);
        let layer = random_layer(&mut g, 4, 4, 2);
        let batches = anisotropic_batches(&mut g, 4, 16, 16);
        let c = covariance_of(&batches).unwrap();
        let s = shrunk_whitener(&c, &ShrinkageParams::default(), Weighting::SqrtC).unwrap();
        let w = layer.replicated_k().unwrap();
        let r = kv_parity_rank(2, 4);
        let (pair, report) = care_factorize(&w, &s, r).unwrap();
        let sigma1 = svd(&s.matmul(&w).unwrap()).unwrap().singular_values[0];
        assert!(report.whitened_residual_sq <= 1e-16 * sigma1 * sigma1);
        assert!(pair.product().unwrap().max_abs_diff(&w).unwrap() < 1e-10);
    }

    #[test]
    fn care_beats_plain_on_anisotropic_covariance() {
        // C = diag(100, 1); W puts its largest weight-space energy on the
        // weak input direction.
        let c = Matrix::from_diag(&[100.0, 1.0]).unwrap();
        let s = sqrt_psd(&c).unwrap();
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        let (_, care) = care_factorize(&w, &s, 1).unwrap();
        let (plain_pair, _) = plain_factorize(&w, 1).unwrap();
        let plain_whitened = s
            .matmul(&w.sub(&plain_pair.product().unwrap()).unwrap())
            .unwrap();
        // brute force: keeping row 0 costs 9, keeping row 1 costs 100
        assert!((care.whitened_residual_sq - 9.0).abs() < 1e-12);
        assert!((plain_whitened.frobenius_norm_sq() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn activation_residual_examples() {
        let mut g = GaussianStream::new(6);
        let w = g.matrix(5, 3, 1.0);
        let b = vec![CalibrationBatch::new(0, g.matrix(4, 5, 1.0)).unwrap()];
        assert_eq!(activation_residual(&b, &w, &w).unwrap(), 0.0);
        let w_hat = g.matrix(5, 3, 1.0);
        let eye = vec![CalibrationBatch::new(0, Matrix::identity(5)).unwrap()];
        let direct = w.sub(&w_hat).unwrap().frobenius_norm_sq();
        assert!((activation_residual(&eye, &w, &w_hat).unwrap() - direct).abs() < 1e-12);
        assert_eq!(
            activation_residual(&[], &w, &w_hat),
            Err(CareError::NoCalibrationData)
        );
    }

    #[test]
    fn join_examples() {
        let a = Matrix::from_rows(&[[2.0]]).unwrap();
        let b = Matrix::from_rows(&[[5.0]]).unwrap();
        assert_eq!(
            join_weights(&a, &b).unwrap(),
            Matrix::from_rows(&[[2.0, 0.0], [0.0, 5.0]]).unwrap()
        );
        assert_eq!(
            join_weights(&Matrix::zeros(2, 3), &Matrix::zeros(1, 3)).unwrap(),
            Matrix::zeros(3, 6)
        );
        assert!(join_weights(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn join_matches_two_path_evaluation() {
        let mut g = GaussianStream::new(7);
        let layer = random_layer(&mut g, 4, 2, 2);
        let conv = convert_layer(&layer, &Matrix::identity(8), 3, 2).unwrap();
        let f = &conv.factors;
        let x = g.matrix(5, 8, 1.0);
        let lat_k = x.matmul(&f.w_a_k).unwrap();
        let lat_v = x.matmul(&f.w_a_v).unwrap();
        let joined = Matrix::hcat(&[&lat_k, &lat_v])
            .unwrap()
            .matmul(&f.join().unwrap())
            .unwrap();
        let k_c = lat_k.matmul(&f.w_b_k).unwrap();
        let v_c = lat_v.matmul(&f.w_b_v).unwrap();
        let direct = Matrix::hcat(&[&k_c, &v_c]).unwrap();
        assert!(joined.max_abs_diff(&direct).unwrap() < 1e-10);
    }

    #[test]
    fn ablation_examples() {
        let w = Matrix::from_diag(&[3.0, 2.0, 1.0]).unwrap();
        let abl = ablate_singular_value(&w, 2).unwrap();
        assert!(
            abl.max_abs_diff(&Matrix::from_diag(&[3.0, 0.0, 1.0]).unwrap())
                .unwrap()
                < 1e-15
        );

        let mut g = GaussianStream::new(8);
        let w = g.matrix(6, 4, 1.0);
        let sigma = svd(&w).unwrap().singular_values;
        for i in 1..=4 {
            let d = w
                .sub(&ablate_singular_value(&w, i).unwrap())
                .unwrap()
                .frobenius_norm_sq();
            assert!((d - sigma[i - 1].powi(2)).abs() < 1e-10 * sigma[0].powi(2));
        }

        let low = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        let abl = ablate_singular_value(&low, 2).unwrap();
        assert!(abl.max_abs_diff(&low).unwrap() < 1e-10);
        assert!(ablate_singular_value(&low, 0).is_err());
        assert!(ablate_singular_value(&low, 3).is_err());
    }

    #[test]
    fn convert_layer_paths() {
        let mut g = GaussianStream::new(9);
        let layer = random_layer(&mut g, 4, 3, 2);
        let d = 12;
        let full = convert_layer(&layer, &Matrix::identity(d), d, d).unwrap();
        let k = full.factors.k_product().unwrap();
        assert!(k.max_abs_diff(&layer.replicated_k().unwrap()).unwrap() < 1e-12);

        let batches = anisotropic_batches(&mut g, 3, 20, d);
        let c = covariance_of(&batches).unwrap();
        let p = ShrinkageParams::default();
        let parity = kv_parity_rank(2, 3);
        let s = shrunk_whitener(&c, &p, Weighting::SqrtC).unwrap();
        let conv = convert_layer(&layer, &s, parity, parity).unwrap();
        for rep in [&conv.report_k, &conv.report_v] {
            assert!(rep.relative_whitened_residual() <= 1e-16);
        }

        let sc = shrunk_whitener(&c, &p, Weighting::C).unwrap();
        let a = convert_layer(&layer, &s, 2, 2).unwrap();
        let b = convert_layer(&layer, &sc, 2, 2).unwrap();
        assert_ne!(a.factors, b.factors);
        let ra = covariance_residual(
            &c,
            &layer.replicated_k().unwrap(),
            &a.factors.k_product().unwrap(),
        )
        .unwrap();
        let rb = covariance_residual(
            &c,
            &layer.replicated_k().unwrap(),
            &b.factors.k_product().unwrap(),
        )
        .unwrap();
        assert!((ra - rb).abs() > 1e-9 * ra);
    }

    #[test]
    fn whitened_optimality_against_random_factors() {
        let mut g = GaussianStream::new(10);
        for _ in 0..10 {
            let w = g.matrix(10, 10, 1.0);
            let batches = anisotropic_batches(&mut g, 3, 12, 10);
            let c = covariance_of(&batches).unwrap();
            let s = shrunk_whitener(
                &c,
                &ShrinkageParams::new(0.01, Lambda::Auto).unwrap(),
                Weighting::SqrtC,
            )
            .unwrap();
            let r = 3;
            let (_, care) = care_factorize(&w, &s, r).unwrap();
            let sigma = svd(&s.matmul(&w).unwrap()).unwrap().singular_values;
            let tail: f64 = sigma[r..].iter().map(|x| x * x).sum();
            assert!((care.whitened_residual_sq - tail).abs() <= 1e-9 * tail);

            let (plain, _) = plain_factorize(&w, r).unwrap();
            let plain_res = s
                .matmul(&w.sub(&plain.product().unwrap()).unwrap())
                .unwrap()
                .frobenius_norm_sq();
            assert!(care.whitened_residual_sq <= plain_res);
            let rand = g.matrix(10, r, 1.0).matmul(&g.matrix(r, 10, 1.0)).unwrap();
            let rand_res = s
                .matmul(&w.sub(&rand).unwrap())
                .unwrap()
                .frobenius_norm_sq();
            assert!(care.whitened_residual_sq <= rand_res);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn activation_identity_for_arbitrary_delta(seed in any::<u64>(), d in 1usize..12, n in 1usize..5, t in 1usize..8, cols in 1usize..6) {
            let mut g = GaussianStream::new(seed);
            let batches: Vec<_> = (0..n).map(|_| CalibrationBatch::new(0, g.matrix(t, d, 1.0)).unwrap()).collect();
            let w = g.matrix(d, cols, 1.0);
            let w_hat = g.matrix(d, cols, 1.0);
            let empirical = activation_residual(&batches, &w, &w_hat).unwrap();
            let root = sqrt_psd(&covariance_of(&batches).unwrap()).unwrap();
            let whitened = root.matmul(&w.sub(&w_hat).unwrap()).unwrap().frobenius_norm_sq();
            prop_assert!((empirical - whitened).abs() <= 1e-9 * whitened);
        }

        #[test]
        fn factor_product_is_w_hat(seed in any::<u64>(), d in 2usize..10, cols in 2usize..10) {
            let mut g = GaussianStream::new(seed);
            let w = g.matrix(d, cols, 1.0);
            let batches: Vec<_> = (0..2).map(|_| CalibrationBatch::new(0, g.matrix(d + 2, d, 1.0)).unwrap()).collect();
            let s = shrunk_whitener(&covariance_of(&batches).unwrap(), &ShrinkageParams::default(), Weighting::SqrtC).unwrap();
            let r = 1 + (seed as usize) % d.min(cols);
            let (pair, _) = care_factorize(&w, &s, r).unwrap();
            let top = truncate_svd(&svd(&s.matmul(&w).unwrap()).unwrap(), r).unwrap();
            let w_hat = inv_spd(&s, 1e-14).unwrap().matmul(&top.reconstruct()).unwrap();
            let prod = pair.product().unwrap();
            let err = prod.sub(&w_hat).unwrap().frobenius_norm_sq().sqrt();
            prop_assert!(err <= 1e-9 * w_hat.frobenius_norm_sq().sqrt());
            prop_assert_eq!(pair.rank(), r);
        }
    }
}
