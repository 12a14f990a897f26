use super::Matrix;
use crate::error::{invalid, CareError, Result};

const MAX_SWEEPS: usize = 80;

/// Columns whose norm falls below this fraction of the largest are treated
/// as null directions: their singular value is reported as 0 and their left
/// vector is completed by Gram–Schmidt.
const NULL_COLUMN: f64 = 1e-13;

/// Thin SVD `A = U diag(σ) Vᵀ` with `p = min(m, n)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `m × p`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative, length `p`.
    pub singular_values: Vec<f64>,
    /// `p × n`, orthonormal rows.
    pub v_t: Matrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.singular_values.len()
    }

    /// `U diag(σ) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_columns(&self.singular_values)
            .and_then(|us| us.matmul(&self.v_t))
            .expect("svd factors have consistent shapes")
    }
}

/// Singular value decomposition by one-sided Jacobi rotations.
///
/// Sign convention: the first entry of each left singular vector with
/// magnitude above `1e-12` is positive, and the matching row of `v_t` is
/// flipped with it.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let (u, singular_values, v_t) = if m >= n {
        let (u, s, v) = jacobi_tall(a)?;
        (u, s, v.transpose())
    } else {
        // Aᵀ = U' Σ V'ᵀ  ⇒  A = V' Σ U'ᵀ
        let (u_t, s, v_t) = jacobi_tall(&a.transpose())?;
        (v_t, s, u_t.transpose())
    };
    let mut result = SvdResult {
        u,
        singular_values,
        v_t,
    };
    fix_signs(&mut result);
    Ok(result)
}

/// Keeps the leading `r` components.
pub fn truncate_svd(s: &SvdResult, r: usize) -> Result<SvdResult> {
    let p = s.singular_values.len();
    if r == 0 || r > p {
        return Err(invalid(format!("truncation rank {r} outside 1..={p}")));
    }
    Ok(SvdResult {
        u: s.u.column_block(0, r)?,
        singular_values: s.singular_values[..r].to_vec(),
        v_t: s.v_t.row_block(0, r)?,
    })
}

/// One-sided Jacobi on a matrix with `m >= n`. Returns `(U: m×n, σ, V: n×n)`.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = (m as f64) * f64::EPSILON;

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(CareError::NonConvergence("singular value decomposition"));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let cutoff = order.first().map_or(0.0, |&j| norms[j]) * NULL_COLUMN;
    let sigma: Vec<f64> = order
        .iter()
        .map(|&j| if norms[j] > cutoff { norms[j] } else { 0.0 })
        .collect();

    let mut left: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            (norms[j] > cutoff && norms[j] > 0.0)
                .then(|| cols[j].iter().map(|x| x / norms[j]).collect())
        })
        .collect();
    complete_orthonormal(&mut left, m);

    let mut u = vec![0.0; m * n];
    let mut vm = vec![0.0; n * n];
    for (k, &j) in order.iter().enumerate() {
        let col = left[k].as_ref().expect("completed");
        for i in 0..m {
            u[i * n + k] = col[i];
        }
        for i in 0..n {
            vm[i * n + k] = v[j][i];
        }
    }
    Ok((Matrix::from_raw(m, n, u), sigma, Matrix::from_raw(n, n, vm)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (xp, xq) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*xp, *xq);
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot,
/// choosing the standard basis vector with the largest residual each time.
fn complete_orthonormal(slots: &mut [Option<Vec<f64>>], m: usize) {
    for k in 0..slots.len() {
        if slots[k].is_some() {
            continue;
        }
        let basis: Vec<Vec<f64>> = slots.iter().flatten().cloned().collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            // Two passes of modified Gram–Schmidt.
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(&cand, b);
                    for (c, bi) in cand.iter_mut().zip(b) {
                        *c -= proj * bi;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("m >= 1");
        slots[k] = Some(cand.into_iter().map(|x| x / norm).collect());
    }
}

fn fix_signs(s: &mut SvdResult) {
    let (m, p) = s.u.shape();
    let n = s.v_t.cols();
    for k in 0..p {
        let flip = (0..m)
            .map(|i| s.u[(i, k)])
            .find(|x| x.abs() > 1e-12)
            .is_some_and(|x| x < 0.0);
        if flip {
            let u = s.u.data_mut();
            for i in 0..m {
                u[i * p + k] = -u[i * p + k];
            }
            let vt = s.v_t.data_mut();
            for j in 0..n {
                vt[k * n + j] = -vt[k * n + j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;
    use proptest::prelude::*;

    fn check_invariants(a: &Matrix, s: &SvdResult) {
        let p = a.rows().min(a.cols());
        assert_eq!(s.singular_values.len(), p);
        assert!(s.singular_values.iter().all(|&x| x >= 0.0));
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let utu = s.u.transpose().matmul(&s.u).unwrap();
        assert!(
            utu.max_abs_diff(&Matrix::identity(p)).unwrap() < 1e-10,
            "U not orthonormal"
        );
        let vvt = s.v_t.matmul(&s.v_t.transpose()).unwrap();
        assert!(
            vvt.max_abs_diff(&Matrix::identity(p)).unwrap() < 1e-10,
            "V not orthonormal"
        );
        let err = s.reconstruct().sub(a).unwrap().frobenius_norm_sq().sqrt();
        let scale = a.frobenius_norm_sq().sqrt();
        assert!(
            err <= 1e-9 * scale.max(1e-300) || err == 0.0,
            "reconstruction error {err}"
        );
    }

    #[test]
    fn diagonal_case() {
        let a = Matrix::from_diag(&[3.0, 2.0]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 2.0]);
        assert_eq!(s.u, Matrix::identity(2));
        assert_eq!(s.v_t, Matrix::identity(2));
    }

    #[test]
    fn rank_one_outer_product() {
        // |u| = 2, |v| = 3 → σ₁ = 6
        let u = [2.0 / 3.0_f64.sqrt(); 3];
        let v = [3.0 / 2.0_f64.sqrt(), 0.0, -3.0 / 2.0_f64.sqrt()];
        let a = Matrix::from_fn(3, 3, |i, j| u[i] * v[j]).unwrap();
        let s = svd(&a).unwrap();
        assert!((s.singular_values[0] - 6.0).abs() < 1e-12);
        assert!(s.singular_values[1..].iter().all(|&x| x < 1e-12));
        check_invariants(&a, &s);
    }

    #[test]
    fn zero_matrix() {
        let a = Matrix::zeros(3, 2);
        let s = svd(&a).unwrap();
        assert_eq!(s.singular_values, vec![0.0, 0.0]);
        check_invariants(&a, &s);
    }

    #[test]
    fn wide_and_tall_random() {
        let mut rng = GaussianStream::new(21);
        for (m, n) in [
            (1, 1),
            (1, 5),
            (5, 1),
            (4, 7),
            (7, 4),
            (32, 48),
            (48, 32),
            (20, 20),
        ] {
            let a = rng.matrix(m, n, 1.0);
            check_invariants(&a, &svd(&a).unwrap());
        }
    }

    #[test]
    fn rank_deficient_has_orthonormal_completion() {
        let mut rng = GaussianStream::new(4);
        let b = rng.matrix(12, 3, 1.0);
        let c = rng.matrix(3, 10, 1.0);
        let a = b.matmul(&c).unwrap();
        let s = svd(&a).unwrap();
        assert!(s.singular_values[3] <= 1e-12 * s.singular_values[0]);
        check_invariants(&a, &s);
    }

    #[test]
    fn sign_convention() {
        let mut rng = GaussianStream::new(8);
        let a = rng.matrix(6, 4, 1.0);
        let s = svd(&a).unwrap();
        for k in 0..4 {
            let first = (0..6)
                .map(|i| s.u[(i, k)])
                .find(|x| x.abs() > 1e-12)
                .unwrap();
            assert!(first > 0.0);
        }
        // negating the input flips V rows only
        let neg = svd(&a.scale(-1.0)).unwrap();
        assert_eq!(neg.u, s.u);
    }

    #[test]
    fn truncation() {
        let a = Matrix::from_diag(&[3.0, 2.0, 1.0]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(truncate_svd(&s, 3).unwrap(), s);
        assert_eq!(truncate_svd(&s, 2).unwrap().singular_values, vec![3.0, 2.0]);
        assert!(truncate_svd(&s, 0).is_err());
        assert!(truncate_svd(&s, 4).is_err());
    }

    #[test]
    fn truncation_residual_is_tail_energy() {
        let mut rng = GaussianStream::new(12);
        let a = rng.matrix(9, 6, 1.0);
        let s = svd(&a).unwrap();
        for r in 1..=6 {
            let t = truncate_svd(&s, r).unwrap();
            let direct = a.sub(&t.reconstruct()).unwrap().frobenius_norm_sq();
            let tail: f64 = s.singular_values[r..].iter().map(|x| x * x).sum();
            let denom = tail.max(f64::EPSILON * a.frobenius_norm_sq());
            assert!(
                (direct - tail).abs() <= 1e-9 * denom,
                "r={r}: {direct} vs {tail}"
            );
        }
    }

    #[test]
    fn deterministic_bits() {
        let mut rng = GaussianStream::new(99);
        let a = rng.matrix(10, 13, 1.0);
        assert_eq!(svd(&a).unwrap(), svd(&a.clone()).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn invariants_hold(seed in any::<u64>(), m in 1usize..24, n in 1usize..24) {
            let a = GaussianStream::new(seed).matrix(m, n, 1.0);
            check_invariants(&a, &svd(&a).unwrap());
        }
    }
}
