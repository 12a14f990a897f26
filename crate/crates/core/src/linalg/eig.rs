use super::Matrix;
use crate::error::{invalid, mismatch, CareError, Result};

const MAX_SWEEPS: usize = 100;

/// Relative clamp window for eigenvalues of nominally PSD input.
const PSD_CLAMP: f64 = 1e-8;

/// Eigendecomposition `S = V diag(λ) Vᵀ` of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigResult {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal columns, column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl EigResult {
    /// `V diag(f(λ)) Vᵀ`, symmetrized exactly.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        let scaled: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let v = &self.eigenvectors;
        let out = v.scale_columns(&scaled)?.matmul(&v.transpose())?;
        out.symmetrize()
    }

    pub fn reconstruct(&self) -> Result<Matrix> {
        self.map_spectrum(|l| l)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(S + Sᵀ)/2` first. Eigenvalues come back
/// non-increasing; each eigenvector is signed so that its largest-magnitude
/// entry (lowest row on ties) is positive.
pub fn sym_eig(s: &Matrix) -> Result<EigResult> {
    if !s.is_square() {
        return Err(mismatch(format!(
            "sym_eig needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let n = s.rows();
    let mut a = s.symmetrize()?.into_vec();
    let mut v = Matrix::identity(n).into_vec();

    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let floor = 1e-18 * frob;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q].abs();
                let scale = (a[p * n + p] * a[q * n + q]).abs().sqrt();
                if apq <= floor || apq <= f64::EPSILON * scale {
                    continue;
                }
                rotate(&mut a, &mut v, n, p, q);
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CareError::NonConvergence("symmetric eigendecomposition"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal eigenvalues in rotation order, so the output is
    // a pure function of the input bits.
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        let mut best = 0;
        for r in 1..n {
            if v[r * n + src].abs() > v[best * n + src].abs() {
                best = r;
            }
        }
        let sign = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vecs[r * n + col] = sign * v[r * n + src];
        }
    }
    Ok(EigResult {
        eigenvalues,
        eigenvectors: Matrix::from_raw(n, n, vecs),
    })
}

/// One Jacobi rotation zeroing `a[p][q]`, accumulated into `v`.
fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    for k in 0..n {
        let (akp, akq) = (a[k * n + p], a[k * n + q]);
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;

    for k in 0..n {
        let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

fn clamped_psd(s: &Matrix) -> Result<EigResult> {
    let mut eig = sym_eig(s)?;
    let threshold = -PSD_CLAMP * eig.max_eigenvalue().max(0.0);
    let min = eig.min_eigenvalue();
    if min < threshold {
        return Err(CareError::NotPsd {
            eigenvalue: min,
            threshold,
        });
    }
    for l in &mut eig.eigenvalues {
        *l = l.max(0.0);
    }
    Ok(eig)
}

/// Symmetric PSD square root. Eigenvalues down to `-1e-8·λ_max` are treated
/// as zero; anything more negative is an error.
pub fn sqrt_psd(s: &Matrix) -> Result<Matrix> {
    clamped_psd(s)?.map_spectrum(f64::sqrt)
}

fn checked_spd(s: &Matrix, min_eig: f64) -> Result<EigResult> {
    if !(min_eig > 0.0) {
        return Err(invalid(format!("min_eig must be positive, got {min_eig}")));
    }
    let eig = sym_eig(s)?;
    let min = eig.min_eigenvalue();
    if min < min_eig {
        return Err(CareError::Singular {
            eigenvalue: min,
            min_eig,
        });
    }
    Ok(eig)
}

/// `S^{-1/2}` for symmetric `S` whose eigenvalues are all at least `min_eig`.
pub fn inv_sqrt_psd(s: &Matrix, min_eig: f64) -> Result<Matrix> {
    checked_spd(s, min_eig)?.map_spectrum(|l| 1.0 / l.sqrt())
}

/// `S^{-1}` for symmetric `S` whose eigenvalues are all at least `min_eig`.
pub fn inv_spd(s: &Matrix, min_eig: f64) -> Result<Matrix> {
    checked_spd(s, min_eig)?.map_spectrum(|l| 1.0 / l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm_sq().sqrt() / b.frobenius_norm_sq().sqrt().max(1e-300)
    }

    fn random_psd(rng: &mut GaussianStream, n: usize, samples: usize) -> Matrix {
        let x = rng.matrix(samples, n, 1.0);
        x.transpose().matmul(&x).unwrap()
    }

    #[test]
    fn diagonal_case() {
        let e = sym_eig(&Matrix::from_diag(&[1.0, 4.0]).unwrap()).unwrap();
        assert_eq!(e.eigenvalues, vec![4.0, 1.0]);
        let perm = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(e.eigenvectors, perm);

        let e = sym_eig(&Matrix::from_diag(&[4.0, 1.0]).unwrap()).unwrap();
        assert_eq!(e.eigenvectors, Matrix::identity(2));
    }

    #[test]
    fn two_by_two_characteristic_polynomial() {
        // λ² − 4λ + 3 = 0 → λ ∈ {3, 1}
        let s = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eig(&s).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // Tie in magnitude: the lowest row is made positive.
        assert!((e.eigenvectors[(0, 0)] - h).abs() < 1e-14);
        assert!((e.eigenvectors[(1, 0)] - h).abs() < 1e-14);
        assert!((e.eigenvectors[(0, 1)] - h).abs() < 1e-14);
        assert!((e.eigenvectors[(1, 1)] + h).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix() {
        let e = sym_eig(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(
            sym_eig(&Matrix::zeros(2, 3)),
            Err(CareError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let mut rng = GaussianStream::new(7);
        for n in [1, 2, 5, 17, 32] {
            let g = rng.matrix(n, n, 1.0);
            let s = g.add(&g.transpose()).unwrap();
            let e = sym_eig(&s).unwrap();
            assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            assert!(rel_err(&e.reconstruct().unwrap(), &s) < 1e-9);
            let vtv = e.eigenvectors.transpose().matmul(&e.eigenvectors).unwrap();
            assert!(vtv.max_abs_diff(&Matrix::identity(n)).unwrap() < 1e-10);
        }
    }

    #[test]
    fn sqrt_examples() {
        let r = sqrt_psd(&Matrix::from_diag(&[4.0, 9.0]).unwrap()).unwrap();
        assert!(
            r.max_abs_diff(&Matrix::from_diag(&[2.0, 3.0]).unwrap())
                .unwrap()
                < 1e-15
        );
        assert_eq!(sqrt_psd(&Matrix::identity(3)).unwrap(), Matrix::identity(3));

        let s = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let r = sqrt_psd(&s).unwrap();
        assert!(r.matmul(&r).unwrap().max_abs_diff(&s).unwrap() < 1e-10);
    }

    #[test]
    fn sqrt_clamps_noise_but_rejects_indefinite() {
        let noisy = Matrix::from_diag(&[1.0, -1e-10]).unwrap();
        let r = sqrt_psd(&noisy).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
        let bad = Matrix::from_diag(&[1.0, -1e-3]).unwrap();
        assert!(matches!(sqrt_psd(&bad), Err(CareError::NotPsd { .. })));
    }

    #[test]
    fn inverse_sqrt_examples() {
        let r = inv_sqrt_psd(&Matrix::from_diag(&[4.0, 9.0]).unwrap(), 1e-12).unwrap();
        assert!(
            r.max_abs_diff(&Matrix::from_diag(&[0.5, 1.0 / 3.0]).unwrap())
                .unwrap()
                < 1e-15
        );
        assert_eq!(
            inv_sqrt_psd(&Matrix::identity(2), 0.5).unwrap(),
            Matrix::identity(2)
        );

        let mut rng = GaussianStream::new(11);
        let c = random_psd(&mut rng, 4, 2);
        let shrunk = c.scale(0.99).add(&Matrix::identity(4).scale(0.01)).unwrap();
        let inv = inv_sqrt_psd(&shrunk, 0.005).unwrap();
        let root = sqrt_psd(&shrunk).unwrap();
        assert!(
            inv.matmul(&root)
                .unwrap()
                .max_abs_diff(&Matrix::identity(4))
                .unwrap()
                < 1e-9
        );
    }

    #[test]
    fn inverse_rejects_singular() {
        let s = Matrix::from_diag(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            inv_sqrt_psd(&s, 1e-6),
            Err(CareError::Singular { .. })
        ));
        assert!(matches!(inv_spd(&s, 1e-6), Err(CareError::Singular { .. })));
        assert!(inv_sqrt_psd(&Matrix::identity(2), 0.0).is_err());
    }

    #[test]
    fn square_roots_on_random_shrunk_psd() {
        let mut rng = GaussianStream::new(3);
        for n in [2, 8, 16, 32] {
            let c = random_psd(&mut rng, n, n / 2 + 1);
            let lam = c.trace() / n as f64;
            let s = c
                .scale(0.99)
                .add(&Matrix::identity(n).scale(0.01 * lam))
                .unwrap();
            let root = sqrt_psd(&s).unwrap();
            assert!(rel_err(&root.matmul(&root).unwrap(), &s) < 1e-8);
            let inv = inv_sqrt_psd(&s, 0.009 * lam).unwrap();
            let prod = inv.matmul(&root).unwrap();
            assert!(rel_err(&prod, &Matrix::identity(n)) < 1e-8);
            let inv_full = inv_spd(&s, 0.009 * lam).unwrap();
            assert!(rel_err(&inv_full.matmul(&s).unwrap(), &Matrix::identity(n)) < 1e-8);
        }
    }

    #[test]
    fn deterministic_bits() {
        let mut rng = GaussianStream::new(5);
        let g = rng.matrix(12, 12, 1.0);
        let s = g.matmul(&g.transpose()).unwrap();
        assert_eq!(sym_eig(&s).unwrap(), sym_eig(&s.clone()).unwrap());
    }
}
