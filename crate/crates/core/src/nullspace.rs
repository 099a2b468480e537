//! Approximate null space of the global prompts.
//!
//! Each prompt layer `P` (tokens x embedding) yields an uncentered covariance
//! `PᵀP` over the embedding dimension. Its eigenvectors with the smallest
//! eigenvalues span the approximate null space; local updates are projected
//! onto that span so the principal directions of the previous global prompts
//! stay untouched.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const SIGN_EPS: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenpairs of a symmetric PSD matrix, sorted by descending eigenvalue.
///
/// Column `j` of `basis` is the eigenvector for `values[j]`. Each column is
/// oriented so its first component with magnitude above `1e-12` is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub basis: DMatrix<f64>,
    pub values: Vec<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U diag(Λ) Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = self.dim();
        let scaled = DMatrix::from_fn(d, d, |i, j| self.basis[(i, j)] * self.values[j]);
        &scaled * self.basis.transpose()
    }
}

/// Selected approximate null space for one prompt layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceBasis {
    pub layer_index: usize,
    pub gamma_percent: f64,
    /// Principal directions kept frozen (first `d - m` eigenvectors).
    pub u1: DMatrix<f64>,
    /// Null-space directions (last `m` eigenvectors).
    pub u2: DMatrix<f64>,
    /// `U₂U₂ᵀ`, symmetric `d x d`.
    pub projector: DMatrix<f64>,
    pub residual_ratio: f64,
}

impl NullSpaceBasis {
    pub fn dim(&self) -> usize {
        self.projector.nrows()
    }

    /// Number of selected null-space directions.
    pub fn rank(&self) -> usize {
        self.u2.ncols()
    }
}

fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} contains non-finite entries"
        )))
    }
}

/// `Σ = PᵀP` for one prompt layer, symmetrized after the product.
pub fn uncentered_covariance(prompt_layer: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if prompt_layer.nrows() == 0 || prompt_layer.ncols() == 0 {
        return Err(Error::invalid("prompt layer must be non-empty"));
    }
    ensure_finite(prompt_layer, "prompt layer")?;
    let gram = prompt_layer.transpose() * prompt_layer;
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("prompt covariance overflowed"));
    }
    Ok((&gram + gram.transpose()) * 0.5)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Converges when the off-diagonal Frobenius norm drops to `1e-12·‖Σ‖_F`,
/// with a cap of 100 sweeps. Round-off negatives are clamped to zero; equal
/// eigenvalues keep the order Jacobi produced them in.
pub fn eigendecompose(sigma: &DMatrix<f64>) -> Result<EigenDecomposition> {
    let d = sigma.nrows();
    if d == 0 || sigma.ncols() != d {
        return Err(Error::invalid(format!(
            "expected a non-empty square matrix, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    ensure_finite(sigma, "covariance")?;
    let scale = sigma.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    for i in 0..d {
        for j in (i + 1)..d {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let mut a = (sigma + sigma.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(d, d);
    let frob = a.norm();
    let tol = 1e-12 * frob;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > tol {
        return Err(Error::numerical(format!(
            "Jacobi eigensolver did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let neg_tol = 1e-8 * (1.0 + frob);
    let raw: Vec<f64> = (0..d).map(|i| a[(i, i)]).collect();
    if let Some(bad) = raw.iter().find(|&&x| x < -neg_tol) {
        return Err(Error::invalid(format!(
            "matrix is not positive semidefinite (eigenvalue {bad:e})"
        )));
    }
    let clamped: Vec<f64> = raw.iter().map(|&x| x.max(0.0)).collect();

    let mut order: Vec<usize> = (0..d).collect();
    // sort_by is stable, so ties keep Jacobi output order
    order.sort_by(|&i, &j| clamped[j].total_cmp(&clamped[i]));

    let mut basis = DMatrix::<f64>::zeros(d, d);
    let mut values = Vec::with_capacity(d);
    for (dst, &src) in order.iter().enumerate() {
        let col = v.column(src);
        let flip = col
            .iter()
            .find(|x| x.abs() > SIGN_EPS)
            .is_some_and(|&x| x < 0.0);
        let sign = if flip { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[(i, dst)] = sign * col[i];
        }
        values.push(clamped[src]);
    }
    Ok(EigenDecomposition { basis, values })
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// `A ← JᵀAJ`, `V ← VJ` for the rotation in the (p, q) plane.
fn rotate(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let d = a.nrows();
    for k in 0..d {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..d {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..d {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Number of null-space directions selected for `gamma_percent` of `d`.
pub fn null_rank(gamma_percent: f64, d: usize) -> usize {
    // the epsilon absorbs products like 0.29 * 100 landing just below 29
    let m = (gamma_percent * d as f64 / 100.0 + 1e-9).floor() as usize;
    m.min(d)
}

/// Keeps the eigenvectors of the smallest `γ%` eigenvalues as the null space.
pub fn select_null_basis(
    eig: &EigenDecomposition,
    gamma_percent: f64,
    layer_index: usize,
) -> Result<NullSpaceBasis> {
    if !(0.0..=100.0).contains(&gamma_percent) {
        return Err(Error::invalid(format!(
            "gamma must lie in [0, 100], got {gamma_percent}"
        )));
    }
    let d = eig.dim();
    let m = null_rank(gamma_percent, d);
    let keep = d - m;
    let u1 = eig.basis.columns(0, keep).into_owned();
    let u2 = eig.basis.columns(keep, m).into_owned();
    // the full space projects exactly onto itself
    let projector = if m == d {
        DMatrix::identity(d, d)
    } else {
        let raw = &u2 * u2.transpose();
        (&raw + raw.transpose()) * 0.5
    };

    let residual_ratio = if m == 0 {
        0.0
    } else if m == d {
        1.0
    } else {
        let total: f64 = eig.values.iter().sum();
        if total > 0.0 {
            let selected: f64 = eig.values[keep..].iter().sum();
            (selected / total).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };

    Ok(NullSpaceBasis {
        layer_index,
        gamma_percent,
        u1,
        u2,
        projector,
        residual_ratio,
    })
}

/// Covariance, eigendecomposition and selection for one prompt layer.
pub fn null_space_of(
    prompt_layer: &DMatrix<f64>,
    gamma_percent: f64,
    layer_index: usize,
) -> Result<NullSpaceBasis> {
    let sigma = uncentered_covariance(prompt_layer)?;
    let eig = eigendecompose(&sigma)?;
    select_null_basis(&eig, gamma_percent, layer_index)
}

/// `ΔP = candidate · Π`: projects every token's embedding onto span(U₂).
pub fn project_update(candidate: &DMatrix<f64>, basis: &NullSpaceBasis) -> Result<DMatrix<f64>> {
    if candidate.ncols() != basis.dim() {
        return Err(Error::invalid(format!(
            "candidate has {} columns but the projector is {}x{}",
            candidate.ncols(),
            basis.dim(),
            basis.dim()
        )));
    }
    if basis.u2.ncols() == basis.dim() {
        return Ok(candidate.clone());
    }
    Ok(candidate * &basis.projector)
}

/// `(layer_index, R)` per basis, in input order.
pub fn residual_ratio_report(bases: &[NullSpaceBasis]) -> Vec<(usize, f64)> {
    bases
        .iter()
        .map(|b| (b.layer_index, b.residual_ratio))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn covariance_examples() {
        let eye = uncentered_covariance(&mat(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(eye, DMatrix::identity(2, 2));

        let zero = uncentered_covariance(&DMatrix::zeros(3, 4)).unwrap();
        assert_eq!(zero, DMatrix::zeros(4, 4));

        let s = uncentered_covariance(&mat(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(s, mat(2, 2, &[10.0, 14.0, 14.0, 20.0]));
    }

    #[test]
    fn covariance_rejects_nan() {
        let p = mat(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(
            uncentered_covariance(&p),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn eigen_identity_keeps_order() {
        let eig = eigendecompose(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0, 1.0]);
        assert_eq!(eig.basis, DMatrix::identity(3, 3));
    }

    #[test]
    fn eigen_diagonal() {
        let eig = eigendecompose(&mat(2, 2, &[4.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(eig.values, vec![4.0, 1.0]);
        assert_eq!(eig.basis, DMatrix::identity(2, 2));

        // unsorted diagonal gets permuted
        let eig = eigendecompose(&mat(2, 2, &[1.0, 0.0, 0.0, 4.0])).unwrap();
        assert_eq!(eig.values, vec![4.0, 1.0]);
        assert_eq!(eig.basis, mat(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn eigen_two_by_two_matches_characteristic_roots() {
        // λ² − 30λ + 4 = 0  →  λ = 15 ± √221
        let eig = eigendecompose(&mat(2, 2, &[10.0, 14.0, 14.0, 20.0])).unwrap();
        let root = 221.0_f64.sqrt();
        assert!((eig.values[0] - (15.0 + root)).abs() < 1e-12);
        assert!((eig.values[1] - (15.0 - root)).abs() < 1e-12);
        assert!((eig.values[0] - 29.866).abs() < 1e-3);
        assert!((eig.values[1] - 0.134).abs() < 1e-3);
        for j in 0..2 {
            let first = eig
                .basis
                .column(j)
                .iter()
                .copied()
                .find(|x| x.abs() > 1e-12);
            assert!(first.unwrap() > 0.0);
        }
    }

    #[test]
    fn eigen_rejects_asymmetric_and_indefinite() {
        let asym = mat(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(eigendecompose(&asym), Err(Error::InvalidInput(_))));
        let indefinite = mat(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            eigendecompose(&indefinite),
            Err(Error::InvalidInput(_))
        ));
        assert!(eigendecompose(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn eigen_zero_matrix() {
        let eig = eigendecompose(&DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(eig.values, vec![0.0; 4]);
        assert_eq!(eig.basis, DMatrix::identity(4, 4));
    }

    #[test]
    fn selection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_matrix(&mut rng, 7, 5);
        let eig = eigendecompose(&uncentered_covariance(&p).unwrap()).unwrap();
        let full = select_null_basis(&eig, 100.0, 0).unwrap();
        assert_eq!(full.rank(), 5);
        assert!((&full.projector - DMatrix::identity(5, 5)).norm() < 1e-12);
        assert_eq!(full.residual_ratio, 1.0);

        let empty = select_null_basis(&eig, 0.0, 0).unwrap();
        assert_eq!(empty.rank(), 0);
        assert_eq!(empty.projector, DMatrix::zeros(5, 5));
        assert_eq!(empty.residual_ratio, 0.0);

        let diag = eigendecompose(&mat(2, 2, &[4.0, 0.0, 0.0, 1.0])).unwrap();
        let half = select_null_basis(&diag, 50.0, 0).unwrap();
        assert_eq!(half.u2, mat(2, 1, &[0.0, 1.0]));
        assert_eq!(half.projector, mat(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        assert!((half.residual_ratio - 0.2).abs() < 1e-15);
    }

    #[test]
    fn selection_rejects_out_of_range_gamma() {
        let eig = eigendecompose(&DMatrix::identity(2, 2)).unwrap();
        assert!(select_null_basis(&eig, -1.0, 0).is_err());
        assert!(select_null_basis(&eig, 100.5, 0).is_err());
        assert!(select_null_basis(&eig, f64::NAN, 0).is_err());
    }

    #[test]
    fn null_rank_floors() {
        assert_eq!(null_rank(80.0, 32), 25);
        assert_eq!(null_rank(29.0, 100), 29);
        assert_eq!(null_rank(99.9, 10), 9);
        assert_eq!(null_rank(100.0, 10), 10);
    }

    #[test]
    fn projection_examples() {
        let diag = eigendecompose(&mat(2, 2, &[4.0, 0.0, 0.0, 1.0])).unwrap();
        let half = select_null_basis(&diag, 50.0, 0).unwrap();
        let out = project_update(&mat(1, 2, &[3.0, 7.0]), &half).unwrap();
        assert_eq!(out, mat(1, 2, &[0.0, 7.0]));

        let g = mat(2, 2, &[1.5, -2.0, 0.25, 8.0]);
        let full = select_null_basis(&diag, 100.0, 0).unwrap();
        assert_eq!(project_update(&g, &full).unwrap(), g);
        let none = select_null_basis(&diag, 0.0, 0).unwrap();
        assert_eq!(project_update(&g, &none).unwrap(), DMatrix::zeros(2, 2));

        assert!(project_update(&DMatrix::zeros(1, 3), &half).is_err());
    }

    #[test]
    fn residual_report() {
        assert!(residual_ratio_report(&[]).is_empty());

        let diag = eigendecompose(&mat(2, 2, &[4.0, 0.0, 0.0, 1.0])).unwrap();
        let mut b = select_null_basis(&diag, 50.0, 3).unwrap();
        b.residual_ratio = 0.2;
        assert_eq!(residual_ratio_report(&[b]), vec![(3, 0.2)]);

        let sweep: Vec<_> = [0.0, 50.0, 100.0]
            .iter()
            .enumerate()
            .map(|(i, &g)| select_null_basis(&diag, g, i).unwrap())
            .collect();
        let r: Vec<f64> = residual_ratio_report(&sweep).iter().map(|x| x.1).collect();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 0.2).abs() < 1e-15);
        assert_eq!(r[2], 1.0);
    }

    #[test]
    fn reconstruction_on_random_psd_up_to_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..100 {
            let d = 1 + (case * 63) / 99;
            let rows = rng.random_range(1..=d + 4);
            let p = random_matrix(&mut rng, rows, d);
            let sigma = uncentered_covariance(&p).unwrap();
            let eig = eigendecompose(&sigma).unwrap();
            let err = (eig.reconstruct() - &sigma).norm();
            assert!(err < 1e-8 * (1.0 + sigma.norm()), "d={d} err={err:e}");
            let gram = eig.basis.transpose() * &eig.basis;
            assert!((gram - DMatrix::identity(d, d)).norm() < 1e-10);
            assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projector_is_spectral(seed in any::<u64>(), l in 1usize..16, d in 1usize..24, gamma in 0.0f64..=100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_matrix(&mut rng, l, d);
            let basis = null_space_of(&p, gamma, 0).unwrap();
            let pi = &basis.projector;
            prop_assert!((pi * pi - pi).norm() < 1e-10);
            prop_assert!((pi - pi.transpose()).norm() < 1e-12);
            prop_assert!((pi.trace() - basis.rank() as f64).abs() < 1e-8);

            // updates have no component along the preserved principal directions
            let g = random_matrix(&mut rng, l, d);
            let delta = project_update(&g, &basis).unwrap();
            prop_assert!((&delta * &basis.u1).norm() < 1e-8);
            let twice = project_update(&delta, &basis).unwrap();
            prop_assert!((twice - &delta).norm() < 1e-10);
        }

        #[test]
        fn residual_ratio_monotone_in_gamma(seed in any::<u64>(), l in 1usize..12, d in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_matrix(&mut rng, l, d);
            let eig = eigendecompose(&uncentered_covariance(&p).unwrap()).unwrap();
            let mut prev = -1.0;
            for g in 0..=20 {
                let b = select_null_basis(&eig, g as f64 * 5.0, 0).unwrap();
                prop_assert!((0.0..=1.0).contains(&b.residual_ratio));
                prop_assert!(b.residual_ratio >= prev);
                prev = b.residual_ratio;
            }
        }
    }

    #[test]
    fn overflowing_covariance_is_numerical() {
        let p = DMatrix::from_element(2, 2, 1e200);
        assert!(matches!(
            uncentered_covariance(&p),
            Err(Error::NumericalFailure(_))
        ));
    }
}
