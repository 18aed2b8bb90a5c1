//! Dense decompositions shared by the spline and factor solvers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Thin SVD `A = U diag(s) Vᵀ` with singular values in descending order.
///
/// Computed from the symmetric eigendecomposition of the smaller Gram matrix, with
/// `σ_i = ‖A v_i‖` and `u_i = A v_i / σ_i`. The leading triplets are accurate and
/// `A V Vᵀ = A` holds to rounding whenever `V` spans the row space; columns of `U` for
/// (numerically) zero singular values are left as zero vectors.
pub fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite matrix passed to SVD".into()));
    }
    if a.ncols() > a.nrows() {
        let (u, s, v) = thin_svd(&a.transpose())?;
        return Ok((v, s, u));
    }
    let n = a.ncols();
    let gram = a.tr_mul(a);
    let eig = ((&gram + gram.transpose()) * 0.5).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let v0 = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let av0 = a * &v0;
    // re-sort on the directly computed norms; they can reorder within rounding noise
    let norms: Vec<f64> = (0..n).map(|c| av0.column(c).norm()).collect();
    order = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let v = DMatrix::from_fn(n, n, |r, c| v0[(r, order[c])]);
    let av = DMatrix::from_fn(a.nrows(), n, |r, c| av0[(r, order[c])]);
    let s: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let top = s.first().copied().unwrap_or(0.0);
    let mut u = DMatrix::zeros(a.nrows(), n);
    for c in 0..n {
        if s[c] > 1e-14 * top && s[c] > 0.0 {
            u.column_mut(c).copy_from(&(av.column(c) / s[c]));
        }
    }
    Ok((u, s, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_constant() {
        let a = DMatrix::from_element(70, 24, 24f64.ln());
        let (u, s, v) = thin_svd(&a).unwrap();
        assert!((s[0] - 24f64.ln() * (70.0f64 * 24.0).sqrt()).abs() < 1e-10);
        let rec = u.column(0) * s[0] * v.column(0).transpose();
        assert!((rec - &a).amax() < 1e-12);
    }

    #[test]
    fn reconstructs_general_matrices() {
        for (r, c) in [(9, 4), (4, 9), (60, 24)] {
            let a = DMatrix::from_fn(r, c, |i, j| ((i * 37 + j * 11 + 5) % 17) as f64 / 4.0 - 2.0);
            let (u, s, v) = thin_svd(&a).unwrap();
            let rec = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.clone())) * v.transpose();
            assert!((rec - &a).amax() < 1e-10, "{r}x{c}");
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
