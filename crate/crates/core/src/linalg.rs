//! Small dense linear-algebra helpers shared by the filter, estimators and costs.

use nalgebra::{DMatrix, DVector};

/// Replace `a` by `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut a: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut a);
    a
}

pub fn is_finite(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn is_diagonal(a: &DMatrix<f64>) -> bool {
    a.iter()
        .enumerate()
        .all(|(idx, v)| idx % a.nrows() == idx / a.nrows() || *v == 0.0)
}

pub fn diag_matrix(d: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(d))
}

pub fn diag_vec(a: &DMatrix<f64>) -> Vec<f64> {
    a.diagonal().iter().copied().collect()
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Result of solving against a symmetric positive-definite matrix.
pub struct SpdSolve {
    pub solution: DMatrix<f64>,
    /// A ridge of `1e-12 * trace / dim` had to be added before factorizing.
    pub ridged: bool,
}

/// Solve `a * x = b` for symmetric positive-definite `a` via Cholesky.
///
/// Falls back to adding a ridge of `1e-12 * trace / dim` on the diagonal and
/// reports it. Returns `None` when the ridged matrix still fails to factor.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<SpdSolve> {
    if let Some(chol) = a.clone().cholesky() {
        return Some(SpdSolve {
            solution: chol.solve(b),
            ridged: false,
        });
    }
    let dim = a.nrows().max(1) as f64;
    let ridge = (1e-12 * a.trace().abs() / dim).max(f64::MIN_POSITIVE);
    let mut reg = a.clone();
    for i in 0..a.nrows() {
        reg[(i, i)] += ridge;
    }
    reg.cholesky().map(|chol| SpdSolve {
        solution: chol.solve(b),
        ridged: true,
    })
}

/// Inverse of a symmetric matrix whose eigenvalues are floored at
/// `rel_floor * |trace|`. The flag reports whether any eigenvalue was lifted.
pub fn floored_inverse(a: &DMatrix<f64>, rel_floor: f64) -> (DMatrix<f64>, bool) {
    let n = a.nrows();
    let eig = symmetrized(a.clone()).symmetric_eigen();
    let floor = (rel_floor * a.trace().abs()).max(f64::MIN_POSITIVE.sqrt());
    let mut floored = false;
    let inv_vals = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&l| {
            if l < floor {
                floored = true;
                1.0 / floor
            } else {
                1.0 / l
            }
        }),
    );
    let v = &eig.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    (symmetrized(inv), floored)
}

/// Symmetric square-root factor `L` with `L Lᵀ = a` for a PSD matrix.
///
/// Diagonal inputs take the exact element-wise square root so that sampling
/// stays bit-reproducible. Returns `None` when `a` has an eigenvalue below
/// `-1e-12 * max(1, |trace|)`.
pub fn psd_factor(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    if !is_finite(a) {
        return None;
    }
    for i in 0..n {
        for j in 0..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * (1.0 + a[(i, j)].abs()) {
                return None;
            }
        }
    }
    if is_diagonal(a) {
        if a.diagonal().iter().any(|&d| d < 0.0) {
            return None;
        }
        return Some(DMatrix::from_diagonal(&a.diagonal().map(f64::sqrt)));
    }
    let eig = a.clone().symmetric_eigen();
    let tol = -1e-12 * a.trace().abs().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < tol) {
        return None;
    }
    let sq = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&sq))
}

/// Upper-left `n × n` block.
pub fn top_left(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    a.view((0, 0), (n, n)).into_owned()
}

/// Lower-right `p × p` block starting at `(n, n)`.
pub fn bottom_right(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let p = a.nrows() - n;
    a.view((n, n), (p, p)).into_owned()
}

/// `v vᵀ`.
pub fn outer(v: &DVector<f64>) -> DMatrix<f64> {
    v * v.transpose()
}

/// Serialize a `DMatrix<f64>` as a list of rows.
pub mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("matrix rows have different lengths"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_plain_and_ridged() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let s = spd_solve(&a, &b).unwrap();
        assert!(!s.ridged);
        assert!((&a * &s.solution - &b).norm() < 1e-14);

        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let s = spd_solve(&singular, &b).unwrap();
        assert!(s.ridged);
    }

    #[test]
    fn floored_inverse_reports_indefinite() {
        let a = diag_matrix(&[2.0, -1.0]);
        let (_, floored) = floored_inverse(&a, 1e-10);
        assert!(floored);
        let (inv, floored) = floored_inverse(&diag_matrix(&[2.0, 4.0]), 1e-10);
        assert!(!floored);
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((inv[(1, 1)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn psd_factor_rejects_negative() {
        assert!(psd_factor(&diag_matrix(&[1.0, -1e-3])).is_none());
        let full = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let l = psd_factor(&full).unwrap();
        assert!((&l * l.transpose() - &full).norm() < 1e-12);
        let l = psd_factor(&diag_matrix(&[4.0, 0.0])).unwrap();
        assert_eq!(l[(0, 0)], 2.0);
        assert_eq!(l[(1, 1)], 0.0);
    }

    #[test]
    fn rows_round_trip() {
        #[derive(serde::Serialize, serde::Deserialize)]
        struct Wrap(#[serde(with = "serde_rows")] DMatrix<f64>);
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        let text = serde_json::to_string(&Wrap(m.clone())).unwrap();
        assert_eq!(text, "[[1.0,2.0,3.0],[4.0,5.0,6.5]]");
        let back: Wrap = serde_json::from_str(&text).unwrap();
        assert_eq!(back.0, m);
        assert!(serde_json::from_str::<Wrap>("[[1.0],[2.0,3.0]]").is_err());
    }
}
