//! Orthogonal Procrustes estimation of the translation matrix.
//!
//! With unit-length rows, minimizing `‖Y − XW‖_F²` over orthogonal `W`, maximizing
//! the summed cosines between `Y_i` and `Wᵀ X_i`, and maximizing the summed inner
//! products all select the same `W`: the orthogonal polar factor of `XᵀY`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, polar_factor, DenseMatrix};

/// Tolerance on row norms accepted by [`SphericalMatrix::new`].
pub const UNIT_ROW_TOL: f64 = 1e-10;

/// Tolerance on `W Wᵀ = I` accepted by [`OrthogonalMatrix::new`].
pub const ORTHOGONAL_TOL: f64 = 1e-10;

/// An `n × p` matrix whose rows lie on the unit sphere `S^{p−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SphericalMatrix(DenseMatrix);

impl SphericalMatrix {
    /// Validates row norms against [`UNIT_ROW_TOL`].
    pub fn new(m: DenseMatrix) -> Result<Self> {
        Self::with_tolerance(m, UNIT_ROW_TOL)
    }

    pub fn with_tolerance(m: DenseMatrix, tol: f64) -> Result<Self> {
        if m.rows() < 1 || m.cols() < 2 {
            return Err(Error::DimensionMismatch {
                context: "SphericalMatrix",
                expected: "n >= 1 rows and p >= 2 columns".into(),
                got: format!("{}x{}", m.rows(), m.cols()),
            });
        }
        for (i, row) in m.row_iter().enumerate() {
            let nr = norm(row);
            if (nr - 1.0).abs() > tol {
                return Err(Error::NotUnitRow { row: i, norm: nr });
            }
        }
        Ok(Self(m))
    }

    pub(crate) fn from_trusted(m: DenseMatrix) -> Self {
        Self(m)
    }

    #[inline]
    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_inner(self) -> DenseMatrix {
        self.0
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn select_rows(&self, rows: &[usize]) -> SphericalMatrix {
        Self(self.0.select_rows(rows))
    }
}

/// A `p × p` matrix with `W Wᵀ = I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrthogonalMatrix(DenseMatrix);

impl OrthogonalMatrix {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch {
                context: "OrthogonalMatrix",
                expected: "square matrix".into(),
                got: format!("{}x{}", m.rows(), m.cols()),
            });
        }
        let defect = m.orthogonality_defect();
        if defect > ORTHOGONAL_TOL {
            return Err(crate::error::invalid(
                "orthogonal matrix",
                format!("W Wᵀ deviates from I by {defect:e}"),
            ));
        }
        Ok(Self(m))
    }

    pub(crate) fn from_trusted(m: DenseMatrix) -> Self {
        Self(m)
    }

    pub fn identity(p: usize) -> Self {
        Self(DenseMatrix::identity(p))
    }

    #[inline]
    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_inner(self) -> DenseMatrix {
        self.0
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.0.rows()
    }

    pub fn transpose(&self) -> OrthogonalMatrix {
        Self(self.0.transpose())
    }
}

fn check_conformal(x: &SphericalMatrix, y: &SphericalMatrix) -> Result<()> {
    if x.as_matrix().shape() != y.as_matrix().shape() {
        return Err(Error::DimensionMismatch {
            context: "procrustes",
            expected: format!("y of shape {}x{}", x.n(), x.p()),
            got: format!("{}x{}", y.n(), y.p()),
        });
    }
    Ok(())
}

/// Polar factor of `XᵀY`: the orthogonal `W` minimizing `‖Y − XW‖_F²`.
///
/// Fails with [`Error::TooFewRows`] unless `n > p`, and with
/// [`Error::RankDeficient`] (carrying `σ_p(XᵀY)`) when `XᵀY` is singular.
/// No centering is applied.
pub fn procrustes_fit(x: &SphericalMatrix, y: &SphericalMatrix) -> Result<OrthogonalMatrix> {
    check_conformal(x, y)?;
    if x.n() <= x.p() {
        return Err(Error::TooFewRows {
            rows: x.n(),
            p: x.p(),
        });
    }
    let cross = x.as_matrix().transpose_matmul(y.as_matrix())?;
    polar_factor(&cross)
}

/// Procrustes fit restricted to `rows` (Step III on the estimated matched set).
pub fn procrustes_fit_subset(
    x: &SphericalMatrix,
    y: &SphericalMatrix,
    rows: &[usize],
) -> Result<OrthogonalMatrix> {
    procrustes_fit_pairs(x, y, rows, rows)
}

/// Procrustes fit on explicit `(x_rows[k], y_rows[k])` correspondences.
pub fn procrustes_fit_pairs(
    x: &SphericalMatrix,
    y: &SphericalMatrix,
    x_rows: &[usize],
    y_rows: &[usize],
) -> Result<OrthogonalMatrix> {
    check_conformal(x, y)?;
    if x_rows.len() != y_rows.len() {
        return Err(Error::DimensionMismatch {
            context: "procrustes_fit_pairs",
            expected: format!("{} y rows", x_rows.len()),
            got: format!("{}", y_rows.len()),
        });
    }
    if x_rows.len() <= x.p() {
        return Err(Error::TooFewRows {
            rows: x_rows.len(),
            p: x.p(),
        });
    }
    let p = x.p();
    let mut cross = DenseMatrix::zeros(p, p);
    for (&i, &j) in x_rows.iter().zip(y_rows) {
        let (xi, yj) = (x.row(i), y.row(j));
        for (r, &a) in xi.iter().enumerate() {
            let dst = cross.row_mut(r);
            for (d, &b) in dst.iter_mut().zip(yj) {
                *d += a * b;
            }
        }
    }
    polar_factor(&cross)
}

/// `‖Y − XW‖_F²`.
pub fn frobenius_loss(x: &DenseMatrix, y: &DenseMatrix, w: &DenseMatrix) -> Result<f64> {
    let xw = x.matmul(w)?;
    Ok(y.sub(&xw)?.data().iter().map(|v| v * v).sum())
}

/// Frobenius loss over a subset of rows.
pub fn frobenius_loss_rows(
    x: &DenseMatrix,
    y: &DenseMatrix,
    w: &DenseMatrix,
    rows: &[usize],
) -> Result<f64> {
    frobenius_loss(&x.select_rows(rows), &y.select_rows(rows), w)
}

/// `Σ_i cos(Y_i, Wᵀ X_i)`.
pub fn cosine_sum(x: &SphericalMatrix, y: &SphericalMatrix, w: &OrthogonalMatrix) -> Result<f64> {
    let xw = x.as_matrix().matmul(w.as_matrix())?;
    let mut total = 0.0;
    for i in 0..x.n() {
        total += crate::linalg::cosine(y.row(i), xw.row(i))?;
    }
    Ok(total)
}

/// `Σ_i Y_iᵀ (Wᵀ X_i)`.
pub fn inner_product_sum(
    x: &SphericalMatrix,
    y: &SphericalMatrix,
    w: &OrthogonalMatrix,
) -> Result<f64> {
    let xw = x.as_matrix().matmul(w.as_matrix())?;
    Ok((0..x.n()).map(|i| dot(y.row(i), xw.row(i))).sum())
}
