//! Dense linear-algebra kernels: a row-major matrix type, a one-sided Jacobi
//! SVD, polar factors, pseudo-inverses and a few vector helpers.

use std::fmt;
use std::ops::{Index, IndexMut};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spherical_regression::{OrthogonalMatrix, SphericalMatrix};

/// Default relative cutoff below which singular values are treated as zero.
pub const DEFAULT_PINV_REL_TOL: f64 = 1e-10;

/// Relative cutoff used by [`polar_factor`] to reject singular input.
pub const POLAR_REL_TOL: f64 = 1e-12;

const MAX_JACOBI_SWEEPS: usize = 80;

// Products above this many multiply-adds are split across threads.
const PAR_FLOP_THRESHOLD: usize = 1 << 20;

/// Row-major dense matrix of finite reals.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "DenseMatrix::new",
                expected: format!("{} entries", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "DenseMatrix::from_rows",
                    expected: format!("{cols} columns"),
                    got: format!("{} columns in row {i}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul",
                expected: format!("rhs with {} rows", self.cols),
                got: format!("{} rows", rhs.rows),
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (l, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[l * n..(l + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if m * k * n >= PAR_FLOP_THRESHOLD && n > 0 {
            out.par_chunks_mut(n).enumerate().for_each(kernel);
        } else if n > 0 {
            out.chunks_mut(n).enumerate().for_each(kernel);
        }
        Ok(Self::from_vec_unchecked(m, n, out))
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn transpose_matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != rhs.rows {
            return Err(Error::DimensionMismatch {
                context: "transpose_matmul",
                expected: format!("rhs with {} rows", self.rows),
                got: format!("{} rows", rhs.rows),
            });
        }
        let (p, q) = (self.cols, rhs.cols);
        let accumulate = |range: std::ops::Range<usize>| {
            let mut acc = vec![0.0; p * q];
            for i in range {
                let a = self.row(i);
                let b = rhs.row(i);
                for (r, &av) in a.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let dst = &mut acc[r * q..(r + 1) * q];
                    for (d, &bv) in dst.iter_mut().zip(b) {
                        *d += av * bv;
                    }
                }
            }
            acc
        };
        let n = self.rows;
        let data = if n * p * q >= PAR_FLOP_THRESHOLD {
            // Fixed chunking keeps the summation order independent of the thread count.
            let chunk = 256;
            let partials: Vec<Vec<f64>> = (0..n.div_ceil(chunk))
                .into_par_iter()
                .map(|c| accumulate(c * chunk..((c + 1) * chunk).min(n)))
                .collect();
            let mut total = vec![0.0; p * q];
            for part in partials {
                for (t, v) in total.iter_mut().zip(part) {
                    *t += v;
                }
            }
            total
        } else {
            accumulate(0..n)
        };
        Ok(Self::from_vec_unchecked(p, q, data))
    }

    /// `self * rhsᵀ`.
    pub fn matmul_transpose(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.cols {
            return Err(Error::DimensionMismatch {
                context: "matmul_transpose",
                expected: format!("rhs with {} columns", self.cols),
                got: format!("{} columns", rhs.cols),
            });
        }
        let (m, n) = (self.rows, rhs.rows);
        let mut out = vec![0.0; m * n];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let a = self.row(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a, rhs.row(j));
            }
        };
        if m * n * self.cols >= PAR_FLOP_THRESHOLD && n > 0 {
            out.par_chunks_mut(n).enumerate().for_each(kernel);
        } else if n > 0 {
            out.chunks_mut(n).enumerate().for_each(kernel);
        }
        Ok(Self::from_vec_unchecked(m, n, out))
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    fn zip_with(
        &self,
        rhs: &DenseMatrix,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimensionMismatch {
                context,
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", rhs.rows, rhs.cols),
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * c).collect(),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference; shapes must agree.
    pub fn max_abs_diff(&self, rhs: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn select_rows(&self, rows: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self::from_vec_unchecked(rows.len(), self.cols, data)
    }

    pub fn row_range(&self, range: std::ops::Range<usize>) -> DenseMatrix {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Self::from_vec_unchecked(range.len(), self.cols, data)
    }

    pub fn select_cols(&self, cols: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Self::from_vec_unchecked(self.rows, cols.len(), data)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() < tol))
    }

    /// Max-abs deviation of `self * selfᵀ` from the identity.
    pub fn orthogonality_defect(&self) -> f64 {
        let g = self
            .matmul_transpose(self)
            .expect("square product always conforms");
        g.max_abs_diff(&DenseMatrix::identity(self.rows))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin singular value decomposition `a = u * diag(s) * vt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (v, s) in us.row_mut(i).iter_mut().zip(&self.singular_values) {
                *v *= s;
            }
        }
        us.matmul(&self.vt).expect("svd factors conform")
    }

    /// Number of singular values above `rel_tol * sigma_1`.
    pub fn effective_rank(&self, rel_tol: f64) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .take_while(|&&s| s > rel_tol * top)
            .count()
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Singular values are returned nonincreasing; each left singular vector is
/// signed so that its largest-magnitude entry is positive.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if let Some(pos) = a.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / a.cols.max(1),
            col: pos % a.cols.max(1),
        });
    }
    if a.rows >= a.cols {
        svd_tall(a)
    } else {
        let t = svd_tall(&a.transpose())?;
        // a = (u s vt)ᵀ = vtᵀ s uᵀ
        let mut out = SvdResult {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

fn svd_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Work on columns: cols[j] is column j of a (length m), vcols[j] column j of V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = (m.max(1) as f64) * f64::EPSILON;

    let mut converged = n < 2;
    for _ in 0..MAX_JACOBI_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let (ci, cj) = (&cols[i], &cols[j]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in ci.iter().zip(cj) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, i, j, c, s);
                rotate_pair(&mut vcols, i, j, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_JACOBI_SWEEPS,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut vt = DenseMatrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        let s = norms[src];
        singular_values.push(s);
        vt.row_mut(k).copy_from_slice(&vcols[src]);
        if s > f64::MIN_POSITIVE * 1e4 {
            u_cols.push(cols[src].iter().map(|v| v / s).collect());
        } else {
            u_cols.push(complete_basis(&u_cols, m));
        }
    }
    let u = DenseMatrix::from_fn(m, n, |i, k| u_cols[k][i]);
    let mut out = SvdResult {
        u,
        singular_values,
        vt,
    };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// A unit vector orthogonal to every vector in `basis` (which must be orthonormal).
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= d * bi;
                }
            }
        }
        let nv = norm(&v);
        if best.as_ref().is_none_or(|(bn, _)| nv > *bn) {
            best = Some((nv, v));
        }
        if nv > 0.5 {
            break;
        }
    }
    let (nv, v) = best.expect("m > basis.len() guarantees a residual");
    v.into_iter().map(|x| x / nv).collect()
}

fn fix_signs(r: &mut SvdResult) {
    let (m, k) = r.u.shape();
    for c in 0..k {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..m {
            let v = r.u[(i, c)];
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..m {
                r.u[(i, c)] = -r.u[(i, c)];
            }
            for v in r.vt.row_mut(c) {
                *v = -*v;
            }
        }
    }
}

/// Orthogonal polar factor `a (aᵀa)^{-1/2}` of a square nonsingular matrix.
pub fn polar_factor(a: &DenseMatrix) -> Result<OrthogonalMatrix> {
    if a.rows() != a.cols() {
        return Err(Error::DimensionMismatch {
            context: "polar_factor",
            expected: "square matrix".into(),
            got: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    let d = svd(a)?;
    let sigma_max = d.singular_values.first().copied().unwrap_or(0.0);
    let sigma_min = d.singular_values.last().copied().unwrap_or(0.0);
    if sigma_max <= 0.0 || sigma_min < POLAR_REL_TOL * sigma_max {
        return Err(Error::RankDeficient {
            sigma_min,
            sigma_max,
            rel_tol: POLAR_REL_TOL,
        });
    }
    let w = d.u.matmul(&d.vt)?;
    Ok(OrthogonalMatrix::from_trusted(w))
}

/// Moore–Penrose inverse treating singular values below `rel_tol * sigma_1` as zero.
pub fn pseudo_inverse(a: &DenseMatrix, rel_tol: f64) -> Result<DenseMatrix> {
    if rel_tol.is_nan() || rel_tol < 0.0 {
        return Err(crate::error::invalid("rel_tol", "must be nonnegative"));
    }
    let d = svd(a)?;
    let rank = d.effective_rank(rel_tol);
    let (m, n) = a.shape();
    let mut out = DenseMatrix::zeros(n, m);
    for k in 0..rank {
        let inv = 1.0 / d.singular_values[k];
        for i in 0..n {
            let v = d.vt[(k, i)] * inv;
            if v == 0.0 {
                continue;
            }
            for j in 0..m {
                out[(i, j)] += v * d.u[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine",
            expected: format!("length {}", u.len()),
            got: format!("length {}", v.len()),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Divides every row by its Euclidean norm.
pub fn row_normalize(a: &DenseMatrix) -> Result<SphericalMatrix> {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let nr = norm(row);
        if nr == 0.0 {
            return Err(Error::ZeroRow { row: i });
        }
        row.iter_mut().for_each(|v| *v /= nr);
    }
    Ok(SphericalMatrix::from_trusted(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn gram_defect(m: &DenseMatrix) -> f64 {
        m.transpose_matmul(m)
            .unwrap()
            .max_abs_diff(&DenseMatrix::identity(m.cols()))
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let d = svd(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(d.singular_values, vec![1.0, 1.0, 1.0]);
        let d = svd(&DenseMatrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(d.singular_values, vec![3.0, 2.0, 1.0]);
        assert!(d.reconstruct().max_abs_diff(&DenseMatrix::from_diag(&[1.0, 3.0, 2.0])) < 1e-15);
    }

    #[test]
    fn svd_random_tall_and_wide_reconstruct() {
        for (r, c, seed) in [(5, 3, 1), (3, 5, 2), (40, 40, 3), (7, 1, 4), (1, 6, 5)] {
            let a = gaussian(r, c, seed);
            let d = svd(&a).unwrap();
            let resid = d.reconstruct().max_abs_diff(&a);
            assert!(resid < 1e-8 * a.max_abs(), "{r}x{c}: residual {resid}");
            assert!(gram_defect(&d.u) < 1e-10);
            assert!(gram_defect(&d.vt.transpose()) < 1e-10);
            assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_sign_convention() {
        let a = gaussian(6, 4, 9);
        let d = svd(&a).unwrap();
        for k in 0..4 {
            let col = d.u.column(k);
            let top = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(top > 0.0);
        }
    }

    #[test]
    fn svd_rank_deficient_has_orthonormal_u() {
        let a = DenseMatrix::zeros(4, 3);
        let d = svd(&a).unwrap();
        assert_eq!(d.singular_values, vec![0.0; 3]);
        assert!(gram_defect(&d.u) < 1e-12);
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        let d = svd(&a).unwrap();
        assert!(d.singular_values[1] < 1e-14);
        assert!(gram_defect(&d.u) < 1e-10);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let a = DenseMatrix::from_vec_unchecked(1, 2, vec![1.0, f64::NAN]);
        assert!(matches!(svd(&a), Err(Error::NonFinite { row: 0, col: 1 })));
    }

    #[test]
    fn polar_of_identity_and_scaled_rotation() {
        let p = polar_factor(&DenseMatrix::identity(4)).unwrap();
        assert!(p.as_matrix().max_abs_diff(&DenseMatrix::identity(4)) < 1e-15);

        let th = 30f64.to_radians();
        let rot = DenseMatrix::from_rows(&[[th.cos(), -th.sin()], [th.sin(), th.cos()]]).unwrap();
        let p = polar_factor(&rot.scale(5.0)).unwrap();
        assert!(p.as_matrix().max_abs_diff(&rot) < 1e-12);
    }

    #[test]
    fn polar_of_symmetric_positive_definite_is_identity() {
        let th = 0.7f64;
        let q = DenseMatrix::from_rows(&[[th.cos(), -th.sin()], [th.sin(), th.cos()]]).unwrap();
        let a = q
            .matmul(&DenseMatrix::from_diag(&[2.0, 3.0]))
            .unwrap()
            .matmul(&q.transpose())
            .unwrap();
        let p = polar_factor(&a).unwrap();
        assert!(p.as_matrix().max_abs_diff(&DenseMatrix::identity(2)) < 1e-12);
    }

    #[test]
    fn polar_rejects_singular() {
        let a = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(
            polar_factor(&a),
            Err(Error::RankDeficient { .. })
        ));
        assert!(polar_factor(&DenseMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn pinv_examples() {
        let p = pseudo_inverse(&DenseMatrix::from_diag(&[2.0, 4.0]), DEFAULT_PINV_REL_TOL).unwrap();
        assert!(p.max_abs_diff(&DenseMatrix::from_diag(&[0.5, 0.25])) < 1e-15);
        let z = pseudo_inverse(&DenseMatrix::zeros(2, 3), DEFAULT_PINV_REL_TOL).unwrap();
        assert_eq!(z, DenseMatrix::zeros(3, 2));
        // pinv(1 1ᵀ) = 1 1ᵀ / ‖1‖⁴
        let a = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let p = pseudo_inverse(&a, DEFAULT_PINV_REL_TOL).unwrap();
        for v in p.data() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-14);
        }
    }

    #[test]
    fn pinv_penrose_identities() {
        for seed in 0..5 {
            let a = gaussian(6, 4, 100 + seed);
            let p = pseudo_inverse(&a, DEFAULT_PINV_REL_TOL).unwrap();
            let apa = a.matmul(&p).unwrap().matmul(&a).unwrap();
            let pap = p.matmul(&a).unwrap().matmul(&p).unwrap();
            let ap = a.matmul(&p).unwrap();
            let pa = p.matmul(&a).unwrap();
            assert!(apa.max_abs_diff(&a) < 1e-8);
            assert!(pap.max_abs_diff(&p) < 1e-8);
            assert!(ap.max_abs_diff(&ap.transpose()) < 1e-8);
            assert!(pa.max_abs_diff(&pa.transpose()) < 1e-8);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            0.5f64.sqrt(),
            epsilon = 1e-15
        );
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector));
    }

    #[test]
    fn row_normalize_examples() {
        let a = DenseMatrix::from_rows(&[vec![3.0, 4.0, 0.0, 0.0], vec![1.0; 4]]).unwrap();
        let s = row_normalize(&a).unwrap();
        assert_abs_diff_eq!(s.as_matrix().row(0)[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(s.as_matrix().row(0)[1], 0.8, epsilon = 1e-15);
        assert!(s.as_matrix().row(1).iter().all(|v| (v - 0.5).abs() < 1e-15));
        let z = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(row_normalize(&z).unwrap_err(), Error::ZeroRow { row: 1 });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn polar_matches_svd_and_is_scale_invariant(seed in 0u64..10_000, p in 2usize..8, c in 0.01f64..100.0) {
            let a = gaussian(p, p, seed);
            let d = svd(&a).unwrap();
            let w = polar_factor(&a).unwrap();
            prop_assert!(w.as_matrix().max_abs_diff(&d.u.matmul(&d.vt).unwrap()) < 1e-10);
            prop_assert!(w.as_matrix().orthogonality_defect() < 1e-10);
            let ws = polar_factor(&a.scale(c)).unwrap();
            prop_assert!(ws.as_matrix().max_abs_diff(w.as_matrix()) < 1e-10);
        }

        #[test]
        fn row_normalize_is_idempotent(seed in 0u64..10_000, r in 1usize..6, c in 2usize..6) {
            let a = gaussian(r, c, seed);
            let once = row_normalize(&a).unwrap();
            let twice = row_normalize(once.as_matrix()).unwrap();
            prop_assert!(once.as_matrix().max_abs_diff(twice.as_matrix()) < 1e-15);
            for row in once.as_matrix().row_iter() {
                prop_assert!((norm(row) - 1.0).abs() < 1e-12);
            }
        }
    }
}
