//! Recovery of the block-diagonal mapping matrix Π.
//!
//! Per group `G_k`, the unconstrained least-squares map
//! `Π̃ᵏ = Y_k (X_k Ŵ)ᵀ (X_k X_kᵀ)^{-1}` is computed, then each row is either
//! snapped to the indicator of its largest entry (when
//! `β̃_i = 1 − max_j cos(Π̃_i, e_j) ≤ λ`) or kept as a weight vector rescaled so
//! that `‖Π̂_i X‖ = 1`. The threshold λ is chosen by cross-validation over the
//! embedding coordinates.

use std::collections::HashSet;
use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::hash::Hash;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{norm, svd, DenseMatrix};
use crate::rng;
use crate::spherical_regression::{OrthogonalMatrix, SphericalMatrix};

/// Upper end of the admissible threshold interval, `1 − 1/√2`.
pub const LAMBDA_UPPER: f64 = 1.0 - FRAC_1_SQRT_2;
pub const DEFAULT_FOLDS: usize = 5;
/// Rows whose translated vector `Π̃_i X` is shorter than this are left unmapped.
pub const ZERO_TRANSLATION_TOL: f64 = 1e-12;
/// `σ_min(X_k) / σ_max(X_k)` below this makes the group Gram matrix singular.
pub const GRAM_REL_TOL: f64 = 1e-10;
/// Relative slack for the row-norm feasibility bounds.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// 20 evenly spaced values in `[0.01, 0.28]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..20).map(|i| 0.01 + 0.27 * i as f64 / 19.0).collect()
}

/// Contiguous, ordered groups `G_1..G_K` covering rows `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    /// `K + 1` boundaries; group `k` is `bounds[k]..bounds[k + 1]`.
    bounds: Vec<usize>,
}

impl GroupPartition {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidPartition("at least one group is required".into()));
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidPartition(format!("group {k} is empty")));
        }
        let mut bounds = Vec::with_capacity(sizes.len() + 1);
        bounds.push(0);
        for s in sizes {
            bounds.push(bounds.last().expect("nonempty") + s);
        }
        Ok(Self { bounds })
    }

    /// Builds the partition from per-row labels, which must be group-contiguous.
    pub fn from_labels<T: Eq + Hash + fmt::Debug>(labels: &[T]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidPartition("no rows".into()));
        }
        let mut closed: HashSet<&T> = HashSet::new();
        let mut sizes = vec![1usize];
        for i in 1..labels.len() {
            if labels[i] == labels[i - 1] {
                *sizes.last_mut().expect("nonempty") += 1;
                continue;
            }
            closed.insert(&labels[i - 1]);
            if closed.contains(&labels[i]) {
                return Err(Error::InvalidPartition(format!(
                    "group {:?} reappears at row {i} after other groups; \
                     reorder rows so that each group is contiguous",
                    labels[i]
                )));
            }
            sizes.push(1);
        }
        Self::from_sizes(&sizes)
    }

    /// One group holding all `n` rows.
    pub fn single(n: usize) -> Result<Self> {
        Self::from_sizes(&[n])
    }

    pub fn n(&self) -> usize {
        *self.bounds.last().expect("nonempty")
    }

    pub fn k(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn size(&self, group: usize) -> usize {
        self.bounds[group + 1] - self.bounds[group]
    }

    pub fn range(&self, group: usize) -> Range<usize> {
        self.bounds[group]..self.bounds[group + 1]
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.bounds.windows(2).map(|w| w[0]..w[1])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.bounds.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn max_size(&self) -> usize {
        self.sizes().into_iter().max().expect("nonempty")
    }

    pub fn min_size(&self) -> usize {
        self.sizes().into_iter().min().expect("nonempty")
    }

    /// Group containing row `i`.
    pub fn group_of(&self, i: usize) -> usize {
        assert!(i < self.n(), "row {i} out of range for n = {}", self.n());
        self.bounds.partition_point(|&b| b <= i) - 1
    }

    fn check_rows(&self, n: usize, context: &'static str) -> Result<()> {
        if n != self.n() {
            return Err(Error::DimensionMismatch {
                context,
                expected: format!("{} rows (partition)", self.n()),
                got: format!("{n} rows"),
            });
        }
        Ok(())
    }
}

/// One row of Π.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum RowMap {
    /// `Π_i = e_i`.
    Identity,
    /// `Π_i = e_j` for a different row `j` of the same group (global index).
    Permuted(usize),
    /// Weights over the row's own group block, in block order.
    Weighted(Vec<f64>),
    /// All-zero row: no predictor combination reaches this response.
    Unmapped,
}

impl RowMap {
    pub fn is_one_to_one(&self) -> bool {
        matches!(self, RowMap::Identity | RowMap::Permuted(_))
    }
}

/// Tag counts of a mapping matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TagCounts {
    pub identity: usize,
    pub permuted: usize,
    pub weighted: usize,
    pub unmapped: usize,
}

/// Block-diagonal Π stored row by row; entries outside a row's group are zero
/// by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMappingMatrix {
    partition: GroupPartition,
    rows: Vec<RowMap>,
}

impl BlockMappingMatrix {
    pub fn identity(partition: GroupPartition) -> Self {
        let rows = vec![RowMap::Identity; partition.n()];
        Self { partition, rows }
    }

    /// Validates block support; `Permuted(i)` on row `i` is stored as `Identity`.
    pub fn new(partition: GroupPartition, rows: Vec<RowMap>) -> Result<Self> {
        partition.check_rows(rows.len(), "BlockMappingMatrix::new")?;
        let mut rows = rows;
        for (i, row) in rows.iter_mut().enumerate() {
            let g = partition.group_of(i);
            match row {
                RowMap::Permuted(j) if *j == i => *row = RowMap::Identity,
                RowMap::Permuted(j) => {
                    if !partition.range(g).contains(j) {
                        return Err(invalid(
                            "pi",
                            format!("row {i} maps to row {j}, outside its group {g}"),
                        ));
                    }
                }
                RowMap::Weighted(w) => {
                    if w.len() != partition.size(g) {
                        return Err(invalid(
                            "pi",
                            format!(
                                "row {i} has {} weights but its group {g} has {} rows",
                                w.len(),
                                partition.size(g)
                            ),
                        ));
                    }
                    if w.iter().any(|v| !v.is_finite()) {
                        return Err(invalid("pi", format!("row {i} has a non-finite weight")));
                    }
                }
                RowMap::Identity | RowMap::Unmapped => {}
            }
        }
        Ok(Self { partition, rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn rows(&self) -> &[RowMap] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &RowMap {
        &self.rows[i]
    }

    /// Nonzero entries of row `i` as `(global column, value)`, ascending.
    pub fn entries(&self, i: usize) -> Vec<(usize, f64)> {
        match &self.rows[i] {
            RowMap::Identity => vec![(i, 1.0)],
            RowMap::Permuted(j) => vec![(*j, 1.0)],
            RowMap::Weighted(w) => {
                let start = self.partition.range(self.partition.group_of(i)).start;
                w.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(l, &v)| (start + l, v))
                    .collect()
            }
            RowMap::Unmapped => Vec::new(),
        }
    }

    /// `Π_i · A` for one row, written into `out` (length `a.cols()`).
    pub fn apply_row(&self, i: usize, a: &DenseMatrix, out: &mut [f64]) {
        out.fill(0.0);
        for (j, v) in self.entries(i) {
            for (o, &x) in out.iter_mut().zip(a.row(j)) {
                *o += v * x;
            }
        }
    }

    /// `Π · A`.
    pub fn apply(&self, a: &DenseMatrix) -> Result<DenseMatrix> {
        self.partition.check_rows(a.rows(), "BlockMappingMatrix::apply")?;
        let mut out = DenseMatrix::zeros(a.rows(), a.cols());
        for i in 0..self.n() {
            self.apply_row(i, a, out.row_mut(i));
        }
        Ok(out)
    }

    /// Dense `n × n` form; intended for small problems and tests.
    pub fn to_dense(&self) -> DenseMatrix {
        let n = self.n();
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for (j, v) in self.entries(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn counts(&self) -> TagCounts {
        let mut c = TagCounts::default();
        for r in &self.rows {
            match r {
                RowMap::Identity => c.identity += 1,
                RowMap::Permuted(_) => c.permuted += 1,
                RowMap::Weighted(_) => c.weighted += 1,
                RowMap::Unmapped => c.unmapped += 1,
            }
        }
        c
    }

    /// Row-norm bounds `1/√n_k ≤ ‖Π_i‖ ≤ 1/σ_{n_k}(X_k)` for every row with
    /// `‖Π_i X‖ = 1`. Indicator rows satisfy them trivially and are only counted.
    pub fn feasibility(&self, x: &DenseMatrix) -> Result<FeasibilityReport> {
        self.partition.check_rows(x.rows(), "feasibility")?;
        let mut sigma_min = vec![None; self.partition.k()];
        let mut report = FeasibilityReport::default();
        let mut buf = vec![0.0; x.cols()];
        for i in 0..self.n() {
            match &self.rows[i] {
                RowMap::Identity | RowMap::Permuted(_) => report.checked += 1,
                RowMap::Unmapped => {}
                RowMap::Weighted(w) => {
                    self.apply_row(i, x, &mut buf);
                    if (norm(&buf) - 1.0).abs() > 1e-6 {
                        continue;
                    }
                    let g = self.partition.group_of(i);
                    let smin = match sigma_min[g] {
                        Some(s) => s,
                        None => {
                            let block = x.row_range(self.partition.range(g));
                            let s = svd(&block)?
                                .singular_values
                                .last()
                                .copied()
                                .unwrap_or(0.0);
                            sigma_min[g] = Some(s);
                            s
                        }
                    };
                    let row_norm = norm(w);
                    let lower = 1.0 / (w.len() as f64).sqrt();
                    let upper = if smin > 0.0 { 1.0 / smin } else { f64::INFINITY };
                    report.checked += 1;
                    let ok = row_norm >= lower * (1.0 - FEASIBILITY_TOL)
                        && row_norm <= upper * (1.0 + FEASIBILITY_TOL);
                    if !ok {
                        report.violations.push(i);
                    }
                    report.weighted.push(FeasibilityRow {
                        row: i,
                        norm: row_norm,
                        lower,
                        upper,
                    });
                }
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRow {
    pub row: usize,
    pub norm: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub checked: usize,
    pub weighted: Vec<FeasibilityRow>,
    pub violations: Vec<usize>,
}

impl FeasibilityReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Per-group least-squares estimate Π̃, one dense `n_k × n_k` block per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsMapping {
    partition: GroupPartition,
    blocks: Vec<DenseMatrix>,
}

impl OlsMapping {
    pub fn new(partition: GroupPartition, blocks: Vec<DenseMatrix>) -> Result<Self> {
        if blocks.len() != partition.k() {
            return Err(Error::DimensionMismatch {
                context: "OlsMapping::new",
                expected: format!("{} blocks", partition.k()),
                got: format!("{}", blocks.len()),
            });
        }
        for (g, b) in blocks.iter().enumerate() {
            let s = partition.size(g);
            if b.shape() != (s, s) {
                return Err(Error::DimensionMismatch {
                    context: "OlsMapping::new",
                    expected: format!("{s}x{s} block for group {g}"),
                    got: format!("{}x{}", b.rows(), b.cols()),
                });
            }
        }
        Ok(Self { partition, blocks })
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn blocks(&self) -> &[DenseMatrix] {
        &self.blocks
    }

    /// Row `i` of Π̃ restricted to its group block.
    pub fn row(&self, i: usize) -> &[f64] {
        let g = self.partition.group_of(i);
        self.blocks[g].row(i - self.partition.range(g).start)
    }
}

/// `Y Zᵀ (Z Zᵀ)^{-1}` via the thin SVD `Z = U Σ Vᵀ`, i.e. `(Y V) Σ^{-1} Uᵀ`.
fn ols_solve(y: &DenseMatrix, z: &DenseMatrix, group: usize) -> Result<DenseMatrix> {
    let dec = svd(z)?;
    let sigma = &dec.singular_values;
    let s_max = sigma.first().copied().unwrap_or(0.0);
    let s_min = sigma.last().copied().unwrap_or(0.0);
    if sigma.len() < z.rows() || s_min <= GRAM_REL_TOL * s_max || s_min == 0.0 {
        return Err(Error::SingularGram {
            group,
            sigma_min: if sigma.len() < z.rows() { 0.0 } else { s_min },
        });
    }
    let mut yv = y.matmul_transpose(&dec.vt)?;
    for i in 0..yv.rows() {
        for (v, s) in yv.row_mut(i).iter_mut().zip(sigma) {
            *v /= s;
        }
    }
    yv.matmul_transpose(&dec.u)
}

fn with_group(e: Error, group: usize) -> Error {
    match e {
        Error::SingularGram { sigma_min, .. } => Error::SingularGram { group, sigma_min },
        Error::GroupTooLarge { size, p, .. } => Error::GroupTooLarge { group, size, p },
        other => other,
    }
}

/// Least-squares mapping for one group: `Y_k (X_k Ŵ)ᵀ (X_k X_kᵀ)^{-1}`.
pub fn ols_block(
    y_k: &DenseMatrix,
    x_k: &DenseMatrix,
    w_hat: &OrthogonalMatrix,
) -> Result<DenseMatrix> {
    let (n_k, p) = x_k.shape();
    if y_k.shape() != (n_k, p) || w_hat.p() != p {
        return Err(Error::DimensionMismatch {
            context: "ols_block",
            expected: format!("y {n_k}x{p}, w {p}x{p}"),
            got: format!("y {}x{}, w {}x{}", y_k.rows(), y_k.cols(), w_hat.p(), w_hat.p()),
        });
    }
    if n_k >= p {
        return Err(Error::GroupTooLarge {
            group: 0,
            size: n_k,
            p,
        });
    }
    let z = x_k.matmul(w_hat.as_matrix())?;
    ols_solve(y_k, &z, 0)
}

fn check_group_sizes(partition: &GroupPartition, p: usize) -> Result<()> {
    for (g, size) in partition.sizes().into_iter().enumerate() {
        if size >= p {
            return Err(Error::GroupTooLarge { group: g, size, p });
        }
    }
    Ok(())
}

fn check_inputs(
    y: &SphericalMatrix,
    x: &SphericalMatrix,
    w_hat: &OrthogonalMatrix,
    partition: &GroupPartition,
) -> Result<()> {
    if x.n() != y.n() || x.p() != y.p() || w_hat.p() != x.p() {
        return Err(Error::DimensionMismatch {
            context: "mapping recovery",
            expected: format!("x {}x{}, w {}x{}", x.n(), x.p(), x.p(), x.p()),
            got: format!("y {}x{}, w {}x{}", y.n(), y.p(), w_hat.p(), w_hat.p()),
        });
    }
    partition.check_rows(x.n(), "mapping recovery")?;
    check_group_sizes(partition, x.p())
}

/// Blockwise least-squares estimate over all groups, computed in parallel and
/// assembled in group order.
pub fn ols_mapping(
    y: &SphericalMatrix,
    x: &SphericalMatrix,
    w_hat: &OrthogonalMatrix,
    partition: &GroupPartition,
) -> Result<OlsMapping> {
    check_inputs(y, x, w_hat, partition)?;
    let z = x.as_matrix().matmul(w_hat.as_matrix())?;
    let blocks = solve_blocks(y.as_matrix(), &z, partition)?;
    Ok(OlsMapping {
        partition: partition.clone(),
        blocks,
    })
}

fn solve_blocks(
    y: &DenseMatrix,
    z: &DenseMatrix,
    partition: &GroupPartition,
) -> Result<Vec<DenseMatrix>> {
    let ranges: Vec<Range<usize>> = partition.ranges().collect();
    let solved: Vec<Result<DenseMatrix>> = ranges
        .par_iter()
        .enumerate()
        .map(|(g, r)| {
            ols_solve(&y.row_range(r.clone()), &z.row_range(r.clone()), g)
                .map_err(|e| with_group(e, g))
        })
        .collect();
    solved.into_iter().collect()
}

/// `β̃_i` of one mapping row and the in-block index of its best indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowBeta {
    pub beta: f64,
    /// Index within the row's group block; lowest index on ties.
    pub j_star: usize,
    /// The row was identically zero; `beta` is then 1.
    pub zero_row: bool,
}

/// `β̃ = 1 − max_j cos(row, e_j)`, maximized over the block coordinates.
pub fn beta_of_row(pi_row: &[f64]) -> RowBeta {
    let nr = norm(pi_row);
    let mut j_star = 0;
    for (j, &v) in pi_row.iter().enumerate() {
        if v > pi_row[j_star] {
            j_star = j;
        }
    }
    if nr == 0.0 {
        return RowBeta {
            beta: 1.0,
            j_star,
            zero_row: true,
        };
    }
    RowBeta {
        beta: 1.0 - pi_row[j_star] / nr,
        j_star,
        zero_row: false,
    }
}

/// How the per-row threshold is derived from the base λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// The same λ for every row.
    #[default]
    Fixed,
    /// `λ_k ∝ log n_k`.
    GroupSize,
    /// `λ_k ∝ η_k`, a prior one-to-one fraction per group.
    PriorFraction,
    /// `λ_i ∝ 1(max_j Π̃_ij > 0) · ‖Π̃_i / max_j Π̃_ij − 1‖`.
    Flatness,
}

impl ThresholdMode {
    pub const ALL: [ThresholdMode; 4] = [
        ThresholdMode::Fixed,
        ThresholdMode::GroupSize,
        ThresholdMode::PriorFraction,
        ThresholdMode::Flatness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThresholdMode::Fixed => "fixed",
            ThresholdMode::GroupSize => "group-size",
            ThresholdMode::PriorFraction => "prior-fraction",
            ThresholdMode::Flatness => "flatness",
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                invalid(
                    "threshold_mode",
                    format!("unknown mode {s:?}; expected fixed, group-size, prior-fraction or flatness"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub mode: ThresholdMode,
    pub lambda: f64,
    /// Per-group prior one-to-one fractions, required in prior-fraction mode.
    pub eta: Option<Vec<f64>>,
}

impl ThresholdConfig {
    pub fn new(mode: ThresholdMode, lambda: f64, eta: Option<Vec<f64>>) -> Result<Self> {
        validate_lambda(lambda)?;
        if let Some(eta) = &eta {
            if eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
                return Err(invalid("eta", "prior fractions must lie in [0, 1]"));
            }
        } else if mode == ThresholdMode::PriorFraction {
            return Err(invalid("eta", "prior-fraction mode needs per-group priors"));
        }
        Ok(Self { mode, lambda, eta })
    }

    pub fn fixed(lambda: f64) -> Result<Self> {
        Self::new(ThresholdMode::Fixed, lambda, None)
    }
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < LAMBDA_UPPER) {
        return Err(invalid(
            "lambda",
            format!("must lie in (0, 1 - 1/sqrt(2)) = (0, {LAMBDA_UPPER:.5}), got {lambda}"),
        ));
    }
    Ok(())
}

/// Per-row thresholds for `mode`, scaled so their mean is `base`. When every raw
/// weight is zero all thresholds are zero.
pub fn row_thresholds(
    pi_tilde: &OlsMapping,
    base: f64,
    mode: ThresholdMode,
    eta: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let part = &pi_tilde.partition;
    let n = part.n();
    let raw: Vec<f64> = match mode {
        ThresholdMode::Fixed => return Ok(vec![base; n]),
        ThresholdMode::GroupSize => (0..n)
            .map(|i| (part.size(part.group_of(i)) as f64).ln())
            .collect(),
        ThresholdMode::PriorFraction => {
            let eta = eta.ok_or_else(|| invalid("eta", "prior-fraction mode needs per-group priors"))?;
            if eta.len() != part.k() {
                return Err(invalid(
                    "eta",
                    format!("expected {} group priors, got {}", part.k(), eta.len()),
                ));
            }
            (0..n).map(|i| eta[part.group_of(i)]).collect()
        }
        ThresholdMode::Flatness => (0..n).map(|i| flatness(pi_tilde.row(i))).collect(),
    };
    let mean = raw.iter().sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return Ok(vec![0.0; n]);
    }
    Ok(raw.into_iter().map(|r| base * r / mean).collect())
}

fn flatness(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_nan() || max <= 0.0 {
        return 0.0;
    }
    row.iter()
        .map(|v| {
            let d = v / max - 1.0;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Applies the indicator-or-normalize rule with a per-row threshold.
pub fn threshold_rows(
    pi_tilde: &OlsMapping,
    x: &DenseMatrix,
    thresholds: &[f64],
) -> Result<BlockMappingMatrix> {
    let part = &pi_tilde.partition;
    part.check_rows(x.rows(), "threshold_rows")?;
    part.check_rows(thresholds.len(), "threshold_rows")?;
    let rows: Vec<RowMap> = part
        .ranges()
        .collect::<Vec<_>>()
        .par_iter()
        .flat_map_iter(|r| {
            let start = r.start;
            let mut buf = vec![0.0; x.cols()];
            r.clone()
                .map(|i| {
                    let row = pi_tilde.row(i);
                    let rb = beta_of_row(row);
                    if !rb.zero_row && rb.beta <= thresholds[i] {
                        let j = start + rb.j_star;
                        return if j == i { RowMap::Identity } else { RowMap::Permuted(j) };
                    }
                    buf.fill(0.0);
                    for (l, &w) in row.iter().enumerate() {
                        for (b, &xv) in buf.iter_mut().zip(x.row(start + l)) {
                            *b += w * xv;
                        }
                    }
                    let nv = norm(&buf);
                    if nv < ZERO_TRANSLATION_TOL {
                        RowMap::Unmapped
                    } else {
                        RowMap::Weighted(row.iter().map(|w| w / nv).collect())
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(BlockMappingMatrix {
        partition: part.clone(),
        rows,
    })
}

/// Thresholds Π̃ into Π̂ according to `config`.
pub fn hard_threshold(
    pi_tilde: &OlsMapping,
    x: &SphericalMatrix,
    config: &ThresholdConfig,
) -> Result<BlockMappingMatrix> {
    let t = row_thresholds(pi_tilde, config.lambda, config.mode, config.eta.as_deref())?;
    threshold_rows(pi_tilde, x.as_matrix(), &t)
}

/// Thresholding with a mode-dependent threshold whose mean is `base_lambda`.
pub fn adaptive_threshold(
    pi_tilde: &OlsMapping,
    x: &SphericalMatrix,
    base_lambda: f64,
    mode: ThresholdMode,
    priors: Option<&[f64]>,
) -> Result<BlockMappingMatrix> {
    let config = ThresholdConfig::new(mode, base_lambda, priors.map(<[f64]>::to_vec))?;
    hard_threshold(pi_tilde, x, &config)
}

/// Cross-validation settings for λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    pub grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            grid: default_lambda_grid(),
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

/// Cross-validated loss for each λ on the grid, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    pub lambdas: Vec<f64>,
    pub losses: Vec<f64>,
    /// Held-out coordinate columns of each fold.
    pub fold_columns: Vec<Vec<usize>>,
    pub selected: usize,
}

impl CvTable {
    pub fn selected_lambda(&self) -> f64 {
        self.lambdas[self.selected]
    }
}

/// Chooses λ from `grid` by `folds`-fold cross-validation over coordinate columns.
pub fn select_lambda(
    y: &SphericalMatrix,
    x: &SphericalMatrix,
    w_hat: &OrthogonalMatrix,
    partition: &GroupPartition,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(f64, CvTable)> {
    let settings = CvSettings {
        grid: grid.to_vec(),
        folds,
        seed,
    };
    select_lambda_with(y, x, w_hat, partition, &settings, ThresholdMode::Fixed, None)
}

/// [`select_lambda`] for an arbitrary threshold mode; the grid holds base values.
///
/// For each fold the map is refit on the training columns of `Z = XŴ` and `Y`,
/// and the loss `‖Y_val − Π̂ Z_val‖²_F` is summed over folds. `Ŵ` stays fixed.
pub fn select_lambda_with(
    y: &SphericalMatrix,
    x: &SphericalMatrix,
    w_hat: &OrthogonalMatrix,
    partition: &GroupPartition,
    settings: &CvSettings,
    mode: ThresholdMode,
    eta: Option<&[f64]>,
) -> Result<(f64, CvTable)> {
    check_inputs(y, x, w_hat, partition)?;
    if settings.grid.is_empty() {
        return Err(invalid("grid", "lambda grid is empty"));
    }
    for &l in &settings.grid {
        validate_lambda(l)?;
    }
    let p = x.p();
    if settings.folds < 2 || settings.folds > p {
        return Err(invalid(
            "folds",
            format!("need 2 <= folds <= p = {p}, got {}", settings.folds),
        ));
    }
    let fold_columns = assign_folds(p, settings.folds, settings.seed);
    let (big, big_size) = partition
        .sizes()
        .into_iter()
        .enumerate()
        .max_by_key(|&(g, s)| (s, std::cmp::Reverse(g)))
        .expect("nonempty");
    for val in &fold_columns {
        let train = p - val.len();
        if train < big_size {
            return Err(Error::FoldTooSmall {
                group: big,
                size: big_size,
                train_columns: train,
            });
        }
    }

    let z = x.as_matrix().matmul(w_hat.as_matrix())?;
    let mut losses = vec![0.0; settings.grid.len()];
    for val in &fold_columns {
        let train: Vec<usize> = (0..p).filter(|c| val.binary_search(c).is_err()).collect();
        let blocks = solve_blocks(
            &y.as_matrix().select_cols(&train),
            &z.select_cols(&train),
            partition,
        )?;
        let pi_tilde = OlsMapping {
            partition: partition.clone(),
            blocks,
        };
        let y_val = y.as_matrix().select_cols(val);
        let z_val = z.select_cols(val);
        let fold_losses: Vec<Result<f64>> = settings
            .grid
            .par_iter()
            .map(|&lambda| {
                let t = row_thresholds(&pi_tilde, lambda, mode, eta)?;
                let pi_hat = threshold_rows(&pi_tilde, x.as_matrix(), &t)?;
                let pred = pi_hat.apply(&z_val)?;
                Ok(y_val.sub(&pred)?.data().iter().map(|v| v * v).sum())
            })
            .collect();
        for (acc, l) in losses.iter_mut().zip(fold_losses) {
            *acc += l?;
        }
    }
    let mut selected = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[selected] {
            selected = i;
        }
    }
    let table = CvTable {
        lambdas: settings.grid.clone(),
        losses,
        fold_columns,
        selected,
    };
    Ok((table.selected_lambda(), table))
}

fn assign_folds(p: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut cols: Vec<usize> = (0..p).collect();
    cols.shuffle(&mut rng::seeded(seed));
    let mut out = vec![Vec::new(); folds];
    for (pos, c) in cols.into_iter().enumerate() {
        out[pos % folds].push(c);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    out
}

/// Matched rows `S`, mismatched rows `D` and estimated one-to-many rows `Ĉ ⊆ D`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RowClasses {
    pub matched: Vec<usize>,
    pub mismatched: Vec<usize>,
    pub one_to_many: Vec<usize>,
}

/// Splits rows by tag. Unmapped rows count as mismatched and one-to-many.
pub fn classify_rows(pi_hat: &BlockMappingMatrix) -> RowClasses {
    let mut c = RowClasses::default();
    for (i, r) in pi_hat.rows.iter().enumerate() {
        match r {
            RowMap::Identity => c.matched.push(i),
            RowMap::Permuted(_) => c.mismatched.push(i),
            RowMap::Weighted(_) | RowMap::Unmapped => {
                c.mismatched.push(i);
                c.one_to_many.push(i);
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{polar_factor, row_normalize};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn sphere(n: usize, p: usize, rng: &mut ChaCha8Rng) -> SphericalMatrix {
        row_normalize(&gaussian(n, p, rng)).unwrap()
    }

    fn orthogonal(p: usize, rng: &mut ChaCha8Rng) -> OrthogonalMatrix {
        polar_factor(&gaussian(p, p, rng)).unwrap()
    }

    #[test]
    fn partition_from_sizes_and_labels() {
        let p = GroupPartition::from_sizes(&[2, 3, 1]).unwrap();
        assert_eq!(p.n(), 6);
        assert_eq!(p.k(), 3);
        assert_eq!(p.range(1), 2..5);
        assert_eq!((0..6).map(|i| p.group_of(i)).collect::<Vec<_>>(), [0, 0, 1, 1, 1, 2]);
        let q = GroupPartition::from_labels(&["a", "a", "b", "b", "b", "c"]).unwrap();
        assert_eq!(p, q);
        let err = GroupPartition::from_labels(&[1, 1, 2, 1]).unwrap_err();
        assert!(matches!(err, Error::InvalidPartition(m) if m.contains("reorder")));
        assert!(GroupPartition::from_sizes(&[2, 0]).is_err());
        assert!(GroupPartition::from_sizes(&[]).is_err());
    }

    #[test]
    fn ols_block_identity_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (nk, p) = (5, 12);
        let x = sphere(nk, p, &mut rng);
        let w = orthogonal(p, &mut rng);
        let xw = x.as_matrix().matmul(w.as_matrix()).unwrap();
        let pi = ols_block(&xw, x.as_matrix(), &w).unwrap();
        assert!(pi.max_abs_diff(&DenseMatrix::identity(nk)) < 1e-8);

        let perm = [2usize, 0, 1, 4, 3];
        let y = xw.select_rows(&perm);
        let pi = ols_block(&y, x.as_matrix(), &w).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            for c in 0..nk {
                let expect = if c == j { 1.0 } else { 0.0 };
                assert!((pi[(i, c)] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ols_block_single_row_is_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sphere(1, 6, &mut rng);
        let y = sphere(1, 6, &mut rng);
        let w = orthogonal(6, &mut rng);
        let pi = ols_block(y.as_matrix(), x.as_matrix(), &w).unwrap();
        let xw = x.as_matrix().matmul(w.as_matrix()).unwrap();
        let cos = crate::linalg::cosine(y.row(0), xw.row(0)).unwrap();
        assert_relative_eq!(pi[(0, 0)], cos, max_relative = 1e-12);
    }

    #[test]
    fn ols_block_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = sphere(4, 4, &mut rng);
        let w = OrthogonalMatrix::identity(4);
        assert!(matches!(
            ols_block(x.as_matrix(), x.as_matrix(), &w),
            Err(Error::GroupTooLarge { size: 4, p: 4, .. })
        ));
        let row = x.row(0).to_vec();
        let dup = DenseMatrix::from_rows(&[row.clone(), row]).unwrap();
        assert!(matches!(
            ols_block(&dup, &dup, &w),
            Err(Error::SingularGram { .. })
        ));
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta_of_row(&[0.0, 1.0, 0.0]).beta, 0.0);
        assert_eq!(beta_of_row(&[0.0, 1.0, 0.0]).j_star, 1);
        let b = beta_of_row(&[1.0, 1.0]);
        assert_relative_eq!(b.beta, LAMBDA_UPPER, max_relative = 1e-14);
        assert_eq!(b.j_star, 0);
        let z = beta_of_row(&[0.0, 0.0]);
        assert!(z.zero_row && z.beta == 1.0);
        // negative entries never win the argmax over a positive one
        assert_eq!(beta_of_row(&[-3.0, 0.5]).j_star, 1);
    }

    proptest! {
        #[test]
        fn at_most_one_coordinate_beats_inverse_sqrt_two(row in prop::collection::vec(-1.0f64..1.0, 1..12)) {
            let nr = norm(&row);
            prop_assume!(nr > 1e-9);
            let above = row.iter().filter(|v| **v / nr > FRAC_1_SQRT_2).count();
            prop_assert!(above <= 1);
            let b = beta_of_row(&row);
            prop_assert!((0.0..=2.0).contains(&b.beta));
        }
    }

    fn ols_from_rows(sizes: &[usize], rows: Vec<Vec<f64>>) -> OlsMapping {
        let part = GroupPartition::from_sizes(sizes).unwrap();
        let mut blocks = Vec::new();
        for r in part.ranges() {
            blocks.push(DenseMatrix::from_rows(&rows[r]).unwrap());
        }
        OlsMapping::new(part, blocks).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = sphere(4, 8, &mut rng);
        let id = ols_from_rows(&[4], (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect());
        for lambda in [0.01, 0.1, 0.28] {
            let pi = hard_threshold(&id, &x, &ThresholdConfig::fixed(lambda).unwrap()).unwrap();
            assert_eq!(pi, BlockMappingMatrix::identity(id.partition().clone()));
        }
        let rows = vec![
            vec![0.001, -0.002, 0.99, 0.003],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let pt = ols_from_rows(&[4], rows);
        let pi = hard_threshold(&pt, &x, &ThresholdConfig::fixed(0.1).unwrap()).unwrap();
        assert_eq!(pi.row(0), &RowMap::Permuted(2));
        let RowMap::Weighted(w) = pi.row(2) else { panic!("expected weighted row") };
        assert!(w.iter().all(|v| (v - w[0]).abs() < 1e-15));
        let mut buf = vec![0.0; 8];
        pi.apply_row(2, x.as_matrix(), &mut buf);
        assert!((norm(&buf) - 1.0).abs() < 1e-12);
        let classes = classify_rows(&pi);
        assert_eq!(classes.matched, [1, 3]);
        assert_eq!(classes.mismatched, [0, 2]);
        assert_eq!(classes.one_to_many, [2]);
    }

    #[test]
    fn zero_translation_becomes_unmapped() {
        let x = SphericalMatrix::new(DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]).unwrap()).unwrap();
        let pt = ols_from_rows(&[2], vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        let pi = hard_threshold(&pt, &x, &ThresholdConfig::fixed(0.1).unwrap()).unwrap();
        assert_eq!(pi.row(0), &RowMap::Unmapped);
        assert!(pi.entries(0).is_empty());
        let c = classify_rows(&pi);
        assert_eq!(c.one_to_many, [0]);
    }

    #[test]
    fn classify_swapped_pair() {
        let part = GroupPartition::from_sizes(&[3, 2]).unwrap();
        let rows = vec![
            RowMap::Identity,
            RowMap::Identity,
            RowMap::Identity,
            RowMap::Permuted(4),
            RowMap::Permuted(3),
        ];
        let pi = BlockMappingMatrix::new(part.clone(), rows).unwrap();
        let c = classify_rows(&pi);
        assert_eq!(c.matched, [0, 1, 2]);
        assert_eq!(c.mismatched, [3, 4]);
        assert!(c.one_to_many.is_empty());
        let c = classify_rows(&BlockMappingMatrix::identity(part.clone()));
        assert_eq!(c.matched.len(), 5);
        assert!(BlockMappingMatrix::new(part.clone(), vec![RowMap::Permuted(3), RowMap::Identity, RowMap::Identity, RowMap::Identity, RowMap::Identity]).is_err());
        let canon = BlockMappingMatrix::new(part, vec![RowMap::Permuted(0), RowMap::Identity, RowMap::Identity, RowMap::Identity, RowMap::Identity]).unwrap();
        assert_eq!(canon.row(0), &RowMap::Identity);
    }

    #[test]
    fn dense_form_is_block_diagonal() {
        let part = GroupPartition::from_sizes(&[2, 3]).unwrap();
        let pi = BlockMappingMatrix::new(
            part.clone(),
            vec![
                RowMap::Permuted(1),
                RowMap::Identity,
                RowMap::Weighted(vec![0.2, 0.0, 0.7]),
                RowMap::Unmapped,
                RowMap::Identity,
            ],
        )
        .unwrap();
        let d = pi.to_dense();
        for i in 0..5 {
            for j in 0..5 {
                if part.group_of(i) != part.group_of(j) {
                    assert_eq!(d[(i, j)], 0.0);
                }
            }
        }
        assert_eq!(d[(2, 4)], 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = gaussian(5, 3, &mut rng);
        assert!(pi.apply(&a).unwrap().max_abs_diff(&d.matmul(&a).unwrap()) < 1e-15);
    }

    #[test]
    fn adaptive_threshold_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = sphere(4, 8, &mut rng);
        let rows = vec![
            vec![0.9, 0.1],
            vec![0.1, 0.9],
            vec![0.5, 0.5],
            vec![0.95, 0.0],
        ];
        let pt = ols_from_rows(&[2, 2], rows);
        let t = row_thresholds(&pt, 0.1, ThresholdMode::GroupSize, None).unwrap();
        assert!(t.iter().all(|v| (v - 0.1).abs() < 1e-15));
        let t = row_thresholds(&pt, 0.1, ThresholdMode::PriorFraction, Some(&[0.0, 1.0])).unwrap();
        assert_eq!(&t[..2], &[0.0, 0.0]);
        assert_relative_eq!(t[2], 0.2);
        let pi = adaptive_threshold(&pt, &x, 0.1, ThresholdMode::PriorFraction, Some(&[0.0, 1.0])).unwrap();
        assert!(matches!(pi.row(0), RowMap::Weighted(_)));
        assert!(matches!(pi.row(1), RowMap::Weighted(_)));
        let t = row_thresholds(&pt, 0.1, ThresholdMode::Flatness, None).unwrap();
        assert_eq!(t[2], 0.0);
        let pi = adaptive_threshold(&pt, &x, 0.1, ThresholdMode::Flatness, None).unwrap();
        assert!(matches!(pi.row(2), RowMap::Weighted(_)));
        assert_relative_eq!(t.iter().sum::<f64>() / 4.0, 0.1, max_relative = 1e-12);
        assert!(adaptive_threshold(&pt, &x, 0.1, ThresholdMode::PriorFraction, None).is_err());
        let zero = ols_from_rows(&[2, 2], vec![vec![0.0, 0.0]; 4]);
        let t = row_thresholds(&zero, 0.1, ThresholdMode::Flatness, None).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_bounds_are_enforced() {
        assert!(ThresholdConfig::fixed(0.0).is_err());
        assert!(ThresholdConfig::fixed(LAMBDA_UPPER).is_err());
        assert!(ThresholdConfig::fixed(0.29).is_ok());
        let g = default_lambda_grid();
        assert_eq!(g.len(), 20);
        assert_relative_eq!(g[0], 0.01);
        assert_relative_eq!(g[19], 0.28, max_relative = 1e-14);
    }

    fn planted(seed: u64, kappa: f64) -> (SphericalMatrix, SphericalMatrix, OrthogonalMatrix, GroupPartition) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, sizes) = (40, vec![6usize; 30]);
        let part = GroupPartition::from_sizes(&sizes).unwrap();
        let x = sphere(part.n(), p, &mut rng);
        let w = orthogonal(p, &mut rng);
        let xw = x.as_matrix().matmul(w.as_matrix()).unwrap();
        let sampler = crate::vmf::VmfSampler::new(kappa, p).unwrap();
        let mut y = DenseMatrix::zeros(part.n(), p);
        let mut r = crate::rng::seeded(seed + 100);
        for i in 0..part.n() {
            // swap the first two rows of every third group
            let g = part.group_of(i);
            let s = part.range(g).start;
            let src = if g.is_multiple_of(3) && i - s < 2 { s + 1 - (i - s) } else { i };
            sampler.draw_into(xw.row(src), &mut r, y.row_mut(i));
        }
        (x, SphericalMatrix::new(y).unwrap(), w, part)
    }

    #[test]
    fn lambda_monotonicity_of_one_to_one_set() {
        let (x, y, w, part) = planted(6, 300.0);
        let pt = ols_mapping(&y, &x, &w, &part).unwrap();
        let mut prev = 0;
        for lambda in default_lambda_grid() {
            let pi = hard_threshold(&pt, &x, &ThresholdConfig::fixed(lambda).unwrap()).unwrap();
            let c = pi.counts();
            let one_to_one = c.identity + c.permuted;
            assert!(one_to_one >= prev);
            prev = one_to_one;
            for i in 0..pi.n() {
                if let RowMap::Weighted(_) = pi.row(i) {
                    let mut buf = vec![0.0; x.p()];
                    pi.apply_row(i, x.as_matrix(), &mut buf);
                    assert!((norm(&buf) - 1.0).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn cv_selects_thresholding_and_recovers_swaps() {
        let (x, y, w, part) = planted(7, 3000.0);
        let (lambda, table) =
            select_lambda(&y, &x, &w, &part, &default_lambda_grid(), 5, 11).unwrap();
        assert!(lambda > 0.0);
        assert_eq!(table.losses.len(), 20);
        let pt = ols_mapping(&y, &x, &w, &part).unwrap();
        let pi = hard_threshold(&pt, &x, &ThresholdConfig::fixed(lambda).unwrap()).unwrap();
        for i in 0..pi.n() {
            let g = part.group_of(i);
            let s = part.range(g).start;
            let expected = if g % 3 == 0 && i - s < 2 {
                RowMap::Permuted(s + 1 - (i - s))
            } else {
                RowMap::Identity
            };
            assert_eq!(pi.row(i), &expected, "row {i}");
        }
        let again = select_lambda(&y, &x, &w, &part, &default_lambda_grid(), 5, 11).unwrap();
        assert_eq!(again, (lambda, table));
    }

    #[test]
    fn cv_single_point_grid_and_fold_errors() {
        let (x, y, w, part) = planted(8, 300.0);
        let (lambda, table) = select_lambda(&y, &x, &w, &part, &[0.2], 5, 1).unwrap();
        assert_eq!(lambda, 0.2);
        assert!(table.losses[0] > 0.0);
        // 40 columns in 2 folds leaves 20 training columns ≥ 6 rows; 40 folds leave 39
        assert!(select_lambda(&y, &x, &w, &part, &[0.2], 1, 1).is_err());
        let big = GroupPartition::from_sizes(&[36, 36, 36, 36, 36]).unwrap();
        assert!(matches!(
            select_lambda(&y, &x, &w, &big, &[0.2], 5, 1),
            Err(Error::FoldTooSmall { group: 0, size: 36, train_columns: 32 })
        ));
    }

    #[test]
    fn feasibility_of_normalized_weighted_rows() {
        let (x, y, w, part) = planted(9, 50.0);
        let pt = ols_mapping(&y, &x, &w, &part).unwrap();
        let pi = hard_threshold(&pt, &x, &ThresholdConfig::fixed(0.01).unwrap()).unwrap();
        let report = pi.feasibility(x.as_matrix()).unwrap();
        assert!(report.checked > 0);
        assert!(report.holds(), "{:?}", report.violations);
        for r in &report.weighted {
            assert!(r.lower <= r.upper);
        }
    }

    #[test]
    fn threshold_mode_round_trips_through_text() {
        for m in ThresholdMode::ALL {
            assert_eq!(m.to_string().parse::<ThresholdMode>().unwrap(), m);
        }
        assert!("nope".parse::<ThresholdMode>().is_err());
    }
}
