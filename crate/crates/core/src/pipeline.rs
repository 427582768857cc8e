//! The three-step estimator and its evaluation against a known truth.
//!
//! Step I fits `Ŵ⁽¹⁾` by Procrustes on all rows. Step II estimates Π̂ by
//! blockwise least squares and thresholding, with λ chosen by cross-validation.
//! Step III refits `Ŵ⁽²⁾` on the rows Π̂ declares matched, or additionally on
//! the recovered one-to-one pairs in corrected mode. Steps II and III may be
//! repeated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cosine, svd, DenseMatrix};
use crate::mapping_recovery::{
    classify_rows, default_lambda_grid, hard_threshold, ols_mapping, select_lambda_with,
    BlockMappingMatrix, CvSettings, CvTable, GroupPartition, RowMap, TagCounts, ThresholdConfig,
    ThresholdMode, DEFAULT_FOLDS,
};
use crate::spherical_regression::{procrustes_fit, procrustes_fit_pairs, OrthogonalMatrix, SphericalMatrix};

/// Maximum weight change for two mapping estimates to count as equal.
pub const CONVERGENCE_TOL: f64 = 1e-8;

/// Rows used to refit `Ŵ` in Step III.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefinementMode {
    /// Only rows estimated as `Π̂_i = e_i`.
    #[default]
    MatchedOnly,
    /// Matched rows plus every estimated permutation row `i → j`, used as the
    /// pair `(X_j, Y_i)`.
    CorrectedOneToOne,
}

impl RefinementMode {
    pub fn name(self) -> &'static str {
        match self {
            RefinementMode::MatchedOnly => "matched",
            RefinementMode::CorrectedOneToOne => "corrected",
        }
    }
}

impl fmt::Display for RefinementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RefinementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" | "matched-only" => Ok(RefinementMode::MatchedOnly),
            "corrected" | "corrected-one-to-one" => Ok(RefinementMode::CorrectedOneToOne),
            _ => Err(invalid(
                "refine",
                format!("unknown refinement {s:?}; expected matched or corrected"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub threshold_mode: ThresholdMode,
    /// Per-group priors for prior-fraction thresholds.
    pub eta: Option<Vec<f64>>,
    /// Skips cross-validation when set.
    pub fixed_lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    /// Number of Step II/III passes.
    pub max_iterations: usize,
    pub refinement: RefinementMode,
    /// Seeds the cross-validation fold assignment.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Fixed,
            eta: None,
            fixed_lambda: None,
            lambda_grid: default_lambda_grid(),
            folds: DEFAULT_FOLDS,
            max_iterations: 1,
            refinement: RefinementMode::MatchedOnly,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be at least 1"));
        }
        let probe = self.fixed_lambda.unwrap_or(0.1);
        ThresholdConfig::new(self.threshold_mode, probe, self.eta.clone())?;
        Ok(())
    }
}

/// Row counts of the final mapping estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitCounts {
    pub matched: usize,
    pub mismatched: usize,
    pub one_to_many: usize,
    pub permuted: usize,
    pub unmapped: usize,
}

impl FitCounts {
    fn from_tags(t: TagCounts) -> Self {
        Self {
            matched: t.identity,
            mismatched: t.permuted + t.weighted + t.unmapped,
            one_to_many: t.weighted + t.unmapped,
            permuted: t.permuted,
            unmapped: t.unmapped,
        }
    }
}

/// Frobenius losses of each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLosses {
    /// `‖Y − XŴ⁽¹⁾‖²`.
    pub procrustes: f64,
    /// `‖Y − Π̂ X Ŵ‖²` with the `Ŵ` that Π̂ was estimated under.
    pub mapping: f64,
    /// `Σ ‖Y_i − X_j Ŵ⁽²⁾‖²` over the refinement pairs.
    pub refined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub counts: FitCounts,
    pub refinement_pairs: usize,
    pub mapping_loss: f64,
    pub refined_loss: f64,
    /// `‖Ŵ_new − Ŵ_prev‖_F`.
    pub w_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub w1: OrthogonalMatrix,
    pub pi_hat: BlockMappingMatrix,
    pub w2: OrthogonalMatrix,
    pub lambda_selected: f64,
    /// Cross-validation table of the last iteration, absent with a fixed λ.
    pub cv_table: Option<CvTable>,
    pub counts: FitCounts,
    pub losses: StageLosses,
    /// Smallest singular value of `X`.
    pub sigma_p_x: f64,
    /// Mean `cos(Y_i, X_i Ŵ⁽²⁾)` over matched rows, an estimate of `γ_{κ,p}`.
    pub gamma_hat: f64,
    pub iterations: Vec<IterationRecord>,
    /// Π̂ was unchanged by the last pass.
    pub converged: bool,
    pub threshold_mode: ThresholdMode,
    pub refinement: RefinementMode,
}

fn same_mapping(a: &BlockMappingMatrix, b: &BlockMappingMatrix) -> bool {
    a.rows().iter().zip(b.rows()).all(|(ra, rb)| match (ra, rb) {
        (RowMap::Identity, RowMap::Identity) | (RowMap::Unmapped, RowMap::Unmapped) => true,
        (RowMap::Permuted(i), RowMap::Permuted(j)) => i == j,
        (RowMap::Weighted(u), RowMap::Weighted(v)) => {
            u.iter().zip(v).all(|(x, y)| (x - y).abs() < CONVERGENCE_TOL)
        }
        _ => false,
    })
}

/// `(x_row, y_row)` pairs for Step III.
fn refinement_pairs(pi_hat: &BlockMappingMatrix, mode: RefinementMode) -> (Vec<usize>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, r) in pi_hat.rows().iter().enumerate() {
        match (r, mode) {
            (RowMap::Identity, _) => {
                xs.push(i);
                ys.push(i);
            }
            (RowMap::Permuted(j), RefinementMode::CorrectedOneToOne) => {
                xs.push(*j);
                ys.push(i);
            }
            _ => {}
        }
    }
    (xs, ys)
}

fn pair_loss(x: &SphericalMatrix, y: &SphericalMatrix, w: &DenseMatrix, xs: &[usize], ys: &[usize]) -> Result<f64> {
    let xw = x.as_matrix().select_rows(xs).matmul(w)?;
    let yy = y.as_matrix().select_rows(ys);
    Ok(yy.sub(&xw)?.data().iter().map(|v| v * v).sum())
}

/// `‖Y − Π̂ X W‖²_F`.
pub fn mapping_loss(
    x: &SphericalMatrix,
    y: &SphericalMatrix,
    pi_hat: &BlockMappingMatrix,
    w: &OrthogonalMatrix,
) -> Result<f64> {
    let pred = pi_hat.apply(x.as_matrix())?.matmul(w.as_matrix())?;
    Ok(y.as_matrix().sub(&pred)?.data().iter().map(|v| v * v).sum())
}

/// Smallest singular value of a tall matrix, via its `p × p` Gram matrix.
pub fn smallest_singular_value(x: &DenseMatrix) -> Result<f64> {
    let gram = x.transpose_matmul(x)?;
    let s = svd(&gram)?;
    Ok(s.singular_values.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

/// Runs Steps I–III on group-ordered spherical data.
pub fn fit(
    x: &SphericalMatrix,
    y: &SphericalMatrix,
    partition: &GroupPartition,
    config: &FitConfig,
) -> Result<FitReport> {
    config.validate()?;
    if x.n() != y.n() || x.p() != y.p() {
        return Err(Error::DimensionMismatch {
            context: "fit",
            expected: format!("y {}x{}", x.n(), x.p()),
            got: format!("y {}x{}", y.n(), y.p()),
        });
    }
    let (n, p) = (x.n(), x.p());
    if partition.n() != n {
        return Err(Error::DimensionMismatch {
            context: "fit",
            expected: format!("partition over {n} rows"),
            got: format!("{} rows", partition.n()),
        });
    }
    if n <= p {
        return Err(Error::TooFewRows { rows: n, p });
    }
    for (g, size) in partition.sizes().into_iter().enumerate() {
        if size >= p {
            return Err(Error::GroupTooLarge { group: g, size, p });
        }
    }

    let sigma_p_x = smallest_singular_value(x.as_matrix())?;
    let w1 = procrustes_fit(x, y)?;
    let procrustes_loss = crate::spherical_regression::frobenius_loss(
        x.as_matrix(),
        y.as_matrix(),
        w1.as_matrix(),
    )?;

    let cv = CvSettings {
        grid: config.lambda_grid.clone(),
        folds: config.folds,
        seed: config.seed,
    };
    let mut w_cur = w1.clone();
    let mut prev: Option<BlockMappingMatrix> = None;
    let mut records = Vec::new();
    let mut converged = false;
    let mut last = None;
    for iteration in 1..=config.max_iterations {
        let (lambda, table) = match config.fixed_lambda {
            Some(l) => (l, None),
            None => {
                let (l, t) = select_lambda_with(
                    y,
                    x,
                    &w_cur,
                    partition,
                    &cv,
                    config.threshold_mode,
                    config.eta.as_deref(),
                )?;
                (l, Some(t))
            }
        };
        let pi_tilde = ols_mapping(y, x, &w_cur, partition)?;
        let tc = ThresholdConfig::new(config.threshold_mode, lambda, config.eta.clone())?;
        let pi_hat = hard_threshold(&pi_tilde, x, &tc)?;
        let map_loss = mapping_loss(x, y, &pi_hat, &w_cur)?;

        if let Some(before) = &prev {
            if same_mapping(before, &pi_hat) {
                converged = true;
                break;
            }
        }

        let (xs, ys) = refinement_pairs(&pi_hat, config.refinement);
        if config.refinement == RefinementMode::MatchedOnly && xs.len() <= p {
            return Err(Error::MatchedSetTooSmall { matched: xs.len(), p });
        }
        let w2 = procrustes_fit_pairs(x, y, &xs, &ys).map_err(|e| match e {
            Error::TooFewRows { rows, p } => Error::MatchedSetTooSmall { matched: rows, p },
            other => other,
        })?;
        let refined_loss = pair_loss(x, y, w2.as_matrix(), &xs, &ys)?;
        let w_change = w2.as_matrix().sub(w_cur.as_matrix())?.frobenius_norm();
        records.push(IterationRecord {
            iteration,
            lambda,
            counts: FitCounts::from_tags(pi_hat.counts()),
            refinement_pairs: xs.len(),
            mapping_loss: map_loss,
            refined_loss,
            w_change,
        });
        w_cur = w2.clone();
        prev = Some(pi_hat.clone());
        last = Some((pi_hat, w2, lambda, table, map_loss, refined_loss));
    }
    let (pi_hat, w2, lambda, cv_table, map_loss, refined_loss) =
        last.expect("at least one iteration runs");

    let classes = classify_rows(&pi_hat);
    let xw2 = x.as_matrix().matmul(w2.as_matrix())?;
    let gamma_hat = if classes.matched.is_empty() {
        f64::NAN
    } else {
        let mut total = 0.0;
        for &i in &classes.matched {
            total += cosine(y.row(i), xw2.row(i))?;
        }
        total / classes.matched.len() as f64
    };

    Ok(FitReport {
        w1,
        counts: FitCounts::from_tags(pi_hat.counts()),
        pi_hat,
        w2,
        lambda_selected: lambda,
        cv_table,
        losses: StageLosses {
            procrustes: procrustes_loss,
            mapping: map_loss,
            refined: refined_loss,
        },
        sigma_p_x,
        gamma_hat,
        iterations: records,
        converged,
        threshold_mode: config.threshold_mode,
        refinement: config.refinement,
    })
}

/// Accuracy of a fit relative to the generating `W` and Π.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// `‖Ŵ⁽¹⁾ − W‖²_F`.
    pub w1_mse: f64,
    pub w1_mse_per_p: f64,
    /// `‖Ŵ⁽²⁾ − W‖²_F`.
    pub w2_mse: f64,
    pub w2_mse_per_p: f64,
    /// Fraction of true one-to-one rows whose estimate is the same indicator.
    pub match_rate: f64,
    /// `Σ_{i∈C} ‖Π̂_i − Π_i‖² / (|C| n)`, zero when `C` is empty.
    pub weight_mse: f64,
    /// `|Ĉ ∩ C| / |C|`, one when `C` is empty.
    pub detection_rate: f64,
    pub true_one_to_one: usize,
    pub true_one_to_many: usize,
}

fn row_diff_sq(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() || j < b.len() {
        let ca = a.get(i).map_or(usize::MAX, |e| e.0);
        let cb = b.get(j).map_or(usize::MAX, |e| e.0);
        let d = if ca == cb {
            i += 1;
            j += 1;
            a[i - 1].1 - b[j - 1].1
        } else if ca < cb {
            i += 1;
            a[i - 1].1
        } else {
            j += 1;
            b[j - 1].1
        };
        acc += d * d;
    }
    acc
}

/// Metrics for arbitrary estimates; `W` estimates need not be orthogonal.
pub fn evaluate_estimates(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    pi_hat: &BlockMappingMatrix,
    true_w: &DenseMatrix,
    true_pi: &BlockMappingMatrix,
) -> Result<MetricSet> {
    if w1.shape() != true_w.shape() || w2.shape() != true_w.shape() {
        return Err(Error::DimensionMismatch {
            context: "evaluate",
            expected: format!("{}x{} W estimates", true_w.rows(), true_w.cols()),
            got: format!("{}x{} and {}x{}", w1.rows(), w1.cols(), w2.rows(), w2.cols()),
        });
    }
    if pi_hat.n() != true_pi.n() {
        return Err(Error::DimensionMismatch {
            context: "evaluate",
            expected: format!("{} mapping rows", true_pi.n()),
            got: format!("{}", pi_hat.n()),
        });
    }
    let n = true_pi.n();
    let p = true_w.rows() as f64;
    let sq = |m: &DenseMatrix| -> Result<f64> {
        Ok(m.sub(true_w)?.data().iter().map(|v| v * v).sum())
    };
    let (w1_mse, w2_mse) = (sq(w1)?, sq(w2)?);

    let (mut oto, mut hits, mut otm, mut detected, mut weight_sq) = (0usize, 0usize, 0usize, 0usize, 0.0);
    for i in 0..n {
        let truth = true_pi.entries(i);
        let est = pi_hat.entries(i);
        if true_pi.row(i).is_one_to_one() {
            oto += 1;
            if truth == est {
                hits += 1;
            }
        } else {
            otm += 1;
            if !pi_hat.row(i).is_one_to_one() {
                detected += 1;
            }
            weight_sq += row_diff_sq(&est, &truth);
        }
    }
    Ok(MetricSet {
        w1_mse,
        w1_mse_per_p: w1_mse / p,
        w2_mse,
        w2_mse_per_p: w2_mse / p,
        match_rate: if oto == 0 { 1.0 } else { hits as f64 / oto as f64 },
        weight_mse: if otm == 0 { 0.0 } else { weight_sq / (otm * n) as f64 },
        detection_rate: if otm == 0 { 1.0 } else { detected as f64 / otm as f64 },
        true_one_to_one: oto,
        true_one_to_many: otm,
    })
}

pub fn evaluate_against_truth(
    report: &FitReport,
    true_w: &OrthogonalMatrix,
    true_pi: &BlockMappingMatrix,
) -> Result<MetricSet> {
    evaluate_estimates(
        report.w1.as_matrix(),
        report.w2.as_matrix(),
        &report.pi_hat,
        true_w.as_matrix(),
        true_pi,
    )
}
