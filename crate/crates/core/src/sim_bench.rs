//! Synthetic data with a planted translation and mapping, the global
//! nearest-neighbour (MT) baseline, and replicated parameter sweeps.
//!
//! Each random component (group sizes, design matrix, translation, mapping,
//! response noise) draws from its own ChaCha stream. Changing the mismatch
//! exponent therefore leaves `X`, `W` and the noise draws unchanged, which
//! gives common random numbers across sweep points.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{norm, pseudo_inverse, svd, DenseMatrix};
use crate::mapping_recovery::{beta_of_row, BlockMappingMatrix, GroupPartition, RowMap};
use crate::pipeline::{evaluate_estimates, fit, FitConfig, MetricSet};
use crate::rng::{self, Rng};
use crate::spherical_regression::{OrthogonalMatrix, SphericalMatrix};
use crate::vmf::VmfSampler;

const STREAM_SIZES: u64 = 1;
const STREAM_X: u64 = 2;
const STREAM_W: u64 = 3;
const STREAM_PI: u64 = 4;
const STREAM_Y: u64 = 5;

/// Concentration used by the low-noise scenario.
pub const LOW_NOISE_KAPPA: f64 = 3000.0;
const MAX_WEIGHT_DRAWS: usize = 100_000;

/// How group sizes are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSizeSchedule {
    /// Rounded log-normal with median `n/K`, clipped to `[2, p − 1]` and
    /// adjusted to sum to `n`.
    LogNormal { sigma: f64 },
    /// Sizes as equal as possible.
    Equal,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Standard,
    /// Data as in `Standard`; fits use a partition with merged groups.
    CoarseGroups { merge_fraction: f64 },
    /// All mismatched rows are within-group permutations.
    PermutationOnly,
    /// Concentration fixed at 3000.
    LowNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub kappa: f64,
    pub k: usize,
    /// Mismatch exponent: `round(n^alpha)` rows of Π differ from the identity.
    pub alpha: f64,
    pub group_sizes: GroupSizeSchedule,
    /// Mixture weight of a row's own group centre relative to each other centre.
    pub mixture_ratio: f64,
    pub seed: u64,
    pub scenario: Scenario,
    /// Redraw weight rows until `β ≥ min_beta`.
    pub min_beta: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 8000,
            p: 300,
            kappa: 150.0,
            k: 1700,
            alpha: 0.8,
            group_sizes: GroupSizeSchedule::LogNormal { sigma: 0.5 },
            mixture_ratio: 2.0,
            seed: 0,
            scenario: Scenario::Standard,
            min_beta: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("alpha", "alpha must lie in [0,1]"));
        }
        if self.p < 4 {
            return Err(invalid("p", format!("need p >= 4, got {}", self.p)));
        }
        if self.n <= self.p {
            return Err(invalid("n", format!("need n > p = {}, got {}", self.p, self.n)));
        }
        if !self.kappa.is_finite() || self.kappa <= 0.0 {
            return Err(invalid("kappa", format!("must be positive and finite, got {}", self.kappa)));
        }
        if self.k == 0 {
            return Err(invalid("K", "need at least one group"));
        }
        if self.mixture_ratio.is_nan() || self.mixture_ratio <= 0.0 {
            return Err(invalid("mixture_ratio", "must be positive"));
        }
        if let Some(b) = self.min_beta {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid("min_beta", "must lie in [0, 1)"));
            }
        }
        if let Scenario::CoarseGroups { merge_fraction } = self.scenario {
            if !(0.0..=1.0).contains(&merge_fraction) {
                return Err(invalid("merge_fraction", "must lie in [0, 1]"));
            }
        }
        match &self.group_sizes {
            GroupSizeSchedule::LogNormal { sigma } => {
                if sigma.is_nan() || *sigma < 0.0 {
                    return Err(invalid("group_sizes", "log-normal sigma must be >= 0"));
                }
                self.check_size_range()?;
            }
            GroupSizeSchedule::Equal => self.check_size_range()?,
            GroupSizeSchedule::Explicit(sizes) => {
                if sizes.len() != self.k {
                    return Err(invalid(
                        "group_sizes",
                        format!("{} sizes given for K = {}", sizes.len(), self.k),
                    ));
                }
                if sizes.iter().sum::<usize>() != self.n {
                    return Err(invalid("group_sizes", format!("sizes must sum to n = {}", self.n)));
                }
                if sizes.iter().any(|&s| s == 0 || s >= self.p) {
                    return Err(invalid("group_sizes", format!("every size must lie in [1, p - 1] = [1, {}]", self.p - 1)));
                }
            }
        }
        Ok(())
    }

    fn check_size_range(&self) -> Result<()> {
        let (lo, hi) = (2 * self.k, self.k * (self.p - 1));
        if self.n < lo || self.n > hi {
            return Err(invalid(
                "K",
                format!(
                    "n = {} cannot be split into {} groups of size 2..={}; need {lo} <= n <= {hi}",
                    self.n,
                    self.k,
                    self.p - 1
                ),
            ));
        }
        Ok(())
    }

    /// `round(n^alpha)`, or 0 when fewer than two rows would be mismatched.
    pub fn n_mis(&self) -> usize {
        let m = (self.n as f64).powf(self.alpha);
        if m < 2.0 {
            0
        } else {
            (m.round() as usize).min(self.n)
        }
    }

    pub fn effective_kappa(&self) -> f64 {
        match self.scenario {
            Scenario::LowNoise => LOW_NOISE_KAPPA,
            _ => self.kappa,
        }
    }
}

/// A simulated dataset together with the parameters that generated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub x: SphericalMatrix,
    pub y: SphericalMatrix,
    pub w_true: OrthogonalMatrix,
    pub pi_true: BlockMappingMatrix,
    pub partition: GroupPartition,
    /// Mixture component that generated each row of `X`.
    pub components: Vec<usize>,
    /// Messages about adjustments made while planting mismatches.
    pub notes: Vec<String>,
    pub config: SimConfig,
}

/// Draws one dataset. Deterministic in `config`.
pub fn generate(config: &SimConfig) -> Result<GroundTruth> {
    config.validate()?;
    let (n, p, k) = (config.n, config.p, config.k);
    let kappa = config.effective_kappa();
    let sizes = group_sizes(config)?;
    let partition = GroupPartition::from_sizes(&sizes)?;

    let sampler = VmfSampler::new(kappa, p)?;
    let mut xr = rng::stream(config.seed, STREAM_X);
    let mut centres = DenseMatrix::zeros(k, p);
    for g in 0..k {
        unit_gaussian(&mut xr, centres.row_mut(g));
    }
    let mut x = DenseMatrix::zeros(n, p);
    let mut components = Vec::with_capacity(n);
    for g in 0..k {
        for i in partition.range(g) {
            let c = draw_component(&mut xr, g, k, config.mixture_ratio);
            components.push(c);
            sampler.draw_into(centres.row(c), &mut xr, x.row_mut(i));
        }
    }
    let x = SphericalMatrix::new(x)?;

    let mut wr = rng::stream(config.seed, STREAM_W);
    let g = DenseMatrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut wr));
    let w_true = OrthogonalMatrix::new(svd(&g)?.u)?;

    let mut notes = Vec::new();
    let pi_true = plant_mapping(config, &partition, &x, &mut notes)?;

    let mean = pi_true.apply(x.as_matrix())?.matmul(w_true.as_matrix())?;
    let mut yr = rng::stream(config.seed, STREAM_Y);
    let mut y = DenseMatrix::zeros(n, p);
    for i in 0..n {
        sampler.draw_into(mean.row(i), &mut yr, y.row_mut(i));
    }
    Ok(GroundTruth {
        x,
        y: SphericalMatrix::new(y)?,
        w_true,
        pi_true,
        partition,
        components,
        notes,
        config: config.clone(),
    })
}

/// Component index: own group `g` with weight `ratio`, every other with weight 1.
fn draw_component(rng: &mut Rng, g: usize, k: usize, ratio: f64) -> usize {
    if k == 1 {
        return 0;
    }
    let u = rng.random::<f64>() * (ratio + (k - 1) as f64);
    if u < ratio {
        return g;
    }
    let other = ((u - ratio) as usize).min(k - 2);
    if other >= g {
        other + 1
    } else {
        other
    }
}

fn unit_gaussian(rng: &mut Rng, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let nv = norm(out);
        if nv > 0.0 {
            out.iter_mut().for_each(|v| *v /= nv);
            return;
        }
    }
}

fn group_sizes(config: &SimConfig) -> Result<Vec<usize>> {
    let (n, k, hi) = (config.n, config.k, config.p - 1);
    match &config.group_sizes {
        GroupSizeSchedule::Explicit(s) => Ok(s.clone()),
        GroupSizeSchedule::Equal => Ok((0..k).map(|g| n / k + usize::from(g < n % k)).collect()),
        GroupSizeSchedule::LogNormal { sigma } => {
            let mut r = rng::stream(config.seed, STREAM_SIZES);
            let mu = (n as f64 / k as f64).ln();
            let mut sizes: Vec<usize> = (0..k)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    ((mu + sigma * z).exp().round() as usize).clamp(2, hi)
                })
                .collect();
            let mut total: usize = sizes.iter().sum();
            while total != n {
                let g = r.random_range(0..k);
                if total < n && sizes[g] < hi {
                    sizes[g] += 1;
                    total += 1;
                } else if total > n && sizes[g] > 2 {
                    sizes[g] -= 1;
                    total -= 1;
                }
            }
            Ok(sizes)
        }
    }
}

fn plant_mapping(
    config: &SimConfig,
    partition: &GroupPartition,
    x: &SphericalMatrix,
    notes: &mut Vec<String>,
) -> Result<BlockMappingMatrix> {
    let n = partition.n();
    let n_mis = config.n_mis();
    let mut rows = vec![RowMap::Identity; n];
    if n_mis == 0 {
        return BlockMappingMatrix::new(partition.clone(), rows);
    }
    let mut r = rng::stream(config.seed, STREAM_PI);
    let (mut n_perm, mut n_weight) = match config.scenario {
        Scenario::PermutationOnly => (n_mis, 0),
        _ => (n_mis / 2, n_mis - n_mis / 2),
    };
    if n_perm == 1 {
        n_perm = 0;
        n_weight += 1;
        notes.push("a single permutation row cannot be planted; moved to the weighted quota".into());
    }

    let mut members: Vec<Vec<usize>> = partition
        .ranges()
        .map(|range| {
            let mut m: Vec<usize> = range.collect();
            m.shuffle(&mut r);
            m
        })
        .collect();
    let mut used = vec![false; n];
    let mut cycles: Vec<Vec<usize>> = Vec::new();
    let mut planted = 0;
    if n_perm % 2 == 1 {
        // one 3-cycle absorbs the odd row
        let mut hosts: Vec<usize> = (0..members.len()).filter(|&g| members[g].len() >= 3).collect();
        hosts.shuffle(&mut r);
        if let Some(&g) = hosts.first() {
            cycles.push(members[g].drain(..3).collect());
            planted += 3;
        }
    }
    let mut pairs: Vec<Vec<usize>> = members
        .iter()
        .flat_map(|m| m.chunks_exact(2).map(<[usize]>::to_vec))
        .collect();
    pairs.shuffle(&mut r);
    for pr in pairs {
        if planted + 2 > n_perm {
            break;
        }
        cycles.push(pr);
        planted += 2;
    }
    if planted < n_perm {
        notes.push(format!(
            "only {planted} of {n_perm} permutation rows fit within groups; \
             {} moved to the weighted quota",
            n_perm - planted
        ));
        n_weight += n_perm - planted;
    }
    for cyc in &cycles {
        for (pos, &i) in cyc.iter().enumerate() {
            let j = cyc[(pos + 1) % cyc.len()];
            rows[i] = RowMap::Permuted(j);
            used[i] = true;
        }
    }

    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| !used[i] && partition.size(partition.group_of(i)) >= 2)
        .collect();
    candidates.shuffle(&mut r);
    if candidates.len() < n_weight {
        notes.push(format!(
            "only {} rows available for {} weighted rows",
            candidates.len(),
            n_weight
        ));
    }
    let mut chosen: Vec<usize> = candidates.into_iter().take(n_weight).collect();
    chosen.sort_unstable();
    let mut buf = vec![0.0; x.p()];
    for i in chosen {
        let range = partition.range(partition.group_of(i));
        let size = range.len();
        let mut attempts = 0;
        let w = loop {
            let w: Vec<f64> = (0..size).map(|_| r.random::<f64>()).collect();
            attempts += 1;
            let beta_ok = config
                .min_beta
                .is_none_or(|b| beta_of_row(&w).beta >= b);
            if beta_ok {
                break w;
            }
            if attempts >= MAX_WEIGHT_DRAWS {
                return Err(invalid(
                    "min_beta",
                    format!("no weight row with beta >= {:?} found for a group of size {size}", config.min_beta),
                ));
            }
        };
        buf.fill(0.0);
        for (l, wl) in w.iter().enumerate() {
            for (b, xv) in buf.iter_mut().zip(x.row(range.start + l)) {
                *b += wl * xv;
            }
        }
        let nb = norm(&buf);
        if nb == 0.0 {
            return Err(Error::ZeroVector);
        }
        rows[i] = RowMap::Weighted(w.into_iter().map(|v| v / nb).collect());
    }
    BlockMappingMatrix::new(partition.clone(), rows)
}

/// The MT baseline: unconstrained least squares for `W` and global
/// cosine-nearest matching without group structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtFit {
    /// `(XᵀX)^{-1} XᵀY`.
    pub w_ols: DenseMatrix,
    /// Each response matched to one predictor row, over a single group.
    pub pi_perm: BlockMappingMatrix,
    /// `‖Ŵ Ŵᵀ − I‖_F`.
    pub orthogonality_defect: f64,
    /// Least squares refit on rows matched to themselves, if more than `p`.
    pub w_refit: Option<DenseMatrix>,
}

fn ols_w(x: &DenseMatrix, y: &DenseMatrix) -> Result<DenseMatrix> {
    let gram = x.transpose_matmul(x)?;
    let dec = svd(&gram)?;
    let (top, bottom) = (dec.singular_values[0], *dec.singular_values.last().expect("p >= 1"));
    if bottom <= crate::linalg::DEFAULT_PINV_REL_TOL * top {
        return Err(Error::RankDeficient {
            sigma_min: bottom,
            sigma_max: top,
            rel_tol: crate::linalg::DEFAULT_PINV_REL_TOL,
        });
    }
    pseudo_inverse(&gram, crate::linalg::DEFAULT_PINV_REL_TOL)?.matmul(&x.transpose_matmul(y)?)
}

pub fn mt_baseline_fit(x: &SphericalMatrix, y: &SphericalMatrix) -> Result<MtFit> {
    if x.n() != y.n() || x.p() != y.p() {
        return Err(Error::DimensionMismatch {
            context: "mt_baseline_fit",
            expected: format!("y {}x{}", x.n(), x.p()),
            got: format!("y {}x{}", y.n(), y.p()),
        });
    }
    let w_ols = ols_w(x.as_matrix(), y.as_matrix())?;
    let mut t = x.as_matrix().matmul(&w_ols)?;
    for i in 0..t.rows() {
        let nr = norm(t.row(i));
        if nr > 0.0 {
            t.row_mut(i).iter_mut().for_each(|v| *v /= nr);
        }
    }
    let n = x.n();
    let matches: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = y.row(i);
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for j in 0..n {
                let v = crate::linalg::dot(yi, t.row(j));
                if v > best_val {
                    best_val = v;
                    best = j;
                }
            }
            best
        })
        .collect();
    let rows = matches
        .iter()
        .enumerate()
        .map(|(i, &j)| if i == j { RowMap::Identity } else { RowMap::Permuted(j) })
        .collect();
    let pi_perm = BlockMappingMatrix::new(GroupPartition::single(n)?, rows)?;
    let selfs: Vec<usize> = (0..n).filter(|&i| matches[i] == i).collect();
    let w_refit = if selfs.len() > x.p() {
        ols_w(&x.as_matrix().select_rows(&selfs), &y.as_matrix().select_rows(&selfs)).ok()
    } else {
        None
    };
    Ok(MtFit {
        orthogonality_defect: w_ols.orthogonality_defect(),
        w_ols,
        pi_perm,
        w_refit,
    })
}

/// Metrics of the MT baseline; without a refit the refit slot repeats `w_ols`.
pub fn evaluate_mt(mt: &MtFit, truth: &GroundTruth) -> Result<MetricSet> {
    evaluate_estimates(
        &mt.w_ols,
        mt.w_refit.as_ref().unwrap_or(&mt.w_ols),
        &mt.pi_perm,
        truth.w_true.as_matrix(),
        &truth.pi_true,
    )
}

/// Merges groups `(s, s + 1)` at `s = ⌊b · 2/f⌋` for each complete block of
/// `2/f` groups, so a fraction `f` of groups take part in a merge.
pub fn coarse_group_scenario(truth: &GroundTruth, merge_fraction: f64) -> Result<GroupPartition> {
    coarsen(&truth.partition, merge_fraction)
}

pub fn coarsen(partition: &GroupPartition, merge_fraction: f64) -> Result<GroupPartition> {
    if !(0.0..=1.0).contains(&merge_fraction) {
        return Err(invalid("merge_fraction", "must lie in [0, 1]"));
    }
    let k = partition.k();
    if merge_fraction == 0.0 {
        return Ok(partition.clone());
    }
    if k < 5 {
        return Err(invalid("K", format!("coarsening needs at least 5 groups, got {k}")));
    }
    let period = 2.0 / merge_fraction;
    let merges = (k as f64 * merge_fraction / 2.0).floor() as usize;
    let starts: Vec<usize> = (0..merges).map(|b| (b as f64 * period).floor() as usize).collect();
    let sizes = partition.sizes();
    let mut out = Vec::with_capacity(k - merges);
    let mut g = 0;
    while g < k {
        if starts.binary_search(&g).is_ok() && g + 1 < k {
            out.push(sizes[g] + sizes[g + 1]);
            g += 2;
        } else {
            out.push(sizes[g]);
            g += 1;
        }
    }
    GroupPartition::from_sizes(&out)
}

/// Parameter varied across a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha(Vec<f64>),
    /// `(n, K)` pairs.
    SampleSize(Vec<(usize, usize)>),
    Kappa(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Alpha(_) => "alpha",
            SweepAxis::SampleSize(_) => "n",
            SweepAxis::Kappa(_) => "kappa",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Alpha(v) | SweepAxis::Kappa(v) => v.len(),
            SweepAxis::SampleSize(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn apply(&self, base: &SimConfig, point: usize) -> (f64, SimConfig) {
        let mut c = base.clone();
        let value = match self {
            SweepAxis::Alpha(v) => {
                c.alpha = v[point];
                v[point]
            }
            SweepAxis::SampleSize(v) => {
                (c.n, c.k) = v[point];
                v[point].0 as f64
            }
            SweepAxis::Kappa(v) => {
                c.kappa = v[point];
                v[point]
            }
        };
        (value, c)
    }
}

/// Per-replicate seed; shared across sweep points for common random numbers.
pub fn replicate_seed(base_seed: u64, replicate: usize) -> u64 {
    base_seed ^ replicate as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub point: usize,
    pub value: f64,
    pub replicate: usize,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub spherical: Option<MetricSet>,
    pub mt: Option<MetricSet>,
    pub mt_orthogonality_defect: Option<f64>,
    pub error: Option<String>,
}

/// Mean metrics of one method at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: usize,
    pub value: f64,
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    pub w1_mse: f64,
    pub w2_mse: f64,
    pub w1_mse_per_p: f64,
    pub w2_mse_per_p: f64,
    pub match_rate: f64,
    pub weight_mse: f64,
    pub detection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    pub records: Vec<ReplicateRecord>,
}

impl SweepTable {
    pub const TSV_HEADER: &'static str = "point\tvalue\tmethod\treplicates\tfailures\tw1_mse\tw2_mse\tw1_mse_per_p\tw2_mse_per_p\tmatch_rate\tweight_mse\tdetection_rate";

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::TSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{}\t{:e}\t{}\n",
                r.point,
                r.value,
                r.method,
                r.replicates,
                r.failures,
                r.w1_mse,
                r.w2_mse,
                r.w1_mse_per_p,
                r.w2_mse_per_p,
                r.match_rate,
                r.weight_mse,
                r.detection_rate
            ));
        }
        out
    }

    /// Successful metric sets of `method` (`"spherical"` or `"mt"`) at `point`.
    pub fn metrics(&self, point: usize, method: &str) -> Vec<MetricSet> {
        self.records
            .iter()
            .filter(|r| r.point == point)
            .filter_map(|r| if method == "mt" { r.mt } else { r.spherical })
            .collect()
    }
}

/// Sweep configuration, also the CLI's sweep file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: SimConfig,
    pub axis: SweepAxis,
    pub replicates: usize,
    #[serde(default)]
    pub fit: FitConfig,
}

/// Runs one replicate: generate, fit both methods, evaluate.
pub fn run_replicate(config: &SimConfig, fit_config: &FitConfig) -> Result<(f64, MetricSet, MtFit, MetricSet)> {
    let truth = generate(config)?;
    let partition = match config.scenario {
        Scenario::CoarseGroups { merge_fraction } => coarse_group_scenario(&truth, merge_fraction)?,
        _ => truth.partition.clone(),
    };
    let fc = FitConfig {
        seed: config.seed,
        ..fit_config.clone()
    };
    let report = fit(&truth.x, &truth.y, &partition, &fc)?;
    let ours = crate::pipeline::evaluate_against_truth(&report, &truth.w_true, &truth.pi_true)?;
    let mt = mt_baseline_fit(&truth.x, &truth.y)?;
    let theirs = evaluate_mt(&mt, &truth)?;
    Ok((report.lambda_selected, ours, mt, theirs))
}

pub fn run_sweep(base: &SimConfig, vary: &SweepAxis, replicates: usize) -> Result<SweepTable> {
    run_sweep_with(base, vary, replicates, &FitConfig::default())
}

/// Cells run in parallel and are merged in (point, replicate) order. A failing
/// replicate is recorded without stopping the sweep.
pub fn run_sweep_with(
    base: &SimConfig,
    vary: &SweepAxis,
    replicates: usize,
    fit_config: &FitConfig,
) -> Result<SweepTable> {
    if replicates == 0 {
        return Err(invalid("replicates", "must be at least 1"));
    }
    if vary.is_empty() {
        return Err(invalid("axis", "sweep axis has no values"));
    }
    fit_config.validate()?;
    let cells: Vec<(usize, usize)> = (0..vary.len())
        .flat_map(|pt| (0..replicates).map(move |r| (pt, r)))
        .collect();
    let records: Vec<ReplicateRecord> = cells
        .par_iter()
        .map(|&(point, replicate)| {
            let (value, mut cfg) = vary.apply(base, point);
            cfg.seed = replicate_seed(base.seed, replicate);
            let mut rec = ReplicateRecord {
                point,
                value,
                replicate,
                seed: cfg.seed,
                lambda: None,
                spherical: None,
                mt: None,
                mt_orthogonality_defect: None,
                error: None,
            };
            match run_replicate(&cfg, fit_config) {
                Ok((lambda, ours, mt, theirs)) => {
                    rec.lambda = Some(lambda);
                    rec.spherical = Some(ours);
                    rec.mt = Some(theirs);
                    rec.mt_orthogonality_defect = Some(mt.orthogonality_defect);
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            rec
        })
        .collect();

    let mut rows = Vec::new();
    for point in 0..vary.len() {
        let value = vary.apply(base, point).0;
        for method in ["spherical", "mt"] {
            let ms: Vec<MetricSet> = records
                .iter()
                .filter(|r| r.point == point)
                .filter_map(|r| if method == "mt" { r.mt } else { r.spherical })
                .collect();
            let mean = |f: fn(&MetricSet) -> f64| -> f64 {
                if ms.is_empty() {
                    f64::NAN
                } else {
                    ms.iter().map(f).sum::<f64>() / ms.len() as f64
                }
            };
            rows.push(SweepRow {
                point,
                value,
                method: method.into(),
                replicates: ms.len(),
                failures: replicates - ms.len(),
                w1_mse: mean(|m| m.w1_mse),
                w2_mse: mean(|m| m.w2_mse),
                w1_mse_per_p: mean(|m| m.w1_mse_per_p),
                w2_mse_per_p: mean(|m| m.w2_mse_per_p),
                match_rate: mean(|m| m.match_rate),
                weight_mse: mean(|m| m.weight_mse),
                detection_rate: mean(|m| m.detection_rate),
            });
        }
    }
    Ok(SweepTable {
        axis: vary.name().into(),
        rows,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping_recovery::classify_rows;

    fn small(seed: u64) -> SimConfig {
        SimConfig {
            n: 300,
            p: 30,
            kappa: 150.0,
            k: 30,
            alpha: 0.8,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn generator_soundness() {
        let cfg = small(1);
        let t = generate(&cfg).unwrap();
        assert_eq!(t.partition.n(), 300);
        assert_eq!(t.partition.k(), 30);
        assert!(t.partition.sizes().iter().all(|&s| (2..30).contains(&s)));
        for r in t.y.as_matrix().row_iter() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
        let c = classify_rows(&t.pi_true);
        assert_eq!(c.matched.len(), 300 - cfg.n_mis());
        let counts = t.pi_true.counts();
        assert_eq!(counts.permuted, cfg.n_mis() / 2);
        assert_eq!(counts.weighted, cfg.n_mis() - cfg.n_mis() / 2);
        let feas = t.pi_true.feasibility(t.x.as_matrix()).unwrap();
        assert!(feas.holds());
        assert_eq!(feas.checked, 300);
        assert!(t.w_true.as_matrix().orthogonality_defect() < 1e-10);
        assert!(t.notes.is_empty(), "{:?}", t.notes);
    }

    #[test]
    fn permutation_rows_stay_in_group_and_form_cycles() {
        let t = generate(&small(2)).unwrap();
        let part = &t.partition;
        let mut targets = std::collections::HashSet::new();
        for (i, r) in t.pi_true.rows().iter().enumerate() {
            if let RowMap::Permuted(j) = r {
                assert_eq!(part.group_of(i), part.group_of(*j));
                assert!(targets.insert(*j));
                assert!(matches!(t.pi_true.row(*j), RowMap::Permuted(_)));
            }
        }
    }

    #[test]
    fn tiny_alpha_gives_identity() {
        let cfg = SimConfig { alpha: 0.1, ..small(3) };
        assert_eq!(cfg.n_mis(), 0);
        let t = generate(&cfg).unwrap();
        assert_eq!(t.pi_true, BlockMappingMatrix::identity(t.partition.clone()));
    }

    #[test]
    fn generation_is_deterministic_and_uses_common_streams() {
        let a = generate(&small(4)).unwrap();
        let b = generate(&small(4)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SimConfig { alpha: 0.5, ..small(4) }).unwrap();
        assert_eq!(a.x, c.x);
        assert_eq!(a.w_true, c.w_true);
        assert_ne!(a.pi_true, c.pi_true);
        // identity rows in both share the same noise draw
        let both: Vec<usize> = (0..300)
            .filter(|&i| a.pi_true.row(i) == &RowMap::Identity && c.pi_true.row(i) == &RowMap::Identity)
            .collect();
        assert!(!both.is_empty());
        for i in both {
            assert_eq!(a.y.row(i), c.y.row(i));
        }
    }

    #[test]
    fn validation_messages() {
        let err = SimConfig { alpha: 1.2, ..small(0) }.validate().unwrap_err();
        assert!(err.to_string().contains("alpha must lie in [0,1]"));
        assert!(SimConfig { k: 200, ..small(0) }.validate().is_err());
        assert!(SimConfig { n: 20, ..small(0) }.validate().is_err());
        assert!(SimConfig { kappa: 0.0, ..small(0) }.validate().is_err());
    }

    #[test]
    fn min_beta_is_respected() {
        let cfg = SimConfig { min_beta: Some(0.2), ..small(5) };
        let t = generate(&cfg).unwrap();
        for r in t.pi_true.rows() {
            if let RowMap::Weighted(w) = r {
                assert!(beta_of_row(w).beta >= 0.2);
            }
        }
    }

    #[test]
    fn permutation_quota_overflow_is_logged() {
        // 10 pairs host at most 20 permutation rows; singletons host none
        let mut sizes = vec![2usize; 10];
        sizes.extend([1; 5]);
        let cfg = SimConfig {
            n: 25,
            p: 8,
            k: 15,
            alpha: 1.0,
            group_sizes: GroupSizeSchedule::Explicit(sizes),
            scenario: Scenario::PermutationOnly,
            ..small(6)
        };
        let t = generate(&cfg).unwrap();
        assert_eq!(t.pi_true.counts().permuted, 20);
        assert!(!t.notes.is_empty());
    }

    #[test]
    fn mixture_assignment_favours_own_group() {
        let mut r = rng::seeded(7);
        let mut hits = [0usize; 4];
        for _ in 0..100_000 {
            hits[draw_component(&mut r, 2, 4, 2.0)] += 1;
        }
        // own weight 2, others 1: P(own) = 2/5, P(other) = 1/5
        assert!((hits[2] as f64 / 1e5 - 0.4).abs() < 0.005, "{hits:?}");
        for c in [0, 1, 3] {
            assert!((hits[c] as f64 / 1e5 - 0.2).abs() < 0.005, "{hits:?}");
        }
        let t = generate(&small(7)).unwrap();
        assert_eq!(t.components.len(), 300);
    }

    #[test]
    fn mt_baseline_on_aligned_data() {
        let mut cfg = small(8);
        cfg.alpha = 0.0;
        let t = generate(&cfg).unwrap();
        let y = SphericalMatrix::new(t.x.as_matrix().matmul(t.w_true.as_matrix()).unwrap()).unwrap();
        let mt = mt_baseline_fit(&t.x, &y).unwrap();
        assert_eq!(mt.pi_perm.counts().identity, 300);
        assert!(mt.orthogonality_defect < 1e-8);
        let noisy = mt_baseline_fit(&t.x, &t.y).unwrap();
        assert!(noisy.orthogonality_defect > 1e-3);
        let tm = generate(&small(8)).unwrap();
        let m = evaluate_mt(&mt_baseline_fit(&tm.x, &tm.y).unwrap(), &tm).unwrap();
        assert_eq!(m.detection_rate, 0.0);
    }

    #[test]
    fn coarsening_counts() {
        for k in [5usize, 7, 10, 23, 100] {
            let p = GroupPartition::from_sizes(&vec![3; k]).unwrap();
            let c = coarsen(&p, 0.4).unwrap();
            assert_eq!(c.k(), k - k / 5, "K = {k}");
            assert_eq!(c.n(), p.n());
            assert_eq!(coarsen(&p, 0.0).unwrap(), p);
        }
        let p = GroupPartition::from_sizes(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]).unwrap();
        assert_eq!(coarsen(&p, 0.4).unwrap().sizes(), [3, 3, 4, 5, 13, 8, 9, 10]);
        assert!(coarsen(&GroupPartition::from_sizes(&[2; 4]).unwrap(), 0.4).is_err());
    }

    #[test]
    fn sweep_runs_and_tabulates() {
        let base = SimConfig { n: 400, p: 40, k: 40, ..small(9) };
        let table = run_sweep(&base, &SweepAxis::Alpha(vec![0.5, 0.8]), 2).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.records.len(), 4);
        assert!(table.records.iter().all(|r| r.error.is_none()), "{:?}", table.records);
        let tsv = table.to_tsv();
        assert_eq!(tsv.lines().count(), 5);
        assert_eq!(table.records[0].seed, table.records[2].seed);
        let again = run_sweep(&base, &SweepAxis::Alpha(vec![0.5, 0.8]), 2).unwrap();
        assert_eq!(serde_json::to_string(&table).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn sweep_records_failures_without_aborting() {
        // groups of 29 merged pairwise exceed p − 1
        let base = SimConfig {
            n: 290,
            p: 30,
            k: 10,
            group_sizes: GroupSizeSchedule::Equal,
            scenario: Scenario::CoarseGroups { merge_fraction: 0.4 },
            ..small(10)
        };
        let table = run_sweep(&base, &SweepAxis::Alpha(vec![0.5]), 1).unwrap();
        assert!(table.records[0].error.as_deref().unwrap().contains("n_k < p"));
        assert_eq!(table.rows[0].failures, 1);
    }
}
