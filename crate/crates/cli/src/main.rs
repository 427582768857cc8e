//! `spheremap` command-line tool: simulate data, fit the estimator, build
//! embeddings from co-occurrence counts and score fits against ground truth.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 model-assumption
//! or numerical failure.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use spheremap::embedding_ingest::{build_sppmi, embed, CooccurrenceTable, DEFAULT_SHIFT, DEFAULT_SMOOTHING};
use spheremap::io::{load_groups, load_mapping, load_matrix, save_groups, save_mapping, save_matrix};
use spheremap::linalg::row_normalize;
use spheremap::mapping_recovery::{default_lambda_grid, ThresholdMode, DEFAULT_FOLDS};
use spheremap::pipeline::{evaluate_estimates, fit, FitConfig, MetricSet, RefinementMode};
use spheremap::sim_bench::{generate, run_sweep_with, GroupSizeSchedule, Scenario, SimConfig, SweepConfig, SweepTable};
use spheremap::spherical_regression::SphericalMatrix;
use spheremap::DenseMatrix;
use thiserror::Error;

const FORMAT_VERSION: u32 = 1;
/// Rows further than this from unit norm need `--normalize`.
const INPUT_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] spheremap::Error),
    #[error("{0}")]
    Input(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use spheremap::Error as E;
        match self {
            CliError::Input(_) => 2,
            CliError::Core(e) => match e {
                E::NonFinite { .. }
                | E::DimensionMismatch { .. }
                | E::ZeroRow { .. }
                | E::NotUnitRow { .. }
                | E::InvalidParameter { .. }
                | E::InvalidPartition(_)
                | E::Parse { .. }
                | E::Io(_) => 2,
                E::SvdNoConvergence { .. }
                | E::RankDeficient { .. }
                | E::ZeroVector
                | E::TooFewRows { .. }
                | E::GroupTooLarge { .. }
                | E::SingularGram { .. }
                | E::FoldTooSmall { .. }
                | E::InsufficientRank { .. }
                | E::MatchedSetTooSmall { .. } => 3,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "spheremap", version, about = "Spherical regression with mismatch recovery")]
struct Cli {
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true, env = "SPHEREMAP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write all of its components.
    Simulate(SimulateArgs),
    /// Estimate W and Π from X, Y and a group file.
    Fit(FitArgs),
    /// Build unit-norm embeddings from co-occurrence triplets.
    Embed(EmbedArgs),
    /// Score a fit against ground truth, or run a simulation sweep.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Standard,
    Coarse,
    PermutationOnly,
    LowNoise,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON file with a full simulation config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of groups.
    #[arg(long = "K", alias = "groups")]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Log-normal spread of group sizes.
    #[arg(long, conflicts_with = "equal_groups")]
    sigma: Option<f64>,
    #[arg(long)]
    equal_groups: bool,
    #[arg(long)]
    mixture_ratio: Option<f64>,
    #[arg(long)]
    min_beta: Option<f64>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Fraction of groups merged under `--scenario coarse`.
    #[arg(long, default_value_t = 0.5)]
    merge_fraction: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    groups: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Rescale rows to unit length instead of rejecting them.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value = "fixed")]
    threshold_mode: ThresholdMode,
    /// Per-group priors (matrix file with one column), for `prior-fraction`.
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long, default_value = "matched")]
    refine: RefinementMode,
    /// Fixed threshold; skips cross-validation.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long, default_value_t = 1)]
    max_iterations: usize,
    /// Seeds the cross-validation folds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EmbedArgs {
    /// Lines of `item_i<TAB>item_j<TAB>count`.
    #[arg(long, short)]
    input: PathBuf,
    /// Optional vocabulary file, one item per line, fixing row order.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Negative-sampling shift.
    #[arg(long, default_value_t = DEFAULT_SHIFT)]
    k: u32,
    /// Context smoothing exponent.
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    alpha: f64,
    #[arg(long)]
    dim: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `fit`.
    #[arg(long, required_unless_present = "sweep")]
    fit: Option<PathBuf>,
    /// Directory written by `simulate`.
    #[arg(long, required_unless_present = "sweep")]
    truth: Option<PathBuf>,
    /// JSON sweep config; runs the sweep instead of scoring a fit.
    #[arg(long, conflicts_with_all = ["fit", "truth"])]
    sweep: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = fs::File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: invalid JSON: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn simulate(args: SimulateArgs) -> CliResult<()> {
    let mut config = match &args.config {
        Some(path) => read_json::<SimConfig>(path)?,
        None => SimConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = args.$field { config.$field = v; } )* };
    }
    set!(n, p, kappa, alpha, k, seed, mixture_ratio);
    if args.min_beta.is_some() {
        config.min_beta = args.min_beta;
    }
    if let Some(sigma) = args.sigma {
        config.group_sizes = GroupSizeSchedule::LogNormal { sigma };
    }
    if args.equal_groups {
        config.group_sizes = GroupSizeSchedule::Equal;
    }
    if let Some(s) = args.scenario {
        config.scenario = match s {
            ScenarioArg::Standard => Scenario::Standard,
            ScenarioArg::Coarse => Scenario::CoarseGroups {
                merge_fraction: args.merge_fraction,
            },
            ScenarioArg::PermutationOnly => Scenario::PermutationOnly,
            ScenarioArg::LowNoise => Scenario::LowNoise,
        };
    }
    let truth = generate(&config)?;
    ensure_dir(&args.out)?;
    save_matrix(&args.out.join("x.tsv"), truth.x.as_matrix())?;
    save_matrix(&args.out.join("y.tsv"), truth.y.as_matrix())?;
    save_matrix(&args.out.join("w_true.tsv"), truth.w_true.as_matrix())?;
    save_mapping(&args.out.join("pi_true.tsv"), &truth.pi_true)?;
    save_groups(&args.out.join("groups.tsv"), &truth.partition)?;
    let mut files = vec!["x.tsv", "y.tsv", "w_true.tsv", "pi_true.tsv", "groups.tsv"];
    if let Scenario::CoarseGroups { merge_fraction } = config.scenario {
        let coarse = spheremap::sim_bench::coarse_group_scenario(&truth, merge_fraction)?;
        save_groups(&args.out.join("groups_coarse.tsv"), &coarse)?;
        files.push("groups_coarse.tsv");
    }
    write_json(
        &args.out.join("manifest.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "command": "simulate",
            "config": config,
            "seed": config.seed,
            "n_mis": config.n_mis(),
            "group_sizes": truth.partition.sizes(),
            "notes": truth.notes,
            "files": files,
        }),
    )?;
    Ok(())
}

fn load_sphere(path: &Path, normalize: bool) -> CliResult<SphericalMatrix> {
    let m = load_matrix(path)?;
    if let Ok(sphere) = SphericalMatrix::new(m.clone()) {
        return Ok(sphere);
    }
    if !normalize {
        for (i, row) in m.row_iter().enumerate() {
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (nr - 1.0).abs() > INPUT_UNIT_TOL {
                return Err(CliError::Input(format!(
                    "{}: row {i} has norm {nr}, not unit length within {INPUT_UNIT_TOL:e}; pass --normalize to rescale",
                    path.display()
                )));
            }
        }
    }
    Ok(row_normalize(&m)?)
}

fn cmd_fit(args: FitArgs) -> CliResult<()> {
    let x = load_sphere(&args.x, args.normalize)?;
    let y = load_sphere(&args.y, args.normalize)?;
    let partition = load_groups(&args.groups)?;
    let eta = match &args.priors {
        Some(path) => {
            let m = load_matrix(path)?;
            if m.cols() != 1 {
                return Err(CliError::Input(format!("{}: priors need one column", path.display())));
            }
            Some(m.data().to_vec())
        }
        None => None,
    };
    let config = FitConfig {
        threshold_mode: args.threshold_mode,
        eta,
        fixed_lambda: args.lambda,
        lambda_grid: default_lambda_grid(),
        folds: args.folds,
        max_iterations: args.max_iterations,
        refinement: args.refine,
        seed: args.seed,
    };
    let start = Instant::now();
    let report = fit(&x, &y, &partition, &config)?;
    let runtime = start.elapsed().as_secs_f64();
    ensure_dir(&args.out)?;
    save_matrix(&args.out.join("w1.tsv"), report.w1.as_matrix())?;
    save_matrix(&args.out.join("w2.tsv"), report.w2.as_matrix())?;
    save_mapping(&args.out.join("pi_hat.tsv"), &report.pi_hat)?;
    save_groups(&args.out.join("groups.tsv"), &partition)?;
    write_json(
        &args.out.join("report.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "command": "fit",
            "config": config,
            "lambda": report.lambda_selected,
            "counts": report.counts,
            "losses": report.losses,
            "sigma_p_x": report.sigma_p_x,
            "gamma_hat": report.gamma_hat,
            "converged": report.converged,
            "iterations": report.iterations,
            "cv_table": report.cv_table,
            "runtime_seconds": runtime,
        }),
    )?;
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> CliResult<()> {
    let vocab: Option<Vec<String>> = match &args.vocab {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        }
        None => None,
    };
    let file = fs::File::open(&args.input).map_err(|e| CliError::Input(format!("{}: {e}", args.input.display())))?;
    let table = CooccurrenceTable::from_tsv(BufReader::new(file), vocab.as_deref())?;
    let sppmi = build_sppmi(&table, args.k, args.alpha)?;
    let embedding = embed(&sppmi, args.dim)?;
    ensure_dir(&args.out)?;
    save_matrix(&args.out.join("embedding.tsv"), embedding.vectors.as_matrix())?;
    write_text(&args.out.join("items.txt"), &(embedding.items.join("\n") + "\n"))?;
    write_json(
        &args.out.join("manifest.json"),
        &json!({
            "format_version": FORMAT_VERSION,
            "command": "embed",
            "k": args.k,
            "alpha": args.alpha,
            "dim": args.dim,
            "vocabulary_size": table.vocab().len(),
            "symmetric": embedding.symmetric,
            "singular_values": embedding.singular_values,
            "excluded": embedding.excluded,
            "files": ["embedding.tsv", "items.txt"],
        }),
    )?;
    Ok(())
}

const METRIC_TSV_HEADER: &str =
    "w1_mse\tw1_mse_per_p\tw2_mse\tw2_mse_per_p\tmatch_rate\tweight_mse\tdetection_rate\ttrue_one_to_one\ttrue_one_to_many";

fn metrics_tsv(m: &MetricSet) -> String {
    format!(
        "{METRIC_TSV_HEADER}\n{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{}\t{}\n",
        m.w1_mse,
        m.w1_mse_per_p,
        m.w2_mse,
        m.w2_mse_per_p,
        m.match_rate,
        m.weight_mse,
        m.detection_rate,
        m.true_one_to_one,
        m.true_one_to_many
    )
}

fn score(fit_dir: &Path, truth_dir: &Path) -> CliResult<MetricSet> {
    let true_w: DenseMatrix = load_matrix(&truth_dir.join("w_true.tsv"))?;
    let true_pi = load_mapping(&truth_dir.join("pi_true.tsv"), &load_groups(&truth_dir.join("groups.tsv"))?)?;
    let w1 = load_matrix(&fit_dir.join("w1.tsv"))?;
    let w2 = load_matrix(&fit_dir.join("w2.tsv"))?;
    let pi_hat = load_mapping(&fit_dir.join("pi_hat.tsv"), &load_groups(&fit_dir.join("groups.tsv"))?)?;
    Ok(evaluate_estimates(&w1, &w2, &pi_hat, &true_w, &true_pi)?)
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    if let Some(path) = &args.sweep {
        let sweep: SweepConfig = read_json(path)?;
        let table: SweepTable = run_sweep_with(&sweep.base, &sweep.axis, sweep.replicates, &sweep.fit)?;
        ensure_dir(&args.out)?;
        write_text(&args.out.join("sweep.tsv"), &table.to_tsv())?;
        write_json(
            &args.out.join("sweep.json"),
            &json!({ "format_version": FORMAT_VERSION, "command": "eval", "config": sweep, "table": table }),
        )?;
        return Ok(());
    }
    let (Some(fit_dir), Some(truth_dir)) = (&args.fit, &args.truth) else {
        return Err(CliError::Input("eval needs --fit and --truth, or --sweep".into()));
    };
    let metrics = score(fit_dir, truth_dir)?;
    ensure_dir(&args.out)?;
    write_json(
        &args.out.join("metrics.json"),
        &json!({ "format_version": FORMAT_VERSION, "command": "eval", "metrics": metrics }),
    )?;
    write_text(&args.out.join("metrics.tsv"), &metrics_tsv(&metrics))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(format!("cannot start thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
