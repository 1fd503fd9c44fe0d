//! The `accel-eval` command-line front end.
//!
//! Every command writes a `RunManifest` next to its outputs; `replay` re-runs
//! a manifest and reproduces the outputs byte for byte (same build).

use crate::accel::{
    bound_probabilities, crude_mc, DEFAULT_DEFENSIVE, estimate, run_procedure, Estimate, EstimateReport,
    ProcedureOptions, ProcedureState, RhoPolicy,
};
use crate::dompoints::{DEFAULT_DOMINATING_CAP, DominatingSets};
use crate::error::Error;
use crate::gaussmath::Rect;
use crate::monoset::{DirectionMask, DEFAULT_PIECE_CAP};
use crate::rng::SeedStream;
use crate::scenario::{synthetic_lane_change_data, ScenarioSpec, Standardized};
use crate::serde_ext::write_atomic;
use crate::tgmm::{
    fit, gmm_sample, standardize, AffineStandardizer, FitOptions, ModelDocument, TruncatedGmm,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_FIT: i32 = 3;
pub const EXIT_MONOTONE: i32 = 4;
pub const EXIT_SOLVER: i32 = 5;

/// Stream tags for the final estimate and the bound estimates; the
/// procedure itself uses tags 1, 2, … (one per iteration).
const ESTIMATE_TAG: u64 = 0xE571_4A7E;
const BOUNDS_TAG: u64 = 0xB0_04D5;
const CRUDE_TAG: u64 = 0xC0DE;

pub const BENCH_HEADER: &str = "estimator,p_hat,stderr,crude_equiv_n,efficiency_ratio";

#[derive(Debug, Parser)]
#[command(name = "accel-eval", version, about = "Accelerated rare-event evaluation with mixture importance sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit truncated Gaussian mixtures for several K and keep the best BIC.
    Fit(FitArgs),
    /// Run the iterative procedure, then the final importance-sampling estimate.
    Run(RunArgs),
    /// Crude Monte Carlo under the model.
    Crude(CrudeArgs),
    /// Importance sampling and crude Monte Carlo at equal sample size.
    Bench(BenchArgs),
    /// Write synthetic data (lane-change events or draws from a model).
    Synth(SynthArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// CSV with a header row and one numeric column per dimension.
    #[arg(long)]
    pub data: PathBuf,
    /// Component counts: "1,2,3" or "1..4".
    #[arg(long, default_value = "1..4")]
    pub k: String,
    /// Per-dimension "lo:hi" in data coordinates, comma separated; "inf" and
    /// "-inf" allowed. Unbounded by default.
    #[arg(long, allow_hyphen_values = true)]
    pub support: Option<String>,
    /// Input columns are v,ttc,range; fit in (v, 1/ttc, 1/range).
    #[arg(long)]
    pub lane_change: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub em_max_iter: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    /// Model JSON; the BIC table goes to `<stem>.bic.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProcedureArgs {
    #[arg(long, default_value_t = 1000)]
    pub n_per_iter: usize,
    #[arg(long, default_value_t = 5)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 400)]
    pub max_frontier: usize,
    /// Inner/outer blend during the iterations: "auto" or a number in [0, 1].
    #[arg(long, default_value = "auto")]
    pub rho: String,
    /// Inner/outer blend of the final distribution.
    #[arg(long, default_value_t = 0.0)]
    pub final_rho: f64,
    /// Share of the base model mixed into the final distribution.
    #[arg(long, default_value_t = DEFAULT_DEFENSIVE)]
    pub defensive: f64,
    /// Direction mask such as "-1,1,-1"; defaults to the scenario's mask.
    #[arg(long, allow_hyphen_values = true)]
    pub mask: Option<String>,
    #[arg(long, default_value_t = DEFAULT_PIECE_CAP)]
    pub piece_cap: usize,
    #[arg(long, default_value_t = DEFAULT_DOMINATING_CAP)]
    pub dominating_cap: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Analytic scenario (`{"kind": ...}`) or AV configuration JSON.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Samples for the final estimate (and for the bounds).
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[command(flatten)]
    pub procedure: ProcedureArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CrudeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub type BenchArgs = RunArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Lane-change events with columns v,ttc,range.
    LaneChange,
    /// Draws from `--model`, in data coordinates.
    Model,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::LaneChange)]
    pub kind: SynthKind,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub options: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        CliError {
            code: exit_code(&error),
            error,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn input_error(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_INPUT,
        error: Error::InvalidArgument(msg.into()),
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::NonMonotone { .. } => EXIT_MONOTONE,
        Error::DyingComponent { .. }
        | Error::NonFiniteLoglik { .. }
        | Error::ResponsibilityUnderflow { .. } => EXIT_FIT,
        Error::NotPositiveDefinite
        | Error::ZeroRegion { .. }
        | Error::VanishingMass { .. }
        | Error::DegenerateTruncation { .. }
        | Error::PieceExplosion { .. }
        | Error::InfeasiblePiece { .. }
        | Error::SolverNonConvergence { .. }
        | Error::NonFiniteRatio { .. } => EXIT_SOLVER,
        _ => EXIT_INPUT,
    }
}

/// Parses arguments, runs the command, prints errors; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Crude(a) => cmd_crude(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Replay(a) => cmd_replay(&a),
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    if workers == 0 {
        return Err(input_error("--workers must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| input_error(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    write_atomic(path, s.as_bytes()).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes()).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::from(e).context(format!("reading {what} {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError {
            code: EXIT_INPUT,
            error: Error::from(e).context(format!("parsing {what} {}", path.display())),
        }
    })
}

fn write_manifest<A: Serialize>(
    path: &Path,
    command: &str,
    args: &A,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
) -> CliResult<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        options: serde_json::to_value(args).map_err(Error::from)?,
        seed,
        inputs,
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(path, &manifest)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))?;
    Ok(())
}

/// Parses "1,2,3" or "1..4" (inclusive).
pub fn parse_k_list(s: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("invalid component list {s:?}");
    let ks: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad());
    }
    Ok(ks)
}

fn parse_bound(t: &str) -> Result<f64, String> {
    match t.trim() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        v => v.parse().map_err(|_| format!("invalid bound {v:?}")),
    }
}

/// Parses "lo:hi,lo:hi,…" into a rectangle of dimension `d`.
pub fn parse_support(s: &str, d: usize) -> Result<Rect, String> {
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for part in s.split(',') {
        let (a, b) = part
            .split_once(':')
            .ok_or_else(|| format!("support entry {part:?} is not lo:hi"))?;
        lower.push(parse_bound(a)?);
        upper.push(parse_bound(b)?);
    }
    if lower.len() != d {
        return Err(format!("support has {} entries, data has {d} columns", lower.len()));
    }
    Rect::new(lower, upper).map_err(|e| e.to_string())
}

pub fn parse_mask(s: &str) -> Result<DirectionMask, String> {
    let signs: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("invalid mask entry {t:?}")))
        .collect::<Result<_, _>>()?;
    DirectionMask::new(signs).map_err(|e| e.to_string())
}

pub fn parse_rho(s: &str) -> Result<RhoPolicy, String> {
    if s == "auto" {
        return Ok(RhoPolicy::Auto);
    }
    match s.parse::<f64>() {
        Ok(r) if (0.0..=1.0).contains(&r) => Ok(RhoPolicy::Fixed(r)),
        _ => Err(format!("--rho must be \"auto\" or a number in [0, 1], got {s:?}")),
    }
}

/// Reads a numeric CSV with a header row. Returns the header and the rows.
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| input_error(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(input_error(format!("{}: missing header row", path.display())));
    }
    let d = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| input_error(format!("{} line {line}: {e}", path.display())))?;
        if rec.len() != d {
            return Err(input_error(format!(
                "{} line {line}: expected {d} fields, found {}",
                path.display(),
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                input_error(format!("{} line {line}, column {}: not a number: {field:?}", path.display(), header[j]))
            })?;
            if !v.is_finite() {
                return Err(input_error(format!("{} line {line}, column {}: non-finite value", path.display(), header[j])));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(input_error(format!("{}: no data rows", path.display())));
    }
    Ok((header, DMatrix::from_row_slice(rows, d, &values)))
}

/// Maps (v, ttc, range) rows to (v, 1/ttc, 1/range).
fn lane_change_coordinates(header: &[String], y: &DMatrix<f64>) -> CliResult<DMatrix<f64>> {
    if header != ["v", "ttc", "range"] {
        return Err(input_error(format!("lane-change data needs columns v,ttc,range, found {}", header.join(","))));
    }
    let mut out = y.clone();
    for i in 0..y.nrows() {
        for (j, name) in [(1, "ttc"), (2, "range")] {
            if !(y[(i, j)] > 0.0) {
                return Err(input_error(format!("line {}: {name} must be positive", i + 2)));
            }
            out[(i, j)] = 1.0 / y[(i, j)];
        }
    }
    Ok(out)
}

fn bic_table(rows: &[(usize, f64, f64, usize)]) -> String {
    let mut s = String::from("K,bic,loglik,iterations\n");
    for (k, bic, ll, it) in rows {
        let _ = writeln!(s, "{k},{bic},{ll},{it}");
    }
    s
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = stem.strip_suffix(".model").unwrap_or(&stem).to_string();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// `<file name>.manifest.json` next to a file output.
pub fn manifest_beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let started = Instant::now();
    let ks = parse_k_list(&a.k).map_err(input_error)?;
    let (header, raw) = read_csv(&a.data)?;
    let y = if a.lane_change {
        lane_change_coordinates(&header, &raw)?
    } else {
        raw
    };
    let d = y.ncols();
    let support = match &a.support {
        Some(s) => parse_support(s, d).map_err(input_error)?,
        None => Rect::unbounded(d),
    };
    for i in 0..y.nrows() {
        let row: Vec<f64> = y.row(i).iter().copied().collect();
        if !support.contains(&row) {
            return Err(input_error(format!("line {}: row lies outside the support", i + 2)));
        }
    }
    let (z, standardizer) = standardize(&y).map_err(|e| CliError::from(e.context(format!("{}", a.data.display()))))?;
    let zsupport = standardizer.apply_rect(&support);
    let opts = FitOptions {
        max_iter: a.em_max_iter,
        tol: a.tol,
        restarts: a.restarts,
    };
    let mut rows = Vec::new();
    let mut best: Option<(f64, TruncatedGmm)> = None;
    for &k in &ks {
        let (m, report) = fit(&z, k, &zsupport, a.seed, &opts).map_err(|e| {
            let code = if matches!(e.root(), Error::InvalidArgument(_) | Error::DimensionMismatch { .. }) {
                EXIT_INPUT
            } else {
                EXIT_FIT
            };
            CliError {
                code,
                error: e.context(format!("fit failed for K = {k}")),
            }
        })?;
        rows.push((k, report.bic, report.final_loglik(), report.iterations));
        if best.as_ref().is_none_or(|(b, _)| report.bic < *b) {
            best = Some((report.bic, m));
        }
    }
    let (_, model) = best.expect("nonempty K list");
    let bic_path = sibling(&a.out, ".bic.csv");
    let manifest_path = manifest_beside(&a.out);
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_text(&bic_path, &bic_table(&rows))?;
    write_json(&a.out, &ModelDocument::from_model(&model, &standardizer))?;
    print!("{}", bic_table(&rows));
    println!("selected K = {}", model.n_components());
    write_manifest(
        &manifest_path,
        "fit",
        a,
        a.seed,
        vec![a.data.clone()],
        vec![a.out.clone(), bic_path],
        started,
    )
}

struct Loaded {
    gmm: TruncatedGmm,
    standardizer: AffineStandardizer,
    scenario: ScenarioSpec,
}

fn load(model: &Path, scenario: &Path) -> CliResult<Loaded> {
    let doc: ModelDocument = read_json(model, "model")?;
    let (gmm, standardizer) = doc
        .to_model()
        .map_err(|e| CliError { code: EXIT_INPUT, error: e.context(format!("model {}", model.display())) })?;
    let spec: ScenarioSpec = read_json(scenario, "scenario")?;
    let d = gmm.dim();
    let check = match &spec {
        ScenarioSpec::Analytic(s) => s.validate(d),
        ScenarioSpec::Simulator(cfg) => cfg.validate().and(if d == 3 {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected: 3, got: d })
        }),
    };
    check.map_err(|e| CliError { code: EXIT_INPUT, error: e.context(format!("scenario {}", scenario.display())) })?;
    Ok(Loaded {
        gmm,
        standardizer,
        scenario: spec,
    })
}

impl Loaded {
    fn indicator(&self) -> Standardized<'_, ScenarioSpec> {
        Standardized {
            inner: &self.scenario,
            standardizer: &self.standardizer,
        }
    }

    /// Exact probability for analytic scenarios.
    fn truth(&self) -> Option<f64> {
        match &self.scenario {
            ScenarioSpec::Analytic(s) => {
                let g = self.gmm.destandardize(&self.standardizer).ok()?;
                s.truth(&g).ok()
            }
            ScenarioSpec::Simulator(_) => None,
        }
    }
}

fn procedure_options(p: &ProcedureArgs, d: usize, default_mask: DirectionMask, seed: u64, workers: usize) -> CliResult<(ProcedureOptions, DirectionMask)> {
    let mask = match &p.mask {
        Some(s) => parse_mask(s).map_err(input_error)?,
        None => default_mask,
    };
    if mask.dim() != d {
        return Err(input_error(format!("mask has {} entries, model has dimension {d}", mask.dim())));
    }
    if p.n_per_iter == 0 {
        return Err(input_error("--n-per-iter must be at least 1"));
    }
    if !(0.0..1.0).contains(&p.defensive) {
        return Err(input_error("--defensive must lie in [0, 1)"));
    }
    if !(0.0..=1.0).contains(&p.final_rho) {
        return Err(input_error("--final-rho must lie in [0, 1]"));
    }
    let opts = ProcedureOptions {
        n_per_iter: p.n_per_iter,
        max_iter: p.max_iter,
        max_frontier: p.max_frontier,
        rho_policy: parse_rho(&p.rho).map_err(input_error)?,
        final_rho: p.final_rho,
        defensive: p.defensive,
        piece_cap: p.piece_cap,
        dominating_cap: p.dominating_cap,
        seed,
        workers,
    };
    Ok((opts, mask))
}

fn trace_csv(e: &Estimate) -> String {
    let mut s = String::from("index,p_hat,ci_half_width\n");
    for r in &e.trace {
        let _ = writeln!(s, "{},{},{}", r.index, r.p_hat, r.ci_half_width);
    }
    s
}

fn dominating_csv(state: &ProcedureState, d: usize) -> String {
    let mut s = String::from("set,component");
    for j in 0..d {
        let _ = write!(s, ",x{}", j + 1);
    }
    s.push_str(",kkt_residual\n");
    let mask = state.frontier.mask();
    let mut emit = |name: &str, sets: &DominatingSets| {
        for set in &sets.sets {
            for p in set {
                let _ = write!(s, "{name},{}", p.component_index);
                for v in mask.canonicalize(&p.point) {
                    let _ = write!(s, ",{v}");
                }
                let _ = writeln!(s, ",{}", p.kkt_residual);
            }
        }
    };
    emit("inner", &state.a_inner);
    emit("outer", &state.a_outer);
    s
}

struct RunOutcome {
    report: EstimateReport,
    state: ProcedureState,
    estimate: Estimate,
}

fn execute_run(a: &RunArgs, l: &Loaded) -> CliResult<RunOutcome> {
    if a.n < 100 {
        return Err(input_error(format!("--n must be at least 100, got {}", a.n)));
    }
    let d = l.gmm.dim();
    let (opts, mask) = procedure_options(&a.procedure, d, l.scenario.default_mask(d), a.seed, a.workers)?;
    let ind = l.indicator();
    let root = SeedStream::new(a.seed);
    with_pool(a.workers, || -> CliResult<RunOutcome> {
        let (state, q) = run_procedure(&ind, &l.gmm, &mask, &opts)?;
        let est = estimate(&ind, &l.gmm, &q, a.n, root.child(ESTIMATE_TAG), a.workers)?;
        let b = bound_probabilities(&l.gmm, &state, a.n, root.child(BOUNDS_TAG), a.workers)?;
        let report = est.report.clone().with_bounds(b.p_lower, b.p_upper);
        Ok(RunOutcome {
            report,
            state,
            estimate: est,
        })
    })?
}

fn summary_line(r: &EstimateReport, truth: Option<f64>) -> String {
    let mut s = format!(
        "{}: p_hat={:.6e} stderr={:.3e} ci95=[{:.6e}, {:.6e}] n={} hits={} efficiency_ratio={:.3}",
        r.estimator, r.p_hat, r.stderr, r.ci95[0], r.ci95[1], r.n_samples, r.hits, r.efficiency_ratio
    );
    if let Some(t) = truth {
        let _ = write!(s, " truth={t:.6e}");
    }
    s
}

pub fn cmd_run(a: &RunArgs) -> CliResult<()> {
    let started = Instant::now();
    let l = load(&a.model, &a.scenario)?;
    let out = execute_run(a, &l)?;
    ensure_dir(&a.out)?;
    let files = [
        ("report.json", serde_json::to_string_pretty(&out.report).map_err(Error::from)? + "\n"),
        ("state.json", serde_json::to_string_pretty(&out.state).map_err(Error::from)? + "\n"),
        ("frontier.json", serde_json::to_string_pretty(&out.state.frontier.snapshot()).map_err(Error::from)? + "\n"),
        ("dominating_points.csv", dominating_csv(&out.state, l.gmm.dim())),
        ("trace.csv", trace_csv(&out.estimate)),
    ];
    let mut outputs = Vec::new();
    for (name, text) in &files {
        let p = a.out.join(name);
        write_text(&p, text)?;
        outputs.push(p);
    }
    println!("{}", summary_line(&out.report, l.truth()));
    if out.report.flags.low_efficiency {
        eprintln!("warning: efficiency ratio below 2");
    }
    if out.report.flags.outside_bounds {
        eprintln!(
            "warning: p_hat lies outside the estimated bounds [{:.3e}, {:.3e}]",
            out.report.bounds[0], out.report.bounds[1]
        );
    }
    write_manifest(
        &a.out.join("manifest.json"),
        "run",
        a,
        a.seed,
        vec![a.model.clone(), a.scenario.clone()],
        outputs,
        started,
    )
}

fn execute_crude(l: &Loaded, n: usize, seed: u64, workers: usize) -> CliResult<Estimate> {
    if n == 0 {
        return Err(input_error("--n must be at least 1"));
    }
    let ind = l.indicator();
    with_pool(workers, || crude_mc(&ind, &l.gmm, n, SeedStream::new(seed).child(CRUDE_TAG), workers))?
        .map_err(CliError::from)
}

pub fn cmd_crude(a: &CrudeArgs) -> CliResult<()> {
    let started = Instant::now();
    let l = load(&a.model, &a.scenario)?;
    let est = execute_crude(&l, a.n, a.seed, a.workers)?;
    ensure_dir(&a.out)?;
    let report_path = a.out.join("report.json");
    let trace_path = a.out.join("trace.csv");
    write_json(&report_path, &est.report)?;
    write_text(&trace_path, &trace_csv(&est))?;
    println!("{}", summary_line(&est.report, l.truth()));
    write_manifest(
        &a.out.join("manifest.json"),
        "crude",
        a,
        a.seed,
        vec![a.model.clone(), a.scenario.clone()],
        vec![report_path, trace_path],
        started,
    )
}

/// The bench table: one row per estimator.
pub fn bench_table(is: &EstimateReport, crude: &EstimateReport) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in [is, crude] {
        let _ = writeln!(s, "{},{},{},{},{}", r.estimator, r.p_hat, r.stderr, r.crude_equiv_n, r.efficiency_ratio);
    }
    s
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let started = Instant::now();
    let l = load(&a.model, &a.scenario)?;
    let run = execute_run(a, &l)?;
    let crude = execute_crude(&l, a.n, a.seed, a.workers)?;
    let table = bench_table(&run.report, &crude.report);
    ensure_dir(&a.out)?;
    let path = a.out.join("bench.csv");
    write_text(&path, &table)?;
    print!("{table}");
    if let Some(t) = l.truth() {
        eprintln!("truth={t:.6e}");
    }
    write_manifest(
        &a.out.join("manifest.json"),
        "bench",
        a,
        a.seed,
        vec![a.model.clone(), a.scenario.clone()],
        vec![path],
        started,
    )
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let started = Instant::now();
    if a.n == 0 {
        return Err(input_error("--n must be at least 1"));
    }
    let mut rng = SeedStream::new(a.seed).rng();
    let mut inputs = Vec::new();
    let (header, rows): (Vec<String>, DMatrix<f64>) = match a.kind {
        SynthKind::LaneChange => {
            if a.model.is_some() {
                return Err(input_error("--model is only used with --kind model"));
            }
            let x = synthetic_lane_change_data(a.n, &mut rng);
            let mut y = x.clone();
            for i in 0..y.nrows() {
                y[(i, 1)] = 1.0 / x[(i, 1)];
                y[(i, 2)] = 1.0 / x[(i, 2)];
            }
            (vec!["v".into(), "ttc".into(), "range".into()], y)
        }
        SynthKind::Model => {
            let path = a.model.as_ref().ok_or_else(|| input_error("--kind model needs --model"))?;
            let doc: ModelDocument = read_json(path, "model")?;
            let (gmm, standardizer) = doc.to_model().map_err(|e| CliError { code: EXIT_INPUT, error: e })?;
            inputs.push(path.clone());
            let z = gmm_sample(a.n, &gmm, &mut rng)?;
            ((1..=gmm.dim()).map(|j| format!("x{j}")).collect(), standardizer.invert(&z))
        }
    };
    let mut s = header.join(",");
    s.push('\n');
    for i in 0..rows.nrows() {
        let line: Vec<String> = rows.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_text(&a.out, &s)?;
    write_manifest(&manifest_beside(&a.out), "synth", a, a.seed, inputs, vec![a.out.clone()], started)
}

fn from_options<T: serde::de::DeserializeOwned>(m: &RunManifest) -> CliResult<T> {
    serde_json::from_value(m.options.clone())
        .map_err(|e| CliError { code: EXIT_INPUT, error: Error::from(e).context(format!("options of {} manifest", m.command)) })
}

fn with_out<T>(mut args: T, out: Option<PathBuf>, field: impl FnOnce(&mut T) -> &mut PathBuf) -> T {
    if let Some(o) = out {
        *field(&mut args) = o;
    }
    args
}

pub fn cmd_replay(a: &ReplayArgs) -> CliResult<()> {
    let m: RunManifest = read_json(&a.manifest, "manifest")?;
    if m.tool_version != env!("CARGO_PKG_VERSION") {
        eprintln!(
            "warning: manifest written by version {}, replaying with {}",
            m.tool_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    let out = a.out.clone();
    let command = match m.command.as_str() {
        "fit" => Command::Fit(with_out(from_options(&m)?, out, |x: &mut FitArgs| &mut x.out)),
        "run" => Command::Run(with_out(from_options(&m)?, out, |x: &mut RunArgs| &mut x.out)),
        "bench" => Command::Bench(with_out(from_options(&m)?, out, |x: &mut RunArgs| &mut x.out)),
        "crude" => Command::Crude(with_out(from_options(&m)?, out, |x: &mut CrudeArgs| &mut x.out)),
        "synth" => Command::Synth(with_out(from_options(&m)?, out, |x: &mut SynthArgs| &mut x.out)),
        other => return Err(input_error(format!("unknown command {other:?} in manifest"))),
    };
    dispatch(command)
}
