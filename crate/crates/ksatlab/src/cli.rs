//! The `ksatlab` experiment runner.
//!
//! Every subcommand prints one JSON record (or a CSV table) to stdout or to
//! `--out`. Records carry the parameters and seed needed to re-run them and,
//! unless `--timing` is given, nothing else that varies between runs, so the
//! same seed and flags give the same bytes for any `--threads`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::bp::{bethe_free_energy, bp_marginals, pseudo_message_gap, run_bp_with, BpOptions};
use crate::density::{self, tail_report, FixedPointOptions, Population, SnapshotHeader};
use crate::error::{invalid, Error, Result};
use crate::exact::{self, exact_summary};
use crate::model::{self, Assignment, Beta, Formula, ModelParams};
use crate::rng::{self, from_seed};
use crate::rsb::{self, InterpolationOptions, PiSpec};
use crate::scalars;
use crate::tree::{self, LeafInit};

/// Schema tag of every JSON record.
pub const SCHEMA: &str = "ksatlab-record/1";

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "KSATLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ksatlab", version, about = "Finite-temperature random k-SAT laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Master seed for every random stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: $KSATLAB_THREADS, else all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Write the record here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Add wall time and thread count to the record.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args, Clone)]
pub struct Model {
    #[arg(long)]
    pub k: usize,
    /// Expected variable degree.
    #[arg(long, conflicts_with = "c")]
    pub d: Option<f64>,
    /// Density offset: d = k (2^k ln 2 - c).
    #[arg(long, allow_hyphen_values = true)]
    pub c: Option<f64>,
    /// Inverse temperature, or `inf`.
    #[arg(long, value_parser = parse_beta)]
    pub beta: Beta,
}

fn parse_beta(s: &str) -> std::result::Result<Beta, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Model {
    fn params(&self) -> Result<ModelParams> {
        let d = match (self.d, self.c) {
            (Some(d), _) => d,
            (None, Some(c)) => ModelParams::d_from_c(self.k, c),
            (None, None) => return invalid("one of --d or --c is required"),
        };
        ModelParams::new(self.k, d, self.beta)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random formula; DIMACS plus a JSON sidecar.
    Gen(GenArgs),
    /// Belief propagation on a generated or loaded formula.
    Bp(BpArgs),
    /// Brute-force partition function and marginals.
    Exact(ExactArgs),
    /// Root marginals of BP on Galton-Watson trees.
    Tree(TreeArgs),
    /// Population dynamics for the distributional recursion.
    Popdyn(PopdynArgs),
    /// Moment rates, overlap landscape and thresholds.
    Moments(MomentsArgs),
    /// Bethe functional, interpolation bound and scalar gap.
    Rsb(RsbArgs),
    /// Planted formula and its violation statistics.
    Planted(PlantedArgs),
    /// Diagnostics: pseudo-messages, stable sets, contraction, defect.
    Diag(DiagArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub model: Model,
    #[arg(long)]
    pub n: usize,
    /// DIMACS output path; `<path>.json` receives the sidecar.
    #[arg(long)]
    pub dimacs: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PlantedArgs {
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_parser = parse_beta)]
    pub beta: Beta,
    #[arg(long)]
    pub n: usize,
    /// Expected number of clauses (sets d = k m / n).
    #[arg(long, conflicts_with = "d")]
    pub m: Option<f64>,
    #[arg(long)]
    pub d: Option<f64>,
    #[arg(long)]
    pub dimacs: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct BpArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, conflicts_with = "c")]
    pub d: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub c: Option<f64>,
    #[arg(long, value_parser = parse_beta)]
    pub beta: Beta,
    /// Number of variables when generating.
    #[arg(long)]
    pub n: Option<usize>,
    /// DIMACS formula to run on instead of a generated one.
    #[arg(long)]
    pub clauses: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub t_max: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.0)]
    pub damping: f64,
    /// CSV trace of per-round changes and Bethe values.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ExactArgs {
    /// DIMACS formula.
    #[arg(long)]
    pub clauses: PathBuf,
    /// Variable count; may exceed the header to add free variables.
    #[arg(long)]
    pub n: Option<usize>,
    /// Clause length; required when the file has no clauses.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = parse_beta)]
    pub beta: Beta,
    /// Largest n enumerated.
    #[arg(long, default_value_t = exact::DEFAULT_CAP)]
    pub cap: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TreeArgs {
    #[command(flatten)]
    pub model: Model,
    #[arg(long)]
    pub depth: usize,
    /// BP rounds (default: depth).
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Constant leaf message.
    #[arg(long, default_value_t = 0.5)]
    pub leaf: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PopdynArgs {
    #[command(flatten)]
    pub model: Model,
    /// Population size N.
    #[arg(long)]
    pub pop: usize,
    #[arg(long, default_value_t = 60)]
    pub iters: usize,
    /// Stop when the W1 step falls below this (default 5/sqrt(N)).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Binary snapshot of the final population.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// CSV trace of W1 steps.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Table {
    /// f(α) with derivatives on α = i/grid, i = 1..=grid.
    F,
    /// Reference thresholds for k = 3..=grid.
    Thresholds,
    /// p and u for k = 3..=grid.
    P,
}

#[derive(Debug, Args)]
pub struct MomentsArgs {
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_parser = parse_beta)]
    pub beta: Beta,
    /// Expected degree (default: the d* reference value for k).
    #[arg(long, conflicts_with = "c")]
    pub d: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub c: Option<f64>,
    /// Emit a CSV table instead of the JSON summary.
    #[arg(long, value_enum)]
    pub table: Option<Table>,
    #[arg(long, default_value_t = 1000)]
    pub grid: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RsbMode {
    /// Bethe functional of a population.
    Bethe,
    /// Interpolation bound over a grid of y.
    Interpolation,
    /// Scalar gap function φ(y).
    Gap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LawSource {
    /// Point mass at 1/2.
    Half,
    /// (δ0 + δ1)/2.
    Atomic,
    /// Fixed point of population dynamics.
    Fixed,
}

#[derive(Debug, Args)]
pub struct RsbArgs {
    #[arg(long, value_enum)]
    pub mode: RsbMode,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, conflicts_with = "c")]
    pub d: Option<f64>,
    /// Density offset; also the gap parameter in `--mode gap`.
    #[arg(long, allow_hyphen_values = true)]
    pub c: Option<f64>,
    #[arg(long, value_parser = parse_beta)]
    pub beta: Option<Beta>,
    #[arg(long, value_enum, default_value_t = LawSource::Half)]
    pub law: LawSource,
    /// Load the law from a population snapshot.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    /// Population size for `--law fixed`.
    #[arg(long, default_value_t = 20_000)]
    pub pop: usize,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Rao-Blackwellized Bethe estimator.
    #[arg(long)]
    pub rb: bool,
    /// Comma-separated y grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 1.0])]
    pub ys: Vec<f64>,
    /// Grid size for `--mode gap`.
    #[arg(long, default_value_t = 100)]
    pub grid: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiagKind {
    /// BP messages against exact pseudo-messages.
    Pseudo,
    /// Stable set and polarization on a planted instance.
    Stable,
    /// W_r contraction of the recursion on slim pairs.
    Contraction,
    /// Replica-symmetry defect averaged over random instances.
    Defect,
    /// Tail classes of a population snapshot.
    Tails,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    #[arg(long, value_enum)]
    pub what: DiagKind,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, conflicts_with = "c")]
    pub d: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub c: Option<f64>,
    #[arg(long, value_parser = parse_beta)]
    pub beta: Option<Beta>,
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    /// BP rounds for pseudo-messages.
    #[arg(long, default_value_t = 50)]
    pub rounds: usize,
    /// Instances (defect) or coupled pairs (contraction).
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Population size for contraction.
    #[arg(long, default_value_t = 10_000)]
    pub pop: usize,
    /// Wasserstein order for contraction.
    #[arg(long, default_value_t = 1.0)]
    pub r: f64,
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Serialize)]
struct Record {
    schema: &'static str,
    version: &'static str,
    command: &'static str,
    params: Value,
    seed: u64,
    results: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time: Option<f64>,
}

/// What a subcommand produced.
enum Output {
    Json { params: Value, results: Value },
    Text(String),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen(a) => &a.common,
            Command::Bp(a) => &a.common,
            Command::Exact(a) => &a.common,
            Command::Tree(a) => &a.common,
            Command::Popdyn(a) => &a.common,
            Command::Moments(a) => &a.common,
            Command::Rsb(a) => &a.common,
            Command::Planted(a) => &a.common,
            Command::Diag(a) => &a.common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Bp(_) => "bp",
            Command::Exact(_) => "exact",
            Command::Tree(_) => "tree",
            Command::Popdyn(_) => "popdyn",
            Command::Moments(_) => "moments",
            Command::Rsb(_) => "rsb",
            Command::Planted(_) => "planted",
            Command::Diag(_) => "diag",
        }
    }
}

/// Exit code for a library error: 2 for bad input, 3 for resource caps, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Parse(_) => 2,
        Error::ResourceLimit(_) => 3,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn thread_count(common: &Common) -> Result<Option<usize>> {
    if let Some(t) = common.threads {
        return Ok(Some(t));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidInput(format!("{THREADS_ENV}='{v}' is not a thread count"))),
        Err(_) => Ok(None),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let threads = thread_count(common)?;
    if threads == Some(0) {
        return invalid("--threads must be at least 1");
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::SolverFailure(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let output = pool.install(|| dispatch(&cli.command))?;
    let text = match output {
        Output::Text(t) => t,
        Output::Json { params, results } => {
            let rec = Record {
                schema: SCHEMA,
                version: env!("CARGO_PKG_VERSION"),
                command: cli.command.name(),
                params,
                seed: common.seed,
                results,
                threads: common.timing.then(|| pool.current_num_threads()),
                wall_time: common.timing.then(|| start.elapsed().as_secs_f64()),
            };
            let mut s = serde_json::to_string_pretty(&rec).map_err(|e| Error::SolverFailure(e.to_string()))?;
            s.push('\n');
            s
        }
    };
    match &common.out {
        Some(path) => fs::write(path, text)?,
        None => {
            use std::io::Write;
            match std::io::stdout().lock().write_all(text.as_bytes()) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                other => other?,
            }
        }
    }
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<Output> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Planted(a) => cmd_planted(a),
        Command::Bp(a) => cmd_bp(a),
        Command::Exact(a) => cmd_exact(a),
        Command::Tree(a) => cmd_tree(a),
        Command::Popdyn(a) => cmd_popdyn(a),
        Command::Moments(a) => cmd_moments(a),
        Command::Rsb(a) => cmd_rsb(a),
        Command::Diag(a) => cmd_diag(a),
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::SolverFailure(e.to_string()))
}

fn model_params(p: &ModelParams) -> Value {
    json!({ "k": p.k, "d": p.d, "c": p.c(), "beta": p.beta })
}

fn write_dimacs(path: &Path, f: &Formula, sidecar: Value) -> Result<()> {
    fs::write(path, f.to_dimacs())?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::SolverFailure(e.to_string()))?;
    fs::write(PathBuf::from(side), text + "\n")?;
    Ok(())
}

fn read_formula(path: &Path) -> Result<Formula> {
    Formula::from_dimacs(&fs::read_to_string(path)?)
}

fn cmd_gen(a: &GenArgs) -> Result<Output> {
    let p = a.model.params()?;
    let f = model::gen_random(&p, a.n, &mut from_seed(a.common.seed))?;
    let mut params = model_params(&p);
    params["n"] = json!(a.n);
    let mut results = json!({ "n": f.n(), "m": f.m() });
    match &a.dimacs {
        Some(path) => {
            write_dimacs(path, &f, json!({ "generator": "random", "params": params, "seed": a.common.seed, "m": f.m() }))?;
            results["dimacs"] = json!(path.display().to_string());
        }
        None => results["formula"] = json!(f.to_dimacs()),
    }
    Ok(Output::Json { params, results })
}

fn cmd_planted(a: &PlantedArgs) -> Result<Output> {
    let d = match (a.m, a.d) {
        (Some(m), _) => a.k as f64 * m / a.n.max(1) as f64,
        (None, Some(d)) => d,
        (None, None) => return invalid("one of --m or --d is required"),
    };
    let p = ModelParams::new(a.k, d, a.beta)?;
    let beta = p.beta.require_finite("planted generation")?;
    let (f, sigma) = model::gen_planted(&p, a.n, &mut from_seed(a.common.seed))?;
    let violated = model::hamiltonian(&f, &sigma)?;
    let m = f.m();
    let expected = model::planted_violation_probability(a.k, beta);
    let rate = if m > 0 { violated as f64 / m as f64 } else { f64::NAN };
    let sigma_rate = (expected * (1.0 - expected) / m.max(1) as f64).sqrt();
    let mut params = model_params(&p);
    params["n"] = json!(a.n);
    let mut results = json!({
        "n": f.n(),
        "m": m,
        "violated": violated,
        "violation_rate": rate,
        "expected_rate": expected,
        "z_score": (rate - expected) / sigma_rate,
    });
    if let Some(path) = &a.dimacs {
        write_dimacs(
            path,
            &f,
            json!({ "generator": "planted", "params": params, "seed": a.common.seed, "m": m, "planted": sigma.values() }),
        )?;
        results["dimacs"] = json!(path.display().to_string());
    }
    Ok(Output::Json { params, results })
}

fn loaded_or_generated(
    clauses: &Option<PathBuf>,
    k: Option<usize>,
    d: Option<f64>,
    c: Option<f64>,
    beta: Beta,
    n: Option<usize>,
    seed: u64,
) -> Result<(Formula, ModelParams)> {
    if let Some(path) = clauses {
        let f = read_formula(path)?;
        let d = if f.n() > 0 { f.num_edges() as f64 / f.n() as f64 } else { 0.0 };
        let k = k.unwrap_or(f.k().max(2));
        return Ok((f, ModelParams::new(k, d, beta)?));
    }
    let (Some(k), Some(n)) = (k, n) else {
        return invalid("either --clauses or both --k and --n are required");
    };
    let p = Model { k, d, c, beta }.params()?;
    let f = model::gen_random(&p, n, &mut from_seed(seed))?;
    Ok((f, p))
}

fn cmd_bp(a: &BpArgs) -> Result<Output> {
    let (f, p) = loaded_or_generated(&a.clauses, a.k, a.d, a.c, a.beta, a.n, a.common.seed)?;
    if a.t_max == 0 || !(a.tol > 0.0) || !(0.0..1.0).contains(&a.damping) {
        return invalid("need t_max >= 1, tol > 0 and damping in [0, 1)");
    }
    let opts = BpOptions { t_max: a.t_max, tol: a.tol, damping: a.damping, trace_bethe: a.trace.is_some() };
    let run = run_bp_with(&f, &p, &opts);
    let marg = bp_marginals(&f, &run.msgs);
    if let Some(path) = &a.trace {
        let mut csv = String::from("iteration,max_delta,bethe\n");
        for r in &run.trace {
            let _ = writeln!(csv, "{},{},{}", r.iteration, r.max_delta, r.bethe);
        }
        fs::write(path, csv)?;
    }
    let mut params = model_params(&p);
    params["n"] = json!(f.n());
    let mut results = json!({
        "n": f.n(),
        "m": f.m(),
        "iterations": run.iterations,
        "converged": run.converged,
        "bethe": bethe_free_energy(&f, &p, &run.msgs),
        "final_delta": run.trace.last().map(|r| r.max_delta),
        "marginal_summary": summary(&marg),
    });
    if f.n() <= 1000 {
        results["marginals"] = json!(marg);
    }
    if let Some(beta) = p.beta.finite() {
        if !marg.is_empty() {
            results["polarization"] = to_value(&rsb::polarization_check(&marg, p.k, beta)?)?;
        }
    }
    Ok(Output::Json { params, results })
}

fn cmd_exact(a: &ExactArgs) -> Result<Output> {
    let mut f = read_formula(&a.clauses)?;
    if let Some(n) = a.n {
        if n < f.n() {
            return invalid(format!("--n {n} is smaller than the formula's {} variables", f.n()));
        }
        let k = if f.m() == 0 { a.k.unwrap_or(f.k()) } else { f.k() };
        f = Formula::from_flat(n, k, f.vars().to_vec(), f.signs().to_vec())?;
    }
    if let Some(k) = a.k {
        if f.m() > 0 && k != f.k() {
            return invalid(format!("--k {k} does not match clause length {}", f.k()));
        }
    }
    let k = a.k.unwrap_or(f.k()).max(2);
    let d = if f.n() > 0 { f.num_edges() as f64 / f.n() as f64 } else { 0.0 };
    let p = ModelParams::new(k, d, a.beta)?;
    let s = exact_summary(&f, &p, a.cap)?;
    let params = json!({ "k": k, "n": f.n(), "m": f.m(), "beta": a.beta });
    let results = json!({
        "logZ": s.log_z,
        "marginals": s.marginals,
        "pair_defect": s.pair_defect,
        "mean_overlap": s.mean_overlap,
    });
    Ok(Output::Json { params, results })
}

fn cmd_tree(a: &TreeArgs) -> Result<Output> {
    let p = a.model.params()?;
    if !(0.0..=1.0).contains(&a.leaf) || a.count == 0 {
        return invalid("need --leaf in [0, 1] and --count >= 1");
    }
    let rounds = a.rounds.unwrap_or(a.depth).max(1);
    let roots = tree::root_marginals(&p, a.depth, rounds, LeafInit::Constant(a.leaf), a.count, a.common.seed)?;
    let (mean, stderr) = rng::mean_stderr(&roots);
    let mut params = model_params(&p);
    params["depth"] = json!(a.depth);
    params["rounds"] = json!(rounds);
    params["count"] = json!(a.count);
    params["leaf"] = json!(a.leaf);
    let results = json!({ "mean": mean, "stderr": stderr, "summary": summary(&roots) });
    Ok(Output::Json { params, results })
}

fn cmd_popdyn(a: &PopdynArgs) -> Result<Output> {
    let p = a.model.params()?;
    let mut opts = FixedPointOptions::for_size(a.pop);
    opts.max_iters = a.iters;
    if let Some(t) = a.tol {
        opts.tol = t;
    }
    let fp = density::fixed_point_with(&p, a.pop, &opts, &mut from_seed(a.common.seed))?;
    if let Some(path) = &a.trace {
        let mut csv = String::from("iteration,w1_step\n");
        for (i, s) in fp.trace.iter().enumerate() {
            let _ = writeln!(csv, "{},{}", i + 1, s);
        }
        fs::write(path, csv)?;
    }
    if let Some(path) = &a.snapshot {
        let header = SnapshotHeader { n: a.pop, k: p.k, d: p.d, beta: p.beta, seed: a.common.seed, iteration: fp.iterations };
        density::write_snapshot(path, &header, &fp.pop)?;
    }
    let (mean, stderr) = fp.pop.mean_stderr();
    let mut params = model_params(&p);
    params["pop"] = json!(a.pop);
    params["iters"] = json!(a.iters);
    params["tol"] = json!(opts.tol);
    params["sampling"] = to_value(&opts.sampling)?;
    let results = json!({
        "converged": fp.converged,
        "iterations": fp.iterations,
        "trace": fp.trace,
        "mean": mean,
        "stderr": stderr,
        "tails": to_value(&tail_report(&fp.pop, p.k))?,
        "summary": summary(fp.pop.samples()),
    });
    Ok(Output::Json { params, results })
}

fn cmd_moments(a: &MomentsArgs) -> Result<Output> {
    if let Some(Table::Thresholds) | Some(Table::P) = a.table {
        let mut csv = String::new();
        let hi = a.grid.clamp(3, crate::model::MAX_K);
        if a.table == Some(Table::Thresholds) {
            csv.push_str("k,d_sat_asym,d_star,rsb_low\n");
            for k in 3..=hi {
                let t = scalars::reference_thresholds(k);
                let _ = writeln!(csv, "{k},{},{},{}", t.d_sat_asym, t.d_star, t.rsb_low);
            }
        } else {
            csv.push_str("k,p,u,residual\n");
            for k in 3..=hi {
                let pk = scalars::solve_p(k, a.beta);
                let u = scalars::compute_u_or_limit(k, a.beta)?;
                let _ = writeln!(csv, "{k},{pk},{u},{}", scalars::p_residual(k, a.beta, pk));
            }
        }
        return Ok(Output::Text(csv));
    }
    let d = match (a.d, a.c) {
        (Some(d), _) => d,
        (None, Some(c)) => ModelParams::d_from_c(a.k, c),
        (None, None) => {
            if a.k < 3 {
                return invalid("the default degree needs k >= 3; pass --d");
            }
            scalars::reference_thresholds(a.k).d_star
        }
    };
    let p = ModelParams::new(a.k, d, a.beta)?;
    if a.table == Some(Table::F) {
        if a.grid == 0 {
            return invalid("--grid must be at least 1");
        }
        let two_rate = 2.0 * scalars::first_moment_rate(&p);
        let mut csv = String::from("alpha,f,d1,d2,two_first_moment_rate\n");
        for i in 1..=a.grid {
            let alpha = i as f64 / a.grid as f64;
            let v = scalars::f_alpha(alpha, &p);
            let _ = writeln!(csv, "{alpha},{},{},{},{two_rate}", v.value, v.d1, v.d2);
        }
        return Ok(Output::Text(csv));
    }
    let pk = scalars::solve_p(a.k, a.beta);
    let mut results = json!({
        "p": pk,
        "p_residual": scalars::p_residual(a.k, a.beta, pk),
        "u": scalars::compute_u_or_limit(a.k, a.beta)?,
        "first_moment_rate": scalars::first_moment_rate(&p),
        "balanced_lower_bound": scalars::balanced_lower_bound(&p),
        "f_half": scalars::f_alpha(0.5, &p).value,
        "thresholds": to_value(&scalars::reference_thresholds(a.k))?,
    });
    if p.beta.finite().is_some() {
        results["rate_params"] = to_value(&scalars::rate_params(&p)?)?;
        results["F_stationary"] = json!(scalars::f_stationary_closed_form(&p).ok());
        results["f_scan"] = to_value(&scalars::scan_f(&p, a.grid.max(10)))?;
    }
    Ok(Output::Json { params: model_params(&p), results })
}

fn law_population(args: &RsbArgs, p: &ModelParams, seed: u64) -> Result<Population> {
    if let Some(path) = &args.snapshot {
        return Ok(density::read_snapshot(path)?.1);
    }
    match args.law {
        LawSource::Half => Ok(Population::delta(0.5, args.pop.max(1))),
        LawSource::Atomic => {
            Population::new((0..args.pop.max(2)).map(|i| (i % 2) as f64).collect())
        }
        LawSource::Fixed => {
            let fp = density::fixed_point_with(p, args.pop, &FixedPointOptions::for_size(args.pop), &mut from_seed(seed))?;
            Ok(fp.pop)
        }
    }
}

fn cmd_rsb(a: &RsbArgs) -> Result<Output> {
    let seed = a.common.seed;
    if a.mode == RsbMode::Gap {
        let Some(c) = a.c else {
            return invalid("--mode gap needs --c");
        };
        if a.grid == 0 {
            return invalid("--grid must be at least 1");
        }
        let grid: Vec<f64> = (1..=a.grid).map(|i| i as f64 / a.grid as f64).collect();
        let g = rsb::rsb_scalar_gap(c, &grid)?;
        let results = json!({
            "argmin_y": g.argmin_y,
            "phi_min": g.phi_min,
            "phi_at_1": g.phi_at_1,
            "gap": g.phi_at_1 - g.phi_min,
            "dphi_at_1": rsb::phi_derivative(c, 1.0),
        });
        return Ok(Output::Json { params: json!({ "c": c, "grid": a.grid }), results });
    }
    // Parameters missing on the command line fall back to the snapshot header.
    let header = match &a.snapshot {
        Some(path) if a.k.is_none() || a.beta.is_none() || (a.d.is_none() && a.c.is_none()) => {
            Some(density::read_snapshot(path)?.0)
        }
        _ => None,
    };
    let k = a.k.or(header.as_ref().map(|h| h.k));
    let beta = a.beta.or(header.as_ref().map(|h| h.beta));
    let (Some(k), Some(beta)) = (k, beta) else {
        return invalid("--k and --beta are required without a snapshot");
    };
    let d = match (a.d, a.c, &header) {
        (None, None, Some(h)) => Some(h.d),
        _ => a.d,
    };
    let p = Model { k, d, c: a.c, beta }.params()?;
    let mut params = model_params(&p);
    params["law"] = json!(format!("{:?}", a.law).to_lowercase());
    params["samples"] = json!(a.samples);
    let scale = (k as f64).exp2();
    let rs_value = (p.c() - std::f64::consts::LN_2 / 2.0) / scale;
    match a.mode {
        RsbMode::Bethe => {
            let pop = law_population(a, &p, seed)?;
            let mut r = rng::stream(seed, 1);
            let est = if a.rb {
                rsb::bethe_functional_rb(&pop, &p, a.samples, &mut r)?
            } else {
                rsb::bethe_functional(&pop, &p, a.samples, &mut r)?
            };
            params["rb"] = json!(a.rb);
            let closed = if a.law == LawSource::Half && a.snapshot.is_none() {
                Some(rsb::delta_half_closed_form(&p)?)
            } else {
                None
            };
            let results = json!({
                "estimate": est.value,
                "stderr": est.stderr,
                "samples": est.samples,
                "closed_form": closed,
                "rs_reference": rs_value,
                "gap": est.value - rs_value,
            });
            Ok(Output::Json { params, results })
        }
        RsbMode::Interpolation => {
            let pop;
            let pi = if a.law == LawSource::Atomic && a.snapshot.is_none() {
                PiSpec::Atomic
            } else {
                pop = law_population(a, &p, seed)?;
                PiSpec::Population(&pop)
            };
            params["ys"] = json!(a.ys);
            let scan = rsb::interpolation_scan(pi, &a.ys, &p, InterpolationOptions::new(a.samples), &mut rng::stream(seed, 2))?;
            let best = scan.argmin;
            let results = json!({
                "scan": to_value(&scan)?,
                "argmin_y": scan.ys[best],
                "min_bound": scan.bounds[best],
                "gap_to_reference": scan.gaps[best],
                "rs_reference": rs_value,
            });
            Ok(Output::Json { params, results })
        }
        RsbMode::Gap => unreachable!("handled above"),
    }
}

fn diag_params(a: &DiagArgs) -> Result<ModelParams> {
    let (Some(k), Some(beta)) = (a.k, a.beta) else {
        return invalid("--k and --beta are required");
    };
    Model { k, d: a.d, c: a.c, beta }.params()
}

fn cmd_diag(a: &DiagArgs) -> Result<Output> {
    let seed = a.common.seed;
    match a.what {
        DiagKind::Tails => {
            let Some(path) = &a.snapshot else {
                return invalid("--what tails needs --snapshot");
            };
            let (h, pop) = density::read_snapshot(path)?;
            let results = json!({ "tails": to_value(&tail_report(&pop, h.k))?, "summary": summary(pop.samples()) });
            Ok(Output::Json { params: to_value(&h)?, results })
        }
        DiagKind::Pseudo => {
            let p = diag_params(a)?;
            let f = model::gen_random(&p, a.n, &mut from_seed(seed))?;
            let gap = pseudo_message_gap(&f, &p, a.rounds, exact::DEFAULT_CAP)?;
            let mut params = model_params(&p);
            params["n"] = json!(a.n);
            params["rounds"] = json!(a.rounds);
            Ok(Output::Json { params, results: json!({ "m": f.m(), "pseudo_message_gap": gap }) })
        }
        DiagKind::Stable => {
            let p = diag_params(a)?;
            let beta = p.beta.require_finite("planted generation")?;
            let (f, sigma) = model::gen_planted(&p, a.n, &mut from_seed(seed))?;
            let set = rsb::stable_set(&f, &sigma)?;
            let violations = rsb::stable_violations(&f, &sigma, &set.members)?;
            let mut results = json!({
                "m": f.m(),
                "stable_size": set.members.len(),
                "stable_fraction": set.members.len() as f64 / a.n.max(1) as f64,
                "certified": violations.is_empty(),
            });
            if a.n <= exact::DEFAULT_CAP {
                let marg = exact::exact_marginals(&f, &p)?;
                results["polarization"] = to_value(&rsb::polarization_check(&marg, p.k, beta)?)?;
            }
            let mut params = model_params(&p);
            params["n"] = json!(a.n);
            Ok(Output::Json { params, results })
        }
        DiagKind::Contraction => {
            let p = diag_params(a)?;
            let rep = density::contraction_probe(&p, a.pop, a.r, a.count, &mut from_seed(seed))?;
            let mut params = model_params(&p);
            params["pop"] = json!(a.pop);
            params["pairs"] = json!(a.count);
            Ok(Output::Json { params, results: to_value(&rep)? })
        }
        DiagKind::Defect => {
            let p = diag_params(a)?;
            let mut vals = Vec::with_capacity(a.count);
            for i in 0..a.count {
                let f = model::gen_random(&p, a.n, &mut rng::stream(seed, i as u64))?;
                vals.push(exact::rs_defect(&f, &p)?);
            }
            let (mean, stderr) = rng::mean_stderr(&vals);
            let mut params = model_params(&p);
            params["n"] = json!(a.n);
            params["instances"] = json!(a.count);
            Ok(Output::Json { params, results: json!({ "mean_defect": mean, "stderr": stderr }) })
        }
    }
}

/// Mean and a few quantiles.
fn summary(xs: &[f64]) -> Value {
    if xs.is_empty() {
        return Value::Null;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |t: f64| v[((v.len() - 1) as f64 * t).round() as usize];
    json!({
        "count": v.len(),
        "mean": v.iter().sum::<f64>() / v.len() as f64,
        "min": v[0],
        "q01": q(0.01),
        "median": q(0.5),
        "q99": q(0.99),
        "max": v[v.len() - 1],
    })
}

/// Planted assignment from a sidecar written by `planted --dimacs`.
pub fn read_planted_sidecar(path: &Path) -> Result<Assignment> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse(e.to_string()))?;
    let vals: Vec<i8> = serde_json::from_value(v["planted"].clone()).map_err(|e| Error::Parse(e.to_string()))?;
    Assignment::new(vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_with(["ksatlab", "nope"]), 2);
        assert_eq!(main_with(["ksatlab", "gen", "--k", "3"]), 2);
        assert_eq!(exit_code(&Error::ResourceLimit("x".into())), 3);
    }

    #[test]
    fn beta_parser_accepts_inf() {
        assert_eq!(parse_beta("inf").unwrap(), Beta::Inf);
        assert!(parse_beta("-1").is_err());
    }
}
