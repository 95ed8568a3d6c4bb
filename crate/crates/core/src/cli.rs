//! Command-line driver: argument parsing, spec loading, dispatch and JSON reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::costs::{CostKind, CostModel, NoiseModel};
use crate::deconvolution::{log_likelihood, mle, project_entropic, project_relaxed, MixtureClass};
use crate::entropic_ot::{sinkhorn, SolverConfig};
use crate::error::{Error, Result};
use crate::measures::{empirical_measure, DiscreteMeasure, Point, Sample};
use crate::relaxed_ot::relaxed_transport;
use crate::rng::CounterRng;
use crate::verification::{kmeans_consistency_exploration, run_claim, Claim};

pub const SCHEMA_VERSION: u32 = 1;

/// Y_i = X_i + Z_i with X_i ~ P* (inverse CDF on the weights) and Z_i from the noise sampler.
pub fn generate_sample(pstar: &DiscreteMeasure, noise: &NoiseModel, n: usize, seed: u64) -> Result<Sample> {
    if n == 0 {
        return Err(Error::EmptySample);
    }
    if pstar.dim() != noise.dim() {
        return Err(Error::DimensionMismatch { expected: noise.dim(), found: pstar.dim() });
    }
    let mut rng = CounterRng::new(seed);
    let cumulative: Vec<f64> = pstar
        .weights()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let last = pstar.weights().iter().rposition(|w| *w > 0.0).unwrap_or(0);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.next_f64();
        let i = cumulative.partition_point(|c| *c <= u).min(last);
        let z = noise.sample(&mut rng)?;
        points.push(pstar.atoms()[i].iter().zip(&z).map(|(x, e)| x + e).collect());
    }
    Sample::new(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectMode {
    Entropic,
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ClaimArg {
    Theorem1,
    Counterexample,
    GeneralNoise,
    Kmeans,
    Lemma1,
    All,
}

impl From<ClaimArg> for Claim {
    fn from(c: ClaimArg) -> Self {
        match c {
            ClaimArg::Theorem1 => Claim::Theorem1,
            ClaimArg::Counterexample => Claim::Counterexample,
            ClaimArg::GeneralNoise => Claim::GeneralNoise,
            ClaimArg::Kmeans => Claim::Kmeans,
            ClaimArg::Lemma1 => Claim::Lemma1,
            ClaimArg::All => Claim::All,
        }
    }
}

/// One subcommand with its inputs. Spec arguments hold inline JSON or a file path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Subcommand)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Balanced entropic transport between two measure files.
    Sinkhorn {
        #[arg(long)]
        mu: PathBuf,
        #[arg(long)]
        nu: PathBuf,
        #[arg(long)]
        cost: String,
        /// Defaults to the cost's own σ² (1 for non-gaussian costs).
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long)]
        epsilon_scaling: bool,
        /// Include the optimal coupling in the report.
        #[arg(long)]
        #[serde(default)]
        emit_coupling: bool,
    },
    /// Relaxed entropic transport (second marginal pinned).
    Relaxed {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        nu: PathBuf,
        #[arg(long)]
        cost: String,
        #[arg(long)]
        sigma2: Option<f64>,
    },
    /// Maximum-likelihood estimation over a class.
    Mle {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        noise: String,
    },
    /// Projection of the empirical measure onto a class.
    Project {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        cost: String,
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long, value_enum, default_value = "entropic")]
        mode: ProjectMode,
    },
    /// Run certificates; exit code 0 iff all pass.
    Certify {
        #[arg(long, value_enum, default_value = "all")]
        claim: ClaimArg,
        /// JSON array of seeds (or {"seeds": [...]}) replacing each claim's defaults.
        #[arg(long)]
        seeds: Option<PathBuf>,
        /// Also print hard-clustering consistency runs (no pass/fail) to stderr.
        #[arg(long)]
        exploratory: bool,
    },
    /// Draw a sample Y = X + Z and write it as CSV.
    Generate {
        #[arg(long)]
        pstar: PathBuf,
        #[arg(long)]
        noise: String,
        #[arg(long)]
        n: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Args)]
pub struct GlobalArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(name = "entropic-deconv", version, about = "Entropic transport and mixture deconvolution")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub threads: usize,
    pub out: Option<PathBuf>,
    pub solver: SolverConfig,
}

impl From<Cli> for RunConfig {
    fn from(cli: Cli) -> Self {
        let mut solver = SolverConfig::default();
        if let Some(t) = cli.global.tol {
            solver.tolerance = t;
        }
        if let Some(m) = cli.global.max_iter {
            solver.max_iterations = m;
        }
        if let Command::Sinkhorn { epsilon_scaling: true, .. } = cli.command {
            solver.epsilon_scaling = true;
        }
        Self {
            command: cli.command,
            seed: cli.global.seed,
            threads: cli.global.threads.max(1),
            out: cli.global.out,
            solver,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub wall_time_ms: u64,
    pub payload: Value,
}

/// Result of a run: the rendered output and whether it counts as success.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rendered: String,
    pub success: bool,
}

/// Canonical JSON text: keys sorted, shortest round-trip floats, trailing newline.
pub fn render_json<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("report serializes");
    let mut s = serde_json::to_string_pretty(&value).expect("value renders");
    s.push('\n');
    s
}

/// Inline JSON if the argument starts with `{` or `[`, otherwise a file path.
fn load_spec(arg: &str) -> Result<Value> {
    let trimmed = arg.trim_start();
    let (text, context) = if trimmed.starts_with('{') || trimmed.starts_with('[') {
        (arg.to_string(), "inline spec".to_string())
    } else {
        let text = std::fs::read_to_string(arg).map_err(|source| Error::Io { path: arg.into(), source })?;
        (text, arg.to_string())
    };
    serde_json::from_str(&text).map_err(|source| Error::Json { context, source })
}

/// Accepts `{"<key>": {...}}` or the bare object; fills a missing `dim`.
fn model_parts(arg: &str, key: &str, dim: usize) -> Result<(CostKind, usize)> {
    let mut v = load_spec(arg)?;
    if let Some(inner) = v.get(key) {
        v = inner.clone();
    }
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Error::Parse(format!("{key} spec must be a JSON object")))?;
    let dim = match obj.remove("dim") {
        Some(d) => d
            .as_u64()
            .ok_or_else(|| Error::Parse(format!("{key} spec: field `dim` must be a positive integer")))?
            as usize,
        None => dim,
    };
    let kind: CostKind = serde_json::from_value(v).map_err(|source| Error::Json {
        context: format!("{key} spec"),
        source,
    })?;
    Ok((kind, dim))
}

pub fn parse_cost(arg: &str, dim: usize) -> Result<CostModel> {
    let (kind, dim) = model_parts(arg, "cost", dim)?;
    CostModel::new(kind, dim)
}

pub fn parse_noise(arg: &str, dim: usize) -> Result<NoiseModel> {
    let (kind, dim) = model_parts(arg, "noise", dim)?;
    NoiseModel::new(kind, dim)
}

fn parse_point(v: &Value, context: &str) -> Result<Point> {
    match v {
        Value::Number(n) => Ok(vec![n.as_f64().unwrap_or(f64::NAN)]),
        Value::Array(items) => items
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| Error::Parse(format!("{context}: coordinates must be numbers"))))
            .collect(),
        _ => Err(Error::Parse(format!("{context}: atoms must be numbers or arrays of numbers"))),
    }
}

/// `{"kind":"grid","atoms":[..]}`, `{"kind":"k-atom","k":3}` or
/// `{"kind":"explicit","files":[..]}`.
pub fn parse_class(arg: &str, default_seed: u64) -> Result<MixtureClass> {
    let mut v = load_spec(arg)?;
    if let Some(inner) = v.get("class") {
        v = inner.clone();
    }
    let kind = v.get("kind").and_then(Value::as_str).unwrap_or_default().to_string();
    match kind.as_str() {
        "grid" => {
            let atoms = v
                .get("atoms")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Parse("class spec: grid needs an `atoms` array".into()))?
                .iter()
                .enumerate()
                .map(|(i, a)| parse_point(a, &format!("class spec: atoms[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            Ok(MixtureClass::Grid { atoms })
        }
        "k-atom" => {
            let k = v
                .get("k")
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::Parse("class spec: k-atom needs an integer `k`".into()))?;
            let seed = v.get("seed").and_then(Value::as_u64).unwrap_or(default_seed);
            Ok(MixtureClass::KAtom { k: k as usize, seed })
        }
        "explicit" => {
            let files = v
                .get("files")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Parse("class spec: explicit needs a `files` array".into()))?;
            let candidates = files
                .iter()
                .map(|f| {
                    let path = f
                        .as_str()
                        .ok_or_else(|| Error::Parse("class spec: `files` entries must be strings".into()))?;
                    DiscreteMeasure::from_json_file(path)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MixtureClass::Explicit { candidates })
        }
        other => Err(Error::Parse(format!(
            "class spec: unknown kind {other:?} (expected grid, k-atom or explicit)"
        ))),
    }
}

pub fn load_seeds(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let v: Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    let list = v.get("seeds").unwrap_or(&v);
    serde_json::from_value(list.clone()).map_err(|source| Error::Json {
        context: format!("{}: seeds must be an array of non-negative integers", path.display()),
        source,
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Sinkhorn { .. } => "sinkhorn",
        Command::Relaxed { .. } => "relaxed",
        Command::Mle { .. } => "mle",
        Command::Project { .. } => "project",
        Command::Certify { .. } => "certify",
        Command::Generate { .. } => "generate",
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("payload serializes")
}

/// Executes one command. Certificates render as a bare report array and
/// samples as CSV; every other command renders a [`Report`].
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let cfg = &config.solver;
    cfg.validate()?;
    let (payload, success) = match &config.command {
        Command::Sinkhorn { mu, nu, cost, sigma2, emit_coupling, .. } => {
            let mu = DiscreteMeasure::from_json_file(mu)?;
            let nu = DiscreteMeasure::from_json_file(nu)?;
            let c = parse_cost(cost, mu.dim())?;
            let s2 = sigma2.unwrap_or_else(|| c.effective_sigma2());
            let sol = sinkhorn(&mu, &nu, &c, s2, cfg)?;
            let mut payload = to_value(&sol);
            if !emit_coupling {
                if let Value::Object(fields) = &mut payload {
                    fields.remove("coupling");
                }
            }
            (payload, true)
        }
        Command::Relaxed { p, nu, cost, sigma2 } => {
            let p = DiscreteMeasure::from_json_file(p)?;
            let nu = DiscreteMeasure::from_json_file(nu)?;
            let c = parse_cost(cost, p.dim())?;
            let s2 = sigma2.unwrap_or_else(|| c.effective_sigma2());
            let sol = relaxed_transport(&p, &nu, &c, s2)?;
            let payload = serde_json::json!({
                "value": sol.value,
                "x_marginal": sol.x_marginal,
                "per_row_values": sol.per_row_values,
            });
            (payload, true)
        }
        Command::Mle { sample, class, noise } => {
            let sample = Sample::from_csv_file(sample)?;
            let noise = parse_noise(noise, sample.dim())?;
            let class = parse_class(class, config.seed)?;
            let res = mle(&sample, &class, &noise, cfg)?;
            let ll = log_likelihood(&res.estimate, &sample, &noise)?;
            let mut payload = to_value(&res);
            payload["log_likelihood"] = to_value(&ll);
            (payload, res.converged)
        }
        Command::Project { sample, class, cost, sigma2, mode } => {
            let sample = Sample::from_csv_file(sample)?;
            let c = parse_cost(cost, sample.dim())?;
            let s2 = sigma2.unwrap_or_else(|| c.effective_sigma2());
            let class = parse_class(class, config.seed)?;
            let nu = empirical_measure(&sample);
            let res = match mode {
                ProjectMode::Entropic => project_entropic(&class, &nu, &c, s2, cfg)?,
                ProjectMode::Relaxed => project_relaxed(&class, &nu, &c, s2, cfg)?,
            };
            (to_value(&res), res.converged)
        }
        Command::Certify { claim, seeds, exploratory } => {
            let seeds = seeds.as_deref().map(load_seeds).transpose()?;
            let reports = run_claim((*claim).into(), seeds.as_deref(), cfg, config.threads)?;
            if *exploratory {
                let e = kmeans_consistency_exploration(config.seed, &[8, 32, 128, 512])?;
                eprint!("{}", render_json(&e));
            }
            let success = reports.iter().all(|r| r.pass);
            return Ok(RunOutput { rendered: render_json(&reports), success });
        }
        Command::Generate { pstar, noise, n } => {
            let pstar = DiscreteMeasure::from_json_file(pstar)?;
            let noise = parse_noise(noise, pstar.dim())?;
            let sample = generate_sample(&pstar, &noise, *n, config.seed)?;
            return Ok(RunOutput { rendered: sample.to_csv(), success: true });
        }
    };
    let report = Report {
        schema_version: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command_name(&config.command).to_string(),
        config: config.clone(),
        wall_time_ms: start.elapsed().as_millis() as u64,
        payload,
    };
    Ok(RunOutput { rendered: render_json(&report), success })
}

/// Exit status for an error: 2 for input problems, 3 for solver failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NotConverged { .. }
        | Error::Infeasible(_)
        | Error::EmptyGibbsSupport { .. }
        | Error::MarginalMismatch { .. }
        | Error::Unsupported(_) => 3,
        _ => 2,
    }
}

/// Parses arguments, runs, writes output; returns the process exit code
/// (0 success, 1 failed certificate or unconverged solver, 2 bad input, 3 solver error).
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let config = RunConfig::from(cli);
    let output = match run(&config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match &config.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &output.rendered) {
                eprintln!("error: {}: {e}", path.display());
                return 2;
            }
        }
        None => print!("{}", output.rendered),
    }
    if output.success {
        0
    } else {
        1
    }
}
