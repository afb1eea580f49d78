use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fdot::inversion::{
    self, history_csv, AlphaStrategy, InversionConfig, MultiRunReport, Weighting,
};
use fdot::peaks::{self, ScanGrid};
use fdot::scenarios::{self, Prepared, Scenario, Table, BUILTIN_IDS};
use fdot::{forward, BoundaryPoint, FdotError, QuadratureSpec, Target};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "fdot", version, about = "Time-domain fluorescence DOT in a half-space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the TPSF of every source-detector pair of a scenario.
    Forward(ForwardArgs),
    /// Non-iterative localization of a small target from a midpoint scan.
    Locate(LocateArgs),
    /// Iterative reconstruction from noisy synthetic data.
    Invert(InvertArgs),
    /// Regenerate every table and curve of one example.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Built-in scenario id or path to a scenario JSON file.
    #[arg(long, default_value = "ex1")]
    scenario: String,
    /// Output directory.
    #[arg(long, env = "FDOT_OUT", default_value = "fdot-out")]
    out: PathBuf,
    /// Relative tolerance of the time-convolution quadrature.
    #[arg(long, default_value_t = 1e-9)]
    rel_tol: f64,
    /// Store the elapsed time in the manifest (makes reruns differ).
    #[arg(long)]
    record_timing: bool,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    #[command(flatten)]
    common: Common,
    /// Move a static target so that its centre sits at this depth (mm).
    #[arg(long)]
    depth: Option<f64>,
    /// Exchange sources and detectors.
    #[arg(long)]
    swap_sd: bool,
}

#[derive(Args, Debug)]
struct LocateArgs {
    #[command(flatten)]
    common: Common,
    /// Midpoints per side of the square scan.
    #[arg(long, default_value_t = 11)]
    grid_n: usize,
    /// Spacing of scan midpoints (mm).
    #[arg(long, default_value_t = 1.0)]
    pitch: f64,
    /// Source-detector separation of the scanning pair (mm).
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    /// Last sampling time of each scan curve (ps); sampled every 1 ps.
    #[arg(long, default_value_t = 600.0)]
    t_end: f64,
    #[arg(long)]
    depth: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct InversionArgs {
    /// Relative noise level; defaults to the scenario's.
    #[arg(long)]
    eps: Option<f64>,
    /// Number of noise realizations.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Seed of the first run; run k uses seed + k.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Regularization parameter: `auto` (discrepancy principle) or a value.
    #[arg(long, default_value = "auto")]
    alpha: String,
    /// Stop once the update norm falls below this.
    #[arg(long, default_value_t = 1e-8)]
    eta: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, value_enum, default_value_t = WeightingArg::Logarithmic)]
    weighting: WeightingArg,
}

#[derive(Args, Debug)]
struct InvertArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    inversion: InversionArgs,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    /// Example id.
    id: String,
    #[arg(long, env = "FDOT_OUT", default_value = "fdot-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-9)]
    rel_tol: f64,
    #[arg(long)]
    record_timing: bool,
    /// Noise level of reconstruction examples (default 1%).
    #[arg(long)]
    eps: Option<f64>,
    /// Noise realizations of reconstruction examples.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum WeightingArg {
    Absolute,
    Relative,
    Logarithmic,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Absolute => Weighting::Absolute,
            WeightingArg::Relative => Weighting::Relative,
            WeightingArg::Logarithmic => Weighting::Logarithmic,
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(FdotError),
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) | CliError::Io(..) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<FdotError> for CliError {
    fn from(e: FdotError) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct RunManifest {
    command: String,
    scenario: String,
    seeds: Vec<u64>,
    tolerances: serde_json::Value,
    output_dir: String,
    code_version: &'static str,
    wall_clock_s: Option<f64>,
}

struct Output {
    dir: PathBuf,
    manifest: RunManifest,
    record_timing: bool,
    started: Instant,
}

impl Output {
    fn create(dir: &Path, manifest: RunManifest, record_timing: bool) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
        let out = Output {
            dir: dir.to_path_buf(),
            manifest,
            record_timing,
            started: Instant::now(),
        };
        out.write_manifest()?;
        Ok(out)
    }

    fn write_manifest(&self) -> CliResult<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        self.write(MANIFEST, &text)
    }

    fn write(&self, name: &str, text: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| CliError::Io(path.clone(), e))?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn csv(&self, name: &str, table: &Table) -> CliResult<()> {
        self.write(name, &format!("# manifest: {MANIFEST}\n{}", table.to_csv()))
    }

    fn json(&self, name: &str, mut value: serde_json::Value) -> CliResult<()> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("manifest".into(), json!(MANIFEST));
        }
        let text = serde_json::to_string_pretty(&value).expect("report serializes");
        self.write(name, &format!("{text}\n"))
    }

    fn finish(mut self) -> CliResult<()> {
        if self.record_timing {
            self.manifest.wall_clock_s = Some(self.started.elapsed().as_secs_f64());
            self.write_manifest()?;
        }
        Ok(())
    }
}

fn quadrature(rel_tol: f64) -> CliResult<QuadratureSpec> {
    let q = QuadratureSpec::default().with_rel_tol(rel_tol);
    q.validate()?;
    Ok(q)
}

fn load_scenario(arg: &str) -> CliResult<Scenario> {
    if BUILTIN_IDS.contains(&arg) {
        return Ok(scenarios::builtin(arg)?);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "scenario `{arg}` is neither a built-in id ({}) nor an existing file",
            BUILTIN_IDS.join(", ")
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{arg}: {e}")))?;
    Ok(Scenario::from_json(&text)?)
}

fn manifest(command: &str, scenario: &str, seeds: Vec<u64>, tolerances: serde_json::Value, out: &Path) -> RunManifest {
    RunManifest {
        command: command.into(),
        scenario: scenario.into(),
        seeds,
        tolerances,
        output_dir: out.display().to_string(),
        code_version: env!("CARGO_PKG_VERSION"),
        wall_clock_s: None,
    }
}

/// Moves a static target so that its centre lies at `depth`.
fn at_depth(target: &Target, depth: f64) -> CliResult<Target> {
    match target {
        Target::Point { center, concentration } => Ok(Target::Point {
            center: [center[0], center[1], depth],
            concentration: *concentration,
        }),
        Target::Cuboid(c) => {
            let shift = depth - c.center()[2];
            let mut lower = c.lower;
            let mut upper = c.upper;
            lower[2] += shift;
            upper[2] += shift;
            Ok(Target::Cuboid(fdot::Cuboid::new(lower, upper, c.concentration)?))
        }
        _ => Err(CliError::Usage("--depth applies to static targets only".into())),
    }
}

fn cmd_forward(args: &ForwardArgs) -> CliResult<()> {
    let c = &args.common;
    let q = quadrature(c.rel_tol)?;
    let mut scenario = load_scenario(&c.scenario)?;
    if let Some(depth) = args.depth {
        scenario.target = at_depth(&scenario.target, depth)?;
    }
    let mut prepared = scenario.prepare(&q)?;
    if args.swap_sd {
        prepared.acquisition = prepared.acquisition.swapped();
    }
    let out = Output::create(
        &c.out,
        manifest("forward", &c.scenario, vec![], json!({"rel_tol": c.rel_tol}), &c.out),
        c.record_timing,
    )?;
    let table = scenarios::tpsf_table(&prepared, "forward_tpsf", &q)?;
    let m = forward::simulate(&prepared.target, &prepared.acquisition, &prepared.optical, &q)?;
    let mut summary = Vec::new();
    for (k, pair) in prepared.acquisition.pairs.iter().enumerate() {
        let samples = m.pair_samples(k);
        let peak = peaks::detect_peak(&samples).ok();
        summary.push(json!({
            "pair_index": k,
            "source_mm": [pair.source.x1, pair.source.x2],
            "detector_mm": [pair.detector.x1, pair.detector.x2],
            "t_peak_ps": peak.map(|p| p.t_peak_ps),
            "u_peak": peak.map(|p| p.u_peak),
            "peak_on_boundary": peak.map(|p| p.on_boundary),
        }));
    }
    out.csv("forward_tpsf.csv", &table)?;
    out.json(
        "forward_summary.json",
        json!({"scenario": scenario.id, "swap_sd": args.swap_sd, "pairs": summary}),
    )?;
    out.finish()
}

fn cmd_locate(args: &LocateArgs) -> CliResult<()> {
    let c = &args.common;
    let q = quadrature(c.rel_tol)?;
    let mut scenario = load_scenario(&c.scenario)?;
    if let Some(depth) = args.depth {
        scenario.target = at_depth(&scenario.target, depth)?;
    }
    if args.grid_n == 0 {
        return Err(CliError::Usage("--grid-n must be at least 1 (empty scan grid)".into()));
    }
    if !(args.t_end >= 3.0) {
        return Err(CliError::Usage("--t-end must be at least 3 ps".into()));
    }
    let scan = ScanGrid::square(BoundaryPoint::new(0.0, 0.0), args.grid_n, args.pitch, args.separation)?;
    let out = Output::create(
        &c.out,
        manifest("locate", &c.scenario, vec![], json!({"rel_tol": c.rel_tol}), &c.out),
        c.record_timing,
    )?;
    let times: Vec<f64> = (1..=args.t_end.floor() as usize).map(|t| t as f64).collect();
    let samples = peaks::sample_scan(&scan, &scenario.target, &times, &scenario.optical, &q)?;
    let loc = peaks::localize(&scan, &samples, &scenario.optical)?;
    if loc.asymmetry_warning {
        warn!(
            "source and detector distances to the estimate differ by {:.3} (relative); \
             the closed-form peak formulas lose accuracy",
            loc.asymmetry
        );
    }
    let rows = scan
        .midpoints
        .iter()
        .zip(&samples)
        .map(|(m, s)| {
            let peak = peaks::detect_peak(s).ok();
            vec![
                m.x1,
                m.x2,
                peak.map_or(f64::NAN, |p| p.t_peak_ps),
                peak.map_or(f64::NAN, |p| p.u_peak),
            ]
        })
        .collect();
    let heatmap = Table {
        name: "locate_scan".into(),
        columns: ["x1_mm", "x2_mm", "t_peak_ps", "u_peak"].map(String::from).to_vec(),
        rows,
    };
    out.csv("locate_scan.csv", &heatmap)?;
    out.json(
        "locate.json",
        json!({
            "x_c1": loc.center[0],
            "x_c2": loc.center[1],
            "x_c3": loc.center[2],
            "P": loc.concentration,
            "t_peak_ps": loc.peak.t_peak_ps,
            "u_peak": loc.peak.u_peak,
            "asymmetry": loc.asymmetry,
            "asymmetry_warning": loc.asymmetry_warning,
        }),
    )?;
    out.finish()
}

fn inversion_config(args: &InversionArgs, epsilon: f64) -> CliResult<InversionConfig> {
    let mut cfg = InversionConfig {
        eta: args.eta,
        max_iters: args.max_iters,
        weighting: args.weighting.into(),
        ..InversionConfig::default()
    };
    cfg = cfg.with_noise_level(epsilon);
    if args.alpha != "auto" {
        let alpha: f64 = args
            .alpha
            .parse()
            .map_err(|_| CliError::Usage(format!("--alpha must be `auto` or a number, got `{}`", args.alpha)))?;
        cfg.alpha = AlphaStrategy::Fixed { alpha };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_inversion(
    out: &Output,
    prefix: &str,
    prepared: &Prepared,
    cfg: &InversionConfig,
    epsilon: f64,
    seeds: &[u64],
    q: &QuadratureSpec,
) -> CliResult<MultiRunReport> {
    let a0 = prepared
        .initial
        .as_ref()
        .ok_or_else(|| CliError::Usage("scenario has no initial guess".into()))?;
    let h = prepared.exact_data(q)?;
    let report = inversion::multi_run(&h, &prepared.exact, a0, &prepared.optical, q, cfg, epsilon, seeds)?;
    let labels = prepared.exact.layout.labels();
    let mut columns: Vec<String> = ["seed", "iterations", "converged", "final_misfit", "err"]
        .map(String::from)
        .to_vec();
    columns.extend(labels.iter().cloned());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for run in &report.runs {
        match &run.result {
            Some(r) => {
                let mut row = vec![
                    run.seed as f64,
                    r.iterations as f64,
                    if r.converged { 1.0 } else { 0.0 },
                    r.final_misfit,
                    run.err.unwrap_or(f64::NAN),
                ];
                row.extend(r.estimate.values.iter().copied());
                rows.push(row);
                out.write(&format!("{prefix}_history_seed{}.csv", run.seed), &format!("# manifest: {MANIFEST}\n{}", history_csv(&r.history)))?;
            }
            None => {
                warn!("seed {} failed: {}", run.seed, run.error.as_deref().unwrap_or("unknown"));
                failures.push(json!({"seed": run.seed, "error": run.error}));
            }
        }
    }
    out.csv(&format!("{prefix}_runs.csv"), &Table { name: format!("{prefix}_runs"), columns, rows })?;
    let named = |v: &[f64]| -> serde_json::Map<String, serde_json::Value> {
        labels.iter().cloned().zip(v.iter().map(|x| json!(x))).collect()
    };
    out.json(
        &format!("{prefix}_report.json"),
        json!({
            "scenario": prepared.exact.layout.name(),
            "epsilon": epsilon,
            "runs": seeds.len(),
            "failed": report.failed,
            "failures": failures,
            "exact": named(&prepared.exact.values),
            "initial_guess": named(&a0.values),
            "average": named(&report.average.values),
            "err": report.err,
        }),
    )?;
    info!("{prefix}: Err of the averaged recovery {:.3e}", report.err);
    Ok(report)
}

fn seeds(first: u64, runs: usize) -> CliResult<Vec<u64>> {
    if runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    Ok((0..runs as u64).map(|k| first + k).collect())
}

fn cmd_invert(args: &InvertArgs) -> CliResult<()> {
    let c = &args.common;
    let q = quadrature(c.rel_tol)?;
    let seeds = seeds(args.inversion.seed, args.inversion.runs)?;
    let scenario = load_scenario(&c.scenario)?;
    let epsilon = args.inversion.eps.unwrap_or(scenario.noise.epsilon);
    let cfg = inversion_config(&args.inversion, epsilon)?;
    let prepared = scenario.prepare(&q)?;
    let inv_q = q.fixed_volume();
    let out = Output::create(
        &c.out,
        manifest(
            "invert",
            &c.scenario,
            seeds.clone(),
            json!({"rel_tol": c.rel_tol, "epsilon": epsilon, "alpha": args.inversion.alpha, "eta": cfg.eta, "max_iters": cfg.max_iters}),
            &c.out,
        ),
        c.record_timing,
    )?;
    run_inversion(&out, "invert", &prepared, &cfg, epsilon, &seeds, &inv_q)?;
    out.finish()
}

fn cmd_reproduce(args: &ReproduceArgs) -> CliResult<()> {
    let q = quadrature(args.rel_tol)?;
    let scenario = scenarios::builtin(&args.id)?;
    let reconstructs = scenario.initial_guess.is_some();
    let seeds = if reconstructs { seeds(args.seed, args.runs)? } else { vec![] };
    let epsilon = args.eps.unwrap_or(0.01);
    let out = Output::create(
        &args.out,
        manifest(
            "reproduce",
            &args.id,
            seeds.clone(),
            json!({"rel_tol": args.rel_tol, "epsilon": if reconstructs { Some(epsilon) } else { None }}),
            &args.out,
        ),
        args.record_timing,
    )?;
    for table in scenarios::figure_data(&args.id, &q)? {
        out.csv(&format!("{}.csv", table.name), &table)?;
    }
    if reconstructs {
        let inv_args = InversionArgs {
            eps: Some(epsilon),
            runs: args.runs,
            seed: args.seed,
            alpha: "auto".into(),
            eta: 1e-8,
            max_iters: 200,
            weighting: WeightingArg::Logarithmic,
        };
        let cfg = inversion_config(&inv_args, epsilon)?;
        let prepared = scenario.prepare(&q)?;
        run_inversion(&out, &args.id, &prepared, &cfg, epsilon, &seeds, &q.fixed_volume())?;
    }
    out.finish()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Forward(a) => cmd_forward(a),
        Command::Locate(a) => cmd_locate(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Reproduce(a) => cmd_reproduce(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
