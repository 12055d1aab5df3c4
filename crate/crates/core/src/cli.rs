//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::baseline::backfit;
use crate::error::{Error, Result};
use crate::experiments::{
    decay_study, density_csv, normality_study, run_plan_with_workers, whole_sphere_spec, Algorithm,
    ExperimentPlan, PipelineOptions, Preset, DECAY_SAMPLE_SIZES,
};
use crate::geometry::initialize;
use crate::io::{read_json, read_points, sidecar_path, write_json, write_points, Format, Sidecar};
use crate::model::{sample_cloud, DistributionSpec, RadialLaw, SphereParams, TruncationRegion};
use crate::prm::{fit, FitOptions, FitSummary, Start, StepSchedule};
use crate::rng::stream;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "spherefit", version, about = "Sphere center and radius estimation by projected Robbins-Monro")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a point cloud from a distribution spec.
    Generate(GenerateArgs),
    /// Estimate the sphere from a point-cloud file; prints a JSON summary.
    Fit(FitArgs),
    /// Run a preset or a plan file through the Monte Carlo harness.
    Experiment(ExperimentArgs),
    /// Distribution of the pivotal statistic over replications.
    Normality(NormalityArgs),
    /// Error decay with the sample size.
    Decay(DecayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    /// Distribution spec JSON file (replaces the inline spec flags).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Sphere radius.
    #[arg(long, default_value_t = 50.0)]
    pub radius: f64,
    /// Sphere center, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0,0", allow_hyphen_values = true)]
    pub center: Vec<f64>,
    /// Shell noise half-width δ (default 0.1 unless --sigma is given).
    #[arg(long, conflicts_with = "sigma")]
    pub delta: Option<f64>,
    /// Radial Gaussian noise scale σ.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Keep only directions with a positive coordinate on this axis.
    #[arg(long)]
    pub half_space: Option<usize>,
}

impl SpecArgs {
    pub fn resolve(&self) -> Result<DistributionSpec> {
        if let Some(path) = &self.spec {
            return read_json(path);
        }
        let radial = match (self.delta, self.sigma) {
            (_, Some(sigma)) => RadialLaw::RadialGaussian { sigma },
            (delta, None) => RadialLaw::Shell {
                delta: delta.unwrap_or(0.1),
            },
        };
        let region = match self.half_space {
            Some(axis) => TruncationRegion::HalfSpace { axis, sign: 1 },
            None => TruncationRegion::Complete,
        };
        DistributionSpec::new(SphereParams::new(self.center.clone(), self.radius)?, radial, region)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SeedArgs {
    /// Master seed.
    #[arg(long, env = "SPHEREFIT_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    /// Step-size constant c_γ in γₙ = c_γ n^(−α).
    #[arg(long = "c-gamma", default_value_t = 1.0)]
    pub c_gamma: f64,
    /// Step-size exponent α in (1/2, 1).
    #[arg(long, default_value_t = 2.0 / 3.0)]
    pub alpha: f64,
}

impl ScheduleArgs {
    pub fn schedule(&self) -> Result<StepSchedule> {
        StepSchedule::new(self.c_gamma, self.alpha)
    }
}

/// Pipeline overrides; unset flags keep the plan or default values.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Points the initializer draws its tuples from.
    #[arg(long = "init-k")]
    pub init_k: Option<usize>,
    /// Number of tuples the initializer draws.
    #[arg(long = "init-n")]
    pub init_n: Option<usize>,
    /// Leave the first B iterates out of the average.
    #[arg(long = "avg-burn")]
    pub avg_burn: Option<usize>,
    /// Keep the initializer's points out of the recursion stream.
    #[arg(long = "fresh-init")]
    pub fresh_init: bool,
    /// Backfitting relative tolerance.
    #[arg(long = "bf-tol")]
    pub bf_tol: Option<f64>,
    /// Backfitting iteration cap.
    #[arg(long = "bf-max-iter")]
    pub bf_max_iter: Option<usize>,
}

impl PipelineArgs {
    pub fn apply(&self, mut o: PipelineOptions) -> Result<PipelineOptions> {
        if let Some(k) = self.init_k {
            o.init.k_first = k;
        }
        if let Some(n) = self.init_n {
            o.init.n_tuples = n;
        }
        if let Some(b) = self.avg_burn {
            o.avg_burn = b;
        }
        o.fresh_init |= self.fresh_init;
        if let Some(t) = self.bf_tol {
            o.backfit.tolerance = t;
        }
        if let Some(m) = self.bf_max_iter {
            o.backfit.max_iterations = m;
        }
        o.backfit.validate()?;
        if o.init.k_first < 2 || o.init.n_tuples == 0 {
            return Err(Error::InvalidParameter(format!(
                "initializer needs --init-k ≥ 2 and --init-n ≥ 1, got {} and {}",
                o.init.k_first, o.init.n_tuples
            )));
        }
        Ok(o)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Number of points.
    #[arg(long)]
    pub n: usize,
    #[command(flatten)]
    pub seed: SeedArgs,
    /// Output file; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Output format (default from the file extension).
    #[arg(long)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Point-cloud file (csv or xyz).
    pub input: PathBuf,
    #[arg(long, default_value = "averaged")]
    pub algorithm: Algorithm,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Seed for the initializer's tuple draws.
    #[command(flatten)]
    pub seed: SeedArgs,
    /// Also write the summary to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Named grid: table1, table2, figure1, figure2, figure3, figure4.
    #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
    pub preset: Option<Preset>,
    /// Plan JSON file.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Replications per cell.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Master seed (overrides the plan's).
    #[arg(long, env = "SPHEREFIT_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Report root mean squared errors instead of mean squared errors.
    #[arg(long)]
    pub rmse: bool,
}

#[derive(Debug, Clone, Args)]
pub struct NormalityArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub seed: SeedArgs,
    /// Confidence level of the ellipsoid whose coverage is reported.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DecayArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Sample sizes, comma separated.
    #[arg(long = "n", value_delimiter = ',', default_values_t = DECAY_SAMPLE_SIZES.to_vec())]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub seed: SeedArgs,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

impl clap::builder::ValueParserFactory for Algorithm {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Algorithm>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for Preset {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Preset>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for Format {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Format>().map_err(|e| e.to_string()))
    }
}

#[derive(Debug, Serialize)]
struct FitOutput {
    algorithm: Algorithm,
    estimate: SphereParams,
    #[serde(flatten)]
    summary: FitSummary,
}

#[derive(Debug, Serialize)]
struct BackfitOutput {
    algorithm: Algorithm,
    estimate: SphereParams,
    initial: SphereParams,
    points: usize,
    iterations: usize,
    converged: bool,
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Table1 => "table1",
        Preset::Table2 => "table2",
        Preset::Figure1 => "figure1",
        Preset::Figure2 => "figure2",
        Preset::Figure3 => "figure3",
        Preset::Figure4 => "figure4",
    }
}

fn out_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn generate(args: &GenerateArgs) -> Result<i32> {
    if args.n == 0 {
        return Err(Error::InvalidParameter("--n must be at least 1".into()));
    }
    let spec = args.spec.resolve()?;
    let mut rng = stream(args.seed.seed);
    let points = sample_cloud(&spec, args.n, &mut rng)?;
    let format = args.format.unwrap_or_else(|| Format::from_path(&args.out));
    write_points(&args.out, &points, format)?;
    let sidecar = Sidecar {
        spec,
        n: args.n,
        seed: args.seed.seed,
        format,
    };
    write_json(&sidecar_path(&args.out), &sidecar)?;
    Ok(EXIT_OK)
}

fn fit_command(args: &FitArgs) -> Result<i32> {
    let points = read_points(&args.input)?;
    let options = args.pipeline.apply(PipelineOptions::default())?;
    let mut rng = stream(args.seed.seed);
    let (text, code) = match args.algorithm {
        Algorithm::Backfit => {
            let (initial, _) = initialize(&points, options.init, &mut rng)?;
            let skip = if options.fresh_init { options.init.k_first } else { 0 };
            let res = backfit(&points[skip.min(points.len())..], &initial, &options.backfit)?;
            let out = BackfitOutput {
                algorithm: Algorithm::Backfit,
                estimate: res.estimate,
                initial,
                points: points.len(),
                iterations: res.iterations,
                converged: res.converged,
            };
            (serde_json::to_string_pretty(&out)?, EXIT_OK)
        }
        alg => {
            let fit_options = FitOptions {
                start: Start::Initializer(options.init),
                projected: alg != Algorithm::Rm,
                avg_burn: options.avg_burn,
                fresh_init: options.fresh_init,
            };
            let (_, summary) = fit(&points, args.schedule.schedule()?, &fit_options, &mut rng)?;
            let estimate = match alg {
                Algorithm::Averaged => summary.theta_bar.clone(),
                _ => summary.theta_hat.clone(),
            };
            let code = if summary.diverged { EXIT_DIVERGED } else { EXIT_OK };
            let out = FitOutput {
                algorithm: alg,
                estimate,
                summary,
            };
            (serde_json::to_string_pretty(&out)?, code)
        }
    };
    {
        use std::io::Write;
        let mut stdout = std::io::stdout().lock();
        if let Err(e) = writeln!(stdout, "{text}") {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                return Err(e.into());
            }
        }
    }
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{text}\n"))?;
    }
    if code == EXIT_DIVERGED {
        eprintln!("warning: the recursion diverged");
    }
    Ok(code)
}

fn experiment(args: &ExperimentArgs) -> Result<i32> {
    std::fs::create_dir_all(&args.out)?;
    let reps = args.reps.unwrap_or(200);
    let seed = args.seed.unwrap_or(0);
    let (name, plan) = match (args.preset, &args.plan) {
        (Some(p), _) => match p.plan(seed, reps) {
            Some(plan) => (preset_name(p).to_string(), plan),
            None => return study_preset(p, args, seed, reps),
        },
        (None, Some(path)) => {
            let mut plan: ExperimentPlan = read_json(path).map_err(|e| {
                Error::InvalidParameter(format!(
                    "cannot read plan {}: {e}\nusage: spherefit experiment (--preset NAME | --plan FILE) [--reps N] [--seed S] [--out DIR]",
                    path.display()
                ))
            })?;
            if let Some(r) = args.reps {
                plan.replications = r;
            }
            if let Some(s) = args.seed {
                plan.master_seed = s;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
            let stem = stem.strip_suffix(".plan").unwrap_or(stem).to_string();
            (stem, plan)
        }
        (None, None) => return Err(Error::InvalidParameter("give --preset or --plan".into())),
    };
    let mut plan = plan;
    plan.options = args.pipeline.apply(plan.options)?;
    let report = run_plan_with_workers(&plan, args.workers)?;
    for c in report.cells.iter().filter(|c| c.partial) {
        eprintln!(
            "warning: cell {} c_gamma={:?} alpha={:?} n={} is partial ({} of {} replications failed)",
            c.algorithm.name(),
            c.c_gamma,
            c.alpha,
            c.n,
            c.failed,
            c.records.len()
        );
    }
    write_text(&out_file(&args.out, &format!("{name}.csv")), &report.to_csv(args.rmse))?;
    write_json(&out_file(&args.out, &format!("{name}.json")), &report)?;
    write_json(&out_file(&args.out, &format!("{name}.plan.json")), &plan)?;
    Ok(EXIT_OK)
}

fn study_preset(p: Preset, args: &ExperimentArgs, seed: u64, reps: usize) -> Result<i32> {
    let options = args.pipeline.apply(PipelineOptions::default())?;
    let spec = whole_sphere_spec();
    let name = preset_name(p);
    match p {
        Preset::Figure3 => write_normality(
            &args.out,
            name,
            &normality_study(&spec, 2000, reps, StepSchedule::default(), seed, 0.95, &options, args.workers)?,
        ),
        _ => {
            let report = decay_study(
                &spec,
                &DECAY_SAMPLE_SIZES,
                StepSchedule::default(),
                reps,
                seed,
                &options,
                args.workers,
            )?;
            write_text(&out_file(&args.out, &format!("{name}.csv")), &report.to_csv())?;
            write_json(&out_file(&args.out, &format!("{name}.json")), &report)?;
            Ok(EXIT_OK)
        }
    }
}

fn write_normality(dir: &Path, name: &str, report: &crate::experiments::NormalityReport) -> Result<i32> {
    write_text(&out_file(dir, &format!("{name}.csv")), &report.to_csv())?;
    write_text(&out_file(dir, &format!("{name}_ks.csv")), &report.ks_csv())?;
    for (j, grid) in report.densities.iter().enumerate() {
        write_text(&out_file(dir, &format!("{name}_density_q{j}.csv")), &density_csv(grid))?;
    }
    write_json(&out_file(dir, &format!("{name}.json")), report)?;
    if report.failed > 0 {
        eprintln!("warning: {} replications failed", report.failed);
    }
    for (j, ks) in report.ks.iter().enumerate() {
        eprintln!("q{j}: KS statistic {:.4}, p-value {:.4}", ks.statistic, ks.p_value);
    }
    eprintln!("coverage at level {}: {:.4}", report.coverage_level, report.coverage);
    Ok(EXIT_OK)
}

fn normality(args: &NormalityArgs) -> Result<i32> {
    std::fs::create_dir_all(&args.out)?;
    let spec = args.spec.resolve()?;
    let options = args.pipeline.apply(PipelineOptions::default())?;
    let report = normality_study(
        &spec,
        args.n,
        args.reps,
        args.schedule.schedule()?,
        args.seed.seed,
        args.level,
        &options,
        args.workers,
    )?;
    write_normality(&args.out, "normality", &report)
}

fn decay(args: &DecayArgs) -> Result<i32> {
    std::fs::create_dir_all(&args.out)?;
    let spec = args.spec.resolve()?;
    let options = args.pipeline.apply(PipelineOptions::default())?;
    let report = decay_study(
        &spec,
        &args.sizes,
        args.schedule.schedule()?,
        args.reps,
        args.seed.seed,
        &options,
        args.workers,
    )?;
    if report.failed > 0 {
        eprintln!("warning: {} replications failed", report.failed);
    }
    write_text(&out_file(&args.out, "decay.csv"), &report.to_csv())?;
    write_json(&out_file(&args.out, "decay.json"), &report)?;
    Ok(EXIT_OK)
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Fit(a) => fit_command(a),
        Command::Experiment(a) => experiment(a),
        Command::Normality(a) => normality(a),
        Command::Decay(a) => decay(a),
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 2 when a fit diverged, 1 on any error (including usage).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
