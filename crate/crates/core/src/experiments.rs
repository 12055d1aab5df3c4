//! Seeded Monte Carlo harness: error tables over step-size grids, error decay
//! with the sample size, and the normality study of `Qₙ`.
//!
//! Replication `k` of sample-size index `i` draws its data from the stream
//! seeded by `derive_seed(master, [i, k])`. Every algorithm and schedule in a
//! plan sees the same data for a given `(i, k)`, and no seed depends on
//! execution order, so reports are identical for any worker count.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{backfit, BackfitConfig};
use crate::error::{Error, Result};
use crate::geometry::{initialize, median_in_place, CompactRegion, InitConfig};
use crate::inference::{confidence_ball, ks_statistic, q_statistic, CovarianceAccumulators, KsResult};
use crate::model::{sample_cloud, DistributionSpec, RadialLaw, SphereParams, TruncationRegion};
use crate::prm::{EstimatorState, StepSchedule};
use crate::rng::{derive_seed, stream, Stream};

/// A replication whose center error exceeds this is flagged diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Cells with a larger failing fraction are marked partial.
pub const PARTIAL_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Plain Robbins-Monro, no projection.
    Rm,
    /// Projected Robbins-Monro, last iterate.
    Prm,
    /// Running average of the projected iterates.
    Averaged,
    Backfit,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Rm => "rm",
            Algorithm::Prm => "prm",
            Algorithm::Averaged => "averaged",
            Algorithm::Backfit => "backfit",
        }
    }

    pub fn uses_schedule(self) -> bool {
        !matches!(self, Algorithm::Backfit)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rm" => Ok(Algorithm::Rm),
            "prm" => Ok(Algorithm::Prm),
            "averaged" => Ok(Algorithm::Averaged),
            "backfit" => Ok(Algorithm::Backfit),
            other => Err(Error::InvalidParameter(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Options shared by all pipelines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub init: InitConfig,
    pub avg_burn: usize,
    pub fresh_init: bool,
    pub backfit: BackfitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub spec: DistributionSpec,
    pub sample_sizes: Vec<usize>,
    pub schedules: Vec<StepSchedule>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub options: PipelineOptions,
}

fn default_replications() -> usize {
    200
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.sample_sizes.is_empty() || self.schedules.is_empty() || self.algorithms.is_empty() {
            return Err(Error::InvalidParameter(
                "plan needs at least one sample size, schedule and algorithm".into(),
            ));
        }
        if self.replications < 2 {
            return Err(Error::InvalidParameter(format!(
                "plan needs at least 2 replications, got {}",
                self.replications
            )));
        }
        for s in &self.schedules {
            StepSchedule::new(s.c_gamma, s.alpha)?;
        }
        self.options.backfit.validate()?;
        if let Some(&n) = self.sample_sizes.iter().find(|&&n| n < self.options.init.k_first) {
            return Err(Error::InvalidParameter(format!(
                "sample size {n} is smaller than the initializer's k_first = {}",
                self.options.init.k_first
            )));
        }
        Ok(())
    }

    /// Cells in report order: algorithm, then schedule, then sample size.
    fn cells(&self) -> Vec<(Algorithm, Option<usize>, usize)> {
        let mut out = Vec::new();
        for &alg in &self.algorithms {
            let schedules: Vec<Option<usize>> = if alg.uses_schedule() {
                (0..self.schedules.len()).map(Some).collect()
            } else {
                vec![None]
            };
            for s in schedules {
                for ni in 0..self.sample_sizes.len() {
                    out.push((alg, s, ni));
                }
            }
        }
        out
    }
}

/// Data, starting point and region for one replication.
pub struct Replicate {
    pub seed: u64,
    pub points: Vec<DVector<f64>>,
    pub initial: SphereParams,
    pub region: CompactRegion,
    /// First index of the recursion stream.
    pub offset: usize,
}

/// Generates `n` points and runs the initializer, all from one seeded stream.
pub fn replicate(
    spec: &DistributionSpec,
    n: usize,
    seed: u64,
    options: &PipelineOptions,
) -> Result<Replicate> {
    let mut rng: Stream = stream(seed);
    let points = sample_cloud(spec, n, &mut rng)?;
    let (initial, region) = initialize(&points, options.init, &mut rng)?;
    let offset = if options.fresh_init { options.init.k_first } else { 0 };
    if offset >= n {
        return Err(Error::InsufficientData { needed: offset + 1, got: n });
    }
    Ok(Replicate {
        seed,
        points,
        initial,
        region,
        offset,
    })
}

impl Replicate {
    pub fn stream(&self) -> &[DVector<f64>] {
        &self.points[self.offset..]
    }

    pub fn run(&self, schedule: StepSchedule, projected: bool, avg_burn: usize) -> Result<EstimatorState> {
        let region = projected.then(|| self.region.clone());
        let mut state = EstimatorState::new(self.initial.clone(), schedule, region)?.with_avg_burn(avg_burn);
        for x in self.stream() {
            state.update(x)?;
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub center_error2: f64,
    pub radius_error2: f64,
    pub diverged: bool,
    pub estimate: Option<SphereParams>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub algorithm: Algorithm,
    pub c_gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub n: usize,
    pub center_mse: f64,
    pub radius_mse: f64,
    pub diverged: usize,
    pub failed: usize,
    pub partial: bool,
    pub records: Vec<ReplicationRecord>,
}

impl CellReport {
    fn from_records(
        algorithm: Algorithm,
        schedule: Option<StepSchedule>,
        n: usize,
        records: Vec<ReplicationRecord>,
    ) -> Self {
        let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
        let failed = records.len() - ok.len();
        let mean = |f: fn(&ReplicationRecord) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        Self {
            algorithm,
            c_gamma: schedule.map(|s| s.c_gamma),
            alpha: schedule.map(|s| s.alpha),
            n,
            center_mse: mean(|r| r.center_error2),
            radius_mse: mean(|r| r.radius_error2),
            diverged: ok.iter().filter(|r| r.diverged).count(),
            failed,
            partial: failed as f64 > PARTIAL_FRACTION * records.len() as f64,
            records,
        }
    }

    /// Fraction of successful replications whose squared center error is at
    /// least `threshold`.
    pub fn fraction_at_least(&self, threshold: f64) -> f64 {
        let ok: Vec<_> = self.records.iter().filter(|r| r.failure.is_none()).collect();
        ok.iter().filter(|r| r.center_error2 >= threshold).count() as f64 / ok.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub master_seed: u64,
    pub spec: DistributionSpec,
    pub replications: usize,
    pub cells: Vec<CellReport>,
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn cell(&self, algorithm: Algorithm, c_gamma: Option<f64>, alpha: Option<f64>, n: usize) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.algorithm == algorithm && c.c_gamma == c_gamma && c.alpha == alpha && c.n == n)
    }

    /// One row per cell. With `rmse` the error columns hold root mean squares.
    pub fn to_csv(&self, rmse: bool) -> String {
        let (cm, rm) = if rmse {
            ("center_rmse", "radius_rmse")
        } else {
            ("center_mse", "radius_mse")
        };
        let mut out = format!("algorithm,c_gamma,alpha,n,{cm},{rm},diverged,failed,replications,partial\n");
        for c in &self.cells {
            let (ce, re) = if rmse {
                (c.center_mse.sqrt(), c.radius_mse.sqrt())
            } else {
                (c.center_mse, c.radius_mse)
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.algorithm.name(),
                c.c_gamma.map(fmt_f64).unwrap_or_default(),
                c.alpha.map(fmt_f64).unwrap_or_default(),
                c.n,
                fmt_f64(ce),
                fmt_f64(re),
                c.diverged,
                c.failed,
                c.records.len(),
                c.partial
            );
        }
        out
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::Numeric(format!("thread pool: {e}"))),
    }
}

fn errors_of(estimate: &SphereParams, theta: &SphereParams) -> (f64, f64) {
    (
        (&estimate.center - &theta.center).norm_squared(),
        (estimate.radius - theta.radius).powi(2),
    )
}

fn record(replication: usize, seed: u64, estimate: SphereParams, theta: &SphereParams, flagged: bool) -> ReplicationRecord {
    let (c2, r2) = errors_of(&estimate, theta);
    let diverged = flagged || !(c2.sqrt() <= DIVERGENCE_THRESHOLD);
    ReplicationRecord {
        replication,
        seed,
        center_error2: c2,
        radius_error2: r2,
        diverged,
        estimate: Some(estimate),
        failure: None,
    }
}

fn failure(replication: usize, seed: u64, e: &Error) -> ReplicationRecord {
    ReplicationRecord {
        replication,
        seed,
        center_error2: f64::NAN,
        radius_error2: f64::NAN,
        diverged: false,
        estimate: None,
        failure: Some(e.to_string()),
    }
}

/// Per-replication records for every cell sharing sample-size index `ni`.
fn run_replication(
    plan: &ExperimentPlan,
    theta: &SphereParams,
    ni: usize,
    k: usize,
) -> Vec<((Algorithm, Option<usize>), ReplicationRecord)> {
    let n = plan.sample_sizes[ni];
    let seed = derive_seed(plan.master_seed, &[ni as u64, k as u64]);
    let mut out = Vec::new();
    let keys: Vec<(Algorithm, Option<usize>)> = plan
        .cells()
        .into_iter()
        .filter(|c| c.2 == ni)
        .map(|c| (c.0, c.1))
        .collect();
    let rep = match replicate(&plan.spec, n, seed, &plan.options) {
        Ok(r) => r,
        Err(e) => {
            return keys.into_iter().map(|key| (key, failure(k, seed, &e))).collect();
        }
    };
    let burn = plan.options.avg_burn;
    for (si, schedule) in plan.schedules.iter().enumerate() {
        let wants = |a| keys.contains(&(a, Some(si)));
        if wants(Algorithm::Prm) || wants(Algorithm::Averaged) {
            match rep.run(*schedule, true, burn) {
                Ok(state) => {
                    if wants(Algorithm::Prm) {
                        let r = record(k, seed, state.theta_hat.clone(), theta, state.diverged);
                        out.push(((Algorithm::Prm, Some(si)), r));
                    }
                    if wants(Algorithm::Averaged) {
                        let r = record(k, seed, state.theta_bar.clone(), theta, state.diverged);
                        out.push(((Algorithm::Averaged, Some(si)), r));
                    }
                }
                Err(e) => {
                    for a in [Algorithm::Prm, Algorithm::Averaged] {
                        if wants(a) {
                            out.push(((a, Some(si)), failure(k, seed, &e)));
                        }
                    }
                }
            }
        }
        if wants(Algorithm::Rm) {
            let r = match rep.run(*schedule, false, burn) {
                Ok(state) => record(k, seed, state.theta_hat, theta, state.diverged),
                Err(e) => failure(k, seed, &e),
            };
            out.push(((Algorithm::Rm, Some(si)), r));
        }
    }
    if keys.contains(&(Algorithm::Backfit, None)) {
        let r = match backfit(rep.stream(), &rep.initial, &plan.options.backfit) {
            Ok(res) => record(k, seed, res.estimate, theta, false),
            Err(e) => failure(k, seed, &e),
        };
        out.push(((Algorithm::Backfit, None), r));
    }
    out
}

pub fn run_plan(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    run_plan_with_workers(plan, None)
}

pub fn run_plan_with_workers(plan: &ExperimentPlan, workers: Option<usize>) -> Result<ExperimentReport> {
    plan.validate()?;
    let started = Instant::now();
    let theta = plan.spec.theta()?;
    let jobs: Vec<(usize, usize)> = (0..plan.sample_sizes.len())
        .flat_map(|ni| (0..plan.replications).map(move |k| (ni, k)))
        .collect();
    let results: Vec<_> = with_pool(workers, || {
        jobs.par_iter()
            .map(|&(ni, k)| (ni, run_replication(plan, &theta, ni, k)))
            .collect()
    })?;
    let cells = plan
        .cells()
        .into_iter()
        .map(|(alg, si, ni)| {
            let records: Vec<ReplicationRecord> = results
                .iter()
                .filter(|(i, _)| *i == ni)
                .flat_map(|(_, recs)| recs.iter())
                .filter(|(key, _)| *key == (alg, si))
                .map(|(_, r)| r.clone())
                .collect();
            CellReport::from_records(alg, si.map(|i| plan.schedules[i]), plan.sample_sizes[ni], records)
        })
        .collect();
    Ok(ExperimentReport {
        master_seed: plan.master_seed,
        spec: plan.spec.clone(),
        replications: plan.replications,
        cells,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Quantile with linear interpolation between order statistics
/// (`(m − 1)p` indexing). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    /// `init`, `prm` or `averaged`.
    pub algorithm: String,
    pub n: usize,
    /// Per component: center coordinates then radius.
    pub components: Vec<BoxStats>,
    pub center_mse: f64,
    pub radius_mse: f64,
    pub median_center_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub master_seed: u64,
    pub schedule: StepSchedule,
    pub replications: usize,
    pub rows: Vec<DecayRow>,
    /// Per n, per component, MSE of the last iterate (center coordinates then
    /// radius).
    pub prm_component_mse: Vec<Vec<f64>>,
    pub failed: usize,
}

impl DecayReport {
    pub fn row(&self, algorithm: &str, n: usize) -> Option<&DecayRow> {
        self.rows.iter().find(|r| r.algorithm == algorithm && r.n == n)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("algorithm,n,component,min,q1,median,q3,max,center_mse,radius_mse\n");
        for row in &self.rows {
            let k = row.components.len();
            for (j, b) in row.components.iter().enumerate() {
                let name = if j + 1 == k { "r".to_string() } else { format!("mu{j}") };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    row.algorithm,
                    row.n,
                    name,
                    fmt_f64(b.min),
                    fmt_f64(b.q1),
                    fmt_f64(b.median),
                    fmt_f64(b.q3),
                    fmt_f64(b.max),
                    fmt_f64(row.center_mse),
                    fmt_f64(row.radius_mse)
                );
            }
        }
        out
    }
}

/// Boxplot statistics of the initial, last-iterate and averaged estimates for
/// each sample size.
pub fn decay_study(
    spec: &DistributionSpec,
    sample_sizes: &[usize],
    schedule: StepSchedule,
    replications: usize,
    master_seed: u64,
    options: &PipelineOptions,
    workers: Option<usize>,
) -> Result<DecayReport> {
    if sample_sizes.is_empty() || replications < 2 {
        return Err(Error::InvalidParameter("decay study needs sample sizes and ≥ 2 replications".into()));
    }
    let theta = spec.theta()?;
    let jobs: Vec<(usize, usize)> = (0..sample_sizes.len())
        .flat_map(|ni| (0..replications).map(move |k| (ni, k)))
        .collect();
    type Triple = Option<(SphereParams, SphereParams, SphereParams)>;
    let results: Vec<(usize, Triple)> = with_pool(workers, || {
        jobs.par_iter()
            .map(|&(ni, k)| {
                let seed = derive_seed(master_seed, &[ni as u64, k as u64]);
                let out = replicate(spec, sample_sizes[ni], seed, options).and_then(|rep| {
                    let state = rep.run(schedule, true, options.avg_burn)?;
                    Ok((rep.initial.clone(), state.theta_hat, state.theta_bar))
                });
                (ni, out.ok())
            })
            .collect()
    })?;
    let failed = results.iter().filter(|r| r.1.is_none()).count();
    let d = spec.dim();
    let mut rows = Vec::new();
    let mut prm_component_mse = Vec::new();
    for (ni, &n) in sample_sizes.iter().enumerate() {
        let triples: Vec<_> = results
            .iter()
            .filter(|r| r.0 == ni)
            .filter_map(|r| r.1.as_ref())
            .collect();
        if triples.is_empty() {
            return Err(Error::Numeric(format!("every replication failed at n = {n}")));
        }
        for (name, pick) in [("init", 0usize), ("prm", 1), ("averaged", 2)] {
            let estimates: Vec<&SphereParams> = triples
                .iter()
                .map(|t| match pick {
                    0 => &t.0,
                    1 => &t.1,
                    _ => &t.2,
                })
                .collect();
            let components = (0..=d)
                .map(|j| {
                    let vals: Vec<f64> = estimates.iter().map(|e| e.to_vector()[j]).collect();
                    BoxStats::of(&vals)
                })
                .collect();
            let errs: Vec<(f64, f64)> = estimates.iter().map(|e| errors_of(e, &theta)).collect();
            let m = errs.len() as f64;
            let mut center_err: Vec<f64> = errs.iter().map(|e| e.0.sqrt()).collect();
            if name == "prm" {
                prm_component_mse.push(
                    (0..=d)
                        .map(|j| {
                            estimates
                                .iter()
                                .map(|e| (e.to_vector()[j] - theta.to_vector()[j]).powi(2))
                                .sum::<f64>()
                                / m
                        })
                        .collect(),
                );
            }
            rows.push(DecayRow {
                algorithm: name.to_string(),
                n,
                components,
                center_mse: errs.iter().map(|e| e.0).sum::<f64>() / m,
                radius_mse: errs.iter().map(|e| e.1).sum::<f64>() / m,
                median_center_error: median_in_place(&mut center_err),
            });
        }
    }
    Ok(DecayReport {
        master_seed,
        schedule,
        replications,
        rows,
        prm_component_mse,
        failed,
    })
}

/// Gaussian kernel density estimate on a uniform grid, Silverman bandwidth
/// `0.9·min(sd, IQR/1.34)·m^{−1/5}`. The grid spans the data plus five
/// bandwidths on each side.
pub fn kernel_density(samples: &[f64], grid_points: usize) -> Vec<(f64, f64)> {
    let m = samples.len() as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / m;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = (0.9 * spread * m.powf(-0.2)).max(1e-12);
    let lo = sorted[0] - 5.0 * h;
    let hi = sorted[sorted.len() - 1] + 5.0 * h;
    let norm = 1.0 / (m * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..grid_points)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (grid_points - 1) as f64;
            let dens = sorted.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>() * norm;
            (x, dens)
        })
        .collect()
}

pub fn density_csv(grid: &[(f64, f64)]) -> String {
    let mut out = String::from("x,density\n");
    for (x, y) in grid {
        let _ = writeln!(out, "{},{}", fmt_f64(*x), fmt_f64(*y));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub master_seed: u64,
    pub n: usize,
    pub schedule: StepSchedule,
    /// `Qₙ` per successful replication.
    pub q_values: Vec<Vec<f64>>,
    pub ks: Vec<KsResult>,
    pub coverage_level: f64,
    /// Fraction of replications whose confidence ellipsoid holds the truth.
    pub coverage: f64,
    pub failed: usize,
    pub ill_conditioned: usize,
    #[serde(skip)]
    pub densities: Vec<Vec<(f64, f64)>>,
}

impl NormalityReport {
    pub fn to_csv(&self) -> String {
        let k = self.ks.len();
        let mut out = String::from("replication");
        for j in 0..k {
            let _ = write!(out, ",q{j}");
        }
        out.push('\n');
        for (i, q) in self.q_values.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in q {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn ks_csv(&self) -> String {
        let mut out = String::from("component,statistic,p_value\n");
        for (j, r) in self.ks.iter().enumerate() {
            let _ = writeln!(out, "{j},{},{}", fmt_f64(r.statistic), fmt_f64(r.p_value));
        }
        out
    }
}

/// Runs the averaged recursion with the online `Γ̂ₙ`, `Σ̂ₙ` accumulators on
/// each replication, then tests every component of `Qₙ` against `N(0, 1)`
/// and measures the coverage of the `coverage_level` confidence ellipsoid.
#[allow(clippy::too_many_arguments)]
pub fn normality_study(
    spec: &DistributionSpec,
    n: usize,
    replications: usize,
    schedule: StepSchedule,
    master_seed: u64,
    coverage_level: f64,
    options: &PipelineOptions,
    workers: Option<usize>,
) -> Result<NormalityReport> {
    if replications < 20 {
        return Err(Error::InvalidParameter(format!(
            "normality study needs at least 20 replications, got {replications}"
        )));
    }
    let theta = spec.theta()?;
    let results: Vec<Option<(Vec<f64>, bool, bool)>> = with_pool(workers, || {
        (0..replications)
            .into_par_iter()
            .map(|k| {
                let seed = derive_seed(master_seed, &[0, k as u64]);
                let run = || -> Result<(Vec<f64>, bool, bool)> {
                    let rep = replicate(spec, n, seed, options)?;
                    let mut state = EstimatorState::new(rep.initial.clone(), schedule, Some(rep.region.clone()))?
                        .with_avg_burn(options.avg_burn);
                    let mut acc = CovarianceAccumulators::new(spec.dim());
                    for x in rep.stream() {
                        state.update(x)?;
                        acc.update(x, &state.theta_bar)?;
                    }
                    let q = q_statistic(&acc, &state.theta_bar, &theta)?;
                    let ball = confidence_ball(&acc, &state.theta_bar, coverage_level)?;
                    Ok((q.values.iter().copied().collect(), ball.contains(&theta), q.ill_conditioned))
                };
                run().ok()
            })
            .collect()
    })?;
    let ok: Vec<_> = results.iter().flatten().collect();
    let failed = replications - ok.len();
    if ok.len() < 20 {
        return Err(Error::Numeric(format!("only {} replications succeeded", ok.len())));
    }
    let k = spec.dim() + 1;
    let q_values: Vec<Vec<f64>> = ok.iter().map(|r| r.0.clone()).collect();
    let mut ks = Vec::with_capacity(k);
    let mut densities = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<f64> = q_values.iter().map(|q| q[j]).collect();
        ks.push(ks_statistic(&col)?);
        densities.push(kernel_density(&col, 512));
    }
    Ok(NormalityReport {
        master_seed,
        n,
        schedule,
        q_values,
        ks,
        coverage_level,
        coverage: ok.iter().filter(|r| r.1).count() as f64 / ok.len() as f64,
        failed,
        ill_conditioned: ok.iter().filter(|r| r.2).count(),
        densities,
    })
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Whole-sphere setup of the simulation study: `μ = 0`, `r = 50`, shell
/// noise with `δ = 0.1`.
pub fn whole_sphere_spec() -> DistributionSpec {
    DistributionSpec::new(
        SphereParams::new(vec![0.0; 3], 50.0).expect("valid"),
        RadialLaw::Shell { delta: 0.1 },
        TruncationRegion::Complete,
    )
    .expect("valid")
}

/// Half-sphere setup: radial Gaussian with `σ = 1` on `{y ≥ 0}`.
pub fn half_sphere_spec() -> DistributionSpec {
    DistributionSpec::new(
        SphereParams::new(vec![0.0; 3], 50.0).expect("valid"),
        RadialLaw::RadialGaussian { sigma: 1.0 },
        TruncationRegion::HalfSpace { axis: 1, sign: 1 },
    )
    .expect("valid")
}

pub const TABLE_C_GAMMA: [f64; 3] = [1.0, 5.0, 10.0];
pub const TABLE_ALPHA: [f64; 5] = [0.51, 0.6, 0.66, 0.75, 0.99];

pub fn table_schedules() -> Vec<StepSchedule> {
    TABLE_C_GAMMA
        .iter()
        .flat_map(|&c| TABLE_ALPHA.iter().map(move |&a| StepSchedule { c_gamma: c, alpha: a }))
        .collect()
}

/// Named experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Unprojected recursion over the step-size grid, n = 2000.
    Table1,
    /// Projected recursion over the step-size grid, n = 2000.
    Table2,
    /// Last iterate against sample size, whole sphere.
    Figure1,
    /// Last iterate and average against sample size, whole sphere.
    Figure2,
    /// Normality of `Q₂₀₀₀`.
    Figure3,
    /// Averaged recursion against backfitting on the half sphere.
    Figure4,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "table1" => Preset::Table1,
            "table2" => Preset::Table2,
            "figure1" => Preset::Figure1,
            "figure2" => Preset::Figure2,
            "figure3" => Preset::Figure3,
            "figure4" => Preset::Figure4,
            other => return Err(Error::InvalidParameter(format!("unknown preset {other:?}"))),
        })
    }
}

pub const DECAY_SAMPLE_SIZES: [usize; 7] = [100, 250, 500, 1000, 2000, 4000, 8000];
pub const FIGURE4_SAMPLE_SIZES: [usize; 4] = [500, 1000, 2000, 5000];

impl Preset {
    /// Plan for the table presets and for `figure4`; `None` for the others,
    /// which run through [`decay_study`] or [`normality_study`].
    pub fn plan(self, master_seed: u64, replications: usize) -> Option<ExperimentPlan> {
        let base = |spec, sizes: &[usize], schedules, algorithms| ExperimentPlan {
            spec,
            sample_sizes: sizes.to_vec(),
            schedules,
            replications,
            algorithms,
            master_seed,
            options: PipelineOptions::default(),
        };
        match self {
            Preset::Table1 => Some(base(whole_sphere_spec(), &[2000], table_schedules(), vec![Algorithm::Rm])),
            Preset::Table2 => Some(base(whole_sphere_spec(), &[2000], table_schedules(), vec![Algorithm::Prm])),
            Preset::Figure4 => Some(base(
                half_sphere_spec(),
                &FIGURE4_SAMPLE_SIZES,
                vec![StepSchedule::default()],
                vec![Algorithm::Averaged, Algorithm::Backfit],
            )),
            _ => None,
        }
    }
}
