//! Experiment driver: JSON run configs, seeded end-to-end runs, reports,
//! trace CSVs and parameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mcal_core::calibrator::MovedSide;
use mcal_core::evaluator::{exact_lp_error, BoundChecks, LpValue};
use mcal_core::{
    calibrate, make_scenario, CalibParams, Calibration, ErrorReport, PNorm, PoolSpec, Predictor,
    RunAudit, RunTrace, SampleMode, Scenario, World,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Norms reported for both the base and the calibrated predictor.
pub const REPORT_NORMS: [PNorm; 3] = [
    PNorm::Finite { num: 1, den: 1 },
    PNorm::Finite { num: 2, den: 1 },
    PNorm::Infinity,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: Scenario,
    pub k: usize,
    pub features: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<PathBuf>,
}

/// One calibration experiment.
///
/// ```json
/// {
///   "scenario": { "name": "random-miscalibrated", "k": 3, "features": 40 },
///   "p": "inf", "epsilon": 0.25, "delta": 0.1, "seed": 7,
///   "sample_mode": "auto",
///   "output": { "report": "report.json", "trace": "trace.csv" }
/// }
/// ```
///
/// `sample_mode` may also be
/// `{ "manual": { "bin_mass_samples": N, "pool_samples": M } }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub p: PNorm,
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    #[serde(default)]
    pub sample_mode: SampleMode,
    #[serde(default)]
    pub output: OutputPaths,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Parameter derivation doubles as config validation.
    pub fn params(&self) -> anyhow::Result<CalibParams> {
        if self.scenario.features == 0 {
            bail!("scenario needs at least one feature");
        }
        Ok(CalibParams::derive(self.p, self.epsilon, self.delta)?)
    }

    pub fn world(&self) -> anyhow::Result<(World, Predictor)> {
        let s = &self.scenario;
        Ok(make_scenario(s.name, s.k, s.features, self.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub sample_mode: SampleMode,
    pub params: CalibParams,
    pub bin_mass_samples: u64,
    pub high_probability_bins: usize,
    pub pool_accuracy: Option<f64>,
    pub pool_delta: Option<f64>,
    pub pools: Vec<PoolSpec>,
    pub iterations: u64,
    pub t_max: u64,
    /// `Err_p(f)` at the configured `p`.
    pub lp_error_base: f64,
    pub errors_base: Vec<LpValue>,
    pub errors_calibrated: Vec<LpValue>,
    pub sq_error_base: f64,
    pub sq_error_calibrated: f64,
    pub checks: BoundChecks,
    pub audit: RunAudit,
    pub calibrated_table: ErrorReport,
}

impl RunReport {
    pub fn all_bounds_hold(&self) -> bool {
        let c = &self.checks;
        c.per_bin_within_beta
            && c.lp_within_bound
            && c.lp_within_epsilon
            && c.sq_error_within_budget
    }
}

/// In-memory result of [`execute`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub world: World,
    pub base: Predictor,
    pub calibrated: Predictor,
    pub calibration: Calibration,
    pub report: RunReport,
}

/// Scenario, sampling, calibration and exact evaluation, without touching disk.
pub fn execute(config: &RunConfig) -> anyhow::Result<RunOutcome> {
    let params = config.params()?;
    let (world, f) = config.world()?;
    let calibration = calibrate(&world, &f, &params, config.sample_mode, config.seed)
        .context("calibration failed")?;
    let h = calibration.predictor.to_predictor();
    let trace = &calibration.trace;

    let base = ErrorReport::exact(&world, &f, params.lambda, &REPORT_NORMS);
    let mut calibrated = ErrorReport::exact(&world, &h, params.lambda, &REPORT_NORMS);
    calibrated.check_bounds(&world, &f, &params);
    let checks = calibrated.checks.clone().expect("bounds checked above");
    let audit = RunAudit::new(&world, &f, trace);
    let lp_error_base = exact_lp_error(&world, &f, params.lambda, params.p);

    let report = RunReport {
        scenario: config.scenario.clone(),
        seed: config.seed,
        sample_mode: config.sample_mode,
        params,
        bin_mass_samples: trace.bin_masses.pool_size(),
        high_probability_bins: trace.high_probability_bins.len(),
        pool_accuracy: trace.pool_accuracy,
        pool_delta: trace.pool_delta,
        pools: trace.pools.clone(),
        iterations: trace.iteration_count(),
        t_max: trace.t_max,
        lp_error_base,
        errors_base: base.lp,
        errors_calibrated: calibrated.lp.clone(),
        sq_error_base: base.sq_error,
        sq_error_calibrated: calibrated.sq_error,
        checks,
        audit,
        calibrated_table: calibrated,
    };
    Ok(RunOutcome {
        world,
        base: f,
        calibrated: h,
        calibration,
        report,
    })
}

pub fn report_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub const TRACE_HEADER: &str = "t,group_id,bins,j,est_error,z_j,merge_flags";

/// Level sets of `B` by index, numerators joined by `:` and sets by `;`.
fn bins_field(trace: &RunTrace, bins: &[usize]) -> String {
    bins.iter()
        .map(|&b| trace.high_probability_bins[b].to_numerator_string(":"))
        .collect::<Vec<_>>()
        .join(";")
}

/// One CSV row per iteration. `merge_flags` is `g:<side>|m:<count>` where
/// `<side>` names who moved in a level-set collision (`none` without one).
pub fn trace_rows(trace: &RunTrace) -> Vec<String> {
    trace
        .iterations
        .iter()
        .map(|it| {
            let side = match &it.g_merge {
                None => "none",
                Some(g) => match g.moved {
                    MovedSide::Selected => "selected",
                    MovedSide::Partner => "partner",
                },
            };
            format!(
                "{},{},{},{},{},{},g:{}|m:{}",
                it.t,
                it.group.0,
                bins_field(trace, &it.bins),
                it.class,
                it.est_error,
                it.z[it.class],
                side,
                it.m_merges.len()
            )
        })
        .collect()
}

pub fn trace_csv(trace: &RunTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for row in trace_rows(trace) {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Runs `config` and writes whichever outputs it names.
pub fn run(config: &RunConfig) -> anyhow::Result<RunOutcome> {
    let outcome = execute(config)?;
    let out = &config.output;
    if let Some(path) = &out.report {
        write_file(path, &report_json(&outcome.report))?;
    }
    if let Some(path) = &out.trace {
        write_file(path, &trace_csv(&outcome.calibration.trace))?;
    }
    if let Some(path) = &out.predictor {
        let mut s = serde_json::to_string_pretty(&outcome.calibrated)?;
        s.push('\n');
        write_file(path, &s)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub p: PNorm,
    pub epsilon: f64,
    pub seed: u64,
}

/// A template config crossed with a grid over `p`, `epsilon` and `seed`.
/// `extra_cells` are appended after the grid in the order given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub template: RunConfig,
    pub p: Vec<PNorm>,
    pub epsilon: Vec<f64>,
    pub seed: Vec<u64>,
    #[serde(default)]
    pub extra_cells: Vec<SweepCell>,
}

impl SweepConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Grid order: `p` outermost, then `epsilon`, then `seed`.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &p in &self.p {
            for &epsilon in &self.epsilon {
                for &seed in &self.seed {
                    cells.push(SweepCell { p, epsilon, seed });
                }
            }
        }
        cells.extend(self.extra_cells.iter().copied());
        cells
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub index: usize,
    pub cell: SweepCell,
    pub result: Result<RunReport, String>,
}

pub const SUMMARY_HEADER: &str = "index,p,epsilon,seed,status,iterations,bins,err_p_base,err_p_calibrated,max_bin_error,per_bin_ok,lp_ok,epsilon_ok,sq_ok,error";

/// Runs every cell in parallel; a failing cell becomes an error row.
pub fn sweep(config: &SweepConfig) -> anyhow::Result<Vec<SweepRow>> {
    let cells = config.cells();
    if cells.is_empty() {
        bail!("sweep grid is empty");
    }
    Ok(cells
        .into_par_iter()
        .enumerate()
        .map(|(index, cell)| {
            let mut cfg = config.template.clone();
            cfg.p = cell.p;
            cfg.epsilon = cell.epsilon;
            cfg.seed = cell.seed;
            cfg.output = OutputPaths::default();
            let result = execute(&cfg)
                .map(|o| o.report)
                .map_err(|e| format!("{e:#}"));
            SweepRow {
                index,
                cell,
                result,
            }
        })
        .collect())
}

pub fn summary_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        let c = &row.cell;
        let _ = write!(out, "{},{},{},{},", row.index, c.p, c.epsilon, c.seed);
        match &row.result {
            Ok(r) => {
                let ch = &r.checks;
                let _ = writeln!(
                    out,
                    "ok,{},{},{},{},{},{},{},{},{},",
                    r.iterations,
                    r.high_probability_bins,
                    r.lp_error_base,
                    ch.lp_error,
                    ch.max_bin_error,
                    ch.per_bin_within_beta,
                    ch.lp_within_bound,
                    ch.lp_within_epsilon,
                    ch.sq_error_within_budget
                );
            }
            Err(e) => {
                let msg = e.replace(['\n', ','], " ");
                let _ = writeln!(out, "error,,,,,,,,,,{msg}");
            }
        }
    }
    out
}

/// Writes one report per successful cell plus `summary.csv` into `dir`.
pub fn write_sweep(rows: &[SweepRow], dir: &Path) -> anyhow::Result<PathBuf> {
    for row in rows {
        if let Ok(report) = &row.result {
            write_file(
                &dir.join(format!("cell-{:04}.json", row.index)),
                &report_json(report),
            )?;
        }
    }
    let summary = dir.join("summary.csv");
    write_file(&summary, &summary_csv(rows))?;
    Ok(summary)
}
