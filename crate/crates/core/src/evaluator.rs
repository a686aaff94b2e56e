//! ℓp calibration error and squared error, exact over a world or empirical
//! over a sample.
//!
//! For a predictor `h`, bin `v` and class `j` the error is
//! `|E[(h(x)_j - y_j) * 1[R(h(x)) = v]]|`; the ℓp error is the p-norm of these
//! over all `(v, j)`. The bins are those of the evaluated predictor itself.
//! Labels are integrated out exactly wherever the world is available.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibrator::{CalibParams, PNorm, RunTrace};
use crate::simplex::{round_down, LevelSet};
use crate::world::{exact_event_stats, Predictor, SampleCounts, World};

/// Signed-then-absolute error of every observed bin, one entry per class.
pub type ErrorTable = BTreeMap<LevelSet, Vec<f64>>;

/// Error table from weighted `(feature, label, weight)` triples.
pub fn weighted_error_table<I>(h: &Predictor, lambda: u32, weights: I) -> ErrorTable
where
    I: IntoIterator<Item = (usize, usize, f64)>,
{
    let k = h.k();
    let bins: Vec<LevelSet> = h.rows().iter().map(|u| round_down(u, lambda)).collect();
    let mut table: ErrorTable = BTreeMap::new();
    for (x, label, w) in weights {
        if w == 0.0 {
            continue;
        }
        let row = table.entry(bins[x].clone()).or_insert_with(|| vec![0.0; k]);
        let pred = h.predict(x);
        for (j, acc) in row.iter_mut().enumerate() {
            let y = if j == label { 1.0 } else { 0.0 };
            *acc += w * (pred[j] - y);
        }
    }
    for row in table.values_mut() {
        row.iter_mut().for_each(|e| *e = e.abs());
    }
    table
}

fn world_weights(world: &World) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    (0..world.n_features())
        .flat_map(move |x| (0..world.k()).map(move |j| (x, j, world.joint(x, j))))
}

fn sample_weights(samples: &SampleCounts) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    let n = samples.total() as f64;
    samples.cells().map(move |(x, j, c)| (x, j, c as f64 / n))
}

pub fn exact_error_table(world: &World, h: &Predictor, lambda: u32) -> ErrorTable {
    weighted_error_table(h, lambda, world_weights(world))
}

pub fn exact_bin_class_error(
    world: &World,
    h: &Predictor,
    lambda: u32,
    v: &LevelSet,
    j: usize,
) -> f64 {
    exact_error_table(world, h, lambda)
        .get(v)
        .map_or(0.0, |row| row[j])
}

/// p-norm of every entry of the table.
pub fn lp_of_table(table: &ErrorTable, p: PNorm) -> f64 {
    let entries = table.values().flatten().copied();
    match p {
        PNorm::Infinity => entries.fold(0.0, f64::max),
        PNorm::Finite { num, den } => {
            let exponent = num as f64 / den as f64;
            let total: f64 = if den == 1 {
                entries.map(|e| e.powi(num as i32)).sum()
            } else {
                entries.map(|e| e.powf(exponent)).sum()
            };
            total.powf(1.0 / exponent)
        }
    }
}

pub fn exact_lp_error(world: &World, h: &Predictor, lambda: u32, p: PNorm) -> f64 {
    lp_of_table(&exact_error_table(world, h, lambda), p)
}

fn weighted_sq_error<I>(pred: &Predictor, weights: I) -> f64
where
    I: IntoIterator<Item = (usize, usize, f64)>,
{
    weights
        .into_iter()
        .map(|(x, label, w)| {
            let dist: f64 = pred
                .predict(x)
                .coords()
                .iter()
                .enumerate()
                .map(|(j, &q)| {
                    let d = q - if j == label { 1.0 } else { 0.0 };
                    d * d
                })
                .sum();
            w * dist
        })
        .sum()
}

/// `E ||pred(x) - y||^2` with the label integrated out exactly.
pub fn exact_sq_error(world: &World, pred: &Predictor) -> f64 {
    weighted_sq_error(pred, world_weights(world))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinErrors {
    pub bin: Vec<u32>,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpValue {
    pub p: PNorm,
    pub value: f64,
}

/// Comparison of a calibrated predictor's exact errors against the
/// guarantees implied by its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundChecks {
    pub beta: f64,
    pub max_bin_error: f64,
    pub per_bin_within_beta: bool,
    /// `Err_p(h)^p` (or `Err_inf(h)` at `p = inf`).
    pub lp_power: f64,
    pub lp_bound: f64,
    pub lp_within_bound: bool,
    pub lp_error: f64,
    pub lp_within_epsilon: bool,
    pub sq_error_increase: f64,
    pub sq_error_budget: f64,
    pub sq_error_within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub lambda: u32,
    pub table: Vec<BinErrors>,
    pub lp: Vec<LpValue>,
    pub sq_error: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline_sq_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checks: Option<BoundChecks>,
}

impl ErrorReport {
    fn from_parts(lambda: u32, table: ErrorTable, ps: &[PNorm], sq_error: f64) -> Self {
        let lp = ps
            .iter()
            .map(|&p| LpValue {
                p,
                value: lp_of_table(&table, p),
            })
            .collect();
        Self {
            lambda,
            table: table
                .into_iter()
                .map(|(v, errors)| BinErrors {
                    bin: v.numerators().to_vec(),
                    errors,
                })
                .collect(),
            lp,
            sq_error,
            baseline_sq_error: None,
            checks: None,
        }
    }

    pub fn exact(world: &World, h: &Predictor, lambda: u32, ps: &[PNorm]) -> Self {
        let table = exact_error_table(world, h, lambda);
        Self::from_parts(lambda, table, ps, exact_sq_error(world, h))
    }

    /// Same quantities with empirical frequencies in place of exact masses.
    pub fn empirical(samples: &SampleCounts, h: &Predictor, lambda: u32, ps: &[PNorm]) -> Self {
        if samples.total() == 0 {
            return Self::from_parts(lambda, ErrorTable::new(), ps, 0.0);
        }
        let table = weighted_error_table(h, lambda, sample_weights(samples));
        let sq = weighted_sq_error(h, sample_weights(samples));
        Self::from_parts(lambda, table, ps, sq)
    }

    pub fn lp_value(&self, p: PNorm) -> Option<f64> {
        self.lp.iter().find(|l| l.p == p).map(|l| l.value)
    }

    pub fn max_entry(&self) -> f64 {
        self.table
            .iter()
            .flat_map(|r| r.errors.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Fills in the bound checks for `h` calibrated from `f` under `params`.
    pub fn check_bounds(&mut self, world: &World, f: &Predictor, params: &CalibParams) {
        let table: ErrorTable = self
            .table
            .iter()
            .map(|r| {
                (
                    LevelSet::new(r.bin.clone(), self.lambda).expect("bins of a rounded predictor"),
                    r.errors.clone(),
                )
            })
            .collect();
        let baseline = exact_sq_error(world, f);
        let max_bin_error = self.max_entry();
        let lp_error = lp_of_table(&table, params.p);
        let lp_power = match params.p {
            PNorm::Infinity => lp_error,
            PNorm::Finite { num, den } => lp_error.powf(num as f64 / den as f64),
        };
        let lp_bound = params.lp_bound();
        let sq_error_increase = self.sq_error - baseline;
        let sq_error_budget = params.sq_error_budget();
        self.baseline_sq_error = Some(baseline);
        self.checks = Some(BoundChecks {
            beta: params.beta,
            max_bin_error,
            per_bin_within_beta: max_bin_error <= params.beta,
            lp_power,
            lp_bound,
            lp_within_bound: lp_power <= lp_bound,
            lp_error,
            lp_within_epsilon: lp_error <= params.epsilon,
            sq_error_increase,
            sq_error_budget,
            sq_error_within_budget: sq_error_increase <= sq_error_budget,
        });
    }
}

/// Exact-oracle audit of one run: the accuracy events the guarantees are
/// conditioned on, plus the trace-level counting bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAudit {
    /// `max_v |mu_hat(v) - mu(v)|` over every level set.
    pub bin_mass_deviation: f64,
    pub bin_mass_accuracy: f64,
    pub bin_mass_ok: bool,
    /// Largest deviation of any pool answer from its exact value.
    pub pool_deviation: f64,
    pub pool_accuracy: Option<f64>,
    pub pool_ok: bool,
    pub iterations: u64,
    pub t_max: u64,
    pub iterations_ok: bool,
    pub max_tau: u32,
    pub tau_bound: f64,
    pub tau_ok: bool,
}

impl RunAudit {
    pub fn new(world: &World, f: &Predictor, trace: &RunTrace) -> Self {
        let params = &trace.params;
        let binned = f.binned(params.lambda);

        let mut truth: BTreeMap<&LevelSet, f64> = BTreeMap::new();
        for x in 0..world.n_features() {
            *truth.entry(binned.bin(x)).or_default() += world.mass(x);
        }
        let mut bin_mass_deviation: f64 = 0.0;
        for (v, m) in &truth {
            bin_mass_deviation = bin_mass_deviation.max((trace.bin_masses.get(v) - m).abs());
        }
        for (v, est) in trace.bin_masses.iter() {
            if !truth.contains_key(v) {
                bin_mass_deviation = bin_mass_deviation.max(est.abs());
            }
        }

        let bins = &trace.high_probability_bins;
        let mut pool_deviation: f64 = 0.0;
        for record in &trace.estimates {
            let stats = exact_event_stats(world, &binned, record.bins.iter().map(|&b| &bins[b]));
            pool_deviation = pool_deviation.max((record.p_hat - stats.mass).abs());
            for (e, t) in record.e_hat.iter().zip(&stats.mean_label) {
                pool_deviation = pool_deviation.max((e - t).abs());
            }
        }

        let iterations = trace.iteration_count();
        let max_tau = trace.tau.iter().copied().max().unwrap_or(0);
        let tau_bound = params.tau_bound();
        Self {
            bin_mass_deviation,
            bin_mass_accuracy: params.a1_accuracy,
            bin_mass_ok: bin_mass_deviation <= params.a1_accuracy,
            pool_deviation,
            pool_accuracy: trace.pool_accuracy,
            pool_ok: trace.pool_accuracy.is_none_or(|a| pool_deviation <= a),
            iterations,
            t_max: trace.t_max,
            iterations_ok: iterations <= trace.t_max,
            max_tau,
            tau_bound,
            tau_ok: f64::from(max_tau) <= tau_bound,
        }
    }
}
