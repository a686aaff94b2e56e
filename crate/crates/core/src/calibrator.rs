//! The recalibration loop.
//!
//! Bins of `V(lambda, k)` whose estimated mass is at least `beta/6` are
//! corrected; every other bin keeps the canonical lift of its level set. While
//! some group of bins has an estimated error above `beta/2` for some class,
//! that coordinate of the group's prediction is moved to the estimated
//! conditional mean and the result is projected back onto the simplex. Groups
//! whose predictions land in the same level set are merged, so predictions stay
//! in distinct bins and the number of groups only shrinks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    bin_mass_sample_size, estimate_bin_masses, BinMassTable, DisjointQueryPool, PoolKind, PoolSpec,
};
use crate::partitions::{self, size_class_count, EstimateRecord, GroupId, MMerge, SizeClassPools};
use crate::rng;
use crate::simplex::{canonical, count_levels, project_simplex, round_down, LevelSet, ProbVector};
use crate::world::{draw_counts, Predictor, World};

/// Norm exponent `p`, kept as an exact rational so that `beta` is computed
/// without exponent drift for the common cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PNorm {
    Finite { num: u64, den: u64 },
    Infinity,
}

impl PNorm {
    pub fn integer(p: u64) -> Self {
        PNorm::Finite { num: p, den: 1 }
    }

    pub fn value(self) -> f64 {
        match self {
            PNorm::Finite { num, den } => num as f64 / den as f64,
            PNorm::Infinity => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, PNorm::Infinity)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl FromStr for PNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::ParameterOutOfRange(format!("cannot parse norm exponent '{s}'"));
        if matches!(s.to_ascii_lowercase().as_str(), "inf" | "infinity" | "∞") {
            return Ok(PNorm::Infinity);
        }
        let (num, den) = if let Some((a, b)) = s.split_once('/') {
            (
                a.trim().parse::<u64>().map_err(|_| bad())?,
                b.trim().parse::<u64>().map_err(|_| bad())?,
            )
        } else if let Some((int, frac)) = s.split_once('.') {
            if frac.len() > 9 || frac.is_empty() {
                return Err(bad());
            }
            let den = 10u64.pow(frac.len() as u32);
            let int: u64 = if int.is_empty() {
                0
            } else {
                int.parse().map_err(|_| bad())?
            };
            let frac: u64 = frac.parse().map_err(|_| bad())?;
            (int.checked_mul(den).ok_or_else(bad)? + frac, den)
        } else {
            (s.parse::<u64>().map_err(|_| bad())?, 1)
        };
        if den == 0 || num == 0 {
            return Err(bad());
        }
        let g = gcd(num, den);
        Ok(PNorm::Finite {
            num: num / g,
            den: den / g,
        })
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PNorm::Infinity => f.write_str("inf"),
            PNorm::Finite { num, den: 1 } => write!(f, "{num}"),
            PNorm::Finite { num, den } => write!(f, "{num}/{den}"),
        }
    }
}

impl Serialize for PNorm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PNorm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(p) => Ok(PNorm::integer(p)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// `x^(a/b)`, using integer powers when the exponent is whole.
fn rational_pow(x: f64, a: u64, b: u64) -> f64 {
    if a.is_multiple_of(b) {
        x.powi((a / b) as i32)
    } else {
        x.powf(a as f64 / b as f64)
    }
}

/// All parameters derived from `(p, epsilon, delta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibParams {
    pub p: PNorm,
    pub epsilon: f64,
    pub delta: f64,
    /// `epsilon^(p/(p-1)) / 2^(1/(p-1))`, or `epsilon` at `p = inf`.
    pub beta: f64,
    /// `ceil(1/beta)`
    pub lambda: u32,
    /// `beta/2`: loop threshold on cached estimated errors.
    pub error_threshold: f64,
    /// `beta/6`: minimum estimated mass of a corrected bin.
    pub bin_threshold: f64,
    /// `beta/12`: bin-mass accuracy target.
    pub a1_accuracy: f64,
    /// `delta/3`: bin-mass failure budget.
    pub a1_delta: f64,
}

impl CalibParams {
    pub fn derive(p: PNorm, epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::ParameterOutOfRange(format!(
                "epsilon = {epsilon} must lie in (0, 1)"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::ParameterOutOfRange(format!(
                "delta = {delta} must lie in (0, 1)"
            )));
        }
        let beta = match p {
            PNorm::Infinity => epsilon,
            PNorm::Finite { num, den } => {
                if num <= den {
                    return Err(Error::ParameterOutOfRange(format!("p = {p} must exceed 1")));
                }
                let gap = num - den;
                rational_pow(epsilon, num, gap) / rational_pow(2.0, den, gap)
            }
        };
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::ParameterOutOfRange(format!(
                "derived beta = {beta} outside (0, 1)"
            )));
        }
        let lambda = (1.0 / beta - 1e-9).ceil();
        if lambda > f64::from(u32::MAX) {
            return Err(Error::ParameterOutOfRange(format!(
                "lambda = {lambda} is too large"
            )));
        }
        Ok(Self {
            p,
            epsilon,
            delta,
            beta,
            lambda: (lambda as u32).max(1),
            error_threshold: beta / 2.0,
            bin_threshold: beta / 6.0,
            a1_accuracy: beta / 12.0,
            a1_delta: delta / 3.0,
        })
    }

    /// `beta / (36 (floor(log2 |B|) + 1))`
    pub fn pool_accuracy(&self, n_bins: usize) -> f64 {
        self.beta / (36.0 * size_class_count(n_bins.max(1)) as f64)
    }

    /// `delta / (3 (floor(log2 |B|) + 1))`, per pool family and size class.
    pub fn pool_delta(&self, n_bins: usize) -> f64 {
        self.delta / (3.0 * size_class_count(n_bins.max(1)) as f64)
    }

    /// `log2(36/beta)`
    pub fn tau_bound(&self) -> f64 {
        (36.0 / self.beta).log2()
    }

    /// `ceil((9 + (36/lambda) log2(36/beta)) / beta^2)`
    pub fn t_max(&self) -> u64 {
        let lambda = f64::from(self.lambda);
        ((9.0 + 36.0 / lambda * self.tau_bound()) / (self.beta * self.beta)).ceil() as u64
    }

    /// `(4/lambda) (1 + log2(36/beta))`: allowed growth of the squared error.
    pub fn sq_error_budget(&self) -> f64 {
        4.0 / f64::from(self.lambda) * (1.0 + self.tau_bound())
    }

    /// Bound on `Err_p(h)^p`: `2 beta^(p-1)`, or `beta` on `Err_inf` itself.
    pub fn lp_bound(&self) -> f64 {
        match self.p {
            PNorm::Infinity => self.beta,
            PNorm::Finite { num, den } => 2.0 * self.beta.powf((num - den) as f64 / den as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// Pool sizes from the concentration formulas.
    #[default]
    Auto,
    /// Fixed sizes for experiments; the guarantees are then monitored only.
    Manual {
        bin_mass_samples: u64,
        pool_samples: u64,
    },
}

/// High-probability bins `{v : mu_hat(v) >= beta/6}`, sorted.
pub fn select_bins(masses: &BinMassTable, params: &CalibParams) -> Vec<LevelSet> {
    let bins: Vec<LevelSet> = masses
        .iter()
        .filter(|(_, m)| *m >= params.bin_threshold)
        .map(|(v, _)| v.clone())
        .collect();
    // Estimated masses sum to one, so at most 6/beta bins clear beta/6.
    debug_assert!(bins.len() as f64 <= (12.0 / params.beta).ceil());
    bins
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MovedSide {
    /// The selected group took the partner's prediction.
    Selected,
    /// The partner took the selected group's new prediction.
    Partner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GMergeRecord {
    pub partner: GroupId,
    pub merged: GroupId,
    pub moved: MovedSide,
    pub p_selected: f64,
    pub p_partner: f64,
    /// Bin indices whose prediction changed in the merge.
    pub moved_bins: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u64,
    pub group: GroupId,
    /// Indices into the high-probability bin list.
    pub bins: Vec<usize>,
    pub class: usize,
    pub est_error: f64,
    pub z: Vec<f64>,
    pub projected: Vec<f64>,
    pub g_merge: Option<GMergeRecord>,
    pub m_merges: Vec<MMerge>,
    pub final_group: GroupId,
    pub final_bins: Vec<usize>,
    pub final_pred: Vec<f64>,
    pub final_err: Vec<f64>,
    /// Number of M groups summed for the final group's statistics.
    pub constituents: usize,
}

/// Everything needed to audit and replay one calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub params: CalibParams,
    pub seed: u64,
    pub sample_mode: SampleMode,
    pub bin_masses: BinMassTable,
    pub high_probability_bins: Vec<LevelSet>,
    pub pool_accuracy: Option<f64>,
    pub pool_delta: Option<f64>,
    pub pools: Vec<PoolSpec>,
    pub t_max: u64,
    pub initial_errors: Vec<Vec<f64>>,
    pub iterations: Vec<IterationRecord>,
    pub estimates: Vec<EstimateRecord>,
    /// Per bin of `B`: iterations in which its prediction was moved by a merge.
    pub tau: Vec<u32>,
    pub max_constituents: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl RunTrace {
    pub fn iteration_count(&self) -> u64 {
        self.iterations.len() as u64
    }

    pub fn total_pool_samples(&self) -> u64 {
        self.pools.iter().map(|p| p.m).sum()
    }
}

/// The output predictor `h`: routed through the final group of its bin when
/// `R(f(x))` is a high-probability bin, otherwise the canonical lift.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedPredictor {
    lambda: u32,
    base: Predictor,
    routing: BTreeMap<LevelSet, ProbVector>,
}

impl CalibratedPredictor {
    pub fn new(lambda: u32, base: Predictor, routing: BTreeMap<LevelSet, ProbVector>) -> Self {
        Self {
            lambda,
            base,
            routing,
        }
    }

    pub fn lambda(&self) -> u32 {
        self.lambda
    }

    pub fn routing(&self) -> &BTreeMap<LevelSet, ProbVector> {
        &self.routing
    }

    pub fn apply(&self, x: usize) -> ProbVector {
        let v = round_down(self.base.predict(x), self.lambda);
        match self.routing.get(&v) {
            Some(pred) => pred.clone(),
            None => canonical(&v),
        }
    }

    /// `h` tabulated over every feature of the base predictor.
    pub fn to_predictor(&self) -> Predictor {
        let rows = (0..self.base.len()).map(|x| self.apply(x)).collect();
        Predictor::new(rows).expect("non-empty table of simplex points")
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub predictor: CalibratedPredictor,
    pub trace: RunTrace,
}

fn build_pools(
    world: &World,
    seed: u64,
    n_bins: usize,
    alpha: f64,
    delta: f64,
    mode: SampleMode,
) -> Result<Vec<SizeClassPools>> {
    (0..size_class_count(n_bins))
        .map(|i| {
            let make = |kind: PoolKind, family: &str| {
                let name = format!("{family}/{i}");
                match mode {
                    SampleMode::Auto => {
                        DisjointQueryPool::create(world, seed, &name, kind, n_bins, alpha, delta)
                    }
                    SampleMode::Manual { pool_samples, .. } => DisjointQueryPool::with_size(
                        world,
                        seed,
                        &name,
                        kind,
                        n_bins,
                        alpha,
                        delta,
                        pool_samples,
                    ),
                }
            };
            Ok(SizeClassPools {
                probability: make(PoolKind::Probability, "p")?,
                mean_label: make(PoolKind::MeanLabel, "e")?,
            })
        })
        .collect()
}

/// Picks the cached error above the threshold with the largest value; ties go
/// to the smaller group id, then the smaller class.
fn select_target(g: &partitions::GStructure, threshold: f64) -> Option<(GroupId, usize, f64)> {
    let mut best: Option<(GroupId, usize, f64)> = None;
    for group in g.groups() {
        for (j, &e) in group.err.iter().enumerate() {
            if e > threshold && best.is_none_or(|(_, _, b)| e > b) {
                best = Some((group.id, j, e));
            }
        }
    }
    best
}

/// Runs the full recalibration of `f` against samples drawn from `world`.
///
/// All randomness derives from `seed`: bin-mass samples from stream
/// `data/bin-mass`, pool samples and noise from `data/{p,e}/<class>` and
/// `laplace/{p,e}/<class>`.
pub fn calibrate(
    world: &World,
    f: &Predictor,
    params: &CalibParams,
    mode: SampleMode,
    seed: u64,
) -> Result<Calibration> {
    let started = Instant::now();
    f.check_compatible(world)?;
    let lambda = params.lambda;
    let binned = f.binned(lambda);

    let bin_mass_samples = match mode {
        SampleMode::Auto => {
            let n_levels = count_levels(lambda, world.k()).unwrap_or(u128::MAX);
            bin_mass_sample_size(params.a1_accuracy, params.a1_delta, n_levels)?
        }
        SampleMode::Manual {
            bin_mass_samples, ..
        } => bin_mass_samples,
    };
    let counts = draw_counts(
        world,
        &mut rng::stream(seed, "data/bin-mass"),
        bin_mass_samples,
    );
    let bin_masses = estimate_bin_masses(&counts, &binned)?;
    let bins = select_bins(&bin_masses, params);

    let mut trace = RunTrace {
        params: params.clone(),
        seed,
        sample_mode: mode,
        bin_masses,
        high_probability_bins: bins.clone(),
        pool_accuracy: None,
        pool_delta: None,
        pools: Vec::new(),
        t_max: params.t_max(),
        initial_errors: Vec::new(),
        iterations: Vec::new(),
        estimates: Vec::new(),
        tau: vec![0; bins.len()],
        max_constituents: 0,
        wall_time: Duration::ZERO,
    };

    if bins.is_empty() {
        trace.wall_time = started.elapsed();
        return Ok(Calibration {
            predictor: CalibratedPredictor::new(lambda, f.clone(), BTreeMap::new()),
            trace,
        });
    }

    let n_bins = bins.len();
    let alpha = params.pool_accuracy(n_bins);
    let delta = params.pool_delta(n_bins);
    trace.pool_accuracy = Some(alpha);
    trace.pool_delta = Some(delta);
    let pools = build_pools(world, seed, n_bins, alpha, delta, mode)?;
    let (mut m, mut g) = partitions::init(bins.clone(), pools, &binned)?;
    trace.pools = m.pool_specs();
    trace.initial_errors = g.groups().map(|grp| grp.err.clone()).collect();
    trace.max_constituents = 1;
    let class_bound = size_class_count(n_bins);

    let mut t: u64 = 0;
    while let Some((selected, class, est_error)) = select_target(&g, params.error_threshold) {
        if t >= trace.t_max {
            return Err(Error::IterationLimit { t_max: trace.t_max });
        }
        let group = g.group(selected).expect("selected group exists").clone();
        let agg = m.aggregate(&group.bins)?;
        if agg.p_hat <= 0.0 {
            return Err(Error::EstimateFailure(format!(
                "aggregated probability estimate {} for group {} is not positive",
                agg.p_hat, selected.0
            )));
        }

        let mut z = group.pred.coords().to_vec();
        z[class] = (agg.e_hat[class] / agg.p_hat).min(1.0);
        let projected = project_simplex(&z)?;
        g.set_pred(selected, projected.clone())?;

        let level = round_down(&projected, lambda);
        let mut current = selected;
        let mut g_merge = None;
        if let Some(partner) = g.find_collision(&level, selected)? {
            let partner_group = g.group(partner).expect("partner exists").clone();
            let partner_agg = m.aggregate(&partner_group.bins)?;
            let (winner, moved, moved_bins) = if agg.p_hat <= partner_agg.p_hat {
                (
                    partner_group.pred.clone(),
                    MovedSide::Selected,
                    group.bins.clone(),
                )
            } else {
                (
                    projected.clone(),
                    MovedSide::Partner,
                    partner_group.bins.clone(),
                )
            };
            let merged = g.merge(selected, partner, winner)?;
            for &b in &moved_bins {
                trace.tau[b] += 1;
            }
            g_merge = Some(GMergeRecord {
                partner,
                merged,
                moved,
                p_selected: agg.p_hat,
                p_partner: partner_agg.p_hat,
                moved_bins,
            });
            current = merged;
        }

        let final_bins = g.group(current).expect("current group exists").bins.clone();
        let m_merges = m.merge_pass(&final_bins, &binned)?;
        let final_agg = m.aggregate(&final_bins)?;
        if final_agg.constituents > class_bound {
            return Err(Error::InvariantViolation(format!(
                "group of {} bins spans {} M groups, bound {}",
                final_bins.len(),
                final_agg.constituents,
                class_bound
            )));
        }
        trace.max_constituents = trace.max_constituents.max(final_agg.constituents);
        let final_pred = g.group(current).expect("current group exists").pred.clone();
        let final_err = final_agg.errors(&final_pred);
        g.set_err(current, final_err.clone())?;

        m.check_invariants()?;
        g.check_invariants(&m)?;

        trace.iterations.push(IterationRecord {
            t,
            group: selected,
            bins: group.bins,
            class,
            est_error,
            z,
            projected: projected.into_inner(),
            g_merge,
            m_merges,
            final_group: current,
            final_bins,
            final_pred: final_pred.into_inner(),
            final_err,
            constituents: final_agg.constituents,
        });
        t += 1;
    }

    let routing = g
        .groups()
        .flat_map(|grp| {
            grp.bins
                .iter()
                .map(|&b| (bins[b].clone(), grp.pred.clone()))
                .collect::<Vec<_>>()
        })
        .collect();
    trace.estimates = m.estimate_log().to_vec();
    trace.wall_time = started.elapsed();
    Ok(Calibration {
        predictor: CalibratedPredictor::new(lambda, f.clone(), routing),
        trace,
    })
}
