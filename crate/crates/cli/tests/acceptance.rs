//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use mcal_cli::{report_json, run, trace_csv, OutputPaths, RunConfig, RunOutcome, ScenarioConfig};
use mcal_core::estimation::{DisjointQueryPool, PoolKind};
use mcal_core::partitions::size_class_count;
use mcal_core::simplex::{
    binomial, enumerate_levels, project_simplex, round_down, DEFAULT_ENUMERATION_CAP,
};
use mcal_core::world::uniform_simplex;
use mcal_core::{make_scenario, rng, Error, LevelSet, PNorm, ProbVector, SampleMode, Scenario};
use rand::Rng;
use rayon::prelude::*;

const SEEDS: u64 = 100;
const PASS_RATE: f64 = 0.85;
const EVENT_FAIL_RATE: f64 = 0.15;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- geometry

/// Greedy witness in units of `1/(2 lambda k)`, verified by integer flooring.
fn witness_exists(numerators: &[u32], lambda: u32) -> bool {
    let unit = 2 * numerators.len() as u64;
    let total = u64::from(lambda) * unit;
    let mut u: Vec<u64> = numerators.iter().map(|&a| u64::from(a) * unit).collect();
    let used: u64 = u.iter().sum();
    if used > total {
        return false;
    }
    let mut remaining = total - used;
    for (ui, &a) in u.iter_mut().zip(numerators) {
        if a < lambda {
            let add = remaining.min(unit - 1);
            *ui += add;
            remaining -= add;
        }
    }
    remaining == 0
        && u.iter()
            .zip(numerators)
            .all(|(&ui, &a)| ui / unit == u64::from(a))
}

fn brute_force_levels(lambda: u32, k: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; k];
    'outer: loop {
        if witness_exists(&cur, lambda) {
            out.push(cur.clone());
        }
        for i in (0..k).rev() {
            if cur[i] < lambda {
                cur[i] += 1;
                cur[i + 1..].iter_mut().for_each(|c| *c = 0);
                continue 'outer;
            }
        }
        return out;
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut pairs = 0;
    for total in 2..=12u32 {
        for lambda in 1..total {
            let k = (total - lambda) as usize;
            let fast: Vec<Vec<u32>> = match enumerate_levels(lambda, k, DEFAULT_ENUMERATION_CAP) {
                Ok(v) => v.iter().map(|l| l.numerators().to_vec()).collect(),
                Err(e) => return outcome(false, format!("lambda={lambda} k={k}: {e}")),
            };
            if fast != brute_force_levels(lambda, k) {
                return outcome(false, format!("mismatch at lambda={lambda} k={k}"));
            }
            let bound = binomial(u64::from(lambda) + k as u64, k as u64).unwrap();
            if fast.len() as u128 > bound {
                return outcome(false, format!("count above bound at lambda={lambda} k={k}"));
            }
            pairs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        secs < 10.0,
        format!("{pairs} (lambda, k) pairs match, {secs:.2}s"),
    )
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn grid_projection(z: &[f64], n: u32) -> Vec<f64> {
    let h = 1.0 / f64::from(n);
    let mut best = (f64::INFINITY, Vec::new());
    let mut consider = |u: Vec<f64>| {
        let d = dist2(&u, z);
        if d < best.0 {
            best = (d, u);
        }
    };
    match z.len() {
        2 => (0..=n).for_each(|i| consider(vec![f64::from(i) * h, f64::from(n - i) * h])),
        3 => {
            for i in 0..=n {
                for j in 0..=n - i {
                    consider(vec![
                        f64::from(i) * h,
                        f64::from(j) * h,
                        f64::from(n - i - j) * h,
                    ]);
                }
            }
        }
        _ => unreachable!(),
    }
    best.1
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let failures: usize = (0..10_000u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(i, "acceptance/projection");
            let k = r.random_range(1..=20usize);
            let z: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..=2.0)).collect();
            let Ok(pi) = project_simplex(&z) else {
                return 1;
            };
            let sum: f64 = pi.coords().iter().sum();
            if (sum - 1.0).abs() > 1e-9 || pi.coords().iter().any(|&c| c < -1e-9) {
                return 1;
            }
            let own = dist2(pi.coords(), &z);
            let beaten = (0..1000).any(|_| {
                let u = uniform_simplex(&mut r, k);
                dist2(u.coords(), &z) < own - 1e-12
            });
            usize::from(beaten)
        })
        .sum();
    let grid_failures: usize = (0..40u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(i, "acceptance/projection-grid");
            let k = 2 + (i % 2) as usize;
            let z: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..=2.0)).collect();
            let pi = project_simplex(&z).unwrap();
            let grid = grid_projection(&z, 2000);
            let linf = pi
                .coords()
                .iter()
                .zip(&grid)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            usize::from(linf > 1e-3)
        })
        .sum();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && grid_failures == 0 && secs < 30.0,
        format!(
            "{failures}/10000 random failures, {grid_failures}/40 grid-oracle failures, {secs:.2}s"
        ),
    )
}

// ------------------------------------------------------------ Monte Carlo

struct Suite {
    label: &'static str,
    p: PNorm,
    runs: Vec<Result<RunOutcome, String>>,
}

impl Suite {
    fn new(label: &'static str, p: PNorm, epsilon: f64) -> Self {
        let runs = (0..SEEDS)
            .into_par_iter()
            .map(|seed| {
                let config = RunConfig {
                    scenario: ScenarioConfig {
                        name: Scenario::RandomMiscalibrated,
                        k: 3,
                        features: 40,
                    },
                    p,
                    epsilon,
                    delta: 0.1,
                    seed,
                    sample_mode: SampleMode::Auto,
                    output: OutputPaths::default(),
                };
                mcal_cli::execute(&config).map_err(|e| format!("seed {seed}: {e:#}"))
            })
            .collect();
        Suite { label, p, runs }
    }

    fn ok(&self) -> impl Iterator<Item = &RunOutcome> {
        self.runs.iter().filter_map(|r| r.as_ref().ok())
    }

    fn errors(&self) -> Vec<&String> {
        self.runs.iter().filter_map(|r| r.as_ref().err()).collect()
    }

    /// Fraction of all runs (failed runs count against) satisfying `pred`.
    fn rate(&self, pred: impl Fn(&RunOutcome) -> bool) -> f64 {
        self.ok().filter(|o| pred(o)).count() as f64 / self.runs.len() as f64
    }
}

fn criterion_3(inf: &Suite) -> Outcome {
    let rate = inf.rate(|o| {
        let beta = o.report.params.beta;
        o.report
            .calibrated_table
            .table
            .iter()
            .all(|row| row.errors.iter().all(|&e| e <= beta))
    });
    outcome(
        rate >= PASS_RATE,
        format!(
            "{}: per-bin errors <= beta in {:.0}% of runs",
            inf.label,
            100.0 * rate
        ),
    )
}

fn criterion_4(suites: &[&Suite]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in suites {
        let rate = s.rate(|o| {
            let params = &o.report.params;
            let table = &o.report.calibrated_table.table;
            let entries = table.iter().flat_map(|r| r.errors.iter().copied());
            let (power, err) = match params.p {
                PNorm::Infinity => {
                    let m = entries.fold(0.0, f64::max);
                    (m, m)
                }
                p => {
                    let e = p.value();
                    let power: f64 = entries.map(|x| x.powf(e)).sum();
                    (power, power.powf(1.0 / e))
                }
            };
            power <= params.lp_bound() && err <= params.epsilon
        });
        pass &= rate >= PASS_RATE;
        parts.push(format!("{} {:.0}%", s.label, 100.0 * rate));
        debug_assert_eq!(s.p, s.ok().next().map_or(s.p, |o| o.report.params.p));
    }
    outcome(
        pass,
        format!("lp bound and Err_p <= epsilon: {}", parts.join(", ")),
    )
}

fn criterion_5(suites: &[&Suite]) -> Outcome {
    let mut violations = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut total = 0;
    for s in suites {
        for o in s.ok() {
            let params = &o.report.params;
            let budget = 4.0 / f64::from(params.lambda) * (1.0 + (36.0 / params.beta).log2());
            let increase = mcal_core::evaluator::exact_sq_error(&o.world, &o.calibrated)
                - mcal_core::evaluator::exact_sq_error(&o.world, &o.base);
            worst = worst.max(increase / budget);
            violations += usize::from(increase > budget);
            total += 1;
        }
    }
    outcome(
        violations == 0 && total > 0,
        format!("{violations}/{total} runs over budget, worst increase/budget {worst:.3}"),
    )
}

fn criterion_6(suites: &[&Suite]) -> Outcome {
    let mut violations = 0;
    let mut max_iter_frac: f64 = 0.0;
    let mut max_tau = 0;
    for s in suites {
        for o in s.ok() {
            let params = &o.report.params;
            let lambda = f64::from(params.lambda);
            let b = params.beta;
            let t_max = ((9.0 + 36.0 / lambda * (36.0 / b).log2()) / (b * b)).ceil() as u64;
            let trace = &o.calibration.trace;
            let iters = trace.iterations.len() as u64;
            let tau = trace.tau.iter().copied().max().unwrap_or(0);
            max_iter_frac = max_iter_frac.max(iters as f64 / t_max as f64);
            max_tau = max_tau.max(tau);
            violations += usize::from(iters > t_max || f64::from(tau) > (36.0 / b).log2());
        }
    }
    outcome(
        violations == 0,
        format!(
            "{violations} violations; max iterations/t_max {max_iter_frac:.4}, max tau {max_tau}"
        ),
    )
}

/// Rebuilds both partitions from the trace alone and checks every structural
/// invariant after each iteration.
fn replay_structures(o: &RunOutcome) -> Result<(), String> {
    let trace = &o.calibration.trace;
    let bins = &trace.high_probability_bins;
    let n = bins.len();
    if n == 0 {
        return Ok(());
    }
    let lambda = trace.params.lambda;
    let bound = (n as f64).log2().floor() as usize + 1;

    let mut history: BTreeMap<usize, Vec<BTreeSet<usize>>> = BTreeMap::new();
    for rec in &trace.estimates {
        let size = rec.bins.len();
        if !size.is_power_of_two() {
            return Err(format!("estimate over {size} bins"));
        }
        let set: BTreeSet<usize> = rec.bins.iter().copied().collect();
        let earlier = history.entry(size).or_default();
        if earlier.iter().any(|e| !e.is_disjoint(&set)) {
            return Err(format!("overlapping estimates of size {size}"));
        }
        earlier.push(set);
    }

    let mut m: BTreeMap<u32, BTreeSet<usize>> =
        (0..n).map(|b| (b as u32, BTreeSet::from([b]))).collect();
    let mut g: BTreeMap<u32, (BTreeSet<usize>, Vec<f64>)> = (0..n)
        .map(|b| {
            (
                b as u32,
                (
                    BTreeSet::from([b]),
                    mcal_core::simplex::canonical(&bins[b]).into_inner(),
                ),
            )
        })
        .collect();
    for it in &trace.iterations {
        if let Some(gm) = &it.g_merge {
            let a = g.remove(&it.group.0).ok_or("missing selected group")?;
            let b = g.remove(&gm.partner.0).ok_or("missing partner group")?;
            let union: BTreeSet<usize> = a.0.union(&b.0).copied().collect();
            g.insert(gm.merged.0, (union, Vec::new()));
        }
        let entry = g.get_mut(&it.final_group.0).ok_or("missing final group")?;
        entry.1 = it.final_pred.clone();
        if entry.0.iter().copied().collect::<Vec<_>>() != it.final_bins {
            return Err(format!("t={}: final bins disagree with replay", it.t));
        }
        for mm in &it.m_merges {
            let a = m.remove(&mm.left.0).ok_or("missing M group")?;
            let b = m.remove(&mm.right.0).ok_or("missing M group")?;
            if a.len() != b.len() || 2 * a.len() != mm.size {
                return Err(format!("t={}: unequal M merge", it.t));
            }
            m.insert(mm.merged.0, a.union(&b).copied().collect());
        }
        if m.values().any(|s| !s.len().is_power_of_two()) {
            return Err(format!("t={}: M group of non power-of-two size", it.t));
        }
        for (gb, _) in g.values() {
            let inside = m.values().filter(|s| s.is_subset(gb)).count();
            let covered: usize = m
                .values()
                .filter(|s| s.is_subset(gb))
                .map(|s| s.len())
                .sum();
            if covered != gb.len() {
                return Err(format!("t={}: G group not a union of M groups", it.t));
            }
            if inside > bound {
                return Err(format!("t={}: {inside} constituents > {bound}", it.t));
            }
        }
        let mut levels = HashSet::new();
        for (_, pred) in g.values() {
            let pred = ProbVector::new(pred.clone()).map_err(|e| e.to_string())?;
            if !levels.insert(round_down(&pred, lambda)) {
                return Err(format!("t={}: two G groups share a level set", it.t));
            }
        }
    }
    if trace.max_constituents > bound {
        return Err("max constituents above bound".into());
    }
    Ok(())
}

fn criterion_7(suites: &[&Suite]) -> Outcome {
    let mut violations = Vec::new();
    let mut runs = 0;
    for s in suites {
        for e in s.errors() {
            if e.contains("invariant") {
                violations.push(e.clone());
            }
        }
        for o in s.ok() {
            runs += 1;
            if let Err(e) = replay_structures(o) {
                violations.push(format!("seed {}: {e}", o.report.seed));
            }
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "{runs} traces replayed, {} violations {:?}",
            violations.len(),
            violations.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn criterion_8(suites: &[&Suite]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in suites {
        let total = s.runs.len() as f64;
        let ok: Vec<&RunOutcome> = s.ok().collect();
        let failed_runs = s.runs.len() - ok.len();
        let a1 = ok.iter().filter(|o| !o.report.audit.bin_mass_ok).count() + failed_runs;
        let a23 = ok.iter().filter(|o| !o.report.audit.pool_ok).count() + failed_runs;
        let (r1, r23) = (a1 as f64 / total, a23 as f64 / total);
        pass &= r1 <= EVENT_FAIL_RATE && r23 <= EVENT_FAIL_RATE;
        parts.push(format!(
            "{} A1 {:.0}% A2/A3 {:.0}%",
            s.label,
            100.0 * r1,
            100.0 * r23
        ));
    }
    outcome(pass, format!("failure rates: {}", parts.join(", ")))
}

fn criterion_9(suites: &[&Suite]) -> Outcome {
    let mut checked = 0;
    let mut bad = 0;
    for s in suites {
        for o in s.ok() {
            let trace = &o.calibration.trace;
            let n = trace.high_probability_bins.len();
            if n == 0 {
                continue;
            }
            let classes = ((n as f64).log2().floor() as usize + 1) as f64;
            let alpha = trace.params.beta / (36.0 * classes);
            let delta = trace.params.delta / (3.0 * classes);
            for pool in &trace.pools {
                let dim = match pool.kind {
                    PoolKind::Probability => 1.0,
                    PoolKind::MeanLabel => 3.0,
                };
                let m =
                    (32.0 * (4.0 * n as f64 * dim / delta).ln() / (alpha * alpha)).ceil() as u64;
                let scale = 8.0 / (m as f64 * alpha);
                checked += 1;
                let rel = ((pool.noise_scale - scale) / scale).abs();
                bad += usize::from(pool.m != m || rel > 1e-15 || pool.max_events != n);
            }
        }
    }

    let (world, f) = make_scenario(Scenario::RandomMiscalibrated, 3, 40, 0).unwrap();
    let binned = f.binned(4);
    let levels: Vec<LevelSet> = {
        let mut seen: Vec<LevelSet> = binned.bins().to_vec();
        seen.sort();
        seen.dedup();
        seen
    };
    let mut pool = DisjointQueryPool::create(
        &world,
        0,
        "acceptance",
        PoolKind::MeanLabel,
        levels.len(),
        0.05,
        0.1,
    )
    .unwrap();
    let first = pool.query(&levels[..1], &binned);
    let overlap = pool.query(&levels[..2], &binned);
    let rejected = first.is_ok() && matches!(overlap, Err(Error::OverlappingQuery { .. }));
    outcome(
        bad == 0 && checked > 0 && rejected && size_class_count(levels.len()) >= 1,
        format!(
            "{checked} pools checked, {bad} mismatches; overlapping query rejected: {rejected}"
        ),
    )
}

fn criterion_10() -> Outcome {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::from_file(&golden.join("config.json")).unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        config.output = OutputPaths {
            report: Some(dir.path().join(format!("report{i}.json"))),
            trace: Some(dir.path().join(format!("trace{i}.csv"))),
            predictor: None,
        };
        let o = run(&config).unwrap();
        let report = std::fs::read(config.output.report.as_ref().unwrap()).unwrap();
        let trace = std::fs::read(config.output.trace.as_ref().unwrap()).unwrap();
        assert_eq!(report, report_json(&o.report).into_bytes());
        assert_eq!(trace, trace_csv(&o.calibration.trace).into_bytes());
        outputs.push((report, trace));
    }
    let repeat = outputs[0] == outputs[1];
    let read = |name: &str| std::fs::read(golden.join(name)).unwrap();
    let report_golden = outputs[0].0 == read("report.json");
    let trace_golden = outputs[0].1 == read("trace.csv");
    let levels = Command::new(env!("CARGO_BIN_EXE_mcal"))
        .args(["levels", "--lambda", "4", "--k", "3"])
        .output()
        .unwrap();
    let levels_golden = levels.status.success() && levels.stdout == read("levels.txt");
    outcome(
        repeat && report_golden && trace_golden && levels_golden,
        format!(
            "repeat identical: {repeat}; golden report: {report_golden}, trace: {trace_golden}, levels: {levels_golden}"
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("C1 geometry oracle equivalence", criterion_1()));
    results.push(("C2 projection correctness", criterion_2()));

    let start = Instant::now();
    let inf = Suite::new("p=inf eps=0.25", PNorm::Infinity, 0.25);
    let p2 = Suite::new("p=2 eps=0.3", PNorm::integer(2), 0.3);
    let both = [&inf, &p2];
    let mc_secs = start.elapsed().as_secs_f64();
    for s in both {
        for e in s.errors() {
            println!("  run error ({}): {e}", s.label);
        }
    }
    results.push(("C3 per-bin error bound", criterion_3(&inf)));
    results.push(("C4 aggregate lp bound", criterion_4(&both)));
    results.push(("C5 squared-error budget", criterion_5(&both)));
    results.push(("C6 termination and tau bounds", criterion_6(&both)));
    results.push(("C7 structure invariants", criterion_7(&both)));
    results.push(("C8 estimation events", criterion_8(&both)));
    results.push(("C9 mechanism structure", criterion_9(&both)));
    results.push(("C10 determinism and golden files", criterion_10()));

    println!("  Monte-Carlo suites: 2 x {SEEDS} seeds in {mc_secs:.2}s");
    let mut failed = 0;
    for (name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
