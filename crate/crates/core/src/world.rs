//! Finite synthetic data distributions with exact ground truth.
//!
//! Features are abstract indices `0..n_features`. A [`World`] fixes the mass of
//! each feature and the conditional label distribution at it; a [`Predictor`]
//! is a lookup table of probability vectors.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Binomial, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::simplex::{project_simplex, round_down, LevelSet, ProbVector};

const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    k: usize,
    mass: Vec<f64>,
    conditional: Vec<ProbVector>,
}

impl World {
    pub fn new(k: usize, mass: Vec<f64>, conditional: Vec<ProbVector>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidWorld("k must be positive".into()));
        }
        if mass.is_empty() {
            return Err(Error::InvalidWorld("no feature points".into()));
        }
        if mass.len() != conditional.len() {
            return Err(Error::InvalidWorld(format!(
                "{} masses but {} conditionals",
                mass.len(),
                conditional.len()
            )));
        }
        if let Some(m) = mass.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(Error::InvalidWorld(format!(
                "negative or non-finite mass {m}"
            )));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidWorld(format!("masses sum to {total}")));
        }
        if let Some(c) = conditional.iter().find(|c| c.k() != k) {
            return Err(Error::InvalidWorld(format!(
                "conditional of dimension {} in a k = {k} world",
                c.k()
            )));
        }
        Ok(Self {
            k,
            mass,
            conditional,
        })
    }

    /// Single feature point carrying all the mass.
    pub fn one_point(conditional: ProbVector) -> Self {
        Self {
            k: conditional.k(),
            mass: vec![1.0],
            conditional: vec![conditional],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_features(&self) -> usize {
        self.mass.len()
    }

    pub fn mass(&self, x: usize) -> f64 {
        self.mass[x]
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn conditional(&self, x: usize) -> &ProbVector {
        &self.conditional[x]
    }

    pub fn conditionals(&self) -> &[ProbVector] {
        &self.conditional
    }

    /// Probability of the pair `(x, y = label)`.
    pub fn joint(&self, x: usize, label: usize) -> f64 {
        self.mass[x] * self.conditional[x][label]
    }
}

/// A `k`-class predictor over the features of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Predictor {
    table: Vec<ProbVector>,
}

impl Predictor {
    pub fn new(table: Vec<ProbVector>) -> Result<Self> {
        let Some(first) = table.first() else {
            return Err(Error::InvalidPredictor("empty table".into()));
        };
        let k = first.k();
        if table.iter().any(|row| row.k() != k) {
            return Err(Error::InvalidPredictor(
                "rows of differing dimension".into(),
            ));
        }
        Ok(Self { table })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let table = rows
            .into_iter()
            .map(ProbVector::new)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::InvalidPredictor(e.to_string()))?;
        Self::new(table)
    }

    pub fn predict(&self, x: usize) -> &ProbVector {
        &self.table[x]
    }

    pub fn rows(&self) -> &[ProbVector] {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn k(&self) -> usize {
        self.table[0].k()
    }

    pub fn check_compatible(&self, world: &World) -> Result<()> {
        if self.len() != world.n_features() || self.k() != world.k() {
            return Err(Error::InvalidPredictor(format!(
                "predictor is {} x {}, world is {} x {}",
                self.len(),
                self.k(),
                world.n_features(),
                world.k()
            )));
        }
        Ok(())
    }

    /// Level set `R(f(x))` of every feature.
    pub fn binned(&self, lambda: u32) -> BinnedPredictor {
        BinnedPredictor {
            lambda,
            bins: self.table.iter().map(|u| round_down(u, lambda)).collect(),
        }
    }
}

/// Precomputed `R(f(x))` for every feature `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedPredictor {
    lambda: u32,
    bins: Vec<LevelSet>,
}

impl BinnedPredictor {
    pub fn lambda(&self) -> u32 {
        self.lambda
    }

    pub fn bin(&self, x: usize) -> &LevelSet {
        &self.bins[x]
    }

    pub fn bins(&self) -> &[LevelSet] {
        &self.bins
    }

    /// Features whose bin lies in `event`.
    pub fn features_in<'a>(
        &'a self,
        event: &'a HashSet<&LevelSet>,
    ) -> impl Iterator<Item = usize> + 'a {
        self.bins
            .iter()
            .enumerate()
            .filter(move |(_, b)| event.contains(b))
            .map(|(x, _)| x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sample {
    pub feature: usize,
    pub label: usize,
}

impl Sample {
    pub fn one_hot(&self, k: usize) -> ProbVector {
        ProbVector::one_hot(k, self.label)
    }
}

/// A multiset of samples stored as counts per `(feature, label)` cell.
///
/// Every estimate in the algorithm is a function of the empirical
/// distribution, so this is a sufficient statistic for an i.i.d. draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleCounts {
    k: usize,
    counts: Vec<u64>,
    total: u64,
}

impl SampleCounts {
    pub fn empty(n_features: usize, k: usize) -> Self {
        Self {
            k,
            counts: vec![0; n_features * k],
            total: 0,
        }
    }

    pub fn from_samples(n_features: usize, k: usize, samples: &[Sample]) -> Self {
        let mut out = Self::empty(n_features, k);
        for s in samples {
            out.counts[s.feature * k + s.label] += 1;
            out.total += 1;
        }
        out
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_features(&self) -> usize {
        self.counts.len() / self.k
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, x: usize, label: usize) -> u64 {
        self.counts[x * self.k + label]
    }

    pub fn feature_count(&self, x: usize) -> u64 {
        self.counts[x * self.k..(x + 1) * self.k].iter().sum()
    }

    /// Nonzero cells as `(feature, label, count)`.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        let k = self.k;
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(i, &c)| (i / k, i % k, c))
    }
}

/// `n` i.i.d. samples from the world.
pub fn draw<R: Rng + ?Sized>(world: &World, rng: &mut R, n: usize) -> Vec<Sample> {
    if n == 0 {
        return Vec::new();
    }
    let features = WeightedIndex::new(world.masses()).expect("world masses are validated");
    let labels: Vec<Option<WeightedIndex<f64>>> = world
        .conditionals()
        .iter()
        .map(|c| WeightedIndex::new(c.coords()).ok())
        .collect();
    (0..n)
        .map(|_| {
            let feature = features.sample(rng);
            let label = labels[feature]
                .as_ref()
                .expect("feature with positive mass has a valid conditional")
                .sample(rng);
            Sample { feature, label }
        })
        .collect()
}

/// An i.i.d. draw of `n` samples, returned as cell counts.
///
/// Sampled as a multinomial over the `(feature, label)` cells by sequential
/// conditional binomials, so the cost is independent of `n`.
pub fn draw_counts<R: Rng + ?Sized>(world: &World, rng: &mut R, n: u64) -> SampleCounts {
    let k = world.k();
    let mut out = SampleCounts::empty(world.n_features(), k);
    out.total = n;
    let cells = world.n_features() * k;
    let Some(last) = (0..cells).rev().find(|&c| world.joint(c / k, c % k) > 0.0) else {
        return out;
    };
    let mut remaining_n = n;
    let mut remaining_p = 1.0_f64;
    for cell in 0..=last {
        if remaining_n == 0 {
            break;
        }
        let p = world.joint(cell / k, cell % k);
        let c = if cell == last {
            remaining_n
        } else if p <= 0.0 {
            0
        } else {
            let q = p / remaining_p;
            if q >= 1.0 {
                remaining_n
            } else {
                Binomial::new(remaining_n, q)
                    .expect("probability within [0, 1]")
                    .sample(rng)
            }
        };
        out.counts[cell] = c;
        remaining_n -= c;
        remaining_p -= p;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Perfect,
    Overconfident,
    Shifted,
    RandomMiscalibrated,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Perfect,
        Scenario::Overconfident,
        Scenario::Shifted,
        Scenario::RandomMiscalibrated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Perfect => "perfect",
            Scenario::Overconfident => "overconfident",
            Scenario::Shifted => "shifted",
            Scenario::RandomMiscalibrated => "random-miscalibrated",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Weight on the argmax vertex for the `overconfident` scenario.
pub const OVERCONFIDENT_PULL: f64 = 0.75;
/// Magnitude of the class-0 bias for the `shifted` scenario.
pub const SHIFT_BIAS: f64 = 0.2;

/// Uniform draw from the simplex (flat Dirichlet).
pub fn uniform_simplex<R: Rng + ?Sized>(rng: &mut R, k: usize) -> ProbVector {
    let mut e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.iter_mut().for_each(|c| *c /= total);
    ProbVector::new(e).expect("normalized exponentials")
}

/// `f` for a given scenario on top of an existing world.
pub fn scenario_predictor<R: Rng + ?Sized>(
    scenario: Scenario,
    world: &World,
    rng: &mut R,
) -> Predictor {
    let k = world.k();
    let table = world
        .conditionals()
        .iter()
        .map(|c| match scenario {
            Scenario::Perfect => c.clone(),
            Scenario::Overconfident => {
                let top = c.argmax();
                let coords = c
                    .coords()
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        (1.0 - OVERCONFIDENT_PULL) * p
                            + if j == top { OVERCONFIDENT_PULL } else { 0.0 }
                    })
                    .collect();
                ProbVector::new(coords).expect("convex combination")
            }
            Scenario::Shifted => {
                let z: Vec<f64> = c
                    .coords()
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        if j == 0 {
                            p + SHIFT_BIAS
                        } else {
                            p - SHIFT_BIAS / (k - 1).max(1) as f64
                        }
                    })
                    .collect();
                project_simplex(&z).expect("finite input")
            }
            Scenario::RandomMiscalibrated => uniform_simplex(rng, k),
        })
        .collect();
    Predictor { table }
}

/// A reproducible world and initial predictor for a named scenario.
///
/// Masses and conditionals are flat-Dirichlet draws from the `scenario`
/// stream of `seed`.
pub fn make_scenario(
    scenario: Scenario,
    k: usize,
    n_features: usize,
    seed: u64,
) -> Result<(World, Predictor)> {
    if k < 2 {
        return Err(Error::ParameterOutOfRange(format!(
            "k = {k}, need at least 2 classes"
        )));
    }
    if n_features == 0 {
        return Err(Error::ParameterOutOfRange(
            "n_features must be positive".into(),
        ));
    }
    let mut rng = rng::stream(seed, "scenario");
    let mass = uniform_simplex(&mut rng, n_features).into_inner();
    let conditional = (0..n_features)
        .map(|_| uniform_simplex(&mut rng, k))
        .collect();
    let world = World::new(k, mass, conditional)?;
    let f = scenario_predictor(scenario, &world, &mut rng);
    Ok((world, f))
}

/// Exact probability of an event on bins and the label mass inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStats {
    /// `P[R(f(x)) in bins]`
    pub mass: f64,
    /// `E[y_j * 1[R(f(x)) in bins]]` for each class `j`.
    pub mean_label: Vec<f64>,
}

pub fn exact_event_stats<'a, I>(world: &World, binned: &BinnedPredictor, bins: I) -> EventStats
where
    I: IntoIterator<Item = &'a LevelSet>,
{
    let event: HashSet<&LevelSet> = bins.into_iter().collect();
    let mut mass = 0.0;
    let mut mean_label = vec![0.0; world.k()];
    for x in binned.features_in(&event) {
        mass += world.mass(x);
        for (j, m) in mean_label.iter_mut().enumerate() {
            *m += world.joint(x, j);
        }
    }
    EventStats { mass, mean_label }
}

/// On-disk form of a world plus predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDocument {
    pub k: usize,
    pub masses: Vec<f64>,
    pub conditionals: Vec<Vec<f64>>,
    pub predictor: Vec<Vec<f64>>,
}

impl WorldDocument {
    pub fn from_parts(world: &World, f: &Predictor) -> Self {
        Self {
            k: world.k(),
            masses: world.masses().to_vec(),
            conditionals: world
                .conditionals()
                .iter()
                .map(|c| c.coords().to_vec())
                .collect(),
            predictor: f.rows().iter().map(|r| r.coords().to_vec()).collect(),
        }
    }

    pub fn into_parts(self) -> Result<(World, Predictor)> {
        let conditional = self
            .conditionals
            .into_iter()
            .map(ProbVector::new)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::InvalidWorld(e.to_string()))?;
        let world = World::new(self.k, self.masses, conditional)?;
        let f = Predictor::from_rows(self.predictor)?;
        f.check_compatible(&world)?;
        Ok((world, f))
    }
}
