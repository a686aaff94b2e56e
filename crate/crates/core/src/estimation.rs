//! Sample-based estimates: empirical bin masses, and Laplace-noised answers to
//! adaptively chosen disjoint events on a shared sample pool.
//!
//! A [`DisjointQueryPool`] draws one sample set at construction and answers a
//! sequence of pairwise disjoint bin events. Each sample contributes to at most
//! one answer, so the ℓ1 sensitivity of the whole answer vector is `2/m` and
//! Laplace noise of scale `8/(m * alpha)` makes the pool `(alpha/4, 0)`
//! differentially private. That privacy is what lets later events depend on
//! earlier answers without fresh samples.

use std::collections::{BTreeMap, HashSet};

use rand::distr::{Distribution, Open01};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::simplex::LevelSet;
use crate::world::{draw_counts, BinnedPredictor, SampleCounts, World};

/// Empirical mass of every observed bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMassTable {
    #[serde(with = "entries")]
    estimates: BTreeMap<LevelSet, f64>,
    pool_size: u64,
}

/// Level-set keys are not strings, so the map travels as `[bin, mass]` pairs.
mod entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    use crate::simplex::LevelSet;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<LevelSet, f64>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<LevelSet, f64>, D::Error> {
        Ok(Vec::<(LevelSet, f64)>::deserialize(d)?
            .into_iter()
            .collect())
    }
}

impl BinMassTable {
    pub fn from_estimates(estimates: BTreeMap<LevelSet, f64>, pool_size: u64) -> Self {
        Self {
            estimates,
            pool_size,
        }
    }

    /// `mu_hat(v)`, zero for bins never observed.
    pub fn get(&self, v: &LevelSet) -> f64 {
        self.estimates.get(v).copied().unwrap_or(0.0)
    }

    pub fn pool_size(&self) -> u64 {
        self.pool_size
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LevelSet, f64)> {
        self.estimates.iter().map(|(v, &m)| (v, m))
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }
}

pub fn estimate_bin_masses(
    samples: &SampleCounts,
    binned: &BinnedPredictor,
) -> Result<BinMassTable> {
    let n = samples.total();
    if n == 0 {
        return Err(Error::ParameterOutOfRange(
            "bin masses need at least one sample".into(),
        ));
    }
    let mut counts: BTreeMap<LevelSet, u64> = BTreeMap::new();
    for x in 0..samples.n_features() {
        let c = samples.feature_count(x);
        if c > 0 {
            *counts.entry(binned.bin(x).clone()).or_default() += c;
        }
    }
    let estimates = counts
        .into_iter()
        .map(|(v, c)| (v, c as f64 / n as f64))
        .collect();
    Ok(BinMassTable {
        estimates,
        pool_size: n,
    })
}

fn check_unit_interval(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::ParameterOutOfRange(format!(
            "{name} = {value} must lie in (0, 1)"
        )))
    }
}

/// The two regime sizes `(m1, m2)` behind [`bin_mass_sample_size`]:
/// `m1 = ceil(ln(4 / (a d)) / (2 a^2))` covers heavy bins by Hoeffding and
/// `m2 = ceil((4 / (3 a)) ln(2 |V| / d))` covers light bins.
pub fn bin_mass_regimes(alpha1: f64, delta1: f64, n_levels: u128) -> Result<(u64, u64)> {
    check_unit_interval("alpha1", alpha1)?;
    check_unit_interval("delta1", delta1)?;
    if n_levels == 0 {
        return Err(Error::ParameterOutOfRange("|V| must be positive".into()));
    }
    let m1 = ((4.0 / (alpha1 * delta1)).ln() / (2.0 * alpha1 * alpha1)).ceil();
    let m2 = (4.0 / (3.0 * alpha1) * (2.0 * n_levels as f64 / delta1).ln()).ceil();
    Ok((m1 as u64, m2 as u64))
}

/// Samples needed so that every bin mass is within `alpha1` of the truth with
/// probability `1 - delta1`.
pub fn bin_mass_sample_size(alpha1: f64, delta1: f64, n_levels: u128) -> Result<u64> {
    let (m1, m2) = bin_mass_regimes(alpha1, delta1, n_levels)?;
    Ok(m1 + m2)
}

/// Pool size `ceil(32 ln(4 n d / delta) / alpha^2)` for `n` disjoint events of
/// dimension `d`.
pub fn pool_sample_size(
    max_events: usize,
    value_dim: usize,
    alpha: f64,
    delta: f64,
) -> Result<u64> {
    check_unit_interval("alpha", alpha)?;
    check_unit_interval("delta", delta)?;
    if max_events == 0 || value_dim == 0 {
        return Err(Error::ParameterOutOfRange(
            "pool needs at least one event of positive dimension".into(),
        ));
    }
    let m = 32.0 * (4.0 * max_events as f64 * value_dim as f64 / delta).ln() / (alpha * alpha);
    Ok(m.ceil() as u64)
}

/// Inverse-CDF draw from `Laplace(0, scale)`.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = Open01.sample(rng);
    let centered = u - 0.5;
    -scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    /// `phi = 1`, one answer per event.
    Probability,
    /// `phi = one-hot label`, `k` answers per event.
    MeanLabel,
}

/// Static description of a pool, reported alongside every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub name: String,
    pub kind: PoolKind,
    pub value_dim: usize,
    pub max_events: usize,
    pub alpha: f64,
    pub delta: f64,
    pub m: u64,
    pub noise_scale: f64,
}

impl PoolSpec {
    /// Ratio of the noise scale to the ℓ1 sensitivity `2/m`, i.e. the privacy
    /// parameter of the mechanism (`alpha/4` when the scale is `8/(m alpha)`).
    pub fn privacy_epsilon(&self) -> f64 {
        (2.0 / self.m as f64) / self.noise_scale
    }
}

#[derive(Debug)]
pub struct DisjointQueryPool {
    spec: PoolSpec,
    samples: SampleCounts,
    noise: StreamRng,
    queried: HashSet<LevelSet>,
    issued: usize,
}

impl DisjointQueryPool {
    /// A pool sized by [`pool_sample_size`]. Samples come from stream
    /// `data/<name>` and noise from `laplace/<name>` of `seed`.
    pub fn create(
        world: &World,
        seed: u64,
        name: &str,
        kind: PoolKind,
        max_events: usize,
        alpha: f64,
        delta: f64,
    ) -> Result<Self> {
        let value_dim = value_dim(kind, world.k());
        let m = pool_sample_size(max_events, value_dim, alpha, delta)?;
        Self::with_size(world, seed, name, kind, max_events, alpha, delta, m)
    }

    /// A pool with an explicit sample count `m`; the noise scale is still
    /// `8/(m alpha)`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_size(
        world: &World,
        seed: u64,
        name: &str,
        kind: PoolKind,
        max_events: usize,
        alpha: f64,
        delta: f64,
        m: u64,
    ) -> Result<Self> {
        check_unit_interval("alpha", alpha)?;
        check_unit_interval("delta", delta)?;
        if m == 0 || max_events == 0 {
            return Err(Error::ParameterOutOfRange(format!(
                "pool '{name}' needs m > 0 and at least one event"
            )));
        }
        let samples = draw_counts(world, &mut rng::stream(seed, &format!("data/{name}")), m);
        let spec = PoolSpec {
            name: name.to_string(),
            kind,
            value_dim: value_dim(kind, world.k()),
            max_events,
            alpha,
            delta,
            m,
            noise_scale: 8.0 / (m as f64 * alpha),
        };
        Ok(Self {
            spec,
            samples,
            noise: rng::stream(seed, &format!("laplace/{name}")),
            queried: HashSet::new(),
            issued: 0,
        })
    }

    pub fn spec(&self) -> &PoolSpec {
        &self.spec
    }

    pub fn queries_issued(&self) -> usize {
        self.issued
    }

    pub fn samples(&self) -> &SampleCounts {
        &self.samples
    }

    /// Noisy, clamped answer for the event `R(f(x)) in event`.
    ///
    /// Fails if the event overlaps any earlier event on this pool or if the
    /// pool's event budget is spent; the pool state is unchanged on failure.
    pub fn query(&mut self, event: &[LevelSet], binned: &BinnedPredictor) -> Result<Vec<f64>> {
        if self.issued >= self.spec.max_events {
            return Err(Error::QueryBudgetExceeded {
                pool: self.spec.name.clone(),
                budget: self.spec.max_events,
            });
        }
        if event.iter().any(|v| self.queried.contains(v)) {
            return Err(Error::OverlappingQuery {
                pool: self.spec.name.clone(),
            });
        }
        let event_set: HashSet<&LevelSet> = event.iter().collect();
        let k = self.samples.k();
        let mut sums = vec![0u64; self.spec.value_dim];
        for x in binned.features_in(&event_set) {
            match self.spec.kind {
                PoolKind::Probability => sums[0] += self.samples.feature_count(x),
                PoolKind::MeanLabel => {
                    for (j, s) in sums.iter_mut().enumerate().take(k) {
                        *s += self.samples.count(x, j);
                    }
                }
            }
        }
        let m = self.spec.m as f64;
        let answers = sums
            .into_iter()
            .map(|s| {
                let noisy = s as f64 / m + sample_laplace(&mut self.noise, self.spec.noise_scale);
                noisy.clamp(0.0, 1.0)
            })
            .collect();
        self.queried.extend(event.iter().cloned());
        self.issued += 1;
        Ok(answers)
    }
}

fn value_dim(kind: PoolKind, k: usize) -> usize {
    match kind {
        PoolKind::Probability => 1,
        PoolKind::MeanLabel => k,
    }
}
