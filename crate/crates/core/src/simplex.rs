//! Geometry of the discretized probability simplex.
//!
//! A prediction `u` in the simplex is binned by rounding every coordinate down
//! to a multiple of `1/lambda`. The set of vectors reachable this way is the
//! level-set family `V(lambda, k)`; it has at most `C(lambda + k, k)` members,
//! which is polynomial in `k` for a fixed `lambda`, unlike the full grid.
//!
//! Level sets are stored as integer numerators over `lambda` so they can be
//! hashed and compared exactly.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for every simplex membership check.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Slack added before flooring in [`round_down`] so that coordinates which are
/// exact multiples of `1/lambda` up to float error land in the intended cell.
const FLOOR_SNAP: f64 = 1e-9;

/// Default cap on `C(lambda + k, k)` accepted by [`enumerate_levels`].
pub const DEFAULT_ENUMERATION_CAP: u128 = 5_000_000;

/// A point of the probability simplex: `k` nonnegative coordinates summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidProbVector("empty vector".into()));
        }
        let mut sum = 0.0;
        for (i, &c) in coords.iter().enumerate() {
            if !c.is_finite() || !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&c) {
                return Err(Error::InvalidProbVector(format!(
                    "coordinate {i} = {c} outside [0, 1]"
                )));
            }
            sum += c;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidProbVector(format!(
                "coordinates sum to {sum}, not 1"
            )));
        }
        Ok(Self(coords))
    }

    /// The `j`-th vertex of the simplex in dimension `k`.
    pub fn one_hot(k: usize, j: usize) -> Self {
        assert!(j < k, "class {j} out of range for k = {k}");
        let mut coords = vec![0.0; k];
        coords[j] = 1.0;
        Self(coords)
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0);
        Self(vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest coordinate, ties toward the smaller index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.0.iter().enumerate() {
            if c > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn linf_distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Self::new(coords)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A member of `V(lambda, k)`: coordinates `numerators[i] / lambda`.
///
/// Ordering is lexicographic on the numerators (all level sets used together
/// share one `lambda`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LevelSet {
    lambda: u32,
    numerators: Vec<u32>,
}

impl LevelSet {
    /// Builds a level set, checking membership in `V(lambda, k)`.
    pub fn new(numerators: Vec<u32>, lambda: u32) -> Result<Self> {
        if lambda == 0 {
            return Err(Error::InvalidLevelSet("lambda must be positive".into()));
        }
        if numerators.is_empty() {
            return Err(Error::InvalidLevelSet("empty numerator vector".into()));
        }
        if let Some(&a) = numerators.iter().find(|&&a| a > lambda) {
            return Err(Error::InvalidLevelSet(format!(
                "numerator {a} exceeds lambda = {lambda}"
            )));
        }
        let k = numerators.len();
        let v = Self { lambda, numerators };
        if !is_member(&v.numerators, lambda) {
            return Err(Error::NotMember(v, lambda, k));
        }
        Ok(v)
    }

    /// Skips the membership check; callers guarantee the invariants.
    fn from_raw(numerators: Vec<u32>, lambda: u32) -> Self {
        debug_assert!(is_member(&numerators, lambda));
        Self { lambda, numerators }
    }

    pub fn lambda(&self) -> u32 {
        self.lambda
    }

    pub fn k(&self) -> usize {
        self.numerators.len()
    }

    pub fn numerators(&self) -> &[u32] {
        &self.numerators
    }

    pub fn coord(&self, i: usize) -> f64 {
        f64::from(self.numerators[i]) / f64::from(self.lambda)
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.k()).map(|i| self.coord(i)).collect()
    }

    pub fn numerator_sum(&self) -> u64 {
        self.numerators.iter().map(|&a| u64::from(a)).sum()
    }

    /// Numerators joined by `sep`, e.g. `0:1:3`.
    pub fn to_numerator_string(&self, sep: &str) -> String {
        self.numerators
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(sep)
    }
}

impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})/{}", self.to_numerator_string(","), self.lambda)
    }
}

/// Closed-form membership test on integer numerators over `lambda`.
///
/// The half-open witness box `prod [v_i, v_i + 1/lambda)` meets the simplex iff
/// `sum(v) <= 1` and `sum(v) + k/lambda > 1`.
pub fn is_member(numerators: &[u32], lambda: u32) -> bool {
    if lambda == 0 || numerators.is_empty() || numerators.iter().any(|&a| a > lambda) {
        return false;
    }
    let sum: u64 = numerators.iter().map(|&a| u64::from(a)).sum();
    let lambda = u64::from(lambda);
    sum <= lambda && sum + numerators.len() as u64 > lambda
}

/// Coordinatewise floor of `u` onto the `1/lambda` grid.
pub fn round_down(u: &ProbVector, lambda: u32) -> LevelSet {
    assert!(lambda >= 1, "lambda must be positive");
    let scale = f64::from(lambda);
    let numerators = u
        .coords()
        .iter()
        .map(|&c| {
            let cell = (c * scale + FLOOR_SNAP).floor().max(0.0);
            (cell as u32).min(lambda)
        })
        .collect();
    LevelSet::from_raw(numerators, lambda)
}

/// The equal-spread representative of the closest lift of `v` back into the
/// simplex: `v + (d/k) * 1` with `d = 1 - sum(v)`.
///
/// It attains the minimal ℓ∞ distance `d/k` among all `u` with
/// `round_down(u) == v`.
pub fn canonical(v: &LevelSet) -> ProbVector {
    let k = v.k() as f64;
    let lambda = f64::from(v.lambda());
    let deficit = v.lambda() as f64 - v.numerator_sum() as f64;
    let coords = v
        .numerators()
        .iter()
        .map(|&a| (f64::from(a) + deficit / k) / lambda)
        .collect();
    ProbVector(coords)
}

/// Like [`canonical`] but for raw numerators that have not been validated.
pub fn canonical_checked(numerators: &[u32], lambda: u32) -> Result<ProbVector> {
    let v = LevelSet::new(numerators.to_vec(), lambda)?;
    Ok(canonical(&v))
}

/// Euclidean projection onto the simplex by sort-and-threshold.
///
/// Returns `max(z_i - theta, 0)` where `theta` makes the result sum to one.
pub fn project_simplex(z: &[f64]) -> Result<ProbVector> {
    if z.is_empty() {
        return Err(Error::InvalidProbVector("empty vector".into()));
    }
    if z.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let candidate = (cumulative - 1.0) / (i + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    let coords = z.iter().map(|&c| (c - theta).max(0.0)).collect();
    Ok(ProbVector(coords))
}

/// `C(n, r)` in `u128`, or `None` on overflow.
pub fn binomial(n: u64, r: u64) -> Option<u128> {
    if r > n {
        return Some(0);
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

/// `|V(lambda, k)|` without enumerating: vectors of `k` nonnegative integers
/// with sum `s` in `(lambda - k, lambda]` (the per-coordinate cap is implied).
pub fn count_levels(lambda: u32, k: usize) -> Option<u128> {
    if lambda == 0 || k == 0 {
        return Some(0);
    }
    let lo = (i64::from(lambda) - k as i64 + 1).max(0) as u64;
    let mut total: u128 = 0;
    for s in lo..=u64::from(lambda) {
        total = total.checked_add(binomial(s + k as u64 - 1, k as u64 - 1)?)?;
    }
    Some(total)
}

/// All members of `V(lambda, k)` in lexicographic order of numerators.
///
/// Refuses when the upper bound `C(lambda + k, k)` exceeds `cap`.
pub fn enumerate_levels(lambda: u32, k: usize, cap: u128) -> Result<Vec<LevelSet>> {
    if lambda == 0 || k == 0 {
        return Err(Error::ParameterOutOfRange(format!(
            "lambda = {lambda} and k = {k} must both be positive"
        )));
    }
    let bound = binomial(u64::from(lambda) + k as u64, k as u64).unwrap_or(u128::MAX);
    if bound > cap {
        return Err(Error::EnumerationTooLarge {
            lambda,
            k,
            bound,
            cap,
        });
    }

    // Sums must lie in (lambda - k, lambda].
    let min_sum = (i64::from(lambda) - k as i64 + 1).max(0) as u32;
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(k);
    enumerate_rec(lambda, k, min_sum, 0, &mut prefix, &mut out);
    Ok(out)
}

fn enumerate_rec(
    lambda: u32,
    k: usize,
    min_sum: u32,
    sum: u32,
    prefix: &mut Vec<u32>,
    out: &mut Vec<LevelSet>,
) {
    let remaining = (k - prefix.len()) as u32;
    if remaining == 0 {
        if sum >= min_sum {
            out.push(LevelSet::from_raw(prefix.clone(), lambda));
        }
        return;
    }
    // Only the last coordinate has to close the gap up to min_sum.
    let lo = if remaining == 1 {
        min_sum.saturating_sub(sum)
    } else {
        0
    };
    for a in lo..=(lambda - sum) {
        prefix.push(a);
        enumerate_rec(lambda, k, min_sum, sum + a, prefix, out);
        prefix.pop();
    }
}
