//! Stochastic matrices, probability vectors and power iteration.
//!
//! A softmaxed attention matrix is right-stochastic: every row is a
//! distribution over keys. Reading it as the transition kernel of a
//! discrete-time Markov chain, a row vector `v` evolves as `v <- v A`.
//! Everything in this module works on dense row-major `f64` storage.

use std::fmt;

use crate::error::{Error, Result};

/// Tolerance on row (or column) sums for a constructed matrix.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Default cap on the number of states accepted by [`StochasticMatrix::from_raw`].
pub const DEFAULT_MAX_STATES: usize = 16384;

const STRICT_SUM_TOLERANCE: f64 = 1e-6;
const CLAMP_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_ALPHA: f64 = 0.85;
pub const DEFAULT_TAU: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 1000;

/// Which sums of a [`StochasticMatrix`] are normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// Rows sum to one.
    RowStochastic,
    /// Columns sum to one.
    LeftStochastic,
}

impl Orientation {
    fn flip(self) -> Self {
        match self {
            Orientation::RowStochastic => Orientation::LeftStochastic,
            Orientation::LeftStochastic => Orientation::RowStochastic,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Orientation::RowStochastic => "row-stochastic",
            Orientation::LeftStochastic => "left-stochastic",
        }
    }
}

/// How [`StochasticMatrix::from_raw`] treats inputs that are not exactly stochastic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RepairPolicy {
    /// Reject negative entries and rows whose sum is off by more than 1e-6.
    Strict,
    /// Clamp tiny negatives, divide every row by its sum, and replace
    /// all-zero rows with the uniform distribution.
    #[default]
    ClampAndRenormalize,
}

/// A validated square stochastic matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct StochasticMatrix {
    n: usize,
    data: Vec<f64>,
    orientation: Orientation,
}

impl fmt::Debug for StochasticMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut dbg = f.debug_struct("StochasticMatrix");
        dbg.field("n", &self.n).field("orientation", &self.orientation);
        if self.n <= 8 {
            let rows: Vec<&[f64]> = self.data.chunks(self.n).collect();
            dbg.field("rows", &rows);
        }
        dbg.finish()
    }
}

impl StochasticMatrix {
    /// Builds a row-stochastic matrix from `n * n` row-major entries.
    pub fn from_raw(n: usize, entries: Vec<f64>, policy: RepairPolicy) -> Result<Self> {
        Self::from_raw_with_limit(n, entries, policy, DEFAULT_MAX_STATES)
    }

    /// Like [`from_raw`](Self::from_raw) with an explicit cap on the state count.
    pub fn from_raw_with_limit(
        n: usize,
        mut entries: Vec<f64>,
        policy: RepairPolicy,
        max_states: usize,
    ) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return Err(Error::NonSquare {
                rows: n,
                len: entries.len(),
            });
        }
        if n > max_states {
            return Err(Error::SizeExceeded {
                states: n,
                limit: max_states,
            });
        }
        if let Some(idx) = entries.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: idx / n,
                col: idx % n,
            });
        }

        match policy {
            RepairPolicy::Strict => {
                if let Some(idx) = entries.iter().position(|&x| x < 0.0) {
                    return Err(Error::NegativeEntry {
                        row: idx / n,
                        col: idx % n,
                        value: entries[idx],
                    });
                }
                for (row, chunk) in entries.chunks(n).enumerate() {
                    let sum: f64 = chunk.iter().sum();
                    if (sum - 1.0).abs() > STRICT_SUM_TOLERANCE {
                        return Err(Error::RowSumViolation { row, sum });
                    }
                }
            }
            RepairPolicy::ClampAndRenormalize => {
                for (idx, x) in entries.iter_mut().enumerate() {
                    if *x < 0.0 {
                        if -*x > CLAMP_TOLERANCE {
                            return Err(Error::NegativeEntry {
                                row: idx / n,
                                col: idx % n,
                                value: *x,
                            });
                        }
                        *x = 0.0;
                    }
                }
            }
        }

        normalize_rows(n, &mut entries);
        Ok(Self {
            n,
            data: entries,
            orientation: Orientation::RowStochastic,
        })
    }

    /// Convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>], policy: RepairPolicy) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::NonSquare {
                rows: n,
                len: rows.iter().map(Vec::len).sum(),
            });
        }
        Self::from_raw(n, rows.concat(), policy)
    }

    pub fn identity(n: usize) -> Self {
        assert!(n >= 1, "a chain needs at least one state");
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            n,
            data,
            orientation: Orientation::RowStochastic,
        }
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "a chain needs at least one state");
        Self {
            n,
            data: vec![1.0 / n as f64; n * n],
            orientation: Orientation::RowStochastic,
        }
    }

    /// Number of states.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.orientation == Orientation::RowStochastic
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.iter().skip(j).step_by(self.n).copied().collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for row in self.rows() {
            for (s, x) in sums.iter_mut().zip(row) {
                *s += x;
            }
        }
        sums
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn require(&self, orientation: Orientation) -> Result<()> {
        if self.orientation == orientation {
            Ok(())
        } else {
            Err(Error::WrongOrientation {
                expected: orientation.name(),
            })
        }
    }

    /// Column-normalizes a row-stochastic matrix. All-zero columns become uniform.
    pub fn to_left_stochastic(&self) -> Result<Self> {
        self.require(Orientation::RowStochastic)?;
        let n = self.n;
        let sums = self.column_sums();
        if let Some(col) = sums.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { row: 0, col });
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            for (x, &s) in row.iter_mut().zip(&sums) {
                *x = if s > 0.0 { *x / s } else { 1.0 / n as f64 };
            }
        }
        Ok(Self {
            n,
            data,
            orientation: Orientation::LeftStochastic,
        })
    }

    /// Transposes the entries and flips the orientation flag.
    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        Self {
            n,
            data,
            orientation: self.orientation.flip(),
        }
    }

    /// `alpha * P + (1 - alpha) / n * e e^T`.
    pub fn teleport_adjust(&self, alpha: f64) -> Result<Self> {
        self.require(Orientation::RowStochastic)?;
        check_alpha(alpha)?;
        let jump = (1.0 - alpha) / self.n as f64;
        let data = self.data.iter().map(|&p| alpha * p + jump).collect();
        Ok(Self {
            n: self.n,
            data,
            orientation: Orientation::RowStochastic,
        })
    }

    /// `0.5 * (I + P)`: the lazy version of the chain. Shares its stationary
    /// vector with `P` and converges more slowly.
    pub fn mix_identity(&self) -> Self {
        let n = self.n;
        let mut data: Vec<f64> = self.data.iter().map(|x| 0.5 * x).collect();
        for i in 0..n {
            data[i * n + i] += 0.5;
        }
        Self {
            n,
            data,
            orientation: self.orientation,
        }
    }

    /// Matrix product `self * other`: one step of `self` followed by one of `other`.
    pub fn chain_multiply(&self, other: &Self) -> Result<Self> {
        self.require(Orientation::RowStochastic)?;
        other.require(Orientation::RowStochastic)?;
        if self.n != other.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: other.n,
            });
        }
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for (out, row) in data.chunks_mut(n).zip(self.rows()) {
            vec_mat_into(row, other, out);
        }
        normalize_rows(n, &mut data);
        Ok(Self {
            n,
            data,
            orientation: Orientation::RowStochastic,
        })
    }

    /// Convex combination `sum_h w_h * m_h` of row-stochastic matrices.
    pub(crate) fn convex_combination(mats: &[&Self], weights: &[f64]) -> Result<Self> {
        let first = mats.first().ok_or(Error::EmptyHeadList)?;
        let n = first.n;
        let mut data = vec![0.0; n * n];
        for (m, &w) in mats.iter().zip(weights) {
            m.require(Orientation::RowStochastic)?;
            if m.n != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: m.n,
                });
            }
            if w == 0.0 {
                continue;
            }
            for (acc, x) in data.iter_mut().zip(&m.data) {
                *acc += w * x;
            }
        }
        normalize_rows(n, &mut data);
        Ok(Self {
            n,
            data,
            orientation: Orientation::RowStochastic,
        })
    }

    /// Builds a row-stochastic matrix from entries already known to be
    /// finite and non-negative; rows are renormalized.
    pub(crate) fn from_nonnegative(n: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * n);
        normalize_rows(n, &mut data);
        Self {
            n,
            data,
            orientation: Orientation::RowStochastic,
        }
    }

    /// `x -> P x` (right multiplication by a column vector).
    pub(crate) fn mat_vec(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.rows()) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

/// Divides each row by its sum; all-zero rows become uniform.
fn normalize_rows(n: usize, data: &mut [f64]) {
    for row in data.chunks_mut(n) {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|x| *x /= sum);
        } else {
            row.fill(1.0 / n as f64);
        }
    }
}

/// `out = v^T m`, accumulated row by row.
fn vec_mat_into(v: &[f64], m: &StochasticMatrix, out: &mut [f64]) {
    out.fill(0.0);
    for (&vi, row) in v.iter().zip(m.rows()) {
        if vi == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(row) {
            *o += vi * x;
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::AlphaOutOfRange(alpha))
    }
}

/// A probability distribution over the states of a chain.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    probs: Vec<f64>,
}

impl StateVector {
    /// Validates that `probs` is a distribution (non-negative, sums to one).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {}",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Scales non-negative weights to sum to one.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Self { probs: weights })
    }

    pub fn one_hot(n: usize, i: usize) -> Result<Self> {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        let mut probs = vec![0.0; n];
        probs[i] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1, "a distribution needs at least one state");
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub(crate) fn from_unchecked(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Index of the largest entry; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        ranking(&self.probs)[0]
    }

    /// Token indices ordered by descending probability, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        ranking(&self.probs)
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn linf_distance(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Stable descending order of `scores`; equal scores keep ascending index order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Teleportation weight, convergence threshold and iteration cap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainConfig {
    alpha: f64,
    tau: f64,
    max_iters: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl ChainConfig {
    pub fn new(alpha: f64, tau: f64, max_iters: usize) -> Result<Self> {
        check_alpha(alpha)?;
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
        }
        if max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        Ok(Self {
            alpha,
            tau,
            max_iters,
        })
    }

    pub fn with_alpha(self, alpha: f64) -> Result<Self> {
        Self::new(alpha, self.tau, self.max_iters)
    }

    pub fn with_tau(self, tau: f64) -> Result<Self> {
        Self::new(self.alpha, tau, self.max_iters)
    }

    pub fn with_max_iters(self, max_iters: usize) -> Result<Self> {
        Self::new(self.alpha, self.tau, max_iters)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Threshold on the squared L2 norm of successive iterate differences.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn max_iters(&self) -> usize {
        self.max_iters
    }
}

/// Outcome of a power iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RankResult {
    pub vector: StateVector,
    pub iterations: usize,
    /// Squared L2 norm of the final step.
    pub residual: f64,
    pub converged: bool,
}

/// `v0^T m^n` computed by `n` successive vector-matrix products.
///
/// Every intermediate vector is rescaled to sum to one.
pub fn bounce(m: &StochasticMatrix, v0: &StateVector, n: usize) -> Result<StateVector> {
    m.require(Orientation::RowStochastic)?;
    if v0.len() != m.n() {
        return Err(Error::InvalidDistribution(format!(
            "vector has {} entries, chain has {} states",
            v0.len(),
            m.n()
        )));
    }
    let mut v = v0.probs.clone();
    let mut next = vec![0.0; m.n()];
    for _ in 0..n {
        step(m, &v, &mut next);
        std::mem::swap(&mut v, &mut next);
    }
    Ok(StateVector::from_unchecked(v))
}

fn step(m: &StochasticMatrix, v: &[f64], out: &mut [f64]) {
    vec_mat_into(v, m, out);
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
}

/// Runs `v <- v^T m` until the squared step norm drops below `tau` or the
/// iteration cap is hit. No teleportation is applied; `m` should already be
/// irreducible and aperiodic for the result to be meaningful.
pub fn power_iterate(
    m: &StochasticMatrix,
    cfg: &ChainConfig,
    v0: Option<&StateVector>,
) -> Result<RankResult> {
    m.require(Orientation::RowStochastic)?;
    let mut v = match v0 {
        Some(v0) if v0.len() != m.n() => {
            return Err(Error::InvalidDistribution(format!(
                "vector has {} entries, chain has {} states",
                v0.len(),
                m.n()
            )))
        }
        Some(v0) => v0.probs.clone(),
        None => vec![1.0 / m.n() as f64; m.n()],
    };
    let mut next = vec![0.0; m.n()];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        step(m, &v, &mut next);
        iterations += 1;
        residual = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        std::mem::swap(&mut v, &mut next);
        if residual < cfg.tau {
            break;
        }
    }
    Ok(RankResult {
        vector: StateVector::from_unchecked(v),
        iterations,
        residual,
        converged: residual < cfg.tau,
    })
}

/// Stationary vector of the teleport-adjusted chain `alpha m + (1 - alpha)/n ee^T`.
pub fn steady_state(
    m: &StochasticMatrix,
    cfg: &ChainConfig,
    v0: Option<&StateVector>,
) -> Result<RankResult> {
    let adjusted = m.teleport_adjust(cfg.alpha)?;
    power_iterate(&adjusted, cfg, v0)
}
