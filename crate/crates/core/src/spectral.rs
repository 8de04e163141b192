//! Second-eigenvalue analysis of attention chains and lambda2 head weighting.
//!
//! The modulus of the second-largest eigenvalue controls how fast a chain
//! mixes: heads with large `|lambda2|` have slowly mixing, metastable token
//! groups, while randomly filled transition matrices mix almost at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::{StateVector, StochasticMatrix};
use crate::eigen::{self, Eigenvalue};
use crate::error::{Error, Result};

/// Largest state count handled by the dense eigensolver in automatic mode.
pub const DENSE_LIMIT: usize = 512;

/// Below this total `|lambda2|` mass, head weights fall back to uniform.
pub const DEGENERATE_SPECTRUM: f64 = 1e-12;

const DEFLATED_TOLERANCE: f64 = 1e-8;
const DEFLATED_MAX_ITERS: usize = 5000;
const DEFLATED_BLOCK: usize = 8;
const DEFLATED_STABLE_STEPS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lambda2Method {
    /// Full dense eigendecomposition (Hessenberg + shifted QR).
    Dense,
    /// Block power iteration on the chain with the unit eigenvalue deflated.
    DeflatedPower,
}

impl Lambda2Method {
    pub fn name(self) -> &'static str {
        match self {
            Lambda2Method::Dense => "dense",
            Lambda2Method::DeflatedPower => "deflated-power",
        }
    }
}

/// Knobs for [`lambda2_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambda2Options {
    /// `None` picks dense for `n <= DENSE_LIMIT`, deflated power above.
    pub method: Option<Lambda2Method>,
    /// Compute on the teleport-adjusted chain with this alpha instead of the raw chain.
    pub adjusted_alpha: Option<f64>,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for Lambda2Options {
    fn default() -> Self {
        Self {
            method: None,
            adjusted_alpha: None,
            tolerance: DEFLATED_TOLERANCE,
            max_iters: DEFLATED_MAX_ITERS,
        }
    }
}

impl Lambda2Options {
    pub fn resolve(&self, n: usize) -> Lambda2Method {
        self.method.unwrap_or(if n <= DENSE_LIMIT {
            Lambda2Method::Dense
        } else {
            Lambda2Method::DeflatedPower
        })
    }
}

/// `|lambda2|` of a stochastic matrix with the default options.
pub fn lambda2(m: &StochasticMatrix) -> Result<f64> {
    lambda2_with(m, &Lambda2Options::default())
}

pub fn lambda2_with(m: &StochasticMatrix, opts: &Lambda2Options) -> Result<f64> {
    // The spectrum is transpose-invariant; deflation needs the row-stochastic form.
    let row = if m.is_row_stochastic() {
        None
    } else {
        Some(m.transpose())
    };
    let m = row.as_ref().unwrap_or(m);
    let adjusted = match opts.adjusted_alpha {
        Some(alpha) => Some(m.teleport_adjust(alpha)?),
        None => None,
    };
    let m = adjusted.as_ref().unwrap_or(m);

    if m.n() == 1 {
        return Ok(0.0);
    }
    match opts.resolve(m.n()) {
        Lambda2Method::Dense => dense_lambda2(m),
        Lambda2Method::DeflatedPower => deflated_lambda2(m, opts.tolerance, opts.max_iters),
    }
}

fn dense_lambda2(m: &StochasticMatrix) -> Result<f64> {
    let vals = eigen::eigenvalues(m.n(), m.as_slice())?;
    Ok(vals.get(1).map(Eigenvalue::modulus).unwrap_or(0.0))
}

/// Subspace iteration on `B = P - e w^T` with `w` uniform.
///
/// `P e = e`, so by Brauer's theorem `B` has the spectrum of `P` with one
/// unit eigenvalue replaced by zero; the dominant modulus of `B` is
/// `|lambda2(P)|`. A block of vectors with Rayleigh-Ritz extraction lets
/// complex-conjugate pairs converge.
fn deflated_lambda2(m: &StochasticMatrix, tolerance: f64, max_iters: usize) -> Result<f64> {
    let n = m.n();
    let p = DEFLATED_BLOCK.min(n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1a2b);
    let mut q: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    if orthonormalize(&mut q, &mut rng) == 0 {
        return Ok(0.0);
    }

    let mut z = vec![vec![0.0; n]; p];
    let mut previous = f64::NAN;
    let mut stable = 0;
    let mut change = f64::INFINITY;
    for _ in 0..max_iters {
        let mut scale = 0.0f64;
        for (qi, zi) in q.iter().zip(z.iter_mut()) {
            m.mat_vec(qi, zi);
            let mean = qi.iter().sum::<f64>() / n as f64;
            zi.iter_mut().for_each(|x| *x -= mean);
            scale = scale.max(zi.iter().map(|x| x.abs()).fold(0.0, f64::max));
        }
        if scale < 1e-14 {
            return Ok(0.0);
        }

        // Rayleigh-Ritz: H = Q^T B Q.
        let mut h = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                h[i * p + j] = dot(&q[i], &z[j]);
            }
        }
        let estimate = eigen::eigenvalues(p, &h)?
            .first()
            .map(Eigenvalue::modulus)
            .unwrap_or(0.0);

        change = (estimate - previous).abs();
        if change < tolerance {
            stable += 1;
            if stable >= DEFLATED_STABLE_STEPS {
                return Ok(estimate);
            }
        } else {
            stable = 0;
        }
        previous = estimate;

        std::mem::swap(&mut q, &mut z);
        if orthonormalize(&mut q, &mut rng) == 0 {
            return Ok(0.0);
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iters,
        change,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Twice-applied modified Gram-Schmidt. Columns that collapse are replaced by
/// fresh random directions; returns the rank of the original block.
fn orthonormalize(q: &mut [Vec<f64>], rng: &mut ChaCha8Rng) -> usize {
    let reference = q
        .iter()
        .map(|v| dot(v, v).sqrt())
        .fold(0.0f64, f64::max);
    if reference == 0.0 {
        return 0;
    }
    let mut rank = 0;
    for i in 0..q.len() {
        let mut refreshed = false;
        loop {
            for _ in 0..2 {
                for j in 0..i {
                    let (done, rest) = q.split_at_mut(i);
                    let c = dot(&done[j], &rest[0]);
                    rest[0].iter_mut().zip(&done[j]).for_each(|(x, y)| *x -= c * y);
                }
            }
            let norm = dot(&q[i], &q[i]).sqrt();
            if norm > 1e-10 * reference || refreshed {
                if norm > 0.0 {
                    q[i].iter_mut().for_each(|x| *x /= norm);
                }
                if !refreshed {
                    rank += 1;
                }
                break;
            }
            q[i].iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0) * reference);
            refreshed = true;
        }
    }
    rank
}

/// Per-head `|lambda2|` values and the head weights derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralSummary {
    pub per_head_lambda2: Vec<f64>,
    pub weights: Vec<f64>,
    pub method: Lambda2Method,
    /// Set when every `|lambda2|` was below [`DEGENERATE_SPECTRUM`] and the
    /// weights fell back to uniform.
    pub uniform_fallback: bool,
}

impl SpectralSummary {
    /// Normalizes already computed `|lambda2|` values into head weights.
    pub fn from_lambdas(per_head_lambda2: Vec<f64>, method: Lambda2Method) -> Result<Self> {
        if per_head_lambda2.is_empty() {
            return Err(Error::EmptyHeadList);
        }
        if per_head_lambda2.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidWeights(
                "lambda2 values must be finite and non-negative".into(),
            ));
        }
        let h = per_head_lambda2.len();
        let total: f64 = per_head_lambda2.iter().sum();
        let uniform_fallback = per_head_lambda2.iter().all(|&l| l < DEGENERATE_SPECTRUM);
        let weights = if uniform_fallback {
            vec![1.0 / h as f64; h]
        } else {
            per_head_lambda2.iter().map(|l| l / total).collect()
        };
        Ok(Self {
            per_head_lambda2,
            weights,
            method,
            uniform_fallback,
        })
    }
}

pub fn lambda2_weights(heads: &[StochasticMatrix]) -> Result<SpectralSummary> {
    lambda2_weights_with(heads, &Lambda2Options::default())
}

pub fn lambda2_weights_with(
    heads: &[StochasticMatrix],
    opts: &Lambda2Options,
) -> Result<SpectralSummary> {
    let first = heads.first().ok_or(Error::EmptyHeadList)?;
    if let Some(bad) = heads.iter().find(|m| m.n() != first.n()) {
        return Err(Error::DimensionMismatch {
            expected: first.n(),
            found: bad.n(),
        });
    }
    let lambdas = heads
        .iter()
        .map(|m| lambda2_with(m, opts))
        .collect::<Result<Vec<_>>>()?;
    SpectralSummary::from_lambdas(lambdas, opts.resolve(first.n()))
}

/// Dominant left eigenvector of a strictly positive row-stochastic matrix,
/// by a dense direct solve of `v^T (P - I) = 0` with `sum(v) = 1`.
///
/// Serves as an independent reference for power iteration.
pub fn dense_left_eigvec_oracle(m: &StochasticMatrix) -> Result<StateVector> {
    let n = m.n();
    if n > DENSE_LIMIT {
        return Err(Error::SizeExceeded {
            states: n,
            limit: DENSE_LIMIT,
        });
    }
    if !m.is_row_stochastic() || m.min_entry() <= 0.0 {
        return Err(Error::NonPositiveMatrix);
    }
    // Perron root of a positive stochastic matrix is 1 and simple.
    let vals = eigen::eigenvalues(n, m.as_slice())?;
    let dominant = vals[0];
    if (dominant.re - 1.0).abs() > 1e-8 || dominant.im.abs() > 1e-8 {
        return Err(Error::ConvergenceFailure {
            iterations: 0,
            change: (dominant.re - 1.0).abs(),
        });
    }

    // Rows of the system are columns of (P - I); the last equation becomes sum(v) = 1.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[j * n + i] = m.get(i, j) - if i == j { 1.0 } else { 0.0 };
        }
    }
    a[(n - 1) * n..].fill(1.0);
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    eigen::solve_dense(n, &mut a, &mut b).ok_or(Error::NonPositiveMatrix)?;

    b.iter_mut().for_each(|x| *x = x.max(0.0));
    StateVector::from_weights(b)
}
