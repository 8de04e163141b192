//! Seeded synthetic chains used by the CLI `synth` command, tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::StochasticMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows drawn i.i.d. uniform on `[0, 1)` and normalized.
///
/// Such chains mix almost immediately: `|lambda2|` is typically well below 0.5.
pub fn random_stochastic(n: usize, seed: u64) -> StochasticMatrix {
    random_stochastic_with(n, &mut rng(seed))
}

pub fn random_stochastic_with<R: Rng>(n: usize, rng: &mut R) -> StochasticMatrix {
    let data = (0..n * n).map(|_| rng.gen::<f64>() + 1e-12).collect();
    StochasticMatrix::from_nonnegative(n, data)
}

/// Row-wise softmax of Gaussian-ish logits scaled by `temperature`.
pub fn softmax_attention<R: Rng>(n: usize, temperature: f64, rng: &mut R) -> StochasticMatrix {
    let mut data: Vec<f64> = (0..n * n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>() - 1.5;
            u * 2.0 * temperature
        })
        .collect();
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
    }
    StochasticMatrix::from_nonnegative(n, data)
}

/// Chain whose states are partitioned by `labels`: each state sends
/// `intra_mass` uniformly to its own group and the rest uniformly to
/// every state outside it. Groups that cover every state keep all mass.
pub fn partition_chain(labels: &[usize], intra_mass: f64) -> StochasticMatrix {
    let n = labels.len();
    assert!(n >= 1, "a chain needs at least one state");
    assert!((0.0..=1.0).contains(&intra_mass), "intra mass must lie in [0, 1]");
    let mut data = vec![0.0; n * n];
    for (i, row) in data.chunks_mut(n).enumerate() {
        let own = labels.iter().filter(|&&l| l == labels[i]).count();
        let other = n - own;
        for (j, x) in row.iter_mut().enumerate() {
            *x = if labels[j] == labels[i] {
                if other == 0 {
                    1.0 / own as f64
                } else {
                    intra_mass / own as f64
                }
            } else {
                (1.0 - intra_mass) / other as f64
            };
        }
    }
    StochasticMatrix::from_nonnegative(n, data)
}

/// `k` contiguous, near-equal blocks (the first `n % k` blocks get one extra state).
pub fn block_labels(n: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= n, "need 1 <= k <= n blocks");
    let base = n / k;
    let extra = n % k;
    (0..k)
        .flat_map(|b| std::iter::repeat_n(b, base + usize::from(b < extra)))
        .collect()
}

/// Metastable chain of `k` contiguous blocks. For two equal blocks,
/// `lambda2 = intra_mass - (1 - intra_mass)`.
pub fn block_chain(n: usize, k: usize, intra_mass: f64) -> StochasticMatrix {
    partition_chain(&block_labels(n, k), intra_mass)
}

/// Five-state chain with the topology used to contrast column sums with the
/// stationary ranking: states 1, 2 and 4 send most mass to state 0, state 0
/// forwards to state 3 and state 3 forwards to state 4.
///
/// Column sums rank state 0 first; the stationary vector ranks state 4 first.
pub fn decoy_chain() -> StochasticMatrix {
    let rows = [
        [0.05, 0.05, 0.05, 0.80, 0.05],
        [0.70, 0.10, 0.05, 0.05, 0.10],
        [0.70, 0.05, 0.10, 0.05, 0.10],
        [0.05, 0.05, 0.05, 0.05, 0.80],
        [0.30, 0.05, 0.05, 0.10, 0.50],
    ];
    StochasticMatrix::from_nonnegative(5, rows.concat())
}

/// A single-image attention scene with a planted foreground.
#[derive(Clone, Debug)]
pub struct PlantedScene {
    pub matrix: StochasticMatrix,
    pub grid: (usize, usize),
    /// Sink register first, then the query (concept) token.
    pub special_tokens: Vec<usize>,
    pub query_token: usize,
    /// Row-major foreground mask over the grid.
    pub foreground: Vec<bool>,
}

/// Sequence layout: `[sink, query, grid tokens...]`. The left half of the
/// grid is the foreground object.
///
/// Foreground tokens attend mostly to each other and somewhat to the
/// background; background tokens dump most of their attention into the sink
/// register. Every spatial token also attends weakly to the query token,
/// foreground twice as strongly as background. Entries get multiplicative
/// noise `1 + noise * U(-1, 1)` before renormalization.
pub fn planted_scene(height: usize, width: usize, noise: f64, seed: u64) -> PlantedScene {
    assert!(width >= 2 && height >= 1, "grid needs at least two columns");
    assert!((0.0..1.0).contains(&noise), "noise must lie in [0, 1)");
    let mut rng = rng(seed);
    let spatial = height * width;
    let n = spatial + 2;
    let (sink, query) = (0usize, 1usize);
    let foreground: Vec<bool> = (0..spatial).map(|p| p % width < width / 2).collect();
    let fg_count = foreground.iter().filter(|&&f| f).count() as f64;
    let bg_count = spatial as f64 - fg_count;

    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut data[i * n..(i + 1) * n];
        if i == sink {
            row.fill(1.0 / n as f64);
            continue;
        }
        if i == query {
            row[2..].fill(1.0 / spatial as f64);
            continue;
        }
        let (to_fg, to_bg, to_query, to_sink) = if foreground[i - 2] {
            (0.70, 0.25, 0.04, 0.01)
        } else {
            (0.05, 0.08, 0.02, 0.85)
        };
        row[sink] = to_sink;
        row[query] = to_query;
        for (p, &fg) in foreground.iter().enumerate() {
            row[p + 2] = if fg { to_fg / fg_count } else { to_bg / bg_count };
        }
        for x in row.iter_mut() {
            *x *= 1.0 + noise * rng.gen_range(-1.0..1.0);
        }
    }
    PlantedScene {
        matrix: StochasticMatrix::from_nonnegative(n, data),
        grid: (height, width),
        special_tokens: vec![sink, query],
        query_token: query,
        foreground,
    }
}
