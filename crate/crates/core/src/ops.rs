//! Attention operations expressed as chain primitives.
//!
//! Row-select, column-select and column-sum are single bounces from a one-hot
//! or uniform start; multi-bounce attention iterates further, and TokenRank
//! is the limit of that iteration on the teleport-adjusted chain.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::chain::{
    bounce, ranking, steady_state, ChainConfig, RankResult, StateVector, StochasticMatrix,
};
use crate::error::{Error, Result};
use crate::spectral;
use crate::synth;

/// Direction of attention flow through a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Attention flowing into tokens: iterate the row-stochastic chain.
    Incoming,
    /// Attention flowing out of tokens: iterate the transposed column-normalized chain.
    Outgoing,
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "incoming" | "in" => Ok(Direction::Incoming),
            "outgoing" | "out" => Ok(Direction::Outgoing),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

/// Layers x heads stack of attention chains over a shared token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor {
    layers: Vec<Vec<StochasticMatrix>>,
    layer_ids: Vec<usize>,
    seq_len: usize,
    special_tokens: Vec<usize>,
    grid: Option<(usize, usize)>,
}

impl AttentionTensor {
    /// `layers[l][h]` is head `h` of layer `l`. Layer ids default to `0..L`.
    pub fn new(
        layers: Vec<Vec<StochasticMatrix>>,
        special_tokens: Vec<usize>,
        grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        let ids = (0..layers.len()).collect();
        Self::with_layer_ids(layers, ids, special_tokens, grid)
    }

    pub fn with_layer_ids(
        layers: Vec<Vec<StochasticMatrix>>,
        layer_ids: Vec<usize>,
        mut special_tokens: Vec<usize>,
        grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        let first = layers
            .first()
            .and_then(|l| l.first())
            .ok_or_else(|| Error::InvalidTensor("tensor needs at least one head".into()))?;
        let seq_len = first.n();
        let heads = layers[0].len();
        if layer_ids.len() != layers.len() {
            return Err(Error::InvalidTensor("one id per layer required".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.len() != heads {
                return Err(Error::InvalidTensor(format!(
                    "layer {l} has {} heads, expected {heads}",
                    layer.len()
                )));
            }
            for m in layer {
                if m.n() != seq_len {
                    return Err(Error::DimensionMismatch {
                        expected: seq_len,
                        found: m.n(),
                    });
                }
                if !m.is_row_stochastic() {
                    return Err(Error::WrongOrientation {
                        expected: "row-stochastic",
                    });
                }
            }
        }
        special_tokens.sort_unstable();
        if special_tokens.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidTensor("duplicate special token".into()));
        }
        if let Some(&t) = special_tokens.iter().find(|&&t| t >= seq_len) {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: seq_len,
            });
        }
        if let Some((h, w)) = grid {
            if h * w + special_tokens.len() != seq_len {
                return Err(Error::GridMismatch {
                    height: h,
                    width: w,
                    len: seq_len - special_tokens.len(),
                });
            }
        }
        Ok(Self {
            layers,
            layer_ids,
            seq_len,
            special_tokens,
            grid,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers[0].len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn layer(&self, l: usize) -> &[StochasticMatrix] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<StochasticMatrix>] {
        &self.layers
    }

    /// Original layer indices (e.g. from a manifest), aligned with [`layer`](Self::layer).
    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    /// Position of the layer with id `id`.
    pub fn layer_position(&self, id: usize) -> Option<usize> {
        self.layer_ids.iter().position(|&x| x == id)
    }

    pub fn special_tokens(&self) -> &[usize] {
        &self.special_tokens
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn is_special(&self, token: usize) -> bool {
        self.special_tokens.binary_search(&token).is_ok()
    }

    /// Sequence indices of the non-special tokens, in order.
    pub fn spatial_tokens(&self) -> Vec<usize> {
        (0..self.seq_len).filter(|&t| !self.is_special(t)).collect()
    }

    /// Sequence index of grid cell `(h / 2, w / 2)`.
    pub fn center_token(&self) -> Result<usize> {
        let (h, w) = self.grid.ok_or(Error::MissingGrid)?;
        let cell = (h / 2) * w + w / 2;
        Ok(self.spatial_tokens()[cell])
    }
}

fn check_index(m: &StochasticMatrix, i: usize) -> Result<()> {
    if i < m.n() {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange {
            index: i,
            len: m.n(),
        })
    }
}

/// Attention token `i` pays to every token: one bounce from `u_i`.
pub fn row_select(m: &StochasticMatrix, i: usize) -> Result<StateVector> {
    check_index(m, i)?;
    bounce(m, &StateVector::one_hot(m.n(), i)?, 1)
}

/// Which tokens attend to token `j`: column `j` of the column-normalized matrix.
pub fn column_select(m: &StochasticMatrix, j: usize) -> Result<StateVector> {
    check_index(m, j)?;
    let left = m.to_left_stochastic()?;
    StateVector::from_weights(left.column(j))
}

/// Mean attention received by each token: one bounce from the uniform vector.
pub fn column_sum(m: &StochasticMatrix) -> Result<StateVector> {
    bounce(m, &StateVector::uniform(m.n()), 1)
}

/// The chain whose rows say where attention flowing out of a token comes from.
pub fn outgoing_chain(m: &StochasticMatrix) -> Result<StochasticMatrix> {
    Ok(m.to_left_stochastic()?.transpose())
}

/// `u_i^T C^n` for `C` the incoming or outgoing chain of `m`.
pub fn multi_bounce(
    m: &StochasticMatrix,
    i: usize,
    n: usize,
    dir: Direction,
) -> Result<StateVector> {
    check_index(m, i)?;
    let start = StateVector::one_hot(m.n(), i)?;
    match dir {
        Direction::Incoming => bounce(m, &start, n),
        Direction::Outgoing => bounce(&outgoing_chain(m)?, &start, n),
    }
}

/// Stationary vector of the teleport-adjusted incoming or outgoing chain.
pub fn token_rank(m: &StochasticMatrix, cfg: &ChainConfig, dir: Direction) -> Result<RankResult> {
    match dir {
        Direction::Incoming => steady_state(m, cfg, None),
        Direction::Outgoing => steady_state(&outgoing_chain(m)?, cfg, None),
    }
}

/// How heads are combined into a single chain.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadScheme {
    Uniform,
    /// Weights proportional to each head's `|lambda2|`.
    Lambda2,
    Explicit(Vec<f64>),
}

/// Resolves `scheme` into one weight per head.
pub fn head_weights(heads: &[StochasticMatrix], scheme: &HeadScheme) -> Result<Vec<f64>> {
    let first = heads.first().ok_or(Error::EmptyHeadList)?;
    if let Some(bad) = heads.iter().find(|m| m.n() != first.n()) {
        return Err(Error::DimensionMismatch {
            expected: first.n(),
            found: bad.n(),
        });
    }
    match scheme {
        HeadScheme::Uniform => Ok(vec![1.0 / heads.len() as f64; heads.len()]),
        HeadScheme::Lambda2 => Ok(spectral::lambda2_weights(heads)?.weights),
        HeadScheme::Explicit(w) => {
            if w.len() != heads.len() {
                return Err(Error::InvalidWeights(format!(
                    "{} weights for {} heads",
                    w.len(),
                    heads.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvalidWeights("weights must be non-negative".into()));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidWeights(format!("weights sum to {sum}")));
            }
            Ok(w.clone())
        }
    }
}

/// Mixture `sum_h w_h m_h` of the head chains.
pub fn aggregate_heads(heads: &[StochasticMatrix], scheme: &HeadScheme) -> Result<StochasticMatrix> {
    let weights = head_weights(heads, scheme)?;
    let refs: Vec<&StochasticMatrix> = heads.iter().collect();
    StochasticMatrix::convex_combination(&refs, &weights)
}

/// Uniform average of several chains (e.g. aggregated layers).
pub fn average(mats: &[StochasticMatrix]) -> Result<StochasticMatrix> {
    aggregate_heads(mats, &HeadScheme::Uniform)
}

/// Removes `tokens` as attention targets: their columns become zero and
/// rows are renormalized. This is softmax with those logits at `-inf`.
pub fn mask_columns(m: &StochasticMatrix, tokens: &[usize]) -> Result<StochasticMatrix> {
    let n = m.n();
    let mut masked = vec![false; n];
    for &t in tokens {
        check_index(m, t)?;
        masked[t] = true;
    }
    let kept = masked.iter().filter(|&&x| !x).count();
    if kept == 0 {
        return Err(Error::AllTokensMasked);
    }
    if kept == n {
        return Ok(m.clone());
    }
    let mut data = m.as_slice().to_vec();
    for row in data.chunks_mut(n) {
        for (x, &gone) in row.iter_mut().zip(&masked) {
            if gone {
                *x = 0.0;
            }
        }
        if row.iter().all(|&x| x == 0.0) {
            for (x, &gone) in row.iter_mut().zip(&masked) {
                if !gone {
                    *x = 1.0 / kept as f64;
                }
            }
        }
    }
    Ok(StochasticMatrix::from_nonnegative(n, data))
}

/// Token-importance baselines for progressive masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    Random,
    /// Row-select of the token at the grid center.
    CenterToken,
    ColumnSum,
    /// Row-select of the first special token.
    ClsToken,
    TokenRank,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 5] = [
        MaskStrategy::Random,
        MaskStrategy::CenterToken,
        MaskStrategy::ColumnSum,
        MaskStrategy::ClsToken,
        MaskStrategy::TokenRank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Random => "random",
            MaskStrategy::CenterToken => "center-token",
            MaskStrategy::ColumnSum => "column-sum",
            MaskStrategy::ClsToken => "cls-token",
            MaskStrategy::TokenRank => "token-rank",
        }
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingOptions {
    /// Fraction of leading layers whose scores are averaged, in `(0, 1]`.
    pub layer_fraction: f64,
    pub seed: u64,
    /// Weight heads by `|lambda2|` instead of uniformly.
    pub lambda2_heads: bool,
}

impl Default for MaskingOptions {
    fn default() -> Self {
        Self {
            layer_fraction: 0.5,
            seed: 0,
            lambda2_heads: false,
        }
    }
}

/// Maskable (non-special) tokens in descending importance under `strategy`.
///
/// Scores are averaged over heads and over the first
/// `ceil(layer_fraction * layers)` layers; ties go to the lower index.
pub fn masking_order(
    tensor: &AttentionTensor,
    strategy: MaskStrategy,
    cfg: &ChainConfig,
    opts: &MaskingOptions,
) -> Result<Vec<usize>> {
    if !(opts.layer_fraction > 0.0 && opts.layer_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "layer fraction {} outside (0, 1]",
            opts.layer_fraction
        )));
    }
    let maskable = tensor.spatial_tokens();
    if strategy == MaskStrategy::Random {
        let mut order = maskable;
        order.shuffle(&mut synth::rng(opts.seed));
        return Ok(order);
    }

    let probe = match strategy {
        MaskStrategy::CenterToken => Some(tensor.center_token()?),
        MaskStrategy::ClsToken => Some(
            *tensor
                .special_tokens()
                .first()
                .ok_or(Error::MissingSpecialTokens)?,
        ),
        _ => None,
    };

    let layers = (opts.layer_fraction * tensor.num_layers() as f64).ceil() as usize;
    let layers = layers.clamp(1, tensor.num_layers());
    let mut scores = vec![0.0; tensor.seq_len()];
    for heads in &tensor.layers()[..layers] {
        let weights = if opts.lambda2_heads {
            head_weights(heads, &HeadScheme::Lambda2)?
        } else {
            head_weights(heads, &HeadScheme::Uniform)?
        };
        for (m, w) in heads.iter().zip(weights) {
            let v = match (strategy, probe) {
                (MaskStrategy::CenterToken | MaskStrategy::ClsToken, Some(t)) => row_select(m, t)?,
                (MaskStrategy::ColumnSum, _) => column_sum(m)?,
                _ => token_rank(m, cfg, Direction::Incoming)?.vector,
            };
            for (s, x) in scores.iter_mut().zip(v.as_slice()) {
                *s += w * x / layers as f64;
            }
        }
    }
    let spatial_scores: Vec<f64> = maskable.iter().map(|&t| scores[t]).collect();
    Ok(ranking(&spatial_scores)
        .into_iter()
        .map(|k| maskable[k])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::RepairPolicy;
    use approx::assert_abs_diff_eq;

    fn two_state() -> StochasticMatrix {
        StochasticMatrix::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5]], RepairPolicy::Strict)
            .unwrap()
    }

    fn tensor_of(m: StochasticMatrix, special: Vec<usize>, grid: Option<(usize, usize)>) -> AttentionTensor {
        AttentionTensor::new(vec![vec![m]], special, grid).unwrap()
    }

    #[test]
    fn selects() {
        assert_eq!(
            row_select(&StochasticMatrix::identity(3), 1).unwrap().as_slice(),
            &[0.0, 1.0, 0.0]
        );
        assert_eq!(row_select(&two_state(), 0).unwrap().as_slice(), &[0.9, 0.1]);
        assert_eq!(
            column_select(&StochasticMatrix::identity(2), 0).unwrap().as_slice(),
            &[1.0, 0.0]
        );
        let m = StochasticMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]], RepairPolicy::Strict)
            .unwrap();
        assert_eq!(column_select(&m, 0).unwrap().as_slice(), &[0.5, 0.5]);
        assert!(matches!(row_select(&m, 2), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(column_select(&m, 5), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn column_select_is_scaled_column() {
        let m = synth::random_stochastic(6, 2);
        let left = m.to_left_stochastic().unwrap();
        for j in 0..6 {
            let v = column_select(&m, j).unwrap();
            assert_abs_diff_eq!(v.as_slice().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            let raw = m.column(j);
            let total: f64 = raw.iter().sum();
            for (i, x) in v.as_slice().iter().enumerate() {
                assert_abs_diff_eq!(*x, raw[i] / total, epsilon = 1e-12);
                assert_abs_diff_eq!(*x, left.get(i, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn first_bounce_identities_are_exact() {
        let m = synth::random_stochastic(6, 44);
        for i in 0..6 {
            assert_eq!(multi_bounce(&m, i, 1, Direction::Incoming).unwrap(), row_select(&m, i).unwrap());
            assert_eq!(
                multi_bounce(&m, i, 1, Direction::Outgoing).unwrap(),
                column_select(&m, i).unwrap()
            );
        }
        let cs = column_sum(&two_state()).unwrap();
        assert_abs_diff_eq!(cs.as_slice()[0], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn token_rank_examples() {
        let cfg = ChainConfig::default();
        for dir in [Direction::Incoming, Direction::Outgoing] {
            let r = token_rank(&StochasticMatrix::uniform(5), &cfg, dir).unwrap();
            for x in r.vector.as_slice() {
                assert_abs_diff_eq!(*x, 0.2, epsilon = 1e-14);
            }
        }
        let cfg = ChainConfig::new(0.999999, 1e-16, 10_000).unwrap();
        let r = token_rank(&two_state(), &cfg, Direction::Incoming).unwrap();
        assert_abs_diff_eq!(r.vector.as_slice()[0], 5.0 / 6.0, epsilon = 1e-4);
    }

    #[test]
    fn long_bounce_reaches_token_rank() {
        let cfg = ChainConfig::default().with_tau(1e-26).unwrap();
        let m = synth::random_stochastic(7, 12);
        let adjusted = m.teleport_adjust(cfg.alpha()).unwrap();
        let rank = token_rank(&m, &cfg, Direction::Incoming).unwrap();
        let far = multi_bounce(&adjusted, 3, 64, Direction::Incoming).unwrap();
        assert!(far.l1_distance(&rank.vector) < 1e-6);
    }

    #[test]
    fn aggregation() {
        let m = synth::random_stochastic(4, 1);
        for scheme in [HeadScheme::Uniform, HeadScheme::Lambda2, HeadScheme::Explicit(vec![0.3, 0.7])] {
            let agg = aggregate_heads(&[m.clone(), m.clone()], &scheme).unwrap();
            for (x, y) in agg.as_slice().iter().zip(m.as_slice()) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-15);
            }
        }
        let flip = StochasticMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], RepairPolicy::Strict)
            .unwrap();
        let agg = aggregate_heads(&[StochasticMatrix::identity(2), flip], &HeadScheme::Uniform).unwrap();
        assert_eq!(agg.as_slice(), &[0.5; 4]);
    }

    #[test]
    fn lambda2_scheme_equals_explicit_weights() {
        let heads: Vec<_> = (0..4).map(|s| synth::block_chain(6, 2, 0.6 + 0.1 * s as f64)).collect();
        let w = spectral::lambda2_weights(&heads).unwrap().weights;
        let a = aggregate_heads(&heads, &HeadScheme::Lambda2).unwrap();
        let b = aggregate_heads(&heads, &HeadScheme::Explicit(w)).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn aggregation_errors() {
        let m = StochasticMatrix::uniform(3);
        assert!(matches!(aggregate_heads(&[], &HeadScheme::Uniform), Err(Error::EmptyHeadList)));
        assert!(matches!(
            aggregate_heads(&[m.clone(), StochasticMatrix::uniform(2)], &HeadScheme::Uniform),
            Err(Error::DimensionMismatch { .. })
        ));
        for w in [vec![0.5], vec![0.7, 0.7], vec![-0.5, 1.5]] {
            assert!(matches!(
                aggregate_heads(&[m.clone(), m.clone()], &HeadScheme::Explicit(w)),
                Err(Error::InvalidWeights(_))
            ));
        }
    }

    #[test]
    fn masking_columns() {
        let m = synth::random_stochastic(4, 3);
        assert_eq!(mask_columns(&m, &[]).unwrap(), m);
        let half = StochasticMatrix::uniform(2);
        assert_eq!(mask_columns(&half, &[1]).unwrap().as_slice(), &[1.0, 0.0, 1.0, 0.0]);

        // Row 0 only attends to the masked token and falls back to uniform over the rest.
        let m = StochasticMatrix::from_rows(
            &[vec![0.0, 0.0, 1.0], vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8]],
            RepairPolicy::Strict,
        )
        .unwrap();
        let masked = mask_columns(&m, &[2]).unwrap();
        assert_eq!(masked.row(0), &[0.5, 0.5, 0.0]);
        assert!(matches!(mask_columns(&m, &[0, 1, 2]), Err(Error::AllTokensMasked)));
        assert!(matches!(mask_columns(&m, &[3]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn mask_columns_equals_softmax_with_neg_infinity() {
        use rand::Rng;
        let mut rng = synth::rng(77);
        let n = 6;
        let logits: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let softmax = |l: &[f64]| {
            let mut out = Vec::with_capacity(l.len());
            for row in l.chunks(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let s: f64 = e.iter().sum();
                out.extend(e.iter().map(|x| x / s));
            }
            out
        };
        let a = StochasticMatrix::from_raw(n, softmax(&logits), RepairPolicy::Strict).unwrap();
        let mut cut = logits.clone();
        for i in 0..n {
            cut[i * n + 2] = f64::NEG_INFINITY;
            cut[i * n + 4] = f64::NEG_INFINITY;
        }
        let expected = softmax(&cut);
        let masked = mask_columns(&a, &[2, 4]).unwrap();
        for (x, y) in masked.as_slice().iter().zip(&expected) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-14);
        }
        for i in 0..n {
            assert_eq!(masked.get(i, 2), 0.0);
            assert_eq!(masked.get(i, 4), 0.0);
        }
    }

    #[test]
    fn tensor_validation() {
        let m = StochasticMatrix::uniform(5);
        assert!(AttentionTensor::new(vec![vec![m.clone()]], vec![0], Some((2, 2))).is_ok());
        assert!(matches!(
            AttentionTensor::new(vec![vec![m.clone()]], vec![0], Some((2, 3))),
            Err(Error::GridMismatch { .. })
        ));
        assert!(AttentionTensor::new(vec![vec![m.clone()]], vec![1, 1], None).is_err());
        assert!(AttentionTensor::new(vec![vec![m.clone()]], vec![5], None).is_err());
        assert!(AttentionTensor::new(vec![vec![m.clone()], vec![]], vec![], None).is_err());
        let t = AttentionTensor::new(vec![vec![m]], vec![4, 0], Some((1, 3))).unwrap();
        assert_eq!(t.special_tokens(), &[0, 4]);
        assert_eq!(t.spatial_tokens(), vec![1, 2, 3]);
        assert_eq!(t.center_token().unwrap(), 2);
    }

    #[test]
    fn uniform_head_orders_by_index() {
        let t = tensor_of(StochasticMatrix::uniform(5), vec![0], Some((2, 2)));
        let cfg = ChainConfig::default();
        for s in [MaskStrategy::CenterToken, MaskStrategy::ColumnSum, MaskStrategy::ClsToken, MaskStrategy::TokenRank] {
            assert_eq!(masking_order(&t, s, &cfg, &MaskingOptions::default()).unwrap(), vec![1, 2, 3, 4]);
        }
    }

    #[test]
    fn random_order_is_seeded_permutation() {
        let t = tensor_of(StochasticMatrix::uniform(9), vec![0], None);
        let cfg = ChainConfig::default();
        let opts = MaskingOptions { seed: 5, ..Default::default() };
        let a = masking_order(&t, MaskStrategy::Random, &cfg, &opts).unwrap();
        assert_eq!(a, masking_order(&t, MaskStrategy::Random, &cfg, &opts).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (1..9).collect::<Vec<_>>());
    }

    #[test]
    fn absorbing_token_ranks_first() {
        let mut data = vec![0.0; 16];
        for i in 0..4 {
            data[i * 4 + 2] = 1.0;
        }
        let m = StochasticMatrix::from_raw(4, data, RepairPolicy::Strict).unwrap();
        let t = tensor_of(m, vec![], None);
        let order = masking_order(&t, MaskStrategy::TokenRank, &ChainConfig::default(), &MaskingOptions::default()).unwrap();
        assert_eq!(order[0], 2);
    }

    #[test]
    fn decoy_orders_differ() {
        let t = tensor_of(synth::decoy_chain(), vec![], None);
        let cfg = ChainConfig::default();
        let opts = MaskingOptions::default();
        assert_eq!(masking_order(&t, MaskStrategy::ColumnSum, &cfg, &opts).unwrap()[0], 0);
        assert_eq!(masking_order(&t, MaskStrategy::TokenRank, &cfg, &opts).unwrap()[0], 4);
    }

    #[test]
    fn masking_order_errors() {
        let t = tensor_of(StochasticMatrix::uniform(4), vec![], None);
        let cfg = ChainConfig::default();
        let opts = MaskingOptions::default();
        assert!(matches!(masking_order(&t, MaskStrategy::CenterToken, &cfg, &opts), Err(Error::MissingGrid)));
        assert!(matches!(masking_order(&t, MaskStrategy::ClsToken, &cfg, &opts), Err(Error::MissingSpecialTokens)));
        let bad = MaskingOptions { layer_fraction: 0.0, ..opts };
        assert!(masking_order(&t, MaskStrategy::ColumnSum, &cfg, &bad).is_err());
    }

    #[test]
    fn layer_fraction_selects_leading_layers() {
        // Layer 0 favours token 1, layer 1 favours token 2.
        let favour = |j: usize| {
            let mut data = vec![0.1; 9];
            for i in 0..3 {
                data[i * 3 + j] = 0.8;
            }
            StochasticMatrix::from_raw(3, data, RepairPolicy::Strict).unwrap()
        };
        let t = AttentionTensor::new(vec![vec![favour(1)], vec![favour(2)]], vec![0], None).unwrap();
        let cfg = ChainConfig::default();
        let half = MaskingOptions::default();
        assert_eq!(masking_order(&t, MaskStrategy::ColumnSum, &cfg, &half).unwrap(), vec![1, 2]);
        let all = MaskingOptions { layer_fraction: 1.0, ..half };
        // Both layers tie on tokens 1 and 2; the lower index wins.
        assert_eq!(masking_order(&t, MaskStrategy::ColumnSum, &cfg, &all).unwrap(), vec![1, 2]);
    }
}
