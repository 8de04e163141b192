//! Zero-shot segmentation from multi-bounce attention, and its metrics.

use std::fmt::Write as _;

use crate::chain::{ChainConfig, StateVector, StochasticMatrix};
use crate::error::{Error, Result};
use crate::io::grid::full_precision;
use crate::ops::{self, AttentionTensor, Direction, HeadScheme};

/// Number of bounces: a finite count, or the stationary limit (TokenRank).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bounces {
    Steps(usize),
    Stationary,
}

impl std::str::FromStr for Bounces {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "∞" | "ss" => Ok(Bounces::Stationary),
            n => n
                .parse()
                .map(Bounces::Steps)
                .map_err(|_| format!("bad bounce count {n:?}")),
        }
    }
}

impl std::fmt::Display for Bounces {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bounces::Steps(n) => write!(f, "{n}"),
            Bounces::Stationary => f.write_str("inf"),
        }
    }
}

/// Parameters of [`attention_to_map`].
#[derive(Clone, Debug, PartialEq)]
pub struct MapRequest {
    pub target: usize,
    pub bounces: Bounces,
    pub direction: Direction,
    pub scheme: HeadScheme,
    /// Layer ids to average; empty means every layer.
    pub layers: Vec<usize>,
    /// Bilinearly upsample the grid to `(height, width)`.
    pub output_size: Option<(usize, usize)>,
    pub threshold: ThresholdRule,
}

impl MapRequest {
    /// Outgoing, two bounces, lambda2-weighted heads over every layer.
    pub fn new(target: usize) -> Self {
        Self {
            target,
            bounces: Bounces::Steps(2),
            direction: Direction::Outgoing,
            scheme: HeadScheme::Lambda2,
            layers: Vec::new(),
            output_size: None,
            threshold: ThresholdRule::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdRule {
    /// Spatial mean of the scores.
    Mean,
    Fixed(f64),
}

/// Saliency scores over a grid and the binary mask derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SegMap {
    pub fn from_scores(height: usize, width: usize, scores: Vec<f64>, rule: ThresholdRule) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::GridMismatch {
                height,
                width,
                len: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                row: i / width.max(1),
                col: i % width.max(1),
            });
        }
        let mask = binarize(&scores, rule);
        Ok(Self {
            height,
            width,
            scores,
            mask,
        })
    }
}

fn binarize(scores: &[f64], rule: ThresholdRule) -> Vec<bool> {
    let t = match rule {
        ThresholdRule::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        ThresholdRule::Fixed(t) => t,
    };
    scores.iter().map(|&x| x > t).collect()
}

/// Re-derives the mask of `map` under `rule` (strict `>`).
pub fn threshold(map: &SegMap, rule: ThresholdRule) -> SegMap {
    SegMap {
        mask: binarize(&map.scores, rule),
        ..map.clone()
    }
}

/// Heads aggregated per layer, then averaged uniformly over the chosen layers.
pub fn aggregate_layers(
    tensor: &AttentionTensor,
    scheme: &HeadScheme,
    layers: &[usize],
) -> Result<StochasticMatrix> {
    let positions: Vec<usize> = if layers.is_empty() {
        (0..tensor.num_layers()).collect()
    } else {
        layers
            .iter()
            .map(|&id| {
                tensor.layer_position(id).ok_or(Error::IndexOutOfRange {
                    index: id,
                    len: tensor.num_layers(),
                })
            })
            .collect::<Result<_>>()?
    };
    let per_layer = positions
        .iter()
        .map(|&l| ops::aggregate_heads(tensor.layer(l), scheme))
        .collect::<Result<Vec<_>>>()?;
    if per_layer.len() == 1 {
        return Ok(per_layer.into_iter().next().expect("one layer"));
    }
    ops::average(&per_layer)
}

/// Per-token scores for the request, before special tokens are dropped.
pub fn token_scores(tensor: &AttentionTensor, req: &MapRequest, cfg: &ChainConfig) -> Result<StateVector> {
    let chain = aggregate_layers(tensor, &req.scheme, &req.layers)?;
    match req.bounces {
        Bounces::Steps(n) => ops::multi_bounce(&chain, req.target, n, req.direction),
        Bounces::Stationary => Ok(ops::token_rank(&chain, cfg, req.direction)?.vector),
    }
}

/// Spatial saliency map for `req.target` thresholded by `req.threshold`.
pub fn attention_to_map(tensor: &AttentionTensor, req: &MapRequest, cfg: &ChainConfig) -> Result<SegMap> {
    let (h, w) = tensor.grid().ok_or(Error::MissingGrid)?;
    if req.target >= tensor.seq_len() {
        return Err(Error::IndexOutOfRange {
            index: req.target,
            len: tensor.seq_len(),
        });
    }
    let scores = token_scores(tensor, req, cfg)?;
    let spatial: Vec<f64> = tensor
        .spatial_tokens()
        .into_iter()
        .map(|t| scores.as_slice()[t])
        .collect();
    let (out_h, out_w, values) = match req.output_size {
        Some((oh, ow)) if (oh, ow) != (h, w) => (oh, ow, upsample_bilinear(&spatial, (h, w), (oh, ow))),
        _ => (h, w, spatial),
    };
    SegMap::from_scores(out_h, out_w, values, req.threshold)
}

/// Bilinear resampling with half-pixel-centre alignment and edge clamping.
pub fn upsample_bilinear(values: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let (h, w) = from;
    let (oh, ow) = to;
    assert_eq!(values.len(), h * w, "values must fill the source grid");
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let x = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Shannon entropy (nats) of non-negative scores rescaled to sum to one.
pub fn entropy(scores: &[f64]) -> f64 {
    let total: f64 = scores.iter().sum();
    scores
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / total;
            -p * p.ln()
        })
        .sum()
}

/// Pixel accuracy, two-class mean IoU and average precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub accuracy: f64,
    pub miou: f64,
    pub ap: f64,
}

pub fn evaluate(pred: &SegMap, gt: &[bool]) -> Result<SegMetrics> {
    if gt.len() != pred.mask.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.mask.len(),
            found: gt.len(),
        });
    }
    let total = gt.len() as f64;
    let correct = pred.mask.iter().zip(gt).filter(|(p, g)| p == g).count() as f64;
    let iou = |class: bool| {
        let inter = pred
            .mask
            .iter()
            .zip(gt)
            .filter(|(p, g)| **p == class && **g == class)
            .count();
        let union = pred
            .mask
            .iter()
            .zip(gt)
            .filter(|(p, g)| **p == class || **g == class)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    Ok(SegMetrics {
        accuracy: correct / total,
        miou: 0.5 * (iou(true) + iou(false)),
        ap: average_precision(&pred.scores, gt),
    })
}

/// Area under the precision-recall curve: mean precision at each positive,
/// pixels ranked by descending score. Tied scores form one group whose
/// positives are all counted before precision is taken. Returns 0 when
/// there are no positives.
pub fn average_precision(scores: &[f64], gt: &[bool]) -> f64 {
    assert_eq!(scores.len(), gt.len(), "scores and labels must align");
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut seen, mut sum) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            group_pos += usize::from(gt[order[j]]);
            j += 1;
        }
        tp += group_pos;
        seen += j - i;
        if group_pos > 0 {
            sum += group_pos as f64 * tp as f64 / seen as f64;
        }
        i = j;
    }
    sum / positives as f64
}

/// `image_id,accuracy,miou,ap` rows followed by a `mean` row.
pub fn metrics_csv(rows: &[(String, SegMetrics)]) -> String {
    let mut out = String::from("image_id,accuracy,miou,ap\n");
    let mut sums = [0.0; 3];
    for (id, m) in rows {
        let _ = writeln!(
            out,
            "{id},{},{},{}",
            full_precision(m.accuracy),
            full_precision(m.miou),
            full_precision(m.ap)
        );
        sums[0] += m.accuracy;
        sums[1] += m.miou;
        sums[2] += m.ap;
    }
    let k = rows.len().max(1) as f64;
    let _ = writeln!(
        out,
        "mean,{},{},{}",
        full_precision(sums[0] / k),
        full_precision(sums[1] / k),
        full_precision(sums[2] / k)
    );
    out
}
