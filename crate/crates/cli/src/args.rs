use std::path::PathBuf;

use attnchain::chain::{DEFAULT_ALPHA, DEFAULT_MAX_ITERS, DEFAULT_TAU};
use attnchain::io::HeatmapFormat;
use attnchain::ops::{Direction, MaskStrategy};
use attnchain::segmentation::Bounces;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "attnchain", version, about = "Attention matrices as Markov chains")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalArgs {
    /// Teleportation factor
    #[arg(long, global = true, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Power iteration stops once the squared L2 step drops below this
    #[arg(long, global = true, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, global = true, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Never changes any output.
    #[arg(long, global = true, env = "ATTNCHAIN_THREADS")]
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Reject matrices that are not stochastic instead of repairing them
    #[arg(long, global = true)]
    pub strict: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Stochasticity report for every matrix of a manifest
    Validate(ValidateArgs),
    /// Steady-state token importance
    Tokenrank(TokenrankArgs),
    /// Distribution after n bounces from a one-hot token
    Bounce(BounceArgs),
    /// Row-select, column-select or column-sum of a chain
    Select(SelectArgs),
    /// Per-head |lambda2| and the derived head weights
    Lambda2(Lambda2Args),
    /// Saliency map, binary mask and optional metrics for one token
    Segment(SegmentArgs),
    /// Token masking order under each importance strategy
    MaskOrder(MaskOrderArgs),
    /// Write a synthetic single-layer manifest
    Synth(SynthArgs),
    /// Score saved saliency maps against ground-truth masks
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct ValidateArgs {
    pub manifest: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Uniform,
    Lambda2,
}

/// Which chain of the tensor to analyse.
#[derive(Args, Debug, Serialize)]
pub struct ChainArgs {
    /// Layer id; repeat or comma-separate to average several (default: all)
    #[arg(long = "layer", value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Use this single head instead of aggregating
    #[arg(long, conflicts_with = "aggregate")]
    pub head: Option<usize>,
    /// Head aggregation scheme
    #[arg(long, value_enum, default_value_t = SchemeArg::Uniform)]
    pub aggregate: SchemeArg,
}

#[derive(Args, Debug, Serialize)]
pub struct HeatmapArgs {
    /// Also write the spatial scores as a heatmap
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[arg(long, default_value = "pgm", value_parser = parse_format)]
    #[serde(serialize_with = "ser_format")]
    pub format: HeatmapFormat,
}

#[derive(Args, Debug, Serialize)]
pub struct TokenrankArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, default_value = "incoming", value_parser = parse_direction)]
    pub direction: Direction,
    /// Rank CSV (token_index,score,rank)
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub heatmap: HeatmapArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct BounceArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub chain: ChainArgs,
    /// Start token
    #[arg(long)]
    pub token: usize,
    /// Bounce counts, comma separated; `inf` is the steady state
    #[arg(long, value_delimiter = ',', default_value = "1", value_parser = parse_bounces)]
    #[serde(serialize_with = "ser_bounces")]
    pub n: Vec<Bounces>,
    #[arg(long, default_value = "incoming", value_parser = parse_direction)]
    pub direction: Direction,
    /// Output directory, one `bounce_<n>.csv` per count
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "pgm", value_parser = parse_format)]
    #[serde(serialize_with = "ser_format")]
    pub format: HeatmapFormat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectOp {
    Row,
    Column,
    ColumnSum,
}

#[derive(Args, Debug, Serialize)]
pub struct SelectArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    pub chain: ChainArgs,
    #[arg(long, value_enum)]
    pub op: SelectOp,
    /// Token for row and column selection
    #[arg(long, required_if_eq_any = [("op", "row"), ("op", "column")])]
    pub token: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub heatmap: HeatmapArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Auto,
    Dense,
    Deflated,
}

#[derive(Args, Debug, Serialize)]
pub struct Lambda2Args {
    pub manifest: PathBuf,
    /// Layer ids (default: all)
    #[arg(long = "layer", value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    pub method: MethodArg,
    /// CSV (layer,head,lambda2,weight,method)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SegmentArgs {
    pub manifest: PathBuf,
    /// Target token (default: first special token)
    #[arg(long)]
    pub token: Option<usize>,
    #[arg(long, default_value = "2", value_parser = parse_bounces)]
    #[serde(serialize_with = "ser_bounce")]
    pub n: Bounces,
    #[arg(long, default_value = "outgoing", value_parser = parse_direction)]
    pub direction: Direction,
    /// Layer ids to average (default: all)
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, value_enum, default_value_t = SchemeArg::Lambda2)]
    pub scheme: SchemeArg,
    /// Upsample to HEIGHTxWIDTH
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// `mean` or a fixed score threshold
    #[arg(long, default_value = "mean")]
    pub threshold: String,
    /// Ground-truth mask (PGM, nonzero = foreground, or CSV of 0/1)
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct MaskOrderArgs {
    pub manifest: PathBuf,
    /// Strategy name or `all`
    #[arg(long, default_value = "all")]
    pub strategy: String,
    #[arg(long, default_value_t = 0.5)]
    pub layer_fraction: f64,
    /// Weight heads by |lambda2| when averaging scores
    #[arg(long)]
    pub lambda2_heads: bool,
    /// CSV (strategy,rank,token_index)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Random,
    Block,
    Decoy,
    Planted,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Number of states (random and block)
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Number of contiguous blocks
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    /// Probability mass kept inside a block
    #[arg(long, default_value_t = 0.98)]
    pub intra: f64,
    /// Heads per layer; heads after the first are random chains
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Spatial grid HEIGHTxWIDTH (planted: scene size)
    #[arg(long, value_parser = parse_size)]
    pub grid: Option<(usize, usize)>,
    /// Special tokens outside the grid
    #[arg(long, value_delimiter = ',')]
    pub special: Vec<usize>,
    /// Multiplicative noise of the planted scene
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    pub dtype: DtypeArg,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    /// Score grids (CSV), one per image
    #[arg(long, required = true, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    /// Ground-truth masks, in the same order
    #[arg(long, required = true, num_args = 1..)]
    pub gt: Vec<PathBuf>,
    #[arg(long, default_value = "mean")]
    pub threshold: String,
    /// Metrics CSV (image_id,accuracy,miou,ap plus a mean row)
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    s.parse()
}

fn parse_bounces(s: &str) -> Result<Bounces, String> {
    s.parse()
}

fn parse_format(s: &str) -> Result<HeatmapFormat, String> {
    s.parse()
}

pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let dim = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| format!("bad dimension {v:?}"))
    };
    Ok((dim(h)?, dim(w)?))
}

fn ser_bounce<S: serde::Serializer>(b: &Bounces, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&b.to_string())
}

fn ser_bounces<S: serde::Serializer>(b: &[Bounces], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(b.iter().map(|b| b.to_string()))
}

fn ser_format<S: serde::Serializer>(f: &HeatmapFormat, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(match f {
        HeatmapFormat::Pgm => "pgm",
        HeatmapFormat::Csv => "csv",
    })
}

impl MaskOrderArgs {
    pub fn strategies(&self) -> Result<Vec<MaskStrategy>, String> {
        if self.strategy == "all" {
            Ok(MaskStrategy::ALL.to_vec())
        } else {
            self.strategy
                .split(',')
                .map(|s| s.trim().parse())
                .collect()
        }
    }
}
