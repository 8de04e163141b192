use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use attnchain::chain::{ChainConfig, RepairPolicy, StateVector, StochasticMatrix};
use attnchain::io::grid::{full_precision, quantize, read_csv_grid, write_csv_grid, write_mask_pgm, write_pgm};
use attnchain::io::{self, Dtype, HeatmapFormat, MatrixStats};
use attnchain::ops::{self, AttentionTensor, HeadScheme, MaskingOptions};
use attnchain::segmentation::{self, Bounces, MapRequest, SegMap, SegMetrics, ThresholdRule};
use attnchain::spectral::{self, Lambda2Method, Lambda2Options, SpectralSummary};
use attnchain::synth;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::*;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or unreadable input: exit code 2.
    Usage(String),
    Domain(attnchain::Error),
    /// A check ran and reported failures: exit code 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use attnchain::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
            CliError::Domain(e) => match e {
                E::ParseError(_)
                | E::SchemaViolation(_)
                | E::BadMagic
                | E::UnsupportedVersion(..)
                | E::UnsupportedDtype(_)
                | E::FortranOrderUnsupported
                | E::TruncatedData { .. }
                | E::MissingFile(_)
                | E::InvalidConfig(_)
                | E::AlphaOutOfRange(_) => 2,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Domain(e) => write!(f, "{e}"),
        }
    }
}

impl From<attnchain::Error> for CliError {
    fn from(e: attnchain::Error) -> Self {
        CliError::Domain(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Domain(e.into())
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

pub struct Context {
    pub global: GlobalArgs,
    pub cfg: ChainConfig,
}

impl Context {
    fn policy(&self) -> RepairPolicy {
        if self.global.strict {
            RepairPolicy::Strict
        } else {
            RepairPolicy::ClampAndRenormalize
        }
    }

    fn load(&self, manifest: &Path) -> CliResult<AttentionTensor> {
        let m = io::load_manifest(manifest)?;
        Ok(io::load_tensor(&m, self.policy())?)
    }

    /// Self-describing record of a run: every flag, defaults included.
    fn provenance<A: Serialize>(&self, path: &Path, command: &str, args: &A, outputs: &[PathBuf]) -> CliResult {
        #[derive(Serialize)]
        struct Record<'a, A> {
            tool: &'static str,
            version: &'static str,
            command: &'a str,
            config: &'a GlobalArgs,
            args: &'a A,
            outputs: Vec<String>,
        }
        let record = Record {
            tool: "attnchain",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config: &self.global,
            args,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let mut text = serde_json::to_string_pretty(&record).expect("provenance serializes");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

fn beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    path.with_file_name(name)
}

fn scheme(s: SchemeArg) -> HeadScheme {
    match s {
        SchemeArg::Uniform => HeadScheme::Uniform,
        SchemeArg::Lambda2 => HeadScheme::Lambda2,
    }
}

fn layer_positions(tensor: &AttentionTensor, ids: &[usize]) -> CliResult<Vec<usize>> {
    if ids.is_empty() {
        return Ok((0..tensor.num_layers()).collect());
    }
    ids.iter()
        .map(|&id| {
            tensor
                .layer_position(id)
                .ok_or_else(|| CliError::Usage(format!("no layer {id} in manifest (layers {:?})", tensor.layer_ids())))
        })
        .collect()
}

fn chain_of(tensor: &AttentionTensor, args: &ChainArgs) -> CliResult<StochasticMatrix> {
    match args.head {
        Some(h) => {
            if h >= tensor.num_heads() {
                return Err(CliError::Usage(format!("head {h} out of range ({} heads)", tensor.num_heads())));
            }
            let mats: Vec<_> = layer_positions(tensor, &args.layers)?
                .into_iter()
                .map(|l| tensor.layer(l)[h].clone())
                .collect();
            Ok(ops::average(&mats)?)
        }
        None => {
            layer_positions(tensor, &args.layers)?;
            Ok(segmentation::aggregate_layers(tensor, &scheme(args.aggregate), &args.layers)?)
        }
    }
}

fn check_token(tensor: &AttentionTensor, t: usize) -> CliResult {
    if t >= tensor.seq_len() {
        return Err(CliError::Usage(format!("token {t} out of range (seq_len {})", tensor.seq_len())));
    }
    Ok(())
}

fn parse_threshold(s: &str) -> CliResult<ThresholdRule> {
    if s == "mean" {
        return Ok(ThresholdRule::Mean);
    }
    s.parse::<f64>()
        .ok()
        .filter(|t| t.is_finite())
        .map(ThresholdRule::Fixed)
        .ok_or_else(|| CliError::Usage(format!("threshold must be `mean` or a number, got {s:?}")))
}

fn write_vector(path: &Path, v: &StateVector) -> CliResult {
    let mut out = String::from("token_index,score\n");
    for (i, x) in v.as_slice().iter().enumerate() {
        let _ = writeln!(out, "{i},{}", full_precision(*x));
    }
    create_parent(path)?;
    fs::write(path, out)?;
    Ok(())
}

fn write_heatmap(tensor: &AttentionTensor, v: &StateVector, path: &Path, format: HeatmapFormat) -> CliResult {
    let grid = tensor.grid().ok_or(attnchain::Error::MissingGrid)?;
    create_parent(path)?;
    io::export_heatmap(v.as_slice(), grid, tensor.special_tokens(), path, format)?;
    Ok(())
}

fn create_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn heatmap_ext(format: HeatmapFormat) -> &'static str {
    match format {
        HeatmapFormat::Pgm => "pgm",
        HeatmapFormat::Csv => "csv",
    }
}

pub fn validate(_ctx: &Context, args: &ValidateArgs) -> CliResult {
    let manifest = io::load_manifest(&args.manifest)?;
    let layers = io::load_layers(&manifest)?;
    let s = manifest.seq_len;
    let stats: Vec<(usize, usize, MatrixStats)> = layers
        .par_iter()
        .flat_map_iter(|(layer, array)| {
            array
                .data
                .chunks(s * s)
                .enumerate()
                .map(move |(h, chunk)| (*layer, h, MatrixStats::of(chunk, s)))
        })
        .collect();

    println!("layer,head,max_row_deviation,min_entry,non_finite,status");
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (layer, head, st) in &stats {
        let ok = st.repairable();
        worst = worst.max(st.max_row_deviation);
        println!(
            "{layer},{head},{:.3e},{:.3e},{},{}",
            st.max_row_deviation,
            st.min_entry,
            st.non_finite,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(format!("layer {layer} head {head}"));
        }
    }
    println!(
        "# {} matrices, seq_len {s}, max row-sum deviation {worst:.3e}",
        stats.len()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "{} matrices fail the repair tolerance: {}",
            failures.len(),
            failures.join(", ")
        )))
    }
}

pub fn tokenrank(ctx: &Context, args: &TokenrankArgs) -> CliResult {
    let tensor = ctx.load(&args.manifest)?;
    let chain = chain_of(&tensor, &args.chain)?;
    let r = ops::token_rank(&chain, &ctx.cfg, args.direction)?;

    let mut rank = vec![0; r.vector.len()];
    for (pos, t) in r.vector.ranking().into_iter().enumerate() {
        rank[t] = pos + 1;
    }
    let mut out = String::from("token_index,score,rank\n");
    for (i, x) in r.vector.as_slice().iter().enumerate() {
        let _ = writeln!(out, "{i},{},{}", full_precision(*x), rank[i]);
    }
    create_parent(&args.out)?;
    fs::write(&args.out, out)?;
    let mut outputs = vec![args.out.clone()];
    if let Some(path) = &args.heatmap.heatmap {
        write_heatmap(&tensor, &r.vector, path, args.heatmap.format)?;
        outputs.push(path.clone());
    }
    ctx.provenance(&beside(&args.out), "tokenrank", args, &outputs)?;

    println!(
        "iterations={} residual={:.3e} converged={}",
        r.iterations, r.residual, r.converged
    );
    if !r.converged {
        eprintln!("warning: not converged after {} iterations", r.iterations);
    }
    Ok(())
}

pub fn bounce(ctx: &Context, args: &BounceArgs) -> CliResult {
    let tensor = ctx.load(&args.manifest)?;
    check_token(&tensor, args.token)?;
    let chain = chain_of(&tensor, &args.chain)?;
    let stationary = ops::token_rank(&chain, &ctx.cfg, args.direction)?.vector;

    let vectors = args
        .n
        .par_iter()
        .map(|b| match b {
            Bounces::Steps(n) => ops::multi_bounce(&chain, args.token, *n, args.direction),
            Bounces::Stationary => Ok(stationary.clone()),
        })
        .collect::<attnchain::Result<Vec<_>>>()?;

    fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    let mut summary = String::from("n,l1_to_tokenrank\n");
    println!("n,l1_to_tokenrank");
    for (b, v) in args.n.iter().zip(&vectors) {
        let csv = args.out.join(format!("bounce_{b}.csv"));
        write_vector(&csv, v)?;
        outputs.push(csv);
        if tensor.grid().is_some() {
            let map = args.out.join(format!("bounce_{b}_map.{}", heatmap_ext(args.format)));
            write_heatmap(&tensor, v, &map, args.format)?;
            outputs.push(map);
        }
        let d = full_precision(v.l1_distance(&stationary));
        println!("{b},{d}");
        let _ = writeln!(summary, "{b},{d}");
    }
    let summary_path = args.out.join("convergence.csv");
    fs::write(&summary_path, summary)?;
    outputs.push(summary_path);
    ctx.provenance(&args.out.join("provenance.json"), "bounce", args, &outputs)
}

pub fn select(ctx: &Context, args: &SelectArgs) -> CliResult {
    let tensor = ctx.load(&args.manifest)?;
    let chain = chain_of(&tensor, &args.chain)?;
    let token = || args.token.expect("clap requires --token for this op");
    let v = match args.op {
        SelectOp::Row => {
            check_token(&tensor, token())?;
            ops::row_select(&chain, token())?
        }
        SelectOp::Column => {
            check_token(&tensor, token())?;
            ops::column_select(&chain, token())?
        }
        SelectOp::ColumnSum => ops::column_sum(&chain)?,
    };
    write_vector(&args.out, &v)?;
    let mut outputs = vec![args.out.clone()];
    if let Some(path) = &args.heatmap.heatmap {
        write_heatmap(&tensor, &v, path, args.heatmap.format)?;
        outputs.push(path.clone());
    }
    ctx.provenance(&beside(&args.out), "select", args, &outputs)
}

pub fn lambda2(ctx: &Context, args: &Lambda2Args) -> CliResult {
    let tensor = ctx.load(&args.manifest)?;
    let opts = Lambda2Options {
        method: match args.method {
            MethodArg::Auto => None,
            MethodArg::Dense => Some(Lambda2Method::Dense),
            MethodArg::Deflated => Some(Lambda2Method::DeflatedPower),
        },
        ..Lambda2Options::default()
    };
    let positions = layer_positions(&tensor, &args.layers)?;
    let jobs: Vec<(usize, usize)> = positions
        .iter()
        .flat_map(|&l| (0..tensor.num_heads()).map(move |h| (l, h)))
        .collect();
    let values = jobs
        .par_iter()
        .map(|&(l, h)| spectral::lambda2_with(&tensor.layer(l)[h], &opts))
        .collect::<attnchain::Result<Vec<_>>>()?;

    let method = opts.resolve(tensor.seq_len());
    let mut out = String::from("layer,head,lambda2,weight,method\n");
    for (chunk, &l) in values.chunks(tensor.num_heads()).zip(&positions) {
        let summary = SpectralSummary::from_lambdas(chunk.to_vec(), method)?;
        for (h, (lam, w)) in summary.per_head_lambda2.iter().zip(&summary.weights).enumerate() {
            let _ = writeln!(
                out,
                "{},{h},{},{},{}",
                tensor.layer_ids()[l],
                full_precision(*lam),
                full_precision(*w),
                method.name()
            );
        }
    }
    print!("{out}");
    if let Some(path) = &args.out {
        create_parent(path)?;
        fs::write(path, &out)?;
        ctx.provenance(&beside(path), "lambda2", args, std::slice::from_ref(path))?;
    }
    Ok(())
}

pub fn segment(ctx: &Context, args: &SegmentArgs) -> CliResult {
    let tensor = ctx.load(&args.manifest)?;
    let target = match args.token {
        Some(t) => t,
        None => *tensor.special_tokens().first().ok_or_else(|| {
            CliError::Usage("no special tokens in manifest; pass --token".into())
        })?,
    };
    check_token(&tensor, target)?;
    layer_positions(&tensor, &args.layers)?;
    let req = MapRequest {
        target,
        bounces: args.n,
        direction: args.direction,
        scheme: scheme(args.scheme),
        layers: args.layers.clone(),
        output_size: args.size,
        threshold: parse_threshold(&args.threshold)?,
    };
    let seg = segmentation::attention_to_map(&tensor, &req, &ctx.cfg)?;

    let gt = match &args.gt {
        Some(path) => {
            let ((h, w), mask) = io::load_mask(path)?;
            if (h, w) != (seg.height, seg.width) {
                return Err(CliError::Usage(format!(
                    "ground truth is {h}x{w} but the map is {}x{}",
                    seg.height, seg.width
                )));
            }
            Some((path, mask))
        }
        None => None,
    };

    fs::create_dir_all(&args.out)?;
    let scores = args.out.join("scores.csv");
    let heatmap = args.out.join("heatmap.pgm");
    let mask = args.out.join("mask.pgm");
    write_csv_grid(&scores, seg.width, &seg.scores)?;
    write_pgm(&heatmap, seg.width, seg.height, &quantize(&seg.scores))?;
    write_mask_pgm(&mask, seg.width, seg.height, &seg.mask)?;
    let mut outputs = vec![scores, heatmap, mask];

    println!(
        "token={target} n={} direction={:?} map={}x{} foreground={}",
        args.n,
        args.direction,
        seg.height,
        seg.width,
        seg.mask.iter().filter(|&&m| m).count()
    );
    if let Some((path, mask)) = gt {
        let m = segmentation::evaluate(&seg, &mask)?;
        let metrics = args.out.join("metrics.csv");
        fs::write(&metrics, segmentation::metrics_csv(&[(image_id(path), m)]))?;
        outputs.push(metrics);
        print_metrics(&m);
    }
    ctx.provenance(&args.out.join("provenance.json"), "segment", args, &outputs)
}

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn print_metrics(m: &SegMetrics) {
    println!("accuracy={:.6} miou={:.6} ap={:.6}", m.accuracy, m.miou, m.ap);
}

pub fn mask_order(ctx: &Context, args: &MaskOrderArgs) -> CliResult {
    let strategies = args.strategies().map_err(CliError::Usage)?;
    let tensor = ctx.load(&args.manifest)?;
    let opts = MaskingOptions {
        layer_fraction: args.layer_fraction,
        seed: ctx.global.seed,
        lambda2_heads: args.lambda2_heads,
    };
    let orders = strategies
        .par_iter()
        .map(|&s| ops::masking_order(&tensor, s, &ctx.cfg, &opts))
        .collect::<attnchain::Result<Vec<_>>>()?;

    let mut out = String::from("strategy,rank,token_index\n");
    for (s, order) in strategies.iter().zip(&orders) {
        for (rank, t) in order.iter().enumerate() {
            let _ = writeln!(out, "{},{},{t}", s.name(), rank + 1);
        }
        let head: Vec<String> = order.iter().take(8).map(|t| t.to_string()).collect();
        println!("{}: {}{}", s.name(), head.join(" "), if order.len() > 8 { " ..." } else { "" });
    }
    create_parent(&args.out)?;
    fs::write(&args.out, out)?;
    ctx.provenance(&beside(&args.out), "mask-order", args, std::slice::from_ref(&args.out))
}

pub fn synth(ctx: &Context, args: &SynthArgs) -> CliResult {
    let seed = ctx.global.seed;
    let usage = |m: String| Err(CliError::Usage(m));
    if args.heads == 0 {
        return usage("--heads must be positive".into());
    }
    let (first, grid, special, gt) = match args.kind {
        SynthKind::Random | SynthKind::Block => {
            if args.n == 0 {
                return usage("--n must be positive".into());
            }
            let m = if args.kind == SynthKind::Random {
                synth::random_stochastic(args.n, seed)
            } else {
                if args.blocks == 0 || args.blocks > args.n {
                    return usage(format!("--blocks must lie in 1..={}", args.n));
                }
                if !(0.0..=1.0).contains(&args.intra) {
                    return usage("--intra must lie in [0, 1]".into());
                }
                synth::block_chain(args.n, args.blocks, args.intra)
            };
            (m, args.grid, args.special.clone(), None)
        }
        SynthKind::Decoy => (synth::decoy_chain(), args.grid, args.special.clone(), None),
        SynthKind::Planted => {
            let (h, w) = args.grid.unwrap_or((8, 8));
            if w < 2 {
                return usage("planted scenes need at least two grid columns".into());
            }
            if !(0.0..1.0).contains(&args.noise) {
                return usage("--noise must lie in [0, 1)".into());
            }
            let scene = synth::planted_scene(h, w, args.noise, seed);
            (scene.matrix, Some(scene.grid), scene.special_tokens, Some(scene.foreground))
        }
    };
    let n = first.n();
    let mut heads = vec![first];
    heads.extend((1..args.heads as u64).map(|h| synth::random_stochastic(n, seed.wrapping_add(h))));
    let tensor = AttentionTensor::new(vec![heads], special, grid)?;

    let dtype = match args.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    let manifest = io::save_tensor(&args.out, &tensor, dtype)?;
    let mut outputs = vec![manifest.clone()];
    if let (Some(mask), Some((h, w))) = (gt, grid) {
        let path = args.out.join("gt.pgm");
        write_mask_pgm(&path, w, h, &mask)?;
        outputs.push(path);
    }
    ctx.provenance(&args.out.join("provenance.json"), "synth", args, &outputs)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn evaluate(ctx: &Context, args: &EvaluateArgs) -> CliResult {
    if args.pred.len() != args.gt.len() {
        return Err(CliError::Usage(format!(
            "{} predictions but {} ground-truth masks",
            args.pred.len(),
            args.gt.len()
        )));
    }
    let rule = parse_threshold(&args.threshold)?;
    let rows = args
        .pred
        .par_iter()
        .zip(&args.gt)
        .map(|(pred, gt)| -> CliResult<(String, SegMetrics)> {
            let ((h, w), scores) = read_csv_grid(pred)?;
            let (dims, mask) = io::load_mask(gt)?;
            if dims != (h, w) {
                return Err(CliError::Usage(format!(
                    "{}: {h}x{w} scores against a {}x{} mask",
                    pred.display(),
                    dims.0,
                    dims.1
                )));
            }
            let seg = SegMap::from_scores(h, w, scores, rule)?;
            Ok((pred.display().to_string(), segmentation::evaluate(&seg, &mask)?))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let csv = segmentation::metrics_csv(&rows);
    print!("{csv}");
    create_parent(&args.out)?;
    fs::write(&args.out, csv)?;
    ctx.provenance(&beside(&args.out), "evaluate", args, std::slice::from_ref(&args.out))
}
