//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use attnchain::chain::{bounce, power_iterate, ChainConfig, RepairPolicy, StateVector, StochasticMatrix};
use attnchain::io::npy::{read_npy, write_npy};
use attnchain::io::{load_array, save_array, Dtype, NpyArray};
use attnchain::ops::{self, AttentionTensor, Direction};
use attnchain::segmentation::{self, attention_to_map, average_precision, Bounces, MapRequest};
use attnchain::spectral::{lambda2, lambda2_with, Lambda2Method, Lambda2Options};
use attnchain::{synth, Error};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: f64) -> Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_secs,
        format!("took {:.2}s, limit {limit_secs}s", elapsed.as_secs_f64()),
    )
}

/// Random chains from two families: i.i.d. uniform rows and softmaxed logits.
fn seeded_chain(n: usize, seed: u64) -> StochasticMatrix {
    if seed.is_multiple_of(2) {
        synth::random_stochastic(n, seed)
    } else {
        synth::softmax_attention(n, 2.0, &mut synth::rng(seed))
    }
}

fn tight(alpha: f64) -> ChainConfig {
    ChainConfig::new(alpha, 1e-24, 10_000).unwrap()
}

/// Stationary vector of `alpha A + (1 - alpha)/n ee^T` by a direct solve of
/// `(P^T - I) v = 0` with the last equation replaced by `sum(v) = 1`.
fn nalgebra_stationary(a: &StochasticMatrix, alpha: f64) -> Vec<f64> {
    let n = a.n();
    let p = DMatrix::from_fn(n, n, |i, j| alpha * a.get(i, j) + (1.0 - alpha) / n as f64);
    let mut m = p.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    m.lu().solve(&b).expect("non-singular").iter().copied().collect()
}

fn steady_state_correctness() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let n = 2 + (seed as usize * 62) / 99;
        let a = seeded_chain(n, seed);
        let r = ops::token_rank(&a, &tight(0.85), Direction::Incoming).map_err(|e| e.to_string())?;
        ensure(r.converged, format!("seed {seed} did not converge"))?;
        let oracle = nalgebra_stationary(&a, 0.85);
        let d = r
            .vector
            .as_slice()
            .iter()
            .zip(&oracle)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(d);
    }
    ensure(worst < 1e-8, format!("max Linf {worst:.3e}"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("100 chains, max Linf {worst:.2e}"))
}

fn analytic_two_state() -> Check {
    let start = Instant::now();
    let m = StochasticMatrix::from_rows(&[vec![0.9, 0.1], vec![0.5, 0.5]], RepairPolicy::Strict)
        .map_err(|e| e.to_string())?;
    let cfg = ChainConfig::default().with_alpha(0.999999).map_err(|e| e.to_string())?;
    let v = ops::token_rank(&m, &cfg, Direction::Incoming).map_err(|e| e.to_string())?.vector;
    let (a, b) = (v.as_slice()[0], v.as_slice()[1]);
    ensure(
        (a - 5.0 / 6.0).abs() < 1e-4 && (b - 1.0 / 6.0).abs() < 1e-4,
        format!("got ({a}, {b})"),
    )?;
    within(start.elapsed(), 1.0)?;
    Ok(format!("({a:.6}, {b:.6})"))
}

fn operation_identities() -> Check {
    let mut worst = 0.0f64;
    let mut track = |a: &[f64], b: &[f64]| {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    };
    for seed in 0..100u64 {
        let n = 2 + (seed as usize % 40);
        let a = seeded_chain(n, 1000 + seed);
        let t = seed as usize % n;
        let e = |e: Error| e.to_string();

        let row = ops::row_select(&a, t).map_err(e)?;
        let one = bounce(&a, &StateVector::one_hot(n, t).map_err(e)?, 1).map_err(e)?;
        track(row.as_slice(), one.as_slice());
        track(row.as_slice(), a.row(t));

        let colsum = ops::column_sum(&a).map_err(e)?;
        let direct: Vec<f64> = (0..n).map(|j| (0..n).map(|i| a.get(i, j)).sum()).collect();
        let scaled: Vec<f64> = colsum.as_slice().iter().map(|x| x * n as f64).collect();
        track(&scaled, &direct);

        let col = ops::column_select(&a, t).map_err(e)?;
        let column: Vec<f64> = (0..n).map(|i| a.get(i, t)).collect();
        let total: f64 = column.iter().sum();
        let normalized: Vec<f64> = column.iter().map(|x| x / total).collect();
        track(col.as_slice(), &normalized);
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:.3e}"))?;
    Ok(format!("100 chains, max deviation {worst:.2e}"))
}

fn mix_identity_invariance() -> Check {
    let cfg = tight(0.85);
    let mut worst = 0.0f64;
    let mut slower = 0;
    let cases = 30;
    for seed in 0..cases {
        let n = 3 + (seed as usize * 5) % 60;
        let adjusted = seeded_chain(n, 500 + seed).teleport_adjust(0.85).map_err(|e| e.to_string())?;
        ensure(adjusted.min_entry() > 0.0, "chain not strictly positive")?;
        let mixed = adjusted.mix_identity();
        let a = power_iterate(&adjusted, &cfg, None).map_err(|e| e.to_string())?;
        let b = power_iterate(&mixed, &cfg, None).map_err(|e| e.to_string())?;
        ensure(a.converged && b.converged, format!("seed {seed} did not converge"))?;
        worst = worst.max(a.vector.linf_distance(&b.vector));
        if b.iterations > a.iterations {
            slower += 1;
        }
    }
    ensure(worst < 1e-8, format!("max Linf {worst:.3e}"))?;
    ensure(slower == cases, format!("mixed chain slower in only {slower}/{cases}"))?;
    Ok(format!("{cases} chains, max Linf {worst:.2e}, mixed chain always slower"))
}

fn lambda2_analytics() -> Check {
    let e = |e: Error| e.to_string();
    for p in [0.05, 0.1, 0.25, 0.5] {
        let m = StochasticMatrix::from_rows(&[vec![1.0 - p, p], vec![p, 1.0 - p]], RepairPolicy::Strict).map_err(e)?;
        let l = lambda2(&m).map_err(e)?;
        ensure((l - (1.0 - 2.0 * p).abs()).abs() < 1e-10, format!("p={p}: {l}"))?;
    }
    let u = lambda2(&StochasticMatrix::uniform(16)).map_err(e)?;
    ensure(u.abs() < 1e-10, format!("uniform: {u}"))?;

    let dense = Lambda2Options { method: Some(Lambda2Method::Dense), ..Lambda2Options::default() };
    let deflated = Lambda2Options { method: Some(Lambda2Method::DeflatedPower), ..Lambda2Options::default() };
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let n = (4.0 * 128f64.powf(i as f64 / 49.0)).round() as usize;
        let m = match i % 3 {
            0 => synth::random_stochastic(n, i),
            1 => synth::softmax_attention(n, 2.0, &mut synth::rng(i)),
            _ => synth::block_chain(n, 2 + i as usize % 3, 0.9),
        };
        let d = lambda2_with(&m, &dense).map_err(e)?;
        let p = lambda2_with(&m, &deflated).map_err(e)?;
        worst = worst.max((d - p).abs());
    }
    ensure(worst < 1e-6, format!("dense vs deflated max gap {worst:.3e}"))?;
    Ok(format!("two-state exact, uniform 0, dense vs deflated max gap {worst:.2e} (n up to 512)"))
}

fn metastability() -> Check {
    let e = |e: Error| e.to_string();
    let mut block_min = f64::INFINITY;
    for n in [4, 8, 16, 32, 64] {
        block_min = block_min.min(lambda2(&synth::block_chain(n, 2, 0.98)).map_err(e)?);
    }
    ensure(block_min > 0.9, format!("block chain lambda2 {block_min}"))?;
    let mut below = 0;
    let mut total = 0.0;
    for seed in 0..100u64 {
        let n = 8 + (seed as usize * 56) / 99;
        let l = lambda2(&synth::random_stochastic(n, 7000 + seed)).map_err(e)?;
        total += l;
        if l < 0.5 {
            below += 1;
        }
    }
    ensure(below >= 95, format!("only {below}/100 random chains below 0.5"))?;
    Ok(format!(
        "block min |lambda2| {block_min:.3}, random mean {:.3}, {below}/100 below 0.5",
        total / 100.0
    ))
}

fn multi_bounce_convergence() -> Check {
    let e = |e: Error| e.to_string();
    let alpha = 0.85;
    let mut latest = 0;
    for seed in 0..50u64 {
        let n = 8 + (seed as usize * 7) % 57;
        let a = seeded_chain(n, 300 + seed);
        let adjusted = a.teleport_adjust(alpha).map_err(e)?;
        let reference = ops::token_rank(&a, &ChainConfig::new(alpha, 1e-28, 10_000).unwrap(), Direction::Incoming).map_err(e)?;
        ensure(reference.converged, format!("seed {seed}: token rank did not converge"))?;
        let stationary = reference.vector;
        let rate = alpha * lambda2(&a).map_err(e)?;
        let bound = (1e-6f64.ln() / rate.ln()).ceil() as usize + 5;
        let horizon = bound.max(64);

        let mut v = StateVector::one_hot(n, seed as usize % n).map_err(e)?;
        let mut dist = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            v = bounce(&adjusted, &v, 1).map_err(e)?;
            dist.push(v.l1_distance(&stationary));
        }
        ensure(
            dist[bound - 1] < 1e-6,
            format!("seed {seed}: distance {:.3e} at n={bound}", dist[bound - 1]),
        )?;
        // Past ~1e-13 the distance sits at round-off level and may wobble.
        if let Some(k) = (1..64).find(|&k| dist[k - 1] > 1e-13 && dist[k] > dist[k - 1] + 1e-13) {
            return Err(format!("seed {seed}: distance rises at n={}: {:?}", k + 1, &dist[k.saturating_sub(3)..k + 2]));
        }
        latest = latest.max(bound);
    }
    Ok(format!("50 chains, below 1e-6 by the bound (largest bound n={latest}), non-increasing to n=64"))
}

/// AP integrated step-wise over every distinct-score cut.
fn brute_force_ap(scores: &[f64], gt: &[bool]) -> f64 {
    let positives = gt.iter().filter(|&&g| g).count() as f64;
    let mut cuts = scores.to_vec();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for c in cuts {
        let picked: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= c).collect();
        let tp = picked.iter().filter(|&&i| gt[i]).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / picked.len() as f64;
        prev_recall = recall;
    }
    ap
}

fn segmentation_metrics() -> Check {
    let e = |e: Error| e.to_string();
    let ap = average_precision(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]);
    ensure((ap - 5.0 / 6.0).abs() < 1e-12, format!("4-pixel AP {ap}"))?;

    let mut rng = synth::rng(88);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let scores: Vec<f64> = (0..64)
            .map(|_| {
                let x: f64 = rng.gen();
                if k % 2 == 0 { x } else { (x * 5.0).floor() / 5.0 }
            })
            .collect();
        let mut gt: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.4)).collect();
        gt[k] = true;
        worst = worst.max((average_precision(&scores, &gt) - brute_force_ap(&scores, &gt)).abs());
    }
    ensure(worst < 1e-12, format!("AP vs brute force {worst:.3e}"))?;

    let cfg = ChainConfig::default();
    let mut min_acc = f64::INFINITY;
    for seed in 0..5 {
        let scene = synth::planted_scene(8, 8, 0.3, seed);
        let t = AttentionTensor::new(vec![vec![scene.matrix]], scene.special_tokens, Some(scene.grid)).map_err(e)?;
        let map = |n| {
            let req = MapRequest { bounces: Bounces::Steps(n), ..MapRequest::new(scene.query_token) };
            attention_to_map(&t, &req, &cfg)
        };
        let (one, two) = (map(1).map_err(e)?, map(2).map_err(e)?);
        let m = segmentation::evaluate(&two, &scene.foreground).map_err(e)?;
        min_acc = min_acc.min(m.accuracy);
        let (h1, h2) = (segmentation::entropy(&one.scores), segmentation::entropy(&two.scores));
        ensure(h2 < h1, format!("seed {seed}: entropy n=2 {h2} >= n=1 {h1}"))?;
    }
    ensure(min_acc > 0.95, format!("planted mask accuracy {min_acc}"))?;
    Ok(format!("4-pixel AP 0.8333, brute-force gap {worst:.1e}, planted accuracy >= {min_acc:.3}, entropy drops"))
}

fn contrast_ordering() -> Check {
    let e = |e: Error| e.to_string();
    let m = synth::decoy_chain();
    let cs = ops::column_sum(&m).map_err(e)?.argmax();
    let tr = ops::token_rank(&m, &ChainConfig::default(), Direction::Incoming).map_err(e)?.vector.argmax();
    ensure(cs == 0 && tr == 4, format!("column-sum top {cs}, token-rank top {tr}"))?;
    Ok("column-sum ranks state 0 first, token-rank ranks state 4 first".into())
}

fn io_round_trip() -> Check {
    let e = |e: Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = synth::rng(2024);
    for k in 0..1000 {
        let rank = rng.gen_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=6)).collect();
        let len: usize = shape.iter().product();
        let (dtype, data): (Dtype, Vec<f64>) = if k % 2 == 0 {
            (Dtype::F64, (0..len).map(|_| f64::from_bits(rng.gen())).collect())
        } else {
            let mut vals = Vec::with_capacity(len);
            while vals.len() < len {
                let x = f32::from_bits(rng.gen());
                if !x.is_nan() {
                    vals.push(x as f64);
                }
            }
            (Dtype::F32, vals)
        };
        let a = NpyArray::new(shape, data, dtype).map_err(e)?;
        let path = dir.path().join(format!("a{k}.npy"));
        save_array(&path, &a).map_err(e)?;
        let b = load_array(&path, dtype).map_err(e)?;
        let same = a.shape == b.shape
            && a.data.len() == b.data.len()
            && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, format!("array {k} changed"))?;
    }

    let good = {
        let mut buf = Vec::new();
        write_npy(&mut buf, &NpyArray::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], Dtype::F64).map_err(e)?).map_err(e)?;
        buf
    };
    let patch = |from: &str, to: &str| -> Vec<u8> {
        assert_eq!(from.len(), to.len());
        let at = good
            .windows(from.len())
            .position(|w| w == from.as_bytes())
            .expect("pattern in header");
        let mut out = good.clone();
        out[at..at + to.len()].copy_from_slice(to.as_bytes());
        out
    };
    let mut bad_magic = good.clone();
    bad_magic[1] = b'X';
    let mut bad_version = good.clone();
    bad_version[6] = 3;
    let cases: Vec<(&str, Vec<u8>, fn(&Error) -> bool)> = vec![
        ("magic", bad_magic, |e| matches!(e, Error::BadMagic)),
        ("version", bad_version, |e| matches!(e, Error::UnsupportedVersion(..))),
        ("dtype", patch("'<f8'", "'>f8'"), |e| matches!(e, Error::UnsupportedDtype(_))),
        ("fortran", patch("False", "True "), |e| matches!(e, Error::FortranOrderUnsupported)),
        ("truncated", good[..150].to_vec(), |e| matches!(e, Error::TruncatedData { .. })),
        ("header", patch("'shape'", "'shap!'"), |e| matches!(e, Error::ParseError(_))),
    ];
    for (name, bytes, expected) in cases {
        match read_npy(&mut bytes.as_slice()) {
            Err(err) if expected(&err) => {}
            other => return Err(format!("malformed {name}: got {other:?}")),
        }
    }

    let start = Instant::now();
    pipeline(dir.path())?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "1000 arrays bit-exact, 6 malformed headers rejected, CLI pipeline {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let run = |args: &[&str]| -> Result<String, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_attnchain"))
            .args(args)
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    };
    run(&["synth", "--kind", "planted", "--grid", "12x12", "--seed", "5", "--out", "scene"])?;
    run(&["validate", "scene/manifest.json"])?;
    run(&["tokenrank", "scene/manifest.json", "--out", "rank.csv", "--heatmap", "rank.pgm"])?;
    run(&["segment", "scene/manifest.json", "--token", "1", "--gt", "scene/gt.pgm", "--out", "seg"])?;
    let metrics = std::fs::read_to_string(dir.join("seg/metrics.csv")).map_err(|e| e.to_string())?;
    let accuracy: f64 = metrics
        .lines()
        .nth(1)
        .and_then(|l| l.split(',').nth(1))
        .and_then(|x| x.parse().ok())
        .ok_or("unreadable metrics.csv")?;
    ensure(accuracy > 0.95, format!("pipeline accuracy {accuracy}"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 10] = [
        (1, "steady-state matches dense oracle", steady_state_correctness),
        (2, "analytic two-state chain", analytic_two_state),
        (3, "operation identities", operation_identities),
        (4, "identity-mixing invariance", mix_identity_invariance),
        (5, "lambda2 analytics and dense/deflated agreement", lambda2_analytics),
        (6, "metastability of structured chains", metastability),
        (7, "multi-bounce convergence to token rank", multi_bounce_convergence),
        (8, "segmentation metrics and consolidation", segmentation_metrics),
        (9, "column-sum vs token-rank ordering", contrast_ordering),
        (10, "I/O round trip and CLI pipeline", io_round_trip),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {id:>2} {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {id:>2} {name}: {why} [{secs:.2}s]");
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
