//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use otrack_core::association::{solve, CostMatrix, GATED};
use otrack_core::embedder::{
    eval_retrieval, init_model, matching_accuracy, train, DescriptorSequence, MatchRule, TrainConfig,
};
use otrack_core::geometry::{recover_box, BBox, SigmaRule};
use otrack_core::heatmap::{
    decode_peaks, focal_center_loss, offset_loss, render_targets, FocalParams, Grid, Heatmap, OffsetField, OffsetMap,
};
use otrack_core::mot::{self, clear_mot, identity_overlaps, idf1, MotRecord};
use otrack_core::reid_loss::{
    assignment, loss_batch, loss_pair, loss_with_placeholder, similarity, FeatureSet, PairBatch, PairKind,
    Placeholder, ReidLossConfig,
};
use otrack_core::simulator::{generate, SimConfig};
use otrack_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn fail<T>(msg: impl Into<String>) -> Result<T, String> {
    Err(msg.into())
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 12] = [
        ("recovery exactness", recovery_exactness),
        ("loss gradients", loss_gradients),
        ("assignment identities", assignment_identities),
        ("focal and offset point values", focal_offset_values),
        ("heatmap round trip", heatmap_round_trip),
        ("assignment solver oracle", solver_oracle),
        ("unsupervised re-id learning", reid_learning),
        ("placeholder ablation", placeholder_ablation),
        ("refinding ablation", refinding_ablation),
        ("metrics oracle", metrics_oracle),
        ("format fidelity", format_fidelity),
        ("manifest replay determinism", replay_determinism),
    ];
    // Panic messages are reported on the FAIL line instead.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.2} s]", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.2} s]", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(elapsed: Duration, budget: Duration, what: &str) -> Result<(), String> {
    if elapsed < budget {
        Ok(())
    } else {
        fail(format!("{what} took {elapsed:?}, budget {budget:?}"))
    }
}

// 1 -------------------------------------------------------------------------

fn recovery_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut scenarios = Vec::with_capacity(10_000);
    while scenarios.len() < 10_000 {
        let truth = BBox::from_xywh(
            rng.random_range(0.0..500.0),
            rng.random_range(0.0..400.0),
            rng.random_range(5.0..80.0),
            rng.random_range(10.0..160.0),
        )
        .unwrap();
        let neighbor = BBox::from_xywh(
            truth.x_l + rng.random_range(-60.0..60.0),
            truth.y_t + rng.random_range(-100.0..100.0),
            rng.random_range(5.0..100.0),
            rng.random_range(10.0..200.0),
        )
        .unwrap();
        if let Some(overlap) = truth.intersect(&neighbor) {
            if overlap.area() > 0.0 {
                scenarios.push((truth, neighbor, overlap.center()));
            }
        }
    }
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (truth, neighbor, center) in &scenarios {
        // Noiseless: the prediction has the true size and position.
        let got = recover_box(truth, neighbor, center);
        worst = worst.max(got.max_abs_diff(truth));
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(1), "10k recoveries")?;
    if worst < 1e-9 {
        Ok(format!("max coordinate error {worst:.1e} over 10000 scenarios"))
    } else {
        fail(format!("max coordinate error {worst:.3e}"))
    }
}

// 2 -------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-6;

fn random_pair(rng: &mut ChaCha8Rng, kind: PairKind) -> PairBatch {
    let np = rng.random_range(1..=6);
    let nc = rng.random_range(1..=6);
    let d = rng.random_range(2..=16);
    let mut mk = |n: usize| FeatureSet::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))).unwrap();
    let prev = mk(np);
    let cur = mk(nc);
    PairBatch::new(prev, cur, kind).unwrap()
}

/// Forward pass on or within 1e-6 of a kink of the piecewise loss.
fn near_kink(pair: &PairBatch, cfg: &ReidLossConfig) -> bool {
    let m = assignment(&similarity(pair, cfg.placeholder).unwrap());
    let p = &m.probs;
    for i in 0..p.nrows() {
        let mut row: Vec<f64> = p.row(i).iter().copied().collect();
        row.sort_by(|a, b| b.total_cmp(a));
        if row.len() >= 2
            && (row[0] - row[1] < KINK_MARGIN
                || (pair.kind == PairKind::Positive && (row[1] + cfg.margin - row[0]).abs() < KINK_MARGIN))
        {
            return true;
        }
    }
    pair.kind == PairKind::Positive
        && (m.n_prev..m.size()).any(|i| (0..m.n_prev).any(|j| (p[(i, j)] - p[(j, i)]).abs() < KINK_MARGIN))
}

fn smooth_pair(rng: &mut ChaCha8Rng, kind: PairKind, cfg: &ReidLossConfig) -> PairBatch {
    loop {
        let pair = random_pair(rng, kind);
        if !near_kink(&pair, cfg) {
            return pair;
        }
    }
}

fn nudged(pair: &PairBatch, row: usize, col: usize, delta: f64) -> PairBatch {
    let mut prev = pair.prev.matrix().clone();
    let mut cur = pair.cur.matrix().clone();
    if row < prev.nrows() {
        prev[(row, col)] += delta;
    } else {
        cur[(row - prev.nrows(), col)] += delta;
    }
    PairBatch::new(FeatureSet::new(prev).unwrap(), FeatureSet::new(cur).unwrap(), pair.kind).unwrap()
}

fn numeric_gradient(pair: &PairBatch, cfg: &ReidLossConfig) -> DMatrix<f64> {
    let frozen = similarity(pair, cfg.placeholder).unwrap().placeholder;
    DMatrix::from_fn(pair.len(), pair.prev.dim(), |i, j| {
        let up = loss_with_placeholder(&nudged(pair, i, j, FD_STEP), cfg, frozen).unwrap().total;
        let dn = loss_with_placeholder(&nudged(pair, i, j, -FD_STEP), cfg, frozen).unwrap().total;
        (up - dn) / (2.0 * FD_STEP)
    })
}

fn rel_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let scale = analytic.amax().max(numeric.amax()).max(1e-8);
    (analytic - numeric).amax() / scale
}

fn loss_gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ReidLossConfig::default();
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for k in 0..200 {
        match k % 3 {
            0 => {
                let pair = smooth_pair(&mut rng, PairKind::Positive, &cfg);
                worst = worst.max(rel_error(&loss_pair(&pair, &cfg).unwrap().gradient, &numeric_gradient(&pair, &cfg)));
            }
            1 => {
                let pair = smooth_pair(&mut rng, PairKind::Negative, &cfg);
                worst = worst.max(rel_error(&loss_pair(&pair, &cfg).unwrap().gradient, &numeric_gradient(&pair, &cfg)));
            }
            _ => {
                let np = rng.random_range(1..=4);
                let nn = rng.random_range(0..=2);
                let pos: Vec<_> = (0..np).map(|_| smooth_pair(&mut rng, PairKind::Positive, &cfg)).collect();
                let neg: Vec<_> = (0..nn).map(|_| smooth_pair(&mut rng, PairKind::Negative, &cfg)).collect();
                let report = loss_batch(&pos, &neg, &cfg).unwrap();
                for (i, pair) in pos.iter().chain(&neg).enumerate() {
                    let w = if i < np {
                        report.positive_weight / np as f64
                    } else {
                        report.negative_weight / nn as f64
                    };
                    worst = worst.max(rel_error(&report.gradients[i], &(numeric_gradient(pair, &cfg) * w)));
                }
            }
        }
        instances += 1;
    }
    within(start.elapsed(), Duration::from_secs(30), "gradient checks")?;
    if worst < 1e-5 {
        Ok(format!("max relative error {worst:.2e} over {instances} instances"))
    } else {
        fail(format!("max relative error {worst:.3e}"))
    }
}

// 3 -------------------------------------------------------------------------

fn permuted(pair: &PairBatch, rng: &mut ChaCha8Rng) -> PairBatch {
    let shuffle = |m: &DMatrix<f64>, rng: &mut ChaCha8Rng| {
        let mut order: Vec<usize> = (0..m.nrows()).collect();
        order.shuffle(rng);
        FeatureSet::new(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(order[i], j)])).unwrap()
    };
    PairBatch::new(shuffle(pair.prev.matrix(), rng), shuffle(pair.cur.matrix(), rng), pair.kind).unwrap()
}

fn scaled(pair: &PairBatch, rng: &mut ChaCha8Rng) -> PairBatch {
    let scale = |m: &DMatrix<f64>, rng: &mut ChaCha8Rng| {
        let mut out = m.clone();
        for mut row in out.row_iter_mut() {
            row *= rng.random_range(0.1..10.0);
        }
        FeatureSet::new(out).unwrap()
    };
    PairBatch::new(scale(pair.prev.matrix(), rng), scale(pair.cur.matrix(), rng), pair.kind).unwrap()
}

fn assignment_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let placeholders = [Placeholder::DynamicMean, Placeholder::None, Placeholder::Fixed(0.2)];
    let (mut row_err, mut perm_err, mut scale_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for k in 0..1000 {
        let kind = if k % 4 == 3 { PairKind::Negative } else { PairKind::Positive };
        let cfg = ReidLossConfig { placeholder: placeholders[k % 3], ..Default::default() };
        let pair = random_pair(&mut rng, kind);
        let m = assignment(&similarity(&pair, cfg.placeholder).unwrap());
        for row in m.probs.row_iter() {
            row_err = row_err.max((row.sum() - 1.0).abs());
        }
        let base = loss_pair(&pair, &cfg).unwrap().total;
        let rel = |x: f64| (x - base).abs() / base.abs().max(1.0);
        perm_err = perm_err.max(rel(loss_pair(&permuted(&pair, &mut rng), &cfg).unwrap().total));
        scale_err = scale_err.max(rel(loss_pair(&scaled(&pair, &mut rng), &cfg).unwrap().total));
    }
    let detail = format!("row-sum error {row_err:.1e}, permutation {perm_err:.1e}, scale {scale_err:.1e}");
    // Reordered floating-point sums may differ in the last bits only.
    if row_err < 1e-9 && perm_err < 1e-12 && scale_err < 1e-12 {
        Ok(format!("{detail} over 1000 instances"))
    } else {
        fail(detail)
    }
}

// 4 -------------------------------------------------------------------------

fn single_cell(v: f64) -> Heatmap {
    Heatmap::from_scores(Grid::from_vec(1, 1, vec![v]).unwrap(), 4)
}

fn focal_offset_values() -> Verdict {
    let p = FocalParams::default();
    let focal = |y: f64, y_hat: f64| focal_center_loss(&single_cell(y), &single_cell(y_hat), &p).unwrap();
    let offset = |mask: bool, target: (f64, f64), pred: (f64, f64)| {
        let mut field = OffsetField::zeros(1, 1);
        field.dx.set(0, 0, target.0);
        field.dy.set(0, 0, target.1);
        let mut guess = OffsetField::zeros(1, 1);
        guess.dx.set(0, 0, pred.0);
        guess.dy.set(0, 0, pred.1);
        offset_loss(&OffsetMap { field, mask: vec![mask] }, &guess).unwrap()
    };
    let cases = [
        ("focal y=1 pred=1", focal(1.0, 1.0), 0.0),
        ("focal y=1 pred=0.5", focal(1.0, 0.5), 0.25 * 2f64.ln()),
        ("focal y=0 pred=0", focal(0.0, 0.0), 0.0),
        ("offset exact", offset(true, (0.25, 0.5), (0.25, 0.5)), 0.0),
        ("offset (0.25,0.5) vs 0", offset(true, (0.25, 0.5), (0.0, 0.0)), 0.75),
        ("offset empty mask", offset(false, (0.25, 0.5), (3.0, -2.0)), 0.0),
    ];
    let worst = cases.iter().map(|c| (c.1 - c.2).abs()).fold(0.0, f64::max);
    if (focal(1.0, 0.5) - 0.173287).abs() < 5e-7 && worst < 1e-9 {
        Ok(format!("6 point values, max deviation {worst:.1e}; y=1, pred=0.5 gives {:.6}", focal(1.0, 0.5)))
    } else {
        let bad: Vec<String> = cases
            .iter()
            .filter(|c| (c.1 - c.2).abs() >= 1e-9)
            .map(|c| format!("{} = {} (want {})", c.0, c.1, c.2))
            .collect();
        fail(bad.join("; "))
    }
}

// 5 -------------------------------------------------------------------------

fn heatmap_round_trip() -> Verdict {
    let stride = 4u32;
    let (w, h) = (640u32, 480u32);
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=10usize);
        // One occluding pair per 128x240 slot keeps the centers far apart.
        let mut slots: Vec<usize> = (0..10).collect();
        slots.shuffle(&mut rng);
        let mut boxes = Vec::new();
        let mut truth = Vec::new();
        for &slot in &slots[..k] {
            let (sx, sy) = ((slot % 5) as f64 * 128.0, (slot / 5) as f64 * 240.0);
            let bw = rng.random_range(20.0..40.0);
            let bh = rng.random_range(40.0..80.0);
            let a = BBox::from_xywh(sx + rng.random_range(20.0..50.0), sy + rng.random_range(20.0..80.0), bw, bh).unwrap();
            let b = a.translate(rng.random_range(-3.0..3.0), rng.random_range(-6.0..6.0));
            truth.push(a.intersect(&b).unwrap().center());
            boxes.push(a);
            boxes.push(b);
        }
        let (hm, offsets, events) = render_targets(&boxes, 0.7, (w, h), stride, &SigmaRule::default());
        if events != k {
            return fail(format!("seed {seed}: {events} valid occlusions rendered, expected {k}"));
        }
        let peaks = decode_peaks(&hm, &offsets.field, 0.5, 100);
        if peaks.len() != k {
            return fail(format!("seed {seed}: decoded {} centers, expected {k}", peaks.len()));
        }
        for c in &truth {
            let d = peaks.iter().map(|p| p.0.distance_sq(c)).fold(f64::INFINITY, f64::min).sqrt();
            worst = worst.max(d);
        }
        total += k;
    }
    if worst <= stride as f64 / 2.0 {
        Ok(format!("{total} centers over 100 seeds, max error {worst:.1e} px"))
    } else {
        fail(format!("max center error {worst} px exceeds stride/2"))
    }
}

// 6 -------------------------------------------------------------------------

/// Best (cardinality, cost) over all partial injections of finite entries.
fn brute_force(c: &CostMatrix) -> (usize, f64) {
    fn rec(c: &CostMatrix, r: usize, used: &mut [bool], k: usize, s: f64, best: &mut (usize, f64)) {
        if r == c.nrows() {
            if k > best.0 || (k == best.0 && s < best.1) {
                *best = (k, s);
            }
            return;
        }
        rec(c, r + 1, used, k, s, best);
        for j in 0..c.ncols() {
            if !used[j] && !c.is_gated(r, j) {
                used[j] = true;
                rec(c, r + 1, used, k + 1, s + c.values[(r, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, f64::INFINITY);
    rec(c, 0, &mut vec![false; c.ncols()], 0, 0.0, &mut best);
    if best.0 == 0 {
        best.1 = 0.0;
    }
    best
}

fn solver_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut gated_cases = 0;
    for case in 0..1000 {
        let r = rng.random_range(1..=6);
        let c = rng.random_range(1..=6);
        let gate_p = if case % 2 == 0 { 0.0 } else { rng.random_range(0.1..0.8) };
        let values = DMatrix::from_fn(r, c, |_, _| {
            if rng.random::<f64>() < gate_p {
                GATED
            } else {
                rng.random_range(0.0..2.0)
            }
        });
        if values.iter().any(|v| v.is_infinite()) {
            gated_cases += 1;
        }
        let cost = CostMatrix::new(values).unwrap();
        let got = solve(&cost);
        if got.matches.iter().any(|&(i, j)| cost.is_gated(i, j)) {
            return fail(format!("case {case}: matched a gated entry"));
        }
        let (k, best) = brute_force(&cost);
        let total = got.total_cost(&cost);
        if got.matches.len() != k || (total - best).abs() > 1e-9 {
            return fail(format!(
                "case {case}: solver {} pairs cost {total}, exhaustive {k} pairs cost {best}",
                got.matches.len()
            ));
        }
    }
    Ok(format!("1000 matrices up to 6x6 ({gated_cases} with gated entries) match exhaustive search"))
}

// 7 -------------------------------------------------------------------------

fn scene(seed: u64, objects: usize, frames: usize, spawn: f64, despawn: f64) -> DescriptorSequence {
    let cfg = SimConfig {
        objects,
        frames,
        seed,
        spawn_rate: spawn,
        despawn_rate: despawn,
        ..Default::default()
    };
    DescriptorSequence::from_synthetic(&generate(&cfg).unwrap())
}

fn reid_learning() -> Verdict {
    let start = Instant::now();
    let train_data: Vec<_> = (1..=4).map(|s| scene(s, 20, 100, 0.0, 0.0)).collect();
    let held_out = scene(100, 20, 100, 0.0, 0.0);
    let cfg = TrainConfig { steps: 2000, seed: 0, ..Default::default() };
    let untrained = init_model(&cfg, 64).unwrap();
    let baseline = matching_accuracy(&untrained, &held_out, 1, MatchRule::Top1).unwrap();
    let (model, _) = train(&untrained, &train_data, &cfg).unwrap();
    let accuracy = matching_accuracy(&model, &held_out, 1, MatchRule::Top1).unwrap();
    let retrieval = eval_retrieval(&model, &held_out).unwrap();
    let elapsed = start.elapsed();
    let detail = format!(
        "top-1 {accuracy:.3}, R1 {:.3}, mAP {:.3}, untrained {baseline:.3}",
        retrieval.rank1, retrieval.map
    );
    within(elapsed, Duration::from_secs(120), "training and evaluation")?;
    if accuracy >= 0.95 && retrieval.rank1 >= 0.90 && baseline <= 0.5 {
        Ok(detail)
    } else {
        fail(detail)
    }
}

// 8 -------------------------------------------------------------------------

fn placeholder_ablation() -> Verdict {
    let mut rows = Vec::new();
    let mut ok = true;
    for seed in 0..5u64 {
        let train_data: Vec<_> = (0..4).map(|k| scene(seed * 10 + k, 10, 100, 0.3, 0.03)).collect();
        let held_out = scene(seed * 10 + 9, 10, 100, 0.3, 0.03);
        let acc = |placeholder: Placeholder| {
            let cfg = TrainConfig { placeholder, seed, ..Default::default() };
            let (m, _) = train(&init_model(&cfg, 64).unwrap(), &train_data, &cfg).unwrap();
            matching_accuracy(&m, &held_out, 1, MatchRule::BirthDeathAware).unwrap()
        };
        let (with, without) = (acc(Placeholder::DynamicMean), acc(Placeholder::None));
        ok &= with >= without;
        rows.push(format!("{with:.3}/{without:.3}"));
    }
    let detail = format!("mean vs none per seed: {}", rows.join(" "));
    if ok {
        Ok(detail)
    } else {
        fail(detail)
    }
}

// 9, 12: command-line runs ---------------------------------------------------

fn otrack(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_otrack"))
        .args(args)
        .output()
        .map_err(|e| format!("spawning otrack: {e}"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        fail(format!("otrack {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read_records(path: &Path) -> Result<Vec<MotRecord>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    mot::parse(&text).map_err(|e| e.to_string())
}

fn refinding_ablation() -> Verdict {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("sim.cfg");
    fs::write(&config, "objects = 15\nframes = 150\n").unwrap();
    let mut rows = Vec::new();
    let mut ok = true;
    for seed in 0..5 {
        let seq = tmp.path().join(format!("seq{seed}"));
        otrack(&["simulate", "--seed", &seed.to_string(), "--config", s(&config), "--out", s(&seq)])?;
        let gt = read_records(&seq.join("gt.txt"))?;
        let mut reports = Vec::new();
        for refind in ["on", "off"] {
            let out = tmp.path().join(format!("track{seed}{refind}"));
            otrack(&["track", s(&seq), "--refind", refind, "--embedder", "oracle", "--out", s(&out)])?;
            reports.push(clear_mot(&gt, &read_records(&out.join("results.txt"))?, 0.5).map_err(|e| e.to_string())?);
        }
        let (on, off) = (&reports[0], &reports[1]);
        ok &= on.fn_ < off.fn_ && on.mota() > off.mota() && on.ids <= off.ids;
        rows.push(format!(
            "FN {}/{} MOTA {:.4}/{:.4} IDS {}/{}",
            on.fn_,
            off.fn_,
            on.mota(),
            off.mota(),
            on.ids,
            off.ids
        ));
    }
    within(start.elapsed(), Duration::from_secs(60), "5-seed ablation")?;
    let detail = format!("on/off per seed: {}", rows.join("; "));
    if ok {
        Ok(detail)
    } else {
        fail(detail)
    }
}

// 10 ------------------------------------------------------------------------

fn rec(frame: u32, id: i64, x: f64, y: f64, w: f64, h: f64) -> MotRecord {
    MotRecord::new(frame, id, BBox::from_xywh(x, y, w, h).unwrap(), 1.0)
}

fn brute_idtp(c: &DMatrix<f64>) -> f64 {
    fn go(c: &DMatrix<f64>, r: usize, used: &mut [bool]) -> f64 {
        if r == c.nrows() {
            return 0.0;
        }
        let mut best = go(c, r + 1, used);
        for j in 0..c.ncols() {
            if !used[j] {
                used[j] = true;
                best = best.max(c[(r, j)] + go(c, r + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(c, 0, &mut vec![false; c.ncols()])
}

fn random_tracks(rng: &mut ChaCha8Rng, id_offset: i64, jitter: f64) -> Vec<MotRecord> {
    let ids = rng.random_range(1..=4);
    let mut out = Vec::new();
    for frame in 1..=6u32 {
        for id in 1..=ids {
            if rng.random::<f64>() < 0.75 {
                let cx = rng.random_range(0..4) as f64 * 20.0 + rng.random::<f64>() * jitter;
                let cy = rng.random_range(0..2) as f64 * 40.0;
                out.push(rec(frame, id + id_offset, cx, cy, 20.0, 40.0));
            }
        }
    }
    out
}

fn metrics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut checked = 0;
    while checked < 500 {
        let gt = random_tracks(&mut rng, 0, 0.0);
        if gt.is_empty() {
            continue;
        }
        let pred = random_tracks(&mut rng, 10, 8.0);
        let (_, _, counts) = identity_overlaps(&gt, &pred, 0.5);
        let idtp = if counts.is_empty() { 0.0 } else { brute_idtp(&counts) };
        let expect = 2.0 * idtp / (gt.len() + pred.len()) as f64;
        let got = idf1(&gt, &pred, 0.5).map_err(|e| e.to_string())?;
        if (got - expect).abs() > 1e-12 {
            return fail(format!("instance {checked}: idf1 {got}, bijection search {expect}"));
        }
        checked += 1;
    }

    // Two objects whose predicted ids swap after frame 2.
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for f in 1..=4 {
        gt.push(rec(f, 1, 0.0, 0.0, 10.0, 10.0));
        gt.push(rec(f, 2, 50.0, 0.0, 10.0, 10.0));
        let (a, b) = if f < 3 { (1, 2) } else { (2, 1) };
        pred.push(rec(f, a, 0.0, 0.0, 10.0, 10.0));
        pred.push(rec(f, b, 50.0, 0.0, 10.0, 10.0));
    }
    let swap = clear_mot(&gt, &pred, 0.5).map_err(|e| e.to_string())?;
    // MOTA = 1 - (FN + FP + IDS) / GT = 1 - (0 + 0 + 2) / 8
    if swap.ids != 2 || swap.mota() != 1.0 - 2.0 / 8.0 {
        return fail(format!("swap fixture: IDS {} MOTA {}", swap.ids, swap.mota()));
    }

    let perfect = clear_mot(&gt, &gt, 0.5).map_err(|e| e.to_string())?;
    let perfect_idf1 = idf1(&gt, &gt, 0.5).map_err(|e| e.to_string())?;
    if perfect.mota() != 1.0 || perfect_idf1 != 1.0 {
        return fail(format!("perfect prediction: MOTA {} IDF1 {perfect_idf1}", perfect.mota()));
    }
    Ok("500 IDF1 instances match bijection search; swap fixture IDS 2, MOTA 0.75; perfect MOTA = IDF1 = 1".into())
}

// 11 ------------------------------------------------------------------------

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn parse_line_of(text: &str) -> Option<usize> {
    match mot::parse(text) {
        Err(Error::Parse { line, .. }) => Some(line),
        _ => None,
    }
}

fn format_fidelity() -> Verdict {
    let mut checked = Vec::new();
    for name in ["gt.txt", "det.txt"] {
        let text = fs::read_to_string(fixture(name)).map_err(|e| e.to_string())?;
        let back = mot::write(&mot::parse(&text).map_err(|e| format!("{name}: {e}"))?);
        if back != text {
            return fail(format!("{name}: write(parse(text)) differs from the file"));
        }
        checked.push(name);
    }
    let loose = fs::read_to_string(fixture("results_loose.txt")).map_err(|e| e.to_string())?;
    let once = mot::write(&mot::parse(&loose).map_err(|e| e.to_string())?);
    let twice = mot::write(&mot::parse(&once).map_err(|e| e.to_string())?);
    if once != twice {
        return fail("results_loose.txt: canonical form is not a fixed point");
    }
    checked.push("results_loose.txt");

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seq = tmp.path().join("seq");
    otrack(&["simulate", "--seed", "11", "--out", s(&seq)])?;
    for name in ["gt.txt", "det.txt"] {
        let text = fs::read_to_string(seq.join(name)).map_err(|e| e.to_string())?;
        if mot::write(&mot::parse(&text).map_err(|e| e.to_string())?) != text {
            return fail(format!("simulated {name}: round trip differs"));
        }
    }

    let malformed = fs::read_to_string(fixture("malformed.txt")).map_err(|e| e.to_string())?;
    let cases = [
        (malformed.as_str(), 3),
        ("1,1,1,1,1,1,1\n\n1,2,3\n", 3),
        ("1,1,0,0,0,5,1\n", 1),
        ("1,1,0,0,5,5,1\n0,1,0,0,5,5,1\n", 2),
    ];
    for (text, line) in cases {
        if parse_line_of(text) != Some(line) {
            return fail(format!("malformed input {text:?}: expected an error on line {line}"));
        }
    }
    Ok(format!(
        "bitwise round trip on {} fixtures plus simulated gt/det; {} malformed inputs report their line",
        checked.len(),
        cases.len()
    ))
}

// 12 ------------------------------------------------------------------------

/// Byte comparison of every file but the manifest.
fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut n = 0;
    for entry in fs::read_dir(a).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name();
        if name == "manifest.txt" {
            continue;
        }
        let x = fs::read(entry.path()).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(&name)).map_err(|e| format!("{}: {e}", b.join(&name).display()))?;
        if x != y {
            return fail(format!("{} differs after replay", entry.path().display()));
        }
        n += 1;
    }
    Ok(n)
}

fn replay_determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name);
    let sim_cfg = p("sim.cfg");
    fs::write(&sim_cfg, "objects = 8\nframes = 60\nfp_rate = 0.3\nocclusion_mode = noisy\n").unwrap();
    let train_cfg = p("train.cfg");
    fs::write(&train_cfg, "steps = 50\n").unwrap();

    otrack(&["simulate", "--seed", "21", "--config", s(&sim_cfg), "--out", s(&p("a"))])?;
    otrack(&["simulate", "--seed", "22", "--config", s(&sim_cfg), "--out", s(&p("b"))])?;
    otrack(&["train-reid", s(&p("a")), s(&p("b")), "--seed", "3", "--config", s(&train_cfg), "--out", s(&p("model"))])?;
    let ckpt = p("model").join("model.otem");
    otrack(&["track", s(&p("a")), "--refind", "on", "--out", s(&p("track_on"))])?;
    otrack(&["track", s(&p("a")), "--refind", "off", "--embedder", "raw", "--out", s(&p("track_off"))])?;
    otrack(&["track", s(&p("a")), "--embedder", s(&ckpt), "--out", s(&p("track_model"))])?;
    otrack(&[
        "eval",
        "--gt",
        s(&p("a").join("gt.txt")),
        "--results",
        s(&p("track_on").join("results.txt")),
        "--gt",
        s(&p("a").join("gt.txt")),
        "--results",
        s(&p("track_off").join("results.txt")),
        "--out",
        s(&p("eval")),
    ])?;
    otrack(&["render", s(&p("a")), "--frame", "10", "--out", s(&p("render"))])?;

    let runs = ["a", "b", "model", "track_on", "track_off", "track_model", "eval", "render"];
    let mut files = 0;
    for run in runs {
        let again = p(&format!("{run}_replay"));
        otrack(&["replay", s(&p(run)), "--out", s(&again)])?;
        files += same_outputs(&p(run), &again)?;
        // In-place replay overwrites with identical bytes.
        let before: Vec<(std::ffi::OsString, Vec<u8>)> = fs::read_dir(p(run))
            .unwrap()
            .map(|e| e.unwrap())
            .filter(|e| e.file_name() != "manifest.txt")
            .map(|e| (e.file_name(), fs::read(e.path()).unwrap()))
            .collect();
        otrack(&["replay", s(&p(run).join("manifest.txt"))])?;
        for (name, bytes) in before {
            if fs::read(p(run).join(&name)).unwrap() != bytes {
                return fail(format!("{run}/{} changed after in-place replay", name.to_string_lossy()));
            }
        }
    }
    Ok(format!("{} commands replayed, {files} output files bitwise identical", runs.len()))
}
