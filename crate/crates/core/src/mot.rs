//! MOTChallenge text records and CLEAR-MOT / IDF1 evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::association::{solve, CostMatrix, GATED};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const MOSTLY_TRACKED: f64 = 0.8;
pub const MOSTLY_LOST: f64 = 0.2;

/// One line of a MOTChallenge file. Detections use `id == -1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRecord {
    pub frame: u32,
    pub id: i64,
    pub bbox: BBox,
    pub conf: f64,
    pub trailing: [f64; 3],
}

impl MotRecord {
    pub fn new(frame: u32, id: i64, bbox: BBox, conf: f64) -> Self {
        Self {
            frame,
            id,
            bbox,
            conf,
            trailing: [-1.0; 3],
        }
    }
}

fn field(raw: &str, line: usize, name: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        line,
        reason: format!("{name}: cannot parse `{}` as a number", raw.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            reason: format!("{name}: non-finite value"),
        });
    }
    Ok(v)
}

fn integer(raw: &str, line: usize, name: &str) -> Result<i64> {
    let v = field(raw, line, name)?;
    if v.fract() != 0.0 {
        return Err(Error::Parse {
            line,
            reason: format!("{name}: `{}` is not an integer", raw.trim()),
        });
    }
    Ok(v as i64)
}

/// Parses comma-separated records; blank lines are skipped.
pub fn parse(content: &str) -> Result<Vec<MotRecord>> {
    let mut out = Vec::new();
    for (idx, text) in content.lines().enumerate() {
        let line = idx + 1;
        if text.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() < 7 {
            return Err(Error::Parse {
                line,
                reason: format!("expected at least 7 fields, found {}", parts.len()),
            });
        }
        let frame = integer(parts[0], line, "frame")?;
        if frame < 1 || frame > u32::MAX as i64 {
            return Err(Error::Parse {
                line,
                reason: format!("frame {frame} out of range"),
            });
        }
        let id = integer(parts[1], line, "id")?;
        let x = field(parts[2], line, "x")?;
        let y = field(parts[3], line, "y")?;
        let w = field(parts[4], line, "w")?;
        let h = field(parts[5], line, "h")?;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Parse {
                line,
                reason: format!("non-positive box size {w}x{h}"),
            });
        }
        let conf = field(parts[6], line, "conf")?;
        let mut trailing = [-1.0; 3];
        for (k, raw) in parts.iter().skip(7).take(3).enumerate() {
            trailing[k] = field(raw, line, "trailing")?;
        }
        let bbox = BBox::new(x, y, x + w, y + h).map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        out.push(MotRecord {
            frame: frame as u32,
            id,
            bbox,
            conf,
            trailing,
        });
    }
    Ok(out)
}

fn fmt_real(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Formats records sorted by `(frame, id)`, reals with two decimals.
pub fn write(records: &[MotRecord]) -> String {
    let mut sorted: Vec<&MotRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.frame, r.id));
    let mut out = String::new();
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            r.id,
            fmt_real(r.bbox.x_l),
            fmt_real(r.bbox.y_t),
            fmt_real(r.bbox.width()),
            fmt_real(r.bbox.height()),
            fmt_real(r.conf),
            fmt_real(r.trailing[0]),
            fmt_real(r.trailing[1]),
            fmt_real(r.trailing[2]),
        );
    }
    out
}

type FrameMap = BTreeMap<u32, Vec<(i64, BBox)>>;

fn by_frame(records: &[MotRecord]) -> FrameMap {
    let mut m: FrameMap = BTreeMap::new();
    for r in records {
        m.entry(r.frame).or_default().push((r.id, r.bbox));
    }
    for v in m.values_mut() {
        v.sort_by_key(|e| e.0);
    }
    m
}

/// Raw counts; rates are derived so that reports over several sequences can
/// be summed with [`MetricsReport::merge`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub total_gt: usize,
    pub total_pred: usize,
    pub matches: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub frag: usize,
    pub mt: usize,
    pub ml: usize,
    pub gt_tracks: usize,
    /// Sum of `1 - IoU` over matches.
    pub distance_sum: f64,
    pub idtp: usize,
}

impl MetricsReport {
    pub fn mota(&self) -> f64 {
        1.0 - (self.fn_ + self.fp + self.ids) as f64 / self.total_gt as f64
    }

    pub fn motp(&self) -> f64 {
        if self.matches == 0 {
            0.0
        } else {
            self.distance_sum / self.matches as f64
        }
    }

    pub fn recall(&self) -> f64 {
        self.matches as f64 / self.total_gt as f64
    }

    pub fn precision(&self) -> f64 {
        if self.total_pred == 0 {
            0.0
        } else {
            self.matches as f64 / self.total_pred as f64
        }
    }

    pub fn idf1(&self) -> f64 {
        let denom = (self.total_gt + self.total_pred) as f64;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * self.idtp as f64 / denom
        }
    }

    pub fn merge(&mut self, other: &MetricsReport) {
        self.total_gt += other.total_gt;
        self.total_pred += other.total_pred;
        self.matches += other.matches;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.ids += other.ids;
        self.frag += other.frag;
        self.mt += other.mt;
        self.ml += other.ml;
        self.gt_tracks += other.gt_tracks;
        self.distance_sum += other.distance_sum;
        self.idtp += other.idtp;
    }

    pub const CSV_HEADER: &'static str = "name,MOTA,MOTP,IDF1,Recall,MT,ML,FP,FN,IDS,Frag";

    pub fn csv_row(&self, name: &str) -> String {
        format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{}",
            self.mota(),
            self.motp(),
            self.idf1(),
            self.recall(),
            self.mt,
            self.ml,
            self.fp,
            self.fn_,
            self.ids,
            self.frag
        )
    }
}

/// Aligned text table, one row per named report.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(8);
    let mut out = format!(
        "{:<name_w$} {:>7} {:>7} {:>7} {:>7} {:>5} {:>5} {:>7} {:>7} {:>5} {:>5}\n",
        "sequence", "MOTA", "MOTP", "IDF1", "Recall", "MT", "ML", "FP", "FN", "IDS", "Frag"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<name_w$} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>5} {:>5} {:>7} {:>7} {:>5} {:>5}",
            name,
            r.mota(),
            r.motp(),
            r.idf1(),
            r.recall(),
            r.mt,
            r.ml,
            r.fp,
            r.fn_,
            r.ids,
            r.frag
        );
    }
    out
}

fn iou_cost(gt: &[(i64, BBox)], pred: &[(i64, BBox)], thr: f64) -> CostMatrix {
    CostMatrix {
        values: DMatrix::from_fn(gt.len(), pred.len(), |i, j| {
            let iou = gt[i].1.iou(&pred[j].1);
            if iou >= thr {
                1.0 - iou
            } else {
                GATED
            }
        }),
    }
}

/// CLEAR-MOT counts plus IDF1 for one sequence.
pub fn clear_mot(gt: &[MotRecord], pred: &[MotRecord], iou_threshold: f64) -> Result<MetricsReport> {
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let gt_frames = by_frame(gt);
    let pred_frames = by_frame(pred);
    let frames: BTreeSet<u32> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();

    let mut report = MetricsReport {
        total_gt: gt.len(),
        total_pred: pred.len(),
        ..Default::default()
    };
    let mut last_match: HashMap<i64, i64> = HashMap::new();
    // Per gt id: matched flag at each frame where the object is annotated.
    let mut history: BTreeMap<i64, Vec<bool>> = BTreeMap::new();
    let empty = Vec::new();

    for f in frames {
        let g = gt_frames.get(&f).unwrap_or(&empty);
        let p = pred_frames.get(&f).unwrap_or(&empty);
        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();

        for (i, (gid, gb)) in g.iter().enumerate() {
            let Some(&hid) = last_match.get(gid) else { continue };
            if let Some(j) = p.iter().position(|(id, _)| *id == hid) {
                if !p_used[j] && gb.iou(&p[j].1) >= iou_threshold {
                    g_used[i] = true;
                    p_used[j] = true;
                    pairs.push((i, j));
                }
            }
        }

        let gi: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let pj: Vec<usize> = (0..p.len()).filter(|&j| !p_used[j]).collect();
        let sub_g: Vec<(i64, BBox)> = gi.iter().map(|&i| g[i]).collect();
        let sub_p: Vec<(i64, BBox)> = pj.iter().map(|&j| p[j]).collect();
        for (a, b) in solve(&iou_cost(&sub_g, &sub_p, iou_threshold)).matches {
            let (i, j) = (gi[a], pj[b]);
            if let Some(&prev) = last_match.get(&g[i].0) {
                if prev != p[j].0 {
                    report.ids += 1;
                }
            }
            g_used[i] = true;
            p_used[j] = true;
            pairs.push((i, j));
        }

        for &(i, j) in &pairs {
            last_match.insert(g[i].0, p[j].0);
            report.distance_sum += 1.0 - g[i].1.iou(&p[j].1);
        }
        report.matches += pairs.len();
        report.fn_ += g_used.iter().filter(|u| !**u).count();
        report.fp += p_used.iter().filter(|u| !**u).count();
        for (i, (gid, _)) in g.iter().enumerate() {
            history.entry(*gid).or_default().push(g_used[i]);
        }
    }

    report.gt_tracks = history.len();
    for flags in history.values() {
        let cover = flags.iter().filter(|m| **m).count() as f64 / flags.len() as f64;
        if cover >= MOSTLY_TRACKED {
            report.mt += 1;
        }
        if cover <= MOSTLY_LOST {
            report.ml += 1;
        }
        report.frag += flags.windows(2).filter(|w| w[0] && !w[1]).count();
    }
    report.idtp = id_true_positives(&gt_frames, &pred_frames, iou_threshold);
    Ok(report)
}

/// Frame-wise overlap counts between every gt id and every predicted id.
pub fn identity_overlaps(
    gt: &[MotRecord],
    pred: &[MotRecord],
    iou_threshold: f64,
) -> (Vec<i64>, Vec<i64>, DMatrix<f64>) {
    overlaps(&by_frame(gt), &by_frame(pred), iou_threshold)
}

fn overlaps(gt: &FrameMap, pred: &FrameMap, thr: f64) -> (Vec<i64>, Vec<i64>, DMatrix<f64>) {
    let gids: Vec<i64> = gt.values().flatten().map(|e| e.0).collect::<BTreeSet<_>>().into_iter().collect();
    let pids: Vec<i64> = pred.values().flatten().map(|e| e.0).collect::<BTreeSet<_>>().into_iter().collect();
    let gidx: HashMap<i64, usize> = gids.iter().enumerate().map(|(k, v)| (*v, k)).collect();
    let pidx: HashMap<i64, usize> = pids.iter().enumerate().map(|(k, v)| (*v, k)).collect();
    let mut counts = DMatrix::zeros(gids.len(), pids.len());
    for (f, g) in gt {
        let Some(p) = pred.get(f) else { continue };
        for (gid, gb) in g {
            for (pid, pb) in p {
                if gb.iou(pb) >= thr {
                    counts[(gidx[gid], pidx[pid])] += 1.0;
                }
            }
        }
    }
    (gids, pids, counts)
}

fn id_true_positives(gt: &FrameMap, pred: &FrameMap, thr: f64) -> usize {
    let (_, _, counts) = overlaps(gt, pred, thr);
    if counts.is_empty() {
        return 0;
    }
    // Zero-overlap pairs stay finite so that the objective is pure IDTP.
    let cost = CostMatrix { values: -counts.clone() };
    solve(&cost)
        .matches
        .iter()
        .map(|&(i, j)| counts[(i, j)] as usize)
        .sum()
}

pub fn idf1(gt: &[MotRecord], pred: &[MotRecord], iou_threshold: f64) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let idtp = id_true_positives(&by_frame(gt), &by_frame(pred), iou_threshold);
    Ok(2.0 * idtp as f64 / (gt.len() + pred.len()) as f64)
}
