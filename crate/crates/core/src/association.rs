//! Tracklet/detection cost matrices and rectangular minimum-cost matching.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Entry value marking a forbidden pairing.
pub const GATED: f64 = f64::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationConfig {
    /// Weight of the appearance term; `1 - lambda` weighs the IoU term.
    pub lambda: f64,
    pub iou_gate: f64,
    pub cos_gate: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            iou_gate: 0.1,
            cos_gate: 0.3,
        }
    }
}

/// What the cost builder needs to know about one tracklet.
#[derive(Debug, Clone, Copy)]
pub struct TrackQuery<'a> {
    pub predicted: BBox,
    pub feature: &'a [f64],
    /// Lost tracklets skip the IoU gate.
    pub apply_iou_gate: bool,
}

/// Rows are tracklets, columns detections.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::InvalidInput("cost entries must be finite or +inf".into()));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::DimensionMismatch("ragged cost rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_gated(&self, r: usize, c: usize) -> bool {
        self.values[(r, c)] == GATED
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.matches.iter().map(|&(r, c)| cost.values[(r, c)]).sum()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn build_cost(
    tracks: &[TrackQuery<'_>],
    detections: &[BBox],
    det_features: &[Vec<f64>],
    cfg: &AssociationConfig,
) -> Result<CostMatrix> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::Config {
            key: "lambda".into(),
            reason: format!("{} outside [0, 1]", cfg.lambda),
        });
    }
    if detections.len() != det_features.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} detections but {} features",
            detections.len(),
            det_features.len()
        )));
    }
    for t in tracks {
        if let Some(f) = det_features.iter().find(|f| f.len() != t.feature.len()) {
            return Err(Error::DimensionMismatch(format!(
                "track feature dim {} vs detection feature dim {}",
                t.feature.len(),
                f.len()
            )));
        }
    }
    let values = DMatrix::from_fn(tracks.len(), detections.len(), |i, j| {
        let t = &tracks[i];
        let iou = t.predicted.iou(&detections[j]);
        let cos = cosine(t.feature, &det_features[j]);
        if (t.apply_iou_gate && iou < cfg.iou_gate) || cos < cfg.cos_gate {
            GATED
        } else {
            (cfg.lambda * (1.0 - cos) + (1.0 - cfg.lambda) * (1.0 - iou)).clamp(0.0, 2.0)
        }
    });
    Ok(CostMatrix { values })
}

/// Minimum-cost matching on a rectangular matrix.
///
/// Among matchings that avoid gated entries, the one with the most pairs is
/// chosen, and among those the one with least total cost.
pub fn solve(cost: &CostMatrix) -> Assignment {
    let (n, m) = (cost.nrows(), cost.ncols());
    if n == 0 || m == 0 {
        return Assignment {
            matches: vec![],
            unmatched_rows: (0..n).collect(),
            unmatched_cols: (0..m).collect(),
        };
    }
    let transposed = n > m;
    let a = if transposed {
        cost.values.transpose()
    } else {
        cost.values.clone()
    };
    let (rows, cols) = (a.nrows(), a.ncols());

    let finite: Vec<f64> = a.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(0.0_f64, f64::min);
    let hi = finite.iter().copied().fold(0.0_f64, f64::max);
    let big = (rows as f64 + 1.0) * (hi.abs() + lo.abs() + 1.0);
    let w = |i: usize, j: usize| {
        let v = a[(i, j)];
        if v.is_finite() {
            v
        } else {
            big
        }
    };

    let row_of_col = shortest_augmenting_path(rows, cols, w);

    let mut matches = Vec::new();
    for (j, r) in row_of_col.iter().enumerate() {
        if let Some(i) = *r {
            if a[(i, j)].is_finite() {
                matches.push(if transposed { (j, i) } else { (i, j) });
            }
        }
    }
    matches.sort_unstable();
    let mut row_used = vec![false; n];
    let mut col_used = vec![false; m];
    for &(r, c) in &matches {
        row_used[r] = true;
        col_used[c] = true;
    }
    Assignment {
        matches,
        unmatched_rows: (0..n).filter(|&r| !row_used[r]).collect(),
        unmatched_cols: (0..m).filter(|&c| !col_used[c]).collect(),
    }
}

/// Potentials-based Hungarian method for `rows <= cols`; returns the row
/// assigned to each column.
fn shortest_augmenting_path(
    rows: usize,
    cols: usize,
    w: impl Fn(usize, usize) -> f64,
) -> Vec<Option<usize>> {
    // 1-based with column 0 as the virtual source.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = w(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=cols)
        .map(|j| if p[j] == 0 { None } else { Some(p[j] - 1) })
        .collect()
}
