//! Unsupervised re-identification losses over pairs of frames.
//!
//! Features of the objects in two frames are stacked (previous frame
//! first), turned into a cosine similarity matrix with a masked diagonal,
//! optionally padded with a constant placeholder column, and converted to a
//! row-stochastic assignment matrix by a softmax with adaptive temperature
//! `T = 2 ln(C + 1)`, `C` being the column count. Losses on that matrix are
//! differentiated in closed form back to the raw feature rows.
//!
//! The placeholder value is recomputed for every pair but treated as a
//! constant during differentiation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default hinge margin of the inter-frame loss.
pub const DEFAULT_MARGIN: f64 = 0.5;
/// Finite stand-in for the `-inf` diagonal inside the softmax.
pub const DIAGONAL_SENTINEL: f64 = -1e4;
const MIN_FEATURE_NORM: f64 = 1e-12;
const TIE_TOLERANCE: f64 = 1e-12;

/// `N x D` appearance features, one row per object.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        for (i, row) in rows.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("feature row {i} is not finite")));
            }
            if row.norm() < MIN_FEATURE_NORM {
                return Err(Error::ZeroNormFeature { row: i });
            }
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "row {bad} has length {}, expected {dim}",
                rows[bad].len()
            )));
        }
        Self::new(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// Two frames expected to share identities.
    Positive,
    /// Two frames from different scenes; no identity is shared.
    Negative,
}

/// Features of two frames to be matched against each other.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub prev: FeatureSet,
    pub cur: FeatureSet,
    pub kind: PairKind,
}

impl PairBatch {
    pub fn new(prev: FeatureSet, cur: FeatureSet, kind: PairKind) -> Result<Self> {
        if prev.dim() != cur.dim() {
            return Err(Error::DimensionMismatch(format!(
                "frame feature dims {} and {}",
                prev.dim(),
                cur.dim()
            )));
        }
        if prev.len() + cur.len() < 2 {
            return Err(Error::InvalidInput(
                "a pair needs at least two objects in total".into(),
            ));
        }
        Ok(Self { prev, cur, kind })
    }

    pub fn len(&self) -> usize {
        self.prev.len() + self.cur.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn stacked(&self) -> DMatrix<f64> {
        let (np, nc, d) = (self.prev.len(), self.cur.len(), self.prev.dim());
        DMatrix::from_fn(np + nc, d, |i, j| {
            if i < np {
                self.prev.rows[(i, j)]
            } else {
                self.cur.rows[(i - np, j)]
            }
        })
    }
}

/// How the placeholder column is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placeholder {
    /// No placeholder column.
    None,
    /// A fixed similarity value.
    Fixed(f64),
    /// Mean of the off-diagonal similarities of the pair.
    DynamicMean,
}

/// Which terms of the positive-pair loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub intra: bool,
    pub inter: bool,
    pub cycle: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            intra: true,
            inter: true,
            cycle: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReidLossConfig {
    pub margin: f64,
    pub placeholder: Placeholder,
    pub terms: LossTerms,
}

impl Default for ReidLossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            placeholder: Placeholder::DynamicMean,
            terms: LossTerms::default(),
        }
    }
}

/// Cosine similarities of all stacked objects, `-inf` on the diagonal,
/// plus the placeholder value when a placeholder column is used.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub square: DMatrix<f64>,
    pub placeholder: Option<f64>,
    pub n_prev: usize,
    pub n_cur: usize,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.n_prev + self.n_cur
    }

    pub fn columns(&self) -> usize {
        self.size() + usize::from(self.placeholder.is_some())
    }

    /// Mean of the finite off-diagonal entries, or 0 when there are none.
    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.size();
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.square[(i, j)];
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }

    /// Same similarities with the placeholder replaced.
    pub fn with_placeholder(mut self, placeholder: Option<f64>) -> Self {
        self.placeholder = placeholder;
        self
    }
}

/// Row-stochastic assignment matrix, one row per object and one column per
/// object plus the optional placeholder as the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub probs: DMatrix<f64>,
    pub temperature: f64,
    pub n_prev: usize,
    pub n_cur: usize,
    pub has_placeholder: bool,
}

impl AssignmentMatrix {
    pub fn size(&self) -> usize {
        self.n_prev + self.n_cur
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub intra: f64,
    pub inter: f64,
    pub cycle: f64,
    pub total: f64,
    /// Gradient of `total` with respect to the stacked feature rows
    /// (previous frame first).
    pub gradient: DMatrix<f64>,
}

/// Adaptive softmax temperature for a matrix with `columns` columns.
pub fn temperature(columns: usize) -> f64 {
    2.0 * ((columns + 1) as f64).ln()
}

fn unit_rows(f: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut u = f.clone();
    let mut norms = Vec::with_capacity(f.nrows());
    for i in 0..f.nrows() {
        let n = f.row(i).norm();
        if n < MIN_FEATURE_NORM {
            return Err(Error::ZeroNormFeature { row: i });
        }
        u.row_mut(i).scale_mut(1.0 / n);
        norms.push(n);
    }
    Ok((u, norms))
}

fn cosine_square(u: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = u * u.transpose();
    for i in 0..s.nrows() {
        s[(i, i)] = f64::NEG_INFINITY;
    }
    s
}

fn resolve_placeholder(mode: Placeholder, s: &SimilarityMatrix) -> Option<f64> {
    match mode {
        Placeholder::None => None,
        Placeholder::Fixed(p) => Some(p),
        Placeholder::DynamicMean => Some(s.off_diagonal_mean()),
    }
}

/// Cosine similarity matrix of a pair with the placeholder chosen by `mode`.
pub fn similarity(pair: &PairBatch, mode: Placeholder) -> Result<SimilarityMatrix> {
    let (u, _) = unit_rows(&pair.stacked())?;
    let mut s = SimilarityMatrix {
        square: cosine_square(&u),
        placeholder: None,
        n_prev: pair.prev.len(),
        n_cur: pair.cur.len(),
    };
    s.placeholder = resolve_placeholder(mode, &s);
    Ok(s)
}

/// Row-wise softmax of `T * S'`.
pub fn assignment(s: &SimilarityMatrix) -> AssignmentMatrix {
    let n = s.size();
    let c = s.columns();
    let t = temperature(c);
    let mut probs = DMatrix::zeros(n, c);
    let mut logits = vec![0.0; c];
    for i in 0..n {
        for (j, l) in logits.iter_mut().enumerate() {
            let v = if j == n {
                s.placeholder.unwrap_or(0.0)
            } else if i == j {
                DIAGONAL_SENTINEL
            } else {
                s.square[(i, j)]
            };
            *l = t * v;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, l) in logits.iter().enumerate() {
            let e = (l - max).exp();
            probs[(i, j)] = e;
            z += e;
        }
        for j in 0..c {
            probs[(i, j)] /= z;
        }
    }
    AssignmentMatrix {
        probs,
        temperature: t,
        n_prev: s.n_prev,
        n_cur: s.n_cur,
        has_placeholder: s.placeholder.is_some(),
    }
}

fn same_frame(m: &AssignmentMatrix, i: usize, j: usize) -> bool {
    let n = m.size();
    j < n && ((i < m.n_prev) == (j < m.n_prev))
}

/// Mass assigned within the same frame (both diagonal blocks).
pub fn loss_intra(m: &AssignmentMatrix) -> f64 {
    let mut g = DMatrix::zeros(m.probs.nrows(), m.probs.ncols());
    intra_with_grad(m, &mut g, 1.0)
}

/// Hinge between the best and second-best assignment of every row.
pub fn loss_inter(m: &AssignmentMatrix, margin: f64) -> f64 {
    let mut g = DMatrix::zeros(m.probs.nrows(), m.probs.ncols());
    inter_with_grad(m, margin, &mut g, 1.0)
}

/// Disagreement between forward and backward cross-frame assignments.
pub fn loss_cycle(m: &AssignmentMatrix) -> f64 {
    let mut g = DMatrix::zeros(m.probs.nrows(), m.probs.ncols());
    cycle_with_grad(m, &mut g, 1.0)
}

/// Mass assigned to any object column (everything except the placeholder).
pub fn loss_negative_value(m: &AssignmentMatrix) -> f64 {
    let mut g = DMatrix::zeros(m.probs.nrows(), m.probs.ncols());
    negative_with_grad(m, &mut g, 1.0)
}

fn intra_with_grad(m: &AssignmentMatrix, g: &mut DMatrix<f64>, w: f64) -> f64 {
    let n = m.size();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if same_frame(m, i, j) {
                total += m.probs[(i, j)];
                g[(i, j)] += w;
            }
        }
    }
    total
}

/// Indices of the largest and second-largest entries of a row; ties go to
/// the lower column index.
fn top_two(row: &[f64]) -> (usize, usize) {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    let mut second = usize::from(best == 0);
    for (j, &v) in row.iter().enumerate() {
        if j != best && v > row[second] {
            second = j;
        }
    }
    (best, second)
}

fn inter_with_grad(m: &AssignmentMatrix, margin: f64, g: &mut DMatrix<f64>, w: f64) -> f64 {
    let c = m.probs.ncols();
    if c < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut row = vec![0.0; c];
    for i in 0..m.size() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = m.probs[(i, j)];
        }
        let (best, second) = top_two(&row);
        let hinge = row[second] + margin - row[best];
        if hinge > 0.0 {
            total += hinge;
            // a tied top pair sits on the kink of the max; take the
            // symmetric subgradient, which is zero for both entries
            if row[best] - row[second] > TIE_TOLERANCE {
                g[(i, second)] += w;
                g[(i, best)] -= w;
            }
        }
    }
    total
}

fn cycle_with_grad(m: &AssignmentMatrix, g: &mut DMatrix<f64>, w: f64) -> f64 {
    let mut total = 0.0;
    for i in m.n_prev..m.size() {
        for j in 0..m.n_prev {
            let d = m.probs[(i, j)] - m.probs[(j, i)];
            total += d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            g[(i, j)] += w * s;
            g[(j, i)] -= w * s;
        }
    }
    total
}

fn negative_with_grad(m: &AssignmentMatrix, g: &mut DMatrix<f64>, w: f64) -> f64 {
    let n = m.size();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += m.probs[(i, j)];
            g[(i, j)] += w;
        }
    }
    total
}

/// Full forward/backward pass with an explicit placeholder.
fn evaluate(
    pair: &PairBatch,
    cfg: &ReidLossConfig,
    placeholder: Option<Option<f64>>,
) -> Result<LossReport> {
    let f = pair.stacked();
    let (u, norms) = unit_rows(&f)?;
    let mut s = SimilarityMatrix {
        square: cosine_square(&u),
        placeholder: None,
        n_prev: pair.prev.len(),
        n_cur: pair.cur.len(),
    };
    s.placeholder = match placeholder {
        Some(p) => p,
        None => resolve_placeholder(cfg.placeholder, &s),
    };
    let m = assignment(&s);
    let n = m.size();
    let mut g = DMatrix::zeros(n, m.probs.ncols());

    let (intra, inter, cycle, total) = match pair.kind {
        PairKind::Positive => {
            let w = 1.0 / n as f64;
            let intra = if cfg.terms.intra {
                intra_with_grad(&m, &mut g, w)
            } else {
                0.0
            };
            let inter = if cfg.terms.inter {
                inter_with_grad(&m, cfg.margin, &mut g, w)
            } else {
                0.0
            };
            let cycle = if cfg.terms.cycle {
                cycle_with_grad(&m, &mut g, w)
            } else {
                0.0
            };
            (intra, inter, cycle, (intra + inter + cycle) * w)
        }
        PairKind::Negative => {
            let v = negative_with_grad(&m, &mut g, 1.0);
            (v, 0.0, 0.0, v)
        }
    };

    // softmax backward, then into the similarity entries (placeholder and
    // diagonal are constants)
    let t = m.temperature;
    let mut ds = DMatrix::zeros(n, n);
    for i in 0..n {
        let dot: f64 = (0..m.probs.ncols()).map(|j| m.probs[(i, j)] * g[(i, j)]).sum();
        for j in 0..n {
            if j != i {
                ds[(i, j)] = t * m.probs[(i, j)] * (g[(i, j)] - dot);
            }
        }
    }
    let du = (&ds + ds.transpose()) * &u;
    let mut grad = DMatrix::zeros(n, f.ncols());
    for i in 0..n {
        let ui = u.row(i);
        let gi = du.row(i);
        let proj = ui.dot(&gi);
        let row = (gi - ui * proj) / norms[i];
        grad.row_mut(i).copy_from(&row);
    }

    Ok(LossReport {
        intra,
        inter,
        cycle,
        total,
        gradient: grad,
    })
}

/// Normalized positive-pair loss `(intra + inter + cycle) / (N_prev + N_cur)`.
pub fn loss_positive(pair: &PairBatch, cfg: &ReidLossConfig) -> Result<LossReport> {
    if pair.kind != PairKind::Positive {
        return Err(Error::InvalidInput("expected a positive pair".into()));
    }
    evaluate(pair, cfg, None)
}

/// Negative-pair loss: total mass on object columns.
pub fn loss_negative(pair: &PairBatch, cfg: &ReidLossConfig) -> Result<LossReport> {
    if pair.kind != PairKind::Negative {
        return Err(Error::InvalidInput("expected a negative pair".into()));
    }
    evaluate(pair, cfg, None)
}

/// Loss of a pair of either kind with the placeholder pinned to `placeholder`
/// instead of being derived from the features.
pub fn loss_with_placeholder(
    pair: &PairBatch,
    cfg: &ReidLossConfig,
    placeholder: Option<f64>,
) -> Result<LossReport> {
    evaluate(pair, cfg, Some(placeholder))
}

/// Loss of a pair according to its kind.
pub fn loss_pair(pair: &PairBatch, cfg: &ReidLossConfig) -> Result<LossReport> {
    evaluate(pair, cfg, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossReport {
    pub total: f64,
    pub positive_mean: f64,
    pub negative_mean: f64,
    pub positive_weight: f64,
    pub negative_weight: f64,
    /// Gradient of `total` for every pair, positives first, in input order.
    pub gradients: Vec<DMatrix<f64>>,
}

/// Batch loss mixing the mean positive and mean negative losses in
/// proportion to their counts.
pub fn loss_batch(
    positives: &[PairBatch],
    negatives: &[PairBatch],
    cfg: &ReidLossConfig,
) -> Result<BatchLossReport> {
    let (np, nn) = (positives.len(), negatives.len());
    if np + nn == 0 {
        return Err(Error::InvalidInput("empty loss batch".into()));
    }
    let wp = np as f64 / (np + nn) as f64;
    let wn = nn as f64 / (np + nn) as f64;
    let mut gradients = Vec::with_capacity(np + nn);
    let mut pos_sum = 0.0;
    for pair in positives {
        let r = loss_positive(pair, cfg)?;
        pos_sum += r.total;
        gradients.push(r.gradient * (wp / np as f64));
    }
    let mut neg_sum = 0.0;
    for pair in negatives {
        let r = loss_negative(pair, cfg)?;
        neg_sum += r.total;
        gradients.push(r.gradient * (wn / nn as f64));
    }
    let positive_mean = if np > 0 { pos_sum / np as f64 } else { 0.0 };
    let negative_mean = if nn > 0 { neg_sum / nn as f64 } else { 0.0 };
    Ok(BatchLossReport {
        total: wp * positive_mean + wn * negative_mean,
        positive_mean,
        negative_mean,
        positive_weight: wp,
        negative_weight: wn,
        gradients,
    })
}
