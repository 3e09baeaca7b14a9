//! Occlusion-center heatmaps: target rendering, focal and L1 losses, peak
//! decoding, and PGM export.

use crate::error::{Error, Result};
use crate::geometry::{self, BBox, OcclusionEvent, Point2, SigmaRule};

/// Clamp applied to predictions before taking logarithms in the focal loss.
pub const PRED_EPS: f64 = 1e-7;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MAX_PEAKS: usize = 128;

/// Row-major grid of reals, `width` cells per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    fn same_shape(&self, other: &Grid) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Occlusion-center scores on a grid downsampled by `stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: Grid,
    pub stride: u32,
}

impl Heatmap {
    /// All-zero heatmap covering an image of `image_w x image_h` pixels.
    pub fn for_image(image_w: u32, image_h: u32, stride: u32) -> Self {
        let w = image_w.div_ceil(stride) as usize;
        let h = image_h.div_ceil(stride) as usize;
        Self {
            grid: Grid::zeros(w, h),
            stride,
        }
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    /// Wraps predicted scores, clamping them to `[0, 1]`.
    pub fn from_scores(grid: Grid, stride: u32) -> Self {
        let data = grid.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self {
            grid: Grid { data, ..grid },
            stride,
        }
    }
}

/// Two-channel sub-cell offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub dx: Grid,
    pub dy: Grid,
}

impl OffsetField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            dx: Grid::zeros(width, height),
            dy: Grid::zeros(width, height),
        }
    }
}

/// Offset targets plus the mask of supervised cells.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetMap {
    pub field: OffsetField,
    pub mask: Vec<bool>,
}

impl OffsetMap {
    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.field.dx.width + x]
    }

    pub fn masked_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.field.dx.width;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(move |(i, _)| (i % w, i / w))
    }
}

/// Exponents of the penalty-reduced focal loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
        }
    }
}

/// Renders the occlusion heatmap and offset targets for one frame.
///
/// Every valid occlusion over unordered pairs contributes a Gaussian; cells
/// keep the maximum. Offsets are supervised at each quantized center. When
/// two centers share a cell, the offset of the lexicographically smallest
/// center wins so the output does not depend on box order.
pub fn render_targets(
    boxes: &[BBox],
    tau: f64,
    image_size: (u32, u32),
    stride: u32,
    rule: &SigmaRule,
) -> (Heatmap, OffsetMap, usize) {
    let events = geometry::occlusion_events(boxes, tau);
    let (heatmap, offsets) = render_events(&events, image_size, stride, rule);
    (heatmap, offsets, events.len())
}

/// Rendering step of [`render_targets`] for precomputed occlusion events.
pub fn render_events(
    events: &[OcclusionEvent],
    image_size: (u32, u32),
    stride: u32,
    rule: &SigmaRule,
) -> (Heatmap, OffsetMap) {
    let mut heatmap = Heatmap::for_image(image_size.0, image_size.1, stride);
    let (w, h) = (heatmap.width(), heatmap.height());
    let mut field = OffsetField::zeros(w, h);
    let mut mask = vec![false; w * h];
    let mut owner: Vec<Option<Point2>> = vec![None; w * h];
    let r = stride as f64;

    for ev in events {
        let sigma = rule.sigma(&ev.region, r);
        let cell = geometry::quantize(&ev.center, r);
        for y in 0..h {
            for x in 0..w {
                let g = geometry::gaussian_kernel(&cell, &Point2::new(x as f64, y as f64), sigma);
                if g > heatmap.grid.get(x, y) {
                    heatmap.grid.set(x, y, g);
                }
            }
        }
        if cell.x < 0.0 || cell.y < 0.0 || cell.x >= w as f64 || cell.y >= h as f64 {
            continue;
        }
        let (cx, cy) = (cell.x as usize, cell.y as usize);
        let idx = cy * w + cx;
        let wins = match owner[idx] {
            None => true,
            Some(prev) => (ev.center.x, ev.center.y) < (prev.x, prev.y),
        };
        if wins {
            owner[idx] = Some(ev.center);
            mask[idx] = true;
            field.dx.set(cx, cy, ev.center.x / r - cell.x);
            field.dy.set(cx, cy, ev.center.y / r - cell.y);
        }
    }
    (heatmap, OffsetMap { field, mask })
}

/// Focal loss of a single cell.
pub fn focal_term(y: f64, y_hat: f64, params: &FocalParams) -> f64 {
    let p = y_hat.clamp(PRED_EPS, 1.0 - PRED_EPS);
    if y == 1.0 {
        -(1.0 - p).powf(params.alpha) * p.ln()
    } else {
        -(1.0 - y).powf(params.beta) * p.powf(params.alpha) * (1.0 - p).ln()
    }
}

/// Unnormalized sum of the focal loss over all cells.
pub fn focal_center_loss(target: &Heatmap, pred: &Heatmap, params: &FocalParams) -> Result<f64> {
    target.grid.same_shape(&pred.grid)?;
    Ok(target
        .grid
        .values()
        .iter()
        .zip(pred.grid.values())
        .map(|(&y, &p)| focal_term(y, p, params))
        .sum())
}

/// L1 offset error summed over supervised cells and both channels.
pub fn offset_loss(target: &OffsetMap, pred: &OffsetField) -> Result<f64> {
    target.field.dx.same_shape(&pred.dx)?;
    target.field.dy.same_shape(&pred.dy)?;
    Ok(target
        .masked_cells()
        .map(|(x, y)| {
            (pred.dx.get(x, y) - target.field.dx.get(x, y)).abs()
                + (pred.dy.get(x, y) - target.field.dy.get(x, y)).abs()
        })
        .sum())
}

/// Total occlusion loss, normalized by the number of valid occlusions
/// (clamped to at least one).
pub fn occlusion_loss(center_loss: f64, offset_loss: f64, valid_count: usize) -> f64 {
    (center_loss + offset_loss) / valid_count.max(1) as f64
}

/// Mean of per-frame occlusion losses over a batch of
/// `(center_loss, offset_loss, valid_count)` triples.
pub fn occlusion_loss_batch_mean(frames: &[(f64, f64, usize)]) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    frames
        .iter()
        .map(|&(c, o, n)| occlusion_loss(c, o, n))
        .sum::<f64>()
        / frames.len() as f64
}

/// Decodes occlusion centers from a predicted heatmap.
///
/// A cell is a peak when its score exceeds `score_threshold` and it beats
/// every 3x3 neighbour; equal neighbours are resolved in favour of the
/// lowest `(y, x)` index. Peaks are returned by descending score with at
/// most `max_peaks` entries, centers in pixels.
pub fn decode_peaks(
    pred: &Heatmap,
    offsets: &OffsetField,
    score_threshold: f64,
    max_peaks: usize,
) -> Vec<(Point2, f64)> {
    let (w, h) = (pred.width(), pred.height());
    let g = &pred.grid;
    let r = pred.stride as f64;
    let mut peaks: Vec<(usize, usize, f64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = g.get(x, y);
            if v <= score_threshold {
                continue;
            }
            let mut is_peak = true;
            'nb: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if (nx, ny) == (x, y) {
                        continue;
                    }
                    let n = g.get(nx, ny);
                    if n > v || (n == v && (ny, nx) < (y, x)) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push((x, y, v));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    peaks.truncate(max_peaks);
    peaks
        .into_iter()
        .map(|(x, y, v)| {
            let center = Point2::new(
                r * (x as f64 + offsets.dx.get(x, y)),
                r * (y as f64 + offsets.dy.get(x, y)),
            );
            (center, v)
        })
        .collect()
}

/// Encodes a heatmap as a binary PGM (P5) image, scaling by 255 with
/// round-half-up.
pub fn to_pgm(heatmap: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", heatmap.width(), heatmap.height()).into_bytes();
    out.extend(
        heatmap
            .grid
            .values()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8),
    );
    out
}
