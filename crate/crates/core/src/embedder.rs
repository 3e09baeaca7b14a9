//! A small trainable embedding from raw appearance descriptors to features,
//! trained with the unsupervised re-identification losses, plus retrieval
//! and cross-frame matching evaluation.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::association::cosine;
use crate::config::{check, parse_kv, render_kv, typed, unknown_key};
use crate::error::{Error, Result};
use crate::reid_loss::{loss_batch, similarity, FeatureSet, PairBatch, PairKind, Placeholder, ReidLossConfig};
use crate::simulator::{stream, SyntheticSequence};

const MAGIC: &[u8; 4] = b"OTEM";
const VERSION: u32 = 1;

/// Raw appearance signature of one observation.
pub type Descriptor = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorFrame {
    pub frame: u32,
    pub descriptors: Vec<Descriptor>,
    /// Ground-truth identity per descriptor; used for evaluation only.
    pub ids: Vec<Option<i64>>,
}

/// Per-frame descriptors of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSequence {
    pub frames: Vec<DescriptorFrame>,
}

impl DescriptorSequence {
    pub fn from_synthetic(seq: &SyntheticSequence) -> Self {
        Self {
            frames: seq
                .frames
                .iter()
                .map(|f| DescriptorFrame {
                    frame: f.frame,
                    descriptors: f.descriptors.clone(),
                    ids: f.det_truth.clone(),
                })
                .collect(),
        }
    }

    /// Frames `< cut` and frames `>= cut` (by position).
    pub fn split_at(&self, cut: usize) -> (Self, Self) {
        let cut = cut.min(self.frames.len());
        (
            Self { frames: self.frames[..cut].to_vec() },
            Self { frames: self.frames[cut..].to_vec() },
        )
    }

    pub fn dim(&self) -> Option<usize> {
        self.frames.iter().flat_map(|f| f.descriptors.first()).map(Vec::len).next()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// `f = W x + b`.
    Linear,
    /// `f = W2 tanh(W1 x + b1) + b2`.
    TwoLayerTanh,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            Self::Linear => 0,
            Self::TwoLayerTanh => 1,
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "tanh2" => Ok(Self::TwoLayerTanh),
            _ => Err(Error::Config {
                key: "model".into(),
                reason: format!("expected linear|tanh2, found `{s}`"),
            }),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::TwoLayerTanh => "tanh2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel {
    pub kind: ModelKind,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// Empty for [`ModelKind::Linear`].
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl EmbedderModel {
    /// Single layer, identity weights, zero bias.
    pub fn identity(d: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            d_in: d,
            d_hidden: d,
            d_out: d,
            w1: DMatrix::identity(d, d),
            b1: DVector::zeros(d),
            w2: DMatrix::zeros(0, 0),
            b2: DVector::zeros(0),
        }
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn random(kind: ModelKind, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d_in == 0 || d_out < 2 || (kind == ModelKind::TwoLayerTanh && d_hidden == 0) {
            return Err(Error::InvalidInput(format!(
                "bad model dims {d_in} -> {d_hidden} -> {d_out}"
            )));
        }
        let mut gauss = |r: usize, c: usize, fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
        };
        Ok(match kind {
            ModelKind::Linear => Self {
                kind,
                d_in,
                d_hidden: d_out,
                d_out,
                w1: gauss(d_out, d_in, d_in),
                b1: DVector::zeros(d_out),
                w2: DMatrix::zeros(0, 0),
                b2: DVector::zeros(0),
            },
            ModelKind::TwoLayerTanh => Self {
                kind,
                d_in,
                d_hidden,
                d_out,
                w1: gauss(d_hidden, d_in, d_in),
                b1: DVector::zeros(d_hidden),
                w2: gauss(d_out, d_hidden, d_hidden),
                b2: DVector::zeros(d_out),
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in checkpoint order: `W1` row-major, `b1`, `W2`
    /// row-major, `b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        push_row_major(&mut out, &self.w1);
        out.extend(self.b1.iter());
        push_row_major(&mut out, &self.w2);
        out.extend(self.b2.iter());
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut k = 0;
        let mut take = |m: &mut DMatrix<f64>| {
            let (r, c) = m.shape();
            for i in 0..r {
                for j in 0..c {
                    m[(i, j)] = p[k];
                    k += 1;
                }
            }
        };
        take(&mut self.w1);
        let mut b1 = DMatrix::from_column_slice(1, self.b1.len(), self.b1.as_slice());
        take(&mut b1);
        self.b1 = DVector::from_column_slice(b1.as_slice());
        take(&mut self.w2);
        let mut b2 = DMatrix::from_column_slice(1, self.b2.len(), self.b2.as_slice());
        take(&mut b2);
        self.b2 = DVector::from_column_slice(b2.as_slice());
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() > 0 && x.ncols() != self.d_in {
            return Err(Error::DimensionMismatch(format!(
                "descriptor length {} but model input {}",
                x.ncols(),
                self.d_in
            )));
        }
        Ok(())
    }

    /// Raw (unnormalized) outputs, one row per input row, plus the hidden
    /// activations of the two-layer model.
    fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        let mut z = x * self.w1.transpose();
        for mut row in z.row_iter_mut() {
            row += self.b1.transpose();
        }
        match self.kind {
            ModelKind::Linear => (z, None),
            ModelKind::TwoLayerTanh => {
                let h = z.map(f64::tanh);
                let mut f = &h * self.w2.transpose();
                for mut row in f.row_iter_mut() {
                    row += self.b2.transpose();
                }
                (f, Some(h))
            }
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).0)
    }

    /// Parameter gradient (checkpoint order) for output gradient `df`.
    fn backward(&self, x: &DMatrix<f64>, hidden: Option<&DMatrix<f64>>, df: &DMatrix<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match (self.kind, hidden) {
            (ModelKind::TwoLayerTanh, Some(h)) => {
                let dw2 = df.transpose() * h;
                let db2 = df.row_sum().transpose();
                let dh = df * &self.w2;
                let dz = dh.zip_map(h, |g, a| g * (1.0 - a * a));
                let dw1 = dz.transpose() * x;
                let db1 = dz.row_sum().transpose();
                push_row_major(&mut out, &dw1);
                out.extend(db1.iter());
                push_row_major(&mut out, &dw2);
                out.extend(db2.iter());
            }
            _ => {
                let dw1 = df.transpose() * x;
                let db1 = df.row_sum().transpose();
                push_row_major(&mut out, &dw1);
                out.extend(db1.iter());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.kind.code(), self.d_in as u32, self.d_hidden as u32, self.d_out as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing OTEM header".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
        if word(0) != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", word(0))));
        }
        let kind = match word(1) {
            0 => ModelKind::Linear,
            1 => ModelKind::TwoLayerTanh,
            k => return Err(Error::Checkpoint(format!("unknown model kind {k}"))),
        };
        let (d_in, d_hidden, d_out) = (word(2) as usize, word(3) as usize, word(4) as usize);
        let mut model = match kind {
            ModelKind::Linear => Self {
                kind,
                d_in,
                d_hidden: d_out,
                d_out,
                w1: DMatrix::zeros(d_out, d_in),
                b1: DVector::zeros(d_out),
                w2: DMatrix::zeros(0, 0),
                b2: DVector::zeros(0),
            },
            ModelKind::TwoLayerTanh => Self {
                kind,
                d_in,
                d_hidden,
                d_out,
                w1: DMatrix::zeros(d_hidden, d_in),
                b1: DVector::zeros(d_hidden),
                w2: DMatrix::zeros(d_out, d_hidden),
                b2: DVector::zeros(d_out),
            },
        };
        let body = &bytes[24..];
        if body.len() != 8 * model.param_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} weight bytes, found {}",
                8 * model.param_count(),
                body.len()
            )));
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite weight".into()));
        }
        model.set_params(&params);
        Ok(model)
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn rows_to_matrix(rows: &[Descriptor], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

fn check_rows(rows: &[Descriptor], d: usize) -> Result<()> {
    if let Some(bad) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::DimensionMismatch(format!(
            "descriptor {bad} has length {} but model input is {d}",
            rows[bad].len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite descriptor".into()));
    }
    Ok(())
}

/// Features of `descriptors`, one row each. All-zero outputs are rejected
/// by [`FeatureSet`].
pub fn embed(model: &EmbedderModel, descriptors: &[Descriptor]) -> Result<FeatureSet> {
    check_rows(descriptors, model.d_in)?;
    FeatureSet::new(model.forward(&rows_to_matrix(descriptors, model.d_in))?)
}

/// Raw model outputs as vectors, without the non-zero check.
pub fn embed_rows(model: &EmbedderModel, descriptors: &[Descriptor]) -> Result<Vec<Vec<f64>>> {
    check_rows(descriptors, model.d_in)?;
    let f = model.forward(&rows_to_matrix(descriptors, model.d_in))?;
    Ok(f.row_iter().map(|r| r.iter().copied().collect()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Positives are two frames of one sequence at most `gap` apart.
    Video,
    /// Positives are two jittered copies of one frame.
    Image,
}

impl FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(Self::Video),
            "image" => Ok(Self::Image),
            _ => Err(Error::Config {
                key: "pair_mode".into(),
                reason: format!("expected video|image, found `{s}`"),
            }),
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Video => "video",
            Self::Image => "image",
        })
    }
}

/// Descriptors of the two frames of a training pair, before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorPair {
    pub prev: Vec<Descriptor>,
    pub cur: Vec<Descriptor>,
    pub kind: PairKind,
    /// Source `(sequence, frame index)` of each side.
    pub source: [(usize, usize); 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSampling {
    pub mode: PairMode,
    pub gap: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Standard deviation of the image-mode augmentation noise.
    pub jitter: f64,
}

const MAX_DRAWS: usize = 10_000;

fn jittered(rows: &[Descriptor], noise: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Vec<Descriptor> {
    rows.iter()
        .map(|r| match noise {
            Some(n) => r.iter().map(|v| v + n.sample(rng)).collect(),
            None => r.clone(),
        })
        .collect()
}

/// Samples unlabeled training pairs.
///
/// Video mode draws frames `t < t' <= t + gap` of one sequence; image mode
/// pairs two jittered copies of one frame. Negatives take one frame from
/// each of two distinct sequences. Frames without detections are skipped.
pub fn make_pairs(data: &[DescriptorSequence], sampling: &PairSampling, rng: &mut ChaCha8Rng) -> Result<Vec<DescriptorPair>> {
    if sampling.gap < 1 {
        return Err(Error::InvalidInput("gap must be at least 1".into()));
    }
    let usable: Vec<usize> = (0..data.len())
        .filter(|&s| data[s].frames.iter().any(|f| !f.descriptors.is_empty()))
        .collect();
    if sampling.positives > 0 {
        let ok = match sampling.mode {
            PairMode::Video => usable.iter().any(|&s| data[s].frames.len() >= 2),
            PairMode::Image => !usable.is_empty(),
        };
        if !ok {
            return Err(Error::InvalidInput(match sampling.mode {
                PairMode::Video => "video pairs need a sequence with at least 2 frames".into(),
                PairMode::Image => "no frame with detections".into(),
            }));
        }
    }
    if sampling.negatives > 0 && usable.len() < 2 {
        return Err(Error::InvalidInput("negative pairs need two distinct sequences".into()));
    }
    let noise = (sampling.jitter > 0.0).then(|| Normal::new(0.0, sampling.jitter).expect("valid std"));
    let mut out = Vec::with_capacity(sampling.positives + sampling.negatives);

    let mut draws = 0;
    while out.len() < sampling.positives {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(Error::InvalidInput("could not sample a positive pair".into()));
        }
        let s = usable[rng.random_range(0..usable.len())];
        let frames = &data[s].frames;
        match sampling.mode {
            PairMode::Video => {
                if frames.len() < 2 {
                    continue;
                }
                let t = rng.random_range(0..frames.len() - 1);
                let u = t + rng.random_range(1..=sampling.gap);
                if u >= frames.len() {
                    continue;
                }
                let (a, b) = (&frames[t].descriptors, &frames[u].descriptors);
                if a.is_empty() || b.is_empty() {
                    continue;
                }
                out.push(DescriptorPair {
                    prev: a.clone(),
                    cur: b.clone(),
                    kind: PairKind::Positive,
                    source: [(s, t), (s, u)],
                });
            }
            PairMode::Image => {
                let t = rng.random_range(0..frames.len());
                let a = &frames[t].descriptors;
                if a.is_empty() {
                    continue;
                }
                out.push(DescriptorPair {
                    prev: jittered(a, noise.as_ref(), rng),
                    cur: jittered(a, noise.as_ref(), rng),
                    kind: PairKind::Positive,
                    source: [(s, t), (s, t)],
                });
            }
        }
    }

    draws = 0;
    while out.len() < sampling.positives + sampling.negatives {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(Error::InvalidInput("could not sample a negative pair".into()));
        }
        let i = rng.random_range(0..usable.len());
        let mut j = rng.random_range(0..usable.len() - 1);
        if j >= i {
            j += 1;
        }
        let (s1, s2) = (usable[i], usable[j]);
        let t1 = rng.random_range(0..data[s1].frames.len());
        let t2 = rng.random_range(0..data[s2].frames.len());
        let (a, b) = (&data[s1].frames[t1].descriptors, &data[s2].frames[t2].descriptors);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        out.push(DescriptorPair {
            prev: a.clone(),
            cur: b.clone(),
            kind: PairKind::Negative,
            source: [(s1, t1), (s2, t2)],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(Error::Config {
                key: "optimizer".into(),
                reason: format!("expected sgd|adam, found `{s}`"),
            }),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

fn placeholder_name(p: Placeholder) -> String {
    match p {
        Placeholder::None => "none".into(),
        Placeholder::DynamicMean => "mean".into(),
        Placeholder::Fixed(v) => format!("fixed:{v}"),
    }
}

fn parse_placeholder(value: &str) -> Result<Placeholder> {
    match value {
        "none" => Ok(Placeholder::None),
        "mean" => Ok(Placeholder::DynamicMean),
        v => match v.strip_prefix("fixed:") {
            Some(x) => Ok(Placeholder::Fixed(typed("placeholder", x)?)),
            None => Err(Error::Config {
                key: "placeholder".into(),
                reason: format!("expected none|mean|fixed:<value>, found `{v}`"),
            }),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub margin: f64,
    /// Negative pairs per positive pair.
    pub neg_ratio: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub positives_per_step: usize,
    pub gap: usize,
    pub pair_mode: PairMode,
    pub image_jitter: f64,
    pub placeholder: Placeholder,
    pub model: ModelKind,
    pub d_hidden: usize,
    pub d_out: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            steps: 2000,
            margin: crate::reid_loss::DEFAULT_MARGIN,
            neg_ratio: 0.25,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            positives_per_step: 4,
            gap: 20,
            pair_mode: PairMode::Video,
            image_jitter: 0.05,
            placeholder: Placeholder::DynamicMean,
            model: ModelKind::Linear,
            d_hidden: 64,
            d_out: 32,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = typed(key, value)?,
            "steps" => self.steps = typed(key, value)?,
            "margin" => self.margin = typed(key, value)?,
            "neg_ratio" => self.neg_ratio = typed(key, value)?,
            "seed" => self.seed = typed(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "positives_per_step" => self.positives_per_step = typed(key, value)?,
            "gap" => self.gap = typed(key, value)?,
            "pair_mode" => self.pair_mode = value.parse()?,
            "image_jitter" => self.image_jitter = typed(key, value)?,
            "placeholder" => self.placeholder = parse_placeholder(value)?,
            "model" => self.model = value.parse()?,
            "d_hidden" => self.d_hidden = typed(key, value)?,
            "d_out" => self.d_out = typed(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        render_kv([
            ("learning_rate", self.learning_rate.to_string()),
            ("steps", self.steps.to_string()),
            ("margin", self.margin.to_string()),
            ("neg_ratio", self.neg_ratio.to_string()),
            ("seed", self.seed.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("positives_per_step", self.positives_per_step.to_string()),
            ("gap", self.gap.to_string()),
            ("pair_mode", self.pair_mode.to_string()),
            ("image_jitter", self.image_jitter.to_string()),
            ("placeholder", placeholder_name(self.placeholder)),
            ("model", self.model.to_string()),
            ("d_hidden", self.d_hidden.to_string()),
            ("d_out", self.d_out.to_string()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        check("learning_rate", self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "must be finite and non-negative")?;
        check("neg_ratio", self.neg_ratio >= 0.0, "must be non-negative")?;
        check("positives_per_step", self.positives_per_step > 0, "must be positive")?;
        check("gap", self.gap >= 1, "must be at least 1")?;
        check("d_out", self.d_out >= 2, "must be at least 2")?;
        check("image_jitter", self.image_jitter >= 0.0, "must be non-negative")?;
        Ok(())
    }

    pub fn negatives_per_step(&self) -> usize {
        (self.neg_ratio * self.positives_per_step as f64).round() as usize
    }

    pub fn loss_config(&self) -> ReidLossConfig {
        ReidLossConfig {
            margin: self.margin,
            placeholder: self.placeholder,
            ..Default::default()
        }
    }
}

/// Fresh model for `cfg`, drawn from the training seed's init stream.
pub fn init_model(cfg: &TrainConfig, d_in: usize) -> Result<EmbedderModel> {
    EmbedderModel::random(cfg.model, d_in, cfg.d_hidden, cfg.d_out, &mut stream(cfg.seed, 0))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * grad[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * grad[k] * grad[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains `model` for `cfg.steps` steps and returns it with the batch loss
/// recorded before every update.
pub fn train(model: &EmbedderModel, data: &[DescriptorSequence], cfg: &TrainConfig) -> Result<(EmbedderModel, Vec<f64>)> {
    cfg.validate()?;
    if data.iter().all(|s| s.frames.iter().all(|f| f.descriptors.is_empty())) {
        return Err(Error::InvalidInput("empty training dataset".into()));
    }
    if cfg.neg_ratio >= 1.0 {
        warn!("neg_ratio {} >= 1: training is known to fail to converge", cfg.neg_ratio);
    }
    let mut negatives = cfg.negatives_per_step();
    if negatives > 0 && data.len() < 2 {
        warn!("negative pairs need two sequences; training on positives only");
        negatives = 0;
    }
    let sampling = PairSampling {
        mode: cfg.pair_mode,
        gap: cfg.gap,
        positives: cfg.positives_per_step,
        negatives,
        jitter: cfg.image_jitter,
    };
    let loss_cfg = cfg.loss_config();
    let mut rng = stream(cfg.seed, 1);
    let mut model = model.clone();
    let mut params = model.params();
    let mut adam = Adam::new(params.len());
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let pairs = make_pairs(data, &sampling, &mut rng)?;
        let mut batches = Vec::with_capacity(pairs.len());
        let mut cache = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let stacked: Vec<Descriptor> = p.prev.iter().chain(&p.cur).cloned().collect();
            check_rows(&stacked, model.d_in)?;
            let x = rows_to_matrix(&stacked, model.d_in);
            let (f, hidden) = model.forward_cached(&x);
            let np = p.prev.len();
            let prev = FeatureSet::new(f.rows(0, np).into_owned())?;
            let cur = FeatureSet::new(f.rows(np, p.cur.len()).into_owned())?;
            batches.push(PairBatch::new(prev, cur, p.kind)?);
            cache.push((x, hidden));
        }
        let (pos, neg): (Vec<PairBatch>, Vec<PairBatch>) = batches.into_iter().partition(|b| b.kind == PairKind::Positive);
        let report = loss_batch(&pos, &neg, &loss_cfg)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: report.total });
        }
        history.push(report.total);

        // make_pairs emits positives first, matching the gradient order.
        let mut grad = vec![0.0; params.len()];
        for ((x, hidden), df) in cache.iter().zip(&report.gradients) {
            let g = model.backward(x, hidden.as_ref(), df);
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, value: f64::NAN });
        }
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= cfg.learning_rate * g;
                }
            }
            OptimizerKind::Adam => adam.step(&mut params, &grad, cfg.learning_rate),
        }
        model.set_params(&params);
    }
    Ok((model, history))
}

/// `step,loss` CSV with one row per step.
pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (k, l) in history.iter().enumerate() {
        out.push_str(&format!("{k},{l}\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    pub rank1: f64,
    pub map: f64,
    pub queries: usize,
}

/// Query/gallery retrieval over labelled features in temporal order.
///
/// Each identity's first half of observations (rounded down) are queries,
/// the rest gallery. Identities seen once only feed the gallery.
pub fn retrieval_metrics(features: &[Vec<f64>], ids: &[i64]) -> Retrieval {
    let mut order: Vec<i64> = ids.to_vec();
    order.sort_unstable();
    order.dedup();
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for id in order {
        let obs: Vec<usize> = (0..ids.len()).filter(|&k| ids[k] == id).collect();
        let nq = obs.len() / 2;
        queries.extend_from_slice(&obs[..nq]);
        gallery.extend_from_slice(&obs[nq..]);
    }
    gallery.sort_unstable();
    if queries.is_empty() || gallery.is_empty() {
        return Retrieval { rank1: 0.0, map: 0.0, queries: 0 };
    }
    let (mut r1, mut ap_sum) = (0.0, 0.0);
    for &q in &queries {
        let mut ranked: Vec<(f64, usize)> = gallery.iter().map(|&g| (cosine(&features[q], &features[g]), g)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if ids[ranked[0].1] == ids[q] {
            r1 += 1.0;
        }
        let (mut hits, mut ap) = (0.0, 0.0);
        for (rank, &(_, g)) in ranked.iter().enumerate() {
            if ids[g] == ids[q] {
                hits += 1.0;
                ap += hits / (rank + 1) as f64;
            }
        }
        if hits > 0.0 {
            ap_sum += ap / hits;
        }
    }
    let n = queries.len() as f64;
    Retrieval {
        rank1: r1 / n,
        map: ap_sum / n,
        queries: queries.len(),
    }
}

/// Retrieval of `model` features on the labelled detections of `seq`.
pub fn eval_retrieval(model: &EmbedderModel, seq: &DescriptorSequence) -> Result<Retrieval> {
    let (mut feats, mut ids) = (Vec::new(), Vec::new());
    for f in &seq.frames {
        let rows = embed_rows(model, &f.descriptors)?;
        for (row, id) in rows.into_iter().zip(&f.ids) {
            if let Some(id) = id {
                feats.push(row);
                ids.push(*id);
            }
        }
    }
    Ok(retrieval_metrics(&feats, &ids))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchRule {
    /// Objects present in both frames, matched to their most similar
    /// object of the earlier frame.
    Top1,
    /// Every object of the later frame; a best match whose similarity is
    /// below the mean off-diagonal similarity of the pair counts as "new".
    BirthDeathAware,
}

/// Fraction of correct cross-frame matches between frames `gap` apart.
pub fn matching_accuracy_features(frames: &[(Vec<Vec<f64>>, Vec<Option<i64>>)], gap: usize, rule: MatchRule) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for t in 0..frames.len().saturating_sub(gap) {
        let (pf, pid) = &frames[t];
        let (cf, cid) = &frames[t + gap];
        let prev: Vec<(&Vec<f64>, i64)> = pf.iter().zip(pid).filter_map(|(f, id)| id.map(|i| (f, i))).collect();
        let cur: Vec<(&Vec<f64>, i64)> = cf.iter().zip(cid).filter_map(|(f, id)| id.map(|i| (f, i))).collect();
        let threshold = match rule {
            MatchRule::Top1 => f64::NEG_INFINITY,
            MatchRule::BirthDeathAware => mean_off_diagonal(&prev, &cur),
        };
        for (f, id) in &cur {
            let present = prev.iter().any(|p| p.1 == *id);
            if rule == MatchRule::Top1 && !present {
                continue;
            }
            total += 1;
            let best = prev
                .iter()
                .map(|p| (cosine(f, p.0), p.1))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            let predicted = match best {
                Some((s, pid)) if s >= threshold => Some(pid),
                _ => None,
            };
            let ok = if present { predicted == Some(*id) } else { predicted.is_none() };
            if ok {
                correct += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn mean_off_diagonal(prev: &[(&Vec<f64>, i64)], cur: &[(&Vec<f64>, i64)]) -> f64 {
    let all: Vec<&Vec<f64>> = prev.iter().chain(cur).map(|p| p.0).collect();
    let rows: Vec<Vec<f64>> = all.iter().map(|v| (*v).clone()).collect();
    if rows.len() < 2 || rows.iter().any(|r| r.iter().all(|v| *v == 0.0)) {
        return 0.0;
    }
    let d = rows[0].len();
    let np = prev.len();
    let (Ok(a), Ok(b)) = (
        FeatureSet::from_rows(&rows[..np], d),
        FeatureSet::from_rows(&rows[np..], d),
    ) else {
        return 0.0;
    };
    match PairBatch::new(a, b, PairKind::Positive).and_then(|p| similarity(&p, Placeholder::DynamicMean)) {
        Ok(s) => s.placeholder.unwrap_or(0.0),
        Err(_) => 0.0,
    }
}

/// Cross-frame matching accuracy of `model` features on `seq`.
pub fn matching_accuracy(model: &EmbedderModel, seq: &DescriptorSequence, gap: usize, rule: MatchRule) -> Result<f64> {
    let frames = seq
        .frames
        .iter()
        .map(|f| Ok((embed_rows(model, &f.descriptors)?, f.ids.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(matching_accuracy_features(&frames, gap, rule))
}
