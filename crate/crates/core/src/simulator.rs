//! Deterministic synthetic scenes: moving boxes, depth-ordered occlusion,
//! an imperfect detector, appearance descriptors and occlusion-center
//! channels.
//!
//! All randomness comes from ChaCha8 streams derived from `seed`; the
//! descriptor nuisance subspace comes from `world_seed` so that several
//! sequences can share it.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

use crate::config::{check, parse_kv, render_kv, typed, unknown_key};
use crate::error::{Error, Result};
use crate::geometry::{self, BBox, OcclusionEvent, Point2, SigmaRule};
use crate::heatmap::{decode_peaks, render_events, DEFAULT_MAX_PEAKS, DEFAULT_SCORE_THRESHOLD};
use crate::mot::MotRecord;

const STREAM_MOTION: u64 = 1;
const STREAM_DETECTOR: u64 = 2;
const STREAM_DESCRIPTOR: u64 = 3;
const STREAM_CHANNEL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionMode {
    Oracle,
    Noisy,
    Rendered,
}

impl FromStr for OcclusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "noisy" => Ok(Self::Noisy),
            "rendered" => Ok(Self::Rendered),
            other => Err(Error::Config {
                key: "occlusion_mode".into(),
                reason: format!("expected oracle|noisy|rendered, found `{other}`"),
            }),
        }
    }
}

impl fmt::Display for OcclusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Oracle => "oracle",
            Self::Noisy => "noisy",
            Self::Rendered => "rendered",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub width: u32,
    pub height: u32,
    /// Objects present at the first frame.
    pub objects: usize,
    pub frames: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub accel_std: f64,
    pub box_height_min: f64,
    pub box_height_max: f64,
    /// Width / height.
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Per-frame probability that a new object enters.
    pub spawn_rate: f64,
    /// Per-frame, per-object probability of leaving.
    pub despawn_rate: f64,
    pub visibility_threshold: f64,
    pub det_noise_std: f64,
    /// Mean number of false positives per frame.
    pub fp_rate: f64,
    pub descriptor_dim: usize,
    pub nuisance_dim: usize,
    pub nuisance_std: f64,
    pub jitter_std: f64,
    /// Weight of the occluder's signature mixed into a partly hidden
    /// object's descriptor, scaled by the hidden fraction.
    pub occlusion_corruption: f64,
    pub occlusion_mode: OcclusionMode,
    pub occ_noise_std: f64,
    pub occ_dropout: f64,
    pub stride: u32,
    pub tau: f64,
    pub seed: u64,
    pub world_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            objects: 10,
            frames: 100,
            speed_min: 1.0,
            speed_max: 4.0,
            accel_std: 0.1,
            box_height_min: 60.0,
            box_height_max: 120.0,
            aspect_min: 0.35,
            aspect_max: 0.5,
            spawn_rate: 0.0,
            despawn_rate: 0.0,
            visibility_threshold: 0.3,
            det_noise_std: 1.0,
            fp_rate: 0.0,
            descriptor_dim: 64,
            nuisance_dim: 32,
            nuisance_std: 0.5,
            jitter_std: 0.05,
            occlusion_corruption: 0.0,
            occlusion_mode: OcclusionMode::Oracle,
            occ_noise_std: 1.0,
            occ_dropout: 0.1,
            stride: 4,
            tau: geometry::DEFAULT_OCCLUSION_TAU,
            seed: 0,
            world_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "width" => self.width = typed(key, value)?,
            "height" => self.height = typed(key, value)?,
            "objects" => self.objects = typed(key, value)?,
            "frames" => self.frames = typed(key, value)?,
            "speed_min" => self.speed_min = typed(key, value)?,
            "speed_max" => self.speed_max = typed(key, value)?,
            "accel_std" => self.accel_std = typed(key, value)?,
            "box_height_min" => self.box_height_min = typed(key, value)?,
            "box_height_max" => self.box_height_max = typed(key, value)?,
            "aspect_min" => self.aspect_min = typed(key, value)?,
            "aspect_max" => self.aspect_max = typed(key, value)?,
            "spawn_rate" => self.spawn_rate = typed(key, value)?,
            "despawn_rate" => self.despawn_rate = typed(key, value)?,
            "visibility_threshold" => self.visibility_threshold = typed(key, value)?,
            "det_noise_std" => self.det_noise_std = typed(key, value)?,
            "fp_rate" => self.fp_rate = typed(key, value)?,
            "descriptor_dim" => self.descriptor_dim = typed(key, value)?,
            "nuisance_dim" => self.nuisance_dim = typed(key, value)?,
            "nuisance_std" => self.nuisance_std = typed(key, value)?,
            "jitter_std" => self.jitter_std = typed(key, value)?,
            "occlusion_corruption" => self.occlusion_corruption = typed(key, value)?,
            "occlusion_mode" => self.occlusion_mode = value.parse()?,
            "occ_noise_std" => self.occ_noise_std = typed(key, value)?,
            "occ_dropout" => self.occ_dropout = typed(key, value)?,
            "stride" => self.stride = typed(key, value)?,
            "tau" => self.tau = typed(key, value)?,
            "seed" => self.seed = typed(key, value)?,
            "world_seed" => self.world_seed = typed(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    /// Defaults overridden by the given `key = value` text, then validated.
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
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("objects", self.objects.to_string()),
            ("frames", self.frames.to_string()),
            ("speed_min", self.speed_min.to_string()),
            ("speed_max", self.speed_max.to_string()),
            ("accel_std", self.accel_std.to_string()),
            ("box_height_min", self.box_height_min.to_string()),
            ("box_height_max", self.box_height_max.to_string()),
            ("aspect_min", self.aspect_min.to_string()),
            ("aspect_max", self.aspect_max.to_string()),
            ("spawn_rate", self.spawn_rate.to_string()),
            ("despawn_rate", self.despawn_rate.to_string()),
            ("visibility_threshold", self.visibility_threshold.to_string()),
            ("det_noise_std", self.det_noise_std.to_string()),
            ("fp_rate", self.fp_rate.to_string()),
            ("descriptor_dim", self.descriptor_dim.to_string()),
            ("nuisance_dim", self.nuisance_dim.to_string()),
            ("nuisance_std", self.nuisance_std.to_string()),
            ("jitter_std", self.jitter_std.to_string()),
            ("occlusion_corruption", self.occlusion_corruption.to_string()),
            ("occlusion_mode", self.occlusion_mode.to_string()),
            ("occ_noise_std", self.occ_noise_std.to_string()),
            ("occ_dropout", self.occ_dropout.to_string()),
            ("stride", self.stride.to_string()),
            ("tau", self.tau.to_string()),
            ("seed", self.seed.to_string()),
            ("world_seed", self.world_seed.to_string()),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        check("width", self.width > 0, "must be positive")?;
        check("height", self.height > 0, "must be positive")?;
        check("speed_min", self.speed_min >= 0.0 && self.speed_min <= self.speed_max, "need 0 <= speed_min <= speed_max")?;
        check("accel_std", self.accel_std >= 0.0, "must be non-negative")?;
        check("box_height_min", self.box_height_min > 0.0 && self.box_height_min <= self.box_height_max, "need 0 < box_height_min <= box_height_max")?;
        check("aspect_min", self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max, "need 0 < aspect_min <= aspect_max")?;
        check("box_height_max", self.box_height_max < self.height as f64, "object taller than arena")?;
        check("aspect_max", self.aspect_max * self.box_height_max < self.width as f64, "object wider than arena")?;
        check("spawn_rate", unit(self.spawn_rate), "must lie in [0, 1]")?;
        check("despawn_rate", unit(self.despawn_rate), "must lie in [0, 1]")?;
        check("visibility_threshold", unit(self.visibility_threshold), "must lie in [0, 1]")?;
        check("fp_rate", unit(self.fp_rate), "must lie in [0, 1]")?;
        check("occ_dropout", unit(self.occ_dropout), "must lie in [0, 1]")?;
        check("occlusion_corruption", unit(self.occlusion_corruption), "must lie in [0, 1]")?;
        check("det_noise_std", self.det_noise_std >= 0.0, "must be non-negative")?;
        check("jitter_std", self.jitter_std >= 0.0, "must be non-negative")?;
        check("nuisance_std", self.nuisance_std >= 0.0, "must be non-negative")?;
        check("occ_noise_std", self.occ_noise_std >= 0.0, "must be non-negative")?;
        check("descriptor_dim", self.descriptor_dim >= 2, "must be at least 2")?;
        check("nuisance_dim", self.nuisance_dim < self.descriptor_dim, "must be below descriptor_dim")?;
        check("stride", self.stride > 0, "must be positive")?;
        check("tau", self.tau > 0.0 && self.tau < 1.0, "must lie in (0, 1)")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub id: i64,
    pub bbox: BBox,
    /// Spawn order; larger is nearer the camera.
    pub depth: usize,
    pub visibility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub conf: f64,
}

/// An occlusion event between two ground-truth objects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdEvent {
    pub event: OcclusionEvent,
    pub ids: (i64, i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    /// 1-based frame number.
    pub frame: u32,
    pub objects: Vec<GtObject>,
    pub detections: Vec<Detection>,
    /// Raw appearance descriptor per detection.
    pub descriptors: Vec<Vec<f64>>,
    /// Identity signature per detection; a fresh random unit vector for
    /// false positives.
    pub oracle_features: Vec<Vec<f64>>,
    /// Source object per detection, `None` for false positives. Kept apart
    /// from `detections` so that trackers never see it.
    pub det_truth: Vec<Option<i64>>,
    pub events: Vec<IdEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub config: SimConfig,
    pub frames: Vec<SimFrame>,
}

impl SyntheticSequence {
    pub fn gt_records(&self) -> Vec<MotRecord> {
        self.frames
            .iter()
            .flat_map(|f| {
                f.objects.iter().map(move |o| MotRecord {
                    trailing: [1.0, o.visibility, -1.0],
                    ..MotRecord::new(f.frame, o.id, o.bbox, 1.0)
                })
            })
            .collect()
    }

    pub fn det_records(&self) -> Vec<MotRecord> {
        self.frames
            .iter()
            .flat_map(|f| f.detections.iter().map(move |d| MotRecord::new(f.frame, -1, d.bbox, d.conf)))
            .collect()
    }

    pub fn identity_count(&self) -> usize {
        let mut ids: Vec<i64> = self.frames.iter().flat_map(|f| f.objects.iter().map(|o| o.id)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Orthonormal basis of the shared nuisance subspace, `d x k`.
pub fn nuisance_basis(world_seed: u64, d: usize, k: usize) -> DMatrix<f64> {
    if k == 0 {
        return DMatrix::zeros(d, 0);
    }
    let mut rng = stream(world_seed, 0);
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Area of the union of `rects`, all clipped to `clip`, by coordinate
/// compression.
pub fn union_area_within(clip: &BBox, rects: &[BBox]) -> f64 {
    let parts: Vec<BBox> = rects.iter().filter_map(|r| clip.intersect(r)).collect();
    if parts.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = parts.iter().flat_map(|r| [r.x_l, r.x_r]).collect();
    let mut ys: Vec<f64> = parts.iter().flat_map(|r| [r.y_t, r.y_b]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for xi in xs.windows(2) {
        let mx = 0.5 * (xi[0] + xi[1]);
        for yi in ys.windows(2) {
            let my = 0.5 * (yi[0] + yi[1]);
            if parts.iter().any(|r| r.x_l <= mx && mx < r.x_r && r.y_t <= my && my < r.y_b) {
                area += (xi[1] - xi[0]) * (yi[1] - yi[0]);
            }
        }
    }
    area
}

struct Body {
    id: i64,
    order: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    signature: Vec<f64>,
}

impl Body {
    fn bbox(&self) -> BBox {
        BBox {
            x_l: self.cx - self.w / 2.0,
            y_t: self.cy - self.h / 2.0,
            x_r: self.cx + self.w / 2.0,
            y_b: self.cy + self.h / 2.0,
        }
    }
}

fn random_size(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let h = rng.random_range(cfg.box_height_min..=cfg.box_height_max);
    let w = h * rng.random_range(cfg.aspect_min..=cfg.aspect_max);
    (w, h)
}

fn spawn(cfg: &SimConfig, rng: &mut ChaCha8Rng, id: i64, order: usize) -> Body {
    let (w, h) = random_size(cfg, rng);
    let (aw, ah) = (cfg.width as f64, cfg.height as f64);
    let cx = rng.random_range(w / 2.0..=aw - w / 2.0);
    let cy = rng.random_range(h / 2.0..=ah - h / 2.0);
    let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let signature = unit_gaussian(rng, cfg.descriptor_dim);
    Body {
        id,
        order,
        cx,
        cy,
        w,
        h,
        vx: speed * angle.cos(),
        vy: speed * angle.sin(),
        signature,
    }
}

/// Reflects a center coordinate so that `[c - half, c + half]` stays inside
/// `[0, extent]`, flipping the velocity on contact.
fn bounce(c: &mut f64, v: &mut f64, half: f64, extent: f64) {
    if *c - half < 0.0 {
        *c = 2.0 * half - *c;
        *v = v.abs();
    }
    if *c + half > extent {
        *c = 2.0 * (extent - half) - *c;
        *v = -v.abs();
    }
    *c = c.clamp(half, extent - half);
}

fn advance(cfg: &SimConfig, rng: &mut ChaCha8Rng, b: &mut Body) {
    if cfg.accel_std > 0.0 {
        let n = Normal::new(0.0, cfg.accel_std).expect("valid std");
        b.vx += n.sample(rng);
        b.vy += n.sample(rng);
    }
    let speed = (b.vx * b.vx + b.vy * b.vy).sqrt();
    if speed > cfg.speed_max && speed > 0.0 {
        b.vx *= cfg.speed_max / speed;
        b.vy *= cfg.speed_max / speed;
    }
    b.cx += b.vx;
    b.cy += b.vy;
    bounce(&mut b.cx, &mut b.vx, b.w / 2.0, cfg.width as f64);
    bounce(&mut b.cy, &mut b.vy, b.h / 2.0, cfg.height as f64);
}

struct DescriptorModel {
    basis: DMatrix<f64>,
    nuisance: Option<Normal<f64>>,
    jitter: Option<Normal<f64>>,
}

impl DescriptorModel {
    fn new(cfg: &SimConfig) -> Self {
        Self {
            basis: nuisance_basis(cfg.world_seed, cfg.descriptor_dim, cfg.nuisance_dim),
            nuisance: (cfg.nuisance_std > 0.0).then(|| Normal::new(0.0, cfg.nuisance_std).expect("valid std")),
            jitter: (cfg.jitter_std > 0.0).then(|| Normal::new(0.0, cfg.jitter_std).expect("valid std")),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, signature: &[f64]) -> Vec<f64> {
        let mut v = signature.to_vec();
        if let Some(n) = &self.nuisance {
            for k in 0..self.basis.ncols() {
                let z = n.sample(rng);
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi += z * self.basis[(i, k)];
                }
            }
        }
        if let Some(j) = &self.jitter {
            for vi in &mut v {
                *vi += j.sample(rng);
            }
        }
        v
    }
}

fn noisy_box(b: &BBox, std: f64, rng: &mut ChaCha8Rng) -> BBox {
    if std <= 0.0 {
        return *b;
    }
    let n = Normal::new(0.0, std).expect("valid std");
    let out = BBox {
        x_l: b.x_l + n.sample(rng),
        y_t: b.y_t + n.sample(rng),
        x_r: b.x_r + n.sample(rng),
        y_b: b.y_b + n.sample(rng),
    };
    if out.width() < 1.0 || out.height() < 1.0 {
        *b
    } else {
        out
    }
}

pub fn generate(cfg: &SimConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut motion = stream(cfg.seed, STREAM_MOTION);
    let mut detector = stream(cfg.seed, STREAM_DETECTOR);
    let mut appearance = stream(cfg.seed, STREAM_DESCRIPTOR);
    let descriptors = DescriptorModel::new(cfg);
    let fp_count = (cfg.fp_rate > 0.0).then(|| Poisson::new(cfg.fp_rate).expect("positive rate"));

    let mut bodies: Vec<Body> = Vec::new();
    let mut next_id: i64 = 1;
    let mut frames = Vec::with_capacity(cfg.frames);

    for t in 1..=cfg.frames {
        if t == 1 {
            for _ in 0..cfg.objects {
                bodies.push(spawn(cfg, &mut motion, next_id, next_id as usize));
                next_id += 1;
            }
        } else {
            if cfg.despawn_rate > 0.0 {
                let mut keep = Vec::with_capacity(bodies.len());
                for b in bodies.drain(..) {
                    if motion.random::<f64>() >= cfg.despawn_rate {
                        keep.push(b);
                    }
                }
                bodies = keep;
            }
            for b in &mut bodies {
                advance(cfg, &mut motion, b);
            }
            if cfg.spawn_rate > 0.0 && motion.random::<f64>() < cfg.spawn_rate {
                bodies.push(spawn(cfg, &mut motion, next_id, next_id as usize));
                next_id += 1;
            }
        }

        let boxes: Vec<BBox> = bodies.iter().map(Body::bbox).collect();
        let mut objects = Vec::with_capacity(bodies.len());
        let mut occluder_of = Vec::with_capacity(bodies.len());
        for (i, b) in bodies.iter().enumerate() {
            let front: Vec<usize> = (0..bodies.len()).filter(|&j| bodies[j].order > b.order).collect();
            let front_boxes: Vec<BBox> = front.iter().map(|&j| boxes[j]).collect();
            let hidden = union_area_within(&boxes[i], &front_boxes) / boxes[i].area();
            let visibility = (1.0 - hidden).clamp(0.0, 1.0);
            let main = front
                .iter()
                .filter_map(|&j| boxes[i].intersect(&boxes[j]).map(|o| (j, o.area())))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(j, _)| j);
            occluder_of.push(main);
            objects.push(GtObject {
                id: b.id,
                bbox: boxes[i],
                depth: b.order,
                visibility,
            });
        }

        let events = geometry::occlusion_events(&boxes, cfg.tau)
            .into_iter()
            .map(|e| IdEvent {
                ids: (bodies[e.source_pair.0].id, bodies[e.source_pair.1].id),
                event: e,
            })
            .collect();

        let mut dets: Vec<(Detection, Vec<f64>, Vec<f64>, Option<i64>)> = Vec::new();
        for (i, b) in bodies.iter().enumerate() {
            let vis = objects[i].visibility;
            if vis < cfg.visibility_threshold {
                continue;
            }
            let bbox = noisy_box(&boxes[i], cfg.det_noise_std, &mut detector);
            let mut desc = descriptors.sample(&mut appearance, &b.signature);
            if let Some(j) = occluder_of[i] {
                let weight = cfg.occlusion_corruption * (1.0 - vis);
                for (d, s) in desc.iter_mut().zip(&bodies[j].signature) {
                    *d += weight * s;
                }
            }
            dets.push((Detection { bbox, conf: 0.5 + 0.5 * vis }, desc, b.signature.clone(), Some(b.id)));
        }
        if let Some(pois) = &fp_count {
            let n = pois.sample(&mut detector) as usize;
            for _ in 0..n {
                let (w, h) = random_size(cfg, &mut detector);
                let x = detector.random_range(0.0..=cfg.width as f64 - w);
                let y = detector.random_range(0.0..=cfg.height as f64 - h);
                let conf = detector.random_range(0.5..=1.0);
                let signature = unit_gaussian(&mut appearance, cfg.descriptor_dim);
                let desc = descriptors.sample(&mut appearance, &signature);
                let bbox = BBox {
                    x_l: x,
                    y_t: y,
                    x_r: x + w,
                    y_b: y + h,
                };
                dets.push((Detection { bbox, conf }, desc, signature, None));
            }
        }
        // Fisher-Yates so that detection order says nothing about identity.
        for i in (1..dets.len()).rev() {
            let j = detector.random_range(0..=i);
            dets.swap(i, j);
        }

        let mut frame = SimFrame {
            frame: t as u32,
            objects,
            detections: Vec::with_capacity(dets.len()),
            descriptors: Vec::with_capacity(dets.len()),
            oracle_features: Vec::with_capacity(dets.len()),
            det_truth: Vec::with_capacity(dets.len()),
            events,
        };
        for (d, desc, sig, truth) in dets {
            frame.detections.push(d);
            frame.descriptors.push(desc);
            frame.oracle_features.push(sig);
            frame.det_truth.push(truth);
        }
        frames.push(frame);
    }
    Ok(SyntheticSequence {
        config: cfg.clone(),
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub mode: OcclusionMode,
    pub noise_std: f64,
    pub dropout: f64,
    pub stride: u32,
    pub score_threshold: f64,
    pub max_peaks: usize,
}

impl ChannelParams {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            mode: cfg.occlusion_mode,
            noise_std: cfg.occ_noise_std,
            dropout: cfg.occ_dropout,
            stride: cfg.stride,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            max_peaks: DEFAULT_MAX_PEAKS,
        }
    }
}

/// Occlusion centers with scores, one list per frame.
pub type CenterLists = Vec<Vec<(Point2, f64)>>;

pub fn occlusion_channel(seq: &SyntheticSequence, params: &ChannelParams) -> CenterLists {
    let cfg = &seq.config;
    match params.mode {
        OcclusionMode::Oracle => seq
            .frames
            .iter()
            .map(|f| f.events.iter().map(|e| (e.event.center, 1.0)).collect())
            .collect(),
        OcclusionMode::Noisy => {
            let mut rng = stream(cfg.seed, STREAM_CHANNEL);
            let jitter = (params.noise_std > 0.0).then(|| Normal::new(0.0, params.noise_std).expect("valid std"));
            seq.frames
                .iter()
                .map(|f| {
                    let mut out = Vec::new();
                    for e in &f.events {
                        let (mut dx, mut dy) = (0.0, 0.0);
                        if let Some(n) = &jitter {
                            dx = n.sample(&mut rng);
                            dy = n.sample(&mut rng);
                        }
                        let keep = rng.random::<f64>() >= params.dropout;
                        if keep {
                            out.push((Point2::new(e.event.center.x + dx, e.event.center.y + dy), 1.0));
                        }
                    }
                    out
                })
                .collect()
        }
        OcclusionMode::Rendered => seq
            .frames
            .iter()
            .map(|f| {
                let events: Vec<OcclusionEvent> = f.events.iter().map(|e| e.event).collect();
                let (hm, off) = render_events(&events, (cfg.width, cfg.height), params.stride, &SigmaRule::default());
                decode_peaks(&hm, &off.field, params.score_threshold, params.max_peaks)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SimConfig {
        SimConfig {
            det_noise_std: 0.0,
            visibility_threshold: 0.0,
            fp_rate: 0.0,
            frames: 20,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let a = generate(&SimConfig { seed: 3, fp_rate: 0.5, ..Default::default() }).unwrap();
        let b = generate(&SimConfig { seed: 3, fp_rate: 0.5, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        let c = generate(&SimConfig { seed: 4, fp_rate: 0.5, ..Default::default() }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn perfect_detector_reports_truth() {
        let s = generate(&quiet()).unwrap();
        for f in &s.frames {
            assert_eq!(f.detections.len(), f.objects.len());
            for (d, id) in f.detections.iter().zip(&f.det_truth) {
                let o = f.objects.iter().find(|o| Some(o.id) == *id).unwrap();
                assert_eq!(d.bbox, o.bbox);
            }
        }
    }

    #[test]
    fn config_errors_name_the_key() {
        match SimConfig::from_kv("box_height_max = 900\nbox_height_min = 10") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "box_height_max"),
            other => panic!("{other:?}"),
        }
        match SimConfig::from_kv("bogus = 1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("{other:?}"),
        }
        assert!(SimConfig::from_kv("spawn_rate = 1.5").is_err());
        let cfg = SimConfig { seed: 9, occlusion_mode: OcclusionMode::Noisy, accel_std: 0.123, ..Default::default() };
        assert_eq!(SimConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn zero_objects_is_valid() {
        let s = generate(&SimConfig { objects: 0, ..quiet() }).unwrap();
        assert_eq!(s.frames.len(), 20);
        assert!(s.frames.iter().all(|f| f.objects.is_empty() && f.detections.is_empty()));
    }

    #[test]
    fn union_area_examples() {
        let clip = BBox::new(0., 0., 10., 10.).unwrap();
        let a = BBox::new(-5., -5., 5., 5.).unwrap();
        let b = BBox::new(3., 3., 20., 20.).unwrap();
        assert_eq!(union_area_within(&clip, &[]), 0.0);
        assert_eq!(union_area_within(&clip, &[a]), 25.0);
        assert_eq!(union_area_within(&clip, &[a, b]), 25.0 + 49.0 - 4.0);
        assert_eq!(union_area_within(&clip, &[a, a]), 25.0);
    }

    #[test]
    fn visibility_in_unit_interval_and_front_object_fully_visible() {
        let s = generate(&SimConfig { objects: 15, seed: 5, ..quiet() }).unwrap();
        for f in &s.frames {
            let front = f.objects.iter().max_by_key(|o| o.depth).unwrap();
            assert_eq!(front.visibility, 1.0);
            assert!(f.objects.iter().all(|o| (0.0..=1.0).contains(&o.visibility)));
        }
    }

    #[test]
    fn nuisance_basis_is_orthonormal() {
        let b = nuisance_basis(1, 16, 5);
        let g = b.transpose() * &b;
        assert!((g - DMatrix::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn channel_modes() {
        let cfg = SimConfig { objects: 12, seed: 2, ..quiet() };
        let s = generate(&cfg).unwrap();
        let oracle = occlusion_channel(&s, &ChannelParams::from_config(&cfg));
        for (f, centers) in s.frames.iter().zip(&oracle) {
            assert_eq!(centers.len(), f.events.len());
            for (e, c) in f.events.iter().zip(centers) {
                assert_eq!(e.event.center, c.0);
            }
        }
        let dropped = occlusion_channel(
            &s,
            &ChannelParams { mode: OcclusionMode::Noisy, dropout: 1.0, ..ChannelParams::from_config(&cfg) },
        );
        assert!(dropped.iter().all(Vec::is_empty));
    }
}
