//! Online tracking between consecutive frames with occlusion-based
//! refinding of lost objects.

use std::fmt;

use crate::association::{build_cost, solve, AssociationConfig, TrackQuery};
use crate::config::{check, render_kv, typed, unknown_key};
use crate::error::{Error, Result};
use crate::geometry::{self, BBox, Point2, SigmaRule};
use crate::kalman::{self, KalmanConfig, KalmanState};
use crate::reid_loss::FeatureSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub association: AssociationConfig,
    pub kalman: KalmanConfig,
    /// Lost tracklets are dropped once their lost count reaches this.
    pub max_lost: u32,
    /// Gaussian score a refind must exceed.
    pub refind_tau: f64,
    pub new_track_conf: f64,
    pub refind: bool,
    /// Heatmap stride used to quantize occlusion centers for scoring.
    pub stride: u32,
    pub sigma_rule: SigmaRule,
    pub feature_alpha: f64,
    /// Measurement-noise multiplier for refound boxes.
    pub refind_noise_scale: f64,
    /// Reset the lost count on a successful refind instead of leaving it.
    pub reset_lost_on_refind: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            association: AssociationConfig::default(),
            kalman: KalmanConfig::default(),
            max_lost: 30,
            refind_tau: geometry::DEFAULT_OCCLUSION_TAU,
            new_track_conf: 0.5,
            refind: true,
            stride: 4,
            sigma_rule: SigmaRule::default(),
            feature_alpha: 0.9,
            refind_noise_scale: 4.0,
            reset_lost_on_refind: false,
        }
    }
}

impl TrackerConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda" => self.association.lambda = typed(key, value)?,
            "iou_gate" => self.association.iou_gate = typed(key, value)?,
            "cos_gate" => self.association.cos_gate = typed(key, value)?,
            "max_lost" => self.max_lost = typed(key, value)?,
            "refind_tau" => self.refind_tau = typed(key, value)?,
            "new_track_conf" => self.new_track_conf = typed(key, value)?,
            "refind" => {
                self.refind = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            reason: format!("expected on|off, found `{value}`"),
                        })
                    }
                }
            }
            "stride" => self.stride = typed(key, value)?,
            "feature_alpha" => self.feature_alpha = typed(key, value)?,
            "refind_noise_scale" => self.refind_noise_scale = typed(key, value)?,
            "reset_lost_on_refind" => self.reset_lost_on_refind = typed(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        check("lambda", (0.0..=1.0).contains(&self.association.lambda), "must lie in [0, 1]")?;
        check("stride", self.stride > 0, "must be positive")?;
        check("feature_alpha", (0.0..=1.0).contains(&self.feature_alpha), "must lie in [0, 1]")?;
        check("refind_noise_scale", self.refind_noise_scale >= 0.0, "must be non-negative")?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        render_kv([
            ("lambda", self.association.lambda.to_string()),
            ("iou_gate", self.association.iou_gate.to_string()),
            ("cos_gate", self.association.cos_gate.to_string()),
            ("max_lost", self.max_lost.to_string()),
            ("refind_tau", self.refind_tau.to_string()),
            ("new_track_conf", self.new_track_conf.to_string()),
            ("refind", if self.refind { "on" } else { "off" }.to_string()),
            ("stride", self.stride.to_string()),
            ("feature_alpha", self.feature_alpha.to_string()),
            ("refind_noise_scale", self.refind_noise_scale.to_string()),
            ("reset_lost_on_refind", self.reset_lost_on_refind.to_string()),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tracked,
    Lost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: i64,
    pub bbox: BBox,
    /// Consecutive frames without a matched detection or a refind.
    pub lost: u32,
    pub center: Point2,
    pub feature: Vec<f64>,
    pub kalman: KalmanState,
    pub status: TrackStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub tracklets: Vec<Tracklet>,
    pub next_id: i64,
    pub config: TrackerConfig,
}

impl TrackerState {
    pub fn new(config: TrackerConfig) -> Self {
        Self {
            tracklets: Vec::new(),
            next_id: 1,
            config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputDetection {
    pub bbox: BBox,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub detections: Vec<InputDetection>,
    pub features: FeatureSet,
    pub occlusion_centers: Vec<(Point2, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Detected,
    Refound,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Detected => "detected",
            Self::Refound => "refound",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputBox {
    pub bbox: BBox,
    pub id: i64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameOutput {
    pub boxes: Vec<OutputBox>,
}

/// `alpha * old + (1 - alpha) * new`, renormalized; keeps `old` when the
/// mix vanishes.
pub fn smooth_feature(old: &[f64], new: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if old.len() != new.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", old.len(), new.len())));
    }
    let mix: Vec<f64> = old.iter().zip(new).map(|(o, n)| alpha * o + (1.0 - alpha) * n).collect();
    let norm = mix.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 || !norm.is_finite() {
        return Ok(old.to_vec());
    }
    Ok(mix.into_iter().map(|v| v / norm).collect())
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Best `(detection, occlusion center)` pair for a lost tracklet's
/// predicted box, scored by the Gaussian of the center against the overlap
/// of the predicted box and the detection. Returns the recovered box when
/// the best score exceeds `tau_o`.
pub fn refind(
    predicted: &BBox,
    detections: &[BBox],
    occ_centers: &[Point2],
    tau_o: f64,
    stride: u32,
    rule: &SigmaRule,
) -> Option<BBox> {
    let r = stride as f64;
    let mut best: Option<(f64, usize, usize)> = None;
    for (j, det) in detections.iter().enumerate() {
        let Some(region) = predicted.intersect(det) else { continue };
        for (k, p) in occ_centers.iter().enumerate() {
            let score = geometry::gaussian_score(&region, &geometry::quantize(p, r), r, rule);
            if best.is_none_or(|b| score > b.0) {
                best = Some((score, j, k));
            }
        }
    }
    let (score, j, k) = best?;
    if score > tau_o {
        Some(geometry::recover_box(predicted, &detections[j], &occ_centers[k]))
    } else {
        None
    }
}

/// One frame of the tracking state machine.
pub fn step(state: &TrackerState, input: &FrameInput) -> Result<(TrackerState, FrameOutput)> {
    let cfg = &state.config;
    let n_det = input.detections.len();
    if input.features.len() != n_det {
        return Err(Error::DimensionMismatch(format!(
            "{n_det} detections but {} feature rows",
            input.features.len()
        )));
    }
    let det_boxes: Vec<BBox> = input.detections.iter().map(|d| d.bbox).collect();
    let det_features: Vec<Vec<f64>> = (0..n_det).map(|j| normalized(&input.features.row(j))).collect();

    let predicted: Vec<(KalmanState, BBox)> = state
        .tracklets
        .iter()
        .map(|t| kalman::predict(&t.kalman, &cfg.kalman))
        .collect();

    let queries: Vec<TrackQuery<'_>> = state
        .tracklets
        .iter()
        .zip(&predicted)
        .map(|(t, p)| TrackQuery {
            predicted: p.1,
            feature: &t.feature,
            apply_iou_gate: t.status == TrackStatus::Tracked,
        })
        .collect();
    let cost = build_cost(&queries, &det_boxes, &det_features, &cfg.association)?;
    let assignment = solve(&cost);

    let mut next = TrackerState {
        tracklets: Vec::with_capacity(state.tracklets.len() + n_det),
        next_id: state.next_id,
        config: *cfg,
    };
    let mut out = FrameOutput::default();

    for &(i, j) in &assignment.matches {
        let old = &state.tracklets[i];
        let det = &input.detections[j];
        let kalman = kalman::update(&predicted[i].0, &det.bbox, 1.0, &cfg.kalman);
        next.tracklets.push(Tracklet {
            id: old.id,
            bbox: det.bbox,
            lost: 0,
            center: det.bbox.center(),
            feature: smooth_feature(&old.feature, &det_features[j], cfg.feature_alpha)?,
            kalman,
            status: TrackStatus::Tracked,
        });
        out.boxes.push(OutputBox {
            bbox: det.bbox,
            id: old.id,
            provenance: Provenance::Detected,
        });
    }

    for &j in &assignment.unmatched_cols {
        let det = &input.detections[j];
        if det.conf < cfg.new_track_conf {
            continue;
        }
        let id = next.next_id;
        next.next_id += 1;
        next.tracklets.push(Tracklet {
            id,
            bbox: det.bbox,
            lost: 0,
            center: det.bbox.center(),
            feature: det_features[j].clone(),
            kalman: kalman::init(&det.bbox, &cfg.kalman)?,
            status: TrackStatus::Tracked,
        });
        out.boxes.push(OutputBox {
            bbox: det.bbox,
            id,
            provenance: Provenance::Detected,
        });
    }

    let centers: Vec<Point2> = input.occlusion_centers.iter().map(|c| c.0).collect();
    let mut lost_rows = assignment.unmatched_rows.clone();
    lost_rows.sort_by_key(|&i| state.tracklets[i].id);
    for i in lost_rows {
        let old = &state.tracklets[i];
        if old.lost >= cfg.max_lost {
            continue;
        }
        let (prior, b_tilde) = predicted[i];
        let found = if cfg.refind {
            refind(&b_tilde, &det_boxes, &centers, cfg.refind_tau, cfg.stride, &cfg.sigma_rule)
        } else {
            None
        };
        match found {
            Some(b) => {
                let kalman = kalman::update(&prior, &b, cfg.refind_noise_scale, &cfg.kalman);
                next.tracklets.push(Tracklet {
                    id: old.id,
                    bbox: b,
                    lost: if cfg.reset_lost_on_refind { 0 } else { old.lost },
                    center: b.center(),
                    feature: old.feature.clone(),
                    kalman,
                    status: TrackStatus::Tracked,
                });
                out.boxes.push(OutputBox {
                    bbox: b,
                    id: old.id,
                    provenance: Provenance::Refound,
                });
            }
            None => next.tracklets.push(Tracklet {
                id: old.id,
                bbox: b_tilde,
                lost: old.lost + 1,
                center: b_tilde.center(),
                feature: old.feature.clone(),
                kalman: prior,
                status: TrackStatus::Lost,
            }),
        }
    }
    next.tracklets.sort_by_key(|t| t.id);
    Ok((next, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn bx(x_l: f64, y_t: f64, x_r: f64, y_b: f64) -> BBox {
        BBox::new(x_l, y_t, x_r, y_b).unwrap()
    }

    fn input(dets: &[(BBox, Vec<f64>)], centers: &[Point2]) -> FrameInput {
        let d = dets.first().map_or(2, |x| x.1.len());
        FrameInput {
            detections: dets.iter().map(|x| InputDetection { bbox: x.0, conf: 0.9 }).collect(),
            features: FeatureSet::new(DMatrix::from_fn(dets.len(), d, |i, j| dets[i].1[j])).unwrap(),
            occlusion_centers: centers.iter().map(|c| (*c, 1.0)).collect(),
        }
    }

    #[test]
    fn new_detection_spawns_tracklet() {
        let s = TrackerState::new(TrackerConfig::default());
        let (s, out) = step(&s, &input(&[(bx(0., 0., 10., 20.), vec![1., 0.])], &[])).unwrap();
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(out.boxes[0].id, 1);
        assert_eq!(s.tracklets.len(), 1);
        assert_eq!(s.next_id, 2);

        let (s, out) = step(&s, &input(&[], &[])).unwrap();
        assert!(out.boxes.is_empty());
        assert_eq!(s.tracklets[0].lost, 1);
        assert_eq!(s.tracklets[0].status, TrackStatus::Lost);
        assert_eq!(s.tracklets[0].bbox, bx(0., 0., 10., 20.));
    }

    #[test]
    fn low_confidence_detection_does_not_spawn() {
        let s = TrackerState::new(TrackerConfig::default());
        let mut inp = input(&[(bx(0., 0., 10., 20.), vec![1., 0.])], &[]);
        inp.detections[0].conf = 0.3;
        let (s, out) = step(&s, &inp).unwrap();
        assert!(out.boxes.is_empty() && s.tracklets.is_empty());
    }

    #[test]
    fn misaligned_features_error() {
        let s = TrackerState::new(TrackerConfig::default());
        let mut inp = input(&[(bx(0., 0., 10., 20.), vec![1., 0.])], &[]);
        inp.detections.push(inp.detections[0]);
        assert!(step(&s, &inp).is_err());
    }

    #[test]
    fn lost_tracklets_expire_and_ids_are_not_reused() {
        let cfg = TrackerConfig { max_lost: 3, ..Default::default() };
        let s = TrackerState::new(cfg);
        let (mut s, _) = step(&s, &input(&[(bx(0., 0., 10., 20.), vec![1., 0.])], &[])).unwrap();
        for _ in 0..3 {
            s = step(&s, &input(&[], &[])).unwrap().0;
        }
        assert_eq!(s.tracklets[0].lost, 3);
        s = step(&s, &input(&[], &[])).unwrap().0;
        assert!(s.tracklets.is_empty());
        let (_, out) = step(&s, &input(&[(bx(0., 0., 10., 20.), vec![1., 0.])], &[])).unwrap();
        assert_eq!(out.boxes[0].id, 2);
    }

    #[test]
    fn refind_examples() {
        let rule = SigmaRule::default();
        let pred = bx(0., 0., 40., 100.);
        let occluder = bx(20., 0., 60., 100.);
        assert_eq!(refind(&pred, &[occluder], &[], 0.7, 4, &rule), None);

        let region = pred.intersect(&occluder).unwrap();
        let got = refind(&pred, &[occluder], &[region.center()], 0.7, 4, &rule).unwrap();
        assert!(got.max_abs_diff(&pred) < 1e-9);

        // No overlap with the predicted box: no candidate.
        let far = bx(200., 0., 240., 100.);
        assert_eq!(refind(&pred, &[far], &[far.center()], 0.7, 4, &rule), None);
    }

    #[test]
    fn refind_picks_highest_scoring_pair() {
        let rule = SigmaRule::default();
        let pred = bx(0., 0., 40., 100.);
        let a = bx(20., 0., 60., 100.);
        let b = bx(0., 50., 40., 150.);
        let ra = pred.intersect(&a).unwrap();
        let rb = pred.intersect(&b).unwrap();
        // Exhaustive argmax over all pairs.
        let dets = [a, b];
        let (ca, cb) = (ra.center(), rb.center());
        let centers = [Point2::new(cb.x + 6.0, cb.y), Point2::new(ca.x, ca.y + 12.0)];
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (j, d) in dets.iter().enumerate() {
            let reg = pred.intersect(d).unwrap();
            for (k, c) in centers.iter().enumerate() {
                let s = geometry::gaussian_score(&reg, &geometry::quantize(c, 4.0), 4.0, &rule);
                if s > best.0 {
                    best = (s, j, k);
                }
            }
        }
        let expect = geometry::recover_box(&pred, &dets[best.1], &centers[best.2]);
        let got = refind(&pred, &dets, &centers, 0.0, 4, &rule).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn smooth_feature_examples() {
        let old = vec![1.0, 0.0];
        let new = vec![0.0, 2.0];
        assert_eq!(smooth_feature(&old, &new, 1.0).unwrap(), old);
        assert_eq!(smooth_feature(&old, &new, 0.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(smooth_feature(&old, &old, 0.9).unwrap(), old);
        assert_eq!(smooth_feature(&old, &[-1.0, 0.0], 0.5).unwrap(), old);
        assert!(smooth_feature(&old, &[1.0], 0.5).is_err());
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = TrackerConfig::default();
        cfg.set("refind", "off").unwrap();
        cfg.set("lambda", "0.25").unwrap();
        assert!(!cfg.refind);
        let mut back = TrackerConfig::default();
        for (k, v) in crate::config::parse_kv(&cfg.to_kv()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(cfg.set("nope", "1").is_err());
    }
}
