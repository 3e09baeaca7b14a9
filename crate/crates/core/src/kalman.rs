//! Constant-velocity Kalman filter over `(cx, cy, w, h)` box states.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point2};

pub type StateVec = SVector<f64, 8>;
pub type StateCov = SMatrix<f64, 8, 8>;
type MeasVec = SVector<f64, 4>;
type MeasCov = SMatrix<f64, 4, 4>;
type MeasMat = SMatrix<f64, 4, 8>;

const MIN_SIZE: f64 = 1e-3;

/// Noise scales, each a multiple of the current box height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanConfig {
    pub std_position: f64,
    pub std_velocity: f64,
    pub std_measurement: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            std_position: 1.0 / 20.0,
            std_velocity: 1.0 / 160.0,
            std_measurement: 1.0 / 20.0,
        }
    }
}

/// Mean `(cx, cy, w, h, vcx, vcy, vw, vh)` and its covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub mean: StateVec,
    pub covariance: StateCov,
}

impl KalmanState {
    pub fn bbox(&self) -> BBox {
        let w = self.mean[2].max(MIN_SIZE);
        let h = self.mean[3].max(MIN_SIZE);
        BBox {
            x_l: self.mean[0] - w / 2.0,
            y_t: self.mean[1] - h / 2.0,
            x_r: self.mean[0] + w / 2.0,
            y_b: self.mean[1] + h / 2.0,
        }
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.mean[0], self.mean[1])
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.mean[4], self.mean[5])
    }
}

fn measurement_matrix() -> MeasMat {
    MeasMat::from_fn(|i, j| if i == j { 1.0 } else { 0.0 })
}

fn transition() -> StateCov {
    let mut f = StateCov::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn symmetrize(p: &StateCov) -> StateCov {
    (p + p.transpose()) * 0.5
}

fn to_measurement(b: &BBox) -> MeasVec {
    let c = b.center();
    MeasVec::new(c.x, c.y, b.width(), b.height())
}

/// Starts a track at `b` with zero velocity.
pub fn init(b: &BBox, cfg: &KalmanConfig) -> Result<KalmanState> {
    if b.area() <= 0.0 {
        return Err(Error::InvalidBox(format!("zero-area box {b:?}")));
    }
    let z = to_measurement(b);
    let mut mean = StateVec::zeros();
    mean.fixed_rows_mut::<4>(0).copy_from(&z);
    let h = b.height();
    let sp = 2.0 * cfg.std_position * h;
    let sv = 10.0 * cfg.std_velocity * h;
    let diag = StateVec::from_fn(|i, _| if i < 4 { sp * sp } else { sv * sv });
    Ok(KalmanState {
        mean,
        covariance: StateCov::from_diagonal(&diag),
    })
}

/// Advances one frame; returns the new state and its box.
pub fn predict(state: &KalmanState, cfg: &KalmanConfig) -> (KalmanState, BBox) {
    let f = transition();
    let h = state.mean[3].max(MIN_SIZE);
    let sp = cfg.std_position * h;
    let sv = cfg.std_velocity * h;
    let q = StateCov::from_diagonal(&StateVec::from_fn(|i, _| {
        if i < 4 {
            sp * sp
        } else {
            sv * sv
        }
    }));
    let mut mean = f * state.mean;
    mean[2] = mean[2].max(MIN_SIZE);
    mean[3] = mean[3].max(MIN_SIZE);
    let covariance = symmetrize(&(f * state.covariance * f.transpose() + q));
    let next = KalmanState { mean, covariance };
    (next, next.bbox())
}

/// Linear-Gaussian correction with a box measurement whose noise standard
/// deviation is `noise_scale * std_measurement * h`.
pub fn update(
    state: &KalmanState,
    measurement: &BBox,
    noise_scale: f64,
    cfg: &KalmanConfig,
) -> KalmanState {
    let hm = measurement_matrix();
    let z = to_measurement(measurement);
    let sr = noise_scale * cfg.std_measurement * state.mean[3].max(MIN_SIZE);
    let r = MeasCov::identity() * (sr * sr);
    let p = &state.covariance;
    let s = hm * p * hm.transpose() + r;
    let Some(s_inv) = s.try_inverse() else {
        return *state;
    };
    let k = p * hm.transpose() * s_inv;
    let innovation = z - hm * state.mean;
    let mut mean = state.mean + k * innovation;
    mean[2] = mean[2].max(MIN_SIZE);
    mean[3] = mean[3].max(MIN_SIZE);
    let ikh = StateCov::identity() - k * hm;
    let covariance = symmetrize(&(ikh * p * ikh.transpose() + k * r * k.transpose()));
    KalmanState { mean, covariance }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x_l: f64, y_t: f64, x_r: f64, y_b: f64) -> BBox {
        BBox::new(x_l, y_t, x_r, y_b).unwrap()
    }

    fn min_eigenvalue(p: &StateCov) -> f64 {
        p.symmetric_eigenvalues().min()
    }

    #[test]
    fn init_examples() {
        let cfg = KalmanConfig::default();
        let s = init(&bx(0., 0., 10., 10.), &cfg).unwrap();
        assert_eq!(
            s.mean.as_slice(),
            &[5.0, 5.0, 10.0, 10.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(s.covariance, s.covariance.transpose());
        assert!(min_eigenvalue(&s.covariance) > 0.0);
        assert_eq!(s, init(&bx(0., 0., 10., 10.), &cfg).unwrap());
        assert!(init(&bx(5., 5., 5., 9.), &cfg).is_err());
    }

    #[test]
    fn predict_examples() {
        let cfg = KalmanConfig::default();
        let s = init(&bx(0., 0., 10., 20.), &cfg).unwrap();
        let (p, b) = predict(&s, &cfg);
        assert_eq!(b, bx(0., 0., 10., 20.));
        assert!(p.covariance.trace() > s.covariance.trace());

        let mut moving = s;
        moving.mean[4] = 2.0;
        let (_, b) = predict(&moving, &cfg);
        assert_eq!(b, bx(2., 0., 12., 20.));
    }

    #[test]
    fn update_noise_limits() {
        let cfg = KalmanConfig::default();
        let s = init(&bx(0., 0., 10., 20.), &cfg).unwrap();
        let (s, _) = predict(&s, &cfg);
        let z = bx(3., 1., 14., 22.);
        let exact = update(&s, &z, 0.0, &cfg);
        assert!(exact.bbox().max_abs_diff(&z) < 1e-9);
        let ignored = update(&s, &z, 1e9, &cfg);
        assert!(ignored.bbox().max_abs_diff(&s.bbox()) < 1e-9);
    }

    #[test]
    fn posterior_not_larger_than_prior_on_measured_subspace() {
        let cfg = KalmanConfig::default();
        let mut s = init(&bx(10., 10., 30., 60.), &cfg).unwrap();
        for k in 0..20 {
            let (p, _) = predict(&s, &cfg);
            let z = bx(10. + k as f64, 10., 30. + k as f64, 60.);
            let post = update(&p, &z, 1.0, &cfg);
            let prior = p.covariance.fixed_view::<4, 4>(0, 0).into_owned();
            let postc = post.covariance.fixed_view::<4, 4>(0, 0).into_owned();
            let diff = prior - postc;
            assert!(diff.symmetric_eigenvalues().min() >= -1e-9);
            s = post;
        }
    }

    #[test]
    fn tracks_constant_velocity() {
        let cfg = KalmanConfig::default();
        let truth = |t: f64| bx(100. + 3. * t, 50. - 1.5 * t, 140. + 3. * t, 130. - 1.5 * t);
        let err = |s: &KalmanState, t: f64| {
            let (c, tc) = (s.center(), truth(t).center());
            ((c.x - tc.x).powi(2) + (c.y - tc.y).powi(2)).sqrt()
        };
        let mut s = init(&truth(0.0), &cfg).unwrap();
        let mut prior_err = f64::INFINITY;
        for t in 1..=10 {
            let (p, _) = predict(&s, &cfg);
            let e = err(&p, t as f64);
            assert!(e < prior_err);
            prior_err = e;
            s = update(&p, &truth(t as f64), 0.0, &cfg);
        }
        assert!(err(&s, 10.0) < 0.1);
        assert!(s.velocity().0 > 2.5 && s.velocity().1 < -1.25);
    }

    #[test]
    fn covariance_stays_symmetric() {
        let cfg = KalmanConfig::default();
        let mut s = init(&bx(0., 0., 20., 50.), &cfg).unwrap();
        for t in 0..1000 {
            let (p, _) = predict(&s, &cfg);
            let dx = (t as f64 * 0.37).sin() * 3.0;
            s = update(&p, &bx(dx, 0., 20. + dx, 50.), 1.0, &cfg);
            let asym = (s.covariance - s.covariance.transpose()).amax();
            assert!(asym <= 1e-9);
        }
        assert!(min_eigenvalue(&s.covariance) >= -1e-9);
    }
}
