//! Extended Kalman filtering over soft measurements, plus the FIFO replay
//! buffer used for counterfactual re-estimation under alternate pipelines.
//!
//! Measurements are state-shaped with an availability mask, so the update
//! works with C = the available rows of I₄. Unavailable components are
//! zeroed out of the gain rather than resized, which keeps everything on
//! static 4×4 types. The covariance update uses the Joseph form.

use crate::perception::{soft_measurement, SoftMeasurement};
use crate::plant::Dynamics;
use crate::sensors::{NoiseConfig, RawMeasurementSet, SensorSet};
use nalgebra::{Matrix4, Vector4};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("non-finite state estimate")]
    NonFiniteState,
    #[error("non-finite or indefinite covariance")]
    BadCovariance,
    #[error("singular innovation covariance")]
    SingularInnovation,
}

/// Filter mean, covariance and time index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfEstimate {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub k: usize,
}

impl EkfEstimate {
    pub fn new(x: Vector4<f64>, p: Matrix4<f64>) -> Self {
        Self { x, p, k: 0 }
    }

    fn check(&self) -> Result<(), EstimationError> {
        if !self.x.iter().all(|v| v.is_finite()) {
            return Err(EstimationError::NonFiniteState);
        }
        if !self.p.iter().all(|v| v.is_finite()) {
            return Err(EstimationError::BadCovariance);
        }
        Ok(())
    }
}

fn symmetrize(m: &Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

/// Innovation over available components with its per-component standard
/// deviation; masked components carry zeros.
#[derive(Debug, Clone, Copy)]
pub struct Innovation {
    pub r: Vector4<f64>,
    pub sigma: Vector4<f64>,
    pub available: [bool; 4],
}

/// Prediction step: x̂⁺ = f(x̂, u), P⁺ = F P Fᵀ + Q.
pub fn ekf_predict<D: Dynamics>(
    dynamics: &D,
    est: &EkfEstimate,
    u: f64,
) -> Result<EkfEstimate, EstimationError> {
    est.check()?;
    let (f, _) = dynamics.jacobians(&est.x, u);
    let x = dynamics.step_mean(&est.x, u);
    let p = symmetrize(&(f * est.p * f.transpose() + dynamics.process_noise()));
    let out = EkfEstimate { x, p, k: est.k + 1 };
    out.check()?;
    Ok(out)
}

/// Innovation of a prediction against a soft measurement (no state change).
pub fn innovation(pred: &EkfEstimate, soft: &SoftMeasurement) -> Innovation {
    let mut r = Vector4::zeros();
    let mut sigma = Vector4::zeros();
    for j in 0..4 {
        if soft.available[j] {
            r[j] = soft.y[j] - pred.x[j];
            sigma[j] = (pred.p[(j, j)] + soft.variance[j]).sqrt();
        }
    }
    Innovation {
        r,
        sigma,
        available: soft.available,
    }
}

/// Measurement update restricted to the available rows, Joseph form.
///
/// Returns the posterior and the innovation that produced it. With an empty
/// mask the prediction is passed through unchanged.
pub fn ekf_update(
    pred: &EkfEstimate,
    soft: &SoftMeasurement,
) -> Result<(EkfEstimate, Innovation), EstimationError> {
    ekf_update_scaled(pred, soft, 1.0)
}

/// Update with the measurement covariance inflated by `1 / weight²`
/// (weight 1 is the plain update; weight 0 skips it). Used by the
/// outlier-robust baselines.
pub fn ekf_update_scaled(
    pred: &EkfEstimate,
    soft: &SoftMeasurement,
    weight: f64,
) -> Result<(EkfEstimate, Innovation), EstimationError> {
    pred.check()?;
    let innov = innovation(pred, soft);
    if weight == 0.0 || soft.n_available() == 0 {
        return Ok((*pred, innov));
    }

    // C = diag(mask); masked rows get unit variance and zero innovation so
    // they drop out of the gain algebraically.
    let mut c = Matrix4::zeros();
    let mut r_mat = Matrix4::identity();
    for j in 0..4 {
        if soft.available[j] {
            c[(j, j)] = 1.0;
            r_mat[(j, j)] = soft.variance[j] / (weight * weight);
        }
    }
    let s = c * pred.p * c.transpose() + r_mat;
    let s_inv = s.try_inverse().ok_or(EstimationError::SingularInnovation)?;
    let gain = pred.p * c.transpose() * s_inv;

    let x = pred.x + gain * innov.r;
    let i_kc = Matrix4::identity() - gain * c;
    let p = symmetrize(&(i_kc * pred.p * i_kc.transpose() + gain * r_mat * gain.transpose()));

    let out = EkfEstimate { x, p, k: pred.k };
    out.check()?;
    Ok((out, innov))
}

/// One step of past context for counterfactual replay.
#[derive(Debug, Clone)]
pub struct ReplayRecord {
    /// Posterior estimate at the end of the step.
    pub estimate: EkfEstimate,
    /// Raw (possibly attacked) measurements observed during the step.
    pub raw: RawMeasurementSet,
    /// Input chosen at the step, applied until the next one.
    pub u: f64,
    /// Soft measurement the live pipeline produced at the step.
    pub soft: SoftMeasurement,
}

/// FIFO of the last `capacity` steps.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    records: VecDeque<ReplayRecord>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, record: ReplayRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayRecord> {
        self.records.iter()
    }
}

/// Result of a counterfactual replay.
#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    /// Posterior at the newest buffered step under the alternate pipeline.
    pub estimate: EkfEstimate,
    /// The alternate pipeline's soft chain head (for continuing it).
    pub soft: SoftMeasurement,
    /// Input stored at the newest buffered step.
    pub last_u: f64,
    /// False when the buffer was empty and the fallback estimate was returned.
    pub replayed: bool,
}

/// Re-runs the filter over the buffer with only the sensors in `pipeline`
/// enabled, starting from the oldest buffered posterior.
///
/// An empty buffer returns `fallback` unchanged with `replayed = false`.
pub fn re_estimate<D: Dynamics>(
    dynamics: &D,
    buffer: &ReplayBuffer,
    pipeline: SensorSet,
    noise: &NoiseConfig,
    dt: f64,
    fallback: &EkfEstimate,
) -> Result<ReplayOutcome, EstimationError> {
    let mut iter = buffer.iter();
    let Some(first) = iter.next() else {
        return Ok(ReplayOutcome {
            estimate: *fallback,
            soft: SoftMeasurement::none(),
            last_u: 0.0,
            replayed: false,
        });
    };

    let mut est = first.estimate;
    let mut prev_soft = first.soft;
    let mut last_u = first.u;
    for rec in iter {
        let pred = ekf_predict(dynamics, &est, last_u)?;
        let soft = soft_measurement(pipeline, &rec.raw, &prev_soft, noise, dt);
        let (post, _) = ekf_update(&pred, &soft)?;
        est = post;
        prev_soft = soft;
        last_u = rec.u;
    }
    Ok(ReplayOutcome {
        estimate: est,
        soft: prev_soft,
        last_u,
        replayed: true,
    })
}

/// Replay through the buffer and then through one more raw measurement that
/// has not been buffered yet; used when the trusted set changes mid-step.
#[allow(clippy::too_many_arguments)]
pub fn re_estimate_through<D: Dynamics>(
    dynamics: &D,
    buffer: &ReplayBuffer,
    pipeline: SensorSet,
    noise: &NoiseConfig,
    dt: f64,
    fallback: &EkfEstimate,
    current_raw: &RawMeasurementSet,
    current_u_prev: f64,
) -> Result<(EkfEstimate, SoftMeasurement, bool), EstimationError> {
    let outcome = re_estimate(dynamics, buffer, pipeline, noise, dt, fallback)?;
    if !outcome.replayed {
        let soft = soft_measurement(pipeline, current_raw, &SoftMeasurement::none(), noise, dt);
        return Ok((*fallback, soft, false));
    }
    let pred = ekf_predict(dynamics, &outcome.estimate, current_u_prev)?;
    let soft = soft_measurement(pipeline, current_raw, &outcome.soft, noise, dt);
    let (post, _) = ekf_update(&pred, &soft)?;
    Ok((post, soft, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{PlantParams, PlantState};
    use crate::sensors::{measure_all, SensorId};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exactly linear surrogate plant for comparing the EKF against a
    /// textbook Kalman filter.
    struct LinearPlant {
        a: Matrix4<f64>,
        b: Vector4<f64>,
        q: Matrix4<f64>,
    }

    impl Dynamics for LinearPlant {
        fn step_mean(&self, x: &Vector4<f64>, u: f64) -> Vector4<f64> {
            self.a * x + self.b * u
        }
        fn jacobians(&self, _x: &Vector4<f64>, _u: f64) -> (Matrix4<f64>, Vector4<f64>) {
            (self.a, self.b)
        }
        fn process_noise(&self) -> Matrix4<f64> {
            self.q
        }
        fn affine(&self, x: &Vector4<f64>) -> (Vector4<f64>, Vector4<f64>) {
            (self.a * x, self.b)
        }
    }

    fn linear_plant(q: f64) -> LinearPlant {
        let a = Matrix4::new(
            1.0, 0.01, 0.0, 0.0, //
            0.0, 0.99, 0.02, 0.0, //
            0.0, 0.0, 1.0, 0.01, //
            0.0, 0.01, 0.05, 0.98,
        );
        LinearPlant {
            a,
            b: Vector4::new(0.0, 0.01, 0.0, 0.002),
            q: Matrix4::from_diagonal(&Vector4::from_element(q)),
        }
    }

    fn full_soft(y: Vector4<f64>, var: f64) -> SoftMeasurement {
        SoftMeasurement {
            y,
            available: [true; 4],
            variance: Vector4::from_element(var),
            drifting: [false; 4],
        }
    }

    #[test]
    fn prediction_at_equilibrium_is_stationary() {
        let plant = PlantParams::default();
        let est = EkfEstimate::new(Vector4::zeros(), Matrix4::identity() * 1e-4);
        let pred = ekf_predict(&plant, &est, 0.0).unwrap();
        assert_abs_diff_eq!(pred.x.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn prediction_grows_covariance_trace() {
        let plant = PlantParams::default();
        let mut est = EkfEstimate::new(
            Vector4::new(0.0, 0.0, 0.05, 0.0),
            Matrix4::identity() * 1e-6,
        );
        let mut last = est.p.trace();
        for _ in 0..50 {
            est = ekf_predict(&plant, &est, 0.0).unwrap();
            assert!(est.p.trace() >= last);
            last = est.p.trace();
        }
    }

    #[test]
    fn perfect_measurement_limit_pins_posterior_to_measurement() {
        let plant = PlantParams::default();
        let pred = EkfEstimate::new(Vector4::new(0.1, 0.0, 0.0, 0.0), Matrix4::identity() * 1e-2);
        let y = Vector4::new(0.5, -0.3, 0.2, 0.1);
        let (post, _) = ekf_update(&pred, &full_soft(y, 1e-14)).unwrap();
        assert!((post.x - y).norm() < 1e-9);
        let _ = plant;
    }

    #[test]
    fn infinite_noise_limit_keeps_prediction() {
        let pred = EkfEstimate::new(
            Vector4::new(0.1, -0.2, 0.3, 0.4),
            Matrix4::identity() * 1e-3,
        );
        let (post, _) = ekf_update(&pred, &full_soft(Vector4::zeros(), 1e14)).unwrap();
        assert!((post.x - pred.x).norm() < 1e-9);
    }

    #[test]
    fn ekf_matches_independent_kalman_filter_on_linear_plant() {
        // Textbook KF written independently of the implementation path.
        let plant = linear_plant(1e-6);
        let r_var = 1e-4;
        let mut est = EkfEstimate::new(Vector4::zeros(), Matrix4::identity() * 1e-3);
        let mut kf_x = est.x;
        let mut kf_p = est.p;
        let r_mat = Matrix4::from_diagonal(&Vector4::from_element(r_var));

        for k in 0..1000 {
            let u = (k as f64 * 0.01).sin();
            // Synthetic measurement stream (shared).
            let y = Vector4::new(
                (k as f64 * 0.013).sin(),
                (k as f64 * 0.007).cos() * 0.5,
                (k as f64 * 0.019).sin() * 0.2,
                (k as f64 * 0.011).cos() * 0.1,
            );

            est = ekf_predict(&plant, &est, u).unwrap();
            let (post, _) = ekf_update(&est, &full_soft(y, r_var)).unwrap();
            est = post;

            // Independent oracle.
            kf_x = plant.a * kf_x + plant.b * u;
            kf_p = plant.a * kf_p * plant.a.transpose() + plant.q;
            let s = kf_p + r_mat;
            let gain = kf_p * s.try_inverse().unwrap();
            kf_x += gain * (y - kf_x);
            kf_p = (Matrix4::identity() - gain) * kf_p;
            kf_p = (kf_p + kf_p.transpose()) * 0.5;

            assert!(
                (est.x - kf_x).norm() < 1e-9,
                "step {k}: state gap {}",
                (est.x - kf_x).norm()
            );
            assert!((est.p - kf_p).norm() < 1e-9);
        }
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let plant = PlantParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = NoiseConfig::default();
        let mut est = EkfEstimate::new(Vector4::zeros(), Matrix4::identity() * 1e-3);
        let mut state = PlantState::origin();
        let mut prev = SoftMeasurement::seed(Vector4::zeros(), &noise);
        for k in 0..500 {
            state = plant.step(&state, 0.0, None).unwrap();
            let raw = measure_all(&plant, &state, 0.0, &noise, k, &mut rng);
            let soft = soft_measurement(SensorSet::all(), &raw, &prev, &noise, plant.dt);
            prev = soft;
            est = ekf_predict(&plant, &est, 0.0).unwrap();
            let (post, _) = ekf_update(&est, &soft).unwrap();
            est = post;
            assert!((est.p - est.p.transpose()).norm() < 1e-14);
            let eig = nalgebra::SymmetricEigen::new(est.p);
            assert!(
                eig.eigenvalues.iter().all(|&l| l >= -1e-10),
                "min eig {}",
                eig.eigenvalues.min()
            );
        }
    }

    /// Drives a benign closed-ish loop and fills a buffer, returning the live
    /// estimate alongside it.
    fn run_benign(
        steps: usize,
        schedule: &crate::sensors::AttackSchedule,
        seed: u64,
    ) -> (
        PlantParams,
        NoiseConfig,
        ReplayBuffer,
        EkfEstimate,
        PlantState,
    ) {
        let plant = PlantParams::default();
        let noise = NoiseConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buffer = ReplayBuffer::new(100);
        let mut est = EkfEstimate::new(Vector4::zeros(), Matrix4::identity() * 1e-4);
        let mut state = PlantState::origin();
        let mut prev = SoftMeasurement::seed(Vector4::zeros(), &noise);
        let mut u = 0.0;
        for k in 0..steps {
            state = plant.step(&state, u, None).unwrap();
            let raw = measure_all(&plant, &state, u, &noise, k, &mut rng);
            let (raw, _) = schedule.apply(&raw, k, plant.dt);
            let pred = ekf_predict(&plant, &est, u).unwrap();
            let soft = soft_measurement(SensorSet::all(), &raw, &prev, &noise, plant.dt);
            let (post, _) = ekf_update(&pred, &soft).unwrap();
            est = post;
            u = -0.5 * est.x[1]; // mild damping to keep things tame
            buffer.push(ReplayRecord {
                estimate: est,
                raw,
                u,
                soft,
            });
            prev = soft;
        }
        (plant, noise, buffer, est, state)
    }

    #[test]
    fn replay_with_no_exclusions_is_bit_identical() {
        let (plant, noise, buffer, live, _) =
            run_benign(150, &crate::sensors::AttackSchedule::empty(), 3);
        let out = re_estimate(&plant, &buffer, SensorSet::all(), &noise, plant.dt, &live).unwrap();
        assert!(out.replayed);
        assert_eq!(out.estimate.x, live.x);
        assert_eq!(out.estimate.p, live.p);
    }

    #[test]
    fn empty_buffer_returns_fallback_with_flag() {
        let plant = PlantParams::default();
        let noise = NoiseConfig::default();
        let buffer = ReplayBuffer::new(10);
        let live = EkfEstimate::new(Vector4::new(1.0, 0.0, 0.0, 0.0), Matrix4::identity());
        let out = re_estimate(&plant, &buffer, SensorSet::all(), &noise, plant.dt, &live).unwrap();
        assert!(!out.replayed);
        assert_eq!(out.estimate.x, live.x);
    }

    #[test]
    fn benign_exclusion_stays_close_to_live() {
        let (plant, noise, buffer, live, _) =
            run_benign(150, &crate::sensors::AttackSchedule::empty(), 4);
        let out = re_estimate(
            &plant,
            &buffer,
            SensorSet::all().without(SensorId::Encoder),
            &noise,
            plant.dt,
            &live,
        )
        .unwrap();
        // Both filters see the same truth; the gap stays within 5σ of the
        // combined filter uncertainty.
        let sigma = ((out.estimate.p + live.p).trace()).sqrt();
        let gap = (out.estimate.x - live.x).norm();
        assert!(gap < 5.0 * sigma, "gap {gap} vs 5 sigma {}", 5.0 * sigma);
    }

    #[test]
    fn excluding_attacked_sensor_recovers_truth() {
        // Encoder biased for the last second of the run.
        let schedule = crate::sensors::AttackSchedule {
            windows: vec![crate::sensors::AttackWindow {
                sensor: SensorId::Encoder,
                start_s: 0.25,
                end_s: 10.0,
                bias: [0.5, 0.5],
            }],
        };
        let (plant, noise, buffer, live, truth) = run_benign(150, &schedule, 5);
        let out = re_estimate(
            &plant,
            &buffer,
            SensorSet::all().without(SensorId::Encoder),
            &noise,
            plant.dt,
            &live,
        )
        .unwrap();
        let live_err = (live.x - truth.to_vector()).norm();
        let replay_err = (out.estimate.x - truth.to_vector()).norm();
        assert!(
            live_err / replay_err > 2.0,
            "live err {live_err}, replay err {replay_err}"
        );
    }
}
