//! Perception pipelines over sensor subsets.
//!
//! The pipeline family 𝒫_S turns raw readings from the enabled sensors
//! S ⊆ {encoder, camera, imu} into a state-shaped soft measurement
//! y = x + ε with a per-component availability mask and effective noise
//! variance. A bipartite graph records which sensor feeds which component;
//! it doubles as the skeleton of the Bayesian network used for attack
//! inference.
//!
//! Component construction (weights are minimum-variance):
//! - position: encoder p ⊕ camera p
//! - velocity: encoder v ⊕ (previous soft v + dt · imu v̇)
//! - angle: camera θ, else previous soft θ + dt · imu ω
//! - angular velocity: imu ω, else (camera θ − previous soft θ) / dt
//! - velocity with neither encoder nor IMU: differenced soft position
//!
//! Fallbacks that integrate or difference use the previous *soft*
//! measurement, never the filter estimate, so the pipeline stays decoupled
//! from the estimator it feeds.

use crate::sensors::{NoiseConfig, RawMeasurementSet, SensorId, SensorSet};
use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

/// Soft-measurement component indices.
pub const POSITION: usize = 0;
pub const VELOCITY: usize = 1;
pub const ANGLE: usize = 2;
pub const ANGULAR_VELOCITY: usize = 3;

pub const COMPONENT_NAMES: [&str; 4] = ["position", "velocity", "angle", "angular_velocity"];

/// Bipartite sensor → component edge set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptionGraph {
    pub edges: Vec<(SensorId, usize)>,
}

impl PerceptionGraph {
    /// The cart-pole graph: encoder → {position, velocity},
    /// camera → {position, angle}, imu → {velocity, angular velocity}.
    pub fn cart_pole() -> Self {
        Self {
            edges: vec![
                (SensorId::Encoder, POSITION),
                (SensorId::Camera, POSITION),
                (SensorId::Encoder, VELOCITY),
                (SensorId::Imu, VELOCITY),
                (SensorId::Camera, ANGLE),
                (SensorId::Imu, ANGULAR_VELOCITY),
            ],
        }
    }

    /// N(j): the sensors feeding component `j`.
    pub fn neighbors(&self, component: usize) -> Result<SensorSet, PerceptionError> {
        if component >= 4 {
            return Err(PerceptionError::UnknownComponent(component));
        }
        let mut set = SensorSet::EMPTY;
        for &(s, j) in &self.edges {
            if j == component {
                set.insert(s);
            }
        }
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        for &(_, j) in &self.edges {
            if j >= 4 {
                return Err(PerceptionError::UnknownComponent(j));
            }
        }
        for j in 0..4 {
            if self.neighbors(j)?.is_empty() {
                return Err(PerceptionError::UncoveredComponent(j));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("unknown soft-measurement component index {0}")]
    UnknownComponent(usize),
    #[error("component {0} has no incident sensor in the full graph")]
    UncoveredComponent(usize),
}

/// State-shaped soft measurement with availability mask and effective
/// per-component variance (the diagonal of R_S).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftMeasurement {
    pub y: Vector4<f64>,
    pub available: [bool; 4],
    pub variance: Vector4<f64>,
    /// Components produced by an unanchored integration fallback; their
    /// errors accumulate as a random walk rather than refreshing each step.
    #[serde(default)]
    pub drifting: [bool; 4],
}

impl SoftMeasurement {
    /// Seed value used before the first pipeline step: every component is
    /// available at its direct-source variance.
    pub fn seed(y: Vector4<f64>, noise: &NoiseConfig) -> Self {
        let ve = noise.r_encoder;
        let vc = noise.r_camera;
        let vi = noise.r_imu;
        let pos_var = 1.0 / (1.0 / ve[0] + 1.0 / vc[0]);
        Self {
            y,
            available: [true; 4],
            variance: Vector4::new(pos_var, ve[1], vc[1], vi[1]),
            drifting: [false; 4],
        }
    }

    pub fn none() -> Self {
        Self {
            y: Vector4::zeros(),
            available: [false; 4],
            variance: Vector4::from_element(f64::INFINITY),
            drifting: [false; 4],
        }
    }

    pub fn n_available(&self) -> usize {
        self.available.iter().filter(|a| **a).count()
    }
}

/// Minimum-variance combination of two unbiased estimates.
fn fuse(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (xa, va) = a;
    let (xb, vb) = b;
    let w = vb / (va + vb); // weight on a
    (w * xa + (1.0 - w) * xb, 1.0 / (1.0 / va + 1.0 / vb))
}

/// Runs the pipeline 𝒫_S on one raw measurement set.
///
/// `prev` is the previous step's soft measurement, consumed by the
/// integration and differencing fallbacks. Components with no source chain
/// come back unavailable.
pub fn soft_measurement(
    s: SensorSet,
    raw: &RawMeasurementSet,
    prev: &SoftMeasurement,
    noise: &NoiseConfig,
    dt: f64,
) -> SoftMeasurement {
    let mut y = Vector4::zeros();
    let mut var = Vector4::from_element(f64::INFINITY);
    let mut avail = [false; 4];
    let mut drifting = [false; 4];

    let has_e = s.contains(SensorId::Encoder);
    let has_c = s.contains(SensorId::Camera);
    let has_i = s.contains(SensorId::Imu);
    let ve = noise.r_encoder;
    let vc = noise.r_camera;
    let vi = noise.r_imu;

    // Position: encoder ⊕ camera.
    let enc_p = has_e.then(|| (raw.encoder[0], ve[0]));
    let cam_p = has_c.then(|| (raw.camera[0], vc[0]));
    match (enc_p, cam_p) {
        (Some(a), Some(b)) => {
            let (v, w) = fuse(a, b);
            y[POSITION] = v;
            var[POSITION] = w;
            avail[POSITION] = true;
        }
        (Some((v, w)), None) | (None, Some((v, w))) => {
            y[POSITION] = v;
            var[POSITION] = w;
            avail[POSITION] = true;
        }
        (None, None) => {}
    }

    // Angle: camera, else IMU integration from the previous soft angle.
    if has_c {
        y[ANGLE] = raw.camera[1];
        var[ANGLE] = vc[1];
        avail[ANGLE] = true;
    } else if has_i && prev.available[ANGLE] {
        y[ANGLE] = prev.y[ANGLE] + dt * raw.imu[1];
        var[ANGLE] = prev.variance[ANGLE] + dt * dt * vi[1];
        avail[ANGLE] = true;
        drifting[ANGLE] = true;
    }

    // Angular velocity: imu, else differenced camera angle.
    if has_i {
        y[ANGULAR_VELOCITY] = raw.imu[1];
        var[ANGULAR_VELOCITY] = vi[1];
        avail[ANGULAR_VELOCITY] = true;
    } else if has_c && prev.available[ANGLE] {
        y[ANGULAR_VELOCITY] = (raw.camera[1] - prev.y[ANGLE]) / dt;
        var[ANGULAR_VELOCITY] = (vc[1] + prev.variance[ANGLE]) / (dt * dt);
        avail[ANGULAR_VELOCITY] = true;
    }

    // Velocity: encoder ⊕ IMU integration, with a position-difference
    // fallback when both are out.
    let enc_v = has_e.then(|| (raw.encoder[1], ve[1]));
    let imu_v = (has_i && prev.available[VELOCITY]).then(|| {
        (
            prev.y[VELOCITY] + dt * raw.imu[0],
            prev.variance[VELOCITY] + dt * dt * vi[0],
        )
    });
    match (enc_v, imu_v) {
        (Some(a), Some(b)) => {
            let (v, w) = fuse(a, b);
            y[VELOCITY] = v;
            var[VELOCITY] = w;
            avail[VELOCITY] = true;
        }
        (Some((v, w)), None) => {
            y[VELOCITY] = v;
            var[VELOCITY] = w;
            avail[VELOCITY] = true;
        }
        (None, Some((v, w))) => {
            y[VELOCITY] = v;
            var[VELOCITY] = w;
            avail[VELOCITY] = true;
            drifting[VELOCITY] = true;
        }
        (None, None) => {
            if avail[POSITION] && prev.available[POSITION] {
                y[VELOCITY] = (y[POSITION] - prev.y[POSITION]) / dt;
                var[VELOCITY] = (var[POSITION] + prev.variance[POSITION]) / (dt * dt);
                avail[VELOCITY] = true;
            }
        }
    }

    SoftMeasurement {
        y,
        available: avail,
        variance: var,
        drifting,
    }
}

/// Static measurement model of 𝒫_S: which identity rows of C survive and the
/// steady per-component variances, assuming the previous soft measurement is
/// fully available. The per-step mask on [`SoftMeasurement`] is authoritative
/// during a run; this is the subset-level summary.
pub fn pipeline_model(s: SensorSet, noise: &NoiseConfig, dt: f64) -> SoftMeasurement {
    let raw = RawMeasurementSet {
        k: 0,
        encoder: [0.0; 2],
        camera: [0.0; 2],
        imu: [0.0; 2],
    };
    let prev = SoftMeasurement::seed(Vector4::zeros(), noise);
    soft_measurement(s, &raw, &prev, noise, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{PlantParams, PlantState};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_noise() -> NoiseConfig {
        NoiseConfig {
            r_encoder: [1e-300, 1e-300],
            r_camera: [1e-300, 1e-300],
            r_imu: [1e-300, 1e-300],
        }
    }

    fn raw_from_state(plant: &PlantParams, s: &PlantState, u: f64) -> RawMeasurementSet {
        let a = plant.continuous_dynamics(s, u)[1];
        RawMeasurementSet {
            k: 0,
            encoder: [s.p, s.v],
            camera: [s.p, s.theta],
            imu: [a, s.omega],
        }
    }

    #[test]
    fn neighbors_match_cart_pole_graph() {
        let g = PerceptionGraph::cart_pole();
        assert_eq!(
            g.neighbors(POSITION).unwrap(),
            SensorSet::from_slice(&[SensorId::Encoder, SensorId::Camera])
        );
        assert_eq!(
            g.neighbors(VELOCITY).unwrap(),
            SensorSet::from_slice(&[SensorId::Encoder, SensorId::Imu])
        );
        assert_eq!(
            g.neighbors(ANGLE).unwrap(),
            SensorSet::from_slice(&[SensorId::Camera])
        );
        assert_eq!(
            g.neighbors(ANGULAR_VELOCITY).unwrap(),
            SensorSet::from_slice(&[SensorId::Imu])
        );
        assert!(g.neighbors(4).is_err());
        g.validate().unwrap();
    }

    #[test]
    fn full_set_zero_noise_recovers_state_statically() {
        // With all sensors, zero noise and an equilibrium state the pipeline
        // returns the state exactly (C = I, ε = 0).
        let noise = zero_noise();
        let s = PlantState::new(0.4, 0.0, -0.2, 0.0);
        let raw = RawMeasurementSet {
            k: 0,
            encoder: [s.p, s.v],
            camera: [s.p, s.theta],
            imu: [0.0, s.omega],
        };
        let prev = SoftMeasurement::seed(s.to_vector(), &noise);
        let soft = soft_measurement(SensorSet::all(), &raw, &prev, &noise, 0.005);
        assert_eq!(soft.available, [true; 4]);
        assert_abs_diff_eq!((soft.y - s.to_vector()).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_noise_pipeline_tracks_truth_over_dynamic_step() {
        // One dynamic step. Direct components reproduce the state exactly;
        // IMU-integrated components carry the O(dt²) Euler defect of the
        // one-step integration, and differenced fallbacks divide it by dt.
        let plant = PlantParams::default();
        let noise = zero_noise();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s0 = PlantState::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-1.0..1.0),
            );
            let u = rng.gen_range(-10.0..10.0);
            let s1 = plant.step(&s0, u, None).unwrap();
            let prev = SoftMeasurement::seed(s0.to_vector(), &noise);
            let raw = raw_from_state(&plant, &s1, u);

            for set in [
                SensorSet::all(),
                SensorSet::all().without(SensorId::Encoder),
                SensorSet::all().without(SensorId::Camera),
                SensorSet::all().without(SensorId::Imu),
                SensorSet::from_slice(&[SensorId::Camera, SensorId::Imu]),
                SensorSet::from_slice(&[SensorId::Camera]),
            ] {
                let has_e = set.contains(SensorId::Encoder);
                let has_c = set.contains(SensorId::Camera);
                let has_i = set.contains(SensorId::Imu);
                // (direct, integrated, differenced) per component.
                let tol = |direct: bool, differenced: bool| {
                    if direct {
                        1e-9
                    } else if differenced {
                        0.1
                    } else {
                        1e-3
                    }
                };
                // With zero noise the encoder/integration fusion weighs both
                // branches, so velocity is only exact when the IMU is out.
                let tols = [
                    tol(true, false),                       // position: always direct
                    tol(has_e && !has_i, !has_e && !has_i), // velocity
                    tol(has_c, false),                      // angle
                    tol(has_i, !has_i),                     // angular velocity
                ];
                let soft = soft_measurement(set, &raw, &prev, &noise, plant.dt);
                for j in 0..4 {
                    if soft.available[j] {
                        let err = (soft.y[j] - s1.to_vector()[j]).abs();
                        assert!(err < tols[j], "set {set} comp {j} err {err}");
                    }
                }
            }
        }
    }

    #[test]
    fn camera_imu_subset_has_full_availability() {
        let noise = NoiseConfig::default();
        let model = pipeline_model(
            SensorSet::from_slice(&[SensorId::Camera, SensorId::Imu]),
            &noise,
            0.005,
        );
        assert_eq!(model.available, [true; 4]);
    }

    #[test]
    fn position_weight_and_fused_variance() {
        // σ²_E = 1e-4, σ²_C = 4e-4 ⇒ encoder weight 0.8, fused variance 0.8e-4.
        let noise = NoiseConfig::default();
        let raw = RawMeasurementSet {
            k: 0,
            encoder: [1.0, 0.0],
            camera: [0.0, 0.0],
            imu: [0.0, 0.0],
        };
        let prev = SoftMeasurement::seed(Vector4::zeros(), &noise);
        let soft = soft_measurement(SensorSet::all(), &raw, &prev, &noise, 0.005);
        assert_abs_diff_eq!(soft.y[POSITION], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(soft.variance[POSITION], 0.8e-4, epsilon = 1e-16);
    }

    #[test]
    fn encoder_only_drops_angle_rows() {
        let noise = NoiseConfig::default();
        let model = pipeline_model(SensorSet::from_slice(&[SensorId::Encoder]), &noise, 0.005);
        assert_eq!(model.available, [true, true, false, false]);
    }

    #[test]
    fn empty_subset_has_no_rows() {
        let noise = NoiseConfig::default();
        let model = pipeline_model(SensorSet::EMPTY, &noise, 0.005);
        assert_eq!(model.available, [false; 4]);
        assert_eq!(model.n_available(), 0);
    }

    #[test]
    fn fused_value_is_convex_combination_and_variance_shrinks() {
        let noise = NoiseConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let raw = RawMeasurementSet {
                k: 0,
                encoder: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                camera: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                imu: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
            };
            let prev_y = Vector4::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let prev = SoftMeasurement::seed(prev_y, &noise);
            let soft = soft_measurement(SensorSet::all(), &raw, &prev, &noise, 0.005);

            // Position between its two sources.
            let (lo, hi) = (
                raw.encoder[0].min(raw.camera[0]),
                raw.encoder[0].max(raw.camera[0]),
            );
            assert!(soft.y[POSITION] >= lo - 1e-12 && soft.y[POSITION] <= hi + 1e-12);
            assert!(soft.variance[POSITION] <= noise.r_encoder[0].min(noise.r_camera[0]) + 1e-18);

            // Velocity between encoder reading and integrated branch.
            let integ = prev.y[VELOCITY] + 0.005 * raw.imu[0];
            let (lo, hi) = (raw.encoder[1].min(integ), raw.encoder[1].max(integ));
            assert!(soft.y[VELOCITY] >= lo - 1e-12 && soft.y[VELOCITY] <= hi + 1e-12);
            let int_var = prev.variance[VELOCITY] + 0.005 * 0.005 * noise.r_imu[0];
            assert!(soft.variance[VELOCITY] <= noise.r_encoder[1].min(int_var) + 1e-18);
        }
    }

    #[test]
    fn graph_serializes_as_edge_list() {
        let g = PerceptionGraph::cart_pole();
        let json = serde_json::to_string(&g).unwrap();
        let back: PerceptionGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(g, back);
    }
}
