//! Raw sensor models, additive bias attacks and the stochastic attacker.
//!
//! Three sensors observe the cart-pole: a wheel encoder (cart position and
//! velocity), an external camera (cart position and pole angle) and an IMU
//! (cart acceleration and pole angular velocity). An attack adds a bias
//! vector to a sensor's raw output; the attacker never touches the control
//! input or the detection code.

use crate::plant::{PlantParams, PlantState};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sensor identity; iteration order is Encoder < Camera < Imu everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorId {
    Encoder,
    Camera,
    Imu,
}

impl SensorId {
    pub const ALL: [SensorId; 3] = [SensorId::Encoder, SensorId::Camera, SensorId::Imu];

    pub fn index(self) -> usize {
        match self {
            SensorId::Encoder => 0,
            SensorId::Camera => 1,
            SensorId::Imu => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<SensorId> {
        Self::ALL.get(i).copied()
    }
}

impl std::fmt::Display for SensorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SensorId::Encoder => write!(f, "encoder"),
            SensorId::Camera => write!(f, "camera"),
            SensorId::Imu => write!(f, "imu"),
        }
    }
}

/// Small set over the three sensors, bitmask-backed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorSet(u8);

impl SensorSet {
    pub const EMPTY: SensorSet = SensorSet(0);

    pub fn all() -> Self {
        SensorSet(0b111)
    }

    pub fn from_slice(sensors: &[SensorId]) -> Self {
        let mut s = SensorSet::EMPTY;
        for &id in sensors {
            s.insert(id);
        }
        s
    }

    pub fn contains(&self, id: SensorId) -> bool {
        self.0 & (1 << id.index()) != 0
    }

    pub fn insert(&mut self, id: SensorId) {
        self.0 |= 1 << id.index();
    }

    pub fn remove(&mut self, id: SensorId) {
        self.0 &= !(1 << id.index());
    }

    pub fn with(mut self, id: SensorId) -> Self {
        self.insert(id);
        self
    }

    pub fn without(mut self, id: SensorId) -> Self {
        self.remove(id);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = SensorId> + '_ {
        SensorId::ALL.into_iter().filter(|id| self.contains(*id))
    }

    pub fn mask(&self) -> [bool; 3] {
        [
            self.contains(SensorId::Encoder),
            self.contains(SensorId::Camera),
            self.contains(SensorId::Imu),
        ]
    }
}

impl std::fmt::Display for SensorSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<String> = self.iter().map(|s| s.to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Raw two-channel readings from each sensor at time index `k`.
///
/// encoder = (p, v), camera = (p, θ), imu = (v̇, ω).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMeasurementSet {
    pub k: usize,
    pub encoder: [f64; 2],
    pub camera: [f64; 2],
    pub imu: [f64; 2],
}

impl RawMeasurementSet {
    pub fn channels(&self, id: SensorId) -> [f64; 2] {
        match id {
            SensorId::Encoder => self.encoder,
            SensorId::Camera => self.camera,
            SensorId::Imu => self.imu,
        }
    }

    fn channels_mut(&mut self, id: SensorId) -> &mut [f64; 2] {
        match id {
            SensorId::Encoder => &mut self.encoder,
            SensorId::Camera => &mut self.camera,
            SensorId::Imu => &mut self.imu,
        }
    }
}

/// Per-sensor measurement-noise variances (diagonal R_i, one entry per
/// channel). The camera position is noisier than the encoder position so the
/// weighted fusion has something to do, the camera angle is vision-grade
/// coarse (σ ≈ 4°) so the gyro genuinely matters for balance, and the
/// accelerometer is consumer-grade so the encoder stays the primary velocity
/// anchor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub r_encoder: [f64; 2],
    pub r_camera: [f64; 2],
    pub r_imu: [f64; 2],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            r_encoder: [1e-4, 1e-4],
            r_camera: [4e-4, 5e-3],
            r_imu: [9e-2, 1e-4],
        }
    }
}

impl NoiseConfig {
    pub fn variances(&self, id: SensorId) -> [f64; 2] {
        match id {
            SensorId::Encoder => self.r_encoder,
            SensorId::Camera => self.r_camera,
            SensorId::Imu => self.r_imu,
        }
    }
}

/// Samples every sensor at the true state. The IMU acceleration channel is
/// evaluated from the continuous dynamics at the actually applied force,
/// before any attack is injected.
pub fn measure_all<R: Rng>(
    plant: &PlantParams,
    state: &PlantState,
    u_applied: f64,
    noise: &NoiseConfig,
    k: usize,
    rng: &mut R,
) -> RawMeasurementSet {
    let accel = plant.continuous_dynamics(state, u_applied)[1];
    let mut draw = |var: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * var.sqrt()
    };
    RawMeasurementSet {
        k,
        encoder: [
            state.p + draw(noise.r_encoder[0]),
            state.v + draw(noise.r_encoder[1]),
        ],
        camera: [
            state.p + draw(noise.r_camera[0]),
            state.theta + draw(noise.r_camera[1]),
        ],
        imu: [
            accel + draw(noise.r_imu[0]),
            state.omega + draw(noise.r_imu[1]),
        ],
    }
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack window for {sensor} has start {start} >= end {end}")]
    BadWindow {
        sensor: SensorId,
        start: f64,
        end: f64,
    },
}

/// One additive-bias window: `bias` is added to both channels of `sensor`
/// while `start_s <= t < end_s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackWindow {
    pub sensor: SensorId,
    pub start_s: f64,
    pub end_s: f64,
    pub bias: [f64; 2],
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AttackSchedule {
    pub windows: Vec<AttackWindow>,
}

impl AttackSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        for w in &self.windows {
            if !(w.start_s < w.end_s) {
                return Err(AttackError::BadWindow {
                    sensor: w.sensor,
                    start: w.start_s,
                    end: w.end_s,
                });
            }
        }
        Ok(())
    }

    /// Applies every active window at time `t = k·dt`; returns the attacked
    /// measurements and the ground-truth attack indicator per sensor.
    pub fn apply(
        &self,
        raw: &RawMeasurementSet,
        k: usize,
        dt: f64,
    ) -> (RawMeasurementSet, [bool; 3]) {
        let t = k as f64 * dt;
        let mut out = *raw;
        let mut z_true = [false; 3];
        for w in &self.windows {
            if t >= w.start_s && t < w.end_s {
                let ch = out.channels_mut(w.sensor);
                ch[0] += w.bias[0];
                ch[1] += w.bias[1];
                z_true[w.sensor.index()] = true;
            }
        }
        (out, z_true)
    }

    pub fn any_active(&self, k: usize, dt: f64) -> bool {
        let t = k as f64 * dt;
        self.windows.iter().any(|w| t >= w.start_s && t < w.end_s)
    }
}

/// Bias magnitudes used by the named scenarios: encoder +(0.5, 0.5) on (p, v),
/// IMU +(0.2, 0.9) on (v̇, ω), camera +(0.3, 0.15) on (p, θ).
pub const ENCODER_BIAS: [f64; 2] = [0.5, 0.5];
pub const IMU_BIAS: [f64; 2] = [0.2, 0.9];
pub const CAMERA_BIAS: [f64; 2] = [0.3, 0.15];

/// Built-in attack scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Scenario {
    NoAttack,
    /// Encoder bias starting at t = 3.0 s for `duration_s` seconds.
    EncoderAttack {
        duration_s: f64,
    },
    /// Encoder attacked in [3, 6] s, IMU in [4, 7] s (2 s overlap).
    EncoderImuAttack,
    /// Encoder [3, 4] s, IMU [4, 6] s, camera [6, 7] s.
    EicAttack,
}

impl Scenario {
    pub fn schedule(&self) -> AttackSchedule {
        let enc = |start: f64, end: f64| AttackWindow {
            sensor: SensorId::Encoder,
            start_s: start,
            end_s: end,
            bias: ENCODER_BIAS,
        };
        let imu = |start: f64, end: f64| AttackWindow {
            sensor: SensorId::Imu,
            start_s: start,
            end_s: end,
            bias: IMU_BIAS,
        };
        let cam = |start: f64, end: f64| AttackWindow {
            sensor: SensorId::Camera,
            start_s: start,
            end_s: end,
            bias: CAMERA_BIAS,
        };
        match self {
            Scenario::NoAttack => AttackSchedule::empty(),
            Scenario::EncoderAttack { duration_s } => AttackSchedule {
                windows: vec![enc(3.0, 3.0 + duration_s)],
            },
            Scenario::EncoderImuAttack => AttackSchedule {
                windows: vec![enc(3.0, 6.0), imu(4.0, 7.0)],
            },
            Scenario::EicAttack => AttackSchedule {
                windows: vec![enc(3.0, 4.0), imu(4.0, 6.0), cam(6.0, 7.0)],
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Scenario::NoAttack => "no-attack".to_string(),
            Scenario::EncoderAttack { duration_s } => format!("encoder-attack-{duration_s}"),
            Scenario::EncoderImuAttack => "encoder-imu-attack".to_string(),
            Scenario::EicAttack => "eic-attack".to_string(),
        }
    }
}

/// Independent per-sensor on/off Markov attacker with fixed bias magnitudes;
/// used when tuning the probing thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StochasticAttacker {
    /// P(off → on).
    pub p_on: f64,
    /// P(on → on).
    pub p_stay: f64,
    pub biases: [[f64; 2]; 3],
    #[serde(default)]
    pub states: [bool; 3],
}

impl Default for StochasticAttacker {
    fn default() -> Self {
        Self {
            p_on: 0.01,
            p_stay: 0.99,
            biases: [ENCODER_BIAS, CAMERA_BIAS, IMU_BIAS],
            states: [false; 3],
        }
    }
}

impl StochasticAttacker {
    pub fn validate(&self) -> Result<(), String> {
        for p in [self.p_on, self.p_stay] {
            if !(p > 0.0 && p < 1.0) {
                return Err(format!("attacker probabilities must lie in (0,1), got {p}"));
            }
        }
        Ok(())
    }

    /// Advances each sensor's chain one step and injects the active biases.
    pub fn step<R: Rng>(
        &mut self,
        raw: &RawMeasurementSet,
        rng: &mut R,
    ) -> (RawMeasurementSet, [bool; 3]) {
        let mut out = *raw;
        let mut z = [false; 3];
        for (i, id) in SensorId::ALL.into_iter().enumerate() {
            let roll: f64 = rng.gen();
            let p1 = if self.states[i] {
                self.p_stay
            } else {
                self.p_on
            };
            self.states[i] = roll < p1;
            if self.states[i] {
                let ch = out.channels_mut(id);
                ch[0] += self.biases[i][0];
                ch[1] += self.biases[i][1];
                z[i] = true;
            }
        }
        (out, z)
    }
}
