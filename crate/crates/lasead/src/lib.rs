//! Learning-augmented state estimation for sensor attack detection (LASE-AD).
//!
//! A cart-pole is balanced by an LQR acting on an EKF that fuses a wheel
//! encoder, a camera and an IMU through a perception pipeline. A CUSUM
//! detector watches the filter innovations; its alerts feed a Bayesian
//! network over the perception graph that maintains per-sensor attack
//! beliefs. Mid-range beliefs trigger an active probing input that maximizes
//! the KL divergence between innovation distributions under with/without
//! sensor hypotheses (reconstructed from a replay buffer), and high beliefs
//! selectively disable sensors, with hysteresis and counterfactual
//! re-estimation. A simplified two-sensor POMDP justifies the threshold
//! shape of the probing policy; the harness reproduces the benign, single-
//! and multi-sensor attack experiments against outlier-robust and
//! prediction-based baselines.

pub mod belief;
pub mod control;
pub mod detection;
pub mod estimation;
pub mod harness;
pub mod perception;
pub mod plant;
pub mod pomdp;
pub mod probing;
pub mod sensors;

pub use belief::{Belief, BnModel};
pub use control::{Method, RunOutput, RunSetup, ThresholdPolicy};
pub use detection::{CalibrationArtifact, CusumParams, DetectorCharacterization};
pub use estimation::{EkfEstimate, ReplayBuffer};
pub use harness::{run_batch, BatchResult, ScenarioConfig, ScenarioSpec, SummaryReport};
pub use perception::{PerceptionGraph, SoftMeasurement};
pub use plant::{PlantParams, PlantState};
pub use probing::SafeSet;
pub use sensors::{AttackSchedule, NoiseConfig, Scenario, SensorId, SensorSet};
