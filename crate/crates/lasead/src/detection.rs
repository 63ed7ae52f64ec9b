//! Per-component CUSUM anomaly detection over standardized innovations.
//!
//! The statistic per soft-measurement component j:
//!
//! ```text
//! S_j ← max(0, S_j + |r_j|/σ_j − b_j),   alert when S_j > τ_j, reset on alert
//! ```
//!
//! Reset-on-alert makes consecutive alerts rare on benign data, which is why
//! the alert process is modeled as a two-state Markov chain (η₀ ≠ η₁).
//! Drifts and thresholds are calibrated on benign runs against a 5% per-step
//! false-positive budget; the alert-transition rates η are then estimated
//! empirically on held-out benign alert sequences.

use crate::estimation::Innovation;
use serde::{Deserialize, Serialize};

/// Calibrated CUSUM parameters per soft-measurement component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CusumParams {
    pub tau: [f64; 4],
    pub drift: [f64; 4],
}

impl Default for CusumParams {
    fn default() -> Self {
        // Safe uncalibrated defaults; real runs load a calibration artifact.
        Self {
            tau: [5.0; 4],
            drift: [1.2; 4],
        }
    }
}

/// Running detector state.
#[derive(Debug, Clone, Default)]
pub struct CusumState {
    pub s: [f64; 4],
    pub last_alert: [bool; 4],
}

impl CusumState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one innovation; returns the per-component alert vector.
    /// Unavailable components are forced to no-alert with frozen statistic.
    pub fn update(&mut self, params: &CusumParams, innov: &Innovation) -> [bool; 4] {
        let mut alerts = [false; 4];
        for j in 0..4 {
            if !innov.available[j] || innov.sigma[j] <= 0.0 {
                self.last_alert[j] = false;
                continue;
            }
            let score = innov.r[j].abs() / innov.sigma[j];
            self.s[j] = (self.s[j] + score - params.drift[j]).max(0.0);
            if self.s[j] > params.tau[j] {
                alerts[j] = true;
                self.s[j] = 0.0;
            }
            self.last_alert[j] = alerts[j];
        }
        alerts
    }
}

/// Detector model parameters feeding the Bayesian network: false-alarm
/// transition rates η and the Beta prior over missed-detection rates ξ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCharacterization {
    /// P(alert | no attack, previous alert = 0), per component.
    pub eta0: [f64; 4],
    /// P(alert | no attack, previous alert = 1), per component.
    pub eta1: [f64; 4],
    /// Beta(β¹, β²) prior on the missed-detection rate, shared by both
    /// previous-alert branches.
    pub beta_miss: (f64, f64),
}

impl Default for DetectorCharacterization {
    fn default() -> Self {
        Self {
            eta0: [0.03; 4],
            eta1: [0.03; 4],
            beta_miss: (3.0, 7.0),
        }
    }
}

impl DetectorCharacterization {
    /// Mean missed-detection rate E[ξ].
    pub fn miss_mean(&self) -> f64 {
        self.beta_miss.0 / (self.beta_miss.0 + self.beta_miss.1)
    }
}

/// Calibration artifact persisted as JSON and consumed by the belief and
/// control modules. Serialized per component:
/// `{"components": {"position": {"tau": ..., "b": ..., "eta0": ..., "eta1": ...}, ...}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationArtifact {
    pub cusum: CusumParams,
    pub detector: DetectorCharacterization,
    /// True when the 5% budget could not be met and the maximum grid
    /// threshold was returned instead.
    pub budget_infeasible: bool,
}

#[derive(Serialize, Deserialize)]
struct ComponentCalibration {
    tau: f64,
    b: f64,
    eta0: f64,
    eta1: f64,
}

#[derive(Serialize, Deserialize)]
struct ArtifactRepr {
    components: std::collections::BTreeMap<String, ComponentCalibration>,
    beta_miss: (f64, f64),
    #[serde(default)]
    budget_infeasible: bool,
}

const COMPONENT_KEYS: [&str; 4] = ["position", "velocity", "angle", "angular_velocity"];

impl Serialize for CalibrationArtifact {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut components = std::collections::BTreeMap::new();
        for (j, key) in COMPONENT_KEYS.iter().enumerate() {
            components.insert(
                key.to_string(),
                ComponentCalibration {
                    tau: self.cusum.tau[j],
                    b: self.cusum.drift[j],
                    eta0: self.detector.eta0[j],
                    eta1: self.detector.eta1[j],
                },
            );
        }
        ArtifactRepr {
            components,
            beta_miss: self.detector.beta_miss,
            budget_infeasible: self.budget_infeasible,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CalibrationArtifact {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = ArtifactRepr::deserialize(deserializer)?;
        let mut cusum = CusumParams::default();
        let mut detector = DetectorCharacterization {
            beta_miss: repr.beta_miss,
            ..Default::default()
        };
        for (j, key) in COMPONENT_KEYS.iter().enumerate() {
            let c = repr
                .components
                .get(*key)
                .ok_or_else(|| serde::de::Error::custom(format!("missing component '{key}'")))?;
            cusum.tau[j] = c.tau;
            cusum.drift[j] = c.b;
            detector.eta0[j] = c.eta0;
            detector.eta1[j] = c.eta1;
        }
        Ok(CalibrationArtifact {
            cusum,
            detector,
            budget_infeasible: repr.budget_infeasible,
        })
    }
}

/// Per-step standardized scores |r_j|/σ_j of one run; `None` marks an
/// unavailable component.
pub type ScoreTrace = Vec<[Option<f64>; 4]>;

/// Threshold grid searched during calibration, smallest first.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=120).map(|i| i as f64 * 0.25).collect()
}

/// Calibrates drifts on `train` and picks, per component, the smallest grid
/// threshold whose per-step alert rate on `holdout` stays under `budget`.
pub fn calibrate(
    train: &[ScoreTrace],
    holdout: &[ScoreTrace],
    budget: f64,
    grid: &[f64],
) -> (CusumParams, bool) {
    // Drift = mean + 0.5 std of the benign standardized innovation.
    let mut drift = [0.0f64; 4];
    for j in 0..4 {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for run in train {
            for step in run {
                if let Some(v) = step[j] {
                    n += 1;
                    sum += v;
                    sumsq += v * v;
                }
            }
        }
        if n > 0 {
            let mean = sum / n as f64;
            let var = (sumsq / n as f64 - mean * mean).max(0.0);
            drift[j] = mean + 0.5 * var.sqrt();
        } else {
            drift[j] = 1.0;
        }
    }

    let mut tau = [0.0f64; 4];
    let mut infeasible = false;
    for j in 0..4 {
        let mut chosen = None;
        for &t in grid {
            let mut alerts = 0usize;
            let mut steps = 0usize;
            for run in holdout {
                let mut s = 0.0f64;
                for step in run {
                    let Some(score) = step[j] else { continue };
                    steps += 1;
                    s = (s + score - drift[j]).max(0.0);
                    if s > t {
                        alerts += 1;
                        s = 0.0;
                    }
                }
            }
            if steps == 0 || (alerts as f64) < budget * steps as f64 {
                chosen = Some(t);
                break;
            }
        }
        match chosen {
            Some(t) => tau[j] = t,
            None => {
                tau[j] = *grid.last().expect("threshold grid must be nonempty");
                infeasible = true;
            }
        }
    }

    (CusumParams { tau, drift }, infeasible)
}

/// Empirical alert-transition rates with add-one smoothing. Sequences start
/// from an implicit previous alert of 0.
pub fn estimate_eta(sequences: &[Vec<[bool; 4]>]) -> ([f64; 4], [f64; 4]) {
    let mut eta0 = [0.0f64; 4];
    let mut eta1 = [0.0f64; 4];
    for j in 0..4 {
        let (mut n01, mut n0, mut n11, mut n1) = (0u64, 0u64, 0u64, 0u64);
        for seq in sequences {
            let mut prev = false;
            for a in seq {
                if prev {
                    n1 += 1;
                    if a[j] {
                        n11 += 1;
                    }
                } else {
                    n0 += 1;
                    if a[j] {
                        n01 += 1;
                    }
                }
                prev = a[j];
            }
        }
        eta0[j] = (n01 + 1) as f64 / (n0 + 2) as f64;
        eta1[j] = (n11 + 1) as f64 / (n1 + 2) as f64;
    }
    (eta0, eta1)
}
