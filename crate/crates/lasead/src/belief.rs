//! Bayesian inference of per-sensor attack probabilities.
//!
//! The latent per-sensor attack bits z propagate deterministically to
//! per-component compromise bits through the perception graph,
//! s_j = max_{i ∈ N(j)} z_i, and each component emits an alert through the
//! two-state detector model. With an independent prior
//! P(z) = Π π_i^{z_i}(1-π_i)^{1-z_i}, the exact posterior over each z_i is a
//! sum over the 2³ joint configurations:
//!
//! ```text
//! P(a | z, a') = Π_j  { η-branch            s_j = 0   (false alarms)
//!                     { E[ξ]-branch         s_j = 1   (missed detections)
//! ```
//!
//! The missed-detection rate carries a Beta prior; each factor is linear in
//! ξ so marginalization is just the Beta mean. Probing adds a second,
//! likelihood-ratio update that compares how well the with-sensor and
//! without-sensor pipelines explain the realized soft measurement.

use crate::detection::DetectorCharacterization;
use crate::perception::PerceptionGraph;
use crate::sensors::SensorId;
use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

/// Lower clamp on every attack probability; keeps beliefs responsive so a
/// sensor can be exonerated after an attack ends.
pub const BELIEF_CLAMP: f64 = 1e-3;

/// Per-sensor attack probabilities, ordered Encoder, Camera, Imu.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub pi: [f64; 3],
}

impl Belief {
    pub fn uniform(p: f64) -> Self {
        Self { pi: [p; 3] }.clamped()
    }

    pub fn get(&self, id: SensorId) -> f64 {
        self.pi[id.index()]
    }

    pub fn clamped(mut self) -> Self {
        for p in &mut self.pi {
            *p = p.clamp(BELIEF_CLAMP, 1.0 - BELIEF_CLAMP);
        }
        self
    }
}

/// Bayesian-network model: the perception graph plus the detector
/// characterization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnModel {
    pub graph: PerceptionGraph,
    pub detector: DetectorCharacterization,
}

impl BnModel {
    pub fn new(graph: PerceptionGraph, detector: DetectorCharacterization) -> Self {
        Self { graph, detector }
    }
}

/// Max-propagation of sensor attack bits to component compromise bits.
pub fn propagate(graph: &PerceptionGraph, z: [bool; 3]) -> [bool; 4] {
    let mut s = [false; 4];
    for &(sensor, j) in &graph.edges {
        if z[sensor.index()] {
            s[j] = true;
        }
    }
    s
}

/// P(a | z, a') over the components selected by `mask`.
pub fn alert_likelihood_masked(
    model: &BnModel,
    z: [bool; 3],
    a: [bool; 4],
    a_prev: [bool; 4],
    mask: [bool; 4],
) -> f64 {
    let s = propagate(&model.graph, z);
    let miss = model.detector.miss_mean();
    let mut prob = 1.0;
    for j in 0..4 {
        if !mask[j] {
            continue;
        }
        let factor = if s[j] {
            // Compromised component: alert with probability 1 − E[ξ].
            if a[j] {
                1.0 - miss
            } else {
                miss
            }
        } else {
            let eta = if a_prev[j] {
                model.detector.eta1[j]
            } else {
                model.detector.eta0[j]
            };
            if a[j] {
                eta
            } else {
                1.0 - eta
            }
        };
        prob *= factor;
    }
    prob
}

/// P(a | z, a') over all four components.
pub fn alert_likelihood(model: &BnModel, z: [bool; 3], a: [bool; 4], a_prev: [bool; 4]) -> f64 {
    alert_likelihood_masked(model, z, a, a_prev, [true; 4])
}

/// Exact posterior P(z_i = 1 | a, a') for every sensor by enumerating the
/// 2³ joint attack configurations; the result becomes the next prior.
pub fn alert_posterior_masked(
    belief: &Belief,
    model: &BnModel,
    a: [bool; 4],
    a_prev: [bool; 4],
    mask: [bool; 4],
) -> Belief {
    let mut marg1 = [0.0f64; 3];
    let mut total = 0.0f64;
    for bits in 0..8u8 {
        let z = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
        let mut weight = alert_likelihood_masked(model, z, a, a_prev, mask);
        for i in 0..3 {
            weight *= if z[i] {
                belief.pi[i]
            } else {
                1.0 - belief.pi[i]
            };
        }
        total += weight;
        for i in 0..3 {
            if z[i] {
                marg1[i] += weight;
            }
        }
    }
    if total <= 0.0 || !total.is_finite() {
        return *belief;
    }
    Belief {
        pi: [marg1[0] / total, marg1[1] / total, marg1[2] / total],
    }
    .clamped()
}

pub fn alert_posterior(
    belief: &Belief,
    model: &BnModel,
    a: [bool; 4],
    a_prev: [bool; 4],
) -> Belief {
    alert_posterior_masked(belief, model, a, a_prev, [true; 4])
}

/// Gaussian predictive distribution of the soft measurement under one
/// pipeline hypothesis.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHypothesis {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

/// Log-density of the masked components of `y` under the hypothesis.
fn masked_log_pdf(y: &Vector4<f64>, h: &GaussianHypothesis, mask: [bool; 4]) -> Option<f64> {
    let idx: Vec<usize> = (0..4).filter(|&j| mask[j]).collect();
    if idx.is_empty() {
        return None;
    }
    let n = idx.len();
    let mut cov = DMatrix::zeros(n, n);
    let mut diff = DVector::zeros(n);
    for (r, &jr) in idx.iter().enumerate() {
        diff[r] = y[jr] - h.mean[jr];
        for (c, &jc) in idx.iter().enumerate() {
            cov[(r, c)] = h.cov[(jr, jc)];
        }
    }
    if !cov.iter().all(|v| v.is_finite()) || !diff.iter().all(|v| v.is_finite()) {
        return None;
    }
    let chol = cov.cholesky()?;
    let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let solved = chol.solve(&diff);
    let maha = diff.dot(&solved);
    Some(-0.5 * (maha + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Likelihood-ratio belief update after a probing step.
///
/// `h0` is the predictive distribution of the pipeline that includes the
/// probed sensor, `h1` the one without it. A measurement explained better by
/// the with-sensor prediction exonerates the sensor; one explained better by
/// the without-sensor counterfactual indicts it:
///
/// ```text
/// odds(z_i = 1) ← odds(z_i = 1) · N(y; μ₁, Σ₁) / N(y; μ₀, Σ₀)
/// ```
///
/// Degenerate covariances skip the update and raise the flag.
pub fn probing_posterior(
    belief: &Belief,
    sensor: SensorId,
    y: &Vector4<f64>,
    h0: &GaussianHypothesis,
    h1: &GaussianHypothesis,
    mask: [bool; 4],
) -> (Belief, bool) {
    let (Some(log_n0), Some(log_n1)) = (masked_log_pdf(y, h0, mask), masked_log_pdf(y, h1, mask))
    else {
        return (*belief, false);
    };
    let pi = belief.pi[sensor.index()];
    // π' = 1 / (1 + ((1−π)/π) · N₀/N₁), computed in log space.
    let log_prior_odds_against = ((1.0 - pi) / pi).ln();
    let posterior = 1.0 / (1.0 + (log_prior_odds_against + log_n0 - log_n1).exp());
    let mut out = *belief;
    out.pi[sensor.index()] = posterior;
    (out.clamped(), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::PerceptionGraph;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_model(eta: f64) -> BnModel {
        BnModel::new(
            PerceptionGraph::cart_pole(),
            DetectorCharacterization {
                eta0: [eta; 4],
                eta1: [eta; 4],
                beta_miss: (3.0, 7.0),
            },
        )
    }

    #[test]
    fn all_quiet_likelihood_is_eta_product() {
        let model = uniform_model(0.05);
        let p = alert_likelihood(&model, [false; 3], [false; 4], [false; 4]);
        assert_abs_diff_eq!(p, 0.95f64.powi(4), epsilon = 1e-14);
    }

    #[test]
    fn encoder_attack_propagates_to_position_and_velocity() {
        let model = uniform_model(0.05);
        let s = propagate(&model.graph, [true, false, false]);
        assert_eq!(s, [true, true, false, false]);
    }

    #[test]
    fn beta_marginal_alert_factor() {
        // s_j = 1, a_j = 1 under Beta(3,7): ∫(1−ξ)Beta = 1 − 3/10 = 0.7.
        let model = uniform_model(0.05);
        // Attack all sensors so every component is compromised, all alerts on.
        let p = alert_likelihood(&model, [true; 3], [true; 4], [false; 4]);
        assert_abs_diff_eq!(p, 0.7f64.powi(4), epsilon = 1e-14);
    }

    /// Independent oracle: enumerate the full (z, s, a) joint with the
    /// indicator on s instead of computing s directly.
    fn posterior_oracle(
        belief: &Belief,
        model: &BnModel,
        a: [bool; 4],
        a_prev: [bool; 4],
    ) -> [f64; 3] {
        let miss = model.detector.miss_mean();
        let mut marg = [0.0f64; 3];
        let mut total = 0.0;
        for zbits in 0..8u8 {
            let z = [zbits & 1 != 0, zbits & 2 != 0, zbits & 4 != 0];
            let prior: f64 = (0..3)
                .map(|i| {
                    if z[i] {
                        belief.pi[i]
                    } else {
                        1.0 - belief.pi[i]
                    }
                })
                .product();
            for sbits in 0..16u8 {
                let s = [
                    sbits & 1 != 0,
                    sbits & 2 != 0,
                    sbits & 4 != 0,
                    sbits & 8 != 0,
                ];
                // Indicator 1[s_j = max_{i∈N(j)} z_i].
                let mut consistent = true;
                for j in 0..4 {
                    let mut expected = false;
                    for &(sensor, comp) in &model.graph.edges {
                        if comp == j && z[sensor.index()] {
                            expected = true;
                        }
                    }
                    if s[j] != expected {
                        consistent = false;
                        break;
                    }
                }
                if !consistent {
                    continue;
                }
                let mut like = prior;
                for j in 0..4 {
                    like *= if s[j] {
                        if a[j] {
                            1.0 - miss
                        } else {
                            miss
                        }
                    } else {
                        let eta = if a_prev[j] {
                            model.detector.eta1[j]
                        } else {
                            model.detector.eta0[j]
                        };
                        if a[j] {
                            eta
                        } else {
                            1.0 - eta
                        }
                    };
                }
                total += like;
                for i in 0..3 {
                    if z[i] {
                        marg[i] += like;
                    }
                }
            }
        }
        [marg[0] / total, marg[1] / total, marg[2] / total]
    }

    #[test]
    fn posterior_matches_joint_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let model = BnModel::new(
                PerceptionGraph::cart_pole(),
                DetectorCharacterization {
                    eta0: std::array::from_fn(|_| rng.gen_range(0.01..0.3)),
                    eta1: std::array::from_fn(|_| rng.gen_range(0.01..0.3)),
                    beta_miss: (rng.gen_range(1.0..6.0), rng.gen_range(1.0..9.0)),
                },
            );
            let belief = Belief {
                pi: std::array::from_fn(|_| rng.gen_range(0.01..0.99)),
            };
            let a = std::array::from_fn(|_| rng.gen_bool(0.5));
            let a_prev = std::array::from_fn(|_| rng.gen_bool(0.5));
            let got = alert_posterior(&belief, &model, a, a_prev);
            let want = posterior_oracle(&belief, &model, a, a_prev);
            for i in 0..3 {
                let clamped = want[i].clamp(BELIEF_CLAMP, 1.0 - BELIEF_CLAMP);
                assert!(
                    (got.pi[i] - clamped).abs() < 1e-12,
                    "sensor {i}: got {} want {}",
                    got.pi[i],
                    clamped
                );
            }
        }
    }

    #[test]
    fn quiet_alerts_cannot_raise_minimal_belief() {
        let model = uniform_model(0.05);
        let belief = Belief::uniform(BELIEF_CLAMP);
        let post = alert_posterior(&belief, &model, [false; 4], [false; 4]);
        for i in 0..3 {
            assert!(post.pi[i] <= belief.pi[i] + 1e-15);
        }
    }

    #[test]
    fn position_velocity_alerts_implicate_encoder_most() {
        // The encoder is the only sensor covering both alerted components.
        // Camera and IMU play symmetric roles under uniform parameters (the
        // graph automorphism swapping camera↔imu, position↔velocity,
        // angle↔angular-velocity fixes the encoder), so their posteriors tie.
        let model = uniform_model(0.05);
        let belief = Belief { pi: [0.1; 3] };
        let post = alert_posterior(&belief, &model, [true, true, false, false], [false; 4]);
        let enc = post.get(SensorId::Encoder);
        let cam = post.get(SensorId::Camera);
        let imu = post.get(SensorId::Imu);
        assert!(enc > cam && enc > imu);
        assert_abs_diff_eq!(cam, imu, epsilon = 1e-12);
    }

    #[test]
    fn fully_connected_symmetric_model_gives_equal_posteriors() {
        let mut edges = Vec::new();
        for s in SensorId::ALL {
            for j in 0..4 {
                edges.push((s, j));
            }
        }
        let model = BnModel::new(
            PerceptionGraph { edges },
            DetectorCharacterization {
                eta0: [0.05; 4],
                eta1: [0.05; 4],
                beta_miss: (3.0, 7.0),
            },
        );
        let belief = Belief { pi: [0.2; 3] };
        let post = alert_posterior(&belief, &model, [true; 4], [false; 4]);
        assert_abs_diff_eq!(post.pi[0], post.pi[1], epsilon = 1e-14);
        assert_abs_diff_eq!(post.pi[1], post.pi[2], epsilon = 1e-14);
    }

    #[test]
    fn posterior_monotone_in_prior() {
        let model = uniform_model(0.07);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..300 {
            let a = std::array::from_fn(|_| rng.gen_bool(0.5));
            let a_prev = std::array::from_fn(|_| rng.gen_bool(0.3));
            let lo = rng.gen_range(0.05..0.5);
            let hi = lo + rng.gen_range(0.01..0.4);
            let others = [rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9)];
            let b_lo = Belief {
                pi: [lo, others[0], others[1]],
            };
            let b_hi = Belief {
                pi: [hi, others[0], others[1]],
            };
            let p_lo = alert_posterior(&b_lo, &model, a, a_prev);
            let p_hi = alert_posterior(&b_hi, &model, a, a_prev);
            assert!(p_hi.pi[0] >= p_lo.pi[0] - 1e-12);
        }
    }

    #[test]
    fn inference_commutes_with_sensor_relabeling() {
        // Swap encoder and camera labels everywhere; posteriors must swap too.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let base = BnModel::new(
            PerceptionGraph::cart_pole(),
            DetectorCharacterization {
                eta0: std::array::from_fn(|_| rng.gen_range(0.01..0.2)),
                eta1: std::array::from_fn(|_| rng.gen_range(0.01..0.2)),
                beta_miss: (3.0, 7.0),
            },
        );
        let swap = |id: SensorId| match id {
            SensorId::Encoder => SensorId::Camera,
            SensorId::Camera => SensorId::Encoder,
            SensorId::Imu => SensorId::Imu,
        };
        let permuted = BnModel::new(
            PerceptionGraph {
                edges: base
                    .graph
                    .edges
                    .iter()
                    .map(|&(s, j)| (swap(s), j))
                    .collect(),
            },
            base.detector.clone(),
        );
        for _ in 0..100 {
            let a = std::array::from_fn(|_| rng.gen_bool(0.5));
            let a_prev = std::array::from_fn(|_| rng.gen_bool(0.5));
            let pi = [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ];
            let post = alert_posterior(&Belief { pi }, &base, a, a_prev);
            let post_swapped = alert_posterior(
                &Belief {
                    pi: [pi[1], pi[0], pi[2]],
                },
                &permuted,
                a,
                a_prev,
            );
            assert_abs_diff_eq!(post.pi[0], post_swapped.pi[1], epsilon = 1e-12);
            assert_abs_diff_eq!(post.pi[1], post_swapped.pi[0], epsilon = 1e-12);
            assert_abs_diff_eq!(post.pi[2], post_swapped.pi[2], epsilon = 1e-12);
        }
    }

    #[test]
    fn probing_with_identical_hypotheses_is_neutral() {
        let h = GaussianHypothesis {
            mean: Vector4::new(0.1, 0.2, 0.3, 0.4),
            cov: Matrix4::identity() * 1e-2,
        };
        let belief = Belief {
            pi: [0.4, 0.2, 0.2],
        };
        let (post, updated) = probing_posterior(
            &belief,
            SensorId::Encoder,
            &Vector4::new(0.15, 0.2, 0.31, 0.38),
            &h,
            &h,
            [true; 4],
        );
        assert!(updated);
        assert_abs_diff_eq!(post.pi[0], belief.pi[0], epsilon = 1e-12);
    }

    #[test]
    fn measurement_at_counterfactual_raises_belief() {
        // y sits exactly at the without-sensor prediction, 5σ from the
        // nominal one: the Gaussian ratio exp(12.5) swamps the prior odds.
        let sigma = 0.1;
        let h0 = GaussianHypothesis {
            mean: Vector4::new(5.0 * sigma, 0.0, 0.0, 0.0),
            cov: Matrix4::identity() * sigma * sigma,
        };
        let h1 = GaussianHypothesis {
            mean: Vector4::zeros(),
            cov: Matrix4::identity() * sigma * sigma,
        };
        let belief = Belief {
            pi: [0.01, 0.5, 0.5],
        };
        let (post, _) = probing_posterior(
            &belief,
            SensorId::Encoder,
            &Vector4::zeros(),
            &h0,
            &h1,
            [true; 4],
        );
        assert!(post.pi[0] > 0.9, "posterior {}", post.pi[0]);
    }

    #[test]
    fn measurement_at_nominal_lowers_belief() {
        let sigma = 0.1;
        let h0 = GaussianHypothesis {
            mean: Vector4::zeros(),
            cov: Matrix4::identity() * sigma * sigma,
        };
        let h1 = GaussianHypothesis {
            mean: Vector4::new(5.0 * sigma, 0.0, 0.0, 0.0),
            cov: Matrix4::identity() * sigma * sigma,
        };
        let belief = Belief {
            pi: [0.6, 0.5, 0.5],
        };
        let (post, _) = probing_posterior(
            &belief,
            SensorId::Encoder,
            &Vector4::zeros(),
            &h0,
            &h1,
            [true; 4],
        );
        assert!(post.pi[0] < belief.pi[0]);
    }

    #[test]
    fn degenerate_covariance_skips_update() {
        let h0 = GaussianHypothesis {
            mean: Vector4::zeros(),
            cov: Matrix4::zeros(), // not PD
        };
        let h1 = GaussianHypothesis {
            mean: Vector4::zeros(),
            cov: Matrix4::identity(),
        };
        let belief = Belief { pi: [0.4; 3] };
        let (post, updated) = probing_posterior(
            &belief,
            SensorId::Imu,
            &Vector4::zeros(),
            &h0,
            &h1,
            [true; 4],
        );
        assert!(!updated);
        assert_eq!(post, belief);
    }
}
