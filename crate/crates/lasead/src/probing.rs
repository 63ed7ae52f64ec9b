//! Safety-constrained probing-input design.
//!
//! Given two pipeline hypotheses with state estimates x̂⁰ and x̂¹, the
//! predicted innovation means under a common input u separate as
//! F + G·u with F = f_d(x̂⁰) − f_d(x̂¹) and G = g_d(x̂⁰) − g_d(x̂¹).
//! Assuming similar innovation covariances, the KL divergence between the
//! innovation distributions reduces to ½‖F + G u‖²_{Σ⁻¹}, a convex quadratic
//! in the scalar input, so the safety-constrained maximizer sits at an
//! endpoint of the admissible interval.

use crate::plant::Dynamics;
use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

/// Box constraints on the predicted cart position and pole angle; the
/// probing input must keep both hypotheses' one-step predictions inside.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SafeSet {
    pub p_max: f64,
    pub theta_max: f64,
}

impl Default for SafeSet {
    fn default() -> Self {
        Self {
            p_max: 2.4,
            theta_max: 0.5,
        }
    }
}

/// Innovation-mean separation (F, G) between two hypothesis estimates,
/// restricted to `mask` (C selects identity rows).
pub fn innovation_gap<D: Dynamics>(
    dynamics: &D,
    h0_mean: &Vector4<f64>,
    h1_mean: &Vector4<f64>,
    mask: [bool; 4],
) -> (Vector4<f64>, Vector4<f64>) {
    let (f0, g0) = dynamics.affine(h0_mean);
    let (f1, g1) = dynamics.affine(h1_mean);
    let mut f_gap = f0 - f1;
    let mut g_gap = g0 - g1;
    for j in 0..4 {
        if !mask[j] {
            f_gap[j] = 0.0;
            g_gap[j] = 0.0;
        }
    }
    (f_gap, g_gap)
}

/// Masked inverse-covariance form used by the quadratic objective.
#[derive(Debug, Clone)]
pub struct MaskedPrecision {
    inv: Matrix4<f64>,
    pub mask: [bool; 4],
}

impl MaskedPrecision {
    /// Inverts the masked block of `cov`; fails on singular blocks.
    pub fn new(cov: &Matrix4<f64>, mask: [bool; 4]) -> Option<Self> {
        // Pad masked rows/cols with identity so the static inverse works,
        // then zero them back out.
        let mut padded = *cov;
        for j in 0..4 {
            if !mask[j] {
                for k in 0..4 {
                    padded[(j, k)] = 0.0;
                    padded[(k, j)] = 0.0;
                }
                padded[(j, j)] = 1.0;
            }
        }
        if !padded.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut inv = padded.try_inverse()?;
        for j in 0..4 {
            if !mask[j] {
                for k in 0..4 {
                    inv[(j, k)] = 0.0;
                    inv[(k, j)] = 0.0;
                }
            }
        }
        Some(Self { inv, mask })
    }

    fn quad(&self, v: &Vector4<f64>) -> f64 {
        (v.transpose() * self.inv * v)[0]
    }
}

/// ½‖F + G u‖²_{Σ⁻¹}: the Mahalanobis form of the innovation KL divergence
/// under the similar-covariance assumption.
pub fn kl_objective(
    f_gap: &Vector4<f64>,
    g_gap: &Vector4<f64>,
    precision: &MaskedPrecision,
    u: f64,
) -> f64 {
    let d = f_gap + g_gap * u;
    0.5 * precision.quad(&d)
}

/// Trace/log-det correction dropped by the similar-covariance assumption;
/// exposed for diagnostics only.
pub fn covariance_correction(sigma1: &Matrix4<f64>, sigma0: &Matrix4<f64>) -> Option<f64> {
    let inv1 = sigma1.try_inverse()?;
    let det0 = sigma0.determinant();
    let det1 = sigma1.determinant();
    if det0 <= 0.0 || det1 <= 0.0 {
        return None;
    }
    Some((inv1 * sigma0).trace() - (det0 / det1).ln() - 4.0)
}

/// Admissible input interval keeping the one-step prediction from
/// `hypothesis_mean` inside the safe set, intersected with `[-u_max, u_max]`.
///
/// The prediction is affine in u, so each box face is a linear inequality.
pub fn safety_interval<D: Dynamics>(
    dynamics: &D,
    hypothesis_mean: &Vector4<f64>,
    safe: &SafeSet,
    u_max: f64,
) -> Option<(f64, f64)> {
    let (f_d, g_d) = dynamics.affine(hypothesis_mean);
    let mut lo = -u_max;
    let mut hi = u_max;
    let constraints = [
        (f_d[0], g_d[0], safe.p_max),
        (f_d[2], g_d[2], safe.theta_max),
    ];
    for (f, g, bound) in constraints {
        // |f + g·u| ≤ bound.
        if g.abs() < 1e-12 {
            if f.abs() > bound {
                return None;
            }
            continue;
        }
        let a = (-bound - f) / g;
        let b = (bound - f) / g;
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        lo = lo.max(a);
        hi = hi.min(b);
        if lo > hi {
            return None;
        }
    }
    Some((lo, hi))
}

/// Outcome of the probing optimization.
#[derive(Debug, Clone, Copy)]
pub struct ProbingSolution {
    pub u: f64,
    pub kl: f64,
    /// False when the joint safety interval was empty and the nominal input
    /// was returned instead.
    pub feasible: bool,
}

/// Maximizes the KL objective over the intersection of both hypotheses'
/// safety intervals and the input box. The objective is convex quadratic in
/// u, so the maximum over an interval is attained at an endpoint; ties go to
/// the endpoint nearer the nominal input.
#[allow(clippy::too_many_arguments)]
pub fn solve_probing<D: Dynamics>(
    dynamics: &D,
    h0_mean: &Vector4<f64>,
    h1_mean: &Vector4<f64>,
    precision: &MaskedPrecision,
    safe: &SafeSet,
    u_max: f64,
    u_nominal: f64,
) -> ProbingSolution {
    let (f_gap, g_gap) = innovation_gap(dynamics, h0_mean, h1_mean, precision.mask);
    let interval = safety_interval(dynamics, h0_mean, safe, u_max).and_then(|(lo0, hi0)| {
        safety_interval(dynamics, h1_mean, safe, u_max).and_then(|(lo1, hi1)| {
            let lo = lo0.max(lo1);
            let hi = hi0.min(hi1);
            (lo <= hi).then_some((lo, hi))
        })
    });

    let Some((lo, hi)) = interval else {
        return ProbingSolution {
            u: u_nominal,
            kl: kl_objective(&f_gap, &g_gap, precision, u_nominal),
            feasible: false,
        };
    };

    let j_lo = kl_objective(&f_gap, &g_gap, precision, lo);
    let j_hi = kl_objective(&f_gap, &g_gap, precision, hi);
    let u = if (j_lo - j_hi).abs() < 1e-12 {
        // Tie: minimize tracking disruption.
        if (lo - u_nominal).abs() <= (hi - u_nominal).abs() {
            lo
        } else {
            hi
        }
    } else if j_lo > j_hi {
        lo
    } else {
        hi
    };
    ProbingSolution {
        u,
        kl: j_lo.max(j_hi),
        feasible: true,
    }
}
