//! Cart-pole dynamics in control-affine form.
//!
//! Continuous-time equations of motion (pole angle measured from upright,
//! `l` is the pole half-length):
//!
//! ```text
//! temp = (u + m_p l ω² sinθ) / (m_c + m_p)
//! θ̈    = (g sinθ − cosθ temp) / (l (4/3 − m_p cos²θ / (m_c + m_p)))
//! v̇    = temp − m_p l θ̈ cosθ / (m_c + m_p)
//! ```
//!
//! The discrete map is an RK4 step of these equations with the input held
//! constant, plus additive Gaussian process noise. Because the discrete map
//! is only approximately affine in `u`, the affine pieces `f_d`, `g_d`
//! consumed by the probing optimizer are extracted by finite differences and
//! the residual is bounded by tests.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// State dimension of the cart-pole.
pub const STATE_DIM: usize = 4;

/// Cart position, cart velocity, pole angle (rad, from upright, unwrapped),
/// pole angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub p: f64,
    pub v: f64,
    pub theta: f64,
    pub omega: f64,
}

impl PlantState {
    pub fn new(p: f64, v: f64, theta: f64, omega: f64) -> Self {
        Self { p, v, theta, omega }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.p, self.v, self.theta, self.omega)
    }

    pub fn from_vector(x: &Vector4<f64>) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    pub fn is_finite(&self) -> bool {
        self.p.is_finite() && self.v.is_finite() && self.theta.is_finite() && self.omega.is_finite()
    }
}

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("non-finite state or input passed to step")]
    NonFinite,
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
}

/// Physical parameters, integration step and process-noise covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantParams {
    /// Cart mass (kg).
    pub cart_mass: f64,
    /// Pole mass (kg).
    pub pole_mass: f64,
    /// Pole half-length (m).
    pub pole_half_length: f64,
    /// Gravity (m/s²).
    pub gravity: f64,
    /// Integration step (s).
    pub dt: f64,
    /// Input saturation bound (N); the admissible set is `[-u_max, u_max]`.
    pub u_max: f64,
    /// Process-noise covariance diagonal (full matrices are not needed here).
    pub process_noise_diag: [f64; 4],
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            gravity: 9.8,
            dt: 0.005,
            u_max: 10.0,
            process_noise_diag: [1e-6, 1e-5, 1e-6, 1e-5],
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let pos = [
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("pole_half_length", self.pole_half_length),
            ("gravity", self.gravity),
            ("dt", self.dt),
            ("u_max", self.u_max),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::InvalidParams(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        for q in self.process_noise_diag {
            if !(q.is_finite() && q >= 0.0) {
                return Err(PlantError::InvalidParams(format!(
                    "process noise entries must be nonnegative, got {q}"
                )));
            }
        }
        Ok(())
    }

    pub fn process_noise(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::from_row_slice(&self.process_noise_diag))
    }

    /// Time derivative (ṗ, v̇, θ̇, ω̇) of the cart-pole at `state` under force `u`.
    pub fn continuous_dynamics(&self, state: &PlantState, u: f64) -> Vector4<f64> {
        let total_mass = self.cart_mass + self.pole_mass;
        let ml = self.pole_mass * self.pole_half_length;
        let (sin_t, cos_t) = state.theta.sin_cos();

        let temp = (u + ml * state.omega * state.omega * sin_t) / total_mass;
        let denom =
            self.pole_half_length * (4.0 / 3.0 - self.pole_mass * cos_t * cos_t / total_mass);
        let omega_dot = (self.gravity * sin_t - cos_t * temp) / denom;
        let v_dot = temp - ml * omega_dot * cos_t / total_mass;

        Vector4::new(state.v, v_dot, state.omega, omega_dot)
    }

    /// One RK4 step over `dt` with `u` held constant; `noise` is added after
    /// integration when supplied.
    pub fn step(
        &self,
        state: &PlantState,
        u: f64,
        noise: Option<&Vector4<f64>>,
    ) -> Result<PlantState, PlantError> {
        if !state.is_finite() || !u.is_finite() {
            return Err(PlantError::NonFinite);
        }
        let mut x = self.step_mean_vec(&state.to_vector(), u);
        if let Some(w) = noise {
            x += w;
        }
        Ok(PlantState::from_vector(&x))
    }

    fn deriv_vec(&self, x: &Vector4<f64>, u: f64) -> Vector4<f64> {
        self.continuous_dynamics(&PlantState::from_vector(x), u)
    }

    /// Deterministic part of the discrete map (RK4, no noise).
    pub fn step_mean_vec(&self, x: &Vector4<f64>, u: f64) -> Vector4<f64> {
        let h = self.dt;
        let k1 = self.deriv_vec(x, u);
        let k2 = self.deriv_vec(&(x + k1 * (h / 2.0)), u);
        let k3 = self.deriv_vec(&(x + k2 * (h / 2.0)), u);
        let k4 = self.deriv_vec(&(x + k3 * h), u);
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// Splits the discrete map into `step(x, u) ≈ f_d + g_d·u`.
    ///
    /// `f_d` is the unforced step, `g_d` the central finite-difference input
    /// sensitivity at `u = 0`.
    pub fn affine_decomposition(&self, state: &PlantState) -> (Vector4<f64>, Vector4<f64>) {
        let x = state.to_vector();
        let f_d = self.step_mean_vec(&x, 0.0);
        let h = FD_STEP;
        let g_d = (self.step_mean_vec(&x, h) - self.step_mean_vec(&x, -h)) / (2.0 * h);
        (f_d, g_d)
    }

    /// Jacobians (F, G) of the discrete map at (`state`, `u`), central
    /// differences with step `h = 1e-6`.
    pub fn linearize(&self, state: &PlantState, u: f64) -> (Matrix4<f64>, Vector4<f64>) {
        self.linearize_with_step(state, u, FD_STEP)
    }

    pub fn linearize_with_step(
        &self,
        state: &PlantState,
        u: f64,
        h: f64,
    ) -> (Matrix4<f64>, Vector4<f64>) {
        let x = state.to_vector();
        let mut f = Matrix4::zeros();
        for j in 0..STATE_DIM {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let col = (self.step_mean_vec(&xp, u) - self.step_mean_vec(&xm, u)) / (2.0 * h);
            f.set_column(j, &col);
        }
        let g = (self.step_mean_vec(&x, u + h) - self.step_mean_vec(&x, u - h)) / (2.0 * h);
        (f, g)
    }
}

const FD_STEP: f64 = 1e-6;

/// Discrete-time model surface consumed by the estimator and the probing
/// optimizer. The cart-pole implements it; tests use a linear surrogate.
pub trait Dynamics {
    fn step_mean(&self, x: &Vector4<f64>, u: f64) -> Vector4<f64>;
    fn jacobians(&self, x: &Vector4<f64>, u: f64) -> (Matrix4<f64>, Vector4<f64>);
    fn process_noise(&self) -> Matrix4<f64>;
    /// Affine split `step(x, u) ≈ f_d + g_d u` at `u = 0`.
    fn affine(&self, x: &Vector4<f64>) -> (Vector4<f64>, Vector4<f64>);
}

impl Dynamics for PlantParams {
    fn step_mean(&self, x: &Vector4<f64>, u: f64) -> Vector4<f64> {
        self.step_mean_vec(x, u)
    }

    fn jacobians(&self, x: &Vector4<f64>, u: f64) -> (Matrix4<f64>, Vector4<f64>) {
        self.linearize(&PlantState::from_vector(x), u)
    }

    fn process_noise(&self) -> Matrix4<f64> {
        PlantParams::process_noise(self)
    }

    fn affine(&self, x: &Vector4<f64>) -> (Vector4<f64>, Vector4<f64>) {
        self.affine_decomposition(&PlantState::from_vector(x))
    }
}

/// Clamp a force to the admissible interval `[-u_max, u_max]`.
pub fn saturate(u: f64, u_max: f64) -> f64 {
    u.clamp(-u_max, u_max)
}
