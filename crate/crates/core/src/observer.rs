//! Generalized-momentum observer for external joint torques and the
//! corresponding tool wrench.

use nalgebra::{DMatrix, DVector, Matrix6xX};
use thiserror::Error;

use crate::controller::{damped_pinv, PINV_DAMPING};
use crate::dynamics::{DynamicsTerms, RobotModel};
use crate::geometry::Wrench;

pub const DEFAULT_GAIN: f64 = 50.0;
/// Smallest Jacobian singular value, relative to the largest, for which a
/// wrench estimate is considered reliable.
pub const MIN_RELATIVE_SINGULAR_VALUE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("observer gain must be positive and finite, got {0}")]
    InvalidGain(f64),
    #[error("observer expects {expected} joints, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// `τ̂ = K_O [M q̇ − ∫(τ − g + Cᵀ q̇ + τ̂) ds − p₀]`, integrated with the
/// trapezoidal rule. The torque term is zero-order held over each step, so
/// its integral is exact; the state-dependent terms and `τ̂` are
/// trapezoidal, which makes the update implicit in `τ̂` and solvable per
/// joint in closed form.
#[derive(Clone, Debug)]
pub struct MomentumObserver {
    gain: DVector<f64>,
    integral: DVector<f64>,
    tau_hat: DVector<f64>,
    p0: DVector<f64>,
    /// `−g + Cᵀ q̇ + τ̂` at the previous sample.
    prev_state_term: Option<DVector<f64>>,
}

impl MomentumObserver {
    pub fn new(dof: usize, gain: f64) -> Result<Self, ObserverError> {
        Self::with_gains(DVector::from_element(dof, gain))
    }

    pub fn with_gains(gain: DVector<f64>) -> Result<Self, ObserverError> {
        if let Some(bad) = gain.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
            return Err(ObserverError::InvalidGain(*bad));
        }
        let n = gain.len();
        Ok(MomentumObserver {
            gain,
            integral: DVector::zeros(n),
            tau_hat: DVector::zeros(n),
            p0: DVector::zeros(n),
            prev_state_term: None,
        })
    }

    pub fn dof(&self) -> usize {
        self.gain.len()
    }

    pub fn gains(&self) -> &DVector<f64> {
        &self.gain
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.tau_hat
    }

    pub fn integral(&self) -> &DVector<f64> {
        &self.integral
    }

    pub fn reset(&mut self) {
        let n = self.dof();
        self.integral = DVector::zeros(n);
        self.tau_hat = DVector::zeros(n);
        self.prev_state_term = None;
    }

    /// Advances the estimate to the sample described by `terms` and `qdot`.
    /// `tau` is the torque that was applied over the preceding `dt`. The
    /// first call only latches the initial momentum.
    pub fn update(
        &mut self,
        terms: &DynamicsTerms,
        qdot: &DVector<f64>,
        tau: &DVector<f64>,
        dt: f64,
    ) -> Result<&DVector<f64>, ObserverError> {
        let n = self.dof();
        for len in [qdot.len(), tau.len(), terms.mass.nrows()] {
            if len != n {
                return Err(ObserverError::DimensionMismatch { expected: n, got: len });
            }
        }
        let momentum = &terms.mass * qdot;
        let state_term = terms.coriolis_matrix.transpose() * qdot - &terms.gravity;
        let Some(prev) = self.prev_state_term.take() else {
            self.p0 = momentum;
            self.prev_state_term = Some(state_term);
            return Ok(&self.tau_hat);
        };
        let half = 0.5 * dt;
        let c = &self.integral + tau * dt + (&prev + &self.tau_hat + &state_term) * half;
        for i in 0..n {
            let k = self.gain[i];
            self.tau_hat[i] = k * (momentum[i] - self.p0[i] - c[i]) / (1.0 + k * half);
        }
        self.integral = c + &self.tau_hat * half;
        self.prev_state_term = Some(state_term);
        Ok(&self.tau_hat)
    }

    /// Convenience wrapper that evaluates the dynamics terms itself.
    pub fn step(
        &mut self,
        model: &RobotModel,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        tau: &DVector<f64>,
        dt: f64,
    ) -> Result<&DVector<f64>, ObserverError> {
        let terms = model.terms(q, qdot);
        self.update(&terms, qdot, tau, dt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WrenchEstimate {
    pub wrench: Wrench,
    /// Set when the Jacobian is (near) rank deficient; the wrench is then
    /// the minimum-norm solution.
    pub low_confidence: bool,
}

/// Damped least-squares solution of `Jᵀ W = τ̂`.
pub fn wrench_estimate(jac: &Matrix6xX<f64>, tau_hat: &DVector<f64>) -> WrenchEstimate {
    let pinv = damped_pinv(jac, PINV_DAMPING);
    let w = pinv.transpose() * tau_hat;
    let j = DMatrix::from_column_slice(6, jac.ncols(), jac.as_slice());
    let sv = j.singular_values();
    let rank_slots = 6.min(jac.ncols());
    let max = sv.max();
    let min = if sv.len() >= rank_slots && rank_slots == 6 {
        sv.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    let low_confidence = !(max > 0.0 && min / max >= MIN_RELATIVE_SINGULAR_VALUE);
    WrenchEstimate {
        wrench: Wrench::from_vector6(&nalgebra::Vector6::from_column_slice(w.as_slice())),
        low_confidence,
    }
}
