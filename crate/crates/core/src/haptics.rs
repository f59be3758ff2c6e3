//! Contact detection with hysteresis and haptic pattern intensities.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix6xX, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{damped_pinv, task_inertia, PINV_DAMPING};
use crate::dynamics::RobotModel;
use crate::geometry::Wrench;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HapticsError {
    #[error("thresholds must satisfy f_on > f_off > 0 (got {f_on}, {f_off})")]
    Thresholds { f_on: f64, f_off: f64 },
    #[error("invalid haptics config: {0}")]
    InvalidConfig(String),
}

/// Which momentum map turns the joint velocity change into lost impulse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImpulseMap {
    /// `S J M Jᵀ J Δq̇`.
    #[default]
    JointInertia,
    /// `S Λ J Δq̇`, with Λ the task-space inertia.
    TaskInertia,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HapticConfig {
    pub f_on: f64,
    pub f_off: f64,
    pub impulse_min: f64,
    pub cyclic_min: f64,
    /// Force norm at which the cyclic intensity reaches 1.
    pub cyclic_full_force: f64,
    pub cyclic_rate_hz: f64,
    /// Velocity-difference window Δ, seconds.
    pub impulse_window: f64,
    /// Tool speed whose complete loss maps to intensity 1.
    pub impulse_full_speed: f64,
    pub impulse_map: ImpulseMap,
}

impl Default for HapticConfig {
    fn default() -> Self {
        HapticConfig {
            f_on: 10.0,
            f_off: 7.0,
            impulse_min: 0.2,
            cyclic_min: 0.2,
            cyclic_full_force: 40.0,
            cyclic_rate_hz: 10.0,
            impulse_window: 0.02,
            impulse_full_speed: 0.3,
            impulse_map: ImpulseMap::JointInertia,
        }
    }
}

impl HapticConfig {
    pub fn validate(&self) -> Result<(), HapticsError> {
        if !(self.f_on > self.f_off && self.f_off > 0.0) {
            return Err(HapticsError::Thresholds {
                f_on: self.f_on,
                f_off: self.f_off,
            });
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.impulse_min) || !unit(self.cyclic_min) {
            return Err(HapticsError::InvalidConfig("minimum intensities must lie in [0, 1]".into()));
        }
        if !(self.cyclic_full_force > self.f_on) {
            return Err(HapticsError::InvalidConfig("cyclic_full_force must exceed f_on".into()));
        }
        if !(self.cyclic_rate_hz > 0.0 && self.impulse_window > 0.0 && self.impulse_full_speed > 0.0) {
            return Err(HapticsError::InvalidConfig("rates, window and full speed must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContactEdge {
    None,
    Made,
    Broken,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactFsm {
    pub in_contact: bool,
    pub f_on: f64,
    pub f_off: f64,
}

impl ContactFsm {
    pub fn new(f_on: f64, f_off: f64) -> Result<Self, HapticsError> {
        if !(f_on > f_off && f_off > 0.0) {
            return Err(HapticsError::Thresholds { f_on, f_off });
        }
        Ok(ContactFsm {
            in_contact: false,
            f_on,
            f_off,
        })
    }

    pub fn update(&mut self, f_norm: f64) -> ContactEdge {
        if !self.in_contact && f_norm >= self.f_on {
            self.in_contact = true;
            ContactEdge::Made
        } else if self.in_contact && f_norm <= self.f_off {
            self.in_contact = false;
            ContactEdge::Broken
        } else {
            ContactEdge::None
        }
    }
}

/// Norm of the translational momentum change for a joint velocity change.
pub fn impulse_raw(jac: &Matrix6xX<f64>, mass: &DMatrix<f64>, dqdot: &DVector<f64>, map: ImpulseMap) -> f64 {
    let twist: Vector6<f64> = jac * dqdot;
    let momentum: Vector6<f64> = match map {
        ImpulseMap::JointInertia => jac * (mass * (jac.transpose() * twist)),
        ImpulseMap::TaskInertia => task_inertia(jac, mass).0 * twist,
    };
    momentum.fixed_rows::<3>(0).norm()
}

/// Scale from raw impulse to intensity, chosen so that losing
/// `impulse_full_speed` of vertical tool speed at `q` saturates.
pub fn impulse_scale(model: &RobotModel, q: &DVector<f64>, cfg: &HapticConfig) -> f64 {
    let terms = model.terms(q, &DVector::zeros(model.dof()));
    let loss = Vector6::new(0.0, 0.0, cfg.impulse_full_speed, 0.0, 0.0, 0.0);
    let dq = damped_pinv(&terms.jacobian, PINV_DAMPING) * loss;
    let raw = impulse_raw(&terms.jacobian, &terms.mass, &dq, cfg.impulse_map);
    if raw > 0.0 {
        (1.0 - cfg.impulse_min) / raw
    } else {
        0.0
    }
}

/// Unclamped and clamped impulse intensity.
pub fn impulse_intensity(raw: f64, scale: f64, cfg: &HapticConfig) -> (f64, f64) {
    let unclamped = cfg.impulse_min + scale * raw;
    (unclamped, unclamped.clamp(0.0, 1.0))
}

/// Affine map of `‖F‖ − f_on` onto `[cyclic_min, 1]`.
pub fn cyclic_intensity(force: &Vector3<f64>, cfg: &HapticConfig) -> f64 {
    let span = cfg.cyclic_full_force - cfg.f_on;
    let i = cfg.cyclic_min + (force.norm() - cfg.f_on) * (1.0 - cfg.cyclic_min) / span;
    i.clamp(cfg.cyclic_min, 1.0)
}

/// Follower-side window of joint velocities used for the impulse term.
#[derive(Clone, Debug)]
pub struct ImpulseTracker {
    window: usize,
    history: VecDeque<DVector<f64>>,
}

impl ImpulseTracker {
    pub fn new(window_s: f64, dt: f64) -> Self {
        let window = ((window_s / dt).round() as usize).max(1);
        ImpulseTracker {
            window,
            history: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn push(&mut self, qdot: &DVector<f64>) {
        if self.history.len() == self.window + 1 {
            self.history.pop_front();
        }
        self.history.push_back(qdot.clone());
    }

    /// `q̇(t) − q̇(t − Δ)`, or the change since the oldest sample while the
    /// window is filling.
    pub fn delta(&self) -> Option<DVector<f64>> {
        let (first, last) = (self.history.front()?, self.history.back()?);
        Some(last - first)
    }
}

/// Follower wrench report consumed by the haptic renderer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrenchMsg {
    pub seq: u32,
    pub t: f64,
    pub wrench: Wrench,
    pub in_contact: bool,
    /// Impulse intensity computed on the follower at the latest made edge.
    pub impulse: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HapticKind {
    Impulse,
    Cyclic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HapticEvent {
    pub kind: HapticKind,
    pub intensity: f64,
    pub t: f64,
}

/// Leader-side renderer: runs the contact state machine on the received
/// force norms and emits an impulse at each made edge and cyclic events
/// at a fixed rate while in contact. Torques are ignored.
#[derive(Clone, Debug)]
pub struct HapticRenderer {
    cfg: HapticConfig,
    fsm: ContactFsm,
    last_t: Option<f64>,
    next_cyclic: f64,
    dropped: u64,
}

impl HapticRenderer {
    pub fn new(cfg: HapticConfig) -> Result<Self, HapticsError> {
        cfg.validate()?;
        let fsm = ContactFsm::new(cfg.f_on, cfg.f_off)?;
        Ok(HapticRenderer {
            cfg,
            fsm,
            last_t: None,
            next_cyclic: f64::INFINITY,
            dropped: 0,
        })
    }

    pub fn in_contact(&self) -> bool {
        self.fsm.in_contact
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn process(&mut self, msg: &WrenchMsg) -> Vec<HapticEvent> {
        if self.last_t.is_some_and(|last| msg.t <= last) || !msg.t.is_finite() {
            self.dropped += 1;
            return Vec::new();
        }
        self.last_t = Some(msg.t);
        let force = msg.wrench.force;
        let mut events = Vec::new();
        match self.fsm.update(force.norm()) {
            ContactEdge::Made => {
                let intensity = if msg.impulse > 0.0 {
                    (msg.impulse as f64).clamp(0.0, 1.0)
                } else {
                    self.cfg.impulse_min
                };
                events.push(HapticEvent {
                    kind: HapticKind::Impulse,
                    intensity,
                    t: msg.t,
                });
                self.next_cyclic = msg.t + 1.0 / self.cfg.cyclic_rate_hz;
            }
            ContactEdge::Broken => self.next_cyclic = f64::INFINITY,
            ContactEdge::None => {}
        }
        if self.fsm.in_contact && msg.t + 1e-9 >= self.next_cyclic {
            events.push(HapticEvent {
                kind: HapticKind::Cyclic,
                intensity: cyclic_intensity(&force, &self.cfg),
                t: msg.t,
            });
            let period = 1.0 / self.cfg.cyclic_rate_hz;
            while self.next_cyclic <= msg.t + 1e-9 {
                self.next_cyclic += period;
            }
        }
        events
    }

    pub fn process_all<'a>(&mut self, msgs: impl IntoIterator<Item = &'a WrenchMsg>) -> Vec<HapticEvent> {
        msgs.into_iter().flat_map(|m| self.process(m)).collect()
    }
}
