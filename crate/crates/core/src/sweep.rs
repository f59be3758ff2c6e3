//! Closed-loop wall pushes: the follower holds a pose commanded some depth
//! behind a stiff wall that is flush with the tool at rest.

use nalgebra::{DVector, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::controller::{ControllerError, DesiredMotion, ImpedanceConfig, ImpedanceController};
use crate::dynamics::{contact_wrench, ContactScene, DynamicsError, HalfSpace, RobotModel, RobotState};
use crate::geometry::Transform;
use crate::observer::{wrench_estimate, MomentumObserver, ObserverError};
use crate::par::{self, Execution};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
}

#[derive(Clone, Debug)]
pub struct WallPushConfig {
    pub model: RobotModel,
    pub controller: ImpedanceConfig,
    pub observer_gain: f64,
    pub wall_stiffness: f64,
    pub wall_damping: f64,
    /// Unit push direction into the wall, base frame.
    pub direction: Vector3<f64>,
    pub duration_s: f64,
    /// Averaging window at the end of the run.
    pub settle_s: f64,
    pub dt: f64,
}

impl Default for WallPushConfig {
    fn default() -> Self {
        WallPushConfig {
            model: RobotModel::franka_like(),
            controller: ImpedanceConfig::default(),
            observer_gain: 50.0,
            wall_stiffness: 2e4,
            wall_damping: 200.0,
            direction: -Vector3::z(),
            duration_s: 3.0,
            settle_s: 0.2,
            dt: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WallPush {
    pub depth: f64,
    pub peak_true: f64,
    /// Mean contact force norm over the settle window.
    pub settled_true: f64,
    /// Mean estimated force norm over the settle window.
    pub settled_est: f64,
    /// Peak-to-peak true force over the settle window.
    pub settled_spread: f64,
}

pub fn wall_push(cfg: &WallPushConfig, depth: f64) -> Result<WallPush, SweepError> {
    let ctl = ImpedanceController::new(cfg.controller.clone(), &cfg.model)?;
    let mut observer = MomentumObserver::new(cfg.model.dof(), cfg.observer_gain)?;
    let home = cfg.model.tool_pose(&ctl.q_rest);
    let dir = cfg.direction.normalize();
    let wall = HalfSpace {
        normal: (-dir).into(),
        offset: (-dir).dot(&home.translation),
        stiffness: cfg.wall_stiffness,
        damping: cfg.wall_damping,
        friction: 0.3,
    };
    let scene = ContactScene { planes: vec![wall] };
    let desired = DesiredMotion::hold(Transform::new(home.rotation, home.translation + dir * depth));
    let mut state = RobotState::at_rest(ctl.q_rest.clone());
    let mut tau_prev = DVector::zeros(cfg.model.dof());
    let steps = (cfg.duration_s / cfg.dt).round() as usize;
    let window = ((cfg.settle_s / cfg.dt).round() as usize).clamp(1, steps.max(1));
    let mut out = WallPush {
        depth,
        peak_true: 0.0,
        settled_true: 0.0,
        settled_est: 0.0,
        settled_spread: 0.0,
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..steps {
        let terms = cfg.model.terms(&state.q, &state.qdot);
        let tau_hat = observer.update(&terms, &state.qdot, &tau_prev, cfg.dt)?;
        let est = wrench_estimate(&terms.jacobian, tau_hat);
        let control = ctl.torque(&state, &terms, &desired)?;
        let w = contact_wrench(&scene, &terms.kinematics.tool, &terms.tool_twist(&state.qdot));
        let f = w.force.norm();
        out.peak_true = out.peak_true.max(f);
        if i + window >= steps {
            out.settled_true += f / window as f64;
            out.settled_est += est.wrench.force.norm() / window as f64;
            lo = lo.min(f);
            hi = hi.max(f);
        }
        state = cfg.model.step(&state, &control.tau, &w, cfg.dt)?;
        tau_prev = control.tau;
    }
    out.settled_spread = hi - lo;
    Ok(out)
}

/// Runs one wall push per depth. Results are in input order for every
/// execution mode.
pub fn force_sweep(cfg: &WallPushConfig, depths: &[f64], exec: Execution) -> Result<Vec<WallPush>, SweepError> {
    par::map(exec, depths, |d| wall_push(cfg, *d)).into_iter().collect()
}
