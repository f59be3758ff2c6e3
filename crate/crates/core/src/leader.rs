//! Leader side: hold-view indexing of the rendered scene, the command clutch,
//! and the pose sources that stand in for the phone.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{SpatialAccel, Transform, Twist};

/// Rate at which commands are produced and sent.
pub const COMMAND_RATE_HZ: f64 = 100.0;
/// Rate at which the pose estimate refreshes; twist and acceleration run at
/// the command rate.
pub const POSE_RATE_HZ: f64 = 60.0;

#[derive(Debug, Error)]
pub enum LeaderError {
    #[error("clutch already engaged")]
    AlreadyEngaged,
    #[error("trajectory io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("trajectory is empty")]
    EmptyTrajectory,
}

/// Hold-view state. `a_w` places the phone world frame in the VR frame `A`,
/// `a_h` is the viewpoint frozen while the hold button is pressed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ViewState {
    pub a_w: Transform,
    pub a_h: Transform,
    pub hold: bool,
    /// Last output of [`ViewState::update_view`].
    pub a_p: Transform,
}

impl ViewState {
    /// Advances the view indexing with the latest phone pose and returns the
    /// phone pose in `A`.
    pub fn update_view(&mut self, w_p: &Transform, hold_pressed: bool) -> Transform {
        if hold_pressed {
            self.a_p = self.a_h;
            self.a_w = self.a_h.compose(&w_p.inverse());
        } else {
            self.a_p = self.a_w.compose(w_p);
            self.a_h = self.a_p;
        }
        self.hold = hold_pressed;
        self.a_p
    }

    /// Where camera `i`'s cloud is drawn relative to the phone, `T_P^C`.
    pub fn camera_anchor(&self, b_c: &Transform) -> Transform {
        camera_anchor(&self.a_p, b_c)
    }
}

pub fn camera_anchor(a_p: &Transform, b_c: &Transform) -> Transform {
    a_p.inverse().compose(b_c)
}

/// Command clutch. `t_d` is the offset of the desired tool pose from the
/// initial tool pose.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClutchState {
    pub engaged: bool,
    pub t_d: Transform,
    /// `T_A^P` at the engage instant.
    pub anchor: Transform,
    /// `t_d` at the engage instant.
    pub t_d_at_engage: Transform,
}

impl ClutchState {
    pub fn engage_clutch(&mut self, a_p: &Transform) -> Result<(), LeaderError> {
        if self.engaged {
            return Err(LeaderError::AlreadyEngaged);
        }
        self.engaged = true;
        self.anchor = *a_p;
        self.t_d_at_engage = self.t_d;
        Ok(())
    }

    /// `t_d = t_d(t_c) · [I, -p_c] · a_p · [R_cᵀ, 0]` while engaged. Returns
    /// `false` and leaves the state alone when disengaged.
    pub fn update_command(&mut self, a_p: &Transform) -> bool {
        if !self.engaged {
            log::warn!("update_command called with the clutch released; ignored");
            return false;
        }
        let shift = Transform::from_translation(-self.anchor.translation);
        let unrotate = Transform::from_rotation(self.anchor.rotation.inverse());
        self.t_d = self
            .t_d_at_engage
            .compose(&shift)
            .compose(a_p)
            .compose(&unrotate);
        true
    }

    pub fn release(&mut self) {
        self.engaged = false;
    }

    /// Rotation that maps velocities expressed in `A` to desired tool
    /// velocities in the base frame, given the initial tool pose.
    pub fn velocity_rotation(&self, tool_home: &Transform) -> UnitQuaternion<f64> {
        tool_home.rotation * self.t_d_at_engage.rotation
    }
}

pub fn desired_tool_pose(tool_home: &Transform, clutch: &ClutchState) -> Transform {
    tool_home.compose(&clutch.t_d)
}

/// Command stream element: pose, velocity, acceleration and clutch status.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommandMsg {
    pub seq: u32,
    /// Seconds since session start.
    pub t: f64,
    /// Phone pose in `A`.
    pub pose: Transform,
    /// Phone twist expressed in `A`.
    pub twist: Twist,
    pub accel: SpatialAccel,
    pub clutch: bool,
}

/// One leader input sample as produced by a pose source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderSample {
    pub t: f64,
    /// Phone pose in the phone world frame `W`.
    pub pose: Transform,
    /// Twist in `W`.
    #[serde(default)]
    pub twist: Twist,
    #[serde(default)]
    pub accel: SpatialAccel,
    #[serde(default)]
    pub clutch: bool,
    #[serde(default)]
    pub hold: bool,
}

impl LeaderSample {
    pub fn at_rest(t: f64) -> Self {
        LeaderSample {
            t,
            pose: Transform::identity(),
            twist: Twist::zero(),
            accel: SpatialAccel::zero(),
            clutch: false,
            hold: false,
        }
    }
}

/// Produces leader samples for a given time.
pub trait PoseSource: Send {
    fn sample(&mut self, t: f64) -> LeaderSample;

    /// Sources that can lose their client (the UI) report it here so the
    /// leader stops sending.
    fn connected(&self) -> bool {
        true
    }
}

/// Converts pose samples into the command stream.
#[derive(Clone, Debug, Default)]
pub struct Leader {
    pub view: ViewState,
    next_seq: u32,
}

impl Leader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn command(&mut self, s: &LeaderSample) -> CommandMsg {
        let a_p = self.view.update_view(&s.pose, s.hold);
        // While the view is held T_A^P is frozen, so its derivatives vanish.
        let (twist, accel) = if s.hold {
            (Twist::zero(), SpatialAccel::zero())
        } else {
            let r = self.view.a_w.rotation;
            (s.twist.rotated(&r), s.accel.rotated(&r))
        };
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        CommandMsg {
            seq,
            t: s.t,
            pose: a_p,
            twist,
            accel,
            clutch: s.clutch,
        }
    }
}

/// Scripted trajectory replayed with sample-and-hold. Poses refresh at
/// [`POSE_RATE_HZ`]; everything else uses the latest record.
#[derive(Clone, Debug)]
pub struct ScriptedSource {
    records: Vec<LeaderSample>,
    pose_rate_hz: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    schema: String,
    version: u32,
}

const TRAJECTORY_SCHEMA: &str = "teleop-trajectory";

impl ScriptedSource {
    pub fn new(mut records: Vec<LeaderSample>) -> Result<Self, LeaderError> {
        if records.is_empty() {
            return Err(LeaderError::EmptyTrajectory);
        }
        records.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self {
            records,
            pose_rate_hz: Some(POSE_RATE_HZ),
        })
    }

    pub fn with_pose_rate(mut self, rate: Option<f64>) -> Self {
        self.pose_rate_hz = rate;
        self
    }

    pub fn records(&self) -> &[LeaderSample] {
        &self.records
    }

    pub fn duration(&self) -> f64 {
        self.records.last().map(|r| r.t).unwrap_or(0.0)
    }

    fn latest_index(&self, t: f64) -> usize {
        self.records
            .partition_point(|r| r.t <= t + 1e-12)
            .saturating_sub(1)
    }

    /// Reads a line-delimited JSON trajectory. An optional first line
    /// `{"schema": "teleop-trajectory", "version": 1}` is accepted.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, LeaderError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if i == 0 && trimmed.contains("\"schema\"") {
                continue;
            }
            let rec: LeaderSample = serde_json::from_str(trimmed)
                .map_err(|source| LeaderError::Parse { line: i + 1, source })?;
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn load(path: &Path) -> Result<Self, LeaderError> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), LeaderError> {
        let header = TrajectoryHeader {
            schema: TRAJECTORY_SCHEMA.into(),
            version: 1,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header"))?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).expect("record"))?;
        }
        Ok(())
    }
}

impl PoseSource for ScriptedSource {
    fn sample(&mut self, t: f64) -> LeaderSample {
        let latest = self.records[self.latest_index(t)];
        let pose = match self.pose_rate_hz {
            Some(rate) => {
                let tick = (t * rate + 1e-9).floor() / rate;
                self.records[self.latest_index(tick)].pose
            }
            None => latest.pose,
        };
        LeaderSample {
            t,
            pose,
            ..latest
        }
    }
}

/// Keyframe of a vertical scripted motion.
#[derive(Clone, Copy, Debug)]
pub struct ZKeyframe {
    pub duration: f64,
    pub z: f64,
    pub clutch: bool,
}

/// Builds a vertical trajectory from keyframes with cosine blending, sampled
/// at the command rate, with analytic velocity and acceleration.
pub fn vertical_script(z0: f64, keys: &[ZKeyframe], tail: f64) -> Vec<LeaderSample> {
    let dt = 1.0 / COMMAND_RATE_HZ;
    let mut out = Vec::new();
    let mut t0 = 0.0;
    let mut z_start = z0;
    let push = |out: &mut Vec<LeaderSample>, t: f64, z: f64, v: f64, a: f64, clutch: bool| {
        out.push(LeaderSample {
            t,
            pose: Transform::from_translation(Vector3::new(0.0, 0.0, z)),
            twist: Twist::new(Vector3::new(0.0, 0.0, v), Vector3::zeros()),
            accel: SpatialAccel::new(Vector3::new(0.0, 0.0, a), Vector3::zeros()),
            clutch,
            hold: false,
        });
    };
    for k in keys {
        let steps = (k.duration * COMMAND_RATE_HZ).round() as usize;
        let dz = k.z - z_start;
        for i in 0..steps {
            let s = i as f64 / steps as f64;
            let w = PI / k.duration;
            let z = z_start + dz * 0.5 * (1.0 - (PI * s).cos());
            let v = dz * 0.5 * w * (PI * s).sin();
            let a = dz * 0.5 * w * w * (PI * s).cos();
            push(&mut out, t0 + i as f64 * dt, z, v, a, k.clutch);
        }
        t0 += steps as f64 * dt;
        z_start = k.z;
    }
    let steps = (tail * COMMAND_RATE_HZ).round() as usize;
    for i in 0..=steps {
        push(&mut out, t0 + i as f64 * dt, z_start, 0.0, 0.0, false);
    }
    out
}

/// Indexing session in the style of the recorded user session: `cycles`
/// clutched strokes of `stroke` meters inside a leader range of `range`
/// meters, separated by unclutched returns. `direction` is +1 or -1.
pub fn indexing_script(cycles: usize, stroke: f64, range: f64, direction: f64) -> Vec<LeaderSample> {
    let half = range / 2.0;
    let inset = (range - stroke) / 2.0;
    let top = direction * half;
    let start = direction * (half - inset);
    let end = -start;
    let bottom = -top;
    let mut keys = vec![
        ZKeyframe { duration: 0.3, z: top, clutch: false },
        ZKeyframe { duration: 0.15, z: start, clutch: false },
    ];
    for c in 0..cycles {
        keys.push(ZKeyframe { duration: 0.05, z: start, clutch: true });
        keys.push(ZKeyframe { duration: 0.9, z: end, clutch: true });
        keys.push(ZKeyframe { duration: 0.1, z: end, clutch: true });
        if c + 1 < cycles {
            keys.push(ZKeyframe { duration: 0.15, z: bottom, clutch: false });
            keys.push(ZKeyframe { duration: 0.7, z: top, clutch: false });
            keys.push(ZKeyframe { duration: 0.15, z: start, clutch: false });
        }
    }
    vertical_script(0.0, &keys, 0.5)
}

/// Straight clutched descent of `depth` meters over `duration` seconds,
/// held engaged for `hold` seconds afterwards.
pub fn descent_script(depth: f64, duration: f64, hold: f64) -> Vec<LeaderSample> {
    let keys = [
        ZKeyframe { duration: 0.2, z: 0.0, clutch: false },
        ZKeyframe { duration: 0.05, z: 0.0, clutch: true },
        ZKeyframe { duration, z: -depth, clutch: true },
        ZKeyframe { duration: hold, z: -depth, clutch: true },
    ];
    vertical_script(0.0, &keys, 0.2)
}

/// Smooth random phone motion with random clutch and hold toggles and
/// optional pose jumps, used for fuzzing.
#[derive(Clone, Debug)]
pub struct RandomSource {
    amp: [f64; 6],
    freq: [f64; 6],
    phase: [f64; 6],
    toggles: Vec<(f64, bool, bool)>,
    jumps: Vec<(f64, Vector3<f64>)>,
}

impl RandomSource {
    pub fn new(seed: u64, duration: f64, max_jump: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut amp = [0.0; 6];
        let mut freq = [0.0; 6];
        let mut phase = [0.0; 6];
        for i in 0..6 {
            amp[i] = if i < 3 {
                rng.random_range(0.0..0.1)
            } else {
                rng.random_range(0.0..0.3)
            };
            freq[i] = rng.random_range(0.05..0.8);
            phase[i] = rng.random_range(0.0..2.0 * PI);
        }
        let mut toggles = Vec::new();
        let mut t = 0.0;
        while t < duration {
            t += rng.random_range(0.2..1.5);
            toggles.push((t, rng.random_bool(0.6), rng.random_bool(0.2)));
        }
        let mut jumps = Vec::new();
        if max_jump > 0.0 {
            for _ in 0..rng.random_range(1..4) {
                let dir = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let jump = dir.normalize() * rng.random_range(0.0..max_jump);
                jumps.push((rng.random_range(0.0..duration), jump));
            }
        }
        Self {
            amp,
            freq,
            phase,
            toggles,
            jumps,
        }
    }

    fn axis_terms(&self, i: usize, t: f64) -> (f64, f64, f64) {
        let w = 2.0 * PI * self.freq[i];
        let arg = w * t + self.phase[i];
        let x = self.amp[i] * (arg.sin() - self.phase[i].sin());
        let v = self.amp[i] * w * arg.cos();
        let a = -self.amp[i] * w * w * arg.sin();
        (x, v, a)
    }
}

impl PoseSource for RandomSource {
    fn sample(&mut self, t: f64) -> LeaderSample {
        let mut x = [0.0; 6];
        let mut v = [0.0; 6];
        let mut a = [0.0; 6];
        for i in 0..6 {
            (x[i], v[i], a[i]) = self.axis_terms(i, t);
        }
        let mut p = Vector3::new(x[0], x[1], x[2]);
        for (tj, jump) in &self.jumps {
            if t >= *tj {
                p += jump;
            }
        }
        let (clutch, hold) = self
            .toggles
            .iter()
            .rev()
            .find(|(tt, _, _)| *tt <= t)
            .map(|(_, c, h)| (*c, *h))
            .unwrap_or((false, false));
        // Small-angle composition of the three rotation channels; the
        // angular velocity is reported for the same channels.
        let rot = UnitQuaternion::from_euler_angles(x[3], x[4], x[5]);
        LeaderSample {
            t,
            pose: Transform::new(rot, p),
            twist: Twist::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5])),
            accel: SpatialAccel::new(Vector3::new(a[0], a[1], a[2]), Vector3::new(a[3], a[4], a[5])),
            clutch,
            hold,
        }
    }
}

/// Input state written by the UI bridge and read by the session.
#[derive(Clone, Copy, Debug, Default)]
pub struct UiInputState {
    pub pose: Transform,
    pub clutch: bool,
    pub hold: bool,
    pub connected: bool,
}

/// Pose source fed by live operator input.
#[derive(Clone, Debug, Default)]
pub struct UiSource {
    pub state: Arc<Mutex<UiInputState>>,
}

impl UiSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn handle(&self) -> Arc<Mutex<UiInputState>> {
        Arc::clone(&self.state)
    }
}

impl PoseSource for UiSource {
    fn sample(&mut self, t: f64) -> LeaderSample {
        let s = *self.state.lock().expect("ui input lock");
        LeaderSample {
            t,
            pose: s.pose,
            twist: Twist::zero(),
            accel: SpatialAccel::zero(),
            clutch: s.clutch && s.connected,
            hold: s.hold,
        }
    }

    fn connected(&self) -> bool {
        self.state.lock().map(|s| s.connected).unwrap_or(false)
    }
}
