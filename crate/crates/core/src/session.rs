//! Session orchestration: leader, transport, follower, cameras and the
//! session log, all driven by one virtual clock in microseconds.
//!
//! Per 1 ms tick the coordinator
//! 1. emits leader commands (100 Hz), RTT probes (10 Hz) and camera frames,
//! 2. delivers leader→follower datagrams and applies commands,
//! 3. runs the watchdog, the controller, the observer and one dynamics step,
//! 4. emits wrench reports (100 Hz),
//! 5. delivers follower→leader datagrams and renders haptics.
//!
//! Everything is seeded, so a config and seed determine the log bytes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::{ControllerError, DesiredMotion, ImpedanceConfig, ImpedanceController};
use crate::depthcodec::{
    encode_batch, synth_scene, CameraIntrinsics, CodecError, CodedDepthFrame, ColorStreamConfig, SceneParams,
    color_payload_model,
};
use crate::dynamics::{contact_wrench, ContactScene, DynamicsError, RobotModel, RobotState};
use crate::geometry::{SpatialAccel, Transform, Twist, Wrench};
use crate::haptics::{
    impulse_intensity, impulse_raw, impulse_scale, ContactEdge, ContactFsm, HapticConfig, HapticEvent, HapticKind,
    HapticRenderer, HapticsError, ImpulseTracker, WrenchMsg,
};
use crate::leader::{
    descent_script, desired_tool_pose, indexing_script, ClutchState, Leader, PoseSource, RandomSource,
    ScriptedSource, UiSource, COMMAND_RATE_HZ,
};
use crate::netsim::{
    decode_command, decode_wrench, encode_command, encode_wrench, ChannelProfile, Datagram, Fragmenter,
    LatestWins, Link, LinkParams, NetError, Reassembler, ReassemblyStats, RttProbe, RttProber,
    RttSummary, StreamId, TrafficClass, Watchdog, CAMERA_SLOTS,
};
use crate::observer::{wrench_estimate, MomentumObserver, ObserverError};
use crate::par::Execution;

pub const CONTROL_PERIOD_US: u64 = 1_000;
pub const WRENCH_RATE_HZ: f64 = 100.0;
pub const RTT_PROBE_RATE_HZ: f64 = 10.0;
pub const BANDWIDTH_WINDOW_US: u64 = 1_000_000;
pub const LOG_SCHEMA: &str = "teleop-session-log";
pub const LOG_VERSION: u32 = 1;
/// Desired feed-forward is dropped once the newest applied command is this old.
pub const FEEDFORWARD_HOLD_US: u64 = 20_000;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("config: {0}")]
    Config(String),
    #[error("config file: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log line {line}: {source}")]
    LogParse { line: usize, source: serde_json::Error },
    #[error("log: {0}")]
    Log(String),
    #[error(transparent)]
    Model(#[from] DynamicsError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Haptics(#[from] HapticsError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("leader: {0}")]
    Leader(String),
}

impl SessionError {
    /// Whether the error stems from the configuration rather than a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            SessionError::Config(_)
                | SessionError::ConfigParse(_)
                | SessionError::Model(_)
                | SessionError::Controller(_)
                | SessionError::Haptics(_)
                | SessionError::Observer(_)
                | SessionError::Net(_)
                | SessionError::Leader(_)
        )
    }
}

// ---------------------------------------------------------------------------
// Configuration

fn default_cycles() -> usize {
    4
}
fn default_stroke() -> f64 {
    0.14
}
fn default_range() -> f64 {
    0.15
}
fn default_direction() -> f64 {
    1.0
}
fn default_descent_depth() -> f64 {
    0.1
}
fn default_descent_duration() -> f64 {
    1.0
}
fn default_descent_hold() -> f64 {
    1.0
}
fn default_max_jump() -> f64 {
    0.0
}

/// Where leader input comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LeaderConfig {
    /// No input; the follower holds its initial pose.
    Idle,
    /// Line-delimited JSON trajectory file.
    Script { path: PathBuf },
    /// Clutched vertical strokes separated by unclutched returns.
    Indexing {
        #[serde(default = "default_cycles")]
        cycles: usize,
        #[serde(default = "default_stroke")]
        stroke: f64,
        #[serde(default = "default_range")]
        range: f64,
        #[serde(default = "default_direction")]
        direction: f64,
    },
    /// Straight clutched descent.
    Descent {
        #[serde(default = "default_descent_depth")]
        depth: f64,
        #[serde(default = "default_descent_duration")]
        duration: f64,
        #[serde(default = "default_descent_hold")]
        hold: f64,
    },
    /// Seeded random motion with clutch toggles and pose jumps.
    Random {
        #[serde(default = "default_max_jump")]
        max_jump: f64,
    },
    /// Live input from the WebSocket bridge.
    Ui,
}

impl Default for LeaderConfig {
    fn default() -> Self {
        LeaderConfig::Indexing {
            cycles: default_cycles(),
            stroke: default_stroke(),
            range: default_range(),
            direction: default_direction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// `wifi`, `5g-nsa` or `ideal`.
    pub profile: String,
    /// Round-trip min/mean/max override, ms.
    pub rtt_ms: Option<[f64; 3]>,
    pub loss: Option<f64>,
    pub reorder_prob: f64,
    pub reorder_extra_ms: f64,
    pub line_rate_mbps: f64,
    /// Upper limit on the follower→leader video classes; 0 disables it.
    pub video_cap_mbps: f64,
    pub video_burst_bytes: f64,
    pub video_queue_bytes: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            profile: "wifi".into(),
            rtt_ms: None,
            loss: None,
            reorder_prob: 0.0,
            reorder_extra_ms: 0.0,
            line_rate_mbps: 300.0,
            video_cap_mbps: 80.0,
            video_burst_bytes: 65_536.0,
            video_queue_bytes: 2_000_000,
        }
    }
}

impl ChannelConfig {
    pub fn link_params(&self) -> Result<LinkParams, SessionError> {
        let mut profile = ChannelProfile::preset(&self.profile)?;
        if let Some(rtt) = self.rtt_ms {
            profile.rtt_ms = rtt;
        }
        if let Some(loss) = self.loss {
            profile.loss = loss;
        }
        profile.reorder_prob = self.reorder_prob;
        profile.reorder_extra_ms = self.reorder_extra_ms;
        let mut p = LinkParams::from_profile(&profile)?;
        p.line_rate_mbps = self.line_rate_mbps;
        p.video_cap_mbps = self.video_cap_mbps;
        p.video_burst_bytes = self.video_burst_bytes;
        p.video_queue_bytes = self.video_queue_bytes;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSetConfig {
    pub count: usize,
    pub width: u16,
    pub height: u16,
    pub fps: u32,
    pub hfov_deg: f64,
    /// Distinct synthetic depth images per camera, encoded once and cycled.
    pub depth_variants: usize,
    /// Residual depth noise after sensor-side filtering, depth units.
    pub depth_noise_sigma: f64,
    pub plane_depth: f64,
    pub boxes: usize,
    pub color: ColorStreamConfig,
    /// `T_B^C` per camera; empty places the cameras on a ring around the
    /// workspace.
    pub extrinsics: Vec<Transform>,
    /// Pixel stride of point clouds published to the UI.
    pub cloud_stride: usize,
}

impl Default for CameraSetConfig {
    fn default() -> Self {
        CameraSetConfig {
            count: 4,
            width: 848,
            height: 480,
            fps: 30,
            hfov_deg: 87.0,
            depth_variants: 4,
            depth_noise_sigma: 1.0,
            plane_depth: 1.0,
            boxes: 4,
            color: ColorStreamConfig::default(),
            extrinsics: Vec::new(),
            cloud_stride: 4,
        }
    }
}

impl CameraSetConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::from_fov(self.width, self.height, self.hfov_deg)
    }

    /// Camera pose in the robot base frame.
    pub fn extrinsic(&self, i: usize) -> Transform {
        if let Some(t) = self.extrinsics.get(i) {
            return *t;
        }
        let target = Vector3::new(0.5, 0.0, 0.2);
        let angle = std::f64::consts::FRAC_PI_2 * i as f64 + std::f64::consts::FRAC_PI_4;
        let eye = target + Vector3::new(1.1 * angle.cos(), 1.1 * angle.sin(), 0.8);
        // Optical frame: z forward, y down.
        let rot = UnitQuaternion::face_towards(&(target - eye), &-Vector3::z());
        Transform::new(rot, eye)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    /// Control ticks between state records (1 = every millisecond).
    pub state_every: u32,
    /// Store delivered depth frames by content hash next to the log.
    pub blobs: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            state_every: 1,
            blobs: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    /// Simulated seconds; 0 means the length of the leader script.
    pub duration: f64,
    /// Built-in model name (`franka-like`, `planar3`) or model file path.
    pub robot: String,
    pub controller: ImpedanceConfig,
    pub observer_gain: f64,
    pub haptics: HapticConfig,
    pub scene: ContactScene,
    pub leader: LeaderConfig,
    pub channel: ChannelConfig,
    pub cameras: CameraSetConfig,
    pub log: LogConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            seed: 1,
            duration: 0.0,
            robot: "franka-like".into(),
            controller: ImpedanceConfig::default(),
            observer_gain: crate::observer::DEFAULT_GAIN,
            haptics: HapticConfig::default(),
            scene: ContactScene::default(),
            leader: LeaderConfig::default(),
            channel: ChannelConfig::default(),
            cameras: CameraSetConfig::default(),
            log: LogConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, SessionError> {
        Ok(toml::from_str(s)?)
    }

    /// Loads a config file. Relative script and model paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, SessionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SessionError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let LeaderConfig::Script { path } = &mut cfg.leader {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if !matches!(cfg.robot.as_str(), "franka-like" | "planar3") && Path::new(&cfg.robot).is_relative() {
            cfg.robot = base.join(&cfg.robot).to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: String| Err(SessionError::Config(m));
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad(format!("duration {} must be finite and non-negative", self.duration));
        }
        if !(self.observer_gain > 0.0) {
            return bad(format!("observer gain {} must be positive", self.observer_gain));
        }
        let c = &self.cameras;
        if c.count > CAMERA_SLOTS as usize {
            return bad(format!("at most {CAMERA_SLOTS} cameras, got {}", c.count));
        }
        if c.count > 0 {
            if ![15, 30, 60].contains(&c.fps) {
                return bad(format!("camera fps {} must be 15, 30 or 60", c.fps));
            }
            if c.width == 0 || c.height == 0 || c.depth_variants == 0 {
                return bad("camera resolution and variant count must be positive".into());
            }
            if !c.intrinsics().is_valid() {
                return bad(format!("invalid field of view {}", c.hfov_deg));
            }
        }
        if self.log.state_every == 0 {
            return bad("log.state_every must be at least 1".into());
        }
        match &self.leader {
            LeaderConfig::Script { path } if !path.exists() => {
                return bad(format!("leader script {} does not exist", path.display()));
            }
            LeaderConfig::Random { .. } | LeaderConfig::Ui | LeaderConfig::Idle if self.duration <= 0.0 => {
                return bad("this leader source needs an explicit duration".into());
            }
            LeaderConfig::Indexing { cycles, stroke, range, .. } if *cycles == 0 || stroke > range => {
                return bad("indexing needs at least one cycle and stroke <= range".into());
            }
            _ => {}
        }
        self.controller.validate()?;
        self.haptics.validate()?;
        self.scene.validate()?;
        self.channel.link_params()?;
        Ok(())
    }

    /// Builds the configured pose source and its natural duration.
    pub fn pose_source(&self) -> Result<(Box<dyn PoseSource>, f64), SessionError> {
        let scripted = |records| -> Result<(Box<dyn PoseSource>, f64), SessionError> {
            let s = ScriptedSource::new(records).map_err(|e| SessionError::Leader(e.to_string()))?;
            let d = s.duration();
            Ok((Box::new(s), d))
        };
        match &self.leader {
            LeaderConfig::Idle => Ok((Box::new(IdleSource), 0.0)),
            LeaderConfig::Script { path } => {
                let s = ScriptedSource::load(path).map_err(|e| SessionError::Leader(format!("{}: {e}", path.display())))?;
                let d = s.duration();
                Ok((Box::new(s), d))
            }
            LeaderConfig::Indexing {
                cycles,
                stroke,
                range,
                direction,
            } => scripted(indexing_script(*cycles, *stroke, *range, *direction)),
            LeaderConfig::Descent { depth, duration, hold } => scripted(descent_script(*depth, *duration, *hold)),
            LeaderConfig::Random { max_jump } => Ok((
                Box::new(RandomSource::new(self.seed, self.duration.max(1.0), *max_jump)),
                0.0,
            )),
            LeaderConfig::Ui => Ok((Box::new(UiSource::new()), 0.0)),
        }
    }
}

/// Source that never moves and never clutches.
struct IdleSource;

impl PoseSource for IdleSource {
    fn sample(&mut self, t: f64) -> crate::leader::LeaderSample {
        crate::leader::LeaderSample::at_rest(t)
    }
}

// ---------------------------------------------------------------------------
// Log

/// Datagram bookkeeping for one link direction at session end.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAccount {
    pub offered: u64,
    pub delivered: u64,
    pub lost: u64,
    pub overflow_dropped: u64,
    pub queued: u64,
    pub in_flight: u64,
}

impl LinkAccount {
    fn of(link: &Link) -> Self {
        let s = &link.stats;
        LinkAccount {
            offered: s.offered_packets.iter().sum(),
            delivered: s.delivered_packets.iter().sum(),
            lost: s.lost_packets,
            overflow_dropped: s.overflow_packets,
            queued: link.queued_total() as u64,
            in_flight: link.in_flight() as u64,
        }
    }

    /// Every offered datagram is delivered, lost, dropped or still pending.
    pub fn balanced(&self) -> bool {
        self.offered == self.delivered + self.lost + self.overflow_dropped + self.queued + self.in_flight
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Record {
    Header {
        schema: String,
        version: u32,
        config: Box<SessionConfig>,
        home: Transform,
        force_bound: [f64; 3],
    },
    /// Leader sent a command. `phone` is the raw pose in `W`.
    Command {
        t: f64,
        seq: u32,
        phone: Transform,
        clutch: bool,
        hold: bool,
    },
    /// Follower accepted a command.
    Apply {
        t: f64,
        seq: u32,
        latency_ms: f64,
        engaged: bool,
    },
    /// Follower state at 1 kHz (or decimated).
    State {
        t: f64,
        q: Vec<f64>,
        qdot: Vec<f64>,
        tau: Vec<f64>,
        w_true: Wrench,
        w_est: Wrench,
        low_confidence: bool,
        desired: Transform,
        actual: Transform,
        e: [f64; 6],
        k: [f64; 6],
        saturated: [bool; 6],
        engaged: bool,
    },
    /// Follower contact edge with the impulse computed there.
    Contact {
        t: f64,
        made: bool,
        impulse_raw: f64,
        impulse: f64,
    },
    Haptic(HapticEvent),
    Rtt {
        t: f64,
        id: u32,
        rtt_ms: f64,
    },
    Frame {
        t: f64,
        stream: String,
        frame_id: u32,
        bytes: usize,
        latency_ms: f64,
        valid: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sha256: Option<String>,
    },
    Watchdog {
        t: f64,
        tripped: bool,
    },
    Ui {
        t: f64,
        connected: bool,
    },
    Bandwidth {
        t: f64,
        window_s: f64,
        up_bytes: [u64; 3],
        down_bytes: [u64; 3],
        up_offered: [u64; 3],
        down_offered: [u64; 3],
    },
    Fault {
        t: f64,
        message: String,
    },
    End {
        t: f64,
        aborted: bool,
        up: LinkAccount,
        down: LinkAccount,
        reassembly: ReassemblyStats,
        stale_commands: u64,
        stale_wrenches: u64,
        watchdog_trips: u32,
        rtt_probes: u32,
    },
}

/// Ordered session records plus content-addressed frame blobs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionLog {
    pub records: Vec<Record>,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

impl SessionLog {
    pub fn aborted(&self) -> bool {
        self.records.iter().any(|r| matches!(r, Record::End { aborted: true, .. } | Record::Fault { .. }))
    }

    pub fn config(&self) -> Option<&SessionConfig> {
        self.records.iter().find_map(|r| match r {
            Record::Header { config, .. } => Some(config.as_ref()),
            _ => None,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to memory");
        out
    }

    /// Writes the log and, if present, its blobs into `<path>.blobs/`.
    pub fn save(&self, path: &Path) -> Result<(), SessionError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        if !self.blobs.is_empty() {
            let dir = blob_dir(path);
            std::fs::create_dir_all(&dir)?;
            for (hash, bytes) in &self.blobs {
                std::fs::write(dir.join(format!("{hash}.dpth")), bytes)?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, SessionError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|source| SessionError::LogParse { line: i + 1, source })?;
            if i == 0 && !matches!(&rec, Record::Header { schema, .. } if schema == LOG_SCHEMA) {
                return Err(SessionError::Log("first line is not a session log header".into()));
            }
            records.push(rec);
        }
        Ok(SessionLog {
            records,
            blobs: BTreeMap::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub fn blob_dir(log_path: &Path) -> PathBuf {
    let mut s = log_path.as_os_str().to_owned();
    s.push(".blobs");
    PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// Engine

/// Snapshot of follower and leader state for live display.
#[derive(Clone, Debug, Serialize)]
pub struct Snapshot {
    pub t: f64,
    pub q: Vec<f64>,
    pub tool: Transform,
    pub desired: Transform,
    pub engaged: bool,
    pub watchdog_tripped: bool,
    pub wrench: Wrench,
    pub in_contact: bool,
}

struct Camera {
    next_due_us: f64,
    frame: u32,
    depth: Vec<CodedDepthFrame>,
    color: ColorStreamConfig,
}

/// Drives one session tick by tick.
pub struct Session {
    cfg: SessionConfig,
    model: RobotModel,
    controller: ImpedanceController,
    observer: MomentumObserver,
    source: Box<dyn PoseSource>,
    duration_us: u64,
    tick: u64,
    // leader side
    leader: Leader,
    prober: RttProber,
    renderer: HapticRenderer,
    wrench_lw: LatestWins,
    leader_rx: Reassembler,
    last_wrench: Option<WrenchMsg>,
    // follower side
    state: RobotState,
    home: Transform,
    clutch: ClutchState,
    desired: DesiredMotion,
    last_apply_us: Option<u64>,
    command_lw: LatestWins,
    watchdog: Watchdog,
    watchdog_logged: bool,
    tau_prev: DVector<f64>,
    fsm: ContactFsm,
    impulse: ImpulseTracker,
    last_impulse: f32,
    w_est: Wrench,
    wrench_seq: u32,
    // transport
    up: Link,
    down: Link,
    up_frag: Fragmenter,
    down_frag: Fragmenter,
    window_up: [u64; 3],
    window_down: [u64; 3],
    window_up_offered: [u64; 3],
    window_down_offered: [u64; 3],
    cameras: Vec<Camera>,
    keep_depth: bool,
    latest_depth: Vec<Option<Vec<u8>>>,
    pending_haptics: Vec<HapticEvent>,
    log: SessionLog,
    done: bool,
}

fn stream_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt)
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Result<Self, SessionError> {
        let (source, natural) = cfg.pose_source()?;
        Self::with_source(cfg, source, natural)
    }

    /// Builds a session around an explicit pose source, for live input.
    pub fn with_source(cfg: SessionConfig, source: Box<dyn PoseSource>, natural: f64) -> Result<Self, SessionError> {
        cfg.validate()?;
        let model = RobotModel::builtin_or_file(&cfg.robot)?;
        let controller = ImpedanceController::new(cfg.controller.clone(), &model)?;
        let observer = MomentumObserver::new(model.dof(), cfg.observer_gain)?;
        let duration = if cfg.duration > 0.0 { cfg.duration } else { natural };
        if duration <= 0.0 {
            return Err(SessionError::Config("session duration resolves to zero".into()));
        }
        let params = cfg.channel.link_params()?;
        let up = Link::new(params.clone(), stream_seed(cfg.seed, 1))?;
        let down = Link::new(params, stream_seed(cfg.seed, 2))?;

        let q0 = controller.q_rest.clone();
        let state = RobotState::at_rest(q0.clone());
        let home = model.tool_pose(&q0);
        let cameras = build_cameras(&cfg)?;
        let n = model.dof();
        let dt = CONTROL_PERIOD_US as f64 * 1e-6;
        let mut log = SessionLog::default();
        log.records.push(Record::Header {
            schema: LOG_SCHEMA.into(),
            version: LOG_VERSION,
            config: Box::new(cfg.clone()),
            home,
            force_bound: crate::controller::force_bound(&cfg.controller),
        });
        Ok(Session {
            fsm: ContactFsm::new(cfg.haptics.f_on, cfg.haptics.f_off)?,
            impulse: ImpulseTracker::new(cfg.haptics.impulse_window, dt),
            renderer: HapticRenderer::new(cfg.haptics.clone())?,
            latest_depth: vec![None; cameras.len()],
            duration_us: (duration * 1e6).round() as u64,
            cfg,
            model,
            controller,
            observer,
            source,
            tick: 0,
            leader: Leader::new(),
            prober: RttProber::default(),
            wrench_lw: LatestWins::default(),
            leader_rx: Reassembler::new(),
            last_wrench: None,
            state,
            home,
            clutch: ClutchState::default(),
            desired: DesiredMotion::hold(home),
            last_apply_us: None,
            command_lw: LatestWins::default(),
            watchdog: Watchdog::new(),
            watchdog_logged: false,
            tau_prev: DVector::zeros(n),
            last_impulse: 0.0,
            w_est: Wrench::zero(),
            wrench_seq: 0,
            up,
            down,
            up_frag: Fragmenter::new(),
            down_frag: Fragmenter::new(),
            window_up: [0; 3],
            window_down: [0; 3],
            window_up_offered: [0; 3],
            window_down_offered: [0; 3],
            cameras,
            keep_depth: false,
            pending_haptics: Vec::new(),
            log,
            done: false,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn home(&self) -> Transform {
        self.home
    }

    pub fn now_us(&self) -> u64 {
        self.tick * CONTROL_PERIOD_US
    }

    pub fn duration_us(&self) -> u64 {
        self.duration_us
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Keeps the newest delivered depth frame per camera for display.
    pub fn keep_latest_depth(&mut self, keep: bool) {
        self.keep_depth = keep;
    }

    pub fn latest_depth(&self, camera: usize) -> Option<&[u8]> {
        self.latest_depth.get(camera)?.as_deref()
    }

    pub fn camera_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn take_haptics(&mut self) -> Vec<HapticEvent> {
        std::mem::take(&mut self.pending_haptics)
    }

    pub fn rtt_summary(&self) -> RttSummary {
        self.prober.summary()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            t: self.now_us() as f64 * 1e-6,
            q: self.state.q.iter().copied().collect(),
            tool: self.model.tool_pose(&self.state.q),
            desired: self.desired.pose,
            engaged: self.clutch.engaged,
            watchdog_tripped: self.watchdog.tripped(),
            wrench: self.last_wrench.map(|w| w.wrench).unwrap_or_default(),
            in_contact: self.renderer.in_contact(),
        }
    }

    /// Adds an out-of-band record (UI connection changes).
    pub fn note_ui(&mut self, connected: bool) {
        let t = self.now_us() as f64 * 1e-6;
        self.log.records.push(Record::Ui { t, connected });
    }

    /// Advances one control period. Returns `false` once the session has
    /// ended (duration reached or controller fault).
    pub fn step(&mut self) -> bool {
        if self.done {
            return false;
        }
        let now = self.now_us();
        if now > self.duration_us {
            self.finish_records(false);
            return false;
        }
        if let Err(message) = self.tick_at(now) {
            let t = now as f64 * 1e-6;
            log::error!("controller fault at t={t:.3}s: {message}");
            self.log.records.push(Record::Fault { t, message });
            self.finish_records(true);
            return false;
        }
        self.tick += 1;
        true
    }

    /// Runs to the end and returns the log.
    pub fn run(mut self) -> SessionLog {
        while self.step() {}
        self.into_log()
    }

    pub fn into_log(mut self) -> SessionLog {
        if !self.done {
            self.finish_records(false);
        }
        self.log
    }

    fn finish_records(&mut self, aborted: bool) {
        self.done = true;
        self.log.records.push(Record::End {
            t: self.now_us() as f64 * 1e-6,
            aborted,
            up: LinkAccount::of(&self.up),
            down: LinkAccount::of(&self.down),
            reassembly: self.leader_rx.stats,
            stale_commands: self.command_lw.stale,
            stale_wrenches: self.wrench_lw.stale,
            watchdog_trips: self.watchdog.trips,
            rtt_probes: self.prober.sent(),
        });
    }

    fn every(now: u64, rate_hz: f64) -> bool {
        let period = (1e6 / rate_hz).round() as u64;
        now.is_multiple_of(period)
    }

    fn tick_at(&mut self, now: u64) -> Result<(), String> {
        let t = now as f64 * 1e-6;
        self.leader_emit(now, t);
        self.cameras_emit(now);
        for d in self.up.poll(now) {
            self.follower_receive(d.at_us, d.datagram);
        }
        if self.watchdog.check(now) && self.clutch.engaged {
            // Freeze the desired pose where it is.
            self.clutch.release();
            self.desired.twist = Twist::zero();
            self.desired.accel = SpatialAccel::zero();
        }
        if self.watchdog.tripped() != self.watchdog_logged {
            self.watchdog_logged = self.watchdog.tripped();
            self.log.records.push(Record::Watchdog {
                t,
                tripped: self.watchdog_logged,
            });
        }
        self.control(now, t)?;
        if Self::every(now, WRENCH_RATE_HZ) {
            self.send_wrench(now, t);
        }
        for d in self.down.poll(now) {
            self.leader_receive(d.at_us, d.datagram);
        }
        if now > 0 && now.is_multiple_of(BANDWIDTH_WINDOW_US) {
            self.log_bandwidth(t);
        }
        Ok(())
    }

    fn leader_emit(&mut self, now: u64, t: f64) {
        if Self::every(now, COMMAND_RATE_HZ) && self.source.connected() {
            let s = self.source.sample(t);
            let cmd = self.leader.command(&s);
            self.log.records.push(Record::Command {
                t,
                seq: cmd.seq,
                phone: s.pose,
                clutch: s.clutch,
                hold: s.hold,
            });
            let frags = self
                .up_frag
                .fragment(StreamId::Command, cmd.seq, now, &encode_command(&cmd))
                .expect("command payload is non-empty");
            for d in frags {
                self.up.send(now, d);
            }
        }
        if Self::every(now, RTT_PROBE_RATE_HZ) {
            let p = self.prober.probe(now);
            for d in self
                .up_frag
                .fragment(StreamId::RttProbe, p.id, now, &p.to_bytes())
                .expect("probe payload is non-empty")
            {
                self.up.send(now, d);
            }
        }
    }

    fn cameras_emit(&mut self, now: u64) {
        let period = 1e6 / self.cfg.cameras.fps as f64;
        for (i, cam) in self.cameras.iter_mut().enumerate() {
            if (now as f64) + 1e-6 < cam.next_due_us {
                continue;
            }
            cam.next_due_us += period;
            let n = cam.frame;
            cam.frame += 1;
            let mut depth = cam.depth[n as usize % cam.depth.len()].clone();
            depth.restamp(n, now);
            let color = color_payload_model(n as u64, &cam.color);
            let slot = i as u8;
            let mut send = |stream: StreamId, bytes: &[u8]| {
                if bytes.is_empty() {
                    return;
                }
                for d in self.down_frag.fragment(stream, n, now, bytes).expect("non-empty frame") {
                    self.down.send(now, d);
                }
            };
            send(StreamId::Color(slot), &color);
            send(StreamId::Depth(slot), &depth.to_bytes());
        }
    }

    fn follower_receive(&mut self, at: u64, d: Datagram) {
        match d.stream {
            StreamId::Command => {
                let Ok(cmd) = decode_command(&d.payload) else { return };
                if !self.command_lw.accept(cmd.seq) {
                    return;
                }
                self.watchdog.on_command(at, cmd.clutch);
                let want = cmd.clutch && !self.watchdog.tripped();
                if want && !self.clutch.engaged {
                    self.clutch.engage_clutch(&cmd.pose).expect("clutch was released");
                } else if !want && self.clutch.engaged {
                    self.clutch.release();
                }
                if self.clutch.engaged {
                    self.clutch.update_command(&cmd.pose);
                    let r = self.clutch.velocity_rotation(&self.home);
                    self.desired = DesiredMotion {
                        pose: desired_tool_pose(&self.home, &self.clutch),
                        twist: cmd.twist.rotated(&r),
                        accel: cmd.accel.rotated(&r),
                    };
                } else {
                    self.desired.twist = Twist::zero();
                    self.desired.accel = SpatialAccel::zero();
                }
                self.last_apply_us = Some(at);
                self.log.records.push(Record::Apply {
                    t: at as f64 * 1e-6,
                    seq: cmd.seq,
                    latency_ms: (at as f64 * 1e-6 - cmd.t) * 1e3,
                    engaged: self.clutch.engaged,
                });
            }
            StreamId::RttProbe => {
                let Ok(mut p) = RttProbe::from_bytes(&d.payload) else { return };
                if p.echo {
                    return;
                }
                p.echo = true;
                for e in self
                    .down_frag
                    .fragment(StreamId::RttProbe, p.id, at, &p.to_bytes())
                    .expect("probe payload is non-empty")
                {
                    self.down.send(at, e);
                }
            }
            _ => log::debug!("unexpected stream {:?} on the leader→follower link", d.stream),
        }
    }

    fn control(&mut self, now: u64, t: f64) -> Result<(), String> {
        let dt = CONTROL_PERIOD_US as f64 * 1e-6;
        if self
            .last_apply_us
            .is_some_and(|last| now.saturating_sub(last) > FEEDFORWARD_HOLD_US)
        {
            self.desired.twist = Twist::zero();
            self.desired.accel = SpatialAccel::zero();
        }
        let terms = self.model.terms(&self.state.q, &self.state.qdot);
        let tau_hat = self
            .observer
            .update(&terms, &self.state.qdot, &self.tau_prev, dt)
            .map_err(|e| e.to_string())?
            .clone();
        let est = wrench_estimate(&terms.jacobian, &tau_hat);
        self.w_est = est.wrench;

        self.impulse.push(&self.state.qdot);
        match self.fsm.update(est.wrench.force.norm()) {
            ContactEdge::Made => {
                let delta = self.impulse.delta().unwrap_or_else(|| DVector::zeros(self.model.dof()));
                let raw = impulse_raw(&terms.jacobian, &terms.mass, &delta, self.cfg.haptics.impulse_map);
                let scale = impulse_scale(&self.model, &self.state.q, &self.cfg.haptics);
                let (unclamped, clamped) = impulse_intensity(raw, scale, &self.cfg.haptics);
                self.last_impulse = clamped as f32;
                self.log.records.push(Record::Contact {
                    t,
                    made: true,
                    impulse_raw: raw,
                    impulse: unclamped,
                });
            }
            ContactEdge::Broken => {
                self.last_impulse = 0.0;
                self.log.records.push(Record::Contact {
                    t,
                    made: false,
                    impulse_raw: 0.0,
                    impulse: 0.0,
                });
            }
            ContactEdge::None => {}
        }

        let out = self
            .controller
            .torque(&self.state, &terms, &self.desired)
            .map_err(|e| e.to_string())?;
        let tool_twist = terms.tool_twist(&self.state.qdot);
        let w_true = contact_wrench(&self.cfg.scene, &terms.kinematics.tool, &tool_twist);
        if self.tick.is_multiple_of(self.cfg.log.state_every as u64) {
            self.log.records.push(Record::State {
                t,
                q: self.state.q.iter().copied().collect(),
                qdot: self.state.qdot.iter().copied().collect(),
                tau: out.tau.iter().copied().collect(),
                w_true,
                w_est: est.wrench,
                low_confidence: est.low_confidence,
                desired: self.desired.pose,
                actual: terms.kinematics.tool,
                e: out.error.e.into(),
                k: out.stiffness.into(),
                saturated: out.saturated,
                engaged: self.clutch.engaged,
            });
        }
        self.state = self
            .model
            .step(&self.state, &out.tau, &w_true, dt)
            .map_err(|e| e.to_string())?;
        if !self.state.is_finite() {
            return Err("simulated state diverged".into());
        }
        self.tau_prev = out.tau;
        Ok(())
    }

    fn send_wrench(&mut self, now: u64, t: f64) {
        let msg = WrenchMsg {
            seq: self.wrench_seq,
            t,
            wrench: self.w_est,
            in_contact: self.fsm.in_contact,
            impulse: self.last_impulse,
        };
        self.wrench_seq = self.wrench_seq.wrapping_add(1);
        for d in self
            .down_frag
            .fragment(StreamId::Wrench, msg.seq, now, &encode_wrench(&msg))
            .expect("wrench payload is non-empty")
        {
            self.down.send(now, d);
        }
    }

    fn leader_receive(&mut self, at: u64, d: Datagram) {
        match d.stream {
            StreamId::Wrench => {
                let Ok(msg) = decode_wrench(&d.payload) else { return };
                if !self.wrench_lw.accept(msg.seq) {
                    return;
                }
                self.last_wrench = Some(msg);
                for ev in self.renderer.process(&msg) {
                    self.log.records.push(Record::Haptic(ev));
                    self.pending_haptics.push(ev);
                }
            }
            StreamId::RttProbe => {
                let Ok(p) = RttProbe::from_bytes(&d.payload) else { return };
                if let Some(rtt_ms) = self.prober.on_echo(at, &p) {
                    self.log.records.push(Record::Rtt {
                        t: at as f64 * 1e-6,
                        id: p.id,
                        rtt_ms,
                    });
                }
            }
            StreamId::Color(_) | StreamId::Depth(_) => {
                let Some(frame) = self.leader_rx.push(d) else { return };
                let (valid, sha) = match frame.stream {
                    StreamId::Depth(i) => {
                        let valid = CodedDepthFrame::from_bytes(&frame.data).is_ok();
                        let sha = self.cfg.log.blobs.then(|| {
                            let h = hex::encode(Sha256::digest(&frame.data));
                            self.log.blobs.entry(h.clone()).or_insert_with(|| frame.data.clone());
                            h
                        });
                        if self.keep_depth && valid {
                            self.latest_depth[i as usize] = Some(frame.data.clone());
                        }
                        (valid, sha)
                    }
                    _ => (true, None),
                };
                self.log.records.push(Record::Frame {
                    t: at as f64 * 1e-6,
                    stream: frame.stream.name(),
                    frame_id: frame.frame_id,
                    bytes: frame.data.len(),
                    latency_ms: (at - frame.timestamp_us) as f64 * 1e-3,
                    valid,
                    sha256: sha,
                });
            }
            StreamId::Command => log::debug!("unexpected command on the follower→leader link"),
        }
    }

    fn log_bandwidth(&mut self, t: f64) {
        let (us, ds) = (&self.up.stats, &self.down.stats);
        let diff = |a: [u64; 3], b: [u64; 3]| std::array::from_fn(|i| a[i] - b[i]);
        let rec = Record::Bandwidth {
            t,
            window_s: BANDWIDTH_WINDOW_US as f64 * 1e-6,
            up_bytes: diff(us.sent_bytes, self.window_up),
            down_bytes: diff(ds.sent_bytes, self.window_down),
            up_offered: diff(us.offered_bytes, self.window_up_offered),
            down_offered: diff(ds.offered_bytes, self.window_down_offered),
        };
        self.window_up = us.sent_bytes;
        self.window_down = ds.sent_bytes;
        self.window_up_offered = us.offered_bytes;
        self.window_down_offered = ds.offered_bytes;
        self.log.records.push(rec);
    }
}

fn build_cameras(cfg: &SessionConfig) -> Result<Vec<Camera>, SessionError> {
    let c = &cfg.cameras;
    if c.count == 0 {
        return Ok(Vec::new());
    }
    let frames: Vec<_> = (0..c.count * c.depth_variants)
        .map(|k| {
            synth_scene(&SceneParams {
                width: c.width,
                height: c.height,
                depth_scale: 0.001,
                plane_depth: c.plane_depth,
                plane_tilt: 0.3,
                boxes: c.boxes,
                noise_sigma: c.depth_noise_sigma,
                seed: stream_seed(cfg.seed, 100 + k as u64),
            })
        })
        .collect();
    let coded = encode_batch(&frames, Execution::default())?;
    let mut coded = coded.into_iter();
    Ok((0..c.count)
        .map(|i| Camera {
            next_due_us: 0.0,
            frame: 0,
            depth: coded.by_ref().take(c.depth_variants).collect(),
            color: ColorStreamConfig {
                seed: stream_seed(cfg.seed, 200 + i as u64),
                ..c.color.clone()
            },
        })
        .collect())
}

/// Runs a configured session to completion in virtual time.
pub fn run_session(cfg: SessionConfig) -> Result<SessionLog, SessionError> {
    Ok(Session::new(cfg)?.run())
}

/// Re-runs the session recorded in `log` and compares the bytes. Returns
/// the first differing line (1-based) if any.
pub fn replay(log: &SessionLog) -> Result<Option<usize>, SessionError> {
    let cfg = log
        .config()
        .cloned()
        .ok_or_else(|| SessionError::Log("log has no header".into()))?;
    if cfg.leader == LeaderConfig::Ui {
        return Err(SessionError::Config("live UI sessions cannot be replayed".into()));
    }
    let again = run_session(cfg)?;
    let a = log.to_jsonl();
    let b = again.to_jsonl();
    if a == b {
        return Ok(None);
    }
    let line = a
        .split(|c| *c == b'\n')
        .zip(b.split(|c| *c == b'\n'))
        .position(|(x, y)| x != y)
        .unwrap_or_else(|| a.iter().filter(|c| **c == b'\n').count().min(b.iter().filter(|c| **c == b'\n').count()));
    Ok(Some(line + 1))
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut s = Stat::default();
        let mut sum = 0.0;
        for v in values {
            s.count += 1;
            sum += v;
            s.max = if s.count == 1 { v } else { s.max.max(v) };
        }
        if s.count > 0 {
            s.mean = sum / s.count as f64;
        }
        s
    }
}

/// Session summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub duration_s: f64,
    pub aborted: bool,
    /// Steady-state leader→follower traffic (bytes on the line).
    pub up_mbps: f64,
    pub down_mbps: f64,
    pub down_video_mbps: f64,
    /// Video bytes the cameras produced, before the cap.
    pub down_video_offered_mbps: f64,
    pub depth_fps: f64,
    pub color_fps: f64,
    pub frame_latency_ms: Stat,
    pub invalid_frames: usize,
    pub command_latency_ms: Stat,
    /// RMS of desired minus actual tool position while clutched and free.
    pub tracking_rms_mm: f64,
    pub contact_force_true: Stat,
    pub contact_force_est: Stat,
    pub peak_force_true: f64,
    pub rtt: RttSummary,
    pub impulses: usize,
    pub cyclic: usize,
    pub leader_z_range: f64,
    pub desired_z_range: f64,
    pub actual_z_range: f64,
    pub clutch_engagements: usize,
    pub watchdog_trips: u32,
    pub datagrams_lost: u64,
    pub datagrams_overflow: u64,
    pub frames_discarded: u64,
}

fn range(values: impl IntoIterator<Item = f64>) -> f64 {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

pub fn metrics(log: &SessionLog) -> Metrics {
    let mut m = Metrics {
        aborted: log.aborted(),
        ..Metrics::default()
    };
    let recs = &log.records;
    let mut windows = Vec::new();
    let mut depth_frames = 0usize;
    let mut color_frames = 0usize;
    let mut depth_streams = std::collections::BTreeSet::new();
    let mut color_streams = std::collections::BTreeSet::new();
    let mut frame_lat = Vec::new();
    let mut cmd_lat = Vec::new();
    let mut track = (0.0, 0usize);
    let mut f_true = Vec::new();
    let mut f_est = Vec::new();
    let mut rtts = Vec::new();
    let mut leader_z = Vec::new();
    let mut desired_z = Vec::new();
    let mut actual_z = Vec::new();
    let mut last_engaged = false;
    let mut probes = 0u64;
    for r in recs {
        match r {
            Record::Command { t, phone, .. } => {
                leader_z.push(phone.translation.z);
                m.duration_s = m.duration_s.max(*t);
            }
            Record::Apply { latency_ms, engaged, .. } => {
                cmd_lat.push(*latency_ms);
                if *engaged && !last_engaged {
                    m.clutch_engagements += 1;
                }
                last_engaged = *engaged;
            }
            Record::State {
                t,
                w_true,
                w_est,
                desired,
                actual,
                engaged,
                ..
            } => {
                m.duration_s = m.duration_s.max(*t);
                desired_z.push(desired.translation.z);
                actual_z.push(actual.translation.z);
                let ft = w_true.force.norm();
                m.peak_force_true = m.peak_force_true.max(ft);
                if ft > 0.0 {
                    f_true.push(ft);
                    f_est.push(w_est.force.norm());
                } else if *engaged {
                    track.0 += (desired.translation - actual.translation).norm_squared();
                    track.1 += 1;
                }
            }
            Record::Haptic(ev) => match ev.kind {
                HapticKind::Impulse => m.impulses += 1,
                HapticKind::Cyclic => m.cyclic += 1,
            },
            Record::Rtt { rtt_ms, .. } => rtts.push(*rtt_ms),
            Record::Frame {
                stream,
                latency_ms,
                valid,
                ..
            } => {
                frame_lat.push(*latency_ms);
                if !valid {
                    m.invalid_frames += 1;
                }
                if stream.starts_with("depth") {
                    depth_frames += 1;
                    depth_streams.insert(stream.clone());
                } else {
                    color_frames += 1;
                    color_streams.insert(stream.clone());
                }
            }
            Record::Bandwidth { .. } => windows.push(r),
            Record::End {
                t,
                up,
                down,
                reassembly,
                watchdog_trips,
                rtt_probes,
                ..
            } => {
                probes = *rtt_probes as u64;
                m.duration_s = m.duration_s.max(*t);
                m.watchdog_trips = *watchdog_trips;
                m.datagrams_lost = up.lost + down.lost;
                m.datagrams_overflow = up.overflow_dropped + down.overflow_dropped;
                m.frames_discarded = reassembly.discarded;
            }
            _ => {}
        }
    }
    // Skip the start-up window when there is more than one.
    let steady: Vec<_> = if windows.len() > 1 { windows[1..].to_vec() } else { windows };
    if !steady.is_empty() {
        let mut secs = 0.0;
        let (mut up, mut down, mut video, mut offered) = (0u64, 0u64, 0u64, 0u64);
        for w in &steady {
            if let Record::Bandwidth {
                window_s,
                up_bytes,
                down_bytes,
                down_offered,
                ..
            } = w
            {
                secs += window_s;
                up += up_bytes.iter().sum::<u64>();
                down += down_bytes.iter().sum::<u64>();
                video += down_bytes[TrafficClass::Video.index()];
                offered += down_offered[TrafficClass::Video.index()];
            }
        }
        let mbps = |b: u64| b as f64 * 8.0 / secs / 1e6;
        m.up_mbps = mbps(up);
        m.down_mbps = mbps(down);
        m.down_video_mbps = mbps(video);
        m.down_video_offered_mbps = mbps(offered);
    }
    if m.duration_s > 0.0 {
        if !depth_streams.is_empty() {
            m.depth_fps = depth_frames as f64 / depth_streams.len() as f64 / m.duration_s;
        }
        if !color_streams.is_empty() {
            m.color_fps = color_frames as f64 / color_streams.len() as f64 / m.duration_s;
        }
    }
    m.frame_latency_ms = Stat::of(frame_lat);
    m.command_latency_ms = Stat::of(cmd_lat);
    if track.1 > 0 {
        m.tracking_rms_mm = (track.0 / track.1 as f64).sqrt() * 1e3;
    }
    m.contact_force_true = Stat::of(f_true);
    m.contact_force_est = Stat::of(f_est);
    m.rtt = RttSummary::from_samples(&rtts, probes.saturating_sub(rtts.len() as u64));
    m.leader_z_range = range(leader_z);
    m.desired_z_range = range(desired_z);
    m.actual_z_range = range(actual_z);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(leader: LeaderConfig) -> SessionConfig {
        SessionConfig {
            leader,
            channel: ChannelConfig {
                profile: "ideal".into(),
                ..Default::default()
            },
            cameras: CameraSetConfig {
                count: 0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = SessionConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(SessionConfig::from_toml_str(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SessionConfig::default();
        cfg.cameras.fps = 25;
        assert!(matches!(cfg.validate(), Err(SessionError::Config(_))));
        let mut cfg = SessionConfig::default();
        cfg.leader = LeaderConfig::Script {
            path: "/nonexistent/trajectory.jsonl".into(),
        };
        assert!(cfg.validate().is_err());
        let mut cfg = SessionConfig::default();
        cfg.channel.profile = "carrier-pigeon".into();
        assert!(cfg.validate().unwrap_err().is_config());
        assert!(SessionConfig::from_toml_str("unknown_key = 3").is_err());
    }

    #[test]
    fn idle_session_holds_home() {
        let mut cfg = quiet(LeaderConfig::Idle);
        cfg.duration = 0.5;
        let log = run_session(cfg).unwrap();
        let m = metrics(&log);
        assert!(!m.aborted);
        assert_eq!(m.clutch_engagements, 0);
        assert!(m.actual_z_range < 1e-3, "{}", m.actual_z_range);
        assert_eq!(m.impulses + m.cyclic, 0);
    }

    #[test]
    fn empty_log_gives_zero_metrics() {
        assert_eq!(metrics(&SessionLog::default()), Metrics::default());
    }

    #[test]
    fn log_roundtrips_and_accounts_for_datagrams() {
        let mut cfg = quiet(LeaderConfig::Descent {
            depth: 0.05,
            duration: 0.5,
            hold: 0.2,
        });
        cfg.channel.profile = "wifi".into();
        cfg.channel.loss = Some(0.01);
        cfg.cameras.count = 1;
        cfg.cameras.width = 160;
        cfg.cameras.height = 120;
        cfg.log.state_every = 10;
        let log = run_session(cfg).unwrap();
        let bytes = log.to_jsonl();
        let back = SessionLog::read(&bytes[..]).unwrap();
        assert_eq!(back.to_jsonl(), bytes);
        let Some(Record::End { up, down, .. }) = log.records.last() else {
            panic!("log must end with an end record")
        };
        assert!(up.balanced() && down.balanced(), "{up:?} {down:?}");
        assert!(up.lost + down.lost > 0);
    }

    #[test]
    fn descent_into_floor_shows_contact_and_haptics() {
        let cfg_ctl = ImpedanceConfig::default();
        // Command the saturation knee below the floor surface.
        let knee = crate::controller::saturation_peak().0 * cfg_ctl.f_max[2] / cfg_ctl.k_nom[2];
        let gap = 0.05;
        let mut cfg = quiet(LeaderConfig::Descent {
            depth: gap + knee,
            duration: 1.0,
            hold: 1.5,
        });
        let model = RobotModel::franka_like();
        let home = model.tool_pose(&model.rest_posture());
        cfg.scene.planes.push(crate::dynamics::HalfSpace::floor(home.translation.z - gap, 2e4, 200.0));
        let log = run_session(cfg.clone()).unwrap();
        let m = metrics(&log);
        assert!(!m.aborted);
        assert_eq!(m.impulses, 1, "{m:?}");
        assert!(m.cyclic >= 10, "{m:?}");
        let bound = crate::controller::force_bound(&cfg.controller)[2];
        let tail: Vec<f64> = log
            .records
            .iter()
            .filter_map(|r| match r {
                Record::State { t, w_true, .. } if *t > 2.5 => Some(w_true.force.norm()),
                _ => None,
            })
            .collect();
        let plateau = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(plateau > 0.9 * bound && plateau <= 1.1 * bound, "plateau {plateau} bound {bound}");
        let first_contact = log
            .records
            .iter()
            .find_map(|r| match r {
                Record::State { t, w_true, .. } if w_true.force.norm() > 0.0 => Some(*t),
                _ => None,
            })
            .unwrap();
        for r in &log.records {
            if let Record::Haptic(ev) = r {
                assert!(ev.t >= first_contact);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut cfg = quiet(LeaderConfig::Random { max_jump: 0.3 });
        cfg.duration = 0.6;
        cfg.channel.profile = "5g-nsa".into();
        cfg.cameras.count = 2;
        cfg.cameras.width = 64;
        cfg.cameras.height = 48;
        let a = run_session(cfg.clone()).unwrap();
        assert_eq!(replay(&a).unwrap(), None);
        cfg.seed += 1;
        let b = run_session(cfg).unwrap();
        assert_ne!(a.to_jsonl(), b.to_jsonl());
    }
}
