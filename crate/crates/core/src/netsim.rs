//! Datagram framing and fragmentation, a deterministic lossy link with
//! class-based priority shaping, reassembly, latest-wins sequencing, the
//! command watchdog and RTT probing.
//!
//! # Datagram header
//!
//! 27 bytes, little-endian:
//!
//! | offset | size | field          |
//! |-------:|-----:|----------------|
//! | 0      | 2    | magic `0x5444` |
//! | 2      | 1    | version (1)    |
//! | 3      | 1    | stream id      |
//! | 4      | 1    | traffic class  |
//! | 5      | 4    | sequence       |
//! | 9      | 4    | frame id       |
//! | 13     | 2    | fragment index |
//! | 15     | 2    | fragment count |
//! | 17     | 8    | timestamp (µs) |
//! | 25     | 2    | payload length |
//!
//! Stream ids: command 0, wrench 1, RTT probe 2, color 3..=6, depth 7..=10.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::geometry::{SpatialAccel, Transform, Twist, Wrench};
use crate::haptics::WrenchMsg;
use crate::leader::CommandMsg;
use crate::par::{self, Execution};

pub const MAGIC: u16 = 0x5444;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 27;
pub const MAX_PAYLOAD: usize = 1200;
pub const WATCHDOG_TIMEOUT_US: u64 = 100_000;
pub const CAMERA_SLOTS: u8 = 4;
/// Probability mass placed at the minimum latency by the profile fit.
pub const LATENCY_FLOOR_MASS: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("empty payload")]
    EmptyPayload,
    #[error("frame of {0} bytes needs more than 65535 fragments")]
    FrameTooLarge(usize),
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("unknown stream id {0}")]
    UnknownStream(u8),
    #[error("unknown traffic class {0}")]
    UnknownClass(u8),
    #[error("fragment {index} of {count} is invalid")]
    BadFragment { index: u16, count: u16 },
    #[error("payload of {0} bytes exceeds the datagram limit")]
    PayloadTooLarge(usize),
    #[error("unknown channel profile {0:?}")]
    UnknownProfile(String),
    #[error("invalid channel parameters: {0}")]
    InvalidChannel(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrafficClass {
    Control = 0,
    Feedback = 1,
    Video = 2,
}

impl TrafficClass {
    pub const ALL: [TrafficClass; 3] = [TrafficClass::Control, TrafficClass::Feedback, TrafficClass::Video];

    pub fn from_u8(v: u8) -> Result<Self, NetError> {
        match v {
            0 => Ok(TrafficClass::Control),
            1 => Ok(TrafficClass::Feedback),
            2 => Ok(TrafficClass::Video),
            _ => Err(NetError::UnknownClass(v)),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StreamId {
    Command,
    Wrench,
    RttProbe,
    Color(u8),
    Depth(u8),
}

impl StreamId {
    pub const COUNT: usize = 3 + 2 * CAMERA_SLOTS as usize;

    pub fn to_u8(self) -> u8 {
        match self {
            StreamId::Command => 0,
            StreamId::Wrench => 1,
            StreamId::RttProbe => 2,
            StreamId::Color(i) => 3 + i,
            StreamId::Depth(i) => 3 + CAMERA_SLOTS + i,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, NetError> {
        match v {
            0 => Ok(StreamId::Command),
            1 => Ok(StreamId::Wrench),
            2 => Ok(StreamId::RttProbe),
            3..=6 => Ok(StreamId::Color(v - 3)),
            7..=10 => Ok(StreamId::Depth(v - 7)),
            _ => Err(NetError::UnknownStream(v)),
        }
    }

    pub fn class(self) -> TrafficClass {
        match self {
            StreamId::Command | StreamId::RttProbe => TrafficClass::Control,
            StreamId::Wrench => TrafficClass::Feedback,
            StreamId::Color(_) | StreamId::Depth(_) => TrafficClass::Video,
        }
    }

    pub fn name(self) -> String {
        match self {
            StreamId::Command => "command".into(),
            StreamId::Wrench => "wrench".into(),
            StreamId::RttProbe => "rtt".into(),
            StreamId::Color(i) => format!("color{i}"),
            StreamId::Depth(i) => format!("depth{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Datagram {
    pub stream: StreamId,
    pub class: TrafficClass,
    pub seq: u32,
    pub frame_id: u32,
    pub frag_index: u16,
    pub frag_count: u16,
    pub timestamp_us: u64,
    pub payload: Vec<u8>,
}

impl Datagram {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.wire_len());
        b.extend_from_slice(&MAGIC.to_le_bytes());
        b.push(VERSION);
        b.push(self.stream.to_u8());
        b.push(self.class as u8);
        b.extend_from_slice(&self.seq.to_le_bytes());
        b.extend_from_slice(&self.frame_id.to_le_bytes());
        b.extend_from_slice(&self.frag_index.to_le_bytes());
        b.extend_from_slice(&self.frag_count.to_le_bytes());
        b.extend_from_slice(&self.timestamp_us.to_le_bytes());
        b.extend_from_slice(&(self.payload.len() as u16).to_le_bytes());
        b.extend_from_slice(&self.payload);
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, NetError> {
        if b.len() < HEADER_LEN {
            return Err(NetError::Truncated {
                need: HEADER_LEN,
                have: b.len(),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let magic = u16_at(0);
        if magic != MAGIC {
            return Err(NetError::BadMagic(magic));
        }
        if b[2] != VERSION {
            return Err(NetError::UnsupportedVersion(b[2]));
        }
        let stream = StreamId::from_u8(b[3])?;
        let class = TrafficClass::from_u8(b[4])?;
        let (frag_index, frag_count) = (u16_at(13), u16_at(15));
        if frag_count == 0 || frag_index >= frag_count {
            return Err(NetError::BadFragment {
                index: frag_index,
                count: frag_count,
            });
        }
        let len = u16_at(25) as usize;
        if len > MAX_PAYLOAD {
            return Err(NetError::PayloadTooLarge(len));
        }
        if b.len() < HEADER_LEN + len {
            return Err(NetError::Truncated {
                need: HEADER_LEN + len,
                have: b.len(),
            });
        }
        Ok(Datagram {
            stream,
            class,
            seq: u32_at(5),
            frame_id: u32_at(9),
            frag_index,
            frag_count,
            timestamp_us: u64::from_le_bytes(b[17..25].try_into().unwrap()),
            payload: b[HEADER_LEN..HEADER_LEN + len].to_vec(),
        })
    }
}

/// Splits frames into datagrams and numbers them per stream.
#[derive(Clone, Debug, Default)]
pub struct Fragmenter {
    seq: [u32; StreamId::COUNT],
}

impl Fragmenter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fragment(
        &mut self,
        stream: StreamId,
        frame_id: u32,
        timestamp_us: u64,
        data: &[u8],
    ) -> Result<Vec<Datagram>, NetError> {
        if data.is_empty() {
            return Err(NetError::EmptyPayload);
        }
        let count = data.len().div_ceil(MAX_PAYLOAD);
        if count > u16::MAX as usize {
            return Err(NetError::FrameTooLarge(data.len()));
        }
        let seq = &mut self.seq[stream.to_u8() as usize];
        Ok(data
            .chunks(MAX_PAYLOAD)
            .enumerate()
            .map(|(i, chunk)| {
                let d = Datagram {
                    stream,
                    class: stream.class(),
                    seq: *seq,
                    frame_id,
                    frag_index: i as u16,
                    frag_count: count as u16,
                    timestamp_us,
                    payload: chunk.to_vec(),
                };
                *seq = seq.wrapping_add(1);
                d
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
struct Partial {
    count: u16,
    received: usize,
    bytes: usize,
    frags: Vec<Option<Vec<u8>>>,
    timestamp_us: u64,
}

/// A frame whose fragments all arrived.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub stream: StreamId,
    pub frame_id: u32,
    pub timestamp_us: u64,
    pub data: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReassemblyStats {
    pub completed: u64,
    pub discarded: u64,
    pub duplicates: u64,
    pub stale: u64,
}

/// Collects fragments per stream and frame. A frame is delivered only when
/// complete; older incomplete frames of the same stream are dropped once a
/// newer frame completes.
#[derive(Clone, Debug, Default)]
pub struct Reassembler {
    partial: BTreeMap<(u8, u32), Partial>,
    last_complete: [Option<u32>; StreamId::COUNT],
    pub stats: ReassemblyStats,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }

    pub fn push(&mut self, d: Datagram) -> Option<Frame> {
        let s = d.stream.to_u8();
        if self.last_complete[s as usize].is_some_and(|last| d.frame_id <= last) {
            self.stats.stale += 1;
            return None;
        }
        let key = (s, d.frame_id);
        let p = self.partial.entry(key).or_insert_with(|| Partial {
            count: d.frag_count,
            received: 0,
            bytes: 0,
            frags: vec![None; d.frag_count as usize],
            timestamp_us: d.timestamp_us,
        });
        if p.count != d.frag_count || p.frags[d.frag_index as usize].is_some() {
            self.stats.duplicates += 1;
            return None;
        }
        p.received += 1;
        p.bytes += d.payload.len();
        p.frags[d.frag_index as usize] = Some(d.payload);
        if p.received < p.count as usize {
            return None;
        }
        let p = self.partial.remove(&key).expect("present");
        let mut data = Vec::with_capacity(p.bytes);
        for f in p.frags.into_iter().flatten() {
            data.extend_from_slice(&f);
        }
        let older: Vec<_> = self.partial.range((s, 0)..(s, d.frame_id)).map(|(k, _)| *k).collect();
        self.stats.discarded += older.len() as u64;
        for k in older {
            self.partial.remove(&k);
        }
        self.last_complete[s as usize] = Some(d.frame_id);
        self.stats.completed += 1;
        Some(Frame {
            stream: d.stream,
            frame_id: d.frame_id,
            timestamp_us: p.timestamp_us,
            data,
        })
    }
}

/// Accepts only sequence numbers newer than the last accepted one
/// (wrapping comparison).
#[derive(Clone, Copy, Debug, Default)]
pub struct LatestWins {
    last: Option<u32>,
    pub stale: u64,
}

impl LatestWins {
    pub fn accept(&mut self, seq: u32) -> bool {
        let newer = self.last.is_none_or(|last| (seq.wrapping_sub(last) as i32) > 0);
        if newer {
            self.last = Some(seq);
        } else {
            self.stale += 1;
        }
        newer
    }

    pub fn last(&self) -> Option<u32> {
        self.last
    }
}

/// One-way latency: a log-normal clamped to `[lo, hi]` ms. The fit puts
/// [`LATENCY_FLOOR_MASS`] of probability at `lo` and chooses σ so the
/// clamped mean hits the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub lo_ms: f64,
    pub hi_ms: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl LatencyModel {
    pub fn fixed(ms: f64) -> Self {
        LatencyModel {
            lo_ms: ms,
            hi_ms: ms,
            mu: ms.max(f64::MIN_POSITIVE).ln(),
            sigma: 0.0,
        }
    }

    pub fn fit(min_ms: f64, mean_ms: f64, max_ms: f64) -> Result<Self, NetError> {
        if !(min_ms >= 0.0 && min_ms <= mean_ms && mean_ms <= max_ms && max_ms.is_finite()) {
            return Err(NetError::InvalidChannel(format!(
                "latency triple {min_ms}/{mean_ms}/{max_ms} must satisfy 0 <= min <= mean <= max"
            )));
        }
        if max_ms - min_ms < 1e-9 || mean_ms - min_ms < 1e-9 {
            return Ok(Self::fixed(min_ms));
        }
        if min_ms <= 0.0 {
            return Err(NetError::InvalidChannel("a spread latency needs a positive minimum".into()));
        }
        if max_ms - mean_ms < 1e-9 {
            return Err(NetError::InvalidChannel("mean must lie below max".into()));
        }
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(LATENCY_FLOOR_MASS);
        let model = |sigma: f64| LatencyModel {
            lo_ms: min_ms,
            hi_ms: max_ms,
            mu: min_ms.ln() - sigma * z,
            sigma,
        };
        let (mut a, mut b) = (1e-6, 20.0);
        if model(b).mean() < mean_ms {
            return Err(NetError::InvalidChannel("mean too close to max for the fit".into()));
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if model(m).mean() < mean_ms {
                a = m;
            } else {
                b = m;
            }
        }
        Ok(model(0.5 * (a + b)))
    }

    /// Mean of the clamped distribution.
    pub fn mean(&self) -> f64 {
        if self.sigma == 0.0 {
            return self.lo_ms;
        }
        let n = Normal::new(0.0, 1.0).unwrap();
        let (s, mu) = (self.sigma, self.mu);
        let za = (self.lo_ms.ln() - mu) / s;
        let zb = (self.hi_ms.ln() - mu) / s;
        let middle = (mu + s * s / 2.0).exp() * (n.cdf(zb - s) - n.cdf(za - s));
        self.lo_ms * n.cdf(za) + self.hi_ms * (1.0 - n.cdf(zb)) + middle
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return self.lo_ms;
        }
        let z: f64 = StandardNormal.sample(rng);
        (self.mu + self.sigma * z).exp().clamp(self.lo_ms, self.hi_ms)
    }
}

/// Named channel preset. Latency figures are round-trip; each direction
/// gets half.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub name: String,
    pub rtt_ms: [f64; 3],
    pub loss: f64,
    pub reorder_prob: f64,
    pub reorder_extra_ms: f64,
}

impl ChannelProfile {
    pub fn preset(name: &str) -> Result<Self, NetError> {
        let (rtt_ms, loss) = match name {
            "wifi" => ([5.0, 20.0, 60.0], 0.001),
            "5g-nsa" => ([40.0, 66.0, 84.0], 0.001),
            "ideal" => ([0.0, 0.0, 0.0], 0.0),
            _ => return Err(NetError::UnknownProfile(name.to_owned())),
        };
        Ok(ChannelProfile {
            name: name.to_owned(),
            rtt_ms,
            loss,
            reorder_prob: 0.0,
            reorder_extra_ms: 0.0,
        })
    }

    pub fn one_way(&self) -> Result<LatencyModel, NetError> {
        let [a, b, c] = self.rtt_ms;
        LatencyModel::fit(a / 2.0, b / 2.0, c / 2.0)
    }
}

/// Parameters of one link direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub latency: LatencyModel,
    pub loss: f64,
    pub reorder_prob: f64,
    pub reorder_extra_ms: f64,
    /// Serialization rate; 0 disables serialization delay.
    pub line_rate_mbps: f64,
    /// Video token-bucket rate; 0 disables the cap.
    pub video_cap_mbps: f64,
    pub video_burst_bytes: f64,
    /// Video backlog above which whole frames are dropped, oldest first.
    pub video_queue_bytes: usize,
}

impl LinkParams {
    pub fn ideal() -> Self {
        LinkParams {
            latency: LatencyModel::fixed(0.0),
            loss: 0.0,
            reorder_prob: 0.0,
            reorder_extra_ms: 0.0,
            line_rate_mbps: 0.0,
            video_cap_mbps: 0.0,
            video_burst_bytes: 0.0,
            video_queue_bytes: usize::MAX,
        }
    }

    pub fn from_profile(p: &ChannelProfile) -> Result<Self, NetError> {
        Ok(LinkParams {
            latency: p.one_way()?,
            loss: p.loss,
            reorder_prob: p.reorder_prob,
            reorder_extra_ms: p.reorder_extra_ms,
            ..Self::ideal()
        })
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.loss) || !prob(self.reorder_prob) {
            return Err(NetError::InvalidChannel("probabilities must lie in [0, 1]".into()));
        }
        if self.line_rate_mbps < 0.0 || self.video_cap_mbps < 0.0 || self.reorder_extra_ms < 0.0 {
            return Err(NetError::InvalidChannel("rates and delays must be non-negative".into()));
        }
        if self.video_cap_mbps > 0.0 && self.video_burst_bytes < (HEADER_LEN + MAX_PAYLOAD) as f64 {
            return Err(NetError::InvalidChannel("video burst must hold one full datagram".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub at_us: u64,
    pub datagram: Datagram,
}

struct InFlight {
    at_us: u64,
    order: u64,
    datagram: Datagram,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        (self.at_us, self.order) == (other.at_us, other.order)
    }
}
impl Eq for InFlight {}
impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at_us, self.order).cmp(&(other.at_us, other.order))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LinkStats {
    /// Wire bytes handed to the link, per class.
    pub offered_bytes: [u64; 3],
    pub offered_packets: [u64; 3],
    /// Wire bytes put on the line, per class.
    pub sent_bytes: [u64; 3],
    pub sent_packets: [u64; 3],
    pub delivered_bytes: [u64; 3],
    pub delivered_packets: [u64; 3],
    pub lost_packets: u64,
    pub overflow_frames: u64,
    pub overflow_packets: u64,
}

struct Queued {
    enq_us: f64,
    datagram: Datagram,
}

/// One direction of the channel: strict-priority shaper (control, then
/// feedback, then token-bucket-capped video) feeding a serializing line,
/// followed by independent per-packet loss and latency.
pub struct Link {
    params: LinkParams,
    rng: ChaCha8Rng,
    queues: [VecDeque<Queued>; 3],
    video_queue_bytes: usize,
    busy_until: f64,
    tokens: f64,
    token_time: f64,
    in_flight: BinaryHeap<Reverse<InFlight>>,
    order: u64,
    pub stats: LinkStats,
}

impl Link {
    pub fn new(params: LinkParams, seed: u64) -> Result<Self, NetError> {
        params.validate()?;
        Ok(Link {
            tokens: params.video_burst_bytes,
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queues: Default::default(),
            video_queue_bytes: 0,
            busy_until: 0.0,
            token_time: 0.0,
            in_flight: BinaryHeap::new(),
            order: 0,
            stats: LinkStats::default(),
        })
    }

    pub fn params(&self) -> &LinkParams {
        &self.params
    }

    pub fn queued(&self, class: TrafficClass) -> usize {
        self.queues[class.index()].len()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Datagrams still waiting in the shaper queues.
    pub fn queued_total(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn send(&mut self, now_us: u64, d: Datagram) {
        let now = now_us as f64;
        self.run_shaper(now);
        let c = d.class.index();
        let len = d.wire_len();
        self.stats.offered_bytes[c] += len as u64;
        self.stats.offered_packets[c] += 1;
        if d.class == TrafficClass::Video {
            while self.video_queue_bytes + len > self.params.video_queue_bytes {
                if !self.drop_oldest_video_frame() {
                    break;
                }
            }
            self.video_queue_bytes += len;
        }
        self.queues[c].push_back(Queued { enq_us: now, datagram: d });
    }

    fn drop_oldest_video_frame(&mut self) -> bool {
        let q = &mut self.queues[TrafficClass::Video.index()];
        let Some(front) = q.front() else { return false };
        let key = (front.datagram.stream, front.datagram.frame_id);
        let before = q.len();
        let mut freed = 0;
        q.retain(|e| {
            let hit = (e.datagram.stream, e.datagram.frame_id) == key;
            if hit {
                freed += e.datagram.wire_len();
            }
            !hit
        });
        self.video_queue_bytes -= freed;
        self.stats.overflow_frames += 1;
        self.stats.overflow_packets += (before - q.len()) as u64;
        true
    }

    fn token_rate(&self) -> f64 {
        // bytes per µs
        self.params.video_cap_mbps / 8.0
    }

    fn token_ready(&self, size: f64) -> f64 {
        if self.tokens >= size {
            self.token_time
        } else {
            self.token_time + (size - self.tokens) / self.token_rate()
        }
    }

    fn refill(&mut self, t: f64) {
        let rate = self.token_rate();
        self.tokens = (self.tokens + rate * (t - self.token_time)).min(self.params.video_burst_bytes);
        self.token_time = t;
    }

    fn run_shaper(&mut self, now: f64) {
        let capped = self.params.video_cap_mbps > 0.0;
        loop {
            let mut best: Option<(f64, usize)> = None;
            for (c, q) in self.queues.iter().enumerate() {
                let Some(front) = q.front() else { continue };
                let mut start = self.busy_until.max(front.enq_us);
                if c == TrafficClass::Video.index() && capped {
                    start = start.max(self.token_ready(front.datagram.wire_len() as f64));
                }
                if best.is_none_or(|(b, _)| start < b) {
                    best = Some((start, c));
                }
            }
            let Some((start, c)) = best else { break };
            if start > now {
                break;
            }
            let Queued { datagram, .. } = self.queues[c].pop_front().expect("non-empty");
            let len = datagram.wire_len();
            if c == TrafficClass::Video.index() {
                self.video_queue_bytes -= len;
                if capped {
                    self.refill(start);
                    self.tokens -= len as f64;
                }
            }
            let ser = if self.params.line_rate_mbps > 0.0 {
                len as f64 * 8.0 / self.params.line_rate_mbps
            } else {
                0.0
            };
            self.busy_until = start + ser;
            self.stats.sent_bytes[c] += len as u64;
            self.stats.sent_packets[c] += 1;
            if self.params.loss > 0.0 && self.rng.random_bool(self.params.loss) {
                self.stats.lost_packets += 1;
                continue;
            }
            let mut latency_ms = self.params.latency.sample(&mut self.rng);
            if self.params.reorder_prob > 0.0 && self.rng.random_bool(self.params.reorder_prob) {
                latency_ms += self.rng.random_range(0.0..=self.params.reorder_extra_ms);
            }
            let at_us = (self.busy_until + latency_ms * 1000.0).ceil() as u64;
            self.order += 1;
            self.in_flight.push(Reverse(InFlight {
                at_us,
                order: self.order,
                datagram,
            }));
        }
    }

    /// Runs the link up to `now_us` and returns arrivals in time order.
    pub fn poll(&mut self, now_us: u64) -> Vec<Delivery> {
        self.run_shaper(now_us as f64);
        let mut out = Vec::new();
        while self.in_flight.peek().is_some_and(|Reverse(f)| f.at_us <= now_us) {
            let Reverse(f) = self.in_flight.pop().expect("peeked");
            let c = f.datagram.class.index();
            self.stats.delivered_bytes[c] += f.datagram.wire_len() as u64;
            self.stats.delivered_packets[c] += 1;
            out.push(Delivery {
                at_us: f.at_us,
                datagram: f.datagram,
            });
        }
        out
    }
}

/// Stops following the leader when commands stop arriving for longer than
/// the timeout. Once tripped it stays tripped until the operator releases
/// and re-engages the clutch.
#[derive(Clone, Debug)]
pub struct Watchdog {
    pub timeout_us: u64,
    last_rx: Option<u64>,
    tripped: bool,
    saw_release: bool,
    pub trips: u32,
}

impl Default for Watchdog {
    fn default() -> Self {
        Watchdog {
            timeout_us: WATCHDOG_TIMEOUT_US,
            last_rx: None,
            tripped: false,
            saw_release: false,
            trips: 0,
        }
    }
}

impl Watchdog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tripped(&self) -> bool {
        self.tripped
    }

    pub fn last_rx(&self) -> Option<u64> {
        self.last_rx
    }

    /// Returns whether the clutch must be forced open at `now_us`.
    pub fn check(&mut self, now_us: u64) -> bool {
        if let Some(last) = self.last_rx {
            if !self.tripped && now_us.saturating_sub(last) > self.timeout_us {
                self.tripped = true;
                self.saw_release = false;
                self.trips += 1;
            }
        }
        self.tripped
    }

    pub fn on_command(&mut self, now_us: u64, clutch: bool) {
        self.check(now_us);
        self.last_rx = Some(now_us);
        if self.tripped {
            if !clutch {
                self.saw_release = true;
            } else if self.saw_release {
                self.tripped = false;
                self.saw_release = false;
            }
        }
    }
}

/// Application-level echo probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RttProbe {
    pub id: u32,
    pub origin_us: u64,
    pub echo: bool,
}

pub const RTT_PROBE_LEN: usize = 13;

impl RttProbe {
    pub fn to_bytes(&self) -> [u8; RTT_PROBE_LEN] {
        let mut b = [0u8; RTT_PROBE_LEN];
        b[0..4].copy_from_slice(&self.id.to_le_bytes());
        b[4..12].copy_from_slice(&self.origin_us.to_le_bytes());
        b[12] = self.echo as u8;
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, NetError> {
        need(b, RTT_PROBE_LEN)?;
        Ok(RttProbe {
            id: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            origin_us: u64::from_le_bytes(b[4..12].try_into().unwrap()),
            echo: b[12] != 0,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RttSummary {
    pub samples: usize,
    pub lost: u64,
    pub min_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
}

impl RttSummary {
    pub fn from_samples(samples: &[f64], lost: u64) -> Self {
        if samples.is_empty() {
            return RttSummary {
                lost,
                ..Default::default()
            };
        }
        RttSummary {
            samples: samples.len(),
            lost,
            min_ms: samples.iter().cloned().fold(f64::INFINITY, f64::min),
            mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
            max_ms: samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Leader-side probe bookkeeping.
#[derive(Clone, Debug, Default)]
pub struct RttProber {
    next_id: u32,
    samples: Vec<f64>,
}

impl RttProber {
    pub fn probe(&mut self, now_us: u64) -> RttProbe {
        let p = RttProbe {
            id: self.next_id,
            origin_us: now_us,
            echo: false,
        };
        self.next_id = self.next_id.wrapping_add(1);
        p
    }

    /// Records an echoed probe and returns the RTT in ms.
    pub fn on_echo(&mut self, now_us: u64, p: &RttProbe) -> Option<f64> {
        if !p.echo || now_us < p.origin_us {
            return None;
        }
        let rtt = (now_us - p.origin_us) as f64 / 1000.0;
        self.samples.push(rtt);
        Some(rtt)
    }

    pub fn sent(&self) -> u32 {
        self.next_id
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn summary(&self) -> RttSummary {
        let lost = (self.next_id as u64).saturating_sub(self.samples.len() as u64);
        RttSummary::from_samples(&self.samples, lost)
    }
}

/// Sends `count` probes every `interval_us` over `forward`, echoes each on
/// arrival over `backward`, and summarizes the round trips.
pub fn measure_rtt(forward: &mut Link, backward: &mut Link, count: u32, interval_us: u64) -> RttSummary {
    probe_round_trips(forward, backward, count, interval_us).summary()
}

/// Independent RTT measurements over `runs` freshly seeded link pairs,
/// pooled into one summary. The result does not depend on `exec`.
pub fn rtt_monte_carlo(
    params: &LinkParams,
    runs: usize,
    probes_per_run: u32,
    interval_us: u64,
    seed: u64,
    exec: Execution,
) -> Result<RttSummary, NetError> {
    params.validate()?;
    let per_run = par::map_range(exec, runs, |r| {
        let run_seed = seed ^ (r as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut fwd = Link::new(params.clone(), run_seed)?;
        let mut back = Link::new(params.clone(), run_seed.rotate_left(32) ^ 0xa5a5)?;
        Ok(probe_round_trips(&mut fwd, &mut back, probes_per_run, interval_us))
    });
    let mut samples = Vec::new();
    let mut lost = 0;
    for prober in per_run {
        let prober: RttProber = prober?;
        let s = prober.summary();
        lost += s.lost;
        samples.extend_from_slice(prober.samples());
    }
    Ok(RttSummary::from_samples(&samples, lost))
}

fn probe_round_trips(forward: &mut Link, backward: &mut Link, count: u32, interval_us: u64) -> RttProber {
    let mut frag = Fragmenter::new();
    let mut prober = RttProber::default();
    for i in 0..count {
        let t = i as u64 * interval_us;
        let p = prober.probe(t);
        for d in frag.fragment(StreamId::RttProbe, p.id, t, &p.to_bytes()).expect("non-empty") {
            forward.send(t, d);
        }
    }
    let horizon = count as u64 * interval_us + 10_000_000;
    for del in forward.poll(horizon) {
        let Ok(mut p) = RttProbe::from_bytes(&del.datagram.payload) else { continue };
        p.echo = true;
        for d in frag.fragment(StreamId::RttProbe, p.id, del.at_us, &p.to_bytes()).expect("non-empty") {
            backward.send(del.at_us, d);
        }
    }
    for del in backward.poll(2 * horizon) {
        if let Ok(p) = RttProbe::from_bytes(&del.datagram.payload) {
            prober.on_echo(del.at_us, &p);
        }
    }
    prober
}

fn need(b: &[u8], n: usize) -> Result<(), NetError> {
    if b.len() < n {
        Err(NetError::Truncated { need: n, have: b.len() })
    } else {
        Ok(())
    }
}

pub const COMMAND_WIRE_LEN: usize = 4 + 8 + Transform::WIRE_LEN + 2 * Twist::WIRE_LEN + 1;
pub const WRENCH_WIRE_LEN: usize = 4 + 8 + Wrench::WIRE_LEN + 1 + 4;

pub fn encode_command(c: &CommandMsg) -> Vec<u8> {
    let mut b = Vec::with_capacity(COMMAND_WIRE_LEN);
    b.extend_from_slice(&c.seq.to_le_bytes());
    b.extend_from_slice(&c.t.to_le_bytes());
    b.extend_from_slice(&c.pose.to_le_bytes());
    b.extend_from_slice(&c.twist.to_le_bytes());
    b.extend_from_slice(&c.accel.to_le_bytes());
    b.push(c.clutch as u8);
    b
}

pub fn decode_command(b: &[u8]) -> Result<CommandMsg, NetError> {
    need(b, COMMAND_WIRE_LEN)?;
    let p = 12 + Transform::WIRE_LEN;
    let q = p + Twist::WIRE_LEN;
    Ok(CommandMsg {
        seq: u32::from_le_bytes(b[0..4].try_into().unwrap()),
        t: f64::from_le_bytes(b[4..12].try_into().unwrap()),
        pose: Transform::from_le_bytes(b[12..p].try_into().unwrap()),
        twist: Twist::from_le_bytes(b[p..q].try_into().unwrap()),
        accel: SpatialAccel::from_le_bytes(b[q..q + SpatialAccel::WIRE_LEN].try_into().unwrap()),
        clutch: b[COMMAND_WIRE_LEN - 1] != 0,
    })
}

pub fn encode_wrench(m: &WrenchMsg) -> Vec<u8> {
    let mut b = Vec::with_capacity(WRENCH_WIRE_LEN);
    b.extend_from_slice(&m.seq.to_le_bytes());
    b.extend_from_slice(&m.t.to_le_bytes());
    b.extend_from_slice(&m.wrench.to_le_bytes());
    b.push(m.in_contact as u8);
    b.extend_from_slice(&m.impulse.to_le_bytes());
    b
}

pub fn decode_wrench(b: &[u8]) -> Result<WrenchMsg, NetError> {
    need(b, WRENCH_WIRE_LEN)?;
    let w = 12 + Wrench::WIRE_LEN;
    Ok(WrenchMsg {
        seq: u32::from_le_bytes(b[0..4].try_into().unwrap()),
        t: f64::from_le_bytes(b[4..12].try_into().unwrap()),
        wrench: Wrench::from_le_bytes(b[12..w].try_into().unwrap()),
        in_contact: b[w] != 0,
        impulse: f32::from_le_bytes(b[w + 1..w + 5].try_into().unwrap()),
    })
}
