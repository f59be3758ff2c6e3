//! Lossless 16-bit depth compression, synthetic depth scenes,
//! deprojection and a size-only stand-in for compressed color video.
//!
//! # Coded frame layout
//!
//! All integers are little-endian.
//!
//! | offset | size | field                          |
//! |-------:|-----:|--------------------------------|
//! | 0      | 4    | magic `b"DPTH"`                |
//! | 4      | 2    | version (1)                    |
//! | 6      | 2    | width                          |
//! | 8      | 2    | height                         |
//! | 10     | 8    | depth scale (f64, m per unit)  |
//! | 18     | 4    | frame id                       |
//! | 22     | 8    | timestamp (µs)                 |
//! | 30     | 4    | payload length                 |
//! | 34     | 4    | CRC-32 of bytes 0..34 + payload|
//! | 38     | n    | payload                        |
//!
//! The payload holds two u32 counts (control values, residuals) followed by
//! the two packed streams. Pixels are visited in row-major order with a
//! predictor equal to the last valid pixel of the current row, reset to the
//! pixel directly above at the start of every row (0 on the first row).
//! The control stream is a list of segments `(literal_count, run_token)`:
//! `literal_count` pixels each consume one residual, then
//! `run_token = length << 1 | kind` covers `length` pixels that are either
//! invalid (`kind = 0`) or equal to their predictor (`kind = 1`). Residuals
//! are `pixel − predictor` as wrapping i16, zigzag mapped. A literal that
//! decodes to 0 is an invalid pixel and leaves the predictor unchanged.
//!
//! Both streams are cut into blocks of 128 values; each block is one byte
//! of bit width `w` followed by `ceil(count · w / 8)` bytes of LSB-first
//! packed values.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Transform;
use crate::par::{self, Execution};

pub const MAGIC: [u8; 4] = *b"DPTH";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 38;
pub const BLOCK_LEN: usize = 128;
/// Shortest run that gets its own control token.
pub const MIN_RUN: usize = 8;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated data: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{0} trailing bytes after the payload")]
    TrailingBytes(usize),
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub width: u16,
    pub height: u16,
    pub depth_scale: f64,
    pub pixels: Vec<u16>,
}

impl DepthFrame {
    pub fn new(width: u16, height: u16, depth_scale: f64, pixels: Vec<u16>) -> Result<Self, CodecError> {
        let f = DepthFrame {
            width,
            height,
            depth_scale,
            pixels,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn filled(width: u16, height: u16, depth_scale: f64, value: u16) -> Self {
        DepthFrame {
            width,
            height,
            depth_scale,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.pixels.len() != self.width as usize * self.height as usize {
            return Err(CodecError::InvalidFrame(format!(
                "{} pixels for {}x{}",
                self.pixels.len(),
                self.width,
                self.height
            )));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(CodecError::InvalidFrame(format!("depth scale {}", self.depth_scale)));
        }
        Ok(())
    }

    pub fn raw_bytes(&self) -> usize {
        self.pixels.len() * 2
    }

    pub fn get(&self, u: usize, v: usize) -> u16 {
        self.pixels[v * self.width as usize + u]
    }

    /// Reads a binary 16-bit PGM (`P5`, maxval > 255).
    pub fn read_pgm<R: BufRead>(mut r: R, depth_scale: f64) -> Result<Self, CodecError> {
        let mut tokens = Vec::new();
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(CodecError::InvalidFrame("incomplete PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P5" || tokens.len() != 4 {
            return Err(CodecError::InvalidFrame("expected a binary PGM (P5)".into()));
        }
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| CodecError::InvalidFrame(format!("bad PGM header field {s:?}")))
        };
        let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if !(256..=65535).contains(&maxval) || w > u16::MAX as u32 || h > u16::MAX as u32 {
            return Err(CodecError::InvalidFrame("expected a 16-bit PGM up to 65535x65535".into()));
        }
        let mut data = vec![0u8; (w * h * 2) as usize];
        r.read_exact(&mut data)?;
        let pixels = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        DepthFrame::new(w as u16, h as u16, depth_scale, pixels)
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<(), CodecError> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut data = Vec::with_capacity(self.raw_bytes());
        for p in &self.pixels {
            data.extend_from_slice(&p.to_be_bytes());
        }
        w.write_all(&data)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthHeader {
    pub version: u16,
    pub width: u16,
    pub height: u16,
    pub depth_scale: f64,
    pub frame_id: u32,
    pub timestamp_us: u64,
    pub payload_len: u32,
    pub crc32: u32,
}

impl DepthHeader {
    fn prefix_bytes(&self) -> [u8; HEADER_LEN - 4] {
        let mut b = [0u8; HEADER_LEN - 4];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.width.to_le_bytes());
        b[8..10].copy_from_slice(&self.height.to_le_bytes());
        b[10..18].copy_from_slice(&self.depth_scale.to_le_bytes());
        b[18..22].copy_from_slice(&self.frame_id.to_le_bytes());
        b[22..30].copy_from_slice(&self.timestamp_us.to_le_bytes());
        b[30..34].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodedDepthFrame {
    pub header: DepthHeader,
    pub payload: Vec<u8>,
}

impl CodedDepthFrame {
    pub fn len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.header.prefix_bytes());
        out.extend_from_slice(&self.header.crc32.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and checksum-verifies a coded frame.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated {
                need: HEADER_LEN,
                have: bytes.len(),
            });
        }
        if bytes[0..4] != MAGIC {
            return Err(CodecError::BadMagic);
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let header = DepthHeader {
            version: u16_at(4),
            width: u16_at(6),
            height: u16_at(8),
            depth_scale: f64::from_bits(u64_at(10)),
            frame_id: u32_at(18),
            timestamp_us: u64_at(22),
            payload_len: u32_at(30),
            crc32: u32_at(34),
        };
        let need = HEADER_LEN + header.payload_len as usize;
        if bytes.len() < need {
            return Err(CodecError::Truncated {
                need,
                have: bytes.len(),
            });
        }
        if bytes.len() > need {
            return Err(CodecError::TrailingBytes(bytes.len() - need));
        }
        let payload = &bytes[HEADER_LEN..need];
        let computed = checksum(&bytes[..HEADER_LEN - 4], payload);
        if computed != header.crc32 {
            return Err(CodecError::Checksum {
                stored: header.crc32,
                computed,
            });
        }
        if header.version != VERSION {
            return Err(CodecError::UnsupportedVersion(header.version));
        }
        Ok(CodedDepthFrame {
            header,
            payload: payload.to_vec(),
        })
    }

    /// Re-labels the frame and refreshes the checksum. Used when a cached
    /// encoding is sent again under a new id.
    pub fn restamp(&mut self, frame_id: u32, timestamp_us: u64) {
        self.header.frame_id = frame_id;
        self.header.timestamp_us = timestamp_us;
        self.header.crc32 = checksum(&self.header.prefix_bytes(), &self.payload);
    }

    pub fn ratio(&self) -> f64 {
        (self.header.width as f64 * self.header.height as f64 * 2.0) / self.len() as f64
    }
}

fn checksum(prefix: &[u8], payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(prefix);
    h.update(payload);
    h.finalize()
}

#[inline]
fn zigzag(r: i16) -> u32 {
    (((r as i32) << 1) ^ ((r as i32) >> 15)) as u16 as u32
}

#[inline]
fn unzigzag(z: u32) -> i16 {
    let z = z as u16;
    ((z >> 1) as i16) ^ -((z & 1) as i16)
}

fn pack_blocks(values: &[u32], out: &mut Vec<u8>) {
    for chunk in values.chunks(BLOCK_LEN) {
        let max = chunk.iter().fold(0u32, |a, &b| a | b);
        let w = 32 - max.leading_zeros();
        out.push(w as u8);
        if w == 0 {
            continue;
        }
        let mut acc: u64 = 0;
        let mut nbits = 0u32;
        for &v in chunk {
            acc |= (v as u64) << nbits;
            nbits += w;
            while nbits >= 8 {
                out.push(acc as u8);
                acc >>= 8;
                nbits -= 8;
            }
        }
        if nbits > 0 {
            out.push(acc as u8);
        }
    }
}

fn unpack_blocks(data: &[u8], pos: &mut usize, count: usize, out: &mut Vec<u32>) -> Result<(), CodecError> {
    out.reserve(count);
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(BLOCK_LEN);
        let w = *data.get(*pos).ok_or(CodecError::Malformed("missing block header"))? as u32;
        *pos += 1;
        if w > 32 {
            return Err(CodecError::Malformed("block width above 32"));
        }
        if w == 0 {
            out.extend(std::iter::repeat_n(0, n));
            remaining -= n;
            continue;
        }
        let nbytes = (n * w as usize).div_ceil(8);
        let bytes = data
            .get(*pos..*pos + nbytes)
            .ok_or(CodecError::Malformed("block shorter than its width implies"))?;
        *pos += nbytes;
        let mask = if w == 32 { u32::MAX as u64 } else { (1u64 << w) - 1 };
        let mut acc: u64 = 0;
        let mut nbits = 0u32;
        let mut it = bytes.iter();
        for _ in 0..n {
            while nbits < w {
                acc |= (*it.next().unwrap() as u64) << nbits;
                nbits += 8;
            }
            out.push((acc & mask) as u32);
            acc >>= w;
            nbits -= w;
        }
        remaining -= n;
    }
    Ok(())
}

/// Builds the control and residual streams for a frame.
fn model_frame(f: &DepthFrame) -> (Vec<u32>, Vec<u32>) {
    let w = f.width as usize;
    let px = &f.pixels;
    let n = px.len();
    let mut controls = Vec::new();
    let mut residuals = Vec::with_capacity(n);
    let mut literal = 0u32;
    let mut state = 0u16;
    let row_start = |i: usize| if i >= w { px[i - w] } else { 0 };
    let mut i = 0;
    while i < n {
        if i % w == 0 {
            state = row_start(i);
        }
        let v = px[i];
        if v == 0 || v == state {
            // Measure the run this pixel could start.
            let mut j = i;
            let mut s = state;
            while j < n {
                if j % w == 0 {
                    s = row_start(j);
                }
                let pj = px[j];
                let same = if v == 0 { pj == 0 } else { pj != 0 && pj == s };
                if !same {
                    break;
                }
                j += 1;
            }
            let len = j - i;
            if len >= MIN_RUN {
                controls.push(literal);
                controls.push(((len as u32) << 1) | u32::from(v != 0));
                literal = 0;
                // Replay row resets so the predictor is right after the run.
                for k in i..j {
                    if k % w == 0 {
                        state = row_start(k);
                    }
                }
                i = j;
                continue;
            }
        }
        residuals.push(zigzag(v.wrapping_sub(state) as i16));
        literal += 1;
        if v != 0 {
            state = v;
        }
        i += 1;
    }
    if literal > 0 || controls.is_empty() {
        controls.push(literal);
        controls.push(0);
    }
    (controls, residuals)
}

pub fn encode_depth(f: &DepthFrame, frame_id: u32, timestamp_us: u64) -> Result<CodedDepthFrame, CodecError> {
    f.validate()?;
    if f.width == 0 || f.height == 0 {
        return Err(CodecError::InvalidFrame("empty frame".into()));
    }
    let (controls, residuals) = model_frame(f);
    let mut payload = Vec::with_capacity(f.raw_bytes() / 2);
    payload.extend_from_slice(&(controls.len() as u32).to_le_bytes());
    payload.extend_from_slice(&(residuals.len() as u32).to_le_bytes());
    pack_blocks(&controls, &mut payload);
    pack_blocks(&residuals, &mut payload);
    let mut header = DepthHeader {
        version: VERSION,
        width: f.width,
        height: f.height,
        depth_scale: f.depth_scale,
        frame_id,
        timestamp_us,
        payload_len: payload.len() as u32,
        crc32: 0,
    };
    header.crc32 = checksum(&header.prefix_bytes(), &payload);
    Ok(CodedDepthFrame { header, payload })
}

pub fn decode_depth(c: &CodedDepthFrame) -> Result<DepthFrame, CodecError> {
    let computed = checksum(&c.header.prefix_bytes(), &c.payload);
    if computed != c.header.crc32 {
        return Err(CodecError::Checksum {
            stored: c.header.crc32,
            computed,
        });
    }
    if c.header.payload_len as usize != c.payload.len() {
        return Err(CodecError::Malformed("payload length mismatch"));
    }
    let w = c.header.width as usize;
    let n = w * c.header.height as usize;
    if n == 0 {
        return Err(CodecError::Malformed("empty frame"));
    }
    let data = &c.payload;
    if data.len() < 8 {
        return Err(CodecError::Truncated {
            need: 8,
            have: data.len(),
        });
    }
    let n_controls = u32::from_le_bytes(data[0..4].try_into().unwrap()) as usize;
    let n_residuals = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    if n_residuals > n || n_controls > 2 * n + 2 || !n_controls.is_multiple_of(2) {
        return Err(CodecError::Malformed("stream counts exceed frame size"));
    }
    let mut pos = 8;
    let mut controls = Vec::new();
    unpack_blocks(data, &mut pos, n_controls, &mut controls)?;
    let mut residuals = Vec::new();
    unpack_blocks(data, &mut pos, n_residuals, &mut residuals)?;
    if pos != data.len() {
        return Err(CodecError::Malformed("trailing bytes"));
    }

    let mut px = vec![0u16; n];
    let mut state = 0u16;
    let mut i = 0usize;
    let mut r = residuals.iter();
    let row_start = |px: &[u16], i: usize| if i >= w { px[i - w] } else { 0 };
    for seg in controls.chunks_exact(2) {
        let (literal, token) = (seg[0] as usize, seg[1]);
        let run = (token >> 1) as usize;
        if i + literal + run > n {
            return Err(CodecError::Malformed("segments overrun the frame"));
        }
        for _ in 0..literal {
            if i.is_multiple_of(w) {
                state = row_start(&px, i);
            }
            let z = *r.next().ok_or(CodecError::Malformed("residual stream exhausted"))?;
            let v = state.wrapping_add(unzigzag(z) as u16);
            px[i] = v;
            if v != 0 {
                state = v;
            }
            i += 1;
        }
        let repeat = token & 1 == 1;
        for _ in 0..run {
            if i.is_multiple_of(w) {
                state = row_start(&px, i);
            }
            if repeat {
                px[i] = state;
            }
            i += 1;
        }
    }
    if i != n || r.next().is_some() {
        return Err(CodecError::Malformed("streams do not cover the frame exactly"));
    }
    DepthFrame::new(c.header.width, c.header.height, c.header.depth_scale, px)
}

/// Decodes a frame straight from its wire bytes.
pub fn decode_bytes(bytes: &[u8]) -> Result<DepthFrame, CodecError> {
    decode_depth(&CodedDepthFrame::from_bytes(bytes)?)
}

/// Encodes several frames, in parallel when requested.
pub fn encode_batch(frames: &[DepthFrame], exec: Execution) -> Result<Vec<CodedDepthFrame>, CodecError> {
    par::map(exec, frames, |f| encode_depth(f, 0, 0)).into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Pinhole model with the given horizontal field of view.
    pub fn from_fov(width: u16, height: u16, hfov_deg: f64) -> Self {
        let fx = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }
}

/// Back-projects valid pixels and maps them through `anchor`.
pub fn deproject(f: &DepthFrame, k: &CameraIntrinsics, anchor: &Transform, stride: usize) -> Vec<Vector3<f64>> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for v in (0..f.height as usize).step_by(stride) {
        for u in (0..f.width as usize).step_by(stride) {
            let d = f.get(u, v);
            if d == 0 {
                continue;
            }
            let z = d as f64 * f.depth_scale;
            let p = Vector3::new((u as f64 - k.cx) / k.fx * z, (v as f64 - k.cy) / k.fy * z, z);
            out.push(anchor.transform_point(&p));
        }
    }
    out
}

/// Parameters of the synthetic tabletop scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub width: u16,
    pub height: u16,
    pub depth_scale: f64,
    /// Table depth at the image center, meters.
    pub plane_depth: f64,
    /// Depth change across the image height, meters.
    pub plane_tilt: f64,
    pub boxes: usize,
    /// Gaussian depth noise, in depth units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 848,
            height: 480,
            depth_scale: 0.001,
            plane_depth: 1.0,
            plane_tilt: 0.3,
            boxes: 4,
            noise_sigma: 2.0,
            seed: 0,
        }
    }
}

/// Renders a tilted table with boxes standing on it. Each box leaves an
/// invalid shadow band on its left edge, as a stereo sensor would.
pub fn synth_scene(p: &SceneParams) -> DepthFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let (w, h) = (p.width as usize, p.height as usize);
    let mut depth = vec![0f64; w * h];
    for v in 0..h {
        let row = p.plane_depth + p.plane_tilt * (v as f64 / h.max(1) as f64 - 0.5);
        depth[v * w..(v + 1) * w].fill(row);
    }
    let mut shadow = vec![false; w * h];
    for _ in 0..p.boxes {
        let bw = rng.random_range(w / 12..=w / 5).max(2);
        let bh = rng.random_range(h / 12..=h / 4).max(2);
        let u0 = rng.random_range(0..w.saturating_sub(bw).max(1));
        let v0 = rng.random_range(0..h.saturating_sub(bh).max(1));
        let height = rng.random_range(0.05..0.25);
        let shadow_w = (bw / 10).max(1);
        for v in v0..(v0 + bh).min(h) {
            for u in u0..(u0 + bw).min(w) {
                let i = v * w + u;
                depth[i] = depth[i].min(p.plane_depth - height);
                shadow[i] = false;
            }
            for u in u0.saturating_sub(shadow_w)..u0 {
                shadow[v * w + u] = true;
            }
        }
    }
    let noise = Normal::new(0.0, p.noise_sigma.max(0.0)).expect("finite sigma");
    let pixels = depth
        .iter()
        .zip(&shadow)
        .map(|(d, s)| {
            if *s {
                return 0;
            }
            let units = d / p.depth_scale + noise.sample(&mut rng);
            units.round().clamp(1.0, u16::MAX as f64) as u16
        })
        .collect();
    DepthFrame {
        width: p.width,
        height: p.height,
        depth_scale: p.depth_scale,
        pixels,
    }
}

/// Frame families used for losslessness testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameFamily {
    Constant,
    Gradient,
    Scene,
    Random,
    /// Depth-dependent noise with speckle dropouts and an invalid border.
    SensorNoise,
}

impl FrameFamily {
    pub const ALL: [FrameFamily; 5] = [
        FrameFamily::Constant,
        FrameFamily::Gradient,
        FrameFamily::Scene,
        FrameFamily::Random,
        FrameFamily::SensorNoise,
    ];
}

pub fn synth_frame(family: FrameFamily, width: u16, height: u16, seed: u64) -> DepthFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let (w, h) = (width as usize, height as usize);
    let n = w * h;
    let pixels: Vec<u16> = match family {
        FrameFamily::Constant => vec![rng.random_range(0..=u16::MAX); n],
        FrameFamily::Gradient => {
            let base: f64 = rng.random_range(200.0..4000.0);
            let (gx, gy): (f64, f64) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
            (0..n)
                .map(|i| (base + gx * (i % w) as f64 + gy * (i / w) as f64).round().clamp(0.0, 65535.0) as u16)
                .collect()
        }
        FrameFamily::Scene => {
            return synth_scene(&SceneParams {
                width,
                height,
                boxes: rng.random_range(0..6),
                noise_sigma: rng.random_range(0.0..4.0),
                seed,
                ..Default::default()
            })
        }
        FrameFamily::Random => {
            let mut bytes = vec![0u8; n * 2];
            rng.fill_bytes(&mut bytes);
            bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
        }
        FrameFamily::SensorNoise => {
            let z0: f64 = rng.random_range(400.0..3000.0);
            let border = (w / 16).max(1);
            let unit = Normal::new(0.0, 1.0).unwrap();
            (0..n)
                .map(|i| {
                    let (u, v) = (i % w, i / w);
                    let z = z0 + 0.2 * v as f64;
                    if u < border || rng.random_bool(0.01) {
                        return 0;
                    }
                    // Stereo noise grows with the square of depth.
                    let sigma = 1.0 + 2e-6 * z * z;
                    (z + sigma * unit.sample(&mut rng)).round().clamp(1.0, 65535.0) as u16
                })
                .collect()
        }
    };
    DepthFrame {
        width,
        height,
        depth_scale: 0.001,
        pixels,
    }
}

/// Size and cadence of an emulated compressed color stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorStreamConfig {
    pub bitrate_bps: f64,
    pub fps: f64,
    pub intra_period: u32,
    /// Intra frame size relative to other frames.
    pub intra_ratio: f64,
    pub seed: u64,
}

impl Default for ColorStreamConfig {
    fn default() -> Self {
        ColorStreamConfig {
            bitrate_bps: 5e6,
            fps: 30.0,
            intra_period: 30,
            intra_ratio: 4.0,
            seed: 0,
        }
    }
}

/// Payload size of frame `index`: intra frames every `intra_period`
/// frames, sized so the long-run mean matches the bitrate.
pub fn color_payload_len(index: u64, cfg: &ColorStreamConfig) -> usize {
    if cfg.bitrate_bps <= 0.0 || cfg.fps <= 0.0 {
        return 0;
    }
    let mean = cfg.bitrate_bps / cfg.fps / 8.0;
    let n = cfg.intra_period.max(1) as f64;
    let r = cfg.intra_ratio.max(1.0);
    let base = mean * n / (n - 1.0 + r);
    let intra = cfg.intra_period <= 1 || index.is_multiple_of(cfg.intra_period as u64);
    (if intra && cfg.intra_period > 1 { base * r } else { base }).round() as usize
}

/// Seeded opaque bytes standing in for one compressed color frame.
pub fn color_payload_model(index: u64, cfg: &ColorStreamConfig) -> Vec<u8> {
    let mut bytes = vec![0u8; color_payload_len(index, cfg)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
    rng.fill_bytes(&mut bytes);
    bytes
}
