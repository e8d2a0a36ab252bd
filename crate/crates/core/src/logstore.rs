//! The `RLOG` sensor-log container and the synthetic scene generator.
//!
//! ```text
//! header  "RLOG" | version u16 | stream_count u16 | stream_count x StreamInfo (17 bytes)
//! StreamInfo  stream_id u16 | kind u8 | codec u8 | width u32 | height u32 | bit_depth u8 | rate_mhz u32
//! chunk   stream_id u16 | timestamp_ns u64 | payload_len u32 | payload
//! footer  "RIDX" | entry_count u64 | entries (stream_id u16, timestamp_ns u64, offset u64)
//! trailer footer_offset u64
//! ```
//!
//! Camera streams use either the `raw16` codec (unpacked little-endian 16-bit
//! samples) or the `scene` codec, a compact scene description rendered to a
//! full frame by the decoder. Ground-truth payloads are
//! `count u16 | (object_id u32, class u16, x u32, y u32, w u32, h u32) * count`.
//! Lidar payloads are arrays of 16-byte points (x, y, z f32, intensity u16, pad u16).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use memmap2::Mmap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{max_sample, Frame};
use crate::presets::PixelBox;

pub const LOG_MAGIC: [u8; 4] = *b"RLOG";
pub const INDEX_MAGIC: [u8; 4] = *b"RIDX";
pub const LOG_VERSION: u16 = 1;
pub const STREAM_INFO_LEN: usize = 17;
pub const CHUNK_HEADER_LEN: usize = 14;
pub const INDEX_ENTRY_LEN: usize = 18;
pub const LIDAR_POINT_LEN: usize = 16;
const GT_OBJECT_LEN: usize = 22;
const SCENE_OBJECT_LEN: usize = 24;
const NOISE_TILE: usize = 512;
const NOISE_MAX: u16 = 255;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty log")]
    EmptyLog,
    #[error("empty slice")]
    EmptySlice,
    #[error("index mismatch at offset {offset}: entry ({stream_id}, {timestamp_ns})")]
    IndexMismatch {
        offset: u64,
        stream_id: u16,
        timestamp_ns: u64,
    },
    #[error("unexpected end of container")]
    UnexpectedEnd,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown stream {0}")]
    UnknownStream(u16),
    #[error("duplicate stream id {0}")]
    DuplicateStream(u16),
    #[error("timestamps not increasing in stream {stream_id} at {timestamp_ns}")]
    NotMonotonic { stream_id: u16, timestamp_ns: u64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cannot decode record: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum StreamKind {
    CameraMono = 0,
    CameraRgb = 1,
    Lidar = 2,
    GroundTruth = 3,
}

impl StreamKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => StreamKind::CameraMono,
            1 => StreamKind::CameraRgb,
            2 => StreamKind::Lidar,
            3 => StreamKind::GroundTruth,
            _ => return None,
        })
    }

    pub fn is_camera(self) -> bool {
        matches!(self, StreamKind::CameraMono | StreamKind::CameraRgb)
    }

    pub fn channels(self) -> u8 {
        match self {
            StreamKind::CameraRgb => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Codec {
    Raw16 = 0,
    Scene = 1,
    Points = 2,
    Boxes = 3,
}

impl Codec {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Codec::Raw16,
            1 => Codec::Scene,
            2 => Codec::Points,
            3 => Codec::Boxes,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub stream_id: u16,
    pub kind: StreamKind,
    pub codec: Codec,
    pub native_width: u32,
    pub native_height: u32,
    pub bit_depth: u8,
    /// Native rate in millihertz (91 Hz is 91000).
    pub rate_mhz: u32,
}

impl StreamInfo {
    /// The mono camera at 3208x2200, 10-bit, 91 Hz.
    pub fn mono_camera(stream_id: u16, codec: Codec) -> Self {
        StreamInfo {
            stream_id,
            kind: StreamKind::CameraMono,
            codec,
            native_width: 3208,
            native_height: 2200,
            bit_depth: 10,
            rate_mhz: 91_000,
        }
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_mhz as f64 / 1000.0
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.stream_id.to_le_bytes());
        out.push(self.kind as u8);
        out.push(self.codec as u8);
        out.extend_from_slice(&self.native_width.to_le_bytes());
        out.extend_from_slice(&self.native_height.to_le_bytes());
        out.push(self.bit_depth);
        out.extend_from_slice(&self.rate_mhz.to_le_bytes());
    }

    fn decode(b: &[u8]) -> Result<Self, String> {
        let kind = StreamKind::from_u8(b[2]).ok_or_else(|| format!("unknown stream kind {}", b[2]))?;
        let codec = Codec::from_u8(b[3]).ok_or_else(|| format!("unknown codec {}", b[3]))?;
        Ok(StreamInfo {
            stream_id: le_u16(b, 0),
            kind,
            codec,
            native_width: le_u32(b, 4),
            native_height: le_u32(b, 8),
            bit_depth: b[12],
            rate_mhz: le_u32(b, 13),
        })
    }
}

fn le_u16(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn le_u32(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn le_u64(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

/// Timestamp of the `k`-th sample of a stream at `rate_mhz`.
pub fn sample_timestamp(k: u64, rate_mhz: u32) -> u64 {
    (k as u128 * 1_000_000_000_000 / rate_mhz as u128) as u64
}

/// Number of samples a stream at `rate_mhz` produces in `[0, duration_ns)`.
pub fn sample_count(duration_ns: u64, rate_mhz: u32) -> u64 {
    (duration_ns as u128 * rate_mhz as u128).div_ceil(1_000_000_000_000) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub object_id: u32,
    pub class: u16,
    /// Box in native pixel coordinates.
    pub bbox: PixelBox,
}

pub fn encode_ground_truth(objects: &[GroundTruthObject]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + objects.len() * GT_OBJECT_LEN);
    out.extend_from_slice(&(objects.len() as u16).to_le_bytes());
    for o in objects {
        out.extend_from_slice(&o.object_id.to_le_bytes());
        out.extend_from_slice(&o.class.to_le_bytes());
        for v in [o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_ground_truth(payload: &[u8]) -> Result<Vec<GroundTruthObject>, LogError> {
    if payload.len() < 2 {
        return Err(LogError::Decode("ground truth payload too short".into()));
    }
    let count = le_u16(payload, 0) as usize;
    if payload.len() != 2 + count * GT_OBJECT_LEN {
        return Err(LogError::Decode(format!(
            "ground truth payload of {} bytes for {count} objects",
            payload.len()
        )));
    }
    Ok(payload[2..]
        .chunks_exact(GT_OBJECT_LEN)
        .map(|c| GroundTruthObject {
            object_id: le_u32(c, 0),
            class: le_u16(c, 4),
            bbox: PixelBox {
                x: le_u32(c, 6),
                y: le_u32(c, 10),
                w: le_u32(c, 14),
                h: le_u32(c, 18),
            },
        })
        .collect())
}

/// One rectangle of the synthetic scene at a given instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub object_id: u32,
    pub class: u16,
    pub bbox: PixelBox,
    pub intensity: u16,
}

#[derive(Debug, Clone)]
struct Trajectory {
    class: u16,
    w: u32,
    h: u32,
    y: u32,
    freq_hz: f64,
    phase: f64,
    intensity: u16,
}

/// Moving rectangles in disjoint horizontal lanes. Positions are a pure
/// function of `(seed, object_id, t)`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub bit_depth: u8,
    tracks: Vec<Trajectory>,
}

pub const MAX_OBJECTS: u16 = 64;
pub const CLASS_COUNT: u16 = 3;

impl Scene {
    pub fn new(seed: u64, width: u32, height: u32, bit_depth: u8, object_count: u16) -> Self {
        let count = object_count.min(MAX_OBJECTS) as u32;
        let lane_h = height.checked_div(count).unwrap_or(height);
        let top = max_sample(bit_depth) as u32;
        let tracks = (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
                let h = ((lane_h as f64 * rng.random_range(0.4..0.8)) as u32).max(2);
                let w = ((width as f64 * rng.random_range(0.05..0.2)) as u32).max(2);
                let slack = lane_h.saturating_sub(h);
                let y = i * lane_h + rng.random_range(0..=slack);
                // Intensities spread over (NOISE_MAX, top], one per object.
                let span = top.saturating_sub(NOISE_MAX as u32 + 1);
                let intensity = (NOISE_MAX as u32 + 1 + span * (i + 1) / (count + 1)) as u16;
                Trajectory {
                    class: (i as u16 % CLASS_COUNT) + 1,
                    w: w.min(width),
                    h: h.min(height),
                    y,
                    freq_hz: rng.random_range(0.05..0.5),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    intensity,
                }
            })
            .collect();
        Scene {
            seed,
            width,
            height,
            bit_depth,
            tracks,
        }
    }

    pub fn objects_at(&self, timestamp_ns: u64) -> Vec<SceneObject> {
        let t = timestamp_ns as f64 / 1e9;
        self.tracks
            .iter()
            .enumerate()
            .map(|(i, tr)| {
                let travel = (self.width - tr.w) as f64;
                let u = 0.5 + 0.5 * (std::f64::consts::TAU * tr.freq_hz * t + tr.phase).sin();
                SceneObject {
                    object_id: i as u32,
                    class: tr.class,
                    bbox: PixelBox {
                        x: (travel * u).round() as u32,
                        y: tr.y,
                        w: tr.w,
                        h: tr.h,
                    },
                    intensity: tr.intensity,
                }
            })
            .collect()
    }

    pub fn ground_truth_at(&self, timestamp_ns: u64) -> Vec<GroundTruthObject> {
        self.objects_at(timestamp_ns)
            .into_iter()
            .map(|o| GroundTruthObject {
                object_id: o.object_id,
                class: o.class,
                bbox: o.bbox,
            })
            .collect()
    }

    /// Scene-codec payload for the frame at `timestamp_ns`.
    pub fn encode_frame(&self, frame_index: u64, timestamp_ns: u64) -> Vec<u8> {
        let objects = self.objects_at(timestamp_ns);
        let mut out = Vec::with_capacity(18 + objects.len() * SCENE_OBJECT_LEN);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&frame_seed(self.seed, frame_index).to_le_bytes());
        out.extend_from_slice(&(objects.len() as u16).to_le_bytes());
        for o in &objects {
            out.extend_from_slice(&o.object_id.to_le_bytes());
            out.extend_from_slice(&o.class.to_le_bytes());
            for v in [o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&o.intensity.to_le_bytes());
        }
        out
    }
}

fn frame_seed(seed: u64, frame_index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index);
    rng.random()
}

fn noise_tile(scene_seed: u64) -> Vec<u16> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed.rotate_left(17) ^ 0x5eed);
    (0..NOISE_TILE * NOISE_TILE)
        .map(|_| rng.random_range(0..=NOISE_MAX))
        .collect()
}

/// Renders a scene-codec payload into `frame` (which fixes the geometry).
fn render_scene(payload: &[u8], tile: &[u16], frame: &mut Frame) -> Result<(), LogError> {
    if payload.len() < 18 {
        return Err(LogError::Decode("scene payload too short".into()));
    }
    let fseed = le_u64(payload, 8);
    let count = le_u16(payload, 16) as usize;
    if payload.len() != 18 + count * SCENE_OBJECT_LEN {
        return Err(LogError::Decode("scene payload length mismatch".into()));
    }
    let ox = (fseed % NOISE_TILE as u64) as usize;
    let oy = ((fseed >> 32) % NOISE_TILE as u64) as usize;
    let width = frame.width as usize;
    let channels = frame.channels as usize;
    let row_len = frame.row_len();
    for (y, row) in frame.data.chunks_exact_mut(row_len).enumerate() {
        let trow = &tile[((y + oy) % NOISE_TILE) * NOISE_TILE..][..NOISE_TILE];
        let mut x = 0;
        while x < width {
            let start = (x + ox) % NOISE_TILE;
            let run = (NOISE_TILE - start).min(width - x);
            if channels == 1 {
                row[x..x + run].copy_from_slice(&trow[start..start + run]);
            } else {
                for i in 0..run {
                    row[(x + i) * channels..(x + i + 1) * channels].fill(trow[start + i]);
                }
            }
            x += run;
        }
    }
    for c in payload[18..].chunks_exact(SCENE_OBJECT_LEN) {
        let (bx, by, bw, bh) = (le_u32(c, 6), le_u32(c, 10), le_u32(c, 14), le_u32(c, 18));
        let intensity = le_u16(c, 22);
        let x1 = (bx.saturating_add(bw)).min(frame.width) as usize;
        let y1 = (by.saturating_add(bh)).min(frame.height) as usize;
        for y in by as usize..y1 {
            frame.data[y * row_len + bx as usize * channels..y * row_len + x1 * channels]
                .fill(intensity);
        }
    }
    Ok(())
}

/// The decode stage: turns a camera record into a full native frame.
pub trait Decoder: Send + Sync {
    /// Decodes into `frame`, reshaping it to the stream's native geometry.
    fn decode_into(&self, stream: &StreamInfo, payload: &[u8], frame: &mut Frame) -> Result<(), LogError>;

    fn decode(&self, stream: &StreamInfo, payload: &[u8]) -> Result<Frame, LogError> {
        let mut frame = Frame::new(0, 0, 1, stream.bit_depth);
        self.decode_into(stream, payload, &mut frame)?;
        Ok(frame)
    }
}

/// Decoder for `raw16` and `scene` camera payloads, with an optional
/// artificial per-frame cost.
#[derive(Default)]
pub struct SyntheticDecoder {
    cost: Duration,
    tiles: Mutex<HashMap<u64, Arc<Vec<u16>>>>,
}

impl SyntheticDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_cost(cost: Duration) -> Self {
        SyntheticDecoder {
            cost,
            ..Self::default()
        }
    }

    pub fn cost(&self) -> Duration {
        self.cost
    }

    fn tile(&self, seed: u64) -> Arc<Vec<u16>> {
        let mut tiles = self.tiles.lock().unwrap_or_else(|e| e.into_inner());
        tiles
            .entry(seed)
            .or_insert_with(|| Arc::new(noise_tile(seed)))
            .clone()
    }
}

impl Decoder for SyntheticDecoder {
    fn decode_into(&self, stream: &StreamInfo, payload: &[u8], frame: &mut Frame) -> Result<(), LogError> {
        if !stream.kind.is_camera() {
            return Err(LogError::Decode(format!(
                "stream {} is not a camera",
                stream.stream_id
            )));
        }
        if !self.cost.is_zero() {
            std::thread::sleep(self.cost);
        }
        frame.width = stream.native_width;
        frame.height = stream.native_height;
        frame.channels = stream.kind.channels();
        frame.bit_depth = stream.bit_depth;
        let len = frame.row_len() * frame.height as usize;
        frame.data.resize(len, 0);
        match stream.codec {
            Codec::Raw16 => {
                if payload.len() != frame.byte_len() {
                    return Err(LogError::Decode(format!(
                        "raw frame of {} bytes, expected {}",
                        payload.len(),
                        frame.byte_len()
                    )));
                }
                for (dst, src) in frame.data.iter_mut().zip(payload.chunks_exact(2)) {
                    *dst = u16::from_le_bytes([src[0], src[1]]);
                }
            }
            Codec::Scene => {
                if payload.len() < 8 {
                    return Err(LogError::Decode("scene payload too short".into()));
                }
                let tile = self.tile(le_u64(payload, 0));
                render_scene(payload, &tile, frame)?;
            }
            other => {
                return Err(LogError::Decode(format!("codec {other:?} is not an image codec")))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub duration_ns: u64,
    pub camera: StreamInfo,
    pub object_count: u16,
    /// Adds a ground-truth stream sampled with the camera.
    pub ground_truth: bool,
    /// Adds a 10 Hz lidar stream with this many points per sweep.
    pub lidar_points: Option<u32>,
}

impl SyntheticConfig {
    pub fn new(seed: u64, duration: Duration) -> Self {
        SyntheticConfig {
            seed,
            duration_ns: duration.as_nanos() as u64,
            camera: StreamInfo::mono_camera(0, Codec::Scene),
            object_count: 4,
            ground_truth: true,
            lidar_points: None,
        }
    }

    /// Duration covering exactly `frames` camera frames.
    pub fn with_frames(mut self, frames: u64) -> Self {
        self.duration_ns = sample_timestamp(frames - 1, self.camera.rate_mhz) + 1;
        self
    }

    pub fn scene(&self) -> Scene {
        Scene::new(
            self.seed,
            self.camera.native_width,
            self.camera.native_height,
            self.camera.bit_depth,
            self.object_count,
        )
    }

    pub fn streams(&self) -> Vec<StreamInfo> {
        let mut streams = vec![self.camera];
        let mut next = self.camera.stream_id + 1;
        if self.ground_truth {
            streams.push(StreamInfo {
                stream_id: next,
                kind: StreamKind::GroundTruth,
                codec: Codec::Boxes,
                ..self.camera
            });
            next += 1;
        }
        if self.lidar_points.is_some() {
            streams.push(StreamInfo {
                stream_id: next,
                kind: StreamKind::Lidar,
                codec: Codec::Points,
                native_width: 0,
                native_height: 0,
                bit_depth: 0,
                rate_mhz: 10_000,
            });
        }
        streams
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub path: PathBuf,
    pub streams: Vec<StreamInfo>,
    pub records_per_stream: BTreeMap<u16, u64>,
    pub bytes: u64,
    pub duration_ns: u64,
}

/// Streaming container writer. Call [`LogWriter::finish`] to write the index.
pub struct LogWriter {
    out: BufWriter<File>,
    offset: u64,
    streams: Vec<StreamInfo>,
    last_ts: HashMap<u16, u64>,
    index: Vec<(u16, u64, u64)>,
}

impl LogWriter {
    pub fn create(path: &Path, streams: &[StreamInfo]) -> Result<Self, LogError> {
        let mut seen = std::collections::HashSet::new();
        for s in streams {
            if !seen.insert(s.stream_id) {
                return Err(LogError::DuplicateStream(s.stream_id));
            }
            if s.rate_mhz == 0 {
                return Err(LogError::InvalidConfig(format!(
                    "stream {} has zero rate",
                    s.stream_id
                )));
            }
        }
        let mut header = Vec::new();
        header.extend_from_slice(&LOG_MAGIC);
        header.extend_from_slice(&LOG_VERSION.to_le_bytes());
        header.extend_from_slice(&(streams.len() as u16).to_le_bytes());
        for s in streams {
            s.encode(&mut header);
        }
        let mut out = BufWriter::with_capacity(1 << 20, File::create(path)?);
        out.write_all(&header)?;
        Ok(LogWriter {
            out,
            offset: header.len() as u64,
            streams: streams.to_vec(),
            last_ts: HashMap::new(),
            index: Vec::new(),
        })
    }

    pub fn append(&mut self, stream_id: u16, timestamp_ns: u64, payload: &[u8]) -> Result<(), LogError> {
        if !self.streams.iter().any(|s| s.stream_id == stream_id) {
            return Err(LogError::UnknownStream(stream_id));
        }
        if let Some(&last) = self.last_ts.get(&stream_id) {
            if timestamp_ns <= last {
                return Err(LogError::NotMonotonic {
                    stream_id,
                    timestamp_ns,
                });
            }
        }
        let len = u32::try_from(payload.len())
            .map_err(|_| LogError::InvalidConfig("payload larger than 4 GiB".into()))?;
        self.out.write_all(&stream_id.to_le_bytes())?;
        self.out.write_all(&timestamp_ns.to_le_bytes())?;
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(payload)?;
        self.index.push((stream_id, timestamp_ns, self.offset));
        self.last_ts.insert(stream_id, timestamp_ns);
        self.offset += CHUNK_HEADER_LEN as u64 + payload.len() as u64;
        Ok(())
    }

    /// Writes the index footer and trailer; returns the total file size.
    pub fn finish(mut self) -> Result<u64, LogError> {
        let footer_offset = self.offset;
        self.out.write_all(&INDEX_MAGIC)?;
        self.out.write_all(&(self.index.len() as u64).to_le_bytes())?;
        for (sid, ts, off) in &self.index {
            self.out.write_all(&sid.to_le_bytes())?;
            self.out.write_all(&ts.to_le_bytes())?;
            self.out.write_all(&off.to_le_bytes())?;
        }
        self.out.write_all(&footer_offset.to_le_bytes())?;
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(footer_offset + 12 + (self.index.len() * INDEX_ENTRY_LEN) as u64 + 8)
    }
}

/// Generates a synthetic log. Identical configs give byte-identical files.
pub fn write_log(config: &SyntheticConfig, path: &Path) -> Result<LogSummary, LogError> {
    if config.duration_ns == 0 {
        return Err(LogError::EmptyLog);
    }
    if !config.camera.kind.is_camera() {
        return Err(LogError::InvalidConfig("first stream must be a camera".into()));
    }
    let streams = config.streams();
    let scene = config.scene();
    let mut writer = LogWriter::create(path, &streams)?;

    // Merge all streams by (timestamp, stream_id).
    let mut events: Vec<(u64, u16, u64)> = Vec::new();
    for s in &streams {
        for k in 0..sample_count(config.duration_ns, s.rate_mhz) {
            events.push((sample_timestamp(k, s.rate_mhz), s.stream_id, k));
        }
    }
    events.sort_unstable();
    let mut records_per_stream = BTreeMap::new();
    let raw_decoder = SyntheticDecoder::new();
    for (ts, sid, k) in events {
        let info = streams.iter().find(|s| s.stream_id == sid).unwrap();
        let payload = match info.kind {
            StreamKind::CameraMono | StreamKind::CameraRgb => {
                let scene_payload = scene.encode_frame(k, ts);
                match info.codec {
                    Codec::Scene => scene_payload,
                    _ => {
                        let scene_info = StreamInfo {
                            codec: Codec::Scene,
                            ..*info
                        };
                        let frame = raw_decoder.decode(&scene_info, &scene_payload)?;
                        frame.as_bytes().to_vec()
                    }
                }
            }
            StreamKind::GroundTruth => encode_ground_truth(&scene.ground_truth_at(ts)),
            StreamKind::Lidar => lidar_sweep(config.seed, k, config.lidar_points.unwrap_or(0)),
        };
        writer.append(sid, ts, &payload)?;
        *records_per_stream.entry(sid).or_insert(0u64) += 1;
    }
    let bytes = writer.finish()?;
    Ok(LogSummary {
        path: path.to_path_buf(),
        streams,
        records_per_stream,
        bytes,
        duration_ns: config.duration_ns,
    })
}

fn lidar_sweep(seed: u64, k: u64, points: u32) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11da);
    rng.set_stream(k);
    let mut out = Vec::with_capacity(points as usize * LIDAR_POINT_LEN);
    for _ in 0..points {
        for _ in 0..3 {
            out.extend_from_slice(&rng.random_range(-100.0f32..100.0).to_le_bytes());
        }
        out.extend_from_slice(&rng.random::<u16>().to_le_bytes());
        out.extend_from_slice(&[0, 0]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub stream_id: u16,
    pub timestamp_ns: u64,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub stream_id: u16,
    pub timestamp_ns: u64,
    pub payload: Vec<u8>,
}

/// Read-only view of a container. Shareable across threads.
pub struct LogReader {
    path: PathBuf,
    map: Mmap,
    streams: Vec<StreamInfo>,
    /// Per-stream entries in timestamp order.
    index: BTreeMap<u16, Vec<IndexEntry>>,
    body_end: u64,
}

struct Parsed {
    streams: Vec<StreamInfo>,
    header_len: usize,
    footer_offset: u64,
    entries: Vec<IndexEntry>,
}

fn parse_container(bytes: &[u8]) -> Result<Parsed, LogError> {
    if bytes.len() < 8 {
        return Err(LogError::UnexpectedEnd);
    }
    if bytes[0..4] != LOG_MAGIC {
        return Err(LogError::BadMagic);
    }
    let version = le_u16(bytes, 4);
    if version != LOG_VERSION {
        return Err(LogError::UnsupportedVersion(version));
    }
    let count = le_u16(bytes, 6) as usize;
    let header_len = 8 + count * STREAM_INFO_LEN;
    if bytes.len() < header_len + 8 {
        return Err(LogError::UnexpectedEnd);
    }
    let mut streams = Vec::with_capacity(count);
    for i in 0..count {
        let info = StreamInfo::decode(&bytes[8 + i * STREAM_INFO_LEN..][..STREAM_INFO_LEN])
            .map_err(LogError::Decode)?;
        if streams.iter().any(|s: &StreamInfo| s.stream_id == info.stream_id) {
            return Err(LogError::DuplicateStream(info.stream_id));
        }
        streams.push(info);
    }
    let footer_offset = le_u64(bytes, bytes.len() - 8);
    let trailer = bytes.len() as u64 - 8;
    if footer_offset < header_len as u64 || footer_offset + 12 > trailer {
        return Err(LogError::UnexpectedEnd);
    }
    let fo = footer_offset as usize;
    if bytes[fo..fo + 4] != INDEX_MAGIC {
        return Err(LogError::UnexpectedEnd);
    }
    let n = le_u64(bytes, fo + 4);
    if n.checked_mul(INDEX_ENTRY_LEN as u64).map(|l| fo as u64 + 12 + l) != Some(trailer) {
        return Err(LogError::UnexpectedEnd);
    }
    let entries = bytes[fo + 12..bytes.len() - 8]
        .chunks_exact(INDEX_ENTRY_LEN)
        .map(|c| IndexEntry {
            stream_id: le_u16(c, 0),
            timestamp_ns: le_u64(c, 2),
            offset: le_u64(c, 10),
        })
        .collect();
    Ok(Parsed {
        streams,
        header_len,
        footer_offset,
        entries,
    })
}

/// Reads the chunk at `offset`, bounded by `end`.
fn chunk_at(bytes: &[u8], offset: u64, end: u64) -> Result<(u16, u64, &[u8]), LogError> {
    let o = offset as usize;
    if offset + CHUNK_HEADER_LEN as u64 > end {
        return Err(LogError::UnexpectedEnd);
    }
    let len = le_u32(bytes, o + 10) as u64;
    if offset + CHUNK_HEADER_LEN as u64 + len > end {
        return Err(LogError::UnexpectedEnd);
    }
    let start = o + CHUNK_HEADER_LEN;
    Ok((
        le_u16(bytes, o),
        le_u64(bytes, o + 2),
        &bytes[start..start + len as usize],
    ))
}

impl LogReader {
    pub fn open(path: &Path) -> Result<Self, LogError> {
        let file = File::open(path)?;
        // SAFETY: containers are immutable once written.
        let map = unsafe { Mmap::map(&file)? };
        let parsed = parse_container(&map)?;
        let mut index: BTreeMap<u16, Vec<IndexEntry>> =
            parsed.streams.iter().map(|s| (s.stream_id, Vec::new())).collect();
        for e in parsed.entries {
            let list = index.get_mut(&e.stream_id).ok_or(LogError::UnknownStream(e.stream_id))?;
            if list.last().is_some_and(|l| l.timestamp_ns >= e.timestamp_ns) {
                return Err(LogError::NotMonotonic {
                    stream_id: e.stream_id,
                    timestamp_ns: e.timestamp_ns,
                });
            }
            list.push(e);
        }
        Ok(LogReader {
            path: path.to_path_buf(),
            map,
            streams: parsed.streams,
            index,
            body_end: parsed.footer_offset,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn streams(&self) -> &[StreamInfo] {
        &self.streams
    }

    pub fn stream(&self, stream_id: u16) -> Result<&StreamInfo, LogError> {
        self.streams
            .iter()
            .find(|s| s.stream_id == stream_id)
            .ok_or(LogError::UnknownStream(stream_id))
    }

    /// The first camera stream.
    pub fn camera(&self) -> Result<&StreamInfo, LogError> {
        self.streams
            .iter()
            .find(|s| s.kind.is_camera())
            .ok_or_else(|| LogError::Decode("log has no camera stream".into()))
    }

    pub fn entries(&self, stream_id: u16) -> Result<&[IndexEntry], LogError> {
        self.index
            .get(&stream_id)
            .map(Vec::as_slice)
            .ok_or(LogError::UnknownStream(stream_id))
    }

    pub fn timestamps(&self, stream_id: u16) -> Result<Vec<u64>, LogError> {
        Ok(self.entries(stream_id)?.iter().map(|e| e.timestamp_ns).collect())
    }

    pub fn record_count(&self) -> usize {
        self.index.values().map(Vec::len).sum()
    }

    /// Time span of the log: one past the last timestamp of any stream.
    pub fn end_ns(&self) -> u64 {
        self.index
            .values()
            .filter_map(|v| v.last())
            .map(|e| e.timestamp_ns + 1)
            .max()
            .unwrap_or(0)
    }

    fn read_entry(&self, e: &IndexEntry) -> Result<&[u8], LogError> {
        let mismatch = LogError::IndexMismatch {
            offset: e.offset,
            stream_id: e.stream_id,
            timestamp_ns: e.timestamp_ns,
        };
        if e.offset >= self.body_end {
            return Err(mismatch);
        }
        let (sid, ts, payload) = chunk_at(&self.map, e.offset, self.body_end).map_err(|_| {
            LogError::IndexMismatch {
                offset: e.offset,
                stream_id: e.stream_id,
                timestamp_ns: e.timestamp_ns,
            }
        })?;
        if sid != e.stream_id || ts != e.timestamp_ns {
            return Err(mismatch);
        }
        Ok(payload)
    }

    /// Payload of one indexed record, borrowed from the mapping.
    pub fn payload(&self, stream_id: u16, position: usize) -> Result<&[u8], LogError> {
        let e = self
            .entries(stream_id)?
            .get(position)
            .ok_or_else(|| LogError::Decode(format!("no record {position} in stream {stream_id}")))?;
        self.read_entry(e)
    }

    /// Index positions of a stream's records with `t0 <= ts < t1`.
    pub fn slice_positions(&self, stream_id: u16, t0: u64, t1: u64) -> Result<std::ops::Range<usize>, LogError> {
        if t0 >= t1 {
            return Err(LogError::EmptySlice);
        }
        let entries = self.entries(stream_id)?;
        let lo = entries.partition_point(|e| e.timestamp_ns < t0);
        let hi = entries.partition_point(|e| e.timestamp_ns < t1);
        Ok(lo..hi.max(lo))
    }

    pub fn read_stream_slice(&self, stream_id: u16, t0: u64, t1: u64) -> Result<Vec<Record>, LogError> {
        let range = self.slice_positions(stream_id, t0, t1)?;
        let entries = self.entries(stream_id)?;
        entries[range]
            .iter()
            .map(|e| {
                Ok(Record {
                    stream_id,
                    timestamp_ns: e.timestamp_ns,
                    payload: self.read_entry(e)?.to_vec(),
                })
            })
            .collect()
    }

    /// All records of all streams with `t0 <= ts < t1`, ordered by
    /// `(timestamp, stream_id)`.
    pub fn read_slice(&self, t0: u64, t1: u64) -> Result<Vec<Record>, LogError> {
        let mut out = Vec::new();
        for &sid in self.index.keys() {
            out.extend(self.read_stream_slice(sid, t0, t1)?);
        }
        out.sort_by_key(|r| (r.timestamp_ns, r.stream_id));
        Ok(out)
    }

    /// Ground truth keyed by camera frame index, matched by timestamp.
    pub fn ground_truth_frames(&self) -> Result<BTreeMap<u64, Vec<GroundTruthObject>>, LogError> {
        let camera = self.camera()?;
        let Some(gt) = self.streams.iter().find(|s| s.kind == StreamKind::GroundTruth) else {
            return Ok(BTreeMap::new());
        };
        let by_ts: HashMap<u64, usize> = self
            .entries(camera.stream_id)?
            .iter()
            .enumerate()
            .map(|(i, e)| (e.timestamp_ns, i))
            .collect();
        let mut out = BTreeMap::new();
        for e in self.entries(gt.stream_id)? {
            if let Some(&frame) = by_ts.get(&e.timestamp_ns) {
                out.insert(frame as u64, decode_ground_truth(self.read_entry(e)?)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    BadMagic,
    UnsupportedVersion,
    UnexpectedEnd,
    UnknownStream,
    NonMonotonic,
    IndexMismatch,
    IndexIncomplete,
}

impl std::fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ViolationKind::BadMagic => "bad magic",
            ViolationKind::UnsupportedVersion => "unsupported version",
            ViolationKind::UnexpectedEnd => "unexpected end of container",
            ViolationKind::UnknownStream => "unknown stream",
            ViolationKind::NonMonotonic => "non-monotonic timestamp",
            ViolationKind::IndexMismatch => "index mismatch",
            ViolationKind::IndexIncomplete => "index incomplete",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub path: PathBuf,
    pub streams: Vec<StreamInfo>,
    pub records: u64,
    pub index_entries: u64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks structure, per-stream monotonicity and index consistency.
pub fn validate_log(path: &Path) -> Result<ValidationReport, LogError> {
    let bytes = std::fs::read(path)?;
    let mut report = ValidationReport {
        path: path.to_path_buf(),
        streams: Vec::new(),
        records: 0,
        index_entries: 0,
        violations: Vec::new(),
    };
    let push = |report: &mut ValidationReport, kind, detail: String| {
        report.violations.push(Violation { kind, detail })
    };
    let parsed = match parse_container(&bytes) {
        Ok(p) => p,
        Err(e) => {
            let kind = match e {
                LogError::BadMagic => ViolationKind::BadMagic,
                LogError::UnsupportedVersion(_) => ViolationKind::UnsupportedVersion,
                LogError::UnknownStream(_) | LogError::DuplicateStream(_) => ViolationKind::UnknownStream,
                _ => ViolationKind::UnexpectedEnd,
            };
            push(&mut report, kind, e.to_string());
            return Ok(report);
        }
    };
    report.streams = parsed.streams.clone();
    report.index_entries = parsed.entries.len() as u64;

    let mut scanned: BTreeMap<u16, u64> = parsed.streams.iter().map(|s| (s.stream_id, 0)).collect();
    let mut last: HashMap<u16, u64> = HashMap::new();
    let mut offset = parsed.header_len as u64;
    while offset < parsed.footer_offset {
        match chunk_at(&bytes, offset, parsed.footer_offset) {
            Ok((sid, ts, payload)) => {
                report.records += 1;
                match scanned.get_mut(&sid) {
                    Some(n) => *n += 1,
                    None => push(
                        &mut report,
                        ViolationKind::UnknownStream,
                        format!("record at offset {offset} names stream {sid}"),
                    ),
                }
                if let Some(prev) = last.insert(sid, ts) {
                    if ts <= prev {
                        push(
                            &mut report,
                            ViolationKind::NonMonotonic,
                            format!("stream {sid}: {ts} after {prev}"),
                        );
                    }
                }
                offset += CHUNK_HEADER_LEN as u64 + payload.len() as u64;
            }
            Err(_) => {
                push(
                    &mut report,
                    ViolationKind::UnexpectedEnd,
                    format!("record at offset {offset} overruns the index"),
                );
                break;
            }
        }
    }

    let mut indexed: BTreeMap<u16, u64> = BTreeMap::new();
    for e in &parsed.entries {
        *indexed.entry(e.stream_id).or_insert(0) += 1;
        let resolved = e.offset >= parsed.header_len as u64
            && chunk_at(&bytes, e.offset, parsed.footer_offset)
                .is_ok_and(|(sid, ts, _)| sid == e.stream_id && ts == e.timestamp_ns);
        if !resolved {
            push(
                &mut report,
                ViolationKind::IndexMismatch,
                format!(
                    "entry ({}, {}) at offset {} does not resolve",
                    e.stream_id, e.timestamp_ns, e.offset
                ),
            );
        }
    }
    for (sid, &n) in &scanned {
        let i = indexed.get(sid).copied().unwrap_or(0);
        if i != n {
            push(
                &mut report,
                ViolationKind::IndexIncomplete,
                format!("stream {sid}: {n} records, {i} index entries"),
            );
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config(seed: u64) -> SyntheticConfig {
        let mut c = SyntheticConfig::new(seed, Duration::from_secs(1));
        c.camera.native_width = 64;
        c.camera.native_height = 48;
        c
    }

    fn sha(path: &Path) -> Vec<u8> {
        use sha2::{Digest, Sha256};
        Sha256::digest(std::fs::read(path).unwrap()).to_vec()
    }

    #[test]
    fn ten_seconds_at_91_hz() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rlog");
        let summary = write_log(&SyntheticConfig::new(42, Duration::from_secs(10)), &path).unwrap();
        assert_eq!(summary.records_per_stream[&0], 910);
        let reader = LogReader::open(&path).unwrap();
        assert_eq!(reader.entries(0).unwrap().len(), 910);
        assert!(validate_log(&path).unwrap().is_valid());
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.rlog"), dir.path().join("b.rlog"));
        write_log(&small_config(42), &a).unwrap();
        write_log(&small_config(42), &b).unwrap();
        assert_eq!(sha(&a), sha(&b));
        let c = dir.path().join("c.rlog");
        write_log(&small_config(43), &c).unwrap();
        assert_ne!(sha(&a), sha(&c));
    }

    #[test]
    fn zero_duration_is_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_log(
            &SyntheticConfig::new(1, Duration::ZERO),
            &dir.path().join("x.rlog"),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "empty log");
    }

    #[test]
    fn slices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rlog");
        let mut config = small_config(7);
        config.duration_ns = 3_000_000_000;
        write_log(&config, &path).unwrap();
        let r = LogReader::open(&path).unwrap();
        assert_eq!(r.read_stream_slice(0, 0, 1_000_000_000).unwrap().len(), 91);
        assert!(r.read_stream_slice(0, 10_000_000_000, 11_000_000_000).unwrap().is_empty());
        let all = r.read_slice(0, r.end_ns()).unwrap();
        assert_eq!(all.len(), r.record_count());
        assert!(all.windows(2).all(|w| w[0].timestamp_ns <= w[1].timestamp_ns));
        assert!(matches!(r.read_slice(5, 5), Err(LogError::EmptySlice)));
    }

    #[test]
    fn corrupted_index_offset_is_one_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rlog");
        write_log(&small_config(3), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let footer = le_u64(&bytes, bytes.len() - 8) as usize;
        let entry = footer + 12 + 5 * INDEX_ENTRY_LEN;
        let off = le_u64(&bytes, entry + 10) + 3;
        bytes[entry + 10..entry + 18].copy_from_slice(&off.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let report = validate_log(&path).unwrap();
        assert_eq!(report.violations.len(), 1, "{:?}", report.violations);
        assert_eq!(report.violations[0].kind, ViolationKind::IndexMismatch);
        assert_eq!(report.violations[0].kind.to_string(), "index mismatch");
        let reader = LogReader::open(&path).unwrap();
        let err = reader.read_slice(0, reader.end_ns()).unwrap_err();
        assert!(err.to_string().starts_with("index mismatch"));
    }

    #[test]
    fn truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rlog");
        write_log(&small_config(3), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let report = validate_log(&path).unwrap();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind.to_string(), "unexpected end of container");
        assert!(matches!(LogReader::open(&path), Err(LogError::UnexpectedEnd)));
    }

    #[test]
    fn bad_magic_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rlog");
        write_log(&small_config(3), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(validate_log(&path).unwrap().violations[0].kind, ViolationKind::BadMagic);
    }

    #[test]
    fn rendered_boxes_match_ground_truth() {
        let config = small_config(11);
        let scene = config.scene();
        let decoder = SyntheticDecoder::new();
        for k in [0u64, 17, 90] {
            let ts = sample_timestamp(k, 91_000);
            let frame = decoder
                .decode(&config.camera, &scene.encode_frame(k, ts))
                .unwrap();
            let objects = scene.objects_at(ts);
            let gt = scene.ground_truth_at(ts);
            for (o, g) in objects.iter().zip(&gt) {
                assert_eq!(o.bbox, g.bbox);
                // The object's intensity appears exactly on its box.
                for y in 0..frame.height {
                    for x in 0..frame.width {
                        let inside = x >= o.bbox.x
                            && x < o.bbox.x + o.bbox.w
                            && y >= o.bbox.y
                            && y < o.bbox.y + o.bbox.h;
                        assert_eq!(frame.get(x, y, 0) == o.intensity, inside, "({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn raw_codec_matches_scene_rendering() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("scene.rlog"), dir.path().join("raw.rlog"));
        let scene_cfg = small_config(5);
        let mut raw_cfg = small_config(5);
        raw_cfg.camera.codec = Codec::Raw16;
        write_log(&scene_cfg, &a).unwrap();
        write_log(&raw_cfg, &b).unwrap();
        let (ra, rb) = (LogReader::open(&a).unwrap(), LogReader::open(&b).unwrap());
        let d = SyntheticDecoder::new();
        for k in [0, 45, 90] {
            let fa = d.decode(ra.camera().unwrap(), ra.payload(0, k).unwrap()).unwrap();
            let fb = d.decode(rb.camera().unwrap(), rb.payload(0, k).unwrap()).unwrap();
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn ground_truth_keyed_by_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rlog");
        let config = small_config(9);
        write_log(&config, &path).unwrap();
        let r = LogReader::open(&path).unwrap();
        let gt = r.ground_truth_frames().unwrap();
        assert_eq!(gt.len(), 91);
        let scene = config.scene();
        assert_eq!(gt[&10], scene.ground_truth_at(sample_timestamp(10, 91_000)));
    }

    #[test]
    fn lidar_points_are_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rlog");
        let mut config = small_config(9);
        config.lidar_points = Some(100);
        write_log(&config, &path).unwrap();
        let r = LogReader::open(&path).unwrap();
        let lidar = r.streams().iter().find(|s| s.kind == StreamKind::Lidar).unwrap();
        assert_eq!(r.entries(lidar.stream_id).unwrap().len(), 10);
        assert_eq!(r.payload(lidar.stream_id, 0).unwrap().len(), 1600);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn payloads_round_trip(
            payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..200), 1..40),
            gaps in proptest::collection::vec(1u64..1_000_000, 40),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.rlog");
            let streams = [StreamInfo::mono_camera(3, Codec::Raw16)];
            let mut w = LogWriter::create(&path, &streams).unwrap();
            let mut ts = 0;
            for (p, g) in payloads.iter().zip(&gaps) {
                ts += g;
                w.append(3, ts, p).unwrap();
            }
            w.finish().unwrap();
            prop_assert!(validate_log(&path).unwrap().is_valid());
            let r = LogReader::open(&path).unwrap();
            let back = r.read_stream_slice(3, 0, u64::MAX).unwrap();
            prop_assert_eq!(back.len(), payloads.len());
            for (rec, p) in back.iter().zip(&payloads) {
                prop_assert_eq!(&rec.payload, p);
            }
        }
    }
}
