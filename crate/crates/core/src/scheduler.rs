//! The evaluation loop.
//!
//! Parallel mode reads the log one time slice at a time, decodes every frame
//! once, and for each preset in table order resamples the selected frames
//! straight into bus slots. Every plugin sees every published frame through
//! its own consumer on the shared bus.
//!
//! Naive mode is the baseline: for every (plugin, preset) pair the whole log
//! is fetched and decoded again and fed to that plugin alone.
//!
//! Plugins run either as child processes or as threads of this process. In
//! both cases the harness holds the bus consumer on the plugin's behalf: a
//! session thread takes the next frame, sends its descriptor, waits for
//! RESULT and RELEASE, and releases the slot.

use std::collections::{BTreeMap, BTreeSet};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frame::Frame;
use crate::framebus::{BusConfig, BusConsumer, BusError, FrameBus, FrameMeta};
use crate::logstore::{Decoder, GroundTruthObject, LogError, LogReader, StreamInfo, SyntheticDecoder};
use crate::plugin::{connect_and_run, PluginProgram, PluginSpec};
use crate::pluginproto::{
    handshake, send_frame, write_message, Detection, FrameDescriptor, Message, Registry, TaskKind,
    Welcome,
};
use crate::presets::{decimate, preset_by_id, resample_into, CropGeometry, Preset, PresetError};
use crate::scoring::{score_detections, timing_stats, AccuracyScore, FrameDetections, TimingStats};

pub const REPORT_SCHEMA: &str = "reedsb.run/1";
pub const COMPARISON_SCHEMA: &str = "reedsb.compare/1";
/// Report keys that carry wall-clock measurements.
pub const TIMING_KEYS: [&str; 3] = ["timing", "wall_clock_ns", "wall_clock_ratio"];

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("no plugins")]
    NoPlugins,
    #[error("no presets")]
    NoPresets,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("log: {0}")]
    Log(#[from] LogError),
    #[error("preset: {0}")]
    Preset(#[from] PresetError),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("cannot launch plugin {plugin}: {reason}")]
    Launch { plugin: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Parallel,
    Naive,
}

/// How bundled plugins are started.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Launcher {
    /// As threads of the harness process.
    #[default]
    InProcess,
    /// As `EXE plugin ...` child processes.
    Process { exe: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub log: PathBuf,
    pub presets: Vec<u16>,
    pub plugins: Vec<PluginSpec>,
    pub mode: Mode,
    pub slice_ns: u64,
    pub slot_count: u32,
    pub seed: u64,
    /// Artificial decode cost per frame.
    pub decode_cost_ns: u64,
    pub release_timeout_ms: u64,
    /// Only the first `max_frames` camera frames are evaluated.
    pub max_frames: Option<u64>,
    #[serde(skip)]
    pub launcher: Launcher,
}

impl RunConfig {
    pub fn new(log: impl Into<PathBuf>, plugins: Vec<PluginSpec>) -> Self {
        RunConfig {
            log: log.into(),
            presets: (0..12).collect(),
            plugins,
            mode: Mode::Parallel,
            slice_ns: 1_000_000_000,
            slot_count: 8,
            seed: 0,
            decode_cost_ns: 0,
            release_timeout_ms: 30_000,
            max_frames: None,
            launcher: Launcher::InProcess,
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.plugins.is_empty() {
            return Err(SchedulerError::NoPlugins);
        }
        if self.presets.is_empty() {
            return Err(SchedulerError::NoPresets);
        }
        if self.slice_ns == 0 {
            return Err(SchedulerError::InvalidConfig("slice length must be positive".into()));
        }
        if self.slot_count == 0 {
            return Err(SchedulerError::InvalidConfig("slot_count must be at least 1".into()));
        }
        if self.plugins.len() > crate::framebus::MAX_CONSUMERS as usize {
            return Err(SchedulerError::InvalidConfig(format!(
                "at most {} plugins",
                crate::framebus::MAX_CONSUMERS
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &self.presets {
            preset_by_id(*id)?;
            if !seen.insert(*id) {
                return Err(SchedulerError::InvalidConfig(format!("preset {id} listed twice")));
            }
        }
        let mut names = BTreeSet::new();
        for p in &self.plugins {
            if !names.insert(p.name.as_str()) {
                return Err(SchedulerError::InvalidConfig(format!("duplicate plugin {:?}", p.name)));
            }
        }
        Ok(())
    }

    /// Stable identifier derived from the configuration.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    fn release_timeout(&self) -> Duration {
        Duration::from_millis(self.release_timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureRecord {
    pub plugin: String,
    pub preset_id: Option<u16>,
    pub frame_id: Option<u64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunCounters {
    /// Distinct camera frames read from the log.
    pub frames_read: u64,
    /// Record fetches from the log, counting re-reads.
    pub fetches: u64,
    pub decode_count: u64,
    pub bytes_decoded: u64,
    pub publishes: u64,
    pub results: u64,
    pub failures: Vec<FailureRecord>,
}

impl RunCounters {
    pub const CSV_HEADER: &'static str =
        "frames_read,fetches,decode_count,bytes_decoded,publishes,results,failures";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.frames_read,
            self.fetches,
            self.decode_count,
            self.bytes_decoded,
            self.publishes,
            self.results,
            self.failures.len()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryTiming {
    /// FRAME-to-RESULT time measured by the harness; leaderboards rank on this.
    pub harness: TimingStats,
    /// Execution time as reported by the plugin.
    pub reported: TimingStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportEntry {
    pub plugin: String,
    pub task: TaskKind,
    pub preset_id: u16,
    pub width: u32,
    pub height: u32,
    pub rate: String,
    pub rate_hz: f64,
    pub status: EntryStatus,
    pub failure: Option<String>,
    pub frames_expected: u64,
    pub frames_processed: u64,
    pub accuracy: AccuracyScore,
    pub timing: Option<EntryTiming>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusTotals {
    pub buses: u64,
    pub stale_reads: u64,
    pub refcount_underflows: u64,
    /// Every bus ended with all slots free.
    pub quiescent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema: String,
    pub run_id: String,
    pub config: RunConfig,
    pub complete: bool,
    pub frames: u64,
    pub entries: Vec<ReportEntry>,
    pub counters: RunCounters,
    pub bus: BusTotals,
    pub wall_clock_ns: u64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Removes wall-clock fields from a JSON document, recursively.
pub fn strip_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for key in TIMING_KEYS {
                map.remove(key);
            }
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// Everything a run produced, including per-consumer delivery logs.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    /// `(frame_id, preset_id)` in delivery order, per plugin.
    pub deliveries: BTreeMap<String, Vec<(u64, u16)>>,
}

#[derive(Debug, Clone)]
struct FrameOutcome {
    preset_id: u16,
    frame_id: u64,
    exec_ns: u64,
    harness_ns: u64,
    detections: Vec<Detection>,
}

#[derive(Debug, Clone)]
struct Failure {
    preset_id: Option<u16>,
    frame_id: Option<u64>,
    reason: String,
}

/// A plugin under evaluation: its connection and, for process plugins, the child.
struct Session {
    spec: PluginSpec,
    task: TaskKind,
    stream: Option<UnixStream>,
    child: Arc<Mutex<Option<Child>>>,
    thread: Option<JoinHandle<()>>,
    outcomes: Vec<FrameOutcome>,
    deliveries: Vec<(u64, u16)>,
    failure: Option<Failure>,
}

impl Session {
    fn kill(&self) {
        if let Some(s) = &self.stream {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        kill_child(&self.child);
    }

    fn finish(&mut self) {
        if let Some(stream) = &mut self.stream {
            let _ = write_message(stream, &Message::Bye);
        }
        let deadline = Instant::now() + Duration::from_secs(10);
        let mut guard = self.child.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(child) = guard.as_mut() {
            loop {
                match child.try_wait() {
                    Ok(Some(_)) | Err(_) => break,
                    Ok(None) if Instant::now() >= deadline => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                    Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                }
            }
        }
        drop(guard);
        if let Some(s) = &self.stream {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(t) = self.thread.take() {
            if self.failure.is_none() {
                let _ = t.join();
            }
        }
    }
}

fn kill_child(child: &Mutex<Option<Child>>) {
    let mut guard = child.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(c) = guard.as_mut() {
        let _ = c.kill();
        let _ = c.wait();
    }
}

/// Drives one plugin over one bus until end of stream or failure.
fn drive(
    stream: &mut UnixStream,
    consumer: &mut BusConsumer,
    region: &str,
    timeout: Duration,
    child: &Mutex<Option<Child>>,
    outcomes: &mut Vec<FrameOutcome>,
) -> Option<Failure> {
    loop {
        let delivery = match consumer.consume_next() {
            Ok(d) => d,
            Err(BusError::EndOfStream) => return None,
            Err(e) => {
                return Some(Failure {
                    preset_id: None,
                    frame_id: None,
                    reason: e.to_string(),
                })
            }
        };
        let meta = delivery.meta;
        let descriptor = FrameDescriptor {
            frame_id: meta.frame_id,
            preset_id: meta.preset_id,
            region: region.to_string(),
            slot_index: delivery.handle.slot_index,
            generation: delivery.handle.generation,
            meta,
        };
        let fail = |reason: String| Failure {
            preset_id: Some(meta.preset_id),
            frame_id: Some(meta.frame_id),
            reason,
        };
        match send_frame(stream, &descriptor, timeout) {
            Ok(exchange) => {
                if let Err(e) = consumer.release(delivery.handle) {
                    consumer.deregister();
                    return Some(fail(e.to_string()));
                }
                outcomes.push(FrameOutcome {
                    preset_id: meta.preset_id,
                    frame_id: meta.frame_id,
                    exec_ns: exchange.result.exec_time_ns,
                    harness_ns: exchange.harness_ns,
                    detections: exchange.result.detections,
                });
            }
            Err(e) => {
                // Timed out: leave the bus and drop the plugin.
                consumer.deregister();
                let _ = stream.shutdown(std::net::Shutdown::Both);
                kill_child(child);
                return Some(fail(e.to_string()));
            }
        }
    }
}

fn unique_socket_path() -> PathBuf {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    crate::scratch_dir().join(format!(
        "reedsb-{}-{}.sock",
        std::process::id(),
        NEXT.fetch_add(1, Ordering::Relaxed)
    ))
}

struct SocketGuard(PathBuf);

impl Drop for SocketGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Starts every plugin in order and registers it; consumer ids follow the
/// plugin order.
fn launch_all(config: &RunConfig, bus_welcome: Welcome) -> Result<Vec<Session>, SchedulerError> {
    let socket = unique_socket_path();
    let listener = UnixListener::bind(&socket)?;
    let _guard = SocketGuard(socket.clone());
    listener.set_nonblocking(true)?;
    let mut registry = Registry::new(bus_welcome);
    let mut sessions: Vec<Session> = Vec::new();
    for (i, spec) in config.plugins.iter().enumerate() {
        let seed = config.seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let launch_err = |reason: String| SchedulerError::Launch {
            plugin: spec.name.clone(),
            reason,
        };
        let mut child = None;
        let mut thread = None;
        match (&spec.program, &config.launcher) {
            (PluginProgram::Builtin(b), Launcher::InProcess) => {
                let mut algorithm = b.instantiate(Some(&config.log), seed).map_err(launch_err)?;
                let socket = socket.clone();
                let name = spec.name.clone();
                thread = Some(std::thread::spawn(move || {
                    if let Err(e) = connect_and_run(&socket, &name, algorithm.as_mut()) {
                        log::debug!("plugin {name} stopped: {e}");
                    }
                }));
            }
            (PluginProgram::Builtin(b), Launcher::Process { exe }) => {
                let mut cmd = Command::new(exe);
                cmd.arg("plugin")
                    .arg("--socket")
                    .arg(&socket)
                    .arg("--name")
                    .arg(&spec.name)
                    .arg("--log")
                    .arg(&config.log)
                    .arg("--seed")
                    .arg(seed.to_string())
                    .args(b.to_args());
                child = Some(spawn(cmd).map_err(|e| launch_err(e.to_string()))?);
            }
            (PluginProgram::Exec { program, args }, _) => {
                let mut cmd = Command::new(program);
                cmd.args(args)
                    .arg("--socket")
                    .arg(&socket)
                    .arg("--name")
                    .arg(&spec.name);
                child = Some(spawn(cmd).map_err(|e| launch_err(e.to_string()))?);
            }
        }
        let child = Arc::new(Mutex::new(child));
        let mut stream = match accept(&listener, &child, Duration::from_secs(30)) {
            Ok(s) => s,
            Err(reason) => {
                kill_child(&child);
                sessions.iter().for_each(Session::kill);
                return Err(launch_err(reason));
            }
        };
        stream.set_nonblocking(false)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        let registration = match handshake(&mut stream, &mut registry) {
            Ok(r) => r,
            Err(e) => {
                kill_child(&child);
                sessions.iter().for_each(Session::kill);
                return Err(launch_err(e.to_string()));
            }
        };
        debug_assert_eq!(registration.consumer_id as usize, i);
        stream.set_read_timeout(Some(config.release_timeout()))?;
        sessions.push(Session {
            spec: spec.clone(),
            task: registration.task,
            stream: Some(stream),
            child,
            thread,
            outcomes: Vec::new(),
            deliveries: Vec::new(),
            failure: None,
        });
    }
    Ok(sessions)
}

fn spawn(mut cmd: Command) -> std::io::Result<Child> {
    cmd.stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::inherit());
    cmd.spawn()
}

fn accept(listener: &UnixListener, child: &Mutex<Option<Child>>, timeout: Duration) -> Result<UnixStream, String> {
    let deadline = Instant::now() + timeout;
    loop {
        match listener.accept() {
            Ok((stream, _)) => return Ok(stream),
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
            Err(e) => return Err(e.to_string()),
        }
        if let Some(c) = child.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            if let Ok(Some(status)) = c.try_wait() {
                return Err(format!("exited before connecting ({status})"));
            }
        }
        if Instant::now() >= deadline {
            return Err("did not connect in time".into());
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

/// Per-preset plan: geometry and which frames the preset keeps.
struct PresetPlan {
    preset: Preset,
    geometry: CropGeometry,
    rate_hz: f64,
    selected: Vec<bool>,
    expected: u64,
}

struct Plan {
    camera: StreamInfo,
    timestamps: Vec<u64>,
    presets: Vec<PresetPlan>,
    slot_capacity: u64,
}

fn plan(reader: &LogReader, config: &RunConfig) -> Result<Plan, SchedulerError> {
    let camera = *reader.camera()?;
    let mut timestamps = reader.timestamps(camera.stream_id)?;
    if let Some(max) = config.max_frames {
        timestamps.truncate(max as usize);
    }
    if timestamps.is_empty() {
        return Err(SchedulerError::Log(LogError::EmptyLog));
    }
    let mut ids = config.presets.clone();
    ids.sort_unstable();
    let channels = camera.kind.channels();
    let mut presets = Vec::new();
    for id in ids {
        let preset = preset_by_id(id)?;
        let geometry = preset.geometry_for(camera.native_width, camera.native_height)?;
        let rate_mhz = preset.rate.effective_mhz(camera.rate_mhz as u64);
        let mut selected = vec![false; timestamps.len()];
        for i in decimate(&timestamps, rate_mhz)? {
            selected[i] = true;
        }
        presets.push(PresetPlan {
            preset,
            geometry,
            rate_hz: rate_mhz as f64 / 1000.0,
            expected: selected.iter().filter(|&&s| s).count() as u64,
            selected,
        });
    }
    let slot_capacity = presets
        .iter()
        .map(|p| p.preset.frame_bytes(channels) as u64)
        .max()
        .unwrap_or(1);
    Ok(Plan {
        camera,
        timestamps,
        presets,
        slot_capacity,
    })
}

impl Plan {
    /// Index ranges of consecutive time slices.
    fn slices(&self, slice_ns: u64) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut t0 = self.timestamps[0];
        while start < self.timestamps.len() {
            let t1 = t0.saturating_add(slice_ns);
            let end = self.timestamps.partition_point(|&t| t < t1);
            if end > start {
                out.push(start..end);
            }
            start = end;
            t0 = t1;
        }
        out
    }
}

fn bus_config(config: &RunConfig, plan: &Plan, consumers: u32) -> BusConfig {
    let release = config.release_timeout();
    BusConfig {
        slot_count: config.slot_count,
        slot_capacity: plan.slot_capacity,
        consumer_count: consumers,
        publish_timeout: release * 2 + Duration::from_secs(5),
        release_timeout: release,
    }
}

fn publish_frame(
    bus: &mut FrameBus,
    frame: &Frame,
    index: usize,
    plan: &Plan,
    pp: &PresetPlan,
) -> Result<(), SchedulerError> {
    let g = &pp.geometry;
    let channels = frame.channels;
    let samples = g.out_w as usize * g.out_h as usize * channels as usize;
    let handle = bus.acquire_slot()?;
    let payload = bus.payload_mut(handle)?;
    let words: &mut [u16] = bytemuck::cast_slice_mut(&mut payload[..samples * 2]);
    resample_into(frame, g, words)?;
    bus.publish(
        handle,
        FrameMeta {
            frame_id: index as u64,
            timestamp_ns: plan.timestamps[index],
            source_stream: plan.camera.stream_id,
            preset_id: pp.preset.preset_id,
            width: g.out_w,
            height: g.out_h,
            stride: g.out_w * channels as u32 * 2,
            channels,
            bit_depth: frame.bit_depth,
        },
    )?;
    Ok(())
}

fn fetch_decode(
    reader: &LogReader,
    decoder: &dyn Decoder,
    plan: &Plan,
    index: usize,
    frame: &mut Frame,
    counters: &mut RunCounters,
) -> Result<(), SchedulerError> {
    let payload = reader.payload(plan.camera.stream_id, index)?;
    counters.fetches += 1;
    decoder.decode_into(&plan.camera, payload, frame)?;
    counters.decode_count += 1;
    counters.bytes_decoded += frame.byte_len() as u64;
    Ok(())
}

fn spawn_driver(
    session: &mut Session,
    mut consumer: BusConsumer,
    region: String,
    timeout: Duration,
) -> JoinHandle<(UnixStream, BusConsumer, Vec<FrameOutcome>, Option<Failure>)> {
    let mut stream = session.stream.take().expect("session has a stream");
    let child = session.child.clone();
    std::thread::spawn(move || {
        let mut outcomes = Vec::new();
        let failure = drive(&mut stream, &mut consumer, &region, timeout, &child, &mut outcomes);
        (stream, consumer, outcomes, failure)
    })
}

fn collect_driver(
    session: &mut Session,
    handle: JoinHandle<(UnixStream, BusConsumer, Vec<FrameOutcome>, Option<Failure>)>,
) {
    match handle.join() {
        Ok((stream, mut consumer, outcomes, failure)) => {
            session.stream = Some(stream);
            session.deliveries.extend(consumer.take_delivery_log());
            session.outcomes.extend(outcomes);
            if failure.is_some() && session.failure.is_none() {
                session.failure = failure;
            }
        }
        Err(_) => {
            session.failure.get_or_insert(Failure {
                preset_id: None,
                frame_id: None,
                reason: "session thread panicked".into(),
            });
        }
    }
}

fn add_bus(totals: &mut BusTotals, bus: &FrameBus) {
    let quiescent = bus.wait_quiescent(Duration::from_secs(5));
    let stats = bus.stats();
    totals.buses += 1;
    totals.stale_reads += stats.stale_reads;
    totals.refcount_underflows += stats.refcount_underflows;
    totals.quiescent = (totals.buses == 1 || totals.quiescent) && quiescent;
}

/// Runs an evaluation with the synthetic decoder.
pub fn run(config: &RunConfig) -> Result<RunOutcome, SchedulerError> {
    let decoder = SyntheticDecoder::with_cost(Duration::from_nanos(config.decode_cost_ns));
    run_with_decoder(config, &decoder)
}

pub fn run_with_decoder(config: &RunConfig, decoder: &dyn Decoder) -> Result<RunOutcome, SchedulerError> {
    config.validate()?;
    let started = Instant::now();
    let reader = LogReader::open(&config.log)?;
    let plan = plan(&reader, config)?;
    let m = config.plugins.len() as u32;
    let welcome = Welcome {
        consumer_id: 0,
        slot_count: config.slot_count,
        slot_capacity: plan.slot_capacity,
        consumer_count: match config.mode {
            Mode::Parallel => m,
            Mode::Naive => 1,
        },
    };
    let mut sessions = launch_all(config, welcome)?;
    let mut counters = RunCounters {
        frames_read: plan.timestamps.len() as u64,
        ..RunCounters::default()
    };
    let mut totals = BusTotals::default();
    let aborted = match config.mode {
        Mode::Parallel => run_parallel(config, &reader, decoder, &plan, &mut sessions, &mut counters, &mut totals),
        Mode::Naive => run_naive(config, &reader, decoder, &plan, &mut sessions, &mut counters, &mut totals),
    };
    for s in &mut sessions {
        s.finish();
    }
    let truth = reader.ground_truth_frames()?;
    let report = build_report(config, &plan, &sessions, &truth, counters, totals, aborted, started);
    let deliveries = sessions
        .iter_mut()
        .map(|s| (s.spec.name.clone(), std::mem::take(&mut s.deliveries)))
        .collect();
    Ok(RunOutcome { report, deliveries })
}

/// Returns the reason the producer stopped early, if it did.
fn run_parallel(
    config: &RunConfig,
    reader: &LogReader,
    decoder: &dyn Decoder,
    plan: &Plan,
    sessions: &mut [Session],
    counters: &mut RunCounters,
    totals: &mut BusTotals,
) -> Option<String> {
    let mut bus = match FrameBus::create(bus_config(config, plan, sessions.len() as u32)) {
        Ok(b) => b,
        Err(e) => return Some(e.to_string()),
    };
    let mut drivers = Vec::new();
    for (i, s) in sessions.iter_mut().enumerate() {
        match BusConsumer::attach(bus.name(), i as u32) {
            Ok(c) => drivers.push(Some(spawn_driver(s, c, bus.name().to_string(), config.release_timeout()))),
            Err(e) => {
                s.failure = Some(Failure {
                    preset_id: None,
                    frame_id: None,
                    reason: e.to_string(),
                });
                let _ = bus.deregister(i as u32);
                drivers.push(None);
            }
        }
    }

    let mut pool: Vec<Frame> = Vec::new();
    let mut aborted = None;
    'slices: for range in plan.slices(config.slice_ns) {
        // Decode each frame of the slice once.
        pool.resize_with(range.len(), || Frame::new(0, 0, 1, plan.camera.bit_depth));
        for (slot, index) in range.clone().enumerate() {
            if let Err(e) = fetch_decode(reader, decoder, plan, index, &mut pool[slot], counters) {
                aborted = Some(e.to_string());
                break 'slices;
            }
        }
        for pp in &plan.presets {
            for (slot, index) in range.clone().enumerate() {
                if !pp.selected[index] {
                    continue;
                }
                if let Err(e) = publish_frame(&mut bus, &pool[slot], index, plan, pp) {
                    aborted = Some(e.to_string());
                    break 'slices;
                }
                counters.publishes += 1;
            }
        }
        log::info!(
            "slice {}..{} published ({} publishes)",
            range.start,
            range.end,
            counters.publishes
        );
    }
    drop(pool);
    bus.shutdown();
    for (s, d) in sessions.iter_mut().zip(drivers) {
        if let Some(d) = d {
            collect_driver(s, d);
        }
    }
    add_bus(totals, &bus);
    aborted
}

fn run_naive(
    config: &RunConfig,
    reader: &LogReader,
    decoder: &dyn Decoder,
    plan: &Plan,
    sessions: &mut [Session],
    counters: &mut RunCounters,
    totals: &mut BusTotals,
) -> Option<String> {
    let mut frame = Frame::new(0, 0, 1, plan.camera.bit_depth);
    for s in sessions.iter_mut() {
        for pp in &plan.presets {
            if s.failure.is_some() {
                break;
            }
            let mut bus = match FrameBus::create(bus_config(config, plan, 1)) {
                Ok(b) => b,
                Err(e) => return Some(e.to_string()),
            };
            let consumer = match BusConsumer::attach(bus.name(), 0) {
                Ok(c) => c,
                Err(e) => return Some(e.to_string()),
            };
            let driver = spawn_driver(s, consumer, bus.name().to_string(), config.release_timeout());
            let mut aborted = None;
            'frames: for index in 0..plan.timestamps.len() {
                if let Err(e) = fetch_decode(reader, decoder, plan, index, &mut frame, counters) {
                    aborted = Some(e.to_string());
                    break 'frames;
                }
                if pp.selected[index] {
                    if let Err(e) = publish_frame(&mut bus, &frame, index, plan, pp) {
                        aborted = Some(e.to_string());
                        break 'frames;
                    }
                    counters.publishes += 1;
                }
            }
            bus.shutdown();
            collect_driver(s, driver);
            add_bus(totals, &bus);
            if aborted.is_some() {
                return aborted;
            }
        }
        log::info!("naive pass for {} done", s.spec.name);
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    config: &RunConfig,
    plan: &Plan,
    sessions: &[Session],
    truth: &BTreeMap<u64, Vec<GroundTruthObject>>,
    mut counters: RunCounters,
    bus: BusTotals,
    aborted: Option<String>,
    started: Instant,
) -> RunReport {
    let mut entries = Vec::new();
    for s in sessions {
        counters.results += s.outcomes.len() as u64;
        if let Some(f) = &s.failure {
            counters.failures.push(FailureRecord {
                plugin: s.spec.name.clone(),
                preset_id: f.preset_id,
                frame_id: f.frame_id,
                reason: f.reason.clone(),
            });
        }
        for pp in &plan.presets {
            let id = pp.preset.preset_id;
            let outcomes: Vec<&FrameOutcome> =
                s.outcomes.iter().filter(|o| o.preset_id == id).collect();
            let processed = outcomes.len() as u64;
            let failure = match (&s.failure, &aborted) {
                (_, Some(reason)) if processed < pp.expected => Some(format!("run aborted: {reason}")),
                (Some(f), _) if processed < pp.expected => Some(f.reason.clone()),
                _ if processed < pp.expected => {
                    Some(format!("processed {processed} of {} frames", pp.expected))
                }
                _ => None,
            };
            let accuracy = if s.task == TaskKind::Detection {
                let frames: Vec<FrameDetections> = outcomes
                    .iter()
                    .map(|o| FrameDetections {
                        frame_id: o.frame_id,
                        detections: o.detections.clone(),
                    })
                    .collect();
                score_detections(&frames, truth, &pp.geometry)
            } else {
                AccuracyScore::unscored(s.task)
            };
            let reported: Vec<u64> = outcomes.iter().map(|o| o.exec_ns).collect();
            let harness: Vec<u64> = outcomes.iter().map(|o| o.harness_ns).collect();
            let timing = match (timing_stats(&harness, pp.rate_hz), timing_stats(&reported, pp.rate_hz)) {
                (Ok(harness), Ok(reported)) => Some(EntryTiming { harness, reported }),
                _ => None,
            };
            entries.push(ReportEntry {
                plugin: s.spec.name.clone(),
                task: s.task,
                preset_id: id,
                width: pp.preset.width,
                height: pp.preset.height,
                rate: pp.preset.rate.to_string(),
                rate_hz: pp.rate_hz,
                status: if failure.is_some() { EntryStatus::Failed } else { EntryStatus::Ok },
                failure,
                frames_expected: pp.expected,
                frames_processed: processed,
                accuracy,
                timing,
            });
        }
    }
    if let Some(reason) = &aborted {
        counters.failures.push(FailureRecord {
            plugin: String::new(),
            preset_id: None,
            frame_id: None,
            reason: format!("run aborted: {reason}"),
        });
    }
    RunReport {
        schema: REPORT_SCHEMA.to_string(),
        run_id: config.run_id(),
        config: config.clone(),
        complete: aborted.is_none(),
        frames: plan.timestamps.len() as u64,
        entries,
        counters,
        bus,
        wall_clock_ns: started.elapsed().as_nanos() as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSummary {
    pub decode_count: u64,
    pub fetches: u64,
    pub bytes_decoded: u64,
    pub wall_clock_ns: u64,
    pub complete: bool,
}

impl From<&RunReport> for ModeSummary {
    fn from(r: &RunReport) -> Self {
        ModeSummary {
            decode_count: r.counters.decode_count,
            fetches: r.counters.fetches,
            bytes_decoded: r.counters.bytes_decoded,
            wall_clock_ns: r.wall_clock_ns,
            complete: r.complete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonReport {
    pub schema: String,
    pub frames: u64,
    pub plugins: u64,
    pub presets: u64,
    pub parallel: ModeSummary,
    pub naive: ModeSummary,
    /// naive / parallel decode count.
    pub decode_ratio: f64,
    pub bytes_ratio: f64,
    /// naive / parallel wall clock.
    pub wall_clock_ratio: f64,
    /// The counted decodes equal the cost model's n and n*m*p.
    pub model_agrees: bool,
    pub partial: bool,
}

/// Runs both modes on the same configuration.
pub fn compare_modes(config: &RunConfig) -> Result<(ComparisonReport, RunOutcome, RunOutcome), SchedulerError> {
    let decoder = SyntheticDecoder::with_cost(Duration::from_nanos(config.decode_cost_ns));
    compare_modes_with_decoder(config, &decoder)
}

pub fn compare_modes_with_decoder(
    config: &RunConfig,
    decoder: &dyn Decoder,
) -> Result<(ComparisonReport, RunOutcome, RunOutcome), SchedulerError> {
    let parallel = run_with_decoder(
        &RunConfig {
            mode: Mode::Parallel,
            ..config.clone()
        },
        decoder,
    )?;
    let naive = run_with_decoder(
        &RunConfig {
            mode: Mode::Naive,
            ..config.clone()
        },
        decoder,
    )?;
    let (p, n) = (&parallel.report, &naive.report);
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let frames = p.frames;
    let plugins = config.plugins.len() as u64;
    let presets = config.presets.len() as u64;
    let model = crate::planner::decode_savings(crate::planner::SavingsModel {
        n: frames,
        m: plugins,
        p: presets,
        volume_bytes: p.counters.bytes_decoded as f64,
    })
    .ok();
    let partial = !p.complete
        || !n.complete
        || !p.counters.failures.is_empty()
        || !n.counters.failures.is_empty();
    let report = ComparisonReport {
        schema: COMPARISON_SCHEMA.to_string(),
        frames,
        plugins,
        presets,
        parallel: p.into(),
        naive: n.into(),
        decode_ratio: ratio(n.counters.decode_count, p.counters.decode_count),
        bytes_ratio: ratio(n.counters.bytes_decoded, p.counters.bytes_decoded),
        wall_clock_ratio: ratio(n.wall_clock_ns, p.wall_clock_ns),
        model_agrees: model.is_some_and(|m| {
            m.parallel_ops == p.counters.decode_count && m.naive_ops == n.counters.decode_count
        }),
        partial,
    };
    Ok((report, parallel, naive))
}

/// Reads a run report from disk.
pub fn load_report(path: &Path) -> Result<RunReport, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}
