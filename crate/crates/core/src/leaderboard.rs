//! Ranked leaderboards built from run reports.
//!
//! The store is an append-only JSON-lines file. Each line holds every entry
//! of one ingested run; a later line with the same run id supersedes the
//! earlier one. The in-memory index is rebuilt by replaying the file.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pluginproto::TaskKind;
use crate::presets::{preset_by_id, table_csv};
use crate::scheduler::{EntryStatus, RunReport, REPORT_SCHEMA};

pub const LEADERBOARD_SCHEMA: &str = "reedsb.leaderboard/1";

#[derive(Debug, Error)]
pub enum LeaderboardError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("unknown preset {0}")]
    UnknownPreset(u16),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("corrupt store at line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderboardEntry {
    pub algorithm: String,
    pub run_id: String,
    pub task: TaskKind,
    pub preset_id: u16,
    pub metric: String,
    pub accuracy: f64,
    /// Harness-measured per-frame time.
    pub mean_ns: f64,
    pub std_ns: f64,
    pub feasible: bool,
    pub status: EntryStatus,
    pub frames: u64,
    /// Seconds since the Unix epoch.
    pub submitted_at: u64,
}

impl LeaderboardEntry {
    /// Ranking order: accuracy desc, mean asc, std asc, then name and run id.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .accuracy
            .total_cmp(&self.accuracy)
            .then(self.mean_ns.total_cmp(&other.mean_ns))
            .then(self.std_ns.total_cmp(&other.std_ns))
            .then_with(|| self.algorithm.cmp(&other.algorithm))
            .then_with(|| self.run_id.cmp(&other.run_id))
    }
}

/// One line of the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredRun {
    schema: String,
    run_id: String,
    entries: Vec<LeaderboardEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standings {
    pub schema: String,
    pub task: TaskKind,
    pub preset_id: u16,
    pub entries: Vec<LeaderboardEntry>,
}

/// Converts a report into one entry per (plugin, preset).
pub fn entries_from_report(report: &RunReport, submitted_at: u64) -> Result<Vec<LeaderboardEntry>, LeaderboardError> {
    if report.schema != REPORT_SCHEMA {
        return Err(LeaderboardError::Schema(format!(
            "expected schema {REPORT_SCHEMA}, got {:?}",
            report.schema
        )));
    }
    if report.run_id.is_empty() {
        return Err(LeaderboardError::Schema("empty run_id".into()));
    }
    report
        .entries
        .iter()
        .map(|e| {
            preset_by_id(e.preset_id).map_err(|_| LeaderboardError::UnknownPreset(e.preset_id))?;
            let (mean_ns, std_ns, feasible) = e
                .timing
                .as_ref()
                .map_or((0.0, 0.0, false), |t| (t.harness.mean_ns, t.harness.std_ns, t.harness.feasible));
            Ok(LeaderboardEntry {
                algorithm: e.plugin.clone(),
                run_id: report.run_id.clone(),
                task: e.task,
                preset_id: e.preset_id,
                metric: e.accuracy.metric.clone(),
                accuracy: e.accuracy.value,
                mean_ns,
                std_ns,
                feasible,
                status: e.status,
                frames: e.frames_processed,
                submitted_at,
            })
        })
        .collect()
}

/// Parses a report body, rejecting anything outside the report schema.
pub fn parse_report(body: &str) -> Result<RunReport, LeaderboardError> {
    serde_json::from_str(body).map_err(|e| LeaderboardError::Schema(e.to_string()))
}

#[derive(Debug)]
pub struct Leaderboard {
    path: Option<PathBuf>,
    runs: BTreeMap<String, Vec<LeaderboardEntry>>,
}

impl Leaderboard {
    /// A store that lives only in memory.
    pub fn in_memory() -> Self {
        Leaderboard { path: None, runs: BTreeMap::new() }
    }

    /// Opens or creates the store at `path` and replays it.
    pub fn open(path: &Path) -> Result<Self, LeaderboardError> {
        let mut runs = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let run: StoredRun = serde_json::from_str(&line).map_err(|e| LeaderboardError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                if run.schema != LEADERBOARD_SCHEMA {
                    return Err(LeaderboardError::Corrupt {
                        line: i + 1,
                        message: format!("unexpected schema {:?}", run.schema),
                    });
                }
                runs.insert(run.run_id, run.entries);
            }
        }
        Ok(Leaderboard { path: Some(path.to_path_buf()), runs })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Adds a run, replacing any earlier run with the same id. Returns the
    /// number of entries stored for it.
    pub fn ingest(&mut self, report: &RunReport, submitted_at: u64) -> Result<usize, LeaderboardError> {
        let entries = entries_from_report(report, submitted_at)?;
        let run = StoredRun {
            schema: LEADERBOARD_SCHEMA.to_string(),
            run_id: report.run_id.clone(),
            entries,
        };
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&run).expect("entries serialize");
            line.push('\n');
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        let count = run.entries.len();
        self.runs.insert(run.run_id, run.entries);
        Ok(count)
    }

    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    pub fn entry_count(&self) -> usize {
        self.runs.values().map(Vec::len).sum()
    }

    pub fn run(&self, run_id: &str) -> Option<&[LeaderboardEntry]> {
        self.runs.get(run_id).map(Vec::as_slice)
    }

    /// Ranked successful entries for one task and preset.
    pub fn query(
        &self,
        task: TaskKind,
        preset_id: u16,
        limit: Option<usize>,
    ) -> Result<Vec<LeaderboardEntry>, LeaderboardError> {
        preset_by_id(preset_id).map_err(|_| LeaderboardError::UnknownPreset(preset_id))?;
        let mut out: Vec<LeaderboardEntry> = self
            .runs
            .values()
            .flatten()
            .filter(|e| e.task == task && e.preset_id == preset_id && e.status == EntryStatus::Ok)
            .cloned()
            .collect();
        out.sort_by(LeaderboardEntry::rank_cmp);
        if let Some(limit) = limit {
            out.truncate(limit);
        }
        Ok(out)
    }

    pub fn standings(&self, task: TaskKind, preset_id: u16, limit: Option<usize>) -> Result<Standings, LeaderboardError> {
        Ok(Standings {
            schema: LEADERBOARD_SCHEMA.to_string(),
            task,
            preset_id,
            entries: self.query(task, preset_id, limit)?,
        })
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub type SharedBoard = Arc<RwLock<Leaderboard>>;

mod http {
    use super::*;
    use axum::extract::{Query, State};
    use axum::http::{header, StatusCode};
    use axum::response::{IntoResponse, Response};
    use axum::routing::{get, post};
    use axum::{Json, Router};

    #[derive(Debug, Deserialize)]
    pub(super) struct LeaderboardQuery {
        task: Option<String>,
        preset: Option<u16>,
        limit: Option<usize>,
    }

    fn error(status: StatusCode, message: impl ToString) -> Response {
        (status, Json(serde_json::json!({ "error": message.to_string() }))).into_response()
    }

    fn status_for(e: &LeaderboardError) -> StatusCode {
        match e {
            LeaderboardError::Io(_) | LeaderboardError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }

    async fn leaderboard(State(board): State<SharedBoard>, Query(q): Query<LeaderboardQuery>) -> Response {
        let task = match q.task.as_deref() {
            None => TaskKind::Detection,
            Some(t) => match TaskKind::parse(t) {
                Some(t) => t,
                None => return error(StatusCode::BAD_REQUEST, LeaderboardError::UnknownTask(t.into())),
            },
        };
        let Some(preset) = q.preset else {
            return error(StatusCode::BAD_REQUEST, "missing preset");
        };
        let board = board.read().unwrap_or_else(|e| e.into_inner());
        match board.standings(task, preset, q.limit) {
            Ok(s) => Json(s).into_response(),
            Err(e) => error(status_for(&e), e),
        }
    }

    async fn runs(State(board): State<SharedBoard>, body: String) -> Response {
        let report = match parse_report(&body) {
            Ok(r) => r,
            Err(e) => return error(status_for(&e), e),
        };
        let mut board = board.write().unwrap_or_else(|e| e.into_inner());
        match board.ingest(&report, unix_now()) {
            Ok(n) => (
                StatusCode::CREATED,
                Json(serde_json::json!({ "run_id": report.run_id, "entries": n })),
            )
                .into_response(),
            Err(e) => error(status_for(&e), e),
        }
    }

    async fn presets() -> Response {
        ([(header::CONTENT_TYPE, "text/csv")], table_csv()).into_response()
    }

    pub(super) fn router(board: SharedBoard) -> Router {
        Router::new()
            .route("/leaderboard", get(leaderboard))
            .route("/runs", post(runs))
            .route("/presets", get(presets))
            .with_state(board)
    }
}

/// Serves the HTTP interface on `listener` until the process exits.
pub fn serve(board: SharedBoard, listener: std::net::TcpListener) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_io()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, http::router(board)).await
    })
}

/// Starts the server on a background thread and returns its address.
pub fn spawn_server(board: SharedBoard, addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let listener = std::net::TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    std::thread::spawn(move || {
        if let Err(e) = serve(board, listener) {
            log::error!("leaderboard server stopped: {e}");
        }
    });
    Ok(local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::{EntryTiming, ReportEntry, RunConfig};
    use crate::scoring::{timing_stats, AccuracyScore};
    use std::io::Read;

    fn entry(plugin: &str, preset_id: u16, f1: f64, mean_ms: u64, status: EntryStatus) -> ReportEntry {
        let p = preset_by_id(preset_id.min(11)).unwrap();
        let mut accuracy = AccuracyScore::unscored(TaskKind::Detection);
        accuracy.metric = "detection_f1@iou0.5".into();
        accuracy.value = f1;
        let t = timing_stats(&[mean_ms * 1_000_000; 4], 30.0).unwrap();
        ReportEntry {
            plugin: plugin.into(),
            task: TaskKind::Detection,
            preset_id,
            width: p.width,
            height: p.height,
            rate: p.rate.to_string(),
            rate_hz: 30.0,
            status,
            failure: None,
            frames_expected: 4,
            frames_processed: 4,
            accuracy,
            timing: Some(EntryTiming { harness: t.clone(), reported: t }),
        }
    }

    fn report(run_id: &str, entries: Vec<ReportEntry>) -> RunReport {
        RunReport {
            schema: REPORT_SCHEMA.into(),
            run_id: run_id.into(),
            config: RunConfig::new("a.rlog", Vec::new()),
            complete: true,
            frames: 4,
            entries,
            counters: Default::default(),
            bus: Default::default(),
            wall_clock_ns: 1,
        }
    }

    fn grid(run_id: &str) -> RunReport {
        let mut entries = Vec::new();
        for plugin in ["a", "b"] {
            for p in 0..12 {
                entries.push(entry(plugin, p, 0.5, 10, EntryStatus::Ok));
            }
        }
        report(run_id, entries)
    }

    #[test]
    fn ingest_counts_and_is_idempotent() {
        let mut board = Leaderboard::in_memory();
        assert_eq!(board.ingest(&grid("r1"), 0).unwrap(), 24);
        assert_eq!(board.ingest(&grid("r1"), 5).unwrap(), 24);
        assert_eq!(board.entry_count(), 24);
        assert_eq!(board.run("r1").unwrap()[0].submitted_at, 5);
    }

    #[test]
    fn unknown_preset_rejected() {
        let mut board = Leaderboard::in_memory();
        let r = report("r", vec![entry("a", 999, 1.0, 1, EntryStatus::Ok)]);
        let err = board.ingest(&r, 0).unwrap_err();
        assert!(err.to_string().contains("unknown preset"), "{err}");
        assert_eq!(board.entry_count(), 0);
        assert!(matches!(board.query(TaskKind::Detection, 12, None), Err(LeaderboardError::UnknownPreset(12))));
    }

    #[test]
    fn ranking_rules() {
        let mut board = Leaderboard::in_memory();
        board
            .ingest(
                &report(
                    "r",
                    vec![
                        entry("slow", 3, 0.9, 20, EntryStatus::Ok),
                        entry("low", 3, 0.8, 1, EntryStatus::Ok),
                        entry("fast", 3, 0.9, 10, EntryStatus::Ok),
                        entry("broken", 3, 1.0, 1, EntryStatus::Failed),
                    ],
                ),
                0,
            )
            .unwrap();
        let names: Vec<String> = board
            .query(TaskKind::Detection, 3, None)
            .unwrap()
            .into_iter()
            .map(|e| e.algorithm)
            .collect();
        assert_eq!(names, ["fast", "slow", "low"]);
        let top = board.query(TaskKind::Detection, 3, Some(1)).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].algorithm, "fast");
    }

    #[test]
    fn name_breaks_full_ties() {
        let mut board = Leaderboard::in_memory();
        board
            .ingest(&report("r", vec![entry("zeta", 0, 0.5, 5, EntryStatus::Ok), entry("alpha", 0, 0.5, 5, EntryStatus::Ok)]), 0)
            .unwrap();
        let q = board.query(TaskKind::Detection, 0, None).unwrap();
        assert_eq!(q[0].algorithm, "alpha");
    }

    #[test]
    fn store_replays_to_same_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("board.jsonl");
        let mut board = Leaderboard::open(&path).unwrap();
        board.ingest(&grid("r1"), 1).unwrap();
        board.ingest(&grid("r2"), 2).unwrap();
        board.ingest(&grid("r1"), 3).unwrap();
        let reopened = Leaderboard::open(&path).unwrap();
        assert_eq!(reopened.entry_count(), 48);
        assert_eq!(reopened.run("r1"), board.run("r1"));
        assert_eq!(
            reopened.query(TaskKind::Detection, 4, None).unwrap(),
            board.query(TaskKind::Detection, 4, None).unwrap()
        );
        let lines = std::fs::read_to_string(&path).unwrap().lines().count();
        assert_eq!(lines, 3);
    }

    #[test]
    fn corrupt_store_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("board.jsonl");
        std::fs::write(&path, "{}\n").unwrap();
        assert!(matches!(Leaderboard::open(&path), Err(LeaderboardError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn wrong_schema_rejected() {
        let mut r = grid("r");
        r.schema = "other".into();
        assert!(matches!(Leaderboard::in_memory().ingest(&r, 0), Err(LeaderboardError::Schema(_))));
        assert!(matches!(parse_report("{\"bogus\": 1}"), Err(LeaderboardError::Schema(_))));
    }

    fn http(addr: SocketAddr, request: &str) -> (u16, String) {
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        stream.write_all(request.as_bytes()).unwrap();
        let mut response = String::new();
        stream.read_to_string(&mut response).unwrap();
        let status = response[9..12].parse().unwrap();
        let body = response.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
        (status, body)
    }

    #[test]
    fn http_endpoints() {
        let board = Arc::new(RwLock::new(Leaderboard::in_memory()));
        let addr = spawn_server(board.clone(), "127.0.0.1:0".parse().unwrap()).unwrap();
        let body = serde_json::to_string(&grid("r9")).unwrap();
        let (status, reply) = http(
            addr,
            &format!(
                "POST /runs HTTP/1.1\r\nHost: x\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
                body.len()
            ),
        );
        assert_eq!(status, 201, "{reply}");
        assert!(reply.contains("\"entries\":24"));
        let (status, reply) = http(addr, "GET /leaderboard?task=detection&preset=3&limit=1 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
        assert_eq!(status, 200);
        let standings: Standings = serde_json::from_str(&reply).unwrap();
        assert_eq!(standings.entries.len(), 1);
        let (status, _) = http(addr, "GET /leaderboard?preset=99 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
        assert_eq!(status, 400);
        let (status, csv) = http(addr, "GET /presets HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
        assert_eq!(status, 200);
        assert_eq!(csv, table_csv());
        let (status, _) = http(addr, "POST /runs HTTP/1.1\r\nHost: x\r\nConnection: close\r\nContent-Length: 2\r\n\r\n{}");
        assert_eq!(status, 400);
        assert_eq!(board.read().unwrap().entry_count(), 24);
    }
}
