//! Decode-once evaluation harness for perception algorithms.
//!
//! A sensor log is read one time slice at a time, every frame is decoded
//! exactly once, and each decoded frame is resampled into a cascade of
//! resolution/rate presets that are fanned out through a shared-memory frame
//! bus to out-of-process algorithm plugins. Results are scored against the
//! log's ground truth, summarized into run reports and ranked on leaderboards.
//!
//! Module map:
//!
//! * [`logstore`]: the `RLOG` sensor-log container and a synthetic scene
//!   generator with exact ground truth.
//! * [`framebus`]: the `RBUS` shared-memory broadcast ring.
//! * [`presets`]: the preset table, scale-to-cover geometry, area resampling
//!   and timestamp decimation.
//! * [`pluginproto`]: the length-prefixed harness/plugin wire protocol.
//! * [`plugin`]: the plugin-side runtime and the bundled reference plugins.
//! * [`scheduler`]: the evaluation loop (parallel and naive modes).
//! * [`scoring`]: timing statistics and detection F1.
//! * [`leaderboard`]: report storage, ranking and the HTTP service.
//! * [`planner`]: data-logistics and decode-savings calculators.

#[cfg(not(target_endian = "little"))]
compile_error!("the RLOG and RBUS layouts are little-endian and mapped in place");

pub mod frame;
pub mod framebus;
pub mod leaderboard;
pub mod logstore;
pub mod planner;
pub mod plugin;
pub mod pluginproto;
pub mod presets;
pub mod scheduler;
pub mod scoring;
pub mod units;

/// Directory used for shared-memory regions and plugin sockets.
///
/// `REEDSB_TMP` overrides the default, which is `/dev/shm` when present and
/// the system temp directory otherwise.
pub fn scratch_dir() -> std::path::PathBuf {
    if let Some(dir) = std::env::var_os("REEDSB_TMP") {
        return dir.into();
    }
    let shm = std::path::Path::new("/dev/shm");
    if shm.is_dir() {
        shm.to_path_buf()
    } else {
        std::env::temp_dir()
    }
}
