use std::path::{Path, PathBuf};
use std::time::Duration;

use reedsb_core::logstore::{write_log, Codec, StreamInfo, SyntheticConfig};
use reedsb_core::plugin::parse_plugin_list;
use reedsb_core::scheduler::*;

fn small_log(dir: &Path, frames: u64) -> PathBuf {
    let mut cfg = SyntheticConfig::new(11, Duration::from_secs(1));
    cfg.camera = StreamInfo {
        native_width: 1382,
        native_height: 720,
        ..StreamInfo::mono_camera(0, Codec::Scene)
    };
    let cfg = cfg.with_frames(frames);
    let path = dir.join("s.rlog");
    write_log(&cfg, &path).unwrap();
    path
}

fn config(log: &Path, plugins: &str, presets: &[u16]) -> RunConfig {
    RunConfig {
        presets: presets.to_vec(),
        slot_count: 3,
        release_timeout_ms: 10_000,
        ..RunConfig::new(log, parse_plugin_list(plugins).unwrap())
    }
}

#[test]
fn decode_ratio_equals_m_times_p() {
    let dir = tempfile::tempdir().unwrap();
    let log = small_log(dir.path(), 50);
    let (cmp, parallel, naive) = compare_modes(&config(&log, "echo:2", &[3, 7, 11])).unwrap();
    assert_eq!(parallel.report.counters.decode_count, 50);
    assert_eq!(naive.report.counters.decode_count, 300);
    assert_eq!(cmp.decode_ratio, 6.0);
    assert!(cmp.model_agrees);
    assert!(!cmp.partial);
}

#[test]
fn single_plugin_single_preset_modes_agree() {
    let dir = tempfile::tempdir().unwrap();
    let log = small_log(dir.path(), 30);
    let (cmp, parallel, naive) = compare_modes(&config(&log, "oracle", &[7])).unwrap();
    assert_eq!(cmp.decode_ratio, 1.0);
    let strip = |r: &RunReport| {
        let mut v = serde_json::to_value(&r.entries).unwrap();
        strip_timing(&mut v);
        v
    };
    assert_eq!(strip(&parallel.report), strip(&naive.report));
}

#[test]
fn every_plugin_sees_presets_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let log = small_log(dir.path(), 120);
    let cfg = RunConfig {
        slice_ns: 250_000_000,
        ..config(&log, "echo:3", &[3, 7, 11])
    };
    let out = run(&cfg).unwrap();
    assert_eq!(out.report.entries.len(), 9);
    for log in out.deliveries.values() {
        for preset in [3u16, 7, 11] {
            let ids: Vec<u64> = log.iter().filter(|d| d.1 == preset).map(|d| d.0).collect();
            assert!(ids.windows(2).all(|w| w[0] < w[1]), "preset {preset}");
        }
    }
}

#[test]
fn counters_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let log = small_log(dir.path(), 40);
    let cfg = config(&log, "echo;oracle;jitter --mean 1ms --std 200us", &[3, 11]);
    let a = run(&cfg).unwrap().report;
    let b = run(&cfg).unwrap().report;
    assert_eq!(a.counters, b.counters);
    assert_eq!(a.run_id, b.run_id);
    let mut va = serde_json::to_value(&a).unwrap();
    let mut vb = serde_json::to_value(&b).unwrap();
    strip_timing(&mut va);
    strip_timing(&mut vb);
    assert_eq!(va, vb);
}

#[test]
fn upscaling_presets_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let log = small_log(dir.path(), 5);
    assert!(matches!(run(&config(&log, "echo", &[0])), Err(SchedulerError::Preset(_))));
}

#[test]
fn report_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let log = small_log(dir.path(), 20);
    let report = run(&config(&log, "oracle;echo", &[3])).unwrap().report;
    let back: RunReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
}
