//! Plugin-side runtime and the bundled reference plugins.
//!
//! A plugin connects to the harness socket, says HELLO, and then answers
//! every FRAME with a RESULT followed by a RELEASE. Pixels are read in place
//! from the bus region named in the descriptor.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framebus::{BusError, BusReader};
use crate::logstore::{GroundTruthObject, LogReader};
use crate::pluginproto::{
    read_message, write_message, Detection, ErrorCode, FrameDescriptor, Hello, Message, Release,
    ResultPayload, TaskKind, WireError, NAME_LEN, PROTOCOL_VERSION,
};
use crate::presets::{crop_geometry, preset_by_id, CropGeometry};
use crate::units::parse_duration;

#[derive(Debug, Error)]
pub enum PluginError {
    #[error("rejected by harness: {0}")]
    Rejected(String),
    #[error("unexpected {0} from harness")]
    Unexpected(&'static str),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("aborted after {0} frames")]
    Aborted(u64),
    #[error("{0}")]
    Failed(String),
}

/// A frame as seen by an algorithm.
pub struct FrameView<'a> {
    pub descriptor: &'a FrameDescriptor,
    pub pixels: &'a [u8],
}

#[derive(Debug)]
pub enum AlgorithmError {
    /// Stop immediately without answering, as if the process died.
    Abort,
    Failed(String),
}

pub trait Algorithm: Send {
    fn task(&self) -> TaskKind {
        TaskKind::Detection
    }

    fn process(&mut self, frame: &FrameView<'_>) -> Result<Vec<Detection>, AlgorithmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PluginSummary {
    pub frames: u64,
}

/// Runs the plugin loop on an established connection until BYE.
pub fn run_plugin<S: Read + Write>(
    stream: &mut S,
    name: &str,
    algorithm: &mut dyn Algorithm,
) -> Result<PluginSummary, PluginError> {
    write_message(
        stream,
        &Message::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
            task: algorithm.task().code(),
            name: name.to_string(),
        }),
    )?;
    match read_message(stream)? {
        Message::Welcome(_) => {}
        Message::Error(e) => return Err(PluginError::Rejected(e.message)),
        other => return Err(PluginError::Unexpected(other.type_name())),
    }

    // Only the current region stays mapped; a new region name means the
    // harness moved to a new bus and the old one may be gone.
    let mut region: Option<(String, BusReader)> = None;
    let mut summary = PluginSummary::default();
    loop {
        let descriptor = match read_message(stream) {
            Ok(Message::Frame(d)) => d,
            Ok(Message::Bye) | Err(WireError::Closed) => return Ok(summary),
            Ok(Message::Error(e)) => return Err(PluginError::Rejected(e.message)),
            Ok(other) => return Err(PluginError::Unexpected(other.type_name())),
            Err(e) => return Err(e.into()),
        };
        if region.as_ref().is_none_or(|(name, _)| *name != descriptor.region) {
            drop(region.take());
            region = Some((descriptor.region.clone(), BusReader::open(&descriptor.region)?));
        }
        let reader = &region.as_ref().expect("region mapped above").1;
        let handle = descriptor.handle();
        let pixels = match reader.view(handle) {
            Ok(p) => p,
            Err(e) => {
                write_message(
                    stream,
                    &Message::error(ErrorCode::ProtocolViolation, format!("frame {}: {e}", descriptor.frame_id)),
                )?;
                return Err(e.into());
            }
        };
        let started = Instant::now();
        let outcome = algorithm.process(&FrameView {
            descriptor: &descriptor,
            pixels,
        });
        let exec_time_ns = (started.elapsed().as_nanos() as u64).max(1);
        let detections = match outcome {
            Ok(d) => d,
            Err(AlgorithmError::Abort) => return Err(PluginError::Aborted(summary.frames)),
            Err(AlgorithmError::Failed(msg)) => {
                write_message(stream, &Message::error(ErrorCode::Internal, msg.clone()))?;
                return Err(PluginError::Failed(msg));
            }
        };
        if let Err(e) = reader.validate(handle) {
            write_message(
                stream,
                &Message::error(ErrorCode::ProtocolViolation, format!("frame {}: {e}", descriptor.frame_id)),
            )?;
            return Err(e.into());
        }
        write_message(
            stream,
            &Message::Result(ResultPayload {
                frame_id: descriptor.frame_id,
                exec_time_ns,
                detections,
                blob: Vec::new(),
            }),
        )?;
        write_message(
            stream,
            &Message::Release(Release {
                frame_id: descriptor.frame_id,
                slot_index: descriptor.slot_index,
                generation: descriptor.generation,
            }),
        )?;
        summary.frames += 1;
    }
}

/// Connects to a harness socket and runs `algorithm` until BYE.
pub fn connect_and_run(
    socket: &Path,
    name: &str,
    algorithm: &mut dyn Algorithm,
) -> Result<PluginSummary, PluginError> {
    let mut stream = UnixStream::connect(socket).map_err(WireError::from)?;
    run_plugin(&mut stream, name, algorithm)
}

/// The reference plugins shipped with the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Builtin {
    /// Zero detections.
    Echo,
    /// Emits the log's ground truth projected into preset coordinates.
    Oracle,
    /// Fixed latency per frame.
    Sleeper { ms: u64 },
    /// Normally distributed latency per frame.
    Jitter { mean_ns: u64, std_ns: u64 },
    /// Processes `after` frames, then drops the connection.
    Crash { after: u64 },
}

impl Builtin {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Builtin::Echo => "echo",
            Builtin::Oracle => "oracle",
            Builtin::Sleeper { .. } => "sleeper",
            Builtin::Jitter { .. } => "jitter",
            Builtin::Crash { .. } => "crash",
        }
    }

    /// Parses `kind [flags...]`, e.g. `jitter --mean 20ms --std 5ms`.
    pub fn parse(tokens: &[String]) -> Result<Builtin, String> {
        let (kind, rest) = tokens.split_first().ok_or("missing plugin kind")?;
        let mut flags: HashMap<&str, &str> = HashMap::new();
        let mut it = rest.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| format!("unexpected argument {flag:?} for {kind}"))?;
            let value = it.next().ok_or_else(|| format!("--{key} needs a value"))?;
            flags.insert(key, value);
        }
        let mut take = |key: &str| flags.remove(key);
        let number = |key: &str, v: Option<&str>| -> Result<Option<u64>, String> {
            v.map(|v| v.parse::<u64>().map_err(|_| format!("--{key}: invalid number {v:?}")))
                .transpose()
        };
        let duration = |key: &str, v: Option<&str>| -> Result<Option<u64>, String> {
            v.map(|v| {
                parse_duration(v)
                    .map(|d| d.as_nanos() as u64)
                    .map_err(|e| format!("--{key}: {e}"))
            })
            .transpose()
        };
        let builtin = match kind.as_str() {
            "echo" => Builtin::Echo,
            "oracle" => Builtin::Oracle,
            "sleeper" => Builtin::Sleeper {
                ms: number("ms", take("ms"))?.ok_or("sleeper needs --ms")?,
            },
            "jitter" => Builtin::Jitter {
                mean_ns: duration("mean", take("mean"))?.ok_or("jitter needs --mean")?,
                std_ns: duration("std", take("std"))?.ok_or("jitter needs --std")?,
            },
            "crash" => Builtin::Crash {
                after: number("after", take("after"))?.unwrap_or(0),
            },
            other => return Err(format!("unknown plugin {other:?}")),
        };
        if let Some(key) = flags.keys().next() {
            return Err(format!("unknown flag --{key} for {kind}"));
        }
        Ok(builtin)
    }

    /// The inverse of [`Builtin::parse`].
    pub fn to_args(&self) -> Vec<String> {
        let mut args = vec![self.kind_name().to_string()];
        match self {
            Builtin::Echo | Builtin::Oracle => {}
            Builtin::Sleeper { ms } => args.extend(["--ms".into(), ms.to_string()]),
            Builtin::Jitter { mean_ns, std_ns } => args.extend([
                "--mean".into(),
                format!("{mean_ns}ns"),
                "--std".into(),
                format!("{std_ns}ns"),
            ]),
            Builtin::Crash { after } => args.extend(["--after".into(), after.to_string()]),
        }
        args
    }

    pub fn instantiate(&self, log: Option<&Path>, seed: u64) -> Result<Box<dyn Algorithm>, String> {
        Ok(match self {
            Builtin::Echo => Box::new(Echo),
            Builtin::Oracle => {
                let log = log.ok_or("oracle needs the log path")?;
                Box::new(Oracle::load(log).map_err(|e| e.to_string())?)
            }
            Builtin::Sleeper { ms } => Box::new(Sleeper(Duration::from_millis(*ms))),
            Builtin::Jitter { mean_ns, std_ns } => Box::new(Jitter {
                rng: ChaCha8Rng::seed_from_u64(seed),
                dist: Normal::new(*mean_ns as f64, *std_ns as f64)
                    .map_err(|e| format!("jitter: {e}"))?,
            }),
            Builtin::Crash { after } => Box::new(Crash {
                after: *after,
                seen: 0,
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginProgram {
    Builtin(Builtin),
    /// An external executable; it receives `--socket PATH --name NAME`.
    Exec { program: PathBuf, args: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginSpec {
    pub name: String,
    pub program: PluginProgram,
}

/// Parses a `;`-separated plugin list such as
/// `echo:4;oracle;jitter --mean 20ms --std 5ms;exec:/path/to/bin --flag`.
///
/// `kind:N` expands to N instances named `kind#1..kind#N`. Repeated names get
/// a `#k` suffix so every plugin registers under a unique name.
pub fn parse_plugin_list(text: &str) -> Result<Vec<PluginSpec>, String> {
    let mut specs: Vec<PluginSpec> = Vec::new();
    for entry in text.split(';').map(str::trim).filter(|e| !e.is_empty()) {
        let tokens: Vec<String> = entry.split_whitespace().map(String::from).collect();
        if let Some(program) = tokens[0].strip_prefix("exec:") {
            if program.is_empty() {
                return Err("exec: needs a program path".into());
            }
            let path = PathBuf::from(program);
            let base = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| program.to_string());
            specs.push(PluginSpec {
                name: base,
                program: PluginProgram::Exec {
                    program: path,
                    args: tokens[1..].to_vec(),
                },
            });
            continue;
        }
        let (kind, count) = match tokens[0].split_once(':') {
            Some((k, n)) => (
                k.to_string(),
                n.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| format!("invalid instance count in {:?}", tokens[0]))?,
            ),
            None => (tokens[0].clone(), 1),
        };
        let mut parse_tokens = tokens.clone();
        parse_tokens[0] = kind.clone();
        let builtin = Builtin::parse(&parse_tokens)?;
        for i in 1..=count {
            let name = if count > 1 { format!("{kind}#{i}") } else { kind.clone() };
            specs.push(PluginSpec {
                name,
                program: PluginProgram::Builtin(builtin.clone()),
            });
        }
    }
    if specs.is_empty() {
        return Err("no plugins".into());
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    for spec in &mut specs {
        let n = seen.entry(spec.name.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            spec.name = format!("{}#{}", spec.name, n);
        }
        if spec.name.len() > NAME_LEN {
            return Err(format!("plugin name {:?} longer than {NAME_LEN} bytes", spec.name));
        }
    }
    Ok(specs)
}

struct Echo;

impl Algorithm for Echo {
    fn process(&mut self, frame: &FrameView<'_>) -> Result<Vec<Detection>, AlgorithmError> {
        std::hint::black_box(frame.pixels.first());
        Ok(Vec::new())
    }
}

struct Sleeper(Duration);

impl Algorithm for Sleeper {
    fn process(&mut self, _frame: &FrameView<'_>) -> Result<Vec<Detection>, AlgorithmError> {
        std::thread::sleep(self.0);
        Ok(Vec::new())
    }
}

struct Jitter {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
}

impl Algorithm for Jitter {
    fn process(&mut self, _frame: &FrameView<'_>) -> Result<Vec<Detection>, AlgorithmError> {
        let ns = self.dist.sample(&mut self.rng).max(0.0);
        std::thread::sleep(Duration::from_nanos(ns as u64));
        Ok(Vec::new())
    }
}

struct Crash {
    after: u64,
    seen: u64,
}

impl Algorithm for Crash {
    fn process(&mut self, _frame: &FrameView<'_>) -> Result<Vec<Detection>, AlgorithmError> {
        if self.seen >= self.after {
            return Err(AlgorithmError::Abort);
        }
        self.seen += 1;
        Ok(Vec::new())
    }
}

/// Reports the ground truth of each frame, projected like the pixels were.
pub struct Oracle {
    truth: std::collections::BTreeMap<u64, Vec<GroundTruthObject>>,
    native: (u32, u32),
    geometry: HashMap<u16, CropGeometry>,
}

impl Oracle {
    pub fn load(log: &Path) -> Result<Oracle, crate::logstore::LogError> {
        let reader = LogReader::open(log)?;
        let camera = *reader.camera()?;
        Ok(Oracle {
            truth: reader.ground_truth_frames()?,
            native: (camera.native_width, camera.native_height),
            geometry: HashMap::new(),
        })
    }
}

impl Algorithm for Oracle {
    fn process(&mut self, frame: &FrameView<'_>) -> Result<Vec<Detection>, AlgorithmError> {
        let preset_id = frame.descriptor.preset_id;
        let geometry = match self.geometry.get(&preset_id) {
            Some(g) => *g,
            None => {
                let preset = preset_by_id(preset_id).map_err(|e| AlgorithmError::Failed(e.to_string()))?;
                let g = crop_geometry(self.native.0, self.native.1, &preset);
                self.geometry.insert(preset_id, g);
                g
            }
        };
        let Some(objects) = self.truth.get(&frame.descriptor.frame_id) else {
            return Ok(Vec::new());
        };
        Ok(objects
            .iter()
            .filter_map(|o| {
                geometry.project_pixel_box(o.bbox).map(|bbox| Detection {
                    class: o.class,
                    bbox,
                    score: u16::MAX,
                })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn parses_builtins() {
        assert_eq!(Builtin::parse(&toks("echo")).unwrap(), Builtin::Echo);
        assert_eq!(
            Builtin::parse(&toks("jitter --mean 20ms --std 5ms")).unwrap(),
            Builtin::Jitter {
                mean_ns: 20_000_000,
                std_ns: 5_000_000
            }
        );
        assert_eq!(
            Builtin::parse(&toks("sleeper --ms 25")).unwrap(),
            Builtin::Sleeper { ms: 25 }
        );
        assert!(Builtin::parse(&toks("sleeper")).is_err());
        assert!(Builtin::parse(&toks("echo --bogus 1")).is_err());
        assert!(Builtin::parse(&toks("nope")).is_err());
    }

    #[test]
    fn args_round_trip() {
        for b in [
            Builtin::Echo,
            Builtin::Oracle,
            Builtin::Sleeper { ms: 40 },
            Builtin::Jitter {
                mean_ns: 20_000_000,
                std_ns: 5_000_000,
            },
            Builtin::Crash { after: 3 },
        ] {
            assert_eq!(Builtin::parse(&b.to_args()).unwrap(), b);
        }
    }

    #[test]
    fn plugin_lists() {
        let specs = parse_plugin_list("echo:3;oracle;sleeper --ms 25;sleeper --ms 40").unwrap();
        let names: Vec<_> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            ["echo#1", "echo#2", "echo#3", "oracle", "sleeper", "sleeper#2"]
        );
        let exec = parse_plugin_list("exec:/opt/algo --fast").unwrap();
        assert_eq!(
            exec[0].program,
            PluginProgram::Exec {
                program: "/opt/algo".into(),
                args: vec!["--fast".into()]
            }
        );
        assert_eq!(parse_plugin_list(" ; ").unwrap_err(), "no plugins");
        assert!(parse_plugin_list("echo:0").is_err());
    }
}
