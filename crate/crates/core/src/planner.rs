//! Data-logistics and decode-cost calculators.
//!
//! All functions are pure. Rates are bytes per second, volumes bytes,
//! durations seconds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::group_thousands;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("aggregate rate is zero")]
    ZeroRate,
    #[error("capacity must be positive")]
    NonPositiveCapacity,
    #[error("compression ratio must be in (0, 1], got {0}")]
    BadRatio(f64),
    #[error("counts must be positive")]
    NonPositiveCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Packing {
    /// Samples packed back to back at `bit_depth` bits.
    Packed,
    /// One 16-bit word per sample.
    Word16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRate {
    pub width: u32,
    pub height: u32,
    pub bit_depth: u8,
    pub rate_hz: f64,
    pub channels: u8,
    pub packing: Packing,
}

impl SensorRate {
    /// The mono camera at full native resolution.
    pub fn mono_camera() -> Self {
        SensorRate {
            width: 3208,
            height: 2200,
            bit_depth: 10,
            rate_hz: 91.0,
            channels: 1,
            packing: Packing::Packed,
        }
    }
}

/// Bytes per second produced by an image sensor.
pub fn camera_rate(sensor: &SensorRate) -> f64 {
    let bits = match sensor.packing {
        Packing::Packed => sensor.bit_depth as u128,
        Packing::Word16 => 16,
    };
    let bits_per_frame =
        sensor.width as u128 * sensor.height as u128 * sensor.channels as u128 * bits;
    bits_per_frame as f64 * sensor.rate_hz / 8.0
}

/// Bytes per second produced by a point-cloud sensor.
pub fn lidar_rate(points_per_second: f64, bytes_per_point: f64) -> f64 {
    points_per_second * bytes_per_point
}

/// How long the loggers can record before `capacity_bytes` fills up.
pub fn logging_budget(
    rates: &[f64],
    capacity_bytes: f64,
    compression_ratio: f64,
) -> Result<f64, PlanError> {
    if capacity_bytes <= 0.0 {
        return Err(PlanError::NonPositiveCapacity);
    }
    if !(compression_ratio > 0.0 && compression_ratio <= 1.0) {
        return Err(PlanError::BadRatio(compression_ratio));
    }
    let aggregate: f64 = rates.iter().sum();
    if aggregate <= 0.0 {
        return Err(PlanError::ZeroRate);
    }
    Ok(capacity_bytes / (aggregate * compression_ratio))
}

/// Time to copy `bytes` at `rate` bytes per second.
pub fn transfer_time(bytes: f64, rate: f64) -> Result<f64, PlanError> {
    if rate <= 0.0 {
        return Err(PlanError::ZeroRate);
    }
    Ok(bytes / rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavingsModel {
    /// Frames in the log.
    pub n: u64,
    /// Algorithms under evaluation.
    pub m: u64,
    /// Presets per algorithm.
    pub p: u64,
    /// Bytes fetched and decoded by one full pass over the log.
    pub volume_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub model: SavingsModel,
    pub naive_ops: u64,
    pub parallel_ops: u64,
    pub naive_volume_bytes: f64,
    /// Saved volume counted as `volume * m * p`.
    pub saved_paper_convention_bytes: f64,
    /// Saved volume counted as `volume * (m * p - 1)`: what is actually not
    /// re-read once the single pass is accounted for.
    pub saved_strict_bytes: f64,
}

pub fn decode_savings(model: SavingsModel) -> Result<SavingsReport, PlanError> {
    if model.m == 0 || model.p == 0 || model.volume_bytes < 0.0 {
        return Err(PlanError::NonPositiveCount);
    }
    let fan = model.m * model.p;
    Ok(SavingsReport {
        model,
        naive_ops: model.n * fan,
        parallel_ops: model.n,
        naive_volume_bytes: model.volume_bytes * fan as f64,
        saved_paper_convention_bytes: model.volume_bytes * fan as f64,
        saved_strict_bytes: model.volume_bytes * (fan - 1) as f64,
    })
}

/// A two-column table rendered either aligned or as CSV.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Table {
    pub rows: Vec<(String, String)>,
}

impl Table {
    pub fn push(&mut self, label: impl Into<String>, value: impl Into<String>) {
        self.rows.push((label.into(), value.into()));
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
        self.rows
            .iter()
            .map(|(l, v)| format!("{l:<width$}  {v}\n"))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,value\n");
        for (l, v) in &self.rows {
            out.push_str(&format!("{},{}\n", csv_field(l), csv_field(v)));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn terabytes(bytes: f64) -> String {
    format!("{} TB", group_thousands(bytes / 1e12, 3))
}

impl SavingsReport {
    pub fn table(&self) -> Table {
        let mut t = Table::default();
        t.push("frames (n)", self.model.n.to_string());
        t.push("algorithms (m)", self.model.m.to_string());
        t.push("presets (p)", self.model.p.to_string());
        t.push("naive fetch+decode ops", group_thousands(self.naive_ops as f64, 0));
        t.push("parallel fetch+decode ops", group_thousands(self.parallel_ops as f64, 0));
        t.push("log volume", terabytes(self.model.volume_bytes));
        t.push("naive volume", terabytes(self.naive_volume_bytes));
        t.push(
            "saved volume (paper convention)",
            terabytes(self.saved_paper_convention_bytes),
        );
        t.push("saved volume (strict)", terabytes(self.saved_strict_bytes));
        t
    }
}
