//! The evaluation preset cascade.
//!
//! Every preset is a target (width, height, rate). Frames are scaled
//! uniformly until they cover the target, the overflow is cropped around the
//! image center, and the stream is decimated in time by nearest-timestamp
//! selection.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{max_sample, Frame};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PresetError {
    #[error("unknown preset {0}")]
    UnknownPreset(u16),
    #[error("upscaling refused: source {src_w}x{src_h} is smaller than preset {out_w}x{out_h}")]
    UpscaleRefused {
        src_w: u32,
        src_h: u32,
        out_w: u32,
        out_h: u32,
    },
    #[error("dimension mismatch: frame is {got_w}x{got_h}, geometry expects {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("output buffer holds {got} samples, need {want}")]
    OutputSize { got: usize, want: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("timestamps not strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("target rate {target_mhz} mHz exceeds source rate {source_mhz} mHz")]
    RateTooHigh { target_mhz: u64, source_mhz: u64 },
}

/// Temporal part of a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rate {
    /// Pass the stream through at its native rate (91 Hz mono, 40 Hz color).
    Native,
    Hz(u32),
}

impl Rate {
    /// The effective rate in millihertz for a stream with the given native rate.
    pub fn effective_mhz(self, native_mhz: u64) -> u64 {
        match self {
            Rate::Native => native_mhz,
            Rate::Hz(hz) => hz as u64 * 1000,
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Native => f.write_str("91/40"),
            Rate::Hz(hz) => write!(f, "{hz}"),
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        if text == "91/40" || text == "native" {
            return Ok(Rate::Native);
        }
        text.parse::<u32>()
            .map(Rate::Hz)
            .map_err(|_| serde::de::Error::custom(format!("invalid rate {text:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Preset {
    pub preset_id: u16,
    pub width: u32,
    pub height: u32,
    pub rate: Rate,
}

const fn preset(preset_id: u16, width: u32, height: u32, rate: Rate) -> Preset {
    Preset {
        preset_id,
        width,
        height,
        rate,
    }
}

/// The built-in table, in evaluation order: the native-rate band first, then
/// 30 Hz, then 10 Hz; within a band, descending resolution.
pub const PRESETS: [Preset; 12] = [
    preset(0, 3208, 2200, Rate::Native),
    preset(1, 1920, 1280, Rate::Native),
    preset(2, 1382, 512, Rate::Native),
    preset(3, 1280, 720, Rate::Native),
    preset(4, 3208, 2200, Rate::Hz(30)),
    preset(5, 1920, 1280, Rate::Hz(30)),
    preset(6, 1382, 512, Rate::Hz(30)),
    preset(7, 1280, 720, Rate::Hz(30)),
    preset(8, 3208, 2200, Rate::Hz(10)),
    preset(9, 1920, 1280, Rate::Hz(10)),
    preset(10, 1382, 512, Rate::Hz(10)),
    preset(11, 1280, 720, Rate::Hz(10)),
];

pub fn presets() -> &'static [Preset] {
    &PRESETS
}

pub fn preset_by_id(preset_id: u16) -> Result<Preset, PresetError> {
    PRESETS
        .iter()
        .find(|p| p.preset_id == preset_id)
        .copied()
        .ok_or(PresetError::UnknownPreset(preset_id))
}

/// Parses `all` or a comma-separated list of preset ids.
pub fn parse_selection(text: &str) -> Result<Vec<Preset>, String> {
    let text = text.trim();
    if text.eq_ignore_ascii_case("all") {
        return Ok(PRESETS.to_vec());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let id: u16 = part
            .trim()
            .parse()
            .map_err(|_| format!("invalid preset id {part:?}"))?;
        let preset = preset_by_id(id).map_err(|e| e.to_string())?;
        if !out.contains(&preset) {
            out.push(preset);
        }
    }
    // Evaluation always follows table order.
    out.sort_by_key(|p| p.preset_id);
    Ok(out)
}

/// CSV export of the preset table: `preset_id,width,height,rate`.
pub fn table_csv() -> String {
    let mut out = String::from("preset_id,width,height,rate\n");
    for p in PRESETS.iter() {
        out.push_str(&format!("{},{},{},{}\n", p.preset_id, p.width, p.height, p.rate));
    }
    out
}

impl Preset {
    /// Frame size in bytes for 16-bit storage with `channels` samples/pixel.
    pub fn frame_bytes(&self, channels: u8) -> usize {
        self.width as usize * self.height as usize * channels as usize * 2
    }

    /// Scale-to-cover geometry from a source size, refusing upscales.
    pub fn geometry_for(&self, src_w: u32, src_h: u32) -> Result<CropGeometry, PresetError> {
        let geometry = crop_geometry(src_w, src_h, self);
        if geometry.is_upscale() {
            return Err(PresetError::UpscaleRefused {
                src_w,
                src_h,
                out_w: self.width,
                out_h: self.height,
            });
        }
        Ok(geometry)
    }
}

/// How a source frame maps onto a preset: one uniform scale, then a centered
/// crop of the overflow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub src_w: u32,
    pub src_h: u32,
    pub scale_factor: f64,
    pub scaled_w: u32,
    pub scaled_h: u32,
    pub crop_x: u32,
    pub crop_y: u32,
    pub out_w: u32,
    pub out_h: u32,
}

pub fn crop_geometry(src_w: u32, src_h: u32, preset: &Preset) -> CropGeometry {
    cover_geometry(src_w, src_h, preset.width, preset.height)
}

/// Scale-to-cover geometry for arbitrary positive dimensions.
pub fn cover_geometry(src_w: u32, src_h: u32, out_w: u32, out_h: u32) -> CropGeometry {
    assert!(
        src_w > 0 && src_h > 0 && out_w > 0 && out_h > 0,
        "dimensions must be positive"
    );
    let sx = out_w as f64 / src_w as f64;
    let sy = out_h as f64 / src_h as f64;
    let scale_factor = sx.max(sy);
    // The governing axis lands exactly on the target.
    let (scaled_w, scaled_h) = if sx >= sy {
        (out_w, (src_h as f64 * scale_factor).round() as u32)
    } else {
        ((src_w as f64 * scale_factor).round() as u32, out_h)
    };
    let scaled_w = scaled_w.max(out_w);
    let scaled_h = scaled_h.max(out_h);
    CropGeometry {
        src_w,
        src_h,
        scale_factor,
        scaled_w,
        scaled_h,
        crop_x: (scaled_w - out_w) / 2,
        crop_y: (scaled_h - out_h) / 2,
        out_w,
        out_h,
    }
}

impl CropGeometry {
    pub fn is_upscale(&self) -> bool {
        self.scaled_w > self.src_w || self.scaled_h > self.src_h
    }

    pub fn is_identity(&self) -> bool {
        self.scaled_w == self.src_w
            && self.scaled_h == self.src_h
            && self.crop_x == 0
            && self.crop_y == 0
    }

    /// Effective per-axis scale after rounding the scaled size to pixels.
    fn axis_scales(&self) -> (f64, f64) {
        (
            self.scaled_w as f64 / self.src_w as f64,
            self.scaled_h as f64 / self.src_h as f64,
        )
    }

    /// Maps a point in source pixel coordinates to output coordinates.
    pub fn project_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.axis_scales();
        (x * sx - self.crop_x as f64, y * sy - self.crop_y as f64)
    }

    /// Maps a source-space box to output space and clips it to the output
    /// frame. Returns `None` when nothing of the box remains visible.
    pub fn project_box(&self, b: BoxF) -> Option<BoxF> {
        let (x0, y0) = self.project_point(b.x0, b.y0);
        let (x1, y1) = self.project_point(b.x1, b.y1);
        BoxF { x0, y0, x1, y1 }.clip(self.out_w as f64, self.out_h as f64)
    }

    /// The crop window expressed in source coordinates.
    pub fn source_window(&self) -> BoxF {
        let (sx, sy) = self.axis_scales();
        BoxF {
            x0: self.crop_x as f64 / sx,
            y0: self.crop_y as f64 / sy,
            x1: (self.crop_x + self.out_w) as f64 / sx,
            y1: (self.crop_y + self.out_h) as f64 / sy,
        }
    }

    /// Projects an integer source box to an integer output box, rounding
    /// edges to the nearest pixel. Boxes that vanish are dropped.
    pub fn project_pixel_box(&self, b: PixelBox) -> Option<PixelBox> {
        self.project_box(b.into()).and_then(BoxF::quantize)
    }
}

/// Axis-aligned box with inclusive-exclusive float edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxF {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxF {
    pub fn clip(self, width: f64, height: f64) -> Option<BoxF> {
        let clipped = BoxF {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        };
        (clipped.x1 > clipped.x0 && clipped.y1 > clipped.y0).then_some(clipped)
    }

    pub fn intersect(self, other: BoxF) -> Option<BoxF> {
        let b = BoxF {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (b.x1 > b.x0 && b.y1 > b.y0).then_some(b)
    }

    pub fn quantize(self) -> Option<PixelBox> {
        let x0 = self.x0.round() as u32;
        let y0 = self.y0.round() as u32;
        let x1 = self.x1.round() as u32;
        let y1 = self.y1.round() as u32;
        (x1 > x0 && y1 > y0).then(|| PixelBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

/// Integer pixel box, `(x, y)` top-left plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let inter = (x1 - x0) as u64 * (y1 - y0) as u64;
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }
}

impl From<PixelBox> for BoxF {
    fn from(b: PixelBox) -> Self {
        BoxF {
            x0: b.x as f64,
            y0: b.y as f64,
            x1: (b.x + b.w) as f64,
            y1: (b.y + b.h) as f64,
        }
    }
}

/// Area-averaging taps along one axis, stored as a fixed-width kernel per
/// output coordinate: output `o` reads source `start[o] + k` with weight
/// `weight[o * width + k]`, and unused trailing weights are zero.
#[derive(Debug, Clone)]
struct AxisTaps {
    start: Vec<u32>,
    width: usize,
    weight: Vec<f32>,
}

impl AxisTaps {
    /// Output pixel `o` covers the source interval
    /// `[(o + crop) * n / scaled, (o + crop + 1) * n / scaled)`.
    fn area(src_len: u32, scaled_len: u32, crop: u32, out_len: u32) -> Self {
        let ratio = src_len as f64 / scaled_len as f64;
        let mut rows: Vec<(u32, Vec<f32>)> = Vec::with_capacity(out_len as usize);
        for o in 0..out_len {
            let start = (o + crop) as f64 * ratio;
            let end = (o + crop + 1) as f64 * ratio;
            let span = end - start;
            let first = start.floor() as u32;
            let last = (end.ceil() as u32).min(src_len);
            let mut taps = Vec::new();
            let mut tap_start = None;
            for i in first..last {
                let overlap = end.min(i as f64 + 1.0) - start.max(i as f64);
                if overlap > 1e-9 {
                    let s = *tap_start.get_or_insert(i);
                    taps.resize((i - s) as usize, 0.0);
                    taps.push((overlap / span) as f32);
                }
            }
            rows.push((tap_start.unwrap_or(first.min(src_len.saturating_sub(1))), taps));
        }
        let width = rows.iter().map(|(_, t)| t.len()).max().unwrap_or(0).max(1);
        let mut out = AxisTaps {
            start: Vec::with_capacity(rows.len()),
            width,
            weight: Vec::with_capacity(rows.len() * width),
        };
        for (s, mut taps) in rows {
            taps.resize(width, 0.0);
            out.start.push(s);
            out.weight.extend(taps);
        }
        out
    }

    fn kernel(&self, o: usize) -> (usize, &[f32]) {
        (self.start[o] as usize, &self.weight[o * self.width..(o + 1) * self.width])
    }
}

/// Rounds half up and clamps to `[0, max]`.
#[inline]
fn quantize(v: f32, max: f32) -> u16 {
    (v.clamp(0.0, max) + 0.5) as u16
}

/// Single-channel horizontal pass with a kernel of exactly `W` taps.
fn horizontal<const W: usize>(acc: &[f32], xs: &AxisTaps, dst: &mut [u16], max: f32) {
    for ((d, &start), weights) in dst.iter_mut().zip(&xs.start).zip(xs.weight.chunks_exact(W)) {
        let window: &[f32; W] = acc[start as usize..start as usize + W].try_into().expect("padded accumulator");
        let weights: &[f32; W] = weights.try_into().expect("fixed kernel width");
        let mut sum = 0f32;
        for k in 0..W {
            sum += weights[k] * window[k];
        }
        *d = quantize(sum, max);
    }
}

/// Resamples a frame into a freshly allocated output frame.
pub fn resample(frame: &Frame, geometry: &CropGeometry) -> Result<Frame, PresetError> {
    let mut out = Frame::new(
        geometry.out_w,
        geometry.out_h,
        frame.channels,
        frame.bit_depth,
    );
    resample_into(frame, geometry, &mut out.data)?;
    Ok(out)
}

/// Area-averaging downscale plus centered crop, written into `out`
/// (row-major, interleaved channels, `out_w * out_h * channels` samples).
pub fn resample_into(
    frame: &Frame,
    geometry: &CropGeometry,
    out: &mut [u16],
) -> Result<(), PresetError> {
    if frame.width != geometry.src_w || frame.height != geometry.src_h {
        return Err(PresetError::DimensionMismatch {
            got_w: frame.width,
            got_h: frame.height,
            want_w: geometry.src_w,
            want_h: geometry.src_h,
        });
    }
    let channels = frame.channels as usize;
    let out_row = geometry.out_w as usize * channels;
    let want = out_row * geometry.out_h as usize;
    if out.len() != want {
        return Err(PresetError::OutputSize {
            got: out.len(),
            want,
        });
    }
    if want == 0 {
        return Ok(());
    }

    if geometry.scaled_w == geometry.src_w && geometry.scaled_h == geometry.src_h {
        // Pure crop.
        let x0 = geometry.crop_x as usize * channels;
        out.par_chunks_mut(out_row)
            .enumerate()
            .for_each(|(oy, dst)| {
                let src = frame.row(geometry.crop_y + oy as u32);
                dst.copy_from_slice(&src[x0..x0 + out_row]);
            });
        return Ok(());
    }

    let xs = AxisTaps::area(
        geometry.src_w,
        geometry.scaled_w,
        geometry.crop_x,
        geometry.out_w,
    );
    let ys = AxisTaps::area(
        geometry.src_h,
        geometry.scaled_h,
        geometry.crop_y,
        geometry.out_h,
    );
    let max = max_sample(frame.bit_depth) as f32;
    let src_row = frame.row_len();
    let src_h = frame.height as usize;
    // The accumulator is padded so zero-weight taps past the edge stay in bounds.
    let padded = src_row + xs.width * channels;

    out.par_chunks_mut(out_row).enumerate().for_each_init(
        || vec![0f32; padded],
        |acc, (oy, dst)| {
            acc.fill(0.0);
            let (sy0, wys) = ys.kernel(oy);
            for (k, &wy) in wys.iter().enumerate() {
                if wy == 0.0 || sy0 + k >= src_h {
                    continue;
                }
                let row = frame.row((sy0 + k) as u32);
                for (a, &v) in acc[..src_row].iter_mut().zip(row) {
                    *a += wy * v as f32;
                }
            }
            let acc = &acc[..];
            if channels == 1 {
                match xs.width {
                    1 => horizontal::<1>(acc, &xs, dst, max),
                    2 => horizontal::<2>(acc, &xs, dst, max),
                    3 => horizontal::<3>(acc, &xs, dst, max),
                    4 => horizontal::<4>(acc, &xs, dst, max),
                    5 => horizontal::<5>(acc, &xs, dst, max),
                    6 => horizontal::<6>(acc, &xs, dst, max),
                    _ => {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let (sx0, wxs) = xs.kernel(ox);
                            let mut sum = 0f32;
                            for (w, a) in wxs.iter().zip(&acc[sx0..]) {
                                sum += w * a;
                            }
                            *d = quantize(sum, max);
                        }
                    }
                }
            } else {
                for ox in 0..geometry.out_w as usize {
                    let (sx0, wxs) = xs.kernel(ox);
                    for c in 0..channels {
                        let mut sum = 0f32;
                        for (k, w) in wxs.iter().enumerate() {
                            sum += w * acc[(sx0 + k) * channels + c];
                        }
                        dst[ox * channels + c] = quantize(sum, max);
                    }
                }
            }
        },
    );
    Ok(())
}

/// Nearest-timestamp decimation.
///
/// For every ideal tick `t_first + j / rate` inside the timestamp span (with
/// 1 ns of tolerance for timestamps floored to whole nanoseconds), the
/// closest timestamp is selected; ties go to the earlier frame, and a frame
/// selected by two ticks appears once. Arithmetic is exact (rates are in
/// millihertz, comparisons scaled to integers).
pub fn decimate(timestamps: &[u64], target_mhz: u64) -> Result<Vec<usize>, PresetError> {
    let first = *timestamps.first().ok_or(PresetError::EmptyInput)?;
    if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
        return Err(PresetError::NotIncreasing(i + 1));
    }
    if target_mhz == 0 {
        return Err(PresetError::EmptyInput);
    }
    const NS_MHZ: i128 = 1_000_000_000_000;
    let span = (timestamps[timestamps.len() - 1] - first) as i128;
    if timestamps.len() > 1 {
        let source_mhz = (timestamps.len() as i128 - 1) * NS_MHZ / span;
        // 1% slack absorbs timestamp quantization at the nominal rate.
        if target_mhz as i128 * 100 > source_mhz * 101 {
            return Err(PresetError::RateTooHigh {
                target_mhz,
                source_mhz: source_mhz as u64,
            });
        }
    }

    let rate = target_mhz as i128;
    let ticks = ((span + 1) * rate - 1) / NS_MHZ;
    let distance = |i: usize, j: i128| ((timestamps[i] - first) as i128 * rate - j * NS_MHZ).abs();

    let mut selected = Vec::with_capacity(ticks as usize + 1);
    let mut cursor = 0usize;
    for j in 0..=ticks {
        while cursor + 1 < timestamps.len() && distance(cursor + 1, j) < distance(cursor, j) {
            cursor += 1;
        }
        if selected.last() != Some(&cursor) {
            selected.push(cursor);
        }
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_timestamps(n: u64, rate_hz: u64) -> Vec<u64> {
        (0..n).map(|k| k * 1_000_000_000 / rate_hz).collect()
    }

    #[test]
    fn identity_geometry() {
        let g = crop_geometry(3208, 2200, &PRESETS[0]);
        assert_eq!(g.scale_factor, 1.0);
        assert_eq!((g.scaled_w, g.scaled_h, g.crop_x, g.crop_y), (3208, 2200, 0, 0));
        assert!(g.is_identity());
    }

    #[test]
    fn full_hd_like_geometry() {
        let g = crop_geometry(3208, 2200, &PRESETS[1]);
        assert!((g.scale_factor - 0.598_503_740_648_379).abs() < 1e-12);
        assert_eq!((g.scaled_w, g.scaled_h), (1920, 1317));
        assert_eq!((g.crop_x, g.crop_y), (0, 18));
    }

    #[test]
    fn kitti_like_geometry() {
        let g = crop_geometry(3208, 2200, &PRESETS[2]);
        assert!((g.scale_factor - 0.430_798_004_987_531).abs() < 1e-12);
        assert_eq!((g.scaled_w, g.scaled_h), (1382, 948));
        assert_eq!((g.crop_x, g.crop_y), (0, 218));
    }

    #[test]
    fn upscale_is_refused() {
        let err = PRESETS[0].geometry_for(1920, 1080).unwrap_err();
        assert!(matches!(err, PresetError::UpscaleRefused { .. }));
        assert!(PRESETS[3].geometry_for(1920, 1080).is_ok());
    }

    #[test]
    fn csv_has_header_and_twelve_rows() {
        let csv = table_csv();
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("preset_id,width,height,rate\n0,3208,2200,91/40\n"));
    }

    #[test]
    fn selection_parsing() {
        assert_eq!(parse_selection("all").unwrap().len(), 12);
        let picked = parse_selection("7, 3,7").unwrap();
        assert_eq!(picked.iter().map(|p| p.preset_id).collect::<Vec<_>>(), [3, 7]);
        assert!(parse_selection("999").is_err());
    }

    #[test]
    fn resample_identity_is_byte_identical() {
        let mut frame = Frame::new(64, 48, 1, 10);
        for (i, v) in frame.data.iter_mut().enumerate() {
            *v = (i * 7 % 1024) as u16;
        }
        let g = cover_geometry(64, 48, 64, 48);
        assert_eq!(resample(&frame, &g).unwrap(), frame);
    }

    #[test]
    fn resample_preserves_constants() {
        let frame = Frame::constant(321, 220, 3, 10, 777);
        for (w, h) in [(192, 128), (138, 51), (128, 72), (100, 100)] {
            let g = cover_geometry(321, 220, w, h);
            let out = resample(&frame, &g).unwrap();
            assert_eq!((out.width, out.height), (w, h));
            assert!(out.data.iter().all(|&v| v == 777), "{w}x{h}");
        }
    }

    #[test]
    fn resample_rejects_wrong_source() {
        let frame = Frame::new(10, 10, 1, 10);
        let g = cover_geometry(20, 10, 5, 5);
        assert!(matches!(
            resample(&frame, &g),
            Err(PresetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rectangle_center_follows_geometry() {
        let (src_w, src_h) = (802, 550);
        let rect = PixelBox {
            x: 300,
            y: 200,
            w: 120,
            h: 64,
        };
        let mut frame = Frame::new(src_w, src_h, 1, 10);
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                frame.data[(y * src_w + x) as usize] = 1000;
            }
        }
        for (w, h) in [(480, 320), (345, 128), (320, 180)] {
            let g = cover_geometry(src_w, src_h, w, h);
            let out = resample(&frame, &g).unwrap();
            // Intensity-weighted centroid of the resampled rectangle.
            let (mut sx, mut sy, mut sum) = (0f64, 0f64, 0f64);
            for y in 0..h {
                for x in 0..w {
                    let v = out.get(x, y, 0) as f64;
                    sx += v * (x as f64 + 0.5);
                    sy += v * (y as f64 + 0.5);
                    sum += v;
                }
            }
            let (cx, cy) = rect.center();
            let (ex, ey) = g.project_point(cx, cy);
            assert!((sx / sum - ex).abs() <= 1.0, "{w}x{h} x");
            assert!((sy / sum - ey).abs() <= 1.0, "{w}x{h} y");
        }
    }

    #[test]
    fn decimate_passthrough_at_source_rate() {
        let ts = uniform_timestamps(91, 91);
        assert_eq!(decimate(&ts, 91_000).unwrap(), (0..91).collect::<Vec<_>>());
    }

    #[test]
    fn decimate_91_to_30_and_10() {
        let ts = uniform_timestamps(91, 91);
        let thirty = decimate(&ts, 30_000).unwrap();
        assert_eq!(thirty.len(), 30);
        assert!(thirty.windows(2).all(|w| (2..=4).contains(&(w[1] - w[0]))));
        let ten = decimate(&ts, 10_000).unwrap();
        assert_eq!(ten.len(), 10);
        assert!(ten.windows(2).all(|w| (9..=10).contains(&(w[1] - w[0]))));
    }

    #[test]
    fn decimate_ties_break_early() {
        // 20 MHz ticks at 0, 50, 100 ns; 50 is equidistant from 40 and 60.
        let ts = [0, 40, 60, 100];
        assert_eq!(decimate(&ts, 20_000_000_000).unwrap(), vec![0, 1, 3]);
        assert_eq!(decimate(&ts, 10_000_000_000).unwrap(), vec![0, 3]);
    }

    #[test]
    fn decimate_errors() {
        assert_eq!(decimate(&[], 10_000), Err(PresetError::EmptyInput));
        assert_eq!(decimate(&[5, 5], 10_000), Err(PresetError::NotIncreasing(1)));
        let ts = uniform_timestamps(11, 10);
        assert!(matches!(
            decimate(&ts, 30_000),
            Err(PresetError::RateTooHigh { .. })
        ));
    }

    proptest! {
        #[test]
        fn cover_and_centering(src_w in 1u32..5000, src_h in 1u32..5000, idx in 0usize..12) {
            let p = PRESETS[idx];
            let g = crop_geometry(src_w, src_h, &p);
            prop_assert!(g.scaled_w >= g.out_w && g.scaled_h >= g.out_h);
            prop_assert_eq!((g.out_w, g.out_h), (p.width, p.height));
            let right = g.scaled_w - g.out_w - g.crop_x;
            let bottom = g.scaled_h - g.out_h - g.crop_y;
            prop_assert!(right.abs_diff(g.crop_x) <= 1);
            prop_assert!(bottom.abs_diff(g.crop_y) <= 1);
        }

        #[test]
        fn decimation_count(n in 2u64..400, src_hz in 20u64..200, target in 1u64..20) {
            let ts = uniform_timestamps(n, src_hz);
            let picked = decimate(&ts, target * 1000).unwrap();
            let span = (ts[ts.len() - 1] - ts[0]) as u128;
            // Ticks at j / target seconds, j = 0.., up to one nanosecond past the span.
            let ticks = (0..).take_while(|&j: &u128| j * 1_000_000_000 < (span + 1) * target as u128).count();
            prop_assert_eq!(picked.len(), ticks);
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn transform_then_clip_equals_clip_then_transform(
            x in 0u32..3000, y in 0u32..2000, w in 1u32..800, h in 1u32..800, idx in 0usize..12,
        ) {
            let g = crop_geometry(3208, 2200, &PRESETS[idx]);
            let b = BoxF { x0: x as f64, y0: y as f64, x1: (x + w) as f64, y1: (y + h) as f64 };
            let direct = g.project_box(b);
            let via_source = b.intersect(g.source_window()).map(|c| {
                let (x0, y0) = g.project_point(c.x0, c.y0);
                let (x1, y1) = g.project_point(c.x1, c.y1);
                BoxF { x0, y0, x1, y1 }
            });
            match (direct, via_source) {
                (Some(a), Some(b)) => {
                    for (p, q) in [(a.x0, b.x0), (a.y0, b.y0), (a.x1, b.x1), (a.y1, b.y1)] {
                        prop_assert!((p - q).abs() < 1e-6, "{:?} vs {:?}", a, b);
                    }
                }
                (None, None) => {}
                (a, b) => {
                    // Degenerate slivers may round to empty on one side only.
                    let area = |o: Option<BoxF>| o.map_or(0.0, |b| (b.x1 - b.x0) * (b.y1 - b.y0));
                    prop_assert!(area(a) < 1e-6 && area(b) < 1e-6);
                }
            }
        }
    }
}
