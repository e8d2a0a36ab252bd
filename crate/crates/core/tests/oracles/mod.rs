//! Independent reference implementations used by the test suites.
#![allow(dead_code)]

use rand::Rng;
use reedsb_core::framebus::FrameMeta;
use reedsb_core::pluginproto::{
    Detection, ErrorMessage, FrameDescriptor, Hello, Message, Release, ResultPayload, Welcome,
};
use reedsb_core::presets::PixelBox;

/// Scale-to-cover geometry in exact rational arithmetic:
/// `(scaled_w, scaled_h, crop_x, crop_y)`.
pub fn cover_oracle(src_w: u64, src_h: u64, out_w: u64, out_h: u64) -> (u64, u64, u64, u64) {
    // s = max(out_w/src_w, out_h/src_h); compare by cross-multiplying.
    let (num, den) = if out_w * src_h >= out_h * src_w {
        (out_w, src_w)
    } else {
        (out_h, src_h)
    };
    // round(x * num / den), half up.
    let round = |x: u64| (2 * x * num + den) / (2 * den);
    let scaled_w = round(src_w);
    let scaled_h = round(src_h);
    (scaled_w, scaled_h, (scaled_w - out_w) / 2, (scaled_h - out_h) / 2)
}

/// Nearest-tick decimation by exhaustive search. Ticks are `t0 + j / rate`
/// strictly before `t_last + 1 ns`; ties go to the earlier frame.
pub fn decimate_oracle(timestamps: &[u64], target_mhz: u64) -> Vec<usize> {
    const NS_MHZ: i128 = 1_000_000_000_000;
    let t0 = timestamps[0] as i128;
    let span = *timestamps.last().unwrap() as i128 - t0;
    let rate = target_mhz as i128;
    let mut out: Vec<usize> = Vec::new();
    let mut j: i128 = 0;
    while j * NS_MHZ < (span + 1) * rate {
        let mut best = 0usize;
        let mut best_d = i128::MAX;
        for (i, &t) in timestamps.iter().enumerate() {
            // |t - tick| scaled by the rate in mHz.
            let d = ((t as i128 - t0) * rate - j * NS_MHZ).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        if !out.contains(&best) {
            out.push(best);
        }
        j += 1;
    }
    out.sort_unstable();
    out
}

fn le16(b: &[u8], o: usize) -> usize {
    u16::from_le_bytes([b[o], b[o + 1]]) as usize
}

fn le32(b: &[u8], o: usize) -> usize {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize
}

fn fixed_str_ok(field: &[u8]) -> bool {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    field[end..].iter().all(|&b| b == 0) && std::str::from_utf8(&field[..end]).is_ok()
}

/// Whether `p` is a well-formed payload of message type `ty`.
fn payload_ok(ty: u8, p: &[u8]) -> bool {
    match ty {
        1 => p.len() == 68 && p[3] == 0 && fixed_str_ok(&p[4..68]),
        2 => p.len() == 20,
        3 => p.len() == 150 && fixed_str_ok(&p[10..74]) && p[86 + 34..150].iter().all(|&b| b == 0),
        4 => {
            if p.len() < 22 {
                return false;
            }
            let fixed = 22 + 20 * le16(p, 16);
            p.len() >= fixed && p.len() == fixed + le32(p, fixed - 4)
        }
        5 => p.len() == 20,
        6 => p.is_empty(),
        7 => p.len() >= 4 && p.len() == 4 + le16(p, 2) && std::str::from_utf8(&p[4..]).is_ok(),
        _ => false,
    }
}

/// Offset of the first malformed message in a stream, by the grammar alone.
pub fn first_error_oracle(bytes: &[u8]) -> Option<usize> {
    let mut o = 0;
    while o < bytes.len() {
        let rest = &bytes[o..];
        if rest.len() < 5 {
            return Some(o);
        }
        let len = le32(rest, 0);
        let ty = rest[4];
        if len > 1 << 20 || !(1..=7).contains(&ty) || rest.len() < 5 + len {
            return Some(o);
        }
        if !payload_ok(ty, &rest[5..5 + len]) {
            return Some(o);
        }
        o += 5 + len;
    }
    None
}

fn random_text<R: Rng>(rng: &mut R, max_bytes: usize) -> String {
    const ALPHABET: &[char] = &['a', 'z', 'Q', '0', '9', '#', '-', '_', ' ', 'é', 'ß', '漢', '🦀'];
    let mut s = String::new();
    for _ in 0..rng.random_range(0..=max_bytes) {
        let c = ALPHABET[rng.random_range(0..ALPHABET.len())];
        if s.len() + c.len_utf8() > max_bytes {
            break;
        }
        s.push(c);
    }
    s
}

pub fn random_meta<R: Rng>(rng: &mut R) -> FrameMeta {
    FrameMeta {
        frame_id: rng.random(),
        timestamp_ns: rng.random(),
        source_stream: rng.random(),
        preset_id: rng.random(),
        width: rng.random(),
        height: rng.random(),
        stride: rng.random(),
        channels: rng.random(),
        bit_depth: rng.random(),
    }
}

/// A random message whose fields all fit the wire format.
pub fn random_message<R: Rng>(rng: &mut R) -> Message {
    match rng.random_range(0..7) {
        0 => Message::Hello(Hello {
            protocol_version: rng.random(),
            task: rng.random(),
            name: random_text(rng, 64),
        }),
        1 => Message::Welcome(Welcome {
            consumer_id: rng.random(),
            slot_count: rng.random(),
            slot_capacity: rng.random(),
            consumer_count: rng.random(),
        }),
        2 => Message::Frame(FrameDescriptor {
            frame_id: rng.random(),
            preset_id: rng.random(),
            region: random_text(rng, 64),
            slot_index: rng.random(),
            generation: rng.random(),
            meta: random_meta(rng),
        }),
        3 => {
            let n = rng.random_range(0..6);
            Message::Result(ResultPayload {
                frame_id: rng.random(),
                exec_time_ns: rng.random(),
                detections: (0..n)
                    .map(|_| Detection {
                        class: rng.random(),
                        bbox: PixelBox {
                            x: rng.random(),
                            y: rng.random(),
                            w: rng.random(),
                            h: rng.random(),
                        },
                        score: rng.random(),
                    })
                    .collect(),
                blob: (0..rng.random_range(0..40)).map(|_| rng.random()).collect(),
            })
        }
        4 => Message::Release(Release {
            frame_id: rng.random(),
            slot_index: rng.random(),
            generation: rng.random(),
        }),
        5 => Message::Bye,
        _ => Message::Error(ErrorMessage {
            code: rng.random(),
            message: random_text(rng, 80),
        }),
    }
}

/// A byte stream for fuzzing: either noise, or valid messages with a few
/// mutations applied.
pub fn fuzz_stream<R: Rng>(rng: &mut R) -> Vec<u8> {
    if rng.random_bool(0.2) {
        let n = rng.random_range(0..96);
        return (0..n).map(|_| rng.random()).collect();
    }
    let mut bytes = Vec::new();
    for _ in 0..rng.random_range(1..5) {
        bytes.extend(reedsb_core::pluginproto::encode(&random_message(rng)));
    }
    for _ in 0..rng.random_range(0..4) {
        if bytes.is_empty() {
            break;
        }
        let i = rng.random_range(0..bytes.len());
        match rng.random_range(0..4) {
            0 => bytes[i] ^= 1 << rng.random_range(0..8),
            1 => bytes[i] = rng.random(),
            2 => bytes.truncate(i),
            _ => bytes.insert(i, rng.random()),
        }
    }
    bytes
}
