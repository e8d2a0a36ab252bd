//! Shared-memory broadcast ring for decoded frames.
//!
//! One producer decodes each frame once into a slot of a mapped region; every
//! registered consumer reads it in place and releases it. A slot returns to
//! the producer only after all consumers released it, so the ring depth
//! (`slot_count`) bounds how far the producer runs ahead. `slot_count == 1`
//! gives strict per-frame lockstep.
//!
//! Region layout (little-endian, offsets in bytes):
//!
//! ```text
//! header (128 bytes)
//!   0  magic "RBUS"          4  version u16          8  slot_count u32
//!  16  slot_capacity u64    24  consumer_count u32   28  flags u32 (bit 0: shutdown)
//!  32  epoch u32 (wait word) 40  published u64        48  active consumer mask u64
//!  56  stale reads u64      64  refcount underflows u64
//! consumer table (64 bytes per consumer, at 128)
//!   0  cursor u64   8  delivered u64   16  released u64   24  attached u32   28  deregistered u32
//! slot table (128-byte control blocks, 64-byte aligned)
//!   0  state u32   8  generation u64   16  refcount u32   24  meta [64]
//!  88  sequence u64   96  pending consumer mask u64   104  payload_len u64
//! payload arena (page aligned, slot_capacity rounded up to 64 per slot)
//! ```
//!
//! Control words are only modified with atomic read-modify-write operations.
//! Waiting uses a futex on the epoch word on Linux, which is bumped on every
//! publish, free, deregistration and shutdown.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use memmap2::{Mmap, MmapMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BUS_MAGIC: [u8; 4] = *b"RBUS";
pub const BUS_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 128;
pub const CONSUMER_ENTRY_LEN: usize = 64;
pub const SLOT_CONTROL_LEN: usize = 128;
pub const META_LEN: usize = 64;
pub const MAX_CONSUMERS: u32 = 64;

const H_MAGIC: usize = 0;
const H_VERSION: usize = 4;
const H_SLOT_COUNT: usize = 8;
const H_SLOT_CAPACITY: usize = 16;
const H_CONSUMER_COUNT: usize = 24;
const H_FLAGS: usize = 28;
const H_EPOCH: usize = 32;
const H_PUBLISHED: usize = 40;
const H_ACTIVE: usize = 48;
const H_STALE_READS: usize = 56;
const H_UNDERFLOWS: usize = 64;

const C_CURSOR: usize = 0;
const C_DELIVERED: usize = 8;
const C_RELEASED: usize = 16;
const C_ATTACHED: usize = 24;
const C_DEREGISTERED: usize = 28;

const S_STATE: usize = 0;
const S_GENERATION: usize = 8;
const S_REFCOUNT: usize = 16;
const S_META: usize = 24;
const S_SEQ: usize = 88;
const S_PENDING: usize = 96;
const S_PAYLOAD_LEN: usize = 104;

const FLAG_SHUTDOWN: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u32)]
pub enum SlotState {
    Free = 0,
    Filling = 1,
    Published = 2,
    Draining = 3,
}

impl SlotState {
    fn from_u32(v: u32) -> SlotState {
        match v {
            1 => SlotState::Filling,
            2 => SlotState::Published,
            3 => SlotState::Draining,
            _ => SlotState::Free,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BusError {
    #[error("bus stalled on slot {slot_index}: slowest consumer {slowest:?}")]
    Stalled {
        slot_index: u32,
        slowest: Option<u32>,
    },
    #[error("slot recycled")]
    SlotRecycled,
    #[error("double publish")]
    DoublePublish,
    #[error("already released")]
    AlreadyReleased,
    #[error("a slot is already being filled")]
    SlotInUse,
    #[error("meta does not match payload: {0}")]
    MetaMismatch(String),
    #[error("frame id {frame_id} not increasing for stream {stream} preset {preset}")]
    NonMonotonicFrame {
        frame_id: u64,
        stream: u16,
        preset: u16,
    },
    #[error("end of stream")]
    EndOfStream,
    #[error("timed out waiting for a frame")]
    WaitTimeout,
    #[error("consumer {0} was deregistered")]
    Deregistered(u32),
    #[error("consumer {0} is not registered on this bus")]
    UnknownConsumer(u32),
    #[error("consumer {0} is already attached")]
    AlreadyAttached(u32),
    #[error("invalid bus config: {0}")]
    InvalidConfig(String),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for BusError {
    fn from(e: std::io::Error) -> Self {
        BusError::Io(e.to_string())
    }
}

/// Per-frame metadata stored next to the payload and echoed in descriptors.
///
/// Encoded as a fixed 64-byte record: frame_id u64, timestamp_ns u64,
/// source_stream u16, preset_id u16, width u32, height u32, stride u32,
/// channels u8, bit_depth u8, zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_id: u64,
    pub timestamp_ns: u64,
    pub source_stream: u16,
    pub preset_id: u16,
    pub width: u32,
    pub height: u32,
    /// Bytes per row.
    pub stride: u32,
    pub channels: u8,
    pub bit_depth: u8,
}

impl FrameMeta {
    pub fn encode(&self) -> [u8; META_LEN] {
        let mut out = [0u8; META_LEN];
        out[0..8].copy_from_slice(&self.frame_id.to_le_bytes());
        out[8..16].copy_from_slice(&self.timestamp_ns.to_le_bytes());
        out[16..18].copy_from_slice(&self.source_stream.to_le_bytes());
        out[18..20].copy_from_slice(&self.preset_id.to_le_bytes());
        out[20..24].copy_from_slice(&self.width.to_le_bytes());
        out[24..28].copy_from_slice(&self.height.to_le_bytes());
        out[28..32].copy_from_slice(&self.stride.to_le_bytes());
        out[32] = self.channels;
        out[33] = self.bit_depth;
        out
    }

    /// Returns `None` if the padding is not zero.
    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let bytes: &[u8; META_LEN] = bytes.try_into().ok()?;
        if bytes[34..].iter().any(|&b| b != 0) {
            return None;
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        Some(FrameMeta {
            frame_id: u64_at(0),
            timestamp_ns: u64_at(8),
            source_stream: u16_at(16),
            preset_id: u16_at(18),
            width: u32_at(20),
            height: u32_at(24),
            stride: u32_at(28),
            channels: bytes[32],
            bit_depth: bytes[33],
        })
    }

    pub fn bytes_per_sample(&self) -> u32 {
        if self.bit_depth <= 8 {
            1
        } else {
            2
        }
    }

    pub fn payload_len(&self) -> u64 {
        self.stride as u64 * self.height as u64
    }

    pub fn check(&self) -> Result<(), String> {
        let min_stride =
            self.width as u64 * self.bytes_per_sample() as u64 * self.channels as u64;
        if (self.stride as u64) < min_stride {
            return Err(format!("stride {} < {}", self.stride, min_stride));
        }
        if self.channels == 0 || self.bit_depth == 0 || self.bit_depth > 16 {
            return Err(format!(
                "invalid sample format: {} channels, {} bits",
                self.channels, self.bit_depth
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusConfig {
    pub slot_count: u32,
    pub slot_capacity: u64,
    pub consumer_count: u32,
    pub publish_timeout: Duration,
    pub release_timeout: Duration,
}

impl BusConfig {
    pub fn new(slot_count: u32, slot_capacity: u64, consumer_count: u32) -> Self {
        BusConfig {
            slot_count,
            slot_capacity,
            consumer_count,
            publish_timeout: Duration::from_secs(60),
            release_timeout: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> Result<(), BusError> {
        if self.slot_count == 0 {
            return Err(BusError::InvalidConfig("slot_count must be at least 1".into()));
        }
        if self.slot_capacity == 0 {
            return Err(BusError::InvalidConfig("slot_capacity must be positive".into()));
        }
        if self.consumer_count > MAX_CONSUMERS {
            return Err(BusError::InvalidConfig(format!(
                "at most {MAX_CONSUMERS} consumers"
            )));
        }
        Ok(())
    }
}

/// Identifies one use of a slot; stale once the slot is recycled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotHandle {
    pub slot_index: u32,
    pub generation: u64,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    slot_count: u32,
    slot_capacity: u64,
    consumer_count: u32,
    slots_off: usize,
    arena_off: usize,
    total: usize,
}

fn align_up(v: usize, a: usize) -> usize {
    v.div_ceil(a) * a
}

impl Layout {
    fn new(slot_count: u32, slot_capacity: u64, consumer_count: u32) -> Self {
        let slot_capacity = align_up(slot_capacity as usize, 64) as u64;
        let slots_off = HEADER_LEN + CONSUMER_ENTRY_LEN * consumer_count as usize;
        let arena_off = align_up(slots_off + SLOT_CONTROL_LEN * slot_count as usize, 4096);
        let total = arena_off + slot_capacity as usize * slot_count as usize;
        Layout {
            slot_count,
            slot_capacity,
            consumer_count,
            slots_off,
            arena_off,
            total,
        }
    }

    fn consumer(&self, id: u32) -> usize {
        HEADER_LEN + CONSUMER_ENTRY_LEN * id as usize
    }

    fn slot(&self, index: u32) -> usize {
        self.slots_off + SLOT_CONTROL_LEN * index as usize
    }

    fn payload(&self, index: u32) -> usize {
        self.arena_off + self.slot_capacity as usize * index as usize
    }
}

/// Keeps the mapping alive; all access goes through `Region::base`.
#[allow(dead_code)]
enum Mapping {
    ReadWrite(MmapMut),
    ReadOnly(Mmap),
}

/// A mapped bus region. All shared state is accessed through atomics at
/// fixed offsets.
struct Region {
    _mapping: Mapping,
    base: *mut u8,
    len: usize,
    layout: Layout,
}

// SAFETY: the mapping lives as long as `Region`; concurrent access to control
// words goes through atomics and payload access is guarded by the slot
// protocol (single writer while filling, read-only while published).
unsafe impl Send for Region {}
unsafe impl Sync for Region {}

impl Region {
    fn create(path: &Path, layout: Layout) -> Result<Region, BusError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(path)?;
        file.set_len(layout.total as u64)?;
        // SAFETY: freshly created file of the right size, shared mapping.
        let mut map = unsafe { MmapMut::map_mut(&file)? };
        let base = map.as_mut_ptr();
        map[H_MAGIC..H_MAGIC + 4].copy_from_slice(&BUS_MAGIC);
        map[H_VERSION..H_VERSION + 2].copy_from_slice(&BUS_VERSION.to_le_bytes());
        map[H_SLOT_COUNT..H_SLOT_COUNT + 4].copy_from_slice(&layout.slot_count.to_le_bytes());
        map[H_SLOT_CAPACITY..H_SLOT_CAPACITY + 8]
            .copy_from_slice(&layout.slot_capacity.to_le_bytes());
        map[H_CONSUMER_COUNT..H_CONSUMER_COUNT + 4]
            .copy_from_slice(&layout.consumer_count.to_le_bytes());
        let active = if layout.consumer_count == 64 {
            u64::MAX
        } else {
            (1u64 << layout.consumer_count) - 1
        };
        map[H_ACTIVE..H_ACTIVE + 8].copy_from_slice(&active.to_le_bytes());
        Ok(Region {
            len: map.len(),
            _mapping: Mapping::ReadWrite(map),
            base,
            layout,
        })
    }

    fn open(path: &Path, writable: bool) -> Result<Region, BusError> {
        let file = OpenOptions::new().read(true).write(writable).open(path)?;
        let (mapping, base, len) = if writable {
            // SAFETY: shared mapping of a bus file; layout validated below.
            let mut map = unsafe { MmapMut::map_mut(&file)? };
            let base = map.as_mut_ptr();
            let len = map.len();
            (Mapping::ReadWrite(map), base, len)
        } else {
            // SAFETY: as above, read-only.
            let map = unsafe { Mmap::map(&file)? };
            let base = map.as_ptr() as *mut u8;
            let len = map.len();
            (Mapping::ReadOnly(map), base, len)
        };
        let layout = read_layout(&file, base, len)?;
        Ok(Region {
            _mapping: mapping,
            base,
            len,
            layout,
        })
    }

    fn u32_at(&self, off: usize) -> &AtomicU32 {
        debug_assert!(off.is_multiple_of(4) && off + 4 <= self.len);
        // SAFETY: in bounds, aligned, and only ever accessed atomically.
        unsafe { &*(self.base.add(off) as *const AtomicU32) }
    }

    fn u64_at(&self, off: usize) -> &AtomicU64 {
        debug_assert!(off.is_multiple_of(8) && off + 8 <= self.len);
        // SAFETY: as above.
        unsafe { &*(self.base.add(off) as *const AtomicU64) }
    }

    fn bytes(&self, off: usize, len: usize) -> &[u8] {
        assert!(off + len <= self.len);
        // SAFETY: in bounds of the live mapping.
        unsafe { std::slice::from_raw_parts(self.base.add(off), len) }
    }

    /// # Safety
    /// The caller must hold the slot in `Filling` state (sole writer).
    #[allow(clippy::mut_from_ref)]
    unsafe fn bytes_mut(&self, off: usize, len: usize) -> &mut [u8] {
        assert!(off + len <= self.len);
        std::slice::from_raw_parts_mut(self.base.add(off), len)
    }

    fn epoch(&self) -> &AtomicU32 {
        self.u32_at(H_EPOCH)
    }

    fn notify(&self) {
        self.epoch().fetch_add(1, Ordering::AcqRel);
        futex::wake_all(self.epoch());
    }

    /// Blocks until the epoch moves past `seen` or `timeout` elapses.
    fn wait(&self, seen: u32, timeout: Duration) {
        futex::wait(self.epoch(), seen, timeout);
    }

    fn active_mask(&self) -> u64 {
        self.u64_at(H_ACTIVE).load(Ordering::Acquire)
    }

    fn published(&self) -> u64 {
        self.u64_at(H_PUBLISHED).load(Ordering::Acquire)
    }

    fn shutdown_requested(&self) -> bool {
        self.u32_at(H_FLAGS).load(Ordering::Acquire) & FLAG_SHUTDOWN != 0
    }

    fn slot_state(&self, index: u32) -> SlotState {
        SlotState::from_u32(
            self.u32_at(self.layout.slot(index) + S_STATE)
                .load(Ordering::Acquire),
        )
    }

    fn slot_generation(&self, index: u32) -> u64 {
        self.u64_at(self.layout.slot(index) + S_GENERATION)
            .load(Ordering::Acquire)
    }

    fn slot_meta(&self, index: u32) -> FrameMeta {
        FrameMeta::decode(self.bytes(self.layout.slot(index) + S_META, META_LEN))
            .unwrap_or_default()
    }

    /// Clears `consumer`'s pending bit on a slot and drops one reference.
    /// Returns false if the bit was not set. The last release frees the slot.
    fn release_bit(&self, index: u32, consumer: u32) -> bool {
        let slot = self.layout.slot(index);
        let bit = 1u64 << consumer;
        let pending = self.u64_at(slot + S_PENDING);
        let mut cur = pending.load(Ordering::Acquire);
        loop {
            if cur & bit == 0 {
                return false;
            }
            match pending.compare_exchange_weak(cur, cur & !bit, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => break,
                Err(actual) => cur = actual,
            }
        }
        let refcount = self.u32_at(slot + S_REFCOUNT);
        let prev = refcount.fetch_sub(1, Ordering::AcqRel);
        if prev == 0 {
            refcount.fetch_add(1, Ordering::AcqRel);
            self.u64_at(H_UNDERFLOWS).fetch_add(1, Ordering::AcqRel);
            return true;
        }
        let state = self.u32_at(slot + S_STATE);
        if prev == 1 {
            state.store(SlotState::Free as u32, Ordering::Release);
            self.notify();
        } else {
            let _ = state.compare_exchange(
                SlotState::Published as u32,
                SlotState::Draining as u32,
                Ordering::AcqRel,
                Ordering::Acquire,
            );
        }
        true
    }

    /// Releases pending bits of consumers that are no longer active.
    fn reap(&self, index: u32) {
        let stale = self
            .u64_at(self.layout.slot(index) + S_PENDING)
            .load(Ordering::Acquire)
            & !self.active_mask();
        for consumer in 0..64 {
            if stale & (1 << consumer) != 0 {
                self.release_bit(index, consumer);
            }
        }
    }

    fn stats(&self) -> BusStats {
        let consumers = (0..self.layout.consumer_count)
            .map(|id| {
                let off = self.layout.consumer(id);
                ConsumerStats {
                    consumer_id: id,
                    delivered: self.u64_at(off + C_DELIVERED).load(Ordering::Acquire),
                    released: self.u64_at(off + C_RELEASED).load(Ordering::Acquire),
                    deregistered: self.u32_at(off + C_DEREGISTERED).load(Ordering::Acquire) != 0,
                }
            })
            .collect();
        let slots = (0..self.layout.slot_count)
            .map(|i| SlotStats {
                slot_index: i,
                state: self.slot_state(i),
                generation: self.slot_generation(i),
                refcount: self
                    .u32_at(self.layout.slot(i) + S_REFCOUNT)
                    .load(Ordering::Acquire),
            })
            .collect();
        BusStats {
            published: self.published(),
            stale_reads: self.u64_at(H_STALE_READS).load(Ordering::Acquire),
            refcount_underflows: self.u64_at(H_UNDERFLOWS).load(Ordering::Acquire),
            consumers,
            slots,
        }
    }

    fn deregister(&self, consumer: u32) {
        self.u64_at(H_ACTIVE)
            .fetch_and(!(1u64 << consumer), Ordering::AcqRel);
        self.u32_at(self.layout.consumer(consumer) + C_DEREGISTERED)
            .store(1, Ordering::Release);
        for index in 0..self.layout.slot_count {
            self.release_bit(index, consumer);
        }
        self.notify();
    }
}

fn read_layout(file: &File, base: *const u8, len: usize) -> Result<Layout, BusError> {
    if len < HEADER_LEN || (file.metadata()?.len() as usize) < HEADER_LEN {
        return Err(BusError::InvalidRegion("shorter than header".into()));
    }
    // SAFETY: at least HEADER_LEN bytes are mapped.
    let header = unsafe { std::slice::from_raw_parts(base, HEADER_LEN) };
    if header[H_MAGIC..H_MAGIC + 4] != BUS_MAGIC {
        return Err(BusError::InvalidRegion("bad magic".into()));
    }
    let version = u16::from_le_bytes([header[H_VERSION], header[H_VERSION + 1]]);
    if version != BUS_VERSION {
        return Err(BusError::InvalidRegion(format!("unsupported version {version}")));
    }
    let slot_count = u32::from_le_bytes(header[H_SLOT_COUNT..H_SLOT_COUNT + 4].try_into().unwrap());
    let slot_capacity =
        u64::from_le_bytes(header[H_SLOT_CAPACITY..H_SLOT_CAPACITY + 8].try_into().unwrap());
    let consumer_count =
        u32::from_le_bytes(header[H_CONSUMER_COUNT..H_CONSUMER_COUNT + 4].try_into().unwrap());
    if consumer_count > MAX_CONSUMERS || slot_count == 0 {
        return Err(BusError::InvalidRegion("bad header counts".into()));
    }
    let layout = Layout::new(slot_count, slot_capacity, consumer_count);
    if layout.slot_capacity != slot_capacity || layout.total != len {
        return Err(BusError::InvalidRegion(format!(
            "size {len} does not match header (expected {})",
            layout.total
        )));
    }
    Ok(layout)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerStats {
    pub consumer_id: u32,
    pub delivered: u64,
    pub released: u64,
    pub deregistered: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotStats {
    pub slot_index: u32,
    pub state: SlotState,
    pub generation: u64,
    pub refcount: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusStats {
    pub published: u64,
    pub stale_reads: u64,
    pub refcount_underflows: u64,
    pub consumers: Vec<ConsumerStats>,
    pub slots: Vec<SlotStats>,
}

impl BusStats {
    /// True when every slot is free with no outstanding references.
    pub fn quiescent(&self) -> bool {
        self.slots
            .iter()
            .all(|s| s.state == SlotState::Free && s.refcount == 0)
    }
}

fn unique_region_name() -> String {
    use std::sync::atomic::AtomicU64 as Counter;
    static NEXT: Counter = Counter::new(0);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    format!(
        "reedsb-bus-{}-{}-{:08x}",
        std::process::id(),
        NEXT.fetch_add(1, Ordering::Relaxed),
        nanos
    )
}

/// Producer side. Owns the region file and removes it on drop.
pub struct FrameBus {
    region: Region,
    config: BusConfig,
    name: String,
    path: PathBuf,
    filling: Option<SlotHandle>,
    last_frame: HashMap<(u16, u16), u64>,
    decode_count: u64,
}

impl FrameBus {
    /// Creates a bus with a generated name in [`crate::scratch_dir`].
    pub fn create(config: BusConfig) -> Result<FrameBus, BusError> {
        Self::create_in(&crate::scratch_dir(), &unique_region_name(), config)
    }

    pub fn create_in(dir: &Path, name: &str, config: BusConfig) -> Result<FrameBus, BusError> {
        config.validate()?;
        if name.is_empty() || name.len() >= crate::pluginproto::REGION_NAME_LEN || name.contains('/')
        {
            return Err(BusError::InvalidConfig(format!("bad region name {name:?}")));
        }
        let layout = Layout::new(config.slot_count, config.slot_capacity, config.consumer_count);
        let path = dir.join(name);
        let region = Region::create(&path, layout)?;
        Ok(FrameBus {
            region,
            config,
            name: name.to_string(),
            path,
            filling: None,
            last_frame: HashMap::new(),
            decode_count: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    /// Slot capacity after rounding to the payload alignment.
    pub fn slot_capacity(&self) -> u64 {
        self.region.layout.slot_capacity
    }

    /// Counts a source-frame decode performed on behalf of this bus.
    pub fn record_decode(&mut self) {
        self.decode_count += 1;
    }

    pub fn decode_count(&self) -> u64 {
        self.decode_count
    }

    /// Waits for the next ring slot to be free and claims it for filling.
    pub fn acquire_slot(&mut self) -> Result<SlotHandle, BusError> {
        if self.filling.is_some() {
            return Err(BusError::SlotInUse);
        }
        let r = &self.region;
        let index = (r.published() % r.layout.slot_count as u64) as u32;
        let deadline = Instant::now() + self.config.publish_timeout;
        loop {
            let seen = r.epoch().load(Ordering::Acquire);
            r.reap(index);
            if r.slot_state(index) == SlotState::Free {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(BusError::Stalled {
                    slot_index: index,
                    slowest: self.slowest_on(index),
                });
            }
            r.wait(seen, deadline - now);
        }
        let slot = r.layout.slot(index);
        let generation = r.u64_at(slot + S_GENERATION).fetch_add(1, Ordering::AcqRel) + 1;
        r.u32_at(slot + S_REFCOUNT).store(0, Ordering::Release);
        r.u64_at(slot + S_PENDING).store(0, Ordering::Release);
        r.u32_at(slot + S_STATE)
            .store(SlotState::Filling as u32, Ordering::Release);
        let handle = SlotHandle {
            slot_index: index,
            generation,
        };
        self.filling = Some(handle);
        Ok(handle)
    }

    /// The consumer holding `index` with the lowest cursor.
    fn slowest_on(&self, index: u32) -> Option<u32> {
        let r = &self.region;
        let pending = r.u64_at(r.layout.slot(index) + S_PENDING).load(Ordering::Acquire);
        (0..r.layout.consumer_count)
            .filter(|c| pending & (1 << c) != 0)
            .min_by_key(|&c| {
                (
                    r.u64_at(r.layout.consumer(c) + C_CURSOR).load(Ordering::Acquire),
                    c,
                )
            })
    }

    /// Writable payload of the slot being filled.
    pub fn payload_mut(&mut self, handle: SlotHandle) -> Result<&mut [u8], BusError> {
        if self.filling != Some(handle) {
            return Err(BusError::SlotRecycled);
        }
        let off = self.region.layout.payload(handle.slot_index);
        let cap = self.region.layout.slot_capacity as usize;
        // SAFETY: the slot is in `Filling` and owned by this producer.
        Ok(unsafe { self.region.bytes_mut(off, cap) })
    }

    /// Publishes the filled slot to all active consumers.
    pub fn publish(&mut self, handle: SlotHandle, meta: FrameMeta) -> Result<(), BusError> {
        let r = &self.region;
        if handle.slot_index >= r.layout.slot_count {
            return Err(BusError::SlotRecycled);
        }
        if self.filling != Some(handle) {
            return Err(if r.slot_generation(handle.slot_index) == handle.generation {
                BusError::DoublePublish
            } else {
                BusError::SlotRecycled
            });
        }
        meta.check().map_err(BusError::MetaMismatch)?;
        if meta.payload_len() > r.layout.slot_capacity {
            return Err(BusError::MetaMismatch(format!(
                "payload {} exceeds slot capacity {}",
                meta.payload_len(),
                r.layout.slot_capacity
            )));
        }
        let key = (meta.source_stream, meta.preset_id);
        if let Some(&last) = self.last_frame.get(&key) {
            if meta.frame_id <= last {
                return Err(BusError::NonMonotonicFrame {
                    frame_id: meta.frame_id,
                    stream: meta.source_stream,
                    preset: meta.preset_id,
                });
            }
        }
        self.last_frame.insert(key, meta.frame_id);

        let slot = r.layout.slot(handle.slot_index);
        // SAFETY: sole writer while filling.
        unsafe { r.bytes_mut(slot + S_META, META_LEN) }.copy_from_slice(&meta.encode());
        r.u64_at(slot + S_PAYLOAD_LEN)
            .store(meta.payload_len(), Ordering::Release);
        let seq = r.published();
        r.u64_at(slot + S_SEQ).store(seq, Ordering::Release);
        let active = r.active_mask();
        r.u64_at(slot + S_PENDING).store(active, Ordering::Release);
        r.u32_at(slot + S_REFCOUNT)
            .store(active.count_ones(), Ordering::Release);
        let state = if active == 0 {
            SlotState::Free
        } else {
            SlotState::Published
        };
        r.u32_at(slot + S_STATE).store(state as u32, Ordering::Release);
        r.u64_at(H_PUBLISHED).store(seq + 1, Ordering::Release);
        self.filling = None;
        // A consumer deregistered after the active mask was read.
        r.reap(handle.slot_index);
        r.notify();
        Ok(())
    }

    pub fn state(&self, slot_index: u32) -> SlotState {
        self.region.slot_state(slot_index)
    }

    pub fn refcount(&self, slot_index: u32) -> u32 {
        self.region
            .u32_at(self.region.layout.slot(slot_index) + S_REFCOUNT)
            .load(Ordering::Acquire)
    }

    /// Forcibly removes a consumer (straggler policy). Its held slots are
    /// released on its behalf and later publishes skip it.
    pub fn deregister(&self, consumer_id: u32) -> Result<(), BusError> {
        if consumer_id >= self.region.layout.consumer_count {
            return Err(BusError::UnknownConsumer(consumer_id));
        }
        self.region.deregister(consumer_id);
        Ok(())
    }

    /// Signals end of stream; consumers drain what is published, then stop.
    pub fn shutdown(&self) {
        self.region
            .u32_at(H_FLAGS)
            .fetch_or(FLAG_SHUTDOWN, Ordering::AcqRel);
        self.region.notify();
    }

    /// Waits until every published slot has been released.
    pub fn wait_quiescent(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let seen = self.region.epoch().load(Ordering::Acquire);
            for i in 0..self.region.layout.slot_count {
                self.region.reap(i);
            }
            if self.stats().quiescent() {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            self.region.wait(seen, (deadline - now).min(Duration::from_millis(50)));
        }
    }

    pub fn stats(&self) -> BusStats {
        self.region.stats()
    }
}

impl Drop for FrameBus {
    fn drop(&mut self) {
        self.shutdown();
        let _ = std::fs::remove_file(&self.path);
    }
}

/// One frame handed to a consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub handle: SlotHandle,
    pub meta: FrameMeta,
    pub sequence: u64,
}

/// Consumer side, attached to an existing region by name or path.
pub struct BusConsumer {
    region: Region,
    consumer_id: u32,
    outstanding: HashMap<u32, u64>,
    deliveries: Vec<(u64, u16)>,
}

impl BusConsumer {
    pub fn attach(name: &str, consumer_id: u32) -> Result<BusConsumer, BusError> {
        Self::attach_path(&crate::scratch_dir().join(name), consumer_id)
    }

    pub fn attach_path(path: &Path, consumer_id: u32) -> Result<BusConsumer, BusError> {
        let region = Region::open(path, true)?;
        if consumer_id >= region.layout.consumer_count {
            return Err(BusError::UnknownConsumer(consumer_id));
        }
        let entry = region.layout.consumer(consumer_id);
        if region
            .u32_at(entry + C_ATTACHED)
            .compare_exchange(0, 1, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(BusError::AlreadyAttached(consumer_id));
        }
        Ok(BusConsumer {
            region,
            consumer_id,
            outstanding: HashMap::new(),
            deliveries: Vec::new(),
        })
    }

    pub fn consumer_id(&self) -> u32 {
        self.consumer_id
    }

    fn deregistered(&self) -> bool {
        self.region.active_mask() & (1 << self.consumer_id) == 0
    }

    /// Blocks until the next frame in publish order or end of stream.
    pub fn consume_next(&mut self) -> Result<Delivery, BusError> {
        self.consume_next_timeout(None)
    }

    pub fn consume_next_timeout(&mut self, timeout: Option<Duration>) -> Result<Delivery, BusError> {
        let r = &self.region;
        let entry = r.layout.consumer(self.consumer_id);
        let cursor = r.u64_at(entry + C_CURSOR).load(Ordering::Acquire);
        let index = (cursor % r.layout.slot_count as u64) as u32;
        let slot = r.layout.slot(index);
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let seen = r.epoch().load(Ordering::Acquire);
            if self.deregistered() {
                return Err(BusError::Deregistered(self.consumer_id));
            }
            let state = r.slot_state(index);
            if matches!(state, SlotState::Published | SlotState::Draining)
                && r.u64_at(slot + S_SEQ).load(Ordering::Acquire) == cursor
            {
                let generation = r.slot_generation(index);
                let meta = r.slot_meta(index);
                let pending = r.u64_at(slot + S_PENDING).load(Ordering::Acquire);
                if pending & (1 << self.consumer_id) == 0 || r.slot_generation(index) != generation
                {
                    // Released on our behalf: we were deregistered meanwhile.
                    return Err(BusError::Deregistered(self.consumer_id));
                }
                r.u64_at(entry + C_CURSOR).store(cursor + 1, Ordering::Release);
                r.u64_at(entry + C_DELIVERED).fetch_add(1, Ordering::AcqRel);
                self.outstanding.insert(index, generation);
                self.deliveries.push((meta.frame_id, meta.preset_id));
                return Ok(Delivery {
                    handle: SlotHandle {
                        slot_index: index,
                        generation,
                    },
                    meta,
                    sequence: cursor,
                });
            }
            if r.shutdown_requested() && cursor >= r.published() {
                return Err(BusError::EndOfStream);
            }
            let wait = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(BusError::WaitTimeout);
                    }
                    (d - now).min(Duration::from_millis(200))
                }
                None => Duration::from_millis(200),
            };
            r.wait(seen, wait);
        }
    }

    fn check_live(&self, handle: SlotHandle) -> Result<(), BusError> {
        let r = &self.region;
        let live = self.outstanding.get(&handle.slot_index) == Some(&handle.generation)
            && handle.slot_index < r.layout.slot_count
            && r.slot_generation(handle.slot_index) == handle.generation
            && matches!(
                r.slot_state(handle.slot_index),
                SlotState::Published | SlotState::Draining
            );
        if live {
            Ok(())
        } else {
            r.u64_at(H_STALE_READS).fetch_add(1, Ordering::AcqRel);
            Err(BusError::SlotRecycled)
        }
    }

    /// Read-only payload view, validated by generation.
    pub fn read(&self, handle: SlotHandle) -> Result<&[u8], BusError> {
        self.check_live(handle)?;
        let r = &self.region;
        let len = r
            .u64_at(r.layout.slot(handle.slot_index) + S_PAYLOAD_LEN)
            .load(Ordering::Acquire) as usize;
        let bytes = r.bytes(r.layout.payload(handle.slot_index), len);
        Ok(bytes)
    }

    /// Releases this consumer's reference on a delivered slot.
    pub fn release(&mut self, handle: SlotHandle) -> Result<(), BusError> {
        let r = &self.region;
        if handle.slot_index >= r.layout.slot_count {
            return Err(BusError::SlotRecycled);
        }
        if self.outstanding.get(&handle.slot_index) != Some(&handle.generation) {
            return Err(if r.slot_generation(handle.slot_index) == handle.generation {
                BusError::AlreadyReleased
            } else {
                BusError::SlotRecycled
            });
        }
        self.outstanding.remove(&handle.slot_index);
        if !r.release_bit(handle.slot_index, self.consumer_id) {
            return Err(BusError::Deregistered(self.consumer_id));
        }
        r.u64_at(r.layout.consumer(self.consumer_id) + C_RELEASED)
            .fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Leaves the bus; outstanding slots are released.
    pub fn deregister(&mut self) {
        self.outstanding.clear();
        self.region.deregister(self.consumer_id);
    }

    /// `(frame_id, preset_id)` of every delivery, in order.
    pub fn delivery_log(&self) -> &[(u64, u16)] {
        &self.deliveries
    }

    pub fn take_delivery_log(&mut self) -> Vec<(u64, u16)> {
        std::mem::take(&mut self.deliveries)
    }

    pub fn stats(&self) -> BusStats {
        self.region.stats()
    }
}

/// Read-only mapping used by plugin processes to resolve descriptors.
pub struct BusReader {
    region: Region,
}

impl BusReader {
    pub fn open(name: &str) -> Result<BusReader, BusError> {
        Self::open_path(&crate::scratch_dir().join(name))
    }

    pub fn open_path(path: &Path) -> Result<BusReader, BusError> {
        Ok(BusReader {
            region: Region::open(path, false)?,
        })
    }

    /// Payload of `handle` if it is still live; call [`BusReader::validate`]
    /// after consuming the bytes to rule out a concurrent recycle.
    pub fn view(&self, handle: SlotHandle) -> Result<&[u8], BusError> {
        self.validate(handle)?;
        let r = &self.region;
        let len = r
            .u64_at(r.layout.slot(handle.slot_index) + S_PAYLOAD_LEN)
            .load(Ordering::Acquire) as usize;
        Ok(r.bytes(r.layout.payload(handle.slot_index), len))
    }

    pub fn validate(&self, handle: SlotHandle) -> Result<(), BusError> {
        let r = &self.region;
        if handle.slot_index < r.layout.slot_count
            && r.slot_generation(handle.slot_index) == handle.generation
            && matches!(
                r.slot_state(handle.slot_index),
                SlotState::Published | SlotState::Draining
            )
        {
            Ok(())
        } else {
            Err(BusError::SlotRecycled)
        }
    }

    pub fn meta(&self, handle: SlotHandle) -> Result<FrameMeta, BusError> {
        self.validate(handle)?;
        Ok(self.region.slot_meta(handle.slot_index))
    }
}

#[cfg(target_os = "linux")]
mod futex {
    use std::sync::atomic::AtomicU32;
    use std::time::Duration;

    pub fn wait(word: &AtomicU32, expected: u32, timeout: Duration) {
        let ts = libc::timespec {
            tv_sec: timeout.as_secs().min(i32::MAX as u64) as libc::time_t,
            tv_nsec: timeout.subsec_nanos() as libc::c_long,
        };
        // SAFETY: `word` points into a live shared mapping; the kernel only
        // compares it with `expected` and sleeps. Not FUTEX_PRIVATE: waiters
        // and wakers live in different processes.
        unsafe {
            libc::syscall(
                libc::SYS_futex,
                word.as_ptr(),
                libc::FUTEX_WAIT,
                expected,
                &ts as *const libc::timespec,
            );
        }
    }

    pub fn wake_all(word: &AtomicU32) {
        // SAFETY: as above.
        unsafe {
            libc::syscall(libc::SYS_futex, word.as_ptr(), libc::FUTEX_WAKE, i32::MAX);
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod futex {
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::time::{Duration, Instant};

    pub fn wait(word: &AtomicU32, expected: u32, timeout: Duration) {
        let deadline = Instant::now() + timeout;
        while word.load(Ordering::Acquire) == expected && Instant::now() < deadline {
            std::thread::sleep(Duration::from_micros(100));
        }
    }

    pub fn wake_all(_word: &AtomicU32) {}
}
