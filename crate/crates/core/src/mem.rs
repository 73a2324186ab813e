//! Shared memory system timing: set-associative LRU L2, fixed-latency DRAM
//! with a bandwidth term, and the accelerator DMA cost model.
//!
//! DMA cost of one transfer, in cycles:
//!
//! ```text
//!   sum over segments (translation latencies + ceil(bytes / bus))
//! + l2_hit                       if any line was accessed
//! + dram_latency                 if any line missed (loads only)
//! + ceil(misses * line / dram_bytes_per_cycle)
//! ```
//!
//! A segment is one DRAM row of a strided transfer (or one contiguous run of
//! an im2col gather). Each segment issues a translation for its first byte and
//! another at every page crossing. Line accesses are coalesced when
//! consecutive accesses touch the same line.

use serde::{Deserialize, Serialize};

use crate::config::ArchConfig;
use crate::isa::LocalAddr;
use crate::mmu::{AccessKind, Level, MmuError, PageTable, TlbState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub bytes: u64,
    pub ways: u32,
    pub line_bytes: u32,
    pub hit_cycles: u32,
    pub dram_latency_cycles: u32,
}

impl From<&ArchConfig> for CacheConfig {
    fn from(c: &ArchConfig) -> Self {
        CacheConfig {
            bytes: c.l2_bytes,
            ways: c.l2_ways,
            line_bytes: c.l2_line_bytes,
            hit_cycles: c.l2_hit_cycles,
            dram_latency_cycles: c.dram_latency_cycles,
        }
    }
}

impl CacheConfig {
    pub fn sets(&self) -> u64 {
        self.bytes / (self.ways as u64 * self.line_bytes as u64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreCacheStats {
    pub accesses: u64,
    pub misses: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub accesses: u64,
    pub misses: u64,
    pub evictions: u64,
    pub cross_core_evictions: u64,
    pub writebacks: u64,
    pub per_core: Vec<CoreCacheStats>,
}

#[derive(Clone, Copy, Debug)]
struct Line {
    tag: u64,
    stamp: u64,
    owner: u32,
    dirty: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheAccess {
    pub hit: bool,
    pub latency: u32,
    /// A dirty line was evicted and must be written back.
    pub writeback: bool,
}

/// Physically indexed, write-allocate, write-back cache with true LRU.
#[derive(Clone, Debug)]
pub struct CacheState {
    cfg: CacheConfig,
    sets: Vec<Vec<Line>>,
    clock: u64,
    stats: CacheStats,
}

impl CacheState {
    pub fn new(cfg: CacheConfig) -> CacheState {
        CacheState { cfg, sets: vec![Vec::new(); cfg.sets() as usize], clock: 0, stats: CacheStats::default() }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    /// Whether the line holding `paddr` is resident; no state change.
    pub fn probe(&self, paddr: u64) -> bool {
        let line = paddr / self.cfg.line_bytes as u64;
        let set = (line % self.sets.len() as u64) as usize;
        self.sets[set].iter().any(|l| l.tag == line)
    }

    pub fn access(&mut self, paddr: u64, kind: AccessKind, core: u32) -> CacheAccess {
        self.clock += 1;
        let stamp = self.clock;
        let line = paddr / self.cfg.line_bytes as u64;
        let set_idx = (line % self.sets.len() as u64) as usize;
        let write = kind == AccessKind::Write;

        if self.stats.per_core.len() <= core as usize {
            self.stats.per_core.resize(core as usize + 1, CoreCacheStats::default());
        }
        self.stats.accesses += 1;
        self.stats.per_core[core as usize].accesses += 1;

        let set = &mut self.sets[set_idx];
        if let Some(l) = set.iter_mut().find(|l| l.tag == line) {
            l.stamp = stamp;
            l.dirty |= write;
            return CacheAccess { hit: true, latency: self.cfg.hit_cycles, writeback: false };
        }

        self.stats.misses += 1;
        self.stats.per_core[core as usize].misses += 1;
        let fresh = Line { tag: line, stamp, owner: core, dirty: write };
        let mut writeback = false;
        if set.len() < self.cfg.ways as usize {
            set.push(fresh);
        } else {
            let victim = set.iter_mut().min_by_key(|l| l.stamp).expect("full set");
            self.stats.evictions += 1;
            if victim.owner != core {
                self.stats.cross_core_evictions += 1;
            }
            if victim.dirty {
                self.stats.writebacks += 1;
                writeback = true;
            }
            *victim = fresh;
        }
        CacheAccess { hit: false, latency: self.cfg.hit_cycles + self.cfg.dram_latency_cycles, writeback }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// DRAM to local memory.
    In,
    /// Local memory to DRAM.
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmaRequest {
    pub direction: Direction,
    pub dram_vaddr: u64,
    pub local: LocalAddr,
    pub rows: u32,
    /// Bytes per row.
    pub cols: u32,
    pub stride_bytes: u64,
    pub accumulate: bool,
}

impl DmaRequest {
    pub fn segments(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        (0..self.rows as u64).map(|r| (self.dram_vaddr + r * self.stride_bytes, self.cols as u64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmaTiming {
    pub bus_bytes: u32,
    pub l2_hit_cycles: u32,
    pub dram_latency_cycles: u32,
    pub dram_bytes_per_cycle: u32,
    pub line_bytes: u32,
    pub page_bytes: u64,
}

impl From<&ArchConfig> for DmaTiming {
    fn from(c: &ArchConfig) -> Self {
        DmaTiming {
            bus_bytes: c.dma_bus_bytes,
            l2_hit_cycles: c.l2_hit_cycles,
            dram_latency_cycles: c.dram_latency_cycles,
            dram_bytes_per_cycle: c.dram_bytes_per_cycle,
            line_bytes: c.l2_line_bytes,
            page_bytes: c.page_bytes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    TlbFilter,
    TlbPrivate,
    TlbShared,
    TlbWalk,
    L2Hit,
    L2Miss,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::TlbFilter => "tlb_filter",
            EventKind::TlbPrivate => "tlb_private",
            EventKind::TlbShared => "tlb_shared",
            EventKind::TlbWalk => "tlb_walk",
            EventKind::L2Hit => "l2_hit",
            EventKind::L2Miss => "l2_miss",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemEvent {
    pub cycle: u64,
    pub core: u32,
    pub kind: EventKind,
    pub addr: u64,
}

pub fn format_events(events: &[MemEvent]) -> String {
    let mut s = String::from("cycle,unit,event,addr\n");
    for e in events {
        let unit = match e.kind {
            EventKind::L2Hit | EventKind::L2Miss => format!("l2.core{}", e.core),
            _ => format!("tlb.core{}", e.core),
        };
        s.push_str(&format!("{},{unit},{},{:#x}\n", e.cycle, e.kind.name(), e.addr));
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmaCost {
    pub cycles: u64,
    pub translations: u64,
    pub translation_cycles: u64,
    pub transfer_cycles: u64,
    pub l2_accesses: u64,
    pub l2_misses: u64,
    /// Bytes moved to or from DRAM (miss fills plus dirty writebacks).
    pub dram_bytes: u64,
    pub events: Vec<MemEvent>,
}

/// Mutable memory-side state a DMA transfer runs against.
pub struct DmaContext<'a> {
    pub tlb: &'a mut TlbState,
    pub l2: &'a mut CacheState,
    pub page_table: &'a PageTable,
    pub core: u32,
    /// Cycle stamped on recorded events; `None` disables event capture.
    pub trace_cycle: Option<u64>,
}

fn tlb_event(level: Level) -> EventKind {
    match level {
        Level::Filter => EventKind::TlbFilter,
        Level::Private => EventKind::TlbPrivate,
        Level::Shared => EventKind::TlbShared,
        Level::Walk => EventKind::TlbWalk,
    }
}

/// Cost of transferring the given `(vaddr, bytes)` segments in order.
pub fn dma_cost_segments(
    direction: Direction,
    segments: impl IntoIterator<Item = (u64, u64)>,
    timing: &DmaTiming,
    ctx: &mut DmaContext<'_>,
) -> Result<DmaCost, MmuError> {
    let kind = match direction {
        Direction::In => AccessKind::Read,
        Direction::Out => AccessKind::Write,
    };
    let line = timing.line_bytes as u64;
    let page = timing.page_bytes;
    let mut cost = DmaCost::default();
    let mut last_line = None;
    let mut writebacks = 0u64;
    let mut elapsed = 0u64;
    for (vaddr, len) in segments {
        if len == 0 {
            continue;
        }
        let end = vaddr + len;
        let mut at = vaddr;
        while at < end {
            let page_end = (at / page + 1) * page;
            let chunk_end = end.min(page_end);
            let tr = ctx.tlb.translate(at, kind, ctx.page_table)?;
            cost.translations += 1;
            cost.translation_cycles += tr.latency as u64;
            elapsed += tr.latency as u64;
            if let Some(c) = ctx.trace_cycle {
                cost.events.push(MemEvent { cycle: c + elapsed, core: ctx.core, kind: tlb_event(tr.level), addr: at });
            }
            let pbase = tr.paddr;
            let mut l = pbase / line;
            let l_end = (pbase + (chunk_end - at) - 1) / line;
            while l <= l_end {
                if last_line != Some(l) {
                    let acc = ctx.l2.access(l * line, kind, ctx.core);
                    cost.l2_accesses += 1;
                    if !acc.hit {
                        cost.l2_misses += 1;
                    }
                    if acc.writeback {
                        writebacks += 1;
                    }
                    if let Some(c) = ctx.trace_cycle {
                        let k = if acc.hit { EventKind::L2Hit } else { EventKind::L2Miss };
                        cost.events.push(MemEvent { cycle: c + elapsed, core: ctx.core, kind: k, addr: l * line });
                    }
                    last_line = Some(l);
                }
                l += 1;
            }
            at = chunk_end;
        }
        let transfer = len.div_ceil(timing.bus_bytes as u64);
        cost.transfer_cycles += transfer;
        elapsed += transfer;
    }
    cost.dram_bytes = (cost.l2_misses + writebacks) * line;
    let mut cycles = cost.translation_cycles + cost.transfer_cycles;
    if cost.l2_accesses > 0 {
        cycles += timing.l2_hit_cycles as u64;
    }
    if cost.l2_misses > 0 && direction == Direction::In {
        cycles += timing.dram_latency_cycles as u64;
    }
    cycles += (cost.l2_misses * line).div_ceil(timing.dram_bytes_per_cycle as u64);
    cost.cycles = cycles;
    Ok(cost)
}

pub fn dma_cost(req: &DmaRequest, timing: &DmaTiming, ctx: &mut DmaContext<'_>) -> Result<DmaCost, MmuError> {
    dma_cost_segments(req.direction, req.segments(), timing, ctx)
}
