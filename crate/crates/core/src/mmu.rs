//! Accelerator address translation: per-kind filter registers, a private
//! fully-associative TLB, an optional shared set-associative TLB and a single
//! fixed-latency page-table walker.
//!
//! Latency of a lookup is the sum of the structures probed:
//! filter hit 0, private hit `Ph`, shared hit `Ph + Ps`, walk
//! `Ph + Ps + ptw` (`Ps` only when a shared TLB exists).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ArchConfig;

/// Lookups per point of the windowed miss-rate series.
pub const MISS_WINDOW: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MmuError {
    #[error("page fault at vaddr {vaddr:#x}")]
    PageFault { vaddr: u64 },
    #[error("no lookups recorded")]
    EmptyStats,
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Filter,
    Private,
    Shared,
    Walk,
}

/// Virtual-to-physical page mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PageTable {
    /// Every page maps to itself.
    Identity,
    /// Identity mapping restricted to the listed half-open vaddr ranges.
    IdentityRanges(Vec<(u64, u64)>),
    /// Explicit vpn -> ppn map.
    Explicit(HashMap<u64, u64>),
}

impl PageTable {
    pub fn lookup(&self, vpn: u64, page_bytes: u64) -> Option<u64> {
        match self {
            PageTable::Identity => Some(vpn),
            PageTable::IdentityRanges(ranges) => {
                let lo = vpn * page_bytes;
                let hi = lo + page_bytes;
                ranges.iter().any(|&(a, b)| a < hi && lo < b).then_some(vpn)
            }
            PageTable::Explicit(map) => map.get(&vpn).copied(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbConfig {
    pub private_entries: u32,
    pub shared_entries: u32,
    pub shared_ways: u32,
    pub private_hit_cycles: u32,
    pub shared_hit_cycles: u32,
    pub ptw_latency_cycles: u32,
    pub filter_regs: bool,
    pub page_bytes: u64,
}

impl From<&ArchConfig> for TlbConfig {
    fn from(c: &ArchConfig) -> Self {
        TlbConfig {
            private_entries: c.tlb_private_entries,
            shared_entries: c.tlb_shared_entries,
            shared_ways: c.tlb_shared_ways,
            private_hit_cycles: c.tlb_private_hit_cycles,
            shared_hit_cycles: c.tlb_shared_hit_cycles,
            ptw_latency_cycles: c.ptw_latency_cycles,
            filter_regs: c.has_filter_regs,
            page_bytes: c.page_bytes,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindStats {
    pub lookups: u64,
    pub filter_hits: u64,
    pub private_hits: u64,
    pub shared_hits: u64,
    pub walks: u64,
    pub consecutive_same_page: u64,
}

impl KindStats {
    fn record(&mut self, level: Level) {
        self.lookups += 1;
        match level {
            Level::Filter => self.filter_hits += 1,
            Level::Private => self.private_hits += 1,
            Level::Shared => self.shared_hits += 1,
            Level::Walk => self.walks += 1,
        }
    }

    fn accounting_holds(&self) -> bool {
        self.lookups == self.filter_hits + self.private_hits + self.shared_hits + self.walks
    }

    pub fn merge(&mut self, o: &KindStats) {
        self.lookups += o.lookups;
        self.filter_hits += o.filter_hits;
        self.private_hits += o.private_hits;
        self.shared_hits += o.shared_hits;
        self.walks += o.walks;
        self.consecutive_same_page += o.consecutive_same_page;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TlbStats {
    pub read: KindStats,
    pub write: KindStats,
    /// Private-level miss rate per completed window of [`MISS_WINDOW`] lookups.
    pub window_miss_rates: Vec<f64>,
    window_lookups: u64,
    window_misses: u64,
}

impl TlbStats {
    pub fn kind(&self, k: AccessKind) -> &KindStats {
        match k {
            AccessKind::Read => &self.read,
            AccessKind::Write => &self.write,
        }
    }

    pub fn total(&self) -> KindStats {
        let mut t = self.read;
        t.merge(&self.write);
        t
    }

    pub fn lookups(&self) -> u64 {
        self.read.lookups + self.write.lookups
    }

    pub fn walks(&self) -> u64 {
        self.read.walks + self.write.walks
    }

    /// Windowed private-level miss rates, including a trailing partial window.
    pub fn miss_rate_series(&self) -> Result<Vec<f64>, MmuError> {
        if self.lookups() == 0 {
            return Err(MmuError::EmptyStats);
        }
        let mut s = self.window_miss_rates.clone();
        if self.window_lookups > 0 {
            s.push(self.window_misses as f64 / self.window_lookups as f64);
        }
        Ok(s)
    }

    pub fn locality_report(&self) -> Result<LocalityReport, MmuError> {
        let total = self.total();
        if total.lookups == 0 {
            return Err(MmuError::EmptyStats);
        }
        let frac = |k: &KindStats| {
            if k.lookups == 0 {
                0.0
            } else {
                k.consecutive_same_page as f64 / k.lookups as f64
            }
        };
        Ok(LocalityReport {
            pct_consec_read: frac(&self.read),
            pct_consec_write: frac(&self.write),
            private_hit_rate: (total.filter_hits + total.private_hits) as f64 / total.lookups as f64,
        })
    }

    pub fn merge(&mut self, o: &TlbStats) {
        self.read.merge(&o.read);
        self.write.merge(&o.write);
        self.window_miss_rates.extend_from_slice(&o.window_miss_rates);
    }
}

/// Fractions over all lookups of the given kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub pct_consec_read: f64,
    pub pct_consec_write: f64,
    /// Lookups served without leaving the private level (filter or private TLB).
    pub private_hit_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub paddr: u64,
    pub latency: u32,
    pub level: Level,
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    vpn: u64,
    ppn: u64,
    stamp: u64,
}

#[derive(Clone, Debug)]
pub struct TlbState {
    cfg: TlbConfig,
    private: Vec<Entry>,
    shared: Vec<Vec<Entry>>,
    filter: [Option<(u64, u64)>; 2],
    last_vpn: [Option<u64>; 2],
    clock: u64,
    stats: TlbStats,
}

fn slot(kind: AccessKind) -> usize {
    match kind {
        AccessKind::Read => 0,
        AccessKind::Write => 1,
    }
}

/// Insert into an LRU entry set, returning the evicted vpn if any.
fn lru_fill(set: &mut Vec<Entry>, cap: usize, e: Entry) -> Option<u64> {
    if cap == 0 {
        return None;
    }
    if set.len() < cap {
        set.push(e);
        return None;
    }
    let (victim, _) = set.iter().enumerate().min_by_key(|(_, x)| x.stamp).expect("non-empty set");
    let old = set[victim].vpn;
    set[victim] = e;
    Some(old)
}

impl TlbState {
    pub fn new(cfg: TlbConfig) -> TlbState {
        let sets = if cfg.shared_entries == 0 { 0 } else { (cfg.shared_entries / cfg.shared_ways.max(1)) as usize };
        TlbState {
            cfg,
            private: Vec::with_capacity(cfg.private_entries as usize),
            shared: vec![Vec::new(); sets],
            filter: [None, None],
            last_vpn: [None, None],
            clock: 0,
            stats: TlbStats::default(),
        }
    }

    pub fn config(&self) -> &TlbConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &TlbStats {
        &self.stats
    }

    pub fn take_stats(&mut self) -> TlbStats {
        std::mem::take(&mut self.stats)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Drop all cached translations; statistics are kept.
    pub fn flush(&mut self) {
        self.private.clear();
        for s in &mut self.shared {
            s.clear();
        }
        self.filter = [None, None];
    }

    fn fill_private(&mut self, vpn: u64, ppn: u64) {
        let stamp = self.tick();
        if let Some(old) = lru_fill(&mut self.private, self.cfg.private_entries as usize, Entry { vpn, ppn, stamp }) {
            for f in &mut self.filter {
                if matches!(f, Some((v, _)) if *v == old) {
                    *f = None;
                }
            }
        }
    }

    fn touch_private(&mut self, vpn: u64) -> Option<u64> {
        let stamp = self.tick();
        let e = self.private.iter_mut().find(|e| e.vpn == vpn)?;
        e.stamp = stamp;
        Some(e.ppn)
    }

    fn shared_lookup(&mut self, vpn: u64) -> Option<u64> {
        if self.shared.is_empty() {
            return None;
        }
        let stamp = self.tick();
        let idx = (vpn % self.shared.len() as u64) as usize;
        let e = self.shared[idx].iter_mut().find(|e| e.vpn == vpn)?;
        e.stamp = stamp;
        Some(e.ppn)
    }

    fn fill_shared(&mut self, vpn: u64, ppn: u64) {
        if self.shared.is_empty() {
            return;
        }
        let stamp = self.tick();
        let idx = (vpn % self.shared.len() as u64) as usize;
        lru_fill(&mut self.shared[idx], self.cfg.shared_ways as usize, Entry { vpn, ppn, stamp });
    }

    pub fn translate(&mut self, vaddr: u64, kind: AccessKind, pt: &PageTable) -> Result<Translation, MmuError> {
        let page = self.cfg.page_bytes;
        let vpn = vaddr / page;
        let offset = vaddr % page;
        let k = slot(kind);
        let ph = self.cfg.private_hit_cycles;
        let ps = if self.shared.is_empty() { 0 } else { self.cfg.shared_hit_cycles };

        let filtered = match self.filter[k] {
            Some((v, ppn)) if self.cfg.filter_regs && v == vpn => {
                // Keep the private LRU order identical to an unfiltered run.
                self.touch_private(vpn);
                Some(ppn)
            }
            _ => None,
        };
        let (ppn, level, latency) = if let Some(ppn) = filtered {
            (ppn, Level::Filter, 0)
        } else if let Some(ppn) = self.touch_private(vpn) {
            (ppn, Level::Private, ph)
        } else if let Some(ppn) = self.shared_lookup(vpn) {
            self.fill_private(vpn, ppn);
            (ppn, Level::Shared, ph + ps)
        } else {
            let ppn = pt.lookup(vpn, page).ok_or(MmuError::PageFault { vaddr })?;
            self.fill_shared(vpn, ppn);
            self.fill_private(vpn, ppn);
            (ppn, Level::Walk, ph + ps + self.cfg.ptw_latency_cycles)
        };
        if self.cfg.filter_regs && self.cfg.private_entries > 0 {
            self.filter[k] = Some((vpn, ppn));
        }

        let stats = match kind {
            AccessKind::Read => &mut self.stats.read,
            AccessKind::Write => &mut self.stats.write,
        };
        stats.record(level);
        if self.last_vpn[k] == Some(vpn) {
            stats.consecutive_same_page += 1;
        }
        self.last_vpn[k] = Some(vpn);
        debug_assert!(stats.accounting_holds());

        self.stats.window_lookups += 1;
        if matches!(level, Level::Shared | Level::Walk) {
            self.stats.window_misses += 1;
        }
        if self.stats.window_lookups == MISS_WINDOW {
            let rate = self.stats.window_misses as f64 / MISS_WINDOW as f64;
            self.stats.window_miss_rates.push(rate);
            self.stats.window_lookups = 0;
            self.stats.window_misses = 0;
        }

        Ok(Translation { paddr: ppn * page + offset, latency, level })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub cycle: u64,
    pub kind: AccessKind,
    pub vaddr: u64,
}

fn parse_addr(s: &str) -> Option<u64> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

/// Parse a `cycle,kind,vaddr` CSV trace; kind is `R`/`W` (or `read`/`write`).
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, MmuError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| MmuError::Trace { line, msg: e.to_string() })?;
        let bad = |msg: &str| MmuError::Trace { line, msg: msg.to_string() };
        if rec.len() != 3 {
            return Err(bad("expected cycle,kind,vaddr"));
        }
        let kind = match &rec[1] {
            "R" | "r" | "read" => AccessKind::Read,
            "W" | "w" | "write" => AccessKind::Write,
            _ => return Err(bad("kind must be R or W")),
        };
        out.push(TraceRecord {
            cycle: rec[0].parse().map_err(|_| bad("bad cycle"))?,
            kind,
            vaddr: parse_addr(&rec[2]).ok_or_else(|| bad("bad vaddr"))?,
        });
    }
    Ok(out)
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut s = String::from("cycle,kind,vaddr\n");
    for r in records {
        let k = match r.kind {
            AccessKind::Read => "R",
            AccessKind::Write => "W",
        };
        s.push_str(&format!("{},{k},{:#x}\n", r.cycle, r.vaddr));
    }
    s
}

/// Run a trace through a fresh TLB and return its statistics.
pub fn replay_trace(records: &[TraceRecord], cfg: TlbConfig, pt: &PageTable) -> Result<TlbStats, MmuError> {
    let mut tlb = TlbState::new(cfg);
    for r in records {
        tlb.translate(r.vaddr, r.kind, pt)?;
    }
    Ok(tlb.take_stats())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(private: u32, shared: u32, filter: bool) -> TlbConfig {
        TlbConfig {
            private_entries: private,
            shared_entries: shared,
            shared_ways: 4,
            private_hit_cycles: 2,
            shared_hit_cycles: 8,
            ptw_latency_cycles: 40,
            filter_regs: filter,
            page_bytes: 4096,
        }
    }

    #[test]
    fn cold_lookup_walks() {
        let mut t = TlbState::new(cfg(4, 0, false));
        let tr = t.translate(0x5123, AccessKind::Read, &PageTable::Identity).unwrap();
        assert_eq!(tr.level, Level::Walk);
        assert_eq!(tr.latency, 2 + 40);
        assert_eq!(tr.paddr, 0x5123);
        let mut t = TlbState::new(cfg(4, 128, false));
        assert_eq!(t.translate(0, AccessKind::Read, &PageTable::Identity).unwrap().latency, 2 + 8 + 40);
    }

    #[test]
    fn filter_hit_is_free() {
        let mut t = TlbState::new(cfg(4, 0, true));
        t.translate(0x1000, AccessKind::Read, &PageTable::Identity).unwrap();
        let tr = t.translate(0x1008, AccessKind::Read, &PageTable::Identity).unwrap();
        assert_eq!((tr.level, tr.latency), (Level::Filter, 0));
        let mut t = TlbState::new(cfg(4, 0, false));
        t.translate(0x1000, AccessKind::Read, &PageTable::Identity).unwrap();
        let tr = t.translate(0x1008, AccessKind::Read, &PageTable::Identity).unwrap();
        assert_eq!((tr.level, tr.latency), (Level::Private, 2));
    }

    #[test]
    fn interleaved_kinds_keep_their_filters() {
        let mut t = TlbState::new(cfg(4, 0, true));
        let pt = PageTable::Identity;
        let mut levels = Vec::new();
        for i in 0..6u64 {
            levels.push(t.translate(0xA000 + i, AccessKind::Read, &pt).unwrap().level);
            levels.push(t.translate(0xB000 + i, AccessKind::Write, &pt).unwrap().level);
        }
        assert_eq!(&levels[..2], &[Level::Walk, Level::Walk]);
        assert!(levels[2..].iter().all(|&l| l == Level::Filter));
    }

    #[test]
    fn shared_level_and_refill() {
        let mut t = TlbState::new(cfg(1, 16, false));
        let pt = PageTable::Identity;
        t.translate(0x1000, AccessKind::Read, &pt).unwrap();
        t.translate(0x2000, AccessKind::Read, &pt).unwrap();
        let tr = t.translate(0x1000, AccessKind::Read, &pt).unwrap();
        assert_eq!((tr.level, tr.latency), (Level::Shared, 10));
        assert_eq!(t.translate(0x1000, AccessKind::Read, &pt).unwrap().level, Level::Private);
    }

    #[test]
    fn page_fault_outside_ranges() {
        let pt = PageTable::IdentityRanges(vec![(0x10000, 0x20000)]);
        let mut t = TlbState::new(cfg(4, 0, false));
        assert!(t.translate(0x10004, AccessKind::Read, &pt).is_ok());
        assert_eq!(t.translate(0x30000, AccessKind::Write, &pt), Err(MmuError::PageFault { vaddr: 0x30000 }));
    }

    #[test]
    fn explicit_mapping_relocates() {
        let pt = PageTable::Explicit(HashMap::from([(1, 7)]));
        let mut t = TlbState::new(cfg(4, 0, false));
        assert_eq!(t.translate(0x1010, AccessKind::Read, &pt).unwrap().paddr, 0x7010);
    }

    #[test]
    fn series_and_locality() {
        let mut t = TlbState::new(cfg(4, 0, false));
        assert_eq!(t.stats().miss_rate_series(), Err(MmuError::EmptyStats));
        t.translate(0, AccessKind::Read, &PageTable::Identity).unwrap();
        assert_eq!(t.stats().miss_rate_series().unwrap(), vec![1.0]);
        for i in 1..10 {
            t.translate(i * 8, AccessKind::Read, &PageTable::Identity).unwrap();
        }
        let r = t.stats().locality_report().unwrap();
        assert!((r.pct_consec_read - 0.9).abs() < 1e-12);
        assert_eq!(r.pct_consec_write, 0.0);
    }

    #[test]
    fn full_windows_recorded() {
        let mut t = TlbState::new(cfg(4, 0, false));
        for i in 0..2500u64 {
            t.translate((i % 8) * 4096, AccessKind::Read, &PageTable::Identity).unwrap();
        }
        let s = t.stats().miss_rate_series().unwrap();
        assert_eq!(s.len(), 3);
        // 8 pages cycling through 4 entries: every lookup misses under LRU.
        assert_eq!(s[0], 1.0);
    }

    #[test]
    fn trace_csv_roundtrip() {
        let recs = vec![
            TraceRecord { cycle: 0, kind: AccessKind::Read, vaddr: 0x1000 },
            TraceRecord { cycle: 5, kind: AccessKind::Write, vaddr: 0x2008 },
        ];
        assert_eq!(parse_trace(&format_trace(&recs)).unwrap(), recs);
        assert!(matches!(parse_trace("cycle,kind,vaddr\n1,X,0\n"), Err(MmuError::Trace { line: 2, .. })));
        let stats = replay_trace(&recs, cfg(4, 0, true), &PageTable::Identity).unwrap();
        assert_eq!(stats.walks(), 2);
    }
}
