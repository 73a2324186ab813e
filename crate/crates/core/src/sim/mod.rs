//! Cycle-level engine. Runs one [`Program`] per core against shared L2 and
//! DRAM state and a private TLB per accelerator.
//!
//! Timing model:
//! - each core has three in-order issue queues (load, execute, store); an
//!   instruction starts once its queue is free and all of its dependency-graph
//!   predecessors have completed;
//! - across all cores, the ready instruction with the earliest start time is
//!   issued next, ties going round-robin over cores and then load, execute,
//!   store; shared L2 state is therefore touched in time order;
//! - layers run back to back per core: host work for a layer (e.g. software
//!   im2col) runs first, then the accelerator part, then the next layer;
//! - compute occupies `(stream + pipe_stages) * mac_chain_len + 1` cycles,
//!   where `stream` is the A rows (WS) or the reduction depth (OS); cycles are
//!   counted at the fully pipelined clock, so a combinational MAC chain of
//!   length L stretches each array step by L;
//! - a preload occupies `rows * mac_chain_len + 1` cycles (1 without data);
//!   config and flush instructions take 1 cycle;
//! - DMA cost follows [`crate::mem`]; a DMA touching a scratchpad bank that
//!   an already-issued array operation is using at the same time stalls for
//!   the overlapping cycles, bounded by its rows in the shared banks.
//!
//! Functional execution happens at issue time, which is a topological order
//! of each layer's dependency graph, so results equal program-order results.
//! Every layer begins from the reset configuration (default strides, WS,
//! no preload).

pub mod host;

mod dram;

use std::collections::{BTreeMap, VecDeque};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dram::DramImage;

use crate::config::{Dataflow, ValidatedConfig};
use crate::func::{self, saturate_i8, scale_act, Scale};
use crate::isa::{
    self, Block, DepGraph, Im2colParams, Instruction, IsaError, LoadConfig, LocalAddr, LocalDims, MvinSource,
    PoolParams, Space, StoreConfig, Unit,
};
use crate::mem::{self, CacheConfig, CacheState, CacheStats, Direction, DmaContext, DmaTiming, MemEvent};
use crate::mmu::{AccessKind, MmuError, PageTable, TlbConfig, TlbState, TlbStats};
use crate::program::{HostOp, KernelKind, Program};
use host::{HostError, HostModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fixed issue overhead added to every compute and preload.
pub const ISSUE_OVERHEAD: u64 = 1;

pub const REPORT_NOTE: &str = "cycle counts come from a first-order model; compare orderings and ratios between runs, \
not absolute values against silicon";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("core {core}: deadlock with {pending} instructions pending")]
    DeadlockDetected { core: usize, pending: usize },
    #[error("core {core}: {source}")]
    AddressOutOfRange { core: usize, source: IsaError },
    #[error("core {core}: page fault at {vaddr:#x}")]
    PageFault { core: usize, vaddr: u64 },
    #[error("core {core}: invalid program: {msg}")]
    InvalidProgram { core: usize, msg: String },
    #[error(transparent)]
    Host(#[from] HostError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Execute instruction semantics; off for timing-only sweeps.
    pub functional: bool,
    /// Capture TLB/L2 events for the CSV trace.
    pub trace: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { functional: true, trace: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: Option<KernelKind>,
    pub start: u64,
    pub end: u64,
    pub cycles: u64,
    pub host_cycles: u64,
    pub instructions: u64,
    pub macs: u64,
    pub dram_bytes: u64,
    pub l2_accesses: u64,
    pub l2_misses: u64,
    pub translations: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub load: f64,
    pub execute: f64,
    pub store: f64,
    /// Fraction of cycles the array spends in compute instructions.
    pub array: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoreReport {
    pub core: usize,
    pub total_cycles: u64,
    pub host_cycles: u64,
    pub instructions: u64,
    pub bank_conflict_stalls: u64,
    pub utilization: Utilization,
    pub tlb: TlbStats,
    pub layers: Vec<LayerReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub note: String,
    pub total_cycles: u64,
    pub macs: u64,
    pub dram_bytes: u64,
    /// Layer cycles summed over cores, by kernel type.
    pub breakdown: BTreeMap<KernelKind, u64>,
    pub l2: CacheStats,
    pub cores: Vec<CoreReport>,
}

impl SimReport {
    pub fn kind_cycles(&self, kind: KernelKind) -> u64 {
        self.breakdown.get(&kind).copied().unwrap_or(0)
    }

    /// Merged TLB statistics of all cores.
    pub fn tlb(&self) -> TlbStats {
        let mut t = TlbStats::default();
        for c in &self.cores {
            t.merge(&c.tlb);
        }
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Functional contents of one accelerator's local memories and array.
struct FuncData {
    dim: usize,
    sp: Vec<i8>,
    acc: Vec<i32>,
    /// Latched WS weights, `k x n`.
    weights: Array2<i8>,
    /// Latched OS bias; `None` means zero.
    bias: Option<Array2<i32>>,
}

/// Architectural registers; tracked in every mode because timing depends on
/// them.
struct Regs {
    load: LoadConfig,
    store: StoreConfig,
    dataflow: Dataflow,
    target: Option<Block>,
}

impl Regs {
    fn reset(dim: usize) -> Regs {
        let s = isa::ScanState::new(dim as u32);
        Regs { load: s.load, store: s.store, dataflow: s.dataflow, target: None }
    }
}

fn unit_slot(u: Unit) -> usize {
    match u {
        Unit::Load => 0,
        Unit::Execute => 1,
        Unit::Store => 2,
    }
}

const PENDING: u64 = u64::MAX;

struct CoreRun<'p> {
    id: usize,
    program: &'p Program,
    graphs: Vec<DepGraph>,
    /// Index of the current layer; `layers.len()` once finished.
    layer: usize,
    started: bool,
    layer_start: u64,
    accel_start: u64,
    layer_finish: u64,
    queues: [VecDeque<usize>; 3],
    done: Vec<u64>,
    unit_free: [u64; 3],
    busy: [u64; 3],
    array_busy: u64,
    array_intervals: Vec<(u64, u64, u64)>,
    bank_stalls: u64,
    host_total: u64,
    tlb: TlbState,
    regs: Regs,
    data: Option<FuncData>,
    cur: LayerReport,
    layers: Vec<LayerReport>,
    end: u64,
}

pub struct Simulator {
    cfg: ValidatedConfig,
    page_table: PageTable,
    options: SimOptions,
    host: HostModel,
    dram: DramImage,
    events: Vec<MemEvent>,
}

impl Simulator {
    pub fn new(cfg: ValidatedConfig, page_table: PageTable) -> Simulator {
        let host = HostModel::new(cfg.host_kind);
        Simulator { cfg, page_table, options: SimOptions::default(), host, dram: DramImage::new(), events: Vec::new() }
    }

    pub fn with_options(mut self, options: SimOptions) -> Simulator {
        self.options = options;
        self
    }

    pub fn with_host(mut self, host: HostModel) -> Simulator {
        self.host = host;
        self
    }

    pub fn with_dram(mut self, dram: DramImage) -> Simulator {
        self.dram = dram;
        self
    }

    pub fn config(&self) -> &ValidatedConfig {
        &self.cfg
    }

    pub fn dram(&self) -> &DramImage {
        &self.dram
    }

    pub fn dram_mut(&mut self) -> &mut DramImage {
        &mut self.dram
    }

    pub fn into_dram(self) -> DramImage {
        self.dram
    }

    /// Memory events captured by the last run (only with `trace` enabled).
    pub fn events(&self) -> &[MemEvent] {
        &self.events
    }

    /// Run one program per core from a cold TLB/L2 state. DRAM contents
    /// persist across runs.
    pub fn run(&mut self, programs: &[Program]) -> Result<SimReport, SimError> {
        if programs.len() > self.cfg.num_cores as usize {
            return Err(SimError::InvalidProgram {
                core: self.cfg.num_cores as usize,
                msg: format!("{} programs for {} cores", programs.len(), self.cfg.num_cores),
            });
        }
        let dims = LocalDims::from(self.cfg.derived());
        let dim = self.cfg.dim();
        let mut cores = Vec::with_capacity(programs.len());
        for (id, p) in programs.iter().enumerate() {
            p.check_layers().map_err(|msg| SimError::InvalidProgram { core: id, msg })?;
            let mut graphs = Vec::with_capacity(p.layers.len());
            for l in &p.layers {
                let g = isa::dep_graph(&p.instrs[l.range.clone()], &dims).map_err(|e| {
                    let e = match e {
                        IsaError::AddressOutOfRange { index, space, rows, limit } => {
                            IsaError::AddressOutOfRange { index: index + l.range.start, space, rows, limit }
                        }
                        IsaError::InvalidOperand { index, msg } => {
                            IsaError::InvalidOperand { index: index + l.range.start, msg }
                        }
                    };
                    match e {
                        IsaError::AddressOutOfRange { .. } => SimError::AddressOutOfRange { core: id, source: e },
                        IsaError::InvalidOperand { .. } => SimError::InvalidProgram { core: id, msg: e.to_string() },
                    }
                })?;
                graphs.push(g);
            }
            let data = self.options.functional.then(|| FuncData {
                dim,
                sp: vec![0; dims.sp_rows as usize * dim],
                acc: vec![0; dims.acc_rows as usize * dim],
                weights: Array2::zeros((0, 0)),
                bias: None,
            });
            cores.push(CoreRun {
                id,
                program: p,
                graphs,
                layer: 0,
                started: false,
                layer_start: 0,
                accel_start: 0,
                layer_finish: 0,
                queues: Default::default(),
                done: Vec::new(),
                unit_free: [0; 3],
                busy: [0; 3],
                array_busy: 0,
                array_intervals: Vec::new(),
                bank_stalls: 0,
                host_total: 0,
                tlb: TlbState::new(TlbConfig::from(self.cfg.config())),
                regs: Regs::reset(dim),
                data,
                cur: LayerReport::default(),
                layers: Vec::new(),
                end: 0,
            });
        }

        let mut l2 = CacheState::new(CacheConfig::from(self.cfg.config()));
        let timing = DmaTiming::from(self.cfg.config());
        self.events.clear();
        let mut rr = 0usize;
        let n = cores.len();
        loop {
            for c in cores.iter_mut() {
                self.advance(c, &mut l2)?;
            }
            let mut best: Option<(u64, usize, usize, usize)> = None;
            for k in 0..n {
                let ci = (rr + k) % n;
                for u in 0..3 {
                    if let Some(ready) = cores[ci].head_ready(u) {
                        let key = (ready, k, u, ci);
                        if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                            best = Some(key);
                        }
                    }
                }
            }
            let Some((ready, _, u, ci)) = best else {
                if let Some(c) = cores.iter().find(|c| c.layer < c.program.layers.len()) {
                    let pending = c.queues.iter().map(|q| q.len()).sum();
                    return Err(SimError::DeadlockDetected { core: c.id, pending });
                }
                break;
            };
            self.issue(&mut cores[ci], u, ready, &mut l2, &timing)?;
            rr = (ci + 1) % n.max(1);
        }

        let mut report = SimReport {
            schema_version: REPORT_SCHEMA_VERSION,
            note: REPORT_NOTE.to_string(),
            l2: l2.stats().clone(),
            ..Default::default()
        };
        for mut c in cores {
            let total = c.end;
            let frac = |x: u64| if total == 0 { 0.0 } else { x as f64 / total as f64 };
            for l in &c.layers {
                if let Some(k) = l.kind {
                    *report.breakdown.entry(k).or_default() += l.cycles;
                }
                report.macs += l.macs;
                report.dram_bytes += l.dram_bytes;
            }
            report.total_cycles = report.total_cycles.max(total);
            report.cores.push(CoreReport {
                core: c.id,
                total_cycles: total,
                host_cycles: c.host_total,
                instructions: c.program.instrs.len() as u64,
                bank_conflict_stalls: c.bank_stalls,
                utilization: Utilization {
                    load: frac(c.busy[0]),
                    execute: frac(c.busy[1]),
                    store: frac(c.busy[2]),
                    array: frac(c.array_busy),
                },
                tlb: c.tlb.take_stats(),
                layers: std::mem::take(&mut c.layers),
            });
        }
        Ok(report)
    }

    /// Close finished layers and open the next one, running its host phase.
    fn advance(&mut self, c: &mut CoreRun<'_>, l2: &mut CacheState) -> Result<(), SimError> {
        loop {
            let layers = &c.program.layers;
            if c.layer >= layers.len() {
                return Ok(());
            }
            if !c.started {
                let mark = &layers[c.layer];
                let mut host_cycles = 0;
                for t in &mark.host {
                    host_cycles += host::host_cost(t.kernel, &t.shape, &self.host)?;
                    self.host_effect(&t.op, c.id as u32, l2);
                }
                c.host_total += host_cycles;
                c.accel_start = c.layer_start + host_cycles;
                c.layer_finish = c.accel_start;
                c.started = true;
                c.regs = Regs::reset(self.cfg.dim());
                c.done = vec![PENDING; mark.range.len()];
                for i in mark.range.clone() {
                    c.queues[unit_slot(c.program.instrs[i].unit())].push_back(i);
                }
                c.cur = LayerReport {
                    name: mark.name.clone(),
                    kind: Some(mark.kind),
                    start: c.layer_start,
                    host_cycles,
                    instructions: mark.range.len() as u64,
                    macs: mark.macs,
                    ..Default::default()
                };
            }
            if c.queues.iter().any(|q| !q.is_empty()) {
                return Ok(());
            }
            let end = c.layer_finish;
            let mut rep = std::mem::take(&mut c.cur);
            rep.end = end;
            rep.cycles = end - rep.start;
            c.layers.push(rep);
            c.end = end;
            c.layer_start = end;
            c.unit_free = [end; 3];
            c.array_intervals.clear();
            c.layer += 1;
            c.started = false;
        }
    }

    fn host_effect(&mut self, op: &HostOp, core: u32, l2: &mut CacheState) {
        let line = self.cfg.l2_line_bytes as u64;
        let touch = |lo: u64, len: u64, kind: AccessKind, l2: &mut CacheState| {
            if len == 0 {
                return;
            }
            for l in lo / line..=(lo + len - 1) / line {
                l2.access(l * line, kind, core);
            }
        };
        match op {
            HostOp::None => {}
            HostOp::Im2col { src, dst, geom } => {
                let in_len = (geom.n * geom.h * geom.w * geom.c) as u64;
                let rows = geom.patch_rows().unwrap_or(0);
                let out_len = (rows * geom.patch_cols()) as u64;
                touch(*src, in_len, AccessKind::Read, l2);
                touch(*dst, out_len, AccessKind::Write, l2);
                if self.options.functional {
                    let input = self.dram.read_i8(*src, in_len as usize);
                    let x = ndarray::ArrayView4::from_shape((geom.n, geom.h, geom.w, geom.c), &input)
                        .expect("geometry matches length");
                    if let Ok(m) = func::im2col(x, geom.kh, geom.kw, geom.stride, geom.pad) {
                        let flat: Vec<i8> = m.iter().copied().collect();
                        self.dram.write_i8(*dst, &flat);
                    }
                }
            }
            HostOp::MaxPool { src, dst, geom } => {
                let in_len = (geom.n * geom.h * geom.w * geom.c) as u64;
                touch(*src, in_len, AccessKind::Read, l2);
                if let Ok((oh, ow)) = geom.out_hw() {
                    touch(*dst, (geom.n * oh * ow * geom.c) as u64, AccessKind::Write, l2);
                }
                if self.options.functional {
                    let input = self.dram.read_i8(*src, in_len as usize);
                    let x = ndarray::ArrayView4::from_shape((geom.n, geom.h, geom.w, geom.c), &input)
                        .expect("geometry matches length");
                    if let Ok(p) = func::maxpool(x, geom.kh, geom.kw, geom.stride, geom.pad) {
                        let flat: Vec<i8> = p.iter().copied().collect();
                        self.dram.write_i8(*dst, &flat);
                    }
                }
            }
        }
    }

    fn issue(
        &mut self,
        c: &mut CoreRun<'_>,
        u: usize,
        start: u64,
        l2: &mut CacheState,
        timing: &DmaTiming,
    ) -> Result<(), SimError> {
        let idx = c.queues[u].pop_front().expect("issued from a non-empty queue");
        let instr = c.program.instrs[idx];
        let d = self.cfg.derived();
        let chain = d.mac_chain_len as u64;
        let trace_cycle = self.options.trace.then_some(start);
        let core = c.id;
        let page_fault = |e: MmuError| match e {
            MmuError::PageFault { vaddr } => SimError::PageFault { core, vaddr },
            other => SimError::InvalidProgram { core, msg: other.to_string() },
        };

        let mut dma = None;
        let mut sp_rows: Option<(u32, u32)> = None;
        let duration = match instr {
            Instruction::ConfigEx { dataflow } => {
                c.regs.dataflow = dataflow;
                1
            }
            Instruction::ConfigLd(cfg) => {
                c.regs.load = cfg;
                1
            }
            Instruction::ConfigSt(cfg) => {
                c.regs.store = cfg;
                1
            }
            Instruction::Flush => {
                c.tlb.flush();
                1
            }
            Instruction::Mvin { src, dst, rows, cols } => {
                let segments = match (src, c.regs.load) {
                    (MvinSource::Dram { vaddr }, LoadConfig::Strided { stride_bytes, .. }) => {
                        (0..rows as u64).map(|r| (vaddr + r * stride_bytes, cols as u64)).collect()
                    }
                    (MvinSource::Im2col { patch_row, patch_col }, LoadConfig::Im2col(q)) => {
                        im2col_segments(&q, patch_row, patch_col, rows, cols)
                    }
                    _ => unreachable!("validated by the dependency pass"),
                };
                let mut ctx =
                    DmaContext { tlb: &mut c.tlb, l2, page_table: &self.page_table, core: core as u32, trace_cycle };
                let cost = mem::dma_cost_segments(Direction::In, segments, timing, &mut ctx).map_err(page_fault)?;
                if dst.space == Space::Scratchpad {
                    sp_rows = Some((dst.row, dst.row + rows as u32));
                }
                if let Some(data) = c.data.as_mut() {
                    data.mvin(&c.regs, &self.dram, src, dst, rows as usize, cols as usize);
                }
                let cycles = cost.cycles;
                dma = Some(cost);
                cycles
            }
            Instruction::Mvout { dram_vaddr, src, rows, cols } => {
                let (stride, extra) = match c.regs.store {
                    StoreConfig::Strided { stride_bytes, .. } => (stride_bytes, 0),
                    StoreConfig::Pool(q) => (q.stride_bytes, rows as u64 * q.window_h as u64 * q.window_w as u64),
                };
                let segments = (0..rows as u64).map(|r| (dram_vaddr + r * stride, cols as u64));
                let mut ctx =
                    DmaContext { tlb: &mut c.tlb, l2, page_table: &self.page_table, core: core as u32, trace_cycle };
                let cost = mem::dma_cost_segments(Direction::Out, segments, timing, &mut ctx).map_err(page_fault)?;
                if src.space == Space::Scratchpad {
                    sp_rows = Some(match c.regs.store {
                        StoreConfig::Pool(q) => {
                            let (lo, hi) = isa::pool_band(&q, rows).unwrap_or((0, 0));
                            (src.row + lo, src.row + hi)
                        }
                        _ => (src.row, src.row + rows as u32),
                    });
                }
                if let Some(data) = c.data.as_mut() {
                    data.mvout(
                        &c.regs,
                        &mut self.dram,
                        dram_vaddr,
                        src,
                        rows as usize,
                        cols as usize,
                        self.cfg.relu6_shift,
                    );
                }
                let cycles = cost.cycles + extra;
                dma = Some(cost);
                cycles
            }
            Instruction::Preload { data, output } => {
                c.regs.target = output;
                if let Some(fd) = c.data.as_mut() {
                    fd.preload(c.regs.dataflow, data);
                }
                match data {
                    Some(b) => b.rows as u64 * chain + ISSUE_OVERHEAD,
                    None => ISSUE_OVERHEAD,
                }
            }
            Instruction::ComputePreloaded { a, bd } | Instruction::ComputeAccumulated { a, bd } => {
                let accumulated = matches!(instr, Instruction::ComputeAccumulated { .. });
                let stream = match c.regs.dataflow {
                    Dataflow::WS => a.rows as u64,
                    Dataflow::OS => a.cols as u64,
                };
                if let Some(fd) = c.data.as_mut() {
                    fd.compute(&c.regs, a, bd, accumulated);
                }
                (stream + d.pipe_stages as u64) * chain + ISSUE_OVERHEAD
            }
        };

        let mut duration = duration;
        if let Some((lo, hi)) = sp_rows.filter(|(lo, hi)| hi > lo) {
            let bank_rows = d.sp_bank_rows.max(1);
            let mask = bank_mask(lo, hi, bank_rows);
            let end = start + duration;
            let mut stall = 0;
            c.array_intervals.retain(|&(_, e, _)| e > start);
            for &(s, e, m) in &c.array_intervals {
                if m & mask != 0 && s < end && start < e {
                    let overlap = e.min(end) - s.max(start);
                    let shared_rows = (lo..hi).filter(|r| m >> ((r / bank_rows) % 64) & 1 == 1).count() as u64;
                    stall += overlap.min(shared_rows);
                }
            }
            c.bank_stalls += stall;
            duration += stall;
        }
        if instr.is_compute() || matches!(instr, Instruction::Preload { .. }) {
            let bank_rows = d.sp_bank_rows.max(1);
            let mut mask = 0;
            let blocks: Vec<Block> = match instr {
                Instruction::ComputePreloaded { a, bd } | Instruction::ComputeAccumulated { a, bd } => {
                    std::iter::once(a).chain(bd).chain(c.regs.target).collect()
                }
                Instruction::Preload { data, .. } => data.into_iter().collect(),
                _ => Vec::new(),
            };
            for b in blocks.iter().filter(|b| b.addr.space == Space::Scratchpad) {
                mask |= bank_mask(b.addr.row, b.addr.row + b.rows as u32, bank_rows);
            }
            if mask != 0 {
                c.array_intervals.push((start, start + duration, mask));
            }
        }
        if instr.is_compute() {
            c.array_busy += duration;
        }

        let finish = start + duration;
        let local = idx - c.program.layers[c.layer].range.start;
        c.done[local] = finish;
        c.unit_free[u] = finish;
        c.busy[u] += duration;
        c.layer_finish = c.layer_finish.max(finish);
        if let Some(cost) = dma {
            c.cur.dram_bytes += cost.dram_bytes;
            c.cur.l2_accesses += cost.l2_accesses;
            c.cur.l2_misses += cost.l2_misses;
            c.cur.translations += cost.translations;
            if self.options.trace {
                self.events.extend(cost.events);
            }
        }
        Ok(())
    }
}

fn bank_mask(lo: u32, hi: u32, bank_rows: u32) -> u64 {
    let mut m = 0u64;
    let mut b = lo / bank_rows;
    while b * bank_rows < hi {
        m |= 1 << (b % 64);
        b += 1;
    }
    m
}

impl CoreRun<'_> {
    /// Earliest start of the head of queue `u`, if all its predecessors have
    /// been issued.
    fn head_ready(&self, u: usize) -> Option<u64> {
        if self.layer >= self.program.layers.len() || !self.started {
            return None;
        }
        let &idx = self.queues[u].front()?;
        let base = self.program.layers[self.layer].range.start;
        let mut ready = self.unit_free[u].max(self.accel_start);
        for e in self.graphs[self.layer].preds(idx - base) {
            let t = self.done[e.from as usize];
            if t == PENDING {
                return None;
            }
            ready = ready.max(t);
        }
        Some(ready)
    }
}

/// DRAM runs gathered by an im2col mvin, one per contiguous channel span.
pub fn im2col_segments(q: &Im2colParams, patch_row: u32, patch_col: u32, rows: u16, cols: u16) -> Vec<(u64, u64)> {
    let g = q.geom();
    let mut out = Vec::new();
    for r in patch_row as usize..patch_row as usize + rows as usize {
        let mut col = patch_col as usize;
        let end = patch_col as usize + cols as usize;
        while col < end {
            let ch = col % g.c;
            let run = (g.c - ch).min(end - col);
            if let Some((_, iy, ix, c0)) = g.source(r, col) {
                out.push((q.input_vaddr + ((iy * g.w + ix) * g.c + c0) as u64, run as u64));
            }
            col += run;
        }
    }
    out
}

impl FuncData {
    fn sp_row(&self, row: u32) -> &[i8] {
        let s = row as usize * self.dim;
        &self.sp[s..s + self.dim]
    }

    fn acc_row(&self, row: u32) -> &[i32] {
        let s = row as usize * self.dim;
        &self.acc[s..s + self.dim]
    }

    fn read_i8_block(&self, b: &Block) -> Array2<i8> {
        debug_assert_eq!(b.addr.space, Space::Scratchpad);
        Array2::from_shape_fn((b.rows as usize, b.cols as usize), |(r, c)| self.sp_row(b.addr.row + r as u32)[c])
    }

    fn read_i32_block(&self, b: &Block) -> Array2<i32> {
        Array2::from_shape_fn((b.rows as usize, b.cols as usize), |(r, c)| match b.addr.space {
            Space::Scratchpad => self.sp_row(b.addr.row + r as u32)[c] as i32,
            Space::Accumulator => self.acc_row(b.addr.row + r as u32)[c],
        })
    }

    fn write_row_i32(&mut self, addr: LocalAddr, r: usize, values: impl Iterator<Item = i32>, accumulate: bool) {
        let base = (addr.row as usize + r) * self.dim;
        match addr.space {
            Space::Accumulator => {
                for (slot, v) in self.acc[base..].iter_mut().zip(values) {
                    *slot = if accumulate { slot.wrapping_add(v) } else { v };
                }
            }
            Space::Scratchpad => {
                for (slot, v) in self.sp[base..].iter_mut().zip(values) {
                    let v = if accumulate { *slot as i64 + v as i64 } else { v as i64 };
                    *slot = saturate_i8(v);
                }
            }
        }
    }

    fn mvin(&mut self, regs: &Regs, dram: &DramImage, src: MvinSource, dst: LocalAddr, rows: usize, cols: usize) {
        let accumulate = dst.accumulate && dst.space == Space::Accumulator;
        let mut buf = vec![0u8; cols];
        for r in 0..rows {
            let values: Vec<i8> = match (src, regs.load) {
                (MvinSource::Dram { vaddr }, LoadConfig::Strided { stride_bytes, .. }) => {
                    dram.read_into(vaddr + r as u64 * stride_bytes, &mut buf);
                    buf.iter().map(|&b| b as i8).collect()
                }
                (MvinSource::Im2col { patch_row, patch_col }, LoadConfig::Im2col(q)) => {
                    let g = q.geom();
                    (0..cols)
                        .map(|c| match g.source(patch_row as usize + r, patch_col as usize + c) {
                            Some((_, iy, ix, ch)) => {
                                let mut b = [0u8];
                                dram.read_into(q.input_vaddr + ((iy * g.w + ix) * g.c + ch) as u64, &mut b);
                                b[0] as i8
                            }
                            None => 0,
                        })
                        .collect()
                }
                _ => unreachable!("validated by the dependency pass"),
            };
            match dst.space {
                Space::Scratchpad => {
                    let base = (dst.row as usize + r) * self.dim;
                    self.sp[base..base + cols].copy_from_slice(&values);
                }
                Space::Accumulator => {
                    let scale = match regs.load {
                        LoadConfig::Strided { scale, .. } => scale,
                        LoadConfig::Im2col(_) => Scale::ONE,
                    };
                    let scaled =
                        values.iter().map(|&v| scale.apply(v as i32).clamp(i32::MIN as i64, i32::MAX as i64) as i32);
                    self.write_row_i32(dst, r, scaled, accumulate);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn mvout(
        &mut self,
        regs: &Regs,
        dram: &mut DramImage,
        vaddr: u64,
        src: LocalAddr,
        rows: usize,
        cols: usize,
        relu6_shift: u32,
    ) {
        match regs.store {
            StoreConfig::Strided { stride_bytes, activation, scale } => {
                for r in 0..rows {
                    let out: Vec<i8> = match src.space {
                        Space::Scratchpad => self.sp_row(src.row + r as u32)[..cols].to_vec(),
                        Space::Accumulator => self.acc_row(src.row + r as u32)[..cols]
                            .iter()
                            .map(|&x| scale_act(x, scale, activation, relu6_shift))
                            .collect(),
                    };
                    dram.write_i8(vaddr + r as u64 * stride_bytes, &out);
                }
            }
            StoreConfig::Pool(q) => {
                for i in 0..rows {
                    let ox = q.out_col0 as usize + i;
                    let out: Vec<i8> = (0..cols).map(|ch| self.pool_pixel(&q, src, ox, ch)).collect();
                    dram.write_i8(vaddr + i as u64 * q.stride_bytes, &out);
                }
            }
        }
    }

    fn pool_pixel(&self, q: &PoolParams, src: LocalAddr, ox: usize, ch: usize) -> i8 {
        let mut best = i8::MIN;
        for ky in 0..q.window_h as usize {
            for kx in 0..q.window_w as usize {
                if let Some((iy, ix)) = q.source(ox, ky, kx) {
                    if let Some(off) = q.band_offset(iy, ix) {
                        best = best.max(self.sp_row(src.row + off)[ch]);
                    }
                }
            }
        }
        best
    }

    fn preload(&mut self, dataflow: Dataflow, data: Option<Block>) {
        match (dataflow, data) {
            (Dataflow::WS, Some(b)) => self.weights = self.read_i8_block(&b),
            (Dataflow::WS, None) => {}
            (Dataflow::OS, Some(b)) => self.bias = Some(self.read_i32_block(&b)),
            (Dataflow::OS, None) => self.bias = None,
        }
    }

    fn compute(&mut self, regs: &Regs, a: Block, bd: Option<Block>, accumulated: bool) {
        let av = self.read_i8_block(&a);
        let (m, _) = av.dim();
        let (result, force_acc) = match regs.dataflow {
            Dataflow::WS => {
                let n = self.weights.ncols();
                let d = bd.map_or_else(|| Array2::zeros((m, n)), |b| self.read_i32_block(&b));
                (func::ws_tile(av.view(), self.weights.view(), d.view()).expect("shapes validated"), false)
            }
            Dataflow::OS => {
                let b = self.read_i8_block(&bd.expect("validated"));
                let n = b.ncols();
                let c = match (&self.bias, accumulated) {
                    (Some(bias), false) => bias.clone(),
                    _ => Array2::zeros((m, n)),
                };
                (func::os_tile(av.view(), b.view(), c.view()).expect("shapes validated"), accumulated)
            }
        };
        if let Some(t) = regs.target {
            let accumulate = (t.addr.accumulate && t.addr.space == Space::Accumulator) || force_acc;
            for (r, row) in result.rows().into_iter().enumerate() {
                self.write_row_i32(t.addr, r, row.iter().copied(), accumulate);
            }
        }
    }
}

/// Convenience: run a single program on a fresh simulator preloaded with
/// `dram`, returning the report and final memory image.
pub fn run_single(
    cfg: &ValidatedConfig,
    program: &Program,
    dram: DramImage,
    options: SimOptions,
) -> Result<(SimReport, DramImage), SimError> {
    let mut sim = Simulator::new(cfg.clone(), PageTable::Identity).with_options(options).with_dram(dram);
    let report = sim.run(std::slice::from_ref(program))?;
    Ok((report, sim.into_dram()))
}
