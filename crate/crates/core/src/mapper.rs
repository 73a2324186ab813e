//! Lowering of layers to accelerator programs.
//!
//! GEMMs are tiled in DIM-block units. `pick_tiling` grows the K, J and I
//! tile extents one block at a time, in that priority order and round-robin,
//! until neither the scratchpad (A and B tiles, int8) nor the accumulator
//! (C tile, int32) can take another block row or column. Tile loops run
//! I, J, K from outer to inner; C tiles stay in the accumulator across the K
//! loop and are stored once. There is no double buffering: an A or B tile is
//! only skipped when the same tile is already resident.
//!
//! Matrices are row-major in DRAM; `C = A * B` with A `m x k`, B `k x n`.
//! Convolutions use NHWC activations and `[kh, kw, c, k]` weights, so the
//! weight tensor is directly the `kh*kw*c x k` B matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Dataflow, ValidatedConfig};
use crate::func::{Activation, Scale};
use crate::isa::{Block, Im2colParams, Instruction, LoadConfig, LocalAddr, MvinSource, PoolParams, StoreConfig};
use crate::program::{HostOp, HostTask, KernelKind, Program};
use crate::sim::host::HostKernel;
use crate::workload::{ConvShape, PoolShape};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MapError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Im2colSite {
    Host,
    Accel,
    NotApplicable,
}

/// Tile extents in DIM blocks. Loop order is fixed: I, J, K outer to inner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tiling {
    pub tile_i: u32,
    pub tile_j: u32,
    pub tile_k: u32,
    pub im2col_site: Im2colSite,
}

impl Tiling {
    pub fn new(tile_i: u32, tile_j: u32, tile_k: u32) -> Tiling {
        Tiling { tile_i, tile_j, tile_k, im2col_site: Im2colSite::NotApplicable }
    }

    fn sp_rows(&self, dim: u64) -> u64 {
        (self.tile_i as u64 * self.tile_k as u64 + self.tile_k as u64 * self.tile_j as u64) * dim
    }

    fn acc_rows(&self, dim: u64) -> u64 {
        self.tile_i as u64 * self.tile_j as u64 * dim
    }

    /// Whether the tile set fits the local memories of `cfg`.
    pub fn fits(&self, cfg: &ValidatedConfig) -> bool {
        let d = cfg.derived();
        let dim = d.dim as u64;
        self.tile_i >= 1
            && self.tile_j >= 1
            && self.tile_k >= 1
            && self.sp_rows(dim) <= d.sp_rows as u64
            && self.acc_rows(dim) <= d.acc_rows as u64
    }
}

fn blocks(extent: usize, dim: usize) -> u32 {
    extent.div_ceil(dim) as u32
}

/// Greedy runtime tile selection for an `m x k` by `k x n` GEMM.
pub fn pick_tiling(m: usize, n: usize, k: usize, cfg: &ValidatedConfig) -> Result<Tiling, MapError> {
    if m == 0 || n == 0 || k == 0 {
        return Err(MapError::UnsupportedLayer(format!("empty GEMM {m}x{n}x{k}")));
    }
    let dim = cfg.dim();
    let mut t = Tiling::new(1, 1, 1);
    if !t.fits(cfg) {
        return Err(MapError::Infeasible(format!(
            "one DIM block set needs {} scratchpad and {} accumulator rows",
            t.sp_rows(dim as u64),
            t.acc_rows(dim as u64)
        )));
    }
    let max = [blocks(k, dim), blocks(n, dim), blocks(m, dim)];
    loop {
        let mut grew = false;
        for (axis, &limit) in max.iter().enumerate() {
            let mut next = t;
            let field = match axis {
                0 => &mut next.tile_k,
                1 => &mut next.tile_j,
                _ => &mut next.tile_i,
            };
            if *field >= limit {
                continue;
            }
            *field += 1;
            if next.fits(cfg) {
                t = next;
                grew = true;
            }
        }
        if !grew {
            return Ok(t);
        }
    }
}

/// Scaling and activation applied when results leave the accumulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Epilogue {
    pub scale: Scale,
    pub activation: Activation,
}

impl Default for Epilogue {
    fn default() -> Self {
        Epilogue { scale: Scale::ONE, activation: Activation::None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ASource {
    Dram {
        addr: u64,
        lda: u64,
    },
    /// Patch matrix of one image, gathered by the im2col unit.
    Im2col(Im2colParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmAddrs {
    pub a: ASource,
    pub b: u64,
    pub ldb: u64,
    pub c: u64,
    pub ldc: u64,
}

impl GemmAddrs {
    /// Densely packed row-major operands.
    pub fn packed(a: u64, b: u64, c: u64, n: usize, k: usize) -> GemmAddrs {
        GemmAddrs { a: ASource::Dram { addr: a, lda: k as u64 }, b, ldb: n as u64, c, ldc: n as u64 }
    }
}

/// Emits instructions while eliding repeated load configurations.
struct Emitter<'p> {
    prog: &'p mut Program,
    load: Option<LoadConfig>,
}

impl Emitter<'_> {
    fn config_ld(&mut self, cfg: LoadConfig) {
        if self.load != Some(cfg) {
            self.prog.push(Instruction::ConfigLd(cfg));
            self.load = Some(cfg);
        }
    }

    fn push(&mut self, i: Instruction) {
        self.prog.push(i);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Gemm {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub addrs: GemmAddrs,
    pub epilogue: Epilogue,
    pub dataflow: Dataflow,
}

/// Append the instructions of one tiled GEMM to the current layer of `prog`.
pub fn emit_gemm(prog: &mut Program, g: &Gemm, t: &Tiling, cfg: &ValidatedConfig) -> Result<(), MapError> {
    if !t.fits(cfg) {
        return Err(MapError::Infeasible(format!("tiling {t:?} exceeds local memories")));
    }
    if !cfg.dataflows.contains(&g.dataflow) {
        return Err(MapError::UnsupportedLayer(format!("array was generated without {} support", g.dataflow)));
    }
    let dim = cfg.dim();
    let (mb, nb, kb) = (blocks(g.m, dim), blocks(g.n, dim), blocks(g.k, dim));
    let ext = |total: usize, idx: u32| (total - idx as usize * dim).min(dim);
    let (ti, tj, tk) = (t.tile_i, t.tile_j, t.tile_k);
    let b_base = ti * tk * dim as u32;
    let a_blk = |ii: u32, kk: u32, i0: u32, k0: u32| LocalAddr::sp(((ii - i0) * tk + (kk - k0)) * dim as u32);
    let b_blk = |kk: u32, jj: u32, k0: u32, j0: u32| LocalAddr::sp(b_base + ((kk - k0) * tj + (jj - j0)) * dim as u32);
    let c_blk = |ii: u32, jj: u32, i0: u32, j0: u32| LocalAddr::acc(((ii - i0) * tj + (jj - j0)) * dim as u32);

    let mut e = Emitter { prog, load: None };
    e.push(Instruction::ConfigEx { dataflow: g.dataflow });
    e.push(Instruction::ConfigSt(StoreConfig::Strided {
        stride_bytes: g.addrs.ldc,
        activation: g.epilogue.activation,
        scale: g.epilogue.scale,
    }));
    let a_config = match g.addrs.a {
        ASource::Dram { lda, .. } => LoadConfig::Strided { stride_bytes: lda, scale: Scale::ONE },
        ASource::Im2col(q) => LoadConfig::Im2col(q),
    };
    let b_config = LoadConfig::Strided { stride_bytes: g.addrs.ldb, scale: Scale::ONE };
    // Blocks are moved in just before their first use so the load queue
    // streams in consumption order; a tile that is still resident from the
    // previous iteration is not reloaded.
    let mut resident_a = None;
    let mut resident_b = None;
    let mut have_a = vec![false; (ti * tk) as usize];
    let mut have_b = vec![false; (tk * tj) as usize];
    for i0 in (0..mb).step_by(ti as usize) {
        let i1 = (i0 + ti).min(mb);
        for j0 in (0..nb).step_by(tj as usize) {
            let j1 = (j0 + tj).min(nb);
            for k0 in (0..kb).step_by(tk as usize) {
                let k1 = (k0 + tk).min(kb);
                if resident_a != Some((i0, k0)) {
                    have_a.fill(false);
                    resident_a = Some((i0, k0));
                }
                if resident_b != Some((k0, j0)) {
                    have_b.fill(false);
                    resident_b = Some((k0, j0));
                }
                let mut need_a = |e: &mut Emitter, ii: u32, kk: u32| {
                    let slot = &mut have_a[((ii - i0) * tk + (kk - k0)) as usize];
                    if *slot {
                        return;
                    }
                    *slot = true;
                    e.config_ld(a_config);
                    let src = match g.addrs.a {
                        ASource::Dram { addr, lda } => {
                            MvinSource::Dram { vaddr: addr + (ii as u64 * dim as u64) * lda + kk as u64 * dim as u64 }
                        }
                        ASource::Im2col(_) => {
                            MvinSource::Im2col { patch_row: ii * dim as u32, patch_col: kk * dim as u32 }
                        }
                    };
                    let (rows, cols) = (ext(g.m, ii) as u16, ext(g.k, kk) as u16);
                    e.push(Instruction::Mvin { src, dst: a_blk(ii, kk, i0, k0), rows, cols });
                };
                let mut need_b = |e: &mut Emitter, kk: u32, jj: u32| {
                    let slot = &mut have_b[((kk - k0) * tj + (jj - j0)) as usize];
                    if *slot {
                        return;
                    }
                    *slot = true;
                    e.config_ld(b_config);
                    let vaddr = g.addrs.b + (kk as u64 * dim as u64) * g.addrs.ldb + jj as u64 * dim as u64;
                    let (rows, cols) = (ext(g.k, kk) as u16, ext(g.n, jj) as u16);
                    e.push(Instruction::Mvin {
                        src: MvinSource::Dram { vaddr },
                        dst: b_blk(kk, jj, k0, j0),
                        rows,
                        cols,
                    });
                };
                let a_block = |ii: u32, kk: u32| Block::new(a_blk(ii, kk, i0, k0), ext(g.m, ii), ext(g.k, kk));
                let b_block = |kk: u32, jj: u32| Block::new(b_blk(kk, jj, k0, j0), ext(g.k, kk), ext(g.n, jj));
                let c_block = |ii: u32, jj: u32| Block::new(c_blk(ii, jj, i0, j0), ext(g.m, ii), ext(g.n, jj));
                match g.dataflow {
                    Dataflow::WS => {
                        for jj in j0..j1 {
                            for kk in k0..k1 {
                                need_b(&mut e, kk, jj);
                                for ii in i0..i1 {
                                    need_a(&mut e, ii, kk);
                                    let mut out = c_block(ii, jj);
                                    out.addr.accumulate = kk > 0;
                                    let first = ii == i0;
                                    e.push(Instruction::Preload {
                                        data: first.then(|| b_block(kk, jj)),
                                        output: Some(out),
                                    });
                                    let a = a_block(ii, kk);
                                    e.push(if first {
                                        Instruction::ComputePreloaded { a, bd: None }
                                    } else {
                                        Instruction::ComputeAccumulated { a, bd: None }
                                    });
                                }
                            }
                        }
                    }
                    Dataflow::OS => {
                        for ii in i0..i1 {
                            for jj in j0..j1 {
                                e.push(Instruction::Preload { data: None, output: Some(c_block(ii, jj)) });
                                for kk in k0..k1 {
                                    need_a(&mut e, ii, kk);
                                    need_b(&mut e, kk, jj);
                                    let (a, bd) = (a_block(ii, kk), Some(b_block(kk, jj)));
                                    e.push(if kk == 0 {
                                        Instruction::ComputePreloaded { a, bd }
                                    } else {
                                        Instruction::ComputeAccumulated { a, bd }
                                    });
                                }
                            }
                        }
                    }
                }
                if k1 == kb {
                    for ii in i0..i1 {
                        for jj in j0..j1 {
                            let vaddr = g.addrs.c + (ii as u64 * dim as u64) * g.addrs.ldc + jj as u64 * dim as u64;
                            let (rows, cols) = (ext(g.m, ii) as u16, ext(g.n, jj) as u16);
                            e.push(Instruction::Mvout { dram_vaddr: vaddr, src: c_blk(ii, jj, i0, j0), rows, cols });
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// A single-layer program computing one GEMM.
pub fn lower_matmul(name: &str, g: &Gemm, tiling: &Tiling, cfg: &ValidatedConfig) -> Result<Program, MapError> {
    let mut p = Program::new();
    p.begin_layer(name, KernelKind::Matmul, (g.m * g.n * g.k) as u64);
    emit_gemm(&mut p, g, tiling, cfg)?;
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Im2colPolicy {
    /// Use the im2col unit when present, else the host.
    Auto,
    Host,
    Accel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapOptions {
    pub dataflow: Dataflow,
    pub im2col: Im2colPolicy,
    /// Manual `(tile_i, tile_j, tile_k)`; bypasses `pick_tiling`.
    pub tiling: Option<(u32, u32, u32)>,
    /// Pool on the host even when the pool unit exists.
    pub host_pool: bool,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions { dataflow: Dataflow::WS, im2col: Im2colPolicy::Auto, tiling: None, host_pool: false }
    }
}

impl MapOptions {
    fn tiling(&self, m: usize, n: usize, k: usize, cfg: &ValidatedConfig) -> Result<Tiling, MapError> {
        match self.tiling {
            Some((i, j, k)) => {
                let t = Tiling::new(i, j, k);
                if !t.fits(cfg) {
                    return Err(MapError::Infeasible(format!("manual tiling {i}x{j}x{k} exceeds local memories")));
                }
                Ok(t)
            }
            None => pick_tiling(m, n, k, cfg),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAddrs {
    pub input: u64,
    pub weights: u64,
    pub output: u64,
    /// Host im2col destination, at least [`im2col_scratch_bytes`] long.
    pub scratch: Option<u64>,
}

/// Bytes of the host-side patch matrix of a convolution.
pub fn im2col_scratch_bytes(s: &ConvShape) -> u64 {
    let g = s.geom();
    (g.patch_rows().unwrap_or(0) * g.patch_cols()) as u64
}

fn im2col_params(s: &ConvShape, input_vaddr: u64) -> Option<Im2colParams> {
    Some(Im2colParams {
        input_vaddr,
        in_h: s.h.try_into().ok()?,
        in_w: s.w.try_into().ok()?,
        channels: s.c.try_into().ok()?,
        kh: s.kh.try_into().ok()?,
        kw: s.kw.try_into().ok()?,
        stride: s.stride.try_into().ok()?,
        pad: s.pad.try_into().ok()?,
    })
}

/// Where the patch matrix of `s` is built under `opts`.
pub fn im2col_site(s: &ConvShape, cfg: &ValidatedConfig, opts: &MapOptions) -> Im2colSite {
    if s.kh == 1 && s.kw == 1 && s.stride == 1 && s.pad == 0 {
        return Im2colSite::NotApplicable;
    }
    let unit = cfg.has_im2col && im2col_params(s, 0).is_some();
    match opts.im2col {
        Im2colPolicy::Host => Im2colSite::Host,
        Im2colPolicy::Accel | Im2colPolicy::Auto if unit => Im2colSite::Accel,
        _ => Im2colSite::Host,
    }
}

pub fn lower_conv(
    name: &str,
    s: &ConvShape,
    epilogue: Epilogue,
    addrs: &ConvAddrs,
    cfg: &ValidatedConfig,
    opts: &MapOptions,
) -> Result<Program, MapError> {
    let g = s.geom();
    let (oh, ow) = g.out_hw().map_err(|e| MapError::UnsupportedLayer(e.to_string()))?;
    if s.k == 0 {
        return Err(MapError::UnsupportedLayer(format!("conv `{name}` has no output channels")));
    }
    let kdim = g.patch_cols();
    let site = im2col_site(s, cfg, opts);
    if opts.im2col == Im2colPolicy::Accel && site == Im2colSite::Host {
        return Err(MapError::UnsupportedLayer(format!("conv `{name}` cannot use the im2col unit")));
    }
    let mut p = Program::new();
    p.begin_layer(name, KernelKind::Conv, s.macs());
    let gemm = |m, a| Gemm {
        m,
        n: s.k,
        k: kdim,
        addrs: GemmAddrs { a, b: addrs.weights, ldb: s.k as u64, c: 0, ldc: s.k as u64 },
        epilogue,
        dataflow: opts.dataflow,
    };
    match site {
        Im2colSite::NotApplicable => {
            let mut gm = gemm(s.n * s.h * s.w, ASource::Dram { addr: addrs.input, lda: s.c as u64 });
            gm.addrs.c = addrs.output;
            let mut t = opts.tiling(gm.m, gm.n, gm.k, cfg)?;
            t.im2col_site = site;
            emit_gemm(&mut p, &gm, &t, cfg)?;
        }
        Im2colSite::Host => {
            let scratch = addrs
                .scratch
                .ok_or_else(|| MapError::Infeasible(format!("conv `{name}` needs an im2col scratch buffer")))?;
            let rows = s.n * oh * ow;
            p.push_host(HostTask {
                kernel: HostKernel::Im2col,
                shape: vec![rows as u64, kdim as u64],
                op: HostOp::Im2col { src: addrs.input, dst: scratch, geom: g },
            });
            let mut gm = gemm(rows, ASource::Dram { addr: scratch, lda: kdim as u64 });
            gm.addrs.c = addrs.output;
            let mut t = opts.tiling(gm.m, gm.n, gm.k, cfg)?;
            t.im2col_site = site;
            emit_gemm(&mut p, &gm, &t, cfg)?;
        }
        Im2colSite::Accel => {
            let image = (s.h * s.w * s.c) as u64;
            let mut t = opts.tiling(oh * ow, s.k, kdim, cfg)?;
            t.im2col_site = site;
            for n in 0..s.n as u64 {
                let q = im2col_params(s, addrs.input + n * image).expect("checked by im2col_site");
                let mut gm = gemm(oh * ow, ASource::Im2col(q));
                gm.addrs.c = addrs.output + n * (oh * ow * s.k) as u64;
                emit_gemm(&mut p, &gm, &t, cfg)?;
            }
        }
    }
    Ok(p)
}

/// Row slots of the accumulator ring used by streaming kernels.
const RESIDUAL_SLOTS: u32 = 4;

/// `out = act(a + b)` over `elems` int8 values, streamed through the
/// accumulator: mvin a, accumulate-mvin b, mvout.
pub fn lower_residual(
    name: &str,
    elems: usize,
    a: u64,
    b: u64,
    out: u64,
    activation: Activation,
    cfg: &ValidatedConfig,
) -> Result<Program, MapError> {
    let dim = cfg.dim();
    let d = cfg.derived();
    let slots = (d.acc_rows / dim as u32).min(RESIDUAL_SLOTS);
    if slots == 0 {
        return Err(MapError::Infeasible("accumulator holds less than one block".into()));
    }
    let mut p = Program::new();
    p.begin_layer(name, KernelKind::Residual, elems as u64);
    if elems == 0 {
        return Ok(p);
    }
    p.push(Instruction::ConfigLd(LoadConfig::Strided { stride_bytes: dim as u64, scale: Scale::ONE }));
    p.push(Instruction::ConfigSt(StoreConfig::Strided { stride_bytes: dim as u64, activation, scale: Scale::ONE }));
    let full_rows = elems / dim;
    let rem = elems % dim;
    let mut chunks: Vec<(usize, usize, usize)> =
        (0..full_rows).step_by(dim).map(|r| (r, (full_rows - r).min(dim), dim)).collect();
    if rem > 0 {
        chunks.push((full_rows, 1, rem));
    }
    for (i, &(row, rows, cols)) in chunks.iter().enumerate() {
        let slot = LocalAddr::acc((i as u32 % slots) * dim as u32);
        let off = (row * dim) as u64;
        let (rows, cols) = (rows as u16, cols as u16);
        p.push(Instruction::Mvin { src: MvinSource::Dram { vaddr: a + off }, dst: slot, rows, cols });
        p.push(Instruction::Mvin {
            src: MvinSource::Dram { vaddr: b + off },
            dst: slot.with_accumulate(true),
            rows,
            cols,
        });
        p.push(Instruction::Mvout { dram_vaddr: out + off, src: slot, rows, cols });
    }
    Ok(p)
}

/// Max pooling, on the pool unit when available (and not disabled by
/// `opts`), otherwise on the host.
pub fn lower_pool(
    name: &str,
    s: &PoolShape,
    input: u64,
    output: u64,
    cfg: &ValidatedConfig,
    opts: &MapOptions,
) -> Result<Program, MapError> {
    let g = s.geom();
    let (oh, ow) = g.out_hw().map_err(|e| MapError::UnsupportedLayer(e.to_string()))?;
    if s.pad >= s.kh || s.pad >= s.kw {
        return Err(MapError::UnsupportedLayer(format!("pool `{name}` has windows made only of padding")));
    }
    let out_elems = (s.n * oh * ow * s.c) as u64;
    let mut p = Program::new();
    p.begin_layer(name, KernelKind::Pool, out_elems * (s.kh * s.kw) as u64);
    let dim = cfg.dim();
    let band = (s.kh * s.w) as u64;
    let fields_fit = u8::try_from(s.kh).is_ok()
        && u8::try_from(s.kw).is_ok()
        && u8::try_from(s.stride).is_ok()
        && u8::try_from(s.pad).is_ok()
        && u16::try_from(s.h).is_ok()
        && u16::try_from(s.w).is_ok()
        && u16::try_from(oh.max(ow)).is_ok();
    if !cfg.has_pool || opts.host_pool || !fields_fit || 2 * band > cfg.derived().sp_rows as u64 {
        p.push_host(HostTask {
            kernel: HostKernel::MaxPool,
            shape: vec![out_elems, (s.kh * s.kw) as u64],
            op: HostOp::MaxPool { src: input, dst: output, geom: g },
        });
        return Ok(p);
    }
    let c = s.c as u64;
    p.push(Instruction::ConfigLd(LoadConfig::Strided { stride_bytes: c, scale: Scale::ONE }));
    let mut slot = 0u32;
    for n in 0..s.n {
        for cb in (0..s.c).step_by(dim) {
            let cw = (s.c - cb).min(dim) as u16;
            for oy in 0..oh {
                let top = (oy * s.stride) as isize - s.pad as isize;
                let iy_lo = top.max(0) as usize;
                let iy_hi = ((top + s.kh as isize).max(0) as usize).min(s.h);
                let base = slot * band as u32;
                slot ^= 1;
                for iy in iy_lo..iy_hi {
                    for x0 in (0..s.w).step_by(dim) {
                        let vaddr = input + (((n * s.h + iy) * s.w + x0) * s.c + cb) as u64;
                        let dst = LocalAddr::sp(base + ((iy - iy_lo) * s.w + x0) as u32);
                        let rows = (s.w - x0).min(dim) as u16;
                        p.push(Instruction::Mvin { src: MvinSource::Dram { vaddr }, dst, rows, cols: cw });
                    }
                }
                for ox0 in (0..ow).step_by(dim) {
                    p.push(Instruction::ConfigSt(StoreConfig::Pool(PoolParams {
                        stride_bytes: c,
                        window_h: s.kh as u8,
                        window_w: s.kw as u8,
                        stride: s.stride as u8,
                        pad: s.pad as u8,
                        in_h: s.h as u16,
                        in_w: s.w as u16,
                        band_row0: iy_lo as u16,
                        out_row: oy as u16,
                        out_col0: ox0 as u16,
                    })));
                    let dram_vaddr = output + (((n * oh + oy) * ow + ox0) * s.c + cb) as u64;
                    let rows = (ow - ox0).min(dim) as u16;
                    p.push(Instruction::Mvout { dram_vaddr, src: LocalAddr::sp(base), rows, cols: cw });
                }
            }
        }
    }
    Ok(p)
}
