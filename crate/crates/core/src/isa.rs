//! Accelerator command stream: instruction set, 128-bit encoding, text
//! assembly and explicit dependency analysis.
//!
//! Instructions move at most one DIM x DIM block. Load-side state (stride,
//! scale, im2col geometry) and store-side state (stride, activation, scale,
//! pooling geometry) are set by `ConfigLd` / `ConfigSt` and persist until the
//! next config of the same kind.
//!
//! Execute semantics (see [`crate::sim`] for the reference interpreter):
//!
//! | dataflow | `Preload{data, output}`     | `ComputePreloaded{a, bd}` | `ComputeAccumulated{a, bd}` |
//! |----------|-----------------------------|---------------------------|-----------------------------|
//! | WS       | latch weights `data`, target `output` | `output <- a*W + bd` | same, weights reused |
//! | OS       | latch bias `data`, target `output`    | `output <- data + a*bd` | `output += a*bd` |
//!
//! Writes to an accumulator target with `accumulate` set add to the row
//! instead of overwriting it.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Dataflow, DerivedParams};
use crate::func::{Activation, Scale, WindowGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Space {
    Scratchpad,
    Accumulator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocalAddr {
    pub space: Space,
    pub row: u32,
    pub accumulate: bool,
}

impl LocalAddr {
    pub fn sp(row: u32) -> LocalAddr {
        LocalAddr { space: Space::Scratchpad, row, accumulate: false }
    }

    pub fn acc(row: u32) -> LocalAddr {
        LocalAddr { space: Space::Accumulator, row, accumulate: false }
    }

    pub fn acc_add(row: u32) -> LocalAddr {
        LocalAddr { space: Space::Accumulator, row, accumulate: true }
    }

    pub fn with_accumulate(self, accumulate: bool) -> LocalAddr {
        LocalAddr { accumulate, ..self }
    }

    pub fn offset(self, rows: u32) -> LocalAddr {
        LocalAddr { row: self.row + rows, ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub addr: LocalAddr,
    pub rows: u16,
    pub cols: u16,
}

impl Block {
    pub fn new(addr: LocalAddr, rows: usize, cols: usize) -> Block {
        Block { addr, rows: rows as u16, cols: cols as u16 }
    }

    pub fn row_range(&self) -> Range<u32> {
        self.addr.row..self.addr.row + self.rows as u32
    }
}

/// On-the-fly im2col geometry for a single NHWC image in DRAM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Im2colParams {
    pub input_vaddr: u64,
    pub in_h: u16,
    pub in_w: u16,
    pub channels: u16,
    pub kh: u8,
    pub kw: u8,
    pub stride: u8,
    pub pad: u8,
}

impl Im2colParams {
    pub fn geom(&self) -> WindowGeom {
        WindowGeom {
            n: 1,
            h: self.in_h as usize,
            w: self.in_w as usize,
            c: self.channels as usize,
            kh: self.kh as usize,
            kw: self.kw as usize,
            stride: self.stride as usize,
            pad: self.pad as usize,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoadConfig {
    Strided { stride_bytes: u64, scale: Scale },
    Im2col(Im2colParams),
}

/// Max-pooling applied on the store path. The scratchpad source holds input
/// rows `band_row0..` of one channel block, one pixel per row, `in_w` pixels
/// per input row. An `Mvout` then emits `rows` output pixels of output row
/// `out_row`, starting at output column `out_col0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolParams {
    pub stride_bytes: u64,
    pub window_h: u8,
    pub window_w: u8,
    pub stride: u8,
    pub pad: u8,
    pub in_h: u16,
    pub in_w: u16,
    pub band_row0: u16,
    pub out_row: u16,
    pub out_col0: u16,
}

impl PoolParams {
    /// Input pixel `(iy, ix)` covered by window position `(ky, kx)` of output
    /// column `ox`, or `None` when it falls in the padding.
    pub fn source(&self, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (self.out_row as usize * self.stride as usize + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride as usize + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy as usize >= self.in_h as usize || ix as usize >= self.in_w as usize {
            return None;
        }
        Some((iy as usize, ix as usize))
    }

    /// Scratchpad row offset (from the source base) holding pixel `(iy, ix)`.
    pub fn band_offset(&self, iy: usize, ix: usize) -> Option<u32> {
        let rel = iy.checked_sub(self.band_row0 as usize)?;
        Some((rel * self.in_w as usize + ix) as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StoreConfig {
    Strided { stride_bytes: u64, activation: Activation, scale: Scale },
    Pool(PoolParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MvinSource {
    Dram {
        vaddr: u64,
    },
    /// Patch-matrix coordinates produced by the im2col unit.
    Im2col {
        patch_row: u32,
        patch_col: u32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    ConfigEx { dataflow: Dataflow },
    ConfigLd(LoadConfig),
    ConfigSt(StoreConfig),
    Mvin { src: MvinSource, dst: LocalAddr, rows: u16, cols: u16 },
    Mvout { dram_vaddr: u64, src: LocalAddr, rows: u16, cols: u16 },
    Preload { data: Option<Block>, output: Option<Block> },
    ComputePreloaded { a: Block, bd: Option<Block> },
    ComputeAccumulated { a: Block, bd: Option<Block> },
    Flush,
}

/// Issue queue an instruction belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Unit {
    Load,
    Execute,
    Store,
}

impl Instruction {
    pub fn opcode(&self) -> u8 {
        match self {
            Instruction::ConfigEx { .. } => 0,
            Instruction::ConfigLd(_) => 1,
            Instruction::ConfigSt(_) => 2,
            Instruction::Mvin { .. } => 3,
            Instruction::Mvout { .. } => 4,
            Instruction::Preload { .. } => 5,
            Instruction::ComputePreloaded { .. } => 6,
            Instruction::ComputeAccumulated { .. } => 7,
            Instruction::Flush => 8,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instruction::ConfigEx { .. } => "config_ex",
            Instruction::ConfigLd(_) => "config_ld",
            Instruction::ConfigSt(_) => "config_st",
            Instruction::Mvin { .. } => "mvin",
            Instruction::Mvout { .. } => "mvout",
            Instruction::Preload { .. } => "preload",
            Instruction::ComputePreloaded { .. } => "compute_preloaded",
            Instruction::ComputeAccumulated { .. } => "compute_accumulated",
            Instruction::Flush => "flush",
        }
    }

    pub fn unit(&self) -> Unit {
        match self {
            Instruction::ConfigLd(_) | Instruction::Mvin { .. } | Instruction::Flush => Unit::Load,
            Instruction::ConfigSt(_) | Instruction::Mvout { .. } => Unit::Store,
            Instruction::ConfigEx { .. }
            | Instruction::Preload { .. }
            | Instruction::ComputePreloaded { .. }
            | Instruction::ComputeAccumulated { .. } => Unit::Execute,
        }
    }

    pub fn is_compute(&self) -> bool {
        matches!(self, Instruction::ComputePreloaded { .. } | Instruction::ComputeAccumulated { .. })
    }
}

// ---------------------------------------------------------------------------
// Binary encoding

const ROW_BITS: u32 = 24;
const EXTENT_BITS: u32 = 9;
const ADDR_BITS: u32 = 3 + ROW_BITS;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("{field} = {value} does not fit in {bits} bits")]
    FieldOverflow { field: &'static str, value: u64, bits: u32 },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unknown opcode {0}")]
    UnknownOpcode(u8),
    #[error("reserved bits set in {opcode} word: {word:#034x}")]
    ReservedBits { opcode: &'static str, word: u128 },
    #[error("invalid {field} field: {value}")]
    BadField { field: &'static str, value: u64 },
}

struct Packer {
    word: u128,
    used: u128,
}

impl Packer {
    fn new(opcode: u8) -> Packer {
        Packer { word: opcode as u128, used: 0xF }
    }

    fn put(&mut self, lo: u32, bits: u32, value: u64, field: &'static str) -> Result<(), EncodeError> {
        if bits < 64 && value >> bits != 0 {
            return Err(EncodeError::FieldOverflow { field, value, bits });
        }
        let mask = if bits == 128 { u128::MAX } else { ((1u128 << bits) - 1) << lo };
        self.word |= (value as u128) << lo;
        self.used |= mask;
        Ok(())
    }

    fn put_addr(&mut self, lo: u32, addr: Option<LocalAddr>) -> Result<(), EncodeError> {
        match addr {
            None => self.put(lo, ADDR_BITS, 0, "addr"),
            Some(a) => {
                let bits = 1 | ((a.space == Space::Accumulator) as u64) << 1 | (a.accumulate as u64) << 2;
                self.put(lo, 3, bits, "addr flags")?;
                self.put(lo + 3, ROW_BITS, a.row as u64, "row")
            }
        }
    }

    fn put_block(&mut self, lo: u32, block: Option<Block>) -> Result<(), EncodeError> {
        self.put_addr(lo, block.map(|b| b.addr))?;
        let (r, c) = block.map_or((0, 0), |b| (b.rows as u64, b.cols as u64));
        self.put(lo + ADDR_BITS, EXTENT_BITS, r, "rows")?;
        self.put(lo + ADDR_BITS + EXTENT_BITS, EXTENT_BITS, c, "cols")
    }
}

fn field(word: u128, lo: u32, bits: u32) -> u64 {
    ((word >> lo) & ((1u128 << bits) - 1)) as u64
}

fn get_addr(word: u128, lo: u32) -> Result<Option<LocalAddr>, DecodeError> {
    let flags = field(word, lo, 3);
    let row = field(word, lo + 3, ROW_BITS) as u32;
    if flags & 1 == 0 {
        if flags != 0 || row != 0 {
            return Err(DecodeError::BadField { field: "absent addr", value: flags | (row as u64) << 3 });
        }
        return Ok(None);
    }
    let space = if flags & 2 != 0 { Space::Accumulator } else { Space::Scratchpad };
    Ok(Some(LocalAddr { space, row, accumulate: flags & 4 != 0 }))
}

fn get_block(word: u128, lo: u32) -> Result<Option<Block>, DecodeError> {
    let addr = get_addr(word, lo)?;
    let rows = field(word, lo + ADDR_BITS, EXTENT_BITS) as u16;
    let cols = field(word, lo + ADDR_BITS + EXTENT_BITS, EXTENT_BITS) as u16;
    match addr {
        Some(addr) => Ok(Some(Block { addr, rows, cols })),
        None if rows == 0 && cols == 0 => Ok(None),
        None => Err(DecodeError::BadField { field: "absent block extents", value: (rows as u64) << 9 | cols as u64 }),
    }
}

fn required<T>(v: Option<T>, name: &'static str) -> Result<T, DecodeError> {
    v.ok_or(DecodeError::BadField { field: name, value: 0 })
}

/// Pack an instruction into its 128-bit word.
pub fn encode(instr: &Instruction) -> Result<u128, EncodeError> {
    let mut p = Packer::new(instr.opcode());
    match *instr {
        Instruction::ConfigEx { dataflow } => p.put(4, 1, (dataflow == Dataflow::OS) as u64, "dataflow")?,
        Instruction::ConfigLd(LoadConfig::Strided { stride_bytes, scale }) => {
            p.put(4, 1, 0, "variant")?;
            p.put(8, 48, stride_bytes, "stride_bytes")?;
            p.put(64, 32, scale.0 as u64, "scale")?;
        }
        Instruction::ConfigLd(LoadConfig::Im2col(q)) => {
            p.put(4, 1, 1, "variant")?;
            p.put(8, 48, q.input_vaddr, "input_vaddr")?;
            p.put(64, 12, q.in_h as u64, "in_h")?;
            p.put(76, 12, q.in_w as u64, "in_w")?;
            p.put(88, 12, q.channels as u64, "channels")?;
            p.put(100, 4, q.kh as u64, "kh")?;
            p.put(104, 4, q.kw as u64, "kw")?;
            p.put(108, 3, q.stride as u64, "stride")?;
            p.put(111, 3, q.pad as u64, "pad")?;
        }
        Instruction::ConfigSt(StoreConfig::Strided { stride_bytes, activation, scale }) => {
            p.put(4, 1, 0, "variant")?;
            p.put(5, 2, activation.code() as u64, "activation")?;
            p.put(8, 48, stride_bytes, "stride_bytes")?;
            p.put(64, 32, scale.0 as u64, "scale")?;
        }
        Instruction::ConfigSt(StoreConfig::Pool(q)) => {
            p.put(4, 1, 1, "variant")?;
            p.put(8, 40, q.stride_bytes, "stride_bytes")?;
            p.put(48, 4, q.window_h as u64, "window_h")?;
            p.put(52, 4, q.window_w as u64, "window_w")?;
            p.put(56, 3, q.stride as u64, "stride")?;
            p.put(59, 3, q.pad as u64, "pad")?;
            p.put(64, 12, q.in_h as u64, "in_h")?;
            p.put(76, 12, q.in_w as u64, "in_w")?;
            p.put(88, 12, q.band_row0 as u64, "band_row0")?;
            p.put(100, 12, q.out_row as u64, "out_row")?;
            p.put(112, 12, q.out_col0 as u64, "out_col0")?;
        }
        Instruction::Mvin { src, dst, rows, cols } => {
            p.put_addr(8, Some(dst))?;
            p.put(8 + ADDR_BITS, EXTENT_BITS, rows as u64, "rows")?;
            p.put(8 + ADDR_BITS + EXTENT_BITS, EXTENT_BITS, cols as u64, "cols")?;
            match src {
                MvinSource::Dram { vaddr } => {
                    p.put(4, 1, 0, "source")?;
                    p.put(64, 64, vaddr, "vaddr")?;
                }
                MvinSource::Im2col { patch_row, patch_col } => {
                    p.put(4, 1, 1, "source")?;
                    p.put(64, 32, patch_row as u64, "patch_row")?;
                    p.put(96, 32, patch_col as u64, "patch_col")?;
                }
            }
        }
        Instruction::Mvout { dram_vaddr, src, rows, cols } => {
            p.put_addr(8, Some(src))?;
            p.put(8 + ADDR_BITS, EXTENT_BITS, rows as u64, "rows")?;
            p.put(8 + ADDR_BITS + EXTENT_BITS, EXTENT_BITS, cols as u64, "cols")?;
            p.put(64, 64, dram_vaddr, "dram_vaddr")?;
        }
        Instruction::Preload { data, output } => {
            p.put_block(8, data)?;
            p.put_block(64, output)?;
        }
        Instruction::ComputePreloaded { a, bd } | Instruction::ComputeAccumulated { a, bd } => {
            p.put_block(8, Some(a))?;
            p.put_block(64, bd)?;
        }
        Instruction::Flush => {}
    }
    Ok(p.word)
}

/// Unpack a 128-bit word. Unused bits must be zero.
pub fn decode(word: u128) -> Result<Instruction, DecodeError> {
    let opcode = (word & 0xF) as u8;
    let variant = field(word, 4, 1);
    let instr = match opcode {
        0 => Instruction::ConfigEx { dataflow: if variant == 1 { Dataflow::OS } else { Dataflow::WS } },
        1 if variant == 0 => Instruction::ConfigLd(LoadConfig::Strided {
            stride_bytes: field(word, 8, 48),
            scale: Scale(field(word, 64, 32) as u32),
        }),
        1 => Instruction::ConfigLd(LoadConfig::Im2col(Im2colParams {
            input_vaddr: field(word, 8, 48),
            in_h: field(word, 64, 12) as u16,
            in_w: field(word, 76, 12) as u16,
            channels: field(word, 88, 12) as u16,
            kh: field(word, 100, 4) as u8,
            kw: field(word, 104, 4) as u8,
            stride: field(word, 108, 3) as u8,
            pad: field(word, 111, 3) as u8,
        })),
        2 if variant == 0 => {
            let code = field(word, 5, 2) as u8;
            Instruction::ConfigSt(StoreConfig::Strided {
                stride_bytes: field(word, 8, 48),
                activation: Activation::from_code(code)
                    .ok_or(DecodeError::BadField { field: "activation", value: code as u64 })?,
                scale: Scale(field(word, 64, 32) as u32),
            })
        }
        2 => Instruction::ConfigSt(StoreConfig::Pool(PoolParams {
            stride_bytes: field(word, 8, 40),
            window_h: field(word, 48, 4) as u8,
            window_w: field(word, 52, 4) as u8,
            stride: field(word, 56, 3) as u8,
            pad: field(word, 59, 3) as u8,
            in_h: field(word, 64, 12) as u16,
            in_w: field(word, 76, 12) as u16,
            band_row0: field(word, 88, 12) as u16,
            out_row: field(word, 100, 12) as u16,
            out_col0: field(word, 112, 12) as u16,
        })),
        3 => {
            let dst = required(get_addr(word, 8)?, "mvin destination")?;
            let rows = field(word, 8 + ADDR_BITS, EXTENT_BITS) as u16;
            let cols = field(word, 8 + ADDR_BITS + EXTENT_BITS, EXTENT_BITS) as u16;
            let src = if variant == 0 {
                MvinSource::Dram { vaddr: field(word, 64, 64) }
            } else {
                MvinSource::Im2col { patch_row: field(word, 64, 32) as u32, patch_col: field(word, 96, 32) as u32 }
            };
            Instruction::Mvin { src, dst, rows, cols }
        }
        4 => Instruction::Mvout {
            src: required(get_addr(word, 8)?, "mvout source")?,
            rows: field(word, 8 + ADDR_BITS, EXTENT_BITS) as u16,
            cols: field(word, 8 + ADDR_BITS + EXTENT_BITS, EXTENT_BITS) as u16,
            dram_vaddr: field(word, 64, 64),
        },
        5 => Instruction::Preload { data: get_block(word, 8)?, output: get_block(word, 64)? },
        6 => Instruction::ComputePreloaded { a: required(get_block(word, 8)?, "a")?, bd: get_block(word, 64)? },
        7 => Instruction::ComputeAccumulated { a: required(get_block(word, 8)?, "a")?, bd: get_block(word, 64)? },
        8 => Instruction::Flush,
        other => return Err(DecodeError::UnknownOpcode(other)),
    };
    // Re-encoding reproduces exactly the bits this opcode defines; anything
    // else in the word is reserved.
    let canonical = encode(&instr).expect("decoded fields fit their encodings");
    if canonical != word {
        return Err(DecodeError::ReservedBits { opcode: instr.mnemonic(), word });
    }
    Ok(instr)
}

// ---------------------------------------------------------------------------
// Text assembly

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for LocalAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.space {
            Space::Scratchpad => "sp",
            Space::Accumulator => "acc",
        };
        write!(f, "{name}[{}]{}", self.row, if self.accumulate { "+" } else { "" })
    }
}

impl FromStr for LocalAddr {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (s, accumulate) = match s.strip_suffix('+') {
            Some(rest) => (rest, true),
            None => (s, false),
        };
        let (space, rest) = if let Some(r) = s.strip_prefix("sp[") {
            (Space::Scratchpad, r)
        } else if let Some(r) = s.strip_prefix("acc[") {
            (Space::Accumulator, r)
        } else {
            return Err(format!("bad local address `{s}`"));
        };
        let row =
            rest.strip_suffix(']').and_then(|r| r.parse().ok()).ok_or_else(|| format!("bad local address `{s}`"))?;
        Ok(LocalAddr { space, row, accumulate })
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}x{}", self.addr, self.rows, self.cols)
    }
}

impl FromStr for Block {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, ext) = s.rsplit_once(':').ok_or_else(|| format!("bad block `{s}`"))?;
        let (rows, cols) = parse_pair(ext, 'x')?;
        Ok(Block { addr: addr.parse()?, rows, cols })
    }
}

fn fmt_opt_block(b: &Option<Block>) -> String {
    b.map_or_else(|| "-".to_string(), |b| b.to_string())
}

fn parse_opt_block(s: &str) -> Result<Option<Block>, String> {
    if s == "-" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn parse_pair<T: FromStr>(s: &str, sep: char) -> Result<(T, T), String> {
    let (a, b) = s.split_once(sep).ok_or_else(|| format!("expected `A{sep}B`, got `{s}`"))?;
    match (a.parse(), b.parse()) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        _ => Err(format!("expected `A{sep}B`, got `{s}`")),
    }
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|_| format!("bad number `{s}`"))
}

fn parse_num<T: TryFrom<u64>>(s: &str) -> Result<T, String> {
    T::try_from(parse_u64(s)?).map_err(|_| format!("`{s}` out of range"))
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        match self {
            Instruction::ConfigEx { dataflow } => write!(f, "{m} {}", dataflow.to_string().to_lowercase()),
            Instruction::ConfigLd(LoadConfig::Strided { stride_bytes, scale }) => {
                write!(f, "{m} stride={stride_bytes} scale={scale}")
            }
            Instruction::ConfigLd(LoadConfig::Im2col(q)) => write!(
                f,
                "{m} im2col vaddr={:#x} in={}x{}x{} k={}x{} stride={} pad={}",
                q.input_vaddr, q.in_h, q.in_w, q.channels, q.kh, q.kw, q.stride, q.pad
            ),
            Instruction::ConfigSt(StoreConfig::Strided { stride_bytes, activation, scale }) => {
                write!(f, "{m} stride={stride_bytes} act={activation} scale={scale}")
            }
            Instruction::ConfigSt(StoreConfig::Pool(q)) => write!(
                f,
                "{m} pool stride={} window={}x{} step={} pad={} in={}x{} band={} out={},{}",
                q.stride_bytes,
                q.window_h,
                q.window_w,
                q.stride,
                q.pad,
                q.in_h,
                q.in_w,
                q.band_row0,
                q.out_row,
                q.out_col0
            ),
            Instruction::Mvin { src, dst, rows, cols } => match src {
                MvinSource::Dram { vaddr } => write!(f, "{m} dram={vaddr:#x} {dst} {rows}x{cols}"),
                MvinSource::Im2col { patch_row, patch_col } => {
                    write!(f, "{m} patch={patch_row},{patch_col} {dst} {rows}x{cols}")
                }
            },
            Instruction::Mvout { dram_vaddr, src, rows, cols } => {
                write!(f, "{m} {src} {rows}x{cols} dram={dram_vaddr:#x}")
            }
            Instruction::Preload { data, output } => {
                write!(f, "{m} data={} out={}", fmt_opt_block(data), fmt_opt_block(output))
            }
            Instruction::ComputePreloaded { a, bd } | Instruction::ComputeAccumulated { a, bd } => {
                write!(f, "{m} a={a} bd={}", fmt_opt_block(bd))
            }
            Instruction::Flush => f.write_str(m),
        }
    }
}

/// Split `key=value` tokens into a lookup, rejecting repeats and strays.
fn kv_tokens<'a>(tokens: &[&'a str]) -> Result<HashMap<&'a str, &'a str>, String> {
    let mut map = HashMap::new();
    for t in tokens {
        let (k, v) = t.split_once('=').ok_or_else(|| format!("expected key=value, got `{t}`"))?;
        if map.insert(k, v).is_some() {
            return Err(format!("duplicate `{k}`"));
        }
    }
    Ok(map)
}

fn take<'a>(map: &mut HashMap<&str, &'a str>, key: &str) -> Result<&'a str, String> {
    map.remove(key).ok_or_else(|| format!("missing `{key}=`"))
}

fn finish(map: HashMap<&str, &str>) -> Result<(), String> {
    match map.keys().next() {
        Some(k) => Err(format!("unexpected `{k}=`")),
        None => Ok(()),
    }
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    Ok(Scale(parse_num(s)?))
}

impl FromStr for Instruction {
    type Err = String;
    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let (&m, rest) = tokens.split_first().ok_or("empty instruction")?;
        let instr = match m {
            "config_ex" => match rest {
                [df] => Instruction::ConfigEx { dataflow: df.to_uppercase().parse()? },
                _ => return Err("config_ex takes one dataflow".into()),
            },
            "config_ld" if rest.first() == Some(&"im2col") => {
                let mut kv = kv_tokens(&rest[1..])?;
                let (in_h, in_w, channels) = {
                    let parts: Vec<&str> = take(&mut kv, "in")?.split('x').collect();
                    match parts.as_slice() {
                        [h, w, c] => (parse_num(h)?, parse_num(w)?, parse_num(c)?),
                        _ => return Err("in= expects HxWxC".into()),
                    }
                };
                let (kh, kw) = parse_pair(take(&mut kv, "k")?, 'x')?;
                let q = Im2colParams {
                    input_vaddr: parse_u64(take(&mut kv, "vaddr")?)?,
                    in_h,
                    in_w,
                    channels,
                    kh,
                    kw,
                    stride: parse_num(take(&mut kv, "stride")?)?,
                    pad: parse_num(take(&mut kv, "pad")?)?,
                };
                finish(kv)?;
                Instruction::ConfigLd(LoadConfig::Im2col(q))
            }
            "config_ld" => {
                let mut kv = kv_tokens(rest)?;
                let i = Instruction::ConfigLd(LoadConfig::Strided {
                    stride_bytes: parse_u64(take(&mut kv, "stride")?)?,
                    scale: parse_scale(take(&mut kv, "scale")?)?,
                });
                finish(kv)?;
                i
            }
            "config_st" if rest.first() == Some(&"pool") => {
                let mut kv = kv_tokens(&rest[1..])?;
                let (window_h, window_w) = parse_pair(take(&mut kv, "window")?, 'x')?;
                let (in_h, in_w) = parse_pair(take(&mut kv, "in")?, 'x')?;
                let (out_row, out_col0) = parse_pair(take(&mut kv, "out")?, ',')?;
                let q = PoolParams {
                    stride_bytes: parse_u64(take(&mut kv, "stride")?)?,
                    window_h,
                    window_w,
                    stride: parse_num(take(&mut kv, "step")?)?,
                    pad: parse_num(take(&mut kv, "pad")?)?,
                    in_h,
                    in_w,
                    band_row0: parse_num(take(&mut kv, "band")?)?,
                    out_row,
                    out_col0,
                };
                finish(kv)?;
                Instruction::ConfigSt(StoreConfig::Pool(q))
            }
            "config_st" => {
                let mut kv = kv_tokens(rest)?;
                let i = Instruction::ConfigSt(StoreConfig::Strided {
                    stride_bytes: parse_u64(take(&mut kv, "stride")?)?,
                    activation: take(&mut kv, "act")?.parse()?,
                    scale: parse_scale(take(&mut kv, "scale")?)?,
                });
                finish(kv)?;
                i
            }
            "mvin" => match rest {
                [src, dst, ext] => {
                    let src = if let Some(v) = src.strip_prefix("dram=") {
                        MvinSource::Dram { vaddr: parse_u64(v)? }
                    } else if let Some(v) = src.strip_prefix("patch=") {
                        let (patch_row, patch_col) = parse_pair(v, ',')?;
                        MvinSource::Im2col { patch_row, patch_col }
                    } else {
                        return Err(format!("bad mvin source `{src}`"));
                    };
                    let (rows, cols) = parse_pair(ext, 'x')?;
                    Instruction::Mvin { src, dst: dst.parse()?, rows, cols }
                }
                _ => return Err("mvin expects: SOURCE DST RxC".into()),
            },
            "mvout" => match rest {
                [src, ext, dram] => {
                    let (rows, cols) = parse_pair(ext, 'x')?;
                    let vaddr = dram.strip_prefix("dram=").ok_or("mvout expects dram=ADDR")?;
                    Instruction::Mvout { dram_vaddr: parse_u64(vaddr)?, src: src.parse()?, rows, cols }
                }
                _ => return Err("mvout expects: SRC RxC dram=ADDR".into()),
            },
            "preload" => {
                let mut kv = kv_tokens(rest)?;
                let i = Instruction::Preload {
                    data: parse_opt_block(take(&mut kv, "data")?)?,
                    output: parse_opt_block(take(&mut kv, "out")?)?,
                };
                finish(kv)?;
                i
            }
            "compute_preloaded" | "compute_accumulated" => {
                let mut kv = kv_tokens(rest)?;
                let a = take(&mut kv, "a")?.parse()?;
                let bd = parse_opt_block(take(&mut kv, "bd")?)?;
                finish(kv)?;
                if m == "compute_preloaded" {
                    Instruction::ComputePreloaded { a, bd }
                } else {
                    Instruction::ComputeAccumulated { a, bd }
                }
            }
            "flush" if rest.is_empty() => Instruction::Flush,
            other => return Err(format!("unknown mnemonic `{other}`")),
        };
        Ok(instr)
    }
}

/// Parse one instruction per line; blank lines and `#` comments are skipped.
pub fn parse_asm(text: &str) -> Result<Vec<Instruction>, AsmError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|msg| AsmError { line: i + 1, msg })?);
    }
    Ok(out)
}

pub fn format_asm(instrs: &[Instruction]) -> String {
    instrs.iter().map(|i| format!("{i}\n")).collect()
}

// ---------------------------------------------------------------------------
// Footprints and dependency analysis

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("instruction {index}: {space:?} rows {rows:?} outside 0..{limit}")]
    AddressOutOfRange { index: usize, space: Space, rows: Range<u32>, limit: u32 },
    #[error("instruction {index}: {msg}")]
    InvalidOperand { index: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Access {
    Read,
    Write,
}

/// Architectural state that is not addressable memory but still orders
/// instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pseudo {
    LoadConfig,
    StoreConfig,
    ExecConfig,
    Array,
    Fence,
}

impl Pseudo {
    const ALL: [Pseudo; 5] =
        [Pseudo::LoadConfig, Pseudo::StoreConfig, Pseudo::ExecConfig, Pseudo::Array, Pseudo::Fence];

    fn slot(self) -> u32 {
        self as u32
    }
}

/// Everything one instruction reads or writes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Footprint {
    pub local: Vec<(Space, Range<u32>, Access)>,
    /// Half-open virtual byte ranges.
    pub dram: Vec<(u64, u64, Access)>,
    pub pseudo: Vec<(Pseudo, Access)>,
}

impl Footprint {
    fn read_block(&mut self, b: &Block) {
        self.local.push((b.addr.space, b.row_range(), Access::Read));
    }

    /// Write to a block; accumulating writes also read the old contents.
    fn write_block(&mut self, b: &Block, accumulate: bool) {
        if accumulate {
            self.local.push((b.addr.space, b.row_range(), Access::Read));
        }
        self.local.push((b.addr.space, b.row_range(), Access::Write));
    }

    fn dram_rows(&mut self, base: u64, rows: u64, stride: u64, len: u64, access: Access) {
        if rows == 0 || len == 0 {
            return;
        }
        if stride == len || rows == 1 {
            self.dram.push((base, base + (rows - 1) * stride + len, access));
        } else {
            for r in 0..rows {
                self.dram.push((base + r * stride, base + r * stride + len, access));
            }
        }
    }
}

/// Local memory extents an instruction stream is checked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalDims {
    pub dim: u32,
    pub sp_rows: u32,
    pub acc_rows: u32,
}

impl From<&DerivedParams> for LocalDims {
    fn from(d: &DerivedParams) -> Self {
        LocalDims { dim: d.dim, sp_rows: d.sp_rows, acc_rows: d.acc_rows }
    }
}

impl LocalDims {
    fn limit(&self, space: Space) -> u32 {
        match space {
            Space::Scratchpad => self.sp_rows,
            Space::Accumulator => self.acc_rows,
        }
    }
}

/// Instruction-stream state that affects footprints and semantics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanState {
    pub load: LoadConfig,
    pub store: StoreConfig,
    pub dataflow: Dataflow,
    /// Output block latched by the most recent preload (`None` before any
    /// preload or when the preload discarded its output).
    pub target: Option<Option<Block>>,
    /// `(K, N)` of the weights latched by the last weight-stationary preload.
    pub weights: Option<(u16, u16)>,
}

impl ScanState {
    pub fn new(dim: u32) -> ScanState {
        ScanState {
            load: LoadConfig::Strided { stride_bytes: dim as u64, scale: Scale::ONE },
            store: StoreConfig::Strided { stride_bytes: dim as u64, activation: Activation::None, scale: Scale::ONE },
            dataflow: Dataflow::WS,
            target: None,
            weights: None,
        }
    }

    /// Validate `instr` at position `index`, return its footprint and advance.
    pub fn step(&mut self, index: usize, instr: &Instruction, dims: &LocalDims) -> Result<Footprint, IsaError> {
        let bad = |msg: String| IsaError::InvalidOperand { index, msg };
        let check_extent = |rows: u16, cols: u16| -> Result<(), IsaError> {
            if rows == 0 || cols == 0 || rows as u32 > dims.dim || cols as u32 > dims.dim {
                return Err(bad(format!("extent {rows}x{cols} outside 1..={}", dims.dim)));
            }
            Ok(())
        };
        let check_rows = |space: Space, rows: Range<u32>| -> Result<(), IsaError> {
            let limit = dims.limit(space);
            if rows.end > limit {
                return Err(IsaError::AddressOutOfRange { index, space, rows, limit });
            }
            Ok(())
        };
        let check_block = |b: &Block| -> Result<(), IsaError> {
            check_extent(b.rows, b.cols)?;
            check_rows(b.addr.space, b.row_range())
        };

        let mut fp = Footprint::default();
        fp.pseudo.push((Pseudo::Fence, Access::Read));
        match instr {
            Instruction::ConfigEx { dataflow } => {
                self.dataflow = *dataflow;
                fp.pseudo.push((Pseudo::ExecConfig, Access::Write));
            }
            Instruction::ConfigLd(cfg) => {
                if let LoadConfig::Im2col(q) = cfg {
                    if q.stride == 0 || q.kh == 0 || q.kw == 0 || q.channels == 0 {
                        return Err(bad("im2col config with zero extent".into()));
                    }
                    q.geom().out_hw().map_err(|e| bad(e.to_string()))?;
                }
                self.load = *cfg;
                fp.pseudo.push((Pseudo::LoadConfig, Access::Write));
            }
            Instruction::ConfigSt(cfg) => {
                if let StoreConfig::Pool(q) = cfg {
                    if q.stride == 0 || q.window_h == 0 || q.window_w == 0 || q.in_w == 0 || q.in_h == 0 {
                        return Err(bad("pool config with zero extent".into()));
                    }
                }
                self.store = *cfg;
                fp.pseudo.push((Pseudo::StoreConfig, Access::Write));
            }
            Instruction::Mvin { src, dst, rows, cols } => {
                check_extent(*rows, *cols)?;
                let range = dst.row..dst.row + *rows as u32;
                check_rows(dst.space, range.clone())?;
                fp.pseudo.push((Pseudo::LoadConfig, Access::Read));
                let accumulate = dst.accumulate && dst.space == Space::Accumulator;
                fp.write_block(&Block { addr: *dst, rows: *rows, cols: *cols }, accumulate);
                match (src, &self.load) {
                    (MvinSource::Dram { vaddr }, LoadConfig::Strided { stride_bytes, .. }) => {
                        if *rows > 1 && *stride_bytes < *cols as u64 {
                            return Err(bad(format!("stride {stride_bytes} shorter than row of {cols} bytes")));
                        }
                        fp.dram_rows(*vaddr, *rows as u64, *stride_bytes, *cols as u64, Access::Read);
                    }
                    (MvinSource::Im2col { patch_row, patch_col }, LoadConfig::Im2col(q)) => {
                        let g = q.geom();
                        let (oh, ow) = g.out_hw().map_err(|e| bad(e.to_string()))?;
                        let last_row = *patch_row as usize + *rows as usize - 1;
                        if last_row >= oh * ow || *patch_col as usize + *cols as usize > g.patch_cols() {
                            return Err(bad(format!(
                                "patch block outside {}x{} patch matrix",
                                oh * ow,
                                g.patch_cols()
                            )));
                        }
                        // Conservative: every input row any patch in the block can touch.
                        let oy_lo = *patch_row as usize / ow;
                        let oy_hi = last_row / ow;
                        let iy_lo = (oy_lo * g.stride).saturating_sub(g.pad);
                        let iy_hi = (oy_hi * g.stride + g.kh).saturating_sub(g.pad).min(g.h);
                        if iy_hi > iy_lo {
                            let row_bytes = (g.w * g.c) as u64;
                            fp.dram.push((
                                q.input_vaddr + iy_lo as u64 * row_bytes,
                                q.input_vaddr + iy_hi as u64 * row_bytes,
                                Access::Read,
                            ));
                        }
                    }
                    (MvinSource::Dram { .. }, LoadConfig::Im2col(_)) => {
                        return Err(bad("dram mvin while the load path is configured for im2col".into()))
                    }
                    (MvinSource::Im2col { .. }, LoadConfig::Strided { .. }) => {
                        return Err(bad("im2col mvin without an im2col load config".into()))
                    }
                }
            }
            Instruction::Mvout { dram_vaddr, src, rows, cols } => {
                check_extent(*rows, *cols)?;
                fp.pseudo.push((Pseudo::StoreConfig, Access::Read));
                match &self.store {
                    StoreConfig::Strided { stride_bytes, .. } => {
                        check_rows(src.space, src.row..src.row + *rows as u32)?;
                        if *rows > 1 && *stride_bytes < *cols as u64 {
                            return Err(bad(format!("stride {stride_bytes} shorter than row of {cols} bytes")));
                        }
                        fp.read_block(&Block { addr: *src, rows: *rows, cols: *cols });
                        fp.dram_rows(*dram_vaddr, *rows as u64, *stride_bytes, *cols as u64, Access::Write);
                    }
                    StoreConfig::Pool(q) => {
                        if src.space != Space::Scratchpad {
                            return Err(bad("pooling reads from the scratchpad only".into()));
                        }
                        let (lo, hi) =
                            pool_band(q, *rows).ok_or_else(|| bad("pool window lies above its band".into()))?;
                        if hi > lo {
                            let range = src.row + lo..src.row + hi;
                            check_rows(src.space, range.clone())?;
                            fp.local.push((Space::Scratchpad, range, Access::Read));
                        }
                        if *rows > 1 && q.stride_bytes < *cols as u64 {
                            return Err(bad("pool output stride shorter than a pixel".into()));
                        }
                        fp.dram_rows(*dram_vaddr, *rows as u64, q.stride_bytes, *cols as u64, Access::Write);
                    }
                }
            }
            Instruction::Preload { data, output } => {
                fp.pseudo.push((Pseudo::ExecConfig, Access::Read));
                fp.pseudo.push((Pseudo::Array, Access::Write));
                if let Some(d) = data {
                    check_block(d)?;
                    fp.read_block(d);
                }
                if let Some(o) = output {
                    check_block(o)?;
                }
                match (self.dataflow, data, output) {
                    (Dataflow::WS, Some(d), _) => {
                        if d.addr.space != Space::Scratchpad {
                            return Err(bad("weights must come from the scratchpad".into()));
                        }
                        self.weights = Some((d.rows, d.cols));
                    }
                    (Dataflow::OS, Some(d), Some(o)) if (d.rows, d.cols) != (o.rows, o.cols) => {
                        return Err(bad(format!(
                            "bias {}x{} does not match output {}x{}",
                            d.rows, d.cols, o.rows, o.cols
                        )));
                    }
                    _ => {}
                }
                self.target = Some(*output);
            }
            Instruction::ComputePreloaded { a, bd } | Instruction::ComputeAccumulated { a, bd } => {
                check_block(a)?;
                fp.pseudo.push((Pseudo::ExecConfig, Access::Read));
                fp.pseudo.push((Pseudo::Array, Access::Read));
                fp.read_block(a);
                if let Some(b) = bd {
                    check_block(b)?;
                    fp.read_block(b);
                }
                if a.addr.space != Space::Scratchpad {
                    return Err(bad("A operand must come from the scratchpad".into()));
                }
                let n = match (self.dataflow, bd) {
                    (Dataflow::WS, _) => {
                        let (k, n) =
                            self.weights.ok_or_else(|| bad("compute before any weights were preloaded".into()))?;
                        if k != a.cols {
                            return Err(bad(format!("A has {} columns, weights have {k} rows", a.cols)));
                        }
                        if let Some(d) = bd {
                            if (d.rows, d.cols) != (a.rows, n) {
                                return Err(bad(format!("D is {}x{}, result is {}x{n}", d.rows, d.cols, a.rows)));
                            }
                        }
                        n
                    }
                    (Dataflow::OS, Some(b)) => {
                        if b.addr.space != Space::Scratchpad || b.rows != a.cols {
                            return Err(bad(format!("B {b} does not chain with A {a}")));
                        }
                        b.cols
                    }
                    (Dataflow::OS, None) => return Err(bad("output-stationary compute needs a B operand".into())),
                };
                let target = self.target.ok_or_else(|| bad("compute before any preload".into()))?;
                if let Some(t) = target {
                    if (t.rows, t.cols) != (a.rows, n) {
                        return Err(bad(format!("output {t} does not match result {}x{n}", a.rows)));
                    }
                }
                if let Some(t) = target {
                    let accumulate = (t.addr.accumulate && t.addr.space == Space::Accumulator)
                        || (self.dataflow == Dataflow::OS && matches!(instr, Instruction::ComputeAccumulated { .. }));
                    fp.write_block(&t, accumulate);
                }
            }
            Instruction::Flush => {
                fp.pseudo.clear();
                fp.pseudo.push((Pseudo::Fence, Access::Write));
            }
        }
        Ok(fp)
    }
}

/// Scratchpad row offsets `[lo, hi)` a pooled store of `rows` pixels reads,
/// relative to its source base.
pub fn pool_band(q: &PoolParams, rows: u16) -> Option<(u32, u32)> {
    let mut lo = u32::MAX;
    let mut hi = 0;
    for ox in q.out_col0 as usize..q.out_col0 as usize + rows as usize {
        for ky in 0..q.window_h as usize {
            for kx in 0..q.window_w as usize {
                if let Some((iy, ix)) = q.source(ox, ky, kx) {
                    let off = q.band_offset(iy, ix)?;
                    lo = lo.min(off);
                    hi = hi.max(off + 1);
                }
            }
        }
    }
    Some(if hi == 0 { (0, 0) } else { (lo, hi) })
}

/// Footprints of a whole stream, validating each instruction in order.
pub fn footprints(instrs: &[Instruction], dims: &LocalDims) -> Result<Vec<Footprint>, IsaError> {
    let mut scan = ScanState::new(dims.dim);
    instrs.iter().enumerate().map(|(i, instr)| scan.step(i, instr, dims)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DepKinds {
    pub raw: bool,
    pub war: bool,
    pub waw: bool,
}

impl DepKinds {
    fn from_accesses(earlier: Access, later: Access) -> DepKinds {
        match (earlier, later) {
            (Access::Write, Access::Read) => DepKinds { raw: true, ..Default::default() },
            (Access::Read, Access::Write) => DepKinds { war: true, ..Default::default() },
            (Access::Write, Access::Write) => DepKinds { waw: true, ..Default::default() },
            (Access::Read, Access::Read) => DepKinds::default(),
        }
    }

    fn merge(&mut self, o: DepKinds) {
        self.raw |= o.raw;
        self.war |= o.war;
        self.waw |= o.waw;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: u32,
    pub to: u32,
    pub kinds: DepKinds,
}

/// Forward dependency edges of an instruction stream. Edges are sorted by
/// `(to, from)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepGraph {
    len: usize,
    edges: Vec<Edge>,
    /// `preds[j]` indexes the slice of `edges` ending at `j`.
    starts: Vec<usize>,
}

#[derive(Default)]
struct RowState {
    last_write: Option<u32>,
    readers: Vec<u32>,
}

#[derive(Clone, Copy)]
struct DramEntry {
    lo: u64,
    hi: u64,
    index: u32,
    access: Access,
}

const DRAM_LINE: u64 = 64;

struct Tracker {
    sp: Vec<RowState>,
    acc: Vec<RowState>,
    pseudo: Vec<RowState>,
    dram: HashMap<u64, Vec<DramEntry>>,
}

impl Tracker {
    fn rows(&mut self, space: Space) -> &mut Vec<RowState> {
        match space {
            Space::Scratchpad => &mut self.sp,
            Space::Accumulator => &mut self.acc,
        }
    }
}

fn row_reads(state: &mut RowState, j: u32, out: &mut Vec<(u32, DepKinds)>) {
    if let Some(w) = state.last_write {
        if w != j {
            out.push((w, DepKinds::from_accesses(Access::Write, Access::Read)));
        }
    }
    if state.readers.last() != Some(&j) {
        state.readers.push(j);
    }
}

fn row_write(state: &mut RowState, j: u32, out: &mut Vec<(u32, DepKinds)>) {
    let mut any_reader = false;
    for &r in &state.readers {
        if r != j {
            out.push((r, DepKinds::from_accesses(Access::Read, Access::Write)));
            any_reader = true;
        }
    }
    if !any_reader {
        if let Some(w) = state.last_write {
            if w != j {
                out.push((w, DepKinds::from_accesses(Access::Write, Access::Write)));
            }
        }
    }
    state.last_write = Some(j);
    state.readers.clear();
}

/// Build the dependency graph of `instrs`.
///
/// Local rows and pseudo-resources are tracked per row: reads depend on the
/// last writer, writes on every reader since then (or on the last writer when
/// there were none). DRAM is tracked with exact byte intervals bucketed by
/// 64-byte line. Work is linear in the total footprint size, quadratic in the
/// worst case where every instruction touches one shared row.
pub fn dep_graph(instrs: &[Instruction], dims: &LocalDims) -> Result<DepGraph, IsaError> {
    let fps = footprints(instrs, dims)?;
    Ok(dep_graph_from_footprints(&fps))
}

pub fn dep_graph_from_footprints(fps: &[Footprint]) -> DepGraph {
    let mut t = Tracker {
        sp: Vec::new(),
        acc: Vec::new(),
        pseudo: (0..Pseudo::ALL.len()).map(|_| RowState::default()).collect(),
        dram: HashMap::new(),
    };
    let mut edges = Vec::new();
    let mut starts = Vec::with_capacity(fps.len() + 1);
    let mut found: Vec<(u32, DepKinds)> = Vec::new();
    for (j, fp) in fps.iter().enumerate() {
        let j = j as u32;
        found.clear();
        for access in [Access::Read, Access::Write] {
            for &(p, a) in &fp.pseudo {
                if a == access {
                    let st = &mut t.pseudo[p.slot() as usize];
                    match a {
                        Access::Read => row_reads(st, j, &mut found),
                        Access::Write => row_write(st, j, &mut found),
                    }
                }
            }
            for (space, range, a) in &fp.local {
                if *a != access {
                    continue;
                }
                let rows = t.rows(*space);
                if rows.len() < range.end as usize {
                    rows.resize_with(range.end as usize, RowState::default);
                }
                for r in range.clone() {
                    let st = &mut rows[r as usize];
                    match a {
                        Access::Read => row_reads(st, j, &mut found),
                        Access::Write => row_write(st, j, &mut found),
                    }
                }
            }
        }
        for &(lo, hi, a) in &fp.dram {
            dram_access(&mut t.dram, lo, hi, a, j, &mut found);
        }
        found.sort_by_key(|&(from, _)| from);
        starts.push(edges.len());
        let mut iter = found.iter().peekable();
        while let Some(&(from, kinds)) = iter.next() {
            let mut merged = kinds;
            while let Some(&&(f2, k2)) = iter.peek() {
                if f2 != from {
                    break;
                }
                merged.merge(k2);
                iter.next();
            }
            edges.push(Edge { from, to: j, kinds: merged });
        }
    }
    starts.push(edges.len());
    DepGraph { len: fps.len(), edges, starts }
}

fn dram_access(
    lines: &mut HashMap<u64, Vec<DramEntry>>,
    lo: u64,
    hi: u64,
    access: Access,
    j: u32,
    out: &mut Vec<(u32, DepKinds)>,
) {
    if hi <= lo {
        return;
    }
    for line in lo / DRAM_LINE..=(hi - 1) / DRAM_LINE {
        let clo = lo.max(line * DRAM_LINE);
        let chi = hi.min((line + 1) * DRAM_LINE);
        let entries = lines.entry(line).or_default();
        for e in entries.iter() {
            if e.index != j && e.lo < chi && clo < e.hi && (e.access == Access::Write || access == Access::Write) {
                out.push((e.index, DepKinds::from_accesses(e.access, access)));
            }
        }
        if access == Access::Write {
            entries.retain(|e| !(clo <= e.lo && e.hi <= chi));
        }
        entries.push(DramEntry { lo: clo, hi: chi, index: j, access });
    }
}

impl DepGraph {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Edges ending at instruction `j`.
    pub fn preds(&self, j: usize) -> &[Edge] {
        &self.edges[self.starts[j]..self.starts[j + 1]]
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.preds(to).iter().any(|e| e.from as usize == from)
    }

    /// `reach[i]` is the set of instructions reachable from `i`, as bitsets.
    pub fn reachability(&self) -> Vec<Vec<u64>> {
        let words = self.len.div_ceil(64);
        let mut reach = vec![vec![0u64; words]; self.len];
        let mut succs: Vec<Vec<u32>> = vec![Vec::new(); self.len];
        for e in &self.edges {
            succs[e.from as usize].push(e.to);
        }
        for i in (0..self.len).rev() {
            let mut set = vec![0u64; words];
            for &s in &succs[i] {
                let s = s as usize;
                set[s / 64] |= 1 << (s % 64);
                for (w, v) in set.iter_mut().zip(&reach[s]) {
                    *w |= v;
                }
            }
            reach[i] = set;
        }
        reach
    }

    pub fn reaches(reach: &[Vec<u64>], from: usize, to: usize) -> bool {
        reach[from][to / 64] >> (to % 64) & 1 == 1
    }

    /// Edges implied by some longer path; present for simplicity of
    /// construction but not needed for ordering.
    pub fn transitive_edges(&self) -> Vec<Edge> {
        let reach = self.reachability();
        let mut out = Vec::new();
        for e in &self.edges {
            let redundant = self
                .edges
                .iter()
                .filter(|f| f.from == e.from && f.to != e.to && f.to < e.to)
                .any(|f| Self::reaches(&reach, f.to as usize, e.to as usize));
            if redundant {
                out.push(*e);
            }
        }
        out
    }
}
