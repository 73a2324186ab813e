//! Per-core programs: an instruction stream partitioned into layers, each
//! with optional host-side work that runs before the accelerator part.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::func::WindowGeom;
use crate::isa::{self, AsmError, Instruction};
use crate::sim::host::HostKernel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Conv,
    Matmul,
    Residual,
    Pool,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [KernelKind::Conv, KernelKind::Matmul, KernelKind::Residual, KernelKind::Pool];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Conv => "conv",
            KernelKind::Matmul => "matmul",
            KernelKind::Residual => "residual",
            KernelKind::Pool => "pool",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KernelKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown kernel kind `{s}`"))
    }
}

/// Functional effect of a host task. Cost-only tasks carry `None`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HostOp {
    None,
    /// Write the patch matrix of the NHWC tensor at `src` to `dst`, row-major.
    Im2col {
        src: u64,
        dst: u64,
        geom: WindowGeom,
    },
    MaxPool {
        src: u64,
        dst: u64,
        geom: WindowGeom,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostTask {
    pub kernel: HostKernel,
    /// Shape arguments of the kernel's op-count formula.
    pub shape: Vec<u64>,
    pub op: HostOp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMark {
    pub name: String,
    pub kind: KernelKind,
    /// Instruction index range within [`Program::instrs`].
    pub range: Range<usize>,
    pub host: Vec<HostTask>,
    /// Multiply-accumulates (element operations for residual and pool layers).
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub instrs: Vec<Instruction>,
    pub layers: Vec<LayerMark>,
}

impl Program {
    pub fn new() -> Program {
        Program::default()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty() && self.layers.iter().all(|l| l.host.is_empty())
    }

    /// Wrap a bare instruction list as a single layer.
    pub fn single(name: &str, kind: KernelKind, instrs: Vec<Instruction>, macs: u64) -> Program {
        let n = instrs.len();
        Program {
            instrs,
            layers: vec![LayerMark { name: name.to_string(), kind, range: 0..n, host: Vec::new(), macs }],
        }
    }

    /// Start a new layer; following pushes belong to it until the next call.
    pub fn begin_layer(&mut self, name: &str, kind: KernelKind, macs: u64) {
        let at = self.instrs.len();
        self.layers.push(LayerMark { name: name.to_string(), kind, range: at..at, host: Vec::new(), macs });
    }

    pub fn push(&mut self, instr: Instruction) {
        self.instrs.push(instr);
        if let Some(l) = self.layers.last_mut() {
            l.range.end = self.instrs.len();
        }
    }

    pub fn push_host(&mut self, task: HostTask) {
        self.layers.last_mut().expect("host task outside a layer").host.push(task);
    }

    /// Append another program's layers after this one's.
    pub fn append(&mut self, other: Program) {
        let base = self.instrs.len();
        self.instrs.extend(other.instrs);
        for mut l in other.layers {
            l.range = l.range.start + base..l.range.end + base;
            self.layers.push(l);
        }
    }

    /// Layers must tile the instruction list in order.
    pub fn check_layers(&self) -> Result<(), String> {
        let mut at = 0;
        for l in &self.layers {
            if l.range.start != at || l.range.end < l.range.start {
                return Err(format!("layer `{}` covers {:?}, expected to start at {at}", l.name, l.range));
            }
            at = l.range.end;
        }
        if at != self.instrs.len() && !(self.layers.is_empty() && self.instrs.is_empty()) {
            return Err(format!("layers cover {at} of {} instructions", self.instrs.len()));
        }
        Ok(())
    }

    /// Text form: `.layer NAME KIND macs=N` directives followed by the
    /// layer's instructions. Host tasks appear as comments only.
    pub fn to_asm(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let _ = writeln!(s, ".layer {} {} macs={}", l.name, l.kind.name(), l.macs);
            for t in &l.host {
                let _ = writeln!(s, "# host {} {:?}", t.kernel, t.shape);
            }
            s.push_str(&isa::format_asm(&self.instrs[l.range.clone()]));
        }
        s
    }

    pub fn from_asm(text: &str) -> Result<Program, AsmError> {
        let mut p = Program::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| AsmError { line: i + 1, msg };
            if let Some(rest) = line.strip_prefix(".layer") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [name, kind, macs] = parts.as_slice() else {
                    return Err(err("expected `.layer NAME KIND macs=N`".into()));
                };
                let kind = kind.parse().map_err(err)?;
                let macs = macs
                    .strip_prefix("macs=")
                    .and_then(|m| m.parse().ok())
                    .ok_or_else(|| err(format!("bad macs `{macs}`")))?;
                p.begin_layer(name, kind, macs);
                continue;
            }
            if p.layers.is_empty() {
                return Err(err("instruction before any `.layer`".into()));
            }
            p.push(line.parse().map_err(err)?);
        }
        Ok(p)
    }
}
