//! First-order host CPU cost model: op-count formulas divided by an
//! effective integer IPC.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::HostKind;

/// Integer ops per im2col output element for a straightforward loop nest:
/// div/mod to recover (pixel, ky, kx, c), input coordinates, four padding
/// bounds checks, address multiply-adds, load, store and loop control.
pub const IM2COL_OPS_PER_ELEM: u64 = 20;
/// Ops per pooling window element (load, compare).
pub const POOL_OPS_PER_ELEM: u64 = 2;
/// Ops per softmax element (max, subtract, exp approximation, sum, divide).
pub const SOFTMAX_OPS_PER_ELEM: u64 = 12;
/// Fixed per-layer driver cost: tiling computation and command issue setup.
pub const LAYER_SETUP_OPS: u64 = 500;
/// Ops per multiply-accumulate on the CPU (multiply, add).
pub const MATMUL_OPS_PER_MAC: u64 = 2;
/// Ops per residual element (two loads, saturating add and store).
pub const RESIDUAL_OPS_PER_ELEM: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HostError {
    #[error("unknown host kernel `{0}`")]
    UnknownKernel(String),
    #[error("{kernel} takes {expected} shape arguments, got {got}")]
    ShapeArity { kernel: HostKernel, expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostKernel {
    /// shape: `[patch_rows, patch_cols]`
    Im2col,
    /// shape: `[output_elems, window_elems]`
    MaxPool,
    /// shape: `[rows, cols]`
    Softmax,
    /// shape: `[]`
    LayerSetup,
    /// shape: `[m, n, k]`
    Matmul,
    /// shape: `[elems]`
    ResidualAdd,
}

impl HostKernel {
    pub const ALL: [HostKernel; 6] = [
        HostKernel::Im2col,
        HostKernel::MaxPool,
        HostKernel::Softmax,
        HostKernel::LayerSetup,
        HostKernel::Matmul,
        HostKernel::ResidualAdd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HostKernel::Im2col => "im2col",
            HostKernel::MaxPool => "maxpool",
            HostKernel::Softmax => "softmax",
            HostKernel::LayerSetup => "layer_setup",
            HostKernel::Matmul => "matmul",
            HostKernel::ResidualAdd => "residual_add",
        }
    }

    fn arity(self) -> usize {
        match self {
            HostKernel::LayerSetup => 0,
            HostKernel::ResidualAdd => 1,
            HostKernel::Im2col | HostKernel::MaxPool | HostKernel::Softmax => 2,
            HostKernel::Matmul => 3,
        }
    }
}

impl fmt::Display for HostKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HostKernel {
    type Err = HostError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HostKernel::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| HostError::UnknownKernel(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostModel {
    pub kind: HostKind,
    /// Effective integer ops retired per cycle.
    pub ipc_int: f64,
}

impl HostModel {
    pub const IN_ORDER_IPC: f64 = 0.7;
    pub const OUT_OF_ORDER_IPC: f64 = 2.2;

    pub fn new(kind: HostKind) -> HostModel {
        let ipc_int = match kind {
            HostKind::InOrder => Self::IN_ORDER_IPC,
            HostKind::OutOfOrder => Self::OUT_OF_ORDER_IPC,
        };
        HostModel { kind, ipc_int }
    }
}

pub fn op_count(kernel: HostKernel, shape: &[u64]) -> Result<u64, HostError> {
    if shape.len() != kernel.arity() {
        return Err(HostError::ShapeArity { kernel, expected: kernel.arity(), got: shape.len() });
    }
    let prod: u64 = shape.iter().product();
    Ok(match kernel {
        HostKernel::Im2col => prod * IM2COL_OPS_PER_ELEM,
        HostKernel::MaxPool => prod * POOL_OPS_PER_ELEM,
        HostKernel::Softmax => prod * SOFTMAX_OPS_PER_ELEM,
        HostKernel::LayerSetup => LAYER_SETUP_OPS,
        HostKernel::Matmul => prod * MATMUL_OPS_PER_MAC,
        HostKernel::ResidualAdd => prod * RESIDUAL_OPS_PER_ELEM,
    })
}

/// Cycles the host spends on one kernel: `ceil(ops / ipc)`.
pub fn host_cost(kernel: HostKernel, shape: &[u64], host: &HostModel) -> Result<u64, HostError> {
    let ops = op_count(kernel, shape)?;
    Ok((ops as f64 / host.ipc_int).ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_size_is_free() {
        let m = HostModel::new(HostKind::InOrder);
        assert_eq!(host_cost(HostKernel::Im2col, &[0, 27], &m).unwrap(), 0);
    }

    #[test]
    fn ooo_ratio_matches_ipc_ratio() {
        let shape = [3136, 576];
        let io = host_cost(HostKernel::Im2col, &shape, &HostModel::new(HostKind::InOrder)).unwrap();
        let ooo = host_cost(HostKernel::Im2col, &shape, &HostModel::new(HostKind::OutOfOrder)).unwrap();
        let ratio = io as f64 / ooo as f64;
        assert!((ratio - 2.2 / 0.7).abs() < 1e-3, "{ratio}");
    }

    #[test]
    fn unknown_kernel_and_arity() {
        assert_eq!("fft".parse::<HostKernel>(), Err(HostError::UnknownKernel("fft".into())));
        assert_eq!("maxpool".parse::<HostKernel>(), Ok(HostKernel::MaxPool));
        assert!(matches!(op_count(HostKernel::Matmul, &[1, 2]), Err(HostError::ShapeArity { .. })));
        assert_eq!(op_count(HostKernel::LayerSetup, &[]).unwrap(), LAYER_SETUP_OPS);
    }
}
