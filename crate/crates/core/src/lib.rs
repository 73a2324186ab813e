//! Cycle-level simulator, functional model and mapper for parameterized
//! systolic DNN accelerators inside a small simulated SoC.
//!
//! Pipeline: an [`config::ArchConfig`] is validated into a
//! [`config::ValidatedConfig`]; [`workload`] describes networks; [`mapper`]
//! lowers layers into [`isa`] instruction streams; [`sim`] executes them on
//! one or more cores against the [`mmu`] and [`mem`] timing models and checks
//! results against the pure functions in [`func`]. [`harness`] wraps all of
//! that into reproducible experiment recipes.

pub mod config;
pub mod func;
pub mod harness;
pub mod isa;
pub mod mapper;
pub mod mem;
pub mod mmu;
pub mod program;
pub mod sim;
pub mod workload;

pub use config::{validate, ArchConfig, Dataflow, HostKind, ValidatedConfig};
pub use isa::{Instruction, LocalAddr, Space};
pub use program::Program;
pub use sim::{SimReport, Simulator};
