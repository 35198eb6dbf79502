//! Crash-consistency model checker and persistence-protocol simulator.
//!
//! The storage stack is modelled as six layers (application, page cache,
//! filesystem journal, block layer, controller cache, persistent media).
//! Workloads of syscalls are replayed under every fault schedule within
//! bounds, and the resulting states are checked for the properties
//! applications usually assume: that an fsync return decides durability,
//! that retrying a failed fsync converges, that a crash leaves a prefix of
//! the operations, and so on. A separate discrete-event simulator covers
//! retry amplification and restartable-sequence convergence.

pub mod checker;
pub mod cli;
pub mod completeness;
pub mod device;
pub mod error;
pub mod fault;
pub mod model;
pub mod profile;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod syscall;
pub mod workload;

pub use error::{Error, Result};
