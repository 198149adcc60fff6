//! Load-balanced partitioning and execution of sparse tensor algebra.
//!
//! The crate evaluates multi-operand sparse tensor expressions (element-wise
//! unions and intersections, inner products, sparse matrix products) by
//! cutting the dense coordinate space of the iteration into pieces that
//! enclose equal amounts of work, where work is measured by a per-dimension
//! cost model counting operand non-zeros. Cuts are found with a hierarchical
//! binary search over the coordinate space backed by binary searches over the
//! compressed operand structures, so partitioning costs `O(log(nnz) log(n))`
//! per cut and all cuts are independent of each other.
//!
//! Nested sparse intersections skip entire subtrees of the iteration space,
//! which plain prefix counts cannot see. Those expressions are staged: the
//! outer intersection is coiterated once to tabulate the surviving
//! coordinates and their inner costs, the table is prefix-summed into a
//! remapped cost function, and the remaining loops are partitioned against
//! that table.
//!
//! The crate is `no_std` (with `alloc`); anything that needs threads, files,
//! or a clock lives in the companion `balsa` crate. Parallel sections accept
//! an [`exec::Executor`] so the host can run the independent tasks on real
//! threads while tests can run them inline.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cost;
pub mod engine;
pub mod error;
pub mod exec;
pub mod expr;
pub mod partition;
pub mod recursive;
pub mod scan;
pub mod storage;

pub use error::Error;
pub use expr::{Combine, Expression, MergeMode, Operand};
pub use storage::{CooEntries, Level, LevelKind, Tensor};

/// Result alias used across the crate.
pub type Result<T> = core::result::Result<T, Error>;
