//! Execution engine: coiteration, two-phase output assembly, scatter
//! reduction, and kernel drivers.

pub mod esc;
pub mod kernels;
pub mod output;
pub mod walk;

pub use esc::{esc_reduce, pairwise_sum, EscBuffer};
pub use kernels::{
    elementwise, elementwise_expr, inner_product, run, sequential_reference, spgemm, sssmm,
    RunStats,
};
pub use output::{assemble, compute, reconcile, AssemblyCounts, WriteOffsets};
pub use walk::{OpHit, PointSink, WalkStats};
