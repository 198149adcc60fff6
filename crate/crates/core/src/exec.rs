//! Executor abstraction for the embarrassingly parallel sections.
//!
//! Partition searches, per-worker assembly walks, and per-worker compute
//! walks are independent tasks that write disjoint state. The core crate
//! stays thread-free; hosts inject a real thread pool by implementing
//! [`Executor`]. Results are identical for any executor because every task
//! owns its output slot.

use alloc::boxed::Box;
use alloc::vec::Vec;

/// Runs a batch of independent tasks to completion.
pub trait Executor {
    /// Execute every task. Tasks may run in any order or concurrently;
    /// `run` returns only after all of them finished.
    fn run<'a>(&self, tasks: Vec<Box<dyn FnOnce() + Send + 'a>>);
}

/// Runs tasks inline, one after another.
#[derive(Debug, Default, Clone, Copy)]
pub struct SeqExecutor;

impl Executor for SeqExecutor {
    fn run<'a>(&self, tasks: Vec<Box<dyn FnOnce() + Send + 'a>>) {
        for task in tasks {
            task();
        }
    }
}
