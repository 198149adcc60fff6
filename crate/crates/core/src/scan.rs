//! Exclusive prefix sums for write-offset computation.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::exec::Executor;

/// Below this length the blocked scan falls back to a single pass.
pub const PARALLEL_SCAN_THRESHOLD: usize = 4096;

/// Exclusive prefix sum: `offsets[i] = sum(counts[..i])`, same length as the
/// input; the grand total is returned separately.
pub fn exclusive_scan(counts: &[i64]) -> (Vec<i64>, i64) {
    let mut offsets = Vec::with_capacity(counts.len());
    let mut acc = 0i64;
    for &c in counts {
        offsets.push(acc);
        acc += c;
    }
    (offsets, acc)
}

/// In-place exclusive scan over `data`, returning the total. Short inputs
/// run in one pass; longer inputs use a blocked two-pass scheme whose block
/// sums are combined serially between the passes. The result is identical
/// either way.
pub fn exclusive_scan_inplace(data: &mut [i64], executor: &dyn Executor) -> i64 {
    if data.len() < PARALLEL_SCAN_THRESHOLD {
        let mut acc = 0i64;
        for slot in data.iter_mut() {
            let c = *slot;
            *slot = acc;
            acc += c;
        }
        return acc;
    }

    let block = PARALLEL_SCAN_THRESHOLD / 4;
    let nblocks = data.len().div_ceil(block);
    let mut sums = vec![0i64; nblocks];

    {
        let mut tasks: Vec<Box<dyn FnOnce() + Send + '_>> = Vec::with_capacity(nblocks);
        let mut rest = &mut data[..];
        for sum_slot in sums.iter_mut() {
            let take = block.min(rest.len());
            let (chunk, tail) = rest.split_at_mut(take);
            rest = tail;
            tasks.push(Box::new(move || {
                *sum_slot = chunk.iter().sum();
            }));
        }
        executor.run(tasks);
    }

    let (block_offsets, total) = exclusive_scan(&sums);

    let mut tasks: Vec<Box<dyn FnOnce() + Send + '_>> = Vec::with_capacity(nblocks);
    let mut rest = &mut data[..];
    for &base in block_offsets.iter() {
        let take = block.min(rest.len());
        let (chunk, tail) = rest.split_at_mut(take);
        rest = tail;
        tasks.push(Box::new(move || {
            let mut acc = base;
            for slot in chunk.iter_mut() {
                let c = *slot;
                *slot = acc;
                acc += c;
            }
        }));
    }
    executor.run(tasks);

    total
}
