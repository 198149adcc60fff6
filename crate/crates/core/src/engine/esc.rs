//! Expand-sort-contract for scatter-producing kernels.
//!
//! Kernels that reduce over a contracted variable scatter into their output.
//! Instead of synchronizing scattered writes, the engine materializes every
//! partial product as an (output coordinate, value) record, sorts the
//! records by output coordinate with a stable sort, and sums adjacent equal
//! runs left to right. The stable sort keeps records of one output
//! coordinate in expansion order, so the summation order (and thus the
//! floating-point result) is independent of how the expansion was
//! partitioned.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::exec::Executor;
use crate::storage::{Coord, Value};

/// Flat record buffer: `width` coordinates per record plus one value.
#[derive(Debug, Clone, Default)]
pub struct EscBuffer {
    pub width: usize,
    pub keys: Vec<Coord>,
    pub vals: Vec<Value>,
}

impl EscBuffer {
    pub fn with_capacity(width: usize, records: usize) -> EscBuffer {
        EscBuffer {
            width,
            keys: Vec::with_capacity(width * records),
            vals: Vec::with_capacity(records),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn key(&self, i: usize) -> &[Coord] {
        &self.keys[i * self.width..(i + 1) * self.width]
    }

    pub fn push(&mut self, key: &[Coord], val: Value) {
        debug_assert_eq!(key.len(), self.width);
        self.keys.extend_from_slice(key);
        self.vals.push(val);
    }
}

/// Sort records by output coordinate and sum equal-coordinate runs left to
/// right. Returns canonical entries (zero sums dropped). Runs never split
/// across reduction tasks, so the result is identical for any executor.
pub fn esc_reduce(
    buf: &EscBuffer,
    workers: usize,
    executor: &dyn Executor,
) -> Vec<(Vec<Coord>, Value)> {
    let n = buf.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    // Stable by construction: ties keep expansion order via the index.
    order.sort_unstable_by(|&a, &b| buf.key(a as usize).cmp(buf.key(b as usize)).then(a.cmp(&b)));

    // Chunk the sorted records on run boundaries.
    let workers = workers.max(1).min(n);
    let mut cuts = Vec::with_capacity(workers + 1);
    cuts.push(0usize);
    for w in 1..workers {
        let mut at = w * n / workers;
        while at < n && at > 0 && buf.key(order[at] as usize) == buf.key(order[at - 1] as usize) {
            at += 1;
        }
        if at > *cuts.last().unwrap() && at < n {
            cuts.push(at);
        }
    }
    cuts.push(n);

    let tasks_n = cuts.len() - 1;
    let mut partials: Vec<Vec<(Vec<Coord>, Value)>> = vec![Vec::new(); tasks_n];
    {
        let mut tasks: Vec<Box<dyn FnOnce() + Send + '_>> = Vec::with_capacity(tasks_n);
        let mut rest = &mut partials[..];
        for t in 0..tasks_n {
            let (slot, tail) = rest.split_first_mut().unwrap();
            rest = tail;
            let lo = cuts[t];
            let hi = cuts[t + 1];
            let order = &order;
            tasks.push(Box::new(move || {
                let mut out: Vec<(Vec<Coord>, Value)> = Vec::new();
                let mut i = lo;
                while i < hi {
                    let key = buf.key(order[i] as usize);
                    let mut acc = buf.vals[order[i] as usize];
                    let mut j = i + 1;
                    while j < hi && buf.key(order[j] as usize) == key {
                        acc += buf.vals[order[j] as usize];
                        j += 1;
                    }
                    if acc != 0.0 {
                        out.push((key.to_vec(), acc));
                    }
                    i = j;
                }
                *slot = out;
            }));
        }
        executor.run(tasks);
    }
    partials.into_iter().flatten().collect()
}

/// Fixed-shape pairwise summation: the split points depend only on the
/// slice length, so the result is bitwise identical no matter how the
/// values were produced or how many workers filled them in.
pub fn pairwise_sum(xs: &[Value]) -> Value {
    if xs.len() <= 32 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::SeqExecutor;
    use proptest::prelude::*;

    #[test]
    fn merges_duplicate_coordinates() {
        let mut buf = EscBuffer::with_capacity(2, 2);
        buf.push(&[0, 1], 2.0);
        buf.push(&[0, 1], 3.0);
        let out = esc_reduce(&buf, 4, &SeqExecutor);
        assert_eq!(out, vec![(vec![0, 1], 5.0)]);
    }

    #[test]
    fn distinct_records_sort_only() {
        let mut buf = EscBuffer::with_capacity(2, 3);
        buf.push(&[1, 0], 1.0);
        buf.push(&[0, 2], 2.0);
        buf.push(&[0, 1], 3.0);
        let out = esc_reduce(&buf, 2, &SeqExecutor);
        assert_eq!(
            out,
            vec![(vec![0, 1], 3.0), (vec![0, 2], 2.0), (vec![1, 0], 1.0)]
        );
    }

    proptest! {
        #[test]
        fn reduction_independent_of_worker_count(
            recs in proptest::collection::vec(((0i64..6, 0i64..6), -2.0f64..2.0), 0..200)
        ) {
            let mut buf = EscBuffer::with_capacity(2, recs.len());
            for ((i, j), v) in &recs {
                buf.push(&[*i, *j], *v);
            }
            let base = esc_reduce(&buf, 1, &SeqExecutor);
            for w in [2usize, 3, 8, 64] {
                let got = esc_reduce(&buf, w, &SeqExecutor);
                prop_assert_eq!(&got, &base);
            }
        }

        #[test]
        fn pairwise_close_to_serial(xs in proptest::collection::vec(-1e6f64..1e6, 0..500)) {
            let serial: f64 = xs.iter().sum();
            let pair = pairwise_sum(&xs);
            let scale = xs.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
            prop_assert!(((serial - pair) / scale).abs() < 1e-12);
        }
    }
}
