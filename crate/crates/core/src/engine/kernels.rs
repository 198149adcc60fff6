//! Kernel drivers: element-wise expressions, matrix products, inner
//! products, and their expression builders.

use alloc::boxed::Box;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::engine::esc::{esc_reduce, pairwise_sum, EscBuffer};
use crate::engine::output::{assemble, compute, reconcile};
use crate::engine::walk::{self, OpHit, PointSink};
use crate::error::Error;
use crate::exec::Executor;
use crate::expr::{Combine, Expression, LoopDim, MergeMode, Operand};
use crate::recursive::{partition_recursive, StagedPlan};
use crate::scan::exclusive_scan;
use crate::storage::{Coord, CooEntries, LevelKind, Tensor};
use crate::Result;

/// Element-wise expression over equal-shaped operands: `Add` merges the
/// union of supports, `Multiply` the intersection wherever some operand is
/// sparse in that dimension.
pub fn elementwise_expr(
    tensors: &[Arc<Tensor>],
    combine: Combine,
    output: Vec<LevelKind>,
) -> Result<Expression> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one operand".to_string()))?;
    let shape = first.shape().to_vec();
    for t in tensors {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch("element-wise operands must share a shape".to_string()));
        }
    }
    let rank = shape.len();
    let vars: Vec<usize> = (0..rank).collect();
    let operands: Vec<Operand> = tensors.iter().map(|t| Operand::new(t.clone(), &vars)).collect();
    let dims: Vec<LoopDim> = shape
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            let sparse_there = tensors.iter().any(|t| t.level(m).kind().is_sparse());
            let mode = match combine {
                Combine::Add => MergeMode::Union,
                Combine::Multiply if sparse_there => MergeMode::Intersection,
                Combine::Multiply => MergeMode::Union,
            };
            LoopDim::new(n, mode)
        })
        .collect();
    Expression::new(dims, operands, combine, output)
}

/// Per-stage wall work counters for one executed plan.
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    /// Sparse leaf positions consumed by each worker of the final stage.
    pub visited: Vec<u64>,
    /// Output leaves counted by each worker of the final stage.
    pub leaf_counts: Vec<i64>,
}

/// Execute a staged plan: assemble, scan, allocate, and compute the final
/// stage (remap stages already ran while planning). Output is identical
/// for every worker count.
pub fn run(plan: &StagedPlan, executor: &dyn Executor) -> Result<(Tensor, RunStats)> {
    let stage = plan.final_stage();
    let counts = assemble(&stage.expr, &stage.partitions, executor)?;
    let offsets = reconcile(&stage.expr, &stage.partitions, &counts)?;
    let (tensor, stats) = compute(&stage.expr, &stage.partitions, &offsets, executor)?;
    Ok((
        tensor,
        RunStats {
            visited: stats.iter().map(|s| s.leaf_consumed).collect(),
            leaf_counts: counts.leaf_counts(),
        },
    ))
}

/// Plan and execute an element-wise kernel.
pub fn elementwise(
    tensors: &[Arc<Tensor>],
    combine: Combine,
    output: Vec<LevelKind>,
    workers: usize,
    executor: &dyn Executor,
) -> Result<(Tensor, StagedPlan, RunStats)> {
    let expr = elementwise_expr(tensors, combine, output)?;
    let plan = partition_recursive(&expr, workers, executor)?;
    let (tensor, stats) = run(&plan, executor)?;
    Ok((tensor, plan, stats))
}

/// Ground-truth single-threaded evaluation of the same expression.
pub fn sequential_reference(expr: &Expression) -> Result<Tensor> {
    crate::engine::output::sequential_reference(expr)
}

struct CountSink {
    points: i64,
}

impl PointSink for CountSink {
    fn point(&mut self, _coords: &[Coord], _hits: &[OpHit]) {
        self.points += 1;
    }
}

struct ExpandSink<'a, 's> {
    expr: &'a Expression,
    key_slots: &'a [usize],
    key_buf: Vec<Coord>,
    keys: &'s mut [Coord],
    vals: &'s mut [f64],
    at: usize,
}

impl<'a, 's> PointSink for ExpandSink<'a, 's> {
    fn point(&mut self, coords: &[Coord], hits: &[OpHit]) {
        let mut acc = 1.0;
        for (op, hit) in self.expr.operands().iter().zip(hits) {
            debug_assert!(hit.present);
            acc *= op.tensor.vals()[hit.leaf as usize];
        }
        for (slot, &s) in self.key_buf.iter_mut().zip(self.key_slots) {
            *slot = coords[s];
        }
        let w = self.key_slots.len();
        self.keys[self.at * w..(self.at + 1) * w].copy_from_slice(&self.key_buf);
        self.vals[self.at] = acc;
        self.at += 1;
    }
}

/// Materialize all partial products of a plan's final stage as records
/// keyed by the coordinates in `key_slots`.
fn expand(
    plan: &StagedPlan,
    key_slots: &[usize],
    executor: &dyn Executor,
) -> Result<EscBuffer> {
    let stage = plan.final_stage();
    let expr = &stage.expr;
    let ps = &stage.partitions;
    let workers = ps.workers;

    let mut counts = vec![0i64; workers];
    {
        let mut tasks: Vec<Box<dyn FnOnce() + Send + '_>> = Vec::with_capacity(workers);
        let mut rest = &mut counts[..];
        for w in 0..workers {
            let (slot, tail) = rest.split_first_mut().unwrap();
            rest = tail;
            let lo = &ps.boundaries[w];
            let hi = &ps.boundaries[w + 1];
            tasks.push(Box::new(move || {
                let mut sink = CountSink { points: 0 };
                walk::walk(expr, walk::Range { lo: &lo.var_coord, hi: &hi.var_coord }, &mut sink);
                *slot = sink.points;
            }));
        }
        executor.run(tasks);
    }
    let (bases, total) = exclusive_scan(&counts);

    let width = key_slots.len();
    let mut buf = EscBuffer {
        width,
        keys: vec![0; total as usize * width],
        vals: vec![0.0; total as usize],
    };
    {
        let mut tasks: Vec<Box<dyn FnOnce() + Send + '_>> = Vec::with_capacity(workers);
        let mut keys_rest = &mut buf.keys[..];
        let mut vals_rest = &mut buf.vals[..];
        for w in 0..workers {
            let take = counts[w] as usize;
            let (key_chunk, ktail) = keys_rest.split_at_mut(take * width);
            keys_rest = ktail;
            let (val_chunk, vtail) = vals_rest.split_at_mut(take);
            vals_rest = vtail;
            let _ = bases[w];
            let lo = &ps.boundaries[w];
            let hi = &ps.boundaries[w + 1];
            tasks.push(Box::new(move || {
                let mut sink = ExpandSink {
                    expr,
                    key_slots,
                    key_buf: vec![0; width],
                    keys: key_chunk,
                    vals: val_chunk,
                    at: 0,
                };
                walk::walk(expr, walk::Range { lo: &lo.var_coord, hi: &hi.var_coord }, &mut sink);
                debug_assert_eq!(sink.at, take);
            }));
        }
        executor.run(tasks);
    }
    Ok(buf)
}

/// Sparse matrix product `C = A * B` over the expansion nest (i, k, j),
/// reduced with expand-sort-contract.
pub fn spgemm(
    a: &Arc<Tensor>,
    b: &Arc<Tensor>,
    workers: usize,
    executor: &dyn Executor,
) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::InvalidArgument("matrix product needs rank-2 operands".to_string()));
    }
    if a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch(alloc::format!(
            "inner dimensions disagree: {} vs {}",
            a.shape()[1],
            b.shape()[0]
        )));
    }
    let (rows, inner, cols) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let expr = Expression::new(
        vec![
            LoopDim::new(rows, MergeMode::Union),
            LoopDim::new(inner, MergeMode::Intersection),
            LoopDim::new(cols, MergeMode::Union),
        ],
        vec![Operand::new(a.clone(), &[0, 1]), Operand::new(b.clone(), &[1, 2])],
        Combine::Multiply,
        crate::storage::formats::csr(),
    )?;
    let plan = partition_recursive(&expr, workers, executor)?;
    let buf = expand(&plan, &[0, 2], executor)?;
    let entries = esc_reduce(&buf, workers, executor);
    let coo = CooEntries::new(vec![rows, cols], entries)?;
    Tensor::build(&coo, &crate::storage::formats::csr())
}

/// Sampled matrix product `D = S .* (A * B)`, fused: partial products are
/// only expanded where the sample pattern is present.
pub fn sssmm(
    s: &Arc<Tensor>,
    a: &Arc<Tensor>,
    b: &Arc<Tensor>,
    workers: usize,
    executor: &dyn Executor,
) -> Result<Tensor> {
    if s.rank() != 2 || a.rank() != 2 || b.rank() != 2 {
        return Err(Error::InvalidArgument("sampled product needs rank-2 operands".to_string()));
    }
    if a.shape()[1] != b.shape()[0] || s.shape()[0] != a.shape()[0] || s.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch("sampled product shapes disagree".to_string()));
    }
    let (rows, inner, cols) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let expr = Expression::new(
        vec![
            LoopDim::new(rows, MergeMode::Union),
            LoopDim::new(inner, MergeMode::Intersection),
            LoopDim::new(cols, MergeMode::Intersection),
        ],
        vec![
            Operand {
                tensor: s.clone(),
                bindings: vec![crate::expr::Binding::Var(0), crate::expr::Binding::Var(2)],
                coord_of_level: vec![0, 2],
            },
            Operand::new(a.clone(), &[0, 1]),
            Operand::new(b.clone(), &[1, 2]),
        ],
        Combine::Multiply,
        crate::storage::formats::csr(),
    )?;
    let plan = partition_recursive(&expr, workers, executor)?;
    let buf = expand(&plan, &[0, 2], executor)?;
    let entries = esc_reduce(&buf, workers, executor);
    let coo = CooEntries::new(vec![rows, cols], entries)?;
    Tensor::build(&coo, &crate::storage::formats::csr())
}

/// Full inner product: sum of element products over the intersection of
/// the supports. Partial products are materialized at prefix-summed
/// offsets and reduced with a fixed-shape pairwise sum, so the value is
/// bitwise identical for every worker count.
pub fn inner_product(
    a: &Arc<Tensor>,
    b: &Arc<Tensor>,
    workers: usize,
    executor: &dyn Executor,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch("inner product needs equal shapes".to_string()));
    }
    let rank = a.rank();
    let vars: Vec<usize> = (0..rank).collect();
    let dims: Vec<LoopDim> = a
        .shape()
        .iter()
        .enumerate()
        .map(|(m, &n)| {
            let sparse_there =
                a.level(m).kind().is_sparse() || b.level(m).kind().is_sparse();
            let mode = if sparse_there { MergeMode::Intersection } else { MergeMode::Union };
            LoopDim::new(n, mode)
        })
        .collect();
    let expr = Expression::new(
        dims,
        vec![Operand::new(a.clone(), &vars), Operand::new(b.clone(), &vars)],
        Combine::Multiply,
        crate::storage::formats::csf(rank.max(1)),
    )?;
    let plan = partition_recursive(&expr, workers, executor)?;
    let key_slots: Vec<usize> = (0..expr.coord_width()).collect();
    let buf = expand(&plan, &key_slots, executor)?;
    Ok(pairwise_sum(&buf.vals))
}
