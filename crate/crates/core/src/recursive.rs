//! Staged partitioning for nested sparse intersections.
//!
//! An intersection above the innermost loop skips entire inner subspaces,
//! so prefix counts over the raw structures overstate the work there. This
//! module detects the outermost such intersection, coiterates it once (load
//! balanced over the already-sound prefix of the loop nest) to tabulate the
//! surviving coordinates and their true inner costs, prefix-sums that table
//! into a remapped cost function, and rewrites the expression so the
//! surviving coordinates become a dense leading variable backed by the
//! table. Repeating until no outer intersection remains yields a staged
//! plan whose final stage partitions against costs that count only the
//! work that actually runs.

use alloc::boxed::Box;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::engine::walk::{self, OpHit, PointSink};
use crate::error::Error;
use crate::exec::Executor;
use crate::expr::{
    Binding, CostContext, Expression, LoopDim, MergeMode, OpCursor, Operand, RemapTable,
};
use crate::partition::{make_partitions, PartitionSet};
use crate::scan::exclusive_scan_inplace;
use crate::storage::{Coord, Tensor};
use crate::Result;

/// Outermost non-innermost variable intersecting two or more sparse levels,
/// if any. Such a variable hierarchically skips inner work and needs a
/// remap stage before plain partitioning applies.
pub fn find_outermost_sparse_intersection(expr: &Expression) -> Option<usize> {
    (0..expr.num_dims() - 1)
        .find(|&m| expr.mode(m) == MergeMode::Intersection && expr.sparse_binders(m) >= 2)
}

/// Descend an operand's leading levels by original coordinates, recording
/// the lower-bound position at each fixed level. Levels whose coordinate
/// slot lies at or beyond `prefix_width` stay unfixed.
fn anchor_cursor(op: &Operand, coords: &[Coord], prefix_width: usize) -> OpCursor {
    let tensor = &op.tensor;
    let mut cursor = OpCursor {
        next_level: 0,
        lo: 0,
        hi: tensor.level(0).position_count(1),
        cut: Vec::new(),
    };
    for k in 0..op.rank() {
        if op.coord_of_level[k] >= prefix_width {
            break;
        }
        let x = coords[op.coord_of_level[k]];
        let (p_lo, p_hi) = crate::cost::equal_range(tensor.level(k), x, &cursor, &mut 0);
        cursor.cut.push(p_lo);
        crate::cost::descend(tensor, &mut cursor, p_lo, p_hi);
    }
    cursor
}

/// The expression restricted to variables `0..=m`: operands keep only the
/// levels bound there, and the kept leaf positions become the counted
/// cost. Used to load-balance the survivor scan itself.
fn prefix_expression(expr: &Expression, m: usize) -> Result<Expression> {
    let mut dims: Vec<LoopDim> = expr.dims()[..=m].to_vec();
    if let Some(table) = expr.table(0) {
        // The inherited table prices full subtrees; re-price it to the
        // truncated operands so the scan's costs stay hierarchically
        // consistent.
        let mut truncated = RemapTable {
            width: table.width,
            collapsed_extents: table.collapsed_extents.clone(),
            coords: table.coords.clone(),
            prefix: Vec::with_capacity(table.survivors() + 1),
            seeds: table.seeds.clone(),
        };
        let mut acc = 0i64;
        truncated.prefix.push(0);
        for seed in table.seeds.iter().take(table.survivors()) {
            for (op_idx, fresh) in seed.iter().enumerate() {
                let op = &expr.operands()[op_idx];
                let keep = op
                    .coord_of_level
                    .iter()
                    .take_while(|&&slot| slot < prefix_slot_width(expr, m))
                    .count();
                acc += truncated_leaves(&op.tensor, keep, fresh);
            }
            truncated.prefix.push(acc);
        }
        dims[0].table = Some(Arc::new(truncated));
    }
    let operands: Vec<Operand> = expr
        .operands()
        .iter()
        .map(|op| {
            let keep = op
                .coord_of_level
                .iter()
                .take_while(|&&slot| slot < prefix_slot_width(expr, m))
                .count();
            let tensor = truncate_tensor(&op.tensor, keep);
            Operand {
                tensor: Arc::new(tensor),
                bindings: op.bindings[..keep].to_vec(),
                coord_of_level: op.coord_of_level[..keep].to_vec(),
            }
        })
        .collect();
    let output = expr.output()[..prefix_slot_width(expr, m)].to_vec();
    Expression::assemble(dims, operands, expr.combine(), output)
}

/// Coordinate-slot width covered by variables `0..=m`.
fn prefix_slot_width(expr: &Expression, m: usize) -> usize {
    expr.coord_span(0) + m
}

fn truncated_leaves(tensor: &Tensor, keep: usize, cursor: &OpCursor) -> i64 {
    if cursor.next_level >= keep {
        // Every kept level is fixed: at most the one anchored path remains.
        return i64::from(cursor.hi > cursor.lo);
    }
    let start = truncate_leaf_start(tensor, keep, cursor.next_level, cursor.lo);
    let end = truncate_leaf_start(tensor, keep, cursor.next_level, cursor.hi);
    end - start
}

/// Leaf offset within the first `keep` levels (positions of level
/// `keep - 1`) below position `p` of level `lvl`.
fn truncate_leaf_start(tensor: &Tensor, keep: usize, lvl: usize, p: i64) -> i64 {
    let mut q = p;
    for k in (lvl + 1)..keep {
        q = tensor.level(k).child_start(q);
    }
    q
}

fn truncate_tensor(tensor: &Tensor, keep: usize) -> Tensor {
    if keep == tensor.rank() {
        return tensor.clone();
    }
    let shape = tensor.shape()[..keep].to_vec();
    let levels = tensor.levels()[..keep].to_vec();
    let mut parents = 1i64;
    for level in &levels {
        parents = level.position_count(parents);
    }
    Tensor::from_parts(shape, levels, vec![0.0; parents as usize])
        .expect("truncated tensor must stay valid")
}

struct Survivors {
    coords: Vec<Coord>,
    inner_costs: Vec<i64>,
    seeds: Vec<Vec<OpCursor>>,
}

struct SurvivorSink<'a> {
    expr: &'a Expression,
    m: usize,
    width: usize,
    out: Survivors,
}

impl<'a> PointSink for SurvivorSink<'a> {
    fn point(&mut self, coords: &[Coord], _hits: &[OpHit]) {
        let anchors: Vec<OpCursor> = self
            .expr
            .operands()
            .iter()
            .map(|op| anchor_cursor(op, coords, self.width))
            .collect();
        let mut ctx = CostContext {
            ops: anchors.clone(),
            probes: Default::default(),
        };
        let inner = self
            .expr
            .dim_cost(self.m + 1, self.expr.extent(self.m + 1), &mut ctx);
        self.out.coords.extend_from_slice(&coords[..self.width]);
        self.out.inner_costs.push(inner);
        self.out.seeds.push(anchors);
    }
}

/// Full remap computation: the table plus the scan expression and the
/// partitions used to produce it (recorded in staged plans).
pub fn compute_remap_full(
    expr: &Expression,
    m: usize,
    p: usize,
    executor: &dyn Executor,
) -> Result<(Arc<RemapTable>, Expression, PartitionSet)> {
    if expr.mode(m) != MergeMode::Intersection || expr.sparse_binders(m) < 2 {
        return Err(Error::InvalidExpression(
            "remap requires a sparse intersection variable".to_string(),
        ));
    }
    let width = prefix_slot_width(expr, m);
    let scan_expr = prefix_expression(expr, m)?;
    let parts = make_partitions(&scan_expr, p, executor)?;

    let workers = parts.workers;
    let mut slots: Vec<Survivors> = (0..workers)
        .map(|_| Survivors { coords: Vec::new(), inner_costs: Vec::new(), seeds: Vec::new() })
        .collect();
    {
        let mut tasks: Vec<alloc::boxed::Box<dyn FnOnce() + Send + '_>> =
            Vec::with_capacity(workers);
        let mut rest = &mut slots[..];
        for w in 0..workers {
            let (slot, tail) = rest.split_first_mut().unwrap();
            rest = tail;
            let scan_expr = &scan_expr;
            let lo = &parts.boundaries[w];
            let hi = &parts.boundaries[w + 1];
            tasks.push(Box::new(move || {
                let mut sink = SurvivorSink {
                    expr,
                    m,
                    width,
                    out: Survivors {
                        coords: Vec::new(),
                        inner_costs: Vec::new(),
                        seeds: Vec::new(),
                    },
                };
                walk::walk(
                    scan_expr,
                    walk::Range { lo: &lo.var_coord, hi: &hi.var_coord },
                    &mut sink,
                );
                *slot = sink.out;
            }));
        }
        executor.run(tasks);
    }

    // Concatenate in worker order: partitions tile the space in
    // lexicographic order, so the table is identical for every P.
    let mut coords = Vec::new();
    let mut costs = Vec::new();
    let mut seeds = Vec::new();
    for s in slots {
        coords.extend(s.coords);
        costs.extend(s.inner_costs);
        seeds.extend(s.seeds);
    }
    let survivors = costs.len();
    let total = exclusive_scan_inplace(&mut costs, executor);
    let mut prefix = costs;
    prefix.push(total);

    let collapsed_extents = expr.output_shape()[..width].to_vec();
    // Trailing seed: cursors anchored one past everything, so boundaries at
    // the end of the remapped space resolve to array ends.
    let end_anchor: Vec<OpCursor> = expr
        .operands()
        .iter()
        .map(|op| anchor_cursor(op, &collapsed_extents, width))
        .collect();
    seeds.push(end_anchor);

    let table = Arc::new(RemapTable { width, collapsed_extents, coords, prefix, seeds });
    debug_assert_eq!(table.survivors(), survivors);
    Ok((table, scan_expr, parts))
}

/// Tabulate the surviving coordinates of intersection variable `m` and the
/// exclusive prefix sum of their inner costs. Deterministic for any worker
/// count.
pub fn compute_remap(
    expr: &Expression,
    m: usize,
    p: usize,
    executor: &dyn Executor,
) -> Result<Arc<RemapTable>> {
    compute_remap_full(expr, m, p, executor).map(|(t, _, _)| t)
}

/// Rewrite `expr` so variables `0..=m` collapse into one dense variable
/// over the table's survivors, with dimension-0 costs answered by the
/// prefix table and operand cursors re-seeded per survivor.
pub fn remap_expression(expr: &Expression, m: usize, table: &Arc<RemapTable>) -> Result<Expression> {
    if expr.mode(m) != MergeMode::Intersection || expr.sparse_binders(m) < 2 {
        return Err(Error::InvalidExpression(
            "only sparse intersection variables can be remapped".to_string(),
        ));
    }
    if m + 1 >= expr.num_dims() {
        return Err(Error::InvalidExpression(
            "innermost intersections need no remapping".to_string(),
        ));
    }
    let mut dims = Vec::with_capacity(expr.num_dims() - m);
    dims.push(LoopDim {
        extent: table.survivors() as Coord,
        mode: MergeMode::Union,
        table: Some(table.clone()),
    });
    dims.extend_from_slice(&expr.dims()[m + 1..]);

    let operands: Vec<Operand> = expr
        .operands()
        .iter()
        .map(|op| {
            let bindings = op
                .bindings
                .iter()
                .map(|b| match b {
                    Binding::Collapsed => Binding::Collapsed,
                    Binding::Var(v) if *v <= m => Binding::Collapsed,
                    Binding::Var(v) => Binding::Var(v - m),
                })
                .collect();
            Operand {
                tensor: op.tensor.clone(),
                bindings,
                coord_of_level: op.coord_of_level.clone(),
            }
        })
        .collect();

    Expression::assemble(dims, operands, expr.combine(), expr.output().to_vec())
}

/// One stage of a staged plan.
#[derive(Debug, Clone)]
pub struct Stage {
    /// The expression this stage's partitions refer to (the survivor-scan
    /// prefix expression for remap stages, the fully remapped expression
    /// for the final stage).
    pub expr: Expression,
    pub partitions: PartitionSet,
    pub kind: StageKind,
}

#[derive(Debug, Clone)]
pub enum StageKind {
    /// Survivor scan for intersection variable `dim`, producing `table`.
    Remap { dim: usize, table: Arc<RemapTable> },
    /// Plain hierarchical partitioning of the remaining loop nest.
    Final,
}

/// A sequence of load-balanced stages ending in the compute stage.
#[derive(Debug, Clone)]
pub struct StagedPlan {
    pub stages: Vec<Stage>,
}

impl StagedPlan {
    pub fn final_stage(&self) -> &Stage {
        self.stages.last().expect("plans have a final stage")
    }
}

/// Stage the expression: one remap stage per non-innermost sparse
/// intersection (outermost first), then plain partitioning of the rest.
pub fn partition_recursive(
    expr: &Expression,
    p: usize,
    executor: &dyn Executor,
) -> Result<StagedPlan> {
    let mut stages = Vec::new();
    let mut current = expr.clone();
    while let Some(m) = find_outermost_sparse_intersection(&current) {
        let (table, scan_expr, parts) = compute_remap_full(&current, m, p, executor)?;
        stages.push(Stage {
            expr: scan_expr,
            partitions: parts,
            kind: StageKind::Remap { dim: m, table: table.clone() },
        });
        current = remap_expression(&current, m, &table)?;
    }
    let parts = make_partitions(&current, p, executor)?;
    stages.push(Stage { expr: current, partitions: parts, kind: StageKind::Final });
    Ok(StagedPlan { stages })
}
