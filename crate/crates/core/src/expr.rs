//! Expression IR: loop-ordered index variables over tensor operands.
//!
//! An expression fixes a loop order over `d` index variables; every level of
//! every operand is bound to exactly one variable, in an order consistent
//! with the operand's level order. A variable absent from an operand is a
//! broadcast dimension for it: the operand is re-traversed once per
//! coordinate of that variable, which the cost model accounts for with the
//! full extent of the broadcast dimension.
//!
//! Expressions produced by remapping (see [`crate::recursive`]) replace the
//! leading variables with a single dense variable ranging over the surviving
//! coordinates of a sparse intersection; such a variable carries a
//! [`RemapTable`] that answers its cost queries from a prefix-summed table
//! and re-seeds operand cursors per surviving coordinate.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::storage::{Coord, LevelKind, Pos, Tensor};
use crate::Result;

/// Whether a loop variable visits the union or the intersection of the
/// operand coordinates bound to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    Union,
    Intersection,
}

/// Value combinator applied at matched iteration points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    /// Sum of the values of present operands (absent contributes nothing).
    Add,
    /// Product over all operands; only evaluated where the merge visits.
    Multiply,
}

/// Binding of one tensor level to a loop variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Bound to loop variable `v` of this expression.
    Var(usize),
    /// Folded into the remapped leading variable; the variable's table
    /// re-seeds this level's cursor per surviving coordinate.
    Collapsed,
}

/// One tensor operand with its per-level variable bindings.
#[derive(Debug, Clone)]
pub struct Operand {
    pub tensor: Arc<Tensor>,
    pub bindings: Vec<Binding>,
    /// Index into the original coordinate tuple for each level; invariant
    /// under remapping, so survivor anchors can always re-descend by
    /// original coordinates.
    pub coord_of_level: Vec<usize>,
}

impl Operand {
    pub fn new(tensor: Arc<Tensor>, vars: &[usize]) -> Operand {
        Operand {
            tensor,
            bindings: vars.iter().map(|&v| Binding::Var(v)).collect(),
            coord_of_level: vars.to_vec(),
        }
    }

    pub fn rank(&self) -> usize {
        self.bindings.len()
    }

    /// Level bound to variable `v`, if any.
    pub fn level_of_var(&self, v: usize) -> Option<usize> {
        self.bindings.iter().position(|b| *b == Binding::Var(v))
    }
}

/// Prefix-summed cost table over the surviving coordinates of an outer
/// sparse intersection, plus per-survivor cursor seeds so later stages can
/// resume inner coiteration without re-searching.
#[derive(Debug, Clone)]
pub struct RemapTable {
    /// How many original dimensions this table collapses.
    pub width: usize,
    /// Extents of the collapsed original dimensions.
    pub collapsed_extents: Vec<Coord>,
    /// Original coordinates of the collapsed dimensions, `width` per
    /// survivor, lexicographically sorted.
    pub coords: Vec<Coord>,
    /// Exclusive prefix sum of per-survivor inner costs; `prefix[k+1] -
    /// prefix[k]` is the inner-loop cost of survivor `k`, `prefix[len]` the
    /// total.
    pub prefix: Vec<i64>,
    /// Per survivor (plus one trailing end-of-space seed), per operand: the
    /// cursor positioned just after fixing the collapsed coordinates.
    pub seeds: Vec<Vec<OpCursor>>,
}

impl RemapTable {
    pub fn survivors(&self) -> usize {
        self.seeds.len() - 1
    }

    pub fn total(&self) -> i64 {
        *self.prefix.last().unwrap_or(&0)
    }

    pub fn survivor_coords(&self, k: usize) -> &[Coord] {
        &self.coords[k * self.width..(k + 1) * self.width]
    }
}

/// One loop variable: extent, merge mode, and (for remapped variables) the
/// cost table.
#[derive(Debug, Clone)]
pub struct LoopDim {
    pub extent: Coord,
    pub mode: MergeMode,
    pub table: Option<Arc<RemapTable>>,
}

impl LoopDim {
    pub fn new(extent: Coord, mode: MergeMode) -> LoopDim {
        LoopDim { extent, mode, table: None }
    }
}

/// Cursor of one operand during a hierarchical descent: the next level to
/// fix and the window of its positions compatible with the coordinates
/// fixed so far. `next_level == rank` means fully descended; the window is
/// then a leaf range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpCursor {
    pub next_level: usize,
    pub lo: Pos,
    pub hi: Pos,
    /// Lower-bound position recorded at each fixed level.
    pub cut: Vec<Pos>,
}

impl OpCursor {
    fn root(tensor: &Tensor) -> OpCursor {
        OpCursor {
            next_level: 0,
            lo: 0,
            hi: tensor.level(0).position_count(1),
            cut: Vec::new(),
        }
    }

    /// Leaves reachable under the current window.
    pub fn leaves(&self, tensor: &Tensor) -> i64 {
        if self.next_level >= tensor.rank() {
            self.hi - self.lo
        } else {
            tensor.leaf_start(self.next_level, self.hi) - tensor.leaf_start(self.next_level, self.lo)
        }
    }
}

/// Probe counters for complexity accounting: `cost_evals` counts cost
/// function evaluations, `crd_probes` coordinate comparisons inside binary
/// searches over operand structures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProbeCounters {
    pub cost_evals: u64,
    pub crd_probes: u64,
}

/// Per-search state threaded through cost queries: one cursor per operand.
#[derive(Debug, Clone)]
pub struct CostContext {
    pub ops: Vec<OpCursor>,
    pub probes: ProbeCounters,
}

/// A loop-ordered expression over tensor operands.
#[derive(Debug, Clone)]
pub struct Expression {
    dims: Vec<LoopDim>,
    operands: Vec<Operand>,
    combine: Combine,
    output: Vec<LevelKind>,
    /// (operand, level) pairs bound to each variable.
    binders: Vec<Vec<(usize, usize)>>,
    /// Broadcast multiplier per operand and variable: product of extents of
    /// the variables after `m` that the operand does not bind.
    mult_after: Vec<Vec<i64>>,
    /// Upper bound on the innermost adjacent-coordinate cost jump.
    delta_innermost: i64,
    /// Width of the coordinate tuples the walker reports (original rank).
    coord_width: usize,
}

impl Expression {
    pub fn new(
        dims: Vec<LoopDim>,
        operands: Vec<Operand>,
        combine: Combine,
        output: Vec<LevelKind>,
    ) -> Result<Expression> {
        if dims.is_empty() {
            return Err(Error::InvalidExpression("expression needs at least one variable".into()));
        }
        for dim in &dims {
            if dim.extent < 0 {
                return Err(Error::InvalidExpression("negative extent".into()));
            }
            if dim.table.is_some() {
                return Err(Error::InvalidExpression(
                    "remapped variables are introduced by remap_expression".into(),
                ));
            }
        }
        for (i, op) in operands.iter().enumerate() {
            if op.bindings.len() != op.tensor.rank() {
                return Err(Error::RankMismatch {
                    expected: op.tensor.rank(),
                    got: op.bindings.len(),
                });
            }
            let mut prev: Option<usize> = None;
            for (k, b) in op.bindings.iter().enumerate() {
                let v = match b {
                    Binding::Var(v) => *v,
                    Binding::Collapsed => {
                        return Err(Error::InvalidExpression(
                            "collapsed bindings are introduced by remap_expression".into(),
                        ))
                    }
                };
                if v >= dims.len() {
                    return Err(Error::InvalidExpression(format!(
                        "operand {i} binds unknown variable {v}"
                    )));
                }
                if let Some(p) = prev {
                    if v <= p {
                        return Err(Error::InvalidExpression(format!(
                            "operand {i} level order is inconsistent with the loop order"
                        )));
                    }
                }
                prev = Some(v);
                if op.tensor.shape()[k] != dims[v].extent {
                    return Err(Error::ShapeMismatch(format!(
                        "operand {i} level {k} extent {} != variable {v} extent {}",
                        op.tensor.shape()[k],
                        dims[v].extent
                    )));
                }
            }
        }
        Expression::assemble(dims, operands, combine, output)
    }

    /// Internal constructor shared with `remap_expression`; skips the
    /// user-input checks that remapping re-establishes by construction.
    pub(crate) fn assemble(
        dims: Vec<LoopDim>,
        operands: Vec<Operand>,
        combine: Combine,
        output: Vec<LevelKind>,
    ) -> Result<Expression> {
        let d = dims.len();
        let mut binders: Vec<Vec<(usize, usize)>> = vec![Vec::new(); d];
        for (i, op) in operands.iter().enumerate() {
            for (k, b) in op.bindings.iter().enumerate() {
                if let Binding::Var(v) = b {
                    binders[*v].push((i, k));
                }
            }
        }
        for (m, dim) in dims.iter().enumerate() {
            if binders[m].is_empty() && dim.table.is_none() {
                return Err(Error::InvalidExpression(format!(
                    "variable {m} is bound by no operand"
                )));
            }
            if dim.mode == MergeMode::Intersection
                && !binders[m]
                    .iter()
                    .any(|&(i, k)| operands[i].tensor.level(k).kind().is_sparse())
            {
                return Err(Error::InvalidExpression(format!(
                    "variable {m} intersects but no operand accesses it sparsely"
                )));
            }
        }

        let mut mult_after = vec![vec![1i64; d]; operands.len()];
        for (i, op) in operands.iter().enumerate() {
            let bound: Vec<bool> = {
                let mut b = vec![false; d];
                for binding in &op.bindings {
                    if let Binding::Var(v) = binding {
                        b[*v] = true;
                    }
                }
                b
            };
            for m in (0..d).rev() {
                let next = if m + 1 < d { mult_after[i][m + 1] } else { 1 };
                let own = if m + 1 < d && !bound[m + 1] { dims[m + 1].extent } else { 1 };
                mult_after[i][m] = next * own;
            }
        }

        // Innermost jump: one leaf per coordinate for operands bound at the
        // innermost variable through their last level (times the duplicate
        // run length for non-unique last levels), one leaf total for
        // operands broadcast there.
        let innermost = d - 1;
        let mut delta = 0i64;
        for op in &operands {
            let contribution = match op.bindings.last() {
                Some(Binding::Var(v)) if *v == innermost => op.tensor.last_level_max_run(),
                _ => 1,
            };
            delta += contribution;
        }

        let coord_width = dims
            .first()
            .and_then(|dim| dim.table.as_ref())
            .map(|t| t.width)
            .unwrap_or(1)
            + d
            - 1;
        // Plain expressions report one coordinate per variable.
        let coord_width = if dims[0].table.is_some() { coord_width } else { d };

        Ok(Expression {
            dims,
            operands,
            combine,
            output,
            binders,
            mult_after,
            delta_innermost: delta,
            coord_width,
        })
    }

    pub fn dims(&self) -> &[LoopDim] {
        &self.dims
    }

    pub fn num_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn extent(&self, m: usize) -> Coord {
        self.dims[m].extent
    }

    pub fn mode(&self, m: usize) -> MergeMode {
        self.dims[m].mode
    }

    pub fn table(&self, m: usize) -> Option<&Arc<RemapTable>> {
        self.dims[m].table.as_ref()
    }

    pub fn operands(&self) -> &[Operand] {
        &self.operands
    }

    pub fn combine(&self) -> Combine {
        self.combine
    }

    pub fn output(&self) -> &[LevelKind] {
        &self.output
    }

    pub fn binders(&self, m: usize) -> &[(usize, usize)] {
        &self.binders[m]
    }

    pub fn mult_after(&self, op: usize, m: usize) -> i64 {
        self.mult_after[op][m]
    }

    /// Width of the coordinate tuples reported to sinks and stored in
    /// boundaries (the original rank for remapped expressions).
    pub fn coord_width(&self) -> usize {
        self.coord_width
    }

    /// Extents of the output dimensions, in original coordinates.
    pub fn output_shape(&self) -> alloc::vec::Vec<Coord> {
        let mut shape = alloc::vec::Vec::with_capacity(self.coord_width);
        match self.dims[0].table.as_ref() {
            Some(table) => shape.extend_from_slice(&table.collapsed_extents),
            None => shape.push(self.dims[0].extent),
        }
        for dim in &self.dims[1..] {
            shape.push(dim.extent);
        }
        shape
    }

    /// Count of sparse levels bound to variable `m`.
    pub fn sparse_binders(&self, m: usize) -> usize {
        self.binders[m]
            .iter()
            .filter(|&&(i, k)| self.operands[i].tensor.level(k).kind().is_sparse())
            .count()
    }

    pub fn fresh_context(&self) -> CostContext {
        CostContext {
            ops: self
                .operands
                .iter()
                .map(|op| OpCursor::root(&op.tensor))
                .collect(),
            probes: ProbeCounters::default(),
        }
    }

    /// Upper bound on `C_m(x+1) - C_m(x)` at the innermost variable.
    pub fn delta_max(&self) -> i64 {
        self.delta_innermost
    }

    /// Translate a walker coordinate slot back to the original coordinate
    /// tuple prefix width for variable `m` (remapped variable 0 expands to
    /// `table.width` coordinates).
    pub fn coord_span(&self, m: usize) -> usize {
        if m == 0 {
            self.dims[0].table.as_ref().map(|t| t.width).unwrap_or(1)
        } else {
            1
        }
    }
}
