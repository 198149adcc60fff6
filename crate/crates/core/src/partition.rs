//! Hierarchical binary search over the coordinate space.
//!
//! A cut of the iteration space is described by a cost query `Q`: the search
//! walks the loop order outermost-in and, at each variable, binary searches
//! for the highest coordinate whose prefix cost stays within the residual
//! query, subtracts that cost, fixes the coordinate, and recurses into the
//! narrowed subspace. The returned boundary `x` satisfies
//! `0 <= Q - C(x) < delta_max`, so cuts taken at equally spaced queries
//! enclose equal costs up to `2 * delta_max`.
//!
//! Each per-variable search narrows the probe window of every bound operand
//! as it goes (positions found on the low side become lower bounds for
//! later probes, and symmetrically on the high side), so a full search
//! performs at most `sum_m ceil(log2(N_m + 1))` cost evaluations, each of
//! which is `O(#operands * log(nnz))`.
//!
//! Boundaries are half-open in lexicographic coordinate order: the cut for
//! query `Q` owns everything from the previous cut up to, but excluding,
//! its coordinate tuple. All cuts are independent, so a partition set can
//! be built by running every search concurrently.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::cost::NarrowWindow;
use crate::error::Error;
use crate::exec::Executor;
use crate::expr::{CostContext, Expression, ProbeCounters};
use crate::storage::{Coord, Pos};
use crate::Result;

/// One cut of the iteration space: the coordinate tuple and, per operand
/// and level, the position pointer at the cut.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionBoundary {
    /// Coordinate tuple in original coordinates (remapped leading variables
    /// are translated back; width is `expr.coord_width()`).
    pub coord: Vec<Coord>,
    /// Coordinate tuple in the expression's own variables (differs from
    /// `coord` only for remapped expressions).
    pub var_coord: Vec<Coord>,
    /// `positions[op][lvl]`: lower-bound position of this cut within the
    /// window inherited from the levels above.
    pub positions: Vec<Vec<Pos>>,
    /// Enclosed cost `C(coord)` of everything below this cut.
    pub cost: i64,
    /// Probe counters spent finding this cut.
    pub probes: ProbeCounters,
}

/// `P + 1` boundaries tiling the iteration space for `P` workers.
#[derive(Debug, Clone)]
pub struct PartitionSet {
    pub boundaries: Vec<PartitionBoundary>,
    pub workers: usize,
    pub total_cost: i64,
}

impl PartitionSet {
    /// Cost enclosed by partition `p`.
    pub fn partition_cost(&self, p: usize) -> i64 {
        self.boundaries[p + 1].cost - self.boundaries[p].cost
    }
}

/// Largest `x` in `[0, extent]` with `C_m(x | ctx) <= r`, plus that cost.
///
/// The midpoint is biased up (`low + (high - low + 1) / 2`) so the loop
/// terminates on the `<=` predicate; `C_m(0) = 0 <= r` guarantees a
/// solution. Probe windows of the bound operands narrow monotonically: a
/// probe that fits moves the low fences to its positions, one that does
/// not moves the high fences.
pub fn highest_coordinate_leq_query(
    expr: &Expression,
    m: usize,
    r: i64,
    ctx: &mut CostContext,
) -> (Coord, i64) {
    debug_assert!(r >= 0);
    let n = expr.extent(m);

    if let Some(table) = expr.table(m) {
        let mut low = 0i64;
        let mut high = n;
        let mut cost_low = 0i64;
        while low < high {
            let mid = low + (high - low + 1) / 2;
            ctx.probes.cost_evals += 1;
            let cost = table.prefix[mid as usize];
            if cost <= r {
                low = mid;
                cost_low = cost;
            } else {
                high = mid - 1;
            }
        }
        return (low, cost_low);
    }

    let mut narrow: Vec<NarrowWindow> = expr
        .binders(m)
        .iter()
        .map(|&(i, _)| NarrowWindow { lo: ctx.ops[i].lo, hi: ctx.ops[i].hi })
        .collect();

    let mut low: Coord = 0;
    let mut high: Coord = n;
    let mut cost_low = 0i64;
    while low < high {
        let mid = low + (high - low + 1) / 2;
        let windows: Vec<NarrowWindow> = narrow.clone();
        let probe = expr.dim_cost_probe(m, mid, ctx, Some(&windows));
        if probe.cost <= r {
            low = mid;
            cost_low = probe.cost;
            for (w, &p) in narrow.iter_mut().zip(probe.positions.iter()) {
                w.lo = p;
            }
        } else {
            high = mid - 1;
            for (w, &p) in narrow.iter_mut().zip(probe.positions.iter()) {
                w.hi = p;
            }
        }
    }
    (low, cost_low)
}

/// Hierarchical search: the boundary whose enclosed cost reaches `q`.
///
/// `q = 0` returns the origin boundary so that partition sets tile the
/// space from the zero coordinate even when leading coordinates are empty.
pub fn find_partition(expr: &Expression, q: i64) -> Result<PartitionBoundary> {
    let total = expr.total_cost();
    if q < 0 || q > total {
        return Err(Error::QueryOutOfRange { query: q, total });
    }
    let d = expr.num_dims();
    let mut ctx = expr.fresh_context();
    let mut var_coord = Vec::with_capacity(d);
    let mut residual = q;
    for m in 0..d {
        let x = if q == 0 {
            0
        } else {
            let (x, cost_at_x) = highest_coordinate_leq_query(expr, m, residual, &mut ctx);
            residual -= cost_at_x;
            x
        };
        expr.fix(m, x, &mut ctx);
        var_coord.push(x);
    }
    let positions: Vec<Vec<Pos>> = ctx.ops.iter().map(|c| c.cut.clone()).collect();
    let coord = translate_coord(expr, &var_coord);
    Ok(PartitionBoundary {
        coord,
        var_coord,
        positions,
        cost: q - residual,
        probes: ctx.probes,
    })
}

/// Expand a variable-space coordinate tuple to original coordinates
/// (remapped leading variables widen to their collapsed tuple).
pub fn translate_coord(expr: &Expression, var_coord: &[Coord]) -> Vec<Coord> {
    match expr.table(0) {
        None => var_coord.to_vec(),
        Some(table) => {
            let mut out = Vec::with_capacity(expr.coord_width());
            let k = var_coord[0];
            if (k as usize) < table.survivors() {
                out.extend_from_slice(table.survivor_coords(k as usize));
            } else {
                // One past the last survivor: the supremum of the collapsed
                // space, so deeper coordinates keep the tuple ordered.
                out.extend_from_slice(&table.collapsed_extents);
            }
            out.extend_from_slice(&var_coord[1..]);
            out
        }
    }
}

/// Cut the space for `p` workers at queries `floor(k * total / p)`.
///
/// Every boundary is an independent `find_partition` call; the executor may
/// run them concurrently. Empty partitions (adjacent equal boundaries) are
/// legal and execute as no-ops.
pub fn make_partitions(
    expr: &Expression,
    p: usize,
    executor: &dyn Executor,
) -> Result<PartitionSet> {
    assert!(p >= 1, "worker count must be at least 1");
    let total = expr.total_cost();
    let mut slots: Vec<Result<PartitionBoundary>> = Vec::with_capacity(p + 1);
    for _ in 0..=p {
        slots.push(Err(Error::InvalidArgument("unfilled partition slot".into())));
    }
    {
        let mut tasks: Vec<Box<dyn FnOnce() + Send + '_>> = Vec::with_capacity(p + 1);
        let mut rest = &mut slots[..];
        for k in 0..=p {
            let (slot, tail) = rest.split_first_mut().unwrap();
            rest = tail;
            let q = ((k as i128 * total as i128) / p as i128) as i64;
            tasks.push(Box::new(move || {
                *slot = find_partition(expr, q);
            }));
        }
        executor.run(tasks);
    }
    let boundaries = slots.into_iter().collect::<Result<Vec<_>>>()?;
    debug_assert!(boundaries.windows(2).all(|w| w[0].coord <= w[1].coord));
    Ok(PartitionSet { boundaries, workers: p, total_cost: total })
}

/// Tightness report: per-partition enclosed costs checked against
/// `total/P +- (2 * delta_max + 1)`, the extra one absorbing the integer
/// rounding of the query values.
#[derive(Debug, Clone)]
pub struct TightnessReport {
    pub costs: Vec<i64>,
    pub delta: i64,
    /// `(partition, cost)` pairs exceeding the bound.
    pub violations: Vec<(usize, i64)>,
    /// Largest deviation from the ideal cost, in units of 1/P.
    pub max_deviation_times_p: i64,
}

impl TightnessReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every partition's enclosed cost against the tightness bound.
pub fn verify_tightness(expr: &Expression, ps: &PartitionSet) -> TightnessReport {
    let delta = expr.delta_max();
    let p = ps.workers as i64;
    let mut costs = Vec::with_capacity(ps.workers);
    let mut violations = Vec::new();
    let mut max_dev = 0i64;
    for k in 0..ps.workers {
        let cost = ps.partition_cost(k);
        // |cost - total/P| <= 2*delta + 1, scaled by P to stay integral.
        let dev = (cost * p - ps.total_cost).abs();
        max_dev = max_dev.max(dev);
        if dev > (2 * delta + 1) * p {
            violations.push((k, cost));
        }
        costs.push(cost);
    }
    TightnessReport { costs, delta, violations, max_deviation_times_p: max_dev }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::tests::{csr_add, golden_vectors, matrix_a, matrix_b, vec_t};
    use crate::exec::SeqExecutor;
    use crate::expr::{Binding, Combine, LoopDim, MergeMode, Operand};
    use crate::storage::formats;
    use alloc::sync::Arc;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn golden_single_queries() {
        let e = golden_vectors();
        let b = find_partition(&e, 3).unwrap();
        assert_eq!(b.coord, vec![2]);
        assert_eq!(b.positions, vec![vec![1], vec![1], vec![1]]);
        assert_eq!(b.cost, 3);

        let b = find_partition(&e, 0).unwrap();
        assert_eq!(b.coord, vec![0]);
        assert_eq!(b.positions, vec![vec![0], vec![0], vec![0]]);

        let b = find_partition(&e, 9).unwrap();
        assert_eq!(b.coord, vec![10]);
        assert_eq!(b.positions, vec![vec![3], vec![4], vec![2]]);

        assert!(find_partition(&e, 13).is_err());
        assert!(find_partition(&e, -1).is_err());
    }

    #[test]
    fn golden_highest_coordinate() {
        let e = golden_vectors();
        let mut ctx = e.fresh_context();
        let (x, _) = highest_coordinate_leq_query(&e, 0, 6, &mut ctx);
        assert_eq!(x, 5);
        let mut ctx = e.fresh_context();
        let (x, _) = highest_coordinate_leq_query(&e, 0, 100, &mut ctx);
        assert_eq!(x, 12, "whole dimension fits");
    }

    #[test]
    fn golden_partition_set() {
        let e = golden_vectors();
        let ps = make_partitions(&e, 4, &SeqExecutor).unwrap();
        let cuts: Vec<i64> = ps.boundaries.iter().map(|b| b.coord[0]).collect();
        assert_eq!(cuts, vec![0, 2, 5, 10, 12]);
        for k in 0..4 {
            assert_eq!(ps.partition_cost(k), 3);
        }
        let report = verify_tightness(&e, &ps);
        assert!(report.ok());
        assert_eq!(report.max_deviation_times_p, 0);

        let ps1 = make_partitions(&e, 1, &SeqExecutor).unwrap();
        assert_eq!(ps1.boundaries[0].coord, vec![0]);
        assert_eq!(ps1.boundaries[1].coord, vec![12]);
        assert!(verify_tightness(&e, &ps1).ok());
    }

    /// Linear-scan oracle for the highest coordinate with cost <= r.
    fn oracle_highest(e: &Expression, r: i64) -> i64 {
        let mut best = 0;
        for x in 0..=e.extent(0) {
            let mut ctx = e.fresh_context();
            if e.dim_cost(0, x, &mut ctx) <= r {
                best = x;
            }
        }
        best
    }

    fn random_vectors(rng: &mut StdRng, n: i64, ops: usize) -> Expression {
        let operands: Vec<Operand> = (0..ops)
            .map(|_| {
                let coords: Vec<i64> = (0..n).filter(|_| rng.gen_bool(0.4)).collect();
                Operand::new(vec_t(&coords, n), &[0])
            })
            .collect();
        Expression::new(
            vec![LoopDim::new(n, MergeMode::Intersection)],
            operands,
            Combine::Multiply,
            formats::sparse_vec(),
        )
        .unwrap()
    }

    #[test]
    fn highest_coordinate_matches_linear_scan() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..40i64);
            let e = random_vectors(&mut rng, n, 3);
            let r = rng.gen_range(0..=e.total_cost() + 2);
            let mut ctx = e.fresh_context();
            let (x, _) = highest_coordinate_leq_query(&e, 0, r, &mut ctx);
            assert_eq!(x, oracle_highest(&e, r));
        }
    }

    #[test]
    fn per_worker_queries_tile_the_golden_space() {
        let e = golden_vectors();
        // With as many workers as total cost, brute-force enumeration of
        // every cut point is cheap; check each boundary against it.
        let ps = make_partitions(&e, 12, &SeqExecutor).unwrap();
        for (k, b) in ps.boundaries.iter().enumerate() {
            let q = k as i64; // total 12 over 12 workers
            let expect = if q == 0 { 0 } else { oracle_highest(&e, q) };
            assert_eq!(b.coord[0], expect, "worker {k}");
        }
        assert!(verify_tightness(&e, &ps).ok());
    }

    #[test]
    fn csr_union_partitions_are_tight() {
        let e = csr_add(matrix_a(), matrix_b());
        for p in [1, 2, 3, 4, 7, 12] {
            let ps = make_partitions(&e, p, &SeqExecutor).unwrap();
            let report = verify_tightness(&e, &ps);
            assert!(report.ok(), "p={p}: {:?}", report.violations);
            let sum: i64 = report.costs.iter().sum();
            assert_eq!(sum, e.total_cost());
        }
    }

    fn rank2_random(rng: &mut StdRng, n: i64, density: f64) -> Expression {
        let mut raw_a = Vec::new();
        let mut raw_b = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if rng.gen_bool(density) {
                    raw_a.push((vec![i, j], 1.0));
                }
                if rng.gen_bool(density) {
                    raw_b.push((vec![i, j], 1.0));
                }
            }
        }
        let a = Arc::new(Tensor::from_raw(vec![n, n], raw_a, &formats::csr()).unwrap());
        let b = Arc::new(Tensor::from_raw(vec![n, n], raw_b, &formats::dcsr()).unwrap());
        csr_add_like(a, b)
    }

    use crate::storage::Tensor;

    fn csr_add_like(a: Arc<Tensor>, b: Arc<Tensor>) -> Expression {
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        Expression::new(
            vec![LoopDim::new(rows, MergeMode::Union), LoopDim::new(cols, MergeMode::Union)],
            vec![Operand::new(a, &[0, 1]), Operand::new(b, &[0, 1])],
            Combine::Add,
            formats::csr(),
        )
        .unwrap()
    }

    #[test]
    fn theorem_bound_on_random_instances() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..25 {
            let n = rng.gen_range(2..24i64);
            let e = rank2_random(&mut rng, n, 0.2);
            let total = e.total_cost();
            let delta = e.delta_max();
            for _ in 0..20 {
                let q = rng.gen_range(0..=total);
                let b = find_partition(&e, q).unwrap();
                // Recompute C(x) from the returned coordinate independently.
                let mut ctx = e.fresh_context();
                let mut c = 0i64;
                for (m, &x) in b.var_coord.iter().enumerate() {
                    c += e.dim_cost(m, x, &mut ctx);
                    e.fix(m, x, &mut ctx);
                }
                assert_eq!(c, b.cost, "stored cost must match recomputation");
                if q > 0 {
                    assert!(0 <= q - c && q - c < delta, "theorem bound violated: q={q} c={c}");
                }
            }
        }
    }

    #[test]
    fn boundaries_monotone_in_query() {
        let mut rng = StdRng::seed_from_u64(23);
        let e = rank2_random(&mut rng, 16, 0.15);
        let total = e.total_cost();
        let mut prev: Option<Vec<i64>> = None;
        for q in 0..=total {
            let b = find_partition(&e, q).unwrap();
            if let Some(p) = prev {
                assert!(p <= b.coord, "boundaries must be lexicographically monotone");
            }
            prev = Some(b.coord);
        }
    }

    #[test]
    fn probe_budget_holds() {
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..10 {
            let n = rng.gen_range(4..40i64);
            let e = rank2_random(&mut rng, n, 0.3);
            let budget: u64 = (0..e.num_dims())
                .map(|m| 64 - ((e.extent(m) + 1) as u64).leading_zeros() as u64)
                .sum();
            let total = e.total_cost();
            for _ in 0..10 {
                let q = rng.gen_range(1..=total.max(1));
                let b = find_partition(&e, q).unwrap();
                assert!(
                    b.probes.cost_evals <= budget,
                    "cost evals {} exceed budget {budget}",
                    b.probes.cost_evals
                );
            }
        }
    }

    /// Exhaustive-cut oracle: the lexicographically largest coordinate
    /// tuple whose enclosed cost stays within q.
    fn oracle_partition(e: &Expression, q: i64) -> Vec<i64> {
        let d = e.num_dims();
        let mut best = vec![0; d];
        let mut stack: Vec<Vec<i64>> = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            if prefix.len() == d {
                let mut ctx = e.fresh_context();
                let mut c = 0i64;
                for (m, &x) in prefix.iter().enumerate() {
                    c += e.dim_cost(m, x, &mut ctx);
                    e.fix(m, x, &mut ctx);
                }
                if c <= q && prefix > best {
                    best = prefix;
                }
                continue;
            }
            let m = prefix.len();
            for x in 0..=e.extent(m) {
                let mut next = prefix.clone();
                next.push(x);
                stack.push(next);
            }
        }
        best
    }

    #[test]
    fn equals_brute_force_on_small_spaces() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..6 {
            let n = rng.gen_range(2..6i64);
            let e = rank2_random(&mut rng, n, 0.4);
            let total = e.total_cost();
            for q in 1..=total {
                let b = find_partition(&e, q).unwrap();
                assert_eq!(b.var_coord, oracle_partition(&e, q), "q={q}");
            }
        }
    }

    #[test]
    fn positions_cohere_with_count_below() {
        let mut rng = StdRng::seed_from_u64(37);
        let e = rank2_random(&mut rng, 20, 0.25);
        let total = e.total_cost();
        for _ in 0..40 {
            let q = rng.gen_range(0..=total);
            let b = find_partition(&e, q).unwrap();
            for (i, op) in e.operands().iter().enumerate() {
                let mut cursor = crate::expr::OpCursor {
                    next_level: 0,
                    lo: 0,
                    hi: op.tensor.level(0).position_count(1),
                    cut: Vec::new(),
                };
                for (k, binding) in op.bindings.iter().enumerate() {
                    let Binding::Var(v) = binding else { unreachable!() };
                    let x = b.var_coord[*v];
                    let lvl = op.tensor.level(k);
                    let expect = match lvl {
                        crate::storage::Level::Dense { extent } => cursor.lo + x.clamp(0, *extent),
                        _ => lvl.count_below(x, cursor.lo, cursor.hi - 1).1,
                    };
                    assert_eq!(b.positions[i][k], expect);
                    let (p_lo, p_hi) =
                        crate::cost::equal_range(lvl, x, &cursor, &mut 0);
                    crate::cost::descend(&op.tensor, &mut cursor, p_lo, p_hi);
                }
            }
        }
    }

    #[test]
    fn dense_vector_partitions() {
        let t = Arc::new(
            Tensor::from_raw(vec![16], (0..16).map(|i| (vec![i], 1.0)).collect(), &formats::dense_vec())
                .unwrap(),
        );
        let e = Expression::new(
            vec![LoopDim::new(16, MergeMode::Union)],
            vec![Operand::new(t.clone(), &[0]), Operand::new(t, &[0])],
            Combine::Add,
            formats::dense_vec(),
        )
        .unwrap();
        let ps = make_partitions(&e, 4, &SeqExecutor).unwrap();
        let cuts: Vec<i64> = ps.boundaries.iter().map(|b| b.coord[0]).collect();
        assert_eq!(cuts, vec![0, 4, 8, 12, 16]);
    }

    #[test]
    fn more_workers_than_work_yields_empty_partitions() {
        let e = golden_vectors();
        let ps = make_partitions(&e, 40, &SeqExecutor).unwrap();
        assert!(verify_tightness(&e, &ps).ok());
        let sum: i64 = (0..40).map(|k| ps.partition_cost(k)).sum();
        assert_eq!(sum, 12);
    }
}
