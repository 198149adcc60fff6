//! Per-dimension cost functions counting operand non-zeros.
//!
//! `C_m(x | x0..x{m-1})` is the cost of coiterating, in loop order, from
//! `(x0..x{m-1}, 0, 0, ...)` up to `(x0..x{m-1}, x-1, N, N, ...)`: the outer
//! coordinates are fixed, variable `m` ranges over `[0, x)`, and every
//! deeper variable spans its full extent. Each operand contributes the
//! number of its stored non-zeros inside that subspace, scaled by the full
//! extent of every deeper broadcast dimension.
//!
//! Two properties make these usable by the hierarchical search: they are
//! monotone in `x`, and they compose hierarchically,
//! `C_m(x+1 | p) = C_m(x | p) + C_{m+1}(N_{m+1} | p, x)`, which holds here
//! by construction because fixing `x` narrows each operand cursor to
//! exactly the subtree the next dimension then counts.
//!
//! Compressed and singleton levels answer prefix counts with a binary
//! search over their sorted coordinates followed by an `O(rank)` offset
//! composition down to the leaves, so one evaluation costs
//! `O(#operands * log(nnz))`.

use alloc::vec::Vec;

use crate::expr::{Binding, CostContext, Expression, OpCursor};
use crate::storage::{lower_bound, Coord, Level, Pos, Tensor};

/// Window override used while a binary search narrows the probe range of
/// each bound operand (the live `lA/hA` bounds of the search).
#[derive(Debug, Clone, Copy)]
pub(crate) struct NarrowWindow {
    pub lo: Pos,
    pub hi: Pos,
}

/// Outcome of one cost evaluation: total cost and, per binder of the
/// queried variable, the lower-bound position found for `x`.
#[derive(Debug, Clone)]
pub(crate) struct CostProbe {
    pub cost: i64,
    pub positions: Vec<Pos>,
}

impl Expression {
    /// Cost of the subspace `[0, x)` at variable `m` under the coordinates
    /// already fixed in `ctx`. Does not narrow the context.
    pub fn dim_cost(&self, m: usize, x: Coord, ctx: &mut CostContext) -> i64 {
        if let Some(table) = self.table(m) {
            debug_assert_eq!(m, 0, "remapped variable is always outermost");
            ctx.probes.cost_evals += 1;
            return table.prefix[x as usize];
        }
        let probe = self.dim_cost_probe(m, x, ctx, None);
        probe.cost
    }

    /// Cost evaluation with optional narrowed probe windows (one per binder
    /// of `m`, in binder order).
    pub(crate) fn dim_cost_probe(
        &self,
        m: usize,
        x: Coord,
        ctx: &mut CostContext,
        narrow: Option<&[NarrowWindow]>,
    ) -> CostProbe {
        ctx.probes.cost_evals += 1;
        let mut cost = 0i64;
        let mut positions = Vec::with_capacity(self.binders(m).len());
        for (slot, &(i, k)) in self.binders(m).iter().enumerate() {
            let op = &self.operands()[i];
            let cursor = &ctx.ops[i];
            debug_assert_eq!(cursor.next_level, k, "cursor out of step with loop order");
            let (count, p) = bound_count(
                &op.tensor,
                k,
                x,
                cursor,
                narrow.map(|n| n[slot]),
                &mut ctx.probes.crd_probes,
            );
            positions.push(p);
            cost += count * self.mult_after(i, m);
        }
        for (i, op) in self.operands().iter().enumerate() {
            let bound_here = op.bindings.iter().any(|b| *b == Binding::Var(m));
            if !bound_here {
                let leaves = ctx.ops[i].leaves(&op.tensor);
                cost += leaves * x * self.mult_after(i, m);
            }
        }
        CostProbe { cost, positions }
    }

    /// Total cost of the whole iteration space.
    pub fn total_cost(&self) -> i64 {
        let mut ctx = self.fresh_context();
        let n0 = self.extent(0);
        if self.table(0).is_some() {
            return self.table(0).unwrap().total();
        }
        self.dim_cost(0, n0, &mut ctx)
    }

    /// Fix variable `m` to coordinate `x`, narrowing every bound operand
    /// cursor to the children of the equal range of `x` (empty if absent).
    pub fn fix(&self, m: usize, x: Coord, ctx: &mut CostContext) {
        if let Some(table) = self.table(m) {
            debug_assert_eq!(m, 0);
            let seed = &table.seeds[x as usize];
            for (cursor, fresh) in ctx.ops.iter_mut().zip(seed.iter()) {
                *cursor = fresh.clone();
            }
            return;
        }
        for &(i, k) in self.binders(m) {
            let tensor = &self.operands()[i].tensor;
            let cursor = &mut ctx.ops[i];
            debug_assert_eq!(cursor.next_level, k);
            let (p_lo, p_hi) = equal_range(tensor.level(k), x, cursor, &mut ctx.probes.crd_probes);
            cursor.cut.push(p_lo);
            descend(tensor, cursor, p_lo, p_hi);
        }
    }
}

/// Replace `cursor`'s window with the children of positions `[p_lo, p_hi)`
/// of its current level.
pub(crate) fn descend(tensor: &Tensor, cursor: &mut OpCursor, p_lo: Pos, p_hi: Pos) {
    let k = cursor.next_level;
    cursor.next_level = k + 1;
    if k + 1 >= tensor.rank() {
        cursor.lo = p_lo;
        cursor.hi = p_hi;
    } else {
        cursor.lo = tensor.level(k + 1).child_start(p_lo);
        cursor.hi = tensor.level(k + 1).child_start(p_hi);
    }
}

/// Positions of the equal range of coordinate `x` within the cursor window.
pub(crate) fn equal_range(
    level: &Level,
    x: Coord,
    cursor: &OpCursor,
    probes: &mut u64,
) -> (Pos, Pos) {
    match level {
        Level::Dense { extent } => {
            let p_lo = cursor.lo + x.clamp(0, *extent);
            let p_hi = cursor.lo + (x + 1).clamp(0, *extent);
            (p_lo, p_hi.max(p_lo))
        }
        Level::Compressed { crd, .. } | Level::Singleton { crd } => {
            let p_lo = lower_bound(crd, x, cursor.lo, cursor.hi, probes);
            let p_hi = lower_bound(crd, x + 1, p_lo, cursor.hi, probes);
            (p_lo, p_hi)
        }
    }
}

/// Leaves of `tensor` under coordinates `< x` at level `k` within the
/// cursor's window, and the lower-bound position of `x`.
fn bound_count(
    tensor: &Tensor,
    k: usize,
    x: Coord,
    cursor: &OpCursor,
    narrow: Option<NarrowWindow>,
    probes: &mut u64,
) -> (i64, Pos) {
    let p = match tensor.level(k) {
        Level::Dense { extent } => cursor.lo + x.clamp(0, *extent),
        Level::Compressed { crd, .. } | Level::Singleton { crd } => {
            let (lo, hi) = match narrow {
                Some(w) => (w.lo, w.hi),
                None => (cursor.lo, cursor.hi),
            };
            lower_bound(crd, x, lo, hi, probes)
        }
    };
    let count = tensor.leaf_start(k, p) - tensor.leaf_start(k, cursor.lo);
    (count, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{Combine, LoopDim, MergeMode, Operand};
    use crate::storage::{formats, CooEntries, LevelKind};
    use alloc::sync::Arc;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn vec_t(coords: &[i64], n: i64) -> Arc<Tensor> {
        let raw: Vec<(Vec<i64>, f64)> = coords.iter().map(|&c| (vec![c], 1.0)).collect();
        Arc::new(Tensor::from_raw(vec![n], raw, &formats::sparse_vec()).unwrap())
    }

    /// Three sparse vectors over a 12-coordinate space whose intersection
    /// partitioning is the running example of the test suite.
    pub(crate) fn golden_vectors() -> Expression {
        let a = vec_t(&[1, 4, 5], 12);
        let b = vec_t(&[1, 2, 4, 9, 10], 12);
        let c = vec_t(&[1, 5, 10, 11], 12);
        Expression::new(
            vec![LoopDim::new(12, MergeMode::Intersection)],
            vec![
                Operand::new(a, &[0]),
                Operand::new(b, &[0]),
                Operand::new(c, &[0]),
            ],
            Combine::Multiply,
            formats::sparse_vec(),
        )
        .unwrap()
    }

    pub(crate) fn matrix_a() -> Arc<Tensor> {
        Arc::new(
            Tensor::from_raw(
                vec![5, 8],
                crate::storage::tests::matrix_a_entries(),
                &formats::csr(),
            )
            .unwrap(),
        )
    }

    pub(crate) fn matrix_b_entries() -> Vec<(Vec<i64>, f64)> {
        [
            (0, 0),
            (0, 3),
            (0, 4),
            (2, 0),
            (2, 2),
            (2, 3),
            (2, 6),
            (2, 7),
            (3, 1),
            (3, 3),
            (3, 4),
            (3, 7),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| (vec![r, c], -((i + 1) as f64)))
        .collect()
    }

    pub(crate) fn matrix_b() -> Arc<Tensor> {
        Arc::new(Tensor::from_raw(vec![5, 8], matrix_b_entries(), &formats::csr()).unwrap())
    }

    pub(crate) fn csr_add(a: Arc<Tensor>, b: Arc<Tensor>) -> Expression {
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
    fn three_vector_prefix_costs() {
        let e = golden_vectors();
        let mut ctx = e.fresh_context();
        assert_eq!(e.dim_cost(0, 5, &mut ctx), 6);
        assert_eq!(e.dim_cost(0, 0, &mut ctx), 0);
        assert_eq!(e.total_cost(), 12);
    }

    #[test]
    fn csr_row_prefix_cost() {
        let e = csr_add(matrix_a(), matrix_b());
        let mut ctx = e.fresh_context();
        // pos[3] - pos[0] per operand: 8 from each matrix's first three rows.
        assert_eq!(e.dim_cost(0, 3, &mut ctx), 8 + 8);
        assert_eq!(e.total_cost(), 24);

        // Single-operand row prefix equals the row offset difference.
        let solo = Expression::new(
            vec![LoopDim::new(5, MergeMode::Union), LoopDim::new(8, MergeMode::Union)],
            vec![Operand::new(matrix_a(), &[0, 1])],
            Combine::Add,
            formats::csr(),
        )
        .unwrap();
        let mut ctx = solo.fresh_context();
        assert_eq!(solo.dim_cost(0, 3, &mut ctx), 8);
        // Oracle: linear count of entries with row < 3.
        let by_hand = crate::storage::tests::matrix_a_entries()
            .iter()
            .filter(|(c, _)| c[0] < 3)
            .count() as i64;
        assert_eq!(by_hand, 8);
    }

    #[test]
    fn empty_expression_costs_zero() {
        let a = vec_t(&[], 9);
        let e = Expression::new(
            vec![LoopDim::new(9, MergeMode::Union)],
            vec![Operand::new(a.clone(), &[0]), Operand::new(a, &[0])],
            Combine::Add,
            formats::sparse_vec(),
        )
        .unwrap();
        assert_eq!(e.total_cost(), 0);
    }

    /// SpMV-style broadcast: y_i = A_ij * x_j over loop order (i, j); the
    /// vector is broadcast over i, so its cost scales with the i prefix.
    #[test]
    fn broadcast_scales_by_extent() {
        let a = matrix_a();
        let x = vec_t(&[0, 3, 5, 7], 8);
        let e = Expression::new(
            vec![LoopDim::new(5, MergeMode::Union), LoopDim::new(8, MergeMode::Intersection)],
            vec![Operand::new(a, &[0, 1]), Operand::new(x, &[1])],
            Combine::Multiply,
            formats::csr(),
        )
        .unwrap();
        assert_eq!(e.delta_max(), 2);
        let mut ctx = e.fresh_context();
        // A contributes pos[2]-pos[0] = 4; x contributes nnz(x) * 2 = 8.
        assert_eq!(e.dim_cost(0, 2, &mut ctx), 4 + 8);
        assert_eq!(e.total_cost(), 12 + 4 * 5);
    }

    #[test]
    fn spgemm_broadcast_multipliers() {
        // Loop order (i, k, j): A_ik broadcast over j, B_kj broadcast over i.
        let a = matrix_a(); // 5 x 8
        let b = Arc::new(
            Tensor::from_raw(vec![8, 6], vec![(vec![0, 2], 1.0), (vec![4, 5], 2.0)], &formats::csr())
                .unwrap(),
        );
        let e = Expression::new(
            vec![
                LoopDim::new(5, MergeMode::Union),
                LoopDim::new(8, MergeMode::Intersection),
                LoopDim::new(6, MergeMode::Union),
            ],
            vec![Operand::new(a, &[0, 1]), Operand::new(b, &[1, 2])],
            Combine::Multiply,
            formats::csr(),
        )
        .unwrap();
        // A's cost at i is scaled by N_j = 6; B is broadcast over i.
        let mut ctx = e.fresh_context();
        assert_eq!(e.dim_cost(0, 2, &mut ctx), 4 * 6 + 2 * 2);
        assert_eq!(e.delta_max(), 2);
    }

    fn random_tensor(rng: &mut StdRng, shape: &[i64], kinds: &[LevelKind], density: f64) -> Arc<Tensor> {
        let total: i64 = shape.iter().product();
        let target = ((total as f64 * density) as usize).max(1);
        let mut raw = Vec::new();
        for _ in 0..target {
            let coords: Vec<i64> = shape.iter().map(|&n| rng.gen_range(0..n)).collect();
            raw.push((coords, rng.gen_range(0.5..1.5)));
        }
        Arc::new(Tensor::from_raw(shape.to_vec(), raw, kinds).unwrap())
    }

    fn random_expression(rng: &mut StdRng) -> Expression {
        let rank = rng.gen_range(1..=3usize);
        let shape: Vec<i64> = (0..rank).map(|_| rng.gen_range(2..12i64)).collect();
        let format_pool: Vec<Vec<LevelKind>> = match rank {
            1 => vec![formats::sparse_vec(), formats::dense_vec()],
            2 => vec![formats::csr(), formats::dcsr(), formats::coo(2)],
            _ => vec![formats::csf(3), formats::coo(3)],
        };
        let ops = rng.gen_range(2..=3usize);
        let operands: Vec<Operand> = (0..ops)
            .map(|_| {
                let kinds = &format_pool[rng.gen_range(0..format_pool.len())];
                let t = random_tensor(rng, &shape, kinds, 0.3);
                let vars: Vec<usize> = (0..rank).collect();
                Operand::new(t, &vars)
            })
            .collect();
        let mode = if rng.gen_bool(0.5) { MergeMode::Union } else { MergeMode::Intersection };
        let dims: Vec<LoopDim> = shape.iter().map(|&n| LoopDim::new(n, mode)).collect();
        let out = match rank {
            1 => formats::sparse_vec(),
            2 => formats::csr(),
            _ => formats::csf(3),
        };
        let combine = if mode == MergeMode::Union { Combine::Add } else { Combine::Multiply };
        match Expression::new(dims, operands, combine, out) {
            Ok(e) => e,
            Err(_) => {
                // Intersection without a sparse binder: flip to union.
                random_expression(rng)
            }
        }
    }

    /// Brute-force subspace count straight from the flattened entries.
    fn oracle_cost(e: &Expression, fixed: &[i64], m: usize, x: i64) -> i64 {
        let d = e.num_dims();
        let mut total = 0i64;
        for (i, op) in e.operands().iter().enumerate() {
            let var_of_level: Vec<usize> = op
                .bindings
                .iter()
                .map(|b| match b {
                    Binding::Var(v) => *v,
                    Binding::Collapsed => unreachable!(),
                })
                .collect();
            let mut bcast = 1i64;
            for v in m..d {
                if !var_of_level.contains(&v) {
                    bcast *= if v == m { 1 } else { e.extent(v) };
                }
            }
            for (coords, _) in op.tensor.to_coo().entries() {
                let mut inside = true;
                for (k, &v) in var_of_level.iter().enumerate() {
                    let c = coords[k];
                    if v < m && c != fixed[v] {
                        inside = false;
                    }
                    if v == m && c >= x {
                        inside = false;
                    }
                }
                if inside {
                    total += bcast * if var_of_level.contains(&m) { 1 } else { x };
                }
            }
            // Broadcast over m with no stored entries is handled above by
            // multiplying each surviving entry by x.
        }
        total
    }

    #[test]
    fn cost_axioms_on_random_expressions() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..40 {
            let e = random_expression(&mut rng);
            let d = e.num_dims();
            // Walk a random fixed prefix, checking monotonicity, the
            // brute-force oracle, and hierarchical consistency at each step.
            let mut ctx = e.fresh_context();
            let mut fixed: Vec<i64> = Vec::new();
            for m in 0..d {
                let n = e.extent(m);
                let mut prev = 0i64;
                for x in 0..=n {
                    let c = e.dim_cost(m, x, &mut ctx);
                    assert!(c >= prev, "monotonicity violated");
                    assert_eq!(
                        c,
                        oracle_cost(&e, &fixed, m, x),
                        "cost disagrees with brute force"
                    );
                    if x < n && m + 1 < d {
                        let mut probe = ctx.clone();
                        e.fix(m, x, &mut probe);
                        let inner = e.dim_cost(m + 1, e.extent(m + 1), &mut probe);
                        let next = e.dim_cost(m, x + 1, &mut ctx);
                        assert_eq!(next, c + inner, "hierarchical consistency violated");
                    }
                    prev = c;
                }
                let x = rng.gen_range(0..=n);
                e.fix(m, x, &mut ctx);
                fixed.push(x);
            }
        }
    }

    #[test]
    fn innermost_jump_bounded_by_delta() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..30 {
            let e = random_expression(&mut rng);
            let d = e.num_dims();
            let delta = e.delta_max();
            let mut ctx = e.fresh_context();
            for m in 0..d - 1 {
                let x = rng.gen_range(0..=e.extent(m));
                e.fix(m, x, &mut ctx);
            }
            let m = d - 1;
            let mut prev = 0i64;
            for x in 0..=e.extent(m) {
                let c = e.dim_cost(m, x, &mut ctx);
                assert!(c - prev <= delta, "innermost jump exceeded delta_max");
                prev = c;
            }
        }
    }

    proptest! {
        #[test]
        fn dense_and_compressed_vectors_agree(
            mut coords in proptest::collection::vec(0i64..30, 1..20),
            x in 0i64..=30,
        ) {
            coords.sort_unstable();
            coords.dedup();
            let sparse = vec_t(&coords, 30);
            let dense = Arc::new(sparse.convert(&formats::dense_vec()).unwrap());
            let es = Expression::new(
                vec![LoopDim::new(30, MergeMode::Union)],
                vec![Operand::new(sparse, &[0])],
                Combine::Add,
                formats::sparse_vec(),
            ).unwrap();
            let ed = Expression::new(
                vec![LoopDim::new(30, MergeMode::Union)],
                vec![Operand::new(dense, &[0])],
                Combine::Add,
                formats::dense_vec(),
            ).unwrap();
            let mut c1 = es.fresh_context();
            let mut c2 = ed.fresh_context();
            // Dense levels store structural zeros, so compare against the
            // number of dense slots below x rather than stored non-zeros.
            prop_assert_eq!(es.dim_cost(0, x, &mut c1), coords.iter().filter(|&&c| c < x).count() as i64);
            prop_assert_eq!(ed.dim_cost(0, x, &mut c2), x);
        }
    }
}
