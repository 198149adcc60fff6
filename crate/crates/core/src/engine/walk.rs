//! Coiteration: a k-operand, d-dimensional merge over a boundary range.
//!
//! The walk visits exactly the iteration points of the merge lattice inside
//! a half-open lexicographic coordinate range `[lo, hi)`. Union variables
//! visit any coordinate where some bound operand is present (every
//! coordinate once a dense level is bound there); intersection variables
//! leapfrog to coordinates present in all sparse bound levels. Matching a
//! coordinate narrows each operand cursor to the children of its equal
//! range, so a fully descended cursor holds the operand's leaf slot.
//!
//! The remapped leading variable of a staged expression walks its survivor
//! list instead, re-seeding every cursor from the table and reporting the
//! original coordinates of the collapsed dimensions.

use alloc::vec;
use alloc::vec::Vec;

use crate::expr::{Expression, MergeMode};
use crate::storage::{Coord, Level, Pos, Tensor};

/// Presence and leaf slot of one operand at a visited point.
#[derive(Debug, Clone, Copy)]
pub struct OpHit {
    pub present: bool,
    pub leaf: Pos,
}

/// Receives every visited iteration point, in lexicographic order.
pub trait PointSink {
    fn point(&mut self, coords: &[Coord], hits: &[OpHit]);
}

/// Work counter: sparse leaf-level positions consumed by the merge.
#[derive(Debug, Clone, Copy, Default)]
pub struct WalkStats {
    pub leaf_consumed: u64,
}

#[derive(Debug, Clone, Copy)]
struct WalkCursor {
    next_level: usize,
    lo: Pos,
    hi: Pos,
}

/// Lexicographic range in the expression's own variables. `lo`/`hi` come
/// from partition boundaries (`var_coord`); the full space is
/// `[0.., extents]`.
pub struct Range<'a> {
    pub lo: &'a [Coord],
    pub hi: &'a [Coord],
}

pub fn full_range(expr: &Expression) -> (Vec<Coord>, Vec<Coord>) {
    let lo = vec![0; expr.num_dims()];
    let hi: Vec<Coord> = (0..expr.num_dims()).map(|m| expr.extent(m)).collect();
    (lo, hi)
}

/// Walk all lattice points of `expr` inside `range`, feeding `sink`.
pub fn walk(expr: &Expression, range: Range<'_>, sink: &mut dyn PointSink) -> WalkStats {
    let d = expr.num_dims();
    let ops = expr.operands().len();
    let mut frames: Vec<Vec<WalkCursor>> = vec![Vec::with_capacity(ops); d + 1];
    frames[0] = expr
        .operands()
        .iter()
        .map(|op| WalkCursor {
            next_level: 0,
            lo: 0,
            hi: op.tensor.level(0).position_count(1),
        })
        .collect();
    for frame in frames.iter_mut().skip(1) {
        frame.resize(
            ops,
            WalkCursor { next_level: 0, lo: 0, hi: 0 },
        );
    }
    let mut coord_offsets = Vec::with_capacity(d);
    let mut off = 0usize;
    for m in 0..d {
        coord_offsets.push(off);
        off += expr.coord_span(m);
    }
    let mut w = Walker {
        expr,
        lo: range.lo,
        hi: range.hi,
        coords: vec![0; expr.coord_width()],
        coord_offsets,
        frames,
        stats: WalkStats::default(),
        hits: vec![OpHit { present: false, leaf: 0 }; ops],
    };
    w.dim(0, true, true, sink);
    w.stats
}

struct Walker<'a> {
    expr: &'a Expression,
    lo: &'a [Coord],
    hi: &'a [Coord],
    coords: Vec<Coord>,
    coord_offsets: Vec<usize>,
    frames: Vec<Vec<WalkCursor>>,
    stats: WalkStats,
    hits: Vec<OpHit>,
}

impl<'a> Walker<'a> {
    fn dim(&mut self, m: usize, lo_edge: bool, hi_edge: bool, sink: &mut dyn PointSink) {
        let d = self.expr.num_dims();
        if m == d {
            for (i, op) in self.expr.operands().iter().enumerate() {
                let c = self.frames[d][i];
                debug_assert_eq!(c.next_level, op.tensor.rank());
                self.hits[i] = OpHit { present: c.hi > c.lo, leaf: c.lo };
            }
            sink.point(&self.coords, &self.hits);
            return;
        }

        if self.expr.table(m).is_some() {
            self.table_dim(m, lo_edge, hi_edge, sink);
            return;
        }

        let start: Coord = if lo_edge { self.lo[m] } else { 0 };
        let n = self.expr.extent(m);

        // Stream state per binder: (op, level, cursor position).
        let binders = self.expr.binders(m);
        let mut streams: Vec<(usize, usize, Pos)> = Vec::with_capacity(binders.len());
        let mut dense_binder = false;
        for &(i, k) in binders {
            let frame = self.frames[m][i];
            debug_assert_eq!(frame.next_level, k);
            match self.expr.operands()[i].tensor.level(k) {
                Level::Dense { .. } => dense_binder = true,
                Level::Compressed { .. } | Level::Singleton { .. } => {
                    streams.push((i, k, frame.lo));
                }
            }
        }
        // Boundary alignment: seek each stream to the range start without
        // charging consumption (those positions belong to earlier workers).
        for s in streams.iter_mut() {
            let (i, k, ref mut cur) = *s;
            let frame = self.frames[m][i];
            *cur = seek(&self.expr.operands()[i].tensor, k, start, *cur, frame.hi);
        }

        let mode = self.expr.mode(m);
        let dense_driven = match mode {
            MergeMode::Union => dense_binder,
            MergeMode::Intersection => streams.is_empty(),
        };

        let mut c = start;
        loop {
            // Pick the next candidate coordinate.
            let cand = if dense_driven {
                if c >= n {
                    break;
                }
                c
            } else {
                match mode {
                    MergeMode::Union => {
                        let mut best: Option<Coord> = None;
                        for &(i, k, cur) in &streams {
                            let frame = self.frames[m][i];
                            if cur < frame.hi {
                                let crd = self.expr.operands()[i].tensor.level(k).crd().unwrap();
                                let head = crd[cur as usize];
                                best = Some(best.map_or(head, |b: Coord| b.min(head)));
                            }
                        }
                        match best {
                            Some(x) => x,
                            None => break,
                        }
                    }
                    MergeMode::Intersection => {
                        // Leapfrog: raise the candidate to the max head,
                        // seeking lagging streams, until all heads agree.
                        let mut cand = c;
                        let mut settled = false;
                        'leap: while !settled {
                            settled = true;
                            for s in streams.iter_mut() {
                                let (i, k, ref mut cur) = *s;
                                let frame = self.frames[m][i];
                                let tensor = &self.expr.operands()[i].tensor;
                                let leaf_level = k + 1 == tensor.rank();
                                let next = seek(tensor, k, cand, *cur, frame.hi);
                                if leaf_level {
                                    self.stats.leaf_consumed += (next - *cur) as u64;
                                }
                                *cur = next;
                                if *cur >= frame.hi {
                                    cand = Coord::MAX;
                                    break 'leap;
                                }
                                let head = tensor.level(k).crd().unwrap()[*cur as usize];
                                if head > cand {
                                    cand = head;
                                    settled = false;
                                }
                            }
                        }
                        if cand == Coord::MAX || cand >= n {
                            break;
                        }
                        cand
                    }
                }
            };

            if hi_edge && (cand > self.hi[m] || (cand == self.hi[m] && m + 1 == d)) {
                break;
            }

            // Fix the candidate: presence + child windows per operand.
            let mut any_present = false;
            let mut all_present = true;
            for i in 0..self.expr.operands().len() {
                self.frames[m + 1][i] = self.frames[m][i];
            }
            for &(i, k) in binders {
                let tensor = &self.expr.operands()[i].tensor;
                let frame = self.frames[m][i];
                let (p_lo, p_hi) = match tensor.level(k) {
                    Level::Dense { extent } => {
                        let p = frame.lo + cand.clamp(0, *extent);
                        (p, (frame.lo + (cand + 1).clamp(0, *extent)).max(p))
                    }
                    Level::Compressed { .. } | Level::Singleton { .. } => {
                        let cur = streams
                            .iter()
                            .find(|&&(si, sk, _)| si == i && sk == k)
                            .map(|&(_, _, c)| c)
                            .unwrap();
                        let hi = seek(tensor, k, cand + 1, cur, frame.hi);
                        (cur.min(hi), hi)
                    }
                };
                let present = match tensor.level(k) {
                    Level::Dense { extent } => cand < *extent,
                    _ => p_hi > p_lo,
                };
                any_present |= present;
                all_present &= present;
                let cursor = &mut self.frames[m + 1][i];
                cursor.next_level = k + 1;
                if k + 1 >= tensor.rank() {
                    cursor.lo = p_lo;
                    cursor.hi = p_hi;
                } else {
                    cursor.lo = tensor.level(k + 1).child_start(p_lo);
                    cursor.hi = tensor.level(k + 1).child_start(p_hi);
                }
            }

            let visit = match mode {
                MergeMode::Union => any_present,
                MergeMode::Intersection => all_present,
            };
            if visit {
                self.coords[self.coord_offsets[m]] = cand;
                let next_lo = lo_edge && cand == self.lo[m];
                let next_hi = hi_edge && cand == self.hi[m];
                self.dim(m + 1, next_lo, next_hi, sink);
            }

            // Consume the equal range of the candidate on every stream.
            for s in streams.iter_mut() {
                let (i, k, ref mut cur) = *s;
                let frame = self.frames[m][i];
                let tensor = &self.expr.operands()[i].tensor;
                let leaf_level = k + 1 == tensor.rank();
                let next = seek(tensor, k, cand + 1, *cur, frame.hi);
                if leaf_level {
                    self.stats.leaf_consumed += (next - *cur) as u64;
                }
                *cur = next;
            }
            c = cand + 1;
            if c >= n {
                break;
            }
        }
    }

    fn table_dim(&mut self, m: usize, lo_edge: bool, hi_edge: bool, sink: &mut dyn PointSink) {
        debug_assert_eq!(m, 0);
        let table = self.expr.table(0).unwrap().clone();
        let n = self.expr.extent(0);
        let d = self.expr.num_dims();
        let start = if lo_edge { self.lo[0] } else { 0 };
        for c in start..n {
            if hi_edge && (c > self.hi[0] || (c == self.hi[0] && d == 1)) {
                break;
            }
            let seed = &table.seeds[c as usize];
            for (i, fresh) in seed.iter().enumerate() {
                self.frames[1][i] = WalkCursor {
                    next_level: fresh.next_level,
                    lo: fresh.lo,
                    hi: fresh.hi,
                };
            }
            self.coords[..table.width].copy_from_slice(table.survivor_coords(c as usize));
            let next_lo = lo_edge && c == self.lo[0];
            let next_hi = hi_edge && c == self.hi[0];
            self.dim(1, next_lo, next_hi, sink);
        }
    }
}

/// First position in `[cur, hi)` whose coordinate is `>= x`.
fn seek(tensor: &Tensor, level: usize, x: Coord, cur: Pos, hi: Pos) -> Pos {
    let crd = tensor.level(level).crd().expect("seek on sparse level");
    // Galloping from the cursor keeps short advances cheap.
    if cur >= hi || crd[cur as usize] >= x {
        return cur;
    }
    let mut step = 1;
    let mut lo = cur;
    let mut probe = cur + 1;
    while probe < hi && crd[probe as usize] < x {
        lo = probe;
        probe = (probe + step).min(hi);
        step *= 2;
    }
    crate::storage::lower_bound(crd, x, lo + 1, probe.min(hi), &mut 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::tests::{golden_vectors, vec_t};
    use crate::expr::{Combine, LoopDim, Operand};
    use crate::storage::formats;
    use alloc::collections::BTreeSet;
    use proptest::prelude::*;

    struct Collect {
        points: Vec<(Vec<Coord>, Vec<bool>)>,
    }

    impl PointSink for Collect {
        fn point(&mut self, coords: &[Coord], hits: &[OpHit]) {
            self.points
                .push((coords.to_vec(), hits.iter().map(|h| h.present).collect()));
        }
    }

    fn collect_full(e: &Expression) -> Vec<(Vec<Coord>, Vec<bool>)> {
        let (lo, hi) = full_range(e);
        let mut sink = Collect { points: Vec::new() };
        walk(e, Range { lo: &lo, hi: &hi }, &mut sink);
        sink.points
    }

    #[test]
    fn three_way_intersection_visits_common_coordinates() {
        // Vectors with common coordinates {1, 9}.
        let a = vec_t(&[1, 4, 9], 12);
        let b = vec_t(&[1, 2, 4, 9, 10], 12);
        let c = vec_t(&[1, 5, 9, 11], 12);
        let e = Expression::new(
            vec![LoopDim::new(12, MergeMode::Intersection)],
            vec![Operand::new(a, &[0]), Operand::new(b, &[0]), Operand::new(c, &[0])],
            Combine::Multiply,
            formats::sparse_vec(),
        )
        .unwrap();
        let pts = collect_full(&e);
        let coords: Vec<i64> = pts.iter().map(|(c, _)| c[0]).collect();
        assert_eq!(coords, vec![1, 9]);

        // The golden instance intersects only at coordinate 1.
        let pts = collect_full(&golden_vectors());
        let coords: Vec<i64> = pts.iter().map(|(c, _)| c[0]).collect();
        assert_eq!(coords, vec![1]);
    }

    #[test]
    fn union_with_empty_operand_is_identity() {
        let x = vec_t(&[0, 3, 7], 9);
        let empty = vec_t(&[], 9);
        let e = Expression::new(
            vec![LoopDim::new(9, MergeMode::Union)],
            vec![Operand::new(x, &[0]), Operand::new(empty, &[0])],
            Combine::Add,
            formats::sparse_vec(),
        )
        .unwrap();
        let pts = collect_full(&e);
        let coords: Vec<i64> = pts.iter().map(|(c, _)| c[0]).collect();
        assert_eq!(coords, vec![0, 3, 7]);
    }

    #[test]
    fn range_splits_cover_without_overlap() {
        let a = vec_t(&[1, 4, 9], 12);
        let b = vec_t(&[1, 2, 4, 9, 10], 12);
        let e = Expression::new(
            vec![LoopDim::new(12, MergeMode::Union)],
            vec![Operand::new(a, &[0]), Operand::new(b, &[0])],
            Combine::Add,
            formats::sparse_vec(),
        )
        .unwrap();
        let whole: Vec<i64> = collect_full(&e).iter().map(|(c, _)| c[0]).collect();
        for split in 0..=12i64 {
            let (lo, hi) = full_range(&e);
            let mid = vec![split];
            let mut s1 = Collect { points: Vec::new() };
            walk(&e, Range { lo: &lo, hi: &mid }, &mut s1);
            let mut s2 = Collect { points: Vec::new() };
            walk(&e, Range { lo: &mid, hi: &hi }, &mut s2);
            let mut merged: Vec<i64> =
                s1.points.iter().chain(s2.points.iter()).map(|(c, _)| c[0]).collect();
            merged.sort_unstable();
            assert_eq!(merged, whole, "split at {split}");
        }
    }

    proptest! {
        #[test]
        fn two_way_union_equals_set_union(
            xs in proptest::collection::btree_set(0i64..40, 0..25),
            ys in proptest::collection::btree_set(0i64..40, 0..25),
        ) {
            let a = vec_t(&xs.iter().copied().collect::<Vec<_>>(), 40);
            let b = vec_t(&ys.iter().copied().collect::<Vec<_>>(), 40);
            let e = Expression::new(
                vec![LoopDim::new(40, MergeMode::Union)],
                vec![Operand::new(a, &[0]), Operand::new(b, &[0])],
                Combine::Add,
                formats::sparse_vec(),
            ).unwrap();
            let got: Vec<i64> = collect_full(&e).iter().map(|(c, _)| c[0]).collect();
            let want: Vec<i64> = xs.union(&ys).copied().collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn two_way_intersection_equals_set_intersection(
            xs in proptest::collection::btree_set(0i64..40, 0..25),
            ys in proptest::collection::btree_set(0i64..40, 0..25),
        ) {
            let a = vec_t(&xs.iter().copied().collect::<Vec<_>>(), 40);
            let b = vec_t(&ys.iter().copied().collect::<Vec<_>>(), 40);
            let e = Expression::new(
                vec![LoopDim::new(40, MergeMode::Intersection)],
                vec![Operand::new(a, &[0]), Operand::new(b, &[0])],
                Combine::Multiply,
                formats::sparse_vec(),
            ).unwrap();
            let got: Vec<i64> = collect_full(&e).iter().map(|(c, _)| c[0]).collect();
            let want: Vec<i64> = xs.intersection(&ys).copied().collect();
            prop_assert_eq!(got, want);
            let _: BTreeSet<i64> = xs;
        }
    }
}
