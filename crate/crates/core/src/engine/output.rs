//! Two-phase parallel output assembly.
//!
//! An assembly pass symbolically executes each partition's share of the
//! coiteration, counting output leaves and, per sparse output level, the
//! stored entries it starts. Exclusive prefix sums over those counts give
//! every worker its write offsets, the output arrays are bulk-allocated at
//! exactly the counted sizes, and a compute pass re-walks each partition
//! writing values and coordinates into disjoint slices.
//!
//! Partitions are irregular, so a stored prefix (say a CSR row) can span
//! workers. Coordinate entries belong to the worker that produces the
//! prefix's first leaf; the reconciliation step detects continuations by
//! comparing boundary leaf prefixes and shifts the continuing worker's
//! offsets. Offset-array slots (`pos`) belong to the worker whose range
//! contains the end of the parent position, so each slot is written exactly
//! once even when the parent produced no output in that worker's range.

use alloc::boxed::Box;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::engine::walk::{self, OpHit, PointSink, WalkStats};
use crate::error::Error;
use crate::exec::Executor;
use crate::expr::{Combine, Expression};
use crate::partition::PartitionSet;
use crate::scan::exclusive_scan;
use crate::storage::{Coord, Level, LevelKind, Tensor, Value};
use crate::Result;

/// Output format description derived from an expression.
#[derive(Debug, Clone)]
pub struct OutputMeta {
    pub shape: Vec<Coord>,
    pub kinds: Vec<LevelKind>,
    /// Count of leading dense levels; sparse levels may not be followed by
    /// dense ones.
    pub dense_prefix: usize,
    /// Per level: stores one entry per distinct prefix (true) or one per
    /// leaf (false, for trailing coordinate levels).
    pub unique: Vec<bool>,
}

impl OutputMeta {
    pub fn derive(expr: &Expression) -> Result<OutputMeta> {
        let shape = expr.output_shape();
        let kinds = expr.output().to_vec();
        if kinds.len() != shape.len() {
            return Err(Error::RankMismatch { expected: shape.len(), got: kinds.len() });
        }
        let dense_prefix = kinds.iter().take_while(|k| **k == LevelKind::Dense).count();
        if kinds[dense_prefix..].iter().any(|k| *k == LevelKind::Dense) {
            return Err(Error::UnsupportedOutput(
                "dense output levels below sparse ones".to_string(),
            ));
        }
        let unique = (0..kinds.len())
            .map(|l| {
                kinds[l] != LevelKind::Singleton
                    && kinds[l + 1..].iter().any(|k| *k != LevelKind::Singleton)
            })
            .collect();
        Ok(OutputMeta { shape, kinds, dense_prefix, unique })
    }

    pub fn width(&self) -> usize {
        self.kinds.len()
    }

    pub fn pure_dense(&self) -> bool {
        self.dense_prefix == self.width()
    }

    /// Row-major linearization of a coordinate prefix of the leading dense
    /// region (or, for pure dense outputs, of the whole tuple). Boundary
    /// tuples may hold extent values; the result is then the exclusive end.
    fn linearize(&self, coords: &[Coord], upto: usize) -> i64 {
        let mut acc = 0i64;
        for l in 0..upto {
            acc = acc * self.shape[l] + coords[l].clamp(0, self.shape[l]);
        }
        acc
    }
}

/// Per-worker symbolic execution results.
#[derive(Debug, Clone, Default)]
pub struct WorkerCounts {
    pub leaves: i64,
    /// Entries started by this worker, per output level (zeros for the
    /// dense prefix).
    pub entries: Vec<i64>,
    pub first_leaf: Option<Vec<Coord>>,
    pub last_leaf: Option<Vec<Coord>>,
    pub stats: WalkStats,
}

/// Assembly result: per-worker counts for one partition set.
#[derive(Debug, Clone)]
pub struct AssemblyCounts {
    pub per_worker: Vec<WorkerCounts>,
}

impl AssemblyCounts {
    pub fn leaf_counts(&self) -> Vec<i64> {
        self.per_worker.iter().map(|w| w.leaves).collect()
    }

    pub fn total_leaves(&self) -> i64 {
        self.per_worker.iter().map(|w| w.leaves).sum()
    }
}

struct CountingSink<'a> {
    meta: &'a OutputMeta,
    counts: WorkerCounts,
}

impl<'a> PointSink for CountingSink<'a> {
    fn point(&mut self, coords: &[Coord], _hits: &[OpHit]) {
        let width = self.meta.width();
        let changed_from = match &self.counts.last_leaf {
            None => 0,
            Some(last) => {
                let mut l = 0;
                while l < width && last[l] == coords[l] {
                    l += 1;
                }
                l
            }
        };
        for l in self.meta.dense_prefix..width {
            if self.meta.unique[l] {
                if changed_from <= l {
                    self.counts.entries[l] += 1;
                }
            } else {
                self.counts.entries[l] += 1;
            }
        }
        self.counts.leaves += 1;
        if self.counts.first_leaf.is_none() {
            self.counts.first_leaf = Some(coords.to_vec());
        }
        match &mut self.counts.last_leaf {
            Some(last) => last.copy_from_slice(coords),
            None => self.counts.last_leaf = Some(coords.to_vec()),
        }
    }
}

/// Value-free symbolic pass: count each worker's outputs.
pub fn assemble(expr: &Expression, ps: &PartitionSet, executor: &dyn Executor) -> Result<AssemblyCounts> {
    let meta = OutputMeta::derive(expr)?;
    let workers = ps.workers;
    let mut slots: Vec<WorkerCounts> = vec![WorkerCounts::default(); workers];
    {
        let mut tasks: Vec<Box<dyn FnOnce() + Send + '_>> = Vec::with_capacity(workers);
        let mut rest = &mut slots[..];
        for w in 0..workers {
            let (slot, tail) = rest.split_first_mut().unwrap();
            rest = tail;
            let meta = &meta;
            let lo = &ps.boundaries[w];
            let hi = &ps.boundaries[w + 1];
            tasks.push(Box::new(move || {
                let mut sink = CountingSink {
                    meta,
                    counts: WorkerCounts {
                        entries: vec![0; meta.width()],
                        ..WorkerCounts::default()
                    },
                };
                let stats = walk::walk(
                    expr,
                    walk::Range { lo: &lo.var_coord, hi: &hi.var_coord },
                    &mut sink,
                );
                sink.counts.stats = stats;
                *slot = sink.counts;
            }));
        }
        executor.run(tasks);
    }
    Ok(AssemblyCounts { per_worker: slots })
}

/// Write offsets and ownership flags computed from assembly counts.
#[derive(Debug, Clone)]
pub struct WriteOffsets {
    pub meta: OutputMeta,
    /// Exclusive scan of leaf counts plus the total (length P + 1).
    pub leaf_base: Vec<i64>,
    /// Per level: exclusive scan of adjusted entry counts (length P + 1);
    /// empty vec for dense-prefix levels.
    pub entry_base: Vec<Vec<i64>>,
    /// `skip_first[w][l]`: worker w's first entry at level l continues the
    /// previous worker's entry and must not be re-emitted.
    pub skip_first: Vec<Vec<bool>>,
    /// `completed[w][l]`: global parent-position range whose `pos` slots
    /// worker w owns (compressed levels with a parent only).
    pub completed: Vec<Vec<(i64, i64)>>,
}

impl WriteOffsets {
    pub fn total_leaves(&self) -> i64 {
        *self.leaf_base.last().unwrap()
    }
}

/// Exclusive prefix sums plus boundary reconciliation.
pub fn reconcile(
    expr: &Expression,
    ps: &PartitionSet,
    counts: &AssemblyCounts,
) -> Result<WriteOffsets> {
    let meta = OutputMeta::derive(expr)?;
    let width = meta.width();
    let workers = ps.workers;
    let per = &counts.per_worker;

    let (mut leaf_base, leaf_total) = exclusive_scan(&counts.leaf_counts());
    leaf_base.push(leaf_total);

    // A worker's first entry at a level is a continuation when the nearest
    // earlier worker with output ended inside the same stored prefix.
    let mut skip_first = vec![vec![false; width]; workers];
    {
        let mut prev_last: Option<&Vec<Coord>> = None;
        for w in 0..workers {
            if per[w].leaves == 0 {
                continue;
            }
            let first = per[w].first_leaf.as_ref().unwrap();
            if let Some(last) = prev_last {
                for l in meta.dense_prefix..width {
                    if meta.unique[l] && last[..=l] == first[..=l] {
                        skip_first[w][l] = true;
                    }
                }
            }
            prev_last = per[w].last_leaf.as_ref();
        }
    }

    let mut entry_base = vec![Vec::new(); width];
    for l in meta.dense_prefix..width {
        let adjusted: Vec<i64> = (0..workers)
            .map(|w| per[w].entries[l] - i64::from(skip_first[w][l]))
            .collect();
        let (mut base, total) = exclusive_scan(&adjusted);
        base.push(total);
        entry_base[l] = base;
    }

    // `open_after[w][l]`: the stored prefix at level l straddles the
    // boundary between workers w and w+1, so its end is owned later.
    let mut open_after = vec![vec![false; width]; workers];
    {
        let mut prev: Option<(usize, &Vec<Coord>)> = None;
        for w in 0..workers {
            if per[w].leaves == 0 {
                continue;
            }
            if let Some((q, last)) = prev {
                let first = per[w].first_leaf.as_ref().unwrap();
                for l in meta.dense_prefix..width {
                    if meta.unique[l] && last[..=l] == first[..=l] {
                        for boundary in q..w {
                            open_after[boundary][l] = true;
                        }
                    }
                }
            }
            prev = Some((w, per[w].last_leaf.as_ref().unwrap()));
        }
    }

    let mut completed = vec![vec![(0i64, 0i64); width]; workers];
    for l in meta.dense_prefix..width {
        if meta.kinds[l] != LevelKind::Compressed || l == 0 {
            continue; // level-0 pos is the trivial [0, total] root segment
        }
        if l == meta.dense_prefix {
            // Parents are the dense region: completion follows boundary
            // coordinates directly.
            for w in 0..workers {
                let lo = meta.linearize(&ps.boundaries[w].coord, l);
                let hi = meta.linearize(&ps.boundaries[w + 1].coord, l);
                completed[w][l] = (lo, hi);
            }
        } else {
            // Parents are the entries of the level above.
            let pl = l - 1;
            let mut cum = 0i64;
            let mut prev_end = 0i64;
            for w in 0..workers {
                cum += per[w].entries[pl] - i64::from(skip_first[w][pl]);
                let end = cum - i64::from(open_after[w][pl]);
                completed[w][l] = (prev_end, end);
                prev_end = end;
            }
            debug_assert_eq!(prev_end, *entry_base[pl].last().unwrap());
        }
    }

    Ok(WriteOffsets { meta, leaf_base, entry_base, skip_first, completed })
}

/// Mutable output arrays split into per-worker slices.
struct WorkerSlices<'s> {
    vals: &'s mut [Value],
    /// Per level: (crd slice, global base index).
    crd: Vec<(&'s mut [Coord], i64)>,
    /// Per level: (pos slice covering parents `[range.0, range.1)`, range).
    pos: Vec<(&'s mut [i64], (i64, i64))>,
}

struct WritingSink<'a, 's> {
    expr: &'a Expression,
    meta: &'a OutputMeta,
    slices: WorkerSlices<'s>,
    skip_first: &'a [bool],
    leaf_cur: i64,
    /// Global next entry index per level.
    entry_cur: Vec<i64>,
    /// Next parent position to complete, per compressed level.
    par_cur: Vec<i64>,
    last: Option<Vec<Coord>>,
    emitted_first: bool,
    dense_base: i64,
}

impl<'a, 's> WritingSink<'a, 's> {
    fn value_at(&self, hits: &[OpHit]) -> Value {
        match self.expr.combine() {
            Combine::Add => {
                let mut acc = 0.0;
                for (op, hit) in self.expr.operands().iter().zip(hits) {
                    if hit.present {
                        acc += op.tensor.vals()[hit.leaf as usize];
                    }
                }
                acc
            }
            Combine::Multiply => {
                let mut acc = 1.0;
                for (op, hit) in self.expr.operands().iter().zip(hits) {
                    if hit.present {
                        acc *= op.tensor.vals()[hit.leaf as usize];
                    } else {
                        return 0.0;
                    }
                }
                acc
            }
        }
    }

    /// Offset-array value for level `l`: the count of level-`l` entries
    /// emitted so far globally (this worker's cursor).
    fn child_cursor(&self, l: usize) -> i64 {
        self.entry_cur[l]
    }

    fn write_pos(&mut self, l: usize, parent: i64, value: i64) {
        let (slice, range) = &mut self.slices.pos[l];
        debug_assert!(range.0 <= parent && parent < range.1);
        slice[(parent - range.0) as usize] = value;
    }

    /// Complete parents of compressed level `l` up to (excluding) `next`.
    fn complete_until(&mut self, l: usize, next: i64) {
        let (_, range) = self.slices.pos[l];
        let stop = next.min(range.1);
        while self.par_cur[l] < stop {
            let parent = self.par_cur[l];
            let value = self.child_cursor(l);
            self.write_pos(l, parent, value);
            self.par_cur[l] += 1;
        }
    }

    fn finish(&mut self) {
        for l in 0..self.meta.width() {
            if self.meta.kinds[l] == LevelKind::Compressed && l > 0 {
                let (_, range) = self.slices.pos[l];
                self.complete_until(l, range.1);
            }
        }
    }
}

impl<'a, 's> PointSink for WritingSink<'a, 's> {
    fn point(&mut self, coords: &[Coord], hits: &[OpHit]) {
        let value = self.value_at(hits);
        if self.meta.pure_dense() {
            let slot = self.meta.linearize(coords, self.meta.width());
            self.slices.vals[(slot - self.dense_base) as usize] = value;
            return;
        }

        let width = self.meta.width();
        let changed_from = match &self.last {
            None => 0,
            Some(last) => {
                let mut l = 0;
                while l < width && last[l] == coords[l] {
                    l += 1;
                }
                l
            }
        };

        // Finished parents first: their pos slots take the child cursors
        // before this point's entries move them.
        for l in self.meta.dense_prefix..width {
            if self.meta.kinds[l] != LevelKind::Compressed || l == 0 {
                continue;
            }
            if l == self.meta.dense_prefix {
                let parent = self.meta.linearize(coords, l);
                self.complete_until(l, parent);
            } else if self.last.is_some() && changed_from <= l - 1 {
                // The previous entry of the parent level just ended.
                self.complete_until(l, self.par_cur[l] + 1);
            }
        }

        let first_leaf = !self.emitted_first;
        for l in self.meta.dense_prefix..width {
            let event = !self.meta.unique[l] || changed_from <= l;
            if !event {
                continue;
            }
            if first_leaf && self.skip_first[l] {
                // Continuation of the previous worker's entry: its slot was
                // already written there; we stay inside entry index
                // `entry_cur - 1`, which the base offsets already cover.
                continue;
            }
            let (slice, base) = &mut self.slices.crd[l];
            slice[(self.entry_cur[l] - *base) as usize] = coords[l];
            self.entry_cur[l] += 1;
        }

        self.slices.vals[self.leaf_cur as usize] = value;
        self.leaf_cur += 1;
        self.emitted_first = true;
        match &mut self.last {
            Some(last) => last.copy_from_slice(coords),
            None => self.last = Some(coords.to_vec()),
        }
    }
}

/// Numeric pass: allocate from the offsets and fill every partition.
pub fn compute(
    expr: &Expression,
    ps: &PartitionSet,
    offsets: &WriteOffsets,
    executor: &dyn Executor,
) -> Result<(Tensor, Vec<WalkStats>)> {
    let meta = &offsets.meta;
    let width = meta.width();
    let workers = ps.workers;

    if meta.pure_dense() {
        let total: i64 = meta.shape.iter().product();
        let mut vals = vec![0.0; total as usize];
        let mut stats = vec![WalkStats::default(); workers];
        {
            let mut tasks: Vec<Box<dyn FnOnce() + Send + '_>> = Vec::with_capacity(workers);
            let mut rest = &mut vals[..];
            let mut carved = 0i64;
            let mut stat_rest = &mut stats[..];
            for w in 0..workers {
                let hi = meta.linearize(&ps.boundaries[w + 1].coord, width);
                let (chunk, tail) = rest.split_at_mut((hi - carved) as usize);
                rest = tail;
                let my_base = carved;
                carved = hi;
                let (stat, stat_tail) = stat_rest.split_first_mut().unwrap();
                stat_rest = stat_tail;
                let blo = &ps.boundaries[w];
                let bhi = &ps.boundaries[w + 1];
                tasks.push(Box::new(move || {
                    let mut sink = WritingSink {
                        expr,
                        meta,
                        slices: WorkerSlices { vals: chunk, crd: Vec::new(), pos: Vec::new() },
                        skip_first: &[],
                        leaf_cur: 0,
                        entry_cur: Vec::new(),
                        par_cur: Vec::new(),
                        last: None,
                        emitted_first: false,
                        dense_base: my_base,
                    };
                    *stat = walk::walk(
                        expr,
                        walk::Range { lo: &blo.var_coord, hi: &bhi.var_coord },
                        &mut sink,
                    );
                }));
            }
            executor.run(tasks);
        }
        let levels = meta
            .shape
            .iter()
            .map(|&extent| Level::Dense { extent })
            .collect();
        let t = Tensor::from_parts(meta.shape.clone(), levels, vals)?;
        return Ok((t, stats));
    }

    // Allocate output arrays at the counted sizes.
    let leaf_total = offsets.total_leaves();
    let mut vals = vec![0.0; leaf_total as usize];
    let mut crd_arrays: Vec<Vec<Coord>> = (0..width)
        .map(|l| {
            if l < meta.dense_prefix {
                Vec::new()
            } else {
                vec![0; *offsets.entry_base[l].last().unwrap() as usize]
            }
        })
        .collect();
    let mut pos_arrays: Vec<Vec<i64>> = (0..width)
        .map(|l| {
            if meta.kinds[l] != LevelKind::Compressed {
                return Vec::new();
            }
            let parents = if l == 0 {
                1
            } else if l == meta.dense_prefix {
                meta.shape[..l].iter().product::<i64>()
            } else {
                *offsets.entry_base[l - 1].last().unwrap()
            };
            vec![0; parents as usize + 1]
        })
        .collect();
    // Root segments are trivial: one parent covering every entry.
    for l in 0..width {
        if meta.kinds[l] == LevelKind::Compressed && l == 0 {
            pos_arrays[l][1] = *offsets.entry_base[l].last().unwrap();
        }
    }

    let mut stats = vec![WalkStats::default(); workers];
    {
        // Carve disjoint per-worker slices out of every output array.
        let mut val_rest = &mut vals[..];
        let mut val_carved = 0i64;
        let mut crd_rest: Vec<&mut [Coord]> = crd_arrays.iter_mut().map(|v| &mut v[..]).collect();
        let mut crd_carved = vec![0i64; width];
        let mut pos_rest: Vec<&mut [i64]> = pos_arrays.iter_mut().map(|v| &mut v[..]).collect();
        let mut pos_carved = vec![0i64; width];
        // pos slices skip slot 0 (pre-set) and slot parents+1 of root levels.
        for l in 0..width {
            if meta.kinds[l] == LevelKind::Compressed && l > 0 {
                let taken = core::mem::take(&mut pos_rest[l]);
                let (_, tail) = taken.split_at_mut(1);
                pos_rest[l] = tail;
            }
        }

        let mut tasks: Vec<Box<dyn FnOnce() + Send + '_>> = Vec::with_capacity(workers);
        let mut stat_rest = &mut stats[..];
        for w in 0..workers {
            let take = (offsets.leaf_base[w + 1] - val_carved) as usize;
            let (val_chunk, tail) = val_rest.split_at_mut(take);
            val_rest = tail;
            val_carved = offsets.leaf_base[w + 1];

            let mut crd_slices: Vec<(&mut [Coord], i64)> = Vec::with_capacity(width);
            let mut pos_slices: Vec<(&mut [i64], (i64, i64))> = Vec::with_capacity(width);
            for l in 0..width {
                if l < meta.dense_prefix {
                    crd_slices.push((&mut [][..], 0));
                    pos_slices.push((&mut [][..], (0, 0)));
                    continue;
                }
                let base = crd_carved[l];
                let end = offsets.entry_base[l][w + 1];
                let taken = core::mem::take(&mut crd_rest[l]);
                let (chunk, tail) = taken.split_at_mut((end - base) as usize);
                crd_rest[l] = tail;
                crd_carved[l] = end;
                crd_slices.push((chunk, base));

                if meta.kinds[l] == LevelKind::Compressed && l > 0 {
                    let range = offsets.completed[w][l];
                    debug_assert_eq!(range.0, pos_carved[l]);
                    let taken = core::mem::take(&mut pos_rest[l]);
                    let (chunk, tail) = taken.split_at_mut((range.1 - range.0) as usize);
                    pos_rest[l] = tail;
                    pos_carved[l] = range.1;
                    pos_slices.push((chunk, range));
                } else {
                    pos_slices.push((&mut [][..], (0, 0)));
                }
            }

            let entry_cur: Vec<i64> = (0..width)
                .map(|l| if l < meta.dense_prefix { 0 } else { offsets.entry_base[l][w] })
                .collect();
            let par_cur: Vec<i64> = (0..width)
                .map(|l| {
                    if meta.kinds[l] == LevelKind::Compressed && l > 0 {
                        offsets.completed[w][l].0
                    } else {
                        0
                    }
                })
                .collect();

            let (stat, stat_tail) = stat_rest.split_first_mut().unwrap();
            stat_rest = stat_tail;
            let blo = &ps.boundaries[w];
            let bhi = &ps.boundaries[w + 1];
            let skip = &offsets.skip_first[w];
            tasks.push(Box::new(move || {
                let mut sink = WritingSink {
                    expr,
                    meta,
                    slices: WorkerSlices { vals: val_chunk, crd: crd_slices, pos: pos_slices },
                    skip_first: skip,
                    leaf_cur: 0,
                    entry_cur,
                    par_cur,
                    last: None,
                    emitted_first: false,
                    dense_base: 0,
                };
                *stat = walk::walk(
                    expr,
                    walk::Range { lo: &blo.var_coord, hi: &bhi.var_coord },
                    &mut sink,
                );
                sink.finish();
            }));
        }
        executor.run(tasks);
    }

    let mut levels: Vec<Level> = Vec::with_capacity(width);
    for (l, kind) in meta.kinds.iter().enumerate() {
        let level = match kind {
            LevelKind::Dense => Level::Dense { extent: meta.shape[l] },
            LevelKind::Compressed => Level::Compressed {
                pos: core::mem::take(&mut pos_arrays[l]),
                crd: core::mem::take(&mut crd_arrays[l]),
            },
            LevelKind::Singleton => Level::Singleton { crd: core::mem::take(&mut crd_arrays[l]) },
        };
        levels.push(level);
    }
    let tensor = Tensor::from_parts(meta.shape.clone(), levels, vals)?;
    Ok((tensor, stats))
}

/// Single-threaded ground truth: walk the full space in order and pack.
pub fn sequential_reference(expr: &Expression) -> Result<Tensor> {
    let meta = OutputMeta::derive(expr)?;
    struct Collect<'a> {
        expr: &'a Expression,
        items: Vec<(Vec<Coord>, Value)>,
    }
    impl<'a> PointSink for Collect<'a> {
        fn point(&mut self, coords: &[Coord], hits: &[OpHit]) {
            let value = match self.expr.combine() {
                Combine::Add => self
                    .expr
                    .operands()
                    .iter()
                    .zip(hits)
                    .filter(|(_, h)| h.present)
                    .map(|(op, h)| op.tensor.vals()[h.leaf as usize])
                    .sum(),
                Combine::Multiply => {
                    let mut acc = 1.0;
                    for (op, h) in self.expr.operands().iter().zip(hits) {
                        if !h.present {
                            return self.items.push((coords.to_vec(), 0.0));
                        }
                        acc *= op.tensor.vals()[h.leaf as usize];
                    }
                    acc
                }
            };
            self.items.push((coords.to_vec(), value));
        }
    }
    let (lo, hi) = walk::full_range(expr);
    let mut sink = Collect { expr, items: Vec::new() };
    walk::walk(expr, walk::Range { lo: &lo, hi: &hi }, &mut sink);
    if meta.pure_dense() {
        let total: i64 = meta.shape.iter().product();
        let mut vals = vec![0.0; total as usize];
        for (coords, v) in &sink.items {
            vals[meta.linearize(coords, meta.width()) as usize] = *v;
        }
        let levels = meta.shape.iter().map(|&extent| Level::Dense { extent }).collect();
        return Tensor::from_parts(meta.shape.clone(), levels, vals);
    }
    Tensor::pack(&meta.shape, &sink.items, &meta.kinds)
}
