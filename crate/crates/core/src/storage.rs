//! Sparse tensor storage as a hierarchy of per-dimension levels.
//!
//! A tensor of rank `d` stores one [`Level`] per dimension, ordered outer to
//! inner, plus a flat value array with one slot per leaf position. Formats
//! compose from three level kinds:
//!
//! * `Dense` — every coordinate in `[0, extent)` materializes a child
//!   position; nothing is stored per level.
//! * `Compressed` — a `pos` offset array with one segment per parent
//!   position and a sorted `crd` coordinate array.
//! * `Singleton` — one coordinate per parent position; used for the trailing
//!   levels of coordinate formats.
//!
//! CSR is `[Dense, Compressed]`, DCSR `[Compressed, Compressed]`, CSF
//! `[Compressed; d]`, COO `[Compressed, Singleton, ...]` with a single
//! `pos = [0, nnz]` segment so the same sorted-level queries serve every
//! format. A `Compressed` level whose deeper levels are all `Singleton`
//! stores one position per entry and therefore carries duplicate
//! coordinates; every other compressed level has strictly increasing
//! coordinates within each segment.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// Coordinate within a dimension.
pub type Coord = i64;
/// Position (offset) within a level's physical arrays.
pub type Pos = i64;
/// Stored value.
pub type Value = f64;

/// Level kind selector used when requesting a format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LevelKind {
    Dense,
    Compressed,
    Singleton,
}

impl LevelKind {
    pub fn is_sparse(self) -> bool {
        !matches!(self, LevelKind::Dense)
    }
}

/// One storage level of a tensor dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum Level {
    Dense { extent: Coord },
    Compressed { pos: Vec<Pos>, crd: Vec<Coord> },
    Singleton { crd: Vec<Coord> },
}

impl Level {
    pub fn kind(&self) -> LevelKind {
        match self {
            Level::Dense { .. } => LevelKind::Dense,
            Level::Compressed { .. } => LevelKind::Compressed,
            Level::Singleton { .. } => LevelKind::Singleton,
        }
    }

    /// Number of positions this level exposes given the parent position count.
    pub fn position_count(&self, parents: Pos) -> Pos {
        match self {
            Level::Dense { extent } => parents * extent,
            Level::Compressed { pos, .. } => pos[parents as usize],
            Level::Singleton { .. } => parents,
        }
    }

    /// First position of this level belonging to parent position `p`.
    ///
    /// Valid for `p` in `[0, parents]`; `p == parents` yields the end offset.
    pub fn child_start(&self, p: Pos) -> Pos {
        match self {
            Level::Dense { extent } => p * extent,
            Level::Compressed { pos, .. } => pos[p as usize],
            Level::Singleton { .. } => p,
        }
    }

    /// Sorted coordinate array for compressed and singleton levels.
    pub fn crd(&self) -> Option<&[Coord]> {
        match self {
            Level::Dense { .. } => None,
            Level::Compressed { crd, .. } => Some(crd),
            Level::Singleton { crd } => Some(crd),
        }
    }

    /// Least position `p` in `[lo, hi + 1]` with `crd[p] >= x`, together with
    /// the count `p - lo` of stored coordinates below `x` in the window.
    ///
    /// The window bounds are inclusive and must satisfy `lo <= hi + 1`; an
    /// empty window (`hi == lo - 1`) returns `(0, lo)`. Binary search, so the
    /// window must be sorted (non-decreasing).
    pub fn count_below(&self, x: Coord, lo: Pos, hi: Pos) -> (i64, Pos) {
        let crd = self
            .crd()
            .expect("count_below requires a coordinate-bearing level");
        let p = lower_bound(crd, x, lo, hi + 1, &mut 0);
        (p - lo, p)
    }
}

/// First index in `[lo, hi)` whose coordinate is `>= x` (`hi` if none).
/// `probes` counts coordinate comparisons.
pub(crate) fn lower_bound(crd: &[Coord], x: Coord, lo: Pos, hi: Pos, probes: &mut u64) -> Pos {
    let mut lo = lo;
    let mut hi = hi;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        *probes += 1;
        if crd[mid as usize] < x {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Canonical list of (coordinate tuple, value) pairs: lexicographically
/// sorted, duplicate coordinates merged by summation, exact zeros dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct CooEntries {
    shape: Vec<Coord>,
    entries: Vec<(Vec<Coord>, Value)>,
}

impl CooEntries {
    /// Canonicalize raw entries: bounds-check, sort, merge duplicates, drop
    /// zeros.
    pub fn new(shape: Vec<Coord>, mut raw: Vec<(Vec<Coord>, Value)>) -> Result<Self> {
        for (coords, _) in &raw {
            if coords.len() != shape.len() {
                return Err(Error::RankMismatch {
                    expected: shape.len(),
                    got: coords.len(),
                });
            }
            for (dim, (&c, &n)) in coords.iter().zip(shape.iter()).enumerate() {
                if c < 0 || c >= n {
                    return Err(Error::CoordOutOfBounds { dim, coord: c, extent: n });
                }
            }
        }
        raw.sort_by(|a, b| a.0.cmp(&b.0));
        let mut entries: Vec<(Vec<Coord>, Value)> = Vec::with_capacity(raw.len());
        for (coords, value) in raw {
            match entries.last_mut() {
                Some(last) if last.0 == coords => last.1 += value,
                _ => entries.push((coords, value)),
            }
        }
        entries.retain(|(_, v)| *v != 0.0);
        Ok(CooEntries { shape, entries })
    }

    pub fn shape(&self) -> &[Coord] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn entries(&self) -> &[(Vec<Coord>, Value)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A sparse tensor: shape, one level per dimension, and the leaf values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<Coord>,
    levels: Vec<Level>,
    vals: Vec<Value>,
}

impl Tensor {
    /// Assemble a tensor from canonical entries in the requested format.
    pub fn build(entries: &CooEntries, kinds: &[LevelKind]) -> Result<Tensor> {
        Tensor::pack(entries.shape(), entries.entries(), kinds)
    }

    /// Pack sorted, duplicate-free (coords, value) items into levels.
    /// Unlike [`Tensor::build`]'s canonical input, items may carry zero
    /// values, which stay stored; the engine uses this to materialize
    /// computed outputs structurally.
    pub(crate) fn pack(
        shape: &[Coord],
        items: &[(Vec<Coord>, Value)],
        kinds: &[LevelKind],
    ) -> Result<Tensor> {
        if kinds.len() != shape.len() {
            return Err(Error::RankMismatch {
                expected: shape.len(),
                got: kinds.len(),
            });
        }
        debug_assert!(items.windows(2).all(|w| w[0].0 < w[1].0), "items must be sorted unique");
        let shape = shape.to_vec();
        let rank = shape.len();

        // Each group is a run of entries sharing the coordinate prefix above
        // the current level, attached to one parent position.
        let mut groups: Vec<(Pos, usize, usize)> = vec![(0, 0, items.len())];
        let mut levels: Vec<Level> = Vec::with_capacity(rank);
        let mut parents: Pos = 1;

        for (k, &kind) in kinds.iter().enumerate() {
            // A compressed level packs one position per entry (and so keeps
            // duplicate coordinates) when only singleton levels sit below it.
            let unique = kinds[k + 1..].iter().any(|deeper| *deeper != LevelKind::Singleton);
            let mut next_groups: Vec<(Pos, usize, usize)> = Vec::new();
            match kind {
                LevelKind::Dense => {
                    let extent = shape[k];
                    let mut by_parent: Vec<(usize, usize)> = vec![(0, 0); (parents * extent) as usize];
                    for slot in by_parent.iter_mut() {
                        *slot = (usize::MAX, usize::MAX);
                    }
                    for &(parent, start, end) in &groups {
                        let mut i = start;
                        while i < end {
                            let c = items[i].0[k];
                            let mut j = i;
                            while j < end && items[j].0[k] == c {
                                j += 1;
                            }
                            by_parent[(parent * extent + c) as usize] = (i, j);
                            i = j;
                        }
                    }
                    for (slot, &(s, e)) in by_parent.iter().enumerate() {
                        if s == usize::MAX {
                            next_groups.push((slot as Pos, 0, 0));
                        } else {
                            next_groups.push((slot as Pos, s, e));
                        }
                    }
                    levels.push(Level::Dense { extent });
                    parents *= extent;
                }
                LevelKind::Compressed => {
                    let mut pos: Vec<Pos> = Vec::with_capacity(parents as usize + 1);
                    let mut crd: Vec<Coord> = Vec::new();
                    pos.push(0);
                    let mut by_parent: Vec<(usize, usize)> = vec![(0, 0); parents as usize];
                    for &(parent, start, end) in &groups {
                        by_parent[parent as usize] = (start, end);
                    }
                    for &(start, end) in &by_parent {
                        let mut i = start;
                        while i < end {
                            let c = items[i].0[k];
                            if unique {
                                let mut j = i;
                                while j < end && items[j].0[k] == c {
                                    j += 1;
                                }
                                next_groups.push((crd.len() as Pos, i, j));
                                crd.push(c);
                                i = j;
                            } else {
                                next_groups.push((crd.len() as Pos, i, i + 1));
                                crd.push(c);
                                i += 1;
                            }
                        }
                        pos.push(crd.len() as Pos);
                    }
                    parents = crd.len() as Pos;
                    levels.push(Level::Compressed { pos, crd });
                }
                LevelKind::Singleton => {
                    let mut crd: Vec<Coord> = Vec::with_capacity(parents as usize);
                    for &(parent, start, end) in &groups {
                        debug_assert_eq!(end - start, 1, "singleton parent must hold one entry");
                        debug_assert_eq!(parent as usize, crd.len());
                        let _ = parent;
                        crd.push(items[start].0[k]);
                        next_groups.push((crd.len() as Pos - 1, start, end));
                    }
                    levels.push(Level::Singleton { crd });
                }
            }
            groups = next_groups;
        }

        let mut vals = vec![0.0; parents.max(0) as usize];
        for &(slot, start, end) in &groups {
            if start < end {
                debug_assert_eq!(end - start, 1);
                vals[slot as usize] = items[start].1;
            }
        }

        let t = Tensor { shape, levels, vals };
        debug_assert!(t.validate().is_ok(), "build produced an invalid tensor");
        Ok(t)
    }

    /// Shortcut: canonicalize raw entries, then build.
    pub fn from_raw(
        shape: Vec<Coord>,
        raw: Vec<(Vec<Coord>, Value)>,
        kinds: &[LevelKind],
    ) -> Result<Tensor> {
        Tensor::build(&CooEntries::new(shape, raw)?, kinds)
    }

    /// Flatten back to canonical entries (structural zeros are dropped).
    pub fn to_coo(&self) -> CooEntries {
        let mut out: Vec<(Vec<Coord>, Value)> = Vec::with_capacity(self.vals.len());
        let mut coords = vec![0; self.rank()];
        self.walk_positions(0, 0, &mut coords, &mut out);
        CooEntries {
            shape: self.shape.clone(),
            entries: out.into_iter().filter(|(_, v)| *v != 0.0).collect(),
        }
    }

    fn walk_positions(
        &self,
        level: usize,
        parent: Pos,
        coords: &mut Vec<Coord>,
        out: &mut Vec<(Vec<Coord>, Value)>,
    ) {
        let lo = self.levels[level].child_start(parent);
        let hi = self.levels[level].child_start(parent + 1);
        for p in lo..hi {
            coords[level] = match &self.levels[level] {
                Level::Dense { extent } => p - parent * extent,
                Level::Compressed { crd, .. } => crd[p as usize],
                Level::Singleton { crd } => crd[p as usize],
            };
            if level + 1 == self.rank() {
                out.push((coords.clone(), self.vals[p as usize]));
            } else {
                self.walk_positions(level + 1, p, coords, out);
            }
        }
    }

    /// Re-house the same entries in another format.
    pub fn convert(&self, kinds: &[LevelKind]) -> Result<Tensor> {
        Tensor::build(&self.to_coo(), kinds)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[Coord] {
        &self.shape
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &Level {
        &self.levels[k]
    }

    pub fn vals(&self) -> &[Value] {
        &self.vals
    }

    /// Number of leaf positions (stored slots, including dense zeros).
    pub fn leaf_count(&self) -> Pos {
        self.vals.len() as Pos
    }

    /// Number of logically stored entries (for all-sparse formats this
    /// equals `leaf_count`).
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Index of the first leaf slot under the subtree starting at position
    /// `p` of level `lvl`; `p` may be the one-past-the-end position. The
    /// difference of two `leaf_start` calls counts leaves in a position
    /// range.
    pub fn leaf_start(&self, lvl: usize, p: Pos) -> Pos {
        let mut q = p;
        for k in (lvl + 1)..self.levels.len() {
            q = self.levels[k].child_start(q);
        }
        q
    }

    /// Largest run of equal coordinates in the last level (1 for unique
    /// formats); bounds the per-coordinate cost jump of truncated tensors.
    pub fn last_level_max_run(&self) -> i64 {
        let last = self.levels.last().expect("rank >= 1");
        let crd = match last.crd() {
            Some(crd) if !crd.is_empty() => crd,
            _ => return 1,
        };
        let mut best = 1i64;
        let mut run = 1i64;
        for w in crd.windows(2) {
            if w[0] == w[1] {
                run += 1;
                best = best.max(run);
            } else {
                run = 1;
            }
        }
        best
    }

    /// Check the structural invariants of every level.
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != self.shape.len() {
            return Err(Error::RankMismatch {
                expected: self.shape.len(),
                got: self.levels.len(),
            });
        }
        let mut parents: Pos = 1;
        for (k, level) in self.levels.iter().enumerate() {
            let unique = self.levels[k + 1..]
                .iter()
                .any(|deeper| deeper.kind() != LevelKind::Singleton);
            match level {
                Level::Dense { extent } => {
                    if *extent <= 0 || *extent != self.shape[k] {
                        return Err(Error::ShapeMismatch(
                            "dense level extent must match the shape".to_string(),
                        ));
                    }
                }
                Level::Compressed { pos, crd } => {
                    if pos.len() != parents as usize + 1 || pos[0] != 0 {
                        return Err(Error::ShapeMismatch(
                            "compressed pos length must be parents + 1".to_string(),
                        ));
                    }
                    if pos.windows(2).any(|w| w[0] > w[1]) {
                        return Err(Error::ShapeMismatch("pos must be non-decreasing".to_string()));
                    }
                    if crd.len() as Pos != *pos.last().unwrap() {
                        return Err(Error::ShapeMismatch(
                            "crd length must equal pos[last]".to_string(),
                        ));
                    }
                    for w in pos.windows(2) {
                        for q in w[0]..w[1] {
                            let c = crd[q as usize];
                            if c < 0 || c >= self.shape[k] {
                                return Err(Error::CoordOutOfBounds {
                                    dim: k,
                                    coord: c,
                                    extent: self.shape[k],
                                });
                            }
                            if q > w[0] {
                                let prev = crd[q as usize - 1];
                                let ok = if unique { prev < c } else { prev <= c };
                                if !ok {
                                    return Err(Error::ShapeMismatch(
                                        "crd must be sorted within each segment".to_string(),
                                    ));
                                }
                            }
                        }
                    }
                }
                Level::Singleton { crd } => {
                    if crd.len() as Pos != parents {
                        return Err(Error::ShapeMismatch(
                            "singleton crd length must equal parent count".to_string(),
                        ));
                    }
                    for &c in crd {
                        if c < 0 || c >= self.shape[k] {
                            return Err(Error::CoordOutOfBounds {
                                dim: k,
                                coord: c,
                                extent: self.shape[k],
                            });
                        }
                    }
                }
            }
            parents = level.position_count(parents);
        }
        if self.vals.len() as Pos != parents {
            return Err(Error::ShapeMismatch(
                "value array length must equal leaf position count".to_string(),
            ));
        }
        Ok(())
    }

    /// FNV-1a hash over shape, level structure, and value bits. Two tensors
    /// hash equal iff their stored representation is bit-identical.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.push(self.shape.len() as u64);
        for &n in &self.shape {
            h.push(n as u64);
        }
        for level in &self.levels {
            match level {
                Level::Dense { extent } => {
                    h.push(0);
                    h.push(*extent as u64);
                }
                Level::Compressed { pos, crd } => {
                    h.push(1);
                    for &p in pos {
                        h.push(p as u64);
                    }
                    h.push(u64::MAX);
                    for &c in crd {
                        h.push(c as u64);
                    }
                }
                Level::Singleton { crd } => {
                    h.push(2);
                    for &c in crd {
                        h.push(c as u64);
                    }
                }
            }
        }
        for &v in &self.vals {
            h.push(v.to_bits());
        }
        h.finish()
    }

    /// Construct directly from parts; validates.
    pub fn from_parts(shape: Vec<Coord>, levels: Vec<Level>, vals: Vec<Value>) -> Result<Tensor> {
        let t = Tensor { shape, levels, vals };
        t.validate()?;
        Ok(t)
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn push(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Format shorthands.
pub mod formats {
    use super::LevelKind::{self, *};
    use alloc::vec;
    use alloc::vec::Vec;

    pub fn csr() -> Vec<LevelKind> {
        vec![Dense, Compressed]
    }
    pub fn dcsr() -> Vec<LevelKind> {
        vec![Compressed, Compressed]
    }
    /// COO of any rank: compressed outer level, singleton inner levels.
    pub fn coo(rank: usize) -> Vec<LevelKind> {
        let mut kinds = vec![Compressed];
        kinds.extend(core::iter::repeat(Singleton).take(rank - 1));
        kinds
    }
    pub fn csf(rank: usize) -> Vec<LevelKind> {
        vec![Compressed; rank]
    }
    pub fn dense_vec() -> Vec<LevelKind> {
        vec![Dense]
    }
    pub fn sparse_vec() -> Vec<LevelKind> {
        vec![Compressed]
    }
}
