//! The compressed counting trie.
//!
//! Every inserted key walks a root-to-leaf path, most significant bit first,
//! and increments one counter per level. Level `l` therefore holds `2^l`
//! logical counters and the in-order walk of the leaves is ascending key order.
//!
//! Storage is split in two regions:
//!
//! * **Dense**: levels `0..=dense_depth` are flat bit-packed arrays. A node's
//!   address is computed from `(level, path prefix)` alone, so no identifiers or
//!   child references are stored. Each level is allocated on first touch.
//! * **Sparse**: deeper levels are explicitly allocated nodes with child
//!   references, created on demand and published exactly once.
//!
//! Dense counters are tapered: level `l` starts at
//! [`counter_width`]`(l, capacity)` bits. A counter that would overflow its
//! width promotes the whole level by [`PROMOTION_STEP`] bits, so counts are
//! always exact. Concurrent inserters never promote; they park the carry in a
//! per-level spill table that [`FractalHistogram::consolidate`] folds back in.
//!
//! Reads (`get_item`, `get_index`, `footprint_bytes`, dumps) require that no
//! writer is active.
//!
//! # Footprint bound
//!
//! For a layout whose dense region covers the whole trie and whose trie depth
//! is at most `ceil(log2(n))` (the configuration the sorter uses),
//!
//! ```text
//! footprint_bytes <= HEADER + 8 * (depth + 1) + FOOTPRINT_CONSTANT * min(n, 2^p) * w_avg
//! ```
//!
//! with `w_avg` the slot-weighted mean counter width in bytes. The constant
//! covers two factors of two: the level sizes sum to `2^(depth+1)` and lane
//! packing wastes at most half of a word. Sparse nodes cost
//! [`SPARSE_NODE_BYTES`] each and there are at most `n` of them per sparse level.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};

use crate::error::HistogramError;
use crate::packed::{low_mask, PackedCounters};

/// Deepest level that may use implicit addressing.
pub const MAX_DENSE_DEPTH: u32 = 32;
pub const DEFAULT_MIN_COUNTER_WIDTH: u32 = 4;
/// Bits added to a level's counters when one of them overflows.
pub const PROMOTION_STEP: u32 = 4;
pub const FOOTPRINT_CONSTANT: f64 = 8.0;
pub const SPARSE_NODE_BYTES: usize = std::mem::size_of::<SparseNode>();
const SPILL_ENTRY_BYTES: usize = 24;

/// Number of bits needed to represent `value` (`ceil(log2(value + 1))`).
#[inline]
pub(crate) fn bit_len(value: u64) -> u32 {
    64 - value.leading_zeros()
}

/// Initial counter width for `level` in a trie sized for `capacity` keys.
///
/// A balanced subtree halves at every level, so one bit is dropped per level
/// down to `min_width`.
pub fn counter_width(level: u32, capacity: u64, min_width: u32) -> u32 {
    let top = bit_len(capacity.max(1));
    top.saturating_sub(level).max(min_width).clamp(1, 64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramLayout {
    precision_bits: u32,
    trie_depth: u32,
    dense_depth: u32,
    capacity_hint: u64,
    min_counter_width: u32,
}

impl HistogramLayout {
    /// Layout for a full-precision trie sized for `capacity_hint` keys.
    pub fn new(precision_bits: u32, capacity_hint: u64) -> Result<Self, HistogramError> {
        Self::builder(precision_bits)
            .capacity_hint(capacity_hint)
            .build()
    }

    pub fn builder(precision_bits: u32) -> LayoutBuilder {
        LayoutBuilder {
            precision_bits,
            trie_depth: None,
            dense_depth: None,
            capacity_hint: 1,
            min_counter_width: DEFAULT_MIN_COUNTER_WIDTH,
        }
    }

    pub fn precision_bits(&self) -> u32 {
        self.precision_bits
    }

    pub fn trie_depth(&self) -> u32 {
        self.trie_depth
    }

    pub fn dense_depth(&self) -> u32 {
        self.dense_depth
    }

    pub fn capacity_hint(&self) -> u64 {
        self.capacity_hint
    }

    pub fn min_counter_width(&self) -> u32 {
        self.min_counter_width
    }

    /// Initial width of the counters at `level`.
    pub fn counter_width(&self, level: u32) -> u32 {
        counter_width(level, self.capacity_hint, self.min_counter_width)
    }

    fn same_paths(&self, other: &HistogramLayout) -> bool {
        self.precision_bits == other.precision_bits
            && self.trie_depth == other.trie_depth
            && self.dense_depth == other.dense_depth
    }
}

#[derive(Debug, Clone)]
pub struct LayoutBuilder {
    precision_bits: u32,
    trie_depth: Option<u32>,
    dense_depth: Option<u32>,
    capacity_hint: u64,
    min_counter_width: u32,
}

impl LayoutBuilder {
    pub fn trie_depth(mut self, depth: u32) -> Self {
        self.trie_depth = Some(depth);
        self
    }

    pub fn dense_depth(mut self, depth: u32) -> Self {
        self.dense_depth = Some(depth);
        self
    }

    pub fn capacity_hint(mut self, capacity: u64) -> Self {
        self.capacity_hint = capacity.max(1);
        self
    }

    pub fn min_counter_width(mut self, width: u32) -> Self {
        self.min_counter_width = width;
        self
    }

    pub fn build(self) -> Result<HistogramLayout, HistogramError> {
        let p = self.precision_bits;
        if !(1..=64).contains(&p) {
            return Err(HistogramError::InvalidLayout(format!(
                "precision {p} must be in 1..=64"
            )));
        }
        let trie_depth = self.trie_depth.unwrap_or(p);
        if trie_depth > p {
            return Err(HistogramError::InvalidLayout(format!(
                "trie depth {trie_depth} exceeds precision {p}"
            )));
        }
        if !(1..=64).contains(&self.min_counter_width) {
            return Err(HistogramError::InvalidLayout(format!(
                "minimum counter width {} must be in 1..=64",
                self.min_counter_width
            )));
        }
        let dense_depth = match self.dense_depth {
            Some(d) => d,
            None => trie_depth
                .min(MAX_DENSE_DEPTH)
                .min(bit_len(self.capacity_hint)),
        };
        if dense_depth > trie_depth || dense_depth > MAX_DENSE_DEPTH {
            return Err(HistogramError::InvalidLayout(format!(
                "dense depth {dense_depth} must be at most min(trie depth {trie_depth}, {MAX_DENSE_DEPTH})"
            )));
        }
        if dense_depth == 0 && trie_depth > 0 {
            return Err(HistogramError::InvalidLayout(
                "dense depth must be at least 1".into(),
            ));
        }
        Ok(HistogramLayout {
            precision_bits: p,
            trie_depth,
            dense_depth,
            capacity_hint: self.capacity_hint,
            min_counter_width: self.min_counter_width,
        })
    }
}

#[derive(Debug)]
struct DenseLevel {
    counters: PackedCounters,
    has_spill: AtomicBool,
    spill: Mutex<HashMap<usize, u64>>,
}

impl DenseLevel {
    fn new(slots: usize, width: u32) -> Self {
        DenseLevel {
            counters: PackedCounters::new(slots, width),
            has_spill: AtomicBool::new(false),
            spill: Mutex::new(HashMap::new()),
        }
    }

    #[inline]
    fn value(&self, index: usize) -> u64 {
        let field = self.counters.get(index);
        if self.has_spill.load(Ordering::Relaxed) {
            field + self.spill.lock().unwrap().get(&index).copied().unwrap_or(0)
        } else {
            field
        }
    }

    fn add_shared(&self, index: usize, amount: u64) {
        let carry = self.counters.add_shared(index, amount);
        if carry > 0 {
            let mut spill = self.spill.lock().unwrap();
            *spill.entry(index).or_insert(0) += carry as u64;
            self.has_spill.store(true, Ordering::Relaxed);
        }
    }

    #[inline]
    fn add_exclusive(&mut self, index: usize, amount: u64) -> bool {
        if self.counters.try_add(index, amount) {
            return false;
        }
        let needed = self.counters.get(index) + amount;
        self.promote_to(needed);
        let ok = self.counters.try_add(index, amount);
        debug_assert!(ok);
        true
    }

    /// Widens the level until `needed` fits.
    fn promote_to(&mut self, needed: u64) {
        let mut width = self.counters.width();
        while low_mask(width) < needed {
            width = (width + PROMOTION_STEP).min(64);
        }
        if width != self.counters.width() {
            self.counters = self.counters.repack(width);
        }
    }

    fn consolidate(&mut self) -> bool {
        if !*self.has_spill.get_mut() {
            return false;
        }
        let spill = std::mem::take(self.spill.get_mut().unwrap());
        let needed = spill
            .iter()
            .map(|(&i, &extra)| self.counters.get(i) + extra)
            .max()
            .unwrap_or(0);
        self.promote_to(needed);
        for (i, extra) in spill {
            let v = self.counters.get(i) + extra;
            self.counters.set(i, v);
        }
        *self.has_spill.get_mut() = false;
        true
    }

    fn heap_bytes(&self) -> usize {
        self.counters.heap_bytes() + self.spill.lock().unwrap().len() * SPILL_ENTRY_BYTES
    }
}

impl Clone for DenseLevel {
    fn clone(&self) -> Self {
        DenseLevel {
            counters: self.counters.clone(),
            has_spill: AtomicBool::new(self.has_spill.load(Ordering::Relaxed)),
            spill: Mutex::new(self.spill.lock().unwrap().clone()),
        }
    }
}

/// Explicit node below the dense region.
#[derive(Debug, Default)]
pub struct SparseNode {
    counter: AtomicU64,
    children: [OnceLock<Box<SparseNode>>; 2],
}

impl SparseNode {
    pub fn counter(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }

    pub fn child(&self, bit: usize) -> Option<&SparseNode> {
        self.children[bit].get().map(|b| &**b)
    }

    fn deep_clone(&self) -> SparseNode {
        let node = SparseNode {
            counter: AtomicU64::new(self.counter()),
            children: Default::default(),
        };
        for bit in 0..2 {
            if let Some(child) = self.child(bit) {
                let _ = node.children[bit].set(Box::new(child.deep_clone()));
            }
        }
        node
    }
}

#[derive(Debug, Default)]
struct NodeStats {
    live: AtomicU64,
    created: AtomicU64,
}

/// Publish-once child lookup. Concurrent creators converge on one node.
#[inline]
fn get_or_create<'a>(slot: &'a OnceLock<Box<SparseNode>>, stats: &NodeStats) -> &'a SparseNode {
    slot.get_or_init(|| {
        stats.live.fetch_add(1, Ordering::Relaxed);
        stats.created.fetch_add(1, Ordering::Relaxed);
        Box::default()
    })
}

/// Adds `src` into `dst` depth-first, adopting subtrees `dst` lacks.
/// Returns the number of `src` nodes that were folded into existing nodes.
fn merge_nodes(dst: &mut SparseNode, src: SparseNode) -> u64 {
    *dst.counter.get_mut() += src.counter.into_inner();
    let mut folded = 1;
    for (dst_child, src_child) in dst.children.iter_mut().zip(src.children) {
        if let Some(src_child) = src_child.into_inner() {
            match dst_child.get_mut() {
                Some(existing) => folded += merge_nodes(existing, *src_child),
                None => {
                    let _ = dst_child.set(src_child);
                }
            }
        }
    }
    folded
}

fn visit_sparse(node: &SparseNode, level: u32, prefix: u64, f: &mut impl FnMut(u32, u64, u64)) {
    f(level, prefix, node.counter());
    for bit in 0..2 {
        if let Some(child) = node.child(bit) {
            visit_sparse(child, level + 1, (prefix << 1) | bit as u64, f);
        }
    }
}

/// Address of a trie node.
#[derive(Debug, Clone, Copy)]
pub enum Slot<'a> {
    /// Implicit address: index `index` inside the packed array of `level`.
    Dense { level: u32, index: u64 },
    Sparse(&'a SparseNode),
}

type SparseRoots = Box<[OnceLock<Box<SparseNode>>]>;

#[derive(Debug)]
pub struct FractalHistogram {
    layout: HistogramLayout,
    levels: Box<[OnceLock<DenseLevel>]>,
    /// Nodes at level `dense_depth + 1`, indexed by their path prefix.
    sparse_roots: OnceLock<SparseRoots>,
    total: AtomicU64,
    nodes: NodeStats,
    level_allocations: AtomicU64,
    promotions: u64,
}

impl FractalHistogram {
    pub fn new(layout: HistogramLayout) -> Self {
        let dense_levels = layout.dense_depth.min(layout.trie_depth) as usize + 1;
        FractalHistogram {
            layout,
            levels: (0..dense_levels).map(|_| OnceLock::new()).collect(),
            sparse_roots: OnceLock::new(),
            total: AtomicU64::new(0),
            nodes: NodeStats::default(),
            level_allocations: AtomicU64::new(0),
            promotions: 0,
        }
    }

    pub fn layout(&self) -> &HistogramLayout {
        &self.layout
    }

    pub fn total_count(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.total_count() == 0
    }

    /// Number of dense levels and sparse nodes allocated by this histogram.
    pub fn allocation_count(&self) -> u64 {
        self.level_allocations.load(Ordering::Relaxed) + self.nodes.created.load(Ordering::Relaxed)
    }

    /// Number of level width promotions performed so far.
    pub fn promotion_count(&self) -> u64 {
        self.promotions
    }

    pub fn sparse_node_count(&self) -> u64 {
        self.nodes.live.load(Ordering::Relaxed)
    }

    /// Current counter width of a dense level, if it has been allocated.
    pub fn level_width(&self, level: u32) -> Option<u32> {
        self.dense_level(level).map(|l| l.counters.width())
    }

    #[inline]
    fn dense_top(&self) -> u32 {
        self.layout.dense_depth.min(self.layout.trie_depth)
    }

    #[inline]
    fn prefix(&self, key: u64, level: u32) -> u64 {
        if level == 0 {
            0
        } else {
            key >> (self.layout.precision_bits - level)
        }
    }

    #[inline]
    fn check_key(&self, key: u64) -> Result<(), HistogramError> {
        let p = self.layout.precision_bits;
        if p < 64 && key >> p != 0 {
            return Err(HistogramError::KeyOutOfRange { key, precision: p });
        }
        Ok(())
    }

    fn new_level(&self, level: u32) -> DenseLevel {
        self.level_allocations.fetch_add(1, Ordering::Relaxed);
        DenseLevel::new(1usize << level, self.layout.counter_width(level))
    }

    #[inline]
    fn dense_level(&self, level: u32) -> Option<&DenseLevel> {
        self.levels.get(level as usize).and_then(OnceLock::get)
    }

    fn dense_level_mut(&mut self, level: u32) -> &mut DenseLevel {
        let idx = level as usize;
        if self.levels[idx].get().is_none() {
            let fresh = self.new_level(level);
            let _ = self.levels[idx].set(fresh);
        }
        self.levels[idx].get_mut().expect("level initialized above")
    }

    fn roots(&self) -> &SparseRoots {
        self.sparse_roots.get_or_init(|| {
            let slots = 1usize << (self.dense_top() + 1);
            (0..slots).map(|_| OnceLock::new()).collect()
        })
    }

    #[inline]
    fn sparse_root(&self, prefix: u64) -> Option<&SparseNode> {
        self.sparse_roots
            .get()
            .and_then(|roots| roots[prefix as usize].get())
            .map(|b| &**b)
    }

    #[inline]
    fn add_sparse_path(&self, key: u64, amount: u64) {
        let depth = self.layout.trie_depth;
        let first = self.dense_top() + 1;
        if first > depth {
            return;
        }
        let roots = self.roots();
        let mut node = get_or_create(&roots[self.prefix(key, first) as usize], &self.nodes);
        node.counter.fetch_add(amount, Ordering::Relaxed);
        for level in first + 1..=depth {
            let bit = (self.prefix(key, level) & 1) as usize;
            node = get_or_create(&node.children[bit], &self.nodes);
            node.counter.fetch_add(amount, Ordering::Relaxed);
        }
    }

    /// Counts one occurrence of `key`.
    #[inline]
    pub fn insert(&mut self, key: u64) -> Result<(), HistogramError> {
        self.insert_weighted(key, 1)
    }

    /// Adds `amount` to every counter on the path of `key`.
    #[inline]
    pub fn insert_weighted(&mut self, key: u64, amount: u64) -> Result<(), HistogramError> {
        self.check_key(key)?;
        let p = self.layout.precision_bits;
        for (level, slot) in self.levels.iter_mut().enumerate() {
            let lvl = match slot.get_mut() {
                Some(lvl) => lvl,
                None => {
                    self.level_allocations.fetch_add(1, Ordering::Relaxed);
                    let width = self.layout.counter_width(level as u32);
                    let _ = slot.set(DenseLevel::new(1usize << level, width));
                    slot.get_mut().expect("level initialized above")
                }
            };
            let index = key.checked_shr(p - level as u32).unwrap_or(0) as usize;
            if lvl.add_exclusive(index, amount) {
                self.promotions += 1;
            }
        }
        self.add_sparse_path(key, amount);
        *self.total.get_mut() += amount;
        Ok(())
    }

    /// Counts one occurrence of `key` from any thread.
    ///
    /// Counter overflow is parked in a spill table instead of promoting the
    /// level; call [`consolidate`](Self::consolidate) once writers are done to
    /// restore the packed-only representation. Reads are exact either way.
    pub fn insert_shared(&self, key: u64) -> Result<(), HistogramError> {
        self.check_key(key)?;
        for level in 0..=self.dense_top() {
            let index = self.prefix(key, level) as usize;
            let lvl = self.levels[level as usize].get_or_init(|| self.new_level(level));
            lvl.add_shared(index, 1);
        }
        self.add_sparse_path(key, 1);
        self.total.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Folds spilled carries back into widened levels.
    pub fn consolidate(&mut self) {
        let mut promoted = 0;
        for level in self.levels.iter_mut() {
            if let Some(level) = level.get_mut() {
                if level.consolidate() {
                    promoted += 1;
                }
            }
        }
        self.promotions += promoted;
    }

    /// Address of the node at `(level, prefix)`; allocates sparse nodes on the
    /// way down if they do not exist yet.
    pub fn child_slot(&self, level: u32, prefix: u64) -> Result<Slot<'_>, HistogramError> {
        if level > self.layout.trie_depth || (level < 64 && prefix >> level != 0) {
            return Err(HistogramError::SlotOutOfRange { level, prefix });
        }
        let top = self.dense_top();
        if level <= top {
            return Ok(Slot::Dense { level, index: prefix });
        }
        let first = top + 1;
        let roots = self.roots();
        let root_prefix = prefix >> (level - first);
        let mut node = get_or_create(&roots[root_prefix as usize], &self.nodes);
        for l in first + 1..=level {
            let bit = ((prefix >> (level - l)) & 1) as usize;
            node = get_or_create(&node.children[bit], &self.nodes);
        }
        Ok(Slot::Sparse(node))
    }

    /// Counter of the node at `(level, prefix)`; zero if it was never touched.
    pub fn counter(&self, level: u32, prefix: u64) -> u64 {
        if level > self.layout.trie_depth || (level < 64 && prefix >> level != 0) {
            return 0;
        }
        let top = self.dense_top();
        if level <= top {
            return self
                .dense_level(level)
                .map_or(0, |l| l.value(prefix as usize));
        }
        let first = top + 1;
        let mut node = match self.sparse_root(prefix >> (level - first)) {
            Some(n) => n,
            None => return 0,
        };
        for l in first + 1..=level {
            let bit = ((prefix >> (level - l)) & 1) as usize;
            node = match node.child(bit) {
                Some(n) => n,
                None => return 0,
            };
        }
        node.counter()
    }

    /// Walks root to leaf. `choose(level, left_child_count)` returns `true` to
    /// descend right. Returns the leaf prefix.
    fn walk(&self, mut choose: impl FnMut(u32, u64) -> bool) -> u64 {
        let depth = self.layout.trie_depth;
        let top = self.dense_top();
        let mut prefix = 0u64;
        let mut node: Option<&SparseNode> = None;
        for level in 0..depth {
            let child_level = level + 1;
            let left = prefix << 1;
            let left_count = if child_level <= top {
                self.dense_level(child_level)
                    .map_or(0, |l| l.value(left as usize))
            } else if child_level == top + 1 {
                self.sparse_root(left).map_or(0, SparseNode::counter)
            } else {
                node.and_then(|n| n.child(0)).map_or(0, SparseNode::counter)
            };
            let bit = choose(level, left_count) as u64;
            let next = left | bit;
            if child_level == top + 1 {
                node = self.sparse_root(next);
            } else if child_level > top + 1 {
                node = node.and_then(|n| n.child(bit as usize));
            }
            prefix = next;
        }
        prefix
    }

    fn leaf_to_key(&self, prefix: u64) -> u64 {
        let depth = self.layout.trie_depth;
        if depth == 0 {
            0
        } else {
            prefix << (self.layout.precision_bits - depth)
        }
    }

    /// Key at 0-based position `rank` of the ascending multiset, or
    /// `default_value` when `rank` is out of range.
    ///
    /// With a trie shallower than the precision, the low untracked bits of the
    /// returned key are zero.
    pub fn get_item(&self, rank: u64, default_value: u64) -> u64 {
        if rank >= self.total_count() {
            return default_value;
        }
        let mut remaining = rank;
        let leaf = self.walk(|_, left| {
            if remaining < left {
                false
            } else {
                remaining -= left;
                true
            }
        });
        self.leaf_to_key(leaf)
    }

    /// Number of inserted keys strictly less than `value` (the lower-bound
    /// rank). Values past the key domain return the total count.
    pub fn get_index(&self, value: u64) -> u64 {
        let p = self.layout.precision_bits;
        if p < 64 && value >> p != 0 {
            return self.total_count();
        }
        let mut index = 0;
        self.walk(|level, left| {
            let right = (value >> (p - 1 - level)) & 1 == 1;
            if right {
                index += left;
            }
            right
        });
        index
    }

    /// Adds every counter of `other` into `self`.
    pub fn merge(&mut self, mut other: FractalHistogram) -> Result<(), HistogramError> {
        if !self.layout.same_paths(&other.layout) {
            return Err(HistogramError::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.layout, other.layout
            )));
        }
        self.consolidate();
        other.consolidate();
        for level in 0..=self.dense_top() {
            let Some(theirs) = other.levels[level as usize].take() else {
                continue;
            };
            let ours = self.dense_level_mut(level);
            let needed = (0..theirs.counters.len())
                .map(|i| ours.counters.get(i) + theirs.counters.get(i))
                .max()
                .unwrap_or(0);
            let before = ours.counters.width();
            ours.promote_to(needed);
            let promoted = ours.counters.width() != before;
            for (i, v) in theirs.counters.iter().enumerate() {
                if v != 0 {
                    let sum = ours.counters.get(i) + v;
                    ours.counters.set(i, sum);
                }
            }
            if promoted {
                self.promotions += 1;
            }
        }
        if let Some(their_roots) = other.sparse_roots.take() {
            let adopted = *other.nodes.live.get_mut();
            let mut folded = 0;
            self.roots();
            let roots = self.sparse_roots.get_mut().expect("roots initialized above");
            for (dst, src) in roots.iter_mut().zip(their_roots.into_vec()) {
                if let Some(src) = src.into_inner() {
                    match dst.get_mut() {
                        Some(existing) => folded += merge_nodes(existing, *src),
                        None => {
                            let _ = dst.set(src);
                        }
                    }
                }
            }
            *self.nodes.live.get_mut() += adopted - folded;
        }
        *self.total.get_mut() += other.total_count();
        Ok(())
    }

    /// Visits every materialized node as `(level, prefix, counter)`.
    ///
    /// Dense levels report only nonzero counters of allocated levels; sparse
    /// nodes are reported whenever they exist.
    pub fn for_each_node(&self, mut f: impl FnMut(u32, u64, u64)) {
        for level in 0..=self.dense_top() {
            if let Some(lvl) = self.dense_level(level) {
                for i in 0..lvl.counters.len() {
                    let v = lvl.value(i);
                    if v != 0 {
                        f(level, i as u64, v);
                    }
                }
            }
        }
        if let Some(roots) = self.sparse_roots.get() {
            let first = self.dense_top() + 1;
            for (prefix, slot) in roots.iter().enumerate() {
                if let Some(node) = slot.get() {
                    visit_sparse(node, first, prefix as u64, &mut f);
                }
            }
        }
    }

    /// All counters of level `level` in prefix order. Only for dense levels.
    pub fn level_counts(&self, level: u32) -> Option<Vec<u64>> {
        if level > self.dense_top() {
            return None;
        }
        let slots = 1usize << level;
        Some(match self.dense_level(level) {
            Some(lvl) => (0..slots).map(|i| lvl.value(i)).collect(),
            None => vec![0; slots],
        })
    }

    pub fn level_sum(&self, level: u32) -> u64 {
        let mut sum = 0;
        self.for_each_node(|l, _, c| {
            if l == level {
                sum += c;
            }
        });
        sum
    }

    /// Largest counter at `level`: the number of insertions that touched the
    /// busiest node of that level.
    pub fn max_counter(&self, level: u32) -> u64 {
        let mut max = 0;
        self.for_each_node(|l, _, c| {
            if l == level {
                max = max.max(c);
            }
        });
        max
    }

    /// Fixed cost of an empty histogram.
    pub fn header_bytes(&self) -> usize {
        std::mem::size_of::<Self>() + self.levels.len() * std::mem::size_of::<OnceLock<DenseLevel>>()
    }

    /// Bytes held by counters, spill tables and sparse nodes, plus the header.
    pub fn footprint_bytes(&self) -> usize {
        let dense: usize = self
            .levels
            .iter()
            .filter_map(OnceLock::get)
            .map(DenseLevel::heap_bytes)
            .sum();
        let roots = self
            .sparse_roots
            .get()
            .map_or(0, |r| r.len() * std::mem::size_of::<OnceLock<Box<SparseNode>>>());
        self.header_bytes() + dense + roots + self.sparse_node_count() as usize * SPARSE_NODE_BYTES
    }

    /// Slot-weighted mean width of the allocated dense levels, in bytes.
    pub fn mean_counter_bytes(&self) -> f64 {
        let (mut bits, mut slots) = (0f64, 0f64);
        for lvl in self.levels.iter().filter_map(OnceLock::get) {
            bits += lvl.counters.len() as f64 * lvl.counters.width() as f64;
            slots += lvl.counters.len() as f64;
        }
        if slots == 0.0 {
            0.0
        } else {
            bits / slots / 8.0
        }
    }

    /// One line per materialized node: `level 0xprefix counter`, ordered by
    /// level then prefix.
    pub fn dump(&self) -> String {
        let mut nodes = Vec::new();
        self.for_each_node(|l, p, c| nodes.push((l, p, c)));
        nodes.sort_unstable();
        let mut out = String::new();
        for (l, p, c) in nodes {
            let _ = writeln!(out, "{l} {p:#x} {c}");
        }
        out
    }

    fn nonzero_nodes(&self) -> Vec<(u32, u64, u64)> {
        let mut nodes = Vec::new();
        self.for_each_node(|l, p, c| {
            if c != 0 {
                nodes.push((l, p, c));
            }
        });
        nodes.sort_unstable();
        nodes
    }
}

impl Clone for FractalHistogram {
    fn clone(&self) -> Self {
        let levels = self
            .levels
            .iter()
            .map(|l| {
                let cell = OnceLock::new();
                if let Some(level) = l.get() {
                    let _ = cell.set(level.clone());
                }
                cell
            })
            .collect();
        let sparse_roots = OnceLock::new();
        if let Some(roots) = self.sparse_roots.get() {
            let copy: SparseRoots = roots
                .iter()
                .map(|slot| {
                    let cell = OnceLock::new();
                    if let Some(node) = slot.get() {
                        let _ = cell.set(Box::new(node.deep_clone()));
                    }
                    cell
                })
                .collect();
            let _ = sparse_roots.set(copy);
        }
        FractalHistogram {
            layout: self.layout,
            levels,
            sparse_roots,
            total: AtomicU64::new(self.total_count()),
            nodes: NodeStats {
                live: AtomicU64::new(self.sparse_node_count()),
                created: AtomicU64::new(self.nodes.created.load(Ordering::Relaxed)),
            },
            level_allocations: AtomicU64::new(self.level_allocations.load(Ordering::Relaxed)),
            promotions: self.promotions,
        }
    }
}

/// Counter-for-counter equality over nonzero nodes.
impl PartialEq for FractalHistogram {
    fn eq(&self, other: &Self) -> bool {
        self.layout.same_paths(&other.layout)
            && self.total_count() == other.total_count()
            && self.nonzero_nodes() == other.nonzero_nodes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(p: u32, capacity: u64, keys: &[u64]) -> FractalHistogram {
        let mut h = FractalHistogram::new(HistogramLayout::new(p, capacity).unwrap());
        for &k in keys {
            h.insert(k).unwrap();
        }
        h
    }

    #[test]
    fn counter_width_examples() {
        assert_eq!(counter_width(0, 1024, 4), 11);
        assert_eq!(counter_width(5, 1024, 4), 6);
        assert_eq!(counter_width(10, 1024, 4), 4);
        assert_eq!(counter_width(0, u64::MAX, 1), 64);
    }

    #[test]
    fn counter_width_is_nonincreasing() {
        for capacity in [1u64, 7, 1000, 1 << 20, u64::MAX] {
            for level in 0..64 {
                assert!(counter_width(level + 1, capacity, 4) <= counter_width(level, capacity, 4));
            }
        }
    }

    #[test]
    fn single_key_path() {
        let h = hist(3, 1, &[0b101]);
        assert_eq!(h.total_count(), 1);
        assert_eq!(h.counter(0, 0), 1);
        assert_eq!(h.counter(1, 0b1), 1);
        assert_eq!(h.counter(2, 0b10), 1);
        assert_eq!(h.counter(3, 0b101), 1);
        assert_eq!(h.counter(3, 0b100), 0);
    }

    #[test]
    fn three_key_multiset() {
        for capacity in [1, 4, 1 << 10] {
            let h = hist(3, capacity, &[5, 1, 5]);
            assert_eq!(h.counter(0, 0), 3);
            assert_eq!(h.counter(1, 1), 2);
            assert_eq!(h.counter(1, 0), 1);
            assert_eq!(h.counter(3, 5), 2);
        }
    }

    #[test]
    fn repeated_zero_key() {
        let n = 1000;
        let h = hist(8, 1, &vec![0; n]);
        for level in 0..=8 {
            assert_eq!(h.counter(level, 0), n as u64);
        }
        assert!(h.promotion_count() > 0);
    }

    #[test]
    fn key_out_of_range() {
        let mut h = hist(4, 16, &[]);
        assert_eq!(
            h.insert(16),
            Err(HistogramError::KeyOutOfRange { key: 16, precision: 4 })
        );
        assert!(h.is_empty());
    }

    #[test]
    fn full_precision_keys() {
        let keys = [u64::MAX, 0, 1 << 63, u64::MAX];
        let h = hist(64, 4, &keys);
        assert_eq!(h.get_item(0, 7), 0);
        assert_eq!(h.get_item(1, 7), 1 << 63);
        assert_eq!(h.get_item(3, 7), u64::MAX);
        assert_eq!(h.get_index(u64::MAX), 2);
    }

    #[test]
    fn order_statistics_examples() {
        let h = hist(3, 3, &[1, 5, 5]);
        assert_eq!(h.get_item(0, 0), 1);
        assert_eq!(h.get_item(1, 0), 5);
        assert_eq!(h.get_item(2, 0), 5);
        assert_eq!(h.get_item(3, 99), 99);
        assert_eq!(h.get_index(5), 1);
        assert_eq!(h.get_index(0), 0);
        assert_eq!(h.get_index(3), 1);
        assert_eq!(h.get_index(6), 3);

        let empty = hist(3, 3, &[]);
        assert_eq!(empty.get_item(0, 0), 0);
        assert_eq!(empty.get_index(4), 0);

        assert_eq!(hist(3, 1, &[7]).get_item(0, 0), 7);
    }

    #[test]
    fn shallow_trie_reports_bucket_resolution() {
        let layout = HistogramLayout::builder(8).trie_depth(4).capacity_hint(4).build().unwrap();
        let mut h = FractalHistogram::new(layout);
        for k in [0x13, 0x1f, 0xa0] {
            h.insert(k).unwrap();
        }
        assert_eq!(h.get_item(1, 0), 0x10);
        assert_eq!(h.get_index(0xa5), 2);
    }

    #[test]
    fn child_slot_addressing() {
        let layout = HistogramLayout::builder(6).dense_depth(2).capacity_hint(8).build().unwrap();
        let h = FractalHistogram::new(layout);
        assert!(matches!(h.child_slot(0, 0), Ok(Slot::Dense { level: 0, index: 0 })));
        assert!(matches!(h.child_slot(2, 0b10), Ok(Slot::Dense { level: 2, index: 2 })));
        assert_eq!(h.sparse_node_count(), 0);
        assert!(matches!(h.child_slot(3, 0b101), Ok(Slot::Sparse(_))));
        assert_eq!(h.sparse_node_count(), 1);
        assert!(matches!(h.child_slot(5, 0b10110), Ok(Slot::Sparse(_))));
        assert_eq!(h.sparse_node_count(), 3);
        assert!(h.child_slot(2, 4).is_err());
        assert!(h.child_slot(7, 0).is_err());
    }

    #[test]
    fn dense_and_sparse_regions_agree() {
        let keys: Vec<u64> = (0..500u64).map(|i| (i * 2654435761) % 4096).collect();
        let all_dense = {
            let layout = HistogramLayout::builder(12).dense_depth(12).capacity_hint(500).build().unwrap();
            let mut h = FractalHistogram::new(layout);
            keys.iter().for_each(|&k| h.insert(k).unwrap());
            h
        };
        let mostly_sparse = {
            let layout = HistogramLayout::builder(12).dense_depth(3).capacity_hint(500).build().unwrap();
            let mut h = FractalHistogram::new(layout);
            keys.iter().for_each(|&k| h.insert(k).unwrap());
            h
        };
        assert!(mostly_sparse.sparse_node_count() > 0);
        let mut a = Vec::new();
        all_dense.for_each_node(|l, p, c| a.push((l, p, c)));
        let mut b = Vec::new();
        mostly_sparse.for_each_node(|l, p, c| b.push((l, p, c)));
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        for r in 0..500 {
            assert_eq!(all_dense.get_item(r, 0), mostly_sparse.get_item(r, 0));
        }
    }

    #[test]
    fn merge_matches_combined_insertion() {
        let a = hist(3, 4, &[1]);
        let b = hist(3, 4, &[5, 5]);
        let mut merged = a.clone();
        merged.merge(b.clone()).unwrap();
        assert_eq!(merged, hist(3, 4, &[1, 5, 5]));

        let mut reversed = b;
        reversed.merge(a.clone()).unwrap();
        assert_eq!(reversed, merged);

        let mut same = a.clone();
        same.merge(hist(3, 4, &[])).unwrap();
        assert_eq!(same, a);
    }

    #[test]
    fn merge_rejects_other_layouts() {
        let mut a = hist(3, 4, &[1]);
        let b = hist(4, 4, &[1]);
        assert!(matches!(a.merge(b), Err(HistogramError::LayoutMismatch(_))));
    }

    #[test]
    fn merge_adopts_sparse_subtrees() {
        let layout = HistogramLayout::builder(10).dense_depth(2).capacity_hint(4).build().unwrap();
        let mut a = FractalHistogram::new(layout);
        let mut b = FractalHistogram::new(layout);
        a.insert(3).unwrap();
        b.insert(1000).unwrap();
        b.insert(3).unwrap();
        a.merge(b).unwrap();
        assert_eq!(a.total_count(), 3);
        assert_eq!(a.get_item(0, 0), 3);
        assert_eq!(a.get_item(2, 0), 1000);
        // levels 3..=10 for two distinct paths that split at level 1
        assert_eq!(a.sparse_node_count(), 16);
    }

    #[test]
    fn golden_dump() {
        let h = hist(3, 4, &[5, 1, 5]);
        let expected = "0 0x0 3\n1 0x0 1\n1 0x1 2\n2 0x0 1\n2 0x2 2\n3 0x1 1\n3 0x5 2\n";
        assert_eq!(h.dump(), expected);
        let sparse = {
            let layout = HistogramLayout::builder(3).dense_depth(1).capacity_hint(4).build().unwrap();
            let mut h = FractalHistogram::new(layout);
            for k in [5, 1, 5] {
                h.insert(k).unwrap();
            }
            h
        };
        assert_eq!(sparse.dump(), expected);
    }

    #[test]
    fn empty_footprint_is_header_only() {
        let h = hist(16, 1 << 16, &[]);
        assert_eq!(h.footprint_bytes(), h.header_bytes());
    }

    #[test]
    fn single_key_footprint() {
        let h = hist(16, 1, &[0xbeef]);
        let skeleton = h.header_bytes()
            + (h.layout().dense_depth() as usize + 1) * 8
            + (2usize << h.layout().dense_depth()) * std::mem::size_of::<OnceLock<Box<SparseNode>>>();
        assert!(h.footprint_bytes() <= skeleton + 16 * SPARSE_NODE_BYTES);
    }

    #[test]
    fn shared_inserts_match_exclusive() {
        let keys: Vec<u64> = (0..20_000u64).map(|i| (i * 40503) % 1024).collect();
        let layout = HistogramLayout::builder(10).dense_depth(6).capacity_hint(16).build().unwrap();
        let mut shared = FractalHistogram::new(layout);
        std::thread::scope(|s| {
            for chunk in keys.chunks(5000) {
                let h = &shared;
                s.spawn(move || chunk.iter().for_each(|&k| h.insert_shared(k).unwrap()));
            }
        });
        let mut exclusive = FractalHistogram::new(layout);
        keys.iter().for_each(|&k| exclusive.insert(k).unwrap());
        assert_eq!(shared, exclusive);
        shared.consolidate();
        assert_eq!(shared, exclusive);
        assert_eq!(shared.counter(0, 0), 20_000);
    }

    #[test]
    fn footprint_grows_only_with_width() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let small: Vec<u64> = (0..1 << 16).map(|_| rng.random_range(0..1 << 16)).collect();
        let large: Vec<u64> = (0..1 << 20).map(|_| rng.random_range(0..1 << 16)).collect();
        let fs = hist(16, small.len() as u64, &small).footprint_bytes() as f64;
        let fl = hist(16, large.len() as u64, &large).footprint_bytes() as f64;
        assert!(fl <= fs * 2.0 * 1.3, "{fl} vs {fs}");
    }
}
