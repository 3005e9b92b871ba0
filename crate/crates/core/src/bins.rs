//! Key decomposition, packed entries, per-bin argsort and sorted-array
//! reconstruction.
//!
//! A `p`-bit key is split, most significant bits first, into
//!
//! ```text
//! | bin: l_n - l_b bits | offset: l_b bits | trailing: t = p - l_n bits |
//! ```
//!
//! The bin selects a contiguous segment of the entry array; the entry keeps
//! `(offset << t) | trailing`. Bins are stored and enumerated in ascending
//! numeric order, so walking bins and emitting each bin's entries in sorted
//! order yields the ascending key sequence directly.

use crate::error::SortError;
use crate::histogram::{bit_len, MAX_DENSE_DEPTH};
use crate::metrics::TrafficMeter;
use crate::packed::{low_mask, PackedArray};

pub const DEFAULT_BIN_DEPTH: u32 = 8;
pub const DIGIT_BITS: u32 = 8;
const RADIX: usize = 1 << DIGIT_BITS;

/// `ceil(log2(n))`, with 0 for `n <= 1`.
fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        bit_len(n - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SortPlan {
    precision_bits: u32,
    trie_depth: u32,
    bin_depth: u32,
}

impl SortPlan {
    /// Plan for sorting `n` keys of `precision_bits`; `bin_depth` defaults to
    /// `min(trie_depth, 8)`.
    pub fn new(precision_bits: u32, n: u64, bin_depth: Option<u32>) -> Result<Self, SortError> {
        if !(1..=64).contains(&precision_bits) {
            return Err(SortError::InvalidPlan(format!(
                "precision {precision_bits} must be in 1..=64"
            )));
        }
        let trie_depth = precision_bits.min(ceil_log2(n));
        let bin_depth = bin_depth.unwrap_or(trie_depth.min(DEFAULT_BIN_DEPTH)).min(trie_depth);
        Self::from_parts(precision_bits, trie_depth, bin_depth)
    }

    pub fn from_parts(precision_bits: u32, trie_depth: u32, bin_depth: u32) -> Result<Self, SortError> {
        if !(1..=64).contains(&precision_bits) || trie_depth > precision_bits || bin_depth > trie_depth {
            return Err(SortError::InvalidPlan(format!(
                "need 1 <= p <= 64 and 0 <= l_b <= l_n <= p, got p={precision_bits} l_n={trie_depth} l_b={bin_depth}"
            )));
        }
        if trie_depth - bin_depth > MAX_DENSE_DEPTH {
            return Err(SortError::InvalidPlan(format!(
                "{} bin bits would need more than 2^{MAX_DENSE_DEPTH} bins",
                trie_depth - bin_depth
            )));
        }
        Ok(SortPlan {
            precision_bits,
            trie_depth,
            bin_depth,
        })
    }

    pub fn precision_bits(&self) -> u32 {
        self.precision_bits
    }

    /// `l_n`: key bits covered by the trie.
    pub fn trie_depth(&self) -> u32 {
        self.trie_depth
    }

    /// `l_b`: bits of the per-bin subtree kept in each entry.
    pub fn bin_depth(&self) -> u32 {
        self.bin_depth
    }

    /// `t = p - l_n`.
    pub fn trailing_bits(&self) -> u32 {
        self.precision_bits - self.trie_depth
    }

    /// Key bits that select the bin, `l_n - l_b`. Also the histogram level
    /// whose counters are the bin counts.
    pub fn bin_bits(&self) -> u32 {
        self.trie_depth - self.bin_depth
    }

    pub fn n_bins(&self) -> usize {
        1usize << self.bin_bits()
    }

    /// Width of a packed entry, `l_b + t`.
    pub fn entry_bits(&self) -> u32 {
        self.bin_depth + self.trailing_bits()
    }

    #[inline(always)]
    pub fn bin_of(&self, key: u64) -> usize {
        if self.bin_bits() == 0 {
            0
        } else {
            (key >> self.entry_bits()) as usize
        }
    }

    #[inline(always)]
    pub fn entry_of(&self, key: u64) -> u64 {
        key & low_mask(self.entry_bits())
    }

    #[inline(always)]
    pub fn key_of(&self, bin: usize, entry: u64) -> u64 {
        if self.bin_bits() == 0 {
            entry
        } else {
            ((bin as u64) << self.entry_bits()) | entry
        }
    }
}

/// Splits `key` into `(bin, offset, trailing)`.
pub fn decompose_key(key: u64, plan: &SortPlan) -> (u64, u64, u64) {
    let t = plan.trailing_bits();
    let trailing = key & low_mask(t);
    let offset = if t >= 64 { 0 } else { (key >> t) & low_mask(plan.bin_depth()) };
    (plan.bin_of(key) as u64, offset, trailing)
}

/// Inverse of [`decompose_key`].
pub fn recompose_key(bin: u64, offset: u64, trailing: u64, plan: &SortPlan) -> u64 {
    let t = plan.trailing_bits();
    let entry = if t >= 64 { trailing } else { (offset << t) | trailing };
    plan.key_of(bin as usize, entry)
}

const fn reverse_table() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        table[i] = (i as u8).reverse_bits();
        i += 1;
    }
    table
}

static BYTE_REVERSE: [u8; 256] = reverse_table();

/// Reverses the low `width` bits of `x` using a byte lookup table.
pub fn bit_reverse(x: u64, width: u32) -> u64 {
    debug_assert!(width <= 64);
    if width == 0 {
        return 0;
    }
    let mut reversed = 0u64;
    for byte in x.to_le_bytes() {
        reversed = (reversed << 8) | BYTE_REVERSE[byte as usize] as u64;
    }
    reversed >> (64 - width)
}

/// Stable LSB radix argsort with 8-bit digits. Buffers are kept between calls
/// so one sorter can serve many bins.
#[derive(Debug, Default, Clone)]
pub struct BinSorter {
    entries: Vec<u64>,
    index: Vec<u32>,
    scratch: Vec<u32>,
}

impl BinSorter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Temporary bytes needed to sort a bin of `len` entries.
    pub fn scratch_bytes(len: usize) -> u64 {
        (len * (8 + 4 + 4) + RADIX * std::mem::size_of::<usize>()) as u64
    }

    pub fn passes(entry_bits: u32) -> u32 {
        entry_bits.div_ceil(DIGIT_BITS)
    }

    /// Copies `len` entries starting at `start` out of a packed array.
    pub fn load_packed(&mut self, entries: &PackedArray, start: usize, len: usize) {
        self.entries.clear();
        self.entries.extend((start..start + len).map(|i| entries.get(i)));
    }

    pub fn load(&mut self, entries: &[u64]) {
        self.entries.clear();
        self.entries.extend_from_slice(entries);
    }

    /// Entries as loaded, in arrival order.
    pub fn entries(&self) -> &[u64] {
        &self.entries
    }

    /// Argsorts the loaded entries; `result[s]` is the arrival position of
    /// the `s`-th smallest entry, ties in arrival order.
    pub fn sort_loaded(&mut self, entry_bits: u32) -> &[u32] {
        let len = self.entries.len();
        assert!(len <= u32::MAX as usize, "bin of {len} entries exceeds index range");
        self.index.clear();
        self.index.extend(0..len as u32);
        if len <= 1 {
            return &self.index;
        }
        self.scratch.resize(len, 0);
        let mut counts = [0usize; RADIX];
        for pass in 0..Self::passes(entry_bits) {
            let shift = pass * DIGIT_BITS;
            counts.fill(0);
            for &i in &self.index {
                counts[((self.entries[i as usize] >> shift) & 0xff) as usize] += 1;
            }
            if counts.contains(&len) {
                continue;
            }
            let mut sum = 0;
            for c in counts.iter_mut() {
                let here = *c;
                *c = sum;
                sum += here;
            }
            for &i in &self.index {
                let digit = ((self.entries[i as usize] >> shift) & 0xff) as usize;
                self.scratch[counts[digit]] = i;
                counts[digit] += 1;
            }
            std::mem::swap(&mut self.index, &mut self.scratch);
        }
        &self.index
    }

    /// Result of the last sort.
    pub fn order(&self) -> &[u32] {
        &self.index
    }

    pub fn argsort(&mut self, entries: &[u64], entry_bits: u32) -> &[u32] {
        self.load(entries);
        self.sort_loaded(entry_bits)
    }
}

/// Stable argsort of one bin's entries.
pub fn sort_bin(entries: &[u64], entry_bits: u32) -> Vec<u32> {
    BinSorter::new().argsort(entries, entry_bits).to_vec()
}

/// Bin counts `C`, entries `E` grouped by bin, and per-bin argsort `I`.
#[derive(Debug, Clone)]
pub struct BinTable {
    plan: SortPlan,
    counts: Vec<u64>,
    offsets: Vec<u64>,
    entries: PackedArray,
    index: Option<PackedArray>,
}

fn exclusive_prefix(counts: &[u64]) -> Vec<u64> {
    let mut sum = 0;
    counts
        .iter()
        .map(|&c| {
            let start = sum;
            sum += c;
            start
        })
        .collect()
}

/// Groups `keys` by bin with a count pass and a stable scatter pass.
pub fn build_bins(keys: &[u64], plan: &SortPlan) -> Result<BinTable, SortError> {
    let p = plan.precision_bits();
    let mut counts = vec![0u64; plan.n_bins()];
    for &k in keys {
        if p < 64 && k >> p != 0 {
            return Err(SortError::Histogram(crate::error::HistogramError::KeyOutOfRange {
                key: k,
                precision: p,
            }));
        }
        counts[plan.bin_of(k)] += 1;
    }
    let offsets = exclusive_prefix(&counts);
    let mut cursor = offsets.clone();
    let mut entries = PackedArray::zeroed(keys.len(), plan.entry_bits());
    for &k in keys {
        let b = plan.bin_of(k);
        entries.set(cursor[b] as usize, plan.entry_of(k));
        cursor[b] += 1;
    }
    Ok(BinTable {
        plan: *plan,
        counts,
        offsets,
        entries,
        index: None,
    })
}

impl BinTable {
    /// Assembles a table from raw parts; the index is optional.
    pub fn from_parts(
        plan: SortPlan,
        counts: Vec<u64>,
        entries: PackedArray,
        index: Option<PackedArray>,
    ) -> Self {
        let offsets = exclusive_prefix(&counts);
        BinTable {
            plan,
            counts,
            offsets,
            entries,
            index,
        }
    }

    pub fn plan(&self) -> &SortPlan {
        &self.plan
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn entries(&self) -> &PackedArray {
        &self.entries
    }

    pub fn index(&self) -> Option<&PackedArray> {
        self.index.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of bin `b` in arrival order.
    pub fn bin_entries(&self, b: usize) -> Vec<u64> {
        let start = self.offsets[b] as usize;
        (start..start + self.counts[b] as usize)
            .map(|i| self.entries.get(i))
            .collect()
    }

    /// Argsorts every bin and stores `I`, packed at the narrowest width that
    /// holds the largest in-bin position.
    pub fn sort_all(&mut self) {
        let max_count = self.counts.iter().copied().max().unwrap_or(0);
        let width = bit_len(max_count.saturating_sub(1));
        let mut index = PackedArray::zeroed(self.entries.len(), width);
        let mut sorter = BinSorter::new();
        for (b, &count) in self.counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let start = self.offsets[b] as usize;
            sorter.load_packed(&self.entries, start, count as usize);
            for (s, &i) in sorter.sort_loaded(self.plan.entry_bits()).iter().enumerate() {
                index.set(start + s, i as u64);
            }
        }
        self.index = Some(index);
    }

    pub fn reconstruct(&self, meter: &mut TrafficMeter) -> Result<Vec<u64>, SortError> {
        let index = self
            .index
            .as_ref()
            .ok_or_else(|| SortError::InconsistentTable("bins have not been sorted".into()))?;
        reconstruct_all(&self.entries, index, &self.counts, &self.plan, meter)
    }
}

/// Walks bins in ascending order and emits `E[offset + I[offset + s]]` with
/// the bin bits put back on top.
///
/// Charges one sequential read of `I`, one indexed read of `E` and the read
/// of `C`. The write of the output belongs to whoever owns it.
pub fn reconstruct_all(
    entries: &PackedArray,
    index: &PackedArray,
    counts: &[u64],
    plan: &SortPlan,
    meter: &mut TrafficMeter,
) -> Result<Vec<u64>, SortError> {
    if counts.len() != plan.n_bins() {
        return Err(SortError::InconsistentTable(format!(
            "{} bin counts for {} bins",
            counts.len(),
            plan.n_bins()
        )));
    }
    let total: u64 = counts.iter().sum();
    if total != entries.len() as u64 || index.len() != entries.len() {
        return Err(SortError::InconsistentTable(format!(
            "sum(C) = {total}, |E| = {}, |I| = {}",
            entries.len(),
            index.len()
        )));
    }
    let mut keys = Vec::with_capacity(entries.len());
    let mut offset = 0usize;
    for (b, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let count = count as usize;
        for s in 0..count {
            let i = index.get(offset + s) as usize;
            if i >= count {
                return Err(SortError::InconsistentTable(format!(
                    "index {i} outside bin {b} of {count} entries"
                )));
            }
            keys.push(plan.key_of(b, entries.get(offset + i)));
        }
        offset += count;
    }
    meter.record_read(index.payload_bytes());
    meter.record_read(entries.payload_bytes());
    meter.record_read(counts.len() as u64 * std::mem::size_of::<u64>() as u64);
    Ok(keys)
}
