//! Bit-packed integer storage backed by 64-bit atomic words.
//!
//! Two layouts are provided:
//!
//! * [`PackedCounters`] keeps every field inside a single word (fields never
//!   straddle a word boundary), so a field can be incremented with one
//!   compare-and-swap. This is what the histogram levels use.
//! * [`PackedArray`] packs fields back to back. Fields may straddle two words;
//!   concurrent writers use `fetch_or` on zero-initialized slots, which is
//!   race-free because writers own disjoint bit ranges.
//!
//! Exclusive (`&mut self`) accessors go through `AtomicU64::get_mut` and compile
//! to plain loads and stores.

use std::sync::atomic::{AtomicU64, Ordering};

#[inline(always)]
pub(crate) fn low_mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

fn zeroed_words(n: usize) -> Box<[AtomicU64]> {
    (0..n).map(|_| AtomicU64::new(0)).collect()
}

fn copy_words(words: &[AtomicU64]) -> Box<[AtomicU64]> {
    words
        .iter()
        .map(|w| AtomicU64::new(w.load(Ordering::Relaxed)))
        .collect()
}

/// Division of a slot index by the number of fields per word.
///
/// Powers of two use a shift; everything else uses a precomputed 64-bit
/// reciprocal, which is exact for all 32-bit numerators.
#[derive(Debug, Clone, Copy)]
enum WordDivisor {
    Shift(u32),
    Reciprocal { divisor: u64, magic: u64 },
}

impl WordDivisor {
    fn new(divisor: u64) -> Self {
        debug_assert!(divisor >= 1);
        if divisor.is_power_of_two() {
            WordDivisor::Shift(divisor.trailing_zeros())
        } else {
            WordDivisor::Reciprocal {
                divisor,
                magic: u64::MAX / divisor + 1,
            }
        }
    }

    #[inline(always)]
    fn div_rem(self, n: u64) -> (u64, u64) {
        match self {
            WordDivisor::Shift(s) => (n >> s, n & ((1u64 << s) - 1)),
            WordDivisor::Reciprocal { divisor, magic } => {
                if n <= u32::MAX as u64 {
                    let q = ((magic as u128 * n as u128) >> 64) as u64;
                    (q, n - q * divisor)
                } else {
                    (n / divisor, n % divisor)
                }
            }
        }
    }
}

/// Fixed-width unsigned counters, `64 / width` per word.
#[derive(Debug)]
pub struct PackedCounters {
    width: u32,
    len: usize,
    divisor: WordDivisor,
    words: Box<[AtomicU64]>,
}

impl PackedCounters {
    pub fn new(len: usize, width: u32) -> Self {
        assert!((1..=64).contains(&width), "counter width {width} out of range");
        let per_word = (64 / width) as usize;
        PackedCounters {
            width,
            len,
            divisor: WordDivisor::new(per_word as u64),
            words: zeroed_words(len.div_ceil(per_word)),
        }
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Largest value a field can hold.
    #[inline]
    pub fn max_value(&self) -> u64 {
        low_mask(self.width)
    }

    pub fn heap_bytes(&self) -> usize {
        self.words.len() * std::mem::size_of::<u64>()
    }

    #[inline(always)]
    fn locate(&self, index: usize) -> (usize, u32) {
        debug_assert!(index < self.len);
        let (word, lane) = self.divisor.div_rem(index as u64);
        (word as usize, lane as u32 * self.width)
    }

    #[inline]
    pub fn get(&self, index: usize) -> u64 {
        let (word, shift) = self.locate(index);
        (self.words[word].load(Ordering::Relaxed) >> shift) & self.max_value()
    }

    #[inline]
    pub fn set(&mut self, index: usize, value: u64) {
        debug_assert!(value <= self.max_value());
        let (word, shift) = self.locate(index);
        let mask = self.max_value() << shift;
        let w = self.words[word].get_mut();
        *w = (*w & !mask) | (value << shift);
    }

    /// Adds `amount` to a field. Returns `false`, leaving the field untouched,
    /// when the result would not fit in the field width.
    #[inline]
    pub fn try_add(&mut self, index: usize, amount: u64) -> bool {
        let (word, shift) = self.locate(index);
        let max = self.max_value();
        let w = self.words[word].get_mut();
        let current = (*w >> shift) & max;
        match current.checked_add(amount) {
            Some(next) if next <= max => {
                *w = (*w & !(max << shift)) | (next << shift);
                true
            }
            _ => false,
        }
    }

    /// Concurrent add. Whatever does not fit in the field is returned as a
    /// carry (a multiple of `2^width`) that the caller must account for
    /// elsewhere; the field keeps the low bits of the sum.
    #[inline]
    pub fn add_shared(&self, index: usize, amount: u64) -> u128 {
        let (word, shift) = self.locate(index);
        let max = self.max_value();
        let cell = &self.words[word];
        let mut old = cell.load(Ordering::Relaxed);
        loop {
            let current = (old >> shift) & max;
            let sum = current as u128 + amount as u128;
            let low = (sum & max as u128) as u64;
            let new = (old & !(max << shift)) | (low << shift);
            match cell.compare_exchange_weak(old, new, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return sum - low as u128,
                Err(actual) => old = actual,
            }
        }
    }

    /// Copies every field into a fresh array of a different width.
    pub fn repack(&self, width: u32) -> PackedCounters {
        let mut out = PackedCounters::new(self.len, width);
        for i in 0..self.len {
            let v = self.get(i);
            assert!(v <= out.max_value(), "repack to {width} bits would truncate {v}");
            out.set(i, v);
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }
}

impl Clone for PackedCounters {
    fn clone(&self) -> Self {
        PackedCounters {
            width: self.width,
            len: self.len,
            divisor: self.divisor,
            words: copy_words(&self.words),
        }
    }
}

/// Tightly packed fixed-width values. Width 0 is allowed and stores nothing.
#[derive(Debug)]
pub struct PackedArray {
    width: u32,
    len: usize,
    words: Box<[AtomicU64]>,
}

impl PackedArray {
    pub fn zeroed(len: usize, width: u32) -> Self {
        assert!(width <= 64, "packed width {width} out of range");
        let bits = len as u128 * width as u128;
        let words = bits.div_ceil(64) as usize;
        PackedArray {
            width,
            len,
            words: zeroed_words(words),
        }
    }

    pub fn from_values(values: &[u64], width: u32) -> Self {
        let mut out = PackedArray::zeroed(values.len(), width);
        for (i, &v) in values.iter().enumerate() {
            out.set(i, v);
        }
        out
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn heap_bytes(&self) -> usize {
        self.words.len() * std::mem::size_of::<u64>()
    }

    /// Storage the values occupy, rounded up to whole bytes.
    pub fn payload_bytes(&self) -> u64 {
        (self.len as u64 * self.width as u64).div_ceil(8)
    }

    #[inline]
    pub fn get(&self, index: usize) -> u64 {
        debug_assert!(index < self.len);
        if self.width == 0 {
            return 0;
        }
        let bit = index * self.width as usize;
        let word = bit / 64;
        let offset = (bit % 64) as u32;
        let mask = low_mask(self.width);
        let lo = self.words[word].load(Ordering::Relaxed) >> offset;
        if offset + self.width <= 64 {
            lo & mask
        } else {
            let hi = self.words[word + 1].load(Ordering::Relaxed) << (64 - offset);
            (lo | hi) & mask
        }
    }

    #[inline]
    pub fn set(&mut self, index: usize, value: u64) {
        debug_assert!(index < self.len);
        if self.width == 0 {
            return;
        }
        let mask = low_mask(self.width);
        debug_assert!(value <= mask);
        let bit = index * self.width as usize;
        let word = bit / 64;
        let offset = (bit % 64) as u32;
        let w = self.words[word].get_mut();
        *w = (*w & !(mask << offset)) | (value << offset);
        if offset + self.width > 64 {
            let spill = 64 - offset;
            let w = self.words[word + 1].get_mut();
            let hi_mask = mask >> spill;
            *w = (*w & !hi_mask) | (value >> spill);
        }
    }

    /// Concurrent write into a slot that is still zero.
    #[inline]
    pub fn or_shared(&self, index: usize, value: u64) {
        debug_assert!(index < self.len);
        if self.width == 0 {
            return;
        }
        debug_assert!(value <= low_mask(self.width));
        let bit = index * self.width as usize;
        let word = bit / 64;
        let offset = (bit % 64) as u32;
        self.words[word].fetch_or(value << offset, Ordering::Relaxed);
        if offset + self.width > 64 {
            self.words[word + 1].fetch_or(value >> (64 - offset), Ordering::Relaxed);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn to_vec(&self) -> Vec<u64> {
        self.iter().collect()
    }
}

impl Clone for PackedArray {
    fn clone(&self) -> Self {
        PackedArray {
            width: self.width,
            len: self.len,
            words: copy_words(&self.words),
        }
    }
}
