//! Batch-streaming sort pipeline.
//!
//! The input is pulled from a [`KeySource`] in `b` contiguous batches, twice:
//!
//! 1. every batch is inserted into the histogram, whose last level holds the
//!    per-bin key counts;
//! 2. bin offsets come from those counts, and every batch is re-read and
//!    scattered into the packed entry array.
//!
//! Each bin is then argsorted in a cache-sized temporary and emitted in
//! ascending bin order. Only one batch of raw keys is buffered at a time,
//! which is where larger `b` saves memory.
//!
//! Parallel mode gives each batch its own local histogram and merges them
//! pairwise in batch order. Scatter cursors are derived from the per-batch
//! counts, so the output never depends on thread scheduling.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crate::bins::{BinSorter, SortPlan};
use crate::error::SortError;
use crate::histogram::{FractalHistogram, HistogramLayout};
use crate::keyfile::KeyFileReader;
use crate::metrics::{key_bytes, CacheModel, TrafficMeter, DEFAULT_CACHE_BUDGET};
use crate::packed::PackedArray;

pub const MIN_AUTO_BATCHES: usize = 2;
pub const MAX_AUTO_BATCHES: usize = 20;

/// A rewindable key stream. Reads are positional so batches can be pulled
/// more than once and by several workers.
pub trait KeySource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn precision_bits(&self) -> u32;

    /// Fills `buf` with keys `start..start + buf.len()`.
    fn read_at(&self, start: usize, buf: &mut [u64]) -> Result<(), SortError>;
}

#[derive(Debug, Clone, Copy)]
pub struct SliceSource<'a> {
    keys: &'a [u64],
    precision_bits: u32,
}

impl<'a> SliceSource<'a> {
    pub fn new(keys: &'a [u64], precision_bits: u32) -> Self {
        SliceSource { keys, precision_bits }
    }
}

impl KeySource for SliceSource<'_> {
    fn len(&self) -> usize {
        self.keys.len()
    }

    fn precision_bits(&self) -> u32 {
        self.precision_bits
    }

    fn read_at(&self, start: usize, buf: &mut [u64]) -> Result<(), SortError> {
        let end = start + buf.len();
        if end > self.keys.len() {
            return Err(crate::error::KeyFileError::OutOfBounds {
                start,
                len: buf.len(),
                total: self.keys.len(),
            }
            .into());
        }
        buf.copy_from_slice(&self.keys[start..end]);
        Ok(())
    }
}

impl KeySource for KeyFileReader {
    fn len(&self) -> usize {
        KeyFileReader::len(self)
    }

    fn precision_bits(&self) -> u32 {
        self.header().precision_bits
    }

    fn read_at(&self, start: usize, buf: &mut [u64]) -> Result<(), SortError> {
        Ok(KeyFileReader::read_at(self, start, buf)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchMode {
    #[default]
    Serial,
    Parallel,
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BatchMode::Serial => "serial",
            BatchMode::Parallel => "parallel",
        })
    }
}

impl FromStr for BatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "serial" => Ok(BatchMode::Serial),
            "parallel" => Ok(BatchMode::Parallel),
            _ => Err(format!("unknown mode {s:?}, expected serial or parallel")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_count: usize,
    pub mode: BatchMode,
    /// Upper bound on worker threads; ignored in serial mode.
    pub worker_limit: usize,
    /// Keep one histogram for all batches instead of building one per batch
    /// and merging.
    pub reuse_histogram: bool,
    /// Parallel mode only: workers update one shared histogram atomically
    /// and claim scatter slots with atomic bin cursors.
    pub shared_histogram: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig::serial(1)
    }
}

impl BatchConfig {
    pub fn serial(batch_count: usize) -> Self {
        BatchConfig {
            batch_count,
            mode: BatchMode::Serial,
            worker_limit: 1,
            reuse_histogram: true,
            shared_histogram: false,
        }
    }

    pub fn parallel(batch_count: usize, worker_limit: usize) -> Self {
        BatchConfig {
            batch_count,
            mode: BatchMode::Parallel,
            worker_limit,
            reuse_histogram: true,
            shared_histogram: false,
        }
    }

    pub fn validate(&self) -> Result<(), SortError> {
        if self.batch_count == 0 {
            return Err(SortError::InvalidConfig("batch count must be at least 1".into()));
        }
        if self.worker_limit == 0 {
            return Err(SortError::InvalidConfig("worker limit must be at least 1".into()));
        }
        Ok(())
    }

    /// Threads a run will use.
    pub fn workers(&self) -> usize {
        match self.mode {
            BatchMode::Serial => 1,
            BatchMode::Parallel => self.batch_count.min(self.worker_limit).max(1),
        }
    }
}

/// Default batch count for `n` keys of `p` bits: enough batches that one
/// batch fills about a quarter of the cache, clamped to `2..=20`.
pub fn choose_batch_params(n: u64, precision_bits: u32) -> BatchConfig {
    choose_batch_params_for_cache(n, precision_bits, DEFAULT_CACHE_BUDGET)
}

pub fn choose_batch_params_for_cache(n: u64, precision_bits: u32, cache_bytes: u64) -> BatchConfig {
    let target = (cache_bytes / 4).max(1) as u128;
    let bytes = n as u128 * precision_bits as u128 / 8;
    let b = bytes.div_ceil(target).clamp(MIN_AUTO_BATCHES as u128, MAX_AUTO_BATCHES as u128);
    BatchConfig::serial(b as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SortConfig {
    pub batch: BatchConfig,
    /// Bin depth `l_b`; `None` picks the plan default.
    pub bin_depth: Option<u32>,
    pub cache: CacheModel,
}

impl SortConfig {
    pub fn new(batch: BatchConfig) -> Self {
        SortConfig {
            batch,
            ..Default::default()
        }
    }

    pub fn with_bin_depth(mut self, bin_depth: Option<u32>) -> Self {
        self.bin_depth = bin_depth;
        self
    }

    pub fn with_cache(mut self, cache: CacheModel) -> Self {
        self.cache = cache;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortStats {
    pub plan: SortPlan,
    pub batch_count: usize,
    pub workers: usize,
    pub latency_seconds: f64,
    pub meter: TrafficMeter,
    /// Counter arrays and sparse nodes allocated by all histograms of the run.
    pub histogram_allocations: u64,
    pub histogram_bytes: u64,
    pub largest_bin: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortOutcome {
    pub keys: Vec<u64>,
    pub stats: SortStats,
}

#[derive(Debug, Clone, Copy)]
pub struct FractalSorter {
    config: SortConfig,
}

impl FractalSorter {
    pub fn new(config: SortConfig) -> Result<Self, SortError> {
        config.batch.validate()?;
        Ok(FractalSorter { config })
    }

    pub fn config(&self) -> &SortConfig {
        &self.config
    }

    pub fn plan_for(&self, n: usize, precision_bits: u32) -> Result<SortPlan, SortError> {
        SortPlan::new(precision_bits, n as u64, self.config.bin_depth)
    }

    pub fn sort(&self, keys: &[u64], precision_bits: u32) -> Result<SortOutcome, SortError> {
        self.sort_source(&SliceSource::new(keys, precision_bits))
    }

    pub fn sort_source(&self, source: &dyn KeySource) -> Result<SortOutcome, SortError> {
        let plan = self.plan_for(source.len(), source.precision_bits())?;
        match self.config.batch.mode {
            BatchMode::Serial => run_serial(source, &self.config, &plan),
            BatchMode::Parallel => run_parallel(source, &self.config, &plan),
        }
    }

    /// Serial run that hands each sorted bin to `sink` instead of collecting
    /// the output.
    pub fn sort_to_sink(&self, source: &dyn KeySource, sink: &mut dyn FnMut(&[u64])) -> Result<SortStats, SortError> {
        let plan = self.plan_for(source.len(), source.precision_bits())?;
        let config = SortConfig {
            batch: BatchConfig {
                mode: BatchMode::Serial,
                ..self.config.batch
            },
            ..self.config
        };
        serial_pipeline(source, &config, &plan, Output::Sink(sink))
    }
}

fn batch_range(n: usize, batches: usize, i: usize) -> std::ops::Range<usize> {
    let len = n.div_ceil(batches.max(1));
    let start = (i * len).min(n);
    start..((i + 1) * len).min(n)
}

fn histogram_layout(plan: &SortPlan, capacity: u64) -> Result<HistogramLayout, SortError> {
    let depth = plan.bin_bits();
    let mut builder = HistogramLayout::builder(plan.precision_bits())
        .trie_depth(depth)
        .capacity_hint(capacity);
    if depth > 0 {
        builder = builder.dense_depth(depth);
    }
    Ok(builder.build()?)
}

fn check_source(source: &dyn KeySource, plan: &SortPlan) -> Result<(), SortError> {
    if source.precision_bits() != plan.precision_bits() {
        return Err(SortError::InvalidPlan(format!(
            "plan is for {}-bit keys, source holds {}-bit keys",
            plan.precision_bits(),
            source.precision_bits()
        )));
    }
    let expected = SortPlan::new(plan.precision_bits(), source.len() as u64, Some(plan.bin_depth()))?;
    if expected.trie_depth() != plan.trie_depth() {
        return Err(SortError::InvalidPlan(format!(
            "plan trie depth {} does not match {} keys",
            plan.trie_depth(),
            source.len()
        )));
    }
    Ok(())
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

fn packed_bytes(count: u64, width: u32) -> u64 {
    (count * width as u64).div_ceil(8)
}

/// Histogram update traffic for `keys` insertions, free while resident.
fn charge_inserts(cache: &CacheModel, meter: &mut TrafficMeter, hist: &FractalHistogram, keys: usize) {
    let levels = hist.layout().trie_depth() as u64 + 1;
    cache.charge_update(meter, hist.footprint_bytes() as u64, keys as u64 * levels * 8);
}

fn bin_counts(hist: &FractalHistogram, plan: &SortPlan, n: usize) -> Result<Vec<u64>, SortError> {
    let counts = hist
        .level_counts(plan.bin_bits())
        .ok_or_else(|| SortError::InconsistentTable("bin level is not dense".into()))?;
    let total: u64 = counts.iter().sum();
    if total != n as u64 {
        return Err(SortError::InconsistentTable(format!(
            "histogram counted {total} keys, source has {n}"
        )));
    }
    Ok(counts)
}

enum Output<'a> {
    Collect(&'a mut Vec<u64>),
    Sink(&'a mut dyn FnMut(&[u64])),
}

/// Argsorts one bin from `entries` and writes its keys to `out`.
#[allow(clippy::too_many_arguments)]
fn emit_bin(
    sorter: &mut BinSorter,
    entries: &PackedArray,
    plan: &SortPlan,
    cache: &CacheModel,
    meter: &mut TrafficMeter,
    bin: usize,
    start: usize,
    count: usize,
    out: &mut [u64],
) {
    sorter.load_packed(entries, start, count);
    meter.record_read(packed_bytes(count as u64, entries.width()));
    let scratch = BinSorter::scratch_bytes(count);
    if !cache.is_resident(scratch) {
        cache.charge_passes(meter, scratch, BinSorter::passes(plan.entry_bits()) as u64);
    }
    sorter.sort_loaded(plan.entry_bits());
    let (loaded, order) = (sorter.entries(), sorter.order());
    for (slot, &i) in out.iter_mut().zip(order) {
        *slot = plan.key_of(bin, loaded[i as usize]);
    }
    meter.record_write(count as u64 * key_bytes(plan.precision_bits()));
}

/// Single-threaded run over `config.batch.batch_count` batches.
pub fn run_serial(source: &dyn KeySource, config: &SortConfig, plan: &SortPlan) -> Result<SortOutcome, SortError> {
    let mut keys = Vec::new();
    let stats = serial_pipeline(source, config, plan, Output::Collect(&mut keys))?;
    Ok(SortOutcome { keys, stats })
}

fn serial_pipeline(
    source: &dyn KeySource,
    config: &SortConfig,
    plan: &SortPlan,
    mut output: Output<'_>,
) -> Result<SortStats, SortError> {
    config.batch.validate()?;
    check_source(source, plan)?;
    let started = Instant::now();
    let n = source.len();
    let b = config.batch.batch_count;
    let cache = &config.cache;
    let kb = key_bytes(plan.precision_bits());
    let mut meter = TrafficMeter::new();

    let batch_len = n.div_ceil(b);
    let mut buf = vec![0u64; batch_len];
    let buf_bytes = batch_len as u64 * kb;
    meter.track_alloc(buf_bytes);

    let mut hist = FractalHistogram::new(histogram_layout(plan, n as u64)?);
    let mut allocations = 0;
    for i in 0..b {
        let range = batch_range(n, b, i);
        if range.is_empty() {
            continue;
        }
        let batch = &mut buf[..range.len()];
        source.read_at(range.start, batch)?;
        meter.record_read(batch.len() as u64 * kb);
        if config.batch.reuse_histogram {
            for &k in batch.iter() {
                hist.insert(k)?;
            }
            charge_inserts(cache, &mut meter, &hist, batch.len());
        } else {
            let mut local = FractalHistogram::new(histogram_layout(plan, batch.len() as u64)?);
            for &k in batch.iter() {
                local.insert(k)?;
            }
            charge_inserts(cache, &mut meter, &local, batch.len());
            allocations += local.allocation_count();
            hist.merge(local)?;
        }
    }
    allocations += hist.allocation_count();
    let hist_bytes = hist.footprint_bytes() as u64;
    meter.track_alloc(hist_bytes);

    let counts = bin_counts(&hist, plan, n)?;
    let offsets = exclusive_prefix(&counts);
    let table_bytes = 2 * (counts.len() * std::mem::size_of::<u64>()) as u64;
    meter.track_alloc(table_bytes);
    drop(hist);
    meter.track_free(hist_bytes)?;

    let mut entries = PackedArray::zeroed(n, plan.entry_bits());
    let entry_bytes = entries.payload_bytes();
    meter.track_alloc(entry_bytes);
    let mut cursor = offsets.clone();
    for i in 0..b {
        let range = batch_range(n, b, i);
        if range.is_empty() {
            continue;
        }
        let batch = &mut buf[..range.len()];
        source.read_at(range.start, batch)?;
        meter.record_read(batch.len() as u64 * kb);
        for &k in batch.iter() {
            let bin = plan.bin_of(k);
            entries.set(cursor[bin] as usize, plan.entry_of(k));
            cursor[bin] += 1;
        }
        meter.record_write(packed_bytes(batch.len() as u64, plan.entry_bits()));
        cache.charge_update(&mut meter, (cursor.len() * 8) as u64, (batch.len() * 8) as u64);
    }
    drop(buf);
    meter.track_free(buf_bytes)?;

    let largest = counts.iter().copied().max().unwrap_or(0);
    let mut scratch = BinSorter::scratch_bytes(largest as usize);
    if matches!(output, Output::Sink(_)) {
        scratch += largest * 8;
    }
    meter.track_alloc(scratch);
    let mut sorter = BinSorter::new();
    let mut staging = Vec::new();
    if let Output::Collect(keys) = &mut output {
        keys.clear();
        keys.resize(n, 0);
    }
    for (bin, (&count, &start)) in counts.iter().zip(&offsets).enumerate() {
        if count == 0 {
            continue;
        }
        let (start, count) = (start as usize, count as usize);
        match &mut output {
            Output::Collect(keys) => {
                let out = &mut keys[start..start + count];
                emit_bin(&mut sorter, &entries, plan, cache, &mut meter, bin, start, count, out);
            }
            Output::Sink(sink) => {
                staging.resize(count, 0);
                emit_bin(&mut sorter, &entries, plan, cache, &mut meter, bin, start, count, &mut staging);
                sink(&staging);
            }
        }
    }
    meter.track_free(scratch + entry_bytes + table_bytes)?;

    Ok(SortStats {
        plan: *plan,
        batch_count: b,
        workers: 1,
        latency_seconds: started.elapsed().as_secs_f64(),
        meter,
        histogram_allocations: allocations,
        histogram_bytes: hist_bytes,
        largest_bin: largest,
    })
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".into()
    }
}

/// Runs `f(worker, input)` on one scoped thread per input.
fn run_workers<I, T, F>(inputs: Vec<I>, f: F) -> Result<Vec<T>, SortError>
where
    I: Send,
    T: Send,
    F: Fn(usize, I) -> Result<T, SortError> + Sync,
{
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = inputs
            .into_iter()
            .enumerate()
            .map(|(w, input)| s.spawn(move || f(w, input)))
            .collect();
        let mut results = Vec::with_capacity(handles.len());
        let mut first_error = None;
        for (worker, handle) in handles.into_iter().enumerate() {
            match handle.join() {
                Ok(Ok(v)) => results.push(v),
                Ok(Err(e)) => {
                    first_error.get_or_insert(e);
                }
                Err(payload) => {
                    first_error.get_or_insert(SortError::Worker {
                        worker,
                        message: panic_message(payload),
                    });
                }
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok(results),
        }
    })
}

/// Splits bins into at most `parts` contiguous ranges of roughly equal key
/// counts.
fn partition_bins(counts: &[u64], parts: usize) -> Vec<std::ops::Range<usize>> {
    let total: u64 = counts.iter().sum();
    let target = total.div_ceil(parts.max(1) as u64).max(1);
    let mut ranges = Vec::new();
    let (mut first, mut acc) = (0, 0);
    for (bin, &c) in counts.iter().enumerate() {
        acc += c;
        if acc >= target * (ranges.len() as u64 + 1) && ranges.len() + 1 < parts {
            ranges.push(first..bin + 1);
            first = bin + 1;
        }
    }
    if first < counts.len() {
        ranges.push(first..counts.len());
    }
    ranges
}

struct Scattered {
    entries: PackedArray,
    counts: Vec<u64>,
    offsets: Vec<u64>,
    allocations: u64,
    hist_bytes: u64,
}

/// Multi-threaded run: one worker per batch up to `worker_limit`, worker
/// `w` taking batches `w, w + workers, ...`.
pub fn run_parallel(source: &dyn KeySource, config: &SortConfig, plan: &SortPlan) -> Result<SortOutcome, SortError> {
    config.batch.validate()?;
    check_source(source, plan)?;
    let started = Instant::now();
    let n = source.len();
    let workers = config.batch.workers();
    let mut meter = TrafficMeter::new();

    let scattered = if config.batch.shared_histogram {
        shared_passes(source, config, plan, workers, &mut meter)?
    } else {
        local_passes(source, config, plan, workers, &mut meter)?
    };
    let Scattered {
        entries,
        counts,
        offsets,
        allocations,
        hist_bytes,
    } = scattered;

    let mut keys = vec![0u64; n];
    let ranges = partition_bins(&counts, workers);
    let mut inputs = Vec::with_capacity(ranges.len());
    let mut rest: &mut [u64] = &mut keys;
    for range in ranges {
        let len: u64 = counts[range.clone()].iter().sum();
        let (head, tail) = rest.split_at_mut(len as usize);
        inputs.push((range, head));
        rest = tail;
    }
    let cache = config.cache;
    let (entries_ref, counts_ref, offsets_ref) = (&entries, &counts, &offsets);
    let meters = run_workers(inputs, |_, (range, out): (std::ops::Range<usize>, &mut [u64])| {
        let mut local = TrafficMeter::new();
        let largest = counts_ref[range.clone()].iter().copied().max().unwrap_or(0);
        local.track_alloc(BinSorter::scratch_bytes(largest as usize));
        let mut sorter = BinSorter::new();
        let base = offsets_ref.get(range.start).map_or(0, |&o| o as usize);
        for bin in range {
            let count = counts_ref[bin] as usize;
            if count == 0 {
                continue;
            }
            let start = offsets_ref[bin] as usize;
            let out = &mut out[start - base..start - base + count];
            emit_bin(&mut sorter, entries_ref, plan, &cache, &mut local, bin, start, count, out);
        }
        Ok(local)
    })?;
    meter.absorb_concurrent(&meters);
    let largest = counts.iter().copied().max().unwrap_or(0);

    Ok(SortOutcome {
        keys,
        stats: SortStats {
            plan: *plan,
            batch_count: config.batch.batch_count,
            workers,
            latency_seconds: started.elapsed().as_secs_f64(),
            meter,
            histogram_allocations: allocations,
            histogram_bytes: hist_bytes,
            largest_bin: largest,
        },
    })
}

/// Worker-local histograms merged pairwise; deterministic cursors.
fn local_passes(
    source: &dyn KeySource,
    config: &SortConfig,
    plan: &SortPlan,
    workers: usize,
    meter: &mut TrafficMeter,
) -> Result<Scattered, SortError> {
    let n = source.len();
    let b = config.batch.batch_count;
    let kb = key_bytes(plan.precision_bits());
    let cache = config.cache;
    let batch_len = n.div_ceil(b);

    let built = run_workers((0..workers).collect(), |_, w| {
        let mut local_meter = TrafficMeter::new();
        let buf_bytes = batch_len as u64 * kb;
        local_meter.track_alloc(buf_bytes);
        let mut buf = vec![0u64; batch_len];
        let mut out = Vec::new();
        for i in (w..b).step_by(workers) {
            let range = batch_range(n, b, i);
            let batch = &mut buf[..range.len()];
            source.read_at(range.start, batch)?;
            local_meter.record_read(batch.len() as u64 * kb);
            let mut hist = FractalHistogram::new(histogram_layout(plan, batch.len() as u64)?);
            for &k in batch.iter() {
                hist.insert(k)?;
            }
            charge_inserts(&cache, &mut local_meter, &hist, batch.len());
            let counts = bin_counts(&hist, plan, batch.len())?;
            local_meter.track_alloc(hist.footprint_bytes() as u64 + (counts.len() * 8) as u64);
            out.push((i, hist, counts));
        }
        local_meter.track_free(buf_bytes)?;
        Ok((out, local_meter))
    })?;

    let mut per_batch = Vec::with_capacity(b);
    let mut worker_meters = Vec::with_capacity(workers);
    for (batches, m) in built {
        per_batch.extend(batches);
        worker_meters.push(m);
    }
    meter.absorb_concurrent(&worker_meters);
    per_batch.sort_by_key(|(i, _, _)| *i);

    let mut allocations = 0;
    let mut local_bytes = 0;
    let mut hists = Vec::with_capacity(b);
    let mut batch_counts = Vec::with_capacity(b);
    for (_, hist, counts) in per_batch {
        allocations += hist.allocation_count();
        local_bytes += hist.footprint_bytes() as u64;
        hists.push(hist);
        batch_counts.push(counts);
    }
    // Pairwise tree merge in batch order.
    while hists.len() > 1 {
        let mut next = Vec::with_capacity(hists.len().div_ceil(2));
        let mut it = hists.into_iter();
        while let Some(mut left) = it.next() {
            if let Some(right) = it.next() {
                let before = left.allocation_count();
                left.merge(right)?;
                allocations += left.allocation_count() - before;
            }
            next.push(left);
        }
        hists = next;
    }
    let global = match hists.pop() {
        Some(h) => h,
        None => FractalHistogram::new(histogram_layout(plan, 1)?),
    };
    let hist_bytes = global.footprint_bytes() as u64;
    meter.track_resize(local_bytes, hist_bytes)?;

    let counts = bin_counts(&global, plan, n)?;
    let offsets = exclusive_prefix(&counts);
    drop(global);
    meter.track_free(hist_bytes)?;
    // Batch i's cursor for a bin starts after the bin's keys from batches < i.
    for bin in 0..counts.len() {
        let mut running = offsets[bin];
        for batch in batch_counts.iter_mut() {
            let c = batch[bin];
            batch[bin] = running;
            running += c;
        }
    }
    let table_bytes = 2 * (counts.len() * 8) as u64;
    meter.track_alloc(table_bytes);

    let entries = PackedArray::zeroed(n, plan.entry_bits());
    meter.track_alloc(entries.payload_bytes());
    let (entries_ref, cursors_ref) = (&entries, &batch_counts);
    let scattered = run_workers((0..workers).collect(), |_, w| {
        let mut local_meter = TrafficMeter::new();
        let buf_bytes = batch_len as u64 * kb;
        local_meter.track_alloc(buf_bytes + (counts.len() * 8) as u64);
        let mut buf = vec![0u64; batch_len];
        for i in (w..b).step_by(workers) {
            let range = batch_range(n, b, i);
            let batch = &mut buf[..range.len()];
            source.read_at(range.start, batch)?;
            local_meter.record_read(batch.len() as u64 * kb);
            let mut cursor = cursors_ref[i].clone();
            for &k in batch.iter() {
                let bin = plan.bin_of(k);
                entries_ref.or_shared(cursor[bin] as usize, plan.entry_of(k));
                cursor[bin] += 1;
            }
            local_meter.record_write(packed_bytes(batch.len() as u64, plan.entry_bits()));
        }
        local_meter.track_free(buf_bytes + (counts.len() * 8) as u64)?;
        Ok(local_meter)
    })?;
    meter.absorb_concurrent(&scattered);
    meter.track_free((batch_counts.len() * counts.len() * 8) as u64)?;

    Ok(Scattered {
        entries,
        counts,
        offsets,
        allocations,
        hist_bytes,
    })
}

/// One histogram updated concurrently; scatter slots claimed by atomic bin
/// cursors. Slot order inside a bin depends on scheduling, the sorted output
/// does not.
fn shared_passes(
    source: &dyn KeySource,
    config: &SortConfig,
    plan: &SortPlan,
    workers: usize,
    meter: &mut TrafficMeter,
) -> Result<Scattered, SortError> {
    let n = source.len();
    let b = config.batch.batch_count;
    let kb = key_bytes(plan.precision_bits());
    let cache = config.cache;
    let batch_len = n.div_ceil(b);
    let buf_bytes = batch_len as u64 * kb;

    let mut hist = FractalHistogram::new(histogram_layout(plan, n as u64)?);
    let hist_ref = &hist;
    let meters = run_workers((0..workers).collect(), |_, w| {
        let mut local_meter = TrafficMeter::new();
        local_meter.track_alloc(buf_bytes);
        let mut buf = vec![0u64; batch_len];
        for i in (w..b).step_by(workers) {
            let range = batch_range(n, b, i);
            let batch = &mut buf[..range.len()];
            source.read_at(range.start, batch)?;
            local_meter.record_read(batch.len() as u64 * kb);
            for &k in batch.iter() {
                hist_ref.insert_shared(k)?;
            }
            charge_inserts(&cache, &mut local_meter, hist_ref, batch.len());
        }
        local_meter.track_free(buf_bytes)?;
        Ok(local_meter)
    })?;
    meter.absorb_concurrent(&meters);
    hist.consolidate();
    let allocations = hist.allocation_count();
    let hist_bytes = hist.footprint_bytes() as u64;
    meter.track_alloc(hist_bytes);
    let counts = bin_counts(&hist, plan, n)?;
    let offsets = exclusive_prefix(&counts);
    drop(hist);
    meter.track_free(hist_bytes)?;
    let table_bytes = 2 * (counts.len() * 8) as u64;
    meter.track_alloc(table_bytes);

    let entries = PackedArray::zeroed(n, plan.entry_bits());
    meter.track_alloc(entries.payload_bytes());
    let cursors: Vec<AtomicU64> = offsets.iter().map(|&o| AtomicU64::new(o)).collect();
    let (entries_ref, cursors_ref) = (&entries, &cursors);
    let meters = run_workers((0..workers).collect(), |_, w| {
        let mut local_meter = TrafficMeter::new();
        local_meter.track_alloc(buf_bytes);
        let mut buf = vec![0u64; batch_len];
        for i in (w..b).step_by(workers) {
            let range = batch_range(n, b, i);
            let batch = &mut buf[..range.len()];
            source.read_at(range.start, batch)?;
            local_meter.record_read(batch.len() as u64 * kb);
            for &k in batch.iter() {
                let slot = cursors_ref[plan.bin_of(k)].fetch_add(1, Ordering::Relaxed);
                entries_ref.or_shared(slot as usize, plan.entry_of(k));
            }
            local_meter.record_write(packed_bytes(batch.len() as u64, plan.entry_bits()));
        }
        local_meter.track_free(buf_bytes)?;
        Ok(local_meter)
    })?;
    meter.absorb_concurrent(&meters);

    Ok(Scattered {
        entries,
        counts,
        offsets,
        allocations,
        hist_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::oracle_sort;
    use crate::dataset::{DatasetSpec, Distribution};

    fn uniform(n: u64, p: u32, seed: u64) -> Vec<u64> {
        DatasetSpec::new(Distribution::Uniform, n, p, seed).generate().unwrap()
    }

    fn sort_with(keys: &[u64], p: u32, batch: BatchConfig) -> SortOutcome {
        FractalSorter::new(SortConfig::new(batch)).unwrap().sort(keys, p).unwrap()
    }

    #[test]
    fn empty_and_tiny_inputs() {
        for batch in [BatchConfig::serial(1), BatchConfig::serial(5), BatchConfig::parallel(4, 3)] {
            assert!(sort_with(&[], 16, batch).keys.is_empty());
            assert_eq!(sort_with(&[42], 16, batch).keys, vec![42]);
            assert_eq!(sort_with(&[3, 0, 2, 2], 2, batch).keys, vec![0, 2, 2, 3]);
        }
    }

    #[test]
    fn output_independent_of_batch_count() {
        let keys = uniform(100_000, 32, 5);
        let expected = oracle_sort(&keys);
        for b in [1, 2, 5, 10, 20] {
            assert_eq!(sort_with(&keys, 32, BatchConfig::serial(b)).keys, expected, "b={b}");
        }
    }

    #[test]
    fn parallel_matches_serial() {
        let keys = uniform(100_000, 24, 9);
        let serial = sort_with(&keys, 24, BatchConfig::serial(8)).keys;
        for workers in [1, 2, 4, 8] {
            assert_eq!(sort_with(&keys, 24, BatchConfig::parallel(8, workers)).keys, serial);
        }
        let shared = BatchConfig {
            shared_histogram: true,
            ..BatchConfig::parallel(8, 4)
        };
        assert_eq!(sort_with(&keys, 24, shared).keys, serial);
    }

    #[test]
    fn parallel_runs_are_repeatable() {
        let keys = DatasetSpec::new(Distribution::Zipfian { s: 1.1 }, 50_000, 16, 2).generate().unwrap();
        let first = sort_with(&keys, 16, BatchConfig::parallel(6, 6));
        for _ in 0..3 {
            let again = sort_with(&keys, 16, BatchConfig::parallel(6, 6));
            assert_eq!(again.keys, first.keys);
            assert_eq!(again.stats.meter, first.stats.meter);
        }
    }

    #[test]
    fn more_batches_than_keys() {
        let keys = [9, 1, 7];
        assert_eq!(sort_with(&keys, 4, BatchConfig::serial(10)).keys, vec![1, 7, 9]);
        assert_eq!(sort_with(&keys, 4, BatchConfig::parallel(10, 4)).keys, vec![1, 7, 9]);
    }

    #[test]
    fn histogram_is_reused_across_batches() {
        let keys = uniform(50_000, 32, 4);
        let one = sort_with(&keys, 32, BatchConfig::serial(1)).stats.histogram_allocations;
        let many = sort_with(&keys, 32, BatchConfig::serial(17)).stats.histogram_allocations;
        assert_eq!(one, many);
        let rebuilt = BatchConfig {
            reuse_histogram: false,
            ..BatchConfig::serial(17)
        };
        let out = sort_with(&keys, 32, rebuilt);
        assert_eq!(out.keys, oracle_sort(&keys));
        assert!(out.stats.histogram_allocations > one);
    }

    #[test]
    fn peak_memory_shrinks_with_batches() {
        let keys = uniform(1 << 16, 32, 1);
        let peaks: Vec<u64> = [1, 2, 4, 8, 16]
            .iter()
            .map(|&b| sort_with(&keys, 32, BatchConfig::serial(b)).stats.meter.peak_aux_bytes())
            .collect();
        assert!(peaks.windows(2).all(|w| w[0] >= w[1]), "{peaks:?}");
    }

    #[test]
    fn sink_sees_sorted_chunks() {
        let keys = uniform(20_000, 20, 3);
        let sorter = FractalSorter::new(SortConfig::new(BatchConfig::serial(3))).unwrap();
        let mut seen = Vec::new();
        let stats = sorter
            .sort_to_sink(&SliceSource::new(&keys, 20), &mut |chunk| seen.extend_from_slice(chunk))
            .unwrap();
        assert_eq!(seen, oracle_sort(&keys));
        assert!(stats.meter.total_traffic() > 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(FractalSorter::new(SortConfig::new(BatchConfig::serial(0))).is_err());
        assert!(FractalSorter::new(SortConfig::new(BatchConfig::parallel(2, 0))).is_err());
        let sorter = FractalSorter::new(SortConfig::default()).unwrap();
        assert!(sorter.sort(&[1 << 8], 8).is_err());
        let plan = SortPlan::new(8, 4, None).unwrap();
        let keys = [1u64; 100];
        assert!(run_serial(&SliceSource::new(&keys, 8), &SortConfig::default(), &plan).is_err());
    }

    #[test]
    fn worker_errors_surface() {
        struct Failing;
        impl KeySource for Failing {
            fn len(&self) -> usize {
                1000
            }
            fn precision_bits(&self) -> u32 {
                16
            }
            fn read_at(&self, start: usize, _: &mut [u64]) -> Result<(), SortError> {
                if start >= 500 {
                    panic!("disk on fire");
                }
                Ok(())
            }
        }
        let sorter = FractalSorter::new(SortConfig::new(BatchConfig::parallel(4, 4))).unwrap();
        match sorter.sort_source(&Failing) {
            Err(SortError::Worker { message, .. }) => assert!(message.contains("disk on fire")),
            other => panic!("expected worker failure, got {other:?}"),
        }
    }

    #[test]
    fn batch_params() {
        assert_eq!(choose_batch_params(10, 32).batch_count, 2);
        assert_eq!(choose_batch_params(1 << 30, 32).batch_count, 20);
        assert_eq!(choose_batch_params(1 << 22, 32).batch_count, 8);
        let mut last = 0;
        for shift in 0..40 {
            let b = choose_batch_params(1 << shift, 16).batch_count;
            assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn bin_partition_covers_everything() {
        let counts = [5, 0, 0, 9, 1, 1, 30, 2];
        for parts in 1..10 {
            let ranges = partition_bins(&counts, parts);
            assert!(ranges.len() <= parts);
            assert_eq!(ranges.first().unwrap().start, 0);
            assert_eq!(ranges.last().unwrap().end, counts.len());
            assert!(ranges.windows(2).all(|w| w[0].end == w[1].start));
        }
    }
}
