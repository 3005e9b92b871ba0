//! Reference sorts: a comparison-sort oracle and an instrumented LSB radix
//! sort.

use std::time::Instant;

use crate::error::{HistogramError, SortError};
use crate::metrics::{key_bytes, CacheModel, TrafficMeter};

pub const MAX_DIGIT_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub sorted_keys: Vec<u64>,
    pub latency_seconds: f64,
    pub peak_aux_bytes: u64,
    pub traffic_bytes: u64,
    pub passes: u32,
    pub meter: TrafficMeter,
}

/// Ground truth: the standard library's stable comparison sort.
pub fn oracle_sort(keys: &[u64]) -> Vec<u64> {
    let mut sorted = keys.to_vec();
    sorted.sort();
    sorted
}

/// [`oracle_sort`] wrapped as a baseline run. Only the input read and output
/// write are charged; the comparison sort's internals are not modeled.
pub fn oracle_baseline(keys: &[u64], precision_bits: u32) -> BaselineResult {
    let start = Instant::now();
    let sorted_keys = oracle_sort(keys);
    let latency_seconds = start.elapsed().as_secs_f64();
    let mut meter = TrafficMeter::new();
    let bytes = keys.len() as u64 * key_bytes(precision_bits);
    meter.record_read(bytes);
    meter.record_write(bytes);
    BaselineResult {
        sorted_keys,
        latency_seconds,
        peak_aux_bytes: 0,
        traffic_bytes: meter.total_traffic(),
        passes: 1,
        meter,
    }
}

fn check_radix_args(keys: &[u64], precision_bits: u32, digit_bits: u32) -> Result<(u32, u32), SortError> {
    if !(1..=64).contains(&precision_bits) {
        return Err(SortError::InvalidConfig(format!(
            "precision {precision_bits} must be in 1..=64"
        )));
    }
    if !(1..=MAX_DIGIT_BITS).contains(&digit_bits) {
        return Err(SortError::InvalidConfig(format!(
            "digit width {digit_bits} must be in 1..={MAX_DIGIT_BITS}"
        )));
    }
    if precision_bits < 64 {
        if let Some(&key) = keys.iter().find(|&&k| k >> precision_bits != 0) {
            return Err(HistogramError::KeyOutOfRange {
                key,
                precision: precision_bits,
            }
            .into());
        }
    }
    let digit = digit_bits.min(precision_bits);
    Ok((digit, precision_bits.div_ceil(digit)))
}

/// Stable LSB radix sort with `ceil(p / digit)` passes of count, exclusive
/// prefix sum and scatter. Uses the default cache budget.
pub fn lsb_radix_sort(keys: &[u64], precision_bits: u32, digit_bits: u32) -> Result<BaselineResult, SortError> {
    lsb_radix_sort_with(keys, precision_bits, digit_bits, &CacheModel::default())
}

pub fn lsb_radix_sort_with(
    keys: &[u64],
    precision_bits: u32,
    digit_bits: u32,
    cache: &CacheModel,
) -> Result<BaselineResult, SortError> {
    let (digit, passes) = check_radix_args(keys, precision_bits, digit_bits)?;
    let n = keys.len();
    let array_bytes = n as u64 * key_bytes(precision_bits);
    let radix = 1usize << digit;
    let hist_bytes = (radix * std::mem::size_of::<usize>()) as u64;
    let mask = (radix - 1) as u64;

    let mut meter = TrafficMeter::new();
    meter.track_alloc(array_bytes);
    meter.track_alloc(hist_bytes);

    let start = Instant::now();
    let mut src = keys.to_vec();
    let mut dst = vec![0u64; n];
    let mut counts = vec![0usize; radix];
    for pass in 0..passes {
        let shift = pass * digit;
        counts.fill(0);
        for &k in &src {
            counts[((k >> shift) & mask) as usize] += 1;
        }
        let mut sum = 0;
        for c in counts.iter_mut() {
            let here = *c;
            *c = sum;
            sum += here;
        }
        for &k in &src {
            let d = ((k >> shift) & mask) as usize;
            dst[counts[d]] = k;
            counts[d] += 1;
        }
        std::mem::swap(&mut src, &mut dst);

        // Count pass and scatter pass each read the array; scatter writes it.
        meter.record_read(2 * array_bytes);
        meter.record_write(array_bytes);
        cache.charge_update(&mut meter, hist_bytes, 2 * n as u64 * std::mem::size_of::<usize>() as u64);
        cache.charge_passes(&mut meter, hist_bytes, 1);
    }
    let latency_seconds = start.elapsed().as_secs_f64();
    drop(dst);

    Ok(BaselineResult {
        sorted_keys: src,
        latency_seconds,
        peak_aux_bytes: meter.peak_aux_bytes(),
        traffic_bytes: meter.total_traffic(),
        passes,
        meter,
    })
}

/// Stable LSB radix argsort: `result[s]` is the input position of the
/// `s`-th smallest key, equal keys in input order.
pub fn lsb_radix_argsort(keys: &[u64], precision_bits: u32, digit_bits: u32) -> Result<Vec<usize>, SortError> {
    let (digit, passes) = check_radix_args(keys, precision_bits, digit_bits)?;
    let radix = 1usize << digit;
    let mask = (radix - 1) as u64;
    let mut order: Vec<usize> = (0..keys.len()).collect();
    let mut next = vec![0usize; keys.len()];
    let mut counts = vec![0usize; radix];
    for pass in 0..passes {
        let shift = pass * digit;
        counts.fill(0);
        for &i in &order {
            counts[((keys[i] >> shift) & mask) as usize] += 1;
        }
        let mut sum = 0;
        for c in counts.iter_mut() {
            let here = *c;
            *c = sum;
            sum += here;
        }
        for &i in &order {
            let d = ((keys[i] >> shift) & mask) as usize;
            next[counts[d]] = i;
            counts[d] += 1;
        }
        std::mem::swap(&mut order, &mut next);
    }
    Ok(order)
}
