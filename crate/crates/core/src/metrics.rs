//! Software traffic and memory model plus the derived throughput metrics.
//!
//! Bytes are charged at algorithmic touch points rather than read from
//! hardware counters, so a run's totals are exactly reproducible. Bulk arrays
//! (inputs, outputs, entry arrays, radix scratch) always stream through DRAM.
//! Randomly accessed structures (histograms, per-bin temporaries) are free as
//! long as they fit in the [`CacheModel`] budget.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

pub const DEFAULT_CACHE_BUDGET: u64 = 8 << 20;

/// Bytes one key occupies in memory at precision `p`.
#[inline]
pub fn key_bytes(precision_bits: u32) -> u64 {
    precision_bits.div_ceil(8) as u64
}

/// Monotone traffic counters and a high-water mark of tracked allocations.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct TrafficMeter {
    bytes_read: u64,
    bytes_written: u64,
    tracked: u64,
    peak: u64,
}

impl TrafficMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_read(&mut self, bytes: u64) {
        self.bytes_read += bytes;
    }

    pub fn record_write(&mut self, bytes: u64) {
        self.bytes_written += bytes;
    }

    pub fn track_alloc(&mut self, bytes: u64) {
        self.tracked += bytes;
        self.peak = self.peak.max(self.tracked);
    }

    pub fn track_free(&mut self, bytes: u64) -> Result<(), MetricsError> {
        if bytes > self.tracked {
            return Err(MetricsError::FreeExceedsTracked {
                requested: bytes,
                tracked: self.tracked,
            });
        }
        self.tracked -= bytes;
        Ok(())
    }

    /// Replaces a tracked allocation of `old` bytes by one of `new` bytes.
    pub fn track_resize(&mut self, old: u64, new: u64) -> Result<(), MetricsError> {
        if new >= old {
            self.track_alloc(new - old);
            Ok(())
        } else {
            self.track_free(old - new)
        }
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn total_traffic(&self) -> u64 {
        self.bytes_read + self.bytes_written
    }

    pub fn current_aux_bytes(&self) -> u64 {
        self.tracked
    }

    pub fn peak_aux_bytes(&self) -> u64 {
        self.peak
    }

    /// Folds in a meter whose work ran after everything tracked so far.
    pub fn absorb(&mut self, other: &TrafficMeter) {
        self.bytes_read += other.bytes_read;
        self.bytes_written += other.bytes_written;
        self.peak = self.peak.max(self.tracked + other.peak);
        self.tracked += other.tracked;
    }

    /// Folds in per-worker meters whose work overlapped in time; their peaks
    /// are assumed to coincide.
    pub fn absorb_concurrent<'a>(&mut self, workers: impl IntoIterator<Item = &'a TrafficMeter>) {
        let (mut peaks, mut live) = (0, 0);
        for w in workers {
            self.bytes_read += w.bytes_read;
            self.bytes_written += w.bytes_written;
            peaks += w.peak;
            live += w.tracked;
        }
        self.peak = self.peak.max(self.tracked + peaks);
        self.tracked += live;
    }
}

/// Decides which structures count as cache-resident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheModel {
    pub budget_bytes: u64,
}

impl Default for CacheModel {
    fn default() -> Self {
        CacheModel {
            budget_bytes: DEFAULT_CACHE_BUDGET,
        }
    }
}

impl CacheModel {
    pub fn new(budget_bytes: u64) -> Self {
        CacheModel { budget_bytes }
    }

    pub fn is_resident(&self, structure_bytes: u64) -> bool {
        structure_bytes <= self.budget_bytes
    }

    /// Read-modify-write of `touched` bytes inside a structure of
    /// `structure_bytes`. Free while the structure fits the budget.
    pub fn charge_update(&self, meter: &mut TrafficMeter, structure_bytes: u64, touched: u64) {
        if !self.is_resident(structure_bytes) {
            meter.record_read(touched);
            meter.record_write(touched);
        }
    }

    /// `passes` read passes over a working set of `bytes`. A resident working
    /// set is loaded once; a larger one streams from DRAM on every pass.
    pub fn charge_passes(&self, meter: &mut TrafficMeter, bytes: u64, passes: u64) {
        if passes == 0 {
            return;
        }
        if self.is_resident(bytes) {
            meter.record_read(bytes);
        } else {
            meter.record_read(bytes * passes);
            meter.record_write(bytes * (passes - 1));
        }
    }
}

/// Useful sort throughput over total memory traffic throughput.
pub fn bandwidth_efficiency(useful_bytes_per_sec: f64, total_bytes_per_sec: f64) -> Result<f64, MetricsError> {
    if total_bytes_per_sec <= 0.0 || !total_bytes_per_sec.is_finite() {
        return Err(MetricsError::ZeroTraffic);
    }
    Ok(useful_bytes_per_sec / total_bytes_per_sec)
}

/// Keys sorted per second per core.
pub fn unit_throughput(n: u64, latency_seconds: f64, core_count: u32) -> Result<f64, MetricsError> {
    if core_count == 0 {
        return Err(MetricsError::ZeroCores);
    }
    if n == 0 {
        return Ok(0.0);
    }
    if latency_seconds <= 0.0 || !latency_seconds.is_finite() {
        return Err(MetricsError::NonPositiveLatency(latency_seconds));
    }
    Ok(n as f64 / (latency_seconds * core_count as f64))
}

/// Bytes a sort must move at minimum: read every key once and write it once.
pub fn essential_bytes(n: u64, precision_bits: u32) -> f64 {
    2.0 * n as f64 * precision_bits as f64 / 8.0
}

pub const CSV_HEADER: &str =
    "n,p,b,mode,algorithm,latency_s,bytes_read,bytes_written,peak_aux_bytes,b_eff,unit_throughput";

/// One benchmark or sort run; serializes to one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n: u64,
    pub p: u32,
    pub b: u32,
    pub mode: String,
    pub algorithm: String,
    #[serde(rename = "latency_s")]
    pub latency_seconds: f64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub peak_aux_bytes: u64,
    pub b_eff: f64,
    #[serde(rename = "unit_throughput")]
    pub unit_throughput_keys_per_sec: f64,
}

impl RunReport {
    /// Builds a report and derives `b_eff` and unit throughput.
    #[allow(clippy::too_many_arguments)]
    pub fn from_meter(
        n: u64,
        p: u32,
        b: u32,
        mode: &str,
        algorithm: &str,
        latency_seconds: f64,
        cores: u32,
        meter: &TrafficMeter,
    ) -> Self {
        let total = meter.total_traffic() as f64;
        let b_eff = if total > 0.0 {
            // Both rates share the same latency, which cancels.
            let t = if latency_seconds > 0.0 { latency_seconds } else { 1.0 };
            bandwidth_efficiency(essential_bytes(n, p) / t, total / t).unwrap_or(0.0)
        } else {
            0.0
        };
        let throughput = unit_throughput(n, latency_seconds, cores.max(1)).unwrap_or(0.0);
        RunReport {
            n,
            p,
            b,
            mode: mode.to_string(),
            algorithm: algorithm.to_string(),
            latency_seconds,
            bytes_read: meter.bytes_read(),
            bytes_written: meter.bytes_written(),
            peak_aux_bytes: meter.peak_aux_bytes(),
            b_eff,
            unit_throughput_keys_per_sec: throughput,
        }
    }

    /// Writes reports as CSV, with the header when `header` is set.
    pub fn write_csv<W: Write>(reports: &[RunReport], out: W, header: bool) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
        for r in reports {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<RunReport>> {
        csv::Reader::from_reader(input).deserialize().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meter_counts() {
        let mut m = TrafficMeter::new();
        assert_eq!(m, TrafficMeter::default());
        assert_eq!((m.bytes_read(), m.bytes_written(), m.peak_aux_bytes()), (0, 0, 0));
        m.record_read(8);
        m.record_read(8);
        assert_eq!(m.bytes_read(), 16);
    }

    #[test]
    fn peak_is_high_water_mark() {
        let mut m = TrafficMeter::new();
        m.track_alloc(100);
        m.track_alloc(50);
        m.track_free(100).unwrap();
        assert_eq!(m.peak_aux_bytes(), 150);
        assert_eq!(m.current_aux_bytes(), 50);
        assert_eq!(
            m.track_free(51),
            Err(MetricsError::FreeExceedsTracked { requested: 51, tracked: 50 })
        );
    }

    #[test]
    fn concurrent_peaks_add_up() {
        let mut main = TrafficMeter::new();
        main.track_alloc(10);
        let mut a = TrafficMeter::new();
        a.track_alloc(5);
        a.track_free(5).unwrap();
        a.record_read(3);
        let mut b = TrafficMeter::new();
        b.track_alloc(7);
        main.absorb_concurrent([&a, &b]);
        assert_eq!(main.peak_aux_bytes(), 22);
        assert_eq!(main.current_aux_bytes(), 17);
        assert_eq!(main.bytes_read(), 3);
    }

    #[test]
    fn cache_model_exempts_small_structures() {
        let cache = CacheModel::new(1024);
        let mut m = TrafficMeter::new();
        cache.charge_update(&mut m, 1024, 8);
        assert_eq!(m.total_traffic(), 0);
        cache.charge_update(&mut m, 1025, 8);
        assert_eq!(m.total_traffic(), 16);
        let mut m = TrafficMeter::new();
        cache.charge_passes(&mut m, 512, 3);
        assert_eq!(m.bytes_read(), 512);
        cache.charge_passes(&mut m, 2048, 3);
        assert_eq!((m.bytes_read(), m.bytes_written()), (512 + 6144, 4096));
    }

    #[test]
    fn efficiency_arithmetic() {
        assert_eq!(bandwidth_efficiency(4e9, 8e9).unwrap(), 0.5);
        assert_eq!(bandwidth_efficiency(3e9, 3e9).unwrap(), 1.0);
        assert_eq!(bandwidth_efficiency(1.0, 0.0), Err(MetricsError::ZeroTraffic));
    }

    #[test]
    fn throughput_arithmetic() {
        let paradis = unit_throughput(1 << 31, 4.6, 32).unwrap();
        assert!((paradis / 1e6 - 14.59).abs() < 0.005, "{paradis}");
        let fractal = unit_throughput(1 << 31, 21.22, 4).unwrap();
        assert!((fractal / 1e6 - 25.30).abs() < 0.005, "{fractal}");
        assert_eq!(unit_throughput(0, 1.0, 1).unwrap(), 0.0);
        assert!(matches!(unit_throughput(5, 0.0, 1), Err(MetricsError::NonPositiveLatency(_))));
        assert_eq!(unit_throughput(5, 1.0, 0), Err(MetricsError::ZeroCores));
    }

    #[test]
    fn csv_schema() {
        let mut m = TrafficMeter::new();
        m.record_read(400);
        m.record_write(400);
        let r = RunReport::from_meter(100, 32, 2, "serial", "fractal", 0.5, 1, &m);
        assert_eq!(r.b_eff, 1.0);
        assert_eq!(r.unit_throughput_keys_per_sec, 200.0);
        let mut buf = Vec::new();
        RunReport::write_csv(std::slice::from_ref(&r), &mut buf, true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(RunReport::read_csv(&buf[..]).unwrap(), vec![r]);
    }
}
