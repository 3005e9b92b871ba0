//! Python bindings, importable as `fractalsort`.

use fractalsort::{
    BatchConfig, DatasetSpec, Distribution, FractalSorter, HistogramLayout, RunReport, SortConfig, SortError,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sort_err(e: SortError) -> PyErr {
    match e {
        SortError::Worker { .. } => PyRuntimeError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &RunReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("n", r.n)?;
    d.set_item("p", r.p)?;
    d.set_item("b", r.b)?;
    d.set_item("mode", &r.mode)?;
    d.set_item("algorithm", &r.algorithm)?;
    d.set_item("latency_s", r.latency_seconds)?;
    d.set_item("bytes_read", r.bytes_read)?;
    d.set_item("bytes_written", r.bytes_written)?;
    d.set_item("peak_aux_bytes", r.peak_aux_bytes)?;
    d.set_item("b_eff", r.b_eff)?;
    d.set_item("unit_throughput", r.unit_throughput_keys_per_sec)?;
    Ok(d)
}

/// Counting trie over `precision_bits`-bit keys.
#[pyclass(name = "FractalHistogram", module = "fractalsort")]
struct PyHistogram {
    inner: fractalsort::FractalHistogram,
}

#[pymethods]
impl PyHistogram {
    #[new]
    #[pyo3(signature = (precision_bits, capacity_hint=0, trie_depth=None, dense_depth=None, min_counter_width=None))]
    fn new(
        precision_bits: u32,
        capacity_hint: u64,
        trie_depth: Option<u32>,
        dense_depth: Option<u32>,
        min_counter_width: Option<u32>,
    ) -> PyResult<Self> {
        let mut b = HistogramLayout::builder(precision_bits).capacity_hint(capacity_hint);
        if let Some(d) = trie_depth {
            b = b.trie_depth(d);
        }
        if let Some(d) = dense_depth {
            b = b.dense_depth(d);
        }
        if let Some(w) = min_counter_width {
            b = b.min_counter_width(w);
        }
        let layout = b.build().map_err(value_err)?;
        Ok(PyHistogram {
            inner: fractalsort::FractalHistogram::new(layout),
        })
    }

    #[getter]
    fn precision_bits(&self) -> u32 {
        self.inner.layout().precision_bits()
    }

    #[getter]
    fn trie_depth(&self) -> u32 {
        self.inner.layout().trie_depth()
    }

    #[getter]
    fn total(&self) -> u64 {
        self.inner.total_count()
    }

    fn __len__(&self) -> usize {
        self.inner.total_count() as usize
    }

    fn insert(&mut self, key: u64) -> PyResult<()> {
        self.inner.insert(key).map_err(value_err)
    }

    fn insert_many(&mut self, keys: Vec<u64>) -> PyResult<()> {
        keys.into_iter().try_for_each(|k| self.inner.insert(k)).map_err(value_err)
    }

    /// The key of the given rank, or `default` when rank >= total.
    #[pyo3(signature = (rank, default=0))]
    fn get_item(&self, rank: u64, default: u64) -> u64 {
        self.inner.get_item(rank, default)
    }

    /// Number of stored keys strictly below `value`.
    fn get_index(&self, value: u64) -> u64 {
        self.inner.get_index(value)
    }

    fn counter(&self, level: u32, prefix: u64) -> u64 {
        self.inner.counter(level, prefix)
    }

    /// Counters of a dense level, or None below the dense region.
    fn level_counts(&self, level: u32) -> Option<Vec<u64>> {
        self.inner.level_counts(level)
    }

    fn footprint_bytes(&self) -> usize {
        self.inner.footprint_bytes()
    }

    fn promotion_count(&self) -> u64 {
        self.inner.promotion_count()
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }

    /// Adds every count of `other` and leaves `other` empty. Merging a
    /// histogram into itself fails with a borrow error.
    fn merge(&mut self, other: &Bound<'_, PyHistogram>) -> PyResult<()> {
        let mut other = other.try_borrow_mut()?;
        let layout = *other.inner.layout();
        let taken = std::mem::replace(&mut other.inner, fractalsort::FractalHistogram::new(layout));
        self.inner.merge(taken).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        let l = self.inner.layout();
        format!(
            "FractalHistogram(precision_bits={}, trie_depth={}, dense_depth={}, total={})",
            l.precision_bits(),
            l.trie_depth(),
            l.dense_depth(),
            self.inner.total_count()
        )
    }
}

/// Sorts keys with the batched histogram sorter. Returns (keys, report).
#[pyfunction]
#[pyo3(signature = (keys, precision_bits, batches=None, parallel=false, workers=None, bin_depth=None))]
fn fractal_sort<'py>(
    py: Python<'py>,
    keys: Vec<u64>,
    precision_bits: u32,
    batches: Option<usize>,
    parallel: bool,
    workers: Option<usize>,
    bin_depth: Option<u32>,
) -> PyResult<(Vec<u64>, Bound<'py, PyDict>)> {
    let n = keys.len() as u64;
    let b = batches.unwrap_or_else(|| fractalsort::choose_batch_params(n, precision_bits).batch_count);
    let batch = if parallel {
        let w = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        BatchConfig::parallel(b, w)
    } else {
        BatchConfig::serial(b)
    };
    let sorter = FractalSorter::new(SortConfig::new(batch).with_bin_depth(bin_depth)).map_err(sort_err)?;
    let out = py.detach(|| sorter.sort(&keys, precision_bits)).map_err(sort_err)?;
    let report = RunReport::from_meter(
        n,
        precision_bits,
        b as u32,
        &batch.mode.to_string(),
        "fractal",
        out.stats.latency_seconds,
        out.stats.workers as u32,
        &out.stats.meter,
    );
    Ok((out.keys, report_dict(py, &report)?))
}

/// LSD radix sort baseline. Returns (keys, report).
#[pyfunction]
#[pyo3(signature = (keys, precision_bits, digit_bits=8))]
fn radix_sort<'py>(
    py: Python<'py>,
    keys: Vec<u64>,
    precision_bits: u32,
    digit_bits: u32,
) -> PyResult<(Vec<u64>, Bound<'py, PyDict>)> {
    let r = py
        .detach(|| fractalsort::lsb_radix_sort(&keys, precision_bits, digit_bits))
        .map_err(sort_err)?;
    let report = RunReport::from_meter(
        keys.len() as u64,
        precision_bits,
        1,
        "serial",
        "radix",
        r.latency_seconds,
        1,
        &r.meter,
    );
    Ok((r.sorted_keys, report_dict(py, &report)?))
}

#[pyfunction]
fn oracle_sort(keys: Vec<u64>) -> Vec<u64> {
    fractalsort::oracle_sort(&keys)
}

#[pyfunction]
fn bit_reverse(x: u64, width: u32) -> PyResult<u64> {
    if width > 64 {
        return Err(value_err("width must be at most 64"));
    }
    Ok(fractalsort::bit_reverse(x, width))
}

#[pyfunction]
#[pyo3(signature = (level, capacity, min_width=1))]
fn counter_width(level: u32, capacity: u64, min_width: u32) -> u32 {
    fractalsort::counter_width(level, capacity, min_width)
}

#[pyfunction]
fn unit_throughput(n: u64, latency_seconds: f64, core_count: u32) -> PyResult<f64> {
    fractalsort::unit_throughput(n, latency_seconds, core_count).map_err(value_err)
}

#[pyfunction]
fn bandwidth_efficiency(useful_bytes_per_sec: f64, total_bytes_per_sec: f64) -> PyResult<f64> {
    fractalsort::bandwidth_efficiency(useful_bytes_per_sec, total_bytes_per_sec).map_err(value_err)
}

/// Synthetic keys, e.g. `generate("zipfian:1.2", 10000, 24, seed=1)`.
#[pyfunction]
#[pyo3(signature = (distribution, n, precision_bits, seed=0))]
fn generate(distribution: &str, n: u64, precision_bits: u32, seed: u64) -> PyResult<Vec<u64>> {
    let dist: Distribution = distribution.parse().map_err(value_err)?;
    DatasetSpec::new(dist, n, precision_bits, seed).generate().map_err(value_err)
}

#[pymodule(name = "fractalsort")]
fn fractalsort_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHistogram>()?;
    m.add_function(wrap_pyfunction!(fractal_sort, m)?)?;
    m.add_function(wrap_pyfunction!(radix_sort, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_sort, m)?)?;
    m.add_function(wrap_pyfunction!(bit_reverse, m)?)?;
    m.add_function(wrap_pyfunction!(counter_width, m)?)?;
    m.add_function(wrap_pyfunction!(unit_throughput, m)?)?;
    m.add_function(wrap_pyfunction!(bandwidth_efficiency, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
