//! Benchmark sweeps over n, p, distribution, batch count, mode and algorithm.
//!
//! Rows follow the fixed report schema. Because that schema has no room for
//! the distribution, the trial count or failures, `--out FILE` also writes
//! `FILE.cells.csv` with one line per cell, pointing at its report row.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::Args;
use fractalsort::baselines::{lsb_radix_sort_with, oracle_baseline};
use fractalsort::metrics::DEFAULT_CACHE_BUDGET;
use fractalsort::{BatchConfig, CacheModel, DatasetSpec, Distribution, FractalSorter, RunReport, SortConfig};
use serde::Serialize;

use crate::{batch_config, parse_count, Algorithm, Failure, ModeArg};

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Key counts: `1000`, `2^16`, or a doubling range `2^10..2^20`.
    #[arg(long, value_delimiter = ',', default_value = "2^12..2^20")]
    n: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "16,32")]
    p: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "uniform")]
    dist: Vec<Distribution>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fractal,radix")]
    algo: Vec<Algorithm>,
    /// Batch counts for the fractal sorter; `auto` picks from n.
    #[arg(long, value_delimiter = ',', default_value = "auto")]
    batches: Vec<String>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "serial")]
    mode: Vec<ModeArg>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    lb: Option<u32>,
    #[arg(long, value_parser = parse_count, default_value_t = DEFAULT_CACHE_BUDGET)]
    cache_budget: u64,
    #[arg(long, default_value_t = 8)]
    digit_bits: u32,
    #[arg(long, default_value_t = 3)]
    trials: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted n.
    #[arg(long, value_parser = parse_count, default_value = "2^24")]
    max_n: u64,
    /// Report CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CellRecord {
    row: Option<usize>,
    n: u64,
    p: u32,
    b: String,
    mode: String,
    algorithm: String,
    dist: String,
    trials: u32,
    status: String,
}

/// Expands count specs; `a..b` doubles from `a` up to `b`.
pub fn expand_counts(specs: &[String]) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for spec in specs {
        match spec.split_once("..") {
            Some((lo, hi)) => {
                let (lo, hi) = (parse_count(lo)?, parse_count(hi)?);
                if lo == 0 || lo > hi {
                    return Err(format!("bad range {spec:?}"));
                }
                let mut n = lo;
                while n <= hi {
                    out.push(n);
                    n = match n.checked_mul(2) {
                        Some(next) => next,
                        None => break,
                    };
                }
            }
            None => out.push(parse_count(spec)?),
        }
    }
    Ok(out)
}

fn parse_batches(specs: &[String]) -> Result<Vec<Option<usize>>, String> {
    specs
        .iter()
        .map(|s| match s.trim() {
            "auto" => Ok(None),
            other => match other.parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("bad batch count {other:?}")),
                Ok(b) => Ok(Some(b)),
            },
        })
        .collect()
}

struct Cell {
    algo: Algorithm,
    batch: Option<BatchConfig>,
}

fn run_once(keys: &[u64], p: u32, cell: &Cell, args: &BenchArgs) -> anyhow::Result<(Vec<u64>, RunReport)> {
    let n = keys.len() as u64;
    let cache = CacheModel::new(args.cache_budget);
    Ok(match (cell.algo, cell.batch) {
        (Algorithm::Fractal, Some(batch)) => {
            let config = SortConfig::new(batch).with_bin_depth(args.lb).with_cache(cache);
            let out = FractalSorter::new(config)?.sort(keys, p)?;
            let report = RunReport::from_meter(
                n,
                p,
                batch.batch_count as u32,
                &batch.mode.to_string(),
                "fractal",
                out.stats.latency_seconds,
                out.stats.workers as u32,
                &out.stats.meter,
            );
            (out.keys, report)
        }
        (algo, _) => {
            let r = if algo == Algorithm::Radix {
                lsb_radix_sort_with(keys, p, args.digit_bits, &cache)?
            } else {
                oracle_baseline(keys, p)
            };
            let report = RunReport::from_meter(n, p, 1, "serial", algo.name(), r.latency_seconds, 1, &r.meter);
            (r.sorted_keys, report)
        }
    })
}

/// Runs `trials` repetitions and averages the latency. Traffic and memory
/// are deterministic, so the last trial's values stand for all of them.
fn run_cell(keys: &[u64], p: u32, cell: &Cell, args: &BenchArgs) -> anyhow::Result<RunReport> {
    let mut total_latency = 0.0;
    let mut last = None;
    for _ in 0..args.trials {
        let (sorted, report) = run_once(keys, p, cell, args)?;
        if sorted.len() != keys.len() || sorted.windows(2).any(|w| w[0] > w[1]) {
            return Err(anyhow!("output is not sorted"));
        }
        total_latency += report.latency_seconds;
        last = Some(report);
    }
    let mut report = last.ok_or_else(|| anyhow!("no trials"))?;
    report.latency_seconds = total_latency / args.trials as f64;
    let cores = if report.mode == "parallel" {
        args.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    } else {
        1
    };
    report.unit_throughput_keys_per_sec =
        fractalsort::unit_throughput(report.n, report.latency_seconds, cores as u32).unwrap_or(0.0);
    Ok(report)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".cells.csv");
    PathBuf::from(name)
}

pub fn bench(args: BenchArgs) -> Result<(), Failure> {
    let counts = expand_counts(&args.n).map_err(|e| Failure::usage(anyhow!(e)))?;
    let batches = parse_batches(&args.batches).map_err(|e| Failure::usage(anyhow!(e)))?;
    if args.trials == 0 {
        return Err(Failure::usage(anyhow!("--trials must be at least 1")));
    }
    if let Some(&n) = counts.iter().find(|&&n| n > args.max_n) {
        return Err(Failure::usage(anyhow!("n = {n} exceeds --max-n {}", args.max_n)));
    }
    if counts.is_empty() || args.p.is_empty() || args.dist.is_empty() || args.algo.is_empty() {
        return Err(Failure::usage(anyhow!("empty sweep")));
    }

    let started = Instant::now();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &n in &counts {
        for &p in &args.p {
            for &dist in &args.dist {
                let keys = match DatasetSpec::new(dist, n, p, args.seed).generate() {
                    Ok(keys) => keys,
                    Err(e) => {
                        cells.push(CellRecord {
                            row: None,
                            n,
                            p,
                            b: "-".into(),
                            mode: "-".into(),
                            algorithm: "-".into(),
                            dist: dist.to_string(),
                            trials: 0,
                            status: format!("error: {e}"),
                        });
                        continue;
                    }
                };
                let mut plan = Vec::new();
                for &algo in &args.algo {
                    if algo == Algorithm::Fractal {
                        for &b in &batches {
                            for &mode in &args.mode {
                                let batch = batch_config(n, p, b, mode, args.workers, args.cache_budget);
                                plan.push(Cell { algo, batch: Some(batch) });
                            }
                        }
                    } else {
                        plan.push(Cell { algo, batch: None });
                    }
                }
                for cell in plan {
                    let (b, mode) = match cell.batch {
                        Some(batch) => (batch.batch_count.to_string(), batch.mode.to_string()),
                        None => ("1".into(), "serial".into()),
                    };
                    let (row, status) = match run_cell(&keys, p, &cell, &args) {
                        Ok(report) => {
                            rows.push(report);
                            (Some(rows.len() - 1), "ok".to_string())
                        }
                        Err(e) => (None, format!("error: {e:#}")),
                    };
                    eprintln!("n={n} p={p} {dist} {} b={b} {mode}: {status}", cell.algo.name());
                    cells.push(CellRecord {
                        row,
                        n,
                        p,
                        b,
                        mode,
                        algorithm: cell.algo.name().into(),
                        dist: dist.to_string(),
                        trials: args.trials,
                        status,
                    });
                }
            }
        }
    }

    match &args.out {
        Some(path) => {
            let file = File::create(path)
                .with_context(|| format!("creating {}", path.display()))
                .map_err(Failure::io)?;
            RunReport::write_csv(&rows, file, true).map_err(Failure::io)?;
            let side = sidecar_path(path);
            let file = File::create(&side)
                .with_context(|| format!("creating {}", side.display()))
                .map_err(Failure::io)?;
            let mut w = csv::Writer::from_writer(file);
            for c in &cells {
                w.serialize(c).map_err(Failure::io)?;
            }
            w.flush().map_err(Failure::io)?;
        }
        None => {
            let stdout = std::io::stdout();
            RunReport::write_csv(&rows, stdout.lock(), true).map_err(Failure::io)?;
            stdout.lock().flush().map_err(Failure::io)?;
        }
    }
    let failed = cells.iter().filter(|c| c.status != "ok").count();
    eprintln!(
        "{} cells, {} rows, {failed} failed, {:.1}s",
        cells.len(),
        rows.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_ranges() {
        let specs = vec!["2^10..2^13".to_string(), "1000".to_string()];
        assert_eq!(expand_counts(&specs).unwrap(), vec![1024, 2048, 4096, 8192, 1000]);
        assert!(expand_counts(&["8..4".to_string()]).is_err());
    }

    #[test]
    fn batch_specs() {
        let specs: Vec<String> = ["auto", "3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_batches(&specs).unwrap(), vec![None, Some(3)]);
        assert!(parse_batches(&["0".to_string()]).is_err());
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("out/run.csv")), PathBuf::from("out/run.csv.cells.csv"));
    }
}
