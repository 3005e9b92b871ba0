//! `fractalsort`: generate key files, sort them, verify results and run
//! benchmark sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure, 3 I/O error.

mod sweep;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fractalsort::baselines::oracle_baseline;
use fractalsort::metrics::DEFAULT_CACHE_BUDGET;
use fractalsort::{
    oracle_sort, read_key_file, write_key_file, BatchConfig, BatchMode,
    CacheModel, DatasetSpec, Distribution, FractalSorter, KeyFileError, KeyFileReader, RunReport, SortConfig,
    SortError,
};

const EXIT_USAGE: u8 = 1;
const EXIT_MISMATCH: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "fractalsort", version, about = "Sparse-trie histogram sort toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic key file.
    Gen(GenArgs),
    /// Sort a key file.
    Sort(SortArgs),
    /// Check that SORTED is the sorted form of INPUT.
    Verify(VerifyArgs),
    /// Run a benchmark sweep and write one CSV row per cell.
    Bench(sweep::BenchArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_count)]
    n: u64,
    #[arg(long, default_value_t = 32)]
    p: u32,
    /// uniform, zipfian[:s], gaussian[:mu[:sigma]], sorted, reverse,
    /// almost_sorted[:fraction]
    #[arg(long, default_value = "uniform")]
    dist: Distribution,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    Fractal,
    Radix,
    Oracle,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fractal => "fractal",
            Algorithm::Radix => "radix",
            Algorithm::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Serial,
    Parallel,
}

impl From<ModeArg> for BatchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Serial => BatchMode::Serial,
            ModeArg::Parallel => BatchMode::Parallel,
        }
    }
}

#[derive(Debug, Args)]
struct SortArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "fractal")]
    algo: Algorithm,
    /// Batch count; picked from n and the cache budget when omitted.
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long, value_enum, default_value = "serial")]
    mode: ModeArg,
    /// Worker threads in parallel mode (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Bin depth l_b.
    #[arg(long)]
    lb: Option<u32>,
    #[arg(long, value_parser = parse_count, default_value_t = DEFAULT_CACHE_BUDGET)]
    cache_budget: u64,
    /// Radix digit width.
    #[arg(long, default_value_t = 8)]
    digit_bits: u32,
    /// Append a run report row to this CSV file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    input: PathBuf,
    sorted: PathBuf,
}

/// Accepts plain integers (underscores allowed), `2^k` and `1e6`-style counts.
pub fn parse_count(s: &str) -> Result<u64, String> {
    let s = s.trim().replace('_', "");
    if let Some(exp) = s.strip_prefix("2^") {
        let k: u32 = exp.parse().map_err(|e| format!("bad exponent in {s:?}: {e}"))?;
        return 1u64.checked_shl(k).filter(|_| k < 64).ok_or_else(|| format!("{s} overflows"));
    }
    if let Some((mant, exp)) = s.split_once(['e', 'E']) {
        let m: u64 = mant.parse().map_err(|e| format!("bad count {s:?}: {e}"))?;
        let e: u32 = exp.parse().map_err(|e| format!("bad count {s:?}: {e}"))?;
        return 10u64
            .checked_pow(e)
            .and_then(|p| p.checked_mul(m))
            .ok_or_else(|| format!("{s} overflows"));
    }
    s.parse().map_err(|e| format!("bad count {s:?}: {e}"))
}

/// An error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    pub fn io(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_IO,
            error: error.into(),
        }
    }
}

impl From<KeyFileError> for Failure {
    // Malformed and truncated files count as I/O failures too.
    fn from(e: KeyFileError) -> Self {
        Failure::io(e)
    }
}

impl From<SortError> for Failure {
    fn from(e: SortError) -> Self {
        match e {
            SortError::Source(inner) => inner.into(),
            other => Failure::usage(other),
        }
    }
}

pub struct SortRun {
    pub keys: Vec<u64>,
    pub report: RunReport,
}

/// Sorts `path` with the chosen algorithm and builds its report row.
pub fn run_sort(
    path: &Path,
    algo: Algorithm,
    batch: BatchConfig,
    lb: Option<u32>,
    cache: CacheModel,
    digit_bits: u32,
) -> Result<SortRun, Failure> {
    let (n, p, keys, meter, latency, b, workers) = match algo {
        Algorithm::Fractal => {
            let reader = KeyFileReader::open(path)?;
            let sorter = FractalSorter::new(SortConfig::new(batch).with_bin_depth(lb).with_cache(cache))?;
            let out = sorter.sort_source(&reader)?;
            let h = reader.header();
            (
                h.n,
                h.precision_bits,
                out.keys,
                out.stats.meter,
                out.stats.latency_seconds,
                batch.batch_count as u32,
                out.stats.workers as u32,
            )
        }
        Algorithm::Radix | Algorithm::Oracle => {
            let (h, input) = load(path)?;
            let result = if algo == Algorithm::Radix {
                fractalsort::baselines::lsb_radix_sort_with(&input, h.precision_bits, digit_bits, &cache)?
            } else {
                oracle_baseline(&input, h.precision_bits)
            };
            (h.n, h.precision_bits, result.sorted_keys, result.meter, result.latency_seconds, 1, 1)
        }
    };
    let mode = if algo == Algorithm::Fractal { batch.mode.to_string() } else { "serial".into() };
    let report = RunReport::from_meter(n, p, b, &mode, algo.name(), latency, workers, &meter);
    Ok(SortRun { keys, report })
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn batch_config(n: u64, p: u32, batches: Option<usize>, mode: ModeArg, workers: Option<usize>, cache: u64) -> BatchConfig {
    let b = batches.unwrap_or_else(|| fractalsort::engine::choose_batch_params_for_cache(n, p, cache).batch_count);
    match mode {
        ModeArg::Serial => BatchConfig::serial(b),
        ModeArg::Parallel => BatchConfig::parallel(b, workers.unwrap_or_else(default_workers)),
    }
}

fn append_report(path: &Path, report: &RunReport) -> Result<(), Failure> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(Failure::io)?;
    RunReport::write_csv(std::slice::from_ref(report), file, fresh)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::io)
}

fn load(path: &Path) -> Result<(fractalsort::KeyFileHeader, Vec<u64>), Failure> {
    read_key_file(path).map_err(|e| Failure::io(anyhow::Error::new(e).context(format!("reading {}", path.display()))))
}

fn gen(args: GenArgs) -> Result<(), Failure> {
    let spec = DatasetSpec::new(args.dist, args.n, args.p, args.seed);
    let keys = spec.generate().map_err(|e| Failure::usage(anyhow!(e)))?;
    write_key_file(&args.out, &keys, args.p)?;
    eprintln!("wrote {} {}-bit keys ({}) to {}", args.n, args.p, args.dist, args.out.display());
    Ok(())
}

fn sort(args: SortArgs) -> Result<(), Failure> {
    let header = KeyFileReader::open(&args.input)
        .map_err(|e| Failure::io(anyhow::Error::new(e).context(format!("reading {}", args.input.display()))))?
        .header();
    let batch = batch_config(header.n, header.precision_bits, args.batches, args.mode, args.workers, args.cache_budget);
    let cache = CacheModel::new(args.cache_budget);
    let run = run_sort(&args.input, args.algo, batch, args.lb, cache, args.digit_bits)?;
    write_key_file(&args.out, &run.keys, header.precision_bits)?;
    if let Some(path) = &args.report {
        append_report(path, &run.report)?;
    }
    let r = &run.report;
    eprintln!(
        "{} sorted {} keys in {:.4}s: read {} B, wrote {} B, peak aux {} B, b_eff {:.3}",
        r.algorithm, r.n, r.latency_seconds, r.bytes_read, r.bytes_written, r.peak_aux_bytes, r.b_eff
    );
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let (in_header, input) = load(&args.input)?;
    let (out_header, sorted) = load(&args.sorted)?;
    let mismatch = |msg: String| Failure {
        code: EXIT_MISMATCH,
        error: anyhow!(msg),
    };
    if in_header.precision_bits != out_header.precision_bits {
        return Err(mismatch(format!(
            "precision differs: {} vs {}",
            in_header.precision_bits, out_header.precision_bits
        )));
    }
    let expected = oracle_sort(&input);
    if expected.len() != sorted.len() {
        return Err(mismatch(format!("{} keys in, {} keys out", expected.len(), sorted.len())));
    }
    if let Some(i) = expected.iter().zip(&sorted).position(|(a, b)| a != b) {
        return Err(mismatch(format!(
            "first difference at position {i}: expected {}, found {}",
            expected[i], sorted[i]
        )));
    }
    eprintln!("verified: {} keys", sorted.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(args) => gen(args),
        Command::Sort(args) => sort(args),
        Command::Verify(args) => verify(args),
        Command::Bench(args) => sweep::bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
