use std::path::Path;
use std::process::{Command, Output};

use fractalsort::{oracle_sort, read_key_file, write_key_file};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fractalsort"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn fractalsort")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.fsk", "b.fsk"] {
        let out = run(&["gen", "--n", "5000", "--p", "20", "--dist", "gaussian", "--seed", "9", "--out", name], dir.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(dir.path().join("a.fsk")).unwrap();
    let b = std::fs::read(dir.path().join("b.fsk")).unwrap();
    assert_eq!(a, b);
    let (header, keys) = read_key_file(dir.path().join("a.fsk")).unwrap();
    assert_eq!((header.n, header.precision_bits, keys.len()), (5000, 20, 5000));
}

#[test]
fn every_algorithm_agrees_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["gen", "--n", "2^14", "--p", "28", "--out", "in.fsk"], dir.path())), 0);
    let runs: [&[&str]; 4] = [
        &["--algo", "oracle"],
        &["--algo", "radix", "--digit-bits", "11"],
        &["--algo", "fractal", "--batches", "5"],
        &["--algo", "fractal", "--mode", "parallel", "--batches", "3", "--workers", "2", "--lb", "4"],
    ];
    let mut outputs = Vec::new();
    for (i, extra) in runs.iter().enumerate() {
        let name = format!("out{i}.fsk");
        let mut args = vec!["sort", "in.fsk", "--out", &name, "--report", "report.csv"];
        args.extend_from_slice(extra);
        let out = run(&args, dir.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(code(&run(&["verify", "in.fsk", &name], dir.path())), 0);
        outputs.push(std::fs::read(dir.path().join(&name)).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));

    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "n,p,b,mode,algorithm,latency_s,bytes_read,bytes_written,peak_aux_bytes,b_eff,unit_throughput");
    assert!(lines[4].starts_with("16384,28,3,parallel,fractal,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let keys: Vec<u64> = (0..1000u64).map(|i| (i * 7919) % 4096).collect();
    write_key_file(dir.path().join("in.fsk"), &keys, 12).unwrap();

    assert_eq!(code(&run(&["sort", "in.fsk", "--out", "x.fsk", "--algo", "quick"], dir.path())), 1);
    assert_eq!(code(&run(&["sort", "in.fsk", "--out", "x.fsk", "--batches", "0"], dir.path())), 1);
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&run(&["--help"], dir.path())), 0);

    let mut wrong = oracle_sort(&keys);
    wrong.swap(10, 11);
    write_key_file(dir.path().join("wrong.fsk"), &wrong, 12).unwrap();
    let mut sorted = oracle_sort(&keys);
    write_key_file(dir.path().join("right.fsk"), &sorted, 12).unwrap();
    sorted.pop();
    write_key_file(dir.path().join("short.fsk"), &sorted, 12).unwrap();
    if wrong[10] != wrong[11] {
        assert_eq!(code(&run(&["verify", "in.fsk", "wrong.fsk"], dir.path())), 2);
    }
    assert_eq!(code(&run(&["verify", "in.fsk", "short.fsk"], dir.path())), 2);
    assert_eq!(code(&run(&["verify", "in.fsk", "right.fsk"], dir.path())), 0);

    assert_eq!(code(&run(&["verify", "missing.fsk", "right.fsk"], dir.path())), 3);
    assert_eq!(code(&run(&["sort", "missing.fsk", "--out", "x.fsk"], dir.path())), 3);
    std::fs::write(dir.path().join("junk.fsk"), b"not a key file at all").unwrap();
    assert_eq!(code(&run(&["sort", "junk.fsk", "--out", "x.fsk"], dir.path())), 3);
}

#[test]
fn bench_writes_rows_and_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "bench", "--n", "2^10..2^11", "--p", "16", "--dist", "uniform,zipfian:1.3", "--algo", "fractal,radix",
            "--batches", "1,4", "--trials", "2", "--out", "bench.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let mut rows = csv::Reader::from_path(dir.path().join("bench.csv")).unwrap();
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    // 2 sizes x 2 distributions x (2 fractal batch counts + 1 radix)
    assert_eq!(records.len(), 12);
    for r in &records {
        assert_eq!(r.len(), 11);
        let latency: f64 = r[5].parse().unwrap();
        let b_eff: f64 = r[9].parse().unwrap();
        assert!(latency > 0.0 && b_eff > 0.0 && b_eff <= 1.0);
    }

    let cells = std::fs::read_to_string(dir.path().join("bench.csv.cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 13);
    assert!(cells.lines().skip(1).all(|l| l.ends_with(",2,ok")));
    assert!(cells.contains("zipfian:1.3"));
}

#[test]
fn bench_rejects_oversized_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["bench", "--n", "2^25", "--trials", "1"], dir.path())), 1);
    assert_eq!(code(&run(&["bench", "--n", "100", "--trials", "0"], dir.path())), 1);
}

#[test]
fn zipfian_files_are_skewed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--n", "20000", "--p", "16", "--dist", "zipfian:1.2", "--out", "z.fsk"], dir.path());
    assert_eq!(code(&out), 0);
    let (_, keys) = read_key_file(dir.path().join("z.fsk")).unwrap();
    let top = keys.iter().filter(|&&k| k == 0).count();
    assert!(top > 20000 / 10, "rank-1 key appears {top} times");
}
