use std::path::{Path, PathBuf};
use std::process::Command;

use saris_core::cluster::Variant;
use saris_core::codegen::OptConfig;
use saris_core::error::HarnessError;
use saris_core::harness::*;
use saris_core::ir::catalog_kernel;

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn small_suite() -> SuiteConfig {
    let kernels = ["jacobi_2d", "star3d2r"].map(|k| catalog_kernel(k).unwrap()).to_vec();
    SuiteConfig {
        unroll: Some(2),
        ..SuiteConfig::new(kernels)
    }
}

fn saris(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_saris")).args(args).output().unwrap()
}

#[test]
fn shipped_goldens_match_the_code_generator() {
    let out = tempfile::tempdir().unwrap();
    let diffs = check_goldens(&golden_dir(), out.path(), false).unwrap();
    assert_eq!(diffs.len(), 22);
    for d in &diffs {
        assert!(d.passed(), "{}: {:?}", d.name, d.status);
    }
}

#[test]
fn a_launch_cost_change_breaks_the_star7_golden() {
    let out = tempfile::tempdir().unwrap();
    let items: Vec<_> = golden_items()
        .into_iter()
        .filter(|(s, _, _)| s.name == "star7")
        .map(|(s, shape, opt)| (s, shape, OptConfig { launch_cost: 5, ..opt }))
        .collect();
    emit_listings(&items, &[Variant::Saris], out.path()).unwrap();
    let golden = std::fs::read_to_string(golden_dir().join("star7.saris.s")).unwrap();
    let emitted = std::fs::read_to_string(out.path().join("star7.saris.s")).unwrap();
    assert!(matches!(diff_text(&golden, &emitted), ListingStatus::Differs { .. }));
}

#[test]
fn blessing_makes_a_stale_golden_pass() {
    let golden = tempfile::tempdir().unwrap();
    let emitted = tempfile::tempdir().unwrap();
    write_file(&golden.path().join("star7.saris.s"), "stale\n").unwrap();
    let before = check_goldens(golden.path(), emitted.path(), false).unwrap();
    let stale = before.iter().find(|d| d.name == "star7.saris.s").unwrap();
    assert_eq!(
        stale.status,
        ListingStatus::Differs {
            line: 1,
            golden: "stale".into(),
            emitted: std::fs::read_to_string(emitted.path().join("star7.saris.s"))
                .unwrap()
                .lines()
                .next()
                .unwrap()
                .into()
        }
    );
    assert!(before.iter().any(|d| d.status == ListingStatus::Unexpected));
    let after = check_goldens(golden.path(), emitted.path(), true).unwrap();
    assert!(after.iter().all(ListingDiff::passed));
}

#[test]
fn missing_and_unexpected_listings_are_reported() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_file(&a.path().join("x.base.s"), "li t0, 1\n").unwrap();
    write_file(&b.path().join("y.base.s"), "li t0, 1\n").unwrap();
    let d = diff_listings(a.path(), b.path()).unwrap();
    assert_eq!(d[0].status, ListingStatus::Missing);
    assert_eq!(d[1].status, ListingStatus::Unexpected);
}

#[test]
fn suite_csv_is_identical_across_runs() {
    let cfg = small_suite();
    let a = run_suite(&cfg).unwrap();
    let b = run_suite(&cfg).unwrap();
    assert_eq!(a.csv(), b.csv());
    assert_eq!(a.scaleout_csv(), b.scaleout_csv());
    let csv = a.csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_SCHEMA));
    assert_eq!(lines.next(), Some(CSV_COLUMNS));
    assert_eq!(lines.count(), 4);
    assert_eq!(a.estimates.len(), 2);
}

#[test]
fn suite_records_speedups_against_base() {
    let r = run_suite(&small_suite()).unwrap();
    let base = r.run("jacobi_2d", Variant::Base).unwrap();
    let fast = r.run("jacobi_2d", Variant::Saris).unwrap();
    assert_eq!(base.speedup, Some(1.0));
    assert_eq!(fast.speedup, Some(base.metrics.cycles as f64 / fast.metrics.cycles as f64));
    assert!(r.runs.iter().all(|x| x.metrics.opt.unroll == 2));
    let s = r.cluster_summary().unwrap();
    assert!(s.speedup > 1.0);
}

#[test]
fn single_variant_suites_skip_the_scaleout() {
    let cfg = SuiteConfig {
        variants: vec![Variant::Saris],
        ..small_suite()
    };
    let r = run_suite(&cfg).unwrap();
    assert!(r.estimates.is_empty());
    assert!(r.cluster_summary().is_none());
    assert_eq!(r.runs[0].speedup, None);
}

#[test]
fn artifacts_land_in_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_suite(&small_suite()).unwrap();
    let files = r.write_artifacts(dir.path()).unwrap();
    assert_eq!(files.len(), 5);
    assert!(files.iter().all(|f| f.exists()));
    let scaleout = std::fs::read_to_string(dir.path().join("scaleout.csv")).unwrap();
    assert!(scaleout.starts_with(&format!("{SCALEOUT_SCHEMA}\n{SCALEOUT_COLUMNS}\n")));
}

#[test]
fn unknown_kernels_and_tiny_tiles_are_errors() {
    assert!(matches!(
        resolve_kernels(&["jacobi_3d".into()], false),
        Err(HarnessError::UnknownKernel(_))
    ));
    let cfg = SuiteConfig {
        tile: Some(4),
        ..SuiteConfig::new(vec![catalog_kernel("star2d3r").unwrap()])
    };
    assert!(matches!(run_suite(&cfg), Err(HarnessError::InvalidTile { .. })));
}

#[test]
fn cli_run_emits_one_listing_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = saris(&["run", "--kernel", "jacobi_2d", "--unroll", "1", "--emit-asm", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut asm: Vec<_> = std::fs::read_dir(dir.path().join("asm"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    asm.sort();
    assert_eq!(asm, ["jacobi_2d.base.s", "jacobi_2d.saris.s"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("jacobi_2d"));
    let csv = std::fs::read_to_string(dir.path().join("suite.csv")).unwrap();
    assert!(csv.starts_with(CSV_SCHEMA));
}

#[test]
fn cli_rejects_unknown_kernels() {
    let o = saris(&["run", "--kernel", "nope", "--out", "/nonexistent"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown kernel"));
}

#[test]
fn cli_golden_check_passes_on_the_shipped_listings() {
    let dir = tempfile::tempdir().unwrap();
    let golden = golden_dir();
    let o = saris(&["golden", "--dir", golden.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let o = saris(&["diff", golden.to_str().unwrap(), dir.path().to_str().unwrap()]);
    assert!(o.status.success());
}

#[test]
fn cli_lists_the_catalog_and_machine() {
    let o = saris(&["kernels"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 11);
    let o = saris(&["machine"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(
        saris_core::scaleout::MachineDescriptor::from_toml(&text).unwrap(),
        Default::default()
    );
}

#[test]
fn cli_timing_flags_reach_the_simulator() {
    let cycles = |extra: &[&str]| {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["run", "--kernel", "j2d5pt", "--unroll", "1", "--variants", "saris", "--out"];
        args.push(dir.path().to_str().unwrap());
        args.extend_from_slice(extra);
        let o = saris(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(dir.path().join("suite.csv")).unwrap();
        let row = csv.lines().nth(2).unwrap().to_string();
        row.split(',').nth(2).unwrap().parse::<u64>().unwrap()
    };
    let warm = cycles(&[]);
    assert_eq!(warm, cycles(&["--icache-penalty", "0"]));
    assert!(cycles(&["--icache-penalty", "40"]) > warm);
}
