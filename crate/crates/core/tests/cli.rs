use std::path::Path;
use std::process::{Command, Output};

fn winsched(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_winsched")).args(args).current_dir(dir).output().expect("binary runs")
}

fn generate(dir: &Path, seed: &str) {
    let out = winsched(&["generate", "--count", "400", "--dist", "mixed", "--seed", seed, "--out", "w.xml"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_run_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "3");

    let out =
        winsched(&["run", "--policy", "lazy", "--input", "w.xml", "--out", "m.csv", "--slot-verify", "--audit"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(csv.starts_with("round,time,event,client,n,H,ceilH,channels,cum_realloc,amortized,ratio,objective\n"));
    assert_eq!(csv.lines().count(), 801);

    let out =
        winsched(&["compare", "--policies", "preemptive,lazy,classified", "--input", "w.xml", "--out", "c.csv"], d);
    assert!(out.status.success());
    let header = std::fs::read_to_string(d.join("c.csv")).unwrap().lines().next().unwrap().to_string();
    for col in ["preemptive_channels", "lazy_cum_realloc", "classified_objective"] {
        assert!(header.contains(col), "{header}");
    }

    let out = winsched(&["oracle-opt", "--input", "w.xml"], d);
    assert!(String::from_utf8_lossy(&out.stdout).contains("peak_opt="));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "5");

    assert_eq!(winsched(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(winsched(&["run", "--policy", "fifo", "--input", "w.xml", "--out", "m.csv"], d).status.code(), Some(1));
    assert_eq!(
        winsched(&["compare", "--policies", "lazy", "--input", "w.xml", "--out", "c.csv"], d).status.code(),
        Some(1)
    );

    // reallocated tree clients miss their window across the move
    let strict = winsched(
        &["run", "--policy", "preemptive", "--input", "w.xml", "--out", "m.csv", "--slot-verify", "--strict"],
        d,
    );
    assert_eq!(strict.status.code(), Some(2));

    // the strict preemptive channel bound already fails on the first arrival
    let args = [
        "run",
        "--policy",
        "preemptive",
        "--input",
        "w.xml",
        "--out",
        "m.csv",
        "--fail-on-breach",
        "--findings",
        "f.csv",
    ];
    assert_eq!(winsched(&args, d).status.code(), Some(3));
    let findings = std::fs::read_to_string(d.join("f.csv")).unwrap();
    assert!(findings.starts_with("round,client,kind,gap,bound,boundary\n"));
    assert!(findings.contains("preemptive_channels"));
}

#[test]
fn strict_pow2_rejects_rounded_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d, "1");
    let out = winsched(&["run", "--policy", "classified", "--strict-pow2", "--input", "w.xml", "--out", "m.csv"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("power of two"));
    let out = winsched(&["run", "--policy", "classified", "--no-big-channel", "--input", "w.xml", "--out", "m.csv"], d);
    assert!(out.status.success());
}

#[test]
fn malformed_workload_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("bad.xml"),
        "<clients>\n  <client id=\"1\" t_arrive=\"899\" size=\"6.628461669685978\" w_size=\"8\" t_leave=\"1737.0\"/>\n</clients>\n",
    )
    .unwrap();
    let out = winsched(&["run", "--policy", "lazy", "--input", "bad.xml", "--out", "m.csv"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
