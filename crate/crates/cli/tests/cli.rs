use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sharesim_core::{SimConfig, WorkloadSpec};

const BIN: &str = env!("CARGO_BIN_EXE_sharesim");

fn sharesim(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("SHARESIM_SEED")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, c: &SimConfig) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, c.to_toml_string()).unwrap();
    path
}

fn inline_config(ops: &str) -> SimConfig {
    let mut c = SimConfig::minimal(1 << 20, 2, 2);
    c.workload.ops = Some(ops.into());
    c
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn run_writes_metrics_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        &inline_config("t=0 host=0 read addr=0x40 len=8\nt=10 host=1 read addr=0x40 len=8"),
    );
    let o = sharesim(&["run", "config.toml", "-o", "out"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["total_time_ns"], 185);
    let trace = fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert!(trace.lines().next().unwrap().starts_with("time_ns,"));
}

#[test]
fn deadlock_exits_2_and_still_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        &inline_config(
            "t=0 host=0 register app=1
t=0 host=1 register app=1
t=0 host=0 map app=1 region=0
t=0 host=1 map app=1 region=0
t=0 host=0 acquire app=1 region=0
t=5 host=1 acquire app=1 region=0",
        ),
    );
    let o = sharesim(&["run", "config.toml", "-o", "out"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("host 1"));
    assert!(dir.path().join("out/trace.csv").exists());
}

#[test]
fn strict_mode_exits_3_on_violation() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        &inline_config("t=0 host=0 write addr=0x0 data=01"),
    );
    assert_eq!(
        code(&sharesim(&["run", "config.toml", "-o", "out"], dir.path())),
        0
    );
    assert_eq!(
        code(&sharesim(
            &["run", "config.toml", "-o", "out", "--strict"],
            dir.path()
        )),
        3
    );
}

#[test]
fn invalid_config_exits_1_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("config.toml"),
        "[device]\nhdm_bytes = 4096\nnum_ports = 0\n[hosts]\ncount = 2\n",
    )
    .unwrap();
    let o = sharesim(&["run", "config.toml", "-o", "out"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_ports"));
}

#[test]
fn sweep_single_host_never_waits() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = SimConfig::minimal(1 << 20, 2, 1);
    c.workload.generator = Some(WorkloadSpec {
        num_ops: 500,
        read_fraction: 0.0,
        write_fraction: 1.0,
        num_hosts: 1,
        ..Default::default()
    });
    write_config(dir.path(), &c);
    let o = sharesim(
        &[
            "sweep",
            "config.toml",
            "--sizes",
            "64,4KiB,1MiB",
            "-o",
            "out",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(dir.path().join("out/sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
    }
    assert!(dir.path().join("out/workload.txt").exists());
}

#[test]
fn sweep_rejects_non_power_of_two() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &inline_config(""));
    let o = sharesim(
        &["sweep", "config.toml", "--sizes", "100", "-o", "out"],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn compare_filters_reports_three_modes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = inline_config(
        "t=0 host=1 read addr=0x40 len=8
t=100 host=0 write addr=0x0 data=01",
    );
    c.coherence.precise_ranges = vec![[0u64.into(), 0x1000u64.into()]];
    write_config(dir.path(), &c);
    let o = sharesim(&["compare-filters", "config.toml", "-o", "out"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("out/filters.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(
        rows[0],
        "mode,bi_total,bi_unnecessary,metadata_bytes,total_time_ns"
    );
    assert!(rows[1].starts_with("precise,0,0,"));
    assert!(rows[2].starts_with("imprecise,1,1,"));
    assert!(rows[3].starts_with("hybrid,0,0,"));
}

#[test]
fn gen_is_reproducible_and_honours_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.toml"),
        "num_ops = 50\nread_fraction = 0.5\nwrite_fraction = 0.5\natomic_fraction = 0.0\nseed = 1\n",
    )
    .unwrap();
    for name in ["a.txt", "b.txt"] {
        assert_eq!(
            code(&sharesim(&["gen", "spec.toml", "-o", name], dir.path())),
            0
        );
    }
    let a = fs::read_to_string(dir.path().join("a.txt")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b.txt")).unwrap());
    assert!(a.lines().count() >= 50);

    let o = Command::new(BIN)
        .args(["gen", "spec.toml", "-o", "c.txt"])
        .current_dir(dir.path())
        .env("SHARESIM_SEED", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_ne!(a, fs::read_to_string(dir.path().join("c.txt")).unwrap());
}

#[test]
fn check_atomics_small_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = sharesim(&["check-atomics", "--max-len", "1"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout)
        .trim_end()
        .ends_with("PASS"));
}
