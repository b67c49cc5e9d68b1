//! Experiment commands behind the `sharesim` binary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sharesim_core::coherence::FilterMode;
use sharesim_core::config::{parse_config, ConfigError, SEED_ENV};
use sharesim_core::engine::interleave::{check_two_ports, CheckSummary, InterleaveError};
use sharesim_core::engine::{run, EngineError, Metrics, RunReport, TraceRecord};
use sharesim_core::units::parse_u64;
use sharesim_core::workload::{generate_workload, WorkloadError, WorkloadSpec};
use sharesim_core::{SimConfig, Workload};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DEADLOCK: i32 = 2;
pub const EXIT_STRICT: i32 = 3;

/// Region sizes swept when none are given.
pub const DEFAULT_SWEEP_SIZES: [u64; 4] = [64, 4096, 2 << 20, 64 << 20];

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Workload(#[from] WorkloadError),

    #[error("{0}")]
    Engine(EngineError),

    #[error("{0}")]
    Deadlock(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Interleave(#[from] InterleaveError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Deadlock(_) => EXIT_DEADLOCK,
            _ => EXIT_ERROR,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Deadlock(d) => CliError::Deadlock(d.to_string()),
            other => CliError::Engine(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn csv_string<T: Serialize>(path: &Path, rows: &[T]) -> Result<String, CliError> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| csv_err(csv::Error::from(e.into_error())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Loads a config (with the seed override applied) and its workload.
pub fn load(config_path: &Path) -> Result<(SimConfig, Workload), CliError> {
    let mut config = parse_config(config_path)?;
    config.apply_seed_env()?;
    let workload = config.load_workload()?;
    Ok((config, workload))
}

/// `metrics.json`: flat, key-sorted map of numbers.
pub fn metrics_json(metrics: &Metrics) -> String {
    let mut s = serde_json::to_string_pretty(&metrics.flat()).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn trace_csv(trace: &[TraceRecord]) -> Result<String, CliError> {
    csv_string(Path::new("trace.csv"), trace)
}

fn write_run_outputs(out_dir: &Path, report: &RunReport) -> Result<(), CliError> {
    ensure_dir(out_dir)?;
    write_file(
        &out_dir.join("metrics.json"),
        &metrics_json(&report.metrics),
    )?;
    let path = out_dir.join("trace.csv");
    write_file(&path, &csv_string(&path, &report.trace)?)
}

/// `sharesim run`: writes `metrics.json` and `trace.csv`.
pub fn cmd_run(config_path: &Path, out_dir: &Path, strict: bool) -> Result<i32, CliError> {
    let (config, workload) = load(config_path)?;
    match run(&config, &workload) {
        Ok(report) => {
            write_run_outputs(out_dir, &report)?;
            let violations = report.metrics.protocol_violations;
            if strict && violations > 0 {
                eprintln!("{violations} protocol violations (strict mode)");
                return Ok(EXIT_STRICT);
            }
            Ok(EXIT_OK)
        }
        Err(EngineError::Deadlock(d)) => {
            write_run_outputs(out_dir, &d.report)?;
            eprintln!("{d}");
            Ok(EXIT_DEADLOCK)
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub mode: String,
    pub bi_total: u64,
    pub bi_unnecessary: u64,
    pub metadata_bytes: u64,
    pub total_time_ns: u64,
}

/// Precise, imprecise and hybrid modes for `config`. The hybrid row uses
/// `coherence.precise_ranges`.
pub fn comparison_modes(config: &SimConfig) -> Result<Vec<FilterMode>, CliError> {
    let hybrid = SimConfig {
        coherence: sharesim_core::config::CoherenceSection {
            mode: sharesim_core::config::ModeName::Hybrid,
            ..config.coherence.clone()
        },
        ..config.clone()
    };
    if config.coherence.precise_ranges.is_empty() {
        return Err(CliError::Usage(
            "compare-filters needs coherence.precise_ranges for the hybrid row".into(),
        ));
    }
    Ok(vec![
        FilterMode::Precise,
        FilterMode::Imprecise {
            granularity: config.coherence.granularity_bytes,
        },
        hybrid.filter_mode(),
    ])
}

/// Runs the same workload under each filter mode, in parallel.
pub fn compare_filters(
    config: &SimConfig,
    workload: &Workload,
) -> Result<Vec<FilterRow>, CliError> {
    comparison_modes(config)?
        .par_iter()
        .map(|mode| {
            let report = run(&config.with_mode(mode), workload)?;
            let m = report.metrics;
            Ok(FilterRow {
                mode: mode.name().to_string(),
                bi_total: m.bi_snoops_total,
                bi_unnecessary: m.bi_snoops_unnecessary,
                metadata_bytes: m.directory_metadata_bytes,
                total_time_ns: m.total_time_ns,
            })
        })
        .collect()
}

/// `sharesim compare-filters`: writes `workload.txt` and `filters.csv`.
pub fn cmd_compare_filters(config_path: &Path, out_dir: &Path) -> Result<i32, CliError> {
    let (config, workload) = load(config_path)?;
    let rows = compare_filters(&config, &workload)?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("workload.txt"), &workload.to_string())?;
    let path = out_dir.join("filters.csv");
    write_file(&path, &csv_string(&path, &rows)?)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub region_bytes: u64,
    pub mean_wait_ns: f64,
    pub p99_wait_ns: u64,
    pub lock_table_bytes: u64,
}

/// Parses `64,4KiB,0x200000` style lists; sizes must be powers of two.
pub fn parse_sizes(text: &str) -> Result<Vec<u64>, CliError> {
    let sizes = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_u64(s).map_err(CliError::Usage))
        .collect::<Result<Vec<u64>, _>>()?;
    if sizes.is_empty() {
        return Err(CliError::Usage("no region sizes given".into()));
    }
    if let Some(bad) = sizes.iter().find(|s| !s.is_power_of_two()) {
        return Err(CliError::Usage(format!(
            "region size {bad} is not a power of two"
        )));
    }
    Ok(sizes)
}

/// Runs the same workload at each lock region size, in parallel.
pub fn granularity_sweep(
    config: &SimConfig,
    workload: &Workload,
    sizes: &[u64],
) -> Result<Vec<SweepRow>, CliError> {
    sizes
        .par_iter()
        .map(|&size| {
            let mut c = config.clone();
            c.device.lock_region_bytes = size;
            c.validate()?;
            let report = run(&c, workload)?;
            Ok(SweepRow {
                region_bytes: size,
                mean_wait_ns: report.metrics.mean_wait_ns(),
                p99_wait_ns: report.metrics.p99_wait_ns(),
                lock_table_bytes: c.device_config().lock_table_bytes(),
            })
        })
        .collect()
}

/// `sharesim sweep`: writes `workload.txt` and `sweep.csv`.
pub fn cmd_sweep(config_path: &Path, sizes: &[u64], out_dir: &Path) -> Result<i32, CliError> {
    let (config, workload) = load(config_path)?;
    let rows = granularity_sweep(&config, &workload, sizes)?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("workload.txt"), &workload.to_string())?;
    let path = out_dir.join("sweep.csv");
    write_file(&path, &csv_string(&path, &rows)?)?;
    Ok(EXIT_OK)
}

/// `sharesim gen`: the spec file is a TOML `WorkloadSpec`.
pub fn cmd_gen(spec_path: &Path, out: &Path) -> Result<i32, CliError> {
    let text = fs::read_to_string(spec_path).map_err(io_err(spec_path))?;
    let mut spec = WorkloadSpec::from_toml_str(&text)?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        spec.seed = Some(parse_u64(&v).map_err(CliError::Usage)?);
    }
    let workload = generate_workload(&spec)?;
    write_file(out, &workload.to_string())?;
    Ok(EXIT_OK)
}

/// `sharesim check-atomics`: exhaustive two-port interleaving check.
pub fn cmd_check_atomics(max_len: usize) -> Result<(CheckSummary, i32), CliError> {
    let start = Instant::now();
    let s = check_two_ports(max_len)?;
    println!("program pairs:            {}", s.program_pairs);
    println!("interleavings executed:   {}", s.interleavings);
    println!(
        "outcomes with witness:    {}/{}",
        s.outcomes_with_witness, s.outcomes
    );
    println!(
        "TAS races, single winner: {}/{}",
        s.tas_races_single_winner, s.tas_races
    );
    println!(
        "engine runs enumerated:   {}/{}",
        s.engine_runs_enumerated, s.engine_runs
    );
    for f in s.failures.iter().take(20) {
        println!("FAIL {f}");
    }
    println!("elapsed: {:.2?}", start.elapsed());
    let code = if s.passed() { EXIT_OK } else { EXIT_ERROR };
    println!("{}", if s.passed() { "PASS" } else { "FAIL" });
    Ok((s, code))
}
