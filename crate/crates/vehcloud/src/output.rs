//! Run directories, sweep orchestration, figure CSVs, and replay
//! validation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ScenarioConfig;
use crate::engine::{self, RunOptions, RunResult};
use crate::error::{Result, SimError};
use crate::metrics::{CellStats, DeliveryOutcome, RunSummary, SweepTable};
use crate::mobility;
use crate::protocols::ProtocolKind;
use crate::ARTIFACT_VERSION;

/// Outputs written by a single run when `--out` is given.
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RECORDS_FILE: &str = "records.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVENTS_FILE: &str = "events.log";
pub const TRACE_FILE: &str = "trace.csv";
pub const HOP_TRACES_FILE: &str = "hop_traces.json";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

fn header_comment(cfg: &ScenarioConfig) -> String {
    format!(
        "# config_hash={} seed={} version={}\n",
        cfg.hash(),
        cfg.run.seed,
        ARTIFACT_VERSION
    )
}

pub fn summary_csv(cfg: &ScenarioConfig, summary: &RunSummary) -> String {
    let mut s = header_comment(cfg);
    s.push_str(
        "n_vehicles,protocol,seed,mean_e2e_delay_s,delivery_probability,collision_ratio,\
         avg_throughput_bps,n_messages,n_pairs,n_delivered,mode_cloud,mode_v2v,mode_v2i\n",
    );
    s.push_str(&format!(
        "{},{},{},{},{},{:.9},{:.9},{},{},{},{},{},{}\n",
        summary.n_vehicles,
        summary.protocol,
        summary.seed,
        fmt_opt(summary.mean_e2e_delay_s),
        fmt_opt(summary.delivery_probability),
        summary.collision_ratio,
        summary.avg_throughput_bps,
        summary.n_messages,
        summary.n_pairs,
        summary.n_delivered,
        summary.mode_cloud,
        summary.mode_v2v,
        summary.mode_v2i,
    ));
    s
}

pub fn records_csv(cfg: &ScenarioConfig, result: &RunResult) -> String {
    let mut s = header_comment(cfg);
    s.push_str("message_id,source,target,outcome,created_at_s,delivered_at_s,hops,mode\n");
    for r in &result.records {
        let outcome = match r.outcome {
            DeliveryOutcome::Delivered => "delivered",
            DeliveryOutcome::Undelivered => "undelivered",
        };
        s.push_str(&format!(
            "{},{},{},{},{:.9},{},{},{:?}\n",
            r.message_id,
            r.source,
            r.target,
            outcome,
            r.created_at,
            fmt_opt(r.delivered_at),
            r.hops,
            r.mode_used,
        ));
    }
    s
}

/// Execute one run, writing its artifacts into `dir`.
pub fn execute_run_to_dir(
    cfg: &ScenarioConfig,
    dir: &Path,
    debug_events: bool,
    dump_trace: bool,
) -> Result<RunResult> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    let write = |name: &str, content: &str| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, content).map_err(|e| SimError::io(&p, e))
    };
    write(CONFIG_FILE, &cfg.to_toml_string())?;
    let result = if debug_events {
        let p = dir.join(EVENTS_FILE);
        let file = File::create(&p).map_err(|e| SimError::io(&p, e))?;
        let mut w = BufWriter::new(file);
        let res = engine::run_with_options(
            cfg,
            RunOptions {
                event_log: Some(&mut w),
                collect_hop_traces: dump_trace,
            },
        )?;
        w.flush().map_err(|e| SimError::io(&p, e))?;
        res
    } else {
        engine::run_with_options(
            cfg,
            RunOptions {
                event_log: None,
                collect_hop_traces: dump_trace,
            },
        )?
    };
    write(SUMMARY_FILE, &summary_csv(cfg, &result.summary))?;
    write(RECORDS_FILE, &records_csv(cfg, &result))?;
    if dump_trace {
        let scenario = engine::build_scenario(cfg)?;
        let p = dir.join(TRACE_FILE);
        let mut w = BufWriter::new(File::create(&p).map_err(|e| SimError::io(&p, e))?);
        mobility::write_trace_csv(&scenario.trace.to_samples(), &mut w)
            .map_err(|e| SimError::io(&p, e))?;
        w.flush().map_err(|e| SimError::io(&p, e))?;
        let json = serde_json::to_string_pretty(&result.hop_traces)
            .map_err(|e| SimError::Integrity(format!("hop trace serialization: {e}")))?;
        write(HOP_TRACES_FILE, &json)?;
    }
    Ok(result)
}

/// Re-run from the recorded config and compare metric CSVs byte-for-byte.
pub fn validate_run_dir(dir: &Path, require_events: bool) -> Result<()> {
    let cfg_path = dir.join(CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(SimError::Config(format!(
            "{}: missing {CONFIG_FILE}",
            dir.display()
        )));
    }
    if require_events && !dir.join(EVENTS_FILE).exists() {
        return Err(SimError::Config(format!(
            "{}: missing {EVENTS_FILE} (required for validate)",
            dir.display()
        )));
    }
    let cfg = ScenarioConfig::load(&cfg_path)?;
    let result = engine::run(&cfg)?;
    let expected = [
        (SUMMARY_FILE, summary_csv(&cfg, &result.summary)),
        (RECORDS_FILE, records_csv(&cfg, &result)),
    ];
    for (name, fresh) in expected {
        let p = dir.join(name);
        let recorded = fs::read_to_string(&p).map_err(|e| SimError::io(&p, e))?;
        if recorded != fresh {
            let line = first_diff_line(&recorded, &fresh);
            return Err(SimError::Validation(format!(
                "{name}: replay differs at line {line}"
            )));
        }
    }
    Ok(())
}

fn first_diff_line(a: &str, b: &str) -> usize {
    for (i, (la, lb)) in a.lines().zip(b.lines()).enumerate() {
        if la != lb {
            return i + 1;
        }
    }
    a.lines().count().min(b.lines().count()) + 1
}

/// Cartesian sweep description.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub protocols: Vec<ProtocolKind>,
    pub vehicle_counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub summaries: Vec<RunSummary>,
    pub table: SweepTable,
    pub failures: Vec<String>,
}

/// Derive the config for one sweep cell from the base config.
pub fn cfg_for_cell(
    base: &ScenarioConfig,
    protocol: ProtocolKind,
    n_vehicles: usize,
    seed: u64,
) -> Result<ScenarioConfig> {
    let mut cfg = base.clone();
    cfg.protocol.kind = protocol.name().to_string();
    cfg.run.seed = seed;
    match cfg.scenario.grid.as_mut() {
        Some(grid) => grid.n_vehicles = n_vehicles,
        None => {
            return Err(SimError::Config(
                "sweeping over vehicle counts requires a grid scenario".into(),
            ))
        }
    }
    Ok(cfg)
}

/// Run the full cartesian product with up to `jobs` runs in flight,
/// then aggregate and write figure CSVs into `out_dir`.
pub fn execute_sweep(
    base: &ScenarioConfig,
    spec: &SweepSpec,
    jobs: usize,
    out_dir: &Path,
) -> Result<SweepOutcome> {
    if spec.protocols.is_empty() || spec.vehicle_counts.is_empty() || spec.seeds.is_empty() {
        return Err(SimError::Config(
            "sweep needs at least one protocol, one vehicle count, and one seed".into(),
        ));
    }
    let mut cells = Vec::new();
    for &p in &spec.protocols {
        for &n in &spec.vehicle_counts {
            for &s in &spec.seeds {
                cells.push((p, n, s));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SimError::Config(format!("thread pool: {e}")))?;
    let results: Vec<(String, Result<RunSummary>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(p, n, s)| {
                let label = format!("{} n={n} seed={s}", p.name());
                let out = cfg_for_cell(base, p, n, s)
                    .and_then(|cfg| engine::run(&cfg))
                    .map(|r| r.summary);
                (label, out)
            })
            .collect()
    });
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for (label, res) in results {
        match res {
            Ok(s) => summaries.push(s),
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    }
    let table = crate::metrics::aggregate_sweep(&summaries);
    fs::create_dir_all(out_dir).map_err(|e| SimError::io(out_dir, e))?;
    write_sweep_summaries(out_dir, base, &summaries)?;
    write_figures(out_dir, base, spec, &table)?;
    Ok(SweepOutcome {
        summaries,
        table,
        failures,
    })
}

fn write_sweep_summaries(
    dir: &Path,
    base: &ScenarioConfig,
    summaries: &[RunSummary],
) -> Result<()> {
    let mut s = format!(
        "# config_hash={} version={}\n",
        base.hash(),
        ARTIFACT_VERSION
    );
    s.push_str(
        "protocol,n_vehicles,seed,mean_e2e_delay_s,delivery_probability,collision_ratio,\
         avg_throughput_bps,n_messages,n_pairs,n_delivered\n",
    );
    for r in summaries {
        s.push_str(&format!(
            "{},{},{},{},{},{:.9},{:.9},{},{},{}\n",
            r.protocol,
            r.n_vehicles,
            r.seed,
            fmt_opt(r.mean_e2e_delay_s),
            fmt_opt(r.delivery_probability),
            r.collision_ratio,
            r.avg_throughput_bps,
            r.n_messages,
            r.n_pairs,
            r.n_delivered,
        ));
    }
    let p = dir.join("runs.csv");
    fs::write(&p, s).map_err(|e| SimError::io(&p, e))
}

const FIGURES: [(&str, &str); 4] = [
    ("figure3_delay.csv", "mean end-to-end delay (s)"),
    ("figure4_delivery.csv", "delivery probability"),
    ("figure5_collision.csv", "collision ratio"),
    ("figure6_throughput.csv", "average throughput (bit/s)"),
];

/// One CSV per metric: x = vehicle count, mean and 95% CI columns per
/// protocol, shaped for direct plotting.
pub fn write_figures(
    dir: &Path,
    base: &ScenarioConfig,
    spec: &SweepSpec,
    table: &SweepTable,
) -> Result<()> {
    let seeds: Vec<String> = spec.seeds.iter().map(u64::to_string).collect();
    for (i, (file, label)) in FIGURES.iter().enumerate() {
        let metric: &std::collections::BTreeMap<_, CellStats> = match i {
            0 => &table.delay,
            1 => &table.delivery,
            2 => &table.collision,
            _ => &table.throughput,
        };
        let mut s = format!("# {label}\n");
        s.push_str(&format!("# config_hash={}\n", base.hash()));
        s.push_str(&format!("# seeds={}\n", seeds.join(",")));
        s.push_str(&format!("# version={ARTIFACT_VERSION}\n"));
        if i == 2 {
            s.push_str(
                "# collision ratio denominator: reception opportunities \
                 (delivered + collided + shadow-blocked)\n",
            );
        }
        s.push_str("n_vehicles");
        for p in &table.protocols {
            s.push_str(&format!(",{p}_mean,{p}_ci95,{p}_n"));
        }
        s.push('\n');
        for &n in &table.counts {
            s.push_str(&n.to_string());
            for p in &table.protocols {
                match metric.get(&(p.clone(), n)) {
                    Some(c) => s.push_str(&format!(",{:.9},{:.9},{}", c.mean, c.ci95, c.n)),
                    None => s.push_str(",,,0"),
                }
            }
            s.push('\n');
        }
        let path = dir.join(file);
        fs::write(&path, s).map_err(|e| SimError::io(&path, e))?;
    }
    Ok(())
}

/// Name a fresh timestamp-free output directory under `base` (the caller
/// typically passes a timestamped name already; this keeps collisions
/// survivable in tests and scripted use).
pub fn unique_dir(base: &Path, stem: &str) -> PathBuf {
    let mut p = base.join(stem);
    let mut i = 1;
    while p.exists() {
        p = base.join(format!("{stem}-{i}"));
        i += 1;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_grid_config;

    fn tiny_cfg() -> ScenarioConfig {
        let mut cfg = default_grid_config(8);
        cfg.run.duration_s = 20.0;
        if let Some(g) = cfg.scenario.grid.as_mut() {
            g.road_length_m = 2000.0;
        }
        cfg
    }

    #[test]
    fn run_dir_contains_artifacts_and_validates() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let cfg = tiny_cfg();
        execute_run_to_dir(&cfg, &dir, true, true).unwrap();
        for f in [CONFIG_FILE, SUMMARY_FILE, RECORDS_FILE, EVENTS_FILE, TRACE_FILE] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
        validate_run_dir(&dir, true).unwrap();
    }

    #[test]
    fn validate_detects_tampering() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let cfg = tiny_cfg();
        execute_run_to_dir(&cfg, &dir, false, false).unwrap();
        let p = dir.join(SUMMARY_FILE);
        let mut s = fs::read_to_string(&p).unwrap();
        s.push_str("tampered\n");
        fs::write(&p, s).unwrap();
        let err = validate_run_dir(&dir, false).unwrap_err();
        assert!(err.to_string().contains("replay differs"));
    }

    #[test]
    fn validate_requires_event_log_when_asked() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        execute_run_to_dir(&tiny_cfg(), &dir, false, false).unwrap();
        assert!(validate_run_dir(&dir, true).is_err());
        assert!(validate_run_dir(&dir, false).is_ok());
    }

    #[test]
    fn sweep_writes_four_figures() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SweepSpec {
            protocols: vec![ProtocolKind::HybridVehcloud, ProtocolKind::ClbpLike],
            vehicle_counts: vec![6, 10],
            seeds: vec![1, 2],
        };
        let out = execute_sweep(&tiny_cfg(), &spec, 1, tmp.path()).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert_eq!(out.summaries.len(), 8);
        for (f, _) in FIGURES {
            let content = fs::read_to_string(tmp.path().join(f)).unwrap();
            assert!(content.contains("config_hash="));
            assert!(content.contains("n_vehicles"));
        }
        let runs = fs::read_to_string(tmp.path().join("runs.csv")).unwrap();
        assert_eq!(runs.lines().filter(|l| !l.starts_with('#')).count(), 9);
    }

    #[test]
    fn empty_sweep_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SweepSpec {
            protocols: vec![],
            vehicle_counts: vec![10],
            seeds: vec![1],
        };
        assert!(execute_sweep(&tiny_cfg(), &spec, 1, tmp.path()).is_err());
    }
}
