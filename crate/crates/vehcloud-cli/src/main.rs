//! Command-line frontend: single runs, protocol sweeps, scenario
//! generation, and replay validation.
//!
//! Exit codes: 0 success, 1 run/validation failure, 2 usage or config
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vehcloud::config::ScenarioConfig;
use vehcloud::engine;
use vehcloud::error::SimError;
use vehcloud::mobility;
use vehcloud::output::{self, SweepSpec};
use vehcloud::protocols::ProtocolKind;

#[derive(Parser)]
#[command(name = "vehcloud", version, about = "Urban VANET message dissemination simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Scenario config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key by dotted path, e.g. --set scenario.grid.n_vehicles=450
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ScenarioConfig, SimError> {
        if !self.config.is_file() {
            return Err(SimError::Config(format!(
                "config file not found: {}",
                self.config.display()
            )));
        }
        let overrides = self
            .set
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| {
                        SimError::Config(format!("--set expects KEY=VALUE, got {kv:?}"))
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut cfg = ScenarioConfig::load_with_overrides(&self.config, &overrides)?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute one simulation run.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for run artifacts (config copy, metric CSVs).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump the mobility trace and per-message hop traces (needs --out).
        #[arg(long)]
        trace: bool,
        /// Write the full ordered event log (needs --out).
        #[arg(long)]
        debug_events: bool,
    },
    /// Run the protocol x vehicle-count x seed cartesian product and
    /// write aggregated figure CSVs.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated protocol names (default: all four).
        #[arg(long, value_delimiter = ',')]
        protocols: Vec<String>,
        /// Vehicle counts: N, A-B (step 1) or A-B:STEP, comma-separated.
        #[arg(long, default_value = "50-450:50")]
        counts: String,
        /// Seeds: same list syntax as --counts.
        #[arg(long, default_value = "0-4")]
        seeds: String,
        /// Max concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a Manhattan-grid scenario and write its trace CSV plus
    /// obstacle and RSU sidecar files.
    GenScenario {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a recorded run directory and compare metric CSVs
    /// byte-for-byte.
    Validate {
        /// Run directory produced by `run --out` with --debug-events.
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SimError::Config(_) | SimError::InvalidInput(_) | SimError::Parse { .. } => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, SimError> {
    match cli.command {
        Command::Run {
            cfg,
            out,
            trace,
            debug_events,
        } => cmd_run(&cfg.load()?, out, trace, debug_events),
        Command::Sweep {
            cfg,
            protocols,
            counts,
            seeds,
            jobs,
            out,
        } => cmd_sweep(&cfg.load()?, &protocols, &counts, &seeds, jobs, &out),
        Command::GenScenario { cfg, out } => cmd_gen_scenario(&cfg.load()?, &out),
        Command::Validate { dir } => match output::validate_run_dir(&dir, true) {
            Ok(()) => {
                println!("validate: pass ({})", dir.display());
                Ok(ExitCode::SUCCESS)
            }
            Err(SimError::Validation(msg)) => {
                eprintln!("validate: FAIL — {msg}");
                Ok(ExitCode::from(1))
            }
            Err(e) => Err(e),
        },
    }
}

fn cmd_run(
    cfg: &ScenarioConfig,
    out: Option<PathBuf>,
    trace: bool,
    debug_events: bool,
) -> Result<ExitCode, SimError> {
    if (trace || debug_events) && out.is_none() {
        return Err(SimError::Config(
            "--trace and --debug-events require --out".into(),
        ));
    }
    let result = match &out {
        Some(dir) => output::execute_run_to_dir(cfg, dir, debug_events, trace)?,
        None => engine::run(cfg)?,
    };
    let s = &result.summary;
    println!(
        "protocol={} n_vehicles={} seed={}",
        s.protocol, s.n_vehicles, s.seed
    );
    println!(
        "mean_e2e_delay_s={}",
        s.mean_e2e_delay_s
            .map(|d| format!("{d:.6}"))
            .unwrap_or_else(|| "n/a".into())
    );
    println!(
        "delivery_probability={}",
        s.delivery_probability
            .map(|d| format!("{d:.6}"))
            .unwrap_or_else(|| "n/a".into())
    );
    println!("collision_ratio={:.6}", s.collision_ratio);
    println!("avg_throughput_bps={:.3}", s.avg_throughput_bps);
    println!(
        "messages={} pairs={} delivered={}",
        s.n_messages, s.n_pairs, s.n_delivered
    );
    if let Some(dir) = out {
        println!("artifacts written to {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(
    cfg: &ScenarioConfig,
    protocols: &[String],
    counts: &str,
    seeds: &str,
    jobs: usize,
    out: &PathBuf,
) -> Result<ExitCode, SimError> {
    let protocols = if protocols.is_empty() {
        ProtocolKind::ALL.to_vec()
    } else {
        protocols
            .iter()
            .map(|p| ProtocolKind::parse(p))
            .collect::<Result<Vec<_>, _>>()?
    };
    let spec = SweepSpec {
        protocols,
        vehicle_counts: parse_list(counts)?.into_iter().map(|v| v as usize).collect(),
        seeds: parse_list(seeds)?,
    };
    let n_runs = spec.protocols.len() * spec.vehicle_counts.len() * spec.seeds.len();
    eprintln!("sweep: {n_runs} runs, {jobs} job(s)");
    let outcome = output::execute_sweep(cfg, &spec, jobs, out)?;
    for f in &outcome.failures {
        eprintln!("run failed: {f}");
    }
    println!(
        "sweep: {} runs ok, {} failed; figures in {}",
        outcome.summaries.len(),
        outcome.failures.len(),
        out.display()
    );
    if outcome.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_gen_scenario(cfg: &ScenarioConfig, out: &PathBuf) -> Result<ExitCode, SimError> {
    let scenario = engine::build_scenario(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| SimError::io(out, e))?;
    let trace_path = out.join("trace.csv");
    let file = std::fs::File::create(&trace_path).map_err(|e| SimError::io(&trace_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    mobility::write_trace_csv(&scenario.trace.to_samples(), &mut w)
        .map_err(|e| SimError::io(&trace_path, e))?;
    use std::io::Write;
    w.flush().map_err(|e| SimError::io(&trace_path, e))?;
    let mut obs = String::from("xmin_m,ymin_m,xmax_m,ymax_m\n");
    for o in &scenario.obstacles {
        obs.push_str(&format!(
            "{:.3},{:.3},{:.3},{:.3}\n",
            o.min_corner.x, o.min_corner.y, o.max_corner.x, o.max_corner.y
        ));
    }
    let obs_path = out.join("obstacles.csv");
    std::fs::write(&obs_path, obs).map_err(|e| SimError::io(&obs_path, e))?;
    println!(
        "gen-scenario: {} nodes, {} obstacles -> {}",
        scenario.trace.nodes.len(),
        scenario.obstacles.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Parse "3", "1-5", "0-450:50", comma-separated combinations thereof.
fn parse_list(s: &str) -> Result<Vec<u64>, SimError> {
    let mut out = Vec::new();
    for item in s.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let (range, step) = match item.split_once(':') {
            Some((r, st)) => (
                r,
                st.parse::<u64>()
                    .map_err(|_| SimError::Config(format!("bad step in {item:?}")))?,
            ),
            None => (item, 1),
        };
        if step == 0 {
            return Err(SimError::Config(format!("zero step in {item:?}")));
        }
        match range.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad range start in {item:?}")))?;
                let b: u64 = b
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad range end in {item:?}")))?;
                if b < a {
                    return Err(SimError::Config(format!("descending range {item:?}")));
                }
                out.extend((a..=b).step_by(step as usize));
            }
            None => out.push(
                range
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad number {item:?}")))?,
            ),
        }
    }
    if out.is_empty() {
        return Err(SimError::Config(format!("empty list {s:?}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::parse_list;

    #[test]
    fn list_syntax() {
        assert_eq!(parse_list("3").unwrap(), vec![3]);
        assert_eq!(parse_list("1-4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(
            parse_list("50-200:50").unwrap(),
            vec![50, 100, 150, 200]
        );
        assert_eq!(parse_list("1,5-6").unwrap(), vec![1, 5, 6]);
        assert!(parse_list("").is_err());
        assert!(parse_list("5-1").is_err());
        assert!(parse_list("1-10:0").is_err());
    }
}
