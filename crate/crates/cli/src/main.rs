mod exit;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use evflex::harness::{
    benchmark_timing, growth_is_at_most_linear, report, run_simulation, run_sweep, write_run_bundle,
    write_sweep_cells_csv, write_sweep_summary_csv, write_timing_table, Method, RunConfig, SweepParam,
    SweepSpec,
};
use evflex::scenario::{write_fleet_csv, Scenario};
use evflex::Error;

use exit::{CliError, CliResult};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "EVFLEX_OUT";
const DEFAULT_OUT: &str = "evflex-out";
/// Allowed factor over linear growth in the timing check.
const TIMING_NOISE: f64 = 2.0;

#[derive(Debug, Parser)]
#[command(name = "evflex", version, about = "Carbon-aware real-time EV flexibility simulations")]
struct Cli {
    /// More progress output on stderr; repeat for more.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Print nothing but errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a fleet and write fleet, carbon and task-arrival CSVs.
    GenScenario {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one method and write its trajectory bundle.
    Run {
        #[command(flatten)]
        common: Common,
        /// proposed, b1, b2, b3, opi or mpc.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Advance the queues by the interval instead of the dispatch.
        #[arg(long)]
        no_feedback: bool,
        /// Also write per-slot solve times, which differ between runs.
        #[arg(long)]
        timing: bool,
    },
    /// Run a parameter over several values and replications.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// gamma, beta, V, r or fleet_size.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Time per-slot decisions of the proposed method across fleet sizes.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Also time one offline solve per size.
        #[arg(long)]
        opi: bool,
    },
    /// Turn run bundles into plot-ready series and a summary table.
    Report {
        /// A run bundle, or a directory holding several.
        dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; defaults to $EVFLEX_OUT, then ./evflex-out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides as KEY=VALUE.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

struct Ui {
    verbose: u8,
    quiet: bool,
}

impl Ui {
    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let ui = Ui {
        verbose: cli.verbose,
        quiet: cli.quiet,
    };
    match dispatch(cli.command, &ui) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(command: Command, ui: &Ui) -> CliResult<()> {
    match command {
        Command::GenScenario { common, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            gen_scenario(&cfg, &out_root(&common), ui)
        }
        Command::Run {
            common,
            method,
            seed,
            no_feedback,
            timing,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = method {
                cfg.method = m.parse::<Method>()?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if no_feedback {
                cfg.feedback_enabled = false;
            }
            run(&cfg, &out_root(&common), timing, ui)
        }
        Command::Sweep {
            common,
            param,
            values,
            reps,
        } => {
            let cfg = load_config(&common)?;
            let spec = SweepSpec {
                param: param.parse::<SweepParam>()?,
                values,
                replications: reps,
                base: cfg,
            };
            sweep(&spec, &out_root(&common), ui)
        }
        Command::Timing { common, sizes, opi } => {
            let cfg = load_config(&common)?;
            timing(&cfg, &sizes, opi, &out_root(&common), ui)
        }
        Command::Report { dir } => {
            let files = report(&dir).map_err(CliError::from)?;
            ui.info(fs::read_to_string(files.dir.join("summary.txt")).map_err(Error::from)?);
            ui.info(format!("report written to {}", files.dir.display()));
            Ok(())
        }
    }
}

fn out_root(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Parses and validates the config, then applies the overrides in order.
fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::new(Error::Io(e)).context(path.display().to_string()))?;
            let mut cfg: RunConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::new(Error::Json(e)).context(path.display().to_string()))?;
            if let Some(dir) = path.parent() {
                cfg.resolve_paths(dir);
            }
            cfg.validate()
                .map_err(|e| CliError::new(e).in_config(path, &text))?;
            cfg
        }
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)
            .map_err(|e| CliError::new(e).context(format!("override `{o}`")))?;
    }
    Ok(cfg)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(Error::from)?))
}

fn gen_scenario(cfg: &RunConfig, out: &Path, ui: &Ui) -> CliResult<()> {
    let scenario = cfg.build_scenario()?;
    let dir = out.join(format!("scenario-seed{}", cfg.seed));
    fs::create_dir_all(&dir).map_err(Error::from)?;
    fs::write(dir.join("config.json"), cfg.to_json_pretty()? + "\n").map_err(Error::from)?;
    write_fleet_csv(&scenario.sessions, create(&dir.join("fleet.csv"))?)?;
    write_carbon_csv(&scenario, create(&dir.join("carbon.csv"))?)?;
    write_arrivals_csv(&scenario, create(&dir.join("arrivals.csv"))?)?;
    ui.info(format!(
        "{} EVs in {} groups written to {}",
        scenario.sessions.len(),
        scenario.num_groups(),
        dir.display()
    ));
    Ok(())
}

/// One row per slot, readable back as a carbon source.
fn write_carbon_csv<W: Write>(scenario: &Scenario, w: W) -> CliResult<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["hour", "intensity_kg_per_kwh"]).map_err(Error::from)?;
    let dt = scenario.clock.slot_duration_h;
    for (t, w) in scenario.carbon.intensity.iter().enumerate() {
        wtr.write_record([(t as f64 * dt).to_string(), w.to_string()])
            .map_err(Error::from)?;
    }
    wtr.flush().map_err(Error::from)?;
    Ok(())
}

/// Non-zero task arrivals as `slot,ev_id,group,task_kw`.
fn write_arrivals_csv<W: Write>(scenario: &Scenario, w: W) -> CliResult<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["slot", "ev_id", "group", "task_kw"]).map_err(Error::from)?;
    for t in 0..scenario.clock.horizon_slots {
        for (i, a) in scenario.arrivals.per_ev.iter().enumerate() {
            if a[t] > 0.0 {
                wtr.write_record([
                    t.to_string(),
                    i.to_string(),
                    scenario.sessions[i].group_index.to_string(),
                    a[t].to_string(),
                ])
                .map_err(Error::from)?;
            }
        }
    }
    wtr.flush().map_err(Error::from)?;
    Ok(())
}

fn run(cfg: &RunConfig, out: &Path, with_timing: bool, ui: &Ui) -> CliResult<()> {
    ui.progress(format!("running {} with seed {}", cfg.method, cfg.seed));
    let output = run_simulation(cfg)?;
    let dir = write_run_bundle(&output, out, with_timing)?;
    output.check_invariants()?;
    let m = &output.metrics;
    ui.info(format!(
        "{}: total flexibility {:.2} kWh, emission rate {:.3} kg/h, unfulfilled {:.3} kWh, fulfillment {:.4}{}",
        m.method,
        m.total_flexibility_kwh,
        m.time_avg_emission_rate_kg_per_h,
        m.unfulfilled_energy_kwh,
        m.fulfillment_ratio,
        m.performance_ratio
            .map_or(String::new(), |r| format!(", performance ratio {r:.4}")),
    ));
    ui.info(format!("bundle written to {}", dir.display()));
    Ok(())
}

fn sweep(spec: &SweepSpec, out: &Path, ui: &Ui) -> CliResult<()> {
    spec.validate()?;
    ui.progress(format!(
        "sweeping {} over {:?} with {} replications",
        spec.param, spec.values, spec.replications
    ));
    let result = run_sweep(spec)?;
    let dir = out.join(format!("sweep-{}", spec.param));
    fs::create_dir_all(&dir).map_err(Error::from)?;
    fs::write(dir.join("config.json"), spec.base.to_json_pretty()? + "\n").map_err(Error::from)?;
    write_sweep_cells_csv(&result, create(&dir.join("cells.csv"))?)?;
    write_sweep_summary_csv(&result, create(&dir.join("summary.csv"))?)?;
    for p in &result.points {
        ui.info(format!(
            "{}={}: flexibility {:.2} kWh, emission rate {:.3} kg/h, unfulfilled {:.3} kWh ({} runs, {} failed)",
            spec.param,
            p.value,
            p.total_flexibility_kwh,
            p.emission_rate_kg_per_h,
            p.unfulfilled_energy_kwh,
            p.runs,
            p.failures
        ));
    }
    for c in &result.cells {
        if let Err(e) = &c.outcome {
            eprintln!("warning: {}={} replication {}: {e}", spec.param, c.value, c.replication);
        }
    }
    ui.info(format!("sweep written to {}", dir.display()));
    Ok(())
}

fn timing(cfg: &RunConfig, sizes: &[usize], opi: bool, out: &Path, ui: &Ui) -> CliResult<()> {
    let rows = benchmark_timing(cfg, sizes, opi)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let path = out.join("timing.csv");
    write_timing_table(&rows, create(&path)?)?;
    for r in &rows {
        ui.info(format!(
            "{:>6} EVs: mean {:.3} ms, p95 {:.3} ms, max {:.3} ms{}",
            r.fleet_size,
            r.decision.mean_s * 1e3,
            r.decision.p95_s * 1e3,
            r.decision.max_s * 1e3,
            r.opi_seconds.map_or(String::new(), |s| format!(", offline {s:.2} s")),
        ));
    }
    ui.info(format!("timing table written to {}", path.display()));
    if !growth_is_at_most_linear(&rows, TIMING_NOISE) {
        return Err(Error::Invariant(format!(
            "decision time grows faster than linearly in fleet size (allowed factor {TIMING_NOISE})"
        ))
        .into());
    }
    Ok(())
}
