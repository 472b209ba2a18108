//! Batch front-end: runs scenarios and the tube and identification tools,
//! writing their results under `--out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flexwalk::config::{ScenarioConfig, ScenarioKind};
use flexwalk::sim::identify::Identification;
use flexwalk::sim::profile::error_duration_profile;
use flexwalk::sim::scenario::{controller_gain, run_identification, run_scenario, stabilizer_system, tune_gain};
use flexwalk::sim::trace::read_column;
use flexwalk::tube::{DisturbanceBound, TubeGain, DEFAULT_TAIL_TOL};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "flexwalk", version, about = "Flexible-biped walking control workbench")]
struct Cli {
    /// Scenario configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides `scenario.seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides `scenario.estimator`.
    #[arg(long, global = true)]
    estimator: Option<Switch>,
    /// Overrides `scenario.mpc`.
    #[arg(long, global = true)]
    mpc: Option<Switch>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scenario {
    WalkInPlace,
    QuasiStatic,
    DynamicWalk,
}

impl From<Scenario> for ScenarioKind {
    fn from(s: Scenario) -> Self {
        match s {
            Scenario::WalkInPlace => ScenarioKind::WalkInPlace,
            Scenario::QuasiStatic => ScenarioKind::QuasiStatic,
            Scenario::DynamicWalk => ScenarioKind::DynamicWalk,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a walking scenario: trace.csv and summary.json.
    Walk {
        /// Overrides `scenario.kind`.
        #[arg(long)]
        scenario: Option<Scenario>,
    },
    /// Identify the hip stiffnesses from static stances: stiffness.json and
    /// error_surface.csv.
    IdentifyStiffness,
    /// Search the feedback row minimizing the VRP error bound: tube_gain.json.
    TuneGain,
    /// Invariant-set bounds of a feedback row: mrpi.json.
    Mrpi {
        /// Feedback row `k1,k2,k3`; the configured gain when absent.
        #[arg(long, value_parser = parse_gain, allow_hyphen_values = true)]
        gain: Option<[f64; 3]>,
        /// Disturbance level (m/s^3); `stabilizer.d_max` when absent.
        #[arg(long)]
        d_max: Option<f64>,
    },
    /// Error-duration curve of the CoP tracking error: profile.csv.
    Profile {
        /// Trace written by `walk`; otherwise the scenario is run first.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
}

fn parse_gain(s: &str) -> std::result::Result<[f64; 3], String> {
    let k: Vec<f64> = s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    k.try_into().map_err(|k: Vec<f64>| format!("expected 3 comma-separated values, got {}", k.len()))
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] flexwalk::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
        }
    }

    fn exit_code(&self) -> u8 {
        if self.kind() == "config" { 2 } else { 1 }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(s) = cli.estimator {
        cfg.scenario.estimator = s.on();
    }
    if let Some(s) = cli.mpc {
        cfg.scenario.mpc = s.on();
    }
    if let Command::Walk { scenario: Some(kind) } = &cli.command {
        cfg.scenario.kind = (*kind).into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("results serialize");
    text.push('\n');
    write(path, text.as_bytes())
}

fn error_surface_csv(id: &Identification) -> String {
    let mut out = String::from("experiment,k_left,k_right,error\n-,N*m/rad,N*m/rad,m\n");
    for (e, name) in ["left-stance", "right-stance"].iter().enumerate() {
        for (i, kl) in id.grid[0].iter().enumerate() {
            for (j, kr) in id.grid[1].iter().enumerate() {
                out.push_str(&format!("{name},{kl},{kr},{}\n", id.errors[e][i][j]));
            }
        }
    }
    out
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let out = |name: &str| cli.out.join(name);
    let mut written = Vec::new();
    match &cli.command {
        Command::Walk { .. } => {
            let run = run_scenario(&cfg)?;
            let mut csv = Vec::new();
            run.trace.write_csv(&mut csv)?;
            write(&out("trace.csv"), &csv)?;
            write_json(&out("summary.json"), &run.summary)?;
            written.extend([out("trace.csv"), out("summary.json")]);
        }
        Command::IdentifyStiffness => {
            let id = run_identification(&cfg)?;
            write_json(&out("stiffness.json"), &id)?;
            write(&out("error_surface.csv"), error_surface_csv(&id).as_bytes())?;
            written.extend([out("stiffness.json"), out("error_surface.csv")]);
        }
        Command::TuneGain => {
            let search = tune_gain(&cfg)?;
            let value = json!({
                "gain": search.gain,
                "evaluations": search.evaluations,
                "converged": search.converged,
            });
            write_json(&out("tube_gain.json"), &value)?;
            written.push(out("tube_gain.json"));
        }
        Command::Mrpi { gain, d_max } => {
            let d = DisturbanceBound::new(d_max.unwrap_or(cfg.stabilizer.d_max))?;
            let tube = match gain {
                Some(k) => TubeGain::certify(*k, &stabilizer_system(&cfg)?, d, DEFAULT_TAIL_TOL)?,
                None => controller_gain(&cfg)?.rescaled(d),
            };
            write_json(&out("mrpi.json"), &tube)?;
            written.push(out("mrpi.json"));
        }
        Command::Profile { trace } => {
            let errors = match trace {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(io_err(path))?;
                    let ex = read_column(&text, "cop_err_x")?;
                    let ey = read_column(&text, "cop_err_y")?;
                    ex.iter().zip(&ey).map(|(x, y)| x.hypot(*y)).collect()
                }
                None => run_scenario(&cfg)?.trace.cop_errors(),
            };
            let mut csv = String::from("fraction,bound\n-,m\n");
            for p in error_duration_profile(&errors) {
                csv.push_str(&format!("{},{}\n", p.fraction, p.bound));
            }
            write(&out("profile.csv"), csv.as_bytes())?;
            written.push(out("profile.csv"));
        }
    }
    Ok(written)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let diag = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{diag}");
            ExitCode::from(e.exit_code())
        }
    }
}
