//! `kerr`: command-line driver for the cross-Kerr trapped-ion simulations.
//!
//! Every subcommand reads an optional TOML config, applies its own flag
//! overrides, writes its artifacts into `--out` and finishes with a
//! `manifest.json`. Exit codes: 0 success, 1 fit flagged (not converged or
//! degenerate; artifacts are still written), 2 input or runtime error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod output;

pub use config::RunConfig;
pub use output::{Format, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FLAGGED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "kerr",
    version,
    about = "Cross-Kerr coupled trapped-ion motional modes"
)]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random draw; required by scan --shots, shots and walk
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Table format
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Worker threads (default: all cores); results do not depend on it
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mode frequencies, detuning, coupling strength and ion spacing (modes.*)
    Modes,
    /// Population exchange |1_a,0_b> <-> |0_a,2_b> versus time, with a sinusoid fit (exchange.*, exchange_fit.json)
    Exchange(ExchangeArgs),
    /// Dressed energies and axial weights across the resonance (crossing.*); with --map also sideband P(up) (crossing_map.*)
    Crossing(CrossingArgs),
    /// Exact and perturbative sideband shift per radial phonon, or its detuning dependence (shift.* / shift_sweep.*)
    Shift(ShiftArgs),
    /// Synthetic blue-sideband scan of a radial state (scan.*, truth.json)
    Scan(ScanArgs),
    /// Fits scans with a state family or a free distribution (fit.json, fit_curve.*; fit_K.* per input when several)
    Fit(FitArgs),
    /// Monte Carlo single-shot phonon measurements (shots.*, shots_summary.json)
    Shots(ShotsArgs),
    /// Thermal state from displacement pulses with random phases (walk.*, walk_summary.json)
    Walk(WalkArgs),
}

#[derive(Debug, Args)]
pub struct ExchangeArgs {
    /// Two-mode detuning 2 omega_b - omega_a
    #[arg(long, default_value_t = 0.0, value_name = "HZ")]
    pub detuning_hz: f64,
    #[arg(long, default_value_t = 2.0, value_name = "MS")]
    pub duration_ms: f64,
    #[arg(long, default_value_t = 401)]
    pub points: usize,
}

#[derive(Debug, Args)]
pub struct CrossingArgs {
    #[arg(long, default_value_t = -20.0, allow_negative_numbers = true)]
    pub from_khz: f64,
    #[arg(long, default_value_t = 120.0, allow_negative_numbers = true)]
    pub to_khz: f64,
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    /// Highest manifold N = 2 n_a + n_b reported
    #[arg(long, default_value_t = 4)]
    pub manifold_max: usize,
    /// Also compute P(up) over two-mode detuning and laser detuning (crossing_map.*)
    #[arg(long)]
    pub map: bool,
    /// Laser detuning grid of the map, "LO,HI,POINTS" in kHz from the bare axial sideband
    #[arg(
        long,
        value_name = "LO,HI,POINTS",
        default_value = "-6,6,241",
        allow_hyphen_values = true
    )]
    pub laser_khz: String,
    /// Radial Fock state |0_a, n_b> the map starts from
    #[arg(long, default_value_t = 0, value_name = "N")]
    pub initial_nb: usize,
    /// Sideband order of the map drive; overrides the config
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub order: Option<u8>,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    /// Report shifts for n_b = 0..=N
    #[arg(long, default_value_t = 10, value_name = "N")]
    pub n_report: usize,
    /// Sweep the detuning instead: "LO,HI,POINTS" in kHz at the config's coupling
    #[arg(long, value_name = "LO,HI,POINTS", allow_hyphen_values = true)]
    pub sweep_khz: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScanMode {
    /// Multi-peak lineshape model at the predicted peak positions
    Model,
    /// Full qubit + two-mode dynamics for one pi pulse per grid point
    Driven,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Radial state, e.g. "thermal:1.5", "coherent:1.4+0i", "fock10_imperfect"
    #[arg(long)]
    pub state: Option<String>,
    #[arg(long, value_enum, default_value_t = ScanMode::Model)]
    pub mode: ScanMode,
    /// Shots per point; noiseless when omitted
    #[arg(long)]
    pub shots: Option<u32>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub g: Option<f64>,
    /// Detuning grid "LO,HI,POINTS" in kHz relative to the n_b = 0 peak
    #[arg(long, value_name = "LO,HI,POINTS", allow_hyphen_values = true)]
    pub grid_khz: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Scan written by `kerr scan` (.csv or .json); repeat for several datasets
    #[arg(long, value_name = "PATH", required = true)]
    pub input: Vec<PathBuf>,
    /// "free" or one of coherent, thermal, squeezed_vacuum, squeezed_thermal,
    /// squeezed_fock; once for all inputs or once per input
    #[arg(long, default_value = "free")]
    pub family: Vec<String>,
    /// Hold the detection efficiency fixed
    #[arg(long, conflicts_with = "shared_eta")]
    pub eta: Option<f64>,
    /// Fit one detection efficiency common to all inputs (default: one per input)
    #[arg(long)]
    pub shared_eta: bool,
}

#[derive(Debug, Args)]
pub struct ShotsArgs {
    #[arg(long)]
    pub state: Option<String>,
    /// Peaks interrogated in order, e.g. "3" or "0,1,2"
    #[arg(long, default_value = "0")]
    pub schedule: String,
    #[arg(long, default_value_t = 10_000)]
    pub trajectories: usize,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub g: Option<f64>,
}

#[derive(Debug, Args)]
pub struct WalkArgs {
    #[arg(long, default_value_t = 18)]
    pub pulses: usize,
    /// Target mean phonon number; sets the step to sqrt(nbar / pulses)
    #[arg(long, default_value_t = 1.5, conflicts_with = "step_alpha")]
    pub nbar: f64,
    #[arg(long)]
    pub step_alpha: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub trajectories: usize,
    #[arg(long, default_value_t = 40)]
    pub n_max: usize,
}

/// How a successful command ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Flagged,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let result = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(|| commands::execute(&cli))),
        None => commands::execute(&cli),
    };
    match result {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::Flagged) => EXIT_FLAGGED,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INPUT
        }
    }
}
