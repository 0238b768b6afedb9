mod commands;
mod config;
mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spinpim_core::{CellVariant, GateSet};

use crate::config::RunConfig;

/// Outcome classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Verify(String),
    Config(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Config(_) => 2,
            Failure::Invariant(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Verify(m) => write!(f, "verification failed: {m}"),
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Invariant(m) => write!(f, "invariant violation: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "spinpim", version, about = "Spintronic processing-in-memory BNN accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voltage windows and parasitic tolerance of each gate.
    Margins(MarginsArgs),
    /// Compile and simulate a network, writing cost reports.
    Simulate(SimulateArgs),
    /// Compare simulated outputs with the software reference.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Text,
    Csv,
}

#[derive(Args)]
pub struct MarginsArgs {
    /// Device specs, built-in names or files.
    #[arg(long = "spec", default_values_t = vec!["modern".to_string()])]
    pub specs: Vec<String>,
    /// Series resistances in ohms.
    #[arg(long = "parasitic", default_values_t = vec![0.0])]
    pub parasitics: Vec<f64>,
    /// Include COPY and NAND3 alongside the signature gates.
    #[arg(long)]
    pub all_gates: bool,
    #[arg(long, value_enum, default_value_t = TableFormat::Text)]
    pub format: TableFormat,
    /// Also write the table as CSV to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Preset name or network TOML file.
    #[arg(long, default_value = "finn-fc")]
    network: String,
    /// Device: modern, future, future-printed or a device TOML file.
    #[arg(long, default_value = "future")]
    spec: String,
    /// Square tile size in cells.
    #[arg(long, default_value_t = 1024)]
    tile: usize,
    /// Cell variant: 1t (transposed) or 3t.
    #[arg(long, default_value = "1t", value_parser = parse_variant)]
    variant: CellVariant,
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    peripheral: OnOff,
    /// Peripheral constants file used instead of the shipped ones.
    #[arg(long)]
    peripheral_file: Option<PathBuf>,
    /// Series access resistance in ohms.
    #[arg(long, default_value_t = 0.0)]
    parasitic: f64,
    /// Gate set: nand-not-copy or full.
    #[arg(long, default_value = "nand-not-copy", value_parser = parse_gate_set)]
    gate_set: GateSet,
    /// Lanes per group for every layer.
    #[arg(long)]
    g: Option<usize>,
    /// Waves the output channels are split into.
    #[arg(long, default_value_t = 1)]
    sigma: usize,
    /// Per-layer group size, as name=g.
    #[arg(long = "layer-g", value_parser = parse_assign)]
    layer_g: Vec<(String, usize)>,
    /// Per-layer waves, as name=sigma.
    #[arg(long = "layer-sigma", value_parser = parse_assign)]
    layer_sigma: Vec<(String, usize)>,
    /// Weight manifest; seeded random weights when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
    /// TOML run configuration; its values override flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pipeline stage map.
    #[arg(long)]
    pipeline: Option<PathBuf>,
    /// Power budget in watts for replica scaling.
    #[arg(long)]
    budget: Option<f64>,
    /// Items streamed through the pipeline.
    #[arg(long, default_value_t = 1)]
    inputs: usize,
    /// Execute one sample tile per layer and scale its energy.
    #[arg(long)]
    estimate: bool,
    /// Overlap communication reads and writes.
    #[arg(long)]
    overlap: bool,
    /// Report paths; the extension selects csv or json.
    #[arg(long)]
    out: Vec<PathBuf>,
    /// Budget search trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run every simulated grid column for the listed benchmarks.
    #[arg(long)]
    grid: bool,
    /// Benchmarks of the grid.
    #[arg(long = "benchmark", default_values_t = ["alexnet-xnor", "fpbnn-cifar", "fpbnn-fc", "finn-cifar", "finn-fc", "bionet"].map(String::from).to_vec())]
    benchmarks: Vec<String>,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seeded inputs to compare.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Write the mismatch repro as JSON here.
    #[arg(long)]
    repro: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<CellVariant, String> {
    s.parse()
}

fn parse_gate_set(s: &str) -> Result<GateSet, String> {
    s.parse()
}

fn parse_assign(s: &str) -> Result<(String, usize), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v = v.parse().map_err(|e| format!("`{v}`: {e}"))?;
    Ok((k.to_string(), v))
}

impl RunArgs {
    /// Flag values, without the config file applied.
    fn into_config(self) -> RunConfig {
        RunConfig {
            network: self.network,
            spec: self.spec,
            tile: self.tile,
            variant: self.variant,
            peripheral: self.peripheral == OnOff::On,
            peripheral_file: self.peripheral_file,
            parasitic: self.parasitic,
            gate_set: self.gate_set,
            g: self.g,
            sigma: self.sigma,
            layer_g: self.layer_g.into_iter().collect::<BTreeMap<_, _>>(),
            layer_sigma: self.layer_sigma.into_iter().collect::<BTreeMap<_, _>>(),
            weights: self.weights,
            seed: self.seed,
            threads: self.threads,
            ..RunConfig::default()
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Margins(a) => commands::margins(&a),
        Command::Simulate(a) => {
            let config = a.run.config.clone();
            let mut cfg = a.run.into_config();
            cfg.pipeline = a.pipeline;
            cfg.budget = a.budget;
            cfg.inputs = a.inputs;
            cfg.estimate = a.estimate;
            cfg.overlap = a.overlap;
            cfg.out = a.out;
            if let Some(path) = &config {
                cfg.overlay_file(path)?;
            }
            if a.grid {
                commands::grid(&cfg, &a.benchmarks)
            } else {
                commands::simulate(&cfg, a.trace.as_deref())
            }
        }
        Command::Verify(a) => {
            let config = a.run.config.clone();
            let mut cfg = a.run.into_config();
            if let Some(path) = &config {
                cfg.overlay_file(path)?;
            }
            commands::verify(&cfg, a.count, a.repro.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("spinpim: {f}");
            ExitCode::from(f.code())
        }
    }
}
