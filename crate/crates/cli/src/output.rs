use std::io::Write;
use std::path::Path;

use serde::Serialize;
use spinpim_core::report::{self, GridMetric};
use spinpim_core::{CostReport, Grid, ReportFormat, TileConfig};

use crate::config::RunConfig;
use crate::Failure;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes through a temporary file in the target directory, so readers see
/// either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| Failure::Config(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

#[derive(Serialize)]
pub struct ReportDocument<'a, P: Serialize> {
    pub version: &'static str,
    pub config: &'a RunConfig,
    pub tile: &'a TileConfig,
    pub report: &'a CostReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<P>,
}

fn csv_preamble(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).expect("run config serializes");
    format!("# spinpim {VERSION}\n# config: {json}\n")
}

pub fn render_report<P: Serialize>(doc: &ReportDocument<'_, P>, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(doc).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => csv_preamble(doc.config) + &report::report_csv(doc.report),
    }
}

#[derive(Serialize)]
struct GridDocument<'a> {
    version: &'static str,
    config: &'a RunConfig,
    latency: &'a Grid,
    energy: &'a Grid,
}

pub fn render_grids(config: &RunConfig, latency: &Grid, energy: &Grid, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let doc = GridDocument {
                version: VERSION,
                config,
                latency,
                energy,
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("grid serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut out = csv_preamble(config);
            for grid in [latency, energy] {
                let metric = match grid.metric {
                    GridMetric::Latency => "latency_s",
                    GridMetric::Energy => "energy_j",
                };
                for (i, line) in grid.to_csv().lines().enumerate() {
                    let prefix = if i == 0 { "metric" } else { metric };
                    if i == 0 && grid.metric == GridMetric::Energy {
                        continue;
                    }
                    out.push_str(prefix);
                    out.push(',');
                    out.push_str(line);
                    out.push('\n');
                }
            }
            out
        }
    }
}

pub fn format_of(path: &Path) -> Result<ReportFormat, Failure> {
    ReportFormat::from_path(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}
