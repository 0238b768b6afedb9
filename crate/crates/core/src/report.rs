//! CSV and JSON renderings of cost reports, the benchmark by configuration
//! grid, and the published baseline figures shown next to it.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{CellVariant, PeripheralModel, TileConfig};
use crate::device::MtjSpec;
use crate::num::Scalar;
use crate::pipeline::BudgetSearch;
use crate::sim::CostReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown report format `{0}` (expected csv or json)")]
    UnknownFormat(String),
    #[error("references: {0}")]
    References(String),
    #[error("unknown grid column `{0}`")]
    UnknownColumn(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = ReportError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension.
    pub fn from_path(path: &std::path::Path) -> Result<Self, ReportError> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        ext.parse()
    }
}

pub const CSV_HEADER: &str = "record,name,layer,kind,latency_s,energy_j,peripheral_energy_j,memory_bytes,throughput_per_s,power_w";

/// Renders a report. CSV has one row per phase followed by a `total` row;
/// a report without phases renders as the header alone.
pub fn emit_report<T: Scalar>(report: &CostReport<T>, format: &str) -> Result<Vec<u8>, ReportError> {
    Ok(match format.parse::<ReportFormat>()? {
        ReportFormat::Json => report_json(report).into_bytes(),
        ReportFormat::Csv => report_csv(report).into_bytes(),
    })
}

pub fn report_json<T: Scalar>(report: &CostReport<T>) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn report_csv<T: Scalar>(report: &CostReport<T>) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    if report.phases.is_empty() {
        return out;
    }
    for p in &report.phases {
        let layer = p.layer.map(|l| l.to_string()).unwrap_or_default();
        let kind = serde_json::to_value(p.kind).expect("kind serializes");
        writeln!(
            out,
            "phase,{},{},{},{:e},{:e},{:e},,,",
            csv_field(&p.name),
            layer,
            kind.as_str().unwrap_or_default(),
            p.latency,
            p.energy,
            p.peripheral_energy
        )
        .expect("string write");
    }
    writeln!(
        out,
        "total,,,,{:e},{:e},{:e},{},{:e},{:e}",
        report.latency,
        report.energy,
        report.peripheral_energy(),
        report.memory_bytes,
        report.throughput,
        report.power
    )
    .expect("string write");
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Budget search trace as plot-ready CSV: throughput and power against
/// memory after each accepted addition.
pub fn budget_trace_csv<T: Scalar>(search: &BudgetSearch<T>) -> String {
    let mut out = String::from("step,stage,memory_bytes,throughput_per_s,power_w\n");
    for (i, s) in search.steps.iter().enumerate() {
        let stage = s
            .stage
            .map(|k| search.config.stages[k].name.clone())
            .unwrap_or_else(|| "base".into());
        writeln!(out, "{i},{},{},{:e},{:e}", csv_field(&stage), s.memory_bytes, s.throughput, s.power).expect("string write");
    }
    out
}

/// Columns of the latency and energy grids.
pub const GRID_COLUMNS: [&str; 6] = ["FPGA-ref", "F-I-1024", "F-P-1024", "F-I-2048", "F-P-2048", "M-I-1024"];

/// Simulated grid columns: device, peripheral on, tile size.
pub fn grid_column(label: &str) -> Result<(&'static str, bool, usize), ReportError> {
    let mut parts = label.split('-');
    let (Some(dev), Some(per), Some(size), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(ReportError::UnknownColumn(label.to_string()));
    };
    let dev = match dev {
        "F" => "future",
        "M" => "modern",
        _ => return Err(ReportError::UnknownColumn(label.to_string())),
    };
    let per = match per {
        "I" => false,
        "P" => true,
        _ => return Err(ReportError::UnknownColumn(label.to_string())),
    };
    let size = size.parse().map_err(|_| ReportError::UnknownColumn(label.to_string()))?;
    Ok((dev, per, size))
}

/// Tile configuration of a simulated grid column, on transposed 1T tiles.
pub fn grid_tile_config<T: Scalar>(label: &str) -> Result<TileConfig<T>, ReportError> {
    let (dev, per, size) = grid_column(label)?;
    let mtj = MtjSpec::builtin(dev).map_err(|e| ReportError::UnknownColumn(format!("{label}: {e}")))?;
    let cfg = TileConfig::square(size, CellVariant::OneTTransposed, mtj);
    Ok(if per {
        cfg.with_peripheral(PeripheralModel::builtin(dev).map_err(|e| ReportError::UnknownColumn(format!("{label}: {e}")))?)
    } else {
        cfg
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMetric {
    Latency,
    Energy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub benchmark: String,
    /// One value per entry of [`GRID_COLUMNS`].
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub metric: GridMetric,
    pub columns: Vec<String>,
    pub rows: Vec<GridRow>,
}

impl Grid {
    pub fn new(metric: GridMetric) -> Self {
        Grid {
            metric,
            columns: GRID_COLUMNS.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn get(&self, benchmark: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.benchmark == benchmark)?.values[c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("benchmark,{}\n", self.columns.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.values.iter().map(|v| v.map(|x| format!("{x:.3e}")).unwrap_or_default()).collect();
            writeln!(out, "{},{}", csv_field(&r.benchmark), cells.join(",")).expect("string write");
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("grid serializes");
        s.push('\n');
        s
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let unit = match self.metric {
            GridMetric::Latency => "latency (s)",
            GridMetric::Energy => "energy (J)",
        };
        write!(f, "{:<14}", unit)?;
        for c in &self.columns {
            write!(f, " {:>10}", c)?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{:<14}", r.benchmark)?;
            for v in &r.values {
                match v {
                    Some(x) => write!(f, " {:>10.3e}", x)?,
                    None => write!(f, " {:>10}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuReference {
    pub name: String,
    pub latency: f64,
    pub energy: f64,
    pub power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpgaReference {
    pub benchmark: String,
    pub platform: String,
    pub latency: f64,
    pub energy: f64,
}

/// Published baseline numbers, stored as configuration and never derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct References {
    pub gpu: GpuReference,
    pub fpga: Vec<FpgaReference>,
}

const REFERENCES: &str = include_str!("../configs/references.toml");

impl References {
    pub fn builtin() -> Self {
        Self::from_toml_str(REFERENCES).expect("shipped references parse")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ReportError> {
        toml::from_str(text).map_err(|e| ReportError::References(e.to_string()))
    }

    pub fn fpga(&self, benchmark: &str) -> Option<&FpgaReference> {
        self.fpga.iter().find(|r| r.benchmark == benchmark)
    }
}
