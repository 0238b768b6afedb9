use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use spinpim_core::gate::{operates_at, parasitic_failure_threshold, voltage_window};
use spinpim_core::pipeline::{per_item_report, pipeline_report, scale_to_power_budget, stage_costs, sum_reports};
use spinpim_core::reference::{forward_layers, seeded_inputs};
use spinpim_core::report::{self, grid_tile_config, GridMetric, GridRow, GRID_COLUMNS};
use spinpim_core::{
    BudgetSearch, CostReport, GateKind, Grid, NetworkSpec, PhaseKind, PipelineConfig, PipelineError, References, SimError, SimOptions, Simulator,
    StageCost, Weights,
};

use crate::config::{load_device, load_network, weights_failure, RunConfig};
use crate::output::{format_of, render_grids, render_report, write_atomic, ReportDocument};
use crate::{Failure, MarginsArgs, TableFormat};

const REL_TOL: f64 = 1e-9;

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Weights(w) => weights_failure(w),
        SimError::Array(a) => Failure::Invariant(a.to_string()),
        other => Failure::Config(other.to_string()),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Sim(s) => sim_failure(s),
        other => Failure::Config(other.to_string()),
    }
}

#[derive(Serialize)]
struct MarginRow {
    spec: String,
    parasitic_ohm: f64,
    gate: GateKind,
    signature_mv: Option<f64>,
    margin_mv: Option<f64>,
    v_low_mv: f64,
    v_high_mv: f64,
    failure_ohm: Option<f64>,
    operates: bool,
}

pub fn margins(args: &MarginsArgs) -> Result<(), Failure> {
    let gates: &[GateKind] = if args.all_gates { &GateKind::ALL } else { &GateKind::SIGNATURE_TABLE };
    let mut rows = Vec::new();
    for name in &args.specs {
        let spec = load_device(name)?;
        for &p in &args.parasitics {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Failure::Config(format!("parasitic resistance must be a non-negative number, got {p}")));
            }
            for &kind in gates {
                let window = voltage_window(kind, &spec, p);
                let operates = operates_at(kind, &spec, p);
                if operates && !window.is_feasible() {
                    return Err(Failure::Invariant(format!("{kind} on `{name}` operates at {p} ohm but has no window")));
                }
                let (v_low, v_high) = match window {
                    spinpim_core::gate::GateWindow::Feasible(w) => (w.v_low, w.v_high),
                    spinpim_core::gate::GateWindow::Infeasible { v_low, v_high } => (v_low, v_high),
                };
                rows.push(MarginRow {
                    spec: name.clone(),
                    parasitic_ohm: p,
                    gate: kind,
                    signature_mv: window.window().map(|w| w.signature * 1e3),
                    margin_mv: window.window().map(|w| w.margin * 1e3),
                    v_low_mv: v_low * 1e3,
                    v_high_mv: v_high * 1e3,
                    failure_ohm: parasitic_failure_threshold(kind, &spec),
                    operates,
                });
            }
        }
    }
    let csv = margins_csv(&rows);
    match args.format {
        TableFormat::Csv => print!("{csv}"),
        TableFormat::Text => print!("{}", margins_text(&rows)),
    }
    if let Some(path) = &args.out {
        write_atomic(path, csv.as_bytes())?;
    }
    Ok(())
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_default()
}

fn margins_csv(rows: &[MarginRow]) -> String {
    let mut out = String::from("spec,parasitic_ohm,gate,signature_mv,margin_mv,v_low_mv,v_high_mv,failure_ohm,operates\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.4},{:.4},{},{}",
            r.spec,
            r.parasitic_ohm,
            r.gate,
            opt(r.signature_mv, 4),
            opt(r.margin_mv, 4),
            r.v_low_mv,
            r.v_high_mv,
            opt(r.failure_ohm, 1),
            r.operates
        )
        .expect("string write");
    }
    out
}

fn margins_text(rows: &[MarginRow]) -> String {
    let mut out = String::new();
    let mut last: Option<(&str, f64)> = None;
    for r in rows {
        if last != Some((r.spec.as_str(), r.parasitic_ohm)) {
            if last.is_some() {
                out.push('\n');
            }
            writeln!(out, "{} spec, {} ohm parasitic", r.spec, r.parasitic_ohm).expect("string write");
            writeln!(
                out,
                "{:<6} {:>10} {:>10} {:>10} {:>10} {:>12}  status",
                "gate", "sig (mV)", "margin", "v_low", "v_high", "fails (ohm)"
            )
            .expect("string write");
            last = Some((r.spec.as_str(), r.parasitic_ohm));
        }
        let status = if r.operates {
            "ok"
        } else if r.signature_mv.is_none() {
            "no window"
        } else {
            "infeasible"
        };
        writeln!(
            out,
            "{:<6} {:>10} {:>10} {:>10.2} {:>10.2} {:>12}  {status}",
            r.gate.name(),
            opt(r.signature_mv, 2),
            opt(r.margin_mv, 2),
            r.v_low_mv,
            r.v_high_mv,
            opt(r.failure_ohm, 0),
        )
        .expect("string write");
    }
    out
}

fn build_simulator(cfg: &RunConfig, net: &NetworkSpec) -> Result<Simulator, Failure> {
    if cfg.threads == Some(0) {
        return Err(Failure::Config("threads must be at least 1".into()));
    }
    let weights = cfg.load_weights(net)?;
    let tile = cfg.tile_config()?;
    let copts = cfg.compile_options(net)?;
    let options = SimOptions {
        overlap_communication: cfg.overlap,
        threads: cfg.threads,
    };
    Simulator::new(net, weights, &tile, &copts, options).map_err(sim_failure)
}

#[derive(Serialize)]
struct PipelineSection<'a> {
    config: &'a PipelineConfig,
    items: usize,
    stages: &'a [StageCost],
    #[serde(skip_serializing_if = "Option::is_none")]
    budget: Option<&'a BudgetSearch>,
}

/// Costs of `items` items: summed phase energies and the single-pass latency.
fn summed_report(cfg: &RunConfig, sim: &Simulator, inputs: &[Vec<u64>]) -> Result<CostReport, Failure> {
    let reports: Vec<CostReport> = if cfg.estimate {
        let r = sim.estimate(&inputs[0], cfg.estimate_seed()).map_err(sim_failure)?;
        vec![r; inputs.len()]
    } else {
        inputs
            .iter()
            .map(|x| sim.run_single_pass(x).map(|(r, _)| r))
            .collect::<Result<_, _>>()
            .map_err(sim_failure)?
    };
    Ok(sum_reports(&reports).expect("at least one input"))
}

pub fn simulate(cfg: &RunConfig, trace: Option<&Path>) -> Result<(), Failure> {
    let formats = cfg.out.iter().map(|p| format_of(p)).collect::<Result<Vec<_>, _>>()?;
    if cfg.inputs == 0 {
        return Err(Failure::Config("inputs must be at least 1".into()));
    }
    let net = cfg.load_network()?;
    let sim = build_simulator(cfg, &net)?;
    let pipe = match cfg.pipeline_config(&net)? {
        Some(p) => Some(p),
        None if cfg.inputs > 1 => Some(PipelineConfig::for_network(&net)),
        None => None,
    };
    let inputs = seeded_inputs(&net, cfg.input_seed(), cfg.inputs);
    let sum = summed_report(cfg, &sim, &inputs)?;
    check_report(&sum)?;
    let single = (cfg.inputs == 1).then(|| sum.clone());

    let (report, section) = match &pipe {
        None => (sum, None),
        Some(base) => {
            let per_item = per_item_report(&sum, inputs.len());
            let base_stages = stage_costs(base, sim.plan(), &per_item).map_err(pipeline_failure)?;
            let (config, stages, search) = match base.budget {
                Some(b) => {
                    let search = scale_to_power_budget(base, &base_stages, per_item.energy, b).map_err(pipeline_failure)?;
                    let stages = stage_costs(&search.config, sim.plan(), &per_item).map_err(pipeline_failure)?;
                    check_budget(&search, &stages, per_item.energy, b)?;
                    (search.config.clone(), stages, Some(search))
                }
                None => (base.clone(), base_stages.clone(), None),
            };
            let report = pipeline_report(sum, &stages, inputs.len());
            check_pipeline(&report, &per_item, &base_stages, &stages, inputs.len())?;
            (report, Some((config, stages, search)))
        }
    };
    if let Some(s) = &single {
        if !close(s.latency, report.latency) {
            return Err(Failure::Invariant("single-item pipeline latency differs from the single pass".into()));
        }
    }

    print!("{}", summary(cfg, &net, &sim, &report));
    if let Some((config, stages, search)) = &section {
        print!("{}", pipeline_summary(config, stages, &report));
        if let (Some(search), Some(path)) = (search, trace) {
            write_atomic(path, report::budget_trace_csv(search).as_bytes())?;
        }
    }

    let tile = sim.tile_config();
    for (path, &format) in cfg.out.iter().zip(&formats) {
        let doc = ReportDocument {
            version: crate::output::VERSION,
            config: cfg,
            tile,
            report: &report,
            pipeline: section.as_ref().map(|(config, stages, search)| PipelineSection {
                config,
                items: inputs.len(),
                stages,
                budget: search.as_ref(),
            }),
        };
        write_atomic(path, render_report(&doc, format).as_bytes())?;
    }
    Ok(())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_TOL * a.abs().max(b.abs())
}

/// Phase totals add up, and every cost is finite and non-negative.
fn check_report(r: &CostReport) -> Result<(), Failure> {
    let bad = |m: String| Err(Failure::Invariant(m));
    for p in &r.phases {
        for (what, v) in [("latency", p.latency), ("energy", p.energy), ("peripheral energy", p.peripheral_energy)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("phase `{}` has {what} {v}", p.name));
            }
        }
        if p.peripheral_energy > p.energy * (1.0 + REL_TOL) {
            return bad(format!("phase `{}` peripheral energy exceeds its total", p.name));
        }
    }
    let e: f64 = r.phases.iter().map(|p| p.energy).sum();
    let l: f64 = r.phases.iter().map(|p| p.latency).sum();
    if !close(e, r.energy) {
        return bad(format!("phase energies sum to {e}, report total is {}", r.energy));
    }
    if !close(l, r.latency) {
        return bad(format!("phase latencies sum to {l}, report total is {}", r.latency));
    }
    Ok(())
}

fn check_pipeline(report: &CostReport, per_item: &CostReport, base: &[StageCost], stages: &[StageCost], items: usize) -> Result<(), Failure> {
    let bad = |m: String| Err(Failure::Invariant(m));
    let base_rate = spinpim_core::pipeline::throughput(base);
    if report.throughput < base_rate * (1.0 - REL_TOL) {
        return bad("replication lowered throughput".into());
    }
    let e: f64 = stages.iter().map(|s| s.energy).sum();
    if !close(e, per_item.energy) {
        return bad(format!("stage energies sum to {e}, energy per item is {}", per_item.energy));
    }
    if !close(report.energy / items as f64, per_item.energy) {
        return bad("energy per item changed under pipelining".into());
    }
    Ok(())
}

fn check_budget(search: &BudgetSearch, stages: &[StageCost], energy: f64, budget: f64) -> Result<(), Failure> {
    for w in search.steps.windows(2) {
        if w[1].throughput < w[0].throughput {
            return Err(Failure::Invariant("budget search lowered throughput".into()));
        }
    }
    if search.steps.iter().any(|s| s.power > budget) {
        return Err(Failure::Invariant("budget search exceeded the budget".into()));
    }
    let power = energy * spinpim_core::pipeline::throughput(stages);
    if power > budget * (1.0 + REL_TOL) {
        return Err(Failure::Invariant(format!("pipeline power {power} W exceeds the {budget} W budget")));
    }
    Ok(())
}

fn summary(cfg: &RunConfig, net: &NetworkSpec, sim: &Simulator, report: &CostReport) -> String {
    let tile = sim.tile_config();
    let mut out = String::new();
    writeln!(
        out,
        "{} on {}x{} {:?} tiles, {} device, peripheral {}{}",
        net.name,
        tile.rows,
        tile.cols,
        tile.variant,
        cfg.spec,
        if cfg.peripheral { "on" } else { "off" },
        if cfg.estimate { " (estimate)" } else { "" }
    )
    .expect("string write");
    writeln!(
        out,
        "{:<10} {:>3} {:>5} {:>6} {:>12} {:>12} {:>12}",
        "layer", "g", "sigma", "tiles", "compute (s)", "comm (s)", "energy (J)"
    )
    .expect("string write");
    for (i, plan) in sim.plan().layers.iter().enumerate() {
        let of = |kind: PhaseKind| report.phases.iter().filter(move |p| p.layer == Some(i) && p.kind == kind);
        let compute: f64 = of(PhaseKind::Compute).map(|p| p.latency).sum();
        let comm: f64 = of(PhaseKind::Communicate).map(|p| p.latency).sum();
        let energy: f64 = report.phases.iter().filter(|p| p.layer == Some(i)).map(|p| p.energy).sum();
        writeln!(
            out,
            "{:<10} {:>3} {:>5} {:>6} {:>12.4e} {:>12.4e} {:>12.4e}",
            plan.layer.name, plan.g, plan.sigma, plan.tiles, compute, comm, energy
        )
        .expect("string write");
    }
    writeln!(
        out,
        "total: latency {:.4e} s, energy {:.4e} J (peripheral {:.4e} J), memory {} bytes, throughput {:.4e}/s, power {:.4e} W",
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

fn pipeline_summary(config: &PipelineConfig, stages: &[StageCost], report: &CostReport) -> String {
    let mut out = format!("pipeline: {} stages\n", config.depth());
    for s in stages {
        writeln!(
            out,
            "  {:<10} x{:<5} latency {:.4e} s, energy {:.4e} J, rate {:.4e}/s",
            s.name,
            s.replicas,
            s.latency,
            s.energy,
            s.rate()
        )
        .expect("string write");
    }
    if let Some(b) = config.budget {
        writeln!(out, "budget {b} W: power {:.4e} W, throughput {:.4e}/s", report.power, report.throughput).expect("string write");
    }
    out
}

pub fn grid(cfg: &RunConfig, benchmarks: &[String]) -> Result<(), Failure> {
    let formats = cfg.out.iter().map(|p| format_of(p)).collect::<Result<Vec<_>, _>>()?;
    let refs = References::builtin();
    let mut latency = Grid::new(GridMetric::Latency);
    let mut energy = Grid::new(GridMetric::Energy);
    for name in benchmarks {
        let net = load_network(name)?;
        let weights = std::sync::Arc::new(Weights::seeded(&net, cfg.seed));
        let input = seeded_inputs(&net, cfg.input_seed(), 1).remove(0);
        let copts = cfg.compile_options(&net)?;
        let fpga = refs.fpga(&net.name);
        let mut lat_row = vec![fpga.map(|r| r.latency)];
        let mut en_row = vec![fpga.map(|r| r.energy)];
        for label in &GRID_COLUMNS[1..] {
            let tile = grid_tile_config::<f64>(label).map_err(|e| Failure::Config(e.to_string()))?;
            let options = SimOptions {
                overlap_communication: cfg.overlap,
                threads: cfg.threads,
            };
            let sim = Simulator::new(&net, weights.clone(), &tile, &copts, options).map_err(sim_failure)?;
            // Reference bit-exactness does not cover the scaled AlexNet layers,
            // so that benchmark is always costed from sample tiles.
            let report = if cfg.estimate || net.name == "alexnet-xnor" {
                sim.estimate(&input, cfg.estimate_seed()).map_err(sim_failure)?
            } else {
                sim.run_single_pass(&input).map_err(sim_failure)?.0
            };
            check_report(&report)?;
            eprintln!("{} {label}: {:.3e} s, {:.3e} J", net.name, report.latency, report.energy);
            lat_row.push(Some(report.latency));
            en_row.push(Some(report.energy));
        }
        latency.rows.push(GridRow {
            benchmark: net.name.clone(),
            values: lat_row,
        });
        energy.rows.push(GridRow {
            benchmark: net.name.clone(),
            values: en_row,
        });
    }
    println!("{latency}");
    println!("{energy}");
    println!(
        "GPU reference ({}): {:.3e} s, {:.3e} J, {} W",
        refs.gpu.name, refs.gpu.latency, refs.gpu.energy, refs.gpu.power
    );
    for (path, &format) in cfg.out.iter().zip(&formats) {
        write_atomic(path, render_grids(cfg, &latency, &energy, format).as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Mismatch {
    neuron: usize,
    expected: u64,
    actual: u64,
}

#[derive(Serialize)]
struct Repro<'a> {
    version: &'static str,
    config: &'a RunConfig,
    input_index: usize,
    layer: usize,
    layer_name: String,
    layer_input: Vec<u64>,
    mismatches: usize,
    first: Vec<Mismatch>,
}

pub fn verify(cfg: &RunConfig, count: usize, repro: Option<&Path>) -> Result<(), Failure> {
    let net = cfg.load_network()?;
    let sim = build_simulator(cfg, &net)?;
    if count == 0 {
        eprintln!("warning: count is 0, nothing compared");
        println!("verify {}: pass (0 inputs)", net.name);
        return Ok(());
    }
    let inputs = seeded_inputs(&net, cfg.input_seed(), count);
    for (i, x) in inputs.iter().enumerate() {
        let (_, got) = sim.run_single_pass(x).map_err(sim_failure)?;
        let layers = forward_layers(&net, sim.weights(), x).map_err(|e| Failure::Config(e.to_string()))?;
        let expected = layers.last().cloned().unwrap_or_else(|| x.clone());
        if got == expected {
            continue;
        }
        let r = minimize(cfg, &sim, x, &layers, i)?;
        let mut msg = format!(
            "input {i}: layer {} (`{}`) differs from the reference in {} of {} outputs",
            r.layer,
            r.layer_name,
            r.mismatches,
            layers[r.layer].len()
        );
        for m in &r.first {
            write!(msg, "\n  neuron {}: expected {}, simulated {}", m.neuron, m.expected, m.actual).expect("string write");
        }
        if let Some(path) = repro {
            let mut s = serde_json::to_string_pretty(&r).expect("repro serializes");
            s.push('\n');
            write_atomic(path, s.as_bytes())?;
            write!(msg, "\n  repro written to {}", path.display()).expect("string write");
        }
        return Err(Failure::Verify(msg));
    }
    println!("verify {}: pass ({count} inputs)", net.name);
    Ok(())
}

/// First layer whose simulated output differs when fed the reference input.
fn minimize<'a>(cfg: &'a RunConfig, sim: &Simulator, x: &[u64], layers: &[Vec<u64>], index: usize) -> Result<Repro<'a>, Failure> {
    for l in 0..layers.len() {
        let input = if l == 0 { x } else { &layers[l - 1] };
        let got = sim.run_layer(l, input).map_err(sim_failure)?;
        let diffs: Vec<Mismatch> = got
            .iter()
            .zip(&layers[l])
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(n, (&actual, &expected))| Mismatch { neuron: n, expected, actual })
            .collect();
        if !diffs.is_empty() || got.len() != layers[l].len() {
            return Ok(Repro {
                version: crate::output::VERSION,
                config: cfg,
                input_index: index,
                layer: l,
                layer_name: sim.network().layers[l].name.clone(),
                layer_input: input.to_vec(),
                mismatches: diffs.len() + got.len().abs_diff(layers[l].len()),
                first: diffs.into_iter().take(16).collect(),
            });
        }
    }
    Err(Failure::Invariant(format!(
        "input {index}: network output differs but every layer matches in isolation"
    )))
}
