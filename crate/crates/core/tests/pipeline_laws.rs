use std::sync::Arc;

use proptest::prelude::*;
use spinpim_core::array::{CellVariant, PeripheralModel, TileConfig};
use spinpim_core::device::MtjSpec;
use spinpim_core::layout::CompileOptions;
use spinpim_core::network::NetworkSpec;
use spinpim_core::pipeline::{
    makespan, per_item_report, run_pipeline, scale_to_power_budget, stage_costs, throughput, PipelineConfig, StageCost,
};
use spinpim_core::reference::{forward, seeded_inputs, Weights};
use spinpim_core::report::{report_csv, report_json};
use spinpim_core::sim::{CostReport, Simulator};
use spinpim_core::SimOptions;

fn finn_fc() -> (NetworkSpec, Simulator<f64>) {
    let net = NetworkSpec::preset("finn-fc").unwrap();
    let cfg = TileConfig::square(1024, CellVariant::OneTTransposed, MtjSpec::future()).with_peripheral(PeripheralModel::builtin("future").unwrap());
    let sim = Simulator::new(&net, Arc::new(Weights::seeded(&net, 42)), &cfg, &CompileOptions::default(), SimOptions::default()).unwrap();
    (net, sim)
}

fn stage(latency: f64, replicas: usize) -> StageCost<f64> {
    StageCost {
        name: String::new(),
        replicas,
        latency,
        energy: 1.0,
        memory_bytes: 10,
    }
}

#[test]
fn default_stage_counts() {
    for (name, stages) in [("finn-fc", 5), ("fpbnn-fc", 5), ("finn-cifar", 9), ("fpbnn-cifar", 9), ("alexnet-xnor", 8), ("bionet", 4)] {
        let net = NetworkSpec::preset(name).unwrap();
        let cfg = PipelineConfig::for_network(&net);
        assert_eq!(cfg.depth(), stages, "{name}");
        cfg.validate(net.layers.len()).unwrap();
    }
}

#[test]
fn one_item_costs_the_single_pass() {
    let (net, sim) = finn_fc();
    let x = seeded_inputs(&net, 1, 1);
    let (single, out) = sim.run_single_pass(&x[0]).unwrap();
    let (piped, outs) = run_pipeline(&sim, &PipelineConfig::for_network(&net), &x).unwrap();
    assert_eq!(outs, vec![out]);
    assert_eq!(piped.latency, single.latency);
    assert!((piped.energy - single.energy).abs() <= 1e-12 * single.energy);
}

#[test]
fn stream_outputs_match_reference_and_energy_adds_up() {
    let (net, sim) = finn_fc();
    let xs = seeded_inputs(&net, 2, 6);
    let (report, outs) = run_pipeline(&sim, &PipelineConfig::for_network(&net), &xs).unwrap();
    let mut energy = 0.0;
    for (x, out) in xs.iter().zip(&outs) {
        assert_eq!(out, &forward(&net, sim.weights(), x).unwrap());
        energy += sim.run_single_pass(x).unwrap().0.energy;
    }
    assert!((report.energy - energy).abs() <= 1e-9 * energy);
    let single = sim.run_single_pass(&xs[0]).unwrap().0;
    assert!(report.latency > single.latency && report.latency < 6.0 * single.latency);
}

#[test]
fn stage_costs_partition_the_pass() {
    let (net, sim) = finn_fc();
    let (r, _) = sim.run_single_pass(&seeded_inputs(&net, 3, 1)[0]).unwrap();
    let stages = stage_costs(&PipelineConfig::for_network(&net), sim.plan(), &r).unwrap();
    let lat: f64 = stages.iter().map(|s| s.latency).sum();
    let en: f64 = stages.iter().map(|s| s.energy).sum();
    assert!((lat - r.latency).abs() <= 1e-12 * r.latency);
    assert!((en - r.energy).abs() <= 1e-12 * r.energy);
    assert_eq!(stages.iter().map(|s| s.memory_bytes).sum::<u64>(), r.memory_bytes);
}

#[test]
fn makespan_of_unreplicated_stages() {
    // Classic bound: fill the pipe once, then one bottleneck interval per item.
    let lat = [2.0, 5.0, 1.0, 3.0];
    let stages: Vec<_> = lat.iter().map(|&l| stage(l, 1)).collect();
    for items in 1..20 {
        let expect = lat.iter().sum::<f64>() + (items - 1) as f64 * 5.0;
        assert_eq!(makespan(&stages, items), expect);
    }
}

#[test]
fn makespan_with_replicas_by_hand() {
    let stages = vec![stage(1.0, 1), stage(3.0, 3), stage(1.0, 1)];
    // Items enter at 0, 1, 2; the middle stage runs them side by side.
    assert_eq!(makespan(&stages, 3), 7.0);
    assert_eq!(throughput(&stages), 1.0);
}

#[test]
fn replicating_the_bottleneck_raises_throughput() {
    let (net, sim) = finn_fc();
    let (r, _) = sim.run_single_pass(&seeded_inputs(&net, 3, 1)[0]).unwrap();
    let mut stages = stage_costs(&PipelineConfig::for_network(&net), sim.plan(), &r).unwrap();
    let base = throughput(&stages);
    let slow = (0..stages.len()).min_by(|&a, &b| stages[a].rate().partial_cmp(&stages[b].rate()).unwrap()).unwrap();
    stages[slow].replicas += 1;
    assert!(throughput(&stages) > base);
    // Energy per item does not depend on replication.
    let per_item = per_item_report(&r, 1);
    assert!((per_item.energy - r.energy).abs() <= 1e-9 * r.energy);
}

#[test]
fn budget_search_is_monotone_and_bounded() {
    let (net, sim) = finn_fc();
    let (r, _) = sim.run_single_pass(&seeded_inputs(&net, 3, 1)[0]).unwrap();
    let cfg = PipelineConfig::for_network(&net);
    let stages = stage_costs(&cfg, sim.plan(), &r).unwrap();
    let base_power = r.energy * throughput(&stages);
    for factor in [1.0, 1.5, 3.0, 10.0] {
        let budget = base_power * factor;
        let search = scale_to_power_budget(&cfg, &stages, r.energy, budget).unwrap();
        for w in search.steps.windows(2) {
            assert!(w[1].throughput >= w[0].throughput);
            assert!(w[1].memory_bytes > w[0].memory_bytes);
        }
        assert!(search.steps.iter().all(|s| s.power <= budget));
        if factor == 1.0 {
            assert_eq!(search.steps.len(), 1);
            assert_eq!(search.config.stages, cfg.stages);
        }
    }
    assert!(scale_to_power_budget(&cfg, &stages, r.energy, base_power * 0.5).is_err());
}

#[test]
fn invalid_stage_maps_are_rejected() {
    let net = NetworkSpec::preset("finn-fc").unwrap();
    let good = PipelineConfig::for_network(&net);
    let mut skip = good.clone();
    skip.stages.remove(2);
    assert!(skip.validate(4).is_err());
    let mut zero = good.clone();
    zero.stages[1].replicas = 0;
    assert!(zero.validate(4).is_err());
    let mut no_input = good.clone();
    no_input.stages[0].input = false;
    assert!(no_input.validate(4).is_err());
    let round = PipelineConfig::from_toml_str(&good.to_toml_string()).unwrap();
    assert_eq!(round, good);
}

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn json_and_csv_reports_agree() {
    let (net, sim) = finn_fc();
    let (r, _) = sim.run_single_pass(&seeded_inputs(&net, 4, 1)[0]).unwrap();
    let json: CostReport<f64> = serde_json::from_str(&report_json(&r)).unwrap();
    assert_eq!(json, r);
    let rows = parse_csv(&report_csv(&r));
    assert_eq!(rows.len(), r.phases.len() + 1);
    for (row, p) in rows.iter().zip(&r.phases) {
        assert_eq!(row[0], "phase");
        assert_eq!(row[1], p.name);
        assert_eq!(row[4].parse::<f64>().unwrap(), p.latency);
        assert_eq!(row[5].parse::<f64>().unwrap(), p.energy);
        assert_eq!(row[6].parse::<f64>().unwrap(), p.peripheral_energy);
    }
    let total = rows.last().unwrap();
    assert_eq!(total[0], "total");
    assert_eq!(total[4].parse::<f64>().unwrap(), r.latency);
    assert_eq!(total[5].parse::<f64>().unwrap(), r.energy);
    assert_eq!(total[7].parse::<u64>().unwrap(), r.memory_bytes);
    assert_eq!(total[8].parse::<f64>().unwrap(), r.throughput);
    assert_eq!(total[9].parse::<f64>().unwrap(), r.power);
}

proptest! {
    #[test]
    fn throughput_is_the_slowest_stage(lat in prop::collection::vec(1e-9f64..1e-3, 1..8), reps in prop::collection::vec(1usize..4, 8)) {
        let stages: Vec<_> = lat.iter().zip(&reps).map(|(&l, &r)| stage(l, r)).collect();
        let expect = lat.iter().zip(&reps).map(|(&l, &r)| r as f64 / l).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(throughput(&stages), expect);
        // Long streams approach the bottleneck rate.
        let n = 2000;
        let rate = n as f64 / makespan(&stages, n);
        prop_assert!(rate <= expect * (1.0 + 1e-9));
        prop_assert!(rate >= expect * 0.9);
    }
}
