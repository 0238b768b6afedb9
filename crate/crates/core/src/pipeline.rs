//! Multi-array pipelining of a compiled network.
//!
//! Each stage owns a contiguous run of layers (plus, optionally, the input
//! write) on its own collection of tiles; replicating a stage lets several
//! items occupy it at once. Steady-state throughput is set by the slowest
//! replicated stage and power is energy per item times throughput.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::NetworkPlan;
use crate::network::NetworkSpec;
use crate::num::Scalar;
use crate::sim::{CostReport, SimError, Simulator};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid stage map: {0}")]
    InvalidStages(String),
    #[error("budget {budget} W is below the base configuration power {base} W")]
    BudgetTooLow { budget: f64, base: f64 },
    #[error("power budget search needs positive energy per item and finite stage latencies")]
    Degenerate,
    #[error("pipeline file: {0}")]
    Parse(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    /// Holds the input write of the network.
    #[serde(default)]
    pub input: bool,
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default = "one")]
    pub replicas: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(rename = "stage")]
    pub stages: Vec<StageSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
}

impl PipelineConfig {
    /// One stage per layer. Networks without convolutions get a leading
    /// stage that only writes the input.
    pub fn for_network(net: &NetworkSpec) -> Self {
        let mut stages = Vec::new();
        let separate_input = !net.is_convolutional();
        if separate_input {
            stages.push(StageSpec {
                name: "input".into(),
                input: true,
                layers: Vec::new(),
                replicas: 1,
            });
        }
        for (i, l) in net.layers.iter().enumerate() {
            stages.push(StageSpec {
                name: l.name.clone(),
                input: i == 0 && !separate_input,
                layers: vec![i],
                replicas: 1,
            });
        }
        PipelineConfig { stages, budget: None }
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self, layers: usize) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidStages(m));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        if !self.stages[0].input {
            return bad("the first stage must hold the input write".into());
        }
        if self.stages.iter().skip(1).any(|s| s.input) {
            return bad("only the first stage may hold the input write".into());
        }
        let mut next = 0;
        for s in &self.stages {
            if s.replicas == 0 {
                return bad(format!("stage `{}` has zero replicas", s.name));
            }
            if s.layers.is_empty() && !s.input {
                return bad(format!("stage `{}` holds nothing", s.name));
            }
            for &l in &s.layers {
                if l != next {
                    return bad(format!("stage `{}` lists layer {l} where layer {next} was expected", s.name));
                }
                next += 1;
            }
        }
        if next != layers {
            return bad(format!("stages cover {next} of {layers} layers"));
        }
        if let Some(b) = self.budget {
            if !(b > 0.0) || !b.is_finite() {
                return bad(format!("budget must be positive, got {b}"));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("pipeline serializes")
    }

    /// Stage holding each phase of a single-pass report.
    fn phase_stages<T: Scalar>(&self, report: &CostReport<T>) -> Result<Vec<usize>, PipelineError> {
        let mut owner = Vec::with_capacity(report.phases.len());
        for (i, p) in report.phases.iter().enumerate() {
            let stage = if i == 0 {
                Some(0)
            } else {
                p.layer.and_then(|l| self.stages.iter().position(|s| s.layers.contains(&l)))
            };
            owner.push(stage.ok_or_else(|| PipelineError::InvalidStages(format!("phase `{}` has no stage", p.name)))?);
        }
        Ok(owner)
    }
}

/// Per-stage cost of one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StageCost<T> {
    pub name: String,
    pub replicas: usize,
    pub latency: T,
    pub energy: T,
    /// Bytes of one replica.
    pub memory_bytes: u64,
}

impl<T: Scalar> StageCost<T> {
    /// Items per second this stage sustains.
    pub fn rate(&self) -> T {
        if self.latency > T::zero() {
            T::count(self.replicas as u64) / self.latency
        } else {
            T::infinity()
        }
    }
}

/// Splits a single-pass report into stage costs.
pub fn stage_costs<T: Scalar>(cfg: &PipelineConfig, plan: &NetworkPlan, report: &CostReport<T>) -> Result<Vec<StageCost<T>>, PipelineError> {
    cfg.validate(plan.layers.len())?;
    let owner = cfg.phase_stages(report)?;
    let mut stages: Vec<StageCost<T>> = cfg
        .stages
        .iter()
        .map(|s| StageCost {
            name: s.name.clone(),
            replicas: s.replicas,
            latency: T::zero(),
            energy: T::zero(),
            memory_bytes: s.layers.iter().map(|&l| plan.layers[l].memory_bytes()).sum(),
        })
        .collect();
    for (p, &s) in report.phases.iter().zip(&owner) {
        stages[s].latency += p.latency;
        stages[s].energy += p.energy;
    }
    Ok(stages)
}

/// Steady-state throughput: the slowest stage rate.
pub fn throughput<T: Scalar>(stages: &[StageCost<T>]) -> T {
    stages
        .iter()
        .map(|s| s.rate())
        .fold(T::infinity(), |a, b| if b < a { b } else { a })
}

/// Completion time of `items` items entering back to back. Item `i` uses
/// replica `i mod r` of each stage and waits for the item that last used it.
pub fn makespan<T: Scalar>(stages: &[StageCost<T>], items: usize) -> T {
    if items == 0 || stages.is_empty() {
        return T::zero();
    }
    // finish[s][i]: completion of item i at stage s.
    let mut finish: Vec<Vec<T>> = stages.iter().map(|_| vec![T::zero(); items]).collect();
    for i in 0..items {
        let mut ready = T::zero();
        for (s, st) in stages.iter().enumerate() {
            let free = if i >= st.replicas { finish[s][i - st.replicas] } else { T::zero() };
            let start = if free > ready { free } else { ready };
            ready = start + st.latency;
            finish[s][i] = ready;
        }
    }
    finish[stages.len() - 1][items - 1]
}

/// Runs a stream of inputs through the pipeline. Phase energies are summed
/// over items; latency is the completion time of the last item.
pub fn run_pipeline<T: Scalar>(sim: &Simulator<T>, cfg: &PipelineConfig, inputs: &[Vec<u64>]) -> Result<(CostReport<T>, Vec<Vec<u64>>), PipelineError> {
    cfg.validate(sim.plan().layers.len())?;
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut reports = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (r, out) = sim.run_single_pass(x)?;
        outputs.push(out);
        reports.push(r);
    }
    let Some(sum) = sum_reports(&reports) else {
        return Ok((CostReport::from_phases(Vec::new(), 0), outputs));
    };
    let per_item = per_item_report(&sum, inputs.len());
    let stages = stage_costs(cfg, sim.plan(), &per_item)?;
    Ok((pipeline_report(sum, &stages, inputs.len()), outputs))
}

/// Phase-wise energy sum of single-pass reports of the same plan, keeping
/// the phase latencies of the first.
pub fn sum_reports<T: Scalar>(reports: &[CostReport<T>]) -> Option<CostReport<T>> {
    let (first, rest) = reports.split_first()?;
    let mut phases = first.phases.clone();
    for r in rest {
        for (a, p) in phases.iter_mut().zip(&r.phases) {
            a.energy += p.energy;
            a.peripheral_energy += p.peripheral_energy;
        }
    }
    Some(CostReport::from_phases(phases, first.memory_bytes))
}

/// Averages the phase energies of a summed report over `items`.
pub fn per_item_report<T: Scalar>(sum: &CostReport<T>, items: usize) -> CostReport<T> {
    let n = T::count(items.max(1) as u64);
    let mut phases = sum.phases.clone();
    for p in &mut phases {
        p.energy = p.energy / n;
        p.peripheral_energy = p.peripheral_energy / n;
    }
    CostReport::from_phases(phases, sum.memory_bytes)
}

/// Report for `items` items given their summed phases and the stage costs.
pub fn pipeline_report<T: Scalar>(sum: CostReport<T>, stages: &[StageCost<T>], items: usize) -> CostReport<T> {
    let energy = sum.energy;
    let rate = throughput(stages);
    let per_item = if items > 0 { energy / T::count(items as u64) } else { T::zero() };
    CostReport {
        latency: if items == 1 { sum.latency } else { makespan(stages, items) },
        energy,
        phases: sum.phases,
        memory_bytes: stages.iter().map(|s| s.memory_bytes * s.replicas as u64).sum(),
        throughput: rate,
        power: per_item * rate,
    }
}

/// One accepted addition of the budget search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BudgetStep<T> {
    /// Stage that received a replica; `None` for the base configuration.
    pub stage: Option<usize>,
    pub throughput: T,
    pub power: T,
    pub memory_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BudgetSearch<T> {
    pub config: PipelineConfig,
    pub steps: Vec<BudgetStep<T>>,
}

impl<T: Scalar> BudgetSearch<T> {
    pub fn last(&self) -> &BudgetStep<T> {
        self.steps.last().expect("base step")
    }
}

/// Greedily adds one replica at a time to the stage whose replication gives
/// the highest overall throughput, stopping before power would exceed the
/// budget. Among equal throughputs the slowest stage wins, then the lowest
/// index, so tied bottlenecks are all widened in turn.
pub fn scale_to_power_budget<T: Scalar>(base: &PipelineConfig, stages: &[StageCost<T>], energy_per_item: T, budget: T) -> Result<BudgetSearch<T>, PipelineError> {
    if stages.len() != base.stages.len() {
        return Err(PipelineError::InvalidStages("stage costs do not match the configuration".into()));
    }
    let mut cur: Vec<StageCost<T>> = stages.to_vec();
    for (c, s) in cur.iter_mut().zip(&base.stages) {
        c.replicas = s.replicas;
    }
    let power_of = |st: &[StageCost<T>]| energy_per_item * throughput(st);
    let memory_of = |st: &[StageCost<T>]| st.iter().map(|s| s.memory_bytes * s.replicas as u64).sum::<u64>();
    let base_power = power_of(&cur);
    if base_power > budget {
        return Err(PipelineError::BudgetTooLow {
            budget: budget.to_f64_lossy(),
            base: base_power.to_f64_lossy(),
        });
    }
    if !(energy_per_item > T::zero()) || !throughput(&cur).is_finite() {
        return Err(PipelineError::Degenerate);
    }
    let mut steps = vec![BudgetStep {
        stage: None,
        throughput: throughput(&cur),
        power: base_power,
        memory_bytes: memory_of(&cur),
    }];
    loop {
        let mut best: Option<(usize, T, T)> = None;
        for s in 0..cur.len() {
            cur[s].replicas += 1;
            let t = throughput(&cur);
            cur[s].replicas -= 1;
            let own = cur[s].rate();
            let better = match best {
                None => true,
                Some((_, bt, bown)) => t > bt || (t == bt && own < bown),
            };
            if better {
                best = Some((s, t, own));
            }
        }
        let (s, _, _) = best.expect("at least one stage");
        cur[s].replicas += 1;
        let power = power_of(&cur);
        if power > budget {
            cur[s].replicas -= 1;
            break;
        }
        steps.push(BudgetStep {
            stage: Some(s),
            throughput: throughput(&cur),
            power,
            memory_bytes: memory_of(&cur),
        });
    }
    let mut config = base.clone();
    for (spec, c) in config.stages.iter_mut().zip(&cur) {
        spec.replicas = c.replicas;
    }
    config.budget = Some(budget.to_f64_lossy());
    Ok(BudgetSearch { config, steps })
}
