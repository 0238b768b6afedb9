//! Execution of a compiled network on simulated tiles.
//!
//! A single pass writes the input, then for every layer loads fresh tiles
//! (weights and constants uncosted), writes the layer input into every group
//! copy, runs the shared program on each tile and reads the output cells
//! back. Tiles of a layer run concurrently; their costs are combined in tile
//! order, so reports do not depend on the worker count.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{ArrayError, ColumnSet, MicroOp, StepCost, Tile, TileConfig, TileContext, WriteData};
use crate::bits::Mask;
use crate::gate::GateKind;
use crate::layout::{compile, CompileOptions, Geometry, LayerPlan, LayoutError, NetworkPlan, TapSource};
use crate::network::NetworkSpec;
use crate::num::Scalar;
use crate::reference::{LayerWeights, Weights, WeightsError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("array: {0}")]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseKind {
    Compute,
    Communicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PhaseCost<T> {
    pub name: String,
    /// Layer the phase belongs to; the output read belongs to the last layer.
    pub layer: Option<usize>,
    pub kind: PhaseKind,
    pub latency: T,
    pub energy: T,
    /// Share of `energy` spent in peripheral circuitry.
    pub peripheral_energy: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CostReport<T> {
    pub latency: T,
    pub energy: T,
    pub phases: Vec<PhaseCost<T>>,
    pub memory_bytes: u64,
    /// Items per second.
    pub throughput: T,
    /// Watts at `throughput`.
    pub power: T,
}

impl<T: Scalar> CostReport<T> {
    /// Totals and steady-state figures from phases run back to back.
    pub fn from_phases(phases: Vec<PhaseCost<T>>, memory_bytes: u64) -> Self {
        let latency = phases.iter().map(|p| p.latency).fold(T::zero(), |a, b| a + b);
        let energy = phases.iter().map(|p| p.energy).fold(T::zero(), |a, b| a + b);
        let throughput = if latency > T::zero() { T::one() / latency } else { T::zero() };
        CostReport {
            latency,
            energy,
            phases,
            memory_bytes,
            throughput,
            power: energy * throughput,
        }
    }

    pub fn peripheral_energy(&self) -> T {
        self.phases.iter().map(|p| p.peripheral_energy).fold(T::zero(), |a, b| a + b)
    }

    pub fn compute_latency(&self) -> T {
        self.sum_latency(PhaseKind::Compute)
    }

    pub fn communicate_latency(&self) -> T {
        self.sum_latency(PhaseKind::Communicate)
    }

    fn sum_latency(&self, kind: PhaseKind) -> T {
        self.phases
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.latency)
            .fold(T::zero(), |a, b| a + b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Overlap source reads with destination writes in communication phases.
    pub overlap_communication: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            overlap_communication: false,
            threads: None,
        }
    }
}

/// Cost of one memory direction across tiles working in parallel.
#[derive(Clone, Copy, Debug)]
struct Parallel<T> {
    latency: T,
    energy: T,
    peripheral_energy: T,
}

impl<T: Scalar> Parallel<T> {
    fn zero() -> Self {
        Parallel {
            latency: T::zero(),
            energy: T::zero(),
            peripheral_energy: T::zero(),
        }
    }

    /// Tiles run side by side: slowest tile, summed energy.
    fn of(costs: impl Iterator<Item = StepCost<T>>) -> Self {
        let mut p = Parallel::zero();
        for c in costs {
            let lat = c.latency();
            if lat > p.latency {
                p.latency = lat;
            }
            p.energy += c.energy();
            p.peripheral_energy += c.peripheral.energy;
        }
        p
    }

    fn times(self, n: usize) -> Self {
        let k = T::count(n as u64);
        Parallel {
            latency: self.latency,
            energy: self.energy * k,
            peripheral_energy: self.peripheral_energy * k,
        }
    }

    fn phase(self, name: String, layer: Option<usize>, kind: PhaseKind) -> PhaseCost<T> {
        PhaseCost {
            name,
            layer,
            kind,
            latency: self.latency,
            energy: self.energy,
            peripheral_energy: self.peripheral_energy,
        }
    }
}

fn transfer_phase<T: Scalar>(name: String, layer: Option<usize>, reads: Parallel<T>, writes: Parallel<T>, overlap: bool) -> PhaseCost<T> {
    let latency = if overlap {
        if reads.latency > writes.latency {
            reads.latency
        } else {
            writes.latency
        }
    } else {
        reads.latency + writes.latency
    };
    PhaseCost {
        name,
        layer,
        kind: PhaseKind::Communicate,
        latency,
        energy: reads.energy + writes.energy,
        peripheral_energy: reads.peripheral_energy + writes.peripheral_energy,
    }
}

struct TileRun<T> {
    write: StepCost<T>,
    compute: StepCost<T>,
    read: StepCost<T>,
    outputs: Vec<(usize, u64)>,
}

/// A network compiled for one tile configuration, with its weights.
pub struct Simulator<T: Scalar> {
    net: NetworkSpec,
    weights: Arc<Weights>,
    plan: NetworkPlan,
    ctx: Arc<TileContext<T>>,
    options: SimOptions,
    /// Folded thresholds per layer and channel.
    thresholds: Vec<Vec<u128>>,
}

impl<T: Scalar> Simulator<T> {
    pub fn new(net: &NetworkSpec, weights: Arc<Weights>, tile: &TileConfig<T>, compile_opts: &CompileOptions, options: SimOptions) -> Result<Self, SimError> {
        let plan = compile(net, &Geometry::of(tile), compile_opts)?;
        Self::with_plan(net, weights, tile, plan, options)
    }

    pub fn with_plan(net: &NetworkSpec, weights: Arc<Weights>, tile: &TileConfig<T>, plan: NetworkPlan, options: SimOptions) -> Result<Self, SimError> {
        weights.check_shape(net)?;
        if plan.layers.len() != net.layers.len() || plan.geometry != Geometry::of(tile) {
            return Err(SimError::Config("plan does not match the network or tile".into()));
        }
        let ctx = tile.context()?;
        for l in &plan.layers {
            for op in &l.program.ops {
                if let MicroOp::Gate(g) = op {
                    if ctx.electrics(g.gate).is_none() {
                        return Err(SimError::Config(format!(
                            "gate {} used by layer `{}` has no feasible window at {} ohm parasitic",
                            g.gate, l.layer.name, tile.parasitic
                        )));
                    }
                }
            }
        }
        let thresholds = net
            .layers
            .iter()
            .zip(&weights.layers)
            .map(|(l, lw)| lw.thresholds.iter().map(|&t| crate::layout::folded_threshold(l, t)).collect())
            .collect();
        Ok(Simulator {
            net: net.clone(),
            weights,
            plan,
            ctx,
            options,
            thresholds,
        })
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn tile_config(&self) -> &TileConfig<T> {
        &self.ctx.cfg
    }

    /// Gates used by any layer program.
    pub fn gates_used(&self) -> Vec<GateKind> {
        let mut used: Vec<GateKind> = GateKind::ALL
            .iter()
            .copied()
            .filter(|&k| {
                self.plan
                    .layers
                    .iter()
                    .any(|l| l.program.ops.iter().any(|op| matches!(op, MicroOp::Gate(g) if g.gate == k)))
            })
            .collect();
        used.dedup();
        used
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match self.options.threads {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("thread pool")
                .install(f),
            None => f(),
        }
    }

    /// Runs one input through every layer; returns the cost report and the
    /// output values read back from the last layer's tiles.
    pub fn run_single_pass(&self, input: &[u64]) -> Result<(CostReport<T>, Vec<u64>), SimError> {
        self.check_input(input)?;
        self.install(|| self.pass(input, None))
    }

    /// Cost-only pass that executes one sample tile per layer and scales its
    /// energy by the layer's tile count. Inputs to later layers are seeded
    /// random bits, so no outputs are produced.
    pub fn estimate(&self, input: &[u64], seed: u64) -> Result<CostReport<T>, SimError> {
        self.check_input(input)?;
        self.install(|| self.pass(input, Some(seed)).map(|(r, _)| r))
    }

    /// Outputs of layer `l` alone for the given layer input, without costs.
    pub fn run_layer(&self, l: usize, input: &[u64]) -> Result<Vec<u64>, SimError> {
        let plan = self
            .plan
            .layers
            .get(l)
            .ok_or_else(|| SimError::Shape(format!("no layer {l}")))?;
        if input.len() != plan.layer.input_len() {
            return Err(SimError::Shape(format!(
                "layer `{}` takes {} inputs, got {}",
                plan.layer.name,
                plan.layer.input_len(),
                input.len()
            )));
        }
        let lw = &self.weights.layers[l];
        let runs: Vec<TileRun<T>> = self.install(|| {
            (0..plan.tiles)
                .into_par_iter()
                .map(|t| self.run_tile(plan, lw, &self.thresholds[l], t, input))
                .collect::<Result<_, _>>()
        })?;
        let mut out = vec![0u64; plan.layer.output_len()];
        for r in runs {
            for (i, v) in r.outputs {
                out[i] = v;
            }
        }
        Ok(out)
    }

    fn check_input(&self, input: &[u64]) -> Result<(), SimError> {
        if input.len() != self.net.input_len() {
            return Err(SimError::Shape(format!(
                "network takes {} inputs, got {}",
                self.net.input_len(),
                input.len()
            )));
        }
        let limit = 1u64 << self.net.input_bits();
        if input.iter().any(|&v| v >= limit) {
            return Err(SimError::Shape(format!("input values must fit in {} bits", self.net.input_bits())));
        }
        Ok(())
    }

    fn pass(&self, input: &[u64], estimate: Option<u64>) -> Result<(CostReport<T>, Vec<u64>), SimError> {
        let overlap = self.options.overlap_communication;
        let mut phases = Vec::new();
        let mut values = input.to_vec();
        let mut prev_reads: Option<Parallel<T>> = None;
        let mut rng = estimate.map(ChaCha8Rng::seed_from_u64);
        for (l, plan) in self.plan.layers.iter().enumerate() {
            if l > 0 {
                if let Some(rng) = rng.as_mut() {
                    values = (0..plan.layer.input_len()).map(|_| rng.gen_range(0..=1)).collect();
                }
            }
            let lw = &self.weights.layers[l];
            let tiles: Vec<usize> = if estimate.is_some() { vec![0] } else { (0..plan.tiles).collect() };
            let runs: Vec<TileRun<T>> = tiles
                .par_iter()
                .map(|&t| self.run_tile(plan, lw, &self.thresholds[l], t, &values))
                .collect::<Result<_, _>>()?;
            let scale = if estimate.is_some() { plan.tiles } else { 1 };
            let writes = Parallel::of(runs.iter().map(|r| r.write)).times(scale);
            let compute = Parallel::of(runs.iter().map(|r| r.compute)).times(scale);
            let reads = Parallel::of(runs.iter().map(|r| r.read)).times(scale);
            let (incoming, name) = match prev_reads {
                None => (Parallel::zero(), "input".to_string()),
                Some(r) => (r, format!("{} communicate", plan.layer.name)),
            };
            phases.push(transfer_phase(name, Some(l), incoming, writes, overlap));
            phases.push(compute.phase(format!("{} compute", plan.layer.name), Some(l), PhaseKind::Compute));
            prev_reads = Some(reads);
            let mut out = vec![0u64; plan.layer.output_len()];
            for r in runs {
                for (i, v) in r.outputs {
                    out[i] = v;
                }
            }
            values = out;
        }
        let last = self.plan.layers.len().checked_sub(1);
        if last.is_none() {
            phases.push(transfer_phase("input".into(), None, Parallel::zero(), Parallel::zero(), overlap));
        }
        phases.push(transfer_phase("output".into(), last, prev_reads.unwrap_or(Parallel::zero()), Parallel::zero(), overlap));
        let output = if estimate.is_some() { Vec::new() } else { values };
        Ok((CostReport::from_phases(phases, self.plan.memory_bytes()), output))
    }

    fn run_tile(&self, plan: &LayerPlan, lw: &LayerWeights, thresholds: &[u128], t: usize, input: &[u64]) -> Result<TileRun<T>, SimError> {
        let mut tile = Tile::new(Arc::clone(&self.ctx));
        let map = &plan.slot_map;
        for &(slot, v) in &map.consts {
            tile.fill_slot(slot, v);
        }
        let lanes = tile.lanes();
        let words = lanes.div_ceil(64);
        let b_planes = plan.layer.input_bits as usize;
        // Input row images, one per input cell, built while loading weights.
        let mut input_planes = vec![vec![0u64; words]; b_planes * plan.share];
        for q in 0..plan.groups_per_tile {
            let j = t * plan.groups_per_tile + q;
            if j >= plan.groups_per_wave {
                break;
            }
            let taps = plan.group_taps(j);
            let channels: Vec<Option<usize>> = (0..plan.sigma).map(|w| plan.channel(w, j)).collect();
            for k in 0..plan.g {
                let lane = q * plan.g + k;
                let (word, bit) = (lane / 64, 1u64 << (lane % 64));
                let lane_taps = &taps[k * plan.share..(k + 1) * plan.share];
                for (ti, tap) in lane_taps.iter().enumerate() {
                    if let TapSource::Input(i) = *tap {
                        let v = input[i];
                        for b in 0..b_planes {
                            if v >> b & 1 == 1 {
                                input_planes[b * plan.share + ti][word] |= bit;
                            }
                        }
                    }
                }
                for (wave, &ch) in channels.iter().enumerate() {
                    for c in 0..plan.layer.weight_bits {
                        let slots = &map.weights[wave][c as usize];
                        for (ti, tap) in lane_taps.iter().enumerate() {
                            let one = match (tap, ch) {
                                (TapSource::Pad, _) | (_, None) => true,
                                (_, Some(ch)) => lw.bit(ch, k * plan.share + ti, c),
                            };
                            if one {
                                tile.set(slots[ti], lane, true);
                            }
                        }
                    }
                    if k == 0 {
                        if let Some(ch) = ch {
                            let tv = thresholds.get(ch).copied().unwrap_or(0);
                            for (i, &slot) in map.thresholds[wave].iter().enumerate() {
                                if tv >> i & 1 == 1 {
                                    tile.set(slot, lane, true);
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut write = StepCost::zero();
        if plan.geometry.variant.is_transposed() {
            for b in 0..b_planes {
                for ti in 0..plan.share {
                    let slot = map.inputs[b][ti];
                    let image = Mask::from_words(input_planes[b * plan.share + ti].clone(), lanes);
                    write += tile.write_row(slot, &image)?;
                }
            }
        } else {
            let slots = tile.slots();
            let cells: Vec<usize> = map.inputs.iter().flatten().copied().collect();
            let cols = Mask::from_indices(slots, cells.iter().copied());
            for lane in 0..plan.groups_per_tile * plan.g {
                let ones = cells
                    .iter()
                    .enumerate()
                    .filter(|(n, _)| input_planes[*n][lane / 64] >> (lane % 64) & 1 == 1)
                    .map(|(_, &s)| s);
                let bits = Mask::from_indices(slots, ones);
                write += tile.execute(&MicroOp::Write {
                    row: lane,
                    data: WriteData::Scatter {
                        cols: ColumnSet::Mask(cols.clone()),
                        bits,
                    },
                })?;
            }
        }

        let compute = tile.run(&plan.program.ops)?;

        let mut read = StepCost::zero();
        let mut outputs = Vec::new();
        let groups_here: Vec<(usize, usize)> = (0..plan.groups_per_tile)
            .map(|q| (q, t * plan.groups_per_tile + q))
            .filter(|&(_, j)| j < plan.groups_per_wave)
            .collect();
        if plan.geometry.variant.is_transposed() {
            for wave in 0..plan.sigma {
                let mut acc: Vec<(usize, u64)> = groups_here
                    .iter()
                    .filter_map(|&(q, j)| plan.output_index(wave, j).map(|i| (q, i)))
                    .map(|(q, i)| (q * plan.g, i as u64))
                    .collect();
                if acc.is_empty() {
                    continue;
                }
                let mut vals = vec![0u64; acc.len()];
                for (bit, &slot) in map.outputs[wave].iter().enumerate() {
                    if map.is_const(slot) {
                        continue;
                    }
                    let (row, c) = tile.read_row(slot)?;
                    read += c;
                    for (n, &(lane, _)) in acc.iter().enumerate() {
                        if row.get(lane) {
                            vals[n] |= 1 << bit;
                        }
                    }
                }
                for (n, (_, i)) in acc.drain(..).enumerate() {
                    outputs.push((i as usize, vals[n]));
                }
            }
        } else {
            for &(q, j) in &groups_here {
                let lane = q * plan.g;
                let held: Vec<(usize, usize)> = (0..plan.sigma)
                    .filter_map(|w| plan.output_index(w, j).map(|i| (w, i)))
                    .collect();
                if held.is_empty() {
                    continue;
                }
                let (row, c) = tile.read_row(lane)?;
                read += c;
                for (w, i) in held {
                    let v = map.outputs[w]
                        .iter()
                        .enumerate()
                        .filter(|(_, &s)| !map.is_const(s) && row.get(s))
                        .fold(0u64, |acc, (bit, _)| acc | 1 << bit);
                    outputs.push((i, v));
                }
            }
        }
        Ok(TileRun {
            write,
            compute,
            read,
            outputs,
        })
    }
}

/// Compiles and simulates in one call with seeded weights.
pub fn simulate_seeded<T: Scalar>(net: &NetworkSpec, tile: &TileConfig<T>, weight_seed: u64, input: &[u64]) -> Result<(CostReport<T>, Vec<u64>), SimError> {
    let weights = Arc::new(Weights::seeded(net, weight_seed));
    let sim = Simulator::new(net, weights, tile, &CompileOptions::default(), SimOptions::default())?;
    sim.run_single_pass(input)
}
