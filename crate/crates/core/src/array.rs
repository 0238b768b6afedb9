//! Tile model: bit state, micro-op execution and per-op latency/energy.
//!
//! Cells are addressed by `(slot, lane)`. A gate combines cells in several
//! slots of the same lane and is applied to any set of lanes at once. The
//! physical orientation depends on the cell variant: in the transposed 1T
//! design a slot is a row and a lane is a column, in the 3T (and 2T) design
//! a slot is a column and a lane is a row. Memory reads and writes are always
//! whole physical rows.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{words_for, Mask};
use crate::device::{MtjSpec, MtjState};
use crate::gate::{GateElectrics, GateKind};
use crate::num::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellVariant {
    /// One access transistor, logic along columns, inputs and output on
    /// bitlines of opposite parity.
    OneTTransposed,
    /// Three access transistors, logic along rows.
    ThreeT,
    /// Two access transistors; logic must span every row at once.
    TwoT,
}

impl CellVariant {
    /// Physical `(row, col)` of a `(slot, lane)` cell.
    pub fn physical(self, slot: usize, lane: usize) -> (usize, usize) {
        match self {
            CellVariant::OneTTransposed => (slot, lane),
            CellVariant::ThreeT | CellVariant::TwoT => (lane, slot),
        }
    }

    pub fn is_transposed(self) -> bool {
        matches!(self, CellVariant::OneTTransposed)
    }
}

impl FromStr for CellVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "1t" | "1t1m" | "one-t-transposed" => Ok(CellVariant::OneTTransposed),
            "3t" | "3t1m" | "three-t" => Ok(CellVariant::ThreeT),
            "2t" | "2t1m" | "two-t" => Ok(CellVariant::TwoT),
            _ => Err(format!("unknown cell variant `{s}`")),
        }
    }
}

/// Latency and energy charged by decoders, drivers and latches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", deny_unknown_fields)]
pub struct PeripheralModel<T> {
    pub enabled: bool,
    pub row_activate_latency: T,
    pub row_activate_energy: T,
    pub gate_issue_latency: T,
    pub gate_issue_energy: T,
    /// Bitline capacitance charged to the gate voltage in every active lane.
    pub lane_drive_capacitance: T,
    pub read_latency: T,
    pub read_energy: T,
    /// Sense-amplifier energy per cell read.
    pub sense_energy: T,
    pub write_latency: T,
    pub write_energy: T,
    /// Driver energy per cell written.
    pub write_driver_energy: T,
}

const PERIPHERAL_MODERN: &str = include_str!("../configs/peripheral-modern.toml");
const PERIPHERAL_FUTURE: &str = include_str!("../configs/peripheral-future.toml");

impl<T: Scalar> PeripheralModel<T> {
    /// Shipped constants for a built-in junction (`modern` or `future`).
    pub fn builtin(device: &str) -> Result<Self, ArrayError> {
        let text = match device {
            "modern" | "M" => PERIPHERAL_MODERN,
            "future" | "future-printed" | "F" => PERIPHERAL_FUTURE,
            other => return Err(ArrayError::InvalidConfig(format!("no peripheral constants for device `{other}`"))),
        };
        Self::from_toml_str(text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ArrayError> {
        let model: Self = toml::from_str(text).map_err(|e| ArrayError::InvalidConfig(format!("peripheral model: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("peripheral model serializes")
    }

    /// No peripheral overhead.
    pub fn ideal() -> Self {
        let z = T::zero();
        PeripheralModel {
            enabled: false,
            row_activate_latency: z,
            row_activate_energy: z,
            gate_issue_latency: z,
            gate_issue_energy: z,
            lane_drive_capacitance: z,
            read_latency: z,
            read_energy: z,
            sense_energy: z,
            write_latency: z,
            write_energy: z,
            write_driver_energy: z,
        }
    }

    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    fn fields(&self) -> [(&'static str, T); 11] {
        [
            ("row_activate_latency", self.row_activate_latency),
            ("row_activate_energy", self.row_activate_energy),
            ("gate_issue_latency", self.gate_issue_latency),
            ("gate_issue_energy", self.gate_issue_energy),
            ("lane_drive_capacitance", self.lane_drive_capacitance),
            ("read_latency", self.read_latency),
            ("read_energy", self.read_energy),
            ("sense_energy", self.sense_energy),
            ("write_latency", self.write_latency),
            ("write_energy", self.write_energy),
            ("write_driver_energy", self.write_driver_energy),
        ]
    }

    pub fn validate(&self) -> Result<(), ArrayError> {
        for (name, v) in self.fields() {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(ArrayError::InvalidConfig(format!("peripheral {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> PeripheralModel<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        PeripheralModel {
            enabled: self.enabled,
            row_activate_latency: c(self.row_activate_latency),
            row_activate_energy: c(self.row_activate_energy),
            gate_issue_latency: c(self.gate_issue_latency),
            gate_issue_energy: c(self.gate_issue_energy),
            lane_drive_capacitance: c(self.lane_drive_capacitance),
            read_latency: c(self.read_latency),
            read_energy: c(self.read_energy),
            sense_energy: c(self.sense_energy),
            write_latency: c(self.write_latency),
            write_energy: c(self.write_energy),
            write_driver_energy: c(self.write_driver_energy),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TileConfig<T> {
    pub rows: usize,
    pub cols: usize,
    pub variant: CellVariant,
    pub mtj: MtjSpec<T>,
    pub peripheral: PeripheralModel<T>,
    /// Series resistance of the access path, included in gate windows.
    #[serde(default)]
    pub parasitic: T,
}

impl<T: Scalar> TileConfig<T> {
    pub fn new(rows: usize, cols: usize, variant: CellVariant, mtj: MtjSpec<T>) -> Self {
        TileConfig {
            rows,
            cols,
            variant,
            mtj,
            peripheral: PeripheralModel::ideal(),
            parasitic: T::zero(),
        }
    }

    pub fn square(size: usize, variant: CellVariant, mtj: MtjSpec<T>) -> Self {
        Self::new(size, size, variant, mtj)
    }

    pub fn with_peripheral(mut self, peripheral: PeripheralModel<T>) -> Self {
        self.peripheral = peripheral;
        self
    }

    pub fn capacity_bytes(&self) -> u64 {
        (self.rows as u64 * self.cols as u64) / 8
    }

    /// Cells per lane.
    pub fn slots(&self) -> usize {
        if self.variant.is_transposed() {
            self.rows
        } else {
            self.cols
        }
    }

    /// Number of lanes a gate can be applied across.
    pub fn lanes(&self) -> usize {
        if self.variant.is_transposed() {
            self.cols
        } else {
            self.rows
        }
    }

    pub fn validate(&self) -> Result<(), ArrayError> {
        for (name, v) in [("rows", self.rows), ("cols", self.cols)] {
            if v < 2 || !v.is_power_of_two() {
                return Err(ArrayError::InvalidConfig(format!("{name} must be a power of two >= 2, got {v}")));
            }
        }
        self.mtj
            .validate()
            .map_err(|e| ArrayError::InvalidConfig(e.to_string()))?;
        self.peripheral.validate()?;
        if !(self.parasitic >= T::zero()) {
            return Err(ArrayError::InvalidConfig("parasitic resistance must be nonnegative".into()));
        }
        Ok(())
    }

    /// Validates the configuration and derives the gate electrics shared by
    /// every tile built from it.
    pub fn context(&self) -> Result<Arc<TileContext<T>>, ArrayError> {
        self.validate()?;
        let electrics = GateKind::ALL.map(|g| GateElectrics::derive(g, &self.mtj, self.parasitic));
        let read_i = self.mtj.i_c * T::lit(READ_CURRENT_FACTOR);
        let read_cell = [MtjState::Parallel, MtjState::AntiParallel]
            .map(|s| read_i * read_i * self.mtj.resistance(s) * self.mtj.t_switch);
        let write_flip = [MtjState::Parallel, MtjState::AntiParallel].map(|s| self.mtj.write_energy(s));
        Ok(Arc::new(TileContext {
            cfg: self.clone(),
            electrics,
            read_cell,
            write_flip,
        }))
    }
}

/// Sense current as a fraction of the threshold current.
pub const READ_CURRENT_FACTOR: f64 = 0.5;

/// Configuration plus derived per-gate electrics.
#[derive(Debug)]
pub struct TileContext<T> {
    pub cfg: TileConfig<T>,
    electrics: [Option<GateElectrics<T>>; 7],
    read_cell: [T; 2],
    write_flip: [T; 2],
}

impl<T: Scalar> TileContext<T> {
    pub fn electrics(&self, gate: GateKind) -> Option<&GateElectrics<T>> {
        let idx = GateKind::ALL.iter().position(|&g| g == gate).expect("gate listed");
        self.electrics[idx].as_ref()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArrayError {
    #[error("placement violation: {0}")]
    Placement(String),
    #[error("gate {0} has no feasible voltage window for this device")]
    InfeasibleGate(GateKind),
    #[error("{what} index {index} out of bounds (limit {limit})")]
    OutOfBounds { what: &'static str, index: usize, limit: usize },
    #[error("output cell (slot {slot}, lane {lane}) does not hold the gate preset")]
    OutputNotPreset { slot: usize, lane: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported micro-op: {0}")]
    Unsupported(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Cost<T> {
    pub latency: T,
    pub energy: T,
}

impl<T: Scalar> Cost<T> {
    pub fn new(latency: T, energy: T) -> Self {
        Cost { latency, energy }
    }

    pub fn zero() -> Self {
        Cost::new(T::zero(), T::zero())
    }

    pub fn scale(self, k: T) -> Self {
        Cost::new(self.latency * k, self.energy * k)
    }
}

impl<T: Scalar> std::ops::Add for Cost<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Cost::new(self.latency + o.latency, self.energy + o.energy)
    }
}

impl<T: Scalar> std::ops::AddAssign for Cost<T> {
    fn add_assign(&mut self, o: Self) {
        self.latency += o.latency;
        self.energy += o.energy;
    }
}

/// Cost of one or more micro-ops, split into device and peripheral shares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StepCost<T> {
    pub device: Cost<T>,
    pub peripheral: Cost<T>,
}

impl<T: Scalar> StepCost<T> {
    pub fn zero() -> Self {
        StepCost {
            device: Cost::zero(),
            peripheral: Cost::zero(),
        }
    }

    pub fn total(&self) -> Cost<T> {
        self.device + self.peripheral
    }

    pub fn latency(&self) -> T {
        self.device.latency + self.peripheral.latency
    }

    pub fn energy(&self) -> T {
        self.device.energy + self.peripheral.energy
    }

    pub fn scale(self, k: T) -> Self {
        StepCost {
            device: self.device.scale(k),
            peripheral: self.peripheral.scale(k),
        }
    }
}

impl<T: Scalar> std::ops::Add for StepCost<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        StepCost {
            device: self.device + o.device,
            peripheral: self.peripheral + o.peripheral,
        }
    }
}

impl<T: Scalar> std::ops::AddAssign for StepCost<T> {
    fn add_assign(&mut self, o: Self) {
        self.device += o.device;
        self.peripheral += o.peripheral;
    }
}

impl<T: Scalar> std::iter::Sum for StepCost<T> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(StepCost::zero(), |a, b| a + b)
    }
}

/// Physical column selection of a row write.
#[derive(Clone, Debug, PartialEq)]
pub enum ColumnSet {
    All,
    Single(usize),
    Mask(Mask),
}

#[derive(Clone, Debug, PartialEq)]
pub enum WriteData {
    Fill { cols: ColumnSet, value: bool },
    /// `bits` is a full-width row image; only columns in `cols` are written.
    Scatter { cols: ColumnSet, bits: Mask },
    /// Writes bits latched by the last `Read`, `(source col, destination col)`.
    FromBuffer { moves: Arc<[(u32, u32)]> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateEval {
    pub gate: GateKind,
    pub inputs: Vec<usize>,
    pub output: usize,
    pub lanes: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MicroOp {
    Gate(GateEval),
    RowActivate { rows: Vec<usize> },
    Read { row: usize },
    Write { row: usize, data: WriteData },
    /// Record of an inter-tile move; executed by [`transfer`], never by a
    /// single tile.
    InterTileTransfer { src_tile: usize, src_row: usize, dst_tile: usize, dst_row: usize, bits: usize },
}

impl MicroOp {
    pub fn is_gate(&self) -> bool {
        matches!(self, MicroOp::Gate(_))
    }
}

/// Bit state of one tile plus its activation latches and row buffer.
#[derive(Clone, Debug)]
pub struct Tile<T: Scalar> {
    ctx: Arc<TileContext<T>>,
    planes: Vec<Vec<u64>>,
    latched: Vec<u64>,
    buffer: Vec<u64>,
}

impl<T: Scalar> Tile<T> {
    pub fn new(ctx: Arc<TileContext<T>>) -> Self {
        let slots = ctx.cfg.slots();
        let lanes = ctx.cfg.lanes();
        Tile {
            planes: vec![vec![0; words_for(lanes)]; slots],
            latched: vec![0; words_for(ctx.cfg.rows)],
            buffer: vec![0; words_for(ctx.cfg.cols)],
            ctx,
        }
    }

    pub fn config(&self) -> &TileConfig<T> {
        &self.ctx.cfg
    }

    pub fn context(&self) -> &Arc<TileContext<T>> {
        &self.ctx
    }

    pub fn slots(&self) -> usize {
        self.planes.len()
    }

    pub fn lanes(&self) -> usize {
        self.ctx.cfg.lanes()
    }

    /// Uncosted setup access.
    pub fn get(&self, slot: usize, lane: usize) -> bool {
        self.planes[slot][lane / 64] >> (lane % 64) & 1 == 1
    }

    /// Uncosted setup access, used to preload weights and constants.
    pub fn set(&mut self, slot: usize, lane: usize, bit: bool) {
        let w = &mut self.planes[slot][lane / 64];
        if bit {
            *w |= 1 << (lane % 64);
        } else {
            *w &= !(1 << (lane % 64));
        }
    }

    /// Uncosted setup: sets `slot` to `bit` in every lane.
    pub fn fill_slot(&mut self, slot: usize, bit: bool) {
        let lanes = self.lanes();
        let fill = if bit { u64::MAX } else { 0 };
        for w in self.planes[slot].iter_mut() {
            *w = fill;
        }
        if bit && lanes % 64 != 0 {
            *self.planes[slot].last_mut().expect("nonempty") &= (1 << (lanes % 64)) - 1;
        }
    }

    /// Uncosted setup: replaces a whole slot plane, one bit per lane.
    pub fn set_plane(&mut self, slot: usize, words: &[u64]) {
        let plane = &mut self.planes[slot];
        assert_eq!(words.len(), plane.len(), "plane width");
        plane.copy_from_slice(words);
        let lanes = self.ctx.cfg.lanes();
        if lanes % 64 != 0 {
            *plane.last_mut().expect("nonempty") &= (1 << (lanes % 64)) - 1;
        }
    }

    pub fn slot_plane(&self, slot: usize) -> &[u64] {
        &self.planes[slot]
    }

    pub fn latched_rows(&self) -> Vec<usize> {
        Mask::from_words(self.latched.clone(), self.ctx.cfg.rows).iter_ones().collect()
    }

    fn bound(what: &'static str, index: usize, limit: usize) -> Result<(), ArrayError> {
        if index < limit {
            Ok(())
        } else {
            Err(ArrayError::OutOfBounds { what, index, limit })
        }
    }

    pub fn run(&mut self, ops: &[MicroOp]) -> Result<StepCost<T>, ArrayError> {
        let mut total = StepCost::zero();
        for op in ops {
            total += self.execute(op)?;
        }
        Ok(total)
    }

    /// Executes `ops`, returning the cost of each.
    pub fn run_traced(&mut self, ops: &[MicroOp]) -> Result<Vec<StepCost<T>>, ArrayError> {
        ops.iter().map(|op| self.execute(op)).collect()
    }

    pub fn execute(&mut self, op: &MicroOp) -> Result<StepCost<T>, ArrayError> {
        match op {
            MicroOp::Gate(g) => self.exec_gate(g),
            MicroOp::RowActivate { rows } => self.exec_activate(rows),
            MicroOp::Read { row } => self.read_row(*row).map(|(_, c)| c),
            MicroOp::Write { row, data } => self.exec_write(*row, data),
            MicroOp::InterTileTransfer { .. } => Err(ArrayError::Unsupported(
                "inter-tile transfers span two tiles; use array::transfer".into(),
            )),
        }
    }

    fn peripheral_on(&self) -> bool {
        self.ctx.cfg.peripheral.enabled
    }

    fn exec_activate(&mut self, rows: &[usize]) -> Result<StepCost<T>, ArrayError> {
        let limit = self.ctx.cfg.rows;
        let mut new = 0u64;
        for &r in rows {
            Self::bound("row", r, limit)?;
            let bit = 1u64 << (r % 64);
            if self.latched[r / 64] & bit == 0 {
                self.latched[r / 64] |= bit;
                new += 1;
            }
        }
        let mut cost = StepCost::zero();
        if self.peripheral_on() {
            let p = &self.ctx.cfg.peripheral;
            let n = T::count(new);
            cost.peripheral = Cost::new(p.row_activate_latency * n, p.row_activate_energy * n);
        }
        Ok(cost)
    }

    /// Checks the placement rules of the cell variant for one gate.
    pub fn check_gate(&self, g: &GateEval) -> Result<(), ArrayError> {
        check_gate_placement(self.ctx.cfg.variant, self.slots(), self.lanes(), g)
    }

    fn exec_gate(&mut self, g: &GateEval) -> Result<StepCost<T>, ArrayError> {
        self.check_gate(g)?;
        let ctx = Arc::clone(&self.ctx);
        let el = ctx.electrics(g.gate).ok_or(ArrayError::InfeasibleGate(g.gate))?;
        let k = g.gate.fan_in();
        let preset = if g.gate.output_preset() { u64::MAX } else { 0 };
        let mask = g.lanes.words();

        for (w, &m) in mask.iter().enumerate() {
            let bad = (self.planes[g.output][w] ^ preset) & m;
            if bad != 0 {
                return Err(ArrayError::OutputNotPreset {
                    slot: g.output,
                    lane: w * 64 + bad.trailing_zeros() as usize,
                });
            }
        }

        let mut truth = [false; 6];
        for (v, t) in truth.iter_mut().enumerate().take(k + 1) {
            let inputs = [0, 1, 2, 3, 4].map(|j| j < v);
            *t = g.gate.eval(&inputs[..k]);
        }
        let mut counts = [0u64; 6];
        for (w, &m) in mask.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let sel = |t: bool, x: u64| if t { x } else { 0 };
            if k <= 2 {
                let a = self.planes[g.inputs[0]][w];
                let by = if k == 2 {
                    let b = self.planes[g.inputs[1]][w];
                    [!(a | b) & m, (a ^ b) & m, a & b & m]
                } else {
                    [!a & m, a & m, 0]
                };
                let mut result = 0u64;
                for v in 0..=k {
                    counts[v] += by[v].count_ones() as u64;
                    result |= sel(truth[v], by[v]);
                }
                let out = &mut self.planes[g.output][w];
                *out = (*out & !m) | result;
                continue;
            }
            // Bit-sliced count of ones across the inputs.
            let mut c = [0u64; 3];
            for &s in &g.inputs {
                let x = self.planes[s][w];
                let c0 = c[0] & x;
                c[0] ^= x;
                let c1 = c[1] & c0;
                c[1] ^= c0;
                c[2] ^= c1;
            }
            let mut result = 0u64;
            for (v, &t) in truth.iter().enumerate().take(k + 1) {
                let pick = |bit: usize, plane: u64| if v >> bit & 1 == 1 { plane } else { !plane };
                let eq = pick(0, c[0]) & pick(1, c[1]) & pick(2, c[2]) & m;
                counts[v] += eq.count_ones() as u64;
                if t {
                    result |= eq;
                }
            }
            let out = &mut self.planes[g.output][w];
            *out = (*out & !m) | result;
        }

        let mut device_energy = T::zero();
        for (v, &n) in counts.iter().enumerate().take(k + 1) {
            if n > 0 {
                device_energy += el.energy_by_ap_inputs[v] * T::count(n);
            }
        }
        let mut cost = StepCost {
            device: Cost::new(ctx.cfg.mtj.t_switch, device_energy),
            peripheral: Cost::zero(),
        };

        let new_rows = self.latch_for_gate(g);
        if self.peripheral_on() {
            let p = &ctx.cfg.peripheral;
            let lanes = T::count(g.lanes.count() as u64);
            let acts = T::count(new_rows);
            let v = el.window.signature;
            cost.peripheral = Cost::new(
                p.gate_issue_latency + acts * p.row_activate_latency,
                p.gate_issue_energy + acts * p.row_activate_energy + lanes * p.lane_drive_capacitance * v * v,
            );
        }
        Ok(cost)
    }

    /// Updates the activation latches for a gate and returns how many rows
    /// had to be newly activated. Rows are addressed sequentially.
    fn latch_for_gate(&mut self, g: &GateEval) -> u64 {
        match self.ctx.cfg.variant {
            CellVariant::OneTTransposed => {
                let rows = || g.inputs.iter().chain(std::iter::once(&g.output));
                let new = rows()
                    .filter(|&&r| self.latched[r / 64] >> (r % 64) & 1 == 0)
                    .count() as u64;
                self.latched.iter_mut().for_each(|w| *w = 0);
                for &r in rows() {
                    self.latched[r / 64] |= 1 << (r % 64);
                }
                new
            }
            CellVariant::ThreeT | CellVariant::TwoT => {
                let mut new = 0u64;
                for (l, &m) in self.latched.iter_mut().zip(g.lanes.words()) {
                    new += (m & !*l).count_ones() as u64;
                    *l = m;
                }
                new
            }
        }
    }

    fn clear_latches_on_access(&mut self) {
        // The transposed design shares wordlines between memory access and
        // logic, so any access drops the logic latches.
        if self.ctx.cfg.variant.is_transposed() {
            self.latched.iter_mut().for_each(|w| *w = 0);
        }
    }

    /// Reads one physical row and latches it into the row buffer.
    pub fn read_row(&mut self, row: usize) -> Result<(Mask, StepCost<T>), ArrayError> {
        let cfg = &self.ctx.cfg;
        Self::bound("row", row, cfg.rows)?;
        let bits = match cfg.variant {
            CellVariant::OneTTransposed => self.planes[row].clone(),
            CellVariant::ThreeT | CellVariant::TwoT => {
                let mut words = vec![0u64; words_for(cfg.cols)];
                for (s, plane) in self.planes.iter().enumerate() {
                    if plane[row / 64] >> (row % 64) & 1 == 1 {
                        words[s / 64] |= 1 << (s % 64);
                    }
                }
                words
            }
        };
        let row_bits = Mask::from_words(bits.clone(), cfg.cols);
        let ones = row_bits.count() as u64;
        let zeros = cfg.cols as u64 - ones;
        let device_energy = self.ctx.read_cell[0] * T::count(zeros) + self.ctx.read_cell[1] * T::count(ones);
        let mut cost = StepCost {
            device: Cost::new(cfg.mtj.t_switch, device_energy),
            peripheral: Cost::zero(),
        };
        if cfg.peripheral.enabled {
            let p = &cfg.peripheral;
            cost.peripheral = Cost::new(p.read_latency, p.read_energy + p.sense_energy * T::count(cfg.cols as u64));
        }
        self.buffer = bits;
        self.clear_latches_on_access();
        Ok((row_bits, cost))
    }

    /// Overwrites a whole physical row.
    pub fn write_row(&mut self, row: usize, bits: &Mask) -> Result<StepCost<T>, ArrayError> {
        if bits.len() != self.ctx.cfg.cols {
            return Err(ArrayError::ShapeMismatch(format!(
                "row image has {} bits, tile has {} columns",
                bits.len(),
                self.ctx.cfg.cols
            )));
        }
        self.exec_write(
            row,
            &WriteData::Scatter {
                cols: ColumnSet::All,
                bits: bits.clone(),
            },
        )
    }

    fn column_mask(&self, cols: &ColumnSet) -> Result<Mask, ArrayError> {
        let n = self.ctx.cfg.cols;
        match cols {
            ColumnSet::All => Ok(Mask::full(n)),
            ColumnSet::Single(c) => {
                Self::bound("column", *c, n)?;
                Ok(Mask::single(n, *c))
            }
            ColumnSet::Mask(m) if m.len() == n => Ok(m.clone()),
            ColumnSet::Mask(m) => Err(ArrayError::ShapeMismatch(format!(
                "column mask has {} bits, tile has {n} columns",
                m.len()
            ))),
        }
    }

    /// Fill of a transposed row without building intermediate images.
    fn fill_row_fast(&mut self, row: usize, cols: &ColumnSet, value: bool) -> Result<StepCost<T>, ArrayError> {
        let ctx = Arc::clone(&self.ctx);
        let cfg = &ctx.cfg;
        let n = cfg.cols;
        let fill = if value { u64::MAX } else { 0 };
        let plane = &mut self.planes[row];
        let mut changed_total = 0u64;
        let mut count = 0u64;
        let mut apply = |w: usize, m: u64| {
            let old = plane[w];
            let new = (old & !m) | (fill & m);
            changed_total += (old ^ new).count_ones() as u64;
            count += m.count_ones() as u64;
            plane[w] = new;
        };
        match cols {
            ColumnSet::All => {
                for w in 0..words_for(n) {
                    let m = if (w + 1) * 64 <= n { u64::MAX } else { (1u64 << (n % 64)) - 1 };
                    apply(w, m);
                }
            }
            ColumnSet::Single(c) => {
                Self::bound("column", *c, n)?;
                apply(c / 64, 1 << (c % 64));
            }
            ColumnSet::Mask(m) if m.len() == n => {
                for (w, &mw) in m.words().iter().enumerate() {
                    if mw != 0 {
                        apply(w, mw);
                    }
                }
            }
            ColumnSet::Mask(m) => {
                return Err(ArrayError::ShapeMismatch(format!(
                    "column mask has {} bits, tile has {n} columns",
                    m.len()
                )))
            }
        }
        let (to_ap, to_p) = if value { (changed_total, 0) } else { (0, changed_total) };
        let device_energy = ctx.write_flip[1] * T::count(to_ap) + ctx.write_flip[0] * T::count(to_p);
        let mut cost = StepCost {
            device: Cost::new(cfg.mtj.t_switch, device_energy),
            peripheral: Cost::zero(),
        };
        if cfg.peripheral.enabled {
            let p = &cfg.peripheral;
            cost.peripheral = Cost::new(p.write_latency, p.write_energy + p.write_driver_energy * T::count(count));
        }
        self.clear_latches_on_access();
        Ok(cost)
    }

    fn exec_write(&mut self, row: usize, data: &WriteData) -> Result<StepCost<T>, ArrayError> {
        let ctx = Arc::clone(&self.ctx);
        let cfg = &ctx.cfg;
        Self::bound("row", row, cfg.rows)?;
        if let (CellVariant::OneTTransposed, WriteData::Fill { cols, value }) = (cfg.variant, data) {
            return self.fill_row_fast(row, cols, *value);
        }
        // Target image as (column mask, value words).
        let (cols, values): (Mask, Vec<u64>) = match data {
            WriteData::Fill { cols, value } => {
                let m = self.column_mask(cols)?;
                let fill = if *value { u64::MAX } else { 0 };
                (m, vec![fill; words_for(cfg.cols)])
            }
            WriteData::Scatter { cols, bits } => {
                let m = self.column_mask(cols)?;
                if bits.len() != cfg.cols {
                    return Err(ArrayError::ShapeMismatch(format!(
                        "scatter image has {} bits, tile has {} columns",
                        bits.len(),
                        cfg.cols
                    )));
                }
                (m, bits.words().to_vec())
            }
            WriteData::FromBuffer { moves } => {
                let mut m = vec![0u64; words_for(cfg.cols)];
                let mut v = vec![0u64; words_for(cfg.cols)];
                for &(src, dst) in moves.iter() {
                    let (src, dst) = (src as usize, dst as usize);
                    Self::bound("column", src, cfg.cols)?;
                    Self::bound("column", dst, cfg.cols)?;
                    m[dst / 64] |= 1 << (dst % 64);
                    if self.buffer[src / 64] >> (src % 64) & 1 == 1 {
                        v[dst / 64] |= 1 << (dst % 64);
                    }
                }
                (Mask::from_words(m, cfg.cols), v)
            }
        };

        let (mut to_ap, mut to_p) = (0u64, 0u64);
        match cfg.variant {
            CellVariant::OneTTransposed => {
                let plane = &mut self.planes[row];
                for (w, (&m, &v)) in cols.words().iter().zip(&values).enumerate() {
                    let old = plane[w];
                    let new = (old & !m) | (v & m);
                    let changed = old ^ new;
                    to_ap += (changed & new).count_ones() as u64;
                    to_p += (changed & !new).count_ones() as u64;
                    plane[w] = new;
                }
            }
            CellVariant::ThreeT | CellVariant::TwoT => {
                for c in cols.iter_ones() {
                    let new = values[c / 64] >> (c % 64) & 1 == 1;
                    let word = &mut self.planes[c][row / 64];
                    let old = *word >> (row % 64) & 1 == 1;
                    if old != new {
                        if new {
                            to_ap += 1;
                            *word |= 1 << (row % 64);
                        } else {
                            to_p += 1;
                            *word &= !(1 << (row % 64));
                        }
                    }
                }
            }
        }

        let device_energy = self.ctx.write_flip[1] * T::count(to_ap) + self.ctx.write_flip[0] * T::count(to_p);
        let mut cost = StepCost {
            device: Cost::new(cfg.mtj.t_switch, device_energy),
            peripheral: Cost::zero(),
        };
        if cfg.peripheral.enabled {
            let p = &cfg.peripheral;
            cost.peripheral = Cost::new(
                p.write_latency,
                p.write_energy + p.write_driver_energy * T::count(cols.count() as u64),
            );
        }
        self.clear_latches_on_access();
        Ok(cost)
    }
}

/// Placement rules for one gate, independent of tile state.
pub fn check_gate_placement(
    variant: CellVariant,
    slots: usize,
    lanes: usize,
    g: &GateEval,
) -> Result<(), ArrayError> {
    if g.inputs.len() != g.gate.fan_in() {
        return Err(ArrayError::Placement(format!(
            "{} takes {} inputs, got {}",
            g.gate,
            g.gate.fan_in(),
            g.inputs.len()
        )));
    }
    if g.lanes.len() != lanes {
        return Err(ArrayError::ShapeMismatch(format!(
            "lane mask has {} bits, tile has {lanes} lanes",
            g.lanes.len()
        )));
    }
    for &s in g.inputs.iter().chain(std::iter::once(&g.output)) {
        if s >= slots {
            return Err(ArrayError::OutOfBounds { what: "slot", index: s, limit: slots });
        }
    }
    let dup = g
        .inputs
        .iter()
        .enumerate()
        .any(|(i, &a)| a == g.output || g.inputs[..i].contains(&a));
    if dup {
        return Err(ArrayError::Placement(format!("{} uses a cell twice: {:?} -> {}", g.gate, g.inputs, g.output)));
    }
    match variant {
        CellVariant::OneTTransposed => {
            let parity = g.inputs[0] % 2;
            if g.inputs.iter().any(|s| s % 2 != parity) {
                return Err(ArrayError::Placement(format!(
                    "{} inputs {:?} span both bitline parities",
                    g.gate, g.inputs
                )));
            }
            if g.output % 2 == parity {
                return Err(ArrayError::Placement(format!(
                    "{} output row {} shares the input bitline parity",
                    g.gate, g.output
                )));
            }
        }
        CellVariant::ThreeT => {}
        CellVariant::TwoT => {
            if !g.lanes.is_full() {
                return Err(ArrayError::Placement(format!(
                    "2T cells apply logic to every row at once; {} of {} lanes selected",
                    g.lanes.count(),
                    lanes
                )));
            }
        }
    }
    Ok(())
}

/// Post-hoc audit of every gate in a trace.
pub fn audit_trace(variant: CellVariant, slots: usize, lanes: usize, ops: &[MicroOp]) -> Result<(), ArrayError> {
    for (i, op) in ops.iter().enumerate() {
        if let MicroOp::Gate(g) = op {
            check_gate_placement(variant, slots, lanes, g)
                .map_err(|e| ArrayError::Placement(format!("op {i}: {e}")))?;
        }
    }
    Ok(())
}

/// Moves whole rows between tiles: each source row is read and then written
/// to the matching destination row, with no overlap credit.
pub fn transfer<T: Scalar>(
    src: &mut Tile<T>,
    src_rows: &[usize],
    dst: &mut Tile<T>,
    dst_rows: &[usize],
) -> Result<StepCost<T>, ArrayError> {
    if src_rows.len() != dst_rows.len() {
        return Err(ArrayError::ShapeMismatch(format!(
            "{} source rows vs {} destination rows",
            src_rows.len(),
            dst_rows.len()
        )));
    }
    if src.config().cols != dst.config().cols {
        return Err(ArrayError::ShapeMismatch(format!(
            "source rows have {} columns, destination rows {}",
            src.config().cols,
            dst.config().cols
        )));
    }
    let mut total = StepCost::zero();
    for (&s, &d) in src_rows.iter().zip(dst_rows) {
        let (bits, c) = src.read_row(s)?;
        total += c;
        total += dst.write_row(d, &bits)?;
    }
    Ok(total)
}

fn fmt_cols(cols: &ColumnSet) -> String {
    match cols {
        ColumnSet::All => "all".into(),
        ColumnSet::Single(c) => c.to_string(),
        ColumnSet::Mask(m) => format!("m{}", m.to_hex()),
    }
}

fn parse_cols(s: &str) -> Result<ColumnSet, String> {
    if s == "all" {
        Ok(ColumnSet::All)
    } else if let Some(hex) = s.strip_prefix('m') {
        Ok(ColumnSet::Mask(Mask::parse_hex(hex)?))
    } else {
        s.parse().map(ColumnSet::Single).map_err(|e| format!("column `{s}`: {e}"))
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|e| format!("`{x}`: {e}")))
        .collect()
}

impl fmt::Display for MicroOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MicroOp::Gate(g) => write!(
                f,
                "gate {} {} -> {} lanes={}",
                g.gate,
                join(&g.inputs),
                g.output,
                g.lanes.to_hex()
            ),
            MicroOp::RowActivate { rows } => write!(f, "activate {}", join(rows)),
            MicroOp::Read { row } => write!(f, "read {row}"),
            MicroOp::Write { row, data } => match data {
                WriteData::Fill { cols, value } => {
                    write!(f, "write {row} fill {} cols={}", u8::from(*value), fmt_cols(cols))
                }
                WriteData::Scatter { cols, bits } => {
                    write!(f, "write {row} scatter {} cols={}", bits.to_hex(), fmt_cols(cols))
                }
                WriteData::FromBuffer { moves } => {
                    let m: Vec<String> = moves.iter().map(|(s, d)| format!("{s}>{d}")).collect();
                    write!(f, "write {row} buffer {}", m.join(","))
                }
            },
            MicroOp::InterTileTransfer { src_tile, src_row, dst_tile, dst_row, bits } => {
                write!(f, "xfer {src_tile}:{src_row} -> {dst_tile}:{dst_row} bits={bits}")
            }
        }
    }
}

impl FromStr for MicroOp {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let t: Vec<&str> = line.split_whitespace().collect();
        let field = |i: usize| t.get(i).copied().ok_or_else(|| format!("truncated trace line `{line}`"));
        let num = |i: usize| -> Result<usize, String> {
            field(i)?.parse().map_err(|e| format!("`{line}`: {e}"))
        };
        match field(0)? {
            "gate" => {
                let gate: GateKind = field(1)?.parse()?;
                let inputs = parse_list(field(2)?)?;
                if field(3)? != "->" {
                    return Err(format!("`{line}`: expected `->`"));
                }
                let output = num(4)?;
                let lanes = field(5)?
                    .strip_prefix("lanes=")
                    .ok_or_else(|| format!("`{line}`: expected lanes="))?;
                Ok(MicroOp::Gate(GateEval {
                    gate,
                    inputs,
                    output,
                    lanes: Mask::parse_hex(lanes)?,
                }))
            }
            "activate" => Ok(MicroOp::RowActivate {
                rows: parse_list(t.get(1).copied().unwrap_or(""))?,
            }),
            "read" => Ok(MicroOp::Read { row: num(1)? }),
            "write" => {
                let row = num(1)?;
                let cols = |i: usize| -> Result<ColumnSet, String> {
                    parse_cols(field(i)?.strip_prefix("cols=").ok_or_else(|| format!("`{line}`: expected cols="))?)
                };
                let data = match field(2)? {
                    "fill" => WriteData::Fill {
                        value: field(3)? == "1",
                        cols: cols(4)?,
                    },
                    "scatter" => WriteData::Scatter {
                        bits: Mask::parse_hex(field(3)?)?,
                        cols: cols(4)?,
                    },
                    "buffer" => {
                        let moves = t
                            .get(3)
                            .copied()
                            .unwrap_or("")
                            .split(',')
                            .filter(|s| !s.is_empty())
                            .map(|p| {
                                let (s, d) = p.split_once('>').ok_or_else(|| format!("move `{p}`"))?;
                                Ok((
                                    s.parse().map_err(|e| format!("move `{p}`: {e}"))?,
                                    d.parse().map_err(|e| format!("move `{p}`: {e}"))?,
                                ))
                            })
                            .collect::<Result<Vec<(u32, u32)>, String>>()?;
                        WriteData::FromBuffer { moves: moves.into() }
                    }
                    other => return Err(format!("unknown write mode `{other}`")),
                };
                Ok(MicroOp::Write { row, data })
            }
            "xfer" => {
                let pair = |s: &str| -> Result<(usize, usize), String> {
                    let (a, b) = s.split_once(':').ok_or_else(|| format!("`{s}`: expected tile:row"))?;
                    Ok((a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?))
                };
                let (src_tile, src_row) = pair(field(1)?)?;
                let (dst_tile, dst_row) = pair(field(3)?)?;
                let bits = field(4)?
                    .strip_prefix("bits=")
                    .ok_or_else(|| format!("`{line}`: expected bits="))?
                    .parse()
                    .map_err(|e| format!("{e}"))?;
                Ok(MicroOp::InterTileTransfer { src_tile, src_row, dst_tile, dst_row, bits })
            }
            other => Err(format!("unknown micro-op `{other}`")),
        }
    }
}

/// One line per micro-op, optionally followed by its latency and energy.
pub fn dump_trace<T: Scalar>(ops: &[MicroOp], costs: Option<&[StepCost<T>]>) -> String {
    let mut out = String::new();
    for (i, op) in ops.iter().enumerate() {
        out.push_str(&op.to_string());
        if let Some(c) = costs.and_then(|c| c.get(i)) {
            out.push_str(&format!(" ; lat={:e} en={:e}", c.latency(), c.energy()));
        }
        out.push('\n');
    }
    out
}

pub fn parse_trace(text: &str) -> Result<Vec<MicroOp>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let body = l.split(';').next().unwrap_or("");
            body.parse().map_err(|e| format!("line {}: {e}", i + 1))
        })
        .collect()
}
