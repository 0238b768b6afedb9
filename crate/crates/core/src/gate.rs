//! In-array logic gates: truth tables and resistive-divider electrical windows.
//!
//! A gate is formed by connecting its input junctions in parallel, in series
//! with a preset output junction, and driving the chain with a bitline
//! voltage. The output switches iff the current reaches `i_c`. For a given
//! gate the feasible voltages are those that switch the output for every
//! input combination whose truth-table output differs from the preset, and
//! leave it alone for every other combination.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::device::{MtjSpec, MtjState};
use crate::num::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GateKind {
    Not,
    Copy,
    Nand,
    Nor,
    /// Three-input NAND, used by the borrow chain of the threshold kernel.
    Nand3,
    /// Inverted 3-input majority.
    Imaj3,
    /// Inverted 5-input majority.
    Imaj5,
}

impl GateKind {
    pub const ALL: [GateKind; 7] = [
        GateKind::Not,
        GateKind::Copy,
        GateKind::Nand,
        GateKind::Nor,
        GateKind::Nand3,
        GateKind::Imaj3,
        GateKind::Imaj5,
    ];

    /// The gates with a characterized voltage signature.
    pub const SIGNATURE_TABLE: [GateKind; 5] = [
        GateKind::Not,
        GateKind::Nand,
        GateKind::Nor,
        GateKind::Imaj3,
        GateKind::Imaj5,
    ];

    pub fn fan_in(self) -> usize {
        match self {
            GateKind::Not | GateKind::Copy => 1,
            GateKind::Nand | GateKind::Nor => 2,
            GateKind::Nand3 | GateKind::Imaj3 => 3,
            GateKind::Imaj5 => 5,
        }
    }

    /// Boolean semantics. Panics if `inputs.len() != fan_in()`.
    pub fn eval(self, inputs: &[bool]) -> bool {
        assert_eq!(inputs.len(), self.fan_in(), "{self} takes {} inputs", self.fan_in());
        let ones = inputs.iter().filter(|&&b| b).count();
        let n = inputs.len();
        match self {
            GateKind::Not => !inputs[0],
            GateKind::Copy => inputs[0],
            GateKind::Nand | GateKind::Nand3 => ones != n,
            GateKind::Nor => ones == 0,
            GateKind::Imaj3 | GateKind::Imaj5 => 2 * ones < n,
        }
    }

    /// Value the output junction holds before evaluation. COPY is driven
    /// with reversed polarity from a preset 1; every other gate from 0.
    pub fn output_preset(self) -> bool {
        matches!(self, GateKind::Copy)
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Not => "NOT",
            GateKind::Copy => "COPY",
            GateKind::Nand => "NAND",
            GateKind::Nor => "NOR",
            GateKind::Nand3 => "NAND3",
            GateKind::Imaj3 => "IMAJ3",
            GateKind::Imaj5 => "IMAJ5",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.to_ascii_uppercase().replace(['-', '_'], "");
        GateKind::ALL
            .iter()
            .copied()
            .find(|g| g.name() == up)
            .ok_or_else(|| format!("unknown gate `{s}`"))
    }
}

/// Every input combination of `kind` with its output, combination `i` having
/// input `j` equal to bit `j` of `i`.
pub fn truth_table(kind: GateKind) -> Vec<(Vec<bool>, bool)> {
    let n = kind.fan_in();
    (0..1u32 << n)
        .map(|combo| {
            let inputs: Vec<bool> = (0..n).map(|j| combo >> j & 1 == 1).collect();
            let out = kind.eval(&inputs);
            (inputs, out)
        })
        .collect()
}

/// Inputs in parallel, in series with the output junction and any parasitic
/// series resistance.
#[derive(Clone, Debug, PartialEq)]
pub struct ResistiveNetwork<T> {
    pub input_states: Vec<MtjState>,
    pub output_state: MtjState,
    pub parasitic_series: T,
}

impl<T: Scalar> ResistiveNetwork<T> {
    pub fn new(input_states: Vec<MtjState>, output_state: MtjState) -> Self {
        ResistiveNetwork {
            input_states,
            output_state,
            parasitic_series: T::zero(),
        }
    }

    pub fn with_parasitic(mut self, ohms: T) -> Self {
        self.parasitic_series = ohms;
        self
    }
}

pub fn combined_resistance<T: Scalar>(net: &ResistiveNetwork<T>, spec: &MtjSpec<T>) -> T {
    assert!(!net.input_states.is_empty(), "a resistive network needs an input");
    let conductance: T = net
        .input_states
        .iter()
        .map(|&s| T::one() / spec.resistance(s))
        .sum();
    T::one() / conductance + spec.resistance(net.output_state) + net.parasitic_series
}

/// Feasible bitline-voltage interval of one gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct VoltageWindow<T> {
    pub v_low: T,
    pub v_high: T,
    pub signature: T,
    pub margin: T,
}

impl<T: Scalar> VoltageWindow<T> {
    fn from_bounds(v_low: T, v_high: T) -> Self {
        VoltageWindow {
            v_low,
            v_high,
            signature: (v_low + v_high) / T::lit(2.0),
            margin: v_high - v_low,
        }
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.v_low && v < self.v_high
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateWindow<T> {
    Feasible(VoltageWindow<T>),
    /// The hardest switching combination needs at least `v_low`, but any
    /// voltage at or above `v_high` also switches a combination that must hold.
    Infeasible { v_low: T, v_high: T },
}

impl<T: Scalar> GateWindow<T> {
    pub fn window(&self) -> Option<&VoltageWindow<T>> {
        match self {
            GateWindow::Feasible(w) => Some(w),
            GateWindow::Infeasible { .. } => None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, GateWindow::Feasible(_))
    }
}

fn combo_resistance<T: Scalar>(
    kind: GateKind,
    inputs: &[bool],
    spec: &MtjSpec<T>,
    parasitic: T,
) -> T {
    let net = ResistiveNetwork {
        input_states: inputs.iter().map(|&b| MtjState::from_bit(b)).collect(),
        output_state: MtjState::from_bit(kind.output_preset()),
        parasitic_series: parasitic,
    };
    combined_resistance(&net, spec)
}

/// Largest chain resistance over combinations that must switch the output,
/// smallest over combinations that must not.
fn resistance_bounds<T: Scalar>(kind: GateKind, spec: &MtjSpec<T>, parasitic: T) -> (T, T) {
    let preset = kind.output_preset();
    let mut switch_max = T::neg_infinity();
    let mut block_min = T::infinity();
    for (inputs, out) in truth_table(kind) {
        let r = combo_resistance(kind, &inputs, spec, parasitic);
        if out != preset {
            switch_max = switch_max.max(r);
        } else {
            block_min = block_min.min(r);
        }
    }
    (switch_max, block_min)
}

pub fn voltage_window<T: Scalar>(kind: GateKind, spec: &MtjSpec<T>, parasitic: T) -> GateWindow<T> {
    let (switch_max, block_min) = resistance_bounds(kind, spec, parasitic);
    let v_low = spec.i_c * switch_max;
    let v_high = spec.i_c * block_min;
    if v_low < v_high {
        GateWindow::Feasible(VoltageWindow::from_bounds(v_low, v_high))
    } else {
        GateWindow::Infeasible { v_low, v_high }
    }
}

/// Series resistance at which a gate driven at its parasitic-free signature
/// stops switching its hardest combination. `None` when the gate has no
/// window to begin with.
pub fn parasitic_failure_threshold<T: Scalar>(kind: GateKind, spec: &MtjSpec<T>) -> Option<T> {
    let window = *voltage_window(kind, spec, T::zero()).window()?;
    let (switch_max, _) = resistance_bounds(kind, spec, T::zero());
    Some(window.signature / spec.i_c - switch_max)
}

/// Whether a gate driven at its parasitic-free signature still evaluates
/// correctly with `parasitic` ohms in series.
pub fn operates_at<T: Scalar>(kind: GateKind, spec: &MtjSpec<T>, parasitic: T) -> bool {
    parasitic_failure_threshold(kind, spec).is_some_and(|limit| parasitic <= limit)
}

/// Per-gate electrical summary used by the array cost model.
#[derive(Clone, Debug, PartialEq)]
pub struct GateElectrics<T> {
    pub kind: GateKind,
    pub window: VoltageWindow<T>,
    /// Energy of one evaluation indexed by the number of inputs in the AP
    /// state: `V_sig^2 / R_total * t_switch`.
    pub energy_by_ap_inputs: Vec<T>,
}

impl<T: Scalar> GateElectrics<T> {
    pub fn derive(kind: GateKind, spec: &MtjSpec<T>, parasitic: T) -> Option<Self> {
        let window = *voltage_window(kind, spec, parasitic).window()?;
        let n = kind.fan_in();
        let v = window.signature;
        let energy_by_ap_inputs = (0..=n)
            .map(|ap| {
                let inputs: Vec<bool> = (0..n).map(|j| j < ap).collect();
                let r = combo_resistance(kind, &inputs, spec, parasitic);
                v * v / r * spec.t_switch
            })
            .collect();
        Some(GateElectrics {
            kind,
            window,
            energy_by_ap_inputs,
        })
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn parasitic_shifts_signature_keeps_margin(kind_idx in 0usize..7, parasitic in 0.0f64..50_000.0, future in any::<bool>()) {
            let kind = GateKind::ALL[kind_idx];
            let spec = if future { MtjSpec::<f64>::future() } else { MtjSpec::<f64>::modern() };
            let base = *voltage_window(kind, &spec, 0.0).window().unwrap();
            let shifted = *voltage_window(kind, &spec, parasitic).window().unwrap();
            let tol = 1e-9 * base.v_high.abs().max(1e-3);
            prop_assert!((shifted.margin - base.margin).abs() <= tol);
            prop_assert!((shifted.signature - base.signature - spec.i_c * parasitic).abs() <= tol + 1e-12 * parasitic);
        }

        #[test]
        fn fixed_voltage_feasibility_is_monotone(kind_idx in 0usize..7, a in 0.0f64..40_000.0, b in 0.0f64..40_000.0, future in any::<bool>()) {
            let kind = GateKind::ALL[kind_idx];
            let spec = if future { MtjSpec::<f64>::future() } else { MtjSpec::<f64>::modern() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if !operates_at(kind, &spec, lo) {
                prop_assert!(!operates_at(kind, &spec, hi));
            }
        }
    }
}
