//! Mapping of network layers onto tiles.
//!
//! Every output neuron (FC) or (filter, position) pair (conv) gets a group of
//! `g` lanes holding private copies of all its operands. Lane `k` of a group
//! holds taps `k * share .. (k + 1) * share`; taps past the end are padded
//! with input 0 and weight 1, which XNOR to 0. All lanes of a tile run one
//! shared program: bit-plane XNORs and popcounts, a pairwise merge of the lane
//! partial sums into the group's first lane, then scaling, thresholding and
//! pooling on the lead lanes. With `sigma > 1` the channels are split into
//! waves that reuse the same input copies and write separate output cells.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{CellVariant, TileConfig};
use crate::bits::Mask;
use crate::kernels::{self, accumulate_shifted, Counted, GateSet, KernelBuilder, KernelError, KernelTrace};
use crate::network::{LayerKind, LayerSpec, NetworkSpec, OutputMode};
use crate::num::Scalar;
use crate::reference::conv_taps;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("layer `{layer}` does not fit with g = {g}: {needed} cells per lane, {available} available{}", minimal_note(*.minimal_g))]
    DoesNotFit {
        layer: String,
        g: usize,
        needed: usize,
        available: usize,
        minimal_g: Option<usize>,
    },
    #[error("layout: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

fn minimal_note(g: Option<usize>) -> String {
    match g {
        Some(g) => format!("; minimal g = {g}"),
        None => "; no group size fits".into(),
    }
}

/// Tile properties the compiler depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub variant: CellVariant,
    pub rows: usize,
    pub cols: usize,
}

impl Geometry {
    pub fn of<T: Scalar>(cfg: &TileConfig<T>) -> Self {
        Geometry {
            variant: cfg.variant,
            rows: cfg.rows,
            cols: cfg.cols,
        }
    }

    pub fn slots(&self) -> usize {
        if self.variant.is_transposed() {
            self.rows
        } else {
            self.cols
        }
    }

    pub fn lanes(&self) -> usize {
        if self.variant.is_transposed() {
            self.cols
        } else {
            self.rows
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.rows as u64 * self.cols as u64 / 8
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutOptions {
    /// Lanes per group; the smallest fitting size when unset.
    pub g: Option<usize>,
    /// Number of sequential waves the output channels are split into.
    pub sigma: usize,
    pub gate_set: GateSet,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        LayoutOptions {
            g: None,
            sigma: 1,
            gate_set: GateSet::NandNotCopy,
        }
    }
}

/// Cells shared by every lane of a tile, by role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotMap {
    pub consts: Vec<(usize, bool)>,
    /// `[input plane][tap offset]`.
    pub inputs: Vec<Vec<usize>>,
    /// `[wave][weight plane][tap offset]`.
    pub weights: Vec<Vec<Vec<usize>>>,
    /// `[wave]`, least significant first; empty for raw layers.
    pub thresholds: Vec<Vec<usize>>,
    /// `[wave]`, least significant first.
    pub outputs: Vec<Vec<usize>>,
}

impl SlotMap {
    pub fn is_const(&self, slot: usize) -> bool {
        slot < self.consts.len()
    }
}

/// Where a lane's tap reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapSource {
    Input(usize),
    /// Zero padding around a convolution input; uses the real weight.
    Zero,
    /// Past the last tap: input 0 against weight 1.
    Pad,
}

#[derive(Clone, Debug)]
pub struct LayerPlan {
    pub index: usize,
    pub layer: LayerSpec,
    pub geometry: Geometry,
    pub g: usize,
    pub sigma: usize,
    /// Taps per lane.
    pub share: usize,
    pub channels_per_wave: usize,
    /// Output positions per channel (1 for FC).
    pub positions: usize,
    pub groups_per_wave: usize,
    pub groups_per_tile: usize,
    pub tiles: usize,
    pub threshold_width: usize,
    pub slot_map: SlotMap,
    pub program: Arc<KernelTrace>,
    /// Lead lanes of groups holding a final output (window leads when pooling).
    pub output_lanes: Mask,
}

impl LayerPlan {
    pub fn pool_size(&self) -> usize {
        self.layer.pool_size()
    }

    pub fn peak_slots(&self) -> usize {
        self.program.peak_slots
    }

    /// Cells a group occupies, operands plus scratch.
    pub fn group_cells(&self) -> usize {
        self.g * self.peak_slots()
    }

    pub fn memory_bytes(&self) -> u64 {
        self.tiles as u64 * self.geometry.capacity_bytes()
    }

    /// Tile and first lane of the group with global index `j` in a wave.
    pub fn group_location(&self, j: usize) -> (usize, usize) {
        (j / self.groups_per_tile, (j % self.groups_per_tile) * self.g)
    }

    /// Channel computed by group `j` in `wave`, if it exists.
    pub fn channel(&self, wave: usize, j: usize) -> Option<usize> {
        let c = wave * self.channels_per_wave + j / self.positions;
        (j < self.groups_per_wave && c < self.layer.channels()).then_some(c)
    }

    /// Pre-pool output position `(y, x)` of group `j`; pool windows occupy
    /// consecutive groups.
    pub fn position(&self, j: usize) -> (usize, usize) {
        let p = j % self.positions;
        match self.layer.output_dims() {
            Some(d) => {
                let (ph, pw) = self.layer.pool();
                let (window, off) = (p / (ph * pw), p % (ph * pw));
                let (wy, wx) = (window / d.width, window % d.width);
                (wy * ph + off / pw, wx * pw + off % pw)
            }
            None => (0, 0),
        }
    }

    /// Taps held by lane `k` of group `j`, in slot order.
    pub fn lane_taps(&self, j: usize, k: usize) -> Vec<TapSource> {
        let mut taps = self.group_taps(j);
        taps.truncate((k + 1) * self.share);
        taps.drain(..k * self.share);
        taps
    }

    /// Sources of every tap slot of group `j`, lane by lane.
    pub fn group_taps(&self, j: usize) -> Vec<TapSource> {
        let n = self.layer.taps();
        let (lo, hi) = (0, self.g * self.share);
        match &self.layer.kind {
            LayerKind::FullyConnected { .. } => (lo..hi)
                .map(|t| if t < n { TapSource::Input(t) } else { TapSource::Pad })
                .collect(),
            LayerKind::Conv {
                input,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (oy, ox) = self.position(j);
                let taps = conv_taps(*input, *kernel, *stride, padding.top, padding.left, oy, ox);
                (lo..hi)
                    .map(|t| match taps.get(t) {
                        Some(Some(i)) => TapSource::Input(*i),
                        Some(None) => TapSource::Zero,
                        None => TapSource::Pad,
                    })
                    .collect()
            }
        }
    }

    /// Index in the layer's output vector of the result held by group `j`
    /// of `wave`, for groups that hold one.
    pub fn output_index(&self, wave: usize, j: usize) -> Option<usize> {
        let c = self.channel(wave, j)?;
        match self.layer.output_dims() {
            None => Some(c),
            Some(d) => {
                let ps = self.pool_size();
                let p = j % self.positions;
                if p % ps != 0 {
                    return None;
                }
                let window = p / ps;
                Some(d.index(window / d.width, window % d.width, c))
            }
        }
    }

    /// Input copies per layer input value across one wave of groups.
    pub fn duplication(&self) -> f64 {
        let mut cells = 0usize;
        for j in 0..self.groups_per_wave {
            for k in 0..self.g {
                cells += self
                    .lane_taps(j, k)
                    .iter()
                    .filter(|t| matches!(t, TapSource::Input(_)))
                    .count();
            }
        }
        cells as f64 / self.layer.input_len() as f64
    }

    /// Output cells each tile exposes for reading.
    pub fn output_cells_per_tile(&self) -> usize {
        self.slot_map.outputs.iter().map(|w| w.len()).sum()
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            layer: self.layer.name.clone(),
            g: self.g,
            sigma: self.sigma,
            share: self.share,
            groups: self.groups_per_wave * self.sigma,
            groups_per_wave: self.groups_per_wave,
            groups_per_tile: self.groups_per_tile,
            tiles: self.tiles,
            peak_slots: self.peak_slots(),
            group_cells: self.group_cells(),
            steps: self.program.steps,
            parity_copies: self.program.parity_copies,
            ops: self.program.ops.len(),
            memory_bytes: self.memory_bytes(),
            input_slots: self.slot_map.inputs.iter().map(|p| p.len()).sum(),
            weight_slots: self.slot_map.weights.iter().flatten().map(|p| p.len()).sum(),
            threshold_width: self.threshold_width,
        }
    }
}

/// Machine-readable plan digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub layer: String,
    pub g: usize,
    pub sigma: usize,
    pub share: usize,
    pub groups: usize,
    pub groups_per_wave: usize,
    pub groups_per_tile: usize,
    pub tiles: usize,
    pub peak_slots: usize,
    pub group_cells: usize,
    pub steps: usize,
    pub parity_copies: usize,
    pub ops: usize,
    pub memory_bytes: u64,
    pub input_slots: usize,
    pub weight_slots: usize,
    pub threshold_width: usize,
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.summary();
        writeln!(f, "layer {} `{}`", self.index, s.layer)?;
        writeln!(f, "  groups {} ({} per wave, sigma {}), g {}, {} taps per lane", s.groups, s.groups_per_wave, s.sigma, s.g, s.share)?;
        writeln!(f, "  tiles {} ({} groups each), {} bytes", s.tiles, s.groups_per_tile, s.memory_bytes)?;
        writeln!(f, "  cells per lane {} of {}, per group {}", s.peak_slots, self.geometry.slots(), s.group_cells)?;
        writeln!(f, "  program {} ops, {} gate steps ({} parity copies)", s.ops, s.steps, s.parity_copies)?;
        let span = |v: &[usize]| match (v.iter().min(), v.iter().max()) {
            (Some(a), Some(b)) => format!("{a}..={b}"),
            _ => "-".into(),
        };
        let inputs: Vec<usize> = self.slot_map.inputs.iter().flatten().copied().collect();
        let weights: Vec<usize> = self.slot_map.weights.iter().flatten().flatten().copied().collect();
        let thresholds: Vec<usize> = self.slot_map.thresholds.iter().flatten().copied().collect();
        let outputs: Vec<usize> = self.slot_map.outputs.iter().flatten().copied().collect();
        writeln!(f, "  slots: inputs {}, weights {}, thresholds {}, outputs {:?}", span(&inputs), span(&weights), span(&thresholds), outputs)
    }
}

#[derive(Clone, Debug)]
pub struct NetworkPlan {
    pub geometry: Geometry,
    pub layers: Vec<LayerPlan>,
}

impl NetworkPlan {
    pub fn memory_bytes(&self) -> u64 {
        memory_usage(&self.layers)
    }

    pub fn summaries(&self) -> Vec<PlanSummary> {
        self.layers.iter().map(|l| l.summary()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summaries()).expect("plan serializes")
    }
}

impl fmt::Display for NetworkPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:?} tiles of {}x{}, {} bytes total",
            self.geometry.variant,
            self.geometry.rows,
            self.geometry.cols,
            self.memory_bytes()
        )?;
        for l in &self.layers {
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Total bytes of every allocated tile.
pub fn memory_usage(plans: &[LayerPlan]) -> u64 {
    plans.iter().map(|p| p.memory_bytes()).sum()
}

/// `threshold'`: the binary comparison `scale_and_shift(2S - K) >= T`
/// rewritten as `X >= T'` over the non-negative in-array value `X`,
/// clamped to `0..=X_max + 1`.
pub fn folded_threshold(layer: &LayerSpec, t: i64) -> u128 {
    let k = layer.affine_offset() as i128;
    let p = layer.scale_product() as i128;
    let t = t as i128;
    let v = if layer.shift >= 0 {
        t + (k * p << layer.shift)
    } else {
        (t << -layer.shift) + k * p
    };
    v.clamp(0, folded_max(layer) as i128 + 1) as u128
}

/// Largest in-array comparison value `X = 2 S P 2^max(shift, 0)`.
pub fn folded_max(layer: &LayerSpec) -> u128 {
    (2 * layer.max_sum() * layer.scale_product()) << layer.shift.max(0)
}

fn threshold_width(layer: &LayerSpec) -> usize {
    match layer.output {
        OutputMode::Binary => kernels::width_for(folded_max(layer) + 1),
        OutputMode::Raw { .. } => 0,
    }
}

struct Shape {
    g: usize,
    sigma: usize,
    share: usize,
    channels_per_wave: usize,
    positions: usize,
    groups_per_wave: usize,
    groups_per_tile: usize,
}

fn shape(layer: &LayerSpec, geom: &Geometry, g: usize, sigma: usize) -> Option<Shape> {
    let ps = layer.pool_size();
    let groups_per_tile = (geom.lanes() / g) / ps * ps;
    if groups_per_tile == 0 {
        return None;
    }
    let channels_per_wave = layer.channels().div_ceil(sigma);
    let positions = layer.positions();
    // Spread groups evenly over the tiles the layer needs.
    let groups = channels_per_wave * positions;
    let tiles = groups.div_ceil(groups_per_tile);
    let groups_per_tile = groups.div_ceil(tiles).div_ceil(ps) * ps;
    Some(Shape {
        g,
        sigma,
        share: layer.taps().div_ceil(g),
        channels_per_wave,
        positions,
        groups_per_wave: channels_per_wave * positions,
        groups_per_tile,
    })
}

fn lead_mask(lanes: usize, s: &Shape, every: usize, offset: usize) -> Mask {
    Mask::from_indices(
        lanes,
        (0..s.groups_per_tile).filter(|q| q % every == 0).map(|q| q * s.g + offset),
    )
}

fn build_program(layer: &LayerSpec, geom: &Geometry, s: &Shape, gate_set: GateSet) -> Result<(KernelTrace, SlotMap, Mask), LayoutError> {
    let lanes = geom.lanes();
    let mut b = KernelBuilder::new(geom.variant, lanes, gate_set);
    let inputs: Vec<Vec<usize>> = (0..layer.input_bits)
        .map(|_| (0..s.share).map(|t| b.alloc_data(t % 2)).collect())
        .collect();
    let weights: Vec<Vec<Vec<usize>>> = (0..s.sigma)
        .map(|_| {
            (0..layer.weight_bits)
                .map(|_| (0..s.share).map(|t| b.alloc_data(t % 2)).collect())
                .collect()
        })
        .collect();
    let tw = threshold_width(layer);
    let thresholds: Vec<Vec<usize>> = (0..s.sigma)
        .map(|_| (0..tw).map(|i| b.alloc_data(i % 2)).collect())
        .collect();

    let full = Mask::from_indices(lanes, 0..s.groups_per_tile * s.g);
    let leads = lead_mask(lanes, s, 1, 0);
    let ps = layer.pool_size();
    let window_leads = lead_mask(lanes, s, ps, 0);
    let mut outputs = Vec::with_capacity(s.sigma);

    for wave in 0..s.sigma {
        b.set_active(full.clone());
        let mut acc: Option<Counted> = None;
        for ib in 0..layer.input_bits as usize {
            for wc in 0..layer.weight_bits as usize {
                let bits: Vec<usize> = (0..s.share)
                    .map(|t| {
                        let w = weights[wave][wc][t];
                        // The weight cell is reused for later input planes.
                        let last = ib + 1 == layer.input_bits as usize;
                        let r = kernels::xnor(&mut b, inputs[ib][t], w, last.then_some(w));
                        b.uncache(inputs[ib][t]);
                        r
                    })
                    .collect();
                let pc = kernels::popcount(&mut b, &bits);
                acc = Some(accumulate_shifted(&mut b, acc, pc, ib + wc));
            }
        }
        let mut sum = acc.expect("at least one plane pair");

        // Pairwise merge of lane partial sums into each group's first lane.
        let mut step = 1;
        while step < s.g {
            let mut pairs = Vec::new();
            let mut adders = Vec::new();
            let mut unpaired = Vec::new();
            for q in 0..s.groups_per_tile {
                let lead = q * s.g;
                for o in (0..s.g).step_by(2 * step) {
                    adders.push(lead + o);
                    if o + step < s.g {
                        pairs.push((lead + o + step, lead + o));
                    } else {
                        unpaired.push(lead + o);
                    }
                }
            }
            let dst: Vec<usize> = sum
                .word
                .iter()
                .map(|&c| if b.is_const(c) { c } else { b.alloc_temp(0) })
                .collect();
            if !unpaired.is_empty() {
                // A lane without a partner this round adds zero.
                b.set_active(Mask::from_indices(lanes, unpaired));
                for &d in &dst {
                    if !b.is_const(d) {
                        b.write_fill(d, false);
                    }
                }
            }
            b.set_active(full.clone());
            b.move_word_across_lanes(&sum.word, &dst, &pairs);
            b.set_active(Mask::from_indices(lanes, adders));
            let other = Counted {
                word: dst,
                max: sum.max,
            };
            sum = kernels::add_counted(&mut b, sum, other);
            step *= 2;
        }
        b.set_active(leads.clone());

        let out_word = match layer.output {
            OutputMode::Raw { .. } => sum.word,
            OutputMode::Binary => {
                let mut x = kernels::double(&b, sum);
                for &scale in &layer.scales {
                    let m: Vec<usize> = (0..kernels::width_for(scale as u128))
                        .map(|i| if scale >> i & 1 == 1 { b.one(0) } else { b.zero(0) })
                        .collect();
                    let prod = kernels::multiply(&mut b, &x.word, &m);
                    b.free_all(&x.word);
                    x = Counted {
                        word: prod,
                        max: x.max * scale as u128,
                    };
                }
                let mut field = x.word.clone();
                if layer.shift > 0 {
                    let z = b.zero_like(field[0]);
                    field.extend(std::iter::repeat_n(z, layer.shift as usize));
                    field = kernels::shift_batch_norm(&mut b, &field, layer.shift as i64)?;
                }
                let o = kernels::threshold(&mut b, &field, &thresholds[wave], None);
                b.free_all(&field);
                b.free_all(&thresholds[wave]);
                if ps > 1 {
                    let mut cells = vec![o];
                    for i in 1..ps {
                        let pairs: Vec<(usize, usize)> = (0..s.groups_per_tile)
                            .step_by(ps)
                            .map(|q| ((q + i) * s.g, q * s.g))
                            .collect();
                        let d = b.alloc_temp(0);
                        b.move_word_across_lanes(&[o], &[d], &pairs);
                        cells.push(d);
                    }
                    b.set_active(window_leads.clone());
                    let pooled = kernels::pool_or(&mut b, &cells, None);
                    b.free_all(&cells);
                    vec![pooled]
                } else {
                    vec![o]
                }
            }
        };
        outputs.push(out_word);
    }

    let trace = b.finish();
    let slot_map = SlotMap {
        consts: {
            let probe = KernelBuilder::new(geom.variant, 1, gate_set);
            probe.const_cells().to_vec()
        },
        inputs,
        weights,
        thresholds,
        outputs,
    };
    let output_lanes = if layer.is_raw() || ps == 1 { leads } else { window_leads };
    Ok((trace, slot_map, output_lanes))
}

fn data_cells(layer: &LayerSpec, share: usize, sigma: usize, consts: usize) -> usize {
    consts + share * (layer.input_bits as usize + sigma * layer.weight_bits as usize) + sigma * threshold_width(layer)
}

fn try_layout(index: usize, layer: &LayerSpec, geom: &Geometry, g: usize, opts: &LayoutOptions) -> Result<LayerPlan, LayoutError> {
    let too_small = |needed| LayoutError::DoesNotFit {
        layer: layer.name.clone(),
        g,
        needed,
        available: geom.slots(),
        minimal_g: None,
    };
    let s = shape(layer, geom, g, opts.sigma).ok_or_else(|| too_small(geom.slots() + 1))?;
    let consts = if geom.variant.is_transposed() { 4 } else { 2 };
    let data = data_cells(layer, s.share, s.sigma, consts);
    if data > geom.slots() {
        return Err(too_small(data));
    }
    let (trace, slot_map, output_lanes) = build_program(layer, geom, &s, opts.gate_set)?;
    if trace.peak_slots > geom.slots() {
        return Err(too_small(trace.peak_slots));
    }
    Ok(LayerPlan {
        index,
        layer: layer.clone(),
        geometry: *geom,
        g: s.g,
        sigma: s.sigma,
        share: s.share,
        channels_per_wave: s.channels_per_wave,
        positions: s.positions,
        groups_per_wave: s.groups_per_wave,
        groups_per_tile: s.groups_per_tile,
        tiles: s.groups_per_wave.div_ceil(s.groups_per_tile),
        threshold_width: threshold_width(layer),
        slot_map,
        program: Arc::new(trace),
        output_lanes,
    })
}

/// Smallest fitting group size and its plan.
fn search(index: usize, layer: &LayerSpec, geom: &Geometry, opts: &LayoutOptions) -> Result<LayerPlan, LayoutError> {
    let consts = if geom.variant.is_transposed() { 4 } else { 2 };
    let per_tap = layer.input_bits as usize + opts.sigma * layer.weight_bits as usize;
    let room = geom
        .slots()
        .saturating_sub(consts + opts.sigma * threshold_width(layer));
    let start = if room < per_tap { usize::MAX } else { layer.taps().div_ceil(room / per_tap).max(1) };
    let limit = geom.lanes() / layer.pool_size();
    let mut last = None;
    let mut g = start;
    while g <= limit {
        match try_layout(index, layer, geom, g, opts) {
            Ok(plan) => return Ok(plan),
            Err(e @ LayoutError::DoesNotFit { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
        g += 1;
    }
    Err(last.unwrap_or_else(|| LayoutError::DoesNotFit {
        layer: layer.name.clone(),
        g: limit.max(1),
        needed: consts + per_tap * layer.taps(),
        available: geom.slots(),
        minimal_g: None,
    }))
}

fn validate_options(layer: &LayerSpec, geom: &Geometry, opts: &LayoutOptions) -> Result<(), LayoutError> {
    if opts.sigma == 0 || opts.sigma > layer.channels() {
        return Err(LayoutError::Invalid(format!(
            "sigma must be within 1..={} for layer `{}`",
            layer.channels(),
            layer.name
        )));
    }
    if opts.g == Some(0) {
        return Err(LayoutError::Invalid("group size must be positive".into()));
    }
    if geom.variant == CellVariant::TwoT {
        return Err(LayoutError::Invalid("2T tiles cannot restrict logic to group lanes".into()));
    }
    Ok(())
}

/// Plans one layer. An explicit `g` that is too small reports the minimal
/// fitting size.
pub fn layout_layer(index: usize, layer: &LayerSpec, geom: &Geometry, opts: &LayoutOptions) -> Result<LayerPlan, LayoutError> {
    validate_options(layer, geom, opts)?;
    match opts.g {
        None => search(index, layer, geom, opts),
        Some(g) => try_layout(index, layer, geom, g, opts).map_err(|e| match e {
            LayoutError::DoesNotFit {
                layer: name,
                g,
                needed,
                available,
                ..
            } => LayoutError::DoesNotFit {
                layer: name,
                g,
                needed,
                available,
                minimal_g: search(index, layer, geom, opts).ok().map(|p| p.g),
            },
            other => other,
        }),
    }
}

pub fn layout_fc(layer: &LayerSpec, geom: &Geometry, opts: &LayoutOptions) -> Result<LayerPlan, LayoutError> {
    if layer.is_conv() {
        return Err(LayoutError::Invalid(format!("`{}` is not fully connected", layer.name)));
    }
    layout_layer(0, layer, geom, opts)
}

pub fn layout_conv(layer: &LayerSpec, geom: &Geometry, opts: &LayoutOptions) -> Result<LayerPlan, LayoutError> {
    if !layer.is_conv() {
        return Err(LayoutError::Invalid(format!("`{}` is not a convolution", layer.name)));
    }
    layout_layer(0, layer, geom, opts)
}

/// Per-layer overrides on top of shared defaults.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub defaults: LayoutOptions,
    #[serde(default)]
    pub g: BTreeMap<usize, usize>,
    #[serde(default)]
    pub sigma: BTreeMap<usize, usize>,
}

impl CompileOptions {
    pub fn for_layer(&self, i: usize) -> LayoutOptions {
        LayoutOptions {
            g: self.g.get(&i).copied().or(self.defaults.g),
            sigma: self.sigma.get(&i).copied().unwrap_or(self.defaults.sigma),
            gate_set: self.defaults.gate_set,
        }
    }
}

/// Plans every layer, in parallel.
pub fn compile(net: &NetworkSpec, geom: &Geometry, opts: &CompileOptions) -> Result<NetworkPlan, LayoutError> {
    use rayon::prelude::*;
    let layers = net
        .layers
        .par_iter()
        .enumerate()
        .map(|(i, l)| layout_layer(i, l, geom, &opts.for_layer(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(NetworkPlan { geometry: *geom, layers })
}

/// One aggregated inter-tile move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transfer {
    pub src_tile: usize,
    pub src_row: usize,
    pub dst_tile: usize,
    pub dst_row: usize,
    pub bits: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommPlan {
    pub transfers: Vec<Transfer>,
    pub written_bits: usize,
    /// Source rows holding outputs, summed over tiles.
    pub source_rows: usize,
    /// Output cells per source tile, one set per wave.
    pub source_columns_per_tile: usize,
}

/// Physical row of a cell.
pub fn physical_row(variant: CellVariant, slot: usize, lane: usize) -> usize {
    variant.physical(slot, lane).0
}

/// Location `(tile, slot, lane)` of every output value of a plan.
pub fn output_locations(plan: &LayerPlan) -> Vec<(usize, usize, usize)> {
    let mut loc = vec![(usize::MAX, 0, 0); plan.layer.output_len()];
    for wave in 0..plan.sigma {
        let slot = plan.slot_map.outputs[wave][0];
        for j in 0..plan.groups_per_wave {
            if let Some(i) = plan.output_index(wave, j) {
                let (tile, lane) = plan.group_location(j);
                loc[i] = (tile, slot, lane);
            }
        }
    }
    loc
}

/// Every bit move from `from`'s output cells to the input copies of `to`.
pub fn plan_communication(from: &LayerPlan, to: &LayerPlan) -> Result<CommPlan, LayoutError> {
    if from.layer.output_len() != to.layer.input_len() || from.layer.is_raw() || to.layer.input_bits != 1 {
        return Err(LayoutError::Invalid(format!(
            "layer `{}` does not feed layer `{}`",
            from.layer.name, to.layer.name
        )));
    }
    let src = output_locations(from);
    let vf = from.geometry.variant;
    let vt = to.geometry.variant;
    let mut agg: BTreeMap<(usize, usize, usize, usize), usize> = BTreeMap::new();
    for j in 0..to.groups_per_wave {
        let (tile, lead) = to.group_location(j);
        for k in 0..to.g {
            for (t, tap) in to.lane_taps(j, k).into_iter().enumerate() {
                if let TapSource::Input(i) = tap {
                    let (st, sslot, slane) = src[i];
                    let srow = physical_row(vf, sslot, slane);
                    let drow = physical_row(vt, to.slot_map.inputs[0][t], lead + k);
                    *agg.entry((st, srow, tile, drow)).or_default() += 1;
                }
            }
        }
    }
    let transfers: Vec<Transfer> = agg
        .into_iter()
        .map(|((src_tile, src_row, dst_tile, dst_row), bits)| Transfer {
            src_tile,
            src_row,
            dst_tile,
            dst_row,
            bits,
        })
        .collect();
    let mut rows: Vec<(usize, usize)> = transfers.iter().map(|t| (t.src_tile, t.src_row)).collect();
    rows.sort_unstable();
    rows.dedup();
    Ok(CommPlan {
        written_bits: transfers.iter().map(|t| t.bits).sum(),
        source_rows: rows.len(),
        source_columns_per_tile: from.output_cells_per_tile(),
        transfers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Dims, Padding};

    fn geom(size: usize) -> Geometry {
        Geometry {
            variant: CellVariant::OneTTransposed,
            rows: size,
            cols: size,
        }
    }

    #[test]
    fn small_fc_groups() {
        let l = LayerSpec::fc("f", 4, 3);
        let p = layout_fc(&l, &geom(64), &LayoutOptions { g: Some(1), ..Default::default() }).unwrap();
        assert_eq!(p.groups_per_wave, 3);
        assert_eq!(p.share, 4);
        assert_eq!(p.slot_map.inputs[0].len(), 4);
        assert_eq!(p.slot_map.weights[0][0].len(), 4);
    }

    #[test]
    fn conv_groups_filter_major() {
        let l = LayerSpec::conv("c", Dims::new(7, 7, 1), 2, (3, 3), Padding::same(3, 3), None);
        let p = layout_conv(&l, &geom(256), &LayoutOptions { g: Some(1), ..Default::default() }).unwrap();
        assert_eq!(p.groups_per_wave, 98);
        assert_eq!(p.channel(0, 48), Some(0));
        assert_eq!(p.channel(0, 49), Some(1));
        let corner = p.lane_taps(0, 0);
        assert_eq!(corner.iter().filter(|t| matches!(t, TapSource::Input(_))).count(), 4);
        assert_eq!(corner.iter().filter(|t| matches!(t, TapSource::Zero)).count(), 5);
    }

    #[test]
    fn folded_threshold_matches_direct_comparison() {
        let l = LayerSpec::fc("f", 5, 1).with_input_bits(2).with_scales(vec![3]).with_shift(-1);
        for s in 0..=15u128 {
            for t in -20i64..20 {
                let dot = 2 * s as i128 - l.affine_offset() as i128;
                let direct = crate::reference::scale_and_shift(&l, dot) >= t as i128;
                let x = 2 * s * l.scale_product();
                assert_eq!(x >= folded_threshold(&l, t), direct, "s={s} t={t}");
            }
        }
    }
}
