#![allow(dead_code)]

use spinpim_core::array::{CellVariant, Tile, TileConfig};
use spinpim_core::device::MtjSpec;
use spinpim_core::kernels::{GateSet, KernelBuilder, KernelTrace};

/// Result of running a kernel program on a real tile, one case per lane.
pub struct TileRun {
    pub trace: KernelTrace,
    /// Output bits per lane, in the order the builder returned the cells.
    pub outputs: Vec<Vec<bool>>,
}

/// Builds a program over `cases.len()` lanes, preloads each lane's input
/// bits into the input cells, executes every micro-op on a tile and reads
/// the output cells back.
pub fn run_on_tile(
    variant: CellVariant,
    gate_set: GateSet,
    cases: &[Vec<bool>],
    build: impl FnOnce(&mut KernelBuilder, &[usize]) -> Vec<usize>,
) -> TileRun {
    let lanes = cases.len();
    // Tile widths are powers of two; surplus lanes repeat the last case.
    let width = lanes.max(2).next_power_of_two();
    let mut b = KernelBuilder::new(variant, width, gate_set);
    let inputs: Vec<usize> = (0..cases[0].len()).map(|i| b.alloc_data(i % 2)).collect();
    let outs = build(&mut b, &inputs);
    let consts = b.const_cells().to_vec();
    let trace = b.finish();
    let slots = trace.peak_slots.max(2).next_power_of_two();
    let cfg = if variant.is_transposed() {
        TileConfig::new(slots, width, variant, MtjSpec::<f64>::modern())
    } else {
        TileConfig::new(width, slots, variant, MtjSpec::<f64>::modern())
    };
    let mut tile = Tile::new(cfg.context().expect("tile context"));
    for (slot, v) in consts {
        tile.fill_slot(slot, v);
    }
    for lane in 0..width {
        let case = &cases[lane.min(lanes - 1)];
        for (&slot, &bit) in inputs.iter().zip(case) {
            tile.set(slot, lane, bit);
        }
    }
    tile.run(&trace.ops).expect("program executes");
    let outputs = (0..lanes)
        .map(|lane| outs.iter().map(|&s| tile.get(s, lane)).collect())
        .collect();
    TileRun { trace, outputs }
}

pub fn bits_of(v: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| v >> i & 1 == 1).collect()
}

pub fn value_of(bits: &[bool]) -> u64 {
    bits.iter().enumerate().map(|(i, &b)| (b as u64) << i).sum()
}

/// Every `(x, y)` pair of `n`- and `m`-bit values as concatenated bits.
pub fn all_pairs(n: usize, m: usize) -> Vec<Vec<bool>> {
    let mut cases = Vec::with_capacity(1 << (n + m));
    for y in 0..1u64 << m {
        for x in 0..1u64 << n {
            let mut c = bits_of(x, n);
            c.extend(bits_of(y, m));
            cases.push(c);
        }
    }
    cases
}
