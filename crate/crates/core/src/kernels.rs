//! Micro-op program generation for the BNN building blocks.
//!
//! [`KernelBuilder`] owns slot allocation for a lane program and emits the
//! preset write that every gate needs. On transposed 1T tiles it also
//! legalizes bitline parity by inserting COPY gates, which are reported
//! separately from the kernel's own steps.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{CellVariant, ColumnSet, GateEval, MicroOp, WriteData};
use crate::bits::Mask;
use crate::gate::GateKind;

/// An unsigned number held in cells, least significant bit first.
pub type Word = Vec<usize>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateSet {
    /// NAND, NAND3, NOT and COPY only: the gates with the widest margins.
    NandNotCopy,
    /// Adds NOR and the inverted majority gates.
    Full,
}

impl GateSet {
    pub fn allows(self, gate: GateKind) -> bool {
        match self {
            GateSet::Full => true,
            GateSet::NandNotCopy => matches!(gate, GateKind::Nand | GateKind::Nand3 | GateKind::Not | GateKind::Copy),
        }
    }

    pub fn gates(self) -> Vec<GateKind> {
        GateKind::ALL.iter().copied().filter(|&g| self.allows(g)).collect()
    }
}

impl std::str::FromStr for GateSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nand-not-copy" | "nand" | "default" => Ok(GateSet::NandNotCopy),
            "full" | "with-nor" => Ok(GateSet::Full),
            _ => Err(format!("unknown gate set `{s}`")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("shift {shift} out of range for a {width}-bit field")]
    ShiftOutOfRange { shift: i64, width: usize },
    #[error("{0}")]
    Invalid(String),
}

/// An ordered micro-op program plus its accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTrace {
    pub ops: Vec<MicroOp>,
    /// Gate evaluations issued, including parity copies.
    pub steps: usize,
    /// Temporary cells allocated by kernels.
    pub temps: usize,
    /// COPY gates inserted only to satisfy the 1T bitline parity rule.
    pub parity_copies: usize,
    pub gate_set: GateSet,
    /// Highest slot index used plus one.
    pub peak_slots: usize,
}

impl KernelTrace {
    pub fn gate_count(&self) -> usize {
        self.ops.iter().filter(|op| op.is_gate()).count()
    }
}

#[derive(Clone, Debug)]
pub struct KernelBuilder {
    variant: CellVariant,
    lanes: usize,
    gate_set: GateSet,
    copy_as_two_nots: bool,
    active: Mask,
    ops: Vec<MicroOp>,
    free: [BTreeSet<usize>; 2],
    allocated: BTreeSet<usize>,
    next_fresh: usize,
    peak: usize,
    consts: Vec<(usize, bool)>,
    steps: usize,
    temps: usize,
    parity_copies: usize,
    copies: BTreeMap<usize, usize>,
    pending_release: Vec<usize>,
}

impl KernelBuilder {
    /// A builder with every lane active and the constant cells reserved at
    /// the lowest slots.
    pub fn new(variant: CellVariant, lanes: usize, gate_set: GateSet) -> Self {
        let consts: Vec<(usize, bool)> = if variant.is_transposed() {
            vec![(0, false), (1, false), (2, true), (3, true)]
        } else {
            vec![(0, false), (1, true)]
        };
        let n = consts.len();
        KernelBuilder {
            variant,
            lanes,
            gate_set,
            copy_as_two_nots: false,
            active: Mask::full(lanes),
            ops: Vec::new(),
            free: [BTreeSet::new(), BTreeSet::new()],
            allocated: BTreeSet::new(),
            next_fresh: n,
            peak: n,
            consts,
            steps: 0,
            temps: 0,
            parity_copies: 0,
            copies: BTreeMap::new(),
            pending_release: Vec::new(),
        }
    }

    /// Implements explicit copies as two NOT gates. Parity changes on 1T
    /// tiles still use the single-step COPY, since a chain of inverting gates
    /// cannot move a value to the other bitline parity.
    pub fn with_copy_as_two_nots(mut self, on: bool) -> Self {
        self.copy_as_two_nots = on;
        self
    }

    pub fn variant(&self) -> CellVariant {
        self.variant
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn gate_set(&self) -> GateSet {
        self.gate_set
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn temps(&self) -> usize {
        self.temps
    }

    pub fn parity_copies(&self) -> usize {
        self.parity_copies
    }

    pub fn peak_slots(&self) -> usize {
        self.peak
    }

    pub fn ops(&self) -> &[MicroOp] {
        &self.ops
    }

    /// Cells a tile must hold before the program runs.
    pub fn const_cells(&self) -> &[(usize, bool)] {
        &self.consts
    }

    pub fn is_const(&self, slot: usize) -> bool {
        slot < self.consts.len()
    }

    /// Bitline parity class of a slot; always 0 outside 1T tiles.
    pub fn parity(&self, slot: usize) -> usize {
        if self.variant.is_transposed() {
            slot % 2
        } else {
            0
        }
    }

    fn const_at(&self, value: bool, parity: usize) -> usize {
        self.consts
            .iter()
            .find(|&&(s, v)| v == value && self.parity(s) == parity)
            .map(|&(s, _)| s)
            .expect("constant at every parity")
    }

    pub fn zero(&self, parity: usize) -> usize {
        self.const_at(false, parity)
    }

    pub fn one(&self, parity: usize) -> usize {
        self.const_at(true, parity)
    }

    /// Constant 0 on the same bitline parity as `slot`.
    pub fn zero_like(&self, slot: usize) -> usize {
        self.zero(self.parity(slot))
    }

    pub fn active(&self) -> &Mask {
        &self.active
    }

    pub fn set_active(&mut self, lanes: Mask) {
        assert_eq!(lanes.len(), self.lanes, "lane mask width");
        if lanes != self.active {
            // Cached copies are only valid in the lanes they were made in.
            let stale: Vec<usize> = self.copies.values().copied().collect();
            self.copies.clear();
            for c in stale {
                self.release(c);
            }
            self.active = lanes;
        }
    }

    fn classes(&self) -> usize {
        if self.variant.is_transposed() {
            2
        } else {
            1
        }
    }

    fn take_slot(&mut self, parity: usize) -> usize {
        let parity = parity % self.classes();
        let slot = if let Some(&s) = self.free[parity].iter().next() {
            self.free[parity].remove(&s);
            s
        } else {
            loop {
                let s = self.next_fresh;
                self.next_fresh += 1;
                if self.parity(s) == parity {
                    break s;
                }
                self.free[self.parity(s)].insert(s);
            }
        };
        self.allocated.insert(slot);
        self.peak = self.peak.max(slot + 1);
        slot
    }

    /// A cell for program data (inputs, weights, constants of the layer).
    pub fn alloc_data(&mut self, parity: usize) -> usize {
        self.take_slot(parity)
    }

    /// A kernel temporary, counted in the trace's temp total.
    pub fn alloc_temp(&mut self, parity: usize) -> usize {
        self.temps += 1;
        self.take_slot(parity)
    }

    /// A result cell, not counted as a temporary.
    pub fn alloc_output(&mut self, parity: usize) -> usize {
        self.take_slot(parity)
    }

    fn release(&mut self, slot: usize) {
        if self.allocated.remove(&slot) {
            let p = self.parity(slot);
            self.free[p].insert(slot);
        }
    }

    fn drop_copy(&mut self, slot: usize) {
        if let Some(c) = self.copies.remove(&slot) {
            self.release(c);
        }
    }

    /// Returns a cell to the pool. Constants are never freed.
    pub fn free(&mut self, slot: usize) {
        if self.is_const(slot) {
            return;
        }
        self.drop_copy(slot);
        self.release(slot);
    }

    /// Releases the cached parity copy of a long-lived cell.
    pub fn uncache(&mut self, slot: usize) {
        self.drop_copy(slot);
    }

    pub fn free_all(&mut self, slots: &[usize]) {
        for &s in slots {
            self.free(s);
        }
    }

    pub fn push_op(&mut self, op: MicroOp) {
        if let MicroOp::Gate(g) = &op {
            self.steps += 1;
            self.drop_copy(g.output);
        }
        self.ops.push(op);
    }

    fn column_set(&self) -> ColumnSet {
        if self.active.is_full() {
            ColumnSet::All
        } else {
            ColumnSet::Mask(self.active.clone())
        }
    }

    /// Writes `value` into `slot` in every active lane.
    pub fn write_fill(&mut self, slot: usize, value: bool) {
        self.drop_copy(slot);
        if self.variant.is_transposed() {
            let cols = self.column_set();
            self.ops.push(MicroOp::Write {
                row: slot,
                data: WriteData::Fill { cols, value },
            });
        } else {
            let lanes: Vec<usize> = self.active.iter_ones().collect();
            for lane in lanes {
                self.ops.push(MicroOp::Write {
                    row: lane,
                    data: WriteData::Fill {
                        cols: ColumnSet::Single(slot),
                        value,
                    },
                });
            }
        }
    }

    /// Copies `src_slot` of each source lane into `dst_slot` of its paired
    /// destination lane through the row buffer.
    pub fn move_across_lanes(&mut self, src_slot: usize, dst_slot: usize, pairs: &[(usize, usize)]) {
        if pairs.is_empty() {
            return;
        }
        self.drop_copy(dst_slot);
        if self.variant.is_transposed() {
            let moves: Arc<[(u32, u32)]> = pairs.iter().map(|&(s, d)| (s as u32, d as u32)).collect();
            self.ops.push(MicroOp::Read { row: src_slot });
            self.ops.push(MicroOp::Write {
                row: dst_slot,
                data: WriteData::FromBuffer { moves },
            });
        } else {
            for &(s, d) in pairs {
                self.ops.push(MicroOp::Read { row: s });
                self.ops.push(MicroOp::Write {
                    row: d,
                    data: WriteData::FromBuffer {
                        moves: vec![(src_slot as u32, dst_slot as u32)].into(),
                    },
                });
            }
        }
    }

    /// Moves a whole word across lanes. Constant cells are not moved; the
    /// destination reuses them. On 3T tiles a single read and write per lane
    /// pair carries every bit.
    pub fn move_word_across_lanes(&mut self, src: &[usize], dst: &[usize], pairs: &[(usize, usize)]) {
        assert_eq!(src.len(), dst.len(), "word widths differ");
        let live: Vec<(usize, usize)> = src
            .iter()
            .zip(dst)
            .filter(|(s, _)| !self.is_const(**s))
            .map(|(&s, &d)| (s, d))
            .collect();
        if pairs.is_empty() || live.is_empty() {
            return;
        }
        if self.variant.is_transposed() {
            for (s, d) in live {
                self.move_across_lanes(s, d, pairs);
            }
        } else {
            for &(_, d) in &live {
                self.drop_copy(d);
            }
            let moves: Arc<[(u32, u32)]> = live.iter().map(|&(s, d)| (s as u32, d as u32)).collect();
            for &(s, d) in pairs {
                self.ops.push(MicroOp::Read { row: s });
                self.ops.push(MicroOp::Write {
                    row: d,
                    data: WriteData::FromBuffer { moves: moves.clone() },
                });
            }
        }
    }

    fn emit(&mut self, kind: GateKind, inputs: Vec<usize>, output: usize) {
        debug_assert!(
            self.gate_set.allows(kind),
            "{kind} is outside the {:?} gate set",
            self.gate_set
        );
        self.write_fill(output, kind.output_preset());
        self.push_op(MicroOp::Gate(GateEval {
            gate: kind,
            inputs,
            output,
            lanes: self.active.clone(),
        }));
    }

    /// A copy of `slot` on the opposite bitline parity, reused until either
    /// cell changes.
    fn parity_copy(&mut self, slot: usize) -> usize {
        if let Some(&c) = self.copies.get(&slot) {
            return c;
        }
        let c = self.fresh_parity_copy(slot);
        self.copies.insert(slot, c);
        c
    }

    fn fresh_parity_copy(&mut self, slot: usize) -> usize {
        let c = self.take_slot(1 - self.parity(slot));
        self.parity_copies += 1;
        self.emit(GateKind::Copy, vec![slot], c);
        c
    }

    /// Rewrites `inputs` so every cell sits on parity `q` and no cell repeats.
    fn legalize(&mut self, inputs: &[usize], q: usize) -> Vec<usize> {
        let transposed = self.variant.is_transposed();
        let mut out: Vec<usize> = Vec::with_capacity(inputs.len());
        for &s in inputs {
            let mut cell = if !transposed || self.parity(s) == q { s } else { self.parity_copy(s) };
            if out.contains(&cell) {
                // The same value is needed twice; a gate cannot read one
                // cell twice, so make a private copy on parity `q`.
                let source = if !transposed || self.parity(s) != q { s } else { self.parity_copy(s) };
                cell = self.fresh_parity_copy(source);
                self.pending_release.push(cell);
            }
            out.push(cell);
        }
        out
    }

    /// Input parity for a gate with a fresh output: the one needing fewer
    /// copies, then the one whose output parity has a free cell.
    fn majority_parity(&self, inputs: &[usize]) -> usize {
        let cost = |q: usize| {
            inputs
                .iter()
                .filter(|&&s| self.parity(s) != q && !self.copies.contains_key(&s))
                .count()
        };
        let (c0, c1) = (cost(0), cost(1));
        if c0 != c1 {
            return if c0 < c1 { 0 } else { 1 };
        }
        match (self.free[1].is_empty(), self.free[0].is_empty()) {
            (false, true) => 0,
            (true, false) => 1,
            _ => self.parity(inputs[0]),
        }
    }

    fn gate_with(&mut self, kind: GateKind, inputs: &[usize], output: Output) -> usize {
        assert_eq!(inputs.len(), kind.fan_in(), "{kind} fan-in");
        let (legal, out) = match output {
            Output::Into(out) => {
                let q = 1 - self.parity(out);
                let q = if self.variant.is_transposed() { q } else { 0 };
                (self.legalize(inputs, q), out)
            }
            Output::Temp | Output::Result => {
                let q = if self.variant.is_transposed() {
                    self.majority_parity(inputs)
                } else {
                    0
                };
                let legal = self.legalize(inputs, q);
                let out = if matches!(output, Output::Temp) {
                    self.alloc_temp(1 - q)
                } else {
                    self.alloc_output(1 - q)
                };
                (legal, out)
            }
        };
        assert!(!legal.contains(&out), "{kind} output {out} is also an input");
        self.emit(kind, legal, out);
        for c in std::mem::take(&mut self.pending_release) {
            self.release(c);
        }
        out
    }

    /// Evaluates `kind` into a fresh temporary cell.
    pub fn gate(&mut self, kind: GateKind, inputs: &[usize]) -> usize {
        self.gate_with(kind, inputs, Output::Temp)
    }

    /// Evaluates `kind` into a fresh result cell (not counted as a temp).
    pub fn gate_result(&mut self, kind: GateKind, inputs: &[usize]) -> usize {
        self.gate_with(kind, inputs, Output::Result)
    }

    /// Evaluates `kind` into an existing cell.
    pub fn gate_into(&mut self, kind: GateKind, inputs: &[usize], out: usize) {
        self.gate_with(kind, inputs, Output::Into(out));
    }

    /// Explicit copy into a fresh temporary.
    pub fn copy(&mut self, src: usize) -> usize {
        if self.copy_as_two_nots {
            let n = self.gate(GateKind::Not, &[src]);
            let c = self.gate(GateKind::Not, &[n]);
            self.free(n);
            c
        } else {
            self.gate(GateKind::Copy, &[src])
        }
    }

    pub fn finish(self) -> KernelTrace {
        KernelTrace {
            ops: self.ops,
            steps: self.steps,
            temps: self.temps,
            parity_copies: self.parity_copies,
            gate_set: self.gate_set,
            peak_slots: self.peak,
        }
    }
}

#[derive(Clone, Copy)]
enum Output {
    Temp,
    Result,
    Into(usize),
}

fn bit_length(v: u128) -> usize {
    (128 - v.leading_zeros()) as usize
}

/// Bits needed to hold values up to `max`, at least one.
pub fn width_for(max: u128) -> usize {
    bit_length(max).max(1)
}

/// `out = NOT(a XOR w)`. NOR form with the full gate set, NAND/NOT otherwise.
pub fn xnor(b: &mut KernelBuilder, a: usize, w: usize, out: Option<usize>) -> usize {
    use GateKind::*;
    let finish = |b: &mut KernelBuilder, kind, ins: &[usize]| match out {
        Some(o) => {
            b.gate_into(kind, ins, o);
            o
        }
        None => b.gate_result(kind, ins),
    };
    match b.gate_set() {
        GateSet::Full => {
            let t1 = b.gate(Nor, &[a, w]);
            let t2 = b.gate(Nor, &[a, t1]);
            let t3 = b.gate(Nor, &[w, t1]);
            let r = finish(b, Nor, &[t2, t3]);
            b.free_all(&[t1, t2, t3]);
            r
        }
        GateSet::NandNotCopy => {
            let na = b.gate(Not, &[a]);
            let nw = b.gate(Not, &[w]);
            let t1 = b.gate(Nand, &[a, w]);
            let t2 = b.gate(Nand, &[na, nw]);
            let r = finish(b, Nand, &[t1, t2]);
            b.free_all(&[na, nw, t1, t2]);
            r
        }
    }
}

/// One full-adder bit. Returns `(sum, carry)`; the sum is a result cell and
/// the carry a result cell when `last`, otherwise a temporary.
fn full_add(b: &mut KernelBuilder, x: usize, y: usize, cin: usize, last: bool) -> (usize, usize) {
    use GateKind::*;
    match b.gate_set() {
        GateSet::Full => {
            let nc = b.gate(Imaj3, &[x, y, cin]);
            let nc2 = b.copy(nc);
            let ns = b.gate(Imaj5, &[x, y, cin, nc, nc2]);
            let s = b.gate_result(Not, &[ns]);
            let c = if last { b.gate_result(Not, &[nc]) } else { b.gate(Not, &[nc]) };
            b.free_all(&[nc, nc2, ns]);
            (s, c)
        }
        GateSet::NandNotCopy => {
            let t1 = b.gate(Nand, &[x, y]);
            let t2 = b.gate(Nand, &[x, t1]);
            let t3 = b.gate(Nand, &[y, t1]);
            let t4 = b.gate(Nand, &[t2, t3]);
            let t5 = b.gate(Nand, &[t4, cin]);
            let t6 = b.gate(Nand, &[t4, t5]);
            let t7 = b.gate(Nand, &[cin, t5]);
            let s = b.gate_result(Nand, &[t6, t7]);
            let c = if last { b.gate_result(Nand, &[t1, t5]) } else { b.gate(Nand, &[t1, t5]) };
            b.free_all(&[t1, t2, t3, t4, t5, t6, t7]);
            (s, c)
        }
    }
}

fn operand_bit(b: &KernelBuilder, word: &[usize], i: usize, like: usize) -> usize {
    word.get(i).copied().unwrap_or_else(|| b.zero_like(like))
}

/// Ripple-carry `a + c` over `max(len)` bits; the result has one more bit.
/// The carry into bit 0 is the constant 0, so every bit is a full add.
pub fn add(b: &mut KernelBuilder, a: &[usize], c: &[usize]) -> Word {
    let n = a.len().max(c.len());
    assert!(n >= 1, "add needs at least one bit");
    let like = a.first().or(c.first()).copied().expect("nonempty operand");
    let mut carry = b.zero_like(like);
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let x = operand_bit(b, a, i, like);
        let y = operand_bit(b, c, i, like);
        let last = i + 1 == n;
        let (s, co) = full_add(b, x, y, carry, last);
        if i > 0 {
            b.free(carry);
        }
        out.push(s);
        carry = co;
    }
    out.push(carry);
    out
}

/// `acc + (x << k)`: the low `k` bits of `acc` pass through untouched.
pub fn add_shifted(b: &mut KernelBuilder, acc: &[usize], x: &[usize], k: usize) -> Word {
    if acc.len() <= k {
        let mut out = acc.to_vec();
        let like = acc.first().or(x.first()).copied().expect("nonempty operand");
        while out.len() < k {
            out.push(b.zero_like(like));
        }
        out.extend_from_slice(x);
        return out;
    }
    let mut out = acc[..k].to_vec();
    out.extend(add(b, &acc[k..], x));
    out
}

/// Unsigned `x >= t` via the borrow chain of `x - t`; no difference bits are
/// produced. Takes `5n + 1` gates for `n = max(len)`.
pub fn threshold(b: &mut KernelBuilder, x: &[usize], t: &[usize], out: Option<usize>) -> usize {
    use GateKind::*;
    let n = x.len().max(t.len());
    assert!(n >= 1, "threshold needs at least one bit");
    let like = x.first().or(t.first()).copied().expect("nonempty operand");
    let mut borrow = b.zero_like(like);
    for i in 0..n {
        let xi = operand_bit(b, x, i, like);
        let ti = operand_bit(b, t, i, like);
        let nx = b.gate(Not, &[xi]);
        let n1 = b.gate(Nand, &[nx, borrow]);
        let n2 = b.gate(Nand, &[nx, ti]);
        let n3 = b.gate(Nand, &[ti, borrow]);
        let bout = b.gate(Nand3, &[n1, n2, n3]);
        b.free_all(&[nx, n1, n2, n3, borrow]);
        borrow = bout;
    }
    let r = match out {
        Some(o) => {
            b.gate_into(Not, &[borrow], o);
            o
        }
        None => b.gate_result(Not, &[borrow]),
    };
    b.free(borrow);
    r
}

/// Operand of a popcount tree: cells plus the largest value they can hold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Counted {
    pub word: Word,
    pub max: u128,
}

/// Adds two counted operands, trimming the result to the width its maximum
/// needs. Consumes both operands.
pub fn add_counted(b: &mut KernelBuilder, x: Counted, y: Counted) -> Counted {
    let max = x.max + y.max;
    let mut word = add(b, &x.word, &y.word);
    let keep = width_for(max);
    for &s in &word[keep..] {
        b.free(s);
    }
    word.truncate(keep);
    b.free_all(&x.word);
    b.free_all(&y.word);
    Counted { word, max }
}

/// Pairwise adder tree over counted operands; an odd operand at any level is
/// carried to the next level unchanged.
pub fn sum_tree(b: &mut KernelBuilder, mut level: Vec<Counted>) -> Counted {
    assert!(!level.is_empty(), "sum of nothing");
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(x) = it.next() {
            match it.next() {
                Some(y) => next.push(add_counted(b, x, y)),
                None => next.push(x),
            }
        }
        level = next;
    }
    level.pop().expect("one operand left")
}

/// `acc + (x << k)` over counted operands, trimmed to the width the sum's
/// maximum needs. Consumes both operands; with no accumulator the shift is
/// free (constant zeros below `x`).
pub fn accumulate_shifted(b: &mut KernelBuilder, acc: Option<Counted>, x: Counted, k: usize) -> Counted {
    let shifted_max = x.max << k;
    let Some(acc) = acc else {
        let mut word: Word = (0..k).map(|_| b.zero_like(x.word[0])).collect();
        word.extend(x.word);
        return Counted { word, max: shifted_max };
    };
    let max = acc.max + shifted_max;
    let mut word = add_shifted(b, &acc.word, &x.word, k);
    let keep = width_for(max);
    let kept: BTreeSet<usize> = word.iter().take(keep).copied().collect();
    for &s in acc.word.iter().chain(&x.word).chain(word.iter().skip(keep)) {
        if !kept.contains(&s) {
            b.free(s);
        }
    }
    word.truncate(keep);
    Counted { word, max }
}

/// Number of ones among `bits`, in `width_for(bits.len())` cells. The input
/// cells are consumed.
pub fn popcount(b: &mut KernelBuilder, bits: &[usize]) -> Counted {
    assert!(!bits.is_empty(), "popcount needs at least one bit");
    sum_tree(
        b,
        bits.iter()
            .map(|&s| Counted { word: vec![s], max: 1 })
            .collect(),
    )
}

/// `2 * popcount(bits)`: the doubling is a constant-0 cell placed below the
/// count, so no gate is added. Subtracting the input count is left to the
/// threshold constant.
pub fn affine_popcount(b: &mut KernelBuilder, bits: &[usize]) -> Counted {
    let pc = popcount(b, bits);
    double(b, pc)
}

/// `2 * x` by placing a constant 0 below the least significant cell.
pub fn double(b: &KernelBuilder, x: Counted) -> Counted {
    let mut word = vec![b.zero_like(x.word[0])];
    word.extend(x.word);
    Counted { word, max: x.max * 2 }
}

/// Scales a field by `2^shift` in place by overwriting cells with 0 and
/// relabelling them; only writes are emitted. Bits shifted out are lost.
pub fn shift_batch_norm(b: &mut KernelBuilder, field: &[usize], shift: i64) -> Result<Word, KernelError> {
    let n = field.len();
    if shift.unsigned_abs() as usize >= n.max(1) && shift != 0 {
        return Err(KernelError::ShiftOutOfRange { shift, width: n });
    }
    let k = shift.unsigned_abs() as usize;
    if k == 0 {
        return Ok(field.to_vec());
    }
    let fresh = |b: &mut KernelBuilder, cells: &[usize]| -> Vec<usize> {
        cells
            .iter()
            .map(|&s| {
                if b.is_const(s) {
                    s
                } else {
                    b.write_fill(s, false);
                    s
                }
            })
            .collect()
    };
    if shift > 0 {
        let top = fresh(b, &field[n - k..]);
        let mut out = top;
        out.extend_from_slice(&field[..n - k]);
        Ok(out)
    } else {
        let low = fresh(b, &field[..k]);
        let mut out = field[k..].to_vec();
        out.extend(low);
        Ok(out)
    }
}

/// OR of `bits` as NAND over their complements, using an AND tree when there
/// are more than two inputs.
pub fn pool_or(b: &mut KernelBuilder, bits: &[usize], out: Option<usize>) -> usize {
    use GateKind::*;
    assert!(bits.len() >= 2, "pooling needs at least two inputs");
    let mut level: Vec<usize> = bits.iter().map(|&s| b.gate(Not, &[s])).collect();
    while level.len() > 2 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(x) = it.next() {
            match it.next() {
                Some(y) => {
                    let n = b.gate(Nand, &[x, y]);
                    let a = b.gate(Not, &[n]);
                    b.free_all(&[x, y, n]);
                    next.push(a);
                }
                None => next.push(x),
            }
        }
        level = next;
    }
    let r = match out {
        Some(o) => {
            b.gate_into(Nand, &level, o);
            o
        }
        None => b.gate_result(Nand, &level),
    };
    b.free_all(&level);
    r
}

/// Shift-and-add product of two unsigned words, `len(a) + len(m)` bits.
pub fn multiply(b: &mut KernelBuilder, a: &[usize], m: &[usize]) -> Word {
    use GateKind::*;
    assert!(!a.is_empty() && !m.is_empty(), "multiply needs nonempty operands");
    let partial = |b: &mut KernelBuilder, mj: usize| -> Word {
        a.iter()
            .map(|&ai| {
                let n = b.gate(Nand, &[ai, mj]);
                let r = b.gate(Not, &[n]);
                b.free(n);
                r
            })
            .collect()
    };
    let mut acc = partial(b, m[0]);
    for (j, &mj) in m.iter().enumerate().skip(1) {
        let pp = partial(b, mj);
        // With `acc` no wider than the shift, the partial product is placed
        // above it as is and stays live.
        let summed = acc.len() > j;
        let next = add_shifted(b, &acc, &pp, j);
        if summed {
            for &s in acc.iter().skip(j) {
                b.free(s);
            }
            b.free_all(&pp);
        }
        acc = next;
    }
    let like = acc[0];
    while acc.len() < a.len() + m.len() {
        acc.push(b.zero_like(like));
    }
    acc
}
