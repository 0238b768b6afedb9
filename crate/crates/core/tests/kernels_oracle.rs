mod common;

use common::{all_pairs, bits_of, run_on_tile, value_of};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinpim_core::array::CellVariant;
use spinpim_core::kernels::{self, GateSet, KernelBuilder};

const VARIANTS: [CellVariant; 2] = [CellVariant::OneTTransposed, CellVariant::ThreeT];
const SETS: [GateSet; 2] = [GateSet::Full, GateSet::NandNotCopy];

#[test]
fn xnor_truth_table_on_tile() {
    for variant in VARIANTS {
        for set in SETS {
            let cases = all_pairs(1, 1);
            let run = run_on_tile(variant, set, &cases, |b, x| vec![kernels::xnor(b, x[0], x[1], None)]);
            for (c, out) in cases.iter().zip(&run.outputs) {
                assert_eq!(out[0], c[0] == c[1], "{variant:?} {set:?} {c:?}");
            }
        }
    }
}

#[test]
fn xnor_nor_form_takes_four_steps() {
    let mut b = KernelBuilder::new(CellVariant::ThreeT, 1, GateSet::Full);
    let a = b.alloc_data(0);
    let w = b.alloc_data(0);
    kernels::xnor(&mut b, a, w, None);
    assert_eq!(b.steps(), 4);
}

#[test]
fn add_is_exhaustively_exact_up_to_six_bits() {
    for n in 1..=6 {
        for set in SETS {
            let cases = all_pairs(n, n);
            let run = run_on_tile(CellVariant::OneTTransposed, set, &cases, |b, x| kernels::add(b, &x[..n], &x[n..]));
            for (c, out) in cases.iter().zip(&run.outputs) {
                let (x, y) = (value_of(&c[..n]), value_of(&c[n..]));
                assert_eq!(value_of(out), x + y, "n={n} {set:?}: {x}+{y}");
            }
        }
    }
}

#[test]
fn add_on_three_t_tiles() {
    for n in 1..=3 {
        let cases = all_pairs(n, n);
        let run = run_on_tile(CellVariant::ThreeT, GateSet::Full, &cases, |b, x| kernels::add(b, &x[..n], &x[n..]));
        for (c, out) in cases.iter().zip(&run.outputs) {
            assert_eq!(value_of(out), value_of(&c[..n]) + value_of(&c[n..]));
        }
        assert_eq!(run.trace.steps, 5 * n);
    }
}

#[test]
fn add_step_counts() {
    for n in 1..=16 {
        for (set, per_bit) in [(GateSet::Full, 5), (GateSet::NandNotCopy, 9)] {
            let mut b = KernelBuilder::new(CellVariant::ThreeT, 1, set);
            let x: Vec<usize> = (0..n).map(|_| b.alloc_data(0)).collect();
            let y: Vec<usize> = (0..n).map(|_| b.alloc_data(0)).collect();
            kernels::add(&mut b, &x, &y);
            assert_eq!(b.steps(), per_bit * n, "n={n} {set:?}");
        }
    }
}

#[test]
fn zero_plus_zero_is_zero() {
    for n in [1, 5, 9] {
        let cases = vec![vec![false; 2 * n]];
        let run = run_on_tile(CellVariant::OneTTransposed, GateSet::Full, &cases, |b, x| kernels::add(b, &x[..n], &x[n..]));
        assert_eq!(value_of(&run.outputs[0]), 0);
    }
}

#[test]
fn threshold_is_exhaustively_exact_up_to_six_bits() {
    for n in 1..=6 {
        let cases = all_pairs(n, n);
        let run = run_on_tile(CellVariant::OneTTransposed, GateSet::NandNotCopy, &cases, |b, x| {
            vec![kernels::threshold(b, &x[..n], &x[n..], None)]
        });
        for (c, out) in cases.iter().zip(&run.outputs) {
            let (x, t) = (value_of(&c[..n]), value_of(&c[n..]));
            assert_eq!(out[0], x >= t, "n={n}: {x} >= {t}");
        }
        assert_eq!(run.trace.steps - run.trace.parity_copies, 5 * n + 1);
    }
}

#[test]
fn threshold_step_count_at_eight_bits() {
    let mut b = KernelBuilder::new(CellVariant::ThreeT, 1, GateSet::NandNotCopy);
    let x: Vec<usize> = (0..8).map(|_| b.alloc_data(0)).collect();
    let t: Vec<usize> = (0..8).map(|_| b.alloc_data(0)).collect();
    kernels::threshold(&mut b, &x, &t, None);
    assert_eq!(b.steps(), 41);
}

#[test]
fn multiply_is_exhaustively_exact_up_to_four_bits() {
    for n in 1..=4 {
        for m in 1..=4 {
            let cases = all_pairs(n, m);
            let run = run_on_tile(CellVariant::OneTTransposed, GateSet::Full, &cases, |b, x| {
                kernels::multiply(b, &x[..n], &x[n..])
            });
            for (c, out) in cases.iter().zip(&run.outputs) {
                let (a, k) = (value_of(&c[..n]), value_of(&c[n..]));
                assert_eq!(out.len(), n + m);
                assert_eq!(value_of(out), a * k, "{a} * {k}");
            }
        }
    }
}

#[test]
fn pool_matches_or_for_every_input() {
    for k in 2..=5 {
        let cases: Vec<Vec<bool>> = (0..1u64 << k).map(|v| bits_of(v, k)).collect();
        let run = run_on_tile(CellVariant::OneTTransposed, GateSet::NandNotCopy, &cases, |b, x| {
            vec![kernels::pool_or(b, x, None)]
        });
        for (c, out) in cases.iter().zip(&run.outputs) {
            assert_eq!(out[0], c.iter().any(|&b| b), "{c:?}");
        }
    }
}

/// Steps of a pairwise adder tree over `n` one-bit operands at five gates
/// per full-adder bit, following only operand maxima.
fn tree_steps(n: usize) -> usize {
    let width = |max: u64| (64 - max.leading_zeros()).max(1) as usize;
    let mut level = vec![1u64; n];
    let mut steps = 0;
    while level.len() > 1 {
        let mut next = Vec::new();
        for pair in level.chunks(2) {
            match pair {
                [a, b] => {
                    steps += 5 * width(*a).max(width(*b));
                    next.push(a + b);
                }
                [a] => next.push(*a),
                _ => unreachable!(),
            }
        }
        level = next;
    }
    steps
}

#[test]
fn popcount_matches_bit_count_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cases: Vec<Vec<bool>> = (0..10_240).map(|_| bits_of(rng.gen(), 64)).collect();
    for set in SETS {
        let run = run_on_tile(CellVariant::OneTTransposed, set, &cases, |b, x| kernels::popcount(b, x).word);
        for (c, out) in cases.iter().zip(&run.outputs) {
            assert_eq!(value_of(out), c.iter().filter(|&&b| b).count() as u64);
        }
    }
}

#[test]
fn popcount_steps_follow_the_adder_tree() {
    for n in [2, 3, 9, 17, 64, 100] {
        let mut b = KernelBuilder::new(CellVariant::ThreeT, 1, GateSet::Full);
        let bits: Vec<usize> = (0..n).map(|_| b.alloc_data(0)).collect();
        kernels::popcount(&mut b, &bits);
        assert_eq!(b.steps(), tree_steps(n), "n={n}");
    }
}

#[test]
fn popcount_extremes() {
    let cases = vec![vec![false; 9], vec![true; 9]];
    let run = run_on_tile(CellVariant::OneTTransposed, GateSet::Full, &cases, |b, x| kernels::popcount(b, x).word);
    assert_eq!(value_of(&run.outputs[0]), 0);
    assert_eq!(value_of(&run.outputs[1]), 9);
}

#[test]
fn affine_popcount_doubles_without_extra_steps() {
    let cases: Vec<Vec<bool>> = (0..1u64 << 9).map(|v| bits_of(v, 9)).collect();
    let plain = run_on_tile(CellVariant::OneTTransposed, GateSet::Full, &cases, |b, x| kernels::popcount(b, x).word);
    let affine = run_on_tile(CellVariant::OneTTransposed, GateSet::Full, &cases, |b, x| kernels::affine_popcount(b, x).word);
    assert_eq!(plain.trace.steps, affine.trace.steps);
    for (c, out) in cases.iter().zip(&affine.outputs) {
        let ones = c.iter().filter(|&&b| b).count() as i64;
        assert_eq!(value_of(out) as i64, 2 * ones);
        // The signed sum of the +-1 encoding is the doubled count minus N.
        assert_eq!(value_of(out) as i64 - 9, 2 * ones - 9);
    }
}

#[test]
fn shift_then_threshold_matches_scaled_comparison() {
    let n = 6;
    for shift in -3i64..=3 {
        let cases = all_pairs(n, n);
        let run = run_on_tile(CellVariant::OneTTransposed, GateSet::NandNotCopy, &cases, |b, x| {
            let shifted = kernels::shift_batch_norm(b, &x[..n], shift).expect("shift in range");
            vec![kernels::threshold(b, &shifted, &x[n..], None)]
        });
        for (c, out) in cases.iter().zip(&run.outputs) {
            let (x, t) = (value_of(&c[..n]), value_of(&c[n..]));
            let scaled = if shift >= 0 { (x << shift) & ((1 << n) - 1) } else { x >> -shift };
            assert_eq!(out[0], scaled >= t, "x={x} shift={shift} t={t}");
        }
    }
}

#[test]
fn shift_adds_no_logic_steps() {
    for shift in -4i64..=4 {
        let mut b = KernelBuilder::new(CellVariant::OneTTransposed, 8, GateSet::NandNotCopy);
        let f: Vec<usize> = (0..8).map(|_| b.alloc_data(0)).collect();
        let before = b.ops().len();
        kernels::shift_batch_norm(&mut b, &f, shift).unwrap();
        assert_eq!(b.steps(), 0);
        if shift == 0 {
            assert_eq!(b.ops().len(), before);
        }
    }
}
