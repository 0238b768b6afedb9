use spinpim_core::device::{MtjSpec, MtjState};
use spinpim_core::gate::{
    combined_resistance, operates_at, parasitic_failure_threshold, truth_table, voltage_window, GateKind, ResistiveNetwork,
};
use spinpim_core::kernels::GateSet;

fn modern() -> MtjSpec<f64> {
    MtjSpec::modern()
}

fn future() -> MtjSpec<f64> {
    MtjSpec::future()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Reference signatures and margins in mV.
const MODERN_TABLE: [(GateKind, f64, f64); 5] = [
    (GateKind::Not, 336.0, 168.0),
    (GateKind::Nand, 243.0, 59.0),
    (GateKind::Nor, 202.0, 25.0),
    (GateKind::Imaj3, 186.0, 15.9),
    (GateKind::Imaj5, 161.0, 5.7),
];

const FUTURE_TABLE: [(GateKind, f64, f64); 5] = [
    (GateKind::Not, 172.0, 191.0),
    (GateKind::Nand, 112.0, 82.0),
    (GateKind::Nor, 64.0, 13.6),
    (GateKind::Imaj3, 61.0, 11.0),
    (GateKind::Imaj5, 56.0, 3.8),
];

#[test]
fn modern_windows_match_reference_values() {
    for (kind, sig, margin) in MODERN_TABLE {
        let w = *voltage_window(kind, &modern(), 0.0).window().expect("feasible");
        assert!(rel(w.signature * 1e3, sig) < 0.03, "{kind} signature {}", w.signature * 1e3);
        assert!(rel(w.margin * 1e3, margin) < 0.03, "{kind} margin {}", w.margin * 1e3);
    }
}

#[test]
fn future_windows_match_reference_values() {
    for (kind, sig, margin) in FUTURE_TABLE {
        let w = *voltage_window(kind, &future(), 0.0).window().expect("feasible");
        let sig_tol = if kind == GateKind::Imaj5 { 0.10 } else { 0.03 };
        assert!(rel(w.signature * 1e3, sig) < sig_tol, "{kind} signature {}", w.signature * 1e3);
        assert!(rel(w.margin * 1e3, margin) < 0.03, "{kind} margin {}", w.margin * 1e3);
    }
}

fn pair(a: bool, b: bool) -> ResistiveNetwork<f64> {
    ResistiveNetwork::new(vec![MtjState::from_bit(a), MtjState::from_bit(b)], MtjState::Parallel)
}

#[test]
fn two_input_resistances_match_reference_values() {
    let cases = [
        (modern(), [(true, true, 6820.0), (false, true, 5354.0), (false, false, 4725.0)]),
        (future(), [(true, true, 50900.0), (false, true, 23590.0), (false, false, 19050.0)]),
    ];
    for (spec, rows) in cases {
        for (a, b, ohms) in rows {
            let r = combined_resistance(&pair(a, b), &spec);
            assert!(rel(r, ohms) < 0.02, "{} {a}{b}: {r}", spec.name);
            assert_eq!(r, combined_resistance(&pair(b, a), &spec));
        }
    }
    assert_eq!(combined_resistance(&pair(false, true), &modern()).round(), 5354.0);
}

/// Boolean function of each gate, written out independently.
fn oracle_eval(kind: GateKind, x: &[bool]) -> bool {
    let ones = x.iter().filter(|&&b| b).count();
    match kind {
        GateKind::Not => !x[0],
        GateKind::Copy => x[0],
        GateKind::Nand | GateKind::Nand3 => !x.iter().all(|&b| b),
        GateKind::Nor => !x.iter().any(|&b| b),
        GateKind::Imaj3 => ones < 2,
        GateKind::Imaj5 => ones < 3,
    }
}

/// Window from first principles: the output junction is preset, a
/// combination must switch it when the gate output differs from the preset,
/// and the chain current at voltage V is V / (R_inputs_parallel + R_out).
fn oracle_window(kind: GateKind, spec: &MtjSpec<f64>, parasitic: f64) -> (f64, f64) {
    let r = |s: bool| if s { spec.r_ap } else { spec.r_p };
    let preset = kind == GateKind::Copy;
    let n = kind.fan_in();
    let mut v_low = f64::NEG_INFINITY;
    let mut v_high = f64::INFINITY;
    for i in 0..1u32 << n {
        let x: Vec<bool> = (0..n).map(|j| i >> j & 1 == 1).collect();
        let g: f64 = x.iter().map(|&b| 1.0 / r(b)).sum();
        let total = 1.0 / g + r(preset) + parasitic;
        let v = spec.i_c * total;
        if oracle_eval(kind, &x) != preset {
            v_low = v_low.max(v);
        } else {
            v_high = v_high.min(v);
        }
    }
    (v_low, v_high)
}

#[test]
fn windows_agree_with_first_principles_oracle() {
    for spec in [modern(), future()] {
        for kind in GateKind::ALL {
            for parasitic in [0.0, 100.0, 800.0] {
                let (lo, hi) = oracle_window(kind, &spec, parasitic);
                let w = voltage_window(kind, &spec, parasitic);
                match w.window() {
                    Some(w) => {
                        assert!(rel(w.v_low, lo) < 1e-12 && rel(w.v_high, hi) < 1e-12, "{kind}");
                        assert!(lo < hi);
                    }
                    None => assert!(lo >= hi, "{kind} should be feasible"),
                }
            }
        }
    }
}

#[test]
fn nor_boundary_voltages() {
    let w = *voltage_window(GateKind::Nor, &modern(), 0.0).window().unwrap();
    assert!((w.v_low * 1e3 - 189.0).abs() < 0.05);
    assert!((w.v_high * 1e3 - 214.16).abs() < 0.05);
}

#[test]
fn truth_tables_match_oracle() {
    for kind in GateKind::ALL {
        let table = truth_table(kind);
        assert_eq!(table.len(), 1 << kind.fan_in());
        for (x, out) in table {
            assert_eq!(out, oracle_eval(kind, &x), "{kind} {x:?}");
            assert_eq!(out, kind.eval(&x));
        }
    }
}

#[test]
fn nand_parasitic_thresholds_fall_in_expected_ranges() {
    let m = parasitic_failure_threshold(GateKind::Nand, &modern()).unwrap();
    let f = parasitic_failure_threshold(GateKind::Nand, &future()).unwrap();
    assert!((650.0..=800.0).contains(&m), "modern {m}");
    assert!((12_000.0..=16_000.0).contains(&f), "future {f}");
    // Oracle: signature over threshold current minus the hardest switching chain.
    let (lo, hi) = oracle_window(GateKind::Nand, &modern(), 0.0);
    let expect = (lo + hi) / 2.0 / modern().i_c - lo / modern().i_c;
    assert!(rel(m, expect) < 1e-12);
}

#[test]
fn default_gate_set_survives_typical_parasitics() {
    for spec in [modern(), future()] {
        for kind in GateSet::NandNotCopy.gates() {
            assert!(operates_at(kind, &spec, 100.0), "{kind} on {}", spec.name);
        }
    }
    assert!(!operates_at(GateKind::Nand, &modern(), 800.0));
}

#[test]
fn device_tables() {
    let m = modern();
    assert_eq!((m.r_p, m.r_ap, m.i_c, m.t_switch), (3150.0, 7340.0, 40e-6, 3e-9));
    assert!((m.r_ap / m.r_p - 2.33).abs() < 0.005);
    assert!((m.write_current() - 60e-6).abs() < 1e-15);
    let f = future();
    assert!((f.r_p - 12731.7).abs() < 0.1);
    assert_eq!((f.i_c, f.t_switch), (3e-6, 1e-9));
    assert!((f.write_current() - 4.5e-6).abs() < 1e-18);
}
