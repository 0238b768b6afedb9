use spinpim_core::array::{CellVariant, TileConfig};
use spinpim_core::device::MtjSpec;
use spinpim_core::layout::{
    compile, layout_conv, layout_fc, layout_layer, plan_communication, CompileOptions, Geometry, LayerPlan, LayoutError, LayoutOptions,
    TapSource,
};
use spinpim_core::network::{Dims, LayerSpec, NetworkSpec, Padding};

fn geom(size: usize) -> Geometry {
    Geometry::of(&TileConfig::<f64>::square(size, CellVariant::OneTTransposed, MtjSpec::future()))
}

fn with_g(g: usize) -> LayoutOptions {
    LayoutOptions {
        g: Some(g),
        ..Default::default()
    }
}

fn input_copies(p: &LayerPlan) -> usize {
    (0..p.groups_per_wave)
        .flat_map(|j| (0..p.g).map(move |k| (j, k)))
        .map(|(j, k)| p.lane_taps(j, k).iter().filter(|t| matches!(t, TapSource::Input(_))).count())
        .sum()
}

fn check_invariants(p: &LayerPlan) {
    let geom = p.geometry;
    assert!(p.peak_slots() <= geom.slots(), "{}", p.layer.name);
    assert!(p.groups_per_tile * p.g <= geom.lanes());
    assert_eq!(p.tiles, p.groups_per_wave.div_ceil(p.groups_per_tile));
    assert_eq!(p.memory_bytes(), p.tiles as u64 * geom.capacity_bytes());
    assert_eq!(p.share * p.g, p.layer.taps().div_ceil(p.g) * p.g);
}

#[test]
fn fully_connected_layers_take_one_group_per_output() {
    for (n, m, gs) in [(4, 3, [1, 2, 8]), (100, 17, [1, 2, 8]), (784, 256, [2, 4, 8])] {
        let l = LayerSpec::fc("f", n, m);
        for g in gs {
            let p = layout_fc(&l, &geom(1024), &with_g(g)).unwrap();
            assert_eq!(p.groups_per_wave, m);
            check_invariants(&p);
            // Every group holds its own copy of the full input vector.
            assert_eq!(input_copies(&p), n * m);
        }
    }
}

#[test]
fn waves_split_channels() {
    let l = LayerSpec::fc("f", 64, 10);
    for sigma in 1..=4 {
        let p = layout_fc(
            &l,
            &geom(256),
            &LayoutOptions {
                sigma,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(p.groups_per_wave, 10usize.div_ceil(sigma));
        assert_eq!(p.summary().groups, p.groups_per_wave * sigma);
        check_invariants(&p);
    }
}

#[test]
fn conv_groups_cover_every_position_and_filter() {
    let l = LayerSpec::conv("c", Dims::new(7, 7, 1), 2, (3, 3), Padding::same(3, 3), None);
    let p = layout_conv(&l, &geom(256), &with_g(1)).unwrap();
    assert_eq!(p.groups_per_wave, 98);
    check_invariants(&p);
    // Interior windows see nine inputs, edges six, corners four: 19 per axis.
    assert_eq!(input_copies(&p), 19 * 19 * 2);
    assert!((p.duplication() - 722.0 / 49.0).abs() < 1e-12);
}

#[test]
fn pooled_conv_keeps_windows_together() {
    let l = LayerSpec::conv("c", Dims::new(8, 8, 2), 3, (3, 3), Padding::same(3, 3), Some((2, 2)));
    let p = layout_conv(&l, &geom(512), &LayoutOptions::default()).unwrap();
    assert_eq!(p.positions, 64);
    assert_eq!(p.groups_per_wave, 192);
    let mut seen = std::collections::BTreeSet::new();
    for j in 0..p.positions {
        assert!(seen.insert(p.position(j)));
    }
    // Four consecutive groups form one 2x2 window.
    let window: Vec<_> = (0..4).map(|j| p.position(j)).collect();
    assert_eq!(window, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    check_invariants(&p);
}

#[test]
fn automatic_group_size_is_minimal() {
    let layers = [
        LayerSpec::fc("a", 1024, 8),
        LayerSpec::fc("b", 2048, 4),
        LayerSpec::fc("c", 300, 5).with_input_bits(8),
        LayerSpec::conv("d", Dims::new(8, 8, 64), 4, (3, 3), Padding::same(3, 3), None),
    ];
    let g = geom(256);
    for l in layers {
        let p = layout_layer(0, &l, &g, &LayoutOptions::default()).unwrap();
        check_invariants(&p);
        if p.g > 1 {
            match layout_layer(0, &l, &g, &with_g(p.g - 1)) {
                Err(LayoutError::DoesNotFit { minimal_g, .. }) => assert_eq!(minimal_g, Some(p.g), "{}", l.name),
                other => panic!("{}: g - 1 should not fit: {other:?}", l.name),
            }
        }
    }
}

#[test]
fn communication_writes_every_input_copy() {
    let net = NetworkSpec::new(
        "n",
        vec![
            LayerSpec::conv("c1", Dims::new(6, 6, 1), 2, (3, 3), Padding::same(3, 3), None),
            LayerSpec::conv("c2", Dims::new(6, 6, 2), 3, (3, 3), Padding::same(3, 3), Some((2, 2))),
            LayerSpec::fc("f", 27, 5),
        ],
    )
    .unwrap();
    let plan = compile(&net, &geom(256), &CompileOptions::default()).unwrap();
    for pair in plan.layers.windows(2) {
        let comm = plan_communication(&pair[0], &pair[1]).unwrap();
        assert_eq!(comm.written_bits, input_copies(&pair[1]));
        assert!(comm.source_rows > 0);
        let mut keys: Vec<_> = comm.transfers.iter().map(|t| (t.src_tile, t.src_row, t.dst_tile, t.dst_row)).collect();
        let before = keys.len();
        keys.dedup();
        assert_eq!(keys.len(), before);
    }
    assert!(plan_communication(&plan.layers[0], &plan.layers[2]).is_err());
}

#[test]
fn network_memory_is_the_sum_of_layers() {
    for name in ["finn-fc", "bionet", "finn-cifar"] {
        let net = NetworkSpec::preset(name).unwrap();
        let plan = compile(&net, &geom(1024), &CompileOptions::default()).unwrap();
        let sum: u64 = plan.layers.iter().map(|l| l.memory_bytes()).sum();
        assert_eq!(plan.memory_bytes(), sum);
        for l in &plan.layers {
            check_invariants(l);
        }
    }
}

#[test]
fn larger_tiles_never_need_more_memory_per_group() {
    let l = LayerSpec::fc("f", 512, 64);
    let small = layout_fc(&l, &geom(512), &LayoutOptions::default()).unwrap();
    let large = layout_fc(&l, &geom(2048), &LayoutOptions::default()).unwrap();
    assert!(large.g <= small.g);
    assert!(large.tiles <= small.tiles);
}

#[test]
fn oversized_layers_fail_with_a_fit_error() {
    let l = LayerSpec::fc("huge", 1 << 16, 4);
    match layout_fc(&l, &geom(64), &LayoutOptions::default()) {
        Err(LayoutError::DoesNotFit { minimal_g: None, .. }) => {}
        other => panic!("expected a fit error, got {other:?}"),
    }
    assert!(layout_fc(&LayerSpec::conv("c", Dims::new(3, 3, 1), 1, (3, 3), Padding::default(), None), &geom(64), &LayoutOptions::default()).is_err());
}
