mod common;

use proptest::prelude::*;
use saris_core::cluster::*;
use saris_core::codegen::{distribute, OptConfig};
use saris_core::harness::{tune, SuiteConfig};
use saris_core::ir::*;
use saris_core::vm::{run_to_completion, BankArbiter};

fn jacobi() -> StencilSpec {
    catalog_kernel("jacobi_2d").unwrap()
}

fn run(spec: &StencilSpec, variant: Variant, opt: &OptConfig) -> ClusterMetrics {
    run_cluster(spec, variant, default_tile(spec), opt, &ClusterConfig::default()).unwrap()
}

#[test]
fn a_64_square_interior_splits_into_16_by_32_per_core() {
    let shape = TileShape {
        extent: [66, 66, 1],
        halo: [1, 1, 0],
    };
    let work = distribute(&shape, [4, 2]);
    assert_eq!(work.len(), 8);
    for w in &work {
        assert_eq!((w.xs.len(), w.ys.len(), w.zs.len()), (16, 32, 1));
    }
}

#[test]
fn cores_together_do_every_point_once() {
    for spec in [jacobi(), catalog_kernel("box3d1r").unwrap()] {
        for variant in Variant::ALL {
            let m = run(&spec, variant, &OptConfig::default());
            let per_point = flop_count(&spec).unwrap() as u64;
            assert_eq!(m.flops, m.points as u64 * per_point, "{} {variant}", spec.name);
            assert_eq!(m.cores.iter().map(|c| c.flops).sum::<u64>(), m.flops);
            assert_eq!(m.points, default_tile(&spec).interior_points());
        }
    }
}

#[test]
fn stream_variant_keeps_the_fpu_busier() {
    let spec = jacobi();
    let base = run(&spec, Variant::Base, &OptConfig::default());
    let saris = run(&spec, Variant::Saris, &OptConfig::default());
    assert!(saris.fpu_util >= base.fpu_util);
    assert!(saris.cycles < base.cycles);
}

#[test]
fn tuned_jacobi_speedup_is_in_the_expected_range() {
    let spec = jacobi();
    let cfg = SuiteConfig::new(vec![spec.clone()]);
    let shape = default_tile(&spec);
    let tuned = |v| tune(&spec, v, shape, &cfg.candidates(), &cfg.cluster).unwrap();
    let s = tuned(Variant::Base).cycles as f64 / tuned(Variant::Saris).cycles as f64;
    assert!((2.0..=2.8).contains(&s), "{s}");
}

#[test]
fn finish_ratios_are_normalized_to_the_slowest_core() {
    let m = run(&catalog_kernel("star2d3r").unwrap(), Variant::Saris, &OptConfig::default());
    let r = measure_imbalance(&m);
    assert_eq!(r.len(), 8);
    assert!(r.iter().all(|x| *x > 0.0 && *x <= 1.0));
    assert!(r.iter().any(|x| *x == 1.0));
    assert_eq!(r, m.finish_ratios);
    assert!(m.imbalance_max() >= 1.0);
}

#[test]
fn single_core_without_dma_matches_the_core_model() {
    let spec = common::star7();
    let shape = TileShape::for_spec(&spec, 8).unwrap();
    let opt = OptConfig::single_core();
    for variant in Variant::ALL {
        let kernel = compile_variant(&spec, shape, &opt, variant).unwrap();
        let cfg = ClusterConfig {
            dma: DmaConfig {
                enabled: false,
                ..DmaConfig::default()
            },
            ..ClusterConfig::default()
        };
        let m = simulate(&spec, &kernel, &cfg).unwrap();
        let tile = saris_core::reference::Tile::random(&spec, shape, cfg.seed);
        let mut mem = load_tcdm(&spec, &kernel, &tile).unwrap();
        let alone = run_to_completion(&kernel.cores[0], &mut mem, cfg.timing).unwrap();
        assert_eq!(m.cycles, alone.cycles, "{variant}");
        assert_eq!(m.dma_cycles, 0);
    }
}

#[test]
fn eight_requests_to_one_bank_grant_one() {
    let mut arb = BankArbiter::new(32);
    let reqs: Vec<(usize, usize)> = (0..8).map(|c| (c, 5)).collect();
    let g = arb.arbitrate(&reqs);
    assert_eq!(g.iter().filter(|x| **x).count(), 1);
    assert_eq!(g.iter().filter(|x| !**x).count(), 7);
}

#[test]
fn simulation_is_deterministic() {
    let spec = catalog_kernel("j2d5pt").unwrap();
    let a = run(&spec, Variant::Saris, &OptConfig::default());
    let b = run(&spec, Variant::Saris, &OptConfig::default());
    assert_eq!(a, b);
}

#[test]
fn dma_moves_the_planned_bytes() {
    let spec = jacobi();
    let kernel = compile_variant(&spec, default_tile(&spec), &OptConfig::default(), Variant::Saris).unwrap();
    let planned: u64 = plan_transfers(&spec, &kernel.layout).iter().map(DmaTransfer::bytes).sum();
    let m = simulate(&spec, &kernel, &ClusterConfig::default()).unwrap();
    assert_eq!(m.dma_bytes, planned);
    assert!(m.dma_util > 0.0 && m.dma_util <= 1.0);
    assert!(m.cycles >= m.core_cycles.max(m.dma_cycles));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distribution_covers_the_interior_disjointly(
        nx in 3usize..40,
        ny in 3usize..40,
        h in 1usize..4,
        ix in 1usize..=4,
        iy in 1usize..=2,
    ) {
        let shape = TileShape { extent: [nx + 2 * h, ny + 2 * h, 1], halo: [h, h, 0] };
        let work = distribute(&shape, [ix, iy]);
        let mut seen = vec![0u8; shape.cells()];
        for w in &work {
            for &y in &w.ys {
                for &x in &w.xs {
                    prop_assert!(w.contains(x, y, 0));
                    seen[x + shape.extent[0] * y] += 1;
                }
            }
        }
        for y in 0..shape.extent[1] {
            for x in 0..shape.extent[0] {
                let inside = (h..h + nx).contains(&x) && (h..h + ny).contains(&y);
                prop_assert_eq!(seen[x + shape.extent[0] * y], u8::from(inside));
            }
        }
        prop_assert_eq!(work.iter().map(|w| w.points()).sum::<usize>(), nx * ny);
    }

    #[test]
    fn geomean_lies_between_min_and_max(v in prop::collection::vec(0.01f64..100.0, 1..20)) {
        let g = geomean(v.iter().copied());
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(0.0, f64::max);
        prop_assert!(g >= lo * (1.0 - 1e-12) && g <= hi * (1.0 + 1e-12));
    }
}
