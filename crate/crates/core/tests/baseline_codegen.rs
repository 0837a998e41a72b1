mod common;

use saris_core::baseline::compile_baseline;
use saris_core::codegen::OptConfig;
use saris_core::ir::*;
use saris_core::isa::{compute_instruction_mix, Category, Instr};

fn star7_body(opt: &OptConfig) -> Vec<Instr> {
    let s = common::star7();
    let p = compile_baseline(&s, TileShape::for_spec(&s, 16).unwrap(), opt).unwrap();
    p.cores[0].point_loop_body().to_vec()
}

#[test]
fn star7_body_breaks_down_like_the_scalar_listing() {
    let body = star7_body(&OptConfig::single_core());
    let count = |c: Category| body.iter().filter(|i| i.category() == c).map(|i| i.weight()).sum::<usize>();
    assert_eq!(body.len(), 20);
    assert_eq!(count(Category::Memory), 8);
    assert_eq!(count(Category::Address), 4);
    assert_eq!(count(Category::Compute), 7);
    assert_eq!(count(Category::Control), 1);
    let m = compute_instruction_mix(&body);
    assert_eq!(m.compute, 7.0 / 20.0);
    assert!((m.memory + m.address - 12.0 / 20.0).abs() < 1e-12);
    assert_eq!(m.control, 1.0 / 20.0);
}

#[test]
fn register_tiling_trims_the_star7_body() {
    let opt = OptConfig {
        register_tiling: true,
        ..OptConfig::single_core()
    };
    let body = star7_body(&opt);
    assert!(body.len() <= 18);
    assert!(compute_instruction_mix(&body).compute <= 0.39);
}

#[test]
fn identity_moves_data_without_compute() {
    let s = common::identity();
    let p = compile_baseline(&s, TileShape::for_spec(&s, 16).unwrap(), &OptConfig::single_core()).unwrap();
    let m = compute_instruction_mix(p.cores[0].point_loop_body());
    assert_eq!(m.compute, 0.0);
    assert!(m.memory > 0.0 && m.control > 0.0);
}

#[test]
fn mix_ratios_sum_to_one_and_empty_is_degenerate() {
    let m = compute_instruction_mix(&[]);
    assert!(m.degenerate);
    assert_eq!(m.compute + m.memory + m.address + m.control, 0.0);
    for s in catalog() {
        let p = compile_baseline(&s, cluster_tile(&s), &OptConfig::default()).unwrap();
        let m = compute_instruction_mix(p.cores[0].point_loop_body());
        assert!((m.compute + m.memory + m.address + m.control - 1.0).abs() < 1e-12, "{}", s.name);
    }
}

fn cluster_tile(s: &StencilSpec) -> TileShape {
    TileShape::for_spec(s, if s.dims == 2 { 64 } else { 16 }).unwrap()
}

#[test]
fn register_bound_kernels_spill_or_shrink() {
    for name in ["box3d1r", "j3d27pt"] {
        let s = catalog_kernel(name).unwrap();
        for u in [1, 2, 4] {
            let opt = OptConfig {
                unroll: u,
                ..OptConfig::default()
            };
            let p = compile_baseline(&s, cluster_tile(&s), &opt).unwrap();
            let points = p.cores[0].points_per_iteration;
            assert!(p.stack_accesses > 0 || points < u, "{name} u{u}");
        }
    }
}

#[test]
fn wide_radius_kernels_compile_for_every_unroll() {
    for s in catalog() {
        for u in [1, 2, 4] {
            for policy in [ReassocPolicy::Source, ReassocPolicy::Balanced] {
                let opt = OptConfig {
                    unroll: u,
                    policy,
                    ..OptConfig::default()
                };
                compile_baseline(&s, cluster_tile(&s), &opt).unwrap_or_else(|e| panic!("{} u{u}: {e}", s.name));
            }
        }
    }
}
