mod common;

use proptest::prelude::*;
use saris_core::error::IrError;
use saris_core::ir::*;

#[test]
fn catalog_endpoints_match_published_rows() {
    let cat = catalog();
    let row = |s: &StencilSpec| (s.name.clone(), s.dims, s.radius, s.taps.len(), s.coeffs.len(), flop_count(s).unwrap());
    assert_eq!(row(&cat[0]), ("jacobi_2d".into(), 2, 1, 5, 1, 5));
    assert_eq!(row(&cat[7]), ("ac_iso_cd".into(), 3, 4, 26, 13, 38));
    assert_eq!(row(&cat[9]), ("j3d27pt".into(), 3, 1, 27, 28, 54));
}

#[test]
fn catalog_is_sorted_by_flops_and_valid() {
    let flops: Vec<usize> = catalog().iter().map(|s| flop_count(s).unwrap()).collect();
    assert!(flops.windows(2).all(|w| w[0] <= w[1]), "{flops:?}");
    for s in catalog() {
        s.validate().unwrap();
        let r = s.radius;
        assert!(s.taps.iter().all(|t| t.offset.chebyshev() <= r), "{}", s.name);
    }
}

#[test]
fn gol_and_j2d9pt_differ_only_in_geometry() {
    let a = catalog_kernel("j2d9pt").unwrap();
    let b = catalog_kernel("j2d9pt_gol").unwrap();
    assert_eq!((a.taps.len(), a.coeffs.len()), (b.taps.len(), b.coeffs.len()));
    assert_eq!(flop_count(&a).unwrap(), flop_count(&b).unwrap());
    assert_eq!((a.radius, b.radius), (2, 1));
}

#[test]
fn ac_iso_cd_reads_extra_arrays() {
    let s = catalog_kernel("ac_iso_cd").unwrap();
    assert!(s.read_arrays().len() >= 2);
    assert_eq!(s.taps.len(), 26);
}

#[test]
fn star7_counts_ten_flops() {
    let s = common::star7();
    // 1 mul + 3 add + 3 fma (2 each).
    assert_eq!(flop_count(&s).unwrap(), 1 + 3 + 3 * 2);
    assert_eq!(flop_count(&common::identity()).unwrap(), 0);
    assert_eq!(flop_count(&catalog_kernel("star2d3r").unwrap()).unwrap(), 25);
}

#[test]
fn parse_errors_name_the_problem() {
    let no_taps = "[grid]\nname = x\ndims = 2\nradius = 1\n[arrays]\ninp input\nout output\n[taps]\n[expr]\nout = c\n";
    assert!(matches!(parse_spec(no_taps), Err(IrError::NoTaps)));
    let far = common::STAR7.replace("zp inp  0  0  1", "zp inp  0  0  2");
    match parse_spec(&far) {
        Err(IrError::TapBeyondRadius { name, offset, .. }) => {
            assert_eq!(name, "zp");
            assert_eq!(offset, Offset::new(0, 0, 2));
        }
        other => panic!("{other:?}"),
    }
    match parse_spec("[grid]\nname = x\ndims = two\n") {
        Err(IrError::Syntax { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tile_shape_interior_must_be_positive() {
    assert!(TileShape::new([2, 8, 1], [1, 1, 0]).is_err());
    let t = TileShape::new([64, 64, 1], [1, 1, 0]).unwrap();
    assert_eq!(t.interior(), [62, 62, 1]);
    assert_eq!(t.bytes(), 64 * 64 * 8);
}

#[test]
fn catalog_round_trips_through_the_serializer() {
    for s in catalog() {
        let again = parse_spec(&serialize_spec(&s)).unwrap();
        assert_eq!(serialize_spec(&again), serialize_spec(&s), "{}", s.name);
        assert_eq!(flop_count(&again).unwrap(), flop_count(&s).unwrap());
    }
}

proptest! {
    #[test]
    fn random_sum_stencils_round_trip(offs in prop::collection::vec((-2i32..=2, -2i32..=2), 1..8)) {
        let mut taps = String::new();
        let mut seen = Vec::new();
        for (x, y) in offs {
            if !seen.contains(&(x, y)) {
                seen.push((x, y));
                taps += &format!("t{} inp {x} {y}\n", seen.len());
            }
        }
        let mut expr = String::new();
        let mut acc = "t1".to_string();
        for i in 2..=seen.len() {
            let name = if i == seen.len() { "out".to_string() } else { format!("_{i}") };
            expr += &format!("{name} = (add {acc} t{i})\n");
            acc = name;
        }
        if seen.len() == 1 {
            expr = "out = t1\n".into();
        }
        let text = format!("[grid]\nname = p\ndims = 2\nradius = 2\n[arrays]\ninp input\nout output\n[taps]\n{taps}[expr]\n{expr}");
        let s = parse_spec(&text).unwrap();
        prop_assert_eq!(flop_count(&s).unwrap(), seen.len() - 1);
        let again = parse_spec(&serialize_spec(&s)).unwrap();
        prop_assert_eq!(serialize_spec(&again), serialize_spec(&s));
    }
}
