//! Kernels shared by the integration tests.
#![allow(dead_code)]

use saris_core::ir::{parse_spec, StencilSpec};

pub const STAR7: &str = include_str!("../../kernels/extra/star7.stencil");

pub const IDENTITY: &str = "[grid]\nname = identity\ndims = 2\nradius = 1\n\
[arrays]\ninp input\nout output\n[taps]\nc inp 0 0\n[expr]\nout = c\n";

pub const TWO_TAP: &str = "[grid]\nname = pair\ndims = 2\nradius = 1\n\
[arrays]\ninp input\nout output\n[taps]\na inp -1 0\nb inp 1 0\n[expr]\nout = (add a b)\n";

pub fn star7() -> StencilSpec {
    parse_spec(STAR7).unwrap()
}

pub fn identity() -> StencilSpec {
    parse_spec(IDENTITY).unwrap()
}

pub fn two_tap() -> StencilSpec {
    parse_spec(TWO_TAP).unwrap()
}
