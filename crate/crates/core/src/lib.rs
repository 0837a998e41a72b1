//! Stencil acceleration workbench: kernel IR, reference engine, stream and
//! scalar code generators, a cycle-approximate cluster simulator and an
//! analytic scaleout estimator.

pub mod error;
pub mod ir;
pub mod reference;
pub mod isa;
pub mod codegen;
pub mod saris;
pub mod baseline;
pub mod vm;
pub mod cluster;
pub mod scaleout;
pub mod harness;
