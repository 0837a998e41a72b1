//! Error types shared across the workbench.

use thiserror::Error;

use crate::ir::Offset;

/// Errors raised while building, parsing or validating a stencil kernel.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum IrError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("no taps")]
    NoTaps,
    #[error("unsupported dimension count {0} (expected 2 or 3)")]
    BadDims(usize),
    #[error("tap `{name}` at offset {offset} exceeds radius {radius}")]
    TapBeyondRadius {
        name: String,
        offset: Offset,
        radius: u32,
    },
    #[error("malformed expression: {0}")]
    Structure(String),
    #[error("unknown identifier `{0}`")]
    Unknown(String),
    #[error("duplicate identifier `{0}`")]
    Duplicate(String),
}

/// Errors from the reference engine and tile I/O.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("tile extent {extent} on axis {axis} too small for radius {radius}")]
    TileTooSmall {
        axis: usize,
        extent: usize,
        radius: u32,
    },
    #[error("tile holds {have} input buffers but the kernel reads {need}")]
    BufferMismatch { have: usize, need: usize },
    #[error("corrupt tile dump: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised by the stream and baseline code generators.
#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("schedule references tap {0} that no stream register carries")]
    UnmappedTap(usize),
    #[error("register allocation failed: need {need} FP registers, {available} available")]
    RegisterAllocation { need: usize, available: usize },
    #[error("index {0} does not fit a 16-bit stream index")]
    IndexOverflow(i64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Errors raised while simulating a core or the cluster.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("misaligned TCDM access at byte address {0:#x}")]
    Misaligned(u64),
    #[error("TCDM access out of bounds at byte address {0:#x}")]
    OutOfBounds(u64),
    #[error("stream register {0} relaunched before its previous stream was consumed")]
    PrematureRelaunch(usize),
    #[error("program error at pc {pc}: {msg}")]
    Program { pc: usize, msg: String },
    #[error("simulation exceeded {0} cycles")]
    Timeout(u64),
    #[error("output mismatch against the reference at cell {cell}: got {got:e}, expected {expected:e}")]
    VerificationFailed { cell: usize, got: f64, expected: f64 },
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Errors raised by the scaleout estimator.
#[derive(Debug, Error)]
pub enum ScaleoutError {
    #[error("missing cluster metrics for variant {0}")]
    MissingVariant(&'static str),
    #[error("machine descriptor: {0}")]
    Machine(String),
}

/// Errors raised by the batch driver.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown kernel {0:?}")]
    UnknownKernel(String),
    #[error("tile edge {edge} too small for kernel {kernel}: {source}")]
    InvalidTile { kernel: String, edge: usize, source: IrError },
    #[error("{kernel} {variant}: {source}")]
    Run { kernel: String, variant: &'static str, source: SimError },
    #[error(transparent)]
    Scaleout(#[from] ScaleoutError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}
