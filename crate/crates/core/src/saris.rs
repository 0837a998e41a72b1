//! Stream-register compiler.
//!
//! Grid loads become indirect stream reads on SR0/SR1 whose index arrays
//! hold element offsets around a shifted iteration origin. SR2 either writes
//! the output as an affine stream or, when coefficients do not fit the
//! register budget, replays the excess coefficients. The point loop launches
//! both indirect streams once per block of unrolled points.

use std::collections::{BTreeMap, BTreeSet};

use crate::codegen::{
    block_ops, distribute, emit_nest, plan_regions, policy_expr, private, schedule_ops,
    CoreWork, Emitter, NestGeometry, Op, OpKind, OptConfig, Operand, Region, TileLayout,
};
use crate::error::CompileError;
use crate::ir::{Expr, Node, StencilSpec, TileShape, ELEM_BYTES};
use crate::isa::{pack_indices, CoreProgram, DataSegment, FReg, Instr, SrField, SP, STAGGER_BASE};
use crate::reference::check_tile;

/// What the affine stream register carries.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Sr2Role {
    /// Affine write of the output grid.
    OutputStore,
    /// Affine read replaying coefficients that did not fit in registers;
    /// outputs use scalar stores.
    CoeffStream,
}

/// Mapping of taps and coefficients onto stream registers.
#[derive(Clone, PartialEq, Debug)]
pub struct StreamAssignment {
    /// Taps read through SR0 and SR1, in source consumption order.
    pub sr: [Vec<usize>; 2],
    /// Stream register (0 or 1) of every tap.
    pub tap_sr: Vec<u8>,
    pub sr2: Sr2Role,
    /// Coefficients held in FP registers.
    pub reg_coeffs: Vec<usize>,
    /// Coefficients replayed through SR2.
    pub streamed_coeffs: Vec<usize>,
}

impl StreamAssignment {
    pub fn imbalance(&self) -> usize {
        self.sr[0].len().abs_diff(self.sr[1].len())
    }
}

/// Where an operand of a scheduled op comes from.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Source {
    /// Popped from a stream register.
    Stream(u8),
    /// Coefficient held in a register.
    CoeffReg(usize),
    /// Result of an earlier slot.
    Value(usize),
}

#[derive(Clone, PartialEq, Debug)]
pub struct Slot {
    pub kind: OpKind,
    pub point: usize,
    pub sources: Vec<Source>,
    /// Result goes straight to the SR2 output stream.
    pub writes_sr2: bool,
    /// Block op this slot issues.
    pub op: usize,
}

/// Ordered compute slots for one block of unrolled points.
#[derive(Clone, PartialEq, Debug)]
pub struct PointLoopSchedule {
    pub unroll: usize,
    pub slots: Vec<Slot>,
    /// Taps consumed by each indirect stream, in order, as (point, tap).
    pub reads: [Vec<(usize, usize)>; 2],
    /// Streamed coefficients in consumption order.
    pub coeff_reads: Vec<usize>,
}

/// Per-stream index arrays, in element units relative to the launch base.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct IndexArrays {
    pub sr: [Vec<u16>; 2],
}

/// Compiled stream program for every core of the cluster.
#[derive(Clone, PartialEq, Debug)]
pub struct StreamProgram {
    pub kernel: String,
    pub opt: OptConfig,
    pub assignment: StreamAssignment,
    /// Schedule and index arrays of the main (fully unrolled) block.
    pub schedule: PointLoopSchedule,
    pub index_arrays: IndexArrays,
    pub layout: TileLayout,
    pub cores: Vec<CoreProgram>,
    /// Whether the point loop body runs from the FP repetition buffer.
    pub uses_frep: bool,
}

/// Every tap becomes an indirect stream read; nothing stays a scalar load.
pub fn map_loads(spec: &StencilSpec) -> Vec<usize> {
    (0..spec.taps.len()).collect()
}

/// Taps in the order a single point's source schedule reads them.
fn consumption_order(expr: &Expr) -> Vec<usize> {
    let mut v = Vec::new();
    for op in block_ops(expr, 1) {
        for a in op.args {
            if let Operand::Tap { tap, .. } = a {
                v.push(tap);
            }
        }
    }
    v
}

/// Splits taps across the two indirect streams.
///
/// Taps feeding the same arithmetic node go to different streams so one
/// instruction can pop both; the larger offset of a fresh pair goes to SR0.
/// Remaining taps go to the less-loaded stream (SR0 on ties), then the
/// split is rebalanced so the stream lengths differ by at most one.
pub fn partition(taps: &[usize], spec: &StencilSpec, expr: &Expr) -> StreamAssignment {
    let mut side: BTreeMap<usize, u8> = BTreeMap::new();
    let wanted: BTreeSet<usize> = taps.iter().copied().collect();
    let key = |t: usize| (spec.taps[t].offset, spec.taps[t].array, t);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for id in expr.ops_in_order() {
        let leaves: Vec<usize> = expr
            .node(id)
            .operands()
            .into_iter()
            .filter_map(|c| match expr.node(c) {
                Node::Tap(t) if wanted.contains(&t) => Some(t),
                _ => None,
            })
            .collect();
        for i in 0..leaves.len() {
            for j in i + 1..leaves.len() {
                pairs.push((leaves[i], leaves[j]));
            }
        }
    }
    for &(a, b) in &pairs {
        match (side.get(&a).copied(), side.get(&b).copied()) {
            (None, None) => {
                let (hi, lo) = if key(a) > key(b) { (a, b) } else { (b, a) };
                side.insert(hi, 0);
                side.insert(lo, 1);
            }
            (Some(s), None) => {
                side.insert(b, 1 - s);
            }
            (None, Some(s)) => {
                side.insert(a, 1 - s);
            }
            (Some(_), Some(_)) => {}
        }
    }
    let order: Vec<usize> = consumption_order(expr)
        .into_iter()
        .filter(|t| wanted.contains(t))
        .collect();
    let count = |side: &BTreeMap<usize, u8>, s: u8| side.values().filter(|&&v| v == s).count();
    for &t in &order {
        if !side.contains_key(&t) {
            let s = if count(&side, 1) < count(&side, 0) { 1 } else { 0 };
            side.insert(t, s);
        }
    }
    let split_pair = |side: &BTreeMap<usize, u8>, t: usize| {
        pairs
            .iter()
            .any(|&(a, b)| (a == t || b == t) && side[&a] != side[&b])
    };
    loop {
        let (n0, n1) = (count(&side, 0), count(&side, 1));
        if n0.abs_diff(n1) <= 1 {
            break;
        }
        let from = if n0 > n1 { 0 } else { 1 };
        let members: Vec<usize> = order.iter().rev().copied().filter(|t| side[t] == from).collect();
        let pick = members
            .iter()
            .copied()
            .find(|&t| !split_pair(&side, t))
            .unwrap_or(members[0]);
        side.insert(pick, 1 - from);
    }
    let mut tap_sr = vec![0u8; spec.taps.len()];
    let mut sr: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &t in &order {
        tap_sr[t] = side[&t];
        sr[side[&t] as usize].push(t);
    }
    StreamAssignment {
        sr,
        tap_sr,
        sr2: Sr2Role::OutputStore,
        reg_coeffs: (0..spec.coeffs.len()).collect(),
        streamed_coeffs: Vec::new(),
    }
}

/// Decides the role of SR2: output store when every coefficient fits in
/// `regfile_budget` registers, otherwise a stream of the excess coefficients.
pub fn map_residuals(
    spec: &StencilSpec,
    mut assignment: StreamAssignment,
    regfile_budget: usize,
) -> StreamAssignment {
    let n = spec.coeffs.len();
    if n <= regfile_budget {
        assignment.sr2 = Sr2Role::OutputStore;
        assignment.reg_coeffs = (0..n).collect();
        assignment.streamed_coeffs.clear();
    } else {
        assignment.sr2 = Sr2Role::CoeffStream;
        assignment.reg_coeffs = (0..regfile_budget).collect();
        assignment.streamed_coeffs = (regfile_budget..n).collect();
    }
    assignment
}

/// Orders one block's compute and records which stream feeds each operand.
pub fn schedule(
    spec: &StencilSpec,
    assignment: &StreamAssignment,
    opt: &OptConfig,
    unroll: usize,
) -> PointLoopSchedule {
    let expr = policy_expr(spec, opt.policy);
    let ops = block_ops(&expr, unroll);
    let order = schedule_ops(&ops, opt.policy, opt.sched_latency);
    build_schedule(&ops, &order, assignment, unroll)
}

fn build_schedule(
    ops: &[Op],
    order: &[usize],
    assignment: &StreamAssignment,
    unroll: usize,
) -> PointLoopSchedule {
    let streamed: BTreeSet<usize> = assignment.streamed_coeffs.iter().copied().collect();
    let mut slot_of = vec![usize::MAX; ops.len()];
    let mut slots = Vec::with_capacity(order.len());
    let mut reads: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    let mut coeff_reads = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        let op = &ops[i];
        let sources = op
            .args
            .iter()
            .map(|a| match *a {
                Operand::Tap { point, tap } => {
                    let s = assignment.tap_sr[tap];
                    reads[s as usize].push((point, tap));
                    Source::Stream(s)
                }
                Operand::Coeff(c) if streamed.contains(&c) => {
                    coeff_reads.push(c);
                    Source::Stream(2)
                }
                Operand::Coeff(c) => Source::CoeffReg(c),
                Operand::Val(v) => Source::Value(slot_of[v]),
            })
            .collect();
        slot_of[i] = pos;
        slots.push(Slot {
            kind: op.kind,
            point: op.point,
            sources,
            writes_sr2: op.root && assignment.sr2 == Sr2Role::OutputStore,
            op: i,
        });
    }
    PointLoopSchedule {
        unroll,
        slots,
        reads,
        coeff_reads,
    }
}

/// Index arrays for a schedule: linearized offsets of each read around the
/// launch base, which sits `halo` cells before the first point of the block
/// on every axis. Extra arrays are addressed relative to the input array.
pub fn emit_index_arrays(
    spec: &StencilSpec,
    schedule: &PointLoopSchedule,
    layout: &TileLayout,
    opt: &OptConfig,
) -> Result<IndexArrays, CompileError> {
    let shape = layout.shape;
    let strides = shape.strides();
    let reads = spec.read_arrays();
    let mut out: [Vec<u16>; 2] = [Vec::new(), Vec::new()];
    for s in 0..2 {
        for &(point, tap) in &schedule.reads[s] {
            let t = &spec.taps[tap];
            let slot = reads.iter().position(|&a| a == t.array).expect("tap reads an input");
            let array_off = (layout.read_bases[slot] as i64 - layout.read_bases[0] as i64)
                / ELEM_BYTES as i64;
            let mut idx = array_off + (point * opt.interleave[0]) as i64;
            for a in 0..3 {
                idx += (t.offset.0[a] as i64 + shape.halo[a] as i64) * strides[a] as i64;
            }
            if !(0..=u16::MAX as i64).contains(&idx) {
                return Err(CompileError::IndexOverflow(idx));
            }
            out[s].push(idx as u16);
        }
    }
    Ok(IndexArrays { sr: out })
}

/// Everything needed to emit one region's point loop.
struct BlockCode {
    schedule: PointLoopSchedule,
    index: IndexArrays,
    body: Body,
}

/// FP code of one block.
enum Body {
    /// Straight-line instructions, scalar stores interleaved.
    Plain(Vec<Instr>),
    /// One point's instructions split into inner repetitions over the
    /// block's points, each point using its own bank of `window` value
    /// registers, followed by the block's scalar stores.
    Inner {
        segments: Vec<Vec<Instr>>,
        window: u8,
        stores: Vec<Instr>,
    },
}

const FIRST_VALUE_REG: FReg = STAGGER_BASE;

fn coeff_reg(assignment: &StreamAssignment, c: usize) -> FReg {
    let pos = assignment
        .reg_coeffs
        .iter()
        .position(|&k| k == c)
        .expect("coefficient is register-resident");
    31 - pos as FReg
}

fn block_code(
    spec: &StencilSpec,
    assignment: &StreamAssignment,
    layout: &TileLayout,
    opt: &OptConfig,
    unroll: usize,
) -> Result<BlockCode, CompileError> {
    let per_point = block_ops(&policy_expr(spec, opt.policy), 1).len();
    let outer_fits = assignment.sr2 == Sr2Role::OutputStore && per_point * unroll <= opt.frep_capacity;
    if opt.hw_loop && !outer_fits {
        if let Some(code) = inner_block_code(spec, assignment, layout, opt, unroll)? {
            return Ok(code);
        }
    }
    plain_block_code(spec, assignment, layout, opt, unroll)
}

/// Registers available for values below the resident coefficients.
fn value_pool(assignment: &StreamAssignment) -> usize {
    (32 - assignment.reg_coeffs.len()).saturating_sub(FIRST_VALUE_REG as usize)
}

/// Block code for inner repetition, or `None` when the per-point register
/// banks do not fit.
fn inner_block_code(
    spec: &StencilSpec,
    assignment: &StreamAssignment,
    layout: &TileLayout,
    opt: &OptConfig,
    unroll: usize,
) -> Result<Option<BlockCode>, CompileError> {
    let expr = policy_expr(spec, opt.policy);
    let single = block_ops(&expr, 1);
    let lat = opt.sched_latency.div_ceil(unroll as u32).max(1);
    let point_order = schedule_ops(&single, opt.policy, lat);
    let n = single.len();
    // Op-major interleave: each op of the point order issues for every point.
    let ops = block_ops(&expr, unroll);
    let order: Vec<usize> = point_order
        .iter()
        .flat_map(|&i| (0..unroll).map(move |p| p * n + i))
        .collect();
    let sched = build_schedule(&ops, &order, assignment, unroll);
    let index = emit_index_arrays(spec, &sched, layout, opt)?;

    let coeff_stream = assignment.sr2 == Sr2Role::CoeffStream;
    let mut last_use = vec![0usize; n];
    for (pos, &i) in point_order.iter().enumerate() {
        for a in &single[i].args {
            if let Operand::Val(v) = *a {
                last_use[v] = pos;
            }
        }
    }
    let mut free: BTreeSet<FReg> = (0..value_pool(assignment) as FReg).map(|r| r + FIRST_VALUE_REG).collect();
    let mut reg_of = vec![0 as FReg; n];
    let mut top = 0u8;
    let mut point_body = Vec::with_capacity(n);
    let mut root_reg = None;
    for (pos, &i) in point_order.iter().enumerate() {
        let op = &single[i];
        let src: Vec<FReg> = op
            .args
            .iter()
            .map(|a| match *a {
                Operand::Tap { tap, .. } => assignment.tap_sr[tap],
                Operand::Coeff(c) if assignment.streamed_coeffs.contains(&c) => 2,
                Operand::Coeff(c) => coeff_reg(assignment, c),
                Operand::Val(v) => reg_of[v],
            })
            .collect();
        for a in &op.args {
            if let Operand::Val(v) = *a {
                if last_use[v] == pos {
                    free.insert(reg_of[v]);
                }
            }
        }
        let fd = if op.root && !coeff_stream {
            2
        } else {
            let Some(r) = free.pop_first() else { return Ok(None) };
            top = top.max(r - FIRST_VALUE_REG + 1);
            r
        };
        reg_of[i] = fd;
        if op.root {
            root_reg = Some(fd);
        }
        point_body.push(op_instr(op.kind, fd, &src));
    }
    let window = top;
    if FIRST_VALUE_REG as usize + unroll * window as usize > 32 - assignment.reg_coeffs.len() {
        return Ok(None);
    }
    let stores = if coeff_stream {
        let root = root_reg.expect("every point has a root");
        (0..unroll)
            .map(|p| Instr::Fsd {
                fs: root,
                base: OUT_PTR,
                imm: (p * opt.interleave[0] * ELEM_BYTES) as i32,
            }
            .staggered(p, window))
            .collect()
    } else {
        Vec::new()
    };
    let segments = point_body.chunks(opt.frep_capacity).map(<[Instr]>::to_vec).collect();
    Ok(Some(BlockCode {
        schedule: sched,
        index,
        body: Body::Inner { segments, window, stores },
    }))
}

fn op_instr(kind: OpKind, fd: FReg, src: &[FReg]) -> Instr {
    match kind {
        OpKind::Add => Instr::Fadd { fd, fs1: src[0], fs2: src[1] },
        OpKind::Mul => Instr::Fmul { fd, fs1: src[0], fs2: src[1] },
        OpKind::Fma => Instr::Fmadd { fd, fs1: src[0], fs2: src[1], fs3: src[2] },
        OpKind::Mv => Instr::Fmv { fd, fs: src[0] },
    }
}

fn plain_block_code(
    spec: &StencilSpec,
    assignment: &StreamAssignment,
    layout: &TileLayout,
    opt: &OptConfig,
    unroll: usize,
) -> Result<BlockCode, CompileError> {
    let sched = schedule(spec, assignment, opt, unroll);
    let index = emit_index_arrays(spec, &sched, layout, opt)?;
    let n = sched.slots.len();
    let mut last_use = vec![0usize; n];
    for (pos, slot) in sched.slots.iter().enumerate() {
        for s in &slot.sources {
            if let Source::Value(v) = *s {
                last_use[v] = pos;
            }
        }
    }
    let available = value_pool(assignment);
    let mut free: BTreeSet<FReg> = (0..available as FReg).map(|r| r + FIRST_VALUE_REG).collect();
    let mut reg_of: Vec<FReg> = vec![0; n];
    let mut body = Vec::with_capacity(n + unroll);
    // Scalar stores wait a few slots so the result has left the FPU pipeline.
    let mut pending: Vec<(usize, FReg, usize)> = Vec::new();
    let mut stores = 0;
    let lat = opt.sched_latency as usize;
    let store = |body: &mut Vec<Instr>, reg: FReg, point: usize| {
        body.push(Instr::Fsd {
            fs: reg,
            base: OUT_PTR,
            imm: (point * opt.interleave[0] * ELEM_BYTES) as i32,
        });
    };
    for (pos, slot) in sched.slots.iter().enumerate() {
        let src: Vec<FReg> = slot
            .sources
            .iter()
            .map(|s| match *s {
                Source::Stream(k) => k,
                Source::CoeffReg(c) => coeff_reg(assignment, c),
                Source::Value(v) => reg_of[v],
            })
            .collect();
        for s in &slot.sources {
            if let Source::Value(v) = *s {
                if last_use[v] == pos {
                    free.insert(reg_of[v]);
                }
            }
        }
        let fd = if slot.writes_sr2 {
            2
        } else {
            let r = free.pop_first().ok_or(CompileError::RegisterAllocation {
                need: available + 1,
                available,
            })?;
            reg_of[pos] = r;
            r
        };
        body.push(op_instr(slot.kind, fd, &src));
        let is_root = !slot.writes_sr2 && assignment.sr2 == Sr2Role::CoeffStream && is_root_slot(&sched, pos);
        pending.retain(|&(at, reg, point)| {
            if pos >= at + lat {
                store(&mut body, reg, point);
                stores += 1;
                free.insert(reg);
                false
            } else {
                true
            }
        });
        if is_root {
            pending.push((pos, fd, slot.point));
        }
    }
    for (_, reg, point) in pending {
        store(&mut body, reg, point);
        stores += 1;
    }
    debug_assert!(stores == 0 || assignment.sr2 == Sr2Role::CoeffStream);
    Ok(BlockCode {
        schedule: sched,
        index,
        body: Body::Plain(body),
    })
}

fn is_root_slot(sched: &PointLoopSchedule, pos: usize) -> bool {
    // A slot is a root when no later slot consumes it.
    !sched.slots[pos + 1..]
        .iter()
        .any(|s| s.sources.contains(&Source::Value(pos)))
}

/// Launch base register and scalar output pointer.
const LAUNCH_PTR: u8 = 5; // t0
const REPS: u8 = 7; // t2
const SR2_PTR: u8 = 6; // t1
const OUT_PTR: u8 = 29; // t4

/// Compiles a kernel into per-core stream programs.
pub fn compile(spec: &StencilSpec, shape: TileShape, opt: &OptConfig) -> Result<StreamProgram, CompileError> {
    opt.validate()?;
    spec.validate()?;
    check_tile(spec, &shape)?;
    let expr = policy_expr(spec, opt.policy);
    let assignment = partition(&map_loads(spec), spec, &expr);
    let assignment = map_residuals(spec, assignment, opt.coeff_budget);
    let layout = TileLayout::new(spec, shape, opt.cores());
    let mut blocks: BTreeMap<usize, BlockCode> = BTreeMap::new();
    for u in 1..=opt.unroll {
        blocks.insert(u, block_code(spec, &assignment, &layout, opt, u)?);
    }
    let work = distribute(&shape, opt.interleave);
    let mut uses_frep = false;
    let mut cores = Vec::with_capacity(work.len());
    for w in &work {
        let (prog, frep) = core_program(spec, &assignment, &layout, opt, w, &blocks)?;
        uses_frep |= frep;
        cores.push(prog);
    }
    let main = blocks.remove(&opt.unroll).expect("main block compiled");
    Ok(StreamProgram {
        kernel: spec.name.clone(),
        opt: *opt,
        assignment,
        schedule: main.schedule,
        index_arrays: main.index,
        layout,
        cores,
        uses_frep,
    })
}

fn frep_eligible(opt: &OptConfig, assignment: &StreamAssignment, body_len: usize) -> bool {
    opt.hw_loop && assignment.sr2 == Sr2Role::OutputStore && body_len <= opt.frep_capacity && body_len > 0
}

fn core_program(
    spec: &StencilSpec,
    assignment: &StreamAssignment,
    layout: &TileLayout,
    opt: &OptConfig,
    work: &CoreWork,
    blocks: &BTreeMap<usize, BlockCode>,
) -> Result<(CoreProgram, bool), CompileError> {
    let mut e = Emitter::default();
    let base = layout.private(work.core);
    let regions = plan_regions(work, opt.unroll);
    let coeffs = spec.coeff_values(1.0);
    let mut data = vec![DataSegment {
        label: "coefficients".into(),
        addr: base + private::COEFFS,
        words: coeffs.iter().map(|v| v.to_bits()).collect(),
    }];
    let pc = e.push(Instr::Li { rd: SP, imm: base as i64 });
    e.note(pc, "private region");
    for &c in &assignment.reg_coeffs {
        e.push(Instr::Fld {
            fd: coeff_reg(assignment, c),
            base: SP,
            imm: (private::COEFFS + 8 * c as u64 - 0) as i32,
        });
    }
    for sr in 0..2u8 {
        e.push(Instr::SrCfg { sr, field: SrField::Indirect, value: 1 });
    }
    let affine_dims = if spec.dims == 2 { 2 } else { 3 };
    match assignment.sr2 {
        Sr2Role::OutputStore => {
            e.push(Instr::SrCfg { sr: 2, field: SrField::Write, value: 1 });
            e.push(Instr::SrCfg { sr: 2, field: SrField::Dims, value: affine_dims });
        }
        Sr2Role::CoeffStream => {
            e.push(Instr::SrCfg { sr: 2, field: SrField::Write, value: 0 });
            e.push(Instr::SrCfg { sr: 2, field: SrField::Dims, value: 2 });
            e.push(Instr::SrCfg { sr: 2, field: SrField::Stride(0), value: 8 });
            e.push(Instr::SrCfg { sr: 2, field: SrField::Stride(1), value: 0 });
        }
    }
    e.push(Instr::SrEnable);
    let mut point_loop = 0..0;
    let mut points_per_iteration = 0;
    let mut index_listing = [Vec::new(), Vec::new()];
    let mut used_frep = false;
    let mut seq_offset = 0u64;
    for (ri, region) in regions.iter().enumerate() {
        let code = &blocks[&region.unroll];
        let idx_off = if ri == 0 { 0 } else { 128 };
        for (sr, (area, idx)) in [(private::IDX0, &code.index.sr[0]), (private::IDX1, &code.index.sr[1])]
            .into_iter()
            .enumerate()
        {
            if idx.len() * 2 > 128 {
                return Err(CompileError::Config(format!(
                    "{} indices exceed the per-region index area",
                    idx.len()
                )));
            }
            let addr = base + area + idx_off;
            data.push(DataSegment {
                label: format!("sr{sr} indices, unroll {}", region.unroll),
                addr,
                words: pack_indices(idx),
            });
            e.push(Instr::SrCfg { sr: sr as u8, field: SrField::IdxBase, value: addr as i64 });
            e.push(Instr::SrCfg { sr: sr as u8, field: SrField::IdxCount, value: idx.len() as i64 });
        }
        if ri == 0 {
            index_listing = code.index.sr.clone();
        }
        let geo = NestGeometry::new(layout, work, region, opt.interleave);
        let first = first_point(work, region);
        let out_addr = layout.elem_addr(layout.out_base, first[0], first[1], first[2]);
        match assignment.sr2 {
            Sr2Role::OutputStore => {
                let bounds = [region.blocks * region.unroll, geo.rows, geo.planes];
                let strides = [
                    (opt.interleave[0] * ELEM_BYTES) as i64,
                    geo.row_stride,
                    geo.plane_stride,
                ];
                for d in 0..affine_dims as usize {
                    e.push(Instr::SrCfg { sr: 2, field: SrField::Bound(d as u8), value: bounds[d] as i64 });
                    e.push(Instr::SrCfg { sr: 2, field: SrField::Stride(d as u8), value: strides[d] });
                }
                e.push(Instr::Li { rd: SR2_PTR, imm: out_addr as i64 });
            }
            Sr2Role::CoeffStream => {
                let seq: Vec<u64> = code.schedule.coeff_reads.iter().map(|&c| coeffs[c].to_bits()).collect();
                let addr = base + private::COEFF_SEQ + seq_offset;
                seq_offset += 8 * seq.len() as u64;
                if private::COEFF_SEQ + seq_offset > private::STACK {
                    return Err(CompileError::Config("coefficient sequence exceeds its area".into()));
                }
                e.push(Instr::SrCfg { sr: 2, field: SrField::Bound(0), value: seq.len() as i64 });
                e.push(Instr::SrCfg { sr: 2, field: SrField::Bound(1), value: geo.total_blocks() as i64 });
                data.push(DataSegment {
                    label: format!("coefficient sequence, unroll {}", region.unroll),
                    addr,
                    words: seq,
                });
                e.push(Instr::Li { rd: SR2_PTR, imm: addr as i64 });
                e.push(Instr::Li { rd: OUT_PTR, imm: out_addr as i64 });
            }
        }
        e.push(Instr::SrLaunch { mask: 0b100, base: SR2_PTR, cost: opt.launch_cost });
        let launch_addr = first_launch_addr(layout, first);
        e.push(Instr::Li { rd: LAUNCH_PTR, imm: launch_addr as i64 });
        let launch = Instr::SrLaunch { mask: 0b011, base: LAUNCH_PTR, cost: opt.launch_cost };
        let mut ptrs = vec![(LAUNCH_PTR, launch_addr as i64)];
        if assignment.sr2 == Sr2Role::CoeffStream {
            ptrs.push((OUT_PTR, out_addr as i64));
        }
        let loop_range = match &code.body {
            Body::Plain(body) if frep_eligible(opt, assignment, body.len()) => {
                used_frep = true;
                let reps = geo.total_blocks() as i64 - 1;
                e.push(Instr::Li { rd: REPS, imm: reps });
                let frep_pc = e.push(Instr::Frep { reps: REPS, len: body.len() as u8, inner: false, stagger: 0 });
                for i in body {
                    e.push(*i);
                }
                let inner = emit_nest(&mut e, &geo, &ptrs, |e| {
                    e.push(launch);
                });
                frep_pc..inner.end
            }
            Body::Plain(body) => emit_nest(&mut e, &geo, &ptrs, |e| {
                let pc = e.push(launch);
                e.note(pc, format!("{} point(s)", region.unroll));
                for i in body {
                    e.push(*i);
                }
            }),
            Body::Inner { segments, window, stores } => {
                used_frep = true;
                e.push(Instr::Li { rd: REPS, imm: region.unroll as i64 - 1 });
                emit_nest(&mut e, &geo, &ptrs, |e| {
                    let pc = e.push(launch);
                    e.note(pc, format!("{} point(s)", region.unroll));
                    for seg in segments {
                        e.push(Instr::Frep { reps: REPS, len: seg.len() as u8, inner: true, stagger: *window });
                        for i in seg {
                            e.push(*i);
                        }
                    }
                    for i in stores {
                        e.push(*i);
                    }
                })
            }
        };
        if ri == 0 {
            point_loop = loop_range;
            points_per_iteration = region.unroll;
        }
    }
    e.push(Instr::Fence);
    e.push(Instr::SrDisable);
    e.push(Instr::Halt);
    Ok((
        CoreProgram {
            kernel: spec.name.clone(),
            variant: "saris".into(),
            core: work.core,
            instrs: e.instrs,
            point_loop,
            points_per_iteration,
            data,
            index_arrays: index_listing.to_vec(),
            notes: e.notes,
        },
        used_frep,
    ))
}

pub(crate) fn first_point(work: &CoreWork, region: &Region) -> [usize; 3] {
    [work.xs[region.col0], work.ys[0], work.zs[0]]
}

fn first_launch_addr(layout: &TileLayout, p: [usize; 3]) -> u64 {
    let h = layout.shape.halo;
    layout.elem_addr(layout.read_bases[0], p[0] - h[0], p[1] - h[1], p[2] - h[2])
}
