//! Scalar baseline code generator.
//!
//! Every tap is an `fld` with an immediate offset from a base register.
//! There is one base per (array, z offset), and one per y offset too when the
//! offsets outgrow 12-bit immediates. Each block of unrolled points ends with
//! one increment per base and a branch. Coefficients live in registers until
//! the file runs out; the rest are reloaded from the core's private region on
//! every use, and values spill to stack slots under pressure.

use std::collections::{BTreeMap, BTreeSet};

use crate::codegen::{
    block_ops, distribute, emit_nest, emit_nest_rows, fits_imm12, plan_regions, policy_expr,
    private, schedule_ops, CoreWork, Emitter, NestGeometry, Op, OpKind, OptConfig, Operand,
    TileLayout,
};
use crate::error::CompileError;
use crate::ir::{StencilSpec, TileShape, ELEM_BYTES};
use crate::isa::{CoreProgram, DataSegment, FReg, IReg, Instr, SP};
use crate::reference::check_tile;
use crate::saris::first_point;

/// Scalar programs for every core of the cluster.
#[derive(Clone, PartialEq, Debug)]
pub struct BaselineProgram {
    pub kernel: String,
    pub opt: OptConfig,
    pub layout: TileLayout,
    pub cores: Vec<CoreProgram>,
    /// Coefficients kept in registers.
    pub pinned_coeffs: usize,
    /// Stack and coefficient-pool accesses in the main point loop of core 0.
    pub stack_accesses: usize,
}

const OUT_PTR: IReg = 5; // t0
/// Integer registers handed out to base pointers, in order.
const BASE_POOL: [IReg; 22] = [
    6, 7, 8, 9, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 29, 30,
];

/// FP registers kept free for values and loads at unroll `u`.
fn working_regs(u: usize) -> usize {
    (2 * u + 4).max(6)
}

/// Base register grouping for a kernel.
struct Bases {
    /// (read slot, dz, dy when split by row) of each base register.
    keys: Vec<(usize, i32, Option<i32>)>,
    split_rows: bool,
}

impl Bases {
    fn new(spec: &StencilSpec, layout: &TileLayout, opt: &OptConfig) -> Bases {
        let reads = spec.read_arrays();
        let reach_x = ((opt.unroll - 1) * opt.interleave[0]) as i64;
        let split_rows = spec.taps.iter().any(|t| {
            let o = t.offset.0;
            let lo = o[0] as i64 * ELEM_BYTES as i64 + o[1] as i64 * layout.row_bytes();
            !fits_imm12(lo) || !fits_imm12(lo + reach_x * ELEM_BYTES as i64)
        });
        let mut keys: BTreeSet<(usize, i32, Option<i32>)> = BTreeSet::new();
        for t in &spec.taps {
            let slot = reads.iter().position(|&a| a == t.array).expect("tap reads an input");
            let dy = split_rows.then_some(t.offset.0[1]);
            keys.insert((slot, t.offset.0[2], dy));
        }
        Bases {
            keys: keys.into_iter().collect(),
            split_rows,
        }
    }

    fn reg_of(&self, slot: usize, dz: i32, dy: i32) -> IReg {
        let key = (slot, dz, self.split_rows.then_some(dy));
        BASE_POOL[self.keys.iter().position(|k| *k == key).expect("base exists")]
    }
}

/// Where an operand comes from in the scalar body.
#[derive(Clone, Copy, PartialEq, Debug)]
enum Src {
    Fixed(FReg),
    Load { base: IReg, imm: i32, into: Option<FReg> },
    Val(usize),
}

struct BodyResult {
    instrs: Vec<Instr>,
    stack_accesses: usize,
}

/// Emits the FP part of one block: loads, compute, scalar stores.
///
/// `resolve` maps each operand to its source. Loads are issued ahead of use
/// while more than two registers are free; when none is free, the live value
/// with the farthest next use spills to a stack slot.
fn emit_body(
    ops: &[Op],
    order: &[usize],
    mut free: BTreeSet<FReg>,
    resolve: &dyn Fn(Operand) -> Src,
    store_imm: &dyn Fn(usize) -> i32,
    latency: usize,
) -> Result<BodyResult, CompileError> {
    let n = order.len();
    let pos_of: BTreeMap<usize, usize> = order.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    // Position at which each op's value is consumed.
    let mut use_pos = vec![usize::MAX; ops.len()];
    for (p, &i) in order.iter().enumerate() {
        for a in &ops[i].args {
            if let Operand::Val(v) = *a {
                use_pos[v] = p;
            }
        }
    }
    let mut loads: Vec<(usize, usize, IReg, i32, Option<FReg>)> = Vec::new();
    for (p, &i) in order.iter().enumerate() {
        for (k, a) in ops[i].args.iter().enumerate() {
            if let Src::Load { base, imm, into } = resolve(*a) {
                loads.push((p, k, base, imm, into));
            }
        }
    }
    let available = free.len();
    let mut out = Vec::new();
    let mut stack_accesses = 0;
    let mut loaded: BTreeMap<(usize, usize), FReg> = BTreeMap::new();
    // Live values: op id -> register, or stack slot when spilled.
    let mut in_reg: BTreeMap<usize, FReg> = BTreeMap::new();
    let mut spilled: BTreeMap<usize, usize> = BTreeMap::new();
    let mut free_slots: BTreeSet<usize> = (0..private::STACK_SLOTS).collect();
    let mut pending: Vec<(usize, FReg, usize)> = Vec::new();
    let mut next_load = 0;

    struct St<'s> {
        free: &'s mut BTreeSet<FReg>,
        in_reg: &'s mut BTreeMap<usize, FReg>,
        spilled: &'s mut BTreeMap<usize, usize>,
        free_slots: &'s mut BTreeSet<usize>,
        out: &'s mut Vec<Instr>,
        stack_accesses: &'s mut usize,
    }
    // Frees a register, spilling the live value used farthest in the future.
    fn take_reg(st: &mut St, use_pos: &[usize], keep: &BTreeSet<FReg>, available: usize) -> Result<FReg, CompileError> {
        if let Some(r) = st.free.pop_first() {
            return Ok(r);
        }
        let victim = st
            .in_reg
            .iter()
            .filter(|(_, r)| !keep.contains(r))
            .max_by_key(|(&v, _)| (use_pos[v], v))
            .map(|(&v, &r)| (v, r));
        let Some((v, r)) = victim else {
            return Err(CompileError::RegisterAllocation {
                need: available + 1,
                available,
            });
        };
        let slot = st.free_slots.pop_first().ok_or(CompileError::RegisterAllocation {
            need: available + private::STACK_SLOTS,
            available,
        })?;
        st.out.push(Instr::Fsd {
            fs: r,
            base: SP,
            imm: (private::STACK + 8 * slot as u64) as i32,
        });
        *st.stack_accesses += 1;
        st.in_reg.remove(&v);
        st.spilled.insert(v, slot);
        Ok(r)
    }

    for p in 0..n {
        let i = order[p];
        let op = &ops[i];
        let mut keep: BTreeSet<FReg> = BTreeSet::new();
        for a in &op.args {
            if let Operand::Val(v) = *a {
                if let Some(&r) = in_reg.get(&v) {
                    keep.insert(r);
                }
            }
        }
        let issue_load = |idx: usize,
                              keep: &mut BTreeSet<FReg>,
                              free: &mut BTreeSet<FReg>,
                              in_reg: &mut BTreeMap<usize, FReg>,
                              spilled: &mut BTreeMap<usize, usize>,
                              free_slots: &mut BTreeSet<usize>,
                              out: &mut Vec<Instr>,
                              stack_accesses: &mut usize,
                              loaded: &mut BTreeMap<(usize, usize), FReg>|
         -> Result<(), CompileError> {
            let (lp, k, base, imm, into) = loads[idx];
            let fd = match into {
                Some(r) => r,
                None => {
                    let mut st = St { free, in_reg, spilled, free_slots, out, stack_accesses };
                    take_reg(&mut st, &use_pos, keep, available)?
                }
            };
            if base == SP {
                *stack_accesses += 1;
            }
            out.push(Instr::Fld { fd, base, imm });
            loaded.insert((lp, k), fd);
            if lp == p {
                keep.insert(fd);
            }
            Ok(())
        };
        while next_load < loads.len() && loads[next_load].0 <= p {
            issue_load(
                next_load, &mut keep, &mut free, &mut in_reg, &mut spilled, &mut free_slots, &mut out,
                &mut stack_accesses, &mut loaded,
            )?;
            next_load += 1;
        }
        while next_load < loads.len() && (free.len() > 2 || loads[next_load].4.is_some()) {
            issue_load(
                next_load, &mut keep, &mut free, &mut in_reg, &mut spilled, &mut free_slots, &mut out,
                &mut stack_accesses, &mut loaded,
            )?;
            next_load += 1;
        }
        // Bring spilled operands back.
        for a in &op.args {
            if let Operand::Val(v) = *a {
                if let Some(slot) = spilled.remove(&v) {
                    let mut st = St {
                        free: &mut free,
                        in_reg: &mut in_reg,
                        spilled: &mut spilled,
                        free_slots: &mut free_slots,
                        out: &mut out,
                        stack_accesses: &mut stack_accesses,
                    };
                    let r = take_reg(&mut st, &use_pos, &keep, available)?;
                    out.push(Instr::Fld {
                        fd: r,
                        base: SP,
                        imm: (private::STACK + 8 * slot as u64) as i32,
                    });
                    stack_accesses += 1;
                    free_slots.insert(slot);
                    in_reg.insert(v, r);
                    keep.insert(r);
                }
            }
        }
        let mut src = Vec::with_capacity(3);
        for (k, a) in op.args.iter().enumerate() {
            let r = match resolve(*a) {
                Src::Fixed(r) => r,
                Src::Load { .. } => loaded[&(p, k)],
                Src::Val(v) => in_reg[&v],
            };
            src.push(r);
        }
        // Operands die here: loaded temporaries and consumed values.
        for (k, a) in op.args.iter().enumerate() {
            match (*a, resolve(*a)) {
                (Operand::Val(v), _) => {
                    let r = in_reg.remove(&v).expect("value in register");
                    free.insert(r);
                }
                (_, Src::Load { into: None, .. }) => {
                    free.insert(loaded.remove(&(p, k)).expect("load issued"));
                }
                _ => {}
            }
        }
        let fd = {
            let mut st = St {
                free: &mut free,
                in_reg: &mut in_reg,
                spilled: &mut spilled,
                free_slots: &mut free_slots,
                out: &mut out,
                stack_accesses: &mut stack_accesses,
            };
            take_reg(&mut st, &use_pos, &BTreeSet::new(), available)?
        };
        out.push(match op.kind {
            OpKind::Add => Instr::Fadd { fd, fs1: src[0], fs2: src[1] },
            OpKind::Mul => Instr::Fmul { fd, fs1: src[0], fs2: src[1] },
            OpKind::Fma => Instr::Fmadd { fd, fs1: src[0], fs2: src[1], fs3: src[2] },
            OpKind::Mv => Instr::Fmv { fd, fs: src[0] },
        });
        pending.retain(|&(at, reg, point)| {
            if p >= at + latency {
                out.push(Instr::Fsd { fs: reg, base: OUT_PTR, imm: store_imm(point) });
                free.insert(reg);
                false
            } else {
                true
            }
        });
        if op.root {
            pending.push((p, fd, op.point));
        } else {
            in_reg.insert(i, fd);
        }
        debug_assert!(pos_of.contains_key(&i));
    }
    for (_, reg, point) in pending {
        out.push(Instr::Fsd { fs: reg, base: OUT_PTR, imm: store_imm(point) });
    }
    Ok(BodyResult { instrs: out, stack_accesses })
}

fn pinned_reg(k: usize) -> FReg {
    31 - k as FReg
}

/// Compiles the scalar baseline for every core of the cluster.
pub fn compile_baseline(spec: &StencilSpec, shape: TileShape, opt: &OptConfig) -> Result<BaselineProgram, CompileError> {
    opt.validate()?;
    spec.validate()?;
    check_tile(spec, &shape)?;
    if opt.register_tiling && opt.interleave[0] != 1 {
        return Err(CompileError::Config(
            "register tiling needs consecutive x points on one core (interleave x = 1)".into(),
        ));
    }
    let layout = TileLayout::new(spec, shape, opt.cores());
    let bases = Bases::new(spec, &layout, opt);
    if bases.keys.len() > BASE_POOL.len() {
        return Err(CompileError::RegisterAllocation {
            need: bases.keys.len(),
            available: BASE_POOL.len(),
        });
    }
    let rings = if opt.register_tiling { Rings::new(spec) } else { Rings::default() };
    let ring_regs = rings.total;
    let reserve = working_regs(opt.unroll) + ring_regs;
    if reserve > 32 {
        return Err(CompileError::RegisterAllocation { need: reserve, available: 32 });
    }
    let pinned = spec.coeffs.len().min(32 - reserve);
    let work = distribute(&shape, opt.interleave);
    let mut cores = Vec::with_capacity(work.len());
    let mut stack_accesses = 0;
    for w in &work {
        let (prog, stack) = core_program(spec, &layout, opt, w, &bases, pinned, &rings)?;
        if w.core == 0 {
            stack_accesses = stack;
        }
        cores.push(prog);
    }
    Ok(BaselineProgram {
        kernel: spec.name.clone(),
        opt: *opt,
        layout,
        cores,
        pinned_coeffs: pinned,
        stack_accesses,
    })
}

/// Register rings along x used by register tiling: one per (array, dy, dz)
/// row whose taps span more than one x offset.
#[derive(Default)]
struct Rings {
    /// (read array id, dy, dz) -> (dx_min, span, first register).
    rows: BTreeMap<(usize, i32, i32), (i32, usize, FReg)>,
    total: usize,
    /// Copies of the point body per loop trip; every ring returns to its start.
    period: usize,
}

impl Rings {
    fn new(spec: &StencilSpec) -> Rings {
        let mut span: BTreeMap<(usize, i32, i32), (i32, i32)> = BTreeMap::new();
        for t in &spec.taps {
            let o = t.offset.0;
            let e = span.entry((t.array, o[1], o[2])).or_insert((o[0], o[0]));
            e.0 = e.0.min(o[0]);
            e.1 = e.1.max(o[0]);
        }
        let mut r = Rings { period: 1, ..Default::default() };
        let mut next: FReg = 0;
        for (k, (lo, hi)) in span {
            let s = (hi - lo + 1) as usize;
            if s > 1 {
                r.rows.insert(k, (lo, s, next));
                next += s as FReg;
                r.total += s;
                r.period = lcm(r.period, s);
            }
        }
        r
    }

    /// Register holding offset `dx` of a row at copy `k`.
    fn reg(&self, key: (usize, i32, i32), dx: i32, k: usize) -> Option<FReg> {
        self.rows
            .get(&key)
            .map(|&(lo, s, first)| first + (((dx - lo) as usize + k) % s) as FReg)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    let mut x = a;
    let mut y = b;
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

fn core_program(
    spec: &StencilSpec,
    layout: &TileLayout,
    opt: &OptConfig,
    work: &CoreWork,
    bases: &Bases,
    pinned: usize,
    rings: &Rings,
) -> Result<(CoreProgram, usize), CompileError> {
    let mut e = Emitter::default();
    let base_addr = layout.private(work.core);
    let coeffs = spec.coeff_values(1.0);
    let reads = spec.read_arrays();
    let expr = policy_expr(spec, opt.policy);
    let pc = e.push(Instr::Li { rd: SP, imm: base_addr as i64 });
    e.note(pc, "private region");
    for k in 0..pinned {
        e.push(Instr::Fld {
            fd: pinned_reg(k),
            base: SP,
            imm: (private::COEFFS + 8 * k as u64) as i32,
        });
    }
    let data = vec![DataSegment {
        label: "coefficients".into(),
        addr: base_addr + private::COEFFS,
        words: coeffs.iter().map(|v| v.to_bits()).collect(),
    }];
    let row_bytes = layout.row_bytes();
    let ix = opt.interleave[0];
    let ring_base = rings.total as FReg;
    let free_pool: BTreeSet<FReg> = (ring_base..=31 - pinned as FReg).collect();
    let mut point_loop = 0..0;
    let mut points_per_iteration = 0;
    let mut main_stack = 0;
    let regions = plan_regions(work, if rings.total > 0 { 1 } else { opt.unroll });
    for (ri, region) in regions.iter().enumerate() {
        let u = region.unroll;
        let ops = block_ops(&expr, u);
        let order = schedule_ops(&ops, opt.policy, opt.sched_latency);
        let first = first_point(work, region);
        let mut ptrs = vec![(OUT_PTR, layout.elem_addr(layout.out_base, first[0], first[1], first[2]) as i64)];
        for &(slot, dz, dy) in &bases.keys {
            let y = first[1] as i64 + dy.unwrap_or(0) as i64;
            let z = first[2] as i64 + dz as i64;
            let addr = layout.elem_addr(layout.read_bases[slot], first[0], y as usize, z as usize);
            let r = bases.reg_of(slot, dz, dy.unwrap_or(0));
            e.push(Instr::Li { rd: r, imm: addr as i64 });
            ptrs.push((r, addr as i64));
        }
        for &(r, v) in &ptrs[..1] {
            e.push(Instr::Li { rd: r, imm: v });
        }
        let tap_src = |point: usize, tap: usize| -> (IReg, i32) {
            let t = &spec.taps[tap];
            let o = t.offset.0;
            let slot = reads.iter().position(|&a| a == t.array).expect("tap reads an input");
            let base = bases.reg_of(slot, o[2], o[1]);
            let dy_bytes = if bases.split_rows { 0 } else { o[1] as i64 * row_bytes };
            let imm = (o[0] as i64 + (point * ix) as i64) * ELEM_BYTES as i64 + dy_bytes;
            (base, imm as i32)
        };
        let coeff_src = |c: usize| {
            if c < pinned {
                Src::Fixed(pinned_reg(c))
            } else {
                Src::Load {
                    base: SP,
                    imm: (private::COEFFS + 8 * c as u64) as i32,
                    into: None,
                }
            }
        };
        let store_imm = |point: usize| (point * ix * ELEM_BYTES) as i32;
        let geo = NestGeometry::new(layout, work, region, opt.interleave);
        let range;
        if rings.total > 0 {
            // One copy of the point body per ring phase; copies before the
            // last exit the row early when it ends mid-period.
            let mut copies = Vec::with_capacity(rings.period);
            let mut stack = 0;
            for k in 0..rings.period {
                let resolve = |a: Operand| match a {
                    Operand::Tap { point, tap } => {
                        let t = &spec.taps[tap];
                        let o = t.offset.0;
                        let key = (t.array, o[1], o[2]);
                        match rings.reg(key, o[0], k) {
                            Some(r) if o[0] == rings.rows[&key].0 + rings.rows[&key].1 as i32 - 1 => {
                                let (base, imm) = tap_src(point, tap);
                                Src::Load { base, imm, into: Some(r) }
                            }
                            Some(r) => Src::Fixed(r),
                            None => {
                                let (base, imm) = tap_src(point, tap);
                                Src::Load { base, imm, into: None }
                            }
                        }
                    }
                    Operand::Coeff(c) => coeff_src(c),
                    Operand::Val(v) => Src::Val(v),
                };
                let body = emit_body(&ops, &order, free_pool.clone(), &resolve, &store_imm, opt.sched_latency as usize)?;
                stack += body.stack_accesses;
                copies.push(body.instrs);
            }
            let mut exits = Vec::new();
            let ptrs_c = ptrs.clone();
            let block_step = geo.block_step;
            range = emit_nest_rows(
                &mut e,
                &geo,
                &ptrs,
                |e| {
                    for (&(arr, dy, dz), &(lo, s, _)) in &rings.rows {
                        for dx in lo..lo + s as i32 - 1 {
                            let tap_like = spec
                                .taps
                                .iter()
                                .position(|t| t.array == arr && t.offset.0[1] == dy && t.offset.0[2] == dz)
                                .expect("ring row has taps");
                            let (base, imm0) = tap_src(0, tap_like);
                            let imm = imm0 + (dx - spec.taps[tap_like].offset.0[0]) * ELEM_BYTES as i32;
                            e.push(Instr::Fld {
                                fd: rings.reg((arr, dy, dz), dx, 0).expect("ring register"),
                                base,
                                imm,
                            });
                        }
                    }
                },
                |e| {
                    for (k, copy) in copies.iter().enumerate() {
                        for i in copy {
                            e.push(*i);
                        }
                        if k + 1 < copies.len() {
                            for &(r, _) in &ptrs_c {
                                e.add_imm(r, block_step);
                            }
                            exits.push(e.push(Instr::Beq { rs1: OUT_PTR, rs2: crate::codegen::ROW_END, target: 0 }));
                        }
                    }
                },
            );
            for pc in exits {
                e.instrs[pc].set_branch_target(range.end);
            }
            if ri == 0 {
                main_stack = stack / rings.period;
            }
        } else {
            let resolve = |a: Operand| match a {
                Operand::Tap { point, tap } => {
                    let (base, imm) = tap_src(point, tap);
                    Src::Load { base, imm, into: None }
                }
                Operand::Coeff(c) => coeff_src(c),
                Operand::Val(v) => Src::Val(v),
            };
            let body = emit_body(&ops, &order, free_pool.clone(), &resolve, &store_imm, opt.sched_latency as usize)?;
            if ri == 0 {
                main_stack = body.stack_accesses;
            }
            range = emit_nest(&mut e, &geo, &ptrs, |e| {
                let pc = e.pc();
                for i in &body.instrs {
                    e.push(*i);
                }
                e.note(pc, format!("{u} point(s)"));
            });
        }
        if ri == 0 {
            // With register tiling the listed loop is the last copy alone.
            point_loop = if rings.total > 0 {
                let per_copy = range.len() / rings.period.max(1);
                range.end - per_copy..range.end
            } else {
                range
            };
            points_per_iteration = u;
        }
    }
    e.push(Instr::Fence);
    e.push(Instr::Halt);
    Ok((
        CoreProgram {
            kernel: spec.name.clone(),
            variant: "base".into(),
            core: work.core,
            instrs: e.instrs,
            point_loop,
            points_per_iteration,
            data,
            index_arrays: Vec::new(),
            notes: e.notes,
        },
        main_stack,
    ))
}
