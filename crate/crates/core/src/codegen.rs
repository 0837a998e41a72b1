//! Pieces shared by the stream and scalar code generators: optimization
//! settings, TCDM layout, work distribution, per-block operation lists,
//! latency-aware list scheduling and loop-nest emission.

use std::collections::BTreeMap;

use crate::error::CompileError;
use crate::ir::{Expr, Node, ReassocPolicy, StencilSpec, TileShape, ELEM_BYTES};
use crate::isa::{IReg, Instr};

/// TCDM capacity of one cluster.
pub const TCDM_BYTES: u64 = 128 * 1024;
/// Number of TCDM banks; bank = (addr / 8) mod 32.
pub const TCDM_BANKS: usize = 32;

/// Code-generation options common to both variants.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct OptConfig {
    /// Points per unrolled block along x (1 to 4).
    pub unroll: usize,
    pub policy: ReassocPolicy,
    /// Wrap stream-variant point loops in the FP repetition buffer when possible.
    pub hw_loop: bool,
    /// Core interleaving factors along x and y; their product is the core count.
    pub interleave: [usize; 2],
    /// FP registers available for coefficients before SR2 streams the rest.
    pub coeff_budget: usize,
    /// Integer-pipeline cycles of one stream launch.
    pub launch_cost: u8,
    /// Scalar variant only: reuse x-neighbour loads across consecutive points.
    pub register_tiling: bool,
    /// FPU latency the list scheduler plans for.
    pub sched_latency: u32,
    /// Capacity of the FP repetition buffer.
    pub frep_capacity: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            unroll: 1,
            policy: ReassocPolicy::Source,
            hw_loop: true,
            interleave: [4, 2],
            coeff_budget: 12,
            launch_cost: 3,
            register_tiling: false,
            sched_latency: 3,
            frep_capacity: 16,
        }
    }
}

impl OptConfig {
    pub fn cores(&self) -> usize {
        self.interleave[0] * self.interleave[1]
    }

    /// Single-core configuration (no interleaving).
    pub fn single_core() -> Self {
        OptConfig {
            interleave: [1, 1],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), CompileError> {
        if !(1..=4).contains(&self.unroll) {
            return Err(CompileError::Config(format!(
                "unroll factor {} outside 1..=4",
                self.unroll
            )));
        }
        if self.interleave.contains(&0) || self.cores() > 8 {
            return Err(CompileError::Config(format!(
                "interleave {:?} must give between 1 and 8 cores",
                self.interleave
            )));
        }
        if self.launch_cost == 0 {
            return Err(CompileError::Config("launch cost must be positive".into()));
        }
        Ok(())
    }
}

/// Grid points owned by one core.
#[derive(Clone, PartialEq, Debug)]
pub struct CoreWork {
    pub core: usize,
    /// Position in the interleaving grid (x class, y class).
    pub class: [usize; 2],
    /// Owned x coordinates (tile cells), ascending.
    pub xs: Vec<usize>,
    /// Owned y coordinates, ascending.
    pub ys: Vec<usize>,
    /// Owned z coordinates (all interior planes), ascending.
    pub zs: Vec<usize>,
}

impl CoreWork {
    pub fn points(&self) -> usize {
        self.xs.len() * self.ys.len() * self.zs.len()
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        self.xs.binary_search(&x).is_ok()
            && self.ys.binary_search(&y).is_ok()
            && self.zs.binary_search(&z).is_ok()
    }
}

/// Splits the tile interior by congruence classes: core `i + ix * j` owns
/// points with `x ≡ i (mod ix)` and `y ≡ j (mod iy)`, counted from the first
/// interior cell. Remainder columns and rows fall to the lowest classes.
pub fn distribute(shape: &TileShape, interleave: [usize; 2]) -> Vec<CoreWork> {
    let [ix, iy] = interleave;
    let lo = shape.halo;
    let hi = [0, 1, 2].map(|a| shape.extent[a] - shape.halo[a]);
    let mut out = Vec::with_capacity(ix * iy);
    for j in 0..iy {
        for i in 0..ix {
            out.push(CoreWork {
                core: i + ix * j,
                class: [i, j],
                xs: (lo[0] + i..hi[0]).step_by(ix).collect(),
                ys: (lo[1] + j..hi[1]).step_by(iy).collect(),
                zs: (lo[2]..hi[2]).collect(),
            });
        }
    }
    out
}

/// Per-core iteration extent when the interior is padded up to a multiple
/// of the interleaving factors: `[ceil(nx/ix), ceil(ny/iy), nz]`.
pub fn padded_core_extent(shape: &TileShape, interleave: [usize; 2]) -> [usize; 3] {
    let n = shape.interior();
    [
        n[0].div_ceil(interleave[0]),
        n[1].div_ceil(interleave[1]),
        n[2],
    ]
}

// ---------------------------------------------------------------------------
// TCDM layout
// ---------------------------------------------------------------------------

/// Offsets inside a core's private TCDM region.
pub mod private {
    /// Index arrays for SR0 (main region, then tail region).
    pub const IDX0: u64 = 0;
    pub const IDX1: u64 = 256;
    /// Coefficient values, one word each.
    pub const COEFFS: u64 = 512;
    /// Coefficient sequence replayed by SR2 (main region, then tail).
    pub const COEFF_SEQ: u64 = 768;
    /// Spill slots.
    pub const STACK: u64 = 1792;
    pub const STACK_SLOTS: usize = 64;
    pub const SIZE: u64 = 2304;
    /// Region pitch; the extra 32 bytes shift each core's region by four banks.
    pub const PITCH: u64 = SIZE + 32;
}

/// Byte addresses of every buffer a tile iteration touches.
#[derive(Clone, PartialEq, Debug)]
pub struct TileLayout {
    pub shape: TileShape,
    /// Current buffers of the read arrays, in [`StencilSpec::read_arrays`] order.
    pub read_bases: Vec<u64>,
    pub out_base: u64,
    /// Buffers the DMA fills with the next tile.
    pub next_bases: Vec<u64>,
    /// Buffer holding the previous tile's output while the DMA drains it.
    pub prev_out_base: u64,
    pub private_base: u64,
    pub cores: usize,
    pub total_bytes: u64,
}

impl TileLayout {
    pub fn new(spec: &StencilSpec, shape: TileShape, cores: usize) -> Self {
        let buf = (shape.bytes() as u64).next_multiple_of(64);
        let n_read = spec.read_arrays().len() as u64;
        let mut cursor = 0u64;
        let mut take = |bytes: u64| {
            let a = cursor;
            cursor += bytes;
            a
        };
        let read_bases = (0..n_read).map(|_| take(buf)).collect();
        let out_base = take(buf);
        let next_bases = (0..n_read).map(|_| take(buf)).collect();
        let prev_out_base = take(buf);
        let private_base = take(private::PITCH * cores as u64);
        TileLayout {
            shape,
            read_bases,
            out_base,
            next_bases,
            prev_out_base,
            private_base,
            cores,
            total_bytes: cursor,
        }
    }

    pub fn private(&self, core: usize) -> u64 {
        self.private_base + private::PITCH * core as u64
    }

    /// True when the double-buffered working set exceeds the TCDM capacity.
    pub fn overcommitted(&self) -> bool {
        self.total_bytes > TCDM_BYTES
    }

    pub fn elem_addr(&self, base: u64, x: usize, y: usize, z: usize) -> u64 {
        base + (self.shape.lin(x, y, z) * ELEM_BYTES) as u64
    }

    pub fn row_bytes(&self) -> i64 {
        (self.shape.extent[0] * ELEM_BYTES) as i64
    }

    pub fn plane_bytes(&self) -> i64 {
        (self.shape.extent[0] * self.shape.extent[1] * ELEM_BYTES) as i64
    }
}

// ---------------------------------------------------------------------------
// Regions and loop nests
// ---------------------------------------------------------------------------

/// A rectangular run of blocks: every owned row, a fixed column range.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Region {
    /// Points per block.
    pub unroll: usize,
    /// Blocks per row.
    pub blocks: usize,
    /// Index into [`CoreWork::xs`] of the first column.
    pub col0: usize,
}

/// Main region with blocks of `unroll` points plus a tail region for the
/// leftover columns of every row.
pub fn plan_regions(work: &CoreWork, unroll: usize) -> Vec<Region> {
    let n = work.xs.len();
    let mut v = Vec::new();
    if work.points() == 0 {
        return v;
    }
    if n / unroll > 0 {
        v.push(Region {
            unroll,
            blocks: n / unroll,
            col0: 0,
        });
    }
    if n % unroll > 0 {
        v.push(Region {
            unroll: n % unroll,
            blocks: 1,
            col0: (n / unroll) * unroll,
        });
    }
    v
}

/// Strides of the per-core loop nest, in bytes.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct NestGeometry {
    /// Pointer advance per block.
    pub block_step: i64,
    pub blocks: usize,
    /// Distance between consecutive owned rows.
    pub row_stride: i64,
    pub rows: usize,
    pub plane_stride: i64,
    pub planes: usize,
}

impl NestGeometry {
    pub fn new(layout: &TileLayout, work: &CoreWork, region: &Region, interleave: [usize; 2]) -> Self {
        NestGeometry {
            block_step: (region.unroll * interleave[0] * ELEM_BYTES) as i64,
            blocks: region.blocks,
            row_stride: layout.row_bytes() * interleave[1] as i64,
            rows: work.ys.len(),
            plane_stride: layout.plane_bytes(),
            planes: work.zs.len(),
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks * self.rows * self.planes
    }
}

/// Emits instructions with branch targets patched once labels are placed.
#[derive(Default)]
pub struct Emitter {
    pub instrs: Vec<Instr>,
    pub notes: BTreeMap<usize, String>,
}

/// Scratch integer register for immediates that exceed 12 bits.
pub const SCRATCH: IReg = 31;

impl Emitter {
    pub fn pc(&self) -> usize {
        self.instrs.len()
    }

    pub fn push(&mut self, i: Instr) -> usize {
        self.instrs.push(i);
        self.instrs.len() - 1
    }

    pub fn note(&mut self, pc: usize, text: impl Into<String>) {
        self.notes.insert(pc, text.into());
    }

    /// `rd += imm`, through the scratch register when `imm` exceeds 12 bits.
    pub fn add_imm(&mut self, rd: IReg, imm: i64) {
        if imm == 0 {
            return;
        }
        if fits_imm12(imm) {
            self.push(Instr::Addi {
                rd,
                rs: rd,
                imm: imm as i32,
            });
        } else {
            self.push(Instr::Li { rd: SCRATCH, imm });
            self.push(Instr::Add {
                rd,
                rs1: rd,
                rs2: SCRATCH,
            });
        }
    }
}

pub fn fits_imm12(v: i64) -> bool {
    (-2048..=2047).contains(&v)
}

/// Registers of the loop nest.
pub const ROW_END: IReg = 10; // a0
pub const PLANE_END: IReg = 11; // a1
pub const NEST_END: IReg = 12; // a2

/// Emits a three-level loop nest (planes, rows, blocks) around `body`.
///
/// `ptrs` advance in lockstep; `ptrs[0]` is compared against the row end.
/// The body must leave the pointers untouched; the nest adds the block
/// step after it. Returns the instruction range of the innermost loop.
pub fn emit_nest(
    e: &mut Emitter,
    geo: &NestGeometry,
    ptrs: &[(IReg, i64)],
    body: impl FnMut(&mut Emitter),
) -> std::ops::Range<usize> {
    emit_nest_rows(e, geo, ptrs, |_| {}, body)
}

/// [`emit_nest`] with `row_prelude` run at the start of every row.
pub fn emit_nest_rows(
    e: &mut Emitter,
    geo: &NestGeometry,
    ptrs: &[(IReg, i64)],
    mut row_prelude: impl FnMut(&mut Emitter),
    mut body: impl FnMut(&mut Emitter),
) -> std::ops::Range<usize> {
    let lead = ptrs[0];
    let row_len = geo.block_step * geo.blocks as i64;
    let multi_plane = geo.planes > 1;
    let multi_row = geo.rows > 1;
    // Pointer position after the last row of a plane, relative to the plane start.
    let plane_used = if multi_row {
        geo.row_stride * geo.rows as i64
    } else {
        row_len
    };
    let row_end0 = lead.1 + row_len;
    let plane_end0 = row_end0 + geo.row_stride * geo.rows as i64;
    e.push(Instr::Li {
        rd: ROW_END,
        imm: row_end0,
    });
    if multi_row {
        e.push(Instr::Li {
            rd: PLANE_END,
            imm: plane_end0,
        });
    }
    if multi_plane {
        let last = if multi_row { plane_end0 } else { row_end0 };
        e.push(Instr::Li {
            rd: NEST_END,
            imm: last + geo.plane_stride * geo.planes as i64,
        });
    }
    let plane_top = e.pc();
    let row_top = e.pc();
    row_prelude(e);
    let block_top = e.pc();
    body(e);
    for &(r, _) in ptrs {
        e.add_imm(r, geo.block_step);
    }
    let br = e.push(Instr::Bne {
        rs1: lead.0,
        rs2: ROW_END,
        target: block_top,
    });
    let inner = block_top..br + 1;
    if multi_row {
        let skip = geo.row_stride - row_len;
        for &(r, _) in ptrs {
            e.add_imm(r, skip);
        }
        e.add_imm(ROW_END, geo.row_stride);
        e.push(Instr::Bne {
            rs1: ROW_END,
            rs2: PLANE_END,
            target: row_top,
        });
    }
    if multi_plane {
        let skip = geo.plane_stride - plane_used;
        for &(r, _) in ptrs {
            e.add_imm(r, skip);
        }
        if multi_row {
            e.add_imm(ROW_END, skip);
            e.add_imm(PLANE_END, geo.plane_stride);
            e.push(Instr::Bne {
                rs1: PLANE_END,
                rs2: NEST_END,
                target: plane_top,
            });
        } else {
            e.add_imm(ROW_END, geo.plane_stride);
            e.push(Instr::Bne {
                rs1: ROW_END,
                rs2: NEST_END,
                target: plane_top,
            });
        }
    }
    inner
}

// ---------------------------------------------------------------------------
// Block operation lists
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub enum Operand {
    Tap { point: usize, tap: usize },
    Coeff(usize),
    /// Result of another op in the same block.
    Val(usize),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OpKind {
    Add,
    Mul,
    Fma,
    /// Copy of a leaf; only used when the whole expression is a single leaf.
    Mv,
}

#[derive(Clone, PartialEq, Debug)]
pub struct Op {
    pub kind: OpKind,
    /// Operands in instruction order; for `Fma` these are `a, b, c` of `a * b + c`.
    pub args: Vec<Operand>,
    pub point: usize,
    pub root: bool,
}

/// Arithmetic of `u` consecutive points, point-major in source order.
pub fn block_ops(expr: &Expr, u: usize) -> Vec<Op> {
    let order = expr.ops_in_order();
    let leaf = |id: usize, point: usize, map: &BTreeMap<usize, usize>| match expr.node(id) {
        Node::Tap(t) => Operand::Tap { point, tap: t },
        Node::Coeff(c) => Operand::Coeff(c),
        _ => Operand::Val(map[&id]),
    };
    let mut ops = Vec::new();
    for point in 0..u {
        if order.is_empty() {
            ops.push(Op {
                kind: OpKind::Mv,
                args: vec![leaf(expr.root(), point, &BTreeMap::new())],
                point,
                root: true,
            });
            continue;
        }
        let mut map = BTreeMap::new();
        for &id in &order {
            let (kind, args) = match expr.node(id) {
                Node::Add(a, b) => (OpKind::Add, vec![a, b]),
                Node::Mul(a, b) => (OpKind::Mul, vec![a, b]),
                Node::Fma(a, b, c) => (OpKind::Fma, vec![a, b, c]),
                _ => unreachable!("ops_in_order yields arithmetic nodes"),
            };
            let args = args.into_iter().map(|a| leaf(a, point, &map)).collect();
            map.insert(id, ops.len());
            ops.push(Op {
                kind,
                args,
                point,
                root: id == expr.root(),
            });
        }
    }
    ops
}

/// Orders a block's ops. `Source` keeps point-major source order; the other
/// policies list-schedule for a single-issue in-order FPU with `latency`
/// cycles between dependent ops. Root ops always retire in point order.
pub fn schedule_ops(ops: &[Op], policy: ReassocPolicy, latency: u32) -> Vec<usize> {
    if policy == ReassocPolicy::Source {
        return (0..ops.len()).collect();
    }
    let n = ops.len();
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut preds = vec![0usize; n];
    let mut deps: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, op) in ops.iter().enumerate() {
        for a in &op.args {
            if let Operand::Val(p) = *a {
                users[p].push(i);
                deps[i].push(p);
                preds[i] += 1;
            }
        }
    }
    let roots: Vec<usize> = (0..n).filter(|&i| ops[i].root).collect();
    let mut order_dep: Vec<Option<usize>> = vec![None; n];
    for w in roots.windows(2) {
        order_dep[w[1]] = Some(w[0]);
        preds[w[1]] += 1;
    }
    // Height: longest latency path to the end of the point's tree.
    let mut height = vec![0u32; n];
    for i in (0..n).rev() {
        let h = users[i].iter().map(|&u| height[u]).max().unwrap_or(0);
        height[i] = h + latency;
    }
    let mut ready_at = vec![0u64; n];
    let mut remaining = preds.clone();
    let mut issued = vec![false; n];
    let mut candidates: Vec<usize> = (0..n).filter(|&i| remaining[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    let mut now = 0u64;
    while order.len() < n {
        let pick = candidates
            .iter()
            .copied()
            .filter(|&i| ready_at[i] <= now)
            .max_by(|&a, &b| {
                height[a]
                    .cmp(&height[b])
                    .then(ops[b].point.cmp(&ops[a].point))
                    .then(b.cmp(&a))
            });
        let Some(i) = pick else {
            now = candidates.iter().map(|&i| ready_at[i]).min().expect("acyclic block");
            continue;
        };
        candidates.retain(|&c| c != i);
        issued[i] = true;
        order.push(i);
        for &u in &users[i] {
            ready_at[u] = ready_at[u].max(now + latency as u64);
            remaining[u] -= 1;
            if remaining[u] == 0 {
                candidates.push(u);
            }
        }
        if let Some(next_root) = roots.iter().position(|&r| r == i).and_then(|k| roots.get(k + 1)) {
            let r = *next_root;
            debug_assert_eq!(order_dep[r], Some(i));
            ready_at[r] = ready_at[r].max(now + 1);
            remaining[r] -= 1;
            if remaining[r] == 0 {
                candidates.push(r);
            }
        }
        now += 1;
    }
    debug_assert!(issued.iter().all(|&b| b));
    order
}

/// Expression tree used for a policy.
pub fn policy_expr(spec: &StencilSpec, policy: ReassocPolicy) -> Expr {
    spec.expr.reassociate(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::catalog_kernel;

    #[test]
    fn distribution_counts_match_congruence_classes() {
        let spec = catalog_kernel("jacobi_2d").unwrap();
        let shape = TileShape::for_spec(&spec, 64).unwrap();
        let work = distribute(&shape, [4, 2]);
        assert_eq!(work.len(), 8);
        let total: usize = work.iter().map(CoreWork::points).sum();
        assert_eq!(total, 62 * 62);
        assert_eq!(work[0].xs.len(), 16);
        assert_eq!(work[3].xs.len(), 15);
        assert_eq!(work[0].ys.len(), 31);
        assert_eq!(padded_core_extent(&shape, [4, 2]), [16, 31, 1]);
    }

    #[test]
    fn regions_cover_every_column() {
        let w = CoreWork {
            core: 0,
            class: [0, 0],
            xs: (0..15).collect(),
            ys: vec![1],
            zs: vec![0],
        };
        let r = plan_regions(&w, 4);
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].blocks, r[1].unroll, r[1].col0), (3, 3, 12));
    }

    #[test]
    fn list_schedule_interleaves_points() {
        let spec = catalog_kernel("box2d1r").unwrap();
        let ops = block_ops(&spec.expr, 4);
        let order = schedule_ops(&ops, ReassocPolicy::Reorder, 3);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..ops.len()).collect::<Vec<_>>());
        // The first four issued ops start the four independent chains.
        let first: Vec<usize> = order[..4].iter().map(|&i| ops[i].point).collect();
        assert_eq!(first, vec![0, 1, 2, 3]);
        let roots: Vec<usize> = order.iter().filter(|&&i| ops[i].root).map(|&i| ops[i].point).collect();
        assert_eq!(roots, vec![0, 1, 2, 3]);
    }

    #[test]
    fn layout_flags_overcommit() {
        let spec = catalog_kernel("jacobi_2d").unwrap();
        let shape = TileShape::for_spec(&spec, 64).unwrap();
        let l = TileLayout::new(&spec, shape, 8);
        assert!(l.overcommitted());
        let small = TileShape::for_spec(&spec, 16).unwrap();
        assert!(!TileLayout::new(&spec, small, 8).overcommitted());
    }
}
