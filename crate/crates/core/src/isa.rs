//! Abstract RV32G-style instruction set with stream-register and hardware-loop
//! extensions, plus the program container and its text listing.
//!
//! Only what the code generators emit is modelled. Branch targets are
//! absolute instruction indices; the listing turns them into labels.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::ops::Range;

pub type IReg = u8;
pub type FReg = u8;

pub const ZERO: IReg = 0;
pub const SP: IReg = 2;

/// FP registers `ft0..ft2` double as stream registers SR0..SR2 while streaming is enabled.
pub const NUM_SR: usize = 3;

/// First FP register renamed by a staggered repetition.
pub const STAGGER_BASE: FReg = 3;

/// Stream register configuration fields.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SrField {
    /// Byte address of the 16-bit index array (indirect streams).
    IdxBase,
    /// Indices per launch (indirect streams).
    IdxCount,
    /// Iteration count of an affine loop level.
    Bound(u8),
    /// Byte stride of an affine loop level.
    Stride(u8),
    /// Number of active affine loop levels.
    Dims,
    /// 1 for a write stream, 0 for a read stream.
    Write,
    /// 1 for indirect addressing, 0 for affine.
    Indirect,
}

impl fmt::Display for SrField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SrField::IdxBase => write!(f, "idx_base"),
            SrField::IdxCount => write!(f, "idx_count"),
            SrField::Bound(d) => write!(f, "bound{d}"),
            SrField::Stride(d) => write!(f, "stride{d}"),
            SrField::Dims => write!(f, "dims"),
            SrField::Write => write!(f, "write"),
            SrField::Indirect => write!(f, "indirect"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Instr {
    Li { rd: IReg, imm: i64 },
    Addi { rd: IReg, rs: IReg, imm: i32 },
    Add { rd: IReg, rs1: IReg, rs2: IReg },
    Bne { rs1: IReg, rs2: IReg, target: usize },
    Beq { rs1: IReg, rs2: IReg, target: usize },
    J { target: usize },
    SrCfg { sr: u8, field: SrField, value: i64 },
    /// Starts a new job on every stream in `mask` with the byte address in
    /// `base`. Occupies the integer pipeline for `cost` cycles.
    SrLaunch { mask: u8, base: IReg, cost: u8 },
    SrEnable,
    SrDisable,
    /// Repeats the next `len` FP instructions `reps + 1` times. The outer
    /// form replays the whole body per repetition; the inner form repeats
    /// each instruction before moving to the next. With `stagger = w > 0`,
    /// repetition `k` renames FP registers in `STAGGER_BASE..STAGGER_BASE + w`
    /// to `r + k * w`.
    Frep { reps: IReg, len: u8, inner: bool, stagger: u8 },
    Fld { fd: FReg, base: IReg, imm: i32 },
    Fsd { fs: FReg, base: IReg, imm: i32 },
    Fadd { fd: FReg, fs1: FReg, fs2: FReg },
    Fmul { fd: FReg, fs1: FReg, fs2: FReg },
    /// `fd = fs1 * fs2 + fs3`, single rounding.
    Fmadd { fd: FReg, fs1: FReg, fs2: FReg, fs3: FReg },
    Fmv { fd: FReg, fs: FReg },
    /// Waits until every offloaded instruction and stream write has completed.
    Fence,
    Halt,
}

/// Instruction classes used for instruction-mix accounting.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub enum Category {
    Compute,
    Memory,
    Address,
    Control,
}

impl Instr {
    /// True for instructions executed by the FP subsystem.
    pub fn is_fp(&self) -> bool {
        matches!(
            self,
            Instr::Fld { .. }
                | Instr::Fsd { .. }
                | Instr::Fadd { .. }
                | Instr::Fmul { .. }
                | Instr::Fmadd { .. }
                | Instr::Fmv { .. }
        )
    }

    /// Arithmetic instructions counted toward FPU utilization.
    pub fn is_fp_compute(&self) -> bool {
        matches!(self, Instr::Fadd { .. } | Instr::Fmul { .. } | Instr::Fmadd { .. })
    }

    pub fn flops(&self) -> u64 {
        match self {
            Instr::Fadd { .. } | Instr::Fmul { .. } => 1,
            Instr::Fmadd { .. } => 2,
            _ => 0,
        }
    }

    /// Dynamic instruction count of this instruction (stream launches are macros).
    pub fn weight(&self) -> usize {
        match self {
            Instr::SrLaunch { cost, .. } => *cost as usize,
            _ => 1,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Instr::Fadd { .. } | Instr::Fmul { .. } | Instr::Fmadd { .. } => Category::Compute,
            Instr::Fld { .. } | Instr::Fsd { .. } | Instr::Fmv { .. } => Category::Memory,
            Instr::Li { .. }
            | Instr::Addi { .. }
            | Instr::Add { .. }
            | Instr::SrCfg { .. }
            | Instr::SrLaunch { .. } => Category::Address,
            Instr::Bne { .. }
            | Instr::Beq { .. }
            | Instr::J { .. }
            | Instr::SrEnable
            | Instr::SrDisable
            | Instr::Frep { .. }
            | Instr::Fence
            | Instr::Halt => Category::Control,
        }
    }

    /// Applies `f` to every FP register operand.
    pub fn map_fregs(self, f: impl Fn(FReg) -> FReg) -> Instr {
        match self {
            Instr::Fld { fd, base, imm } => Instr::Fld { fd: f(fd), base, imm },
            Instr::Fsd { fs, base, imm } => Instr::Fsd { fs: f(fs), base, imm },
            Instr::Fadd { fd, fs1, fs2 } => Instr::Fadd { fd: f(fd), fs1: f(fs1), fs2: f(fs2) },
            Instr::Fmul { fd, fs1, fs2 } => Instr::Fmul { fd: f(fd), fs1: f(fs1), fs2: f(fs2) },
            Instr::Fmadd { fd, fs1, fs2, fs3 } => Instr::Fmadd {
                fd: f(fd),
                fs1: f(fs1),
                fs2: f(fs2),
                fs3: f(fs3),
            },
            Instr::Fmv { fd, fs } => Instr::Fmv { fd: f(fd), fs: f(fs) },
            other => other,
        }
    }

    /// The register renaming of repetition `k` under a stagger window `w`.
    pub fn staggered(self, k: usize, w: u8) -> Instr {
        if w == 0 || k == 0 {
            return self;
        }
        self.map_fregs(|r| {
            if r >= STAGGER_BASE && r < STAGGER_BASE + w {
                r + (k * w as usize) as FReg
            } else {
                r
            }
        })
    }

    pub fn branch_target(&self) -> Option<usize> {
        match *self {
            Instr::Bne { target, .. } | Instr::Beq { target, .. } | Instr::J { target } => {
                Some(target)
            }
            _ => None,
        }
    }

    pub(crate) fn set_branch_target(&mut self, t: usize) {
        match self {
            Instr::Bne { target, .. } | Instr::Beq { target, .. } | Instr::J { target } => {
                *target = t
            }
            _ => {}
        }
    }
}

pub fn ireg_name(r: IReg) -> &'static str {
    const NAMES: [&str; 32] = [
        "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3",
        "a4", "a5", "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11",
        "t3", "t4", "t5", "t6",
    ];
    NAMES[r as usize]
}

pub fn freg_name(r: FReg) -> &'static str {
    const NAMES: [&str; 32] = [
        "ft0", "ft1", "ft2", "ft3", "ft4", "ft5", "ft6", "ft7", "fs0", "fs1", "fa0", "fa1",
        "fa2", "fa3", "fa4", "fa5", "fa6", "fa7", "fs2", "fs3", "fs4", "fs5", "fs6", "fs7",
        "fs8", "fs9", "fs10", "fs11", "ft8", "ft9", "ft10", "ft11",
    ];
    NAMES[r as usize]
}

/// Static data a program expects in TCDM before it starts.
#[derive(Clone, PartialEq, Debug)]
pub struct DataSegment {
    pub label: String,
    /// Byte address, 8-byte aligned.
    pub addr: u64,
    pub words: Vec<u64>,
}

/// Packs 16-bit indices four to a 64-bit word, lowest index in the low bits.
pub fn pack_indices(idx: &[u16]) -> Vec<u64> {
    idx.chunks(4)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u64, |w, (i, &v)| w | (u64::from(v) << (16 * i)))
        })
        .collect()
}

/// Instruction sequence for one core plus the metadata reports need.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct CoreProgram {
    pub kernel: String,
    pub variant: String,
    pub core: usize,
    pub instrs: Vec<Instr>,
    /// Instruction range of the innermost point loop of the main region.
    pub point_loop: Range<usize>,
    /// Grid points computed by one pass over `point_loop`.
    pub points_per_iteration: usize,
    pub data: Vec<DataSegment>,
    /// Index arrays per indirect stream, for listings.
    pub index_arrays: Vec<Vec<u16>>,
    /// Line comments attached to instruction indices.
    pub notes: BTreeMap<usize, String>,
}

impl CoreProgram {
    pub fn point_loop_body(&self) -> &[Instr] {
        &self.instrs[self.point_loop.clone()]
    }

    /// Human-readable assembly listing; byte-stable for golden files.
    pub fn listing(&self) -> String {
        let mut labels: BTreeMap<usize, String> = BTreeMap::new();
        for ins in &self.instrs {
            if let Some(t) = ins.branch_target() {
                let n = labels.len();
                labels.entry(t).or_insert_with(|| format!(".L{n}"));
            }
        }
        // Renumber labels in address order so listings read top to bottom.
        for (i, v) in labels.values_mut().enumerate() {
            *v = format!(".L{i}");
        }
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# kernel {} variant {} core {}",
            self.kernel, self.variant, self.core
        );
        let _ = writeln!(
            s,
            "# point loop: instructions {}..{}, {} point(s) per iteration",
            self.point_loop.start, self.point_loop.end, self.points_per_iteration
        );
        for (sr, idx) in self.index_arrays.iter().enumerate() {
            let list: Vec<String> = idx.iter().map(u16::to_string).collect();
            let _ = writeln!(s, "# sr{sr} indices: {}", list.join(" "));
        }
        for seg in &self.data {
            let _ = writeln!(
                s,
                "# data {} at {:#x}, {} words",
                seg.label,
                seg.addr,
                seg.words.len()
            );
        }
        for (pc, ins) in self.instrs.iter().enumerate() {
            if let Some(l) = labels.get(&pc) {
                let _ = writeln!(s, "{l}:");
            }
            let text = format_instr(ins, &labels);
            match self.notes.get(&pc) {
                Some(n) => {
                    let _ = writeln!(s, "    {text:<34}# {n}");
                }
                None => {
                    let _ = writeln!(s, "    {text}");
                }
            }
        }
        s
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_instr(self, &BTreeMap::new()))
    }
}

fn format_instr(ins: &Instr, labels: &BTreeMap<usize, String>) -> String {
    let l = |t: usize| labels.get(&t).cloned().unwrap_or_else(|| t.to_string());
    let x = ireg_name;
    let f = freg_name;
    match *ins {
        Instr::Li { rd, imm } => format!("li      {}, {imm}", x(rd)),
        Instr::Addi { rd, rs, imm } => format!("addi    {}, {}, {imm}", x(rd), x(rs)),
        Instr::Add { rd, rs1, rs2 } => format!("add     {}, {}, {}", x(rd), x(rs1), x(rs2)),
        Instr::Bne { rs1, rs2, target } => format!("bne     {}, {}, {}", x(rs1), x(rs2), l(target)),
        Instr::Beq { rs1, rs2, target } => format!("beq     {}, {}, {}", x(rs1), x(rs2), l(target)),
        Instr::J { target } => format!("j       {}", l(target)),
        Instr::SrCfg { sr, field, value } => format!("sr.cfg  sr{sr}.{field}, {value}"),
        Instr::SrLaunch { mask, base, cost } => {
            let srs: Vec<String> = (0..NUM_SR)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| format!("sr{i}"))
                .collect();
            format!("sr.launch {}, {}  [{cost} insts]", srs.join("|"), x(base))
        }
        Instr::SrEnable => "sr.enable".to_string(),
        Instr::SrDisable => "sr.disable".to_string(),
        Instr::Frep { reps, len, inner, stagger } => {
            let op = if inner { "frep.i" } else { "frep.o" };
            if stagger > 0 {
                format!("{op:<8}{}, {len}, {stagger}", x(reps))
            } else {
                format!("{op:<8}{}, {len}", x(reps))
            }
        }
        Instr::Fld { fd, base, imm } => format!("fld     {}, {imm}({})", f(fd), x(base)),
        Instr::Fsd { fs, base, imm } => format!("fsd     {}, {imm}({})", f(fs), x(base)),
        Instr::Fadd { fd, fs1, fs2 } => format!("fadd.d  {}, {}, {}", f(fd), f(fs1), f(fs2)),
        Instr::Fmul { fd, fs1, fs2 } => format!("fmul.d  {}, {}, {}", f(fd), f(fs1), f(fs2)),
        Instr::Fmadd { fd, fs1, fs2, fs3 } => {
            format!("fmadd.d {}, {}, {}, {}", f(fd), f(fs1), f(fs2), f(fs3))
        }
        Instr::Fmv { fd, fs } => format!("fmv.d   {}, {}", f(fd), f(fs)),
        Instr::Fence => "fence".to_string(),
        Instr::Halt => "halt".to_string(),
    }
}

/// Share of each instruction category in a straight-line sequence.
#[derive(Clone, Copy, PartialEq, Debug, Default)]
pub struct InstructionMix {
    pub compute: f64,
    pub memory: f64,
    pub address: f64,
    pub control: f64,
    /// Dynamic instruction count (launch macros count their full cost).
    pub total: usize,
    /// Set when the sequence is empty and all ratios are zero.
    pub degenerate: bool,
}

/// Classifies every instruction into exactly one category.
pub fn compute_instruction_mix(instrs: &[Instr]) -> InstructionMix {
    let mut counts = [0usize; 4];
    for ins in instrs {
        let slot = match ins.category() {
            Category::Compute => 0,
            Category::Memory => 1,
            Category::Address => 2,
            Category::Control => 3,
        };
        counts[slot] += ins.weight();
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return InstructionMix {
            degenerate: true,
            ..Default::default()
        };
    }
    let r = |c: usize| c as f64 / total as f64;
    InstructionMix {
        compute: r(counts[0]),
        memory: r(counts[1]),
        address: r(counts[2]),
        control: r(counts[3]),
        total,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mix_is_degenerate() {
        let m = compute_instruction_mix(&[]);
        assert!(m.degenerate);
        assert_eq!((m.compute, m.memory, m.address, m.control), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn launch_counts_its_cost() {
        let body = [
            Instr::SrLaunch { mask: 3, base: 5, cost: 3 },
            Instr::Fadd { fd: 3, fs1: 0, fs2: 1 },
        ];
        let m = compute_instruction_mix(&body);
        assert_eq!(m.total, 4);
        assert!((m.compute - 0.25).abs() < 1e-12);
    }

    #[test]
    fn indices_pack_low_first() {
        assert_eq!(pack_indices(&[1, 2, 3, 4, 5]), vec![0x0004_0003_0002_0001, 5]);
    }

    #[test]
    fn listing_resolves_labels() {
        let p = CoreProgram {
            kernel: "k".into(),
            variant: "v".into(),
            instrs: vec![
                Instr::Li { rd: 5, imm: 0 },
                Instr::Addi { rd: 5, rs: 5, imm: 8 },
                Instr::Bne { rs1: 5, rs2: 10, target: 1 },
                Instr::Halt,
            ],
            point_loop: 1..3,
            points_per_iteration: 1,
            ..Default::default()
        };
        let text = p.listing();
        assert!(text.contains(".L0:\n    addi    t0, t0, 8"));
        assert!(text.contains("bne     t0, a0, .L0"));
    }
}
