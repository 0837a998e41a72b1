//! Cycle-stepped model of one core: a single-issue integer pipeline that
//! offloads FP instructions to an in-order FP sequencer, three stream
//! registers mapped onto `ft0..ft2`, and an FP repetition buffer.
//!
//! A cycle has two phases. [`Core::propose`] lists the TCDM requests the
//! core's ports want to make; after bank arbitration, [`Core::commit`]
//! executes whatever was granted or needs no memory. Values are computed
//! when an instruction issues; latencies only delay readiness, so outputs do
//! not depend on timing parameters.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::SimError;
use crate::isa::{CoreProgram, FReg, Instr, SrField, NUM_SR, STAGGER_BASE};

/// Bank of a byte address.
pub fn bank_of(addr: u64, banks: usize) -> usize {
    ((addr / 8) % banks as u64) as usize
}

/// Word-addressed scratchpad shared by the cores of a cluster.
#[derive(Clone, PartialEq, Debug)]
pub struct Tcdm {
    words: Vec<u64>,
    pub banks: usize,
}

impl Tcdm {
    pub fn new(bytes: u64, banks: usize) -> Self {
        Tcdm {
            words: vec![0; bytes.div_ceil(8) as usize],
            banks,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.words.len() as u64 * 8
    }

    fn index(&self, addr: u64) -> Result<usize, SimError> {
        if addr % 8 != 0 {
            return Err(SimError::Misaligned(addr));
        }
        let i = (addr / 8) as usize;
        if i >= self.words.len() {
            return Err(SimError::OutOfBounds(addr));
        }
        Ok(i)
    }

    pub fn read(&self, addr: u64) -> Result<u64, SimError> {
        Ok(self.words[self.index(addr)?])
    }

    pub fn write(&mut self, addr: u64, v: u64) -> Result<(), SimError> {
        let i = self.index(addr)?;
        self.words[i] = v;
        Ok(())
    }

    pub fn read_f64(&self, addr: u64) -> Result<f64, SimError> {
        self.read(addr).map(f64::from_bits)
    }

    pub fn write_slice(&mut self, addr: u64, words: &[u64]) -> Result<(), SimError> {
        let i = self.index(addr)?;
        let end = i + words.len();
        if end > self.words.len() {
            return Err(SimError::OutOfBounds(addr + 8 * words.len() as u64));
        }
        self.words[i..end].copy_from_slice(words);
        Ok(())
    }
}

/// Per-bank round-robin arbiter: at most one grant per bank per cycle; the
/// requester after the last winner (in id order, wrapping) goes first.
#[derive(Clone, Debug)]
pub struct BankArbiter {
    last: Vec<Option<usize>>,
}

impl BankArbiter {
    pub fn new(banks: usize) -> Self {
        BankArbiter {
            last: vec![None; banks],
        }
    }

    /// Grants for `(requester, bank)` pairs, in input order.
    pub fn arbitrate(&mut self, reqs: &[(usize, usize)]) -> Vec<bool> {
        let mut grant = vec![false; reqs.len()];
        let mut winners: Vec<Option<(usize, usize)>> = vec![None; self.last.len()];
        for (i, &(who, bank)) in reqs.iter().enumerate() {
            let rank = |w: usize| match self.last[bank] {
                Some(l) if w <= l => (1, w),
                _ => (0, w),
            };
            match winners[bank] {
                Some((_, cur)) if rank(cur) <= rank(who) => {}
                _ => winners[bank] = Some((i, who)),
            }
        }
        for (bank, w) in winners.iter().enumerate() {
            if let Some((i, who)) = *w {
                grant[i] = true;
                self.last[bank] = Some(who);
            }
        }
        grant
    }
}

/// Timing parameters of the core and its memory.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TimingConfig {
    /// Cycles from FP issue until a dependent op may issue.
    pub fpu_latency: u32,
    /// Cycles from a TCDM grant until the data is available.
    pub tcdm_latency: u32,
    pub fifo_depth: usize,
    pub offload_depth: usize,
    pub frep_capacity: usize,
    pub branch_penalty: u32,
    /// Cycles lost on the first fetch of each instruction cache line; zero
    /// models a warm cache.
    pub icache_miss_penalty: u32,
    pub max_cycles: u64,
}

/// Instructions per instruction cache line.
pub const ICACHE_LINE: usize = 8;

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            fpu_latency: 3,
            tcdm_latency: 1,
            fifo_depth: 4,
            offload_depth: 4,
            frep_capacity: 16,
            branch_penalty: 1,
            icache_miss_penalty: 0,
            max_cycles: 20_000_000,
        }
    }
}

/// Stall cycles by cause. FP-side causes count cycles in which the FP
/// sequencer had an instruction but could not issue it; the others count
/// integer-pipeline cycles.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct StallCounts {
    pub tcdm_conflict: u64,
    pub fifo_empty: u64,
    pub fifo_full: u64,
    pub dependency: u64,
    pub offload_full: u64,
    pub launch_wait: u64,
    pub fence: u64,
    pub icache_miss: u64,
}

impl StallCounts {
    pub fn total(&self) -> u64 {
        self.tcdm_conflict
            + self.fifo_empty
            + self.fifo_full
            + self.dependency
            + self.offload_full
            + self.launch_wait
            + self.fence
            + self.icache_miss
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Default)]
pub struct CoreMetrics {
    /// Cycle after the core halted with everything drained.
    pub cycles: u64,
    /// Integer instructions retired; a stream launch counts its full cost.
    pub int_retired: u64,
    /// FP instructions retired, including repetition-buffer replays.
    pub fp_retired: u64,
    /// Retired FP arithmetic (add, mul, fma).
    pub fp_compute: u64,
    pub flops: u64,
    pub stalls: StallCounts,
    pub sr_pushed: [u64; NUM_SR],
    pub sr_popped: [u64; NUM_SR],
    pub sr_launches: [u64; NUM_SR],
    /// Cycles with the repetition buffer active.
    pub frep_cycles: u64,
}

impl CoreMetrics {
    pub fn ipc(&self) -> f64 {
        self.ipc_over(self.cycles)
    }

    pub fn ipc_over(&self, cycles: u64) -> f64 {
        if cycles == 0 {
            0.0
        } else {
            (self.int_retired + self.fp_retired) as f64 / cycles as f64
        }
    }

    pub fn fpu_util(&self) -> f64 {
        self.fpu_util_over(self.cycles)
    }

    pub fn fpu_util_over(&self, cycles: u64) -> f64 {
        if cycles == 0 {
            0.0
        } else {
            self.fp_compute as f64 / cycles as f64
        }
    }
}

/// Memory port of a core.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Port {
    Lsu,
    Sr(u8),
}

impl Port {
    pub fn index(self) -> usize {
        match self {
            Port::Lsu => 0,
            Port::Sr(s) => 1 + s as usize,
        }
    }
}

pub const PORTS: usize = 1 + NUM_SR;

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct MemRequest {
    pub port: Port,
    pub addr: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
struct SrConfig {
    idx_base: i64,
    idx_count: i64,
    bounds: [i64; 4],
    strides: [i64; 4],
    dims: i64,
    write: bool,
    indirect: bool,
}

#[derive(Clone, Copy, Debug)]
struct Job {
    base: i64,
    start: u64,
    cfg: SrConfig,
    pos: usize,
    total: usize,
}

impl Job {
    fn affine_addr(&self) -> i64 {
        let mut rem = self.pos as i64;
        let mut a = self.base;
        for d in 0..self.cfg.dims.max(1) as usize {
            let b = self.cfg.bounds[d].max(1);
            a += (rem % b) * self.cfg.strides[d];
            rem /= b;
        }
        a
    }
}

#[derive(Clone, Copy, Debug)]
struct IdxWord {
    addr: i64,
    lanes: [u16; 4],
    ready: u64,
}

/// One stream register: configuration, up to two queued jobs (active and
/// shadow) and its data FIFO.
#[derive(Clone, Debug, Default)]
struct StreamUnit {
    cfg: SrConfig,
    jobs: VecDeque<Job>,
    fifo: VecDeque<(f64, u64)>,
    idx: Option<IdxWord>,
}

#[derive(Clone, Copy, Debug)]
enum SrWant {
    Idx(i64),
    Read(i64),
    Write(i64),
}

impl StreamUnit {
    fn idle(&self) -> bool {
        self.jobs.is_empty()
    }

    fn want(&self, now: u64, depth: usize) -> Option<SrWant> {
        let job = self.jobs.front()?;
        if job.start > now {
            return None;
        }
        if job.cfg.write {
            return match self.fifo.front() {
                Some(&(_, ready)) if ready <= now => Some(SrWant::Write(job.affine_addr())),
                _ => None,
            };
        }
        if self.fifo.len() >= depth {
            return None;
        }
        if !job.cfg.indirect {
            return Some(SrWant::Read(job.affine_addr()));
        }
        let word = job.cfg.idx_base + (job.pos as i64 / 4) * 8;
        match self.idx {
            Some(w) if w.addr == word && w.ready <= now => {
                let i = w.lanes[job.pos % 4] as i64;
                Some(SrWant::Read(job.base + 8 * i))
            }
            Some(w) if w.addr == word => None,
            _ => Some(SrWant::Idx(word)),
        }
    }

    fn advance(&mut self) {
        let job = self.jobs.front_mut().expect("active job");
        job.pos += 1;
        if job.pos == job.total {
            self.jobs.pop_front();
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct QEntry {
    instr: Instr,
    /// Byte address for loads and stores, repetition count for `frep`.
    aux: i64,
    pc: usize,
}

#[derive(Clone, Debug)]
struct FrepState {
    body: Vec<QEntry>,
    len: usize,
    iters: u64,
    iter: u64,
    idx: usize,
    inner: bool,
    stagger: u8,
}

impl FrepState {
    fn current(&self) -> Option<QEntry> {
        self.body.get(self.idx).map(|e| QEntry {
            instr: e.instr.staggered(self.iter as usize, self.stagger),
            ..*e
        })
    }

    /// Moves to the next issue slot; false once the last one retired.
    fn advance(&mut self) -> bool {
        if self.inner {
            self.iter += 1;
            if self.iter == self.iters {
                self.iter = 0;
                self.idx += 1;
            }
            self.idx < self.len
        } else {
            self.idx += 1;
            if self.idx == self.len {
                self.idx = 0;
                self.iter += 1;
            }
            self.iter < self.iters
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum FpStall {
    Dependency,
    FifoEmpty,
    FifoFull,
}

/// One core executing a [`CoreProgram`].
#[derive(Clone, Debug)]
pub struct Core {
    pub id: usize,
    program: CoreProgram,
    timing: TimingConfig,
    pc: usize,
    x: [i64; 32],
    f: [f64; 32],
    f_ready: [u64; 32],
    int_busy_until: u64,
    halted: bool,
    done: bool,
    queue: VecDeque<QEntry>,
    frep: Option<FrepState>,
    srs: [StreamUnit; NUM_SR],
    sr_enabled: bool,
    metrics: CoreMetrics,
    /// FP instruction selected in the propose phase and whether it may issue.
    cur: Option<(QEntry, Result<(), FpStall>)>,
    sr_want: [Option<SrWant>; NUM_SR],
    /// Instruction cache lines fetched so far.
    cached: Vec<bool>,
    trace: Option<String>,
}

fn fp_sources(i: &Instr) -> ([FReg; 3], usize) {
    match *i {
        Instr::Fadd { fs1, fs2, .. } | Instr::Fmul { fs1, fs2, .. } => ([fs1, fs2, 0], 2),
        Instr::Fmadd { fs1, fs2, fs3, .. } => ([fs1, fs2, fs3], 3),
        Instr::Fmv { fs, .. } | Instr::Fsd { fs, .. } => ([fs, 0, 0], 1),
        _ => ([0; 3], 0),
    }
}

fn fp_dest(i: &Instr) -> Option<FReg> {
    match *i {
        Instr::Fadd { fd, .. }
        | Instr::Fmul { fd, .. }
        | Instr::Fmadd { fd, .. }
        | Instr::Fmv { fd, .. }
        | Instr::Fld { fd, .. } => Some(fd),
        _ => None,
    }
}

impl Core {
    pub fn new(id: usize, program: CoreProgram, timing: TimingConfig) -> Self {
        Core {
            id,
            program,
            timing,
            pc: 0,
            x: [0; 32],
            f: [0.0; 32],
            f_ready: [0; 32],
            int_busy_until: 0,
            halted: false,
            done: false,
            queue: VecDeque::new(),
            frep: None,
            srs: Default::default(),
            sr_enabled: false,
            metrics: CoreMetrics::default(),
            cur: None,
            sr_want: [None, None, None],
            cached: Vec::new(),
            trace: None,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(String::new());
    }

    pub fn trace(&self) -> Option<&str> {
        self.trace.as_deref()
    }

    pub fn program(&self) -> &CoreProgram {
        &self.program
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn metrics(&self) -> &CoreMetrics {
        &self.metrics
    }

    /// True when `r` currently names a stream register.
    fn streamed(&self, r: FReg) -> bool {
        self.sr_enabled && (r as usize) < NUM_SR
    }

    /// Starts a job on every stream in `mask` with the given byte base.
    ///
    /// Each stream holds one running and one pending job; launching onto a
    /// stream whose pending slot is taken is a program error.
    pub fn launch_indirect(&mut self, mask: u8, base: i64, now: u64) -> Result<(), SimError> {
        for s in 0..NUM_SR {
            if mask & (1 << s) != 0 && self.srs[s].jobs.len() >= 2 {
                return Err(SimError::PrematureRelaunch(s));
            }
        }
        self.push_jobs(mask, base, now);
        Ok(())
    }

    fn push_jobs(&mut self, mask: u8, base: i64, start: u64) {
        for s in 0..NUM_SR {
            if mask & (1 << s) == 0 {
                continue;
            }
            let u = &mut self.srs[s];
            let cfg = u.cfg;
            let total = if cfg.indirect {
                cfg.idx_count.max(0) as usize
            } else {
                (0..cfg.dims.max(1) as usize).map(|d| cfg.bounds[d].max(0) as usize).product()
            };
            self.metrics.sr_launches[s] += 1;
            if total > 0 {
                u.jobs.push_back(Job { base, start, cfg, pos: 0, total });
            }
        }
    }

    fn drained(&self, now: u64) -> bool {
        self.queue.is_empty()
            && self.frep.is_none()
            && self.srs.iter().all(|u| u.idle() && (!u.cfg.write || u.fifo.is_empty()))
            && self.f_ready.iter().all(|&r| r <= now)
    }

    /// Phase one of a cycle: select the FP instruction and list memory requests.
    pub fn propose(&mut self, now: u64, out: &mut Vec<MemRequest>) {
        if self.done {
            return;
        }
        // The repetition buffer captures one offloaded instruction per cycle.
        if let Some(fr) = &mut self.frep {
            if fr.body.len() < fr.len {
                if let Some(e) = self.queue.pop_front() {
                    fr.body.push(e);
                }
            }
        } else if let Some(e) = self.queue.front().copied() {
            if let Instr::Frep { len, inner, stagger, .. } = e.instr {
                self.queue.pop_front();
                self.frep = Some(FrepState {
                    body: Vec::with_capacity(len as usize),
                    len: len as usize,
                    iters: e.aux as u64 + 1,
                    iter: 0,
                    idx: 0,
                    inner,
                    stagger,
                });
                if let (Some(fr), Some(next)) = (&mut self.frep, self.queue.pop_front()) {
                    fr.body.push(next);
                }
            }
        }
        let entry = match &self.frep {
            Some(fr) => fr.current(),
            None => self.queue.front().copied(),
        };
        self.cur = entry.map(|e| (e, self.fp_ready(&e.instr, now)));
        if let Some((e, Ok(()))) = self.cur {
            if matches!(e.instr, Instr::Fld { .. } | Instr::Fsd { .. }) {
                out.push(MemRequest { port: Port::Lsu, addr: e.aux as u64 });
            }
        }
        for s in 0..NUM_SR {
            let w = self.srs[s].want(now, self.timing.fifo_depth);
            if let Some(SrWant::Idx(a) | SrWant::Read(a) | SrWant::Write(a)) = w {
                out.push(MemRequest { port: Port::Sr(s as u8), addr: a as u64 });
            }
            self.sr_want[s] = w;
        }
    }

    fn fp_ready(&self, i: &Instr, now: u64) -> Result<(), FpStall> {
        let (src, n) = fp_sources(i);
        let mut pops = [0usize; NUM_SR];
        for &r in &src[..n] {
            if self.streamed(r) && !self.srs[r as usize].cfg.write {
                pops[r as usize] += 1;
            } else if self.f_ready[r as usize] > now {
                return Err(FpStall::Dependency);
            }
        }
        for (s, &k) in pops.iter().enumerate() {
            if k > 0 {
                let fifo = &self.srs[s].fifo;
                if fifo.len() < k || fifo[k - 1].1 > now {
                    return Err(FpStall::FifoEmpty);
                }
            }
        }
        if let Some(fd) = fp_dest(i) {
            if self.streamed(fd) && self.srs[fd as usize].cfg.write {
                if self.srs[fd as usize].fifo.len() >= self.timing.fifo_depth {
                    return Err(FpStall::FifoFull);
                }
            }
        }
        Ok(())
    }

    /// Phase two: apply grants (indexed like the requests `propose` pushed,
    /// in port order) and advance the pipelines.
    pub fn commit(&mut self, now: u64, granted: &[(Port, bool)], mem: &mut Tcdm) -> Result<(), SimError> {
        if self.done {
            return Ok(());
        }
        let grant = |p: Port| granted.iter().any(|&(q, g)| q == p && g);
        let lat = self.timing.tcdm_latency as u64;
        for s in 0..NUM_SR {
            let Some(w) = self.sr_want[s].take() else { continue };
            if !grant(Port::Sr(s as u8)) {
                continue;
            }
            let u = &mut self.srs[s];
            match w {
                SrWant::Idx(a) => {
                    let word = mem.read(a as u64)?;
                    let lanes = [0, 1, 2, 3].map(|k| (word >> (16 * k)) as u16);
                    u.idx = Some(IdxWord { addr: a, lanes, ready: now + lat });
                }
                SrWant::Read(a) => {
                    let v = mem.read_f64(a as u64)?;
                    u.fifo.push_back((v, now + lat));
                    self.metrics.sr_pushed[s] += 1;
                    u.advance();
                }
                SrWant::Write(a) => {
                    let (v, _) = u.fifo.pop_front().expect("write data present");
                    mem.write(a as u64, v.to_bits())?;
                    self.metrics.sr_popped[s] += 1;
                    u.advance();
                }
            }
        }
        let fp_note = self.step_fp(now, grant(Port::Lsu), mem)?;
        let int_note = self.step_int(now)?;
        if self.frep.is_some() {
            self.metrics.frep_cycles += 1;
        }
        if let Some(t) = &mut self.trace {
            let _ = writeln!(t, "{now} {} | {int_note} | {fp_note}", self.pc);
        }
        if self.halted && self.drained(now + 1) {
            self.done = true;
            self.metrics.cycles = now + 1;
        }
        if now >= self.timing.max_cycles {
            return Err(SimError::Timeout(self.timing.max_cycles));
        }
        Ok(())
    }

    fn step_fp(&mut self, now: u64, lsu_granted: bool, mem: &mut Tcdm) -> Result<String, SimError> {
        let Some((e, ready)) = self.cur.take() else {
            return Ok("-".into());
        };
        match ready {
            Err(FpStall::Dependency) => {
                self.metrics.stalls.dependency += 1;
                return Ok(format!("stall dependency: {}", e.instr));
            }
            Err(FpStall::FifoEmpty) => {
                self.metrics.stalls.fifo_empty += 1;
                return Ok(format!("stall fifo_empty: {}", e.instr));
            }
            Err(FpStall::FifoFull) => {
                self.metrics.stalls.fifo_full += 1;
                return Ok(format!("stall fifo_full: {}", e.instr));
            }
            Ok(()) => {}
        }
        let is_mem = matches!(e.instr, Instr::Fld { .. } | Instr::Fsd { .. });
        if is_mem && !lsu_granted {
            self.metrics.stalls.tcdm_conflict += 1;
            return Ok(format!("stall tcdm_conflict: {}", e.instr));
        }
        let fpu = self.timing.fpu_latency as u64;
        let (src, n) = fp_sources(&e.instr);
        let mut vals = [0.0f64; 3];
        for k in 0..n {
            let r = src[k];
            vals[k] = if self.streamed(r) && !self.srs[r as usize].cfg.write {
                self.metrics.sr_popped[r as usize] += 1;
                self.srs[r as usize].fifo.pop_front().expect("operand checked").0
            } else {
                self.f[r as usize]
            };
        }
        let (result, ready_at) = match e.instr {
            Instr::Fadd { .. } => (vals[0] + vals[1], now + fpu),
            Instr::Fmul { .. } => (vals[0] * vals[1], now + fpu),
            Instr::Fmadd { .. } => (vals[0].mul_add(vals[1], vals[2]), now + fpu),
            Instr::Fmv { .. } => (vals[0], now + fpu),
            Instr::Fld { .. } => (mem.read_f64(e.aux as u64)?, now + self.timing.tcdm_latency as u64 + 1),
            Instr::Fsd { .. } => {
                mem.write(e.aux as u64, vals[0].to_bits())?;
                (0.0, now)
            }
            other => {
                return Err(SimError::Program {
                    pc: e.pc,
                    msg: format!("{other} is not an FP instruction"),
                })
            }
        };
        if let Some(fd) = fp_dest(&e.instr) {
            if self.streamed(fd) && self.srs[fd as usize].cfg.write {
                self.srs[fd as usize].fifo.push_back((result, ready_at));
                self.metrics.sr_pushed[fd as usize] += 1;
            } else {
                self.f[fd as usize] = result;
                self.f_ready[fd as usize] = ready_at;
            }
        }
        self.metrics.fp_retired += 1;
        if e.instr.is_fp_compute() {
            self.metrics.fp_compute += 1;
            self.metrics.flops += e.instr.flops();
        }
        match &mut self.frep {
            Some(fr) => {
                if !fr.advance() {
                    self.frep = None;
                }
            }
            None => {
                self.queue.pop_front();
            }
        }
        Ok(format!("{}", e.instr))
    }

    fn step_int(&mut self, now: u64) -> Result<String, SimError> {
        if self.halted || now < self.int_busy_until {
            return Ok("-".into());
        }
        let pc = self.pc;
        let Some(&ins) = self.program.instrs.get(pc) else {
            return Err(SimError::Program { pc, msg: "ran past the end of the program".into() });
        };
        if self.timing.icache_miss_penalty > 0 {
            let line = pc / ICACHE_LINE;
            if self.cached.len() <= line {
                self.cached.resize(line + 1, false);
            }
            if !self.cached[line] {
                self.cached[line] = true;
                let penalty = self.timing.icache_miss_penalty as u64;
                self.int_busy_until = now + penalty;
                self.metrics.stalls.icache_miss += penalty;
                return Ok(format!("stall icache_miss: {ins}"));
            }
        }
        let stall = |m: &mut CoreMetrics, what: &str| {
            match what {
                "offload_full" => m.stalls.offload_full += 1,
                "launch_wait" => m.stalls.launch_wait += 1,
                _ => m.stalls.fence += 1,
            }
            Ok(format!("stall {what}: {ins}"))
        };
        let mut next = pc + 1;
        match ins {
            Instr::Li { rd, imm } => self.set_x(rd, imm),
            Instr::Addi { rd, rs, imm } => self.set_x(rd, self.x[rs as usize] + imm as i64),
            Instr::Add { rd, rs1, rs2 } => self.set_x(rd, self.x[rs1 as usize] + self.x[rs2 as usize]),
            Instr::Bne { rs1, rs2, target } | Instr::Beq { rs1, rs2, target } => {
                let eq = self.x[rs1 as usize] == self.x[rs2 as usize];
                let taken = if matches!(ins, Instr::Bne { .. }) { !eq } else { eq };
                if taken {
                    next = target;
                    self.int_busy_until = now + 1 + self.timing.branch_penalty as u64;
                }
            }
            Instr::J { target } => {
                next = target;
                self.int_busy_until = now + 1 + self.timing.branch_penalty as u64;
            }
            Instr::SrCfg { sr, field, value } => {
                let u = &mut self.srs[sr as usize];
                if !u.idle() || (u.cfg.write && !u.fifo.is_empty()) {
                    return stall(&mut self.metrics, "launch_wait");
                }
                let c = &mut u.cfg;
                match field {
                    SrField::IdxBase => c.idx_base = value,
                    SrField::IdxCount => c.idx_count = value,
                    SrField::Bound(d) => c.bounds[d as usize] = value,
                    SrField::Stride(d) => c.strides[d as usize] = value,
                    SrField::Dims => c.dims = value,
                    SrField::Write => c.write = value != 0,
                    SrField::Indirect => c.indirect = value != 0,
                }
                u.idx = None;
            }
            Instr::SrLaunch { mask, base, cost } => {
                if (0..NUM_SR).any(|s| mask & (1 << s) != 0 && self.srs[s].jobs.len() >= 2) {
                    return stall(&mut self.metrics, "launch_wait");
                }
                self.push_jobs(mask, self.x[base as usize], now + cost as u64 - 1);
                self.int_busy_until = now + cost as u64;
                self.metrics.int_retired += cost as u64 - 1;
            }
            Instr::SrEnable => self.sr_enabled = true,
            Instr::SrDisable | Instr::Fence | Instr::Halt => {
                if !self.drained(now) {
                    return stall(&mut self.metrics, "fence");
                }
                match ins {
                    Instr::SrDisable => self.sr_enabled = false,
                    Instr::Halt => {
                        self.halted = true;
                        next = pc;
                    }
                    _ => {}
                }
            }
            Instr::Frep { reps, len, stagger, .. } => {
                if stagger > 0 && self.x[reps as usize] >= 0 {
                    let top = STAGGER_BASE as i64 + (self.x[reps as usize] + 1) * stagger as i64;
                    if top > 32 {
                        return Err(SimError::Program {
                            pc,
                            msg: format!("stagger window {stagger} leaves the register file"),
                        });
                    }
                }
                if len as usize > self.timing.frep_capacity || len == 0 {
                    return Err(SimError::Program {
                        pc,
                        msg: format!("repetition body of {len} exceeds the buffer"),
                    });
                }
                if self.queue.len() >= self.timing.offload_depth {
                    return stall(&mut self.metrics, "offload_full");
                }
                let aux = self.x[reps as usize];
                self.queue.push_back(QEntry { instr: ins, aux, pc });
            }
            _ if ins.is_fp() => {
                if self.queue.len() >= self.timing.offload_depth {
                    return stall(&mut self.metrics, "offload_full");
                }
                let aux = match ins {
                    Instr::Fld { base, imm, .. } | Instr::Fsd { base, imm, .. } => {
                        self.x[base as usize] + imm as i64
                    }
                    _ => 0,
                };
                self.queue.push_back(QEntry { instr: ins, aux, pc });
                self.pc = next;
                return Ok(format!("offload {ins}"));
            }
            _ => unreachable!("every instruction is integer or FP"),
        }
        self.metrics.int_retired += 1;
        self.pc = next;
        Ok(format!("{ins}"))
    }

    fn set_x(&mut self, rd: u8, v: i64) {
        if rd != 0 {
            self.x[rd as usize] = v;
        }
    }
}

/// Runs a single core against `mem` until it halts, with the same bank
/// arbitration as the cluster but no other requesters.
pub fn run_to_completion(program: &CoreProgram, mem: &mut Tcdm, timing: TimingConfig) -> Result<CoreMetrics, SimError> {
    let mut core = Core::new(0, program.clone(), timing);
    let mut arb = BankArbiter::new(mem.banks);
    let mut reqs = Vec::new();
    let mut now = 0;
    while !core.done() {
        reqs.clear();
        core.propose(now, &mut reqs);
        let pairs: Vec<(usize, usize)> = reqs.iter().map(|r| (r.port.index(), bank_of(r.addr, mem.banks))).collect();
        let g = arb.arbitrate(&pairs);
        let granted: Vec<(Port, bool)> = reqs.iter().zip(g).map(|(r, g)| (r.port, g)).collect();
        core.commit(now, &granted, mem)?;
        now += 1;
    }
    Ok(*core.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prog(instrs: Vec<Instr>) -> CoreProgram {
        CoreProgram {
            instrs,
            ..Default::default()
        }
    }

    fn run(instrs: Vec<Instr>, mem: &mut Tcdm) -> CoreMetrics {
        run_to_completion(&prog(instrs), mem, TimingConfig::default()).unwrap()
    }

    #[test]
    fn cold_instruction_lines_cost_the_miss_penalty() {
        let code: Vec<Instr> = (0..9).map(|i| Instr::Li { rd: 5, imm: i }).chain([Instr::Halt]).collect();
        let mut mem = Tcdm::new(64, 32);
        let warm = run(code.clone(), &mut mem);
        let cold = run_to_completion(
            &prog(code),
            &mut mem,
            TimingConfig {
                icache_miss_penalty: 5,
                ..TimingConfig::default()
            },
        )
        .unwrap();
        assert_eq!(cold.stalls.icache_miss, 10);
        assert_eq!(cold.cycles, warm.cycles + 10);
    }

    #[test]
    fn empty_program_has_no_compute() {
        let mut mem = Tcdm::new(64, 32);
        let m = run(vec![Instr::Halt], &mut mem);
        assert_eq!(m.fp_compute, 0);
        assert_eq!(m.fpu_util(), 0.0);
    }

    #[test]
    fn dependent_fma_waits_two_bubbles() {
        let mut mem = Tcdm::new(64, 32);
        let m = run(
            vec![
                Instr::Fmadd { fd: 3, fs1: 4, fs2: 5, fs3: 6 },
                Instr::Fmadd { fd: 7, fs1: 4, fs2: 5, fs3: 3 },
                Instr::Halt,
            ],
            &mut mem,
        );
        assert_eq!(m.stalls.dependency, 2);
    }

    #[test]
    fn arbiter_rotates_priority() {
        let mut a = BankArbiter::new(32);
        let reqs: Vec<(usize, usize)> = (0..8).map(|c| (c, 5)).collect();
        let g = a.arbitrate(&reqs);
        assert_eq!(g.iter().filter(|&&b| !b).count(), 7);
        assert!(g[0]);
        let g = a.arbitrate(&reqs);
        assert!(g[1]);
        let distinct: Vec<(usize, usize)> = (0..8).map(|c| (c, c)).collect();
        assert!(a.arbitrate(&distinct).iter().all(|&b| b));
    }

    #[test]
    fn indirect_stream_feeds_an_add() {
        let mut mem = Tcdm::new(1024, 32);
        // Index array at 512: element offsets 2 and 5.
        mem.write(512, 2 | (5 << 16)).unwrap();
        mem.write(16, 1.5f64.to_bits()).unwrap();
        mem.write(40, 2.25f64.to_bits()).unwrap();
        mem.write(600, 0).unwrap();
        let m = run(
            vec![
                Instr::SrCfg { sr: 0, field: SrField::Indirect, value: 1 },
                Instr::SrCfg { sr: 0, field: SrField::IdxBase, value: 512 },
                Instr::SrCfg { sr: 0, field: SrField::IdxCount, value: 2 },
                Instr::SrEnable,
                Instr::Li { rd: 5, imm: 0 },
                Instr::SrLaunch { mask: 1, base: 5, cost: 3 },
                Instr::Fadd { fd: 3, fs1: 0, fs2: 0 },
                Instr::Li { rd: 6, imm: 600 },
                Instr::Fsd { fs: 3, base: 6, imm: 0 },
                Instr::Fence,
                Instr::SrDisable,
                Instr::Halt,
            ],
            &mut mem,
        );
        assert_eq!(mem.read_f64(600).unwrap(), 3.75);
        assert_eq!(m.sr_pushed[0], 2);
        assert_eq!(m.sr_popped[0], 2);
    }

    #[test]
    fn relaunch_onto_full_slots_is_an_error() {
        let mut c = Core::new(0, prog(vec![Instr::Halt]), TimingConfig::default());
        c.srs[0].cfg = SrConfig { indirect: true, idx_count: 4, ..Default::default() };
        c.launch_indirect(1, 0, 0).unwrap();
        c.launch_indirect(1, 64, 0).unwrap();
        assert!(matches!(c.launch_indirect(1, 128, 0), Err(SimError::PrematureRelaunch(0))));
    }

    #[test]
    fn misaligned_access_faults() {
        let mem = Tcdm::new(64, 32);
        assert!(matches!(mem.read(4), Err(SimError::Misaligned(4))));
        assert!(matches!(mem.read(64), Err(SimError::OutOfBounds(64))));
    }
}
