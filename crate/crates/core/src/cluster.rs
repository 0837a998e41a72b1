//! Eight-core cluster: shared 32-bank TCDM, a DMA engine that prefetches the
//! next tile and drains the previous output while the cores compute, and the
//! metrics reported per kernel and variant.
//!
//! Every run is checked against the reference engine before metrics are
//! returned.

use std::fmt;

use crate::baseline::compile_baseline;
use crate::codegen::{OptConfig, TileLayout, TCDM_BANKS, TCDM_BYTES};
use crate::error::{CompileError, SimError};
use crate::ir::{flop_count, ReassocPolicy, StencilSpec, TileShape};
use crate::isa::CoreProgram;
use crate::reference::{run_reference, Tile};
use crate::saris::compile;
use crate::vm::{bank_of, BankArbiter, Core, CoreMetrics, MemRequest, Port, Tcdm, TimingConfig, PORTS};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub enum Variant {
    Base,
    Saris,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Base, Variant::Saris];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Saris => "saris",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "base" | "baseline" => Some(Variant::Base),
            "saris" | "stream" => Some(Variant::Saris),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-core programs of one variant plus the layout they assume.
#[derive(Clone, PartialEq, Debug)]
pub struct CompiledKernel {
    pub variant: Variant,
    pub opt: OptConfig,
    pub layout: TileLayout,
    pub cores: Vec<CoreProgram>,
}

pub fn compile_variant(
    spec: &StencilSpec,
    shape: TileShape,
    opt: &OptConfig,
    variant: Variant,
) -> Result<CompiledKernel, CompileError> {
    let (layout, cores) = match variant {
        Variant::Base => {
            let p = compile_baseline(spec, shape, opt)?;
            (p.layout, p.cores)
        }
        Variant::Saris => {
            let p = compile(spec, shape, opt)?;
            (p.layout, p.cores)
        }
    };
    Ok(CompiledKernel {
        variant,
        opt: *opt,
        layout,
        cores,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DmaConfig {
    pub enabled: bool,
    /// Latency from issuing a transfer to its first beat. All transfers of a
    /// tile are issued back to back, so only the first latency is exposed
    /// unless a transfer is shorter than the latency.
    pub init_cycles: u64,
    /// Bus width in bytes per beat.
    pub beat_bytes: u64,
}

impl Default for DmaConfig {
    fn default() -> Self {
        DmaConfig {
            enabled: true,
            init_cycles: 100,
            beat_bytes: 64,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ClusterConfig {
    pub timing: TimingConfig,
    pub dma: DmaConfig,
    /// Seed of the random input tile.
    pub seed: u64,
    /// Keep a per-cycle trace of every core.
    pub trace: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            timing: TimingConfig::default(),
            dma: DmaConfig::default(),
            seed: 1,
            trace: false,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DmaDirection {
    /// Main memory to TCDM.
    In,
    /// TCDM to main memory.
    Out,
}

/// One 2D or 3D transfer: a box of contiguous row runs.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DmaTransfer {
    pub dir: DmaDirection,
    /// TCDM byte address and length of every row.
    pub runs: Vec<(u64, u64)>,
    /// Added to a destination address to find the word the DMA copies in.
    pub source_delta: i64,
}

impl DmaTransfer {
    pub fn bytes(&self) -> u64 {
        self.runs.iter().map(|r| r.1).sum()
    }
}

fn box_runs(layout: &TileLayout, base: u64, lo: [usize; 3], hi: [usize; 3]) -> Vec<(u64, u64)> {
    let mut runs = Vec::new();
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            let a = layout.elem_addr(base, lo[0], y, z);
            runs.push((a, ((hi[0] - lo[0]) * 8) as u64));
        }
    }
    runs
}

/// Transfers that overlap one tile iteration: every read array of the next
/// tile over the interior widened by that array's tap reach, then the
/// previous tile's output interior.
pub fn plan_transfers(spec: &StencilSpec, layout: &TileLayout) -> Vec<DmaTransfer> {
    let shape = layout.shape;
    let mut v = Vec::new();
    for (slot, &array) in spec.read_arrays().iter().enumerate() {
        let r = spec.reach(array);
        let lo = [0, 1, 2].map(|a| shape.halo[a] - r[a].min(shape.halo[a]));
        let hi = [0, 1, 2].map(|a| shape.extent[a] - lo[a]);
        v.push(DmaTransfer {
            dir: DmaDirection::In,
            runs: box_runs(layout, layout.next_bases[slot], lo, hi),
            source_delta: layout.read_bases[slot] as i64 - layout.next_bases[slot] as i64,
        });
    }
    let lo = shape.halo;
    let hi = [0, 1, 2].map(|a| shape.extent[a] - shape.halo[a]);
    v.push(DmaTransfer {
        dir: DmaDirection::Out,
        runs: box_runs(layout, layout.prev_out_base, lo, hi),
        source_delta: 0,
    });
    v
}

/// Word addresses of every beat of a transfer; beats are aligned blocks of
/// the bus width.
fn beats(t: &DmaTransfer, beat_bytes: u64) -> Vec<Vec<u64>> {
    let mut out: Vec<Vec<u64>> = Vec::new();
    for &(addr, len) in &t.runs {
        let mut a = addr;
        while a < addr + len {
            let block_end = (a / beat_bytes + 1) * beat_bytes;
            let end = block_end.min(addr + len);
            out.push((a..end).step_by(8).collect());
            a = end;
        }
    }
    out
}

struct Dma {
    transfers: Vec<(DmaDirection, i64, Vec<Vec<u64>>)>,
    current: usize,
    beat: usize,
    pending: Vec<u64>,
    init_cycles: u64,
    busy: u64,
    bytes: u64,
    finish: u64,
}

impl Dma {
    fn new(transfers: &[DmaTransfer], cfg: &DmaConfig) -> Dma {
        let transfers: Vec<_> = if cfg.enabled {
            transfers
                .iter()
                .map(|t| (t.dir, t.source_delta, beats(t, cfg.beat_bytes)))
                .collect()
        } else {
            Vec::new()
        };
        let pending = transfers.first().and_then(|t| t.2.first().cloned()).unwrap_or_default();
        Dma {
            transfers,
            current: 0,
            beat: 0,
            pending,
            init_cycles: cfg.init_cycles,
            busy: 0,
            bytes: 0,
            finish: 0,
        }
    }

    fn done(&self) -> bool {
        self.current >= self.transfers.len()
    }

    /// Transfer `k` is issued in cycle `k` and delivers from `init_cycles` later.
    fn waiting(&self, now: u64) -> bool {
        now < self.init_cycles + self.current as u64
    }

    fn propose(&self, now: u64) -> &[u64] {
        if self.done() || self.waiting(now) {
            &[]
        } else {
            &self.pending
        }
    }

    fn commit(&mut self, now: u64, granted: &[bool], mem: &mut Tcdm) -> Result<(), SimError> {
        if self.done() {
            return Ok(());
        }
        self.busy += 1;
        if self.waiting(now) {
            return Ok(());
        }
        let (dir, delta, _) = &self.transfers[self.current];
        let mut keep = Vec::with_capacity(self.pending.len());
        for (&a, &g) in self.pending.iter().zip(granted) {
            if !g {
                keep.push(a);
                continue;
            }
            match dir {
                DmaDirection::In => {
                    let v = mem.read((a as i64 + delta) as u64)?;
                    mem.write(a, v)?;
                }
                DmaDirection::Out => {
                    mem.read(a)?;
                }
            }
            self.bytes += 8;
        }
        self.pending = keep;
        if self.pending.is_empty() {
            self.beat += 1;
            let beats = &self.transfers[self.current].2;
            if self.beat < beats.len() {
                self.pending = beats[self.beat].clone();
            } else {
                self.current += 1;
                self.beat = 0;
                self.finish = now + 1;
                if let Some(t) = self.transfers.get(self.current) {
                    self.pending = t.2.first().cloned().unwrap_or_default();
                }
            }
        }
        Ok(())
    }
}

/// Aggregate results of one simulated tile iteration.
#[derive(Clone, PartialEq, Debug)]
pub struct ClusterMetrics {
    pub kernel: String,
    pub variant: Variant,
    pub opt: OptConfig,
    /// Tile time: the later of the last core finishing and the DMA finishing.
    pub cycles: u64,
    pub core_cycles: u64,
    pub dma_cycles: u64,
    pub cores: Vec<CoreMetrics>,
    /// Geometric mean over cores of FP-compute cycles over tile cycles.
    pub fpu_util: f64,
    /// Geometric mean over cores of retired instructions over tile cycles.
    pub ipc: f64,
    pub dma_bytes: u64,
    pub dma_busy_cycles: u64,
    /// Bytes moved over the bus capacity of the cycles the DMA was busy.
    pub dma_util: f64,
    /// Core finish times normalized to the slowest core.
    pub finish_ratios: Vec<f64>,
    pub points: usize,
    pub flops: u64,
    /// The double-buffered working set exceeds the TCDM capacity.
    pub overcommitted: bool,
    pub traces: Vec<String>,
}

impl ClusterMetrics {
    pub fn imbalance_max(&self) -> f64 {
        measure_imbalance(self)
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
            .recip()
    }

    /// FP arithmetic per core-cycle, averaged arithmetically over cores.
    pub fn mean_fpu_util(&self) -> f64 {
        let n = self.cores.len().max(1) as f64;
        self.cores.iter().map(|c| c.fpu_util_over(self.cycles)).sum::<f64>() / n
    }
}

pub fn geomean(v: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for x in v {
        n += 1;
        s += x.ln();
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).exp()
    }
}

/// Per-core finish times normalized to the slowest core, in core order.
pub fn measure_imbalance(m: &ClusterMetrics) -> Vec<f64> {
    let max = m.cores.iter().map(|c| c.cycles).max().unwrap_or(0);
    if max == 0 {
        return vec![1.0; m.cores.len()];
    }
    m.cores.iter().map(|c| c.cycles as f64 / max as f64).collect()
}

/// Loads the tile and program data into a fresh TCDM image.
pub fn load_tcdm(spec: &StencilSpec, kernel: &CompiledKernel, tile: &Tile) -> Result<Tcdm, SimError> {
    let layout = &kernel.layout;
    let mut mem = Tcdm::new(layout.total_bytes.max(TCDM_BYTES), TCDM_BANKS);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    for (slot, buf) in tile.inputs().iter().enumerate() {
        mem.write_slice(layout.read_bases[slot], &bits(buf))?;
    }
    mem.write_slice(layout.out_base, &bits(tile.out()))?;
    for c in &kernel.cores {
        for seg in &c.data {
            mem.write_slice(seg.addr, &seg.words)?;
        }
    }
    debug_assert_eq!(spec.read_arrays().len(), tile.inputs().len());
    Ok(mem)
}

/// Runs the programs of every core in lockstep until all halt and the DMA
/// finishes, then checks the output against the reference.
pub fn simulate(
    spec: &StencilSpec,
    kernel: &CompiledKernel,
    cfg: &ClusterConfig,
) -> Result<ClusterMetrics, SimError> {
    let shape = kernel.layout.shape;
    let tile = Tile::random(spec, shape, cfg.seed);
    let mut mem = load_tcdm(spec, kernel, &tile)?;
    let mut cores: Vec<Core> = kernel
        .cores
        .iter()
        .map(|p| {
            let mut c = Core::new(p.core, p.clone(), cfg.timing);
            if cfg.trace {
                c.enable_trace();
            }
            c
        })
        .collect();
    let mut dma = Dma::new(&plan_transfers(spec, &kernel.layout), &cfg.dma);
    let mut arb = BankArbiter::new(TCDM_BANKS);
    let mut reqs: Vec<MemRequest> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut live: Vec<usize> = Vec::new();
    let mut now = 0u64;
    while !(cores.iter().all(Core::done) && dma.done()) {
        reqs.clear();
        owner.clear();
        for (i, c) in cores.iter_mut().enumerate() {
            let before = reqs.len();
            c.propose(now, &mut reqs);
            owner.extend(std::iter::repeat_n(i, reqs.len() - before));
        }
        // A DMA beat occupies its banks as a unit and takes precedence;
        // cores arbitrate round-robin over the remaining banks.
        let dma_words = dma.propose(now).to_vec();
        let mut dma_banks = [false; TCDM_BANKS];
        for &a in &dma_words {
            dma_banks[bank_of(a, TCDM_BANKS)] = true;
        }
        pairs.clear();
        live.clear();
        for (k, (r, &o)) in reqs.iter().zip(&owner).enumerate() {
            let bank = bank_of(r.addr, TCDM_BANKS);
            if !dma_banks[bank] {
                pairs.push((o * PORTS + r.port.index(), bank));
                live.push(k);
            }
        }
        let core_grants = arb.arbitrate(&pairs);
        let mut grants = vec![false; reqs.len()];
        for (&k, &g) in live.iter().zip(&core_grants) {
            grants[k] = g;
        }
        grants.extend(std::iter::repeat_n(true, dma_words.len()));
        let mut k = 0;
        for (i, c) in cores.iter_mut().enumerate() {
            let mut g: Vec<(Port, bool)> = Vec::new();
            while k < reqs.len() && owner[k] == i {
                g.push((reqs[k].port, grants[k]));
                k += 1;
            }
            c.commit(now, &g, &mut mem)?;
        }
        dma.commit(now, &grants[reqs.len()..], &mut mem)?;
        now += 1;
        if now > cfg.timing.max_cycles {
            return Err(SimError::Timeout(cfg.timing.max_cycles));
        }
    }
    verify(spec, kernel, &tile, &mem)?;
    let metrics: Vec<CoreMetrics> = cores.iter().map(|c| *c.metrics()).collect();
    let core_cycles = metrics.iter().map(|m| m.cycles).max().unwrap_or(0);
    let cycles = core_cycles.max(dma.finish);
    let points = shape.interior_points();
    let flops = metrics.iter().map(|m| m.flops).sum();
    let mut m = ClusterMetrics {
        kernel: spec.name.clone(),
        variant: kernel.variant,
        opt: kernel.opt,
        cycles,
        core_cycles,
        dma_cycles: dma.finish,
        fpu_util: geomean(metrics.iter().map(|c| c.fpu_util_over(cycles).max(f64::MIN_POSITIVE))),
        ipc: geomean(metrics.iter().map(|c| c.ipc_over(cycles).max(f64::MIN_POSITIVE))),
        cores: metrics,
        dma_bytes: dma.bytes,
        dma_busy_cycles: dma.busy,
        dma_util: if dma.busy == 0 {
            0.0
        } else {
            dma.bytes as f64 / (cfg.dma.beat_bytes as f64 * dma.busy as f64)
        },
        finish_ratios: Vec::new(),
        points,
        flops,
        overcommitted: kernel.layout.overcommitted(),
        traces: cores.iter().filter_map(|c| c.trace().map(str::to_string)).collect(),
    };
    m.finish_ratios = measure_imbalance(&m);
    Ok(m)
}

fn verify(spec: &StencilSpec, kernel: &CompiledKernel, tile: &Tile, mem: &Tcdm) -> Result<(), SimError> {
    let mut expected = tile.clone();
    run_reference(spec, &mut expected, kernel.opt.policy)?;
    let base = kernel.layout.out_base;
    for (cell, &want) in expected.out().iter().enumerate() {
        let got = mem.read_f64(base + 8 * cell as u64)?;
        if got.to_bits() != want.to_bits() {
            return Err(SimError::VerificationFailed { cell, got, expected: want });
        }
    }
    Ok(())
}

/// Compiles and simulates one kernel variant on a cluster tile.
pub fn run_cluster(
    spec: &StencilSpec,
    variant: Variant,
    shape: TileShape,
    opt: &OptConfig,
    cfg: &ClusterConfig,
) -> Result<ClusterMetrics, SimError> {
    let kernel = compile_variant(spec, shape, opt, variant)?;
    let m = simulate(spec, &kernel, cfg)?;
    debug_assert_eq!(m.flops as usize, m.points * flop_count(spec).unwrap_or(0));
    Ok(m)
}

/// Default tile for a kernel: 64² for 2D, 16³ for 3D.
pub fn default_tile(spec: &StencilSpec) -> TileShape {
    let n = if spec.dims == 2 { 64 } else { 16 };
    TileShape::for_spec(spec, n).expect("catalog kernels fit their default tile")
}

/// Policy and unroll actually used for a variant run.
pub fn describe(opt: &OptConfig) -> String {
    let policy = match opt.policy {
        ReassocPolicy::Source => "source",
        p => p.name(),
    };
    format!("u{} {policy}", opt.unroll)
}
