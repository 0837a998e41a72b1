//! Batch driver: runs the kernel × variant matrix with unroll autotuning,
//! feeds the results to the scaleout estimator and renders report files.
//!
//! Jobs run on a rayon pool. Every job owns its own tile and simulator, and
//! results are gathered in job order, so output never depends on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cluster::{compile_variant, describe, geomean, run_cluster, ClusterConfig, ClusterMetrics, Variant};
use crate::codegen::OptConfig;
use crate::error::{HarnessError, SimError};
use crate::ir::{catalog, catalog_kernel, ReassocPolicy, StencilSpec, TileShape};
use crate::scaleout::{
    estimate, mean_dma_util, memory_bound_speedup, PUBLISHED_PEAK_FRACTIONS, summarize, KernelEstimate, MachineDescriptor, SuiteSummary,
};

/// First line of every suite CSV; bump when columns change.
pub const CSV_SCHEMA: &str = "# saris suite csv v1";
pub const CSV_COLUMNS: &str = "kernel,variant,cycles,fpu_util,ipc,speedup,dma_bw_util,imbalance_max";
pub const SCALEOUT_SCHEMA: &str = "# saris scaleout csv v1";
pub const SCALEOUT_COLUMNS: &str = "kernel,fpu_util_base,fpu_util_saris,speedup,cmtr,memory_bound,gflops_saris";

/// Unroll factors tried when none is fixed.
pub const UNROLLS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub kernels: Vec<StencilSpec>,
    pub variants: Vec<Variant>,
    /// Tile edge; `None` picks 64 for 2D and 16 for 3D kernels.
    pub tile: Option<usize>,
    /// Fixed unroll factor; `None` autotunes over [`UNROLLS`].
    pub unroll: Option<usize>,
    /// Association orders the autotuner may pick from.
    pub policies: Vec<ReassocPolicy>,
    pub cores: usize,
    pub machine: MachineDescriptor,
    pub cluster: ClusterConfig,
}

impl SuiteConfig {
    pub fn new(kernels: Vec<StencilSpec>) -> Self {
        SuiteConfig {
            kernels,
            variants: Variant::ALL.to_vec(),
            tile: None,
            unroll: None,
            policies: vec![ReassocPolicy::Source, ReassocPolicy::Balanced],
            cores: 8,
            machine: MachineDescriptor::default(),
            cluster: ClusterConfig::default(),
        }
    }

    /// The shipped catalog with default settings.
    pub fn catalog() -> Self {
        Self::new(catalog())
    }

    /// Code generation settings the autotuner tries, in preference order.
    pub fn candidates(&self) -> Vec<OptConfig> {
        let unrolls = match self.unroll {
            Some(u) => vec![u],
            None => UNROLLS.to_vec(),
        };
        let mut v = Vec::new();
        for &unroll in &unrolls {
            for &policy in &self.policies {
                v.push(OptConfig {
                    unroll,
                    policy,
                    interleave: interleave_for(self.cores),
                    frep_capacity: self.cluster.timing.frep_capacity,
                    sched_latency: self.cluster.timing.fpu_latency,
                    ..OptConfig::default()
                });
            }
        }
        v
    }

    pub fn tile_for(&self, spec: &StencilSpec) -> Result<TileShape, HarnessError> {
        let edge = self.tile.unwrap_or(if spec.dims == 2 { 64 } else { 16 });
        TileShape::for_spec(spec, edge).map_err(|source| HarnessError::InvalidTile {
            kernel: spec.name.clone(),
            edge,
            source,
        })
    }
}

/// Looks kernels up by catalog name; `all` selects the whole catalog.
pub fn resolve_kernels(names: &[String], all: bool) -> Result<Vec<StencilSpec>, HarnessError> {
    if all {
        return Ok(catalog());
    }
    names
        .iter()
        .map(|n| catalog_kernel(n).ok_or_else(|| HarnessError::UnknownKernel(n.clone())))
        .collect()
}

/// Splits a core count into x and y interleaving factors, x taking up to four.
pub fn interleave_for(cores: usize) -> [usize; 2] {
    let x = (1..=cores.clamp(1, 4)).rev().find(|d| cores % d == 0).unwrap_or(1);
    [x, cores.max(1) / x]
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub kernel: String,
    pub variant: Variant,
    pub shape: TileShape,
    pub metrics: ClusterMetrics,
    /// BASE cycles over this run's cycles; `None` without a BASE run.
    pub speedup: Option<f64>,
}

/// Results of a suite run, in kernel order then variant order.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub runs: Vec<RunRecord>,
    pub estimates: Vec<KernelEstimate>,
    /// DMA bandwidth utilization fed to the estimator.
    pub dma_util: f64,
    pub machine: MachineDescriptor,
}

/// Single-cluster suite geomeans.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct ClusterSummary {
    pub fpu_util_base: f64,
    pub fpu_util_saris: f64,
    pub ipc_base: f64,
    pub ipc_saris: f64,
    pub speedup: f64,
}

/// Runs every candidate configuration and keeps the fastest. Candidates the
/// code generator rejects are skipped; any other failure is returned.
pub fn tune(
    spec: &StencilSpec,
    variant: Variant,
    shape: TileShape,
    candidates: &[OptConfig],
    cluster: &ClusterConfig,
) -> Result<ClusterMetrics, HarnessError> {
    let results: Vec<_> = candidates
        .par_iter()
        .map(|opt| run_cluster(spec, variant, shape, opt, cluster))
        .collect();
    pick_fastest(spec, variant, results)
}

fn pick_fastest(
    spec: &StencilSpec,
    variant: Variant,
    results: Vec<Result<ClusterMetrics, SimError>>,
) -> Result<ClusterMetrics, HarnessError> {
    let mut best: Option<ClusterMetrics> = None;
    let mut rejected = None;
    for r in results {
        match r {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.cycles < b.cycles) {
                    best = Some(m);
                }
            }
            Err(e @ SimError::Compile(_)) => {
                rejected.get_or_insert(e);
            }
            Err(source) => {
                return Err(HarnessError::Run {
                    kernel: spec.name.clone(),
                    variant: variant.name(),
                    source,
                })
            }
        }
    }
    best.ok_or_else(|| HarnessError::Run {
        kernel: spec.name.clone(),
        variant: variant.name(),
        source: rejected.expect("at least one candidate"),
    })
}

/// Compiles, verifies and simulates every kernel × variant, then estimates
/// the scaleout when both variants ran.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport, HarnessError> {
    let candidates = cfg.candidates();
    let shapes = cfg
        .kernels
        .iter()
        .map(|k| cfg.tile_for(k))
        .collect::<Result<Vec<_>, _>>()?;
    let mut jobs: Vec<(usize, Variant, &OptConfig)> = Vec::new();
    for k in 0..cfg.kernels.len() {
        for &v in &cfg.variants {
            jobs.extend(candidates.iter().map(|o| (k, v, o)));
        }
    }
    let mut results: Vec<Result<ClusterMetrics, SimError>> = jobs
        .par_iter()
        .map(|&(k, v, opt)| run_cluster(&cfg.kernels[k], v, shapes[k], opt, &cfg.cluster))
        .collect();

    let mut runs = Vec::new();
    for (k, spec) in cfg.kernels.iter().enumerate() {
        for &variant in &cfg.variants {
            let rest = results.split_off(candidates.len());
            let chunk = std::mem::replace(&mut results, rest);
            runs.push(RunRecord {
                kernel: spec.name.clone(),
                variant,
                shape: shapes[k],
                metrics: pick_fastest(spec, variant, chunk)?,
                speedup: None,
            });
        }
    }
    for i in 0..runs.len() {
        let base = runs
            .iter()
            .find(|r| r.kernel == runs[i].kernel && r.variant == Variant::Base)
            .map(|r| r.metrics.cycles);
        runs[i].speedup = base.map(|b| b as f64 / runs[i].metrics.cycles as f64);
    }

    let dma_util = mean_dma_util(runs.iter().filter(|r| r.variant == Variant::Saris).map(|r| &r.metrics));
    let mut estimates = Vec::new();
    if cfg.variants.contains(&Variant::Base) && cfg.variants.contains(&Variant::Saris) {
        for (k, spec) in cfg.kernels.iter().enumerate() {
            let find = |v| {
                runs.iter()
                    .find(|r| r.kernel == spec.name && r.variant == v)
                    .map(|r| &r.metrics)
            };
            estimates.push(estimate(
                spec,
                &shapes[k],
                find(Variant::Base),
                find(Variant::Saris),
                &cfg.machine,
                dma_util,
            )?);
        }
    }
    Ok(SuiteReport {
        runs,
        estimates,
        dma_util: cfg.machine.dma_util.unwrap_or(dma_util),
        machine: cfg.machine,
    })
}

impl SuiteReport {
    pub fn run(&self, kernel: &str, variant: Variant) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.kernel == kernel && r.variant == variant)
    }

    fn kernels(&self) -> Vec<&str> {
        let mut v: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !v.contains(&r.kernel.as_str()) {
                v.push(&r.kernel);
            }
        }
        v
    }

    fn pairs(&self) -> Vec<(&RunRecord, &RunRecord)> {
        self.kernels()
            .into_iter()
            .filter_map(|k| Some((self.run(k, Variant::Base)?, self.run(k, Variant::Saris)?)))
            .collect()
    }

    /// Suite geomeans over kernels with both variants.
    pub fn cluster_summary(&self) -> Option<ClusterSummary> {
        let pairs = self.pairs();
        if pairs.is_empty() {
            return None;
        }
        let g = |f: &dyn Fn(&(&RunRecord, &RunRecord)) -> f64| geomean(pairs.iter().map(f));
        Some(ClusterSummary {
            fpu_util_base: g(&|p| p.0.metrics.fpu_util),
            fpu_util_saris: g(&|p| p.1.metrics.fpu_util),
            ipc_base: g(&|p| p.0.metrics.ipc),
            ipc_saris: g(&|p| p.1.metrics.ipc),
            speedup: g(&|p| p.0.metrics.cycles as f64 / p.1.metrics.cycles as f64),
        })
    }

    pub fn scaleout_summary(&self) -> Option<SuiteSummary> {
        (!self.estimates.is_empty()).then(|| summarize(&self.estimates))
    }

    /// One row per run.
    pub fn csv(&self) -> String {
        let mut s = format!("{CSV_SCHEMA}\n{CSV_COLUMNS}\n");
        for r in &self.runs {
            let m = &r.metrics;
            let speedup = r.speedup.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{},{:.6},{:.6}",
                r.kernel,
                r.variant,
                m.cycles,
                m.fpu_util,
                m.ipc,
                speedup,
                m.dma_util,
                m.imbalance_max()
            );
        }
        s
    }

    /// One row per kernel with both variants.
    pub fn scaleout_csv(&self) -> String {
        let mut s = format!("{SCALEOUT_SCHEMA}\n{SCALEOUT_COLUMNS}\n");
        for e in &self.estimates {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{},{:.3}",
                e.kernel,
                e.base.fpu_util,
                e.saris.fpu_util,
                e.speedup,
                e.saris.cmtr,
                e.saris.memory_bound(),
                e.saris.gflops
            );
        }
        s
    }

    /// Single-cluster panels: utilization, IPC and speedup per kernel.
    pub fn cluster_tsv(&self) -> String {
        let mut s = String::from("kernel\tfpu_util_base\tfpu_util_saris\tipc_base\tipc_saris\tspeedup\n");
        for (b, x) in self.pairs() {
            let _ = writeln!(
                s,
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                b.kernel,
                b.metrics.fpu_util,
                x.metrics.fpu_util,
                b.metrics.ipc,
                x.metrics.ipc,
                b.metrics.cycles as f64 / x.metrics.cycles as f64
            );
        }
        if let Some(g) = self.cluster_summary() {
            let _ = writeln!(
                s,
                "geomean\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                g.fpu_util_base, g.fpu_util_saris, g.ipc_base, g.ipc_saris, g.speedup
            );
        }
        s
    }

    /// Scaleout panels: utilization, speedup and compute-to-memory ratio.
    pub fn scaleout_tsv(&self) -> String {
        let mut s = String::from("kernel\tfpu_util_base\tfpu_util_saris\tspeedup\tcmtr\tmemory_bound\n");
        for e in &self.estimates {
            let _ = writeln!(
                s,
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
                e.kernel,
                e.base.fpu_util,
                e.saris.fpu_util,
                e.speedup,
                e.saris.cmtr,
                u8::from(e.saris.memory_bound())
            );
        }
        if let Some(g) = self.scaleout_summary() {
            let _ = writeln!(
                s,
                "geomean\t{:.4}\t{:.4}\t{:.4}\t\t{}",
                g.base_util, g.saris_util, g.speedup, g.memory_bound
            );
        }
        s
    }

    pub fn summary_markdown(&self) -> String {
        let mut s = String::from("# Suite summary\n\n## Single cluster\n\n");
        s += "| kernel | variant | config | cycles | FPU util | IPC | speedup | DMA util | imbalance |\n";
        s += "|---|---|---|---:|---:|---:|---:|---:|---:|\n";
        for r in &self.runs {
            let m = &r.metrics;
            let speedup = r.speedup.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.3} | {:.3} | {} | {:.3} | {:.3} |",
                r.kernel,
                r.variant,
                describe(&m.opt),
                m.cycles,
                m.fpu_util,
                m.ipc,
                speedup,
                m.dma_util,
                m.imbalance_max()
            );
        }
        if let Some(g) = self.cluster_summary() {
            let _ = writeln!(
                s,
                "\nGeomean FPU utilization {:.3} (base) vs {:.3} (saris); IPC {:.3} vs {:.3}; speedup {:.2}x.",
                g.fpu_util_base, g.fpu_util_saris, g.ipc_base, g.ipc_saris, g.speedup
            );
        }
        if let Some(g) = self.scaleout_summary() {
            let m = &self.machine;
            let _ = writeln!(
                s,
                "\n## Scaleout\n\n{} cores in {} groups of {} clusters, {:.1} B/cycle per cluster, DMA utilization {:.3}.\n",
                m.cores(),
                m.groups,
                m.clusters_per_group,
                m.cluster_bandwidth(),
                self.dma_util
            );
            s += "| kernel | FPU util base | FPU util saris | speedup | CMTR | bound | GFLOP/s |\n";
            s += "|---|---:|---:|---:|---:|---|---:|\n";
            for e in &self.estimates {
                let bound = if e.saris.memory_bound() { "memory" } else { "compute" };
                let _ = writeln!(
                    s,
                    "| {} | {:.3} | {:.3} | {:.2} | {:.2} | {} | {:.1} |",
                    e.kernel, e.base.fpu_util, e.saris.fpu_util, e.speedup, e.saris.cmtr, bound, e.saris.gflops
                );
            }
            let _ = writeln!(
                s,
                "\n{} of {} kernels memory-bound. Geomean FPU utilization {:.3} (base) vs {:.3} (saris); speedup {:.2}x; peak {:.0} of {:.0} GFLOP/s.",
                g.memory_bound,
                self.estimates.len(),
                g.base_util,
                g.saris_util,
                g.speedup,
                g.peak_gflops,
                m.peak_gflops()
            );
            match memory_bound_speedup(&self.estimates) {
                Some((names, x)) => {
                    let _ = writeln!(s, "Memory-bound geomean speedup {x:.2}x over {}.", names.join(", "));
                }
                None => s += "No kernel is memory-bound.\n",
            }
            let _ = write!(
                s,
                "\nPeak fraction {:.0}% of {:.0} GFLOP/s. Published peak fractions for comparison:",
                100.0 * g.peak_gflops / m.peak_gflops(),
                m.peak_gflops()
            );
            for (name, platform, f) in PUBLISHED_PEAK_FRACTIONS {
                let _ = write!(s, " {name} {:.0}% ({platform});", 100.0 * f);
            }
            s.pop();
            s += ".\n";
        }
        s
    }

    /// Writes the CSVs, panel TSVs and summary into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let mut files = vec![
            ("suite.csv", self.csv()),
            ("cluster.tsv", self.cluster_tsv()),
            ("summary.md", self.summary_markdown()),
        ];
        if !self.estimates.is_empty() {
            files.push(("scaleout.csv", self.scaleout_csv()));
            files.push(("scaleout.tsv", self.scaleout_tsv()));
        }
        files
            .into_iter()
            .map(|(name, text)| {
                let path = dir.join(name);
                write_file(&path, &text)?;
                Ok(path)
            })
            .collect()
    }

    /// Writes per-core cycle traces of every run that recorded them.
    pub fn write_traces(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let mut out = Vec::new();
        for r in &self.runs {
            for (core, t) in r.metrics.traces.iter().enumerate() {
                let path = dir.join(format!("{}.{}.core{core}.trace", r.kernel, r.variant));
                write_file(&path, t)?;
                out.push(path);
            }
        }
        Ok(out)
    }
}

/// Writes a text file, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, text).map_err(io)
}

/// File name of a kernel variant's listing.
pub fn listing_name(kernel: &str, variant: Variant) -> String {
    format!("{kernel}.{variant}.s")
}

/// Assembly listing of core 0 of a compiled kernel variant.
pub fn listing(spec: &StencilSpec, shape: TileShape, opt: &OptConfig, variant: Variant) -> Result<String, HarnessError> {
    let k = compile_variant(spec, shape, opt, variant).map_err(|e| HarnessError::Run {
        kernel: spec.name.clone(),
        variant: variant.name(),
        source: e.into(),
    })?;
    Ok(k.cores[0].listing())
}

/// Writes one listing per kernel and variant into `dir`.
pub fn emit_listings(
    items: &[(StencilSpec, TileShape, OptConfig)],
    variants: &[Variant],
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out = Vec::new();
    for (spec, shape, opt) in items {
        for &v in variants {
            let path = dir.join(listing_name(&spec.name, v));
            write_file(&path, &listing(spec, *shape, opt, v)?)?;
            out.push(path);
        }
    }
    Ok(out)
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum ListingStatus {
    Match,
    /// Only the golden exists.
    Missing,
    /// Only the emitted listing exists.
    Unexpected,
    /// First differing line (1-based) with the golden and emitted text.
    Differs { line: usize, golden: String, emitted: String },
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ListingDiff {
    pub name: String,
    pub status: ListingStatus,
}

impl ListingDiff {
    pub fn passed(&self) -> bool {
        self.status == ListingStatus::Match
    }
}

/// Compares two listing texts line by line.
pub fn diff_text(golden: &str, emitted: &str) -> ListingStatus {
    if golden == emitted {
        return ListingStatus::Match;
    }
    let (g, e): (Vec<&str>, Vec<&str>) = (golden.lines().collect(), emitted.lines().collect());
    let n = g.len().max(e.len());
    let line = (0..n).find(|&i| g.get(i) != e.get(i)).unwrap_or(n);
    ListingStatus::Differs {
        line: line + 1,
        golden: g.get(line).unwrap_or(&"<end of file>").to_string(),
        emitted: e.get(line).unwrap_or(&"<end of file>").to_string(),
    }
}

fn listing_files(dir: &Path) -> Result<Vec<String>, HarnessError> {
    let rd = fs::read_dir(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut v: Vec<String> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".s"))
        .collect();
    v.sort();
    Ok(v)
}

/// Byte-level comparison of every listing in two directories, sorted by name.
pub fn diff_listings(golden: &Path, emitted: &Path) -> Result<Vec<ListingDiff>, HarnessError> {
    let g = listing_files(golden)?;
    let e = listing_files(emitted)?;
    let mut names: Vec<String> = g.iter().chain(&e).cloned().collect();
    names.sort();
    names.dedup();
    let read = |p: PathBuf| fs::read_to_string(&p).ok();
    Ok(names
        .into_iter()
        .map(|name| {
            let status = match (read(golden.join(&name)), read(emitted.join(&name))) {
                (Some(a), Some(b)) => diff_text(&a, &b),
                (Some(_), None) => ListingStatus::Missing,
                _ => ListingStatus::Unexpected,
            };
            ListingDiff { name, status }
        })
        .collect())
}

/// Kernels frozen by the golden listings: the catalog plus the 7-point star,
/// each on its default tile with default code generation settings.
pub fn golden_items() -> Vec<(StencilSpec, TileShape, OptConfig)> {
    let mut specs = catalog();
    specs.push(crate::ir::parse_spec(STAR7).expect("shipped kernel parses"));
    specs
        .into_iter()
        .map(|s| {
            let shape = crate::cluster::default_tile(&s);
            (s, shape, OptConfig::default())
        })
        .collect()
}

/// Symmetric 7-point star, the smallest 3D kernel used in examples and goldens.
pub const STAR7: &str = include_str!("../kernels/extra/star7.stencil");

/// Regenerates listings into `emitted` and compares them with `golden`; with
/// `bless` the goldens are overwritten first.
pub fn check_goldens(golden: &Path, emitted: &Path, bless: bool) -> Result<Vec<ListingDiff>, HarnessError> {
    let items = golden_items();
    emit_listings(&items, &Variant::ALL, emitted)?;
    if bless {
        emit_listings(&items, &Variant::ALL, golden)?;
    }
    diff_listings(golden, emitted)
}
