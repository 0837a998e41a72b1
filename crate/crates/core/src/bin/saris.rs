//! Command-line driver for the stencil workbench.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use saris_core::cluster::Variant;
use saris_core::error::HarnessError;
use saris_core::harness::{self, ListingStatus, SuiteConfig};
use saris_core::ir::{catalog, flop_count, parse_spec, serialize_spec, StencilSpec};
use saris_core::scaleout::MachineDescriptor;
use saris_core::vm::TimingConfig;

#[derive(Parser)]
#[command(name = "saris", version, about = "Compile, simulate and compare stream and scalar stencil codes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run kernels on the cluster model and estimate the manycore scaleout.
    Run(RunArgs),
    /// Regenerate listings and compare them with the golden files.
    Golden {
        #[arg(long, default_value = "crates/core/tests/golden")]
        dir: PathBuf,
        /// Scratch directory for the regenerated listings.
        #[arg(long, default_value = "saris-out/asm")]
        out: PathBuf,
        /// Overwrite the golden files with the regenerated listings.
        #[arg(long)]
        bless: bool,
    },
    /// Compare two directories of listings.
    Diff { golden: PathBuf, emitted: PathBuf },
    /// List the kernel catalog.
    Kernels {
        /// Print the full description of one kernel.
        #[arg(long)]
        show: Option<String>,
    },
    /// Print the default machine descriptor.
    Machine,
}

#[derive(Args)]
struct RunArgs {
    /// Kernel names; repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    kernel: Vec<String>,
    /// Kernel description files to run alongside catalog kernels.
    #[arg(long)]
    kernel_file: Vec<PathBuf>,
    /// Run the whole catalog.
    #[arg(long)]
    all: bool,
    #[arg(long, value_delimiter = ',', default_value = "base,saris")]
    variants: Vec<String>,
    /// Tile edge (defaults to 64 for 2D and 16 for 3D kernels).
    #[arg(long)]
    tile: Option<usize>,
    /// Fix the unroll factor instead of autotuning over 1, 2 and 4.
    #[arg(long)]
    unroll: Option<usize>,
    #[arg(long, default_value_t = 8)]
    cores: usize,
    /// Machine descriptor (TOML) for the scaleout estimate.
    #[arg(long)]
    machine: Option<PathBuf>,
    /// Write the listing of every chosen configuration.
    #[arg(long)]
    emit_asm: bool,
    /// Record and write per-core cycle traces.
    #[arg(long)]
    trace: bool,
    /// Seed of the random input tiles.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Path of the suite CSV (default: <out>/suite.csv).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory for reports, listings and traces.
    #[arg(long, default_value = "saris-out")]
    out: PathBuf,
    /// Cross-check the expected-max imbalance factor by Monte Carlo with this many trials.
    #[arg(long)]
    monte_carlo: Option<usize>,
    #[command(flatten)]
    timing: TimingArgs,
}

/// Microarchitectural timing parameters.
#[derive(Args)]
struct TimingArgs {
    #[arg(long, default_value_t = 3)]
    fpu_latency: u32,
    #[arg(long, default_value_t = 1)]
    tcdm_latency: u32,
    #[arg(long, default_value_t = 4)]
    fifo_depth: usize,
    #[arg(long, default_value_t = 16)]
    frep_capacity: usize,
    #[arg(long, default_value_t = 1)]
    branch_penalty: u32,
    /// Cycles per cold instruction cache line (0 keeps the cache warm).
    #[arg(long, default_value_t = 0)]
    icache_penalty: u32,
    /// Latency before the first DMA beat of a tile.
    #[arg(long, default_value_t = 100)]
    dma_init: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Golden { dir, out, bless } => harness::check_goldens(&dir, &out, bless).map(report_diffs),
        Command::Diff { golden, emitted } => harness::diff_listings(&golden, &emitted).map(report_diffs),
        Command::Kernels { show } => kernels(show),
        Command::Machine => {
            print!("{}", MachineDescriptor::default().to_toml());
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn run(args: RunArgs) -> Result<bool, HarnessError> {
    let mut kernels = harness::resolve_kernels(&args.kernel, args.all)?;
    for path in &args.kernel_file {
        let spec = parse_spec(&read(path)?).map_err(|e| HarnessError::UnknownKernel(format!("{}: {e}", path.display())))?;
        kernels.push(spec);
    }
    if kernels.is_empty() {
        eprintln!("no kernels selected; pass --kernel, --kernel-file or --all");
        return Ok(false);
    }
    let variants = args
        .variants
        .iter()
        .map(|v| Variant::parse(v).ok_or_else(|| HarnessError::UnknownKernel(format!("variant {v}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let machine = match &args.machine {
        Some(p) => MachineDescriptor::from_toml(&read(p)?)?,
        None => MachineDescriptor::default(),
    };
    let mut cfg = SuiteConfig {
        variants,
        tile: args.tile,
        unroll: args.unroll,
        cores: args.cores,
        machine,
        ..SuiteConfig::new(kernels)
    };
    cfg.cluster.seed = args.seed;
    cfg.cluster.trace = args.trace;
    let t = &args.timing;
    cfg.cluster.timing = TimingConfig {
        fpu_latency: t.fpu_latency,
        tcdm_latency: t.tcdm_latency,
        fifo_depth: t.fifo_depth,
        frep_capacity: t.frep_capacity,
        branch_penalty: t.branch_penalty,
        icache_miss_penalty: t.icache_penalty,
        ..TimingConfig::default()
    };
    cfg.cluster.dma.init_cycles = t.dma_init;

    let report = harness::run_suite(&cfg)?;
    let files = report.write_artifacts(&args.out)?;
    if let Some(csv) = &args.csv {
        harness::write_file(csv, &report.csv())?;
    }
    if args.emit_asm {
        let items: Vec<_> = report
            .runs
            .iter()
            .map(|r| {
                let spec = cfg.kernels.iter().find(|k| k.name == r.kernel).expect("run of a selected kernel");
                (spec.clone(), r.shape, r.metrics.opt, r.variant)
            })
            .collect();
        for (spec, shape, opt, v) in items {
            let path = args.out.join("asm").join(harness::listing_name(&spec.name, v));
            harness::write_file(&path, &harness::listing(&spec, shape, &opt, v)?)?;
        }
    }
    if args.trace {
        report.write_traces(&args.out.join("trace"))?;
    }
    if let Some(trials) = args.monte_carlo {
        monte_carlo(&report, trials, args.seed);
    }
    print!("{}", report.summary_markdown());
    eprintln!("wrote {} report files to {}", files.len(), args.out.display());
    Ok(true)
}

fn monte_carlo(report: &harness::SuiteReport, trials: usize, seed: u64) {
    use saris_core::cluster::measure_imbalance;
    use saris_core::scaleout::{expected_max, monte_carlo_max};
    let k = report.machine.clusters_per_group;
    println!("| kernel | variant | expected max | Monte Carlo max |\n|---|---|---:|---:|");
    for r in &report.runs {
        let ratios = measure_imbalance(&r.metrics);
        println!(
            "| {} | {} | {:.4} | {:.4} |",
            r.kernel,
            r.variant,
            expected_max(&ratios, k),
            monte_carlo_max(&ratios, k, trials, seed)
        );
    }
    println!();
}

fn report_diffs(diffs: Vec<harness::ListingDiff>) -> bool {
    for d in &diffs {
        match &d.status {
            ListingStatus::Match => println!("ok       {}", d.name),
            ListingStatus::Missing => println!("missing  {}", d.name),
            ListingStatus::Unexpected => println!("new      {}", d.name),
            ListingStatus::Differs { line, golden, emitted } => {
                println!("differs  {} at line {line}\n  - {golden}\n  + {emitted}", d.name)
            }
        }
    }
    diffs.iter().all(|d| d.passed())
}

fn kernels(show: Option<String>) -> Result<bool, HarnessError> {
    let specs: Vec<StencilSpec> = catalog();
    if let Some(name) = show {
        let spec = specs
            .iter()
            .find(|s| s.name == name)
            .ok_or(HarnessError::UnknownKernel(name))?;
        print!("{}", serialize_spec(spec));
        return Ok(true);
    }
    println!("{:<12} {:>4} {:>6} {:>5} {:>6} {:>5}", "kernel", "dims", "radius", "loads", "coeffs", "flops");
    for s in &specs {
        println!(
            "{:<12} {:>4} {:>6} {:>5} {:>6} {:>5}",
            s.name,
            s.dims,
            s.radius,
            s.taps.len(),
            s.coeffs.len(),
            flop_count(s).unwrap_or(0)
        );
    }
    Ok(true)
}
