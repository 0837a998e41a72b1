//! Python bindings: kernels, code listings, reference runs, cluster
//! simulation and suite reports.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use saris_core::cluster::{self, ClusterConfig, ClusterMetrics, Variant};
use saris_core::codegen::OptConfig;
use saris_core::harness::{self, SuiteConfig, SuiteReport};
use saris_core::ir::{self, ReassocPolicy, StencilSpec, TileShape};
use saris_core::reference::{run_reference, Tile};
use saris_core::scaleout::MachineDescriptor;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A stencil kernel description.
#[pyclass(frozen, skip_from_py_object, name = "Kernel")]
#[derive(Clone)]
struct PyKernel {
    spec: StencilSpec,
}

#[pymethods]
impl PyKernel {
    /// Looks a kernel up in the catalog.
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        ir::catalog_kernel(name)
            .map(|spec| PyKernel { spec })
            .ok_or_else(|| value_err(format!("unknown kernel {name:?}")))
    }

    /// Parses a kernel description.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        ir::parse_spec(text).map(|spec| PyKernel { spec }).map_err(value_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.spec.name.clone()
    }

    #[getter]
    fn dims(&self) -> usize {
        self.spec.dims
    }

    #[getter]
    fn radius(&self) -> u32 {
        self.spec.radius
    }

    #[getter]
    fn loads(&self) -> usize {
        self.spec.taps.len()
    }

    #[getter]
    fn coeffs(&self) -> usize {
        self.spec.coeffs.len()
    }

    #[getter]
    fn flops(&self) -> PyResult<usize> {
        ir::flop_count(&self.spec).map_err(value_err)
    }

    fn serialize(&self) -> String {
        ir::serialize_spec(&self.spec)
    }

    fn __repr__(&self) -> String {
        format!("Kernel({:?})", self.spec.name)
    }
}

/// Metrics of one simulated tile.
#[pyclass(frozen, get_all, name = "Metrics")]
struct PyMetrics {
    kernel: String,
    variant: String,
    config: String,
    cycles: u64,
    fpu_util: f64,
    ipc: f64,
    dma_util: f64,
    imbalance_max: f64,
    flops: u64,
}

impl From<&ClusterMetrics> for PyMetrics {
    fn from(m: &ClusterMetrics) -> Self {
        PyMetrics {
            kernel: m.kernel.clone(),
            variant: m.variant.name().to_string(),
            config: cluster::describe(&m.opt),
            cycles: m.cycles,
            fpu_util: m.fpu_util,
            ipc: m.ipc,
            dma_util: m.dma_util,
            imbalance_max: m.imbalance_max(),
            flops: m.flops,
        }
    }
}

#[pymethods]
impl PyMetrics {
    fn __repr__(&self) -> String {
        format!(
            "Metrics({} {} {}: {} cycles, util {:.3}, ipc {:.3})",
            self.kernel, self.variant, self.config, self.cycles, self.fpu_util, self.ipc
        )
    }
}

/// Results of a suite run.
#[pyclass(frozen, name = "Report")]
struct PyReport {
    report: SuiteReport,
}

#[pymethods]
impl PyReport {
    fn runs(&self) -> Vec<PyMetrics> {
        self.report.runs.iter().map(|r| PyMetrics::from(&r.metrics)).collect()
    }

    /// (kernel, fpu_util_base, fpu_util_saris, speedup, cmtr) per kernel.
    fn scaleout(&self) -> Vec<(String, f64, f64, f64, f64)> {
        self.report
            .estimates
            .iter()
            .map(|e| (e.kernel.clone(), e.base.fpu_util, e.saris.fpu_util, e.speedup, e.saris.cmtr))
            .collect()
    }

    fn csv(&self) -> String {
        self.report.csv()
    }

    fn scaleout_csv(&self) -> String {
        self.report.scaleout_csv()
    }

    fn summary(&self) -> String {
        self.report.summary_markdown()
    }
}

fn parse_variant(s: &str) -> PyResult<Variant> {
    Variant::parse(s).ok_or_else(|| value_err(format!("unknown variant {s:?}")))
}

fn parse_policy(s: &str) -> PyResult<ReassocPolicy> {
    ReassocPolicy::parse(s).ok_or_else(|| value_err(format!("unknown association policy {s:?}")))
}

fn shape(spec: &StencilSpec, tile: Option<usize>) -> PyResult<TileShape> {
    match tile {
        Some(n) => TileShape::for_spec(spec, n).map_err(value_err),
        None => Ok(cluster::default_tile(spec)),
    }
}

/// Names of the catalog kernels, sorted by FLOPs per point.
#[pyfunction]
fn catalog() -> Vec<String> {
    ir::catalog().into_iter().map(|s| s.name).collect()
}

/// Assembly listing of core 0 for one kernel variant.
#[pyfunction]
#[pyo3(signature = (kernel, variant, unroll = 1, policy = "source", tile = None))]
fn listing(kernel: &PyKernel, variant: &str, unroll: usize, policy: &str, tile: Option<usize>) -> PyResult<String> {
    let opt = OptConfig {
        unroll,
        policy: parse_policy(policy)?,
        ..OptConfig::default()
    };
    let shape = shape(&kernel.spec, tile)?;
    harness::listing(&kernel.spec, shape, &opt, parse_variant(variant)?).map_err(runtime_err)
}

/// Output buffer of the reference engine on a seeded random tile.
#[pyfunction]
#[pyo3(signature = (kernel, tile = None, seed = 1, policy = "source"))]
fn reference(kernel: &PyKernel, tile: Option<usize>, seed: u64, policy: &str) -> PyResult<Vec<f64>> {
    let mut t = Tile::random(&kernel.spec, shape(&kernel.spec, tile)?, seed);
    run_reference(&kernel.spec, &mut t, parse_policy(policy)?).map_err(runtime_err)?;
    Ok(t.out().to_vec())
}

/// Compiles, simulates and verifies one kernel variant on an 8-core cluster.
#[pyfunction]
#[pyo3(signature = (kernel, variant, unroll = 1, policy = "source", tile = None, seed = 1))]
fn simulate(
    py: Python<'_>,
    kernel: &PyKernel,
    variant: &str,
    unroll: usize,
    policy: &str,
    tile: Option<usize>,
    seed: u64,
) -> PyResult<PyMetrics> {
    let opt = OptConfig {
        unroll,
        policy: parse_policy(policy)?,
        ..OptConfig::default()
    };
    let shape = shape(&kernel.spec, tile)?;
    let variant = parse_variant(variant)?;
    let cfg = ClusterConfig {
        seed,
        ..ClusterConfig::default()
    };
    let spec = kernel.spec.clone();
    let m = py
        .detach(move || cluster::run_cluster(&spec, variant, shape, &opt, &cfg))
        .map_err(runtime_err)?;
    Ok(PyMetrics::from(&m))
}

/// Runs the autotuned BASE-vs-SARIS suite and the scaleout estimate.
#[pyfunction]
#[pyo3(signature = (kernels = None, machine_toml = None, seed = 1))]
fn run_suite(
    py: Python<'_>,
    kernels: Option<Vec<String>>,
    machine_toml: Option<&str>,
    seed: u64,
) -> PyResult<PyReport> {
    let specs = match &kernels {
        Some(names) => harness::resolve_kernels(names, false).map_err(value_err)?,
        None => ir::catalog(),
    };
    let mut cfg = SuiteConfig::new(specs);
    if let Some(text) = machine_toml {
        cfg.machine = MachineDescriptor::from_toml(text).map_err(value_err)?;
    }
    cfg.cluster.seed = seed;
    let report = py.detach(move || harness::run_suite(&cfg)).map_err(runtime_err)?;
    Ok(PyReport { report })
}

/// Module initializer; also used to embed the module in a host interpreter.
#[pymodule]
pub fn saris(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(listing, m)?)?;
    m.add_function(wrap_pyfunction!(reference, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    Ok(())
}
