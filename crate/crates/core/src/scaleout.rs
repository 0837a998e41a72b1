//! Analytic manycore estimator.
//!
//! A machine is built from groups of clusters that share one HBM device.
//! Each tile's compute time comes from a single-cluster simulation; its
//! memory time from the tile's DMA traffic over the cluster's bandwidth
//! share. Compute and transfers overlap perfectly (double buffering), so
//! a tile takes the longer of the two, stretched by the expected slowest
//! cluster of a group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{geomean, measure_imbalance, ClusterMetrics, Variant};
use crate::error::ScaleoutError;
use crate::ir::{flop_count, StencilSpec, TileShape, ELEM_BYTES};

/// Machine parameters. Parsed from TOML; every field has a default.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineDescriptor {
    pub groups: usize,
    pub clusters_per_group: usize,
    pub cores_per_cluster: usize,
    /// HBM pins per device; one device per group.
    pub pins_per_device: usize,
    pub gbit_per_pin: f64,
    pub clock_ghz: f64,
    /// FLOPs per core per cycle at peak (one fused multiply-add).
    pub peak_flops_per_cycle: f64,
    /// Full-grid edge length for 2D kernels.
    pub grid_2d: usize,
    /// Full-grid edge length for 3D kernels.
    pub grid_3d: usize,
    /// Replaces the measured DMA bandwidth utilization when set.
    pub dma_util: Option<f64>,
}

impl Default for MachineDescriptor {
    fn default() -> Self {
        MachineDescriptor {
            groups: 8,
            clusters_per_group: 4,
            cores_per_cluster: 8,
            pins_per_device: 128,
            gbit_per_pin: 3.2,
            clock_ghz: 1.0,
            peak_flops_per_cycle: 2.0,
            grid_2d: 16384,
            grid_3d: 512,
            dma_util: None,
        }
    }
}

impl MachineDescriptor {
    pub fn from_toml(text: &str) -> Result<Self, ScaleoutError> {
        let m: MachineDescriptor = toml::from_str(text).map_err(|e| ScaleoutError::Machine(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("machine descriptor serializes")
    }

    pub fn validate(&self) -> Result<(), ScaleoutError> {
        let bad = |what: &str| Err(ScaleoutError::Machine(format!("{what} must be positive")));
        if self.groups == 0 || self.clusters_per_group == 0 || self.cores_per_cluster == 0 {
            return bad("group, cluster and core counts");
        }
        if !(self.gbit_per_pin > 0.0) || self.pins_per_device == 0 {
            return bad("device bandwidth");
        }
        if !(self.clock_ghz > 0.0) || !(self.peak_flops_per_cycle > 0.0) {
            return bad("clock and peak rate");
        }
        if let Some(u) = self.dma_util {
            if !(u > 0.0 && u <= 1.0) {
                return Err(ScaleoutError::Machine("dma_util must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn clusters(&self) -> usize {
        self.groups * self.clusters_per_group
    }

    pub fn cores(&self) -> usize {
        self.clusters() * self.cores_per_cluster
    }

    /// Bytes per cycle of one HBM device.
    pub fn device_bandwidth(&self) -> f64 {
        self.pins_per_device as f64 * self.gbit_per_pin / 8.0 / self.clock_ghz
    }

    /// Bytes per cycle available to one cluster when its group shares the device equally.
    pub fn cluster_bandwidth(&self) -> f64 {
        self.device_bandwidth() / self.clusters_per_group as f64
    }

    pub fn peak_gflops(&self) -> f64 {
        self.cores() as f64 * self.peak_flops_per_cycle * self.clock_ghz
    }

    pub fn grid_edge(&self, dims: usize) -> usize {
        if dims == 2 {
            self.grid_2d
        } else {
            self.grid_3d
        }
    }
}

/// Bytes a tile moves between main memory and TCDM: every read array over
/// the interior widened by its tap reach, plus the output interior.
pub fn tile_bytes(spec: &StencilSpec, shape: &TileShape) -> u64 {
    let interior = shape.interior();
    let mut cells = interior.iter().product::<usize>();
    for array in spec.read_arrays() {
        let r = spec.reach(array);
        cells += (0..3).map(|a| interior[a] + 2 * r[a].min(shape.halo[a])).product::<usize>();
    }
    (cells * ELEM_BYTES) as u64
}

/// Tiles needed to cover a full grid of edge `n`.
pub fn tile_count(shape: &TileShape, n: usize) -> u64 {
    let interior = shape.interior();
    (0..shape.dims())
        .map(|a| {
            let span = n.saturating_sub(2 * shape.halo[a]).max(1);
            span.div_ceil(interior[a]) as u64
        })
        .product()
}

/// Expected maximum of `k` independent draws from the empirical
/// distribution `samples`.
pub fn expected_max(samples: &[f64], k: usize) -> f64 {
    if samples.is_empty() || k == 0 {
        return 0.0;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let hi = ((i + 1) as f64 / n).powi(k as i32);
            let lo = (i as f64 / n).powi(k as i32);
            x * (hi - lo)
        })
        .sum()
}

/// Monte Carlo estimate of [`expected_max`].
pub fn monte_carlo_max(samples: &[f64], k: usize, trials: usize, seed: u64) -> f64 {
    if samples.is_empty() || k == 0 || trials == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..trials)
        .map(|_| {
            (0..k)
                .map(|_| samples[rng.gen_range(0..samples.len())])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / trials as f64
}

/// Slowdown of a group that waits for the slowest of its clusters, when
/// cluster runtimes vary like the core runtimes of one cluster.
pub fn imbalance_factor(ratios: &[f64], clusters_per_group: usize) -> f64 {
    if ratios.is_empty() {
        return 1.0;
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    (expected_max(ratios, clusters_per_group) / mean).max(1.0)
}

/// Estimate for one kernel variant.
#[derive(Clone, Copy, PartialEq, Debug, Serialize)]
pub struct VariantEstimate {
    /// Tile compute time in cycles.
    pub tc: f64,
    /// Tile memory time in cycles.
    pub tm: f64,
    /// Compute-to-memory time ratio.
    pub cmtr: f64,
    pub imbalance: f64,
    /// Effective tile time in cycles.
    pub tile_time: f64,
    pub fpu_util: f64,
    pub gflops: f64,
    /// Full-grid runtime in milliseconds.
    pub runtime_ms: f64,
}

impl VariantEstimate {
    pub fn memory_bound(&self) -> bool {
        self.cmtr < 1.0
    }
}

#[derive(Clone, PartialEq, Debug, Serialize)]
pub struct KernelEstimate {
    pub kernel: String,
    pub tile_bytes: u64,
    pub tiles: u64,
    pub base: VariantEstimate,
    pub saris: VariantEstimate,
    /// Full-grid runtime of BASE over that of SARIS.
    pub speedup: f64,
}

/// Mean DMA bandwidth utilization over a set of single-cluster runs.
pub fn mean_dma_util<'a>(runs: impl IntoIterator<Item = &'a ClusterMetrics>) -> f64 {
    let v: Vec<f64> = runs.into_iter().map(|m| m.dma_util).filter(|u| *u > 0.0).collect();
    if v.is_empty() {
        1.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn variant_estimate(
    spec: &StencilSpec,
    m: &ClusterMetrics,
    machine: &MachineDescriptor,
    shape: &TileShape,
    bytes: u64,
    tiles: u64,
    dma_util: f64,
) -> VariantEstimate {
    let tc = m.core_cycles as f64;
    let tm = bytes as f64 / (machine.cluster_bandwidth() * dma_util);
    let imbalance = imbalance_factor(&measure_imbalance(m), machine.clusters_per_group);
    let tile_time = tc.max(tm) * imbalance;
    let compute: u64 = m.cores.iter().map(|c| c.fp_compute).sum();
    let fpu_util = compute as f64 / (m.cores.len().max(1) as f64 * tile_time);
    let useful = (shape.interior_points() * flop_count(spec).unwrap_or(0)) as f64;
    let gflops = useful * machine.clusters() as f64 * machine.clock_ghz / tile_time;
    let per_cluster = tiles.div_ceil(machine.clusters() as u64) as f64;
    VariantEstimate {
        tc,
        tm,
        cmtr: if tm > 0.0 { tc / tm } else { f64::INFINITY },
        imbalance,
        tile_time,
        fpu_util,
        gflops,
        runtime_ms: per_cluster * tile_time / machine.clock_ghz * 1e-6,
    }
}

/// Scales one kernel's single-cluster results to the full machine.
///
/// `dma_util` is the DMA bandwidth utilization to derate the memory share
/// with; the machine's own value takes precedence.
pub fn estimate(
    spec: &StencilSpec,
    shape: &TileShape,
    base: Option<&ClusterMetrics>,
    saris: Option<&ClusterMetrics>,
    machine: &MachineDescriptor,
    dma_util: f64,
) -> Result<KernelEstimate, ScaleoutError> {
    let base = base.ok_or(ScaleoutError::MissingVariant(Variant::Base.name()))?;
    let saris = saris.ok_or(ScaleoutError::MissingVariant(Variant::Saris.name()))?;
    let util = machine.dma_util.unwrap_or(dma_util);
    if !(util > 0.0) {
        return Err(ScaleoutError::Machine("DMA utilization must be positive".into()));
    }
    let bytes = tile_bytes(spec, shape);
    let tiles = tile_count(shape, machine.grid_edge(spec.dims));
    let b = variant_estimate(spec, base, machine, shape, bytes, tiles, util);
    let s = variant_estimate(spec, saris, machine, shape, bytes, tiles, util);
    Ok(KernelEstimate {
        kernel: spec.name.clone(),
        tile_bytes: bytes,
        tiles,
        speedup: b.tile_time / s.tile_time,
        base: b,
        saris: s,
    })
}

/// Memory-boundedness of every SARIS estimate, and how many are memory-bound.
pub fn classify_boundedness(estimates: &[KernelEstimate]) -> (Vec<(String, bool)>, usize) {
    let labels: Vec<(String, bool)> = estimates
        .iter()
        .map(|e| (e.kernel.clone(), e.saris.memory_bound()))
        .collect();
    let n = labels.iter().filter(|l| l.1).count();
    (labels, n)
}

/// Geomean speedup over the memory-bound kernels, with their names; `None`
/// when no kernel is memory-bound.
pub fn memory_bound_speedup(estimates: &[KernelEstimate]) -> Option<(Vec<String>, f64)> {
    let subset: Vec<&KernelEstimate> = estimates.iter().filter(|e| e.saris.memory_bound()).collect();
    if subset.is_empty() {
        return None;
    }
    let names = subset.iter().map(|e| e.kernel.clone()).collect();
    Some((names, geomean(subset.iter().map(|e| e.speedup))))
}

/// Highest fraction of peak compute reported by published stencil codes,
/// with the platform it was measured on.
pub const PUBLISHED_PEAK_FRACTIONS: [(&str, &str, f64); 8] = [
    ("AN5D", "V100 SXM2", 0.69),
    ("EBISU", "A100", 0.49),
    ("DRStencil", "P100", 0.48),
    ("Bricks", "Xeon Gold 6130", 0.45),
    ("ARTEMIS", "P100", 0.36),
    ("vector folding", "Xeon Phi 7120A", 0.30),
    ("NEON data layout", "FT-2000+", 0.29),
    ("WSE acoustic solver", "WSE-2", 0.28),
];

/// Suite-level summary of a set of estimates.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct SuiteSummary {
    pub speedup: f64,
    pub base_util: f64,
    pub saris_util: f64,
    pub peak_gflops: f64,
    pub memory_bound: usize,
}

pub fn summarize(estimates: &[KernelEstimate]) -> SuiteSummary {
    SuiteSummary {
        speedup: geomean(estimates.iter().map(|e| e.speedup)),
        base_util: geomean(estimates.iter().map(|e| e.base.fpu_util)),
        saris_util: geomean(estimates.iter().map(|e| e.saris.fpu_util)),
        peak_gflops: estimates.iter().map(|e| e.saris.gflops).fold(0.0, f64::max),
        memory_bound: classify_boundedness(estimates).1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_machine_shares_hbm_between_four_clusters() {
        let m = MachineDescriptor::default();
        assert_eq!(m.cores(), 256);
        assert!((m.device_bandwidth() - 51.2).abs() < 1e-12);
        assert!((m.cluster_bandwidth() - 12.8).abs() < 1e-12);
        assert!((m.peak_gflops() - 512.0).abs() < 1e-9);
    }

    #[test]
    fn descriptor_round_trips_through_toml() {
        let m = MachineDescriptor {
            pins_per_device: 256,
            dma_util: Some(0.5),
            ..Default::default()
        };
        assert_eq!(MachineDescriptor::from_toml(&m.to_toml()).unwrap(), m);
        let partial = MachineDescriptor::from_toml("groups = 2\n").unwrap();
        assert_eq!(partial.groups, 2);
        assert_eq!(partial.clusters_per_group, 4);
        assert!(MachineDescriptor::from_toml("grups = 2\n").is_err());
        assert!(MachineDescriptor::from_toml("groups = 0\n").is_err());
    }

    #[test]
    fn expected_max_of_two_point_distribution() {
        // P(max of 4 is the low value) = 1/16.
        let e = expected_max(&[0.75, 1.0], 4);
        assert!((e - (0.75 / 16.0 + 15.0 / 16.0)).abs() < 1e-12);
        assert_eq!(expected_max(&[1.0; 8], 4), 1.0);
        let mc = monte_carlo_max(&[0.75, 1.0], 4, 200_000, 7);
        assert!((mc - e).abs() < 5e-3);
    }

    #[test]
    fn balanced_cores_add_no_group_imbalance() {
        assert_eq!(imbalance_factor(&[1.0; 8], 4), 1.0);
        assert!(imbalance_factor(&[0.75, 1.0], 4) > 1.0);
    }
}
