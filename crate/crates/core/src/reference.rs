//! Golden-model interpreter for one stencil time iteration.
//!
//! Every generated program is checked against [`run_reference`]. The engine
//! evaluates the same arithmetic tree the code generators emit for a given
//! [`ReassocPolicy`], so matching policies compare bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::EngineError;
use crate::ir::{ReassocPolicy, StencilSpec, TileShape};

/// Double-buffered grid tile plus any extra read-only arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    shape: TileShape,
    /// One buffer per read array, in [`StencilSpec::read_arrays`] order; the
    /// first is the current-iteration input.
    inputs: Vec<Vec<f64>>,
    out: Vec<f64>,
    seed: u64,
}

impl Tile {
    /// Tile with every input cell and the output halo drawn uniformly from
    /// `[0, 1)`; the output interior starts at zero.
    pub fn random(spec: &StencilSpec, shape: TileShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = shape.cells();
        let inputs = spec
            .read_arrays()
            .iter()
            .map(|_| (0..cells).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let mut out = vec![0.0; cells];
        for z in 0..shape.extent[2] {
            for y in 0..shape.extent[1] {
                for x in 0..shape.extent[0] {
                    let v: f64 = rng.gen();
                    if !shape.is_interior(x, y, z) {
                        out[shape.lin(x, y, z)] = v;
                    }
                }
            }
        }
        Tile {
            shape,
            inputs,
            out,
            seed,
        }
    }

    /// Tile with every cell of every buffer set to `value`.
    pub fn constant(spec: &StencilSpec, shape: TileShape, value: f64) -> Self {
        let cells = shape.cells();
        Tile {
            shape,
            inputs: vec![vec![value; cells]; spec.read_arrays().len()],
            out: vec![value; cells],
            seed: 0,
        }
    }

    pub fn from_buffers(
        shape: TileShape,
        inputs: Vec<Vec<f64>>,
        out: Vec<f64>,
    ) -> Result<Self, EngineError> {
        let cells = shape.cells();
        if inputs.is_empty() {
            return Err(EngineError::BufferMismatch { have: 0, need: 1 });
        }
        if inputs.iter().chain(std::iter::once(&out)).any(|b| b.len() != cells) {
            return Err(EngineError::Corrupt(format!(
                "buffer length differs from tile size {cells}"
            )));
        }
        Ok(Tile {
            shape,
            inputs,
            out,
            seed: 0,
        })
    }

    pub fn shape(&self) -> TileShape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }

    pub fn input_mut(&mut self) -> &mut [f64] {
        &mut self.inputs[0]
    }

    pub fn out(&self) -> &[f64] {
        &self.out
    }

    pub fn out_mut(&mut self) -> &mut [f64] {
        &mut self.out
    }

    /// Exchanges the current input and output buffers.
    pub fn swap_buffers(&mut self) {
        std::mem::swap(&mut self.inputs[0], &mut self.out);
    }

    /// Writes the tile as raw little-endian FP64: an 8-value header
    /// (dims, extents, halo, seed) followed by every input buffer and the output.
    /// The seed slot holds the seed's 64 bits verbatim so any seed survives.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), EngineError> {
        let s = self.shape;
        let header = [
            s.dims() as f64,
            s.extent[0] as f64,
            s.extent[1] as f64,
            s.extent[2] as f64,
            s.halo[0] as f64,
            s.halo[1] as f64,
            s.halo[2] as f64,
            f64::from_bits(self.seed),
        ];
        let mut bytes = Vec::with_capacity(8 * (8 + (self.inputs.len() + 1) * s.cells()));
        for v in header
            .iter()
            .chain(self.inputs.iter().flatten())
            .chain(self.out.iter())
        {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, EngineError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 || bytes.len() < 64 {
            return Err(EngineError::Corrupt(format!("{} bytes is not a tile dump", bytes.len())));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let as_usize = |v: f64, what: &str| -> Result<usize, EngineError> {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(EngineError::Corrupt(format!("invalid {what} {v}")))
            }
        };
        let dims = as_usize(vals[0], "dimension count")?;
        let extent = [
            as_usize(vals[1], "extent")?,
            as_usize(vals[2], "extent")?,
            as_usize(vals[3], "extent")?,
        ];
        let halo = [
            as_usize(vals[4], "halo")?,
            as_usize(vals[5], "halo")?,
            as_usize(vals[6], "halo")?,
        ];
        let seed = vals[7].to_bits();
        let shape = TileShape::new(extent, halo)?;
        if shape.dims() != dims {
            return Err(EngineError::Corrupt(format!(
                "header claims {dims} dimensions for extents {extent:?}"
            )));
        }
        let body = &vals[8..];
        let cells = shape.cells();
        if cells == 0 || body.len() % cells != 0 || body.len() / cells < 2 {
            return Err(EngineError::Corrupt(format!(
                "{} payload values do not form whole buffers of {cells} cells",
                body.len()
            )));
        }
        let mut buffers: Vec<Vec<f64>> = body.chunks_exact(cells).map(<[f64]>::to_vec).collect();
        let out = buffers.pop().expect("at least two buffers");
        Ok(Tile {
            shape,
            inputs: buffers,
            out,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Checks that a tile fits the kernel: every used axis must hold at least
/// one interior point plus a full halo on both sides.
pub fn check_tile(spec: &StencilSpec, shape: &TileShape) -> Result<(), EngineError> {
    for axis in 0..spec.dims {
        let r = spec.radius as usize;
        if shape.extent[axis] < 2 * r + 1 || shape.halo[axis] < r {
            return Err(EngineError::TileTooSmall {
                axis,
                extent: shape.extent[axis],
                radius: spec.radius,
            });
        }
    }
    if spec.dims == 2 && shape.extent[2] != 1 {
        return Err(EngineError::Corrupt(
            "2D kernels need a tile with a single z plane".into(),
        ));
    }
    Ok(())
}

/// Per-tap (buffer slot, signed linear offset) for a tile shape.
pub(crate) fn tap_lookup(spec: &StencilSpec, shape: &TileShape) -> Vec<(usize, isize)> {
    let reads = spec.read_arrays();
    let strides = shape.strides();
    spec.taps
        .iter()
        .map(|t| {
            let slot = reads
                .iter()
                .position(|&a| a == t.array)
                .expect("taps read declared input arrays");
            let delta: isize = (0..3)
                .map(|a| t.offset.0[a] as isize * strides[a] as isize)
                .sum();
            (slot, delta)
        })
        .collect()
}

/// Computes one time iteration into `tile.out`, evaluating the expression
/// tree produced by `policy`. The output halo is left untouched.
pub fn run_reference(
    spec: &StencilSpec,
    tile: &mut Tile,
    policy: ReassocPolicy,
) -> Result<(), EngineError> {
    spec.validate()?;
    let shape = tile.shape;
    check_tile(spec, &shape)?;
    let need = spec.read_arrays().len();
    if tile.inputs.len() != need {
        return Err(EngineError::BufferMismatch {
            have: tile.inputs.len(),
            need,
        });
    }
    let expr = spec.expr.reassociate(policy);
    let coeffs = spec.coeff_values(1.0);
    let taps = tap_lookup(spec, &shape);
    let [hx, hy, hz] = shape.halo;
    let [ex, ey, ez] = shape.extent;
    for z in hz..ez - hz {
        for y in hy..ey - hy {
            for x in hx..ex - hx {
                let p = shape.lin(x, y, z) as isize;
                let inputs = &tile.inputs;
                let v = expr.eval(
                    |t| {
                        let (slot, delta) = taps[t];
                        inputs[slot][(p + delta) as usize]
                    },
                    &coeffs,
                );
                tile.out[p as usize] = v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{catalog_kernel, parse_spec};

    const IDENTITY: &str = "[grid]\nname = id\ndims = 2\nradius = 1\n[arrays]\ninp input\nout output\n[taps]\nc inp 0 0\n[expr]\nout = c\n";

    #[test]
    fn jacobi_impulse_gives_cross() {
        let spec = catalog_kernel("jacobi_2d").unwrap();
        let shape = TileShape::for_spec(&spec, 6).unwrap();
        let mut tile = Tile::constant(&spec, shape, 0.0);
        tile.input_mut()[shape.lin(3, 3, 0)] = 1.0;
        run_reference(&spec, &mut tile, ReassocPolicy::Source).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                let manhattan = (x as i32 - 3).abs() + (y as i32 - 3).abs();
                let want = if manhattan <= 1 { 0.2 } else { 0.0 };
                assert_eq!(tile.out()[shape.lin(x, y, 0)], want, "({x},{y})");
            }
        }
    }

    #[test]
    fn identity_copies_interior() {
        let spec = parse_spec(IDENTITY).unwrap();
        let shape = TileShape::for_spec(&spec, 8).unwrap();
        let mut tile = Tile::random(&spec, shape, 3);
        let before = tile.out().to_vec();
        run_reference(&spec, &mut tile, ReassocPolicy::Source).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let i = shape.lin(x, y, 0);
                if shape.is_interior(x, y, 0) {
                    assert_eq!(tile.out()[i].to_bits(), tile.input()[i].to_bits());
                } else {
                    assert_eq!(tile.out()[i].to_bits(), before[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn too_small_tile_is_rejected() {
        let spec = catalog_kernel("j2d9pt").unwrap();
        let shape = TileShape::new([4, 8, 1], [1, 2, 0]).unwrap();
        let mut tile = Tile::constant(&spec, shape, 1.0);
        assert!(matches!(
            run_reference(&spec, &mut tile, ReassocPolicy::Source),
            Err(EngineError::TileTooSmall { axis: 0, .. })
        ));
    }

    #[test]
    fn swap_twice_is_identity() {
        let spec = catalog_kernel("jacobi_2d").unwrap();
        let shape = TileShape::for_spec(&spec, 8).unwrap();
        let tile = Tile::random(&spec, shape, 9);
        let mut t = tile.clone();
        t.swap_buffers();
        assert_ne!(t, tile);
        t.swap_buffers();
        assert_eq!(t, tile);
    }

    #[test]
    fn constant_field_is_fixed_point_of_jacobi() {
        let spec = catalog_kernel("jacobi_2d").unwrap();
        let shape = TileShape::for_spec(&spec, 10).unwrap();
        let mut tile = Tile::constant(&spec, shape, 1.0);
        for _ in 0..3 {
            run_reference(&spec, &mut tile, ReassocPolicy::Source).unwrap();
            tile.swap_buffers();
        }
        for v in tile.input() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dump_round_trip_is_bit_exact() {
        let spec = catalog_kernel("ac_iso_cd").unwrap();
        let shape = TileShape::for_spec(&spec, 10).unwrap();
        let tile = Tile::random(&spec, shape, 77);
        let mut buf = Vec::new();
        tile.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (8 + 4 * 1000));
        let back = Tile::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, tile);
        assert!(Tile::read_from(&buf[..100]).is_err());
    }
}
