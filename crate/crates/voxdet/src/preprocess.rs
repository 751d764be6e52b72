//! Input pipeline: (X,Y,Z) -> (Z,X,Y) transpose, trilinear resampling to a
//! cube, modality normalization, and coordinate transforms between source
//! voxel space and normalized cube space.
//!
//! The pipeline order is fixed: transpose -> resample -> augment ->
//! normalize. Normalized [`Box3`] coordinates are ratios of the source grid,
//! so they survive resampling unchanged.

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::Tensor;
use crate::volume_io::Volume;

/// Smallest cube side that leaves at least one voxel after five
/// stride-2 stages.
pub const MIN_CUBE_SIDE: usize = 32;

pub const DEFAULT_CT_WINDOW: (f64, f64) = (-1024.0, 1024.0);

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cube side {0} is below the minimum of {MIN_CUBE_SIDE}")]
    SideTooSmall(usize),
    #[error("box has zero extent on axis {0}")]
    DegenerateBox(usize),
}

/// Axis-aligned box with class id, normalized center (z,x,y) and normalized
/// extents, all in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub class_id: usize,
    /// (zc, xc, yc)
    pub center: [f64; 3],
    /// (dz, dx, dy)
    pub extent: [f64; 3],
}

impl Box3 {
    pub fn new(class_id: usize, center: [f64; 3], extent: [f64; 3]) -> Self {
        Box3 {
            class_id,
            center,
            extent,
        }
    }

    #[inline]
    pub fn lo(&self, axis: usize) -> f64 {
        self.center[axis] - self.extent[axis] / 2.0
    }

    #[inline]
    pub fn hi(&self, axis: usize) -> f64 {
        self.center[axis] + self.extent[axis] / 2.0
    }

    pub fn volume(&self) -> f64 {
        self.extent[0] * self.extent[1] * self.extent[2]
    }

    /// Clip the box edges to the unit cube. Returns `None` if nothing is
    /// left on some axis.
    pub fn clipped_to_unit(&self) -> Option<Box3> {
        let mut center = [0.0; 3];
        let mut extent = [0.0; 3];
        for ax in 0..3 {
            let lo = self.lo(ax).max(0.0);
            let hi = self.hi(ax).min(1.0);
            if hi - lo <= 0.0 {
                return None;
            }
            center[ax] = (lo + hi) / 2.0;
            extent[ax] = hi - lo;
        }
        Some(Box3 {
            class_id: self.class_id,
            center,
            extent,
        })
    }
}

/// Continuous axis-aligned region in source voxel coordinates (z,x,y),
/// half-open per axis: `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelBox {
    pub class_id: usize,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

/// Cubic (z,x,y)-ordered tensor produced by the resampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Cube {
    pub data: Tensor,
    pub side: usize,
    /// (nz, nx, ny) before resampling.
    pub source_dims: (usize, usize, usize),
    /// Set once a modality normalization has been applied; normalizing twice
    /// is a pipeline bug and asserts.
    pub normalized: bool,
}

/// Reorder a volume from (X,Y,Z) to (Z,X,Y).
pub fn transpose_zxy(vol: &Volume) -> Tensor {
    let (nx, ny, nz) = vol.dims;
    let mut out = Tensor::zeros(&[nz, nx, ny]);
    {
        let data = out.data_mut();
        for z in 0..nz {
            for x in 0..nx {
                let row = &mut data[(z * nx + x) * ny..(z * nx + x) * ny + ny];
                for (y, o) in row.iter_mut().enumerate() {
                    *o = vol.at(x, y, z);
                }
            }
        }
    }
    out
}

/// Per-axis sample positions under the align-corners-false convention:
/// source coordinate `s = (t + 0.5) * n_src / d - 0.5`, clamped to the valid
/// range, split into the lower index, upper index and blend weight.
fn axis_samples(n_src: usize, d: usize) -> Vec<(usize, usize, f64)> {
    (0..d)
        .map(|t| {
            let s = ((t as f64 + 0.5) * n_src as f64 / d as f64 - 0.5)
                .clamp(0.0, (n_src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling of a (z,x,y) tensor into a cube of side `d`.
pub fn resample_to_cube(arr: &Tensor, d: usize) -> Result<Cube, PreprocessError> {
    if d < MIN_CUBE_SIDE {
        return Err(PreprocessError::SideTooSmall(d));
    }
    assert_eq!(arr.shape().len(), 3, "expected a 3-D array");
    let (nz, nx, ny) = (arr.shape()[0], arr.shape()[1], arr.shape()[2]);
    let zs = axis_samples(nz, d);
    let xs = axis_samples(nx, d);
    let ys = axis_samples(ny, d);

    let src = arr.data();
    let mut out = vec![0.0f64; d * d * d];
    out.par_chunks_mut(d * d).enumerate().for_each(|(tz, slab)| {
        let (z0, z1, fz) = zs[tz];
        for (tx, row) in slab.chunks_mut(d).enumerate() {
            let (x0, x1, fx) = xs[tx];
            let base00 = (z0 * nx + x0) * ny;
            let base01 = (z0 * nx + x1) * ny;
            let base10 = (z1 * nx + x0) * ny;
            let base11 = (z1 * nx + x1) * ny;
            for (ty, o) in row.iter_mut().enumerate() {
                let (y0, y1, fy) = ys[ty];
                let c000 = src[base00 + y0];
                let c001 = src[base00 + y1];
                let c010 = src[base01 + y0];
                let c011 = src[base01 + y1];
                let c100 = src[base10 + y0];
                let c101 = src[base10 + y1];
                let c110 = src[base11 + y0];
                let c111 = src[base11 + y1];
                let c00 = c000 + (c001 - c000) * fy;
                let c01 = c010 + (c011 - c010) * fy;
                let c10 = c100 + (c101 - c100) * fy;
                let c11 = c110 + (c111 - c110) * fy;
                let c0 = c00 + (c01 - c00) * fx;
                let c1 = c10 + (c11 - c10) * fx;
                *o = c0 + (c1 - c0) * fz;
            }
        }
    });

    Ok(Cube {
        data: Tensor::from_vec(&[d, d, d], out),
        side: d,
        source_dims: (nz, nx, ny),
        normalized: false,
    })
}

/// CT normalization: clip to the HU window, then map affinely onto [0,1].
pub fn normalize_ct(cube: Cube) -> Cube {
    normalize_ct_with_window(cube, DEFAULT_CT_WINDOW.0, DEFAULT_CT_WINDOW.1)
}

pub fn normalize_ct_with_window(mut cube: Cube, lo: f64, hi: f64) -> Cube {
    assert!(!cube.normalized, "normalization applied twice");
    assert!(hi > lo, "invalid CT window");
    let span = hi - lo;
    for v in cube.data.data_mut().iter_mut() {
        *v = (v.clamp(lo, hi) - lo) / span;
    }
    cube.normalized = true;
    cube
}

/// MR normalization: per-volume z-score; constant volumes map to all zeros.
pub fn normalize_mr(mut cube: Cube) -> Cube {
    assert!(!cube.normalized, "normalization applied twice");
    let n = cube.data.numel() as f64;
    let mean = cube.data.data().iter().sum::<f64>() / n;
    let var = cube
        .data
        .data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < 1e-8 {
        for v in cube.data.data_mut().iter_mut() {
            *v = 0.0;
        }
    } else {
        for v in cube.data.data_mut().iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    cube.normalized = true;
    cube
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Ct,
    Mr,
    None,
}

impl NormMode {
    pub fn parse(s: &str) -> Option<NormMode> {
        match s {
            "ct" => Some(NormMode::Ct),
            "mr" => Some(NormMode::Mr),
            "none" => Some(NormMode::None),
            _ => None,
        }
    }
}

pub fn apply_normalization(cube: Cube, mode: NormMode) -> Cube {
    match mode {
        NormMode::Ct => normalize_ct(cube),
        NormMode::Mr => normalize_mr(cube),
        NormMode::None => cube,
    }
}

/// Convert a source-voxel box to normalized cube coordinates. The mapping is
/// a pure ratio of the source grid, so it commutes with resampling.
pub fn box_original_to_cube(
    b: &VoxelBox,
    source_dims: (usize, usize, usize),
) -> Result<Box3, PreprocessError> {
    let n = [source_dims.0 as f64, source_dims.1 as f64, source_dims.2 as f64];
    let mut center = [0.0; 3];
    let mut extent = [0.0; 3];
    for ax in 0..3 {
        let e = b.hi[ax] - b.lo[ax];
        if e <= 0.0 {
            return Err(PreprocessError::DegenerateBox(ax));
        }
        center[ax] = (b.lo[ax] + b.hi[ax]) / 2.0 / n[ax];
        extent[ax] = e / n[ax];
    }
    Ok(Box3::new(b.class_id, center, extent))
}

/// Exact inverse of [`box_original_to_cube`].
pub fn box_cube_to_original(b: &Box3, source_dims: (usize, usize, usize)) -> VoxelBox {
    let n = [source_dims.0 as f64, source_dims.1 as f64, source_dims.2 as f64];
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for ax in 0..3 {
        lo[ax] = b.lo(ax) * n[ax];
        hi[ax] = b.hi(ax) * n[ax];
    }
    VoxelBox {
        class_id: b.class_id,
        lo,
        hi,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Modality;

    #[test]
    fn transpose_reorders_axes() {
        let mut vol = Volume::new((3, 4, 5), (1.0, 1.0, 1.0), Modality::Unknown);
        for x in 0..3 {
            for y in 0..4 {
                for z in 0..5 {
                    vol.set(x, y, z, (100 * x + 10 * y + z) as f64);
                }
            }
        }
        let t = transpose_zxy(&vol);
        assert_eq!(t.shape(), &[5, 3, 4]);
        for z in 0..5 {
            for x in 0..3 {
                for y in 0..4 {
                    assert_eq!(t.at3(z, x, y), vol.at(x, y, z));
                }
            }
        }
    }

    #[test]
    fn transpose_single_voxel_identity() {
        let mut vol = Volume::new((1, 1, 1), (1.0, 1.0, 1.0), Modality::Unknown);
        vol.set(0, 0, 0, 42.0);
        let t = transpose_zxy(&vol);
        assert_eq!(t.shape(), &[1, 1, 1]);
        assert_eq!(t.data()[0], 42.0);
    }

    #[test]
    fn resample_constant_is_constant() {
        let arr = Tensor::full(&[5, 9, 3], 7.0);
        let cube = resample_to_cube(&arr, 64).unwrap();
        assert_eq!(cube.side, 64);
        assert!(cube.data.data().iter().all(|v| *v == 7.0));
    }

    #[test]
    fn resample_reproduces_trilinear_field() {
        // f is linear in each coordinate, so trilinear interpolation is exact
        let f = |z: f64, x: f64, y: f64| z + 2.0 * x + 3.0 * y;
        let (nz, nx, ny) = (7, 9, 11);
        let mut arr = Tensor::zeros(&[nz, nx, ny]);
        for z in 0..nz {
            for x in 0..nx {
                for y in 0..ny {
                    arr.set3(z, x, y, f(z as f64, x as f64, y as f64));
                }
            }
        }
        let d = 33;
        let cube = resample_to_cube(&arr, d).unwrap();
        let map = |t: usize, n: usize| {
            ((t as f64 + 0.5) * n as f64 / d as f64 - 0.5).clamp(0.0, (n - 1) as f64)
        };
        for tz in 0..d {
            for tx in 0..d {
                for ty in 0..d {
                    let want = f(map(tz, nz), map(tx, nx), map(ty, ny));
                    assert!(
                        (cube.data.at3(tz, tx, ty) - want).abs() < 1e-9,
                        "mismatch at ({tz},{tx},{ty})"
                    );
                }
            }
        }
    }

    #[test]
    fn resample_rejects_small_side() {
        let arr = Tensor::zeros(&[4, 4, 4]);
        assert!(matches!(
            resample_to_cube(&arr, 31),
            Err(PreprocessError::SideTooSmall(31))
        ));
    }

    #[test]
    fn ct_window_endpoints_and_clipping() {
        let mut cube = resample_to_cube(&Tensor::zeros(&[2, 2, 2]), 32).unwrap();
        let vals = [-1024.0, 1024.0, 0.0, 3000.0, -5000.0];
        for (i, v) in vals.iter().enumerate() {
            cube.data.data_mut()[i] = *v;
        }
        let out = normalize_ct(cube);
        let d = out.data.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 1.0);
        assert_eq!(d[2], 0.5);
        assert_eq!(d[3], 1.0);
        assert_eq!(d[4], 0.0);
        assert!(out.normalized);
    }

    #[test]
    #[should_panic(expected = "normalization applied twice")]
    fn double_normalization_asserts() {
        let cube = resample_to_cube(&Tensor::zeros(&[2, 2, 2]), 32).unwrap();
        let once = normalize_ct(cube);
        let _ = normalize_mr(once);
    }

    #[test]
    fn mr_zscore_moments() {
        let mut arr = Tensor::zeros(&[4, 4, 4]);
        for (i, v) in arr.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin() * 50.0 + 12.0;
        }
        let out = normalize_mr(resample_to_cube(&arr, 32).unwrap());
        let n = out.data.numel() as f64;
        let mean = out.data.data().iter().sum::<f64>() / n;
        let var = out.data.data().iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mr_constant_maps_to_zero() {
        let out = normalize_mr(resample_to_cube(&Tensor::full(&[3, 3, 3], 9.0), 32).unwrap());
        assert!(out.data.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mr_affine_invariance() {
        let mut arr = Tensor::zeros(&[5, 5, 5]);
        for (i, v) in arr.data_mut().iter_mut().enumerate() {
            *v = ((i * 31) % 17) as f64;
        }
        let mut shifted = arr.clone();
        for v in shifted.data_mut().iter_mut() {
            *v = 3.5 * *v + 120.0;
        }
        let a = normalize_mr(resample_to_cube(&arr, 32).unwrap());
        let b = normalize_mr(resample_to_cube(&shifted, 32).unwrap());
        for (x, y) in a.data.data().iter().zip(b.data.data().iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn box_mapping_examples() {
        // full-grid box
        let b = VoxelBox {
            class_id: 0,
            lo: [0.0, 0.0, 0.0],
            hi: [40.0, 64.0, 80.0],
        };
        let n = box_original_to_cube(&b, (40, 64, 80)).unwrap();
        assert_eq!(n.center, [0.5, 0.5, 0.5]);
        assert_eq!(n.extent, [1.0, 1.0, 1.0]);
        // z slab 10..20 of a 40-slice scan
        let b = VoxelBox {
            class_id: 1,
            lo: [10.0, 0.0, 0.0],
            hi: [20.0, 64.0, 80.0],
        };
        let n = box_original_to_cube(&b, (40, 64, 80)).unwrap();
        assert!((n.center[0] - 0.375).abs() < 1e-12);
        assert!((n.extent[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn box_roundtrip_exact() {
        let b = VoxelBox {
            class_id: 2,
            lo: [3.25, 10.0, 7.5],
            hi: [9.75, 31.0, 22.5],
        };
        let dims = (40, 50, 60);
        let back = box_cube_to_original(&box_original_to_cube(&b, dims).unwrap(), dims);
        for ax in 0..3 {
            assert!((back.lo[ax] - b.lo[ax]).abs() < 1e-9);
            assert!((back.hi[ax] - b.hi[ax]).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_box_rejected() {
        let b = VoxelBox {
            class_id: 0,
            lo: [5.0, 5.0, 5.0],
            hi: [5.0, 6.0, 6.0],
        };
        assert!(matches!(
            box_original_to_cube(&b, (10, 10, 10)),
            Err(PreprocessError::DegenerateBox(0))
        ));
    }

    proptest::proptest! {
        #[test]
        fn resample_is_monotone_bounded(seed in 0u64..500) {
            let mut arr = Tensor::zeros(&[4, 6, 5]);
            let mut s = seed;
            for v in arr.data_mut().iter_mut() {
                s = s.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                *v = ((s >> 40) as f64) / 1e3 - 8.0;
            }
            let (lo, hi) = (arr.min_value(), arr.max_value());
            let cube = resample_to_cube(&arr, 32).unwrap();
            for v in cube.data.data() {
                proptest::prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }

        #[test]
        fn normalized_boxes_survive_resampling(
            cz in 0.2f64..0.8, cx in 0.2f64..0.8, cy in 0.2f64..0.8,
            e in 0.05f64..0.3
        ) {
            // Box3 is defined as ratios of the source grid: mapping to any
            // other grid and back through voxel space is the identity.
            let b = Box3::new(0, [cz, cx, cy], [e, e, e]);
            let dims_a = (40, 64, 80);
            let vox = box_cube_to_original(&b, dims_a);
            let back = box_original_to_cube(&vox, dims_a).unwrap();
            for ax in 0..3 {
                proptest::prop_assert!((back.center[ax] - b.center[ax]).abs() < 1e-12);
                proptest::prop_assert!((back.extent[ax] - b.extent[ax]).abs() < 1e-12);
            }
        }
    }
}
