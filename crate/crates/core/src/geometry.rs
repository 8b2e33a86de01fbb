//! Geometry stage: eigen-decomposition of kernel covariances, 99% confidence
//! ellipses, axis-aligned bounding boxes, and the kernel↔block tile index.

use thiserror::Error;

use crate::kernel::{Kernel, Vec2};
use crate::tile::{TileGrid, TileIndex};

/// χ² quantile at 0.99 with 2 degrees of freedom.
pub const CHI2_99_DOF2: f64 = 9.210340371976182;

/// Mahalanobis radius of the 99% confidence ellipse: `sqrt(CHI2_99_DOF2)`.
pub const R99: f64 = 3.0348542587702925;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not positive definite (trace {trace}, det {det})")]
    NotPositiveDefinite { trace: f64, det: f64 },
}

/// Eigen-decomposition of a symmetric positive definite 2×2 matrix.
#[derive(Clone, Copy, Debug)]
pub struct Eig2 {
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// Unit eigenvector of `lambda_max`. For the degenerate isotropic case
    /// the tie-break is `(1, 0)`.
    pub axis: Vec2,
}

/// Closed-form eigenvalues/major axis via trace and determinant; no
/// iterative solver.
pub fn eig2x2(sigma: [[f64; 2]; 2]) -> Result<Eig2, GeometryError> {
    let (a, b, c) = (sigma[0][0], sigma[0][1], sigma[1][1]);
    let trace = a + c;
    let det = a * c - b * b;
    if !(det > 0.0) || !(trace > 0.0) {
        return Err(GeometryError::NotPositiveDefinite { trace, det });
    }
    let half = 0.5 * trace;
    let disc = (half * half - det).max(0.0).sqrt();
    let lambda_max = half + disc;
    let lambda_min = half - disc;
    // Eigenvector from whichever row of (Σ − λI) is better conditioned.
    let v1 = (b, lambda_max - a);
    let v2 = (lambda_max - c, b);
    let (vx, vy) = if v1.0.abs() + v1.1.abs() >= v2.0.abs() + v2.1.abs() {
        v1
    } else {
        v2
    };
    let norm = (vx * vx + vy * vy).sqrt();
    let axis = if norm > 0.0 {
        Vec2::new(vx / norm, vy / norm)
    } else {
        Vec2::new(1.0, 0.0)
    };
    Ok(Eig2 {
        lambda_max,
        lambda_min,
        axis,
    })
}

/// 99% confidence ellipse of a kernel. Axis lengths are full lengths
/// (twice the semi-axes).
#[derive(Clone, Copy, Debug)]
pub struct Ellipse99 {
    pub center: Vec2,
    pub major_axis_len: f64,
    pub minor_axis_len: f64,
    /// Orientation of the major eigenvector, radians.
    pub orientation: f64,
}

pub fn confidence_ellipse(k: &Kernel) -> Result<Ellipse99, GeometryError> {
    let eig = eig2x2(k.chol.covariance())?;
    Ok(Ellipse99 {
        center: k.mu,
        major_axis_len: 2.0 * R99 * eig.lambda_max.sqrt(),
        minor_axis_len: 2.0 * R99 * eig.lambda_min.sqrt(),
        orientation: eig.axis.y.atan2(eig.axis.x),
    })
}

/// Axis-aligned square bounding box with side equal to the ellipse's major
/// axis, centered on the kernel. Covers the whole 99% ellipse.
#[derive(Clone, Copy, Debug)]
pub struct BBox {
    pub center: Vec2,
    pub side: f64,
}

pub fn bounding_box(k: &Kernel) -> Result<BBox, GeometryError> {
    bounding_box_with_radius(k, R99)
}

/// Bounding box for an arbitrary Mahalanobis radius. `radius = INFINITY`
/// yields an all-covering box, which turns rasterized evaluation into the
/// global one (used by equivalence tests).
pub fn bounding_box_with_radius(k: &Kernel, radius: f64) -> Result<BBox, GeometryError> {
    let eig = eig2x2(k.chol.covariance())?;
    Ok(BBox {
        center: k.mu,
        side: 2.0 * radius * eig.lambda_max.sqrt(),
    })
}

/// Squared Mahalanobis distance of `x` from the kernel center; the per-pixel
/// cull test is `mahalanobis2(k, x) <= R99²`.
#[inline]
pub fn mahalanobis2(k: &Kernel, x: Vec2) -> f64 {
    let (p00, p01, p11) = k.chol.precision();
    let dx = x.x - k.mu.x;
    let dy = x.y - k.mu.y;
    p00 * dx * dx + 2.0 * p01 * dx * dy + p11 * dy * dy
}

/// Builds the kernel↔block index: kernel `j` is assigned to every block whose
/// pixel interval intersects `j`'s bounding box. Blocks that end up empty get
/// their nearest kernel by Euclidean center distance (ties: lowest id), so
/// every pixel always has at least one covering kernel.
pub fn build_tile_index(kernels: &[Kernel], grid: &TileGrid) -> TileIndex {
    build_tile_index_with_radius(kernels, grid, R99)
}

pub fn build_tile_index_with_radius(
    kernels: &[Kernel],
    grid: &TileGrid,
    radius: f64,
) -> TileIndex {
    assert!(!kernels.is_empty(), "tile index needs at least one kernel");
    let nblocks = grid.block_count();
    let mut blocks_of_kernel: Vec<Vec<u32>> = vec![Vec::new(); kernels.len()];
    let mut kernels_of_block: Vec<Vec<u32>> = vec![Vec::new(); nblocks];

    for (j, k) in kernels.iter().enumerate() {
        let bbox = bounding_box_with_radius(k, radius)
            .expect("kernel covariance must be positive definite");
        let half = 0.5 * bbox.side;
        let xr = grid.block_range_x(k.mu.x - half, k.mu.x + half);
        let yr = grid.block_range_y(k.mu.y - half, k.mu.y + half);
        if let (Some(xr), Some(yr)) = (xr, yr) {
            for by in yr {
                for bx in xr.clone() {
                    blocks_of_kernel[j].push(grid.block_id(bx, by) as u32);
                }
            }
        }
    }

    for (j, blocks) in blocks_of_kernel.iter_mut().enumerate() {
        blocks.sort_unstable();
        for &n in blocks.iter() {
            kernels_of_block[n as usize].push(j as u32);
        }
    }

    // Fallback: orphaned blocks adopt their nearest kernel.
    for n in 0..nblocks {
        if !kernels_of_block[n].is_empty() {
            continue;
        }
        let (bx, by) = (n % grid.nx, n / grid.nx);
        let (xs, ys) = grid.block_pixels(bx, by);
        let cx = 0.5 * (xs.start as f64 + xs.end.saturating_sub(1) as f64);
        let cy = 0.5 * (ys.start as f64 + ys.end.saturating_sub(1) as f64);
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (j, k) in kernels.iter().enumerate() {
            let d2 = (k.mu.x - cx).powi(2) + (k.mu.y - cy).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = j;
            }
        }
        kernels_of_block[n].push(best as u32);
        let blocks = &mut blocks_of_kernel[best];
        let pos = blocks.binary_search(&(n as u32)).unwrap_err();
        blocks.insert(pos, n as u32);
    }

    let index = TileIndex {
        grid: *grid,
        blocks_of_kernel,
        kernels_of_block,
        cull_radius: radius,
    };
    debug_assert!(index.check_consistency());
    index
}
