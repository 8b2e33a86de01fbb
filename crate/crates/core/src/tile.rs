//! Tile partitioning of the image plane and the kernel↔block index.

use std::ops::Range;

/// Partition of a `width`×`height` pixel raster into square tiles.
///
/// The grid origin can be shifted by `(offset_x, offset_y)` pixels (both in
/// `[0, tile)`), which the multi-hypothesis denoiser uses to train models on
/// displaced block partitions. Pixel `(x, y)` belongs to block
/// `((x + offset_x) / tile, (y + offset_y) / tile)`, so every pixel lies in
/// exactly one tile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileGrid {
    /// Tile side length in pixels.
    pub tile: usize,
    /// Number of tile columns.
    pub nx: usize,
    /// Number of tile rows.
    pub ny: usize,
    pub width: usize,
    pub height: usize,
    pub offset_x: usize,
    pub offset_y: usize,
}

pub const DEFAULT_TILE: usize = 16;

impl TileGrid {
    pub fn new(width: usize, height: usize, tile: usize) -> Self {
        Self::with_offset(width, height, tile, 0, 0)
    }

    pub fn with_offset(
        width: usize,
        height: usize,
        tile: usize,
        offset_x: usize,
        offset_y: usize,
    ) -> Self {
        assert!(tile >= 1 && width >= 1 && height >= 1);
        assert!(offset_x < tile && offset_y < tile);
        Self {
            tile,
            nx: (width + offset_x).div_ceil(tile),
            ny: (height + offset_y).div_ceil(tile),
            width,
            height,
            offset_x,
            offset_y,
        }
    }

    pub fn block_count(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn block_id(&self, bx: usize, by: usize) -> usize {
        by * self.nx + bx
    }

    #[inline]
    pub fn block_of_pixel(&self, x: usize, y: usize) -> (usize, usize) {
        ((x + self.offset_x) / self.tile, (y + self.offset_y) / self.tile)
    }

    /// Pixel column / row ranges covered by block `(bx, by)`, clipped to the
    /// image. Border blocks of shifted grids may be narrower than `tile`.
    pub fn block_pixels(&self, bx: usize, by: usize) -> (Range<usize>, Range<usize>) {
        let x0 = (self.tile * bx).saturating_sub(self.offset_x);
        let x1 = (self.tile * (bx + 1) - self.offset_x).min(self.width);
        let y0 = (self.tile * by).saturating_sub(self.offset_y);
        let y1 = (self.tile * (by + 1) - self.offset_y).min(self.height);
        (x0..x1, y0..y1)
    }

    /// Inclusive block-column range whose pixel intervals intersect `[x0, x1]`,
    /// clamped to the grid; `None` if the interval misses the grid entirely.
    pub fn block_range_x(&self, x0: f64, x1: f64) -> Option<Range<usize>> {
        self.block_range(x0, x1, self.offset_x, self.nx)
    }

    pub fn block_range_y(&self, y0: f64, y1: f64) -> Option<Range<usize>> {
        self.block_range(y0, y1, self.offset_y, self.ny)
    }

    fn block_range(&self, lo: f64, hi: f64, offset: usize, n: usize) -> Option<Range<usize>> {
        let t = self.tile as f64;
        let off = offset as f64;
        if !(hi >= -off) {
            // Interval entirely left of the grid (or NaN bounds).
            return None;
        }
        let first = if lo == f64::NEG_INFINITY {
            0
        } else {
            (((lo + off) / t).floor().max(0.0)) as usize
        };
        let last = if hi == f64::INFINITY {
            n - 1
        } else {
            ((((hi + off) / t).floor()) as usize).min(n - 1)
        };
        if first >= n || first > last {
            return None;
        }
        Some(first..last + 1)
    }
}

/// Bidirectional kernel↔block coverage lists, built by
/// [`crate::geometry::build_tile_index`] against a specific [`TileGrid`].
#[derive(Clone, Debug)]
pub struct TileIndex {
    /// Grid this index was built against.
    pub grid: TileGrid,
    /// For each kernel `j`, the sorted block ids its bounding box intersects.
    pub blocks_of_kernel: Vec<Vec<u32>>,
    /// For each block `n`, the sorted kernel ids covering it (never empty).
    pub kernels_of_block: Vec<Vec<u32>>,
    /// Mahalanobis cull radius the index was built with; per-pixel culling at
    /// render/gradient time uses the same radius.
    pub cull_radius: f64,
}

impl TileIndex {
    /// Mean `|K_n|` over blocks — the sparsity/efficiency proxy.
    pub fn mean_kernels_per_block(&self) -> f64 {
        if self.kernels_of_block.is_empty() {
            return 0.0;
        }
        let total: usize = self.kernels_of_block.iter().map(Vec::len).sum();
        total as f64 / self.kernels_of_block.len() as f64
    }

    /// Checks that the two direction lists describe the same relation and
    /// are sorted. Cheap enough to run after every build in debug builds.
    pub fn check_consistency(&self) -> bool {
        for list in self.blocks_of_kernel.iter().chain(self.kernels_of_block.iter()) {
            if !list.windows(2).all(|w| w[0] < w[1]) {
                return false;
            }
        }
        for (j, blocks) in self.blocks_of_kernel.iter().enumerate() {
            for &n in blocks {
                if self.kernels_of_block[n as usize].binary_search(&(j as u32)).is_err() {
                    return false;
                }
            }
        }
        for (n, kernels) in self.kernels_of_block.iter().enumerate() {
            for &j in kernels {
                if self.blocks_of_kernel[j as usize].binary_search(&(n as u32)).is_err() {
                    return false;
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_round_up() {
        let g = TileGrid::new(64, 64, 16);
        assert_eq!((g.nx, g.ny), (4, 4));
        let g = TileGrid::new(65, 17, 16);
        assert_eq!((g.nx, g.ny), (5, 2));
    }

    #[test]
    fn every_pixel_in_exactly_one_tile() {
        for (ox, oy) in [(0, 0), (4, 12), (15, 1)] {
            let g = TileGrid::with_offset(40, 24, 16, ox, oy);
            let mut seen = vec![0u32; 40 * 24];
            for by in 0..g.ny {
                for bx in 0..g.nx {
                    let (xs, ys) = g.block_pixels(bx, by);
                    for y in ys {
                        for x in xs.clone() {
                            seen[y * 40 + x] += 1;
                            assert_eq!(g.block_of_pixel(x, y), (bx, by));
                        }
                    }
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "offset ({ox},{oy})");
        }
    }

    #[test]
    fn block_range_clamps_to_grid() {
        let g = TileGrid::new(64, 64, 16);
        assert_eq!(g.block_range_x(14.0, 34.0), Some(0..3));
        assert_eq!(g.block_range_x(-50.0, -1.0), None);
        assert_eq!(g.block_range_x(80.0, 120.0), None);
        assert_eq!(g.block_range_x(f64::NEG_INFINITY, f64::INFINITY), Some(0..4));
    }
}
