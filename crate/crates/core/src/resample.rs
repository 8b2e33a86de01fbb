//! Native super-resolution by resampling the continuous regression function
//! on an upsampled grid, with optional sharpening via uniform bandwidth
//! scaling.

use crate::geometry::build_tile_index;
use crate::image::ImageBuffer;
use crate::kernel::{Kernel, KernelSet, Vec2};
use crate::render::{render_image, RegressionHead, RenderError};
use crate::tile::{TileGrid, DEFAULT_TILE};

/// Copy with every covariance scaled by `s` (Cholesky factors by `√s`);
/// centers, experts and gate weights unchanged. `s < 1` sharpens.
pub fn sharpened_kernels(ks: &KernelSet, s: f64) -> KernelSet {
    assert!(s > 0.0 && s <= 1.0, "sharpening factor must be in (0, 1]");
    let factor = s.sqrt();
    let kernels = ks
        .kernels
        .iter()
        .map(|k| Kernel {
            chol: k.chol.scaled(factor),
            ..*k
        })
        .collect();
    KernelSet::new(kernels, ks.channels)
}

/// Resamples the model on a `scale`-times-denser grid, optionally sharpening
/// by `sharpen` (a variance scale in `(0,1]`, 1 = none). Output pixel `i`
/// maps to source coordinate `(i + 0.5)/scale − 0.5`, keeping content
/// centered. Rendering is rasterized against an index rebuilt for the scaled
/// kernels.
pub fn superres(
    ks: &KernelSet,
    head: RegressionHead,
    src_width: usize,
    src_height: usize,
    scale: f64,
    sharpen: f64,
) -> Result<ImageBuffer, RenderError> {
    assert!(scale >= 1.0, "scale must be at least 1");
    assert!(sharpen > 0.0 && sharpen <= 1.0);
    let out_w = (src_width as f64 * scale).round() as usize;
    let out_h = (src_height as f64 * scale).round() as usize;

    // Evaluating the source-space function at mapped output coordinates is
    // the same as mapping the kernels into output space: the Gaussian
    // exponent is affine-invariant under x ↦ (x + 0.5)/scale − 0.5 with
    // μ ↦ scale·μ + (scale − 1)/2 and L ↦ scale·√sharpen·L.
    let factor = scale * sharpen.sqrt();
    let shift = 0.5 * (scale - 1.0);
    let mapped: Vec<Kernel> = ks
        .kernels
        .iter()
        .map(|k| Kernel {
            mu: Vec2::new(scale * k.mu.x + shift, scale * k.mu.y + shift),
            chol: k.chol.scaled(factor),
            ..*k
        })
        .collect();
    let mapped = KernelSet::new(mapped, ks.channels);

    let grid = TileGrid::new(out_w, out_h, DEFAULT_TILE);
    let index = build_tile_index(&mapped.kernels, &grid);
    render_image(&mapped, head, &grid, Some(&index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bounding_box;
    use crate::kernel::Chol2;
    use crate::render::{gates_at, render_point};
    use rand::{Rng, SeedableRng};

    fn random_set(seed: u64, l: usize, extent: f64) -> KernelSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let kernels = (0..l)
            .map(|_| {
                Kernel::new(
                    Vec2::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent)),
                    Chol2::new(
                        rng.random_range(1.0..6.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(1.0..6.0),
                    ),
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ],
                )
            })
            .collect();
        KernelSet::new(kernels, 3)
    }

    #[test]
    fn sharpen_one_is_identity() {
        let ks = random_set(1, 10, 32.0);
        assert_eq!(sharpened_kernels(&ks, 1.0), ks);
    }

    #[test]
    fn sharpen_quarter_halves_bounding_boxes() {
        let ks = random_set(2, 10, 32.0);
        let sharp = sharpened_kernels(&ks, 0.25);
        for (a, b) in ks.kernels.iter().zip(sharp.kernels.iter()) {
            let sa = bounding_box(a).unwrap().side;
            let sb = bounding_box(b).unwrap().side;
            assert!((sb - 0.5 * sa).abs() < 1e-9);
            assert_eq!(a.mu, b.mu);
            assert_eq!(a.m, b.m);
        }
    }

    #[test]
    fn gates_stay_normalized_after_scaling() {
        let ks = random_set(3, 8, 32.0);
        let sharp = sharpened_kernels(&ks, 0.3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = Vec2::new(rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
            let g = gates_at(&sharp.kernels, x).unwrap();
            let sum: f64 = g.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_model_stays_constant_at_any_scale_and_sharpening() {
        let kernels = vec![
            Kernel::isotropic(3.0, 3.0, 4.0, 0.42),
            Kernel::isotropic(12.0, 9.0, 6.0, 0.42),
            Kernel::isotropic(7.0, 14.0, 3.0, 0.42),
        ];
        let ks = KernelSet::new(kernels, 1);
        let img = superres(&ks, RegressionHead::Smoe, 16, 16, 10.0, 0.25).unwrap();
        assert_eq!((img.width, img.height), (160, 160));
        for v in &img.data {
            assert!((v - 0.42).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn identity_scale_matches_render() {
        let ks = random_set(5, 12, 32.0);
        let grid = TileGrid::new(32, 32, 16);
        let index = build_tile_index(&ks.kernels, &grid);
        let direct = render_image(&ks, RegressionHead::Smoe, &grid, Some(&index)).unwrap();
        let resampled = superres(&ks, RegressionHead::Smoe, 32, 32, 1.0, 1.0).unwrap();
        for (a, b) in direct.data.iter().zip(resampled.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn smoe_output_stays_in_expert_hull_after_sharpening() {
        let ks = random_set(6, 10, 32.0);
        for s in [1.0, 0.5, 0.1] {
            let sharp = sharpened_kernels(&ks, s);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
            for _ in 0..200 {
                let x = Vec2::new(rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
                let v = render_point(&sharp, RegressionHead::Smoe, x, None).unwrap();
                for c in 0..3 {
                    let lo = ks.kernels.iter().map(|k| k.m[c]).fold(f64::INFINITY, f64::min);
                    let hi = ks.kernels.iter().map(|k| k.m[c]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(v[c] >= lo - 1e-9 && v[c] <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn upsample_then_box_downsample_is_consistent() {
        let ks = random_set(7, 40, 48.0);
        let grid = TileGrid::new(48, 48, 16);
        let index = build_tile_index(&ks.kernels, &grid);
        let base = render_image(&ks, RegressionHead::Smoe, &grid, Some(&index)).unwrap();
        let scale = 3usize;
        let up = superres(&ks, RegressionHead::Smoe, 48, 48, scale as f64, 1.0).unwrap();
        let mut mad = 0.0f64;
        for c in 0..3 {
            for y in 0..48 {
                for x in 0..48 {
                    let mut acc = 0.0f64;
                    for dy in 0..scale {
                        for dx in 0..scale {
                            acc += up.get(x * scale + dx, y * scale + dy, c) as f64;
                        }
                    }
                    acc /= (scale * scale) as f64;
                    mad += (acc - base.get(x, y, c) as f64).abs();
                }
            }
        }
        mad /= (48 * 48 * 3) as f64;
        assert!(mad <= 2.0 / 255.0, "mean abs diff {mad}");
    }
}
