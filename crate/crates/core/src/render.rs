//! Forward evaluation of both regression heads: RBF (weighted sum of
//! kernels) and SMoE (weighted sum of softmax gates), at points, over full
//! images, and over tile-restricted kernel subsets.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::R99;
use crate::image::ImageBuffer;
use crate::kernel::{Kernel, KernelSet, Vec2, MAX_CHANNELS};
use crate::tile::{TileGrid, TileIndex};

/// Which regression function a kernel set is evaluated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegressionHead {
    /// `y(x) = Σ_j m_j · K_j(x)` — splatting-style, no normalization.
    Rbf,
    /// `y(x) = Σ_j m_j · w_j(x)` with softmax gates `w_j`.
    Smoe,
}

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("kernel subset is empty")]
    EmptySubset,
    #[error("gate denominator underflowed")]
    DenominatorUnderflow,
}

/// Softmax gate values at one point, over a full kernel list.
#[derive(Clone, Debug, PartialEq)]
pub struct GateEval {
    /// Per-kernel gate values; non-negative and summing to 1.
    pub weights: Vec<f64>,
    /// Unnormalized gate mass `D(x) = Σ_i π_i·K_i(x)`.
    pub denominator: f64,
}

/// Unnormalized Gaussian kernel response `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`;
/// equals 1 exactly at the center.
#[inline]
pub fn kernel_eval(k: &Kernel, x: Vec2) -> f64 {
    (-0.5 * crate::geometry::mahalanobis2(k, x)).exp()
}

/// Softmax gates over all kernels, computed in the log domain (the largest
/// log-term is subtracted before exponentiation, so the shifted denominator
/// is at least 1). The underflow branch is a defensive check only.
pub fn gates_at(kernels: &[Kernel], x: Vec2) -> Result<GateEval, RenderError> {
    if kernels.is_empty() {
        return Err(RenderError::EmptySubset);
    }
    let mut log_terms = Vec::with_capacity(kernels.len());
    let mut shift = f64::NEG_INFINITY;
    for k in kernels {
        let lt = k.log_pi - 0.5 * crate::geometry::mahalanobis2(k, x);
        shift = shift.max(lt);
        log_terms.push(lt);
    }
    let mut sum = 0.0;
    let mut weights: Vec<f64> = log_terms
        .iter()
        .map(|lt| {
            let e = (lt - shift).exp();
            sum += e;
            e
        })
        .collect();
    if sum < EPS_DENOMINATOR {
        return Err(RenderError::DenominatorUnderflow);
    }
    for w in &mut weights {
        *w /= sum;
    }
    Ok(GateEval {
        weights,
        denominator: shift.exp() * sum,
    })
}

/// Threshold on the shifted-log denominator below which gate evaluation is
/// treated as underflowed. Unreachable after max-shifting; kept defensive.
pub const EPS_DENOMINATOR: f64 = 1e-12;

/// Per-kernel data laid out for the hot loops: precision matrix entries,
/// raw Cholesky factors (for gradients) and expert values.
#[derive(Clone, Copy)]
pub(crate) struct PrepKernel {
    pub mx: f64,
    pub my: f64,
    pub p00: f64,
    pub p01: f64,
    pub p11: f64,
    pub log_pi: f64,
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
    pub m: [f64; MAX_CHANNELS],
}

pub(crate) fn prepare(ks: &KernelSet) -> Vec<PrepKernel> {
    ks.kernels
        .iter()
        .map(|k| {
            let (p00, p01, p11) = k.chol.precision();
            PrepKernel {
                mx: k.mu.x,
                my: k.mu.y,
                p00,
                p01,
                p11,
                log_pi: k.log_pi,
                l11: k.chol.l11,
                l21: k.chol.l21,
                l22: k.chol.l22,
                m: k.m,
            }
        })
        .collect()
}

/// One kernel that survived culling at a pixel: its id and its weight in the
/// prediction (`w_j` for SMoE, `K_j` for RBF).
#[derive(Clone, Copy)]
pub(crate) struct Activation {
    pub id: u32,
    pub w: f64,
}

/// Evaluates one pixel over `subset`, writing the per-channel prediction to
/// `out[..channels]` and the surviving kernels to `scratch`.
///
/// Kernels with squared Mahalanobis distance above `cull_r2` are dropped from
/// both numerator and denominator; if every kernel of the subset is culled,
/// the full subset is used unculled so the pixel never goes unmodeled.
#[inline]
pub(crate) fn eval_pixel(
    prep: &[PrepKernel],
    subset: &[u32],
    x: f64,
    y: f64,
    cull_r2: f64,
    head: RegressionHead,
    channels: usize,
    scratch: &mut Vec<Activation>,
    out: &mut [f64; MAX_CHANNELS],
) {
    debug_assert!(!subset.is_empty());
    scratch.clear();
    out.fill(0.0);
    match head {
        RegressionHead::Smoe => {
            let mut shift = f64::NEG_INFINITY;
            for &id in subset {
                let k = &prep[id as usize];
                let dx = x - k.mx;
                let dy = y - k.my;
                let d2 = k.p00 * dx * dx + 2.0 * k.p01 * dx * dy + k.p11 * dy * dy;
                if d2 <= cull_r2 {
                    let lt = k.log_pi - 0.5 * d2;
                    shift = shift.max(lt);
                    scratch.push(Activation { id, w: lt });
                }
            }
            if scratch.is_empty() {
                // All culled: fall back to the unculled subset.
                for &id in subset {
                    let k = &prep[id as usize];
                    let dx = x - k.mx;
                    let dy = y - k.my;
                    let d2 = k.p00 * dx * dx + 2.0 * k.p01 * dx * dy + k.p11 * dy * dy;
                    let lt = k.log_pi - 0.5 * d2;
                    shift = shift.max(lt);
                    scratch.push(Activation { id, w: lt });
                }
            }
            let mut sum = 0.0;
            for a in scratch.iter_mut() {
                a.w = (a.w - shift).exp();
                sum += a.w;
            }
            if sum < EPS_DENOMINATOR {
                // Defensive: assign everything to the nearest kernel.
                let best = scratch
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.w.total_cmp(&b.1.w))
                    .map(|(i, _)| i)
                    .unwrap();
                for (i, a) in scratch.iter_mut().enumerate() {
                    a.w = if i == best { 1.0 } else { 0.0 };
                }
            } else {
                let inv = 1.0 / sum;
                for a in scratch.iter_mut() {
                    a.w *= inv;
                }
            }
            for a in scratch.iter() {
                let m = &prep[a.id as usize].m;
                for c in 0..channels {
                    out[c] += m[c] * a.w;
                }
            }
        }
        RegressionHead::Rbf => {
            let mut pass = 0;
            loop {
                for &id in subset {
                    let k = &prep[id as usize];
                    let dx = x - k.mx;
                    let dy = y - k.my;
                    let d2 = k.p00 * dx * dx + 2.0 * k.p01 * dx * dy + k.p11 * dy * dy;
                    if pass == 0 && d2 > cull_r2 {
                        continue;
                    }
                    let kv = (-0.5 * d2).exp();
                    scratch.push(Activation { id, w: kv });
                    let m = &prep[id as usize].m;
                    for c in 0..channels {
                        out[c] += m[c] * kv;
                    }
                }
                if !scratch.is_empty() || pass == 1 {
                    break;
                }
                pass = 1;
            }
        }
    }
}

/// Evaluates one head at an arbitrary continuous coordinate.
///
/// With `subset`, gates are normalized over the subset only and kernels
/// beyond their 99% ellipse are culled (truncated-support semantics, matching
/// rasterized rendering). Without it, all kernels contribute untruncated.
pub fn render_point(
    ks: &KernelSet,
    head: RegressionHead,
    x: Vec2,
    subset: Option<&[u32]>,
) -> Result<[f64; MAX_CHANNELS], RenderError> {
    if ks.is_empty() || subset.is_some_and(|s| s.is_empty()) {
        return Err(RenderError::EmptySubset);
    }
    let prep = prepare(ks);
    let all: Vec<u32>;
    let (ids, cull_r2) = match subset {
        Some(s) => (s, R99 * R99),
        None => {
            all = (0..ks.len() as u32).collect();
            (all.as_slice(), f64::INFINITY)
        }
    };
    let mut scratch = Vec::with_capacity(ids.len());
    let mut out = [0.0; MAX_CHANNELS];
    eval_pixel(&prep, ids, x.x, x.y, cull_r2, head, ks.channels, &mut scratch, &mut out);
    Ok(out)
}

/// Renders a full image on `grid`. Without an index every pixel uses all
/// kernels (global render); with one, each pixel uses its block's subset with
/// per-pixel ellipse culling at the index's radius. Accumulation is in f64,
/// storage in f32.
pub fn render_image(
    ks: &KernelSet,
    head: RegressionHead,
    grid: &TileGrid,
    index: Option<&TileIndex>,
) -> Result<ImageBuffer, RenderError> {
    if ks.is_empty() {
        return Err(RenderError::EmptySubset);
    }
    if let Some(index) = index {
        debug_assert_eq!(index.grid, *grid, "index was built against a different grid");
    }
    let (w, h, channels) = (grid.width, grid.height, ks.channels);
    let prep = prepare(ks);
    let all: Vec<u32> = (0..ks.len() as u32).collect();
    let cull_r2 = index.map_or(f64::INFINITY, |i| i.cull_radius * i.cull_radius);

    // Rows are independent; each yields an interleaved buffer that is
    // scattered into the planar output afterwards.
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0f32; w * channels];
            let mut scratch: Vec<Activation> = Vec::new();
            let mut out = [0.0; MAX_CHANNELS];
            let by = (y + grid.offset_y) / grid.tile;
            for bx in 0..grid.nx {
                let (xs, _) = grid.block_pixels(bx, by);
                if xs.is_empty() {
                    continue;
                }
                let subset: &[u32] = match index {
                    Some(index) => &index.kernels_of_block[grid.block_id(bx, by)],
                    None => &all,
                };
                for x in xs {
                    eval_pixel(
                        &prep,
                        subset,
                        x as f64,
                        y as f64,
                        cull_r2,
                        head,
                        channels,
                        &mut scratch,
                        &mut out,
                    );
                    for c in 0..channels {
                        row[x * channels + c] = out[c] as f32;
                    }
                }
            }
            row
        })
        .collect();

    let mut img = ImageBuffer::new(w, h, channels);
    for (y, row) in rows.iter().enumerate() {
        for c in 0..channels {
            let plane = img.plane_mut(c);
            for x in 0..w {
                plane[y * w + x] = row[x * channels + c];
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_tile_index_with_radius;
    use crate::kernel::Chol2;
    use rand::{Rng, SeedableRng};

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn kernel_eval_center_and_unit_distances() {
        let k = Kernel::isotropic(0.0, 0.0, 1.0, 0.5);
        assert_eq!(kernel_eval(&k, Vec2::new(0.0, 0.0)), 1.0);
        approx(kernel_eval(&k, Vec2::new(1.0, 0.0)), (-0.5f64).exp(), 1e-12);
        let k = Kernel::new(Vec2::new(0.0, 0.0), Chol2::new(2.0, 0.0, 1.0), [0.5; 3]);
        approx(kernel_eval(&k, Vec2::new(2.0, 0.0)), (-0.5f64).exp(), 1e-12);
    }

    #[test]
    fn gates_symmetry_and_singleton() {
        let a = Kernel::isotropic(1.0, 1.0, 2.0, 0.1);
        let g = gates_at(&[a, a], Vec2::new(5.0, -3.0)).unwrap();
        approx(g.weights[0], 0.5, 1e-12);
        approx(g.weights[1], 0.5, 1e-12);

        let g = gates_at(&[a], Vec2::new(7.0, 2.0)).unwrap();
        approx(g.weights[0], 1.0, 1e-12);
    }

    #[test]
    fn gates_hand_softmax_of_far_kernels() {
        let a = Kernel::isotropic(0.0, 0.0, 1.0, 0.1);
        let b = Kernel::isotropic(10.0, 0.0, 1.0, 0.9);
        let g = gates_at(&[a, b], Vec2::new(0.0, 0.0)).unwrap();
        // Exponents 0 and -50.
        approx(g.weights[0], 1.0 / (1.0 + (-50.0f64).exp()), 1e-15);
        approx(g.weights[1], (-50.0f64).exp(), 1e-60);
    }

    #[test]
    fn gates_empty_list_is_error() {
        assert_eq!(gates_at(&[], Vec2::new(0.0, 0.0)), Err(RenderError::EmptySubset));
    }

    #[test]
    fn render_point_smoe_singleton_and_symmetry() {
        let ks = KernelSet::new(vec![Kernel::isotropic(3.0, 3.0, 2.0, 0.8)], 3);
        let v = render_point(&ks, RegressionHead::Smoe, Vec2::new(100.0, -40.0), None).unwrap();
        approx(v[0], 0.8, 1e-12);

        let ks = KernelSet::new(
            vec![Kernel::isotropic(-5.0, 0.0, 1.0, 0.1), Kernel::isotropic(5.0, 0.0, 1.0, 0.9)],
            3,
        );
        let v = render_point(&ks, RegressionHead::Smoe, Vec2::new(0.0, 0.0), None).unwrap();
        approx(v[0], 0.5, 1e-12);
    }

    #[test]
    fn render_point_rbf_hand_values() {
        let ks = KernelSet::new(vec![Kernel::isotropic(2.0, 7.0, 1.0, 0.8)], 1);
        let v = render_point(&ks, RegressionHead::Rbf, Vec2::new(2.0, 7.0), None).unwrap();
        approx(v[0], 0.8, 1e-12);
        let v = render_point(&ks, RegressionHead::Rbf, Vec2::new(3.0, 7.0), None).unwrap();
        approx(v[0], 0.8 * (-0.5f64).exp(), 1e-12);
    }

    #[test]
    fn render_point_empty_subset_is_error() {
        let ks = KernelSet::new(vec![Kernel::isotropic(0.0, 0.0, 1.0, 0.5)], 3);
        assert_eq!(
            render_point(&ks, RegressionHead::Rbf, Vec2::new(0.0, 0.0), Some(&[])),
            Err(RenderError::EmptySubset)
        );
        let empty = KernelSet::new(vec![], 3);
        assert_eq!(
            render_point(&empty, RegressionHead::Rbf, Vec2::new(0.0, 0.0), None),
            Err(RenderError::EmptySubset)
        );
    }

    #[test]
    fn render_image_single_kernel_is_constant() {
        let ks = KernelSet::new(vec![Kernel::isotropic(1.0, 2.0, 3.0, 0.37)], 3);
        let grid = TileGrid::new(4, 4, 16);
        let img = render_image(&ks, RegressionHead::Smoe, &grid, None).unwrap();
        for v in &img.data {
            approx(*v as f64, 0.37, 1e-6);
        }
    }

    #[test]
    fn render_image_empty_set_is_error() {
        let ks = KernelSet::new(vec![], 3);
        let grid = TileGrid::new(4, 4, 16);
        assert!(matches!(
            render_image(&ks, RegressionHead::Rbf, &grid, None),
            Err(RenderError::EmptySubset)
        ));
    }

    fn random_set(rng: &mut impl Rng, l: usize, w: f64, h: f64) -> KernelSet {
        let kernels = (0..l)
            .map(|_| {
                let mut k = Kernel::new(
                    Vec2::new(rng.random_range(0.0..w), rng.random_range(0.0..h)),
                    Chol2::new(
                        rng.random_range(0.5..6.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(0.5..6.0),
                    ),
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ],
                );
                k.log_pi = 0.0;
                k
            })
            .collect();
        KernelSet::new(kernels, 3)
    }

    #[test]
    fn raster_with_infinite_radius_matches_global() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let grid = TileGrid::new(48, 32, 16);
        for head in [RegressionHead::Smoe, RegressionHead::Rbf] {
            let ks = random_set(&mut rng, 30, 48.0, 32.0);
            let index = build_tile_index_with_radius(&ks.kernels, &grid, f64::INFINITY);
            let global = render_image(&ks, head, &grid, None).unwrap();
            let raster = render_image(&ks, head, &grid, Some(&index)).unwrap();
            for (a, b) in global.data.iter().zip(raster.data.iter()) {
                assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn partition_of_unity_randomized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..500 {
            let l = rng.random_range(2..=50);
            let ks = random_set(&mut rng, l, 64.0, 64.0);
            let x = Vec2::new(rng.random_range(-10.0..74.0), rng.random_range(-10.0..74.0));
            let g = gates_at(&ks.kernels, x).unwrap();
            let sum: f64 = g.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum = {sum}");
            assert!(g.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn smoe_output_is_convex_combination_of_experts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        for _ in 0..300 {
            let l = rng.random_range(2..=20);
            let ks = random_set(&mut rng, l, 32.0, 32.0);
            let x = Vec2::new(rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
            let v = render_point(&ks, RegressionHead::Smoe, x, None).unwrap();
            for c in 0..3 {
                let lo = ks.kernels.iter().map(|k| k.m[c]).fold(f64::INFINITY, f64::min);
                let hi = ks.kernels.iter().map(|k| k.m[c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(v[c] >= lo - 1e-9 && v[c] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn gates_invariant_under_uniform_log_pi_shift() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let mut ks = random_set(&mut rng, 8, 32.0, 32.0);
            let x = Vec2::new(rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
            let base = gates_at(&ks.kernels, x).unwrap();
            let shift = rng.random_range(-3.0..3.0);
            for k in &mut ks.kernels {
                k.log_pi += shift;
            }
            let shifted = gates_at(&ks.kernels, x).unwrap();
            for (a, b) in base.weights.iter().zip(shifted.weights.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bandwidth_scaling_keeps_symmetric_midpoint() {
        for s in [0.04, 0.25, 1.0, 4.0, 25.0] {
            let scale = (s as f64).sqrt();
            let ks = KernelSet::new(
                vec![
                    Kernel::new(Vec2::new(-5.0, 0.0), Chol2::isotropic(1.0).scaled(scale), [0.1; 3]),
                    Kernel::new(Vec2::new(5.0, 0.0), Chol2::isotropic(1.0).scaled(scale), [0.9; 3]),
                ],
                3,
            );
            let v = render_point(&ks, RegressionHead::Smoe, Vec2::new(0.0, 0.0), None).unwrap();
            assert!((v[0] - 0.5).abs() < 1e-9, "s={s}: {}", v[0]);
        }
    }
}
