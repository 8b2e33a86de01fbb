//! Analytic gradients of the squared-error loss for both heads, in global
//! and tile-restricted form, plus the central-difference oracle used to
//! verify them.
//!
//! Gradients are taken directly through the Cholesky parametrization
//! (`Σ = L·Lᵀ`, precision via the explicit 2×2 inverse of `L`), so positive
//! definiteness never constrains the optimizer. Culled pixel–kernel pairs
//! contribute exactly zero gradient, mirroring the forward pass.

use rayon::prelude::*;

use crate::image::ImageBuffer;
use crate::kernel::{KernelSet, ParamCoord, MAX_CHANNELS};
use crate::render::{eval_pixel, prepare, Activation, PrepKernel, RegressionHead, RenderError};
use crate::tile::{TileGrid, TileIndex, DEFAULT_TILE};

/// Flat per-kernel gradient storage, laid out like the parameter record:
/// `d/dmu_x, d/dmu_y, d/dl11, d/dl21, d/dl22, d/dlog_pi, d/dm_0..`.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub data: Vec<f64>,
    pub channels: usize,
}

impl ParamGrads {
    pub fn zeros(kernel_count: usize, channels: usize) -> Self {
        Self {
            data: vec![0.0; kernel_count * (6 + channels)],
            channels,
        }
    }

    #[inline]
    pub fn stride(&self) -> usize {
        6 + self.channels
    }

    pub fn kernel_count(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn dmu(&self, j: usize) -> (f64, f64) {
        let o = j * self.stride();
        (self.data[o], self.data[o + 1])
    }

    pub fn dchol(&self, j: usize) -> (f64, f64, f64) {
        let o = j * self.stride();
        (self.data[o + 2], self.data[o + 3], self.data[o + 4])
    }

    pub fn dlog_pi(&self, j: usize) -> f64 {
        self.data[j * self.stride() + 5]
    }

    pub fn dm(&self, j: usize, c: usize) -> f64 {
        self.data[j * self.stride() + 6 + c]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn effective_grid(target: &ImageBuffer, index: Option<&TileIndex>) -> TileGrid {
    match index {
        Some(index) => {
            debug_assert_eq!(index.grid.width, target.width);
            debug_assert_eq!(index.grid.height, target.height);
            index.grid
        }
        None => TileGrid::new(target.width, target.height, DEFAULT_TILE),
    }
}

/// Mean squared error between the rendered image and `target`, over all
/// pixels and channels. With an index, rendering is tile-restricted exactly
/// as in [`crate::render::render_image`].
pub fn loss(
    ks: &KernelSet,
    head: RegressionHead,
    target: &ImageBuffer,
    index: Option<&TileIndex>,
) -> Result<f64, RenderError> {
    if ks.is_empty() {
        return Err(RenderError::EmptySubset);
    }
    let grid = effective_grid(target, index);
    let prep = prepare(ks);
    let all: Vec<u32> = (0..ks.len() as u32).collect();
    let cull_r2 = index.map_or(f64::INFINITY, |i| i.cull_radius * i.cull_radius);
    let channels = ks.channels;

    // One chunk per block row, merged in row order: the summation order is
    // fixed regardless of thread count.
    let partials: Vec<f64> = (0..grid.ny)
        .into_par_iter()
        .map(|by| {
            let mut scratch: Vec<Activation> = Vec::new();
            let mut out = [0.0; MAX_CHANNELS];
            let mut sse = 0.0f64;
            for bx in 0..grid.nx {
                let subset: &[u32] = match index {
                    Some(index) => &index.kernels_of_block[grid.block_id(bx, by)],
                    None => &all,
                };
                let (xs, ys) = grid.block_pixels(bx, by);
                for y in ys {
                    for x in xs.clone() {
                        eval_pixel(
                            &prep, subset, x as f64, y as f64, cull_r2, head, channels,
                            &mut scratch, &mut out,
                        );
                        for c in 0..channels {
                            let e = out[c] - target.get(x, y, c) as f64;
                            sse += e * e;
                        }
                    }
                }
            }
            sse
        })
        .collect();

    let sse: f64 = partials.iter().sum();
    Ok(sse / (target.pixel_count() * channels) as f64)
}

/// Accumulates the gradient contribution of one pixel into `grads`.
/// `residual[c] = prediction - target`, `out` is the prediction.
#[inline]
fn accumulate_pixel(
    prep: &[PrepKernel],
    scratch: &[Activation],
    head: RegressionHead,
    channels: usize,
    x: f64,
    y: f64,
    residual: &[f64; MAX_CHANNELS],
    out: &[f64; MAX_CHANNELS],
    grads: &mut [f64],
    stride: usize,
) {
    for a in scratch {
        let k = &prep[a.id as usize];
        // Head-specific sensitivity of the loss to this kernel's response.
        let g = match head {
            RegressionHead::Smoe => {
                let mut g = 0.0;
                for c in 0..channels {
                    g += residual[c] * (k.m[c] - out[c]);
                }
                g
            }
            RegressionHead::Rbf => {
                let mut g = 0.0;
                for c in 0..channels {
                    g += residual[c] * k.m[c];
                }
                g
            }
        };
        let f = a.w * g;
        let dx = x - k.mx;
        let dy = y - k.my;
        let q0 = k.p00 * dx + k.p01 * dy;
        let q1 = k.p01 * dx + k.p11 * dy;
        let o = a.id as usize * stride;
        grads[o] += f * q0;
        grads[o + 1] += f * q1;
        grads[o + 2] += f * (q0 * q0 * k.l11 + q0 * q1 * k.l21);
        grads[o + 3] += f * (q0 * q1 * k.l11 + q1 * q1 * k.l21);
        grads[o + 4] += f * (q1 * q1 * k.l22);
        if head == RegressionHead::Smoe {
            grads[o + 5] += f;
        }
        for c in 0..channels {
            grads[o + 6 + c] += residual[c] * a.w;
        }
    }
}

/// Exact analytic gradient of [`loss`] at the current parameters, together
/// with the loss value itself. Truncated-support semantics are identical to
/// the forward pass. Accumulation order is fixed (ascending block id, then
/// ascending kernel id), so results are reproducible for any thread count.
pub fn backward(
    ks: &KernelSet,
    head: RegressionHead,
    target: &ImageBuffer,
    index: Option<&TileIndex>,
) -> Result<(f64, ParamGrads), RenderError> {
    if ks.is_empty() {
        return Err(RenderError::EmptySubset);
    }
    let grid = effective_grid(target, index);
    let prep = prepare(ks);
    let all: Vec<u32> = (0..ks.len() as u32).collect();
    let cull_r2 = index.map_or(f64::INFINITY, |i| i.cull_radius * i.cull_radius);
    let channels = ks.channels;
    let stride = 6 + channels;

    let partials: Vec<(f64, ParamGrads)> = (0..grid.ny)
        .into_par_iter()
        .map(|by| {
            let mut grads = ParamGrads::zeros(ks.len(), channels);
            let mut scratch: Vec<Activation> = Vec::new();
            let mut out = [0.0; MAX_CHANNELS];
            let mut residual = [0.0; MAX_CHANNELS];
            let mut sse = 0.0f64;
            for bx in 0..grid.nx {
                let subset: &[u32] = match index {
                    Some(index) => &index.kernels_of_block[grid.block_id(bx, by)],
                    None => &all,
                };
                let (xs, ys) = grid.block_pixels(bx, by);
                for y in ys {
                    for x in xs.clone() {
                        let (fx, fy) = (x as f64, y as f64);
                        eval_pixel(
                            &prep, subset, fx, fy, cull_r2, head, channels, &mut scratch,
                            &mut out,
                        );
                        for c in 0..channels {
                            let e = out[c] - target.get(x, y, c) as f64;
                            residual[c] = e;
                            sse += e * e;
                        }
                        accumulate_pixel(
                            &prep, &scratch, head, channels, fx, fy, &residual, &out,
                            &mut grads.data, stride,
                        );
                    }
                }
            }
            (sse, grads)
        })
        .collect();

    let mut total = ParamGrads::zeros(ks.len(), channels);
    let mut sse = 0.0f64;
    for (s, g) in &partials {
        sse += s;
        total.add_assign(g);
    }
    let n = (target.pixel_count() * channels) as f64;
    total.scale(2.0 / n);
    Ok((sse / n, total))
}

/// Central finite difference of [`loss`] along one scalar parameter:
/// `(loss(p+h) − loss(p−h)) / (2h)`. Independent of [`backward`]; this is
/// the verification oracle for it.
pub fn fd_oracle(
    ks: &KernelSet,
    head: RegressionHead,
    target: &ImageBuffer,
    index: Option<&TileIndex>,
    coord: ParamCoord,
    h: f64,
) -> Result<f64, RenderError> {
    assert!(h > 0.0);
    let base = ks.get_param(coord);
    let mut probe = ks.clone();
    probe.set_param(coord, base + h);
    let plus = loss(&probe, head, target, index)?;
    probe.set_param(coord, base - h);
    let minus = loss(&probe, head, target, index)?;
    Ok((plus - minus) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_tile_index_with_radius;
    use crate::kernel::{Chol2, Kernel, ParamField, Vec2};
    use rand::{Rng, SeedableRng};

    fn random_target(rng: &mut impl Rng, w: usize, h: usize, channels: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, channels);
        for v in &mut img.data {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    fn random_set(rng: &mut impl Rng, l: usize, w: f64, h: f64, channels: usize) -> KernelSet {
        let kernels = (0..l)
            .map(|_| {
                Kernel::new(
                    Vec2::new(rng.random_range(0.0..w), rng.random_range(0.0..h)),
                    Chol2::new(
                        rng.random_range(1.0..5.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(1.0..5.0),
                    ),
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ],
                )
            })
            .collect();
        KernelSet::new(kernels, channels)
    }

    #[test]
    fn loss_zero_at_perfect_fit() {
        let ks = KernelSet::new(vec![Kernel::isotropic(2.0, 2.0, 3.0, 0.4)], 1);
        let target = ImageBuffer::constant(8, 8, 1, 0.4);
        let l = loss(&ks, RegressionHead::Smoe, &target, None).unwrap();
        assert!(l < 1e-14);
    }

    #[test]
    fn loss_hand_value_constant_offset() {
        let ks = KernelSet::new(vec![Kernel::isotropic(2.0, 2.0, 3.0, 0.0)], 1);
        let target = ImageBuffer::constant(8, 8, 1, 0.1);
        let l = loss(&ks, RegressionHead::Smoe, &target, None).unwrap();
        assert!((l - 0.01).abs() < 1e-9, "{l}");
    }

    #[test]
    fn loss_equivalent_with_infinite_radius_index() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let target = random_target(&mut rng, 32, 32, 3);
        let ks = random_set(&mut rng, 12, 32.0, 32.0, 3);
        let grid = TileGrid::new(32, 32, 16);
        let index = build_tile_index_with_radius(&ks.kernels, &grid, f64::INFINITY);
        for head in [RegressionHead::Smoe, RegressionHead::Rbf] {
            let a = loss(&ks, head, &target, None).unwrap();
            let b = loss(&ks, head, &target, Some(&index)).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_vanish_at_global_minimum() {
        // 0.75 is exact in both f32 and f64.
        let ks = KernelSet::new(vec![Kernel::isotropic(4.0, 4.0, 2.0, 0.75)], 3);
        let target = ImageBuffer::constant(8, 8, 3, 0.75);
        let (l, g) = backward(&ks, RegressionHead::Smoe, &target, None).unwrap();
        assert!(l < 1e-14);
        assert!(g.max_abs() < 1e-12);
    }

    fn check_against_fd(
        ks: &KernelSet,
        head: RegressionHead,
        target: &ImageBuffer,
        skip_log_pi: bool,
    ) {
        let (_, analytic) = backward(ks, head, target, None).unwrap();
        for coord in ks.param_coords() {
            if skip_log_pi && coord.field == ParamField::LogPi {
                continue;
            }
            let fd = fd_oracle(ks, head, target, None, coord, 1e-4).unwrap();
            let idx = coord.kernel * (6 + ks.channels) + coord.field.offset();
            let a = analytic.data[idx];
            let err = (a - fd).abs();
            let tol = 1e-4 * a.abs().max(fd.abs()).max(1e-3);
            assert!(
                err <= tol.max(1e-7),
                "{head:?} {coord:?}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn analytic_matches_finite_differences_smoe() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        for _ in 0..12 {
            let target = random_target(&mut rng, 16, 16, 3);
            let ks = random_set(&mut rng, 3, 16.0, 16.0, 3);
            // RBF ignores log_pi; SMoE differentiates it.
            check_against_fd(&ks, RegressionHead::Smoe, &target, false);
        }
    }

    #[test]
    fn analytic_matches_finite_differences_rbf() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(47);
        for _ in 0..12 {
            let target = random_target(&mut rng, 16, 16, 3);
            let ks = random_set(&mut rng, 3, 16.0, 16.0, 3);
            check_against_fd(&ks, RegressionHead::Rbf, &target, true);
        }
    }

    #[test]
    fn symmetric_configuration_has_mirror_gradients() {
        // Mirror-symmetric target and kernels about x = 7.5 on a 16×16 image.
        let mut target = ImageBuffer::new(16, 16, 1);
        for y in 0..16 {
            for x in 0..16 {
                target.set(x, y, 0, if x < 8 { 0.2 } else { 0.8 });
            }
        }
        let ks = KernelSet::new(
            vec![
                Kernel::isotropic(4.5, 7.5, 3.0, 0.3),
                Kernel::isotropic(10.5, 7.5, 3.0, 0.7),
            ],
            1,
        );
        let (_, g) = backward(&ks, RegressionHead::Smoe, &target, None).unwrap();
        let (d0x, d0y) = g.dmu(0);
        let (d1x, d1y) = g.dmu(1);
        assert!((d0x + d1x).abs() < 1e-9, "{d0x} vs {d1x}");
        assert!((d0y - d1y).abs() < 1e-9);
    }

    #[test]
    fn fd_oracle_quadratic_exactness_in_m() {
        // Loss is exactly quadratic in expert values, so the central
        // difference equals the analytic derivative up to roundoff.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(53);
        let target = random_target(&mut rng, 16, 16, 1);
        let ks = random_set(&mut rng, 4, 16.0, 16.0, 1);
        let (_, analytic) = backward(&ks, RegressionHead::Smoe, &target, None).unwrap();
        for j in 0..4 {
            let coord = ParamCoord { kernel: j, field: ParamField::M(0) };
            let fd = fd_oracle(&ks, RegressionHead::Smoe, &target, None, coord, 1e-3).unwrap();
            assert!((fd - analytic.dm(j, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_oracle_stable_across_step_sizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(59);
        let target = random_target(&mut rng, 16, 16, 1);
        let ks = random_set(&mut rng, 3, 16.0, 16.0, 1);
        let coord = ParamCoord { kernel: 1, field: ParamField::MuX };
        let values: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&h| fd_oracle(&ks, RegressionHead::Smoe, &target, None, coord, h).unwrap())
            .collect();
        let scale = values[0].abs().max(1e-6);
        for pair in values.windows(2) {
            assert!((pair[0] - pair[1]).abs() / scale < 1e-3, "{values:?}");
        }
    }

    #[test]
    fn fd_oracle_zero_at_minimum() {
        let ks = KernelSet::new(vec![Kernel::isotropic(4.0, 4.0, 2.0, 0.7)], 1);
        let target = ImageBuffer::constant(8, 8, 1, 0.7);
        let coord = ParamCoord { kernel: 0, field: ParamField::MuX };
        let fd = fd_oracle(&ks, RegressionHead::Smoe, &target, None, coord, 1e-4).unwrap();
        assert!(fd.abs() < 1e-6);
    }

    #[test]
    fn log_pi_gradients_sum_to_zero_untruncated() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        for _ in 0..20 {
            let target = random_target(&mut rng, 16, 16, 3);
            let ks = random_set(&mut rng, 5, 16.0, 16.0, 3);
            let (_, g) = backward(&ks, RegressionHead::Smoe, &target, None).unwrap();
            let sum: f64 = (0..5).map(|j| g.dlog_pi(j)).sum();
            assert!(sum.abs() < 1e-6, "{sum}");
        }
    }

    #[test]
    fn backward_reproducible_across_thread_counts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(67);
        let target = random_target(&mut rng, 48, 48, 3);
        let ks = random_set(&mut rng, 40, 48.0, 48.0, 3);
        let grid = TileGrid::new(48, 48, 16);
        let index = crate::geometry::build_tile_index(&ks.kernels, &grid);

        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| backward(&ks, RegressionHead::Smoe, &target, Some(&index)).unwrap())
        };
        let (l1, g1) = run(1);
        let (l2, g2) = run(2);
        assert_eq!(l1, l2);
        assert_eq!(g1.data, g2.data);
    }
}
