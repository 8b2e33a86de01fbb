//! Noise synthesis, multi-model training over shifted tile grids, per-pixel
//! hypothesis fusion, and the 1D step-edge benchmark.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::image::ImageBuffer;
use crate::optim::{train, TrainConfig};
use crate::render::render_image;
use crate::segment::{InitMethod, SegmentError};

#[derive(Debug, Error, PartialEq)]
pub enum DenoiseError {
    #[error("hypothesis count {0} is not one of 1, 4, 16, 64")]
    InvalidHypothesisCount(usize),
    #[error("all {0} hypothesis models failed to train")]
    AllModelsFailed(usize),
    #[error(transparent)]
    Init(#[from] SegmentError),
}

/// Adds i.i.d. zero-mean Gaussian noise with the given variance (on the
/// `[0,1]²` scale) to every sample. Values are intentionally left unclamped
/// so the zero-mean assumption holds for the trainer.
pub fn add_gaussian_noise(img: &ImageBuffer, variance: f64, seed: u64) -> ImageBuffer {
    assert!(variance >= 0.0);
    if variance == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, variance.sqrt()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in &mut out.data {
        *v += normal.sample(&mut rng) as f32;
    }
    out
}

/// Tile-grid origin shifts for `hypotheses` models: the square lattice
/// `{0, tile/√H, 2·tile/√H, …}²`. `hypotheses` must be a square count whose
/// root divides the tile size evenly.
pub fn offset_lattice(hypotheses: usize, tile: usize) -> Result<Vec<(usize, usize)>, DenoiseError> {
    let side = (hypotheses as f64).sqrt().round() as usize;
    if side * side != hypotheses || side == 0 || tile % side != 0 {
        return Err(DenoiseError::InvalidHypothesisCount(hypotheses));
    }
    let stride = tile / side;
    let mut offsets = Vec::with_capacity(hypotheses);
    for dy in 0..side {
        for dx in 0..side {
            offsets.push((dx * stride, dy * stride));
        }
    }
    Ok(offsets)
}

/// Full-image predictions of independently trained models plus the grid
/// offsets they were trained with.
#[derive(Clone, Debug)]
pub struct HypothesisStack {
    pub outputs: Vec<ImageBuffer>,
    pub offsets: Vec<(usize, usize)>,
}

impl HypothesisStack {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Trains `hypotheses` independent models on the same noisy image, each with
/// its tile grid shifted by one lattice offset and a seed derived from
/// `cfg.seed`, and renders one full-image prediction per model.
///
/// A model that fails to train is skipped with a warning on stderr; the
/// partial stack is returned as long as at least one model survived.
pub fn train_multi_model(
    noisy: &ImageBuffer,
    cfg: &TrainConfig,
    init: &InitMethod,
    kernels: usize,
    hypotheses: usize,
) -> Result<HypothesisStack, DenoiseError> {
    let offsets = offset_lattice(hypotheses, cfg.tile)?;
    let mut stack = HypothesisStack {
        outputs: Vec::with_capacity(hypotheses),
        offsets: Vec::with_capacity(hypotheses),
    };
    for (h, &(ox, oy)) in offsets.iter().enumerate() {
        let seed = derive_seed(cfg.seed, h as u64);
        let init_set = init.build(noisy, kernels, seed)?;
        let mut model_cfg = cfg.clone();
        model_cfg.grid_offset = (ox, oy);
        model_cfg.seed = seed;
        match train(noisy, &model_cfg, init_set) {
            Ok(result) => {
                let grid = model_cfg.grid_for(noisy);
                let prediction =
                    render_image(&result.kernels, cfg.head, &grid, result.final_index.as_ref())
                        .expect("trained model renders");
                stack.outputs.push(prediction);
                stack.offsets.push((ox, oy));
            }
            Err(err) => {
                eprintln!("warning: hypothesis {h} (offset {ox},{oy}) failed: {err}");
            }
        }
    }
    if stack.is_empty() {
        return Err(DenoiseError::AllModelsFailed(hypotheses));
    }
    Ok(stack)
}

fn derive_seed(base: u64, h: u64) -> u64 {
    // splitmix64 finalizer.
    let mut z = base
        .wrapping_add(0x9E3779B97F4A7C15)
        .wrapping_add(h.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-pixel, per-channel arithmetic mean of the hypotheses. The result is
/// left unclamped; clamping happens at export.
pub fn fuse(stack: &HypothesisStack) -> ImageBuffer {
    assert!(!stack.is_empty());
    let first = &stack.outputs[0];
    let mut acc = vec![0.0f64; first.data.len()];
    for out in &stack.outputs {
        assert!(out.same_shape(first));
        for (a, &v) in acc.iter_mut().zip(out.data.iter()) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / stack.len() as f64;
    let mut fused = first.clone();
    for (dst, a) in fused.data.iter_mut().zip(acc.iter()) {
        *dst = (a * inv) as f32;
    }
    fused
}

// ---------------------------------------------------------------------------
// 1D step-edge benchmark
// ---------------------------------------------------------------------------

/// Number of samples in the 1D step signal.
pub const BENCH1D_SAMPLES: usize = 21;

/// Noise standard deviation used when none is given on the command line.
pub const BENCH1D_DEFAULT_NOISE_SD: f64 = 0.13;

/// Default seed for the 1D benchmark.
pub const BENCH1D_DEFAULT_SEED: u64 = 4;

/// Reconstruction quality of the 1D fits against the clean step.
#[derive(Clone, Copy, Debug)]
pub struct Bench1dReport {
    pub noise_sd: f64,
    pub seed: u64,
    /// Soft-gated fit with 2 kernels.
    pub smoe2_psnr_db: f64,
    /// Plain kernel-sum fit with 6 kernels.
    pub rbf6_psnr_db: f64,
    /// Plain kernel-sum fit with 2 kernels (ordering reference).
    pub rbf2_psnr_db: f64,
}

/// The clean 21-sample step: 0.1 left of the midpoint, 0.9 from it on.
pub fn step_signal() -> Vec<f64> {
    (0..BENCH1D_SAMPLES)
        .map(|i| if i < BENCH1D_SAMPLES / 2 { 0.1 } else { 0.9 })
        .collect()
}

/// Builds the noisy step, fits 1D analogues of both heads with gradient
/// descent, and reports reconstruction PSNR against the clean step.
pub fn bench1d(noise_sd: f64, seed: u64) -> Bench1dReport {
    let clean = step_signal();
    let normal = Normal::new(0.0, noise_sd.max(0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f64> = clean
        .iter()
        .map(|&v| if noise_sd > 0.0 { v + normal.sample(&mut rng) } else { v })
        .collect();

    let psnr = |fit: &[f64]| {
        let mse = fit
            .iter()
            .zip(clean.iter())
            .map(|(&a, &b)| {
                let d = a.clamp(0.0, 1.0) - b;
                d * d
            })
            .sum::<f64>()
            / clean.len() as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (1.0 / mse).log10()
        }
    };

    let smoe2 = fit_1d(&noisy, true, 2);
    let rbf6 = fit_1d(&noisy, false, 6);
    let rbf2 = fit_1d(&noisy, false, 2);
    Bench1dReport {
        noise_sd,
        seed,
        smoe2_psnr_db: psnr(&smoe2),
        rbf6_psnr_db: psnr(&rbf6),
        rbf2_psnr_db: psnr(&rbf2),
    }
}

const FIT1D_ITERS: usize = 8000;

/// Fits `k` 1D Gaussian kernels to `samples` with Adam and returns the fitted
/// curve at the sample positions. `gated` selects the softmax-gated head.
fn fit_1d(samples: &[f64], gated: bool, k: usize) -> Vec<f64> {
    let n = samples.len();
    // Deterministic init: evenly spaced centers, bandwidth at half spacing,
    // experts from the nearest sample.
    let spacing = n as f64 / k as f64;
    let mut mu: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) * spacing - 0.5).collect();
    let mut l: Vec<f64> = vec![(0.5 * spacing).max(1.0); k];
    let mut m: Vec<f64> = mu
        .iter()
        .map(|&c| samples[(c.round() as usize).min(n - 1)])
        .collect();

    let mut adam_m = vec![0.0f64; 3 * k];
    let mut adam_v = vec![0.0f64; 3 * k];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (lr_mu0, lr_mu1, lr_l, lr_m) = (0.05f64, 1e-4f64, 0.02f64, 0.02f64);

    let mut weights = vec![0.0f64; k];
    for t in 0..FIT1D_ITERS {
        let mut grad = vec![0.0f64; 3 * k];
        for (i, &target) in samples.iter().enumerate() {
            let x = i as f64;
            let mut prediction = 0.0;
            if gated {
                let mut shift = f64::NEG_INFINITY;
                for j in 0..k {
                    let z = (x - mu[j]) / l[j];
                    weights[j] = -0.5 * z * z;
                    shift = shift.max(weights[j]);
                }
                let mut sum = 0.0;
                for w in weights.iter_mut() {
                    *w = (*w - shift).exp();
                    sum += *w;
                }
                for (j, w) in weights.iter_mut().enumerate() {
                    *w /= sum;
                    prediction += m[j] * *w;
                }
            } else {
                for j in 0..k {
                    let z = (x - mu[j]) / l[j];
                    weights[j] = (-0.5 * z * z).exp();
                    prediction += m[j] * weights[j];
                }
            }
            let e = prediction - target;
            for j in 0..k {
                let w = weights[j];
                let g = if gated { e * (m[j] - prediction) } else { e * m[j] };
                let f = w * g;
                let d = x - mu[j];
                grad[3 * j] += f * d / (l[j] * l[j]);
                grad[3 * j + 1] += f * d * d / (l[j] * l[j] * l[j]);
                grad[3 * j + 2] += e * w;
            }
        }
        let scale = 2.0 / n as f64;
        let lr_mu = lr_mu0 * (lr_mu1 / lr_mu0).powf(t as f64 / FIT1D_ITERS as f64);
        let bc1 = 1.0 - b1.powi(t as i32 + 1);
        let bc2 = 1.0 - b2.powi(t as i32 + 1);
        for j in 0..k {
            for (slot, (param, lr)) in [
                (3 * j, (&mut mu[j], lr_mu)),
                (3 * j + 1, (&mut l[j], lr_l)),
                (3 * j + 2, (&mut m[j], lr_m)),
            ] {
                let g = grad[slot] * scale;
                adam_m[slot] = b1 * adam_m[slot] + (1.0 - b1) * g;
                adam_v[slot] = b2 * adam_v[slot] + (1.0 - b2) * g * g;
                *param -= lr * (adam_m[slot] / bc1) / ((adam_v[slot] / bc2).sqrt() + eps);
            }
            l[j] = l[j].max(1e-3);
        }
    }

    (0..n)
        .map(|i| {
            let x = i as f64;
            if gated {
                let mut shift = f64::NEG_INFINITY;
                let mut lts = vec![0.0; k];
                for j in 0..k {
                    let z = (x - mu[j]) / l[j];
                    lts[j] = -0.5 * z * z;
                    shift = shift.max(lts[j]);
                }
                let mut sum = 0.0;
                let mut num = 0.0;
                for j in 0..k {
                    let w = (lts[j] - shift).exp();
                    sum += w;
                    num += m[j] * w;
                }
                num / sum
            } else {
                (0..k)
                    .map(|j| {
                        let z = (x - mu[j]) / l[j];
                        m[j] * (-0.5 * z * z).exp()
                    })
                    .sum()
            }
        })
        .collect()
}
