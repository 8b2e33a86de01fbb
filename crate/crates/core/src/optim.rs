//! Adam optimizer with per-parameter-group learning rates, exponential
//! center-lr decay, and the global / rasterized training drivers.

use thiserror::Error;

use crate::geometry::build_tile_index;
use crate::grad::{backward, ParamGrads};
use crate::image::ImageBuffer;
use crate::kernel::{KernelSet, MAX_CHANNELS};
use crate::render::{eval_pixel, prepare, Activation, RegressionHead};
use crate::tile::{TileGrid, TileIndex};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("loss diverged (non-finite) at iteration {iteration}")]
    DivergedLoss { iteration: u64 },
    #[error("zero gate mass for kernels {kernels:?}; their experts were left unchanged")]
    ZeroGateMass { kernels: Vec<usize> },
}

/// First/second moment estimates for every scalar parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Learning rates per parameter group.
#[derive(Clone, Copy, Debug)]
pub struct LearningRates {
    pub mu: f64,
    pub chol: f64,
    pub m: f64,
    pub log_pi: f64,
}

/// One Adam update with bias correction; Cholesky diagonals are clamped to
/// the floor afterwards. A zero learning rate freezes a group exactly.
pub fn adam_step(
    state: &mut AdamState,
    ks: &mut KernelSet,
    grads: &ParamGrads,
    lrs: &LearningRates,
) {
    let stride = ks.param_stride();
    assert_eq!(grads.data.len(), ks.param_count());
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (j, kernel) in ks.kernels.iter_mut().enumerate() {
        let o = j * stride;
        let mut update = |offset: usize, lr: f64, value: &mut f64| {
            let g = grads.data[o + offset];
            let m = &mut state.m[o + offset];
            let v = &mut state.v[o + offset];
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *value -= lr * mhat / (vhat.sqrt() + state.epsilon);
        };
        update(0, lrs.mu, &mut kernel.mu.x);
        update(1, lrs.mu, &mut kernel.mu.y);
        update(2, lrs.chol, &mut kernel.chol.l11);
        update(3, lrs.chol, &mut kernel.chol.l21);
        update(4, lrs.chol, &mut kernel.chol.l22);
        update(5, lrs.log_pi, &mut kernel.log_pi);
        for c in 0..ks.channels {
            update(6 + c, lrs.m, &mut kernel.m[c]);
        }
        kernel.chol.clamp_diagonal();
    }
}

/// Full training configuration. Defaults follow the training protocol used
/// throughout: Adam, 10 000 iterations, center lr 0.01 decaying exponentially
/// to 1e-5, 0.001 for covariances and experts, 16-pixel tiles, index refresh
/// every 500 iterations, frozen gate weights.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Initial center learning rate.
    pub lr_mu: f64,
    /// Center learning rate at the final iteration.
    pub lr_mu_end: f64,
    pub lr_chol: f64,
    pub lr_m: f64,
    /// Used only when `learnable_pi` is set.
    pub lr_log_pi: f64,
    pub tile: usize,
    /// Grid origin shift in pixels, each in `[0, tile)`.
    pub grid_offset: (usize, usize),
    /// Tile index rebuild cadence, in iterations.
    pub index_refresh: u64,
    pub seed: u64,
    pub head: RegressionHead,
    pub rasterized: bool,
    pub learnable_pi: bool,
    /// Loss trace sampling cadence, in iterations.
    pub trace_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr_mu: 0.01,
            lr_mu_end: 1e-5,
            lr_chol: 0.001,
            lr_m: 0.001,
            lr_log_pi: 0.001,
            tile: crate::tile::DEFAULT_TILE,
            grid_offset: (0, 0),
            index_refresh: 500,
            seed: 0,
            head: RegressionHead::Smoe,
            rasterized: true,
            learnable_pi: false,
            trace_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn grid_for(&self, img: &ImageBuffer) -> TileGrid {
        TileGrid::with_offset(
            img.width,
            img.height,
            self.tile,
            self.grid_offset.0,
            self.grid_offset.1,
        )
    }
}

/// Center learning rate at step `t`: geometric interpolation from `lr_mu`
/// down to `lr_mu_end` at the final iteration.
pub fn lr_schedule(cfg: &TrainConfig, t: u64) -> f64 {
    debug_assert!(t <= cfg.iterations);
    let frac = t as f64 / cfg.iterations as f64;
    cfg.lr_mu * (cfg.lr_mu_end / cfg.lr_mu).powf(frac)
}

/// One sampled point of the loss trace.
#[derive(Clone, Copy, Debug)]
pub struct TracePoint {
    pub iteration: u64,
    pub mse: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub kernels: KernelSet,
    pub trace: Vec<TracePoint>,
    /// Index built against the final kernels (rasterized runs only).
    pub final_index: Option<TileIndex>,
}

fn mse_to_psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Runs `cfg.iterations` of backward + Adam. Rasterized mode rebuilds the
/// tile index at iteration 0 and then every `index_refresh` iterations.
/// Deterministic for a fixed thread count; reproducible across thread counts
/// thanks to the gradient module's ordered reduction.
pub fn train(
    target: &ImageBuffer,
    cfg: &TrainConfig,
    init: KernelSet,
) -> Result<TrainResult, OptimError> {
    let mut ks = init;
    let grid = cfg.grid_for(target);
    let mut adam = AdamState::new(ks.param_count());
    let mut index: Option<TileIndex> = None;
    let mut trace = Vec::new();
    let stride = ks.param_stride();

    for t in 0..cfg.iterations {
        if cfg.rasterized && (t % cfg.index_refresh == 0 || index.is_none()) {
            index = Some(build_tile_index(&ks.kernels, &grid));
        }
        let (mse, mut grads) = backward(&ks, cfg.head, target, index.as_ref())
            .expect("training kernel set became empty");
        if !mse.is_finite() || !grads.all_finite() {
            return Err(OptimError::DivergedLoss { iteration: t });
        }
        if t % cfg.trace_every == 0 {
            trace.push(TracePoint {
                iteration: t,
                mse,
                psnr_db: mse_to_psnr(mse),
            });
        }
        if !cfg.learnable_pi {
            for j in 0..ks.len() {
                grads.data[j * stride + 5] = 0.0;
            }
        }
        let lrs = LearningRates {
            mu: lr_schedule(cfg, t),
            chol: cfg.lr_chol,
            m: cfg.lr_m,
            log_pi: if cfg.learnable_pi { cfg.lr_log_pi } else { 0.0 },
        };
        adam_step(&mut adam, &mut ks, &grads, &lrs);
    }

    if cfg.rasterized {
        index = Some(build_tile_index(&ks.kernels, &grid));
    }
    let final_mse = crate::grad::loss(&ks, cfg.head, target, index.as_ref())
        .expect("training kernel set became empty");
    if !final_mse.is_finite() {
        return Err(OptimError::DivergedLoss { iteration: cfg.iterations });
    }
    trace.push(TracePoint {
        iteration: cfg.iterations,
        mse: final_mse,
        psnr_db: mse_to_psnr(final_mse),
    });
    Ok(TrainResult {
        kernels: ks,
        trace,
        final_index: index,
    })
}

/// Closed-form re-estimation of the constant experts with gates held fixed:
/// `m̂_j = Σ_r y(x_r)·w_j(x_r) / Σ_k w_j(x_k)`.
///
/// Kernels whose accumulated gate mass is below 1e-9 are reported in the
/// error and their experts left unchanged; all others are updated.
pub fn estimate_expert_means(
    ks: &mut KernelSet,
    target: &ImageBuffer,
    index: Option<&TileIndex>,
) -> Result<(), OptimError> {
    let grid = match index {
        Some(index) => index.grid,
        None => TileGrid::new(target.width, target.height, crate::tile::DEFAULT_TILE),
    };
    let prep = prepare(ks);
    let all: Vec<u32> = (0..ks.len() as u32).collect();
    let cull_r2 = index.map_or(f64::INFINITY, |i| i.cull_radius * i.cull_radius);
    let channels = ks.channels;

    let mut mass = vec![0.0f64; ks.len()];
    let mut weighted = vec![[0.0f64; MAX_CHANNELS]; ks.len()];
    let mut scratch: Vec<Activation> = Vec::new();
    let mut out = [0.0; MAX_CHANNELS];
    for by in 0..grid.ny {
        for bx in 0..grid.nx {
            let subset: &[u32] = match index {
                Some(index) => &index.kernels_of_block[grid.block_id(bx, by)],
                None => &all,
            };
            let (xs, ys) = grid.block_pixels(bx, by);
            for y in ys {
                for x in xs.clone() {
                    eval_pixel(
                        &prep,
                        subset,
                        x as f64,
                        y as f64,
                        cull_r2,
                        RegressionHead::Smoe,
                        channels,
                        &mut scratch,
                        &mut out,
                    );
                    for a in &scratch {
                        let j = a.id as usize;
                        mass[j] += a.w;
                        for c in 0..channels {
                            weighted[j][c] += a.w * target.get(x, y, c) as f64;
                        }
                    }
                }
            }
        }
    }

    let mut starved = Vec::new();
    for j in 0..ks.len() {
        if mass[j] < 1e-9 {
            starved.push(j);
            continue;
        }
        for c in 0..channels {
            ks.kernels[j].m[c] = weighted[j][c] / mass[j];
        }
    }
    if starved.is_empty() {
        Ok(())
    } else {
        Err(OptimError::ZeroGateMass { kernels: starved })
    }
}

/// Variance of an expert estimate: `δ²/M_j + δ_e²/H` — measurement noise
/// shrinks with the gate mass, model noise with the hypothesis count.
/// Diagnostic only.
pub fn estimation_variance(
    gate_mass: f64,
    noise_var: f64,
    model_noise_var: f64,
    hypotheses: usize,
) -> f64 {
    assert!(gate_mass > 0.0 && hypotheses >= 1 && noise_var >= 0.0 && model_noise_var >= 0.0);
    noise_var / gate_mass + model_noise_var / hypotheses as f64
}
