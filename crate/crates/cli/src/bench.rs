//! Benchmark runner behind the `bench` subcommand: short fits across kernel
//! pool sizes and head/optimization modes, reporting timing, quality,
//! per-block sparsity and a FLOPs proxy.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{Context, Result};

use rsmoe_core::geometry::build_tile_index;
use rsmoe_core::metrics::{psnr, ssim};
use rsmoe_core::optim::{train, TrainConfig};
use rsmoe_core::render::{render_image, RegressionHead};
use rsmoe_core::segment::random_init;
use rsmoe_core::{ImageBuffer, KernelSet, TileGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchMode {
    pub head: RegressionHead,
    pub rasterized: bool,
}

impl FromStr for BenchMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, raster) = s
            .split_once('-')
            .with_context(|| format!("mode {s:?} is not <head>-<raster|global>"))?;
        let head = match head {
            "smoe" => RegressionHead::Smoe,
            "rbf" => RegressionHead::Rbf,
            other => anyhow::bail!("unknown head {other:?} (expected smoe or rbf)"),
        };
        let rasterized = match raster {
            "raster" => true,
            "global" => false,
            other => anyhow::bail!("unknown mode {other:?} (expected raster or global)"),
        };
        Ok(Self { head, rasterized })
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = match self.head {
            RegressionHead::Smoe => "smoe",
            RegressionHead::Rbf => "rbf",
        };
        write!(f, "{head}-{}", if self.rasterized { "raster" } else { "global" })
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub kernels: usize,
    pub mode: BenchMode,
    pub iterations: u64,
    pub per_iter_ms: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Mean |K_n| over blocks; equals the pool size for global modes.
    pub avg_kernels_per_block: f64,
    /// Per-pixel multiply-add proxy: 2 × avg kernels per block.
    pub flops_proxy: f64,
}

/// One benchmark run plus its trained model, kept for cross-checks.
pub struct BenchOutcome {
    pub row: BenchRow,
    pub model: KernelSet,
}

pub fn run_bench(
    img: &ImageBuffer,
    pools: &[usize],
    modes: &[BenchMode],
    iterations: u64,
    seed: u64,
) -> Result<Vec<BenchOutcome>> {
    let mut outcomes = Vec::new();
    for &kernels in pools {
        for &mode in modes {
            let init = random_init(img, kernels, seed);
            let cfg = TrainConfig {
                iterations,
                head: mode.head,
                rasterized: mode.rasterized,
                seed,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let result = train(img, &cfg, init)
                .with_context(|| format!("bench fit {kernels} kernels, mode {mode}"))?;
            let elapsed = start.elapsed().as_secs_f64();

            let grid = cfg.grid_for(img);
            let rendered =
                render_image(&result.kernels, mode.head, &grid, result.final_index.as_ref())?;
            let avg = match &result.final_index {
                Some(index) => index.mean_kernels_per_block(),
                None => kernels as f64,
            };
            let row = BenchRow {
                kernels,
                mode,
                iterations,
                per_iter_ms: elapsed * 1000.0 / iterations as f64,
                psnr_db: psnr(img, &rendered)?,
                ssim: ssim(img, &rendered)?,
                avg_kernels_per_block: avg,
                flops_proxy: 2.0 * avg,
            };
            outcomes.push(BenchOutcome { row, model: result.kernels });
        }
    }
    Ok(outcomes)
}

/// Recomputes mean |K_n| from a saved model, as the CSV cross-check.
pub fn mean_kernels_per_block_of(model: &KernelSet, width: usize, height: usize) -> f64 {
    let grid = TileGrid::new(width, height, rsmoe_core::tile::DEFAULT_TILE);
    build_tile_index(&model.kernels, &grid).mean_kernels_per_block()
}

pub const BENCH_CSV_HEADER: &str =
    "kernels,mode,iterations,per_iter_ms,psnr_db,ssim,avg_kernels_per_block,flops_proxy";

pub fn write_csv(rows: &[BenchRow], mut out: impl std::io::Write) -> std::io::Result<()> {
    use crate::format::fmt_metric;
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.kernels,
            r.mode,
            r.iterations,
            fmt_metric(r.per_iter_ms),
            fmt_metric(r.psnr_db),
            fmt_metric(r.ssim),
            fmt_metric(r.avg_kernels_per_block),
            fmt_metric(r.flops_proxy),
        )?;
    }
    Ok(())
}
