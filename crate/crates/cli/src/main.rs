use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rsmoe_cli::bench::{run_bench, write_csv, BenchMode};
use rsmoe_cli::config::FileConfig;
use rsmoe_cli::format::fmt_metric;
use rsmoe_core::denoise::{
    add_gaussian_noise, bench1d, fuse, train_multi_model, BENCH1D_DEFAULT_NOISE_SD,
    BENCH1D_DEFAULT_SEED,
};
use rsmoe_core::geometry::build_tile_index;
use rsmoe_core::io::{load_model, load_png, save_model, save_png, ModelFile};
use rsmoe_core::metrics::{psnr, ssim};
use rsmoe_core::optim::{train, TrainConfig};
use rsmoe_core::render::{render_image, RegressionHead};
use rsmoe_core::resample::superres;
use rsmoe_core::segment::{random_init_scaled, InitMethod, INIT_SCALE};
use rsmoe_core::tile::DEFAULT_TILE;
use rsmoe_core::TileGrid;

#[derive(Parser)]
#[command(
    name = "rsmoe",
    version,
    about = "Fit, render, denoise and upsample steered-mixture image models"
)]
struct Cli {
    /// Worker threads (1 guarantees bit-reproducible output).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Plain key=value config file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Smoe,
    Rbf,
}

impl From<HeadArg> for RegressionHead {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Smoe => RegressionHead::Smoe,
            HeadArg::Rbf => RegressionHead::Rbf,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn as_bool(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Random,
    Segment,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a kernel model to a PNG image.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// Total available kernels.
        #[arg(long)]
        kernels: Option<usize>,
        /// Optimizer iterations.
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        /// Tile-rasterized optimization on/off.
        #[arg(long)]
        raster: Option<OnOff>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        /// Segmentation pixel-difference threshold (0–255 scale).
        #[arg(long)]
        seg_threshold: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Tile side length in pixels.
        #[arg(long)]
        tile: Option<usize>,
        /// Isotropic init scale in pixels, or "auto" for width/kernels.
        #[arg(long)]
        init_scale: Option<String>,
        /// Learn per-kernel gate weights (frozen at 1 by default).
        #[arg(long)]
        learnable_pi: bool,
        /// Output model file.
        #[arg(long)]
        model: PathBuf,
        /// Optional loss-trace CSV (iteration,mse,psnr_db).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Render a saved model back to a PNG.
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        raster: Option<OnOff>,
    },
    /// Add synthetic noise to an image, then denoise it with multi-hypothesis
    /// models and report quality against the clean input.
    Denoise {
        #[arg(long)]
        input: PathBuf,
        /// Gaussian noise variance on the [0,1]² scale.
        #[arg(long)]
        noise_var: Option<f64>,
        /// Hypothesis count (1, 4, 16 or 64).
        #[arg(long)]
        hypotheses: Option<usize>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        #[arg(long)]
        seg_threshold: Option<f64>,
        #[arg(long)]
        kernels: Option<usize>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fused output PNG.
        #[arg(long)]
        output: PathBuf,
        /// Report CSV (model,psnr_db,ssim,seconds).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Resample a saved model at a higher resolution, optionally sharpening.
    Superres {
        #[arg(long)]
        model: PathBuf,
        /// Magnification factor (≥ 1).
        #[arg(long)]
        scale: f64,
        /// Bandwidth (variance) scale in (0,1]; 1 disables sharpening.
        #[arg(long, default_value_t = 1.0)]
        sharpen: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print "psnr,ssim" for a pair of images.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// 1D step-edge benchmark: gated vs plain kernel regression on noisy data.
    Bench1d {
        /// Noise standard deviation, or "paper-default".
        #[arg(long, default_value = "paper-default")]
        noise_sd: String,
        #[arg(long, default_value_t = BENCH1D_DEFAULT_SEED)]
        seed: u64,
    },
    /// Sweep kernel pools and modes, emitting a timing/quality CSV.
    Bench {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated pool sizes, e.g. 500,1000,2500.
        #[arg(long, value_delimiter = ',')]
        kernels: Vec<usize>,
        /// Comma-separated modes from {smoe,rbf}-{raster,global}.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: failed to configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::empty(),
    };
    match cli.command {
        Command::Fit {
            input,
            kernels,
            iters,
            head,
            raster,
            init,
            seg_threshold,
            seed,
            tile,
            init_scale,
            learnable_pi,
            model,
            trace,
        } => {
            let img = load_png(&input)?;
            let kernels = file_cfg.resolve(kernels, "kernels", 2000)?;
            let iterations = file_cfg.resolve(iters, "iters", 10_000)?;
            let seed = file_cfg.resolve(seed, "seed", 0)?;
            let tile = file_cfg.resolve(tile, "tile", DEFAULT_TILE)?;
            let seg_threshold = file_cfg.resolve(seg_threshold, "seg-threshold", 10.0)?;
            let head: RegressionHead = head
                .map(RegressionHead::from)
                .unwrap_or(match file_cfg.get("head") {
                    Some("rbf") => RegressionHead::Rbf,
                    _ => RegressionHead::Smoe,
                });
            let rasterized = raster.map(OnOff::as_bool).unwrap_or(
                file_cfg.get("raster").map(|v| v != "off").unwrap_or(true),
            );

            let init_set = match init.unwrap_or(InitArg::Random) {
                InitArg::Random => {
                    let scale = match init_scale.as_deref() {
                        None => INIT_SCALE,
                        Some("auto") => img.width as f64 / kernels as f64,
                        Some(raw) => raw
                            .parse()
                            .with_context(|| format!("--init-scale {raw:?}"))?,
                    };
                    random_init_scaled(&img, kernels, seed, scale)
                }
                InitArg::Segment => InitMethod::Segment {
                    threshold: seg_threshold,
                    min_size: 16,
                    presmooth_sigma: 0.0,
                }
                .build(&img, kernels, seed)?,
            };

            let cfg = TrainConfig {
                iterations,
                head,
                rasterized,
                seed,
                tile,
                learnable_pi,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let result = train(&img, &cfg, init_set)?;
            let elapsed = start.elapsed().as_secs_f64();
            let final_point = result.trace.last().expect("trace has the final loss");
            eprintln!(
                "fit: {} kernels, {} iterations in {:.1}s — final mse {:.3e}, psnr {:.2} dB",
                kernels, iterations, elapsed, final_point.mse, final_point.psnr_db
            );

            save_model(
                &ModelFile::new(head, img.width as u32, img.height as u32, result.kernels),
                &model,
            )?;
            if let Some(trace_path) = trace {
                let mut f = std::fs::File::create(&trace_path)
                    .with_context(|| format!("creating {}", trace_path.display()))?;
                writeln!(f, "iteration,mse,psnr_db")?;
                for p in &result.trace {
                    writeln!(f, "{},{:e},{}", p.iteration, p.mse, fmt_metric(p.psnr_db))?;
                }
            }
            Ok(())
        }
        Command::Render { model, output, raster } => {
            let loaded = load_model(&model)?;
            let grid = TileGrid::new(loaded.width as usize, loaded.height as usize, DEFAULT_TILE);
            let rasterized = raster.map(OnOff::as_bool).unwrap_or(true);
            let index = rasterized.then(|| build_tile_index(&loaded.kernels.kernels, &grid));
            let img = render_image(&loaded.kernels, loaded.head, &grid, index.as_ref())?;
            save_png(&img, &output)?;
            Ok(())
        }
        Command::Denoise {
            input,
            noise_var,
            hypotheses,
            init,
            seg_threshold,
            kernels,
            iters,
            seed,
            output,
            report,
        } => {
            let clean = load_png(&input)?;
            let noise_var = file_cfg.resolve(noise_var, "noise-var", 0.01)?;
            let hypotheses = file_cfg.resolve(hypotheses, "hypotheses", 16)?;
            let kernels = file_cfg.resolve(kernels, "kernels", 1000)?;
            let iterations = file_cfg.resolve(iters, "iters", 2500)?;
            let seed = file_cfg.resolve(seed, "seed", 0)?;
            let seg_threshold = file_cfg.resolve(seg_threshold, "seg-threshold", 10.0)?;

            let noisy = add_gaussian_noise(&clean, noise_var, seed);
            let init = match init.unwrap_or(InitArg::Segment) {
                InitArg::Segment => InitMethod::Segment {
                    threshold: seg_threshold,
                    min_size: 16,
                    presmooth_sigma: 2.0,
                },
                InitArg::Random => InitMethod::random(),
            };
            let cfg = TrainConfig {
                iterations,
                seed,
                head: RegressionHead::Smoe,
                rasterized: true,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let stack = train_multi_model(&noisy, &cfg, &init, kernels, hypotheses)?;
            let fused = fuse(&stack);
            let elapsed = start.elapsed().as_secs_f64();
            save_png(&fused, &output)?;

            let noisy_psnr = psnr(&clean, &noisy)?;
            let fused_psnr = psnr(&clean, &fused)?;
            let fused_ssim = ssim(&clean, &fused)?;
            eprintln!(
                "denoise: {} models in {:.1}s — noisy {:.2} dB, fused {:.2} dB",
                stack.len(),
                elapsed,
                noisy_psnr,
                fused_psnr
            );
            if let Some(report_path) = report {
                let mut f = std::fs::File::create(&report_path)
                    .with_context(|| format!("creating {}", report_path.display()))?;
                writeln!(f, "model,psnr_db,ssim,seconds")?;
                writeln!(
                    f,
                    "noisy,{},{},",
                    fmt_metric(noisy_psnr),
                    fmt_metric(ssim(&clean, &noisy)?)
                )?;
                for (h, out) in stack.outputs.iter().enumerate() {
                    writeln!(
                        f,
                        "h{h},{},{},",
                        fmt_metric(psnr(&clean, out)?),
                        fmt_metric(ssim(&clean, out)?)
                    )?;
                }
                writeln!(
                    f,
                    "fused,{},{},{}",
                    fmt_metric(fused_psnr),
                    fmt_metric(fused_ssim),
                    fmt_metric(elapsed)
                )?;
            }
            Ok(())
        }
        Command::Superres { model, scale, sharpen, output } => {
            let loaded = load_model(&model)?;
            let img = superres(
                &loaded.kernels,
                loaded.head,
                loaded.width as usize,
                loaded.height as usize,
                scale,
                sharpen,
            )?;
            save_png(&img, &output)?;
            Ok(())
        }
        Command::Eval { reference, test } => {
            let a = load_png(&reference)?;
            let b = load_png(&test)?;
            println!("{},{}", fmt_metric(psnr(&a, &b)?), fmt_metric(ssim(&a, &b)?));
            Ok(())
        }
        Command::Bench1d { noise_sd, seed } => {
            let sd = if noise_sd == "paper-default" {
                BENCH1D_DEFAULT_NOISE_SD
            } else {
                noise_sd
                    .parse()
                    .with_context(|| format!("--noise-sd {noise_sd:?}"))?
            };
            let report = bench1d(sd, seed);
            println!(
                "1d step-edge benchmark: 21 samples, noise sd {}, seed {}",
                fmt_metric(report.noise_sd),
                report.seed
            );
            println!("smoe 2 kernels: {} dB", fmt_metric(report.smoe2_psnr_db));
            println!("rbf  6 kernels: {} dB", fmt_metric(report.rbf6_psnr_db));
            println!("rbf  2 kernels: {} dB", fmt_metric(report.rbf2_psnr_db));
            Ok(())
        }
        Command::Bench { input, kernels, modes, iters, seed, output } => {
            if kernels.is_empty() || modes.is_empty() {
                bail!("bench needs --kernels and --modes lists");
            }
            let img = load_png(&input)?;
            let iterations = file_cfg.resolve(iters, "iters", 1000)?;
            let seed = file_cfg.resolve(seed, "seed", 0)?;
            let modes: Vec<BenchMode> = modes
                .iter()
                .map(|m| m.parse())
                .collect::<Result<_>>()?;
            let outcomes = run_bench(&img, &kernels, &modes, iterations, seed)?;
            let rows: Vec<_> = outcomes.into_iter().map(|o| o.row).collect();
            match output {
                Some(path) => {
                    let f = std::fs::File::create(&path)
                        .with_context(|| format!("creating {}", path.display()))?;
                    write_csv(&rows, f)?;
                }
                None => write_csv(&rows, std::io::stdout().lock())?,
            }
            Ok(())
        }
    }
}
