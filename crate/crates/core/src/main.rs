//! `localdpo` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use localdpo::dataset::{build_dataset, DatasetConfig, DatasetSummary};
use localdpo::io::{
    load_config, load_dataset, read_mask, write_atomic, write_checkpoint, write_dataset, write_mask, LoadMode,
};
use localdpo::mask::{generate_mask_3d, MaskConfig, MotionParams};
use localdpo::models::{TinyConfig, TinyDenoiser};
use localdpo::rng::seeded;
use localdpo::training::{calibrate_beta, metrics_jsonl, run_training, StepMetrics, TrainConfig};
use localdpo::verify::{self, Suite, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "localdpo",
    version,
    about = "Local preference pairs and region-aware DPO at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a pixel-space spatio-temporal mask and write it as STM1.
    GenMask {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Number of contours whose union forms the mask (>= 1).
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        shapes: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Max rotation per frame in radians [default: 0.05].
        #[arg(long)]
        motion_rot: Option<f64>,
        /// Max translation per frame in pixels [default: 2% of the shorter side].
        #[arg(long)]
        motion_trans: Option<f64>,
        /// Draw new contours in every frame instead of moving the first.
        #[arg(long)]
        independent_frames: bool,
    },
    /// Write one grayscale image per mask frame (0 black, 1 white).
    Render {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ImageFormat::Pgm)]
        format: ImageFormat,
    },
    /// Build a preference-tuple dataset directory.
    BuildPairs {
        #[arg(long)]
        count: usize,
        /// Dataset config (JSON, or TOML by extension); built-in defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a tiny denoiser on a dataset directory.
    Train {
        /// Training config (JSON, or TOML by extension).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory written by build-pairs.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics and checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run self-check suites and print a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Pgm,
}

/// Contents of the `train --config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    train: TrainConfig,
    /// Derived from the dataset when omitted.
    model: Option<TinyConfig>,
    model_seed: u64,
    /// Replace `train.weights.beta` with the warmup-calibrated value.
    calibrate_beta: bool,
    /// Tuples failing validation abort the run unless this is `skip`.
    load_mode: LoadMode,
}

const BETA_CANDIDATES: [f64; 10] = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0];

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LOCALDPO_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("LOCALDPO_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenMask {
            frames,
            height,
            width,
            shapes,
            seed,
            out,
            motion_rot,
            motion_trans,
            independent_frames,
        } => {
            let mut cfg = MaskConfig::new(frames, height, width, shapes as usize);
            let default = MotionParams::default_for(height, width);
            cfg.motion = MotionParams {
                max_rotation_per_frame: motion_rot.unwrap_or(default.max_rotation_per_frame),
                max_translation_per_frame: motion_trans.unwrap_or(default.max_translation_per_frame),
            };
            cfg.independent_frames = independent_frames;
            let mask = generate_mask_3d(&cfg, &mut seeded(seed))?;
            write_mask(&out, &mask)?;
            println!("coverage {:.6}", mask.coverage());
        }
        Command::Render {
            mask,
            out_dir,
            format: ImageFormat::Pgm,
        } => {
            let mask = read_mask(&mask)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            for f in 0..mask.frames() {
                let mut pgm = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
                pgm.extend(mask.frame(f).iter().map(|&v| v * 255));
                write_atomic(&out_dir.join(format!("frame_{f:04}.pgm")), &pgm)?;
            }
            println!("wrote {} frames to {}", mask.frames(), out_dir.display());
        }
        Command::BuildPairs {
            count,
            config,
            seed,
            out_dir,
        } => {
            if count == 0 {
                bail!("--count must be >= 1");
            }
            let cfg: DatasetConfig = match &config {
                Some(p) => load_config(p)?,
                None => DatasetConfig::default(),
            };
            let (tuples, schedule) = build_dataset(&cfg, count, seed)?;
            for (i, t) in tuples.iter().enumerate() {
                t.validate().with_context(|| format!("tuple {i}"))?;
            }
            write_dataset(&out_dir, &tuples, &schedule)?;
            let summary = DatasetSummary::new(&tuples, 10);
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train { config, data, out } => train(&config, &data, &out)?,
        Command::Verify { suite, seed } => {
            let report = verify::run(
                suite,
                &VerifyOptions {
                    seed,
                    ..Default::default()
                },
            );
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let mut file: TrainFile = load_config(config)?;
    let loaded = load_dataset(data, file.load_mode)?;
    for r in &loaded.rejected {
        eprintln!("skipped {}: {}", r.path, r.reason);
    }
    let Some(first) = loaded.tuples.first() else {
        bail!("no usable tuples in {}", data.display());
    };
    let schedule = loaded.index.schedule;
    let model_cfg = file.model.clone().unwrap_or_else(|| TinyConfig {
        latent_shape: first.winner.shape(),
        cond_dim: first.conditioning.dim(),
        total_steps: schedule.total_steps(),
        ..TinyConfig::default()
    });
    model_cfg.validate().map_err(anyhow::Error::msg)?;
    let model = TinyDenoiser::init(model_cfg, file.model_seed);

    if file.calibrate_beta {
        let beta = calibrate_beta(&file.train, &loaded.tuples, &model, &schedule, &BETA_CANDIDATES, 5, 3.0)?;
        eprintln!("calibrated beta {beta}");
        file.train.weights.beta = beta;
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let state = run_training(&file.train, &loaded.tuples, model, &schedule, |m| {
        if m.step % 50 == 0 || m.step == 1 {
            eprintln!(
                "step {:>5}  total {:.5}  ra {:.5}  dpo {:.5}  sft {:.3}  margin {:.4}",
                m.step, m.loss_total, m.loss_ra, m.loss_dpo, m.loss_sft, m.mean_margin
            );
        }
    })?;
    write_atomic(&out.join("metrics.jsonl"), metrics_jsonl(&state.history).as_bytes())?;
    write_atomic(&out.join("metrics.svg"), metrics_svg(&state.history).as_bytes())?;
    write_checkpoint(&out.join("model.ckp"), &state.model, file.model_seed, state.step)?;
    write_atomic(&out.join("config.json"), &serde_json::to_vec_pretty(&file)?)?;
    println!("trained {} steps; outputs in {}", state.step, out.display());
    Ok(())
}

/// Two stacked line plots: total loss and mean preference margin.
fn metrics_svg(history: &[StepMetrics]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 200.0;
    let panel = |values: Vec<f64>, title: &str, top: f64| {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = values.len().max(2) - 1;
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = 40.0 + (W - 60.0) * i as f64 / n as f64;
                let y = top + 20.0 + (H - 40.0) * (1.0 - (v - lo) / span);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        format!(
            "<text x=\"40\" y=\"{:.0}\" font-size=\"12\">{title} [{lo:.4}, {hi:.4}]</text>\n\
             <polyline fill=\"none\" stroke=\"black\" stroke-width=\"1\" points=\"{}\"/>\n",
            top + 14.0,
            points.join(" ")
        )
    };
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{}\">\n{}{}</svg>\n",
        2.0 * H,
        panel(history.iter().map(|m| m.loss_total).collect(), "total loss", 0.0),
        panel(history.iter().map(|m| m.mean_margin).collect(), "mean margin", H),
    )
}
