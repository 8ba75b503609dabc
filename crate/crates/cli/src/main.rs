//! Command-line front end: train, sample, analyze, eval, toygen.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffsr_core::analysis::{consistency, convergence_curve, psnr, ssim, suggest_cutoff};
use diffsr_core::checkpoint::{load_model, load_training, save_training};
use diffsr_core::config::{CutoffSpec, DataSpec, RunConfig};
use diffsr_core::data::{load_image, load_pairs, save_image, toy_dataset, CropMode, ImagePair};
use diffsr_core::rng::{derive_rng, stream};
use diffsr_core::sampler::{sample, SampleRequest, SampleResult};
use diffsr_core::schedule::NoiseSchedule;
use diffsr_core::training::{resume, TrainState};
use diffsr_core::{Error, ImageTensor, Result};

#[derive(Parser)]
#[command(
    name = "diffsr",
    about = "Diffusion-based image super-resolution with partial sampling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser as described by a config file.
    Train {
        /// Run-config file (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Training checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one image with a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Low-resolution input image (PNG).
        #[arg(long)]
        input: PathBuf,
        /// Where to write the result.
        #[arg(long, default_value = "sr.png")]
        output: PathBuf,
        /// Length of the inference schedule (defaults to the checkpoint's).
        #[arg(long)]
        steps: Option<usize>,
        /// Start the reverse chain at this step instead of running it fully.
        #[arg(long, conflicts_with = "threshold")]
        cutoff: Option<usize>,
        /// Derive the start step from a noise-scale threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Directory for intermediate latents and their manifest.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trace how fast LR and HR latents converge under diffusion and
    /// suggest a sampling cutoff.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Number of image pairs averaged into the curve.
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        /// Record every this-many steps along the schedule.
        #[arg(long)]
        stride: Option<usize>,
        /// Acceptable PSNR gap (dB) between the branches.
        #[arg(long, default_value_t = 0.5)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report mean PSNR / SSIM / consistency of a checkpoint over a
    /// directory of images.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        /// Start step for partial sampling (default: the checkpoint's
        /// cutoff setting).
        #[arg(long, conflicts_with = "threshold")]
        cutoff: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a procedurally generated toy dataset as PNG files.
    Toygen {
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Square image size in pixels.
        #[arg(long)]
        size: usize,
        /// Downsampling factor the set is meant for (size must divide by it).
        #[arg(long)]
        factor: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Sample {
            checkpoint,
            input,
            output,
            steps,
            cutoff,
            threshold,
            trajectory,
            seed,
        } => cmd_sample(
            &checkpoint,
            &input,
            &output,
            steps,
            cutoff,
            threshold,
            trajectory.as_deref(),
            seed,
        ),
        Command::Analyze {
            config,
            out,
            pairs,
            stride,
            tolerance,
            seed,
        } => cmd_analyze(&config, &out, pairs, stride, tolerance, seed),
        Command::Eval {
            checkpoint,
            dir,
            cutoff,
            threshold,
            seed,
        } => cmd_eval(&checkpoint, &dir, cutoff, threshold, seed),
        Command::Toygen {
            n,
            size,
            factor,
            out,
            seed,
        } => cmd_toygen(n, size, factor, &out, seed),
    }
}

/// Load the dataset a config points at.
fn load_dataset(config: &RunConfig) -> Result<Vec<ImagePair>> {
    match &config.data {
        DataSpec::Toy { n, size } => toy_dataset(*n, *size, config.upsample_factor, config.seed),
        DataSpec::Dir(dir) => {
            let mut rng = derive_rng(config.seed, &[stream::CROP]);
            load_pairs(
                dir,
                config.upsample_factor,
                config.crop,
                config.crop_mode,
                &mut rng,
            )
        }
    }
}

fn cmd_train(config_path: &Path, resume_from: Option<&Path>) -> Result<()> {
    let config = RunConfig::from_file(config_path)?;
    config.validate()?;
    let dataset = load_dataset(&config)?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;

    let state = match resume_from {
        Some(path) => {
            let (state, _) = load_training(path)?;
            println!("resuming from step {}", state.step);
            state
        }
        None => TrainState::new(config.denoiser_config(), config.seed)?,
    };

    let log_path = config.out_dir.join("loss.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let train_config = config.train_config();
    let mut io_failure: Option<Error> = None;
    let state = resume(state, &train_config, &dataset, |state, loss| {
        if io_failure.is_some() {
            return;
        }
        let line = format!("step={} loss={}", state.step, loss);
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            io_failure = Some(Error::io(&log_path, e));
            return;
        }
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every as u64 == 0 {
            let path = config.out_dir.join(format!("checkpoint-{}.pdif", state.step));
            if let Err(e) = save_training(&path, state, &config) {
                io_failure = Some(e);
            }
        }
    })?;
    if let Some(e) = io_failure {
        return Err(e);
    }

    let final_path = config.out_dir.join("model.pdif");
    save_training(&final_path, &state, &config)?;
    println!("saved {}", final_path.display());
    Ok(())
}

/// Resolve the reverse-chain start step from the CLI flags: an explicit
/// step, a noise-scale threshold, or full-length sampling when neither is
/// given.
fn resolve_start(
    cutoff: Option<usize>,
    threshold: Option<f64>,
    schedule: &NoiseSchedule,
) -> Result<Option<usize>> {
    match (cutoff, threshold) {
        (Some(_), Some(_)) => Err(Error::Config(
            "--cutoff and --threshold are mutually exclusive".into(),
        )),
        (Some(k), None) => CutoffSpec::Step(k).resolve(schedule).map(Some),
        (None, Some(s)) => CutoffSpec::Threshold(s).resolve(schedule).map(Some),
        (None, None) => Ok(None),
    }
}

fn write_trajectory(dir: &Path, result: &SampleResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = String::new();
    for latent in &result.trajectory {
        let mut frame = latent.data.clone();
        frame.clamp01();
        save_image(&frame, &dir.join(format!("latent-{:04}.png", latent.t)))?;
        manifest.push_str(&format!("t={} scale={}\n", latent.t, latent.sqrt_alpha_bar));
    }
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    steps: Option<usize>,
    cutoff: Option<usize>,
    threshold: Option<f64>,
    trajectory: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let (net, config) = load_model(checkpoint)?;
    let mut schedule_spec = config.infer_schedule;
    if let Some(n) = steps {
        schedule_spec = schedule_spec.with_steps(n);
    }
    let schedule = schedule_spec.build()?;
    let start = resolve_start(cutoff, threshold, &schedule)?;
    match start {
        Some(k) => println!("cutoff K={k}"),
        None => println!("full chain T={}", schedule.len()),
    }

    let lr_image = load_image(input)?;
    let request = SampleRequest {
        lr_image,
        schedule,
        cutoff: start,
        upsample_factor: config.upsample_factor,
        seed,
        record_trajectory: trajectory.is_some(),
    };
    let result = sample(&net, &request)?;
    if let Some(dir) = trajectory {
        write_trajectory(dir, &result)?;
    }
    save_image(&result.image, output)?;
    println!(
        "wrote {} ({} network evaluations)",
        output.display(),
        result.network_evals
    );
    Ok(())
}

fn cmd_analyze(
    config_path: &Path,
    out: &Path,
    pairs: usize,
    stride: Option<usize>,
    tolerance: f64,
    seed: u64,
) -> Result<()> {
    let mut config = RunConfig::from_file(config_path)?;
    config.validate()?;
    if let DataSpec::Toy { size, .. } = config.data {
        config.data = DataSpec::Toy { n: pairs, size };
    }
    let dataset = load_dataset(&config)?;
    let branches: Vec<(ImageTensor, ImageTensor)> = dataset
        .into_iter()
        .take(pairs)
        .map(|p| (p.lr_up, p.hr))
        .collect();

    let schedule = config.infer_schedule.build()?;
    let stride = stride.unwrap_or_else(|| (schedule.len() / 20).max(1));
    let curve = convergence_curve(&branches, &schedule, stride, seed)?;
    std::fs::write(out, curve.to_csv()).map_err(|e| Error::io(out, e))?;
    println!("wrote {}", out.display());

    let k = suggest_cutoff(&curve, tolerance)?;
    println!(
        "suggested cutoff K={k} (sqrt_alpha_bar={}, tolerance {tolerance} dB)",
        schedule.sqrt_alpha_bar(k)?
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    dir: &Path,
    cutoff: Option<usize>,
    threshold: Option<f64>,
    seed: u64,
) -> Result<()> {
    let (net, config) = load_model(checkpoint)?;
    let schedule = config.infer_schedule.build()?;
    let start = match resolve_start(cutoff, threshold, &schedule)? {
        Some(k) => Some(k),
        // Fall back to the checkpoint's own cutoff setting.
        None => Some(config.cutoff.resolve(&schedule)?),
    };

    let mut rng = derive_rng(seed, &[stream::CROP]);
    let pairs = load_pairs(
        dir,
        config.upsample_factor,
        config.crop,
        CropMode::Center,
        &mut rng,
    )?;

    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut consistency_sum = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let request = SampleRequest {
            lr_image: pair.lr.clone(),
            schedule: schedule.clone(),
            cutoff: start,
            upsample_factor: config.upsample_factor,
            seed: seed.wrapping_add(i as u64),
            record_trajectory: false,
        };
        let result = sample(&net, &request)?;
        psnr_sum += psnr(&result.image, &pair.hr)?;
        ssim_sum += ssim(&result.image, &pair.hr)?;
        consistency_sum += consistency(&result.image, &pair.lr, config.upsample_factor)?;
    }
    let n = pairs.len() as f64;
    println!(
        "images={} psnr={} ssim={} consistency={}",
        pairs.len(),
        psnr_sum / n,
        ssim_sum / n,
        consistency_sum / n
    );
    Ok(())
}

fn cmd_toygen(n: usize, size: usize, factor: usize, out: &Path, seed: u64) -> Result<()> {
    let pairs = toy_dataset(n, size, factor, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, pair) in pairs.iter().enumerate() {
        save_image(&pair.hr, &out.join(format!("toy-{i:04}.png")))?;
    }
    println!("wrote {n} images to {}", out.display());
    Ok(())
}
