//! Command-line front end: training, inference, evaluation, per-block
//! stability reports, recursion-depth sweeps, variant ablations, and the
//! explicit-vs-implicit Euler demo.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime failure, 2 usage
//! error (the last produced by clap before `run` is reached).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::haze::{load_ppm, make_dataset, read_manifest, save_ppm, write_dataset, Image, Pair};
use crate::metrics::{evaluate_pair, metrics_csv, psnr, MetricReport};
use crate::model::{BlockKind, MINetConfig, MINetParams};
use crate::runconfig::{Precision, RunSettings};
use crate::stability::{check_theorem1, euler_compare, euler_csv, DEFAULT_POWER_ITERS};
use crate::tensor::{Scalar, Tensor};
use crate::train::{train_log_csv, train_loop, AdamState, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "minet",
    version,
    about = "Single-image dehazing network built on implicit fixed-point blocks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on generated (or on-disk) hazy/clean pairs
    Train(TrainArgs),
    /// Dehaze one PPM image with a checkpoint
    Infer(InferArgs),
    /// Report per-image PSNR/SSIM over a dataset manifest
    Eval(EvalArgs),
    /// Check the contraction condition of each block at a probe input
    Stability(StabilityArgs),
    /// Measure inference time and PSNR across recursion depths
    Tsweep(TsweepArgs),
    /// Train every block/fusion/attention variant and tabulate held-out PSNR
    Ablate(AblateArgs),
    /// Compare explicit and implicit Euler on a stiff scalar ODE
    Euler(EulerArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stability(a) => cmd_stability(a),
        Command::Tsweep(a) => cmd_tsweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Euler(a) => cmd_euler(a),
    }
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key=value settings file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one settings key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Number of generated training pairs
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Side length of generated square images
    #[arg(long)]
    pub size: Option<usize>,
    /// Trunk channel width
    #[arg(long)]
    pub channels: Option<usize>,
    /// Recursion depth for all three blocks
    #[arg(long = "T", value_name = "T")]
    pub t: Option<usize>,
    /// Training iterations
    #[arg(long)]
    pub iters: Option<usize>,
    /// Seed for data generation and weight init
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train from an existing manifest instead of generating data
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory (resolved config, dataset, checkpoint, log)
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

fn apply_flag_overrides(settings: &mut RunSettings, a: &TrainArgs) {
    if let Some(v) = a.pairs {
        settings.data.pairs = v;
    }
    if let Some(v) = a.size {
        settings.data.size = v;
    }
    if let Some(v) = a.channels {
        settings.model.trunk_channels = v;
    }
    if let Some(v) = a.t {
        settings.model.recursions = [v; 3];
    }
    if let Some(v) = a.iters {
        settings.train.iters = v;
    }
    if let Some(v) = a.seed {
        settings.train.seed = v;
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut settings = RunSettings::resolve(a.config.as_deref(), &a.set)?;
    apply_flag_overrides(&mut settings, &a);
    settings.model.validate()?;
    settings.train.schedule.validate()?;

    fs::create_dir_all(&a.out)?;
    let resolved = settings.to_text();
    fs::write(a.out.join("resolved.cfg"), &resolved)?;
    print!("{resolved}");

    let pairs = match &a.manifest {
        Some(path) => load_pairs(path)?,
        None => {
            let d = &settings.data;
            let pairs = make_dataset(
                settings.train.seed,
                d.pairs,
                d.size,
                d.size,
                (d.beta_min, d.beta_max),
                (d.airlight_min, d.airlight_max),
            )?;
            let dir = a.out.join("data");
            fs::create_dir_all(&dir)?;
            write_dataset(&dir, &pairs)?;
            pairs
        }
    };

    match settings.precision {
        Precision::F64 => train_typed::<f64>(&settings, &pairs, &a.out),
        Precision::F32 => train_typed::<f32>(&settings, &pairs, &a.out),
    }
}

fn train_typed<T: Scalar>(settings: &RunSettings, pairs: &[Pair], out: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.train.seed);
    let mut params: MINetParams<T> = MINetParams::new(&mut rng, settings.model.clone())?;
    let mut adam = AdamState::new(&params);

    let ckpt = out.join("checkpoint.minw");
    let mut cfg = settings.train.clone();
    cfg.checkpoint_path = Some(ckpt.clone());

    let rows = train_loop(&mut params, &mut adam, pairs, &cfg)?;
    save_checkpoint(&ckpt, &params, Some(&adam))?;
    fs::write(out.join("train_log.csv"), train_log_csv(&rows))?;

    match rows.last() {
        Some(r) => println!(
            "iteration {}: loss {:.6e}, batch psnr {:.2} dB, {:.1}s elapsed",
            r.iteration, r.loss, r.psnr_batch, r.seconds
        ),
        None => println!("no iterations requested; wrote the initial weights"),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn load_pairs(manifest: &Path) -> Result<Vec<Pair>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            Ok(Pair {
                hazy: load_ppm(&e.hazy_path)?,
                clean: load_ppm(&e.clean_path)?,
                beta: e.beta,
                airlight: e.airlight,
                depth_kind: e.depth_kind,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- infer

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Hazy input (binary PPM)
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the dehazed PPM
    #[arg(long)]
    pub output: PathBuf,
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (params, _) = load_checkpoint::<f64>(&a.checkpoint)?;
    let img = load_ppm(&a.input)?;

    let padded = prepare_input(&img, params.config.downsample);
    let (y, traces) = params.infer(&padded.to_tensor::<f64>())?;
    let out = Image::from_tensor(&y)?.crop(img.height, img.width)?;
    save_ppm(&out, &a.output)?;

    for (i, trace) in traces.iter().enumerate() {
        let joined: Vec<String> = trace.residuals.iter().map(|r| format!("{r:.3e}")).collect();
        println!("block{} residuals: {}", i + 1, joined.join(" "));
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

/// The stride-2 encoder needs even dims; mirror-pad odd inputs and tell the
/// user, since the output is cropped back to the original size.
fn prepare_input(img: &Image, downsample: bool) -> Image {
    if downsample && (img.height % 2 == 1 || img.width % 2 == 1) {
        let padded = img.reflect_pad_to_even();
        eprintln!(
            "note: {}x{} input padded to {}x{} for the stride-2 encoder; output cropped back",
            img.height, img.width, padded.height, padded.width
        );
        padded
    } else {
        img.clone()
    }
}

fn infer_image(params: &MINetParams<f64>, img: &Image) -> Result<Image> {
    let padded = prepare_input(img, params.config.downsample);
    let (y, _) = params.infer(&padded.to_tensor::<f64>())?;
    Image::from_tensor(&y)?.crop(img.height, img.width)
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to score (omit with --identity)
    #[arg(long, required_unless_present = "identity", conflicts_with = "identity")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Score the identity mapping (output = hazy input) as a baseline
    #[arg(long)]
    pub identity: bool,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let entries = read_manifest(&a.manifest)?;
    if entries.is_empty() {
        return Err(Error::InvalidArgument("manifest lists no pairs".into()));
    }
    let loaded = entries
        .iter()
        .map(|e| {
            let name = e
                .hazy_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.hazy_path.display().to_string());
            Ok((name, load_ppm(&e.hazy_path)?, load_ppm(&e.clean_path)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let model = match &a.checkpoint {
        Some(path) => Some(load_checkpoint::<f64>(path)?.0),
        None => None,
    };

    let rows = loaded
        .par_iter()
        .map(|(name, hazy, clean)| {
            let output = match &model {
                Some(m) => infer_image(m, hazy)?,
                None => hazy.clone(),
            };
            Ok((name.clone(), evaluate_pair(&output, clean)?))
        })
        .collect::<Result<Vec<(String, MetricReport)>>>()?;

    write_or_print(a.out.as_deref(), &metrics_csv(&rows))
}

// ---------------------------------------------------------------- stability

#[derive(Args, Debug)]
pub struct StabilityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Probe image (defaults to a seeded random probe)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Probe side length when no input image is given
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Power-iteration budget per block
    #[arg(long, default_value_t = DEFAULT_POWER_ITERS)]
    pub iters: usize,
    /// Write the per-block growth histories as CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_stability(a: StabilityArgs) -> Result<()> {
    let (params, _) = load_checkpoint::<f64>(&a.checkpoint)?;
    let img = match &a.input {
        Some(p) => load_ppm(p)?,
        None => random_image(a.seed, a.size)?,
    };
    let img = prepare_input(&img, params.config.downsample);
    let taps = params.feature_taps(&img.to_tensor::<f64>())?;
    let eta = params.config.eta;

    let mut csv = String::from("block,step,norm_ratio\n");
    for (i, tap) in taps.iter().take(3).enumerate() {
        let f = |v: &Tensor<f64>| params.eval_block_field(i, v);
        let verdict = check_theorem1(&f, tap, eta, a.iters)?;
        println!(
            "block{}: rho {:.4}  threshold {:.4}  margin {:+.4}  {}{}",
            i + 1,
            verdict.rho,
            verdict.threshold,
            verdict.margin,
            if verdict.stable { "stable" } else { "unstable" },
            if verdict.indeterminate {
                " (marginal, do not trust the verdict)"
            } else {
                ""
            },
        );
        for (k, r) in verdict.estimate.growth_history.iter().enumerate() {
            csv.push_str(&format!("{},{k},{r}\n", i + 1));
        }
    }
    if let Some(p) = &a.out {
        fs::write(p, csv)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn random_image(seed: u64, size: usize) -> Result<Image> {
    if size == 0 {
        return Err(Error::InvalidArgument("probe size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..3 * size * size).map(|_| rng.gen()).collect();
    Image::new(size, size, pixels)
}

// ---------------------------------------------------------------- tsweep

#[derive(Args, Debug)]
pub struct TsweepArgs {
    /// Comma-separated recursion depths, e.g. 1,4,8,12
    #[arg(long = "ts", value_delimiter = ',')]
    pub ts: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluation pairs timed at each depth
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    /// Timing passes; the fastest is reported
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_tsweep(a: TsweepArgs) -> Result<()> {
    if a.ts.is_empty() {
        return Err(Error::InvalidArgument("empty T list".into()));
    }
    if a.pairs == 0 || a.repeats == 0 {
        return Err(Error::InvalidArgument(
            "pairs and repeats must be at least 1".into(),
        ));
    }
    let pairs = make_dataset(a.seed, a.pairs, a.size, a.size, (0.4, 1.6), (0.7, 1.0))?;

    let mut csv = String::from("T,psnr_db,seconds_per_image\n");
    for &t in &a.ts {
        let mut config = MINetConfig::default();
        config.trunk_channels = a.channels;
        config.rca_reduction = reduction_for(a.channels);
        config.recursions = [t; 3];
        config.validate()?;

        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let params: MINetParams<f64> = MINetParams::new(&mut rng, config)?;

        // warmup pass doubles as the PSNR pass; timing reports the fastest
        // of `repeats` full sweeps to damp scheduler noise
        let outputs = pairs
            .iter()
            .map(|p| infer_image(&params, &p.hazy))
            .collect::<Result<Vec<_>>>()?;
        let mut best = f64::INFINITY;
        for _ in 0..a.repeats {
            let start = Instant::now();
            for p in &pairs {
                infer_image(&params, &p.hazy)?;
            }
            best = best.min(start.elapsed().as_secs_f64() / pairs.len() as f64);
        }
        let score = mean_psnr(&outputs, &pairs);
        csv.push_str(&format!("{t},{score},{best}\n"));
        eprintln!("T={t}: psnr {score:.2} dB, {best:.4} s/image");
    }
    write_or_print(a.out.as_deref(), &csv)
}

/// Largest divisor of `channels` not exceeding the default reduction of 16.
fn reduction_for(channels: usize) -> usize {
    (1..=16.min(channels))
        .rev()
        .find(|r| channels % r == 0)
        .unwrap_or(1)
}

fn mean_psnr(outputs: &[Image], pairs: &[Pair]) -> f64 {
    let sum: f64 = outputs
        .iter()
        .zip(pairs)
        .map(|(o, p)| psnr(o, &p.clean).map(|v| v.db()).unwrap_or(f64::NAN))
        .sum();
    sum / outputs.len() as f64
}

// ---------------------------------------------------------------- ablate

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training pairs
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    /// Extra held-out pairs scored after training
    #[arg(long, default_value_t = 4)]
    pub holdout: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Recursion depth for all three blocks
    #[arg(long = "T", value_name = "T", default_value_t = 4)]
    pub t: usize,
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    if a.pairs == 0 || a.holdout == 0 {
        return Err(Error::InvalidArgument(
            "pairs and holdout must be at least 1".into(),
        ));
    }
    let all = make_dataset(
        a.seed,
        a.pairs + a.holdout,
        a.size,
        a.size,
        (0.4, 1.6),
        (0.7, 1.0),
    )?;
    let (train_set, held) = all.split_at(a.pairs);

    let mut csv = String::from("variant,block,mlf,rca,params,psnr_db\n");
    for kind in [BlockKind::Implicit, BlockKind::ResblockOne, BlockKind::ResblockT] {
        for (use_mlf, use_rca) in [(true, true), (true, false), (false, true), (false, false)] {
            let mut config = MINetConfig::default();
            config.trunk_channels = a.channels;
            config.rca_reduction = reduction_for(a.channels);
            config.recursions = [a.t; 3];
            config.block_kind = kind;
            config.use_mlf = use_mlf;
            config.use_rca = use_rca;
            config.validate()?;

            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut params: MINetParams<f64> = MINetParams::new(&mut rng, config)?;
            let n_params = params.param_count();
            let mut adam = AdamState::new(&params);
            let mut tcfg = TrainConfig {
                iters: a.iters,
                seed: a.seed,
                log_every: a.iters.max(1),
                ..TrainConfig::default()
            };
            tcfg.checkpoint_path = None;
            train_loop(&mut params, &mut adam, train_set, &tcfg)?;

            let outputs = held
                .par_iter()
                .map(|p| infer_image(&params, &p.hazy))
                .collect::<Result<Vec<_>>>()?;
            let score = mean_psnr(&outputs, held);

            let variant = format!(
                "{}{}{}",
                kind.as_str(),
                if use_mlf { "+mlf" } else { "" },
                if use_rca { "+rca" } else { "" },
            );
            csv.push_str(&format!(
                "{variant},{},{use_mlf},{use_rca},{n_params},{score}\n",
                kind.as_str()
            ));
            eprintln!("{variant}: {n_params} params, holdout psnr {score:.2} dB");
        }
    }
    write_or_print(a.out.as_deref(), &csv)
}

// ---------------------------------------------------------------- euler

#[derive(Args, Debug)]
pub struct EulerArgs {
    /// ODE coefficient; strongly negative is the stiff regime
    #[arg(long, default_value_t = -50.0, allow_negative_numbers = true)]
    pub lambda: f64,
    /// Step size
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Initial value
    #[arg(long, default_value_t = 1.0)]
    pub x0: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_euler(a: EulerArgs) -> Result<()> {
    let (explicit, implicit) = euler_compare(a.lambda, a.eta, a.steps, a.x0)?;
    write_or_print(a.out.as_deref(), &euler_csv(&explicit, &implicit))
}

// ---------------------------------------------------------------- shared

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, text)?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
