//! `sparseshot`: synthetic scenes, annotation thinning, training,
//! evaluation, benchmark grids, gradient checks, and result plots.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sparseshot::bench::plot::{plot_file, PlotMetric};
use sparseshot::bench::{default_benchmark, load_config, mix_seed, run_benchmark};
use sparseshot::data::{
    load_annotations, load_image, rasterize, save_annotations, save_image, sparsify,
    AnnotationSet, DenseLabelField, Image, PgmFormat, SparsificationPlan,
};
use sparseshot::gradcheck::{check_all_losses, check_model_gradients, GradCheckConfig};
use sparseshot::losses::{LossParams, LossVariant};
use sparseshot::model::{load_checkpoint, save_checkpoint};
use sparseshot::schedules::{ScheduleKind, ScheduleSpec};
use sparseshot::synth::{generate_scene, load_scene_config, SceneConfig};
use sparseshot::trainer::{evaluate, train, EvalConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "sparseshot", version, about = "Sparse-shot cell localisation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes as PGM images plus annotation CSVs.
    Synth {
        /// Scene configuration JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of scenes to generate.
        #[arg(long)]
        n: usize,
        /// Base seed; each scene derives its own stream from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Thin an annotation CSV into nested sparse variants.
    Sparsify {
        /// Full annotation CSV.
        #[arg(long = "in")]
        input: PathBuf,
        /// Kept fractions, strictly increasing, e.g. 0.3,0.6
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a scorer on images with (possibly sparse) annotations.
    Train {
        /// Directory of PGM images.
        #[arg(long)]
        images: PathBuf,
        /// Directory of annotation CSVs named after the image stems.
        #[arg(long)]
        annos: PathBuf,
        /// Loss variant: ce, focal, huber, ece, focal-ece.
        #[arg(long, default_value = "ece")]
        loss: String,
        /// Threshold schedule: fixed, linear, sigmoid, literal-sigmoid.
        #[arg(long, default_value = "sigmoid")]
        schedule: String,
        /// Threshold ceiling.
        #[arg(long, default_value_t = 0.75)]
        rho_max: f64,
        /// Logistic steepness of the sigmoid schedule.
        #[arg(long, default_value_t = 12.0)]
        steepness: f64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3e-5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        /// Hidden filter count.
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        /// Odd convolution kernel size.
        #[arg(long, default_value_t = 5)]
        kernel: usize,
        /// Spread the schedule over this many steps instead of the run
        /// length. Must be at least the run length; longer horizons stop
        /// training partway up the ramp.
        #[arg(long)]
        schedule_steps: Option<u64>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step training log CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against exhaustively annotated images.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        annos: PathBuf,
        /// Detection match radius in pixels.
        #[arg(long, default_value_t = 4.0)]
        radius: f64,
        #[arg(long, default_value_t = 0.5)]
        score_threshold: f64,
        /// Peak suppression distance in pixels.
        #[arg(long, default_value_t = 6.0)]
        min_distance: f64,
        /// Metrics CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a benchmark grid over fractions, losses, and seeds.
    Bench {
        /// Run configuration JSON; the stock CE-vs-ECE grid when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        /// Random fields per loss variant.
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plot a benchmark results CSV as an SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// dice, f1, or exclusive_recall.
        #[arg(long, default_value = "dice")]
        metric: String,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { config, n, seed, out } => cmd_synth(config, n, seed, &out),
        Command::Sparsify { input, fractions, seed, out_dir } => {
            cmd_sparsify(&input, fractions, seed, &out_dir)
        }
        Command::Train {
            images,
            annos,
            loss,
            schedule,
            rho_max,
            steepness,
            epochs,
            seed,
            learning_rate,
            momentum,
            hidden,
            kernel,
            schedule_steps,
            out,
            history,
        } => {
            let config = TrainCommand {
                loss,
                schedule,
                rho_max,
                steepness,
                epochs,
                seed,
                learning_rate,
                momentum,
                hidden,
                kernel,
                schedule_steps,
            };
            cmd_train(&images, &annos, config, &out, history.as_deref())
        }
        Command::Eval { ckpt, images, annos, radius, score_threshold, min_distance, out } => {
            let config = EvalConfig { score_threshold, min_distance, match_radius: radius };
            cmd_eval(&ckpt, &images, &annos, config, &out)
        }
        Command::Bench { config, workers, out } => cmd_bench(config.as_deref(), workers, out),
        Command::Gradcheck { trials, seed } => cmd_gradcheck(trials, seed),
        Command::Plot { input, out, metric } => {
            let metric: PlotMetric = metric.parse()?;
            plot_file(&input, &out, metric)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn cmd_synth(config: Option<PathBuf>, n: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let base = match config {
        Some(path) => load_scene_config(&path)
            .with_context(|| format!("loading scene config {}", path.display()))?,
        None => SceneConfig::default(),
    };
    fs::create_dir_all(out)?;
    for i in 0..n {
        let scene = SceneConfig { seed: mix_seed(seed, i as u64), ..base.clone() };
        let (image, annotations) = generate_scene::<f64>(&scene)?;
        let stem = format!("scene_{i:03}");
        save_image(out.join(format!("{stem}.pgm")), &image, PgmFormat::Binary)?;
        save_annotations(out.join(format!("{stem}.csv")), &annotations)?;
    }
    println!("wrote {n} scenes to {}", out.display());
    Ok(())
}

fn cmd_sparsify(input: &Path, fractions: Vec<f64>, seed: u64, out_dir: &Path) -> Result<()> {
    let full = load_annotations(input)
        .with_context(|| format!("loading annotations {}", input.display()))?;
    let plan = SparsificationPlan::new(fractions, seed, full.len())?;
    let variants = sparsify(&full, &plan)?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .context("input file needs a UTF-8 stem")?;
    fs::create_dir_all(out_dir)?;
    for (fraction, variant) in plan.fractions().iter().zip(&variants) {
        let percent = (fraction * 100.0).round() as u32;
        let path = out_dir.join(format!("{stem}_f{percent:03}.csv"));
        save_annotations(&path, variant)?;
        println!("kept {:>3} of {} -> {}", variant.len(), full.len(), path.display());
    }
    Ok(())
}

struct TrainCommand {
    loss: String,
    schedule: String,
    rho_max: f64,
    steepness: f64,
    epochs: usize,
    seed: u64,
    learning_rate: f64,
    momentum: f64,
    hidden: usize,
    kernel: usize,
    schedule_steps: Option<u64>,
}

/// Pairs every PGM in `images` with the same-stem CSV in `annos`,
/// ordered by file name.
fn load_pairs(images: &Path, annos: &Path) -> Result<Vec<(Image<f64>, AnnotationSet)>> {
    let mut image_paths: Vec<PathBuf> = fs::read_dir(images)
        .with_context(|| format!("reading {}", images.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    image_paths.sort();
    if image_paths.is_empty() {
        bail!("no .pgm images under {}", images.display());
    }
    let mut pairs = Vec::with_capacity(image_paths.len());
    for path in image_paths {
        let image = load_image(&path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).context("non-UTF-8 image name")?;
        let anno_path = annos.join(format!("{stem}.csv"));
        let set = load_annotations(&anno_path)
            .with_context(|| format!("loading annotations {}", anno_path.display()))?;
        pairs.push((image, set));
    }
    Ok(pairs)
}

fn cmd_train(
    images: &Path,
    annos: &Path,
    cmd: TrainCommand,
    out: &Path,
    history_path: Option<&Path>,
) -> Result<()> {
    let variant: LossVariant = cmd.loss.parse()?;
    let kind: ScheduleKind = cmd.schedule.parse()?;
    let pairs = load_pairs(images, annos)?;

    let mut dataset: Vec<(Image<f64>, DenseLabelField)> = Vec::with_capacity(pairs.len());
    for (image, set) in pairs {
        let labels = rasterize(&set, image.height(), image.width(), 1)?;
        dataset.push((image, labels));
    }

    let run_steps = (cmd.epochs * dataset.len()) as u64;
    let total_steps = cmd.schedule_steps.unwrap_or(run_steps).max(1);
    let config = TrainConfig {
        epochs: cmd.epochs,
        loss: LossParams::new(variant),
        schedule: ScheduleSpec {
            kind,
            rho_max: cmd.rho_max,
            steepness: cmd.steepness,
            total_steps,
        },
        learning_rate: cmd.learning_rate,
        momentum: cmd.momentum,
        seed: cmd.seed,
        hidden_width: cmd.hidden,
        kernel_size: cmd.kernel,
    };
    let (params, history) = train(&dataset, &config)?;
    save_checkpoint(out, &params)?;
    if let Some(path) = history_path {
        history.save_csv(path)?;
    }
    println!(
        "trained {} on {} images for {} epochs, final loss {:.6}, saved {}",
        variant,
        dataset.len(),
        cmd.epochs,
        history.final_loss().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    images: &Path,
    annos: &Path,
    config: EvalConfig,
    out: &Path,
) -> Result<()> {
    let params = load_checkpoint::<f64>(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let test = load_pairs(images, annos)?;
    let report = evaluate(&params, &test, &config)?;

    let mut text = String::from("metric,value\n");
    let mut push = |name: &str, value: f64| {
        text.push_str(&format!("{name},{value}\n"));
    };
    push("dice", report.dice);
    push("precision", report.precision);
    push("recall", report.recall);
    push("f1", report.f1);
    push("exclusive_recall", report.exclusive_recall);
    for (class_id, recall) in &report.recall_per_class {
        push(&format!("recall_class_{class_id}"), *recall);
    }
    push("true_positives", report.true_positives as f64);
    push("false_positives", report.false_positives as f64);
    push("false_negatives", report.false_negatives as f64);
    fs::write(out, &text)?;
    print!("{text}");
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_bench(config: Option<&Path>, workers: usize, out: Option<PathBuf>) -> Result<()> {
    let mut run = match config {
        Some(path) => {
            load_config(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => default_benchmark(),
    };
    if let Some(dir) = out {
        run.output_dir = dir;
    }
    let results = run_benchmark(&run, workers)?;
    println!("wrote {}", results.display());
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64) -> Result<()> {
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let config = GradCheckConfig { trials, seed, ..GradCheckConfig::default() };
    let mut all_passed = true;
    for (variant, report) in check_all_losses(&config)? {
        let status = if report.passed() { "ok" } else { "FAILED" };
        println!(
            "{variant:<10} {:>6} checks, max abs err {:.3e}, {status}",
            report.checks, report.max_abs_error
        );
        if let Some(worst) = &report.worst {
            println!("  worst: {worst}");
        }
        all_passed &= report.passed();
    }
    let model = check_model_gradients(seed, &config)?;
    let status = if model.passed() { "ok" } else { "FAILED" };
    println!(
        "{:<10} {:>6} checks, max abs err {:.3e}, {status}",
        "model", model.checks, model.max_abs_error
    );
    if let Some(worst) = &model.worst {
        println!("  worst: {worst}");
    }
    all_passed &= model.passed();

    if !all_passed {
        bail!("gradient check failed");
    }
    Ok(())
}
