//! Config-driven benchmark harness.
//!
//! A run sweeps the grid (annotation fraction) x (loss entry) x (seed).
//! Within one master seed, scenes, sparsification plans, and the model
//! init seed are shared by every (fraction, loss) cell, so cells differ
//! only in the factor under study and per-seed comparisons are paired.
//! Each master seed derives its sub-seeds through `mix_seed`, never by
//! reusing raw grid indices, so neighboring seeds do not share streams.

pub mod plot;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{rasterize, sparsify, AnnotationSet, DenseLabelField, Image, SparsificationPlan};
use crate::error::{Error, Result};
use crate::losses::LossParams;
use crate::metrics::MetricReport;
use crate::schedules::ScheduleSpec;
use crate::synth::{generate_scene, SceneConfig};
use crate::trainer::{evaluate, train, EvalConfig, TrainConfig};

pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_HEADER: [&str; 13] = [
    "fraction",
    "loss_name",
    "schedule_name",
    "seed",
    "dice",
    "f1",
    "f1_micro",
    "precision",
    "recall",
    "exclusive_recall",
    "match_radius",
    "wall_seconds",
    "error",
];

const SCENE_SALT: u64 = 0x5343_454e;
const PLAN_SALT: u64 = 0x504c_414e;

/// SplitMix64-style finalizer over `base` offset by `salt`. Used for all
/// seed derivation so streams stay decorrelated even for adjacent inputs.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn default_entry_schedule() -> ScheduleSpec {
    ScheduleSpec::fixed(0.75)
}

/// One loss under test: its parameters plus the threshold schedule it
/// trains with. `total_steps` is overwritten by the harness to match the
/// run length, so configs only choose the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub loss: LossParams,
    #[serde(default = "default_entry_schedule")]
    pub schedule: ScheduleSpec,
    /// Display name; defaults to the variant name.
    #[serde(default)]
    pub name: Option<String>,
}

impl LossEntry {
    pub fn new(loss: LossParams, schedule: ScheduleSpec) -> Self {
        Self { loss, schedule, name: None }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.loss.variant.name().to_string())
    }
}

fn default_bench_epochs() -> usize {
    40
}

fn default_bench_lr() -> f64 {
    crate::trainer::DEFAULT_LEARNING_RATE
}

fn default_bench_momentum() -> f64 {
    crate::trainer::DEFAULT_MOMENTUM
}

fn default_bench_hidden() -> usize {
    crate::trainer::DEFAULT_HIDDEN_WIDTH
}

fn default_bench_kernel() -> usize {
    crate::trainer::DEFAULT_KERNEL_SIZE
}

fn default_schedule_coverage() -> f64 {
    1.0
}

/// Trainer knobs shared by every cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    #[serde(default = "default_bench_epochs")]
    pub epochs: usize,
    #[serde(default = "default_bench_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_bench_momentum")]
    pub momentum: f64,
    #[serde(default = "default_bench_hidden")]
    pub hidden_width: usize,
    #[serde(default = "default_bench_kernel")]
    pub kernel_size: usize,
    /// Ratio of run length to schedule horizon, in (0, 1]. At one the
    /// ramp spans the whole run; below one the run stops partway up the
    /// ramp, so the threshold never reaches `rho_max`.
    #[serde(default = "default_schedule_coverage")]
    pub schedule_coverage: f64,
    /// Weight init and shuffle seed, shared by every cell so the grid
    /// isolates annotation-fraction effects from init luck; scene content
    /// still varies with the master seeds.
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: default_bench_epochs(),
            learning_rate: default_bench_lr(),
            momentum: default_bench_momentum(),
            hidden_width: default_bench_hidden(),
            kernel_size: default_bench_kernel(),
            schedule_coverage: default_schedule_coverage(),
            seed: 0,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("bench_out")
}

/// Full description of a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub n_train_scenes: usize,
    pub n_test_scenes: usize,
    /// Annotation fractions, strictly increasing, each in (0, 1].
    pub fractions: Vec<f64>,
    pub losses: Vec<LossEntry>,
    /// Master seeds; one grid column per seed.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.scene.n_cells_class1 == 0 {
            return Err(Error::InvalidConfig(
                "benchmark scenes need at least one class-1 cell".into(),
            ));
        }
        if self.n_train_scenes == 0 || self.n_test_scenes == 0 {
            return Err(Error::InvalidConfig(
                "need at least one train and one test scene".into(),
            ));
        }
        if self.fractions.is_empty() {
            return Err(Error::InvalidConfig("no fractions listed".into()));
        }
        for pair in self.fractions.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidConfig(format!(
                    "fractions must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        for &f in &self.fractions {
            if !(f.is_finite() && 0.0 < f && f <= 1.0) {
                return Err(Error::InvalidConfig(format!("fraction {f} outside (0, 1]")));
            }
        }
        if self.losses.is_empty() {
            return Err(Error::InvalidConfig("no losses listed".into()));
        }
        for entry in &self.losses {
            entry.loss.validate()?;
            entry.schedule.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("no seeds listed".into()));
        }
        if !(self.train.schedule_coverage.is_finite()
            && 0.0 < self.train.schedule_coverage
            && self.train.schedule_coverage <= 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "schedule_coverage {} outside (0, 1]",
                self.train.schedule_coverage
            )));
        }
        // Reuse the trainer's own validation for the shared knobs.
        let probe = TrainConfig {
            epochs: self.train.epochs,
            loss: self.losses[0].loss.clone(),
            schedule: ScheduleSpec::fixed(0.75),
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            seed: 0,
            hidden_width: self.train.hidden_width,
            kernel_size: self.train.kernel_size,
        };
        probe.validate()?;
        self.eval.validate()
    }
}

/// The stock comparison: cross entropy against sigmoid-annealed exclusive
/// cross entropy on the default scene, five fractions, five seeds.
pub fn default_benchmark() -> RunConfig {
    RunConfig {
        scene: SceneConfig::default(),
        n_train_scenes: 8,
        n_test_scenes: 4,
        fractions: vec![0.1, 0.2, 0.3, 0.4, 1.0],
        losses: vec![
            LossEntry::new(LossParams::ce(), ScheduleSpec::fixed(0.75)),
            LossEntry::new(LossParams::ece(), ScheduleSpec::sigmoid(0.75, 1)),
        ],
        seeds: vec![11, 12, 13, 14, 15],
        train: TrainParams::default(),
        eval: EvalConfig::default(),
        output_dir: default_output_dir(),
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: RunConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

/// Score columns of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchScores {
    pub dice: f64,
    pub f1: f64,
    pub f1_micro: f64,
    pub precision: f64,
    pub recall: f64,
    pub exclusive_recall: f64,
}

impl BenchScores {
    fn from_report(report: &MetricReport) -> Self {
        let (_, _, f1_micro) = MetricReport::prf(
            report.true_positives,
            report.false_positives,
            report.false_negatives,
        );
        Self {
            dice: report.dice,
            f1: report.f1,
            f1_micro,
            precision: report.precision,
            recall: report.recall,
            exclusive_recall: report.exclusive_recall,
        }
    }
}

/// One row of `results.csv`. A cell that diverged carries the error text
/// and no scores; the rest of the grid is unaffected.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub fraction: f64,
    pub loss: String,
    pub schedule: String,
    pub seed: u64,
    pub scores: Option<BenchScores>,
    pub match_radius: f64,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

impl BenchRow {
    /// Equality on everything except wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.fraction == other.fraction
            && self.loss == other.loss
            && self.schedule == other.schedule
            && self.seed == other.seed
            && self.scores == other.scores
            && self.match_radius == other.match_radius
            && self.error == other.error
    }
}

/// Everything derived from one master seed, shared across its cells.
struct SeedContext {
    train_images: Vec<Image<f64>>,
    /// `labels_by_fraction[fraction_idx][image_idx]`
    labels_by_fraction: Vec<Vec<DenseLabelField>>,
    test: Vec<(Image<f64>, AnnotationSet)>,
}

fn build_context(config: &RunConfig, master_seed: u64) -> Result<SeedContext> {
    let scene_base = mix_seed(master_seed, SCENE_SALT);
    let plan_base = mix_seed(master_seed, PLAN_SALT);

    let mut train_images = Vec::with_capacity(config.n_train_scenes);
    let mut labels_by_fraction = vec![Vec::new(); config.fractions.len()];
    for i in 0..config.n_train_scenes {
        let scene = SceneConfig { seed: mix_seed(scene_base, i as u64), ..config.scene.clone() };
        let (image, annotations) = generate_scene::<f64>(&scene)?;
        // Sparsification thins the annotated class only.
        let class1 = AnnotationSet::new(annotations.image_id.clone(), annotations.of_class(1));
        let plan = SparsificationPlan::new(
            config.fractions.clone(),
            mix_seed(plan_base, i as u64),
            class1.len(),
        )?;
        let variants = sparsify(&class1, &plan)?;
        for (fi, variant) in variants.iter().enumerate() {
            labels_by_fraction[fi].push(rasterize(variant, scene.height, scene.width, 1)?);
        }
        train_images.push(image);
    }

    let mut test = Vec::with_capacity(config.n_test_scenes);
    for i in 0..config.n_test_scenes {
        let scene = SceneConfig {
            seed: mix_seed(scene_base, (config.n_train_scenes + i) as u64),
            ..config.scene.clone()
        };
        test.push(generate_scene::<f64>(&scene)?);
    }

    Ok(SeedContext {
        train_images,
        labels_by_fraction,
        test,
    })
}

fn run_cell(
    config: &RunConfig,
    context: &SeedContext,
    fraction_idx: usize,
    loss_idx: usize,
    master_seed: u64,
) -> Result<BenchRow> {
    let entry = &config.losses[loss_idx];
    let started = Instant::now();

    let dataset: Vec<(Image<f64>, DenseLabelField)> = context
        .train_images
        .iter()
        .cloned()
        .zip(context.labels_by_fraction[fraction_idx].iter().cloned())
        .collect();
    let run_steps = (config.train.epochs * config.n_train_scenes) as f64;
    let total_steps = (run_steps / config.train.schedule_coverage).ceil() as u64;
    let train_config = TrainConfig {
        epochs: config.train.epochs,
        loss: entry.loss.clone(),
        schedule: entry.schedule.with_total_steps(total_steps),
        learning_rate: config.train.learning_rate,
        momentum: config.train.momentum,
        seed: config.train.seed,
        hidden_width: config.train.hidden_width,
        kernel_size: config.train.kernel_size,
    };

    let (scores, error) = match train(&dataset, &train_config) {
        Ok((params, _)) => {
            let report = evaluate(&params, &context.test, &config.eval)?;
            (Some(BenchScores::from_report(&report)), None)
        }
        Err(Error::Diverged { step, detail }) => {
            (None, Some(format!("diverged at step {step}: {detail}")))
        }
        Err(other) => return Err(other),
    };

    Ok(BenchRow {
        fraction: config.fractions[fraction_idx],
        loss: entry.label(),
        schedule: entry.schedule.kind.name().to_string(),
        seed: master_seed,
        scores,
        match_radius: config.eval.match_radius,
        wall_seconds: started.elapsed().as_secs_f64(),
        error,
    })
}

/// Runs the whole grid and returns rows ordered by (fraction, loss entry,
/// seed). A diverged cell becomes an error row; any other failure aborts.
pub fn run_grid(config: &RunConfig, workers: usize) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let contexts: Vec<SeedContext> =
        config.seeds.iter().map(|&s| build_context(config, s)).collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for fi in 0..config.fractions.len() {
        for li in 0..config.losses.len() {
            for si in 0..config.seeds.len() {
                cells.push((fi, li, si));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|&(fi, li, si)| run_cell(config, &contexts[si], fi, li, config.seeds[si]))
            .collect()
    })
}

fn float_cell(x: f64) -> String {
    x.to_string()
}

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path.as_ref())?;
    w.write_record(RESULTS_HEADER)?;
    for row in rows {
        let s = row.scores;
        let opt = |f: fn(&BenchScores) -> f64| s.as_ref().map(|s| float_cell(f(s))).unwrap_or_default();
        w.write_record([
            float_cell(row.fraction),
            row.loss.clone(),
            row.schedule.clone(),
            row.seed.to_string(),
            opt(|s| s.dice),
            opt(|s| s.f1),
            opt(|s| s.f1_micro),
            opt(|s| s.precision),
            opt(|s| s.recall),
            opt(|s| s.exclusive_recall),
            float_cell(row.match_radius),
            float_cell(row.wall_seconds),
            row.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<BenchRow>> {
    let path = path.as_ref();
    let fail = |detail: String| Error::Format { path: path.display().to_string(), detail };
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut records = reader.records();

    let header = records
        .next()
        .ok_or_else(|| fail("empty results file".into()))?
        .map_err(Error::Csv)?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(fail(format!(
            "unexpected header {:?}, want {:?}",
            header.iter().collect::<Vec<_>>(),
            RESULTS_HEADER
        )));
    }

    let mut rows = Vec::new();
    for (line, record) in records.enumerate() {
        let record = record.map_err(Error::Csv)?;
        if record.len() != RESULTS_HEADER.len() {
            return Err(fail(format!("row {} has {} fields", line + 2, record.len())));
        }
        let float = |i: usize| -> Result<f64> {
            record[i].parse().map_err(|_| fail(format!("row {}: bad number {:?}", line + 2, &record[i])))
        };
        let score_cells = &record.iter().skip(4).take(6).collect::<Vec<_>>();
        let blank = score_cells.iter().all(|c| c.is_empty());
        let full = score_cells.iter().all(|c| !c.is_empty());
        if !(blank || full) {
            return Err(fail(format!("row {}: partial score columns", line + 2)));
        }
        let scores = if full {
            Some(BenchScores {
                dice: float(4)?,
                f1: float(5)?,
                f1_micro: float(6)?,
                precision: float(7)?,
                recall: float(8)?,
                exclusive_recall: float(9)?,
            })
        } else {
            None
        };
        rows.push(BenchRow {
            fraction: float(0)?,
            loss: record[1].to_string(),
            schedule: record[2].to_string(),
            seed: record[3]
                .parse()
                .map_err(|_| fail(format!("row {}: bad seed {:?}", line + 2, &record[3])))?,
            scores,
            match_radius: float(10)?,
            wall_seconds: float(11)?,
            error: if record[12].is_empty() { None } else { Some(record[12].to_string()) },
        });
    }
    Ok(rows)
}

/// Runs the grid and writes `results.csv` plus the resolved config into
/// the output directory. Returns the results path.
pub fn run_benchmark(config: &RunConfig, workers: usize) -> Result<PathBuf> {
    let rows = run_grid(config, workers)?;
    std::fs::create_dir_all(&config.output_dir)?;
    let results = config.output_dir.join(RESULTS_FILE);
    write_results_csv(&results, &rows)?;
    let resolved = serde_json::to_string_pretty(config)?;
    std::fs::write(config.output_dir.join("config.json"), resolved + "\n")?;
    Ok(results)
}
