//! Training loop, weak-supervision baseline, and evaluation driver.
//!
//! Training runs plain SGD with momentum over single-image batches. The
//! global step counter starts at 1 and advances once per image visit, so
//! the exclusion schedule is consumed exactly once when `epochs *
//! n_images == schedule.total_steps`. Image order is reshuffled every
//! epoch from a dedicated RNG so runs are reproducible from the seed
//! alone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, DenseLabelField, Image, Membership};
use crate::error::{Error, Result};
use crate::field::Field2;
use crate::losses::{batch_loss, sigmoid, LossParams, LossVariant};
use crate::metrics::{
    class_recall, dice, exclusive_recall, extract_peaks, match_detections, MetricReport,
};
use crate::model::{backward, forward, init_params, sgd_step, OptimizerState, ScorerParams};
use crate::scalar::{real, Real};
use crate::schedules::{threshold_at, ScheduleSpec};

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_LEARNING_RATE: f64 = 3e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_HIDDEN_WIDTH: usize = 8;
pub const DEFAULT_KERNEL_SIZE: usize = 5;
pub const DEFAULT_WEAK_ROUNDS: usize = 3;
pub const DEFAULT_PROMOTION_TAU: f64 = 0.75;

fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

fn default_hidden_width() -> usize {
    DEFAULT_HIDDEN_WIDTH
}

fn default_kernel_size() -> usize {
    DEFAULT_KERNEL_SIZE
}

/// Everything a training run depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub loss: LossParams,
    pub schedule: ScheduleSpec,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
}

impl TrainConfig {
    pub fn new(loss: LossParams, schedule: ScheduleSpec) -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            loss,
            schedule,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            seed: 0,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            kernel_size: DEFAULT_KERNEL_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum.is_finite() && (0.0..=1.0).contains(&self.momentum)) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        if self.hidden_width == 0 {
            return Err(Error::InvalidConfig("hidden width must be at least 1".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        self.loss.validate()?;
        self.schedule.validate()
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub theta: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Step-by-step log of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Writes `step,loss,theta,included,excluded` rows; floats use the
    /// shortest round-trip decimal form.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(["step", "loss", "theta", "included", "excluded"])?;
        for record in &self.records {
            w.serialize(record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is ascii"))
    }
}

/// Stable seed derivation for sub-RNGs; salt 0 returns the seed itself.
pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4553;

fn check_dataset<T: Real>(dataset: &[(Image<T>, DenseLabelField)]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (image, labels) in dataset {
        image.pixels().check_same_shape(labels.labels(), "image vs labels")?;
    }
    Ok(())
}

/// Remaps a mid-step numeric failure to a `Diverged` diagnosis carrying
/// the step at which the run blew up.
fn diverged_at(step: u64) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Diverged { step, detail },
        other => other,
    }
}

/// Trains a scorer from scratch on dense label fields.
///
/// The schedule must cover the whole run: `epochs * n_images` may not
/// exceed `schedule.total_steps`. Divergence (a non-finite loss or
/// parameter) aborts with `Diverged` rather than continuing on garbage.
pub fn train<T: Real>(
    dataset: &[(Image<T>, DenseLabelField)],
    config: &TrainConfig,
) -> Result<(ScorerParams<T>, TrainHistory)> {
    config.validate()?;
    check_dataset(dataset)?;
    let n = dataset.len();
    let total_needed = config.epochs as u64 * n as u64;
    if total_needed > config.schedule.total_steps {
        return Err(Error::InvalidConfig(format!(
            "run needs {} steps but the schedule covers only {}",
            total_needed, config.schedule.total_steps
        )));
    }

    let mut params = init_params::<T>(config.seed, config.hidden_width, config.kernel_size)?;
    let mut opt = OptimizerState::<T>::new(
        config.learning_rate,
        config.momentum,
        config.hidden_width,
        config.kernel_size,
    )?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_SALT));
    let mut history = TrainHistory::default();
    let mut step: u64 = 0;

    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        for &idx in &order {
            step += 1;
            let (image, labels) = &dataset[idx];
            let theta = threshold_at(&config.schedule, step)?;
            let logits = forward(image, &params)?;
            let out = batch_loss(&logits, labels, &config.loss, theta)
                .map_err(diverged_at(step))?;
            let loss = out.total.to_f64().unwrap();
            if !loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("loss = {loss}") });
            }
            let grads = backward(image, &params, &out.grad_logits).map_err(diverged_at(step))?;
            let (next, next_opt) = sgd_step(&params, &grads, &opt).map_err(diverged_at(step))?;
            params = next;
            opt = next_opt;
            history.records.push(TrainRecord {
                step,
                loss,
                theta,
                included: out.included_count,
                excluded: out.excluded_count,
            });
        }
    }
    Ok((params, history))
}

fn default_rounds() -> usize {
    DEFAULT_WEAK_ROUNDS
}

fn default_tau() -> f64 {
    DEFAULT_PROMOTION_TAU
}

/// Self-training baseline configuration. The inner run must use the plain
/// cross entropy loss; pseudo-labels, not the loss, are what make this
/// baseline tolerate sparse annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakSupConfig {
    pub train: TrainConfig,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl WeakSupConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self { train, rounds: DEFAULT_WEAK_ROUNDS, tau: DEFAULT_PROMOTION_TAU }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.loss.variant != LossVariant::Ce {
            return Err(Error::InvalidConfig(format!(
                "weak supervision trains with the ce loss, got {}",
                self.train.loss.variant
            )));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be at least 1".into()));
        }
        if !(self.tau.is_finite() && 0.0 < self.tau && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "promotion threshold must lie in (0, 1), got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Result of a weak-supervision run: final parameters, the last round's
/// history, and the label fields each round trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakSupOutcome<T: Real> {
    pub params: ScorerParams<T>,
    pub history: TrainHistory,
    pub round_labels: Vec<Vec<DenseLabelField>>,
}

/// Promotes assumed-background pixels with probability strictly above
/// `tau` to trusted foreground. Returns how many pixels were promoted.
/// Promotion only ever adds foreground; nothing is demoted.
pub fn promote_confident<T: Real>(
    labels: &mut DenseLabelField,
    probs: &Field2<T>,
    tau: f64,
) -> Result<usize> {
    if !(tau.is_finite() && 0.0 < tau && tau < 1.0) {
        return Err(Error::Range(format!("promotion threshold {tau} outside (0, 1)")));
    }
    probs.check_same_shape(labels.labels(), "probs vs labels")?;
    let t: T = real(tau);
    let mut promoted = 0usize;
    for row in 0..probs.height() {
        for col in 0..probs.width() {
            if labels.membership().get(row, col) == Membership::BackgroundAssumed
                && probs.get(row, col) > t
            {
                labels.promote(row, col);
                promoted += 1;
            }
        }
    }
    Ok(promoted)
}

fn probability_field<T: Real>(logits: &Field2<T>) -> Result<Field2<T>> {
    let mut out = logits.clone();
    for z in out.as_mut_slice() {
        *z = sigmoid(*z)?;
    }
    Ok(out)
}

/// Iterated self-training: train, promote confident pixels into the label
/// fields, and retrain from a fresh per-round seed. With `rounds == 1`
/// this is exactly `train`.
pub fn weak_supervision_train<T: Real>(
    dataset: &[(Image<T>, DenseLabelField)],
    config: &WeakSupConfig,
) -> Result<WeakSupOutcome<T>> {
    config.validate()?;
    check_dataset(dataset)?;

    let mut labels: Vec<DenseLabelField> = dataset.iter().map(|(_, l)| l.clone()).collect();
    let mut round_labels = Vec::with_capacity(config.rounds);
    let mut last: Option<(ScorerParams<T>, TrainHistory)> = None;

    for round in 0..config.rounds {
        if let Some((params, _)) = &last {
            for ((image, _), label) in dataset.iter().zip(labels.iter_mut()) {
                let probs = probability_field(&forward(image, params)?)?;
                promote_confident(label, &probs, config.tau)?;
            }
        }
        round_labels.push(labels.clone());
        let round_config = TrainConfig {
            seed: derive_seed(config.train.seed, round as u64),
            ..config.train.clone()
        };
        let round_data: Vec<(Image<T>, DenseLabelField)> =
            dataset.iter().zip(&labels).map(|((img, _), l)| (img.clone(), l.clone())).collect();
        last = Some(train(&round_data, &round_config)?);
    }

    let (params, history) = last.expect("rounds >= 1");
    Ok(WeakSupOutcome { params, history, round_labels })
}

fn default_score_threshold() -> f64 {
    0.5
}

fn default_min_distance() -> f64 {
    6.0
}

fn default_match_radius() -> f64 {
    4.0
}

/// Detection and matching knobs for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_min_distance")]
    pub min_distance: f64,
    #[serde(default = "default_match_radius")]
    pub match_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: default_score_threshold(),
            min_distance: default_min_distance(),
            match_radius: default_match_radius(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.score_threshold.is_finite() {
            return Err(Error::InvalidConfig("score threshold must be finite".into()));
        }
        if !(self.min_distance.is_finite() && self.min_distance >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "min distance must be nonnegative, got {}",
                self.min_distance
            )));
        }
        if !(self.match_radius.is_finite() && self.match_radius >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "match radius must be nonnegative, got {}",
                self.match_radius
            )));
        }
        Ok(())
    }
}

/// Runs the scorer over a test set and summarizes localisation quality.
///
/// Class 1 is the target. Per image: the probability map is binarized at
/// 0.5 for mask overlap against the rasterized class-1 annotations, and
/// its peaks are matched against class-1 centroids for detection counts.
/// Exclusive recall discounts class-1 recall by the fraction of
/// other-class objects the detector also fires on. The aggregate report
/// carries macro averages plus pooled counts.
pub fn evaluate<T: Real>(
    params: &ScorerParams<T>,
    test: &[(Image<T>, AnnotationSet)],
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut probs = Vec::with_capacity(test.len());
    for (image, _) in test {
        probs.push(probability_field(&forward(image, params)?)?);
    }
    let sets: Vec<&AnnotationSet> = test.iter().map(|(_, s)| s).collect();
    evaluate_scores(&probs, &sets, config)
}

/// Evaluation core over precomputed probability fields, split out so the
/// scoring path is testable with hand-built predictors.
pub(crate) fn evaluate_scores<T: Real>(
    probs: &[Field2<T>],
    annotations: &[&AnnotationSet],
    config: &EvalConfig,
) -> Result<MetricReport> {
    config.validate()?;
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if probs.len() != annotations.len() {
        return Err(Error::Shape(format!(
            "{} probability fields vs {} annotation sets",
            probs.len(),
            annotations.len()
        )));
    }

    let half: T = real(0.5);
    let n = probs.len() as f64;
    let (mut dice_sum, mut p_sum, mut r_sum, mut f1_sum, mut ex_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut tp, mut fp, mut fn_count) = (0usize, 0usize, 0usize);
    let mut per_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();

    for (field, set) in probs.iter().zip(annotations) {
        let (h, w) = (field.height(), field.width());
        let truth = rasterized_mask(set, h, w)?;
        let pred = field.map(|p| p >= half);
        dice_sum += dice(&pred, &truth)?;

        let peaks = extract_peaks(field, config.score_threshold, config.min_distance)?;
        let target = AnnotationSet::new(set.image_id.clone(), set.of_class(1));
        let matched = match_detections(&peaks, &target, config.match_radius)?;
        let (precision, recall, f1) =
            MetricReport::prf(matched.true_positives, matched.false_positives, matched.false_negatives);
        tp += matched.true_positives;
        fp += matched.false_positives;
        fn_count += matched.false_negatives;
        p_sum += precision;
        r_sum += recall;
        f1_sum += f1;

        let mut class_ids: Vec<u32> = set.items.iter().map(|a| a.class_id).collect();
        class_ids.sort_unstable();
        class_ids.dedup();
        for &cid in &class_ids {
            let rec = class_recall(&peaks, &set.of_class(cid), config.match_radius)?;
            per_class.entry(cid).or_default().push(rec);
        }

        let others: Vec<_> =
            set.items.iter().filter(|a| a.class_id != 1).copied().collect();
        let rec_other = class_recall(&peaks, &others, config.match_radius)?;
        ex_sum += exclusive_recall(recall, rec_other)?;
    }

    let recall_per_class = per_class
        .into_iter()
        .map(|(cid, recs)| (cid, recs.iter().sum::<f64>() / recs.len() as f64))
        .collect();

    Ok(MetricReport {
        dice: dice_sum / n,
        precision: p_sum / n,
        recall: r_sum / n,
        f1: f1_sum / n,
        recall_per_class,
        exclusive_recall: ex_sum / n,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_count,
    })
}

fn rasterized_mask(set: &AnnotationSet, height: usize, width: usize) -> Result<Field2<bool>> {
    let raster = crate::data::rasterize(set, height, width, 1)?;
    Ok(raster.labels().map(|l| l == 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Annotation;
    use crate::schedules::ScheduleKind;
    use crate::synth::{generate_scene, SceneConfig};

    fn small_scene(seed: u64) -> (Image<f64>, DenseLabelField, AnnotationSet) {
        let cfg = SceneConfig {
            height: 24,
            width: 24,
            n_cells_class1: 2,
            n_cells_class2: 0,
            radius_range: (2.0, 3.0),
            min_separation: 9.0,
            noise_std: 0.02,
            seed,
            ..SceneConfig::default()
        };
        let (image, anns) = generate_scene::<f64>(&cfg).unwrap();
        let labels = crate::data::rasterize(&anns, 24, 24, 1).unwrap();
        (image, labels, anns)
    }

    fn quick_config(epochs: usize, n_images: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(
            LossParams::ce(),
            ScheduleSpec::fixed(0.75).with_total_steps((epochs * n_images) as u64),
        );
        cfg.epochs = epochs;
        cfg.learning_rate = 3e-4;
        cfg.hidden_width = 3;
        cfg.kernel_size = 3;
        cfg
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let cfg = quick_config(1, 1);
        assert!(matches!(train::<f64>(&[], &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn train_rejects_a_schedule_shorter_than_the_run() {
        let (image, labels, _) = small_scene(1);
        let mut cfg = quick_config(4, 1);
        cfg.schedule = cfg.schedule.with_total_steps(3);
        let err = train(&[(image, labels)], &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn history_steps_and_thetas_follow_the_schedule() {
        let (a_img, a_lab, _) = small_scene(2);
        let (b_img, b_lab, _) = small_scene(3);
        // Plain CE admits every assumed-background pixel, so per record
        // included = pixels - foreground and excluded = 0.
        let bg = [24 * 24 - a_lab.foreground_count(), 24 * 24 - b_lab.foreground_count()];
        let mut cfg = quick_config(3, 2);
        cfg.schedule =
            ScheduleSpec { kind: ScheduleKind::Linear, rho_max: 0.6, steepness: 12.0, total_steps: 6 };
        let (_, history) = train(&[(a_img, a_lab), (b_img, b_lab)], &cfg).unwrap();
        assert_eq!(history.records.len(), 6);
        for (i, record) in history.records.iter().enumerate() {
            let step = i as u64 + 1;
            assert_eq!(record.step, step);
            assert_eq!(record.theta, threshold_at(&cfg.schedule, step).unwrap());
            assert_eq!(record.excluded, 0);
            assert!(bg.contains(&record.included));
        }
        assert!((history.records[0].theta - 0.1).abs() < 1e-15);
        assert_eq!(history.records[5].theta, 0.6);
    }

    #[test]
    fn training_is_deterministic() {
        let (image, labels, _) = small_scene(4);
        let cfg = quick_config(3, 1);
        let data = vec![(image, labels)];
        let (p1, h1) = train(&data, &cfg).unwrap();
        let (p2, h2) = train(&data, &cfg).unwrap();
        assert_eq!(h1, h2);
        for (a, b) in p1.to_flat().iter().zip(p2.to_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (image, labels, _) = small_scene(5);
        let mut cfg = quick_config(25, 1);
        cfg.learning_rate = 5e-4;
        let (_, history) = train(&[(image, labels)], &cfg).unwrap();
        let first = history.records.first().unwrap().loss;
        let last = history.final_loss().unwrap();
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn divergence_is_reported_with_its_step() {
        // A merely huge rate settles into a bounded oscillation once the
        // ReLUs die, never reaching infinity. At f64::MAX the first
        // velocity update (gradient magnitude well above 1) overflows.
        let (image, labels, _) = small_scene(6);
        let mut cfg = quick_config(20, 1);
        cfg.learning_rate = f64::MAX;
        match train(&[(image, labels)], &cfg) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_log_has_the_expected_shape() {
        let history = TrainHistory {
            records: vec![
                TrainRecord { step: 1, loss: 2.5, theta: 0.1, included: 500, excluded: 76 },
                TrainRecord { step: 2, loss: 1.25, theta: 0.2, included: 400, excluded: 176 },
            ],
        };
        let text = history.to_csv_string().unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,loss,theta,included,excluded"));
        assert_eq!(lines.next(), Some("1,2.5,0.1,500,76"));
        assert_eq!(lines.next(), Some("2,1.25,0.2,400,176"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn weak_supervision_requires_the_ce_loss() {
        let mut cfg = WeakSupConfig::new(quick_config(2, 1));
        cfg.train.loss = LossParams::ece();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn single_round_weak_supervision_matches_plain_training() {
        let (image, labels, _) = small_scene(7);
        let data = vec![(image, labels.clone())];
        let train_cfg = quick_config(3, 1);
        let mut weak_cfg = WeakSupConfig::new(train_cfg.clone());
        weak_cfg.rounds = 1;

        let (direct, direct_history) = train(&data, &train_cfg).unwrap();
        let outcome = weak_supervision_train(&data, &weak_cfg).unwrap();
        assert_eq!(outcome.history, direct_history);
        assert_eq!(outcome.round_labels, vec![vec![labels]]);
        for (a, b) in direct.to_flat().iter().zip(outcome.params.to_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn promotion_is_strict_cumulative_and_never_demotes() {
        let mut labels = DenseLabelField::new(4, 4);
        labels.promote(0, 0);

        let mut probs = Field2::filled(4, 4, 0.1f64);
        probs.set(1, 1, 0.9);
        probs.set(2, 2, 0.75); // exactly tau: not promoted
        probs.set(0, 0, 0.0); // already foreground: untouched

        let promoted = promote_confident(&mut labels, &probs, 0.75).unwrap();
        assert_eq!(promoted, 1);
        assert_eq!(labels.membership().get(1, 1), Membership::Foreground);
        assert_eq!(labels.membership().get(2, 2), Membership::BackgroundAssumed);
        assert_eq!(labels.membership().get(0, 0), Membership::Foreground);

        // A second pass with cold probabilities demotes nothing.
        let cold = Field2::filled(4, 4, 0.0f64);
        let promoted = promote_confident(&mut labels, &cold, 0.75).unwrap();
        assert_eq!(promoted, 0);
        assert_eq!(labels.foreground_count(), 2);
    }

    #[test]
    fn promote_rejects_bad_threshold() {
        let mut labels = DenseLabelField::new(2, 2);
        let probs = Field2::filled(2, 2, 0.5f64);
        assert!(promote_confident(&mut labels, &probs, 0.0).is_err());
        assert!(promote_confident(&mut labels, &probs, 1.0).is_err());
    }

    #[test]
    fn weak_supervision_promotes_where_the_model_is_confident() {
        // Bright uniform image, almost everything annotated foreground:
        // the model learns to score high everywhere, so the handful of
        // assumed-background pixels get promoted on the next round.
        let image = Image::from_field(Field2::filled(12, 12, 0.9f64)).unwrap();
        let mut labels = DenseLabelField::new(12, 12);
        for row in 0..12 {
            for col in 0..12 {
                let corner = (row < 2 || row >= 10) && (col < 2 || col >= 10);
                if !corner {
                    labels.promote(row, col);
                }
            }
        }
        let before = labels.foreground_count();

        let mut train_cfg = quick_config(300, 1);
        train_cfg.schedule = ScheduleSpec::fixed(0.75).with_total_steps(300);
        train_cfg.learning_rate = 2e-3;
        train_cfg.momentum = 0.0;
        let mut cfg = WeakSupConfig::new(train_cfg);
        cfg.rounds = 2;

        let outcome = weak_supervision_train(&[(image, labels)], &cfg).unwrap();
        assert_eq!(outcome.round_labels.len(), 2);
        assert_eq!(outcome.round_labels[0][0].foreground_count(), before);
        let after = outcome.round_labels[1][0].foreground_count();
        assert!(after > before, "no promotion happened ({before} -> {after})");

        // Nothing that was foreground in round 1 may be background later.
        let first = outcome.round_labels[0][0].membership();
        let second = outcome.round_labels[1][0].membership();
        for (a, b) in first.as_slice().iter().zip(second.as_slice()) {
            if *a == Membership::Foreground {
                assert_eq!(*b, Membership::Foreground);
            }
        }
    }

    fn disk_probs(h: usize, w: usize, disks: &[(f64, f64, f64)]) -> Field2<f64> {
        Field2::from_fn(h, w, |row, col| {
            let inside = disks.iter().any(|&(cx, cy, r)| {
                let (dx, dy) = (col as f64 - cx, row as f64 - cy);
                dx * dx + dy * dy <= r * r
            });
            if inside {
                1.0
            } else {
                0.0
            }
        })
    }

    fn ann(cx: f64, cy: f64, radius: f64, class_id: u32) -> Annotation {
        Annotation { cx, cy, radius, class_id }
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let set = AnnotationSet::new(
            "img",
            vec![ann(6.0, 6.0, 2.0, 1), ann(16.0, 16.0, 2.0, 1)],
        );
        let probs = disk_probs(24, 24, &[(6.0, 6.0, 2.0), (16.0, 16.0, 2.0)]);
        let report =
            evaluate_scores(&[probs], &[&set], &EvalConfig::default()).unwrap();
        assert_eq!(report.dice, 1.0);
        assert_eq!((report.precision, report.recall, report.f1), (1.0, 1.0, 1.0));
        assert_eq!(report.exclusive_recall, 1.0);
        assert_eq!(
            (report.true_positives, report.false_positives, report.false_negatives),
            (2, 0, 0)
        );
        assert_eq!(report.recall_per_class, vec![(1, 1.0)]);
    }

    #[test]
    fn silent_predictor_scores_zero() {
        let set = AnnotationSet::new("img", vec![ann(6.0, 6.0, 2.0, 1)]);
        let probs = Field2::filled(24, 24, 0.0f64);
        let report =
            evaluate_scores(&[probs], &[&set], &EvalConfig::default()).unwrap();
        assert_eq!(report.dice, 0.0);
        assert_eq!((report.precision, report.recall, report.f1), (0.0, 0.0, 0.0));
        assert_eq!(report.exclusive_recall, 0.0);
        assert_eq!(
            (report.true_positives, report.false_positives, report.false_negatives),
            (0, 0, 1)
        );
    }

    #[test]
    fn firing_on_the_wrong_class_zeroes_exclusive_recall() {
        let set = AnnotationSet::new(
            "img",
            vec![ann(6.0, 6.0, 2.0, 1), ann(17.0, 17.0, 2.0, 2)],
        );
        let probs = disk_probs(24, 24, &[(6.0, 6.0, 2.0), (17.0, 17.0, 2.0)]);
        let report =
            evaluate_scores(&[probs], &[&set], &EvalConfig::default()).unwrap();
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.exclusive_recall, 0.0);
        assert_eq!(report.recall_per_class, vec![(1, 1.0), (2, 1.0)]);
        // The class-2 hit is a false positive for the class-1 detector.
        assert_eq!(report.false_positives, 1);
    }

    #[test]
    fn aggregate_pools_counts_and_averages_scores() {
        let set_a = AnnotationSet::new(
            "a",
            vec![ann(6.0, 6.0, 2.0, 1), ann(16.0, 16.0, 2.0, 1)],
        );
        let set_b = AnnotationSet::new("b", vec![ann(8.0, 8.0, 2.0, 1)]);
        let probs_a = disk_probs(24, 24, &[(6.0, 6.0, 2.0), (16.0, 16.0, 2.0)]);
        let probs_b = Field2::filled(24, 24, 0.0f64);
        let report = evaluate_scores(
            &[probs_a, probs_b],
            &[&set_a, &set_b],
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(report.dice, 0.5);
        assert_eq!(report.recall, 0.5);
        assert_eq!(report.f1, 0.5);
        assert_eq!(
            (report.true_positives, report.false_positives, report.false_negatives),
            (2, 0, 1)
        );
    }

    #[test]
    fn evaluate_rejects_an_empty_test_set() {
        let params = init_params::<f64>(0, 2, 3).unwrap();
        let err = evaluate(&params, &[], &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn evaluate_runs_end_to_end_on_a_trained_model() {
        let (image, labels, anns) = small_scene(8);
        let cfg = quick_config(5, 1);
        let (params, _) = train(&[(image.clone(), labels)], &cfg).unwrap();
        let report = evaluate(&params, &[(image, anns)], &EvalConfig::default()).unwrap();
        assert!((0.0..=1.0).contains(&report.dice));
        assert!((0.0..=1.0).contains(&report.f1));
    }

    #[test]
    fn eval_config_rejects_negative_radius() {
        let cfg = EvalConfig { match_radius: -1.0, ..EvalConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn derive_seed_is_identity_at_salt_zero() {
        assert_eq!(derive_seed(42, 0), 42);
        assert_ne!(derive_seed(42, 1), derive_seed(42, 2));
    }
}
