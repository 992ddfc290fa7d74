//! Finite-difference verification of analytic gradients.
//!
//! Every loss variant's per-logit gradient and the full scorer backward
//! pass are compared against central differences. Because each loss term
//! depends on exactly one logit, the difference quotient of the batch
//! total is an exact per-pixel oracle up to rounding noise.
//!
//! Sampled logits are nudged away from decision boundaries (the exclusion
//! threshold, Huber kinks) where the loss is not differentiable and a
//! finite difference would straddle a regime change.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DenseLabelField, Image};
use crate::error::Result;
use crate::field::Field2;
use crate::losses::{batch_loss, sigmoid, LossParams, LossVariant};
use crate::model::{backward, forward, init_params, ScorerParams};

/// Knobs for the loss-gradient sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Random fields checked per variant.
    pub trials: usize,
    pub height: usize,
    pub width: usize,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            height: 6,
            width: 6,
            step: 1e-5,
            seed: 0,
            abs_tol: 1e-6,
            rel_tol: 1e-4,
        }
    }
}

/// Outcome of one gradient sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checks: usize,
    pub failures: usize,
    pub max_abs_error: f64,
    /// Description of the worst failing comparison, if any failed.
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn record(&mut self, fd: f64, analytic: f64, abs_tol: f64, rel_tol: f64, context: &str) {
        self.checks += 1;
        let err = (fd - analytic).abs();
        if err > self.max_abs_error {
            self.max_abs_error = err;
        }
        if err > abs_tol.max(rel_tol * fd.abs()) {
            self.failures += 1;
            let detail = format!("{context}: fd {fd} vs analytic {analytic} (err {err:.3e})");
            if self.worst.is_none() {
                self.worst = Some(detail);
            }
        }
    }
}

/// True when a logit is safely away from every regime boundary of the
/// given loss, so a small perturbation cannot flip a branch.
fn safe_logit(z: f64, params: &LossParams, theta: f64) -> bool {
    const MARGIN: f64 = 1e-3;
    let p = sigmoid(z).expect("finite logit");
    if params.variant.uses_exclusion() {
        if (p - theta).abs() < MARGIN {
            return false;
        }
        if params.symmetric_exclusion && (p - (1.0 - theta)).abs() < MARGIN {
            return false;
        }
    }
    if params.variant == LossVariant::Huber {
        // Kinks sit where |p - y| crosses delta, for either label value.
        for y in [0.0, 1.0] {
            if ((p - y).abs() - params.huber_delta).abs() < MARGIN {
                return false;
            }
        }
    }
    true
}

fn sample_logits(
    rng: &mut ChaCha8Rng,
    params: &LossParams,
    theta: f64,
    height: usize,
    width: usize,
) -> Field2<f64> {
    Field2::from_fn(height, width, |_, _| loop {
        let z = rng.random_range(-4.0..4.0);
        if safe_logit(z, params, theta) {
            return z;
        }
    })
}

fn random_labels(rng: &mut ChaCha8Rng, height: usize, width: usize) -> DenseLabelField {
    let mut labels = DenseLabelField::new(height, width);
    for row in 0..height {
        for col in 0..width {
            if rng.random_bool(0.3) {
                labels.promote(row, col);
            }
        }
    }
    labels
}

/// Sweeps one loss configuration: random labels, random boundary-safe
/// logits, random threshold per trial, central difference per pixel.
pub fn check_loss_gradients(params: &LossParams, config: &GradCheckConfig) -> Result<GradCheckReport> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();
    let h = config.step;

    for trial in 0..config.trials {
        let theta = rng.random_range(0.2..0.9);
        let labels = random_labels(&mut rng, config.height, config.width);
        let logits = sample_logits(&mut rng, params, theta, config.height, config.width);
        let analytic = batch_loss(&logits, &labels, params, theta)?.grad_logits;

        for idx in 0..logits.len() {
            let mut plus = logits.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = logits.clone();
            minus.as_mut_slice()[idx] -= h;
            let up = batch_loss(&plus, &labels, params, theta)?.total;
            let down = batch_loss(&minus, &labels, params, theta)?.total;
            let fd = (up - down) / (2.0 * h);
            report.record(
                fd,
                analytic.as_slice()[idx],
                config.abs_tol,
                config.rel_tol,
                &format!("{} trial {trial} pixel {idx}", params.variant),
            );
        }
    }
    Ok(report)
}

/// Runs the sweep for every loss variant with its default parameters.
pub fn check_all_losses(config: &GradCheckConfig) -> Result<Vec<(LossVariant, GradCheckReport)>> {
    let all = [
        LossParams::ce(),
        LossParams::focal(),
        LossParams::huber(),
        LossParams::ece(),
        LossParams::focal_ece(),
    ];
    let mut out = Vec::with_capacity(all.len());
    for params in all {
        let report = check_loss_gradients(&params, config)?;
        out.push((params.variant, report));
    }
    Ok(out)
}

/// End-to-end check of the scorer backward pass: perturb every parameter
/// and compare the loss difference quotient against `backward`.
///
/// Biases are randomized away from zero so ReLU activations sit clear of
/// their kinks for the probe image.
pub fn check_model_gradients(seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let (hidden, kernel, side) = (2usize, 3usize, 10usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Image::from_field(Field2::from_fn(side, side, |_, _| rng.random_range(0.0..1.0)))?;
    let labels = random_labels(&mut rng, side, side);

    let mut params = init_params::<f64>(seed ^ 0x600d, hidden, kernel)?;
    let mut flat = params.to_flat();
    let weight_count = hidden * kernel * kernel;
    for b in flat.iter_mut().skip(weight_count) {
        *b = rng.random_range(-0.3..0.3);
    }
    params = ScorerParams::from_flat(hidden, kernel, &flat)?;

    let loss_params = LossParams::ce();
    let theta = 0.75;
    let out = batch_loss(&forward(&image, &params)?, &labels, &loss_params, theta)?;
    let analytic = backward(&image, &params, &out.grad_logits)?.to_flat();

    let mut report = GradCheckReport::default();
    let h = config.step;
    for idx in 0..flat.len() {
        let eval = |value: f64| -> Result<f64> {
            let mut probe = flat.clone();
            probe[idx] = value;
            let p = ScorerParams::from_flat(hidden, kernel, &probe)?;
            Ok(batch_loss(&forward(&image, &p)?, &labels, &loss_params, theta)?.total)
        };
        let fd = (eval(flat[idx] + h)? - eval(flat[idx] - h)?) / (2.0 * h);
        report.record(fd, analytic[idx], config.abs_tol, config.rel_tol, &format!("param {idx}"));
    }
    Ok(report)
}
