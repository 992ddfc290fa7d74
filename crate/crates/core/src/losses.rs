//! Pixel-wise training losses for sparsely annotated images.
//!
//! Under sparse annotation every unannotated pixel is *assumed* background,
//! so the standard cross-entropy penalty `-log(1 - p)` actively punishes
//! correct predictions on unannotated objects. The exclusive variants gate
//! that background term with a threshold `theta`: an assumed-background
//! pixel contributes only while its predicted probability stays below
//! `theta`, and confident predictions above it are excluded from the loss
//! (zero contribution, exactly zero gradient). Annealing `theta` upward
//! over training (see [`crate::schedules`]) first lets the scorer learn
//! from trusted foreground alone, then gradually re-admits background
//! supervision for pixels the scorer is not already confident about.
//!
//! Loss menu, per pixel with probability `p = sigmoid(z)`:
//!
//! | variant     | foreground term | assumed-background term           |
//! |-------------|-----------------|-----------------------------------|
//! | `Ce`        | `-log p`        | `-log(1-p)`                       |
//! | `Focal`     | `u(p)`          | `u(1-p)`                          |
//! | `Huber`     | `h(p - 1)`      | `h(p)`                            |
//! | `Ece`       | `-log p`        | `-log(1-p)` if `p < theta` else 0 |
//! | `FocalEce`  | `-log p`        | `u(1-p)` if `p < theta` else 0    |
//!
//! with the focal weight `u(p) = -alpha * (1-p)^gamma * log(p)` and `h` the
//! Huber (smooth-L1) penalty on the probability residual. All totals are
//! sums over included pixel terms, reduced pairwise so they are bit-stable.

use crate::data::{DenseLabelField, Membership};
use crate::error::{Error, Result};
use crate::field::Field2;
use crate::scalar::{pairwise_sum, real, Real};
use serde::{Deserialize, Serialize};

/// Which per-pixel penalty to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ce,
    Focal,
    Huber,
    Ece,
    FocalEce,
}

impl LossVariant {
    /// True for the variants that exclude confident background pixels.
    pub fn uses_exclusion(self) -> bool {
        matches!(self, LossVariant::Ece | LossVariant::FocalEce)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::Focal => "focal",
            LossVariant::Huber => "huber",
            LossVariant::Ece => "ece",
            LossVariant::FocalEce => "focal_ece",
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossVariant::Ce),
            "focal" => Ok(LossVariant::Focal),
            "huber" => Ok(LossVariant::Huber),
            "ece" => Ok(LossVariant::Ece),
            "focal_ece" | "focal-ece" => Ok(LossVariant::FocalEce),
            other => Err(Error::InvalidConfig(format!("unknown loss variant {other:?}"))),
        }
    }
}

fn default_alpha() -> f64 {
    0.25
}
fn default_gamma() -> f64 {
    2.0
}
fn default_huber_delta() -> f64 {
    1.0
}

/// Loss hyperparameters. `alpha`/`gamma` only affect the focal variants,
/// `huber_delta` only the Huber baseline, and `symmetric_exclusion` only
/// the exclusive variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub variant: LossVariant,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_huber_delta")]
    pub huber_delta: f64,
    /// When set, also exclude assumed-background pixels with
    /// `p < 1 - theta`, dropping already-confident negatives.
    #[serde(default)]
    pub symmetric_exclusion: bool,
}

impl LossParams {
    pub fn new(variant: LossVariant) -> Self {
        Self {
            variant,
            alpha: default_alpha(),
            gamma: default_gamma(),
            huber_delta: default_huber_delta(),
            symmetric_exclusion: false,
        }
    }

    pub fn ce() -> Self {
        Self::new(LossVariant::Ce)
    }

    pub fn focal() -> Self {
        Self::new(LossVariant::Focal)
    }

    pub fn huber() -> Self {
        Self::new(LossVariant::Huber)
    }

    pub fn ece() -> Self {
        Self::new(LossVariant::Ece)
    }

    pub fn focal_ece() -> Self {
        Self::new(LossVariant::FocalEce)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "huber_delta must be positive, got {}",
                self.huber_delta
            )));
        }
        Ok(())
    }
}

/// Value and gradient of one batch-loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    /// Sum over included pixel terms.
    pub total: T,
    /// Gradient of `total` with respect to each logit; exactly zero at
    /// excluded pixels.
    pub grad_logits: Field2<T>,
    /// Assumed-background pixels that entered the loss.
    pub included_count: usize,
    /// Assumed-background pixels excluded by the threshold.
    pub excluded_count: usize,
}

/// Numerically stable logistic function.
///
/// Stable over at least `|z| <= 700`: large positive `z` saturates to 1
/// without overflow, large negative `z` underflows gradually to 0.
pub fn sigmoid<T: Real>(z: T) -> Result<T> {
    if !z.is_finite() {
        return Err(Error::NonFinite(format!("sigmoid input {z}")));
    }
    Ok(raw_sigmoid(z))
}

#[inline]
pub(crate) fn raw_sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` without overflow; equals `-log(sigmoid(-x))`.
#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Decides whether one assumed-background pixel enters the loss.
///
/// Inclusion is strict (`p < theta`; ties are excluded). `theta = 1` admits
/// every background pixel unconditionally, so the exclusive variants
/// degrade to their plain counterparts even where the sigmoid saturates to
/// exactly 1.0 in floating point. With `symmetric_exclusion` the pixel must
/// also sit above the mirrored bound `1 - theta`.
#[inline]
fn background_included<T: Real>(p: T, theta: T, symmetric: bool) -> bool {
    if theta >= T::one() {
        return true;
    }
    let below = p < theta;
    if symmetric {
        below && p > T::one() - theta
    } else {
        below
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta.is_finite() && (0.0..=1.0).contains(&theta)) {
        return Err(Error::Range(format!("theta = {theta} outside [0, 1]")));
    }
    Ok(())
}

/// Marks which `BackgroundAssumed` pixels enter an exclusive loss at the
/// given threshold. Foreground pixels are always `false`; they participate
/// through the foreground term instead.
pub fn exclusion_mask<T: Real>(
    prob: &Field2<T>,
    membership: &Field2<Membership>,
    theta: f64,
    symmetric_exclusion: bool,
) -> Result<Field2<bool>> {
    check_theta(theta)?;
    prob.check_same_shape(membership, "prob vs membership")?;
    let th: T = real(theta);
    let mut mask = Vec::with_capacity(prob.len());
    for (&p, &m) in prob.as_slice().iter().zip(membership.as_slice()) {
        mask.push(
            m == Membership::BackgroundAssumed && background_included(p, th, symmetric_exclusion),
        );
    }
    Field2::from_vec(prob.height(), prob.width(), mask)
}

struct PixelTerm<T> {
    term: T,
    grad: T,
}

/// Per-pixel foreground penalty and its d/dz.
#[inline]
fn foreground_term<T: Real>(variant: LossVariant, z: T, alpha: T, gamma: T, delta: T) -> PixelTerm<T> {
    let p = raw_sigmoid(z);
    let q = raw_sigmoid(-z); // 1 - p, computed stably
    let neg_log_p = softplus(-z);
    match variant {
        // The exclusive variants keep the plain foreground term: trusted
        // annotations are never down-weighted or excluded.
        LossVariant::Ce | LossVariant::Ece | LossVariant::FocalEce => {
            PixelTerm { term: neg_log_p, grad: -q }
        }
        LossVariant::Focal => {
            let w = alpha * q.powf(gamma);
            PixelTerm {
                term: w * neg_log_p,
                grad: -(alpha * gamma * p * q.powf(gamma) * neg_log_p) - alpha * q.powf(gamma + T::one()),
            }
        }
        LossVariant::Huber => {
            let r = -q; // p - 1
            PixelTerm { term: huber(r, delta), grad: huber_prime(r, delta) * p * q }
        }
    }
}

/// Per-pixel assumed-background penalty and its d/dz, assuming the pixel
/// was admitted by the exclusion rule.
#[inline]
fn background_term<T: Real>(variant: LossVariant, z: T, alpha: T, gamma: T, delta: T) -> PixelTerm<T> {
    let p = raw_sigmoid(z);
    let q = raw_sigmoid(-z);
    let neg_log_q = softplus(z); // -log(1 - p)
    match variant {
        LossVariant::Ce | LossVariant::Ece => PixelTerm { term: neg_log_q, grad: p },
        LossVariant::Focal | LossVariant::FocalEce => PixelTerm {
            term: alpha * p.powf(gamma) * neg_log_q,
            grad: alpha * gamma * p.powf(gamma) * q * neg_log_q + alpha * p.powf(gamma + T::one()),
        },
        LossVariant::Huber => {
            let r = p;
            PixelTerm { term: huber(r, delta), grad: huber_prime(r, delta) * p * q }
        }
    }
}

#[inline]
fn huber<T: Real>(r: T, delta: T) -> T {
    let a = r.abs();
    let half = real::<T>(0.5);
    if a <= delta {
        half * r * r
    } else {
        delta * (a - half * delta)
    }
}

#[inline]
fn huber_prime<T: Real>(r: T, delta: T) -> T {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Evaluates one loss over a full image batch.
///
/// Foreground pixels always contribute their foreground term. Assumed
/// background contributes only where the exclusion rule admits it (always,
/// for the non-exclusive variants). Excluded pixels contribute nothing and
/// receive an exactly-zero gradient, so no training signal flows through
/// them. `theta` is ignored by `Ce`, `Focal`, and `Huber` but must still be
/// a valid threshold.
pub fn batch_loss<T: Real>(
    logits: &Field2<T>,
    labels: &DenseLabelField,
    params: &LossParams,
    theta: f64,
) -> Result<LossOutput<T>> {
    params.validate()?;
    check_theta(theta)?;
    logits.check_same_shape(labels.membership(), "logits vs labels")?;

    let th: T = real(theta);
    let alpha: T = real(params.alpha);
    let gamma: T = real(params.gamma);
    let delta: T = real(params.huber_delta);
    let exclusion = params.variant.uses_exclusion();

    let n = logits.len();
    let mut terms: Vec<T> = Vec::with_capacity(n);
    let mut grads: Vec<T> = Vec::with_capacity(n);
    let mut included = 0usize;
    let mut excluded = 0usize;

    for (&z, &m) in logits.as_slice().iter().zip(labels.membership().as_slice()) {
        match m {
            Membership::Foreground => {
                let t = foreground_term(params.variant, z, alpha, gamma, delta);
                terms.push(t.term);
                grads.push(t.grad);
            }
            Membership::BackgroundAssumed => {
                let admit = !exclusion
                    || background_included(raw_sigmoid(z), th, params.symmetric_exclusion);
                if admit {
                    included += 1;
                    let t = background_term(params.variant, z, alpha, gamma, delta);
                    terms.push(t.term);
                    grads.push(t.grad);
                } else {
                    excluded += 1;
                    terms.push(T::zero());
                    grads.push(T::zero());
                }
            }
        }
    }

    Ok(LossOutput {
        total: pairwise_sum(&terms),
        grad_logits: Field2::from_vec(logits.height(), logits.width(), grads)?,
        included_count: included,
        excluded_count: excluded,
    })
}

/// Annotation-bias diagnostic: the cross-entropy mass that plain CE piles
/// onto oracle-known unannotated positives, `-sum log(1 - p)` over the
/// masked pixels. Grows without bound as those predictions approach 1,
/// which is exactly the pressure the exclusive variants remove.
pub fn bias_term<T: Real>(prob: &Field2<T>, unannotated_positive: &Field2<bool>) -> Result<T> {
    prob.check_same_shape(unannotated_positive, "prob vs mask")?;
    let mut terms = Vec::new();
    for (&p, &masked) in prob.as_slice().iter().zip(unannotated_positive.as_slice()) {
        if masked {
            // ln_1p(-p) = log(1 - p) without cancellation near p = 0.
            terms.push(-(-p).ln_1p());
        }
    }
    Ok(pairwise_sum(&terms))
}

/// Polynomial proxy `p^m (1 - p)^n` for the curvature of the excluded
/// background objective. Zero at both `p = 0` and `p = 1` and maximal at
/// `p = m / (m + n)`, so curvature concentrates between the two states the
/// training should end in.
pub fn second_order_proxy<T: Real>(p: T, m: u32, n: u32) -> Result<T> {
    if !(p >= T::zero() && p <= T::one()) {
        return Err(Error::Range(format!("p = {p} outside [0, 1]")));
    }
    if m == 0 || n == 0 {
        return Err(Error::Range(format!("exponents must be positive, got m={m} n={n}")));
    }
    Ok(p.powi(m as i32) * (T::one() - p).powi(n as i32))
}
