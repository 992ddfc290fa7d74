//! Minimal differentiable pixel scorer.
//!
//! Two layers: a bank of `hidden` square convolution filters with ReLU,
//! then a 1x1 convolution collapsing the bank to one logit per pixel. Same
//! padding with a zero border keeps the logit field the shape of the input.
//! Forward, backward, and the optimizer are written out by hand; every
//! accumulation runs in a fixed order so results are reproducible to the
//! bit for a given seed.

use crate::data::Image;
use crate::error::{Error, Result};
use crate::field::Field2;
use crate::scalar::{real, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fs;
use std::path::Path;

const CHECKPOINT_MAGIC: [u8; 4] = *b"SSCP";

/// Weights of the two-layer scorer. Also reused as the container for
/// parameter gradients and optimizer velocity, which share its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams<T> {
    hidden: usize,
    kernel: usize,
    /// Filter bank, filter-major then row-major: `hidden * kernel * kernel`.
    w1: Vec<T>,
    /// One bias per filter.
    b1: Vec<T>,
    /// 1x1 collapse weights, one per filter.
    w2: Vec<T>,
    b2: T,
}

impl<T: Real> ScorerParams<T> {
    /// All-zero parameters. `kernel` must be odd so same padding is exact.
    pub fn zeros(hidden: usize, kernel: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("hidden filter count must be at least 1".into()));
        }
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size must be odd and positive, got {kernel}"
            )));
        }
        Ok(Self {
            hidden,
            kernel,
            w1: vec![T::zero(); hidden * kernel * kernel],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); hidden],
            b2: T::zero(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Canonical flat order: `w1`, `b1`, `w2`, `b2`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend_from_slice(&self.w1);
        flat.extend_from_slice(&self.b1);
        flat.extend_from_slice(&self.w2);
        flat.push(self.b2);
        flat
    }

    pub fn from_flat(hidden: usize, kernel: usize, flat: &[T]) -> Result<Self> {
        let mut params = Self::zeros(hidden, kernel)?;
        if flat.len() != params.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                params.param_count(),
                flat.len()
            )));
        }
        let (w1, rest) = flat.split_at(params.w1.len());
        let (b1, rest) = rest.split_at(params.b1.len());
        let (w2, rest) = rest.split_at(params.w2.len());
        params.w1.copy_from_slice(w1);
        params.b1.copy_from_slice(b1);
        params.w2.copy_from_slice(w2);
        params.b2 = rest[0];
        Ok(params)
    }

    /// Elementwise combination with a same-shape companion.
    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.hidden != other.hidden || self.kernel != other.kernel {
            return Err(Error::Shape(format!(
                "parameter shapes differ: ({}, {}) vs ({}, {})",
                self.hidden, self.kernel, other.hidden, other.kernel
            )));
        }
        let zip = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        Ok(Self {
            hidden: self.hidden,
            kernel: self.kernel,
            w1: zip(&self.w1, &other.w1),
            b1: zip(&self.b1, &other.b1),
            w2: zip(&self.w2, &other.w2),
            b2: f(self.b2, other.b2),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// He-style initialization: layer weights drawn from a zero-mean normal
/// with standard deviation `sqrt(2 / (k * k * fan_in))`, biases zero.
/// Deterministic for a given seed.
pub fn init_params<T: Real>(seed: u64, hidden: usize, kernel: usize) -> Result<ScorerParams<T>> {
    let mut params = ScorerParams::zeros(hidden, kernel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std1 = (2.0 / (kernel * kernel) as f64).sqrt();
    let std2 = (2.0 / hidden as f64).sqrt();
    for w in &mut params.w1 {
        let z: f64 = StandardNormal.sample(&mut rng);
        *w = real(z * std1);
    }
    for w in &mut params.w2 {
        let z: f64 = StandardNormal.sample(&mut rng);
        *w = real(z * std2);
    }
    Ok(params)
}

#[inline]
fn conv_same_into<T: Real>(
    image: &Field2<T>,
    weights: &[T],
    kernel: usize,
    bias: T,
    out: &mut Vec<T>,
) {
    let (h, w) = (image.height(), image.width());
    let off = (kernel / 2) as isize;
    out.clear();
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = bias;
            for u in 0..kernel as isize {
                let rr = r + u - off;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for v in 0..kernel as isize {
                    let cc = c + v - off;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += weights[(u * kernel as isize + v) as usize]
                        * image.get(rr as usize, cc as usize);
                }
            }
            out.push(acc);
        }
    }
}

/// Computes per-pixel logits. Output has the image's shape.
pub fn forward<T: Real>(image: &Image<T>, params: &ScorerParams<T>) -> Result<Field2<T>> {
    let (h, w) = (image.height(), image.width());
    let mut logits = vec![params.b2; h * w];
    let mut pre = Vec::with_capacity(h * w);
    for f in 0..params.hidden {
        let k2 = params.kernel * params.kernel;
        let weights = &params.w1[f * k2..(f + 1) * k2];
        conv_same_into(image.pixels(), weights, params.kernel, params.b1[f], &mut pre);
        let w2 = params.w2[f];
        for (l, &a) in logits.iter_mut().zip(pre.iter()) {
            if a > T::zero() {
                *l += w2 * a;
            }
        }
    }
    Field2::from_vec(h, w, logits)
}

/// Backpropagates a loss gradient on the logits to parameter gradients.
///
/// Hidden activations are recomputed from the image rather than cached, so
/// the call is self-contained. The ReLU gate uses the `a > 0` subgradient.
pub fn backward<T: Real>(
    image: &Image<T>,
    params: &ScorerParams<T>,
    grad_logits: &Field2<T>,
) -> Result<ScorerParams<T>> {
    grad_logits.check_same_shape(image.pixels(), "grad_logits vs image")?;
    let (h, w) = (image.height(), image.width());
    let kernel = params.kernel;
    let k2 = kernel * kernel;
    let off = (kernel / 2) as isize;
    let g = grad_logits.as_slice();

    let mut grads = ScorerParams::zeros(params.hidden, kernel)?;
    for &gi in g {
        grads.b2 += gi;
    }

    let mut pre = Vec::with_capacity(h * w);
    for f in 0..params.hidden {
        let weights = &params.w1[f * k2..(f + 1) * k2];
        conv_same_into(image.pixels(), weights, kernel, params.b1[f], &mut pre);

        // d w2[f] = sum g * relu(a); d a = g * w2[f] gated by a > 0.
        let mut dw2 = T::zero();
        let w2 = params.w2[f];
        for (i, &a) in pre.iter().enumerate() {
            if a > T::zero() {
                dw2 += g[i] * a;
                let da = g[i] * w2;
                grads.b1[f] += da;
                // d w1[f][u][v] accumulates da * shifted input.
                let r = (i / w) as isize;
                let c = (i % w) as isize;
                for u in 0..kernel as isize {
                    let rr = r + u - off;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for v in 0..kernel as isize {
                        let cc = c + v - off;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        grads.w1[f * k2 + (u * kernel as isize + v) as usize] +=
                            da * image.pixels().get(rr as usize, cc as usize);
                    }
                }
            }
        }
        grads.w2[f] = dw2;
    }
    Ok(grads)
}

/// SGD-with-momentum state. Velocity shares the parameter shape.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub velocity: ScorerParams<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(learning_rate: f64, momentum: f64, hidden: usize, kernel: usize) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be nonnegative, got {learning_rate}"
            )));
        }
        if !(momentum.is_finite() && (0.0..=1.0).contains(&momentum)) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate: real(learning_rate),
            momentum: real(momentum),
            velocity: ScorerParams::zeros(hidden, kernel)?,
        })
    }
}

/// One optimizer step: `v' = momentum * v - lr * g`, `p' = p + v'`.
///
/// Errors with `NonFinite` if the update produces any non-finite parameter
/// or velocity, so divergence surfaces immediately instead of corrupting
/// later steps.
pub fn sgd_step<T: Real>(
    params: &ScorerParams<T>,
    grads: &ScorerParams<T>,
    state: &OptimizerState<T>,
) -> Result<(ScorerParams<T>, OptimizerState<T>)> {
    let lr = state.learning_rate;
    let momentum = state.momentum;
    let velocity = state.velocity.zip_with(grads, |v, g| momentum * v - lr * g)?;
    let next = params.zip_with(&velocity, |p, v| p + v)?;
    if !(velocity.is_finite() && next.is_finite()) {
        return Err(Error::NonFinite("sgd update produced a non-finite value".into()));
    }
    Ok((next, OptimizerState { learning_rate: lr, momentum, velocity }))
}

/// Writes parameters as a 16-byte header (magic, hidden, kernel, count)
/// followed by the flat parameter vector as 64-bit little-endian reals.
pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, params: &ScorerParams<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + params.param_count() * 8);
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(params.hidden as u32).to_le_bytes());
    bytes.extend_from_slice(&(params.kernel as u32).to_le_bytes());
    bytes.extend_from_slice(&(params.param_count() as u32).to_le_bytes());
    for x in params.to_flat() {
        bytes.extend_from_slice(&x.to_f64().unwrap().to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ScorerParams<T>> {
    let path = path.as_ref();
    let err = |detail: &str| Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    };
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(err("shorter than the 16-byte header"));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (hidden, kernel, count) = (word(4), word(8), word(12));
    let expected = hidden * kernel * kernel + 2 * hidden + 1;
    if count != expected {
        return Err(err("parameter count does not match header dimensions"));
    }
    if bytes.len() != 16 + count * 8 {
        return Err(err("payload length does not match header"));
    }
    let mut flat = Vec::with_capacity(count);
    for chunk in bytes[16..].chunks_exact(8) {
        let x = f64::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(err("non-finite parameter value"));
        }
        flat.push(real::<T>(x));
    }
    ScorerParams::from_flat(hidden, kernel, &flat)
        .map_err(|_| err("inconsistent header dimensions"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DenseLabelField;
    use crate::losses::{batch_loss, LossParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use tempfile::tempdir;

    fn random_image(seed: u64, h: usize, w: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_field(Field2::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))).unwrap()
    }

    /// Init with non-zero biases so no ReLU preactivation sits exactly at
    /// the kink during finite differencing.
    fn random_params(seed: u64, hidden: usize, kernel: usize) -> ScorerParams<f64> {
        let mut params = init_params(seed, hidden, kernel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for b in &mut params.b1 {
            *b = rng.random_range(-0.3..0.3);
        }
        params.b2 = rng.random_range(-0.3..0.3);
        params
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let image = random_image(1, 9, 7);
        let params = ScorerParams::<f64>::zeros(8, 5).unwrap();
        let logits = forward(&image, &params).unwrap();
        assert!(logits.as_slice().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn identity_filter_reproduces_the_input() {
        let image = random_image(2, 6, 11);
        let mut params = ScorerParams::<f64>::zeros(1, 3).unwrap();
        params.w1[4] = 1.0; // center tap of the single 3x3 filter
        params.w2[0] = 1.0;
        let logits = forward(&image, &params).unwrap();
        assert_eq!(logits.as_slice(), image.pixels().as_slice());
    }

    #[test]
    fn forward_matches_naive_quadruple_loop() {
        let image = random_image(3, 16, 16);
        let params = random_params(3, 3, 5);
        let logits = forward(&image, &params).unwrap();

        // Oracle: direct transcription of the definition, one pixel at a
        // time, no shared accumulators.
        let k = params.kernel as isize;
        let off = k / 2;
        for r in 0..16isize {
            for c in 0..16isize {
                let mut out = params.b2;
                for f in 0..params.hidden {
                    let mut a = params.b1[f];
                    for u in 0..k {
                        for v in 0..k {
                            let (rr, cc) = (r + u - off, c + v - off);
                            if (0..16).contains(&rr) && (0..16).contains(&cc) {
                                a += params.w1[f * (k * k) as usize + (u * k + v) as usize]
                                    * image.pixels().get(rr as usize, cc as usize);
                            }
                        }
                    }
                    out += params.w2[f] * a.max(0.0);
                }
                let got = logits.get(r as usize, c as usize);
                assert!((got - out).abs() <= 1e-12, "pixel ({r},{c}): {got} vs {out}");
            }
        }
    }

    #[test]
    fn backward_of_zero_gradient_is_zero() {
        let image = random_image(4, 8, 8);
        let params = random_params(4, 2, 3);
        let grads = backward(&image, &params, &Field2::filled(8, 8, 0.0)).unwrap();
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_pixel_gradient_reaches_output_bias_directly() {
        let image = random_image(5, 8, 8);
        let params = random_params(5, 2, 3);
        let mut g = Field2::filled(8, 8, 0.0);
        g.set(3, 4, 1.0);
        let grads = backward(&image, &params, &g).unwrap();
        assert_eq!(grads.b2, 1.0);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let image = random_image(6, 12, 12);
        let params = random_params(6, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut labels = DenseLabelField::new(12, 12);
        for r in 0..12 {
            for c in 0..12 {
                if rng.random_bool(0.3) {
                    labels.promote(r, c);
                }
            }
        }
        let loss_params = LossParams::ce();

        let loss_of = |p: &ScorerParams<f64>| -> f64 {
            let logits = forward(&image, p).unwrap();
            batch_loss(&logits, &labels, &loss_params, 1.0).unwrap().total
        };

        let out = batch_loss(&forward(&image, &params).unwrap(), &labels, &loss_params, 1.0).unwrap();
        let analytic = backward(&image, &params, &out.grad_logits).unwrap().to_flat();

        let h = 1e-5;
        let flat = params.to_flat();
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (loss_of(&ScorerParams::from_flat(2, 3, &plus).unwrap())
                - loss_of(&ScorerParams::from_flat(2, 3, &minus).unwrap()))
                / (2.0 * h);
            let tol = 1e-6f64.max(1e-4 * fd.abs());
            assert!(
                (analytic[i] - fd).abs() <= tol,
                "param {i}: analytic {} vs fd {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn sgd_reference_steps() {
        let params = ScorerParams::<f64>::zeros(1, 1).unwrap();
        let mut grads = ScorerParams::<f64>::zeros(1, 1).unwrap();
        for g in [&mut grads.w1[0], &mut grads.b1[0], &mut grads.w2[0], &mut grads.b2] {
            *g = 1.0;
        }

        // Without momentum one step moves each parameter by exactly -lr.
        let state = OptimizerState::new(0.1, 0.0, 1, 1).unwrap();
        let (stepped, _) = sgd_step(&params, &grads, &state).unwrap();
        assert!(stepped.to_flat().iter().all(|&p| p == -0.1));

        // With momentum 0.9 two unit-gradient steps give v2 = -0.19 and a
        // cumulative move of -0.29.
        let state = OptimizerState::new(0.1, 0.9, 1, 1).unwrap();
        let (p1, s1) = sgd_step(&params, &grads, &state).unwrap();
        let (p2, s2) = sgd_step(&p1, &grads, &s1).unwrap();
        for (&v, &p) in s2.velocity.to_flat().iter().zip(p2.to_flat().iter()) {
            assert!((v - (-0.19)).abs() < 1e-12);
            assert!((p - (-0.29)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let params = random_params(7, 2, 3);
        let grads = random_params(8, 2, 3);
        let state = OptimizerState::new(0.0, 0.9, 2, 3).unwrap();
        let (next, _) = sgd_step(&params, &grads, &state).unwrap();
        assert_eq!(next, params);
    }

    #[test]
    fn non_finite_update_is_an_error() {
        let params = random_params(9, 1, 3);
        let mut grads = ScorerParams::<f64>::zeros(1, 3).unwrap();
        grads.b2 = f64::INFINITY;
        let state = OptimizerState::new(0.1, 0.0, 1, 3).unwrap();
        assert!(matches!(sgd_step(&params, &grads, &state), Err(Error::NonFinite(_))));
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_biases() {
        let a: ScorerParams<f64> = init_params(42, 8, 5).unwrap();
        let b: ScorerParams<f64> = init_params(42, 8, 5).unwrap();
        assert_eq!(a, b);
        let c: ScorerParams<f64> = init_params(43, 8, 5).unwrap();
        assert_ne!(a, c);
        assert!(a.b1.iter().all(|&x| x == 0.0) && a.b2 == 0.0);
    }

    #[test]
    fn init_weight_spread_matches_target() {
        // 4000 filters of 5x5 give 1e5 first-layer weights.
        let params: ScorerParams<f64> = init_params(7, 4000, 5).unwrap();
        let n = params.w1.len() as f64;
        assert_eq!(params.w1.len(), 100_000);
        let mean: f64 = params.w1.iter().sum::<f64>() / n;
        let var: f64 = params.w1.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
        let target = (2.0 / 25.0f64).sqrt();
        let std = var.sqrt();
        assert!(
            (std - target).abs() / target < 0.05,
            "sample std {std} vs target {target}"
        );
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        assert!(ScorerParams::<f64>::zeros(0, 5).is_err());
        assert!(ScorerParams::<f64>::zeros(8, 4).is_err());
        assert!(init_params::<f64>(1, 8, 2).is_err());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scorer.ckpt");
        let params = random_params(11, 8, 5);
        save_checkpoint(&path, &params).unwrap();
        let loaded: ScorerParams<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SSCP");
        assert_eq!(bytes.len(), 16 + params.param_count() * 8);
    }

    #[test]
    fn checkpoint_loader_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scorer.ckpt");
        let params = random_params(12, 2, 3);
        save_checkpoint(&path, &params).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format { .. })));

        fs::write(&path, &good[..good.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format { .. })));

        let mut bad_count = good.clone();
        bad_count[12] = 0xff;
        fs::write(&path, &bad_count).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let image = random_image(13, 8, 8);
        let params = random_params(13, 2, 3);
        let a = forward(&image, &params).unwrap();
        let b = forward(&image, &params).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    proptest! {
        #[test]
        fn forward_preserves_shape(
            h in 1usize..20,
            w in 1usize..20,
            kernel in prop::sample::select(vec![1usize, 3, 5, 7]),
            hidden in 1usize..4,
        ) {
            let image = random_image(17, h, w);
            let params = random_params(17, hidden, kernel);
            let logits = forward(&image, &params).unwrap();
            prop_assert_eq!((logits.height(), logits.width()), (h, w));
            prop_assert!(logits.as_slice().iter().all(|z| z.is_finite()));
        }
    }
}
