//! Images, annotations, sparsification, and rasterization.
//!
//! The annotation model is deliberately small: every object is a disk
//! (`cx`, `cy`, `radius`, `class_id`), and a dense label field tracks for
//! each pixel both a binary label and a membership tag. `FOREGROUND` means
//! the pixel is covered by a trusted annotation; `BACKGROUND_ASSUMED` means
//! no annotation covers it, which under sparse annotation does not prove it
//! is background. The losses consume this distinction directly.

mod io;

pub use io::{load_annotations, load_image, save_annotations, save_image, PgmFormat};

use crate::error::{Error, Result};
use crate::field::Field2;
use crate::scalar::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One annotated object: a disk in pixel coordinates.
///
/// `cx` is the column (x) coordinate and `cy` the row (y) coordinate of the
/// centroid; both may be fractional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub class_id: u32,
}

/// All annotations attached to one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image_id: String,
    pub items: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn new(image_id: impl Into<String>, items: Vec<Annotation>) -> Self {
        Self { image_id: image_id.into(), items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items belonging to one class, in stored order.
    pub fn of_class(&self, class_id: u32) -> Vec<Annotation> {
        self.items.iter().copied().filter(|a| a.class_id == class_id).collect()
    }
}

/// Single-channel image with every pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pixels: Field2<T>,
}

impl<T: Real> Image<T> {
    /// Validates the pixel range on construction.
    pub fn from_field(pixels: Field2<T>) -> Result<Self> {
        for (i, &p) in pixels.as_slice().iter().enumerate() {
            if !(p >= T::zero() && p <= T::one()) {
                return Err(Error::Range(format!(
                    "pixel {} = {} outside [0, 1]",
                    i, p
                )));
            }
        }
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn pixels(&self) -> &Field2<T> {
        &self.pixels
    }
}

/// Per-pixel annotation status.
///
/// `BackgroundAssumed` is an absence of evidence, not a trusted negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    Foreground,
    BackgroundAssumed,
}

/// Dense binary labels plus their membership tags.
///
/// Invariant: `labels == 1` exactly where `membership == Foreground`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLabelField {
    labels: Field2<u8>,
    membership: Field2<Membership>,
}

impl DenseLabelField {
    /// All pixels start as assumed background.
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            labels: Field2::filled(height, width, 0),
            membership: Field2::filled(height, width, Membership::BackgroundAssumed),
        }
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn labels(&self) -> &Field2<u8> {
        &self.labels
    }

    pub fn membership(&self) -> &Field2<Membership> {
        &self.membership
    }

    /// Marks one pixel as trusted foreground.
    pub fn promote(&mut self, row: usize, col: usize) {
        self.labels.set(row, col, 1);
        self.membership.set(row, col, Membership::Foreground);
    }

    pub fn foreground_count(&self) -> usize {
        self.membership
            .as_slice()
            .iter()
            .filter(|&&m| m == Membership::Foreground)
            .count()
    }

    /// Checks the label/membership coupling invariant.
    pub fn is_consistent(&self) -> bool {
        self.labels
            .as_slice()
            .iter()
            .zip(self.membership.as_slice())
            .all(|(&l, &m)| (l == 1) == (m == Membership::Foreground))
    }
}

/// Deterministic recipe for thinning one annotation set.
///
/// The permutation is drawn once per (seed, set size); every fraction takes
/// a prefix of it, so sparser variants are always subsets of denser ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsificationPlan {
    fractions: Vec<f64>,
    seed: u64,
    permutation: Vec<usize>,
}

impl SparsificationPlan {
    /// Draws the permutation over `n` items from `seed`.
    ///
    /// Fractions must be strictly increasing and inside `(0, 1]`.
    pub fn new(fractions: Vec<f64>, seed: u64, n: usize) -> Result<Self> {
        validate_fractions(&fractions)?;
        let mut permutation: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        permutation.shuffle(&mut rng);
        Ok(Self { fractions, seed, permutation })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }
}

fn validate_fractions(fractions: &[f64]) -> Result<()> {
    for (i, &f) in fractions.iter().enumerate() {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidPlan(format!("fraction {} = {} outside (0, 1]", i, f)));
        }
        if i > 0 && f <= fractions[i - 1] {
            return Err(Error::InvalidPlan(format!(
                "fractions must be strictly increasing, got {} after {}",
                f,
                fractions[i - 1]
            )));
        }
    }
    Ok(())
}

/// Builds one thinned variant per plan fraction.
///
/// The variant for fraction `f` keeps the first `ceil(f * n)` annotations
/// under the plan's permutation, so variants are nested as sets and the
/// fraction-1.0 variant is a reordering of the full set.
pub fn sparsify(full: &AnnotationSet, plan: &SparsificationPlan) -> Result<Vec<AnnotationSet>> {
    if full.is_empty() {
        return Err(Error::EmptyAnnotations);
    }
    validate_fractions(&plan.fractions)?;
    if plan.permutation.len() != full.len() {
        return Err(Error::InvalidPlan(format!(
            "plan permutation covers {} items, set has {}",
            plan.permutation.len(),
            full.len()
        )));
    }
    let mut seen = vec![false; full.len()];
    for &i in &plan.permutation {
        if i >= full.len() || seen[i] {
            return Err(Error::InvalidPlan("permutation is not a bijection".into()));
        }
        seen[i] = true;
    }

    let n = full.len();
    let mut variants = Vec::with_capacity(plan.fractions.len());
    for &f in &plan.fractions {
        let keep = (f * n as f64).ceil() as usize;
        let items: Vec<Annotation> =
            plan.permutation[..keep].iter().map(|&i| full.items[i]).collect();
        variants.push(AnnotationSet::new(full.image_id.clone(), items));
    }
    Ok(variants)
}

/// Rasterizes all annotations of one class into a dense label field.
///
/// A pixel is foreground iff its center lies within Euclidean distance
/// `radius` of some matching annotation's centroid. Annotations of other
/// classes are ignored; their pixels stay `BackgroundAssumed`.
pub fn rasterize(
    annotations: &AnnotationSet,
    height: usize,
    width: usize,
    class_id: u32,
) -> Result<DenseLabelField> {
    for (i, a) in annotations.items.iter().enumerate() {
        let inside =
            a.cx >= 0.0 && a.cx < width as f64 && a.cy >= 0.0 && a.cy < height as f64;
        if !inside {
            return Err(Error::OutOfBounds(format!(
                "annotation {} at ({}, {}) outside {}x{} image",
                i, a.cx, a.cy, height, width
            )));
        }
    }

    let mut field = DenseLabelField::new(height, width);
    for a in annotations.items.iter().filter(|a| a.class_id == class_id) {
        let r0 = (a.cy - a.radius).floor().max(0.0) as usize;
        let r1 = (a.cy + a.radius).ceil().min(height as f64 - 1.0) as usize;
        let c0 = (a.cx - a.radius).floor().max(0.0) as usize;
        let c1 = (a.cx + a.radius).ceil().min(width as f64 - 1.0) as usize;
        let rr = a.radius * a.radius;
        for row in r0..=r1 {
            for col in c0..=c1 {
                let dy = row as f64 - a.cy;
                let dx = col as f64 - a.cx;
                if dx * dx + dy * dy <= rr {
                    field.promote(row, col);
                }
            }
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn dummy_set(n: usize) -> AnnotationSet {
        let items = (0..n)
            .map(|i| Annotation { cx: i as f64, cy: i as f64, radius: 1.0, class_id: 1 })
            .collect();
        AnnotationSet::new("img", items)
    }

    #[test]
    fn sparsify_takes_ceil_sized_nested_prefixes() {
        let full = dummy_set(10);
        let plan = SparsificationPlan::new(vec![0.3, 0.6, 1.0], 42, 10).unwrap();
        let variants = sparsify(&full, &plan).unwrap();
        assert_eq!(variants.iter().map(AnnotationSet::len).collect::<Vec<_>>(), vec![3, 6, 10]);

        let key = |a: &Annotation| (a.cx.to_bits(), a.cy.to_bits());
        let sets: Vec<HashSet<_>> =
            variants.iter().map(|v| v.items.iter().map(key).collect()).collect();
        assert!(sets[0].is_subset(&sets[1]));
        assert!(sets[1].is_subset(&sets[2]));
        assert_eq!(sets[2], full.items.iter().map(key).collect());
    }

    #[test]
    fn sparsify_single_annotation_never_empty() {
        let full = dummy_set(1);
        let plan = SparsificationPlan::new(vec![0.1], 7, 1).unwrap();
        let variants = sparsify(&full, &plan).unwrap();
        assert_eq!(variants[0].len(), 1);
    }

    #[test]
    fn sparsify_rejects_empty_set() {
        let full = AnnotationSet::new("img", vec![]);
        let plan = SparsificationPlan::new(vec![0.5], 7, 0).unwrap();
        assert!(matches!(sparsify(&full, &plan), Err(Error::EmptyAnnotations)));
    }

    #[test]
    fn plan_rejects_bad_fractions() {
        assert!(SparsificationPlan::new(vec![0.5, 0.5], 1, 4).is_err());
        assert!(SparsificationPlan::new(vec![0.6, 0.3], 1, 4).is_err());
        assert!(SparsificationPlan::new(vec![0.0, 0.5], 1, 4).is_err());
        assert!(SparsificationPlan::new(vec![0.5, 1.1], 1, 4).is_err());
    }

    #[test]
    fn sparsify_full_scale_set_sizes() {
        // Desk-scale rehearsal of a realistically sized set: 6631 objects.
        let full = dummy_set(6631);
        let plan = SparsificationPlan::new(vec![0.1, 0.5, 0.9, 1.0], 3, 6631).unwrap();
        let variants = sparsify(&full, &plan).unwrap();
        let expect: Vec<usize> =
            [0.1f64, 0.5, 0.9, 1.0].iter().map(|f| (f * 6631.0).ceil() as usize).collect();
        assert_eq!(variants.iter().map(AnnotationSet::len).collect::<Vec<_>>(), expect);
        assert_eq!(variants[3].len(), 6631);
    }

    #[test]
    fn rasterize_no_annotations_is_all_background() {
        let field = rasterize(&AnnotationSet::new("img", vec![]), 8, 8, 1).unwrap();
        assert_eq!(field.foreground_count(), 0);
        assert!(field.is_consistent());
    }

    #[test]
    fn rasterize_half_radius_marks_exactly_one_pixel() {
        let set = AnnotationSet::new(
            "img",
            vec![Annotation { cx: 4.0, cy: 3.0, radius: 0.5, class_id: 1 }],
        );
        let field = rasterize(&set, 8, 8, 1).unwrap();
        assert_eq!(field.foreground_count(), 1);
        assert_eq!(field.labels().get(3, 4), 1);
    }

    #[test]
    fn rasterize_matches_whole_image_scan() {
        let set = AnnotationSet::new(
            "img",
            vec![
                Annotation { cx: 10.0, cy: 12.0, radius: 3.0, class_id: 1 },
                Annotation { cx: 20.5, cy: 7.25, radius: 4.5, class_id: 1 },
                Annotation { cx: 16.0, cy: 16.0, radius: 2.0, class_id: 2 },
            ],
        );
        let field = rasterize(&set, 32, 32, 1).unwrap();

        // Oracle: scan every pixel against every class-1 annotation.
        let mut expected = 0usize;
        for row in 0..32 {
            for col in 0..32 {
                let hit = set.items.iter().filter(|a| a.class_id == 1).any(|a| {
                    let dx = col as f64 - a.cx;
                    let dy = row as f64 - a.cy;
                    dx * dx + dy * dy <= a.radius * a.radius
                });
                if hit {
                    expected += 1;
                    assert_eq!(field.labels().get(row, col), 1);
                } else {
                    assert_eq!(field.labels().get(row, col), 0);
                }
            }
        }
        assert_eq!(field.foreground_count(), expected);
        assert!(field.is_consistent());
    }

    #[test]
    fn rasterize_rejects_out_of_bounds_annotation() {
        let set = AnnotationSet::new(
            "img",
            vec![Annotation { cx: 40.0, cy: 3.0, radius: 1.0, class_id: 1 }],
        );
        assert!(matches!(rasterize(&set, 8, 8, 1), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn image_rejects_out_of_range_pixels() {
        let bad = Field2::from_vec(1, 2, vec![0.5, 1.5]).unwrap();
        assert!(Image::from_field(bad).is_err());
        let good = Field2::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(Image::from_field(good).is_ok());
    }

    proptest! {
        #[test]
        fn sparsify_variants_are_nested(
            n in 1usize..60,
            seed in 0u64..1000,
            ladder in proptest::collection::vec(0.01f64..=1.0, 1..5),
        ) {
            let mut fractions = ladder;
            fractions.sort_by(|a, b| a.partial_cmp(b).unwrap());
            fractions.dedup();
            let full = dummy_set(n);
            let plan = SparsificationPlan::new(fractions.clone(), seed, n).unwrap();
            let variants = sparsify(&full, &plan).unwrap();
            let key = |a: &Annotation| (a.cx.to_bits(), a.cy.to_bits());
            for w in variants.windows(2) {
                let small: HashSet<_> = w[0].items.iter().map(key).collect();
                let large: HashSet<_> = w[1].items.iter().map(key).collect();
                prop_assert!(small.is_subset(&large));
            }
            for (v, &f) in variants.iter().zip(&fractions) {
                prop_assert_eq!(v.len(), (f * n as f64).ceil() as usize);
                prop_assert!(v.len() >= 1);
            }
        }

        #[test]
        fn sparsify_is_deterministic(n in 1usize..40, seed in 0u64..500) {
            let full = dummy_set(n);
            let a = SparsificationPlan::new(vec![0.5], seed, n).unwrap();
            let b = SparsificationPlan::new(vec![0.5], seed, n).unwrap();
            prop_assert_eq!(a.permutation(), b.permutation());
            prop_assert_eq!(sparsify(&full, &a).unwrap(), sparsify(&full, &b).unwrap());
        }
    }
}
