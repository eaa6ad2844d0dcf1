//! Time-span masking, frequency-span masking and mixup over `[T, F]` features.

use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub time_mask_len: usize,
    pub time_mask_proportion: f64,
    pub freq_num_windows: usize,
    pub freq_max_width: usize,
    pub mixup_alpha: f64,
    pub time_mask: bool,
    pub freq_mask: bool,
    pub mixup: bool,
    pub rng_seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            time_mask_len: 10,
            time_mask_proportion: 0.4,
            freq_num_windows: 2,
            freq_max_width: 27,
            mixup_alpha: 1.0,
            time_mask: true,
            freq_mask: true,
            mixup: true,
            rng_seed: 0,
        }
    }
}

impl AugmentSpec {
    /// Defaults with the frequency width scaled to a narrow feature dimension.
    pub fn for_feature_dim(feature_dim: usize) -> Self {
        Self {
            freq_max_width: (feature_dim / 3).max(1).min(feature_dim.saturating_sub(1)),
            ..Self::default()
        }
    }

    pub fn disabled() -> Self {
        Self {
            time_mask: false,
            freq_mask: false,
            mixup: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.time_mask_len == 0 {
            return Err(Error::Config("time_mask_len must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.time_mask_proportion) {
            return Err(Error::Config(format!(
                "time_mask_proportion {} outside [0, 1]",
                self.time_mask_proportion
            )));
        }
        if self.freq_mask && self.freq_max_width >= feature_dim {
            return Err(Error::Config(format!(
                "freq_max_width {} must be < feature dim {feature_dim}",
                self.freq_max_width
            )));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mixup_alpha must be > 0, got {}",
                self.mixup_alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// All augmenters; mixup itself happens at batch level.
    Supervised,
    /// Time and frequency masks only.
    XlstMain,
    /// Identity.
    XlstTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixup {
    pub partner: String,
    pub beta: f64,
}

/// Everything drawn for one augmented view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    /// Masked frame indices, sorted and unique.
    pub time_indices: Vec<usize>,
    /// Masked column ranges, one per window, possibly empty.
    pub freq_bands: Vec<Range<usize>>,
    pub mixup: Option<Mixup>,
}

impl AugmentRecord {
    pub fn is_identity(&self) -> bool {
        self.time_indices.is_empty()
            && self.freq_bands.iter().all(|b| b.is_empty())
            && self.mixup.is_none()
    }

    /// Re-applies the recorded masks, then mixes with `partner` if a mixup was drawn.
    ///
    /// `partner` is the partner's own augmented view.
    pub fn apply<T: Real>(&self, x: &Tensor<T>, partner: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (t, f) = dims(x)?;
        if let Some(&i) = self.time_indices.iter().find(|&&i| i >= t) {
            return Err(Error::shape(
                "augment",
                format!("time index {i} out of range {t}"),
            ));
        }
        if let Some(b) = self.freq_bands.iter().find(|b| b.end > f) {
            return Err(Error::shape(
                "augment",
                format!("band {b:?} exceeds {f} bins"),
            ));
        }
        let mut data = x.data().to_vec();
        for &i in &self.time_indices {
            data[i * f..(i + 1) * f].fill(T::zero());
        }
        for band in &self.freq_bands {
            for row in data.chunks_mut(f) {
                row[band.clone()].fill(T::zero());
            }
        }
        let masked = Tensor::new(x.shape().to_vec(), data)?;
        match (&self.mixup, partner) {
            (None, _) => Ok(masked),
            (Some(m), Some(p)) => mixup_with_beta(&masked, p, m.beta),
            (Some(_), None) => Err(Error::Contract(
                "mixup record needs its partner view".into(),
            )),
        }
    }
}

fn dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        &[t, f] => Ok((t, f)),
        s => Err(Error::shape("augment", format!("expected T×F, got {s:?}"))),
    }
}

/// Zeroes `floor(proportion·T/len)` spans whose starts are drawn without replacement.
///
/// Spans may overlap and are cut at the end of the sequence.
pub fn time_span_mask<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    len: usize,
    proportion: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (t, _) = dims(x)?;
    let indices = draw_time_spans(t, len, proportion, rng)?;
    let record = AugmentRecord {
        time_indices: indices.clone(),
        ..Default::default()
    };
    Ok((record.apply(x, None)?, indices))
}

fn draw_time_spans<R: Rng + ?Sized>(
    t: usize,
    len: usize,
    proportion: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if len == 0 || !(0.0..=1.0).contains(&proportion) {
        return Err(Error::Config(format!(
            "time mask needs len >= 1 and proportion in [0, 1], got {len}, {proportion}"
        )));
    }
    if len > t {
        return Err(Error::InputTooShort(format!(
            "time mask length {len} exceeds {t} frames"
        )));
    }
    let spans = (proportion * t as f64 / len as f64).floor() as usize;
    let mut masked = vec![false; t];
    for start in index::sample(rng, t, spans) {
        masked[start..(start + len).min(t)].fill(true);
    }
    Ok((0..t).filter(|&i| masked[i]).collect())
}

/// Zeroes `num_windows` column bands of width uniform on `0..=max_width`.
pub fn freq_span_mask<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    num_windows: usize,
    max_width: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<Range<usize>>)> {
    let (_, f) = dims(x)?;
    let bands = draw_freq_bands(f, num_windows, max_width, rng)?;
    let record = AugmentRecord {
        freq_bands: bands.clone(),
        ..Default::default()
    };
    Ok((record.apply(x, None)?, bands))
}

fn draw_freq_bands<R: Rng + ?Sized>(
    f: usize,
    num_windows: usize,
    max_width: usize,
    rng: &mut R,
) -> Result<Vec<Range<usize>>> {
    if max_width >= f {
        return Err(Error::Config(format!(
            "freq_max_width {max_width} must be < feature dim {f}"
        )));
    }
    Ok((0..num_windows)
        .map(|_| {
            let width = rng.random_range(0..=max_width);
            let start = rng.random_range(0..=f - width);
            start..start + width
        })
        .collect())
}

/// `β·x1 + (1−β)·x2` after zero-padding both to the longer length.
pub fn mixup_with_beta<T: Real>(x1: &Tensor<T>, x2: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    let (t1, f1) = dims(x1)?;
    let (t2, f2) = dims(x2)?;
    if f1 != f2 {
        return Err(Error::shape(
            "mixup",
            format!("feature dims {f1} and {f2} differ"),
        ));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Contract(format!(
            "mixing weight {beta} outside [0, 1]"
        )));
    }
    let t = t1.max(t2);
    let (b, c) = (T::lit(beta), T::lit(1.0 - beta));
    x1.pad_rows(t)?
        .zip_map(&x2.pad_rows(t)?, |u, v| b * u + c * v)
}

/// Mixup with `β ~ Beta(alpha, alpha)`.
pub fn mixup<T: Real, R: Rng + ?Sized>(
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, f64)> {
    let beta = sample_beta(alpha, rng)?;
    Ok((mixup_with_beta(x1, x2, beta)?, beta))
}

pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let dist =
        Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup_alpha {alpha}: {e}")))?;
    Ok(dist.sample(rng).clamp(0.0, 1.0))
}

/// Applies the masks enabled for `stage`. Mixup is left to [`mix_batch`].
pub fn augment<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    spec: &AugmentSpec,
    stage: Stage,
    rng: &mut R,
) -> Result<(Tensor<T>, AugmentRecord)> {
    let (_, f) = dims(x)?;
    spec.validate(f)?;
    let mut record = AugmentRecord::default();
    if stage == Stage::XlstTarget {
        return Ok((x.clone(), record));
    }
    if spec.time_mask {
        let spans = draw_time_spans(x.rows(), spec.time_mask_len, spec.time_mask_proportion, rng);
        record.time_indices = spans?;
    }
    if spec.freq_mask {
        record.freq_bands = draw_freq_bands(f, spec.freq_num_windows, spec.freq_max_width, rng)?;
    }
    Ok((record.apply(x, None)?, record))
}

/// A uniformly random permutation with no fixed points, by rejection.
///
/// Returns the identity for `n < 2`.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// One mixed batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedView<T> {
    pub features: Tensor<T>,
    pub partner: usize,
    pub beta: f64,
}

/// Pairs every view with a derangement partner and mixes the two.
///
/// Batches of one are returned unmixed with `beta = 1`.
pub fn mix_batch<T: Real, R: Rng + ?Sized>(
    views: &[Tensor<T>],
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<MixedView<T>>> {
    let partners = derangement(views.len(), rng);
    views
        .iter()
        .zip(partners)
        .enumerate()
        .map(|(i, (x, j))| {
            if i == j {
                return Ok(MixedView {
                    features: x.clone(),
                    partner: j,
                    beta: 1.0,
                });
            }
            let (features, beta) = mixup(x, &views[j], alpha, rng)?;
            Ok(MixedView {
                features,
                partner: j,
                beta,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(t: usize, f: usize) -> Tensor<f64> {
        Tensor::from_fn(&[t, f], |i| 1.0 + i as f64)
    }

    #[test]
    fn zero_proportion_is_identity() {
        let x = ramp(30, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, idx) = time_span_mask(&x, 10, 0.0, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(idx.is_empty());
    }

    #[test]
    fn four_spans_cover_between_ten_and_forty_frames() {
        let x = ramp(100, 3);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (y, idx) = time_span_mask(&x, 10, 0.4, &mut rng).unwrap();
            assert!((10..=40).contains(&idx.len()), "{}", idx.len());
            let zero_rows = (0..100)
                .filter(|&r| y.row(r).iter().all(|&v| v == 0.0))
                .count();
            assert_eq!(zero_rows, idx.len());
        }
    }

    #[test]
    fn time_mask_longer_than_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = time_span_mask(&ramp(5, 3), 10, 0.4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InputTooShort(_)));
    }

    #[test]
    fn freq_width_must_be_below_feature_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = freq_span_mask(&ramp(5, 27), 2, 27, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(AugmentSpec::default().validate(27).is_err());
        AugmentSpec::default().validate(83).unwrap();
    }

    #[test]
    fn freq_bands_stay_in_bounds() {
        let x = ramp(4, 83);
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (y, bands) = freq_span_mask(&x, 2, 27, &mut rng).unwrap();
            assert_eq!(bands.len(), 2);
            for b in &bands {
                assert!(b.len() <= 27 && b.end <= 83);
            }
            for c in 0..83 {
                let in_band = bands.iter().any(|b| b.contains(&c));
                assert_eq!(y.at(0, c) == 0.0, in_band);
            }
        }
    }

    #[test]
    fn zero_width_windows_leave_input_unchanged() {
        let x = ramp(4, 6);
        let record = AugmentRecord {
            freq_bands: vec![2..2, 5..5],
            ..Default::default()
        };
        assert_eq!(record.apply(&x, None).unwrap(), x);
        assert!(record.is_identity());
    }

    #[test]
    fn mixup_with_unit_beta_is_padded_first_input() {
        let x1 = ramp(3, 2);
        let x2 = ramp(5, 2).map(|v| -v);
        let y = mixup_with_beta(&x1, &x2, 1.0).unwrap();
        assert_eq!(y, x1.pad_rows(5).unwrap());
    }

    #[test]
    fn mixup_of_identical_inputs_is_a_fixed_point() {
        let x = ramp(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (y, beta) = mixup(&x, &x, 1.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&beta));
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs());
            }
        }
    }

    #[test]
    fn mixup_rejects_mismatched_feature_dims() {
        let err = mixup_with_beta(&ramp(3, 2), &ramp(3, 4), 0.5).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn mixup_is_pointwise_convex_combination() {
        let x1 = ramp(2, 2);
        let x2 = Tensor::from_fn(&[3, 2], |i| 10.0 * i as f64);
        let y = mixup_with_beta(&x1, &x2, 0.25).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.at(0, 1), 0.25 * 2.0 + 0.75 * 10.0);
        assert_eq!(y.at(2, 0), 0.75 * 40.0);
    }

    #[test]
    fn target_stage_is_identity() {
        let x = ramp(40, 16);
        let spec = AugmentSpec::for_feature_dim(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, rec) = augment(&x, &spec, Stage::XlstTarget, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(rec.is_identity());
    }

    #[test]
    fn supervised_with_all_flags_off_is_identity() {
        let x = ramp(40, 16);
        let spec = AugmentSpec {
            freq_max_width: 5,
            ..AugmentSpec::disabled()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, rec) = augment(&x, &spec, Stage::Supervised, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(rec.is_identity());
    }

    #[test]
    fn main_stage_masks_time_and_frequency() {
        let x = ramp(40, 16);
        let spec = AugmentSpec::for_feature_dim(16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, rec) = augment(&x, &spec, Stage::XlstMain, &mut rng).unwrap();
        assert!(!rec.time_indices.is_empty() && rec.time_indices.len() <= 10);
        assert_eq!(rec.freq_bands.len(), 2);
        assert!(rec.mixup.is_none());
    }

    #[test]
    fn augment_is_deterministic_in_seed() {
        let x = ramp(60, 16);
        let spec = AugmentSpec::for_feature_dim(16);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment(&x, &spec, Stage::Supervised, &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9).1, run(10).1);
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(derangement(1, &mut rng), vec![0]);
        for n in 2..10 {
            let p = derangement(n, &mut rng);
            let mut sorted = p.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }

    #[test]
    fn mixed_batch_records_reproduce_views() {
        let views: Vec<Tensor<f64>> = (0..4)
            .map(|k| ramp(5 + k, 3).map(|v| v * (k + 1) as f64))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mixed = mix_batch(&views, 1.0, &mut rng).unwrap();
        for (i, m) in mixed.iter().enumerate() {
            assert_ne!(m.partner, i);
            let rec = AugmentRecord {
                mixup: Some(Mixup {
                    partner: m.partner.to_string(),
                    beta: m.beta,
                }),
                ..Default::default()
            };
            let again = rec.apply(&views[i], Some(&views[m.partner])).unwrap();
            assert_eq!(again, m.features);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn masking_invariants(seed in any::<u64>(), t in 10usize..80, f in 6usize..20) {
            let x = Tensor::<f64>::from_fn(&[t, f], |i| (i as f64).sin() + 2.0);
            let spec = AugmentSpec::for_feature_dim(f);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (y, rec) = augment(&x, &spec, Stage::XlstMain, &mut rng).unwrap();
            // Unmasked entries are bit-identical; masked ones are zero.
            for r in 0..t {
                for c in 0..f {
                    let masked = rec.time_indices.contains(&r)
                        || rec.freq_bands.iter().any(|b| b.contains(&c));
                    if masked {
                        prop_assert_eq!(y.at(r, c), 0.0);
                    } else {
                        prop_assert_eq!(y.at(r, c).to_bits(), x.at(r, c).to_bits());
                    }
                }
            }
            prop_assert!(rec.time_indices.iter().all(|&i| i < t));
            // Idempotent on its own output and reproducible from the record.
            prop_assert_eq!(&rec.apply(&y, None).unwrap(), &y);
            prop_assert_eq!(&rec.apply(&x, None).unwrap(), &y);
        }
    }
}
