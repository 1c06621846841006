//! Cross-domain dataset composition: plain unions and k-way virtual
//! samples mixed with Beta-distributed weights.
//!
//! A virtual sample draws `k` distinct sources uniformly from the union of
//! all domains (cross-domain draws permitted), samples `k` i.i.d.
//! `Beta(mu, mu)` logits, softmax-normalizes them into convex weights and
//! forms the weighted sum of both images and per-pixel label
//! distributions. Composition happens ahead of training and is
//! deterministic per seed: virtual sample `i` draws from sub-stream `i` of
//! the configured seed, sources first, then the `k` Beta logits.

use crate::rng::{self, Rng};
use crate::tensor::{Shape, Tensor};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MixError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weights must sum to 1, got {0}")]
    WeightSumViolation(f64),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("need at least {needed} samples in the union, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
}

/// One labeled grayscale sample: image in `[0, 1]`, one-hot per-pixel
/// label, and provenance.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `(1, 1, H, W)`, values in `[0, 1]`.
    pub image: Tensor,
    /// `(1, num_classes, H, W)`, per-pixel channels summing to 1.
    pub label: Tensor,
    pub domain_id: usize,
    pub sample_id: String,
}

/// An ordered collection of original samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Count of samples per domain id.
    pub fn domain_histogram(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut h = std::collections::BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.domain_id).or_insert(0) += 1;
        }
        h
    }
}

/// Mixing hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct MixConfig {
    /// Sources per virtual sample.
    pub k: usize,
    /// Beta concentration; weights get more uniform as it grows.
    pub mu: f64,
    /// Virtual sample count; `None` defaults to twice the union size.
    pub virtual_count: Option<usize>,
    pub seed: u64,
    /// Append the original samples (with degenerate weights) after the
    /// virtual ones.
    pub include_originals: bool,
}

impl MixConfig {
    pub fn validate(&self) -> Result<(), MixError> {
        if self.k < 1 {
            return Err(MixError::InvalidHyperparameter("k must be >= 1".into()));
        }
        if !(self.mu > 0.0) {
            return Err(MixError::InvalidHyperparameter(format!(
                "mu must be positive, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// A mixed (or degenerate original) training sample: image, soft label,
/// the convex weights used, and the source sample ids.
#[derive(Clone, Debug)]
pub struct CompositeSample {
    pub image: Tensor,
    /// Soft per-pixel class distribution.
    pub label: Tensor,
    pub weights: Vec<f64>,
    pub sources: Vec<String>,
    /// Domain of the single source for degenerate samples, `None` for
    /// true mixtures.
    pub domain_id: Option<usize>,
}

impl CompositeSample {
    /// Wraps an original sample with weight `[1.0]`.
    pub fn degenerate(sample: &Sample) -> Self {
        CompositeSample {
            image: sample.image.clone(),
            label: sample.label.clone(),
            weights: vec![1.0],
            sources: vec![sample.sample_id.clone()],
            domain_id: Some(sample.domain_id),
        }
    }
}

/// The materialized training pool a search runs on.
#[derive(Clone, Debug, Default)]
pub struct CompositeDataset {
    pub items: Vec<CompositeSample>,
}

impl CompositeDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn from_originals(dataset: &Dataset) -> Self {
        CompositeDataset {
            items: dataset
                .samples
                .iter()
                .map(CompositeSample::degenerate)
                .collect(),
        }
    }
}

/// Softmax of raw mixing logits; output entries lie in `(0, 1)` and sum
/// to 1 up to rounding.
pub fn softmax_weights(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// One `Beta(mu, mu)` draw.
///
/// For `mu <= 1` this is Johnk's inverse-pair method; for `mu > 1` the
/// draw is `G1 / (G1 + G2)` with two Marsaglia-Tsang squeeze-rejection
/// `Gamma(mu)` variates. Both paths consume the generator in a fixed,
/// documented order, so streams replay exactly for a given seed.
pub fn beta_symmetric(mu: f64, rng: &mut Rng) -> f64 {
    assert!(mu > 0.0, "beta concentration must be positive");
    if mu <= 1.0 {
        // Johnk: accept (U^(1/mu), V^(1/mu)) when their sum is <= 1.
        loop {
            let x = rng::uniform_open(rng).powf(1.0 / mu);
            let y = rng::uniform_open(rng).powf(1.0 / mu);
            if x + y <= 1.0 && x + y > 0.0 {
                return x / (x + y);
            }
        }
    } else {
        let g1 = gamma_marsaglia_tsang(mu, rng);
        let g2 = gamma_marsaglia_tsang(mu, rng);
        g1 / (g1 + g2)
    }
}

/// Marsaglia-Tsang gamma sampling for shape >= 1.
fn gamma_marsaglia_tsang(shape: f64, rng: &mut Rng) -> f64 {
    debug_assert!(shape >= 1.0);
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng::standard_normal(rng);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = rng::uniform_open(rng);
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Draws `k` i.i.d. `Beta(mu, mu)` logits and softmax-normalizes them.
pub fn sample_mix_weights(k: usize, mu: f64, rng: &mut Rng) -> Result<Vec<f64>, MixError> {
    if k < 1 {
        return Err(MixError::InvalidHyperparameter("k must be >= 1".into()));
    }
    if !(mu > 0.0) {
        return Err(MixError::InvalidHyperparameter(format!(
            "mu must be positive, got {mu}"
        )));
    }
    let logits: Vec<f64> = (0..k).map(|_| beta_symmetric(mu, rng)).collect();
    Ok(softmax_weights(&logits))
}

/// Convex combination of `k` samples: weighted image sum and weighted
/// label sum, with provenance recorded.
pub fn make_composite(samples: &[&Sample], weights: &[f64]) -> Result<CompositeSample, MixError> {
    if samples.is_empty() {
        return Err(MixError::EmptyInput("no samples to mix".into()));
    }
    if samples.len() != weights.len() {
        return Err(MixError::ShapeMismatch(format!(
            "{} samples but {} weights",
            samples.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(MixError::WeightSumViolation(sum));
    }
    let img_shape = samples[0].image.shape();
    let lbl_shape = samples[0].label.shape();
    for s in samples {
        if s.image.shape() != img_shape || s.label.shape() != lbl_shape {
            return Err(MixError::ShapeMismatch(format!(
                "sample {} has image {} / label {}, expected {} / {}",
                s.sample_id,
                s.image.shape(),
                s.label.shape(),
                img_shape,
                lbl_shape
            )));
        }
    }

    let combine = |get: fn(&Sample) -> &Tensor, shape: Shape| {
        let mut out = Tensor::zeros(shape);
        for (s, &w) in samples.iter().zip(weights) {
            for (o, &v) in out.data_mut().iter_mut().zip(get(s).data()) {
                *o += w * v;
            }
        }
        out
    };

    // exact passthrough for the degenerate single-source case
    let (image, label) = if samples.len() == 1 && weights[0] == 1.0 {
        (samples[0].image.clone(), samples[0].label.clone())
    } else {
        (
            combine(|s| &s.image, img_shape),
            combine(|s| &s.label, lbl_shape),
        )
    };

    Ok(CompositeSample {
        image,
        label,
        weights: weights.to_vec(),
        sources: samples.iter().map(|s| s.sample_id.clone()).collect(),
        domain_id: if samples.len() == 1 {
            Some(samples[0].domain_id)
        } else {
            None
        },
    })
}

/// Concatenates datasets, preserving order and domain ids.
pub fn build_union(datasets: &[Dataset]) -> Result<Dataset, MixError> {
    if datasets.is_empty() {
        return Err(MixError::EmptyInput("no datasets to unite".into()));
    }
    let mut shape: Option<(Shape, Shape)> = None;
    let mut samples = Vec::with_capacity(datasets.iter().map(Dataset::len).sum());
    for d in datasets {
        for s in &d.samples {
            match shape {
                None => shape = Some((s.image.shape(), s.label.shape())),
                Some((is, ls)) => {
                    if s.image.shape() != is || s.label.shape() != ls {
                        return Err(MixError::ShapeMismatch(format!(
                            "sample {} does not match union geometry",
                            s.sample_id
                        )));
                    }
                }
            }
            samples.push(s.clone());
        }
    }
    Ok(Dataset::new(samples))
}

/// Materializes the composite training pool: `virtual_count` mixed samples
/// (sub-stream `i` of the seed drives virtual sample `i`), then the
/// originals when `include_originals` is set.
pub fn build_composite_dataset(
    datasets: &[Dataset],
    cfg: &MixConfig,
) -> Result<CompositeDataset, MixError> {
    cfg.validate()?;
    let union = build_union(datasets)?;
    if union.len() < cfg.k {
        return Err(MixError::InsufficientSamples {
            needed: cfg.k,
            got: union.len(),
        });
    }
    let m = cfg.virtual_count.unwrap_or(2 * union.len());

    let mut items: Vec<CompositeSample> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, i as u64);
            let picks = rng::sample_distinct(&mut rng, union.len(), cfg.k);
            let weights =
                sample_mix_weights(cfg.k, cfg.mu, &mut rng).expect("config validated above");
            let sources: Vec<&Sample> = picks.iter().map(|&p| &union.samples[p]).collect();
            make_composite(&sources, &weights).expect("union geometry validated above")
        })
        .collect();

    if cfg.include_originals {
        items.extend(union.samples.iter().map(CompositeSample::degenerate));
    }
    Ok(CompositeDataset { items })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sample(domain: usize, idx: usize, img: f64, fg_pixel: Option<(usize, usize)>) -> Sample {
        let shape = Shape::new(1, 1, 4, 4);
        let image = Tensor::filled(shape, img);
        let mut label = Tensor::zeros(Shape::new(1, 2, 4, 4));
        for h in 0..4 {
            for w in 0..4 {
                let fg = fg_pixel == Some((h, w));
                label.set(0, 0, h, w, if fg { 0.0 } else { 1.0 });
                label.set(0, 1, h, w, if fg { 1.0 } else { 0.0 });
            }
        }
        Sample {
            image,
            label,
            domain_id: domain,
            sample_id: format!("d{domain}/{idx}"),
        }
    }

    fn toy_dataset(domain: usize, n: usize) -> Dataset {
        Dataset::new((0..n).map(|i| toy_sample(domain, i, 0.5, None)).collect())
    }

    #[test]
    fn singleton_softmax_is_one() {
        let mut rng = rng::seeded(1);
        assert_eq!(sample_mix_weights(1, 0.5, &mut rng).unwrap(), vec![1.0]);
        assert_eq!(sample_mix_weights(1, 7.0, &mut rng).unwrap(), vec![1.0]);
    }

    #[test]
    fn equal_logits_softmax_to_uniform() {
        for k in [2, 3, 5] {
            let w = softmax_weights(&vec![0.37; k]);
            for v in w {
                assert!((v - 1.0 / k as f64).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let mut rng = rng::seeded(1);
        assert!(matches!(
            sample_mix_weights(0, 1.0, &mut rng),
            Err(MixError::InvalidHyperparameter(_))
        ));
        assert!(matches!(
            sample_mix_weights(2, 0.0, &mut rng),
            Err(MixError::InvalidHyperparameter(_))
        ));
        assert!(matches!(
            sample_mix_weights(2, -1.0, &mut rng),
            Err(MixError::InvalidHyperparameter(_))
        ));
    }

    /// Monte-Carlo law for k = 2, mu = 1: weights pair-sum to one, the
    /// first weight averages 0.5, and softmax of (0,1)-valued logits keeps
    /// every weight inside (1/(1+e), e/(1+e)).
    #[test]
    fn two_way_weights_follow_the_softmax_beta_law() {
        let mut rng = rng::seeded(20240);
        let draws = 100_000;
        let mut mean_first = 0.0;
        for _ in 0..draws {
            let w = sample_mix_weights(2, 1.0, &mut rng).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            for &v in &w {
                assert!(v > 0.2689 && v < 0.7311, "weight {v} out of softmax range");
            }
            mean_first += w[0];
        }
        mean_first /= draws as f64;
        assert!(
            (mean_first - 0.5).abs() <= 0.01,
            "mean first weight {mean_first}"
        );
    }

    #[test]
    fn beta_mean_is_half_for_large_mu_too() {
        // exercises the gamma path (mu > 1)
        let mut rng = rng::seeded(7);
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| beta_symmetric(4.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "beta(4,4) mean {mean}");
    }

    #[test]
    fn degenerate_composite_is_bit_exact() {
        let s = toy_sample(0, 0, 0.37, Some((1, 2)));
        let c = make_composite(&[&s], &[1.0]).unwrap();
        assert_eq!(c.image, s.image);
        assert_eq!(c.label, s.label);
        assert_eq!(c.weights, vec![1.0]);
    }

    #[test]
    fn half_half_mix_of_disjoint_masks() {
        let a = toy_sample(0, 0, 0.0, Some((0, 0)));
        let b = toy_sample(1, 0, 1.0, Some((3, 3)));
        let c = make_composite(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert_eq!(c.label.get(0, 1, 0, 0), 0.5);
        assert_eq!(c.label.get(0, 1, 3, 3), 0.5);
        assert_eq!(c.label.get(0, 1, 1, 1), 0.0);
        // label mass still sums to one per pixel
        for h in 0..4 {
            for w in 0..4 {
                let mass = c.label.get(0, 0, h, w) + c.label.get(0, 1, h, w);
                assert!((mass - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn three_way_constant_mix_is_scalar_arithmetic() {
        let a = toy_sample(0, 0, 0.0, None);
        let b = toy_sample(1, 0, 1.0, None);
        let c3 = toy_sample(2, 0, 1.0, None);
        let c = make_composite(&[&a, &b, &c3], &[0.2, 0.3, 0.5]).unwrap();
        for &v in c.image.data() {
            assert!((v - 0.8).abs() <= 1e-12);
        }
    }

    #[test]
    fn weight_sum_violation_is_rejected() {
        let a = toy_sample(0, 0, 0.0, None);
        let b = toy_sample(1, 0, 1.0, None);
        assert!(matches!(
            make_composite(&[&a, &b], &[0.6, 0.6]),
            Err(MixError::WeightSumViolation(_))
        ));
    }

    #[test]
    fn union_concatenates_and_preserves_histograms() {
        let sets = [toy_dataset(0, 3), toy_dataset(1, 4), toy_dataset(2, 5)];
        let u = build_union(&sets).unwrap();
        assert_eq!(u.len(), 12);
        let h = u.domain_histogram();
        assert_eq!(h[&0], 3);
        assert_eq!(h[&1], 4);
        assert_eq!(h[&2], 5);

        let single = build_union(&sets[..1]).unwrap();
        assert_eq!(single.len(), 3);
        assert_eq!(single.samples[0].sample_id, sets[0].samples[0].sample_id);

        assert!(matches!(build_union(&[]), Err(MixError::EmptyInput(_))));
    }

    #[test]
    fn zero_virtual_plus_originals_is_exactly_the_union() {
        let sets = [toy_dataset(0, 3), toy_dataset(1, 2)];
        let cfg = MixConfig {
            k: 2,
            mu: 1.0,
            virtual_count: Some(0),
            seed: 5,
            include_originals: true,
        };
        let pool = build_composite_dataset(&sets, &cfg).unwrap();
        let union = build_union(&sets).unwrap();
        assert_eq!(pool.len(), union.len());
        for (c, s) in pool.items.iter().zip(&union.samples) {
            assert_eq!(c.image, s.image);
            assert_eq!(c.sources, vec![s.sample_id.clone()]);
        }
    }

    #[test]
    fn composite_dataset_is_deterministic_per_seed() {
        let sets = [toy_dataset(0, 5), toy_dataset(1, 5)];
        let cfg = MixConfig {
            k: 3,
            mu: 0.5,
            virtual_count: Some(20),
            seed: 99,
            include_originals: true,
        };
        let a = build_composite_dataset(&sets, &cfg).unwrap();
        let b = build_composite_dataset(&sets, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.weights, y.weights);
            assert_eq!(x.sources, y.sources);
        }
    }

    #[test]
    fn insufficient_union_is_rejected() {
        let sets = [toy_dataset(0, 2)];
        let cfg = MixConfig {
            k: 3,
            mu: 1.0,
            virtual_count: Some(1),
            seed: 0,
            include_originals: false,
        };
        assert!(matches!(
            build_composite_dataset(&sets, &cfg),
            Err(MixError::InsufficientSamples { .. })
        ));
    }

    /// Combinatorial oracle: with two domains of sizes n1, n2 the expected
    /// cross-domain fraction among k = 2 draws is n1*n2 / C(n1+n2, 2).
    #[test]
    fn cross_domain_pair_frequency_matches_combinatorics() {
        let (n1, n2) = (6usize, 4usize);
        let sets = [toy_dataset(0, n1), toy_dataset(1, n2)];
        let expected = (n1 * n2) as f64 / ((n1 + n2) * (n1 + n2 - 1) / 2) as f64;
        let mut cross = 0usize;
        let mut total = 0usize;
        for seed in 0..20 {
            let cfg = MixConfig {
                k: 2,
                mu: 1.0,
                virtual_count: Some(100),
                seed,
                include_originals: false,
            };
            let pool = build_composite_dataset(&sets, &cfg).unwrap();
            for item in &pool.items {
                let d0 = item.sources[0].starts_with("d0");
                let d1 = item.sources[1].starts_with("d0");
                if d0 != d1 {
                    cross += 1;
                }
                total += 1;
            }
        }
        let frac = cross as f64 / total as f64;
        assert!(
            (frac - expected).abs() <= 0.1,
            "cross fraction {frac}, expected {expected}"
        );
    }

    #[test]
    fn mixes_are_convex_and_affine() {
        // seeded sweep standing in for the convexity/affinity properties
        let mut rng = rng::seeded(314);
        for trial in 0..50 {
            let k = 2 + trial % 3;
            let samples: Vec<Sample> = (0..k)
                .map(|i| {
                    let v = rng::uniform_in(&mut rng, 0.0, 1.0);
                    toy_sample(i, trial, v, Some((i % 4, (i + trial) % 4)))
                })
                .collect();
            let refs: Vec<&Sample> = samples.iter().collect();
            let weights = sample_mix_weights(k, 0.7, &mut rng).unwrap();
            let c = make_composite(&refs, &weights).unwrap();

            let lo = samples
                .iter()
                .map(|s| s.image.data()[0])
                .fold(f64::INFINITY, f64::min);
            let hi = samples
                .iter()
                .map(|s| s.image.data()[0])
                .fold(f64::NEG_INFINITY, f64::max);
            for &v in c.image.data() {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }

            // one-hot weights reproduce the hot source
            let mut hot = vec![0.0; k];
            hot[trial % k] = 1.0;
            let d = make_composite(&refs, &hot).unwrap();
            assert!(d.image.max_abs_diff(&samples[trial % k].image) <= 1e-15);
            assert!(d.label.max_abs_diff(&samples[trial % k].label) <= 1e-15);
        }
    }
}
