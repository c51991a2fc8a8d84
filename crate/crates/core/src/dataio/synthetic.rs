//! Linear-embedding synthetic data with a tunable concept/label alignment.
//!
//! Each category owns a binary concept template. An instance picks a base
//! category, perturbs its template, and then takes its label either from
//! the perturbed concepts (nearest template) or from a latent category
//! that the concepts know nothing about. Categories differ in how often
//! their concepts decide the label (the mean over categories is κ), so
//! concept-space regions differ in how trustworthy a concept-only
//! prediction is. Features mix both sources:
//! `x = W c + s·U z + ε`, with `z` the latent category as a one-hot vector.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ConceptGroups, SplitBundle, TripletDataset};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Standard deviation of the additive feature noise.
pub const FEATURE_NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub num_concepts: usize,
    pub feature_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Per-bit flip probability (per-group reassignment probability for grouped concepts).
    pub concept_noise: f64,
    /// Fraction of labels decided by the concepts (κ).
    pub completeness: f64,
    /// Scale of the latent-category direction in feature space.
    pub latent_scale: f64,
    pub groups: Vec<Vec<usize>>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_concepts: 12,
            feature_dim: 32,
            n_train: 3000,
            n_val: 500,
            n_test: 2000,
            concept_noise: 0.05,
            completeness: 1.0,
            latent_scale: 0.05,
            groups: vec![vec![0, 1, 2], vec![3, 4, 5]],
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn with_completeness(mut self, kappa: f64) -> Self {
        self.completeness = kappa;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<ConceptGroups> {
        for (name, p) in [("concept_noise", self.concept_noise), ("completeness", self.completeness)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.latent_scale >= 0.0 && self.latent_scale.is_finite()) {
            return Err(Error::InvalidArgument("latent_scale must be finite and non-negative".into()));
        }
        if self.num_classes < 2 || self.num_concepts == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument("need K ≥ 2, d ≥ 1 and D ≥ 1".into()));
        }
        if self.n_train == 0 {
            return Err(Error::InvalidArgument("empty training split".into()));
        }
        let groups = ConceptGroups::new(self.groups.clone(), self.num_concepts)?;
        let min_d = (self.num_classes as f64).log2().ceil() as usize;
        if self.completeness == 1.0 && self.num_concepts < min_d {
            return Err(Error::Infeasible(format!(
                "d = {} concepts cannot separate K = {} categories (need ≥ {min_d})",
                self.num_concepts, self.num_classes
            )));
        }
        // distinct templates available under the group constraints
        let free = groups.free_concepts().len() as u32;
        let capacity = groups
            .groups()
            .iter()
            .fold(2f64.powi(free as i32), |acc, g| acc * g.len() as f64);
        if capacity < self.num_classes as f64 {
            return Err(Error::Infeasible(format!(
                "only {capacity} distinct concept templates exist for K = {}; duplicates would be required",
                self.num_classes
            )));
        }
        Ok(groups)
    }
}

/// The fixed generative parameters shared by all splits.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub templates: Vec<Vec<u8>>,
    /// Per-category probability that the label follows the concepts; mean is κ.
    pub class_completeness: Vec<f64>,
    /// `D × d` concept embedding.
    pub concept_embedding: Matrix<f64>,
    /// `D × K` latent embedding (already scaled).
    pub latent_embedding: Matrix<f64>,
    pub groups: ConceptGroups,
}

/// Index of the template closest in Hamming distance; ties go to the lowest index.
pub fn nearest_template(concepts: &[u8], templates: &[Vec<u8>]) -> usize {
    let mut best = 0;
    let mut best_dist = usize::MAX;
    for (k, t) in templates.iter().enumerate() {
        let dist = hamming(concepts, t);
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn random_template(rng: &mut ChaCha8Rng, groups: &ConceptGroups, d: usize) -> Vec<u8> {
    let mut t = vec![0u8; d];
    for j in groups.free_concepts() {
        t[j] = rng.random_bool(0.5) as u8;
    }
    for g in groups.groups() {
        t[g[rng.random_range(0..g.len())]] = 1;
    }
    t
}

impl SyntheticWorld {
    pub fn build(config: &SyntheticConfig) -> Result<Self> {
        let groups = config.validate()?;
        let (k, d, dim) = (config.num_classes, config.num_concepts, config.feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        // Greedy max-min Hamming selection among random candidates.
        const CANDIDATES: usize = 64;
        const MAX_ROUNDS: usize = 64;
        let mut templates: Vec<Vec<u8>> = Vec::with_capacity(k);
        while templates.len() < k {
            let mut best: Option<(usize, Vec<u8>)> = None;
            for _ in 0..MAX_ROUNDS {
                for _ in 0..CANDIDATES {
                    let cand = random_template(&mut rng, &groups, d);
                    let min_dist = templates.iter().map(|t| hamming(t, &cand)).min().unwrap_or(d);
                    if min_dist > 0 && best.as_ref().is_none_or(|(b, _)| min_dist > *b) {
                        best = Some((min_dist, cand));
                    }
                }
                if best.is_some() {
                    break;
                }
            }
            match best {
                Some((_, t)) => templates.push(t),
                None => {
                    return Err(Error::Infeasible(
                        "could not draw distinct concept templates; increase d or relax groups".into(),
                    ))
                }
            }
        }

        // Spread per-category completeness around κ with mean exactly κ.
        let kappa = config.completeness;
        let spread = 2.0 * kappa.min(1.0 - kappa);
        let mut order: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let class_completeness = order
            .iter()
            .map(|&rank| {
                let u = (rank as f64 + 0.5) / k as f64 - 0.5;
                (kappa + spread * u).clamp(0.0, 1.0)
            })
            .collect();

        let mut gaussian = |rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("finite gaussian draws")
        };
        let concept_embedding = gaussian(dim, d, 1.0);
        let latent_embedding = gaussian(dim, k, config.latent_scale);

        Ok(Self {
            templates,
            class_completeness,
            concept_embedding,
            latent_embedding,
            groups,
        })
    }

    /// Inverse-CDF draw of the latent category with weights `1 − κ_k`,
    /// which keeps the label marginal uniform; uniform when every `κ_k = 1`.
    fn draw_latent(&self, u: f64) -> usize {
        let weights: Vec<f64> = self.class_completeness.iter().map(|c| 1.0 - c).collect();
        let total: f64 = weights.iter().sum();
        let k = weights.len();
        if total <= 0.0 {
            return ((u * k as f64) as usize).min(k - 1);
        }
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w / total;
            if u < acc {
                return i;
            }
        }
        k - 1
    }

    fn sample_split<T: Scalar>(
        &self,
        rng: &mut ChaCha8Rng,
        config: &SyntheticConfig,
        split: &str,
        n: usize,
        id_offset: u64,
    ) -> Result<TripletDataset<T>> {
        let (k, d, dim) = (config.num_classes, config.num_concepts, config.feature_dim);
        let free = self.groups.free_concepts();
        let mut features = Vec::with_capacity(n * dim);
        let mut concepts = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut c = vec![0u8; d];
        for _ in 0..n {
            // Fixed number of draws per instance, whatever the outcomes, so
            // that configs differing only in κ or noise stay coupled.
            let base = rng.random_range(0..k);
            c.copy_from_slice(&self.templates[base]);
            for &j in &free {
                if rng.random::<f64>() < config.concept_noise {
                    c[j] ^= 1;
                }
            }
            for g in self.groups.groups() {
                let flip = rng.random::<f64>() < config.concept_noise;
                let offset = rng.random_range(1..g.len());
                if flip {
                    let active = g.iter().position(|&j| c[j] == 1).expect("template satisfies groups");
                    c[g[active]] = 0;
                    c[g[(active + offset) % g.len()]] = 1;
                }
            }
            let latent = self.draw_latent(rng.random::<f64>());
            let follows_concepts = rng.random::<f64>() < self.class_completeness[base];
            let y = if follows_concepts {
                nearest_template(&c, &self.templates)
            } else {
                latent
            };
            for row in 0..dim {
                let mut v: f64 = self
                    .concept_embedding
                    .row(row)
                    .iter()
                    .zip(&c)
                    .map(|(&w, &cj)| w * cj as f64)
                    .sum();
                v += self.latent_embedding.get(row, latent);
                v += FEATURE_NOISE_STD * rng.sample::<f64, _>(StandardNormal);
                features.push(T::lit(v));
            }
            concepts.extend_from_slice(&c);
            labels.push(y as u32);
        }
        TripletDataset::new(
            split,
            config.seed,
            id_offset,
            k,
            self.groups.clone(),
            Matrix::from_vec(n, dim, features)?,
            concepts,
            labels,
        )
    }
}

/// Draws train/val/test splits; bitwise deterministic for a fixed config.
pub fn generate_synthetic<T: Scalar>(config: &SyntheticConfig) -> Result<SplitBundle<T>> {
    let world = SyntheticWorld::build(config)?;
    // Instance draws use their own stream so the world does not shift them.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let train = world.sample_split(&mut rng, config, "train", config.n_train, 0)?;
    let val = world.sample_split(&mut rng, config, "val", config.n_val, config.n_train as u64)?;
    let test = world.sample_split(
        &mut rng,
        config,
        "test",
        config.n_test,
        (config.n_train + config.n_val) as u64,
    )?;
    SplitBundle::new(train, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kappa: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_train: 400,
            n_val: 100,
            n_test: 3000,
            ..SyntheticConfig::default()
        }
        .with_completeness(kappa)
    }

    /// Brute-force oracle: enumerate every template per instance and keep the closest.
    fn oracle_accuracy(ds: &TripletDataset<f64>, templates: &[Vec<u8>]) -> f64 {
        let mut correct = 0;
        for i in 0..ds.len() {
            let row = ds.concept_row(i);
            let mut best = (usize::MAX, 0);
            for (k, t) in templates.iter().enumerate() {
                let dist: usize = row.iter().zip(t).map(|(a, b)| (a != b) as usize).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            correct += (best.1 == ds.label(i)) as usize;
        }
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn same_seed_same_bundle() {
        let a: SplitBundle<f64> = generate_synthetic(&small(0.5)).unwrap();
        let b: SplitBundle<f64> = generate_synthetic(&small(0.5)).unwrap();
        let bits = |s: &SplitBundle<f64>| -> Vec<u64> {
            s.splits().iter().flat_map(|d| d.features.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
        let c: SplitBundle<f64> = generate_synthetic(&small(0.5).with_seed(8)).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }

    #[test]
    fn complete_noiseless_concepts_determine_labels() {
        let cfg = SyntheticConfig {
            concept_noise: 0.0,
            ..small(1.0)
        };
        let world = SyntheticWorld::build(&cfg).unwrap();
        let bundle: SplitBundle<f64> = generate_synthetic(&cfg).unwrap();
        for ds in bundle.splits() {
            assert_eq!(oracle_accuracy(ds, &world.templates), 1.0);
        }
    }

    #[test]
    fn partial_completeness_matches_expected_oracle_accuracy() {
        let cfg = small(0.3);
        let world = SyntheticWorld::build(&cfg).unwrap();
        let bundle: SplitBundle<f64> = generate_synthetic(&cfg).unwrap();
        let acc = oracle_accuracy(&bundle.test, &world.templates);
        let expected = 0.3 + 0.7 / cfg.num_classes as f64;
        assert!((acc - expected).abs() <= 0.05, "oracle accuracy {acc} vs {expected}");
    }

    #[test]
    fn oracle_accuracy_is_monotone_in_completeness() {
        let accs: Vec<f64> = [0.2, 0.5, 0.8]
            .iter()
            .map(|&k| {
                let cfg = small(k);
                let world = SyntheticWorld::build(&cfg).unwrap();
                let b: SplitBundle<f64> = generate_synthetic(&cfg).unwrap();
                oracle_accuracy(&b.test, &world.templates)
            })
            .collect();
        assert!(accs[0] <= accs[1] && accs[1] <= accs[2], "{accs:?}");
    }

    #[test]
    fn groups_are_exclusive_in_every_row() {
        let cfg = SyntheticConfig {
            concept_noise: 0.3,
            ..small(0.7)
        };
        let b: SplitBundle<f64> = generate_synthetic(&cfg).unwrap();
        for ds in b.splits() {
            for i in 0..ds.len() {
                assert!(ds.groups.is_satisfied_by(ds.concept_row(i)), "row {i}");
            }
        }
    }

    #[test]
    fn label_marginal_is_roughly_uniform() {
        let cfg = SyntheticConfig {
            n_train: 6000,
            n_val: 10,
            n_test: 10,
            ..small(0.6)
        };
        let b: SplitBundle<f64> = generate_synthetic(&cfg).unwrap();
        let k = cfg.num_classes;
        let mut counts = vec![0usize; k];
        for &y in &b.train.labels {
            counts[y as usize] += 1;
        }
        let expected = b.train.len() as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // χ²(7) upper 0.1% quantile is 24.32
        assert!(chi2 < 24.32, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let cfg = SyntheticConfig {
            num_classes: 8,
            num_concepts: 3,
            groups: vec![vec![0, 1, 2]],
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate_synthetic::<f64>(&cfg), Err(Error::Infeasible(_))));
        let cfg = SyntheticConfig {
            num_classes: 16,
            num_concepts: 3,
            groups: vec![],
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate_synthetic::<f64>(&cfg), Err(Error::Infeasible(_))));
        let cfg = SyntheticConfig {
            concept_noise: 1.5,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic::<f64>(&cfg).is_err());
    }

    #[test]
    fn class_completeness_averages_to_kappa() {
        for kappa in [0.0, 0.3, 0.6, 1.0] {
            let w = SyntheticWorld::build(&small(kappa)).unwrap();
            let mean: f64 = w.class_completeness.iter().sum::<f64>() / w.class_completeness.len() as f64;
            assert!((mean - kappa).abs() < 1e-12);
            assert!(w.class_completeness.iter().all(|&c| (0.0..=1.0).contains(&c)));
        }
    }
}
