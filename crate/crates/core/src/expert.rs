//! Simulated annotators with a configurable label-noise rate.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::TripletDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Returns the true label with probability `1 − ρ`, otherwise a uniformly
/// drawn wrong category. Each draw is keyed by `(seed, instance_id)`, so
/// the answer for an instance never depends on query order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedExpert {
    noise_rate: f64,
    num_classes: usize,
    seed: u64,
}

impl SimulatedExpert {
    pub fn new(noise_rate: f64, num_classes: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(Error::InvalidArgument(format!("noise rate must lie in [0, 1], got {noise_rate}")));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument("an expert needs at least two categories".into()));
        }
        Ok(Self {
            noise_rate,
            num_classes,
            seed,
        })
    }

    pub fn noise_rate(&self) -> f64 {
        self.noise_rate
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn expert_label(&self, y_true: usize, instance_id: u64) -> Result<usize> {
        if y_true >= self.num_classes {
            return Err(Error::OutOfRange {
                index: y_true,
                len: self.num_classes,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(instance_id);
        // Both draws always happen so the stream layout is fixed.
        let u: f64 = rng.random();
        let offset = rng.random_range(1..self.num_classes);
        if u < self.noise_rate {
            Ok((y_true + offset) % self.num_classes)
        } else {
            Ok(y_true)
        }
    }

    /// Labels for every row of `ds`, keyed by its instance ids.
    pub fn label_dataset<T: Scalar>(&self, ds: &TripletDataset<T>) -> Result<Vec<usize>> {
        if ds.num_classes != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "expert has K = {}, dataset has K = {}",
                self.num_classes, ds.num_classes
            )));
        }
        (0..ds.len())
            .map(|i| self.expert_label(ds.label(i), ds.instance_id(i)))
            .collect()
    }
}

pub fn expert_onehot<T: Scalar>(m: usize, num_classes: usize) -> Result<Vec<T>> {
    if m >= num_classes {
        return Err(Error::OutOfRange {
            index: m,
            len: num_classes,
        });
    }
    let mut v = vec![T::zero(); num_classes];
    v[m] = T::one();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_endpoints() {
        let perfect = SimulatedExpert::new(0.0, 5, 3).unwrap();
        let adversarial = SimulatedExpert::new(1.0, 5, 3).unwrap();
        for id in 0..2000u64 {
            let y = (id % 5) as usize;
            assert_eq!(perfect.expert_label(y, id).unwrap(), y);
            assert_ne!(adversarial.expert_label(y, id).unwrap(), y);
        }
    }

    #[test]
    fn monte_carlo_agreement() {
        let n = 10_000;
        let rho = 0.3;
        let e = SimulatedExpert::new(rho, 4, 11).unwrap();
        let agree = (0..n as u64).filter(|&id| e.expert_label(1, id).unwrap() == 1).count();
        let acc = agree as f64 / n as f64;
        assert!((acc - 0.7).abs() <= 0.02, "agreement {acc}");
        let sigma = (rho * (1.0 - rho) / n as f64).sqrt();
        assert!((acc - 0.7).abs() <= 3.0 * sigma, "agreement {acc} outside 3σ");
    }

    #[test]
    fn wrong_labels_are_uniform_over_alternatives() {
        let e = SimulatedExpert::new(1.0, 4, 5).unwrap();
        let mut counts = [0usize; 4];
        for id in 0..12_000u64 {
            counts[e.expert_label(0, id).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            assert!((c as f64 - 4000.0).abs() < 250.0, "{counts:?}");
        }
    }

    #[test]
    fn keyed_by_instance_not_order() {
        let e = SimulatedExpert::new(0.5, 6, 9).unwrap();
        let forward: Vec<_> = (0..100u64).map(|id| e.expert_label(2, id).unwrap()).collect();
        let backward: Vec<_> = (0..100u64).rev().map(|id| e.expert_label(2, id).unwrap()).collect();
        assert!(forward.iter().eq(backward.iter().rev()));
        let other_seed = SimulatedExpert::new(0.5, 6, 10).unwrap();
        let shifted: Vec<_> = (0..100u64).map(|id| other_seed.expert_label(2, id).unwrap()).collect();
        assert_ne!(forward, shifted);
    }

    #[test]
    fn invalid_inputs() {
        assert!(SimulatedExpert::new(1.5, 3, 0).is_err());
        assert!(SimulatedExpert::new(0.1, 1, 0).is_err());
        let e = SimulatedExpert::new(0.1, 3, 0).unwrap();
        assert!(matches!(e.expert_label(3, 0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn onehot_encoding() {
        assert_eq!(expert_onehot::<f64>(0, 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(expert_onehot::<f64>(2, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        for m in 0..7 {
            assert_eq!(expert_onehot::<f64>(m, 7).unwrap().iter().sum::<f64>(), 1.0);
        }
        assert!(expert_onehot::<f64>(3, 3).is_err());
    }
}
