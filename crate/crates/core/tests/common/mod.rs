//! Pipeline fixtures shared by the integration tests.
#![allow(dead_code)]

use decode_core::cbm::{train_cbm, CbmTrainConfig, DcbmConfig, DcbmModel};
use decode_core::dataio::{generate_synthetic, ConceptGroups, SplitBundle, SyntheticConfig, SyntheticWorld};
use decode_core::intervene::PercentileBounds;

pub const DATA_SEED: u64 = 7;
pub const MODEL_SEED: u64 = 1;
pub const EXPERT_SEED: u64 = 3;

pub fn config(kappa: f64) -> SyntheticConfig {
    SyntheticConfig::default().with_completeness(kappa).with_seed(DATA_SEED)
}

pub fn bundle(kappa: f64) -> SplitBundle<f64> {
    generate_synthetic(&config(kappa)).unwrap()
}

/// Category templates behind [`bundle`].
pub fn templates(kappa: f64) -> Vec<Vec<u8>> {
    SyntheticWorld::build(&config(kappa)).unwrap().templates
}

pub fn small_bundle(kappa: f64, n_train: usize, n_test: usize) -> SplitBundle<f64> {
    generate_synthetic(&SyntheticConfig {
        n_train,
        n_val: n_train / 4,
        n_test,
        ..SyntheticConfig::default().with_completeness(kappa).with_seed(DATA_SEED)
    })
    .unwrap()
}

pub fn trained_cbm(b: &SplitBundle<f64>) -> DcbmModel<f64> {
    let model = DcbmModel::new(&DcbmConfig::for_bundle(b), MODEL_SEED);
    train_cbm(
        model,
        b,
        &CbmTrainConfig {
            seed: MODEL_SEED,
            ..CbmTrainConfig::default()
        },
    )
    .unwrap()
    .0
}

/// Every concept state reachable by the rectifier's moves: free concepts
/// flipped to the opposite bound or kept, and per group either untouched
/// or one member turned on with its siblings at their low
/// bounds. Returns the resulting logit rows.
pub fn reachable_states(original: &[f64], groups: &ConceptGroups, bounds: &PercentileBounds) -> Vec<Vec<f64>> {
    let mut states = vec![original.to_vec()];
    for j in groups.free_concepts() {
        let flipped = if original[j] >= 0.0 { bounds.low()[j] } else { bounds.high()[j] };
        let extra: Vec<Vec<f64>> = states
            .iter()
            .map(|s| {
                let mut t = s.clone();
                t[j] = flipped;
                t
            })
            .collect();
        states.extend(extra);
    }
    for g in groups.groups() {
        let mut next = Vec::new();
        for s in &states {
            next.push(s.clone());
            for &on in g {
                let mut t = s.clone();
                for &j in g {
                    t[j] = bounds.low()[j];
                }
                t[on] = bounds.high()[on];
                next.push(t);
            }
        }
        states = next;
    }
    states
}
