//! Metrics over routed predictions, λ sweeps, strategy-weighted concept
//! heatmaps and CSV/JSON emission.

mod emit;
mod sweep;

use serde::{Deserialize, Serialize};

pub use emit::{emit, Emit, OutputFormat};
pub use sweep::{sweep_lambda, sweep_lambda_with_models, CoverageCurve, CoveragePoint, SweepMember, DEFAULT_LAMBDA_GRID};

use crate::cbm::DcbmModel;
use crate::dataio::TripletDataset;
use crate::error::{Error, Result};
use crate::expert::SimulatedExpert;
use crate::scalar::Scalar;
use crate::strategy::{route_all, FusionNet, GatingNet, RoutingInputs, StrategyId, NUM_STRATEGIES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lambda: f64,
    pub rho: f64,
    pub seed: u64,
    pub n: usize,
    pub system_accuracy: f64,
    pub ai_accuracy: f64,
    pub expert_accuracy: f64,
    pub concept_accuracy: f64,
    /// Fraction of instances routed to AI+Human or Defer-to-Human.
    pub participation_ratio: f64,
    /// Instances per strategy, in strategy order.
    pub strategy_counts: [usize; NUM_STRATEGIES],
}

/// Routes every instance of `ds` through the gate and fusion head using the
/// instance-keyed expert, and reports accuracies and strategy usage. The
/// recorded seed is the expert's.
pub fn evaluate<T: Scalar>(
    model: &DcbmModel<T>,
    gate: &GatingNet<T>,
    fusion: &FusionNet<T>,
    expert: &SimulatedExpert,
    ds: &TripletDataset<T>,
    lambda: f64,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    if fusion.num_classes() != model.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "fusion head has K = {}, model has K = {}",
            fusion.num_classes(),
            model.num_classes()
        )));
    }
    let inputs = RoutingInputs::build(model, gate.mode, ds, expert)?;
    if inputs.gate_inputs.cols() != gate.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "gate expects {} inputs, got {}",
            gate.input_dim(),
            inputs.gate_inputs.cols()
        )));
    }
    let (_, chosen, preds) = route_all(gate, fusion, &inputs)?;
    let n = ds.len();
    let frac = |hits: usize| hits as f64 / n as f64;
    let mut strategy_counts = [0usize; NUM_STRATEGIES];
    for s in &chosen {
        strategy_counts[s.index()] += 1;
    }
    let system = (0..n).filter(|&i| preds[i] == inputs.labels[i]).count();
    let ai = (0..n).filter(|&i| inputs.ai_prediction(i) == inputs.labels[i]).count();
    let human = (0..n).filter(|&i| inputs.expert_labels[i] == inputs.labels[i]).count();
    let d = ds.num_concepts();
    let concept_hits = (0..n)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .filter(|&(i, j)| (inputs.concept_probs.get(i, j) >= T::lit(0.5)) == (ds.concept_row(i)[j] == 1))
        .count();
    Ok(EvalReport {
        lambda,
        rho: expert.noise_rate(),
        seed: expert.seed(),
        n,
        system_accuracy: frac(system),
        ai_accuracy: frac(ai),
        expert_accuracy: frac(human),
        concept_accuracy: concept_hits as f64 / (n * d.max(1)) as f64,
        participation_ratio: frac(strategy_counts[1] + strategy_counts[2]),
        strategy_counts,
    })
}

/// Per-strategy weighted mean concept probability. A row is `None` when
/// the gate puts zero total mass on that strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptStrategyHeatmap {
    pub rows: [Option<Vec<f64>>; NUM_STRATEGIES],
    pub num_concepts: usize,
}

impl ConceptStrategyHeatmap {
    pub fn row(&self, s: StrategyId) -> Option<&[f64]> {
        self.rows[s.index()].as_deref()
    }
}

pub fn concept_strategy_heatmap<T: Scalar>(
    model: &DcbmModel<T>,
    gate: &GatingNet<T>,
    ds: &TripletDataset<T>,
) -> Result<ConceptStrategyHeatmap> {
    model.check_compatible(ds)?;
    let probs = model.predict_concepts(&ds.features)?.probs;
    let dists = gate.gate(model, &ds.features)?;
    let d = ds.num_concepts();
    let mut sums = [vec![0.0f64; d], vec![0.0; d], vec![0.0; d]];
    let mut weight = [0.0f64; NUM_STRATEGIES];
    for (i, r) in dists.iter().enumerate() {
        for s in 0..NUM_STRATEGIES {
            let w = r.as_array()[s].as_f64();
            weight[s] += w;
            for j in 0..d {
                sums[s][j] += w * probs.get(i, j).as_f64();
            }
        }
    }
    let rows = [0, 1, 2].map(|s| {
        (weight[s] > 0.0).then(|| sums[s].iter().map(|v| (v / weight[s]).clamp(0.0, 1.0)).collect())
    });
    Ok(ConceptStrategyHeatmap { rows, num_concepts: d })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either input is constant or the lengths differ or are below two.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbm::DcbmConfig;
    use crate::dataio::{generate_synthetic, SyntheticConfig};
    use crate::strategy::GateInput;
    use approx::assert_abs_diff_eq;

    fn setup() -> (DcbmModel<f64>, TripletDataset<f64>) {
        let b = generate_synthetic::<f64>(&SyntheticConfig {
            n_train: 10,
            n_val: 10,
            n_test: 300,
            ..SyntheticConfig::default()
        })
        .unwrap();
        (DcbmModel::new(&DcbmConfig::for_bundle(&b), 2), b.test)
    }

    #[test]
    fn forced_ai_only_matches_standalone_accuracy() {
        let (model, ds) = setup();
        let gate = GatingNet::forced(GateInput::Concept, ds.num_concepts(), StrategyId::AiOnly);
        let expert = SimulatedExpert::new(0.3, ds.num_classes, 4).unwrap();
        let fusion = FusionNet::pass_through(ds.num_classes);
        let r = evaluate(&model, &gate, &fusion, &expert, &ds, 0.0).unwrap();
        assert_eq!(r.participation_ratio, 0.0);
        assert_eq!(r.system_accuracy, r.ai_accuracy);
        assert_eq!(r.strategy_counts.iter().sum::<usize>(), ds.len());
    }

    #[test]
    fn forced_defer_matches_expert_accuracy() {
        let (model, ds) = setup();
        let gate = GatingNet::forced(GateInput::Image, ds.feature_dim(), StrategyId::DeferToHuman);
        let expert = SimulatedExpert::new(0.3, ds.num_classes, 4).unwrap();
        let r = evaluate(&model, &gate, &FusionNet::pass_through(ds.num_classes), &expert, &ds, 0.0).unwrap();
        assert_eq!(r.participation_ratio, 1.0);
        assert_eq!(r.system_accuracy, r.expert_accuracy);
        assert_eq!(r.strategy_counts, [0, 0, ds.len()]);
        let sigma = (0.7f64 * 0.3 / ds.len() as f64).sqrt();
        assert!((r.system_accuracy - 0.7).abs() <= 3.0 * sigma, "{}", r.system_accuracy);
    }

    #[test]
    fn heatmap_matches_brute_force() {
        let (model, ds) = setup();
        let gate = GatingNet::<f64>::new(GateInput::Concept, ds.num_concepts(), false, 8);
        let h = concept_strategy_heatmap(&model, &gate, &ds).unwrap();
        let probs = model.predict_concepts(&ds.features).unwrap().probs;
        let r = gate.gate(&model, &ds.features).unwrap();
        for s in 0..3 {
            let row = h.rows[s].as_ref().unwrap();
            for j in 0..ds.num_concepts() {
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..ds.len() {
                    num += r[i].as_array()[s] * probs.get(i, j);
                    den += r[i].as_array()[s];
                }
                assert_abs_diff_eq!(row[j], num / den, epsilon = 1e-12);
                assert!((0.0..=1.0).contains(&row[j]));
            }
        }
    }

    #[test]
    fn heatmap_under_uniform_and_confident_gates() {
        let (model, ds) = setup();
        let uniform = GatingNet::constant(GateInput::Concept, ds.num_concepts(), [0.0; 3]);
        let h = concept_strategy_heatmap(&model, &uniform, &ds).unwrap();
        let probs = model.predict_concepts(&ds.features).unwrap().probs;
        for j in 0..ds.num_concepts() {
            let mean = (0..ds.len()).map(|i| probs.get(i, j)).sum::<f64>() / ds.len() as f64;
            for s in 0..3 {
                assert_abs_diff_eq!(h.rows[s].as_ref().unwrap()[j], mean, epsilon = 1e-12);
            }
        }
        // exp(-800) underflows to exactly zero mass on strategies 2 and 3.
        let confident = GatingNet::constant(GateInput::Concept, ds.num_concepts(), [800.0, 0.0, 0.0]);
        let h = concept_strategy_heatmap(&model, &confident, &ds).unwrap();
        assert!(h.row(StrategyId::AiOnly).is_some());
        assert!(h.row(StrategyId::AiHuman).is_none());
        assert!(h.row(StrategyId::DeferToHuman).is_none());
    }

    #[test]
    fn spearman_reference_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        // Ties: ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]; value from scipy.stats.spearmanr.
        let rho = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(rho, 0.9486832980505138, epsilon = 1e-14);
    }
}
