//! Stage-2 training of the gate and the fusion head over a frozen model.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    fuse_for, hard_pseudo_label, soft_pseudo_label, strategy_loss, strategy_penalties, FusionNet, GateInput,
    GatingNet, LabelKind, PseudoLabel, StrategyDistribution, StrategyId, HUMAN_MASK, NUM_STRATEGIES,
    STRATEGY_PROB_FLOOR,
};
use crate::cbm::DcbmModel;
use crate::dataio::{SplitBundle, TripletDataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::expert::{expert_onehot, SimulatedExpert};
use crate::numerics::divergence::cross_entropy_with_grad;
use crate::numerics::{argmax, softmax_backward, Matrix, Sgd};
use crate::scalar::Scalar;

/// Everything stage 2 reads per instance, computed once from the frozen model.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingInputs<T> {
    pub gate_inputs: Matrix<T>,
    /// Full model logits `f(c_exp) + f̃(c_imp)`.
    pub model_logits: Matrix<T>,
    pub concept_probs: Matrix<T>,
    pub expert_labels: Vec<usize>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> RoutingInputs<T> {
    pub fn build(
        model: &DcbmModel<T>,
        mode: GateInput,
        ds: &TripletDataset<T>,
        expert: &SimulatedExpert,
    ) -> Result<Self> {
        model.check_compatible(ds)?;
        let act = model.predict_concepts(&ds.features)?;
        let model_logits = model.label_from_activations(&act)?;
        let gate_inputs = match mode {
            GateInput::Concept => act.probs.clone(),
            GateInput::Image => ds.features.clone(),
        };
        Ok(Self {
            gate_inputs,
            model_logits,
            concept_probs: act.probs,
            expert_labels: expert.label_dataset(ds)?,
            labels: (0..ds.len()).map(|i| ds.label(i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.model_logits.cols()
    }

    pub fn ai_prediction(&self, i: usize) -> usize {
        argmax(self.model_logits.row(i))
    }

    pub fn expert_onehot(&self, i: usize) -> Vec<T> {
        expert_onehot(self.expert_labels[i], self.num_classes()).expect("expert label within range")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrainConfig {
    /// Weight on the human-involvement cost.
    pub lambda: f64,
    /// Weight on the final classification loss.
    pub alpha: f64,
    /// Extra penalty for expert-involving strategies inside soft labels.
    pub beta: f64,
    pub pseudo_label: LabelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub gate_input: GateInput,
    pub defer_only: bool,
}

impl Default for GateTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            alpha: 1.0,
            beta: 0.5,
            pseudo_label: LabelKind::Soft,
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            gate_input: GateInput::Concept,
            defer_only: false,
        }
    }
}

impl GateTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Fresh gate (seeded) and a pass-through fusion head for `model`.
    pub fn init_networks<T: Scalar>(&self, model: &DcbmModel<T>) -> (GatingNet<T>, FusionNet<T>) {
        let gate = GatingNet::new(
            self.gate_input,
            self.gate_input.width(model),
            self.defer_only,
            derive_seed(self.seed, 0x9a7e),
        );
        (gate, FusionNet::pass_through(model.num_classes()))
    }
}

/// Pseudo-labels for `rows`, using the current fusion head for soft penalties.
pub fn pseudo_labels_for<T: Scalar>(
    inputs: &RoutingInputs<T>,
    rows: &[usize],
    fusion: &FusionNet<T>,
    config: &GateTrainConfig,
) -> Result<Vec<PseudoLabel<T>>> {
    rows.iter()
        .map(|&i| {
            let y = inputs.labels[i];
            let q = match config.pseudo_label {
                LabelKind::Hard => hard_pseudo_label(inputs.ai_prediction(i) == y, inputs.expert_labels[i] == y),
                LabelKind::Soft => {
                    let l = strategy_penalties(
                        inputs.model_logits.row(i),
                        &inputs.expert_onehot(i),
                        y,
                        fusion,
                        T::lit(config.beta),
                    )?;
                    soft_pseudo_label(&l)?
                }
            };
            Ok(if config.defer_only { q.without_collaboration() } else { q })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Loss {
    pub total: f64,
    pub strategy: f64,
    pub classification: f64,
    pub cost: f64,
}

/// Mean `L_strategy + α·CE(y, ŷ) + λ·cost(r)` over `rows`, with targets held
/// fixed. Fusion inputs follow each target's strategy. With `with_grad`
/// both stacks receive parameter gradients.
pub fn stage2_objective<T: Scalar>(
    gate: &mut GatingNet<T>,
    fusion: &mut FusionNet<T>,
    inputs: &RoutingInputs<T>,
    rows: &[usize],
    targets: &[PseudoLabel<T>],
    config: &GateTrainConfig,
    with_grad: bool,
) -> Result<Stage2Loss> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if targets.len() != rows.len() {
        return Err(Error::shape("stage-2 targets", rows.len(), targets.len()));
    }
    let b = rows.len();
    let k = inputs.num_classes();
    let inv_b = T::one() / T::lit(b as f64);
    let (alpha, lambda) = (T::lit(config.alpha), T::lit(config.lambda));
    let floor = T::lit(STRATEGY_PROB_FLOOR);

    let gate_logits = gate.stack.forward(&inputs.gate_inputs.select_rows(rows))?;
    let dists = gate.normalize(&gate_logits);
    let mut fused = Matrix::zeros(b, 2 * k);
    for (bi, (&i, q)) in rows.iter().zip(targets).enumerate() {
        let row = fuse_for(q.target(), inputs.model_logits.row(i), &inputs.expert_onehot(i));
        fused.row_mut(bi).copy_from_slice(&row);
    }
    let yhat = fusion.stack.forward(&fused)?;

    let (mut l_strat, mut l_cls, mut l_cost) = (T::zero(), T::zero(), T::zero());
    let mut grad_gate = Matrix::zeros(b, NUM_STRATEGIES);
    let mut grad_fusion = Matrix::zeros(b, k);
    for (bi, (&i, q)) in rows.iter().zip(targets).enumerate() {
        let r: &StrategyDistribution<T> = &dists[bi];
        l_strat += strategy_loss(r, q);
        l_cost += super::cost(r);
        let (ce, g) = cross_entropy_with_grad(inputs.labels[i], yhat.row(bi));
        l_cls += ce;
        for j in 0..k {
            grad_fusion.set(bi, j, alpha * g[j] * inv_b);
        }
        let rv = r.as_array();
        let mut grad_r = [T::zero(); NUM_STRATEGIES];
        for s in 0..NUM_STRATEGIES {
            if q.q[s] > T::zero() && rv[s] > floor {
                grad_r[s] = -q.q[s] / rv[s];
            }
            if HUMAN_MASK[s] {
                grad_r[s] += lambda;
            }
        }
        for (s, g) in softmax_backward(rv, &grad_r).into_iter().enumerate() {
            grad_gate.set(bi, s, g * inv_b);
        }
    }
    let (l_strat, l_cls, l_cost) = (l_strat * inv_b, l_cls * inv_b, l_cost * inv_b);
    let total = l_strat + alpha * l_cls + lambda * l_cost;
    if !total.is_finite() {
        return Err(Error::NonFinite("stage-2 loss"));
    }
    if with_grad {
        gate.stack.backward(&grad_gate)?;
        fusion.stack.backward(&grad_fusion)?;
    }
    Ok(Stage2Loss {
        total: total.as_f64(),
        strategy: l_strat.as_f64(),
        classification: l_cls.as_f64(),
        cost: l_cost.as_f64(),
    })
}

/// Per-instance routing decisions and system predictions.
pub(crate) fn route_all<T: Scalar>(
    gate: &GatingNet<T>,
    fusion: &FusionNet<T>,
    inputs: &RoutingInputs<T>,
) -> Result<(Vec<StrategyDistribution<T>>, Vec<StrategyId>, Vec<usize>)> {
    let dists = gate.distributions(&inputs.gate_inputs)?;
    let k = inputs.num_classes();
    let mut fused = Matrix::zeros(inputs.len(), 2 * k);
    let chosen: Vec<StrategyId> = dists.iter().map(|r| r.chosen()).collect();
    for (i, &s) in chosen.iter().enumerate() {
        fused
            .row_mut(i)
            .copy_from_slice(&fuse_for(s, inputs.model_logits.row(i), &inputs.expert_onehot(i)));
    }
    let yhat = fusion.predict(&fused)?;
    let preds = yhat.iter_rows().map(argmax).collect();
    Ok((dists, chosen, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEpoch {
    pub epoch: usize,
    pub loss: Stage2Loss,
    pub val_accuracy: f64,
    pub val_participation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateHistory {
    pub epochs: Vec<GateEpoch>,
}

/// Mini-batch SGD on the stage-2 objective over the train split. Targets
/// are recomputed per batch from the current fusion head and treated as
/// constants. Aborts with [`Error::Diverged`] on a non-finite loss.
pub fn train_gate<T: Scalar>(
    mut gate: GatingNet<T>,
    mut fusion: FusionNet<T>,
    model: &DcbmModel<T>,
    bundle: &SplitBundle<T>,
    expert: &SimulatedExpert,
    config: &GateTrainConfig,
) -> Result<(GatingNet<T>, FusionNet<T>, GateHistory)> {
    config.validate()?;
    if gate.defer_only != config.defer_only || gate.mode != config.gate_input {
        return Err(Error::InvalidArgument(
            "gate mode or defer-only flag disagrees with the training config".into(),
        ));
    }
    if fusion.num_classes() != model.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "fusion head has K = {}, model has K = {}",
            fusion.num_classes(),
            model.num_classes()
        )));
    }
    let train = RoutingInputs::build(model, gate.mode, &bundle.train, expert)?;
    if train.gate_inputs.cols() != gate.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "gate expects {} inputs, model provides {}",
            gate.input_dim(),
            train.gate_inputs.cols()
        )));
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let val = if bundle.val.is_empty() {
        None
    } else {
        Some(RoutingInputs::build(model, gate.mode, &bundle.val, expert)?)
    };

    let lr = T::lit(config.learning_rate);
    let mu = T::lit(config.momentum);
    let mut opt_gate = Sgd::new(lr, mu)?;
    let mut opt_fusion = Sgd::new(lr, mu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5ec2));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = GateHistory::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for batch in order.chunks(config.batch_size) {
            let targets = pseudo_labels_for(&train, batch, &fusion, config)?;
            let loss = match stage2_objective(&mut gate, &mut fusion, &train, batch, &targets, config, true) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        stage: "stage-2",
                        epoch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let w = batch.len() as f64;
            sums[0] += loss.total * w;
            sums[1] += loss.strategy * w;
            sums[2] += loss.classification * w;
            sums[3] += loss.cost * w;
            opt_gate.step(&mut gate.stack)?;
            opt_fusion.step(&mut fusion.stack)?;
            if gate.stack.parameters().iter().chain(fusion.stack.parameters().iter()).any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    stage: "stage-2",
                    epoch,
                    loss: loss.total,
                });
            }
        }
        let n = train.len() as f64;
        let (val_accuracy, val_participation) = match &val {
            Some(v) => {
                let (_, chosen, preds) = route_all(&gate, &fusion, v)?;
                let acc = preds.iter().zip(&v.labels).filter(|(p, y)| p == y).count() as f64 / v.len() as f64;
                let part = chosen.iter().filter(|s| s.uses_expert()).count() as f64 / v.len() as f64;
                (acc, part)
            }
            None => (f64::NAN, f64::NAN),
        };
        history.epochs.push(GateEpoch {
            epoch,
            loss: Stage2Loss {
                total: sums[0] / n,
                strategy: sums[1] / n,
                classification: sums[2] / n,
                cost: sums[3] / n,
            },
            val_accuracy,
            val_participation,
        });
    }
    gate.stack.clear_cache();
    fusion.stack.clear_cache();
    Ok((gate, fusion, history))
}
