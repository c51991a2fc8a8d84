//! Strategy selection and human–AI fusion.
//!
//! The gate maps concept probabilities (or raw features) to a distribution
//! `r` over three strategies. The most probable strategy decides which
//! blocks of `[model logits, expert one-hot]` reach the fusion head; the
//! other block is zeroed. Training supervision comes from pseudo-labels
//! built from AI/expert correctness or from per-strategy penalties.

mod train;

use serde::{Deserialize, Serialize};

pub use train::{
    pseudo_labels_for, stage2_objective, train_gate, GateEpoch, GateHistory, GateTrainConfig, RoutingInputs,
    Stage2Loss,
};
pub(crate) use train::route_all;

use crate::cbm::DcbmModel;
use crate::error::{Error, Result};
use crate::numerics::divergence::{cross_entropy_with_grad, masked_softmax_row};
use crate::numerics::{argmax, DifferentiableStack, Matrix, StackSpec};
use crate::scalar::Scalar;

pub const NUM_STRATEGIES: usize = 3;
/// Hidden width of the gating MLP.
pub const GATE_HIDDEN: usize = 32;
/// Logit scale applied to the expert one-hot inside the defer penalty.
pub const EXPERT_LOGIT_SCALE: f64 = 10.0;
/// Lower clamp for `r` inside logarithms.
pub const STRATEGY_PROB_FLOOR: f64 = 1e-12;
/// Strategies that involve the expert; the cost is `r · HUMAN_MASK`.
pub const HUMAN_MASK: [bool; NUM_STRATEGIES] = [false, true, true];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyId {
    AiOnly,
    AiHuman,
    DeferToHuman,
}

impl StrategyId {
    pub const ALL: [StrategyId; NUM_STRATEGIES] = [StrategyId::AiOnly, StrategyId::AiHuman, StrategyId::DeferToHuman];

    /// Zero-based position in `r`.
    pub fn index(self) -> usize {
        self as usize
    }

    /// One-based number (1 = AI-only, 2 = AI+Human, 3 = Defer-to-Human).
    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::OutOfRange {
            index: i,
            len: NUM_STRATEGIES,
        })
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1..=3 => Self::from_index(n as usize - 1),
            _ => Err(Error::InvalidArgument(format!("strategy number must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyId::AiOnly => "ai_only",
            StrategyId::AiHuman => "ai_human",
            StrategyId::DeferToHuman => "defer_to_human",
        }
    }

    pub fn uses_expert(self) -> bool {
        self != StrategyId::AiOnly
    }
}

/// A point on the 3-simplex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyDistribution<T>([T; NUM_STRATEGIES]);

impl<T: Scalar> StrategyDistribution<T> {
    pub fn new(r: [T; NUM_STRATEGIES]) -> Result<Self> {
        if r.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidArgument("strategy probabilities must be finite and non-negative".into()));
        }
        let sum: T = r.iter().copied().sum();
        if (sum - T::one()).abs() > T::simplex_tolerance(NUM_STRATEGIES) {
            return Err(Error::InvalidArgument(format!("strategy probabilities sum to {sum}")));
        }
        Ok(Self(r))
    }

    pub(crate) fn from_slice_unchecked(r: &[T]) -> Self {
        Self([r[0], r[1], r[2]])
    }

    pub fn as_array(&self) -> &[T; NUM_STRATEGIES] {
        &self.0
    }

    pub fn get(&self, s: StrategyId) -> T {
        self.0[s.index()]
    }

    /// Most probable strategy; exact ties go to the cheaper (lower) one.
    pub fn chosen(&self) -> StrategyId {
        StrategyId::ALL[argmax(&self.0)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateInput {
    Concept,
    Image,
}

impl GateInput {
    pub fn name(self) -> &'static str {
        match self {
            GateInput::Concept => "concept",
            GateInput::Image => "image",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concept" => Ok(GateInput::Concept),
            "image" => Ok(GateInput::Image),
            other => Err(Error::InvalidArgument(format!("gate input must be 'concept' or 'image', got '{other}'"))),
        }
    }

    /// Gate input width for a given model.
    pub fn width<T: Scalar>(self, model: &DcbmModel<T>) -> usize {
        match self {
            GateInput::Concept => model.num_concepts(),
            GateInput::Image => model.input_dim(),
        }
    }
}

/// Strategy selector. In defer-only mode strategy 2 is masked out of the
/// softmax, so its probability is exactly zero.
#[derive(Debug, Clone)]
pub struct GatingNet<T> {
    pub mode: GateInput,
    pub defer_only: bool,
    pub stack: DifferentiableStack<T>,
}

impl<T: Scalar> PartialEq for GatingNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.defer_only == other.defer_only && self.stack == other.stack
    }
}

impl<T: Scalar> GatingNet<T> {
    pub fn new(mode: GateInput, input_dim: usize, defer_only: bool, seed: u64) -> Self {
        Self {
            mode,
            defer_only,
            stack: DifferentiableStack::init(&StackSpec::mlp(input_dim, &[GATE_HIDDEN], NUM_STRATEGIES), seed),
        }
    }

    pub fn from_stack(mode: GateInput, defer_only: bool, stack: DifferentiableStack<T>) -> Result<Self> {
        if stack.output_dim() != NUM_STRATEGIES {
            return Err(Error::shape("gate output", NUM_STRATEGIES, stack.output_dim()));
        }
        Ok(Self {
            mode,
            defer_only,
            stack,
        })
    }

    /// A gate that ignores its input: zero weights and the given output bias.
    pub fn constant(mode: GateInput, input_dim: usize, bias: [T; NUM_STRATEGIES]) -> Self {
        let mut stack = DifferentiableStack::zeros(&StackSpec::mlp(input_dim, &[GATE_HIDDEN], NUM_STRATEGIES));
        let last = stack.layers().len() - 1;
        stack.layers_mut()[last].bias = bias.to_vec();
        Self {
            mode,
            defer_only: false,
            stack,
        }
    }

    /// A constant gate that always selects `s`.
    pub fn forced(mode: GateInput, input_dim: usize, s: StrategyId) -> Self {
        let mut bias = [T::zero(); NUM_STRATEGIES];
        bias[s.index()] = T::lit(20.0);
        Self::constant(mode, input_dim, bias)
    }

    pub fn input_dim(&self) -> usize {
        self.stack.input_dim()
    }

    pub fn mask(&self) -> [bool; NUM_STRATEGIES] {
        if self.defer_only {
            [true, false, true]
        } else {
            [true; NUM_STRATEGIES]
        }
    }

    /// The matrix this gate consumes for a batch of features.
    pub fn inputs_for(&self, model: &DcbmModel<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
        match self.mode {
            GateInput::Concept => Ok(model.predict_concepts(x)?.probs),
            GateInput::Image => Ok(x.clone()),
        }
    }

    pub fn normalize(&self, logits: &Matrix<T>) -> Vec<StrategyDistribution<T>> {
        let mask = self.mask();
        logits
            .iter_rows()
            .map(|row| StrategyDistribution::from_slice_unchecked(&masked_softmax_row(row, &mask)))
            .collect()
    }

    /// Strategy distributions for precomputed gate inputs.
    pub fn distributions(&self, inputs: &Matrix<T>) -> Result<Vec<StrategyDistribution<T>>> {
        Ok(self.normalize(&self.stack.infer(inputs)?))
    }

    /// `r(x)` for a batch of features, reading concepts from the frozen model when needed.
    pub fn gate(&self, model: &DcbmModel<T>, x: &Matrix<T>) -> Result<Vec<StrategyDistribution<T>>> {
        let inputs = self.inputs_for(model, x)?;
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} gate expects {} inputs, got {}",
                self.mode.name(),
                self.input_dim(),
                inputs.cols()
            )));
        }
        self.distributions(&inputs)
    }

    pub fn cast<U: Scalar>(&self) -> GatingNet<U> {
        GatingNet {
            mode: self.mode,
            defer_only: self.defer_only,
            stack: self.stack.cast(),
        }
    }
}

/// Collaboration head: one affine map from `[model logits, expert one-hot]` to `K` logits.
#[derive(Debug, Clone)]
pub struct FusionNet<T> {
    pub stack: DifferentiableStack<T>,
}

impl<T: Scalar> PartialEq for FusionNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.stack == other.stack
    }
}

impl<T: Scalar> FusionNet<T> {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        Self {
            stack: DifferentiableStack::init(&StackSpec::affine(2 * num_classes, num_classes), seed),
        }
    }

    pub fn from_stack(stack: DifferentiableStack<T>) -> Result<Self> {
        let k = stack.output_dim();
        if stack.layers().len() != 1 || stack.input_dim() != 2 * k {
            return Err(Error::InvalidArgument(format!(
                "fusion must be a single affine layer 2K → K, got spec {}",
                stack.spec().encode()
            )));
        }
        Ok(Self { stack })
    }

    /// Weights `[I | I]`, zero bias: model logits and expert one-hot pass straight through.
    pub fn pass_through(num_classes: usize) -> Self {
        let mut stack = DifferentiableStack::zeros(&StackSpec::affine(2 * num_classes, num_classes));
        let w = &mut stack.layers_mut()[0].weights;
        for k in 0..num_classes {
            w.set(k, k, T::one());
            w.set(k, num_classes + k, T::one());
        }
        Self { stack }
    }

    pub fn num_classes(&self) -> usize {
        self.stack.output_dim()
    }

    /// `ŷ` logits for a batch of fused inputs (`B × 2K`).
    pub fn predict(&self, fused: &Matrix<T>) -> Result<Matrix<T>> {
        self.stack.infer(fused)
    }

    pub fn cast<U: Scalar>(&self) -> FusionNet<U> {
        FusionNet {
            stack: self.stack.cast(),
        }
    }
}

/// `ŷ` logits for a single fused input of length `2K`.
pub fn fusion_predict<T: Scalar>(net: &FusionNet<T>, fused: &[T]) -> Result<Vec<T>> {
    if fused.len() != 2 * net.num_classes() {
        return Err(Error::shape("fusion input", 2 * net.num_classes(), fused.len()));
    }
    Ok(net.predict(&Matrix::row_vector(fused)?)?.into_vec())
}

/// Builds the fusion input for strategy `s`: `[f, 0]`, `[f, m]` or `[0, m]`.
pub fn fuse_for<T: Scalar>(s: StrategyId, f_logits: &[T], m_onehot: &[T]) -> Vec<T> {
    let k = f_logits.len();
    let mut fused = vec![T::zero(); 2 * k];
    if s != StrategyId::DeferToHuman {
        fused[..k].copy_from_slice(f_logits);
    }
    if s != StrategyId::AiOnly {
        fused[k..].copy_from_slice(m_onehot);
    }
    fused
}

/// Picks the most probable strategy and assembles its fusion input.
pub fn route_and_fuse<T: Scalar>(
    r: &StrategyDistribution<T>,
    f_logits: &[T],
    m_onehot: &[T],
) -> Result<(Vec<T>, StrategyId)> {
    if f_logits.len() != m_onehot.len() || f_logits.is_empty() {
        return Err(Error::shape("route_and_fuse", f_logits.len(), m_onehot.len()));
    }
    let s = r.chosen();
    Ok((fuse_for(s, f_logits, m_onehot), s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Hard,
    Soft,
}

/// Strategy supervision target `q` on the simplex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel<T> {
    pub q: [T; NUM_STRATEGIES],
    pub kind: LabelKind,
}

impl<T: Scalar> PseudoLabel<T> {
    /// The strategy used to build fusion inputs during training.
    pub fn target(&self) -> StrategyId {
        StrategyId::ALL[argmax(&self.q)]
    }

    /// Restricts the label to strategies 1 and 3. A hard AI+Human label
    /// becomes AI-only; a soft label is renormalized over the two survivors.
    pub fn without_collaboration(self) -> Self {
        match self.kind {
            LabelKind::Hard => {
                if self.target() == StrategyId::AiHuman {
                    Self {
                        q: [T::one(), T::zero(), T::zero()],
                        kind: LabelKind::Hard,
                    }
                } else {
                    self
                }
            }
            LabelKind::Soft => {
                let s = self.q[0] + self.q[2];
                let q = if s > T::zero() {
                    [self.q[0] / s, T::zero(), self.q[2] / s]
                } else {
                    [T::lit(0.5), T::zero(), T::lit(0.5)]
                };
                Self { q, kind: LabelKind::Soft }
            }
        }
    }
}

/// AI-only when the AI is right, else Defer-to-Human when the expert is
/// right, else AI+Human.
pub fn hard_pseudo_label<T: Scalar>(ai_correct: bool, expert_correct: bool) -> PseudoLabel<T> {
    let s = if ai_correct {
        StrategyId::AiOnly
    } else if expert_correct {
        StrategyId::DeferToHuman
    } else {
        StrategyId::AiHuman
    };
    let mut q = [T::zero(); NUM_STRATEGIES];
    q[s.index()] = T::one();
    PseudoLabel { q, kind: LabelKind::Hard }
}

fn ce<T: Scalar>(y: usize, logits: &[T]) -> T {
    cross_entropy_with_grad(y, logits).0
}

/// `ℓ = [CE(y, f), CE(y, hψ([f, m])) + β, CE(y, 10·m) + β]`.
pub fn strategy_penalties<T: Scalar>(
    f_logits: &[T],
    m_onehot: &[T],
    y: usize,
    fusion: &FusionNet<T>,
    beta: T,
) -> Result<[T; NUM_STRATEGIES]> {
    let k = fusion.num_classes();
    if f_logits.len() != k || m_onehot.len() != k {
        return Err(Error::shape("strategy_penalties", k, f_logits.len().max(m_onehot.len())));
    }
    if y >= k {
        return Err(Error::OutOfRange { index: y, len: k });
    }
    let collab = fusion_predict(fusion, &fuse_for(StrategyId::AiHuman, f_logits, m_onehot))?;
    let scale = T::lit(EXPERT_LOGIT_SCALE);
    let expert: Vec<T> = m_onehot.iter().map(|&v| v * scale).collect();
    Ok([ce(y, f_logits), ce(y, &collab) + beta, ce(y, &expert) + beta])
}

/// `q(s) = softmax(−ℓ)(s)`.
pub fn soft_pseudo_label<T: Scalar>(penalties: &[T; NUM_STRATEGIES]) -> Result<PseudoLabel<T>> {
    if penalties.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("strategy penalties"));
    }
    let neg: Vec<T> = penalties.iter().map(|&l| -l).collect();
    let q = masked_softmax_row(&neg, &[true; NUM_STRATEGIES]);
    Ok(PseudoLabel {
        q: [q[0], q[1], q[2]],
        kind: LabelKind::Soft,
    })
}

/// Probability mass on strategies that use the expert.
pub fn cost<T: Scalar>(r: &StrategyDistribution<T>) -> T {
    r.0[1] + r.0[2]
}

/// Strategy supervision term: cross-entropy for hard labels, `KL(q ‖ r)`
/// for soft ones, with `r` clamped to `[1e-12, 1]`.
pub fn strategy_loss<T: Scalar>(r: &StrategyDistribution<T>, q: &PseudoLabel<T>) -> T {
    let floor = T::lit(STRATEGY_PROB_FLOOR);
    let mut loss = T::zero();
    for s in 0..NUM_STRATEGIES {
        let qs = q.q[s];
        if qs > T::zero() {
            let rs = r.0[s].max(floor).min(T::one());
            loss += match q.kind {
                LabelKind::Hard => -qs * rs.ln(),
                LabelKind::Soft => qs * (qs.ln() - rs.ln()),
            };
        }
    }
    loss
}

/// `L_strategy(r, q) + α · CE(y, ŷ)`.
pub fn decode_loss<T: Scalar>(
    r: &StrategyDistribution<T>,
    q: &PseudoLabel<T>,
    yhat_logits: &[T],
    y: usize,
    alpha: T,
) -> Result<T> {
    if y >= yhat_logits.len() {
        return Err(Error::OutOfRange {
            index: y,
            len: yhat_logits.len(),
        });
    }
    Ok(strategy_loss(r, q) + alpha * ce(y, yhat_logits))
}

/// `decode + λ · cost(r)`.
pub fn total_loss<T: Scalar>(decode: T, r: &StrategyDistribution<T>, lambda: T) -> Result<T> {
    if !(lambda >= T::zero()) {
        return Err(Error::InvalidArgument(format!("λ must be non-negative, got {lambda}")));
    }
    Ok(decode + lambda * cost(r))
}
