//! Test-time concept interventions on a frozen model.
//!
//! Forward intervention replaces selected concept logits with
//! high-confidence values taken from the training distribution (95th
//! percentile for "on", 5th for "off") and recomputes the label with the
//! implicit embedding held fixed. Backward rectification runs the same
//! edits in reverse: given the true label, it greedily flips the concept
//! whose flip most lowers the label cross-entropy.
//!
//! A concept counts as on when its logit is non-negative. Inside an
//! exclusive group, turning a member on drives every sibling to its low
//! bound.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cbm::{ConceptActivations, DcbmModel};
use crate::dataio::{ConceptGroups, TripletDataset};
use crate::error::{Error, Result};
use crate::numerics::divergence::cross_entropy_with_grad;
use crate::numerics::{argmax, Matrix};
use crate::scalar::Scalar;

pub const LOW_PERCENTILE: f64 = 5.0;
pub const HIGH_PERCENTILE: f64 = 95.0;

/// Linear-interpolation percentile of an ascending slice, `p` in [0, 100].
/// Position `p/100·(n−1)` between the neighbouring order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileBounds {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl PercentileBounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} low bounds but {} high bounds",
                low.len(),
                high.len()
            )));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidArgument("bounds must be finite with low <= high".into()));
        }
        Ok(Self { low, high })
    }

    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }
}

/// Per-concept 5th/95th percentiles of the model's concept logits over `train`.
pub fn compute_percentile_bounds<T: Scalar>(
    model: &DcbmModel<T>,
    train: &TripletDataset<T>,
) -> Result<PercentileBounds> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("percentile bounds need a non-empty split".into()));
    }
    model.check_compatible(train)?;
    let logits = model.predict_concepts(&train.features)?.logits;
    let d = model.num_concepts();
    let mut low = Vec::with_capacity(d);
    let mut high = Vec::with_capacity(d);
    for j in 0..d {
        let mut col: Vec<f64> = logits.iter_rows().map(|r| r[j].as_f64()).collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("concept logits"));
        }
        col.sort_by(f64::total_cmp);
        low.push(percentile(&col, LOW_PERCENTILE).expect("non-empty column"));
        high.push(percentile(&col, HIGH_PERCENTILE).expect("non-empty column"));
    }
    PercentileBounds::new(low, high)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditTarget {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEdit {
    pub concept: usize,
    pub target: EditTarget,
}

impl ConceptEdit {
    pub fn on(concept: usize) -> Self {
        Self {
            concept,
            target: EditTarget::On,
        }
    }

    pub fn off(concept: usize) -> Self {
        Self {
            concept,
            target: EditTarget::Off,
        }
    }
}

/// Edits for one instance, checked against `groups`.
#[derive(Debug, Clone)]
pub struct InterventionRequest<'g, T> {
    pub features: Vec<T>,
    pub edits: Vec<ConceptEdit>,
    pub groups: &'g ConceptGroups,
}

impl<T> InterventionRequest<'_, T> {
    /// Indices in range and distinct; at most one "on" per exclusive group.
    pub fn validate(&self, num_concepts: usize) -> Result<()> {
        if self.groups.num_concepts() != num_concepts {
            return Err(Error::DimensionMismatch(format!(
                "group spec covers {} concepts, model has {num_concepts}",
                self.groups.num_concepts()
            )));
        }
        let mut seen = BTreeSet::new();
        let mut on_in_group: Vec<Option<usize>> = vec![None; self.groups.groups().len()];
        for e in &self.edits {
            if e.concept >= num_concepts {
                return Err(Error::OutOfRange {
                    index: e.concept,
                    len: num_concepts,
                });
            }
            if !seen.insert(e.concept) {
                return Err(Error::InvalidArgument(format!("concept {} is edited twice", e.concept)));
            }
            if let (EditTarget::On, Some(g)) = (e.target, self.groups.group_of(e.concept)) {
                if let Some(prev) = on_in_group[g] {
                    return Err(Error::GroupConflict {
                        group: g,
                        detail: format!("concepts {prev} and {} are both turned on", e.concept),
                    });
                }
                on_in_group[g] = Some(e.concept);
            }
        }
        Ok(())
    }
}

/// Applies validated edits to one row of concept logits.
fn apply_edits<T: Scalar>(logits: &mut [T], edits: &[ConceptEdit], groups: &ConceptGroups, bounds: &PercentileBounds) {
    for e in edits {
        match e.target {
            EditTarget::On => {
                if let Some(g) = groups.group_of(e.concept) {
                    for &s in &groups.groups()[g] {
                        logits[s] = T::lit(bounds.low[s]);
                    }
                }
                logits[e.concept] = T::lit(bounds.high[e.concept]);
            }
            EditTarget::Off => logits[e.concept] = T::lit(bounds.low[e.concept]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionOutcome<T> {
    pub before: ConceptActivations<T>,
    pub after: ConceptActivations<T>,
    pub label_logits_before: Vec<T>,
    pub label_logits_after: Vec<T>,
    pub prediction_before: usize,
    pub prediction_after: usize,
}

fn single_row<T: Scalar>(model: &DcbmModel<T>, features: &[T]) -> Result<Matrix<T>> {
    if features.len() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "instance has {} features, model expects {}",
            features.len(),
            model.input_dim()
        )));
    }
    Matrix::row_vector(features)
}

/// Intervenes on one instance. The implicit embedding and all parameters
/// are left untouched; an empty edit list reproduces the original
/// prediction bit for bit.
pub fn forward_intervene<T: Scalar>(
    model: &DcbmModel<T>,
    request: &InterventionRequest<'_, T>,
    bounds: &PercentileBounds,
) -> Result<InterventionOutcome<T>> {
    let d = model.num_concepts();
    if bounds.len() != d {
        return Err(Error::DimensionMismatch(format!("{} bounds for {d} concepts", bounds.len())));
    }
    request.validate(d)?;
    let x = single_row(model, &request.features)?;
    let before = model.predict_concepts(&x)?;
    let mut edited = before.logits.clone();
    apply_edits(edited.row_mut(0), &request.edits, request.groups, bounds);
    let after = ConceptActivations::from_parts(edited, before.implicit.clone())?;
    let label_before = model.label_from_activations(&before)?;
    let label_after = model.label_from_activations(&after)?;
    Ok(InterventionOutcome {
        prediction_before: argmax(label_before.row(0)),
        prediction_after: argmax(label_after.row(0)),
        label_logits_before: label_before.row(0).to_vec(),
        label_logits_after: label_after.row(0).to_vec(),
        before,
        after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectificationStep {
    /// Concept switched at this step (turned on, for a group member).
    pub concept: usize,
    pub now_on: bool,
    /// Label cross-entropy after the flip.
    pub loss: f64,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectificationResult<T> {
    pub original_logits: Vec<T>,
    pub rectified_logits: Vec<T>,
    pub flipped: Vec<usize>,
    pub prediction_before: usize,
    pub prediction_after: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub success: bool,
    pub trace: Vec<RectificationStep>,
}

/// One admissible move from `state`: switches `concept` and returns the new
/// logits, or `None` when the group rule forbids it.
fn flip<T: Scalar>(state: &[T], concept: usize, groups: &ConceptGroups, bounds: &PercentileBounds) -> Option<Vec<T>> {
    let on = state[concept] >= T::zero();
    let edit = match (groups.group_of(concept), on) {
        (Some(_), true) => return None,
        (_, false) => ConceptEdit::on(concept),
        (None, true) => ConceptEdit::off(concept),
    };
    let mut next = state.to_vec();
    apply_edits(&mut next, &[edit], groups, bounds);
    Some(next)
}

/// Greedy single-flip descent on `CE(y_true, f(c_exp) + f̃(c_imp))`.
///
/// Each step evaluates every admissible flip of a not-yet-flipped concept
/// and keeps the one with the lowest loss (lowest index on ties). Stops as
/// soon as the prediction equals `y_true`, when no flip lowers the loss, or
/// after `budget` flips (default `d`). Running out of moves is reported
/// through `success`, not as an error.
pub fn backward_rectify<T: Scalar>(
    model: &DcbmModel<T>,
    features: &[T],
    y_true: usize,
    groups: &ConceptGroups,
    bounds: &PercentileBounds,
    budget: Option<usize>,
) -> Result<RectificationResult<T>> {
    let d = model.num_concepts();
    let k = model.num_classes();
    if y_true >= k {
        return Err(Error::OutOfRange { index: y_true, len: k });
    }
    if bounds.len() != d || groups.num_concepts() != d {
        return Err(Error::DimensionMismatch(format!(
            "bounds ({}) and groups ({}) must cover {d} concepts",
            bounds.len(),
            groups.num_concepts()
        )));
    }
    let x = single_row(model, features)?;
    let act = model.predict_concepts(&x)?;
    let implicit_row = act.implicit.row(0).to_vec();
    let score = |rows: &[Vec<T>]| -> Result<Vec<(f64, usize)>> {
        let n = rows.len();
        let logits = Matrix::from_vec(n, d, rows.concat())?;
        let implicit = Matrix::from_vec(n, implicit_row.len(), implicit_row.repeat(n))?;
        let out = model.label_from_activations(&ConceptActivations::from_parts(logits, implicit)?)?;
        Ok(out
            .iter_rows()
            .map(|r| (cross_entropy_with_grad(y_true, r).0.as_f64(), argmax(r)))
            .collect())
    };

    let original = act.logits.row(0).to_vec();
    let (loss_before, prediction_before) = score(std::slice::from_ref(&original))?[0];
    let mut state = original.clone();
    let (mut loss, mut prediction) = (loss_before, prediction_before);
    let mut used = vec![false; d];
    let mut trace = Vec::new();
    let budget = budget.unwrap_or(d);

    while prediction != y_true && trace.len() < budget {
        let (cands, rows): (Vec<usize>, Vec<Vec<T>>) = (0..d)
            .filter(|&j| !used[j])
            .filter_map(|j| flip(&state, j, groups, bounds).map(|r| (j, r)))
            .unzip();
        if cands.is_empty() {
            break;
        }
        let scores = score(&rows)?;
        let best = (0..cands.len())
            .reduce(|a, b| if scores[b].0 < scores[a].0 { b } else { a })
            .expect("non-empty candidates");
        if !(scores[best].0 < loss) {
            break;
        }
        let j = cands[best];
        used[j] = true;
        state = rows[best].clone();
        (loss, prediction) = scores[best];
        trace.push(RectificationStep {
            concept: j,
            now_on: state[j] >= T::zero(),
            loss,
            prediction,
        });
    }

    Ok(RectificationResult {
        original_logits: original,
        flipped: trace.iter().map(|s| s.concept).collect(),
        rectified_logits: state,
        prediction_before,
        prediction_after: prediction,
        loss_before,
        loss_after: loss,
        success: prediction == y_true,
        trace,
    })
}
