//! Read-only model snapshot and the JSON views shared by `decode intervene`
//! and the HTTP service. Both paths call the same methods, so their
//! outputs agree by construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use decode_core::checkpoint::{Checkpoint, GateArtifacts};
use decode_core::dataio::{load_dataset, ConceptGroups};
use decode_core::eval::CoverageCurve;
use decode_core::expert::expert_onehot;
use decode_core::intervene::{
    backward_rectify, compute_percentile_bounds, forward_intervene, ConceptEdit, EditTarget, InterventionRequest,
    PercentileBounds, RectificationResult,
};
use decode_core::numerics::{argmax, sigmoid, softmax};
use decode_core::strategy::{fusion_predict, route_and_fuse, GateInput, GateTrainConfig, StrategyDistribution};
use decode_core::{DcbmModel, Error, FusionNet, GatingNet, Matrix, SplitBundle, TripletDataset};

use crate::error::{CliError, Result};
use crate::layout::{require, RunDir};

pub fn concept_name(j: usize) -> String {
    format!("concept_{j:02}")
}

pub fn load_model(path: &Path) -> Result<DcbmModel> {
    let path = require(path.to_path_buf(), "stage-1 checkpoint")?;
    Ok(DcbmModel::from_checkpoint(Checkpoint::load(path)?)?)
}

/// The gate artifacts plus the checkpoint they came from, for its metadata.
pub fn load_gate(path: &Path) -> Result<(GateArtifacts<f64>, Checkpoint<f64>)> {
    let path = require(path.to_path_buf(), "stage-2 checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    Ok((GateArtifacts::from_checkpoint(ckpt.clone())?, ckpt))
}

pub fn load_bundle(path: &Path) -> Result<SplitBundle> {
    let path = require(path.to_path_buf(), "dataset")?;
    Ok(load_dataset(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptView {
    pub index: usize,
    pub name: String,
    pub group: Option<usize>,
    pub logit: f64,
    pub probability: f64,
    pub on: bool,
    pub intervened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyView {
    /// `r` over AI-only, AI+Human, Defer-to-Human.
    pub distribution: [f64; 3],
    /// One-based strategy number.
    pub chosen: u8,
    pub name: String,
}

impl From<&StrategyDistribution<f64>> for StrategyView {
    fn from(r: &StrategyDistribution<f64>) -> Self {
        let s = r.chosen();
        Self {
            distribution: *r.as_array(),
            chosen: s.number(),
            name: s.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionView {
    pub label: usize,
    pub confidence: f64,
    pub logits: Vec<f64>,
}

impl PredictionView {
    fn from_logits(logits: Vec<f64>) -> Result<Self> {
        let label = argmax(&logits);
        let confidence = softmax(&logits)?[label];
        Ok(Self {
            label,
            confidence,
            logits,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceView {
    pub id: u64,
    pub features: Vec<f64>,
    pub concepts: Vec<ConceptView>,
    pub strategy: StrategyView,
    pub prediction: PredictionView,
    /// Ground-truth label from the dataset.
    pub label: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterveneRequest {
    pub id: u64,
    #[serde(default)]
    pub edits: Vec<ConceptEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionView {
    pub id: u64,
    pub edits: Vec<ConceptEdit>,
    pub concepts_before: Vec<ConceptView>,
    pub concepts_after: Vec<ConceptView>,
    pub before: PredictionView,
    pub after: PredictionView,
    pub strategy_before: StrategyView,
    /// The gate re-run on the edited concepts.
    pub strategy_after: StrategyView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertRequest {
    pub id: u64,
    pub label: usize,
    #[serde(default)]
    pub edits: Vec<ConceptEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertView {
    pub id: u64,
    pub expert_label: usize,
    pub strategy: StrategyView,
    /// False under AI-only, where the fusion input's expert block is zero.
    pub expert_used: bool,
    pub ai_prediction: usize,
    pub fused_logits: Vec<f64>,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectificationView {
    pub id: u64,
    pub label: usize,
    pub result: RectificationResult<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundView {
    pub index: usize,
    pub name: String,
    pub group: Option<usize>,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsView {
    pub low_percentile: f64,
    pub high_percentile: f64,
    pub concepts: Vec<BoundView>,
}

/// Everything the service needs, loaded once and never mutated.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub model: DcbmModel,
    pub gate: GatingNet,
    pub fusion: FusionNet,
    pub recipe: GateTrainConfig,
    /// Instances served by id.
    pub test: TripletDataset,
    /// Computed on the training split.
    pub bounds: PercentileBounds,
    pub curves: Vec<CoverageCurve>,
}

impl Snapshot {
    pub fn new(model: DcbmModel, gate: GateArtifacts<f64>, bundle: SplitBundle, curves: Vec<CoverageCurve>) -> Result<Self> {
        model.check_compatible(&bundle.test)?;
        if gate.gate.input_dim() != gate.gate.mode.width(&model) || gate.fusion.num_classes() != model.num_classes() {
            return Err(Error::DimensionMismatch("gate checkpoint does not match the stage-1 model".into()).into());
        }
        let bounds = compute_percentile_bounds(&model, &bundle.train)?;
        Ok(Self {
            model,
            gate: gate.gate,
            fusion: gate.fusion,
            recipe: gate.config,
            test: bundle.test,
            bounds,
            curves,
        })
    }

    pub fn load(dir: &RunDir, dataset: &Path) -> Result<Self> {
        let bundle = load_bundle(dataset)?;
        let model = load_model(&dir.cbm())?;
        let (gate, _) = load_gate(&dir.gate())?;
        Self::new(model, gate, bundle, dir.load_curves()?)
    }

    fn groups(&self) -> &ConceptGroups {
        &self.test.groups
    }

    fn row(&self, id: u64) -> Result<usize> {
        id.checked_sub(self.test.id_offset)
            .map(|r| r as usize)
            .filter(|&r| r < self.test.len())
            .ok_or(CliError::UnknownInstance(id))
    }

    fn strategy(&self, features: &[f64], probs: &[f64]) -> Result<StrategyDistribution<f64>> {
        let input = match self.gate.mode {
            GateInput::Concept => probs,
            GateInput::Image => features,
        };
        let mut r = self.gate.distributions(&Matrix::row_vector(input)?)?;
        Ok(r.remove(0))
    }

    fn concept_views(&self, logits: &[f64], intervened: &[bool]) -> Vec<ConceptView> {
        logits
            .iter()
            .enumerate()
            .map(|(j, &z)| ConceptView {
                index: j,
                name: concept_name(j),
                group: self.groups().group_of(j),
                logit: z,
                probability: sigmoid(z),
                on: z >= 0.0,
                intervened: intervened[j],
            })
            .collect()
    }

    pub fn instance(&self, id: u64) -> Result<InstanceView> {
        let row = self.row(id)?;
        let features = self.test.features.row(row).to_vec();
        let act = self.model.predict_concepts(&Matrix::row_vector(&features)?)?;
        let logits = self.model.label_from_activations(&act)?.into_vec();
        let r = self.strategy(&features, act.probs.row(0))?;
        Ok(InstanceView {
            id,
            concepts: self.concept_views(act.logits.row(0), &vec![false; self.model.num_concepts()]),
            strategy: (&r).into(),
            prediction: PredictionView::from_logits(logits)?,
            label: self.test.label(row),
            num_classes: self.model.num_classes(),
            features,
        })
    }

    pub fn intervene(&self, req: &InterveneRequest) -> Result<InterventionView> {
        let row = self.row(req.id)?;
        let features = self.test.features.row(row).to_vec();
        let request = InterventionRequest {
            features: features.clone(),
            edits: req.edits.clone(),
            groups: self.groups(),
        };
        let out = forward_intervene(&self.model, &request, &self.bounds)?;
        let d = self.model.num_concepts();
        let mut touched = vec![false; d];
        for e in &req.edits {
            touched[e.concept] = true;
            if e.target == EditTarget::On {
                if let Some(g) = self.groups().group_of(e.concept) {
                    for &j in &self.groups().groups()[g] {
                        touched[j] = true;
                    }
                }
            }
        }
        let r_before = self.strategy(&features, out.before.probs.row(0))?;
        let r_after = self.strategy(&features, out.after.probs.row(0))?;
        Ok(InterventionView {
            id: req.id,
            edits: req.edits.clone(),
            concepts_before: self.concept_views(out.before.logits.row(0), &vec![false; d]),
            concepts_after: self.concept_views(out.after.logits.row(0), &touched),
            before: PredictionView::from_logits(out.label_logits_before)?,
            after: PredictionView::from_logits(out.label_logits_after)?,
            strategy_before: (&r_before).into(),
            strategy_after: (&r_after).into(),
        })
    }

    /// Routes the instance (after any edits) and fuses the given expert label.
    pub fn expert(&self, req: &ExpertRequest) -> Result<ExpertView> {
        let k = self.model.num_classes();
        if req.label >= k {
            return Err(Error::OutOfRange {
                index: req.label,
                len: k,
            }
            .into());
        }
        let view = self.intervene(&InterveneRequest {
            id: req.id,
            edits: req.edits.clone(),
        })?;
        let r = StrategyDistribution::new(view.strategy_after.distribution)?;
        let m = expert_onehot::<f64>(req.label, k)?;
        let (fused, s) = route_and_fuse(&r, &view.after.logits, &m)?;
        let fused_logits = fusion_predict(&self.fusion, &fused)?;
        Ok(ExpertView {
            id: req.id,
            expert_label: req.label,
            strategy: view.strategy_after,
            expert_used: s.uses_expert(),
            ai_prediction: view.after.label,
            prediction: argmax(&fused_logits),
            fused_logits,
        })
    }

    pub fn rectify(&self, id: u64, label: usize, budget: Option<usize>) -> Result<RectificationView> {
        let row = self.row(id)?;
        let k = self.model.num_classes();
        if label >= k {
            return Err(Error::OutOfRange { index: label, len: k }.into());
        }
        let result = backward_rectify(
            &self.model,
            self.test.features.row(row),
            label,
            self.groups(),
            &self.bounds,
            budget,
        )?;
        Ok(RectificationView { id, label, result })
    }

    pub fn curve(&self, rho: f64, defer_only: bool) -> Result<&CoverageCurve> {
        self.curves
            .iter()
            .find(|c| c.rho == rho && c.defer_only == defer_only)
            .ok_or(CliError::UnknownCurve { rho, defer_only })
    }

    pub fn bounds(&self) -> BoundsView {
        BoundsView {
            low_percentile: decode_core::intervene::LOW_PERCENTILE,
            high_percentile: decode_core::intervene::HIGH_PERCENTILE,
            concepts: (0..self.bounds.len())
                .map(|j| BoundView {
                    index: j,
                    name: concept_name(j),
                    group: self.groups().group_of(j),
                    low: self.bounds.low()[j],
                    high: self.bounds.high()[j],
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use decode_core::cbm::DcbmConfig;
    use decode_core::dataio::{generate_synthetic, SyntheticConfig};
    use decode_core::strategy::StrategyId;

    fn snapshot(strategy: StrategyId) -> Snapshot {
        let bundle: SplitBundle = generate_synthetic(&SyntheticConfig {
            n_train: 60,
            n_val: 10,
            n_test: 20,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let model = DcbmModel::new(&DcbmConfig::for_bundle(&bundle), 3);
        let k = bundle.num_classes();
        let gate = GateArtifacts {
            gate: GatingNet::forced(GateInput::Concept, model.num_concepts(), strategy),
            fusion: FusionNet::pass_through(k),
            config: GateTrainConfig::default(),
        };
        Snapshot::new(model, gate, bundle, Vec::new()).unwrap()
    }

    #[test]
    fn ai_only_ignores_the_expert_label() {
        let s = snapshot(StrategyId::AiOnly);
        let id = s.test.id_offset;
        let view = s.instance(id).unwrap();
        for label in 0..view.num_classes {
            let e = s.expert(&ExpertRequest { id, label, edits: vec![] }).unwrap();
            assert!(!e.expert_used);
            assert_eq!(e.strategy.chosen, 1);
            assert_eq!(e.prediction, view.prediction.label);
            assert_eq!(e.fused_logits, view.prediction.logits);
        }
    }

    #[test]
    fn defer_returns_the_expert_label() {
        let s = snapshot(StrategyId::DeferToHuman);
        let id = s.test.id_offset + 3;
        for label in 0..s.model.num_classes() {
            let e = s.expert(&ExpertRequest { id, label, edits: vec![] }).unwrap();
            assert!(e.expert_used);
            assert_eq!(e.prediction, label);
        }
    }

    #[test]
    fn ids_outside_the_test_split_are_unknown() {
        let s = snapshot(StrategyId::AiOnly);
        assert!(matches!(s.instance(0), Err(CliError::UnknownInstance(0))));
        let past = s.test.id_offset + s.test.len() as u64;
        assert!(matches!(s.instance(past), Err(CliError::UnknownInstance(_))));
    }
}
