mod common;

use std::sync::OnceLock;

use proptest::prelude::*;

use decode_core::cbm::{train_cbm, CbmTrainConfig, DcbmConfig, DcbmModel, Stage1Weights};
use decode_core::dataio::SplitBundle;
use decode_core::intervene::{
    backward_rectify, compute_percentile_bounds, forward_intervene, ConceptEdit, InterventionRequest, PercentileBounds,
};
use decode_core::numerics::argmax;

struct Fixture {
    bundle: SplitBundle<f64>,
    model: DcbmModel<f64>,
    bounds: PercentileBounds,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let bundle = common::small_bundle(1.0, 1200, 300);
        let model = common::trained_cbm(&bundle);
        let bounds = compute_percentile_bounds(&model, &bundle.train).unwrap();
        Fixture { bundle, model, bounds }
    })
}

/// Distinct concepts with at most one "on" per exclusive group.
fn valid_edits(raw: Vec<(usize, bool)>, f: &Fixture) -> Vec<ConceptEdit> {
    let groups = &f.bundle.test.groups;
    let mut seen = vec![false; f.model.num_concepts()];
    let mut group_on = vec![false; groups.groups().len()];
    let mut edits = Vec::new();
    for (j, on) in raw {
        if seen[j] {
            continue;
        }
        if on {
            if let Some(g) = groups.group_of(j) {
                if group_on[g] {
                    continue;
                }
                group_on[g] = true;
            }
        }
        seen[j] = true;
        edits.push(if on { ConceptEdit::on(j) } else { ConceptEdit::off(j) });
    }
    edits
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn forward_edits_are_pure_and_respect_groups(
        row in 0usize..300,
        raw in prop::collection::vec((0usize..12, any::<bool>()), 0..10),
    ) {
        let f = fixture();
        let params = f.model.parameters();
        let edits = valid_edits(raw, f);
        let groups = &f.bundle.test.groups;
        let req = InterventionRequest { features: f.bundle.test.features.row(row).to_vec(), edits: edits.clone(), groups };
        let out = forward_intervene(&f.model, &req, &f.bounds).unwrap();
        prop_assert_eq!(out.before.implicit.row(0), out.after.implicit.row(0));
        prop_assert_eq!(f.model.parameters(), params);

        let before = out.before.logits.row(0);
        let after = out.after.logits.row(0);
        let mut forced = vec![false; before.len()];
        for e in &edits {
            let expected = if e.target == decode_core::intervene::EditTarget::On { f.bounds.high()[e.concept] } else { f.bounds.low()[e.concept] };
            prop_assert_eq!(after[e.concept], expected);
            forced[e.concept] = true;
            if e.target == decode_core::intervene::EditTarget::On {
                if let Some(g) = groups.group_of(e.concept) {
                    for &s in groups.groups()[g].iter().filter(|&&s| s != e.concept) {
                        prop_assert_eq!(after[s], f.bounds.low()[s]);
                        forced[s] = true;
                    }
                    let on = groups.groups()[g].iter().filter(|&&s| after[s] >= 0.0).count();
                    prop_assert_eq!(on, 1);
                }
            }
        }
        for j in 0..before.len() {
            if !forced[j] {
                prop_assert_eq!(after[j], before[j]);
            }
        }
    }

    #[test]
    fn rectification_respects_groups_and_descends(row in 0usize..300, label in 0usize..8) {
        let f = fixture();
        let ds = &f.bundle.test;
        let groups = &ds.groups;
        let r = backward_rectify(&f.model, ds.features.row(row), label, groups, &f.bounds, None).unwrap();
        prop_assert_eq!(r.trace.len(), r.flipped.len());
        prop_assert!(r.flipped.len() <= f.model.num_concepts());
        let mut last = r.loss_before;
        for step in &r.trace {
            prop_assert!(step.loss < last);
            last = step.loss;
        }
        prop_assert_eq!(r.success, r.prediction_after == label);
        if r.prediction_before == label {
            prop_assert!(r.flipped.is_empty());
        }
        let (orig, rect) = (&r.original_logits, &r.rectified_logits);
        for (g, members) in groups.groups().iter().enumerate() {
            let touched = r.flipped.iter().any(|&j| groups.group_of(j) == Some(g));
            if touched {
                let high = members.iter().filter(|&&j| rect[j] == f.bounds.high()[j]).count();
                let low = members.iter().filter(|&&j| rect[j] == f.bounds.low()[j]).count();
                prop_assert_eq!((high, low), (1, members.len() - 1));
            } else {
                for &j in members {
                    prop_assert_eq!(rect[j], orig[j]);
                }
            }
        }
        for j in groups.free_concepts() {
            if r.flipped.contains(&j) {
                let target = if orig[j] >= 0.0 { f.bounds.low()[j] } else { f.bounds.high()[j] };
                prop_assert_eq!(rect[j], target);
            } else {
                prop_assert_eq!(rect[j], orig[j]);
            }
        }
    }
}

/// Re-setting concepts that are already beyond their bound (in the
/// predicted direction) to that bound can only change predictions on
/// instances that have such a concept.
#[test]
fn confident_edits_change_only_instances_with_a_less_extreme_bound() {
    let f = fixture();
    let ds = &f.bundle.test;
    let groups = &ds.groups;
    let act = f.model.predict_concepts(&ds.features).unwrap();
    let (mut edited, mut changed) = (0, 0);
    for i in 0..ds.len() {
        let z = act.logits.row(i);
        let mut edits = Vec::new();
        let mut group_on = vec![false; groups.groups().len()];
        // The most confident "on" member of a group, if it is beyond the bound.
        for (g, members) in groups.groups().iter().enumerate() {
            let best = *members.iter().max_by(|&&a, &&b| z[a].total_cmp(&z[b])).unwrap();
            if z[best] > f.bounds.high()[best] {
                edits.push(ConceptEdit::on(best));
                group_on[g] = true;
            }
        }
        for j in 0..z.len() {
            let in_on_group = groups.group_of(j).is_some_and(|g| group_on[g]);
            if z[j] > f.bounds.high()[j] && groups.group_of(j).is_none() {
                edits.push(ConceptEdit::on(j));
            } else if z[j] < f.bounds.low()[j] && !in_on_group {
                edits.push(ConceptEdit::off(j));
            }
        }
        let has_edits = !edits.is_empty();
        let req = InterventionRequest {
            features: ds.features.row(i).to_vec(),
            edits,
            groups,
        };
        let out = forward_intervene(&f.model, &req, &f.bounds).unwrap();
        edited += usize::from(has_edits);
        if out.prediction_after != out.prediction_before {
            changed += 1;
            assert!(has_edits, "instance {i} changed with no confident concept");
        }
    }
    assert!(edited > 0);
    assert!(changed <= edited);
}

fn head_disagreements(b: &SplitBundle<f64>, js: f64) -> usize {
    let model = DcbmModel::new(&DcbmConfig::for_bundle(b), common::MODEL_SEED);
    let config = CbmTrainConfig {
        seed: common::MODEL_SEED,
        weights: Stage1Weights { concept: 1.0, js },
        ..CbmTrainConfig::default()
    };
    let (model, _) = train_cbm(model, b, &config).unwrap();
    let act = model.predict_concepts(&b.test.features).unwrap();
    let explicit = model.explicit_head.infer(&act.logits).unwrap();
    let full = model.label_from_activations(&act).unwrap();
    (0..b.test.len())
        .filter(|&i| argmax(explicit.row(i)) != argmax(full.row(i)))
        .count()
}

/// The JS alignment term pulls the explicit head's argmax towards the full
/// prediction: switching it on never increases disagreement.
#[test]
fn js_weight_does_not_increase_head_disagreement() {
    for kappa in [1.0, 0.6] {
        let b = common::small_bundle(kappa, 1200, 400);
        let (without, with) = (head_disagreements(&b, 0.0), head_disagreements(&b, 1.0));
        assert!(with <= without, "kappa {kappa}: w_js = 1 gives {with}, w_js = 0 gives {without}");
    }
}
