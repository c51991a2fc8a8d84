//! Decoupled concept bottleneck model.
//!
//! Two encoders read the features: `g` produces `d` concept logits
//! (`c_exp`) and `g̃` produces an `h`-dimensional latent vector (`c_imp`).
//! Two affine heads map them to label logits, and the prediction is their
//! sum, `f(c_exp) + f̃(c_imp)`. Stage-1 training minimizes task
//! cross-entropy, concept BCE and a JS term that keeps the concept-only
//! prediction close to the full one.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{SplitBundle, TripletDataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::numerics::divergence::{cross_entropy_with_grad, js_grad, js_raw, softmax_row, softplus};
use crate::numerics::{argmax, sigmoid, softmax_backward, Activation, DifferentiableStack, Matrix, Sgd, StackSpec};
use crate::scalar::Scalar;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_IMPLICIT_DIM: usize = 16;
/// Probability clamp used by [`concept_loss`].
pub const CONCEPT_PROB_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcbmConfig {
    pub input_dim: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub implicit_dim: usize,
}

impl DcbmConfig {
    pub fn new(input_dim: usize, num_concepts: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_concepts,
            num_classes,
            hidden: DEFAULT_HIDDEN,
            implicit_dim: DEFAULT_IMPLICIT_DIM,
        }
    }

    pub fn for_bundle<T: Scalar>(bundle: &SplitBundle<T>) -> Self {
        Self::new(bundle.feature_dim(), bundle.num_concepts(), bundle.num_classes())
    }
}

/// Per-instance outputs of both encoders for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptActivations<T> {
    /// `B × d` concept logits.
    pub logits: Matrix<T>,
    /// `sigmoid(logits)`.
    pub probs: Matrix<T>,
    /// `B × h` latent vectors.
    pub implicit: Matrix<T>,
}

impl<T: Scalar> ConceptActivations<T> {
    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.rows() == 0
    }

    pub fn num_concepts(&self) -> usize {
        self.logits.cols()
    }

    /// Builds activations from edited concept logits, recomputing probabilities.
    pub fn from_parts(logits: Matrix<T>, implicit: Matrix<T>) -> Result<Self> {
        if logits.rows() != implicit.rows() {
            return Err(Error::shape("concept activations rows", logits.rows(), implicit.rows()));
        }
        let probs = logits.map(sigmoid);
        Ok(Self {
            logits,
            probs,
            implicit,
        })
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            logits: self.logits.select_rows(indices),
            probs: self.probs.select_rows(indices),
            implicit: self.implicit.select_rows(indices),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DcbmModel<T> {
    /// `g`: features → concept logits.
    pub concept_encoder: DifferentiableStack<T>,
    /// `g̃`: features → latent vector.
    pub implicit_encoder: DifferentiableStack<T>,
    /// `f`: concept logits → label logits (single affine layer).
    pub explicit_head: DifferentiableStack<T>,
    /// `f̃`: latent vector → label logits (single affine layer).
    pub implicit_head: DifferentiableStack<T>,
}

impl<T: Scalar> PartialEq for DcbmModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.stacks() == other.stacks()
    }
}

fn is_single_affine<T: Scalar>(s: &DifferentiableStack<T>) -> bool {
    s.layers().len() == 1 && s.layers()[0].activation == Activation::Identity
}

impl<T: Scalar> DcbmModel<T> {
    pub fn new(config: &DcbmConfig, seed: u64) -> Self {
        let c = config;
        Self {
            concept_encoder: DifferentiableStack::init(
                &StackSpec::mlp(c.input_dim, &[c.hidden], c.num_concepts),
                derive_seed(seed, 1),
            ),
            implicit_encoder: DifferentiableStack::init(
                &StackSpec::mlp(c.input_dim, &[c.hidden], c.implicit_dim),
                derive_seed(seed, 2),
            ),
            explicit_head: DifferentiableStack::init(
                &StackSpec::affine(c.num_concepts, c.num_classes),
                derive_seed(seed, 3),
            ),
            implicit_head: DifferentiableStack::init(
                &StackSpec::affine(c.implicit_dim, c.num_classes),
                derive_seed(seed, 4),
            ),
        }
    }

    pub fn from_parts(
        concept_encoder: DifferentiableStack<T>,
        implicit_encoder: DifferentiableStack<T>,
        explicit_head: DifferentiableStack<T>,
        implicit_head: DifferentiableStack<T>,
    ) -> Result<Self> {
        let mismatch = |what: &str, a: usize, b: usize| {
            Err(Error::DimensionMismatch(format!("{what}: {a} vs {b}")))
        };
        if concept_encoder.input_dim() != implicit_encoder.input_dim() {
            return mismatch("encoder input dims", concept_encoder.input_dim(), implicit_encoder.input_dim());
        }
        if concept_encoder.output_dim() != explicit_head.input_dim() {
            return mismatch("concept encoder output vs explicit head input", concept_encoder.output_dim(), explicit_head.input_dim());
        }
        if implicit_encoder.output_dim() != implicit_head.input_dim() {
            return mismatch("implicit encoder output vs implicit head input", implicit_encoder.output_dim(), implicit_head.input_dim());
        }
        if explicit_head.output_dim() != implicit_head.output_dim() {
            return mismatch("head output dims", explicit_head.output_dim(), implicit_head.output_dim());
        }
        if !is_single_affine(&explicit_head) || !is_single_affine(&implicit_head) {
            return Err(Error::InvalidArgument("both heads must be single affine layers".into()));
        }
        Ok(Self {
            concept_encoder,
            implicit_encoder,
            explicit_head,
            implicit_head,
        })
    }

    pub fn config(&self) -> DcbmConfig {
        DcbmConfig {
            input_dim: self.input_dim(),
            num_concepts: self.num_concepts(),
            num_classes: self.num_classes(),
            hidden: self.concept_encoder.spec().dims.get(1).copied().unwrap_or(0),
            implicit_dim: self.implicit_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.concept_encoder.input_dim()
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_encoder.output_dim()
    }

    pub fn implicit_dim(&self) -> usize {
        self.implicit_encoder.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.explicit_head.output_dim()
    }

    /// Rejects datasets whose `(D, d, K)` differ from the model.
    pub fn check_compatible<U: Scalar>(&self, ds: &TripletDataset<U>) -> Result<()> {
        if ds.feature_dim() != self.input_dim()
            || ds.num_concepts() != self.num_concepts()
            || ds.num_classes != self.num_classes()
        {
            return Err(Error::DimensionMismatch(format!(
                "model expects (D, d, K) = ({}, {}, {}), dataset '{}' has ({}, {}, {})",
                self.input_dim(),
                self.num_concepts(),
                self.num_classes(),
                ds.split,
                ds.feature_dim(),
                ds.num_concepts(),
                ds.num_classes
            )));
        }
        Ok(())
    }

    pub fn predict_concepts(&self, x: &Matrix<T>) -> Result<ConceptActivations<T>> {
        let logits = self.concept_encoder.infer(x)?;
        let implicit = self.implicit_encoder.infer(x)?;
        ConceptActivations::from_parts(logits, implicit)
    }

    /// `f(g(x))`.
    pub fn explicit_logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.explicit_head.infer(&self.concept_encoder.infer(x)?)
    }

    /// `f̃(g̃(x))`.
    pub fn implicit_logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.implicit_head.infer(&self.implicit_encoder.infer(x)?)
    }

    pub fn predict_label(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.label_from_activations(&self.predict_concepts(x)?)
    }

    /// `f(c_exp) + f̃(c_imp)` for given (possibly edited) activations.
    pub fn label_from_activations(&self, act: &ConceptActivations<T>) -> Result<Matrix<T>> {
        let a = self.explicit_head.infer(&act.logits)?;
        let b = self.implicit_head.infer(&act.implicit)?;
        a.add(&b)
    }

    /// Mean over the batch of `JS(softmax(f(g(x))) ‖ softmax(f(g(x)) + f̃(g̃(x))))`.
    pub fn js_alignment_loss(&self, x: &Matrix<T>) -> Result<T> {
        let a = self.explicit_logits(x)?;
        let full = a.add(&self.implicit_logits(x)?)?;
        if a.rows() == 0 {
            return Ok(T::zero());
        }
        let ln2 = T::lit(std::f64::consts::LN_2);
        let total: T = a
            .iter_rows()
            .zip(full.iter_rows())
            .map(|(ra, rf)| js_raw(&softmax_row(ra), &softmax_row(rf)).max(T::zero()).min(ln2))
            .sum();
        Ok(total / T::lit(a.rows() as f64))
    }

    /// Top-1 accuracy of the full prediction and mean per-concept accuracy.
    pub fn accuracy(&self, ds: &TripletDataset<T>) -> Result<(f64, f64)> {
        self.check_compatible(ds)?;
        if ds.is_empty() {
            return Ok((0.0, 0.0));
        }
        let act = self.predict_concepts(&ds.features)?;
        let logits = self.label_from_activations(&act)?;
        let correct = (0..ds.len()).filter(|&i| argmax(logits.row(i)) == ds.label(i)).count();
        let d = ds.num_concepts();
        let concept_hits = (0..ds.len())
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|&(i, j)| (act.logits.get(i, j) >= T::zero()) == (ds.concept_row(i)[j] == 1))
            .count();
        Ok((
            correct as f64 / ds.len() as f64,
            concept_hits as f64 / (ds.len() * d.max(1)) as f64,
        ))
    }

    pub fn stacks(&self) -> [&DifferentiableStack<T>; 4] {
        [&self.concept_encoder, &self.implicit_encoder, &self.explicit_head, &self.implicit_head]
    }

    fn stacks_mut(&mut self) -> [&mut DifferentiableStack<T>; 4] {
        [
            &mut self.concept_encoder,
            &mut self.implicit_encoder,
            &mut self.explicit_head,
            &mut self.implicit_head,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.stacks().iter().map(|s| s.num_parameters()).sum()
    }

    /// All parameters, stacks in `[g, g̃, f, f̃]` order.
    pub fn parameters(&self) -> Vec<T> {
        self.stacks().iter().flat_map(|s| s.parameters()).collect()
    }

    pub fn gradients(&self) -> Vec<T> {
        self.stacks().iter().flat_map(|s| s.gradients()).collect()
    }

    pub fn set_parameters(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::shape("DcbmModel::set_parameters", self.num_parameters(), values.len()));
        }
        let mut off = 0;
        for s in self.stacks_mut() {
            let n = s.num_parameters();
            s.set_parameters(&values[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        for s in self.stacks_mut() {
            s.clear_cache();
        }
    }

    pub fn cast<U: Scalar>(&self) -> DcbmModel<U> {
        DcbmModel {
            concept_encoder: self.concept_encoder.cast(),
            implicit_encoder: self.implicit_encoder.cast(),
            explicit_head: self.explicit_head.cast(),
            implicit_head: self.implicit_head.cast(),
        }
    }

    /// Stage-1 objective on a batch. With `with_grad` the parameter
    /// gradients of all four stacks are populated.
    pub fn stage1_objective(
        &mut self,
        x: &Matrix<T>,
        concepts: &Matrix<T>,
        labels: &[usize],
        weights: Stage1Weights,
        with_grad: bool,
    ) -> Result<Stage1Loss> {
        let b = x.rows();
        let (d, k) = (self.num_concepts(), self.num_classes());
        if concepts.shape() != (b, d) {
            return Err(Error::shape("concept targets", format!("({b}, {d})"), format!("{:?}", concepts.shape())));
        }
        if labels.len() != b {
            return Err(Error::shape("labels", b, labels.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::OutOfRange { index: y, len: k });
        }
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let c = self.concept_encoder.forward(x)?;
        let z = self.implicit_encoder.forward(x)?;
        let a = self.explicit_head.forward(&c)?;
        let bl = self.implicit_head.forward(&z)?;
        let full = a.add(&bl)?;

        let inv_b = T::one() / T::lit(b as f64);
        let inv_bd = inv_b / T::lit(d as f64);
        let (w_c, w_js) = (T::lit(weights.concept), T::lit(weights.js));

        let mut task = T::zero();
        let mut js = T::zero();
        let mut grad_full = Matrix::zeros(b, k);
        let mut grad_a = Matrix::zeros(b, k);
        for i in 0..b {
            let (loss, g) = cross_entropy_with_grad(labels[i], full.row(i));
            task += loss;
            let p = softmax_row(a.row(i));
            let q = softmax_row(full.row(i));
            js += js_raw(&p, &q);
            let (gp, gq) = js_grad(&p, &q);
            let ga_js = softmax_backward(&p, &gp);
            let gq_js = softmax_backward(&q, &gq);
            for j in 0..k {
                let gf = (g[j] + w_js * gq_js[j]) * inv_b;
                grad_full.set(i, j, gf);
                grad_a.set(i, j, gf + w_js * ga_js[j] * inv_b);
            }
        }
        let mut concept = T::zero();
        let mut grad_c_bce = Matrix::zeros(b, d);
        for i in 0..b {
            for j in 0..d {
                let (zv, t) = (c.get(i, j), concepts.get(i, j));
                concept += softplus(zv) - t * zv;
                grad_c_bce.set(i, j, w_c * (sigmoid(zv) - t) * inv_bd);
            }
        }
        let task = task * inv_b;
        let js = js * inv_b;
        let concept = concept * inv_bd;
        let total = task + w_c * concept + w_js * js;
        if !total.is_finite() {
            return Err(Error::NonFinite("stage-1 loss"));
        }

        if with_grad {
            let grad_c = self.explicit_head.backward(&grad_a)?.add(&grad_c_bce)?;
            self.concept_encoder.backward(&grad_c)?;
            let grad_z = self.implicit_head.backward(&grad_full)?;
            self.implicit_encoder.backward(&grad_z)?;
        }
        Ok(Stage1Loss {
            total: total.as_f64(),
            task: task.as_f64(),
            concept: concept.as_f64(),
            js: js.as_f64(),
        })
    }
}

/// Mean binary cross-entropy over all entries; probabilities are clamped to
/// `[1e-9, 1 − 1e-9]`.
pub fn concept_loss<T: Scalar>(pred: &ConceptActivations<T>, c_true: &Matrix<T>) -> Result<T> {
    if pred.probs.shape() != c_true.shape() {
        return Err(Error::shape(
            "concept_loss",
            format!("{:?}", pred.probs.shape()),
            format!("{:?}", c_true.shape()),
        ));
    }
    if c_true.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidArgument("concept targets must be binary".into()));
    }
    let n = c_true.data().len();
    if n == 0 {
        return Ok(T::zero());
    }
    let lo = T::lit(CONCEPT_PROB_CLAMP);
    let hi = T::one() - lo;
    let sum: T = pred
        .probs
        .data()
        .iter()
        .zip(c_true.data())
        .map(|(&p, &t)| {
            let p = p.max(lo).min(hi);
            -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
        })
        .sum();
    Ok(sum / T::lit(n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Weights {
    pub concept: f64,
    pub js: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self { concept: 1.0, js: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Loss {
    pub total: f64,
    pub task: f64,
    pub concept: f64,
    pub js: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weights: Stage1Weights,
    pub seed: u64,
}

impl Default for CbmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weights: Stage1Weights::default(),
            seed: 0,
        }
    }
}

impl CbmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(self.weights.concept >= 0.0 && self.weights.js >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean losses per epoch plus validation accuracies after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbmEpoch {
    pub epoch: usize,
    pub loss: Stage1Loss,
    pub val_accuracy: f64,
    pub val_concept_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CbmHistory {
    pub epochs: Vec<CbmEpoch>,
}

/// Mini-batch SGD on the stage-1 objective over the train split. Aborts
/// with [`Error::Diverged`] on a non-finite loss.
pub fn train_cbm<T: Scalar>(
    mut model: DcbmModel<T>,
    bundle: &SplitBundle<T>,
    config: &CbmTrainConfig,
) -> Result<(DcbmModel<T>, CbmHistory)> {
    config.validate()?;
    let train = &bundle.train;
    model.check_compatible(train)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let concepts = train.concept_matrix();
    let mut optimizers = (0..4)
        .map(|_| Sgd::new(T::lit(config.learning_rate), T::lit(config.momentum)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5ec1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = CbmHistory::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for batch in order.chunks(config.batch_size) {
            let x = train.features.select_rows(batch);
            let c = concepts.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.label(i)).collect();
            let loss = match model.stage1_objective(&x, &c, &y, config.weights, true) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        stage: "stage-1",
                        epoch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let w = batch.len() as f64;
            sums[0] += loss.total * w;
            sums[1] += loss.task * w;
            sums[2] += loss.concept * w;
            sums[3] += loss.js * w;
            for (opt, stack) in optimizers.iter_mut().zip(model.stacks_mut()) {
                opt.step(stack)?;
            }
            if model.stacks().iter().any(|s| s.parameters().iter().any(|p| !p.is_finite())) {
                return Err(Error::Diverged {
                    stage: "stage-1",
                    epoch,
                    loss: loss.total,
                });
            }
        }
        let n = train.len() as f64;
        let loss = Stage1Loss {
            total: sums[0] / n,
            task: sums[1] / n,
            concept: sums[2] / n,
            js: sums[3] / n,
        };
        let (val_accuracy, val_concept_accuracy) = if bundle.val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            model.accuracy(&bundle.val)?
        };
        history.epochs.push(CbmEpoch {
            epoch,
            loss,
            val_accuracy,
            val_concept_accuracy,
        });
    }
    model.clear_cache();
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticConfig};
    use crate::numerics::{central_difference, js_divergence, kl_divergence, max_relative_error, softmax};
    use approx::assert_abs_diff_eq;

    fn small_config() -> DcbmConfig {
        DcbmConfig {
            input_dim: 5,
            num_concepts: 4,
            num_classes: 3,
            hidden: 6,
            implicit_dim: 3,
        }
    }

    fn batch(seed: u64, rows: usize, cols: usize) -> Matrix<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn zero_stack(stack: &mut DifferentiableStack<f64>) {
        let n = stack.num_parameters();
        stack.set_parameters(&vec![0.0; n]).unwrap();
    }

    #[test]
    fn zero_encoder_emits_its_bias() {
        let mut m = DcbmModel::<f64>::new(&small_config(), 1);
        let last = m.concept_encoder.layers().len() - 1;
        for layer in m.concept_encoder.layers_mut() {
            layer.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        m.concept_encoder.layers_mut()[last].bias = vec![0.5, -1.0, 2.0, 0.0];
        let act = m.predict_concepts(&batch(2, 7, 5)).unwrap();
        assert_eq!(act.logits.shape(), (7, 4));
        assert_eq!(act.implicit.shape(), (7, 3));
        for row in act.logits.iter_rows() {
            assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
        }
        assert!(act.probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(m.predict_concepts(&batch(2, 7, 4)).is_err());
    }

    #[test]
    fn prediction_is_the_sum_of_both_heads() {
        let m = DcbmModel::<f64>::new(&small_config(), 3);
        let x = batch(4, 9, 5);
        let sum = m.explicit_logits(&x).unwrap().add(&m.implicit_logits(&x).unwrap()).unwrap();
        assert_eq!(m.predict_label(&x).unwrap(), sum);
    }

    #[test]
    fn zeroed_implicit_head_reduces_to_plain_bottleneck() {
        let mut m = DcbmModel::<f64>::new(&small_config(), 5);
        zero_stack(&mut m.implicit_head);
        let x = batch(6, 8, 5);
        assert_eq!(m.predict_label(&x).unwrap(), m.explicit_logits(&x).unwrap());
        assert_eq!(m.js_alignment_loss(&x).unwrap(), 0.0);
    }

    #[test]
    fn js_alignment_matches_composition_oracle() {
        let m = DcbmModel::<f64>::new(&small_config(), 7);
        let x = batch(8, 6, 5);
        let a = m.explicit_logits(&x).unwrap();
        let full = m.predict_label(&x).unwrap();
        let mut expected = 0.0;
        for i in 0..x.rows() {
            let p = softmax(a.row(i)).unwrap();
            let q = softmax(full.row(i)).unwrap();
            let mix = crate::numerics::ProbVector::new(
                p.as_slice().iter().zip(q.as_slice()).map(|(a, b)| 0.5 * (a + b)).collect(),
            )
            .unwrap();
            expected += 0.5 * kl_divergence(&p, &mix).unwrap() + 0.5 * kl_divergence(&q, &mix).unwrap();
            assert!(js_divergence(&p, &q).unwrap() <= std::f64::consts::LN_2 + 1e-9);
        }
        expected /= x.rows() as f64;
        assert_abs_diff_eq!(m.js_alignment_loss(&x).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn concept_loss_reference_cases() {
        let t = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let exact = ConceptActivations {
            logits: Matrix::zeros(2, 2),
            probs: t.clone(),
            implicit: Matrix::zeros(2, 1),
        };
        assert!(concept_loss(&exact, &t).unwrap() < 1e-8);
        let half = ConceptActivations::from_parts(Matrix::zeros(2, 2), Matrix::zeros(2, 1)).unwrap();
        assert_abs_diff_eq!(concept_loss(&half, &t).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        // Oracle: mean of −[t ln p + (1−t) ln(1−p)] for p = [0.9, 0.2, 0.6, 0.3].
        let probs = Matrix::from_vec(2, 2, vec![0.9, 0.2, 0.6, 0.3]).unwrap();
        let act = ConceptActivations {
            logits: Matrix::zeros(2, 2),
            probs,
            implicit: Matrix::zeros(2, 1),
        };
        assert_abs_diff_eq!(concept_loss(&act, &t).unwrap(), 0.6121919007930318, epsilon = 1e-14);
        let bad = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(concept_loss(&act, &bad).is_err());
    }

    #[test]
    fn stage1_gradient_matches_finite_differences() {
        let mut m = DcbmModel::<f64>::new(&small_config(), 9);
        let x = batch(10, 5, 5);
        let c = Matrix::from_vec(5, 4, (0..20).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
        let y = vec![0, 2, 1, 1, 0];
        let w = Stage1Weights { concept: 0.7, js: 1.3 };
        m.stage1_objective(&x, &c, &y, w, true).unwrap();
        let analytic = m.gradients();
        let theta = m.parameters();
        let probe = std::cell::RefCell::new(m.clone());
        let numeric = central_difference(
            |p| {
                let mut mm = probe.borrow_mut();
                mm.set_parameters(p).unwrap();
                mm.stage1_objective(&x, &c, &y, w, false).unwrap().total
            },
            &theta,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "stage-1 relative error {err}");
    }

    #[test]
    fn mismatched_parts_are_rejected() {
        let c = small_config();
        let m = DcbmModel::<f64>::new(&c, 0);
        let wrong_head = DifferentiableStack::init(&StackSpec::affine(5, 3), 0);
        assert!(DcbmModel::from_parts(
            m.concept_encoder.clone(),
            m.implicit_encoder.clone(),
            wrong_head,
            m.implicit_head.clone()
        )
        .is_err());
        let deep_head = DifferentiableStack::init(&StackSpec::mlp(4, &[2], 3), 0);
        assert!(DcbmModel::from_parts(
            m.concept_encoder.clone(),
            m.implicit_encoder.clone(),
            deep_head,
            m.implicit_head.clone()
        )
        .is_err());
        assert!(DcbmModel::from_parts(
            m.concept_encoder.clone(),
            m.implicit_encoder.clone(),
            m.explicit_head.clone(),
            m.implicit_head.clone()
        )
        .is_ok());
    }

    fn quick_bundle() -> SplitBundle<f64> {
        generate_synthetic(&SyntheticConfig {
            n_train: 400,
            n_val: 100,
            n_test: 100,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let bundle = quick_bundle();
        let cfg = CbmTrainConfig {
            epochs: 4,
            ..CbmTrainConfig::default()
        };
        let init = DcbmModel::new(&DcbmConfig::for_bundle(&bundle), 1);
        let (a, ha) = train_cbm(init.clone(), &bundle, &cfg).unwrap();
        let (b, hb) = train_cbm(init, &bundle, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let first = ha.epochs.first().unwrap().loss.total;
        let last = ha.epochs.last().unwrap().loss.total;
        assert!(last <= first, "{first} -> {last}");
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let bundle = quick_bundle();
        let cfg = CbmTrainConfig {
            epochs: 3,
            learning_rate: 1e6,
            momentum: 0.0,
            ..CbmTrainConfig::default()
        };
        let init = DcbmModel::new(&DcbmConfig::for_bundle(&bundle), 1);
        let err = train_cbm(init, &bundle, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { stage: "stage-1", .. }), "{err}");
        assert!(err.is_numeric_abort());
    }
}
