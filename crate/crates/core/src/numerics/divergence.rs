//! Softmax, cross-entropy and the KL/JS divergences, with the analytic
//! gradients the training loops need.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied inside logarithms and divisions.
pub const PROB_EPS: f64 = 1e-12;

/// A discrete probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<T>(Vec<T>);

impl<T: Scalar> ProbVector<T> {
    /// Validates non-negativity and unit mass.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ProbVector"));
        }
        if values.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("negative probability".into()));
        }
        let total: T = values.iter().copied().sum();
        if (total - T::one()).abs() > T::simplex_tolerance(values.len()) {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn uniform(len: usize) -> Self {
        let v = T::one() / T::lit(len as f64);
        Self(vec![v; len])
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

impl<T> std::ops::Index<usize> for ProbVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable softmax of a single row.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<ProbVector<T>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty row".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax"));
    }
    Ok(ProbVector(softmax_row(logits)))
}

/// Softmax without validation; callers guarantee finite, non-empty input.
pub(crate) fn softmax_row<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Softmax over the unmasked entries only; masked entries are exactly zero.
pub(crate) fn masked_softmax_row<T: Scalar>(logits: &[T], mask: &[bool]) -> Vec<T> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { T::zero() })
        .collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Pulls a gradient with respect to softmax probabilities back to the logits.
///
/// `probs` is the softmax output; the Jacobian is `diag(p) − p pᵀ`.
pub fn softmax_backward<T: Scalar>(probs: &[T], grad_probs: &[T]) -> Vec<T> {
    let inner: T = probs.iter().zip(grad_probs).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &g)| p * (g - inner))
        .collect()
}

/// `−log softmax(logits)[target]`, evaluated through log-sum-exp.
pub fn cross_entropy<T: Scalar>(target: usize, logits: &[T]) -> Result<T> {
    if target >= logits.len() {
        return Err(Error::OutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((log_sum_exp(logits) - logits[target]).max(T::zero()))
}

/// Cross-entropy and its gradient with respect to the logits: `softmax − onehot`.
pub(crate) fn cross_entropy_with_grad<T: Scalar>(target: usize, logits: &[T]) -> (T, Vec<T>) {
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = softmax_row(logits);
    grad[target] -= T::one();
    (loss, grad)
}

fn check_lengths<T: Scalar>(p: &ProbVector<T>, q: &ProbVector<T>) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::shape("divergence", p.len(), q.len()));
    }
    Ok(())
}

pub(crate) fn kl_raw<T: Scalar>(p: &[T], q: &[T]) -> T {
    let eps = T::lit(PROB_EPS);
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi.ln() - (qi + eps).ln()))
        .sum()
}

/// `KL(p ‖ q) = Σ pᵢ ln(pᵢ / (qᵢ + ε))`, floored at zero.
pub fn kl_divergence<T: Scalar>(p: &ProbVector<T>, q: &ProbVector<T>) -> Result<T> {
    check_lengths(p, q)?;
    Ok(kl_raw(p.as_slice(), q.as_slice()).max(T::zero()))
}

pub(crate) fn js_raw<T: Scalar>(p: &[T], q: &[T]) -> T {
    let half = T::lit(0.5);
    let m: Vec<T> = p.iter().zip(q).map(|(&a, &b)| half * (a + b)).collect();
    half * kl_raw(p, &m) + half * kl_raw(q, &m)
}

/// Jensen–Shannon divergence through the mixture `m = (p + q) / 2`; lies in `[0, ln 2]`.
pub fn js_divergence<T: Scalar>(p: &ProbVector<T>, q: &ProbVector<T>) -> Result<T> {
    check_lengths(p, q)?;
    Ok(js_raw(p.as_slice(), q.as_slice())
        .max(T::zero())
        .min(T::lit(std::f64::consts::LN_2)))
}

/// Partial derivatives of JS with respect to each argument: `½ ln(p/m)` and `½ ln(q/m)`.
pub(crate) fn js_grad<T: Scalar>(p: &[T], q: &[T]) -> (Vec<T>, Vec<T>) {
    let half = T::lit(0.5);
    let eps = T::lit(PROB_EPS);
    let mut gp = Vec::with_capacity(p.len());
    let mut gq = Vec::with_capacity(p.len());
    for (&a, &b) in p.iter().zip(q) {
        let m = half * (a + b) + eps;
        gp.push(half * ((a + eps) / m).ln());
        gq.push(half * ((b + eps) / m).ln());
    }
    (gp, gq)
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub(crate) fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_reference_values() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert!(p[1] < 1e-12 && p[1] >= 0.0);
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn cross_entropy_reference_values() {
        assert_abs_diff_eq!(cross_entropy(0, &[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(cross_entropy(0, &[50.0, -50.0]).unwrap() < 1e-40);
        // direct formula: −2 + ln(e + e² + e^½)
        assert_abs_diff_eq!(
            cross_entropy(1, &[1.0, 2.0, 0.5]).unwrap(),
            0.464_368_784_107_944_8,
            epsilon = 1e-14
        );
        assert!(matches!(cross_entropy(3, &[0.0, 0.0]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn kl_and_js_reference_values() {
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let skew = ProbVector::new(vec![0.25, 0.75]).unwrap();
        let one = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let other = ProbVector::new(vec![0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(kl_divergence(&half, &half).unwrap(), 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(kl_divergence(&one, &half).unwrap(), 2f64.ln(), epsilon = 1e-11);
        assert_abs_diff_eq!(
            kl_divergence(&half, &skew).unwrap(),
            0.143_841_036_225_890_46,
            epsilon = 1e-11
        );
        assert_abs_diff_eq!(js_divergence(&skew, &skew).unwrap(), 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(js_divergence(&one, &other).unwrap(), 2f64.ln(), epsilon = 1e-11);
        assert_abs_diff_eq!(
            js_divergence(&half, &skew).unwrap(),
            0.033_822_075_568_605_23,
            epsilon = 1e-11
        );
        let three = ProbVector::uniform(3);
        assert!(kl_divergence(&half, &three).is_err());
        assert!(js_divergence(&half, &three).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::<f64>::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.3f32, 0.7]).is_ok());
    }

    #[test]
    fn js_gradient_matches_central_difference() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.6, 0.1, 0.3];
        let (gp, gq) = js_grad(&p, &q);
        let h = 1e-6;
        for i in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[i] += h;
            pm[i] -= h;
            let fd = (js_raw(&pp, &q) - js_raw(&pm, &q)) / (2.0 * h);
            assert_abs_diff_eq!(fd, gp[i], epsilon = 1e-8);
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (js_raw(&p, &qp) - js_raw(&p, &qm)) / (2.0 * h);
            assert_abs_diff_eq!(fd, gq[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(800.0), 800.0, epsilon = 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_abs_diff_eq!(sigmoid(-800.0f64), 0.0, epsilon = 1e-300);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            v in proptest::collection::vec(-30.0f64..30.0, 1..8),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            let total: f64 = a.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!(*x >= 0.0);
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
