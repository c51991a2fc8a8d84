use super::stack::DifferentiableStack;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stochastic gradient descent with optional heavy-ball momentum.
///
/// One optimizer instance serves exactly one stack; velocity buffers are
/// sized on the first step.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    learning_rate: T,
    momentum: T,
    velocity: Vec<T>,
    steps: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T, momentum: T) -> Result<Self> {
        if !(learning_rate >= T::zero()) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
            steps: 0,
        })
    }

    pub fn plain(learning_rate: T) -> Result<Self> {
        Self::new(learning_rate, T::zero())
    }

    pub fn learning_rate(&self) -> T {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `v ← μ v + g; θ ← θ − η v`.
    pub fn step(&mut self, stack: &mut DifferentiableStack<T>) -> Result<()> {
        if !stack.has_gradients() {
            return Err(Error::MissingGradients);
        }
        let n = stack.num_parameters();
        if self.velocity.len() != n {
            if self.steps != 0 {
                return Err(Error::shape("optimizer velocity", self.velocity.len(), n));
            }
            self.velocity = vec![T::zero(); n];
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        let velocity = &mut self.velocity;
        stack.for_each_parameter(|p, g, slot| {
            let v = mu * velocity[slot] + g;
            velocity[slot] = v;
            *p -= lr * v;
        });
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::Matrix;
    use crate::numerics::stack::{Activation, AffineLayer, StackSpec};

    /// Single scalar weight `w` with zero bias; input 1, so output = w.
    fn scalar_stack(w: f64) -> DifferentiableStack<f64> {
        let layer = AffineLayer::new(Matrix::from_vec(1, 1, vec![w]).unwrap(), vec![0.0], Activation::Identity)
            .unwrap();
        DifferentiableStack::from_layers(vec![layer]).unwrap()
    }

    /// Gradient of (w − 3)² pushed through the stack; bias is also trained.
    fn quadratic_grad(stack: &mut DifferentiableStack<f64>) -> f64 {
        let one = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let y = stack.forward(&one).unwrap().get(0, 0);
        stack
            .backward(&Matrix::from_vec(1, 1, vec![2.0 * (y - 3.0)]).unwrap())
            .unwrap();
        (y - 3.0).powi(2)
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut s = DifferentiableStack::<f64>::init(&StackSpec::mlp(3, &[4], 2), 1);
        let before = s.parameters();
        let x = Matrix::from_vec(1, 3, vec![0.2, 0.4, -0.1]).unwrap();
        s.forward(&x).unwrap();
        s.backward(&Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let mut opt = Sgd::plain(0.0).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.parameters(), before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn one_gradient_step_on_quadratic() {
        // Only the weight: freeze the bias by zeroing its gradient.
        let mut s = scalar_stack(0.0);
        quadratic_grad(&mut s);
        s.layers_mut()[0].bias_grad[0] = 0.0;
        let mut opt = Sgd::plain(0.1).unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.layers()[0].weights.get(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let mut s = scalar_stack(0.0);
        let mut opt = Sgd::new(0.05, 0.9).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = quadratic_grad(&mut s);
            opt.step(&mut s).unwrap();
        }
        let one = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let y = s.infer(&one).unwrap().get(0, 0);
        assert!((y - 3.0).powi(2) < 1e-6, "objective {last}");
    }

    #[test]
    fn rejects_missing_gradients_and_bad_rates() {
        let mut s = scalar_stack(1.0);
        let mut opt = Sgd::plain(0.1).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::MissingGradients)));
        assert!(Sgd::<f64>::plain(-1.0).is_err());
        assert!(Sgd::<f64>::new(0.1, 1.0).is_err());
    }
}
