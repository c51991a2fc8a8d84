//! Chains of affine maps with elementwise nonlinearities and hand-written
//! reverse-mode gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use super::divergence::sigmoid;
use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    #[inline]
    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (T::one() - s)
            }
        }
    }
}

/// One affine map `y = act(x Wᵀ + b)`, with `W` stored as `(fan_out × fan_in)`.
#[derive(Debug, Clone)]
pub struct AffineLayer<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
    pub(crate) weight_grad: Matrix<T>,
    pub(crate) bias_grad: Vec<T>,
    input_cache: Option<Matrix<T>>,
    pre_activation: Option<Matrix<T>>,
}

impl<T: Scalar> AffineLayer<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape("AffineLayer::new", weights.rows(), bias.len()));
        }
        let (out, inp) = weights.shape();
        Ok(Self {
            weights,
            bias,
            activation,
            weight_grad: Matrix::zeros(out, inp),
            bias_grad: vec![T::zero(); out],
            input_cache: None,
            pre_activation: None,
        })
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self::new(Matrix::zeros(fan_out, fan_in), vec![T::zero(); fan_out], activation)
            .expect("consistent shapes")
    }

    /// Glorot-uniform weights in `[−a, a]`, `a = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.random_range(-a..=a)))
            .collect();
        let weights = Matrix::from_vec(fan_out, fan_in, data).expect("finite init");
        Self::new(weights, vec![T::zero(); fan_out], activation).expect("consistent shapes")
    }

    #[inline]
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }

    fn pre_activation_of(&self, input: &Matrix<T>) -> Result<Matrix<T>> {
        let mut z = input.matmul_transposed(&self.weights)?;
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }

    fn infer(&self, input: &Matrix<T>) -> Result<Matrix<T>> {
        let act = self.activation;
        Ok(self.pre_activation_of(input)?.map(|z| act.apply(z)))
    }
}

/// Layer sizes and nonlinearities, used for construction and checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackSpec {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl StackSpec {
    /// `dims = [in, h1, ..., out]` with one activation per layer.
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "stack spec needs n+1 dims for n activations, got {} dims and {} activations",
                dims.len(),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        Ok(Self { dims, activations })
    }

    /// Hidden relu layers followed by an identity output layer.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut activations = vec![Activation::Relu; hidden.len()];
        activations.push(Activation::Identity);
        Self { dims, activations }
    }

    pub fn affine(input: usize, output: usize) -> Self {
        Self::mlp(input, &[], output)
    }

    /// `"in-h1-out:relu,identity"`
    pub fn encode(&self) -> String {
        let dims: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        let acts: Vec<&str> = self.activations.iter().map(|a| a.name()).collect();
        format!("{}:{}", dims.join("-"), acts.join(","))
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::MalformedHeader(format!("bad stack spec '{s}'"));
        let (dims, acts) = s.split_once(':').ok_or_else(bad)?;
        let dims = dims
            .split('-')
            .map(|d| d.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let activations = acts
            .split(',')
            .map(|a| Activation::parse(a).ok_or_else(bad))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims, activations).map_err(|_| bad())
    }
}

#[derive(Debug, Clone)]
pub struct DifferentiableStack<T> {
    layers: Vec<AffineLayer<T>>,
    has_grad: bool,
}

impl<T: Scalar> DifferentiableStack<T> {
    pub fn from_layers(layers: Vec<AffineLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("stack without layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape("stack layers", pair[0].fan_out(), pair[1].fan_in()));
            }
        }
        Ok(Self {
            layers,
            has_grad: false,
        })
    }

    /// Seeded Glorot initialization of every layer.
    pub fn init(spec: &StackSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .dims
            .windows(2)
            .zip(&spec.activations)
            .map(|(w, &act)| AffineLayer::glorot(w[0], w[1], act, &mut rng))
            .collect();
        Self {
            layers,
            has_grad: false,
        }
    }

    pub fn zeros(spec: &StackSpec) -> Self {
        let layers = spec
            .dims
            .windows(2)
            .zip(&spec.activations)
            .map(|(w, &act)| AffineLayer::zeros(w[0], w[1], act))
            .collect();
        Self {
            layers,
            has_grad: false,
        }
    }

    pub fn spec(&self) -> StackSpec {
        let mut dims = vec![self.layers[0].fan_in()];
        dims.extend(self.layers.iter().map(AffineLayer::fan_out));
        StackSpec {
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn layers(&self) -> &[AffineLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AffineLayer<T>] {
        &mut self.layers
    }

    fn check_input(&self, input: &Matrix<T>) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape("stack input columns", self.input_dim(), input.cols()));
        }
        Ok(())
    }

    /// Forward pass without touching the activation cache.
    pub fn infer(&self, input: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(input)?;
        let mut h = self.layers[0].infer(input)?;
        for layer in &self.layers[1..] {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward(&mut self, input: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(input)?;
        let mut h = input.clone();
        for layer in &mut self.layers {
            let z = layer.pre_activation_of(&h)?;
            let act = layer.activation;
            let out = z.map(|v| act.apply(v));
            layer.input_cache = Some(h);
            layer.pre_activation = Some(z);
            h = out;
        }
        Ok(h)
    }

    /// Back-propagates `grad_output` (shape of the last forward output).
    ///
    /// Overwrites the parameter gradients and returns the gradient with
    /// respect to the stack input.
    pub fn backward(&mut self, grad_output: &Matrix<T>) -> Result<Matrix<T>> {
        let mut grad = grad_output.clone();
        for (idx, layer) in self.layers.iter_mut().enumerate().rev() {
            let (input, z) = match (&layer.input_cache, &layer.pre_activation) {
                (Some(i), Some(z)) => (i, z),
                _ => return Err(Error::MissingForward(idx)),
            };
            if grad.shape() != z.shape() {
                return Err(Error::shape(
                    "stack backward gradient",
                    format!("{:?}", z.shape()),
                    format!("{:?}", grad.shape()),
                ));
            }
            let act = layer.activation;
            if act != Activation::Identity {
                for (g, &zv) in grad.data_mut().iter_mut().zip(z.data()) {
                    *g *= act.derivative(zv);
                }
            }
            layer.weight_grad = grad.transpose_matmul(input)?;
            for (j, bg) in layer.bias_grad.iter_mut().enumerate() {
                *bg = (0..grad.rows()).map(|r| grad.get(r, j)).sum();
            }
            grad = grad.matmul(&layer.weights)?;
        }
        self.has_grad = true;
        Ok(grad)
    }

    pub fn has_gradients(&self) -> bool {
        self.has_grad
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.weight_grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
            layer.bias_grad.iter_mut().for_each(|g| *g = T::zero());
        }
        self.has_grad = false;
    }

    /// Drops cached activations and gradients, e.g. before sharing read-only.
    pub fn clear_cache(&mut self) {
        for layer in &mut self.layers {
            layer.input_cache = None;
            layer.pre_activation = None;
        }
        self.zero_grad();
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    /// All parameters flattened as `[W₀, b₀, W₁, b₁, ...]`.
    pub fn parameters(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Gradients in the same order as [`parameters`](Self::parameters).
    pub fn gradients(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(l.weight_grad.data());
            out.extend_from_slice(&l.bias_grad);
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::shape("set_parameters", self.num_parameters(), values.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            l.weights.data_mut().copy_from_slice(&values[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Applies `update(param, grad, slot)` to every parameter, where `slot`
    /// is the parameter's flat index.
    pub(crate) fn for_each_parameter(&mut self, mut update: impl FnMut(&mut T, T, usize)) {
        let mut slot = 0;
        for l in &mut self.layers {
            for (w, &g) in l.weights.data_mut().iter_mut().zip(l.weight_grad.data()) {
                update(w, g, slot);
                slot += 1;
            }
            for (b, &g) in l.bias.iter_mut().zip(&l.bias_grad) {
                update(b, g, slot);
                slot += 1;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> DifferentiableStack<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                AffineLayer::new(
                    l.weights.cast(),
                    l.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                    l.activation,
                )
                .expect("same shapes")
            })
            .collect();
        DifferentiableStack {
            layers,
            has_grad: false,
        }
    }
}

impl<T: Scalar> PartialEq for DifferentiableStack<T> {
    /// Parameter equality; caches and gradients are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.spec() == other.spec() && self.parameters() == other.parameters()
    }
}
