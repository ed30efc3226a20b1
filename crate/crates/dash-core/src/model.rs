//! Multi-layer perceptron members, exact manual backpropagation, and the
//! averaged-softmax ensemble predictor.
//!
//! Members are plain records: forward produces logits plus a cache, and
//! `backward` turns an upstream gradient on the logits into a gradient
//! over every parameter. No autodiff graph — the chain rule for the
//! dense/activation stack is written out once and verified against
//! finite differences in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Hidden-layer activation. The output layer is always linear (logits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Flattened view of one member's parameters, supporting the vector
/// arithmetic the perturbation rules need.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(k: usize) -> Self {
        ParamVector(vec![0.0; k])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (x, y) in self.0.iter_mut().zip(&other.0) {
            *x += alpha * y;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in self.0.iter_mut() {
            *x *= s;
        }
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.0.len(), other.0.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Serialized form of a member: shapes plus row-major weight arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// One ensemble member: a dense MLP `d -> h1 -> ... -> M`.
#[derive(Debug, Clone)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    /// Bumped on every parameter mutation; forward caches carry the value
    /// they were built against so a stale cache is detected, not silently
    /// used.
    version: u64,
}

/// Activations recorded by `forward`, sufficient for `backward`.
pub struct ForwardCache {
    /// `activations[0]` is the input batch; `activations[l]` the output of
    /// hidden layer `l`. The final logits are not needed for backprop.
    activations: Vec<Tensor>,
    version: u64,
}

impl MlpModel {
    /// Build a model with all weights and biases zero.
    pub fn zeros(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        Self::validate_sizes(&layer_sizes)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            weights.push(Tensor::zeros(vec![w[0], w[1]]));
            biases.push(vec![0.0; w[1]]);
        }
        Ok(MlpModel {
            layer_sizes,
            weights,
            biases,
            activation,
            version: 0,
        })
    }

    /// Glorot-uniform initialization: weights from
    /// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`, biases
    /// zero, drawn in layer order from the given generator.
    pub fn init(layer_sizes: Vec<usize>, activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes, activation)?;
        for w in model.weights.iter_mut() {
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in w.data_mut() {
                *x = rng.uniform(-a, a);
            }
        }
        model.version = 0;
        Ok(model)
    }

    fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Parameter(format!(
                "layer sizes must list at least [input, output] positive extents, got {layer_sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Input dimension `d`.
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Class count `M`.
    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total parameter count `k`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Flatten all parameters: per layer, weights row-major then biases.
    /// Exact bijection with `set_params`.
    pub fn flatten(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        ParamVector(out)
    }

    /// Overwrite all parameters from a flat vector (inverse of `flatten`).
    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                context: "set_params",
                left: vec![self.param_count()],
                right: vec![params.len()],
            });
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.data_mut().copy_from_slice(&params.as_slice()[off..off + n]);
            off += n;
            let nb = b.len();
            b.copy_from_slice(&params.as_slice()[off..off + nb]);
            off += nb;
        }
        self.version += 1;
        Ok(())
    }

    /// Forward pass: logits `[b, M]` plus the cache `backward` needs.
    pub fn forward(&self, inputs: &Tensor) -> Result<(Tensor, ForwardCache)> {
        if inputs.shape().len() != 2 || inputs.shape()[1] != self.input_dim() {
            return Err(Error::Dimension {
                context: "forward",
                left: inputs.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let layers = self.weights.len();
        let mut activations = Vec::with_capacity(layers);
        activations.push(inputs.clone());
        let mut current = inputs.clone();
        for l in 0..layers {
            let mut z = current.matmul(&self.weights[l])?.add_row(&self.biases[l])?;
            if l + 1 < layers {
                for x in z.data_mut() {
                    *x = self.activation.apply(*x);
                }
                activations.push(z.clone());
            }
            current = z;
        }
        Ok((
            current,
            ForwardCache {
                activations,
                version: self.version,
            },
        ))
    }

    /// Logits only, when no gradient is needed afterwards.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        Ok(self.forward(inputs)?.0)
    }

    /// Backpropagate an upstream gradient on the logits to a gradient over
    /// every parameter. `grad_logits` must be `dLoss/dlogits` for a scalar
    /// loss; the cache must come from a `forward` on the current
    /// parameters.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<ParamVector> {
        let (delta, mut grads) = self.backward_layers(cache, grad_logits)?;
        drop(delta);
        let mut out = Vec::with_capacity(self.param_count());
        for (gw, gb) in grads.drain(..) {
            out.extend_from_slice(gw.data());
            out.extend(gb);
        }
        Ok(ParamVector(out))
    }

    /// Gradient of the scalar loss w.r.t. the input batch `[b, d]`.
    pub fn input_backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Tensor> {
        let (delta, _) = self.backward_layers(cache, grad_logits)?;
        // delta is dLoss/d(activations[0]) = dLoss/d(inputs)
        Ok(delta)
    }

    /// Shared chain-rule walk. Returns the gradient w.r.t. the inputs and
    /// the per-layer (weight, bias) gradients in layer order.
    fn backward_layers(
        &self,
        cache: &ForwardCache,
        grad_logits: &Tensor,
    ) -> Result<(Tensor, Vec<(Tensor, Vec<f64>)>)> {
        if cache.version != self.version {
            return Err(Error::State(
                "stale forward cache: parameters changed since forward".into(),
            ));
        }
        let layers = self.weights.len();
        let batch = cache.activations[0].shape()[0];
        if grad_logits.shape() != [batch, self.output_dim()] {
            return Err(Error::Dimension {
                context: "backward",
                left: grad_logits.shape().to_vec(),
                right: vec![batch, self.output_dim()],
            });
        }
        let mut grads = vec![None; layers];
        let mut delta = grad_logits.clone();
        for l in (0..layers).rev() {
            let a_prev = &cache.activations[l];
            let grad_w = a_prev.transpose().matmul(&delta)?;
            let cols = delta.cols();
            let mut grad_b = vec![0.0; cols];
            for row in 0..delta.rows() {
                for (gb, &d) in grad_b.iter_mut().zip(delta.row(row)) {
                    *gb += d;
                }
            }
            grads[l] = Some((grad_w, grad_b));
            // propagate to the previous layer's output
            delta = delta.matmul(&self.weights[l].transpose())?;
            if l > 0 {
                for (d, &y) in delta.data_mut().iter_mut().zip(a_prev.data()) {
                    *d *= self.activation.derivative_from_output(y);
                }
            }
        }
        Ok((delta, grads.into_iter().map(|g| g.unwrap()).collect()))
    }

    fn to_doc(&self) -> ModelDoc {
        ModelDoc {
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| w.data().to_vec()).collect(),
            biases: self.biases.clone(),
        }
    }

    fn from_doc(doc: ModelDoc) -> Result<Self> {
        let mut model = Self::zeros(doc.layer_sizes, doc.activation)?;
        if doc.weights.len() != model.weights.len() || doc.biases.len() != model.biases.len() {
            return Err(Error::Data(format!(
                "model document has {} weight blocks for {} layers",
                doc.weights.len(),
                model.weights.len()
            )));
        }
        for (l, (w, b)) in doc.weights.into_iter().zip(doc.biases).enumerate() {
            let (fan_in, fan_out) = (model.layer_sizes[l], model.layer_sizes[l + 1]);
            model.weights[l] = Tensor::new(vec![fan_in, fan_out], w)?;
            if b.len() != fan_out {
                return Err(Error::Data(format!(
                    "layer {l} bias length {} != {fan_out}",
                    b.len()
                )));
            }
            model.biases[l] = b;
        }
        Ok(model)
    }
}

impl Serialize for MlpModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MlpModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = ModelDoc::deserialize(d)?;
        MlpModel::from_doc(doc).map_err(serde::de::Error::custom)
    }
}

/// A mini-batch: inputs `[b, d]` with integer class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::Dimension {
                context: "Batch::new",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(Batch { inputs, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// An ensemble of at least two members sharing input dimension and class
/// count; layer stacks in between may differ per member.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<MlpModel>", into = "Vec<MlpModel>")]
pub struct Ensemble {
    members: Vec<MlpModel>,
}

impl TryFrom<Vec<MlpModel>> for Ensemble {
    type Error = Error;
    fn try_from(members: Vec<MlpModel>) -> Result<Self> {
        Ensemble::new(members)
    }
}

impl From<Ensemble> for Vec<MlpModel> {
    fn from(e: Ensemble) -> Self {
        e.members
    }
}

impl Ensemble {
    pub fn new(members: Vec<MlpModel>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::State(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let d = members[0].input_dim();
        let m_classes = members[0].output_dim();
        for (i, member) in members.iter().enumerate() {
            if member.input_dim() != d || member.output_dim() != m_classes {
                return Err(Error::Dimension {
                    context: "Ensemble::new",
                    left: vec![d, m_classes],
                    right: vec![member.input_dim(), member.output_dim()],
                });
            }
            let _ = i;
        }
        Ok(Ensemble { members })
    }

    /// Initialize `m` members with the given per-member layer stacks.
    /// Member `i` draws from the child stream `seed_rng.derive(i)`, so a
    /// member's initialization does not depend on its siblings.
    pub fn init(
        member_layer_sizes: &[Vec<usize>],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let base = Rng::new(seed);
        let members = member_layer_sizes
            .iter()
            .enumerate()
            .map(|(i, sizes)| MlpModel::init(sizes.clone(), activation, &mut base.derive(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ensemble::new(members)
    }

    pub fn members(&self) -> &[MlpModel] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [MlpModel] {
        &mut self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.members[0].output_dim()
    }

    /// Averaged-softmax prediction: mean over members of
    /// `softmax(logits, 1)`. Rows sum to 1 by construction.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        if self.members.is_empty() {
            return Err(Error::State("empty ensemble".into()));
        }
        let mut mixture: Option<Tensor> = None;
        for member in &self.members {
            let probs = member.logits(inputs)?.softmax_rows(1.0)?;
            mixture = Some(match mixture {
                None => probs,
                Some(acc) => acc.add(&probs)?,
            });
        }
        Ok(mixture.unwrap().scale(1.0 / self.members.len() as f64))
    }

    /// Per-member softmax probabilities (temperature 1).
    pub fn member_probs(&self, inputs: &Tensor) -> Result<Vec<Tensor>> {
        self.members
            .iter()
            .map(|m| m.logits(inputs)?.softmax_rows(1.0))
            .collect()
    }

    /// Per-member logits.
    pub fn member_logits(&self, inputs: &Tensor) -> Result<Vec<Tensor>> {
        self.members.iter().map(|m| m.logits(inputs)).collect()
    }
}
