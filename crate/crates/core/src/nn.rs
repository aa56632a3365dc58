//! Small dense networks with exact backpropagation.
//!
//! Parameters for a whole network live in one flat [`ParamVector`]. Each layer
//! owns a contiguous `weights` block (row-major, `fan_out x fan_in`) followed by
//! its `bias` block; hidden layers come first, the output head last. The layout
//! only depends on the [`NetSpec`], so vectors can be exchanged between units,
//! chunked, and written to disk without extra metadata.

use std::ops::{Deref, DerefMut, Range};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
}

/// Output head of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    /// `actions` policy logits followed by one state value.
    PolicyValue { actions: usize },
    /// One Q-value per action.
    Q { actions: usize },
    /// `atoms` logits per action, softmaxed per action.
    QDist { actions: usize, atoms: usize },
}

impl Head {
    pub fn actions(&self) -> usize {
        match *self {
            Head::PolicyValue { actions } | Head::Q { actions } | Head::QDist { actions, .. } => {
                actions
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            Head::PolicyValue { actions } => actions + 1,
            Head::Q { actions } => actions,
            Head::QDist { actions, atoms } => actions * atoms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub head: Head,
}

impl NetSpec {
    /// Dense trunk of `depth` layers of `width` tanh units.
    pub fn dense(input_dim: usize, width: usize, depth: usize, head: Head) -> Self {
        NetSpec {
            input_dim,
            hidden: vec![
                HiddenLayer {
                    width,
                    activation: Activation::Tanh
                };
                depth
            ],
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return config_err("network input_dim must be >= 1");
        }
        if self.hidden.is_empty() {
            return config_err("network needs at least one hidden layer");
        }
        if let Some(i) = self.hidden.iter().position(|l| l.width == 0) {
            return config_err(format!("hidden layer {i} has width 0"));
        }
        match self.head {
            Head::PolicyValue { actions } | Head::Q { actions } if actions == 0 => {
                config_err("head needs at least one action")
            }
            Head::QDist { actions, atoms } if actions == 0 || atoms == 0 => {
                config_err("distributional head needs >= 1 action and >= 1 atom")
            }
            _ => Ok(()),
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for layer in &self.hidden {
            dims.push((fan_in, layer.width));
            fan_in = layer.width;
        }
        dims.push((fan_in, self.head.output_dim()));
        dims
    }
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
    /// `None` for the linear output head.
    pub activation: Option<Activation>,
}

impl LayerLayout {
    /// The full span (weights then bias) of this layer.
    pub fn span(&self) -> Range<usize> {
        self.weights.start..self.bias.end
    }
}

macro_rules! flat_vector {
    ($name:ident) => {
        #[derive(Clone, Debug, Default, PartialEq)]
        pub struct $name<T>(pub Vec<T>);

        impl<T> Deref for $name<T> {
            type Target = [T];
            fn deref(&self) -> &[T] {
                &self.0
            }
        }

        impl<T> DerefMut for $name<T> {
            fn deref_mut(&mut self) -> &mut [T] {
                &mut self.0
            }
        }

        impl<T: Scalar> $name<T> {
            pub fn zeros(len: usize) -> Self {
                $name(vec![T::zero(); len])
            }

            pub fn into_inner(self) -> Vec<T> {
                self.0
            }
        }

        impl<T> From<Vec<T>> for $name<T> {
            fn from(v: Vec<T>) -> Self {
                $name(v)
            }
        }
    };
}

flat_vector!(ParamVector);
flat_vector!(GradVector);

impl<T: Scalar> GradVector<T> {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self += other * scale`.
    pub fn add_scaled(&mut self, other: &[T], scale: T) {
        for (a, &b) in self.0.iter_mut().zip(other) {
            *a += b * scale;
        }
    }
}

/// Intermediate values from a forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub batch: usize,
    /// `layer_inputs[l]` is the `batch x fan_in` input of layer `l`.
    layer_inputs: Vec<Vec<T>>,
    /// Raw `batch x output_dim` network output (before any head softmax).
    pub output: Vec<T>,
}

/// Softmax probabilities and state values from a policy-value head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyValueOut<T> {
    /// `batch x actions`, row-major.
    pub probs: Vec<T>,
    pub values: Vec<T>,
}

/// A network architecture with its resolved parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetSpec,
    layers: Vec<LayerLayout>,
    param_count: usize,
}

impl Network {
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
        let mut offset = 0;
        for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let is_head = i == spec.hidden.len();
            let weights = offset..offset + fan_in * fan_out;
            let bias = weights.end..weights.end + fan_out;
            offset = bias.end;
            layers.push(LayerLayout {
                name: if is_head {
                    "head".to_string()
                } else {
                    format!("hidden{i}")
                },
                fan_in,
                fan_out,
                weights,
                bias,
                activation: if is_head {
                    None
                } else {
                    Some(spec.hidden[i].activation)
                },
            });
        }
        Ok(Network {
            spec,
            layers,
            param_count: offset,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.head.output_dim()
    }

    pub fn actions(&self) -> usize {
        self.spec.head.actions()
    }

    /// Glorot-uniform weights, zero biases, fully determined by `seed`.
    pub fn init<T: Scalar>(&self, seed: u64) -> ParamVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(self.param_count);
        for layer in &self.layers {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut params[layer.weights.clone()] {
                *w = T::lit(rng.random_range(-limit..limit));
            }
        }
        params
    }

    fn check_inputs<T>(&self, params: &[T], obs: &[T], batch: usize) -> Result<()> {
        if params.len() != self.param_count {
            return shape_err(format!(
                "parameter vector has {} entries, network expects {}",
                params.len(),
                self.param_count
            ));
        }
        if batch == 0 {
            return shape_err("batch must contain at least one observation");
        }
        if obs.len() != batch * self.spec.input_dim {
            return shape_err(format!(
                "observation buffer has {} entries, expected {} x {}",
                obs.len(),
                batch,
                self.spec.input_dim
            ));
        }
        Ok(())
    }

    /// Runs the trunk and linear head, returning raw outputs plus the cache.
    pub fn forward<T: Scalar>(
        &self,
        params: &[T],
        obs: &[T],
        batch: usize,
    ) -> Result<ForwardCache<T>> {
        self.check_inputs(params, obs, batch)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut x = obs.to_vec();
        for layer in &self.layers {
            let w = &params[layer.weights.clone()];
            let b = &params[layer.bias.clone()];
            let mut y = vec![T::zero(); batch * layer.fan_out];
            for r in 0..batch {
                let xr = &x[r * layer.fan_in..(r + 1) * layer.fan_in];
                let yr = &mut y[r * layer.fan_out..(r + 1) * layer.fan_out];
                for (o, out) in yr.iter_mut().enumerate() {
                    let wo = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let mut acc = b[o];
                    for (&wi, &xi) in wo.iter().zip(xr) {
                        acc += wi * xi;
                    }
                    *out = match layer.activation {
                        Some(Activation::Tanh) => acc.tanh(),
                        Some(Activation::Relu) => acc.max(T::zero()),
                        None => acc,
                    };
                }
            }
            layer_inputs.push(std::mem::replace(&mut x, y));
        }
        Ok(ForwardCache {
            batch,
            layer_inputs,
            output: x,
        })
    }

    pub fn forward_policy_value<T: Scalar>(
        &self,
        params: &[T],
        obs: &[T],
        batch: usize,
    ) -> Result<PolicyValueOut<T>> {
        let Head::PolicyValue { actions } = self.spec.head else {
            return shape_err("forward_policy_value needs a policy-value head");
        };
        let cache = self.forward(params, obs, batch)?;
        Ok(split_policy_value(&cache.output, batch, actions))
    }

    /// `batch x actions` Q-values.
    pub fn forward_q<T: Scalar>(&self, params: &[T], obs: &[T], batch: usize) -> Result<Vec<T>> {
        if !matches!(self.spec.head, Head::Q { .. }) {
            return shape_err("forward_q needs a Q head");
        }
        Ok(self.forward(params, obs, batch)?.output)
    }

    /// `batch x actions x atoms` probabilities; each atom row sums to one.
    pub fn forward_q_dist<T: Scalar>(
        &self,
        params: &[T],
        obs: &[T],
        batch: usize,
    ) -> Result<Vec<T>> {
        let Head::QDist { atoms, .. } = self.spec.head else {
            return shape_err("forward_q_dist needs a distributional head");
        };
        let mut out = self.forward(params, obs, batch)?.output;
        for row in out.chunks_mut(atoms) {
            softmax_in_place(row);
        }
        Ok(out)
    }

    /// Exact gradient of `sum(head_grad * output)` with respect to the
    /// parameters, where `head_grad` is taken at the raw (pre-softmax) output.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        obs: &[T],
        batch: usize,
        head_grad: &[T],
    ) -> Result<GradVector<T>> {
        let cache = self.forward(params, obs, batch)?;
        self.backward_cached(params, &cache, head_grad)
    }

    /// Backward pass reusing a cache from [`Network::forward`].
    pub fn backward_cached<T: Scalar>(
        &self,
        params: &[T],
        cache: &ForwardCache<T>,
        head_grad: &[T],
    ) -> Result<GradVector<T>> {
        let batch = cache.batch;
        if head_grad.len() != batch * self.output_dim() {
            return shape_err(format!(
                "head gradient has {} entries, expected {} x {}",
                head_grad.len(),
                batch,
                self.output_dim()
            ));
        }
        let mut grad = GradVector::zeros(self.param_count);
        let mut delta = head_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.layer_inputs[l];
            let w = &params[layer.weights.clone()];
            let (fan_in, fan_out) = (layer.fan_in, layer.fan_out);
            {
                let (gw, gb) = grad[layer.weights.start..layer.bias.end].split_at_mut(fan_in * fan_out);
                for r in 0..batch {
                    let dr = &delta[r * fan_out..(r + 1) * fan_out];
                    let xr = &x[r * fan_in..(r + 1) * fan_in];
                    for (o, &d) in dr.iter().enumerate() {
                        if d == T::zero() {
                            continue;
                        }
                        gb[o] += d;
                        for (g, &xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                            *g += d * xi;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Propagate to the previous layer's post-activation output, then
            // through its activation.
            let prev_act = self.layers[l - 1]
                .activation
                .expect("hidden layers always have an activation");
            let mut next = vec![T::zero(); batch * fan_in];
            for r in 0..batch {
                let dr = &delta[r * fan_out..(r + 1) * fan_out];
                let nr = &mut next[r * fan_in..(r + 1) * fan_in];
                for (o, &d) in dr.iter().enumerate() {
                    if d == T::zero() {
                        continue;
                    }
                    for (n, &wi) in nr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *n += d * wi;
                    }
                }
                let yr = &x[r * fan_in..(r + 1) * fan_in];
                for (n, &y) in nr.iter_mut().zip(yr) {
                    *n *= match prev_act {
                        Activation::Tanh => T::one() - y * y,
                        Activation::Relu => {
                            if y > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                }
            }
            delta = next;
        }
        Ok(grad)
    }
}

/// Splits raw policy-value outputs into softmax probabilities and values.
pub fn split_policy_value<T: Scalar>(output: &[T], batch: usize, actions: usize) -> PolicyValueOut<T> {
    let mut probs = Vec::with_capacity(batch * actions);
    let mut values = Vec::with_capacity(batch);
    for row in output.chunks(actions + 1) {
        let start = probs.len();
        probs.extend_from_slice(&row[..actions]);
        softmax_in_place(&mut probs[start..]);
        values.push(row[actions]);
    }
    PolicyValueOut { probs, values }
}

/// Numerically stable softmax over one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in row.iter_mut() {
        *z /= sum;
    }
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<T, F>(params: &[T], mut loss: F, epsilon: T) -> GradVector<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    let mut probe = params.to_vec();
    let two = T::lit(2.0);
    let grad = (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + epsilon;
            let up = loss(&probe);
            probe[i] = orig - epsilon;
            let down = loss(&probe);
            probe[i] = orig;
            (up - down) / (two * epsilon)
        })
        .collect();
    GradVector(grad)
}
