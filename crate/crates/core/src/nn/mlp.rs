//! Dense multilayer perceptrons with an explicit reverse pass.
//!
//! A forward pass records every intermediate activation in a
//! [`ForwardCache`]; [`ModelWeights::backward`] walks that record in reverse
//! and returns gradients for the weights, for the network input, and for an
//! optional feature-wise modulation applied to one hidden layer. Extra
//! upstream gradients can be injected at any hidden layer, which is how
//! losses defined on intermediate embeddings are differentiated.
//!
//! Hidden layer `l` computes `linear -> [batchnorm] -> activation -> [scale, shift]`;
//! the last layer computes `linear -> output activation`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BATCHNORM_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential update.
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// BatchNorm normalizes with the statistics of the current batch.
    Train,
    /// BatchNorm uses the frozen running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// One flag per hidden layer.
    pub batchnorm: Vec<bool>,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    /// Plain MLP without BatchNorm and with identity output.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        let hidden = layer_sizes.len().saturating_sub(2);
        Self {
            layer_sizes,
            activation,
            batchnorm: vec![false; hidden],
            output_activation: OutputActivation::Identity,
        }
    }

    pub fn with_batchnorm(mut self, enabled: bool) -> Self {
        self.batchnorm.iter_mut().for_each(|b| *b = enabled);
        self
    }

    pub fn with_output(mut self, output: OutputActivation) -> Self {
        self.output_activation = output;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least two layer sizes".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        if self.batchnorm.len() != self.hidden_layers() {
            return Err(Error::shape(
                "MlpSpec::batchnorm",
                self.hidden_layers(),
                self.batchnorm.len(),
            ));
        }
        if let Activation::LeakyRelu(slope) = self.activation {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "leaky relu slope {slope} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len().saturating_sub(2)
    }

    /// Width of hidden layer `l` (0-based).
    pub fn hidden_width(&self, l: usize) -> usize {
        self.layer_sizes[l + 1]
    }
}

/// Affine layer `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<S> {
    pub weight: Tensor<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Dense<S> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: vec![S::zero(); outputs],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

impl<S: Scalar> BatchNorm<S> {
    fn identity(width: usize) -> Self {
        Self {
            gamma: vec![S::one(); width],
            beta: vec![S::zero(); width],
            running_mean: vec![S::zero(); width],
            running_var: vec![S::one(); width],
        }
    }
}

/// Feature-wise affine modulation `scale ⊙ h + shift` of one hidden layer's output.
#[derive(Debug, Clone, Copy)]
pub struct Modulation<'a, S> {
    pub layer: usize,
    pub scale: &'a [S],
    pub shift: &'a [S],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights<S> {
    spec: MlpSpec,
    layers: Vec<Dense<S>>,
    norms: Vec<Option<BatchNorm<S>>>,
}

struct BnCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
    batch_mean: Vec<S>,
    batch_var: Vec<S>,
}

/// Everything the reverse pass needs from one forward evaluation.
pub struct ForwardCache<S> {
    mode: Mode,
    /// `inputs[l]` is the input to affine layer `l`.
    inputs: Vec<Tensor<S>>,
    /// Post-normalization, pre-activation values of hidden layers.
    pre_activation: Vec<Tensor<S>>,
    /// Hidden activations before modulation.
    hidden: Vec<Tensor<S>>,
    norms: Vec<Option<BnCache<S>>>,
    modulation: Option<(usize, Vec<S>)>,
    output: Tensor<S>,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn output(&self) -> &Tensor<S> {
        &self.output
    }

    pub fn into_output(self) -> Tensor<S> {
        self.output
    }

    /// Output of hidden layer `l` after activation and modulation.
    pub fn hidden_output(&self, l: usize) -> &Tensor<S> {
        &self.inputs[l + 1]
    }

    /// Output of the last hidden layer (the penultimate representation).
    pub fn penultimate(&self) -> &Tensor<S> {
        self.inputs.last().unwrap()
    }

    /// Post-normalization, pre-activation values of hidden layer `l`
    /// (pre-output-activation values for the last layer).
    pub fn pre_activation(&self, l: usize) -> &Tensor<S> {
        &self.pre_activation[l]
    }

    /// Batch mean and biased variance of every normalized layer (train mode only).
    pub fn batch_stats(&self) -> Vec<(Vec<S>, Vec<S>)> {
        self.norms
            .iter()
            .flatten()
            .map(|bc| (bc.batch_mean.clone(), bc.batch_var.clone()))
            .collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Gradients laid out like [`ModelWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<Dense<S>>,
    /// `(d gamma, d beta)` per normalized hidden layer.
    pub norms: Vec<Option<(Vec<S>, Vec<S>)>>,
}

impl<S: Scalar> Gradients<S> {
    /// Flattened in the same order as [`ModelWeights::params`].
    pub fn flat(&self) -> Vec<S> {
        let mut out = Vec::new();
        for (l, d) in self.layers.iter().enumerate() {
            out.extend_from_slice(d.weight.data());
            out.extend_from_slice(&d.bias);
            if let Some(Some((g, b))) = self.norms.get(l) {
                out.extend_from_slice(g);
                out.extend_from_slice(b);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationGrad<S> {
    pub scale: Vec<S>,
    pub shift: Vec<S>,
}

pub struct Backward<S> {
    pub weights: Gradients<S>,
    pub input: Tensor<S>,
    pub modulation: Option<ModulationGrad<S>>,
}

fn activate<S: Scalar>(act: Activation, x: S) -> S {
    match act {
        Activation::Relu => x.max(S::zero()),
        Activation::LeakyRelu(slope) => {
            if x > S::zero() {
                x
            } else {
                S::lit(slope) * x
            }
        }
    }
}

fn activation_slope<S: Scalar>(act: Activation, x: S) -> S {
    match act {
        Activation::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        Activation::LeakyRelu(slope) => {
            if x > S::zero() {
                S::one()
            } else {
                S::lit(slope)
            }
        }
    }
}

impl<S: Scalar> ModelWeights<S> {
    /// All weights zero, BatchNorm at identity with unit running variance.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let norms = spec
            .batchnorm
            .iter()
            .enumerate()
            .map(|(l, &bn)| bn.then(|| BatchNorm::identity(spec.hidden_width(l))))
            .collect();
        Ok(Self { spec, layers, norms })
    }

    /// He-style uniform fan-in initialization, `U(-√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut w = Self::zeros(spec)?;
        for layer in &mut w.layers {
            let fan_in = layer.weight.cols();
            let bound = (6.0 / fan_in as f64).sqrt();
            for x in layer.weight.data_mut() {
                *x = S::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(w)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layer(&self, l: usize) -> &Dense<S> {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Dense<S> {
        &mut self.layers[l]
    }

    pub fn norm(&self, l: usize) -> Option<&BatchNorm<S>> {
        self.norms.get(l).and_then(Option::as_ref)
    }

    pub fn norm_mut(&mut self, l: usize) -> Option<&mut BatchNorm<S>> {
        self.norms.get_mut(l).and_then(Option::as_mut)
    }

    /// Number of trainable scalars (weights, biases, BatchNorm affine terms).
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        for (l, d) in self.layers.iter().enumerate() {
            n += d.weight.len() + d.bias.len();
            if let Some(bn) = self.norm(l) {
                n += bn.gamma.len() + bn.beta.len();
            }
        }
        n
    }

    /// Trainable parameters flattened layer by layer: `W`, `b`, then `gamma`, `beta`.
    pub fn params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_params());
        for (l, d) in self.layers.iter().enumerate() {
            out.extend_from_slice(d.weight.data());
            out.extend_from_slice(&d.bias);
            if let Some(bn) = self.norm(l) {
                out.extend_from_slice(&bn.gamma);
                out.extend_from_slice(&bn.beta);
            }
        }
        out
    }

    pub fn set_params(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("ModelWeights::set_params", self.num_params(), flat.len()));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [S]| {
            let n = dst.len();
            dst.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        };
        for l in 0..self.layers.len() {
            take(self.layers[l].weight.data_mut());
            take(&mut self.layers[l].bias);
            if let Some(Some(bn)) = self.norms.get_mut(l) {
                take(&mut bn.gamma);
                take(&mut bn.beta);
            }
        }
        Ok(())
    }

    /// Running statistics of every normalized layer, flattened.
    pub fn running_stats(&self) -> Vec<(Vec<S>, Vec<S>)> {
        self.norms
            .iter()
            .flatten()
            .map(|bn| (bn.running_mean.clone(), bn.running_var.clone()))
            .collect()
    }

    /// Copies running statistics from a network with the same spec.
    pub fn copy_running_stats(&mut self, other: &ModelWeights<S>) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::shape("copy_running_stats", "identical specs", "different specs"));
        }
        for (dst, src) in self.norms.iter_mut().zip(&other.norms) {
            if let (Some(d), Some(s)) = (dst, src) {
                d.running_mean.clone_from(&s.running_mean);
                d.running_var.clone_from(&s.running_var);
            }
        }
        Ok(())
    }

    /// Overwrites the running statistics, in the order of [`Self::running_stats`].
    pub fn set_running_stats(&mut self, stats: &[(Vec<S>, Vec<S>)]) -> Result<()> {
        let mut it = stats.iter();
        for bn in self.norms.iter_mut().flatten() {
            let (mean, var) = it
                .next()
                .ok_or_else(|| Error::shape("set_running_stats", "one entry per normalized layer", "too few"))?;
            if mean.len() != bn.running_mean.len() || var.len() != bn.running_var.len() {
                return Err(Error::shape("set_running_stats", bn.running_mean.len(), mean.len()));
            }
            bn.running_mean.clone_from(mean);
            bn.running_var.clone_from(var);
        }
        if it.next().is_some() {
            return Err(Error::shape(
                "set_running_stats",
                "one entry per normalized layer",
                "too many",
            ));
        }
        Ok(())
    }

    fn as_matrix(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let cols = input.cols();
        if cols != self.spec.input_dim() || input.shape().len() > 2 || input.is_empty() {
            return Err(Error::shape(
                "forward input",
                format!("[n, {}]", self.spec.input_dim()),
                format!("{:?}", input.shape()),
            ));
        }
        Tensor::matrix(input.rows(), cols, input.data().to_vec())
    }

    pub fn forward(&self, input: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        Ok(self.forward_cached(input, mode, None)?.output)
    }

    /// Forward pass recording activations; optionally modulates one hidden layer.
    pub fn forward_cached(
        &self,
        input: &Tensor<S>,
        mode: Mode,
        modulation: Option<Modulation<'_, S>>,
    ) -> Result<ForwardCache<S>> {
        if let Some(m) = &modulation {
            if m.layer >= self.spec.hidden_layers() {
                return Err(Error::shape(
                    "modulation layer",
                    format!("< {}", self.spec.hidden_layers()),
                    m.layer,
                ));
            }
            let width = self.spec.hidden_width(m.layer);
            if m.scale.len() != width || m.shift.len() != width {
                return Err(Error::shape(
                    "modulation width",
                    width,
                    format!("{}/{}", m.scale.len(), m.shift.len()),
                ));
            }
        }
        let depth = self.spec.depth();
        let act = self.spec.activation;
        let eps = S::lit(BATCHNORM_EPS);
        let mut a = self.as_matrix(input)?;
        let n = a.rows();
        let mut cache = ForwardCache {
            mode,
            inputs: Vec::with_capacity(depth),
            pre_activation: Vec::with_capacity(depth),
            hidden: Vec::with_capacity(depth.saturating_sub(1)),
            norms: Vec::with_capacity(depth.saturating_sub(1)),
            modulation: modulation.map(|m| (m.layer, m.scale.to_vec())),
            output: Tensor::zeros(&[0]),
        };
        for (l, dense) in self.layers.iter().enumerate() {
            let mut z = a.matmul_transposed(&dense.weight);
            for i in 0..n {
                for (zi, &b) in z.row_mut(i).iter_mut().zip(&dense.bias) {
                    *zi += b;
                }
            }
            cache.inputs.push(a);
            if l + 1 == depth {
                let out = match self.spec.output_activation {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Sigmoid => {
                        let mut o = z.clone();
                        o.data_mut().iter_mut().for_each(|x| *x = crate::scalar::sigmoid(*x));
                        o
                    }
                };
                cache.pre_activation.push(z);
                out.ensure_finite("forward")?;
                cache.output = out;
                break;
            }
            let width = z.cols();
            let bn_cache = match self.norm(l) {
                None => None,
                Some(bn) => {
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let nf = S::from_usize(n).unwrap();
                            let mean: Vec<S> = z.column_sums().into_iter().map(|s| s / nf).collect();
                            let mut var = vec![S::zero(); width];
                            for i in 0..n {
                                for ((v, &x), &m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
                                    *v += (x - m) * (x - m);
                                }
                            }
                            var.iter_mut().for_each(|v| *v /= nf);
                            (mean, var)
                        }
                        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
                    let mut xhat = z.clone();
                    for i in 0..n {
                        for (j, x) in xhat.row_mut(i).iter_mut().enumerate() {
                            *x = (*x - mean[j]) * inv_std[j];
                        }
                    }
                    for i in 0..n {
                        for (j, x) in z.row_mut(i).iter_mut().enumerate() {
                            *x = bn.gamma[j] * xhat.row(i)[j] + bn.beta[j];
                        }
                    }
                    Some(BnCache {
                        xhat,
                        inv_std,
                        batch_mean: mean,
                        batch_var: var,
                    })
                }
            };
            let mut h = z.clone();
            h.data_mut().iter_mut().for_each(|x| *x = activate(act, *x));
            let mut out = h.clone();
            if let Some(m) = modulation.filter(|m| m.layer == l) {
                for i in 0..n {
                    for ((x, &s), &b) in out.row_mut(i).iter_mut().zip(m.scale).zip(m.shift) {
                        *x = s * *x + b;
                    }
                }
            }
            cache.norms.push(bn_cache);
            cache.pre_activation.push(z);
            cache.hidden.push(h);
            a = out;
        }
        Ok(cache)
    }

    /// Reverse pass.
    ///
    /// `grad_output` is the upstream gradient at the network output;
    /// `grad_hidden` adds upstream gradients at hidden layer outputs (after
    /// modulation), e.g. from a loss on the penultimate embedding.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        grad_output: &Tensor<S>,
        grad_hidden: &[(usize, &Tensor<S>)],
    ) -> Result<Backward<S>> {
        let depth = self.spec.depth();
        let n = cache.output.rows();
        if grad_output.rows() != n || grad_output.cols() != self.spec.output_dim() {
            return Err(Error::shape(
                "backward upstream",
                format!("[{n}, {}]", self.spec.output_dim()),
                format!("{:?}", grad_output.shape()),
            ));
        }
        for (l, g) in grad_hidden {
            if *l >= self.spec.hidden_layers() || g.rows() != n || g.cols() != self.spec.hidden_width(*l) {
                return Err(Error::shape(
                    "backward hidden upstream",
                    "hidden layer output shape",
                    format!("layer {l} {:?}", g.shape()),
                ));
            }
        }
        let act = self.spec.activation;
        let mut g = Tensor::matrix(n, grad_output.cols(), grad_output.data().to_vec())?;
        if self.spec.output_activation == OutputActivation::Sigmoid {
            for (gi, &y) in g.data_mut().iter_mut().zip(cache.output.data()) {
                *gi *= y * (S::one() - y);
            }
        }
        let mut layer_grads: Vec<Dense<S>> = Vec::with_capacity(depth);
        let mut norm_grads: Vec<Option<(Vec<S>, Vec<S>)>> = vec![None; self.spec.hidden_layers()];
        let mut modulation_grad = None;
        for l in (0..depth).rev() {
            if l + 1 < depth {
                for (hl, extra) in grad_hidden {
                    if *hl == l {
                        for (gi, &e) in g.data_mut().iter_mut().zip(extra.data()) {
                            *gi += e;
                        }
                    }
                }
                let h = &cache.hidden[l];
                if let Some((ml, scale)) = cache.modulation.as_ref().filter(|(ml, _)| *ml == l) {
                    debug_assert_eq!(*ml, l);
                    let width = scale.len();
                    let mut d_scale = vec![S::zero(); width];
                    let d_shift = g.column_sums();
                    for i in 0..n {
                        let gr = g.row_mut(i);
                        for j in 0..width {
                            d_scale[j] += gr[j] * h.row(i)[j];
                            gr[j] *= scale[j];
                        }
                    }
                    modulation_grad = Some(ModulationGrad {
                        scale: d_scale,
                        shift: d_shift,
                    });
                }
                let zn = &cache.pre_activation[l];
                for (gi, &x) in g.data_mut().iter_mut().zip(zn.data()) {
                    *gi *= activation_slope(act, x);
                }
                if let (Some(bn), Some(bc)) = (self.norm(l), cache.norms[l].as_ref()) {
                    let width = bn.gamma.len();
                    let mut d_gamma = vec![S::zero(); width];
                    let d_beta = g.column_sums();
                    for i in 0..n {
                        for j in 0..width {
                            d_gamma[j] += g.row(i)[j] * bc.xhat.row(i)[j];
                        }
                    }
                    match cache.mode {
                        Mode::Eval => {
                            for i in 0..n {
                                for (j, gi) in g.row_mut(i).iter_mut().enumerate() {
                                    *gi *= bn.gamma[j] * bc.inv_std[j];
                                }
                            }
                        }
                        Mode::Train => {
                            let nf = S::from_usize(n).unwrap();
                            let mut sum_dx = vec![S::zero(); width];
                            let mut sum_dx_xhat = vec![S::zero(); width];
                            for i in 0..n {
                                for j in 0..width {
                                    let dx = g.row(i)[j] * bn.gamma[j];
                                    sum_dx[j] += dx;
                                    sum_dx_xhat[j] += dx * bc.xhat.row(i)[j];
                                }
                            }
                            for i in 0..n {
                                for j in 0..width {
                                    let dx = g.row(i)[j] * bn.gamma[j];
                                    let xh = bc.xhat.row(i)[j];
                                    g.row_mut(i)[j] = bc.inv_std[j] / nf * (nf * dx - sum_dx[j] - xh * sum_dx_xhat[j]);
                                }
                            }
                        }
                    }
                    norm_grads[l] = Some((d_gamma, d_beta));
                }
            }
            let dense = &self.layers[l];
            let weight = g.transpose_matmul(&cache.inputs[l]);
            let bias = g.column_sums();
            let next = g.matmul(&dense.weight);
            layer_grads.push(Dense { weight, bias });
            g = next;
        }
        layer_grads.reverse();
        let grads = Gradients {
            layers: layer_grads,
            norms: norm_grads,
        };
        if !crate::scalar::all_finite(&grads.flat()) || !g.is_finite() {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Backward {
            weights: grads,
            input: g,
            modulation: modulation_grad,
        })
    }

    /// Exponential update of BatchNorm running statistics from a train-mode pass.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<S>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = S::lit(BATCHNORM_MOMENTUM);
        for (bn, bc) in self.norms.iter_mut().zip(&cache.norms) {
            if let (Some(bn), Some(bc)) = (bn, bc) {
                for (r, &b) in bn.running_mean.iter_mut().zip(&bc.batch_mean) {
                    *r = m * *r + (S::one() - m) * b;
                }
                for (r, &b) in bn.running_var.iter_mut().zip(&bc.batch_var) {
                    *r = m * *r + (S::one() - m) * b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(vec![3, 4, 2], Activation::Relu)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let w = ModelWeights::<f64>::zeros(small_spec()).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let y = w.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut w = ModelWeights::<f64>::zeros(MlpSpec::new(vec![3, 3], Activation::Relu)).unwrap();
        for i in 0..3 {
            w.layer_mut(0).weight.row_mut(i)[i] = 1.0;
        }
        let x = Tensor::row_vector(&[1.5, -2.0, 0.25]);
        assert_eq!(w.forward(&x, Mode::Eval).unwrap().data(), x.data());
    }

    #[test]
    fn hand_evaluated_two_layer_relu() {
        // h = relu(W1 x + b1), y = W2 h + b2 on x = [1, -1]
        let mut w = ModelWeights::<f64>::zeros(MlpSpec::new(vec![2, 2, 1], Activation::Relu)).unwrap();
        w.layer_mut(0).weight = Tensor::matrix(2, 2, vec![2.0, 1.0, -1.0, 3.0]).unwrap();
        w.layer_mut(0).bias = vec![0.5, 0.0];
        w.layer_mut(1).weight = Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap();
        w.layer_mut(1).bias = vec![0.25];
        // W1 x + b1 = [2 - 1 + 0.5, -1 - 3] = [1.5, -4] -> relu [1.5, 0]
        // y = 1.5 * 1.5 + 0.25 = 2.5
        let y = w.forward(&Tensor::row_vector(&[1.0, -1.0]), Mode::Eval).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn linear_layer_input_gradient_sums_columns() {
        let mut w = ModelWeights::<f64>::zeros(MlpSpec::new(vec![3, 2], Activation::Relu)).unwrap();
        w.layer_mut(0).weight = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let x = Tensor::row_vector(&[0.3, 0.1, -0.2]);
        let cache = w.forward_cached(&x, Mode::Train, None).unwrap();
        let up = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let b = w.backward(&cache, &up, &[]).unwrap();
        assert_eq!(b.input.data(), &[0.0, 2.5, 7.0]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut w = ModelWeights::<f64>::zeros(MlpSpec::new(vec![1, 1, 1], Activation::Relu)).unwrap();
        w.layer_mut(0).weight = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        w.layer_mut(0).bias = vec![-5.0];
        w.layer_mut(1).weight = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let cache = w
            .forward_cached(&Tensor::row_vector(&[1.0]), Mode::Train, None)
            .unwrap();
        let b = w.backward(&cache, &Tensor::row_vector(&[1.0]), &[]).unwrap();
        assert_eq!(b.input.data(), &[0.0]);
        assert_eq!(b.weights.layers[0].weight.data(), &[0.0]);
        assert_eq!(b.weights.layers[0].bias, vec![0.0]);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(vec![3, 5, 4, 1], Activation::LeakyRelu(0.1)).with_batchnorm(true);
        let w = ModelWeights::<f64>::init(spec.clone(), &mut rng).unwrap();
        let p = w.params();
        assert_eq!(p.len(), w.num_params());
        let mut z = ModelWeights::<f64>::zeros(spec).unwrap();
        z.set_params(&p).unwrap();
        assert_eq!(z.params(), p);
        assert!(z.set_params(&p[1..]).is_err());
    }

    #[test]
    fn eval_batchnorm_single_example_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Relu).with_batchnorm(true);
        let mut w = ModelWeights::<f64>::init(spec, &mut rng).unwrap();
        let bn = w.norm_mut(0).unwrap();
        bn.running_mean = vec![0.1, -0.2, 0.3];
        bn.running_var = vec![2.0, 0.5, 1.5];
        let x = Tensor::row_vector(&[0.7, -0.4]);
        let a = w.forward(&x, Mode::Eval).unwrap();
        let b = w.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        // the single example is unaffected by other rows in eval mode
        let batch = Tensor::matrix(2, 2, vec![0.7, -0.4, 5.0, 5.0]).unwrap();
        let y = w.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(y.data()[0], a.data()[0]);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let spec = MlpSpec::new(vec![1, 1, 1], Activation::Relu).with_batchnorm(true);
        let mut w = ModelWeights::<f64>::zeros(spec).unwrap();
        w.layer_mut(0).weight = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let x = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let cache = w.forward_cached(&x, Mode::Train, None).unwrap();
        w.update_running_stats(&cache);
        let bn = w.norm(0).unwrap();
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let w = ModelWeights::<f64>::zeros(small_spec()).unwrap();
        assert!(w.forward(&Tensor::row_vector(&[1.0, 2.0]), Mode::Eval).is_err());
        assert!(MlpSpec::new(vec![3], Activation::Relu).validate().is_err());
        assert!(MlpSpec::new(vec![3, 1], Activation::LeakyRelu(1.5)).validate().is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut w = ModelWeights::<f64>::zeros(MlpSpec::new(vec![1, 1], Activation::Relu)).unwrap();
        w.layer_mut(0).weight = Tensor::matrix(1, 1, vec![f64::MAX]).unwrap();
        assert!(matches!(
            w.forward(&Tensor::row_vector(&[10.0]), Mode::Eval),
            Err(Error::NonFinite(_))
        ));
    }
}
