//! Compact conditioning parameters that modulate a frozen base network.
//!
//! Two adapters are supported. Dynamic biases append `phi` to every input
//! row, so the base network must have been built with `d` extra input
//! columns. FiLM rescales and shifts the output of one hidden layer as
//! `(1 + rho) ⊙ h + b` with `phi = [rho; b]`, so `phi = 0` is the identity.
//!
//! The base weights are only ever borrowed immutably here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardCache, Mode, ModelWeights, Modulation, Tensor};
use crate::scalar::{all_finite, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterKind {
    /// `phi` concatenated to the input of the first layer.
    DynamicBias { dim: usize },
    /// Per-feature scale and shift on hidden layer `layer`; `dim = 2 × width`.
    Film { layer: usize, dim: usize },
}

impl AdapterKind {
    pub fn dim(&self) -> usize {
        match *self {
            AdapterKind::DynamicBias { dim } | AdapterKind::Film { dim, .. } => dim,
        }
    }

    pub fn validate_for<S: Scalar>(&self, theta: &ModelWeights<S>) -> Result<()> {
        let spec = theta.spec();
        match *self {
            AdapterKind::DynamicBias { dim } => {
                if dim == 0 || dim >= spec.input_dim() {
                    return Err(Error::shape(
                        "dynamic bias adapter",
                        format!("0 < d < {}", spec.input_dim()),
                        dim,
                    ));
                }
            }
            AdapterKind::Film { layer, dim } => {
                if layer >= spec.hidden_layers() {
                    return Err(Error::shape("film layer", spec.hidden_layers(), layer));
                }
                if dim != 2 * spec.hidden_width(layer) {
                    return Err(Error::shape("film dimension", 2 * spec.hidden_width(layer), dim));
                }
            }
        }
        Ok(())
    }

    /// Feature count of the data fed to the adapted model.
    pub fn data_dim<S: Scalar>(&self, theta: &ModelWeights<S>) -> usize {
        match *self {
            AdapterKind::DynamicBias { dim } => theta.spec().input_dim() - dim,
            AdapterKind::Film { .. } => theta.spec().input_dim(),
        }
    }
}

/// The finetuned vector `phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterParams<S>(Vec<S>);

impl<S: Scalar> AdapterParams<S> {
    pub fn new(phi: Vec<S>) -> Result<Self> {
        if !all_finite(&phi) {
            return Err(Error::NonFinite("adapter params"));
        }
        Ok(Self(phi))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![S::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<S> {
        self.0
    }
}

fn check_phi<S: Scalar>(kind: AdapterKind, phi: &[S]) -> Result<()> {
    if phi.len() != kind.dim() {
        return Err(Error::shape("adapter params", kind.dim(), phi.len()));
    }
    Ok(())
}

fn with_bias_block<S: Scalar>(input: &Tensor<S>, phi: &[S]) -> Result<Tensor<S>> {
    let (rows, cols) = (input.rows(), input.cols());
    let mut data = Vec::with_capacity(rows * (cols + phi.len()));
    for i in 0..rows {
        data.extend_from_slice(input.row(i));
        data.extend_from_slice(phi);
    }
    Tensor::matrix(rows, cols + phi.len(), data)
}

/// Forward pass of `theta` modulated by `phi`, keeping the activation record.
pub fn modulated_forward_cached<S: Scalar>(
    theta: &ModelWeights<S>,
    kind: AdapterKind,
    phi: &[S],
    input: &Tensor<S>,
    mode: Mode,
) -> Result<ForwardCache<S>> {
    kind.validate_for(theta)?;
    check_phi(kind, phi)?;
    if input.cols() != kind.data_dim(theta) {
        return Err(Error::shape("adapter input", kind.data_dim(theta), input.cols()));
    }
    match kind {
        AdapterKind::DynamicBias { .. } => theta.forward_cached(&with_bias_block(input, phi)?, mode, None),
        AdapterKind::Film { layer, dim } => {
            let width = dim / 2;
            let scale: Vec<S> = phi[..width].iter().map(|&r| S::one() + r).collect();
            let modulation = Modulation {
                layer,
                scale: &scale,
                shift: &phi[width..],
            };
            theta.forward_cached(input, mode, Some(modulation))
        }
    }
}

pub fn modulated_forward<S: Scalar>(
    theta: &ModelWeights<S>,
    kind: AdapterKind,
    phi: &[S],
    input: &Tensor<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    Ok(modulated_forward_cached(theta, kind, phi, input, mode)?.into_output())
}

/// Gradient with respect to `phi` from an existing forward record.
///
/// Gradients for `theta` are computed by the reverse pass and discarded.
pub fn phi_gradient<S: Scalar>(
    theta: &ModelWeights<S>,
    kind: AdapterKind,
    cache: &ForwardCache<S>,
    upstream: &Tensor<S>,
) -> Result<Vec<S>> {
    let back = theta.backward(cache, upstream, &[])?;
    let grad = match kind {
        AdapterKind::DynamicBias { dim } => {
            let offset = theta.spec().input_dim() - dim;
            back.input.columns(offset, offset + dim).column_sums()
        }
        AdapterKind::Film { .. } => {
            // d/d rho of (1 + rho) h equals d/d scale
            let m = back
                .modulation
                .ok_or(Error::InvalidArgument("film forward record lacks modulation".into()))?;
            m.scale.into_iter().chain(m.shift).collect()
        }
    };
    if !all_finite(&grad) {
        return Err(Error::NonFinite("grad_wrt_phi"));
    }
    Ok(grad)
}

pub fn grad_wrt_phi<S: Scalar>(
    theta: &ModelWeights<S>,
    kind: AdapterKind,
    phi: &[S],
    input: &Tensor<S>,
    upstream: &Tensor<S>,
    mode: Mode,
) -> Result<Vec<S>> {
    let cache = modulated_forward_cached(theta, kind, phi, input, mode)?;
    phi_gradient(theta, kind, &cache, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta(input: usize, seed: u64) -> ModelWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec::new(vec![input, 5, 4, 1], Activation::LeakyRelu(0.1)).with_batchnorm(true);
        ModelWeights::init(spec, &mut rng).unwrap()
    }

    fn batch(rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|i| ((i * 7 + 3) as f64 * 0.61).cos()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn film_zero_is_identity() {
        let th = theta(3, 1);
        let x = batch(4, 3);
        let kind = AdapterKind::Film { layer: 1, dim: 8 };
        let y = modulated_forward(&th, kind, &[0.0; 8], &x, Mode::Eval).unwrap();
        assert_eq!(y, th.forward(&x, Mode::Eval).unwrap());
    }

    #[test]
    fn dynamic_bias_zero_matches_zero_padding() {
        let th = theta(5, 2);
        let x = batch(3, 3);
        let kind = AdapterKind::DynamicBias { dim: 2 };
        let y = modulated_forward(&th, kind, &[0.0; 2], &x, Mode::Eval).unwrap();
        let padded = with_bias_block(&x, &[0.0, 0.0]).unwrap();
        assert_eq!(y, th.forward(&padded, Mode::Eval).unwrap());
    }

    #[test]
    fn film_full_suppression_outputs_shift() {
        // rho = -1 zeroes the scale, so the modulated layer emits b for every row
        let th = theta(3, 3);
        let x = batch(3, 3);
        let kind = AdapterKind::Film { layer: 0, dim: 10 };
        let mut phi = vec![-1.0; 5];
        phi.extend([0.1, -0.2, 0.3, 0.0, 2.0]);
        let cache = modulated_forward_cached(&th, kind, &phi, &x, Mode::Eval).unwrap();
        for i in 0..3 {
            assert_eq!(cache.hidden_output(0).row(i), &phi[5..]);
        }
    }

    #[test]
    fn film_shift_gradient_is_summed_upstream() {
        // Modulate the last hidden layer of a net whose output layer is
        // y = v·h' + c. Then dy/db_j = v_j per row, summed over rows.
        let th = theta(3, 4);
        let x = batch(6, 3);
        let kind = AdapterKind::Film { layer: 1, dim: 8 };
        let phi = [0.05, -0.1, 0.2, 0.0, 0.3, -0.3, 0.1, 0.0];
        let up = Tensor::matrix(6, 1, vec![1.0, 2.0, -1.0, 0.5, 0.0, 1.5]).unwrap();
        let g = grad_wrt_phi(&th, kind, &phi, &x, &up, Mode::Eval).unwrap();
        let v = th.layer(2).weight.row(0);
        let total: f64 = up.data().iter().sum();
        for j in 0..4 {
            assert!((g[4 + j] - total * v[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let th = theta(5, 5);
        let x = batch(2, 3);
        let kind = AdapterKind::DynamicBias { dim: 2 };
        let up = Tensor::zeros(&[2, 1]);
        let g = grad_wrt_phi(&th, kind, &[0.3, -0.7], &x, &up, Mode::Eval).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_errors() {
        let th = theta(5, 6);
        let x = batch(2, 3);
        let kind = AdapterKind::DynamicBias { dim: 2 };
        assert!(modulated_forward(&th, kind, &[0.0; 3], &x, Mode::Eval).is_err());
        assert!(modulated_forward(&th, kind, &[0.0; 2], &batch(2, 4), Mode::Eval).is_err());
        let film = AdapterKind::Film { layer: 0, dim: 9 };
        assert!(film.validate_for(&th).is_err());
        assert!(AdapterParams::new(vec![f64::NAN]).is_err());
    }
}
