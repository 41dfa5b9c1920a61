//! Self-describing JSON checkpoints for [`ModelWeights`].
//!
//! Values are widened to `f64` on disk and parsed with exact round-trip
//! float parsing, so `load(save(w)) == w` bit for bit for `f32` and `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{MlpSpec, ModelWeights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "metricopt-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    scalar: String,
    spec: MlpSpec,
    params: Vec<f64>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
}

impl<S: Scalar> ModelWeights<S> {
    pub fn to_checkpoint_string(&self) -> Result<String> {
        let stats = self.running_stats();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: S::type_name().into(),
            spec: self.spec().clone(),
            params: self.params().into_iter().map(Scalar::as_f64).collect(),
            running_mean: stats
                .iter()
                .map(|(m, _)| m.iter().map(|x| x.as_f64()).collect())
                .collect(),
            running_var: stats
                .iter()
                .map(|(_, v)| v.iter().map(|x| x.as_f64()).collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        if file.scalar != S::type_name() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, requested {}",
                file.scalar,
                S::type_name()
            )));
        }
        let mut w = ModelWeights::<S>::zeros(file.spec)?;
        let params: Vec<S> = file.params.into_iter().map(S::lit).collect();
        w.set_params(&params)?;
        let normalized: Vec<usize> = (0..w.spec().hidden_layers())
            .filter(|&l| w.spec().batchnorm[l])
            .collect();
        if normalized.len() != file.running_mean.len() || normalized.len() != file.running_var.len() {
            return Err(Error::Checkpoint("running statistics count mismatch".into()));
        }
        for ((l, mean), var) in normalized.into_iter().zip(file.running_mean).zip(file.running_var) {
            let bn = w.norm_mut(l).expect("normalized layer");
            if mean.len() != bn.running_mean.len() || var.len() != bn.running_var.len() {
                return Err(Error::Checkpoint(format!("running statistics width at layer {l}")));
            }
            if var.iter().any(|&v| v < 0.0) {
                return Err(Error::Checkpoint(format!("negative running variance at layer {l}")));
            }
            bn.running_mean = mean.into_iter().map(S::lit).collect();
            bn.running_var = var.into_iter().map(S::lit).collect();
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mode, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained_like(seed: u64) -> ModelWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec::new(vec![4, 6, 3, 1], Activation::LeakyRelu(0.01)).with_batchnorm(true);
        let mut w = ModelWeights::init(spec, &mut rng).unwrap();
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let cache = w.forward_cached(&x, Mode::Train, None).unwrap();
        w.update_running_stats(&cache);
        w
    }

    proptest! {
        #[test]
        fn save_load_is_bit_exact(seed in any::<u64>()) {
            let w = trained_like(seed);
            let back = ModelWeights::<f64>::from_checkpoint_str(&w.to_checkpoint_string().unwrap()).unwrap();
            prop_assert_eq!(back.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            w.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, w);
        }
    }

    #[test]
    fn f32_round_trip_and_type_tag() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ModelWeights::<f32>::init(MlpSpec::new(vec![3, 2, 1], Activation::Relu), &mut rng).unwrap();
        let text = w.to_checkpoint_string().unwrap();
        assert_eq!(ModelWeights::<f32>::from_checkpoint_str(&text).unwrap(), w);
        assert!(ModelWeights::<f64>::from_checkpoint_str(&text).is_err());
    }

    #[test]
    fn missing_file() {
        let err = ModelWeights::<f64>::load("/nonexistent/vf.json").unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
