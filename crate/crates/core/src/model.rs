//! MLP feature encoder `h` followed by a linear classifier `φ`.
//!
//! Flat parameter layout (frozen, shared by every client and the server):
//! encoder layers first to last, then the classifier; within a layer the
//! `fan_in × fan_out` weight matrix in row-major order, then the bias.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::tensor::{sgd_step, GradTape, Gradients, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input width {got} does not match expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("flat parameter vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_feature_dim() -> usize {
    32
}

fn default_classes() -> usize {
    10
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, feature_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims,
            feature_dim,
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidConfig("layer widths must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(ModelError::InvalidConfig("feature_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, classifier last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.feature_dim);
        let mut shapes: Vec<_> = widths.windows(2).map(|w| (w[0], w[1])).collect();
        shapes.push((self.feature_dim, self.num_classes));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offset of each layer's bias block in the flat vector.
    pub fn bias_offsets(&self) -> Vec<usize> {
        let mut offset = 0;
        self.layer_shapes()
            .iter()
            .map(|(i, o)| {
                let at = offset + i * o;
                offset += i * o + o;
                at
            })
            .collect()
    }
}

/// Affine layer `x·W + b` with `W: fan_in × fan_out` and `b: 1 × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let ones = Tensor::full(vec![x.rows(), 1], 1.0)?;
        x.matmul(&self.weight)?.add(&ones.matmul(&self.bias)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    encoder: Vec<Linear>,
    classifier: Linear,
}

impl Model {
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, &[0x4d4f_4445]);
        let mut layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (1.0 / fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
                Ok(Linear {
                    weight: Tensor::matrix(fan_in, fan_out, w)?,
                    bias: Tensor::zeros(vec![1, fan_out])?,
                })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        let classifier = layers.pop().expect("classifier layer");
        Ok(Self {
            config: config.clone(),
            encoder: layers,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &[Linear] {
        &self.encoder
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.encoder.iter().chain(std::iter::once(&self.classifier))
    }

    /// Parameter tensors in flat-layout order.
    pub fn params(&self) -> Vec<Tensor> {
        self.layers()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    fn from_params(config: &ModelConfig, params: Vec<Tensor>) -> Self {
        let mut layers: Vec<Linear> = params
            .chunks(2)
            .map(|p| Linear {
                weight: p[0].clone(),
                bias: p[1].clone(),
            })
            .collect();
        let classifier = layers.pop().expect("classifier layer");
        Self {
            config: config.clone(),
            encoder: layers,
            classifier,
        }
    }

    /// Copy of the model whose parameters are leaves of `tape`.
    pub fn bind(&self, tape: &GradTape) -> Result<Self, ModelError> {
        let params = self
            .params()
            .iter()
            .map(|p| tape.param(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_params(&self.config, params))
    }

    /// One SGD step using gradients taken w.r.t. a model produced by [`Model::bind`].
    pub fn sgd(&self, grads: &Gradients, eta: f64) -> Result<Self, ModelError> {
        let updated = sgd_step(&self.params(), grads, eta)?;
        Ok(Self::from_params(&self.config, updated))
    }

    /// Feature encoder `z = h(x)`: ReLU after each hidden layer, linear output.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        if batch.shape().len() != 2 || batch.cols() != self.config.input_dim {
            return Err(ModelError::ShapeMismatch {
                expected: self.config.input_dim,
                got: batch.cols(),
            });
        }
        let last = self.encoder.len() - 1;
        let mut h = batch.clone();
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Classifier logits `φ(z)`.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        if features.shape().len() != 2 || features.cols() != self.config.feature_dim {
            return Err(ModelError::ShapeMismatch {
                expected: self.config.feature_dim,
                got: features.cols(),
            });
        }
        Ok(self.classifier.forward(features)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.config.parameter_count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.parameter_count());
        for l in self.layers() {
            flat.extend_from_slice(l.weight.data());
            flat.extend_from_slice(l.bias.data());
        }
        flat
    }

    pub fn unflatten(config: &ModelConfig, flat: &[f64]) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = config.parameter_count();
        if flat.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = &flat[offset..offset + n];
            offset += n;
            s.to_vec()
        };
        let mut params = Vec::new();
        for (fan_in, fan_out) in config.layer_shapes() {
            params.push(Tensor::matrix(fan_in, fan_out, take(fan_in * fan_out))?);
            params.push(Tensor::matrix(1, fan_out, take(fan_out))?);
        }
        Ok(Self::from_params(config, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig::new(4, vec![8], 3, 2, 11)
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    // x·W + b written out with explicit loops, independent of Tensor ops.
    fn naive_affine(x: &[f64], rows: usize, w: &Tensor, b: &Tensor, relu: bool) -> Vec<f64> {
        let (fi, fo) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; rows * fo];
        for r in 0..rows {
            for j in 0..fo {
                let mut acc = b.data()[j];
                for i in 0..fi {
                    acc += x[r * fi + i] * w.data()[i * fo + j];
                }
                out[r * fo + j] = if relu { acc.max(0.0) } else { acc };
            }
        }
        out
    }

    #[test]
    fn parameter_count_by_hand() {
        assert_eq!(small().parameter_count(), 4 * 8 + 8 + 8 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(small().parameter_count(), 75);
        let m = Model::init(&small()).unwrap();
        assert_eq!(m.flatten().len(), 75);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = Model::init(&small()).unwrap();
        let b = Model::init(&small()).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        for l in a.layers() {
            assert!(l.bias.data().iter().all(|v| *v == 0.0));
            let bound = (1.0 / l.weight.shape()[0] as f64).sqrt();
            assert!(l.weight.data().iter().all(|v| v.abs() <= bound));
        }
        let mut other = small();
        other.seed = 12;
        assert_ne!(Model::init(&other).unwrap().flatten(), a.flatten());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            ModelConfig::new(0, vec![8], 3, 2, 0),
            ModelConfig::new(4, vec![0], 3, 2, 0),
            ModelConfig::new(4, vec![8], 0, 2, 0),
            ModelConfig::new(4, vec![8], 3, 1, 0),
        ] {
            assert!(matches!(Model::init(&cfg), Err(ModelError::InvalidConfig(_))));
        }
    }

    #[test]
    fn bias_offsets_hold_zeros() {
        let cfg = small();
        let flat = Model::init(&cfg).unwrap().flatten();
        // 4*8 = 32; 40 + 8*3 = 64; 67 + 3*2 = 73
        assert_eq!(cfg.bias_offsets(), vec![32, 64, 73]);
        for (&at, (_, width)) in cfg.bias_offsets().iter().zip(cfg.layer_shapes()) {
            assert!(flat[at..at + width].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn flatten_roundtrip_and_locality() {
        let m = Model::init(&small()).unwrap();
        let flat = m.flatten();
        let back = Model::unflatten(&small(), &flat).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.flatten(), flat);
        let mut tweaked = flat.clone();
        tweaked[5] += 1.0;
        let other = Model::unflatten(&small(), &tweaked).unwrap().flatten();
        assert_eq!(flat.iter().zip(&other).filter(|(a, b)| a != b).count(), 1);
        assert_eq!(
            Model::unflatten(&small(), &flat[1..]).unwrap_err(),
            ModelError::LengthMismatch { expected: 75, got: 74 }
        );
    }

    #[test]
    fn zero_weights_give_bias_pattern() {
        let cfg = ModelConfig::new(4, vec![], 3, 2, 0);
        let mut flat = vec![0.0; cfg.parameter_count()];
        let offsets = cfg.bias_offsets();
        flat[offsets[0]..offsets[0] + 3].copy_from_slice(&[1.0, -2.0, 0.5]);
        flat[offsets[1]..offsets[1] + 2].copy_from_slice(&[0.25, 4.0]);
        let m = Model::unflatten(&cfg, &flat).unwrap();
        let z = m.encode(&random_batch(2, 4, 1)).unwrap();
        assert_eq!(z.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
        let logits = m.classify(&z).unwrap();
        assert_eq!(logits.data(), &[0.25, 4.0, 0.25, 4.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let m = Model::init(&ModelConfig::new(5, vec![7, 6], 4, 3, 3)).unwrap();
        let x = random_batch(6, 5, 2);
        let enc = m.encoder();
        let mut h = x.data().to_vec();
        for (i, l) in enc.iter().enumerate() {
            h = naive_affine(&h, 6, &l.weight, &l.bias, i + 1 < enc.len());
        }
        let z = m.encode(&x).unwrap();
        assert!(z.data().iter().zip(&h).all(|(a, b)| (a - b).abs() < 1e-12));
        let logits_naive = naive_affine(&h, 6, &m.classifier().weight, &m.classifier().bias, false);
        let logits = m.classify(&z).unwrap();
        assert!(logits.data().iter().zip(&logits_naive).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn rows_are_independent() {
        let m = Model::init(&small()).unwrap();
        let x = random_batch(5, 4, 9);
        let z = m.encode(&x).unwrap();
        let single = Tensor::matrix(1, 4, x.row(3).to_vec()).unwrap();
        assert_eq!(m.encode(&single).unwrap().data(), z.row(3));
        let logits = m.classify(&z).unwrap();
        let one = m.classify(&Tensor::matrix(1, 3, z.row(2).to_vec()).unwrap()).unwrap();
        assert_eq!(one.data(), logits.row(2));
    }

    #[test]
    fn width_errors() {
        let m = Model::init(&small()).unwrap();
        assert!(matches!(m.encode(&random_batch(2, 5, 0)), Err(ModelError::ShapeMismatch { .. })));
        assert!(matches!(m.classify(&random_batch(2, 4, 0)), Err(ModelError::ShapeMismatch { .. })));
    }
}
