use candle_core::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingVector;
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};

use super::StyleStatistics;

/// Bias of the std head at init, `softplus^-1(1)`, so a fresh network predicts unit spread.
const SIGMA_BIAS_INIT: f32 = 0.541_324_9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub hidden: Vec<usize>,
    /// L2-normalize embeddings before the first layer.
    pub normalize_input: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512, 512],
            normalize_input: false,
        }
    }
}

/// MLP from a joint embedding to style statistics: ReLU hidden layers, a linear mean head and
/// a softplus std head.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    config: MappingConfig,
    input_dim: usize,
    channels: usize,
    params: ParamStore,
}

impl MappingNetwork {
    pub fn new(config: MappingConfig, input_dim: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || channels == 0 || config.hidden.contains(&0) {
            return Err(Error::Config("mapping network widths must be positive".into()));
        }
        let mut params = ParamStore::default();
        let mut fan_in = input_dim;
        for (i, &h) in config.hidden.iter().enumerate() {
            let bound = 1.0 / (fan_in as f32).sqrt();
            params.insert(format!("hidden{i}.weight"), nn::uniform_tensor(rng, &[h, fan_in], bound)?)?;
            params.insert(format!("hidden{i}.bias"), nn::uniform_tensor(rng, &[h], bound)?)?;
            fan_in = h;
        }
        let bound = 1.0 / (fan_in as f32).sqrt();
        params.insert("mean.weight", nn::uniform_tensor(rng, &[channels, fan_in], bound)?)?;
        params.insert("mean.bias", nn::uniform_tensor(rng, &[channels], bound)?)?;
        params.insert("std.weight", nn::uniform_tensor(rng, &[channels, fan_in], bound)?)?;
        params.insert(
            "std.bias",
            Tensor::full(SIGMA_BIAS_INIT, channels, &candle_core::Device::Cpu)?,
        )?;
        Ok(Self {
            config,
            input_dim,
            channels,
            params,
        })
    }

    pub fn config(&self) -> &MappingConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    /// `x: N x D` to `(mean, std)`, each `N x C`.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let mut h = if self.config.normalize_input {
            let norm = x.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
            x.broadcast_div(&norm)?
        } else {
            x.clone()
        };
        for i in 0..self.config.hidden.len() {
            let w = self.params.get(&format!("hidden{i}.weight"));
            let b = self.params.get(&format!("hidden{i}.bias"));
            h = nn::linear(&h, w, b)?.relu()?;
        }
        let mean = nn::linear(&h, self.params.get("mean.weight"), self.params.get("mean.bias"))?;
        let std = nn::softplus(&nn::linear(&h, self.params.get("std.weight"), self.params.get("std.bias"))?)?;
        Ok((mean, std))
    }

    /// Style statistics predicted for one embedding.
    pub fn map(&self, emb: &EmbeddingVector) -> Result<StyleStatistics> {
        if emb.dim() != self.input_dim {
            return Err(Error::Shape(format!(
                "embedding width {} does not match mapping input {}",
                emb.dim(),
                self.input_dim
            )));
        }
        let x = Tensor::from_vec(emb.values.clone(), (1, self.input_dim), &candle_core::Device::Cpu)?;
        let (m, s) = self.forward(&x)?;
        StyleStatistics::new(m.squeeze(0)?.to_vec1()?, s.squeeze(0)?.to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(normalize_input: bool) -> MappingNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = MappingConfig {
            hidden: vec![16, 16],
            normalize_input,
        };
        MappingNetwork::new(config, 8, 5, &mut rng).unwrap()
    }

    #[test]
    fn zero_embedding_gives_valid_stats() {
        for flag in [false, true] {
            let s = net(flag).map(&EmbeddingVector::new(vec![0.0; 8], Modality::Text)).unwrap();
            assert_eq!((s.mean.len(), s.std.len()), (5, 5));
            assert!(s.std.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn deterministic_and_modality_agnostic() {
        let n = net(false);
        let v: Vec<f32> = (0..8).map(|i| (i as f32 * 0.37).sin()).collect();
        let a = n.map(&EmbeddingVector::new(v.clone(), Modality::Image)).unwrap();
        let b = n.map(&EmbeddingVector::new(v, Modality::Text)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        assert!(net(false).map(&EmbeddingVector::new(vec![1.0; 7], Modality::Image)).is_err());
    }

    #[test]
    fn normalized_input_ignores_scale() {
        let n = net(true);
        let v: Vec<f32> = (0..8).map(|i| i as f32 - 3.0).collect();
        let a = n.map(&EmbeddingVector::new(v.clone(), Modality::Image)).unwrap();
        let b = n.map(&EmbeddingVector::new(v.iter().map(|x| x * 7.0).collect(), Modality::Image)).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
