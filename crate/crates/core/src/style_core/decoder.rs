use candle_core::{Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, ParamStore};

use super::FeatureImage;

/// Number of 2x upsampling stages; the decoder output is `4x` the feature resolution.
pub const DECODER_STAGES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub widths: [usize; 2],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { widths: [128, 64] }
    }
}

/// `conv(C->w0) relu up2 conv(w0->w1) relu up2 conv(w1->3) sigmoid`, 3x3 replicate-padded
/// convolutions and nearest-neighbor upsampling.
#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    channels: usize,
    params: ParamStore,
}

impl Decoder {
    pub fn new(config: DecoderConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || config.widths.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        let mut params = ParamStore::default();
        let dims = [channels, config.widths[0], config.widths[1], 3];
        for i in 0..3 {
            let (cin, cout) = (dims[i], dims[i + 1]);
            let std = (2.0 / (9 * cin) as f32).sqrt();
            params.insert(format!("conv{i}.weight"), nn::normal_tensor(rng, &[cout, cin, 3, 3], std)?)?;
            params.insert(format!("conv{i}.bias"), Tensor::zeros(cout, candle_core::DType::F32, &Device::Cpu)?)?;
        }
        Ok(Self {
            config,
            channels,
            params,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        1 << DECODER_STAGES
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    /// `N x C x h x w` features to `N x 3 x 4h x 4w` RGB in `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let conv = |h: &Tensor, i: usize| {
            nn::conv3x3_same(
                h,
                self.params.get(&format!("conv{i}.weight")),
                Some(self.params.get(&format!("conv{i}.bias"))),
            )
        };
        let mut h = conv(x, 0)?.relu()?;
        let (_, _, hh, ww) = h.dims4()?;
        h = h.upsample_nearest2d(hh * 2, ww * 2)?;
        h = conv(&h, 1)?.relu()?;
        let (_, _, hh, ww) = h.dims4()?;
        h = h.upsample_nearest2d(hh * 2, ww * 2)?;
        nn::sigmoid(&conv(&h, 2)?)
    }

    pub fn decode(&self, features: &FeatureImage) -> Result<Image> {
        if features.channels != self.channels {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {}",
                self.channels, features.channels
            )));
        }
        let (x, _) = features.tensors()?;
        let y = self.forward(&x)?;
        let (_, _, h, w) = y.dims4()?;
        Image::from_planar(w, h, &y.flatten_all()?.to_vec1::<f32>()?)
    }
}
