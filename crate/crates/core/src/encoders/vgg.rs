//! Pretrained VGG19 feature stack up to `relu4_1`.
//!
//! Weights are read from a safetensors file using torchvision's key layout
//! (`features.{i}.weight`, `features.{i}.bias`). Inputs in `[0, 1]` are normalized per channel
//! with the ImageNet constants below, then run at their native resolution (no resize).
//! Convolutions use zero padding and pooling is 2x2 max.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

use super::{EncoderHandle, StyleEncoder};

pub const VGG_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const VGG_STD: [f32; 3] = [0.229, 0.224, 0.225];

const LAYERS: [&str; 4] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1"];

/// `(torchvision index, output channels)` of each convolution, with a pool marker before it.
const CONVS: [(usize, usize, bool); 10] = [
    (0, 64, false),
    (2, 64, false),
    (5, 128, true),
    (7, 128, false),
    (10, 256, true),
    (12, 256, false),
    (14, 256, false),
    (16, 256, false),
    (19, 512, true),
    (21, 512, false),
];

/// Convolution positions whose ReLU output is a reported layer.
const TAPS: [usize; 4] = [0, 2, 4, 8];

#[derive(Clone, Debug)]
pub struct Vgg19 {
    name: String,
    convs: Vec<(Tensor, Tensor, bool)>,
}

impl Vgg19 {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Capability(format!("VGG19 weights not found at {}", path.display())));
        }
        let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut convs = Vec::new();
        let mut cin = 3;
        for &(idx, cout, pool) in CONVS.iter().take(TAPS[3] + 1) {
            let get = |suffix: &str, shape: &[usize]| -> Result<Tensor> {
                let key = format!("features.{idx}.{suffix}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::format(path, format!("missing tensor {key}")))?
                    .to_dtype(DType::F32)?;
                if t.dims() != shape {
                    return Err(Error::format(path, format!("{key} has shape {:?}, expected {shape:?}", t.dims())));
                }
                Ok(t)
            };
            convs.push((get("weight", &[cout, cin, 3, 3])?, get("bias", &[cout])?, pool));
            cin = cout;
        }
        Ok(Self {
            name: format!("vgg19({})", path.display()),
            convs,
        })
    }
}

impl StyleEncoder for Vgg19 {
    fn handle(&self) -> EncoderHandle {
        EncoderHandle {
            name: self.name.clone(),
            output_widths: vec![64, 128, 256, 512],
            deterministic: true,
        }
    }

    fn layer_names(&self) -> &[&'static str] {
        &LAYERS
    }

    fn layer_channels(&self) -> Vec<usize> {
        vec![64, 128, 256, 512]
    }

    fn feature_layer(&self) -> usize {
        2
    }

    fn layer_strides(&self) -> Vec<usize> {
        vec![1, 2, 4, 8]
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Vec<Tensor>> {
        let dev = x.device();
        let mean = Tensor::new(&VGG_MEAN, dev)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&VGG_STD, dev)?.reshape((1, 3, 1, 1))?;
        let mut h = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut outs = Vec::with_capacity(4);
        for (i, (w, b, pool)) in self.convs.iter().enumerate() {
            if *pool {
                h = h.max_pool2d(2)?;
            }
            h = h
                .conv2d(w, 1, 1, 1, 1)?
                .broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?
                .relu()?;
            if TAPS.contains(&i) {
                outs.push(h.clone());
            }
        }
        Ok(outs)
    }
}
