//! Deterministic stand-ins for the pretrained encoders.
//!
//! The joint image encoder embeds an image as the mean of per-pixel radial color features plus
//! mean absolute responses of bias-free luminance filters, both pushed through fixed random
//! projections. Distant colors land on nearly orthogonal directions, so windows dominated by
//! one object embed close to that object's crops.
//!
//! The text encoder is a vocabulary lookup into image-encoder outputs plus a small fixed noise
//! vector; unknown prompts get a seeded random vector.
//!
//! The style extractor is a VGG-shaped stack of bias-free 3x3 convolutions (replicate padding),
//! ReLU and 2x2 average pooling. Every stage is positively homogeneous, so scaling the input by
//! `a > 0` scales every feature, and hence every channel mean and std, by `a`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn;

use super::{EmbeddingVector, EncoderHandle, ImageEncoder, Modality, StyleEncoder, TextEncoder, VocabEntry};

const COLOR_ANCHORS: usize = 48;
const COLOR_BANDWIDTH: f32 = 0.2;
const TEXTURE_FILTERS: usize = 8;
const TEXTURE_GAIN: f32 = 0.5;
const CAPTION_NOISE: f32 = 0.05;

pub const TOY_STYLE_LAYERS: [&str; 4] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1"];

fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn gaussian_vec(seed: u64, n: usize, std: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f32, std).expect("positive std");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

fn l2(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    seed: u64,
    dim: usize,
    anchors: Vec<[f32; 3]>,
    color_proj: Vec<f32>,
    filters: Vec<[f32; 9]>,
    texture_proj: Vec<f32>,
}

impl ToyImageEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "anchors"));
        let unit = Uniform::new(0.0f32, 1.0).expect("valid range");
        let anchors = (0..COLOR_ANCHORS)
            .map(|_| [unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)])
            .collect();
        let std = 1.0 / (dim as f32).sqrt();
        let color_proj = gaussian_vec(sub_seed(seed, "color_proj"), COLOR_ANCHORS * dim, std);
        let raw = gaussian_vec(sub_seed(seed, "filters"), TEXTURE_FILTERS * 9, 1.0);
        let filters = raw
            .chunks_exact(9)
            .map(|c| {
                let mean = c.iter().sum::<f32>() / 9.0;
                let mut f = [0.0; 9];
                for (o, v) in f.iter_mut().zip(c) {
                    *o = v - mean;
                }
                f
            })
            .collect();
        let texture_proj = gaussian_vec(sub_seed(seed, "texture_proj"), TEXTURE_FILTERS * dim, std);
        Self {
            seed,
            dim,
            anchors,
            color_proj,
            filters,
            texture_proj,
        }
    }

    fn embed(&self, image: &Image) -> Vec<f32> {
        let (w, h) = (image.width(), image.height());
        let mut color = [0.0f64; COLOR_ANCHORS];
        let inv_2h2 = 1.0 / (2.0 * COLOR_BANDWIDTH * COLOR_BANDWIDTH);
        for px in image.data().chunks_exact(3) {
            for (k, a) in self.anchors.iter().enumerate() {
                let d2 = (px[0] - a[0]).powi(2) + (px[1] - a[1]).powi(2) + (px[2] - a[2]).powi(2);
                color[k] += (-d2 * inv_2h2).exp() as f64;
            }
        }
        let n = (w * h) as f64;
        let mut texture = [0.0f64; TEXTURE_FILTERS];
        if w >= 3 && h >= 3 {
            let lum: Vec<f32> = image.data().chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
            let count = ((w - 2) * (h - 2)) as f64;
            for (t, f) in self.filters.iter().enumerate() {
                let mut acc = 0.0f64;
                for y in 1..h - 1 {
                    for x in 1..w - 1 {
                        let mut r = 0.0f32;
                        for dy in 0..3 {
                            for dx in 0..3 {
                                r += f[dy * 3 + dx] * lum[(y + dy - 1) * w + x + dx - 1];
                            }
                        }
                        acc += r.abs() as f64;
                    }
                }
                texture[t] = acc / count;
            }
        }
        let mut out = vec![0.0f32; self.dim];
        for k in 0..COLOR_ANCHORS {
            let c = (color[k] / n) as f32;
            if c == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(&self.color_proj[k * self.dim..(k + 1) * self.dim]) {
                *o += c * p;
            }
        }
        for t in 0..TEXTURE_FILTERS {
            let c = texture[t] as f32 * TEXTURE_GAIN;
            for (o, p) in out.iter_mut().zip(&self.texture_proj[t * self.dim..(t + 1) * self.dim]) {
                *o += c * p;
            }
        }
        out
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn handle(&self) -> EncoderHandle {
        EncoderHandle {
            name: format!("toy-joint-image(seed={},dim={})", self.seed, self.dim),
            output_widths: vec![self.dim],
            deterministic: true,
        }
    }

    fn width(&self) -> usize {
        self.dim
    }

    fn encode_image(&self, image: &Image) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector::new(self.embed(image), Modality::Image))
    }
}

#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    seed: u64,
    dim: usize,
    table: BTreeMap<String, Vec<f32>>,
}

pub fn normalize_caption(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl ToyTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            table: BTreeMap::new(),
        }
    }

    /// Pairs `caption` with a precomputed image embedding.
    pub fn register(&mut self, caption: &str, embedding: Vec<f32>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "vocabulary embedding has width {}, encoder width is {}",
                embedding.len(),
                self.dim
            )));
        }
        let key = normalize_caption(caption);
        if key.is_empty() {
            return Err(Error::Config("empty caption".into()));
        }
        self.table.insert(key, embedding);
        Ok(())
    }

    pub fn vocabulary(&self) -> Vec<VocabEntry> {
        self.table
            .iter()
            .map(|(caption, embedding)| VocabEntry {
                caption: caption.clone(),
                embedding: embedding.clone(),
            })
            .collect()
    }

    fn typical_norm(&self) -> f32 {
        if self.table.is_empty() {
            1.0
        } else {
            self.table.values().map(|v| l2(v)).sum::<f32>() / self.table.len() as f32
        }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn handle(&self) -> EncoderHandle {
        EncoderHandle {
            name: format!("toy-joint-text(seed={},dim={})", self.seed, self.dim),
            output_widths: vec![self.dim],
            deterministic: true,
        }
    }

    fn width(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector> {
        let key = normalize_caption(text);
        if key.is_empty() {
            return Err(Error::Config("text prompt is empty".into()));
        }
        let noise_seed = sub_seed(self.seed, &format!("caption:{key}"));
        let values = match self.table.get(&key) {
            Some(base) => {
                let noise = gaussian_vec(noise_seed, self.dim, 1.0);
                let scale = CAPTION_NOISE * l2(base) / l2(&noise).max(1e-12);
                base.iter().zip(&noise).map(|(b, n)| b + scale * n).collect()
            }
            None => {
                let v = gaussian_vec(noise_seed, self.dim, 1.0);
                let scale = self.typical_norm() / l2(&v).max(1e-12);
                v.into_iter().map(|x| x * scale).collect()
            }
        };
        Ok(EmbeddingVector::new(values, Modality::Text))
    }
}

/// VGG-shaped random convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct ToyVgg {
    seed: u64,
    widths: [usize; 4],
    kernels: Vec<Tensor>,
}

impl ToyVgg {
    pub fn new(seed: u64, widths: [usize; 4]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "toy-vgg"));
        let mut kernels = Vec::with_capacity(4);
        let mut cin = 3;
        for &cout in &widths {
            if cout == 0 {
                return Err(Error::Config("toy VGG widths must be positive".into()));
            }
            let std = (2.0 / (9 * cin) as f32).sqrt();
            kernels.push(nn::normal_tensor(&mut rng, &[cout, cin, 3, 3], std)?);
            cin = cout;
        }
        Ok(Self { seed, widths, kernels })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    /// The same network with kernels cast to `dtype`, for double-precision gradient checks.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            seed: self.seed,
            widths: self.widths,
            kernels: self.kernels.iter().map(|k| k.to_dtype(dtype)).collect::<candle_core::Result<_>>()?,
        })
    }
}

impl StyleEncoder for ToyVgg {
    fn handle(&self) -> EncoderHandle {
        EncoderHandle {
            name: format!("toy-vgg(seed={},widths={:?})", self.seed, self.widths),
            output_widths: self.widths.to_vec(),
            deterministic: true,
        }
    }

    fn layer_names(&self) -> &[&'static str] {
        &TOY_STYLE_LAYERS
    }

    fn layer_channels(&self) -> Vec<usize> {
        self.widths.to_vec()
    }

    fn feature_layer(&self) -> usize {
        2
    }

    fn layer_strides(&self) -> Vec<usize> {
        vec![1, 2, 4, 8]
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(4);
        let mut h = x.clone();
        for (i, k) in self.kernels.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2d(2)?;
            }
            h = nn::conv3x3_same(&h, k, None)?.relu()?;
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

/// Solid-ish color swatches with captions, the default paired vocabulary.
pub fn toy_fixture_pairs() -> Vec<(String, Image)> {
    let colors: [(&str, [f32; 3]); 6] = [
        ("red", [0.85, 0.1, 0.1]),
        ("green", [0.1, 0.75, 0.15]),
        ("blue", [0.1, 0.2, 0.9]),
        ("yellow", [0.95, 0.9, 0.1]),
        ("purple", [0.55, 0.1, 0.7]),
        ("white", [0.97, 0.97, 0.97]),
    ];
    colors
        .iter()
        .map(|(name, c)| {
            let img = Image::from_fn(16, 16, |x, y| {
                let s = 0.95 + 0.05 * ((x + y) as f32 / 30.0);
                [c[0] * s, c[1] * s, c[2] * s]
            });
            (name.to_string(), img)
        })
        .collect()
}

/// Builds the toy joint image/text encoders and the toy style extractor. The text encoder
/// knows the captions of [`toy_fixture_pairs`].
pub fn make_toy_encoders(
    seed: u64,
    joint_dim: usize,
    style_widths: [usize; 4],
) -> Result<(ToyImageEncoder, ToyTextEncoder, ToyVgg)> {
    let image = ToyImageEncoder::new(seed, joint_dim);
    let mut text = ToyTextEncoder::new(seed, joint_dim);
    for (caption, img) in toy_fixture_pairs() {
        text.register(&caption, image.embed(&img))?;
    }
    let style = ToyVgg::new(seed, style_widths)?;
    Ok((image, text, style))
}

/// Planar `1 x 3 x H x W` tensor of an image.
pub(crate) fn image_tensor(image: &Image) -> Result<Tensor> {
    Ok(Tensor::from_vec(image.to_planar(), (1, 3, image.height(), image.width()), &Device::Cpu)?)
}
