//! Encoder interfaces: a joint image/text embedding space and a convolutional style feature
//! extractor, with deterministic toy implementations and a pretrained VGG19 backend.

mod toy;
mod vgg;

use std::path::PathBuf;
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use toy::{
    make_toy_encoders, normalize_caption, toy_fixture_pairs, ToyImageEncoder, ToyTextEncoder, ToyVgg,
    TOY_STYLE_LAYERS,
};
pub use vgg::{Vgg19, VGG_MEAN, VGG_STD};

pub const CLIP_WEIGHTS_ENV: &str = "CONRF_CLIP_WEIGHTS";
pub const VGG_WEIGHTS_ENV: &str = "CONRF_VGG_WEIGHTS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

/// A vector in the joint image/text space. Not normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub modality: Modality,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>, modality: Modality) -> Self {
        Self { values, modality }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Unit-length copy; the zero vector stays zero.
    pub fn normalized(&self) -> Vec<f32> {
        normalize(&self.values)
    }
}

pub fn normalize(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (*x as f64 / n) as f32).collect()
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0) as f32
}

/// A `C x H x W` feature map taken from one layer of a style extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleFeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub layer: String,
}

impl StyleFeatureMap {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderHandle {
    pub name: String,
    pub output_widths: Vec<usize>,
    pub deterministic: bool,
}

pub trait ImageEncoder: Send + Sync {
    fn handle(&self) -> EncoderHandle;
    fn width(&self) -> usize;
    fn encode_image(&self, image: &Image) -> Result<EmbeddingVector>;
}

pub trait TextEncoder: Send + Sync {
    fn handle(&self) -> EncoderHandle;
    fn width(&self) -> usize;
    /// Fails on an empty (or all-whitespace) prompt.
    fn encode_text(&self, text: &str) -> Result<EmbeddingVector>;
}

/// A differentiable convolutional feature extractor.
pub trait StyleEncoder: Send + Sync {
    fn handle(&self) -> EncoderHandle;
    fn layer_names(&self) -> &[&'static str];
    fn layer_channels(&self) -> Vec<usize>;
    /// Index of the layer whose features the field distills and the transfer operates on.
    fn feature_layer(&self) -> usize;
    /// Downsampling factor of each layer relative to the input.
    fn layer_strides(&self) -> Vec<usize>;
    /// Features of every layer for an `N x 3 x H x W` batch of RGB values in `[0, 1]`.
    /// Any preprocessing happens inside.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Vec<Tensor>>;

    fn feature_channels(&self) -> usize {
        self.layer_channels()[self.feature_layer()]
    }

    fn feature_stride(&self) -> usize {
        self.layer_strides()[self.feature_layer()]
    }

    fn extract(&self, image: &Image) -> Result<StyleFeatureMap> {
        let x = toy::image_tensor(image)?;
        let outs = self.forward(&x)?;
        let layer = self.feature_layer();
        let f = &outs[layer];
        let (_, c, h, w) = f.dims4()?;
        Ok(StyleFeatureMap {
            channels: c,
            height: h,
            width: w,
            values: f.flatten_all()?.to_vec1()?,
            layer: self.layer_names()[layer].to_string(),
        })
    }
}

impl<T: StyleEncoder + ?Sized> StyleEncoder for Arc<T> {
    fn handle(&self) -> EncoderHandle {
        (**self).handle()
    }
    fn layer_names(&self) -> &[&'static str] {
        (**self).layer_names()
    }
    fn layer_channels(&self) -> Vec<usize> {
        (**self).layer_channels()
    }
    fn feature_layer(&self) -> usize {
        (**self).feature_layer()
    }
    fn layer_strides(&self) -> Vec<usize> {
        (**self).layer_strides()
    }
    fn forward(&self, x: &Tensor) -> candle_core::Result<Vec<Tensor>> {
        (**self).forward(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub caption: String,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub seed: u64,
    pub joint_dim: usize,
    pub style_widths: [usize; 4],
    /// Extra captions registered on top of the built-in fixture vocabulary.
    #[serde(default)]
    pub vocabulary: Vec<VocabEntry>,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: 0,
            joint_dim: 64,
            style_widths: [16, 32, 32, 64],
            vocabulary: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainedSpec {
    /// Falls back to `CONRF_CLIP_WEIGHTS`.
    #[serde(default)]
    pub clip_weights: Option<PathBuf>,
    /// Falls back to `CONRF_VGG_WEIGHTS`.
    #[serde(default)]
    pub vgg_weights: Option<PathBuf>,
}

/// Serializable recipe for an [`EncoderSet`], stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Toy(ToySpec),
    Pretrained(PretrainedSpec),
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Toy(ToySpec::default())
    }
}

#[derive(Clone)]
pub struct EncoderSet {
    pub spec: EncoderSpec,
    pub image: Arc<dyn ImageEncoder>,
    pub text: Arc<dyn TextEncoder>,
    pub style: Arc<dyn StyleEncoder>,
}

impl std::fmt::Debug for EncoderSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderSet")
            .field("image", &self.image.handle().name)
            .field("text", &self.text.handle().name)
            .field("style", &self.style.handle().name)
            .finish()
    }
}

fn weights_path(explicit: &Option<PathBuf>, env: &str, what: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    match std::env::var_os(env) {
        Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
        _ => Err(Error::Capability(format!("{what} weights not configured (set {env})"))),
    }
}

impl EncoderSet {
    pub fn toy(spec: ToySpec) -> Result<Self> {
        let (image, mut text, style) = make_toy_encoders(spec.seed, spec.joint_dim, spec.style_widths)?;
        for entry in &spec.vocabulary {
            text.register(&entry.caption, entry.embedding.clone())?;
        }
        Ok(Self {
            spec: EncoderSpec::Toy(spec),
            image: Arc::new(image),
            text: Arc::new(text),
            style: Arc::new(style),
        })
    }

    pub fn build(spec: &EncoderSpec) -> Result<Self> {
        match spec {
            EncoderSpec::Toy(t) => Self::toy(t.clone()),
            EncoderSpec::Pretrained(p) => {
                let vgg_path = weights_path(&p.vgg_weights, VGG_WEIGHTS_ENV, "VGG19")?;
                let clip_path = weights_path(&p.clip_weights, CLIP_WEIGHTS_ENV, "CLIP")?;
                let _style = Vgg19::load(&vgg_path)?;
                Err(Error::Capability(format!(
                    "CLIP weights at {} cannot be used: this build has no CLIP backend",
                    clip_path.display()
                )))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoders(seed: u64) -> (ToyImageEncoder, ToyTextEncoder, ToyVgg) {
        make_toy_encoders(seed, 64, [8, 16, 16, 32]).unwrap()
    }

    #[test]
    fn paired_fixtures_align_and_unpaired_do_not() {
        let (img, txt, _) = encoders(3);
        let pairs = toy_fixture_pairs();
        for (i, (_, image)) in pairs.iter().enumerate() {
            let e = img.encode_image(image).unwrap();
            for (j, (caption, _)) in pairs.iter().enumerate() {
                let t = txt.encode_text(caption).unwrap();
                let c = cosine(&e.values, &t.values);
                if i == j {
                    assert!(c > 0.9, "pair {caption}: {c}");
                } else {
                    assert!(c < 0.5, "{i} vs {caption}: {c}");
                }
            }
        }
    }

    #[test]
    fn encoders_are_deterministic_and_seeded() {
        let (a_img, a_txt, a_vgg) = encoders(1);
        let (b_img, b_txt, _) = encoders(2);
        let zeros = Image::filled(12, 12, [0.0; 3]);
        let x = a_img.encode_image(&zeros).unwrap();
        assert_eq!(x, a_img.encode_image(&zeros).unwrap());
        assert_eq!(x.modality, Modality::Image);
        assert_ne!(x.values, b_img.encode_image(&zeros).unwrap().values);
        let t = a_txt.encode_text("starry night").unwrap();
        assert_eq!(t, a_txt.encode_text("starry night").unwrap());
        assert_ne!(t.values, b_txt.encode_text("starry night").unwrap().values);
        let photo = Image::from_fn(16, 16, |x, y| [x as f32 / 16.0, y as f32 / 16.0, 0.3]);
        assert_eq!(a_vgg.extract(&photo).unwrap(), a_vgg.extract(&photo).unwrap());
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let (_, txt, _) = encoders(0);
        assert!(matches!(txt.encode_text("   "), Err(Error::Config(_))));
    }

    #[test]
    fn captions_are_normalized() {
        let (_, txt, _) = encoders(0);
        assert_eq!(txt.encode_text("  Red ").unwrap(), txt.encode_text("red").unwrap());
    }

    #[test]
    fn constant_image_gives_constant_maps() {
        let (_, _, vgg) = encoders(5);
        let x = toy::image_tensor(&Image::filled(16, 16, [0.2, 0.5, 0.7])).unwrap();
        for layer in vgg.forward(&x).unwrap() {
            let v: Vec<Vec<f32>> = layer.squeeze(0).unwrap().flatten_from(1).unwrap().to_vec2().unwrap();
            for ch in v {
                assert!(ch.iter().all(|&a| (a - ch[0]).abs() <= 1e-5 * (1.0 + ch[0].abs())));
            }
        }
    }

    #[test]
    fn style_map_scales_with_input() {
        let (_, _, vgg) = encoders(9);
        let img = Image::from_fn(16, 16, |x, y| [((x * y) % 7) as f32 / 7.0, x as f32 / 16.0, 0.5]);
        let scaled = Image::from_fn(16, 16, |x, y| img.pixel(x, y).map(|v| v * 2.5));
        let a = vgg.extract(&img).unwrap();
        let b = vgg.extract(&scaled).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x * 2.5 - y).abs() <= 1e-4 * (1.0 + y.abs()));
        }
        assert_eq!(a.channels, 16);
        assert_eq!((a.height, a.width), (4, 4));
    }

    #[test]
    fn pretrained_without_weights_is_a_capability_error() {
        let spec = EncoderSpec::Pretrained(PretrainedSpec {
            clip_weights: None,
            vgg_weights: Some("/nonexistent/vgg.safetensors".into()),
        });
        assert!(matches!(EncoderSet::build(&spec), Err(Error::Capability(_))));
    }

    #[test]
    fn cosine_of_zero_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-7);
    }
}
