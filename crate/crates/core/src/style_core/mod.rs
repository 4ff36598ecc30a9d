//! Style statistics, channelwise feature transfer, the embedding-to-statistics mapping network
//! and the feature decoder.

mod decoder;
mod mapping;

use candle_core::Tensor;

use crate::encoders::StyleFeatureMap;
use crate::error::{Error, Result};
use crate::feature_field::{FeatureField, Heads, RenderBundle};
use crate::scene_io::{Camera, PixelSelection};

pub use decoder::{Decoder, DecoderConfig};
pub use mapping::{MappingConfig, MappingNetwork};

/// Added to the variance before the square root.
pub const STATS_EPS: f64 = 1e-8;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStatistics {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl StyleStatistics {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Shape(format!("mean has {} channels, std has {}", mean.len(), std.len())));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(Error::Consistency("style statistics must be finite".into()));
        }
        if std.iter().any(|&s| s < 0.0) {
            return Err(Error::Consistency("style std must be non-negative".into()));
        }
        Ok(Self { mean, std })
    }

    /// `mean = 0`, `std = 1`: transfer becomes a no-op.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(mean, std)` as two `C`-vectors.
    pub fn tensors(&self) -> Result<(Tensor, Tensor)> {
        let dev = candle_core::Device::Cpu;
        Ok((Tensor::new(self.mean.as_slice(), &dev)?, Tensor::new(self.std.as_slice(), &dev)?))
    }
}

/// Spatial mean and population std of each channel, with [`STATS_EPS`] under the root.
pub fn stats_from_feature_map(map: &StyleFeatureMap) -> Result<StyleStatistics> {
    let n = map.height * map.width;
    if n == 0 {
        return Err(Error::Empty("feature map has no pixels".into()));
    }
    let mut mean = Vec::with_capacity(map.channels);
    let mut std = Vec::with_capacity(map.channels);
    for c in 0..map.channels {
        let (m, s) = moments(map.channel(c));
        mean.push(m);
        std.push(s);
    }
    StyleStatistics::new(mean, std)
}

fn moments(values: &[f32]) -> (f32, f32) {
    let n = values.len() as f64;
    let m = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
    (m as f32, (var + STATS_EPS).sqrt() as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Rendered,
    Encoder,
}

/// A planar `C x H x W` feature image plus the per-pixel accumulated weight.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    /// `H x W` accumulated ray weight; all ones for encoder features.
    pub acc: Vec<f32>,
    pub provenance: Provenance,
}

impl FeatureImage {
    /// Arranges the ray-major feature head of a bundle rendered over a `width x height` grid.
    pub fn from_bundle(bundle: &RenderBundle, width: usize, height: usize) -> Result<Self> {
        let features = bundle
            .features
            .as_ref()
            .ok_or_else(|| Error::Config("bundle has no rendered features".into()))?;
        let n = width * height;
        if bundle.n_rays != n {
            return Err(Error::Shape(format!("{} rays cannot fill a {width}x{height} image", bundle.n_rays)));
        }
        let c = features.len() / n;
        Ok(Self {
            channels: c,
            height,
            width,
            values: ray_major_to_planar(features, n, c),
            acc: bundle.acc.clone(),
            provenance: Provenance::Rendered,
        })
    }

    pub fn from_encoder(map: &StyleFeatureMap) -> Self {
        Self {
            channels: map.channels,
            height: map.height,
            width: map.width,
            values: map.values.clone(),
            acc: vec![1.0; map.height * map.width],
            provenance: Provenance::Encoder,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `1 x C x H x W` features and `1 x 1 x H x W` accumulated weight.
    pub fn tensors(&self) -> Result<(Tensor, Tensor)> {
        let dev = candle_core::Device::Cpu;
        let f = Tensor::from_vec(self.values.clone(), (1, self.channels, self.height, self.width), &dev)?;
        let a = Tensor::from_vec(self.acc.clone(), (1, 1, self.height, self.width), &dev)?;
        Ok((f, a))
    }

    /// Channelwise transfer of every pixel, see [`transfer_deferred`].
    pub fn transfer(&self, stats: &StyleStatistics) -> Result<FeatureImage> {
        let n = self.height * self.width;
        let ray_major = planar_to_ray_major(&self.values, n, self.channels);
        let out = transfer_deferred(&ray_major, &self.acc, stats)?;
        Ok(Self {
            values: ray_major_to_planar(&out, n, self.channels),
            ..self.clone()
        })
    }
}

/// Renders `heads` (plus features) on the strided lattice of a view and arranges the features
/// as an image of `width / stride x height / stride` pixels.
pub fn render_features(
    field: &FeatureField,
    camera: &Camera,
    stride: usize,
    n_samples: usize,
    heads: Heads,
) -> Result<(FeatureImage, RenderBundle)> {
    if stride == 0 {
        return Err(Error::Config("feature stride must be positive".into()));
    }
    let k = &camera.intrinsics;
    let (w, h) = (k.width / stride, k.height / stride);
    if w == 0 || h == 0 {
        return Err(Error::Config(format!("a {}x{} view is smaller than the stride {stride}", k.width, k.height)));
    }
    let rays = camera.rays(&PixelSelection::Strided(stride))?;
    let bundle = field.render_rays(&rays, n_samples, heads.with(Heads::FEATURE))?;
    Ok((FeatureImage::from_bundle(&bundle, w, h)?, bundle))
}

pub fn ray_major_to_planar(values: &[f32], n: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * c];
    for p in 0..n {
        for k in 0..c {
            out[k * n + p] = values[p * c + k];
        }
    }
    out
}

pub fn planar_to_ray_major(values: &[f32], n: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * c];
    for k in 0..c {
        for p in 0..n {
            out[p * c + k] = values[k * n + p];
        }
    }
    out
}

/// `F_c * std + w_r * mean` per ray, with `F_c` ray-major `B x C`.
pub fn transfer_deferred(features: &[f32], acc: &[f32], stats: &StyleStatistics) -> Result<Vec<f32>> {
    let c = stats.channels();
    if c == 0 || features.len() != acc.len() * c {
        return Err(Error::Shape(format!(
            "{} feature values do not match {} rays of {c} channels",
            features.len(),
            acc.len()
        )));
    }
    let mut out = Vec::with_capacity(features.len());
    for (r, f) in features.chunks_exact(c).enumerate() {
        for k in 0..c {
            out.push(f[k] * stats.std[k] + acc[r] * stats.mean[k]);
        }
    }
    Ok(out)
}

/// `sum_i w_i (F_i * std + mean)` per ray. `weights` is `B x N`, `features` is `B x N x C`.
pub fn transfer_per_point(weights: &[f32], features: &[f32], n_samples: usize, stats: &StyleStatistics) -> Result<Vec<f32>> {
    let c = stats.channels();
    if n_samples == 0 || weights.len() % n_samples != 0 || features.len() != weights.len() * c {
        return Err(Error::Shape(format!(
            "{} weights and {} feature values are not aligned for {n_samples} samples of {c} channels",
            weights.len(),
            features.len()
        )));
    }
    let n_rays = weights.len() / n_samples;
    let mut out = vec![0.0f32; n_rays * c];
    for r in 0..n_rays {
        let acc = &mut out[r * c..(r + 1) * c];
        for i in r * n_samples..(r + 1) * n_samples {
            let w = weights[i];
            let f = &features[i * c..(i + 1) * c];
            for k in 0..c {
                acc[k] += w * (f[k] * stats.std[k] + stats.mean[k]);
            }
        }
    }
    Ok(out)
}

/// Differentiable transfer: `features: N x C x H x W`, `acc: N x 1 x H x W`,
/// `mean`/`std`: `C` or `N x C`.
pub fn transfer_tensor(features: &Tensor, acc: &Tensor, mean: &Tensor, std: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, _, _) = features.dims4()?;
    let shape = (n, c, 1, 1);
    let (mean, std) = if mean.rank() == 1 {
        (mean.reshape((1, c, 1, 1))?, std.reshape((1, c, 1, 1))?)
    } else {
        (mean.reshape(shape)?, std.reshape(shape)?)
    };
    features.broadcast_mul(&std)?.broadcast_add(&acc.broadcast_mul(&mean)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(channels: usize, values: Vec<f32>) -> StyleFeatureMap {
        let n = values.len() / channels;
        StyleFeatureMap {
            channels,
            height: 1,
            width: n,
            values,
            layer: "test".into(),
        }
    }

    #[test]
    fn constant_map_has_zero_spread() {
        let s = stats_from_feature_map(&map(1, vec![5.0; 6])).unwrap();
        assert_eq!(s.mean, vec![5.0]);
        assert!(s.std[0] < 1e-3);
    }

    #[test]
    fn population_std_by_hand() {
        let s = stats_from_feature_map(&map(1, vec![1.0, 3.0])).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert!((s.std[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn stats_double_with_map() {
        let a = stats_from_feature_map(&map(2, vec![0.1, 0.7, 0.3, -0.2, 0.4, 0.9])).unwrap();
        let b = stats_from_feature_map(&map(2, vec![0.2, 1.4, 0.6, -0.4, 0.8, 1.8])).unwrap();
        for k in 0..2 {
            assert!((2.0 * a.mean[k] - b.mean[k]).abs() < 1e-6);
            assert!((2.0 * a.std[k] - b.std[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn deferred_arithmetic() {
        let stats = StyleStatistics::new(vec![4.0, 0.0], vec![3.0, 2.0]).unwrap();
        let out = transfer_deferred(&[2.0, -1.0], &[0.5], &stats).unwrap();
        assert_eq!(out, vec![8.0, -2.0]);
    }

    #[test]
    fn identity_style_is_noop() {
        let f = [0.3, -1.2, 4.0, 0.0, 2.5, 1.0];
        let out = transfer_deferred(&f, &[0.2, 0.9], &StyleStatistics::identity(3)).unwrap();
        assert_eq!(out, f.to_vec());
    }

    #[test]
    fn empty_ray_stays_empty() {
        let stats = StyleStatistics::new(vec![4.0, -3.0], vec![3.0, 2.0]).unwrap();
        assert_eq!(transfer_deferred(&[0.0, 0.0], &[0.0], &stats).unwrap(), vec![0.0, 0.0]);
        assert_eq!(transfer_per_point(&[0.0; 3], &[1.0; 6], 3, &stats).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_sample_matches_deferred() {
        let stats = StyleStatistics::new(vec![0.5, -1.0], vec![2.0, 0.25]).unwrap();
        let pp = transfer_per_point(&[1.0], &[3.0, 4.0], 1, &stats).unwrap();
        let d = transfer_deferred(&[3.0, 4.0], &[1.0], &stats).unwrap();
        assert_eq!(pp, d);
    }

    #[test]
    fn negative_std_is_rejected() {
        assert!(StyleStatistics::new(vec![0.0], vec![-1.0]).is_err());
        assert!(StyleStatistics::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn tensor_transfer_matches_slices() {
        let stats = StyleStatistics::new(vec![0.5, -1.0], vec![2.0, 0.25]).unwrap();
        let img = FeatureImage {
            channels: 2,
            height: 1,
            width: 3,
            values: vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0],
            acc: vec![1.0, 0.5, 0.0],
            provenance: Provenance::Rendered,
        };
        let (f, a) = img.tensors().unwrap();
        let (m, s) = stats.tensors().unwrap();
        let t: Vec<f32> = transfer_tensor(&f, &a, &m, &s).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(t, img.transfer(&stats).unwrap().values);
    }

    #[test]
    fn layout_round_trip() {
        let v: Vec<f32> = (0..12).map(|x| x as f32).collect();
        assert_eq!(planar_to_ray_major(&ray_major_to_planar(&v, 4, 3), 4, 3), v);
    }
}
