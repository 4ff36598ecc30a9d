//! Text-driven region selection: sliding-window embedding maps, cosine similarity masks and
//! two-style masked transfer.

mod cache;

use serde::{Deserialize, Serialize};

use crate::encoders::{cosine, normalize, EmbeddingVector, ImageEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::style_core::{transfer_deferred, transfer_per_point, StyleStatistics};

pub use cache::{CacheManifest, MultiSpatialCache};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Window sizes and the stride policy of a sliding-window pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub sizes: Vec<usize>,
    /// Fixed stride for every size; half the window (at least 1) when absent.
    pub stride: Option<usize>,
}

impl WindowSpec {
    pub fn new(sizes: Vec<usize>, stride: Option<usize>) -> Self {
        Self { sizes, stride }
    }

    pub fn stride_for(&self, size: usize) -> usize {
        self.stride.unwrap_or((size / 2).max(1))
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            sizes: vec![32],
            stride: None,
        }
    }
}

/// Offsets of windows of `size` along an axis of `len`, stepping by `stride`, with the last
/// window flush against the far border.
pub fn window_offsets(len: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if size == 0 || stride == 0 {
        return Err(Error::Config("window size and stride must be positive".into()));
    }
    if size > len {
        return Err(Error::Config(format!("window {size} is larger than the image side {len}")));
    }
    let mut out: Vec<usize> = (0..=len - size).step_by(stride).collect();
    if *out.last().expect("at least offset 0") != len - size {
        out.push(len - size);
    }
    Ok(out)
}

/// Per-pixel average of the embeddings of every window that covers the pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSpatialFeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    /// Pixel-major `H x W x D`.
    pub features: Vec<f32>,
    /// Number of windows covering each pixel, `H x W`.
    pub counts: Vec<u32>,
    pub windows: WindowSpec,
}

impl MultiSpatialFeatureMap {
    pub fn feature(&self, x: usize, y: usize) -> &[f32] {
        let i = y * self.width + x;
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Features at the given pixel centers (nearest pixel), pixel-major.
    pub fn gather(&self, pixels: &[[f32; 2]]) -> Vec<f32> {
        let mut out = Vec::with_capacity(pixels.len() * self.dim);
        for p in pixels {
            let x = (p[0].floor().max(0.0) as usize).min(self.width - 1);
            let y = (p[1].floor().max(0.0) as usize).min(self.height - 1);
            out.extend_from_slice(self.feature(x, y));
        }
        out
    }
}

/// Encodes every window of every size and averages the embeddings covering each pixel.
/// Windows are visited size by size, then row by row.
pub fn multi_spatial_features(
    image: &Image,
    encoder: &dyn ImageEncoder,
    windows: &WindowSpec,
) -> Result<MultiSpatialFeatureMap> {
    let (w, h) = (image.width(), image.height());
    if windows.sizes.is_empty() {
        return Err(Error::Config("at least one window size is required".into()));
    }
    let dim = encoder.width();
    let mut sum = vec![0.0f64; w * h * dim];
    let mut counts = vec![0u32; w * h];
    for &size in &windows.sizes {
        let stride = windows.stride_for(size);
        let ys = window_offsets(h, size, stride)?;
        let xs = window_offsets(w, size, stride)?;
        for &y0 in &ys {
            for &x0 in &xs {
                let emb = encoder.encode_image(&image.crop(x0, y0, size, size)?)?;
                if emb.dim() != dim {
                    return Err(Error::Shape(format!("encoder returned width {}, declared {dim}", emb.dim())));
                }
                for y in y0..y0 + size {
                    for x in x0..x0 + size {
                        let i = y * w + x;
                        counts[i] += 1;
                        for (s, v) in sum[i * dim..(i + 1) * dim].iter_mut().zip(&emb.values) {
                            *s += *v as f64;
                        }
                    }
                }
            }
        }
    }
    let mut features = Vec::with_capacity(sum.len());
    for (i, chunk) in sum.chunks_exact(dim).enumerate() {
        let c = counts[i] as f64;
        features.extend(chunk.iter().map(|s| (s / c) as f32));
    }
    Ok(MultiSpatialFeatureMap {
        width: w,
        height: h,
        dim,
        features,
        counts,
        windows: windows.clone(),
    })
}

/// Per-pixel cosine between a content embedding and ray-major rendered features. Both operands
/// are normalized; zero vectors score 0.
pub fn similarity_map(content: &EmbeddingVector, features: &[f32]) -> Result<Vec<f32>> {
    let d = content.dim();
    if d == 0 || features.len() % d != 0 {
        return Err(Error::Shape(format!(
            "{} feature values are not a multiple of the embedding width {d}",
            features.len()
        )));
    }
    let q = normalize(&content.values);
    Ok(features.chunks_exact(d).map(|f| cosine(&q, f)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    pub mask: Vec<bool>,
    pub threshold: f32,
    pub similarity: Vec<f32>,
}

impl SelectionMask {
    pub fn weights(&self) -> Vec<f32> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn coverage(&self) -> f32 {
        self.mask.iter().filter(|&&m| m).count() as f32 / self.mask.len().max(1) as f32
    }
}

/// Selects the pixels at least as similar as `t`.
pub fn mask_from_similarity(similarity: &[f32], t: f32) -> Result<SelectionMask> {
    check_threshold(t)?;
    Ok(SelectionMask {
        mask: similarity.iter().map(|&z| z >= t).collect(),
        threshold: t,
        similarity: similarity.to_vec(),
    })
}

/// `sigmoid((z - t) / tau)`.
pub fn soft_mask(similarity: &[f32], t: f32, tau: f32) -> Result<Vec<f32>> {
    check_threshold(t)?;
    if !(tau > 0.0) {
        return Err(Error::Config("soft mask temperature must be positive".into()));
    }
    Ok(similarity.iter().map(|&z| crate::math::sigmoid((z - t) / tau)).collect())
}

fn check_threshold(t: f32) -> Result<()> {
    if !(-1.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("threshold {t} is outside [-1, 1]")));
    }
    Ok(())
}

fn mix(mask: &[f32], a: &[f32], b: &[f32], c: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(a.len());
    for (r, m) in mask.iter().enumerate() {
        for k in r * c..(r + 1) * c {
            out.push(m * a[k] + (1.0 - m) * b[k]);
        }
    }
    out
}

/// `M * transfer(stats1) + (1 - M) * transfer(stats2)` with per-point transfer along each ray.
pub fn local_transfer(
    weights: &[f32],
    features: &[f32],
    n_samples: usize,
    mask: &[f32],
    stats1: &StyleStatistics,
    stats2: &StyleStatistics,
) -> Result<Vec<f32>> {
    if stats1.channels() != stats2.channels() {
        return Err(Error::Shape("the two styles have different channel counts".into()));
    }
    if n_samples == 0 || mask.len() * n_samples != weights.len() {
        return Err(Error::Shape(format!("mask has {} entries for {} samples", mask.len(), weights.len())));
    }
    let a = transfer_per_point(weights, features, n_samples, stats1)?;
    let b = transfer_per_point(weights, features, n_samples, stats2)?;
    Ok(mix(mask, &a, &b, stats1.channels()))
}

/// [`local_transfer`] on rendered features and accumulated weights.
pub fn local_transfer_deferred(
    features: &[f32],
    acc: &[f32],
    mask: &[f32],
    stats1: &StyleStatistics,
    stats2: &StyleStatistics,
) -> Result<Vec<f32>> {
    if stats1.channels() != stats2.channels() {
        return Err(Error::Shape("the two styles have different channel counts".into()));
    }
    if mask.len() != acc.len() {
        return Err(Error::Shape(format!("mask has {} entries for {} rays", mask.len(), acc.len())));
    }
    let a = transfer_deferred(features, acc, stats1)?;
    let b = transfer_deferred(features, acc, stats2)?;
    Ok(mix(mask, &a, &b, stats1.channels()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{make_toy_encoders, Modality};

    #[test]
    fn offsets_cover_border() {
        assert_eq!(window_offsets(10, 4, 2).unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(window_offsets(9, 4, 2).unwrap(), vec![0, 2, 4, 5]);
        assert_eq!(window_offsets(4, 4, 2).unwrap(), vec![0]);
        assert!(window_offsets(3, 4, 2).is_err());
    }

    #[test]
    fn three_by_three_counts() {
        let (enc, _, _) = make_toy_encoders(0, 16, [4, 4, 4, 4]).unwrap();
        let img = Image::from_fn(3, 3, |x, y| [x as f32 / 3.0, y as f32 / 3.0, 0.5]);
        let m = multi_spatial_features(&img, &enc, &WindowSpec::new(vec![2], Some(1))).unwrap();
        assert_eq!(m.counts, vec![1, 2, 1, 2, 4, 2, 1, 2, 1]);
    }

    #[test]
    fn whole_image_window() {
        let (enc, _, _) = make_toy_encoders(0, 16, [4, 4, 4, 4]).unwrap();
        let img = Image::from_fn(6, 5, |x, y| [x as f32 / 6.0, 0.2, y as f32 / 5.0]);
        let m = multi_spatial_features(&img, &enc, &WindowSpec::new(vec![5], Some(5))).unwrap();
        let whole = enc.encode_image(&img.crop(0, 0, 5, 5).unwrap()).unwrap();
        assert_eq!(m.feature(0, 0), whole.values.as_slice());
        assert_eq!(m.counts[0], 1);
    }

    #[test]
    fn similarity_by_hand() {
        let q = EmbeddingVector::new(vec![1.0, 1.0], Modality::Text);
        let z = similarity_map(&q, &[1.0, 1.0, 1.0, -1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-6);
        assert!(z[1].abs() < 1e-6);
        assert!((z[2] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert_eq!(z[3], 0.0);
    }

    #[test]
    fn mask_thresholds() {
        assert!(mask_from_similarity(&[0.9; 4], 0.5).unwrap().mask.iter().all(|&m| m));
        assert!(mask_from_similarity(&[0.1; 4], 0.5).unwrap().mask.iter().all(|&m| !m));
        assert!(mask_from_similarity(&[0.1], 1.5).is_err());
        let s = soft_mask(&[0.5, 0.9, 0.1], 0.5, 0.05).unwrap();
        assert_eq!(s[0], 0.5);
        assert!(s[1] > 0.99 && s[2] < 0.01);
    }

    #[test]
    fn equal_styles_ignore_mask() {
        let stats = StyleStatistics::new(vec![0.3, -0.1], vec![1.5, 0.5]).unwrap();
        let w = [0.2, 0.5, 0.1, 0.0];
        let f = [1.0, 2.0, -1.0, 0.5, 0.3, 0.3, 2.0, 1.0];
        let a = local_transfer(&w, &f, 2, &[1.0, 0.0], &stats, &stats).unwrap();
        let b = local_transfer(&w, &f, 2, &[0.0, 1.0], &stats, &stats).unwrap();
        assert_eq!(a, b);
    }
}
