//! Multi-view consistency: forward-warp a view into another with rendered depth, then compare
//! on the pixels the warp reached with masked SSIM and an optional perceptual distance.

use serde::{Deserialize, Serialize};

use crate::encoders::StyleEncoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math;
use crate::nn;
use crate::scene_io::Camera;

/// Relative depth disagreement tolerated between a warped point and the target's own depth.
pub const DEPTH_TOLERANCE: f32 = 0.01;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_LONG_STRIDE: usize = 7;

/// Forward-splats every source pixel to its nearest target pixel at the source's depth along
/// the ray; the nearest point wins each target pixel. A target pixel is valid when its winning
/// point agrees with `target_depth` within [`DEPTH_TOLERANCE`] relative (or, without a target
/// depth, whenever it was reached).
pub fn warp_by_depth(
    source: &Image,
    source_depth: &[f32],
    source_camera: &Camera,
    target_camera: &Camera,
    target_depth: Option<&[f32]>,
) -> Result<WarpResult> {
    let (sw, sh) = (source.width(), source.height());
    if source_depth.len() != sw * sh {
        return Err(Error::Shape("source depth does not match the source image".into()));
    }
    let k = &target_camera.intrinsics;
    let (tw, th) = (k.width, k.height);
    if target_depth.is_some_and(|d| d.len() != tw * th) {
        return Err(Error::Shape("target depth does not match the target camera".into()));
    }
    let mut zbuf = vec![f32::INFINITY; tw * th];
    let mut out = vec![0.0f32; tw * th * 3];
    let origin = source_camera.position();
    let target_origin = target_camera.position();
    for y in 0..sh {
        for x in 0..sw {
            let d = source_depth[y * sw + x];
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let dir = source_camera.direction(x as f32 + 0.5, y as f32 + 0.5);
            let p = math::add(origin, math::scale(dir, d));
            let Some([u, v]) = target_camera.project(p) else { continue };
            if !(u >= 0.0 && v >= 0.0) {
                continue;
            }
            let (tx, ty) = (u.floor() as usize, v.floor() as usize);
            if tx >= tw || ty >= th {
                continue;
            }
            let dist = math::norm(math::sub(p, target_origin));
            let i = ty * tw + tx;
            if dist < zbuf[i] {
                zbuf[i] = dist;
                out[i * 3..i * 3 + 3].copy_from_slice(&source.pixel(x, y));
            }
        }
    }
    let mask = zbuf
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            z.is_finite()
                && target_depth.is_none_or(|td| {
                    let t = td[i];
                    t.is_finite() && (z - t).abs() <= DEPTH_TOLERANCE * t.abs()
                })
        })
        .collect();
    Ok(WarpResult {
        image: Image::new(tw, th, out)?,
        mask,
    })
}

/// A warped image and its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub image: Image,
    pub mask: Vec<bool>,
}

impl WarpResult {
    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Gaussian-weighted sums over masked pixels, separably: out = K * (mask . values).
fn masked_blur(values: &[f64], mask: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let xx = x as isize + j as isize - r as isize;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                let i = y * w + xx as usize;
                s += kv * values[i] * mask[i];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let yy = y as isize + j as isize - r as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                s += kv * tmp[yy as usize * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5) and the standard constants for unit-range
/// images, averaged over the masked pixels and the three channels. Window statistics only use
/// masked pixels, so pixels outside the mask never influence the score.
pub fn masked_ssim(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    let (w, h) = (a.width(), a.height());
    if (b.width(), b.height()) != (w, h) {
        return Err(Error::Shape("ssim on images of different sizes".into()));
    }
    let n = w * h;
    let m: Vec<f64> = match mask {
        Some(m) if m.len() != n => return Err(Error::Shape("mask does not match the images".into())),
        Some(m) => m.iter().map(|&v| v as u8 as f64).collect(),
        None => vec![1.0; n],
    };
    let count = m.iter().filter(|&&v| v > 0.0).count();
    if count == 0 {
        return Err(Error::Empty("ssim over an empty mask".into()));
    }
    let kernel = gaussian_kernel();
    let ones = vec![1.0; n];
    let norm = masked_blur(&ones, &m, w, h, &kernel);
    let mut total = 0.0;
    for c in 0..3 {
        let xa: Vec<f64> = a.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let xb: Vec<f64> = b.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mu_a = masked_blur(&xa, &m, w, h, &kernel);
        let mu_b = masked_blur(&xb, &m, w, h, &kernel);
        let aa = masked_blur(&prod(&xa, &xa), &m, w, h, &kernel);
        let bb = masked_blur(&prod(&xb, &xb), &m, w, h, &kernel);
        let ab = masked_blur(&prod(&xa, &xb), &m, w, h, &kernel);
        for i in 0..n {
            if m[i] == 0.0 {
                continue;
            }
            let z = norm[i];
            let (ma, mb) = (mu_a[i] / z, mu_b[i] / z);
            let va = (aa[i] / z - ma * ma).max(0.0);
            let vb = (bb[i] / z - mb * mb).max(0.0);
            let cov = ab[i] / z - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (3 * count) as f64)
}

/// A perceptual image distance.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> String;
    fn distance(&self, a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64>;
}

/// Perceptual distance, or a capability error when no metric is configured.
pub fn masked_lpips(a: &Image, b: &Image, mask: Option<&[bool]>, metric: Option<&dyn PerceptualMetric>) -> Result<f64> {
    match metric {
        Some(m) => m.distance(a, b, mask),
        None => Err(Error::Capability("no perceptual metric configured".into())),
    }
}

/// LPIPS-form distance over a convolutional encoder's layers with uniform channel weights:
/// per layer, features are unit-normalized along channels, squared differences summed over
/// channels and averaged over masked positions; layers are averaged. Not calibrated against
/// human judgments, so values are comparable only with each other.
pub struct FeatureDistance<E: StyleEncoder> {
    pub encoder: E,
}

impl<E: StyleEncoder> PerceptualMetric for FeatureDistance<E> {
    fn name(&self) -> String {
        format!("feature-distance/{}", self.encoder.handle().name)
    }

    fn distance(&self, a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
        let (w, h) = (a.width(), a.height());
        if (b.width(), b.height()) != (w, h) {
            return Err(Error::Shape("distance on images of different sizes".into()));
        }
        if mask.is_some_and(|m| m.len() != w * h) {
            return Err(Error::Shape("mask does not match the images".into()));
        }
        let fa = self.encoder.forward(&nn::planar_tensor(&a.to_planar(), 3, h, w)?)?;
        let fb = self.encoder.forward(&nn::planar_tensor(&b.to_planar(), 3, h, w)?)?;
        let strides = self.encoder.layer_strides();
        let mut total = 0.0;
        let mut layers = 0;
        for ((ta, tb), s) in fa.iter().zip(&fb).zip(strides) {
            let (_, c, lh, lw) = ta.dims4()?;
            let va: Vec<f32> = ta.flatten_all()?.to_vec1()?;
            let vb: Vec<f32> = tb.flatten_all()?.to_vec1()?;
            let n = lh * lw;
            let mut sum = 0.0;
            let mut count = 0usize;
            for p in 0..n {
                let (px, py) = ((p % lw) * s + s / 2, (p / lw) * s + s / 2);
                if mask.is_some_and(|m| !m[py.min(h - 1) * w + px.min(w - 1)]) {
                    continue;
                }
                let norm = |v: &[f32]| (0..c).map(|k| (v[k * n + p] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
                let (na, nb) = (norm(&va), norm(&vb));
                sum += (0..c)
                    .map(|k| (va[k * n + p] as f64 / na - vb[k * n + p] as f64 / nb).powi(2))
                    .sum::<f64>();
                count += 1;
            }
            if count > 0 {
                total += sum / count as f64;
                layers += 1;
            }
        }
        if layers == 0 {
            return Err(Error::Empty("perceptual distance over an empty mask".into()));
        }
        Ok(total / layers as f64)
    }
}

/// Which view pairs a report scores: adjacent indices and/or indices `long_stride` apart.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPolicy {
    pub short: bool,
    pub long_stride: Option<usize>,
}

impl Default for PairPolicy {
    fn default() -> Self {
        Self {
            short: true,
            long_stride: Some(DEFAULT_LONG_STRIDE),
        }
    }
}

impl PairPolicy {
    pub fn pairs(&self, n: usize) -> Vec<(usize, usize, Range)> {
        let mut out = Vec::new();
        if self.short {
            out.extend((0..n.saturating_sub(1)).map(|i| (i, i + 1, Range::Short)));
        }
        if let Some(s) = self.long_stride.filter(|&s| s > 0) {
            out.extend((0..n.saturating_sub(s)).map(|i| (i, i + s, Range::Long)));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Range {
    Short,
    Long,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub source: usize,
    pub target: usize,
    pub range: Range,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeScore {
    pub pairs: usize,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub policy: PairPolicy,
    pub warp: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual_metric: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub short: Option<RangeScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub long: Option<RangeScore>,
    pub pairs: Vec<PairScore>,
}

impl ConsistencyReport {
    /// Plain-text table of the summary rows.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>6} {:>8} {:>8}\n", "range", "pairs", "ssim", "lpips");
        for (name, r) in [("short", &self.short), ("long", &self.long)] {
            if let Some(r) = r {
                let lp = r.lpips.map_or("-".to_string(), |v| format!("{v:.4}"));
                s.push_str(&format!("{name:<8} {:>6} {:>8.4} {lp:>8}\n", r.pairs, r.ssim));
            }
        }
        s
    }
}

/// Warps each pair's source into its target view and scores the overlap. Pairs whose warp
/// covers no pixel are skipped.
pub fn consistency_report(
    images: &[Image],
    depths: &[Vec<f32>],
    cameras: &[Camera],
    policy: &PairPolicy,
    metric: Option<&dyn PerceptualMetric>,
) -> Result<ConsistencyReport> {
    if images.len() < 2 {
        return Err(Error::Config("consistency needs at least two views".into()));
    }
    if depths.len() != images.len() || cameras.len() != images.len() {
        return Err(Error::Shape("images, depths and cameras must align".into()));
    }
    let mut pairs = Vec::new();
    for (i, j, range) in policy.pairs(images.len()) {
        let warp = warp_by_depth(&images[i], &depths[i], &cameras[i], &cameras[j], Some(&depths[j]))?;
        if !warp.mask.iter().any(|&m| m) {
            continue;
        }
        let ssim = masked_ssim(&warp.image, &images[j], Some(&warp.mask))?;
        let lpips = metric
            .map(|m| m.distance(&warp.image, &images[j], Some(&warp.mask)))
            .transpose()?;
        let coverage = warp.coverage();
        pairs.push(PairScore {
            source: i,
            target: j,
            range,
            ssim,
            lpips,
            coverage,
        });
    }
    let summarize = |r: Range| {
        let sel: Vec<&PairScore> = pairs.iter().filter(|p| p.range == r).collect();
        if sel.is_empty() {
            return None;
        }
        let n = sel.len() as f64;
        Some(RangeScore {
            pairs: sel.len(),
            ssim: sel.iter().map(|p| p.ssim).sum::<f64>() / n,
            lpips: metric.map(|_| sel.iter().filter_map(|p| p.lpips).sum::<f64>() / n),
        })
    };
    Ok(ConsistencyReport {
        policy: policy.clone(),
        warp: "rendered-depth forward splat, z-buffer, 1% depth agreement".into(),
        perceptual_metric: metric.map(|m| m.name()),
        short: summarize(Range::Short),
        long: summarize(Range::Long),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::Intrinsics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn cam(eye: [f32; 3]) -> Camera {
        let target = [eye[0], eye[1], eye[2] - 1.0];
        Camera::look_at(Intrinsics::centered(20.0, 24, 24), eye, target, [0.0, 1.0, 0.0], 0.1, 10.0).unwrap()
    }

    /// Distance along each pixel's ray to the plane z = 0.
    fn plane_depth(c: &Camera) -> Vec<f32> {
        let k = c.intrinsics;
        let mut out = Vec::new();
        for y in 0..k.height {
            for x in 0..k.width {
                let d = c.direction(x as f32 + 0.5, y as f32 + 0.5);
                out.push(-c.position()[2] / d[2]);
            }
        }
        out
    }

    #[test]
    fn ssim_identity_symmetry_and_noise() {
        let a = noise(1, 20, 16);
        let b = noise(2, 20, 16);
        assert!((masked_ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let ab = masked_ssim(&a, &b, None).unwrap();
        assert!((ab - masked_ssim(&b, &a, None).unwrap()).abs() < 1e-9);
        assert!(ab < 0.2, "{ab}");
    }

    #[test]
    fn ssim_ignores_pixels_outside_the_mask() {
        let a = noise(3, 16, 16);
        let mut b = a.clone();
        let mut mask = vec![true; 256];
        for i in (0..256).step_by(5) {
            b.data_mut()[i * 3] = 1.0 - b.data()[i * 3];
            mask[i] = false;
        }
        assert!((masked_ssim(&a, &b, Some(&mask)).unwrap() - 1.0).abs() < 1e-12);
        assert!(masked_ssim(&a, &b, None).unwrap() < 0.99);
        assert!(masked_ssim(&a, &b, Some(&[false; 256])).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let c = cam([0.0, 0.0, 2.0]);
        let img = noise(4, 24, 24);
        let d = plane_depth(&c);
        let w = warp_by_depth(&img, &d, &c, &c, Some(&d)).unwrap();
        assert_eq!(w.image, img);
        assert!(w.mask.iter().all(|&m| m));
    }

    #[test]
    fn fronto_parallel_translation_shifts_uniformly() {
        // at depth 2 with focal 20, a 0.2 sideways step moves the image by 20 * 0.2 / 2 = 2 px
        let a = cam([0.0, 0.0, 2.0]);
        let b = cam([0.2, 0.0, 2.0]);
        let img = noise(5, 24, 24);
        let w = warp_by_depth(&img, &plane_depth(&a), &a, &b, Some(&plane_depth(&b))).unwrap();
        for y in 0..24 {
            for x in 0..22 {
                assert!(w.mask[y * 24 + x], "({x}, {y})");
                assert_eq!(w.image.pixel(x, y), img.pixel(x + 2, y));
            }
            assert!(!w.mask[y * 24 + 22] && !w.mask[y * 24 + 23]);
        }
    }

    #[test]
    fn smaller_baseline_never_covers_less() {
        let a = cam([0.0, 0.0, 2.0]);
        let img = noise(6, 24, 24);
        let da = plane_depth(&a);
        let mut prev = f64::INFINITY;
        for step in [0.0f32, 0.1, 0.2, 0.4, 0.8] {
            let b = cam([step, 0.0, 2.0]);
            let w = warp_by_depth(&img, &da, &a, &b, Some(&plane_depth(&b))).unwrap();
            let cov = w.mask.iter().filter(|&&m| m).count() as f64;
            assert!(cov <= prev);
            prev = cov;
        }
    }

    #[test]
    fn target_behind_the_scene_sees_nothing() {
        let a = cam([0.0, 0.0, 2.0]);
        let behind = Camera::look_at(
            Intrinsics::centered(20.0, 24, 24),
            [0.0, 0.0, -2.0],
            [0.0, 0.0, -3.0],
            [0.0, 1.0, 0.0],
            0.1,
            10.0,
        )
        .unwrap();
        let w = warp_by_depth(&noise(7, 24, 24), &plane_depth(&a), &a, &behind, None).unwrap();
        assert!(w.mask.iter().all(|&m| !m));
    }

    #[test]
    fn constant_sequence_scores_one() {
        let cams: Vec<Camera> = (0..9).map(|i| cam([i as f32 * 0.05, 0.0, 2.0])).collect();
        let imgs = vec![Image::filled(24, 24, [0.3, 0.6, 0.2]); 9];
        let depths: Vec<Vec<f32>> = cams.iter().map(plane_depth).collect();
        let r = consistency_report(&imgs, &depths, &cams, &PairPolicy::default(), None).unwrap();
        assert!((r.short.as_ref().unwrap().ssim - 1.0).abs() < 1e-12);
        assert!((r.long.as_ref().unwrap().ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.short.as_ref().unwrap().pairs, 8);
        assert_eq!(r.long.as_ref().unwrap().pairs, 2);
        assert!(r.short.as_ref().unwrap().lpips.is_none());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["short"].get("lpips").is_none());
    }

    #[test]
    fn single_pair_report_equals_pair() {
        let cams = vec![cam([0.0, 0.0, 2.0]), cam([0.1, 0.0, 2.0])];
        let imgs = vec![noise(8, 24, 24), noise(9, 24, 24)];
        let depths: Vec<Vec<f32>> = cams.iter().map(plane_depth).collect();
        let r = consistency_report(&imgs, &depths, &cams, &PairPolicy::default(), None).unwrap();
        assert!(r.long.is_none());
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.short.unwrap().ssim, r.pairs[0].ssim);
    }

    #[test]
    fn feature_distance_behaves() {
        let vgg = crate::encoders::ToyVgg::new(0, [4, 8, 8, 8]).unwrap();
        let m = FeatureDistance { encoder: vgg };
        let a = noise(10, 16, 16);
        let b = noise(11, 16, 16);
        assert_eq!(masked_lpips(&a, &a, None, Some(&m)).unwrap(), 0.0);
        let d = masked_lpips(&a, &b, None, Some(&m)).unwrap();
        assert!(d.is_finite() && d > 0.0);
        assert!(matches!(masked_lpips(&a, &b, None, None), Err(Error::Capability(_))));
    }
}
