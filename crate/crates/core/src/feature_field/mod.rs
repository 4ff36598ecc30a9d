//! Dense trilinear grid field emitting density, a C-channel feature, and optionally a CLIP
//! feature and RGB, plus volume rendering of any of those along rays.

mod lattice;
mod sampling;

pub use lattice::{Corners, Lattice};
pub use sampling::{compute_weights, compute_weights_into, sample_points, transmittance, SampleBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::scene_io::{Aabb, RayBatch};

/// Depth normalization floor.
pub const DEPTH_EPS: f32 = 1e-8;

/// Architecture of a [`FeatureField`]. Every head shares the density and the lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub res: [usize; 3],
    pub feature_channels: usize,
    /// Width of the CLIP head, if present.
    pub clip_channels: Option<usize>,
    pub rgb_head: bool,
    /// Density is `density_scale * softplus(raw + density_shift)`.
    pub density_shift: f32,
    pub density_scale: f32,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            res: [128, 128, 128],
            feature_channels: 256,
            clip_channels: None,
            rgb_head: true,
            density_shift: -7.0,
            density_scale: 20.0,
        }
    }
}

pub const DENSITY_ACTIVATION: &str = "softplus";

/// Which quantities to volume-render.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Heads {
    pub feature: bool,
    pub clip: bool,
    pub rgb: bool,
    pub depth: bool,
}

impl Heads {
    pub const FEATURE: Heads = Heads {
        feature: true,
        clip: false,
        rgb: false,
        depth: false,
    };
    pub const CLIP: Heads = Heads {
        feature: false,
        clip: true,
        rgb: false,
        depth: false,
    };
    pub const RGB: Heads = Heads {
        feature: false,
        clip: false,
        rgb: true,
        depth: false,
    };
    pub const DEPTH: Heads = Heads {
        feature: false,
        clip: false,
        rgb: false,
        depth: true,
    };

    pub fn with(self, other: Heads) -> Heads {
        Heads {
            feature: self.feature || other.feature,
            clip: self.clip || other.clip,
            rgb: self.rgb || other.rgb,
            depth: self.depth || other.depth,
        }
    }
}

/// Per-ray render outputs. Vector heads are ray-major (`n_rays x width`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderBundle {
    pub n_rays: usize,
    pub features: Option<Vec<f32>>,
    pub clip: Option<Vec<f32>>,
    /// Composited color without any background term.
    pub rgb: Option<Vec<f32>>,
    pub depth: Option<Vec<f32>>,
    /// Accumulated weight `w_r = sum_i w_i`.
    pub acc: Vec<f32>,
}

/// Upstream gradients with respect to [`RenderBundle`] outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct RenderGrads<'a> {
    pub features: Option<&'a [f32]>,
    pub clip: Option<&'a [f32]>,
    pub rgb: Option<&'a [f32]>,
    pub acc: Option<&'a [f32]>,
}

/// Gradient buffers for the field's parameter groups. `None` groups are frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldGrads {
    pub density: Option<Vec<f32>>,
    pub features: Option<Vec<f32>>,
    pub clip: Option<Vec<f32>>,
    pub rgb: Option<Vec<f32>>,
}

/// Selects parameter groups to differentiate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamGroups {
    pub density: bool,
    pub features: bool,
    pub clip: bool,
    pub rgb: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    config: FieldConfig,
    lattice: Lattice,
    pub density: Vec<f32>,
    pub features: Vec<f32>,
    pub clip: Option<Vec<f32>>,
    pub rgb: Option<Vec<f32>>,
}

impl FeatureField {
    /// Zero-initialized field; with a negative shift it starts nearly transparent.
    pub fn new(config: FieldConfig, bbox: Aabb) -> Result<Self> {
        if config.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be positive".into()));
        }
        if config.clip_channels == Some(0) {
            return Err(Error::Config("clip_channels must be positive".into()));
        }
        let lattice = Lattice::new(bbox, config.res)?;
        let n = lattice.num_nodes();
        Ok(Self {
            density: vec![0.0; n],
            features: vec![0.0; n * config.feature_channels],
            clip: config.clip_channels.map(|d| vec![0.0; n * d]),
            rgb: config.rgb_head.then(|| vec![0.0; n * 3]),
            lattice,
            config,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn bbox(&self) -> Aabb {
        self.lattice.bbox
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels
    }

    pub fn clip_channels(&self) -> Option<usize> {
        self.config.clip_channels
    }

    /// Adds a zeroed CLIP head of the given width (replacing any existing one).
    pub fn add_clip_head(&mut self, channels: usize) {
        self.config.clip_channels = Some(channels);
        self.clip = Some(vec![0.0; self.lattice.num_nodes() * channels]);
    }

    #[inline]
    fn activate_density(&self, raw: f32) -> f32 {
        self.config.density_scale * math::softplus(raw + self.config.density_shift)
    }

    /// d(density)/d(raw)
    #[inline]
    fn density_slope(&self, raw: f32) -> f32 {
        self.config.density_scale * math::sigmoid(raw + self.config.density_shift)
    }

    /// Density and feature at each position; zero outside the bounding box.
    pub fn query(&self, positions: &[Vec3]) -> (Vec<f32>, Vec<f32>) {
        let c = self.config.feature_channels;
        let mut dens = vec![0.0; positions.len()];
        let mut feats = vec![0.0; positions.len() * c];
        for (i, p) in positions.iter().enumerate() {
            if let Some(k) = self.lattice.corners(*p) {
                dens[i] = self.activate_density(k.scalar(&self.density));
                k.vector(&self.features, c, &mut feats[i * c..(i + 1) * c]);
            }
        }
        (dens, feats)
    }

    /// Fills `densities` and `features` of a sample batch.
    pub fn query_samples(&self, samples: &mut SampleBatch) {
        let (d, f) = self.query(&samples.positions);
        samples.densities = d;
        samples.features = f;
    }

    fn check_heads(&self, heads: Heads) -> Result<()> {
        if heads.clip && self.clip.is_none() {
            return Err(Error::Config("field has no CLIP head".into()));
        }
        if heads.rgb && self.rgb.is_none() {
            return Err(Error::Config("field has no RGB head".into()));
        }
        Ok(())
    }

    /// Volume-renders the requested heads at the given samples.
    pub fn render(&self, samples: &SampleBatch, heads: Heads) -> Result<RenderBundle> {
        self.check_heads(heads)?;
        let (b, n) = (samples.n_rays, samples.n_samples);
        let c = self.config.feature_channels;
        let d = self.config.clip_channels.unwrap_or(0);
        let mut out = RenderBundle {
            n_rays: b,
            features: heads.feature.then(|| vec![0.0; b * c]),
            clip: heads.clip.then(|| vec![0.0; b * d]),
            rgb: heads.rgb.then(|| vec![0.0; b * 3]),
            depth: heads.depth.then(|| vec![0.0; b]),
            acc: vec![0.0; b],
        };
        let mut corners: Vec<Option<Corners>> = vec![None; n];
        let mut sigma = vec![0.0f32; n];
        let mut w = vec![0.0f32; n];
        let mut fbuf = vec![0.0f32; c.max(d)];
        let mut cbuf = [0.0f32; 3];
        for r in 0..b {
            let range = samples.ray_range(r);
            for (i, s) in range.clone().enumerate() {
                corners[i] = self.lattice.corners(samples.positions[s]);
                sigma[i] = corners[i].map_or(0.0, |k| self.activate_density(k.scalar(&self.density)));
            }
            compute_weights_into(&sigma, &samples.deltas[range.clone()], &mut w);
            let mut acc = 0.0f64;
            let mut depth = 0.0f64;
            for i in 0..n {
                let Some(k) = corners[i] else { continue };
                let wi = w[i];
                acc += wi as f64;
                depth += wi as f64 * samples.t[range.start + i] as f64;
                if wi == 0.0 {
                    continue;
                }
                if let Some(f) = out.features.as_mut() {
                    k.vector(&self.features, c, &mut fbuf[..c]);
                    for (o, v) in f[r * c..(r + 1) * c].iter_mut().zip(&fbuf[..c]) {
                        *o += wi * v;
                    }
                }
                if let (Some(f), Some(grid)) = (out.clip.as_mut(), self.clip.as_ref()) {
                    k.vector(grid, d, &mut fbuf[..d]);
                    for (o, v) in f[r * d..(r + 1) * d].iter_mut().zip(&fbuf[..d]) {
                        *o += wi * v;
                    }
                }
                if let (Some(f), Some(grid)) = (out.rgb.as_mut(), self.rgb.as_ref()) {
                    k.vector(grid, 3, &mut cbuf);
                    for ch in 0..3 {
                        f[r * 3 + ch] += wi * math::sigmoid(cbuf[ch]);
                    }
                }
            }
            out.acc[r] = acc as f32;
            if let Some(dep) = out.depth.as_mut() {
                dep[r] = (depth / acc.max(DEPTH_EPS as f64)) as f32;
            }
        }
        Ok(out)
    }

    /// Convenience: unjittered samples, then [`render`](Self::render).
    pub fn render_rays(&self, rays: &RayBatch, n_samples: usize, heads: Heads) -> Result<RenderBundle> {
        let samples = sample_points(rays, n_samples, false, 0);
        self.render(&samples, heads)
    }

    pub fn zero_grads(&self, groups: ParamGroups) -> FieldGrads {
        let n = self.lattice.num_nodes();
        FieldGrads {
            density: groups.density.then(|| vec![0.0; n]),
            features: groups.features.then(|| vec![0.0; self.features.len()]),
            clip: if groups.clip { self.clip.as_ref().map(|c| vec![0.0; c.len()]) } else { None },
            rgb: if groups.rgb { self.rgb.as_ref().map(|c| vec![0.0; c.len()]) } else { None },
        }
    }

    /// Accumulates parameter gradients of a loss given its gradients with respect to the
    /// render outputs of [`render`](Self::render) at the same samples.
    ///
    /// With `x_k = sigma_k delta_k`, `T_k` the transmittance before sample `k` and `a_k` the
    /// dot product of the upstream gradients with sample `k`'s head values (1 for `acc`):
    /// `dL/dx_k = T_{k+1} a_k - sum_{i>k} w_i a_i`.
    pub fn backward(&self, samples: &SampleBatch, grads: &RenderGrads<'_>, out: &mut FieldGrads) -> Result<()> {
        let heads = Heads {
            feature: grads.features.is_some(),
            clip: grads.clip.is_some(),
            rgb: grads.rgb.is_some(),
            depth: false,
        };
        self.check_heads(heads)?;
        let (b, n) = (samples.n_rays, samples.n_samples);
        let c = self.config.feature_channels;
        let d = self.config.clip_channels.unwrap_or(0);
        let check = |len: usize, width: usize, name: &str| {
            if len != b * width {
                Err(Error::Shape(format!("{name} gradient has {len} values, want {}", b * width)))
            } else {
                Ok(())
            }
        };
        if let Some(g) = grads.features {
            check(g.len(), c, "feature")?;
        }
        if let Some(g) = grads.clip {
            check(g.len(), d, "clip")?;
        }
        if let Some(g) = grads.rgb {
            check(g.len(), 3, "rgb")?;
        }
        if let Some(g) = grads.acc {
            check(g.len(), 1, "acc")?;
        }

        let mut corners: Vec<Option<Corners>> = vec![None; n];
        let mut raw = vec![0.0f32; n];
        let mut sigma = vec![0.0f32; n];
        let mut w = vec![0.0f32; n];
        let mut a = vec![0.0f64; n];
        let mut fbuf = vec![0.0f32; c.max(d)];
        let mut gbuf = vec![0.0f32; c.max(d)];
        let mut cbuf = [0.0f32; 3];
        for r in 0..b {
            let range = samples.ray_range(r);
            for (i, s) in range.clone().enumerate() {
                corners[i] = self.lattice.corners(samples.positions[s]);
                raw[i] = corners[i].map_or(0.0, |k| k.scalar(&self.density));
                sigma[i] = if corners[i].is_some() { self.activate_density(raw[i]) } else { 0.0 };
            }
            let deltas = &samples.deltas[range.clone()];
            compute_weights_into(&sigma, deltas, &mut w);
            let trans = transmittance(&sigma, deltas);

            for i in 0..n {
                a[i] = 0.0;
                let Some(k) = corners[i] else { continue };
                let mut ai = 0.0f64;
                if let Some(acc) = grads.acc {
                    ai += acc[r] as f64;
                }
                if let Some(g) = grads.features {
                    let g = &g[r * c..(r + 1) * c];
                    k.vector(&self.features, c, &mut fbuf[..c]);
                    ai += dot64(g, &fbuf[..c]);
                    if let Some(pg) = out.features.as_mut() {
                        for (o, v) in gbuf[..c].iter_mut().zip(g) {
                            *o = w[i] * v;
                        }
                        k.scatter_vector(pg, c, &gbuf[..c]);
                    }
                }
                if let (Some(g), Some(grid)) = (grads.clip, self.clip.as_ref()) {
                    let g = &g[r * d..(r + 1) * d];
                    k.vector(grid, d, &mut fbuf[..d]);
                    ai += dot64(g, &fbuf[..d]);
                    if let Some(pg) = out.clip.as_mut() {
                        for (o, v) in gbuf[..d].iter_mut().zip(g) {
                            *o = w[i] * v;
                        }
                        k.scatter_vector(pg, d, &gbuf[..d]);
                    }
                }
                if let (Some(g), Some(grid)) = (grads.rgb, self.rgb.as_ref()) {
                    let g = &g[r * 3..(r + 1) * 3];
                    k.vector(grid, 3, &mut cbuf);
                    let mut graw = [0.0f32; 3];
                    for ch in 0..3 {
                        let s = math::sigmoid(cbuf[ch]);
                        ai += g[ch] as f64 * s as f64;
                        graw[ch] = w[i] * g[ch] * s * (1.0 - s);
                    }
                    if let Some(pg) = out.rgb.as_mut() {
                        k.scatter_vector(pg, 3, &graw);
                    }
                }
                a[i] = ai;
            }

            if let Some(pg) = out.density.as_mut() {
                // suffix = sum_{i>k} w_i a_i
                let mut suffix = 0.0f64;
                for k in (0..n).rev() {
                    if let Some(cn) = corners[k] {
                        let dx = trans[k + 1] * a[k] - suffix;
                        let dsigma = dx * deltas[k] as f64;
                        let draw = dsigma * self.density_slope(raw[k]) as f64;
                        cn.scatter_scalar(pg, draw as f32);
                    }
                    suffix += w[k] as f64 * a[k];
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}
