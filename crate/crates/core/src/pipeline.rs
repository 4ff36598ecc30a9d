//! Inference: stylized novel-view rendering from a checkpoint, globally or with a text-selected
//! region carrying a second style.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::encoders::EncoderSet;
use crate::error::{Error, Result};
use crate::evaluation::{consistency_report, ConsistencyReport, PairPolicy, PerceptualMetric};
use crate::feature_field::Heads;
use crate::image::Image;
use crate::math;
use crate::scene_io::{Camera, Intrinsics};
use crate::selection::{local_transfer_deferred, mask_from_similarity, similarity_map, SelectionMask};
use crate::style_core::{planar_to_ray_major, ray_major_to_planar, render_features, FeatureImage, StyleStatistics};
use crate::training::{Checkpoint, Stage};

/// Samples per ray when a request does not say.
pub const DEFAULT_RENDER_SAMPLES: usize = 96;
const OVERLAY_TINT: [f32; 3] = [1.0, 0.1, 0.1];
const OVERLAY_ALPHA: f32 = 0.45;

#[derive(Clone, Debug, PartialEq)]
pub enum StyleInput {
    Text(String),
    Image(Image),
    Stats(StyleStatistics),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pose {
    /// A camera stored in the checkpoint, by name.
    View(String),
    Camera(Camera),
}

/// Second style applied outside the region selected by a content prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSpec {
    pub content: String,
    pub threshold: f32,
    pub background: StyleInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    pub pose: Pose,
    /// `None` decodes the unstylized content.
    pub style: Option<StyleInput>,
    /// Restricts `style` to the region matching the content prompt.
    pub local: Option<LocalSpec>,
    /// Output `(width, height)`; defaults to the pose's resolution.
    pub resolution: Option<(usize, usize)>,
    pub n_samples: usize,
}

impl RenderSpec {
    pub fn new(pose: Pose) -> Self {
        Self {
            pose,
            style: None,
            local: None,
            resolution: None,
            n_samples: DEFAULT_RENDER_SAMPLES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if let Some(local) = &self.local {
            if self.style.is_none() {
                return Err(Error::Config("a local render needs a foreground style".into()));
            }
            if local.content.trim().is_empty() {
                return Err(Error::Config("a local render needs a content prompt".into()));
            }
            if !(-1.0..=1.0).contains(&local.threshold) {
                return Err(Error::Config(format!("threshold {} is outside [-1, 1]", local.threshold)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    /// Selection at feature resolution, for local renders.
    pub mask: Option<SelectionMask>,
    /// `image` with the selected region tinted, at output resolution.
    pub overlay: Option<Image>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

/// The checkpoint's camera scaled to a new resolution with the same aspect ratio.
pub fn resize_camera(camera: &Camera, width: usize, height: usize) -> Result<Camera> {
    let k = camera.intrinsics;
    if width == 0 || height == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let sx = width as f32 / k.width as f32;
    let sy = height as f32 / k.height as f32;
    if (sx - sy).abs() > 1e-3 * sx.max(sy) {
        return Err(Error::Config(format!(
            "{width}x{height} changes the {}x{} aspect ratio",
            k.width, k.height
        )));
    }
    Ok(camera.with_intrinsics(Intrinsics {
        focal: k.focal * sx,
        cx: k.cx * sx,
        cy: k.cy * sy,
        width,
        height,
    }))
}

/// `n` cameras on a circle around the mean of `cameras`, in the plane facing their mean
/// viewing direction, all looking at the point midway through the mean depth range.
pub fn orbit_path(cameras: &[Camera], n: usize) -> Result<Vec<Camera>> {
    let first = cameras.first().ok_or_else(|| Error::Empty("no cameras to orbit".into()))?;
    let m = cameras.len() as f32;
    let mut center = [0.0f32; 3];
    let mut forward = [0.0f32; 3];
    let mut up = [0.0f32; 3];
    let (mut near, mut far) = (0.0, 0.0);
    for c in cameras {
        center = math::add(center, math::scale(c.position(), 1.0 / m));
        forward = math::add(forward, c.forward());
        up = math::add(up, c.up());
        near += c.near / m;
        far += c.far / m;
    }
    let forward = math::normalize(forward);
    let up = math::normalize(up);
    let right = math::normalize(math::cross(forward, up));
    let up = math::cross(right, forward);
    let radius = cameras
        .iter()
        .map(|c| math::norm(math::sub(c.position(), center)))
        .fold(0.0f32, f32::max)
        .max(1e-3 * (far - near));
    let target = math::add(center, math::scale(forward, 0.5 * (near + far)));
    (0..n)
        .map(|i| {
            let a = std::f32::consts::TAU * i as f32 / n as f32;
            let eye = math::add(
                center,
                math::add(math::scale(right, radius * a.cos()), math::scale(up, radius * a.sin())),
            );
            Camera::look_at(first.intrinsics, eye, target, up, near, far)
        })
        .collect()
}

/// Renders a checkpoint. Read-only and safe to share across threads; resolved style
/// statistics are memoized by input.
pub struct Renderer {
    checkpoint: Arc<Checkpoint>,
    encoders: EncoderSet,
    id: String,
    memo: Mutex<HashMap<String, StyleStatistics>>,
}

impl std::fmt::Debug for Renderer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Renderer").field("id", &self.id).finish()
    }
}

impl Renderer {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let encoders = EncoderSet::build(&checkpoint.manifest.encoders)?;
        Self::with_encoders(checkpoint, encoders)
    }

    pub fn with_encoders(checkpoint: Checkpoint, encoders: EncoderSet) -> Result<Self> {
        if !checkpoint.has_stage(Stage::Field) {
            return Err(Error::Checkpoint("checkpoint has no trained field".into()));
        }
        let stride = encoders.style.feature_stride();
        if checkpoint.decoder.stride() != stride {
            return Err(Error::Config(format!(
                "decoder stride {} does not match the feature stride {stride}",
                checkpoint.decoder.stride()
            )));
        }
        Ok(Self {
            id: checkpoint.id()?,
            checkpoint: Arc::new(checkpoint),
            encoders,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn encoders(&self) -> &EncoderSet {
        &self.encoders
    }

    pub fn supports_local(&self) -> bool {
        self.checkpoint.has_stage(Stage::Select) && self.checkpoint.field.clip.is_some()
    }

    pub fn camera(&self, pose: &Pose) -> Result<Camera> {
        match pose {
            Pose::View(name) => self
                .checkpoint
                .view(name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown view {name:?}"))),
            Pose::Camera(c) => Ok(c.clone()),
        }
    }

    /// Statistics for a style input: text and images go through the joint encoder and the
    /// mapping network, raw statistics are used as given.
    pub fn style_stats(&self, input: &StyleInput) -> Result<StyleStatistics> {
        let key = match input {
            StyleInput::Stats(s) => {
                if s.channels() != self.checkpoint.field.feature_channels() {
                    return Err(Error::Config(format!(
                        "style statistics have {} channels, the field has {}",
                        s.channels(),
                        self.checkpoint.field.feature_channels()
                    )));
                }
                return Ok(s.clone());
            }
            StyleInput::Text(t) => format!("text:{t}"),
            StyleInput::Image(img) => format!("image:{}", img.content_hash()),
        };
        if let Some(s) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(s.clone());
        }
        if !self.checkpoint.has_stage(Stage::Stylize) {
            return Err(Error::Checkpoint("checkpoint has no trained mapping network".into()));
        }
        let emb = match input {
            StyleInput::Text(t) => self.encoders.text.encode_text(t)?,
            StyleInput::Image(img) => self.encoders.image.encode_image(img)?,
            StyleInput::Stats(_) => unreachable!(),
        };
        let stats = self.checkpoint.mapping.map(&emb)?;
        self.memo.lock().expect("memo lock").insert(key, stats.clone());
        Ok(stats)
    }

    pub fn render(&self, spec: &RenderSpec) -> Result<Rendered> {
        spec.validate()?;
        let mut timings = BTreeMap::new();
        let mut clock = Instant::now();
        let mut lap = |name: &str, timings: &mut BTreeMap<String, f64>| {
            timings.insert(name.to_string(), clock.elapsed().as_secs_f64());
            clock = Instant::now();
        };

        let mut camera = self.camera(&spec.pose)?;
        if let Some((w, h)) = spec.resolution {
            camera = resize_camera(&camera, w, h)?;
        }
        let stride = self.checkpoint.decoder.stride();
        let k = camera.intrinsics;
        if k.width % stride != 0 || k.height % stride != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} must be a multiple of {stride}",
                k.width, k.height
            )));
        }
        let style = spec.style.as_ref().map(|s| self.style_stats(s)).transpose()?;
        let background = spec.local.as_ref().map(|l| self.style_stats(&l.background)).transpose()?;
        lap("style", &mut timings);

        let heads = if spec.local.is_some() {
            if !self.supports_local() {
                return Err(Error::Capability("local stylization needs a checkpoint with a trained selection head".into()));
            }
            Heads::FEATURE.with(Heads::CLIP)
        } else {
            Heads::FEATURE
        };
        let (features, bundle) = render_features(&self.checkpoint.field, &camera, stride, spec.n_samples, heads)?;
        lap("render", &mut timings);

        let (stylized, mask) = match (&spec.local, style, background) {
            (Some(local), Some(fg), Some(bg)) => {
                let query = self.encoders.text.encode_text(&local.content)?;
                let z = similarity_map(&query, bundle.clip.as_deref().unwrap_or_default())?;
                let mask = mask_from_similarity(&z, local.threshold)?;
                let n = features.width * features.height;
                let c = features.channels;
                let mixed = local_transfer_deferred(
                    &planar_to_ray_major(&features.values, n, c),
                    &features.acc,
                    &mask.weights(),
                    &fg,
                    &bg,
                )?;
                let out = FeatureImage {
                    values: ray_major_to_planar(&mixed, n, c),
                    ..features
                };
                (out, Some(mask))
            }
            (_, Some(s), _) => (features.transfer(&s)?, None),
            _ => (features.transfer(&self.checkpoint.content_stats)?, None),
        };
        lap("transfer", &mut timings);

        let image = self.checkpoint.decoder.decode(&stylized)?;
        lap("decode", &mut timings);
        let overlay = mask.as_ref().map(|m| mask_overlay(&image, &m.mask, stylized.width, stylized.height));
        Ok(Rendered {
            image,
            mask,
            overlay,
            timings,
        })
    }

    /// Expected-depth image of the field from a pose, at the pose's resolution.
    pub fn render_depth(&self, camera: &Camera, n_samples: usize) -> Result<Vec<f32>> {
        let rays = camera.rays(&crate::scene_io::PixelSelection::Full)?;
        let bundle = self.checkpoint.field.render_rays(&rays, n_samples, Heads::DEPTH)?;
        Ok(bundle.depth.unwrap_or_default())
    }

    /// Renders every stored view in order with the same style and scores multi-view
    /// consistency of the sequence.
    pub fn consistency(
        &self,
        style: Option<StyleInput>,
        policy: &PairPolicy,
        metric: Option<&dyn PerceptualMetric>,
        n_samples: usize,
    ) -> Result<ConsistencyReport> {
        let mut images = Vec::new();
        let mut depths = Vec::new();
        let mut cameras = Vec::new();
        for view in &self.checkpoint.manifest.views {
            let mut spec = RenderSpec::new(Pose::Camera(view.camera.clone()));
            spec.style = style.clone();
            spec.n_samples = n_samples;
            images.push(self.render(&spec)?.image);
            depths.push(self.render_depth(&view.camera, n_samples)?);
            cameras.push(view.camera.clone());
        }
        consistency_report(&images, &depths, &cameras, policy, metric)
    }
}

/// Tints the pixels whose nearest mask cell is selected.
pub fn mask_overlay(image: &Image, mask: &[bool], mask_width: usize, mask_height: usize) -> Image {
    let (w, h) = (image.width(), image.height());
    Image::from_fn(w, h, |x, y| {
        let mx = (x * mask_width / w).min(mask_width - 1);
        let my = (y * mask_height / h).min(mask_height - 1);
        let p = image.pixel(x, y);
        if mask[my * mask_width + mx] {
            [0, 1, 2].map(|c| p[c] * (1.0 - OVERLAY_ALPHA) + OVERLAY_TINT[c] * OVERLAY_ALPHA)
        } else {
            p
        }
    })
}
