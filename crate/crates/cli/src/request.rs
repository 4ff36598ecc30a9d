//! The render request shared by `conrf render` and `POST /render`, so both paths build the same
//! [`RenderSpec`] for equivalent inputs.

use std::collections::{BTreeMap, HashMap};
use std::sync::RwLock;

use base64::Engine;
use conrf_core::image::Image;
use conrf_core::pipeline::{LocalSpec, Pose, RenderSpec, Rendered, StyleInput, DEFAULT_RENDER_SAMPLES};
use conrf_core::scene_io::Camera;
use conrf_core::style_core::StyleStatistics;
use conrf_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSpec {
    View(String),
    Camera(Camera),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    Text(String),
    /// An image previously uploaded to the style store.
    ImageId(String),
    /// An encoded PNG or JPEG.
    ImageBase64(String),
    Stats { mean: Vec<f32>, std: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    /// Required only when several checkpoints are loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub pose: PoseSpec,
    pub style: Option<StyleSource>,
    /// Style for everything outside the region selected by `content`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style2: Option<StyleSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
}

fn default_threshold() -> f32 {
    DEFAULT_THRESHOLD
}

impl RenderRequest {
    pub fn new(pose: PoseSpec, style: Option<StyleSource>) -> Self {
        Self {
            checkpoint: None,
            pose,
            style,
            style2: None,
            content: None,
            threshold: DEFAULT_THRESHOLD,
            width: None,
            height: None,
            n_samples: None,
        }
    }

    /// A second style needs a content prompt and a content prompt needs a second style.
    pub fn validate(&self) -> Result<()> {
        match (&self.style2, &self.content) {
            (Some(_), None) => return Err(Error::Config("two styles need a content prompt".into())),
            (None, Some(_)) => return Err(Error::Config("a content prompt needs a second style".into())),
            _ => {}
        }
        if self.style2.is_some() && self.style.is_none() {
            return Err(Error::Config("style2 given without style".into()));
        }
        if self.width.is_some() != self.height.is_some() {
            return Err(Error::Config("width and height must be given together".into()));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} is outside [-1, 1]", self.threshold)));
        }
        Ok(())
    }

    pub fn to_spec(&self, store: &StyleStore) -> Result<RenderSpec> {
        self.validate()?;
        let pose = match &self.pose {
            PoseSpec::View(name) => Pose::View(name.clone()),
            PoseSpec::Camera(c) => Pose::Camera(Camera::new(c.intrinsics, c.c2w, c.near, c.far)?),
        };
        let mut spec = RenderSpec::new(pose);
        spec.style = self.style.as_ref().map(|s| store.resolve(s)).transpose()?;
        if let (Some(bg), Some(content)) = (&self.style2, &self.content) {
            spec.local = Some(LocalSpec {
                content: content.clone(),
                threshold: self.threshold,
                background: store.resolve(bg)?,
            });
        }
        spec.resolution = self.width.zip(self.height);
        spec.n_samples = self.n_samples.unwrap_or(DEFAULT_RENDER_SAMPLES);
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub checkpoint: String,
    pub width: usize,
    pub height: usize,
    /// Base64 PNG.
    pub image: String,
    /// Base64 PNG of the image with the selected region tinted, for local renders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_overlay: Option<String>,
    /// Fraction of the frame selected, for local renders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_coverage: Option<f32>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RenderResponse {
    pub fn new(checkpoint: &str, rendered: &Rendered) -> Result<Self> {
        let b64 = base64::engine::general_purpose::STANDARD;
        Ok(Self {
            checkpoint: checkpoint.to_string(),
            width: rendered.image.width(),
            height: rendered.image.height(),
            image: b64.encode(rendered.image.to_png_bytes()?),
            mask_overlay: rendered
                .overlay
                .as_ref()
                .map(|o| o.to_png_bytes().map(|b| b64.encode(b)))
                .transpose()?,
            mask_coverage: rendered.mask.as_ref().map(|m| m.coverage()),
            timings: rendered.timings.clone(),
        })
    }
}

/// Decodes an uploaded style image; transparency is composited onto white.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    Image::from_png_bytes(bytes).map_err(|e| Error::Config(format!("cannot decode style image: {e}")))
}

/// Uploaded style images keyed by content hash.
#[derive(Debug, Default)]
pub struct StyleStore {
    images: RwLock<HashMap<String, Image>>,
}

impl StyleStore {
    pub fn insert(&self, image: Image) -> String {
        let id = image.content_hash();
        self.images.write().expect("style store lock").insert(id.clone(), image);
        id
    }

    pub fn get(&self, id: &str) -> Option<Image> {
        self.images.read().expect("style store lock").get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.images.read().expect("style store lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn resolve(&self, source: &StyleSource) -> Result<StyleInput> {
        Ok(match source {
            StyleSource::Text(t) => {
                if t.trim().is_empty() {
                    return Err(Error::Config("style text is empty".into()));
                }
                StyleInput::Text(t.clone())
            }
            StyleSource::ImageId(id) => StyleInput::Image(
                self.get(id)
                    .ok_or_else(|| Error::Config(format!("unknown style image id {id:?}")))?,
            ),
            StyleSource::ImageBase64(data) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(data.trim())
                    .map_err(|e| Error::Config(format!("style image is not valid base64: {e}")))?;
                StyleInput::Image(decode_image(&bytes)?)
            }
            StyleSource::Stats { mean, std } => StyleInput::Stats(
                StyleStatistics::new(mean.clone(), std.clone()).map_err(|e| Error::Config(e.to_string()))?,
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> RenderRequest {
        RenderRequest::new(PoseSpec::View("r_000".into()), Some(StyleSource::Text("red".into())))
    }

    #[test]
    fn local_mode_needs_content_and_second_style() {
        let mut r = req();
        r.validate().unwrap();
        r.style2 = Some(StyleSource::Text("blue".into()));
        assert!(r.validate().is_err());
        r.content = Some("red ball".into());
        r.validate().unwrap();
        r.style2 = None;
        assert!(r.validate().is_err());
        r.style2 = Some(StyleSource::Text("blue".into()));
        r.threshold = -1.5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn json_shape() {
        let r: RenderRequest = serde_json::from_str(
            r#"{"pose": {"view": "r_001"}, "style": {"text": "blue waves"}, "width": 32, "height": 32}"#,
        )
        .unwrap();
        assert_eq!(r.threshold, DEFAULT_THRESHOLD);
        assert_eq!(r.pose, PoseSpec::View("r_001".into()));
        let spec = r.to_spec(&StyleStore::default()).unwrap();
        assert_eq!(spec.resolution, Some((32, 32)));
        assert_eq!(spec.style, Some(StyleInput::Text("blue waves".into())));
        assert!(serde_json::from_str::<RenderRequest>(r#"{"pose": {"view": "a"}, "style": null, "bogus": 1}"#).is_err());
    }

    #[test]
    fn store_resolves_uploads_and_inline_images() {
        let store = StyleStore::default();
        let img = Image::from_fn(4, 4, |x, y| [x as f32 / 3.0, y as f32 / 3.0, 0.0]);
        let png = img.to_png_bytes().unwrap();
        let id = store.insert(decode_image(&png).unwrap());
        assert_eq!(store.ids(), vec![id.clone()]);
        let by_id = store.resolve(&StyleSource::ImageId(id)).unwrap();
        let inline = store
            .resolve(&StyleSource::ImageBase64(base64::engine::general_purpose::STANDARD.encode(&png)))
            .unwrap();
        assert_eq!(by_id, inline);
        assert!(store.resolve(&StyleSource::ImageId("nope".into())).is_err());
        assert!(store.resolve(&StyleSource::ImageBase64("!!".into())).is_err());
        assert!(store
            .resolve(&StyleSource::Stats {
                mean: vec![0.0],
                std: vec![-1.0]
            })
            .is_err());
    }
}
