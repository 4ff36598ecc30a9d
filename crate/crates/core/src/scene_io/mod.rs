//! Posed multi-view scenes, camera rays and style-image corpora.

mod blender;
mod camera;
mod corpus;
mod llff;
mod rays;

pub use blender::{load_blender_scene, write_blender_scene, BlenderExtras};
pub use camera::{Aabb, Camera, Intrinsics};
pub use corpus::{load_style_corpus, StyleCorpus};
pub use llff::{decode_llff_row, encode_llff_row, load_llff_scene, write_llff_poses};
pub use rays::{generate_rays, PixelSelection, RayBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub image: Image,
    pub camera: Camera,
    pub split: Split,
}

/// Posed images sharing one resolution. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub name: String,
    pub views: Vec<View>,
    pub bbox: Aabb,
}

impl SceneDataset {
    pub fn new(name: impl Into<String>, views: Vec<View>, bbox: Aabb) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::Consistency(format!("a scene needs at least 2 views, got {}", views.len())));
        }
        let (w, h) = (views[0].image.width(), views[0].image.height());
        for v in &views {
            if v.image.width() != w || v.image.height() != h {
                return Err(Error::Consistency(format!(
                    "view {} is {}x{}, expected {w}x{h}",
                    v.name,
                    v.image.width(),
                    v.image.height()
                )));
            }
            let k = &v.camera.intrinsics;
            if k.width != w || k.height != h {
                return Err(Error::Consistency(format!(
                    "view {} camera is {}x{} but image is {w}x{h}",
                    v.name, k.width, k.height
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            views,
            bbox,
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.views[0].image.width(), self.views[0].image.height())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == split).collect()
    }

    pub fn view(&self, index: usize) -> Result<&View> {
        self.views.get(index).ok_or(Error::OutOfRange {
            index,
            len: self.views.len(),
        })
    }
}
