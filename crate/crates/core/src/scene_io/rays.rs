use crate::error::{Error, Result};
use crate::math::Vec3;

use super::{Camera, SceneDataset};

/// Which pixels of a view to shoot rays through.
#[derive(Clone, Debug, PartialEq)]
pub enum PixelSelection {
    /// Every pixel center, row-major.
    Full,
    /// Explicit `(x, y)` pixel indices; rays go through their centers.
    Pixels(Vec<(usize, usize)>),
    /// Centers of non-overlapping `stride x stride` blocks, row-major. This is the lattice
    /// feature maps are rendered on.
    Strided(usize),
}

/// A batch of rays with unit directions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: Vec<f32>,
    pub far: Vec<f32>,
    /// Continuous image-plane coordinates each ray passes through.
    pub pixels: Vec<[f32; 2]>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn push(&mut self, origin: Vec3, direction: Vec3, near: f32, far: f32, pixel: [f32; 2]) {
        self.origins.push(origin);
        self.directions.push(direction);
        self.near.push(near);
        self.far.push(far);
        self.pixels.push(pixel);
    }

    /// Sub-batch by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> RayBatch {
        let mut out = RayBatch::default();
        for &i in idx {
            out.push(self.origins[i], self.directions[i], self.near[i], self.far[i], self.pixels[i]);
        }
        out
    }

    pub fn extend(&mut self, other: &RayBatch) {
        self.origins.extend_from_slice(&other.origins);
        self.directions.extend_from_slice(&other.directions);
        self.near.extend_from_slice(&other.near);
        self.far.extend_from_slice(&other.far);
        self.pixels.extend_from_slice(&other.pixels);
    }
}

impl Camera {
    /// Shoots one ray per selected pixel, through its center.
    pub fn rays(&self, selection: &PixelSelection) -> Result<RayBatch> {
        let k = &self.intrinsics;
        let mut batch = RayBatch::default();
        let mut shoot = |u: f32, v: f32| {
            batch.push(self.position(), self.direction(u, v), self.near, self.far, [u, v]);
        };
        match selection {
            PixelSelection::Full => {
                for y in 0..k.height {
                    for x in 0..k.width {
                        shoot(x as f32 + 0.5, y as f32 + 0.5);
                    }
                }
            }
            PixelSelection::Pixels(px) => {
                for &(x, y) in px {
                    if x >= k.width || y >= k.height {
                        return Err(Error::OutOfRange {
                            index: y * k.width + x,
                            len: k.width * k.height,
                        });
                    }
                    shoot(x as f32 + 0.5, y as f32 + 0.5);
                }
            }
            PixelSelection::Strided(s) => {
                let s = *s;
                if s == 0 || k.width % s != 0 || k.height % s != 0 {
                    return Err(Error::Config(format!(
                        "stride {s} must divide the {}x{} resolution",
                        k.width, k.height
                    )));
                }
                let half = s as f32 * 0.5;
                for by in 0..k.height / s {
                    for bx in 0..k.width / s {
                        shoot((bx * s) as f32 + half, (by * s) as f32 + half);
                    }
                }
            }
        }
        Ok(batch)
    }
}

/// Rays for view `view` of a dataset.
pub fn generate_rays(dataset: &SceneDataset, view: usize, selection: &PixelSelection) -> Result<RayBatch> {
    let v = dataset.views.get(view).ok_or(Error::OutOfRange {
        index: view,
        len: dataset.views.len(),
    })?;
    v.camera.rays(selection)
}
