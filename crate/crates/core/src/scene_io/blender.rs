//! Blender / Synthetic-NeRF style scenes: `transforms_{split}.json` next to the frame images.
//!
//! Transparent pixels are composited onto white. Besides the standard `camera_angle_x` and
//! `frames[].transform_matrix` (row-major 4x4, camera-to-world, OpenGL axes) the manifest may
//! carry optional `near`, `far` and `aabb` (`[[min], [max]]`) fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::Vec3;

use super::{Aabb, Camera, Intrinsics, SceneDataset, Split, View};

const DEFAULT_NEAR: f32 = 2.0;
const DEFAULT_FAR: f32 = 6.0;
const DEFAULT_HALF_EXTENT: f32 = 1.5;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    camera_angle_x: f64,
    frames: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    far: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aabb: Option<[Vec3; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

/// Optional manifest fields beyond the standard layout.
#[derive(Clone, Debug, Default)]
pub struct BlenderExtras {
    pub near: Option<f32>,
    pub far: Option<f32>,
    pub aabb: Option<Aabb>,
}

fn frame_path(root: &Path, file_path: &str) -> PathBuf {
    let rel = file_path.trim_start_matches("./");
    let p = root.join(rel);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

pub fn load_blender_scene(root: &Path, split: Split) -> Result<SceneDataset> {
    let manifest_path = root.join(format!("transforms_{}.json", split.as_str()));
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(&manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, format!("malformed manifest: {e}")))?;
    if !(manifest.camera_angle_x > 0.0 && manifest.camera_angle_x < std::f64::consts::PI) {
        return Err(Error::format(&manifest_path, "camera_angle_x must lie in (0, pi)"));
    }
    let near = manifest.near.unwrap_or(DEFAULT_NEAR);
    let far = manifest.far.unwrap_or(DEFAULT_FAR);

    let mut views = Vec::with_capacity(manifest.frames.len());
    for (i, frame) in manifest.frames.iter().enumerate() {
        let path = frame_path(root, &frame.file_path);
        if !path.is_file() {
            return Err(Error::format(&path, "frame image not found"));
        }
        let image = Image::load(&path, true)?;
        let w = image.width();
        let focal = (0.5 * w as f64 / (0.5 * manifest.camera_angle_x).tan()) as f32;
        let m = &frame.transform_matrix;
        let mut c2w = [[0.0f32; 4]; 3];
        for r in 0..3 {
            for c in 0..4 {
                c2w[r][c] = m[r][c] as f32;
            }
        }
        let camera = Camera::new(Intrinsics::centered(focal, w, image.height()), c2w, near, far)
            .map_err(|e| Error::format(&manifest_path, format!("frame {i}: {e}")))?;
        let name = Path::new(&frame.file_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}_{i:03}", split.as_str()));
        views.push(View {
            name,
            image,
            camera,
            split,
        });
    }
    let bbox = match manifest.aabb {
        Some([min, max]) => Aabb::new(min, max)?,
        None => Aabb::new([-DEFAULT_HALF_EXTENT; 3], [DEFAULT_HALF_EXTENT; 3])?,
    };
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "blender".into());
    SceneDataset::new(name, views, bbox)
}

/// Writes views as a Blender-format split. All views must share the horizontal field of view.
pub fn write_blender_scene(root: &Path, split: Split, views: &[View], extras: &BlenderExtras) -> Result<()> {
    let first = views.first().ok_or_else(|| Error::Empty("no views to write".into()))?;
    let k = &first.camera.intrinsics;
    let camera_angle_x = 2.0 * (0.5 * k.width as f64 / k.focal as f64).atan();
    let dir = root.join(split.as_str());
    std::fs::create_dir_all(&dir)?;
    let mut frames = Vec::with_capacity(views.len());
    for v in views {
        let rel = format!("./{}/{}", split.as_str(), v.name);
        v.image.save_png(&frame_path(root, &rel))?;
        let mut m = [[0.0f64; 4]; 4];
        for r in 0..3 {
            for c in 0..4 {
                m[r][c] = v.camera.c2w[r][c] as f64;
            }
        }
        m[3][3] = 1.0;
        frames.push(Frame {
            file_path: rel,
            transform_matrix: m,
        });
    }
    let manifest = Manifest {
        camera_angle_x,
        frames,
        near: extras.near,
        far: extras.far,
        aabb: extras.aabb.map(|b| [b.min, b.max]),
    };
    std::fs::write(
        root.join(format!("transforms_{}.json", split.as_str())),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}
