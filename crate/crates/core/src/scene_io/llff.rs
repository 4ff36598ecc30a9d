//! LLFF forward-facing scenes: `poses_bounds.npy` (N x 17 float64) plus an `images/` folder.
//!
//! Each row holds a 3x5 matrix in row-major order followed by the near and far bounds. The
//! first three columns are the camera axes in LLFF's (down, right, backward) order, the fourth
//! is the camera center and the fifth is `(height, width, focal)` at full resolution. We
//! convert to (right, up, backward), i.e. `[c1, -c0, c2]`. Poses are used as stored: no
//! recentering and no bound rescaling.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use npyz::WriterBuilder;

use crate::error::{Error, Result};
use crate::image::Image;

use super::{Aabb, Camera, Intrinsics, SceneDataset, Split, View};

/// Every `LLFF_HOLDOUT`-th view is tagged as validation.
const LLFF_HOLDOUT: usize = 8;

/// Decodes one 17-float row into a full-resolution camera.
pub fn decode_llff_row(row: &[f64]) -> Result<Camera> {
    if row.len() != 17 {
        return Err(Error::Shape(format!("LLFF pose rows have 17 values, got {}", row.len())));
    }
    let m = |r: usize, c: usize| row[r * 5 + c] as f32;
    let (h, w, focal) = (m(0, 4), m(1, 4), m(2, 4));
    let mut c2w = [[0.0f32; 4]; 3];
    for r in 0..3 {
        c2w[r] = [m(r, 1), -m(r, 0), m(r, 2), m(r, 3)];
    }
    let k = Intrinsics::centered(focal, w.round() as usize, h.round() as usize);
    Camera::new(k, c2w, row[15] as f32, row[16] as f32)
}

/// Inverse of [`decode_llff_row`].
pub fn encode_llff_row(cam: &Camera) -> [f64; 17] {
    let mut row = [0.0f64; 17];
    let k = &cam.intrinsics;
    let hwf = [k.height as f64, k.width as f64, k.focal as f64];
    for r in 0..3 {
        let c = &cam.c2w[r];
        let cols = [-c[1], c[0], c[2], c[3]];
        for (ci, v) in cols.iter().enumerate() {
            row[r * 5 + ci] = *v as f64;
        }
        row[r * 5 + 4] = hwf[r];
    }
    row[15] = cam.near as f64;
    row[16] = cam.far as f64;
    row
}

pub fn write_llff_poses(path: &Path, cameras: &[Camera]) -> Result<()> {
    let mut file = std::io::BufWriter::new(File::create(path)?);
    let mut writer = npyz::WriteOptions::<f64>::new()
        .default_dtype()
        .shape(&[cameras.len() as u64, 17])
        .writer(&mut file)
        .begin_nd()?;
    for cam in cameras {
        writer.extend(encode_llff_row(cam))?;
    }
    writer.finish()?;
    Ok(())
}

fn read_pose_rows(path: &Path) -> Result<Vec<[f64; 17]>> {
    let file = File::open(path).map_err(|e| Error::format(path, format!("missing LLFF pose file: {e}")))?;
    let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 2 || shape[1] != 17 {
        return Err(Error::format(path, format!("expected an N x 17 array, got shape {shape:?}")));
    }
    let values: Vec<f64> = match npy.dtype() {
        npyz::DType::Plain(t) if t.size_field() == 4 => npy
            .into_vec::<f32>()
            .map_err(|e| Error::format(path, e.to_string()))?
            .into_iter()
            .map(f64::from)
            .collect(),
        _ => npy.into_vec::<f64>().map_err(|e| Error::format(path, e.to_string()))?,
    };
    Ok(values
        .chunks_exact(17)
        .map(|c| {
            let mut row = [0.0; 17];
            row.copy_from_slice(c);
            row
        })
        .collect())
}

pub(crate) fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::format(dir, format!("cannot list images: {e}")))? {
        let path = entry?.path();
        if is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub(crate) fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Loads an LLFF scene. A pre-downsampled `images_{factor}` folder is used when present,
/// otherwise full-resolution images are box-filtered.
pub fn load_llff_scene(root: &Path, downsample: usize) -> Result<SceneDataset> {
    if downsample == 0 {
        return Err(Error::Config("downsample must be a positive integer".into()));
    }
    let rows = read_pose_rows(&root.join("poses_bounds.npy"))?;
    let pre = root.join(format!("images_{downsample}"));
    let (image_dir, prescaled) = if downsample > 1 && pre.is_dir() {
        (pre, true)
    } else {
        (root.join("images"), false)
    };
    let files = list_images(&image_dir)?;
    if files.len() != rows.len() {
        return Err(Error::Consistency(format!(
            "{} images in {} but {} pose rows",
            files.len(),
            image_dir.display(),
            rows.len()
        )));
    }

    let mut views = Vec::with_capacity(rows.len());
    for (i, (row, file)) in rows.iter().zip(&files).enumerate() {
        let full = decode_llff_row(row)?;
        let mut image = Image::load(file, false)?;
        if !prescaled {
            image = image.downsample(downsample)?;
        }
        // hwf is stored at full resolution; scale focal by the actual image size
        let scale = full.intrinsics.height as f32 / image.height() as f32;
        let k = Intrinsics {
            focal: full.intrinsics.focal / scale,
            cx: image.width() as f32 * 0.5,
            cy: image.height() as f32 * 0.5,
            width: image.width(),
            height: image.height(),
        };
        let camera = full.with_intrinsics(k);
        let split = if i % LLFF_HOLDOUT == 0 && rows.len() > LLFF_HOLDOUT {
            Split::Val
        } else {
            Split::Train
        };
        let name = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("view_{i:03}"));
        views.push(View {
            name,
            image,
            camera,
            split,
        });
    }
    let bbox = Aabb::around_frusta(views.iter().map(|v| &v.camera))?;
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "llff".into());
    SceneDataset::new(name, views, bbox)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_round_trip() {
        let cam = Camera::look_at(
            Intrinsics::centered(40.0, 20, 10),
            [0.3, 0.2, 2.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            1.0,
            4.0,
        )
        .unwrap();
        let back = decode_llff_row(&encode_llff_row(&cam)).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((back.c2w[r][c] - cam.c2w[r][c]).abs() < 1e-6);
            }
        }
        assert_eq!(back.intrinsics, cam.intrinsics);
    }

    #[test]
    fn axis_convention_matches_hand_decoding() {
        // LLFF columns (down, right, back) = (-y, +x, +z): identity pose in our convention.
        let mut row = [0.0f64; 17];
        let rows3 = [[0.0, 1.0, 0.0, 0.0, 8.0], [-1.0, 0.0, 0.0, 0.0, 8.0], [0.0, 0.0, 1.0, 0.0, 10.0]];
        for r in 0..3 {
            for c in 0..5 {
                row[r * 5 + c] = rows3[r][c];
            }
        }
        row[15] = 0.5;
        row[16] = 5.0;
        let cam = decode_llff_row(&row).unwrap();
        assert_eq!(cam.right(), [1.0, 0.0, 0.0]);
        assert_eq!(cam.up(), [0.0, 1.0, 0.0]);
        assert_eq!(cam.backward(), [0.0, 0.0, 1.0]);
    }
}
