//! Procedural data: a ray-traced forward-facing scene with two labelled objects, and a corpus
//! of two-color pattern images that serves as a style set.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{make_toy_encoders, ImageEncoder, ToySpec, VocabEntry};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{self, Vec3};
use crate::scene_io::{
    load_blender_scene, write_blender_scene, Aabb, BlenderExtras, Camera, Intrinsics, SceneDataset, Split, View,
};

const FLOOR_Y: f32 = -0.5;
const WALL_Z: f32 = -1.0;
const LIGHT: Vec3 = [-0.4, 0.8, 0.5];
const SKY: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneConfig {
    pub width: usize,
    pub height: usize,
    /// Views on a square grid, visited in serpentine order so consecutive indices are neighbors.
    pub grid: usize,
    pub focal: f32,
    /// Samples per pixel side for anti-aliasing.
    pub supersample: usize,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            grid: 4,
            focal: 80.0,
            supersample: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyObject {
    pub caption: String,
    pub color: [f32; 3],
}

/// The toy scene plus per-view ground-truth object masks.
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub dataset: SceneDataset,
    pub objects: Vec<ToyObject>,
    /// `masks[object][view]`, row-major pixel flags.
    pub masks: Vec<Vec<Vec<bool>>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Hit {
    Sky,
    Floor,
    Wall,
    Object(usize),
}

struct Sphere {
    center: Vec3,
    radius: f32,
}

struct Cuboid {
    min: Vec3,
    max: Vec3,
}

struct Geometry {
    bbox: Aabb,
    sphere: Sphere,
    cuboid: Cuboid,
}

fn toy_bbox() -> Aabb {
    Aabb::new([-2.0, -0.6, -1.1], [2.0, 2.0, 1.0]).expect("valid box")
}

fn toy_objects() -> Vec<ToyObject> {
    vec![
        ToyObject {
            caption: "red ball".into(),
            color: [0.85, 0.12, 0.1],
        },
        ToyObject {
            caption: "blue box".into(),
            color: [0.12, 0.22, 0.85],
        },
    ]
}

impl Geometry {
    fn new() -> Self {
        Self {
            bbox: toy_bbox(),
            sphere: Sphere {
                center: [-0.5, -0.05, -0.2],
                radius: 0.45,
            },
            cuboid: Cuboid {
                min: [0.25, FLOOR_Y, -0.3],
                max: [0.85, 0.2, 0.3],
            },
        }
    }

    fn trace(&self, o: Vec3, d: Vec3) -> (Hit, f32, Vec3) {
        let mut best = (Hit::Sky, f32::INFINITY, [0.0; 3]);
        // sphere
        let oc = math::sub(o, self.sphere.center);
        let b = math::dot(oc, d);
        let c = math::dot(oc, oc) - self.sphere.radius * self.sphere.radius;
        let disc = b * b - c;
        if disc >= 0.0 {
            let t = -b - disc.sqrt();
            if t > 0.0 && t < best.1 {
                let p = math::add(o, math::scale(d, t));
                best = (Hit::Object(0), t, math::normalize(math::sub(p, self.sphere.center)));
            }
        }
        // cuboid, slab method
        let (mut t0, mut t1, mut axis) = (f32::NEG_INFINITY, f32::INFINITY, 0);
        let mut sign = 1.0;
        for i in 0..3 {
            let inv = 1.0 / d[i];
            let (mut a, mut bb) = ((self.cuboid.min[i] - o[i]) * inv, (self.cuboid.max[i] - o[i]) * inv);
            let mut s = -1.0;
            if a > bb {
                std::mem::swap(&mut a, &mut bb);
                s = 1.0;
            }
            if a > t0 {
                t0 = a;
                axis = i;
                sign = s;
            }
            t1 = t1.min(bb);
        }
        if t0 <= t1 && t0 > 0.0 && t0 < best.1 {
            let mut n = [0.0; 3];
            n[axis] = sign;
            best = (Hit::Object(1), t0, n);
        }
        // floor
        if d[1] < 0.0 {
            let t = (FLOOR_Y - o[1]) / d[1];
            let p = math::add(o, math::scale(d, t));
            if t > 0.0 && t < best.1 && self.in_box_xz(p) {
                best = (Hit::Floor, t, [0.0, 1.0, 0.0]);
            }
        }
        // back wall
        if d[2] < 0.0 {
            let t = (WALL_Z - o[2]) / d[2];
            let p = math::add(o, math::scale(d, t));
            if t > 0.0 && t < best.1 && p[0] >= self.bbox.min[0] && p[0] <= self.bbox.max[0] && p[1] >= FLOOR_Y && p[1] <= self.bbox.max[1] {
                best = (Hit::Wall, t, [0.0, 0.0, 1.0]);
            }
        }
        best
    }

    fn in_box_xz(&self, p: Vec3) -> bool {
        p[0] >= self.bbox.min[0] && p[0] <= self.bbox.max[0] && p[2] >= WALL_Z && p[2] <= self.bbox.max[2]
    }

    fn shade(&self, hit: Hit, p: Vec3, n: Vec3, objects: &[ToyObject]) -> [f32; 3] {
        let base = match hit {
            Hit::Sky => return SKY,
            Hit::Object(i) => objects[i].color,
            Hit::Floor => {
                let cell = ((p[0] / 0.3).floor() as i64 + (p[2] / 0.3).floor() as i64).rem_euclid(2);
                if cell == 0 {
                    [0.82, 0.8, 0.72]
                } else {
                    [0.58, 0.55, 0.5]
                }
            }
            Hit::Wall => {
                let band = 0.04 * (p[1] * 3.0).sin();
                [0.68 + band, 0.8 + band, 0.7 + band]
            }
        };
        let l = math::normalize(LIGHT);
        let lambert = math::dot(n, l).max(0.0);
        let k = 0.6 + 0.4 * lambert;
        [base[0] * k, base[1] * k, base[2] * k]
    }
}

fn serpentine(grid: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            out.push((r, if r % 2 == 0 { c } else { grid - 1 - c }));
        }
    }
    out
}

fn toy_cameras(config: &ToySceneConfig) -> Result<Vec<Camera>> {
    let k = Intrinsics::centered(config.focal, config.width, config.height);
    let g = config.grid.max(1);
    let step = |i: usize| if g == 1 { 0.0 } else { i as f32 / (g - 1) as f32 - 0.5 };
    serpentine(g)
        .into_iter()
        .map(|(r, c)| {
            let eye = [0.9 * step(c), 0.2 + 0.6 * step(r), 2.6];
            Camera::look_at(k, eye, [0.0, -0.05, -0.3], [0.0, 1.0, 0.0], 1.0, 4.8)
        })
        .collect()
}

/// Renders the toy scene.
pub fn toy_scene(config: &ToySceneConfig) -> Result<ToyScene> {
    if config.width == 0 || config.height == 0 || config.grid < 2 {
        return Err(Error::Config("toy scene needs a non-empty image and at least two views".into()));
    }
    let geo = Geometry::new();
    let objects = toy_objects();
    let cams = toy_cameras(config)?;
    let ss = config.supersample.max(1);
    let mut views = Vec::with_capacity(cams.len());
    let mut masks = vec![Vec::with_capacity(cams.len()); objects.len()];
    for (vi, cam) in cams.into_iter().enumerate() {
        let (w, h) = (config.width, config.height);
        let mut object_hits = vec![vec![0usize; w * h]; objects.len()];
        let mut image = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = x as f32 + (sx as f32 + 0.5) / ss as f32;
                        let v = y as f32 + (sy as f32 + 0.5) / ss as f32;
                        let d = cam.direction(u, v);
                        let o = cam.position();
                        let (hit, t, n) = geo.trace(o, d);
                        let p = math::add(o, math::scale(d, t));
                        let c = geo.shade(hit, p, n, &objects);
                        for i in 0..3 {
                            acc[i] += c[i];
                        }
                        if let Hit::Object(k) = hit {
                            object_hits[k][y * w + x] += 1;
                        }
                    }
                }
                let n = (ss * ss) as f32;
                image.set_pixel(x, y, [acc[0] / n, acc[1] / n, acc[2] / n]);
            }
        }
        for (k, hits) in object_hits.into_iter().enumerate() {
            masks[k].push(hits.into_iter().map(|c| 2 * c >= ss * ss).collect());
        }
        views.push(View {
            name: format!("view_{vi:03}"),
            image,
            camera: cam,
            split: Split::Train,
        });
    }
    let dataset = SceneDataset::new("toy", views, geo.bbox)?;
    Ok(ToyScene {
        dataset,
        objects,
        masks,
    })
}

/// A square crop from the interior of each object in the first view where it is large enough,
/// paired with the object's caption.
pub fn object_crops(scene: &ToyScene) -> Result<Vec<(String, Image)>> {
    let (w, h) = scene.dataset.resolution();
    let mut out = Vec::new();
    for (k, obj) in scene.objects.iter().enumerate() {
        let mask = &scene.masks[k][0];
        let (mut n, mut sx, mut sy) = (0usize, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] {
                    n += 1;
                    sx += x;
                    sy += y;
                }
            }
        }
        if n == 0 {
            return Err(Error::Consistency(format!("{} is not visible in the first view", obj.caption)));
        }
        let (cx, cy) = (sx / n, sy / n);
        let side = ((n as f32).sqrt() * 0.6).max(2.0) as usize;
        let x0 = cx.saturating_sub(side / 2).min(w - side);
        let y0 = cy.saturating_sub(side / 2).min(h - side);
        out.push((obj.caption.clone(), scene.dataset.views[0].image.crop(x0, y0, side, side)?));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ObjectsFile {
    objects: Vec<ToyObject>,
    views: usize,
}

/// Writes the scene in Blender layout plus `masks/{object}_{view}.png` and `objects.json`.
pub fn write_toy_scene(root: &Path, scene: &ToyScene) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let extras = BlenderExtras {
        near: Some(scene.dataset.views[0].camera.near),
        far: Some(scene.dataset.views[0].camera.far),
        aabb: Some(scene.dataset.bbox),
    };
    write_blender_scene(root, Split::Train, &scene.dataset.views, &extras)?;
    let mask_dir = root.join("masks");
    std::fs::create_dir_all(&mask_dir)?;
    let (w, h) = scene.dataset.resolution();
    for (k, per_view) in scene.masks.iter().enumerate() {
        for (v, mask) in per_view.iter().enumerate() {
            let img = Image::from_fn(w, h, |x, y| [if mask[y * w + x] { 1.0 } else { 0.0 }; 3]);
            img.save_png(&mask_dir.join(format!("{k}_{v:03}.png")))?;
        }
    }
    let meta = ObjectsFile {
        objects: scene.objects.clone(),
        views: scene.dataset.len(),
    };
    std::fs::write(root.join("objects.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_toy_scene(root: &Path) -> Result<ToyScene> {
    let dataset = load_blender_scene(root, Split::Train)?;
    let meta_path = root.join("objects.json");
    let meta: ObjectsFile = serde_json::from_slice(&std::fs::read(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let mut masks = Vec::with_capacity(meta.objects.len());
    for k in 0..meta.objects.len() {
        let mut per_view = Vec::with_capacity(meta.views);
        for v in 0..meta.views {
            let img = Image::load(&root.join("masks").join(format!("{k}_{v:03}.png")), false)?;
            per_view.push(img.data().chunks_exact(3).map(|p| p[0] > 0.5).collect());
        }
        masks.push(per_view);
    }
    Ok(ToyScene {
        dataset,
        objects: meta.objects,
        masks,
    })
}

const PALETTE: [(&str, [f32; 3]); 10] = [
    ("red", [0.86, 0.15, 0.12]),
    ("orange", [0.95, 0.55, 0.1]),
    ("yellow", [0.96, 0.88, 0.2]),
    ("green", [0.2, 0.65, 0.25]),
    ("teal", [0.1, 0.55, 0.55]),
    ("blue", [0.15, 0.3, 0.85]),
    ("purple", [0.5, 0.2, 0.65]),
    ("pink", [0.95, 0.55, 0.7]),
    ("black", [0.08, 0.08, 0.1]),
    ("white", [0.95, 0.95, 0.92]),
];

const PATTERNS: [&str; 4] = ["stripes", "checks", "dots", "waves"];

/// Procedural two-color pattern images with captions like "orange and teal stripes".
pub fn toy_style_images(count: usize, size: usize, seed: u64) -> Vec<(String, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = rng.random_range(0..PALETTE.len());
            let mut b = rng.random_range(0..PALETTE.len() - 1);
            if b >= a {
                b += 1;
            }
            let pattern = rng.random_range(0..PATTERNS.len());
            let freq: f32 = rng.random_range(2.0..7.0);
            let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (ca, cb) = (PALETTE[a].1, PALETTE[b].1);
            let (s, c) = angle.sin_cos();
            let img = Image::from_fn(size, size, |x, y| {
                let u = x as f32 / size as f32;
                let v = y as f32 / size as f32;
                let r = u * c + v * s;
                let q = -u * s + v * c;
                let t = match pattern {
                    0 => ((r * freq * std::f32::consts::TAU + phase).sin() > 0.0) as u8 as f32,
                    1 => (((r * freq).floor() as i64 + (q * freq).floor() as i64).rem_euclid(2)) as f32,
                    2 => {
                        let fx = (r * freq).fract() - 0.5;
                        let fy = (q * freq).fract() - 0.5;
                        ((fx * fx + fy * fy).sqrt() < 0.3) as u8 as f32
                    }
                    _ => 0.5 + 0.5 * ((r * freq * std::f32::consts::TAU + 2.0 * (q * 5.0 + phase).sin()).sin()),
                };
                [
                    ca[0] * (1.0 - t) + cb[0] * t,
                    ca[1] * (1.0 - t) + cb[1] * t,
                    ca[2] * (1.0 - t) + cb[2] * t,
                ]
            });
            (format!("{} and {} {}", PALETTE[a].0, PALETTE[b].0, PATTERNS[pattern]), img)
        })
        .collect()
}

/// Writes [`toy_style_images`] as `style_NNN.png` plus `captions.json` (file name to caption).
pub fn write_toy_styles(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut captions = std::collections::BTreeMap::new();
    for (i, (caption, img)) in toy_style_images(count, size, seed).into_iter().enumerate() {
        let name = format!("style_{i:03}.png");
        img.save_png(&dir.join(&name))?;
        captions.insert(name, caption);
    }
    std::fs::write(dir.join("captions.json"), serde_json::to_vec_pretty(&captions)?)?;
    Ok(())
}

/// Toy encoder settings whose text vocabulary pairs every object caption and style caption with
/// the image embedding of its crop or style image, so text prompts land next to the matching
/// images in the joint space.
pub fn toy_encoder_spec(scene: &ToyScene, styles: &[(String, Image)], base: ToySpec) -> Result<ToySpec> {
    let (image, _, _) = make_toy_encoders(base.seed, base.joint_dim, base.style_widths)?;
    let mut vocabulary = base.vocabulary.clone();
    for (caption, img) in object_crops(scene)?.iter().chain(styles) {
        vocabulary.push(VocabEntry {
            caption: caption.clone(),
            embedding: image.encode_image(img)?.values,
        });
    }
    Ok(ToySpec { vocabulary, ..base })
}
