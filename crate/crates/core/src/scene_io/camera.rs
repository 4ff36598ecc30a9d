use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};

/// Pinhole intrinsics in pixels. Square pixels, so one focal length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Principal point at the image center.
    pub fn centered(focal: f32, width: usize, height: usize) -> Self {
        Self {
            focal,
            cx: width as f32 * 0.5,
            cy: height as f32 * 0.5,
            width,
            height,
        }
    }

    /// Intrinsics for an image resized by `1/factor` in each axis.
    pub fn downscaled(&self, factor: usize) -> Self {
        let f = factor as f32;
        Self {
            focal: self.focal / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// A posed pinhole camera.
///
/// Camera space is right-handed with x right, y up and the camera looking down -z. The pose is
/// the camera-to-world transform whose columns are the right, up and backward axes followed by
/// the camera center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub c2w: [[f32; 4]; 3],
    pub near: f32,
    pub far: f32,
}

const ORTHONORMAL_TOL: f32 = 1e-5;

impl Camera {
    pub fn new(intrinsics: Intrinsics, c2w: [[f32; 4]; 3], near: f32, far: f32) -> Result<Self> {
        if !(intrinsics.focal > 0.0) || !intrinsics.focal.is_finite() {
            return Err(Error::Config(format!("focal must be positive, got {}", intrinsics.focal)));
        }
        if intrinsics.width == 0 || intrinsics.height == 0 {
            return Err(Error::Config("camera resolution must be non-zero".into()));
        }
        if !(near > 0.0) || !(far > near) {
            return Err(Error::Config(format!("need 0 < near < far, got near={near} far={far}")));
        }
        let cam = Self {
            intrinsics,
            c2w,
            near,
            far,
        };
        let cols = [cam.right(), cam.up(), cam.backward()];
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = math::dot(cols[i], cols[j]);
                if (got - want).abs() > ORTHONORMAL_TOL {
                    return Err(Error::Config(format!(
                        "rotation block is not orthonormal (col {i} . col {j} = {got})"
                    )));
                }
            }
        }
        Ok(cam)
    }

    /// Builds a camera at `eye` looking toward `target`, with `up_hint` resolving roll.
    pub fn look_at(intrinsics: Intrinsics, eye: Vec3, target: Vec3, up_hint: Vec3, near: f32, far: f32) -> Result<Self> {
        let back = math::normalize(math::sub(eye, target));
        let right = math::normalize(math::cross(up_hint, back));
        let up = math::cross(back, right);
        let c2w = [
            [right[0], up[0], back[0], eye[0]],
            [right[1], up[1], back[1], eye[1]],
            [right[2], up[2], back[2], eye[2]],
        ];
        Self::new(intrinsics, c2w, near, far)
    }

    #[inline]
    fn column(&self, c: usize) -> Vec3 {
        [self.c2w[0][c], self.c2w[1][c], self.c2w[2][c]]
    }

    pub fn right(&self) -> Vec3 {
        self.column(0)
    }

    pub fn up(&self) -> Vec3 {
        self.column(1)
    }

    pub fn backward(&self) -> Vec3 {
        self.column(2)
    }

    pub fn forward(&self) -> Vec3 {
        math::scale(self.column(2), -1.0)
    }

    pub fn position(&self) -> Vec3 {
        self.column(3)
    }

    /// Unit world-space direction of the ray through continuous pixel coordinates `(u, v)`,
    /// where pixel `(i, j)` spans `[i, i+1) x [j, j+1)`.
    pub fn direction(&self, u: f32, v: f32) -> Vec3 {
        let k = &self.intrinsics;
        let d_cam = [(u - k.cx) / k.focal, -(v - k.cy) / k.focal, -1.0];
        let d = [
            self.c2w[0][0] * d_cam[0] + self.c2w[0][1] * d_cam[1] + self.c2w[0][2] * d_cam[2],
            self.c2w[1][0] * d_cam[0] + self.c2w[1][1] * d_cam[1] + self.c2w[1][2] * d_cam[2],
            self.c2w[2][0] * d_cam[0] + self.c2w[2][1] * d_cam[1] + self.c2w[2][2] * d_cam[2],
        ];
        math::normalize(d)
    }

    /// World point to camera coordinates (x right, y up, z backward).
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let d = math::sub(p, self.position());
        [
            math::dot(d, self.right()),
            math::dot(d, self.up()),
            math::dot(d, self.backward()),
        ]
    }

    /// Projects a world point to continuous pixel coordinates. Returns `None` for points on or
    /// behind the image plane's side of the camera.
    pub fn project(&self, p: Vec3) -> Option<[f32; 2]> {
        let c = self.world_to_camera(p);
        let depth = -c[2];
        if depth <= 1e-6 {
            return None;
        }
        let k = &self.intrinsics;
        Some([k.cx + k.focal * c[0] / depth, k.cy - k.focal * c[1] / depth])
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            ..self.clone()
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(Error::Config(format!("degenerate bounding box {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vec3 {
        math::sub(self.max, self.min)
    }

    fn grow(&mut self, p: Vec3) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }

    /// Smallest box holding every camera frustum between its near and far planes. It contains
    /// the frusta intersection, the only region every view constrains.
    pub fn around_frusta<'a>(cameras: impl IntoIterator<Item = &'a Camera>) -> Result<Self> {
        let mut bbox: Option<Aabb> = None;
        for cam in cameras {
            let k = &cam.intrinsics;
            let corners = [
                (0.0, 0.0),
                (k.width as f32, 0.0),
                (0.0, k.height as f32),
                (k.width as f32, k.height as f32),
            ];
            for (u, v) in corners {
                let d = cam.direction(u, v);
                // distance along a unit ray at which the camera-space depth equals `near`/`far`
                let cos = -math::dot(d, cam.backward());
                for depth in [cam.near, cam.far] {
                    let p = math::add(cam.position(), math::scale(d, depth / cos));
                    match bbox.as_mut() {
                        Some(b) => b.grow(p),
                        None => bbox = Some(Aabb { min: p, max: p }),
                    }
                }
            }
        }
        let b = bbox.ok_or_else(|| Error::Empty("no cameras to bound".into()))?;
        Aabb::new(b.min, b.max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::new(
            Intrinsics::centered(10.0, 8, 8),
            [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            0.5,
            5.0,
        )
        .unwrap()
    }

    #[test]
    fn projects_hand_computed_point() {
        // u = 4 + 10*0.5/2, v = 4 - 10*0.25/2
        let uv = cam().project([0.5, 0.25, -2.0]).unwrap();
        assert!((uv[0] - 6.5).abs() < 1e-6);
        assert!((uv[1] - 2.75).abs() < 1e-6);
    }

    #[test]
    fn behind_camera_does_not_project() {
        assert!(cam().project([0.0, 0.0, 1.0]).is_none());
    }

    #[test]
    fn rejects_bad_invariants() {
        let k = Intrinsics::centered(10.0, 8, 8);
        let id = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        assert!(Camera::new(Intrinsics { focal: 0.0, ..k }, id, 1.0, 2.0).is_err());
        assert!(Camera::new(k, id, 0.0, 2.0).is_err());
        assert!(Camera::new(k, id, 2.0, 2.0).is_err());
        let skew = [[1.0, 0.1, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        assert!(Camera::new(k, skew, 1.0, 2.0).is_err());
    }

    #[test]
    fn look_at_faces_target() {
        let c = Camera::look_at(Intrinsics::centered(10.0, 8, 8), [0.0, 0.0, 3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1.0, 5.0)
            .unwrap();
        let f = c.forward();
        assert!((f[2] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn frusta_box_contains_cameras_view() {
        let c = cam();
        let b = Aabb::around_frusta([&c]).unwrap();
        let p = math::add(c.position(), math::scale(c.forward(), 2.0));
        assert!(b.contains(p));
    }
}
