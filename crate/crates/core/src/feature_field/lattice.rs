use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene_io::Aabb;

/// Regular grid of nodes spanning a bounding box, with nodes on both faces of every axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub bbox: Aabb,
    pub res: [usize; 3],
}

/// The eight lattice nodes surrounding a point and their trilinear weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub nodes: [u32; 8],
    pub weights: [f32; 8],
}

impl Lattice {
    pub fn new(bbox: Aabb, res: [usize; 3]) -> Result<Self> {
        if res.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!("grid resolution must be at least 2 per axis, got {res:?}")));
        }
        let n = res[0] * res[1] * res[2];
        if n > u32::MAX as usize {
            return Err(Error::Config("grid too large".into()));
        }
        Ok(Self { bbox, res })
    }

    pub fn num_nodes(&self) -> usize {
        self.res[0] * self.res[1] * self.res[2]
    }

    #[inline]
    pub fn node_index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.res[1] + i[1]) * self.res[2] + i[2]
    }

    pub fn node_position(&self, i: [usize; 3]) -> Vec3 {
        let mut p = [0.0; 3];
        for a in 0..3 {
            let step = (self.bbox.max[a] as f64 - self.bbox.min[a] as f64) / (self.res[a] - 1) as f64;
            p[a] = (self.bbox.min[a] as f64 + step * i[a] as f64) as f32;
        }
        p
    }

    /// Trilinear stencil at `p`, or `None` outside the bounding box.
    #[inline]
    pub fn corners(&self, p: Vec3) -> Option<Corners> {
        let mut base = [0usize; 3];
        let mut frac = [0.0f32; 3];
        for a in 0..3 {
            let lo = self.bbox.min[a] as f64;
            let hi = self.bbox.max[a] as f64;
            let x = p[a] as f64;
            if !(x >= lo && x <= hi) {
                return None;
            }
            let g = (x - lo) / (hi - lo) * (self.res[a] - 1) as f64;
            let i0 = (g.floor() as usize).min(self.res[a] - 2);
            base[a] = i0;
            frac[a] = (g - i0 as f64) as f32;
        }
        let mut nodes = [0u32; 8];
        let mut weights = [0.0f32; 8];
        for k in 0..8 {
            let (dx, dy, dz) = (k >> 2 & 1, k >> 1 & 1, k & 1);
            nodes[k] = self.node_index([base[0] + dx, base[1] + dy, base[2] + dz]) as u32;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[k] = wx * wy * wz;
        }
        Some(Corners { nodes, weights })
    }
}

impl Corners {
    /// Interpolates a single-channel grid.
    #[inline]
    pub fn scalar(&self, grid: &[f32]) -> f32 {
        let mut acc = 0.0;
        for k in 0..8 {
            acc += self.weights[k] * grid[self.nodes[k] as usize];
        }
        acc
    }

    /// Interpolates a `channels`-wide grid into `out`.
    #[inline]
    pub fn vector(&self, grid: &[f32], channels: usize, out: &mut [f32]) {
        out.fill(0.0);
        for k in 0..8 {
            let w = self.weights[k];
            if w == 0.0 {
                continue;
            }
            let base = self.nodes[k] as usize * channels;
            for (o, g) in out.iter_mut().zip(&grid[base..base + channels]) {
                *o += w * g;
            }
        }
    }

    #[inline]
    pub fn scatter_scalar(&self, grad: &mut [f32], g: f32) {
        for k in 0..8 {
            grad[self.nodes[k] as usize] += self.weights[k] * g;
        }
    }

    #[inline]
    pub fn scatter_vector(&self, grad: &mut [f32], channels: usize, g: &[f32]) {
        for k in 0..8 {
            let w = self.weights[k];
            if w == 0.0 {
                continue;
            }
            let base = self.nodes[k] as usize * channels;
            for (o, v) in grad[base..base + channels].iter_mut().zip(g) {
                *o += w * v;
            }
        }
    }
}
