use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::{self, Vec3};
use crate::scene_io::RayBatch;

/// Points along a batch of rays, `n_samples` per ray, ray-major.
///
/// `densities` and `features` start empty and are filled by
/// [`FeatureField::query_samples`](super::FeatureField::query_samples).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub n_rays: usize,
    pub n_samples: usize,
    /// Distance of each sample along its (unit) ray.
    pub t: Vec<f32>,
    /// Length of the interval each sample represents.
    pub deltas: Vec<f32>,
    pub positions: Vec<Vec3>,
    pub densities: Vec<f32>,
    pub features: Vec<f32>,
}

impl SampleBatch {
    #[inline]
    pub fn ray_range(&self, ray: usize) -> std::ops::Range<usize> {
        ray * self.n_samples..(ray + 1) * self.n_samples
    }
}

/// Partitions `[near, far]` of every ray into `n_samples` equal bins and places one sample per
/// bin: at the bin center, or uniformly jittered inside it when `stratified`. Each sample's
/// delta is its bin length, so the deltas tile the interval exactly.
pub fn sample_points(rays: &RayBatch, n_samples: usize, stratified: bool, seed: u64) -> SampleBatch {
    let n_samples = n_samples.max(1);
    let total = rays.len() * n_samples;
    let mut out = SampleBatch {
        n_rays: rays.len(),
        n_samples,
        t: Vec::with_capacity(total),
        deltas: Vec::with_capacity(total),
        positions: Vec::with_capacity(total),
        densities: Vec::new(),
        features: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in 0..rays.len() {
        let (near, far) = (rays.near[r], rays.far[r]);
        let bin = (far - near) / n_samples as f32;
        for i in 0..n_samples {
            let u: f32 = if stratified { rng.random::<f32>() } else { 0.5 };
            let t = near + (i as f32 + u) * bin;
            out.t.push(t);
            out.deltas.push(bin);
            out.positions.push(math::add(rays.origins[r], math::scale(rays.directions[r], t)));
        }
    }
    out
}

/// Compositing weights `w_i = exp(-sum_{j<i} sigma_j delta_j) * (1 - exp(-sigma_i delta_i))`
/// for one ray, written into `weights`. Returns the residual transmittance
/// `exp(-sum_j sigma_j delta_j)`; the weights and it sum to one.
///
/// Transmittance is carried as a running product in f64, which keeps it non-increasing and
/// the partition of unity tight.
pub fn compute_weights_into(densities: &[f32], deltas: &[f32], weights: &mut [f32]) -> f32 {
    debug_assert_eq!(densities.len(), deltas.len());
    let mut transmittance = 1.0f64;
    for i in 0..densities.len() {
        let x = densities[i] as f64 * deltas[i] as f64;
        let alpha = -(-x).exp_m1();
        weights[i] = (transmittance * alpha) as f32;
        transmittance *= (-x).exp();
    }
    transmittance as f32
}

/// Allocating form of [`compute_weights_into`]: `(weights, residual transmittance)`.
pub fn compute_weights(densities: &[f32], deltas: &[f32]) -> (Vec<f32>, f32) {
    let mut w = vec![0.0; densities.len()];
    let t = compute_weights_into(densities, deltas, &mut w);
    (w, t)
}

/// Transmittance before each sample, `exp(-sum_{j<i} sigma_j delta_j)`, plus the final value.
pub fn transmittance(densities: &[f32], deltas: &[f32]) -> Vec<f64> {
    let mut out = Vec::with_capacity(densities.len() + 1);
    let mut t = 1.0f64;
    out.push(t);
    for i in 0..densities.len() {
        t *= (-(densities[i] as f64 * deltas[i] as f64)).exp();
        out.push(t);
    }
    out
}
