//! On-disk cache of multi-spatial maps: one safetensors file per (image, encoder, windows)
//! plus a JSON sidecar describing it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::ImageEncoder;
use crate::error::Result;
use crate::image::Image;

use super::{multi_spatial_features, MultiSpatialFeatureMap, WindowSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub image_hash: String,
    pub encoder: String,
    pub windows: WindowSpec,
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub file: String,
}

#[derive(Clone, Debug)]
pub struct MultiSpatialCache {
    root: PathBuf,
}

impl MultiSpatialCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(image_hash: &str, encoder: &str, windows: &WindowSpec) -> String {
        let mut h = Sha256::new();
        h.update(image_hash.as_bytes());
        h.update([0]);
        h.update(encoder.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(windows).expect("window spec serializes"));
        hex::encode(&h.finalize()[..12])
    }

    fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (self.root.join(format!("{key}.json")), self.root.join(format!("{key}.safetensors")))
    }

    fn expected(image: &Image, encoder: &dyn ImageEncoder, windows: &WindowSpec) -> CacheManifest {
        let image_hash = image.content_hash();
        let encoder_name = encoder.handle().name;
        let key = Self::key(&image_hash, &encoder_name, windows);
        CacheManifest {
            image_hash,
            encoder: encoder_name,
            windows: windows.clone(),
            width: image.width(),
            height: image.height(),
            dim: encoder.width(),
            file: format!("{key}.safetensors"),
        }
    }

    /// The cached map, or `None` when it is absent, unreadable or was built with other settings.
    pub fn load(&self, image: &Image, encoder: &dyn ImageEncoder, windows: &WindowSpec) -> Option<MultiSpatialFeatureMap> {
        let want = Self::expected(image, encoder, windows);
        let key = want.file.trim_end_matches(".safetensors").to_string();
        let (json, data) = self.paths(&key);
        let got: CacheManifest = serde_json::from_slice(&std::fs::read(json).ok()?).ok()?;
        if got != want {
            return None;
        }
        let tensors = candle_core::safetensors::load(data, &Device::Cpu).ok()?;
        let features: Vec<f32> = tensors.get("features")?.flatten_all().ok()?.to_vec1().ok()?;
        let counts: Vec<u32> = tensors.get("counts")?.flatten_all().ok()?.to_vec1().ok()?;
        let n = want.width * want.height;
        if features.len() != n * want.dim || counts.len() != n {
            return None;
        }
        Some(MultiSpatialFeatureMap {
            width: want.width,
            height: want.height,
            dim: want.dim,
            features,
            counts,
            windows: windows.clone(),
        })
    }

    pub fn store(&self, image: &Image, encoder: &dyn ImageEncoder, map: &MultiSpatialFeatureMap) -> Result<()> {
        let manifest = Self::expected(image, encoder, &map.windows);
        let key = manifest.file.trim_end_matches(".safetensors").to_string();
        let (json, data) = self.paths(&key);
        let mut tensors = HashMap::new();
        tensors.insert(
            "features".to_string(),
            Tensor::from_vec(map.features.clone(), (map.height, map.width, map.dim), &Device::Cpu)?,
        );
        tensors.insert(
            "counts".to_string(),
            Tensor::from_vec(map.counts.clone(), (map.height, map.width), &Device::Cpu)?,
        );
        candle_core::safetensors::save(&tensors, &data)?;
        std::fs::write(json, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Cached map if valid, otherwise computes and stores it. The flag reports a cache hit.
    pub fn get_or_compute(
        &self,
        image: &Image,
        encoder: &dyn ImageEncoder,
        windows: &WindowSpec,
    ) -> Result<(MultiSpatialFeatureMap, bool)> {
        if let Some(m) = self.load(image, encoder, windows) {
            return Ok((m, true));
        }
        let m = multi_spatial_features(image, encoder, windows)?;
        self.store(image, encoder, &m)?;
        Ok((m, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::make_toy_encoders;

    #[test]
    fn round_trip_and_invalidation() {
        let dir = tempfile::tempdir().unwrap();
        let cache = MultiSpatialCache::new(dir.path()).unwrap();
        let (enc, _, _) = make_toy_encoders(1, 16, [4, 4, 4, 4]).unwrap();
        let img = Image::from_fn(12, 10, |x, y| [x as f32 / 12.0, y as f32 / 10.0, 0.3]);
        let spec = WindowSpec::new(vec![4], None);
        let (a, hit) = cache.get_or_compute(&img, &enc, &spec).unwrap();
        assert!(!hit);
        let (b, hit) = cache.get_or_compute(&img, &enc, &spec).unwrap();
        assert!(hit);
        assert_eq!(a, b);
        assert_eq!(a, multi_spatial_features(&img, &enc, &spec).unwrap());

        let other = WindowSpec::new(vec![6], None);
        assert!(cache.load(&img, &enc, &other).is_none());
        let (c, hit) = cache.get_or_compute(&img, &enc, &other).unwrap();
        assert!(!hit);
        assert_eq!(c.windows, other);
    }

    #[test]
    fn corrupted_sidecar_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = MultiSpatialCache::new(dir.path()).unwrap();
        let (enc, _, _) = make_toy_encoders(1, 16, [4, 4, 4, 4]).unwrap();
        let img = Image::filled(8, 8, [0.5; 3]);
        let spec = WindowSpec::new(vec![4], None);
        cache.get_or_compute(&img, &enc, &spec).unwrap();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().unwrap() == "json" {
                std::fs::write(&p, b"{not json").unwrap();
            }
        }
        assert!(cache.load(&img, &enc, &spec).is_none());
    }
}
