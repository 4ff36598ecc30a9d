//! Checkpoint directories: `manifest.json` (architecture, provenance, RNG state) plus
//! `tensors.safetensors` (every learnable array, by name).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::feature_field::{FeatureField, FieldConfig, DENSITY_ACTIVATION};
use crate::nn::NamedArray;
use crate::scene_io::{Aabb, Camera};
use crate::style_core::{Decoder, DecoderConfig, MappingConfig, MappingNetwork, StyleStatistics};

use super::{Stage, TrainConfig};

pub const CHECKPOINT_FORMAT: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const TENSOR_FILE: &str = "tensors.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCamera {
    pub name: String,
    pub camera: Camera,
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("bad RNG seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("RNG seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad RNG position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub dataset: String,
    pub stages: Vec<Stage>,
    pub steps: BTreeMap<Stage, usize>,
    pub field: FieldConfig,
    pub bbox: Aabb,
    pub density_activation: String,
    pub channels: usize,
    pub embedding_dim: usize,
    pub mapping: MappingConfig,
    pub decoder: DecoderConfig,
    pub encoders: EncoderSpec,
    pub views: Vec<NamedCamera>,
    pub config: TrainConfig,
    pub rng: RngState,
    /// Shape of every stored array.
    pub arrays: BTreeMap<String, Vec<usize>>,
}

/// Every learned component plus the scene's content statistics.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub field: FeatureField,
    pub mapping: MappingNetwork,
    pub decoder: Decoder,
    /// Channel statistics of the scene's content features, used to un-normalize rendered
    /// features for the unstylized decode.
    pub content_stats: StyleStatistics,
}

impl Checkpoint {
    pub fn has_stage(&self, stage: Stage) -> bool {
        self.manifest.stages.contains(&stage)
    }

    pub fn mark_stage(&mut self, stage: Stage, steps: usize, rng: &ChaCha8Rng) {
        if !self.manifest.stages.contains(&stage) {
            self.manifest.stages.push(stage);
        }
        self.manifest.steps.insert(stage, steps);
        self.manifest.rng = RngState::capture(rng);
        self.manifest.field = self.field.config().clone();
    }

    pub fn view(&self, name: &str) -> Option<&Camera> {
        self.manifest.views.iter().find(|v| v.name == name).map(|v| &v.camera)
    }

    fn arrays(&self) -> Result<Vec<NamedArray>> {
        let n = self.field.lattice().num_nodes();
        let c = self.field.feature_channels();
        let mut out = vec![
            NamedArray::new("field.density", vec![n], self.field.density.clone()),
            NamedArray::new("field.features", vec![n, c], self.field.features.clone()),
            NamedArray::new("content.mean", vec![c], self.content_stats.mean.clone()),
            NamedArray::new("content.std", vec![c], self.content_stats.std.clone()),
        ];
        if let (Some(grid), Some(d)) = (&self.field.clip, self.field.clip_channels()) {
            out.push(NamedArray::new("field.clip", vec![n, d], grid.clone()));
        }
        if let Some(grid) = &self.field.rgb {
            out.push(NamedArray::new("field.rgb", vec![n, 3], grid.clone()));
        }
        out.extend(self.mapping.params().to_arrays("mapping.")?);
        out.extend(self.decoder.params().to_arrays("decoder.")?);
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    /// Hex digest over every stored array.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for a in self.arrays()? {
            h.update(a.name.as_bytes());
            for v in &a.data {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Short identifier: dataset name plus a prefix of the digest.
    pub fn id(&self) -> Result<String> {
        Ok(format!("{}-{}", self.manifest.dataset, &self.digest()?[..12]))
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let arrays = self.arrays()?;
        self.manifest.arrays = arrays.iter().map(|a| (a.name.clone(), a.shape.clone())).collect();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
            .iter()
            .map(|a| {
                let raw: Vec<u8> = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (a.name.clone(), a.shape.clone(), raw)
            })
            .collect();
        let mut views = Vec::with_capacity(bytes.len());
        for (name, shape, raw) in &bytes {
            let view = TensorView::new(Dtype::F32, shape.clone(), raw)
                .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
            views.push((name.clone(), view));
        }
        let blob = safetensors::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join(TENSOR_FILE), blob)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read(&manifest_path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_slice(&text)
            .map_err(|e| Error::Checkpoint(format!("malformed manifest {}: {e}", manifest_path.display())))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", manifest.format)));
        }
        if manifest.density_activation != DENSITY_ACTIVATION {
            return Err(Error::Checkpoint(format!("unknown density activation {}", manifest.density_activation)));
        }
        for v in &manifest.views {
            let c = &v.camera;
            Camera::new(c.intrinsics, c.c2w, c.near, c.far)
                .map_err(|e| Error::Checkpoint(format!("view {}: {e}", v.name)))?;
        }
        let blob = std::fs::read(dir.join(TENSOR_FILE))?;
        let st = SafeTensors::deserialize(&blob).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("array {name} is not f32")));
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            arrays.insert(name.clone(), NamedArray::new(name, view.shape().to_vec(), data));
        }
        let names: BTreeMap<String, Vec<usize>> = arrays.iter().map(|(k, v)| (k.clone(), v.shape.clone())).collect();
        if names != manifest.arrays {
            return Err(Error::Checkpoint("manifest array table does not match the tensor file".into()));
        }

        let mut field = FeatureField::new(manifest.field.clone(), manifest.bbox)?;
        let n = field.lattice().num_nodes();
        let c = field.feature_channels();
        let take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let a = arrays
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if a.shape != shape {
                return Err(Error::Checkpoint(format!("array {name} has shape {:?}, expected {shape:?}", a.shape)));
            }
            Ok(a.data.clone())
        };
        field.density = take("field.density", &[n])?;
        field.features = take("field.features", &[n, c])?;
        if let Some(d) = manifest.field.clip_channels {
            field.clip = Some(take("field.clip", &[n, d])?);
        }
        if manifest.field.rgb_head {
            field.rgb = Some(take("field.rgb", &[n, 3])?);
        }
        let content_stats = StyleStatistics::new(take("content.mean", &[c])?, take("content.std", &[c])?)?;

        // parameter values are overwritten below, so the init RNG is irrelevant
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mapping = MappingNetwork::new(manifest.mapping.clone(), manifest.embedding_dim, c, &mut rng)?;
        mapping.params().load_arrays("mapping.", &arrays)?;
        let decoder = Decoder::new(manifest.decoder.clone(), c, &mut rng)?;
        decoder.params().load_arrays("decoder.", &arrays)?;
        Ok(Self {
            manifest,
            field,
            mapping,
            decoder,
            content_stats,
        })
    }
}
