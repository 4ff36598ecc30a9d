//! Run configuration: a TOML file, then `CONRF_` environment variables, then command-line flags.
//!
//! Environment keys map onto the file layout with `__` as the separator, so
//! `CONRF_FIELD__STEPS=500` overrides `[field] steps`. Relative paths in `[data]` resolve against
//! the directory holding the config file.

use std::path::{Path, PathBuf};

use conrf_core::scene_io::{load_blender_scene, load_llff_scene, Split};
use conrf_core::scene_io::SceneDataset;
use conrf_core::training::TrainConfig;
use conrf_core::{Error, Result};
use figment::providers::{Env, Format, Serialized, Toml};
use figment::Figment;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "CONRF_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneFormat {
    /// Blender if `transforms_train.json` exists, LLFF if `poses_bounds.npy` does.
    #[default]
    Auto,
    Blender,
    Llff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    pub format: SceneFormat,
    /// LLFF image downsampling factor.
    pub downsample: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub styles: Option<PathBuf>,
    /// Style images kept out of training to measure generalization.
    pub heldout_styles: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: None,
            format: SceneFormat::Auto,
            downsample: 1,
            styles: None,
            heldout_styles: 0,
            cache: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Flag-level overrides, applied last.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// `(dotted key, value)` pairs such as `("field.steps", 200)`.
    pub values: Vec<(String, serde_json::Value)>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut fig = Figment::new();
        if let Some(p) = path {
            if !p.is_file() {
                return Err(Error::Config(format!("config file {} not found", p.display())));
            }
            fig = fig.merge(Toml::file(p));
        }
        fig = fig.merge(
            Env::prefixed(ENV_PREFIX)
                .ignore(&["clip_weights", "vgg_weights"])
                .split("__"),
        );
        if let Some(seed) = overrides.seed {
            fig = fig.merge(Serialized::default("seed", seed));
        }
        for (key, value) in &overrides.values {
            fig = fig.merge(Serialized::default(key, value));
        }
        let mut config: RunConfig = fig.extract().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(base) = path.and_then(Path::parent) {
            config.data.resolve(base);
        }
        config.train.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

impl DataConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.scene, &mut self.styles, &mut self.cache].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn scene_root(&self) -> Result<&Path> {
        self.scene
            .as_deref()
            .ok_or_else(|| Error::Config("data.scene is not set".into()))
    }

    pub fn styles_root(&self) -> Result<&Path> {
        self.styles
            .as_deref()
            .ok_or_else(|| Error::Config("data.styles is not set".into()))
    }

    pub fn cache_root(&self) -> Result<&Path> {
        self.cache
            .as_deref()
            .ok_or_else(|| Error::Config("data.cache is not set".into()))
    }

    pub fn load_scene(&self) -> Result<SceneDataset> {
        let root = self.scene_root()?;
        let format = match self.format {
            SceneFormat::Auto if root.join("transforms_train.json").is_file() => SceneFormat::Blender,
            SceneFormat::Auto if root.join("poses_bounds.npy").is_file() => SceneFormat::Llff,
            SceneFormat::Auto => {
                return Err(Error::Config(format!(
                    "{} holds neither transforms_train.json nor poses_bounds.npy",
                    root.display()
                )))
            }
            f => f,
        };
        match format {
            SceneFormat::Llff => load_llff_scene(root, self.downsample),
            _ => load_blender_scene(root, Split::Train),
        }
    }
}
