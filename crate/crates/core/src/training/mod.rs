//! Losses, optimizers, checkpoints and the three training stages: field pretraining,
//! stylization (mapping network and decoder) and selection-head distillation.

mod checkpoint;
pub mod losses;
mod optim;
mod stages;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::feature_field::FieldConfig;
use crate::selection::WindowSpec;
use crate::style_core::{DecoderConfig, MappingConfig};

pub use checkpoint::{Checkpoint, Manifest, NamedCamera, RngState, CHECKPOINT_FORMAT};
pub use optim::{AdamConfig, SliceAdam};
pub use stages::{
    build_selection_cache, heldout_feature_loss, selection_iou, train_feature_field, train_selection_volume,
    train_stylization, training_psnr, FieldSummary, SelectSummary, StyleSet, StylizeSummary,
};

/// Consecutive non-finite steps tolerated before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Field,
    Stylize,
    Select,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Field => "field",
            Stage::Stylize => "stylize",
            Stage::Select => "select",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub field: FieldConfig,
    pub mapping: MappingConfig,
    pub decoder: DecoderConfig,
    pub encoders: EncoderSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            mapping: MappingConfig::default(),
            decoder: DecoderConfig::default(),
            encoders: EncoderSpec::Pretrained(Default::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldStageConfig {
    pub steps: usize,
    pub batch_rays: usize,
    pub n_samples: usize,
    /// Side of the square feature patch rendered per step, in feature pixels; 0 renders whole views.
    pub feature_patch: usize,
    pub grid_lr: f64,
    pub decoder_lr: f64,
    pub photometric_weight: f64,
    pub distill_weight: f64,
    pub recon_weight: f64,
}

impl Default for FieldStageConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            batch_rays: 4096,
            n_samples: 128,
            feature_patch: 32,
            grid_lr: 0.05,
            decoder_lr: 5e-4,
            photometric_weight: 1.0,
            distill_weight: 1.0,
            recon_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StylizeStageConfig {
    pub steps: usize,
    pub n_samples: usize,
    pub feature_patch: usize,
    pub lr: f64,
    pub lambda_style: f64,
    pub lambda_content: f64,
    pub feature_weight: f64,
    pub consistency_weight: f64,
    /// Turns the style feature loss off (ablation).
    pub feature_loss: bool,
    /// Styles per step for the style feature loss; the image branches use the first one.
    pub style_batch: usize,
    pub style_resolution: usize,
    /// Steps between held-out evaluations; 0 evaluates only at the start and the end.
    pub eval_every: usize,
}

impl Default for StylizeStageConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            n_samples: 128,
            feature_patch: 32,
            lr: 1e-4,
            lambda_style: 20.0,
            lambda_content: 1.0,
            feature_weight: 1.0,
            consistency_weight: 1.0,
            feature_loss: true,
            style_batch: 8,
            style_resolution: 256,
            eval_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectStageConfig {
    pub steps: usize,
    pub batch_rays: usize,
    pub n_samples: usize,
    pub grid_lr: f64,
    pub clip_weight: f64,
    pub windows: WindowSpec,
}

impl Default for SelectStageConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_rays: 4096,
            n_samples: 128,
            grid_lr: 0.05,
            clip_weight: 1.0,
            windows: WindowSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Adam betas and epsilon shared by every parameter group; learning rates are per stage.
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub field: FieldStageConfig,
    pub stylize: StylizeStageConfig,
    pub select: SelectStageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            field: FieldStageConfig::default(),
            stylize: StylizeStageConfig::default(),
            select: SelectStageConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small settings for the bundled synthetic scene and the toy encoders.
    pub fn toy() -> Self {
        let encoders = crate::encoders::ToySpec::default();
        Self {
            seed: 0,
            adam: AdamConfig::default(),
            model: ModelConfig {
                field: FieldConfig {
                    res: [96, 64, 52],
                    feature_channels: encoders.style_widths[2],
                    clip_channels: None,
                    rgb_head: true,
                    density_shift: -7.0,
                    density_scale: 20.0,
                },
                mapping: MappingConfig {
                    hidden: vec![128, 128, 128],
                    normalize_input: false,
                },
                decoder: DecoderConfig { widths: [64, 32] },
                encoders: EncoderSpec::Toy(encoders),
            },
            field: FieldStageConfig {
                steps: 2000,
                batch_rays: 2048,
                n_samples: 96,
                feature_patch: 0,
                ..FieldStageConfig::default()
            },
            stylize: StylizeStageConfig {
                steps: 1000,
                n_samples: 96,
                feature_patch: 0,
                style_resolution: 64,
                eval_every: 250,
                ..StylizeStageConfig::default()
            },
            select: SelectStageConfig {
                steps: 1000,
                batch_rays: 2048,
                n_samples: 96,
                windows: WindowSpec::new(vec![4, 8], None),
                ..SelectStageConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("field.batch_rays", self.field.batch_rays),
            ("field.n_samples", self.field.n_samples),
            ("stylize.n_samples", self.stylize.n_samples),
            ("stylize.style_batch", self.stylize.style_batch),
            ("stylize.style_resolution", self.stylize.style_resolution),
            ("select.batch_rays", self.select.batch_rays),
            ("select.n_samples", self.select.n_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let rates = [
            ("field.grid_lr", self.field.grid_lr),
            ("field.decoder_lr", self.field.decoder_lr),
            ("stylize.lr", self.stylize.lr),
            ("select.grid_lr", self.select.grid_lr),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
        }
        if self.select.windows.sizes.is_empty() {
            return Err(Error::Config("select.windows.sizes must not be empty".into()));
        }
        Ok(())
    }
}

/// Per-step loss values. Terms that a stage does not use are absent; `total` is the weighted
/// sum of the present terms with the stage's configured weights. Every term uses mean
/// reduction except `feature`, which sums over channels and averages over the style batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub photometric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    stage: Stage,
    step: usize,
    wall_time_s: f64,
    #[serde(flatten)]
    losses: &'a LossReport,
}

/// Append-only JSON-lines metrics log.
pub struct MetricsLog {
    file: Option<File>,
    start: Instant,
    pub history: Vec<(Stage, usize, LossReport)>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Some(file),
            start: Instant::now(),
            history: Vec::new(),
        })
    }

    /// Keeps the history in memory only.
    pub fn in_memory() -> Self {
        Self {
            file: None,
            start: Instant::now(),
            history: Vec::new(),
        }
    }

    pub fn record(&mut self, stage: Stage, step: usize, losses: &LossReport) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            let line = MetricsLine {
                stage,
                step,
                wall_time_s: self.start.elapsed().as_secs_f64(),
                losses,
            };
            serde_json::to_writer(&mut *f, &line)?;
            f.write_all(b"\n")?;
        }
        self.history.push((stage, step, losses.clone()));
        Ok(())
    }
}

/// Aborts after [`DIVERGENCE_PATIENCE`] consecutive non-finite losses.
#[derive(Debug, Default)]
pub(crate) struct DivergenceGuard {
    bad: usize,
}

impl DivergenceGuard {
    /// `Ok(true)` when the step may be applied.
    pub(crate) fn check(&mut self, step: usize, report: &LossReport) -> Result<bool> {
        if report.is_finite() {
            self.bad = 0;
            return Ok(true);
        }
        self.bad += 1;
        if self.bad >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                step,
                detail: format!("{} consecutive non-finite losses, last {:?}", self.bad, report),
            });
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_aborts_after_patience() {
        let mut g = DivergenceGuard::default();
        let bad = LossReport {
            total: f64::NAN,
            ..Default::default()
        };
        let good = LossReport {
            total: 1.0,
            ..Default::default()
        };
        assert!(!g.check(0, &bad).unwrap());
        assert!(!g.check(1, &bad).unwrap());
        assert!(g.check(2, &good).unwrap());
        assert!(!g.check(3, &bad).unwrap());
        assert!(!g.check(4, &bad).unwrap());
        assert!(matches!(g.check(5, &bad), Err(Error::Diverged { step: 5, .. })));
    }

    #[test]
    fn config_round_trips_through_toml_like_json() {
        let c = TrainConfig::toy();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn metrics_lines_are_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut log = MetricsLog::open(&path).unwrap();
        let r = LossReport {
            photometric: Some(0.5),
            total: 0.5,
            ..Default::default()
        };
        log.record(Stage::Field, 0, &r).unwrap();
        log.record(Stage::Field, 1, &r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["step"], 1);
        assert_eq!(lines[0]["stage"], "field");
        assert!(lines[0].get("clip").is_none());
    }
}
