//! Shared setup for the benchmarks and the latency probe.

use std::path::Path;

use conrf_core::encoders::{EncoderSet, EncoderSpec, ToySpec};
use conrf_core::pipeline::{LocalSpec, Pose, RenderSpec, Renderer, StyleInput};
use conrf_core::selection::MultiSpatialCache;
use conrf_core::synthetic::{toy_encoder_spec, toy_scene, toy_style_images, ToyScene, ToySceneConfig};
use conrf_core::training::{
    build_selection_cache, train_feature_field, train_selection_volume, train_stylization, MetricsLog, StyleSet,
    TrainConfig,
};
use conrf_core::Result;

pub struct Bench {
    pub scene: ToyScene,
    pub renderer: Renderer,
}

/// A toy-config checkpoint with every stage run for a few steps. Render cost depends on the
/// model shape, not on how long it trained.
pub fn toy_renderer(cache_dir: &Path) -> Result<Bench> {
    let scene = toy_scene(&ToySceneConfig::default())?;
    let styles = toy_style_images(12, 64, 1);
    let spec = toy_encoder_spec(&scene, &styles, ToySpec::default())?;
    let mut config = TrainConfig::toy();
    config.model.encoders = EncoderSpec::Toy(spec.clone());
    config.field.steps = 20;
    config.stylize.steps = 2;
    config.stylize.eval_every = 0;
    config.select.steps = 2;
    let encoders = EncoderSet::toy(spec)?;
    let mut log = MetricsLog::in_memory();
    let (ck, _) = train_feature_field(&config, &scene.dataset, &encoders, &mut log)?;
    let set = StyleSet::split(styles.into_iter().map(|s| s.1).collect(), 2)?;
    let (ck, _) = train_stylization(&config, ck, &scene.dataset, &set, &encoders, &mut log)?;
    let cache = MultiSpatialCache::new(cache_dir)?;
    build_selection_cache(&scene.dataset, &encoders, &config.select.windows, &cache)?;
    let (ck, _) = train_selection_volume(&config, ck, &scene.dataset, &cache, &encoders, &mut log)?;
    Ok(Bench {
        scene,
        renderer: Renderer::with_encoders(ck, encoders)?,
    })
}

impl Bench {
    pub fn text_spec(&self, side: usize) -> RenderSpec {
        let mut spec = RenderSpec::new(Pose::View(self.scene.dataset.views[5].name.clone()));
        spec.style = Some(StyleInput::Text("red and blue stripes".into()));
        spec.resolution = Some((side, side));
        spec
    }

    pub fn local_spec(&self, side: usize) -> RenderSpec {
        let mut spec = self.text_spec(side);
        spec.local = Some(LocalSpec {
            content: self.scene.objects[0].caption.clone(),
            threshold: 0.5,
            background: StyleInput::Text("green and white dots".into()),
        });
        spec
    }
}
