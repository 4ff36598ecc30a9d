#![allow(dead_code)]

use std::sync::OnceLock;

use conrf_core::encoders::{EncoderSet, EncoderSpec, ToySpec};
use conrf_core::selection::{MultiSpatialCache, WindowSpec};
use conrf_core::synthetic::{toy_encoder_spec, toy_scene, toy_style_images, ToyScene, ToySceneConfig};
use conrf_core::training::{
    build_selection_cache, train_feature_field, train_selection_volume, train_stylization, Checkpoint, MetricsLog,
    StyleSet, TrainConfig,
};

/// Checkpoints after each stage of a few-step run on a small toy scene.
pub struct Fixture {
    pub scene: ToyScene,
    pub encoders: EncoderSet,
    pub field: Checkpoint,
    pub stylized: Checkpoint,
    pub selected: Checkpoint,
}

pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.model.field.res = [24, 16, 14];
    c.model.mapping.hidden = vec![32, 32];
    c.model.decoder.widths = [16, 8];
    c.field.steps = 4;
    c.field.batch_rays = 256;
    c.field.n_samples = 32;
    c.stylize.steps = 3;
    c.stylize.n_samples = 32;
    c.stylize.style_resolution = 32;
    c.stylize.eval_every = 0;
    c.select.steps = 3;
    c.select.batch_rays = 256;
    c.select.n_samples = 32;
    c.select.windows = WindowSpec::new(vec![8], None);
    c
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let scene = toy_scene(&ToySceneConfig {
            width: 32,
            height: 32,
            grid: 2,
            focal: 40.0,
            supersample: 1,
        })
        .unwrap();
        let styles = toy_style_images(6, 32, 1);
        let spec = toy_encoder_spec(&scene, &styles, ToySpec::default()).unwrap();
        let mut config = tiny_config();
        config.model.encoders = EncoderSpec::Toy(spec.clone());
        let encoders = EncoderSet::toy(spec).unwrap();
        let mut log = MetricsLog::in_memory();
        let (field, _) = train_feature_field(&config, &scene.dataset, &encoders, &mut log).unwrap();
        let set = StyleSet::split(styles.into_iter().map(|s| s.1).collect(), 2).unwrap();
        let (stylized, _) =
            train_stylization(&config, field.clone(), &scene.dataset, &set, &encoders, &mut log).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = MultiSpatialCache::new(dir.path()).unwrap();
        build_selection_cache(&scene.dataset, &encoders, &config.select.windows, &cache).unwrap();
        let (selected, _) =
            train_selection_volume(&config, stylized.clone(), &scene.dataset, &cache, &encoders, &mut log).unwrap();
        Fixture {
            scene,
            encoders,
            field,
            stylized,
            selected,
        }
    })
}
