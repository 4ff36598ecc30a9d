//! Runs the three training stages on the toy scene and prints the regression metrics.
//!
//! Usage: `toy_train [field_steps] [stylize_steps] [select_steps]`

use std::time::Instant;

use conrf_core::feature_field::Heads;
use conrf_core::image::psnr;
use conrf_core::style_core::render_features;
use conrf_core::encoders::{EncoderSet, EncoderSpec, ToySpec};
use conrf_core::selection::MultiSpatialCache;
use conrf_core::synthetic::{toy_encoder_spec, toy_scene, toy_style_images, ToySceneConfig};
use conrf_core::training::{
    build_selection_cache, selection_iou, train_feature_field, train_selection_volume, train_stylization,
    training_psnr, MetricsLog, StyleSet, TrainConfig,
};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> conrf_core::Result<()> {
    let mut config = TrainConfig::toy();
    config.field.steps = arg(1, config.field.steps);
    config.stylize.steps = arg(2, config.stylize.steps);
    config.select.steps = arg(3, config.select.steps);

    let scene = toy_scene(&ToySceneConfig::default())?;
    let styles = toy_style_images(80, 64, 1);
    let spec = toy_encoder_spec(&scene, &styles, ToySpec::default())?;
    config.model.encoders = EncoderSpec::Toy(spec.clone());
    let encoders = EncoderSet::toy(spec)?;
    let mut log = MetricsLog::in_memory();

    let t = Instant::now();
    let (ck, _) = train_feature_field(&config, &scene.dataset, &encoders, &mut log)?;
    let train_psnr = training_psnr(&ck.field, &scene.dataset, config.field.n_samples)?;
    println!("field: {} steps, psnr {train_psnr:.2} dB, {:.1}s", config.field.steps, t.elapsed().as_secs_f64());

    let decoded = {
        let view = &scene.dataset.views[0];
        let (fi, _) = render_features(&ck.field, &view.camera, 4, config.field.n_samples, Heads::FEATURE)?;
        ck.decoder.decode(&fi.transfer(&ck.content_stats)?)?
    };
    println!("unstylized decode psnr {:.2} dB", psnr(&decoded, &scene.dataset.views[0].image, None)?);

    let t = Instant::now();
    let set = StyleSet::split(styles.into_iter().map(|s| s.1).collect(), 16)?;
    if std::env::var_os("ABLATE").is_some() {
        let mut ablated = config.clone();
        ablated.stylize.feature_loss = false;
        let (_, summary) = train_stylization(&ablated, ck.clone(), &scene.dataset, &set, &encoders, &mut log)?;
        println!("stylize without feature loss: heldout {:?}", summary.heldout);
    }
    let (ck, summary) = train_stylization(&config, ck, &scene.dataset, &set, &encoders, &mut log)?;
    println!("stylize: heldout {:?}, {:.1}s", summary.heldout, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let dir = std::env::temp_dir().join("conrf_toy_cache");
    let cache = MultiSpatialCache::new(&dir)?;
    build_selection_cache(&scene.dataset, &encoders, &config.select.windows, &cache)?;
    println!("cache: {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let (ck, s) = train_selection_volume(&config, ck, &scene.dataset, &cache, &encoders, &mut log)?;
    let views: Vec<usize> = (0..scene.dataset.len()).collect();
    for (k, obj) in scene.objects.iter().enumerate() {
        let q = encoders.text.encode_text(&obj.caption)?;
        let iou = selection_iou(&ck.field, &scene.dataset, &views, &scene.masks[k], &q, 0.5, config.select.n_samples)?;
        println!("select {}: iou {iou:.3}", obj.caption);
    }
    println!("select: {:?} -> {:?}, {:.1}s", s.first.map(|r| r.total), s.last.map(|r| r.total), t.elapsed().as_secs_f64());
    Ok(())
}
