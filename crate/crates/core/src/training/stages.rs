use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var};
use candle_nn::Optimizer;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EmbeddingVector, EncoderSet, StyleFeatureMap};
use crate::error::{Error, Result};
use crate::feature_field::{
    sample_points, FeatureField, FieldGrads, Heads, ParamGroups, RenderGrads, DENSITY_ACTIVATION,
};
use crate::image::{psnr, Image};
use crate::nn;
use crate::scene_io::{PixelSelection, RayBatch, SceneDataset, Split};
use crate::selection::{mask_from_similarity, similarity_map, MultiSpatialCache, MultiSpatialFeatureMap};
use crate::style_core::{
    planar_to_ray_major, ray_major_to_planar, render_features, stats_from_feature_map, transfer_tensor, Decoder,
    MappingNetwork, StyleStatistics,
};

use super::checkpoint::{Checkpoint, Manifest, NamedCamera, RngState, CHECKPOINT_FORMAT};
use super::losses::{
    layer_stats, loss_clip_field, loss_consistency, loss_style_feature, loss_stylized, mse, mse_with_grad,
    photometric_loss,
};
use super::{AdamConfig, DivergenceGuard, LossReport, MetricsLog, SliceAdam, Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSummary {
    pub steps: usize,
    pub last: Option<LossReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StylizeSummary {
    pub steps: usize,
    pub last: Option<LossReport>,
    /// Held-out style feature loss at each evaluation, starting with step 0.
    pub heldout: Vec<(usize, f64)>,
}

impl StylizeSummary {
    pub fn heldout_initial(&self) -> f64 {
        self.heldout.first().map_or(f64::NAN, |v| v.1)
    }

    pub fn heldout_final(&self) -> f64 {
        self.heldout.last().map_or(f64::NAN, |v| v.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectSummary {
    pub steps: usize,
    pub first: Option<LossReport>,
    pub last: Option<LossReport>,
}

/// Style images for stage 2, split into a training and a held-out part.
#[derive(Clone, Debug)]
pub struct StyleSet {
    pub train: Vec<Image>,
    pub heldout: Vec<Image>,
}

impl StyleSet {
    /// The last `heldout` images are held out.
    pub fn split(mut images: Vec<Image>, heldout: usize) -> Result<Self> {
        if heldout >= images.len() {
            return Err(Error::Config(format!(
                "cannot hold out {heldout} of {} style images",
                images.len()
            )));
        }
        let tail = images.split_off(images.len() - heldout);
        Ok(Self {
            train: images,
            heldout: tail,
        })
    }
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

fn train_views(dataset: &SceneDataset) -> Result<Vec<usize>> {
    let v = dataset.indices(Split::Train);
    if v.is_empty() {
        return Err(Error::Empty(format!("dataset {} has no training views", dataset.name)));
    }
    Ok(v)
}

fn check_feature_width(encoders: &EncoderSet, channels: usize) -> Result<()> {
    let want = encoders.style.feature_channels();
    if want != channels {
        return Err(Error::Config(format!(
            "field has {channels} feature channels but the style encoder's {} layer has {want}",
            encoders.style.layer_names()[encoders.style.feature_layer()]
        )));
    }
    Ok(())
}

/// Pooled channel statistics of the style encoder's feature layer over the given views.
fn content_statistics(maps: &[StyleFeatureMap]) -> Result<StyleStatistics> {
    let c = maps[0].channels;
    let total: usize = maps.iter().map(|m| m.width * m.height).sum();
    let mut values = Vec::with_capacity(c * total);
    for k in 0..c {
        for m in maps {
            values.extend_from_slice(m.channel(k));
        }
    }
    stats_from_feature_map(&StyleFeatureMap {
        channels: c,
        height: 1,
        width: total,
        values,
        layer: maps[0].layer.clone(),
    })
}

/// Random `(x0, y0, w, h)` window of side `patch` inside a `w x h` grid; the whole grid when
/// `patch` is 0 or does not fit.
fn patch_window(w: usize, h: usize, patch: usize, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    if patch == 0 || patch >= w || patch >= h {
        return (0, 0, w, h);
    }
    (rng.random_range(0..=w - patch), rng.random_range(0..=h - patch), patch, patch)
}

fn window_indices(width: usize, (x0, y0, w, h): (usize, usize, usize, usize)) -> Vec<usize> {
    (y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| y * width + x)).collect()
}

fn gather_rows(values: &[f32], width: usize, idx: &[usize]) -> Vec<f32> {
    idx.iter().flat_map(|&i| values[i * width..(i + 1) * width].iter().copied()).collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

struct ViewTargets {
    rays: RayBatch,
    /// Normalized feature-layer targets, ray-major.
    features: Vec<f32>,
    width: usize,
    height: usize,
    image: Image,
}

/// Stage 1: fits density and color to the training views photometrically, distills the style
/// encoder's normalized feature layer into the feature grid and trains the decoder to map
/// un-normalized rendered features back to the views.
pub fn train_feature_field(
    config: &TrainConfig,
    dataset: &SceneDataset,
    encoders: &EncoderSet,
    log: &mut MetricsLog,
) -> Result<(Checkpoint, FieldSummary)> {
    config.validate()?;
    let fc = &config.field;
    let mut field_config = config.model.field.clone();
    field_config.rgb_head = true;
    field_config.clip_channels = None;
    let c = field_config.feature_channels;
    check_feature_width(encoders, c)?;
    let views = train_views(dataset)?;
    let stride = encoders.style.feature_stride();

    let mut rng = stage_rng(config.seed, Stage::Field);
    let mut field = FeatureField::new(field_config, dataset.bbox)?;
    let mapping = MappingNetwork::new(config.model.mapping.clone(), encoders.image.width(), c, &mut rng)?;
    let decoder = Decoder::new(config.model.decoder.clone(), c, &mut rng)?;
    if decoder.stride() != stride {
        return Err(Error::Config(format!(
            "decoder upsamples by {} but the style encoder's feature layer has stride {stride}",
            decoder.stride()
        )));
    }

    let maps: Vec<StyleFeatureMap> = views
        .iter()
        .map(|&v| encoders.style.extract(&dataset.views[v].image))
        .collect::<Result<_>>()?;
    let content_stats = content_statistics(&maps)?;
    let mut targets = Vec::with_capacity(views.len());
    for (&v, map) in views.iter().zip(&maps) {
        let view = &dataset.views[v];
        let rays = view.camera.rays(&PixelSelection::Strided(stride))?;
        let (w, h) = (view.camera.intrinsics.width / stride, view.camera.intrinsics.height / stride);
        if (map.width, map.height) != (w, h) {
            return Err(Error::Shape(format!(
                "feature map of view {} is {}x{}, expected {w}x{h}",
                view.name, map.width, map.height
            )));
        }
        let n = w * h;
        let mut normalized = map.values.clone();
        for k in 0..c {
            for v in &mut normalized[k * n..(k + 1) * n] {
                *v = (*v - content_stats.mean[k]) / content_stats.std[k];
            }
        }
        targets.push(ViewTargets {
            rays,
            features: planar_to_ray_major(&normalized, n, c),
            width: w,
            height: h,
            image: view.image.crop(0, 0, w * stride, h * stride)?,
        });
    }

    let mut all_rays = RayBatch::default();
    let mut all_colors = Vec::new();
    for &v in &views {
        let view = &dataset.views[v];
        all_rays.extend(&view.camera.rays(&PixelSelection::Full)?);
        all_colors.extend_from_slice(view.image.data());
    }

    let grid_adam = AdamConfig {
        lr: fc.grid_lr,
        ..config.adam
    };
    let mut adam_density = SliceAdam::new(grid_adam, field.density.len());
    let mut adam_rgb = SliceAdam::new(grid_adam, field.rgb.as_ref().map_or(0, Vec::len));
    let mut adam_features = SliceAdam::new(grid_adam, field.features.len());
    let mut dec_opt = candle_nn::AdamW::new(
        decoder.vars(),
        AdamConfig {
            lr: fc.decoder_lr,
            ..config.adam
        }
        .candle(),
    )?;
    let (mean_c, std_c) = content_stats.tensors()?;
    let mut guard = DivergenceGuard::default();
    let mut last = None;

    for step in 0..fc.steps {
        // photometric
        let idx: Vec<usize> = (0..fc.batch_rays).map(|_| rng.random_range(0..all_rays.len())).collect();
        let batch = all_rays.select(&idx);
        let target = gather_rows(&all_colors, 3, &idx);
        let samples = sample_points(&batch, fc.n_samples, true, rng.random());
        let bundle = field.render(&samples, Heads::RGB)?;
        let rgb = bundle.rgb.as_deref().unwrap_or_default();
        let (photo, mut g_rgb, mut g_acc) = photometric_loss(rgb, &bundle.acc, &target);
        scale(&mut g_rgb, fc.photometric_weight);
        scale(&mut g_acc, fc.photometric_weight);

        // feature distillation and decoder reconstruction on one view
        let vi = rng.random_range(0..targets.len());
        let t = &targets[vi];
        let win = patch_window(t.width, t.height, fc.feature_patch, &mut rng);
        let fidx = window_indices(t.width, win);
        let frays = t.rays.select(&fidx);
        let fsamples = sample_points(&frays, fc.n_samples, true, rng.random());
        let fbundle = field.render(&fsamples, Heads::FEATURE)?;
        let feats = fbundle.features.as_deref().unwrap_or_default();
        let ftarget = gather_rows(&t.features, c, &fidx);
        let (distill, mut g_feat) = mse_with_grad(feats, &ftarget);
        scale(&mut g_feat, fc.distill_weight);

        let (pw, ph) = (win.2, win.3);
        let n = pw * ph;
        let fvar = Var::from_tensor(&nn::planar_tensor(&ray_major_to_planar(feats, n, c), c, ph, pw)?)?;
        let acc = Tensor::from_vec(fbundle.acc.clone(), (1, 1, ph, pw), &Device::Cpu)?;
        let x = transfer_tensor(fvar.as_tensor(), &acc, &mean_c, &std_c)?;
        let out = decoder.forward(&x)?;
        let gt = t.image.crop(win.0 * stride, win.1 * stride, pw * stride, ph * stride)?;
        let gt = nn::planar_tensor(&gt.to_planar(), 3, ph * stride, pw * stride)?;
        let recon_t = mse(&out, &gt)?;
        let recon = scalar(&recon_t)?;

        let report = LossReport {
            photometric: Some(photo),
            distill: Some(distill),
            recon: Some(recon),
            total: fc.photometric_weight * photo + fc.distill_weight * distill + fc.recon_weight * recon,
            ..Default::default()
        };
        log.record(Stage::Field, step, &report)?;
        if guard.check(step, &report)? {
            let grads = (recon_t * fc.recon_weight)?.backward()?;
            if let Some(gf) = grads.get(fvar.as_tensor()) {
                let gf = planar_to_ray_major(&gf.flatten_all()?.to_vec1::<f32>()?, n, c);
                for (a, b) in g_feat.iter_mut().zip(gf) {
                    *a += b;
                }
            }
            dec_opt.step(&grads)?;

            let mut pg = field.zero_grads(ParamGroups {
                density: true,
                rgb: true,
                ..Default::default()
            });
            field.backward(
                &samples,
                &RenderGrads {
                    rgb: Some(&g_rgb),
                    acc: Some(&g_acc),
                    ..Default::default()
                },
                &mut pg,
            )?;
            let mut fg = field.zero_grads(ParamGroups {
                features: true,
                ..Default::default()
            });
            field.backward(
                &fsamples,
                &RenderGrads {
                    features: Some(&g_feat),
                    ..Default::default()
                },
                &mut fg,
            )?;
            adam_density.step(&mut field.density, pg.density.as_deref().unwrap_or_default());
            if let (Some(p), Some(g)) = (field.rgb.as_mut(), pg.rgb.as_deref()) {
                adam_rgb.step(p, g);
            }
            adam_features.step(&mut field.features, fg.features.as_deref().unwrap_or_default());
        }
        last = Some(report);
    }

    let mut steps = BTreeMap::new();
    steps.insert(Stage::Field, fc.steps);
    let mut ck = Checkpoint {
        manifest: Manifest {
            format: CHECKPOINT_FORMAT,
            dataset: dataset.name.clone(),
            stages: vec![Stage::Field],
            steps,
            field: field.config().clone(),
            bbox: dataset.bbox,
            density_activation: DENSITY_ACTIVATION.into(),
            channels: c,
            embedding_dim: encoders.image.width(),
            mapping: config.model.mapping.clone(),
            decoder: config.model.decoder.clone(),
            encoders: encoders.spec.clone(),
            views: dataset
                .views
                .iter()
                .map(|v| NamedCamera {
                    name: v.name.clone(),
                    camera: v.camera.clone(),
                })
                .collect(),
            config: config.clone(),
            rng: RngState::capture(&rng),
            arrays: BTreeMap::new(),
        },
        field,
        mapping,
        decoder,
        content_stats,
    };
    ck.mark_stage(Stage::Field, fc.steps, &rng);
    Ok((
        ck,
        FieldSummary {
            steps: fc.steps,
            last,
        },
    ))
}

fn scale(v: &mut [f32], s: f64) {
    if s != 1.0 {
        let s = s as f32;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// Mean PSNR of the RGB head, composited on white, over the training views.
pub fn training_psnr(field: &FeatureField, dataset: &SceneDataset, n_samples: usize) -> Result<f64> {
    let views = train_views(dataset)?;
    let mut total = 0.0;
    for &v in &views {
        let view = &dataset.views[v];
        let k = &view.camera.intrinsics;
        let bundle = field.render_rays(&view.camera.rays(&PixelSelection::Full)?, n_samples, Heads::RGB)?;
        let rgb = bundle.rgb.unwrap_or_default();
        let data: Vec<f32> = rgb
            .chunks_exact(3)
            .zip(&bundle.acc)
            .flat_map(|(c, a)| [c[0] + 1.0 - a, c[1] + 1.0 - a, c[2] + 1.0 - a])
            .collect();
        total += psnr(&Image::new(k.width, k.height, data)?, &view.image, None)?;
    }
    Ok(total / views.len() as f64)
}

/// Precomputed encodings of one style image.
struct PreparedStyle {
    embedding: Vec<f32>,
    /// Feature-layer statistics.
    mean: Vec<f32>,
    std: Vec<f32>,
    /// `(1 x C, 1 x C)` statistics of every style layer.
    layers: Vec<(Tensor, Tensor)>,
}

fn prepare_styles(images: &[Image], encoders: &EncoderSet, resolution: Option<usize>) -> Result<Vec<PreparedStyle>> {
    let layer = encoders.style.feature_layer();
    images
        .iter()
        .map(|img| {
            let img = match resolution {
                Some(r) if img.width() != r || img.height() != r => img.square_resize(r),
                _ => img.clone(),
            };
            let embedding = encoders.image.encode_image(&img)?.values;
            let x = nn::planar_tensor(&img.to_planar(), 3, img.height(), img.width())?;
            let layers = layer_stats(&encoders.style.forward(&x)?)?;
            let (m, s) = &layers[layer];
            Ok(PreparedStyle {
                embedding,
                mean: m.flatten_all()?.to_vec1()?,
                std: s.flatten_all()?.to_vec1()?,
                layers,
            })
        })
        .collect()
}

fn stack_rows(rows: impl Iterator<Item = Vec<f32>>, width: usize) -> Result<Tensor> {
    let data: Vec<f32> = rows.flatten().collect();
    let n = data.len() / width;
    Ok(Tensor::from_vec(data, (n, width), &Device::Cpu)?)
}

fn feature_loss_over(mapping: &MappingNetwork, styles: &[&PreparedStyle]) -> Result<Tensor> {
    let d = mapping.input_dim();
    let c = mapping.channels();
    let e = stack_rows(styles.iter().map(|s| s.embedding.clone()), d)?;
    let (m, s) = mapping.forward(&e)?;
    let mv = stack_rows(styles.iter().map(|s| s.mean.clone()), c)?;
    let sv = stack_rows(styles.iter().map(|s| s.std.clone()), c)?;
    Ok(loss_style_feature(&mv, &sv, &m, &s)?)
}

/// Style feature loss of the mapping network averaged over a set of style images.
pub fn heldout_feature_loss(mapping: &MappingNetwork, images: &[Image], encoders: &EncoderSet, resolution: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("no held-out style images".into()));
    }
    let prepared = prepare_styles(images, encoders, Some(resolution))?;
    let refs: Vec<&PreparedStyle> = prepared.iter().collect();
    scalar(&feature_loss_over(mapping, &refs)?)
}

/// Stage 2: trains the mapping network and the decoder with a frozen field. Each step decodes
/// one view transferred with the style encoder's statistics of a style image (VGG branch) and
/// with the mapping network's prediction from its joint embedding (CLIP branch).
pub fn train_stylization(
    config: &TrainConfig,
    mut ck: Checkpoint,
    dataset: &SceneDataset,
    styles: &StyleSet,
    encoders: &EncoderSet,
    log: &mut MetricsLog,
) -> Result<(Checkpoint, StylizeSummary)> {
    config.validate()?;
    if !ck.has_stage(Stage::Field) {
        return Err(Error::Config("stylization needs a checkpoint with a trained field".into()));
    }
    let sc = &config.stylize;
    let c = ck.field.feature_channels();
    check_feature_width(encoders, c)?;
    if ck.mapping.input_dim() != encoders.image.width() {
        return Err(Error::Config(format!(
            "mapping network expects {}-d embeddings, the image encoder produces {}",
            ck.mapping.input_dim(),
            encoders.image.width()
        )));
    }
    if styles.train.is_empty() {
        return Err(Error::Empty("no training style images".into()));
    }
    let stride = encoders.style.feature_stride();
    let layer = encoders.style.feature_layer();
    let views = train_views(dataset)?;
    let mut rng = stage_rng(config.seed, Stage::Stylize);

    let mut cached = Vec::with_capacity(views.len());
    for &v in &views {
        let (fi, _) = render_features(&ck.field, &dataset.views[v].camera, stride, sc.n_samples, Heads::FEATURE)?;
        cached.push(fi.tensors()?);
    }
    let train = prepare_styles(&styles.train, encoders, Some(sc.style_resolution))?;
    let heldout = prepare_styles(&styles.heldout, encoders, Some(sc.style_resolution))?;
    let heldout_refs: Vec<&PreparedStyle> = heldout.iter().collect();

    let mut vars = ck.mapping.vars();
    vars.extend(ck.decoder.vars());
    let mut opt = candle_nn::AdamW::new(
        vars,
        AdamConfig {
            lr: sc.lr,
            ..config.adam
        }
        .candle(),
    )?;
    let mut guard = DivergenceGuard::default();
    let mut last = None;
    let mut curve = Vec::new();
    let eval = |mapping: &MappingNetwork| -> Result<Option<f64>> {
        if heldout_refs.is_empty() {
            return Ok(None);
        }
        Ok(Some(scalar(&feature_loss_over(mapping, &heldout_refs)?)?))
    };
    if let Some(v) = eval(&ck.mapping)? {
        curve.push((0, v));
    }

    for step in 0..sc.steps {
        let (f_full, a_full) = &cached[rng.random_range(0..cached.len())];
        let (_, _, fh, fw) = f_full.dims4()?;
        let (x0, y0, pw, ph) = patch_window(fw, fh, sc.feature_patch, &mut rng);
        let f = f_full.narrow(2, y0, ph)?.narrow(3, x0, pw)?;
        let a = a_full.narrow(2, y0, ph)?.narrow(3, x0, pw)?;

        let batch: Vec<&PreparedStyle> = if sc.style_batch <= train.len() {
            sample(&mut rng, train.len(), sc.style_batch).into_iter().map(|i| &train[i]).collect()
        } else {
            (0..sc.style_batch).map(|_| &train[rng.random_range(0..train.len())]).collect()
        };
        let lead = batch[0];

        let e = stack_rows(batch.iter().map(|s| s.embedding.clone()), ck.mapping.input_dim())?;
        let (mean_c, std_c) = ck.mapping.forward(&e)?;
        let mean_v = stack_rows(batch.iter().map(|s| s.mean.clone()), c)?;
        let std_v = stack_rows(batch.iter().map(|s| s.std.clone()), c)?;
        let l_f = loss_style_feature(&mean_v, &std_v, &mean_c, &std_c)?;

        let branch = |mean: &Tensor, std: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor)> {
            let x = transfer_tensor(&f, &a, mean, std)?;
            let img = ck.decoder.forward(&x)?;
            let outs = encoders.style.forward(&img)?;
            let stats = layer_stats(&outs)?;
            let (total, lc, ls) = loss_stylized(&outs[layer], &x.detach(), &stats, &lead.layers, sc.lambda_content, sc.lambda_style)?;
            Ok((img, total, lc, ls))
        };
        let (img_v, total_v, lc_v, ls_v) = branch(&mean_v.get(0)?, &std_v.get(0)?)?;
        let (img_c, total_c, lc_c, ls_c) = branch(&mean_c.get(0)?, &std_c.get(0)?)?;
        let l_consis = loss_consistency(&img_v, &img_c)?;

        let mut total = ((total_v + total_c)? + (&l_consis * sc.consistency_weight)?)?;
        if sc.feature_loss {
            total = (total + (&l_f * sc.feature_weight)?)?;
        }
        let report = LossReport {
            content: Some(scalar(&lc_v)? + scalar(&lc_c)?),
            style: Some(scalar(&ls_v)? + scalar(&ls_c)?),
            feature: Some(scalar(&l_f)?),
            consistency: Some(scalar(&l_consis)?),
            total: scalar(&total)?,
            ..Default::default()
        };
        log.record(Stage::Stylize, step, &report)?;
        if guard.check(step, &report)? {
            opt.backward_step(&total)?;
        }
        last = Some(report);

        let done = step + 1;
        if (sc.eval_every > 0 && done % sc.eval_every == 0) || done == sc.steps {
            if let Some(v) = eval(&ck.mapping)? {
                if curve.last().map(|p| p.0) != Some(done) {
                    curve.push((done, v));
                }
            }
        }
    }

    ck.mark_stage(Stage::Stylize, sc.steps, &rng);
    Ok((
        ck,
        StylizeSummary {
            steps: sc.steps,
            last,
            heldout: curve,
        },
    ))
}

/// Computes (or reuses) the multi-spatial maps of every training view.
/// Returns the number of cache hits.
pub fn build_selection_cache(
    dataset: &SceneDataset,
    encoders: &EncoderSet,
    windows: &crate::selection::WindowSpec,
    cache: &MultiSpatialCache,
) -> Result<usize> {
    let mut hits = 0;
    for v in train_views(dataset)? {
        let (_, hit) = cache.get_or_compute(&dataset.views[v].image, encoders.image.as_ref(), windows)?;
        hits += hit as usize;
    }
    Ok(hits)
}

/// Stage 3: adds a CLIP head and distills the cached multi-spatial maps into it. Density,
/// features, mapping network and decoder are untouched.
pub fn train_selection_volume(
    config: &TrainConfig,
    mut ck: Checkpoint,
    dataset: &SceneDataset,
    cache: &MultiSpatialCache,
    encoders: &EncoderSet,
    log: &mut MetricsLog,
) -> Result<(Checkpoint, SelectSummary)> {
    config.validate()?;
    if !ck.has_stage(Stage::Field) {
        return Err(Error::Config("selection training needs a checkpoint with a trained field".into()));
    }
    let sc = &config.select;
    let d = encoders.image.width();
    let views = train_views(dataset)?;
    let mut maps: Vec<MultiSpatialFeatureMap> = Vec::with_capacity(views.len());
    for &v in &views {
        let view = &dataset.views[v];
        let map = cache.load(&view.image, encoders.image.as_ref(), &sc.windows).ok_or_else(|| {
            Error::CacheMiss(format!(
                "no multi-spatial map for view {} under {}; run `conrf build-cache` first",
                view.name,
                cache.root().display()
            ))
        })?;
        maps.push(map);
    }
    let mut rng = stage_rng(config.seed, Stage::Select);

    let mut all_rays = RayBatch::default();
    let mut targets = Vec::new();
    for (&v, map) in views.iter().zip(&maps) {
        let rays = dataset.views[v].camera.rays(&PixelSelection::Full)?;
        targets.extend(map.gather(&rays.pixels));
        all_rays.extend(&rays);
    }

    if ck.field.clip_channels() != Some(d) {
        ck.field.add_clip_head(d);
    }
    let mut adam = SliceAdam::new(
        AdamConfig {
            lr: sc.grid_lr,
            ..config.adam
        },
        ck.field.clip.as_ref().map_or(0, Vec::len),
    );
    let mut guard = DivergenceGuard::default();
    let (mut first, mut last) = (None, None);
    for step in 0..sc.steps {
        let idx: Vec<usize> = (0..sc.batch_rays).map(|_| rng.random_range(0..all_rays.len())).collect();
        let batch = all_rays.select(&idx);
        let target = gather_rows(&targets, d, &idx);
        let samples = sample_points(&batch, sc.n_samples, true, rng.random());
        let bundle = ck.field.render(&samples, Heads::CLIP)?;
        let (loss, mut grad) = loss_clip_field(bundle.clip.as_deref().unwrap_or_default(), &target);
        scale(&mut grad, sc.clip_weight);
        let report = LossReport {
            clip: Some(loss),
            total: sc.clip_weight * loss,
            ..Default::default()
        };
        log.record(Stage::Select, step, &report)?;
        if guard.check(step, &report)? {
            let mut g: FieldGrads = ck.field.zero_grads(ParamGroups {
                clip: true,
                ..Default::default()
            });
            ck.field.backward(
                &samples,
                &RenderGrads {
                    clip: Some(&grad),
                    ..Default::default()
                },
                &mut g,
            )?;
            if let (Some(p), Some(g)) = (ck.field.clip.as_mut(), g.clip.as_deref()) {
                adam.step(p, g);
            }
        }
        if first.is_none() {
            first = Some(report.clone());
        }
        last = Some(report);
    }
    ck.mark_stage(Stage::Select, sc.steps, &rng);
    Ok((
        ck,
        SelectSummary {
            steps: sc.steps,
            first,
            last,
        },
    ))
}

/// Mean intersection-over-union between the thresholded similarity of the rendered CLIP head
/// to `query` and ground-truth masks, one per listed view.
pub fn selection_iou(
    field: &FeatureField,
    dataset: &SceneDataset,
    views: &[usize],
    masks: &[Vec<bool>],
    query: &EmbeddingVector,
    threshold: f32,
    n_samples: usize,
) -> Result<f64> {
    if views.is_empty() || views.len() != masks.len() {
        return Err(Error::Config("need one ground-truth mask per evaluated view".into()));
    }
    let mut total = 0.0;
    for (&v, gt) in views.iter().zip(masks) {
        let view = dataset.view(v)?;
        let bundle = field.render_rays(&view.camera.rays(&PixelSelection::Full)?, n_samples, Heads::CLIP)?;
        let sel = mask_from_similarity(&similarity_map(query, bundle.clip.as_deref().unwrap_or_default())?, threshold)?;
        if sel.mask.len() != gt.len() {
            return Err(Error::Shape("mask resolution does not match the view".into()));
        }
        let inter = sel.mask.iter().zip(gt).filter(|(a, b)| **a && **b).count();
        let union = sel.mask.iter().zip(gt).filter(|(a, b)| **a || **b).count();
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / views.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_windows_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (x0, y0, w, h) = patch_window(10, 7, 4, &mut rng);
            assert!(x0 + w <= 10 && y0 + h <= 7 && w == 4 && h == 4);
        }
        assert_eq!(patch_window(10, 7, 0, &mut rng), (0, 0, 10, 7));
        assert_eq!(window_indices(4, (1, 1, 2, 2)), vec![5, 6, 9, 10]);
    }

    #[test]
    fn style_split_holds_out_the_tail() {
        let imgs: Vec<Image> = (0..5).map(|i| Image::filled(2, 2, [i as f32 / 5.0; 3])).collect();
        let s = StyleSet::split(imgs.clone(), 2).unwrap();
        assert_eq!(s.train.len(), 3);
        assert_eq!(s.heldout[0], imgs[3]);
        assert!(StyleSet::split(imgs, 5).is_err());
    }
}
