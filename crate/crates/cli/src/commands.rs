use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use conrf_core::encoders::{EncoderSet, EncoderSpec, ToySpec};
use conrf_core::evaluation::{FeatureDistance, PairPolicy, DEFAULT_LONG_STRIDE};
use conrf_core::image::Image;
use conrf_core::pipeline::{orbit_path, Renderer, DEFAULT_RENDER_SAMPLES};
use conrf_core::scene_io::{load_style_corpus, Camera};
use conrf_core::selection::MultiSpatialCache;
use conrf_core::synthetic::{toy_encoder_spec, toy_scene, toy_style_images, write_toy_scene, write_toy_styles, ToySceneConfig};
use conrf_core::training::{
    build_selection_cache, train_feature_field, train_selection_volume, train_stylization, Checkpoint, MetricsLog,
    StyleSet, TrainConfig,
};
use conrf_core::{Error, Result};

use crate::config::{Overrides, RunConfig};
use crate::request::{decode_image, PoseSpec, RenderRequest, StyleSource, StyleStore};
use crate::service::{self, AppState};

/// Feature radiance fields with zero-shot text and image stylization.
#[derive(Debug, Parser)]
#[command(name = "conrf", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic two-object scene, a style corpus and a matching config.
    MakeToy(MakeToyArgs),
    /// Precompute multi-spatial image features for the selection stage.
    BuildCache(ConfigArgs),
    /// Stage 1: reconstruct the feature field.
    TrainField(TrainArgs),
    /// Stage 2: train the mapping network and decoder on a style corpus.
    TrainStyle(StageArgs),
    /// Stage 3: train the selection head.
    TrainSelect(StageArgs),
    /// Render stylized views.
    Render(RenderArgs),
    /// Score multi-view consistency over the stored views.
    Eval(EvalArgs),
    /// Run the HTTP rendering service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 80)]
    pub styles: usize,
    #[arg(long, default_value_t = 16)]
    pub heldout: usize,
    #[arg(long, default_value_t = 64)]
    pub style_size: usize,
    /// Seed of the style corpus.
    #[arg(long, default_value_t = 1)]
    pub style_seed: u64,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the stage's step count.
    #[arg(long)]
    pub steps: Option<usize>,
    /// JSON-lines metrics log; defaults to `metrics.jsonl` in the output directory.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Checkpoint from the previous stage.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stage 2 only: drop the feature-statistics loss.
    #[arg(long)]
    pub no_feature_loss: bool,
}

#[derive(Debug, Args)]
pub struct StyleArgs {
    #[arg(long, conflicts_with = "style_image")]
    pub style_text: Option<String>,
    /// PNG or JPEG style image.
    #[arg(long)]
    pub style_image: Option<PathBuf>,
}

impl StyleArgs {
    fn source(&self, store: &StyleStore) -> Result<Option<StyleSource>> {
        style_source(&self.style_text, &self.style_image, store)
    }
}

fn style_source(text: &Option<String>, image: &Option<PathBuf>, store: &StyleStore) -> Result<Option<StyleSource>> {
    Ok(match (text, image) {
        (Some(t), _) => Some(StyleSource::Text(t.clone())),
        (None, Some(p)) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            Some(StyleSource::ImageId(store.insert(decode_image(&bytes)?)))
        }
        (None, None) => None,
    })
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Named view stored in the checkpoint; defaults to the first one.
    #[arg(long, conflicts_with_all = ["camera", "path"])]
    pub view: Option<String>,
    /// JSON camera: `{"intrinsics": {...}, "c2w": [[..]; 3], "near", "far"}`.
    #[arg(long, conflicts_with = "path")]
    pub camera: Option<PathBuf>,
    /// Trajectory, e.g. `orbit:24`. `--out` is then a directory.
    #[arg(long)]
    pub path: Option<String>,
    /// Without a style the unstylized content is decoded.
    #[command(flatten)]
    pub style: StyleArgs,
    /// Region that keeps the first style; the rest gets the second.
    #[arg(long)]
    pub content_text: Option<String>,
    #[arg(long, conflicts_with = "style2_image")]
    pub style2_text: Option<String>,
    #[arg(long)]
    pub style2_image: Option<PathBuf>,
    /// Selection threshold on cosine similarity, in [-1, 1].
    #[arg(long, default_value_t = crate::request::DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    pub threshold: f32,
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RENDER_SAMPLES)]
    pub samples: usize,
    /// Output PNG (or directory for `--path`).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the selection overlay of a local render here.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PairsArg {
    Short,
    Long,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub style: StyleArgs,
    #[arg(long, value_enum, default_value_t = PairsArg::Both)]
    pub pairs: PairsArg,
    #[arg(long, default_value_t = DEFAULT_LONG_STRIDE)]
    pub long_stride: usize,
    /// Add a perceptual distance computed on the checkpoint's style-encoder features.
    #[arg(long)]
    pub perceptual: bool,
    #[arg(long, default_value_t = DEFAULT_RENDER_SAMPLES)]
    pub samples: usize,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint directories to load; repeatable.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
}

/// Process exit status for an error: 2 for bad configuration or missing inputs, 3 for missing
/// capabilities, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) | Error::CacheMiss(_) | Error::Format { .. } => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Capability(_) => 3,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToy(a) => make_toy(&a),
        Command::BuildCache(a) => build_cache(&a),
        Command::TrainField(a) => train_field(&a),
        Command::TrainStyle(a) => train_style(&a),
        Command::TrainSelect(a) => train_select(&a),
        Command::Render(a) => render(&a),
        Command::Eval(a) => eval(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn make_toy(a: &MakeToyArgs) -> Result<()> {
    let scene = toy_scene(&ToySceneConfig::default())?;
    write_toy_scene(&a.out.join("toy"), &scene)?;
    write_toy_styles(&a.out.join("styles"), a.styles, a.style_size, a.style_seed)?;
    let styles = toy_style_images(a.styles, a.style_size, a.style_seed);
    let mut train = TrainConfig::toy();
    train.stylize.style_resolution = a.style_size;
    train.model.encoders = EncoderSpec::Toy(toy_encoder_spec(&scene, &styles, ToySpec::default())?);
    let mut config = RunConfig {
        train,
        ..RunConfig::default()
    };
    config.data.scene = Some("toy".into());
    config.data.styles = Some("styles".into());
    config.data.cache = Some("cache".into());
    config.data.heldout_styles = a.heldout;
    let path = a.out.join("config.toml");
    std::fs::write(&path, config.to_toml()?)?;
    println!("{}", path.display());
    Ok(())
}

fn load_config(a: &ConfigArgs, stage_steps: Option<(&str, Option<usize>)>) -> Result<RunConfig> {
    let mut o = Overrides {
        seed: a.seed,
        ..Overrides::default()
    };
    if let Some((key, Some(steps))) = stage_steps {
        o.values.push((format!("{key}.steps"), steps.into()));
    }
    RunConfig::load(a.config.as_deref(), &o)
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    Checkpoint::load(dir)
}

fn metrics_log(a: &TrainArgs) -> Result<MetricsLog> {
    MetricsLog::open(&a.metrics.clone().unwrap_or_else(|| a.out.join("metrics.jsonl")))
}

fn build_cache(a: &ConfigArgs) -> Result<()> {
    let config = load_config(a, None)?;
    let dataset = config.data.load_scene()?;
    let encoders = EncoderSet::build(&config.train.model.encoders)?;
    let cache = MultiSpatialCache::new(config.data.cache_root()?)?;
    let hits = build_selection_cache(&dataset, &encoders, &config.train.select.windows, &cache)?;
    println!("{} views cached ({hits} already present) in {}", dataset.len(), cache.root().display());
    Ok(())
}

fn train_field(a: &TrainArgs) -> Result<()> {
    let config = load_config(&a.config, Some(("field", a.steps)))?;
    let dataset = config.data.load_scene()?;
    let encoders = EncoderSet::build(&config.train.model.encoders)?;
    let mut log = metrics_log(a)?;
    let (mut ck, summary) = train_feature_field(&config.train, &dataset, &encoders, &mut log)?;
    ck.save(&a.out)?;
    if let Some(last) = summary.last {
        eprintln!("field: {} steps, final loss {:.5}", summary.steps, last.total);
    }
    println!("{}", a.out.display());
    Ok(())
}

fn train_style(a: &StageArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut config = load_config(&a.train.config, Some(("stylize", a.train.steps)))?;
    if a.no_feature_loss {
        config.train.stylize.feature_loss = false;
    }
    let dataset = config.data.load_scene()?;
    let encoders = EncoderSet::build(&config.train.model.encoders)?;
    let corpus = load_style_corpus(
        config.data.styles_root()?,
        config.train.stylize.style_resolution,
        config.train.seed,
    )?;
    let images = corpus.iter().collect::<Result<Vec<Image>>>()?;
    let set = StyleSet::split(images, config.data.heldout_styles)?;
    let mut log = metrics_log(&a.train)?;
    let (mut ck, summary) = train_stylization(&config.train, ck, &dataset, &set, &encoders, &mut log)?;
    ck.save(&a.train.out)?;
    if !summary.heldout.is_empty() {
        eprintln!(
            "stylize: {} steps, held-out feature loss {:.4} -> {:.4}",
            summary.steps,
            summary.heldout_initial(),
            summary.heldout_final()
        );
    }
    println!("{}", a.train.out.display());
    Ok(())
}

fn train_select(a: &StageArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let config = load_config(&a.train.config, Some(("select", a.train.steps)))?;
    let dataset = config.data.load_scene()?;
    let encoders = EncoderSet::build(&config.train.model.encoders)?;
    let cache = MultiSpatialCache::new(config.data.cache_root()?)?;
    let mut log = metrics_log(&a.train)?;
    let (mut ck, summary) = train_selection_volume(&config.train, ck, &dataset, &cache, &encoders, &mut log)?;
    ck.save(&a.train.out)?;
    if let Some(last) = summary.last {
        eprintln!("select: {} steps, final loss {:.5}", summary.steps, last.total);
    }
    println!("{}", a.train.out.display());
    Ok(())
}

/// Builds the request `conrf render` issues for one pose; the service accepts the same JSON.
pub fn render_request(a: &RenderArgs, pose: PoseSpec, store: &StyleStore) -> Result<RenderRequest> {
    let mut r = RenderRequest::new(pose, a.style.source(store)?);
    r.style2 = style_source(&a.style2_text, &a.style2_image, store)?;
    r.content = a.content_text.clone();
    r.threshold = a.threshold;
    r.width = a.width;
    r.height = a.height;
    r.n_samples = Some(a.samples);
    Ok(r)
}

fn render(a: &RenderArgs) -> Result<()> {
    let renderer = Renderer::new(load_checkpoint(&a.checkpoint)?)?;
    let store = StyleStore::default();
    let views = &renderer.checkpoint().manifest.views;
    let poses: Vec<PoseSpec> = match (&a.view, &a.camera, &a.path) {
        (Some(v), _, _) => vec![PoseSpec::View(v.clone())],
        (_, Some(p), _) => {
            let camera: Camera = serde_json::from_slice(&std::fs::read(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            vec![PoseSpec::Camera(camera)]
        }
        (_, _, Some(path)) => {
            let n = parse_orbit(path)?;
            let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
            orbit_path(&cams, n)?.into_iter().map(PoseSpec::Camera).collect()
        }
        _ => {
            let first = views.first().ok_or_else(|| Error::Checkpoint("checkpoint stores no views".into()))?;
            vec![PoseSpec::View(first.name.clone())]
        }
    };
    let trajectory = a.path.is_some();
    if trajectory {
        std::fs::create_dir_all(&a.out)?;
    }
    for (i, pose) in poses.into_iter().enumerate() {
        let spec = render_request(a, pose, &store)?.to_spec(&store)?;
        let out = renderer.render(&spec)?;
        let path = if trajectory {
            a.out.join(format!("{i:04}.png"))
        } else {
            a.out.clone()
        };
        out.image.save_png(&path)?;
        if let (Some(dest), Some(overlay)) = (&a.overlay, &out.overlay) {
            let dest = if trajectory {
                dest.join(format!("{i:04}.png"))
            } else {
                dest.clone()
            };
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent)?;
            }
            overlay.save_png(&dest)?;
        }
        println!("{}", path.display());
    }
    Ok(())
}

pub fn parse_orbit(path: &str) -> Result<usize> {
    path.strip_prefix("orbit:")
        .and_then(|n| n.parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("unknown path {path:?}; expected orbit:N")))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let renderer = Renderer::new(load_checkpoint(&a.checkpoint)?)?;
    let store = StyleStore::default();
    let style = a.style.source(&store)?.map(|s| store.resolve(&s)).transpose()?;
    let policy = PairPolicy {
        short: a.pairs != PairsArg::Long,
        long_stride: (a.pairs != PairsArg::Short).then_some(a.long_stride),
    };
    let metric = a.perceptual.then(|| FeatureDistance {
        encoder: renderer.encoders().style.clone(),
    });
    let report = renderer.consistency(
        style,
        &policy,
        metric.as_ref().map(|m| m as &dyn conrf_core::evaluation::PerceptualMetric),
        a.samples,
    )?;
    if let Some(parent) = a.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, serde_json::to_vec_pretty(&report)?)?;
    print!("{}", report.table());
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let mut renderers = Vec::new();
    for dir in &a.checkpoint {
        let r = Renderer::new(load_checkpoint(dir)?)?;
        eprintln!("loaded {} from {}", r.id(), dir.display());
        renderers.push(r);
    }
    let state = AppState::new(renderers);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, a.addr))?;
    Ok(())
}
