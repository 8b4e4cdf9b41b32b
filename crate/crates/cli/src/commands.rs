use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use stylegrid_core::camera::orbit;
use stylegrid_core::checkpoint::Checkpoint;
use stylegrid_core::eval::{self, EvalViews, LpipsWeights};
use stylegrid_core::imageio::{load_rgb, save_rgb};
use stylegrid_core::manifest::{read_manifest, write_manifest};
use stylegrid_core::model::{self, StyleSource};
use stylegrid_core::properties::{self, Outcome};
use stylegrid_core::reference3d::{self, MultiViewStyle, StyleReference};
use stylegrid_core::scene_field::{pretrain, PosedImage};
use stylegrid_core::toy::{self, ToyScene};
use stylegrid_core::trainer::{self, LossReport};
use stylegrid_core::{Aabb, Camera, Error, Model, RunConfig, SceneField, Tensor, Trajectory, Variant};

pub enum Failure {
    Usage(String),
    Property(Vec<String>),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::UnknownKey(k)) => Failure::Usage(format!("unknown config key `{k}`")),
            Some(Error::Config(m)) => Failure::Usage(format!("config error: {m}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

type Outcome_<T> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "stylegrid", version, about = "Feature-grid radiance fields with zero-shot style transfer")]
pub struct Cli {
    /// `key = value` run configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the toy content scene, style object, style corpus and trajectory.
    GenToyScene(GenToyArgs),
    /// Fit a scene field to posed views.
    PretrainScene(PretrainArgs),
    /// Train adaptor MLPs and decoder on a pre-trained scene.
    TrainGrid(TrainGridArgs),
    /// Train normalization, generators and decoder on a style corpus.
    TrainStyle(TrainStyleArgs),
    /// Stylize one view or a trajectory with a 2D style image.
    Stylize(StylizeArgs),
    /// Stylize a trajectory with a posed multi-view style object.
    #[command(name = "stylize-3d")]
    Stylize3d(Stylize3dArgs),
    /// Assign different styles to the low, mid and high levels.
    Mix(MixArgs),
    /// Style/content discrepancy report over trained variants.
    Eval(EvalArgs),
    /// Multi-view consistency ratio between two views.
    ConsistencyCheck(ConsistencyArgs),
    /// Numeric oracles, gradient checks, checkpoint round trip and freezing.
    CheckProperties(CheckArgs),
}

#[derive(Args, Debug)]
pub struct GenToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// View size in pixels (defaults to `image_size`).
    #[arg(long)]
    pub size: Option<usize>,
    /// Content views on the orbit (defaults to `views`).
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub style_size: usize,
    #[arg(long, default_value_t = 12)]
    pub trajectory_frames: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Camera manifest of the training views.
    #[arg(long)]
    pub views: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Feature width of the fitted grid (defaults to `basic_channels`).
    #[arg(long)]
    pub channels: Option<usize>,
    /// Half-width of the axis-aligned scene box centred at the origin.
    #[arg(long, default_value_t = 1.0)]
    pub extent: f64,
}

#[derive(Args, Debug)]
pub struct TrainGridArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub views: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured variant.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainStyleArgs {
    /// Reconstruction checkpoint to start from.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub views: PathBuf,
    /// Directory of style images (defaults to `style_corpus`).
    #[arg(long)]
    pub styles: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the checkpoint's variant (sharing one reconstruction run).
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Args, Debug)]
pub struct Inputs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Camera manifest supplying intrinsics and indexed views.
    #[arg(long)]
    pub views: PathBuf,
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub style: PathBuf,
    /// View index into the manifest.
    #[arg(long, conflicts_with = "trajectory")]
    pub view: Option<usize>,
    /// Trajectory file; frames use the first view's intrinsics.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Output PNG for `--view`, directory for `--trajectory`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Stylize3dArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Content view index declared as the front.
    #[arg(long)]
    pub front_content: usize,
    /// Camera manifest of the style object's views.
    #[arg(long, required_unless_present = "style_image")]
    pub style_views: Option<PathBuf>,
    /// Style view index declared as the front.
    #[arg(long, default_value_t = 0)]
    pub front_style: usize,
    /// Scene checkpoint fitted to the style views (`pretrain-scene`).
    #[arg(long)]
    pub style_scene: Option<PathBuf>,
    /// Use a single 2D style image instead of a style object.
    #[arg(long, conflicts_with_all = ["style_views", "style_scene"])]
    pub style_image: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MixArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub view: usize,
    #[arg(long)]
    pub low: PathBuf,
    #[arg(long)]
    pub mid: PathBuf,
    #[arg(long)]
    pub high: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Emit the per-variant discrepancy table.
    #[arg(long, required = true)]
    pub variant_table: bool,
    #[arg(long)]
    pub scene: PathBuf,
    /// Evaluation views with ground-truth images.
    #[arg(long)]
    pub views: PathBuf,
    /// Directory of held-out style images.
    #[arg(long)]
    pub styles: PathBuf,
    /// `label=checkpoint_dir`, repeatable.
    #[arg(long = "checkpoint", value_parser = parse_labelled)]
    pub checkpoints: Vec<(String, PathBuf)>,
    /// Named-tensor file with calibrated `lpips.*` channel weights.
    #[arg(long)]
    pub lpips: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConsistencyArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub view_a: usize,
    #[arg(long)]
    pub view_b: usize,
    #[arg(long, required_unless_present = "identity")]
    pub style: Option<PathBuf>,
    /// Use identity injection (w = 1, b = 0) instead of a style.
    #[arg(long)]
    pub identity: bool,
    /// 3D tolerance of the analytic toy correspondences.
    #[arg(long, default_value_t = 0.04)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Random draws for the compositing and commutation oracles.
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    /// Coordinates probed per tensor in gradient checks (0: all).
    #[arg(long, default_value_t = 8)]
    pub probes: usize,
    /// Checkpoint to round-trip (a generated one when omitted).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint before a training stage, for the freezing diff.
    #[arg(long, requires = "after")]
    pub before: Option<PathBuf>,
    /// Checkpoint after the stage.
    #[arg(long, requires = "before")]
    pub after: Option<PathBuf>,
    /// Skip the short training runs used for freezing checks.
    #[arg(long)]
    pub skip_training: bool,
}

fn parse_labelled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or_else(|| format!("expected label=path, got `{s}`"))?;
    if label.is_empty() || label.contains(char::is_whitespace) || label.contains(',') {
        return Err(format!("bad label `{label}`"));
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

fn load_config(cli: &Cli) -> Outcome_<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_views(manifest: &Path) -> anyhow::Result<Vec<PosedImage>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|(camera, name)| {
            let image = load_rgb(dir.join(&name))?;
            let (_, h, w) = image.chw()?;
            if (h, w) != (camera.height, camera.width) {
                bail!("{name}: image is {w}x{h}, camera is {}x{}", camera.width, camera.height);
            }
            Ok(PosedImage { camera, image })
        })
        .collect()
}

fn load_cameras(manifest: &Path) -> anyhow::Result<Vec<Camera>> {
    let cams: Vec<Camera> = read_manifest(manifest)?.into_iter().map(|(c, _)| c).collect();
    if cams.is_empty() {
        bail!("{}: no views", manifest.display());
    }
    Ok(cams)
}

fn pick<'a>(cams: &'a [Camera], index: usize, what: &str) -> Outcome_<&'a Camera> {
    cams.get(index)
        .ok_or_else(|| Failure::Usage(format!("{what} {index} out of range ({} views)", cams.len())))
}

fn load_styles(dir: &Path) -> anyhow::Result<Vec<(String, Tensor)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("{}: no PNG style images", dir.display());
    }
    paths
        .into_iter()
        .map(|p| Ok((p.file_stem().unwrap().to_string_lossy().into_owned(), load_rgb(&p)?)))
        .collect()
}

fn load_model(dir: &Path) -> anyhow::Result<Model> {
    let ck = Checkpoint::load(dir)?;
    Model::from_checkpoint(&ck).with_context(|| format!("{}", dir.display()))
}

fn load_scene(dir: &Path) -> anyhow::Result<SceneField> {
    Ok(SceneField::from_checkpoint(&Checkpoint::load(dir)?)?)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_frames(dir: &Path, frames: &[Tensor]) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        save_rgb(dir.join(format!("frame_{i:04}.png")), f)?;
    }
    Ok(())
}

fn save_report(dir: &Path, report: &LossReport) -> anyhow::Result<()> {
    write_text(&dir.join("losses.csv"), &report.to_csv())
}

fn parse_variant(v: &str) -> Outcome_<Variant> {
    Variant::parse(v).map_err(|e| Failure::Usage(e.to_string()))
}

pub fn run(cli: Cli) -> Outcome_<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenToyScene(a) => gen_toy(&cfg, a),
        Command::PretrainScene(a) => pretrain_scene(&cfg, a),
        Command::TrainGrid(a) => train_grid(&cfg, a),
        Command::TrainStyle(a) => train_style(&cfg, a),
        Command::Stylize(a) => stylize(&cfg, a),
        Command::Stylize3d(a) => stylize_3d(&cfg, a),
        Command::Mix(a) => mix(&cfg, a),
        Command::Eval(a) => eval_table(&cfg, a),
        Command::ConsistencyCheck(a) => consistency(&cfg, a),
        Command::CheckProperties(a) => check_properties(&cfg, a),
    }
}

fn write_view_set(dir: &Path, views: &[PosedImage]) -> anyhow::Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut entries = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let name = format!("images/view_{i:03}.png");
        save_rgb(dir.join(&name), &v.image)?;
        entries.push((v.camera.clone(), name));
    }
    write_manifest(dir.join("cameras.txt"), &entries)?;
    Ok(())
}

fn gen_toy(cfg: &RunConfig, a: GenToyArgs) -> Outcome_<()> {
    let size = a.size.unwrap_or(cfg.image_size);
    let count = a.views.unwrap_or(cfg.views);
    if size == 0 || size % 4 != 0 || count == 0 || a.trajectory_frames == 0 {
        return Err(Failure::Usage("sizes and counts must be positive, image size divisible by 4".into()));
    }
    let out = &a.out;
    write_view_set(&out.join("content"), &ToyScene::three_spheres().views(count, size)).map_err(Failure::Runtime)?;
    write_view_set(&out.join("style_object"), &ToyScene::style_object().views(count, size)).map_err(Failure::Runtime)?;
    let (train, heldout) = toy::train_and_heldout_styles(a.style_size, cfg.seed);
    for (sub, set) in [("train", &train), ("heldout", &heldout)] {
        let d = out.join("styles").join(sub);
        fs::create_dir_all(&d).map_err(|e| Failure::Runtime(e.into()))?;
        for (i, s) in set.iter().enumerate() {
            save_rgb(d.join(format!("style_{i:02}.png")), s)?;
        }
    }
    let poses = orbit(
        a.trajectory_frames,
        toy::ORBIT_RADIUS,
        toy::ORBIT_HEIGHT,
        0.0,
        2.0 * std::f64::consts::PI,
    );
    Trajectory::new(poses)?.save(out.join("trajectory.txt"))?;
    write_text(&out.join("config.txt"), &cfg.to_text()).map_err(Failure::Runtime)?;
    log::info!("toy scene written to {}", out.display());
    Ok(())
}

fn pretrain_scene(cfg: &RunConfig, a: PretrainArgs) -> Outcome_<()> {
    let views = load_views(&a.views)?;
    let channels = a.channels.unwrap_or(cfg.basic_channels);
    if !(a.extent.is_finite() && a.extent > 0.0) {
        return Err(Failure::Usage(format!("--extent must be positive, got {}", a.extent)));
    }
    let mut scene = SceneField::new(
        cfg.scene_resolution,
        cfg.scene_rank,
        channels,
        Aabb::cube(a.extent),
        cfg.seed,
    );
    let losses = pretrain(&mut scene, &views, &cfg.pretrain_config())?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(e.into()))?;
    scene.to_checkpoint(&cfg.hash(), cfg.seed).save(&a.out)?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.9e}\n"));
    }
    write_text(&a.out.join("losses.csv"), &csv)?;
    log::info!("scene pre-training done: loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train_grid(cfg: &RunConfig, a: TrainGridArgs) -> Outcome_<()> {
    let variant = match &a.variant {
        Some(v) => parse_variant(v)?,
        None => cfg.variant,
    };
    let scene = load_scene(&a.scene)?;
    let views = load_views(&a.views)?;
    let encoder = cfg.encoder()?;
    let mut model = Model::init(cfg.model_shape(encoder.channels), variant, cfg.seed)?;
    let tc = cfg.train_config(cfg.stage1_iterations);
    let prepared = trainer::prepare_reconstruction(&scene, &views, &encoder, &tc.render)?;
    let report = trainer::train_stage1(&mut model, &prepared, &tc)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(e.into()))?;
    model.to_checkpoint("stage1", &cfg.hash(), cfg.seed).save(&a.out)?;
    save_report(&a.out, &report)?;
    if let (Some(f), Some(l)) = (report.first(), report.last()) {
        log::info!("stage1: rgb loss {:.5} -> {:.5}", f.losses[1], l.losses[1]);
    }
    Ok(())
}

fn train_style(cfg: &RunConfig, a: TrainStyleArgs) -> Outcome_<()> {
    let mut model = load_model(&a.model)?;
    if let Some(v) = &a.variant {
        model.variant = parse_variant(v)?;
    }
    let scene = load_scene(&a.scene)?;
    let cams = load_cameras(&a.views)?;
    let dir = a
        .styles
        .clone()
        .or_else(|| cfg.style_corpus.clone())
        .ok_or_else(|| Failure::Usage("no style corpus: pass --styles or set `style_corpus`".into()))?;
    let encoder = cfg.encoder()?;
    let styles = load_styles(&dir)?
        .iter()
        .map(|(_, s)| encoder.encode_levels(s))
        .collect::<stylegrid_core::Result<Vec<_>>>()?;
    let tc = cfg.train_config(cfg.stage2_iterations);
    let content = trainer::content_cache(&model, &scene, &cams, &tc.render)?;
    let report = trainer::train_stage2(&mut model, &encoder, &content, &styles, &tc)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(e.into()))?;
    model.to_checkpoint("stage2", &cfg.hash(), cfg.seed).save(&a.out)?;
    save_report(&a.out, &report)?;
    Ok(())
}

fn stylize(cfg: &RunConfig, a: StylizeArgs) -> Outcome_<()> {
    let model = load_model(&a.inputs.model)?;
    let scene = load_scene(&a.inputs.scene)?;
    let cams = load_cameras(&a.inputs.views)?;
    let encoder = cfg.encoder()?;
    let style = load_rgb(&a.style)?;
    let render = cfg.render_settings();
    match (a.view, &a.trajectory) {
        (Some(i), None) => {
            let cam = pick(&cams, i, "view")?;
            let feats = reference3d::image_style(&encoder, &style)?;
            let out = reference3d::stylize_view(&model, &scene, cam, &feats, &render)?;
            if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Failure::Runtime(e.into()))?;
            }
            save_rgb(&a.out, &out)?;
        }
        (None, Some(t)) => {
            let traj = Trajectory::load(t)?;
            let frames = reference3d::stylize_omniview(
                &traj,
                &cams[0],
                &cams[0].pose,
                &scene,
                &StyleReference::Image2d(style),
                &model,
                &encoder,
                &render,
            )?;
            save_frames(&a.out, &frames)?;
        }
        _ => return Err(Failure::Usage("pass exactly one of --view or --trajectory".into())),
    }
    Ok(())
}

fn stylize_3d(cfg: &RunConfig, a: Stylize3dArgs) -> Outcome_<()> {
    let model = load_model(&a.inputs.model)?;
    let scene = load_scene(&a.inputs.scene)?;
    let cams = load_cameras(&a.inputs.views)?;
    let front = pick(&cams, a.front_content, "front content view")?.clone();
    let traj = Trajectory::load(&a.trajectory)?;
    let encoder = cfg.encoder()?;
    let reference = if let Some(img) = &a.style_image {
        StyleReference::Image2d(load_rgb(img)?)
    } else {
        let manifest = a.style_views.as_ref().expect("clap enforces style views");
        let views = load_views(manifest)?;
        let style_front = views
            .get(a.front_style)
            .ok_or_else(|| Failure::Usage(format!("front style view {} out of range", a.front_style)))?
            .camera
            .pose;
        let mut mv = MultiViewStyle::new(views, None, style_front)?;
        if let Some(dir) = &a.style_scene {
            mv.field = Some(load_scene(dir)?);
        }
        StyleReference::MultiView(Box::new(mv))
    };
    let frames = reference3d::stylize_omniview(
        &traj,
        &front,
        &front.pose,
        &scene,
        &reference,
        &model,
        &encoder,
        &cfg.render_settings(),
    )?;
    save_frames(&a.out, &frames)?;
    log::info!("{} frames written to {}", frames.len(), a.out.display());
    Ok(())
}

fn mix(cfg: &RunConfig, a: MixArgs) -> Outcome_<()> {
    let model = load_model(&a.inputs.model)?;
    let scene = load_scene(&a.inputs.scene)?;
    let cams = load_cameras(&a.inputs.views)?;
    let cam = pick(&cams, a.view, "view")?;
    let encoder = cfg.encoder()?;
    let f = |p: &Path| -> anyhow::Result<_> { Ok(encoder.encode_levels(&load_rgb(p)?)?) };
    let (low, mid, high) = (f(&a.low)?, f(&a.mid)?, f(&a.high)?);
    let out = reference3d::mix_view(&model, &scene, cam, [&low, &mid, &high], &cfg.render_settings())?;
    save_rgb(&a.out, &out)?;
    Ok(())
}

fn eval_table(cfg: &RunConfig, a: EvalArgs) -> Outcome_<()> {
    if a.checkpoints.is_empty() {
        return Err(Failure::Usage("pass at least one --checkpoint label=dir".into()));
    }
    let scene = load_scene(&a.scene)?;
    let views = load_views(&a.views)?;
    let encoder = cfg.encoder()?;
    let styles: Vec<Tensor> = load_styles(&a.styles)?.into_iter().map(|(_, s)| s).collect();
    let weights = match &a.lpips {
        Some(p) => Some(LpipsWeights::from_store(&Checkpoint::load(p)?.tensors, encoder.channels)?),
        None => None,
    };
    let mut models = BTreeMap::new();
    for (label, dir) in &a.checkpoints {
        match load_model(dir) {
            Ok(m) => {
                models.insert(label.clone(), m);
            }
            Err(e) => log::warn!("{label}: {e:#}"),
        }
    }
    let entries: Vec<(String, Option<&Model>)> =
        a.checkpoints.iter().map(|(l, _)| (l.clone(), models.get(l))).collect();
    let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let originals: Vec<Tensor> = views.iter().map(|v| v.image.clone()).collect();
    let ev = EvalViews {
        scene: &scene,
        cameras: &cams,
        originals: &originals,
        render: cfg.render_settings(),
    };
    let table = eval::ablation_run(&entries, &ev, &styles, &encoder, weights.as_ref())?;
    let csv = table.to_csv();
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn consistency(cfg: &RunConfig, a: ConsistencyArgs) -> Outcome_<()> {
    let model = load_model(&a.inputs.model)?;
    let scene = load_scene(&a.inputs.scene)?;
    let cams = load_cameras(&a.inputs.views)?;
    let (ca, cb) = (pick(&cams, a.view_a, "view")?, pick(&cams, a.view_b, "view")?);
    let pairs = ToyScene::three_spheres().correspondences(ca, cb, a.tolerance);
    let identity = model.identity_params();
    let feats;
    let style = if a.identity {
        StyleSource::Params(&identity)
    } else {
        let encoder = cfg.encoder()?;
        feats = encoder.encode_levels(&load_rgb(a.style.as_ref().expect("clap enforces style"))?)?;
        StyleSource::single(&feats)
    };
    let ratio = eval::consistency_check(&model, &scene, (ca, cb), &pairs, style, &cfg.render_settings())?;
    println!("pairs,ratio");
    println!("{},{ratio:.9e}", pairs.len());
    Ok(())
}

fn check_properties(cfg: &RunConfig, a: CheckArgs) -> Outcome_<()> {
    let seed = cfg.seed;
    let mut outcomes: Vec<Outcome> = vec![
        properties::compositing_oracle(a.draws, seed),
        properties::injection_commutation(a.draws, seed),
        properties::mask_amplification(64),
    ];
    let probes = (a.probes > 0).then_some(a.probes);
    outcomes.extend(properties::gradient_checks(seed, probes)?);
    if !a.skip_training {
        outcomes.extend(properties::training_freezes(seed)?);
    }
    let ck = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => properties::sample_checkpoint(seed)?,
    };
    let scratch = tempfile::tempdir().map_err(|e| Failure::Runtime(e.into()))?;
    outcomes.push(properties::checkpoint_round_trip(&ck, scratch.path())?);
    if let (Some(b), Some(af)) = (&a.before, &a.after) {
        let (before, after) = (Checkpoint::load(b)?, Checkpoint::load(af)?);
        let allowed: fn(&str) -> bool = match after.header.stage.as_str() {
            "stage1" => |n| model::is_adaptor_mlp(n) || model::is_decoder(n),
            "stage2" => |n| model::is_lin(n) || model::is_generator(n) || model::is_decoder(n),
            other => return Err(Failure::Usage(format!("no freezing rule for stage `{other}`"))),
        };
        outcomes.push(properties::freeze_diff(
            &format!("freeze_{}_checkpoints", after.header.stage),
            &before.tensors,
            &after.tensors,
            allowed,
        ));
    }
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Property(failed))
    }
}
