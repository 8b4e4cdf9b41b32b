//! Reconstruction (Stage1) and stylization (Stage2) training.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::feature_renderer::{self, LevelFeatureMaps, RayBundle, RenderSettings};
use crate::graph::{Graph, Var};
use crate::mlfa::Level;
use crate::model::{self, Model};
use crate::nn::{self, Adam};
use crate::perceptual_encoder::{upsample_to, Encoder, StyleFeatures};
use crate::scene_field::{PosedImage, SceneField};
use crate::stats::{channel_stats, STD_EPS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Adaptor and decoder rate during reconstruction.
    pub lr_stage1: f64,
    /// Normalization and generator rate during stylization.
    pub lr_style: f64,
    /// Decoder rate during stylization.
    pub lr_decoder: f64,
    /// Style-loss weight.
    pub lambda: f64,
    /// Whole views per reconstruction step.
    pub views_per_step: usize,
    pub seed: u64,
    pub render: RenderSettings,
    /// Log every this many iterations (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr_stage1: 1e-3,
            lr_style: 1e-3,
            lr_decoder: 1e-5,
            lambda: 30.0,
            views_per_step: 1,
            seed: 0,
            render: RenderSettings::default(),
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), Config, "lambda must be non-negative");
        for (name, lr) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_style", self.lr_style),
            ("lr_decoder", self.lr_decoder),
        ] {
            ensure!(lr > 0.0 && lr.is_finite(), Config, "{} must be positive", name);
        }
        ensure!(self.views_per_step >= 1, Config, "views_per_step must be at least 1");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportKind {
    /// Columns `l_f, l_r, l_g`.
    Reconstruction,
    /// Columns `l_c, l_s, l_cs`.
    Stylization,
}

#[derive(Clone, Debug)]
pub struct LossRow {
    pub iteration: usize,
    /// First view of the step.
    pub view: usize,
    pub style: Option<usize>,
    /// `[L_f, L_r, L_g]` or `[L_c, L_s, L_cs]`.
    pub losses: [f64; 3],
    pub seconds: f64,
}

/// Per-iteration losses. Equality ignores wall-clock time.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub kind: ReportKind,
    pub rows: Vec<LossRow>,
}

impl PartialEq for LossReport {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.iteration == b.iteration && a.view == b.view && a.style == b.style && a.losses == b.losses
            })
    }
}

impl LossReport {
    pub fn new(kind: ReportKind) -> Self {
        Self { kind, rows: Vec::new() }
    }

    pub fn header(&self) -> &'static str {
        match self.kind {
            ReportKind::Reconstruction => "iteration,view,style,l_f,l_r,l_g,seconds",
            ReportKind::Stylization => "iteration,view,style,l_c,l_s,l_cs,seconds",
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(self.header());
        out.push('\n');
        for r in &self.rows {
            let style = r.style.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:.9e},{:.9e},{:.9e},{:.3}",
                r.iteration, r.view, style, r.losses[0], r.losses[1], r.losses[2], r.seconds
            );
        }
        out
    }

    pub fn first(&self) -> Option<&LossRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&LossRow> {
        self.rows.last()
    }

    /// Mean of column `k` over the first or last `n` rows.
    pub fn window_mean(&self, k: usize, n: usize, tail: bool) -> f64 {
        let n = n.min(self.rows.len()).max(1);
        let rows = if tail {
            &self.rows[self.rows.len().saturating_sub(n)..]
        } else {
            &self.rows[..n.min(self.rows.len())]
        };
        rows.iter().map(|r| r.losses[k]).sum::<f64>() / rows.len().max(1) as f64
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean squared error between a decoded image and its ground truth.
pub fn rgb_recovery_loss(decoded: &Tensor, ground_truth: &Tensor) -> Result<f64> {
    ensure!(
        decoded.shape() == ground_truth.shape(),
        Shape,
        "decoded {:?} vs ground truth {:?}",
        decoded.shape(),
        ground_truth.shape()
    );
    Ok(mse(decoded, ground_truth))
}

/// `Σ_ℓ mse(μ_ℓ(a), μ_ℓ(b)) + mse(σ_ℓ(a), σ_ℓ(b))` over the three taps.
pub fn style_loss(a: &StyleFeatures, b: &StyleFeatures) -> Result<f64> {
    let mut total = 0.0;
    for level in Level::ALL {
        let (sa, sb) = (channel_stats(a.level(level), STD_EPS), channel_stats(b.level(level), STD_EPS));
        ensure!(sa.len() == sb.len(), Shape, "{} tap widths differ", level.name());
        let n = sa.len() as f64;
        total += sa.iter().zip(&sb).map(|(x, y)| (x.0 - y.0).powi(2)).sum::<f64>() / n;
        total += sa.iter().zip(&sb).map(|(x, y)| (x.1 - y.1).powi(2)).sum::<f64>() / n;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleContentLoss {
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

/// Content term against the rendered high-level map (before normalization and
/// injection), style term against the style image's statistics.
pub fn style_content_loss(
    stylized: &Tensor,
    content_maps: &LevelFeatureMaps,
    style_img: &Tensor,
    encoder: &Encoder,
    lambda: f64,
) -> Result<StyleContentLoss> {
    let sf = encoder.encode_levels(stylized)?;
    let tf = encoder.encode_levels(style_img)?;
    let style = style_loss(&sf, &tf)?;
    let target = content_maps.level(Level::High);
    let (_, h, w) = target.chw()?;
    let up = upsample_to(sf.level(Level::High), h, w)?;
    ensure!(
        up.shape() == target.shape(),
        Shape,
        "stylized high tap {:?} vs content map {:?}",
        up.shape(),
        target.shape()
    );
    let content = mse(&up, target);
    Ok(StyleContentLoss {
        content,
        style,
        total: content + lambda * style,
    })
}

/// Everything a reconstruction step needs for one view.
#[derive(Clone, Debug)]
pub struct ReconstructionView {
    pub bundle: RayBundle,
    /// Encoder taps of the ground truth upsampled to view resolution.
    pub targets: [Tensor; 3],
    pub image: Tensor,
}

pub fn prepare_reconstruction(
    scene: &SceneField,
    views: &[PosedImage],
    encoder: &Encoder,
    settings: &RenderSettings,
) -> Result<Vec<ReconstructionView>> {
    ensure!(!views.is_empty(), Config, "no ground-truth views");
    views
        .iter()
        .map(|v| {
            let (c, h, w) = v.image.chw()?;
            ensure!(
                c == 3 && h == v.camera.height && w == v.camera.width,
                Config,
                "view image {:?} does not match a {}x{} camera",
                v.image.shape(),
                v.camera.height,
                v.camera.width
            );
            let enc = encoder.encode_levels(&v.image)?;
            let mut targets = Vec::with_capacity(3);
            for m in &enc.maps {
                targets.push(upsample_to(m, h, w)?);
            }
            Ok(ReconstructionView {
                bundle: feature_renderer::trace_view(scene, &v.camera, settings),
                targets: targets.try_into().unwrap(),
                image: v.image.clone(),
            })
        })
        .collect()
}

/// `(L_f, L_r, L_g)` on the tape for one view; model params must be bound.
pub fn reconstruction_loss_graph(g: &mut Graph, model: &Model, view: &ReconstructionView) -> Result<[Var; 3]> {
    let (maps, rgb) = model.reconstruct_graph(g, &view.bundle)?;
    let mut l_f: Option<Var> = None;
    for &level in model.variant.active_levels() {
        let i = level.index();
        let t = g.constant(view.targets[i].clone());
        ensure!(
            g.value(maps[i]).shape() == view.targets[i].shape(),
            Shape,
            "{} map {:?} vs target {:?}",
            level.name(),
            g.value(maps[i]).shape(),
            view.targets[i].shape()
        );
        let d = g.sub(maps[i], t);
        let term = g.mean_square(d);
        l_f = Some(match l_f {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let l_f = l_f.expect("at least one active level");
    let gt = g.constant(view.image.clone());
    let d = g.sub(rgb, gt);
    let l_r = g.mean_square(d);
    let l_g = g.add(l_f, l_r);
    Ok([l_f, l_r, l_g])
}

fn stage1_lr(name: &str, lr: f64) -> Option<f64> {
    (model::is_adaptor_mlp(name) || model::is_decoder(name)).then_some(lr)
}

fn stage2_lr(name: &str, cfg: &TrainConfig) -> Option<f64> {
    if model::is_lin(name) || model::is_generator(name) {
        Some(cfg.lr_style)
    } else if model::is_decoder(name) {
        Some(cfg.lr_decoder)
    } else {
        None
    }
}

fn sum_scaled(g: &mut Graph, vars: &[Var], k: f64) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    if vars.len() > 1 {
        acc = g.scale(acc, k);
    }
    acc
}

/// Optimizes adaptor MLPs and decoder against `L_g`; the scene is frozen.
pub fn train_stage1(model: &mut Model, views: &[ReconstructionView], cfg: &TrainConfig) -> Result<LossReport> {
    cfg.validate()?;
    ensure!(!views.is_empty(), Config, "no ground-truth views");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut report = LossReport::new(ReportKind::Reconstruction);
    let k = cfg.views_per_step.min(views.len());
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let picks: Vec<usize> = if k == views.len() {
            (0..k).collect()
        } else {
            index::sample(&mut rng, views.len(), k).into_vec()
        };
        let mut g = Graph::new();
        g.bind_params(&model.params, |n| stage1_lr(n, 1.0).is_some());
        let mut parts = Vec::with_capacity(k);
        for &v in &picks {
            parts.push(reconstruction_loss_graph(&mut g, model, &views[v])?);
        }
        let inv = 1.0 / k as f64;
        let l_f = sum_scaled(&mut g, &parts.iter().map(|p| p[0]).collect::<Vec<_>>(), inv);
        let l_r = sum_scaled(&mut g, &parts.iter().map(|p| p[1]).collect::<Vec<_>>(), inv);
        let l_g = g.add(l_f, l_r);
        let losses = [g.value(l_f).item(), g.value(l_r).item(), g.value(l_g).item()];
        ensure!(
            losses.iter().all(|v| v.is_finite()),
            Validation,
            "non-finite reconstruction loss at iteration {}",
            it
        );
        let grads = nn::collect_grads(&g, &g.backward(l_g));
        adam.step(&mut model.params, &grads, |n| stage1_lr(n, cfg.lr_stage1));
        report.rows.push(LossRow {
            iteration: it,
            view: picks[0],
            style: None,
            losses,
            seconds: start.elapsed().as_secs_f64(),
        });
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            log::info!("stage1 it {it}: l_f {:.5} l_r {:.5}", losses[0], losses[1]);
        }
    }
    Ok(report)
}

/// `(L_c, L_s, L_cs)` on the tape; model and encoder params must be bound.
pub fn stylization_loss_graph(
    g: &mut Graph,
    model: &Model,
    encoder: &Encoder,
    content: &LevelFeatureMaps,
    style: &StyleFeatures,
    lambda: f64,
) -> Result<[Var; 3]> {
    let rgb = model.stylize_graph(g, content, model::StyleSource::single(style))?;
    let (_, h, w) = g.value(rgb).chw()?;
    ensure!(
        h % 4 == 0 && w % 4 == 0 && h >= 4 && w >= 4,
        Validation,
        "stylized views must be at least 4x4 and divisible by 4, got {}x{}",
        h,
        w
    );
    let taps = encoder.forward_graph(g, rgb);

    let mut terms = Vec::with_capacity(6);
    for level in Level::ALL {
        let stats = channel_stats(style.level(level), STD_EPS);
        let c = stats.len();
        let mu = g.constant(Tensor::from_vec(&[c], stats.iter().map(|s| s.0).collect())?);
        let sd = g.constant(Tensor::from_vec(&[c], stats.iter().map(|s| s.1).collect())?);
        let m = g.channel_mean(taps[level.index()]);
        let s = g.channel_std(taps[level.index()], STD_EPS);
        let dm = g.sub(m, mu);
        let ds = g.sub(s, sd);
        terms.push(g.mean_square(dm));
        terms.push(g.mean_square(ds));
    }
    let l_s = sum_scaled(g, &terms, 1.0);

    let up = g.upsample(taps[Level::High.index()], h, w);
    let target = g.constant(content.level(Level::High).clone());
    ensure!(
        g.value(up).shape() == content.level(Level::High).shape(),
        Shape,
        "stylized high tap {:?} vs content map {:?}",
        g.value(up).shape(),
        content.level(Level::High).shape()
    );
    let d = g.sub(up, target);
    let l_c = g.mean_square(d);
    let weighted = g.scale(l_s, lambda);
    let l_cs = g.add(l_c, weighted);
    Ok([l_c, l_s, l_cs])
}

/// `(view, style)` drawn for each stylization iteration.
pub fn stage2_schedule(seed: u64, iterations: usize, views: usize, styles: usize) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..iterations)
        .map(|_| (rng.gen_range(0..views), rng.gen_range(0..styles)))
        .collect()
}

/// Renders the content maps of every view once; they stay fixed in Stage2
/// because the scene and adaptor MLPs are frozen.
pub fn content_cache(
    model: &Model,
    scene: &SceneField,
    cameras: &[crate::camera::Camera],
    settings: &RenderSettings,
) -> Result<Vec<LevelFeatureMaps>> {
    cameras.iter().map(|c| model.content_maps(scene, c, settings)).collect()
}

/// Optimizes normalization, generators and decoder against `L_cs`.
pub fn train_stage2(
    model: &mut Model,
    encoder: &Encoder,
    content: &[LevelFeatureMaps],
    styles: &[StyleFeatures],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if styles.is_empty() {
        return Err(Error::Config("style corpus is empty".into()));
    }
    ensure!(!content.is_empty(), Config, "no content views");
    ensure!(
        encoder.channels == model.shape.level_channels(),
        Config,
        "encoder taps {:?} do not match model widths {:?}",
        encoder.channels,
        model.shape.level_channels()
    );
    let schedule = stage2_schedule(cfg.seed, cfg.iterations, content.len(), styles.len());
    let mut adam = Adam::new();
    let mut report = LossReport::new(ReportKind::Stylization);
    let start = Instant::now();
    for (it, &(v, s)) in schedule.iter().enumerate() {
        let mut g = Graph::new();
        g.bind_params(&model.params, |n| stage2_lr(n, cfg).is_some());
        g.bind_params(&encoder.store, |_| false);
        let [l_c, l_s, l_cs] = stylization_loss_graph(&mut g, model, encoder, &content[v], &styles[s], cfg.lambda)?;
        let losses = [g.value(l_c).item(), g.value(l_s).item(), g.value(l_cs).item()];
        ensure!(
            losses.iter().all(|x| x.is_finite()),
            Validation,
            "non-finite stylization loss at iteration {}",
            it
        );
        let grads = nn::collect_grads(&g, &g.backward(l_cs));
        adam.step(&mut model.params, &grads, |n| stage2_lr(n, cfg));
        report.rows.push(LossRow {
            iteration: it,
            view: v,
            style: Some(s),
            losses,
            seconds: start.elapsed().as_secs_f64(),
        });
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            log::info!("stage2 it {it}: l_c {:.5} l_s {:.5}", losses[0], losses[1]);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelShape, Variant};

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rgb_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_image(&mut rng, 4, 5);
        assert_eq!(rgb_recovery_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut()[7] += 0.5;
        assert!((rgb_recovery_loss(&a, &b).unwrap() - 0.25 / 60.0).abs() < 1e-15);
        let c = rand_image(&mut rng, 4, 5);
        let mut s = 0.0;
        for i in 0..60 {
            s += (a.data()[i] - c.data()[i]).powi(2);
        }
        assert!((rgb_recovery_loss(&a, &c).unwrap() - s / 60.0).abs() < 1e-12);
        assert!(rgb_recovery_loss(&a, &rand_image(&mut rng, 5, 4)).is_err());
    }

    fn content_of(encoder: &Encoder, img: &Tensor) -> LevelFeatureMaps {
        let f = encoder.encode_levels(img).unwrap();
        let (_, h, w) = img.chw().unwrap();
        LevelFeatureMaps {
            height: h,
            width: w,
            maps: f.maps.clone().map(|m| upsample_to(&m, h, w).unwrap()),
            opacity: vec![1.0; h * w],
        }
    }

    #[test]
    fn style_content_loss_cases() {
        let enc = Encoder::tiny(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(&mut rng, 8, 8);
        let content = content_of(&enc, &img);
        let l = style_content_loss(&img, &content, &img, &enc, 30.0).unwrap();
        assert_eq!(l.style, 0.0);
        assert_eq!(l.content, 0.0);

        let other = rand_image(&mut rng, 8, 8);
        let l0 = style_content_loss(&other, &content, &img, &enc, 0.0).unwrap();
        assert_eq!(l0.total, l0.content);

        // Direct statistics oracle.
        let l = style_content_loss(&other, &content, &img, &enc, 30.0).unwrap();
        let (a, b) = (enc.encode_levels(&other).unwrap(), enc.encode_levels(&img).unwrap());
        let mut expected = 0.0;
        for lvl in 0..3 {
            let (c, _, _) = a.maps[lvl].chw().unwrap();
            let n = a.maps[lvl].len() / c;
            for ch in 0..c {
                let stat = |t: &Tensor| {
                    let row = &t.data()[ch * n..(ch + 1) * n];
                    let m = row.iter().sum::<f64>() / n as f64;
                    let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
                    (m, (v + 1e-5).sqrt())
                };
                let ((ma, sa), (mb, sb)) = (stat(&a.maps[lvl]), stat(&b.maps[lvl]));
                expected += ((ma - mb).powi(2) + (sa - sb).powi(2)) / c as f64;
            }
        }
        assert!((l.style - expected).abs() < 1e-10);
        assert!((l.total - (l.content + 30.0 * l.style)).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_plain_losses() {
        let enc = Encoder::tiny(2);
        let shape = ModelShape::new(4, enc.channels);
        let model = Model::init(shape, Variant::FULL, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_image(&mut rng, 8, 8);
        let content = content_of(&enc, &img);
        let style_img = rand_image(&mut rng, 8, 8);
        let style = enc.encode_levels(&style_img).unwrap();

        let mut g = Graph::new();
        g.bind_params(&model.params, |_| false);
        g.bind_params(&enc.store, |_| false);
        let [l_c, l_s, l_cs] = stylization_loss_graph(&mut g, &model, &enc, &content, &style, 30.0).unwrap();
        let stylized = model.stylize(&content, model::StyleSource::single(&style)).unwrap();
        let plain = style_content_loss(&stylized, &content, &style_img, &enc, 30.0).unwrap();
        assert!((g.value(l_c).item() - plain.content).abs() < 1e-10);
        assert!((g.value(l_s).item() - plain.style).abs() < 1e-10);
        assert!((g.value(l_cs).item() - plain.total).abs() < 1e-9);
    }

    #[test]
    fn schedule_is_reproducible() {
        let a = stage2_schedule(5, 50, 8, 20);
        assert_eq!(a, stage2_schedule(5, 50, 8, 20));
        assert_ne!(a, stage2_schedule(6, 50, 8, 20));
        assert!(a.iter().all(|&(v, s)| v < 8 && s < 20));
    }

    #[test]
    fn zero_iterations_leave_parameters_untouched() {
        let enc = Encoder::tiny(3);
        let shape = ModelShape::new(4, enc.channels);
        let mut model = Model::init(shape, Variant::FULL, 0).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = rand_image(&mut rng, 8, 8);
        let content = vec![content_of(&enc, &img)];
        let styles = vec![enc.encode_levels(&img).unwrap()];
        let r = train_stage2(&mut model, &enc, &content, &styles, &cfg).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(model.params, before);
        assert!(matches!(
            train_stage2(&mut model, &enc, &content, &[], &cfg),
            Err(Error::Config(_))
        ));
        assert!(matches!(train_stage1(&mut model, &[], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn stage2_only_moves_style_groups() {
        let enc = Encoder::tiny(4);
        let shape = ModelShape::new(4, enc.channels);
        let mut model = Model::init(shape, Variant::FULL, 0).unwrap();
        let before = model.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let content: Vec<_> = (0..2).map(|_| content_of(&enc, &rand_image(&mut rng, 8, 8))).collect();
        let styles: Vec<_> = (0..3).map(|_| enc.encode_levels(&rand_image(&mut rng, 8, 8)).unwrap()).collect();
        let cfg = TrainConfig {
            iterations: 3,
            ..TrainConfig::default()
        };
        let r = train_stage2(&mut model, &enc, &content, &styles, &cfg).unwrap();
        for row in &r.rows {
            assert!((row.losses[2] - (row.losses[0] + 30.0 * row.losses[1])).abs() < 1e-6);
        }
        for (name, t) in before.iter() {
            let changed = model.params.get(name).unwrap() != t;
            if model::is_adaptor_mlp(name) {
                assert!(!changed, "{name} moved");
            }
        }
        assert!(before.names().any(|n| model::is_lin(n) && model.params.get(n) != before.get(n)));
        assert!(before.names().any(|n| model::is_generator(n) && model.params.get(n) != before.get(n)));
        let r2 = {
            let mut m2 = Model::init(shape, Variant::FULL, 0).unwrap();
            train_stage2(&mut m2, &enc, &content, &styles, &cfg).unwrap()
        };
        assert_eq!(r, r2);
    }
}
