//! Volume rendering of per-level point features into full-resolution
//! per-view feature maps.

use ndarray::ArrayView2;
use num_traits::Float;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::mlfa::{self, AdaptorShape, Level, LinParams, Stage};
use crate::params::ParamStore;
use crate::scene_field::{camera_ray, stratify, RaySettings, SceneField};
use crate::tensor::Tensor;

/// Accumulated-opacity threshold separating object from background.
pub const MASK_THRESHOLD: f64 = 0.5;

/// `ω_i = exp(−Σ_{q<i} σ_q Δ_q) · (1 − exp(−σ_i Δ_i))`.
pub fn compositing_weights<T: Float>(sigmas: &[T], deltas: &[T]) -> Result<Vec<T>> {
    ensure!(
        sigmas.len() == deltas.len(),
        Shape,
        "{} densities but {} deltas",
        sigmas.len(),
        deltas.len()
    );
    ensure!(
        sigmas.iter().all(|&s| s >= T::zero()),
        Validation,
        "densities must be non-negative"
    );
    ensure!(
        deltas.iter().all(|&d| d > T::zero()),
        Validation,
        "sample spacings must be positive"
    );
    Ok(weights_generic(sigmas, deltas))
}

fn weights_generic<T: Float>(sigmas: &[T], deltas: &[T]) -> Vec<T> {
    let mut optical_depth = T::zero();
    sigmas
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let tau = s * d;
            let w = (-optical_depth).exp() * (T::one() - (-tau).exp());
            optical_depth = optical_depth + tau;
            w
        })
        .collect()
}

pub(crate) fn weights_unchecked(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    weights_generic(sigmas, deltas)
}

/// `Σ_i ω_i f̄_i` for point features given as rows.
pub fn render_pixel_feature<T: Float>(weights: &[T], point_feats: &[Vec<T>]) -> Result<Vec<T>> {
    ensure!(
        weights.len() == point_feats.len(),
        Shape,
        "{} weights but {} point features",
        weights.len(),
        point_feats.len()
    );
    let c = point_feats.first().map_or(0, Vec::len);
    ensure!(
        point_feats.iter().all(|f| f.len() == c),
        Shape,
        "point features have inconsistent widths"
    );
    let mut out = vec![T::zero(); c];
    for (&w, f) in weights.iter().zip(point_feats) {
        for (o, &v) in out.iter_mut().zip(f) {
            *o = *o + w * v;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub rays: RaySettings,
    /// Rays traced per work item.
    pub chunk_rays: usize,
    /// Samples whose compositing weight is at or below this are skipped.
    pub weight_floor: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            rays: RaySettings::default(),
            chunk_rays: 4096,
            weight_floor: 1e-5,
        }
    }
}

/// Contributing samples of one view: basic features, weights and the pixel
/// each sample belongs to.
#[derive(Clone, Debug)]
pub struct RayBundle {
    pub height: usize,
    pub width: usize,
    /// `[S, C_b]`
    pub basic: Tensor,
    pub weights: Vec<f64>,
    pub pixels: Vec<usize>,
    /// Σ ω per pixel over all samples.
    pub opacity: Vec<f64>,
}

struct Traced {
    basic: Vec<f64>,
    weights: Vec<f64>,
    pixels: Vec<usize>,
    opacity: Vec<f64>,
}

fn trace_range(scene: &SceneField, camera: &Camera, settings: &RenderSettings, start: usize, end: usize) -> Traced {
    let bounds = scene.bounds();
    let w = camera.width;
    let mut out = Traced {
        basic: Vec::new(),
        weights: Vec::new(),
        pixels: Vec::new(),
        opacity: Vec::with_capacity(end - start),
    };
    for pix in start..end {
        let Some(ray) = camera_ray(camera, pix / w, pix % w, settings.rays.near, settings.rays.far, &bounds) else {
            out.opacity.push(0.0);
            continue;
        };
        let batch = stratify(&ray, settings.rays.samples, None);
        let sigmas: Vec<f64> = batch.positions.iter().map(|p| scene.opacity.query(p)).collect();
        let weights = weights_unchecked(&sigmas, &batch.deltas);
        out.opacity.push(weights.iter().sum());
        for (p, &wt) in batch.positions.iter().zip(&weights) {
            if wt <= settings.weight_floor {
                continue;
            }
            if let Some(f) = scene.grid.query(p) {
                out.basic.extend(f);
                out.weights.push(wt);
                out.pixels.push(pix);
            }
        }
    }
    out
}

/// Traces every pixel ray of `camera` through the frozen scene.
pub fn trace_view(scene: &SceneField, camera: &Camera, settings: &RenderSettings) -> RayBundle {
    let n = camera.width * camera.height;
    let chunk = settings.chunk_rays.max(1);
    let parts: Vec<Traced> = (0..n.div_ceil(chunk))
        .into_par_iter()
        .map(|i| trace_range(scene, camera, settings, i * chunk, ((i + 1) * chunk).min(n)))
        .collect();
    let cb = scene.grid.feature_dim;
    let mut basic = Vec::new();
    let mut weights = Vec::new();
    let mut pixels = Vec::new();
    let mut opacity = Vec::with_capacity(n);
    for p in parts {
        basic.extend(p.basic);
        weights.extend(p.weights);
        pixels.extend(p.pixels);
        opacity.extend(p.opacity);
    }
    let s = weights.len();
    RayBundle {
        height: camera.height,
        width: camera.width,
        basic: Tensor::from_vec(&[s, cb], basic).unwrap(),
        weights,
        pixels,
        opacity,
    }
}

/// Per-view feature maps at view resolution, one per level, plus the
/// accumulated opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFeatureMaps {
    pub height: usize,
    pub width: usize,
    /// `[C_ℓ, H, W]` for low, mid, high.
    pub maps: [Tensor; 3],
    /// `[H · W]`
    pub opacity: Vec<f64>,
}

impl LevelFeatureMaps {
    pub fn level(&self, level: Level) -> &Tensor {
        &self.maps[level.index()]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.opacity.iter().map(|&a| a > MASK_THRESHOLD).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.maps.iter().enumerate() {
            let (_, h, w) = m.chw()?;
            ensure!(
                h == self.height && w == self.width,
                Validation,
                "level {} map is {}x{}, expected {}x{}",
                i,
                h,
                w,
                self.height,
                self.width
            );
        }
        ensure!(
            self.opacity.len() == self.height * self.width,
            Validation,
            "opacity map has {} entries",
            self.opacity.len()
        );
        Ok(())
    }

    /// Named tensors `features.<view>.<level>` (each `[C, H, W]`) for debugging.
    pub fn to_params(&self, view: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for level in Level::ALL {
            s.insert(format!("features.{view}.{}", level.name()), self.level(level).clone());
        }
        s.insert(
            format!("features.{view}.opacity"),
            Tensor::from_vec(&[self.height, self.width], self.opacity.clone()).unwrap(),
        );
        s
    }
}

/// Composites a traced bundle into level maps with the adaptor (and, in
/// `Stage2`, the per-point normalization).
pub fn composite_bundle(
    store: &ParamStore,
    shape: &AdaptorShape,
    bundle: &RayBundle,
    stage: Stage,
) -> Result<LevelFeatureMaps> {
    let hw = bundle.height * bundle.width;
    let s = bundle.weights.len();
    let basic = ArrayView2::from_shape((s, shape.basic_channels), bundle.basic.data())
        .map_err(|e| crate::Error::Shape(e.to_string()))?;
    let maps = Level::ALL.map(|level| -> Result<Tensor> {
        let c = shape.level_channels[level.index()];
        let mut feats = mlfa::mlp_batch(store, shape, level, basic)?;
        if stage == Stage::Stage2 {
            let lin = LinParams::from_store(store, level)?;
            let sigma = lin.sigma();
            for mut row in feats.rows_mut() {
                for ((v, m), sg) in row.iter_mut().zip(&lin.mean).zip(&sigma) {
                    *v = (*v - m) / sg;
                }
            }
        }
        let mut map = vec![0.0; c * hw];
        for (i, row) in feats.rows().into_iter().enumerate() {
            let (w, pix) = (bundle.weights[i], bundle.pixels[i]);
            for (ch, v) in row.iter().enumerate() {
                map[ch * hw + pix] += w * v;
            }
        }
        Ok(Tensor::from_vec(&[c, bundle.height, bundle.width], map).unwrap())
    });
    let [low, mid, high] = maps;
    Ok(LevelFeatureMaps {
        height: bundle.height,
        width: bundle.width,
        maps: [low?, mid?, high?],
        opacity: bundle.opacity.clone(),
    })
}

/// Renders the three level maps of one view.
pub fn render_view(
    scene: &SceneField,
    store: &ParamStore,
    shape: &AdaptorShape,
    camera: &Camera,
    stage: Stage,
    settings: &RenderSettings,
) -> Result<LevelFeatureMaps> {
    ensure!(
        scene.grid.feature_dim == shape.basic_channels,
        Shape,
        "scene emits {} channels but the adaptor expects {}",
        scene.grid.feature_dim,
        shape.basic_channels
    );
    ensure!(camera.width > 0 && camera.height > 0, Validation, "empty camera");
    let bundle = trace_view(scene, camera, settings);
    composite_bundle(store, shape, &bundle, stage)
}

/// Level maps on the tape (Stage1 form: no normalization). Returns
/// `[C_ℓ, H, W]` variables for low, mid, high.
pub fn render_levels_graph(g: &mut Graph, depth: usize, bundle: &RayBundle) -> [Var; 3] {
    let hw = bundle.height * bundle.width;
    let x = g.constant(bundle.basic.clone());
    Level::ALL.map(|level| {
        let f = mlfa::mlp_graph(g, depth, level, x);
        let m = g.segment_sum(f, bundle.weights.clone(), bundle.pixels.clone(), hw);
        let c = g.value(m).shape()[0];
        g.reshape(m, &[c, bundle.height, bundle.width])
    })
}
