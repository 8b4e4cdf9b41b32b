//! Base radiance field: a plane/line factorized feature grid, a dense opacity
//! grid, ray sampling, and the photometric pre-training used to fit both to
//! posed views.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{ensure, Result};
use crate::nn::{self, Adam};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const UNIT_TOL: f64 = 1e-6;

/// Axis-aligned scene bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Parametric entry/exit distances of a ray through the box.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then_some((t0, t1))
    }

    fn to_tensor(self) -> Tensor {
        let mut v = self.min.to_vec();
        v.extend_from_slice(&self.max);
        Tensor::from_vec(&[2, 3], v).unwrap()
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        ensure!(t.shape() == [2, 3], Checkpoint, "bounds tensor must be [2, 3]");
        let d = t.data();
        let b = Self {
            min: [d[0], d[1], d[2]],
            max: [d[3], d[4], d[5]],
        };
        ensure!(
            (0..3).all(|a| b.min[a] < b.max[a]),
            Checkpoint,
            "degenerate scene bounds {:?}",
            b
        );
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn validate(&self) -> Result<()> {
        let norm = self.direction.norm();
        ensure!(
            (norm - 1.0).abs() <= UNIT_TOL,
            Validation,
            "ray direction must be unit length (|d| = {})",
            norm
        );
        ensure!(
            self.near >= 0.0 && self.near < self.far,
            Validation,
            "ray range must satisfy 0 <= near < far (near {}, far {})",
            self.near,
            self.far
        );
        Ok(())
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Depth-ordered samples along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub positions: Vec<Vector3<f64>>,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Stratified samples: bin midpoints, or a uniform offset per bin when
/// `jitter` is on (seeded). The last delta runs to `far`.
pub fn sample_ray(ray: &Ray, n_samples: usize, jitter: bool, seed: u64) -> Result<SampleBatch> {
    ensure!(n_samples >= 1, Validation, "n_samples must be at least 1");
    ray.validate()?;
    if jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(stratify(ray, n_samples, Some(&mut rng)))
    } else {
        Ok(stratify(ray, n_samples, None))
    }
}

pub(crate) fn stratify(ray: &Ray, n: usize, rng: Option<&mut ChaCha8Rng>) -> SampleBatch {
    let step = (ray.far - ray.near) / n as f64;
    let depths: Vec<f64> = match rng {
        Some(rng) => (0..n)
            .map(|i| ray.near + (i as f64 + rng.gen::<f64>()) * step)
            .collect(),
        None => (0..n).map(|i| ray.near + (i as f64 + 0.5) * step).collect(),
    };
    let mut deltas: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(ray.far - depths[n - 1]);
    // A jittered last sample can land on `far` exactly; keep deltas positive.
    for d in &mut deltas {
        *d = d.max(1e-12);
    }
    SampleBatch {
        positions: depths.iter().map(|&t| ray.at(t)).collect(),
        depths,
        deltas,
    }
}

/// Ray through pixel `(row, col)` clipped to the scene bounds and the
/// `[near, far]` camera range; `None` if it misses the volume.
pub fn camera_ray(camera: &Camera, row: usize, col: usize, near: f64, far: f64, bounds: &Aabb) -> Option<Ray> {
    let origin = camera.origin();
    let direction = camera.pixel_direction(row, col);
    let (t0, t1) = bounds.intersect(&origin, &direction)?;
    let (lo, hi) = (t0.max(near).max(0.0), t1.min(far));
    (lo < hi).then(|| Ray {
        origin,
        direction,
        near: lo,
        far: hi,
    })
}

/// Continuous lattice coordinate of `p` on an axis with `n` voxel centers.
fn axis_tap(p: f64, min: f64, max: f64, n: usize) -> (usize, usize, f64) {
    let u = ((p - min) / (max - min) * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = (u.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, u - i0 as f64)
}

/// Axis-pair layout: plane over axes `(a, b)`, line along the remaining axis.
pub const PLANE_AXES: [(usize, usize, usize); 3] = [(0, 1, 2), (0, 2, 1), (1, 2, 0)];

#[derive(Clone, Copy, Debug)]
struct FactorTaps {
    plane: [[(usize, f64); 4]; 3],
    line: [[(usize, f64); 2]; 3],
}

/// Low-rank plane/line factorization of a feature volume, projected to
/// `feature_dim` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedGrid {
    pub resolution: [usize; 3],
    pub rank: usize,
    pub feature_dim: usize,
    pub bounds: Aabb,
    /// `[rank, n_a, n_b]` per entry of [`PLANE_AXES`].
    pub planes: [Tensor; 3],
    /// `[rank, n_c]` per entry of [`PLANE_AXES`].
    pub lines: [Tensor; 3],
    /// `[feature_dim, rank]`.
    pub projection: Tensor,
}

impl FactorizedGrid {
    pub fn random(resolution: [usize; 3], rank: usize, feature_dim: usize, bounds: Aabb, rng: &mut impl Rng) -> Self {
        let planes = PLANE_AXES.map(|(a, b, _)| nn::normal(rng, &[rank, resolution[a], resolution[b]], 0.3));
        let lines = PLANE_AXES.map(|(_, _, c)| nn::normal(rng, &[rank, resolution[c]], 0.3));
        let projection = nn::he_normal(rng, &[feature_dim, rank], rank);
        Self {
            resolution,
            rank,
            feature_dim,
            bounds,
            planes,
            lines,
            projection,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.rank >= 1, Validation, "grid rank must be positive");
        ensure!(self.feature_dim >= 1, Validation, "feature_dim must be positive");
        ensure!(
            self.resolution.iter().all(|&n| n >= 1),
            Validation,
            "grid resolution must be positive"
        );
        for (p, &(a, b, c)) in PLANE_AXES.iter().enumerate() {
            ensure!(
                self.planes[p].shape() == [self.rank, self.resolution[a], self.resolution[b]],
                Shape,
                "plane {} has shape {:?}",
                p,
                self.planes[p].shape()
            );
            ensure!(
                self.lines[p].shape() == [self.rank, self.resolution[c]],
                Shape,
                "line {} has shape {:?}",
                p,
                self.lines[p].shape()
            );
        }
        ensure!(
            self.projection.shape() == [self.feature_dim, self.rank],
            Shape,
            "projection has shape {:?}",
            self.projection.shape()
        );
        Ok(())
    }

    fn taps(&self, p: &Vector3<f64>) -> FactorTaps {
        let t: [(usize, usize, f64); 3] = std::array::from_fn(|a| {
            axis_tap(p[a], self.bounds.min[a], self.bounds.max[a], self.resolution[a])
        });
        let plane = PLANE_AXES.map(|(a, b, _)| {
            let nb = self.resolution[b];
            let (a0, a1, ta) = t[a];
            let (b0, b1, tb) = t[b];
            [
                (a0 * nb + b0, (1.0 - ta) * (1.0 - tb)),
                (a0 * nb + b1, (1.0 - ta) * tb),
                (a1 * nb + b0, ta * (1.0 - tb)),
                (a1 * nb + b1, ta * tb),
            ]
        });
        let line = PLANE_AXES.map(|(_, _, c)| {
            let (c0, c1, tc) = t[c];
            [(c0, 1.0 - tc), (c1, tc)]
        });
        FactorTaps { plane, line }
    }

    /// Per-rank factor products `(φ, plane values, line values)`.
    fn factor_values(&self, taps: &FactorTaps) -> (Vec<f64>, [Vec<f64>; 3], [Vec<f64>; 3]) {
        let mut phi = vec![0.0; self.rank];
        let mut pv: [Vec<f64>; 3] = Default::default();
        let mut lv: [Vec<f64>; 3] = Default::default();
        for (p, &(a, b, c)) in PLANE_AXES.iter().enumerate() {
            let plane_len = self.resolution[a] * self.resolution[b];
            let line_len = self.resolution[c];
            let pd = self.planes[p].data();
            let ld = self.lines[p].data();
            pv[p] = (0..self.rank)
                .map(|r| taps.plane[p].iter().map(|&(i, w)| w * pd[r * plane_len + i]).sum())
                .collect();
            lv[p] = (0..self.rank)
                .map(|r| taps.line[p].iter().map(|&(i, w)| w * ld[r * line_len + i]).sum())
                .collect();
            for r in 0..self.rank {
                phi[r] += pv[p][r] * lv[p][r];
            }
        }
        (phi, pv, lv)
    }

    fn project(&self, phi: &[f64]) -> Vec<f64> {
        self.projection
            .data()
            .chunks(self.rank)
            .map(|row| row.iter().zip(phi).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Basic point feature at `position`; `None` marks an empty (out-of-bounds)
    /// sample whose feature is the zero vector.
    pub fn query(&self, position: &Vector3<f64>) -> Option<Vec<f64>> {
        if !self.bounds.contains(position) {
            return None;
        }
        let taps = self.taps(position);
        let (phi, _, _) = self.factor_values(&taps);
        Some(self.project(&phi))
    }
}

/// Basic feature with the empty flag: `(feature, is_empty)`.
pub fn query_basic_feature(grid: &FactorizedGrid, position: &Vector3<f64>) -> (Vec<f64>, bool) {
    match grid.query(position) {
        Some(f) => (f, false),
        None => (vec![0.0; grid.feature_dim], true),
    }
}

/// Dense non-negative density lattice, trilinearly interpolated.
#[derive(Clone, Debug, PartialEq)]
pub struct OpacityField {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    /// `[nx, ny, nz]`, all entries ≥ 0.
    pub density: Tensor,
}

impl OpacityField {
    pub fn empty(resolution: [usize; 3], bounds: Aabb) -> Self {
        Self {
            resolution,
            bounds,
            density: Tensor::zeros(&resolution),
        }
    }

    /// World-space center of voxel `(i, j, k)`.
    pub fn voxel_center(&self, idx: [usize; 3]) -> Vector3<f64> {
        Vector3::from_fn(|a, _| {
            let h = (self.bounds.max[a] - self.bounds.min[a]) / self.resolution[a] as f64;
            self.bounds.min[a] + (idx[a] as f64 + 0.5) * h
        })
    }

    pub fn set(&mut self, idx: [usize; 3], sigma: f64) {
        let [_, ny, nz] = self.resolution;
        self.density.data_mut()[(idx[0] * ny + idx[1]) * nz + idx[2]] = sigma.max(0.0);
    }

    fn taps(&self, p: &Vector3<f64>) -> [(usize, f64); 8] {
        let [_, ny, nz] = self.resolution;
        let t: [(usize, usize, f64); 3] = std::array::from_fn(|a| {
            axis_tap(p[a], self.bounds.min[a], self.bounds.max[a], self.resolution[a])
        });
        let mut out = [(0, 0.0); 8];
        for (n, o) in out.iter_mut().enumerate() {
            let pick = |a: usize| {
                let (i0, i1, ta) = t[a];
                if n >> (2 - a) & 1 == 1 {
                    (i1, ta)
                } else {
                    (i0, 1.0 - ta)
                }
            };
            let (i, wi) = pick(0);
            let (j, wj) = pick(1);
            let (k, wk) = pick(2);
            *o = ((i * ny + j) * nz + k, wi * wj * wk);
        }
        out
    }

    pub fn query(&self, position: &Vector3<f64>) -> f64 {
        if !self.bounds.contains(position) {
            return 0.0;
        }
        let d = self.density.data();
        self.taps(position).iter().map(|&(i, w)| w * d[i]).sum::<f64>().max(0.0)
    }
}

pub fn query_density(field: &OpacityField, position: &Vector3<f64>) -> f64 {
    field.query(position)
}

/// Linear RGB head used to fit the field photometrically.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHead {
    /// `[3, feature_dim]`
    pub weight: Tensor,
    /// `[3]`
    pub bias: Tensor,
}

impl ColorHead {
    fn logits(&self, feature: &[f64]) -> [f64; 3] {
        let c = feature.len();
        let w = self.weight.data();
        std::array::from_fn(|k| {
            self.bias.data()[k] + w[k * c..(k + 1) * c].iter().zip(feature).map(|(a, b)| a * b).sum::<f64>()
        })
    }

    pub fn rgb(&self, feature: &[f64]) -> [f64; 3] {
        self.logits(feature).map(nn::sigmoid)
    }
}

/// Frozen base scene: features, opacity and the photometric head.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneField {
    pub grid: FactorizedGrid,
    pub opacity: OpacityField,
    pub color: ColorHead,
}

/// Per-ray sampling parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySettings {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for RaySettings {
    fn default() -> Self {
        Self {
            samples: 32,
            near: 0.0,
            far: 100.0,
        }
    }
}

impl SceneField {
    pub fn new(resolution: usize, rank: usize, feature_dim: usize, bounds: Aabb, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = [resolution; 3];
        let grid = FactorizedGrid::random(res, rank, feature_dim, bounds, &mut rng);
        let mut opacity = OpacityField::empty(res, bounds);
        opacity.density.data_mut().fill(0.5);
        let color = ColorHead {
            weight: nn::normal(&mut rng, &[3, feature_dim], 0.1),
            bias: Tensor::zeros(&[3]),
        };
        Self { grid, opacity, color }
    }

    pub fn bounds(&self) -> Aabb {
        self.grid.bounds
    }

    pub fn to_params(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for p in 0..3 {
            s.insert(format!("{prefix}.grid.plane{p}"), self.grid.planes[p].clone());
            s.insert(format!("{prefix}.grid.line{p}"), self.grid.lines[p].clone());
        }
        s.insert(format!("{prefix}.grid.projection"), self.grid.projection.clone());
        s.insert(format!("{prefix}.bounds"), self.grid.bounds.to_tensor());
        s.insert(format!("{prefix}.density"), self.opacity.density.clone());
        s.insert(format!("{prefix}.color.weight"), self.color.weight.clone());
        s.insert(format!("{prefix}.color.bias"), self.color.bias.clone());
        s
    }

    pub fn from_params(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.require(&format!("{prefix}.{n}")).cloned();
        let bounds = Aabb::from_tensor(&get("bounds")?)?;
        let planes = [get("grid.plane0")?, get("grid.plane1")?, get("grid.plane2")?];
        let lines = [get("grid.line0")?, get("grid.line1")?, get("grid.line2")?];
        let projection = get("grid.projection")?;
        ensure!(projection.shape().len() == 2, Checkpoint, "projection must be a matrix");
        ensure!(planes[0].shape().len() == 3, Checkpoint, "plane factors must be rank-3");
        let rank = projection.shape()[1];
        let resolution = [planes[0].shape()[1], planes[0].shape()[2], planes[1].shape()[2]];
        let grid = FactorizedGrid {
            resolution,
            rank,
            feature_dim: projection.shape()[0],
            bounds,
            planes,
            lines,
            projection,
        };
        grid.validate()
            .map_err(|e| crate::error::Error::Checkpoint(format!("{prefix}: {e}")))?;
        let density = get("density")?;
        ensure!(density.shape() == resolution, Checkpoint, "density grid shape {:?}", density.shape());
        ensure!(
            density.data().iter().all(|&d| d >= 0.0 && d.is_finite()),
            Checkpoint,
            "density grid must be finite and non-negative"
        );
        let color = ColorHead {
            weight: get("color.weight")?,
            bias: get("color.bias")?,
        };
        ensure!(
            color.weight.shape() == [3, grid.feature_dim] && color.bias.shape() == [3],
            Checkpoint,
            "color head shape mismatch"
        );
        Ok(Self {
            grid,
            opacity: OpacityField {
                resolution,
                bounds,
                density,
            },
            color,
        })
    }

    pub fn to_checkpoint(&self, config_hash: &str, seed: u64) -> crate::checkpoint::Checkpoint {
        let header = crate::checkpoint::Header::new("scene", config_hash, seed);
        crate::checkpoint::Checkpoint::new(header, self.to_params("scene"))
    }

    pub fn from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Result<Self> {
        Self::from_params(&ck.tensors, "scene")
    }

    /// Photometric render of one view: `([3, H, W] rgb, accumulated opacity [H·W])`,
    /// composited over black.
    pub fn render_rgb(&self, camera: &Camera, settings: &RaySettings) -> (Tensor, Vec<f64>) {
        let (h, w) = (camera.height, camera.width);
        let bounds = self.bounds();
        let pixels: Vec<([f64; 3], f64)> = (0..h * w)
            .into_par_iter()
            .map(|pix| {
                let Some(ray) = camera_ray(camera, pix / w, pix % w, settings.near, settings.far, &bounds) else {
                    return ([0.0; 3], 0.0);
                };
                let batch = stratify(&ray, settings.samples, None);
                let sigmas: Vec<f64> = batch.positions.iter().map(|p| self.opacity.query(p)).collect();
                let weights = crate::feature_renderer::weights_unchecked(&sigmas, &batch.deltas);
                let mut rgb = [0.0; 3];
                for (p, &wt) in batch.positions.iter().zip(&weights) {
                    if wt == 0.0 {
                        continue;
                    }
                    if let Some(f) = self.grid.query(p) {
                        let c = self.color.rgb(&f);
                        for k in 0..3 {
                            rgb[k] += wt * c[k];
                        }
                    }
                }
                (rgb, weights.iter().sum())
            })
            .collect();
        let mut img = Tensor::zeros(&[3, h, w]);
        let acc = pixels.iter().map(|p| p.1).collect();
        for (pix, (rgb, _)) in pixels.iter().enumerate() {
            for k in 0..3 {
                img.data_mut()[k * h * w + pix] = rgb[k];
            }
        }
        (img, acc)
    }
}

/// A view with known camera and `[3, H, W]` linear RGB in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PosedImage {
    pub camera: Camera,
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub rays: RaySettings,
    pub lr_factors: f64,
    pub lr_projection: f64,
    pub lr_density: f64,
    pub lr_color: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            rays_per_batch: 1024,
            rays: RaySettings::default(),
            lr_factors: 0.02,
            lr_projection: 0.005,
            lr_density: 0.5,
            lr_color: 0.01,
            seed: 0,
        }
    }
}

struct SceneGrads {
    planes: [Vec<f64>; 3],
    lines: [Vec<f64>; 3],
    projection: Vec<f64>,
    density: Vec<f64>,
    color_w: Vec<f64>,
    color_b: Vec<f64>,
    loss: f64,
}

impl SceneGrads {
    fn zeros(scene: &SceneField) -> Self {
        Self {
            planes: std::array::from_fn(|p| vec![0.0; scene.grid.planes[p].len()]),
            lines: std::array::from_fn(|p| vec![0.0; scene.grid.lines[p].len()]),
            projection: vec![0.0; scene.grid.projection.len()],
            density: vec![0.0; scene.opacity.density.len()],
            color_w: vec![0.0; scene.color.weight.len()],
            color_b: vec![0.0; 3],
            loss: 0.0,
        }
    }

    fn add(&mut self, o: &SceneGrads) {
        fn axpy(a: &mut [f64], b: &[f64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for p in 0..3 {
            axpy(&mut self.planes[p], &o.planes[p]);
            axpy(&mut self.lines[p], &o.lines[p]);
        }
        axpy(&mut self.projection, &o.projection);
        axpy(&mut self.density, &o.density);
        axpy(&mut self.color_w, &o.color_w);
        axpy(&mut self.color_b, &o.color_b);
        self.loss += o.loss;
    }
}

struct SampleState {
    taps: Option<(FactorTaps, [(usize, f64); 8])>,
    phi: Vec<f64>,
    pv: [Vec<f64>; 3],
    lv: [Vec<f64>; 3],
    feature: Vec<f64>,
    rgb: [f64; 3],
}

/// Accumulates the photometric gradient of one ray; `scale` is `d loss / d (squared error)`.
fn ray_gradient(scene: &SceneField, target: [f64; 3], batch: &SampleBatch, scale: f64, g: &mut SceneGrads) {
    let grid = &scene.grid;
    let dens = scene.opacity.density.data();
    let n = batch.len();
    let mut sigmas = vec![0.0; n];
    let mut states = Vec::with_capacity(n);
    for (i, p) in batch.positions.iter().enumerate() {
        if !grid.bounds.contains(p) {
            states.push(SampleState {
                taps: None,
                phi: vec![],
                pv: Default::default(),
                lv: Default::default(),
                feature: vec![],
                rgb: [0.0; 3],
            });
            continue;
        }
        let dtaps = scene.opacity.taps(p);
        sigmas[i] = dtaps.iter().map(|&(k, w)| w * dens[k]).sum::<f64>().max(0.0);
        let ftaps = grid.taps(p);
        let (phi, pv, lv) = grid.factor_values(&ftaps);
        let feature = grid.project(&phi);
        let rgb = scene.color.rgb(&feature);
        states.push(SampleState {
            taps: Some((ftaps, dtaps)),
            phi,
            pv,
            lv,
            feature,
            rgb,
        });
    }
    let weights = crate::feature_renderer::weights_unchecked(&sigmas, &batch.deltas);
    let mut color = [0.0; 3];
    for (s, &w) in states.iter().zip(&weights) {
        for k in 0..3 {
            color[k] += w * s.rgb[k];
        }
    }
    let resid: [f64; 3] = std::array::from_fn(|k| color[k] - target[k]);
    g.loss += resid.iter().map(|r| r * r).sum::<f64>();
    let d_color = resid.map(|r| 2.0 * r * scale);

    // Suffix sums of ω_i (c_i · dC) for the density gradient.
    let dots: Vec<f64> = states
        .iter()
        .map(|s| (0..3).map(|k| s.rgb[k] * d_color[k]).sum())
        .collect();
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + weights[i] * dots[i];
    }
    let mut log_t = 0.0;
    let cb = grid.feature_dim;
    let rank = grid.rank;
    for i in 0..n {
        let Some((ftaps, dtaps)) = &states[i].taps else {
            log_t -= sigmas[i] * batch.deltas[i];
            continue;
        };
        log_t -= sigmas[i] * batch.deltas[i];
        let t_next = log_t.exp();
        let d_sigma = batch.deltas[i] * (t_next * dots[i] - suffix[i + 1]);
        for &(k, w) in dtaps {
            g.density[k] += d_sigma * w;
        }
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let s = &states[i];
        let d_logit: [f64; 3] = std::array::from_fn(|k| w * d_color[k] * s.rgb[k] * (1.0 - s.rgb[k]));
        let cw = scene.color.weight.data();
        let mut d_feat = vec![0.0; cb];
        for k in 0..3 {
            g.color_b[k] += d_logit[k];
            for c in 0..cb {
                g.color_w[k * cb + c] += d_logit[k] * s.feature[c];
                d_feat[c] += d_logit[k] * cw[k * cb + c];
            }
        }
        let proj = grid.projection.data();
        let mut d_phi = vec![0.0; rank];
        for c in 0..cb {
            for r in 0..rank {
                g.projection[c * rank + r] += d_feat[c] * s.phi[r];
                d_phi[r] += d_feat[c] * proj[c * rank + r];
            }
        }
        for (p, &(a, b, cax)) in PLANE_AXES.iter().enumerate() {
            let plane_len = grid.resolution[a] * grid.resolution[b];
            let line_len = grid.resolution[cax];
            for r in 0..rank {
                let dm = d_phi[r] * s.lv[p][r];
                let dl = d_phi[r] * s.pv[p][r];
                for &(k, wt) in &ftaps.plane[p] {
                    g.planes[p][r * plane_len + k] += dm * wt;
                }
                for &(k, wt) in &ftaps.line[p] {
                    g.lines[p][r * line_len + k] += dl * wt;
                }
            }
        }
    }
}

fn grads_to_store(prefix: &str, g: SceneGrads) -> std::collections::BTreeMap<String, Tensor> {
    let mut out = std::collections::BTreeMap::new();
    let [p0, p1, p2] = g.planes;
    let [l0, l1, l2] = g.lines;
    for (p, (pl, ln)) in [(p0, l0), (p1, l1), (p2, l2)].into_iter().enumerate() {
        out.insert(format!("{prefix}.grid.plane{p}"), Tensor::from_vec(&[pl.len()], pl).unwrap());
        out.insert(format!("{prefix}.grid.line{p}"), Tensor::from_vec(&[ln.len()], ln).unwrap());
    }
    let n = g.projection.len();
    out.insert(format!("{prefix}.grid.projection"), Tensor::from_vec(&[n], g.projection).unwrap());
    let n = g.density.len();
    out.insert(format!("{prefix}.density"), Tensor::from_vec(&[n], g.density).unwrap());
    let n = g.color_w.len();
    out.insert(format!("{prefix}.color.weight"), Tensor::from_vec(&[n], g.color_w).unwrap());
    out.insert(format!("{prefix}.color.bias"), Tensor::from_vec(&[3], g.color_b).unwrap());
    out
}

const RAYS_PER_TASK: usize = 64;

/// Fits `scene` to posed views by minimizing mean squared photometric error.
/// Returns the per-iteration loss.
pub fn pretrain(scene: &mut SceneField, views: &[PosedImage], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    ensure!(!views.is_empty(), Config, "pre-training needs at least one view");
    for v in views {
        let (c, h, w) = v.image.chw()?;
        ensure!(
            c == 3 && h == v.camera.height && w == v.camera.width,
            Shape,
            "view image {:?} does not match camera {}x{}",
            v.image.shape(),
            v.camera.height,
            v.camera.width
        );
    }
    let prefix = "scene";
    let mut store = scene.to_params(prefix);
    let mut opt = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let bounds = scene.bounds();

    for _ in 0..cfg.iterations {
        // (view, pixel, jitter seed)
        let picks: Vec<(usize, usize, u64)> = (0..cfg.rays_per_batch)
            .map(|_| {
                let v = rng.gen_range(0..views.len());
                let cam = &views[v].camera;
                (v, rng.gen_range(0..cam.width * cam.height), rng.gen())
            })
            .collect();
        let scale = 1.0 / (3.0 * picks.len() as f64);
        let partials: Vec<SceneGrads> = picks
            .par_chunks(RAYS_PER_TASK)
            .map(|chunk| {
                let mut g = SceneGrads::zeros(scene);
                for &(v, pix, seed) in chunk {
                    let view = &views[v];
                    let cam = &view.camera;
                    let hw = cam.width * cam.height;
                    let target: [f64; 3] = std::array::from_fn(|k| view.image.data()[k * hw + pix]);
                    match camera_ray(cam, pix / cam.width, pix % cam.width, cfg.rays.near, cfg.rays.far, &bounds) {
                        Some(ray) => {
                            let mut r = ChaCha8Rng::seed_from_u64(seed);
                            let batch = stratify(&ray, cfg.rays.samples, Some(&mut r));
                            ray_gradient(scene, target, &batch, scale, &mut g);
                        }
                        None => g.loss += target.iter().map(|t| t * t).sum::<f64>(),
                    }
                }
                g
            })
            .collect();
        let mut total = SceneGrads::zeros(scene);
        for p in &partials {
            total.add(p);
        }
        losses.push(total.loss * scale);
        let grads = grads_to_store(prefix, total);
        opt.step(&mut store, &grads, |name| {
            Some(if name.ends_with(".density") {
                cfg.lr_density
            } else if name.ends_with(".projection") {
                cfg.lr_projection
            } else if name.contains(".color.") {
                cfg.lr_color
            } else {
                cfg.lr_factors
            })
        });
        if let Some(d) = store.get_mut(&format!("{prefix}.density")) {
            d.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        *scene = SceneField::from_params(&store, prefix)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_ray(near: f64, far: f64) -> Ray {
        Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.0, 0.0, 1.0),
            near,
            far,
        }
    }

    #[test]
    fn midpoint_stratification() {
        let b = sample_ray(&unit_ray(0.0, 1.0), 4, false, 0).unwrap();
        assert_eq!(b.depths, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(b.deltas, vec![0.25, 0.25, 0.25, 0.125]);
        let one = sample_ray(&unit_ray(0.0, 1.0), 1, false, 0).unwrap();
        assert_eq!(one.depths, vec![0.5]);
        assert_eq!(one.deltas, vec![0.5]);
    }

    #[test]
    fn jittered_sampling_is_reproducible() {
        let ray = unit_ray(0.5, 2.0);
        let a = sample_ray(&ray, 8, true, 99).unwrap();
        let b = sample_ray(&ray, 8, true, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.depths.windows(2).all(|w| w[0] < w[1]));
        assert!(a.deltas.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn invalid_rays_rejected() {
        let mut r = unit_ray(0.0, 1.0);
        r.direction = Vector3::new(0.0, 0.0, 1.1);
        assert!(sample_ray(&r, 4, false, 0).is_err());
        assert!(sample_ray(&unit_ray(1.0, 1.0), 4, false, 0).is_err());
        assert!(sample_ray(&unit_ray(0.0, 1.0), 0, false, 0).is_err());
    }

    fn ones_grid() -> FactorizedGrid {
        FactorizedGrid {
            resolution: [3, 3, 3],
            rank: 1,
            feature_dim: 1,
            bounds: Aabb::cube(1.0),
            planes: PLANE_AXES.map(|_| Tensor::full(&[1, 3, 3], 1.0)),
            lines: PLANE_AXES.map(|_| Tensor::full(&[1, 3], 1.0)),
            projection: Tensor::full(&[1, 1], 1.0),
        }
    }

    #[test]
    fn constant_factors_give_pair_count() {
        let g = ones_grid();
        for p in [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.9, -0.4, 0.33)] {
            let (f, empty) = query_basic_feature(&g, &p);
            assert!(!empty);
            assert_abs_diff_eq!(f[0], 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_feature_is_empty_zero() {
        let g = ones_grid();
        let (f, empty) = query_basic_feature(&g, &Vector3::new(1.5, 0.0, 0.0));
        assert!(empty);
        assert_eq!(f, vec![0.0]);
    }

    #[test]
    fn density_queries() {
        let bounds = Aabb::cube(1.0);
        let mut field = OpacityField::empty([4, 4, 4], bounds);
        assert_eq!(query_density(&field, &Vector3::new(0.1, 0.2, -0.3)), 0.0);
        field.set([1, 2, 3], 5.0);
        assert_abs_diff_eq!(query_density(&field, &field.voxel_center([1, 2, 3])), 5.0, epsilon = 1e-12);

        let mut pair = OpacityField::empty([4, 4, 4], bounds);
        pair.set([1, 1, 1], 0.0);
        pair.set([2, 1, 1], 2.0);
        let mid = (pair.voxel_center([1, 1, 1]) + pair.voxel_center([2, 1, 1])) / 2.0;
        // Oracle: linear interpolation between the two centers.
        let expected = 0.5 * 0.0 + 0.5 * 2.0;
        assert_abs_diff_eq!(query_density(&pair, &mid), expected, epsilon = 1e-12);
        assert_eq!(query_density(&pair, &Vector3::new(3.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn aabb_clipping() {
        let b = Aabb::cube(1.0);
        let (t0, t1) = b.intersect(&Vector3::new(0.0, 0.0, -3.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(t0, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t1, 4.0, epsilon = 1e-12);
        assert!(b.intersect(&Vector3::new(0.0, 2.0, -3.0), &Vector3::new(0.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn params_round_trip() {
        let scene = SceneField::new(4, 2, 5, Aabb::cube(1.0), 3);
        let back = SceneField::from_params(&scene.to_params("scene"), "scene").unwrap();
        assert_eq!(scene, back);
    }
}
