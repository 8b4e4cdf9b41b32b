//! Dynamic style injection.
//!
//! Each level owns a generator that reads the encoder's style features and
//! emits one weight and one bias per channel; the pair acts on the rendered
//! content map as a 1×1 grouped convolution (a per-channel affine map).
//! The statistics-matching AdaIN baseline and mask amplification for masked
//! style views live here as well.

use std::collections::BTreeMap;

use num_traits::Float;
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::feature_renderer::LevelFeatureMaps;
use crate::graph::{Graph, Var};
use crate::mlfa::Level;
use crate::nn;
use crate::params::ParamStore;
use crate::perceptual_encoder::StyleFeatures;
use crate::stats::{channel_stats, STD_EPS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorShape {
    pub level_channels: [usize; 3],
    /// 3×3 convolutions in the spatial branch, each followed by a halving pool.
    pub spatial_convs: usize,
    /// Bottleneck reduction of the channel branch.
    pub reduction: usize,
}

impl GeneratorShape {
    pub fn new(level_channels: [usize; 3]) -> Self {
        Self {
            level_channels,
            spatial_convs: 3,
            reduction: 4,
        }
    }

    fn hidden(&self, c: usize) -> usize {
        (c / self.reduction.max(1)).max(1)
    }
}

fn pfx(level: Level) -> String {
    format!("dsi.{}", level.name())
}

pub fn init_params(shape: &GeneratorShape, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for level in Level::ALL {
        let c = shape.level_channels[level.index()];
        let p = pfx(level);
        for j in 0..shape.spatial_convs {
            nn::init_conv(&mut store, rng, &format!("{p}.spatial{j}"), c, c, 3);
        }
        let hidden = shape.hidden(c);
        nn::init_linear(&mut store, rng, &format!("{p}.se_reduce"), c, hidden);
        nn::init_linear(&mut store, rng, &format!("{p}.se_expand"), hidden, c);
        // Heads start near the identity injection: w ≈ 1, b ≈ 0.
        store.insert(format!("{p}.w_head.weight"), nn::normal(rng, &[c, c], 0.01));
        store.insert(format!("{p}.w_head.bias"), Tensor::full(&[c], 1.0));
        store.insert(format!("{p}.b_head.weight"), nn::normal(rng, &[c, c], 0.01));
        store.insert(format!("{p}.b_head.bias"), Tensor::zeros(&[c]));
    }
    store
}

pub fn validate_params(shape: &GeneratorShape, store: &ParamStore) -> Result<()> {
    for level in Level::ALL {
        let c = shape.level_channels[level.index()];
        let p = pfx(level);
        let hidden = shape.hidden(c);
        for j in 0..shape.spatial_convs {
            store.expect_shape(&format!("{p}.spatial{j}.weight"), &[c, c, 3, 3])?;
            store.expect_shape(&format!("{p}.spatial{j}.bias"), &[c])?;
        }
        for (name, din, dout) in [
            ("se_reduce", c, hidden),
            ("se_expand", hidden, c),
            ("w_head", c, c),
            ("b_head", c, c),
        ] {
            store.expect_shape(&format!("{p}.{name}.weight"), &[dout, din])?;
            store.expect_shape(&format!("{p}.{name}.bias"), &[dout])?;
        }
    }
    Ok(())
}

/// Generated per-channel weight and bias of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl InjectionParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            weight: vec![1.0; channels],
            bias: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Generator on the tape: style map `[C, H, W]` → `(w [C], b [C])`.
pub fn generator_graph(g: &mut Graph, shape: &GeneratorShape, level: Level, style: Var) -> (Var, Var) {
    let p = pfx(level);
    let (c, _, _) = g.value(style).chw().expect("style map");

    let mut x = style;
    for j in 0..shape.spatial_convs {
        x = nn::conv(g, &format!("{p}.spatial{j}"), x, 1);
        x = g.relu(x);
        let (_, h, w) = g.value(x).chw().unwrap();
        x = g.adaptive_avg_pool(x, (h / 2).max(1), (w / 2).max(1));
    }
    let spatial = g.adaptive_avg_pool(x, 1, 1);
    let spatial = g.reshape(spatial, &[1, c]);

    let squeezed = g.channel_mean(style);
    let squeezed = g.reshape(squeezed, &[1, c]);
    let z = nn::linear(g, &format!("{p}.se_reduce"), squeezed);
    let z = g.relu(z);
    let z = nn::linear(g, &format!("{p}.se_expand"), z);
    let gates = g.sigmoid(z);

    let v = g.mul(spatial, gates);
    let w = nn::linear(g, &format!("{p}.w_head"), v);
    let b = nn::linear(g, &format!("{p}.b_head"), v);
    (g.reshape(w, &[c]), g.reshape(b, &[c]))
}

/// Weight/bias for `level` from encoded style features.
pub fn generate_params(
    style: &StyleFeatures,
    level: Level,
    shape: &GeneratorShape,
    store: &ParamStore,
) -> Result<InjectionParams> {
    let map = style.level(level);
    let (c, _, _) = map.chw()?;
    let expected = shape.level_channels[level.index()];
    ensure!(
        c == expected,
        Validation,
        "{} style features have {} channels, generator expects {}",
        level.name(),
        c,
        expected
    );
    let mut g = Graph::new();
    g.bind_params(&store.filter_prefix(&format!("{}.", pfx(level))), |_| false);
    let x = g.constant(map.clone());
    let (w, b) = generator_graph(&mut g, shape, level, x);
    Ok(InjectionParams {
        weight: g.value(w).data().to_vec(),
        bias: g.value(b).data().to_vec(),
    })
}

/// `f ⊗ w + b` on one pixel vector.
pub fn inject_pixel<T: Float>(f: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    f.iter().zip(weight).zip(bias).map(|((&x, &w), &b)| x * w + b).collect()
}

/// Per-channel affine map of a `[C, H, W]` content map.
pub fn inject(content: &Tensor, params: &InjectionParams) -> Result<Tensor> {
    let (c, h, w) = content.chw()?;
    ensure!(
        c == params.channels() && params.bias.len() == c,
        Validation,
        "injection params have {} channels, content has {}",
        params.channels(),
        c
    );
    let hw = h * w;
    let mut out = content.clone();
    for (ci, row) in out.data_mut().chunks_mut(hw).enumerate() {
        let (wt, b) = (params.weight[ci], params.bias[ci]);
        row.iter_mut().for_each(|v| *v = *v * wt + b);
    }
    Ok(out)
}

pub fn inject_graph(g: &mut Graph, content: Var, weight: Var, bias: Var) -> Var {
    let x = g.mul_channel(content, weight);
    g.add_channel(x, bias)
}

/// Replaces per-channel content statistics with those of `style`.
pub fn adain_inject(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    let (c, h, w) = content.chw()?;
    let (cs, _, _) = style.chw()?;
    ensure!(c == cs, Shape, "content has {} channels, style has {}", c, cs);
    let cstats = channel_stats(content, STD_EPS);
    let sstats = channel_stats(style, STD_EPS);
    let hw = h * w;
    let mut out = content.clone();
    for (ci, row) in out.data_mut().chunks_mut(hw).enumerate() {
        let ((mc, sc), (ms, ss)) = (cstats[ci], sstats[ci]);
        row.iter_mut().for_each(|v| *v = (*v - mc) / sc * ss + ms);
    }
    Ok(out)
}

/// AdaIN on the tape against constant style statistics.
pub fn adain_graph(g: &mut Graph, content: Var, style: &Tensor) -> Var {
    let stats = channel_stats(style, STD_EPS);
    let mean_s = g.constant(Tensor::from_vec(&[stats.len()], stats.iter().map(|s| s.0).collect()).unwrap());
    let std_s = g.constant(Tensor::from_vec(&[stats.len()], stats.iter().map(|s| s.1).collect()).unwrap());
    let mean_c = g.channel_mean(content);
    let neg = g.scale(mean_c, -1.0);
    let centered = g.add_channel(content, neg);
    let std_c = g.channel_std(content, STD_EPS);
    let inv = g.recip(std_c);
    let gain = g.mul(inv, std_s);
    let scaled = g.mul_channel(centered, gain);
    g.add_channel(scaled, mean_s)
}

/// Nearest-neighbour resampling of a binary mask to `(h, w)`.
pub fn downsample_mask(mask: &[bool], height: usize, width: usize, h: usize, w: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let sy = (((i as f64 + 0.5) * height as f64 / h as f64) as usize).min(height - 1);
        for j in 0..w {
            let sx = (((j as f64 + 0.5) * width as f64 / w as f64) as usize).min(width - 1);
            out.push(mask[sy * width + sx]);
        }
    }
    out
}

/// Zeroes style features outside the object mask and rescales each level by
/// `(H_ℓ · W_ℓ) / covered` so pooled activations keep their magnitude.
pub fn mask_amplify(style: &StyleFeatures, mask: &[bool], height: usize, width: usize) -> Result<StyleFeatures> {
    ensure!(
        mask.len() == height * width && height > 0 && width > 0,
        Shape,
        "mask has {} entries for a {}x{} image",
        mask.len(),
        height,
        width
    );
    let mut maps = style.maps.clone();
    for map in maps.iter_mut() {
        let (_, h, w) = map.chw()?;
        let small = downsample_mask(mask, height, width, h, w);
        let covered = small.iter().filter(|&&m| m).count();
        if covered == 0 {
            return Err(Error::StyleNotVisible);
        }
        let scale = (h * w) as f64 / covered as f64;
        for row in map.data_mut().chunks_mut(h * w) {
            for (v, &m) in row.iter_mut().zip(&small) {
                *v = if m { *v * scale } else { 0.0 };
            }
        }
    }
    Ok(StyleFeatures { maps })
}

/// Injects each level with its own parameters.
pub fn inject_levels(content: &LevelFeatureMaps, params: &[InjectionParams; 3]) -> Result<LevelFeatureMaps> {
    let mut out = content.clone();
    for level in Level::ALL {
        out.maps[level.index()] = inject(content.level(level), &params[level.index()])?;
    }
    Ok(out)
}

/// Style mixing: every level is injected with parameters generated from the
/// style assigned to it.
pub fn mix_inject(
    content: &LevelFeatureMaps,
    styles: &BTreeMap<Level, StyleFeatures>,
    shape: &GeneratorShape,
    store: &ParamStore,
) -> Result<LevelFeatureMaps> {
    let mut params = Vec::with_capacity(3);
    for level in Level::ALL {
        let style = styles
            .get(&level)
            .ok_or_else(|| Error::Validation(format!("no style assigned to the {} level", level.name())))?;
        params.push(generate_params(style, level, shape, store)?);
    }
    let params: [InjectionParams; 3] = params.try_into().unwrap();
    inject_levels(content, &params)
}
