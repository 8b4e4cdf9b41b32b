//! Multi-level feature adaptor: per-level MLPs turning basic point features
//! into low/mid/high point features, and the learnable scene-wide
//! normalization applied to them during stylization.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Floor added to the softplus scale so the normalization never divides by zero.
pub const SCALE_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Low,
    Mid,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Mid, Level::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Mid => "mid",
            Level::High => "high",
        }
    }

    /// Encoder activation this level is supervised by.
    pub fn tap(self) -> &'static str {
        match self {
            Level::Low => "relu1_1",
            Level::Mid => "relu2_1",
            Level::High => "relu3_1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Level::Low),
            "mid" => Ok(Level::Mid),
            "high" => Ok(Level::High),
            other => Err(crate::Error::Validation(format!("unknown level `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Feature-grid reconstruction: no normalization.
    Stage1,
    /// Stylization: normalization applied after the MLP.
    Stage2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    pub level: Level,
    pub channels: usize,
}

impl LevelSpec {
    pub fn tap(&self) -> &'static str {
        self.level.tap()
    }
}

/// Widths and depth shared by the adaptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptorShape {
    pub basic_channels: usize,
    pub level_channels: [usize; 3],
    /// Number of linear layers per level (≥ 1); a rectifier sits between layers.
    pub depth: usize,
}

impl AdaptorShape {
    pub fn spec(&self, level: Level) -> LevelSpec {
        LevelSpec {
            level,
            channels: self.level_channels[level.index()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 1, Validation, "adaptor depth must be at least 1");
        ensure!(self.basic_channels >= 1, Validation, "basic channels must be positive");
        let [l, m, h] = self.level_channels;
        ensure!(
            l >= 1 && l != m && m != h && l != h,
            Validation,
            "level widths must be positive and distinct, got {:?}",
            self.level_channels
        );
        Ok(())
    }
}

pub fn layer_name(level: Level, layer: usize) -> String {
    format!("mlfa.{}.l{}", level.name(), layer)
}

pub fn lin_mean_name(level: Level) -> String {
    format!("lin.{}.mean", level.name())
}

pub fn lin_scale_name(level: Level) -> String {
    format!("lin.{}.scale_raw", level.name())
}

/// Random MLP weights plus identity normalization (`μ̃ = 0`, `σ̃ = 1`).
pub fn init_params(shape: &AdaptorShape, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for level in Level::ALL {
        let c = shape.level_channels[level.index()];
        for layer in 0..shape.depth {
            let din = if layer == 0 { shape.basic_channels } else { c };
            nn::init_linear(&mut store, rng, &layer_name(level, layer), din, c);
        }
        store.insert(lin_mean_name(level), Tensor::zeros(&[c]));
        store.insert(
            lin_scale_name(level),
            Tensor::full(&[c], nn::softplus_inv(1.0 - SCALE_FLOOR)),
        );
    }
    store
}

pub fn validate_params(shape: &AdaptorShape, store: &ParamStore) -> Result<()> {
    for level in Level::ALL {
        let c = shape.level_channels[level.index()];
        for layer in 0..shape.depth {
            let din = if layer == 0 { shape.basic_channels } else { c };
            let name = layer_name(level, layer);
            store.expect_shape(&format!("{name}.weight"), &[c, din])?;
            store.expect_shape(&format!("{name}.bias"), &[c])?;
        }
        ensure!(
            !store.contains(&layer_name(level, shape.depth)),
            Checkpoint,
            "adaptor has more layers than configured depth {}",
            shape.depth
        );
        store.expect_shape(&lin_mean_name(level), &[c])?;
        store.expect_shape(&lin_scale_name(level), &[c])?;
    }
    Ok(())
}

/// Learned normalization parameters of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LinParams {
    pub mean: Vec<f64>,
    pub scale_raw: Vec<f64>,
}

impl LinParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            scale_raw: vec![nn::softplus_inv(1.0 - SCALE_FLOOR); channels],
        }
    }

    pub fn from_store(store: &ParamStore, level: Level) -> Result<Self> {
        Ok(Self {
            mean: store.require(&lin_mean_name(level))?.data().to_vec(),
            scale_raw: store.require(&lin_scale_name(level))?.data().to_vec(),
        })
    }

    /// Effective scale `softplus(s̃) + floor`, always positive.
    pub fn sigma(&self) -> Vec<f64> {
        self.scale_raw.iter().map(|&s| nn::softplus(s) + SCALE_FLOOR).collect()
    }
}

/// `(x − μ̃) / σ̃`, elementwise.
pub fn lin(x: &[f64], params: &LinParams) -> Result<Vec<f64>> {
    ensure!(
        x.len() == params.mean.len() && x.len() == params.scale_raw.len(),
        Shape,
        "normalization width {} vs input {}",
        params.mean.len(),
        x.len()
    );
    Ok(x.iter()
        .zip(&params.mean)
        .zip(params.sigma())
        .map(|((v, m), s)| (v - m) / s)
        .collect())
}

/// Batched per-level MLP on rows of `x [N, C_b]`.
pub fn mlp_batch(store: &ParamStore, shape: &AdaptorShape, level: Level, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    ensure!(
        x.ncols() == shape.basic_channels,
        Shape,
        "adaptor input width {} but basic channels are {}",
        x.ncols(),
        shape.basic_channels
    );
    let mut h = x.to_owned();
    for layer in 0..shape.depth {
        let name = layer_name(level, layer);
        let w = store.require(&format!("{name}.weight"))?;
        let b = store.require(&format!("{name}.bias"))?;
        let wv = ArrayView2::from_shape((w.shape()[0], w.shape()[1]), w.data()).unwrap();
        let mut out = h.dot(&wv.t());
        for mut row in out.rows_mut() {
            row.iter_mut().zip(b.data()).for_each(|(a, bb)| *a += bb);
        }
        if layer + 1 < shape.depth {
            out.mapv_inplace(|a| a.max(0.0));
        }
        h = out;
    }
    Ok(h)
}

/// Level point feature of a single basic feature `p`.
pub fn adapt(store: &ParamStore, shape: &AdaptorShape, p: &[f64], level: Level, stage: Stage) -> Result<Vec<f64>> {
    ensure!(
        p.len() == shape.basic_channels,
        Validation,
        "basic feature width {} but adaptor expects {}",
        p.len(),
        shape.basic_channels
    );
    let x = ArrayView2::from_shape((1, p.len()), p).unwrap();
    let out = mlp_batch(store, shape, level, x)?.into_raw_vec_and_offset().0;
    match stage {
        Stage::Stage1 => Ok(out),
        Stage::Stage2 => lin(&out, &LinParams::from_store(store, level)?),
    }
}

/// MLP on the tape: `x [N, C_b]` → `[N, C_ℓ]`.
pub fn mlp_graph(g: &mut Graph, depth: usize, level: Level, x: Var) -> Var {
    let mut h = x;
    for layer in 0..depth {
        h = nn::linear(g, &layer_name(level, layer), h);
        if layer + 1 < depth {
            h = g.relu(h);
        }
    }
    h
}

/// Effective σ̃ on the tape.
pub fn sigma_graph(g: &mut Graph, level: Level) -> Var {
    let raw = g.p(&lin_scale_name(level));
    let sp = g.softplus(raw);
    g.add_scalar(sp, SCALE_FLOOR)
}

/// Normalization of a rendered `[C, H, W]` map.
///
/// Compositing is linear and the point normalization is affine, so
/// `Σ ω (f − μ̃)/σ̃ = (F − μ̃ · A)/σ̃` with `A` the accumulated opacity.
pub fn lin_map_graph(g: &mut Graph, level: Level, map: Var, opacity: Var) -> Var {
    let (c, h, w) = g.value(map).chw().expect("map");
    let mu = g.p(&lin_mean_name(level));
    let offset = g.outer(mu, opacity);
    let offset = g.reshape(offset, &[c, h, w]);
    let centered = g.sub(map, offset);
    let sigma = sigma_graph(g, level);
    let inv = g.recip(sigma);
    g.mul_channel(centered, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square_identity(c: usize) -> (AdaptorShape, ParamStore) {
        let shape = AdaptorShape {
            basic_channels: c,
            level_channels: [c, c + 1, c + 2],
            depth: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = init_params(&shape, &mut rng);
        let mut eye = Tensor::zeros(&[c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        store.insert(format!("{}.weight", layer_name(Level::Low, 0)), eye);
        (shape, store)
    }

    #[test]
    fn identity_mlp_passes_through() {
        let (shape, store) = square_identity(3);
        let p = [0.3, -1.2, 2.5];
        assert_eq!(adapt(&store, &shape, &p, Level::Low, Stage::Stage1).unwrap(), p.to_vec());
    }

    #[test]
    fn stage2_with_identity_normalization_matches_stage1() {
        let shape = AdaptorShape {
            basic_channels: 5,
            level_channels: [4, 6, 8],
            depth: 2,
        };
        let store = init_params(&shape, &mut ChaCha8Rng::seed_from_u64(4));
        let p = [0.1, 0.2, -0.3, 0.4, 0.9];
        for level in Level::ALL {
            let a = adapt(&store, &shape, &p, level, Stage::Stage1).unwrap();
            let b = adapt(&store, &shape, &p, level, Stage::Stage2).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn lin_arithmetic() {
        let mut params = LinParams::identity(2);
        params.mean = vec![2.0, 2.0];
        assert_eq!(lin(&[2.0, 2.0], &params).unwrap(), vec![0.0, 0.0]);
        params.scale_raw = vec![nn::softplus_inv(2.0 - SCALE_FLOOR); 2];
        let out = lin(&[2.0, 4.0], &params).unwrap();
        assert!(out[0].abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
        let ident = LinParams::identity(3);
        let x = [0.5, -3.0, 7.0];
        let y = lin(&x, &ident).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (shape, store) = square_identity(3);
        assert!(adapt(&store, &shape, &[1.0, 2.0], Level::Low, Stage::Stage1).is_err());
        assert!(lin(&[1.0], &LinParams::identity(2)).is_err());
    }

    #[test]
    fn two_layer_mlp_matches_explicit_matmul() {
        let shape = AdaptorShape {
            basic_channels: 3,
            level_channels: [4, 5, 6],
            depth: 2,
        };
        let store = init_params(&shape, &mut ChaCha8Rng::seed_from_u64(11));
        let p = [0.7, -0.2, 1.3];
        let out = adapt(&store, &shape, &p, Level::Low, Stage::Stage1).unwrap();

        let w0 = store.get("mlfa.low.l0.weight").unwrap().data();
        let b0 = store.get("mlfa.low.l0.bias").unwrap().data();
        let w1 = store.get("mlfa.low.l1.weight").unwrap().data();
        let b1 = store.get("mlfa.low.l1.bias").unwrap().data();
        let mut hidden = [0.0; 4];
        for o in 0..4 {
            let mut s = b0[o];
            for i in 0..3 {
                s += w0[o * 3 + i] * p[i];
            }
            hidden[o] = s.max(0.0);
        }
        for o in 0..4 {
            let mut s = b1[o];
            for i in 0..4 {
                s += w1[o * 4 + i] * hidden[i];
            }
            assert!((s - out[o]).abs() < 1e-12);
        }
    }
}
