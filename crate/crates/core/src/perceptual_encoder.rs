//! Truncated VGG-19 feature extractor with taps after the first activation of
//! each of the first three blocks, plus the upsampling and supervision loss
//! used to fit rendered feature maps to it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::feature_renderer::LevelFeatureMaps;
use crate::graph::{bilinear_taps, Graph, Var};
use crate::mlfa::Level;
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// ImageNet statistics applied before the first convolution.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Tap widths of the full network.
pub const VGG_CHANNELS: [usize; 3] = [64, 128, 256];
/// Tap widths of the seeded stand-in used when no weight file is supplied.
pub const TINY_CHANNELS: [usize; 3] = [8, 16, 32];

const CONVS: [&str; 5] = ["conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1"];

/// What to do with images whose sides are not multiples of four.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SizePolicy {
    #[default]
    Error,
    /// Bilinearly resample down to the nearest valid size, with a warning.
    Resize,
}

/// Encoder weights (`enc.*` tensors) and their tap widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub store: ParamStore,
    pub channels: [usize; 3],
    pub size_policy: SizePolicy,
}

/// Encoder activations at native resolution: low `[C, H, W]`,
/// mid `[C, H/2, W/2]`, high `[C, H/4, W/4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleFeatures {
    pub maps: [Tensor; 3],
}

impl StyleFeatures {
    pub fn level(&self, level: Level) -> &Tensor {
        &self.maps[level.index()]
    }
}

fn conv_shapes(channels: [usize; 3]) -> [(usize, usize); 5] {
    let [c1, c2, c3] = channels;
    [(3, c1), (c1, c1), (c1, c2), (c2, c2), (c2, c3)]
}

impl Encoder {
    /// Same topology with seeded He-initialized weights.
    pub fn random(channels: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, (cin, cout)) in CONVS.iter().zip(conv_shapes(channels)) {
            nn::init_conv(&mut store, &mut rng, &format!("enc.{name}"), cin, cout, 3);
        }
        store.insert("enc.mean", Tensor::from_vec(&[3], IMAGENET_MEAN.to_vec()).unwrap());
        store.insert("enc.std", Tensor::from_vec(&[3], IMAGENET_STD.to_vec()).unwrap());
        Self {
            store,
            channels,
            size_policy: SizePolicy::Error,
        }
    }

    pub fn tiny(seed: u64) -> Self {
        Self::random(TINY_CHANNELS, seed)
    }

    /// Validates an `enc.*` tensor set and infers the tap widths.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let w = store.require("enc.conv1_1.weight")?;
        ensure!(w.shape().len() == 4, Checkpoint, "enc.conv1_1.weight must be rank-4");
        let c1 = w.shape()[0];
        let c2 = store.require("enc.conv2_1.weight")?.shape()[0];
        let c3 = store.require("enc.conv3_1.weight")?.shape()[0];
        let channels = [c1, c2, c3];
        for (name, (cin, cout)) in CONVS.iter().zip(conv_shapes(channels)) {
            store.expect_shape(&format!("enc.{name}.weight"), &[cout, cin, 3, 3])?;
            store.expect_shape(&format!("enc.{name}.bias"), &[cout])?;
        }
        store.expect_shape("enc.mean", &[3])?;
        store.expect_shape("enc.std", &[3])?;
        ensure!(
            store.require("enc.std")?.data().iter().all(|&s| s > 0.0),
            Checkpoint,
            "enc.std must be positive"
        );
        Ok(Self {
            store: store.filter_prefix("enc."),
            channels,
            size_policy: SizePolicy::Error,
        })
    }

    /// Forward pass on the tape. `image` is `[3, H, W]` in `[0, 1]`; the
    /// encoder tensors must already be bound on `g`.
    pub fn forward_graph(&self, g: &mut Graph, image: Var) -> [Var; 3] {
        let mean = self.store.get("enc.mean").unwrap().map(|m| -m);
        let inv_std = self.store.get("enc.std").unwrap().map(|s| 1.0 / s);
        let mean = g.constant(mean);
        let inv_std = g.constant(inv_std);
        let x = g.add_channel(image, mean);
        let x = g.mul_channel(x, inv_std);
        let x = nn::conv(g, "enc.conv1_1", x, 1);
        let low = g.relu(x);
        let x = nn::conv(g, "enc.conv1_2", low, 1);
        let x = g.relu(x);
        let x = g.max_pool2(x);
        let x = nn::conv(g, "enc.conv2_1", x, 1);
        let mid = g.relu(x);
        let x = nn::conv(g, "enc.conv2_2", mid, 1);
        let x = g.relu(x);
        let x = g.max_pool2(x);
        let x = nn::conv(g, "enc.conv3_1", x, 1);
        let high = g.relu(x);
        [low, mid, high]
    }

    /// Checks (or, under [`SizePolicy::Resize`], fixes) the input size.
    pub fn prepare(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.chw()?;
        ensure!(c == 3, Shape, "encoder expects 3 channels, got {}", c);
        if h >= 4 && w >= 4 && h % 4 == 0 && w % 4 == 0 {
            return Ok(image.clone());
        }
        match self.size_policy {
            SizePolicy::Error => Err(Error::Validation(format!(
                "image size {h}x{w} must be at least 4 and divisible by 4"
            ))),
            SizePolicy::Resize => {
                ensure!(h >= 4 && w >= 4, Validation, "image {}x{} is smaller than 4x4", h, w);
                let (nh, nw) = (h / 4 * 4, w / 4 * 4);
                log::warn!("resizing {h}x{w} image to {nh}x{nw} for the encoder");
                Ok(resample(image, nh, nw))
            }
        }
    }

    pub fn encode_levels(&self, image: &Tensor) -> Result<StyleFeatures> {
        let image = self.prepare(image)?;
        let mut g = Graph::new();
        g.bind_params(&self.store, |_| false);
        let x = g.constant(image);
        let taps = self.forward_graph(&mut g, x);
        Ok(StyleFeatures {
            maps: taps.map(|v| g.value(v).clone()),
        })
    }
}

pub fn encode_levels(image: &Tensor, encoder: &Encoder) -> Result<StyleFeatures> {
    encoder.encode_levels(image)
}

fn resample(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = x.chw().unwrap();
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1, ty) = bilinear_taps(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, tx) = bilinear_taps(ox, w, ow);
                let b = ci * h * w;
                out.push(
                    src[b + y0 * w + x0] * (1.0 - ty) * (1.0 - tx)
                        + src[b + y0 * w + x1] * (1.0 - ty) * tx
                        + src[b + y1 * w + x0] * ty * (1.0 - tx)
                        + src[b + y1 * w + x1] * ty * tx,
                );
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).unwrap()
}

pub(crate) fn upsample_tensor(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    ensure!(
        oh >= h && ow >= w,
        Validation,
        "upsampling target {}x{} is smaller than source {}x{}",
        oh,
        ow,
        h,
        w
    );
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    Ok(resample(x, oh, ow))
}

/// Bilinear upsampling of a `[C, h, w]` map to `[C, H, W]`, corners not aligned.
pub fn upsample_to(feat: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    upsample_tensor(feat, height, width)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `Σ_ℓ mean((F_ℓ − upsample(F̂_ℓ))²)` over `levels`.
pub fn feature_supervision_loss_levels(
    rendered: &LevelFeatureMaps,
    encoded: &StyleFeatures,
    levels: &[Level],
) -> Result<f64> {
    let mut total = 0.0;
    for &level in levels {
        let r = rendered.level(level);
        let (c, h, w) = r.chw()?;
        let up = upsample_to(encoded.level(level), h, w)?;
        ensure!(
            up.shape() == [c, h, w],
            Shape,
            "level {} rendered {:?} vs encoded {:?}",
            level.name(),
            r.shape(),
            up.shape()
        );
        total += mse(r, &up);
    }
    Ok(total)
}

pub fn feature_supervision_loss(rendered: &LevelFeatureMaps, encoded: &StyleFeatures) -> Result<f64> {
    feature_supervision_loss_levels(rendered, encoded, &Level::ALL)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn tap_shapes_are_architecture_forced() {
        let enc = Encoder::tiny(0);
        let f = enc.encode_levels(&image(16, 12, 1)).unwrap();
        assert_eq!(f.maps[0].shape(), [8, 16, 12]);
        assert_eq!(f.maps[1].shape(), [16, 8, 6]);
        assert_eq!(f.maps[2].shape(), [32, 4, 3]);
        assert!(f.maps.iter().all(|m| m.data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn bad_sizes_error_or_resize() {
        let mut enc = Encoder::tiny(0);
        assert!(enc.encode_levels(&image(10, 12, 1)).is_err());
        assert!(enc.encode_levels(&image(2, 2, 1)).is_err());
        enc.size_policy = SizePolicy::Resize;
        let f = enc.encode_levels(&image(10, 13, 1)).unwrap();
        assert_eq!(f.maps[0].shape(), [8, 8, 12]);
    }

    #[test]
    fn upsample_cases() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_to(&x, 2, 2).unwrap(), x);
        let c = Tensor::full(&[2, 3, 5], 0.7);
        let up = upsample_to(&c, 7, 11).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(upsample_to(&x, 1, 4).is_err());

        // Hand-computed 2x2 → 4x4: source coordinates per output index are
        // clamp((i + 0.5) / 2 − 0.5) = 0, 0.25, 0.75, 1.
        let t = [0.0, 0.25, 0.75, 1.0];
        let up = upsample_to(&x, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let top = 1.0 + t[c];
                let bottom = 3.0 + t[c];
                let expected = top + (bottom - top) * t[r];
                assert!((up.data()[r * 4 + c] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn from_store_round_trip() {
        let enc = Encoder::random([4, 6, 8], 5);
        let back = Encoder::from_store(&enc.store).unwrap();
        assert_eq!(back.channels, [4, 6, 8]);
        let mut broken = enc.store.clone();
        broken.remove("enc.conv2_2.bias");
        assert!(Encoder::from_store(&broken).is_err());
    }
}
