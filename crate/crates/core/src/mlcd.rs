//! Multi-level cascade decoder.
//!
//! High and mid maps are aligned with 1×1 convolutions, concatenated and fused
//! with dilated 3×3 convolutions; the result is aligned with the low map,
//! fused again and projected to RGB. Every layer keeps the view resolution.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::feature_renderer::LevelFeatureMaps;
use crate::graph::{Graph, Var};
use crate::mlfa::Level;
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderShape {
    /// Low, mid, high widths.
    pub level_channels: [usize; 3],
    /// Dilated fusion convolutions after each concatenation.
    pub convs_per_stage: usize,
}

impl DecoderShape {
    pub fn new(level_channels: [usize; 3]) -> Self {
        Self {
            level_channels,
            convs_per_stage: 2,
        }
    }

    /// Dilation of fusion layer `j` in cascade stage `stage` (0: high+mid, 1: +low).
    pub fn dilation(stage: usize, j: usize) -> usize {
        match (stage, j) {
            (0, 0) => 4,
            (0, _) => 2,
            (_, 0) => 2,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.convs_per_stage >= 1,
            Config,
            "decoder needs at least one fusion convolution per stage"
        );
        ensure!(
            self.level_channels.iter().all(|&c| c > 0),
            Config,
            "decoder widths must be positive"
        );
        Ok(())
    }

    /// `(name, cin, cout, kernel)` for every layer, in evaluation order.
    pub fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let [cl, cm, ch] = self.level_channels;
        let mut out = vec![
            ("mlcd.align_high".to_string(), ch, cm, 1),
            ("mlcd.align_mid".to_string(), cm, cm, 1),
        ];
        for j in 0..self.convs_per_stage {
            let cin = if j == 0 { 2 * cm } else { cm };
            out.push((format!("mlcd.fuse_mid.l{j}"), cin, cm, 3));
        }
        out.push(("mlcd.align_fused".to_string(), cm, cl, 1));
        out.push(("mlcd.align_low".to_string(), cl, cl, 1));
        for j in 0..self.convs_per_stage {
            let cin = if j == 0 { 2 * cl } else { cl };
            out.push((format!("mlcd.fuse_low.l{j}"), cin, cl, 3));
        }
        out.push(("mlcd.rgb".to_string(), cl, 3, 3));
        out
    }
}

pub fn init_params(shape: &DecoderShape, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, cin, cout, k) in shape.layers() {
        nn::init_conv(&mut store, rng, &name, cin, cout, k);
    }
    // Start the output near mid-grey rather than wherever He init lands.
    store.get_mut("mlcd.rgb.bias").unwrap().data_mut().fill(0.5);
    if let Some(w) = store.get_mut("mlcd.rgb.weight") {
        w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
    }
    store
}

pub fn validate_params(shape: &DecoderShape, store: &ParamStore) -> Result<()> {
    for (name, cin, cout, k) in shape.layers() {
        store.expect_shape(&format!("{name}.weight"), &[cout, cin, k, k])?;
        store.expect_shape(&format!("{name}.bias"), &[cout])?;
    }
    Ok(())
}

fn checked_conv(g: &mut Graph, name: &str, x: Var, dilation: usize) -> Result<Var> {
    let (_, h, w) = g.value(x).chw()?;
    let y = nn::conv(g, name, x, dilation);
    let (_, h2, w2) = g.value(y).chw()?;
    ensure!(
        (h2, w2) == (h, w),
        Shape,
        "{} changed spatial size {}x{} -> {}x{}",
        name,
        h,
        w,
        h2,
        w2
    );
    Ok(y)
}

/// Decoder on the tape; decoder params must be bound on `g`. Returns raw
/// `[3, H, W]` output.
pub fn decode_graph(g: &mut Graph, shape: &DecoderShape, maps: [Var; 3]) -> Result<Var> {
    let [low, mid, high] = maps;
    let mut dims = Vec::with_capacity(3);
    for (v, level) in maps.iter().zip(Level::ALL) {
        let (c, h, w) = g.value(*v).chw()?;
        ensure!(
            c == shape.level_channels[level.index()],
            Validation,
            "{} map has {} channels, decoder expects {}",
            level.name(),
            c,
            shape.level_channels[level.index()]
        );
        dims.push((h, w));
    }
    ensure!(
        dims[0] == dims[1] && dims[1] == dims[2],
        Validation,
        "level maps disagree on resolution: {:?}",
        dims
    );

    let a = checked_conv(g, "mlcd.align_high", high, 1)?;
    let b = checked_conv(g, "mlcd.align_mid", mid, 1)?;
    let mut x = g.concat(a, b);
    for j in 0..shape.convs_per_stage {
        x = checked_conv(g, &format!("mlcd.fuse_mid.l{j}"), x, DecoderShape::dilation(0, j))?;
        x = g.relu(x);
    }
    let a = checked_conv(g, "mlcd.align_fused", x, 1)?;
    let b = checked_conv(g, "mlcd.align_low", low, 1)?;
    let mut x = g.concat(a, b);
    for j in 0..shape.convs_per_stage {
        x = checked_conv(g, &format!("mlcd.fuse_low.l{j}"), x, DecoderShape::dilation(1, j))?;
        x = g.relu(x);
    }
    checked_conv(g, "mlcd.rgb", x, 1)
}

/// Raw decoded image `[3, H, W]` (not clamped).
pub fn decode(maps: &LevelFeatureMaps, shape: &DecoderShape, store: &ParamStore) -> Result<Tensor> {
    decode_maps(&maps.maps, shape, store)
}

pub fn decode_maps(maps: &[Tensor; 3], shape: &DecoderShape, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    g.bind_params(&store.filter_prefix("mlcd."), |_| false);
    let vars = [
        g.constant(maps[0].clone()),
        g.constant(maps[1].clone()),
        g.constant(maps[2].clone()),
    ];
    let out = decode_graph(&mut g, shape, vars)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn maps(rng: &mut ChaCha8Rng, ch: [usize; 3], h: usize, w: usize) -> [Tensor; 3] {
        [rand_map(rng, ch[0], h, w), rand_map(rng, ch[1], h, w), rand_map(rng, ch[2], h, w)]
    }

    // Literal dilated "same" convolution with zero padding.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, dil: usize) -> Tensor {
        let (cin, h, wd) = x.chw().unwrap();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let pad = (dil * (k - 1) / 2) as isize;
        let mut out = Tensor::zeros(&[cout, h, wd]);
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = b.data()[o];
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + (ky * dil) as isize - pad;
                                let sx = xx as isize + (kx * dil) as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                s += w.data()[((o * cin + i) * k + ky) * k + kx]
                                    * x.data()[(i * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * h + y) * wd + xx] = s;
                }
            }
        }
        out
    }

    fn cat(a: &Tensor, b: &Tensor) -> Tensor {
        let (ca, h, w) = a.chw().unwrap();
        let (cb, _, _) = b.chw().unwrap();
        let mut d = a.data().to_vec();
        d.extend_from_slice(b.data());
        Tensor::from_vec(&[ca + cb, h, w], d).unwrap()
    }

    #[test]
    fn tiny_decoder_matches_loop_oracle() {
        let shape = DecoderShape {
            level_channels: [2, 3, 4],
            convs_per_stage: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let store = init_params(&shape, &mut rng);
        let inputs = maps(&mut rng, shape.level_channels, 2, 2);
        let out = decode_maps(&inputs, &shape, &store).unwrap();

        let c = |x: &Tensor, n: &str, d: usize| {
            conv_oracle(
                x,
                store.get(&format!("{n}.weight")).unwrap(),
                store.get(&format!("{n}.bias")).unwrap(),
                d,
            )
        };
        let relu = |t: Tensor| t.map(|v| v.max(0.0));
        let x = cat(&c(&inputs[2], "mlcd.align_high", 1), &c(&inputs[1], "mlcd.align_mid", 1));
        let x = relu(c(&x, "mlcd.fuse_mid.l0", 4));
        let x = cat(&c(&x, "mlcd.align_fused", 1), &c(&inputs[0], "mlcd.align_low", 1));
        let x = relu(c(&x, "mlcd.fuse_low.l0", 2));
        let expected = c(&x, "mlcd.rgb", 1);
        assert!(out.max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn zero_inputs_zero_biases_give_zero() {
        let shape = DecoderShape::new([2, 3, 4]);
        let mut store = init_params(&shape, &mut ChaCha8Rng::seed_from_u64(1));
        let names: Vec<String> = store.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let zeros = [Tensor::zeros(&[2, 5, 6]), Tensor::zeros(&[3, 5, 6]), Tensor::zeros(&[4, 5, 6])];
        let out = decode_maps(&zeros, &shape, &store).unwrap();
        assert_eq!(out.shape(), &[3, 5, 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_mismatched_maps() {
        let shape = DecoderShape::new([2, 3, 4]);
        let store = init_params(&shape, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = maps(&mut rng, [2, 3, 4], 4, 4);
        m[1] = rand_map(&mut rng, 3, 4, 5);
        assert!(decode_maps(&m, &shape, &store).is_err());
        let m = maps(&mut rng, [2, 3, 5], 4, 4);
        assert!(decode_maps(&m, &shape, &store).is_err());
    }

    #[test]
    fn interior_translation_equivariance() {
        let shape = DecoderShape::new([2, 2, 3]);
        let store = init_params(&shape, &mut ChaCha8Rng::seed_from_u64(3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w) = (24, 24);
        let base = maps(&mut rng, shape.level_channels, h, w + 1);
        // `a` is columns 0..w, `b` is columns 1..w+1: b(x) = a(x + 1).
        let crop = |t: &Tensor, off: usize| {
            let (c, hh, ww) = t.chw().unwrap();
            let mut d = Vec::new();
            for ci in 0..c {
                for y in 0..hh {
                    for x in off..off + w {
                        d.push(t.data()[(ci * hh + y) * ww + x]);
                    }
                }
            }
            Tensor::from_vec(&[c, hh, w], d).unwrap()
        };
        let a = base.clone().map(|t| crop(&t, 0));
        let b = base.map(|t| crop(&t, 1));
        let oa = decode_maps(&a, &shape, &store).unwrap();
        let ob = decode_maps(&b, &shape, &store).unwrap();
        // Receptive radius: 4 + 2 + 2 + 1 + 1 = 10.
        let band = 10;
        for c in 0..3 {
            for y in band..h - band {
                for x in band..w - band - 1 {
                    let va = oa.data()[(c * h + y) * w + x + 1];
                    let vb = ob.data()[(c * h + y) * w + x];
                    assert!((va - vb).abs() < 1e-12);
                }
            }
        }
    }
}
