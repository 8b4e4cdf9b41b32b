//! Style/content discrepancy indicators, variant ablation and the
//! multi-view consistency ratio.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{ensure, Result};
use crate::feature_renderer::RenderSettings;
use crate::mlfa::Level;
use crate::model::{Model, StyleSource};
use crate::params::ParamStore;
use crate::perceptual_encoder::Encoder;
use crate::scene_field::SceneField;
use crate::tensor::Tensor;
use crate::trainer::style_loss;

const NORM_EPS: f64 = 1e-10;

/// Mean statistic-matching loss of `images` against one style image.
pub fn style_discrepancy(images: &[Tensor], style_img: &Tensor, encoder: &Encoder) -> Result<f64> {
    ensure!(!images.is_empty(), Validation, "style discrepancy of an empty image list");
    let target = encoder.encode_levels(style_img)?;
    let losses = images
        .par_iter()
        .map(|img| style_loss(&encoder.encode_levels(img)?, &target))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Per-channel weights for the content discrepancy, one vector per tap.
#[derive(Clone, Debug, PartialEq)]
pub struct LpipsWeights {
    pub levels: [Vec<f64>; 3],
}

impl LpipsWeights {
    pub fn unit(channels: [usize; 3]) -> Self {
        Self {
            levels: channels.map(|c| vec![1.0; c]),
        }
    }

    /// Reads `lpips.low`, `lpips.mid`, `lpips.high` from a named-tensor store.
    pub fn from_store(store: &ParamStore, channels: [usize; 3]) -> Result<Self> {
        let mut levels: [Vec<f64>; 3] = Default::default();
        for level in Level::ALL {
            let name = format!("lpips.{}", level.name());
            let t = store.require(&name)?;
            let c = channels[level.index()];
            ensure!(t.len() == c, Shape, "`{name}` has {} weights for {c} channels", t.len());
            ensure!(t.data().iter().all(|w| w.is_finite() && *w >= 0.0), Validation, "`{name}` must be finite and non-negative");
            levels[level.index()] = t.data().to_vec();
        }
        Ok(Self { levels })
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for level in Level::ALL {
            let w = &self.levels[level.index()];
            store.insert(format!("lpips.{}", level.name()), Tensor::from_vec(&[w.len()], w.clone()).unwrap());
        }
        store
    }
}

fn tap_distance(a: &Tensor, b: &Tensor, weights: &[f64]) -> Result<f64> {
    let (c, h, w) = a.chw()?;
    ensure!(a.shape() == b.shape(), Shape, "taps {:?} vs {:?}", a.shape(), b.shape());
    ensure!(weights.len() == c, Shape, "{} weights for {c} channels", weights.len());
    let hw = h * w;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    for p in 0..hw {
        let na = (0..c).map(|k| da[k * hw + p].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
        let nb = (0..c).map(|k| db[k * hw + p].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
        total += (0..c)
            .map(|k| weights[k] * (da[k * hw + p] / na - db[k * hw + p] / nb).powi(2))
            .sum::<f64>();
    }
    Ok(total / hw as f64)
}

/// Learned-perceptual-style distance: channel-normalized tap differences,
/// weighted per channel, averaged over pixels and summed over taps.
pub fn content_discrepancy(
    stylized: &Tensor,
    original: &Tensor,
    encoder: &Encoder,
    weights: Option<&LpipsWeights>,
) -> Result<f64> {
    ensure!(
        stylized.shape() == original.shape(),
        Shape,
        "stylized {:?} vs original {:?}",
        stylized.shape(),
        original.shape()
    );
    let unit;
    let weights = match weights {
        Some(w) => w,
        None => {
            unit = LpipsWeights::unit(encoder.channels);
            &unit
        }
    };
    let (fa, fb) = (encoder.encode_levels(stylized)?, encoder.encode_levels(original)?);
    let mut total = 0.0;
    for level in Level::ALL {
        total += tap_distance(fa.level(level), fb.level(level), &weights.levels[level.index()])?;
    }
    Ok(total)
}

/// PSNR in dB of an image clamped to `[0, 1]` against a reference.
pub fn psnr(image: &Tensor, reference: &Tensor) -> Result<f64> {
    ensure!(image.shape() == reference.shape(), Shape, "{:?} vs {:?}", image.shape(), reference.shape());
    ensure!(!image.is_empty(), Validation, "empty image");
    let mse = image
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a.clamp(0.0, 1.0) - b).powi(2))
        .sum::<f64>()
        / image.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Held-out views with their ground-truth images.
#[derive(Clone, Debug)]
pub struct EvalViews<'a> {
    pub scene: &'a SceneField,
    pub cameras: &'a [Camera],
    pub originals: &'a [Tensor],
    pub render: RenderSettings,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discrepancies {
    pub style: f64,
    pub content: f64,
}

/// Style and content discrepancy of `model` averaged over every
/// (view, style) pair.
pub fn evaluate_model(
    model: &Model,
    views: &EvalViews<'_>,
    styles: &[Tensor],
    encoder: &Encoder,
    weights: Option<&LpipsWeights>,
) -> Result<Discrepancies> {
    ensure!(!styles.is_empty(), Validation, "no evaluation styles");
    ensure!(
        !views.cameras.is_empty() && views.cameras.len() == views.originals.len(),
        Validation,
        "{} cameras for {} originals",
        views.cameras.len(),
        views.originals.len()
    );
    let contents = views
        .cameras
        .par_iter()
        .map(|cam| model.content_maps(views.scene, cam, &views.render))
        .collect::<Result<Vec<_>>>()?;
    let mut style_sum = 0.0;
    let mut content_sum = 0.0;
    for style in styles {
        let feats = encoder.encode_levels(style)?;
        let outputs = contents
            .par_iter()
            .map(|c| model.stylize(c, StyleSource::single(&feats)).map(|t| t.map(|v| v.clamp(0.0, 1.0))))
            .collect::<Result<Vec<_>>>()?;
        style_sum += style_discrepancy(&outputs, style, encoder)?;
        let content = outputs
            .par_iter()
            .zip(views.originals)
            .map(|(o, g)| content_discrepancy(o, g, encoder, weights))
            .collect::<Result<Vec<_>>>()?;
        content_sum += content.iter().sum::<f64>() / content.len() as f64;
    }
    let n = styles.len() as f64;
    Ok(Discrepancies {
        style: style_sum / n,
        content: content_sum / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// `None` when the variant's checkpoint was missing.
    pub result: Option<Discrepancies>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const HEADER: &'static str = "variant,style_discrepancy,content_discrepancy,status";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for row in &self.rows {
            match row.result {
                Some(d) => writeln!(out, "{},{:.9e},{:.9e},ok", row.label, d.style, d.content),
                None => writeln!(out, "{},,,absent", row.label),
            }
            .unwrap();
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.result.is_some())
    }
}

/// One row per labelled model; `None` entries are reported as absent.
pub fn ablation_run(
    entries: &[(String, Option<&Model>)],
    views: &EvalViews<'_>,
    styles: &[Tensor],
    encoder: &Encoder,
    weights: Option<&LpipsWeights>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(entries.len());
    for (label, model) in entries {
        let result = match model {
            Some(m) => Some(evaluate_model(m, views, styles, encoder, weights)?),
            None => {
                log::warn!("variant `{label}` has no checkpoint; listed as absent");
                None
            }
        };
        rows.push(AblationRow {
            label: label.clone(),
            result,
        });
    }
    Ok(AblationTable { rows })
}

/// Pixel pair `((row, col) in view a, (row, col) in view b)`.
pub type Correspondence = ((usize, usize), (usize, usize));

fn correspondence_rmse(a: &Tensor, b: &Tensor, pairs: &[Correspondence]) -> Result<f64> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    ensure!(ca == cb, Shape, "{ca} vs {cb} channels");
    let mut sum = 0.0;
    for &((ra, ka), (rb, kb)) in pairs {
        ensure!(ra < ha && ka < wa && rb < hb && kb < wb, Validation, "correspondence outside the image");
        for ch in 0..ca {
            let va = a.data()[(ch * ha + ra) * wa + ka].clamp(0.0, 1.0);
            let vb = b.data()[(ch * hb + rb) * wb + kb].clamp(0.0, 1.0);
            sum += (va - vb).powi(2);
        }
    }
    Ok((sum / (pairs.len() * ca) as f64).sqrt())
}

/// RMSE of stylized colour differences over corresponding pixels divided by
/// the same RMSE for the content pipeline. `0/0` is defined as 1.
pub fn consistency_ratio(
    stylized: (&Tensor, &Tensor),
    content: (&Tensor, &Tensor),
    pairs: &[Correspondence],
) -> Result<f64> {
    ensure!(!pairs.is_empty(), Validation, "no correspondences");
    let num = correspondence_rmse(stylized.0, stylized.1, pairs)?;
    let den = correspondence_rmse(content.0, content.1, pairs)?;
    Ok(match (num == 0.0, den == 0.0) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => num / den,
    })
}

/// Consistency ratio of `style` between two views. The content pipeline is
/// the same model with identity injection.
#[allow(clippy::too_many_arguments)]
pub fn consistency_check(
    model: &Model,
    scene: &SceneField,
    cameras: (&Camera, &Camera),
    pairs: &[Correspondence],
    style: StyleSource<'_>,
    render: &RenderSettings,
) -> Result<f64> {
    ensure!(!pairs.is_empty(), Validation, "no correspondences");
    let ca = model.content_maps(scene, cameras.0, render)?;
    let cb = model.content_maps(scene, cameras.1, render)?;
    let identity = model.identity_params();
    let (sa, sb) = (model.stylize(&ca, style)?, model.stylize(&cb, style)?);
    let (pa, pb) = (
        model.stylize(&ca, StyleSource::Params(&identity))?,
        model.stylize(&cb, StyleSource::Params(&identity))?,
    );
    consistency_ratio((&sa, &sb), (&pa, &pb), pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[3, size, size], (0..3 * size * size).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn style_discrepancy_cases() {
        let enc = Encoder::tiny(0);
        let s = random_image(8, 1);
        assert_eq!(style_discrepancy(&[s.clone()], &s, &enc).unwrap(), 0.0);
        assert!(style_discrepancy(&[], &s, &enc).is_err());

        let a = random_image(8, 2);
        let one = style_discrepancy(&[a.clone()], &s, &enc).unwrap();
        let two = style_discrepancy(&[a.clone(), a.clone()], &s, &enc).unwrap();
        assert!((one - two).abs() < 1e-15);

        // Direct mean/std oracle.
        let (fa, fs) = (enc.encode_levels(&a).unwrap(), enc.encode_levels(&s).unwrap());
        let mut expect = 0.0;
        for level in Level::ALL {
            let (xa, xs) = (fa.level(level), fs.level(level));
            let (c, h, w) = xa.chw().unwrap();
            let (_, hs, ws) = xs.chw().unwrap();
            let stat = |d: &[f64], n: usize| {
                let m = d.iter().sum::<f64>() / n as f64;
                let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
                (m, (v + 1e-5).sqrt())
            };
            let (mut dm, mut ds) = (0.0, 0.0);
            for k in 0..c {
                let (ma, sa) = stat(&xa.data()[k * h * w..(k + 1) * h * w], h * w);
                let (ms, ss) = stat(&xs.data()[k * hs * ws..(k + 1) * hs * ws], hs * ws);
                dm += (ma - ms).powi(2);
                ds += (sa - ss).powi(2);
            }
            expect += (dm + ds) / c as f64;
        }
        assert!((one - expect).abs() < 1e-10 * expect.max(1.0));

        // Order invariance.
        let b = random_image(8, 3);
        let ab = style_discrepancy(&[a.clone(), b.clone()], &s, &enc).unwrap();
        let ba = style_discrepancy(&[b, a], &s, &enc).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn content_discrepancy_cases() {
        let enc = Encoder::tiny(0);
        let (a, b) = (random_image(8, 4), random_image(8, 5));
        assert_eq!(content_discrepancy(&a, &a, &enc, None).unwrap(), 0.0);
        let ab = content_discrepancy(&a, &b, &enc, None).unwrap();
        let ba = content_discrepancy(&b, &a, &enc, None).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
        assert!(content_discrepancy(&a, &random_image(4, 0), &enc, None).is_err());

        // Loop oracle under unit weights.
        let (fa, fb) = (enc.encode_levels(&a).unwrap(), enc.encode_levels(&b).unwrap());
        let mut expect = 0.0;
        for level in Level::ALL {
            let (xa, xb) = (fa.level(level), fb.level(level));
            let (c, h, w) = xa.chw().unwrap();
            let mut acc = 0.0;
            for r in 0..h {
                for col in 0..w {
                    let at = |t: &Tensor, k: usize| t.data()[(k * h + r) * w + col];
                    let na: f64 = (0..c).map(|k| at(xa, k) * at(xa, k)).sum::<f64>().sqrt() + 1e-10;
                    let nb: f64 = (0..c).map(|k| at(xb, k) * at(xb, k)).sum::<f64>().sqrt() + 1e-10;
                    for k in 0..c {
                        acc += (at(xa, k) / na - at(xb, k) / nb).powi(2);
                    }
                }
            }
            expect += acc / (h * w) as f64;
        }
        assert!((ab - expect).abs() < 1e-10);

        // Calibrated weights round trip through a store; zero weights give zero.
        let zero = LpipsWeights {
            levels: enc.channels.map(|c| vec![0.0; c]),
        };
        let loaded = LpipsWeights::from_store(&zero.to_store(), enc.channels).unwrap();
        assert_eq!(loaded, zero);
        assert_eq!(content_discrepancy(&a, &b, &enc, Some(&loaded)).unwrap(), 0.0);
        assert!(LpipsWeights::from_store(&ParamStore::new(), enc.channels).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(4, 6);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        let c = a.map(|v| (v + 0.1).min(1.0));
        // Values above 1 are clamped before comparison.
        assert_eq!(psnr(&b, &c).unwrap(), f64::INFINITY);
        let z = Tensor::zeros(&[3, 4, 4]);
        let h = Tensor::full(&[3, 4, 4], 0.1);
        assert!((psnr(&z, &h).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn consistency_ratio_cases() {
        let a = random_image(4, 7);
        let b = random_image(4, 8);
        let pairs: Vec<Correspondence> = (0..4).map(|i| ((i, i), (i, 3 - i))).collect();
        assert_eq!(consistency_ratio((&a, &a), (&b, &b), &[((0, 0), (0, 0))]).unwrap(), 1.0);
        assert_eq!(consistency_ratio((&a, &b), (&a, &b), &pairs).unwrap(), 1.0);
        assert!(consistency_ratio((&a, &b), (&a, &b), &[]).is_err());
        assert!(consistency_ratio((&a, &b), (&a, &b), &[((9, 0), (0, 0))]).is_err());
        let ratio = consistency_ratio((&a, &b), (&a, &a.map(|v| 1.0 - v)), &pairs).unwrap();
        assert!(ratio.is_finite() && ratio >= 0.0);
    }

    #[test]
    fn ablation_table_csv() {
        let row = |label: &str, result| AblationRow {
            label: label.into(),
            result,
        };
        let d = Discrepancies { style: 0.5, content: 0.25 };
        let table = AblationTable {
            rows: vec![row("multi_dsi", Some(d)), row("single_adain", None)],
        };
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], AblationTable::HEADER);
        assert_eq!(lines[1], "multi_dsi,5.000000000e-1,2.500000000e-1,ok");
        assert_eq!(lines[2], "single_adain,,,absent");
        assert!(!table.is_complete());
    }
}
