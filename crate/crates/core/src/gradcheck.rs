//! Central finite-difference checks of the training losses against the
//! tape gradients, on networks small enough to probe exhaustively.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{look_at, Camera};
use crate::error::Result;
use crate::feature_renderer::{LevelFeatureMaps, RenderSettings};
use crate::graph::Graph;
use crate::model::{self, Model, ModelShape, Variant};
use crate::nn;
use crate::params::ParamStore;
use crate::perceptual_encoder::{Encoder, StyleFeatures};
use crate::scene_field::{Aabb, PosedImage, RaySettings, SceneField};
use crate::tensor::Tensor;
use crate::trainer::{self, ReconstructionView};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Differences below this are finite-difference noise, not gradient errors.
pub const ABS_FLOOR: f64 = 1e-10;
/// Rounding noise of a difference quotient, in ulps of the loss value.
const NOISE_ULPS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Loss {
    Feature,
    Rgb,
    StyleContent,
}

impl Loss {
    pub const ALL: [Loss; 3] = [Loss::Feature, Loss::Rgb, Loss::StyleContent];

    pub fn name(self) -> &'static str {
        match self {
            Loss::Feature => "feature",
            Loss::Rgb => "rgb",
            Loss::StyleContent => "style_content",
        }
    }

    /// Parameter groups the loss depends on.
    pub fn groups(self) -> &'static [&'static str] {
        match self {
            Loss::Feature => &["mlfa."],
            Loss::Rgb => &["mlfa.", "mlcd."],
            Loss::StyleContent => &["lin.", "dsi.", "mlcd."],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub loss: Loss,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Central difference with half the step.
    pub numeric_half: f64,
    pub loss_value: f64,
}

impl Probe {
    /// Smallest gradient difference the quotient can resolve at this loss value.
    pub fn noise_floor(&self) -> f64 {
        ABS_FLOOR.max(NOISE_ULPS * f64::EPSILON * self.loss_value.abs() / STEP)
    }

    pub fn rel_err(&self) -> f64 {
        let d = (self.analytic - self.numeric).abs();
        if d <= self.noise_floor() {
            0.0
        } else {
            d / self.analytic.abs().max(self.numeric.abs())
        }
    }

    /// The loss has a kink (a rectifier or pooling switch) inside the probe
    /// interval: halving the step changes the estimate, which cannot happen
    /// for a smooth function at this step size.
    pub fn crosses_kink(&self) -> bool {
        let d = (self.numeric - self.numeric_half).abs();
        d > 2.0 * self.noise_floor() && d > 0.1 * REL_TOL * self.numeric.abs().max(self.numeric_half.abs())
    }

    pub fn passes(&self) -> bool {
        self.rel_err() <= REL_TOL
    }
}

/// A minimal scene, model and encoder with every loss wired up.
pub struct Fixture {
    pub model: Model,
    pub encoder: Encoder,
    pub view: ReconstructionView,
    pub content: LevelFeatureMaps,
    pub style: StyleFeatures,
    pub lambda: f64,
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let channels = [2, 3, 4];
        let encoder = Encoder::random(channels, seed);
        let mut model = Model::init(ModelShape::new(3, channels), Variant::FULL, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        // Zero-initialized biases put rectifier inputs exactly on the kink in
        // regions the previous layer switched off, and LIN starts at identity;
        // jitter both so every probe sits at a generic point.
        let names: Vec<String> = model
            .params
            .names()
            .filter(|n| model::is_lin(n) || n.ends_with(".bias"))
            .map(String::from)
            .collect();
        for n in names {
            for v in model.params.get_mut(&n).unwrap().data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let scene = SceneField::new(4, 2, 3, Aabb::cube(1.0), seed);
        let camera = Camera::with_fov(8, 8, 0.9, look_at(Vector3::new(0.4, 0.6, 2.5), Vector3::zeros(), Vector3::y()));
        let render = RenderSettings {
            rays: RaySettings {
                samples: 8,
                ..RaySettings::default()
            },
            ..RenderSettings::default()
        };
        let image = Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.gen()).collect())?;
        let view = trainer::prepare_reconstruction(&scene, &[PosedImage { camera: camera.clone(), image }], &encoder, &render)?
            .remove(0);
        let content = model.content_maps(&scene, &camera, &render)?;
        let style_img = Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.gen()).collect())?;
        let style = encoder.encode_levels(&style_img)?;
        Ok(Self {
            model,
            encoder,
            view,
            content,
            style,
            lambda: 30.0,
        })
    }

    /// Trainable network parameters (the encoder is fixed and not counted).
    pub fn parameter_count(&self) -> usize {
        self.model.params.iter().map(|(_, t)| t.len()).sum()
    }

    fn graph(&self, params: &ParamStore, trainable: bool) -> Graph {
        let mut g = Graph::new();
        g.bind_params(params, |_| trainable);
        g.bind_params(&self.encoder.store, |_| false);
        g
    }

    fn loss_on(&self, g: &mut Graph, model: &Model, loss: Loss) -> Result<crate::graph::Var> {
        Ok(match loss {
            Loss::Feature => trainer::reconstruction_loss_graph(g, model, &self.view)?[0],
            Loss::Rgb => trainer::reconstruction_loss_graph(g, model, &self.view)?[1],
            Loss::StyleContent => {
                trainer::stylization_loss_graph(g, model, &self.encoder, &self.content, &self.style, self.lambda)?[2]
            }
        })
    }

    pub fn value(&self, params: &ParamStore, loss: Loss) -> Result<f64> {
        let model = Model {
            params: params.clone(),
            ..self.model.clone()
        };
        let mut g = self.graph(params, false);
        let v = self.loss_on(&mut g, &model, loss)?;
        Ok(g.value(v).item())
    }

    pub fn analytic(&self, loss: Loss) -> Result<BTreeMap<String, Tensor>> {
        let mut g = self.graph(&self.model.params, true);
        let v = self.loss_on(&mut g, &self.model, loss)?;
        let grads = g.backward(v);
        let mut out = nn::collect_grads(&g, &grads);
        out.retain(|name, _| self.model.params.contains(name));
        Ok(out)
    }

    /// Probes up to `per_tensor` coordinates of every parameter in the
    /// loss's groups (all of them when `per_tensor` is `None`).
    pub fn check(&self, loss: Loss, per_tensor: Option<usize>, seed: u64) -> Result<Vec<Probe>> {
        let analytic = self.analytic(loss)?;
        let base = self.value(&self.model.params, loss)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probes = Vec::new();
        for (name, tensor) in self.model.params.iter() {
            if !loss.groups().iter().any(|g| name.starts_with(g)) {
                continue;
            }
            let grad = analytic.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; tensor.len()]);
            let indices: Vec<usize> = match per_tensor {
                Some(k) if k < tensor.len() => (0..k).map(|_| rng.gen_range(0..tensor.len())).collect(),
                _ => (0..tensor.len()).collect(),
            };
            for index in indices {
                let central = |h: f64| -> Result<f64> {
                    let mut p = self.model.params.clone();
                    let x = p.get(name).unwrap().data()[index];
                    p.get_mut(name).unwrap().data_mut()[index] = x + h;
                    let up = self.value(&p, loss)?;
                    p.get_mut(name).unwrap().data_mut()[index] = x - h;
                    let down = self.value(&p, loss)?;
                    Ok((up - down) / (2.0 * h))
                };
                probes.push(Probe {
                    loss,
                    param: name.to_string(),
                    index,
                    analytic: grad[index],
                    numeric: central(STEP)?,
                    numeric_half: central(STEP / 2.0)?,
                    loss_value: base,
                });
            }
        }
        Ok(probes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kink_detection() {
        let probe = |numeric, numeric_half| Probe {
            loss: Loss::Rgb,
            param: "p".into(),
            index: 0,
            analytic: 1.0,
            numeric,
            numeric_half,
            loss_value: 1.0,
        };
        // |x| at x = STEP / 2: the full step straddles the kink, the half step does not.
        assert!(probe(0.5, 1.0).crosses_kink());
        assert!(!probe(1.0, 1.0).crosses_kink());
        assert!(probe(1.0 + 1e-6, 1.0).passes());
        assert!(!probe(1.001, 1.0).passes());
    }

    #[test]
    fn fixture_is_small() {
        let f = Fixture::new(0).unwrap();
        assert!(f.parameter_count() <= 2000, "{} parameters", f.parameter_count());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = Fixture::new(0).unwrap();
        for loss in Loss::ALL {
            let probes = f.check(loss, Some(4), 1).unwrap();
            assert!(!probes.is_empty());
            // Every group the loss touches gets a non-trivial gradient somewhere.
            for group in loss.groups() {
                assert!(
                    probes.iter().any(|p| p.param.starts_with(group) && p.analytic.abs() > 1e-8),
                    "{} has no gradient in {group}",
                    loss.name()
                );
            }
            let (kinks, smooth): (Vec<&Probe>, Vec<&Probe>) = probes.iter().partition(|p| p.crosses_kink());
            assert!(kinks.len() * 20 <= probes.len(), "{} of {} probes cross a kink", kinks.len(), probes.len());
            for p in smooth {
                assert!(p.passes(), "{p:?} rel {}", p.rel_err());
            }
        }
    }
}
