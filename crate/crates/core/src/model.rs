//! The trainable stylization network: adaptor, normalization, style
//! generators and decoder, plus the graph builders shared by training and
//! inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::checkpoint::{Checkpoint, Header};
use crate::dsi::{self, GeneratorShape, InjectionParams};
use crate::error::{ensure, Error, Result};
use crate::feature_renderer::{self, LevelFeatureMaps, RayBundle, RenderSettings};
use crate::graph::{Graph, Var};
use crate::mlcd::{self, DecoderShape};
use crate::mlfa::{self, AdaptorShape, Level, Stage};
use crate::params::ParamStore;
use crate::perceptual_encoder::StyleFeatures;
use crate::scene_field::SceneField;
use crate::tensor::Tensor;

/// Which levels feed the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LevelMode {
    /// High level only; low and mid are zero.
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Injection {
    /// Generated per-channel weights and biases.
    Dynamic,
    /// Statistics transfer.
    Adain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub levels: LevelMode,
    pub injection: Injection,
}

impl Variant {
    pub const FULL: Variant = Variant {
        levels: LevelMode::Multi,
        injection: Injection::Dynamic,
    };

    pub const ALL: [Variant; 4] = [
        Variant {
            levels: LevelMode::Single,
            injection: Injection::Adain,
        },
        Variant {
            levels: LevelMode::Single,
            injection: Injection::Dynamic,
        },
        Variant {
            levels: LevelMode::Multi,
            injection: Injection::Adain,
        },
        Variant::FULL,
    ];

    pub fn name(&self) -> &'static str {
        match (self.levels, self.injection) {
            (LevelMode::Single, Injection::Adain) => "single_adain",
            (LevelMode::Single, Injection::Dynamic) => "single_dsi",
            (LevelMode::Multi, Injection::Adain) => "multi_adain",
            (LevelMode::Multi, Injection::Dynamic) => "multi_dsi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    pub fn active_levels(&self) -> &'static [Level] {
        match self.levels {
            LevelMode::Single => &[Level::High],
            LevelMode::Multi => &Level::ALL,
        }
    }

    pub fn is_active(&self, level: Level) -> bool {
        self.active_levels().contains(&level)
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::FULL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub adaptor: AdaptorShape,
    pub decoder: DecoderShape,
    pub generator: GeneratorShape,
}

impl ModelShape {
    pub fn new(basic_channels: usize, level_channels: [usize; 3]) -> Self {
        Self {
            adaptor: AdaptorShape {
                basic_channels,
                level_channels,
                depth: 2,
            },
            decoder: DecoderShape::new(level_channels),
            generator: GeneratorShape::new(level_channels),
        }
    }

    pub fn level_channels(&self) -> [usize; 3] {
        self.adaptor.level_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.adaptor.validate()?;
        self.decoder.validate()?;
        let lc = self.adaptor.level_channels;
        ensure!(
            self.decoder.level_channels == lc && self.generator.level_channels == lc,
            Config,
            "adaptor, decoder and generator disagree on level widths"
        );
        ensure!(self.generator.reduction >= 1, Config, "generator reduction must be at least 1");
        Ok(())
    }
}

/// Style input of one stylization: features per level, or fixed parameters.
#[derive(Clone, Copy, Debug)]
pub enum StyleSource<'a> {
    PerLevel([&'a StyleFeatures; 3]),
    Params(&'a [InjectionParams; 3]),
}

impl<'a> StyleSource<'a> {
    pub fn single(style: &'a StyleFeatures) -> Self {
        StyleSource::PerLevel([style, style, style])
    }
}

/// Parameter groups, keyed by name prefix.
pub fn is_adaptor_mlp(name: &str) -> bool {
    name.starts_with("mlfa.")
}
pub fn is_lin(name: &str) -> bool {
    name.starts_with("lin.")
}
pub fn is_generator(name: &str) -> bool {
    name.starts_with("dsi.")
}
pub fn is_decoder(name: &str) -> bool {
    name.starts_with("mlcd.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub shape: ModelShape,
    pub variant: Variant,
    pub params: ParamStore,
}

impl Model {
    pub fn init(shape: ModelShape, variant: Variant, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = mlfa::init_params(&shape.adaptor, &mut rng);
        params.extend(mlcd::init_params(&shape.decoder, &mut rng));
        params.extend(dsi::init_params(&shape.generator, &mut rng));
        Ok(Self { shape, variant, params })
    }

    pub fn from_params(shape: ModelShape, variant: Variant, params: ParamStore) -> Result<Self> {
        shape.validate()?;
        mlfa::validate_params(&shape.adaptor, &params)?;
        mlcd::validate_params(&shape.decoder, &params)?;
        dsi::validate_params(&shape.generator, &params)?;
        Ok(Self { shape, variant, params })
    }

    fn check_scene(&self, scene: &SceneField) -> Result<()> {
        ensure!(
            scene.grid.feature_dim == self.shape.adaptor.basic_channels,
            Shape,
            "scene emits {} channels, model expects {}",
            scene.grid.feature_dim,
            self.shape.adaptor.basic_channels
        );
        Ok(())
    }

    /// Content maps (no normalization) with inactive levels zeroed.
    pub fn content_maps(&self, scene: &SceneField, camera: &Camera, settings: &RenderSettings) -> Result<LevelFeatureMaps> {
        self.check_scene(scene)?;
        let bundle = feature_renderer::trace_view(scene, camera, settings);
        self.content_maps_from_bundle(&bundle)
    }

    pub fn content_maps_from_bundle(&self, bundle: &RayBundle) -> Result<LevelFeatureMaps> {
        let mut maps = feature_renderer::composite_bundle(&self.params, &self.shape.adaptor, bundle, Stage::Stage1)?;
        for level in Level::ALL {
            if !self.variant.is_active(level) {
                maps.maps[level.index()].data_mut().fill(0.0);
            }
        }
        Ok(maps)
    }

    /// Reconstruction graph: rendered level maps and the raw decoded image.
    pub fn reconstruct_graph(&self, g: &mut Graph, bundle: &RayBundle) -> Result<([Var; 3], Var)> {
        let mut maps = feature_renderer::render_levels_graph(g, self.shape.adaptor.depth, bundle);
        for level in Level::ALL {
            if !self.variant.is_active(level) {
                let shape = g.value(maps[level.index()]).shape().to_vec();
                maps[level.index()] = g.constant(Tensor::zeros(&shape));
            }
        }
        let rgb = mlcd::decode_graph(g, &self.shape.decoder, maps)?;
        Ok((maps, rgb))
    }

    /// Normalized, injected maps on the tape from constant content maps.
    /// Inactive levels stay zero.
    pub fn stylized_maps_graph(
        &self,
        g: &mut Graph,
        content: &LevelFeatureMaps,
        style: StyleSource<'_>,
    ) -> Result<[Var; 3]> {
        content.validate()?;
        let hw = content.height * content.width;
        let opacity = g.constant(Tensor::from_vec(&[hw], content.opacity.clone())?);
        let mut out = Vec::with_capacity(3);
        for level in Level::ALL {
            let map = content.level(level);
            if !self.variant.is_active(level) {
                out.push(g.constant(Tensor::zeros(map.shape())));
                continue;
            }
            let m = g.constant(map.clone());
            let normed = mlfa::lin_map_graph(g, level, m, opacity);
            let injected = match style {
                StyleSource::Params(params) => {
                    let p = &params[level.index()];
                    let c = p.channels();
                    let w = g.constant(Tensor::from_vec(&[c], p.weight.clone())?);
                    let b = g.constant(Tensor::from_vec(&[c], p.bias.clone())?);
                    dsi::inject_graph(g, normed, w, b)
                }
                StyleSource::PerLevel(styles) => {
                    let feats = styles[level.index()].level(level);
                    let (c, _, _) = feats.chw()?;
                    ensure!(
                        c == self.shape.level_channels()[level.index()],
                        Validation,
                        "{} style features have {} channels",
                        level.name(),
                        c
                    );
                    match self.variant.injection {
                        Injection::Dynamic => {
                            let s = g.constant(feats.clone());
                            let (w, b) = dsi::generator_graph(g, &self.shape.generator, level, s);
                            dsi::inject_graph(g, normed, w, b)
                        }
                        Injection::Adain => dsi::adain_graph(g, normed, feats),
                    }
                }
            };
            out.push(injected);
        }
        Ok(out.try_into().unwrap())
    }

    /// Raw stylized image on the tape.
    pub fn stylize_graph(&self, g: &mut Graph, content: &LevelFeatureMaps, style: StyleSource<'_>) -> Result<Var> {
        let maps = self.stylized_maps_graph(g, content, style)?;
        mlcd::decode_graph(g, &self.shape.decoder, maps)
    }

    fn frozen_graph(&self) -> Graph {
        let mut g = Graph::new();
        g.bind_params(&self.params, |_| false);
        g
    }

    /// Raw decoded image of content maps (the unstylized reconstruction).
    pub fn decode(&self, content: &LevelFeatureMaps) -> Result<Tensor> {
        mlcd::decode(content, &self.shape.decoder, &self.params)
    }

    /// Normalized and injected level maps.
    pub fn stylized_maps(&self, content: &LevelFeatureMaps, style: StyleSource<'_>) -> Result<[Tensor; 3]> {
        let mut g = self.frozen_graph();
        let vars = self.stylized_maps_graph(&mut g, content, style)?;
        Ok(vars.map(|v| g.value(v).clone()))
    }

    /// Raw stylized image `[3, H, W]`.
    pub fn stylize(&self, content: &LevelFeatureMaps, style: StyleSource<'_>) -> Result<Tensor> {
        let mut g = self.frozen_graph();
        let out = self.stylize_graph(&mut g, content, style)?;
        Ok(g.value(out).clone())
    }

    /// Generated weights and biases for each level (identity on inactive levels).
    pub fn injection_params(&self, style: &StyleFeatures) -> Result<[InjectionParams; 3]> {
        ensure!(
            self.variant.injection == Injection::Dynamic,
            Validation,
            "the {} variant has no generated injection parameters",
            self.variant.name()
        );
        let mut out = Vec::with_capacity(3);
        for level in Level::ALL {
            if self.variant.is_active(level) {
                out.push(dsi::generate_params(style, level, &self.shape.generator, &self.params)?);
            } else {
                out.push(InjectionParams::identity(self.shape.level_channels()[level.index()]));
            }
        }
        Ok(out.try_into().unwrap())
    }

    /// Checkpoint holding the parameters and enough metadata to rebuild the shape.
    pub fn to_checkpoint(&self, stage: &str, config_hash: &str, seed: u64) -> Checkpoint {
        let mut h = Header::new(stage, config_hash, seed);
        let s = &self.shape;
        let lc = s.level_channels();
        for (k, v) in [
            ("variant", self.variant.name().to_string()),
            ("basic_channels", s.adaptor.basic_channels.to_string()),
            ("level_channels", format!("{},{},{}", lc[0], lc[1], lc[2])),
            ("mlp_depth", s.adaptor.depth.to_string()),
            ("decoder_convs", s.decoder.convs_per_stage.to_string()),
            ("generator_convs", s.generator.spatial_convs.to_string()),
            ("generator_reduction", s.generator.reduction.to_string()),
        ] {
            h.meta.insert(k.to_string(), v);
        }
        Checkpoint::new(h, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        let num = |k: &str| -> Result<usize> {
            h.meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("meta `{k}` is not a count")))
        };
        let lc: Vec<usize> = h
            .meta("level_channels")?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad level_channels".into())))
            .collect::<Result<_>>()?;
        ensure!(lc.len() == 3, Checkpoint, "level_channels needs three widths");
        let mut shape = ModelShape::new(num("basic_channels")?, [lc[0], lc[1], lc[2]]);
        shape.adaptor.depth = num("mlp_depth")?;
        shape.decoder.convs_per_stage = num("decoder_convs")?;
        shape.generator.spatial_convs = num("generator_convs")?;
        shape.generator.reduction = num("generator_reduction")?;
        Self::from_params(shape, Variant::parse(h.meta("variant")?)?, ck.tensors.clone())
    }

    /// Identity injection parameters for every level.
    pub fn identity_params(&self) -> [InjectionParams; 3] {
        self.shape.level_channels().map(InjectionParams::identity)
    }
}
