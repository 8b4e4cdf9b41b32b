//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_renderer::RenderSettings;
use crate::model::{ModelShape, Variant};
use crate::perceptual_encoder::{Encoder, TINY_CHANNELS};
use crate::scene_field::{PretrainConfig, RaySettings};
use crate::trainer::TrainConfig;

/// Every key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for initialization, sampling and toy data"),
    ("image_size", "64", "toy view width and height in pixels"),
    ("views", "8", "toy training views on the orbit"),
    ("scene_resolution", "32", "scene grid voxels per axis"),
    ("scene_rank", "4", "factor rank of the scene grid"),
    ("basic_channels", "48", "width of basic point features"),
    ("samples", "32", "samples per ray"),
    ("chunk_rays", "4096", "rays per rendering work item"),
    ("pretrain_iterations", "1500", "scene pre-training iterations"),
    ("pretrain_rays", "1024", "rays per scene pre-training step"),
    ("stage1_iterations", "500", "reconstruction iterations"),
    ("stage1_lr", "0.001", "adaptor and decoder learning rate (reconstruction)"),
    ("views_per_step", "1", "whole views per reconstruction step"),
    ("stage2_iterations", "1000", "stylization iterations"),
    ("lr_style", "0.001", "normalization and generator learning rate"),
    ("lr_decoder", "0.00001", "decoder learning rate during stylization"),
    ("lambda", "30", "style-loss weight"),
    ("mlp_depth", "2", "linear layers per adaptor MLP"),
    ("decoder_convs", "2", "fusion convolutions per decoder stage"),
    ("generator_convs", "3", "spatial-branch convolutions per generator"),
    ("generator_reduction", "4", "channel-branch bottleneck reduction"),
    ("encoder", "tiny", "`tiny` for the seeded reduced encoder, or a checkpoint directory"),
    ("encoder_seed", "0", "seed of the tiny encoder"),
    ("variant", "multi_dsi", "single_adain | single_dsi | multi_adain | multi_dsi"),
    ("style_corpus", "", "directory of style images (empty: procedural corpus)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub views: usize,
    pub scene_resolution: usize,
    pub scene_rank: usize,
    pub basic_channels: usize,
    pub samples: usize,
    pub chunk_rays: usize,
    pub pretrain_iterations: usize,
    pub pretrain_rays: usize,
    pub stage1_iterations: usize,
    pub stage1_lr: f64,
    pub views_per_step: usize,
    pub stage2_iterations: usize,
    pub lr_style: f64,
    pub lr_decoder: f64,
    pub lambda: f64,
    pub mlp_depth: usize,
    pub decoder_convs: usize,
    pub generator_convs: usize,
    pub generator_reduction: usize,
    pub encoder: String,
    pub encoder_seed: u64,
    pub variant: Variant,
    pub style_corpus: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            image_size: 0,
            views: 0,
            scene_resolution: 0,
            scene_rank: 0,
            basic_channels: 0,
            samples: 0,
            chunk_rays: 0,
            pretrain_iterations: 0,
            pretrain_rays: 0,
            stage1_iterations: 0,
            stage1_lr: 0.0,
            views_per_step: 0,
            stage2_iterations: 0,
            lr_style: 0.0,
            lr_decoder: 0.0,
            lambda: 0.0,
            mlp_depth: 0,
            decoder_convs: 0,
            generator_convs: 0,
            generator_reduction: 0,
            encoder: String::new(),
            encoder_seed: 0,
            variant: Variant::FULL,
            style_corpus: None,
        };
        for (k, v, _) in KEYS {
            c.set(k, v).expect("documented defaults parse");
        }
        c
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "views" => self.views = num(key, v)?,
            "scene_resolution" => self.scene_resolution = num(key, v)?,
            "scene_rank" => self.scene_rank = num(key, v)?,
            "basic_channels" => self.basic_channels = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            "chunk_rays" => self.chunk_rays = num(key, v)?,
            "pretrain_iterations" => self.pretrain_iterations = num(key, v)?,
            "pretrain_rays" => self.pretrain_rays = num(key, v)?,
            "stage1_iterations" => self.stage1_iterations = num(key, v)?,
            "stage1_lr" => self.stage1_lr = num(key, v)?,
            "views_per_step" => self.views_per_step = num(key, v)?,
            "stage2_iterations" => self.stage2_iterations = num(key, v)?,
            "lr_style" => self.lr_style = num(key, v)?,
            "lr_decoder" => self.lr_decoder = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "mlp_depth" => self.mlp_depth = num(key, v)?,
            "decoder_convs" => self.decoder_convs = num(key, v)?,
            "generator_convs" => self.generator_convs = num(key, v)?,
            "generator_reduction" => self.generator_reduction = num(key, v)?,
            "encoder" => self.encoder = v.to_string(),
            "encoder_seed" => self.encoder_seed = num(key, v)?,
            "variant" => self.variant = Variant::parse(v)?,
            "style_corpus" => self.style_corpus = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "views" => self.views.to_string(),
            "scene_resolution" => self.scene_resolution.to_string(),
            "scene_rank" => self.scene_rank.to_string(),
            "basic_channels" => self.basic_channels.to_string(),
            "samples" => self.samples.to_string(),
            "chunk_rays" => self.chunk_rays.to_string(),
            "pretrain_iterations" => self.pretrain_iterations.to_string(),
            "pretrain_rays" => self.pretrain_rays.to_string(),
            "stage1_iterations" => self.stage1_iterations.to_string(),
            "stage1_lr" => self.stage1_lr.to_string(),
            "views_per_step" => self.views_per_step.to_string(),
            "stage2_iterations" => self.stage2_iterations.to_string(),
            "lr_style" => self.lr_style.to_string(),
            "lr_decoder" => self.lr_decoder.to_string(),
            "lambda" => self.lambda.to_string(),
            "mlp_depth" => self.mlp_depth.to_string(),
            "decoder_convs" => self.decoder_convs.to_string(),
            "generator_convs" => self.generator_convs.to_string(),
            "generator_reduction" => self.generator_reduction.to_string(),
            "encoder" => self.encoder.clone(),
            "encoder_seed" => self.encoder_seed.to_string(),
            "variant" => self.variant.name().to_string(),
            "style_corpus" => self
                .style_corpus
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            other => return Err(Error::UnknownKey(other.to_string())),
        })
    }

    /// Every key in documented order, `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap());
        }
        out
    }

    /// Hex SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("views", self.views),
            ("scene_resolution", self.scene_resolution),
            ("scene_rank", self.scene_rank),
            ("basic_channels", self.basic_channels),
            ("samples", self.samples),
            ("chunk_rays", self.chunk_rays),
            ("pretrain_rays", self.pretrain_rays),
            ("views_per_step", self.views_per_step),
            ("mlp_depth", self.mlp_depth),
            ("decoder_convs", self.decoder_convs),
            ("generator_reduction", self.generator_reduction),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.image_size % 4 != 0 {
            return Err(Error::Config("`image_size` must be divisible by 4".into()));
        }
        self.train_config(0).validate()
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            rays: self.ray_settings(),
            chunk_rays: self.chunk_rays,
            ..RenderSettings::default()
        }
    }

    pub fn ray_settings(&self) -> RaySettings {
        RaySettings {
            samples: self.samples,
            ..RaySettings::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            iterations: self.pretrain_iterations,
            rays_per_batch: self.pretrain_rays,
            rays: self.ray_settings(),
            seed: self.seed,
            ..PretrainConfig::default()
        }
    }

    pub fn train_config(&self, iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            lr_stage1: self.stage1_lr,
            lr_style: self.lr_style,
            lr_decoder: self.lr_decoder,
            lambda: self.lambda,
            views_per_step: self.views_per_step,
            seed: self.seed,
            render: self.render_settings(),
            log_every: 50,
        }
    }

    pub fn encoder(&self) -> Result<Encoder> {
        if self.encoder == "tiny" {
            Ok(Encoder::tiny(self.encoder_seed))
        } else {
            let ck = crate::checkpoint::Checkpoint::load(&self.encoder)?;
            Encoder::from_store(&ck.tensors)
        }
    }

    pub fn model_shape(&self, level_channels: [usize; 3]) -> ModelShape {
        let mut s = ModelShape::new(self.basic_channels, level_channels);
        s.adaptor.depth = self.mlp_depth;
        s.decoder.convs_per_stage = self.decoder_convs;
        s.generator.spatial_convs = self.generator_convs;
        s.generator.reduction = self.generator_reduction;
        s
    }

    /// Model shape for the tiny encoder's widths.
    pub fn tiny_model_shape(&self) -> ModelShape {
        self.model_shape(TINY_CHANNELS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_documented_and_round_trip() {
        let c = RunConfig::default();
        assert_eq!(c.lambda, 30.0);
        assert_eq!(c.lr_decoder, 1e-5);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        for (k, d, _) in KEYS {
            assert_eq!(&c.get(k).unwrap(), d, "{k}");
        }
    }

    #[test]
    fn parse_comments_and_overrides() {
        let c = RunConfig::parse("# comment\nseed = 9  # trailing\n\nlambda=5\nvariant = single_adain\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.lambda, 5.0);
        assert_eq!(c.variant.name(), "single_adain");
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        match RunConfig::parse("foo = 1") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "foo"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("seed = x"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lambda = -1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just text"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("image_size = 30"), Err(Error::Config(_))));
    }
}
