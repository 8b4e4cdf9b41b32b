//! Feature-grid radiance fields with zero-shot style transfer.
//!
//! A pre-trained factorized scene is rendered into low/mid/high feature maps,
//! the maps are restyled with per-channel weights generated from a style
//! image, and a dilated-convolution cascade decodes them back to RGB.

pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dsi;
pub mod error;
pub mod eval;
pub mod feature_renderer;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod manifest;
pub mod mlcd;
pub mod mlfa;
pub mod model;
pub mod nn;
pub mod params;
pub mod perceptual_encoder;
pub mod properties;
pub mod reference3d;
pub mod scene_field;
pub mod stats;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use camera::{Camera, Pose};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dsi::{GeneratorShape, InjectionParams};
pub use error::{Error, Result};
pub use feature_renderer::{LevelFeatureMaps, RenderSettings};
pub use manifest::Trajectory;
pub use mlcd::DecoderShape;
pub use mlfa::{AdaptorShape, Level, Stage};
pub use model::{Model, ModelShape, StyleSource, Variant};
pub use params::ParamStore;
pub use perceptual_encoder::{Encoder, StyleFeatures};
pub use scene_field::{Aabb, FactorizedGrid, OpacityField, Ray, SceneField};
pub use tensor::Tensor;
pub use trainer::{LossReport, TrainConfig};
