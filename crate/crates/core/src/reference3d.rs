//! Style references: a single image, or a posed multi-view style object that
//! is rendered in step with the content camera.

use rayon::prelude::*;

use crate::camera::{rigid_inverse, validate_rigid, Camera, Pose};
use crate::dsi;
use crate::error::{ensure, Error, Result};
use crate::feature_renderer::{RenderSettings, MASK_THRESHOLD};
use crate::manifest::Trajectory;
use crate::model::{Model, StyleSource};
use crate::perceptual_encoder::{Encoder, StyleFeatures};
use crate::scene_field::{pretrain, PosedImage, PretrainConfig, SceneField};
use crate::tensor::Tensor;

/// Rigid `T` with `T · content_front = style_front`.
pub fn align_poses(content_front: &Pose, style_front: &Pose) -> Result<Pose> {
    validate_rigid(content_front)?;
    validate_rigid(style_front)?;
    let mut t = style_front * rigid_inverse(content_front);
    // Keep the affine row exact after the product.
    t[(3, 0)] = 0.0;
    t[(3, 1)] = 0.0;
    t[(3, 2)] = 0.0;
    t[(3, 3)] = 1.0;
    Ok(t)
}

/// Style-object pose that mirrors `content_pose` under the alignment `t`.
pub fn synchronized_pose(t: &Pose, content_pose: &Pose) -> Pose {
    t * content_pose
}

/// Posed style views with an optional fitted radiance field.
#[derive(Clone, Debug)]
pub struct MultiViewStyle {
    pub views: Vec<PosedImage>,
    pub masks: Option<Vec<Vec<bool>>>,
    pub front: Pose,
    pub field: Option<SceneField>,
}

impl MultiViewStyle {
    pub fn new(views: Vec<PosedImage>, masks: Option<Vec<Vec<bool>>>, front: Pose) -> Result<Self> {
        ensure!(!views.is_empty(), Validation, "a multi-view style needs at least one view");
        validate_rigid(&front)?;
        for v in &views {
            validate_rigid(&v.camera.pose)?;
        }
        if let Some(m) = &masks {
            ensure!(m.len() == views.len(), Validation, "{} masks for {} views", m.len(), views.len());
            for (mask, v) in m.iter().zip(&views) {
                ensure!(
                    mask.len() == v.camera.width * v.camera.height,
                    Shape,
                    "mask size does not match its view"
                );
            }
        }
        Ok(Self {
            views,
            masks,
            front,
            field: None,
        })
    }

    /// Fits a scene field to the (masked) style views.
    pub fn fit(&mut self, mut field: SceneField, cfg: &PretrainConfig) -> Result<Vec<f64>> {
        let mut views = self.views.clone();
        if let Some(masks) = &self.masks {
            for (v, m) in views.iter_mut().zip(masks) {
                let hw = m.len();
                for (i, px) in v.image.data_mut().iter_mut().enumerate() {
                    if !m[i % hw] {
                        *px = 0.0;
                    }
                }
            }
        }
        let losses = pretrain(&mut field, &views, cfg)?;
        self.field = Some(field);
        Ok(losses)
    }
}

#[derive(Clone, Debug)]
pub enum StyleReference {
    Image2d(Tensor),
    MultiView(Box<MultiViewStyle>),
}

/// Style image and object mask seen from the synchronized style camera.
pub fn synchronized_style_view(
    content_camera: &Camera,
    style: &MultiViewStyle,
    t: &Pose,
    render: &RenderSettings,
) -> Result<(Tensor, Vec<bool>)> {
    let field = style.field.as_ref().ok_or(Error::UntrainedStyleField)?;
    let camera = content_camera.with_pose(synchronized_pose(t, &content_camera.pose));
    let (image, acc) = field.render_rgb(&camera, &render.rays);
    let mask = acc.iter().map(|&a| a > MASK_THRESHOLD).collect();
    Ok((image, mask))
}

/// Encoded style of a 2D reference image.
pub fn image_style(encoder: &Encoder, image: &Tensor) -> Result<StyleFeatures> {
    encoder.encode_levels(image)
}

/// Ordinary single-view stylization with a 2D style image. Raw output.
pub fn stylize_view(
    model: &Model,
    scene: &SceneField,
    camera: &Camera,
    style: &StyleFeatures,
    render: &RenderSettings,
) -> Result<Tensor> {
    let content = model.content_maps(scene, camera, render)?;
    model.stylize(&content, StyleSource::single(style))
}

/// Per-level style mixing on one view.
pub fn mix_view(
    model: &Model,
    scene: &SceneField,
    camera: &Camera,
    styles: [&StyleFeatures; 3],
    render: &RenderSettings,
) -> Result<Tensor> {
    let content = model.content_maps(scene, camera, render)?;
    model.stylize(&content, StyleSource::PerLevel(styles))
}

/// Masked, amplified style features of the synchronized style view.
pub fn synchronized_style_features(
    content_camera: &Camera,
    style: &MultiViewStyle,
    t: &Pose,
    encoder: &Encoder,
    render: &RenderSettings,
) -> Result<StyleFeatures> {
    let (image, mask) = synchronized_style_view(content_camera, style, t, render)?;
    let feats = encoder.encode_levels(&image)?;
    dsi::mask_amplify(&feats, &mask, content_camera.height, content_camera.width)
}

/// One frame per trajectory pose. `base` supplies intrinsics; `content_front`
/// is the content pose declared to face the style object's front.
#[allow(clippy::too_many_arguments)]
pub fn stylize_omniview(
    trajectory: &Trajectory,
    base: &Camera,
    content_front: &Pose,
    scene: &SceneField,
    reference: &StyleReference,
    model: &Model,
    encoder: &Encoder,
    render: &RenderSettings,
) -> Result<Vec<Tensor>> {
    let fixed = match reference {
        StyleReference::Image2d(img) => Some(image_style(encoder, img)?),
        StyleReference::MultiView(_) => None,
    };
    let t = match reference {
        StyleReference::MultiView(mv) => Some(align_poses(content_front, &mv.front)?),
        StyleReference::Image2d(_) => None,
    };
    trajectory
        .poses
        .par_iter()
        .enumerate()
        .map(|(index, pose)| {
            let camera = base.with_pose(*pose);
            let frame = match (reference, &fixed, &t) {
                (StyleReference::MultiView(mv), _, Some(t)) => synchronized_style_features(&camera, mv, t, encoder, render)
                    .and_then(|f| stylize_view(model, scene, &camera, &f, render)),
                (_, Some(f), _) => stylize_view(model, scene, &camera, f, render),
                _ => unreachable!(),
            };
            frame.map_err(|e| Error::Frame {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::look_at;
    use crate::scene_field::Aabb;
    use nalgebra::{Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let eye = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(2.0..4.0));
        let target = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        look_at(eye, target, Vector3::y())
    }

    #[test]
    fn alignment_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = random_pose(&mut rng);
        let t = align_poses(&c, &c).unwrap();
        assert!((t - Pose::identity()).abs().max() < 1e-12);

        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2).to_homogeneous();
        let t = align_poses(&c, &(rot * c)).unwrap();
        assert!((t - rot).abs().max() < 1e-12);

        for _ in 0..20 {
            let (c, s) = (random_pose(&mut rng), random_pose(&mut rng));
            let t = align_poses(&c, &s).unwrap();
            validate_rigid(&t).unwrap();
            assert!((t * c - s).abs().max() < 1e-10);
            // Group-composition identity for an arbitrary content pose.
            let p = random_pose(&mut rng);
            let lhs = rigid_inverse(&s) * synchronized_pose(&t, &p);
            let rhs = rigid_inverse(&c) * p;
            assert!((lhs - rhs).abs().max() < 1e-10);
            // Distances preserved.
            let (a, b) = (Vector3::new(0.3, -1.0, 2.0), Vector3::new(-0.7, 0.2, 0.5));
            let ta = t.transform_point(&a.into());
            let tb = t.transform_point(&b.into());
            assert!(((ta - tb).norm() - (a - b).norm()).abs() < 1e-10);
        }
        let mut bad = c;
        bad[(0, 0)] *= 2.0;
        assert!(align_poses(&bad, &c).is_err());
    }

    #[test]
    fn untrained_and_empty_style_fields() {
        let cam = Camera::with_fov(8, 8, 0.8, look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y()));
        let views = vec![PosedImage {
            camera: cam.clone(),
            image: Tensor::zeros(&[3, 8, 8]),
        }];
        let mut mv = MultiViewStyle::new(views, None, cam.pose).unwrap();
        let settings = RenderSettings::default();
        assert!(matches!(
            synchronized_style_view(&cam, &mv, &Pose::identity(), &settings),
            Err(Error::UntrainedStyleField)
        ));
        let mut field = SceneField::new(4, 1, 3, Aabb::cube(1.0), 0);
        field.opacity.density.data_mut().fill(0.0);
        mv.field = Some(field);
        let (img, mask) = synchronized_style_view(&cam, &mv, &Pose::identity(), &settings).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert!(mask.iter().all(|&m| !m));
        let enc = Encoder::tiny(0);
        assert!(matches!(
            synchronized_style_features(&cam, &mv, &Pose::identity(), &enc, &settings),
            Err(Error::StyleNotVisible)
        ));
    }

    #[test]
    fn masks_match_thresholded_renderer_opacity() {
        let bounds = Aabb::cube(1.0);
        let mut field = SceneField::new(4, 1, 3, bounds, 1);
        field.opacity.density.data_mut().fill(0.0);
        field.opacity.set([1, 2, 1], 40.0);
        let front = look_at(Vector3::new(0.0, 0.5, 3.0), Vector3::zeros(), Vector3::y());
        let cam = Camera::with_fov(12, 12, 0.9, front);
        let mut mv = MultiViewStyle::new(
            vec![PosedImage {
                camera: cam.clone(),
                image: Tensor::zeros(&[3, 12, 12]),
            }],
            None,
            front,
        )
        .unwrap();
        mv.field = Some(field.clone());
        let settings = RenderSettings::default();
        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.4).to_homogeneous();
        for pose in [front, rot * front] {
            let content_cam = cam.with_pose(pose);
            let t = Pose::identity();
            let (_, mask) = synchronized_style_view(&content_cam, &mv, &t, &settings).unwrap();
            let bundle = crate::feature_renderer::trace_view(&field, &content_cam, &settings);
            let expected: Vec<bool> = bundle.opacity.iter().map(|&a| a > 0.5).collect();
            assert_eq!(mask, expected);
            assert!(mask.iter().any(|&m| m));
        }
    }
}
