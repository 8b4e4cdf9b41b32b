//! Pinhole cameras and rigid poses.
//!
//! Poses are world-from-camera 4×4 matrices. The camera looks down its local
//! `-Z` axis with `+Y` up and `+X` to the right.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{ensure, Result};

pub type Pose = Matrix4<f64>;

const RIGID_TOL: f64 = 1e-6;

/// Checks that `pose` is a proper rigid transform (orthonormal rotation with
/// determinant +1 and an affine bottom row).
pub fn validate_rigid(pose: &Pose) -> Result<()> {
    let r: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    ensure!(
        err < RIGID_TOL,
        Validation,
        "pose rotation is not orthonormal (error {:.3e})",
        err
    );
    ensure!(
        (r.determinant() - 1.0).abs() < RIGID_TOL,
        Validation,
        "pose rotation has determinant {:.6}, expected +1",
        r.determinant()
    );
    let bottom = pose.row(3);
    ensure!(
        bottom[0] == 0.0 && bottom[1] == 0.0 && bottom[2] == 0.0 && bottom[3] == 1.0,
        Validation,
        "pose bottom row must be [0, 0, 0, 1]"
    );
    Ok(())
}

/// Inverse of a rigid transform without a general matrix inverse.
pub fn rigid_inverse(pose: &Pose) -> Pose {
    let r: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).transpose();
    let t: Vector3<f64> = pose.fixed_view::<3, 1>(0, 3).into_owned();
    let mut out = Pose::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(r * t)));
    out
}

/// World-from-camera pose at `eye` looking at `target`.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Pose {
    let back = (eye - target).normalize();
    let right = up.cross(&back).normalize();
    let true_up = back.cross(&right);
    let mut m = Pose::identity();
    m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
    m.fixed_view_mut::<3, 1>(0, 1).copy_from(&true_up);
    m.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
    m
}

/// Poses on a circle of `radius` at height `height`, all looking at the origin.
pub fn orbit(count: usize, radius: f64, height: f64, start_angle: f64, sweep: f64) -> Vec<Pose> {
    (0..count)
        .map(|i| {
            let a = start_angle + sweep * i as f64 / count as f64;
            let eye = Vector3::new(radius * a.cos(), height, radius * a.sin());
            look_at(eye, Vector3::zeros(), Vector3::y())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Pose,
}

impl Camera {
    /// Square-pixel camera with horizontal field of view `fov_x` (radians).
    pub fn with_fov(width: usize, height: usize, fov_x: f64, pose: Pose) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            pose,
        }
    }

    pub fn with_pose(&self, pose: Pose) -> Self {
        Self {
            pose,
            ..self.clone()
        }
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Unit world-space direction through the center of pixel `(row, col)`.
    pub fn pixel_direction(&self, row: usize, col: usize) -> Vector3<f64> {
        let d = Vector3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            -(row as f64 + 0.5 - self.cy) / self.fy,
            -1.0,
        );
        let r = self.pose.fixed_view::<3, 3>(0, 0);
        (r * d).normalize()
    }

    /// Continuous image coordinates `(row, col)` of a world point, or `None`
    /// when the point is behind the camera.
    pub fn project(&self, point: &Vector3<f64>) -> Option<(f64, f64)> {
        let inv = rigid_inverse(&self.pose);
        let p = inv.transform_point(&(*point).into());
        if p.z >= -1e-12 {
            return None;
        }
        let depth = -p.z;
        let col = self.cx + self.fx * p.x / depth;
        let row = self.cy - self.fy * p.y / depth;
        Some((row, col))
    }

    /// Integer pixel containing a world point, if visible in the frame.
    pub fn project_pixel(&self, point: &Vector3<f64>) -> Option<(usize, usize)> {
        let (r, c) = self.project(point)?;
        if r < 0.0 || c < 0.0 {
            return None;
        }
        let (r, c) = (r.floor() as usize, c.floor() as usize);
        (r < self.height && c < self.width).then_some((r, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_is_rigid_and_points_forward() {
        let eye = Vector3::new(3.0, 1.0, 2.0);
        let pose = look_at(eye, Vector3::zeros(), Vector3::y());
        validate_rigid(&pose).unwrap();
        let cam = Camera::with_fov(16, 16, 0.8, pose);
        let (r, c) = cam.project(&Vector3::zeros()).unwrap();
        assert!((r - 8.0).abs() < 1e-9 && (c - 8.0).abs() < 1e-9);
    }

    #[test]
    fn projection_inverts_pixel_rays() {
        let pose = look_at(Vector3::new(0.5, 0.3, 4.0), Vector3::zeros(), Vector3::y());
        let cam = Camera::with_fov(20, 12, 0.9, pose);
        for (row, col) in [(0, 0), (5, 17), (11, 19)] {
            let p = cam.origin() + cam.pixel_direction(row, col) * 2.5;
            assert_eq!(cam.project_pixel(&p), Some((row, col)));
        }
    }

    #[test]
    fn rigid_inverse_composes_to_identity() {
        let pose = look_at(Vector3::new(-1.0, 2.0, 0.5), Vector3::new(0.1, 0.0, 0.0), Vector3::y());
        let err = (pose * rigid_inverse(&pose) - Pose::identity()).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn non_rigid_pose_rejected() {
        let mut pose = Pose::identity();
        pose[(0, 0)] = 2.0;
        assert!(validate_rigid(&pose).is_err());
        let mut flip = Pose::identity();
        flip[(2, 2)] = -1.0;
        assert!(validate_rigid(&flip).is_err());
    }
}
