//! Plain-text camera manifests and trajectory files.
//!
//! Manifest lines: `view <image> <width> <height> <fx> <fy> <cx> <cy> <m00> … <m33>`
//! with the 4×4 world-from-camera matrix in row-major order. Trajectory lines
//! hold just the 16 pose values. `#` starts a comment in both.

use std::fmt::Write as _;
use std::path::Path;

use crate::camera::{validate_rigid, Camera, Pose};
use crate::error::{ensure, Error, Result};

fn pose_text(p: &Pose) -> String {
    let mut s = String::new();
    for r in 0..4 {
        for c in 0..4 {
            if !s.is_empty() {
                s.push(' ');
            }
            // Round-trip exact formatting.
            let _ = write!(s, "{:?}", p[(r, c)]);
        }
    }
    s
}

fn parse_pose(fields: &[&str], line: usize) -> Result<Pose> {
    ensure!(fields.len() == 16, Validation, "line {}: expected 16 pose values", line);
    let mut vals = [0.0; 16];
    for (v, f) in vals.iter_mut().zip(fields) {
        *v = f
            .parse()
            .map_err(|_| Error::Validation(format!("line {line}: bad number `{f}`")))?;
    }
    let pose = Pose::from_row_slice(&vals);
    validate_rigid(&pose)?;
    Ok(pose)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn manifest_text(views: &[(Camera, String)]) -> String {
    let mut out = String::from("# view image width height fx fy cx cy pose(4x4 row-major, world-from-camera)\n");
    for (cam, name) in views {
        let _ = writeln!(
            out,
            "view {name} {} {} {:?} {:?} {:?} {:?} {}",
            cam.width,
            cam.height,
            cam.fx,
            cam.fy,
            cam.cx,
            cam.cy,
            pose_text(&cam.pose)
        );
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<(Camera, String)>> {
    let mut out = Vec::new();
    for (ln, line) in content_lines(text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        ensure!(
            f.len() == 24 && f[0] == "view",
            Validation,
            "manifest line {}: expected `view` followed by 23 fields",
            ln
        );
        let n = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Validation(format!("manifest line {ln}: bad number `{}`", f[i])))
        };
        let dim = |i: usize| -> Result<usize> {
            f[i].parse()
                .map_err(|_| Error::Validation(format!("manifest line {ln}: bad size `{}`", f[i])))
        };
        let cam = Camera {
            width: dim(2)?,
            height: dim(3)?,
            fx: n(4)?,
            fy: n(5)?,
            cx: n(6)?,
            cy: n(7)?,
            pose: parse_pose(&f[8..], ln)?,
        };
        out.push((cam, f[1].to_string()));
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, views: &[(Camera, String)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest_text(views)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(Camera, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Ordered, non-empty list of content-camera poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        ensure!(!poses.is_empty(), Validation, "trajectory is empty");
        for p in &poses {
            validate_rigid(p)?;
        }
        Ok(Self { poses })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.poses {
            out.push_str(&pose_text(p));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let poses = content_lines(text)
            .map(|(ln, l)| parse_pose(&l.split_whitespace().collect::<Vec<_>>(), ln))
            .collect::<Result<Vec<_>>>()?;
        Self::new(poses)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
