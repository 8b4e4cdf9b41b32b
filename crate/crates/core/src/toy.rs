//! Parametric scenes with analytic rendering and correspondences, and a
//! procedural style corpus.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{orbit, Camera};
use crate::scene_field::{Aabb, PosedImage};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    /// Bands of latitude.
    Stripes { a: [f64; 3], b: [f64; 3], bands: f64 },
    /// Longitude/latitude checkerboard.
    Checker { a: [f64; 3], b: [f64; 3], cells: f64 },
    /// Smooth two-colour swirl.
    Swirl { a: [f64; 3], b: [f64; 3], freq: f64 },
}

impl Texture {
    /// Albedo at a unit normal in the sphere's frame.
    fn albedo(&self, n: &Vector3<f64>) -> [f64; 3] {
        let lat = n.y.clamp(-1.0, 1.0).asin();
        let lon = n.z.atan2(n.x);
        let mix = |a: &[f64; 3], b: &[f64; 3], t: f64| [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t);
        match self {
            Texture::Stripes { a, b, bands } => {
                if ((lat / PI + 0.5) * bands).floor() as i64 % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Checker { a, b, cells } => {
                let u = ((lon / (2.0 * PI) + 0.5) * 2.0 * cells).floor() as i64;
                let v = ((lat / PI + 0.5) * cells).floor() as i64;
                if (u + v).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Swirl { a, b, freq } => {
                let t = 0.5 + 0.5 * (freq * lon + 3.0 * lat).sin();
                mix(a, b, t)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub texture: Texture,
}

impl Sphere {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let oc = o - self.center;
        let b = oc.dot(d);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        [-b - s, -b + s].into_iter().find(|&t| t > 1e-9)
    }
}

/// Lambert-shaded textured spheres over a black background.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub spheres: Vec<Sphere>,
    pub light: Vector3<f64>,
    pub ambient: f64,
    pub bounds: Aabb,
}

pub struct Hit {
    pub t: f64,
    pub sphere: usize,
    pub point: Vector3<f64>,
}

/// Orbit used for toy views and trajectories.
pub const ORBIT_RADIUS: f64 = 3.2;
pub const ORBIT_HEIGHT: f64 = 1.4;
pub const FOV_X: f64 = 0.75;

impl ToyScene {
    pub fn three_spheres() -> Self {
        Self {
            spheres: vec![
                Sphere {
                    center: Vector3::new(-0.42, -0.15, 0.1),
                    radius: 0.36,
                    texture: Texture::Stripes {
                        a: [0.9, 0.25, 0.2],
                        b: [0.95, 0.85, 0.3],
                        bands: 6.0,
                    },
                },
                Sphere {
                    center: Vector3::new(0.45, -0.1, 0.2),
                    radius: 0.32,
                    texture: Texture::Checker {
                        a: [0.2, 0.35, 0.9],
                        b: [0.9, 0.9, 0.95],
                        cells: 4.0,
                    },
                },
                Sphere {
                    center: Vector3::new(0.0, 0.25, -0.4),
                    radius: 0.34,
                    texture: Texture::Swirl {
                        a: [0.2, 0.75, 0.3],
                        b: [0.85, 0.95, 0.6],
                        freq: 3.0,
                    },
                },
            ],
            light: Vector3::new(0.4, 0.8, 0.45).normalize(),
            ambient: 0.3,
            bounds: Aabb::cube(1.0),
        }
    }

    /// A second object used as a 3D style reference.
    pub fn style_object() -> Self {
        Self {
            spheres: vec![
                Sphere {
                    center: Vector3::new(0.0, -0.1, 0.0),
                    radius: 0.55,
                    texture: Texture::Swirl {
                        a: [0.95, 0.55, 0.1],
                        b: [0.35, 0.05, 0.45],
                        freq: 5.0,
                    },
                },
                Sphere {
                    center: Vector3::new(0.0, 0.6, 0.0),
                    radius: 0.25,
                    texture: Texture::Checker {
                        a: [0.1, 0.1, 0.1],
                        b: [0.95, 0.8, 0.2],
                        cells: 3.0,
                    },
                },
            ],
            light: Vector3::new(-0.3, 0.9, 0.3).normalize(),
            ambient: 0.35,
            bounds: Aabb::cube(1.0),
        }
    }

    pub fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        self.spheres
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.intersect(o, d).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(t, i)| Hit {
                t,
                sphere: i,
                point: o + d * t,
            })
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let s = &self.spheres[hit.sphere];
        let n = (hit.point - s.center) / s.radius;
        let albedo = s.texture.albedo(&n);
        let k = self.ambient + (1.0 - self.ambient) * n.dot(&self.light).max(0.0);
        albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    /// `[3, H, W]` with `ss × ss` supersampling per pixel.
    pub fn render(&self, camera: &Camera, ss: usize) -> Tensor {
        let (h, w) = (camera.height, camera.width);
        let ss = ss.max(1);
        let o = camera.origin();
        let rot = camera.pose.fixed_view::<3, 3>(0, 0).into_owned();
        let mut out = Tensor::zeros(&[3, h, w]);
        let data = out.data_mut();
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let py = r as f64 + (sy as f64 + 0.5) / ss as f64;
                        let px = c as f64 + (sx as f64 + 0.5) / ss as f64;
                        let local = Vector3::new((px - camera.cx) / camera.fx, -(py - camera.cy) / camera.fy, -1.0);
                        let d = (rot * local).normalize();
                        if let Some(hit) = self.hit(&o, &d) {
                            let rgb = self.shade(&hit);
                            for i in 0..3 {
                                acc[i] += rgb[i];
                            }
                        }
                    }
                }
                let n = (ss * ss) as f64;
                for i in 0..3 {
                    data[(i * h + r) * w + c] = acc[i] / n;
                }
            }
        }
        out
    }

    /// Object coverage at pixel centres.
    pub fn mask(&self, camera: &Camera) -> Vec<bool> {
        let o = camera.origin();
        (0..camera.height * camera.width)
            .map(|p| self.hit(&o, &camera.pixel_direction(p / camera.width, p % camera.width)).is_some())
            .collect()
    }

    pub fn cameras(count: usize, size: usize) -> Vec<Camera> {
        orbit(count, ORBIT_RADIUS, ORBIT_HEIGHT, 0.0, 2.0 * PI)
            .into_iter()
            .map(|p| Camera::with_fov(size, size, FOV_X, p))
            .collect()
    }

    pub fn views(&self, count: usize, size: usize) -> Vec<PosedImage> {
        Self::cameras(count, size)
            .into_iter()
            .map(|camera| PosedImage {
                image: self.render(&camera, 3),
                camera,
            })
            .collect()
    }

    /// Pixel pairs `((row, col) in a, (row, col) in b)` that image the same
    /// surface point: the centre ray of the pixel in `a` hits a point that
    /// projects into `b`, and the centre ray of that pixel in `b` lands within
    /// `tol` of the same point.
    pub fn correspondences(&self, a: &Camera, b: &Camera, tol: f64) -> Vec<((usize, usize), (usize, usize))> {
        let (oa, ob) = (a.origin(), b.origin());
        let mut out = Vec::new();
        for r in 0..a.height {
            for c in 0..a.width {
                let Some(ha) = self.hit(&oa, &a.pixel_direction(r, c)) else {
                    continue;
                };
                let Some((rb, cb)) = b.project_pixel(&ha.point) else {
                    continue;
                };
                let Some(hb) = self.hit(&ob, &b.pixel_direction(rb, cb)) else {
                    continue;
                };
                if hb.sphere == ha.sphere && (hb.point - ha.point).norm() <= tol {
                    out.push(((r, c), (rb, cb)));
                }
            }
        }
        out
    }
}

fn palette(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut hue = rng.gen_range(0.0..1.0);
    let mut out = [[0.0; 3]; 3];
    for col in out.iter_mut() {
        let sat = rng.gen_range(0.5..1.0);
        let val = rng.gen_range(0.25..1.0);
        *col = hsv(hue, sat, val);
        hue = (hue + rng.gen_range(0.15..0.5)) % 1.0;
    }
    out
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One procedural style image `[3, size, size]`.
pub fn style_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = palette(&mut rng);
    let kind = rng.gen_range(0..5);
    let angle = rng.gen_range(0.0..PI);
    let freq = rng.gen_range(2.0..9.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let dots: Vec<(f64, f64, f64)> = (0..12)
        .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.03..0.12)))
        .collect();
    let grain = rng.gen_range(0.0..0.15);
    let mut out = Tensor::zeros(&[3, size, size]);
    let n = size * size;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let s = u * ca + v * sa;
            let t = -u * sa + v * ca;
            let (mut w, third) = match kind {
                0 => (0.5 + 0.5 * (2.0 * PI * freq * s).sin(), 0.0),
                1 => {
                    let k = ((s * freq).floor() + (t * freq).floor()) as i64;
                    (k.rem_euclid(2) as f64, 0.0)
                }
                2 => {
                    let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                    (0.5 + 0.5 * (2.0 * PI * freq * r).cos(), 0.0)
                }
                3 => {
                    let f: f64 = waves.iter().map(|(a, b, p)| (a * u + b * v + p).sin()).sum();
                    (0.5 + 0.25 * f.clamp(-2.0, 2.0), (0.5 + 0.5 * (freq * t).sin()) * 0.5)
                }
                _ => {
                    let inside = dots
                        .iter()
                        .any(|(cx, cy, r)| (u - cx).powi(2) + (v - cy).powi(2) < r * r);
                    (if inside { 1.0 } else { 0.0 }, 0.5 + 0.5 * (freq * s).sin())
                }
            };
            w = (w + grain * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0);
            for c in 0..3 {
                let base = pal[0][c] * (1.0 - w) + pal[1][c] * w;
                let v = base * (1.0 - 0.5 * third) + pal[2][c] * 0.5 * third;
                out.data_mut()[c * n + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// `count` procedural style images; `seed` separates corpora.
pub fn style_corpus(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    (0..count as u64)
        .map(|i| style_image(size, seed.wrapping_mul(1_000_003).wrapping_add(i)))
        .collect()
}

/// Training corpus of 20 styles and 5 held-out ones, disjoint by seed.
pub fn train_and_heldout_styles(size: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    (style_corpus(20, size, 2 * seed + 1), style_corpus(5, size, 2 * seed + 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_are_in_range_and_nonempty() {
        let scene = ToyScene::three_spheres();
        for cam in ToyScene::cameras(4, 32) {
            let img = scene.render(&cam, 2);
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let covered = scene.mask(&cam).iter().filter(|&&m| m).count();
            assert!(covered > 100, "{covered}");
            assert!(covered < 32 * 32);
        }
    }

    #[test]
    fn spheres_fit_in_bounds() {
        for scene in [ToyScene::three_spheres(), ToyScene::style_object()] {
            for s in &scene.spheres {
                for a in 0..3 {
                    assert!(s.center[a] - s.radius > scene.bounds.min[a]);
                    assert!(s.center[a] + s.radius < scene.bounds.max[a]);
                }
            }
        }
    }

    #[test]
    fn self_correspondences_are_identity() {
        let scene = ToyScene::three_spheres();
        let cam = &ToyScene::cameras(1, 24)[0];
        let c = scene.correspondences(cam, cam, 1e-9);
        assert!(!c.is_empty());
        assert!(c.iter().all(|(a, b)| a == b));
    }

    #[test]
    fn nearby_views_have_correspondences() {
        let scene = ToyScene::three_spheres();
        let poses = orbit(2, ORBIT_RADIUS, ORBIT_HEIGHT, 0.0, 0.2);
        let (a, b) = (Camera::with_fov(32, 32, FOV_X, poses[0]), Camera::with_fov(32, 32, FOV_X, poses[1]));
        let c = scene.correspondences(&a, &b, 0.04);
        assert!(c.len() > 50, "{}", c.len());
    }

    #[test]
    fn style_corpora_are_distinct_and_deterministic() {
        let (train, held) = train_and_heldout_styles(16, 0);
        assert_eq!((train.len(), held.len()), (20, 5));
        assert_eq!(train, train_and_heldout_styles(16, 0).0);
        for h in &held {
            assert!(train.iter().all(|t| t != h));
        }
        assert!(train.iter().all(|t| t.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }
}
