//! Analytic teacher scene, pseudo-frame synthesis, simulated real captures
//! and the dataset file format.
//!
//! The teacher is a star-shaped "head" whose radius along direction `d` is
//! `r(d) = r₀ + a·Σₖ eₖ bₖ(d)`, optionally with an ellipsoidal shoulder that
//! rotates independently about the origin. Basis functions with even index
//! are symmetric under the mirror `x → −x`; odd ones are antisymmetric.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::ray_geometry::{
    axis_angle, generate_rays_with, nearest_rotation, CameraPose, Mat3, Ray, RotationCheck, Vec3,
};
use crate::seed::child_rng;

/// Bound on `|bₖ|` for the first four basis functions.
const BASIS_PEAK: f64 = 0.75;
const SHOULDER_CENTER: [f64; 3] = [0.0, -0.9, 0.0];
const SHOULDER_AXES: [f64; 3] = [0.7, 0.28, 0.38];
const COARSE_STEPS: usize = 48;
pub const BISECTION_STEPS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub base_radius: f64,
    /// Deformation amplitude per unit of code.
    pub amplitude: f64,
    pub shoulder: bool,
    pub ambient: f64,
    /// Ray interval searched for surface hits.
    pub near: f64,
    pub far: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { base_radius: 0.5, amplitude: 0.1, shoulder: false, ambient: 0.25, near: 1.2, far: 4.2 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_radius > 0.0, Config, "scene base_radius must be positive");
        ensure!(self.amplitude >= 0.0, Config, "scene amplitude must be ≥ 0");
        ensure!((0.0..=1.0).contains(&self.ambient), Config, "scene ambient must be in [0, 1]");
        ensure!(self.near >= 0.0 && self.near < self.far, Config, "scene near/far interval is empty");
        Ok(())
    }
}

/// Analytic teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub expr_dim: usize,
    light: Vec3,
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    point: Vec3,
    normal: Vec3,
    albedo: [f64; 3],
}

impl SyntheticScene {
    pub fn new(config: SceneConfig, expr_dim: usize) -> Result<Self> {
        config.validate()?;
        ensure!(expr_dim >= 1, Config, "expression dimension must be ≥ 1");
        Ok(SyntheticScene { config, expr_dim, light: Vec3::new(0.0, 0.5, 1.0).normalize() })
    }

    /// Peak magnitude of each basis function; shrinks with the code size so
    /// the radius stays in range for `‖e‖∞ ≤ 1`.
    fn basis_peak(&self) -> f64 {
        BASIS_PEAK * (4.0 / self.expr_dim as f64).min(1.0)
    }

    /// `bₖ(d) = peak · sin θ · T_{a}(cos θ) · trig(c φ)` with `θ` measured from
    /// +y and `φ = atan2(x, z)`; `trig` is cos for even `k`, sin for odd `k`.
    pub fn basis(&self, k: usize, d: &Vec3) -> f64 {
        let a = 1 + k % 3;
        let c = 1 + (k / 2) % 3;
        let y = d.y.clamp(-1.0, 1.0);
        let cheb = match a {
            1 => y,
            2 => 2.0 * y * y - 1.0,
            _ => (4.0 * y * y - 3.0) * y,
        };
        // ρ · (z + ix)^c / ρ^c, continuous at the poles.
        let rho = (d.x * d.x + d.z * d.z).sqrt();
        if rho < 1e-300 {
            return 0.0;
        }
        let (mut re, mut im) = (d.z, d.x);
        for _ in 1..c {
            let (r2, i2) = (re * d.z - im * d.x, re * d.x + im * d.z);
            re = r2 / rho;
            im = i2 / rho;
        }
        let trig = if k % 2 == 0 { re } else { im };
        self.basis_peak() * cheb * trig
    }

    /// Head radius along unit direction `d`.
    pub fn radius(&self, e: &[f64], d: &Vec3) -> f64 {
        let s: f64 = e.iter().enumerate().map(|(k, &ek)| ek * self.basis(k, d)).sum();
        self.config.base_radius + self.config.amplitude * s
    }

    /// Largest radius reachable with code `e`.
    fn radius_bound(&self, e: &[f64]) -> f64 {
        let l1: f64 = e.iter().map(|v| v.abs()).sum();
        self.config.base_radius + self.config.amplitude * self.basis_peak() * l1 + 1e-9
    }

    /// Signed implicit function: negative inside the head.
    fn head_field(&self, e: &[f64], p: &Vec3) -> f64 {
        let n = p.norm();
        if n < 1e-12 {
            return -self.config.base_radius;
        }
        n - self.radius(e, &(p / n))
    }

    fn head_albedo(&self, e: &[f64], p: &Vec3) -> [f64; 3] {
        let e0 = e.first().copied().unwrap_or(0.0);
        let e1 = e.get(1).copied().unwrap_or(0.0);
        [
            0.55 + 0.25 * (4.0 * p.y + 1.5 * e0).sin() + 0.15 * (5.0 * p.x).cos(),
            0.45 + 0.2 * (3.0 * p.y + 5.0 * p.z).cos() + 0.15 * e1 * (6.0 * p.x).sin(),
            0.35 + 0.2 * (6.0 * p.z - 2.0 * p.y).sin() + 0.1 * (4.0 * p.x).cos(),
        ]
    }

    fn intersect_head(&self, e: &[f64], ray: &Ray) -> Option<Hit> {
        let bound = self.radius_bound(e);
        // Bounding sphere.
        let b = ray.origin.dot(&ray.direction);
        let c = ray.origin.norm_squared() - bound * bound;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t0 = (-b - sq).max(self.config.near);
        let t1 = (-b + sq).min(self.config.far);
        if t0 >= t1 {
            return None;
        }
        let f = |t: f64| self.head_field(e, &ray.at(t));
        let step = (t1 - t0) / COARSE_STEPS as f64;
        let mut lo = t0;
        if f(lo) <= 0.0 {
            // Starting inside the surface: report the entry point.
            return Some(self.head_hit(e, ray, lo));
        }
        for i in 1..=COARSE_STEPS {
            let hi = t0 + step * i as f64;
            if f(hi) <= 0.0 {
                let (mut a, mut bb) = (lo, hi);
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (a + bb);
                    if f(mid) > 0.0 {
                        a = mid;
                    } else {
                        bb = mid;
                    }
                }
                return Some(self.head_hit(e, ray, 0.5 * (a + bb)));
            }
            lo = hi;
        }
        None
    }

    fn head_hit(&self, e: &[f64], ray: &Ray, t: f64) -> Hit {
        let p = ray.at(t);
        let h = 1e-5;
        let g = Vec3::new(
            self.head_field(e, &(p + Vec3::x() * h)) - self.head_field(e, &(p - Vec3::x() * h)),
            self.head_field(e, &(p + Vec3::y() * h)) - self.head_field(e, &(p - Vec3::y() * h)),
            self.head_field(e, &(p + Vec3::z() * h)) - self.head_field(e, &(p - Vec3::z() * h)),
        );
        let normal = if g.norm() > 0.0 { g.normalize() } else { p.normalize() };
        Hit { t, point: p, normal, albedo: self.head_albedo(e, &p) }
    }

    fn intersect_shoulder(&self, ray: &Ray, rotation: &Mat3) -> Option<Hit> {
        // Work in the shoulder's canonical frame; `rotation` is linear so
        // general (interpolated) matrices are handled by its inverse.
        let inv = rotation.try_inverse()?;
        let c = Vec3::from(SHOULDER_CENTER);
        let axes = Vec3::from(SHOULDER_AXES);
        let o = (inv * ray.origin - c).component_div(&axes);
        let d = (inv * ray.direction).component_div(&axes);
        let qa = d.norm_squared();
        let qb = o.dot(&d);
        let qc = o.norm_squared() - 1.0;
        let disc = qb * qb - qa * qc;
        if disc <= 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t = [(-qb - sq) / qa, (-qb + sq) / qa]
            .into_iter()
            .find(|&t| t >= self.config.near && t <= self.config.far)?;
        let local = inv * ray.at(t);
        let u = local - c;
        let grad_local = u.component_div(&axes.component_mul(&axes));
        let normal = (inv.transpose() * grad_local).normalize();
        let albedo = [
            0.3 + 0.25 * (9.0 * local.x).sin().abs(),
            0.25 + 0.2 * (7.0 * local.z + 2.0 * local.x).cos(),
            0.55 + 0.3 * (6.0 * local.x).cos(),
        ];
        Some(Hit { t, point: ray.at(t), normal, albedo })
    }

    fn shade(&self, hit: &Hit) -> [f32; 3] {
        let lambert = hit.normal.dot(&self.light).max(0.0);
        let k = self.config.ambient + (1.0 - self.config.ambient) * lambert;
        let _ = hit.point;
        hit.albedo.map(|a| (a * k).clamp(0.0, 1.0) as f32)
    }

    /// Colour along one ray (black background).
    pub fn trace(&self, e: &[f64], ray: &Ray, shoulder_rotation: Option<&Mat3>) -> [f32; 3] {
        let head = self.intersect_head(e, ray);
        let shoulder = match (self.config.shoulder, shoulder_rotation) {
            (true, Some(r)) => self.intersect_shoulder(ray, r),
            (true, None) => self.intersect_shoulder(ray, &Mat3::identity()),
            _ => None,
        };
        let hit = match (head, shoulder) {
            (Some(a), Some(b)) => Some(if a.t <= b.t { a } else { b }),
            (a, b) => a.or(b),
        };
        hit.map_or([0.0; 3], |h| self.shade(&h))
    }

    /// Depth of the first head hit, if any.
    pub fn head_depth(&self, e: &[f64], ray: &Ray) -> Option<f64> {
        self.intersect_head(e, ray).map(|h| h.t)
    }

    pub fn render(&self, e: &[f64], camera: &CameraPose, shoulder_rotation: Option<&Mat3>) -> Result<Image> {
        ensure!(
            e.len() == self.expr_dim,
            Validation,
            "expression code has {} entries, scene expects {}",
            e.len(),
            self.expr_dim
        );
        let rays = generate_rays_with(camera, RotationCheck::Relaxed)?;
        let mut img = Image::zeros(camera.height, camera.width);
        for (i, ray) in rays.iter().enumerate() {
            let c = self.trace(e, ray, shoulder_rotation);
            img.data[3 * i..3 * i + 3].copy_from_slice(&c);
        }
        Ok(img)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Pseudo,
    Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionFrame {
    pub e: Vec<f64>,
    pub camera: CameraPose,
    pub shoulder_rotation: Option<Mat3>,
    pub image: Image,
    pub kind: FrameKind,
    /// Row of the latent table; set for real frames only.
    pub frame_index: Option<u32>,
}

impl ExpressionFrame {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (self.kind == FrameKind::Real) == self.frame_index.is_some(),
            Validation,
            "real frames need a frame index and pseudo frames must not have one"
        );
        ensure!(
            self.image.height == self.camera.height && self.image.width == self.camera.width,
            Validation,
            "image is {}×{} but camera is {}×{}",
            self.image.height,
            self.image.width,
            self.camera.height,
            self.camera.width
        );
        ensure!(self.e.iter().all(|v| v.is_finite()), Validation, "expression code is not finite");
        self.camera.validate(RotationCheck::Relaxed)
    }

    /// One training record per pixel.
    pub fn records(&self) -> Result<Vec<DatasetRecord>> {
        let rays = generate_rays_with(&self.camera, RotationCheck::Relaxed)?;
        Ok(rays
            .into_iter()
            .enumerate()
            .map(|(i, ray)| DatasetRecord {
                origin: ray.origin,
                direction: ray.direction,
                e: self.e.clone(),
                color: [self.image.data[3 * i], self.image.data[3 * i + 1], self.image.data[3 * i + 2]],
                kind: self.kind,
                frame_index: self.frame_index,
            })
            .collect())
    }
}

/// Per-ray training example.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub origin: Vec3,
    pub direction: Vec3,
    pub e: Vec<f64>,
    pub color: [f32; 3],
    pub kind: FrameKind,
    pub frame_index: Option<u32>,
}

/// Interpolated parameters of a pseudo frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolated {
    pub e: Vec<f64>,
    pub origin: Vec3,
    pub rotation: Mat3,
    pub shoulder_rotation: Option<Mat3>,
}

/// `x = α·x₁ + (1 − α)·x₂` for the code, camera origin and (literally) the
/// rotation matrix.
pub fn interpolate_frames(f1: &ExpressionFrame, f2: &ExpressionFrame, alpha: f64) -> Result<Interpolated> {
    ensure!((0.0..1.0).contains(&alpha), Validation, "interpolation weight {alpha} outside [0, 1)");
    ensure!(f1.e.len() == f2.e.len(), Validation, "frames have different code dimensions");
    let b = 1.0 - alpha;
    Ok(Interpolated {
        e: f1.e.iter().zip(&f2.e).map(|(x1, x2)| alpha * x1 + b * x2).collect(),
        origin: f1.camera.origin * alpha + f2.camera.origin * b,
        rotation: f1.camera.rotation * alpha + f2.camera.rotation * b,
        shoulder_rotation: match (f1.shoulder_rotation, f2.shoulder_rotation) {
            (Some(r1), Some(r2)) => Some(r1 * alpha + r2 * b),
            (a, b) => a.or(b),
        },
    })
}

/// Standard deviations of the injected fitting error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FittingNoise {
    pub sigma_e: f64,
    /// Rotation-angle standard deviation in degrees.
    pub sigma_rot_deg: f64,
    pub sigma_trans: f64,
}

impl FittingNoise {
    pub const NONE: FittingNoise = FittingNoise { sigma_e: 0.0, sigma_rot_deg: 0.0, sigma_trans: 0.0 };

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.sigma_e >= 0.0 && self.sigma_rot_deg >= 0.0 && self.sigma_trans >= 0.0,
            Validation,
            "noise standard deviations must be ≥ 0"
        );
        Ok(())
    }
}

impl Default for FittingNoise {
    fn default() -> Self {
        FittingNoise { sigma_e: 0.05, sigma_rot_deg: 1.0, sigma_trans: 0.01 }
    }
}

/// Capture settings of simulated real footage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureConfig {
    pub resolution: usize,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub code_amplitude: f64,
    /// Peak shoulder yaw in degrees (roll is a third of it).
    pub shoulder_yaw_deg: f64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            resolution: 64,
            focal_scale: 1.07,
            radius_min: 2.6,
            radius_max: 2.9,
            azimuth_deg: 30.0,
            elevation_deg: 15.0,
            code_amplitude: 0.9,
            shoulder_yaw_deg: 20.0,
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.resolution >= 1, Config, "capture resolution must be ≥ 1");
        ensure!(self.focal_scale > 0.0, Config, "focal_scale must be positive");
        ensure!(
            self.radius_min > 0.0 && self.radius_min <= self.radius_max,
            Config,
            "camera radius range is invalid"
        );
        Ok(())
    }

    pub fn camera_at(&self, radius: f64, azimuth: f64, elevation: f64) -> Result<CameraPose> {
        let origin = Vec3::new(
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
            radius * elevation.cos() * azimuth.cos(),
        );
        let res = self.resolution;
        CameraPose::look_at(origin, Vec3::zeros(), Vec3::y(), self.focal_scale * res as f64, res, res)
    }
}

/// Ground-truth parameters of one simulated capture.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueFrame {
    pub e: Vec<f64>,
    pub camera: CameraPose,
    pub shoulder_rotation: Option<Mat3>,
}

/// Smooth trajectory of codes, cameras and shoulder poses.
pub fn sample_trajectory(scene: &SyntheticScene, capture: &CaptureConfig, count: usize, seed: u64) -> Result<Vec<TrueFrame>> {
    capture.validate()?;
    let mut rng = child_rng(seed, 1, 0);
    let tau = std::f64::consts::TAU;
    let wave = |rng: &mut rand_chacha::ChaCha8Rng| {
        let cycles: f64 = rng.gen_range(1.0..3.5);
        let phase: f64 = rng.gen_range(0.0..tau);
        move |s: f64| (tau * cycles * s + phase).sin()
    };
    let codes: Vec<_> = (0..scene.expr_dim).map(|_| wave(&mut rng)).collect();
    let (az, el, rad) = (wave(&mut rng), wave(&mut rng), wave(&mut rng));
    let (yaw, roll) = (wave(&mut rng), wave(&mut rng));
    (0..count)
        .map(|i| {
            let s = i as f64 / count.max(1) as f64;
            let e: Vec<f64> = codes.iter().map(|w| capture.code_amplitude * w(s)).collect();
            let mid = 0.5 * (capture.radius_min + capture.radius_max);
            let half = 0.5 * (capture.radius_max - capture.radius_min);
            let camera = capture.camera_at(
                mid + half * rad(s),
                capture.azimuth_deg.to_radians() * az(s),
                capture.elevation_deg.to_radians() * el(s),
            )?;
            let shoulder_rotation = scene.config.shoulder.then(|| {
                let y = capture.shoulder_yaw_deg.to_radians();
                axis_angle(Vec3::y(), y * yaw(s)) * axis_angle(Vec3::z(), y / 3.0 * roll(s))
            });
            Ok(TrueFrame { e, camera, shoulder_rotation })
        })
        .collect()
}

fn perturb_camera<R: Rng>(camera: &CameraPose, noise: &FittingNoise, rng: &mut R) -> CameraPose {
    let mut out = camera.clone();
    if noise.sigma_rot_deg > 0.0 {
        let axis = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let angle = Normal::new(0.0, noise.sigma_rot_deg.to_radians()).expect("finite σ").sample(rng);
        out.rotation = axis_angle(axis, angle) * camera.rotation;
    }
    if noise.sigma_trans > 0.0 {
        let n = Normal::new(0.0, noise.sigma_trans).expect("finite σ");
        out.origin += Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    }
    out
}

/// Simulated real captures: images are rendered at the true parameters while
/// the stored metadata carries fitting noise.
pub fn simulate_real_set(
    scene: &SyntheticScene,
    capture: &CaptureConfig,
    count: usize,
    noise: FittingNoise,
    seed: u64,
) -> Result<Vec<ExpressionFrame>> {
    noise.validate()?;
    let truth = sample_trajectory(scene, capture, count, seed)?;
    truth
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let image = scene.render(&t.e, &t.camera, t.shoulder_rotation.as_ref())?;
            let mut rng = child_rng(seed, 2, i as u64);
            let e = if noise.sigma_e > 0.0 {
                let n = Normal::new(0.0, noise.sigma_e).expect("finite σ");
                t.e.iter().map(|v| v + n.sample(&mut rng)).collect()
            } else {
                t.e.clone()
            };
            let camera = perturb_camera(&t.camera, &noise, &mut rng);
            Ok(ExpressionFrame {
                e,
                camera,
                shoulder_rotation: t.shoulder_rotation,
                image,
                kind: FrameKind::Real,
                frame_index: Some(i as u32),
            })
        })
        .collect()
}

/// Options of pseudo-frame synthesis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoOptions {
    /// Project interpolated camera rotations back onto SO(3).
    pub orthonormalize: bool,
    /// Fixed interpolation weight instead of `α ~ U[0, 1)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_alpha: Option<f64>,
}

/// Parameters of pseudo frame `index` (no image yet).
pub fn pseudo_parameters(
    real: &[ExpressionFrame],
    index: usize,
    seed: u64,
    opts: &PseudoOptions,
) -> Result<(Interpolated, usize, usize)> {
    let mut rng = child_rng(seed, 3, index as u64);
    let i1 = rng.gen_range(0..real.len());
    let i2 = rng.gen_range(0..real.len());
    let alpha = opts.fixed_alpha.unwrap_or_else(|| rng.gen_range(0.0..1.0));
    let mut p = interpolate_frames(&real[i1], &real[i2], alpha)?;
    if opts.orthonormalize {
        p.rotation = nearest_rotation(&p.rotation)?;
    }
    Ok((p, i1, i2))
}

/// Teacher-rendered frames at parameters interpolated between random pairs
/// of real frames.
pub fn synthesize_pseudo_set(
    scene: &SyntheticScene,
    real: &[ExpressionFrame],
    count: usize,
    seed: u64,
    opts: &PseudoOptions,
) -> Result<Vec<ExpressionFrame>> {
    ensure!(real.len() >= 2, Validation, "pseudo synthesis needs at least two real frames");
    ensure!(count >= 1, Validation, "pseudo frame count must be ≥ 1");
    (0..count)
        .map(|i| {
            let (p, _, i2) = pseudo_parameters(real, i, seed, opts)?;
            let f2 = &real[i2];
            // The teacher needs a rigid shoulder pose, so it is always projected.
            let shoulder_rotation = p.shoulder_rotation.as_ref().map(nearest_rotation).transpose()?;
            let camera = CameraPose {
                origin: p.origin,
                rotation: p.rotation,
                focal: f2.camera.focal,
                principal_point: f2.camera.principal_point,
                width: f2.camera.width,
                height: f2.camera.height,
            };
            camera.validate(RotationCheck::Relaxed)?;
            let image = scene.render(&p.e, &camera, shoulder_rotation.as_ref())?;
            Ok(ExpressionFrame { e: p.e, camera, shoulder_rotation, image, kind: FrameKind::Pseudo, frame_index: None })
        })
        .collect()
}

pub const DATASET_MAGIC: &[u8; 7] = b"LAVDS1\0";
pub const DATASET_VERSION: u16 = 1;

/// Bytes used by one frame record.
pub fn frame_record_size(expr_dim: usize, height: usize, width: usize) -> usize {
    let header = 1 + 4 + 2;
    let camera = 4 * (3 + 9 + 1 + 2) + 4 + 4;
    let shoulder = 1 + 4 * 9;
    let image = 4 + 4 + 4 * 3 * height * width;
    header + 4 * expr_dim + camera + shoulder + image
}

/// Header bytes (magic, version, count).
pub const DATASET_HEADER_SIZE: usize = 7 + 2 + 4;

fn put_f32s<W: Write>(w: &mut W, vals: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in vals {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_dataset_to<W: Write>(frames: &[ExpressionFrame], mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    for f in frames {
        f.validate()?;
        w.write_all(&[match f.kind {
            FrameKind::Pseudo => 0u8,
            FrameKind::Real => 1u8,
        }])?;
        w.write_all(&f.frame_index.map_or(-1i32, |i| i as i32).to_le_bytes())?;
        w.write_all(&(f.e.len() as u16).to_le_bytes())?;
        put_f32s(&mut w, f.e.iter().copied())?;
        let c = &f.camera;
        put_f32s(&mut w, c.origin.iter().copied())?;
        put_f32s(&mut w, (0..9).map(|k| c.rotation[(k / 3, k % 3)]))?;
        put_f32s(&mut w, [c.focal, c.principal_point.x, c.principal_point.y])?;
        w.write_all(&(c.width as u32).to_le_bytes())?;
        w.write_all(&(c.height as u32).to_le_bytes())?;
        w.write_all(&[f.shoulder_rotation.is_some() as u8])?;
        let s = f.shoulder_rotation.unwrap_or_else(Mat3::zeros);
        put_f32s(&mut w, (0..9).map(|k| s[(k / 3, k % 3)]))?;
        w.write_all(&(f.image.height as u32).to_le_bytes())?;
        w.write_all(&(f.image.width as u32).to_le_bytes())?;
        for v in &f.image.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("dataset file is truncated".into()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32().map(f64::from)).collect()
    }
}

pub fn read_dataset_from<R: Read>(r: R) -> Result<Vec<ExpressionFrame>> {
    let mut r = Reader { inner: r };
    let magic: [u8; 7] = r.bytes()?;
    ensure!(&magic == DATASET_MAGIC, Format, "not a dataset file (bad magic)");
    let version = r.u16()?;
    ensure!(version == DATASET_VERSION, Format, "unsupported dataset version {version}");
    let count = r.u32()? as usize;
    let mut frames = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let kind = match r.u8()? {
            0 => FrameKind::Pseudo,
            1 => FrameKind::Real,
            k => return Err(Error::Format(format!("unknown frame kind {k}"))),
        };
        let index = r.i32()?;
        let frame_index = (index >= 0).then_some(index as u32);
        let dim = r.u16()? as usize;
        let e = r.f64s(dim)?;
        let o = r.f64s(3)?;
        let rot = r.f64s(9)?;
        let intr = r.f64s(3)?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let has_shoulder = r.u8()? != 0;
        let s = r.f64s(9)?;
        let ih = r.u32()? as usize;
        let iw = r.u32()? as usize;
        ensure!(ih * iw <= 1 << 26, Format, "implausible image size {ih}×{iw}");
        let data = (0..ih * iw * 3).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
        let frame = ExpressionFrame {
            e,
            camera: CameraPose {
                origin: Vec3::new(o[0], o[1], o[2]),
                rotation: Mat3::from_row_slice(&rot),
                focal: intr[0],
                principal_point: Vector2::new(intr[1], intr[2]),
                width,
                height,
            },
            shoulder_rotation: has_shoulder.then(|| Mat3::from_row_slice(&s)),
            image: Image::from_vec(ih, iw, data),
            kind,
            frame_index,
        };
        frame.validate().map_err(|e| Error::Format(format!("invalid frame record: {e}")))?;
        frames.push(frame);
    }
    let mut probe = [0u8; 1];
    ensure!(
        matches!(r.inner.read(&mut probe), Ok(0)),
        Format,
        "trailing bytes after the last frame record"
    );
    Ok(frames)
}

pub fn write_dataset(frames: &[ExpressionFrame], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(frames, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ExpressionFrame>> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn scene(shoulder: bool) -> SyntheticScene {
        SyntheticScene::new(SceneConfig { shoulder, ..SceneConfig::default() }, 4).unwrap()
    }

    fn capture(res: usize) -> CaptureConfig {
        CaptureConfig { resolution: res, ..CaptureConfig::default() }
    }

    #[test]
    fn rays_missing_the_scene_are_black() {
        let s = scene(true);
        let ray = Ray::new(Vec3::new(0.0, 0.0, 2.7), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(s.trace(&[0.9, -0.9, 0.9, -0.9], &ray, None), [0.0; 3]);
    }

    #[test]
    fn neutral_code_hits_the_base_sphere() {
        let s = scene(false);
        for d in [2.0, 2.7, 3.3] {
            let ray = Ray::new(Vec3::new(0.0, 0.0, d), Vec3::new(0.0, 0.0, -1.0)).unwrap();
            let t = s.head_depth(&[0.0; 4], &ray).unwrap();
            assert!((t - (d - 0.5)).abs() < 1e-12);
            // Off-centre ray against the closed-form quadratic.
            let o = Vec3::new(0.13, -0.21, d);
            let dir = Vec3::new(-0.02, 0.05, -1.0).normalize();
            let ray = Ray::new(o, dir).unwrap();
            let b = o.dot(&dir);
            let expect = -b - (b * b - (o.norm_squared() - 0.25)).sqrt();
            assert!((s.head_depth(&[0.0; 4], &ray).unwrap() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn radius_stays_in_range() {
        let s = SyntheticScene::new(SceneConfig::default(), 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let e: Vec<f64> = (0..50).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let r = s.radius(&e, &d);
            assert!((0.2..=0.9).contains(&r), "{r}");
        }
    }

    #[test]
    fn mirrored_code_renders_mirrored_image() {
        let s = scene(false);
        let cam = CaptureConfig { resolution: 24, ..CaptureConfig::default() }.camera_at(2.7, 0.3, 0.1).unwrap();
        let e = [0.6, -0.7, 0.4, 0.8];
        let e_mirror = [0.6, 0.7, 0.4, -0.8];
        let m = Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0));
        let mirrored_cam = CameraPose {
            origin: m * cam.origin,
            rotation: m * cam.rotation * m,
            ..cam.clone()
        };
        let a = s.render(&e, &cam, None).unwrap();
        let b = s.render(&e_mirror, &mirrored_cam, None).unwrap();
        assert!(a.data.iter().any(|&v| v > 0.0));
        for (x, y) in a.flipped_horizontally().data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn teacher_is_deterministic_and_code_sensitive() {
        let s = scene(true);
        let cam = capture(16).camera_at(2.7, 0.0, 0.0).unwrap();
        let r = axis_angle(Vec3::y(), 0.2);
        let a = s.render(&[0.1, 0.2, 0.3, 0.4], &cam, Some(&r)).unwrap();
        assert_eq!(a, s.render(&[0.1, 0.2, 0.3, 0.4], &cam, Some(&r)).unwrap());
        assert_ne!(a, s.render(&[-0.9, 0.2, 0.3, 0.4], &cam, Some(&r)).unwrap());
        assert_ne!(a, s.render(&[0.1, 0.2, 0.3, 0.4], &cam, Some(&Mat3::identity())).unwrap());
        assert!(s.render(&[0.0; 3], &cam, None).is_err());
    }

    fn frame_with(e: Vec<f64>, rotation: Mat3, origin: Vec3) -> ExpressionFrame {
        let camera = CameraPose { origin, rotation, focal: 4.0, principal_point: Vector2::new(2.0, 2.0), width: 4, height: 4 };
        ExpressionFrame { e, camera, shoulder_rotation: None, image: Image::zeros(4, 4), kind: FrameKind::Real, frame_index: Some(0) }
    }

    #[test]
    fn interpolation_examples() {
        let f1 = frame_with(vec![1.0, 2.0], Mat3::identity(), Vec3::new(1.0, 0.0, 3.0));
        let f2 = frame_with(vec![-1.0, 0.5], axis_angle(Vec3::z(), FRAC_PI_2), Vec3::new(0.0, 1.0, 2.0));
        let p = interpolate_frames(&f1, &f2, 0.0).unwrap();
        assert_eq!(p.e, f2.e);
        assert_eq!(p.origin, f2.camera.origin);
        assert_eq!(p.rotation, f2.camera.rotation);

        let p = interpolate_frames(&f1, &f2, 0.5).unwrap();
        let expect = Mat3::new(0.5, -0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation - expect).amax() < 1e-15);
        assert!((p.rotation.determinant() - 0.5).abs() < 1e-15);

        let f3 = frame_with(vec![1.0, 2.0], Mat3::identity(), Vec3::zeros());
        assert_eq!(interpolate_frames(&f1, &f3, 0.5).unwrap().e, f1.e);
        assert!(interpolate_frames(&f1, &f2, 1.0).is_err());
        assert!(interpolate_frames(&f1, &f2, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn interpolated_code_is_convex(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            alpha in 0.0f64..1.0,
        ) {
            let f1 = frame_with(a.clone(), Mat3::identity(), Vec3::zeros());
            let f2 = frame_with(b.clone(), Mat3::identity(), Vec3::zeros());
            let p = interpolate_frames(&f1, &f2, alpha).unwrap();
            for k in 0..4 {
                let (lo, hi) = (a[k].min(b[k]), a[k].max(b[k]));
                prop_assert!(p.e[k] >= lo - 1e-12 && p.e[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn pseudo_frames_are_seeded_and_aligned() {
        let s = scene(true);
        let real = simulate_real_set(&s, &capture(8), 6, FittingNoise::default(), 3).unwrap();
        let opts = PseudoOptions::default();
        let a = synthesize_pseudo_set(&s, &real, 5, 9, &opts).unwrap();
        assert_eq!(a, synthesize_pseudo_set(&s, &real, 5, 9, &opts).unwrap());
        for f in &a {
            assert_eq!(f.kind, FrameKind::Pseudo);
            assert_eq!(f.frame_index, None);
            assert_eq!(s.render(&f.e, &f.camera, f.shoulder_rotation.as_ref()).unwrap(), f.image);
        }
        assert!(synthesize_pseudo_set(&s, &real, 0, 9, &opts).is_err());
        assert!(synthesize_pseudo_set(&s, &real[..1], 3, 9, &opts).is_err());
    }

    #[test]
    fn fixed_zero_alpha_reproduces_second_frame() {
        let s = scene(false);
        let real = simulate_real_set(&s, &capture(8), 4, FittingNoise::NONE, 5).unwrap();
        let opts = PseudoOptions { fixed_alpha: Some(0.0), ..Default::default() };
        let p = synthesize_pseudo_set(&s, &real, 1, 2, &opts).unwrap();
        let (_, _, i2) = pseudo_parameters(&real, 0, 2, &opts).unwrap();
        let f2 = &real[i2];
        assert_eq!(p[0].image, s.render(&f2.e, &f2.camera, None).unwrap());
    }

    #[test]
    fn orthonormalized_pseudo_cameras_are_rotations() {
        let s = scene(false);
        let real = simulate_real_set(&s, &capture(4), 8, FittingNoise::NONE, 6).unwrap();
        let opts = PseudoOptions { orthonormalize: true, ..Default::default() };
        for f in synthesize_pseudo_set(&s, &real, 6, 1, &opts).unwrap() {
            assert!(f.camera.validate(RotationCheck::Strict).is_ok());
        }
    }

    #[test]
    fn noiseless_real_metadata_is_the_truth() {
        let s = scene(true);
        let cap = capture(8);
        let truth = sample_trajectory(&s, &cap, 5, 4).unwrap();
        let real = simulate_real_set(&s, &cap, 5, FittingNoise::NONE, 4).unwrap();
        for (t, f) in truth.iter().zip(&real) {
            assert_eq!(t.e, f.e);
            assert_eq!(t.camera, f.camera);
            assert_eq!(t.shoulder_rotation, f.shoulder_rotation);
        }
        assert_eq!(real, simulate_real_set(&s, &cap, 5, FittingNoise::NONE, 4).unwrap());
        assert_eq!(real[3].frame_index, Some(3));
    }

    #[test]
    fn translation_noise_matches_chi_mean() {
        // E‖N(0, σ²I₃)‖ = 2σ√(2/π).
        let sigma = 0.01;
        let noise = FittingNoise { sigma_e: 0.0, sigma_rot_deg: 0.0, sigma_trans: sigma };
        let cam = capture(4).camera_at(2.7, 0.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let mean = (0..n).map(|_| (perturb_camera(&cam, &noise, &mut rng).origin - cam.origin).norm()).sum::<f64>() / n as f64;
        let expect = 2.0 * sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expect).abs() < 0.02 * expect, "{mean} vs {expect}");
    }

    #[test]
    fn rotation_noise_has_requested_spread() {
        let noise = FittingNoise { sigma_e: 0.0, sigma_rot_deg: 1.0, sigma_trans: 0.0 };
        let cam = capture(4).camera_at(2.7, 0.2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 4000;
        let mut sq = 0.0;
        for _ in 0..n {
            let p = perturb_camera(&cam, &noise, &mut rng);
            let delta = p.rotation * cam.rotation.transpose();
            let angle = ((delta.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            sq += angle * angle;
            assert!(p.validate(RotationCheck::Strict).is_ok());
        }
        let rms = (sq / n as f64).sqrt().to_degrees();
        assert!((rms - 1.0).abs() < 0.05, "{rms}");
    }

    fn f32_frame(f: &ExpressionFrame) -> ExpressionFrame {
        let r = |v: f64| v as f32 as f64;
        let mut g = f.clone();
        g.e = f.e.iter().map(|&v| r(v)).collect();
        g.camera.origin = f.camera.origin.map(r);
        g.camera.rotation = f.camera.rotation.map(r);
        g.camera.focal = r(f.camera.focal);
        g.camera.principal_point = f.camera.principal_point.map(r);
        g.shoulder_rotation = f.shoulder_rotation.map(|m| m.map(r));
        g
    }

    #[test]
    fn dataset_roundtrip_and_size() {
        let s = scene(true);
        let real = simulate_real_set(&s, &capture(8), 4, FittingNoise::default(), 1).unwrap();
        let pseudo = synthesize_pseudo_set(&s, &real, 3, 2, &PseudoOptions::default()).unwrap();
        let frames: Vec<_> = real.iter().chain(&pseudo).cloned().collect();
        let mut buf = Vec::new();
        write_dataset_to(&frames, &mut buf).unwrap();
        let back = read_dataset_from(&buf[..]).unwrap();
        assert_eq!(back, frames.iter().map(f32_frame).collect::<Vec<_>>());
        assert_eq!(buf.len(), DATASET_HEADER_SIZE + 7 * frame_record_size(4, 8, 8));

        let mut empty = Vec::new();
        write_dataset_to(&[], &mut empty).unwrap();
        assert!(read_dataset_from(&empty[..]).unwrap().is_empty());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset_from(&bad[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[7] = 9;
        assert!(matches!(read_dataset_from(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_dataset_from(&buf[..buf.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn hundred_frame_file_matches_size_estimate() {
        let s = scene(false);
        let real = simulate_real_set(&s, &capture(16), 100, FittingNoise::default(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("real.lavds");
        write_dataset(&real, &path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as f64;
        // Header + images + metadata.
        let images = 100.0 * (16.0 * 16.0 * 3.0 * 4.0);
        let meta = 100.0 * (1.0 + 4.0 + 2.0 + 4.0 * 4.0 + 15.0 * 4.0 + 8.0 + 1.0 + 36.0 + 8.0);
        let estimate = 13.0 + images + meta;
        assert!((size / estimate - 1.0).abs() < 0.05, "{size} vs {estimate}");
        assert_eq!(read_dataset(&path).unwrap().len(), 100);
    }

    #[test]
    fn records_carry_pixel_colours() {
        let s = scene(false);
        let real = simulate_real_set(&s, &capture(4), 2, FittingNoise::NONE, 1).unwrap();
        let recs = real[1].records().unwrap();
        assert_eq!(recs.len(), 16);
        assert_eq!(recs[5].color, real[1].image.pixel(1, 1));
        assert_eq!(recs[5].frame_index, Some(1));
        assert!(recs.iter().all(|r| (r.direction.norm() - 1.0).abs() < 1e-12));
    }
}
