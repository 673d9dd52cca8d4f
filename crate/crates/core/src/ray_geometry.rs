//! Pinhole cameras, per-pixel rays and the point-concatenation ray encoding.
//!
//! Conventions: right-handed world, camera looks down its local −z axis with
//! +y up and +x right; image rows grow downwards. `CameraPose::rotation` maps
//! camera-frame vectors into the world frame.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{ensure, Error, Result};
use crate::linalg::Real;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance for orthonormality and unit-determinant checks.
pub const ROTATION_TOL: f64 = 1e-6;

/// How strictly a camera's rotation is validated.
///
/// Literal linear interpolation of rotation matrices yields non-orthonormal
/// matrices; such cameras are accepted under `Relaxed`, which only requires a
/// finite matrix with positive determinant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationCheck {
    Strict,
    Relaxed,
}

pub fn validate_rotation(r: &Mat3, check: RotationCheck) -> Result<()> {
    ensure!(r.iter().all(|v| v.is_finite()), Validation, "rotation has non-finite entries");
    let det = r.determinant();
    match check {
        RotationCheck::Strict => {
            let err = (r.transpose() * r - Mat3::identity()).amax();
            ensure!(err <= ROTATION_TOL, Validation, "rotation is not orthonormal (max |RᵀR − I| = {err:e})");
            ensure!((det - 1.0).abs() <= ROTATION_TOL, Validation, "rotation determinant {det} ≠ 1");
        }
        RotationCheck::Relaxed => {
            ensure!(det > 1e-9, Validation, "rotation determinant {det} is not positive");
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    pub origin: Vec3,
    /// World-from-camera rotation.
    pub rotation: Mat3,
    /// Focal length in pixels.
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    pub fn new(
        origin: Vec3,
        rotation: Mat3,
        focal: f64,
        principal_point: Vector2<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = CameraPose { origin, rotation, focal, principal_point, width, height };
        cam.validate(RotationCheck::Strict)?;
        Ok(cam)
    }

    /// Camera at `origin` looking at `target` with the image centred on the
    /// optical axis.
    pub fn look_at(origin: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let back = (origin - target).normalize();
        let right = up.cross(&back);
        ensure!(right.norm() > 1e-9, Validation, "look_at: up vector parallel to view direction");
        let right = right.normalize();
        let true_up = back.cross(&right);
        let rotation = Mat3::from_columns(&[right, true_up, back]);
        Self::new(origin, rotation, focal, Vector2::new(width as f64 / 2.0, height as f64 / 2.0), width, height)
    }

    pub fn validate(&self, check: RotationCheck) -> Result<()> {
        ensure!(self.width >= 1 && self.height >= 1, Validation, "camera resolution must be at least 1×1");
        ensure!(self.focal > 0.0 && self.focal.is_finite(), Validation, "focal length must be positive");
        ensure!(
            self.origin.iter().chain(self.principal_point.iter()).all(|v| v.is_finite()),
            Validation,
            "camera has non-finite origin or principal point"
        );
        validate_rotation(&self.rotation, check)
    }

    /// Same pose with intrinsics and resolution divided by `factor`.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        ensure!(factor >= 1, Validation, "downscale factor must be ≥ 1");
        ensure!(
            self.width % factor == 0 && self.height % factor == 0,
            Validation,
            "resolution {}×{} is not divisible by {factor}",
            self.width,
            self.height
        );
        let f = factor as f64;
        Ok(CameraPose {
            focal: self.focal / f,
            principal_point: self.principal_point / f,
            width: self.width / factor,
            height: self.height / factor,
            ..self.clone()
        })
    }

    /// Ray through continuous image coordinates (`x` right, `y` down, pixel
    /// centres at half-integers).
    pub fn ray_through(&self, x: f64, y: f64) -> Ray {
        let cam_dir = Vec3::new(
            (x - self.principal_point.x) / self.focal,
            -(y - self.principal_point.y) / self.focal,
            -1.0,
        );
        Ray { origin: self.origin, direction: (self.rotation * cam_dir.normalize()).normalize() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        ensure!(n > 0.0 && n.is_finite(), Validation, "ray direction must be non-zero and finite");
        Ok(Ray { origin, direction: direction / n })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Row-major `height × width` grid of pixel rays.
pub fn generate_rays(camera: &CameraPose) -> Result<Vec<Ray>> {
    generate_rays_with(camera, RotationCheck::Strict)
}

pub fn generate_rays_with(camera: &CameraPose, check: RotationCheck) -> Result<Vec<Ray>> {
    camera.validate(check)?;
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for v in 0..camera.height {
        for u in 0..camera.width {
            rays.push(camera.ray_through(u as f64 + 0.5, v as f64 + 0.5));
        }
    }
    Ok(rays)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RayRepConfig {
    /// Points sampled per ray (K).
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    /// Positional-encoding octaves.
    pub pe_freqs: usize,
    pub include_input: bool,
}

impl Default for RayRepConfig {
    fn default() -> Self {
        RayRepConfig { samples: 8, near: 1.2, far: 4.2, pe_freqs: 6, include_input: true }
    }
}

impl RayRepConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.samples >= 2, Config, "samples per ray must be ≥ 2 (got {})", self.samples);
        ensure!(self.near < self.far, Config, "near ({}) must be < far ({})", self.near, self.far);
        Ok(())
    }

    /// Encoded width produced per raw scalar.
    pub fn pe_factor(&self) -> usize {
        pe_factor(self.pe_freqs, self.include_input)
    }

    /// Length of the raw point-concat vector (3K, or 6K with the shoulder set).
    pub fn raw_len(&self, shoulder: bool) -> usize {
        3 * self.samples * if shoulder { 2 } else { 1 }
    }

    pub fn encoded_len(&self, shoulder: bool) -> usize {
        self.raw_len(shoulder) * self.pe_factor()
    }

    /// Depth of sample `i`; samples include both the near and far plane.
    #[inline]
    pub fn depth(&self, i: usize) -> f64 {
        let t = i as f64 / (self.samples - 1) as f64;
        self.near * (1.0 - t) + self.far * t
    }
}

pub fn pe_factor(pe_freqs: usize, include_input: bool) -> usize {
    2 * pe_freqs + include_input as usize
}

/// Ray encoding vector fed to the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct RayRep {
    pub values: Vec<f64>,
}

/// Writes the K sample points of `ray` as `(x1, y1, z1, …, xK, yK, zK)`.
pub(crate) fn sample_points_into(ray: &Ray, cfg: &RayRepConfig, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 3 * cfg.samples);
    for i in 0..cfg.samples {
        let p = ray.at(cfg.depth(i));
        out[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
    }
}

/// Point-concatenation ray representation (before positional encoding).
pub fn point_concat(ray: &Ray, cfg: &RayRepConfig) -> Result<RayRep> {
    cfg.validate()?;
    let mut values = vec![0.0; 3 * cfg.samples];
    sample_points_into(ray, cfg, &mut values);
    Ok(RayRep { values })
}

/// Appends the points re-expressed in the shoulder frame (`Rₛ⁻¹ p`) to `points`.
pub(crate) fn append_shoulder_frame(points: &[f64], shoulder_inv: &Mat3, out: &mut Vec<f64>) {
    out.extend_from_slice(points);
    for p in points.chunks_exact(3) {
        let q = shoulder_inv * Vec3::new(p[0], p[1], p[2]);
        out.extend_from_slice(q.as_slice());
    }
}

/// Base point-concat vector followed by the same points in the shoulder frame.
pub fn shoulder_ray_rep(ray: &Ray, shoulder_rotation: &Mat3, cfg: &RayRepConfig) -> Result<RayRep> {
    validate_rotation(shoulder_rotation, RotationCheck::Strict)?;
    let base = point_concat(ray, cfg)?;
    let mut values = Vec::with_capacity(2 * base.values.len());
    append_shoulder_frame(&base.values, &shoulder_rotation.transpose(), &mut values);
    Ok(RayRep { values })
}

/// Per scalar `p`: optionally `p`, then `sin(2ᵏp), cos(2ᵏp)` for `k < pe_freqs`.
pub fn positional_encode(v: &[f64], pe_freqs: usize, include_input: bool) -> Vec<f64> {
    let mut out = vec![0.0; v.len() * pe_factor(pe_freqs, include_input)];
    positional_encode_into(v, pe_freqs, include_input, &mut out);
    out
}

pub fn positional_encode_into<T: Real>(v: &[T], pe_freqs: usize, include_input: bool, out: &mut [T]) {
    let stride = pe_factor(pe_freqs, include_input);
    assert_eq!(out.len(), v.len() * stride, "positional encoding output length");
    if stride == 0 {
        return;
    }
    for (&p, dst) in v.iter().zip(out.chunks_exact_mut(stride)) {
        let mut j = 0;
        if include_input {
            dst[0] = p;
            j = 1;
        }
        let mut freq = T::one();
        for _ in 0..pe_freqs {
            let (s, c) = (p * freq).sin_cos();
            dst[j] = s;
            dst[j + 1] = c;
            j += 2;
            freq = freq + freq;
        }
    }
}

/// Gradient of [`positional_encode_into`] with respect to its input.
pub fn positional_encode_backward<T: Real>(
    v: &[T],
    pe_freqs: usize,
    include_input: bool,
    d_out: &[T],
    d_in: &mut [T],
) {
    let stride = pe_factor(pe_freqs, include_input);
    assert_eq!(d_out.len(), v.len() * stride);
    if stride == 0 {
        return;
    }
    for ((&p, g), d) in v.iter().zip(d_out.chunks_exact(stride)).zip(d_in.iter_mut()) {
        let mut acc = T::zero();
        let mut j = 0;
        if include_input {
            acc = g[0];
            j = 1;
        }
        let mut freq = T::one();
        for _ in 0..pe_freqs {
            let (s, c) = (p * freq).sin_cos();
            acc = acc + freq * (c * g[j] - s * g[j + 1]);
            j += 2;
            freq = freq + freq;
        }
        *d = *d + acc;
    }
}

/// Rotation by `angle` radians about the unit `axis`.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Nearest rotation in the Frobenius sense (polar decomposition via SVD).
pub fn nearest_rotation(m: &Mat3) -> Result<Mat3> {
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::validation("SVD failed while orthonormalising rotation")),
    };
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Ok(u * d * vt)
}
