//! Latent-conditioned rigid warp of sample points for real frames.
//!
//! `G(PE(q), v_i)` predicts an axis-angle `ω`, a rotation centre `c` and a
//! translation `t`; the warped point is `R(ω)(q + c) − c + t` with `R` the
//! exponential map of `[ω]ₓ`.

use crate::error::{ensure, Result};
use crate::linalg::{Mat, Real};
use crate::model::{ModelBundle, WARP_OUTPUTS};
use crate::nn::ResMlp;
use crate::ray_geometry::{pe_factor, positional_encode_into, sample_points_into, Ray, RayRep, RayRepConfig, Vec3};

pub type V3<T> = [T; 3];
pub type M3<T> = [[T; 3]; 3];

/// Output of the warp network for one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidWarp<T> {
    pub omega: V3<T>,
    pub center: V3<T>,
    pub translation: V3<T>,
}

impl<T: Real> RigidWarp<T> {
    pub fn identity() -> Self {
        let z = [T::zero(); 3];
        RigidWarp { omega: z, center: z, translation: z }
    }

    pub fn from_slice(v: &[T]) -> Self {
        assert_eq!(v.len(), WARP_OUTPUTS);
        RigidWarp {
            omega: [v[0], v[1], v[2]],
            center: [v[3], v[4], v[5]],
            translation: [v[6], v[7], v[8]],
        }
    }

    pub fn to_array(&self) -> [T; WARP_OUTPUTS] {
        let mut out = [T::zero(); WARP_OUTPUTS];
        out[..3].copy_from_slice(&self.omega);
        out[3..6].copy_from_slice(&self.center);
        out[6..].copy_from_slice(&self.translation);
        out
    }

    pub fn rotation(&self) -> M3<T> {
        rodrigues(self.omega)
    }

    /// `R(q + c) − c + t`.
    pub fn apply(&self, q: V3<T>) -> V3<T> {
        let v = add(q, self.center);
        let rv = rotate(self.omega, v);
        [
            rv[0] - self.center[0] + self.translation[0],
            rv[1] - self.center[1] + self.translation[1],
            rv[2] - self.center[2] + self.translation[2],
        ]
    }

    /// Gradient of `g · apply(q)` with respect to the warp parameters.
    pub fn apply_backward(&self, q: V3<T>, g: V3<T>) -> RigidWarp<T> {
        let v = add(q, self.center);
        let omega = rotate_backward_omega(self.omega, v, g);
        let r = self.rotation();
        // dc = Rᵀg − g
        let mut center = [T::zero(); 3];
        for (j, c) in center.iter_mut().enumerate() {
            *c = r[0][j] * g[0] + r[1][j] * g[1] + r[2][j] * g[2] - g[j];
        }
        RigidWarp { omega, center, translation: g }
    }
}

fn add<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn dot<T: Real>(a: V3<T>, b: V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// `A = sin θ/θ`, `B = (1 − cos θ)/θ²` and their derivatives with respect to
/// `s = θ²`, with series expansions near zero.
fn rodrigues_coeffs<T: Real>(s: T) -> (T, T, T, T) {
    let c = |v: f64| T::from_f64_lossy(v);
    if s < c(1e-4) {
        let a = T::one() - s / c(6.0) + s * s / c(120.0);
        let b = c(0.5) - s / c(24.0) + s * s / c(720.0);
        let da = c(-1.0 / 6.0) + s / c(60.0) - s * s / c(1680.0);
        let db = c(-1.0 / 24.0) + s / c(360.0) - s * s / c(13440.0);
        (a, b, da, db)
    } else {
        let theta = s.sqrt();
        let (sin, cos) = theta.sin_cos();
        let a = sin / theta;
        let b = (T::one() - cos) / s;
        let da = (theta * cos - sin) / (c(2.0) * s * theta);
        let db = (theta * sin - c(2.0) * (T::one() - cos)) / (c(2.0) * s * s);
        (a, b, da, db)
    }
}

/// Rotation matrix `exp([ω]ₓ) = I + A[ω]ₓ + B[ω]ₓ²`.
pub fn rodrigues<T: Real>(omega: V3<T>) -> M3<T> {
    let (a, b, _, _) = rodrigues_coeffs(dot(omega, omega));
    let [x, y, z] = omega;
    let o = T::one();
    [
        [o - b * (y * y + z * z), -a * z + b * x * y, a * y + b * x * z],
        [a * z + b * x * y, o - b * (x * x + z * z), -a * x + b * y * z],
        [-a * y + b * x * z, a * x + b * y * z, o - b * (x * x + y * y)],
    ]
}

/// `R(ω) v = v + A (ω × v) + B (ω (ω·v) − θ² v)`.
fn rotate<T: Real>(omega: V3<T>, v: V3<T>) -> V3<T> {
    let s = dot(omega, omega);
    let (a, b, _, _) = rodrigues_coeffs(s);
    let wxv = cross(omega, v);
    let wv = dot(omega, v);
    [
        v[0] + a * wxv[0] + b * (omega[0] * wv - s * v[0]),
        v[1] + a * wxv[1] + b * (omega[1] * wv - s * v[1]),
        v[2] + a * wxv[2] + b * (omega[2] * wv - s * v[2]),
    ]
}

/// Gradient of `g · R(ω) v` with respect to `ω`.
fn rotate_backward_omega<T: Real>(omega: V3<T>, v: V3<T>, g: V3<T>) -> V3<T> {
    let s = dot(omega, omega);
    let (a, b, da, db) = rodrigues_coeffs(s);
    let two = T::one() + T::one();
    let vxg = cross(v, g);
    let g_wxv = dot(omega, vxg);
    let wv = dot(omega, v);
    let gw = dot(g, omega);
    let gv = dot(g, v);
    let quad = gw * wv - gv * s;
    let mut out = [T::zero(); 3];
    for j in 0..3 {
        out[j] = a * vxg[j]
            + two * da * g_wxv * omega[j]
            + b * (g[j] * wv + v[j] * gw - two * gv * omega[j])
            + two * db * quad * omega[j];
    }
    out
}

/// Width of the network input for one point: `PE(q)` followed by the latent.
pub fn warp_input_dim(pe_freqs: usize, latent_dim: usize) -> usize {
    3 * pe_factor(pe_freqs, true) + latent_dim
}

pub(crate) fn write_warp_input<T: Real>(q: V3<T>, latent: &[T], pe_freqs: usize, out: &mut [T]) {
    let split = 3 * pe_factor(pe_freqs, true);
    positional_encode_into(&q, pe_freqs, true, &mut out[..split]);
    out[split..].copy_from_slice(latent);
}

/// Warp parameters predicted by `g` for point `q` of a frame with latent `latent`.
pub fn predict_warp<T: Real>(q: V3<T>, latent: &[T], g: &ResMlp<T>, pe_freqs: usize) -> RigidWarp<T> {
    let mut input = vec![T::zero(); warp_input_dim(pe_freqs, latent.len())];
    write_warp_input(q, latent, pe_freqs, &mut input);
    let out = g.forward(&Mat::from_vec(1, input.len(), input));
    RigidWarp::from_slice(&out.data)
}

/// Warped position of `q`.
pub fn warp_point<T: Real>(q: Vec3, latent: &[T], g: &ResMlp<T>, pe_freqs: usize) -> Result<Vec3> {
    ensure!(
        g.input_dim() == warp_input_dim(pe_freqs, latent.len()),
        Validation,
        "warp network expects {} inputs, point + latent give {}",
        g.input_dim(),
        warp_input_dim(pe_freqs, latent.len())
    );
    let qt = [q.x, q.y, q.z].map(T::from_f64_lossy);
    let w = predict_warp(qt, latent, g, pe_freqs);
    let p = w.apply(qt);
    Ok(Vec3::new(p[0].to_f64_lossy(), p[1].to_f64_lossy(), p[2].to_f64_lossy()))
}

/// Latent row of real frame `frame_index`; pseudo frames (`None`) have none.
pub fn frame_latent<T: Real>(bundle: &ModelBundle<T>, frame_index: Option<usize>) -> Result<&[T]> {
    let Some(i) = frame_index else {
        return Err(crate::Error::Usage("pseudo frames have no latent and are never warped".into()));
    };
    let (rows, dim) = (bundle.arch.latent_count, bundle.arch.latent_dim);
    ensure!(i < rows, Usage, "frame index {i} outside the latent table ({rows} rows)");
    Ok(&bundle.latents.data[i * dim..(i + 1) * dim])
}

/// Point-concat representation with every sample point warped.
pub fn warp_ray_rep<T: Real>(
    ray: &Ray,
    cfg: &RayRepConfig,
    frame_index: Option<usize>,
    bundle: &ModelBundle<T>,
) -> Result<RayRep> {
    cfg.validate()?;
    let latent = frame_latent(bundle, frame_index)?;
    let mut pts = vec![0.0; 3 * cfg.samples];
    sample_points_into(ray, cfg, &mut pts);
    let mut values = Vec::with_capacity(pts.len());
    for p in pts.chunks_exact(3) {
        let q = warp_point(Vec3::new(p[0], p[1], p[2]), latent, &bundle.warp, bundle.arch.warp_pe_freqs)?;
        values.extend_from_slice(q.as_slice());
    }
    crate::model::EvalCounters::add(&bundle.counters.warp_points, cfg.samples);
    Ok(RayRep { values })
}

/// Mean `‖q′ − q‖` over the sampled points of the given rays of frame
/// `frame_index`.
pub fn mean_displacement<T: Real>(rays: &[Ray], frame_index: usize, bundle: &ModelBundle<T>) -> Result<f64> {
    let cfg = &bundle.arch.ray;
    let latent = frame_latent(bundle, Some(frame_index))?;
    let mut pts = vec![0.0; 3 * cfg.samples];
    let (mut sum, mut n) = (0.0, 0usize);
    for ray in rays {
        sample_points_into(ray, cfg, &mut pts);
        for p in pts.chunks_exact(3) {
            let q = Vec3::new(p[0], p[1], p[2]);
            sum += (warp_point(q, latent, &bundle.warp, bundle.arch.warp_pe_freqs)? - q).norm();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
