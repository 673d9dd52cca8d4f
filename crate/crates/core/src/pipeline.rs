//! Batched, differentiable evaluation of the whole model.
//!
//! Rays are grouped by frame so that the local feature bank is computed once
//! per frame and every network runs as one matrix product over the batch.

use std::ops::Range;

use crate::error::{ensure, Result};
use crate::linalg::{matmul, matmul_at, matmul_bt, Mat, Real};
use crate::model::{EvalCounters, ModelBundle, WARP_OUTPUTS};
use crate::nelf_renderer::{map_to_rows, rows_to_map, SrCache};
use crate::nn::{sigmoid, FeatureMap, MlpCache};
use crate::ray_geometry::{pe_factor, positional_encode_backward, positional_encode_into, Mat3, Ray};
use crate::warping_field::{warp_input_dim, write_warp_input, RigidWarp, M3, V3};

/// Rays belonging to one frame.
#[derive(Clone, Debug)]
pub struct RayGroup {
    pub code: Vec<f64>,
    pub rays: Vec<Ray>,
    /// Shoulder rotation `Rₛ`; only used when the model has the shoulder extension.
    pub shoulder_rotation: Option<Mat3>,
    /// Real-frame index (latent row). `None` for pseudo frames.
    pub frame_index: Option<usize>,
}

impl RayGroup {
    pub fn new(code: Vec<f64>, rays: Vec<Ray>, shoulder_rotation: Option<Mat3>, frame_index: Option<usize>) -> Self {
        RayGroup { code, rays, shoulder_rotation, frame_index }
    }
}

/// Rows evaluated together at inference time.
const INFERENCE_CHUNK: usize = 4096;

struct FrameCtx<T> {
    /// Code as seen by the encoder networks (attention mode) or the light
    /// field (raw-code mode).
    code: Vec<T>,
    bank: Option<Mat<T>>,
    bank_cache: Option<MlpCache<T>>,
    shoulder_inv: Option<M3<T>>,
    /// Latent row when this frame is warped.
    latent: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    group: usize,
    rays: (usize, usize),
}

struct WarpTape<T> {
    /// First row of the segment in the batch.
    row: usize,
    group: usize,
    points: Vec<V3<T>>,
    params: Vec<RigidWarp<T>>,
    cache: MlpCache<T>,
    /// Per-point weight of the displacement penalty (0 when unused).
    penalty: f64,
}

struct CoreTape<T> {
    segments: Vec<Segment>,
    raw: Mat<T>,
    warps: Vec<WarpTape<T>>,
    attention: Option<(MlpCache<T>, Mat<T>)>,
    nelf: MlpCache<T>,
}

/// Everything needed to backpropagate a ray batch.
pub struct RayTape<T> {
    ctxs: Vec<FrameCtx<T>>,
    core: CoreTape<T>,
}

impl<T: Real> RayTape<T> {
    pub fn num_rays(&self) -> usize {
        self.core.raw.rows
    }
}

fn mat3_to<T: Real>(m: &Mat3) -> M3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = T::from_f64_lossy(m[(i, j)]);
        }
    }
    out
}

fn mat3_mul<T: Real>(m: &M3<T>, v: V3<T>) -> V3<T> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat3_mul_t<T: Real>(m: &M3<T>, v: V3<T>) -> V3<T> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn prepare<T: Real>(bundle: &ModelBundle<T>, groups: &[RayGroup], warp: bool, tape: bool) -> Result<Vec<FrameCtx<T>>> {
    let arch = &bundle.arch;
    groups
        .iter()
        .map(|g| {
            ensure!(
                g.code.len() == arch.expr_dim,
                Validation,
                "expression code has {} entries, model expects {}",
                g.code.len(),
                arch.expr_dim
            );
            let (code, bank, bank_cache) = match &bundle.encoder {
                Some(enc) => {
                    let code = enc.code_features(&g.code)?;
                    let x = Mat::from_vec(1, code.len(), code.clone());
                    let (flat, cache) = if tape {
                        let (y, c) = enc.local_feature.forward_cached(&x);
                        (y, Some(c))
                    } else {
                        (enc.local_feature.forward(&x), None)
                    };
                    EvalCounters::add(&bundle.counters.local_feature_frames, 1);
                    (code, Some(Mat::from_vec(arch.bank_rows, arch.bank_dim, flat.data)), cache)
                }
                None => {
                    let raw: Vec<T> = g.code.iter().map(|&v| T::from_f64_lossy(v)).collect();
                    let mut code = vec![T::zero(); arch.expr_rep_dim()];
                    positional_encode_into(&raw, arch.expr_pe_freqs, true, &mut code);
                    (code, None, None)
                }
            };
            let shoulder_inv = if arch.shoulder {
                let r = g.shoulder_rotation.ok_or_else(|| {
                    crate::Error::validation("model uses the shoulder extension but a frame has no shoulder rotation")
                })?;
                let inv = r
                    .try_inverse()
                    .ok_or_else(|| crate::Error::validation("shoulder rotation is singular"))?;
                Some(mat3_to(&inv))
            } else {
                None
            };
            let latent = match (warp, g.frame_index) {
                (true, Some(i)) => {
                    ensure!(i < arch.latent_count, Usage, "frame index {i} outside the latent table");
                    Some(i)
                }
                _ => None,
            };
            Ok(FrameCtx { code, bank, bank_cache, shoulder_inv, latent })
        })
        .collect()
}

fn forward_core<T: Real>(
    bundle: &ModelBundle<T>,
    groups: &[RayGroup],
    ctxs: &[FrameCtx<T>],
    segments: Vec<Segment>,
    tape: bool,
) -> (Mat<T>, Option<CoreTape<T>>) {
    let arch = &bundle.arch;
    let cfg = &arch.ray;
    let k = cfg.samples;
    let base = 3 * k;
    let raw_len = cfg.raw_len(arch.shoulder);
    let n: usize = segments.iter().map(|s| s.rays.1 - s.rays.0).sum();
    let mut raw = Mat::<T>::zeros(n, raw_len);

    let mut row = 0;
    for seg in &segments {
        for ray in &groups[seg.group].rays[seg.rays.0..seg.rays.1] {
            let dst = raw.row_mut(row);
            for i in 0..k {
                let p = ray.at(cfg.depth(i));
                for c in 0..3 {
                    dst[3 * i + c] = T::from_f64_lossy(p[c]);
                }
            }
            row += 1;
        }
    }

    let mut warps = Vec::new();
    let warp_split = 3 * pe_factor(arch.warp_pe_freqs, true);
    let mut row = 0;
    for seg in &segments {
        let len = seg.rays.1 - seg.rays.0;
        if let Some(frame) = ctxs[seg.group].latent {
            let latent = &bundle.latents.data[frame * arch.latent_dim..(frame + 1) * arch.latent_dim];
            let width = warp_input_dim(arch.warp_pe_freqs, arch.latent_dim);
            let mut input = Mat::zeros(len * k, width);
            let mut points = Vec::with_capacity(len * k);
            for r in 0..len {
                let src = raw.row(row + r);
                for i in 0..k {
                    let q = [src[3 * i], src[3 * i + 1], src[3 * i + 2]];
                    write_warp_input(q, latent, arch.warp_pe_freqs, input.row_mut(r * k + i));
                    points.push(q);
                }
            }
            debug_assert_eq!(warp_split + arch.latent_dim, width);
            let (out, cache) = bundle.warp.forward_cached(&input);
            let params: Vec<RigidWarp<T>> = out.data.chunks_exact(WARP_OUTPUTS).map(RigidWarp::from_slice).collect();
            for r in 0..len {
                let dst = raw.row_mut(row + r);
                for i in 0..k {
                    let q = params[r * k + i].apply(points[r * k + i]);
                    dst[3 * i..3 * i + 3].copy_from_slice(&q);
                }
            }
            EvalCounters::add(&bundle.counters.warp_points, len * k);
            if tape {
                warps.push(WarpTape { row, group: seg.group, points, params, cache, penalty: 0.0 });
            }
        }
        row += len;
    }

    if arch.shoulder {
        let mut row = 0;
        for seg in &segments {
            let inv = ctxs[seg.group].shoulder_inv.as_ref().expect("shoulder rotation prepared");
            for r in row..row + seg.rays.1 - seg.rays.0 {
                let dst = raw.row_mut(r);
                for i in 0..k {
                    let q = mat3_mul(inv, [dst[3 * i], dst[3 * i + 1], dst[3 * i + 2]]);
                    dst[base + 3 * i..base + 3 * i + 3].copy_from_slice(&q);
                }
            }
            row += seg.rays.1 - seg.rays.0;
        }
    }

    let ray_dim = arch.ray_dim();
    let expr_dim = arch.expr_rep_dim();
    let mut nelf_in = Mat::<T>::zeros(n, ray_dim + expr_dim);
    for r in 0..n {
        positional_encode_into(raw.row(r), cfg.pe_freqs, cfg.include_input, &mut nelf_in.row_mut(r)[..ray_dim]);
    }

    let mut attention = None;
    match &bundle.encoder {
        Some(enc) => {
            let code_dim = ctxs.first().map_or(0, |c| c.code.len());
            let mut att_in = Mat::<T>::zeros(n, ray_dim + code_dim);
            let mut row = 0;
            for seg in &segments {
                for r in row..row + seg.rays.1 - seg.rays.0 {
                    let dst = att_in.row_mut(r);
                    dst[..ray_dim].copy_from_slice(&nelf_in.row(r)[..ray_dim]);
                    dst[ray_dim..].copy_from_slice(&ctxs[seg.group].code);
                }
                row += seg.rays.1 - seg.rays.0;
            }
            let (mut w, cache) = if tape {
                let (y, c) = enc.attention.forward_cached(&att_in);
                (y, Some(c))
            } else {
                (enc.attention.forward(&att_in), None)
            };
            drop(att_in);
            w.data.iter_mut().for_each(|v| *v = sigmoid(*v));
            let mut row = 0;
            for seg in &segments {
                let len = seg.rays.1 - seg.rays.0;
                let bank = ctxs[seg.group].bank.as_ref().expect("bank computed in attention mode");
                let rep = matmul(&w.slice_rows(row, row + len), bank);
                for r in 0..len {
                    nelf_in.row_mut(row + r)[ray_dim..].copy_from_slice(rep.row(r));
                }
                row += len;
            }
            EvalCounters::add(&bundle.counters.attention_rays, n);
            if let Some(c) = cache {
                attention = Some((c, w));
            }
        }
        None => {
            let mut row = 0;
            for seg in &segments {
                for r in row..row + seg.rays.1 - seg.rays.0 {
                    nelf_in.row_mut(r)[ray_dim..].copy_from_slice(&ctxs[seg.group].code);
                }
                row += seg.rays.1 - seg.rays.0;
            }
        }
    }

    EvalCounters::add(&bundle.counters.nelf_rays, n);
    if tape {
        let (rgb, nelf) = bundle.nelf.forward_cached(&nelf_in);
        (rgb, Some(CoreTape { segments, raw, warps, attention, nelf }))
    } else {
        (bundle.nelf.forward(&nelf_in), None)
    }
}

fn full_segments(groups: &[RayGroup]) -> Vec<Segment> {
    groups.iter().enumerate().map(|(g, grp)| Segment { group: g, rays: (0, grp.rays.len()) }).collect()
}

/// Inference: `N × 3` colours for all rays, in group order. Never warps.
pub fn forward_rays<T: Real>(bundle: &ModelBundle<T>, groups: &[RayGroup]) -> Result<Mat<T>> {
    let ctxs = prepare(bundle, groups, false, false)?;
    let total: usize = groups.iter().map(|g| g.rays.len()).sum();
    let mut out = Mat::zeros(total, 3);
    let mut row = 0;
    for (g, grp) in groups.iter().enumerate() {
        let mut start = 0;
        while start < grp.rays.len() {
            let end = (start + INFERENCE_CHUNK).min(grp.rays.len());
            let (rgb, _) = forward_core(bundle, groups, &ctxs, vec![Segment { group: g, rays: (start, end) }], false);
            out.data[3 * row..3 * (row + end - start)].copy_from_slice(&rgb.data);
            row += end - start;
            start = end;
        }
    }
    Ok(out)
}

/// Training forward over a ray batch. With `warp`, groups carrying a frame
/// index are routed through the warping field.
pub fn forward_rays_train<T: Real>(
    bundle: &ModelBundle<T>,
    groups: &[RayGroup],
    warp: bool,
) -> Result<(Mat<T>, RayTape<T>)> {
    let ctxs = prepare(bundle, groups, warp, true)?;
    let (rgb, core) = forward_core(bundle, groups, &ctxs, full_segments(groups), true);
    Ok((rgb, RayTape { ctxs, core: core.expect("tape requested") }))
}

fn cols_of<T: Real>(m: &Mat<T>, cols: Range<usize>) -> Mat<T> {
    let mut out = Mat::zeros(m.rows, cols.len());
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[cols.clone()]);
    }
    out
}

/// Accumulates the gradient of a loss with `dL/d rgb = d_rgb` into `grad`.
pub fn backward_rays<T: Real>(bundle: &ModelBundle<T>, tape: &RayTape<T>, d_rgb: &Mat<T>, grad: &mut ModelBundle<T>) {
    let arch = &bundle.arch;
    let core = &tape.core;
    let ray_dim = arch.ray_dim();
    let expr_dim = arch.expr_rep_dim();
    let n = core.raw.rows;
    assert_eq!((d_rgb.rows, d_rgb.cols), (n, 3), "colour gradient shape");
    let warped = !core.warps.is_empty();
    let attention = bundle.encoder.is_some();

    let cols = match (warped, attention) {
        (true, true) => Some(0..ray_dim + expr_dim),
        (true, false) => Some(0..ray_dim),
        (false, true) => Some(ray_dim..ray_dim + expr_dim),
        (false, false) => None,
    };
    let offset = cols.as_ref().map_or(0, |c| c.start);
    let d_in = bundle.nelf.backward_cols(&core.nelf, d_rgb, &mut grad.nelf, cols);

    let mut d_x: Option<Mat<T>> = if warped { d_in.as_ref().map(|d| cols_of(d, 0..ray_dim)) } else { None };

    if let (Some(enc), Some((att_cache, w)), Some(d_in)) = (&bundle.encoder, &core.attention, &d_in) {
        let genc = grad.encoder.as_mut().expect("gradient bundle has an encoder");
        let d_rep = cols_of(d_in, ray_dim - offset..ray_dim + expr_dim - offset);
        let mut d_logits = Mat::zeros(n, arch.bank_rows);
        let mut d_banks: Vec<Option<Mat<T>>> = (0..tape.ctxs.len()).map(|_| None).collect();
        let mut row = 0;
        for seg in &core.segments {
            let len = seg.rays.1 - seg.rays.0;
            let ctx = &tape.ctxs[seg.group];
            let bank = ctx.bank.as_ref().expect("bank");
            let d_rep_s = d_rep.slice_rows(row, row + len);
            let w_s = w.slice_rows(row, row + len);
            let d_w = matmul_bt(&d_rep_s, bank);
            let d_bank = matmul_at(&w_s, &d_rep_s);
            match &mut d_banks[seg.group] {
                Some(acc) => acc.add_assign(&d_bank),
                slot => *slot = Some(d_bank),
            }
            for r in 0..len {
                let dst = d_logits.row_mut(row + r);
                for ((d, &dw), &wv) in dst.iter_mut().zip(d_w.row(r)).zip(w_s.row(r)) {
                    *d = dw * wv * (T::one() - wv);
                }
            }
            row += len;
        }
        for (ctx, d_bank) in tape.ctxs.iter().zip(d_banks) {
            if let (Some(cache), Some(d_bank)) = (&ctx.bank_cache, d_bank) {
                let dy = Mat::from_vec(1, d_bank.data.len(), d_bank.data);
                enc.local_feature.backward_cols(cache, &dy, &mut genc.local_feature, None);
            }
        }
        let d_att = enc
            .attention
            .backward_cols(att_cache, &d_logits, &mut genc.attention, warped.then_some(0..ray_dim));
        if let (Some(dx), Some(da)) = (d_x.as_mut(), d_att) {
            dx.add_assign(&da);
        }
    }

    let Some(d_x) = d_x else { return };
    let cfg = &arch.ray;
    let k = cfg.samples;
    let base = 3 * k;
    let mut d_raw = Mat::<T>::zeros(n, core.raw.cols);
    for r in 0..n {
        positional_encode_backward(core.raw.row(r), cfg.pe_freqs, cfg.include_input, d_x.row(r), d_raw.row_mut(r));
    }
    if arch.shoulder {
        let mut row = 0;
        for seg in &core.segments {
            let inv = tape.ctxs[seg.group].shoulder_inv.as_ref().expect("shoulder rotation");
            for r in row..row + seg.rays.1 - seg.rays.0 {
                let d = d_raw.row_mut(r);
                for i in 0..k {
                    let g = mat3_mul_t(inv, [d[base + 3 * i], d[base + 3 * i + 1], d[base + 3 * i + 2]]);
                    for c in 0..3 {
                        d[3 * i + c] = d[3 * i + c] + g[c];
                    }
                }
            }
            row += seg.rays.1 - seg.rays.0;
        }
    }

    let split = 3 * pe_factor(arch.warp_pe_freqs, true);
    let latent_cols = split..split + arch.latent_dim;
    for wt in &core.warps {
        let len = wt.points.len() / k;
        let mut d_params = Mat::<T>::zeros(wt.points.len(), WARP_OUTPUTS);
        for r in 0..len {
            let d = d_raw.row(wt.row + r);
            for i in 0..k {
                let j = r * k + i;
                let mut g = [d[3 * i], d[3 * i + 1], d[3 * i + 2]];
                if wt.penalty > 0.0 {
                    let (_, dq) = charbonnier(wt.params[j].apply(wt.points[j]), wt.points[j]);
                    for c in 0..3 {
                        g[c] = g[c] + T::from_f64_lossy(wt.penalty * dq[c]);
                    }
                }
                let dp = wt.params[j].apply_backward(wt.points[j], g).to_array();
                d_params.row_mut(j).copy_from_slice(&dp);
            }
        }
        let d_input = bundle
            .warp
            .backward_cols(&wt.cache, &d_params, &mut grad.warp, Some(latent_cols.clone()))
            .expect("latent gradient");
        let frame = tape.ctxs[wt.group].latent.expect("warped frame has a latent");
        let dim = arch.latent_dim;
        let dst = &mut grad.latents.data[frame * dim..(frame + 1) * dim];
        for r in 0..d_input.rows {
            for (a, &b) in dst.iter_mut().zip(d_input.row(r)) {
                *a = *a + b;
            }
        }
    }
}

/// Forward state of a batch of whole frames through the LR render and SR.
pub struct FrameTape<T> {
    rays: RayTape<T>,
    sr: Vec<SrCache<T>>,
    lr_hw: (usize, usize),
}

/// Renders each group as an `h × w` LR image (rays row-major) and upsamples
/// it. Returns unclamped `3 × 4h × 4w` maps.
pub fn forward_frames_train<T: Real>(
    bundle: &ModelBundle<T>,
    groups: &[RayGroup],
    lr_hw: (usize, usize),
    warp: bool,
) -> Result<(Vec<FeatureMap<T>>, FrameTape<T>)> {
    let (h, w) = lr_hw;
    for g in groups {
        ensure!(g.rays.len() == h * w, Validation, "frame has {} rays, expected {}×{}", g.rays.len(), h, w);
    }
    let (rgb, rays) = forward_rays_train(bundle, groups, warp)?;
    let mut outs = Vec::with_capacity(groups.len());
    let mut sr = Vec::with_capacity(groups.len());
    for f in 0..groups.len() {
        let lr = rows_to_map(&rgb.data[3 * f * h * w..3 * (f + 1) * h * w], h, w);
        let (y, cache) = bundle.sr.forward_cached(&lr);
        EvalCounters::add(&bundle.counters.sr_passes, 1);
        outs.push(y);
        sr.push(cache);
    }
    Ok((outs, FrameTape { rays, sr, lr_hw }))
}

/// Scale below which a warp displacement costs almost nothing.
pub const DISPLACEMENT_EPS: f64 = 1e-4;

/// `sqrt(‖a − b‖² + ε²) − ε` and its gradient with respect to `a`.
fn charbonnier<T: Real>(a: V3<T>, b: V3<T>) -> (f64, [f64; 3]) {
    let d = [0, 1, 2].map(|c| (a[c] - b[c]).to_f64().unwrap_or(0.0));
    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + DISPLACEMENT_EPS * DISPLACEMENT_EPS).sqrt();
    (r - DISPLACEMENT_EPS, d.map(|x| x / r))
}

impl<T: Real> FrameTape<T> {
    /// Adds `weight ×` the batch mean, over frames, of the mean robust
    /// displacement `ρ(‖q′ − q‖)` of each warped frame to the objective.
    /// Unwarped frames count as zero. Returns the penalty value; its gradient
    /// is applied by `backward_frames`.
    pub fn penalize_displacement(&mut self, weight: f64) -> f64 {
        let frames = self.sr.len() as f64;
        let mut total = 0.0;
        for wt in &mut self.rays.core.warps {
            let n = wt.points.len() as f64;
            wt.penalty = weight / (frames * n);
            total += wt.points.iter().zip(&wt.params).map(|(&q, p)| charbonnier(p.apply(q), q).0).sum::<f64>() * wt.penalty;
        }
        total
    }
}

pub fn backward_frames<T: Real>(
    bundle: &ModelBundle<T>,
    tape: &FrameTape<T>,
    d_out: &[FeatureMap<T>],
    grad: &mut ModelBundle<T>,
) {
    assert_eq!(d_out.len(), tape.sr.len());
    let (h, w) = tape.lr_hw;
    let mut d_rgb = Mat::zeros(tape.rays.num_rays(), 3);
    for (f, (cache, dy)) in tape.sr.iter().zip(d_out).enumerate() {
        let d_lr = bundle.sr.backward(cache, dy, &mut grad.sr);
        d_rgb.data[3 * f * h * w..3 * (f + 1) * h * w].copy_from_slice(&map_to_rows(&d_lr));
    }
    backward_rays(bundle, &tape.rays, &d_rgb, grad);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expression_encoder::{expression_representation, AttentionWeights};
    use crate::model::{ArchConfig, ExpressionMode};
    use crate::nelf_renderer::{assemble_input, nelf_forward};
    use crate::nn::Module;
    use crate::ray_geometry::{point_concat, positional_encode, shoulder_ray_rep, CameraPose, Vec3};
    use crate::warping_field::warp_ray_rep;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_arch() -> ArchConfig {
        let mut a = ArchConfig::desk();
        a.ray.samples = 3;
        a.ray.pe_freqs = 2;
        a.encoder_width = 6;
        a.bank_rows = 4;
        a.bank_dim = 5;
        a.nelf_width = 7;
        a.nelf_blocks = 2;
        a.sr_width = 3;
        a.sr_blocks = 1;
        a.warp_width = 5;
        a.warp_pe_freqs = 2;
        a.latent_dim = 3;
        a.latent_count = 3;
        a
    }

    fn rays(seed: u64, n: usize) -> Vec<Ray> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let o = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 2.7);
                let d = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), -1.0);
                Ray::new(o, d).unwrap()
            })
            .collect()
    }

    fn perturb_all(b: &mut ModelBundle<f64>, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in b.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.gen_range(-scale..scale));
        }
    }

    fn groups(shoulder: bool) -> Vec<RayGroup> {
        let rs = shoulder.then(|| crate::ray_geometry::axis_angle(Vec3::new(0.2, 1.0, 0.1), 0.3));
        vec![
            RayGroup::new(vec![0.3, -0.5, 0.1, 0.9], rays(1, 5), rs, Some(0)),
            RayGroup::new(vec![-0.2, 0.4, 0.7, -0.3], rays(2, 4), rs, None),
            RayGroup::new(vec![0.0, 0.1, -0.6, 0.2], rays(3, 3), rs, Some(2)),
        ]
    }

    /// Per-ray evaluation through the single-item operations.
    fn per_ray_oracle(b: &ModelBundle<f64>, gs: &[RayGroup], warp: bool) -> Vec<f64> {
        let mut out = Vec::new();
        let cfg = &b.arch.ray;
        for g in gs {
            for ray in &g.rays {
                let mut rep = match (warp, g.frame_index) {
                    (true, Some(_)) => warp_ray_rep(ray, cfg, g.frame_index, b).unwrap().values,
                    _ => point_concat(ray, cfg).unwrap().values,
                };
                if b.arch.shoulder {
                    let inv = g.shoulder_rotation.unwrap().try_inverse().unwrap();
                    let extra: Vec<f64> = rep
                        .chunks_exact(3)
                        .flat_map(|p| {
                            let q = inv * Vec3::new(p[0], p[1], p[2]);
                            [q.x, q.y, q.z]
                        })
                        .collect();
                    rep.extend(extra);
                }
                let x = positional_encode(&rep, cfg.pe_freqs, cfg.include_input);
                let expr = match &b.encoder {
                    Some(enc) => {
                        let z = enc.local_feature_bank(&g.code).unwrap();
                        let w = enc.spatial_attention(&x, &g.code).unwrap();
                        expression_representation(&AttentionWeights(w.0), &z).unwrap()
                    }
                    None => positional_encode(&g.code, b.arch.expr_pe_freqs, true),
                };
                out.extend(nelf_forward(&assemble_input(&x, &expr), &b.nelf, &b.counters).unwrap());
            }
        }
        out
    }

    #[test]
    fn batched_forward_matches_per_ray_ops() {
        for (mode, shoulder, warp) in [
            (ExpressionMode::Attention, false, false),
            (ExpressionMode::Attention, true, true),
            (ExpressionMode::RawCode, false, true),
            (ExpressionMode::RawCode, true, false),
        ] {
            let mut arch = small_arch();
            arch.expression = mode;
            arch.shoulder = shoulder;
            let mut b = ModelBundle::<f64>::new(&arch, 5).unwrap();
            perturb_all(&mut b, 6, 0.2);
            let gs = groups(shoulder);
            let (rgb, _) = forward_rays_train(&b, &gs, warp).unwrap();
            let oracle = per_ray_oracle(&b, &gs, warp);
            for (a, o) in rgb.data.iter().zip(&oracle) {
                assert!((a - o).abs() < 1e-10, "{mode:?} shoulder {shoulder} warp {warp}");
            }
            let inf = forward_rays(&b, &gs).unwrap();
            if !warp {
                assert_eq!(inf.data, rgb.data);
            }
        }
    }

    #[test]
    fn bank_is_computed_once_per_frame() {
        let b = ModelBundle::<f64>::new(&small_arch(), 1).unwrap();
        let gs = vec![RayGroup::new(vec![0.1; 4], rays(4, 9000), None, None)];
        let out = forward_rays(&b, &gs).unwrap();
        assert_eq!(out.rows, 9000);
        let s = b.counters.snapshot();
        assert_eq!((s.local_feature_frames, s.nelf_rays, s.attention_rays, s.warp_points), (1, 9000, 9000, 0));
    }

    #[test]
    fn warping_only_touches_real_frames() {
        let b = ModelBundle::<f64>::new(&small_arch(), 1).unwrap();
        let gs = groups(false);
        forward_rays_train(&b, &gs[1..2], true).unwrap();
        assert_eq!(b.counters.snapshot().warp_points, 0);
        forward_rays_train(&b, &gs, true).unwrap();
        assert_eq!(b.counters.snapshot().warp_points, (5 + 3) * 3);
    }

    #[test]
    fn missing_shoulder_rotation_is_rejected() {
        let mut arch = small_arch();
        arch.shoulder = true;
        let b = ModelBundle::<f64>::new(&arch, 1).unwrap();
        assert!(forward_rays(&b, &groups(false)).is_err());
        let cam = CameraPose::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 4.0, 4, 4).unwrap();
        let r = shoulder_ray_rep(&cam.ray_through(1.0, 1.0), &Mat3::identity(), &arch.ray).unwrap();
        assert_eq!(r.values.len(), arch.ray.raw_len(true));
    }

    fn sq_loss(out: &Mat<f64>, target: &[f64]) -> f64 {
        out.data.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5
    }

    fn check_ray_gradients(mode: ExpressionMode, shoulder: bool, warp: bool) {
        let mut arch = small_arch();
        arch.expression = mode;
        arch.shoulder = shoulder;
        let mut b = ModelBundle::<f64>::new(&arch, 8).unwrap();
        perturb_all(&mut b, 9, 0.1);
        let gs = groups(shoulder);
        let target: Vec<f64> = (0..36).map(|i| (i as f64 * 0.3).sin()).collect();
        let (rgb, tape) = forward_rays_train(&b, &gs, warp).unwrap();
        let d = Mat::from_vec(rgb.rows, 3, rgb.data.iter().zip(&target).map(|(a, t)| a - t).collect());
        let mut grad = b.zeros_like();
        backward_rays(&b, &tape, &d, &mut grad);
        let loss = |m: &ModelBundle<f64>| sq_loss(&forward_rays_train(m, &gs, warp).unwrap().0, &target);
        let mut probe = b.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let count = probe.tensors().len();
        for ti in 0..count {
            let len = probe.tensors()[ti].len();
            for _ in 0..3 {
                let idx = rng.gen_range(0..len);
                let h = 1e-6;
                let orig = probe.tensors()[ti].data[idx];
                probe.tensors_mut()[ti].data[idx] = orig + h;
                let up = loss(&probe);
                probe.tensors_mut()[ti].data[idx] = orig - h;
                let dn = loss(&probe);
                probe.tensors_mut()[ti].data[idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grad.tensors()[ti].data[idx];
                let name = &grad.tensors()[ti].name;
                assert!((fd - an).abs() <= 1e-6 + 1e-5 * fd.abs(), "{mode:?} {name}[{idx}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn ray_gradients_attention() {
        check_ray_gradients(ExpressionMode::Attention, false, false);
    }

    #[test]
    fn ray_gradients_attention_warp_shoulder() {
        check_ray_gradients(ExpressionMode::Attention, true, true);
    }

    #[test]
    fn ray_gradients_raw_code_warp() {
        check_ray_gradients(ExpressionMode::RawCode, false, true);
    }

    #[test]
    fn frame_gradients_reach_sr() {
        let arch = small_arch();
        let mut b = ModelBundle::<f64>::new(&arch, 12).unwrap();
        perturb_all(&mut b, 13, 0.1);
        let cam = CameraPose::look_at(Vec3::new(0.2, 0.1, 2.8), Vec3::zeros(), Vec3::y(), 3.0, 2, 3).unwrap();
        let rays = crate::ray_geometry::generate_rays(&cam).unwrap();
        let gs = vec![
            RayGroup::new(vec![0.1, 0.2, 0.3, 0.4], rays.clone(), None, None),
            RayGroup::new(vec![-0.4, 0.0, 0.2, 0.1], rays, None, None),
        ];
        let target: Vec<f64> = (0..2 * 3 * 8 * 12).map(|i| (i as f64 * 0.07).cos() * 0.5).collect();
        let loss = |m: &ModelBundle<f64>| -> f64 {
            let (outs, _) = forward_frames_train(m, &gs, (3, 2), false).unwrap();
            outs.iter().flat_map(|o| o.data.iter()).zip(&target).map(|(a, t)| (a - t) * (a - t)).sum::<f64>() * 0.5
        };
        let (outs, tape) = forward_frames_train(&b, &gs, (3, 2), false).unwrap();
        let mut off = 0;
        let d: Vec<FeatureMap<f64>> = outs
            .iter()
            .map(|o| {
                let data = o.data.iter().zip(&target[off..]).map(|(a, t)| a - t).collect();
                off += o.data.len();
                FeatureMap { data, ..o.clone() }
            })
            .collect();
        let mut grad = b.zeros_like();
        backward_frames(&b, &tape, &d, &mut grad);
        let mut probe = b.clone();
        let count = probe.tensors().len();
        for ti in 0..count {
            let len = probe.tensors()[ti].len();
            let idx = len / 2;
            let orig = probe.tensors()[ti].data[idx];
            probe.tensors_mut()[ti].data[idx] = orig + 1e-6;
            let up = loss(&probe);
            probe.tensors_mut()[ti].data[idx] = orig - 1e-6;
            let dn = loss(&probe);
            probe.tensors_mut()[ti].data[idx] = orig;
            let fd = (up - dn) / 2e-6;
            let an = grad.tensors()[ti].data[idx];
            assert!((fd - an).abs() <= 1e-6 + 1e-5 * fd.abs(), "{}: {fd} vs {an}", grad.tensors()[ti].name);
        }
    }

    #[test]
    fn displacement_penalty_gradient_and_identity() {
        let arch = small_arch();
        let cam = CameraPose::look_at(Vec3::new(0.2, 0.1, 2.8), Vec3::zeros(), Vec3::y(), 3.0, 2, 3).unwrap();
        let rays = crate::ray_geometry::generate_rays(&cam).unwrap();
        let gs = vec![
            RayGroup::new(vec![0.1, 0.2, 0.3, 0.4], rays.clone(), None, Some(1)),
            RayGroup::new(vec![-0.4, 0.0, 0.2, 0.1], rays, None, None),
        ];
        let penalty = |m: &ModelBundle<f64>| forward_frames_train(m, &gs, (3, 2), true).unwrap().1.penalize_displacement(0.7);

        let fresh = ModelBundle::<f64>::new(&arch, 12).unwrap();
        assert_eq!(penalty(&fresh), 0.0);

        let mut b = fresh;
        perturb_all(&mut b, 14, 0.1);
        let (outs, mut tape) = forward_frames_train(&b, &gs, (3, 2), true).unwrap();
        assert!(tape.penalize_displacement(0.7) > 0.0);
        let zero: Vec<FeatureMap<f64>> =
            outs.iter().map(|o| FeatureMap { data: vec![0.0; o.data.len()], ..o.clone() }).collect();
        let mut grad = b.zeros_like();
        backward_frames(&b, &tape, &zero, &mut grad);
        let mut probe = b.clone();
        let ti = probe.tensors().iter().position(|t| t.name.starts_with("warp")).unwrap();
        for (k, t) in probe.tensors().iter().enumerate() {
            if !t.name.starts_with("warp") && t.name != "latents.table" {
                assert!(grad.tensors()[k].data.iter().all(|&g| g == 0.0), "{}", t.name);
            }
        }
        let latents = probe.tensors().len() - 1;
        for ti in [ti, latents] {
            let len = probe.tensors()[ti].len();
            for idx in [0, len / 2, len - 1] {
                let orig = probe.tensors()[ti].data[idx];
                probe.tensors_mut()[ti].data[idx] = orig + 1e-6;
                let up = penalty(&probe);
                probe.tensors_mut()[ti].data[idx] = orig - 1e-6;
                let dn = penalty(&probe);
                probe.tensors_mut()[ti].data[idx] = orig;
                let fd = (up - dn) / 2e-6;
                let an = grad.tensors()[ti].data[idx];
                assert!((fd - an).abs() <= 1e-8 + 1e-5 * fd.abs(), "{}[{idx}]: {fd} vs {an}", grad.tensors()[ti].name);
            }
        }
    }
}
