//! Image metrics, analytic FLOPs accounting and render benchmarking.

use std::time::Instant;

use serde::Serialize;

use crate::distillation_data::ExpressionFrame;
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::linalg::Real;
use crate::model::{ArchConfig, ExpressionMode, ModelBundle, SR_SCALE};
use crate::nelf_renderer::{image_to_map, render};
use crate::nn::ResMlpConfig;
use crate::pipeline::{forward_rays, RayGroup};
use crate::ray_geometry::{generate_rays_with, CameraPose, RotationCheck};
use crate::training::PerceptualExtractor;

pub const PSNR_CAP: f64 = 99.0;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    ensure!(
        a.height == b.height && a.width == b.width,
        Validation,
        "image sizes differ: {}×{} vs {}×{}",
        a.height,
        a.width,
        b.height,
        b.width
    );
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// `10·log₁₀(max² / MSE)`, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * tmp[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, dynamic range 1),
/// averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    ensure!(
        a.height >= SSIM_WINDOW && a.width >= SSIM_WINDOW,
        Validation,
        "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
        a.height,
        a.width
    );
    let k = gaussian_window();
    let (h, w) = (a.height, a.width);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data[3 * i + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data[3 * i + c] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let (mu_a, ..) = filter_valid(&pa, h, w, &k);
        let (mu_b, ..) = filter_valid(&pb, h, w, &k);
        let (saa, ..) = filter_valid(&prod(&pa, &pa), h, w, &k);
        let (sbb, ..) = filter_valid(&prod(&pb, &pb), h, w, &k);
        let (sab, ho, wo) = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..ho * wo {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / (ho * wo) as f64;
    }
    // Identical inputs give exactly one per window up to rounding.
    if a == b {
        return Ok(1.0);
    }
    Ok(total / 3.0)
}

/// Stage-averaged mean squared feature distance under the fixed extractor.
pub fn perceptual_distance(a: &Image, b: &Image, extractor: &PerceptualExtractor<f64>) -> Result<f64> {
    check_dims(a, b)?;
    let fa = extractor.features(&image_to_map(a));
    let fb = extractor.features(&image_to_map(b));
    let mut s = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        s += x.data.iter().zip(&y.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.data.len() as f64;
    }
    Ok(s / fa.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean: FrameMetrics,
}

impl MetricReport {
    pub fn from_pairs(pairs: &[(Image, Image)]) -> Result<Self> {
        ensure!(!pairs.is_empty(), Validation, "no image pairs to evaluate");
        let ex = PerceptualExtractor::<f64>::default();
        let frames = pairs
            .iter()
            .map(|(a, b)| {
                Ok(FrameMetrics {
                    psnr: psnr(a, b, 1.0)?,
                    ssim: ssim(a, b)?,
                    perceptual: perceptual_distance(a, b, &ex)?,
                    mse: mse(a, b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = frames.len() as f64;
        let mean = FrameMetrics {
            psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
            ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
            perceptual: frames.iter().map(|f| f.perceptual).sum::<f64>() / n,
            mse: frames.iter().map(|f| f.mse).sum::<f64>() / n,
        };
        Ok(MetricReport { frames, mean })
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let m = &self.mean;
        format!(
            "frames={}\npsnr={:.6}\nssim={:.6}\nperceptual={:.8}\nmse={:.8}\n",
            self.frames.len(),
            m.psnr,
            m.ssim,
            m.perceptual,
            m.mse
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim,perceptual,mse\n");
        for (i, f) in self.frames.iter().enumerate() {
            s.push_str(&format!("{i},{:.6},{:.6},{:.8},{:.8}\n", f.psnr, f.ssim, f.perceptual, f.mse));
        }
        s
    }
}

/// Full model render of a frame at its own camera.
pub fn render_frame<T: Real>(bundle: &ModelBundle<T>, frame: &ExpressionFrame) -> Result<Image> {
    render(&frame.e, &frame.camera, frame.shoulder_rotation.as_ref(), bundle)
}

/// Light-field-only render at full resolution (no SR), clamped to [0, 1].
pub fn render_nelf_full<T: Real>(
    bundle: &ModelBundle<T>,
    e: &[f64],
    camera: &CameraPose,
    shoulder: Option<&crate::ray_geometry::Mat3>,
) -> Result<Image> {
    let rays = generate_rays_with(camera, RotationCheck::Relaxed)?;
    let rgb = forward_rays(bundle, &[RayGroup::new(e.to_vec(), rays, shoulder.copied(), None)])?;
    let mut img = Image::from_vec(camera.height, camera.width, rgb.data.iter().map(|v| v.to_f32_lossy()).collect());
    img.clamp01();
    Ok(img)
}

/// Renders every frame and compares it with the stored image.
pub fn evaluate_frames<T: Real>(bundle: &ModelBundle<T>, frames: &[ExpressionFrame]) -> Result<MetricReport> {
    let pairs = frames
        .iter()
        .map(|f| Ok((render_frame(bundle, f)?, f.image.clone())))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_pairs(&pairs)
}

/// Multiply-accumulate count of one named layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMacs {
    pub network: &'static str,
    pub layer: String,
    /// MACs attributed to one output pixel.
    pub macs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    pub layers: Vec<LayerMacs>,
    pub local_feature: f64,
    pub attention: f64,
    pub nelf: f64,
    pub sr: f64,
    pub total_macs: f64,
    pub total_flops: f64,
}

impl FlopsBreakdown {
    fn from_layers(layers: Vec<LayerMacs>) -> Self {
        let sum = |n: &str| layers.iter().filter(|l| l.network == n).map(|l| l.macs).sum::<f64>();
        let (local_feature, attention, nelf, sr) = (sum("local_feature"), sum("attention"), sum("nelf"), sum("sr"));
        let total_macs = layers.iter().map(|l| l.macs).sum::<f64>();
        FlopsBreakdown { layers, local_feature, attention, nelf, sr, total_macs, total_flops: 2.0 * total_macs }
    }

    pub fn to_text(&self) -> String {
        format!(
            "local_feature_macs={:.3}\nattention_macs={:.3}\nnelf_macs={:.3}\nsr_macs={:.3}\ntotal_macs={:.3}\ntotal_flops={:.3}\ntotal_mmacs={:.6}\n",
            self.local_feature, self.attention, self.nelf, self.sr, self.total_macs, self.total_flops, self.total_macs / 1e6
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("network,layer,macs_per_pixel\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{:.6}\n", l.network, l.layer, l.macs));
        }
        s
    }
}

/// Placement of the SR residual body.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SrBodyPlacement {
    /// At low resolution, before both upsamplers.
    #[default]
    Deferred,
    /// Hypothetical variant running the body at output resolution.
    Upfront,
}

fn mlp_layers(network: &'static str, cfg: &ResMlpConfig, per_pixel: f64, out: &mut Vec<LayerMacs>) {
    let mut push = |layer: String, i: usize, o: usize| out.push(LayerMacs { network, layer, macs: (i * o) as f64 * per_pixel });
    push("head".into(), cfg.input, cfg.width);
    for b in 0..cfg.blocks {
        push(format!("block{b}.0"), cfg.width, cfg.width);
        push(format!("block{b}.1"), cfg.width, cfg.width);
    }
    push("tail".into(), cfg.width, cfg.output);
}

/// Per-output-pixel MAC counts for rendering `height × width` frames.
///
/// Per-ray networks run on the low-resolution grid, so their cost is divided
/// by the SR scale squared; the local feature network runs once per frame.
/// Convolutions cost `in·out·k²` per output position of their own grid, and
/// transposed convolutions are counted at output resolution divided by the
/// stride squared.
pub fn flops_per_pixel(arch: &ArchConfig, height: usize, width: usize, body: SrBodyPlacement) -> Result<FlopsBreakdown> {
    arch.validate()?;
    ensure!(
        height % SR_SCALE == 0 && width % SR_SCALE == 0 && height > 0 && width > 0,
        Validation,
        "output size {height}×{width} must be a positive multiple of {SR_SCALE}"
    );
    let per_ray = 1.0 / (SR_SCALE * SR_SCALE) as f64;
    let mut layers = Vec::new();
    if arch.expression == ExpressionMode::Attention {
        mlp_layers("local_feature", &arch.local_feature_mlp(), 1.0 / (height * width) as f64, &mut layers);
        mlp_layers("attention", &arch.attention_mlp(), per_ray, &mut layers);
        layers.push(LayerMacs {
            network: "attention",
            layer: "bank_product".into(),
            macs: (arch.bank_rows * arch.bank_dim) as f64 * per_ray,
        });
    }
    mlp_layers("nelf", &arch.nelf_mlp(), per_ray, &mut layers);

    let c = arch.sr_width;
    let k2 = 9.0;
    let body_grid = match body {
        SrBodyPlacement::Deferred => per_ray,
        SrBodyPlacement::Upfront => 1.0,
    };
    let mut sr = |layer: String, macs: f64| layers.push(LayerMacs { network: "sr", layer, macs });
    sr("head".into(), (3 * c) as f64 * k2 * per_ray);
    for b in 0..arch.sr_blocks {
        sr(format!("block{b}.0"), (c * c) as f64 * k2 * body_grid);
        sr(format!("block{b}.1"), (c * c) as f64 * k2 * body_grid);
    }
    // Transposed conv: in·out·16 per output position, over stride² = 4.
    sr("up0".into(), (c * c * 16) as f64 / 4.0 * 0.25);
    sr("up1".into(), (c * c * 16) as f64 / 4.0);
    sr("out".into(), (c * 3) as f64 * k2);
    Ok(FlopsBreakdown::from_layers(layers))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub resolution: usize,
    pub timed_renders: usize,
    pub frame_ms: Vec<f64>,
    pub mean_ms: f64,
    pub mean_fps: f64,
    pub std_fps: f64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        format!(
            "resolution={}\ntimed_renders={}\nmean_ms={:.4}\nmean_fps={:.4}\nstd_fps={:.4}\n",
            self.resolution, self.timed_renders, self.mean_ms, self.mean_fps, self.std_fps
        )
    }
}

/// Times `iters` calls of `render_once` after `warmup` untimed calls.
pub fn bench_with(resolution: usize, warmup: usize, iters: usize, mut render_once: impl FnMut() -> Result<()>) -> Result<BenchReport> {
    ensure!(iters >= 1, Validation, "bench needs at least one timed iteration");
    for _ in 0..warmup {
        render_once()?;
    }
    let mut frame_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        render_once()?;
        // Guard against timer resolution on tiny frames.
        frame_ms.push((t.elapsed().as_secs_f64() * 1e3).max(1e-6));
    }
    let fps: Vec<f64> = frame_ms.iter().map(|ms| 1e3 / ms).collect();
    let n = iters as f64;
    let mean_fps = fps.iter().sum::<f64>() / n;
    let std_fps = (fps.iter().map(|f| (f - mean_fps).powi(2)).sum::<f64>() / n).sqrt();
    let mean_ms = frame_ms.iter().sum::<f64>() / n;
    Ok(BenchReport { resolution, timed_renders: iters, frame_ms, mean_ms, mean_fps, std_fps })
}

/// Benchmarks full renders of a square `resolution²` frame.
pub fn bench_fps<T: Real>(bundle: &ModelBundle<T>, resolution: usize, warmup: usize, iters: usize) -> Result<BenchReport> {
    let camera = CameraPose::look_at(
        crate::ray_geometry::Vec3::new(0.0, 0.0, 2.75),
        crate::ray_geometry::Vec3::zeros(),
        crate::ray_geometry::Vec3::y(),
        1.07 * resolution as f64,
        resolution,
        resolution,
    )?;
    let e = vec![0.0; bundle.arch.expr_dim];
    let shoulder = bundle.arch.shoulder.then(crate::ray_geometry::Mat3::identity);
    bench_with(resolution, warmup, iters, || render(&e, &camera, shoulder.as_ref(), bundle).map(|_| ()))
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    let slope = sxy / sxx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    1.0 - ss_res / syy
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let zero = Image::zeros(2, 2);
        let one = Image::from_vec(2, 2, vec![1.0; 12]);
        assert_eq!(psnr(&zero, &one, 1.0).unwrap(), 0.0);
        let b = random_image(8, 8, 2);
        let mut s = 0.0;
        for i in 0..a.data.len() {
            let d = a.data[i] as f64 - b.data[i] as f64;
            s += d * d;
        }
        let expect = 10.0 * (1.0 / (s / a.data.len() as f64)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &Image::zeros(8, 7), 1.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(16, 16, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let c = Image::from_vec(16, 16, vec![0.3; 768]);
        assert_eq!(ssim(&c, &c.clone()).unwrap(), 1.0);
        // Binary checker pattern against its complement.
        let mut bin = Image::zeros(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let v = if (x / 2 + y / 3) % 2 == 0 { 1.0 } else { 0.0 };
                bin.set_pixel(y, x, [v, v, v]);
            }
        }
        let mut inv = bin.clone();
        inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim(&bin, &inv).unwrap() < 0.5);
        let b = random_image(16, 16, 4);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&random_image(10, 16, 1), &random_image(10, 16, 2)).is_err());
    }

    /// Direct (non-separable) window evaluation for one channel.
    #[test]
    fn ssim_matches_direct_window_sum() {
        let a = random_image(13, 12, 5);
        let b = random_image(13, 12, 6);
        let g = gaussian_window();
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut count = 0.0;
            for y0 in 0..=13 - 11 {
                for x0 in 0..=12 - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = g[i] * g[j];
                            let pa = a.pixel(y0 + i, x0 + j)[c] as f64;
                            let pb = b.pixel(y0 + i, x0 + j)[c] as f64;
                            ma += wgt * pa;
                            mb += wgt * pb;
                            saa += wgt * pa * pa;
                            sbb += wgt * pb * pb;
                            sab += wgt * pa * pb;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    acc += (2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2)
                        / ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
                    count += 1.0;
                }
            }
            total += acc / count;
        }
        assert!((ssim(&a, &b).unwrap() - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_dense_layer_counts_in_times_out() {
        let mut out = Vec::new();
        mlp_layers("nelf", &ResMlpConfig { input: 4, width: 2, blocks: 0, output: 0, long_skip: false }, 1.0, &mut out);
        assert_eq!(out[0].macs, 8.0);
    }

    #[test]
    fn full_scale_total_is_in_band() {
        let f = flops_per_pixel(&ArchConfig::full(), 512, 512, SrBodyPlacement::Deferred).unwrap();
        assert!((40e3..=120e3).contains(&f.total_macs), "{}", f.total_macs);
        assert_eq!(f.total_flops, 2.0 * f.total_macs);
        let parts = f.local_feature + f.attention + f.nelf + f.sr;
        assert!((parts - f.total_macs).abs() < 1e-6);
    }

    #[test]
    fn upfront_body_costs_sixteen_times_more() {
        let arch = ArchConfig::full();
        let d = flops_per_pixel(&arch, 512, 512, SrBodyPlacement::Deferred).unwrap();
        let u = flops_per_pixel(&arch, 512, 512, SrBodyPlacement::Upfront).unwrap();
        let body = |f: &FlopsBreakdown| f.layers.iter().filter(|l| l.layer.starts_with("block") && l.network == "sr").map(|l| l.macs).sum::<f64>();
        assert_eq!(body(&u), 16.0 * body(&d));
    }

    #[test]
    fn bench_counts_timed_renders() {
        let mut calls = 0;
        let r = bench_with(8, 2, 3, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 5);
        assert_eq!(r.timed_renders, 3);
        assert!(r.mean_fps > 0.0);
        assert!(bench_with(8, 0, 0, || Ok(())).is_err());
    }

    #[test]
    fn r2_of_exact_line_is_one() {
        assert!((linear_r2(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!(linear_r2(&[1.0, 2.0, 3.0], &[1.0, 3.0, 1.0]) < 0.1);
    }
}
