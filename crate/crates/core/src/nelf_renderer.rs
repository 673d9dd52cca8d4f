//! Light-field backbone, the deferred-upsampling SR network and the full
//! single-pass render path.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::image::Image;
use crate::linalg::{Mat, Real};
use crate::model::{EvalCounters, ModelBundle, SR_SCALE};
use crate::nn::{leaky_backward_inplace, leaky_inplace, Conv2d, ConvTranspose2d, FeatureMap, Module, ResMlp, Tensor};
use crate::pipeline::{forward_rays, RayGroup};
use crate::ray_geometry::{generate_rays_with, CameraPose, Mat3, RotationCheck};

/// `I = [I_ray | I_exp]`.
pub fn assemble_input<T: Real>(ray: &[T], expr: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(ray.len() + expr.len());
    out.extend_from_slice(ray);
    out.extend_from_slice(expr);
    out
}

/// RGB of a single assembled input.
pub fn nelf_forward<T: Real>(input: &[T], nelf: &ResMlp<T>, counters: &EvalCounters) -> Result<[T; 3]> {
    ensure!(
        input.len() == nelf.input_dim(),
        Validation,
        "light-field input has {} entries, network expects {}",
        input.len(),
        nelf.input_dim()
    );
    let y = nelf.forward(&Mat::from_vec(1, input.len(), input.to_vec()));
    EvalCounters::add(&counters.nelf_rays, 1);
    Ok([y.data[0], y.data[1], y.data[2]])
}

/// Conv head, residual conv body at input resolution, then two ×2 transposed
/// convolutions and an output conv.
#[derive(Clone, Debug, PartialEq)]
pub struct SrNet<T> {
    pub head: Conv2d<T>,
    pub blocks: Vec<[Conv2d<T>; 2]>,
    pub up: [ConvTranspose2d<T>; 2],
    pub out: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct SrCache<T> {
    input_hw: (usize, usize),
    head_cols: Mat<T>,
    head: FeatureMap<T>,
    blocks: Vec<SrBlockCache<T>>,
    body: FeatureMap<T>,
    up: [FeatureMap<T>; 2],
    out_cols: Mat<T>,
}

#[derive(Clone, Debug)]
struct SrBlockCache<T> {
    cols1: Mat<T>,
    first: FeatureMap<T>,
    cols2: Mat<T>,
    second: FeatureMap<T>,
}

impl<T: Real> SrNet<T> {
    pub fn new<R: Rng>(width: usize, blocks: usize, rng: &mut R) -> Self {
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let damp = 0.5 / (blocks.max(1) as f64).sqrt();
        let conv = |name: &str, i: usize, o: usize, std: f64, rng: &mut R| Conv2d::new(name, i, o, 3, 1, 1, std, rng);
        let head = conv("sr.head", 3, width, he(27), rng);
        let blocks = (0..blocks)
            .map(|b| {
                [
                    conv(&format!("sr.block{b}.0"), width, width, he(9 * width), rng),
                    conv(&format!("sr.block{b}.1"), width, width, he(9 * width) * damp, rng),
                ]
            })
            .collect();
        // Each transposed-conv output sees 4 taps per input channel.
        let up = [
            ConvTranspose2d::new("sr.up0", width, width, he(4 * width), rng),
            ConvTranspose2d::new("sr.up1", width, width, he(4 * width), rng),
        ];
        let out = conv("sr.out", width, 3, (1.0 / (9 * width) as f64).sqrt(), rng);
        SrNet { head, blocks, up, out }
    }

    pub fn width(&self) -> usize {
        self.head.out_channels()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, SrCache<T>) {
        let (mut head, head_cols) = self.head.forward(x);
        leaky_inplace(&mut head.data);
        let mut h = head.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for [c1, c2] in &self.blocks {
            let (mut first, cols1) = c1.forward(&h);
            leaky_inplace(&mut first.data);
            let (mut second, cols2) = c2.forward(&first);
            leaky_inplace(&mut second.data);
            h.add_assign(&second);
            blocks.push(SrBlockCache { cols1, first, cols2, second });
        }
        h.add_assign(&head);
        let mut u0 = self.up[0].forward(&h);
        leaky_inplace(&mut u0.data);
        let mut u1 = self.up[1].forward(&u0);
        leaky_inplace(&mut u1.data);
        let (y, out_cols) = self.out.forward(&u1);
        let cache = SrCache { input_hw: (x.height, x.width), head_cols, head, blocks, body: h, up: [u0, u1], out_cols };
        (y, cache)
    }

    /// Backpropagates `dy`, accumulating into `grad`; returns the input gradient.
    pub fn backward(&self, cache: &SrCache<T>, dy: &FeatureMap<T>, grad: &mut SrNet<T>) -> FeatureMap<T> {
        let [u0, u1] = &cache.up;
        let mut d = self
            .out
            .backward((u1.height, u1.width), &cache.out_cols, dy, &mut grad.out, true)
            .expect("sr gradient");
        leaky_backward_inplace(&mut d.data, &u1.data);
        let mut d = self.up[1].backward(u0, &d, &mut grad.up[1], true).expect("sr gradient");
        leaky_backward_inplace(&mut d.data, &u0.data);
        let mut dh = self.up[0].backward(&cache.body, &d, &mut grad.up[0], true).expect("sr gradient");
        let skip = dh.clone();
        let hw = (cache.head.height, cache.head.width);
        for (i, [c1, c2]) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let [g1, g2] = &mut grad.blocks[i];
            let mut db = dh.clone();
            leaky_backward_inplace(&mut db.data, &bc.second.data);
            let mut da = c2.backward(hw, &bc.cols2, &db, g2, true).expect("sr gradient");
            leaky_backward_inplace(&mut da.data, &bc.first.data);
            let dx = c1.backward(hw, &bc.cols1, &da, g1, true).expect("sr gradient");
            dh.add_assign(&dx);
        }
        dh.add_assign(&skip);
        leaky_backward_inplace(&mut dh.data, &cache.head.data);
        self.head
            .backward(cache.input_hw, &cache.head_cols, &dh, &mut grad.head, true)
            .expect("sr gradient")
    }
}

impl<T: Real> Module<T> for SrNet<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = self.head.tensors();
        for [a, b] in &self.blocks {
            out.extend(a.tensors());
            out.extend(b.tensors());
        }
        out.extend(self.up[0].tensors());
        out.extend(self.up[1].tensors());
        out.extend(self.out.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let SrNet { head, blocks, up, out } = self;
        let mut v = head.tensors_mut();
        for [a, b] in blocks {
            v.extend(a.tensors_mut());
            v.extend(b.tensors_mut());
        }
        let [u0, u1] = up;
        v.extend(u0.tensors_mut());
        v.extend(u1.tensors_mut());
        v.extend(out.tensors_mut());
        v
    }
}

/// Row-major `n × 3` colours to a planar 3-channel map.
pub fn rows_to_map<T: Real>(rgb: &[T], height: usize, width: usize) -> FeatureMap<T> {
    let n = height * width;
    assert_eq!(rgb.len(), 3 * n);
    let mut data = vec![T::zero(); 3 * n];
    for p in 0..n {
        for c in 0..3 {
            data[c * n + p] = rgb[3 * p + c];
        }
    }
    FeatureMap { channels: 3, height, width, data }
}

/// Planar 3-channel map to row-major `n × 3` colours.
pub fn map_to_rows<T: Real>(map: &FeatureMap<T>) -> Vec<T> {
    assert_eq!(map.channels, 3);
    let n = map.height * map.width;
    let mut out = vec![T::zero(); 3 * n];
    for p in 0..n {
        for c in 0..3 {
            out[3 * p + c] = map.data[c * n + p];
        }
    }
    out
}

pub fn image_to_map<T: Real>(img: &Image) -> FeatureMap<T> {
    let rgb: Vec<T> = img.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    rows_to_map(&rgb, img.height, img.width)
}

pub fn map_to_image<T: Real>(map: &FeatureMap<T>) -> Image {
    let rows = map_to_rows(map);
    Image::from_vec(map.height, map.width, rows.into_iter().map(|v| v.to_f32_lossy()).collect())
}

/// Low-resolution render (not clamped). The camera must already be at LR resolution.
pub fn render_lr<T: Real>(
    e: &[f64],
    camera: &CameraPose,
    shoulder_rotation: Option<&Mat3>,
    bundle: &ModelBundle<T>,
) -> Result<Image> {
    let rays = generate_rays_with(camera, RotationCheck::Relaxed)?;
    let group = RayGroup::new(e.to_vec(), rays, shoulder_rotation.copied(), None);
    let rgb = forward_rays(bundle, std::slice::from_ref(&group))?;
    Ok(Image::from_vec(camera.height, camera.width, rgb.data.iter().map(|v| v.to_f32_lossy()).collect()))
}

/// ×4 super-resolution of a low-resolution image.
pub fn sr_upsample<T: Real>(lr: &Image, bundle: &ModelBundle<T>) -> Result<Image> {
    ensure!(lr.channels() == 3, Validation, "SR input must have 3 channels");
    let y = bundle.sr.forward(&image_to_map(lr));
    EvalCounters::add(&bundle.counters.sr_passes, 1);
    Ok(map_to_image(&y))
}

/// Full single-pass render at the camera's (high) resolution, clamped to [0, 1].
pub fn render<T: Real>(
    e: &[f64],
    camera_hr: &CameraPose,
    shoulder_rotation: Option<&Mat3>,
    bundle: &ModelBundle<T>,
) -> Result<Image> {
    let lr_cam = camera_hr.downscaled(SR_SCALE)?;
    let lr = render_lr(e, &lr_cam, shoulder_rotation, bundle)?;
    let mut hr = sr_upsample(&lr, bundle)?;
    hr.clamp01();
    Ok(hr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use crate::nn::{Linear, ResMlpConfig};
    use crate::ray_geometry::Vec3;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchConfig {
        let mut a = ArchConfig::desk();
        a.ray.samples = 2;
        a.ray.pe_freqs = 2;
        a.encoder_width = 8;
        a.bank_rows = 4;
        a.bank_dim = 6;
        a.nelf_width = 8;
        a.nelf_blocks = 1;
        a.sr_width = 4;
        a.sr_blocks = 1;
        a.latent_count = 2;
        a
    }

    fn camera(size: usize) -> CameraPose {
        CameraPose::look_at(Vec3::new(0.3, 0.2, 2.7), Vec3::zeros(), Vec3::y(), 1.07 * size as f64, size, size).unwrap()
    }

    #[test]
    fn assemble_puts_ray_first() {
        let ray: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let expr = vec![0.0; 32];
        let input = assemble_input(&ray, &expr);
        assert_eq!(input.len(), 44);
        assert_eq!(&input[..12], &ray[..]);
        assert!(input[12..].iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn assemble_roundtrips(ray in proptest::collection::vec(-9.0f64..9.0, 1..40), expr in proptest::collection::vec(-9.0f64..9.0, 1..40)) {
            let input = assemble_input(&ray, &expr);
            prop_assert_eq!(&input[..ray.len()], &ray[..]);
            prop_assert_eq!(&input[ray.len()..], &expr[..]);
        }
    }

    fn set_linear(l: &mut Linear<f64>, w: &[f64], b: &[f64]) {
        l.weight.data = w.to_vec();
        l.bias.data = b.to_vec();
    }

    #[test]
    fn tiny_nelf_matches_hand_computation() {
        let cfg = ResMlpConfig { input: 2, width: 2, blocks: 1, output: 3, long_skip: true };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = ResMlp::<f64>::new("nelf", cfg, None, &mut rng);
        // Weights are stored input-major: w[i * out + j].
        set_linear(&mut net.head, &[1.0, -1.0, 0.5, 2.0], &[0.1, -0.2]);
        set_linear(&mut net.blocks[0][0], &[1.0, 0.0, -1.0, 1.0], &[0.0, 0.3]);
        set_linear(&mut net.blocks[0][1], &[0.5, 0.5, -0.5, 1.0], &[-0.1, 0.0]);
        set_linear(&mut net.tail, &[1.0, 0.0, 1.0, 0.0, 1.0, -1.0], &[0.0, 0.1, 0.2]);
        let counters = EvalCounters::default();
        let out = nelf_forward(&[1.0, 2.0], &net, &counters).unwrap();
        // head: [1 + 1 + 0.1, -1 + 4 - 0.2] = [2.1, 2.8]
        let h0 = [2.1, 2.8];
        // block first layer: [2.1 - 2.8, 2.8 + 0.3] = [-0.7, 3.1] → leaky → [-0.007, 3.1]
        // a = [-0.007, 3.1]
        // second layer: [0.5a0 - 0.5a1 - 0.1, 0.5a0 + a1] = [-1.6535, 3.0965] → leaky
        let b = [-0.016535, 3.0965];
        let h = [h0[0] + b[0], h0[1] + b[1]];
        let t = [h[0] + h0[0], h[1] + h0[1]];
        let expect = [t[0], t[1] + 0.1, t[0] - t[1] + 0.2];
        for k in 0..3 {
            assert!((out[k] - expect[k]).abs() < 1e-10, "{out:?} vs {expect:?}");
        }
        assert_eq!(nelf_forward(&[1.0, 2.0], &net, &counters).unwrap(), out);
        assert_eq!(counters.snapshot().nelf_rays, 2);
        assert!(nelf_forward(&[1.0], &net, &counters).is_err());
        net.zero_all();
        assert_eq!(nelf_forward(&[1.0, 2.0], &net, &counters).unwrap(), [0.0; 3]);
    }

    fn direct_conv(x: &FeatureMap<f64>, conv: &Conv2d<f64>) -> FeatureMap<f64> {
        let (co, ci, k) = (conv.out_channels(), conv.in_channels(), conv.kernel());
        let pad = conv.pad as isize;
        let mut y = FeatureMap::zeros(co, x.height, x.width);
        for o in 0..co {
            for yy in 0..x.height {
                for xx in 0..x.width {
                    let mut s = conv.bias.data[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = yy as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize {
                                    continue;
                                }
                                s += conv.weight.data[((o * ci + i) * k + ky) * k + kx] * x.at(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    y.data[(o * x.height + yy) * x.width + xx] = s;
                }
            }
        }
        y
    }

    fn direct_convt(x: &FeatureMap<f64>, up: &ConvTranspose2d<f64>) -> FeatureMap<f64> {
        let (ci, co) = (up.in_channels(), up.out_channels());
        let (ho, wo) = (2 * x.height, 2 * x.width);
        let mut y = FeatureMap::zeros(co, ho, wo);
        for o in 0..co {
            y.data[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v = up.bias.data[o]);
        }
        for i in 0..ci {
            for yy in 0..x.height {
                for xx in 0..x.width {
                    for o in 0..co {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oy = (2 * yy + ky) as isize - 1;
                                let ox = (2 * xx + kx) as isize - 1;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                y.data[(o * ho + oy as usize) * wo + ox as usize] +=
                                    up.weight.data[((i * co + o) * 4 + ky) * 4 + kx] * x.at(i, yy, xx);
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn act(mut m: FeatureMap<f64>) -> FeatureMap<f64> {
        leaky_inplace(&mut m.data);
        m
    }

    #[test]
    fn tiny_sr_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut sr = SrNet::<f64>::new(3, 1, &mut rng);
        for (n, t) in sr.tensors_mut().into_iter().enumerate() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = (((n * 31 + i * 7) % 17) as f64 - 8.0) / 20.0;
            }
        }
        let x = FeatureMap { channels: 3, height: 2, width: 2, data: (0..12).map(|i| (i as f64 * 0.37).sin()).collect() };
        let got = sr.forward(&x);
        let h0 = act(direct_conv(&x, &sr.head));
        let a = act(direct_conv(&h0, &sr.blocks[0][0]));
        let b = act(direct_conv(&a, &sr.blocks[0][1]));
        let mut h = h0.clone();
        h.add_assign(&b);
        h.add_assign(&h0);
        let u0 = act(direct_convt(&h, &sr.up[0]));
        let u1 = act(direct_convt(&u0, &sr.up[1]));
        let expect = direct_conv(&u1, &sr.out);
        assert_eq!((got.channels, got.height, got.width), (3, 8, 8));
        for (g, e) in got.data.iter().zip(&expect.data) {
            assert!((g - e).abs() < 1e-8);
        }
    }

    #[test]
    fn sr_shapes_and_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sr = SrNet::<f64>::new(4, 2, &mut rng);
        let x = FeatureMap { channels: 3, height: 8, width: 8, data: vec![0.3; 192] };
        let y = sr.forward(&x);
        assert_eq!((y.channels, y.height, y.width), (3, 32, 32));
        let zero = FeatureMap::zeros(3, 8, 8);
        assert!(sr.forward(&zero).data.iter().all(|&v| v == 0.0));
        sr.zero_all();
        assert!(sr.forward(&x).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sr_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sr = SrNet::<f64>::new(3, 1, &mut rng);
        let x = FeatureMap { channels: 3, height: 3, width: 2, data: (0..18).map(|i| (i as f64 * 0.91).cos()).collect() };
        let target: Vec<f64> = (0..3 * 12 * 8).map(|i| (i as f64 * 0.13).sin()).collect();
        let loss = |net: &SrNet<f64>, x: &FeatureMap<f64>| -> f64 {
            net.forward(x).data.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5
        };
        let (y, cache) = sr.forward_cached(&x);
        let dy = FeatureMap { data: y.data.iter().zip(&target).map(|(a, b)| a - b).collect(), ..y.clone() };
        let mut grad = sr.zeros_like();
        let dx = sr.backward(&cache, &dy, &mut grad);
        let h = 1e-6;
        let mut probe = sr.clone();
        let n_tensors = probe.tensors().len();
        for ti in 0..n_tensors {
            let len = probe.tensors()[ti].len();
            for idx in [0, len / 2, len - 1] {
                let orig = probe.tensors()[ti].data[idx];
                probe.tensors_mut()[ti].data[idx] = orig + h;
                let up = loss(&probe, &x);
                probe.tensors_mut()[ti].data[idx] = orig - h;
                let dn = loss(&probe, &x);
                probe.tensors_mut()[ti].data[idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grad.tensors()[ti].data[idx];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "{} [{idx}]: {fd} vs {an}", grad.tensors()[ti].name);
            }
        }
        for idx in [0, 7, 17] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&sr, &xp) - loss(&sr, &xm)) / (2.0 * h);
            assert!((fd - dx.data[idx]).abs() <= 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn layout_conversions_roundtrip() {
        let rgb: Vec<f64> = (0..3 * 6).map(|i| i as f64).collect();
        let m = rows_to_map(&rgb, 2, 3);
        assert_eq!(m.at(1, 0, 0), 1.0);
        assert_eq!(m.at(2, 1, 2), 17.0);
        assert_eq!(map_to_rows(&m), rgb);
    }

    #[test]
    fn render_counts_one_nelf_pass_per_lr_pixel() {
        let b = ModelBundle::<f64>::new(&tiny_arch(), 3).unwrap();
        let e = [0.2, -0.1, 0.4, 0.0];
        let lr = render_lr(&e, &camera(2), None, &b).unwrap();
        assert_eq!((lr.height, lr.width), (2, 2));
        let s = b.counters.snapshot();
        assert_eq!((s.nelf_rays, s.local_feature_frames, s.sr_passes), (4, 1, 0));
        b.counters.reset();
        let hr = render(&e, &camera(16), None, &b).unwrap();
        assert_eq!((hr.height, hr.width), (16, 16));
        assert!(hr.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let s = b.counters.snapshot();
        assert_eq!((s.nelf_rays, s.attention_rays, s.local_feature_frames, s.sr_passes, s.warp_points), (16, 16, 1, 1, 0));
        assert_eq!(render(&e, &camera(16), None, &b).unwrap(), hr);
    }

    #[test]
    fn render_rejects_indivisible_resolution() {
        let b = ModelBundle::<f64>::new(&tiny_arch(), 3).unwrap();
        assert!(render(&[0.0; 4], &camera(10), None, &b).is_err());
    }

    #[test]
    fn render_scales_lr_pass() {
        let b = ModelBundle::<f32>::new(&tiny_arch(), 4).unwrap();
        let hr = render(&[0.0; 4], &camera(64), None, &b).unwrap();
        assert_eq!((hr.height, hr.width), (64, 64));
        assert_eq!(b.counters.snapshot().nelf_rays, 256);
    }
}
