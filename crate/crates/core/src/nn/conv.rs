use rand::Rng;

use super::{Module, Tensor};
use crate::linalg::{matmul, matmul_at, matmul_bt_acc, Mat, Real};

/// Planar `channels × height × width` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    fn as_mat(&self) -> Mat<T> {
        Mat::from_vec(self.channels, self.plane_len(), self.data.clone())
    }

    pub fn add_assign(&mut self, other: &FeatureMap<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

fn out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds `x` into a `(C·k·k) × (Ho·Wo)` patch matrix (zero padding).
pub fn im2col<T: Real>(x: &FeatureMap<T>, kernel: usize, stride: usize, pad: usize) -> Mat<T> {
    let ho = out_size(x.height, kernel, stride, pad);
    let wo = out_size(x.width, kernel, stride, pad);
    let mut cols = Mat::zeros(x.channels * kernel * kernel, ho * wo);
    for c in 0..x.channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x.at(c, iy as usize, ix as usize);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto a map of the given size.
pub fn col2im<T: Real>(
    cols: &Mat<T>,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> FeatureMap<T> {
    let ho = out_size(height, kernel, stride, pad);
    let wo = out_size(width, kernel, stride, pad);
    assert_eq!(cols.rows, channels * kernel * kernel);
    assert_eq!(cols.cols, ho * wo);
    let mut out = FeatureMap::zeros(channels, height, width);
    for c in 0..channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let src = cols.row((c * kernel + ky) * kernel + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let base = (c * height + iy as usize) * width;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let v = &mut out.data[base + ix as usize];
                        *v = *v + src[oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

/// 2-D convolution, weight stored `(out, in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            weight: Tensor::normal(format!("{name}.weight"), &[output, input, kernel, kernel], std, rng),
            bias: Tensor::zeros(format!("{name}.bias"), &[output]),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    fn weight_mat(&self) -> Mat<T> {
        let k = self.kernel();
        Mat::from_vec(self.out_channels(), self.in_channels() * k * k, self.weight.data.clone())
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let k = self.kernel();
        (out_size(height, k, self.stride, self.pad), out_size(width, k, self.stride, self.pad))
    }

    /// Returns the output and the patch matrix needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, Mat<T>) {
        assert_eq!(x.channels, self.in_channels(), "{}: channel mismatch", self.weight.name);
        let (ho, wo) = self.output_size(x.height, x.width);
        let cols = im2col(x, self.kernel(), self.stride, self.pad);
        let mut y = matmul(&self.weight_mat(), &cols);
        for c in 0..y.rows {
            let b = self.bias.data[c];
            y.row_mut(c).iter_mut().for_each(|v| *v = *v + b);
        }
        (FeatureMap { channels: self.out_channels(), height: ho, width: wo, data: y.data }, cols)
    }

    pub fn backward(
        &self,
        input_shape: (usize, usize),
        cols: &Mat<T>,
        dy: &FeatureMap<T>,
        grad: &mut Conv2d<T>,
        need_dx: bool,
    ) -> Option<FeatureMap<T>> {
        let dy_mat = dy.as_mat();
        matmul_bt_acc(&dy_mat, cols, &mut grad.weight.data);
        for c in 0..dy_mat.rows {
            let s: T = dy_mat.row(c).iter().copied().sum();
            grad.bias.data[c] = grad.bias.data[c] + s;
        }
        need_dx.then(|| {
            let dcols = matmul_at(&self.weight_mat(), &dy_mat);
            col2im(&dcols, self.in_channels(), input_shape.0, input_shape.1, self.kernel(), self.stride, self.pad)
        })
    }
}

/// Transposed convolution with kernel 4, stride 2, padding 1: exact ×2
/// upsampling. Weight stored `(in, out, 4, 4)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub const KERNEL: usize = 4;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    pub fn new<R: Rng>(name: &str, input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let k = Self::KERNEL;
        ConvTranspose2d {
            weight: Tensor::normal(format!("{name}.weight"), &[input, output, k, k], std, rng),
            bias: Tensor::zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[1]
    }

    fn weight_mat(&self) -> Mat<T> {
        let k = Self::KERNEL;
        Mat::from_vec(self.in_channels(), self.out_channels() * k * k, self.weight.data.clone())
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.channels, self.in_channels(), "{}: channel mismatch", self.weight.name);
        let cols = matmul_at(&self.weight_mat(), &x.as_mat());
        let mut y = col2im(
            &cols,
            self.out_channels(),
            x.height * Self::STRIDE,
            x.width * Self::STRIDE,
            Self::KERNEL,
            Self::STRIDE,
            Self::PAD,
        );
        let plane = y.plane_len();
        for c in 0..y.channels {
            let b = self.bias.data[c];
            y.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *v + b);
        }
        y
    }

    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        grad: &mut ConvTranspose2d<T>,
        need_dx: bool,
    ) -> Option<FeatureMap<T>> {
        let dcols = im2col(dy, Self::KERNEL, Self::STRIDE, Self::PAD);
        let xm = x.as_mat();
        matmul_bt_acc(&xm, &dcols, &mut grad.weight.data);
        let plane = dy.plane_len();
        for c in 0..dy.channels {
            let s: T = dy.data[c * plane..(c + 1) * plane].iter().copied().sum();
            grad.bias.data[c] = grad.bias.data[c] + s;
        }
        need_dx.then(|| {
            let dx = matmul(&self.weight_mat(), &dcols);
            FeatureMap { channels: x.channels, height: x.height, width: x.width, data: dx.data }
        })
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(c: usize, h: usize, w: usize, seed: f64) -> FeatureMap<f64> {
        FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: (0..c * h * w).map(|i| ((i as f64 * 0.71) + seed).sin()).collect(),
        }
    }

    fn direct_conv(conv: &Conv2d<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let k = conv.kernel();
        let (ho, wo) = conv.output_size(x.height, x.width);
        let mut y = FeatureMap::zeros(conv.out_channels(), ho, wo);
        for o in 0..conv.out_channels() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = conv.bias.data[o];
                    for i in 0..conv.in_channels() {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                s += conv.weight.data[((o * conv.in_channels() + i) * k + ky) * k + kx]
                                    * x.at(i, iy as usize, ix as usize);
                            }
                        }
                    }
                    y.data[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, h, w) in [(1, 5, 4), (2, 6, 6), (2, 5, 7)] {
            let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, stride, 1, 0.5, &mut rng);
            conv.bias.data = vec![0.1, -0.2, 0.3];
            let x = map(2, h, w, 0.3);
            let (y, _) = conv.forward(&x);
            let d = direct_conv(&conv, &x);
            assert_eq!((y.height, y.width), (d.height, d.width));
            for (a, b) in y.data.iter().zip(&d.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_matches_scatter_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tc = ConvTranspose2d::<f64>::new("t", 2, 3, 0.5, &mut rng);
        tc.bias.data = vec![0.05, 0.0, -0.1];
        let x = map(2, 3, 4, 1.0);
        let y = tc.forward(&x);
        assert_eq!((y.channels, y.height, y.width), (3, 6, 8));
        let mut expect = FeatureMap::zeros(3, 6, 8);
        for o in 0..3 {
            for v in &mut expect.data[o * 48..(o + 1) * 48] {
                *v = tc.bias.data[o];
            }
        }
        for i in 0..2 {
            for iy in 0..3 {
                for ix in 0..4 {
                    for o in 0..3 {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oy = (2 * iy + ky) as isize - 1;
                                let ox = (2 * ix + kx) as isize - 1;
                                if oy < 0 || ox < 0 || oy >= 6 || ox >= 8 {
                                    continue;
                                }
                                expect.data[(o * 6 + oy as usize) * 8 + ox as usize] +=
                                    tc.weight.data[((i * 3 + o) * 4 + ky) * 4 + kx] * x.at(i, iy, ix);
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn weighted_sum(y: &FeatureMap<f64>) -> f64 {
        y.data.iter().enumerate().map(|(i, v)| v * ((i as f64) * 0.13).cos()).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f64>::new("c", 2, 2, 3, 2, 1, 0.5, &mut rng);
        let x = map(2, 5, 6, 0.2);
        let (y, cols) = conv.forward(&x);
        let dy = FeatureMap {
            data: (0..y.data.len()).map(|i| ((i as f64) * 0.13).cos()).collect(),
            ..y.clone()
        };
        let mut g = conv.zeros_like();
        let dx = conv.backward((5, 6), &cols, &dy, &mut g, true).unwrap();
        let eps = 1e-6;
        for k in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight.data[k] += eps;
            let mut m = conv.clone();
            m.weight.data[k] -= eps;
            let fd = (weighted_sum(&p.forward(&x).0) - weighted_sum(&m.forward(&x).0)) / (2.0 * eps);
            assert!((fd - g.weight.data[k]).abs() < 1e-7);
        }
        for k in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[k] += eps;
            let mut xm = x.clone();
            xm.data[k] -= eps;
            let fd = (weighted_sum(&conv.forward(&xp).0) - weighted_sum(&conv.forward(&xm).0)) / (2.0 * eps);
            assert!((fd - dx.data[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tc = ConvTranspose2d::<f64>::new("t", 2, 2, 0.5, &mut rng);
        let x = map(2, 3, 3, 0.9);
        let y = tc.forward(&x);
        let dy = FeatureMap {
            data: (0..y.data.len()).map(|i| ((i as f64) * 0.13).cos()).collect(),
            ..y.clone()
        };
        let mut g = tc.zeros_like();
        let dx = tc.backward(&x, &dy, &mut g, true).unwrap();
        let eps = 1e-6;
        for k in 0..tc.weight.len() {
            let mut p = tc.clone();
            p.weight.data[k] += eps;
            let mut m = tc.clone();
            m.weight.data[k] -= eps;
            let fd = (weighted_sum(&p.forward(&x)) - weighted_sum(&m.forward(&x))) / (2.0 * eps);
            assert!((fd - g.weight.data[k]).abs() < 1e-7);
        }
        for k in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[k] += eps;
            let mut xm = x.clone();
            xm.data[k] -= eps;
            let fd = (weighted_sum(&tc.forward(&xp)) - weighted_sum(&tc.forward(&xm))) / (2.0 * eps);
            assert!((fd - dx.data[k]).abs() < 1e-7);
        }
    }
}
