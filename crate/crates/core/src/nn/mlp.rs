use std::ops::Range;

use rand::Rng;

use super::{leaky_backward_inplace, leaky_inplace, Module, Tensor};
use crate::linalg::{matmul_at_acc, matmul_bt, Mat, Real};

/// Dense layer `y = x W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(name: &str, input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::normal(format!("{name}.weight"), &[input, output], std, rng),
            bias: Tensor::zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let (input, output) = (self.input_dim(), self.output_dim());
        assert_eq!(x.cols, input, "{}: input width", self.weight.name);
        let mut y = Mat::zeros(x.rows, output);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.data);
        }
        T::gemm(
            x.rows,
            input,
            output,
            T::one(),
            &x.data,
            input as isize,
            1,
            &self.weight.data,
            output as isize,
            1,
            T::one(),
            &mut y.data,
            output as isize,
            1,
        );
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when asked.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>, need_dx: bool) -> Option<Mat<T>> {
        self.backward_cols(x, dy, grad, need_dx.then_some(0..self.input_dim()))
    }

    /// Like [`Linear::backward`] but only computes the input-gradient columns in `cols`.
    pub fn backward_cols(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>, cols: Option<Range<usize>>) -> Option<Mat<T>> {
        matmul_at_acc(x, dy, &mut grad.weight.data);
        for r in 0..dy.rows {
            for (g, &d) in grad.bias.data.iter_mut().zip(dy.row(r)) {
                *g = *g + d;
            }
        }
        cols.map(|c| {
            let out = self.output_dim();
            let w = Mat::from_vec(c.len(), out, self.weight.data[c.start * out..c.end * out].to_vec());
            matmul_bt(dy, &w)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResMlpConfig {
    pub input: usize,
    pub width: usize,
    pub blocks: usize,
    pub output: usize,
    /// Adds the head activation to the tail input, bypassing the body.
    pub long_skip: bool,
}

/// Head / residual body / tail MLP.
///
/// `h0 = act(head(x))`; each block computes `h += act(l2(act(l1(h))))`;
/// with `long_skip` the tail sees `h + h0`; the tail is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct ResMlp<T> {
    pub config: ResMlpConfig,
    pub head: Linear<T>,
    pub blocks: Vec<[Linear<T>; 2]>,
    pub tail: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    input: Mat<T>,
    head: Mat<T>,
    blocks: Vec<BlockCache<T>>,
    tail_input: Mat<T>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Mat<T>,
    first: Mat<T>,
    second: Mat<T>,
}

impl<T: Real> ResMlp<T> {
    /// He-normal hidden layers; the second layer of each block is damped so
    /// the residual stream keeps unit scale at init. `tail_std` sets the tail
    /// init (zero gives an all-zero output at init).
    pub fn new<R: Rng>(name: &str, config: ResMlpConfig, tail_std: Option<f64>, rng: &mut R) -> Self {
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let damp = 1.0 / (config.blocks.max(1) as f64).sqrt();
        let head = Linear::new(&format!("{name}.head"), config.input, config.width, he(config.input), rng);
        let blocks = (0..config.blocks)
            .map(|b| {
                [
                    Linear::new(&format!("{name}.block{b}.0"), config.width, config.width, he(config.width), rng),
                    Linear::new(
                        &format!("{name}.block{b}.1"),
                        config.width,
                        config.width,
                        he(config.width) * damp * 0.5,
                        rng,
                    ),
                ]
            })
            .collect();
        let tail_std = tail_std.unwrap_or_else(|| (1.0 / config.width as f64).sqrt());
        let tail = Linear::new(&format!("{name}.tail"), config.width, config.output, tail_std, rng);
        ResMlp { config, head, blocks, tail }
    }

    pub fn input_dim(&self) -> usize {
        self.config.input
    }

    pub fn output_dim(&self) -> usize {
        self.config.output
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut h = self.head.forward(x);
        leaky_inplace(&mut h.data);
        let h0 = self.config.long_skip.then(|| h.clone());
        for [l1, l2] in &self.blocks {
            let mut a = l1.forward(&h);
            leaky_inplace(&mut a.data);
            let mut b = l2.forward(&a);
            leaky_inplace(&mut b.data);
            h.add_assign(&b);
        }
        if let Some(h0) = &h0 {
            h.add_assign(h0);
        }
        self.tail.forward(&h)
    }

    pub fn forward_cached(&self, x: &Mat<T>) -> (Mat<T>, MlpCache<T>) {
        let mut head = self.head.forward(x);
        leaky_inplace(&mut head.data);
        let mut h = head.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for [l1, l2] in &self.blocks {
            let mut a = l1.forward(&h);
            leaky_inplace(&mut a.data);
            let mut b = l2.forward(&a);
            leaky_inplace(&mut b.data);
            let mut next = h.clone();
            next.add_assign(&b);
            blocks.push(BlockCache { input: h, first: a, second: b });
            h = next;
        }
        if self.config.long_skip {
            h.add_assign(&head);
        }
        let y = self.tail.forward(&h);
        (y, MlpCache { input: x.clone(), head, blocks, tail_input: h })
    }

    /// Backpropagates `dy`, accumulating into `grad`. Returns `dL/dx` if requested.
    pub fn backward(&self, cache: &MlpCache<T>, dy: &Mat<T>, grad: &mut ResMlp<T>, need_dx: bool) -> Option<Mat<T>> {
        self.backward_cols(cache, dy, grad, need_dx.then_some(0..self.input_dim()))
    }

    /// Backward pass returning only the input-gradient columns in `cols`.
    pub fn backward_cols(
        &self,
        cache: &MlpCache<T>,
        dy: &Mat<T>,
        grad: &mut ResMlp<T>,
        cols: Option<Range<usize>>,
    ) -> Option<Mat<T>> {
        let mut dh = self
            .tail
            .backward(&cache.tail_input, dy, &mut grad.tail, true)
            .expect("tail input gradient");
        let skip = self.config.long_skip.then(|| dh.clone());
        for (i, [l1, l2]) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let mut db = dh.clone();
            leaky_backward_inplace(&mut db.data, &bc.second.data);
            let [g1, g2] = &mut grad.blocks[i];
            let mut da = l2.backward(&bc.first, &db, g2, true).expect("block gradient");
            leaky_backward_inplace(&mut da.data, &bc.first.data);
            let dx = l1.backward(&bc.input, &da, g1, true).expect("block gradient");
            dh.add_assign(&dx);
        }
        if let Some(skip) = skip {
            dh.add_assign(&skip);
        }
        leaky_backward_inplace(&mut dh.data, &cache.head.data);
        self.head.backward_cols(&cache.input, &dh, &mut grad.head, cols)
    }
}

impl<T: Real> Module<T> for ResMlp<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.head.weight, &self.head.bias];
        for [l1, l2] in &self.blocks {
            out.extend([&l1.weight, &l1.bias, &l2.weight, &l2.bias]);
        }
        out.extend([&self.tail.weight, &self.tail.bias]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.head.weight, &mut self.head.bias];
        for [l1, l2] in &mut self.blocks {
            out.extend([&mut l1.weight, &mut l1.bias, &mut l2.weight, &mut l2.bias]);
        }
        out.extend([&mut self.tail.weight, &mut self.tail.bias]);
        out
    }
}
