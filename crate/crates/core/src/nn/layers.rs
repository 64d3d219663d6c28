//! Trainable layers with explicit backward passes.
//!
//! Each layer exposes `infer` (pure, inference statistics) and
//! `forward_train` / `backward` (caching, gradient-accumulating). Gradients
//! accumulate into [`Param::grad`] until the optimizer consumes them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::conv::{conv_backward_input, conv_backward_weight, conv_forward, gemm, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named parameter buffer and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Buffers such as running statistics are persisted but never optimized.
    pub trainable: bool,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f32>, trainable: bool) -> Self {
        let grad = vec![0.0; value.len()];
        Param {
            name,
            shape,
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, limit: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

pub(crate) fn he_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    uniform(rng, n, (6.0 / fan_in as f32).sqrt())
}

fn glorot_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
    uniform(rng, n, (6.0 / (fan_in + fan_out) as f32).sqrt())
}

/// Strided convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub geometry: ConvGeometry,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(name: &str, geometry: ConvGeometry, rng: &mut ChaCha8Rng) -> Self {
        let g = geometry;
        let k = g.kernel;
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                vec![g.out_c, g.in_c, k, k],
                he_uniform(rng, g.weight_len(), g.patch_len()),
                true,
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![g.out_c],
                vec![0.0; g.out_c],
                true,
            ),
            geometry,
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        conv_forward(
            x,
            &self.weight.value,
            Some(&self.bias.value),
            &self.geometry,
        )
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("backward before forward".into()))?;
        conv_backward_weight(
            &x,
            dy,
            &self.geometry,
            &mut self.weight.grad,
            Some(&mut self.bias.grad),
        )?;
        conv_backward_input(dy, &self.weight.value, &self.geometry)
    }
}

/// Transposed convolution: the adjoint of `geometry`, mapping its output
/// shape back to its input shape.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub geometry: ConvGeometry,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(name: &str, geometry: ConvGeometry, rng: &mut ChaCha8Rng) -> Self {
        let g = geometry;
        let k = g.kernel;
        // fan-in of the transposed direction: each output sees out_c * k * k / stride^2 taps.
        let fan_in = (g.out_c * k * k / (g.stride * g.stride)).max(1);
        ConvTranspose2d {
            weight: Param::new(
                format!("{name}.weight"),
                vec![g.out_c, g.in_c, k, k],
                he_uniform(rng, g.weight_len(), fan_in),
                true,
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![g.in_c],
                vec![0.0; g.in_c],
                true,
            ),
            geometry,
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv_backward_input(x, &self.weight.value, &self.geometry)?;
        let plane = self.geometry.in_h * self.geometry.in_w;
        for i in 0..y.n() {
            for (c, p) in y.sample_mut(i).chunks_exact_mut(plane).enumerate() {
                p.iter_mut().for_each(|v| *v += self.bias.value[c]);
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("backward before forward".into()))?;
        // Roles swap: dy plays the forward conv's input, x its output gradient.
        conv_backward_weight(dy, &x, &self.geometry, &mut self.weight.grad, None)?;
        let plane = self.geometry.in_h * self.geometry.in_w;
        for i in 0..dy.n() {
            for (c, p) in dy.sample(i).chunks_exact(plane).enumerate() {
                self.bias.grad[c] += p.iter().sum::<f32>();
            }
        }
        conv_forward(dy, &self.weight.value, None, &self.geometry)
    }
}

/// Fully connected layer over flattened samples (`[N, F, 1, 1]`).
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_features, in_features],
                glorot_uniform(rng, in_features * out_features, in_features, out_features),
                true,
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![out_features],
                vec![0.0; out_features],
                true,
            ),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        if x.sample_len() != self.in_features {
            return Err(Error::mismatch(self.in_features, x.sample_len()));
        }
        let n = x.n();
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        let (fi, fo) = (self.in_features, self.out_features);
        // y (n x fo) = x (n x fi) * W^T (fi x fo)
        gemm(
            n,
            fi,
            fo,
            x.data(),
            (fi as isize, 1),
            &self.weight.value,
            (1, fi as isize),
            0.0,
            y.data_mut(),
        );
        for row in y.data_mut().chunks_exact_mut(fo) {
            row.iter_mut()
                .zip(&self.bias.value)
                .for_each(|(v, b)| *v += b);
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::Shape("backward before forward".into()))?;
        let (n, fi, fo) = (x.n(), self.in_features, self.out_features);
        // dW (fo x fi) += dy^T (fo x n) * x (n x fi)
        gemm(
            fo,
            n,
            fi,
            dy.data(),
            (1, fo as isize),
            x.data(),
            (fi as isize, 1),
            1.0,
            &mut self.weight.grad,
        );
        for row in dy.data().chunks_exact(fo) {
            self.bias
                .grad
                .iter_mut()
                .zip(row)
                .for_each(|(g, d)| *g += d);
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            n,
            fo,
            fi,
            dy.data(),
            (fo as isize, 1),
            &self.weight.value,
            (fi as isize, 1),
            0.0,
            dx.data_mut(),
        );
        Ok(dx)
    }
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub momentum: f32,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize, momentum: f32, eps: f32) -> Self {
        BatchNorm {
            channels,
            momentum,
            eps,
            gamma: Param::new(
                format!("{name}.gamma"),
                vec![channels],
                vec![1.0; channels],
                true,
            ),
            beta: Param::new(
                format!("{name}.beta"),
                vec![channels],
                vec![0.0; channels],
                true,
            ),
            running_mean: Param::new(
                format!("{name}.running_mean"),
                vec![channels],
                vec![0.0; channels],
                false,
            ),
            running_var: Param::new(
                format!("{name}.running_var"),
                vec![channels],
                vec![1.0; channels],
                false,
            ),
            cache: None,
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.channels {
            return Err(Error::mismatch(self.channels, x.c()));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let plane = x.h() * x.w();
        let mut y = x.clone();
        for i in 0..x.n() {
            for (c, p) in y.sample_mut(i).chunks_exact_mut(plane).enumerate() {
                let scale = self.gamma.value[c] / (self.running_var.value[c] + self.eps).sqrt();
                let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                p.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let plane = x.h() * x.w();
        let count = (x.n() * plane) as f64;
        let mut mean = vec![0.0f64; self.channels];
        let mut var = vec![0.0f64; self.channels];
        for i in 0..x.n() {
            for (c, p) in x.sample(i).chunks_exact(plane).enumerate() {
                mean[c] += p.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..x.n() {
            for (c, p) in x.sample(i).chunks_exact(plane).enumerate() {
                var[c] += p.iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);

        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| 1.0 / (v as f32 + self.eps).sqrt())
            .collect();
        let mut x_hat = x.clone();
        for i in 0..x.n() {
            for (c, p) in x_hat.sample_mut(i).chunks_exact_mut(plane).enumerate() {
                let m = mean[c] as f32;
                p.iter_mut().for_each(|v| *v = (*v - m) * inv_std[c]);
            }
        }
        let mut y = x_hat.clone();
        for i in 0..x.n() {
            for (c, p) in y.sample_mut(i).chunks_exact_mut(plane).enumerate() {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                p.iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
        // Running variance tracks the biased batch variance, as Keras does.
        for c in 0..self.channels {
            let m = self.momentum;
            self.running_mean.value[c] =
                m * self.running_mean.value[c] + (1.0 - m) * mean[c] as f32;
            self.running_var.value[c] = m * self.running_var.value[c] + (1.0 - m) * var[c] as f32;
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let BnCache { x_hat, inv_std } = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("backward before forward".into()))?;
        let plane = dy.h() * dy.w();
        let count = (dy.n() * plane) as f32;
        let mut sum_dy = vec![0.0f64; self.channels];
        let mut sum_dy_xhat = vec![0.0f64; self.channels];
        for i in 0..dy.n() {
            let d = dy.sample(i).chunks_exact(plane);
            let xh = x_hat.sample(i).chunks_exact(plane);
            for (c, (dp, xp)) in d.zip(xh).enumerate() {
                for (&a, &b) in dp.iter().zip(xp) {
                    sum_dy[c] += a as f64;
                    sum_dy_xhat[c] += (a * b) as f64;
                }
            }
        }
        for c in 0..self.channels {
            self.beta.grad[c] += sum_dy[c] as f32;
            self.gamma.grad[c] += sum_dy_xhat[c] as f32;
        }
        let mut dx = dy.clone();
        for i in 0..dy.n() {
            let xh = x_hat.sample(i).to_vec();
            for (c, p) in dx.sample_mut(i).chunks_exact_mut(plane).enumerate() {
                let k = self.gamma.value[c] * inv_std[c] / count;
                let (sd, sdx) = (sum_dy[c] as f32, sum_dy_xhat[c] as f32);
                for (v, &xv) in p.iter_mut().zip(&xh[c * plane..(c + 1) * plane]) {
                    *v = k * (count * *v - sd - xv * sdx);
                }
            }
        }
        Ok(dx)
    }
}

/// Elementwise activations; the cached tensor is the input (leaky) or output (sigmoid).
#[derive(Debug, Clone)]
pub enum Activation {
    LeakyRelu { slope: f32, cache: Option<Tensor> },
    Sigmoid { cache: Option<Tensor> },
}

impl Activation {
    pub fn leaky(slope: f32) -> Self {
        Activation::LeakyRelu { slope, cache: None }
    }

    pub fn sigmoid() -> Self {
        Activation::Sigmoid { cache: None }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        match self {
            Activation::LeakyRelu { slope, .. } => y.data_mut().iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= slope
                }
            }),
            Activation::Sigmoid { .. } => y
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        match self {
            Activation::LeakyRelu { cache, .. } => *cache = Some(x.clone()),
            Activation::Sigmoid { cache } => *cache = Some(y.clone()),
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mut dx = dy.clone();
        match self {
            Activation::LeakyRelu { slope, cache } => {
                let x = cache
                    .take()
                    .ok_or_else(|| Error::Shape("backward before forward".into()))?;
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv < 0.0 {
                        *d *= *slope;
                    }
                }
            }
            Activation::Sigmoid { cache } => {
                let y = cache
                    .take()
                    .ok_or_else(|| Error::Shape("backward before forward".into()))?;
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= yv * (1.0 - yv);
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn loss_and_grad(layer_out: &Tensor, target: &[f32]) -> (f64, Tensor) {
        let mut g = layer_out.clone();
        let mut l = 0.0;
        for (gv, &t) in g.data_mut().iter_mut().zip(target) {
            let d = *gv - t;
            l += 0.5 * (d * d) as f64;
            *gv = d;
        }
        (l, g)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn batchnorm_input_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, [3, 2, 2, 2]);
        let target: Vec<f32> = (0..x.data().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut bn = BatchNorm::new("bn", 2, 0.9, 1e-3);
        bn.gamma.value = vec![1.3, 0.7];
        let y = bn.forward_train(&x).unwrap();
        let (_, dy) = loss_and_grad(&y, &target);
        let dx = bn.backward(&dy).unwrap();
        let eps = 1e-2f32;
        for j in [0, 3, 9, 20] {
            let f = |delta: f32| {
                let mut xp = x.clone();
                xp.data_mut()[j] += delta;
                let mut b = BatchNorm::new("bn", 2, 0.9, 1e-3);
                b.gamma.value = vec![1.3, 0.7];
                loss_and_grad(&b.forward_train(&xp).unwrap(), &target).0
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps as f64);
            assert!(
                (fd - dx.data()[j] as f64).abs() < 2e-2 * fd.abs().max(0.1),
                "x[{j}] fd={fd} an={}",
                dx.data()[j]
            );
        }
    }

    #[test]
    fn linear_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, [2, 5, 1, 1]);
        let target: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut lin = Linear::new("fc", 5, 3, &mut rng);
        let y = lin.forward_train(&x).unwrap();
        let (_, dy) = loss_and_grad(&y, &target);
        let dx = lin.backward(&dy).unwrap();
        let base = lin.clone();
        let eps = 1e-2f32;
        for j in [0, 7, 14] {
            let f = |delta: f32| {
                let mut l = base.clone();
                l.weight.value[j] += delta;
                loss_and_grad(&l.infer(&x).unwrap(), &target).0
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps as f64);
            assert!((fd - lin.weight.grad[j] as f64).abs() < 1e-3);
        }
        for j in [0, 4, 9] {
            let f = |delta: f32| {
                let mut xp = x.clone();
                xp.data_mut()[j] += delta;
                loss_and_grad(&base.infer(&xp).unwrap(), &target).0
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps as f64);
            assert!((fd - dx.data()[j] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn transposed_conv_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry::same(2, 3, 5, 2, 6, 6);
        let mut layer = ConvTranspose2d::new("up", g, &mut rng);
        let x = rand_tensor(&mut rng, [1, 3, 3, 3]);
        let y = layer.forward_train(&x).unwrap();
        assert_eq!(y.shape(), [1, 2, 6, 6]);
        let target: Vec<f32> = (0..y.data().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (_, dy) = loss_and_grad(&y, &target);
        let dx = layer.backward(&dy).unwrap();
        let base = layer.clone();
        let eps = 1e-2f32;
        for j in [0, 11, 60, 149] {
            let f = |delta: f32| {
                let mut l = base.clone();
                l.weight.value[j] += delta;
                loss_and_grad(&l.infer(&x).unwrap(), &target).0
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps as f64);
            assert!((fd - layer.weight.grad[j] as f64).abs() < 2e-3, "w[{j}]");
        }
        for j in [0, 13, 26] {
            let f = |delta: f32| {
                let mut xp = x.clone();
                xp.data_mut()[j] += delta;
                loss_and_grad(&base.infer(&xp).unwrap(), &target).0
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps as f64);
            assert!((fd - dx.data()[j] as f64).abs() < 2e-3, "x[{j}]");
        }
        let f = |delta: f32| {
            let mut l = base.clone();
            l.bias.value[1] += delta;
            loss_and_grad(&l.infer(&x).unwrap(), &target).0
        };
        let fd = (f(eps) - f(-eps)) / (2.0 * eps as f64);
        assert!((fd - layer.bias.grad[1] as f64).abs() < 2e-3);
    }

    #[test]
    fn inference_uses_running_statistics() {
        let mut bn = BatchNorm::new("bn", 1, 0.0, 1e-3);
        let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward_train(&x).unwrap();
        // momentum 0 copies the batch statistics (biased variance 5/4).
        assert!((bn.running_mean.value[0] - 2.5).abs() < 1e-6);
        assert!((bn.running_var.value[0] - 1.25).abs() < 1e-6);
        let y = bn.infer(&x).unwrap();
        assert!((y.data()[0] + 1.5 / (1.25f32 + 1e-3).sqrt()).abs() < 1e-5);
    }
}
