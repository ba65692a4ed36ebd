//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's numerical kernels.
#![allow(dead_code)]

use adaact_kit::nn::{softmax_cross_entropy, LayerSpec, Network, NetworkSpec};
use adaact_kit::optim::Hyperparams;
use adaact_kit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reference AdaAct for a single layer, written as the raw recursion: EMAs first,
/// bias correction by division afterwards.
pub struct RawAdaAct {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
    cols: usize,
}

impl RawAdaAct {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { m: vec![0.0; rows * cols], v: vec![0.0; cols], t: 0, cols }
    }

    pub fn m_hat(&self, hp: &Hyperparams) -> Vec<f64> {
        let c = 1.0 - hp.beta1.powi(self.t);
        self.m.iter().map(|m| m / c).collect()
    }

    pub fn v_hat(&self, hp: &Hyperparams) -> Vec<f64> {
        let c = 1.0 - hp.beta2.powi(self.t);
        self.v.iter().map(|v| v / c).collect()
    }

    /// `a_rows` are the augmented activations, one row per sample.
    pub fn step(&mut self, theta: &mut [f64], g: &[f64], a_rows: &[Vec<f64>], hp: &Hyperparams, eta: f64) {
        self.t += 1;
        for j in 0..self.cols {
            let mut s = 0.0;
            for row in a_rows {
                s += row[j] * row[j];
            }
            let mut a = s / a_rows.len() as f64;
            if let Some((lo, hi)) = hp.clip {
                a = a.max(lo).min(hi);
            }
            self.v[j] = hp.beta2 * self.v[j] + (1.0 - hp.beta2) * a;
        }
        for (m, &gi) in self.m.iter_mut().zip(g) {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * gi;
        }
        let m_hat = self.m_hat(hp);
        let v_hat = self.v_hat(hp);
        for (idx, w) in theta.iter_mut().enumerate() {
            let j = idx % self.cols;
            let ghat = m_hat[idx] / (v_hat[j].powf(hp.p) + hp.epsilon);
            *w -= eta * (ghat + hp.weight_decay * *w);
        }
    }
}

/// Rows of `t` as owned vectors.
pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Direct convolution over an NCHW batch; `theta` is `C_out × (C·k·k + 1)`
/// with the bias in the last column. Returns NCHW output.
pub fn conv_oracle(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    theta: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let co = theta.rows();
    let bias_col = c * k * k;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                acc += theta.at(o, (ci * k + ky) * k + kx) * xv;
                            }
                        }
                    }
                    out[((bi * co + o) * oh + oy) * ow + ox] = acc + theta.at(o, bias_col);
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn loss_of(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = net.predict(x).unwrap();
    softmax_cross_entropy(&logits, labels).unwrap().0
}

/// Largest relative error between analytic gradients and central
/// differences with step `h`, over every parameter of every layer.
///
/// Biases are first moved off zero: with zero biases a fully inactive layer
/// feeds the next ReLU exactly at its kink, where the loss has no derivative.
pub fn max_grad_rel_error(net: &mut Network, x: &Tensor, labels: &[usize], h: f64) -> f64 {
    let mut r = rng(x.data().len() as u64);
    for layer in net.layers_mut() {
        if let Some(theta) = layer.theta.as_mut() {
            let cols = theta.cols();
            for (idx, v) in theta.data_mut().iter_mut().enumerate() {
                if idx % cols == cols - 1 {
                    *v = r.random_range(-0.2..0.2);
                }
            }
        }
    }
    let (_, grads) = net.loss_and_grads(x, labels).unwrap();
    let mut worst: f64 = 0.0;
    for li in 0..net.layers().len() {
        let Some(analytic) = grads.grads[li].clone() else {
            continue;
        };
        for idx in 0..analytic.len() {
            let orig = net.layers()[li].theta.as_ref().unwrap().data()[idx];
            let mut probe = |delta: f64| {
                net.layers_mut()[li].theta.as_mut().unwrap().data_mut()[idx] = orig + delta;
                loss_of(net, x, labels)
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            net.layers_mut()[li].theta.as_mut().unwrap().data_mut()[idx] = orig;
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    for &units in hidden {
        layers.push(LayerSpec::Dense { units });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { units: classes });
    NetworkSpec { input: vec![input], layers }
}

/// Procedural 28×28 grayscale silhouettes in ten classes, used in place of a
/// downloaded image corpus. Each class is a fixed shape drawn with random
/// scale, offset, intensity and pixel noise.
pub fn silhouettes(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = rng(seed);
    let mut data = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let scale: f64 = rng.random_range(0.55..1.2);
        let (du, dv): (f64, f64) = (rng.random_range(-0.35..0.35), rng.random_range(-0.35..0.35));
        let ink: f64 = rng.random_range(0.3..1.0);
        for y in 0..28 {
            for x in 0..28 {
                let u = ((x as f64 + 0.5) / 14.0 - 1.0 - du) / scale;
                let v = ((y as f64 + 0.5) / 14.0 - 1.0 - dv) / scale;
                let on = inside(class, u, v);
                let noise: f64 = rng.random_range(-0.5..0.5);
                let px = if on { ink } else { 0.0 } + noise;
                data.push(px.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    (Tensor::new(vec![n, 784], data).unwrap(), labels)
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let boxed = u.abs() < 0.8 && v.abs() < 0.8;
    match class {
        0 => u.abs() < 0.4 && v.abs() < 0.8,
        1 => u.abs() < 0.8 && v.abs() < 0.35,
        2 => r < 0.7,
        3 => r > 0.45 && r < 0.75,
        4 => boxed && (u.abs() < 0.2 || v.abs() < 0.2),
        5 => v > -0.7 && v < 0.7 && u.abs() < (v + 0.7) * 0.55,
        6 => u.abs() > 0.2 && u.abs() < 0.5 && v.abs() < 0.8,
        7 => boxed && (u - v).abs() < 0.3,
        8 => (u.abs() < 0.8 && (v + 0.6).abs() < 0.2) || (u.abs() < 0.2 && v > -0.6 && v < 0.8),
        _ => boxed && u * v > 0.0,
    }
}
