//! Feed-forward networks built from dense, convolution, ReLU and flatten
//! layers, with exact backpropagation of the softmax cross-entropy loss.
//!
//! Parametric layers hold `theta = [W b]`: one row per output unit and the bias
//! in the last column. Their forward pass multiplies the *augmented* input
//! `ã = [a, 1]` by `thetaᵀ`, and the augmented input is kept in the layer
//! cache because the activation-variance optimizer reads it after backward.
//! Convolutions go through [`im2col`](crate::tensor::im2col), so their cached
//! `ã` has one row per output location (`B·H_out·W_out` rows).

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{col2im, im2col_with, Im2ColGeometry, Tensor};

/// User-facing description of one layer; shapes are resolved by
/// [`init_network`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Per-sample input shape: `[d]` for vectors, `[C, H, W]` for images.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    fn geometry(&self, batch: usize) -> Im2ColGeometry {
        Im2ColGeometry {
            batch,
            channels: self.in_channels,
            height: self.in_h,
            width: self.in_w,
            kernel_h: self.kernel,
            kernel_w: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense { fan_in: usize, fan_out: usize },
    Conv(ConvShape),
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn tag(&self) -> u8 {
        match self {
            LayerKind::Dense { .. } => 1,
            LayerKind::Conv(_) => 2,
            LayerKind::Relu => 3,
            LayerKind::Flatten => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    /// `[W b]` for dense and conv layers; `None` for parameter-free layers.
    pub theta: Option<Tensor>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl LayerParams {
    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }
}

/// Values retained by a parametric layer's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    /// Augmented inputs, one row per effective sample, last column all ones.
    pub a_tilde: Tensor,
    /// Pre-activations, `rows × out_units`.
    pub z: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
enum ForwardState {
    /// Conv layers also keep their unfolded input, `B × (C·H·W)`.
    Param(LayerCache, Option<Tensor>),
    Relu {
        input: Tensor,
    },
    Flatten,
}

/// Per-layer mean gradients; `None` for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub grads: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerParams>,
    caches: Vec<Option<ForwardState>>,
    input_shape: Vec<usize>,
    cached_batch: Option<usize>,
}

/// Layer kind with its input and output shapes.
type ResolvedLayer = (LayerKind, Vec<usize>, Vec<usize>);

fn resolve_layers(spec: &NetworkSpec) -> Result<Vec<ResolvedLayer>> {
    if spec.input.is_empty() || spec.input.contains(&0) {
        return Err(Error::Geometry(format!(
            "input shape {:?} must be non-empty with positive extents",
            spec.input
        )));
    }
    let mut shape = spec.input.clone();
    let mut out = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let (kind, next) = match *layer {
            LayerSpec::Dense { units } => {
                let [fan_in] = shape.as_slice() else {
                    return Err(Error::Geometry(format!(
                        "layer {i}: dense layer needs a flat input, got {shape:?} (add a flatten layer)"
                    )));
                };
                if units == 0 {
                    return Err(Error::Geometry(format!("layer {i}: dense layer with 0 units")));
                }
                (LayerKind::Dense { fan_in: *fan_in, fan_out: units }, vec![units])
            }
            LayerSpec::Conv { channels, kernel, stride, padding } => {
                let [c, h, w] = shape.as_slice() else {
                    return Err(Error::Geometry(format!(
                        "layer {i}: conv layer needs a C×H×W input, got {shape:?}"
                    )));
                };
                if channels == 0 {
                    return Err(Error::Geometry(format!("layer {i}: conv layer with 0 channels")));
                }
                let conv = ConvShape {
                    in_channels: *c,
                    out_channels: channels,
                    in_h: *h,
                    in_w: *w,
                    kernel,
                    stride,
                    padding,
                };
                let g = conv.geometry(1);
                let (oh, ow) = (
                    g.out_h().map_err(|e| Error::Geometry(format!("layer {i}: {e}")))?,
                    g.out_w().map_err(|e| Error::Geometry(format!("layer {i}: {e}")))?,
                );
                (LayerKind::Conv(conv), vec![channels, oh, ow])
            }
            LayerSpec::Relu => (LayerKind::Relu, shape.clone()),
            LayerSpec::Flatten => (LayerKind::Flatten, vec![shape.iter().product()]),
        };
        out.push((kind, shape, next.clone()));
        shape = next;
    }
    Ok(out)
}

/// Builds a network with fan-in scaled uniform weights in
/// `[-sqrt(6/fan_in), sqrt(6/fan_in)]` and zero biases.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    let resolved = resolve_layers(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(resolved.len());
    for (kind, in_shape, out_shape) in resolved {
        let dims = match kind {
            LayerKind::Dense { fan_in, fan_out } => Some((fan_out, fan_in)),
            LayerKind::Conv(c) => Some((c.out_channels, c.fan_in())),
            LayerKind::Relu | LayerKind::Flatten => None,
        };
        let theta = dims.map(|(rows, fan_in)| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut t = Tensor::zeros(&[rows, fan_in + 1]);
            let cols = fan_in + 1;
            for (idx, v) in t.data_mut().iter_mut().enumerate() {
                if idx % cols != fan_in {
                    *v = dist.sample(&mut rng);
                }
            }
            t
        });
        layers.push(LayerParams { kind, theta, in_shape, out_shape });
    }
    Ok(Network {
        caches: vec![None; layers.len()],
        layers,
        input_shape: spec.input.clone(),
        cached_batch: None,
    })
}

/// Appends a constant-one column.
pub fn augment(x: &Tensor) -> Tensor {
    let (rows, cols) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(rows * (cols + 1));
    for i in 0..rows {
        data.extend_from_slice(x.row(i));
        data.push(1.0);
    }
    Tensor::new(vec![rows, cols + 1], data).expect("consistent augmented shape")
}

/// `dz · W`, where `W` is `theta` without its bias column.
fn times_weights(dz: &Tensor, theta: &Tensor) -> Tensor {
    let (rows, outs) = (dz.rows(), dz.cols());
    let cols = theta.cols();
    let fan_in = cols - 1;
    let mut out = vec![0.0; rows * fan_in];
    let th = theta.data();
    for r in 0..rows {
        let o_row = &mut out[r * fan_in..(r + 1) * fan_in];
        for (o, &d) in dz.row(r).iter().enumerate().take(outs) {
            if d == 0.0 {
                continue;
            }
            let w = &th[o * cols..o * cols + fan_in];
            for (acc, &wv) in o_row.iter_mut().zip(w) {
                *acc += d * wv;
            }
        }
    }
    Tensor::new(vec![rows, fan_in], out).expect("consistent shape")
}

/// `[B·H·W × C]` patch-row layout to `[B, C, H, W]`.
fn rows_to_nchw(z: &Tensor, batch: usize, channels: usize, h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; batch * channels * h * w];
    let src = z.data();
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let r = (b * h + y) * w + x;
                for c in 0..channels {
                    out[((b * channels + c) * h + y) * w + x] = src[r * channels + c];
                }
            }
        }
    }
    Tensor::new(vec![batch, channels, h, w], out).expect("consistent shape")
}

fn nchw_to_rows(t: &Tensor) -> Tensor {
    let &[batch, channels, h, w] = t.shape() else { unreachable!("caller guarantees rank 4") };
    let mut out = vec![0.0; t.len()];
    let src = t.data();
    for b in 0..batch {
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let r = (b * h + y) * w + x;
                    out[r * channels + c] = src[((b * channels + c) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(vec![batch * h * w, channels], out).expect("consistent shape")
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = (logits.rows(), logits.cols());
    if logits.rank() != 2 || b != labels.len() || b == 0 {
        return Err(Error::Dimension {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    let scale = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - row[label];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - log_sum).exp();
            grad[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok((loss * scale, Tensor::new(vec![b, k], grad)?))
}

impl Network {
    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_units(&self) -> usize {
        self.layers.last().map_or_else(|| self.input_shape.iter().product(), |l| l.out_shape.iter().product())
    }

    /// Indices of layers that carry a `theta`.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.theta.is_some()).map(|(i, _)| i).collect()
    }

    /// Forward cache of a parametric layer, if a forward pass has run.
    pub fn cache(&self, layer: usize) -> Option<&LayerCache> {
        match self.caches.get(layer)? {
            Some(ForwardState::Param(c, _)) => Some(c),
            _ => None,
        }
    }

    /// Input activations of parametric layer `layer` from the last forward
    /// pass, one flattened sample per row (no augmentation column).
    pub fn layer_input(&self, layer: usize) -> Option<Tensor> {
        match self.caches.get(layer)? {
            Some(ForwardState::Param(_, Some(input))) => Some(input.clone()),
            Some(ForwardState::Param(c, None)) => {
                let (rows, cols) = (c.a_tilde.rows(), c.a_tilde.cols() - 1);
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    data.extend_from_slice(&c.a_tilde.row(i)[..cols]);
                }
                Some(Tensor::new(vec![rows, cols], data).expect("consistent shape"))
            }
            _ => None,
        }
    }

    pub fn clear_caches(&mut self) {
        self.caches.iter_mut().for_each(|c| *c = None);
        self.cached_batch = None;
    }

    /// All parameters concatenated in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().filter_map(|l| l.theta.as_ref()).flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.theta.as_ref()).map(Tensor::len).sum()
    }

    /// Runs the network on `x` (`B × input_dims`) and caches what backward
    /// and the optimizer need.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, caches) = self.run_forward(x, true)?;
        self.caches = caches;
        self.cached_batch = Some(x.rows());
        Ok(out)
    }

    /// Forward pass without touching the caches.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run_forward(x, false)?.0)
    }

    fn run_forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Vec<Option<ForwardState>>)> {
        let per_sample: usize = self.input_shape.iter().product();
        if x.rank() != 2 || x.cols() != per_sample {
            return Err(Error::LayerDimension {
                layer: 0,
                expected: vec![x.rows(), per_sample],
                got: x.shape().to_vec(),
            });
        }
        let batch = x.rows();
        let mut full_shape = vec![batch];
        full_shape.extend_from_slice(&self.input_shape);
        let mut act = x.clone().reshape(&full_shape)?;
        let mut caches = Vec::with_capacity(self.layers.len());

        for (i, layer) in self.layers.iter().enumerate() {
            if act.shape()[1..] != layer.in_shape[..] {
                return Err(Error::LayerDimension {
                    layer: i,
                    expected: layer.in_shape.clone(),
                    got: act.shape()[1..].to_vec(),
                });
            }
            let (next, state) = match (&layer.kind, &layer.theta) {
                (LayerKind::Dense { .. }, Some(theta)) => {
                    let a_tilde = augment(&act);
                    let z = a_tilde.matmul_nt(theta)?;
                    (z.clone(), ForwardState::Param(LayerCache { a_tilde, z }, None))
                }
                (LayerKind::Conv(conv), Some(theta)) => {
                    let g = conv.geometry(batch);
                    let a_tilde = augment(&im2col_with(&act, &g)?);
                    let z = a_tilde.matmul_nt(theta)?;
                    let out = rows_to_nchw(&z, batch, conv.out_channels, g.out_h()?, g.out_w()?);
                    let flat = act.len() / batch;
                    let input = keep.then(|| act.reshape(&[batch, flat])).transpose()?;
                    (out, ForwardState::Param(LayerCache { a_tilde, z }, input))
                }
                (LayerKind::Relu, _) => {
                    let mut out = act.clone();
                    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    (out, ForwardState::Relu { input: act })
                }
                (LayerKind::Flatten, _) => {
                    let flat = act.cols();
                    (act.reshape(&[batch, flat])?, ForwardState::Flatten)
                }
                (kind, None) => return Err(Error::Cache(format!("layer {i} ({kind:?}) has no parameters"))),
            };
            if keep {
                caches.push(Some(state));
            }
            act = next;
        }
        let out = if act.rank() == 2 {
            act
        } else {
            let flat = act.cols();
            act.reshape(&[batch, flat])?
        };
        Ok((out, caches))
    }

    /// Softmax cross-entropy loss of `logits` and exact gradients for every
    /// parametric layer, averaged over the batch.
    pub fn backward(&self, logits: &Tensor, labels: &[usize]) -> Result<(f64, GradientBundle)> {
        let batch = match self.cached_batch {
            Some(b) if self.caches.iter().all(Option::is_some) => b,
            _ => return Err(Error::Cache("backward called without a forward pass".into())),
        };
        if logits.rows() != batch {
            return Err(Error::Cache(format!(
                "logits have {} rows but the cached forward pass saw {batch}",
                logits.rows()
            )));
        }
        if logits.cols() != self.output_units() {
            return Err(Error::Dimension {
                op: "backward",
                lhs: logits.shape().to_vec(),
                rhs: vec![batch, self.output_units()],
            });
        }
        let (loss, mut grad) = softmax_cross_entropy(logits, labels)?;
        let mut grads = vec![None; self.layers.len()];

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let state = self.caches[i].as_ref().expect("checked above");
            let need_input_grad = i > 0;
            grad = match (&layer.kind, state) {
                (LayerKind::Dense { .. }, ForwardState::Param(cache, _)) => {
                    let theta = layer.theta.as_ref().expect("dense layer has theta");
                    grads[i] = Some(grad.matmul_tn(&cache.a_tilde)?);
                    if need_input_grad {
                        times_weights(&grad, theta)
                    } else {
                        break;
                    }
                }
                (LayerKind::Conv(conv), ForwardState::Param(cache, _)) => {
                    let theta = layer.theta.as_ref().expect("conv layer has theta");
                    let mut shape = vec![batch];
                    shape.extend_from_slice(&layer.out_shape);
                    let dz = nchw_to_rows(&grad.reshape(&shape)?);
                    grads[i] = Some(dz.matmul_tn(&cache.a_tilde)?);
                    if need_input_grad {
                        let dcols = times_weights(&dz, theta);
                        col2im(&dcols, &conv.geometry(batch))?
                    } else {
                        break;
                    }
                }
                (LayerKind::Relu, ForwardState::Relu { input }) => {
                    let mut g = grad;
                    let mut shape = vec![batch];
                    shape.extend_from_slice(&layer.in_shape);
                    g = g.reshape(&shape)?;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                (LayerKind::Flatten, ForwardState::Flatten) => {
                    let mut shape = vec![batch];
                    shape.extend_from_slice(&layer.in_shape);
                    grad.reshape(&shape)?
                }
                _ => return Err(Error::Cache(format!("layer {i}: cache does not match layer kind"))),
            };
        }
        Ok((loss, GradientBundle { grads }))
    }

    /// Loss and gradients for one minibatch.
    pub fn loss_and_grads(&mut self, x: &Tensor, labels: &[usize]) -> Result<(f64, GradientBundle)> {
        let logits = self.forward(x)?;
        self.backward(&logits, labels)
    }
}

/// Centered population variance (denominator `n_rows`) of each column of the
/// cached augmented inputs. The bias column always yields 0.
pub fn activation_variance(cache: &LayerCache) -> Result<Vec<f64>> {
    column_variance(&cache.a_tilde)
}

pub(crate) fn column_variance(a: &Tensor) -> Result<Vec<f64>> {
    let (n, m) = (a.rows(), a.cols());
    if n < 2 {
        return Err(Error::DegenerateVariance { rows: n });
    }
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (acc, &v) in mean.iter_mut().zip(a.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0; m];
    for i in 0..n {
        for ((acc, &v), &mu) in var.iter_mut().zip(a.row(i)).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    Ok(var)
}
