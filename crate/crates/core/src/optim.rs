//! Optimizers: the activation-variance adaptive method (AdaAct) and the
//! momentum-SGD, Adam and AdamW baselines, plus the cosine learning-rate
//! schedule.
//!
//! AdaAct keeps, per parametric layer, an EMA `M` of the gradient and an EMA
//! `v` of the diagonal second moment of the layer's augmented inputs. Column
//! `j` of the bias-corrected momentum is divided by `v̂_j^p + ε`, so every
//! weight that reads input feature `j` shares one step size. Weight decay is
//! decoupled: `θ ← θ − η(Ĝ + λθ)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{GradientBundle, Network};
use crate::tensor::{pow, Axis, MapOp, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    AdaAct,
    Sgd,
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::AdaAct => "adaact",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adaact" => Some(OptimizerKind::AdaAct),
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            "adamw" => Some(OptimizerKind::AdamW),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub eta_max: f64,
    pub eta_min: f64,
    /// Momentum coefficient (heavy-ball coefficient for SGD).
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    /// Exponent applied to the activation second moment.
    pub p: f64,
    /// Optional clamp `(c_L, c_U)` on the activation second moments.
    pub clip: Option<(f64, f64)>,
    /// Schedule horizon in steps.
    pub total_steps: u64,
}

impl Hyperparams {
    /// CIFAR-recipe defaults for each optimizer.
    pub fn defaults(kind: OptimizerKind) -> Self {
        let base = Hyperparams {
            eta_max: 0.1,
            eta_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 2e-3,
            epsilon: 1e-8,
            p: 0.5,
            clip: None,
            total_steps: 1,
        };
        match kind {
            OptimizerKind::AdaAct => base,
            OptimizerKind::Sgd => Hyperparams { weight_decay: 5e-4, ..base },
            OptimizerKind::Adam => Hyperparams { eta_max: 1e-3, weight_decay: 5e-4, ..base },
            OptimizerKind::AdamW => Hyperparams { eta_max: 1e-3, weight_decay: 1e-2, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("optim.{field}"), msg))
            }
        };
        check(self.eta_max.is_finite() && self.eta_max >= 0.0, "lr", "must be finite and >= 0")?;
        check(
            self.eta_min.is_finite() && self.eta_min >= 0.0 && self.eta_min <= self.eta_max,
            "lr_min",
            "must lie in [0, lr]",
        )?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must lie in [0, 1)")?;
        check(self.epsilon > 0.0 && self.epsilon.is_finite(), "eps", "must be > 0")?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay", "must be >= 0")?;
        check(self.p > 0.0 && self.p <= 1.0, "p", "must lie in (0, 1]")?;
        if let Some((lo, hi)) = self.clip {
            check(lo > 0.0 && lo <= hi && hi.is_finite(), "clip", "needs 0 < c_L <= c_U")?;
        }
        check(self.total_steps >= 1, "total_steps", "must be >= 1")?;
        Ok(())
    }
}

/// `η_t = η_min + ½(η_max − η_min)(1 + cos(π t / T))` for `0 ≤ t ≤ T`.
pub fn cosine_lr(t: u64, hp: &Hyperparams) -> Result<f64> {
    if t > hp.total_steps || hp.total_steps == 0 {
        return Err(Error::ScheduleRange { step: t, total: hp.total_steps });
    }
    let ratio = t as f64 / hp.total_steps as f64;
    Ok(hp.eta_min + 0.5 * (hp.eta_max - hp.eta_min) * (1.0 + (PI * ratio).cos()))
}

/// Mean over rows of the squared augmented inputs: the diagonal of the
/// minibatch estimate of `E[ã ãᵀ]`.
pub fn activation_second_moment(a_tilde: &Tensor) -> Result<Tensor> {
    if a_tilde.rows() == 0 {
        return Err(Error::EmptyReduction("activation_second_moment"));
    }
    a_tilde.map(MapOp::Square)?.reduce_mean(Axis::Rows)
}

fn require_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn require_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Dimension { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })
    }
}

/// AdaAct state for one parametric layer.
///
/// Both moments are stored already bias-corrected. The update
/// `x̂_t = x̂_{t−1} + w_t (x_t − x̂_{t−1})` with `w_t = (1−β)/(1−βᵗ)` is the
/// same recursion as dividing the raw EMA by `1 − βᵗ`, but `w_1` is exactly 1,
/// so the first step reproduces `G` and `Ã` bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaActLayerState {
    /// Bias-corrected gradient EMA `M̂`, shaped like `theta`.
    pub m_hat: Tensor,
    /// Bias-corrected diagonal activation second-moment EMA `v̂`, one entry
    /// per input column.
    pub v_hat: Tensor,
}

impl AdaActLayerState {
    pub fn zeros(theta_shape: &[usize]) -> Self {
        Self { m_hat: Tensor::zeros(theta_shape), v_hat: Tensor::zeros(&[theta_shape[1]]) }
    }
}

/// Weight of the newest sample in a bias-corrected EMA at step `t ≥ 1`.
pub fn debiased_weight(beta: f64, t: u64) -> f64 {
    (1.0 - beta) / (1.0 - beta.powi(t as i32))
}

fn clip(x: f64, hp: &Hyperparams) -> f64 {
    match hp.clip {
        Some((lo, hi)) => x.clamp(lo, hi),
        None => x,
    }
}

/// Per-column divisors `v̂_j^p + ε`.
pub fn column_divisors(v_hat: &[f64], hp: &Hyperparams) -> Vec<f64> {
    v_hat.iter().map(|&v| pow(v, hp.p) + hp.epsilon).collect()
}

/// Effective per-column step sizes `η / (v̂_j^p + ε)`.
pub fn effective_stepsizes(v_hat: &[f64], eta: f64, hp: &Hyperparams) -> Vec<f64> {
    column_divisors(v_hat, hp).into_iter().map(|d| eta / d).collect()
}

/// `Ĝ = M̂ · diag(v̂^p + ε)⁻¹`: column `j` of `m_hat` divided by one shared
/// divisor.
pub fn precondition(m_hat: &Tensor, v_hat: &[f64], hp: &Hyperparams) -> Result<Tensor> {
    if m_hat.rank() != 2 || m_hat.cols() != v_hat.len() {
        return Err(Error::Dimension {
            op: "precondition",
            lhs: m_hat.shape().to_vec(),
            rhs: vec![v_hat.len()],
        });
    }
    let divisors = column_divisors(v_hat, hp);
    let cols = divisors.len();
    let mut out = m_hat.clone();
    for (idx, g) in out.data_mut().iter_mut().enumerate() {
        *g /= divisors[idx % cols];
    }
    Ok(out)
}

/// One AdaAct update of a single layer at global step `t` (`t ≥ 1`).
///
/// `a_stats` is the minibatch activation second moment from
/// [`activation_second_moment`].
pub fn adaact_step(
    state: &mut AdaActLayerState,
    t: u64,
    theta: &mut Tensor,
    grad: &Tensor,
    a_stats: &Tensor,
    hp: &Hyperparams,
    eta: f64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::State("step counter must be incremented before use".into()));
    }
    require_shape("adaact_step", theta, grad)?;
    require_shape("adaact_step", theta, &state.m_hat)?;
    require_shape("adaact_step", &state.v_hat, a_stats)?;
    require_finite(grad, "gradient")?;
    require_finite(a_stats, "activation statistics")?;

    let wv = debiased_weight(hp.beta2, t);
    for (v, &a) in state.v_hat.data_mut().iter_mut().zip(a_stats.data()) {
        *v += wv * (clip(a, hp) - *v);
        // v̂ is a convex combination of clipped values; the clamp only removes
        // rounding excursions.
        *v = clip(*v, hp);
    }
    let wm = debiased_weight(hp.beta1, t);
    for (m, &g) in state.m_hat.data_mut().iter_mut().zip(grad.data()) {
        *m += wm * (g - *m);
    }
    let direction = precondition(&state.m_hat, state.v_hat.data(), hp)?;

    for (w, &d) in theta.data_mut().iter_mut().zip(direction.data()) {
        *w -= eta * (d + hp.weight_decay * *w);
    }
    Ok(())
}

/// Heavy-ball momentum SGD with L2 decay folded into the gradient:
/// `buf ← β₁ buf + (G + λθ)`, `θ ← θ − η buf`.
pub fn sgd_momentum_step(
    buf: &mut Tensor,
    theta: &mut Tensor,
    grad: &Tensor,
    hp: &Hyperparams,
    eta: f64,
) -> Result<()> {
    require_shape("sgd_momentum_step", theta, grad)?;
    require_shape("sgd_momentum_step", theta, buf)?;
    require_finite(grad, "gradient")?;
    for ((b, w), &g) in buf.data_mut().iter_mut().zip(theta.data_mut()).zip(grad.data()) {
        *b = hp.beta1 * *b + (g + hp.weight_decay * *w);
        *w -= eta * *b;
    }
    Ok(())
}

/// Adam (`decoupled == false`, L2 decay added to the gradient) or AdamW
/// (`decoupled == true`, `−ηλθ` applied outside the adaptive step).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    theta: &mut Tensor,
    grad: &Tensor,
    hp: &Hyperparams,
    eta: f64,
    decoupled: bool,
) -> Result<()> {
    if t == 0 {
        return Err(Error::State("step counter must be incremented before use".into()));
    }
    require_shape("adam_step", theta, grad)?;
    require_shape("adam_step", theta, m)?;
    require_shape("adam_step", theta, v)?;
    require_finite(grad, "gradient")?;
    let (b1, b2) = (hp.beta1, hp.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let it = m.data_mut().iter_mut().zip(v.data_mut()).zip(theta.data_mut()).zip(grad.data());
    for (((mi, vi), w), &g) in it {
        let g = if decoupled { g } else { g + hp.weight_decay * *w };
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let step = (*mi / c1) / ((*vi / c2).sqrt() + hp.epsilon);
        if decoupled {
            *w -= eta * (step + hp.weight_decay * *w);
        } else {
            *w -= eta * step;
        }
    }
    Ok(())
}

/// Bias-corrected activation second moments of every parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VhatSnapshot {
    pub t: u64,
    pub layers: Vec<Vec<f64>>,
}

impl VhatSnapshot {
    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flatten().copied()
    }
}

/// Checkpoint tags for optimizer buffers.
pub mod buffer_tag {
    pub const ADAACT_M: u8 = 16;
    pub const ADAACT_V: u8 = 17;
    pub const SGD_BUF: u8 = 18;
    pub const ADAM_M: u8 = 19;
    pub const ADAM_V: u8 = 20;
    pub const STEP: u8 = 32;
}

/// Common interface of the steppers driven by the training loop.
pub trait Optimizer: Send {
    fn kind(&self) -> OptimizerKind;
    fn hyperparams(&self) -> &Hyperparams;
    /// Number of completed steps.
    fn step_count(&self) -> u64;
    /// Applies one update to every parametric layer of `net`. AdaAct reads
    /// the augmented inputs cached by the forward pass that produced `grads`.
    fn step(&mut self, net: &mut Network, grads: &GradientBundle, eta: f64) -> Result<()>;
    /// Bias-corrected activation second moments, for optimizers that keep them.
    fn v_hat(&self) -> Option<VhatSnapshot> {
        None
    }
    fn state_buffers(&self) -> Vec<(u8, Tensor)>;
    fn load_state_buffers(&mut self, buffers: Vec<(u8, Tensor)>) -> Result<()>;
}

fn theta_shapes(net: &Network) -> Vec<Option<Vec<usize>>> {
    net.layers().iter().map(|l| l.theta.as_ref().map(|t| t.shape().to_vec())).collect()
}

fn layer_grad(grads: &GradientBundle, i: usize) -> Result<&Tensor> {
    grads
        .grads
        .get(i)
        .and_then(Option::as_ref)
        .ok_or_else(|| Error::State(format!("missing gradient for layer {i}")))
}

/// Splits a buffer list into per-layer groups of `width` buffers plus the
/// trailing step counter.
fn unpack_buffers(
    buffers: Vec<(u8, Tensor)>,
    tags: &[u8],
    slots: &[Option<Vec<usize>>],
) -> Result<(Vec<Vec<Tensor>>, u64)> {
    let mut iter = buffers.into_iter();
    let mut groups = Vec::new();
    for shape in slots.iter().flatten() {
        let mut group = Vec::with_capacity(tags.len());
        for &tag in tags {
            let (got, t) = iter.next().ok_or_else(|| Error::State("optimizer state truncated".into()))?;
            if got != tag {
                return Err(Error::State(format!("expected buffer tag {tag}, found {got}")));
            }
            let expected_len: usize =
                if tag == buffer_tag::ADAACT_V { shape[1] } else { shape.iter().product() };
            if t.len() != expected_len {
                return Err(Error::State(format!(
                    "buffer tag {tag} has shape {:?}, incompatible with layer {shape:?}",
                    t.shape()
                )));
            }
            group.push(t);
        }
        groups.push(group);
    }
    let step = match iter.next() {
        Some((buffer_tag::STEP, t)) if t.len() == 1 => t.data()[0] as u64,
        _ => return Err(Error::State("missing step counter".into())),
    };
    if iter.next().is_some() {
        return Err(Error::State("trailing optimizer buffers".into()));
    }
    Ok((groups, step))
}

fn step_buffer(t: u64) -> (u8, Tensor) {
    (buffer_tag::STEP, Tensor::new(vec![], vec![t as f64]).expect("scalar"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaActState {
    pub layers: Vec<Option<AdaActLayerState>>,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct AdaAct {
    hp: Hyperparams,
    state: AdaActState,
}

impl AdaAct {
    pub fn new(net: &Network, hp: Hyperparams) -> Self {
        let layers = theta_shapes(net).into_iter().map(|s| s.map(|s| AdaActLayerState::zeros(&s))).collect();
        Self { hp, state: AdaActState { layers, t: 0 } }
    }

    pub fn state(&self) -> &AdaActState {
        &self.state
    }
}

impl Optimizer for AdaAct {
    fn kind(&self) -> OptimizerKind {
        OptimizerKind::AdaAct
    }

    fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    fn step_count(&self) -> u64 {
        self.state.t
    }

    fn step(&mut self, net: &mut Network, grads: &GradientBundle, eta: f64) -> Result<()> {
        let mut stats = Vec::with_capacity(self.state.layers.len());
        for (i, slot) in self.state.layers.iter().enumerate() {
            stats.push(match slot {
                Some(_) => {
                    let cache = net
                        .cache(i)
                        .ok_or_else(|| Error::Cache(format!("layer {i} has no cached activations")))?;
                    Some(activation_second_moment(&cache.a_tilde)?)
                }
                None => None,
            });
        }
        let t = self.state.t + 1;
        for (i, (slot, layer)) in self.state.layers.iter_mut().zip(net.layers_mut()).enumerate() {
            if let (Some(st), Some(theta)) = (slot.as_mut(), layer.theta.as_mut()) {
                let a = stats[i].as_ref().expect("stats computed for parametric layers");
                adaact_step(st, t, theta, layer_grad(grads, i)?, a, &self.hp, eta)?;
            }
        }
        self.state.t = t;
        Ok(())
    }

    fn v_hat(&self) -> Option<VhatSnapshot> {
        let t = self.state.t;
        let layers = self.state.layers.iter().flatten().map(|s| s.v_hat.data().to_vec()).collect();
        Some(VhatSnapshot { t, layers })
    }

    fn state_buffers(&self) -> Vec<(u8, Tensor)> {
        let mut out = Vec::new();
        for s in self.state.layers.iter().flatten() {
            out.push((buffer_tag::ADAACT_M, s.m_hat.clone()));
            out.push((buffer_tag::ADAACT_V, s.v_hat.clone()));
        }
        out.push(step_buffer(self.state.t));
        out
    }

    fn load_state_buffers(&mut self, buffers: Vec<(u8, Tensor)>) -> Result<()> {
        let shapes: Vec<_> =
            self.state.layers.iter().map(|s| s.as_ref().map(|s| s.m_hat.shape().to_vec())).collect();
        let (groups, t) = unpack_buffers(buffers, &[buffer_tag::ADAACT_M, buffer_tag::ADAACT_V], &shapes)?;
        let mut groups = groups.into_iter();
        for slot in self.state.layers.iter_mut().flatten() {
            let mut g = groups.next().expect("one group per layer").into_iter();
            slot.m_hat = g.next().expect("m").reshape(&shapes_of(&slot.m_hat))?;
            slot.v_hat = g.next().expect("v").reshape(&shapes_of(&slot.v_hat))?;
        }
        self.state.t = t;
        Ok(())
    }
}

fn shapes_of(t: &Tensor) -> Vec<usize> {
    t.shape().to_vec()
}

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    hp: Hyperparams,
    buffers: Vec<Option<Tensor>>,
    t: u64,
}

impl SgdMomentum {
    pub fn new(net: &Network, hp: Hyperparams) -> Self {
        let buffers = theta_shapes(net).into_iter().map(|s| s.map(|s| Tensor::zeros(&s))).collect();
        Self { hp, buffers, t: 0 }
    }

    pub fn buffer(&self, layer: usize) -> Option<&Tensor> {
        self.buffers.get(layer)?.as_ref()
    }
}

impl Optimizer for SgdMomentum {
    fn kind(&self) -> OptimizerKind {
        OptimizerKind::Sgd
    }

    fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    fn step_count(&self) -> u64 {
        self.t
    }

    fn step(&mut self, net: &mut Network, grads: &GradientBundle, eta: f64) -> Result<()> {
        for (i, (buf, layer)) in self.buffers.iter_mut().zip(net.layers_mut()).enumerate() {
            if let (Some(buf), Some(theta)) = (buf.as_mut(), layer.theta.as_mut()) {
                sgd_momentum_step(buf, theta, layer_grad(grads, i)?, &self.hp, eta)?;
            }
        }
        self.t += 1;
        Ok(())
    }

    fn state_buffers(&self) -> Vec<(u8, Tensor)> {
        let mut out: Vec<_> =
            self.buffers.iter().flatten().map(|b| (buffer_tag::SGD_BUF, b.clone())).collect();
        out.push(step_buffer(self.t));
        out
    }

    fn load_state_buffers(&mut self, buffers: Vec<(u8, Tensor)>) -> Result<()> {
        let shapes: Vec<_> = self.buffers.iter().map(|b| b.as_ref().map(shapes_of)).collect();
        let (groups, t) = unpack_buffers(buffers, &[buffer_tag::SGD_BUF], &shapes)?;
        for (slot, g) in self.buffers.iter_mut().flatten().zip(groups) {
            let shape = shapes_of(slot);
            *slot = g.into_iter().next().expect("buf").reshape(&shape)?;
        }
        self.t = t;
        Ok(())
    }
}

/// Adam and AdamW; they differ only in where weight decay enters.
#[derive(Debug, Clone)]
pub struct Adam {
    hp: Hyperparams,
    decoupled: bool,
    moments: Vec<Option<(Tensor, Tensor)>>,
    t: u64,
}

impl Adam {
    pub fn new(net: &Network, hp: Hyperparams, decoupled: bool) -> Self {
        let moments = theta_shapes(net)
            .into_iter()
            .map(|s| s.map(|s| (Tensor::zeros(&s), Tensor::zeros(&s))))
            .collect();
        Self { hp, decoupled, moments, t: 0 }
    }
}

impl Optimizer for Adam {
    fn kind(&self) -> OptimizerKind {
        if self.decoupled {
            OptimizerKind::AdamW
        } else {
            OptimizerKind::Adam
        }
    }

    fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    fn step_count(&self) -> u64 {
        self.t
    }

    fn step(&mut self, net: &mut Network, grads: &GradientBundle, eta: f64) -> Result<()> {
        let t = self.t + 1;
        for (i, (mom, layer)) in self.moments.iter_mut().zip(net.layers_mut()).enumerate() {
            if let (Some((m, v)), Some(theta)) = (mom.as_mut(), layer.theta.as_mut()) {
                let g = layer_grad(grads, i)?;
                adam_step(m, v, t, theta, g, &self.hp, eta, self.decoupled)?;
            }
        }
        self.t = t;
        Ok(())
    }

    fn state_buffers(&self) -> Vec<(u8, Tensor)> {
        let mut out = Vec::new();
        for (m, v) in self.moments.iter().flatten() {
            out.push((buffer_tag::ADAM_M, m.clone()));
            out.push((buffer_tag::ADAM_V, v.clone()));
        }
        out.push(step_buffer(self.t));
        out
    }

    fn load_state_buffers(&mut self, buffers: Vec<(u8, Tensor)>) -> Result<()> {
        let shapes: Vec<_> = self.moments.iter().map(|m| m.as_ref().map(|(m, _)| shapes_of(m))).collect();
        let (groups, t) = unpack_buffers(buffers, &[buffer_tag::ADAM_M, buffer_tag::ADAM_V], &shapes)?;
        for ((m, v), g) in self.moments.iter_mut().flatten().zip(groups) {
            let shape = shapes_of(m);
            let mut g = g.into_iter();
            *m = g.next().expect("m").reshape(&shape)?;
            *v = g.next().expect("v").reshape(&shape)?;
        }
        self.t = t;
        Ok(())
    }
}

pub fn build_optimizer(kind: OptimizerKind, net: &Network, hp: Hyperparams) -> Box<dyn Optimizer> {
    match kind {
        OptimizerKind::AdaAct => Box::new(AdaAct::new(net, hp)),
        OptimizerKind::Sgd => Box::new(SgdMomentum::new(net, hp)),
        OptimizerKind::Adam => Box::new(Adam::new(net, hp, false)),
        OptimizerKind::AdamW => Box::new(Adam::new(net, hp, true)),
    }
}
