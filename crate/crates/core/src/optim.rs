//! Parameter updates: Adam, LAMB, warmup, gradient clipping and the
//! auxiliary loss terms.
//!
//! LAMB treats every named parameter tensor as one layer. Moments are kept
//! in the parameter precision; update directions, norms and trust ratios
//! are computed in `f64`.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};

/// Scale of the activation penalty.
pub const ACTIVATION_PENALTY: f64 = 2e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Lamb,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "lamb" => Ok(OptimizerKind::Lamb),
            _ => Err(invalid!("unknown optimizer {s:?}")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Lamb => "lamb",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// Rescale all gradients when their joint L2 norm exceeds the limit.
    GlobalNorm,
    /// Clamp every gradient component to `[-limit, limit]`.
    PerElement,
}

impl std::str::FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" | "global_norm" => Ok(ClipMode::GlobalNorm),
            "element" | "per_element" => Ok(ClipMode::PerElement),
            _ => Err(invalid!("unknown clip mode {s:?}")),
        }
    }
}

impl std::fmt::Display for ClipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClipMode::GlobalNorm => "global",
            ClipMode::PerElement => "per_element",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay inside LAMB; never applied to biases.
    pub weight_decay: f64,
    pub trust_offset: f64,
    pub grad_clip_norm: f64,
    pub clip_mode: ClipMode,
    pub warmup: bool,
    pub warmup_epochs: f64,
    /// L2 penalty coefficient added to the loss of Adam runs.
    pub l2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::lamb()
    }
}

impl OptimizerConfig {
    pub fn lamb() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Lamb,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.2,
            trust_offset: 1e-6,
            grad_clip_norm: 10.0,
            clip_mode: ClipMode::GlobalNorm,
            warmup: true,
            warmup_epochs: 8.0,
            l2: 0.0,
        }
    }

    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            weight_decay: 0.0,
            warmup: false,
            l2: 1e-4,
            ..Self::lamb()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(invalid!("betas must lie in [0, 1)"));
        }
        if !(self.eps >= 0.0
            && self.weight_decay >= 0.0
            && self.trust_offset >= 0.0
            && self.l2 >= 0.0)
        {
            return Err(invalid!(
                "eps, weight_decay, trust_offset and l2 must be >= 0"
            ));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(invalid!("grad_clip_norm must be > 0"));
        }
        if self.warmup && (self.warmup_epochs.is_nan() || self.warmup_epochs < 0.0) {
            return Err(invalid!("warmup_epochs must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `iteration`.
    pub fn lr_at(&self, iteration: u64, iterations_per_epoch: usize) -> f64 {
        if self.warmup {
            warmup_lr(self.lr, iteration, iterations_per_epoch, self.warmup_epochs)
        } else {
            self.lr
        }
    }
}

/// First and second moments per parameter tensor, and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect()
        };
        OptimizerState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn check(&self, params: &ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && grads.len() == params.len()
            && params.tensors().iter().enumerate().all(|(i, p)| {
                self.m[i].shape() == p.shape()
                    && self.v[i].shape() == p.shape()
                    && grads[i].shape() == p.shape()
            });
        if ok {
            Ok(())
        } else {
            Err(invalid!(
                "optimizer state or gradients do not match the parameters"
            ))
        }
    }
}

/// Joint L2 norm of all tensors, accumulated in `f64`.
pub fn global_norm<T: Real>(tensors: &[Tensor<T>]) -> f64 {
    tensors.iter().map(|t| t.norm_sq_f64()).sum::<f64>().sqrt()
}

/// Rescales all gradients to a joint norm of at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("global gradient norm".into()));
    }
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// Clamps every gradient component to `[-limit, limit]`.
pub fn clip_per_element<T: Real>(grads: &mut [Tensor<T>], limit: f64) -> Result<()> {
    let hi = T::of(limit);
    for g in grads.iter_mut() {
        g.ensure_finite("gradient")?;
        g.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.max(-hi).min(hi));
    }
    Ok(())
}

/// Applies the configured clipping; returns the global norm before it.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], cfg: &OptimizerConfig) -> Result<f64> {
    match cfg.clip_mode {
        ClipMode::GlobalNorm => clip_global_norm(grads, cfg.grad_clip_norm),
        ClipMode::PerElement => {
            let norm = global_norm(grads);
            clip_per_element(grads, cfg.grad_clip_norm)?;
            Ok(norm)
        }
    }
}

/// `base_lr * min(1, (iteration + 1) / (warmup_epochs * iterations_per_epoch))`.
pub fn warmup_lr(
    base_lr: f64,
    iteration: u64,
    iterations_per_epoch: usize,
    warmup_epochs: f64,
) -> f64 {
    let span = warmup_epochs * iterations_per_epoch as f64;
    if span <= 0.0 {
        return base_lr;
    }
    base_lr * ((iteration + 1) as f64 / span).min(1.0)
}

fn update_moments<T: Real>(m: &mut [T], v: &mut [T], g: &[T], cfg: &OptimizerConfig) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    for ((m, v), &g) in m.iter_mut().zip(v.iter_mut()).zip(g) {
        *m = b1 * *m + c1 * g;
        *v = b2 * *v + c2 * g * g;
    }
}

/// Bias-corrected Adam direction `m_hat / (sqrt(v_hat) + eps)` in `f64`.
fn adam_direction<T: Real>(m: &[T], v: &[T], t: u64, cfg: &OptimizerConfig) -> Vec<f64> {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    m.iter()
        .zip(v)
        .map(|(&m, &v)| {
            let mh = m.as_f64() / bc1;
            let vh = v.as_f64() / bc2;
            mh / (vh.sqrt() + cfg.eps)
        })
        .collect()
}

/// One Adam step at learning rate `lr`.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    state.check(params, grads)?;
    state.t += 1;
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        update_moments(
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            grads[i].data(),
            cfg,
        );
        let dir = adam_direction(state.m[i].data(), state.v[i].data(), state.t, cfg);
        for (w, d) in p.data_mut().iter_mut().zip(dir) {
            *w = T::of(w.as_f64() - lr * d);
        }
        p.ensure_finite("parameter after adam step")?;
    }
    Ok(())
}

/// LAMB update direction of one tensor: Adam direction plus decoupled decay.
pub fn lamb_update<T: Real>(
    param: &[T],
    m: &[T],
    v: &[T],
    t: u64,
    decay: f64,
    cfg: &OptimizerConfig,
) -> Vec<f64> {
    let mut u = adam_direction(m, v, t, cfg);
    if decay != 0.0 {
        for (u, &w) in u.iter_mut().zip(param) {
            *u += decay * w.as_f64();
        }
    }
    u
}

/// `‖param‖ / (‖update‖ + offset)`.
pub fn trust_ratio<T: Real>(param: &[T], update: &[f64], offset: f64) -> f64 {
    let pn = param.iter().map(|w| w.as_f64().powi(2)).sum::<f64>().sqrt();
    let un = update.iter().map(|u| u * u).sum::<f64>().sqrt();
    pn / (un + offset)
}

/// One LAMB step at learning rate `lr`; returns the trust ratio of every
/// parameter tensor.
pub fn lamb_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<Vec<f64>> {
    state.check(params, grads)?;
    state.t += 1;
    let mut ratios = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let decay = if params.is_bias(i) {
            0.0
        } else {
            cfg.weight_decay
        };
        update_moments(
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            grads[i].data(),
            cfg,
        );
        let p = params.tensor_mut(i);
        let u = lamb_update(
            p.data(),
            state.m[i].data(),
            state.v[i].data(),
            state.t,
            decay,
            cfg,
        );
        let r = trust_ratio(p.data(), &u, cfg.trust_offset);
        if !r.is_finite() {
            return Err(Error::NonFinite(format!(
                "trust ratio of {}",
                params.name(i)
            )));
        }
        let p = params.tensor_mut(i);
        for (w, u) in p.data_mut().iter_mut().zip(&u) {
            *w = T::of(w.as_f64() - lr * r * u);
        }
        ratios.push(r);
    }
    Ok(ratios)
}

/// Dispatches to the configured optimizer. Returns trust ratios for LAMB
/// and an empty list for Adam.
pub fn step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<Vec<f64>> {
    match cfg.kind {
        OptimizerKind::Adam => adam_step(params, grads, state, cfg, lr).map(|_| Vec::new()),
        OptimizerKind::Lamb => lamb_step(params, grads, state, cfg, lr),
    }
}

/// `2e-3 * mean(x^2)` over the `f_phi` inputs and outputs together.
pub fn activation_penalty<T: Real>(g: &mut Graph<'_, T>, phi_in: Var, phi_out: Var) -> Result<Var> {
    let ms = g.mean_square(&[phi_in, phi_out])?;
    g.scale(ms, T::of(ACTIVATION_PENALTY))
}

/// `coefficient * sum ‖w‖^2` over all non-bias tensors.
pub fn l2_penalty<T: Real>(g: &mut Graph<'_, T>, coefficient: f64) -> Result<Var> {
    if coefficient < 0.0 {
        return Err(invalid!("l2 coefficient must be >= 0"));
    }
    let params = g.params();
    let mut total: Option<Var> = None;
    for i in 0..params.len() {
        if params.is_bias(i) {
            continue;
        }
        let w = g.param(i);
        let s = g.sum_squares(w)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero()))?,
    };
    g.scale(total, T::of(coefficient))
}
