//! Parameter update rules.
//!
//! Besides plain Adam and RMSProp this holds the multi-step asynchronous Adam
//! rule: a learner takes `n` ordinary local Adam steps while keeping decayed
//! sums of its gradients, squared gradients and applied steps, then folds those
//! sums into the central parameters and moments in one write. With one learner
//! and any `n` the central trajectory is exactly plain Adam's.
//!
//! All rules mutate in place and operate on plain slices so the central store
//! can apply them chunk by chunk.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl AdamHyper {
    pub fn new(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropHyper {
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_rms_eps")]
    pub eps: f64,
}

fn default_decay() -> f64 {
    0.99
}
fn default_rms_eps() -> f64 {
    1e-6
}

impl RmsPropHyper {
    pub fn new(lr: f64) -> Self {
        RmsPropHyper {
            lr,
            decay: default_decay(),
            eps: default_rms_eps(),
        }
    }
}

/// Update rule selection, as it appears in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum UpdateRule {
    Adam(AdamHyper),
    RmsProp(RmsPropHyper),
}

impl UpdateRule {
    pub fn lr(&self) -> f64 {
        match self {
            UpdateRule::Adam(h) => h.lr,
            UpdateRule::RmsProp(h) => h.lr,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        match &mut self {
            UpdateRule::Adam(h) => h.lr = lr,
            UpdateRule::RmsProp(h) => h.lr = lr,
        }
        self
    }

    /// Decay applied to the first moment (0 for rules without one).
    pub fn first_decay(&self) -> f64 {
        match self {
            UpdateRule::Adam(h) => h.beta1,
            UpdateRule::RmsProp(_) => 0.0,
        }
    }

    /// Decay applied to the squared-gradient accumulator.
    pub fn second_decay(&self) -> f64 {
        match self {
            UpdateRule::Adam(h) => h.beta2,
            UpdateRule::RmsProp(h) => h.decay,
        }
    }
}

/// Adam bias-corrected step size for step count `t` (already incremented).
pub fn adam_step_size(hyper: &AdamHyper, t: u64) -> f64 {
    let t = t as i32;
    hyper.lr * (1.0 - hyper.beta2.powi(t)).sqrt() / (1.0 - hyper.beta1.powi(t))
}

/// In-place Adam on slices. `m`, `v` are the moment vectors for exactly the
/// coordinates in `params`; `t` must already be incremented for this step.
/// The applied step is written to `step`.
#[allow(clippy::too_many_arguments)]
pub fn adam_apply<T: Scalar>(
    hyper: &AdamHyper,
    t: u64,
    params: &mut [T],
    m: &mut [T],
    v: &mut [T],
    grad: &[T],
    mut step: Option<&mut [T]>,
) {
    let a = T::lit(adam_step_size(hyper, t));
    let (b1, b2, eps) = (T::lit(hyper.beta1), T::lit(hyper.beta2), T::lit(hyper.eps));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for i in 0..params.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + one_b1 * g;
        v[i] = b2 * v[i] + one_b2 * g * g;
        let s = a * m[i] / (v[i].sqrt() + eps);
        params[i] -= s;
        if let Some(step) = step.as_deref_mut() {
            step[i] = s;
        }
    }
}

/// In-place RMSProp without momentum on slices.
pub fn rmsprop_apply<T: Scalar>(
    hyper: &RmsPropHyper,
    params: &mut [T],
    v: &mut [T],
    grad: &[T],
    mut step: Option<&mut [T]>,
) {
    let (lr, decay, eps) = (T::lit(hyper.lr), T::lit(hyper.decay), T::lit(hyper.eps));
    let one_d = T::one() - decay;
    for i in 0..params.len() {
        let g = grad[i];
        v[i] = decay * v[i] + one_d * g * g;
        let s = lr * g / (v[i].sqrt() + eps);
        params[i] -= s;
        if let Some(step) = step.as_deref_mut() {
            step[i] = s;
        }
    }
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return shape_err(format!("{what}: expected length {expected}, got {got}"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub hyper: AdamHyper,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        AdamState {
            t: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            hyper,
        }
    }

    /// One Adam step; returns the applied step `s` (`params -= s`).
    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<Vec<T>> {
        check_len("adam params", self.m.len(), params.len())?;
        check_len("adam grad", self.m.len(), grad.len())?;
        self.t += 1;
        let mut s = vec![T::zero(); params.len()];
        adam_apply(&self.hyper, self.t, params, &mut self.m, &mut self.v, grad, Some(&mut s));
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState<T> {
    pub v: Vec<T>,
    pub hyper: RmsPropHyper,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(len: usize, hyper: RmsPropHyper) -> Self {
        RmsPropState {
            v: vec![T::zero(); len],
            hyper,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<Vec<T>> {
        check_len("rmsprop params", self.v.len(), params.len())?;
        check_len("rmsprop grad", self.v.len(), grad.len())?;
        let mut s = vec![T::zero(); params.len()];
        rmsprop_apply(&self.hyper, params, &mut self.v, grad, Some(&mut s));
        Ok(s)
    }
}

/// Optimizer state for either rule, owned by one learner.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer<T> {
    Adam(AdamState<T>),
    RmsProp(RmsPropState<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(rule: UpdateRule, len: usize) -> Self {
        match rule {
            UpdateRule::Adam(h) => Optimizer::Adam(AdamState::new(len, h)),
            UpdateRule::RmsProp(h) => Optimizer::RmsProp(RmsPropState::new(len, h)),
        }
    }

    pub fn rule(&self) -> UpdateRule {
        match self {
            Optimizer::Adam(s) => UpdateRule::Adam(s.hyper),
            Optimizer::RmsProp(s) => UpdateRule::RmsProp(s.hyper),
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<Vec<T>> {
        match self {
            Optimizer::Adam(s) => s.step(params, grad),
            Optimizer::RmsProp(s) => s.step(params, grad),
        }
    }

    /// Rule step count (Adam's `t`; RMSProp has none).
    pub fn t(&self) -> u64 {
        match self {
            Optimizer::Adam(s) => s.t,
            Optimizer::RmsProp(_) => 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Adam(s) => s.hyper.lr = lr,
            Optimizer::RmsProp(s) => s.hyper.lr = lr,
        }
    }

    /// First-moment vector; `None` for RMSProp, which keeps none.
    pub fn first_moment(&self) -> Option<&[T]> {
        match self {
            Optimizer::Adam(s) => Some(&s.m),
            Optimizer::RmsProp(_) => None,
        }
    }

    pub fn second_moment(&self) -> &[T] {
        match self {
            Optimizer::Adam(s) => &s.v,
            Optimizer::RmsProp(s) => &s.v,
        }
    }

    /// Mutable `(m, v)`; `m` is `None` for RMSProp.
    pub fn moments_mut(&mut self) -> (Option<&mut Vec<T>>, &mut Vec<T>) {
        match self {
            Optimizer::Adam(s) => (Some(&mut s.m), &mut s.v),
            Optimizer::RmsProp(s) => (None, &mut s.v),
        }
    }
}

/// Local accumulators for multi-step asynchronous updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AsyncAccumulators<T> {
    pub a_g: Vec<T>,
    pub a_g2: Vec<T>,
    pub a_s: Vec<T>,
    pub n: u32,
}

impl<T: Scalar> AsyncAccumulators<T> {
    pub fn new(len: usize) -> Self {
        AsyncAccumulators {
            a_g: vec![T::zero(); len],
            a_g2: vec![T::zero(); len],
            a_s: vec![T::zero(); len],
            n: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.a_g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_g.is_empty()
    }

    /// Folds one local step (gradient `g` and applied step `s`) in.
    pub fn accumulate(&mut self, g: &[T], s: &[T], beta1: f64, beta2: f64) -> Result<()> {
        check_len("accumulate grad", self.len(), g.len())?;
        check_len("accumulate step", self.len(), s.len())?;
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        for i in 0..g.len() {
            self.a_g[i] = b1 * self.a_g[i] + g[i];
            self.a_g2[i] = b2 * self.a_g2[i] + g[i] * g[i];
            self.a_s[i] += s[i];
        }
        self.n += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        for x in self
            .a_g
            .iter_mut()
            .chain(self.a_g2.iter_mut())
            .chain(self.a_s.iter_mut())
        {
            *x = T::zero();
        }
        self.n = 0;
    }
}

/// Central (shared) state for a range of coordinates.
pub struct CentralSlice<'a, T> {
    pub theta: &'a mut [T],
    /// Absent for rules without a first moment.
    pub m: Option<&'a mut [T]>,
    pub v: &'a mut [T],
}

/// Folds accumulated local progress into central state for the coordinates
/// `offset..offset + central.theta.len()` of the accumulators:
///
/// - `theta <- theta - a_s`
/// - `m <- beta1^n m + (1 - beta1) a_g`
/// - `v <- beta2^n v + (1 - beta2) a_g2`
///
/// Accumulators are not reset here: a chunked store calls this once per chunk
/// and resets after the last one.
pub fn async_central_apply<T: Scalar>(
    central: CentralSlice<'_, T>,
    acc: &AsyncAccumulators<T>,
    offset: usize,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    if acc.n == 0 {
        return config_err("central apply with zero accumulated local steps");
    }
    let len = central.theta.len();
    if offset + len > acc.len() || central.v.len() != len {
        return shape_err("central slice does not fit the accumulators");
    }
    let b1n = T::lit(beta1.powi(acc.n as i32));
    let b2n = T::lit(beta2.powi(acc.n as i32));
    let (one_b1, one_b2) = (T::one() - T::lit(beta1), T::one() - T::lit(beta2));
    let range = offset..offset + len;
    for (th, &s) in central.theta.iter_mut().zip(&acc.a_s[range.clone()]) {
        *th -= s;
    }
    if let Some(m) = central.m {
        if m.len() != len {
            return shape_err("central first moment length mismatch");
        }
        for (mi, &ag) in m.iter_mut().zip(&acc.a_g[range.clone()]) {
            *mi = b1n * *mi + one_b1 * ag;
        }
    }
    for (vi, &ag2) in central.v.iter_mut().zip(&acc.a_g2[range]) {
        *vi = b2n * *vi + one_b2 * ag2;
    }
    Ok(())
}

/// Learning rate scaled with the square root of the batch-size ratio.
pub fn scale_lr_sqrt(base_lr: f64, base_batch: usize, new_batch: usize) -> f64 {
    base_lr * (new_batch as f64 / base_batch as f64).sqrt()
}

/// Adam epsilon scaled inversely with batch size: `coef / batch`.
///
/// Categorical DQN uses `coef = 0.01`, the epsilon-greedy Rainbow variant 0.005.
pub fn adam_eps_for_batch(coef: f64, batch: usize) -> f64 {
    coef / batch as f64
}
