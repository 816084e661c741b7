//! AdamW with decoupled weight decay, layer-wise learning-rate decay groups,
//! cosine schedule with linear warmup, freeze masks, and EMA shadow weights.
//!
//! Parameter grouping keys off the layer index tags carried by the model:
//! index 0 is the patch embedding and position table, 1..=depth the blocks
//! bottom to top, depth+1 the classification head. Group `l` trains at
//! `base_lr * d^(depth+1-l)`, so the head multiplier is exactly 1 and lower
//! layers decay geometrically.
//!
//! Optimizer moments and the EMA shadow are held in `f64` regardless of the
//! model dtype; the update math runs in `f64` and rounds back into the
//! parameter once per step.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Layer-wise decay factor d in (0, 1]; 1 disables LLRD.
    pub llrd_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// EMA momentum m in [0, 1); 0 disables the shadow copy.
    pub ema_momentum: f64,
    /// Number of blocks frozen from the bottom; the embedding freezes with
    /// block 1, and freeze_k == depth is linear probing.
    pub freeze_k: usize,
    pub min_lr: f64,
    pub seed: u64,
    /// Micro-batches averaged into one optimizer step.
    pub grad_accum_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 6e-4,
            llrd_decay: 0.6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 2048,
            warmup_epochs: 10,
            total_epochs: 50,
            ema_momentum: 0.9998,
            freeze_k: 0,
            min_lr: 1e-6,
            seed: 0,
            grad_accum_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.llrd_decay > 0.0 && self.llrd_decay <= 1.0) {
            return Err(OptimError::BadConfig("llrd_decay must be in (0, 1]".into()));
        }
        if self.total_epochs == 0 {
            // Degenerate no-training run; warmup must collapse with it.
            if self.warmup_epochs != 0 {
                return Err(OptimError::BadConfig(
                    "warmup_epochs must be 0 when total_epochs is 0".into(),
                ));
            }
        } else if self.warmup_epochs >= self.total_epochs {
            return Err(OptimError::BadConfig(
                "warmup_epochs must be < total_epochs".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(OptimError::BadConfig(
                "ema_momentum must be in [0, 1)".into(),
            ));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(OptimError::BadConfig(
                "batch_size and grad_accum_steps must be positive".into(),
            ));
        }
        if self.base_lr < 0.0 || self.min_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(OptimError::BadConfig("rates must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("parameter '{0}' carries layer index {1} outside 0..={2}")]
    BadLayerIndex(String, usize, usize),
    #[error("non-finite gradient for parameter '{0}'; step aborted")]
    NonFiniteGrad(String),
    #[error("missing gradient for unfrozen parameter '{0}'")]
    MissingGrad(String),
    #[error("shadow/parameter shape drift at '{0}'")]
    ShapeDrift(String),
    #[error("with_ema_weights does not nest")]
    NestedSwap,
    #[error("EMA shadow is not initialized (ema_momentum == 0)")]
    NoShadow,
}

/// Name and layer tag of one trainable parameter, in model order.
#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub layer_index: usize,
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub names: Vec<String>,
    pub layer_index: usize,
    pub lr_multiplier: f64,
    pub wd_enabled: bool,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct ParamGroups {
    pub groups: Vec<ParamGroup>,
    /// Parameter position -> group position.
    pub assignment: Vec<usize>,
}

impl ParamGroups {
    pub fn group_of(&self, param_idx: usize) -> &ParamGroup {
        &self.groups[self.assignment[param_idx]]
    }
}

/// Multipliers indexed by layer: built by cumulative multiplication from the
/// head down, so `m[l] == d * m[l+1]` holds bit-exactly and the head is 1.
pub fn llrd_multipliers(depth: usize, d: f64) -> Vec<f64> {
    let mut m = vec![1.0f64; depth + 2];
    for l in (0..=depth).rev() {
        m[l] = m[l + 1] * d;
    }
    m
}

/// Group parameters by (layer index, weight-decay eligibility) and attach
/// LLRD multipliers and freeze flags.
///
/// Weight decay applies only to names ending in `.weight` — matrices — and is
/// disabled for biases, norm gains/shifts, position/RPE tables and LayerScale
/// factors. Blocks 1..=freeze_k are frozen, and the embedding (layer 0)
/// freezes together with block 1.
pub fn build_param_groups(
    metas: &[ParamMeta],
    depth: usize,
    cfg: &TrainConfig,
) -> Result<ParamGroups, OptimError> {
    let top = depth + 1;
    if cfg.freeze_k > depth {
        return Err(OptimError::BadConfig(format!(
            "freeze_k {} exceeds depth {}",
            cfg.freeze_k, depth
        )));
    }
    for m in metas {
        if m.layer_index > top {
            return Err(OptimError::BadLayerIndex(
                m.name.clone(),
                m.layer_index,
                top,
            ));
        }
    }
    let mult = llrd_multipliers(depth, cfg.llrd_decay);
    let mut groups: Vec<ParamGroup> = Vec::new();
    let mut slot = vec![usize::MAX; (top + 1) * 2];
    let mut assignment = vec![0usize; metas.len()];
    for (pi, m) in metas.iter().enumerate() {
        let wd = m.name.ends_with(".weight");
        let key = m.layer_index * 2 + usize::from(wd);
        if slot[key] == usize::MAX {
            slot[key] = groups.len();
            groups.push(ParamGroup {
                names: Vec::new(),
                layer_index: m.layer_index,
                lr_multiplier: mult[m.layer_index],
                wd_enabled: wd,
                frozen: cfg.freeze_k >= 1 && m.layer_index <= cfg.freeze_k,
            });
        }
        let gi = slot[key];
        groups[gi].names.push(m.name.clone());
        assignment[pi] = gi;
    }
    Ok(ParamGroups { groups, assignment })
}

/// Base rate before group multipliers: linear warmup from 0 to `base_lr`
/// over the warmup steps, then cosine from `base_lr` down to `min_lr`.
/// Steps past the schedule end clamp to `min_lr`.
pub fn lr_at(step: u64, steps_per_epoch: u64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as u64 * steps_per_epoch;
    let total = cfg.total_epochs as u64 * steps_per_epoch;
    if total == 0 {
        return cfg.min_lr;
    }
    if warm > 0 && step <= warm {
        // step == warm yields base_lr * (w/w) == base_lr exactly
        return cfg.base_lr * (step as f64 / warm as f64);
    }
    if step >= total {
        return cfg.min_lr;
    }
    let span = (total - warm) as f64;
    let progress = (step - warm) as f64 / span;
    if progress == 0.0 {
        return cfg.base_lr;
    }
    cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter first/second moments, step count and optional EMA shadow.
pub struct OptState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Shadow copy of all trainable parameters; present iff ema_momentum > 0.
    pub shadow: Option<Vec<Vec<f64>>>,
    swapped: bool,
}

impl OptState {
    /// Moments start at zero; the shadow starts as a copy of the parameters.
    pub fn new<T: Scalar>(params: &[Tensor<T>], ema_enabled: bool) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let shadow = ema_enabled.then(|| {
            params
                .iter()
                .map(|p| p.data().iter().map(|x| x.to_f64()).collect())
                .collect()
        });
        OptState {
            step: 0,
            m,
            v,
            shadow,
            swapped: false,
        }
    }

    /// Rebuild from checkpoint payloads.
    pub fn restore(step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, shadow: Option<Vec<Vec<f64>>>) -> Self {
        OptState {
            step,
            m,
            v,
            shadow,
            swapped: false,
        }
    }
}

/// One AdamW step over all parameters.
///
/// Per unfrozen group member: the parameter is first multiplied by
/// `(1 - lr_eff * wd)` when decay applies (decoupled decay, applied before
/// the gradient step), then updated with the bias-corrected Adam direction
/// at rate `lr_eff = lr_base * lr_multiplier`. Frozen parameters are left
/// untouched. All gradients are validated finite before anything mutates.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Option<&[T]>],
    groups: &ParamGroups,
    state: &mut OptState,
    cfg: &TrainConfig,
    lr_base: f64,
) -> Result<(), OptimError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), groups.assignment.len());

    for (pi, p) in params.iter().enumerate() {
        let group = groups.group_of(pi);
        if group.frozen {
            continue;
        }
        let g = grads[pi].ok_or_else(|| OptimError::MissingGrad(param_label(groups, pi)))?;
        if g.len() != p.numel() {
            return Err(OptimError::ShapeDrift(param_label(groups, pi)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGrad(param_label(groups, pi)));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (pi, p) in params.iter_mut().enumerate() {
        let group = groups.group_of(pi);
        if group.frozen {
            continue;
        }
        let g = grads[pi].expect("validated above");
        let lr_eff = lr_base * group.lr_multiplier;
        let decay = if group.wd_enabled && cfg.weight_decay > 0.0 {
            1.0 - lr_eff * cfg.weight_decay
        } else {
            1.0
        };
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        let data = p.data_mut();
        for i in 0..data.len() {
            let gi = g[i].to_f64();
            let mut pv = data[i].to_f64();
            if decay != 1.0 {
                pv *= decay;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pv -= lr_eff * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            data[i] = T::from_f64(pv);
        }
    }
    Ok(())
}

fn param_label(groups: &ParamGroups, pi: usize) -> String {
    let g = groups.group_of(pi);
    g.names.first().cloned().unwrap_or_else(|| format!("param#{pi}"))
}

/// shadow <- m * shadow + (1 - m) * params, per coordinate.
pub fn ema_update<T: Scalar>(
    state: &mut OptState,
    params: &[Tensor<T>],
    momentum: f64,
) -> Result<(), OptimError> {
    let shadow = state.shadow.as_mut().ok_or(OptimError::NoShadow)?;
    if shadow.len() != params.len() {
        return Err(OptimError::ShapeDrift("parameter count".into()));
    }
    for (s, p) in shadow.iter_mut().zip(params) {
        if s.len() != p.numel() {
            return Err(OptimError::ShapeDrift("parameter length".into()));
        }
        for (si, x) in s.iter_mut().zip(p.data()) {
            *si = momentum * *si + (1.0 - momentum) * x.to_f64();
        }
    }
    Ok(())
}

/// Run `f` with the EMA shadow swapped into the parameters, restoring the
/// raw weights bit-exactly afterwards. Does not nest.
pub fn with_ema_weights<S, T: Scalar, R>(
    state: &mut OptState,
    store: &mut S,
    params_of: impl Fn(&mut S) -> Vec<&mut Tensor<T>>,
    f: impl FnOnce(&mut S) -> R,
) -> Result<R, OptimError> {
    if state.swapped {
        return Err(OptimError::NestedSwap);
    }
    let shadow = state.shadow.as_ref().ok_or(OptimError::NoShadow)?;
    state.swapped = true;
    let mut saved: Vec<Vec<T>> = Vec::with_capacity(shadow.len());
    {
        let mut params = params_of(store);
        assert_eq!(params.len(), shadow.len(), "shadow/parameter count drift");
        for (p, s) in params.iter_mut().zip(shadow) {
            saved.push(p.data().to_vec());
            for (d, &sv) in p.data_mut().iter_mut().zip(s) {
                *d = T::from_f64(sv);
            }
        }
    }
    let result = f(store);
    {
        let mut params = params_of(store);
        for (p, orig) in params.iter_mut().zip(&saved) {
            p.data_mut().copy_from_slice(orig);
        }
    }
    state.swapped = false;
    Ok(result)
}
