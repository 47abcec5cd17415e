use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::config_lines;
use crate::numerics::{ParamStore, Real};

/// Optimizer, schedule and run-length settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub steps: usize,
    /// Share of `steps` spent in linear warmup.
    pub warmup_fraction: f64,
    /// Cosine decay after warmup; otherwise the rate stays at its peak.
    pub cosine: bool,
    pub seed: u64,
    /// Learning-rate multiplier for parameters inside residual blocks.
    pub block_lr_scaler: f64,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 2,
            steps: 2000,
            warmup_fraction: 0.05,
            cosine: true,
            seed: 0,
            // 0.1 leaves block weights nearly frozen over a few hundred steps
            block_lr_scaler: 1.0,
            eval_every: 0,
        }
    }

    /// Published indoor optimizer settings.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 6e-3,
            batch_size: 12,
            block_lr_scaler: 0.1,
            ..Self::desk()
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if !(self.block_lr_scaler >= 0.0) {
            return bad("block_lr_scaler must be >= 0".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting (keys without the `train.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::model::parse;
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "cosine" => self.cosine = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "block_lr_scaler" => self.block_lr_scaler = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown train key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "train.learning_rate = {}\ntrain.weight_decay = {}\ntrain.beta1 = {}\ntrain.beta2 = {}\ntrain.eps = {}\n\
             train.batch_size = {}\ntrain.steps = {}\ntrain.warmup_fraction = {}\ntrain.cosine = {}\ntrain.seed = {}\n\
             train.block_lr_scaler = {}\ntrain.eval_every = {}\n",
            self.learning_rate,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.eps,
            self.batch_size,
            self.steps,
            self.warmup_fraction,
            self.cosine,
            self.seed,
            self.block_lr_scaler,
            self.eval_every
        )
    }

    /// Reads `train.*` lines over the desk defaults; other keys are skipped.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (k, v) in config_lines(text)? {
            if let Some(k) = k.strip_prefix("train.") {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Linear warmup from 0, then `lr·½(1+cos(π·progress))`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps();
    if step < warm {
        return cfg.learning_rate * step as f64 / warm as f64;
    }
    if !cfg.cosine {
        return cfg.learning_rate;
    }
    let span = cfg.steps.saturating_sub(warm);
    if span == 0 {
        return cfg.learning_rate;
    }
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    (cfg.learning_rate * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

/// Whether `block_lr_scaler` applies to the named parameter.
pub fn is_block_param(name: &str) -> bool {
    name.contains(".block")
}

/// Decoupled weight decay then a bias-corrected Adam update on every
/// parameter, using the gradients accumulated in `store`; gradients are
/// zeroed afterwards. Nothing changes if any gradient is non-finite.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, cfg: &TrainConfig, lr_t: f64) -> Result<()> {
    for (name, p) in store.iter() {
        if !p.grad.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in parameter `{name}`")));
        }
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (name, p) in store.iter_mut() {
        let lr = if is_block_param(name) { lr_t * cfg.block_lr_scaler } else { lr_t };
        p.step += 1;
        let c1 = 1.0 - b1.powi(p.step as i32);
        let c2 = 1.0 - b2.powi(p.step as i32);
        let decay = 1.0 - lr * cfg.weight_decay;
        let value = p.value.data_mut();
        let (m, v, g) = (p.m.data_mut(), p.v.data_mut(), p.grad.data());
        for i in 0..value.len() {
            let gi = g[i].f64();
            let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            value[i] = T::of(value[i].f64() * decay - update);
        }
    }
    store.zero_grad();
    Ok(())
}
