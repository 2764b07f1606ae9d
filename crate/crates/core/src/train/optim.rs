use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adamw(1e-3, 0.05)
    }
}

impl OptimizerConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr,
            weight_decay,
            momentum: 0.0,
            betas: default_betas(),
            eps: default_eps(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay,
            momentum,
            betas: default_betas(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("optimizer.lr {} must be finite and non-negative", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("optimizer.weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("optimizer.momentum {} outside [0, 1)", self.momentum));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("optimizer.betas {:?} outside [0, 1)", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad("optimizer.eps must be positive".into());
        }
        Ok(())
    }
}

/// Weight decay applies to matrices only; biases, norm parameters and the
/// positional/class embeddings are exempt.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && name != "pos_embed" && name != "cls_token"
}

#[derive(Clone, Debug, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// SGD with momentum or AdamW, with per-parameter state keyed by name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    state: HashMap<String, Slot>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: HashMap::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every parameter from its gradient buffer (missing buffers
    /// count as zero). All gradients are checked before any parameter
    /// changes, so a non-finite gradient leaves the model untouched.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, lr: f64) -> Result<()> {
        for (name, p) in &params {
            if let Some(g) = p.grad() {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: name.clone(),
                        index,
                    });
                }
            }
        }
        let c = &self.config;
        let t = (self.steps + 1) as i32;
        // stage every update so a non-finite result leaves params and state untouched
        let mut staged = Vec::with_capacity(params.len());
        for (name, p) in &params {
            let n = p.numel();
            let wd = if decays(name, p.shape()) { c.weight_decay } else { 0.0 };
            let zero;
            let grad: &[f64] = match p.grad() {
                Some(g) => g,
                None => {
                    zero = vec![0.0; n];
                    &zero
                }
            };
            let old = self.state.get(name);
            let mut data = p.data().to_vec();
            let mut slot = Slot::default();
            match c.kind {
                OptimizerKind::Sgd => {
                    if c.momentum > 0.0 {
                        slot.m = old.map_or_else(|| vec![0.0; n], |s| s.m.clone());
                    }
                    for i in 0..n {
                        let mut g = grad[i] + wd * data[i];
                        if c.momentum > 0.0 {
                            slot.m[i] = c.momentum * slot.m[i] + g;
                            g = slot.m[i];
                        }
                        data[i] -= lr * g;
                    }
                }
                OptimizerKind::AdamW => {
                    slot.m = old.map_or_else(|| vec![0.0; n], |s| s.m.clone());
                    slot.v = old.map_or_else(|| vec![0.0; n], |s| s.v.clone());
                    let [b1, b2] = c.betas;
                    let bc1 = 1.0 - b1.powi(t);
                    let bc2 = 1.0 - b2.powi(t);
                    for i in 0..n {
                        let g = grad[i];
                        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                        let m_hat = slot.m[i] / bc1;
                        let v_hat = slot.v[i] / bc2;
                        data[i] *= 1.0 - lr * wd;
                        data[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteUpdate {
                    param: name.clone(),
                    index,
                });
            }
            staged.push((data, slot));
        }
        self.steps += 1;
        for ((name, p), (data, slot)) in params.into_iter().zip(staged) {
            p.data_mut().copy_from_slice(&data);
            self.state.insert(name, slot);
        }
        Ok(())
    }
}
