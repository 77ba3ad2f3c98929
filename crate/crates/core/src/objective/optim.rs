//! Hybrid optimizer: momentum-only Muon for matrices, AdamW for the rest.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Muon on rank >= 2 tensors, AdamW elsewhere.
    #[default]
    MuonHybrid,
    /// AdamW on every tensor; the comparison baseline.
    AdamwOnly,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::MuonHybrid => "muon-hybrid",
            OptimizerKind::AdamwOnly => "adamw-only",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "muon-hybrid" | "muon" => Ok(OptimizerKind::MuonHybrid),
            "adamw-only" | "adamw" | "adam" => Ok(OptimizerKind::AdamwOnly),
            other => Err(Error::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Muon momentum.
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::MuonHybrid,
            lr: 1e-3,
            weight_decay: 1e-4,
            momentum: 0.95,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str| Err(Error::config(format!("optimizer {name} out of range")));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(name);
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad("adam_eps");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuonState {
    pub momentum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamState {
    Muon(MuonState),
    Adam(AdamState),
}

impl MuonState {
    pub fn new(numel: usize) -> Self {
        MuonState {
            momentum: vec![0.0; numel],
        }
    }
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
        }
    }
}

fn check_lengths(op: &'static str, param: &[f64], grad: &[f64], buf: &[f64]) -> Result<()> {
    if param.len() != grad.len() || param.len() != buf.len() {
        return Err(Error::Shape {
            op,
            lhs: vec![param.len()],
            rhs: vec![grad.len(), buf.len()],
        });
    }
    Ok(())
}

/// `u = beta*u + (1-beta)*g`, then `w = (1 - lr*wd)*w - lr*u`.
pub fn muon_step(param: &mut [f64], grad: &[f64], state: &mut MuonState, lr: f64, wd: f64, beta: f64) -> Result<()> {
    check_lengths("muon_step", param, grad, &state.momentum)?;
    let decay = 1.0 - lr * wd;
    for ((w, g), u) in param.iter_mut().zip(grad).zip(&mut state.momentum) {
        *u = beta * *u + (1.0 - beta) * g;
        *w = decay * *w - lr * *u;
    }
    Ok(())
}

/// Bias-corrected Adam moments with decoupled weight decay.
pub fn adamw_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &OptimConfig) -> Result<()> {
    check_lengths("adamw_step", param, grad, &state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, (w, g)) in param.iter_mut().zip(grad).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w = decay * *w - cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Per-parameter state keyed by name, created lazily on the first step.
#[derive(Debug, Clone)]
pub struct HybridOptimizer {
    cfg: OptimConfig,
    states: BTreeMap<String, ParamState>,
    steps: u64,
}

impl HybridOptimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(HybridOptimizer {
            cfg,
            states: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state(&self, name: &str) -> Option<&ParamState> {
        self.states.get(name)
    }

    /// Whether a tensor of this shape takes the Muon rule.
    pub fn uses_muon(&self, shape: &[usize]) -> bool {
        self.cfg.kind == OptimizerKind::MuonHybrid && shape.len() >= 2
    }

    /// Updates every parameter once, in name order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in params.names() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for parameter `{name}`")))?;
            let p = params.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "optimizer",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let cfg = self.cfg.clone();
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let muon = self.uses_muon(p.shape());
            let state = self.states.entry(name.clone()).or_insert_with(|| {
                if muon {
                    ParamState::Muon(MuonState::new(p.numel()))
                } else {
                    ParamState::Adam(AdamState::new(p.numel()))
                }
            });
            match state {
                ParamState::Muon(s) => muon_step(p.data_mut(), g.data(), s, cfg.lr, cfg.weight_decay, cfg.momentum)?,
                ParamState::Adam(s) => adamw_step(p.data_mut(), g.data(), s, &cfg)?,
            }
        }
        self.steps += 1;
        Ok(())
    }
}
