//! RMSprop and Adam updates over every learnable array of a cell.

use serde::{Deserialize, Serialize};

use crate::autodiff::GradientSet;
use crate::cells::CellParams;
use crate::error::{check_len, Error, Result};

/// Numerical floor added to both denominators.
pub const EPS_NUM: f64 = 1e-8;

/// Optimizer choice and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimConfig {
    Rmsprop {
        eta: f64,
        #[serde(default = "default_rho")]
        rho: f64,
    },
    Adam {
        eta: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
    },
}

fn default_rho() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}

impl OptimConfig {
    pub fn eta(&self) -> f64 {
        match *self {
            Self::Rmsprop { eta, .. } | Self::Adam { eta, .. } => eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Rmsprop { eta, rho } => eta >= 0.0 && (0.0..1.0).contains(&rho),
            Self::Adam { eta, beta1, beta2 } => {
                eta >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)
            }
        };
        if ok && self.eta().is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Per-array accumulators, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Rmsprop {
        v: Vec<Vec<f64>>,
    },
    Adam {
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        t: u64,
    },
}

impl OptimizerState {
    pub fn new(config: &OptimConfig, params: &CellParams) -> Self {
        let zeros = || {
            params
                .arrays()
                .iter()
                .map(|a| vec![0.0; a.data.len()])
                .collect::<Vec<_>>()
        };
        match config {
            OptimConfig::Rmsprop { .. } => Self::Rmsprop { v: zeros() },
            OptimConfig::Adam { .. } => Self::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }
}

/// Elementwise RMSprop on one array.
pub fn rmsprop_update(theta: &mut [f64], v: &mut [f64], g: &[f64], eta: f64, rho: f64) {
    for ((th, v), &g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = rho * *v + (1.0 - rho) * g * g;
        *th -= eta * g / (v.sqrt() + EPS_NUM);
    }
}

/// Elementwise Adam on one array; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    theta: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    eta: f64,
    beta1: f64,
    beta2: f64,
    t: u64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((th, m), v), &g) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *th -= eta * mh / (vh.sqrt() + EPS_NUM);
    }
}

fn check_shapes(params: &CellParams, grads: &GradientSet) -> Result<()> {
    check_len(
        "optimizer (arrays)",
        params.arrays().len(),
        grads.params.len(),
    )?;
    for (a, g) in params.arrays().iter().zip(&grads.params) {
        check_len("optimizer (array)", a.data.len(), g.len())?;
    }
    if !grads.params.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(())
}

fn check_result(params: &CellParams) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged("non-finite parameter after update".into()))
    }
}

pub fn rmsprop_step(
    state: &mut OptimizerState,
    params: &mut CellParams,
    grads: &GradientSet,
    eta: f64,
    rho: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    let OptimizerState::Rmsprop { v } = state else {
        return Err(Error::Config("rmsprop_step given Adam state".into()));
    };
    for ((arr, v), g) in params
        .arrays_mut()
        .iter_mut()
        .zip(v.iter_mut())
        .zip(&grads.params)
    {
        rmsprop_update(&mut arr.data, v, g, eta, rho);
    }
    check_result(params)
}

pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut CellParams,
    grads: &GradientSet,
    eta: f64,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    let OptimizerState::Adam { m, v, t } = state else {
        return Err(Error::Config("adam_step given RMSprop state".into()));
    };
    *t += 1;
    for (((arr, m), v), g) in params
        .arrays_mut()
        .iter_mut()
        .zip(m.iter_mut())
        .zip(v.iter_mut())
        .zip(&grads.params)
    {
        adam_update(&mut arr.data, m, v, g, eta, beta1, beta2, *t);
    }
    check_result(params)
}

/// An optimizer bound to one parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimConfig,
    state: OptimizerState,
    /// Optional max-norm clip on the parameter gradient. Off by default.
    pub clip: Option<f64>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, params: &CellParams) -> Self {
        Self {
            state: OptimizerState::new(&config, params),
            config,
            clip: None,
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Applies one update. A non-finite gradient leaves `params` untouched
    /// and returns [`Error::Diverged`].
    pub fn step(&mut self, params: &mut CellParams, grads: &mut GradientSet) -> Result<()> {
        if let Some(max) = self.clip {
            let norm = grads.param_norm();
            if norm.is_finite() && norm > max {
                let s = max / norm;
                grads.params.iter_mut().flatten().for_each(|v| *v *= s);
            }
        }
        match self.config {
            OptimConfig::Rmsprop { eta, rho } => {
                rmsprop_step(&mut self.state, params, grads, eta, rho)
            }
            OptimConfig::Adam { eta, beta1, beta2 } => {
                adam_step(&mut self.state, params, grads, eta, beta1, beta2)
            }
        }
    }
}
