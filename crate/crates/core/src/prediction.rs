//! GVF hordes, off-policy semi-gradient TD(0) through the recurrent state,
//! and value-error measurement.

use rand::Rng;

use crate::autodiff::GradientSet;
use crate::cells::{CellParams, HiddenState};
use crate::envs::{ring_oracle_value, Direction};
use crate::error::{check_len, Error, Result};
use crate::learn::{self, Sample};
use crate::optim::{OptimConfig, Optimizer};
use crate::replay::{OnlineHistory, ReplayBuffer, StateMode, Transition};

/// A general value function whose cumulant is one bit of the next
/// observation and whose continuation drops to zero when that bit is on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GVFSpec {
    pub obs_index: usize,
    pub gamma: f64,
    /// Action the persistent target policy always takes.
    pub target_action: usize,
}

impl GVFSpec {
    pub fn cumulant(&self, next_obs: &[f64]) -> f64 {
        next_obs[self.obs_index]
    }

    /// `γ'`: zero on the terminating observation, `gamma` otherwise.
    pub fn continuation(&self, next_obs: &[f64]) -> f64 {
        if next_obs[self.obs_index] == 1.0 {
            0.0
        } else {
            self.gamma
        }
    }

    pub fn target_prob(&self, action: usize) -> f64 {
        if action == self.target_action {
            1.0
        } else {
            0.0
        }
    }
}

/// An ordered collection of GVFs sharing one recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct Horde {
    pub gvfs: Vec<GVFSpec>,
}

impl Horde {
    /// Twenty GVFs: `γ ∈ {0.0, …, 0.9}` for the clockwise policy, then the
    /// same ten for counter-clockwise.
    pub fn ring_world() -> Self {
        let gvfs = Direction::ALL
            .iter()
            .flat_map(|d| {
                (0..10).map(move |g| GVFSpec {
                    obs_index: 0,
                    gamma: g as f64 / 10.0,
                    target_action: d.action(),
                })
            })
            .collect();
        Self { gvfs }
    }

    pub fn len(&self) -> usize {
        self.gvfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gvfs.is_empty()
    }

    /// True values at a Ring World position.
    pub fn ring_oracle(&self, size: usize, position: usize) -> Vec<f64> {
        self.gvfs
            .iter()
            .map(|g| {
                let dir = if g.target_action == Direction::Clockwise.action() {
                    Direction::Clockwise
                } else {
                    Direction::CounterClockwise
                };
                ring_oracle_value(size, g.gamma, dir, position)
            })
            .collect()
    }
}

/// TD(0) targets `y_i = c'_i + γ'_i·v_next,i` and importance ratios
/// `ρ_i = π_i(a)/b(a)`.
pub fn td0_targets(
    horde: &Horde,
    v_next: &[f64],
    transition: &Transition,
    behavior_prob: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("td0_targets", horde.len(), v_next.len())?;
    if behavior_prob <= 0.0 {
        return Err(Error::UnsupportedAction(transition.action));
    }
    let o = &transition.next_obs;
    let y = horde
        .gvfs
        .iter()
        .zip(v_next)
        .map(|(g, v)| g.cumulant(o) + g.continuation(o) * v)
        .collect();
    let rho = horde
        .gvfs
        .iter()
        .map(|g| g.target_prob(transition.action) / behavior_prob)
        .collect();
    Ok((y, rho))
}

/// `‖p − o‖₂ / |p|`.
pub fn rmsve(predictions: &[f64], oracle: &[f64]) -> Result<f64> {
    check_len("rmsve", oracle.len(), predictions.len())?;
    if predictions.is_empty() {
        return Ok(0.0);
    }
    Ok(sq_err(predictions, oracle).sqrt() / predictions.len() as f64)
}

/// Conventional root-mean-square error `√(‖p − o‖₂² / |p|)`.
pub fn rms_error(predictions: &[f64], oracle: &[f64]) -> Result<f64> {
    check_len("rms_error", oracle.len(), predictions.len())?;
    if predictions.is_empty() {
        return Ok(0.0);
    }
    Ok((sq_err(predictions, oracle) / predictions.len() as f64).sqrt())
}

fn sq_err(p: &[f64], o: &[f64]) -> f64 {
    p.iter().zip(o).map(|(p, o)| (p - o) * (p - o)).sum()
}

/// Learning settings for a prediction agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionSettings {
    pub tau: usize,
    pub batch: usize,
    pub state_mode: StateMode,
    /// Keep a periodically synced target network for the bootstrap value.
    pub target_network: bool,
    /// Probability the behavior policy gives each action.
    pub behavior_prob: f64,
}

/// A horde learner over a recurrent cell.
#[derive(Debug, Clone)]
pub struct PredictionAgent {
    pub params: CellParams,
    pub target: Option<CellParams>,
    pub horde: Horde,
    pub settings: PredictionSettings,
    opt: Optimizer,
    grads: GradientSet,
}

impl PredictionAgent {
    pub fn new(
        params: CellParams,
        optim: OptimConfig,
        horde: Horde,
        settings: PredictionSettings,
    ) -> Result<Self> {
        check_len("prediction head", horde.len(), params.dims().outputs)?;
        Ok(Self {
            target: settings.target_network.then(|| params.clone()),
            opt: Optimizer::new(optim, &params),
            grads: GradientSet::zeros(&params),
            params,
            horde,
            settings,
        })
    }

    pub fn optimizer_mut(&mut self) -> &mut Optimizer {
        &mut self.opt
    }

    pub fn sync_target(&mut self) {
        if let Some(t) = &mut self.target {
            t.copy_from(&self.params);
        }
    }

    pub fn predict(&self, h: &HiddenState) -> Result<Vec<f64>> {
        self.params.head(h)
    }

    /// Gradient of the summed importance-weighted squared TD error over
    /// `samples`; returns the loss and per-sample initial-state gradients.
    fn gradients(&mut self, samples: &[Sample<'_>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let params = &self.params;
        let target = self.target.as_ref();
        let horde = &self.horde;
        let b = self.settings.behavior_prob;
        let mut loss = |s: &Sample<'_>, v: &[f64], h: &HiddenState| -> Result<(Vec<f64>, f64)> {
            let last = *s.seq.last().expect("non-empty");
            let v_next = match target {
                Some(t) => learn::bootstrap_output(t, s.h_init, &s.seq)?,
                None => learn::own_bootstrap(params, h, last)?,
            };
            let (y, rho) = td0_targets(horde, &v_next, last, b)?;
            let mut l = 0.0;
            let g = v
                .iter()
                .zip(&y)
                .zip(&rho)
                .map(|((v, y), r)| {
                    l += r * (v - y) * (v - y);
                    2.0 * r * (v - y)
                })
                .collect();
            Ok((g, l))
        };
        learn::accumulate(params, samples, &mut self.grads, &mut loss)
    }

    /// One replay update: samples a batch, backpropagates, steps the
    /// optimizer and refreshes stored states. Returns the batch loss.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        buffer: &mut ReplayBuffer,
        rng: &mut R,
    ) -> Result<f64> {
        let mode = self.settings.state_mode;
        let seqs = buffer.sample_sequences(
            self.settings.batch,
            self.settings.tau,
            self.params.s0(),
            mode,
            rng,
        )?;
        let (loss, h_grads) = {
            let samples: Vec<Sample<'_>> = seqs
                .iter()
                .map(|s| Sample {
                    seq: buffer.sequence(s),
                    h_init: &s.h_init,
                    from_s0: s.from_s0,
                })
                .collect();
            self.gradients(&samples)?
        };
        learn::apply(
            &mut self.params,
            &mut self.opt,
            &mut self.grads,
            Some((buffer, &seqs, mode)),
            &h_grads,
        )?;
        Ok(loss)
    }

    /// One online update on the trailing window.
    pub fn update_online(&mut self, history: &mut OnlineHistory) -> Result<f64> {
        let (h_init, from_s0) = history.h_init(self.params.s0());
        let seq: Vec<&Transition> = history.window().iter().collect();
        if seq.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let sample = Sample {
            seq,
            h_init: &h_init,
            from_s0,
        };
        let (loss, h_grads) = self.gradients(std::slice::from_ref(&sample))?;
        learn::apply(
            &mut self.params,
            &mut self.opt,
            &mut self.grads,
            None,
            &h_grads,
        )?;
        Ok(loss)
    }
}
