//! Q-learning with a recurrent state: ε-greedy acting, target network,
//! replay or online updates, and forced-action interventions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientSet;
use crate::cells::{CellParams, HiddenState};
use crate::envs::{Env, Heading};
use crate::error::{Error, Result};
use crate::learn::{self, Sample};
use crate::optim::{OptimConfig, Optimizer};
use crate::replay::{OnlineHistory, ReplayBuffer, StateMode, Transition};

/// Index of the largest value; ties go to the lowest index.
pub fn greedy(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy over `q`.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        greedy(q)
    }
}

/// `r + γ·(1 − terminal)·max_a q_next`.
pub fn q_target(reward: f64, gamma: f64, terminal: bool, q_next: &[f64]) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Learning settings for a Q agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSettings {
    pub tau: usize,
    pub batch: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub state_mode: StateMode,
}

/// Recurrent Q-learner with a target network.
#[derive(Debug, Clone)]
pub struct QAgent {
    pub params: CellParams,
    pub target: CellParams,
    pub settings: ControlSettings,
    opt: Optimizer,
    grads: GradientSet,
}

impl QAgent {
    pub fn new(params: CellParams, optim: OptimConfig, settings: ControlSettings) -> Self {
        Self {
            target: params.clone(),
            opt: Optimizer::new(optim, &params),
            grads: GradientSet::zeros(&params),
            params,
            settings,
        }
    }

    pub fn optimizer_mut(&mut self) -> &mut Optimizer {
        &mut self.opt
    }

    pub fn sync_target(&mut self) {
        self.target.copy_from(&self.params);
    }

    pub fn q_values(&self, h: &HiddenState) -> Result<Vec<f64>> {
        self.params.head(h)
    }

    pub fn select_action<R: Rng + ?Sized>(&self, h: &HiddenState, rng: &mut R) -> Result<usize> {
        Ok(select_action(
            &self.q_values(h)?,
            self.settings.epsilon,
            rng,
        ))
    }

    /// Target values for each sample, computed from the target network
    /// started at the same stored state.
    pub(crate) fn targets(&self, samples: &[Sample<'_>]) -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|s| {
                let last = *s.seq.last().expect("non-empty");
                let q_next = if last.terminal {
                    Vec::new()
                } else {
                    learn::bootstrap_output(&self.target, s.h_init, &s.seq)?
                };
                Ok(q_target(
                    last.reward,
                    self.settings.gamma,
                    last.terminal,
                    &q_next,
                ))
            })
            .collect()
    }

    fn gradients(&mut self, samples: &[Sample<'_>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let ys = self.targets(samples)?;
        let mut k = 0;
        let mut loss = |s: &Sample<'_>, q: &[f64], _: &HiddenState| -> Result<(Vec<f64>, f64)> {
            let a = s.seq.last().expect("non-empty").action;
            if a >= q.len() {
                return Err(Error::InvalidAction {
                    action: a,
                    num_actions: q.len(),
                });
            }
            let d = q[a] - ys[k];
            k += 1;
            let mut g = vec![0.0; q.len()];
            g[a] = 2.0 * d;
            Ok((g, d * d))
        };
        learn::accumulate(&self.params, samples, &mut self.grads, &mut loss)
    }

    /// One replay update. Returns the batch loss.
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

/// Summary of one finished episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub total_steps: u64,
    pub total_reward: f64,
    pub success: u8,
}

/// Scheduling constants for the acting/learning loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub warmup: usize,
    pub update_freq: usize,
    pub target_sync: usize,
    /// Update on every step from the trailing window instead of replay.
    pub online: bool,
}

/// An agent interacting with an environment, learning as it goes.
#[derive(Debug, Clone)]
pub struct ControlLoop {
    pub agent: QAgent,
    pub env: Env,
    pub buffer: ReplayBuffer,
    pub history: OnlineHistory,
    pub settings: LoopSettings,
    /// Learning disabled (pure evaluation) when false.
    pub learn: bool,
    step: u64,
    episode: u64,
    obs: Vec<f64>,
    h_prev: HiddenState,
    prev_action: usize,
    episode_start: bool,
    ep_steps: u64,
    ep_reward: f64,
    forced: Vec<usize>,
    last_loss: f64,
}

impl ControlLoop {
    pub fn new(agent: QAgent, env: Env, capacity: usize, settings: LoopSettings) -> Result<Self> {
        let tau = agent.settings.tau;
        let h = HiddenState(agent.params.s0().to_vec());
        Ok(Self {
            buffer: ReplayBuffer::new(capacity)?,
            history: OnlineHistory::new(tau),
            agent,
            env,
            settings,
            learn: true,
            step: 0,
            episode: 0,
            obs: Vec::new(),
            h_prev: h,
            prev_action: 0,
            episode_start: true,
            ep_steps: 0,
            ep_reward: 0.0,
            forced: Vec::new(),
            last_loss: 0.0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    /// Starts a new episode, queueing `forced` actions for its first steps.
    pub fn begin_episode<R: Rng + ?Sized>(&mut self, forced: &[usize], rng: &mut R) -> Result<()> {
        for &a in forced {
            if a >= self.env.num_actions() {
                return Err(Error::InvalidAction {
                    action: a,
                    num_actions: self.env.num_actions(),
                });
            }
        }
        self.obs = self.env.reset(rng);
        self.h_prev = HiddenState(self.agent.params.s0().to_vec());
        self.prev_action = 0;
        self.episode_start = true;
        self.ep_steps = 0;
        self.ep_reward = 0.0;
        self.forced = forced.iter().rev().copied().collect();
        Ok(())
    }

    /// One environment step plus any scheduled learning. Returns the episode
    /// record when the step ended an episode; the caller starts the next one.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<EpisodeRecord>> {
        let h = self
            .agent
            .params
            .step(&self.h_prev, &self.obs, self.prev_action)?;
        let action = match self.forced.pop() {
            Some(a) => a,
            None => self.agent.select_action(&h, rng)?,
        };
        let out = self.env.step(action)?;
        let (over, success) = (out.episode_over(), out.success);
        let t = Transition {
            h_stored: std::mem::take(&mut self.h_prev.0),
            prev_action: self.prev_action,
            obs: std::mem::take(&mut self.obs),
            action,
            reward: out.reward,
            next_obs: out.obs.clone(),
            terminal: out.terminal,
            episode_start: self.episode_start,
        };
        if self.settings.online {
            self.history.push(t.clone());
        }
        self.buffer.append(t);
        self.step += 1;
        self.ep_steps += 1;
        self.ep_reward += out.reward;
        self.h_prev = h;
        self.prev_action = action;
        self.obs = out.obs;
        self.episode_start = false;

        if self.learn {
            self.maybe_learn(rng)?;
        }

        if over {
            self.episode += 1;
            return Ok(Some(EpisodeRecord {
                episode: self.episode,
                total_steps: self.ep_steps,
                total_reward: self.ep_reward,
                success: u8::from(success),
            }));
        }
        Ok(None)
    }

    fn maybe_learn<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let s = &self.settings;
        if s.online {
            self.last_loss = self.agent.update_online(&mut self.history)?;
        } else if self.buffer.len() >= s.warmup
            && self.step.is_multiple_of(s.update_freq.max(1) as u64)
        {
            self.last_loss = self.agent.update(&mut self.buffer, rng)?;
        }
        if self.step.is_multiple_of(s.target_sync.max(1) as u64) {
            self.agent.sync_target();
        }
        Ok(())
    }
}

/// One phase of an intervention curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPhase {
    pub steps: usize,
    /// Actions forced at the start of every episode in this phase.
    #[serde(default)]
    pub forced_actions: Vec<usize>,
}

/// Forced-action schedule applied at episode starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionScript {
    /// Start heading imposed in the directional maze.
    pub start_heading: Option<Heading>,
    #[serde(default)]
    pub phases: Vec<InterventionPhase>,
}

impl InterventionScript {
    /// Two forced forward steps from an east-facing start, held for `steps`.
    pub fn naive(steps: usize) -> Self {
        Self {
            start_heading: Some(Heading::East),
            phases: vec![InterventionPhase {
                steps,
                forced_actions: vec![crate::envs::DirTMaze::FORWARD; 2],
            }],
        }
    }

    /// A non-canonical curriculum: forced forward steps grow from zero to
    /// two over three equal phases.
    pub fn curriculum(steps: usize) -> Self {
        let per = steps / 3;
        Self {
            start_heading: Some(Heading::East),
            phases: (0..3)
                .map(|k| InterventionPhase {
                    steps: if k == 2 { steps - 2 * per } else { per },
                    forced_actions: vec![crate::envs::DirTMaze::FORWARD; k],
                })
                .collect(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }
}

/// Runs `script` on a trained loop, returning every finished episode.
/// The agent keeps learning unless `ctl.learn` is false.
pub fn run_intervention<R: Rng + ?Sized>(
    ctl: &mut ControlLoop,
    script: &InterventionScript,
    rng: &mut R,
) -> Result<Vec<EpisodeRecord>> {
    if let Env::DirTMaze(d) = &mut ctl.env {
        d.forced_heading = script.start_heading;
    }
    let mut records = Vec::new();
    for phase in &script.phases {
        ctl.begin_episode(&phase.forced_actions, rng)?;
        for _ in 0..phase.steps {
            if let Some(rec) = ctl.step(rng)? {
                records.push(rec);
                ctl.begin_episode(&phase.forced_actions, rng)?;
            }
        }
    }
    Ok(records)
}
