//! Experiment runner: configuration, seeded runs, sweeps, metric CSVs,
//! checkpoints and hidden-state dumps.
//!
//! A run directory contains
//!
//! * `config.toml`: the fully resolved configuration,
//! * `metrics.csv`: `step,rmsve,windowed_rmsve` (prediction) or
//!   `episode,total_steps,total_reward,success` (control),
//! * `softmax.csv`: `step,additive,multiplicative` for softmax-combined cells,
//! * `checkpoint.json` (plus `checkpoint_<step>.json` when requested),
//! * `status.txt`: `ok` or `diverged at step N: reason`.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{CellDims, CellKind, CellParams, HiddenState, ParamArray};
use crate::control::{ControlLoop, ControlSettings, InterventionScript, LoopSettings, QAgent};
use crate::envs::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::prediction::{rms_error, rmsve, Horde, PredictionAgent, PredictionSettings};
use crate::replay::{OnlineHistory, ReplayBuffer, StateMode, Transition};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Replay-based or fully online learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Replay,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    /// Kind in display form, e.g. `MAGRU` or `FacGRU(M=21)`.
    pub kind: String,
    pub hidden: usize,
}

/// Learning constants. Unset fields take the environment's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub tau: Option<usize>,
    pub batch: Option<usize>,
    pub update_freq: Option<usize>,
    pub target_sync: Option<usize>,
    /// Prediction only: bootstrap from a target network.
    pub target_network: Option<bool>,
    pub buffer: Option<usize>,
    pub warmup: Option<usize>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub state_mode: Option<StateMode>,
    /// Max-norm gradient clip; off when unset.
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Trailing window of the `windowed_rmsve` column.
    pub window: Option<usize>,
    /// Steps averaged for a prediction run's final metric.
    pub final_window: Option<usize>,
    /// Fraction of episodes averaged for a control run's final metric.
    pub final_fraction: Option<f64>,
    /// Use the conventional root-mean-square instead of norm over count.
    pub rms: Option<bool>,
    /// Interval of `softmax.csv` rows.
    pub softmax_every: Option<usize>,
    /// Interval of intermediate checkpoints; none when unset.
    pub checkpoint_every: Option<usize>,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub mode: Mode,
    pub env: EnvConfig,
    pub cell: CellConfig,
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn is_prediction(&self) -> bool {
        matches!(self.env, EnvConfig::Ringworld { .. })
    }

    pub fn cell_kind(&self) -> Result<CellKind> {
        self.cell.kind.parse()
    }

    pub fn dims(&self) -> CellDims {
        let actions = self.env.num_actions();
        CellDims {
            hidden: self.cell.hidden,
            obs: self.env.obs_dim(),
            actions,
            outputs: if self.is_prediction() {
                Horde::ring_world().len()
            } else {
                actions
            },
        }
    }

    /// Fills every unset field with the defaults of the configured task
    /// and checks ranges.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        let p = self.is_prediction();
        let a = &mut c.agent;
        a.tau.get_or_insert(if p { 6 } else { 12 });
        a.batch.get_or_insert(if p { 4 } else { 8 });
        a.update_freq.get_or_insert(4);
        a.target_sync.get_or_insert(1000);
        a.buffer.get_or_insert(if p { 1000 } else { 10_000 });
        a.warmup.get_or_insert(if p { 1000 } else { 0 });
        a.state_mode.get_or_insert(StateMode::Refresh);
        if p {
            a.target_network.get_or_insert(true);
        } else {
            a.gamma.get_or_insert(0.99);
            a.epsilon.get_or_insert(0.1);
        }
        let m = &mut c.metrics;
        m.window.get_or_insert(1000);
        m.rms.get_or_insert(false);
        m.softmax_every.get_or_insert(1000);
        if p {
            m.final_window.get_or_insert(50_000);
        } else {
            m.final_fraction.get_or_insert(0.1);
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        self.cell_kind()?;
        self.optimizer.validate()?;
        let a = &self.agent;
        if self.cell.hidden == 0 {
            return bad("cell.hidden must be positive");
        }
        for (name, v) in [
            ("agent.tau", a.tau),
            ("agent.batch", a.batch),
            ("agent.update_freq", a.update_freq),
            ("agent.target_sync", a.target_sync),
            ("agent.buffer", a.buffer),
            ("metrics.window", self.metrics.window),
            ("metrics.softmax_every", self.metrics.softmax_every),
        ] {
            if v == Some(0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.metrics.checkpoint_every == Some(0) {
            return bad("metrics.checkpoint_every must be positive");
        }
        if let Some(g) = a.gamma {
            if !(0.0..=1.0).contains(&g) {
                return bad("agent.gamma must lie in [0, 1]");
            }
        }
        if let Some(e) = a.epsilon {
            if !(0.0..=1.0).contains(&e) {
                return bad("agent.epsilon must lie in [0, 1]");
            }
        }
        if let Some(f) = self.metrics.final_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad("metrics.final_fraction must lie in (0, 1]");
            }
        }
        if matches!(a.clip, Some(c) if c <= 0.0) {
            return bad("agent.clip must be positive");
        }
        Ok(())
    }
}

/// Saved parameters with enough context to rebuild the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub step: u64,
    pub kind: String,
    pub dims: CellDims,
    pub arrays: Vec<ParamArray>,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, step: u64, params: &CellParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            seed: config.seed,
            step,
            kind: params.kind().to_string(),
            dims: params.dims(),
            arrays: params.arrays().to_vec(),
        }
    }

    pub fn params(&self) -> Result<CellParams> {
        let kind: CellKind = self.kind.parse()?;
        CellParams::from_arrays(kind, self.dims, self.arrays.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Diverged { step: u64, reason: String },
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub status: RunStatus,
    /// Mean RMSVE over the final window, or success rate over the final
    /// fraction of episodes. `NaN` when undefined.
    pub final_metric: f64,
    pub episodes: usize,
    /// Final `(additive, multiplicative)` mean softmax weights, if tracked.
    pub softmax: Option<(f64, f64)>,
}

/// Mean additive and multiplicative weight of a softmax-combined cell.
pub fn track_softmax_weights(params: &CellParams) -> Result<(f64, f64)> {
    let w = params.softmax_weights()?;
    let a = w.iter().sum::<f64>() / w.len() as f64;
    Ok((a, 1.0 - a))
}

fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
    let mk = |s| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    (mk(0), mk(1), mk(2))
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Diverged(_) | Error::NonFinite { .. })
}

struct Outputs {
    dir: PathBuf,
    metrics: csv::Writer<fs::File>,
    softmax: Option<csv::Writer<fs::File>>,
}

impl Outputs {
    fn create(dir: &Path, header: &[&str], softmax: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut metrics = csv_writer(dir.join("metrics.csv"))?;
        metrics.write_record(header)?;
        let softmax = if softmax {
            let mut w = csv_writer(dir.join("softmax.csv"))?;
            w.write_record(["step", "additive", "multiplicative"])?;
            Some(w)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            softmax,
        })
    }

    fn softmax_row(&mut self, step: u64, params: &CellParams) -> Result<Option<(f64, f64)>> {
        match &mut self.softmax {
            Some(w) => {
                let (a, m) = track_softmax_weights(params)?;
                w.write_record([step.to_string(), a.to_string(), m.to_string()])?;
                Ok(Some((a, m)))
            }
            None => Ok(None),
        }
    }

    fn finish(mut self, status: &RunStatus) -> Result<()> {
        self.metrics.flush()?;
        if let Some(w) = &mut self.softmax {
            w.flush()?;
        }
        let text = match status {
            RunStatus::Ok => "ok\n".to_string(),
            RunStatus::Diverged { step, reason } => format!("diverged at step {step}: {reason}\n"),
        };
        fs::write(self.dir.join("status.txt"), text)?;
        Ok(())
    }
}

fn csv_writer(path: PathBuf) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?)
}

fn is_softmax(kind: CellKind) -> bool {
    matches!(kind, CellKind::CombSoftmax { .. })
}

/// Runs one experiment with `seed` overriding the config's, writing every
/// artifact under `out`.
pub fn run(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunSummary> {
    let mut cfg = config.resolved()?;
    cfg.seed = seed;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    if cfg.is_prediction() {
        run_prediction(&cfg, out)
    } else {
        run_control(&cfg, out)
    }
}

fn save_periodic(cfg: &ExperimentConfig, out: &Path, step: u64, params: &CellParams) -> Result<()> {
    if let Some(every) = cfg.metrics.checkpoint_every {
        if step.is_multiple_of(every as u64) {
            Checkpoint::new(cfg, step, params)
                .save(&out.join(format!("checkpoint_{step}.json")))?;
        }
    }
    Ok(())
}

fn run_prediction(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let (mut init_rng, mut env_rng, mut agent_rng) = streams(cfg.seed);
    let kind = cfg.cell_kind()?;
    let params = CellParams::init(kind, cfg.dims(), &mut init_rng)?;
    let a = &cfg.agent;
    let mut agent = PredictionAgent::new(
        params,
        cfg.optimizer,
        Horde::ring_world(),
        PredictionSettings {
            tau: a.tau.unwrap_or(1),
            batch: a.batch.unwrap_or(1),
            state_mode: a.state_mode.unwrap_or_default(),
            target_network: a.target_network.unwrap_or(true),
            behavior_prob: 0.5,
        },
    )?;
    agent.optimizer_mut().clip = a.clip;
    let Env::Ring(mut env) = cfg.env.build(&mut env_rng)? else {
        return Err(Error::Config("prediction runs need the ring world".into()));
    };
    let size = env.size();
    let mut buffer = ReplayBuffer::new(a.buffer.unwrap_or(1))?;
    let mut history = OnlineHistory::new(a.tau.unwrap_or(1));
    let online = cfg.mode == Mode::Online;
    let warmup = a.warmup.unwrap_or(0);
    let update_freq = a.update_freq.unwrap_or(1) as u64;
    let target_sync = a.target_sync.unwrap_or(1) as u64;
    let window = cfg.metrics.window.unwrap_or(1000);
    let final_window = cfg.metrics.final_window.unwrap_or(50_000);
    let use_rms = cfg.metrics.rms.unwrap_or(false);
    let softmax_every = cfg.metrics.softmax_every.unwrap_or(1000) as u64;

    let mut outputs = Outputs::create(out, &["step", "rmsve", "windowed_rmsve"], is_softmax(kind))?;
    let mut obs = env.reset(&mut env_rng);
    let mut h_prev = HiddenState(agent.params.s0().to_vec());
    let mut prev_action = 0;
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(window + 1);
    let mut recent_sum = 0.0;
    let mut tail: VecDeque<f64> = VecDeque::new();
    let mut softmax = None;
    let mut status = RunStatus::Ok;

    for step in 1..=cfg.steps as u64 {
        let result: Result<()> = (|| {
            let h = agent.params.step(&h_prev, &obs, prev_action)?;
            let v = agent.predict(&h)?;
            let oracle = agent.horde.ring_oracle(size, env.position());
            let err = if use_rms {
                rms_error(&v, &oracle)?
            } else {
                rmsve(&v, &oracle)?
            };
            if !err.is_finite() {
                return Err(Error::Diverged("non-finite prediction".into()));
            }
            recent.push_back(err);
            recent_sum += err;
            if recent.len() > window {
                recent_sum -= recent.pop_front().unwrap_or(0.0);
            }
            tail.push_back(err);
            if tail.len() > final_window {
                tail.pop_front();
            }
            let windowed = recent_sum / recent.len() as f64;
            outputs.metrics.write_record([
                step.to_string(),
                err.to_string(),
                windowed.to_string(),
            ])?;

            let action = agent_rng.gen_range(0..2);
            let s = env.step(action)?;
            let t = Transition {
                h_stored: std::mem::replace(&mut h_prev.0, h.0),
                prev_action,
                obs: std::mem::replace(&mut obs, s.obs.clone()),
                action,
                reward: s.reward,
                next_obs: s.obs,
                terminal: s.terminal,
                episode_start: step == 1,
            };
            prev_action = action;
            if online {
                history.push(t.clone());
            }
            buffer.append(t);
            if online {
                agent.update_online(&mut history)?;
            } else if buffer.len() >= warmup && step.is_multiple_of(update_freq) {
                agent.update(&mut buffer, &mut agent_rng)?;
            }
            if step.is_multiple_of(target_sync) {
                agent.sync_target();
            }
            if step.is_multiple_of(softmax_every) {
                softmax = outputs.softmax_row(step, &agent.params)?.or(softmax);
            }
            save_periodic(cfg, out, step, &agent.params)
        })();
        match result {
            Ok(()) => {}
            Err(e) if is_divergence(&e) => {
                status = RunStatus::Diverged {
                    step,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }

    Checkpoint::new(cfg, cfg.steps as u64, &agent.params).save(&out.join("checkpoint.json"))?;
    outputs.finish(&status)?;
    let final_metric = if status != RunStatus::Ok || tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    Ok(RunSummary {
        status,
        final_metric,
        episodes: 0,
        softmax,
    })
}

fn control_loop(
    cfg: &ExperimentConfig,
    params: CellParams,
    env_rng: &mut ChaCha8Rng,
) -> Result<ControlLoop> {
    let a = &cfg.agent;
    let mut agent = QAgent::new(
        params,
        cfg.optimizer,
        ControlSettings {
            tau: a.tau.unwrap_or(1),
            batch: a.batch.unwrap_or(1),
            gamma: a.gamma.unwrap_or(0.99),
            epsilon: a.epsilon.unwrap_or(0.1),
            state_mode: a.state_mode.unwrap_or_default(),
        },
    );
    agent.optimizer_mut().clip = a.clip;
    let env = cfg.env.build(env_rng)?;
    ControlLoop::new(
        agent,
        env,
        a.buffer.unwrap_or(1),
        LoopSettings {
            warmup: a.warmup.unwrap_or(0),
            update_freq: a.update_freq.unwrap_or(1),
            target_sync: a.target_sync.unwrap_or(1),
            online: cfg.mode == Mode::Online,
        },
    )
}

/// Mean success over the final `fraction` of episodes (at least one).
pub fn final_success(successes: &[u8], fraction: f64) -> f64 {
    if successes.is_empty() {
        return f64::NAN;
    }
    let n = ((successes.len() as f64 * fraction).ceil() as usize).clamp(1, successes.len());
    successes[successes.len() - n..]
        .iter()
        .map(|&s| s as f64)
        .sum::<f64>()
        / n as f64
}

fn run_control(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let (mut init_rng, mut env_rng, mut agent_rng) = streams(cfg.seed);
    let kind = cfg.cell_kind()?;
    let params = CellParams::init(kind, cfg.dims(), &mut init_rng)?;
    let mut ctl = control_loop(cfg, params, &mut env_rng)?;
    let softmax_every = cfg.metrics.softmax_every.unwrap_or(1000) as u64;
    let mut outputs = Outputs::create(
        out,
        &["episode", "total_steps", "total_reward", "success"],
        is_softmax(kind),
    )?;
    let mut successes = Vec::new();
    let mut softmax = None;
    let mut status = RunStatus::Ok;
    if cfg.steps > 0 {
        ctl.begin_episode(&[], &mut env_rng)?;
    }
    for step in 1..=cfg.steps as u64 {
        let result: Result<()> = (|| {
            if let Some(rec) = ctl.step(&mut agent_rng)? {
                outputs.metrics.serialize(rec)?;
                successes.push(rec.success);
                ctl.begin_episode(&[], &mut env_rng)?;
            }
            if step.is_multiple_of(softmax_every) {
                softmax = outputs.softmax_row(step, &ctl.agent.params)?.or(softmax);
            }
            save_periodic(cfg, out, step, &ctl.agent.params)
        })();
        match result {
            Ok(()) => {}
            Err(e) if is_divergence(&e) => {
                status = RunStatus::Diverged {
                    step,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Checkpoint::new(cfg, cfg.steps as u64, &ctl.agent.params).save(&out.join("checkpoint.json"))?;
    outputs.finish(&status)?;
    let final_metric = if status == RunStatus::Ok {
        final_success(&successes, cfg.metrics.final_fraction.unwrap_or(0.1))
    } else {
        f64::NAN
    };
    Ok(RunSummary {
        status,
        final_metric,
        episodes: successes.len(),
        softmax,
    })
}

/// Writes `steps` rows of `(step, underlying state, prev action, h…)` from a
/// checkpoint. Prediction checkpoints act with the equiprobable behavior
/// policy, control checkpoints ε-greedily.
pub fn dump_hidden_states<W: Write>(
    ckpt: &Checkpoint,
    steps: usize,
    seed: u64,
    out: W,
) -> Result<()> {
    let params = ckpt.params()?;
    let cfg = ckpt.config.resolved()?;
    let (_, mut env_rng, mut agent_rng) = streams(seed);
    let mut env = cfg.env.build(&mut env_rng)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    let mut header = vec![
        "step".to_string(),
        "state".to_string(),
        "prev_action".to_string(),
    ];
    header.extend((0..params.state_dim()).map(|i| format!("h{i}")));
    w.write_record(&header)?;
    let epsilon = cfg.agent.epsilon.unwrap_or(0.1);
    let mut obs = env.reset(&mut env_rng);
    let mut h = HiddenState(params.s0().to_vec());
    let mut prev_action = 0;
    for step in 1..=steps {
        h = params.step(&h, &obs, prev_action)?;
        let mut row = vec![
            step.to_string(),
            env.underlying_state(),
            prev_action.to_string(),
        ];
        row.extend(h.0.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
        let action = if cfg.is_prediction() {
            agent_rng.gen_range(0..env.num_actions())
        } else {
            crate::control::select_action(&params.head(&h)?, epsilon, &mut agent_rng)
        };
        let s = env.step(action)?;
        prev_action = action;
        obs = s.obs;
        if s.terminal || s.truncated {
            obs = env.reset(&mut env_rng);
            h = HiddenState(params.s0().to_vec());
            prev_action = 0;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs an intervention script from a control checkpoint (fresh optimizer
/// state and empty buffer); writes the episode CSV to `out`.
pub fn intervene<W: Write>(
    ckpt: &Checkpoint,
    script: &InterventionScript,
    seed: u64,
    out: W,
) -> Result<Vec<u8>> {
    let cfg = ckpt.config.resolved()?;
    if cfg.is_prediction() {
        return Err(Error::Config(
            "interventions need a control checkpoint".into(),
        ));
    }
    let (_, mut env_rng, mut agent_rng) = streams(seed);
    let mut ctl = control_loop(&cfg, ckpt.params()?, &mut env_rng)?;
    let records = crate::control::run_intervention(&mut ctl, script, &mut agent_rng)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(["episode", "total_steps", "total_reward", "success"])?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(records.iter().map(|r| r.success).collect())
}

// ------------------------------------------------------------------ sweeps

/// Expands `(x:y:z)`, `b^(x:y:z)` or `c*b^(x:y:z)`: the progression starts
/// at `x`, steps by `y` and stops once past `z`.
pub fn expand_grid(grid: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad grid {grid:?}"));
    let s: String = grid.chars().filter(|c| !c.is_whitespace()).collect();
    let s = s.replace('−', "-").replace(['·', '×'], "*");
    let open = s.find('(').ok_or_else(bad)?;
    let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
    let parts: Vec<f64> = inner
        .split(':')
        .map(|p| p.parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [x, y, z] = parts[..] else {
        return Err(bad());
    };
    if y == 0.0 || (z - x) * y < 0.0 {
        return Err(bad());
    }
    let n = ((z - x) / y + 1e-9).floor() as usize + 1;
    let prog = (0..n).map(|i| x + i as f64 * y);
    let prefix = &s[..open];
    if prefix.is_empty() {
        return Ok(prog.collect());
    }
    let pow = prefix.strip_suffix('^').ok_or_else(bad)?;
    let (coef, base) = match pow.split_once('*') {
        Some((c, b)) => (c.parse::<f64>().map_err(|_| bad())?, b),
        None => (1.0, pow),
    };
    let base: f64 = base.parse().map_err(|_| bad())?;
    Ok(prog.map(|e| coef * base.powf(e)).collect())
}

fn grid_values(v: &toml::Value) -> Result<Vec<toml::Value>> {
    match v {
        toml::Value::Array(a) => Ok(a.clone()),
        toml::Value::String(s) if s.contains('(') && s.contains(':') => Ok(expand_grid(s)?
            .into_iter()
            .map(toml::Value::Float)
            .collect()),
        other => Ok(vec![other.clone()]),
    }
}

fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys
        .pop()
        .ok_or_else(|| Error::Config("empty sweep key".into()))?;
    let mut table = root;
    for k in keys {
        table = table
            .entry(k)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("sweep key {path:?} crosses a non-table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// One point of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Parses a sweep file: an experiment config plus a `[sweep]` table of
/// dotted keys mapped to lists or grid strings. Returns the Cartesian
/// product, outermost axis first in sorted key order.
pub fn expand_sweep(src: &str) -> Result<Vec<GridPoint>> {
    let mut root: toml::Table = src
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let sweep = match root.remove("sweep") {
        Some(toml::Value::Table(t)) => t,
        Some(_) => return Err(Error::Config("[sweep] must be a table".into())),
        None => toml::Table::new(),
    };
    let mut axes: Vec<(String, Vec<toml::Value>)> = Vec::new();
    for (k, v) in flatten(&sweep, "") {
        let vals = grid_values(&v)?;
        if vals.is_empty() {
            return Err(Error::Config(format!("sweep axis {k:?} is empty")));
        }
        axes.push((k, vals));
    }
    let mut points = vec![(String::new(), root)];
    for (key, vals) in &axes {
        let mut next = Vec::with_capacity(points.len() * vals.len());
        for (label, table) in &points {
            for v in vals {
                let mut t = table.clone();
                set_path(&mut t, key, v.clone())?;
                let sep = if label.is_empty() { "" } else { ";" };
                next.push((format!("{label}{sep}{key}={v}"), t));
            }
        }
        points = next;
    }
    points
        .into_iter()
        .map(|(label, t)| {
            let config: ExperimentConfig = toml::Value::Table(t)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            config.resolved()?;
            Ok(GridPoint { label, config })
        })
        .collect()
}

fn flatten(t: &toml::Table, prefix: &str) -> Vec<(String, toml::Value)> {
    let mut out = Vec::new();
    for (k, v) in t {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(inner) => out.extend(flatten(inner, &key)),
            other => out.push((key, other.clone())),
        }
    }
    out
}

/// Mean, standard error and normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn stats(xs: &[f64]) -> Stats {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let se = (var / n as f64).sqrt();
    Stats {
        n,
        mean,
        se,
        ci_low: mean - 1.96 * se,
        ci_high: mean + 1.96 * se,
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: usize,
    pub label: String,
    pub runs: usize,
    pub failed: usize,
    pub mean: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub median: f64,
}

/// Executes every `(point, seed)` pair with `jobs` worker threads, writing
/// runs to `out/<point>/<seed>/` and the aggregate to `out/summary.csv`.
/// Seeds are `base_seed .. base_seed + runs`.
pub fn sweep(points: &[GridPoint], runs: usize, jobs: usize, out: &Path) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(out)?;
    let tasks: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| (0..runs as u64).map(move |r| (p, points[p].config.seed + r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<(usize, Result<RunSummary>)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(p, seed)| {
                let dir = out.join(p.to_string()).join(seed.to_string());
                (p, run(&points[p].config, seed, &dir))
            })
            .collect()
    });
    let mut rows = Vec::new();
    for (p, point) in points.iter().enumerate() {
        let mut finals = Vec::new();
        let mut failed = 0;
        for (_, r) in results.iter().filter(|(q, _)| *q == p) {
            match r {
                Ok(s) if s.status == RunStatus::Ok && s.final_metric.is_finite() => {
                    finals.push(s.final_metric)
                }
                _ => failed += 1,
            }
        }
        let st = stats(&finals);
        rows.push(SweepRow {
            point: p,
            label: point.label.clone(),
            runs,
            failed,
            mean: st.mean,
            se: st.se,
            ci_low: st.ci_low,
            ci_high: st.ci_high,
            median: median(&finals),
        });
    }
    let mut w = csv_writer(out.join("summary.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const RING: &str = r#"
steps = 3000
[env]
name = "ringworld"
[cell]
kind = "MARNN"
hidden = 4
[optimizer]
kind = "rmsprop"
eta = 0.005
"#;

    #[test]
    fn grid_notation() {
        assert_eq!(expand_grid("(1:2:5)").unwrap(), vec![1.0, 3.0, 5.0]);
        assert_eq!(expand_grid("2^(1:2:5)").unwrap(), vec![2.0, 8.0, 32.0]);
        let g = expand_grid("0.1*1.6^(-16:3:-2)").unwrap();
        assert_eq!(g.len(), 5);
        for (v, e) in g.iter().zip([-16, -13, -10, -7, -4]) {
            assert!((v - 0.1 * 1.6f64.powi(e)).abs() < 1e-15);
        }
        assert_eq!(expand_grid("0.01 × 2.0^(−11:2:−2)").unwrap().len(), 5);
        assert!(expand_grid("(1:0:5)").is_err());
        assert!(expand_grid("(5:1:1)").is_err());
    }

    #[test]
    fn config_defaults_and_errors() {
        let c = ExperimentConfig::from_toml(RING)
            .unwrap()
            .resolved()
            .unwrap();
        assert_eq!(c.agent.buffer, Some(1000));
        assert_eq!(c.agent.batch, Some(4));
        assert_eq!(c.dims().outputs, 20);
        assert!(ExperimentConfig::from_toml(&format!("{RING}\nbogus = 1\n")).is_err());
        let bad = RING.replace("MARNN", "XRNN");
        assert!(ExperimentConfig::from_toml(&bad)
            .unwrap()
            .resolved()
            .is_err());
        let round = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn sweep_expansion() {
        let src = format!(
            "{RING}\n[sweep]\n\"optimizer.eta\" = \"0.1*1.6^(-16:3:-2)\"\n\"agent.tau\" = [1, 6]\n"
        );
        let pts = expand_sweep(&src).unwrap();
        assert_eq!(pts.len(), 10);
        assert_eq!(pts[1].config.agent.tau, Some(1));
        assert_eq!(pts[5].config.agent.tau, Some(6));
        let one = expand_sweep(RING).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].config, ExperimentConfig::from_toml(RING).unwrap());
    }

    #[test]
    fn stats_and_success() {
        let s = stats(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(final_success(&[0, 0, 0, 0, 0, 0, 0, 0, 1, 1], 0.1), 1.0);
        assert_eq!(final_success(&[1, 0, 1, 0], 0.5), 0.5);
    }

    #[test]
    fn zero_step_run_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::from_toml(RING).unwrap();
        c.steps = 0;
        let s = run(&c, 3, dir.path()).unwrap();
        assert_eq!(s.status, RunStatus::Ok);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.trim(), "step,rmsve,windowed_rmsve");
        let ck = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
        let kind = c.cell_kind().unwrap();
        let (mut init, _, _) = streams(3);
        assert_eq!(
            ck.params().unwrap(),
            CellParams::init(kind, c.dims(), &mut init).unwrap()
        );
    }

    #[test]
    fn prediction_run_and_dump() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::from_toml(RING).unwrap();
        let s = run(&c, 1, dir.path()).unwrap();
        assert_eq!(s.status, RunStatus::Ok);
        assert!(s.final_metric.is_finite());
        let rows = fs::read_to_string(dir.path().join("metrics.csv"))
            .unwrap()
            .lines()
            .count();
        assert_eq!(rows, 3001);
        let ck = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
        let mut a = Vec::new();
        dump_hidden_states(&ck, 50, 7, &mut a).unwrap();
        let mut b = Vec::new();
        dump_hidden_states(&ck, 50, 7, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 51);
        let mut empty = Vec::new();
        dump_hidden_states(&ck, 0, 7, &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().lines().count(), 1);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::from_toml(RING)
            .unwrap()
            .resolved()
            .unwrap();
        let p = CellParams::init(
            c.cell_kind().unwrap(),
            c.dims(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let ck = Checkpoint::new(&c, 12, &p);
        let path = dir.path().join("c.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), p);
    }

    #[test]
    fn softmax_tracking_needs_softmax_cell() {
        let dims = CellDims {
            hidden: 3,
            obs: 3,
            actions: 3,
            outputs: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = CellParams::init("SoftmaxGRU".parse().unwrap(), dims, &mut rng).unwrap();
        assert_eq!(track_softmax_weights(&p).unwrap(), (0.5, 0.5));
        let q = CellParams::init(CellKind::GRU, dims, &mut rng).unwrap();
        assert!(matches!(
            track_softmax_weights(&q),
            Err(Error::WrongKind(_))
        ));
    }

    #[test]
    fn control_run_with_softmax_and_intervention() {
        let src = r#"
steps = 2000
[env]
name = "dirtmaze"
length = 4
[cell]
kind = "SoftmaxGRU"
hidden = 4
[optimizer]
kind = "rmsprop"
eta = 0.001
rho = 0.99
[agent]
buffer = 500
[metrics]
softmax_every = 500
"#;
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::from_toml(src).unwrap();
        let s = run(&c, 5, dir.path()).unwrap();
        assert_eq!(s.status, RunStatus::Ok);
        assert!(s.episodes > 0);
        let (a, m) = s.softmax.unwrap();
        assert!((a + m - 1.0).abs() < 1e-12);
        let rows = fs::read_to_string(dir.path().join("softmax.csv"))
            .unwrap()
            .lines()
            .count();
        assert_eq!(rows, 5);
        let ck = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
        let mut outb = Vec::new();
        let succ = intervene(&ck, &InterventionScript::naive(300), 1, &mut outb).unwrap();
        assert_eq!(
            String::from_utf8(outb).unwrap().lines().count(),
            succ.len() + 1
        );
    }

    #[test]
    fn divergence_is_recorded() {
        let src = RING.replace("eta = 0.005", "eta = 1e300");
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::from_toml(&src).unwrap();
        let s = run(&c, 1, dir.path()).unwrap();
        assert!(matches!(s.status, RunStatus::Diverged { .. }), "{s:?}");
        let status = fs::read_to_string(dir.path().join("status.txt")).unwrap();
        assert!(status.starts_with("diverged"));
    }
}
