#![allow(dead_code)]

use action_rnn::autodiff::{bptt_backward, unroll_forward, WindowStep};
use action_rnn::cells::{CellDims, CellKind, CellParams};
use action_rnn::envs::RingWorld;
use action_rnn::optim::OptimConfig;
use action_rnn::prediction::{Horde, PredictionAgent, PredictionSettings};
use action_rnn::replay::{ReplayBuffer, SampledSequence, StateMode, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every kind the gradient checks cover.
pub const ALL_KINDS: &[&str] = &[
    "RNN",
    "AARNN",
    "DARNN(a=3)",
    "MARNN",
    "DMARNN(a=2)",
    "FacRNN(M=3)",
    "GRU",
    "AAGRU",
    "DAGRU(a=3)",
    "MAGRU",
    "DMAGRU(a=2)",
    "FacGRU(M=3)",
    "SoftmaxRNN",
    "SoftmaxGRU",
    "CatRNN",
    "CatGRU",
    "MoERNN(K=2,g=4)",
    "MoEGRU(K=3,g=3)",
];

pub fn randomized(kind: CellKind, dims: CellDims, seed: u64) -> CellParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = CellParams::zeros(kind, dims).unwrap();
    for arr in p.arrays_mut() {
        arr.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.7..0.7));
    }
    p
}

/// Fixed linear functional of the head output, `L = Σ c_i q_i`.
fn loss(p: &CellParams, h0: &[f64], window: &[(Vec<f64>, usize)], c: &[f64]) -> f64 {
    let steps: Vec<WindowStep<'_>> = window
        .iter()
        .map(|(o, a)| WindowStep {
            obs: o,
            prev_action: *a,
        })
        .collect();
    let u = unroll_forward(p, h0, &steps).unwrap();
    u.output().iter().zip(c).map(|(q, c)| q * c).sum()
}

pub struct GradCheck {
    pub coords: usize,
    pub worst_rel: f64,
    pub worst_name: String,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares tape gradients against central differences (ε = 1e-6) for
/// every parameter coordinate and every coordinate of the initial state.
pub fn check_gradients(kind_name: &str, t: usize, seed: u64) -> GradCheck {
    let kind: CellKind = kind_name.parse().unwrap();
    let dims = CellDims {
        hidden: 5,
        obs: 4,
        actions: 3,
        outputs: 2,
    };
    let mut p = randomized(kind, dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let h0: Vec<f64> = (0..p.state_dim())
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    let window: Vec<(Vec<f64>, usize)> = (0..t)
        .map(|_| {
            let o = (0..dims.obs).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (o, rng.gen_range(0..dims.actions))
        })
        .collect();
    let c: Vec<f64> = (0..dims.outputs)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();

    let steps: Vec<WindowStep<'_>> = window
        .iter()
        .map(|(o, a)| WindowStep {
            obs: o,
            prev_action: *a,
        })
        .collect();
    let mut u = unroll_forward(&p, &h0, &steps).unwrap();
    let grads = bptt_backward(&mut u, &p, &c).unwrap();

    let eps = 1e-6;
    let mut out = GradCheck {
        coords: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
    };
    for id in 0..p.arrays().len() {
        for i in 0..p.arrays()[id].data.len() {
            let orig = p.arrays()[id].data[i];
            p.arrays_mut()[id].data[i] = orig + eps;
            let up = loss(&p, &h0, &window, &c);
            p.arrays_mut()[id].data[i] = orig - eps;
            let down = loss(&p, &h0, &window, &c);
            p.arrays_mut()[id].data[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let r = rel(grads.params[id][i], fd);
            out.coords += 1;
            if r > out.worst_rel {
                out.worst_rel = r;
                out.worst_name = format!("{}[{i}]", p.arrays()[id].name);
            }
        }
    }
    for i in 0..h0.len() {
        let mut hp = h0.clone();
        hp[i] += eps;
        let up = loss(&p, &hp, &window, &c);
        hp[i] -= 2.0 * eps;
        let down = loss(&p, &hp, &window, &c);
        let fd = (up - down) / (2.0 * eps);
        let r = rel(grads.h_init[i], fd);
        out.coords += 1;
        if r > out.worst_rel {
            out.worst_rel = r;
            out.worst_name = format!("h_init[{i}]");
        }
    }
    out
}

/// Synthetic Ring World replay: `n` transitions into a buffer of
/// `capacity`, with an episode boundary forced with probability
/// `p_start` and stored states drawn at random.
pub fn ring_buffer(
    seed: u64,
    capacity: usize,
    n: usize,
    p_start: f64,
    hidden: usize,
) -> ReplayBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = RingWorld::new(10).unwrap();
    let mut buf = ReplayBuffer::new(capacity).unwrap();
    let mut obs = env.reset(&mut rng);
    let mut prev = 0;
    for i in 0..n {
        let start = i == 0 || rng.gen_bool(p_start);
        if start {
            obs = env.reset(&mut rng);
            prev = 0;
        }
        let action = rng.gen_range(0..2);
        let s = env.step(action).unwrap();
        buf.append(Transition {
            h_stored: (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            prev_action: prev,
            obs: std::mem::replace(&mut obs, s.obs.clone()),
            action,
            reward: 0.0,
            next_obs: s.obs,
            terminal: false,
            episode_start: start,
        });
        prev = action;
    }
    buf
}

/// Episode-start flags of a sampled sequence after its first transition.
pub fn crosses_episode_start(buf: &ReplayBuffer, seq: &SampledSequence) -> bool {
    buf.sequence(seq).iter().skip(1).any(|t| t.episode_start)
}

pub fn prediction_agent(kind: &str, hidden: usize, mode: StateMode, seed: u64) -> PredictionAgent {
    let dims = CellDims {
        hidden,
        obs: 1,
        actions: 2,
        outputs: 20,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CellParams::init(kind.parse().unwrap(), dims, &mut rng).unwrap();
    PredictionAgent::new(
        params,
        OptimConfig::Rmsprop {
            eta: 0.01,
            rho: 0.9,
        },
        Horde::ring_world(),
        PredictionSettings {
            tau: 4,
            batch: 4,
            state_mode: mode,
            target_network: true,
            behavior_prob: 0.5,
        },
    )
    .unwrap()
}

/// Runs `updates` learning steps from identical agents and buffers in
/// stale and refresh mode. Returns `(params equal after the first update,
/// non-state fields always equal, stored states differ at the end)`.
pub fn stale_vs_refresh(seed: u64, updates: usize) -> (bool, bool, bool) {
    let mut bufs = [
        ring_buffer(seed, 64, 200, 0.05, 6),
        ring_buffer(seed, 64, 200, 0.05, 6),
    ];
    let mut agents = [
        prediction_agent("MARNN", 6, StateMode::Stale, seed),
        prediction_agent("MARNN", 6, StateMode::Refresh, seed),
    ];
    let mut first_equal = true;
    let mut fields_equal = true;
    for u in 0..updates {
        for i in 0..2 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(u as u64));
            agents[i].update(&mut bufs[i], &mut rng).unwrap();
        }
        if u == 0 {
            first_equal = agents[0].params == agents[1].params;
        }
        for id in bufs[0].oldest_id()..bufs[0].oldest_id() + bufs[0].len() as u64 {
            let (a, b) = (bufs[0].get(id).unwrap(), bufs[1].get(id).unwrap());
            fields_equal &= a.prev_action == b.prev_action
                && a.obs == b.obs
                && a.action == b.action
                && a.reward == b.reward
                && a.next_obs == b.next_obs
                && a.terminal == b.terminal
                && a.episode_start == b.episode_start;
        }
    }
    let states_differ = (bufs[0].oldest_id()..bufs[0].oldest_id() + bufs[0].len() as u64)
        .any(|id| bufs[0].get(id).unwrap().h_stored != bufs[1].get(id).unwrap().h_stored);
    (first_equal, fields_equal, states_differ)
}
