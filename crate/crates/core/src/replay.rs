//! Episodic replay with stored recurrent states, sequence sampling and
//! stored-state refresh, plus the trailing window used by online agents.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One environment step together with the state the agent held before it.
///
/// The recurrent update at this step is `h_t = cell(h_stored, obs, prev_action)`;
/// `action` is then taken from `h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub h_stored: Vec<f64>,
    pub prev_action: usize,
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    /// First transition of an episode; `h_stored` is then a placeholder and
    /// the live `s0` is used instead.
    pub episode_start: bool,
}

/// How sampled sequences obtain their initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateMode {
    /// Stored states, updated with their gradient after each learning step.
    #[default]
    Refresh,
    /// Stored states, never modified after append.
    Stale,
    /// Zero vector (episode starts still use `s0`).
    Zero,
}

/// A sampled training sequence. Transitions are `start_id .. start_id + len`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub start_id: u64,
    pub len: usize,
    pub h_init: Vec<f64>,
    /// Initial state came from `s0`.
    pub from_s0: bool,
}

impl SampledSequence {
    pub fn anchor_id(&self) -> u64 {
        self.start_id + self.len as u64 - 1
    }
}

/// FIFO ring of transitions. Every transition receives a monotone id.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next_id: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next_id: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Id of the oldest retained transition.
    pub fn oldest_id(&self) -> u64 {
        self.next_id - self.items.len() as u64
    }

    pub fn contains(&self, id: u64) -> bool {
        id >= self.oldest_id() && id < self.next_id
    }

    pub fn get(&self, id: u64) -> Option<&Transition> {
        self.contains(id)
            .then(|| &self.items[(id % self.capacity as u64) as usize])
    }

    fn get_mut(&mut self, id: u64) -> Option<&mut Transition> {
        if self.contains(id) {
            Some(&mut self.items[(id % self.capacity as u64) as usize])
        } else {
            None
        }
    }

    /// Inserts, evicting the oldest transition when full. Returns the id.
    pub fn append(&mut self, t: Transition) -> u64 {
        let id = self.next_id;
        let slot = (id % self.capacity as u64) as usize;
        if slot < self.items.len() {
            self.items[slot] = t;
        } else {
            self.items.push(t);
        }
        self.next_id += 1;
        id
    }

    /// Transitions of a sampled sequence, oldest first.
    pub fn sequence(&self, seq: &SampledSequence) -> Vec<&Transition> {
        (seq.start_id..seq.start_id + seq.len as u64)
            .filter_map(|id| self.get(id))
            .collect()
    }

    /// The sequence of at most `tau` transitions ending at `anchor`, never
    /// extending backward past an episode start or the oldest entry.
    pub fn sequence_ending_at(
        &self,
        anchor: u64,
        tau: usize,
        s0: &[f64],
        mode: StateMode,
    ) -> Result<SampledSequence> {
        let first = self.get(anchor).ok_or(Error::EmptyBuffer)?;
        let mut start = anchor;
        let mut cur = first;
        let mut len = 1;
        while len < tau && !cur.episode_start && start > self.oldest_id() {
            start -= 1;
            cur = &self.items[(start % self.capacity as u64) as usize];
            len += 1;
        }
        let from_s0 = cur.episode_start;
        let h_init = if from_s0 {
            s0.to_vec()
        } else if mode == StateMode::Zero {
            vec![0.0; s0.len()]
        } else {
            cur.h_stored.clone()
        };
        Ok(SampledSequence {
            start_id: start,
            len,
            h_init,
            from_s0,
        })
    }

    /// Draws `batch` anchors uniformly over stored transitions.
    pub fn sample_sequences<R: Rng + ?Sized>(
        &self,
        batch: usize,
        tau: usize,
        s0: &[f64],
        mode: StateMode,
        rng: &mut R,
    ) -> Result<Vec<SampledSequence>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if tau == 0 {
            return Err(Error::Config("truncation must be at least 1".into()));
        }
        let oldest = self.oldest_id();
        (0..batch)
            .map(|_| {
                let anchor = oldest + rng.gen_range(0..self.items.len() as u64);
                self.sequence_ending_at(anchor, tau, s0, mode)
            })
            .collect()
    }

    /// Applies `h ← h − η·g` to the stored initial state of each sequence.
    /// Sequences that start at `s0` or whose start has been evicted are
    /// skipped.
    pub fn refresh_states(
        &mut self,
        seqs: &[SampledSequence],
        grads_h_init: &[Vec<f64>],
        eta: f64,
    ) {
        for (seq, g) in seqs.iter().zip(grads_h_init) {
            if seq.from_s0 {
                continue;
            }
            if let Some(t) = self.get_mut(seq.start_id) {
                for (h, g) in t.h_stored.iter_mut().zip(g) {
                    *h -= eta * g;
                }
            }
        }
    }
}

/// The trailing `tau` transitions of `history`, cut at the last episode
/// start.
pub fn online_window(history: &[Transition], tau: usize) -> &[Transition] {
    let from = history.len().saturating_sub(tau);
    let tail = &history[from..];
    match tail.iter().rposition(|t| t.episode_start) {
        Some(i) => &tail[i..],
        None => tail,
    }
}

/// Bounded history kept by an online (replay-free) learner.
#[derive(Debug, Clone)]
pub struct OnlineHistory {
    tau: usize,
    items: VecDeque<Transition>,
}

impl OnlineHistory {
    pub fn new(tau: usize) -> Self {
        Self {
            tau: tau.max(1),
            items: VecDeque::with_capacity(tau + 1),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if t.episode_start {
            self.items.clear();
        }
        self.items.push_back(t);
        while self.items.len() > self.tau {
            self.items.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn window(&mut self) -> &[Transition] {
        self.items.make_contiguous()
    }

    /// Initial state for the current window.
    pub fn h_init(&self, s0: &[f64]) -> (Vec<f64>, bool) {
        match self.items.front() {
            Some(t) if t.episode_start => (s0.to_vec(), true),
            Some(t) => (t.h_stored.clone(), false),
            None => (s0.to_vec(), true),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(i: usize, start: bool) -> Transition {
        Transition {
            h_stored: vec![i as f64, -(i as f64)],
            prev_action: i % 2,
            obs: vec![i as f64],
            action: (i + 1) % 2,
            reward: i as f64 * 0.5,
            next_obs: vec![i as f64 + 1.0],
            terminal: false,
            episode_start: start,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(2).unwrap();
        assert!(b.is_empty());
        b.append(tr(0, true));
        assert_eq!(b.len(), 1);
        b.append(tr(1, false));
        b.append(tr(2, false));
        assert_eq!(b.len(), 2);
        assert!(b.get(0).is_none());
        assert_eq!(b.get(1).unwrap(), &tr(1, false));
        assert_eq!(b.get(2).unwrap(), &tr(2, false));
    }

    #[test]
    fn sequence_lengths() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for i in 0..10 {
            b.append(tr(i, i == 0 || i == 5));
        }
        let s0 = [9.0, 9.0];
        let s = b.sequence_ending_at(5, 6, &s0, StateMode::Refresh).unwrap();
        assert_eq!((s.len, s.from_s0, s.h_init.clone()), (1, true, s0.to_vec()));
        let s = b.sequence_ending_at(7, 6, &s0, StateMode::Refresh).unwrap();
        assert_eq!((s.start_id, s.len, s.from_s0), (5, 3, true));
        let s = b.sequence_ending_at(2, 1, &s0, StateMode::Refresh).unwrap();
        assert_eq!((s.start_id, s.len, s.h_init), (2, 1, vec![2.0, -2.0]));
        let s = b.sequence_ending_at(9, 3, &s0, StateMode::Zero).unwrap();
        assert_eq!((s.start_id, s.h_init), (7, vec![0.0, 0.0]));
    }

    #[test]
    fn sequences_stop_at_oldest_entry() {
        let mut b = ReplayBuffer::new(4).unwrap();
        for i in 0..10 {
            b.append(tr(i, i == 0));
        }
        let s = b
            .sequence_ending_at(7, 8, &[0.0, 0.0], StateMode::Stale)
            .unwrap();
        assert_eq!((s.start_id, s.len, s.from_s0), (6, 2, false));
    }

    #[test]
    fn refresh_read_your_write() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for i in 0..5 {
            b.append(tr(i, i == 0));
        }
        let s0 = [0.0, 0.0];
        let s = b.sequence_ending_at(3, 2, &s0, StateMode::Refresh).unwrap();
        b.refresh_states(std::slice::from_ref(&s), &[vec![0.0, 0.0]], 0.5);
        assert_eq!(b.get(2).unwrap().h_stored, vec![2.0, -2.0]);
        b.refresh_states(std::slice::from_ref(&s), &[vec![1.0, 2.0]], 0.5);
        let again = b.sequence_ending_at(3, 2, &s0, StateMode::Refresh).unwrap();
        assert_eq!(again.h_init, vec![1.5, -3.0]);
        let first = b.sequence_ending_at(1, 5, &s0, StateMode::Refresh).unwrap();
        assert!(first.from_s0);
        b.refresh_states(&[first], &[vec![1.0, 1.0]], 0.5);
        assert_eq!(b.get(0).unwrap().h_stored, vec![0.0, 0.0]);
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut b = ReplayBuffer::new(50).unwrap();
        for i in 0..80 {
            b.append(tr(i, i % 7 == 0));
        }
        let s0 = [0.0, 0.0];
        let a = b
            .sample_sequences(
                16,
                4,
                &s0,
                StateMode::Refresh,
                &mut ChaCha8Rng::seed_from_u64(3),
            )
            .unwrap();
        let c = b
            .sample_sequences(
                16,
                4,
                &s0,
                StateMode::Refresh,
                &mut ChaCha8Rng::seed_from_u64(3),
            )
            .unwrap();
        assert_eq!(a, c);
        assert!(ReplayBuffer::new(3)
            .unwrap()
            .sample_sequences(
                1,
                1,
                &s0,
                StateMode::Refresh,
                &mut ChaCha8Rng::seed_from_u64(0)
            )
            .is_err());
    }

    #[test]
    fn online_windows() {
        let hist: Vec<Transition> = (0..10).map(|i| tr(i, i == 0 || i == 8)).collect();
        assert_eq!(online_window(&hist[..3], 5).len(), 3);
        assert_eq!(online_window(&hist[..7], 5).len(), 5);
        assert_eq!(online_window(&hist, 5).len(), 2);

        let mut h = OnlineHistory::new(3);
        for t in hist.iter().take(6) {
            h.push(t.clone());
        }
        assert_eq!(h.len(), 3);
        assert_eq!(h.h_init(&[7.0, 7.0]), (vec![3.0, -3.0], false));
        h.push(tr(6, true));
        assert_eq!(h.len(), 1);
        assert_eq!(h.h_init(&[7.0, 7.0]), (vec![7.0, 7.0], true));
    }
}
