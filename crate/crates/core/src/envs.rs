//! The partially observable environments and the Ring World value oracle.
//!
//! Positions and actions are zero-based throughout. Ring World's active-bit
//! state is position 0; a TMaze hallway runs from position 0 (the goal-cue
//! cell) to position `length` (the junction).

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// True termination (bootstrapping stops).
    pub terminal: bool,
    /// Episode cut off by the step limit; not a true termination.
    pub truncated: bool,
    /// Terminal transition into the correct goal.
    pub success: bool,
}

impl EnvStep {
    pub fn episode_over(&self) -> bool {
        self.terminal || self.truncated
    }
}

const STEP_REWARD: f64 = -0.1;
const GOAL_REWARD: f64 = 4.0;
const WRONG_REWARD: f64 = -1.0;

fn check_action(action: usize, num_actions: usize) -> Result<()> {
    if action < num_actions {
        Ok(())
    } else {
        Err(Error::InvalidAction {
            action,
            num_actions,
        })
    }
}

// ---------------------------------------------------------------- Ring World

/// Persistent direction around the ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Clockwise,
    CounterClockwise,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Clockwise, Direction::CounterClockwise];

    pub fn action(self) -> usize {
        match self {
            Self::Clockwise => RingWorld::CW,
            Self::CounterClockwise => RingWorld::CCW,
        }
    }
}

/// A cycle of `size` states; only state 0 shows an active bit.
#[derive(Debug, Clone, PartialEq)]
pub struct RingWorld {
    size: usize,
    pos: usize,
}

impl RingWorld {
    pub const CW: usize = 0;
    pub const CCW: usize = 1;

    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "ring size must be at least 2, got {size}"
            )));
        }
        Ok(Self { size, pos: 0 })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn set_position(&mut self, pos: usize) {
        self.pos = pos % self.size;
    }

    pub fn observe(&self) -> Vec<f64> {
        vec![if self.pos == 0 { 1.0 } else { 0.0 }]
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.pos = rng.gen_range(0..self.size);
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<EnvStep> {
        check_action(action, 2)?;
        self.pos = if action == Self::CW {
            (self.pos + 1) % self.size
        } else {
            (self.pos + self.size - 1) % self.size
        };
        Ok(EnvStep {
            obs: self.observe(),
            reward: 0.0,
            terminal: false,
            truncated: false,
            success: false,
        })
    }
}

/// Number of persistent steps from `position` until the active state is
/// entered. The active state itself needs a full loop.
pub fn ring_distance(size: usize, direction: Direction, position: usize) -> usize {
    let pos = position % size;
    let d = match direction {
        Direction::Clockwise => (size - pos) % size,
        Direction::CounterClockwise => pos,
    };
    if d == 0 {
        size
    } else {
        d
    }
}

/// True value of the bit-cumulant, state-terminating GVF under a persistent
/// policy: `γ^(d−1)`.
pub fn ring_oracle_value(size: usize, gamma: f64, direction: Direction, position: usize) -> f64 {
    (1..ring_distance(size, direction, position)).fold(1.0, |v, _| v * gamma)
}

// --------------------------------------------------------------------- TMaze

/// Which arm of the junction holds the goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalSide {
    North,
    South,
}

impl GoalSide {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.gen_bool(0.5) {
            Self::North
        } else {
            Self::South
        }
    }
}

/// Default step limit for a hallway of the given length.
pub fn tmaze_timeout(length: usize) -> usize {
    2 * (length + 1) * 4
}

/// Hallway with a T-junction; actions are N, E, S, W.
#[derive(Debug, Clone, PartialEq)]
pub struct TMaze {
    length: usize,
    timeout: usize,
    pos: usize,
    goal: GoalSide,
    steps: usize,
    done: bool,
}

impl TMaze {
    pub const NORTH: usize = 0;
    pub const EAST: usize = 1;
    pub const SOUTH: usize = 2;
    pub const WEST: usize = 3;

    pub fn new(length: usize, timeout: usize) -> Result<Self> {
        if length == 0 || timeout == 0 {
            return Err(Error::Config(
                "tmaze length and timeout must be positive".into(),
            ));
        }
        Ok(Self {
            length,
            timeout,
            pos: 0,
            goal: GoalSide::North,
            steps: 0,
            done: false,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn goal(&self) -> GoalSide {
        self.goal
    }

    pub fn at_junction(&self) -> bool {
        self.pos == self.length
    }

    pub fn observe(&self) -> Vec<f64> {
        if self.pos == 0 {
            match self.goal {
                GoalSide::North => vec![1.0, 1.0, 0.0],
                GoalSide::South => vec![0.0, 1.0, 1.0],
            }
        } else if self.at_junction() {
            vec![0.0, 1.0, 0.0]
        } else {
            vec![1.0, 0.0, 1.0]
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.reset_with_goal(GoalSide::random(rng))
    }

    pub fn reset_with_goal(&mut self, goal: GoalSide) -> Vec<f64> {
        self.goal = goal;
        self.pos = 0;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::EpisodeOver);
        }
        check_action(action, 4)?;
        self.steps += 1;
        let mut out = EnvStep {
            obs: Vec::new(),
            reward: STEP_REWARD,
            terminal: false,
            truncated: false,
            success: false,
        };
        match action {
            Self::EAST => self.pos = (self.pos + 1).min(self.length),
            Self::WEST => self.pos = self.pos.saturating_sub(1),
            _ if self.at_junction() => {
                let chosen = if action == Self::NORTH {
                    GoalSide::North
                } else {
                    GoalSide::South
                };
                out.terminal = true;
                out.success = chosen == self.goal;
                out.reward = if out.success {
                    GOAL_REWARD
                } else {
                    WRONG_REWARD
                };
            }
            _ => {}
        }
        out.truncated = !out.terminal && self.steps >= self.timeout;
        self.done = out.episode_over();
        out.obs = self.observe();
        Ok(out)
    }
}

// --------------------------------------------------------- Directional TMaze

/// Compass heading; clockwise order N → E → S → W.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    const ORDER: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    fn index(self) -> usize {
        self as usize
    }

    pub fn cw(self) -> Self {
        Self::ORDER[(self.index() + 1) % 4]
    }

    pub fn ccw(self) -> Self {
        Self::ORDER[(self.index() + 3) % 4]
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::North => "N",
            Self::East => "E",
            Self::South => "S",
            Self::West => "W",
        };
        f.write_str(s)
    }
}

/// TMaze with an orientation; actions are forward, turn clockwise, turn
/// counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DirTMaze {
    maze: TMaze,
    heading: Heading,
    /// Overrides the random start heading (used by interventions).
    pub forced_heading: Option<Heading>,
}

impl DirTMaze {
    pub const FORWARD: usize = 0;
    pub const TURN_CW: usize = 1;
    pub const TURN_CCW: usize = 2;

    pub fn new(length: usize, timeout: usize) -> Result<Self> {
        Ok(Self {
            maze: TMaze::new(length, timeout)?,
            heading: Heading::East,
            forced_heading: None,
        })
    }

    pub fn position(&self) -> usize {
        self.maze.pos
    }

    pub fn heading(&self) -> Heading {
        self.heading
    }

    pub fn goal(&self) -> GoalSide {
        self.maze.goal
    }

    fn facing_open(&self) -> bool {
        let m = &self.maze;
        match self.heading {
            Heading::East => m.pos < m.length,
            Heading::West => m.pos > 0,
            Heading::North | Heading::South => m.at_junction(),
        }
    }

    pub fn observe(&self) -> Vec<f64> {
        if self.facing_open() {
            return vec![0.0, 0.0, 1.0];
        }
        let goal_wall = match self.maze.goal {
            GoalSide::North => Heading::North,
            GoalSide::South => Heading::South,
        };
        if self.maze.pos == 0 && self.heading == goal_wall {
            vec![1.0, 1.0, 0.0]
        } else {
            vec![0.0, 1.0, 0.0]
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        let goal = GoalSide::random(rng);
        let heading = match self.forced_heading {
            Some(h) => h,
            None => Heading::ORDER[rng.gen_range(0..4)],
        };
        self.reset_with(goal, heading)
    }

    pub fn reset_with(&mut self, goal: GoalSide, heading: Heading) -> Vec<f64> {
        self.maze.reset_with_goal(goal);
        self.heading = heading;
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.maze.done {
            return Err(Error::EpisodeOver);
        }
        check_action(action, 3)?;
        let m = &mut self.maze;
        m.steps += 1;
        let mut out = EnvStep {
            obs: Vec::new(),
            reward: STEP_REWARD,
            terminal: false,
            truncated: false,
            success: false,
        };
        match action {
            Self::TURN_CW => self.heading = self.heading.cw(),
            Self::TURN_CCW => self.heading = self.heading.ccw(),
            _ => match self.heading {
                Heading::East => m.pos = (m.pos + 1).min(m.length),
                Heading::West => m.pos = m.pos.saturating_sub(1),
                h if m.at_junction() => {
                    let chosen = if h == Heading::North {
                        GoalSide::North
                    } else {
                        GoalSide::South
                    };
                    out.terminal = true;
                    out.success = chosen == m.goal;
                    out.reward = if out.success {
                        GOAL_REWARD
                    } else {
                        WRONG_REWARD
                    };
                }
                _ => {}
            },
        }
        let m = &mut self.maze;
        out.truncated = !out.terminal && m.steps >= m.timeout;
        m.done = out.episode_over();
        out.obs = self.observe();
        Ok(out)
    }
}

// -------------------------------------------------------- Masked Grid World

/// Toroidal grid where a fixed random subset of cells shows an (aliased)
/// bit. Goal and aliased cells are drawn once, at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGridWorld {
    width: usize,
    height: usize,
    timeout: usize,
    aliased: Vec<bool>,
    goal: (usize, usize),
    pos: (usize, usize),
    steps: usize,
    done: bool,
}

impl MaskedGridWorld {
    pub const NORTH: usize = 0;
    pub const EAST: usize = 1;
    pub const SOUTH: usize = 2;
    pub const WEST: usize = 3;

    pub fn new<R: Rng + ?Sized>(
        width: usize,
        height: usize,
        num_aliased: usize,
        timeout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cells = width * height;
        if cells < 2 || num_aliased >= cells || timeout == 0 {
            return Err(Error::Config(format!(
                "masked grid world needs at least 2 cells, fewer than {cells} aliased cells and a positive timeout"
            )));
        }
        let goal_idx = rng.gen_range(0..cells);
        let mut aliased = vec![false; cells];
        for i in sample(rng, cells - 1, num_aliased) {
            aliased[if i >= goal_idx { i + 1 } else { i }] = true;
        }
        Ok(Self::with_layout(
            width,
            height,
            timeout,
            aliased,
            (goal_idx % width, goal_idx / width),
        ))
    }

    /// Explicit layout; `aliased` is indexed by `y·width + x`.
    pub fn with_layout(
        width: usize,
        height: usize,
        timeout: usize,
        aliased: Vec<bool>,
        goal: (usize, usize),
    ) -> Self {
        Self {
            width,
            height,
            timeout,
            aliased,
            goal,
            pos: (0, 0),
            steps: 0,
            done: false,
        }
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    pub fn is_aliased(&self, cell: (usize, usize)) -> bool {
        self.aliased[cell.1 * self.width + cell.0]
    }

    pub fn observe(&self) -> Vec<f64> {
        vec![if self.is_aliased(self.pos) { 1.0 } else { 0.0 }]
    }

    /// Starts from a uniformly random non-goal cell.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        let cells = self.width * self.height;
        let goal_idx = self.goal.1 * self.width + self.goal.0;
        let mut i = rng.gen_range(0..cells - 1);
        if i >= goal_idx {
            i += 1;
        }
        self.reset_at((i % self.width, i / self.width))
    }

    pub fn reset_at(&mut self, pos: (usize, usize)) -> Vec<f64> {
        self.pos = (pos.0 % self.width, pos.1 % self.height);
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::EpisodeOver);
        }
        check_action(action, 4)?;
        self.steps += 1;
        let (x, y) = self.pos;
        let (w, h) = (self.width, self.height);
        self.pos = match action {
            Self::NORTH => (x, (y + 1) % h),
            Self::SOUTH => (x, (y + h - 1) % h),
            Self::EAST => ((x + 1) % w, y),
            _ => ((x + w - 1) % w, y),
        };
        let terminal = self.pos == self.goal;
        let truncated = !terminal && self.steps >= self.timeout;
        self.done = terminal || truncated;
        Ok(EnvStep {
            obs: self.observe(),
            reward: if terminal { 1.0 } else { 0.0 },
            terminal,
            truncated,
            success: terminal,
        })
    }
}

// ------------------------------------------------------------ configuration

/// Declarative environment selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvConfig {
    Ringworld {
        #[serde(default = "default_ring")]
        size: usize,
    },
    Tmaze {
        #[serde(default = "default_length")]
        length: usize,
        timeout: Option<usize>,
    },
    Dirtmaze {
        #[serde(default = "default_length")]
        length: usize,
        timeout: Option<usize>,
    },
    Maskedgw {
        #[serde(default = "default_grid")]
        width: usize,
        #[serde(default = "default_grid")]
        height: usize,
        #[serde(default = "default_aliased")]
        aliased: usize,
        timeout: Option<usize>,
    },
}

fn default_ring() -> usize {
    10
}
fn default_length() -> usize {
    10
}
fn default_grid() -> usize {
    10
}
fn default_aliased() -> usize {
    10
}

impl EnvConfig {
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Env> {
        Ok(match *self {
            Self::Ringworld { size } => Env::Ring(RingWorld::new(size)?),
            Self::Tmaze { length, timeout } => Env::TMaze(TMaze::new(
                length,
                timeout.unwrap_or(tmaze_timeout(length)),
            )?),
            Self::Dirtmaze { length, timeout } => Env::DirTMaze(DirTMaze::new(
                length,
                timeout.unwrap_or(tmaze_timeout(length)),
            )?),
            Self::Maskedgw {
                width,
                height,
                aliased,
                timeout,
            } => Env::MaskedGW(MaskedGridWorld::new(
                width,
                height,
                aliased,
                timeout.unwrap_or(500),
                rng,
            )?),
        })
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Self::Ringworld { .. } | Self::Maskedgw { .. } => 1,
            Self::Tmaze { .. } | Self::Dirtmaze { .. } => 3,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Self::Ringworld { .. } => 2,
            Self::Dirtmaze { .. } => 3,
            Self::Tmaze { .. } | Self::Maskedgw { .. } => 4,
        }
    }
}

/// Any of the supported environments.
#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Ring(RingWorld),
    TMaze(TMaze),
    DirTMaze(DirTMaze),
    MaskedGW(MaskedGridWorld),
}

impl Env {
    pub fn obs_dim(&self) -> usize {
        match self {
            Self::Ring(_) | Self::MaskedGW(_) => 1,
            Self::TMaze(_) | Self::DirTMaze(_) => 3,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Self::Ring(_) => 2,
            Self::DirTMaze(_) => 3,
            Self::TMaze(_) | Self::MaskedGW(_) => 4,
        }
    }

    pub fn is_episodic(&self) -> bool {
        !matches!(self, Self::Ring(_))
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        match self {
            Self::Ring(e) => e.reset(rng),
            Self::TMaze(e) => e.reset(rng),
            Self::DirTMaze(e) => e.reset(rng),
            Self::MaskedGW(e) => e.reset(rng),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<EnvStep> {
        match self {
            Self::Ring(e) => e.step(action),
            Self::TMaze(e) => e.step(action),
            Self::DirTMaze(e) => e.step(action),
            Self::MaskedGW(e) => e.step(action),
        }
    }

    /// Compact description of the hidden underlying state, for dumps.
    pub fn underlying_state(&self) -> String {
        match self {
            Self::Ring(e) => e.position().to_string(),
            Self::TMaze(e) => format!("{}:{:?}", e.position(), e.goal()),
            Self::DirTMaze(e) => format!("{}:{}:{:?}", e.position(), e.heading(), e.goal()),
            Self::MaskedGW(e) => format!("{}:{}", e.position().0, e.position().1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ring_moves() {
        let mut r = RingWorld::new(10).unwrap();
        r.set_position(0);
        let s = r.step(RingWorld::CW).unwrap();
        assert_eq!((r.position(), s.obs.clone()), (1, vec![0.0]));
        let s = r.step(RingWorld::CCW).unwrap();
        assert_eq!((r.position(), s.obs), (0, vec![1.0]));
        let mut bits = 0.0;
        for _ in 0..10 {
            bits += r.step(RingWorld::CW).unwrap().obs[0];
        }
        assert_eq!((r.position(), bits), (0, 1.0));
        assert!(r.step(2).is_err());
    }

    #[test]
    fn ring_oracle_examples() {
        assert_eq!(ring_oracle_value(10, 0.5, Direction::Clockwise, 9), 1.0);
        assert_eq!(
            ring_oracle_value(10, 0.5, Direction::CounterClockwise, 1),
            1.0
        );
        assert!((ring_oracle_value(10, 0.9, Direction::Clockwise, 7) - 0.81).abs() < 1e-15);
        assert_eq!(ring_oracle_value(10, 0.0, Direction::Clockwise, 9), 1.0);
        assert_eq!(ring_oracle_value(10, 0.0, Direction::Clockwise, 8), 0.0);
        assert_eq!(ring_distance(10, Direction::Clockwise, 0), 10);
        assert_eq!(ring_distance(10, Direction::CounterClockwise, 0), 10);
    }

    #[test]
    fn tmaze_examples() {
        let mut t = TMaze::new(10, 88).unwrap();
        assert_eq!(t.reset_with_goal(GoalSide::North), vec![1.0, 1.0, 0.0]);
        assert_eq!(t.reset_with_goal(GoalSide::South), vec![0.0, 1.0, 1.0]);
        t.step(TMaze::EAST).unwrap();
        let s = t.step(TMaze::NORTH).unwrap();
        assert_eq!(
            (t.position(), s.reward, s.obs, s.terminal),
            (1, -0.1, vec![1.0, 0.0, 1.0], false)
        );
        for _ in 0..9 {
            t.step(TMaze::EAST).unwrap();
        }
        assert_eq!(t.observe(), vec![0.0, 1.0, 0.0]);
        let s = t.step(TMaze::EAST).unwrap();
        assert_eq!(t.position(), 10);
        assert!(!s.terminal);
        let s = t.step(TMaze::SOUTH).unwrap();
        assert!(s.terminal && s.success);
        assert_eq!(s.reward, 4.0);
        assert!(matches!(t.step(TMaze::EAST), Err(Error::EpisodeOver)));

        t.reset_with_goal(GoalSide::North);
        for _ in 0..10 {
            t.step(TMaze::EAST).unwrap();
        }
        let s = t.step(TMaze::SOUTH).unwrap();
        assert!(s.terminal && !s.success);
        assert_eq!(s.reward, -1.0);
    }

    #[test]
    fn tmaze_timeout_truncates() {
        let mut t = TMaze::new(10, tmaze_timeout(10)).unwrap();
        t.reset_with_goal(GoalSide::North);
        for i in 1..=88 {
            let s = t.step(TMaze::WEST).unwrap();
            assert_eq!(s.truncated, i == 88);
            assert!(!s.terminal);
        }
    }

    #[test]
    fn dirtmaze_examples() {
        let mut d = DirTMaze::new(10, 88).unwrap();
        assert_eq!(
            d.reset_with(GoalSide::North, Heading::North),
            vec![1.0, 1.0, 0.0]
        );
        assert_eq!(
            d.reset_with(GoalSide::North, Heading::South),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            d.reset_with(GoalSide::North, Heading::West),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            d.reset_with(GoalSide::North, Heading::East),
            vec![0.0, 0.0, 1.0]
        );
        for _ in 0..4 {
            d.step(DirTMaze::TURN_CW).unwrap();
        }
        assert_eq!((d.position(), d.heading()), (0, Heading::East));

        d.reset_with(GoalSide::South, Heading::North);
        let s = d.step(DirTMaze::FORWARD).unwrap();
        assert_eq!((d.position(), s.obs), (0, vec![0.0, 1.0, 0.0]));
        d.step(DirTMaze::TURN_CW).unwrap();
        for _ in 0..10 {
            d.step(DirTMaze::FORWARD).unwrap();
        }
        assert_eq!(d.position(), 10);
        assert_eq!(d.observe(), vec![0.0, 1.0, 0.0]);
        let s = d.step(DirTMaze::TURN_CW).unwrap();
        assert_eq!(s.obs, vec![0.0, 0.0, 1.0]);
        let s = d.step(DirTMaze::FORWARD).unwrap();
        assert!(s.terminal && s.success);
        assert_eq!(s.reward, 4.0);
    }

    #[test]
    fn dirtmaze_forced_heading() {
        let mut d = DirTMaze::new(10, 88).unwrap();
        d.forced_heading = Some(Heading::East);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            d.reset(&mut rng);
            assert_eq!(d.heading(), Heading::East);
        }
    }

    #[test]
    fn maskedgw_wraps_and_terminates() {
        let mut g = MaskedGridWorld::with_layout(5, 5, 500, vec![false; 25], (2, 2));
        g.reset_at((0, 0));
        g.step(MaskedGridWorld::WEST).unwrap();
        assert_eq!(g.position(), (4, 0));
        for _ in 0..10 {
            assert_eq!(g.step(MaskedGridWorld::SOUTH).unwrap().obs, vec![0.0]);
        }
        g.reset_at((1, 2));
        let s = g.step(MaskedGridWorld::EAST).unwrap();
        assert!(s.terminal && s.success);
        assert_eq!(s.reward, 1.0);
    }

    #[test]
    fn maskedgw_layout_is_seeded() {
        let a = MaskedGridWorld::new(10, 10, 10, 500, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = MaskedGridWorld::new(10, 10, 10, 500, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.aliased.iter().filter(|&&x| x).count(), 10);
        assert!(!a.is_aliased(a.goal()));
    }

    #[test]
    fn config_builds_each_env() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for src in [
            "name = \"ringworld\"",
            "name = \"tmaze\"\nlength = 6",
            "name = \"dirtmaze\"",
            "name = \"maskedgw\"\nwidth = 5\nheight = 5\naliased = 3",
        ] {
            let c: EnvConfig = toml::from_str(src).unwrap();
            let mut e = c.build(&mut rng).unwrap();
            assert_eq!(e.obs_dim(), c.obs_dim());
            assert_eq!(e.num_actions(), c.num_actions());
            assert_eq!(e.reset(&mut rng).len(), c.obs_dim());
        }
        assert!(toml::from_str::<EnvConfig>("name = \"tmaze\"\nsize = 3").is_err());
    }
}
