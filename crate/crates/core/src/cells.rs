//! Recurrent cell architectures: parameter layout, initialization, counting,
//! and the forward definitions that the tape records.
//!
//! Every cell reads `x = [obs; h_prev]` and the encoding of the action taken
//! on the previous step. The kinds differ only in how that action enters the
//! pre-activation of each gate:
//!
//! | action input      | pre-activation                          |
//! |-------------------|-----------------------------------------|
//! | none              | `W x + b`                               |
//! | additive          | `W x + Wₐ a + b`                        |
//! | deep additive     | additive, with `a = relu(E onehot + e)` |
//! | multiplicative    | `W ×₂ x ×₃ a + B a`                     |
//! | factored (rank M) | `U (λ ⊙ Vᵀx ⊙ Cᵀa) + b`                 |
//!
//! A GRU applies the same rule to each of its reset, update and candidate
//! gates. Combined cells run an additive and a multiplicative sub-cell side
//! by side, and the mixture-of-experts cell blends several additive experts
//! with a learned per-element softmax gate.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{check_len, Error, Result};

/// Index of a parameter array inside [`CellParams`].
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Base {
    Rnn,
    Gru,
}

impl Base {
    fn suffix(self) -> &'static str {
        match self {
            Base::Rnn => "RNN",
            Base::Gru => "GRU",
        }
    }
}

/// How the previous action enters a single cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionInput {
    None,
    Additive,
    DeepAdditive { width: usize },
    Multiplicative,
    DeepMultiplicative { width: usize },
    Factored { rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Single {
        base: Base,
        action: ActionInput,
    },
    CombSoftmax {
        base: Base,
    },
    CombConcat {
        base: Base,
    },
    MoE {
        base: Base,
        experts: usize,
        gate_hidden: usize,
    },
}

impl CellKind {
    pub const RNN: CellKind = CellKind::single(Base::Rnn, ActionInput::None);
    pub const AARNN: CellKind = CellKind::single(Base::Rnn, ActionInput::Additive);
    pub const MARNN: CellKind = CellKind::single(Base::Rnn, ActionInput::Multiplicative);
    pub const GRU: CellKind = CellKind::single(Base::Gru, ActionInput::None);
    pub const AAGRU: CellKind = CellKind::single(Base::Gru, ActionInput::Additive);
    pub const MAGRU: CellKind = CellKind::single(Base::Gru, ActionInput::Multiplicative);

    pub const fn single(base: Base, action: ActionInput) -> Self {
        CellKind::Single { base, action }
    }

    pub fn base(&self) -> Base {
        match *self {
            CellKind::Single { base, .. }
            | CellKind::CombSoftmax { base }
            | CellKind::CombConcat { base }
            | CellKind::MoE { base, .. } => base,
        }
    }

    /// Short name: `RNN`, `AARNN`, `DAGRU`, `FacRNN`, `SoftmaxGRU`, ...
    pub fn name(&self) -> String {
        let prefix = match self {
            CellKind::Single { action, .. } => match action {
                ActionInput::None => "",
                ActionInput::Additive => "AA",
                ActionInput::DeepAdditive { .. } => "DA",
                ActionInput::Multiplicative => "MA",
                ActionInput::DeepMultiplicative { .. } => "DMA",
                ActionInput::Factored { .. } => "Fac",
            },
            CellKind::CombSoftmax { .. } => "Softmax",
            CellKind::CombConcat { .. } => "Cat",
            CellKind::MoE { .. } => "MoE",
        };
        format!("{prefix}{}", self.base().suffix())
    }

    /// Builds a kind from its short name plus the size arguments some kinds
    /// need (`rank` for factored, `width` for deep, `experts`/`gate_hidden`
    /// for mixtures).
    pub fn from_parts(
        name: &str,
        rank: Option<usize>,
        width: Option<usize>,
        experts: Option<usize>,
        gate_hidden: Option<usize>,
    ) -> Result<Self> {
        let (prefix, base) = if let Some(p) = name.strip_suffix("RNN") {
            (p, Base::Rnn)
        } else if let Some(p) = name.strip_suffix("GRU") {
            (p, Base::Gru)
        } else {
            return Err(Error::Config(format!("unknown cell kind {name:?}")));
        };
        let need = |v: Option<usize>, what: &str| {
            v.filter(|&v| v >= 1)
                .ok_or_else(|| Error::Config(format!("cell kind {name} requires {what} >= 1")))
        };
        let action = match prefix {
            "" | "NA" => ActionInput::None,
            "AA" => ActionInput::Additive,
            "DA" | "DAA" => ActionInput::DeepAdditive {
                width: need(width, "action_width")?,
            },
            "MA" => ActionInput::Multiplicative,
            "DMA" => ActionInput::DeepMultiplicative {
                width: need(width, "action_width")?,
            },
            "Fac" => ActionInput::Factored {
                rank: need(rank, "rank")?,
            },
            "Softmax" => return Ok(CellKind::CombSoftmax { base }),
            "Cat" => return Ok(CellKind::CombConcat { base }),
            "MoE" => {
                return Ok(CellKind::MoE {
                    base,
                    experts: need(experts, "experts")?,
                    gate_hidden: need(gate_hidden, "gate_hidden")?,
                })
            }
            _ => return Err(Error::Config(format!("unknown cell kind {name:?}"))),
        };
        Ok(CellKind::Single { base, action })
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())?;
        match self {
            CellKind::Single {
                action:
                    ActionInput::DeepAdditive { width } | ActionInput::DeepMultiplicative { width },
                ..
            } => write!(f, "(a={width})"),
            CellKind::Single {
                action: ActionInput::Factored { rank },
                ..
            } => write!(f, "(M={rank})"),
            CellKind::MoE {
                experts,
                gate_hidden,
                ..
            } => write!(f, "(K={experts},g={gate_hidden})"),
            _ => Ok(()),
        }
    }
}

impl FromStr for CellKind {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form, e.g. `FacGRU(M=21)`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = match s.split_once('(') {
            Some((n, rest)) => (
                n,
                rest.strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("bad cell kind {s:?}")))?,
            ),
            None => (s, ""),
        };
        let (mut rank, mut width, mut experts, mut gate) = (None, None, None, None);
        for kv in args.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad cell argument {kv:?}")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad cell argument {kv:?}")))?;
            match k.trim() {
                "M" => rank = Some(v),
                "a" => width = Some(v),
                "K" => experts = Some(v),
                "g" => gate = Some(v),
                _ => return Err(Error::Config(format!("bad cell argument {kv:?}"))),
            }
        }
        CellKind::from_parts(name.trim(), rank, width, experts, gate)
    }
}

/// Sizes shared by every kind. `hidden` is the size of one cell; combined
/// concatenation cells carry a state of `2 · hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub hidden: usize,
    pub obs: usize,
    pub actions: usize,
    pub outputs: usize,
}

/// Recurrent state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Encoding of the previous action fed to a cell.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionEncoding {
    /// One-hot over the environment's actions; passed through the deep
    /// encoder when the kind has one.
    OneHot(Vec<f64>),
    /// Already-encoded dense vector, fed to the gates as is.
    Dense(Vec<f64>),
}

impl ActionEncoding {
    pub fn one_hot(action: usize, num_actions: usize) -> Result<Self> {
        if action >= num_actions {
            return Err(Error::InvalidAction {
                action,
                num_actions,
            });
        }
        let mut v = vec![0.0; num_actions];
        v[action] = 1.0;
        Ok(ActionEncoding::OneHot(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            ActionEncoding::OneHot(v) | ActionEncoding::Dense(v) => v,
        }
    }
}

/// A named learnable array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zero,
    One,
    /// Xavier-uniform matrix over its own (fan_in = cols, fan_out = rows).
    Xavier,
    /// Order-3 tensor; each action slice is an independent Xavier matrix.
    XavierSlices,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Gate {
    Plain {
        w: ParamId,
        b: ParamId,
    },
    Additive {
        w: ParamId,
        wa: ParamId,
        b: ParamId,
    },
    Mult {
        w: ParamId,
        ba: ParamId,
    },
    Factored {
        out: ParamId,
        lambda: ParamId,
        inp: ParamId,
        act: ParamId,
        b: ParamId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unit {
    Rnn(Gate),
    Gru { r: Gate, z: Gate, h: Gate },
}

#[derive(Debug, Clone, PartialEq)]
enum Core {
    Single(Unit),
    Softmax {
        add: Unit,
        mult: Unit,
        theta_a: ParamId,
        theta_m: ParamId,
    },
    Concat {
        add: Unit,
        mult: Unit,
    },
    Moe {
        experts: Vec<Unit>,
        hidden_w: ParamId,
        hidden_b: ParamId,
        out_w: ParamId,
        out_b: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    core: Core,
    encoder: Option<(ParamId, ParamId)>,
    head_w: ParamId,
    head_b: ParamId,
    s0: ParamId,
}

#[derive(Default)]
struct Builder {
    arrays: Vec<ParamArray>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        let len = shape.iter().product();
        self.arrays.push(ParamArray {
            name,
            shape,
            data: vec![0.0; len],
        });
        self.inits.push(init);
        self.arrays.len() - 1
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.add(name, vec![rows, cols], Init::Xavier)
    }

    fn vector(&mut self, name: String, len: usize, init: Init) -> ParamId {
        self.add(name, vec![len], init)
    }

    /// One gate producing `n` pre-activations from an input of width `j`
    /// and an action vector of width `k`.
    fn gate(
        &mut self,
        prefix: &str,
        action: ActionInput,
        n: usize,
        j: usize,
        k: usize,
        shared: Option<(ParamId, ParamId)>,
    ) -> Gate {
        match action {
            ActionInput::None => Gate::Plain {
                w: self.matrix(format!("{prefix}.w"), n, j),
                b: self.vector(format!("{prefix}.b"), n, Init::Zero),
            },
            ActionInput::Additive | ActionInput::DeepAdditive { .. } => Gate::Additive {
                w: self.matrix(format!("{prefix}.w"), n, j),
                wa: self.matrix(format!("{prefix}.wa"), n, k),
                b: self.vector(format!("{prefix}.b"), n, Init::Zero),
            },
            ActionInput::Multiplicative | ActionInput::DeepMultiplicative { .. } => Gate::Mult {
                w: self.add(format!("{prefix}.w"), vec![n, j, k], Init::XavierSlices),
                ba: self.add(format!("{prefix}.ba"), vec![n, k], Init::Zero),
            },
            ActionInput::Factored { rank } => {
                let (inp, act) = shared.unwrap_or_else(|| self.factors(prefix, rank, j, k));
                Gate::Factored {
                    out: self.matrix(format!("{prefix}.w_out"), n, rank),
                    lambda: self.vector(format!("{prefix}.lambda"), rank, Init::One),
                    inp,
                    act,
                    b: self.vector(format!("{prefix}.b"), n, Init::Zero),
                }
            }
        }
    }

    fn factors(&mut self, prefix: &str, rank: usize, j: usize, k: usize) -> (ParamId, ParamId) {
        (
            self.matrix(format!("{prefix}.w_in"), j, rank),
            self.matrix(format!("{prefix}.w_act"), k, rank),
        )
    }

    fn unit(
        &mut self,
        prefix: &str,
        base: Base,
        action: ActionInput,
        n: usize,
        j: usize,
        k: usize,
    ) -> Unit {
        match base {
            Base::Rnn => Unit::Rnn(self.gate(&format!("{prefix}rnn"), action, n, j, k, None)),
            Base::Gru => {
                // Factored GRUs share the input and action factors across
                // gates; the output factor and λ stay per gate.
                let shared = match action {
                    ActionInput::Factored { rank } => {
                        Some(self.factors(&format!("{prefix}gru"), rank, j, k))
                    }
                    _ => None,
                };
                Unit::Gru {
                    r: self.gate(&format!("{prefix}gru.r"), action, n, j, k, shared),
                    z: self.gate(&format!("{prefix}gru.z"), action, n, j, k, shared),
                    h: self.gate(&format!("{prefix}gru.h"), action, n, j, k, shared),
                }
            }
        }
    }
}

fn state_dim_of(kind: CellKind, hidden: usize) -> usize {
    match kind {
        CellKind::CombConcat { .. } => 2 * hidden,
        _ => hidden,
    }
}

fn build(kind: CellKind, dims: CellDims) -> Result<(Layout, Builder)> {
    if dims.hidden == 0 || dims.obs == 0 || dims.actions == 0 || dims.outputs == 0 {
        return Err(Error::Config(format!(
            "all cell dimensions must be positive: {dims:?}"
        )));
    }
    let n = dims.hidden;
    let s = state_dim_of(kind, n);
    let j = dims.obs + s;
    let mut b = Builder::default();

    let (core, encoder) = match kind {
        CellKind::Single { base, action } => {
            let (encoder, k) = match action {
                ActionInput::DeepAdditive { width } | ActionInput::DeepMultiplicative { width } => {
                    if width == 0 {
                        return Err(Error::Config("action_width must be >= 1".into()));
                    }
                    let w = b.matrix("encoder.w".into(), width, dims.actions);
                    let e = b.vector("encoder.b".into(), width, Init::Zero);
                    (Some((w, e)), width)
                }
                ActionInput::Factored { rank: 0 } => {
                    return Err(Error::Config("factored rank must be >= 1".into()));
                }
                _ => (None, dims.actions),
            };
            (Core::Single(b.unit("", base, action, n, j, k)), encoder)
        }
        CellKind::CombSoftmax { base } => {
            let add = b.unit("add.", base, ActionInput::Additive, n, j, dims.actions);
            let mult = b.unit(
                "mult.",
                base,
                ActionInput::Multiplicative,
                n,
                j,
                dims.actions,
            );
            let theta_a = b.vector("theta_a".into(), n, Init::Zero);
            let theta_m = b.vector("theta_m".into(), n, Init::Zero);
            (
                Core::Softmax {
                    add,
                    mult,
                    theta_a,
                    theta_m,
                },
                None,
            )
        }
        CellKind::CombConcat { base } => {
            let add = b.unit("add.", base, ActionInput::Additive, n, j, dims.actions);
            let mult = b.unit(
                "mult.",
                base,
                ActionInput::Multiplicative,
                n,
                j,
                dims.actions,
            );
            (Core::Concat { add, mult }, None)
        }
        CellKind::MoE {
            base,
            experts,
            gate_hidden,
        } => {
            if experts == 0 || gate_hidden == 0 {
                return Err(Error::Config("experts and gate_hidden must be >= 1".into()));
            }
            let units = (0..experts)
                .map(|e| {
                    b.unit(
                        &format!("expert{e}."),
                        base,
                        ActionInput::Additive,
                        n,
                        j,
                        dims.actions,
                    )
                })
                .collect();
            let hidden_w = b.matrix("gating.hidden.w".into(), gate_hidden, j + dims.actions);
            let hidden_b = b.vector("gating.hidden.b".into(), gate_hidden, Init::Zero);
            let out_w = b.matrix("gating.out.w".into(), experts * n, gate_hidden);
            let out_b = b.vector("gating.out.b".into(), experts * n, Init::Zero);
            (
                Core::Moe {
                    experts: units,
                    hidden_w,
                    hidden_b,
                    out_w,
                    out_b,
                },
                None,
            )
        }
    };
    let head_w = b.matrix("head.w".into(), dims.outputs, s);
    let head_b = b.vector("head.b".into(), dims.outputs, Init::Zero);
    let s0 = b.vector("s0".into(), s, Init::Zero);
    Ok((
        Layout {
            core,
            encoder,
            head_w,
            head_b,
            s0,
        },
        b,
    ))
}

/// Learnable weights of one cell, its output head, and the episode-start
/// state `s0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    kind: CellKind,
    dims: CellDims,
    arrays: Vec<ParamArray>,
    layout: Layout,
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, out: &mut [f64]) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in out {
        *v = rng.gen_range(-bound..=bound);
    }
}

impl CellParams {
    /// Xavier-uniform weights (each action slice of a tensor sampled as its
    /// own matrix), zero biases, unit λ, zero `s0`.
    pub fn init<R: Rng + ?Sized>(kind: CellKind, dims: CellDims, rng: &mut R) -> Result<Self> {
        let (layout, mut b) = build(kind, dims)?;
        for (arr, init) in b.arrays.iter_mut().zip(&b.inits) {
            match init {
                Init::Zero => {}
                Init::One => arr.data.iter_mut().for_each(|v| *v = 1.0),
                Init::Xavier => {
                    let (rows, cols) = (arr.shape[0], arr.shape[1]);
                    xavier(rng, cols, rows, &mut arr.data);
                }
                Init::XavierSlices => {
                    let (ni, nj, nk) = (arr.shape[0], arr.shape[1], arr.shape[2]);
                    let mut slice = vec![0.0; ni * nj];
                    for k in 0..nk {
                        xavier(rng, nj, ni, &mut slice);
                        for i in 0..ni {
                            for j in 0..nj {
                                arr.data[(i * nj + j) * nk + k] = slice[i * nj + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            kind,
            dims,
            arrays: b.arrays,
            layout,
        })
    }

    /// All-zero parameters with the layout of `kind`.
    pub fn zeros(kind: CellKind, dims: CellDims) -> Result<Self> {
        let (layout, b) = build(kind, dims)?;
        Ok(Self {
            kind,
            dims,
            arrays: b.arrays,
            layout,
        })
    }

    /// Rebuilds parameters from stored arrays, checking names and shapes
    /// against the layout of `kind`.
    pub fn from_arrays(kind: CellKind, dims: CellDims, arrays: Vec<ParamArray>) -> Result<Self> {
        let (layout, b) = build(kind, dims)?;
        if b.arrays.len() != arrays.len() {
            return Err(Error::Checkpoint(format!(
                "{kind} expects {} arrays, found {}",
                b.arrays.len(),
                arrays.len()
            )));
        }
        for (want, got) in b.arrays.iter().zip(&arrays) {
            if want.name != got.name || want.shape != got.shape || want.data.len() != got.data.len()
            {
                return Err(Error::Checkpoint(format!(
                    "array mismatch: expected {} {:?}, found {} {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
        }
        Ok(Self {
            kind,
            dims,
            arrays,
            layout,
        })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn dims(&self) -> CellDims {
        self.dims
    }

    pub fn state_dim(&self) -> usize {
        state_dim_of(self.kind, self.dims.hidden)
    }

    pub fn arrays(&self) -> &[ParamArray] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ParamArray] {
        &mut self.arrays
    }

    pub fn array(&self, id: ParamId) -> &[f64] {
        &self.arrays[id].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.arrays.iter().position(|a| a.name == name)
    }

    pub(crate) fn matrix_shape(&self, id: ParamId) -> (usize, usize) {
        let s = &self.arrays[id].shape;
        (s[0], s[1])
    }

    pub(crate) fn tensor_shape(&self, id: ParamId) -> (usize, usize, usize) {
        let s = &self.arrays[id].shape;
        (s[0], s[1], s[2])
    }

    /// Total number of learnable scalars (cell, encoder, head, `s0`).
    pub fn count_params(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    /// The learnable episode-start state.
    pub fn s0(&self) -> &[f64] {
        self.array(self.layout.s0)
    }

    pub fn s0_id(&self) -> ParamId {
        self.layout.s0
    }

    pub fn is_finite(&self) -> bool {
        self.arrays
            .iter()
            .all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    pub fn copy_from(&mut self, other: &CellParams) {
        for (dst, src) in self.arrays.iter_mut().zip(&other.arrays) {
            dst.data.copy_from_slice(&src.data);
        }
    }

    /// One step of the state update.
    pub fn cell_forward(
        &self,
        h_prev: &HiddenState,
        obs: &[f64],
        action: &ActionEncoding,
    ) -> Result<HiddenState> {
        if !h_prev.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                op: "cell_forward (h_prev)",
            });
        }
        check_len("cell_forward (h_prev)", self.state_dim(), h_prev.0.len())?;
        let mut tape = Tape::new();
        let h = tape.constant(&h_prev.0)?;
        let out = self.emit_step(&mut tape, h, obs, action)?;
        Ok(HiddenState(tape.value(out).to_vec()))
    }

    /// Convenience for acting: the previous action given by id.
    pub fn step(
        &self,
        h_prev: &HiddenState,
        obs: &[f64],
        prev_action: usize,
    ) -> Result<HiddenState> {
        self.cell_forward(
            h_prev,
            obs,
            &ActionEncoding::one_hot(prev_action, self.dims.actions)?,
        )
    }

    /// Linear head `W_q h + b_q`.
    pub fn head(&self, h: &HiddenState) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let node = tape.constant(&h.0)?;
        let out = self.emit_head(&mut tape, node)?;
        Ok(tape.value(out).to_vec())
    }

    /// The action encoder applied to a one-hot; identity when the kind has no
    /// encoder.
    pub fn deep_action_encode(&self, onehot: &[f64]) -> Result<Vec<f64>> {
        check_len("deep_action_encode", self.dims.actions, onehot.len())?;
        let mut tape = Tape::new();
        let a = tape.constant(onehot)?;
        let out = self.emit_action(&mut tape, a, true)?;
        Ok(tape.value(out).to_vec())
    }

    /// Per-element additive weight `e^{θa}/(e^{θa}+e^{θm})` of a softmax
    /// combined cell.
    pub fn softmax_weights(&self) -> Result<Vec<f64>> {
        match self.layout.core {
            Core::Softmax {
                theta_a, theta_m, ..
            } => Ok(self
                .array(theta_a)
                .iter()
                .zip(self.array(theta_m))
                .map(|(a, m)| crate::autodiff::logistic(a - m))
                .collect()),
            _ => Err(Error::WrongKind(format!(
                "softmax weights requested for {}",
                self.kind
            ))),
        }
    }

    fn emit_action(&self, tape: &mut Tape, onehot: NodeId, encode: bool) -> Result<NodeId> {
        match (self.layout.encoder, encode) {
            (Some((w, b)), true) => {
                let lin = tape.matvec(self, w, onehot)?;
                let pre = tape.add_param(self, lin, b)?;
                tape.relu(pre)
            }
            _ => Ok(onehot),
        }
    }

    pub(crate) fn emit_head(&self, tape: &mut Tape, h: NodeId) -> Result<NodeId> {
        let lin = tape.matvec(self, self.layout.head_w, h)?;
        tape.add_param(self, lin, self.layout.head_b)
    }

    fn emit_gate(&self, tape: &mut Tape, gate: Gate, x: NodeId, a: NodeId) -> Result<NodeId> {
        match gate {
            Gate::Plain { w, b } => {
                let lin = tape.matvec(self, w, x)?;
                tape.add_param(self, lin, b)
            }
            Gate::Additive { w, wa, b } => {
                let lx = tape.matvec(self, w, x)?;
                let la = tape.matvec(self, wa, a)?;
                let sum = tape.add(lx, la)?;
                tape.add_param(self, sum, b)
            }
            Gate::Mult { w, ba } => {
                let prod = tape.nmode(self, w, x, a)?;
                let bias = tape.matvec(self, ba, a)?;
                tape.add(prod, bias)
            }
            Gate::Factored {
                out,
                lambda,
                inp,
                act,
                b,
            } => {
                let u = tape.matvec_t(self, inp, x)?;
                let v = tape.matvec_t(self, act, a)?;
                let uv = tape.mul(u, v)?;
                let scaled = tape.mul_param(self, uv, lambda)?;
                let lin = tape.matvec(self, out, scaled)?;
                tape.add_param(self, lin, b)
            }
        }
    }

    /// `own` is the unit's carried state; `x` is `[obs; h_prev]`.
    fn emit_unit(
        &self,
        tape: &mut Tape,
        unit: Unit,
        obs: NodeId,
        ctx: Option<NodeId>,
        own: NodeId,
        a: NodeId,
    ) -> Result<NodeId> {
        let input = |tape: &mut Tape, carried: NodeId| -> Result<NodeId> {
            let lead = match ctx {
                Some(c) => tape.concat(obs, c)?,
                None => obs,
            };
            tape.concat(lead, carried)
        };
        match unit {
            Unit::Rnn(g) => {
                let x = input(tape, own)?;
                let pre = self.emit_gate(tape, g, x, a)?;
                tape.tanh(pre)
            }
            Unit::Gru { r, z, h } => {
                let x = input(tape, own)?;
                let rp = self.emit_gate(tape, r, x, a)?;
                let r = tape.logistic(rp)?;
                let zp = self.emit_gate(tape, z, x, a)?;
                let z = tape.logistic(zp)?;
                let gated = tape.mul(r, own)?;
                let xc = input(tape, gated)?;
                let hp = self.emit_gate(tape, h, xc, a)?;
                let cand = tape.tanh(hp)?;
                // (1 − z) ⊙ h + z ⊙ h̃
                let delta = tape.sub(cand, own)?;
                let step = tape.mul(z, delta)?;
                tape.add(own, step)
            }
        }
    }

    /// Records one state update `h' = f(h, obs, a)` on `tape`.
    pub(crate) fn emit_step(
        &self,
        tape: &mut Tape,
        h_prev: NodeId,
        obs: &[f64],
        action: &ActionEncoding,
    ) -> Result<NodeId> {
        check_len("cell_forward (obs)", self.dims.obs, obs.len())?;
        let o = tape.constant(obs)?;
        let a = match action {
            ActionEncoding::OneHot(v) => {
                check_len("cell_forward (action)", self.dims.actions, v.len())?;
                let raw = tape.constant(v)?;
                self.emit_action(tape, raw, true)?
            }
            ActionEncoding::Dense(v) => tape.constant(v)?,
        };
        let n = self.dims.hidden;
        match &self.layout.core {
            Core::Single(unit) => self.emit_unit(tape, *unit, o, None, h_prev, a),
            Core::Softmax {
                add,
                mult,
                theta_a,
                theta_m,
            } => {
                let sa = self.emit_unit(tape, *add, o, None, h_prev, a)?;
                let sm = self.emit_unit(tape, *mult, o, None, h_prev, a)?;
                tape.softmax_mix(self, *theta_a, *theta_m, sa, sm)
            }
            Core::Concat { add, mult } => {
                // Each half carries its own state and sees the other half as
                // extra input, so both read the full previous state.
                let ha = tape.slice(h_prev, 0, n)?;
                let hm = tape.slice(h_prev, n, n)?;
                let sa = self.emit_unit(tape, *add, o, Some(hm), ha, a)?;
                let sm = self.emit_unit(tape, *mult, o, Some(ha), hm, a)?;
                tape.concat(sa, sm)
            }
            Core::Moe {
                experts,
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            } => {
                let mut stacked: Option<NodeId> = None;
                for unit in experts {
                    let z = self.emit_unit(tape, *unit, o, None, h_prev, a)?;
                    stacked = Some(match stacked {
                        Some(s) => tape.concat(s, z)?,
                        None => z,
                    });
                }
                let stacked = stacked.expect("at least one expert");
                let x = tape.concat(o, h_prev)?;
                let xa = tape.concat(x, a)?;
                let hl = tape.matvec(self, *hidden_w, xa)?;
                let hp = tape.add_param(self, hl, *hidden_b)?;
                let hidden = tape.relu(hp)?;
                let ol = tape.matvec(self, *out_w, hidden)?;
                let logits = tape.add_param(self, ol, *out_b)?;
                let gates = tape.group_softmax(logits, experts.len())?;
                tape.mix_experts(gates, stacked, experts.len())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_ops::{nmode_contract, Tensor3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmaze(hidden: usize) -> CellDims {
        CellDims {
            hidden,
            obs: 3,
            actions: 4,
            outputs: 4,
        }
    }

    fn count(kind: &str, dims: CellDims) -> usize {
        CellParams::zeros(kind.parse().unwrap(), dims)
            .unwrap()
            .count_params()
    }

    #[test]
    fn published_tmaze_counts() {
        assert_eq!(count("RNN", tmaze(20)), 584);
        assert_eq!(count("AARNN", tmaze(20)), 664);
        assert_eq!(count("MARNN", tmaze(20)), 2024);
        assert_eq!(count("DARNN(a=4)", tmaze(20)), 684);
        assert_eq!(count("GRU", tmaze(6)), 214);
        assert_eq!(count("AAGRU", tmaze(6)), 286);
        assert_eq!(count("MAGRU", tmaze(6)), 754);
        assert_eq!(count("DAGRU(a=4)", tmaze(6)), 306);
    }

    #[test]
    fn factored_counts_follow_sharing_scheme() {
        // FacRNN(20, M=40): U 20·40 + V 23·40 + C 4·40 + λ 40 + b 20 + head 84 + s0 20
        assert_eq!(count("FacRNN(M=40)", tmaze(20)), 2044);
        // FacGRU(6, M=21): shared V 9·21 + C 4·21, per gate U 6·21 + λ 21 + b 6
        assert_eq!(
            count("FacGRU(M=21)", tmaze(6)),
            189 + 84 + 3 * (126 + 21 + 6) + 28 + 6
        );
    }

    #[test]
    fn tiny_rnn_hand_count() {
        let dims = CellDims {
            hidden: 1,
            obs: 1,
            actions: 3,
            outputs: 1,
        };
        assert_eq!(count("RNN", dims), 6);
    }

    #[test]
    fn encoder_adds_dense_layer_params() {
        assert_eq!(
            count("DAGRU(a=4)", tmaze(6)) - count("AAGRU", tmaze(6)),
            4 * 4 + 4
        );
    }

    #[test]
    fn kind_names_round_trip() {
        for s in [
            "RNN",
            "AARNN",
            "DARNN(a=4)",
            "MARNN",
            "DMAGRU(a=3)",
            "FacGRU(M=21)",
            "SoftmaxRNN",
            "CatGRU",
            "MoERNN(K=3,g=8)",
        ] {
            let k: CellKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert!("FacRNN".parse::<CellKind>().is_err());
        assert!("LSTM".parse::<CellKind>().is_err());
    }

    #[test]
    fn zero_rnn_outputs_zero() {
        let p = CellParams::zeros(CellKind::RNN, tmaze(5)).unwrap();
        let h = p
            .step(&HiddenState(vec![0.3; 5]), &[1.0, 0.0, 1.0], 2)
            .unwrap();
        assert_eq!(h.0, vec![0.0; 5]);
    }

    #[test]
    fn marnn_one_hot_equals_slice_rnn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = tmaze(4);
        let mut p = CellParams::init(CellKind::MARNN, dims, &mut rng).unwrap();
        let ba = p.find("rnn.ba").unwrap();
        p.arrays_mut()[ba]
            .data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        let w = p.find("rnn.w").unwrap();
        let tensor = Tensor3::from_vec((4, 7, 4), p.array(w).to_vec()).unwrap();
        let h = HiddenState(vec![0.1, -0.2, 0.3, 0.05]);
        let obs = [1.0, 0.0, 1.0];
        for k in 0..4 {
            let got = p.step(&h, &obs, k).unwrap();
            let x: Vec<f64> = obs.iter().chain(&h.0).copied().collect();
            let slice = tensor.action_slice(k).matvec(&x).unwrap();
            let want: Vec<f64> = (0..4)
                .map(|i| (slice[i] + p.array(ba)[i * 4 + k]).tanh())
                .collect();
            for (g, w) in got.0.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-15);
            }
            let mut a = vec![0.0; 4];
            a[k] = 1.0;
            let brute = nmode_contract(&tensor, &x, &a).unwrap();
            for (b, s) in brute.iter().zip(&slice) {
                assert!((b - s).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn closed_update_gate_carries_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = CellParams::init(CellKind::GRU, tmaze(3), &mut rng).unwrap();
        let wz = p.find("gru.z.w").unwrap();
        let bz = p.find("gru.z.b").unwrap();
        p.arrays_mut()[wz].data.iter_mut().for_each(|v| *v = 0.0);
        p.arrays_mut()[bz].data.iter_mut().for_each(|v| *v = -60.0);
        let h = HiddenState(vec![0.4, -0.7, 0.2]);
        let next = p.step(&h, &[0.0, 1.0, 0.0], 1).unwrap();
        for (a, b) in next.0.iter().zip(&h.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_softmax_weights_average_subcells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kind = CellKind::CombSoftmax { base: Base::Rnn };
        let p = CellParams::init(kind, tmaze(4), &mut rng).unwrap();
        assert_eq!(p.softmax_weights().unwrap(), vec![0.5; 4]);
        let h = HiddenState(vec![0.1, 0.2, -0.3, 0.0]);
        let obs = [0.0, 1.0, 1.0];
        let got = p.step(&h, &obs, 2).unwrap();

        // Rebuild the additive and multiplicative halves as standalone cells.
        let sub = |kind: CellKind, prefix: &str| {
            let mut q = CellParams::zeros(kind, tmaze(4)).unwrap();
            for arr in q.arrays_mut() {
                if let Some(src) = p.find(&format!("{prefix}{}", arr.name)) {
                    arr.data.copy_from_slice(p.array(src));
                }
            }
            q.step(&h, &obs, 2).unwrap()
        };
        let sa = sub(CellKind::AARNN, "add.");
        let sm = sub(CellKind::MARNN, "mult.");
        for i in 0..4 {
            assert!((got.0[i] - 0.5 * (sa.0[i] + sm.0[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_weights_reject_other_kinds() {
        let p = CellParams::zeros(CellKind::AAGRU, tmaze(2)).unwrap();
        assert!(matches!(p.softmax_weights(), Err(Error::WrongKind(_))));
    }

    #[test]
    fn concat_state_is_twice_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p =
            CellParams::init(CellKind::CombConcat { base: Base::Gru }, tmaze(3), &mut rng).unwrap();
        assert_eq!(p.state_dim(), 6);
        let h = p
            .step(&HiddenState(p.s0().to_vec()), &[1.0, 1.0, 0.0], 0)
            .unwrap();
        assert_eq!(h.0.len(), 6);
    }

    #[test]
    fn moe_output_is_convex_mix_of_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kind = CellKind::MoE {
            base: Base::Rnn,
            experts: 3,
            gate_hidden: 5,
        };
        let p = CellParams::init(kind, tmaze(4), &mut rng).unwrap();
        let h = p
            .step(&HiddenState(vec![0.2; 4]), &[1.0, 0.0, 1.0], 1)
            .unwrap();
        assert!(h.0.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn deep_encoder_identity_and_zero() {
        let dims = tmaze(2);
        let mut p = CellParams::zeros("DARNN(a=4)".parse().unwrap(), dims).unwrap();
        assert_eq!(
            p.deep_action_encode(&[0.0, 1.0, 0.0, 0.0]).unwrap(),
            vec![0.0; 4]
        );
        let w = p.find("encoder.w").unwrap();
        for i in 0..4 {
            p.arrays_mut()[w].data[i * 4 + i] = 1.0;
        }
        // relu is the identity on a one-hot
        assert_eq!(
            p.deep_action_encode(&[0.0, 0.0, 1.0, 0.0]).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn xavier_bounds_and_independent_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = CellDims {
            hidden: 15,
            obs: 2,
            actions: 2,
            outputs: 20,
        };
        let p = CellParams::init(CellKind::RNN, dims, &mut rng).unwrap();
        let bound = (6.0f64 / (17.0 + 15.0)).sqrt();
        let w = p.array(p.find("rnn.w").unwrap());
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| v.abs() > 0.5 * bound));

        let p = CellParams::init(CellKind::MARNN, dims, &mut rng).unwrap();
        let t = Tensor3::from_vec((15, 17, 2), p.array(p.find("rnn.w").unwrap()).to_vec()).unwrap();
        assert_ne!(t.action_slice(0), t.action_slice(1));
        assert!(t.values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_is_deterministic() {
        let kind: CellKind = "FacGRU(M=5)".parse().unwrap();
        let a = CellParams::init(kind, tmaze(4), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = CellParams::init(kind, tmaze(4), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = CellParams::zeros(CellKind::RNN, tmaze(3)).unwrap();
        let h = HiddenState(vec![0.0; 3]);
        assert!(p.step(&h, &[1.0, 0.0], 0).is_err());
        assert!(p
            .step(&HiddenState(vec![0.0; 2]), &[1.0, 0.0, 0.0], 0)
            .is_err());
        assert!(matches!(
            p.step(&h, &[1.0, 0.0, 0.0], 4),
            Err(Error::InvalidAction { .. })
        ));
        assert!(matches!(
            p.step(&HiddenState(vec![f64::NAN, 0.0, 0.0]), &[1.0, 0.0, 0.0], 0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn tanh_cells_stay_inside_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for kind in [
            "RNN",
            "AARNN",
            "MARNN",
            "FacRNN(M=3)",
            "GRU",
            "MAGRU",
            "SoftmaxGRU",
        ] {
            let p = CellParams::init(kind.parse().unwrap(), tmaze(5), &mut rng).unwrap();
            let mut h = HiddenState(p.s0().to_vec());
            for t in 0..20 {
                h = p.step(&h, &[1.0, (t % 2) as f64, 0.0], t % 4).unwrap();
                assert!(h.0.iter().all(|v| v.abs() < 1.0), "{kind}");
            }
        }
    }
}
