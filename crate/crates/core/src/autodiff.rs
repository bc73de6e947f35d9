//! Reverse-mode differentiation over the fixed primitive set the cells use,
//! and truncated BPTT unrolling.
//!
//! A [`Tape`] stores every intermediate in one flat buffer; each record
//! names its inputs by node id and its parameters by [`ParamId`]. Because
//! records are appended in evaluation order the tape is already topologically
//! sorted, and the backward pass is a single reverse sweep.

use crate::cells::{ActionEncoding, CellParams, HiddenState, ParamId};
use crate::error::{check_len, Error, Result};
use crate::tensor_ops::{matvec_into, matvec_t_into, nmode_into};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Const,
    Leaf,
    MatVec {
        w: ParamId,
        x: NodeId,
    },
    MatVecT {
        w: ParamId,
        x: NodeId,
    },
    AddParam {
        x: NodeId,
        b: ParamId,
    },
    MulParam {
        x: NodeId,
        p: ParamId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Slice {
        x: NodeId,
        start: usize,
    },
    Tanh(NodeId),
    Logistic(NodeId),
    Relu(NodeId),
    NMode {
        w: ParamId,
        x: NodeId,
        a: NodeId,
    },
    SoftmaxMix {
        theta_a: ParamId,
        theta_m: ParamId,
        sa: NodeId,
        sm: NodeId,
    },
    GroupSoftmax {
        x: NodeId,
        groups: usize,
    },
    MixExperts {
        gates: NodeId,
        experts: NodeId,
        groups: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Leaf => "leaf",
            Op::MatVec { .. } => "matvec",
            Op::MatVecT { .. } => "matvec_t",
            Op::AddParam { .. } => "add_param",
            Op::MulParam { .. } => "mul_param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Tanh(_) => "tanh",
            Op::Logistic(_) => "logistic",
            Op::Relu(_) => "relu",
            Op::NMode { .. } => "nmode",
            Op::SoftmaxMix { .. } => "softmax_mix",
            Op::GroupSoftmax { .. } => "group_softmax",
            Op::MixExperts { .. } => "mix_experts",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    off: usize,
    len: usize,
    op: Op,
}

/// Record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    step: usize,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let n = self.nodes[id.0];
        &self.vals[n.off..n.off + n.len]
    }

    /// Step index reported in non-finite diagnostics.
    pub(crate) fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    fn push(
        &mut self,
        op: Op,
        len: usize,
        fill: impl FnOnce(&[f64], &mut [f64]),
    ) -> Result<NodeId> {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        let (inputs, out) = self.vals.split_at_mut(off);
        fill(inputs, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step,
                op: op.name(),
            });
        }
        self.nodes.push(Node { off, len, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn span(&self, id: NodeId) -> (usize, usize) {
        let n = self.nodes[id.0];
        (n.off, n.len)
    }

    pub fn constant(&mut self, v: &[f64]) -> Result<NodeId> {
        self.push(Op::Const, v.len(), |_, out| out.copy_from_slice(v))
    }

    /// Differentiable input; its gradient is reported by the backward pass.
    pub fn leaf(&mut self, v: &[f64]) -> Result<NodeId> {
        self.push(Op::Leaf, v.len(), |_, out| out.copy_from_slice(v))
    }

    pub fn matvec(&mut self, p: &CellParams, w: ParamId, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = p.matrix_shape(w);
        let (xo, xl) = self.span(x);
        check_len("matvec", cols, xl)?;
        let wd = p.array(w);
        self.push(Op::MatVec { w, x }, rows, |v, out| {
            matvec_into(wd, rows, cols, &v[xo..xo + xl], out)
        })
    }

    pub fn matvec_t(&mut self, p: &CellParams, w: ParamId, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = p.matrix_shape(w);
        let (xo, xl) = self.span(x);
        check_len("matvec_t", rows, xl)?;
        let wd = p.array(w);
        self.push(Op::MatVecT { w, x }, cols, |v, out| {
            matvec_t_into(wd, rows, cols, &v[xo..xo + xl], out)
        })
    }

    pub fn add_param(&mut self, p: &CellParams, x: NodeId, b: ParamId) -> Result<NodeId> {
        let (xo, xl) = self.span(x);
        let bd = p.array(b);
        check_len("add_param", bd.len(), xl)?;
        self.push(Op::AddParam { x, b }, xl, |v, out| {
            for ((o, x), b) in out.iter_mut().zip(&v[xo..xo + xl]).zip(bd) {
                *o = x + b;
            }
        })
    }

    pub fn mul_param(&mut self, p: &CellParams, x: NodeId, w: ParamId) -> Result<NodeId> {
        let (xo, xl) = self.span(x);
        let pd = p.array(w);
        check_len("mul_param", pd.len(), xl)?;
        self.push(Op::MulParam { x, p: w }, xl, |v, out| {
            for ((o, x), p) in out.iter_mut().zip(&v[xo..xo + xl]).zip(pd) {
                *o = x * p;
            }
        })
    }

    fn binary(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (ao, al) = self.span(a);
        let (bo, bl) = self.span(b);
        check_len(op.name(), al, bl)?;
        self.push(op, al, |v, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = f(v[ao + i], v[bo + i]);
            }
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ao, al) = self.span(a);
        let (bo, bl) = self.span(b);
        self.push(Op::Concat(a, b), al + bl, |v, out| {
            out[..al].copy_from_slice(&v[ao..ao + al]);
            out[al..].copy_from_slice(&v[bo..bo + bl]);
        })
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (xo, xl) = self.span(x);
        if start + len > xl {
            return Err(Error::Dimension {
                op: "slice",
                expected: xl,
                got: start + len,
            });
        }
        self.push(Op::Slice { x, start }, len, |v, out| {
            out.copy_from_slice(&v[xo + start..xo + start + len])
        })
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let (xo, xl) = self.span(x);
        self.push(op, xl, |v, out| {
            for (o, x) in out.iter_mut().zip(&v[xo..xo + xl]) {
                *o = f(*x);
            }
        })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Tanh(x), x, f64::tanh)
    }

    pub fn logistic(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Logistic(x), x, logistic)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu(x), x, |v| v.max(0.0))
    }

    pub fn nmode(&mut self, p: &CellParams, w: ParamId, x: NodeId, a: NodeId) -> Result<NodeId> {
        let dims = p.tensor_shape(w);
        let (xo, xl) = self.span(x);
        let (ao, al) = self.span(a);
        check_len("nmode (input)", dims.1, xl)?;
        check_len("nmode (action)", dims.2, al)?;
        let wd = p.array(w);
        self.push(Op::NMode { w, x, a }, dims.0, |v, out| {
            nmode_into(wd, dims, &v[xo..xo + xl], &v[ao..ao + al], out)
        })
    }

    pub fn softmax_mix(
        &mut self,
        p: &CellParams,
        theta_a: ParamId,
        theta_m: ParamId,
        sa: NodeId,
        sm: NodeId,
    ) -> Result<NodeId> {
        let (ao, al) = self.span(sa);
        let (mo, ml) = self.span(sm);
        check_len("softmax_mix", al, ml)?;
        let (ta, tm) = (p.array(theta_a), p.array(theta_m));
        check_len("softmax_mix (theta)", al, ta.len())?;
        self.push(
            Op::SoftmaxMix {
                theta_a,
                theta_m,
                sa,
                sm,
            },
            al,
            |v, out| {
                for i in 0..al {
                    let wa = logistic(ta[i] - tm[i]);
                    out[i] = wa * v[ao + i] + (1.0 - wa) * v[mo + i];
                }
            },
        )
    }

    /// Softmax across `groups` blocks, independently at each position.
    pub fn group_softmax(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        let (xo, xl) = self.span(x);
        if groups == 0 || xl % groups != 0 {
            return Err(Error::Dimension {
                op: "group_softmax",
                expected: groups,
                got: xl,
            });
        }
        let n = xl / groups;
        self.push(Op::GroupSoftmax { x, groups }, xl, |v, out| {
            let x = &v[xo..xo + xl];
            for i in 0..n {
                let max = (0..groups)
                    .map(|g| x[g * n + i])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for g in 0..groups {
                    let e = (x[g * n + i] - max).exp();
                    out[g * n + i] = e;
                    z += e;
                }
                for g in 0..groups {
                    out[g * n + i] /= z;
                }
            }
        })
    }

    /// `out_i = Σ_g gates[g·n+i] · experts[g·n+i]`.
    pub fn mix_experts(&mut self, gates: NodeId, experts: NodeId, groups: usize) -> Result<NodeId> {
        let (go, gl) = self.span(gates);
        let (eo, el) = self.span(experts);
        check_len("mix_experts", gl, el)?;
        let n = gl / groups;
        self.push(
            Op::MixExperts {
                gates,
                experts,
                groups,
            },
            n,
            |v, out| {
                for i in 0..n {
                    out[i] = (0..groups)
                        .map(|g| v[go + g * n + i] * v[eo + g * n + i])
                        .sum();
                }
            },
        )
    }

    /// Reverse sweep from `seed` (the gradient at `output`). Parameter
    /// gradients are added into `grads`; the gradient at every [`Tape::leaf`]
    /// is returned in creation order.
    pub fn backward(
        &mut self,
        p: &CellParams,
        output: NodeId,
        seed: &[f64],
        grads: &mut GradientSet,
    ) -> Result<Vec<Vec<f64>>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let (oo, ol) = self.span(output);
        check_len("backward seed", ol, seed.len())?;
        let mut g = vec![0.0; self.vals.len()];
        g[oo..oo + ol].copy_from_slice(seed);
        let vals = &self.vals;
        let nodes = &self.nodes;
        let span = |id: NodeId| {
            let n = nodes[id.0];
            (n.off, n.len)
        };

        for node in nodes[..=output.0].iter().rev() {
            let (no, nl) = (node.off, node.len);
            if g[no..no + nl].iter().all(|&v| v == 0.0) {
                continue;
            }
            match node.op {
                Op::Const | Op::Leaf => {}
                Op::MatVec { w, x } => {
                    let (rows, cols) = p.matrix_shape(w);
                    let (xo, _) = span(x);
                    let wd = p.array(w);
                    let gw = &mut grads.params[w];
                    for r in 0..rows {
                        let gr = g[no + r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &wd[r * cols..(r + 1) * cols];
                        let grow = &mut gw[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            grow[c] += gr * vals[xo + c];
                            g[xo + c] += row[c] * gr;
                        }
                    }
                }
                Op::MatVecT { w, x } => {
                    let (rows, cols) = p.matrix_shape(w);
                    let (xo, _) = span(x);
                    let wd = p.array(w);
                    let gw = &mut grads.params[w];
                    for r in 0..rows {
                        let xr = vals[xo + r];
                        let row = &wd[r * cols..(r + 1) * cols];
                        let grow = &mut gw[r * cols..(r + 1) * cols];
                        let mut acc = 0.0;
                        for c in 0..cols {
                            let gc = g[no + c];
                            grow[c] += xr * gc;
                            acc += row[c] * gc;
                        }
                        g[xo + r] += acc;
                    }
                }
                Op::AddParam { x, b } => {
                    let (xo, _) = span(x);
                    for i in 0..nl {
                        grads.params[b][i] += g[no + i];
                        g[xo + i] += g[no + i];
                    }
                }
                Op::MulParam { x, p: pid } => {
                    let (xo, _) = span(x);
                    let pd = p.array(pid);
                    for i in 0..nl {
                        grads.params[pid][i] += g[no + i] * vals[xo + i];
                        g[xo + i] += g[no + i] * pd[i];
                    }
                }
                Op::Add(a, b) => {
                    let (ao, _) = span(a);
                    let (bo, _) = span(b);
                    for i in 0..nl {
                        let gi = g[no + i];
                        g[ao + i] += gi;
                        g[bo + i] += gi;
                    }
                }
                Op::Sub(a, b) => {
                    let (ao, _) = span(a);
                    let (bo, _) = span(b);
                    for i in 0..nl {
                        let gi = g[no + i];
                        g[ao + i] += gi;
                        g[bo + i] -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (ao, _) = span(a);
                    let (bo, _) = span(b);
                    for i in 0..nl {
                        let gi = g[no + i];
                        g[ao + i] += gi * vals[bo + i];
                        g[bo + i] += gi * vals[ao + i];
                    }
                }
                Op::Concat(a, b) => {
                    let (ao, al) = span(a);
                    let (bo, bl) = span(b);
                    for i in 0..al {
                        g[ao + i] += g[no + i];
                    }
                    for i in 0..bl {
                        g[bo + i] += g[no + al + i];
                    }
                }
                Op::Slice { x, start } => {
                    let (xo, _) = span(x);
                    for i in 0..nl {
                        g[xo + start + i] += g[no + i];
                    }
                }
                Op::Tanh(x) => {
                    let (xo, _) = span(x);
                    for i in 0..nl {
                        let y = vals[no + i];
                        g[xo + i] += g[no + i] * (1.0 - y * y);
                    }
                }
                Op::Logistic(x) => {
                    let (xo, _) = span(x);
                    for i in 0..nl {
                        let y = vals[no + i];
                        g[xo + i] += g[no + i] * y * (1.0 - y);
                    }
                }
                Op::Relu(x) => {
                    let (xo, _) = span(x);
                    for i in 0..nl {
                        if vals[xo + i] > 0.0 {
                            g[xo + i] += g[no + i];
                        }
                    }
                }
                Op::NMode { w, x, a } => {
                    let (ni, nj, nk) = p.tensor_shape(w);
                    let (xo, _) = span(x);
                    let (ao, _) = span(a);
                    let wd = p.array(w);
                    let gw = &mut grads.params[w];
                    for i in 0..ni {
                        let gi = g[no + i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..nj {
                            let xj = vals[xo + j];
                            let base = (i * nj + j) * nk;
                            let mut dx = 0.0;
                            for k in 0..nk {
                                let ak = vals[ao + k];
                                let wijk = wd[base + k];
                                gw[base + k] += gi * xj * ak;
                                dx += wijk * ak;
                                g[ao + k] += gi * wijk * xj;
                            }
                            g[xo + j] += gi * dx;
                        }
                    }
                }
                Op::SoftmaxMix {
                    theta_a,
                    theta_m,
                    sa,
                    sm,
                } => {
                    let (ao, _) = span(sa);
                    let (mo, _) = span(sm);
                    let (ta, tm) = (p.array(theta_a), p.array(theta_m));
                    for i in 0..nl {
                        let gi = g[no + i];
                        let wa = logistic(ta[i] - tm[i]);
                        let (va, vm) = (vals[ao + i], vals[mo + i]);
                        g[ao + i] += gi * wa;
                        g[mo + i] += gi * (1.0 - wa);
                        let dt = gi * (va - vm) * wa * (1.0 - wa);
                        grads.params[theta_a][i] += dt;
                        grads.params[theta_m][i] -= dt;
                    }
                }
                Op::GroupSoftmax { x, groups } => {
                    let (xo, _) = span(x);
                    let n = nl / groups;
                    for i in 0..n {
                        let dot: f64 = (0..groups)
                            .map(|k| vals[no + k * n + i] * g[no + k * n + i])
                            .sum();
                        for k in 0..groups {
                            let y = vals[no + k * n + i];
                            g[xo + k * n + i] += y * (g[no + k * n + i] - dot);
                        }
                    }
                }
                Op::MixExperts {
                    gates,
                    experts,
                    groups,
                } => {
                    let (go, _) = span(gates);
                    let (eo, _) = span(experts);
                    for i in 0..nl {
                        let gi = g[no + i];
                        for k in 0..groups {
                            let idx = k * nl + i;
                            g[go + idx] += gi * vals[eo + idx];
                            g[eo + idx] += gi * vals[go + idx];
                        }
                    }
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf))
            .map(|n| g[n.off..n.off + n.len].to_vec())
            .collect();
        Ok(leaves)
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One gradient buffer per parameter array, plus the gradient at the
/// sequence's initial hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub params: Vec<Vec<f64>>,
    pub h_init: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(params: &CellParams) -> Self {
        Self {
            params: params
                .arrays()
                .iter()
                .map(|a| vec![0.0; a.data.len()])
                .collect(),
            h_init: vec![0.0; params.state_dim()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.params
            .iter_mut()
            .for_each(|p| p.iter_mut().for_each(|v| *v = 0.0));
        self.h_init.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .flatten()
            .chain(&self.h_init)
            .all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.params
            .iter()
            .flatten()
            .chain(&self.h_init)
            .all(|&v| v == 0.0)
    }

    /// Euclidean norm over the parameter buffers (excluding `h_init`).
    pub fn param_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.params.iter_mut().flatten().for_each(|v| *v *= s);
        self.h_init.iter_mut().for_each(|v| *v *= s);
    }
}

/// One step of an unroll window: the observation at time `t` and the action
/// taken at `t − 1`.
#[derive(Debug, Clone, Copy)]
pub struct WindowStep<'a> {
    pub obs: &'a [f64],
    pub prev_action: usize,
}

/// Forward record of a truncated unroll plus the head output at its final
/// step.
#[derive(Debug)]
pub struct Unroll {
    tape: Tape,
    states: Vec<NodeId>,
    output: NodeId,
}

impl Unroll {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Hidden state after step `t` (zero-based).
    pub fn hidden(&self, t: usize) -> &[f64] {
        self.tape.value(self.states[t])
    }

    pub fn final_hidden(&self) -> HiddenState {
        HiddenState(
            self.tape
                .value(*self.states.last().expect("non-empty unroll"))
                .to_vec(),
        )
    }

    /// Head output at the final step.
    pub fn output(&self) -> &[f64] {
        self.tape.value(self.output)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }
}

/// Unrolls `params` over `window` starting from `h_init`.
pub fn unroll_forward(
    params: &CellParams,
    h_init: &[f64],
    window: &[WindowStep<'_>],
) -> Result<Unroll> {
    if window.is_empty() {
        return Err(Error::Dimension {
            op: "unroll_forward (window)",
            expected: 1,
            got: 0,
        });
    }
    check_len("unroll_forward (h_init)", params.state_dim(), h_init.len())?;
    let mut tape = Tape::new();
    let mut h = tape.leaf(h_init)?;
    let mut states = Vec::with_capacity(window.len());
    for (t, step) in window.iter().enumerate() {
        tape.set_step(t);
        let action = ActionEncoding::one_hot(step.prev_action, params.dims().actions)?;
        h = params.emit_step(&mut tape, h, step.obs, &action)?;
        states.push(h);
    }
    let output = params.emit_head(&mut tape, h)?;
    Ok(Unroll {
        tape,
        states,
        output,
    })
}

/// Backpropagates `loss_grad` (the loss gradient at the final head output)
/// through every step of the unroll.
pub fn bptt_backward(
    unroll: &mut Unroll,
    params: &CellParams,
    loss_grad: &[f64],
) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros(params);
    bptt_accumulate(unroll, params, loss_grad, &mut grads)?;
    Ok(grads)
}

/// Like [`bptt_backward`] but adds into an existing set. `grads.h_init` is
/// overwritten with this unroll's initial-state gradient.
pub fn bptt_accumulate(
    unroll: &mut Unroll,
    params: &CellParams,
    loss_grad: &[f64],
    grads: &mut GradientSet,
) -> Result<()> {
    let mut leaves = unroll
        .tape
        .backward(params, unroll.output, loss_grad, grads)?;
    grads.h_init = leaves.swap_remove(0);
    Ok(())
}
