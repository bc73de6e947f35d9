//! Plumbing shared by the prediction and control learners.

use crate::autodiff::{bptt_accumulate, unroll_forward, GradientSet, WindowStep};
use crate::cells::{CellParams, HiddenState};
use crate::error::Result;
use crate::optim::Optimizer;
use crate::replay::{ReplayBuffer, SampledSequence, StateMode, Transition};

pub(crate) fn window_steps<'a>(seq: &[&'a Transition]) -> Vec<WindowStep<'a>> {
    seq.iter()
        .map(|t| WindowStep {
            obs: &t.obs,
            prev_action: t.prev_action,
        })
        .collect()
}

/// Runs `params` over the window and one further step on the anchor's
/// `next_obs`, returning the head output there.
pub(crate) fn bootstrap_output(
    params: &CellParams,
    h_init: &[f64],
    seq: &[&Transition],
) -> Result<Vec<f64>> {
    let mut h = HiddenState(h_init.to_vec());
    for t in seq {
        h = params.step(&h, &t.obs, t.prev_action)?;
    }
    let last = seq.last().expect("non-empty sequence");
    h = params.step(&h, &last.next_obs, last.action)?;
    params.head(&h)
}

/// Output at the anchor plus the bootstrap output from `h_T` with the same
/// network (used when no target network is kept).
pub(crate) fn own_bootstrap(
    params: &CellParams,
    h_final: &HiddenState,
    last: &Transition,
) -> Result<Vec<f64>> {
    let h = params.step(h_final, &last.next_obs, last.action)?;
    params.head(&h)
}

/// One sampled sequence ready for a loss: its transitions and initial state.
pub(crate) struct Sample<'a> {
    pub seq: Vec<&'a Transition>,
    pub h_init: &'a [f64],
    pub from_s0: bool,
}

/// Loss callback: given the sample, the model output at the anchor and the
/// final hidden state, returns `(dL/doutput, loss)`.
pub(crate) type LossFn<'f> =
    dyn FnMut(&Sample<'_>, &[f64], &HiddenState) -> Result<(Vec<f64>, f64)> + 'f;

/// Accumulates the BPTT gradient of every sample into `grads` and returns
/// the summed loss plus per-sample initial-state gradients.
pub(crate) fn accumulate(
    params: &CellParams,
    samples: &[Sample<'_>],
    grads: &mut GradientSet,
    loss: &mut LossFn<'_>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    grads.fill_zero();
    let s0_id = params.s0_id();
    let mut total = 0.0;
    let mut h_grads = Vec::with_capacity(samples.len());
    for s in samples {
        let steps = window_steps(&s.seq);
        let mut u = unroll_forward(params, s.h_init, &steps)?;
        let (g, l) = loss(s, u.output(), &u.final_hidden())?;
        total += l;
        bptt_accumulate(&mut u, params, &g, grads)?;
        if s.from_s0 {
            for (d, g) in grads.params[s0_id].iter_mut().zip(&grads.h_init) {
                *d += g;
            }
        }
        h_grads.push(grads.h_init.clone());
    }
    Ok((total, h_grads))
}

/// Applies the optimizer and, in refresh mode, the stored-state update.
pub(crate) fn apply(
    params: &mut CellParams,
    opt: &mut Optimizer,
    grads: &mut GradientSet,
    buffer: Option<(&mut ReplayBuffer, &[SampledSequence], StateMode)>,
    h_grads: &[Vec<f64>],
) -> Result<()> {
    opt.step(params, grads)?;
    if let Some((buf, seqs, StateMode::Refresh)) = buffer {
        buf.refresh_states(seqs, h_grads, opt.config().eta());
    }
    Ok(())
}
