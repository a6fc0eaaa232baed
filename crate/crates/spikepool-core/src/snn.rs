//! Leaky integrate-and-fire dynamics with a surrogate-gradient spike
//! function that plugs into the autodiff tape.
//!
//! The membrane update is `u_new = tau * u_prev + input`; a spike fires
//! where `u_new > v_th`, and fired entries hard-reset to zero before the
//! next step. The forward spike is exactly binary; the backward pass uses
//! an arctan-family surrogate. A diagnostic soft mode replaces the step
//! with the surrogate's smooth antiderivative so the whole graph becomes
//! finite-difference checkable.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// How the spike nonlinearity behaves in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeMode {
    /// Binary step forward, surrogate backward, detached reset.
    #[default]
    Binary,
    /// Smooth sigmoid forward (the surrogate's antiderivative), fully
    /// differentiable reset. Diagnostic only.
    Soft,
}

#[derive(Clone, Copy, Debug)]
pub struct LifConfig {
    /// Leak factor in (0, 1].
    pub tau: f64,
    /// Firing threshold, dimensionless membrane units.
    pub v_th: f64,
    /// Width of the arctan surrogate.
    pub surrogate_width: f64,
    pub mode: SpikeMode,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            tau: 0.5,
            v_th: 1.0,
            surrogate_width: 1.0,
            mode: SpikeMode::Binary,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau must be in (0, 1], got {}",
                self.tau
            )));
        }
        if self.v_th <= 0.0 {
            return Err(Error::Config(format!(
                "v_th must be positive, got {}",
                self.v_th
            )));
        }
        if self.surrogate_width <= 0.0 {
            return Err(Error::Config(format!(
                "surrogate_width must be positive, got {}",
                self.surrogate_width
            )));
        }
        Ok(())
    }

    pub fn soft(mut self) -> Self {
        self.mode = SpikeMode::Soft;
        self
    }
}

/// Per-layer membrane potentials carried across timesteps.
///
/// Reset to all-zeros at the start of every input sequence; after a step,
/// entries that fired are exactly zero.
#[derive(Clone)]
pub struct SpikeState {
    pub membrane: Tensor,
}

impl SpikeState {
    pub fn zeros(shape: &[usize]) -> SpikeState {
        SpikeState {
            membrane: Tensor::zeros(shape),
        }
    }
}

/// Surrogate derivative of the spike function:
/// `(1/pi) * w / (w^2 + (u - v_th)^2)`.
fn surrogate(u: f64, cfg: &LifConfig) -> f64 {
    let w = cfg.surrogate_width;
    let d = u - cfg.v_th;
    (1.0 / PI) * (w / (w * w + d * d))
}

/// Smooth spike used in soft mode; its exact derivative is [`surrogate`].
fn soft_spike(u: f64, cfg: &LifConfig) -> f64 {
    ((u - cfg.v_th) / cfg.surrogate_width).atan() / PI + 0.5
}

/// Elementwise `d(spike)/d(u)` at the given membrane values. This is the
/// rule the tape applies behind [`spike`]; exposed for direct inspection.
pub fn lif_surrogate_backward(u_new: &Tensor, cfg: &LifConfig) -> Tensor {
    let data = u_new.data().iter().map(|&u| surrogate(u, cfg)).collect();
    Tensor::new_raw(u_new.shape().to_vec(), data)
}

/// Spike nonlinearity. Binary mode: 1 where `u > v_th`, else 0.
/// Both modes backprop through the arctan surrogate.
pub fn spike(tape: &Tape, u: &Tensor, cfg: &LifConfig) -> Tensor {
    let data: Vec<f64> = match cfg.mode {
        SpikeMode::Binary => u
            .data()
            .iter()
            .map(|&x| if x > cfg.v_th { 1.0 } else { 0.0 })
            .collect(),
        SpikeMode::Soft => u.data().iter().map(|&x| soft_spike(x, cfg)).collect(),
    };
    let out = Tensor::new_raw(u.shape().to_vec(), data);
    if tape.should_record(&[u]) {
        let (u, o, cfg) = (u.clone(), out.clone(), *cfg);
        tape.record(
            &out,
            Box::new(move || {
                let dout = o.grad_ref();
                let Some(dout) = dout.as_ref() else { return };
                let uv = u.data();
                u.accum_grad(|gu| {
                    for i in 0..gu.len() {
                        gu[i] += dout[i] * surrogate(uv[i], &cfg);
                    }
                });
            }),
        );
    }
    out
}

/// One LIF step: leak + integrate, fire, hard-reset.
///
/// Returns the spike map and the post-reset state. In binary mode the
/// reset path treats the spike as detached (straight-through reset); in
/// soft mode the reset is fully differentiable.
pub fn lif_step(
    tape: &Tape,
    state: &SpikeState,
    input_current: &Tensor,
    cfg: &LifConfig,
) -> Result<(Tensor, SpikeState)> {
    if state.membrane.shape() != input_current.shape() {
        return Err(Error::ShapeMismatch {
            left: state.membrane.shape().to_vec(),
            right: input_current.shape().to_vec(),
            context: "lif_step membrane vs input".into(),
        });
    }
    let leaked = tape.mul_scalar(&state.membrane, cfg.tau);
    let u_new = tape.add(&leaked, input_current)?;
    let spikes = spike(tape, &u_new, cfg);
    let gate = match cfg.mode {
        SpikeMode::Binary => spikes.detach(),
        SpikeMode::Soft => spikes.clone(),
    };
    let keep = tape.add_scalar(&tape.neg(&gate), 1.0); // 1 - spike
    let membrane = tape.mul(&u_new, &keep)?;
    Ok((spikes, SpikeState { membrane }))
}

/// Unrolls [`lif_step`] over the leading time axis of `x` (`[T, ...]`),
/// starting from a zero state, and stacks the per-step spike maps.
pub fn lif_seq(tape: &Tape, x: &Tensor, cfg: &LifConfig) -> Result<Tensor> {
    if x.ndim() == 0 {
        return Err(Error::Dim("lif_seq needs a leading time axis".into()));
    }
    let steps = x.shape()[0];
    let mut state = SpikeState::zeros(&x.shape()[1..]);
    let mut spikes = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.select0(x, t)?;
        let (s, next) = lif_step(tape, &state, &x_t, cfg)?;
        spikes.push(s);
        state = next;
    }
    tape.stack0(&spikes)
}
