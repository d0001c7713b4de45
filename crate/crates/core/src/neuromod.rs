//! Eligibility traces and third-factor modulated weight application.
//!
//! STDP increments do not touch weights directly. They accumulate into a
//! pair of decaying eligibility matrices (one LTP, one LTD), and weight
//! change happens only when a modulation signal multiplies those traces.
//! Zero modulation means zero drift, bit-exactly.

use crate::autodiff::{ModIndexing, Tape, Value};
use crate::error::Result;

/// Decay and accumulation constants of the eligibility traces.
/// `gamma` is a scalar node; `alpha_e` is per-synapse (or scalar) and is
/// where connectivity masking is folded in by the network layer.
#[derive(Debug, Clone, Copy)]
pub struct EligibilityParams {
    pub gamma: Value,
    pub alpha_e: Value,
}

/// LTP and LTD eligibility matrices, same shape as the plastic weights.
#[derive(Debug, Clone, Copy)]
pub struct EligibilityState {
    pub e_plus: Value,
    pub e_minus: Value,
}

/// Two-channel modulation with its indexing scheme.
#[derive(Debug, Clone, Copy)]
pub struct ModulationSignal {
    pub m_plus: Value,
    pub m_minus: Value,
    pub indexing: ModIndexing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ResponseNonlinearity {
    Identity,
    Tanh,
}

/// E±' = gamma E± + alpha_e ⊙ increment±.
pub fn eligibility_step(
    tape: &mut Tape,
    e: &EligibilityState,
    ltp_increment: Value,
    ltd_increment: Value,
    p: &EligibilityParams,
) -> Result<EligibilityState> {
    let e_plus = tape.decay_accum(e.e_plus, p.gamma, p.alpha_e, ltp_increment)?;
    let e_minus = tape.decay_accum(e.e_minus, p.gamma, p.alpha_e, ltd_increment)?;
    Ok(EligibilityState { e_plus, e_minus })
}

/// W' = W + m_plus[k] E+ + m_minus[k] E-, then an optional hard clamp.
/// k broadcasts, or selects the row (pre) or column (post) index.
pub fn apply_modulation(
    tape: &mut Tape,
    w: Value,
    e: &EligibilityState,
    m: &ModulationSignal,
    clamp: Option<(f64, f64)>,
    n_pre: usize,
    n_post: usize,
) -> Result<Value> {
    tape.mod_apply(
        w, e.e_plus, e.e_minus, m.m_plus, m.m_minus, m.indexing, clamp, n_pre, n_post,
    )
}

/// Neuron-specific response to a scalar modulator: h(b_j * M).
pub fn response_function(
    tape: &mut Tape,
    m: Value,
    b: Value,
    h: ResponseNonlinearity,
) -> Result<Value> {
    let scaled = tape.mul_scalar(b, m)?;
    match h {
        ResponseNonlinearity::Identity => Ok(scaled),
        ResponseNonlinearity::Tanh => tape.tanh(scaled),
    }
}
