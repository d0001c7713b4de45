//! Synaptic activity traces and STDP rules: pair-based and triplet, with
//! additive, multiplicative, or interpolated weight dependence.
//!
//! Convention pinned for the whole engine: on a step, traces are updated
//! with that step's spikes first, then the rule reads the updated traces.
//! A pre spike at t followed by a post spike at t+k therefore potentiates
//! by eta_plus * alpha_x^k. The triplet rule is the one exception: its LTP
//! term reads the slow post trace from the *previous* step.
//!
//! Rates, decays, and gains are tape nodes so the outer loop can learn them.

use crate::autodiff::{Tape, Value};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TraceForm {
    Linear,
    Saturating,
}

/// Decay and increment of one synaptic trace. `alpha` and `beta` are scalar
/// nodes; `x_max` only matters for the saturating form.
#[derive(Debug, Clone, Copy)]
pub struct TraceParams {
    pub alpha: Value,
    pub beta: Value,
    pub x_max: f64,
    pub form: TraceForm,
}

/// LTP/LTD rates plus the weight-dependence shape. Rates may be per-synapse
/// arrays or single scalars; scalars broadcast.
#[derive(Debug, Clone, Copy)]
pub struct PlasticityParams {
    pub eta_plus: Value,
    pub eta_minus: Value,
    /// Weight-dependence exponent: 0 additive, 1 multiplicative.
    pub mu: f64,
    pub w_min: f64,
    pub w_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ltp,
    Ltd,
}

/// One trace step. Linear: x' = alpha x + beta s.
/// Saturating: x' = alpha x + beta (x_max - x) s.
pub fn trace_step(tape: &mut Tape, x: Value, s: Value, p: &TraceParams) -> Result<Value> {
    match p.form {
        TraceForm::Linear => tape.trace_update(x, s, p.alpha, p.beta),
        TraceForm::Saturating => tape.trace_update_sat(x, s, p.alpha, p.beta, p.x_max),
    }
}

/// The A± factor of the rule. mu = 0 returns the rate unchanged; otherwise
/// the rate is scaled by the distance to the relevant soft bound raised to
/// mu, with the base clamped at zero.
pub fn weight_dependence(
    tape: &mut Tape,
    w: Value,
    p: &PlasticityParams,
    direction: Direction,
) -> Result<Value> {
    let eta = match direction {
        Direction::Ltp => p.eta_plus,
        Direction::Ltd => p.eta_minus,
    };
    if p.mu == 0.0 {
        return Ok(eta);
    }
    let dist = match direction {
        Direction::Ltp => tape.affine(w, -1.0, p.w_max)?,
        Direction::Ltd => tape.affine(w, 1.0, -p.w_min)?,
    };
    let powed = tape.pow_clamped(dist, p.mu)?;
    if tape.len(eta) == 1 {
        tape.mul_scalar(powed, eta)
    } else {
        tape.mul(powed, eta)
    }
}

fn scaled_inc(
    tape: &mut Tape,
    coeff: Value,
    x: Value,
    y: Value,
    n_pre: usize,
    n_post: usize,
) -> Result<Value> {
    tape.stdp_inc(coeff, x, y, n_pre, n_post)
}

/// LTP and LTD terms of the pair rule, kept separate so they can feed two
/// eligibility traces. LTP[i,j] = A+ x_pre[i] s_post[j];
/// LTD[i,j] = A- x_post[j] s_pre[i].
#[allow(clippy::too_many_arguments)]
pub fn pair_stdp_parts(
    tape: &mut Tape,
    w: Value,
    x_pre: Value,
    x_post: Value,
    s_pre: Value,
    s_post: Value,
    p: &PlasticityParams,
    n_pre: usize,
    n_post: usize,
) -> Result<(Value, Value)> {
    let a_plus = weight_dependence(tape, w, p, Direction::Ltp)?;
    let a_minus = weight_dependence(tape, w, p, Direction::Ltd)?;
    let ltp = scaled_inc(tape, a_plus, x_pre, s_post, n_pre, n_post)?;
    let ltd = scaled_inc(tape, a_minus, s_pre, x_post, n_pre, n_post)?;
    Ok((ltp, ltd))
}

/// Net pair-rule weight delta: LTP - LTD.
#[allow(clippy::too_many_arguments)]
pub fn pair_stdp_delta(
    tape: &mut Tape,
    w: Value,
    x_pre: Value,
    x_post: Value,
    s_pre: Value,
    s_post: Value,
    p: &PlasticityParams,
    n_pre: usize,
    n_post: usize,
) -> Result<Value> {
    let (ltp, ltd) = pair_stdp_parts(tape, w, x_pre, x_post, s_pre, s_post, p, n_pre, n_post)?;
    tape.sub(ltp, ltd)
}

/// LTP and LTD terms of the triplet rule. The LTP term pairs the pre trace
/// with the slow post trace evaluated one step earlier, gated on a post
/// spike; the LTD term matches the pair rule.
#[allow(clippy::too_many_arguments)]
pub fn triplet_stdp_parts(
    tape: &mut Tape,
    w: Value,
    x_pre: Value,
    x_post_fast: Value,
    x_post_slow_prev: Value,
    s_pre: Value,
    s_post: Value,
    p: &PlasticityParams,
    n_pre: usize,
    n_post: usize,
) -> Result<(Value, Value)> {
    let a_plus = weight_dependence(tape, w, p, Direction::Ltp)?;
    let a_minus = weight_dependence(tape, w, p, Direction::Ltd)?;
    let gated_slow = tape.mul(x_post_slow_prev, s_post)?;
    let ltp = scaled_inc(tape, a_plus, x_pre, gated_slow, n_pre, n_post)?;
    let ltd = scaled_inc(tape, a_minus, s_pre, x_post_fast, n_pre, n_post)?;
    Ok((ltp, ltd))
}

/// Net triplet-rule weight delta: LTP - LTD.
#[allow(clippy::too_many_arguments)]
pub fn triplet_stdp_delta(
    tape: &mut Tape,
    w: Value,
    x_pre: Value,
    x_post_fast: Value,
    x_post_slow_prev: Value,
    s_pre: Value,
    s_post: Value,
    p: &PlasticityParams,
    n_pre: usize,
    n_post: usize,
) -> Result<Value> {
    let (ltp, ltd) = triplet_stdp_parts(
        tape,
        w,
        x_pre,
        x_post_fast,
        x_post_slow_prev,
        s_pre,
        s_post,
        p,
        n_pre,
        n_post,
    )?;
    tape.sub(ltp, ltd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(tape: &mut Tape, alpha: f64, beta: f64, form: TraceForm, x_max: f64) -> TraceParams {
        TraceParams {
            alpha: tape.scalar_leaf(alpha),
            beta: tape.scalar_leaf(beta),
            x_max,
            form,
        }
    }

    fn rule(tape: &mut Tape, eta_plus: f64, eta_minus: f64, mu: f64) -> PlasticityParams {
        PlasticityParams {
            eta_plus: tape.scalar_leaf(eta_plus),
            eta_minus: tape.scalar_leaf(eta_minus),
            mu,
            w_min: 0.0,
            w_max: 1.0,
        }
    }

    #[test]
    fn linear_trace_single_spike() {
        let mut t = Tape::new();
        let p = trace(&mut t, 0.9, 1.0, TraceForm::Linear, 0.0);
        let x = t.leaf(vec![0.0]);
        let s = t.leaf(vec![1.0]);
        let x1 = trace_step(&mut t, x, s, &p).unwrap();
        assert_eq!(t.data(x1), &[1.0]);
    }

    #[test]
    fn trace_decays_without_spikes() {
        let mut t = Tape::new();
        let p = trace(&mut t, 0.9, 1.0, TraceForm::Linear, 0.0);
        let x = t.leaf(vec![0.5, 2.0]);
        let s = t.leaf(vec![0.0, 0.0]);
        let x1 = trace_step(&mut t, x, s, &p).unwrap();
        assert_eq!(t.data(x1), &[0.45, 1.8]);
    }

    #[test]
    fn saturating_trace_cancels_at_cap() {
        let mut t = Tape::new();
        let x_max = 1.5;
        let p = trace(&mut t, 0.9, 1.0, TraceForm::Saturating, x_max);
        let x = t.leaf(vec![x_max]);
        let s = t.leaf(vec![1.0]);
        let x1 = trace_step(&mut t, x, s, &p).unwrap();
        assert!((t.data(x1)[0] - 0.9 * x_max).abs() < 1e-15);
    }

    #[test]
    fn additive_dependence_returns_rates_unchanged() {
        let mut t = Tape::new();
        let p = rule(&mut t, 0.1, 0.2, 0.0);
        let w = t.leaf(vec![0.3, 0.7]);
        let a = weight_dependence(&mut t, w, &p, Direction::Ltp).unwrap();
        assert_eq!(a, p.eta_plus);
        let d = weight_dependence(&mut t, w, &p, Direction::Ltd).unwrap();
        assert_eq!(d, p.eta_minus);
    }

    #[test]
    fn multiplicative_bound_cancels_potentiation() {
        let mut t = Tape::new();
        let p = rule(&mut t, 0.1, 0.1, 1.0);
        let w = t.leaf(vec![p.w_max]);
        let a = weight_dependence(&mut t, w, &p, Direction::Ltp).unwrap();
        assert_eq!(t.data(a), &[0.0]);
    }

    #[test]
    fn sqrt_dependence_midway() {
        let mut t = Tape::new();
        let mut p = rule(&mut t, 0.1, 0.1, 0.5);
        p.w_min = 0.0;
        p.w_max = 1.0;
        let w = t.leaf(vec![0.5]);
        let a = weight_dependence(&mut t, w, &p, Direction::Ltp).unwrap();
        let expect = 0.1 * (0.5f64).sqrt();
        assert!((t.data(a)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn no_spikes_no_delta() {
        let mut t = Tape::new();
        let p = rule(&mut t, 0.1, 0.1, 0.0);
        let w = t.leaf(vec![0.5; 6]);
        let x_pre = t.leaf(vec![0.4, 0.2]);
        let x_post = t.leaf(vec![0.3, 0.1, 0.2]);
        let zero_pre = t.leaf(vec![0.0, 0.0]);
        let zero_post = t.leaf(vec![0.0, 0.0, 0.0]);
        let d = pair_stdp_delta(&mut t, w, x_pre, x_post, zero_pre, zero_post, &p, 2, 3).unwrap();
        assert_eq!(t.data(d), &[0.0; 6]);
    }

    /// Runs the engine's pair rule over a scripted scenario and compares to
    /// an independent scalar recurrence evaluated directly.
    fn run_pair_scenario(pre: &[f64], post: &[f64], eta_p: f64, eta_m: f64) -> (f64, f64) {
        let steps = pre.len();
        let mut t = Tape::new();
        let tp = trace(&mut t, 0.9, 1.0, TraceForm::Linear, 0.0);
        let rp = rule(&mut t, eta_p, eta_m, 0.0);
        let w = t.leaf(vec![0.5]);
        let mut x_pre = t.leaf(vec![0.0]);
        let mut x_post = t.leaf(vec![0.0]);
        let mut total = t.leaf(vec![0.0]);
        for k in 0..steps {
            let s_pre = t.leaf(vec![pre[k]]);
            let s_post = t.leaf(vec![post[k]]);
            x_pre = trace_step(&mut t, x_pre, s_pre, &tp).unwrap();
            x_post = trace_step(&mut t, x_post, s_post, &tp).unwrap();
            let d =
                pair_stdp_delta(&mut t, w, x_pre, x_post, s_pre, s_post, &rp, 1, 1).unwrap();
            total = t.add(total, d).unwrap();
        }
        let engine = t.data(total)[0];

        // independent oracle
        let (mut xp, mut xq, mut acc) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..steps {
            xp = 0.9 * xp + pre[k];
            xq = 0.9 * xq + post[k];
            acc += eta_p * xp * post[k] - eta_m * xq * pre[k];
        }
        (engine, acc)
    }

    #[test]
    fn pre_then_post_pair_oracle() {
        let mut pre = vec![0.0; 6];
        let mut post = vec![0.0; 6];
        pre[0] = 1.0;
        post[5] = 1.0;
        let (engine, oracle) = run_pair_scenario(&pre, &post, 0.1, 0.1);
        assert!((engine - oracle).abs() < 1e-12);
        assert!((engine - 0.1 * 0.9f64.powi(5)).abs() < 1e-12, "got {engine}");
    }

    #[test]
    fn post_then_pre_is_sign_reversed() {
        let mut pre = vec![0.0; 6];
        let mut post = vec![0.0; 6];
        post[0] = 1.0;
        pre[5] = 1.0;
        let (engine, oracle) = run_pair_scenario(&pre, &post, 0.1, 0.1);
        assert!((engine - oracle).abs() < 1e-12);
        assert!((engine + 0.1 * 0.9f64.powi(5)).abs() < 1e-12, "got {engine}");
    }

    #[test]
    fn first_post_spike_has_zero_triplet_ltp() {
        let mut t = Tape::new();
        let p = rule(&mut t, 0.1, 0.0, 0.0);
        let w = t.leaf(vec![0.5]);
        let x_pre = t.leaf(vec![0.8]);
        let x_fast = t.leaf(vec![1.0]);
        let slow_prev = t.leaf(vec![0.0]); // no post history yet
        let s_pre = t.leaf(vec![0.0]);
        let s_post = t.leaf(vec![1.0]);
        let (ltp, _) = triplet_stdp_parts(
            &mut t, w, x_pre, x_fast, slow_prev, s_pre, s_post, &p, 1, 1,
        )
        .unwrap();
        assert_eq!(t.data(ltp), &[0.0]);
    }

    #[test]
    fn pre_post_post_triplet_matches_hand_oracle() {
        // pre at t=0, post at t=3 and t=7, ten steps
        let steps = 10;
        let mut pre = vec![0.0; steps];
        let mut post = vec![0.0; steps];
        pre[0] = 1.0;
        post[3] = 1.0;
        post[7] = 1.0;
        let (alpha_fast, alpha_slow, beta) = (0.9, 0.97, 1.0);
        let (eta_p, eta_m) = (0.1, 0.05);

        let mut t = Tape::new();
        let fast = trace(&mut t, alpha_fast, beta, TraceForm::Linear, 0.0);
        let slow = trace(&mut t, alpha_slow, beta, TraceForm::Linear, 0.0);
        let rp = rule(&mut t, eta_p, eta_m, 0.0);
        let w = t.leaf(vec![0.5]);
        let mut x_pre = t.leaf(vec![0.0]);
        let mut x_fast = t.leaf(vec![0.0]);
        let mut x_slow = t.leaf(vec![0.0]);
        let mut total = t.leaf(vec![0.0]);
        for k in 0..steps {
            let s_pre = t.leaf(vec![pre[k]]);
            let s_post = t.leaf(vec![post[k]]);
            let slow_prev = x_slow;
            x_pre = trace_step(&mut t, x_pre, s_pre, &fast).unwrap();
            x_fast = trace_step(&mut t, x_fast, s_post, &fast).unwrap();
            x_slow = trace_step(&mut t, x_slow, s_post, &slow).unwrap();
            let d = triplet_stdp_delta(
                &mut t, w, x_pre, x_fast, slow_prev, s_pre, s_post, &rp, 1, 1,
            )
            .unwrap();
            total = t.add(total, d).unwrap();
        }
        let engine = t.data(total)[0];

        let (mut xp, mut xf, mut xs, mut acc) = (0.0f64, 0.0, 0.0, 0.0);
        for k in 0..steps {
            let slow_prev = xs;
            xp = alpha_fast * xp + beta * pre[k];
            xf = alpha_fast * xf + beta * post[k];
            xs = alpha_slow * xs + beta * post[k];
            acc += eta_p * xp * slow_prev * post[k] - eta_m * xf * pre[k];
        }
        assert!((engine - acc).abs() < 1e-12);
        assert!(engine > 0.0, "pre-post-post should net potentiate, got {engine}");
    }
}
