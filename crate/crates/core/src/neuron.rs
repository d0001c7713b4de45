//! LIF and CUBA neuron layer dynamics as differentiable per-step transitions.
//!
//! All decay constants are per-step quantities with a fixed 1 ms step.
//! Update order is pinned: decay/integrate, then threshold, then reset.
//! The reset is the gated form v*(1-s) + v_rest*s so gradient flows through
//! the spike via the surrogate.

use crate::autodiff::{SpikeFunctionConfig, Tape, Value};
use crate::error::Result;

/// Per-layer neuron constants. `alpha_v` and `alpha_u` are leak fractions:
/// the state loses that fraction of its distance to rest each step.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NeuronParams {
    pub alpha_v: f64,
    pub alpha_u: f64,
    pub v_rest: f64,
    pub u_rest: f64,
    pub r: f64,
    pub v_th: f64,
}

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            alpha_v: 0.1,
            alpha_u: 0.3,
            v_rest: 0.0,
            u_rest: 0.0,
            r: 1.0,
            v_th: 1.0,
        }
    }
}

impl NeuronParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_v) || !(0.0..=1.0).contains(&self.alpha_u) {
            return Err(crate::Error::Config(
                "neuron leak fractions must lie in [0, 1]".into(),
            ));
        }
        if self.v_th <= self.v_rest {
            return Err(crate::Error::Config(
                "firing threshold must exceed the resting potential".into(),
            ));
        }
        if self.r <= 0.0 {
            return Err(crate::Error::Config("resistance scale must be positive".into()));
        }
        Ok(())
    }
}

/// Membrane voltage, current trace, and last spike vector of one layer.
#[derive(Debug, Clone, Copy)]
pub struct NeuronLayerState {
    pub v: Value,
    pub u: Value,
    pub s: Value,
}

/// Fresh layer state at rest with no spike history.
pub fn state_at_rest(tape: &mut Tape, n: usize, p: &NeuronParams) -> NeuronLayerState {
    NeuronLayerState {
        v: tape.leaf(vec![p.v_rest; n]),
        u: tape.leaf(vec![p.u_rest; n]),
        s: tape.leaf(vec![0.0; n]),
    }
}

/// One LIF step: v' = v - alpha_v (v - v_rest) + R I, threshold, reset.
/// The current trace is carried through untouched.
pub fn step_lif(
    tape: &mut Tape,
    state: &NeuronLayerState,
    input: Value,
    p: &NeuronParams,
    cfg: &SpikeFunctionConfig,
) -> Result<NeuronLayerState> {
    let v_pre = tape.lincomb(state.v, input, 1.0 - p.alpha_v, p.r, p.alpha_v * p.v_rest)?;
    let s = tape.spike(v_pre, p.v_th, cfg)?;
    let v = tape.reset_gate(v_pre, s, p.v_rest)?;
    Ok(NeuronLayerState { v, u: state.u, s })
}

/// One CUBA step: the current trace integrates the input, the voltage
/// integrates the fresh current trace, then threshold and reset.
pub fn step_cuba(
    tape: &mut Tape,
    state: &NeuronLayerState,
    input: Value,
    p: &NeuronParams,
    cfg: &SpikeFunctionConfig,
) -> Result<NeuronLayerState> {
    let u = tape.lincomb(state.u, input, 1.0 - p.alpha_u, 1.0, p.alpha_u * p.u_rest)?;
    let v_pre = tape.lincomb(state.v, u, 1.0 - p.alpha_v, p.r, p.alpha_v * p.v_rest)?;
    let s = tape.spike(v_pre, p.v_th, cfg)?;
    let v = tape.reset_gate(v_pre, s, p.v_rest)?;
    Ok(NeuronLayerState { v, u, s })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard() -> SpikeFunctionConfig {
        SpikeFunctionConfig::default()
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let mut t = Tape::new();
        let p = NeuronParams::default();
        let mut st = state_at_rest(&mut t, 3, &p);
        let zero = t.leaf(vec![0.0; 3]);
        for _ in 0..100 {
            st = step_cuba(&mut t, &st, zero, &p, &hard()).unwrap();
            assert_eq!(t.data(st.v), &[0.0; 3]);
            assert_eq!(t.data(st.u), &[0.0; 3]);
            assert_eq!(t.data(st.s), &[0.0; 3]);
        }
    }

    #[test]
    fn lif_hand_evaluated_leak() {
        let mut t = Tape::new();
        let p = NeuronParams {
            alpha_v: 0.1,
            v_th: 2.0,
            ..NeuronParams::default()
        };
        let st = NeuronLayerState {
            v: t.leaf(vec![1.0]),
            u: t.leaf(vec![0.0]),
            s: t.leaf(vec![0.0]),
        };
        let zero = t.leaf(vec![0.0]);
        let st = step_lif(&mut t, &st, zero, &p, &hard()).unwrap();
        assert!((t.data(st.v)[0] - 0.9).abs() < 1e-15);
        assert_eq!(t.data(st.s), &[0.0]);
    }

    #[test]
    fn threshold_crossing_resets_to_rest() {
        let mut t = Tape::new();
        let p = NeuronParams::default();
        let st = NeuronLayerState {
            v: t.leaf(vec![0.99]),
            u: t.leaf(vec![0.0]),
            s: t.leaf(vec![0.0]),
        };
        let big = t.leaf(vec![5.0]);
        let st = step_lif(&mut t, &st, big, &p, &hard()).unwrap();
        assert_eq!(t.data(st.s), &[1.0]);
        assert_eq!(t.data(st.v), &[p.v_rest]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let p = NeuronParams::default();
        let st = state_at_rest(&mut t, 3, &p);
        let wrong = t.leaf(vec![0.0; 4]);
        assert!(step_cuba(&mut t, &st, wrong, &p, &hard()).is_err());
    }

    #[test]
    fn current_trace_jumps_then_decays_geometrically() {
        let mut t = Tape::new();
        let p = NeuronParams {
            alpha_u: 0.3,
            v_th: 100.0, // keep it subthreshold
            ..NeuronParams::default()
        };
        let w = 0.8;
        let mut st = state_at_rest(&mut t, 1, &p);
        let pulse = t.leaf(vec![w]);
        let zero = t.leaf(vec![0.0]);
        st = step_cuba(&mut t, &st, pulse, &p, &hard()).unwrap();
        assert!((t.data(st.u)[0] - w).abs() < 1e-15);
        let mut expect = w;
        for _ in 0..20 {
            st = step_cuba(&mut t, &st, zero, &p, &hard()).unwrap();
            expect *= 1.0 - p.alpha_u;
            assert!((t.data(st.u)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn voltage_decays_monotonically_toward_rest() {
        let mut t = Tape::new();
        let p = NeuronParams {
            v_th: 10.0,
            ..NeuronParams::default()
        };
        let mut st = NeuronLayerState {
            v: t.leaf(vec![3.0]),
            u: t.leaf(vec![0.0]),
            s: t.leaf(vec![0.0]),
        };
        let zero = t.leaf(vec![0.0]);
        let mut prev = 3.0;
        for _ in 0..50 {
            st = step_cuba(&mut t, &st, zero, &p, &hard()).unwrap();
            let v = t.data(st.v)[0];
            assert!(v < prev && v >= p.v_rest);
            prev = v;
        }
    }

    #[test]
    fn constant_drive_gives_fixed_interspike_interval() {
        let mut t = Tape::new();
        let p = NeuronParams::default();
        let mut st = state_at_rest(&mut t, 1, &p);
        let drive = t.leaf(vec![0.35]);
        let mut spike_steps = Vec::new();
        for step in 0..200 {
            st = step_cuba(&mut t, &st, drive, &p, &hard()).unwrap();
            if t.data(st.s)[0] > 0.5 {
                spike_steps.push(step);
            }
        }
        assert!(spike_steps.len() >= 5, "expected sustained spiking");
        let intervals: Vec<usize> = spike_steps.windows(2).map(|w| w[1] - w[0]).collect();
        // drop the first interval: it includes the initial charge-up transient
        let later = &intervals[1..];
        assert!(later.iter().all(|&d| d == later[0]), "intervals {later:?}");
    }

    #[test]
    fn cuba_with_unit_current_leak_degenerates_to_lif() {
        let mut t = Tape::new();
        let p_cuba = NeuronParams {
            alpha_u: 1.0,
            u_rest: 0.0,
            ..NeuronParams::default()
        };
        let p_lif = p_cuba;
        let mut cuba = state_at_rest(&mut t, 2, &p_cuba);
        let mut lif = state_at_rest(&mut t, 2, &p_lif);
        let drives = [0.5, 0.0, 0.3, 0.9, 0.0, 0.0, 1.2, 0.1];
        for &d in &drives {
            let i = t.leaf(vec![d, d * 0.5]);
            cuba = step_cuba(&mut t, &cuba, i, &p_cuba, &hard()).unwrap();
            lif = step_lif(&mut t, &lif, i, &p_lif, &hard()).unwrap();
            assert_eq!(t.data(cuba.v), t.data(lif.v));
            assert_eq!(t.data(cuba.s), t.data(lif.s));
        }
    }

    #[test]
    fn spikes_are_binary_in_hard_mode() {
        let mut t = Tape::new();
        let p = NeuronParams::default();
        let mut st = state_at_rest(&mut t, 4, &p);
        for k in 0..100 {
            let i = t.leaf(vec![0.1 * (k % 7) as f64; 4]);
            st = step_cuba(&mut t, &st, i, &p, &hard()).unwrap();
            for &s in t.data(st.s) {
                assert!(s == 0.0 || s == 1.0);
            }
        }
    }
}
