//! Assembly of the two-network system: the plastic DP-SNN, the non-plastic
//! neuromodulatory NM-SNN, spike-count readouts, and the small CNN image
//! encoder.
//!
//! Plastic weights are stored as non-negative magnitudes; the excitatory or
//! inhibitory identity fixed at initialization is applied as a sign-and-mask
//! product at every use, so neither inner-loop plasticity nor outer-loop
//! updates can flip a neuron type. Eligibility accumulation is masked the
//! same way, so absent synapses carry zero current and zero eligibility.
//!
//! Per-step order of the full system (pinned for reproducibility):
//! the NM-SNN steps first, consuming this step's sensory input and the
//! *previous* step's DP hidden spikes, producing the modulation the DP-SNN
//! then uses. Within the DP-SNN: dynamics, trace updates, STDP increments,
//! weight application from the pre-update eligibility, eligibility update.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{ModIndexing, SpikeFunctionConfig, Tape, Value};
use crate::error::{Error, Result};
use crate::neuromod::{
    apply_modulation, eligibility_step, EligibilityParams, EligibilityState, ModulationSignal,
};
use crate::neuron::{state_at_rest, step_cuba, NeuronLayerState, NeuronParams};
use crate::plasticity::{
    pair_stdp_parts, trace_step, triplet_stdp_parts, PlasticityParams, TraceForm, TraceParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RuleKind {
    Pair,
    Triplet,
}

/// Presence mask, excitatory/inhibitory signs, and initial magnitudes of one
/// synapse block. `sign` is zero where the mask is zero, so it doubles as
/// the combined sign-and-mask factor.
#[derive(Debug, Clone)]
pub struct Connectivity {
    pub n_pre: usize,
    pub n_post: usize,
    pub mask: Vec<f64>,
    pub sign: Vec<f64>,
    pub init_weights: Vec<f64>,
}

/// Random connectivity: each synapse present independently with probability
/// `density`; of the present ones an exact share of `inhib_frac` (randomly
/// placed, rounded to the nearest count) is inhibitory; magnitudes uniform
/// on (0, w_init_scale).
pub fn init_connectivity(
    n_pre: usize,
    n_post: usize,
    density: f64,
    inhib_frac: f64,
    w_init_scale: f64,
    rng: &mut impl Rng,
) -> Connectivity {
    let n = n_pre * n_post;
    let mut mask = vec![0.0; n];
    let mut present = Vec::new();
    for (k, m) in mask.iter_mut().enumerate() {
        if rng.gen::<f64>() < density {
            *m = 1.0;
            present.push(k);
        }
    }
    let mut sign = vec![0.0; n];
    let n_inhib = (inhib_frac * present.len() as f64).round() as usize;
    let mut order = present.clone();
    order.shuffle(rng);
    for (pos, &k) in order.iter().enumerate() {
        sign[k] = if pos < n_inhib { -1.0 } else { 1.0 };
    }
    let mut init_weights = vec![0.0; n];
    for &k in &present {
        init_weights[k] = rng.gen::<f64>() * w_init_scale;
    }
    Connectivity { n_pre, n_post, mask, sign, init_weights }
}

impl Connectivity {
    pub fn present_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }

    pub fn inhibitory_fraction(&self) -> f64 {
        let present = self.present_count();
        if present == 0 {
            return 0.0;
        }
        let inhib = self.sign.iter().filter(|&&s| s == -1.0).count();
        inhib as f64 / present as f64
    }
}

// ── DP-SNN ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DpsnnConfig {
    pub n_input: usize,
    pub n_hidden: usize,
    pub n_output: usize,
    pub rule: RuleKind,
    pub neuron: NeuronParams,
    pub spike: SpikeFunctionConfig,
    /// Weight-dependence exponent of the STDP rule (0 = additive).
    pub mu: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub trace_form: TraceForm,
    pub trace_x_max: f64,
}

/// Tape handles of the outer-loop-learnable pieces the DP-SNN reads.
#[derive(Debug, Clone, Copy)]
pub struct DpsnnParams {
    pub w_out: Value,
    pub eta_plus: Value,
    pub eta_minus: Value,
    pub alpha_pre: Value,
    pub beta_pre: Value,
    pub alpha_post: Value,
    pub beta_post: Value,
    pub alpha_slow: Value,
    pub beta_slow: Value,
    pub gamma: Value,
    /// Eligibility accumulation rate with the connectivity mask folded in.
    pub alpha_e_masked: Value,
    /// Sign-and-mask constant applied to magnitudes at every use.
    pub signmask: Value,
}

/// Inner-loop state threaded through an episode.
#[derive(Debug, Clone, Copy)]
pub struct DpsnnState {
    /// Plastic magnitudes, evolving within the episode.
    pub w: Value,
    pub hidden: NeuronLayerState,
    pub output: NeuronLayerState,
    pub x_pre: Value,
    pub x_post: Value,
    pub x_slow: Value,
    pub elig: EligibilityState,
}

impl DpsnnState {
    /// Fresh inner state: plastic weights at their initial magnitudes,
    /// traces and eligibility zero, neurons at rest.
    pub fn init(tape: &mut Tape, w_init: Value, cfg: &DpsnnConfig) -> Self {
        let nsyn = cfg.n_input * cfg.n_hidden;
        DpsnnState {
            w: w_init,
            hidden: state_at_rest(tape, cfg.n_hidden, &cfg.neuron),
            output: state_at_rest(tape, cfg.n_output, &cfg.neuron),
            x_pre: tape.leaf(vec![0.0; cfg.n_input]),
            x_post: tape.leaf(vec![0.0; cfg.n_hidden]),
            x_slow: tape.leaf(vec![0.0; cfg.n_hidden]),
            elig: EligibilityState {
                e_plus: tape.leaf(vec![0.0; nsyn]),
                e_minus: tape.leaf(vec![0.0; nsyn]),
            },
        }
    }
}

/// One 1 ms step of the DP-SNN. Returns the advanced state; hidden and
/// output spikes are `state.hidden.s` and `state.output.s`.
pub fn dpsnn_step(
    tape: &mut Tape,
    state: &DpsnnState,
    input_spikes: Value,
    modulation: Option<&ModulationSignal>,
    p: &DpsnnParams,
    cfg: &DpsnnConfig,
) -> Result<DpsnnState> {
    let (n_in, n_hid) = (cfg.n_input, cfg.n_hidden);

    // sign-constrained effective weights drive the current
    let w_eff = tape.mul(state.w, p.signmask)?;
    let i_hidden = tape.matvec(w_eff, input_spikes, n_in, n_hid)?;
    let hidden = step_cuba(tape, &state.hidden, i_hidden, &cfg.neuron, &cfg.spike)?;
    let i_out = tape.matvec(p.w_out, hidden.s, n_hid, cfg.n_output)?;
    let output = step_cuba(tape, &state.output, i_out, &cfg.neuron, &cfg.spike)?;

    // traces see this step's spikes before the rule reads them
    let pre_tr = TraceParams {
        alpha: p.alpha_pre,
        beta: p.beta_pre,
        x_max: cfg.trace_x_max,
        form: cfg.trace_form,
    };
    let post_tr = TraceParams {
        alpha: p.alpha_post,
        beta: p.beta_post,
        x_max: cfg.trace_x_max,
        form: cfg.trace_form,
    };
    let x_pre = trace_step(tape, state.x_pre, input_spikes, &pre_tr)?;
    let x_post = trace_step(tape, state.x_post, hidden.s, &post_tr)?;
    let slow_prev = state.x_slow;
    let x_slow = match cfg.rule {
        RuleKind::Triplet => {
            let slow_tr = TraceParams {
                alpha: p.alpha_slow,
                beta: p.beta_slow,
                x_max: cfg.trace_x_max,
                form: cfg.trace_form,
            };
            trace_step(tape, state.x_slow, hidden.s, &slow_tr)?
        }
        RuleKind::Pair => state.x_slow,
    };

    let rule = PlasticityParams {
        eta_plus: p.eta_plus,
        eta_minus: p.eta_minus,
        mu: cfg.mu,
        w_min: cfg.w_min,
        w_max: cfg.w_max,
    };
    let (ltp, ltd) = match cfg.rule {
        RuleKind::Pair => pair_stdp_parts(
            tape, state.w, x_pre, x_post, input_spikes, hidden.s, &rule, n_in, n_hid,
        )?,
        RuleKind::Triplet => triplet_stdp_parts(
            tape, state.w, x_pre, x_post, slow_prev, input_spikes, hidden.s, &rule, n_in, n_hid,
        )?,
    };

    // weight change uses the pre-update eligibility, then the traces advance
    let w = match modulation {
        Some(m) => apply_modulation(
            tape,
            state.w,
            &state.elig,
            m,
            Some((0.0, cfg.w_max)),
            n_in,
            n_hid,
        )?,
        None => state.w,
    };
    let ep = EligibilityParams { gamma: p.gamma, alpha_e: p.alpha_e_masked };
    let elig = eligibility_step(tape, &state.elig, ltp, ltd, &ep)?;

    Ok(DpsnnState { w, hidden, output, x_pre, x_post, x_slow, elig })
}

// ── NM-SNN ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NmsnnConfig {
    /// Total input width: sensory ⊕ DP hidden ⊕ feedback channels (if any).
    pub n_input: usize,
    pub n_l1: usize,
    pub n_l2: usize,
    /// Modulated width: the DP-SNN input layer size (pre-synaptic indexing).
    pub n_mod: usize,
    pub neuron: NeuronParams,
    pub spike: SpikeFunctionConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct NmsnnParams {
    pub w1: Value,
    pub w2: Value,
    pub readout_plus: Value,
    pub readout_minus: Value,
}

#[derive(Debug, Clone, Copy)]
pub struct NmsnnState {
    pub l1: NeuronLayerState,
    pub l2: NeuronLayerState,
}

impl NmsnnState {
    pub fn init(tape: &mut Tape, cfg: &NmsnnConfig) -> Self {
        NmsnnState {
            l1: state_at_rest(tape, cfg.n_l1, &cfg.neuron),
            l2: state_at_rest(tape, cfg.n_l2, &cfg.neuron),
        }
    }
}

/// One step of the modulatory network: concatenated inputs drive two CUBA
/// layers; a linear readout of the final layer's spikes yields the LTP and
/// LTD modulation vectors, indexed by DP-SNN input neuron.
pub fn nmsnn_step(
    tape: &mut Tape,
    state: &NmsnnState,
    inputs: &[Value],
    p: &NmsnnParams,
    cfg: &NmsnnConfig,
) -> Result<(ModulationSignal, NmsnnState)> {
    let cat = tape.concat(inputs)?;
    if tape.len(cat) != cfg.n_input {
        return Err(Error::ShapeMismatch {
            context: "nmsnn input",
            expected: cfg.n_input,
            got: tape.len(cat),
        });
    }
    let i1 = tape.matvec(p.w1, cat, cfg.n_input, cfg.n_l1)?;
    let l1 = step_cuba(tape, &state.l1, i1, &cfg.neuron, &cfg.spike)?;
    let i2 = tape.matvec(p.w2, l1.s, cfg.n_l1, cfg.n_l2)?;
    let l2 = step_cuba(tape, &state.l2, i2, &cfg.neuron, &cfg.spike)?;
    let m_plus = tape.matvec(p.readout_plus, l2.s, cfg.n_l2, cfg.n_mod)?;
    let m_minus = tape.matvec(p.readout_minus, l2.s, cfg.n_l2, cfg.n_mod)?;
    Ok((
        ModulationSignal { m_plus, m_minus, indexing: ModIndexing::Pre },
        NmsnnState { l1, l2 },
    ))
}

// ── CNN encoder ──────────────────────────────────────────────────────

/// Conv(1→c1, 3x3, pad 1) → norm → ReLU → pool2 → conv(c1→c2) → norm →
/// ReLU → pool2 → flatten. With 28x28 input and c2 = 4 the flat output is
/// 4·7·7 = 196, matching the spiking input layer.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CnnConfig {
    pub in_h: usize,
    pub in_w: usize,
    pub c1: usize,
    pub c2: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { in_h: 28, in_w: 28, c1: 4, c2: 4 }
    }
}

impl CnnConfig {
    pub fn flatten_dim(&self) -> usize {
        self.c2 * (self.in_h / 4) * (self.in_w / 4)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CnnParams {
    pub conv1: Value,
    pub norm1_gain: Value,
    pub norm1_bias: Value,
    pub conv2: Value,
    pub norm2_gain: Value,
    pub norm2_bias: Value,
}

/// Encode one grayscale image into the input-current vector.
pub fn cnn_encode(tape: &mut Tape, image: Value, p: &CnnParams, cfg: &CnnConfig) -> Result<Value> {
    let (h, w) = (cfg.in_h, cfg.in_w);
    if tape.len(image) != h * w {
        return Err(Error::ShapeMismatch {
            context: "cnn image",
            expected: h * w,
            got: tape.len(image),
        });
    }
    let c1 = tape.conv3x3(image, p.conv1, 1, cfg.c1, h, w)?;
    let n1 = tape.instance_norm(c1, p.norm1_gain, p.norm1_bias, cfg.c1, h * w)?;
    let r1 = tape.relu(n1)?;
    let p1 = tape.maxpool2(r1, cfg.c1, h, w)?;
    let (h2, w2) = (h / 2, w / 2);
    let c2 = tape.conv3x3(p1, p.conv2, cfg.c1, cfg.c2, h2, w2)?;
    let n2 = tape.instance_norm(c2, p.norm2_gain, p.norm2_bias, cfg.c2, h2 * w2)?;
    let r2 = tape.relu(n2)?;
    let p2 = tape.maxpool2(r2, cfg.c2, h2, w2)?;
    // already flat in the arena
    Ok(p2)
}

// ── readout ──────────────────────────────────────────────────────────

/// Weighted spike counts over a decision window: score_i = w_i * count_i.
pub fn readout(tape: &mut Tape, spike_counts: Value, weights: Value) -> Result<Value> {
    if tape.len(spike_counts) == 0 {
        return Err(Error::EmptyWindow);
    }
    tape.mul(weights, spike_counts)
}
