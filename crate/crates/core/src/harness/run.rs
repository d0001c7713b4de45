//! Episode execution: build a fresh tape, register the parameter set,
//! unroll the simulation, compute the meta-loss, and (in training mode)
//! run backward and extract named gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};
use crate::harness::config::{TaskKind, TrainConfig};
use crate::harness::params::{NamedArrays, ParamSet};
use crate::networks::{
    cnn_encode, dpsnn_step, nmsnn_step, readout, CnnParams, DpsnnConfig, DpsnnParams, DpsnnState,
    NmsnnConfig, NmsnnParams, NmsnnState,
};
use crate::neuromod::ModulationSignal;
use crate::neuron::{state_at_rest, step_cuba};
use crate::tasks::{meta_loss_bce, CharEpisode, CueEpisode, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    TrainGrad,
    Eval,
}

/// One materialized inner-loop task, either flavor.
#[derive(Debug, Clone)]
pub enum EpisodeData {
    Cue(CueEpisode),
    Char(CharEpisode),
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub correct: bool,
    pub prediction: usize,
    /// L1 movement of the plastic weights over the episode.
    pub plastic_drift: f64,
    pub grads: Option<NamedArrays>,
}

struct Handles {
    map: BTreeMap<String, Value>,
}

impl Handles {
    fn register(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut map = BTreeMap::new();
        for (name, data) in &params.entries {
            map.insert(name.clone(), tape.param(data));
        }
        Handles { map }
    }

    fn get(&self, name: &str) -> Value {
        self.map[name]
    }

    fn extract_grads(
        &self,
        tape: &Tape,
        gm: &crate::autodiff::GradMap,
        params: &ParamSet,
    ) -> NamedArrays {
        let mut out = NamedArrays::new();
        for (name, v) in &self.map {
            out.insert(name.clone(), gm.get_or_zeros(*v, params.get(name).len()));
        }
        let _ = tape;
        out
    }
}

struct Rig {
    dp_cfg: DpsnnConfig,
    nm_cfg: NmsnnConfig,
    dp_params: DpsnnParams,
    nm_params: NmsnnParams,
}

fn build_rig(tape: &mut Tape, h: &Handles, params: &ParamSet, cfg: &TrainConfig) -> Result<Rig> {
    let dp_cfg = DpsnnConfig {
        n_input: cfg.n_input(),
        n_hidden: cfg.dp.n_hidden,
        n_output: cfg.n_output(),
        rule: cfg.rule(),
        neuron: cfg.dp.neuron,
        spike: cfg.surrogate.spike(),
        mu: cfg.dp.mu,
        w_min: 0.0,
        w_max: cfg.dp.w_max,
        trace_form: cfg.dp.trace_form,
        trace_x_max: cfg.dp.trace_x_max,
    };
    let nm_cfg = NmsnnConfig {
        n_input: cfg.n_nm_input(),
        n_l1: cfg.nm.n_l1,
        n_l2: cfg.nm.n_l2,
        n_mod: cfg.n_input(),
        neuron: cfg.nm.neuron,
        spike: cfg.surrogate.spike(),
    };
    let mask_leaf = tape.leaf(params.dp_mask.clone());
    let signmask = tape.leaf(params.dp_sign.clone());
    let alpha_e_masked = tape.mul(h.get("elig.alpha_e"), mask_leaf)?;
    let has_slow = h.map.contains_key("plast.alpha_slow");
    let dp_params = DpsnnParams {
        w_out: h.get("dp.w_out"),
        eta_plus: h.get("plast.eta_plus"),
        eta_minus: h.get("plast.eta_minus"),
        alpha_pre: h.get("plast.alpha_pre"),
        beta_pre: h.get("plast.beta_pre"),
        alpha_post: h.get("plast.alpha_post"),
        beta_post: h.get("plast.beta_post"),
        alpha_slow: if has_slow { h.get("plast.alpha_slow") } else { h.get("plast.alpha_post") },
        beta_slow: if has_slow { h.get("plast.beta_slow") } else { h.get("plast.beta_post") },
        gamma: h.get("elig.gamma"),
        alpha_e_masked,
        signmask,
    };
    let nm_params = NmsnnParams {
        w1: h.get("nm.w1"),
        w2: h.get("nm.w2"),
        readout_plus: h.get("nm.readout_plus"),
        readout_minus: h.get("nm.readout_minus"),
    };
    Ok(Rig { dp_cfg, nm_cfg, dp_params, nm_params })
}

fn l1_drift(tape: &Tape, a: Value, b: Value) -> f64 {
    tape.data(a)
        .iter()
        .zip(tape.data(b))
        .map(|(x, y)| (x - y).abs())
        .sum()
}

pub fn run_episode(
    params: &ParamSet,
    cfg: &TrainConfig,
    episode: &EpisodeData,
    mode: RunMode,
) -> Result<EpisodeOutcome> {
    match episode {
        EpisodeData::Cue(ep) => run_cue_episode(params, cfg, ep, mode),
        EpisodeData::Char(ep) => run_char_episode(params, cfg, ep, mode),
    }
}

fn finish(
    tape: &mut Tape,
    h: &Handles,
    params: &ParamSet,
    loss: Value,
    correct: bool,
    prediction: usize,
    plastic_drift: f64,
    mode: RunMode,
) -> Result<EpisodeOutcome> {
    let loss_val = tape.scalar(loss);
    let grads = match mode {
        RunMode::TrainGrad => {
            let gm = tape.backward(loss)?;
            Some(h.extract_grads(tape, &gm, params))
        }
        RunMode::Eval => None,
    };
    Ok(EpisodeOutcome { loss: loss_val, correct, prediction, plastic_drift, grads })
}

fn run_cue_episode(
    params: &ParamSet,
    cfg: &TrainConfig,
    episode: &CueEpisode,
    mode: RunMode,
) -> Result<EpisodeOutcome> {
    if cfg.task != TaskKind::Cue {
        return Err(Error::Config("cue episode under a non-cue config".into()));
    }
    let mut tape = Tape::new();
    let h = Handles::register(&mut tape, params);
    let rig = build_rig(&mut tape, &h, params, cfg)?;
    let n_sens = episode.spec.n_sensory;
    if n_sens != rig.dp_cfg.n_input {
        return Err(Error::ShapeMismatch {
            context: "episode sensory width",
            expected: rig.dp_cfg.n_input,
            got: n_sens,
        });
    }

    let w_start = h.get("dp.w_in");
    let mut dp = DpsnnState::init(&mut tape, w_start, &rig.dp_cfg);
    let mut nm = NmsnnState::init(&mut tape, &rig.nm_cfg);
    let mut counts = tape.leaf(vec![0.0; rig.dp_cfg.n_output]);

    for trial in &episode.trials {
        let steps = trial.steps(n_sens);
        let (dec_start, dec_end) = trial.decision_window;
        for t in 0..steps {
            let sens = tape.leaf(trial.spikes_at(t, n_sens).to_vec());
            let modulation: Option<ModulationSignal> = if cfg.ablation.zero_modulation {
                None
            } else {
                let fb = tape.leaf(trial.feedback_at(t).to_vec());
                let (m, nm_next) =
                    nmsnn_step(&mut tape, &nm, &[sens, dp.hidden.s, fb], &rig.nm_params, &rig.nm_cfg)?;
                nm = nm_next;
                Some(m)
            };
            dp = dpsnn_step(&mut tape, &dp, sens, modulation.as_ref(), &rig.dp_params, &rig.dp_cfg)?;
            if trial.is_test && t >= dec_start && t < dec_end {
                counts = tape.add(counts, dp.output.s)?;
            }
        }
    }

    let scores = readout(&mut tape, counts, h.get("dp.readout"))?;
    let probs = tape.logistic(scores)?;
    let clamped = tape.clamp(probs, 1e-7, 1.0 - 1e-7)?;
    let label = episode.test_trial().label;
    let loss = meta_loss_bce(&mut tape, clamped, label.one_hot())?;

    let sc = tape.data(scores);
    // index 0 scores the right side; exact ties resolve to left
    let prediction_side = if sc[0] > sc[1] { Side::Right } else { Side::Left };
    let correct = prediction_side == label;
    let prediction = if prediction_side == Side::Right { 0 } else { 1 };
    let drift = l1_drift(&tape, dp.w, w_start);
    finish(&mut tape, &h, params, loss, correct, prediction, drift, mode)
}

fn run_char_episode(
    params: &ParamSet,
    cfg: &TrainConfig,
    episode: &CharEpisode,
    mode: RunMode,
) -> Result<EpisodeOutcome> {
    if cfg.task != TaskKind::Character {
        return Err(Error::Config("character episode under a non-character config".into()));
    }
    let mut tape = Tape::new();
    let h = Handles::register(&mut tape, params);
    let rig = build_rig(&mut tape, &h, params, cfg)?;
    let spec = &episode.spec;
    let n_in = rig.dp_cfg.n_input;

    let cnn_params = CnnParams {
        conv1: h.get("cnn.conv1"),
        norm1_gain: h.get("cnn.norm1_gain"),
        norm1_bias: h.get("cnn.norm1_bias"),
        conv2: h.get("cnn.conv2"),
        norm2_gain: h.get("cnn.norm2_gain"),
        norm2_bias: h.get("cnn.norm2_bias"),
    };
    let mut encodings = Vec::with_capacity(episode.images.len());
    for img in &episode.images {
        let leaf = tape.leaf(img.clone());
        encodings.push(cnn_encode(&mut tape, leaf, &cnn_params, &cfg.cnn)?);
    }

    let w_start = h.get("dp.w_in");
    let mut dp = DpsnnState::init(&mut tape, w_start, &rig.dp_cfg);
    let mut nm = NmsnnState::init(&mut tape, &rig.nm_cfg);
    let mut input_layer = state_at_rest(&mut tape, n_in, &cfg.dp.neuron);
    let mut slot_counts: Vec<Value> = (0..spec.n_phase2).map(|_| tape.leaf(vec![0.0])).collect();
    let (p1_start, p1_end) = spec.phase1_window();

    for t in 0..spec.total_steps() {
        let img_idx = t / spec.present_ms;
        input_layer = step_cuba(
            &mut tape,
            &input_layer,
            encodings[img_idx],
            &cfg.dp.neuron,
            &rig.dp_cfg.spike,
        )?;
        let s_in = input_layer.s;
        let in_phase1 = t >= p1_start && t < p1_end;
        // modulation is task-gated to the phase-1 window; outside it the
        // NM output cannot reach anything, so the network is not stepped
        let modulation = if in_phase1 && !cfg.ablation.zero_modulation {
            let (m, nm_next) =
                nmsnn_step(&mut tape, &nm, &[s_in, dp.hidden.s], &rig.nm_params, &rig.nm_cfg)?;
            nm = nm_next;
            Some(m)
        } else {
            None
        };
        dp = dpsnn_step(&mut tape, &dp, s_in, modulation.as_ref(), &rig.dp_params, &rig.dp_cfg)?;
        if img_idx >= 1 {
            let slot = img_idx - 1;
            slot_counts[slot] = tape.add(slot_counts[slot], dp.output.s)?;
        }
    }

    let weights = h.get("dp.readout");
    let mut scores = Vec::with_capacity(spec.n_phase2);
    for &c in &slot_counts {
        scores.push(readout(&mut tape, c, weights)?);
    }
    let score_vec = tape.concat(&scores)?;
    let loss = tape.softmax_ce(score_vec, episode.match_slot)?;

    let sd = tape.data(score_vec);
    let mut prediction = 0;
    for (k, &v) in sd.iter().enumerate() {
        if v > sd[prediction] {
            prediction = k;
        }
    }
    let correct = prediction == episode.match_slot;
    let drift = l1_drift(&tape, dp.w, w_start);
    finish(&mut tape, &h, params, loss, correct, prediction, drift, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::params::init_params;
    use crate::harness::seeds::{mix2, Tag};
    use crate::tasks::build_cue_episode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cue_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.cue.n_cues = 1;
        cfg.dp.n_hidden = 12;
        cfg.nm.n_l1 = 16;
        cfg.nm.n_l2 = 16;
        cfg
    }

    fn episode(cfg: &TrainConfig, seed: u64) -> EpisodeData {
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(cfg.seed, Tag::TrainEpisode as u64, 0, seed));
        EpisodeData::Cue(build_cue_episode(&cfg.cue, &mut rng).unwrap())
    }

    #[test]
    fn cue_episode_runs_and_is_deterministic() {
        let cfg = small_cue_cfg();
        let params = init_params(&cfg).unwrap();
        let ep = episode(&cfg, 3);
        let a = run_episode(&params, &cfg, &ep, RunMode::Eval).unwrap();
        let b = run_episode(&params, &cfg, &ep, RunMode::Eval).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.prediction, b.prediction);
        assert!(a.loss.is_finite());
    }

    #[test]
    fn train_mode_yields_finite_gradients_for_every_param() {
        let cfg = small_cue_cfg();
        let params = init_params(&cfg).unwrap();
        let ep = episode(&cfg, 5);
        let out = run_episode(&params, &cfg, &ep, RunMode::TrainGrad).unwrap();
        let grads = out.grads.unwrap();
        assert_eq!(grads.len(), params.entries.len());
        for (name, g) in &grads {
            assert_eq!(g.len(), params.get(name).len(), "shape of {name}");
            assert!(g.iter().all(|x| x.is_finite()), "non-finite grad in {name}");
        }
        // the loss must reach the modulatory pathway
        let nm_norm: f64 = grads["nm.readout_plus"].iter().map(|x| x * x).sum();
        assert!(nm_norm > 0.0, "no gradient into the NM readout");
        let eta_norm: f64 = grads["plast.eta_plus"].iter().map(|x| x * x).sum();
        assert!(eta_norm > 0.0, "no gradient into the plasticity rates");
    }

    #[test]
    fn zero_modulation_ablation_freezes_plastic_weights() {
        let mut cfg = small_cue_cfg();
        cfg.ablation.zero_modulation = true;
        let params = init_params(&cfg).unwrap();
        let out = run_episode(&params, &cfg, &episode(&cfg, 7), RunMode::Eval).unwrap();
        assert_eq!(out.plastic_drift, 0.0);
    }

    #[test]
    fn zeroed_nm_readout_freezes_plastic_weights_through_the_full_path() {
        let cfg = small_cue_cfg();
        let mut params = init_params(&cfg).unwrap();
        params.zero("nm.readout_plus");
        params.zero("nm.readout_minus");
        let out = run_episode(&params, &cfg, &episode(&cfg, 11), RunMode::Eval).unwrap();
        assert_eq!(out.plastic_drift, 0.0);
    }

    #[test]
    fn live_modulation_moves_plastic_weights() {
        let mut cfg = small_cue_cfg();
        cfg.nm.readout_init_scale = 0.05;
        let params = init_params(&cfg).unwrap();
        let out = run_episode(&params, &cfg, &episode(&cfg, 13), RunMode::Eval).unwrap();
        assert!(out.plastic_drift > 0.0, "expected inner-loop weight movement");
    }

    fn small_char_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.task = TaskKind::Character;
        cfg.dp.n_hidden = 10;
        cfg.nm.n_l1 = 12;
        cfg.nm.n_l2 = 12;
        cfg
    }

    fn char_episode(seed: u64) -> EpisodeData {
        let dir = std::env::temp_dir().join(format!("snn-run-test-{seed}"));
        let manifest =
            crate::tasks::synthetic::write_synthetic_dataset(&dir, 6, 2, 99).unwrap();
        let idx = crate::tasks::load_dataset_manifest(&manifest).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EpisodeData::Char(
            crate::tasks::generate_character_episode(
                &idx,
                &crate::tasks::CharacterEpisodeSpec::default(),
                &mut rng,
            )
            .unwrap(),
        )
    }

    #[test]
    fn character_episode_runs_with_gradients() {
        let cfg = small_char_cfg();
        let params = init_params(&cfg).unwrap();
        let ep = char_episode(31);
        let out = run_episode(&params, &cfg, &ep, RunMode::TrainGrad).unwrap();
        assert!(out.loss.is_finite());
        assert!(out.prediction < 5);
        let grads = out.grads.unwrap();
        let cnn_norm: f64 = grads["cnn.conv1"].iter().map(|x| x * x).sum();
        assert!(cnn_norm > 0.0, "no gradient into the CNN");
    }

    #[test]
    fn mismatched_task_and_episode_rejected() {
        let cfg = small_cue_cfg();
        let params = init_params(&cfg).unwrap();
        let ep = char_episode(37);
        assert!(run_episode(&params, &cfg, &ep, RunMode::Eval).is_err());
    }
}
