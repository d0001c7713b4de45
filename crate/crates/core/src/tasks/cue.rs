//! Permuted one-shot T-maze cue association episodes.
//!
//! Twenty sensory neurons in four groups of five: right cues, left cues,
//! decision-period markers, and pure noise. Which physical neuron plays
//! which role is shuffled per episode by a fresh permutation, so the inner
//! loop has to discover the assignment from the training trials.
//!
//! Timing per trial: each of the M cues is 25 ms followed by a 30 ms gap,
//! then a 50 ms pre-decision rest and a 25 ms decision window. With M = 5
//! the trial is exactly 350 steps at 1 ms resolution.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Feedback/label vector: element 0 flags a right trial, element 1 a left trial.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Side::Right => [1.0, 0.0],
            Side::Left => [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CueEpisodeSpec {
    pub n_sensory: usize,
    pub group_size: usize,
    pub p_active: f64,
    pub p_background: f64,
    pub cue_duration: usize,
    pub inter_cue_gap: usize,
    pub pre_decision_gap: usize,
    pub decision_duration: usize,
    /// M, the number of cues per trial.
    pub n_cues: usize,
    /// Training trials per class (1 = one-shot).
    pub n_shot: usize,
}

impl Default for CueEpisodeSpec {
    fn default() -> Self {
        CueEpisodeSpec {
            n_sensory: 20,
            group_size: 5,
            p_active: 0.75,
            p_background: 0.15,
            cue_duration: 25,
            inter_cue_gap: 30,
            pre_decision_gap: 50,
            decision_duration: 25,
            n_cues: 5,
            n_shot: 1,
        }
    }
}

impl CueEpisodeSpec {
    pub fn trial_len(&self) -> usize {
        self.n_cues * (self.cue_duration + self.inter_cue_gap)
            + self.pre_decision_gap
            + self.decision_duration
    }

    /// Step range of the decision window within a trial.
    pub fn decision_window(&self) -> (usize, usize) {
        let start = self.n_cues * (self.cue_duration + self.inter_cue_gap) + self.pre_decision_gap;
        (start, start + self.decision_duration)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cues == 0 {
            return Err(Error::InvalidArg("cue count M must be at least 1".into()));
        }
        if self.n_shot == 0 {
            return Err(Error::InvalidArg("n_shot must be at least 1".into()));
        }
        if self.n_sensory != 4 * self.group_size {
            return Err(Error::Config(
                "sensory width must be four groups of group_size".into(),
            ));
        }
        Ok(())
    }
}

/// One maze run: a frozen spike raster, the feedback schedule, and the label.
#[derive(Debug, Clone)]
pub struct CueTrial {
    /// T x n_sensory, row-major, values in {0, 1}. Pre-sampled so replays
    /// and gradient checks are deterministic.
    pub raster: Vec<f64>,
    /// T x 2 one-hot feedback, nonzero only in the decision window of
    /// training trials.
    pub feedback: Vec<f64>,
    pub label: Side,
    pub is_test: bool,
    pub decision_window: (usize, usize),
}

impl CueTrial {
    pub fn steps(&self, n_sensory: usize) -> usize {
        self.raster.len() / n_sensory
    }

    pub fn spikes_at(&self, t: usize, n_sensory: usize) -> &[f64] {
        &self.raster[t * n_sensory..(t + 1) * n_sensory]
    }

    pub fn feedback_at(&self, t: usize) -> &[f64] {
        &self.feedback[t * 2..t * 2 + 2]
    }
}

/// A full inner-loop task: permutation, training trials, one test trial.
#[derive(Debug, Clone)]
pub struct CueEpisode {
    pub permutation: Vec<usize>,
    pub trials: Vec<CueTrial>,
    pub spec: CueEpisodeSpec,
}

impl CueEpisode {
    pub fn total_steps(&self) -> usize {
        self.trials.iter().map(|tr| tr.steps(self.spec.n_sensory)).sum()
    }

    pub fn test_trial(&self) -> &CueTrial {
        self.trials.last().expect("episode has trials")
    }
}

/// Uniform random permutation of the sensory indices.
pub fn sample_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Cue side sequence with a strict majority on `side`: iid fair draws,
/// rejected until the majority comes out right.
fn cue_sides(side: Side, m: usize, rng: &mut impl Rng) -> Vec<Side> {
    loop {
        let seq: Vec<Side> = (0..m)
            .map(|_| if rng.gen::<bool>() { Side::Right } else { Side::Left })
            .collect();
        let right = seq.iter().filter(|s| **s == Side::Right).count();
        let left = m - right;
        let majority = if right > left {
            Some(Side::Right)
        } else if left > right {
            Some(Side::Left)
        } else {
            None
        };
        if majority == Some(side) {
            return seq;
        }
    }
}

/// Generate one trial: Bernoulli spike raster over the permuted neurons plus
/// the feedback schedule. Canonical group order before permutation:
/// right cues, left cues, decision markers, noise.
pub fn generate_cue_trial(
    perm: &[usize],
    side: Side,
    spec: &CueEpisodeSpec,
    is_test: bool,
    rng: &mut impl Rng,
) -> Result<CueTrial> {
    spec.validate()?;
    if perm.len() != spec.n_sensory {
        return Err(Error::ShapeMismatch {
            context: "cue permutation",
            expected: spec.n_sensory,
            got: perm.len(),
        });
    }
    let steps = spec.trial_len();
    let g = spec.group_size;
    let sides = cue_sides(side, spec.n_cues, rng);
    let (dec_start, dec_end) = spec.decision_window();

    let cue_window_of = |t: usize| -> Option<usize> {
        let span = spec.cue_duration + spec.inter_cue_gap;
        let k = t / span;
        if k < spec.n_cues && t % span < spec.cue_duration {
            Some(k)
        } else {
            None
        }
    };

    let mut raster = vec![0.0; steps * spec.n_sensory];
    let mut feedback = vec![0.0; steps * 2];
    for t in 0..steps {
        let active_cue = cue_window_of(t);
        let in_decision = t >= dec_start && t < dec_end;
        for i in 0..spec.n_sensory {
            let group = i / g;
            let p = match group {
                0 | 1 => {
                    let group_side = if group == 0 { Side::Right } else { Side::Left };
                    match active_cue {
                        Some(k) if sides[k] == group_side => spec.p_active,
                        _ => spec.p_background,
                    }
                }
                2 => {
                    if in_decision {
                        spec.p_active
                    } else {
                        spec.p_background
                    }
                }
                _ => spec.p_background,
            };
            if rng.gen::<f64>() < p {
                raster[t * spec.n_sensory + perm[i]] = 1.0;
            }
        }
        if in_decision && !is_test {
            let oh = side.one_hot();
            feedback[t * 2] = oh[0];
            feedback[t * 2 + 1] = oh[1];
        }
    }
    Ok(CueTrial {
        raster,
        feedback,
        label: side,
        is_test,
        decision_window: (dec_start, dec_end),
    })
}

/// Build a full episode: fresh permutation, n_shot training trials per class
/// in random order, then one test trial with a random side.
pub fn build_cue_episode(spec: &CueEpisodeSpec, rng: &mut impl Rng) -> Result<CueEpisode> {
    spec.validate()?;
    let perm = sample_permutation(spec.n_sensory, rng);
    let mut train_sides = Vec::new();
    for _ in 0..spec.n_shot {
        train_sides.push(Side::Right);
        train_sides.push(Side::Left);
    }
    train_sides.shuffle(rng);
    let mut trials = Vec::with_capacity(train_sides.len() + 1);
    for side in train_sides {
        trials.push(generate_cue_trial(&perm, side, spec, false, rng)?);
    }
    let test_side = if rng.gen::<bool>() { Side::Right } else { Side::Left };
    trials.push(generate_cue_trial(&perm, test_side, spec, true, rng)?);
    Ok(CueEpisode { permutation: perm, trials, spec: *spec })
}

/// Two-class binary cross entropy on the readout probabilities, evaluated on
/// the test trial's decision window. Probabilities must already be clamped
/// inside (0, 1).
pub fn meta_loss_bce(tape: &mut Tape, probs: Value, label: [f64; 2]) -> Result<Value> {
    if tape.len(probs) != 2 {
        return Err(Error::ShapeMismatch {
            context: "bce probabilities",
            expected: 2,
            got: tape.len(probs),
        });
    }
    let p = tape.data(probs);
    if p.iter().any(|&x| x <= 0.0 || x >= 1.0) {
        return Err(Error::InvalidArg(format!(
            "bce probabilities must lie strictly inside (0,1), got {p:?}"
        )));
    }
    let log_p = tape.log(probs)?;
    let one_minus = tape.affine(probs, -1.0, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let pos = tape.dot_const(log_p, vec![-label[0], -label[1]])?;
    let neg = tape.dot_const(log_q, vec![-(1.0 - label[0]), -(1.0 - label[1])])?;
    tape.add(pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn five_cue_trial_is_350_steps() {
        let spec = CueEpisodeSpec::default();
        assert_eq!(spec.trial_len(), 350);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let perm = sample_permutation(20, &mut rng);
        let tr = generate_cue_trial(&perm, Side::Right, &spec, false, &mut rng).unwrap();
        assert_eq!(tr.steps(20), 350);
    }

    #[test]
    fn one_shot_episode_is_three_trials_1050_steps() {
        let spec = CueEpisodeSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = build_cue_episode(&spec, &mut rng).unwrap();
        assert_eq!(ep.trials.len(), 3);
        assert_eq!(ep.total_steps(), 1050);
        assert!(ep.trials[2].is_test);
        assert!(!ep.trials[0].is_test && !ep.trials[1].is_test);
        let sides: Vec<Side> = ep.trials[..2].iter().map(|t| t.label).collect();
        assert!(sides.contains(&Side::Left) && sides.contains(&Side::Right));
    }

    #[test]
    fn permutation_is_a_bijection_and_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = sample_permutation(20, &mut rng);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        let p2 = sample_permutation(20, &mut ChaCha8Rng::seed_from_u64(5));
        let p_again = sample_permutation(20, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(p2, p_again);
        let p3 = sample_permutation(20, &mut ChaCha8Rng::seed_from_u64(6));
        assert_ne!(p2, p3);
    }

    #[test]
    fn test_trial_carries_no_feedback() {
        let spec = CueEpisodeSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = build_cue_episode(&spec, &mut rng).unwrap();
        assert!(ep.test_trial().feedback.iter().all(|&f| f == 0.0));
        for tr in &ep.trials[..2] {
            let (a, b) = tr.decision_window;
            let inside: f64 = (a..b).map(|t| tr.feedback_at(t).iter().sum::<f64>()).sum();
            assert!(inside > 0.0, "training feedback missing");
            for t in 0..a {
                assert_eq!(tr.feedback_at(t), &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn single_cue_majority_is_that_cue() {
        let spec = CueEpisodeSpec { n_cues: 1, ..CueEpisodeSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = generate_cue_trial(
            &sample_permutation(20, &mut rng),
            Side::Left,
            &spec,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tr.label, Side::Left);
        assert_eq!(tr.steps(20), 1 * 55 + 75);
    }

    #[test]
    fn zero_cues_rejected() {
        let spec = CueEpisodeSpec { n_cues: 0, ..CueEpisodeSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(build_cue_episode(&spec, &mut rng).is_err());
    }

    #[test]
    fn active_cue_rate_near_three_quarters() {
        // aggregate the top-activity sensory neuron rate over many trials
        let spec = CueEpisodeSpec { n_cues: 1, ..CueEpisodeSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut fired = 0usize;
        let mut total = 0usize;
        for _ in 0..300 {
            let perm = sample_permutation(20, &mut rng);
            let tr = generate_cue_trial(&perm, Side::Right, &spec, false, &mut rng).unwrap();
            // right-cue canonical group is 0..5; single right cue occupies steps 0..25
            for t in 0..spec.cue_duration {
                for i in 0..5 {
                    fired += tr.raster[t * 20 + perm[i]] as usize;
                    total += 1;
                }
            }
        }
        let rate = fired as f64 / total as f64;
        // binomial 99% CI around 0.75 with n = 37500 is about ±0.006
        assert!((rate - 0.75).abs() < 0.01, "active rate {rate}");
    }

    #[test]
    fn episode_generation_is_pure_in_the_seed() {
        let spec = CueEpisodeSpec::default();
        let a = build_cue_episode(&spec, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = build_cue_episode(&spec, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.permutation, b.permutation);
        for (ta, tb) in a.trials.iter().zip(&b.trials) {
            assert_eq!(ta.raster, tb.raster);
            assert_eq!(ta.feedback, tb.feedback);
            assert_eq!(ta.label, tb.label);
        }
    }

    #[test]
    fn bce_closed_forms() {
        let mut t = Tape::new();
        let half = t.leaf(vec![0.5, 0.5]);
        let l = meta_loss_bce(&mut t, half, [1.0, 0.0]).unwrap();
        assert!((t.scalar(l) - 2.0 * (2.0f64).ln()).abs() < 1e-12);

        let mut t = Tape::new();
        let eps = 1e-6;
        let near = t.leaf(vec![1.0 - eps, eps]);
        let l = meta_loss_bce(&mut t, near, [1.0, 0.0]).unwrap();
        assert!(t.scalar(l) < 1e-5);

        // symmetric under a simultaneous swap of p and y components
        let mut t = Tape::new();
        let p1 = t.leaf(vec![0.8, 0.3]);
        let l1 = meta_loss_bce(&mut t, p1, [1.0, 0.0]).unwrap();
        let p2 = t.leaf(vec![0.3, 0.8]);
        let l2 = meta_loss_bce(&mut t, p2, [0.0, 1.0]).unwrap();
        assert!((t.scalar(l1) - t.scalar(l2)).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_degenerate_probabilities() {
        let mut t = Tape::new();
        let bad = t.leaf(vec![1.0, 0.3]);
        assert!(meta_loss_bce(&mut t, bad, [1.0, 0.0]).is_err());
    }

    #[test]
    fn majority_always_strict() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for m in [1usize, 2, 3, 4, 5, 8] {
            for _ in 0..50 {
                let sides = cue_sides(Side::Right, m, &mut rng);
                let right = sides.iter().filter(|s| **s == Side::Right).count();
                assert!(right * 2 > m, "no strict right majority for M={m}");
            }
        }
    }
}
