//! The outer-loop parameter set: named f64 arrays plus the fixed
//! connectivity constants. Everything numeric the outer loop can touch
//! lives here, keyed by name in a BTreeMap so iteration order is stable.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::config::{TaskKind, TrainConfig};
use crate::harness::seeds::{mix, Tag};
use crate::networks::{init_connectivity, Connectivity, RuleKind};

pub type NamedArrays = BTreeMap<String, Vec<f64>>;

/// Learnable parameters plus connectivity constants (mask, sign).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub entries: NamedArrays,
    pub dp_mask: Vec<f64>,
    pub dp_sign: Vec<f64>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> &[f64] {
        &self.entries[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.entries.get_mut(name).expect("unknown parameter")
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Zero one named array in place (ablation hooks in tests).
    pub fn zero(&mut self, name: &str) {
        for v in self.get_mut(name) {
            *v = 0.0;
        }
    }
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Draw the initial parameter set for a config. Connectivity and every
/// weight block get independent deterministic streams off the master seed.
pub fn init_params(cfg: &TrainConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let n_in = cfg.n_input();
    let n_hid = cfg.dp.n_hidden;
    let n_out = cfg.n_output();
    let nsyn = n_in * n_hid;

    let mut conn_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, Tag::Connectivity as u64, 0));
    let Connectivity { mask, sign, init_weights, .. } = init_connectivity(
        n_in,
        n_hid,
        cfg.dp.density,
        cfg.dp.inhib_frac,
        cfg.dp.w_init_scale,
        &mut conn_rng,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, Tag::ParamInit as u64, 0));
    let mut e: NamedArrays = BTreeMap::new();

    e.insert("dp.w_in".into(), init_weights);
    let wo = cfg.w_out_init_scale;
    e.insert("dp.w_out".into(), uniform(&mut rng, n_hid * n_out, -wo, wo));
    e.insert("dp.readout".into(), vec![cfg.readout_init; n_out]);

    let eta_len = if cfg.plasticity.per_synapse_eta { nsyn } else { 1 };
    e.insert("plast.eta_plus".into(), vec![cfg.plasticity.eta_plus; eta_len]);
    e.insert("plast.eta_minus".into(), vec![cfg.plasticity.eta_minus; eta_len]);
    e.insert("plast.alpha_pre".into(), vec![cfg.plasticity.alpha_x]);
    e.insert("plast.beta_pre".into(), vec![cfg.plasticity.beta]);
    e.insert("plast.alpha_post".into(), vec![cfg.plasticity.alpha_x]);
    e.insert("plast.beta_post".into(), vec![cfg.plasticity.beta]);
    if matches!(cfg.rule(), RuleKind::Triplet) {
        e.insert("plast.alpha_slow".into(), vec![cfg.plasticity.alpha_slow]);
        e.insert("plast.beta_slow".into(), vec![cfg.plasticity.beta_slow]);
    }
    e.insert("elig.gamma".into(), vec![cfg.eligibility.gamma]);
    e.insert("elig.alpha_e".into(), vec![cfg.eligibility.alpha_e; nsyn]);

    let nm_in = cfg.n_nm_input();
    let nw = cfg.nm.w_init_scale;
    let ro = cfg.nm.readout_init_scale;
    e.insert("nm.w1".into(), uniform(&mut rng, nm_in * cfg.nm.n_l1, -nw, nw));
    e.insert("nm.w2".into(), uniform(&mut rng, cfg.nm.n_l1 * cfg.nm.n_l2, -nw, nw));
    e.insert("nm.readout_plus".into(), uniform(&mut rng, cfg.nm.n_l2 * n_in, -ro, ro));
    e.insert("nm.readout_minus".into(), uniform(&mut rng, cfg.nm.n_l2 * n_in, -ro, ro));

    if cfg.task == TaskKind::Character {
        let c = &cfg.cnn;
        // conv kernels scaled by fan-in
        let k1 = 1.0 / (9.0f64).sqrt();
        let k2 = 1.0 / (9.0 * c.c1 as f64).sqrt();
        e.insert("cnn.conv1".into(), uniform(&mut rng, c.c1 * 9, -k1, k1));
        e.insert("cnn.norm1_gain".into(), vec![1.0; c.c1]);
        e.insert("cnn.norm1_bias".into(), vec![0.0; c.c1]);
        e.insert("cnn.conv2".into(), uniform(&mut rng, c.c2 * c.c1 * 9, -k2, k2));
        e.insert("cnn.norm2_gain".into(), vec![1.0; c.c2]);
        e.insert("cnn.norm2_bias".into(), vec![0.0; c.c2]);
    }

    Ok(ParamSet { entries: e, dp_mask: mask, dp_sign: sign })
}

/// Project parameters back into their valid domains after an outer update.
/// Keeps magnitudes in [0, w_max], decay constants inside (0, 1), increment
/// gains non-negative, and the slow trace slower than the fast one.
pub fn project_params(p: &mut ParamSet, cfg: &TrainConfig) -> Result<()> {
    let clamp_vec = |v: &mut Vec<f64>, lo: f64, hi: f64| {
        for x in v.iter_mut() {
            *x = x.clamp(lo, hi);
        }
    };
    let mask = p.dp_mask.clone();
    {
        let w = p.get_mut("dp.w_in");
        if w.len() != mask.len() {
            return Err(Error::ShapeMismatch {
                context: "project dp.w_in",
                expected: mask.len(),
                got: w.len(),
            });
        }
        for (x, m) in w.iter_mut().zip(&mask) {
            *x = (x.clamp(0.0, cfg.dp.w_max)) * m;
        }
    }
    for name in ["plast.alpha_pre", "plast.alpha_post", "elig.gamma"] {
        clamp_vec(p.get_mut(name), 1e-4, 0.9995);
    }
    for name in ["plast.beta_pre", "plast.beta_post"] {
        clamp_vec(p.get_mut(name), 0.0, 5.0);
    }
    if p.entries.contains_key("plast.alpha_slow") {
        let fast = p.get("plast.alpha_post")[0];
        let slow = p.get_mut("plast.alpha_slow");
        slow[0] = slow[0].clamp((fast + 1e-4).min(0.9995), 0.9999);
        clamp_vec(p.get_mut("plast.beta_slow"), 0.0, 5.0);
    }
    Ok(())
}
