//! Outer-loop parameter updates: plain SGD and the adaptive-moment scheme
//! with bias correction.

use crate::error::{Error, Result};
use crate::harness::config::{OptimizerConfig, OptimizerKind};
use crate::harness::params::{NamedArrays, ParamSet};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub m: NamedArrays,
    pub v: NamedArrays,
    pub t: u64,
}

/// Apply one update. The gradient map must cover every parameter.
pub fn outer_update(
    params: &mut ParamSet,
    grads: &NamedArrays,
    cfg: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<()> {
    for name in params.entries.keys() {
        if !grads.contains_key(name) {
            return Err(Error::MissingGradient(name.clone()));
        }
    }
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (name, p) in params.entries.iter_mut() {
                let g = &grads[name];
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv -= cfg.lr * gv;
                }
            }
        }
        OptimizerKind::Adam => {
            state.t += 1;
            let t = state.t;
            let bc1 = 1.0 - cfg.beta1.powi(t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(t as i32);
            for (name, p) in params.entries.iter_mut() {
                let g = &grads[name];
                let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                for k in 0..p.len() {
                    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    p[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::TrainConfig;
    use crate::harness::params::init_params;
    use std::collections::BTreeMap;

    fn zero_grads(p: &ParamSet) -> NamedArrays {
        p.entries
            .iter()
            .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_sgd_params_unchanged() {
        let cfg = TrainConfig::default();
        let mut p = init_params(&cfg).unwrap();
        let before = p.clone();
        let grads = zero_grads(&p);
        let mut st = OptimizerState::default();
        let opt = OptimizerConfig { kind: OptimizerKind::Sgd, lr: 0.1, ..Default::default() };
        outer_update(&mut p, &grads, &opt, &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_leaves_adam_essentially_unchanged() {
        let cfg = TrainConfig::default();
        let mut p = init_params(&cfg).unwrap();
        let before = p.clone();
        let grads = zero_grads(&p);
        let mut st = OptimizerState::default();
        let opt = OptimizerConfig::default();
        outer_update(&mut p, &grads, &opt, &mut st).unwrap();
        for (name, v) in &p.entries {
            for (a, b) in v.iter().zip(&before.entries[name]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_unit_step_recovers_zero() {
        let cfg = TrainConfig::default();
        let mut p = init_params(&cfg).unwrap();
        let grads: NamedArrays = p.entries.clone();
        let mut st = OptimizerState::default();
        let opt = OptimizerConfig { kind: OptimizerKind::Sgd, lr: 1.0, ..Default::default() };
        outer_update(&mut p, &grads, &opt, &mut st).unwrap();
        for v in p.entries.values() {
            assert!(v.iter().all(|&x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let cfg = TrainConfig::default();
        let mut p = init_params(&cfg).unwrap();
        let mut grads = zero_grads(&p);
        grads.remove("dp.w_out");
        let mut st = OptimizerState::default();
        assert!(matches!(
            outer_update(&mut p, &grads, &OptimizerConfig::default(), &mut st),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn adam_converges_on_a_quadratic_bowl() {
        // minimize (x - 3)^2 with analytic gradient
        let mut params = ParamSet {
            entries: BTreeMap::from([("x".to_string(), vec![-4.0])]),
            dp_mask: vec![],
            dp_sign: vec![],
        };
        let opt = OptimizerConfig { lr: 0.05, ..Default::default() };
        let mut st = OptimizerState::default();
        for _ in 0..500 {
            let x = params.get("x")[0];
            let grads = NamedArrays::from([("x".to_string(), vec![2.0 * (x - 3.0)])]);
            outer_update(&mut params, &grads, &opt, &mut st).unwrap();
        }
        let x = params.get("x")[0];
        assert!((x - 3.0).abs() < 1e-3, "adam ended at {x}");
    }
}
