//! Randomized gradient verification: small smooth-mode programs composed
//! from the engine's own step functions, checked against central finite
//! differences parameter by parameter.
//!
//! Hard mode is excluded by construction: the surrogate is not the true
//! derivative of a step function, so finite differences cannot validate it.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    finite_difference_check, ModIndexing, ParamValues, SpikeFunctionConfig, Tape, Value,
};
use crate::error::Result;
use crate::harness::seeds::{mix, Tag};
use crate::networks::{
    cnn_encode, dpsnn_step, readout, CnnConfig, CnnParams, DpsnnConfig, DpsnnParams, DpsnnState,
    RuleKind,
};
use crate::neuromod::{response_function, ModulationSignal, ResponseNonlinearity};
use crate::neuron::{state_at_rest, step_cuba, NeuronParams};
use crate::plasticity::TraceForm;
use crate::tasks::meta_loss_bce;

/// One random mini system: dimensions, rule variant, frozen inputs.
#[derive(Debug, Clone)]
struct MiniProgram {
    n_in: usize,
    n_hid: usize,
    n_out: usize,
    n_nm: usize,
    steps: usize,
    rule: RuleKind,
    mu: f64,
    indexing: ModIndexing,
    form: TraceForm,
    use_tanh_response: bool,
    with_cnn: bool,
    raster: Vec<f64>,
    image: Vec<f64>,
    neuron: NeuronParams,
    spike: SpikeFunctionConfig,
    /// Fixed probe directions paired with the final plastic state. They give
    /// every state-carrying parameter a first-order path into the loss, so
    /// no gradient sits below the finite-difference noise floor.
    probe_w: Vec<f64>,
    probe_ep: Vec<f64>,
    probe_em: Vec<f64>,
    probe_xp: Vec<f64>,
    probe_xq: Vec<f64>,
    probe_xs: Vec<f64>,
}

const CNN_SIDE: usize = 8;

fn draw(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn draw_signed(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(lo..hi);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

impl MiniProgram {
    fn generate(seed: u64) -> (Self, ParamValues) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let with_cnn = seed % 5 == 4;
        let n_in = if with_cnn { 2 * (CNN_SIDE / 4) * (CNN_SIDE / 4) } else { rng.gen_range(2..=4) };
        let n_hid = rng.gen_range(2..=5);
        let n_out = rng.gen_range(1..=2);
        let n_nm = rng.gen_range(3..=6);
        let steps = rng.gen_range(12..=28);
        let rule = if rng.gen::<bool>() { RuleKind::Pair } else { RuleKind::Triplet };
        let mu = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
        let indexing = [ModIndexing::Pre, ModIndexing::Post, ModIndexing::Global]
            [rng.gen_range(0..3)];
        let form = if rng.gen::<bool>() { TraceForm::Linear } else { TraceForm::Saturating };
        let use_tanh_response = indexing == ModIndexing::Post && rng.gen::<bool>();

        let raster: Vec<f64> = (0..steps * n_in)
            .map(|_| if rng.gen::<f64>() < 0.35 { 1.0 } else { 0.0 })
            .collect();
        let image: Vec<f64> = (0..CNN_SIDE * CNN_SIDE).map(|_| rng.gen::<f64>()).collect();

        let neuron = NeuronParams {
            alpha_v: 0.15,
            alpha_u: 0.35,
            v_rest: 0.0,
            u_rest: 0.0,
            r: 1.0,
            v_th: 0.4,
        };
        let spike = SpikeFunctionConfig::smooth(0.8);

        let mut p = ParamValues::new();
        // couplings drawn away from zero so every element keeps a gradient
        // the finite difference can resolve
        p.insert("w_in".into(), draw(&mut rng, n_in * n_hid, 0.3, 0.5));
        p.insert("w_out".into(), draw_signed(&mut rng, n_hid * n_out, 0.25, 0.6));
        p.insert("read".into(), draw(&mut rng, n_out, 0.1, 0.25));
        p.insert("eta_p".into(), draw(&mut rng, n_in * n_hid, 0.03, 0.08));
        p.insert("eta_m".into(), draw(&mut rng, n_in * n_hid, 0.03, 0.08));
        p.insert("a_pre".into(), vec![0.85]);
        p.insert("b_pre".into(), vec![0.6]);
        p.insert("a_post".into(), vec![0.8]);
        p.insert("b_post".into(), vec![0.6]);
        p.insert("a_slow".into(), vec![0.95]);
        p.insert("b_slow".into(), vec![0.6]);
        p.insert("gamma".into(), vec![0.85]);
        p.insert("alpha_e".into(), draw(&mut rng, n_in * n_hid, 0.4, 0.9));
        p.insert("nm_w".into(), draw_signed(&mut rng, (n_in + n_hid) * n_nm, 0.25, 0.6));
        let n_mod = match indexing {
            ModIndexing::Pre => n_in,
            ModIndexing::Post => n_hid,
            ModIndexing::Global => 1,
        };
        let head = if use_tanh_response { 1 } else { n_mod };
        p.insert("nm_rp".into(), draw_signed(&mut rng, n_nm * head, 0.004, 0.01));
        p.insert("nm_rm".into(), draw_signed(&mut rng, n_nm * head, 0.004, 0.01));
        if use_tanh_response {
            p.insert("resp_gain".into(), draw_signed(&mut rng, n_mod, 0.4, 1.0));
        }
        if with_cnn {
            p.insert("cnn_conv1".into(), draw_signed(&mut rng, 2 * 9, 0.1, 0.35));
            p.insert("cnn_g1".into(), draw(&mut rng, 2, 0.8, 1.2));
            // positive norm bias keeps relu inputs off the kink
            p.insert("cnn_b1".into(), draw(&mut rng, 2, 0.25, 0.45));
            p.insert("cnn_conv2".into(), draw_signed(&mut rng, 2 * 2 * 9, 0.1, 0.35));
            p.insert("cnn_g2".into(), draw(&mut rng, 2, 0.8, 1.2));
            p.insert("cnn_b2".into(), draw(&mut rng, 2, 0.25, 0.45));
        }
        let probe_w = draw_signed(&mut rng, n_in * n_hid, 0.3, 1.0);
        let probe_ep = draw_signed(&mut rng, n_in * n_hid, 0.3, 1.0);
        let probe_em = draw_signed(&mut rng, n_in * n_hid, 0.3, 1.0);
        let probe_xp = draw_signed(&mut rng, n_in, 0.3, 1.0);
        let probe_xq = draw_signed(&mut rng, n_hid, 0.3, 1.0);
        let probe_xs = draw_signed(&mut rng, n_hid, 0.3, 1.0);
        (
            MiniProgram {
                n_in,
                n_hid,
                n_out,
                n_nm,
                steps,
                rule,
                mu,
                indexing,
                form,
                use_tanh_response,
                with_cnn,
                raster,
                image,
                neuron,
                spike,
                probe_w,
                probe_ep,
                probe_em,
                probe_xp,
                probe_xq,
                probe_xs,
            },
            p,
        )
    }

    /// Run the program; optionally backpropagate.
    fn eval(&self, p: &ParamValues, want_grads: bool) -> Result<(f64, ParamValues)> {
        let mut t = Tape::new();
        let mut h: BTreeMap<&str, Value> = BTreeMap::new();
        for (name, data) in p {
            h.insert(name.as_str(), t.param(data));
        }
        let dp_cfg = DpsnnConfig {
            n_input: self.n_in,
            n_hidden: self.n_hid,
            n_output: self.n_out,
            rule: self.rule,
            neuron: self.neuron,
            spike: self.spike,
            mu: self.mu,
            w_min: -5.0,
            w_max: 5.0,
            trace_form: self.form,
            trace_x_max: 2.0,
        };
        let ones = t.leaf(vec![1.0; self.n_in * self.n_hid]);
        let alpha_e_masked = t.mul(h["alpha_e"], ones)?;
        let signmask = t.leaf(vec![1.0; self.n_in * self.n_hid]);
        let dp_params = DpsnnParams {
            w_out: h["w_out"],
            eta_plus: h["eta_p"],
            eta_minus: h["eta_m"],
            alpha_pre: h["a_pre"],
            beta_pre: h["b_pre"],
            alpha_post: h["a_post"],
            beta_post: h["b_post"],
            alpha_slow: h["a_slow"],
            beta_slow: h["b_slow"],
            gamma: h["gamma"],
            alpha_e_masked,
            signmask,
        };

        // optional CNN front end drives an input CUBA layer
        let encoding = if self.with_cnn {
            let cfg = CnnConfig { in_h: CNN_SIDE, in_w: CNN_SIDE, c1: 2, c2: 2 };
            let img = t.leaf(self.image.clone());
            let cnn = CnnParams {
                conv1: h["cnn_conv1"],
                norm1_gain: h["cnn_g1"],
                norm1_bias: h["cnn_b1"],
                conv2: h["cnn_conv2"],
                norm2_gain: h["cnn_g2"],
                norm2_bias: h["cnn_b2"],
            };
            Some(cnn_encode(&mut t, img, &cnn, &cfg)?)
        } else {
            None
        };

        let mut dp = DpsnnState::init(&mut t, h["w_in"], &dp_cfg);
        let mut nm_l1 = state_at_rest(&mut t, self.n_nm, &self.neuron);
        let mut input_layer = state_at_rest(&mut t, self.n_in, &self.neuron);
        let mut counts = t.leaf(vec![0.0; self.n_out]);
        let eval_start = self.steps / 3;

        for step in 0..self.steps {
            let sens = match encoding {
                Some(enc) => {
                    input_layer = step_cuba(&mut t, &input_layer, enc, &self.neuron, &self.spike)?;
                    input_layer.s
                }
                None => t.leaf(self.raster[step * self.n_in..(step + 1) * self.n_in].to_vec()),
            };
            let cat = t.concat(&[sens, dp.hidden.s])?;
            let i1 = t.matvec(h["nm_w"], cat, self.n_in + self.n_hid, self.n_nm)?;
            nm_l1 = step_cuba(&mut t, &nm_l1, i1, &self.neuron, &self.spike)?;
            let (m_plus, m_minus) = if self.use_tanh_response {
                let mp_scalar = t.matvec(h["nm_rp"], nm_l1.s, self.n_nm, 1)?;
                let mm_scalar = t.matvec(h["nm_rm"], nm_l1.s, self.n_nm, 1)?;
                let mp = response_function(&mut t, mp_scalar, h["resp_gain"], ResponseNonlinearity::Tanh)?;
                let mm = response_function(&mut t, mm_scalar, h["resp_gain"], ResponseNonlinearity::Tanh)?;
                (mp, mm)
            } else {
                let n_mod = match self.indexing {
                    ModIndexing::Pre => self.n_in,
                    ModIndexing::Post => self.n_hid,
                    ModIndexing::Global => 1,
                };
                (
                    t.matvec(h["nm_rp"], nm_l1.s, self.n_nm, n_mod)?,
                    t.matvec(h["nm_rm"], nm_l1.s, self.n_nm, n_mod)?,
                )
            };
            let m = ModulationSignal { m_plus, m_minus, indexing: self.indexing };
            dp = dpsnn_step(&mut t, &dp, sens, Some(&m), &dp_params, &dp_cfg)?;
            if step >= eval_start {
                counts = t.add(counts, dp.output.s)?;
            }
        }

        let scores = readout(&mut t, counts, h["read"])?;
        let task_loss = if self.n_out == 2 {
            let probs = t.logistic(scores)?;
            let clamped = t.clamp(probs, 1e-7, 1.0 - 1e-7)?;
            meta_loss_bce(&mut t, clamped, [1.0, 0.0])?
        } else {
            let prob = t.logistic(scores)?;
            let clamped = t.clamp(prob, 1e-7, 1.0 - 1e-7)?;
            let lp = t.log(clamped)?;
            t.dot_const(lp, vec![-1.0])?
        };
        let mut probe = t.dot_const(dp.w, self.probe_w.clone())?;
        for (v, c) in [
            (dp.elig.e_plus, &self.probe_ep),
            (dp.elig.e_minus, &self.probe_em),
            (dp.x_pre, &self.probe_xp),
            (dp.x_post, &self.probe_xq),
            (dp.x_slow, &self.probe_xs),
        ] {
            let term = t.dot_const(v, c.clone())?;
            probe = t.add(probe, term)?;
        }
        let probe_scaled = t.affine(probe, 0.05, 0.0)?;
        let loss = t.add(task_loss, probe_scaled)?;
        let loss_val = t.scalar(loss);
        if !want_grads {
            return Ok((loss_val, ParamValues::new()));
        }
        let gm = t.backward(loss)?;
        let mut out = ParamValues::new();
        for (name, v) in &h {
            out.insert((*name).to_string(), gm.get_or_zeros(*v, p[*name].len()));
        }
        Ok((loss_val, out))
    }
}

/// Diagnostic: per-parameter worst relative error with the gradient and fd
/// values at the argmax. Temporary scaffolding for tuning the generator.
pub fn gradcheck_debug(seed: u64, eps: f64) {
    let (prog, params) = MiniProgram::generate(seed);
    println!(
        "prog seed={seed} cnn={} rule={:?} mu={} idx={:?} steps={} n=({},{},{},{})",
        prog.with_cnn, prog.rule, prog.mu, prog.indexing, prog.steps, prog.n_in, prog.n_hid,
        prog.n_out, prog.n_nm
    );
    let (_, grads) = prog.eval(&params, true).unwrap();
    let mut work = params.clone();
    for (name, values) in &params {
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        for k in 0..values.len() {
            let orig = values[k];
            work.get_mut(name).unwrap()[k] = orig + eps;
            let fp = prog.eval(&work, false).unwrap().0;
            work.get_mut(name).unwrap()[k] = orig - eps;
            let fm = prog.eval(&work, false).unwrap().0;
            work.get_mut(name).unwrap()[k] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let g = grads.get(name).map(|v| v[k]).unwrap_or(0.0);
            let rel = (fd - g).abs() / (g.abs() + 1e-12);
            if rel > worst.0 {
                worst = (rel, k, g, fd);
            }
        }
        if worst.0 > 1e-5 {
            println!(
                "  {name:12} worst rel {:10.3e} at [{}] g={:12.4e} fd={:12.4e}",
                worst.0, worst.1, worst.2, worst.3
            );
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub per_program: Vec<f64>,
}

/// Run `n_programs` random smooth-mode programs and finite-difference every
/// parameter element of each at the given epsilon.
pub fn gradcheck(n_programs: usize, base_seed: u64, eps: f64) -> Result<GradcheckReport> {
    let mut per_program = Vec::with_capacity(n_programs);
    let mut max_rel = 0.0f64;
    for k in 0..n_programs {
        let seed = mix(base_seed, Tag::Gradcheck as u64, k as u64);
        let (prog, params) = MiniProgram::generate(seed);
        let err = finite_difference_check(
            |p| prog.eval(p, false).expect("forward pass").0,
            |p| prog.eval(p, true).expect("gradient pass").1,
            &params,
            eps,
        )?;
        if err > max_rel {
            max_rel = err;
        }
        per_program.push(err);
    }
    Ok(GradcheckReport { max_rel_err: max_rel, per_program })
}
