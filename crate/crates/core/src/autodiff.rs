//! Reverse-mode autodiff over a Wengert tape.
//!
//! The simulation is unrolled in time: every per-step operation is recorded
//! on the tape as it executes, then `backward` replays the tape in reverse
//! and accumulates vector-Jacobian products into the registered parameter
//! buffers. The spike threshold is the one non-differentiable operation;
//! its backward pass is a configurable surrogate (exponential by default).
//!
//! Buffers are flat `Vec<f64>` arenas; matrices are row-major with the
//! pre-synaptic index as the row. Ops are fused where the per-timestep
//! inner loop is hot (trace updates, STDP increments, eligibility decay,
//! modulated weight application) so tapes stay compact.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Handle to a buffer on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Value {
    pub id: usize,
}

/// Forward behaviour of the spike nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SpikeMode {
    /// Step function forward, surrogate derivative backward. Used for training.
    Hard,
    /// Logistic forward with its exact derivative. Used only for gradient checks.
    Smooth,
}

/// Spike function configuration: forward mode plus surrogate shape.
///
/// The surrogate derivative is `magnitude * exp(-|v - v_th| / scale)`.
/// The constants are not given by the underlying neuron model; the defaults
/// here are engineering choices and both are configurable.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SpikeFunctionConfig {
    pub mode: SpikeMode,
    pub surrogate_scale: f64,
    pub surrogate_magnitude: f64,
}

impl SpikeFunctionConfig {
    pub fn hard(scale: f64, magnitude: f64) -> Self {
        SpikeFunctionConfig {
            mode: SpikeMode::Hard,
            surrogate_scale: scale,
            surrogate_magnitude: magnitude,
        }
    }

    pub fn smooth(scale: f64) -> Self {
        SpikeFunctionConfig {
            mode: SpikeMode::Smooth,
            surrogate_scale: scale,
            surrogate_magnitude: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.surrogate_scale <= 0.0 || self.surrogate_magnitude <= 0.0 {
            return Err(Error::Config(
                "surrogate scale and magnitude must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SpikeFunctionConfig {
    /// Defaults sized for a unit threshold: scale = 0.25 * v_th, magnitude 0.3.
    fn default() -> Self {
        SpikeFunctionConfig::hard(0.25, 0.3)
    }
}

/// How a modulation vector indexes an eligibility matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ModIndexing {
    /// One scalar broadcast over all synapses.
    Global,
    /// One value per pre-synaptic neuron (row).
    Pre,
    /// One value per post-synaptic neuron (column).
    Post,
}

#[derive(Debug, Clone)]
enum Op {
    /// out = a + b
    Add { a: usize, b: usize, out: usize },
    /// out = a - b
    Sub { a: usize, b: usize, out: usize },
    /// out = a ⊙ b
    Mul { a: usize, b: usize, out: usize },
    /// out = mul*a + add (elementwise constants)
    Affine { a: usize, mul: f64, out: usize },
    /// out = ca*a + cb*b + c0
    LinComb { a: usize, b: usize, ca: f64, cb: f64, out: usize },
    /// out = a ⊙ s, s a scalar node
    MulScalar { a: usize, s: usize, out: usize },
    /// out[j] = Σ_i w[i,j] x[i], w row-major [n_in × n_out]
    MatVec { w: usize, x: usize, out: usize, n_in: usize, n_out: usize },
    /// forward per mode; backward surrogate (hard) or exact logistic (smooth)
    Spike { v: usize, out: usize, v_th: f64, cfg: SpikeFunctionConfig },
    /// out = v ⊙ (1-s) + v_rest ⊙ s
    ResetGate { v: usize, s: usize, v_rest: f64, out: usize },
    /// out = alpha*x + beta*s (alpha, beta scalar nodes)
    TraceUpdate { x: usize, s: usize, alpha: usize, beta: usize, out: usize },
    /// out = alpha*x + beta*(x_max - x) ⊙ s
    TraceUpdateSat { x: usize, s: usize, alpha: usize, beta: usize, x_max: f64, out: usize },
    /// out[i,j] = coeff[i,j] * x[i] * y[j]; coeff len 1 broadcasts
    StdpInc { coeff: usize, x: usize, y: usize, out: usize, n_pre: usize, n_post: usize },
    /// out = gamma*e + rate ⊙ inc (gamma scalar node; rate array or scalar node)
    DecayAccum { e: usize, gamma: usize, rate: usize, inc: usize, out: usize },
    /// out = clamp(w + m_plus[k]·e_plus + m_minus[k]·e_minus), k per indexing
    ModApply {
        w: usize,
        e_plus: usize,
        e_minus: usize,
        m_plus: usize,
        m_minus: usize,
        indexing: ModIndexing,
        clamp: Option<(f64, f64)>,
        out: usize,
        n_pre: usize,
        n_post: usize,
    },
    /// out = min(max(a, lo), hi); gradient passes strictly inside the interval
    Clamp { a: usize, lo: f64, hi: f64, out: usize },
    /// out = max(a, 0)^exp
    PowClamped { a: usize, exp: f64, out: usize },
    /// out = inputs laid end to end
    Concat { inputs: Vec<usize>, out: usize },
    /// out = Σ a (scalar)
    Sum { a: usize, out: usize },
    /// out = Σ weights[i]·a[i] (scalar, constant weights)
    DotConst { a: usize, weights: Vec<f64>, out: usize },
    /// out = σ(a)
    Logistic { a: usize, out: usize },
    /// out = ln(a)
    Log { a: usize, out: usize },
    /// out = tanh(a)
    Tanh { a: usize, out: usize },
    /// out = logsumexp(scores) - scores[target] (scalar)
    SoftmaxCe { scores: usize, target: usize, out: usize },
    /// out = relu(a)
    Relu { a: usize, out: usize },
    /// 3x3 convolution, padding 1, stride 1
    Conv3x3 { x: usize, w: usize, out: usize, c_in: usize, c_out: usize, h: usize, wd: usize },
    /// per-channel normalization over spatial dims, affine gain/bias
    InstanceNorm { x: usize, gain: usize, bias: usize, out: usize, channels: usize, hw: usize, eps: f64 },
    /// 2x2 max pool, stride 2; ties resolve to the first element in scan order
    MaxPool2 { x: usize, out: usize, channels: usize, h: usize, wd: usize },
}

impl Op {
    fn out_id(&self) -> usize {
        match *self {
            Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Affine { out, .. }
            | Op::LinComb { out, .. }
            | Op::MulScalar { out, .. }
            | Op::MatVec { out, .. }
            | Op::Spike { out, .. }
            | Op::ResetGate { out, .. }
            | Op::TraceUpdate { out, .. }
            | Op::TraceUpdateSat { out, .. }
            | Op::StdpInc { out, .. }
            | Op::DecayAccum { out, .. }
            | Op::ModApply { out, .. }
            | Op::Clamp { out, .. }
            | Op::PowClamped { out, .. }
            | Op::Concat { out, .. }
            | Op::Sum { out, .. }
            | Op::DotConst { out, .. }
            | Op::Logistic { out, .. }
            | Op::Log { out, .. }
            | Op::Tanh { out, .. }
            | Op::SoftmaxCe { out, .. }
            | Op::Relu { out, .. }
            | Op::Conv3x3 { out, .. }
            | Op::InstanceNorm { out, .. }
            | Op::MaxPool2 { out, .. } => out,
        }
    }
}

/// Gradients keyed by parameter node id. Parameters the loss never reached
/// have no entry; their gradient is exactly zero.
#[derive(Debug, Default)]
pub struct GradMap {
    map: BTreeMap<usize, Vec<f64>>,
}

impl GradMap {
    pub fn get(&self, param: Value) -> Option<&[f64]> {
        self.map.get(&param.id).map(|v| v.as_slice())
    }

    pub fn get_or_zeros(&self, param: Value, len: usize) -> Vec<f64> {
        match self.map.get(&param.id) {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }
}

/// The tape. One tape per unrolled episode; confined to one worker.
pub struct Tape {
    bufs: Vec<Vec<f64>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    params: Vec<usize>,
    frozen: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.bufs.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.bufs[v.id]
    }

    pub fn len(&self, v: Value) -> usize {
        self.bufs[v.id].len()
    }

    pub fn scalar(&self, v: Value) -> f64 {
        self.bufs[v.id][0]
    }

    fn alloc(&mut self, data: Vec<f64>, needs_grad: bool) -> Value {
        let id = self.bufs.len();
        self.bufs.push(data);
        self.needs_grad.push(needs_grad);
        Value { id }
    }

    /// Constant input buffer. Receives no gradient.
    pub fn leaf(&mut self, data: Vec<f64>) -> Value {
        self.alloc(data, false)
    }

    /// Parameter buffer: a leaf that collects gradient during backward.
    pub fn param(&mut self, data: &[f64]) -> Value {
        let v = self.alloc(data.to_vec(), true);
        self.params.push(v.id);
        v
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Value {
        self.leaf(vec![x])
    }

    fn push(&mut self, op: Op, data: Vec<f64>, needs_grad: bool) -> Result<Value> {
        if self.frozen {
            return Err(Error::FrozenTape);
        }
        debug_assert_eq!(op.out_id(), self.bufs.len());
        let v = self.alloc(data, needs_grad);
        self.ops.push(op);
        Ok(v)
    }

    fn check_len(&self, context: &'static str, v: Value, expected: usize) -> Result<()> {
        let got = self.bufs[v.id].len();
        if got != expected {
            return Err(Error::ShapeMismatch { context, expected, got });
        }
        Ok(())
    }

    fn check_scalar(&self, context: &'static str, v: Value) -> Result<()> {
        self.check_len(context, v, 1)
    }

    // ── elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_len("add", b, self.len(a))?;
        let out: Vec<f64> = self.bufs[a.id]
            .iter()
            .zip(&self.bufs[b.id])
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs_grad[a.id] || self.needs_grad[b.id];
        self.push(Op::Add { a: a.id, b: b.id, out: self.bufs.len() }, out, ng)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_len("sub", b, self.len(a))?;
        let out: Vec<f64> = self.bufs[a.id]
            .iter()
            .zip(&self.bufs[b.id])
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs_grad[a.id] || self.needs_grad[b.id];
        self.push(Op::Sub { a: a.id, b: b.id, out: self.bufs.len() }, out, ng)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check_len("mul", b, self.len(a))?;
        let out: Vec<f64> = self.bufs[a.id]
            .iter()
            .zip(&self.bufs[b.id])
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs_grad[a.id] || self.needs_grad[b.id];
        self.push(Op::Mul { a: a.id, b: b.id, out: self.bufs.len() }, out, ng)
    }

    /// mul*a + add with scalar constants.
    pub fn affine(&mut self, a: Value, mul: f64, add: f64) -> Result<Value> {
        let out: Vec<f64> = self.bufs[a.id].iter().map(|x| mul * x + add).collect();
        let ng = self.needs_grad[a.id];
        self.push(Op::Affine { a: a.id, mul, out: self.bufs.len() }, out, ng)
    }

    /// ca*a + cb*b + c0 with scalar constants. Fuses the leak-integrate update.
    pub fn lincomb(&mut self, a: Value, b: Value, ca: f64, cb: f64, c0: f64) -> Result<Value> {
        self.check_len("lincomb", b, self.len(a))?;
        let out: Vec<f64> = self.bufs[a.id]
            .iter()
            .zip(&self.bufs[b.id])
            .map(|(x, y)| ca * x + cb * y + c0)
            .collect();
        let ng = self.needs_grad[a.id] || self.needs_grad[b.id];
        self.push(
            Op::LinComb { a: a.id, b: b.id, ca, cb, out: self.bufs.len() },
            out,
            ng,
        )
    }

    pub fn mul_scalar(&mut self, a: Value, s: Value) -> Result<Value> {
        self.check_scalar("mul_scalar", s)?;
        let sv = self.bufs[s.id][0];
        let out: Vec<f64> = self.bufs[a.id].iter().map(|x| sv * x).collect();
        let ng = self.needs_grad[a.id] || self.needs_grad[s.id];
        self.push(Op::MulScalar { a: a.id, s: s.id, out: self.bufs.len() }, out, ng)
    }

    // ── network primitives ───────────────────────────────────────

    /// out[j] = Σ_i w[i,j]·x[i] with w row-major [n_in × n_out].
    pub fn matvec(&mut self, w: Value, x: Value, n_in: usize, n_out: usize) -> Result<Value> {
        self.check_len("matvec weights", w, n_in * n_out)?;
        self.check_len("matvec input", x, n_in)?;
        let mut out = vec![0.0; n_out];
        {
            let wb = &self.bufs[w.id];
            let xb = &self.bufs[x.id];
            for i in 0..n_in {
                let xi = xb[i];
                if xi == 0.0 {
                    continue;
                }
                let row = &wb[i * n_out..(i + 1) * n_out];
                for (o, wv) in out.iter_mut().zip(row) {
                    *o += wv * xi;
                }
            }
        }
        let ng = self.needs_grad[w.id] || self.needs_grad[x.id];
        self.push(
            Op::MatVec { w: w.id, x: x.id, out: self.bufs.len(), n_in, n_out },
            out,
            ng,
        )
    }

    /// Spike nonlinearity. Hard mode: 1 iff v > v_th, surrogate backward.
    /// Smooth mode: logistic((v - v_th)/scale) with its exact derivative.
    pub fn spike(&mut self, v: Value, v_th: f64, cfg: &SpikeFunctionConfig) -> Result<Value> {
        cfg.validate()?;
        let out: Vec<f64> = match cfg.mode {
            SpikeMode::Hard => self.bufs[v.id]
                .iter()
                .map(|&x| if x > v_th { 1.0 } else { 0.0 })
                .collect(),
            SpikeMode::Smooth => self.bufs[v.id]
                .iter()
                .map(|&x| logistic((x - v_th) / cfg.surrogate_scale))
                .collect(),
        };
        let ng = self.needs_grad[v.id];
        self.push(
            Op::Spike { v: v.id, out: self.bufs.len(), v_th, cfg: *cfg },
            out,
            ng,
        )
    }

    /// v(1-s) + v_rest·s. Gradient flows through both the voltage and the
    /// spike gate, so the reset is part of the differentiable path.
    pub fn reset_gate(&mut self, v: Value, s: Value, v_rest: f64) -> Result<Value> {
        self.check_len("reset_gate", s, self.len(v))?;
        let out: Vec<f64> = self.bufs[v.id]
            .iter()
            .zip(&self.bufs[s.id])
            .map(|(x, sp)| x * (1.0 - sp) + v_rest * sp)
            .collect();
        let ng = self.needs_grad[v.id] || self.needs_grad[s.id];
        self.push(
            Op::ResetGate { v: v.id, s: s.id, v_rest, out: self.bufs.len() },
            out,
            ng,
        )
    }

    /// alpha*x + beta*s with alpha, beta scalar nodes.
    pub fn trace_update(&mut self, x: Value, s: Value, alpha: Value, beta: Value) -> Result<Value> {
        self.check_len("trace_update", s, self.len(x))?;
        self.check_scalar("trace_update alpha", alpha)?;
        self.check_scalar("trace_update beta", beta)?;
        let av = self.bufs[alpha.id][0];
        let bv = self.bufs[beta.id][0];
        let out: Vec<f64> = self.bufs[x.id]
            .iter()
            .zip(&self.bufs[s.id])
            .map(|(xv, sv)| av * xv + bv * sv)
            .collect();
        let ng = self.needs_grad[x.id]
            || self.needs_grad[s.id]
            || self.needs_grad[alpha.id]
            || self.needs_grad[beta.id];
        self.push(
            Op::TraceUpdate { x: x.id, s: s.id, alpha: alpha.id, beta: beta.id, out: self.bufs.len() },
            out,
            ng,
        )
    }

    /// alpha*x + beta*(x_max - x)·s, the saturating trace form.
    pub fn trace_update_sat(
        &mut self,
        x: Value,
        s: Value,
        alpha: Value,
        beta: Value,
        x_max: f64,
    ) -> Result<Value> {
        self.check_len("trace_update_sat", s, self.len(x))?;
        self.check_scalar("trace_update_sat alpha", alpha)?;
        self.check_scalar("trace_update_sat beta", beta)?;
        let av = self.bufs[alpha.id][0];
        let bv = self.bufs[beta.id][0];
        let out: Vec<f64> = self.bufs[x.id]
            .iter()
            .zip(&self.bufs[s.id])
            .map(|(xv, sv)| av * xv + bv * (x_max - xv) * sv)
            .collect();
        let ng = self.needs_grad[x.id]
            || self.needs_grad[s.id]
            || self.needs_grad[alpha.id]
            || self.needs_grad[beta.id];
        self.push(
            Op::TraceUpdateSat {
                x: x.id,
                s: s.id,
                alpha: alpha.id,
                beta: beta.id,
                x_max,
                out: self.bufs.len(),
            },
            out,
            ng,
        )
    }

    /// out[i,j] = coeff[i,j]·x[i]·y[j]. A coeff of length 1 broadcasts.
    pub fn stdp_inc(
        &mut self,
        coeff: Value,
        x: Value,
        y: Value,
        n_pre: usize,
        n_post: usize,
    ) -> Result<Value> {
        let clen = self.len(coeff);
        if clen != 1 && clen != n_pre * n_post {
            return Err(Error::ShapeMismatch {
                context: "stdp_inc coeff",
                expected: n_pre * n_post,
                got: clen,
            });
        }
        self.check_len("stdp_inc x", x, n_pre)?;
        self.check_len("stdp_inc y", y, n_post)?;
        let mut out = vec![0.0; n_pre * n_post];
        {
            let cb = &self.bufs[coeff.id];
            let xb = &self.bufs[x.id];
            let yb = &self.bufs[y.id];
            for i in 0..n_pre {
                let xi = xb[i];
                if xi == 0.0 {
                    continue;
                }
                let row = &mut out[i * n_post..(i + 1) * n_post];
                if clen == 1 {
                    let c = cb[0];
                    for (o, yv) in row.iter_mut().zip(yb) {
                        *o = c * xi * yv;
                    }
                } else {
                    let crow = &cb[i * n_post..(i + 1) * n_post];
                    for ((o, cv), yv) in row.iter_mut().zip(crow).zip(yb) {
                        *o = cv * xi * yv;
                    }
                }
            }
        }
        let ng = self.needs_grad[coeff.id] || self.needs_grad[x.id] || self.needs_grad[y.id];
        self.push(
            Op::StdpInc { coeff: coeff.id, x: x.id, y: y.id, out: self.bufs.len(), n_pre, n_post },
            out,
            ng,
        )
    }

    /// gamma*e + rate ⊙ inc. gamma is a scalar node; rate is elementwise or scalar.
    pub fn decay_accum(&mut self, e: Value, gamma: Value, rate: Value, inc: Value) -> Result<Value> {
        let n = self.len(e);
        self.check_scalar("decay_accum gamma", gamma)?;
        self.check_len("decay_accum inc", inc, n)?;
        let rlen = self.len(rate);
        if rlen != 1 && rlen != n {
            return Err(Error::ShapeMismatch { context: "decay_accum rate", expected: n, got: rlen });
        }
        let g = self.bufs[gamma.id][0];
        let mut out = vec![0.0; n];
        {
            let eb = &self.bufs[e.id];
            let rb = &self.bufs[rate.id];
            let ib = &self.bufs[inc.id];
            for k in 0..n {
                let r = if rlen == 1 { rb[0] } else { rb[k] };
                out[k] = g * eb[k] + r * ib[k];
            }
        }
        let ng = self.needs_grad[e.id]
            || self.needs_grad[gamma.id]
            || self.needs_grad[rate.id]
            || self.needs_grad[inc.id];
        self.push(
            Op::DecayAccum { e: e.id, gamma: gamma.id, rate: rate.id, inc: inc.id, out: self.bufs.len() },
            out,
            ng,
        )
    }

    /// w + m_plus[k]·e_plus + m_minus[k]·e_minus, then an optional hard clamp.
    pub fn mod_apply(
        &mut self,
        w: Value,
        e_plus: Value,
        e_minus: Value,
        m_plus: Value,
        m_minus: Value,
        indexing: ModIndexing,
        clamp: Option<(f64, f64)>,
        n_pre: usize,
        n_post: usize,
    ) -> Result<Value> {
        let n = n_pre * n_post;
        self.check_len("mod_apply w", w, n)?;
        self.check_len("mod_apply e_plus", e_plus, n)?;
        self.check_len("mod_apply e_minus", e_minus, n)?;
        let mlen = match indexing {
            ModIndexing::Global => 1,
            ModIndexing::Pre => n_pre,
            ModIndexing::Post => n_post,
        };
        if self.len(m_plus) != mlen || self.len(m_minus) != mlen {
            return Err(Error::IndexingMismatch(format!(
                "modulation length {} does not match {:?} indexing over {}x{} synapses",
                self.len(m_plus),
                indexing,
                n_pre,
                n_post
            )));
        }
        let mut out = vec![0.0; n];
        {
            let wb = &self.bufs[w.id];
            let ep = &self.bufs[e_plus.id];
            let em = &self.bufs[e_minus.id];
            let mp = &self.bufs[m_plus.id];
            let mm = &self.bufs[m_minus.id];
            for i in 0..n_pre {
                for j in 0..n_post {
                    let k = match indexing {
                        ModIndexing::Global => 0,
                        ModIndexing::Pre => i,
                        ModIndexing::Post => j,
                    };
                    let idx = i * n_post + j;
                    let mut v = wb[idx] + mp[k] * ep[idx] + mm[k] * em[idx];
                    if let Some((lo, hi)) = clamp {
                        v = v.clamp(lo, hi);
                    }
                    out[idx] = v;
                }
            }
        }
        let ng = self.needs_grad[w.id]
            || self.needs_grad[e_plus.id]
            || self.needs_grad[e_minus.id]
            || self.needs_grad[m_plus.id]
            || self.needs_grad[m_minus.id];
        self.push(
            Op::ModApply {
                w: w.id,
                e_plus: e_plus.id,
                e_minus: e_minus.id,
                m_plus: m_plus.id,
                m_minus: m_minus.id,
                indexing,
                clamp,
                out: self.bufs.len(),
                n_pre,
                n_post,
            },
            out,
            ng,
        )
    }

    pub fn clamp(&mut self, a: Value, lo: f64, hi: f64) -> Result<Value> {
        let out: Vec<f64> = self.bufs[a.id].iter().map(|x| x.clamp(lo, hi)).collect();
        let ng = self.needs_grad[a.id];
        self.push(Op::Clamp { a: a.id, lo, hi, out: self.bufs.len() }, out, ng)
    }

    /// max(a, 0)^exp. The base is clamped at zero before exponentiation.
    pub fn pow_clamped(&mut self, a: Value, exp: f64) -> Result<Value> {
        let out: Vec<f64> = self.bufs[a.id].iter().map(|x| x.max(0.0).powf(exp)).collect();
        let ng = self.needs_grad[a.id];
        self.push(Op::PowClamped { a: a.id, exp, out: self.bufs.len() }, out, ng)
    }

    pub fn concat(&mut self, parts: &[Value]) -> Result<Value> {
        let mut out = Vec::new();
        let mut ng = false;
        for p in parts {
            out.extend_from_slice(&self.bufs[p.id]);
            ng |= self.needs_grad[p.id];
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(Op::Concat { inputs: ids, out: self.bufs.len() }, out, ng)
    }

    pub fn sum(&mut self, a: Value) -> Result<Value> {
        let s: f64 = self.bufs[a.id].iter().sum();
        let ng = self.needs_grad[a.id];
        self.push(Op::Sum { a: a.id, out: self.bufs.len() }, vec![s], ng)
    }

    /// Σ weights[i]·a[i] with constant weights.
    pub fn dot_const(&mut self, a: Value, weights: Vec<f64>) -> Result<Value> {
        self.check_len("dot_const", a, weights.len())?;
        let s: f64 = self.bufs[a.id].iter().zip(&weights).map(|(x, w)| x * w).sum();
        let ng = self.needs_grad[a.id];
        self.push(Op::DotConst { a: a.id, weights, out: self.bufs.len() }, vec![s], ng)
    }

    pub fn logistic(&mut self, a: Value) -> Result<Value> {
        let out: Vec<f64> = self.bufs[a.id].iter().map(|&x| logistic(x)).collect();
        let ng = self.needs_grad[a.id];
        self.push(Op::Logistic { a: a.id, out: self.bufs.len() }, out, ng)
    }

    pub fn log(&mut self, a: Value) -> Result<Value> {
        let out: Vec<f64> = self.bufs[a.id].iter().map(|x| x.ln()).collect();
        let ng = self.needs_grad[a.id];
        self.push(Op::Log { a: a.id, out: self.bufs.len() }, out, ng)
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        let out: Vec<f64> = self.bufs[a.id].iter().map(|x| x.tanh()).collect();
        let ng = self.needs_grad[a.id];
        self.push(Op::Tanh { a: a.id, out: self.bufs.len() }, out, ng)
    }

    /// Cross entropy of softmax(scores) against a fixed target index,
    /// computed as logsumexp(scores) - scores[target].
    pub fn softmax_ce(&mut self, scores: Value, target: usize) -> Result<Value> {
        let sb = &self.bufs[scores.id];
        if target >= sb.len() {
            return Err(Error::InvalidArg(format!(
                "softmax_ce target {} out of range {}",
                target,
                sb.len()
            )));
        }
        let m = sb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + sb.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let loss = lse - sb[target];
        let ng = self.needs_grad[scores.id];
        self.push(
            Op::SoftmaxCe { scores: scores.id, target, out: self.bufs.len() },
            vec![loss],
            ng,
        )
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        let out: Vec<f64> = self.bufs[a.id].iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs_grad[a.id];
        self.push(Op::Relu { a: a.id, out: self.bufs.len() }, out, ng)
    }

    /// 3x3 convolution with padding 1 and stride 1 on a [c][h][w] buffer.
    /// Weights are laid out [c_out][c_in][3][3].
    pub fn conv3x3(
        &mut self,
        x: Value,
        w: Value,
        c_in: usize,
        c_out: usize,
        h: usize,
        wd: usize,
    ) -> Result<Value> {
        self.check_len("conv3x3 input", x, c_in * h * wd)?;
        self.check_len("conv3x3 weights", w, c_out * c_in * 9)?;
        let mut out = vec![0.0; c_out * h * wd];
        {
            let xb = &self.bufs[x.id];
            let wb = &self.bufs[w.id];
            for oc in 0..c_out {
                for ic in 0..c_in {
                    let kern = &wb[(oc * c_in + ic) * 9..(oc * c_in + ic) * 9 + 9];
                    let plane = &xb[ic * h * wd..(ic + 1) * h * wd];
                    let oplane = &mut out[oc * h * wd..(oc + 1) * h * wd];
                    for y in 0..h {
                        for xw in 0..wd {
                            let mut acc = 0.0;
                            for ky in 0..3usize {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let ix = xw as isize + kx as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += plane[iy as usize * wd + ix as usize] * kern[ky * 3 + kx];
                                }
                            }
                            oplane[y * wd + xw] += acc;
                        }
                    }
                }
            }
        }
        let ng = self.needs_grad[x.id] || self.needs_grad[w.id];
        self.push(
            Op::Conv3x3 { x: x.id, w: w.id, out: self.bufs.len(), c_in, c_out, h, wd },
            out,
            ng,
        )
    }

    /// Per-channel normalization over spatial positions with affine gain/bias.
    /// Batch-free, so single-episode inference is well defined.
    pub fn instance_norm(
        &mut self,
        x: Value,
        gain: Value,
        bias: Value,
        channels: usize,
        hw: usize,
    ) -> Result<Value> {
        self.check_len("instance_norm input", x, channels * hw)?;
        self.check_len("instance_norm gain", gain, channels)?;
        self.check_len("instance_norm bias", bias, channels)?;
        let eps = 1e-5;
        let mut out = vec![0.0; channels * hw];
        {
            let xb = &self.bufs[x.id];
            let gb = &self.bufs[gain.id];
            let bb = &self.bufs[bias.id];
            for c in 0..channels {
                let plane = &xb[c * hw..(c + 1) * hw];
                let mean = plane.iter().sum::<f64>() / hw as f64;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let oplane = &mut out[c * hw..(c + 1) * hw];
                for (o, v) in oplane.iter_mut().zip(plane) {
                    *o = gb[c] * ((v - mean) * inv) + bb[c];
                }
            }
        }
        let ng = self.needs_grad[x.id] || self.needs_grad[gain.id] || self.needs_grad[bias.id];
        self.push(
            Op::InstanceNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                out: self.bufs.len(),
                channels,
                hw,
                eps,
            },
            out,
            ng,
        )
    }

    /// 2x2 max pool with stride 2. h and wd must be even.
    pub fn maxpool2(&mut self, x: Value, channels: usize, h: usize, wd: usize) -> Result<Value> {
        self.check_len("maxpool2 input", x, channels * h * wd)?;
        if h % 2 != 0 || wd % 2 != 0 {
            return Err(Error::InvalidArg(format!("maxpool2 needs even dims, got {}x{}", h, wd)));
        }
        let (oh, ow) = (h / 2, wd / 2);
        let mut out = vec![0.0; channels * oh * ow];
        {
            let xb = &self.bufs[x.id];
            for c in 0..channels {
                let plane = &xb[c * h * wd..(c + 1) * h * wd];
                let oplane = &mut out[c * oh * ow..(c + 1) * oh * ow];
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = plane[(2 * y + dy) * wd + 2 * xw + dx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        oplane[y * ow + xw] = best;
                    }
                }
            }
        }
        let ng = self.needs_grad[x.id];
        self.push(
            Op::MaxPool2 { x: x.id, out: self.bufs.len(), channels, h, wd },
            out,
            ng,
        )
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Freezes the tape and returns the
    /// gradients of every parameter the loss reaches.
    pub fn backward(&mut self, loss: Value) -> Result<GradMap> {
        if self.bufs[loss.id].len() != 1 {
            return Err(Error::NonScalarLoss { len: self.bufs[loss.id].len() });
        }
        self.frozen = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.bufs.len()];
        grads[loss.id] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            let out = self.ops[idx].out_id();
            if grads[out].is_none() {
                continue;
            }
            // Reverse order means every contribution into `out` has landed.
            let g = grads[out].take().unwrap();
            self.backward_op(&self.ops[idx], &g, &mut grads);
        }

        let mut map = BTreeMap::new();
        for &p in &self.params {
            if let Some(g) = grads[p].take() {
                map.insert(p, g);
            }
        }
        Ok(GradMap { map })
    }

    fn accum(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: usize,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.needs_grad[id] {
            return;
        }
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.bufs[id].len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backward_op(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Add { a, b, .. } => {
                self.accum(grads, a, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += gv });
                self.accum(grads, b, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += gv });
            }
            Op::Sub { a, b, .. } => {
                self.accum(grads, a, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += gv });
                self.accum(grads, b, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv -= gv });
            }
            Op::Mul { a, b, .. } => {
                let (ab, bb) = (&self.bufs[a], &self.bufs[b]);
                self.accum(grads, a, |d| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(bb) {
                        *dv += gv * bv;
                    }
                });
                self.accum(grads, b, |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(ab) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Affine { a, mul, .. } => {
                self.accum(grads, a, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += mul * gv });
            }
            Op::LinComb { a, b, ca, cb, .. } => {
                self.accum(grads, a, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += ca * gv });
                self.accum(grads, b, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += cb * gv });
            }
            Op::MulScalar { a, s, .. } => {
                let sv = self.bufs[s][0];
                let ab = &self.bufs[a];
                self.accum(grads, a, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += sv * gv });
                self.accum(grads, s, |d| {
                    d[0] += g.iter().zip(ab).map(|(gv, av)| gv * av).sum::<f64>();
                });
            }
            Op::MatVec { w, x, n_in, n_out, .. } => {
                let wb = &self.bufs[w];
                let xb = &self.bufs[x];
                self.accum(grads, w, |d| {
                    for i in 0..n_in {
                        let xi = xb[i];
                        if xi == 0.0 {
                            continue;
                        }
                        let drow = &mut d[i * n_out..(i + 1) * n_out];
                        for (dv, gv) in drow.iter_mut().zip(g) {
                            *dv += xi * gv;
                        }
                    }
                });
                self.accum(grads, x, |d| {
                    for i in 0..n_in {
                        let row = &wb[i * n_out..(i + 1) * n_out];
                        d[i] += row.iter().zip(g).map(|(wv, gv)| wv * gv).sum::<f64>();
                    }
                });
            }
            Op::Spike { v, v_th, cfg, out } => {
                let vb = &self.bufs[v];
                let ob = &self.bufs[out];
                self.accum(grads, v, |d| match cfg.mode {
                    SpikeMode::Hard => {
                        for ((dv, gv), &vv) in d.iter_mut().zip(g).zip(vb) {
                            let sur = cfg.surrogate_magnitude
                                * (-(vv - v_th).abs() / cfg.surrogate_scale).exp();
                            *dv += gv * sur;
                        }
                    }
                    SpikeMode::Smooth => {
                        for ((dv, gv), &ov) in d.iter_mut().zip(g).zip(ob) {
                            *dv += gv * ov * (1.0 - ov) / cfg.surrogate_scale;
                        }
                    }
                });
            }
            Op::ResetGate { v, s, v_rest, .. } => {
                let vb = &self.bufs[v];
                let sb = &self.bufs[s];
                self.accum(grads, v, |d| {
                    for ((dv, gv), sv) in d.iter_mut().zip(g).zip(sb) {
                        *dv += gv * (1.0 - sv);
                    }
                });
                self.accum(grads, s, |d| {
                    for ((dv, gv), vv) in d.iter_mut().zip(g).zip(vb) {
                        *dv += gv * (v_rest - vv);
                    }
                });
            }
            Op::TraceUpdate { x, s, alpha, beta, .. } => {
                let av = self.bufs[alpha][0];
                let bv = self.bufs[beta][0];
                let xb = &self.bufs[x];
                let sb = &self.bufs[s];
                self.accum(grads, x, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += av * gv });
                self.accum(grads, s, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += bv * gv });
                self.accum(grads, alpha, |d| {
                    d[0] += g.iter().zip(xb).map(|(gv, xv)| gv * xv).sum::<f64>();
                });
                self.accum(grads, beta, |d| {
                    d[0] += g.iter().zip(sb).map(|(gv, sv)| gv * sv).sum::<f64>();
                });
            }
            Op::TraceUpdateSat { x, s, alpha, beta, x_max, .. } => {
                let av = self.bufs[alpha][0];
                let bv = self.bufs[beta][0];
                let xb = &self.bufs[x];
                let sb = &self.bufs[s];
                self.accum(grads, x, |d| {
                    for ((dv, gv), sv) in d.iter_mut().zip(g).zip(sb) {
                        *dv += gv * (av - bv * sv);
                    }
                });
                self.accum(grads, s, |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xb) {
                        *dv += gv * bv * (x_max - xv);
                    }
                });
                self.accum(grads, alpha, |d| {
                    d[0] += g.iter().zip(xb).map(|(gv, xv)| gv * xv).sum::<f64>();
                });
                self.accum(grads, beta, |d| {
                    d[0] += g
                        .iter()
                        .zip(xb)
                        .zip(sb)
                        .map(|((gv, xv), sv)| gv * (x_max - xv) * sv)
                        .sum::<f64>();
                });
            }
            Op::StdpInc { coeff, x, y, n_pre, n_post, .. } => {
                let clen = self.bufs[coeff].len();
                let cb = &self.bufs[coeff];
                let xb = &self.bufs[x];
                let yb = &self.bufs[y];
                self.accum(grads, coeff, |d| {
                    if clen == 1 {
                        let mut acc = 0.0;
                        for i in 0..n_pre {
                            let xi = xb[i];
                            if xi == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n_post..(i + 1) * n_post];
                            acc += xi * grow.iter().zip(yb).map(|(gv, yv)| gv * yv).sum::<f64>();
                        }
                        d[0] += acc;
                    } else {
                        for i in 0..n_pre {
                            let xi = xb[i];
                            if xi == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n_post..(i + 1) * n_post];
                            let drow = &mut d[i * n_post..(i + 1) * n_post];
                            for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yb) {
                                *dv += gv * xi * yv;
                            }
                        }
                    }
                });
                self.accum(grads, x, |d| {
                    for i in 0..n_pre {
                        let grow = &g[i * n_post..(i + 1) * n_post];
                        let acc: f64 = if clen == 1 {
                            cb[0] * grow.iter().zip(yb).map(|(gv, yv)| gv * yv).sum::<f64>()
                        } else {
                            let crow = &cb[i * n_post..(i + 1) * n_post];
                            grow.iter()
                                .zip(crow)
                                .zip(yb)
                                .map(|((gv, cv), yv)| gv * cv * yv)
                                .sum()
                        };
                        d[i] += acc;
                    }
                });
                self.accum(grads, y, |d| {
                    for i in 0..n_pre {
                        let xi = xb[i];
                        if xi == 0.0 {
                            continue;
                        }
                        let grow = &g[i * n_post..(i + 1) * n_post];
                        if clen == 1 {
                            let c = cb[0];
                            for (dv, gv) in d.iter_mut().zip(grow) {
                                *dv += gv * c * xi;
                            }
                        } else {
                            let crow = &cb[i * n_post..(i + 1) * n_post];
                            for ((dv, gv), cv) in d.iter_mut().zip(grow).zip(crow) {
                                *dv += gv * cv * xi;
                            }
                        }
                    }
                });
            }
            Op::DecayAccum { e, gamma, rate, inc, .. } => {
                let gv0 = self.bufs[gamma][0];
                let rlen = self.bufs[rate].len();
                let eb = &self.bufs[e];
                let rb = &self.bufs[rate];
                let ib = &self.bufs[inc];
                self.accum(grads, e, |d| for (dv, gv) in d.iter_mut().zip(g) { *dv += gv0 * gv });
                self.accum(grads, gamma, |d| {
                    d[0] += g.iter().zip(eb).map(|(gv, ev)| gv * ev).sum::<f64>();
                });
                self.accum(grads, rate, |d| {
                    if rlen == 1 {
                        d[0] += g.iter().zip(ib).map(|(gv, iv)| gv * iv).sum::<f64>();
                    } else {
                        for ((dv, gv), iv) in d.iter_mut().zip(g).zip(ib) {
                            *dv += gv * iv;
                        }
                    }
                });
                self.accum(grads, inc, |d| {
                    for (k, (dv, gv)) in d.iter_mut().zip(g).enumerate() {
                        let r = if rlen == 1 { rb[0] } else { rb[k] };
                        *dv += gv * r;
                    }
                });
            }
            Op::ModApply {
                w,
                e_plus,
                e_minus,
                m_plus,
                m_minus,
                indexing,
                clamp,
                n_pre,
                n_post,
                ..
            } => {
                // Gradient masked where the clamp saturated. The pre-clamp value
                // is recomputed from the stored inputs.
                let wb = &self.bufs[w];
                let ep = &self.bufs[e_plus];
                let em = &self.bufs[e_minus];
                let mp = &self.bufs[m_plus];
                let mm = &self.bufs[m_minus];
                let kof = |i: usize, j: usize| match indexing {
                    ModIndexing::Global => 0,
                    ModIndexing::Pre => i,
                    ModIndexing::Post => j,
                };
                let pass = |i: usize, j: usize| -> f64 {
                    match clamp {
                        None => 1.0,
                        Some((lo, hi)) => {
                            let k = kof(i, j);
                            let idx = i * n_post + j;
                            let v = wb[idx] + mp[k] * ep[idx] + mm[k] * em[idx];
                            if v > lo && v < hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    }
                };
                self.accum(grads, w, |d| {
                    for i in 0..n_pre {
                        for j in 0..n_post {
                            let idx = i * n_post + j;
                            d[idx] += g[idx] * pass(i, j);
                        }
                    }
                });
                self.accum(grads, e_plus, |d| {
                    for i in 0..n_pre {
                        for j in 0..n_post {
                            let idx = i * n_post + j;
                            d[idx] += g[idx] * pass(i, j) * mp[kof(i, j)];
                        }
                    }
                });
                self.accum(grads, e_minus, |d| {
                    for i in 0..n_pre {
                        for j in 0..n_post {
                            let idx = i * n_post + j;
                            d[idx] += g[idx] * pass(i, j) * mm[kof(i, j)];
                        }
                    }
                });
                self.accum(grads, m_plus, |d| {
                    for i in 0..n_pre {
                        for j in 0..n_post {
                            let idx = i * n_post + j;
                            d[kof(i, j)] += g[idx] * pass(i, j) * ep[idx];
                        }
                    }
                });
                self.accum(grads, m_minus, |d| {
                    for i in 0..n_pre {
                        for j in 0..n_post {
                            let idx = i * n_post + j;
                            d[kof(i, j)] += g[idx] * pass(i, j) * em[idx];
                        }
                    }
                });
            }
            Op::Clamp { a, lo, hi, .. } => {
                let ab = &self.bufs[a];
                self.accum(grads, a, |d| {
                    for ((dv, gv), &av) in d.iter_mut().zip(g).zip(ab) {
                        if av > lo && av < hi {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::PowClamped { a, exp, .. } => {
                let ab = &self.bufs[a];
                self.accum(grads, a, |d| {
                    for ((dv, gv), &av) in d.iter_mut().zip(g).zip(ab) {
                        if av > 0.0 {
                            *dv += gv * exp * av.powf(exp - 1.0);
                        }
                    }
                });
            }
            Op::Concat { ref inputs, .. } => {
                let mut off = 0;
                for &inp in inputs {
                    let n = self.bufs[inp].len();
                    let gslice = &g[off..off + n];
                    self.accum(grads, inp, |d| {
                        for (dv, gv) in d.iter_mut().zip(gslice) {
                            *dv += gv;
                        }
                    });
                    off += n;
                }
            }
            Op::Sum { a, .. } => {
                let g0 = g[0];
                self.accum(grads, a, |d| for dv in d.iter_mut() { *dv += g0 });
            }
            Op::DotConst { a, ref weights, .. } => {
                let g0 = g[0];
                self.accum(grads, a, |d| {
                    for (dv, wv) in d.iter_mut().zip(weights) {
                        *dv += g0 * wv;
                    }
                });
            }
            Op::Logistic { a, out } => {
                let ob = &self.bufs[out];
                self.accum(grads, a, |d| {
                    for ((dv, gv), ov) in d.iter_mut().zip(g).zip(ob) {
                        *dv += gv * ov * (1.0 - ov);
                    }
                });
            }
            Op::Log { a, .. } => {
                let ab = &self.bufs[a];
                self.accum(grads, a, |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(ab) {
                        *dv += gv / av;
                    }
                });
            }
            Op::Tanh { a, out } => {
                let ob = &self.bufs[out];
                self.accum(grads, a, |d| {
                    for ((dv, gv), ov) in d.iter_mut().zip(g).zip(ob) {
                        *dv += gv * (1.0 - ov * ov);
                    }
                });
            }
            Op::SoftmaxCe { scores, target, .. } => {
                let sb = &self.bufs[scores];
                let m = sb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sb.iter().map(|x| (x - m).exp()).sum();
                let g0 = g[0];
                self.accum(grads, scores, |d| {
                    for (k, dv) in d.iter_mut().enumerate() {
                        let p = (sb[k] - m).exp() / z;
                        let delta = if k == target { 1.0 } else { 0.0 };
                        *dv += g0 * (p - delta);
                    }
                });
            }
            Op::Relu { a, .. } => {
                let ab = &self.bufs[a];
                self.accum(grads, a, |d| {
                    for ((dv, gv), &av) in d.iter_mut().zip(g).zip(ab) {
                        if av > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Conv3x3 { x, w, c_in, c_out, h, wd, .. } => {
                let xb = &self.bufs[x];
                let wb = &self.bufs[w];
                self.accum(grads, x, |d| {
                    for oc in 0..c_out {
                        let gplane = &g[oc * h * wd..(oc + 1) * h * wd];
                        for ic in 0..c_in {
                            let kern = &wb[(oc * c_in + ic) * 9..(oc * c_in + ic) * 9 + 9];
                            let dplane = &mut d[ic * h * wd..(ic + 1) * h * wd];
                            for y in 0..h {
                                for xw in 0..wd {
                                    let gv = gplane[y * wd + xw];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ky in 0..3usize {
                                        let iy = y as isize + ky as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3usize {
                                            let ix = xw as isize + kx as isize - 1;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            dplane[iy as usize * wd + ix as usize] +=
                                                gv * kern[ky * 3 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accum(grads, w, |d| {
                    for oc in 0..c_out {
                        let gplane = &g[oc * h * wd..(oc + 1) * h * wd];
                        for ic in 0..c_in {
                            let plane = &xb[ic * h * wd..(ic + 1) * h * wd];
                            let dk = &mut d[(oc * c_in + ic) * 9..(oc * c_in + ic) * 9 + 9];
                            for y in 0..h {
                                for xw in 0..wd {
                                    let gv = gplane[y * wd + xw];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ky in 0..3usize {
                                        let iy = y as isize + ky as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3usize {
                                            let ix = xw as isize + kx as isize - 1;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            dk[ky * 3 + kx] +=
                                                gv * plane[iy as usize * wd + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::InstanceNorm { x, gain, bias, channels, hw, eps, .. } => {
                let xb = &self.bufs[x];
                let gb = &self.bufs[gain];
                self.accum(grads, bias, |d| {
                    for c in 0..channels {
                        d[c] += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                });
                // xhat recomputed per channel for both gain and input grads
                for c in 0..channels {
                    let plane = &xb[c * hw..(c + 1) * hw];
                    let gplane = &g[c * hw..(c + 1) * hw];
                    let mean = plane.iter().sum::<f64>() / hw as f64;
                    let var =
                        plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = plane.iter().map(|v| (v - mean) * inv).collect();
                    self.accum(grads, gain, |d| {
                        d[c] += gplane.iter().zip(&xhat).map(|(gv, xv)| gv * xv).sum::<f64>();
                    });
                    let gc = gb[c];
                    let n = hw as f64;
                    let dxhat: Vec<f64> = gplane.iter().map(|gv| gv * gc).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    self.accum(grads, x, |d| {
                        let dplane = &mut d[c * hw..(c + 1) * hw];
                        for (k, dv) in dplane.iter_mut().enumerate() {
                            *dv += inv * (dxhat[k] - sum_dxhat / n - xhat[k] * sum_dxhat_xhat / n);
                        }
                    });
                }
            }
            Op::MaxPool2 { x, channels, h, wd, .. } => {
                let xb = &self.bufs[x];
                let (oh, ow) = (h / 2, wd / 2);
                self.accum(grads, x, |d| {
                    for c in 0..channels {
                        let plane = &xb[c * h * wd..(c + 1) * h * wd];
                        let gplane = &g[c * oh * ow..(c + 1) * oh * ow];
                        let dplane = &mut d[c * h * wd..(c + 1) * h * wd];
                        for y in 0..oh {
                            for xw in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut bi = 0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let idx = (2 * y + dy) * wd + 2 * xw + dx;
                                        if plane[idx] > best {
                                            best = plane[idx];
                                            bi = idx;
                                        }
                                    }
                                }
                                dplane[bi] += gplane[y * ow + xw];
                            }
                        }
                    }
                });
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Named parameter values, the domain a differentiable program runs over.
pub type ParamValues = BTreeMap<String, Vec<f64>>;

/// Central-difference check of an analytic gradient.
///
/// `forward` evaluates the scalar program; `gradient` returns the analytic
/// gradient for every parameter name (missing names mean exactly zero).
/// Every element of every parameter is perturbed by ±eps; the per-parameter
/// relative error is |fd - grad| / (|grad| + 1e-12) with |·| the Euclidean
/// magnitude over the parameter's elements, and the max over parameters is
/// returned. Magnitude aggregation keeps the check meaningful for elements
/// whose true gradient sits below the finite-difference noise floor.
pub fn finite_difference_check<F, G>(
    forward: F,
    gradient: G,
    params: &ParamValues,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&ParamValues) -> f64,
    G: FnOnce(&ParamValues) -> ParamValues,
{
    let f0 = forward(params);
    let f1 = forward(params);
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::NonDeterministicProgram);
    }
    let grads = gradient(params);
    let mut max_rel = 0.0f64;
    let mut work = params.clone();
    for (name, values) in params {
        let mut diff_sq = 0.0f64;
        let mut grad_sq = 0.0f64;
        for k in 0..values.len() {
            let orig = values[k];
            work.get_mut(name).unwrap()[k] = orig + eps;
            let fp = forward(&work);
            work.get_mut(name).unwrap()[k] = orig - eps;
            let fm = forward(&work);
            work.get_mut(name).unwrap()[k] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let g = grads.get(name).map(|v| v[k]).unwrap_or(0.0);
            diff_sq += (fd - g) * (fd - g);
            grad_sq += g * g;
        }
        let rel = diff_sq.sqrt() / (grad_sq.sqrt() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
