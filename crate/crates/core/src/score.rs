//! Parametric score network and its training loop under the denoising
//! score-entropy loss, specialized to the absorbing process.
//!
//! The network maps a (partially masked) token sequence and a time to an
//! M x N table of raw values whose exponentials approximate the unmasking
//! score ratios. Per-position processing shares weights across positions:
//! each residual block mixes a position's features with a context vector
//! gathered through attention weights derived from the positional
//! embeddings alone (no content attention, so the weights are fixed per
//! forward pass and the only position-dependent parameters are the
//! positional embeddings themselves — tying those makes the network exactly
//! permutation-equivariant). The output head is zero-initialized, so a fresh
//! network scores every ratio as exactly 1.
//!
//! Everything is f64 end to end; checkpoints store parameters as 32-bit
//! floats by default (a 64-bit mode exists for gradient tests), and training
//! rounds parameters to f32-representable values on completion so that the
//! default checkpoint round-trip is bit-exact.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::{self, NoiseSchedule, TokenSeq, EPS_T};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Anything that produces unmasking score ratios: an M x N table whose
/// `(i, n)` entry approximates `p_t(y) / p_t(x_t)` for `y` equal to `x_t`
/// with masked position `i` replaced by token `n`. Entries at unmasked
/// positions carry no meaning and are ignored by consumers.
///
/// Implementations must be deterministic given `(x_t, t)` and their own
/// parameters, and safe to call from multiple threads.
pub trait ScoreSource: Sync {
    /// `(M, N)`: sequence length and per-token vocabulary (MASK excluded).
    fn shape(&self) -> (usize, usize);

    /// Row-major M x N table of nonnegative ratios.
    fn score_ratios(&self, x_t: &TokenSeq, t: f64) -> Result<Vec<f64>>;
}

/// Width of the time-feature vector: the kernel log-ratio
/// `ln(keep/absorb)` and the survival probability, plus seven sinusoidal
/// pairs of `ln sigma_bar(t)`. The leading feature carries the whole
/// universal time dependence: the true score at any masked position is the
/// kernel ratio times a time-independent conditional probability, so the
/// optimal raw output is affine in `ln(keep/absorb)` with unit slope.
pub const TIME_FEATURES: usize = 16;

fn time_feature_vec(sigma_bar: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), TIME_FEATURES);
    let absorb = -(-sigma_bar).exp_m1();
    out[0] = 0.25 * (-sigma_bar - absorb.ln());
    out[1] = (-sigma_bar).exp();
    let u = sigma_bar.ln();
    let mut omega = 0.25;
    for k in 0..(TIME_FEATURES - 2) / 2 {
        out[2 + 2 * k] = (omega * u).sin();
        out[2 + 2 * k + 1] = (omega * u).cos();
        omega *= 2.0;
    }
}

/// Architecture shape: sequence length, vocabulary, hidden width, and the
/// number of residual blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreNetSpec {
    pub m: usize,
    pub n: usize,
    pub width: usize,
    pub depth: usize,
}

impl ScoreNetSpec {
    pub fn new(m: usize, n: usize, width: usize, depth: usize) -> Result<Self> {
        if m == 0 || n == 0 || width == 0 || depth == 0 {
            return Err(Error::InvalidInput(
                "net spec dimensions must all be positive".into(),
            ));
        }
        Ok(Self { m, n, width, depth })
    }

    /// Defaults from the design notes: width 256, depth 4.
    pub fn with_defaults(m: usize, n: usize) -> Self {
        Self { m, n, width: 256, depth: 4 }
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    w1: usize,
    c1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every parameter group inside the flat parameter vector.
#[derive(Debug, Clone)]
struct ParamLayout {
    tok: usize,
    pos: usize,
    time_w: usize,
    time_b: usize,
    blocks: Vec<BlockOffsets>,
    head_w: usize,
    head_b: usize,
    time_head: usize,
    total: usize,
}

impl ParamLayout {
    fn new(spec: &ScoreNetSpec) -> Self {
        let w = spec.width;
        let mut off = 0usize;
        let mut take = |len: usize| {
            let at = off;
            off += len;
            at
        };
        let tok = take((spec.n + 1) * w);
        let pos = take(spec.m * w);
        let time_w = take(w * TIME_FEATURES);
        let time_b = take(w);
        let blocks = (0..spec.depth)
            .map(|_| BlockOffsets {
                wq: take(w * w),
                wk: take(w * w),
                wv: take(w * w),
                w1: take(w * w),
                c1: take(w * w),
                b1: take(w),
                w2: take(w * w),
                b2: take(w),
            })
            .collect();
        let head_w = take(spec.n * w);
        let head_b = take(spec.n);
        let time_head = take(spec.n * TIME_FEATURES);
        Self { tok, pos, time_w, time_b, blocks, head_w, head_b, time_head, total: off }
    }
}

// --- small dense kernels (row-major slices) ---

/// y[r, o] (+)= sum_k x[r, k] * w[o, k]
fn apply_linear(y: &mut [f64], x: &[f64], w: &[f64], rows: usize, din: usize, dout: usize, acc: bool) {
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        let yr = &mut y[r * dout..(r + 1) * dout];
        for o in 0..dout {
            let wo = &w[o * din..(o + 1) * din];
            let mut s = 0.0;
            for k in 0..din {
                s += xr[k] * wo[k];
            }
            if acc {
                yr[o] += s;
            } else {
                yr[o] = s;
            }
        }
    }
}

/// dw[o, k] += sum_r g[r, o] * x[r, k]
fn grad_weight(dw: &mut [f64], g: &[f64], x: &[f64], rows: usize, dout: usize, din: usize) {
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        let gr = &g[r * dout..(r + 1) * dout];
        for o in 0..dout {
            let go = gr[o];
            if go == 0.0 {
                continue;
            }
            let dwo = &mut dw[o * din..(o + 1) * din];
            for k in 0..din {
                dwo[k] += go * xr[k];
            }
        }
    }
}

/// dx[r, k] += sum_o g[r, o] * w[o, k]
fn grad_input(dx: &mut [f64], g: &[f64], w: &[f64], rows: usize, dout: usize, din: usize) {
    for r in 0..rows {
        let gr = &g[r * dout..(r + 1) * dout];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for o in 0..dout {
            let go = gr[o];
            if go == 0.0 {
                continue;
            }
            let wo = &w[o * din..(o + 1) * din];
            for k in 0..din {
                dxr[k] += go * wo[k];
            }
        }
    }
}

/// Attention weights shared by every sample of a batch: they depend only on
/// the positional embeddings, not on tokens or time, so they are computed
/// once per parameter state. `q` and `k` are kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttnCache {
    a: Vec<Vec<f64>>, // per block, M x M row-softmax
    q: Vec<Vec<f64>>, // per block, M x width
    k: Vec<Vec<f64>>, // per block, M x width
}

/// Parametric score network `s_theta(x_t, t)`.
#[derive(Clone)]
pub struct ScoreNet {
    spec: ScoreNetSpec,
    schedule: NoiseSchedule,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl std::fmt::Debug for ScoreNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreNet")
            .field("spec", &self.spec)
            .field("schedule", &self.schedule)
            .field("param_count", &self.params.len())
            .finish()
    }
}

impl ScoreNet {
    /// Random initialization. The output head is zero-initialized, so the
    /// fresh network returns ratio 1 everywhere.
    pub fn init(spec: ScoreNetSpec, schedule: NoiseSchedule, seed: u64) -> Self {
        let layout = ParamLayout::new(&spec);
        let mut params = vec![0.0; layout.total];
        let mut rng = stream_rng(seed, 0);
        let w = spec.width;
        let emb = Normal::new(0.0, 0.5).unwrap();
        let proj = Normal::new(0.0, 1.0 / (w as f64).sqrt()).unwrap();
        let attn = Normal::new(0.0, 0.05).unwrap();
        let time = Normal::new(0.0, 1.0 / (TIME_FEATURES as f64).sqrt()).unwrap();
        let fill = |params: &mut Vec<f64>, at: usize, len: usize, d: &Normal<f64>, rng: &mut crate::rng::Stream| {
            for p in &mut params[at..at + len] {
                *p = d.sample(rng);
            }
        };
        fill(&mut params, layout.tok, (spec.n + 1) * w, &emb, &mut rng);
        fill(&mut params, layout.pos, spec.m * w, &emb, &mut rng);
        fill(&mut params, layout.time_w, w * TIME_FEATURES, &time, &mut rng);
        for b in 0..spec.depth {
            let blk = layout.blocks[b];
            fill(&mut params, blk.wq, w * w, &attn, &mut rng);
            fill(&mut params, blk.wk, w * w, &attn, &mut rng);
            fill(&mut params, blk.wv, w * w, &proj, &mut rng);
            fill(&mut params, blk.w1, w * w, &proj, &mut rng);
            fill(&mut params, blk.c1, w * w, &proj, &mut rng);
            fill(&mut params, blk.w2, w * w, &proj, &mut rng);
        }
        // head stays zero
        Self { spec, schedule, layout, params }
    }

    pub fn spec(&self) -> &ScoreNetSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Round every parameter to its nearest f32 value (what the default
    /// checkpoint format stores).
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    /// Test harness hook: copy positional-embedding row 0 into every row,
    /// making the network exactly permutation-equivariant.
    pub fn tie_positional_embeddings(&mut self) {
        let w = self.spec.width;
        let pos = self.layout.pos;
        let row0: Vec<f64> = self.params[pos..pos + w].to_vec();
        for i in 1..self.spec.m {
            self.params[pos + i * w..pos + (i + 1) * w].copy_from_slice(&row0);
        }
    }

    /// Compute the position-attention cache for the current parameters.
    pub fn attn_cache(&self) -> AttnCache {
        let m = self.spec.m;
        let w = self.spec.width;
        let p = &self.params[self.layout.pos..self.layout.pos + m * w];
        let scale = 1.0 / (w as f64).sqrt();
        let mut a = Vec::with_capacity(self.spec.depth);
        let mut qs = Vec::with_capacity(self.spec.depth);
        let mut ks = Vec::with_capacity(self.spec.depth);
        for blk in &self.layout.blocks {
            let mut q = vec![0.0; m * w];
            let mut k = vec![0.0; m * w];
            apply_linear(&mut q, p, &self.params[blk.wq..blk.wq + w * w], m, w, w, false);
            apply_linear(&mut k, p, &self.params[blk.wk..blk.wk + w * w], m, w, w, false);
            let mut attn = vec![0.0; m * m];
            for i in 0..m {
                let qi = &q[i * w..(i + 1) * w];
                let row = &mut attn[i * m..(i + 1) * m];
                let mut max = f64::NEG_INFINITY;
                for (j, slot) in row.iter_mut().enumerate() {
                    let kj = &k[j * w..(j + 1) * w];
                    let mut s = 0.0;
                    for d in 0..w {
                        s += qi[d] * kj[d];
                    }
                    *slot = s * scale;
                    max = max.max(*slot);
                }
                let mut z = 0.0;
                for slot in row.iter_mut() {
                    *slot = (*slot - max).exp();
                    z += *slot;
                }
                for slot in row.iter_mut() {
                    *slot /= z;
                }
            }
            a.push(attn);
            qs.push(q);
            ks.push(k);
        }
        AttnCache { a, q: qs, k: ks }
    }

    fn check_input(&self, x: &TokenSeq, t: f64) -> Result<()> {
        if x.len() != self.spec.m || x.vocab() as usize != self.spec.n {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {})", self.spec.m, self.spec.n),
                got: format!("({}, {})", x.len(), x.vocab()),
            });
        }
        let horizon = self.schedule.horizon();
        if !(EPS_T..=horizon).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [{EPS_T}, {horizon}]")));
        }
        Ok(())
    }

    /// Raw head outputs (M x N). `trace`, when given, records activations
    /// for the backward pass.
    fn forward_raw(
        &self,
        attn: &AttnCache,
        x: &TokenSeq,
        t: f64,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        let (m, n, w) = (self.spec.m, self.spec.n, self.spec.width);
        let lay = &self.layout;
        let sb = self.schedule.sigma_bar(t)?;
        let mut feat = [0.0; TIME_FEATURES];
        time_feature_vec(sb, &mut feat);
        // time embedding, shared across positions
        let mut tvec = vec![0.0; w];
        apply_linear(&mut tvec, &feat, &self.params[lay.time_w..lay.time_w + w * TIME_FEATURES], 1, TIME_FEATURES, w, false);
        for (d, slot) in tvec.iter_mut().enumerate() {
            *slot += self.params[lay.time_b + d];
        }
        // h0 = tok_emb[x_i] + pos_emb[i] + tvec
        let mut h = vec![0.0; m * w];
        for i in 0..m {
            let tok = x.get(i) as usize;
            let te = &self.params[lay.tok + tok * w..lay.tok + (tok + 1) * w];
            let pe = &self.params[lay.pos + i * w..lay.pos + (i + 1) * w];
            let hi = &mut h[i * w..(i + 1) * w];
            for d in 0..w {
                hi[d] = te[d] + pe[d] + tvec[d];
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.feat = feat;
            tr.h_in.clear();
            tr.hbar.clear();
            tr.ctx.clear();
            tr.act.clear();
        }
        let mut hbar = vec![0.0; m * w];
        let mut ctx = vec![0.0; m * w];
        let mut z = vec![0.0; m * w];
        for (b, blk) in lay.blocks.iter().enumerate() {
            let a = &attn.a[b];
            // hbar = A h
            hbar.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..m {
                let ai = &a[i * m..(i + 1) * m];
                let out = &mut hbar[i * w..(i + 1) * w];
                for j in 0..m {
                    let c = ai[j];
                    let hj = &h[j * w..(j + 1) * w];
                    for d in 0..w {
                        out[d] += c * hj[d];
                    }
                }
            }
            apply_linear(&mut ctx, &hbar, &self.params[blk.wv..blk.wv + w * w], m, w, w, false);
            apply_linear(&mut z, &h, &self.params[blk.w1..blk.w1 + w * w], m, w, w, false);
            apply_linear(&mut z, &ctx, &self.params[blk.c1..blk.c1 + w * w], m, w, w, true);
            for i in 0..m {
                let zi = &mut z[i * w..(i + 1) * w];
                for d in 0..w {
                    zi[d] = (zi[d] + self.params[blk.b1 + d]).max(0.0); // relu
                }
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.h_in.push(h.clone());
                tr.hbar.push(hbar.clone());
                tr.ctx.push(ctx.clone());
                tr.act.push(z.clone());
            }
            // h += W2 act + b2
            apply_linear(&mut h, &z, &self.params[blk.w2..blk.w2 + w * w], m, w, w, true);
            for i in 0..m {
                let hi = &mut h[i * w..(i + 1) * w];
                for d in 0..w {
                    hi[d] += self.params[blk.b2 + d];
                }
            }
        }
        let mut out = vec![0.0; m * n];
        apply_linear(&mut out, &h, &self.params[lay.head_w..lay.head_w + n * w], m, w, n, false);
        // direct linear readout of the time features: the global dependence
        // of the log-ratios on sigma_bar is nearly affine, and this path
        // learns it without interference from the context blocks
        for i in 0..m {
            for c in 0..n {
                let th = &self.params[lay.time_head + c * TIME_FEATURES
                    ..lay.time_head + (c + 1) * TIME_FEATURES];
                let mut s = self.params[lay.head_b + c];
                for (fv, tv) in feat.iter().zip(th.iter()) {
                    s += fv * tv;
                }
                out[i * n + c] += s;
            }
        }
        if let Some(tr) = trace {
            tr.h_final = h;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("non-finite network output".into()));
        }
        Ok(out)
    }

    /// Score ratios `exp(raw output)`: strictly positive M x N table.
    /// Builds the attention cache on the fly; use [`FrozenScoreSource`] for
    /// repeated evaluation of a fixed network.
    pub fn forward(&self, x: &TokenSeq, t: f64) -> Result<Vec<f64>> {
        let attn = self.attn_cache();
        self.forward_with_attn(&attn, x, t)
    }

    /// As [`ScoreNet::forward`] but with a precomputed attention cache.
    pub fn forward_with_attn(&self, attn: &AttnCache, x: &TokenSeq, t: f64) -> Result<Vec<f64>> {
        let mut out = self.forward_raw(attn, x, t, None)?;
        for v in &mut out {
            *v = v.exp();
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("score ratio overflowed".into()));
        }
        Ok(out)
    }
}

/// Per-sample activations kept for the backward pass.
#[derive(Default)]
struct ForwardTrace {
    feat: [f64; TIME_FEATURES],
    h_in: Vec<Vec<f64>>, // per block
    hbar: Vec<Vec<f64>>,
    ctx: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>, // post-relu
    h_final: Vec<f64>,
}

/// One training example: clean data, its perturbation, and the time.
#[derive(Debug, Clone)]
pub struct DseSample {
    pub x0: TokenSeq,
    pub x_t: TokenSeq,
    pub t: f64,
}

/// Accumulator for gradients of one chunk of a batch. Attention gradients
/// are kept as per-block dL/dA sums and resolved to parameter gradients once
/// per chunk.
struct GradAccum {
    grad: Vec<f64>,
    d_attn: Vec<Vec<f64>>,
}

impl ScoreNet {
    /// Backward pass for one sample: `d_out` is dLoss/d(raw output).
    fn backward_sample(
        &self,
        attn: &AttnCache,
        x: &TokenSeq,
        tr: &ForwardTrace,
        d_out: &[f64],
        acc: &mut GradAccum,
    ) {
        let (m, n, w) = (self.spec.m, self.spec.n, self.spec.width);
        let lay = &self.layout;
        // head
        let mut dh = vec![0.0; m * w];
        grad_input(&mut dh, d_out, &self.params[lay.head_w..lay.head_w + n * w], m, n, w);
        grad_weight(&mut acc.grad[lay.head_w..lay.head_w + n * w], d_out, &tr.h_final, m, n, w);
        for i in 0..m {
            for c in 0..n {
                let g = d_out[i * n + c];
                acc.grad[lay.head_b + c] += g;
                if g != 0.0 {
                    let th = &mut acc.grad[lay.time_head + c * TIME_FEATURES
                        ..lay.time_head + (c + 1) * TIME_FEATURES];
                    for (tg, fv) in th.iter_mut().zip(tr.feat.iter()) {
                        *tg += g * fv;
                    }
                }
            }
        }
        let mut du = vec![0.0; m * w];
        let mut dctx = vec![0.0; m * w];
        let mut dhbar = vec![0.0; m * w];
        for (b, blk) in lay.blocks.iter().enumerate().rev() {
            let a = &attn.a[b];
            let h_in = &tr.h_in[b];
            // h_out = h_in + W2 act + b2
            du.iter_mut().for_each(|v| *v = 0.0);
            grad_input(&mut du, &dh, &self.params[blk.w2..blk.w2 + w * w], m, w, w);
            grad_weight(&mut acc.grad[blk.w2..blk.w2 + w * w], &dh, &tr.act[b], m, w, w);
            for i in 0..m {
                for d in 0..w {
                    acc.grad[blk.b2 + d] += dh[i * w + d];
                }
            }
            // relu mask: act > 0
            let act = &tr.act[b];
            for (dz, &av) in du.iter_mut().zip(act.iter()) {
                if av <= 0.0 {
                    *dz = 0.0;
                }
            }
            // z = W1 h_in + C1 ctx + b1
            grad_weight(&mut acc.grad[blk.w1..blk.w1 + w * w], &du, h_in, m, w, w);
            grad_weight(&mut acc.grad[blk.c1..blk.c1 + w * w], &du, &tr.ctx[b], m, w, w);
            for i in 0..m {
                for d in 0..w {
                    acc.grad[blk.b1 + d] += du[i * w + d];
                }
            }
            dctx.iter_mut().for_each(|v| *v = 0.0);
            grad_input(&mut dctx, &du, &self.params[blk.c1..blk.c1 + w * w], m, w, w);
            // dh accumulates the residual path; add the W1 path
            grad_input(&mut dh, &du, &self.params[blk.w1..blk.w1 + w * w], m, w, w);
            // ctx = Wv hbar
            dhbar.iter_mut().for_each(|v| *v = 0.0);
            grad_input(&mut dhbar, &dctx, &self.params[blk.wv..blk.wv + w * w], m, w, w);
            grad_weight(&mut acc.grad[blk.wv..blk.wv + w * w], &dctx, &tr.hbar[b], m, w, w);
            // hbar = A h_in: dA += dhbar h_inT ; dh += AT dhbar
            let da = &mut acc.d_attn[b];
            for i in 0..m {
                let dbi = &dhbar[i * w..(i + 1) * w];
                let dai = &mut da[i * m..(i + 1) * m];
                for j in 0..m {
                    let hj = &h_in[j * w..(j + 1) * w];
                    let mut s = 0.0;
                    for d in 0..w {
                        s += dbi[d] * hj[d];
                    }
                    dai[j] += s;
                }
            }
            for i in 0..m {
                let ai = &a[i * m..(i + 1) * m];
                let dbi = &dhbar[i * w..(i + 1) * w];
                for j in 0..m {
                    let c = ai[j];
                    if c == 0.0 {
                        continue;
                    }
                    let dhj = &mut dh[j * w..(j + 1) * w];
                    for d in 0..w {
                        dhj[d] += c * dbi[d];
                    }
                }
            }
        }
        // embeddings: dE = dh
        for i in 0..m {
            let tok = x.get(i) as usize;
            let dei = &dh[i * w..(i + 1) * w];
            let gt = &mut acc.grad[lay.tok + tok * w..lay.tok + (tok + 1) * w];
            for d in 0..w {
                gt[d] += dei[d];
            }
            let gp = &mut acc.grad[lay.pos + i * w..lay.pos + (i + 1) * w];
            for d in 0..w {
                gp[d] += dei[d];
            }
        }
        // time embedding: dtvec = sum_i dE_i
        let mut dt = vec![0.0; w];
        for i in 0..m {
            for d in 0..w {
                dt[d] += dh[i * w + d];
            }
        }
        grad_weight(&mut acc.grad[lay.time_w..lay.time_w + w * TIME_FEATURES], &dt, &tr.feat, 1, w, TIME_FEATURES);
        for d in 0..w {
            acc.grad[lay.time_b + d] += dt[d];
        }
    }

    /// Resolve accumulated dL/dA into gradients of the attention projections
    /// and the positional embeddings (softmax and bilinear-form backward).
    fn backward_attention(&self, attn: &AttnCache, acc: &mut GradAccum) {
        let (m, w) = (self.spec.m, self.spec.width);
        let lay = &self.layout;
        let p = &self.params[lay.pos..lay.pos + m * w];
        let scale = 1.0 / (w as f64).sqrt();
        for (b, blk) in lay.blocks.iter().enumerate() {
            let a = &attn.a[b];
            let da = &acc.d_attn[b];
            if da.iter().all(|&v| v == 0.0) {
                continue;
            }
            // softmax rows: dS_ij = A_ij (dA_ij - sum_k A_ik dA_ik)
            let mut ds = vec![0.0; m * m];
            for i in 0..m {
                let ai = &a[i * m..(i + 1) * m];
                let dai = &da[i * m..(i + 1) * m];
                let dot: f64 = ai.iter().zip(dai.iter()).map(|(x, y)| x * y).sum();
                let dsi = &mut ds[i * m..(i + 1) * m];
                for j in 0..m {
                    dsi[j] = ai[j] * (dai[j] - dot);
                }
            }
            // S = scale * Q K^T
            let q = &attn.q[b];
            let k = &attn.k[b];
            let mut dq = vec![0.0; m * w];
            let mut dk = vec![0.0; m * w];
            for i in 0..m {
                let dsi = &ds[i * m..(i + 1) * m];
                let dqi = &mut dq[i * w..(i + 1) * w];
                for j in 0..m {
                    let c = dsi[j] * scale;
                    if c == 0.0 {
                        continue;
                    }
                    let kj = &k[j * w..(j + 1) * w];
                    for d in 0..w {
                        dqi[d] += c * kj[d];
                    }
                }
            }
            for j in 0..m {
                let dkj = &mut dk[j * w..(j + 1) * w];
                for i in 0..m {
                    let c = ds[i * m + j] * scale;
                    if c == 0.0 {
                        continue;
                    }
                    let qi = &q[i * w..(i + 1) * w];
                    for d in 0..w {
                        dkj[d] += c * qi[d];
                    }
                }
            }
            // Q = P Wq^T, K = P Wk^T
            grad_weight(&mut acc.grad[blk.wq..blk.wq + w * w], &dq, p, m, w, w);
            grad_weight(&mut acc.grad[blk.wk..blk.wk + w * w], &dk, p, m, w, w);
            grad_input(&mut acc.grad[lay.pos..lay.pos + m * w], &dq, &self.params[blk.wq..blk.wq + w * w], m, w, w);
            grad_input(&mut acc.grad[lay.pos..lay.pos + m * w], &dk, &self.params[blk.wk..blk.wk + w * w], m, w, w);
        }
    }
}

/// Per-sample loss and dLoss/d(raw output). The target ratio specializes the
/// perturbation-kernel ratio to the absorbing process:
/// `r = delta(cand, x0_i) * keep / absorb` at every masked position.
fn dse_sample_terms(
    net: &ScoreNet,
    sample: &DseSample,
    out_raw: &[f64],
    d_out: &mut [f64],
) -> Result<f64> {
    let n = net.spec.n;
    let schedule = &net.schedule;
    let sigma = schedule.sigma(sample.t)?;
    let (keep, absorb) = ctmc::token_kernel(schedule, sample.t)?;
    let r_hit = keep / absorb;
    let k_hit = r_hit * (r_hit.ln() - 1.0);
    let mut loss = 0.0;
    d_out.iter_mut().for_each(|v| *v = 0.0);
    for i in sample.x_t.masked_positions() {
        let x0_tok = sample.x0.get(i) as usize;
        for cand in 0..n {
            let o = out_raw[i * n + cand];
            let s = o.exp();
            if cand == x0_tok {
                // s - r ln s + K(r), with ln s = o by construction
                loss += s - r_hit * o + k_hit;
                d_out[i * n + cand] = sigma * (s - r_hit);
            } else {
                loss += s;
                d_out[i * n + cand] = sigma * s;
            }
        }
    }
    Ok(sigma * loss)
}

fn chunk_ranges(len: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..len).step_by(chunk).map(|a| (a, (a + chunk).min(len))).collect()
}

/// Denoising score-entropy loss over a batch, with the gradient for all
/// parameters. Deterministic regardless of thread count: the batch is split
/// into fixed chunks reduced in order.
pub fn dse_loss(net: &ScoreNet, batch: &[DseSample]) -> Result<(f64, Vec<f64>)> {
    dse_loss_impl(net, batch, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

/// Loss only (for held-out evaluation and finite-difference checks).
pub fn dse_loss_value(net: &ScoreNet, batch: &[DseSample]) -> Result<f64> {
    dse_loss_impl(net, batch, false).map(|(l, _)| l)
}

fn dse_loss_impl(
    net: &ScoreNet,
    batch: &[DseSample],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for s in batch {
        if s.x0.has_mask() {
            return Err(Error::InvalidInput("x0 must be clean".into()));
        }
    }
    let attn = net.attn_cache();
    let (m, n) = (net.spec.m, net.spec.n);
    let scale = 1.0 / batch.len() as f64;
    let chunks = chunk_ranges(batch.len(), 16);
    let partials: Vec<Result<(f64, Option<GradAccum>)>> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let mut loss = 0.0;
            let mut acc = with_grad.then(|| GradAccum {
                grad: vec![0.0; net.params.len()],
                d_attn: (0..net.spec.depth).map(|_| vec![0.0; m * m]).collect(),
            });
            let mut d_out = vec![0.0; m * n];
            let mut trace = ForwardTrace::default();
            for sample in &batch[a..b] {
                let raw = if with_grad {
                    net.forward_raw(&attn, &sample.x_t, sample.t, Some(&mut trace))?
                } else {
                    net.forward_raw(&attn, &sample.x_t, sample.t, None)?
                };
                let l = dse_sample_terms(net, sample, &raw, &mut d_out)?;
                if !l.is_finite() {
                    return Err(Error::NumericFault(format!("non-finite loss {l}")));
                }
                loss += l;
                if let Some(acc) = acc.as_mut() {
                    for v in d_out.iter_mut() {
                        *v *= scale;
                    }
                    net.backward_sample(&attn, &sample.x_t, &trace, &d_out, acc);
                }
            }
            if let Some(acc) = acc.as_mut() {
                net.backward_attention(&attn, acc);
            }
            Ok((loss, acc))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = with_grad.then(|| vec![0.0; net.params.len()]);
    for part in partials {
        let (l, acc) = part?;
        loss += l;
        if let (Some(g), Some(acc)) = (grad.as_mut(), acc) {
            for (gv, av) in g.iter_mut().zip(acc.grad.iter()) {
                *gv += av;
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Training hyperparameters. Architecture shape lives in [`ScoreNetSpec`];
/// this struct only drives the optimization loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Cosine-decay floor for the learning rate: the step size anneals from
    /// `learning_rate` to `learning_rate * lr_final_frac` over the run.
    /// 1.0 keeps the rate constant.
    #[serde(default = "default_lr_final_frac")]
    pub lr_final_frac: f64,
}

fn default_lr_final_frac() -> f64 {
    0.05
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 256,
            learning_rate: 3e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 100,
            lr_final_frac: 0.05,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("steps and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if !(0.0 < self.lr_final_frac && self.lr_final_frac <= 1.0) {
            return Err(Error::InvalidInput("lr_final_frac must be in (0, 1]".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidInput("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Final network plus the training-loss trace (step, batch loss) recorded
/// every `eval_every` steps.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: ScoreNet,
    pub loss_trace: Vec<(usize, f64)>,
}

/// Adam over minibatches with freshly sampled times and fresh perturbations
/// each step. Deterministic for a fixed seed. On a divergent (non-finite)
/// loss the error carries the parameters from the last completed step.
/// Completion rounds parameters to f32 values so the default checkpoint
/// round-trip is exact.
pub fn train(net: ScoreNet, dataset: &[TokenSeq], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let (m, n) = (net.spec.m, net.spec.n);
    for row in dataset {
        if row.len() != m || row.vocab() as usize != n {
            return Err(Error::ShapeMismatch {
                expected: format!("({m}, {n})"),
                got: format!("({}, {})", row.len(), row.vocab()),
            });
        }
        if row.has_mask() {
            return Err(Error::InvalidInput("dataset rows must be clean".into()));
        }
    }
    let mut net = net;
    let schedule = net.schedule;
    let horizon = schedule.horizon();
    let mut rng = stream_rng(cfg.seed, 0);
    let mut adam_m = vec![0.0; net.params.len()];
    let mut adam_v = vec![0.0; net.params.len()];
    let (beta1, beta2) = cfg.adam_betas;
    let mut trace = Vec::new();
    let mut last_good = net.params.clone();
    let mut batch: Vec<DseSample> = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            let x0 = dataset[rng.random_range(0..dataset.len())].clone();
            let t = EPS_T + (horizon - EPS_T) * rng.random::<f64>();
            let x_t = ctmc::perturb(&schedule, &x0, t, &mut rng)?;
            batch.push(DseSample { x0, x_t, t });
        }
        let (loss, mut grad) = match dse_loss(&net, &batch) {
            Ok(v) => v,
            Err(Error::NumericFault(what)) => {
                net.params = last_good;
                return Err(Error::TrainDiverged { step, what, last_valid: Box::new(net) });
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            net.params = last_good;
            return Err(Error::TrainDiverged {
                step,
                what: format!("loss = {loss}"),
                last_valid: Box::new(net),
            });
        }
        if cfg.grad_clip > 0.0 {
            let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                for g in &mut grad {
                    *g *= s;
                }
            }
        }
        let t_step = (step + 1) as f64;
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let floor = cfg.learning_rate * cfg.lr_final_frac;
        let lr_now = floor
            + 0.5 * (cfg.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos());
        let lr_t = lr_now * (1.0 - beta2.powf(t_step)).sqrt() / (1.0 - beta1.powf(t_step));
        for (((p, g), mm), vv) in net
            .params
            .iter_mut()
            .zip(grad.iter())
            .zip(adam_m.iter_mut())
            .zip(adam_v.iter_mut())
        {
            *mm = beta1 * *mm + (1.0 - beta1) * g;
            *vv = beta2 * *vv + (1.0 - beta2) * g * g;
            *p -= lr_t * *mm / (vv.sqrt() + cfg.adam_eps);
        }
        last_good.copy_from_slice(&net.params);
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            trace.push((step + 1, loss));
        }
    }
    net.quantize_f32();
    Ok(TrainOutput { net, loss_trace: trace })
}

/// A trained network frozen for evaluation: the attention cache is computed
/// once and reused by every [`ScoreSource::score_ratios`] call.
pub struct FrozenScoreSource {
    net: ScoreNet,
    attn: AttnCache,
}

impl FrozenScoreSource {
    pub fn new(net: ScoreNet) -> Self {
        let attn = net.attn_cache();
        Self { net, attn }
    }

    pub fn net(&self) -> &ScoreNet {
        &self.net
    }
}

impl ScoreSource for FrozenScoreSource {
    fn shape(&self) -> (usize, usize) {
        (self.net.spec.m, self.net.spec.n)
    }

    fn score_ratios(&self, x_t: &TokenSeq, t: f64) -> Result<Vec<f64>> {
        self.net.forward_with_attn(&self.attn, x_t, t)
    }
}

/// Checkpoint parameter precision. The file format stores little-endian
/// floats; `F32` is the default interchange format and `F64` exists for
/// gradient tests that need bit-exact 64-bit round trips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatMode {
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "N")]
    n: usize,
    width: usize,
    depth: usize,
    schedule: NoiseSchedule,
    dtype: FloatMode,
    param_count: usize,
}

/// Write `net` as a one-line JSON header followed by the raw little-endian
/// parameter block.
pub fn checkpoint_save(net: &ScoreNet, path: &std::path::Path, mode: FloatMode) -> Result<()> {
    let header = CheckpointHeader {
        m: net.spec.m,
        n: net.spec.n,
        width: net.spec.width,
        depth: net.spec.depth,
        schedule: net.schedule,
        dtype: mode,
        param_count: net.params.len(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    match mode {
        FloatMode::F32 => {
            for &p in &net.params {
                bytes.extend_from_slice(&(p as f32).to_le_bytes());
            }
        }
        FloatMode::F64 => {
            for &p in &net.params {
                bytes.extend_from_slice(&p.to_le_bytes());
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load a checkpoint; fails with a format error on a corrupted header or a
/// truncated parameter block, leaving no partial state behind.
pub fn checkpoint_load(path: &std::path::Path) -> Result<ScoreNet> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let spec = ScoreNetSpec::new(header.m, header.n, header.width, header.depth)?;
    let layout = ParamLayout::new(&spec);
    if layout.total != header.param_count {
        return Err(Error::Format(format!(
            "param_count {} does not match architecture ({} expected)",
            header.param_count, layout.total
        )));
    }
    let body = &bytes[nl + 1..];
    let word = match header.dtype {
        FloatMode::F32 => 4,
        FloatMode::F64 => 8,
    };
    if body.len() != header.param_count * word {
        return Err(Error::Format(format!(
            "parameter block is {} bytes, expected {}",
            body.len(),
            header.param_count * word
        )));
    }
    let params: Vec<f64> = match header.dtype {
        FloatMode::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        FloatMode::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
    };
    Ok(ScoreNet { spec, schedule: header.schedule, layout, params })
}

/// Load and verify the checkpoint matches an expected shape.
pub fn checkpoint_load_expecting(path: &std::path::Path, m: usize, n: usize) -> Result<ScoreNet> {
    let net = checkpoint_load(path)?;
    if net.spec.m != m || net.spec.n != n {
        return Err(Error::ShapeMismatch {
            expected: format!("({m}, {n})"),
            got: format!("({}, {}) in checkpoint", net.spec.m, net.spec.n),
        });
    }
    Ok(net)
}
