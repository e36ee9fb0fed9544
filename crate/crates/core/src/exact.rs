//! Ground-truth oracle on small state spaces: exact mutual information and
//! entropy, exact time-marginals under the absorbing process, exact score
//! ratios, and a training-free, deterministic evaluation of the CTMC KL
//! functional.
//!
//! Everything here works on an explicit probability table over `N^M` states
//! and is bounded to at most 2^20 masked states; the point is verifiability,
//! not scale.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::{k_term_ext, token_kernel, NoiseSchedule, TokenSeq, EPS_T};
use crate::error::{Error, Result};
use crate::estimators::SampleSource;
use crate::quad::gauss_legendre_on;
use crate::rng::{stream_rng, Stream};
use crate::score::ScoreSource;

/// Hard bound on the masked state space `(N+1)^M` handled by the oracle.
pub const ORACLE_STATE_BOUND: usize = 1 << 20;

/// Explicit probability table over a structured state space of M tokens with
/// per-token vocabulary N. Probabilities are stored row-major in token-tuple
/// order with the last token fastest. `block_split = b` marks the X|Y
/// boundary: X = tokens `[0, b)`, Y = tokens `[b, M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPMF {
    m: usize,
    n: u16,
    block_split: Option<usize>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PmfFile {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "N")]
    n: u16,
    block_split: Option<usize>,
    probs: Vec<f64>,
}

/// Compensated summation; the normalization gate is tight (1e-12) and must
/// not be polluted by accumulation error on large tables.
fn kahan_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// `(N+1)^M` (or `N^M` for `base = N`), guarded against the oracle bound.
fn checked_state_count(base: usize, m: usize, bound: usize) -> Result<usize> {
    let mut acc: u128 = 1;
    for _ in 0..m {
        acc *= base as u128;
        if acc > bound as u128 {
            return Err(Error::ScaleBound { states: acc, bound });
        }
    }
    Ok(acc as usize)
}

impl ExactPMF {
    pub fn new(m: usize, n: u16, probs: Vec<f64>, block_split: Option<usize>) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidInput("M and N must be positive".into()));
        }
        let states = checked_state_count(n as usize, m, ORACLE_STATE_BOUND)?;
        if probs.len() != states {
            return Err(Error::ShapeMismatch {
                expected: format!("{states} probabilities"),
                got: format!("{}", probs.len()),
            });
        }
        if let Some(&bad) = probs.iter().find(|&&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid probability {bad}")));
        }
        let sum = kahan_sum(&probs);
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1 within 1e-12"
            )));
        }
        if let Some(b) = block_split {
            if b == 0 || b >= m {
                return Err(Error::InvalidInput(format!(
                    "block_split {b} outside (0, {m})"
                )));
            }
        }
        Ok(Self { m, n, block_split, probs })
    }

    /// Normalize a nonnegative weight table and build the pmf.
    pub fn from_weights(
        m: usize,
        n: u16,
        mut weights: Vec<f64>,
        block_split: Option<usize>,
    ) -> Result<Self> {
        let sum = kahan_sum(&weights);
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidInput(format!("weight sum {sum} not positive")));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Self::new(m, n, weights, block_split)
    }

    pub fn uniform(m: usize, n: u16) -> Result<Self> {
        let states = checked_state_count(n as usize, m, ORACLE_STATE_BOUND)?;
        Self::new(m, n, vec![1.0 / states as f64; states], None)
    }

    pub fn point_mass(x: &TokenSeq) -> Result<Self> {
        if x.has_mask() {
            return Err(Error::InvalidInput("point mass must be a clean state".into()));
        }
        let states = checked_state_count(x.vocab() as usize, x.len(), ORACLE_STATE_BOUND)?;
        let mut probs = vec![0.0; states];
        let idx = state_index(x.tokens(), x.vocab() as usize);
        probs[idx] = 1.0;
        Self::new(x.len(), x.vocab(), probs, None)
    }

    /// Two-token joint from a square matrix: `probs[x][y]`, block_split 1.
    pub fn from_joint_matrix(matrix: &[Vec<f64>]) -> Result<Self> {
        let n = matrix.len();
        if n == 0 || matrix.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidInput("joint matrix must be square".into()));
        }
        let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
        Self::new(2, n as u16, flat, Some(1))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> u16 {
        self.n
    }

    pub fn block_split(&self) -> Option<usize> {
        self.block_split
    }

    pub fn with_block_split(mut self, b: Option<usize>) -> Result<Self> {
        if let Some(b) = b {
            if b == 0 || b >= self.m {
                return Err(Error::InvalidInput(format!(
                    "block_split {b} outside (0, {})",
                    self.m
                )));
            }
        }
        self.block_split = b;
        Ok(self)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn state_count(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, tokens: &[u16]) -> f64 {
        self.probs[state_index(tokens, self.n as usize)]
    }

    /// Marginal over a contiguous token range (other coordinates summed out).
    pub fn marginal(&self, start: usize, end: usize) -> Result<ExactPMF> {
        if start >= end || end > self.m {
            return Err(Error::InvalidInput(format!(
                "marginal range [{start}, {end}) invalid for M = {}",
                self.m
            )));
        }
        let n = self.n as usize;
        let m_out = end - start;
        let out_states = n.pow(m_out as u32);
        let mut out = vec![0.0; out_states];
        let mut digits = vec![0u16; self.m];
        for (idx, &p) in self.probs.iter().enumerate() {
            decode_state(idx, n, &mut digits);
            let sub = state_index(&digits[start..end], n);
            out[sub] += p;
        }
        // accumulated marginals are renormalized to absorb summation error
        ExactPMF::from_weights(m_out, self.n, out, None)
    }

    /// `p^X ⊗ p^Y`: the product of the two block marginals, laid out on the
    /// same state space with the same block split.
    pub fn product_of_marginals(&self) -> Result<ExactPMF> {
        let b = self.block_split.ok_or_else(|| {
            Error::InvalidInput("product_of_marginals requires block_split".into())
        })?;
        let px = self.marginal(0, b)?;
        let py = self.marginal(b, self.m)?;
        let ny = py.state_count();
        let mut out = vec![0.0; self.probs.len()];
        for (ix, &pxv) in px.probs.iter().enumerate() {
            for (iy, &pyv) in py.probs.iter().enumerate() {
                out[ix * ny + iy] = pxv * pyv;
            }
        }
        ExactPMF::from_weights(self.m, self.n, out, Some(b))
    }

    /// Inverse-CDF sampler over the table.
    pub fn sampler(&self) -> PmfSampler {
        let mut cdf = Vec::with_capacity(self.probs.len());
        let mut acc = 0.0;
        for &p in &self.probs {
            acc += p;
            cdf.push(acc);
        }
        PmfSampler { m: self.m, n: self.n, cdf }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PmfFile {
            m: self.m,
            n: self.n,
            block_split: self.block_split,
            probs: self.probs.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: PmfFile =
            serde_json::from_str(json).map_err(|e| Error::Format(format!("pmf json: {e}")))?;
        Self::new(file.m, file.n, file.probs, file.block_split)
    }

    pub fn write_json_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Flat index of a clean state (digits in `[0, base)`), last token fastest.
pub(crate) fn state_index(tokens: &[u16], base: usize) -> usize {
    let mut idx = 0usize;
    for &t in tokens {
        debug_assert!((t as usize) < base);
        idx = idx * base + t as usize;
    }
    idx
}

pub(crate) fn decode_state(mut idx: usize, base: usize, out: &mut [u16]) {
    for slot in out.iter_mut().rev() {
        *slot = (idx % base) as u16;
        idx /= base;
    }
}

/// Inverse-CDF sampler for an [`ExactPMF`].
#[derive(Debug, Clone)]
pub struct PmfSampler {
    m: usize,
    n: u16,
    cdf: Vec<f64>,
}

impl SampleSource for PmfSampler {
    fn shape(&self) -> (usize, u16) {
        (self.m, self.n)
    }

    fn sample(&self, rng: &mut Stream) -> TokenSeq {
        let u: f64 = rng.random();
        let idx = match self.cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
        .min(self.cdf.len() - 1);
        let mut tokens = vec![0u16; self.m];
        decode_state(idx, self.n as usize, &mut tokens);
        TokenSeq::new(tokens, self.n).expect("decoded state is valid")
    }
}

/// Exact mutual information `I(X; Y) = sum p(x,y) ln(p(x,y)/(p(x)p(y)))` of a
/// joint with a block split, with the convention `0 ln 0 = 0`.
pub fn exact_mi(joint: &ExactPMF) -> Result<f64> {
    let b = joint
        .block_split
        .ok_or_else(|| Error::InvalidInput("exact_mi requires block_split".into()))?;
    let px = joint.marginal(0, b)?;
    let py = joint.marginal(b, joint.m)?;
    let ny = py.state_count();
    let mut mi = 0.0;
    for (idx, &p) in joint.probs.iter().enumerate() {
        if p > 0.0 {
            let qx = px.probs[idx / ny];
            let qy = py.probs[idx % ny];
            mi += p * (p / (qx * qy)).ln();
        }
    }
    Ok(mi.max(0.0))
}

/// Shannon entropy `-sum p ln p` in nats.
pub fn exact_entropy(p: &ExactPMF) -> f64 {
    p.probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

/// Plain `KL(p || q) = sum p ln(p/q)` over the table.
pub fn exact_kl(p: &ExactPMF, q: &ExactPMF) -> Result<f64> {
    if p.m != q.m || p.n != q.n {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, {})", p.m, p.n),
            got: format!("({}, {})", q.m, q.n),
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(q.probs.iter()).enumerate() {
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(Error::AbsoluteContinuity(format!(
                    "q is zero at state {i} where p = {pi}"
                )));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Agreement table over the masked state space: entry `s` (digits in
/// `[0, N]`, N = MASK) is the probability under `p0` of agreeing with `s` on
/// all unmasked coordinates. Computed by expanding one axis at a time, so it
/// costs `O(M (N+1)^M)` rather than enumerating completions per state.
pub(crate) fn agreement_table(pmf: &ExactPMF) -> Vec<f64> {
    let n = pmf.n as usize;
    let np1 = n + 1;
    let m = pmf.m;
    let mut cur = pmf.probs.clone();
    for axis in (0..m).rev() {
        let outer = n.pow(axis as u32);
        let inner = np1.pow((m - 1 - axis) as u32);
        let mut next = vec![0.0; outer * np1 * inner];
        for o in 0..outer {
            let mask_dst = (o * np1 + n) * inner;
            for v in 0..n {
                let src = (o * n + v) * inner;
                let dst = (o * np1 + v) * inner;
                for i in 0..inner {
                    let p = cur[src + i];
                    next[dst + i] = p;
                    next[mask_dst + i] += p;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Exact distribution of the perturbed state at time t, as a table over the
/// `(N+1)^M` masked states: `p_t(x) = absorb^a keep^(M-a) P0(agreement)`,
/// where `a` counts masked coordinates of `x`.
pub fn exact_time_marginal(p0: &ExactPMF, schedule: &NoiseSchedule, t: f64) -> Result<Vec<f64>> {
    checked_state_count(p0.n as usize + 1, p0.m, ORACLE_STATE_BOUND)?;
    let (keep, absorb) = token_kernel(schedule, t)?;
    let agree = agreement_table(p0);
    let np1 = p0.n as usize + 1;
    let m = p0.m;
    // keep^(M-a) absorb^a for a = 0..=M
    let mut weight = vec![0.0; m + 1];
    for (a, w) in weight.iter_mut().enumerate() {
        *w = keep.powi((m - a) as i32) * absorb.powi(a as i32);
    }
    let mut out = vec![0.0; agree.len()];
    let mut digits = vec![0u16; m];
    for (s, &ap) in agree.iter().enumerate() {
        if ap == 0.0 {
            continue;
        }
        decode_state(s, np1, &mut digits);
        let a = digits.iter().filter(|&&d| d as usize == np1 - 1).count();
        out[s] = weight[a] * ap;
    }
    Ok(out)
}

/// The true unmasking score ratio `p_t(y) / p_t(x_t)` for `y` equal to `x_t`
/// with masked position `i` replaced by candidate token `cand`:
/// `keep/absorb * P0(X^i = cand, agreement elsewhere) / P0(agreement)`.
/// Returns 0 when the agreement probability vanishes (the sample itself has
/// probability zero and is skipped by callers).
pub fn exact_score_ratio(
    p0: &ExactPMF,
    schedule: &NoiseSchedule,
    t: f64,
    x_t: &TokenSeq,
    i: usize,
    cand: u16,
) -> Result<f64> {
    if x_t.len() != p0.m || x_t.vocab() != p0.n {
        return Err(Error::ShapeMismatch {
            expected: format!("({}, {})", p0.m, p0.n),
            got: format!("({}, {})", x_t.len(), x_t.vocab()),
        });
    }
    if !x_t.is_masked(i) {
        return Err(Error::InvalidInput(format!("position {i} is not masked")));
    }
    if cand >= p0.n {
        return Err(Error::InvalidInput(format!(
            "candidate {cand} outside [0, {})",
            p0.n
        )));
    }
    let (keep, absorb) = token_kernel(schedule, t)?;
    let n = p0.n as usize;
    let masked: Vec<usize> = x_t.masked_positions().collect();
    // Strides of the clean N-ary layout.
    let mut stride = vec![1usize; p0.m];
    for j in (0..p0.m - 1).rev() {
        stride[j] = stride[j + 1] * n;
    }
    let base: usize = (0..p0.m)
        .filter(|&j| !x_t.is_masked(j))
        .map(|j| x_t.get(j) as usize * stride[j])
        .sum();
    // Odometer over completions of the masked coordinates.
    let a = masked.len();
    let mut digits = vec![0usize; a];
    let mut idx = base;
    let slot = masked.iter().position(|&p| p == i).expect("i is masked");
    let mut den = 0.0;
    let mut num = 0.0;
    loop {
        let p = p0.probs[idx];
        den += p;
        if digits[slot] == cand as usize {
            num += p;
        }
        // increment odometer (last digit fastest)
        let mut k = a;
        loop {
            if k == 0 {
                break;
            }
            k -= 1;
            if digits[k] + 1 < n {
                digits[k] += 1;
                idx += stride[masked[k]];
                break;
            }
            idx -= digits[k] * stride[masked[k]];
            digits[k] = 0;
        }
        if digits.iter().all(|&d| d == 0) {
            break;
        }
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(keep / absorb * num / den)
}

/// A [`ScoreSource`] backed by the exact engine: score ratios are table
/// lookups into a precomputed agreement table, so a full M x N table costs
/// `O(aN)` per call.
pub struct ExactScoreSource {
    m: usize,
    n: usize,
    schedule: NoiseSchedule,
    agree: Vec<f64>,
    stride: Vec<usize>,
}

impl ExactScoreSource {
    pub fn new(pmf: &ExactPMF, schedule: NoiseSchedule) -> Result<Self> {
        let np1 = pmf.n as usize + 1;
        checked_state_count(np1, pmf.m, ORACLE_STATE_BOUND)?;
        let mut stride = vec![1usize; pmf.m];
        for j in (0..pmf.m - 1).rev() {
            stride[j] = stride[j + 1] * np1;
        }
        Ok(Self {
            m: pmf.m,
            n: pmf.n as usize,
            schedule,
            agree: agreement_table(pmf),
            stride,
        })
    }
}

impl ScoreSource for ExactScoreSource {
    fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    fn score_ratios(&self, x_t: &TokenSeq, t: f64) -> Result<Vec<f64>> {
        if x_t.len() != self.m || x_t.vocab() as usize != self.n {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {})", self.m, self.n),
                got: format!("({}, {})", x_t.len(), x_t.vocab()),
            });
        }
        let (keep, absorb) = token_kernel(&self.schedule, t)?;
        let g = keep / absorb;
        let idx: usize = (0..self.m)
            .map(|j| x_t.get(j) as usize * self.stride[j])
            .sum();
        let den = self.agree[idx];
        let mut out = vec![0.0; self.m * self.n];
        if den == 0.0 {
            return Ok(out);
        }
        for i in x_t.masked_positions() {
            // digit of x_t at i is N (mask); candidate digit cand shifts the
            // index down by (N - cand) strides.
            let base = idx - self.n * self.stride[i];
            for cand in 0..self.n {
                out[i * self.n + cand] = g * self.agree[base + cand * self.stride[i]] / den;
            }
        }
        Ok(out)
    }
}

/// Options for [`exact_kl_ctmc`]: quadrature order, the state count above
/// which the per-node expectation switches from exhaustive summation to
/// Monte Carlo, and the MC budget.
#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub time_nodes: usize,
    pub exhaustive_state_limit: usize,
    pub mc_states_per_node: usize,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            time_nodes: 256,
            exhaustive_state_limit: 1 << 16,
            mc_states_per_node: 4096,
            seed: 0,
        }
    }
}

struct KlTables {
    agree_p: Vec<f64>,
    agree_q: Vec<f64>,
    stride: Vec<usize>,
    m: usize,
    n: usize,
}

impl KlTables {
    fn new(p0: &ExactPMF, q0: &ExactPMF) -> Result<Self> {
        if p0.m != q0.m || p0.n != q0.n {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {})", p0.m, p0.n),
                got: format!("({}, {})", q0.m, q0.n),
            });
        }
        let np1 = p0.n as usize + 1;
        checked_state_count(np1, p0.m, ORACLE_STATE_BOUND)?;
        let mut stride = vec![1usize; p0.m];
        for j in (0..p0.m - 1).rev() {
            stride[j] = stride[j + 1] * np1;
        }
        Ok(Self {
            agree_p: agreement_table(p0),
            agree_q: agreement_table(q0),
            stride,
            m: p0.m,
            n: p0.n as usize,
        })
    }

    /// Inner sum over masked positions and candidates at masked state `s`
    /// (given as index plus digit array), for kernel ratio factor `g`.
    fn inner_sum(&self, s: usize, digits: &[u16], g: f64) -> Result<f64> {
        let ap = self.agree_p[s];
        let aq = self.agree_q[s];
        debug_assert!(ap > 0.0);
        if aq == 0.0 {
            return Err(Error::AbsoluteContinuity(format!(
                "q assigns zero mass to a p-reachable masked state {s}"
            )));
        }
        let mask = self.n as u16;
        let mut acc = 0.0;
        for (i, &d) in digits.iter().enumerate() {
            if d != mask {
                continue;
            }
            let base = s - self.n * self.stride[i];
            for cand in 0..self.n {
                let y = base + cand * self.stride[i];
                let rp = g * self.agree_p[y] / ap;
                let rq = g * self.agree_q[y] / aq;
                if rp == rq {
                    continue;
                }
                if rq == 0.0 {
                    if rp > 0.0 {
                        return Err(Error::AbsoluteContinuity(format!(
                            "q-ratio zero where p-ratio {rp} > 0 at state {s}"
                        )));
                    }
                    continue;
                }
                acc += k_term_ext(rp) + rq - rp * rq.ln();
            }
        }
        Ok(acc)
    }
}

/// The time-integrand of the KL functional at a single time t, with exact
/// ratios and exhaustive state expectation:
/// `sigma(t) * E_{x_t ~ p_t} [ sum_{i masked, cand} K(r_p) + r_q - r_p ln r_q ]`.
pub fn exact_kl_integrand(
    p0: &ExactPMF,
    q0: &ExactPMF,
    schedule: &NoiseSchedule,
    t: f64,
) -> Result<f64> {
    let tables = KlTables::new(p0, q0)?;
    integrand_exhaustive(&tables, schedule, t)
}

fn integrand_exhaustive(tables: &KlTables, schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    let (keep, absorb) = token_kernel(schedule, t)?;
    let g = keep / absorb;
    let m = tables.m;
    let np1 = tables.n + 1;
    let mut weight = vec![0.0; m + 1];
    for (a, w) in weight.iter_mut().enumerate() {
        *w = keep.powi((m - a) as i32) * absorb.powi(a as i32);
    }
    let mut digits = vec![0u16; m];
    let mask = tables.n as u16;
    let mut acc = 0.0;
    for s in 0..tables.agree_p.len() {
        let ap = tables.agree_p[s];
        if ap == 0.0 {
            continue;
        }
        decode_state(s, np1, &mut digits);
        let a = digits.iter().filter(|&&d| d == mask).count();
        if a == 0 {
            continue;
        }
        let pt = weight[a] * ap;
        if pt == 0.0 {
            continue;
        }
        acc += pt * tables.inner_sum(s, &digits, g)?;
    }
    Ok(schedule.sigma(t)? * acc)
}

fn integrand_monte_carlo(
    tables: &KlTables,
    sampler: &PmfSampler,
    schedule: &NoiseSchedule,
    t: f64,
    n_states: usize,
    seed: u64,
    node_index: u64,
) -> Result<f64> {
    let (keep, absorb) = token_kernel(schedule, t)?;
    let g = keep / absorb;
    let np1 = tables.n + 1;
    let mut rng = stream_rng(seed, node_index);
    let mut acc = 0.0;
    let mut digits = vec![0u16; tables.m];
    for _ in 0..n_states {
        let x0 = sampler.sample(&mut rng);
        let x_t = crate::ctmc::perturb(schedule, &x0, t, &mut rng)?;
        if x_t.count_masked() == 0 {
            continue;
        }
        // Re-encode in the masked (N+1)-ary layout.
        let mut s = 0usize;
        for j in 0..tables.m {
            s = s * np1 + x_t.get(j) as usize;
        }
        digits.copy_from_slice(x_t.tokens());
        acc += tables.inner_sum(s, &digits, g)?;
    }
    Ok(schedule.sigma(t)? * acc / n_states as f64)
}

/// Deterministic evaluation of the CTMC KL functional with exact ratios:
/// Gauss–Legendre quadrature over `[EPS_T, T]` of the state expectation,
/// exhaustive below `opts.exhaustive_state_limit` states and Monte Carlo
/// above. Approximates `KL(p0 || q0)`.
pub fn exact_kl_ctmc(
    p0: &ExactPMF,
    q0: &ExactPMF,
    schedule: &NoiseSchedule,
    opts: &OracleOptions,
) -> Result<f64> {
    let tables = KlTables::new(p0, q0)?;
    let nodes = gauss_legendre_on(EPS_T, schedule.horizon(), opts.time_nodes);
    let exhaustive = tables.agree_p.len() <= opts.exhaustive_state_limit;
    let sampler = if exhaustive { None } else { Some(p0.sampler()) };
    let contributions: Vec<Result<f64>> = nodes
        .par_iter()
        .enumerate()
        .map(|(k, &(t, w))| {
            let v = if exhaustive {
                integrand_exhaustive(&tables, schedule, t)?
            } else {
                integrand_monte_carlo(
                    &tables,
                    sampler.as_ref().expect("sampler built for MC mode"),
                    schedule,
                    t,
                    opts.mc_states_per_node,
                    opts.seed,
                    k as u64,
                )?
            };
            Ok(w * v)
        })
        .collect();
    let mut kl = 0.0;
    for c in contributions {
        kl += c?;
    }
    Ok(kl.max(0.0))
}

impl ExactPMF {
    /// Product distribution over M independent sites with explicit per-site
    /// marginals (all sites share the same vocabulary size).
    pub fn from_site_marginals(sites: &[Vec<f64>]) -> Result<Self> {
        let m = sites.len();
        if m == 0 {
            return Err(Error::InvalidInput("need at least one site".into()));
        }
        let n = sites[0].len();
        if n == 0 || sites.iter().any(|s| s.len() != n) {
            return Err(Error::InvalidInput(
                "all sites must share a positive vocabulary size".into(),
            ));
        }
        let states = checked_state_count(n, m, ORACLE_STATE_BOUND)?;
        let mut probs = vec![0.0; states];
        let mut digits = vec![0u16; m];
        for (idx, slot) in probs.iter_mut().enumerate() {
            decode_state(idx, n, &mut digits);
            *slot = digits
                .iter()
                .enumerate()
                .map(|(j, &d)| sites[j][d as usize])
                .product();
        }
        Self::from_weights(m, n as u16, probs, None)
    }
}
