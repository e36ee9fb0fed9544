//! Absorbing-CTMC primitives: token sequences, noise schedules, the
//! per-token perturbation kernel, and the scalar helpers shared by the
//! exact engine, the score model, and the estimators.
//!
//! The forward process masks each token of a length-M sequence independently:
//! a token survives to time t with probability `exp(-sigma_bar(t))` and is
//! otherwise replaced by the absorbing MASK symbol, which never transitions
//! again. MASK is encoded as token index N, so a vocabulary of size N uses
//! indices `0..=N` in perturbed sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower cutoff for all time sampling and quadrature. The uniform-ratio
/// formula diverges at t = 0; the probability that any token is masked
/// before `EPS_T` is negligible, so the omitted mass is immaterial.
pub const EPS_T: f64 = 1e-5;

/// A length-M sequence of tokens from `{0..N-1}` plus the MASK symbol
/// (encoded as index N). The universal sample representation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<u16>,
    vocab: u16,
}

impl TokenSeq {
    /// Build a sequence over a vocabulary of size `vocab`. Tokens equal to
    /// `vocab` denote MASK; anything larger is rejected.
    pub fn new(tokens: Vec<u16>, vocab: u16) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("token sequence must be non-empty".into()));
        }
        if vocab == 0 {
            return Err(Error::InvalidInput("vocabulary size must be positive".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t > vocab) {
            return Err(Error::InvalidInput(format!(
                "token {bad} outside [0, {vocab}] (MASK = {vocab})"
            )));
        }
        Ok(Self { tokens, vocab })
    }

    /// All-MASK sequence of length `m`.
    pub fn fully_masked(m: usize, vocab: u16) -> Self {
        Self { tokens: vec![vocab; m], vocab }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Vocabulary size N (MASK excluded).
    pub fn vocab(&self) -> u16 {
        self.vocab
    }

    /// The MASK encoding, always equal to `vocab()`.
    pub fn mask_token(&self) -> u16 {
        self.vocab
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn get(&self, i: usize) -> u16 {
        self.tokens[i]
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.vocab
    }

    pub fn has_mask(&self) -> bool {
        self.tokens.iter().any(|&t| t == self.vocab)
    }

    pub fn count_masked(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.vocab).count()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        let mask = self.vocab;
        self.tokens
            .iter()
            .enumerate()
            .filter_map(move |(i, &t)| (t == mask).then_some(i))
    }

    /// Copy with position `i` replaced by `token`.
    pub fn with_token(&self, i: usize, token: u16) -> Self {
        let mut out = self.clone();
        out.tokens[i] = token;
        out
    }

    pub(crate) fn set_token(&mut self, i: usize, token: u16) {
        debug_assert!(token <= self.vocab);
        self.tokens[i] = token;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Geometric,
    Constant,
}

/// Noise schedule: the instantaneous masking rate `sigma(t)`, its integral
/// `sigma_bar(t)`, and the horizon T.
///
/// * `geometric`: `sigma_bar(t) = sigma_min * (sigma_max/sigma_min)^t`, the
///   standard choice for absorbing discrete diffusion. Note the residual
///   `sigma_bar(0) = sigma_min`: the closed form equals the integral of
///   `sigma` only up to this (tiny) offset at t = 0.
/// * `constant`: `sigma(t) = sigma_max` and `sigma_bar(t) = sigma_max * t`,
///   with `sigma_bar(0) = 0` exactly. Mostly used in tests, where a clean
///   zero at t = 0 matters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl NoiseSchedule {
    pub fn geometric(sigma_min: f64, sigma_max: f64, horizon: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(Error::InvalidInput(format!(
                "geometric schedule requires 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        Ok(Self { kind: ScheduleKind::Geometric, sigma_min, sigma_max, horizon })
    }

    pub fn constant(sigma: f64, horizon: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidInput("constant schedule requires sigma > 0".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        Ok(Self { kind: ScheduleKind::Constant, sigma_min: sigma, sigma_max: sigma, horizon })
    }

    /// Default schedule used by every experiment: geometric with
    /// `sigma_min = 1e-3`, `sigma_max = 20`, T = 1. Absorbs essentially all
    /// mass by the horizon (`1 - exp(-20)`).
    pub fn default_geometric() -> Self {
        Self {
            kind: ScheduleKind::Geometric,
            sigma_min: 1e-3,
            sigma_max: 20.0,
            horizon: 1.0,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Domain(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Instantaneous rate `sigma(t)`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::Geometric => {
                let log_ratio = (self.sigma_max / self.sigma_min).ln();
                self.sigma_min * (self.sigma_max / self.sigma_min).powf(t) * log_ratio
            }
            ScheduleKind::Constant => self.sigma_max,
        })
    }

    /// Integrated rate `sigma_bar(t)`. Monotone in t; see the type docs for
    /// the per-kind residual at t = 0.
    pub fn sigma_bar(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::Geometric => {
                self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
            }
            ScheduleKind::Constant => self.sigma_max * t,
        })
    }

    /// `1 - exp(-sigma_bar(T))`: total masking probability at the horizon.
    pub fn terminal_absorption(&self) -> f64 {
        let sb = self
            .sigma_bar(self.horizon)
            .expect("horizon is inside the domain");
        -(-sb).exp_m1()
    }

    /// The estimators assume the terminal distribution is (numerically) the
    /// all-MASK point mass; enforce `1 - exp(-sigma_bar(T)) >= 0.999`.
    pub fn validate_absorbing(&self) -> Result<()> {
        let absorbed = self.terminal_absorption();
        if absorbed < 0.999 {
            return Err(Error::InvalidInput(format!(
                "schedule only masks {absorbed:.6} of tokens by the horizon; need >= 0.999"
            )));
        }
        Ok(())
    }
}

/// Rate structure of the forward chain: per-token absorbing transitions with
/// Hamming-1 sparsity, scaled by the schedule. The only nonzero off-diagonal
/// token rate is value -> MASK at `sigma(t)`; MASK never leaves.
#[derive(Debug, Clone)]
pub struct RateSpec {
    pub schedule: NoiseSchedule,
}

impl RateSpec {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self { schedule }
    }

    /// Entry of the implied (N+1)x(N+1) token rate matrix at time t, with
    /// MASK at index `vocab`.
    pub fn token_rate(&self, from: u16, to: u16, vocab: u16, t: f64) -> Result<f64> {
        let sigma = self.schedule.sigma(t)?;
        let mask = vocab;
        Ok(if from == mask {
            0.0
        } else if to == mask {
            sigma
        } else if from == to {
            -sigma
        } else {
            0.0
        })
    }
}

/// Per-token perturbation kernel at time t: `(keep_prob, absorb_prob)` with
/// `keep_prob = exp(-sigma_bar(t))`.
pub fn token_kernel(schedule: &NoiseSchedule, t: f64) -> Result<(f64, f64)> {
    let sb = schedule.sigma_bar(t)?;
    let keep = (-sb).exp();
    let absorb = -(-sb).exp_m1();
    Ok((keep, absorb))
}

/// Sample the forward process at time t from clean data: each token is
/// independently kept with probability `exp(-sigma_bar(t))`, else masked.
///
/// Rejects input that already contains MASK; `perturb_partial` is the
/// internal entry point for already-noised sequences.
pub fn perturb<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x0: &TokenSeq,
    t: f64,
    rng: &mut R,
) -> Result<TokenSeq> {
    if x0.has_mask() {
        return Err(Error::InvalidInput(
            "perturb expects clean data without MASK tokens".into(),
        ));
    }
    perturb_partial(schedule, x0, t, rng)
}

/// Perturbation that tolerates masked input. Never unmasks: MASK is
/// absorbing, so already-masked positions pass through unchanged.
pub(crate) fn perturb_partial<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x: &TokenSeq,
    t: f64,
    rng: &mut R,
) -> Result<TokenSeq> {
    let (keep, _) = token_kernel(schedule, t)?;
    let mask = x.mask_token();
    let mut out = x.clone();
    for i in 0..out.len() {
        if out.get(i) != mask && rng.random::<f64>() >= keep {
            out.set_token(i, mask);
        }
    }
    Ok(out)
}

/// Ratio `u_t(x) / u_t(MASK) = 1 / (N (exp(sigma_bar(t)) - 1))` of the
/// time-marginal of the uniform distribution, for any unmasked value x.
/// This is the constant reference score used by the entropy estimator.
pub fn uniform_score_ratio(schedule: &NoiseSchedule, t: f64, vocab: u16) -> Result<f64> {
    if vocab == 0 {
        return Err(Error::InvalidInput("vocabulary size must be positive".into()));
    }
    if t <= 0.0 {
        return Err(Error::Singularity(
            "uniform score ratio diverges at t = 0".into(),
        ));
    }
    let sb = schedule.sigma_bar(t)?;
    let denom = vocab as f64 * sb.exp_m1();
    if denom <= 0.0 {
        return Err(Error::Singularity(format!(
            "exp(sigma_bar({t})) - 1 is not positive"
        )));
    }
    Ok(1.0 / denom)
}

/// `K(a) = a (ln a - 1)`: the normalizing term that makes the score-entropy
/// integrand a Bregman divergence. Convex on (0, inf), minimized at a = 1.
pub fn k_term(a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!("k_term requires a > 0, got {a}")));
    }
    Ok(a * (a.ln() - 1.0))
}

/// `K` extended by continuity with `K(0) = 0`, the convention used inside
/// the estimators where zero ratios denote zero-probability transitions.
pub(crate) fn k_term_ext(a: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a.ln() - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    fn geo() -> NoiseSchedule {
        NoiseSchedule::default_geometric()
    }

    #[test]
    fn sigma_bar_constant_is_linear() {
        let s = NoiseSchedule::constant(2.0, 1.0).unwrap();
        assert_eq!(s.sigma_bar(0.5).unwrap(), 1.0);
        assert_eq!(s.sigma_bar(0.0).unwrap(), 0.0);
    }

    #[test]
    fn sigma_bar_at_zero_is_at_most_sigma_min() {
        assert!(geo().sigma_bar(0.0).unwrap() <= geo().sigma_min);
        let c = NoiseSchedule::constant(3.0, 2.0).unwrap();
        assert!(c.sigma_bar(0.0).unwrap() <= c.sigma_min);
    }

    #[test]
    fn sigma_bar_matches_trapezoid_quadrature_of_sigma() {
        // Closed form vs independent numerical integration of sigma(t),
        // accounting for the documented residual at t = 0.
        let s = geo();
        for &t in &[0.25, 0.5, 1.0] {
            let n = 200_000usize;
            let h = t / n as f64;
            let mut acc = 0.5 * (s.sigma(0.0).unwrap() + s.sigma(t).unwrap());
            for k in 1..n {
                acc += s.sigma(k as f64 * h).unwrap();
            }
            let quad = acc * h + s.sigma_bar(0.0).unwrap();
            let exact = s.sigma_bar(t).unwrap();
            assert!(
                ((quad - exact) / exact).abs() < 1e-9,
                "t={t}: quad={quad}, exact={exact}"
            );
        }
    }

    #[test]
    fn sigma_bar_rejects_out_of_domain_times() {
        assert!(geo().sigma_bar(-0.1).is_err());
        assert!(geo().sigma_bar(1.1).is_err());
    }

    #[test]
    fn kernel_limits() {
        let c = NoiseSchedule::constant(2.0f64.ln(), 1.0).unwrap();
        // sigma_bar(1) = ln 2 -> (0.5, 0.5)
        let (keep, absorb) = token_kernel(&c, 1.0).unwrap();
        assert!((keep - 0.5).abs() < 1e-15);
        assert!((absorb - 0.5).abs() < 1e-15);
        // sigma_bar(0) = 0 -> (1, 0)
        let (keep, absorb) = token_kernel(&c, 0.0).unwrap();
        assert_eq!(keep, 1.0);
        assert_eq!(absorb, 0.0);
        // near-total absorption at the default horizon
        let (keep, absorb) = token_kernel(&geo(), 1.0).unwrap();
        assert!(keep < 1e-8);
        assert!(absorb > 1.0 - 1e-8);
    }

    #[test]
    fn kernel_normalization_and_monotonicity_on_grid() {
        let s = geo();
        let mut prev_absorb = -1.0;
        for k in 0..100 {
            let t = (k as f64 + 1.0) / 100.0;
            let (keep, absorb) = token_kernel(&s, t).unwrap();
            assert!((keep + absorb - 1.0).abs() <= f64::EPSILON);
            assert!(absorb > prev_absorb, "absorb_prob must increase in t");
            prev_absorb = absorb;
        }
    }

    #[test]
    fn default_schedule_is_absorbing_at_horizon() {
        assert!(geo().validate_absorbing().is_ok());
        assert!(geo().terminal_absorption() >= 0.999);
        // A weak constant schedule is valid to construct but fails the
        // absorption check used by real runs.
        let weak = NoiseSchedule::constant(2.0, 1.0).unwrap();
        assert!(weak.validate_absorbing().is_err());
    }

    #[test]
    fn perturb_rejects_masked_input_and_never_alters_values() {
        let s = geo();
        let mut rng = stream_rng(1, 0);
        let x0 = TokenSeq::new(vec![0, 1, 2], 3).unwrap();
        let masked = TokenSeq::new(vec![0, 3, 2], 3).unwrap();
        assert!(perturb(&s, &masked, 0.5, &mut rng).is_err());
        for _ in 0..200 {
            let xt = perturb(&s, &x0, 0.7, &mut rng).unwrap();
            for i in 0..x0.len() {
                assert!(xt.get(i) == x0.get(i) || xt.is_masked(i));
            }
        }
    }

    #[test]
    fn perturb_near_identity_at_time_zero() {
        let s = geo();
        let mut rng = stream_rng(2, 0);
        let m = 8usize;
        let x0 = TokenSeq::new(vec![1; m], 4).unwrap();
        let mut unchanged = 0usize;
        let trials = 20_000;
        for _ in 0..trials {
            if perturb(&s, &x0, 0.0, &mut rng).unwrap() == x0 {
                unchanged += 1;
            }
        }
        let frac = unchanged as f64 / trials as f64;
        assert!(frac >= 1.0 - m as f64 * s.sigma_min - 0.01, "frac = {frac}");
    }

    #[test]
    fn perturb_masked_fraction_matches_binomial_oracle() {
        // M = 1, sigma_bar = ln 2: masked fraction 0.5 +- 0.005 over 1e5 draws.
        let s = NoiseSchedule::constant(2.0f64.ln(), 1.0).unwrap();
        let mut rng = stream_rng(3, 0);
        let x0 = TokenSeq::new(vec![0], 2).unwrap();
        let n = 100_000;
        let mut masked = 0usize;
        for _ in 0..n {
            if perturb(&s, &x0, 1.0, &mut rng).unwrap().is_masked(0) {
                masked += 1;
            }
        }
        let frac = masked as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.005, "frac = {frac}");
    }

    #[test]
    fn perturb_horizon_masked_fraction_within_three_sigma() {
        let s = geo();
        let mut rng = stream_rng(4, 0);
        let m = 4usize;
        let x0 = TokenSeq::new(vec![2; m], 5).unwrap();
        let draws = 100_000usize;
        let mut masked = 0usize;
        for _ in 0..draws {
            masked += perturb(&s, &x0, s.horizon(), &mut rng).unwrap().count_masked();
        }
        let tokens = (draws * m) as f64;
        let p = s.terminal_absorption();
        let frac = masked as f64 / tokens;
        let sigma = (p * (1.0 - p) / tokens).sqrt();
        assert!((frac - p).abs() <= 3.0 * sigma + 1e-12, "frac={frac}, p={p}");
    }

    #[test]
    fn perturb_partial_never_unmasks() {
        let s = geo();
        let mut rng = stream_rng(5, 0);
        let x = TokenSeq::new(vec![3, 1, 3, 0], 3).unwrap();
        for _ in 0..500 {
            let y = perturb_partial(&s, &x, 0.9, &mut rng).unwrap();
            assert!(y.is_masked(0) && y.is_masked(2));
        }
    }

    #[test]
    fn uniform_ratio_closed_form() {
        let s = NoiseSchedule::constant(2.0f64.ln(), 1.0).unwrap();
        // sigma_bar = ln 2 -> 1/(N (2-1)) = 1/N
        assert!((uniform_score_ratio(&s, 1.0, 2).unwrap() - 0.5).abs() < 1e-15);
        assert!((uniform_score_ratio(&s, 1.0, 4).unwrap() - 0.25).abs() < 1e-15);
        assert!(uniform_score_ratio(&s, 0.0, 2).is_err());
    }

    #[test]
    fn uniform_ratio_scales_inversely_with_vocab() {
        let s = geo();
        let t = 0.37;
        let base = uniform_score_ratio(&s, t, 2).unwrap() * 2.0;
        for n in [4u16, 8, 16] {
            let v = uniform_score_ratio(&s, t, n).unwrap() * n as f64;
            assert!((v - base).abs() < 1e-12 * base);
        }
    }

    #[test]
    fn k_term_values_and_domain() {
        assert!((k_term(1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!(k_term(std::f64::consts::E).unwrap().abs() < 1e-15);
        let expected = 2.0 * (2.0f64.ln() - 1.0);
        assert!((k_term(2.0).unwrap() - expected).abs() < 1e-15);
        assert!(k_term(0.0).is_err());
        assert!(k_term(-1.0).is_err());
        assert_eq!(k_term_ext(0.0), 0.0);
    }

    #[test]
    fn rate_spec_rows_sum_to_zero_and_mask_is_absorbing() {
        let spec = RateSpec::new(geo());
        let vocab = 4u16;
        let t = 0.5;
        for from in 0..=vocab {
            let mut row = 0.0;
            for to in 0..=vocab {
                let r = spec.token_rate(from, to, vocab, t).unwrap();
                if from != to {
                    assert!(r >= 0.0);
                    if to != vocab {
                        assert_eq!(r, 0.0, "only value -> MASK transitions allowed");
                    }
                }
                row += r;
            }
            assert!(row.abs() < 1e-12);
            if from == vocab {
                for to in 0..=vocab {
                    assert_eq!(spec.token_rate(from, to, vocab, t).unwrap(), 0.0);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn k_term_is_convex(a in 1e-3..50.0f64, b in 1e-3..50.0f64) {
            let mid = k_term(0.5 * (a + b)).unwrap();
            let avg = 0.5 * (k_term(a).unwrap() + k_term(b).unwrap());
            prop_assert!(mid <= avg + 1e-12);
        }

        #[test]
        fn sigma_bar_is_monotone(t1 in 0.0..1.0f64, dt in 1e-6..0.5f64) {
            let s = NoiseSchedule::default_geometric();
            let t2 = (t1 + dt).min(1.0);
            prop_assume!(t2 > t1);
            prop_assert!(s.sigma_bar(t2).unwrap() > s.sigma_bar(t1).unwrap());
        }
    }
}
