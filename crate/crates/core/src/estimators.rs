//! Monte-Carlo estimators for KL divergence, mutual information, and
//! entropy over any pair of [`ScoreSource`]s.
//!
//! All three estimators share the same integrand: for a perturbed sample
//! `x_t` at time t, every masked position i and candidate token n
//! contributes `T * sigma(t) * (K(s_p) + s_q - s_p ln s_q)`, where `s_p`
//! and `s_q` are the unmasking score ratios of the two distributions being
//! compared. The mean over samples estimates KL(p || q); mutual information
//! and entropy are KL against the product of marginals (via the
//! fully-masked-block trick) and against the uniform distribution (whose
//! ratio is a closed form) respectively.
//!
//! Sampling is embarrassingly parallel: sample j draws from RNG stream j,
//! work is split into fixed-size chunks, and chunks are reduced in index
//! order, so results are byte-identical regardless of thread count.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::{self, k_term_ext, NoiseSchedule, TokenSeq, EPS_T};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::score::ScoreSource;

/// A source of clean data samples `x0 ~ p0`.
pub trait SampleSource: Sync {
    /// `(M, N)`: sequence length and per-token vocabulary.
    fn shape(&self) -> (usize, u16);

    /// Draw one sample. Must not contain MASK tokens.
    fn sample(&self, rng: &mut Stream) -> TokenSeq;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Monte-Carlo sample count.
    pub n_samples: usize,
    /// Number of equal time bins with uniform sampling inside each; 1 means
    /// plain uniform time sampling as in the base algorithm.
    pub time_strata: usize,
    pub seed: u64,
    /// Samples per worker chunk (also the score evaluation batch).
    pub score_batch: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { n_samples: 100_000, time_strata: 64, seed: 0, score_batch: 256 }
    }
}

impl EstimatorConfig {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidInput("n_samples must be >= 1".into()));
        }
        if self.time_strata == 0 {
            return Err(Error::InvalidInput("time_strata must be >= 1".into()));
        }
        if self.score_batch == 0 {
            return Err(Error::InvalidInput("score_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Point estimate with its Monte-Carlo standard error and provenance.
///
/// `wall_time_secs` is informational only and deliberately excluded from
/// serialization so that result files are byte-identical across re-runs of
/// the same resolved configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimate: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl EstimateReport {
    /// CSV row `{experiment_id, estimate, stderr, n_samples, seed}`.
    pub fn csv_row(&self, experiment_id: &str) -> String {
        format!(
            "{},{},{},{},{}",
            experiment_id, self.estimate, self.stderr, self.n_samples, self.seed
        )
    }

    pub fn csv_header() -> &'static str {
        "experiment_id,estimate,stderr,n_samples,seed"
    }
}

/// FNV-1a hash of the canonical config string; used as the report
/// fingerprint.
pub fn fingerprint(parts: &[&str]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h ^= 0x1f;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Stratified-uniform time for global sample index `j`.
fn sample_time(cfg: &EstimatorConfig, schedule: &NoiseSchedule, j: usize, rng: &mut Stream) -> f64 {
    let span = schedule.horizon() - EPS_T;
    let s = cfg.time_strata;
    let stratum = j % s;
    let u: f64 = rng.random();
    EPS_T + span * ((stratum as f64 + u) / s as f64)
}

/// One Bregman-integrand term. Exactly zero when both ratios coincide
/// (identical sources), which also suppresses float noise in oracle mode.
fn integrand_term(sp: f64, sq: f64) -> Result<f64> {
    if sp == sq {
        return Ok(0.0);
    }
    if sq == 0.0 {
        if sp > 0.0 {
            return Err(Error::AbsoluteContinuity(
                "q-score is zero where p-score is positive".into(),
            ));
        }
        return Ok(0.0);
    }
    Ok(k_term_ext(sp) + sq - sp * sq.ln())
}

/// Deterministic chunked Monte-Carlo driver: per-sample contributions are
/// computed in parallel over fixed chunks and reduced in index order.
fn run_monte_carlo<F>(cfg: &EstimatorConfig, per_sample: F) -> Result<(f64, f64)>
where
    F: Fn(usize, &mut Stream) -> Result<f64> + Sync,
{
    let n = cfg.n_samples;
    let chunk = cfg.score_batch;
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(chunk)
        .map(|a| (a, (a + chunk).min(n)))
        .collect();
    let partials: Vec<Result<(f64, f64)>> = ranges
        .par_iter()
        .map(|&(a, b)| {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for j in a..b {
                let mut rng = stream_rng(cfg.seed, j as u64);
                let v = per_sample(j, &mut rng)?;
                if !v.is_finite() {
                    return Err(Error::NumericFault(format!(
                        "non-finite contribution {v} at sample {j}"
                    )));
                }
                sum += v;
                sumsq += v * v;
            }
            Ok((sum, sumsq))
        })
        .collect();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for p in partials {
        let (s, q) = p?;
        sum += s;
        sumsq += q;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 {
        ((sumsq - nf * mean * mean) / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok((mean, (var / nf).sqrt()))
}

fn check_shapes(
    score_shape: (usize, usize),
    sampler_shape: (usize, u16),
    what: &str,
) -> Result<()> {
    if score_shape.0 != sampler_shape.0 || score_shape.1 != sampler_shape.1 as usize {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", score_shape),
            got: format!("({}, {}) from {what}", sampler_shape.0, sampler_shape.1),
        });
    }
    Ok(())
}

/// Sum the integrand over all masked positions of `x_t`, reading the p- and
/// q-ratios from two (possibly identical) tables.
fn masked_sum(x_t: &TokenSeq, n: usize, sp: &[f64], sq: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for i in x_t.masked_positions() {
        for cand in 0..n {
            acc += integrand_term(sp[i * n + cand], sq[i * n + cand])?;
        }
    }
    Ok(acc)
}

/// Generic KL estimator: `KL(p0 || q0)` from two score sources and a sampler
/// of `x0 ~ p0`.
pub fn estimate_kl(
    p_source: &dyn ScoreSource,
    q_source: &dyn ScoreSource,
    sampler: &dyn SampleSource,
    schedule: &NoiseSchedule,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let shape = p_source.shape();
    if shape != q_source.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", shape),
            got: format!("{:?} from q_source", q_source.shape()),
        });
    }
    check_shapes(shape, sampler.shape(), "sampler")?;
    let (_, n) = shape;
    let horizon = schedule.horizon();
    let start = Instant::now();
    let (mean, stderr) = run_monte_carlo(cfg, |j, rng| {
        let x0 = sampler.sample(rng);
        let t = sample_time(cfg, schedule, j, rng);
        let x_t = ctmc::perturb(schedule, &x0, t, rng)?;
        if x_t.count_masked() == 0 {
            return Ok(0.0);
        }
        let sp = p_source.score_ratios(&x_t, t)?;
        let sq = q_source.score_ratios(&x_t, t)?;
        Ok(horizon * schedule.sigma(t)? * masked_sum(&x_t, n, &sp, &sq)?)
    })?;
    Ok(report("kl", mean, stderr, cfg, schedule, start))
}

/// Mutual information from a single score source over the joint `[X; Y]`.
///
/// Marginal scores are read from the same source by fully masking the other
/// block: the p-side ratio is evaluated at `[X_t, Y_t]` and the q-side at
/// `[X_t, MASK...]` (respectively `[MASK..., Y_t]` for masked Y positions),
/// three score evaluations per sample.
pub fn estimate_mi(
    joint: &dyn ScoreSource,
    block_split: usize,
    sampler: &dyn SampleSource,
    schedule: &NoiseSchedule,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let shape = joint.shape();
    check_shapes(shape, sampler.shape(), "sampler")?;
    let (m, n) = shape;
    if block_split == 0 || block_split >= m {
        return Err(Error::InvalidInput(format!(
            "block_split {block_split} outside (0, {m})"
        )));
    }
    let horizon = schedule.horizon();
    let start = Instant::now();
    let (mean, stderr) = run_monte_carlo(cfg, |j, rng| {
        let x0 = sampler.sample(rng);
        let t = sample_time(cfg, schedule, j, rng);
        let x_t = ctmc::perturb(schedule, &x0, t, rng)?;
        let masked_x = (0..block_split).any(|i| x_t.is_masked(i));
        let masked_y = (block_split..m).any(|i| x_t.is_masked(i));
        if !masked_x && !masked_y {
            return Ok(0.0);
        }
        let s_joint = joint.score_ratios(&x_t, t)?;
        let mask = x_t.mask_token();
        let mut acc = 0.0;
        if masked_x {
            let mut x_only = x_t.clone();
            for i in block_split..m {
                x_only.set_token(i, mask);
            }
            let s_marg_x = joint.score_ratios(&x_only, t)?;
            for i in (0..block_split).filter(|&i| x_t.is_masked(i)) {
                for cand in 0..n {
                    acc += integrand_term(s_joint[i * n + cand], s_marg_x[i * n + cand])?;
                }
            }
        }
        if masked_y {
            let mut y_only = x_t.clone();
            for i in 0..block_split {
                y_only.set_token(i, mask);
            }
            let s_marg_y = joint.score_ratios(&y_only, t)?;
            for i in (block_split..m).filter(|&i| x_t.is_masked(i)) {
                for cand in 0..n {
                    acc += integrand_term(s_joint[i * n + cand], s_marg_y[i * n + cand])?;
                }
            }
        }
        Ok(horizon * schedule.sigma(t)? * acc)
    })?;
    Ok(report("mi", mean, stderr, cfg, schedule, start))
}

/// Entropy via the KL divergence from the uniform distribution, whose score
/// ratio is the closed form `1 / (N (exp(sigma_bar(t)) - 1))`.
///
/// The report's `estimate` is `H = M ln N - KL_hat`; the raw KL accumulation
/// is carried alongside in `extra["kl_to_uniform"]`. `ln N` uses the original
/// per-token vocabulary N, excluding MASK.
pub fn estimate_entropy(
    source: &dyn ScoreSource,
    sampler: &dyn SampleSource,
    schedule: &NoiseSchedule,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let shape = source.shape();
    check_shapes(shape, sampler.shape(), "sampler")?;
    let (m, n) = shape;
    let horizon = schedule.horizon();
    let start = Instant::now();
    let (kl_mean, stderr) = run_monte_carlo(cfg, |j, rng| {
        let x0 = sampler.sample(rng);
        let t = sample_time(cfg, schedule, j, rng);
        let x_t = ctmc::perturb(schedule, &x0, t, rng)?;
        if x_t.count_masked() == 0 {
            return Ok(0.0);
        }
        let sp = source.score_ratios(&x_t, t)?;
        let su = ctmc::uniform_score_ratio(schedule, t, n as u16)?;
        let mut acc = 0.0;
        for i in x_t.masked_positions() {
            for cand in 0..n {
                acc += integrand_term(sp[i * n + cand], su)?;
            }
        }
        Ok(horizon * schedule.sigma(t)? * acc)
    })?;
    let max_entropy = m as f64 * (n as f64).ln();
    let mut rep = report("entropy", max_entropy - kl_mean, stderr, cfg, schedule, start);
    rep.extra.insert("kl_to_uniform".into(), kl_mean);
    rep.extra.insert("max_entropy".into(), max_entropy);
    Ok(rep)
}

fn report(
    quantity: &str,
    estimate: f64,
    stderr: f64,
    cfg: &EstimatorConfig,
    schedule: &NoiseSchedule,
    start: Instant,
) -> EstimateReport {
    let cfg_json = serde_json::to_string(cfg).unwrap_or_default();
    let sched_json = serde_json::to_string(schedule).unwrap_or_default();
    EstimateReport {
        estimate,
        stderr,
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        config_fingerprint: fingerprint(&[quantity, &cfg_json, &sched_json]),
        extra: BTreeMap::new(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_is_stable_and_order_sensitive() {
        let a = fingerprint(&["x", "y"]);
        assert_eq!(a, fingerprint(&["x", "y"]));
        assert_ne!(a, fingerprint(&["y", "x"]));
        assert_ne!(fingerprint(&["xy"]), a);
    }

    #[test]
    fn integrand_term_conventions() {
        assert_eq!(integrand_term(0.7, 0.7).unwrap(), 0.0);
        assert_eq!(integrand_term(0.0, 0.0).unwrap(), 0.0);
        // sp = 0, sq > 0 -> term is sq
        assert!((integrand_term(0.0, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!(integrand_term(0.5, 0.0).is_err());
        // generic value: K(2) + 1 - 2 ln 1 = 2(ln2 - 1) + 1
        let want = 2.0 * (2.0f64.ln() - 1.0) + 1.0;
        assert!((integrand_term(2.0, 1.0).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn integrand_term_nonnegative_on_positive_pairs() {
        // Bregman divergence of s -> s ln s - s plus affine part.
        for &sp in &[1e-6, 0.1, 1.0, 3.0, 100.0] {
            for &sq in &[1e-6, 0.1, 1.0, 3.0, 100.0] {
                assert!(integrand_term(sp, sq).unwrap() >= -1e-12, "sp={sp} sq={sq}");
            }
        }
    }

    #[test]
    fn stratified_times_cover_every_bin() {
        let cfg = EstimatorConfig { time_strata: 8, ..Default::default() };
        let sched = NoiseSchedule::default_geometric();
        let mut seen = vec![false; 8];
        for j in 0..64 {
            let mut rng = stream_rng(1, j as u64);
            let t = sample_time(&cfg, &sched, j, &mut rng);
            assert!((EPS_T..=sched.horizon()).contains(&t));
            let bin = (((t - EPS_T) / (sched.horizon() - EPS_T)) * 8.0) as usize;
            seen[bin.min(7)] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn report_json_excludes_wall_time() {
        let rep = EstimateReport {
            estimate: 1.0,
            stderr: 0.1,
            n_samples: 10,
            seed: 3,
            config_fingerprint: "abc".into(),
            extra: BTreeMap::new(),
            wall_time_secs: 123.0,
        };
        let json = serde_json::to_string(&rep).unwrap();
        assert!(!json.contains("wall_time"));
        assert!(json.contains("\"estimate\":1.0"));
        assert_eq!(rep.csv_row("exp"), "exp,1,0.1,10,3");
    }
}
