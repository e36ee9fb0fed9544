//! Built-in oracle invariant suite: fast, deterministic checks of the core
//! math that every build must pass. The mutual-information suite carries an
//! injectable K-term so a test fixture can verify that a corrupted kernel is
//! actually caught (a mutation canary for the suite itself).

use rand::Rng;

use crate::ctmc::{k_term, perturb, token_kernel, NoiseSchedule, TokenSeq, EPS_T};
use crate::error::Result;
use crate::estimators::SampleSource;
use crate::exact::{exact_mi, exact_score_ratio, ExactPMF, ExactScoreSource};
use crate::ising::{metropolis_sample, IsingSystem, MetropolisConfig, SpinInit};
use crate::rng::stream_rng;
use crate::score::{dse_loss, dse_loss_value, DseSample, ScoreNet, ScoreNetSpec, ScoreSource};
use crate::synth::{cantor_pair, cantor_unpair};

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: usize,
    pub failed: usize,
    pub detail: String,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

/// Run every suite with the production K-term.
pub fn run_selftest() -> Vec<SuiteResult> {
    run_selftest_with_k(|a| k_term(a).unwrap_or(0.0))
}

/// As [`run_selftest`] but with an injectable K-term used by the
/// mutual-information suite (the mutation-canary hook).
pub fn run_selftest_with_k(k: fn(f64) -> f64) -> Vec<SuiteResult> {
    vec![
        kernel_normalization_suite(),
        marginal_ratio_identity_suite(),
        oracle_mi_suite(k),
        gradient_check_suite(),
        cantor_suite(),
        metropolis_balance_suite(),
    ]
}

fn suite(name: &str, checks: Vec<(bool, String)>) -> SuiteResult {
    let failed: Vec<&String> = checks.iter().filter(|(ok, _)| !ok).map(|(_, d)| d).collect();
    SuiteResult {
        name: name.into(),
        passed: checks.len() - failed.len(),
        failed: failed.len(),
        detail: failed
            .first()
            .map(|d| d.to_string())
            .unwrap_or_else(|| "all checks passed".into()),
    }
}

fn kernel_normalization_suite() -> SuiteResult {
    let s = NoiseSchedule::default_geometric();
    let mut checks = Vec::new();
    let mut prev = -1.0;
    for i in 0..100 {
        let t = (i as f64 + 1.0) / 100.0;
        match token_kernel(&s, t) {
            Ok((keep, absorb)) => {
                checks.push((
                    (keep + absorb - 1.0).abs() <= f64::EPSILON,
                    format!("kernel not normalized at t = {t}"),
                ));
                checks.push((absorb > prev, format!("absorption not monotone at t = {t}")));
                prev = absorb;
            }
            Err(e) => checks.push((false, format!("kernel failed at t = {t}: {e}"))),
        }
    }
    suite("kernel-normalization", checks)
}

/// The fully-masked-block trick: joint score ratios evaluated with Y all
/// masked equal the X-marginal's ratios, exhaustively for small joints.
fn marginal_ratio_identity_suite() -> SuiteResult {
    let schedule = NoiseSchedule::default_geometric();
    let mut checks = Vec::new();
    let mut rng = stream_rng(41, 0);
    for &(m, b) in &[(3usize, 1usize), (4, 2)] {
        let states = 2usize.pow(m as u32);
        let weights: Vec<f64> = (0..states).map(|_| rng.random::<f64>() + 0.02).collect();
        let joint = match ExactPMF::from_weights(m, 2, weights, Some(b)) {
            Ok(j) => j,
            Err(e) => {
                checks.push((false, format!("joint construction failed: {e}")));
                continue;
            }
        };
        let marginal = match joint.marginal(0, b) {
            Ok(x) => x,
            Err(e) => {
                checks.push((false, format!("marginal failed: {e}")));
                continue;
            }
        };
        let t = 0.37;
        // every masked X-state, with Y fully masked
        for xs in 0..3usize.pow(b as u32) {
            let mut tokens = Vec::with_capacity(m);
            let mut rem = xs;
            for _ in 0..b {
                tokens.push((rem % 3) as u16);
                rem /= 3;
            }
            let x_part = tokens.clone();
            tokens.extend(std::iter::repeat_n(2u16, m - b));
            let full = TokenSeq::new(tokens, 2).unwrap();
            let x_seq = TokenSeq::new(x_part, 2).unwrap();
            for i in (0..b).filter(|&i| full.is_masked(i)) {
                for cand in 0..2u16 {
                    let lhs = exact_score_ratio(&joint, &schedule, t, &full, i, cand);
                    let rhs = exact_score_ratio(&marginal, &schedule, t, &x_seq, i, cand);
                    let ok = match (lhs, rhs) {
                        (Ok(a), Ok(b)) => (a - b).abs() <= 1e-10 * b.max(1.0),
                        _ => false,
                    };
                    checks.push((
                        ok,
                        format!("ratio mismatch at state {xs}, position {i}, candidate {cand}"),
                    ));
                }
            }
        }
    }
    suite("marginal-ratio-identity", checks)
}

/// Independent re-implementation of the MI estimator (sequential, pluggable
/// K-term) cross-checked against the closed-form mutual information on
/// small random joints with exact scores.
fn oracle_mi_suite(k: fn(f64) -> f64) -> SuiteResult {
    let schedule = NoiseSchedule::default_geometric();
    let mut checks = Vec::new();
    for seed in 0..5u64 {
        let mut rng = stream_rng(100 + seed, 0);
        let n: u16 = [2, 3][seed as usize % 2];
        let m = 2 + (seed as usize % 2);
        let b = 1;
        let states = (n as usize).pow(m as u32);
        let weights: Vec<f64> = (0..states).map(|_| rng.random::<f64>() + 0.05).collect();
        let joint = ExactPMF::from_weights(m, n, weights, Some(b)).unwrap();
        let truth = exact_mi(&joint).unwrap();
        let source = ExactScoreSource::new(&joint, schedule).unwrap();
        let sampler = joint.sampler();
        match mini_estimate_mi(&source, &sampler, b, &schedule, 20_000, 64, 200 + seed, k) {
            Ok((est, stderr)) => {
                let tol = (3.0 * stderr).max(5e-3);
                checks.push((
                    (est - truth).abs() <= tol,
                    format!("joint {seed}: estimate {est} vs exact {truth} (tol {tol})"),
                ));
            }
            Err(e) => checks.push((false, format!("joint {seed}: {e}"))),
        }
    }
    suite("oracle-mi-equivalence", checks)
}

/// Sequential Algorithm-1-style estimator with an injectable K-term. Kept
/// independent of the production estimator on purpose: the two paths
/// cross-validate each other.
#[allow(clippy::too_many_arguments)]
fn mini_estimate_mi(
    source: &dyn ScoreSource,
    sampler: &dyn SampleSource,
    block_split: usize,
    schedule: &NoiseSchedule,
    n_samples: usize,
    strata: usize,
    seed: u64,
    k: fn(f64) -> f64,
) -> Result<(f64, f64)> {
    let (m, n) = source.shape();
    let horizon = schedule.horizon();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for j in 0..n_samples {
        let mut rng = stream_rng(seed, j as u64);
        let x0 = sampler.sample(&mut rng);
        let u: f64 = rng.random();
        let t = EPS_T + (horizon - EPS_T) * ((j % strata) as f64 + u) / strata as f64;
        let x_t = perturb(schedule, &x0, t, &mut rng)?;
        let mut v = 0.0;
        if x_t.count_masked() > 0 {
            let mask = x_t.mask_token();
            let s_joint = source.score_ratios(&x_t, t)?;
            let mut x_only = x_t.clone();
            let mut y_only = x_t.clone();
            for i in 0..m {
                if i < block_split {
                    y_only = y_only.with_token(i, mask);
                } else {
                    x_only = x_only.with_token(i, mask);
                }
            }
            let s_x = source.score_ratios(&x_only, t)?;
            let s_y = source.score_ratios(&y_only, t)?;
            let mut acc = 0.0;
            for i in x_t.masked_positions() {
                let marg = if i < block_split { &s_x } else { &s_y };
                for cand in 0..n {
                    let sp = s_joint[i * n + cand];
                    let sq = marg[i * n + cand];
                    if sp == sq {
                        continue;
                    }
                    if sq > 0.0 {
                        acc += k(sp) + sq - sp * sq.ln();
                    }
                }
            }
            v = horizon * schedule.sigma(t)? * acc;
        }
        sum += v;
        sumsq += v * v;
    }
    let nf = n_samples as f64;
    let mean = sum / nf;
    let var = ((sumsq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

fn gradient_check_suite() -> SuiteResult {
    let schedule = NoiseSchedule::default_geometric();
    let mut net = ScoreNet::init(ScoreNetSpec::new(3, 2, 8, 2).unwrap(), schedule, 7);
    let mut rng = stream_rng(8, 0);
    for p in net.params_mut() {
        *p += 0.1 * (rng.random::<f64>() - 0.5);
    }
    let mut batch = Vec::new();
    while batch.len() < 4 {
        let tokens: Vec<u16> = (0..3).map(|_| rng.random_range(0..2) as u16).collect();
        let x0 = TokenSeq::new(tokens, 2).unwrap();
        let t = EPS_T + (1.0 - EPS_T) * rng.random::<f64>();
        let x_t = perturb(&schedule, &x0, t, &mut rng).unwrap();
        if x_t.count_masked() > 0 {
            batch.push(DseSample { x0, x_t, t });
        }
    }
    let mut checks = Vec::new();
    match dse_loss(&net, &batch) {
        Ok((_, grad)) => {
            let h = 1e-5;
            for param in 0..net.param_count() {
                let orig = net.params()[param];
                net.params_mut()[param] = orig + h;
                let up = dse_loss_value(&net, &batch).unwrap_or(f64::NAN);
                net.params_mut()[param] = orig - h;
                let down = dse_loss_value(&net, &batch).unwrap_or(f64::NAN);
                net.params_mut()[param] = orig;
                let fd = (up - down) / (2.0 * h);
                let diff = (fd - grad[param]).abs();
                let ok = diff <= 1e-6 || diff / grad[param].abs().max(fd.abs()) < 1e-4;
                checks.push((ok, format!("gradient mismatch at parameter {param}")));
            }
        }
        Err(e) => checks.push((false, format!("loss failed: {e}"))),
    }
    suite("gradient-check", checks)
}

fn cantor_suite() -> SuiteResult {
    let mut checks = Vec::new();
    for x in 0..100u64 {
        for y in 0..100u64 {
            let ok = matches!(cantor_pair(x, y).map(cantor_unpair), Ok(pair) if pair == (x, y));
            checks.push((ok, format!("round trip failed at ({x}, {y})")));
        }
    }
    suite("cantor-bijection", checks)
}

fn metropolis_balance_suite() -> SuiteResult {
    let sys = IsingSystem::new(2, 1.0, 2.5).unwrap();
    let cfg = MetropolisConfig {
        n_burn_sweeps: 500,
        n_samples: 1_000_000,
        sweeps_between: 1,
        init: SpinInit::Random,
        seed: 6,
    };
    let mut checks = Vec::new();
    match metropolis_sample(&sys, &cfg) {
        Ok(rows) => {
            let mut counts = vec![0usize; 16];
            for r in &rows {
                let mut bits = 0usize;
                for i in 0..4 {
                    bits |= (r.get(i) as usize) << i;
                }
                counts[bits] += 1;
            }
            let beta = sys.beta();
            let mut weights = Vec::with_capacity(16);
            for bits in 0..16usize {
                let spins: Vec<i8> =
                    (0..4).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect();
                let mut e = 0.0;
                for r in 0..2 {
                    for c in 0..2 {
                        let s = spins[r * 2 + c] as f64;
                        e -= s * (spins[r * 2 + (c + 1) % 2] as f64
                            + spins[((r + 1) % 2) * 2 + c] as f64);
                    }
                }
                weights.push((-beta * e).exp());
            }
            let z: f64 = weights.iter().sum();
            let tv: f64 = counts
                .iter()
                .zip(weights.iter())
                .map(|(&c, &w)| (c as f64 / rows.len() as f64 - w / z).abs())
                .sum::<f64>()
                / 2.0;
            checks.push((tv < 0.01, format!("total variation {tv} exceeds 0.01")));
        }
        Err(e) => checks.push((false, format!("sampling failed: {e}"))),
    }
    suite("metropolis-balance", checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_suite() {
        let results = run_selftest();
        assert_eq!(results.len(), 6);
        for r in &results {
            assert!(r.ok(), "{}: {}", r.name, r.detail);
            assert!(r.passed > 0);
        }
    }

    #[test]
    fn sign_error_in_k_term_is_caught_by_the_mi_suite() {
        // a(ln a + 1) instead of a(ln a - 1)
        let broken = |a: f64| a * (a.ln() + 1.0);
        let results = run_selftest_with_k(broken);
        let mi = results.iter().find(|r| r.name == "oracle-mi-equivalence").unwrap();
        assert!(!mi.ok(), "the corrupted K-term must fail the MI suite");
        // the unrelated suites still pass
        let kernel = results.iter().find(|r| r.name == "kernel-normalization").unwrap();
        assert!(kernel.ok());
    }
}
