//! Ground-truth-controlled synthetic benchmarks: evolutionary search for
//! joints with a prescribed mutual information, Cantor-pairing support
//! expansion with binomial noise, and MI-additive concatenation of
//! independent parts.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctmc::TokenSeq;
use crate::dataset::{write_dataset, DatasetHeader};
use crate::error::{Error, Result};
use crate::estimators::SampleSource;
use crate::exact::{exact_mi, ExactPMF, PmfSampler};
use crate::rng::{stream_rng, Stream};

/// Raw encoding of a joint distribution: a real vector of length
/// `|chi_X| * |chi_Y|` plus the full-support floor used on normalization.
#[derive(Debug, Clone)]
pub struct Genome {
    pub values: Vec<f64>,
    pub epsilon: f64,
}

/// Shift-normalize transform: `(g - min(g) 1 + eps 1) / sum(...)`, reshaped
/// to a square joint with block split 1. Always yields a strictly positive
/// pmf; an all-equal genome maps to the uniform joint.
pub fn genome_to_pmf(genome: &Genome, support: usize) -> Result<ExactPMF> {
    if genome.values.len() != support * support {
        return Err(Error::ShapeMismatch {
            expected: format!("{} genome entries", support * support),
            got: format!("{}", genome.values.len()),
        });
    }
    if !(genome.epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    if genome.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("genome must be finite".into()));
    }
    let min = genome.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = genome.values.iter().map(|v| v - min + genome.epsilon).collect();
    ExactPMF::from_weights(2, support as u16, weights, Some(1))
}

/// (mu + lambda) evolutionary strategy configuration. Fitness is the
/// distance `|exact_mi - target_mi|`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ESConfig {
    pub population: usize,
    pub parents: usize,
    pub mutation_sigma: f64,
    pub max_generations: usize,
    pub target_mi: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ESConfig {
    fn default() -> Self {
        Self {
            population: 64,
            parents: 16,
            mutation_sigma: 0.1,
            max_generations: 5000,
            target_mi: 0.5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvolveOutcome {
    pub pmf: ExactPMF,
    pub achieved_mi: f64,
    pub converged: bool,
    pub generations: usize,
}

const GENOME_EPSILON: f64 = 1e-6;

/// Search for a `support x support` joint whose mutual information is within
/// `tolerance` of `target_mi`. Gaussian genome mutations with 1/5-rule step
/// adaptation; the uniform genome is seeded into the initial population so a
/// zero target converges immediately. Exceeding `max_generations` returns
/// the best individual flagged as non-converged.
pub fn evolve_joint(cfg: &ESConfig, support: usize) -> Result<EvolveOutcome> {
    if cfg.parents == 0 || cfg.population < cfg.parents {
        return Err(Error::InvalidInput(
            "need population >= parents >= 1".into(),
        ));
    }
    if !(cfg.tolerance > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    if cfg.target_mi < 0.0 {
        return Err(Error::InvalidInput("target MI must be nonnegative".into()));
    }
    let dim = support * support;
    let mut rng = stream_rng(cfg.seed, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let fitness = |values: &[f64]| -> Result<(f64, f64)> {
        let pmf = genome_to_pmf(&Genome { values: values.to_vec(), epsilon: GENOME_EPSILON }, support)?;
        let mi = exact_mi(&pmf)?;
        Ok(((mi - cfg.target_mi).abs(), mi))
    };
    // parents: (genome, fitness, mi); the uniform genome is parent zero
    let mut parents: Vec<(Vec<f64>, f64, f64)> = Vec::with_capacity(cfg.parents);
    {
        let zero = vec![0.0; dim];
        let (f, mi) = fitness(&zero)?;
        parents.push((zero, f, mi));
    }
    while parents.len() < cfg.parents {
        let g: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let (f, mi) = fitness(&g)?;
        parents.push((g, f, mi));
    }
    parents.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let mut sigma = cfg.mutation_sigma;
    for gen in 0..cfg.max_generations {
        if parents[0].1 <= cfg.tolerance {
            return Ok(EvolveOutcome {
                pmf: genome_to_pmf(
                    &Genome { values: parents[0].0.clone(), epsilon: GENOME_EPSILON },
                    support,
                )?,
                achieved_mi: parents[0].2,
                converged: true,
                generations: gen,
            });
        }
        // draw offspring genomes sequentially (deterministic), evaluate in
        // parallel
        let offspring_genomes: Vec<(usize, Vec<f64>)> = (0..cfg.population)
            .map(|k| {
                let pi = k % cfg.parents;
                let g: Vec<f64> = parents[pi]
                    .0
                    .iter()
                    .map(|v| v + sigma * normal.sample(&mut rng))
                    .collect();
                (pi, g)
            })
            .collect();
        let scored: Vec<Result<(usize, Vec<f64>, f64, f64)>> = offspring_genomes
            .into_par_iter()
            .map(|(pi, g)| {
                let (f, mi) = fitness(&g)?;
                Ok((pi, g, f, mi))
            })
            .collect();
        let mut improved = 0usize;
        let mut pool = parents.clone();
        for s in scored {
            let (pi, g, f, mi) = s?;
            if f < parents[pi].1 {
                improved += 1;
            }
            pool.push((g, f, mi));
        }
        // 1/5 success rule
        if (improved as f64) / (cfg.population as f64) > 0.2 {
            sigma = (sigma * 1.22).min(10.0);
        } else {
            sigma = (sigma / 1.22).max(1e-4);
        }
        pool.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        pool.truncate(cfg.parents);
        parents = pool;
    }
    let best = &parents[0];
    let converged = best.1 <= cfg.tolerance;
    Ok(EvolveOutcome {
        pmf: genome_to_pmf(&Genome { values: best.0.clone(), epsilon: GENOME_EPSILON }, support)?,
        achieved_mi: best.2,
        converged,
        generations: cfg.max_generations,
    })
}

/// Cantor pairing `pi(x, y) = (x + y)(x + y + 1)/2 + y`, a bijection from
/// pairs of nonnegative integers to nonnegative integers.
pub fn cantor_pair(x: u64, y: u64) -> Result<u64> {
    let s = x
        .checked_add(y)
        .ok_or_else(|| Error::Range(format!("cantor_pair({x}, {y}) overflows")))?;
    let tri = s
        .checked_mul(s.checked_add(1).ok_or_else(|| Error::Range("overflow".into()))?)
        .ok_or_else(|| Error::Range(format!("cantor_pair({x}, {y}) overflows")))?
        / 2;
    tri.checked_add(y)
        .ok_or_else(|| Error::Range(format!("cantor_pair({x}, {y}) overflows")))
}

/// Inverse of [`cantor_pair`].
pub fn cantor_unpair(z: u64) -> (u64, u64) {
    let w = ((8u128 * z as u128 + 1).isqrt() - 1) / 2;
    let w = w as u64;
    let t = w * (w + 1) / 2;
    let y = z - t;
    (w - y, y)
}

fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let q = 1.0 - p;
    let mut out = vec![0.0; n + 1];
    out[0] = q.powi(n as i32);
    for k in 0..n {
        out[k + 1] = out[k] * ((n - k) as f64) / ((k + 1) as f64) * (p / q);
    }
    out
}

/// Append an independent `Binomial(n_noise, p)` variable to each side of a
/// univariate joint and Cantor-pair `(value, noise)` into one enlarged
/// variable per side, densely re-indexed in Cantor-code order. Mutual
/// information is exactly preserved; the per-side support grows to
/// `N * (n_noise + 1)`.
pub fn expand_support(joint: &ExactPMF, n_noise: usize, p: f64) -> Result<ExactPMF> {
    if joint.m() != 2 || joint.block_split() != Some(1) {
        return Err(Error::InvalidInput(
            "expand_support needs a univariate joint (M = 2, block_split 1)".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!("noise probability {p} outside [0, 1]")));
    }
    if n_noise == 0 {
        return Ok(joint.clone());
    }
    let n = joint.n() as usize;
    let noise = binomial_pmf(n_noise, p);
    let levels = n_noise + 1;
    let n_out = n * levels;
    // dense re-indexing by Cantor code
    let mut codes: Vec<(u64, usize, usize)> = Vec::with_capacity(n_out);
    for v in 0..n {
        for z in 0..levels {
            codes.push((cantor_pair(v as u64, z as u64)?, v, z));
        }
    }
    codes.sort_unstable();
    let mut rank = vec![0usize; n * levels]; // (v, z) -> dense index
    for (r, &(_, v, z)) in codes.iter().enumerate() {
        rank[v * levels + z] = r;
    }
    let mut weights = vec![0.0; n_out * n_out];
    for x in 0..n {
        for y in 0..n {
            let pxy = joint.probs()[x * n + y];
            if pxy == 0.0 {
                continue;
            }
            for zx in 0..levels {
                for zy in 0..levels {
                    let ix = rank[x * levels + zx];
                    let iy = rank[y * levels + zy];
                    weights[ix * n_out + iy] += pxy * noise[zx] * noise[zy];
                }
            }
        }
    }
    ExactPMF::from_weights(2, n_out as u16, weights, Some(1))
}

/// Sampler over a concatenation of independent joint parts. Tokens are laid
/// out as all X blocks in part order followed by all Y blocks, so the
/// combined block split is the sum of the per-part splits and the combined
/// ground-truth MI is the sum of the per-part MIs.
pub struct ConcatGenerator {
    parts: Vec<(ExactPMF, PmfSampler)>,
    m: usize,
    n: u16,
    block_split: usize,
    ground_truth_mi: f64,
}

impl ConcatGenerator {
    pub fn parts(&self) -> impl Iterator<Item = &ExactPMF> {
        self.parts.iter().map(|(p, _)| p)
    }

    pub fn block_split(&self) -> usize {
        self.block_split
    }

    pub fn ground_truth_mi(&self) -> f64 {
        self.ground_truth_mi
    }
}

/// Build the dataset-level generator for independent parts; ground-truth MI
/// adds across parts. Each part needs a block split and they must agree on
/// the per-token vocabulary.
pub fn concat_independent(parts: Vec<ExactPMF>) -> Result<ConcatGenerator> {
    if parts.is_empty() {
        return Err(Error::InvalidInput("need at least one part".into()));
    }
    let n = parts[0].n();
    let mut m = 0usize;
    let mut block_split = 0usize;
    let mut mi = 0.0;
    for part in &parts {
        if part.n() != n {
            return Err(Error::InvalidInput(format!(
                "inconsistent per-token vocab: {} vs {n}",
                part.n()
            )));
        }
        let b = part.block_split().ok_or_else(|| {
            Error::InvalidInput("every part needs a block_split".into())
        })?;
        m += part.m();
        block_split += b;
        mi += exact_mi(part)?;
    }
    let parts = parts
        .into_iter()
        .map(|p| {
            let s = p.sampler();
            (p, s)
        })
        .collect();
    Ok(ConcatGenerator { parts, m, n, block_split, ground_truth_mi: mi })
}

impl SampleSource for ConcatGenerator {
    fn shape(&self) -> (usize, u16) {
        (self.m, self.n)
    }

    fn sample(&self, rng: &mut Stream) -> TokenSeq {
        let mut x_tokens = Vec::with_capacity(self.block_split);
        let mut y_tokens = Vec::with_capacity(self.m - self.block_split);
        for (pmf, sampler) in &self.parts {
            let row = sampler.sample(rng);
            let b = pmf.block_split().expect("checked at construction");
            x_tokens.extend_from_slice(&row.tokens()[..b]);
            y_tokens.extend_from_slice(&row.tokens()[b..]);
        }
        x_tokens.extend_from_slice(&y_tokens);
        TokenSeq::new(x_tokens, self.n).expect("parts produce valid tokens")
    }
}

/// Explicit joint table for a concatenation, for oracle-scale verification.
/// Fails with a scale error when the combined state space exceeds the bound.
pub fn concat_exact_pmf(parts: &[ExactPMF]) -> Result<ExactPMF> {
    let generator = concat_independent(parts.to_vec())?;
    let n = generator.n as usize;
    let m = generator.m;
    let states = ExactPMF::uniform(m, generator.n)?.state_count();
    let mut weights = vec![0.0; states];
    let mut digits = vec![0u16; m];
    for (idx, w) in weights.iter_mut().enumerate() {
        crate::exact::decode_state(idx, n, &mut digits);
        // split combined layout back into per-part (x, y) tuples
        let mut p = 1.0;
        let mut x_at = 0usize;
        let mut y_at = generator.block_split;
        for (pmf, _) in &generator.parts {
            let b = pmf.block_split().unwrap();
            let mut tokens = Vec::with_capacity(pmf.m());
            tokens.extend_from_slice(&digits[x_at..x_at + b]);
            tokens.extend_from_slice(&digits[y_at..y_at + (pmf.m() - b)]);
            p *= pmf.prob(&tokens);
            x_at += b;
            y_at += pmf.m() - b;
        }
        *w = p;
    }
    ExactPMF::from_weights(m, generator.n, weights, Some(generator.block_split))
}

/// Draw `n_rows` i.i.d. rows (one RNG stream per row) and write them as a
/// dataset file with the ground truth recorded in the header.
pub fn sample_dataset(
    source: &dyn SampleSource,
    n_rows: usize,
    seed: u64,
    block_split: Option<usize>,
    ground_truth_mi: Option<f64>,
    ground_truth_entropy: Option<f64>,
    base: &std::path::Path,
) -> Result<DatasetHeader> {
    if n_rows == 0 {
        return Err(Error::InvalidInput("n_rows must be >= 1".into()));
    }
    let (m, n) = source.shape();
    let rows: Vec<TokenSeq> = (0..n_rows)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            source.sample(&mut rng)
        })
        .collect();
    let header = DatasetHeader {
        m,
        n,
        block_split,
        n_rows,
        seed,
        ground_truth_mi,
        ground_truth_entropy,
    };
    write_dataset(base, &header, &rows)?;
    Ok(header)
}

/// A generated benchmark distribution: a sampler, its shape, and whatever
/// ground truth is known by construction. `exact` carries the explicit joint
/// when the full state space fits the oracle bound.
pub struct GeneratedSource {
    pub sampler: Box<dyn SampleSource + Send>,
    pub m: usize,
    pub n: u16,
    pub block_split: Option<usize>,
    pub ground_truth_mi: Option<f64>,
    pub ground_truth_entropy: Option<f64>,
    pub exact: Option<ExactPMF>,
}

fn evolved_part(target_mi: f64, tolerance: f64, seed: u64) -> Result<EvolveOutcome> {
    let cfg = ESConfig { target_mi, tolerance, seed, ..Default::default() };
    let outcome = evolve_joint(&cfg, 2)?;
    if !outcome.converged {
        return Err(Error::NonConverged(format!(
            "evolutionary search missed MI {target_mi} by {:+.3e} after {} generations",
            outcome.achieved_mi - target_mi,
            outcome.generations
        )));
    }
    Ok(outcome)
}

/// Support sweep: one-token-per-side joint at `target_mi`, support grown to
/// `support` via binomial noise and Cantor pairing (which leaves MI
/// unchanged). `support` must be even.
pub fn preset_support_sweep(target_mi: f64, support: usize, seed: u64) -> Result<GeneratedSource> {
    if support < 2 || support % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "support {support} must be an even number >= 2"
        )));
    }
    let part = evolved_part(target_mi, 1e-4, seed)?;
    let joint = expand_support(&part.pmf, support / 2 - 1, 0.5)?;
    let mi = exact_mi(&joint)?;
    Ok(GeneratedSource {
        sampler: Box::new(joint.sampler()),
        m: 2,
        n: joint.n(),
        block_split: Some(1),
        ground_truth_mi: Some(mi),
        ground_truth_entropy: Some(crate::exact::exact_entropy(&joint)),
        exact: Some(joint),
    })
}

/// Length sweep: binary tokens of total length `total_len` (split evenly
/// between X and Y), carrying one informative part at `target_mi` plus
/// independent fair-coin padding pairs.
pub fn preset_length_sweep(target_mi: f64, total_len: usize, seed: u64) -> Result<GeneratedSource> {
    if total_len < 2 || total_len % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "total length {total_len} must be an even number >= 2"
        )));
    }
    let part = evolved_part(target_mi, 1e-4, seed)?;
    let mut parts = vec![part.pmf];
    let padding = ExactPMF::uniform(2, 2)?.with_block_split(Some(1))?;
    for _ in 0..total_len / 2 - 1 {
        parts.push(padding.clone());
    }
    source_from_parts(parts)
}

/// MI sweep: per-side length `side_len` binary vectors hitting `target_mi`
/// by concatenating equal informative parts (at most 0.5 nats each) plus
/// independent padding.
pub fn preset_mi_sweep(target_mi: f64, side_len: usize, seed: u64) -> Result<GeneratedSource> {
    if side_len == 0 {
        return Err(Error::InvalidInput("side length must be >= 1".into()));
    }
    let k = if target_mi <= 0.0 {
        0
    } else {
        (target_mi / 0.5).ceil() as usize
    };
    if k > side_len {
        return Err(Error::InvalidInput(format!(
            "target MI {target_mi} needs {k} parts but only {side_len} token pairs exist"
        )));
    }
    let mut parts = Vec::with_capacity(side_len);
    if k > 0 {
        let per_part = target_mi / k as f64;
        let part = evolved_part(per_part, 1e-4, seed)?;
        for _ in 0..k {
            parts.push(part.pmf.clone());
        }
    }
    let padding = ExactPMF::uniform(2, 2)?.with_block_split(Some(1))?;
    for _ in 0..side_len - k {
        parts.push(padding.clone());
    }
    source_from_parts(parts)
}

fn source_from_parts(parts: Vec<ExactPMF>) -> Result<GeneratedSource> {
    let exact = concat_exact_pmf(&parts).ok();
    let generator = concat_independent(parts)?;
    let entropy = exact.as_ref().map(crate::exact::exact_entropy);
    Ok(GeneratedSource {
        m: generator.m,
        n: generator.n,
        block_split: Some(generator.block_split),
        ground_truth_mi: Some(generator.ground_truth_mi),
        ground_truth_entropy: entropy,
        exact,
        sampler: Box::new(generator),
    })
}

/// Product of `len` Bernoulli(`p`) bits; ground-truth entropy is
/// `len * h(p)`.
pub fn preset_bernoulli_product(p: f64, len: usize) -> Result<GeneratedSource> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::InvalidInput(format!("p = {p} outside (0, 1)")));
    }
    let site = vec![1.0 - p, p];
    let pmf = ExactPMF::from_site_marginals(&vec![site; len])?;
    let entropy = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
    Ok(GeneratedSource {
        sampler: Box::new(pmf.sampler()),
        m: len,
        n: 2,
        block_split: None,
        ground_truth_mi: None,
        ground_truth_entropy: Some(len as f64 * entropy),
        exact: Some(pmf),
    })
}

/// Uniform distribution over `support^len` sequences.
pub fn preset_uniform(len: usize, support: u16) -> Result<GeneratedSource> {
    let pmf = ExactPMF::uniform(len, support)?;
    Ok(GeneratedSource {
        sampler: Box::new(pmf.sampler()),
        m: len,
        n: support,
        block_split: None,
        ground_truth_mi: None,
        ground_truth_entropy: Some(len as f64 * (support as f64).ln()),
        exact: Some(pmf),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::exact_entropy;
    use rand::Rng;

    #[test]
    fn genome_normalization() {
        // constant genome -> uniform joint
        let g = Genome { values: vec![3.0; 4], epsilon: 1e-6 };
        let pmf = genome_to_pmf(&g, 2).unwrap();
        for &p in pmf.probs() {
            assert!((p - 0.25).abs() < 1e-12);
        }
        // [1,0,0,1] with tiny epsilon -> near-correlated bit
        let g = Genome { values: vec![1.0, 0.0, 0.0, 1.0], epsilon: 1e-6 };
        let pmf = genome_to_pmf(&g, 2).unwrap();
        assert!((pmf.probs()[0] - 0.5).abs() < 1e-5);
        assert!(pmf.probs()[1] > 0.0 && pmf.probs()[1] < 1e-5);
        assert!((exact_mi(&pmf).unwrap() - std::f64::consts::LN_2).abs() < 1e-4);
        // full support for random genomes
        let g = Genome { values: vec![-2.0, 5.0, 0.0, 1.0], epsilon: 1e-6 };
        let pmf = genome_to_pmf(&g, 2).unwrap();
        assert!(pmf.probs().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn evolve_hits_zero_target_immediately() {
        let cfg = ESConfig { target_mi: 0.0, tolerance: 1e-3, seed: 1, ..Default::default() };
        let out = evolve_joint(&cfg, 2).unwrap();
        assert!(out.converged);
        assert_eq!(out.generations, 0);
        assert!(out.achieved_mi < 1e-3);
    }

    #[test]
    fn evolve_hits_half_nat_target() {
        let cfg = ESConfig { target_mi: 0.5, tolerance: 0.01, seed: 2, ..Default::default() };
        let out = evolve_joint(&cfg, 2).unwrap();
        assert!(out.converged, "missed target: {}", out.achieved_mi);
        assert!((0.49..=0.51).contains(&out.achieved_mi));
        // the reported MI is the real one
        assert!((exact_mi(&out.pmf).unwrap() - out.achieved_mi).abs() < 1e-12);
    }

    #[test]
    fn evolve_flags_impossible_target() {
        // 2x2 MI is capped at ln 2
        let cfg = ESConfig {
            target_mi: std::f64::consts::LN_2 + 0.1,
            tolerance: 0.01,
            max_generations: 60,
            seed: 3,
            ..Default::default()
        };
        let out = evolve_joint(&cfg, 2).unwrap();
        assert!(!out.converged);
        assert!(out.achieved_mi <= std::f64::consts::LN_2 + 1e-9);
    }

    #[test]
    fn cantor_pairing_basics_and_round_trip() {
        assert_eq!(cantor_pair(0, 0).unwrap(), 0);
        assert_eq!(cantor_pair(1, 0).unwrap(), 1);
        assert_eq!(cantor_pair(0, 1).unwrap(), 2);
        for x in 0..100u64 {
            for y in 0..100u64 {
                let z = cantor_pair(x, y).unwrap();
                assert_eq!(cantor_unpair(z), (x, y));
            }
        }
        assert!(cantor_pair(u64::MAX, 1).is_err());
    }

    #[test]
    fn expand_support_preserves_mi_exactly() {
        let base = ExactPMF::from_joint_matrix(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let mi0 = exact_mi(&base).unwrap();
        // n_noise = 0 is the identity
        let same = expand_support(&base, 0, 0.5).unwrap();
        assert_eq!(same.probs(), base.probs());
        for n_noise in [1usize, 3, 7] {
            let grown = expand_support(&base, n_noise, 0.5).unwrap();
            assert_eq!(grown.n() as usize, 2 * (n_noise + 1));
            let mi = exact_mi(&grown).unwrap();
            assert!((mi - mi0).abs() < 1e-10, "n_noise={n_noise}: {mi} vs {mi0}");
        }
    }

    #[test]
    fn expand_support_preserves_mi_on_random_joints() {
        for (support, seed) in [(2usize, 4u64), (3, 5), (4, 6)] {
            let mut rng = stream_rng(seed, 0);
            let weights: Vec<f64> = (0..support * support).map(|_| rng.random::<f64>() + 0.01).collect();
            let joint = ExactPMF::from_weights(2, support as u16, weights, Some(1)).unwrap();
            let mi0 = exact_mi(&joint).unwrap();
            let grown = expand_support(&joint, 2, 0.3).unwrap();
            assert!((exact_mi(&grown).unwrap() - mi0).abs() < 1e-10);
        }
    }

    #[test]
    fn concat_adds_mutual_information() {
        let a = ExactPMF::from_joint_matrix(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let b = ExactPMF::from_joint_matrix(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        let gen = concat_independent(vec![a.clone(), b.clone()]).unwrap();
        let want = exact_mi(&a).unwrap() + exact_mi(&b).unwrap();
        assert!((gen.ground_truth_mi() - want).abs() < 1e-12);
        // verified on the explicit product joint
        let exact = concat_exact_pmf(&[a.clone(), b]).unwrap();
        assert!((exact_mi(&exact).unwrap() - want).abs() < 1e-10);
        // single part is the identity
        let one = concat_exact_pmf(&[a.clone()]).unwrap();
        assert_eq!(one.probs(), a.probs());
    }

    #[test]
    fn concat_rejects_mixed_vocabularies() {
        let a = ExactPMF::uniform(2, 2).unwrap().with_block_split(Some(1)).unwrap();
        let b = ExactPMF::uniform(2, 3).unwrap().with_block_split(Some(1)).unwrap();
        assert!(concat_independent(vec![a, b]).is_err());
    }

    #[test]
    fn concat_sampler_layout_groups_x_then_y() {
        // perfectly correlated part: x-token always equals y-token, so after
        // the X|Y regrouping positions 0 and 2 must match, and 1 and 3.
        let part = ExactPMF::from_joint_matrix(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let gen = concat_independent(vec![part.clone(), part]).unwrap();
        assert_eq!(gen.block_split(), 2);
        let mut rng = stream_rng(9, 0);
        for _ in 0..100 {
            let row = gen.sample(&mut rng);
            assert_eq!(row.get(0), row.get(2));
            assert_eq!(row.get(1), row.get(3));
        }
    }

    #[test]
    fn sample_dataset_is_deterministic_and_point_mass_is_constant() {
        let dir = std::env::temp_dir().join("diffinfo_synth_test");
        std::fs::create_dir_all(&dir).unwrap();
        let x = TokenSeq::new(vec![1, 0], 2).unwrap();
        let pmf = ExactPMF::point_mass(&x).unwrap();
        let sampler = pmf.sampler();
        let base = dir.join("pm");
        sample_dataset(&sampler, 50, 4, None, None, None, &base).unwrap();
        let bytes1 = std::fs::read(dir.join("pm.bin")).unwrap();
        sample_dataset(&sampler, 50, 4, None, None, None, &base).unwrap();
        let bytes2 = std::fs::read(dir.join("pm.bin")).unwrap();
        assert_eq!(bytes1, bytes2);
        let (_, rows) = crate::dataset::read_dataset(&base).unwrap();
        assert!(rows.iter().all(|r| r == &x));
    }

    #[test]
    fn sample_dataset_empirical_tv_close_to_truth() {
        let dir = std::env::temp_dir().join("diffinfo_synth_test");
        std::fs::create_dir_all(&dir).unwrap();
        let pmf = ExactPMF::from_joint_matrix(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let base = dir.join("tv");
        sample_dataset(&pmf.sampler(), 100_000, 5, Some(1), None, None, &base).unwrap();
        let (_, rows) = crate::dataset::read_dataset(&base).unwrap();
        let mut counts = [0usize; 4];
        for r in &rows {
            counts[r.get(0) as usize * 2 + r.get(1) as usize] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(pmf.probs())
            .map(|(&c, &p)| (c as f64 / rows.len() as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.005, "tv = {tv}");
    }

    #[test]
    fn presets_report_ground_truth() {
        let sw = preset_support_sweep(0.5, 4, 11).unwrap();
        assert_eq!(sw.n, 4);
        assert!((sw.ground_truth_mi.unwrap() - 0.5).abs() < 1e-3);

        let ls = preset_length_sweep(0.5, 8, 12).unwrap();
        assert_eq!(ls.m, 8);
        assert_eq!(ls.block_split, Some(4));
        assert!((ls.ground_truth_mi.unwrap() - 0.5).abs() < 1e-3);

        let ms = preset_mi_sweep(2.0, 10, 13).unwrap();
        assert_eq!(ms.m, 20);
        assert!((ms.ground_truth_mi.unwrap() - 2.0).abs() < 1e-3);
        // exact joint exists at this scale and confirms the additivity
        let exact = ms.exact.as_ref().unwrap();
        assert!((exact_mi(exact).unwrap() - ms.ground_truth_mi.unwrap()).abs() < 1e-10);

        let mz = preset_mi_sweep(0.0, 4, 14).unwrap();
        assert_eq!(mz.ground_truth_mi, Some(0.0));

        // ten half-nat parts -> ground truth 5.0
        let m5 = preset_mi_sweep(5.0, 10, 15).unwrap();
        assert!((m5.ground_truth_mi.unwrap() - 5.0).abs() < 2e-3);

        let bp = preset_bernoulli_product(0.2, 8).unwrap();
        let h = -(0.2f64.ln() * 0.2 + 0.8f64.ln() * 0.8);
        assert!((bp.ground_truth_entropy.unwrap() - 8.0 * h).abs() < 1e-12);
        assert!((exact_entropy(bp.exact.as_ref().unwrap()) - 8.0 * h).abs() < 1e-10);

        let un = preset_uniform(8, 2).unwrap();
        assert!((un.ground_truth_entropy.unwrap() - 8.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }
}
