//! 2-D Ising model: Metropolis–Hastings sampling of spin configurations on a
//! periodic square lattice, the closed-form thermodynamic-limit entropy per
//! site (for J = 1, k_B = 1, zero field), and the end-to-end entropy
//! estimation experiment.
//!
//! Sign convention: `E = -J sum_<ij> s_i s_j` with every nearest-neighbor
//! edge counted once (ferromagnetic ground state at low temperature), which
//! is the convention consistent with both the Metropolis energy change
//! `dE = 2 J s_i sum_j s_j` and the free-energy integral below.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{NoiseSchedule, TokenSeq};
use crate::dataset::RowsSource;
use crate::error::{Error, Result};
use crate::estimators::{estimate_entropy, EstimateReport, EstimatorConfig};
use crate::quad::gauss_legendre_on;
use crate::rng::{stream_rng, Stream};
use crate::score::{train, FrozenScoreSource, ScoreNet, ScoreNetSpec, TrainConfig};

/// Lattice-level parameters. Boltzmann's constant is fixed at 1, so
/// `beta = 1 / temperature`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IsingSystem {
    /// Lattice side; the system has `l * l` spins.
    pub l: usize,
    /// Interaction strength (1 in all experiments).
    pub j: f64,
    pub temperature: f64,
}

impl IsingSystem {
    pub fn new(l: usize, j: f64, temperature: f64) -> Result<Self> {
        if l < 2 {
            return Err(Error::InvalidInput("lattice side must be >= 2".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidInput("temperature must be positive".into()));
        }
        Ok(Self { l, j, temperature })
    }

    pub fn beta(&self) -> f64 {
        1.0 / self.temperature
    }

    pub fn sites(&self) -> usize {
        self.l * self.l
    }
}

/// Spin configuration on the `l x l` lattice, row-major, values in {-1, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpinConfig {
    l: usize,
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn all_up(l: usize) -> Self {
        Self { l, spins: vec![1; l * l] }
    }

    pub fn random(l: usize, rng: &mut Stream) -> Self {
        let spins = (0..l * l)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        Self { l, spins }
    }

    pub fn checkerboard(l: usize) -> Self {
        let spins = (0..l * l)
            .map(|i| {
                let (r, c) = (i / l, i % l);
                if (r + c) % 2 == 0 {
                    1i8
                } else {
                    -1
                }
            })
            .collect();
        Self { l, spins }
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn magnetization_per_site(&self) -> f64 {
        self.spins.iter().map(|&s| s as f64).sum::<f64>() / self.spins.len() as f64
    }

    /// Encode as a token sequence: -1 -> 0, +1 -> 1, row-major, M = L^2.
    pub fn to_token_seq(&self) -> TokenSeq {
        let tokens = self.spins.iter().map(|&s| if s > 0 { 1u16 } else { 0 }).collect();
        TokenSeq::new(tokens, 2).expect("valid binary tokens")
    }
}

/// Total energy with every nearest-neighbor edge counted once (right and
/// down neighbors of each site, periodic wrap).
pub fn energy(sys: &IsingSystem, cfg: &SpinConfig) -> f64 {
    let l = sys.l;
    let mut sum = 0i64;
    for r in 0..l {
        for c in 0..l {
            let s = cfg.spins[r * l + c] as i64;
            let right = cfg.spins[r * l + (c + 1) % l] as i64;
            let down = cfg.spins[((r + 1) % l) * l + c] as i64;
            sum += s * (right + down);
        }
    }
    -sys.j * sum as f64
}

/// Energy change from flipping `site`: `2 J s_i sum_{j in nbrs} s_j`, with
/// the four periodic neighbors (repeats included on small lattices).
pub fn delta_energy(sys: &IsingSystem, cfg: &SpinConfig, site: usize) -> f64 {
    let l = sys.l;
    let (r, c) = (site / l, site % l);
    let nbrs = cfg.spins[r * l + (c + 1) % l] as i64
        + cfg.spins[r * l + (c + l - 1) % l] as i64
        + cfg.spins[((r + 1) % l) * l + c] as i64
        + cfg.spins[((r + l - 1) % l) * l + c] as i64;
    2.0 * sys.j * cfg.spins[site] as f64 * nbrs as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpinInit {
    Random,
    Up,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetropolisConfig {
    /// Sweeps (L^2 proposals each) discarded before recording.
    pub n_burn_sweeps: usize,
    pub n_samples: usize,
    /// Sweeps between consecutive recorded samples.
    pub sweeps_between: usize,
    pub init: SpinInit,
    pub seed: u64,
}

impl Default for MetropolisConfig {
    fn default() -> Self {
        Self {
            n_burn_sweeps: 1000,
            n_samples: 10_000,
            sweeps_between: 10,
            init: SpinInit::Random,
            seed: 0,
        }
    }
}

fn sweep(sys: &IsingSystem, cfg: &mut SpinConfig, beta: f64, rng: &mut Stream) {
    let sites = sys.sites();
    for _ in 0..sites {
        let site = rng.random_range(0..sites);
        let de = delta_energy(sys, cfg, site);
        let r: f64 = rng.random();
        if r < (-beta * de).exp() {
            cfg.spins[site] = -cfg.spins[site];
        }
    }
}

/// Single-site Metropolis chain; returns `n_samples` configurations encoded
/// as token sequences (M = L^2, N = 2). A single chain is strictly
/// sequential; parallelism across temperatures is the caller's business.
pub fn metropolis_sample(sys: &IsingSystem, cfg: &MetropolisConfig) -> Result<Vec<TokenSeq>> {
    if cfg.n_samples == 0 || cfg.sweeps_between == 0 {
        return Err(Error::InvalidInput(
            "n_samples and sweeps_between must be >= 1".into(),
        ));
    }
    let mut rng = stream_rng(cfg.seed, 0);
    let mut state = match cfg.init {
        SpinInit::Random => SpinConfig::random(sys.l, &mut rng),
        SpinInit::Up => SpinConfig::all_up(sys.l),
    };
    let beta = sys.beta();
    for _ in 0..cfg.n_burn_sweeps {
        sweep(sys, &mut state, beta, &mut rng);
    }
    let mut out = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        for _ in 0..cfg.sweeps_between {
            sweep(sys, &mut state, beta, &mut rng);
        }
        out.push(state.to_token_seq());
    }
    Ok(out)
}

/// `ln lambda(T)`: logarithm of the partition function per site in the
/// thermodynamic limit,
/// `ln 2 + (1/(2 pi^2)) int_0^pi int_0^pi ln(cosh^2(2 b J) - sinh(2 b J)(cos t1 + cos t2))`,
/// by tensor-product Gauss–Legendre quadrature. The integrand's log
/// singularity at the critical point is integrable and the nodes never hit
/// it, so the same rule works across the whole temperature range.
pub fn onsager_log_lambda(temperature: f64, j: f64, nodes: usize) -> f64 {
    let beta = 1.0 / temperature;
    let k = 2.0 * beta * j;
    let cosh2 = k.cosh() * k.cosh();
    let sinh = k.sinh();
    let pts = gauss_legendre_on(0.0, std::f64::consts::PI, nodes);
    let mut integral = 0.0;
    for &(t1, w1) in &pts {
        let c1 = t1.cos();
        let mut inner = 0.0;
        for &(t2, w2) in &pts {
            inner += w2 * (cosh2 - sinh * (c1 + t2.cos())).ln();
        }
        integral += w1 * inner;
    }
    std::f64::consts::LN_2 + integral / (2.0 * std::f64::consts::PI * std::f64::consts::PI)
}

/// Free energy per site `F(T) = -k_B T ln lambda(T)` (k_B = 1).
pub fn onsager_free_energy(temperature: f64, j: f64, nodes: usize) -> f64 {
    -temperature * onsager_log_lambda(temperature, j, nodes)
}

/// Entropy per site in nats via `H = -dF/dT`, central finite difference
/// with the stated step: `H ~= (F(T - dT) - F(T + dT)) / (2 dT)`.
pub fn onsager_entropy_per_site(temperature: f64, delta_t: f64, nodes: usize) -> Result<f64> {
    if !(temperature - delta_t > 0.0) {
        return Err(Error::Domain(format!(
            "need T - delta_T > 0, got T = {temperature}, delta_T = {delta_t}"
        )));
    }
    let lo = onsager_free_energy(temperature - delta_t, 1.0, nodes);
    let hi = onsager_free_energy(temperature + delta_t, 1.0, nodes);
    Ok((lo - hi) / (2.0 * delta_t))
}

/// Default finite-difference step from the reference procedure.
pub const ONSAGER_DELTA_T: f64 = 1e-4;
/// Default per-axis quadrature order.
pub const ONSAGER_NODES: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsingExperimentConfig {
    pub l: usize,
    pub temperatures: Vec<f64>,
    pub metropolis: MetropolisConfig,
    pub net_width: usize,
    pub net_depth: usize,
    pub schedule: NoiseSchedule,
    pub train: TrainConfig,
    pub estimator: EstimatorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsingRow {
    pub temperature: f64,
    pub h_est_per_site: f64,
    pub h_stderr_per_site: f64,
    pub h_analytic_per_site: f64,
}

/// One temperature of the experiment: sample the lattice, train a score
/// network on the configurations, estimate the entropy, and normalize per
/// site. Returns the row plus the full estimate report.
pub fn run_ising_temperature(
    cfg: &IsingExperimentConfig,
    index: usize,
) -> Result<(IsingRow, EstimateReport)> {
    let temperature = cfg.temperatures[index];
    let sys = IsingSystem::new(cfg.l, 1.0, temperature)?;
    let sites = sys.sites();
    let mcfg = MetropolisConfig {
        seed: cfg.metropolis.seed.wrapping_add(index as u64),
        ..cfg.metropolis.clone()
    };
    let rows = metropolis_sample(&sys, &mcfg)?;
    let spec = ScoreNetSpec::new(sites, 2, cfg.net_width, cfg.net_depth)?;
    let tcfg = TrainConfig { seed: cfg.train.seed.wrapping_add(index as u64), ..cfg.train.clone() };
    let net = ScoreNet::init(spec, cfg.schedule, tcfg.seed);
    let trained = train(net, &rows, &tcfg)?;
    let source = FrozenScoreSource::new(trained.net);
    let sampler = RowsSource::new(rows)?;
    let ecfg = EstimatorConfig {
        seed: cfg.estimator.seed.wrapping_add(index as u64),
        ..cfg.estimator.clone()
    };
    let report = estimate_entropy(&source, &sampler, &cfg.schedule, &ecfg)?;
    let row = IsingRow {
        temperature,
        h_est_per_site: report.estimate / sites as f64,
        h_stderr_per_site: report.stderr / sites as f64,
        h_analytic_per_site: onsager_entropy_per_site(temperature, ONSAGER_DELTA_T, ONSAGER_NODES)?,
    };
    Ok((row, report))
}

/// Full experiment across the temperature grid (ascending), one row each.
pub fn run_ising_experiment(cfg: &IsingExperimentConfig) -> Result<Vec<IsingRow>> {
    if cfg.temperatures.is_empty() {
        return Err(Error::InvalidInput("empty temperature grid".into()));
    }
    let mut order: Vec<usize> = (0..cfg.temperatures.len()).collect();
    order.sort_by(|&a, &b| cfg.temperatures[a].partial_cmp(&cfg.temperatures[b]).unwrap());
    let mut rows = Vec::with_capacity(order.len());
    for idx in order {
        let (row, _) = run_ising_temperature(cfg, idx)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn ising_csv_header() -> &'static str {
    "T,H_est,H_stderr,H_analytic"
}

pub fn ising_csv_row(row: &IsingRow) -> String {
    format!(
        "{},{},{},{}",
        row.temperature, row.h_est_per_site, row.h_stderr_per_site, row.h_analytic_per_site
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_of_reference_configurations() {
        let sys = IsingSystem::new(4, 1.0, 2.0).unwrap();
        // all aligned: 2 L^2 edges, every product +1
        assert_eq!(energy(&sys, &SpinConfig::all_up(4)), -32.0);
        // checkerboard on an even lattice: every product -1
        assert_eq!(energy(&sys, &SpinConfig::checkerboard(4)), 32.0);
    }

    #[test]
    fn single_flip_from_all_up_costs_eight() {
        let sys = IsingSystem::new(4, 1.0, 2.0).unwrap();
        let cfg = SpinConfig::all_up(4);
        assert_eq!(delta_energy(&sys, &cfg, 5), 8.0);
    }

    #[test]
    fn delta_energy_consistent_with_energy_difference() {
        let sys = IsingSystem::new(5, 1.0, 2.5).unwrap();
        let mut rng = stream_rng(1, 0);
        for _ in 0..1000 {
            let mut cfg = SpinConfig::random(5, &mut rng);
            let site = rng.random_range(0..sys.sites());
            let before = energy(&sys, &cfg);
            let de = delta_energy(&sys, &cfg, site);
            cfg.spins[site] = -cfg.spins[site];
            let after = energy(&sys, &cfg);
            assert!((after - before - de).abs() < 1e-12);
        }
    }

    /// Exact Boltzmann distribution of the 2x2 lattice (16 states).
    fn boltzmann_2x2(temperature: f64) -> Vec<f64> {
        let sys = IsingSystem::new(2, 1.0, temperature).unwrap();
        let mut weights = Vec::with_capacity(16);
        for bits in 0..16u32 {
            let spins: Vec<i8> = (0..4).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect();
            let cfg = SpinConfig { l: 2, spins };
            weights.push((-sys.beta() * energy(&sys, &cfg)).exp());
        }
        let z: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / z).collect()
    }

    #[test]
    fn metropolis_matches_exact_boltzmann_on_2x2() {
        let sys = IsingSystem::new(2, 1.0, 2.5).unwrap();
        let cfg = MetropolisConfig {
            n_burn_sweeps: 200,
            n_samples: 200_000,
            sweeps_between: 2,
            init: SpinInit::Random,
            seed: 3,
        };
        let rows = metropolis_sample(&sys, &cfg).unwrap();
        let mut counts = vec![0usize; 16];
        for r in &rows {
            let mut bits = 0usize;
            for i in 0..4 {
                bits |= (r.get(i) as usize) << i;
            }
            counts[bits] += 1;
        }
        let truth = boltzmann_2x2(2.5);
        let tv: f64 = counts
            .iter()
            .zip(truth.iter())
            .map(|(&c, &p)| (c as f64 / rows.len() as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.015, "tv = {tv}");
    }

    #[test]
    fn high_temperature_is_disordered() {
        // i.i.d. fair coins give E|m| ~ sqrt(2 / (pi L^2)) = 0.04 at L = 20
        let sys = IsingSystem::new(20, 1.0, 100.0).unwrap();
        let cfg = MetropolisConfig {
            n_burn_sweeps: 100,
            n_samples: 2000,
            sweeps_between: 2,
            init: SpinInit::Random,
            seed: 4,
        };
        let rows = metropolis_sample(&sys, &cfg).unwrap();
        let mean_abs_mag: f64 = rows
            .iter()
            .map(|r| {
                let up = r.tokens().iter().filter(|&&t| t == 1).count() as f64;
                (2.0 * up / r.len() as f64 - 1.0).abs()
            })
            .sum::<f64>()
            / rows.len() as f64;
        assert!(mean_abs_mag < 0.05, "mean |m| = {mean_abs_mag}");
    }

    #[test]
    fn low_temperature_stays_magnetized() {
        let sys = IsingSystem::new(6, 1.0, 0.5).unwrap();
        let cfg = MetropolisConfig {
            n_burn_sweeps: 0,
            n_samples: 1000,
            sweeps_between: 1,
            init: SpinInit::Up,
            seed: 5,
        };
        let rows = metropolis_sample(&sys, &cfg).unwrap();
        for r in rows {
            let up = r.tokens().iter().filter(|&&t| t == 1).count() as f64;
            let m = 2.0 * up / r.len() as f64 - 1.0;
            assert!(m > 0.95, "m = {m}");
        }
    }

    #[test]
    fn onsager_limits_and_monotonicity() {
        // infinite-temperature limit of a spin-1/2 site
        let h100 = onsager_entropy_per_site(100.0, ONSAGER_DELTA_T, ONSAGER_NODES).unwrap();
        assert!((h100 - std::f64::consts::LN_2).abs() < 0.005, "H(100) = {h100}");
        // ordered phase
        let h05 = onsager_entropy_per_site(0.5, ONSAGER_DELTA_T, ONSAGER_NODES).unwrap();
        assert!(h05.abs() < 0.01, "H(0.5) = {h05}");
        // monotone on the experiment grid
        let mut prev = -1.0;
        let mut t = 1.0;
        while t <= 4.01 {
            let h = onsager_entropy_per_site(t, ONSAGER_DELTA_T, ONSAGER_NODES).unwrap();
            assert!(h > prev, "H({t}) = {h} not above H at previous T {prev}");
            prev = h;
            t += 0.5;
        }
        assert!(onsager_entropy_per_site(1e-5, 1e-4, 64).is_err());
    }

    #[test]
    fn onsager_quadrature_converges_with_node_count() {
        for (t, tol) in [(1.5, 1e-6), (3.0, 1e-6), (2.27, 1e-3)] {
            let coarse = onsager_entropy_per_site(t, ONSAGER_DELTA_T, 256).unwrap();
            let fine = onsager_entropy_per_site(t, ONSAGER_DELTA_T, 512).unwrap();
            assert!(
                (coarse - fine).abs() < tol,
                "T = {t}: 256 nodes {coarse} vs 512 nodes {fine}"
            );
        }
    }
}
