//! Command-line front end: dataset generation, score-model training,
//! estimation, the lattice entropy experiment, and the built-in selftest,
//! all driven by a shared JSON config envelope with flag overrides.
//!
//! Every run writes a resolved-config copy next to its outputs so results
//! are reproducible from the artifacts alone. Exit codes: 0 ok,
//! 1 computation fault, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use diffinfo_core::ctmc::NoiseSchedule;
use diffinfo_core::dataset::{read_dataset, RowsSource};
use diffinfo_core::error::Error;
use diffinfo_core::estimators::{
    estimate_entropy, estimate_kl, estimate_mi, EstimateReport, EstimatorConfig, SampleSource,
};
use diffinfo_core::exact::{ExactPMF, ExactScoreSource};
use diffinfo_core::ising::{
    ising_csv_header, ising_csv_row, run_ising_experiment, IsingExperimentConfig,
    MetropolisConfig, SpinInit,
};
use diffinfo_core::score::{
    checkpoint_load, checkpoint_load_expecting, checkpoint_save, train, FloatMode,
    FrozenScoreSource, ScoreNet, ScoreNetSpec, ScoreSource, TrainConfig,
};
use diffinfo_core::selftest::run_selftest;
use diffinfo_core::synth::{
    preset_bernoulli_product, preset_length_sweep, preset_mi_sweep, preset_support_sweep,
    preset_uniform, sample_dataset, GeneratedSource,
};

const OUT_DIR_ENV: &str = "DIFFINFO_OUT_DIR";

#[derive(Parser)]
#[command(name = "diffinfo", version, about = "Discrete information-measure estimation via absorbing diffusion")]
struct Cli {
    /// JSON config file with the shared envelope
    /// {seed, out_dir, schedule, estimator, train}; flags override fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed for the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: $DIFFINFO_OUT_DIR or the current directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark dataset (presets or an explicit pmf file).
    Gen(GenArgs),
    /// Train a score network on a dataset.
    Train(TrainArgs),
    /// Estimate mutual information, entropy, or KL divergence.
    #[command(subcommand)]
    Estimate(EstimateCmd),
    /// Run the lattice entropy experiment end to end.
    Ising(IsingArgs),
    /// Run the oracle invariant suites.
    Selftest,
}

#[derive(Args)]
struct GenArgs {
    /// Preset: support-sweep | length-sweep | mi-sweep | bernoulli | uniform.
    #[arg(long, conflicts_with = "pmf")]
    preset: Option<String>,

    /// Explicit pmf JSON file to sample from.
    #[arg(long)]
    pmf: Option<PathBuf>,

    /// Target mutual information (presets).
    #[arg(long, default_value_t = 0.5)]
    mi: f64,

    /// Per-side support size (support-sweep).
    #[arg(long, default_value_t = 2)]
    support: usize,

    /// Token length: total for length-sweep, per side for mi-sweep,
    /// sites for bernoulli/uniform.
    #[arg(long, default_value_t = 2)]
    length: usize,

    /// Success probability for the bernoulli preset.
    #[arg(long, default_value_t = 0.2)]
    p: f64,

    #[arg(long, default_value_t = 100_000)]
    rows: usize,

    /// Output base name (creates <name>.json/<name>.bin).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset base path (the .json/.bin pair).
    #[arg(long)]
    data: PathBuf,

    /// Checkpoint output path (default <out_dir>/<data-stem>.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Resume from an existing checkpoint instead of a fresh init.
    #[arg(long)]
    resume: Option<PathBuf>,

    #[arg(long)]
    width: Option<usize>,

    #[arg(long)]
    depth: Option<usize>,

    #[arg(long)]
    steps: Option<usize>,

    #[arg(long)]
    batch_size: Option<usize>,

    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Subcommand)]
enum EstimateCmd {
    /// Mutual information between the X and Y blocks of the data.
    Mi(EstimateArgs),
    /// Entropy (via the KL divergence from the uniform distribution).
    Entropy(EstimateArgs),
    /// KL divergence between two score sources.
    Kl(EstimateArgs),
}

#[derive(Args)]
struct EstimateArgs {
    /// Dataset base path used as the sample source (and shape reference).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Trained checkpoint for the p-side scores.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Exact pmf JSON for the p-side scores (oracle mode, bypasses training).
    #[arg(long)]
    exact: Option<PathBuf>,

    /// Trained checkpoint for the q-side scores (kl only).
    #[arg(long)]
    checkpoint_q: Option<PathBuf>,

    /// Exact pmf JSON for the q-side scores (kl only).
    #[arg(long)]
    exact_q: Option<PathBuf>,

    /// X|Y boundary; defaults to the dataset or pmf header value.
    #[arg(long)]
    block_split: Option<usize>,

    #[arg(long)]
    n_samples: Option<usize>,

    /// Time strata count (1 = plain uniform time sampling).
    #[arg(long)]
    strata: Option<usize>,

    /// Label for the report files and the results CSV row.
    #[arg(long, default_value = "run")]
    experiment_id: String,
}

#[derive(Args)]
struct IsingArgs {
    #[arg(long, default_value_t = 10)]
    lattice: usize,

    /// Comma-separated temperature grid.
    #[arg(long, default_value = "2.0,3.5")]
    temps: String,

    #[arg(long, default_value_t = 10_000)]
    samples_per_temp: usize,

    #[arg(long, default_value_t = 1000)]
    burn_sweeps: usize,

    #[arg(long, default_value_t = 10)]
    sweeps_between: usize,

    #[arg(long)]
    width: Option<usize>,

    #[arg(long)]
    depth: Option<usize>,

    #[arg(long)]
    steps: Option<usize>,

    #[arg(long, default_value = "ising")]
    name: String,
}

/// The shared config-file envelope. Every field is optional; flags override.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct FileConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    schedule: Option<NoiseSchedule>,
    estimator: Option<EstimatorConfig>,
    train: Option<TrainFileConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainFileConfig {
    #[serde(default)]
    width: Option<usize>,
    #[serde(default)]
    depth: Option<usize>,
    #[serde(flatten)]
    train: TrainConfig,
}

/// Everything a command actually ran with.
struct Env {
    seed: u64,
    out_dir: PathBuf,
    schedule: NoiseSchedule,
    estimator: EstimatorConfig,
    train: TrainConfig,
    net_width: usize,
    net_depth: usize,
}

fn resolve_env(cli: &Cli) -> Result<Env, Error> {
    let file: FileConfig = match &cli.config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        )
        .map_err(|e| Error::Format(format!("config: {e}")))?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let out_dir = cli
        .out_dir
        .clone()
        .or(file.out_dir)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let schedule = file.schedule.unwrap_or_else(NoiseSchedule::default_geometric);
    schedule.validate_absorbing()?;
    let mut estimator = file.estimator.unwrap_or_default();
    estimator.seed = seed;
    let (net_width, net_depth, train) = match file.train {
        Some(t) => (t.width.unwrap_or(64), t.depth.unwrap_or(2), t.train),
        None => (64, 2, TrainConfig { seed, ..Default::default() }),
    };
    Ok(Env { seed, out_dir, schedule, estimator, train, net_width, net_depth })
}

fn write_resolved_config<T: Serialize>(
    env: &Env,
    name: &str,
    command: &str,
    params: &T,
) -> Result<PathBuf, Error> {
    #[derive(Serialize)]
    struct Resolved<'a, T> {
        command: &'a str,
        seed: u64,
        schedule: &'a NoiseSchedule,
        params: &'a T,
    }
    std::fs::create_dir_all(&env.out_dir)?;
    let path = env.out_dir.join(format!("{name}.config.json"));
    let body = serde_json::to_string_pretty(&Resolved {
        command,
        seed: env.seed,
        schedule: &env.schedule,
        params,
    })?;
    std::fs::write(&path, body)?;
    Ok(path)
}

fn cmd_gen(env: &Env, args: &GenArgs) -> Result<(), Error> {
    let name = args.name.clone().unwrap_or_else(|| {
        args.preset.clone().unwrap_or_else(|| "dataset".into())
    });
    let source: GeneratedSource = if let Some(pmf_path) = &args.pmf {
        let pmf = ExactPMF::read_json_file(pmf_path)?;
        let mi = pmf.block_split().and_then(|_| diffinfo_core::exact::exact_mi(&pmf).ok());
        GeneratedSource {
            m: pmf.m(),
            n: pmf.n(),
            block_split: pmf.block_split(),
            ground_truth_mi: mi,
            ground_truth_entropy: Some(diffinfo_core::exact::exact_entropy(&pmf)),
            sampler: Box::new(pmf.sampler()),
            exact: Some(pmf),
        }
    } else {
        match args.preset.as_deref() {
            Some("support-sweep") => preset_support_sweep(args.mi, args.support, env.seed)?,
            Some("length-sweep") => preset_length_sweep(args.mi, args.length, env.seed)?,
            Some("mi-sweep") => preset_mi_sweep(args.mi, args.length, env.seed)?,
            Some("bernoulli") => preset_bernoulli_product(args.p, args.length)?,
            Some("uniform") => preset_uniform(args.length, args.support as u16)?,
            Some(other) => {
                return Err(Error::InvalidInput(format!("unknown preset '{other}'")))
            }
            None => {
                return Err(Error::InvalidInput(
                    "gen needs either --preset or --pmf".into(),
                ))
            }
        }
    };
    #[derive(Serialize)]
    struct GenParams<'a> {
        preset: Option<&'a String>,
        pmf: Option<&'a PathBuf>,
        mi: f64,
        support: usize,
        length: usize,
        p: f64,
        rows: usize,
    }
    write_resolved_config(
        env,
        &name,
        "gen",
        &GenParams {
            preset: args.preset.as_ref(),
            pmf: args.pmf.as_ref(),
            mi: args.mi,
            support: args.support,
            length: args.length,
            p: args.p,
            rows: args.rows,
        },
    )?;
    let base = env.out_dir.join(&name);
    let header = sample_dataset(
        source.sampler.as_ref(),
        args.rows,
        env.seed,
        source.block_split,
        source.ground_truth_mi,
        source.ground_truth_entropy,
        &base,
    )?;
    if let Some(exact) = &source.exact {
        exact.write_json_file(&env.out_dir.join(format!("{name}.pmf.json")))?;
    }
    println!(
        "wrote {} rows to {} (M = {}, N = {}, ground-truth MI = {:?}, entropy = {:?})",
        header.n_rows,
        base.display(),
        header.m,
        header.n,
        header.ground_truth_mi,
        header.ground_truth_entropy,
    );
    Ok(())
}

fn cmd_train(env: &Env, args: &TrainArgs) -> Result<(), Error> {
    let (header, rows) = read_dataset(&args.data)?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| {
        let stem = args
            .data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        env.out_dir.join(format!("{stem}.ckpt"))
    });
    let mut tcfg = env.train.clone();
    if let Some(s) = args.steps {
        tcfg.steps = s;
    }
    if let Some(b) = args.batch_size {
        tcfg.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        tcfg.learning_rate = lr;
    }
    let width = args.width.unwrap_or(env.net_width);
    let depth = args.depth.unwrap_or(env.net_depth);
    let net = match &args.resume {
        Some(path) => checkpoint_load_expecting(path, header.m, header.n as usize)?,
        None => ScoreNet::init(
            ScoreNetSpec::new(header.m, header.n as usize, width, depth)?,
            env.schedule,
            tcfg.seed,
        ),
    };
    let run_name = ckpt_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "train".into());
    #[derive(Serialize)]
    struct TrainParams<'a> {
        data: &'a PathBuf,
        checkpoint: &'a PathBuf,
        resume: Option<&'a PathBuf>,
        width: usize,
        depth: usize,
        train: &'a TrainConfig,
    }
    write_resolved_config(
        env,
        &run_name,
        "train",
        &TrainParams {
            data: &args.data,
            checkpoint: &ckpt_path,
            resume: args.resume.as_ref(),
            width,
            depth,
            train: &tcfg,
        },
    )?;
    let started = std::time::Instant::now();
    match train(net, &rows, &tcfg) {
        Ok(out) => {
            checkpoint_save(&out.net, &ckpt_path, FloatMode::F32)?;
            let mut csv = String::from("step,loss\n");
            for (step, loss) in &out.loss_trace {
                csv.push_str(&format!("{step},{loss}\n"));
            }
            let loss_path = ckpt_path.with_extension("loss.csv");
            std::fs::write(&loss_path, csv)?;
            println!(
                "trained {} steps in {:.1}s; final batch loss {:.6}; checkpoint {}",
                tcfg.steps,
                started.elapsed().as_secs_f64(),
                out.loss_trace.last().map(|(_, l)| *l).unwrap_or(f64::NAN),
                ckpt_path.display()
            );
            Ok(())
        }
        Err(Error::TrainDiverged { step, what, last_valid }) => {
            checkpoint_save(&last_valid, &ckpt_path, FloatMode::F32)?;
            eprintln!(
                "training diverged at step {step} ({what}); last valid checkpoint written to {}",
                ckpt_path.display()
            );
            Err(Error::NumericFault(format!("training diverged at step {step}: {what}")))
        }
        Err(e) => Err(e),
    }
}

/// One side of an estimate: either a frozen trained network or the exact
/// engine over a pmf file.
enum Side {
    Net(Box<FrozenScoreSource>),
    Exact(Box<ExactScoreSource>, ExactPMF),
}

impl Side {
    fn source(&self) -> &dyn ScoreSource {
        match self {
            Side::Net(n) => n.as_ref(),
            Side::Exact(s, _) => s.as_ref(),
        }
    }
}

fn load_side(
    env: &Env,
    checkpoint: Option<&PathBuf>,
    exact: Option<&PathBuf>,
    expect: Option<(usize, usize)>,
) -> Result<Side, Error> {
    match (checkpoint, exact) {
        (Some(_), Some(_)) => Err(Error::InvalidInput(
            "give either --checkpoint or --exact, not both".into(),
        )),
        (Some(ckpt), None) => {
            let net = match expect {
                Some((m, n)) => checkpoint_load_expecting(ckpt, m, n)?,
                None => checkpoint_load(ckpt)?,
            };
            Ok(Side::Net(Box::new(FrozenScoreSource::new(net))))
        }
        (None, Some(pmf_path)) => {
            let pmf = ExactPMF::read_json_file(pmf_path)?;
            if let Some((m, n)) = expect {
                if pmf.m() != m || pmf.n() as usize != n {
                    return Err(Error::ShapeMismatch {
                        expected: format!("({m}, {n})"),
                        got: format!("({}, {}) in {}", pmf.m(), pmf.n(), pmf_path.display()),
                    });
                }
            }
            let source = ExactScoreSource::new(&pmf, env.schedule)?;
            Ok(Side::Exact(Box::new(source), pmf))
        }
        (None, None) => Err(Error::InvalidInput(
            "need a score source: --checkpoint or --exact".into(),
        )),
    }
}

fn cmd_estimate(env: &Env, cmd: &EstimateCmd) -> Result<(), Error> {
    let (kind, args) = match cmd {
        EstimateCmd::Mi(a) => ("mi", a),
        EstimateCmd::Entropy(a) => ("entropy", a),
        EstimateCmd::Kl(a) => ("kl", a),
    };
    let mut ecfg = env.estimator.clone();
    if let Some(n) = args.n_samples {
        ecfg.n_samples = n;
    }
    if let Some(s) = args.strata {
        ecfg.time_strata = s;
    }

    // sample source and shape reference: dataset if given, else the exact pmf
    let dataset = args.data.as_deref().map(read_dataset).transpose()?;
    let p_side = load_side(
        env,
        args.checkpoint.as_ref(),
        args.exact.as_ref(),
        dataset.as_ref().map(|(h, _)| (h.m, h.n as usize)),
    )?;
    let (sampler, header_split): (Box<dyn SampleSource>, Option<usize>) = match (&dataset, &p_side)
    {
        (Some((header, rows)), _) => (
            Box::new(RowsSource::new(rows.clone())?),
            header.block_split,
        ),
        (None, Side::Exact(_, pmf)) => (Box::new(pmf.sampler()), pmf.block_split()),
        (None, Side::Net(_)) => {
            return Err(Error::InvalidInput(
                "a trained checkpoint needs --data to sample from".into(),
            ))
        }
    };

    #[derive(Serialize)]
    struct EstimateParams<'a> {
        quantity: &'a str,
        data: Option<&'a PathBuf>,
        checkpoint: Option<&'a PathBuf>,
        exact: Option<&'a PathBuf>,
        checkpoint_q: Option<&'a PathBuf>,
        exact_q: Option<&'a PathBuf>,
        block_split: Option<usize>,
        estimator: &'a EstimatorConfig,
    }
    write_resolved_config(
        env,
        &args.experiment_id,
        "estimate",
        &EstimateParams {
            quantity: kind,
            data: args.data.as_ref(),
            checkpoint: args.checkpoint.as_ref(),
            exact: args.exact.as_ref(),
            checkpoint_q: args.checkpoint_q.as_ref(),
            exact_q: args.exact_q.as_ref(),
            block_split: args.block_split.or(header_split),
            estimator: &ecfg,
        },
    )?;

    let report: EstimateReport = match kind {
        "mi" => {
            let split = args.block_split.or(header_split).ok_or_else(|| {
                Error::InvalidInput("mi needs --block-split (or a dataset/pmf that records it)".into())
            })?;
            estimate_mi(p_side.source(), split, sampler.as_ref(), &env.schedule, &ecfg)?
        }
        "entropy" => estimate_entropy(p_side.source(), sampler.as_ref(), &env.schedule, &ecfg)?,
        "kl" => {
            let shape = p_side.source().shape();
            let q_side = load_side(
                env,
                args.checkpoint_q.as_ref(),
                args.exact_q.as_ref(),
                Some(shape),
            )?;
            estimate_kl(
                p_side.source(),
                q_side.source(),
                sampler.as_ref(),
                &env.schedule,
                &ecfg,
            )?
        }
        _ => unreachable!(),
    };

    let report_path = env.out_dir.join(format!("{}.report.json", args.experiment_id));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    let row = report.csv_row(&args.experiment_id);
    let row_path = env.out_dir.join(format!("{}.csv", args.experiment_id));
    std::fs::write(&row_path, format!("{}\n{row}\n", EstimateReport::csv_header()))?;
    let results = env.out_dir.join("results.csv");
    let mut accumulated = if results.exists() {
        std::fs::read_to_string(&results)?
    } else {
        format!("{}\n", EstimateReport::csv_header())
    };
    accumulated.push_str(&row);
    accumulated.push('\n');
    std::fs::write(&results, accumulated)?;
    println!(
        "{kind}: estimate {} +- {} (n = {}, {:.1}s); report {}",
        report.estimate,
        report.stderr,
        report.n_samples,
        report.wall_time_secs,
        report_path.display()
    );
    for (k, v) in &report.extra {
        println!("  {k}: {v}");
    }
    Ok(())
}

fn cmd_ising(env: &Env, args: &IsingArgs) -> Result<(), Error> {
    let temperatures: Result<Vec<f64>, _> = args
        .temps
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect();
    let temperatures =
        temperatures.map_err(|e| Error::InvalidInput(format!("bad temperature grid: {e}")))?;
    let cfg = IsingExperimentConfig {
        l: args.lattice,
        temperatures,
        metropolis: MetropolisConfig {
            n_burn_sweeps: args.burn_sweeps,
            n_samples: args.samples_per_temp,
            sweeps_between: args.sweeps_between,
            init: SpinInit::Random,
            seed: env.seed,
        },
        net_width: args.width.unwrap_or(env.net_width),
        net_depth: args.depth.unwrap_or(env.net_depth),
        schedule: env.schedule,
        train: {
            let mut t = env.train.clone();
            if let Some(s) = args.steps {
                t.steps = s;
            }
            t
        },
        estimator: env.estimator.clone(),
    };
    write_resolved_config(env, &args.name, "ising", &cfg)?;
    let rows = run_ising_experiment(&cfg)?;
    let mut csv = format!("{}\n", ising_csv_header());
    println!("{}", ising_csv_header());
    for row in &rows {
        let line = ising_csv_row(row);
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    let csv_path = env.out_dir.join(format!("{}.csv", args.name));
    std::fs::write(&csv_path, csv)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_selftest() -> Result<(), Error> {
    let started = std::time::Instant::now();
    let results = run_selftest();
    let mut failures = 0usize;
    for r in &results {
        if r.ok() {
            println!("{}: PASS ({} checks)", r.name, r.passed);
        } else {
            failures += 1;
            println!(
                "{}: FAIL ({} of {} checks failed; first: {})",
                r.name,
                r.failed,
                r.passed + r.failed,
                r.detail
            );
        }
    }
    println!("selftest finished in {:.1}s", started.elapsed().as_secs_f64());
    if failures > 0 {
        return Err(Error::NumericFault(format!("{failures} suites failed")));
    }
    Ok(())
}

/// 2 for bad input/usage, 1 for computation faults.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_)
        | Error::Format(_)
        | Error::ShapeMismatch { .. }
        | Error::Domain(_)
        | Error::Range(_)
        | Error::Io(_)
        | Error::Json(_) => 2,
        Error::NumericFault(_)
        | Error::TrainDiverged { .. }
        | Error::NonConverged(_)
        | Error::Singularity(_)
        | Error::ScaleBound { .. }
        | Error::AbsoluteContinuity(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    let env = match resolve_env(&cli) {
        Ok(env) => env,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(&env, args),
        Command::Train(args) => cmd_train(&env, args),
        Command::Estimate(cmd) => cmd_estimate(&env, cmd),
        Command::Ising(args) => cmd_ising(&env, args),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
