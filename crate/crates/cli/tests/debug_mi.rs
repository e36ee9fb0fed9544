//! scratch diagnosis (not part of the suite): seed sensitivity of the MI rows
use diffinfo_core::ctmc::NoiseSchedule;
use diffinfo_core::dataset::RowsSource;
use diffinfo_core::estimators::{estimate_mi, EstimatorConfig};
use diffinfo_core::rng::stream_rng;
use diffinfo_core::score::{train, FrozenScoreSource, ScoreNet, ScoreNetSpec, TrainConfig};
use diffinfo_core::synth::preset_mi_sweep;

#[test]
#[ignore]
fn mi1_seed_sensitivity() {
    let source = preset_mi_sweep(1.0, 10, 51).unwrap();
    let rows: Vec<_> = (0..100_000)
        .map(|r| source.sampler.sample(&mut stream_rng(51, r as u64)))
        .collect();
    for train_seed in [53u64, 61, 77] {
        let spec = ScoreNetSpec::new(20, 2, 64, 2).unwrap();
        let net = ScoreNet::init(spec, NoiseSchedule::default_geometric(), train_seed + 1000);
        let tcfg = TrainConfig {
            steps: 4000,
            batch_size: 128,
            learning_rate: 1e-2,
            eval_every: 400,
            seed: train_seed,
            ..Default::default()
        };
        let out = train(net, &rows, &tcfg).unwrap();
        let trace: Vec<String> = out.loss_trace.iter().map(|(s, l)| format!("{s}:{l:.3}")).collect();
        let frozen = FrozenScoreSource::new(out.net);
        let sampler = RowsSource::new(rows.clone()).unwrap();
        let cfg = EstimatorConfig { n_samples: 50_000, time_strata: 64, seed: 999, score_batch: 1024 };
        let rep = estimate_mi(&frozen, 10, &sampler, &NoiseSchedule::default_geometric(), &cfg).unwrap();
        println!(
            "train_seed {train_seed}: estimate {:.4} +- {:.4}; trace {}",
            rep.estimate,
            rep.stderr,
            trace.join(" ")
        );
    }
}
