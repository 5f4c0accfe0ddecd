//! End-to-end training behavior: surrogate/hard rate agreement after
//! convergence, the identity probe on trained checkpoints, and the wiring of
//! the source-model context modes.

use ratelab_core::codec::{CodecArch, CodecModel, NoiseSource};
use ratelab_core::eval::probe::{identity_probe, ProbeGrid};
use ratelab_core::rng::{stream, StreamKind};
use ratelab_core::source_model::ContextMode;
use ratelab_core::sources::{default_gauss_mix, SourceSpec};
use ratelab_core::trainer::{train_one, RunStatus, SourceModelConfig, TrainConfig, TrainOpts};

fn quick_config(dim: usize, latent: usize, steps: u64) -> TrainConfig {
    TrainConfig {
        lambdas: vec![0.01],
        alphas: vec![0.0],
        seeds: vec![1],
        steps,
        batch_size: 64,
        eval_every: steps.max(1),
        dataset_size: 2_000,
        codec_lr: 1e-3,
        source_lr: 1e-3,
        stage2_period: 1,
        source: default_gauss_mix(dim),
        codec: CodecArch {
            input_dim: dim,
            hidden: vec![16, 16],
            latent_dim: latent,
        },
        source_model: SourceModelConfig {
            hidden: vec![16],
            context: ContextMode::Factorized,
        },
        out_dir: "runs".to_string(),
    }
}

#[test]
fn surrogate_and_hard_rates_agree_after_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(4, 2, 1_500);
    let cfg = config.resolve(0.01, 0.0, 1);
    let rec = train_one(&cfg, dir.path(), &TrainOpts::default()).unwrap();
    assert!(matches!(rec.status, RunStatus::Complete));
    let codec = CodecModel::load(&rec.checkpoint_dir()).unwrap();

    let sampler = config.source.sampler().unwrap();
    let mut rng = stream(99, StreamKind::Probe);
    let batch = sampler.sample_batch(&mut rng, 256);

    let hard = codec.encode_eval(&batch).unwrap();
    let mut noise = NoiseSource::Seeded(stream(99, StreamKind::QuantizerNoise));
    let soft = codec.encode_train(&batch, &mut noise).unwrap();

    assert!(hard.rate_bits_per_dim.is_finite());
    assert!(soft.rate_bits_per_dim.is_finite());
    let gap = (hard.rate_bits_per_dim - soft.rate_bits_per_dim).abs();
    assert!(
        gap <= 1.0,
        "train/eval rate gap {gap} bits/dim exceeds the sanity band \
         (hard {}, surrogate {})",
        hard.rate_bits_per_dim,
        soft.rate_bits_per_dim
    );
}

#[test]
fn trained_checkpoints_satisfy_the_latent_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = quick_config(2, 2, 400);
    config.alphas = vec![0.0, 1.0];
    config.source = default_gauss_mix(2);
    for alpha in [0.0, 1.0] {
        let cfg = config.resolve(0.01, alpha, 1);
        let rec = train_one(&cfg, dir.path(), &TrainOpts::default()).unwrap();
        let codec = CodecModel::load(&rec.checkpoint_dir()).unwrap();
        let grid = ProbeGrid {
            dim: 2,
            points_per_dim: 32,
            lo: -2.5,
            hi: 2.5,
        };
        let report = identity_probe(&codec, &grid, 32).unwrap();
        assert!(
            report.theorem_gap() <= 1e-10,
            "alpha {alpha}: decomposition gap {} on trained codec",
            report.theorem_gap()
        );
    }
}

#[test]
fn context_mode_wiring_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    for context in [ContextMode::Factorized, ContextMode::Causal] {
        let mut config = quick_config(3, 2, 3);
        config.alphas = vec![0.5];
        config.source = default_gauss_mix(3);
        config.source_model.context = context;
        let cfg = config.resolve(0.01, 0.5, 1);
        let rec = train_one(&cfg, dir.path(), &TrainOpts::default()).unwrap();
        assert_eq!(rec.config.source_model.context, context);
        // The saved source-model checkpoint names the mode it ran with.
        let (_, header) =
            ratelab_core::checkpoint::load(&rec.run_dir.join("source_model")).unwrap();
        let recorded: ContextMode =
            serde_json::from_value(header["source_model"]["context"].clone()).unwrap();
        assert_eq!(recorded, context);
    }
}

#[test]
fn factorized_and_causal_agree_on_iid_dimensions() {
    // On an i.i.d. source the causal context carries no extra information, so
    // both variants should converge to nearly the same NLL.
    use ratelab_core::params::AdamOptions;
    use ratelab_core::source_model::{source_model_step_loss, SourceModel, SourceModelArch};

    let dim = 3;
    let spec = SourceSpec::GaussMix {
        dim,
        components: vec![ratelab_core::sources::MixComponent {
            weight: 1.0,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }],
        seed: 1,
    };
    let sampler = spec.sampler().unwrap();
    let mut rng = stream(11, StreamKind::DataSampling);
    let x = sampler.sample_batch(&mut rng, 512);
    // Noisy reconstruction: per-dimension posterior keeps irreducible
    // uncertainty, so both context modes share the same optimum.
    let mut noise_rng = stream(12, StreamKind::Probe);
    let xhat: Vec<f64> = x
        .data
        .iter()
        .map(|v| {
            use rand_distr::Distribution;
            let z: f64 = rand_distr::StandardNormal.sample(&mut noise_rng);
            v + 0.3 * z
        })
        .collect();

    let mut finals = Vec::new();
    for context in [ContextMode::Factorized, ContextMode::Causal] {
        let arch = SourceModelArch {
            dim,
            hidden: vec![16],
            context,
        };
        let mut sm =
            SourceModel::init(arch, &mut stream(11, StreamKind::SourceModelInit)).unwrap();
        let mut last = f64::NAN;
        for _ in 0..800 {
            let mut tape = ratelab_core::autodiff::Tape::new();
            let ids = sm.params.bind_trainable(&mut tape).unwrap();
            let loss = source_model_step_loss(&mut tape, &sm, &ids, &x, &xhat).unwrap();
            last = tape.scalar(loss) / dim as f64;
            let grads = tape.backward(loss).unwrap();
            let gm = sm.params.collect_grads(&tape, &ids, &grads);
            sm.params.adam_step(&gm, 2e-3, AdamOptions::default()).unwrap();
        }
        finals.push(last);
    }
    let diff = (finals[0] - finals[1]).abs();
    assert!(
        diff <= 0.05,
        "factorized {} vs causal {} bits/dim differ by {diff}",
        finals[0],
        finals[1]
    );
}
