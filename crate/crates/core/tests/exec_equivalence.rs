//! The parallel and sequential executors must produce identical results, and
//! training must be a pure function of its config and seed.

use tlda_core::agent::{train, SacAgent, SacConfig, TrainConfig, TrainMode};
use tlda_core::envs::PixelEnvConfig;
use tlda_core::exec::Exec;
use tlda_core::lipschitz::{k_matrix_batch, KMatrixConfig};
use tlda_core::numerics::Tensor;
use tlda_core::rng::Rng;
use tlda_core::verify::{run_ensemble, EnsembleConfig};

fn small_sac() -> SacConfig {
    let mut sac = SacConfig::default();
    sac.arch.conv_channels = 4;
    sac.arch.conv_layers = 2;
    sac.arch.feature_dim = 8;
    sac.arch.hidden_dim = 16;
    sac.batch_size = 8;
    sac.init_steps = 10;
    sac.shift_pad = 2;
    sac
}

fn small_env() -> PixelEnvConfig {
    PixelEnvConfig {
        width: 16,
        height: 16,
        episode_length: 20,
        ..PixelEnvConfig::default()
    }
}

#[test]
fn kmatrix_batch_is_executor_independent() {
    let shape = [9, 16, 16];
    let agent = SacAgent::new(small_sac(), &shape, 2, &mut Rng::new(1, "test.agent")).unwrap();
    let mut rng = Rng::new(2, "test.obs");
    let batch: Vec<Tensor> = (0..5)
        .map(|_| Tensor::from_vec(&shape, (0..9 * 256).map(|_| rng.uniform_f32()).collect()).unwrap())
        .collect();
    let run = |exec| {
        let cfg = KMatrixConfig {
            stride: 3,
            mask_sigma: 1.5,
            exec,
            chunk: 7,
            ..KMatrixConfig::default()
        };
        k_matrix_batch(&agent, &batch, &cfg).unwrap()
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}

#[test]
fn ensemble_is_executor_independent() {
    let cfg = EnsembleConfig {
        instances: 12,
        ..EnsembleConfig::default()
    };
    assert_eq!(run_ensemble(&cfg, Exec::Sequential).unwrap(), run_ensemble(&cfg, Exec::Parallel).unwrap());
}

#[test]
fn training_is_reproducible_for_every_mode() {
    for mode in [TrainMode::Tlda, TrainMode::NaiveStrong, TrainMode::WeakOnly, TrainMode::RandomPatch] {
        let cfg = TrainConfig {
            env: small_env(),
            sac: small_sac(),
            tlda: KMatrixConfig {
                stride: 4,
                mask_sigma: 1.5,
                ..KMatrixConfig::default()
            },
            mode,
            seed: 9,
            steps: 80,
            checkpoint_every: 0,
        };
        let a = train(&cfg, None, "").unwrap();
        let b = train(&cfg, None, "").unwrap();
        assert_eq!(a.records.len(), 4, "{mode:?}");
        assert_eq!(a.records, b.records, "{mode:?}");
        assert_eq!(a.agent.state_dict(), b.agent.state_dict(), "{mode:?}");
    }
}
