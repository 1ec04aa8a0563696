mod common;

use common::write_fake_mnist;
use envinfer::envs::build_handcrafted_envs;
use envinfer::erm::TrainConfig;
use envinfer::irm::{train_irm, EnvBatchView, IrmConfig};
use envinfer::mnist::{load_mnist, Split};

#[test]
fn annealed_penalty_ends_below_its_starting_value() {
    let dir = tempfile::tempdir().unwrap();
    write_fake_mnist(dir.path(), 2000, 10);
    let raw = load_mnist(dir.path(), Split::Train).unwrap();
    let sets = build_handcrafted_envs(&raw, &[0.1, 0.2], 0.25, 3).unwrap();
    let envs: Vec<EnvBatchView> = sets.iter().map(EnvBatchView::whole).collect();
    let config = IrmConfig {
        train: TrainConfig {
            steps: 300,
            batch_size: 256,
            eval_every: 0,
            widths: vec![392, 32, 32, 1],
            ..Default::default()
        },
        penalty_weight: 1e4,
        warmup_steps: 100,
    };
    let model = train_irm(&envs, &config).unwrap();
    let total = |step: usize| -> f64 {
        let rows: Vec<_> = model.history.iter().filter(|r| r.step == step).collect();
        assert_eq!(rows.len(), 2, "no history at step {step}");
        rows.iter().map(|r| r.penalty).sum()
    };
    let (start, end) = (total(100), total(299));
    assert!(end < start, "penalty {start:e} at annealing, {end:e} at the end");
    assert!(model.history.iter().filter(|r| r.step == 299).all(|r| r.lambda == 1e4));
}
