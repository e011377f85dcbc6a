use ngcg::datagen::{generate, DataConfig};
use ngcg::encoder::EncoderConfig;
use ngcg::trainer::{init_model, train, TrainConfig};

/// Steps averaged at each end of the epoch.
const WINDOW: usize = 5;

/// Default corpus and config, one epoch per seed: the median change from the
/// first to the last steps of the epoch is a decrease.
#[test]
fn loss_falls_over_the_first_epoch() {
    let corpus = generate(&DataConfig::default()).unwrap();
    let mut changes: Vec<f64> = (0..5u64)
        .map(|seed| {
            let cfg = TrainConfig {
                epochs: 1,
                seed,
                ..TrainConfig::default()
            };
            let mut model = init_model(EncoderConfig::default(), &cfg).unwrap();
            let log = train(&corpus, &mut model, &cfg, |_| {}).unwrap();
            let losses: Vec<f64> = log.steps.iter().map(|s| s.2).collect();
            assert!(losses.len() >= 2 * WINDOW);
            let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
            mean(&losses[losses.len() - WINDOW..]) - mean(&losses[..WINDOW])
        })
        .collect();
    changes.sort_by(f64::total_cmp);
    assert!(changes[2] < 0.0, "per-seed changes {changes:?}");
}
