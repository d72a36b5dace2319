//! Training-improvement regression at the default desk-scale configuration.
//! Slow (a few minutes): three seeded five-epoch runs.

use gpom::train::{train, TrainConfig};

/// The tail of a later epoch improves faster than the tail of the first:
/// mean loss over the final 10 generations of epoch 5 is below epoch 1's,
/// median over 3 seeds.
#[test]
fn later_epochs_have_lower_tail_losses() {
    let tail_mean = |records: &[gpom::train::LossRecord], epoch: u32, last_gen: u32| -> f64 {
        let tail: Vec<f64> = records
            .iter()
            .filter(|r| r.epoch == epoch && r.generation > last_gen - 10)
            .map(|r| r.loss)
            .collect();
        assert!(!tail.is_empty());
        tail.iter().sum::<f64>() / tail.len() as f64
    };

    let mut deltas = Vec::new();
    for seed in [11u64, 12, 13] {
        let cfg = TrainConfig {
            epochs: 5,
            seed,
            ..TrainConfig::default()
        };
        let result = train(&cfg).unwrap();
        let first = tail_mean(&result.records, 1, cfg.gens_per_epoch);
        let fifth = tail_mean(&result.records, 5, cfg.gens_per_epoch);
        deltas.push(fifth - first);
    }
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(
        deltas[1] < 0.0,
        "median tail-loss change {} is not an improvement ({deltas:?})",
        deltas[1]
    );
}
