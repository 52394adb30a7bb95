//! Slow training behaviours: capacity overfit and evaluation purity.

use magmix::checkpoint::{file_sha256, save_model};
use magmix::data::{generate_synthetic, Mag, MagDataset};
use magmix::models::{Family, Model, ModelConfig};
use magmix::train::{evaluate, train, TrainConfig};

fn tiny_arch(family: Family) -> ModelConfig {
    ModelConfig {
        family,
        depth: 2,
        embed_dim: 8,
        patch_size: 4,
        input_size: (16, 16),
        num_classes: 2,
        in_channels: 3,
        mlp_ratio: 2.0,
        heads: 4,
        dwt_levels: 1,
        kernel_size: 3,
    }
}

fn eight_samples() -> MagDataset {
    let ds = generate_synthetic(17, 4, 16).unwrap();
    let part = ds.filter_mag(Mag::X400);
    assert_eq!(part.len(), 8);
    part
}

// Capacity sanity: one batch of 8, 200 steps, training accuracy reaches 100%
// and the window-10 moving average of the loss never rises.
#[test]
fn single_batch_overfits_to_perfect_accuracy() {
    let data = eight_samples();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        early_stop_patience: None,
        target_val_acc: None,
        ..TrainConfig::default()
    };
    let model = Model::build(tiny_arch(Family::ConvMixerNet), 1).unwrap();
    let (mut model, record) = train(model, &data, &data, &cfg).unwrap();
    assert_eq!(record.history.len(), 200);

    let result = evaluate(&mut model, &data, 8).unwrap();
    assert_eq!(result.top1, 1.0, "history tail: {:?}", &record.history[190..]);

    let losses: Vec<f64> = record.history.iter().map(|h| h.train_loss).collect();
    let smooth: Vec<f64> =
        losses.windows(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for (i, pair) in smooth.windows(2).enumerate() {
        assert!(
            pair[1] <= pair[0] + 1e-6,
            "smoothed loss rose at window {i}: {} -> {}",
            pair[0],
            pair[1]
        );
    }
}

#[test]
fn evaluate_leaves_the_checkpoint_hash_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let data = eight_samples();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        early_stop_patience: None,
        target_val_acc: None,
        ..TrainConfig::default()
    };
    let model = Model::build(tiny_arch(Family::MiniCNN), 4).unwrap();
    let (mut model, _) = train(model, &data, &data, &cfg).unwrap();

    let before = dir.path().join("before.ckpt");
    let after = dir.path().join("after.ckpt");
    save_model(&before, &model).unwrap();
    for batch in [1usize, 3, 8] {
        evaluate(&mut model, &data, batch).unwrap();
    }
    save_model(&after, &model).unwrap();
    assert_eq!(file_sha256(&before).unwrap(), file_sha256(&after).unwrap());
}
