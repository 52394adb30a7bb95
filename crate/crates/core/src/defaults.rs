//! Every default in one versioned place. The CLI echoes this whole table into
//! the effective-config JSON of each run; training records embed the
//! optimizer block. Nothing numeric hides in call sites.

use crate::optim::OptimConfig;

/// Bump when any default below changes meaning or value.
pub const DEFAULTS_VERSION: &str = "1.0";

// Model (desk scale: trains in minutes on CPU while exercising everything).
pub const EMBED_DIM: usize = 64;
pub const DEPTH: usize = 4;
pub const PATCH_SIZE: usize = 4;
pub const INPUT_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 2;
pub const DWT_LEVELS: usize = 1;
pub const DW_KERNEL_SIZE: usize = 5;
pub const HEADS: usize = 4;
pub const MLP_RATIO: f64 = 2.0;

pub const OPTIMIZER: OptimConfig =
    OptimConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 };
pub const BN_MOMENTUM: f64 = 0.1;

// Training protocol.
pub const EPOCHS: usize = 50;
/// Hard cap; configs above this are rejected.
pub const MAX_EPOCHS: usize = 300;
pub const BATCH_SIZE: usize = 32;
/// Hard cap; configs above this are rejected.
pub const MAX_BATCH_SIZE: usize = 128;
pub const EARLY_STOP_PATIENCE: usize = 10;
pub const RUNS: usize = 3;

// Synthetic dataset.
pub const PER_CLASS_PER_MAG: usize = 200;
pub const NOISE_SIGMA: f64 = 0.05;
pub const RADIUS_JITTER: f64 = 0.3;

/// Qualitative outcomes this laboratory was built to probe. The report prints
/// observed-vs-expected agreement for these; nothing asserts them (toy data
/// need not preserve the ordering).
pub struct ReferenceExpectations {
    /// Family expected to lead the mean over all 16 matrix cells.
    pub best_overall_mean: &'static str,
    /// Family expected to lead the same-magnification (diagonal) mean.
    pub best_diagonal_mean: &'static str,
    /// Family expected to hold the highest worst-case cell.
    pub best_min_cell: &'static str,
}

pub const REFERENCE_EXPECTATIONS: ReferenceExpectations = ReferenceExpectations {
    best_overall_mean: "WaveMixNet",
    best_diagonal_mean: "ConvMixerNet",
    best_min_cell: "WaveMixNet",
};

/// The full table as JSON, for effective-config echoing.
pub fn snapshot() -> serde_json::Value {
    serde_json::json!({
        "defaults_version": DEFAULTS_VERSION,
        "model": {
            "embed_dim": EMBED_DIM,
            "depth": DEPTH,
            "patch_size": PATCH_SIZE,
            "input_size": INPUT_SIZE,
            "num_classes": NUM_CLASSES,
            "dwt_levels": DWT_LEVELS,
            "dw_kernel_size": DW_KERNEL_SIZE,
            "heads": HEADS,
            "mlp_ratio": MLP_RATIO,
        },
        "optimizer": {
            "lr": OPTIMIZER.lr,
            "beta1": OPTIMIZER.beta1,
            "beta2": OPTIMIZER.beta2,
            "eps": OPTIMIZER.eps,
            "weight_decay": OPTIMIZER.weight_decay,
            "bn_momentum": BN_MOMENTUM,
            "schedule": "cosine-to-zero over the epoch budget, per step",
        },
        "training": {
            "epochs": EPOCHS,
            "max_epochs": MAX_EPOCHS,
            "batch_size": BATCH_SIZE,
            "max_batch_size": MAX_BATCH_SIZE,
            "early_stop_patience": EARLY_STOP_PATIENCE,
            "runs": RUNS,
        },
        "dataset": {
            "per_class_per_mag": PER_CLASS_PER_MAG,
            "out_size": INPUT_SIZE,
            "noise_sigma": NOISE_SIGMA,
            "radius_jitter": RADIUS_JITTER,
        },
    })
}
