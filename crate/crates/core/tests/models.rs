//! Whole-model behaviours that only show up once stems, blocks, pooling and
//! the head are wired together.

use magmix::models::{Family, Model, ModelConfig};
use magmix::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(family: Family) -> ModelConfig {
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

// With the head at zero every logit is zero, so the cross-entropy gradient
// for head.b is exactly softmax minus one-hot averaged over the batch, and
// every trainable leaf still receives a gradient tensor.
#[test]
fn every_leaf_gets_a_gradient_and_head_bias_grad_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::<f32>::randn(&[2, 3, 16, 16], 1.0, &mut rng);
    let labels = [0usize, 1usize];
    for family in Family::ALL {
        let mut m = Model::build(tiny(family), 11).unwrap();
        let mut fwd = m.forward_taped(&x, true).unwrap();
        let loss = fwd.tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
        let grads = fwd.tape.backward(loss).unwrap();
        for (&leaf, (name, _)) in fwd.leaves.iter().zip(m.named_params()) {
            assert!(grads.get(leaf).is_some(), "{family}: leaf {name} got no gradient");
        }
        let bias_idx = m
            .named_params()
            .position(|(n, _)| n == "head.b")
            .expect("head.b present");
        let g = grads.get(fwd.leaves[bias_idx]).unwrap();
        // softmax(0) = 1/2; labels hit each class once, so the mean is zero.
        for &v in g.data() {
            assert!(v.abs() < 1e-7, "{family}: head.b grad {v}");
        }
    }
}

#[test]
fn eval_logits_are_invariant_to_batch_partitioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs: Vec<Tensor<f32>> =
        (0..4).map(|_| Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng)).collect();
    let mut joint = Tensor::<f32>::zeros(&[4, 3, 16, 16]);
    let per = xs[0].numel();
    for (i, x) in xs.iter().enumerate() {
        joint.data_mut()[i * per..(i + 1) * per].copy_from_slice(x.data());
    }
    for family in Family::ALL {
        let mut m = Model::build(tiny(family), 5).unwrap();
        let all = m.forward(&joint, false).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let one = m.forward(x, false).unwrap();
            let row = &all.data()[i * 2..(i + 1) * 2];
            for (a, b) in row.iter().zip(one.data()) {
                assert!(
                    (a - b).abs() < 1e-5,
                    "{family}: batched row {i} {a} vs single {b}"
                );
            }
        }
    }
}

// Stride schedule halves the grid in the first stages only while later
// blocks keep resolution, and the whole stack still pools to [N, classes].
#[test]
fn cnn_baseline_handles_depths_beyond_the_stride_schedule() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f32>::randn(&[1, 3, 64, 64], 1.0, &mut rng);
    for depth in [1usize, 2, 4, 6] {
        let mut cfg = ModelConfig::desk(Family::MiniCNN);
        cfg.depth = depth;
        let mut m = Model::build(cfg, 0).unwrap();
        let logits = m.forward(&x, false).unwrap();
        assert_eq!(logits.shape(), &[1, 2], "depth {depth}");
        assert!(logits.all_finite());
    }
}
