use pipemerge::optimize::enumerate_candidates;
use pipemerge::partition::PlanOptions;
use pipemerge::verify::data::{batches, two_blobs};
use pipemerge::verify::net::{backward, forward, loss, sgd_step, train_sequential};
use pipemerge::verify::{
    train_partitioned, Activation, Batch, LossKind, Matrix, PartitionedOptions, TinyNet, TrainConfig,
};
use proptest::prelude::*;

/// Straight-loop forward pass, independent of the library's matrix code.
fn naive_forward(net: &TinyNet, x: &Matrix) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    for layer in &net.layers {
        rows = rows
            .iter()
            .map(|a| {
                let q: Vec<f64> = (0..layer.w.rows())
                    .map(|o| layer.bias[o] + (0..a.len()).map(|i| layer.w.get(o, i) * a[i]).sum::<f64>())
                    .collect();
                match layer.act {
                    Activation::Relu => q.iter().map(|v| v.max(0.0)).collect(),
                    Activation::Identity => q,
                    Activation::Softmax => {
                        let top = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = q.iter().map(|v| (v - top).exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.iter().map(|v| v / s).collect()
                    }
                }
            })
            .collect();
    }
    rows
}

fn naive_loss(net: &TinyNet, x: &Matrix, labels: &[usize], kind: LossKind) -> f64 {
    let y = naive_forward(net, x);
    let b = y.len() as f64;
    let mut total = 0.0;
    for (row, &label) in y.iter().zip(labels) {
        match kind {
            LossKind::Mse => {
                for (c, v) in row.iter().enumerate() {
                    let t = if row.len() == 1 {
                        label as f64
                    } else {
                        f64::from(c == label)
                    };
                    total += 0.5 * (v - t).powi(2);
                }
            }
            LossKind::CrossEntropy => total -= row[label].ln(),
        }
    }
    total / b
}

fn sample_batch(rows: usize, cols: usize, classes: usize, values: &[f64]) -> Batch {
    let data = (0..rows * cols).map(|k| values[k % values.len()]).collect();
    let labels = (0..rows).map(|r| (r * 7 + 3) % classes).collect();
    Batch::new(Matrix::from_vec(rows, cols, data), labels).unwrap()
}

#[test]
fn linear_mse_gradient_matches_closed_form() {
    let net = TinyNet::random(&[3, 2], &[Activation::Identity], 4).unwrap();
    let batch = sample_batch(5, 3, 2, &[0.3, -1.2, 0.7, 2.0, -0.4, 0.1, 1.1]);
    let tape = forward(&net, &batch.x).unwrap();
    let g = backward(&net, &tape, &batch.labels, LossKind::Mse).unwrap();
    let y = naive_forward(&net, &batch.x);
    let b = batch.len() as f64;
    for o in 0..2 {
        let mut db = 0.0;
        for i in 0..3 {
            let mut dw = 0.0;
            for r in 0..batch.len() {
                let t = f64::from(batch.labels[r] == o);
                dw += (y[r][o] - t) * batch.x.get(r, i) / b;
            }
            assert!((g.layers[0].w.get(o, i) - dw).abs() < 1e-14);
        }
        for r in 0..batch.len() {
            db += (y[r][o] - f64::from(batch.labels[r] == o)) / b;
        }
        assert!((g.layers[0].bias[o] - db).abs() < 1e-14);
    }
}

#[test]
fn softmax_cross_entropy_gradient_matches_closed_form() {
    let net = TinyNet::random(&[2, 3], &[Activation::Softmax], 9).unwrap();
    let batch = sample_batch(4, 2, 3, &[1.0, -0.5, 0.25, 2.0, -1.5]);
    let tape = forward(&net, &batch.x).unwrap();
    let g = backward(&net, &tape, &batch.labels, LossKind::CrossEntropy).unwrap();
    let y = naive_forward(&net, &batch.x);
    for o in 0..3 {
        for i in 0..2 {
            let dw: f64 = (0..4)
                .map(|r| (y[r][o] - f64::from(batch.labels[r] == o)) * batch.x.get(r, i) / 4.0)
                .sum();
            assert!((g.layers[0].w.get(o, i) - dw).abs() < 1e-14);
        }
    }
}

#[test]
fn one_step_of_training_is_one_gradient_step() {
    let net = TinyNet::random(&[2, 4, 2], &[Activation::Relu, Activation::Softmax], 3).unwrap();
    let data = batches(&two_blobs(8, 2, 2.0, 1), 8);
    let cfg = TrainConfig {
        lr: 0.3,
        decay: 0.0,
        loss: LossKind::CrossEntropy,
        iterations: 1,
        seed: 0,
    };
    let (trained, hist) = train_sequential(&net, &data, &cfg).unwrap();
    let tape = forward(&net, &data[0].x).unwrap();
    let g = backward(&net, &tape, &data[0].labels, cfg.loss).unwrap();
    assert_eq!(trained, sgd_step(&net, &g, 0.3).unwrap());
    let expected = naive_loss(&net, &data[0].x, &data[0].labels, cfg.loss);
    assert!((hist[0].loss - expected).abs() < 1e-12);
}

#[test]
fn every_plan_of_a_small_net_trains_like_sequential() {
    let net = TinyNet::random(
        &[3, 5, 4, 2],
        &[Activation::Relu, Activation::Identity, Activation::Softmax],
        21,
    )
    .unwrap();
    let data = batches(&two_blobs(18, 3, 2.5, 2), 6);
    let cfg = TrainConfig {
        lr: 0.2,
        decay: 0.05,
        loss: LossKind::CrossEntropy,
        iterations: 3,
        seed: 0,
    };
    let (seq, _) = train_sequential(&net, &data, &cfg).unwrap();
    let g = net.model_graph("net").unwrap();
    for n in 1..=3 {
        for c in enumerate_candidates(3, 3) {
            let plan = c.to_plan(&g, n, PlanOptions { replicate_narrow: true }).unwrap();
            for m in [1, 2, 3] {
                let run = train_partitioned(&net, &data, &cfg, &plan, m, &PartitionedOptions::default()).unwrap();
                let err = run.net.max_rel_diff(&seq, 1e-9);
                assert!(err < 1e-9, "n={n} {c:?} m={m}: {err}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_naive_loops(
        hidden in prop::collection::vec(1usize..=6, 0..=3),
        seed in any::<u64>(),
        values in prop::collection::vec(-2.0f64..2.0, 1..20),
    ) {
        let mut widths = vec![3];
        widths.extend(&hidden);
        widths.push(3);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Softmax);
        let net = TinyNet::random(&widths, &acts, seed).unwrap();
        let batch = sample_batch(4, 3, 3, &values);
        let ours = forward(&net, &batch.x).unwrap();
        let theirs = naive_forward(&net, &batch.x);
        for (r, row) in theirs.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                prop_assert!((ours.output().get(r, c) - v).abs() <= 1e-12);
            }
        }
        let l = loss(ours.output(), &batch.labels, LossKind::CrossEntropy).unwrap();
        prop_assert!((l - naive_loss(&net, &batch.x, &batch.labels, LossKind::CrossEntropy)).abs() <= 1e-12);
    }

    #[test]
    fn backward_matches_naive_finite_differences(
        hidden in prop::collection::vec(1usize..=5, 0..=2),
        seed in any::<u64>(),
        values in prop::collection::vec(-2.0f64..2.0, 1..20),
        mse in any::<bool>(),
    ) {
        // smooth activations only, so central differences need no kink care
        let kind = if mse { LossKind::Mse } else { LossKind::CrossEntropy };
        let mut widths = vec![2];
        widths.extend(&hidden);
        widths.push(2);
        let mut acts = vec![Activation::Identity; hidden.len()];
        acts.push(if mse { Activation::Identity } else { Activation::Softmax });
        let net = TinyNet::random(&widths, &acts, seed).unwrap();
        let batch = sample_batch(3, 2, 2, &values);
        let tape = forward(&net, &batch.x).unwrap();
        let g = backward(&net, &tape, &batch.labels, kind).unwrap();
        let h = 1e-6;
        for (li, layer) in net.layers.iter().enumerate() {
            for o in 0..layer.w.rows() {
                for i in 0..layer.w.cols() {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    plus.layers[li].w.set(o, i, layer.w.get(o, i) + h);
                    minus.layers[li].w.set(o, i, layer.w.get(o, i) - h);
                    let fd = (naive_loss(&plus, &batch.x, &batch.labels, kind)
                        - naive_loss(&minus, &batch.x, &batch.labels, kind))
                        / (2.0 * h);
                    let a = g.layers[li].w.get(o, i);
                    prop_assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3), "{} vs {}", a, fd);
                }
            }
        }
    }
}
