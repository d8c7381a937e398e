use super::*;
use crate::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn grad_t(shape: &[usize], data: &[f64]) -> Tensor {
    t(shape, data).requires_grad(true)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng).requires_grad(true)
}

#[test]
fn affine_identity_passes_input_through() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[1, 3], &[1.0, 2.0, 3.0]));
    let eye = tape.leaf(&t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let b = tape.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.affine(x, eye, b).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[4], &[0.0; 4]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y), &[0.25, 0.25, 0.25, 0.25]);
}

#[test]
fn softmax_rows_are_normalized_and_nonnegative() {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let data: Vec<f64> = (0..24).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4, 6], &data));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).chunks(6) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn causal_attention_over_length_one_returns_value_unchanged() {
    // one position: the single attention weight is softmax of one logit = 1
    let mut tape = Tape::new();
    let q = tape.leaf(&t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]));
    let k = tape.leaf(&t(&[1, 4], &[1.0, 1.0, -2.0, 0.0]));
    let v = tape.leaf(&t(&[1, 4], &[5.0, -3.0, 0.25, 9.0]));
    let kt = tape.transpose(k).unwrap();
    let scores = tape.matmul(q, kt).unwrap();
    let scaled = tape.scale(scores, 0.5);
    let att = tape.causal_softmax(scaled).unwrap();
    assert_eq!(tape.value(att), &[1.0]);
    let out = tape.matmul(att, v).unwrap();
    assert_eq!(tape.value(out), &[5.0, -3.0, 0.25, 9.0]);
}

#[test]
fn causal_softmax_ignores_future_positions() {
    let base = [0.1, 9.0, -3.0, 0.4, 0.2, 7.0, 1.0, 1.5, -0.6];
    let mut perturbed = base;
    perturbed[1] = -5.0; // row 0, col 1: masked for row 0
    perturbed[2] = 11.0;
    perturbed[5] = 1.23; // row 1, col 2: masked for row 1

    let mut t1 = Tape::new();
    let a = t1.leaf(&t(&[3, 3], &base));
    let y1 = t1.causal_softmax(a).unwrap();
    let mut t2 = Tape::new();
    let b = t2.leaf(&t(&[3, 3], &perturbed));
    let y2 = t2.causal_softmax(b).unwrap();

    assert_eq!(t1.value(y1)[0], t2.value(y2)[0]);
    assert_eq!(&t1.value(y1)[3..5], &t2.value(y2)[3..5]);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(&grad_t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, -0.25, 8.0]));
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn softmax_cross_entropy_gradient_at_zero_logits() {
    // gradient = uniform(1/V) - one_hot(k)
    let v = 5;
    let k = 2;
    let mut tape = Tape::new();
    let logits = tape.leaf(&grad_t(&[1, v], &[0.0; 5]));
    let loss = tape
        .softmax_cross_entropy(logits, &[k as u32], &[true])
        .unwrap();
    assert!((tape.value(loss)[0] - (v as f64).ln()).abs() < 1e-12);
    tape.backward(loss).unwrap();
    let g = tape.grad(logits).unwrap();
    for (j, &gj) in g.iter().enumerate() {
        let expect = 1.0 / v as f64 - if j == k { 1.0 } else { 0.0 };
        assert!((gj - expect).abs() < 1e-12, "entry {j}: {gj} vs {expect}");
    }
}

#[test]
fn sigmoid_bce_gradient_at_zero_logit() {
    let mut tape = Tape::new();
    let logit = tape.leaf(&grad_t(&[1], &[0.0]));
    let loss = tape.sigmoid_bce(logit, &[1.0]).unwrap();
    assert!((tape.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    tape.backward(loss).unwrap();
    assert!((tape.grad(logit).unwrap()[0] + 0.5).abs() < 1e-12);
}

#[test]
fn constant_graph_has_zero_gradients_both_ways() {
    let x = rand_t(&[3], 1);
    let err = grad_check(&[x], 1e-5, 0, |tape, ids| {
        let c = tape.constant(vec![2], vec![4.0, 5.0]);
        let s = tape.sum(c);
        // multiply by zero so the leaf is connected but the loss is constant
        let z = tape.scale(ids[0], 0.0);
        let zs = tape.sum(z);
        tape.add(s, zs)
    })
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_single_affine_layer_is_tight() {
    for seed in 0..3u64 {
        let x = rand_t(&[2, 4], seed * 3 + 1);
        let w = rand_t(&[4, 3], seed * 3 + 2);
        let b = rand_t(&[3], seed * 3 + 3);
        let err = grad_check(&[x, w, b], 1e-5, 0, |tape, ids| {
            let y = tape.affine(ids[0], ids[1], ids[2])?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: affine grad err {err}");
    }
}

// every primitive against central differences, 3 seeds
#[test]
fn grad_check_all_primitives() {
    for seed in 0..3u64 {
        let checks: Vec<(&str, f64)> = vec![
            ("matmul", {
                let a = rand_t(&[3, 4], seed + 10);
                let b = rand_t(&[4, 2], seed + 20);
                grad_check(&[a, b], 1e-5, 0, |tp, ids| {
                    let y = tp.matmul(ids[0], ids[1])?;
                    Ok(tp.sum(y))
                })
                .unwrap()
            }),
            ("transpose", {
                let a = rand_t(&[3, 4], seed + 30);
                grad_check(&[a], 1e-5, 0, |tp, ids| {
                    let y = tp.transpose(ids[0])?;
                    let s = tp.softmax(y)?;
                    Ok(tp.sum(s))
                })
                .unwrap()
            }),
            ("embedding", {
                let table = rand_t(&[5, 3], seed + 40);
                grad_check(&[table], 1e-5, 0, |tp, ids| {
                    let y = tp.embedding(ids[0], &[0, 2, 2, 4])?;
                    let s = tp.tanh(y);
                    Ok(tp.sum(s))
                })
                .unwrap()
            }),
            ("layer_norm", {
                let x = rand_t(&[3, 6], seed + 50);
                let g = rand_t(&[6], seed + 60);
                let b = rand_t(&[6], seed + 70);
                grad_check(&[x, g, b], 1e-5, 0, |tp, ids| {
                    let y = tp.layer_norm(ids[0], ids[1], ids[2])?;
                    let s = tp.sigmoid(y);
                    Ok(tp.sum(s))
                })
                .unwrap()
            }),
            ("softmax", {
                let x = rand_t(&[3, 5], seed + 80);
                grad_check(&[x], 1e-5, 0, |tp, ids| {
                    let y = tp.softmax(ids[0])?;
                    let w = tp.tanh(y);
                    Ok(tp.sum(w))
                })
                .unwrap()
            }),
            ("log_softmax", {
                let x = rand_t(&[3, 5], seed + 90);
                grad_check(&[x], 1e-5, 0, |tp, ids| {
                    let y = tp.log_softmax(ids[0])?;
                    let w = tp.sigmoid(y);
                    Ok(tp.sum(w))
                })
                .unwrap()
            }),
            ("causal_softmax", {
                let x = rand_t(&[4, 4], seed + 100);
                grad_check(&[x], 1e-5, 0, |tp, ids| {
                    let y = tp.causal_softmax(ids[0])?;
                    let w = tp.tanh(y);
                    Ok(tp.sum(w))
                })
                .unwrap()
            }),
            ("sigmoid", {
                let x = rand_t(&[7], seed + 110);
                grad_check(&[x], 1e-5, 0, |tp, ids| {
                    let y = tp.sigmoid(ids[0]);
                    Ok(tp.sum(y))
                })
                .unwrap()
            }),
            ("tanh", {
                let x = rand_t(&[7], seed + 120);
                grad_check(&[x], 1e-5, 0, |tp, ids| {
                    let y = tp.tanh(ids[0]);
                    Ok(tp.sum(y))
                })
                .unwrap()
            }),
            ("prelu", {
                let x = rand_t(&[9], seed + 130);
                let a = rand_t(&[1], seed + 140);
                grad_check(&[x, a], 1e-5, 0, |tp, ids| {
                    let y = tp.prelu(ids[0], ids[1])?;
                    Ok(tp.sum(y))
                })
                .unwrap()
            }),
            ("gelu", {
                let x = rand_t(&[9], seed + 150);
                grad_check(&[x], 1e-5, 0, |tp, ids| {
                    let y = tp.gelu(ids[0]);
                    Ok(tp.sum(y))
                })
                .unwrap()
            }),
            ("dropout", {
                let x = rand_t(&[12], seed + 160);
                grad_check(&[x], 1e-5, 99, |tp, ids| {
                    let y = tp.dropout(ids[0], 0.4)?;
                    let w = tp.tanh(y);
                    Ok(tp.sum(w))
                })
                .unwrap()
            }),
            ("add_mul_scale", {
                let a = rand_t(&[6], seed + 170);
                let b = rand_t(&[6], seed + 180);
                grad_check(&[a, b], 1e-5, 0, |tp, ids| {
                    let s = tp.add(ids[0], ids[1])?;
                    let m = tp.mul(s, ids[1])?;
                    let sc = tp.scale(m, -1.7);
                    Ok(tp.sum(sc))
                })
                .unwrap()
            }),
            ("concat_slice", {
                let a = rand_t(&[2, 3], seed + 190);
                let b = rand_t(&[2, 2], seed + 200);
                grad_check(&[a, b], 1e-5, 0, |tp, ids| {
                    let c = tp.concat(&[ids[0], ids[1]], 1)?;
                    let sl = tp.slice(c, 1, 1, 3)?;
                    let r = tp.slice(sl, 0, 1, 1)?;
                    let w = tp.tanh(r);
                    Ok(tp.sum(w))
                })
                .unwrap()
            }),
            ("mean", {
                let x = rand_t(&[5], seed + 210);
                grad_check(&[x], 1e-5, 0, |tp, ids| {
                    let y = tp.sigmoid(ids[0]);
                    Ok(tp.mean(y))
                })
                .unwrap()
            }),
            ("softmax_cross_entropy", {
                let x = rand_t(&[3, 6], seed + 220);
                grad_check(&[x], 1e-5, 0, |tp, ids| {
                    tp.softmax_cross_entropy(ids[0], &[1, 5, 0], &[true, false, true])
                })
                .unwrap()
            }),
            ("sigmoid_bce", {
                let x = rand_t(&[6], seed + 230);
                grad_check(&[x], 1e-5, 0, |tp, ids| {
                    tp.sigmoid_bce(ids[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
                })
                .unwrap()
            }),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "seed {seed}: {name} grad err {err}");
        }
    }
}

#[test]
fn dropout_rate_zero_is_identity_and_masks_reproduce() {
    let data: Vec<f64> = (0..10).map(|i| i as f64 * 0.37 - 1.0).collect();
    let mut tape = Tape::with_seed(5, true);
    let x = tape.leaf(&t(&[10], &data));
    let y = tape.dropout(x, 0.0).unwrap();
    assert_eq!(tape.value(y), &data[..]);

    let run = |seed: u64| {
        let mut tp = Tape::with_seed(seed, true);
        let x = tp.leaf(&t(&[10], &data));
        let y = tp.dropout(x, 0.5).unwrap();
        tp.value(y).to_vec()
    };
    assert_eq!(run(42), run(42));
    assert_ne!(run(42), run(43));
}

#[test]
fn eval_mode_dropout_is_identity() {
    let data = [1.0, -2.0, 3.0];
    let mut tape = Tape::with_seed(123, false);
    let x = tape.leaf(&t(&[3], &data));
    let y = tape.dropout(x, 0.9).unwrap();
    assert_eq!(tape.value(y), &data[..]);
}

#[test]
fn shape_mismatch_errors_name_the_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
    let b = tape.leaf(&t(&[2, 2], &[0.0; 4]));
    let err = tape.matmul(a, b).unwrap_err();
    match err {
        Error::ShapeMismatch { op, lhs, rhs } => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&grad_t(&[2], &[1.0, 2.0]));
    let y = tape.sigmoid(x);
    assert!(tape.backward(y).is_err());
}

#[test]
fn replay_with_same_seed_is_bitwise_identical() {
    let run = || {
        let mut tape = Tape::with_seed(77, true);
        let x = tape.leaf(&t(&[4, 4], &(0..16).map(|i| i as f64 * 0.11).collect::<Vec<_>>()));
        let g = tape.leaf(&t(&[4], &[1.0; 4]));
        let b = tape.leaf(&t(&[4], &[0.0; 4]));
        let n = tape.layer_norm(x, g, b).unwrap();
        let d = tape.dropout(n, 0.3).unwrap();
        let s = tape.causal_softmax(d).unwrap();
        tape.value(s).to_vec()
    };
    assert_eq!(run(), run());
}
