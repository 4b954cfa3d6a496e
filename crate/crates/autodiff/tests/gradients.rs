//! Finite-difference validation of every kernel, plus the engine's
//! structural guarantees.

use pcm_autodiff::check::{kernel_cases, kernel_error, numeric_gradient, Tolerance};
use pcm_autodiff::{AutodiffError, Graph, OpKind, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn every_kernel_matches_finite_differences() {
    let cases = kernel_cases();
    for kind in OpKind::ALL {
        assert!(cases.iter().any(|c| c.kind == kind), "{kind} has no probe");
    }
    for c in &cases {
        let worst = kernel_error(c, 10, Tolerance::KERNEL).unwrap();
        assert!(worst < Tolerance::KERNEL.rel, "{}: worst relative error {worst:e}", c.kind);
    }
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn scalar_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);

    let x = g.constant(Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 7.0]).unwrap());
    let m = g.mse(x, x).unwrap();
    assert_eq!(g.value(m).item(), 0.0);

    // loss = sigmoid(w) * c, w = 0, c = 4
    let mut g = Graph::new();
    let w = g.leaf(Tensor::scalar(0.0), true);
    let c = g.constant(Tensor::scalar(4.0));
    let s = g.sigmoid(w);
    let l = g.mul(s, c).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().item(), 1.0);
}

#[test]
fn shared_subexpressions_sum_their_gradients() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(1.3), true);
    let y = g.add(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 2.0);
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[1], vec![3.0]).unwrap(), true);
    let sq = g.square(x).unwrap();
    let l = g.mean(sq);
    g.backward(l).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
    g.zero_grads();
    assert!(g.grad(x).is_none());
}

#[test]
fn constants_never_receive_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    let c = g.constant(Tensor::new(&[2], vec![5.0, 6.0]).unwrap());
    let p = g.mul(x, c).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[5.0, 6.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3]), true);
    assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(s)) if s == vec![3]));
}

#[test]
fn shape_errors_name_the_op_and_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = g.constant(Tensor::zeros(&[4]));
    let msg = g.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[4]"), "{msg}");
}

#[test]
fn unknown_kind_is_unsupported() {
    assert!(matches!("fft".parse::<OpKind>(), Err(AutodiffError::Unsupported(_))));
    for kind in OpKind::ALL {
        assert_eq!(kind.name().parse::<OpKind>().unwrap(), kind);
    }
}

#[test]
fn conv_preserves_spatial_dims() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 5, 7]));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = g.conv2d_same(x, w).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 5, 7]);
}

#[test]
fn masked_keys_get_zero_weight() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::from_fn(&[1, 2, 3], |i| i as f64 * 0.1));
    let k = g.constant(Tensor::from_fn(&[1, 3, 3], |i| (i as f64).sin()));
    let v = g.constant(Tensor::from_fn(&[1, 3, 1], |i| i as f64));
    let bias = g.constant(Tensor::new(&[1, 2, 3], vec![0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0, f64::NEG_INFINITY]).unwrap());
    let o = g.attention(q, k, v, Some(bias), 1.0).unwrap();
    let p = g.attention_probs(o).unwrap();
    assert_eq!(p[2], 0.0);
    assert_eq!(p[5], 0.0);
    assert!(g.value(o).data().iter().all(|&x| x <= 1.0));
}

fn mlp_loss(params: &Tensor, input: &Tensor) -> (f64, Tensor) {
    // 5 parameters: w1 (2), b1 (1), w2 (1), b2 (1)
    let mut g = Graph::new();
    let p = g.leaf(params.clone(), true);
    let w1 = g.slice(p, 0, 0, 2).unwrap();
    let w1 = g.reshape(w1, &[2, 1]).unwrap();
    let b1 = g.slice(p, 0, 2, 3).unwrap();
    let w2 = g.slice(p, 0, 3, 4).unwrap();
    let w2 = g.reshape(w2, &[1, 1]).unwrap();
    let b2 = g.slice(p, 0, 4, 5).unwrap();
    let x = g.constant(input.clone());
    let h = g.matmul(x, w1).unwrap();
    let h = g.add(h, b1).unwrap();
    let h = g.tanh(h);
    let y = g.matmul(h, w2).unwrap();
    let y = g.add(y, b2).unwrap();
    let y = g.sigmoid(y);
    let t = g.constant(Tensor::full(&[input.shape()[0], 1], 0.25));
    let l = g.mse(y, t).unwrap();
    g.backward(l).unwrap();
    (g.value(l).item(), g.grad(p).unwrap().clone())
}

#[test]
fn small_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = uniform(&[5], &mut rng);
    let input = uniform(&[6, 2], &mut rng);
    let (_, analytic) = mlp_loss(&params, &input);
    let numeric = numeric_gradient(|p| mlp_loss(p, &input).0, &params, 1e-5);
    assert!(Tolerance::KERNEL.accepts(&analytic, &numeric), "{:e}", Tolerance::KERNEL.worst(&analytic, &numeric));
}

#[test]
fn single_threaded_runs_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = uniform(&[5], &mut rng);
    let input = uniform(&[6, 2], &mut rng);
    let a = mlp_loss(&params, &input);
    let b = mlp_loss(&params, &input);
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], values).unwrap());
        let y = g.softmax_last(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn conv_output_matches_naive_loop(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[1, 2, 3, 4], &mut rng);
        let w = uniform(&[2, 2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d_same(xv, wv).unwrap();
        let (h, wd) = (3usize, 4usize);
        for co in 0..2 {
            for yy in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                    acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                    }
                    let got = g.value(y).data()[(co * h + yy) * wd + xx];
                    prop_assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
