//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use pcm_autodiff::check::Tolerance;
use pcm_autodiff::{Graph, ParamStore, Tensor, Var};
use pcm_codesign::oracle::FilterBank;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference check of `d loss / d params` for up to `per_tensor`
/// sampled entries of every parameter tensor in `store_of(model)`. Returns
/// the worst relative error under `tol`'s absolute floor.
pub fn param_grad_error<M>(
    model: &mut M,
    store_of: fn(&mut M) -> &mut ParamStore,
    per_tensor: usize,
    seed: u64,
    tol: Tolerance,
    loss: impl Fn(&M, &mut Graph) -> Var,
) -> f64 {
    store_of(model).zero_grads();
    let mut g = Graph::new();
    let l = loss(model, &mut g);
    g.backward(l).unwrap();
    g.write_param_grads(store_of(model));
    let ids: Vec<_> = store_of(model).ids().collect();
    let eval = |m: &M| {
        let mut g = Graph::new();
        let l = loss(m, &mut g);
        g.value(l).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for id in ids {
        let store = store_of(model);
        let n = store.value(id).numel();
        let analytic = store.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let orig = store_of(model).value(id).data()[i];
            let h = 1e-5 * orig.abs().max(1.0);
            store_of(model).value_mut(id).data_mut()[i] = orig + h;
            let up = eval(model);
            store_of(model).value_mut(id).data_mut()[i] = orig - h;
            let down = eval(model);
            store_of(model).value_mut(id).data_mut()[i] = orig;
            let num = Tensor::new(&[1], vec![(up - down) / (2.0 * h)]).unwrap();
            let ana = Tensor::new(&[1], vec![analytic.data()[i]]).unwrap();
            worst = worst.max(tol.worst(&ana, &num));
        }
    }
    store_of(model).zero_grads();
    worst
}

/// Worst relative error of the gradient wrt a leaf input `x`.
pub fn input_grad_error(x: &Tensor, tol: Tolerance, loss: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let l = loss(&mut g, v);
    g.backward(l).unwrap();
    let analytic = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = pcm_autodiff::check::numeric_gradient(
        |t| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let l = loss(&mut g, v);
            g.value(l).item()
        },
        x,
        1e-5,
    );
    tol.worst(&analytic, &numeric)
}

/// Fixed random weights for a weighted-sum loss, so every output matters.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let w = g.constant(probe_weights(g.shape(y), seed));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// One-sided Jacobi: rotate row pairs until mutually orthogonal; the row
/// norms are then the singular values.
pub fn jacobi_singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let mut a: Vec<Vec<f64>> = data.chunks(cols).map(|r| r.to_vec()).collect();
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..rows {
            for q in p + 1..rows {
                let alpha: f64 = a[p].iter().map(|v| v * v).sum();
                let beta: f64 = a[q].iter().map(|v| v * v).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    (*x, *y) = (cs * *x - sn * *y, sn * *x + cs * *y);
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    a.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// `σ_max / σ_min` by the Jacobi route.
pub fn oracle_cond(bank: &FilterBank) -> f64 {
    let s = jacobi_singular_values(bank.rows(), bank.cols(), bank.data());
    s.iter().cloned().fold(0.0, f64::max) / s.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Even-odd ray casting, written independently of the library's test.
pub fn ray_cast(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}
