//! Central finite differences for validating analytic gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, OpAttrs, OpKind, Tensor, Var};

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Elementwise agreement test: each pair must be within `abs_tol` or within
/// `rel_tol` of the larger magnitude.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Tolerance {
    pub const KERNEL: Tolerance = Tolerance { rel: 1e-4, abs: 1e-7 };
    pub const MODEL: Tolerance = Tolerance { rel: 1e-3, abs: 1e-7 };

    /// Largest relative error among elements that miss the absolute floor.
    pub fn worst(&self, analytic: &Tensor, numeric: &Tensor) -> f64 {
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| {
                let diff = (a - n).abs();
                if diff <= self.abs {
                    0.0
                } else {
                    diff / a.abs().max(n.abs())
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn accepts(&self, analytic: &Tensor, numeric: &Tensor) -> bool {
        analytic.shape() == numeric.shape() && self.worst(analytic, numeric) < self.rel
    }
}

/// Where a kernel input is sampled from.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    Any,
    Positive,
    /// `|x| ≥ 0.1`, keeps kinks (relu) out of the difference stencil.
    AwayFromZero,
}

/// One finite-difference probe configuration for a kernel.
#[derive(Debug, Clone)]
pub struct KernelCase {
    pub kind: OpKind,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub attrs: OpAttrs,
}

fn case(kind: OpKind, inputs: &[(&[usize], Domain)], attrs: OpAttrs) -> KernelCase {
    KernelCase { kind, inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(), attrs }
}

/// Probe configurations covering every [`OpKind`], including the broadcast
/// and batched variants.
pub fn kernel_cases() -> Vec<KernelCase> {
    use Domain::*;
    let none = OpAttrs::default;
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                out.push(case(kind, &[(&[2, 3], Any), (&[2, 3], Any)], none()));
                out.push(case(kind, &[(&[2, 3], Any), (&[3], Any)], none()));
                out.push(case(kind, &[(&[2, 1, 4], Any), (&[3, 1], Any)], none()));
            }
            OpKind::Div => out.push(case(kind, &[(&[2, 3], Any), (&[1, 3], Positive)], none())),
            OpKind::MatMul => {
                out.push(case(kind, &[(&[3, 4], Any), (&[4, 2], Any)], none()));
                out.push(case(kind, &[(&[2, 3, 4], Any), (&[4, 2], Any)], none()));
                out.push(case(kind, &[(&[3, 4], Any), (&[2, 4, 5], Any)], none()));
                out.push(case(kind, &[(&[2, 3, 4], Any), (&[2, 4, 2], Any)], none()));
            }
            OpKind::Sigmoid | OpKind::Tanh | OpKind::Exp | OpKind::SoftmaxLast => out.push(case(kind, &[(&[3, 5], Any)], none())),
            OpKind::Relu => out.push(case(kind, &[(&[3, 5], AwayFromZero)], none())),
            OpKind::Ln => out.push(case(kind, &[(&[4], Positive)], none())),
            OpKind::Scale => out.push(case(kind, &[(&[4], Any)], OpAttrs { scale: Some(-2.5), ..none() })),
            OpKind::Conv2dSame => {
                out.push(case(kind, &[(&[2, 2, 4, 3], Any), (&[3, 2, 3, 3], Any)], none()));
                out.push(case(kind, &[(&[1, 3, 2, 2], Any), (&[2, 3, 1, 1], Any)], none()));
            }
            OpKind::Mean | OpKind::Sum => out.push(case(kind, &[(&[2, 3], Any)], none())),
            OpKind::SumAxis => {
                out.push(case(kind, &[(&[2, 3, 4], Any)], OpAttrs { axis: Some(1), ..none() }));
                out.push(case(kind, &[(&[2, 3, 4], Any)], OpAttrs { axis: Some(2), keepdim: true, ..none() }));
            }
            OpKind::Mse => out.push(case(kind, &[(&[2, 3], Any), (&[2, 3], Any)], none())),
            OpKind::Concat => out.push(case(kind, &[(&[2, 1, 3], Any), (&[2, 2, 3], Any)], OpAttrs { axis: Some(1), ..none() })),
            OpKind::Slice => out.push(case(kind, &[(&[2, 5, 2], Any)], OpAttrs { axis: Some(1), range: Some((1, 4)), ..none() })),
            OpKind::Transpose => out.push(case(kind, &[(&[2, 3, 4], Any)], none())),
            OpKind::Reshape => out.push(case(kind, &[(&[2, 6], Any)], OpAttrs { shape: Some(vec![3, 4]), ..none() })),
            OpKind::LayerNorm => out.push(case(kind, &[(&[3, 6], Any)], OpAttrs { eps: Some(1e-5), ..none() })),
            OpKind::Attention => {
                let attrs = OpAttrs { scale: Some(0.7), ..none() };
                out.push(case(kind, &[(&[2, 3, 4], Any), (&[2, 5, 4], Any), (&[2, 5, 2], Any)], attrs.clone()));
                out.push(case(kind, &[(&[2, 3, 4], Any), (&[2, 5, 4], Any), (&[2, 5, 2], Any), (&[2, 3, 5], Any)], attrs));
            }
            OpKind::Gather => out.push(case(
                kind,
                &[(&[5], Any)],
                OpAttrs { index: Some(Arc::new(vec![4, 0, 0, 2, 1, 4])), shape: Some(vec![2, 3]), ..none() },
            )),
        }
    }
    out
}

fn sample(shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| match domain {
        Domain::Any => rng.random_range(-1.0..1.0),
        Domain::Positive => rng.random_range(0.3..2.0),
        Domain::AwayFromZero => {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        }
    })
}

/// Weighted sum of the op output, so every output element matters.
fn weighted_op(
    c: &KernelCase,
    inputs: &[Tensor],
    weights: Option<&Tensor>,
) -> Result<(f64, Vec<Tensor>, Vec<usize>), crate::AutodiffError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = g.forward_op(c.kind, &vars, &c.attrs)?;
    let shape = g.shape(out).to_vec();
    let Some(w) = weights else { return Ok((0.0, Vec::new(), shape)) };
    let w = g.constant(w.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grads = vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))).collect();
    Ok((value, grads, shape))
}

/// Worst relative error (under `tol`'s absolute floor) of `c` over `points`
/// random evaluation points.
pub fn kernel_error(c: &KernelCase, points: u64, tol: Tolerance) -> Result<f64, crate::AutodiffError> {
    let mut worst = 0.0f64;
    for point in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(point * 7919 + c.kind as u64);
        let inputs: Vec<Tensor> = c.inputs.iter().map(|(s, d)| sample(s, *d, &mut rng)).collect();
        let (_, _, out_shape) = weighted_op(c, &inputs, None)?;
        let weights = sample(&out_shape, Domain::Any, &mut rng);
        let (_, analytic, _) = weighted_op(c, &inputs, Some(&weights))?;
        for (j, a) in analytic.iter().enumerate() {
            let numeric = numeric_gradient(
                |probe| {
                    let mut ins = inputs.clone();
                    ins[j] = probe.clone();
                    weighted_op(c, &ins, Some(&weights)).map(|r| r.0).unwrap_or(f64::NAN)
                },
                &inputs[j],
                1e-5,
            );
            if a.shape() != numeric.shape() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(tol.worst(a, &numeric));
        }
    }
    Ok(worst)
}
