mod common;

use common::*;
use pcm_autodiff::check::Tolerance;
use pcm_autodiff::{Graph, Tensor};
use pcm_codesign::checkpoint::Checkpoint;
use pcm_codesign::geometry::{sample_dataset_shape, ShapeParams, SATURATED_LOGIT};
use pcm_codesign::oracle::{generate_dataset, Oracle};
use pcm_codesign::surrogate::*;
use pcm_codesign::Error;
use proptest::prelude::*;

fn toy_s2f() -> SurrogateConfig {
    SurrogateConfig { d_model: 8, heads: 2, blocks: 1, ff_mult: 2, m: 3, n: 5 }
}

fn toy_f2s() -> InverseConfig {
    InverseConfig { hidden: 6, layers: 2, m: 3, n: 5 }
}

fn shape(nv: usize, seed: u64) -> ShapeParams {
    sample_dataset_shape(seed, nv).unwrap()
}

fn shape_tensors(s: &ShapeParams) -> (Tensor, Tensor) {
    (Tensor::new(&[1, 3], s.logits.to_vec()).unwrap(), Tensor::new(&[1, 4, 2], s.vertices.iter().flatten().copied().collect()).unwrap())
}

#[test]
fn surrogate_parameter_gradients() {
    let mut model = SurrogateModel::new(toy_s2f(), 4).unwrap();
    let shapes = [shape(4, 1), shape(2, 2)];
    let worst = param_grad_error(
        &mut model,
        |m| &mut m.store,
        6,
        1,
        Tolerance::MODEL,
        |m, g| {
            let enc = shape_batch(g, &[&shapes[0], &shapes[1]]).unwrap();
            let y = m.forward(g, &enc).unwrap();
            weighted_sum(g, y, 9)
        },
    );
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn surrogate_gradient_wrt_vertex_coordinates() {
    let model = SurrogateModel::new(toy_s2f(), 5).unwrap();
    let mut s = shape(3, 4);
    s.logits = [1.5, -0.5, 0.7];
    let (l, c) = shape_tensors(&s);
    let worst = input_grad_error(&c, Tolerance::MODEL, |g, cv| {
        let lv = g.constant(l.clone());
        let y = model.forward_shape(g, lv, cv).unwrap();
        weighted_sum(g, y, 3)
    });
    assert!(worst < 1e-3, "coords: {worst:e}");
    let worst = input_grad_error(&l, Tolerance::MODEL, |g, lv| {
        let cv = g.constant(c.clone());
        let y = model.forward_shape(g, lv, cv).unwrap();
        weighted_sum(g, y, 3)
    });
    assert!(worst < 1e-3, "logits: {worst:e}");
}

#[test]
fn inverse_network_gradients() {
    let mut model = Filter2ShapeModel::new(toy_f2s(), 6).unwrap();
    let bank = probe_weights(&[2, 3, 5], 8).map(|v| 0.5 + 0.4 * v);
    let targets = [shape(1, 3), shape(4, 5)];
    let worst = param_grad_error(
        &mut model,
        |m| &mut m.store,
        8,
        2,
        Tolerance::MODEL,
        |m, g| {
            let x = g.constant(bank.clone());
            let (l, c) = m.forward(g, x).unwrap();
            shape_loss(g, l, c, &[&targets[0], &targets[1]]).unwrap()
        },
    );
    assert!(worst < 1e-3, "worst relative error {worst:e}");
    let worst = input_grad_error(&bank, Tolerance::MODEL, |g, x| {
        let (l, c) = model.forward(g, x).unwrap();
        let a = weighted_sum(g, l, 1);
        let b = weighted_sum(g, c, 2);
        g.add(a, b).unwrap()
    });
    assert!(worst < 1e-3, "bank input: {worst:e}");
}

#[test]
fn zeroed_head_predicts_one_half() {
    let mut model = SurrogateModel::new(SurrogateConfig::default(), 1).unwrap();
    model.zero_output_head();
    let bank = model.predict(&shape(3, 7)).unwrap();
    assert_eq!((bank.rows(), bank.cols()), (11, 100));
    assert!(bank.data().iter().all(|&v| v == 0.5));
}

#[test]
fn predictions_lie_in_the_unit_interval() {
    let model = SurrogateModel::new(SurrogateConfig::default(), 2).unwrap();
    for nv in 1..=4 {
        let b = model.predict(&shape(nv, nv as u64)).unwrap();
        assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn inverse_coordinates_stay_in_the_quadrant() {
    let model = Filter2ShapeModel::new(InverseConfig::default(), 3).unwrap();
    let bank = Oracle::default().filterbank_for_fill(0.4).unwrap();
    let s = model.infer(&bank).unwrap();
    assert!(s.vertices.iter().flatten().all(|c| (0.0..=0.5).contains(c)));
}

#[test]
fn shape_loss_ignores_absent_coordinates() {
    let target = shape(2, 11);
    let eval = |coords: Vec<f64>| {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[1, 3], vec![0.3, -0.2, 0.1]).unwrap());
        let c = g.constant(Tensor::new(&[1, 4, 2], coords).unwrap());
        let loss = shape_loss(&mut g, l, c, &[&target]).unwrap();
        g.value(loss).item()
    };
    let base = vec![0.1, 0.2, 0.3, 0.1, 0.25, 0.25, 0.4, 0.05];
    let mut moved = base.clone();
    moved[4..].copy_from_slice(&[0.0, 0.5, 0.33, 0.44]);
    assert_eq!(eval(base.clone()), eval(moved));
    let mut live = base.clone();
    live[0] += 0.1;
    assert_ne!(eval(base), eval(live));
}

#[test]
fn memorizes_a_single_record() {
    let data = generate_dataset(&Oracle::default(), 1, 3).unwrap();
    let mut model = SurrogateModel::new(SurrogateConfig::default(), 1).unwrap();
    let opts = TrainOptions { epochs: 150, batch: 1, lr: 3e-3, lr_floor: 0.1, seed: 0 };
    let report = train_surrogate(&mut model, &data, &opts).unwrap();
    let pred = model.predict(&data.records[0].shape).unwrap();
    let mse = pred.mse(&data.records[0].bank).unwrap();
    assert!(mse < 1e-4, "single-record mse {mse}; last epoch {:?}", report.rows.last());
}

#[test]
fn training_is_deterministic() {
    let data = generate_dataset(&Oracle::default(), 40, 2).unwrap();
    let run = || {
        let mut m = SurrogateModel::new(toy_s2f_full(), 7).unwrap();
        let r = train_surrogate(&mut m, &data, &TrainOptions { epochs: 2, batch: 8, lr: 1e-3, lr_floor: 0.1, seed: 5 }).unwrap();
        (m.to_checkpoint().to_bytes(), r.to_csv())
    };
    assert_eq!(run(), run());
}

fn toy_s2f_full() -> SurrogateConfig {
    SurrogateConfig { d_model: 16, heads: 2, blocks: 1, ff_mult: 2, ..SurrogateConfig::default() }
}

#[test]
fn checkpoints_restore_identical_predictions() {
    let s2f = SurrogateModel::new(toy_s2f_full(), 3).unwrap();
    let back = SurrogateModel::from_checkpoint(&Checkpoint::from_bytes(&s2f.to_checkpoint().to_bytes()).unwrap()).unwrap();
    let s = shape(4, 2);
    assert_eq!(s2f.predict(&s).unwrap(), back.predict(&s).unwrap());
    let f2s = Filter2ShapeModel::new(InverseConfig::default(), 3).unwrap();
    let back = Filter2ShapeModel::from_checkpoint(&Checkpoint::from_bytes(&f2s.to_checkpoint().to_bytes()).unwrap()).unwrap();
    let bank = Oracle::default().filterbank_for_fill(0.2).unwrap();
    assert_eq!(f2s.infer(&bank).unwrap(), back.infer(&bank).unwrap());
    // wrong model kind
    assert!(Filter2ShapeModel::from_checkpoint(&s2f.to_checkpoint()).is_err());
}

#[test]
fn tandem_requires_and_preserves_a_frozen_surrogate() {
    let data = generate_dataset(&Oracle::default(), 30, 4).unwrap();
    let mut s2f = SurrogateModel::new(toy_s2f_full(), 1).unwrap();
    let mut f2s = Filter2ShapeModel::new(InverseConfig { hidden: 32, layers: 1, ..InverseConfig::default() }, 2).unwrap();
    let opts = TrainOptions { epochs: 2, batch: 8, lr: 1e-3, lr_floor: 0.1, seed: 0 };
    assert!(matches!(finetune_tandem(&mut f2s, &s2f, &data, &opts), Err(Error::Contract(_))));
    s2f.store.freeze();
    let before = s2f.to_checkpoint().to_bytes();
    let f2s_before = f2s.to_checkpoint().to_bytes();
    let (_, test) = split_indices(data.records.len());
    let pre = tandem_mse(&s2f, &f2s, &data, &test).unwrap();
    finetune_tandem(&mut f2s, &s2f, &data, &opts).unwrap();
    assert_eq!(s2f.to_checkpoint().to_bytes(), before);
    assert!(!s2f.store.has_any_grad());
    assert_ne!(f2s.to_checkpoint().to_bytes(), f2s_before);
    assert!(tandem_mse(&s2f, &f2s, &data, &test).unwrap().is_finite() && pre.is_finite());
}

#[test]
fn dimension_mismatch_is_a_data_error() {
    let data = generate_dataset(&Oracle::default(), 3, 4).unwrap();
    let mut m = SurrogateModel::new(toy_s2f(), 1).unwrap();
    assert!(matches!(train_surrogate(&mut m, &data, &TrainOptions::default()), Err(Error::Data(_))));
}

#[test]
fn projection_of_a_trained_pair_stays_close_in_spectrum() {
    // untrained pair: only the contract (valid shape back) is checked here
    let mut s2f = SurrogateModel::new(toy_s2f_full(), 1).unwrap();
    let mut f2s = Filter2ShapeModel::new(InverseConfig::default(), 2).unwrap();
    s2f.store.freeze();
    f2s.store.freeze();
    let p = project_shape(&s2f, &f2s, &shape(3, 1)).unwrap();
    assert!(p.vertices.iter().flatten().all(|c| (0.0..=0.5).contains(c)));
    assert!(p.logits.iter().all(|l| l.is_finite()));
}

#[test]
fn split_is_stable_and_disjoint() {
    let (train, test) = split_indices(1000);
    assert_eq!(train.len() + test.len(), 1000);
    assert!(test.len() > 50 && test.len() < 150, "{}", test.len());
    assert!(test.iter().all(|&i| is_test_record(i)) && train.iter().all(|&i| !is_test_record(i)));
    let (t1, _) = split_indices(1);
    assert_eq!(t1, vec![0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_vertices_do_not_affect_predictions(nv in 1usize..4, seed in 0u64..500, x in 0.0..0.5f64, y in 0.0..0.5f64) {
        let model = SurrogateModel::new(toy_s2f_full(), 9).unwrap();
        let mut s = shape(nv, seed);
        for i in nv..4 {
            s.logits[i - 1] = -SATURATED_LOGIT;
        }
        let base = model.predict(&s).unwrap();
        let mut moved = s.clone();
        for v in &mut moved.vertices[nv..] {
            *v = [x, y];
        }
        let other = model.predict(&moved).unwrap();
        let worst = base.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-10, "masked vertex moved prediction by {}", worst);
    }

    #[test]
    fn batch_and_single_predictions_agree(seed in 0u64..500) {
        let model = SurrogateModel::new(toy_s2f_full(), 4).unwrap();
        let (a, b) = (shape(2, seed), shape(4, seed + 1));
        let batch = model.predict_batch(&[&a, &b]).unwrap();
        for (s, bank) in [(&a, &batch[0]), (&b, &batch[1])] {
            let single = model.predict(s).unwrap();
            let worst = single.data().iter().zip(bank.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(worst < 1e-12);
        }
    }
}
