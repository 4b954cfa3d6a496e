mod common;

use common::ray_cast;
use pcm_autodiff::check::{numeric_gradient, Tolerance};
use pcm_autodiff::{Graph, Tensor};
use pcm_codesign::geometry::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q1_vertex() -> impl Strategy<Value = [f64; 2]> {
    (0.0..=HALF_CELL, 0.0..=HALF_CELL).prop_map(|(x, y)| [x, y])
}

fn any_shape() -> impl Strategy<Value = ShapeParams> {
    (prop::array::uniform3(-6.0..6.0f64), prop::array::uniform4(q1_vertex()))
        .prop_map(|(logits, vertices)| ShapeParams { logits, vertices })
}

#[test]
fn presence_chain_is_the_product_of_logistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let l: [f64; 3] = std::array::from_fn(|_| rng.random_range(-8.0..8.0));
        let p = presence_chain(l);
        let s: Vec<f64> = l.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let want = [1.0, s[0], s[0] * s[1], s[0] * s[1] * s[2]];
        for i in 0..4 {
            assert!((p[i] - want[i]).abs() <= 1e-15, "{p:?} vs {want:?}");
        }
        let mut g = Graph::new();
        let lv = g.constant(Tensor::new(&[3], l.to_vec()).unwrap());
        let pv = presence_chain_graph(&mut g, lv).unwrap();
        assert_eq!(g.value(pv).data(), &p[..]);
    }
}

#[test]
fn rasters_are_quarter_turn_invariant_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 100 {
        let nv = rng.random_range(1..=MAX_VERTICES);
        let shape = sample_shape(&mut rng, nv).unwrap();
        // jitter off the equal-angle layout so corners land anywhere
        let verts: Vec<[f64; 2]> = shape
            .active_vertices()
            .iter()
            .map(|v| [(v[0] + rng.random_range(-0.04..0.04)).clamp(0.0, 0.5), (v[1] + rng.random_range(-0.04..0.04)).clamp(0.0, 0.5)])
            .collect();
        let Ok(poly) = mirror_c4(&verts) else { continue };
        for size in [17, 32, 64] {
            let r = poly.rasterize(size);
            assert_eq!(r.rotate90(), r, "size {size}, vertices {verts:?}");
            assert_eq!(r.rotate90().rotate90().rotate90().rotate90(), r);
        }
        checked += 1;
    }
}

#[test]
fn shoelace_matches_monte_carlo_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let samples = 1_000_000usize;
    for (k, nv) in [1usize, 2, 3, 4].into_iter().enumerate() {
        let poly = sample_dataset_shape(900 + k as u64, nv).unwrap().to_polygon().unwrap();
        let hits = (0..samples).filter(|_| ray_cast(poly.vertices(), [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])).count();
        let est = hits as f64 / samples as f64;
        let f = poly.fill_factor();
        let sigma = (f * (1.0 - f) / samples as f64).sqrt();
        assert!((est - f).abs() <= 3.0 * sigma, "nv {nv}: shoelace {f}, MC {est} ± {sigma}");
    }
}

#[test]
fn single_vertex_is_a_centred_square() {
    let p = mirror_c4(&[[0.2, 0.2]]).unwrap();
    assert!((p.area() - 0.16).abs() < 1e-15);
    assert!(p.contains([0.0, 0.0]) && p.contains([0.19, -0.19]) && !p.contains([0.21, 0.0]));
}

#[test]
fn soft_fill_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let logits: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let coords: Vec<f64> = (0..8).map(|_| rng.random_range(0.02..0.48)).collect();
        let graph_value = |l: &[f64], c: &[f64]| {
            let mut g = Graph::new();
            let lv = g.leaf(Tensor::new(&[3], l.to_vec()).unwrap(), true);
            let cv = g.leaf(Tensor::new(&[4, 2], c.to_vec()).unwrap(), true);
            let p = presence_chain_graph(&mut g, lv).unwrap();
            let f = soft_fill_factor_graph(&mut g, p, cv).unwrap();
            g.backward(f).unwrap();
            (g.value(f).item(), g.grad(lv).unwrap().clone(), g.grad(cv).unwrap().clone())
        };
        // the plain f64 path serves as the oracle
        let plain = |l: &[f64], c: &[f64]| {
            let s = ShapeParams { logits: [l[0], l[1], l[2]], vertices: std::array::from_fn(|i| [c[2 * i], c[2 * i + 1]]) };
            s.soft_fill_factor()
        };
        let (v, gl, gc) = graph_value(&logits, &coords);
        assert!((v - plain(&logits, &coords)).abs() < 1e-14);
        let lt = Tensor::new(&[3], logits.to_vec()).unwrap();
        let ct = Tensor::new(&[4, 2], coords.clone()).unwrap();
        let nl = numeric_gradient(|t| plain(t.data(), &coords), &lt, 1e-6);
        let nc = numeric_gradient(|t| plain(&logits, t.data()), &ct, 1e-6);
        assert!(Tolerance::KERNEL.accepts(&gl, &nl), "logits: {:e}", Tolerance::KERNEL.worst(&gl, &nl));
        assert!(Tolerance::KERNEL.accepts(&gc, &nc), "coords: {:e}", Tolerance::KERNEL.worst(&gc, &nc));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn saturated_soft_fill_equals_hard_area(shape in any_shape()) {
        // the soft form follows index order, so present the arc counter-clockwise
        let mut shape = shape;
        shape.vertices.sort_by(|a, b| a[1].atan2(a[0]).total_cmp(&b[1].atan2(b[0])));
        let hard = shape.hardened();
        // σ(±20) misses 0/1 by 2e-9, which bounds the blend error
        if let Ok(poly) = hard.to_polygon() {
            prop_assert!((hard.soft_fill_factor() - poly.fill_factor()).abs() < 1e-7,
                "soft {} hard {}", hard.soft_fill_factor(), poly.fill_factor());
        }
    }

    #[test]
    fn presence_is_monotone_and_bounded(l in prop::array::uniform3(-40.0..40.0f64)) {
        let p = presence_chain(l);
        prop_assert_eq!(p[0], 1.0);
        for i in 1..4 {
            prop_assert!(p[i] >= 0.0 && p[i] <= p[i - 1]);
        }
    }

    #[test]
    fn clamped_shapes_stay_in_the_quadrant(shape in any_shape(), dx in -1.0..1.0f64) {
        let mut s = shape;
        for v in &mut s.vertices { v[0] += dx; v[1] -= dx; }
        s.clamp_to_cell();
        prop_assert!(s.vertices.iter().flatten().all(|c| (0.0..=HALF_CELL).contains(c)));
    }

    #[test]
    fn design_bounds_cap_the_radius(shape in any_shape(), scale in 0.5..3.0f64) {
        let mut s = shape;
        for v in &mut s.vertices { v[0] *= scale; v[1] *= scale; }
        let before = s.clone();
        s.clamp_to_design_bounds();
        for (v, b) in s.vertices.iter().zip(&before.vertices) {
            prop_assert!(v[0] >= 0.0 && v[1] >= 0.0 && v[0].hypot(v[1]) <= RADIUS_MAX + 1e-12);
            // already feasible vertices are left alone
            if b[0].hypot(b[1]) <= RADIUS_MAX && b[0] <= HALF_CELL && b[1] <= HALF_CELL {
                prop_assert_eq!(v, b);
            }
        }
    }

    #[test]
    fn polygon_is_inside_the_cell_and_c4(shape in any_shape()) {
        if let Ok(poly) = shape.to_polygon() {
            prop_assert!(poly.fill_factor() >= 0.0 && poly.fill_factor() <= 1.0);
            let r = poly.rasterize(24);
            prop_assert_eq!(r.rotate90(), r);
            for v in poly.vertices() {
                prop_assert!(poly.contains([-v[1] * 0.999, v[0] * 0.999]) == poly.contains([v[0] * 0.999, v[1] * 0.999]));
            }
        }
    }

    #[test]
    fn json_round_trip(shape in any_shape()) {
        prop_assert_eq!(ShapeParams::from_json(&shape.to_json()).unwrap(), shape);
    }

    #[test]
    fn hardened_presence_matches_active(shape in any_shape()) {
        let h = shape.hardened();
        prop_assert_eq!(h.active(), shape.active());
        prop_assert_eq!(h.active_vertices(), shape.active_vertices());
    }
}
