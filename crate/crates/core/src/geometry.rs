//! Metasurface unit-cell geometry.
//!
//! The unit cell is the square `[-0.5, 0.5]^2` (area 1). A design is up to four
//! first-quadrant vertices `(x, y) ∈ [0, 0.5]^2` plus three presence logits.
//! The full polygon is the angle-ordered first-quadrant arc followed by its
//! copies rotated by 90°, 180° and 270°, so every design is exactly C4
//! symmetric.

use std::f64::consts::FRAC_PI_2;

use pcm_autodiff::{sigmoid, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_VERTICES: usize = 4;
/// Largest coordinate a first-quadrant vertex may take (half the cell).
pub const HALF_CELL: f64 = 0.5;
pub const RADIUS_MIN: f64 = 0.05;
pub const RADIUS_MAX: f64 = 0.48;
/// Logit magnitude used for hard on/off vertices.
pub const SATURATED_LOGIT: f64 = 20.0;
/// Presence at or above which a vertex survives export.
pub const ACTIVE_THRESHOLD: f64 = 0.5;

/// Trainable geometry: presence logits for vertices 1..3 and four coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub logits: [f64; 3],
    pub vertices: [[f64; 2]; MAX_VERTICES],
}

#[derive(Serialize, Deserialize)]
struct ShapeRecord {
    logits: [f64; 3],
    vertices: [[f64; 2]; MAX_VERTICES],
    active: [bool; MAX_VERTICES],
}

impl ShapeParams {
    pub fn presence(&self) -> [f64; MAX_VERTICES] {
        presence_chain(self.logits)
    }

    pub fn active(&self) -> [bool; MAX_VERTICES] {
        self.presence().map(|p| p >= ACTIVE_THRESHOLD)
    }

    /// Vertices that survive hard thresholding, in index order.
    pub fn active_vertices(&self) -> Vec<[f64; 2]> {
        let active = self.active();
        self.vertices.iter().zip(active).filter(|(_, a)| *a).map(|(v, _)| *v).collect()
    }

    /// Clamps coordinates into the first quadrant of the cell.
    pub fn clamp_to_cell(&mut self) {
        for v in &mut self.vertices {
            for c in v.iter_mut() {
                *c = if c.is_nan() { 0.0 } else { c.clamp(0.0, HALF_CELL) };
            }
        }
    }

    /// [`clamp_to_cell`](Self::clamp_to_cell), then pulls every vertex back
    /// inside radius [`RADIUS_MAX`] — the fabrication margin sampled designs
    /// respect, and so the region the surrogate has seen.
    pub fn clamp_to_design_bounds(&mut self) {
        self.clamp_to_cell();
        for v in &mut self.vertices {
            let r = v[0].hypot(v[1]);
            if r > RADIUS_MAX {
                v[0] *= RADIUS_MAX / r;
                v[1] *= RADIUS_MAX / r;
            }
        }
    }

    /// Hard-thresholded design polygon.
    pub fn to_polygon(&self) -> Result<PolygonMask> {
        mirror_c4(&self.active_vertices())
    }

    /// Snaps presence to ±saturation and zero-fills the absent vertices.
    pub fn hardened(&self) -> ShapeParams {
        let active = self.active();
        let mut out = self.clone();
        for (l, &a) in out.logits.iter_mut().zip(&active[1..]) {
            *l = if a { SATURATED_LOGIT } else { -SATURATED_LOGIT };
        }
        for (v, a) in out.vertices.iter_mut().zip(active) {
            if !a {
                *v = [0.0, 0.0];
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let rec = ShapeRecord { logits: self.logits, vertices: self.vertices, active: self.active() };
        serde_json::to_string(&rec).expect("plain numeric record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ShapeRecord = serde_json::from_str(text).map_err(|e| Error::Data(format!("shape record: {e}")))?;
        if rec.logits.iter().chain(rec.vertices.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Data("shape record contains non-finite values".into()));
        }
        Ok(ShapeParams { logits: rec.logits, vertices: rec.vertices })
    }

    /// Presence-blended vertices (see [`soft_vertices`]).
    pub fn soft_vertices(&self) -> [[f64; 2]; MAX_VERTICES] {
        soft_vertices(&self.presence(), &self.vertices)
    }

    /// Area of the presence-blended C4 polygon. Vertices are taken in index
    /// order, so this equals the hard fill factor when presence is saturated
    /// and the active vertices already run counter-clockwise (as sampled
    /// shapes do).
    pub fn soft_fill_factor(&self) -> f64 {
        let v = self.soft_vertices();
        let mut twice = 0.0;
        for i in 0..MAX_VERTICES {
            let next = if i + 1 < MAX_VERTICES { v[i + 1] } else { rot90(v[0]) };
            twice += cross(v[i], next);
        }
        2.0 * twice
    }
}

/// `(1, σ(l1), σ(l1)σ(l2), σ(l1)σ(l2)σ(l3))`.
pub fn presence_chain(logits: [f64; 3]) -> [f64; MAX_VERTICES] {
    let mut p = [1.0; MAX_VERTICES];
    for i in 1..MAX_VERTICES {
        p[i] = p[i - 1] * sigmoid(logits[i - 1]);
    }
    p
}

/// Differentiable presence chain over the last axis of `logits` (`[.., 3]` → `[.., 4]`).
pub fn presence_chain_graph(g: &mut Graph, logits: Var) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let axis = shape
        .len()
        .checked_sub(1)
        .filter(|&a| shape[a] == 3)
        .ok_or_else(|| Error::Contract(format!("presence logits must end in an axis of 3, got {shape:?}")))?;
    let mut one_shape = shape.clone();
    one_shape[axis] = 1;
    let mut terms = vec![g.constant(Tensor::full(&one_shape, 1.0))];
    for i in 0..3 {
        let l = g.slice(logits, axis, i, i + 1)?;
        let s = g.sigmoid(l);
        let prev = terms[i];
        terms.push(g.mul(prev, s)?);
    }
    Ok(g.concat(&terms, axis)?)
}

fn rot90(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Presence blending used while optimizing.
///
/// Processing vertices in order, vertex `i` becomes
/// `p_i · v_i + (1 − p_i) · mid(v'_{i−1}, rot90(v_0))`: an absent vertex slides onto
/// the chord that closes the arc, so it adds no area and the map stays smooth.
pub fn soft_vertices(p: &[f64; MAX_VERTICES], v: &[[f64; 2]; MAX_VERTICES]) -> [[f64; 2]; MAX_VERTICES] {
    let closing = rot90(v[0]);
    let mut out = *v;
    for i in 1..MAX_VERTICES {
        for c in 0..2 {
            let mid = 0.5 * (out[i - 1][c] + closing[c]);
            out[i][c] = p[i] * v[i][c] + (1.0 - p[i]) * mid;
        }
    }
    out
}

/// Differentiable soft fill factor from `presence: [4]` and `coords: [4, 2]`.
pub fn soft_fill_factor_graph(g: &mut Graph, presence: Var, coords: Var) -> Result<Var> {
    if g.shape(presence) != [MAX_VERTICES] || g.shape(coords) != [MAX_VERTICES, 2] {
        return Err(Error::Contract(format!(
            "soft fill factor wants presence [4] and coords [4, 2], got {:?} and {:?}",
            g.shape(presence),
            g.shape(coords)
        )));
    }
    let flat = g.reshape(coords, &[2 * MAX_VERTICES])?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ps = Vec::new();
    for i in 0..MAX_VERTICES {
        xs.push(g.slice(flat, 0, 2 * i, 2 * i + 1)?);
        ys.push(g.slice(flat, 0, 2 * i + 1, 2 * i + 2)?);
        ps.push(g.slice(presence, 0, i, i + 1)?);
    }
    // closing vertex rot90(v0) = (-y0, x0)
    let close_x = g.scale(ys[0], -1.0);
    let close_y = xs[0];
    let one = g.constant(Tensor::full(&[1], 1.0));
    let mut bx = vec![xs[0]];
    let mut by = vec![ys[0]];
    for i in 1..MAX_VERTICES {
        let q = g.sub(one, ps[i])?;
        let blend = |g: &mut Graph, prev: Var, close: Var, own: Var| -> Result<Var> {
            let s = g.add(prev, close)?;
            let mid = g.scale(s, 0.5);
            let a = g.mul(ps[i], own)?;
            let b = g.mul(q, mid)?;
            Ok(g.add(a, b)?)
        };
        let nx = blend(g, bx[i - 1], close_x, xs[i])?;
        let ny = blend(g, by[i - 1], close_y, ys[i])?;
        bx.push(nx);
        by.push(ny);
    }
    bx.push(close_x);
    by.push(close_y);
    let mut terms = Vec::new();
    for i in 0..MAX_VERTICES {
        let a = g.mul(bx[i], by[i + 1])?;
        let b = g.mul(by[i], bx[i + 1])?;
        terms.push(g.sub(a, b)?);
    }
    let stacked = g.concat(&terms, 0)?;
    let total = g.sum(stacked);
    Ok(g.scale(total, 2.0))
}

/// Closed C4-symmetric polygon in counter-clockwise order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolygonMask {
    vertices: Vec<[f64; 2]>,
}

/// Builds the full polygon from 1–4 first-quadrant vertices.
///
/// Vertices are put in canonical order (polar angle, ties by radius) before the
/// arc is rotated into the other three quadrants.
pub fn mirror_c4(q1: &[[f64; 2]]) -> Result<PolygonMask> {
    if q1.is_empty() || q1.len() > MAX_VERTICES {
        return Err(Error::DegenerateShape(format!("need 1 to 4 vertices, got {}", q1.len())));
    }
    for v in q1 {
        if !(v[0].is_finite() && v[1].is_finite()) || v[0] < 0.0 || v[1] < 0.0 {
            return Err(Error::DegenerateShape(format!("vertex {v:?} is not in the first quadrant")));
        }
        if v[0] == 0.0 && v[1] == 0.0 {
            return Err(Error::DegenerateShape("vertex at the cell centre".into()));
        }
    }
    let mut arc = q1.to_vec();
    arc.sort_by(|a, b| {
        let ka = (a[1].atan2(a[0]), a[0].hypot(a[1]));
        let kb = (b[1].atan2(b[0]), b[0].hypot(b[1]));
        ka.partial_cmp(&kb).expect("finite keys")
    });
    let mut ring = Vec::with_capacity(4 * arc.len());
    for quarter in 0..4 {
        for &v in &arc {
            let mut r = v;
            for _ in 0..quarter {
                r = rot90(r);
            }
            if ring.last() != Some(&r) {
                ring.push(r);
            }
        }
    }
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    let poly = PolygonMask { vertices: ring };
    let area = poly.area();
    if !(area > 1e-12) {
        return Err(Error::DegenerateShape(format!("polygon area {area:e}")));
    }
    if !poly.is_simple() {
        return Err(Error::DegenerateShape("polygon self-intersects".into()));
    }
    Ok(poly)
}

impl PolygonMask {
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Signed shoelace area (positive for counter-clockwise order).
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let twice: f64 = (0..n).map(|i| cross(self.vertices[i], self.vertices[(i + 1) % n])).sum();
        0.5 * twice
    }

    /// Fraction of the unit cell covered.
    pub fn fill_factor(&self) -> f64 {
        self.area().clamp(0.0, 1.0)
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let edge = |i: usize| (self.vertices[i], self.vertices[(i + 1) % n]);
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                let (a, b) = edge(i);
                let (c, d) = edge(j);
                if adjacent {
                    // adjacent edges share one endpoint; they fail only by folding back
                    let (shared, p, q) = if b == c { (b, a, d) } else { (a, b, c) };
                    let u = [p[0] - shared[0], p[1] - shared[1]];
                    let w = [q[0] - shared[0], q[1] - shared[1]];
                    if cross(u, w).abs() <= 1e-15 && u[0] * w[0] + u[1] * w[1] > 0.0 {
                        return false;
                    }
                } else if segments_touch(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// `size × size` coverage raster sampled at pixel centres.
    ///
    /// Only one pixel of each 90°-rotation orbit is tested; the answer is
    /// copied to the other three, so the raster is exactly rotation invariant.
    pub fn rasterize(&self, size: usize) -> Raster {
        let mut cells = vec![false; size * size];
        let mut done = vec![false; size * size];
        let center = |i: usize, j: usize| [(j as f64 + 0.5) / size as f64 - 0.5, 0.5 - (i as f64 + 0.5) / size as f64];
        for i in 0..size {
            for j in 0..size {
                if done[i * size + j] {
                    continue;
                }
                let inside = self.contains(center(i, j));
                let (mut a, mut b) = (i, j);
                for _ in 0..4 {
                    cells[a * size + b] = inside;
                    done[a * size + b] = true;
                    (a, b) = Raster::rotate_index(size, a, b);
                }
            }
        }
        Raster { size, cells }
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    cross([b[0] - a[0], b[1] - a[1]], [c[0] - a[0], c[1] - a[1]])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_touch(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Row-major binary coverage grid; row 0 is the top of the cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    size: usize,
    cells: Vec<bool>,
}

impl Raster {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.size + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Index of pixel `(row, col)` after a counter-clockwise quarter turn.
    fn rotate_index(size: usize, row: usize, col: usize) -> (usize, usize) {
        (size - 1 - col, row)
    }

    /// The grid rotated counter-clockwise by 90°.
    pub fn rotate90(&self) -> Raster {
        let mut cells = vec![false; self.cells.len()];
        for i in 0..self.size {
            for j in 0..self.size {
                let (a, b) = Self::rotate_index(self.size, i, j);
                cells[a * self.size + b] = self.get(i, j);
            }
        }
        Raster { size: self.size, cells }
    }
}

/// Dataset shape with `nv` active vertices at equally spaced angles.
pub fn sample_dataset_shape(seed: u64, nv: usize) -> Result<ShapeParams> {
    sample_shape(&mut ChaCha8Rng::seed_from_u64(seed), nv)
}

/// As [`sample_dataset_shape`], drawing radii from `rng`.
pub fn sample_shape<R: Rng + ?Sized>(rng: &mut R, nv: usize) -> Result<ShapeParams> {
    if !(1..=MAX_VERTICES).contains(&nv) {
        return Err(Error::Contract(format!("vertex count {nv} outside 1..=4")));
    }
    let mut shape = ShapeParams { logits: [-SATURATED_LOGIT; 3], vertices: [[0.0; 2]; MAX_VERTICES] };
    for i in 0..nv {
        let theta = (i as f64 + 0.5) * FRAC_PI_2 / nv as f64;
        let r = rng.random_range(RADIUS_MIN..=RADIUS_MAX);
        shape.vertices[i] = [r * theta.cos(), r * theta.sin()];
        if i > 0 {
            shape.logits[i - 1] = SATURATED_LOGIT;
        }
    }
    Ok(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn chain_examples() {
        assert_eq!(presence_chain([0.0; 3]), [1.0, 0.5, 0.25, 0.125]);
        let sat = presence_chain([20.0; 3]);
        assert!(sat.iter().all(|&p| close(p, 1.0, 1e-8)));
        let off = presence_chain([-20.0, 0.0, 0.0]);
        assert_eq!(off[0], 1.0);
        assert!(close(off[1], 2.061_153_6e-9, 1e-15));
        assert!(close(off[2], 1.030_576_8e-9, 1e-15));
        assert!(close(off[3], 5.152_884e-10, 1e-15));
    }

    #[test]
    fn graph_chain_agrees() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap(), true);
        let p = presence_chain_graph(&mut g, l).unwrap();
        let v = g.value(p).data().to_vec();
        assert_eq!(&v[..4], &presence_chain([0.3, -1.0, 2.0]));
        assert_eq!(&v[4..], &[1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn single_vertex_is_an_axis_square() {
        let poly = mirror_c4(&[[0.3, 0.3]]).unwrap();
        assert_eq!(poly.vertices().len(), 4);
        assert!(close(poly.area(), 0.36, 1e-15));
    }

    #[test]
    fn axis_vertices_make_a_diamond() {
        let poly = mirror_c4(&[[0.5, 0.0], [0.0, 0.5]]).unwrap();
        assert_eq!(poly.vertices(), &[[0.5, 0.0], [0.0, 0.5], [-0.5, 0.0], [0.0, -0.5]]);
        assert!(close(poly.fill_factor(), 0.5, 1e-15));
    }

    #[test]
    fn quarter_square_corners_fill_the_cell() {
        let poly = mirror_c4(&[[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]).unwrap();
        assert!(close(poly.fill_factor(), 1.0, 1e-15));
        let half = mirror_c4(&[[0.5, 0.0], [0.5, 0.25]]);
        // (0.5, 0.25) rotated lands on (-0.25, 0.5): an octagon, still simple
        assert!(half.is_ok());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(mirror_c4(&[]), Err(Error::DegenerateShape(_))));
        assert!(matches!(mirror_c4(&[[0.0, 0.0]]), Err(Error::DegenerateShape(_))));
        assert!(matches!(mirror_c4(&[[-0.1, 0.2]]), Err(Error::DegenerateShape(_))));
    }

    #[test]
    fn ccw_and_rotation_invariant_raster() {
        let poly = mirror_c4(&[[0.4, 0.05], [0.2, 0.3], [0.02, 0.45]]).unwrap();
        assert!(poly.area() > 0.0);
        let r = poly.rasterize(64);
        assert_eq!(r.rotate90(), r);
        assert!(r.count() > 0);
        let four = r.rotate90().rotate90().rotate90().rotate90();
        assert_eq!(four, r);
    }

    #[test]
    fn sampled_angles() {
        let s = sample_dataset_shape(3, 1).unwrap();
        let [x, y] = s.vertices[0];
        assert!(close(y.atan2(x), std::f64::consts::FRAC_PI_4, 1e-12));
        assert_eq!(s.active(), [true, false, false, false]);
        let s4 = sample_dataset_shape(3, 4).unwrap();
        for (i, v) in s4.vertices.iter().enumerate() {
            let want = (i as f64 + 0.5) * std::f64::consts::PI / 8.0;
            assert!(close(v[1].atan2(v[0]), want, 1e-12));
            let r = v[0].hypot(v[1]);
            assert!((RADIUS_MIN..=RADIUS_MAX + 1e-12).contains(&r));
        }
        assert_eq!(sample_dataset_shape(9, 3).unwrap(), sample_dataset_shape(9, 3).unwrap());
        assert!(sample_dataset_shape(0, 0).is_err());
        assert!(sample_dataset_shape(0, 5).is_err());
    }

    #[test]
    fn soft_area_matches_hard_area_when_saturated() {
        for nv in 1..=4 {
            for seed in 0..20 {
                let s = sample_dataset_shape(seed, nv).unwrap();
                let hard = s.to_polygon().unwrap().fill_factor();
                assert!(close(s.soft_fill_factor(), hard, 1e-8), "nv={nv} seed={seed}");
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let s = sample_dataset_shape(11, 2).unwrap();
        let text = s.to_json();
        assert!(text.contains("\"active\":[true,true,false,false]"));
        assert_eq!(ShapeParams::from_json(&text).unwrap(), s);
        assert!(ShapeParams::from_json("{}").is_err());
    }

    #[test]
    fn clamp_and_harden() {
        let mut s = ShapeParams { logits: [3.0, -4.0, 1.0], vertices: [[0.7, -0.1], [0.2, 0.2], [0.3, 0.1], [f64::NAN, 0.1]] };
        s.clamp_to_cell();
        assert_eq!(s.vertices[0], [0.5, 0.0]);
        assert_eq!(s.vertices[3], [0.0, 0.1]);
        let h = s.hardened();
        assert_eq!(h.logits, [20.0, -20.0, -20.0]);
        assert_eq!(h.vertices[2], [0.0, 0.0]);
    }
}
