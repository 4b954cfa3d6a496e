//! Synthetic SWIR scenes: linear mixtures of smooth endmember spectra with
//! Gaussian absorption dips, plus two deliberately noisy channels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::materials::SpectralGrid;
use crate::nn::child_seed;
use crate::sensing::HyperCube;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub endmembers: usize,
    /// Absorption dips per endmember.
    pub dips: usize,
    pub dip_width_um: (f64, f64),
    pub dip_depth: (f64, f64),
    /// Spatial frequencies (cycles per scene) used for abundance fields.
    pub smoothness: f64,
    /// Softmax temperature of the abundance fields; larger is blockier.
    pub contrast: f64,
    pub bad_bands: [usize; 2],
    /// Relative standard deviation of the multiplicative bad-band noise.
    pub bad_band_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            endmembers: 4,
            dips: 3,
            dip_width_um: (0.02, 0.12),
            dip_depth: (0.1, 0.6),
            smoothness: 2.0,
            contrast: 4.0,
            bad_bands: [26, 60],
            bad_band_noise: 0.1,
            seed: 1,
        }
    }
}

/// One reflectance spectrum on `grid`: smooth baseline times absorption dips.
fn endmember<R: Rng>(spec: &SceneSpec, grid: &SpectralGrid, rng: &mut R) -> Vec<f64> {
    let c = grid.centers();
    let (lo, hi) = (c[0], c[c.len() - 1]);
    let level = rng.random_range(0.25..0.8);
    let slope = rng.random_range(-0.25..0.25);
    let bend = rng.random_range(-0.2..0.2);
    let dips: Vec<(f64, f64, f64)> = (0..spec.dips)
        .map(|_| {
            (
                rng.random_range(lo..hi),
                rng.random_range(spec.dip_width_um.0..=spec.dip_width_um.1),
                rng.random_range(spec.dip_depth.0..=spec.dip_depth.1),
            )
        })
        .collect();
    c.iter()
        .map(|&wl| {
            let t = (wl - lo) / (hi - lo);
            let base = (level + slope * (t - 0.5) + bend * (t - 0.5) * (t - 0.5)).clamp(0.05, 0.95);
            let keep: f64 = dips.iter().map(|&(mu, w, d)| 1.0 - d * (-(wl - mu).powi(2) / (2.0 * w * w)).exp()).product();
            (base * keep).clamp(0.0, 1.0)
        })
        .collect()
}

/// Abundance maps `[pixel][endmember]`, each row on the simplex.
fn abundances<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Vec<Vec<f64>> {
    let (h, w, e) = (spec.height, spec.width, spec.endmembers);
    let waves = 4;
    let fields: Vec<Vec<(f64, f64, f64, f64)>> = (0..e)
        .map(|_| {
            (0..waves)
                .map(|_| {
                    let fx = rng.random_range(-spec.smoothness..=spec.smoothness);
                    let fy = rng.random_range(-spec.smoothness..=spec.smoothness);
                    (fx, fy, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
                })
                .collect()
        })
        .collect();
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
            let logits: Vec<f64> = fields
                .iter()
                .map(|f| spec.contrast * f.iter().map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * x + fy * y) + ph).cos()).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = ex.iter().sum();
            ex.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Scene with its abundance maps (for inspection and tests).
pub struct Scene {
    pub cube: HyperCube,
    pub abundances: Vec<Vec<f64>>,
    pub endmembers: Vec<Vec<f64>>,
}

pub fn generate_scene(spec: &SceneSpec, grid: &SpectralGrid, seed: u64) -> Result<Scene> {
    if spec.endmembers == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Contract("scenes need at least one endmember and one pixel".into()));
    }
    let n = grid.len();
    if spec.bad_bands.iter().any(|&b| b >= n) {
        return Err(Error::Contract(format!("bad-band channels {:?} outside N = {n}", spec.bad_bands)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let endmembers: Vec<Vec<f64>> = (0..spec.endmembers).map(|_| endmember(spec, grid, &mut rng)).collect();
    let abundances = abundances(spec, &mut rng);
    let mut data = Vec::with_capacity(spec.height * spec.width * n);
    for a in &abundances {
        for j in 0..n {
            let mut v: f64 = a.iter().zip(&endmembers).map(|(w, e)| w * e[j]).sum();
            if spec.bad_band_noise > 0.0 && spec.bad_bands.contains(&j) {
                let z: f64 = StandardNormal.sample(&mut rng);
                v *= 1.0 + spec.bad_band_noise * z;
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let cube = HyperCube::new(spec.height, spec.width, n, data)?;
    Ok(Scene { cube, abundances, endmembers })
}

/// `count` scenes; scene `i` is seeded from `(spec.seed, i)`.
pub fn gen_scenes(spec: &SceneSpec, grid: &SpectralGrid, count: usize) -> Result<Vec<HyperCube>> {
    (0..count).into_par_iter().map(|i| generate_scene(spec, grid, child_seed(spec.seed, i as u64)).map(|s| s.cube)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_endmember_is_constant() {
        let spec = SceneSpec { endmembers: 1, bad_band_noise: 0.0, height: 6, width: 5, ..Default::default() };
        let grid = SpectralGrid::default();
        let s = generate_scene(&spec, &grid, 4).unwrap();
        let first = s.cube.pixel(0, 0).to_vec();
        for r in 0..6 {
            for c in 0..5 {
                assert_eq!(s.cube.pixel(r, c), first.as_slice());
            }
        }
        let want: Vec<f32> = s.endmembers[0].iter().map(|&v| v as f32).collect();
        assert_eq!(first, want);
    }

    #[test]
    fn abundances_on_simplex() {
        let spec = SceneSpec { height: 8, width: 8, ..Default::default() };
        let s = generate_scene(&spec, &SpectralGrid::default(), 2).unwrap();
        for a in &s.abundances {
            assert!(a.iter().all(|&v| v >= 0.0));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_bytes() {
        let spec = SceneSpec { height: 4, width: 4, ..Default::default() };
        let grid = SpectralGrid::default();
        let a = gen_scenes(&spec, &grid, 2).unwrap();
        let b = gen_scenes(&spec, &grid, 2).unwrap();
        assert_eq!(a[1].to_bytes(), b[1].to_bytes());
        assert_ne!(a[0].to_bytes(), a[1].to_bytes());
    }
}
