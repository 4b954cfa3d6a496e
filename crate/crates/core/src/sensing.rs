//! Compressive measurement `y = Φ x + n`, noise calibration, conditioning and
//! reconstruction metrics.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::oracle::FilterBank;
use crate::{Error, Result};

/// Reported PSNR for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 99.0;

const CUBE_MAGIC: &[u8; 4] = b"HSC1";

/// Ground-truth datacube, row-major `(h, w, channel)`, values in `[0, 1]`.
///
/// Stored as `f32`, the precision of the on-disk format, so files round-trip
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    h: usize,
    w: usize,
    n: usize,
    data: Vec<f32>,
}

impl HyperCube {
    pub fn new(h: usize, w: usize, n: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || n == 0 {
            return Err(Error::Data(format!("cube dims {h}x{w}x{n} must be positive")));
        }
        if h.checked_mul(w).and_then(|p| p.checked_mul(n)) != Some(data.len()) {
            return Err(Error::Data(format!("cube {h}x{w}x{n} cannot hold {} values", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("cube value {bad} outside [0, 1]")));
        }
        Ok(HyperCube { h, w, n, data })
    }

    /// Builds a cube from `f64` values, clamping into `[0, 1]`.
    pub fn from_f64_clamped(h: usize, w: usize, n: usize, data: &[f64]) -> Result<Self> {
        let v = data.iter().map(|&x| if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) as f32 }).collect();
        Self::new(h, w, n, v)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.n)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let at = (row * self.w + col) * self.n;
        &self.data[at..at + self.n]
    }

    /// Values of the `size × size` window at `(row, col)` as channel-first
    /// `[n, size, size]`, the layout the decoder consumes.
    pub fn crop_channels_first(&self, row: usize, col: usize, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n * size * size];
        for i in 0..size {
            for j in 0..size {
                let px = self.pixel(row + i, col + j);
                for (c, &v) in px.iter().enumerate() {
                    out[(c * size + i) * size + j] = v as f64;
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(CUBE_MAGIC);
        for d in [self.h, self.w, self.n] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: u64, detail: String| Error::Format { what: "cube file", offset, detail };
        if bytes.len() < 16 {
            return Err(fmt(bytes.len() as u64, format!("header needs 16 bytes, file has {}", bytes.len())));
        }
        if &bytes[..4] != CUBE_MAGIC {
            return Err(fmt(0, "bad magic, expected HSC1".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (h, w, n) = (dim(0), dim(1), dim(2));
        let payload = h
            .checked_mul(w)
            .and_then(|p| p.checked_mul(n))
            .and_then(|p| p.checked_mul(4))
            .ok_or_else(|| fmt(4, format!("dims {h}x{w}x{n} overflow")))?;
        let expected = payload.checked_add(16).ok_or_else(|| fmt(4, format!("dims {h}x{w}x{n} overflow")))?;
        if bytes.len() != expected {
            return Err(fmt(16, format!("expected {expected} bytes for {h}x{w}x{n}, file has {}", bytes.len())));
        }
        let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        HyperCube::new(h, w, n, data).map_err(|e| fmt(16, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn read_cube(path: &Path) -> Result<HyperCube> {
    HyperCube::read(path)
}

pub fn write_cube(cube: &HyperCube, path: &Path) -> Result<()> {
    cube.write(path)
}

/// Encoded intensities, row-major `(h, w, state)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureCube {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

/// Per-pixel `y = Φ x` (no noise).
pub fn encode(cube: &HyperCube, bank: &FilterBank) -> Result<MeasureCube> {
    let (h, w, n) = cube.dims();
    if n != bank.cols() {
        return Err(Error::Contract(format!("cube has N = {n} channels, filter bank has N = {}", bank.cols())));
    }
    let m = bank.rows();
    let mut data = vec![0.0; h * w * m];
    data.par_chunks_mut(m).zip(cube.data.par_chunks(n)).for_each(|(y, x)| {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = bank.row(i).iter().zip(x).map(|(p, &v)| p * v as f64).sum();
        }
    });
    Ok(MeasureCube { h, w, m, data })
}

/// Noise standard deviation for `values` at `snr_db`, referenced to their mean power.
pub fn noise_sigma(values: &[f64], snr_db: f64) -> Result<f64> {
    let power = values.iter().map(|v| v * v).sum::<f64>() / values.len().max(1) as f64;
    if !(power > 0.0) {
        return Err(Error::ZeroSignal);
    }
    if !snr_db.is_finite() && snr_db > 0.0 {
        return Ok(0.0);
    }
    if !snr_db.is_finite() {
        return Err(Error::Contract(format!("SNR {snr_db} dB is not usable")));
    }
    Ok((power / 10f64.powf(snr_db / 10.0)).sqrt())
}

/// Adds i.i.d. Gaussian noise in place at `snr_db` (`+inf` leaves values untouched).
pub fn add_noise_in_place<R: rand::Rng>(values: &mut [f64], snr_db: f64, rng: &mut R) -> Result<f64> {
    let sigma = noise_sigma(values, snr_db)?;
    if sigma > 0.0 {
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
    Ok(sigma)
}

/// Noisy copy of `meas` at `snr_db`, reproducible from `seed`.
pub fn add_noise(meas: &MeasureCube, snr_db: f64, seed: u64) -> Result<MeasureCube> {
    let mut out = meas.clone();
    add_noise_in_place(&mut out.data, snr_db, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(out)
}

/// `σ_max / σ_min` of a row-major `rows × cols` matrix (`rows ≤ cols`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning {
    pub value: f64,
    pub rank_deficient: bool,
}

pub fn condition_of(rows: usize, cols: usize, data: &[f64]) -> Result<Conditioning> {
    if rows == 0 || rows > cols || data.len() != rows * cols {
        return Err(Error::Contract(format!("condition number needs rows <= cols, got {rows}x{cols}")));
    }
    let sv = DMatrix::from_row_slice(rows, cols, data).singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(min >= 1e-12 * max) || max == 0.0 {
        return Ok(Conditioning { value: f64::INFINITY, rank_deficient: true });
    }
    Ok(Conditioning { value: max / min, rank_deficient: false })
}

pub fn condition_number(bank: &FilterBank) -> Result<Conditioning> {
    condition_of(bank.rows(), bank.cols(), bank.data())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub sam: f64,
    pub mse: f64,
}

/// Metrics over flat `(pixel, channel)` arrays with `n` channels per pixel.
pub fn spectral_metrics(truth: &[f64], recon: &[f64], n: usize) -> Result<Metrics> {
    if truth.len() != recon.len() || n == 0 || !truth.len().is_multiple_of(n) || truth.is_empty() {
        return Err(Error::Contract(format!(
            "metrics need equal, whole-pixel inputs (got {} and {} values, N = {n})",
            truth.len(),
            recon.len()
        )));
    }
    let mse = truth.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / truth.len() as f64;
    let psnr = if mse > 0.0 { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB) } else { PSNR_CAP_DB };
    let (mut angle, mut valid) = (0.0, 0usize);
    for (a, b) in truth.chunks(n).zip(recon.chunks(n)) {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        // 2·atan2(|â − b̂|, |â + b̂|) stays accurate near 0 where acos does not
        let (mut d2, mut s2) = (0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (u, v) = (x / na, y / nb);
            d2 += (u - v) * (u - v);
            s2 += (u + v) * (u + v);
        }
        angle += 2.0 * d2.sqrt().atan2(s2.sqrt());
        valid += 1;
    }
    let sam = if valid == 0 { 0.0 } else { angle / valid as f64 };
    Ok(Metrics { psnr, sam, mse })
}

pub fn metrics(truth: &HyperCube, recon: &HyperCube) -> Result<Metrics> {
    if truth.dims() != recon.dims() {
        return Err(Error::Contract(format!("cube dims {:?} and {:?} differ", truth.dims(), recon.dims())));
    }
    spectral_metrics(&truth.to_f64(), &recon.to_f64(), truth.n)
}
