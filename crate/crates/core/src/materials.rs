//! Optical constants of GSST across crystallization fractions.
//!
//! The amorphous and crystalline endpoints are tabulated as `(n, k)` over
//! wavelength. Partial crystallization mixes the two with the
//! Lorentz–Lorenz effective-medium rule in a vacuum host:
//!
//! ```text
//! (eps - 1) / (eps + 2) = C (eps_c - 1) / (eps_c + 2) + (1 - C) (eps_a - 1) / (eps_a + 2)
//! ```
//!
//! Endpoint permittivities are interpolated linearly in wavelength first and
//! mixed second.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Number of crystallization states (rows of the filter bank).
pub const CRYSTAL_LEVELS: usize = 11;

/// Shortest band the dispersion data must cover, in micrometres.
pub const BAND_UM: (f64, f64) = (1.0, 2.5);

/// The evenly spaced crystallization fractions `0.0, 0.1, ..., 1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrystalGrid {
    levels: Vec<f64>,
}

impl Default for CrystalGrid {
    fn default() -> Self {
        Self::new(CRYSTAL_LEVELS)
    }
}

impl CrystalGrid {
    pub fn new(count: usize) -> Self {
        assert!(count >= 2, "a crystal grid needs both endpoints");
        let last = (count - 1) as f64;
        CrystalGrid { levels: (0..count).map(|i| i as f64 / last).collect() }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Channel centres of the spectral axis: `n` equal bins over `[min, max]` um.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGrid {
    centers: Vec<f64>,
}

impl Default for SpectralGrid {
    fn default() -> Self {
        Self::uniform(100, BAND_UM.0, BAND_UM.1)
    }
}

impl SpectralGrid {
    pub fn uniform(n: usize, min_um: f64, max_um: f64) -> Self {
        let width = (max_um - min_um) / n as f64;
        SpectralGrid { centers: (0..n).map(|j| min_um + (j as f64 + 0.5) * width).collect() }
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Wavelength-indexed permittivity of the two GSST endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialDispersion {
    wavelengths: Vec<f64>,
    nk_a: Vec<(f64, f64)>,
    nk_c: Vec<(f64, f64)>,
    eps_a: Vec<Complex64>,
    eps_c: Vec<Complex64>,
}

impl MaterialDispersion {
    /// Builds a table from `(n, k)` samples of both endpoints.
    pub fn from_nk(wavelengths: Vec<f64>, nk_a: Vec<(f64, f64)>, nk_c: Vec<(f64, f64)>) -> Result<Self> {
        if wavelengths.len() < 2 || nk_a.len() != wavelengths.len() || nk_c.len() != wavelengths.len() {
            return Err(Error::Data(format!(
                "dispersion needs matching columns of at least 2 rows (got {}, {}, {})",
                wavelengths.len(),
                nk_a.len(),
                nk_c.len()
            )));
        }
        if wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("dispersion wavelengths must be strictly increasing".into()));
        }
        let (lo, hi) = (wavelengths[0], wavelengths[wavelengths.len() - 1]);
        if lo > BAND_UM.0 || hi < BAND_UM.1 {
            return Err(Error::Data(format!("dispersion covers [{lo}, {hi}] um, needs at least [{}, {}]", BAND_UM.0, BAND_UM.1)));
        }
        let to_eps = |&(n, k): &(f64, f64)| Complex64::new(n, k).powi(2);
        let eps_a: Vec<Complex64> = nk_a.iter().map(to_eps).collect();
        let eps_c: Vec<Complex64> = nk_c.iter().map(to_eps).collect();
        // (n + ik)^2 has Im = 2nk, passive iff n and k share a sign
        if eps_a.iter().chain(&eps_c).any(|e| e.im < 0.0 || !e.re.is_finite() || !e.im.is_finite()) {
            return Err(Error::Data("dispersion contains an active (Im eps < 0) or non-finite sample".into()));
        }
        Ok(MaterialDispersion { wavelengths, nk_a, nk_c, eps_a, eps_c })
    }

    /// Shipped synthetic GSST table (not measured data).
    ///
    /// Amorphous: `n` falls 3.35 -> 3.20 over 1.0-2.5 um, lossless.
    /// Crystalline: `n` falls 5.0 -> 4.6 with an absorption tail, `k` 0.12 -> 0.01.
    pub fn gsst_default() -> Self {
        let cauchy = |n_short: f64, n_long: f64, wl: f64| {
            // n = a + b / wl^2 through both band edges
            let b = (n_short - n_long) / (1.0 / BAND_UM.0.powi(2) - 1.0 / BAND_UM.1.powi(2));
            let a = n_short - b / BAND_UM.0.powi(2);
            a + b / (wl * wl)
        };
        let tail = |wl: f64| {
            let decay = 0.3;
            let span = (BAND_UM.1 - BAND_UM.0) / decay;
            let x = ((-(wl - BAND_UM.0) / decay).exp() - (-span).exp()) / (1.0 - (-span).exp());
            0.01 + 0.11 * x
        };
        let steps = 150;
        let wavelengths: Vec<f64> = (0..=steps).map(|i| BAND_UM.0 + (BAND_UM.1 - BAND_UM.0) * i as f64 / steps as f64).collect();
        let nk_a = wavelengths.iter().map(|&wl| (cauchy(3.35, 3.20, wl), 0.0)).collect();
        let nk_c = wavelengths.iter().map(|&wl| (cauchy(5.0, 4.6, wl), tail(wl))).collect();
        Self::from_nk(wavelengths, nk_a, nk_c).expect("default table is valid")
    }

    /// Table with wavelength-independent endpoint permittivities.
    pub fn constant(eps_a: Complex64, eps_c: Complex64) -> Result<Self> {
        let (na, ka) = permittivity_to_nk(eps_a);
        let (nc, kc) = permittivity_to_nk(eps_c);
        Self::from_nk(vec![BAND_UM.0, BAND_UM.1], vec![(na, ka); 2], vec![(nc, kc); 2])
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn range(&self) -> (f64, f64) {
        (self.wavelengths[0], self.wavelengths[self.wavelengths.len() - 1])
    }

    /// `(eps_a, eps_c)` linearly interpolated at `wavelength_um`.
    pub fn endpoints(&self, wavelength_um: f64) -> Result<(Complex64, Complex64)> {
        let (lo, hi) = self.range();
        if !(lo..=hi).contains(&wavelength_um) {
            return Err(Error::OutOfRange { wavelength_um, min_um: lo, max_um: hi });
        }
        let upper = self.wavelengths.partition_point(|&w| w < wavelength_um).max(1);
        let lower = upper - 1;
        let (w0, w1) = (self.wavelengths[lower], self.wavelengths[upper]);
        let t = (wavelength_um - w0) / (w1 - w0);
        let lerp = |v: &[Complex64]| v[lower] * (1.0 - t) + v[upper] * t;
        Ok((lerp(&self.eps_a), lerp(&self.eps_c)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("wavelength_um, n_a, k_a, n_c, k_c\n");
        for ((wl, a), c) in self.wavelengths.iter().zip(&self.nk_a).zip(&self.nk_c) {
            let _ = writeln!(s, "{wl}, {}, {}, {}, {}", a.0, a.1, c.0, c.1);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Data("empty dispersion file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["wavelength_um", "n_a", "k_a", "n_c", "k_c"] {
            return Err(Error::Data(format!("unexpected dispersion header `{header}`")));
        }
        let (mut wl, mut a, mut c) = (Vec::new(), Vec::new(), Vec::new());
        for (row, line) in lines.enumerate() {
            let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse()).collect();
            let vals = vals.map_err(|e| Error::Data(format!("dispersion row {}: {e}", row + 1)))?;
            if vals.len() != 5 {
                return Err(Error::Data(format!("dispersion row {} has {} columns", row + 1, vals.len())));
            }
            wl.push(vals[0]);
            a.push((vals[1], vals[2]));
            c.push((vals[3], vals[4]));
        }
        Self::from_nk(wl, a, c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Short content hash used to tag datasets built from this table.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_csv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Lorentz–Lorenz mix of two permittivities at crystalline fraction `c`.
pub fn mix_permittivity(eps_a: Complex64, eps_c: Complex64, c: f64) -> Result<Complex64> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Contract(format!("crystallinity {c} outside [0, 1]")));
    }
    let polar = |e: Complex64| (e - 1.0) / (e + 2.0);
    let f = polar(eps_c) * c + polar(eps_a) * (1.0 - c);
    let gap = (Complex64::new(1.0, 0.0) - f).norm();
    if gap < 1e-12 {
        return Err(Error::Singular(gap));
    }
    Ok((f * 2.0 + 1.0) / (Complex64::new(1.0, 0.0) - f))
}

/// Permittivity of GSST at `wavelength_um` and crystallinity `c`.
pub fn effective_permittivity(disp: &MaterialDispersion, wavelength_um: f64, c: f64) -> Result<Complex64> {
    let (eps_a, eps_c) = disp.endpoints(wavelength_um)?;
    mix_permittivity(eps_a, eps_c, c)
}

/// `(n, k)` with `eps = (n + ik)^2`, taking the principal root.
pub fn permittivity_to_nk(eps: Complex64) -> (f64, f64) {
    let r = eps.sqrt();
    (r.re, r.im)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn grids() {
        let g = CrystalGrid::default();
        assert_eq!(g.len(), 11);
        assert_eq!(g.levels()[0], 0.0);
        assert_eq!(g.levels()[10], 1.0);
        assert_eq!(g.levels()[3], 0.3);
        let s = SpectralGrid::default();
        assert_eq!(s.len(), 100);
        assert!(s.centers().windows(2).all(|w| w[1] > w[0]));
        assert!(s.centers()[0] >= 1.0 && s.centers()[99] <= 2.5);
    }

    #[test]
    fn closed_form_midpoint_mix() {
        let eps = mix_permittivity(c(16.0, 0.0), c(25.0, 0.0), 0.5).unwrap();
        assert!((eps.re - 19.6).abs() < 1e-9, "{eps}");
        assert_eq!(eps.im, 0.0);
    }

    #[test]
    fn endpoints_are_reproduced() {
        let d = MaterialDispersion::gsst_default();
        for &wl in &[1.0, 1.37, 2.0, 2.5] {
            let (ea, ec) = d.endpoints(wl).unwrap();
            assert!((effective_permittivity(&d, wl, 0.0).unwrap() - ea).norm() <= 1e-12 * ea.norm());
            assert!((effective_permittivity(&d, wl, 1.0).unwrap() - ec).norm() <= 1e-12 * ec.norm());
        }
    }

    #[test]
    fn out_of_range_wavelength() {
        let d = MaterialDispersion::gsst_default();
        assert!(matches!(effective_permittivity(&d, 0.5, 0.3), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn resonant_mixing_is_singular() {
        // F = 1 exactly when both constituents have (eps-1)/(eps+2) = 1, i.e. eps -> inf;
        // pick eps_a, eps_c whose mix lands on F = 1 at C = 0.5.
        let pa = c(0.5, 0.0);
        let pc = c(1.5, 0.0);
        let inv = |p: Complex64| (p * 2.0 + 1.0) / (Complex64::new(1.0, 0.0) - p);
        let err = mix_permittivity(inv(pa), inv(pc), 0.5).unwrap_err();
        assert!(matches!(err, Error::Singular(_)), "{err}");
    }

    #[test]
    fn nk_examples() {
        assert_eq!(permittivity_to_nk(c(4.0, 0.0)), (2.0, 0.0));
        let (n, k) = permittivity_to_nk(c(0.0, 2.0));
        assert!((n - 1.0).abs() < 1e-15 && (k - 1.0).abs() < 1e-15);
        let (n, _) = permittivity_to_nk(c(19.6, 0.0));
        assert!((n - 19.6f64.sqrt()).abs() < 1e-15);
        assert!((n - 4.42719).abs() < 1e-5);
    }

    #[test]
    fn default_table_matches_its_description() {
        let d = MaterialDispersion::gsst_default();
        let first = d.nk_c[0];
        let last = *d.nk_c.last().unwrap();
        assert!((first.0 - 5.0).abs() < 1e-12 && (last.0 - 4.6).abs() < 1e-12);
        assert!((first.1 - 0.12).abs() < 1e-12 && (last.1 - 0.01).abs() < 1e-12);
        assert!((d.nk_a[0].0 - 3.35).abs() < 1e-12 && (d.nk_a.last().unwrap().0 - 3.20).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let d = MaterialDispersion::gsst_default();
        let back = MaterialDispersion::from_csv(&d.to_csv()).unwrap();
        assert_eq!(back, d);
        assert!(d.to_csv().starts_with("wavelength_um, n_a, k_a, n_c, k_c\n"));
        assert!(MaterialDispersion::from_csv("wl, a\n1,2").is_err());
    }

    #[test]
    fn passivity_sweep() {
        let d = MaterialDispersion::gsst_default();
        let grid = SpectralGrid::default();
        for &wl in grid.centers() {
            for i in 0..=100 {
                let eps = effective_permittivity(&d, wl, i as f64 / 100.0).unwrap();
                assert!(eps.im >= -1e-12);
            }
        }
    }
}
