//! Shape → filter-bank ground truth.
//!
//! The patterned GSST layer is treated as a homogeneous film whose
//! permittivity is the area-weighted average of GSST and air
//! (`eps_film = f · eps_gsst + (1 − f)`), and the film's transmittance at normal
//! incidence comes from the single-layer characteristic matrix. Every surrogate
//! and every re-simulation is measured against this model.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use pcm_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{sample_shape, ShapeParams, MAX_VERTICES};
use crate::materials::{effective_permittivity, permittivity_to_nk, CrystalGrid, MaterialDispersion, SpectralGrid};
use crate::{Error, Result};

/// Film stack around the patterned layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StackSpec {
    pub thickness_um: f64,
    pub substrate_index: f64,
    pub superstrate_index: f64,
    /// Lattice period; metadata only, the effective-slab model ignores it.
    pub period_um: f64,
}

impl Default for StackSpec {
    fn default() -> Self {
        StackSpec { thickness_um: 0.30, substrate_index: 1.45, superstrate_index: 1.0, period_um: 1.0 }
    }
}

impl StackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.thickness_um > 0.0) || !(self.substrate_index >= 1.0) || !(self.superstrate_index >= 1.0) {
            return Err(Error::Contract(format!("invalid stack {self:?}")));
        }
        Ok(())
    }
}

/// Power transmittance and reflectance of one film.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlabResponse {
    pub transmittance: f64,
    pub reflectance: f64,
}

/// Film of index `n − ik` and `thickness_um` between `incident_n` and `substrate_n`.
pub fn slab_response(n: f64, k: f64, thickness_um: f64, wavelength_um: f64, incident_n: f64, substrate_n: f64) -> SlabResponse {
    let film = Complex64::new(n, -k);
    let i = Complex64::i();
    let delta = film * (2.0 * PI * thickness_um / wavelength_um);
    let (cos, sin) = (delta.cos(), delta.sin());
    // characteristic matrix applied to (1, substrate admittance)
    let b = cos + i * sin * substrate_n / film;
    let c = i * film * sin + cos * substrate_n;
    let denom = b * incident_n + c;
    let transmittance = 4.0 * incident_n * substrate_n / denom.norm_sqr();
    let reflectance = ((b * incident_n - c) / denom).norm_sqr();
    SlabResponse { transmittance, reflectance }
}

/// Transmittance of an air / film / substrate stack at normal incidence.
pub fn slab_transmittance(n: f64, k: f64, thickness_um: f64, wavelength_um: f64, substrate_n: f64) -> f64 {
    slab_response(n, k, thickness_um, wavelength_um, 1.0, substrate_n).transmittance
}

/// The `M × N` transmittance matrix: one row per crystallization state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FilterBank {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Data(format!("filter bank {rows}x{cols} cannot hold {} values", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("transmittance {bad} outside [0, 1]")));
        }
        Ok(FilterBank { rows, cols, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        let rows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 0 };
        if shape.len() < 2 || t.numel() != rows * shape[shape.len() - 1] {
            return Err(Error::Data(format!("filter bank tensor has shape {shape:?}")));
        }
        Self::new(rows, shape[shape.len() - 1], t.data().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows, self.cols], self.data.clone()).expect("dims match")
    }

    pub fn mse(&self, other: &FilterBank) -> Result<f64> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Contract(format!(
                "filter banks {}x{} and {}x{} differ in shape",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.data.len() as f64)
    }

    /// One comma-separated line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row = parse_csv_row(line)?;
            if *cols.get_or_insert(row.len()) != row.len() {
                return Err(Error::Data(format!("filter bank row {} has {} values", rows + 1, row.len())));
            }
            data.extend(row);
            rows += 1;
        }
        Self::new(rows, cols.unwrap_or(0), data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn parse_csv_row(line: &str) -> Result<Vec<f64>> {
    line.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| Error::Data(format!("bad number `{}`: {e}", v.trim())))).collect()
}

/// Ground-truth simulator bundling material data, stack and grids.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub dispersion: MaterialDispersion,
    pub stack: StackSpec,
    pub spectral: SpectralGrid,
    pub crystal: CrystalGrid,
}

impl Default for Oracle {
    fn default() -> Self {
        Oracle {
            dispersion: MaterialDispersion::gsst_default(),
            stack: StackSpec::default(),
            spectral: SpectralGrid::default(),
            crystal: CrystalGrid::default(),
        }
    }
}

impl Oracle {
    /// Filter bank of a film patterned at areal fill `fill`.
    pub fn filterbank_for_fill(&self, fill: f64) -> Result<FilterBank> {
        self.stack.validate()?;
        if !(0.0..=1.0).contains(&fill) {
            return Err(Error::Contract(format!("fill factor {fill} outside [0, 1]")));
        }
        let (m, n) = (self.crystal.len(), self.spectral.len());
        let mut data = Vec::with_capacity(m * n);
        for &c in self.crystal.levels() {
            for &wl in self.spectral.centers() {
                let eps = effective_permittivity(&self.dispersion, wl, c)? * fill + (1.0 - fill);
                let (nr, k) = permittivity_to_nk(eps);
                let r = slab_response(nr, k, self.stack.thickness_um, wl, self.stack.superstrate_index, self.stack.substrate_index);
                data.push(r.transmittance.clamp(0.0, 1.0));
            }
        }
        FilterBank::new(m, n, data)
    }

    /// Filter bank of the hard-thresholded design.
    pub fn shape_to_filterbank(&self, shape: &ShapeParams) -> Result<FilterBank> {
        let fill = shape.to_polygon()?.fill_factor();
        self.filterbank_for_fill(fill)
    }

    pub fn header(&self, count: usize) -> DatasetHeader {
        DatasetHeader {
            n: self.spectral.len(),
            m: self.crystal.len(),
            stack: self.stack.clone(),
            dispersion_hash: self.dispersion.content_hash(),
            count,
        }
    }
}

/// Metadata line of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub n: usize,
    pub m: usize,
    pub stack: StackSpec,
    pub dispersion_hash: String,
    pub count: usize,
}

impl DatasetHeader {
    fn to_line(&self) -> String {
        format!(
            "# pcm-dataset N={} M={} count={} thickness_um={} substrate_index={} superstrate_index={} period_um={} dispersion={}",
            self.n,
            self.m,
            self.count,
            self.stack.thickness_um,
            self.stack.substrate_index,
            self.stack.superstrate_index,
            self.stack.period_um,
            self.dispersion_hash
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let rest = line.strip_prefix("# pcm-dataset").ok_or_else(|| Error::Data(format!("not a dataset header: `{line}`")))?;
        let mut h = DatasetHeader { n: 0, m: 0, stack: StackSpec::default(), dispersion_hash: String::new(), count: 0 };
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| Error::Data(format!("bad header field `{field}`")))?;
            let num = || v.parse::<f64>().map_err(|e| Error::Data(format!("header `{k}`: {e}")));
            let int = || v.parse::<usize>().map_err(|e| Error::Data(format!("header `{k}`: {e}")));
            match k {
                "N" => h.n = int()?,
                "M" => h.m = int()?,
                "count" => h.count = int()?,
                "thickness_um" => h.stack.thickness_um = num()?,
                "substrate_index" => h.stack.substrate_index = num()?,
                "superstrate_index" => h.stack.superstrate_index = num()?,
                "period_um" => h.stack.period_um = num()?,
                "dispersion" => h.dispersion_hash = v.to_string(),
                _ => return Err(Error::Data(format!("unknown header field `{k}`"))),
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub shape: ShapeParams,
    pub bank: FilterBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

/// The random design used for record `index` of a dataset seeded with `seed`.
pub fn dataset_shape(seed: u64, index: usize) -> ShapeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let nv = rng.random_range(1..=MAX_VERTICES);
    sample_shape(&mut rng, nv).expect("vertex count in range")
}

/// Simulates `count` random designs; records are ordered by index regardless of
/// how the work was scheduled.
pub fn generate_dataset(oracle: &Oracle, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Data("dataset count must be at least 1".into()));
    }
    let records = (0..count)
        .into_par_iter()
        .map(|i| {
            let shape = dataset_shape(seed, i);
            let bank = oracle.shape_to_filterbank(&shape)?;
            Ok(DatasetRecord { shape, bank })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { header: oracle.header(count), records })
}

impl Dataset {
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", self.header.to_line()).map_err(io)?;
        for rec in &self.records {
            writeln!(w, "{}", rec.shape.to_json()).map_err(io)?;
            w.write_all(rec.bank.to_csv().as_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let mut next = |what: &str| -> Result<Option<String>> {
            match lines.next() {
                Some(l) => l.map(Some).map_err(|e| Error::io(path, e)),
                None if what == "record" => Ok(None),
                None => Err(Error::Data(format!("{}: truncated before {what}", path.display()))),
            }
        };
        let header = DatasetHeader::parse(&next("header")?.unwrap_or_default())?;
        let mut records = Vec::with_capacity(header.count);
        while let Some(line) = next("record")? {
            if line.trim().is_empty() {
                continue;
            }
            let shape = ShapeParams::from_json(&line)?;
            let mut data = Vec::with_capacity(header.m * header.n);
            for _ in 0..header.m {
                let row = parse_csv_row(&next("filter-bank row")?.unwrap_or_default())?;
                if row.len() != header.n {
                    return Err(Error::Data(format!("record {}: row of {} values, expected {}", records.len(), row.len(), header.n)));
                }
                data.extend(row);
            }
            records.push(DatasetRecord { shape, bank: FilterBank::new(header.m, header.n, data)? });
        }
        if records.len() != header.count {
            return Err(Error::Data(format!("{}: header promises {} records, found {}", path.display(), header.count, records.len())));
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{}: dataset is empty", path.display())));
        }
        Ok(Dataset { header, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thin_film_examples() {
        assert_eq!(slab_transmittance(2.0, 0.0, 0.0, 1.5, 1.0), 1.0);
        let bare = slab_transmittance(2.0, 0.0, 0.0, 1.5, 1.45);
        assert!((bare - (1.0 - (0.45f64 / 2.45).powi(2))).abs() < 1e-12);
        let wl = 1.6;
        let q = slab_transmittance(2.0, 0.0, wl / 8.0, wl, 1.0);
        assert!((q - 0.64).abs() < 1e-9, "{q}");
        let h = slab_transmittance(2.0, 0.0, wl / 4.0, wl, 1.0);
        assert!((h - 1.0).abs() < 1e-9, "{h}");
    }

    #[test]
    fn absorbing_film_loses_energy() {
        let r = slab_response(3.0, 0.2, 0.4, 1.3, 1.0, 1.45);
        assert!(r.transmittance + r.reflectance < 1.0);
        assert!(r.transmittance > 0.0);
    }

    #[test]
    fn empty_and_full_fill() {
        let o = Oracle::default();
        let empty = o.filterbank_for_fill(0.0).unwrap();
        for i in 1..empty.rows() {
            assert_eq!(empty.row(i), empty.row(0));
        }
        let full = o.filterbank_for_fill(1.0).unwrap();
        assert!(full.row(0).iter().zip(full.row(10)).all(|(a, b)| a != b));
    }

    #[test]
    fn csv_round_trip() {
        let bank = Oracle::default().filterbank_for_fill(0.37).unwrap();
        assert_eq!(FilterBank::from_csv(&bank.to_csv()).unwrap(), bank);
        assert!(FilterBank::new(2, 2, vec![0.0, 0.5, 1.5, 0.1]).is_err());
        assert!(FilterBank::from_csv("0.1,0.2\n0.3\n").is_err());
    }

    #[test]
    fn header_round_trip() {
        let h = Oracle::default().header(12);
        assert_eq!(DatasetHeader::parse(&h.to_line()).unwrap(), h);
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(matches!(generate_dataset(&Oracle::default(), 0, 1), Err(Error::Data(_))));
    }
}
