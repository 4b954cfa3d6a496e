//! Stage functions behind the command-line tool.
//!
//! Every stage reads its inputs from the run directory and writes its outputs
//! there; a missing input is produced by running the stage that owns it, so
//! each stage can be invoked on its own. Nothing is carried in memory between
//! stages.
//!
//! Layout of a run directory:
//!
//! ```text
//! dispersion.csv            dataset.txt
//! scenes/train_k.hsc        scenes/val_k.hsc
//! checkpoints/surrogate.ckpt  checkpoints/inverse.ckpt  checkpoints/inverse_tandem.ckpt
//! checkpoints/decoder.ckpt  surrogate_report.csv  inverse_report.csv  tandem_report.csv
//! config.snapshot  metrics.csv  cond.csv  shapes/initial.json  shapes/epoch_k.json  design.json
//! report.csv
//! ```

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::codesign::{
    condition_csv, config_hash, initial_shape, joint_optimize, surrogate_bank, track_condition, two_stage_csv, two_stage_eval, CodesignRun,
    TwoStageRow,
};
use crate::config::RunConfig;
use crate::decoder::DecoderModel;
use crate::geometry::ShapeParams;
use crate::materials::MaterialDispersion;
use crate::nn::child_seed;
use crate::oracle::{generate_dataset, Dataset, Oracle};
use crate::scenes::gen_scenes;
use crate::sensing::{metrics, read_cube, write_cube, HyperCube, Metrics};
use crate::surrogate::{finetune_tandem, train_filter2shape, train_surrogate, Filter2ShapeModel, SurrogateModel, TrainReport};
use crate::{Error, Result};

/// Stream of `child_seed(seed, ·)` that initializes the co-design decoder.
pub const DECODER_INIT_STREAM: u64 = 3;

/// A run directory bound to its configuration.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let dir = cfg.out_dir.clone();
        Pipeline { cfg, dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn ckpt(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    fn shape_path(&self, epoch: usize) -> PathBuf {
        self.dir.join("shapes").join(format!("epoch_{epoch}.json"))
    }

    // ---- dispersion / dataset -------------------------------------------

    pub fn gen_dispersion(&self) -> Result<String> {
        let disp = if self.cfg.dispersion == "builtin" {
            MaterialDispersion::gsst_default()
        } else {
            MaterialDispersion::read(Path::new(&self.cfg.dispersion))?
        };
        let path = self.path("dispersion.csv");
        write(&path, &disp.to_csv())?;
        Ok(format!("dispersion: {} wavelengths, hash {} -> {}", disp.wavelengths().len(), disp.content_hash(), path.display()))
    }

    pub fn oracle(&self) -> Result<Oracle> {
        let path = self.path("dispersion.csv");
        if !path.exists() {
            self.gen_dispersion()?;
        }
        Ok(self.cfg.oracle_with(MaterialDispersion::read(&path)?))
    }

    pub fn gen_dataset(&self) -> Result<String> {
        let oracle = self.oracle()?;
        let data = generate_dataset(&oracle, self.cfg.dataset_count, self.cfg.dataset_seed)?;
        let path = self.path("dataset.txt");
        mkdir(&self.dir)?;
        data.write(&path)?;
        Ok(format!("dataset: {} records -> {}", data.records.len(), path.display()))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let path = self.path("dataset.txt");
        if !path.exists() {
            self.gen_dataset()?;
        }
        let data = Dataset::read(&path)?;
        let (m, n) = (self.cfg.crystal_levels, self.cfg.spectral_channels);
        if (data.header.m, data.header.n) != (m, n) {
            return Err(Error::Data(format!("{} holds {}x{} banks, config expects {m}x{n}", path.display(), data.header.m, data.header.n)));
        }
        // never train on spectra simulated with other optics
        let want = self.oracle()?.header(data.header.count);
        if data.header != want {
            return Err(Error::Data(format!(
                "{} was simulated with a different stack or dispersion (stored {:?}, configured {:?}); rerun gen-dataset",
                path.display(),
                data.header,
                want
            )));
        }
        Ok(data)
    }

    // ---- scenes ----------------------------------------------------------

    pub fn gen_scenes(&self) -> Result<String> {
        let grid = self.cfg.spectral_grid();
        let dir = self.path("scenes");
        mkdir(&dir)?;
        let train = gen_scenes(&self.cfg.scenes, &grid, self.cfg.scene_count)?;
        let val = gen_scenes(&self.cfg.val_scene_spec(), &grid, self.cfg.val_count)?;
        for (prefix, cubes) in [("train", &train), ("val", &val)] {
            for (k, c) in cubes.iter().enumerate() {
                write_cube(c, &dir.join(format!("{prefix}_{k}.hsc")))?;
            }
        }
        let (h, w, n) = train[0].dims();
        Ok(format!("scenes: {} train + {} val cubes {h}x{w}x{n} -> {}", train.len(), val.len(), dir.display()))
    }

    /// `(train, val)` cubes, generating them if any file is missing.
    pub fn scenes(&self) -> Result<(Vec<HyperCube>, Vec<HyperCube>)> {
        let dir = self.path("scenes");
        let name = |p: &str, k: usize| dir.join(format!("{p}_{k}.hsc"));
        let all_there =
            (0..self.cfg.scene_count).all(|k| name("train", k).exists()) && (0..self.cfg.val_count).all(|k| name("val", k).exists());
        if !all_there {
            self.gen_scenes()?;
        }
        let load = |p: &str, count: usize| (0..count).map(|k| read_cube(&name(p, k))).collect::<Result<Vec<_>>>();
        Ok((load("train", self.cfg.scene_count)?, load("val", self.cfg.val_count)?))
    }

    // ---- offline networks -------------------------------------------------

    fn report_line(what: &str, r: &TrainReport, path: &Path) -> String {
        format!("{what}: {} epochs, held-out mse {:.6} -> {}", r.rows.len(), r.final_test_mse(), path.display())
    }

    pub fn train_surrogate(&self) -> Result<String> {
        let data = self.dataset()?;
        let mut model = SurrogateModel::new(self.cfg.surrogate_config(), self.cfg.surrogate_seed)?;
        let report = train_surrogate(&mut model, &data, &self.cfg.surrogate_train.options())?;
        let path = self.ckpt("surrogate.ckpt");
        mkdir(path.parent().expect("checkpoint dir"))?;
        model.to_checkpoint().write(&path)?;
        write(&self.path("surrogate_report.csv"), &report.to_csv())?;
        Ok(Self::report_line("train-surrogate", &report, &path))
    }

    /// The trained surrogate, frozen.
    pub fn surrogate(&self) -> Result<SurrogateModel> {
        let path = self.ckpt("surrogate.ckpt");
        if !path.exists() {
            self.train_surrogate()?;
        }
        let mut m = SurrogateModel::from_checkpoint(&Checkpoint::read(&path)?)?;
        m.store.freeze();
        Ok(m)
    }

    pub fn train_inverse(&self) -> Result<String> {
        let data = self.dataset()?;
        let mut model = Filter2ShapeModel::new(self.cfg.inverse_config(), self.cfg.inverse_seed)?;
        let report = train_filter2shape(&mut model, &data, &self.cfg.inverse_train.options())?;
        let path = self.ckpt("inverse.ckpt");
        mkdir(path.parent().expect("checkpoint dir"))?;
        model.to_checkpoint().write(&path)?;
        write(&self.path("inverse_report.csv"), &report.to_csv())?;
        Ok(Self::report_line("train-inverse", &report, &path))
    }

    pub fn finetune_tandem(&self) -> Result<String> {
        let s2f = self.surrogate()?;
        let pre = self.ckpt("inverse.ckpt");
        if !pre.exists() {
            self.train_inverse()?;
        }
        let mut f2s = Filter2ShapeModel::from_checkpoint(&Checkpoint::read(&pre)?)?;
        let data = self.dataset()?;
        let report = finetune_tandem(&mut f2s, &s2f, &data, &self.cfg.tandem.options())?;
        let path = self.ckpt("inverse_tandem.ckpt");
        f2s.to_checkpoint().write(&path)?;
        write(&self.path("tandem_report.csv"), &report.to_csv())?;
        Ok(Self::report_line("finetune-tandem", &report, &path))
    }

    /// The tandem-tuned inverse network, frozen.
    pub fn inverse(&self) -> Result<Filter2ShapeModel> {
        let path = self.ckpt("inverse_tandem.ckpt");
        if !path.exists() {
            self.finetune_tandem()?;
        }
        let mut m = Filter2ShapeModel::from_checkpoint(&Checkpoint::read(&path)?)?;
        m.store.freeze();
        Ok(m)
    }

    // ---- co-design ---------------------------------------------------------

    /// Runs joint optimization and writes the full run log.
    pub fn codesign_run(&self) -> Result<CodesignRun> {
        let s2f = self.surrogate()?;
        let f2s = self.inverse()?;
        let (train, val) = self.scenes()?;
        let snapshot = self.cfg.print();
        let opts = self.cfg.codesign_options();
        let shape0 = initial_shape(self.cfg.seed);
        let decoder = DecoderModel::new(self.cfg.decoder_config(), child_seed(self.cfg.seed, DECODER_INIT_STREAM))?;
        let run = joint_optimize(&shape0, decoder, &s2f, &f2s, &train, &val, &opts, config_hash(&snapshot))?;

        write(&self.path("config.snapshot"), &snapshot)?;
        write(&self.path("metrics.csv"), &run.metrics_csv())?;
        write(&self.path("shapes/initial.json"), &run.initial_shape.to_json())?;
        for (k, s) in run.shapes.iter().enumerate() {
            write(&self.shape_path(k), &s.to_json())?;
        }
        write(&self.path("design.json"), &run.final_shape().hardened().to_json())?;
        let cond: Vec<(usize, f64)> = run.metrics.iter().map(|m| (m.epoch, m.cond)).collect();
        write(&self.path("cond.csv"), &condition_csv(&cond))?;
        run.decoder.to_checkpoint().write(&self.ckpt("decoder.ckpt"))?;
        Ok(run)
    }

    pub fn codesign(&self) -> Result<String> {
        let run = self.codesign_run()?;
        let m = run.final_metrics().ok_or_else(|| Error::Config("codesign.epochs must be positive".into()))?;
        let (cmin, at) = run.cond_minimum().unwrap_or((f64::NAN, 0));
        Ok(format!(
            "codesign: {} epochs, psnr {:.3} dB, sam {:.4}, mse {:.6}, cond {:.2} (min {:.2} at epoch {at}), config {} -> {}",
            run.metrics.len(),
            m.psnr,
            m.sam,
            m.mse,
            m.cond,
            cmin,
            &run.config_hash[..16],
            self.path("metrics.csv").display()
        ))
    }

    fn read_shape(path: &Path) -> Result<ShapeParams> {
        ShapeParams::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `(initial, final)` shapes of the co-design run, running it if needed.
    pub fn codesign_shapes(&self) -> Result<(ShapeParams, ShapeParams)> {
        let last = self.cfg.codesign.epochs.checked_sub(1).ok_or_else(|| Error::Config("codesign.epochs must be positive".into()))?;
        if !self.path("shapes/initial.json").exists() || !self.shape_path(last).exists() {
            self.codesign_run()?;
        }
        Ok((Self::read_shape(&self.path("shapes/initial.json"))?, Self::read_shape(&self.shape_path(last))?))
    }

    pub fn two_stage_rows(&self) -> Result<Vec<TwoStageRow>> {
        let (initial, last) = self.codesign_shapes()?;
        let oracle = self.oracle()?;
        let s2f = self.surrogate()?;
        let (train, val) = self.scenes()?;
        let rows = two_stage_eval(
            &initial,
            &last,
            &oracle,
            &s2f,
            &self.cfg.decoder_config(),
            &train,
            &val,
            &self.cfg.codesign_options(),
            &self.cfg.eval_snrs,
        )?;
        write(&self.path("report.csv"), &two_stage_csv(&rows))?;
        Ok(rows)
    }

    pub fn two_stage(&self) -> Result<String> {
        let rows = self.two_stage_rows()?;
        let mut parts = Vec::new();
        for r in rows.iter().filter(|r| r.case == "optimized") {
            if let Some(i) = rows.iter().find(|i| i.case == "initial" && i.snr_db == r.snr_db) {
                parts.push(format!("{} dB: {:.2} vs {:.2}", r.snr_db, r.psnr, i.psnr));
            }
        }
        Ok(format!("two-stage-eval: optimized vs initial psnr [{}] -> {}", parts.join("; "), self.path("report.csv").display()))
    }

    /// Recomputes cond(Φ) of every logged shape snapshot.
    pub fn cond_trace(&self) -> Result<String> {
        let last = self.cfg.codesign.epochs.checked_sub(1).ok_or_else(|| Error::Config("codesign.epochs must be positive".into()))?;
        if !self.shape_path(last).exists() {
            self.codesign_run()?;
        }
        let s2f = self.surrogate()?;
        let f2s = self.inverse()?;
        let project = self.cfg.codesign.project_every > 0;
        let banks =
            (0..=last).map(|k| surrogate_bank(&s2f, &f2s, &Self::read_shape(&self.shape_path(k))?, project)).collect::<Result<Vec<_>>>()?;
        let rows = track_condition(&banks)?;
        let path = self.path("cond.csv");
        write(&path, &condition_csv(&rows))?;
        let (e, c) = rows.iter().copied().fold((0, f64::INFINITY), |a, r| if r.1 < a.1 { r } else { a });
        Ok(format!("cond-trace: epoch 0 {:.2}, min {c:.2} at epoch {e} -> {}", rows[0].1, path.display()))
    }
}

/// PSNR/SAM/MSE between two cube files.
pub fn eval_files(truth: &Path, recon: &Path) -> Result<Metrics> {
    metrics(&read_cube(truth)?, &read_cube(recon)?)
}

/// Writes `loss.svg`, `psnr.svg` and `cond.svg` into `out`.
pub fn plot_metrics(metrics_csv: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(metrics_csv).map_err(|e| Error::io(metrics_csv, e))?;
    mkdir(out)?;
    crate::plot::metrics_charts(&text)?
        .into_iter()
        .map(|(stem, svg)| {
            let p = out.join(format!("{stem}.svg"));
            write(&p, &svg).map(|_| p)
        })
        .collect()
}
