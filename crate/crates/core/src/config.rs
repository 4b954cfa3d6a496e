//! Run configuration: flat `key = value` text with dotted keys.
//!
//! Every key has a default, so an empty file is a complete config. Blank
//! lines and `#` comments are ignored; unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::codesign::CodesignOptions;
use crate::decoder::DecoderConfig;
use crate::materials::{CrystalGrid, MaterialDispersion, SpectralGrid};
use crate::oracle::{Oracle, StackSpec};
use crate::scenes::SceneSpec;
use crate::surrogate::{InverseConfig, SurrogateConfig, TrainOptions};
use crate::{Error, Result};

/// Values that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool);

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect()
    }
    fn show(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

/// Optimizer budget of one offline training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBudget {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub seed: u64,
}

impl StageBudget {
    pub fn options(&self) -> TrainOptions {
        TrainOptions { epochs: self.epochs, batch: self.batch, lr: self.lr, lr_floor: self.lr_floor, seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seed of the co-design run (initial shape, batches, decoder init, noise).
    pub seed: u64,
    pub out_dir: PathBuf,
    pub spectral_channels: usize,
    pub spectral_min_um: f64,
    pub spectral_max_um: f64,
    pub crystal_levels: usize,
    pub stack: StackSpec,
    /// `builtin` or a path to an `n,k` CSV table.
    pub dispersion: String,
    pub dataset_count: usize,
    pub dataset_seed: u64,
    pub surrogate: SurrogateConfig,
    pub surrogate_seed: u64,
    pub surrogate_train: StageBudget,
    pub inverse: InverseConfig,
    pub inverse_seed: u64,
    pub inverse_train: StageBudget,
    pub tandem: StageBudget,
    pub decoder: DecoderConfig,
    pub scenes: SceneSpec,
    pub scene_count: usize,
    pub val_count: usize,
    pub val_seed: u64,
    pub codesign: CodesignOptions,
    pub eval_snrs: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            spectral_channels: 100,
            spectral_min_um: 1.0,
            spectral_max_um: 2.5,
            crystal_levels: 11,
            stack: StackSpec::default(),
            dispersion: "builtin".into(),
            dataset_count: 2000,
            dataset_seed: 7,
            surrogate: SurrogateConfig::default(),
            surrogate_seed: 1,
            surrogate_train: StageBudget { epochs: 12, batch: 32, lr: 1e-3, lr_floor: 0.05, seed: 3 },
            inverse: InverseConfig::default(),
            inverse_seed: 2,
            inverse_train: StageBudget { epochs: 20, batch: 32, lr: 1e-3, lr_floor: 0.05, seed: 4 },
            tandem: StageBudget { epochs: 10, batch: 32, lr: 3e-4, lr_floor: 0.05, seed: 5 },
            decoder: DecoderConfig::default(),
            scenes: SceneSpec::default(),
            scene_count: 8,
            val_count: 2,
            val_seed: 2,
            codesign: CodesignOptions::default(),
            eval_snrs: vec![10.0, 20.0, 30.0],
        }
    }
}

// One table drives get, set and print so the three can never drift apart.
macro_rules! config_keys {
    ($m:ident) => {
        $m! {
            "seed" => [seed],
            "spectral.channels" => [spectral_channels],
            "spectral.min_um" => [spectral_min_um],
            "spectral.max_um" => [spectral_max_um],
            "crystal.levels" => [crystal_levels],
            "stack.thickness_um" => [stack.thickness_um],
            "stack.substrate_index" => [stack.substrate_index],
            "stack.superstrate_index" => [stack.superstrate_index],
            "stack.period_um" => [stack.period_um],
            "dispersion" => [dispersion],
            "dataset.count" => [dataset_count],
            "dataset.seed" => [dataset_seed],
            "surrogate.d_model" => [surrogate.d_model],
            "surrogate.heads" => [surrogate.heads],
            "surrogate.blocks" => [surrogate.blocks],
            "surrogate.ff_mult" => [surrogate.ff_mult],
            "surrogate.seed" => [surrogate_seed],
            "surrogate.epochs" => [surrogate_train.epochs],
            "surrogate.batch" => [surrogate_train.batch],
            "surrogate.lr" => [surrogate_train.lr],
            "surrogate.lr_floor" => [surrogate_train.lr_floor],
            "surrogate.shuffle_seed" => [surrogate_train.seed],
            "inverse.hidden" => [inverse.hidden],
            "inverse.layers" => [inverse.layers],
            "inverse.seed" => [inverse_seed],
            "inverse.epochs" => [inverse_train.epochs],
            "inverse.batch" => [inverse_train.batch],
            "inverse.lr" => [inverse_train.lr],
            "inverse.lr_floor" => [inverse_train.lr_floor],
            "inverse.shuffle_seed" => [inverse_train.seed],
            "tandem.epochs" => [tandem.epochs],
            "tandem.batch" => [tandem.batch],
            "tandem.lr" => [tandem.lr],
            "tandem.lr_floor" => [tandem.lr_floor],
            "tandem.shuffle_seed" => [tandem.seed],
            "decoder.features" => [decoder.features],
            "decoder.blocks" => [decoder.blocks],
            "decoder.patch" => [decoder.patch],
            "decoder.reduction" => [decoder.reduction],
            "decoder.input_scale" => [decoder.input_scale],
            "scenes.height" => [scenes.height],
            "scenes.width" => [scenes.width],
            "scenes.endmembers" => [scenes.endmembers],
            "scenes.dips" => [scenes.dips],
            "scenes.dip_width_min_um" => [scenes.dip_width_um.0],
            "scenes.dip_width_max_um" => [scenes.dip_width_um.1],
            "scenes.dip_depth_min" => [scenes.dip_depth.0],
            "scenes.dip_depth_max" => [scenes.dip_depth.1],
            "scenes.smoothness" => [scenes.smoothness],
            "scenes.contrast" => [scenes.contrast],
            "scenes.bad_band_a" => [scenes.bad_bands[0]],
            "scenes.bad_band_b" => [scenes.bad_bands[1]],
            "scenes.bad_band_noise" => [scenes.bad_band_noise],
            "scenes.seed" => [scenes.seed],
            "scenes.count" => [scene_count],
            "scenes.val_count" => [val_count],
            "scenes.val_seed" => [val_seed],
            "codesign.epochs" => [codesign.epochs],
            "codesign.steps_per_epoch" => [codesign.steps_per_epoch],
            "codesign.batch" => [codesign.batch],
            "codesign.crop" => [codesign.crop],
            "codesign.decoder_lr" => [codesign.decoder_lr],
            "codesign.shape_lr" => [codesign.shape_lr],
            "codesign.snr_min_db" => [codesign.snr_min_db],
            "codesign.snr_max_db" => [codesign.snr_max_db],
            "codesign.test_snr_db" => [codesign.test_snr_db],
            "codesign.project_every" => [codesign.project_every],
            "codesign.frozen_shape" => [codesign.frozen_shape],
            "eval.snrs" => [eval_snrs],
        }
    };
}

macro_rules! impl_set {
    ($($key:literal => [$($f:tt)+],)*) => {
        fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
            match key {
                "out_dir" => self.out_dir = PathBuf::from(value),
                $($key => {
                    self.$($f)+ = ConfigValue::parse_value(value)
                        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))?
                })*
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
            Ok(())
        }
    };
}

macro_rules! impl_print {
    ($($key:literal => [$($f:tt)+],)*) => {
        fn entries(&self) -> Vec<(&'static str, String)> {
            let mut v = vec![("out_dir", self.out_dir.display().to_string())];
            $(v.push(($key, ConfigValue::show(&self.$($f)+)));)*
            v
        }
    };
}

impl RunConfig {
    config_keys!(impl_set);
    config_keys!(impl_print);

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_field(key.trim(), value.trim())
    }

    /// Applies `key=value` (as given to `--set`).
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    pub fn keys(&self) -> Vec<&'static str> {
        self.entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(print())` reproduces `self`.
    pub fn print(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Loads a file, or the built-in defaults for the name `default`.
    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str() == "default" {
            return Ok(RunConfig::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.spectral_channels == 0 || !(self.spectral_min_um < self.spectral_max_um) {
            return bad(format!(
                "bad spectral grid: {} channels over [{}, {}]",
                self.spectral_channels, self.spectral_min_um, self.spectral_max_um
            ));
        }
        if self.crystal_levels < 2 {
            return bad("crystal.levels must be at least 2".into());
        }
        if self.scene_count == 0 || self.val_count == 0 {
            return bad("scenes.count and scenes.val_count must be positive".into());
        }
        if self.eval_snrs.is_empty() {
            return bad("eval.snrs must list at least one SNR".into());
        }
        self.stack.validate()
    }

    pub fn spectral_grid(&self) -> SpectralGrid {
        SpectralGrid::uniform(self.spectral_channels, self.spectral_min_um, self.spectral_max_um)
    }

    pub fn crystal_grid(&self) -> CrystalGrid {
        CrystalGrid::new(self.crystal_levels)
    }

    /// Model configs with `m`/`n` taken from the grids.
    pub fn surrogate_config(&self) -> SurrogateConfig {
        SurrogateConfig { m: self.crystal_levels, n: self.spectral_channels, ..self.surrogate.clone() }
    }

    pub fn inverse_config(&self) -> InverseConfig {
        InverseConfig { m: self.crystal_levels, n: self.spectral_channels, ..self.inverse.clone() }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig { m: self.crystal_levels, n: self.spectral_channels, ..self.decoder.clone() }
    }

    pub fn codesign_options(&self) -> CodesignOptions {
        CodesignOptions { seed: self.seed, ..self.codesign.clone() }
    }

    pub fn val_scene_spec(&self) -> SceneSpec {
        SceneSpec { seed: self.val_seed, ..self.scenes.clone() }
    }

    pub fn oracle_with(&self, dispersion: MaterialDispersion) -> Oracle {
        Oracle { dispersion, stack: self.stack.clone(), spectral: self.spectral_grid(), crystal: self.crystal_grid() }
    }
}
