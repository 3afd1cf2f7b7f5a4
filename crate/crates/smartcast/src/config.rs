//! Run configuration (JSON). Unknown keys are rejected everywhere; omitted
//! sections take the documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smartcast_core::kriging::Variogram;
use smartcast_core::lstm::{Loss, ModelShape, TrainConfig};
use smartcast_core::timeseries::{DEFAULT_INPUT_LEN, DEFAULT_MAX_GAP, N_FEATURES};
use smartcast_core::vegindex::{BandMapping, IndexKind, WINDOW_FEATURES};
use smartcast_core::SOIL_HORIZON;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{key}: {} does not exist", path.display())]
    MissingPath { key: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Mse,
    Mae,
}

impl From<LossName> for Loss {
    fn from(l: LossName) -> Self {
        match l {
            LossName::Mse => Loss::Mse,
            LossName::Mae => Loss::Mae,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexName {
    Ndvi,
    Ndwi,
}

impl From<IndexName> for IndexKind {
    fn from(k: IndexName) -> Self {
        match k {
            IndexName::Ndvi => IndexKind::Ndvi,
            IndexName::Ndwi => IndexKind::Ndwi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub sensor_csv: PathBuf,
    /// `sensor_id,x,y` coordinates in grid units.
    pub sensor_locations: PathBuf,
    pub stack_manifest: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoilModelSpec {
    pub input_len: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub dense_hidden: usize,
    pub test_fraction: f64,
    /// Share of each sensor's training windows held back to select the
    /// best epoch; 0 disables.
    pub validation_fraction: f64,
    pub max_gap: usize,
}

impl Default for SoilModelSpec {
    fn default() -> Self {
        Self {
            input_len: DEFAULT_INPUT_LEN,
            encoder_hidden: 200,
            decoder_hidden: 200,
            dense_hidden: 100,
            test_fraction: 0.2,
            validation_fraction: 0.0,
            max_gap: DEFAULT_MAX_GAP,
        }
    }
}

impl SoilModelSpec {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: N_FEATURES,
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
            dense_hidden: self.dense_hidden,
            horizon: SOIL_HORIZON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexModelSpec {
    pub kind: IndexName,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub dense_hidden: usize,
    /// Trailing six-image runs held out for testing.
    pub test_runs: usize,
}

impl Default for IndexModelSpec {
    fn default() -> Self {
        Self {
            kind: IndexName::Ndvi,
            encoder_hidden: 50,
            decoder_hidden: 50,
            dense_hidden: 20,
            test_runs: 1,
        }
    }
}

impl IndexModelSpec {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: WINDOW_FEATURES,
            encoder_hidden: self.encoder_hidden,
            decoder_hidden: self.decoder_hidden,
            dense_hidden: self.dense_hidden,
            horizon: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossName,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_epsilon: d.adam_epsilon,
            epochs: d.epochs,
            batch_size: d.batch_size,
            loss: LossName::Mse,
        }
    }
}

impl TrainSpec {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            loss: self.loss.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariogramSpec {
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl VariogramSpec {
    pub fn to_variogram(self) -> Result<Variogram, ConfigError> {
        Variogram::new(self.nugget, self.sill, self.range).map_err(|e| ConfigError::Invalid(format!("kriging.variogram: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KrigingSpec {
    /// Fixed variogram; when absent one is fitted per depth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variogram: Option<VariogramSpec>,
    pub n_bins: usize,
    /// Largest lag used for the empirical variogram; defaults to the grid
    /// diagonal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_lag: Option<f64>,
}

impl Default for KrigingSpec {
    fn default() -> Self {
        Self {
            variogram: None,
            n_bins: 6,
            max_lag: None,
        }
    }
}

/// Grid placement; width and height come from the imagery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub cell_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            cell_size: 10.0,
            origin_x: 0.0,
            origin_y: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandSpec {
    pub red: String,
    pub nir: String,
    pub swir: String,
}

impl Default for BandSpec {
    fn default() -> Self {
        let m = BandMapping::default();
        Self {
            red: m.red,
            nir: m.nir,
            swir: m.swir,
        }
    }
}

impl BandSpec {
    pub fn mapping(&self) -> BandMapping {
        BandMapping {
            red: self.red.clone(),
            nir: self.nir.clone(),
            swir: self.swir.clone(),
        }
    }
}

fn default_day() -> usize {
    SOIL_HORIZON
}

fn default_index_train() -> TrainSpec {
    TrainSpec {
        epochs: 30,
        ..TrainSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub soil_model: SoilModelSpec,
    #[serde(default)]
    pub soil_train: TrainSpec,
    #[serde(default)]
    pub index_model: IndexModelSpec,
    #[serde(default = "default_index_train")]
    pub index_train: TrainSpec,
    #[serde(default)]
    pub kriging: KrigingSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub bands: BandSpec,
    /// Forecast day (1..=14) that is interpolated.
    #[serde(default = "default_day")]
    pub forecast_day: usize,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.output_dir)
    }

    /// Value-range checks that do not touch the file system.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(1..=SOIL_HORIZON).contains(&self.forecast_day) {
            return bad(format!("forecast_day must be in 1..={SOIL_HORIZON}, got {}", self.forecast_day));
        }
        let s = &self.soil_model;
        if s.input_len == 0 || s.encoder_hidden == 0 || s.decoder_hidden == 0 || s.dense_hidden == 0 {
            return bad("soil_model sizes must be positive".into());
        }
        if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
            return bad(format!("soil_model.test_fraction must lie in (0, 1), got {}", s.test_fraction));
        }
        if !(0.0..1.0).contains(&s.validation_fraction) {
            return bad(format!("soil_model.validation_fraction must lie in [0, 1), got {}", s.validation_fraction));
        }
        let i = &self.index_model;
        if i.encoder_hidden == 0 || i.decoder_hidden == 0 || i.dense_hidden == 0 || i.test_runs == 0 {
            return bad("index_model sizes and test_runs must be positive".into());
        }
        for (name, t) in [("soil_train", &self.soil_train), ("index_train", &self.index_train)] {
            t.to_train_config(0)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        if let Some(v) = self.kriging.variogram {
            v.to_variogram()?;
        }
        if self.kriging.n_bins == 0 || self.kriging.max_lag.is_some_and(|m| !(m > 0.0)) {
            return bad("kriging.n_bins and kriging.max_lag must be positive".into());
        }
        if !(self.grid.cell_size > 0.0 && self.grid.origin_x.is_finite() && self.grid.origin_y.is_finite()) {
            return bad("grid.cell_size must be positive and the origin finite".into());
        }
        Ok(())
    }

    /// Checks that every input file exists.
    pub fn validate_inputs(&self) -> Result<(), ConfigError> {
        for (key, p) in [
            ("paths.sensor_csv", &self.paths.sensor_csv),
            ("paths.sensor_locations", &self.paths.sensor_locations),
            ("paths.stack_manifest", &self.paths.stack_manifest),
        ] {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(ConfigError::MissingPath { key, path: full });
            }
        }
        Ok(())
    }
}

/// Reads, parses and range-checks a config file. Relative paths inside it
/// are taken relative to the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.validate()?;
    Ok(cfg)
}
