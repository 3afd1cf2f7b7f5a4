//! Pipeline stages: ingest, soil and index training, forecasting,
//! interpolation and export.
//!
//! Every command writes into `<out>/quarantine/` and moves the files into
//! `<out>` only once all of them were produced.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use rayon::prelude::*;
use serde_json::{json, Value};
use smartcast_core::kriging::{
    build_model, empirical_variogram, fit_variogram, interpolate_grid, loo_score, stack_depths, Grid, GridGeometry,
    KrigingError, LooScore, MoistureVolume, SamplePoint, Variogram, NODATA,
};
use smartcast_core::lstm::{train, EpochStats, LstmError, Seq2SeqModel, TrainConfig};
use smartcast_core::timeseries::{
    build_series, chrono_split, make_windows, Feature, Scaler, SensorRecord, SensorSeries, WindowSet, N_FEATURES,
};
use smartcast_core::vegindex::{
    compute_index, flatten_stack, predict_pixel, stack_windows_for_training, BandGrid, ImageStack, IndexImage,
    IndexKind, VegError, WINDOW_FEATURES,
};
use smartcast_core::{mae, rmse, SOIL_HORIZON};
use thiserror::Error;

use crate::checkpoint;
use crate::config::{parse_config, ConfigError, RunConfig, TrainSpec};
use crate::io::{self, ForecastRow, IoError, SensorLocation};
use crate::raster;

/// Nodata value of forecast index images.
pub const INDEX_NODATA: f32 = -9999.0;

pub const QUARANTINE: &str = "quarantine";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    TrainSoil,
    TrainIndex,
    Forecast,
    Interpolate,
    Export,
    Synth,
    Gradcheck,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::TrainSoil => "train-soil",
            Stage::TrainIndex => "train-index",
            Stage::Forecast => "forecast",
            Stage::Interpolate => "interpolate",
            Stage::Export => "export",
            Stage::Synth => "synth",
            Stage::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: ErrorKind, message: impl fmt::Display) -> Self {
        Self {
            stage,
            kind,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn data(stage: Stage) -> impl Fn(&dyn fmt::Display) -> PipelineError {
    move |e| PipelineError::new(stage, ErrorKind::Data, e)
}

fn io_err(stage: Stage) -> impl Fn(IoError) -> PipelineError {
    move |e| PipelineError::new(stage, ErrorKind::Data, e)
}

fn lstm_err(stage: Stage) -> impl Fn(LstmError) -> PipelineError {
    move |e| {
        let kind = match e {
            LstmError::Diverged { .. } | LstmError::NonFiniteGradient { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        };
        PipelineError::new(stage, kind, e)
    }
}

fn veg_err(stage: Stage) -> impl Fn(VegError) -> PipelineError {
    move |e| match e {
        VegError::Lstm(inner) => lstm_err(stage)(inner),
        VegError::UnknownBand(_) => PipelineError::new(stage, ErrorKind::Config, e),
        other => PipelineError::new(stage, ErrorKind::Data, other),
    }
}

fn kriging_err(stage: Stage) -> impl Fn(KrigingError) -> PipelineError {
    move |e| {
        let kind = match e {
            KrigingError::Factorization { .. } => ErrorKind::Numeric,
            KrigingError::InvalidVariogram { .. } => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        PipelineError::new(stage, kind, e)
    }
}

fn config_err(e: ConfigError) -> PipelineError {
    PipelineError::new(Stage::Config, ErrorKind::Config, e)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(path).map_err(config_err)
}

/// Everything read from disk.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub records: Vec<SensorRecord>,
    pub locations: Vec<SensorLocation>,
    /// Band grids in date order.
    pub stack: Vec<(NaiveDate, BandGrid)>,
}

impl Inputs {
    pub fn depths(&self) -> Vec<u32> {
        depths(&self.records)
    }
}

pub fn depths(records: &[SensorRecord]) -> Vec<u32> {
    records.iter().map(|r| r.depth_cm).collect::<BTreeSet<_>>().into_iter().collect()
}

fn sensors_at(records: &[SensorRecord], depth_cm: u32) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.depth_cm == depth_cm)
        .map(|r| r.sensor_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn ingest(cfg: &RunConfig) -> Result<Inputs> {
    cfg.validate_inputs().map_err(config_err)?;
    let stage = Stage::Ingest;
    let records = io::load_sensor_csv(&cfg.resolve(&cfg.paths.sensor_csv)).map_err(io_err(stage))?;
    if records.is_empty() {
        return Err(PipelineError::new(stage, ErrorKind::Data, "sensor CSV has no records"));
    }
    let locations = io::load_locations(&cfg.resolve(&cfg.paths.sensor_locations)).map_err(io_err(stage))?;
    let mut manifest = io::load_manifest(&cfg.resolve(&cfg.paths.stack_manifest)).map_err(io_err(stage))?;
    manifest.sort_by_key(|(d, _)| *d);
    let mut stack = Vec::with_capacity(manifest.len());
    for (date, path) in manifest {
        let grid = raster::read_band_grid(&path).map_err(io_err(stage))?;
        grid.validate_reflectance()
            .map_err(|e| PipelineError::new(stage, ErrorKind::Data, format!("{}: {e}", path.display())))?;
        stack.push((date, grid));
    }
    Ok(Inputs {
        records,
        locations,
        stack,
    })
}

/// Standardization fitted on `rows`; a constant feature keeps unit scale.
pub fn fit_scaler<'a>(rows: impl IntoIterator<Item = &'a [f64]>, n_features: usize) -> Option<Scaler> {
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..n_features).map(|f| rows.iter().map(|r| r[f]).sum::<f64>() / n).collect();
    let std = (0..n_features)
        .map(|f| {
            let var = rows.iter().map(|r| (r[f] - mean[f]).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            if s > 1e-12 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    Some(Scaler { mean, std })
}

/// Forecast error against the last-value persistence baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Skill {
    pub rmse: f64,
    pub mae: f64,
    pub persistence_rmse: f64,
    pub persistence_mae: f64,
}

impl Skill {
    fn from_pairs(pred: &[f64], persist: &[f64], truth: &[f64]) -> Option<Self> {
        Some(Self {
            rmse: rmse(pred, truth).ok()?,
            mae: mae(pred, truth).ok()?,
            persistence_rmse: rmse(persist, truth).ok()?,
            persistence_mae: mae(persist, truth).ok()?,
        })
    }

    /// Relative RMSE reduction over persistence.
    pub fn improvement(&self) -> f64 {
        1.0 - self.rmse / self.persistence_rmse
    }

    fn to_json(self) -> Value {
        json!({
            "rmse": self.rmse,
            "mae": self.mae,
            "persistence_rmse": self.persistence_rmse,
            "persistence_mae": self.persistence_mae,
            "improvement_over_persistence": self.improvement(),
        })
    }
}

/// Pooled windows for one depth, in original units.
#[derive(Debug, Clone)]
pub struct SoilDataset {
    pub depth_cm: u32,
    pub sensors: Vec<String>,
    pub train: WindowSet,
    /// Tail of each sensor's training windows, used to pick the best epoch.
    pub val: WindowSet,
    pub test: WindowSet,
    pub embargoed: usize,
    /// Fitted on the days preceding each sensor's first test window.
    pub scaler: Scaler,
}

/// Every sensor's series is split chronologically on its own; the pieces
/// are then pooled.
pub fn soil_dataset(records: &[SensorRecord], depth_cm: u32, cfg: &RunConfig) -> Result<SoilDataset> {
    let stage = Stage::TrainSoil;
    let spec = &cfg.soil_model;
    let sensors = sensors_at(records, depth_cm);
    let mut train = WindowSet::empty(N_FEATURES, spec.input_len, SOIL_HORIZON);
    let mut test = train.clone();
    let mut val = train.clone();
    let mut embargoed = 0;
    let mut scaler_rows: Vec<[f64; N_FEATURES]> = Vec::new();
    for id in &sensors {
        let series = build_series(records, id, depth_cm, spec.max_gap).map_err(|e| data(stage)(&e))?;
        let windows = make_windows(&series, spec.input_len)
            .map_err(|e| data(stage)(&format!("sensor {id} at {depth_cm} cm: {e}")))?;
        let split = chrono_split(&windows, spec.test_fraction)
            .map_err(|e| data(stage)(&format!("sensor {id} at {depth_cm} cm: {e}")))?;
        scaler_rows.extend_from_slice(&series.features[..split.test.starts[0]]);
        if spec.validation_fraction > 0.0 {
            let inner = chrono_split(&split.train, spec.validation_fraction)
                .map_err(|e| data(stage)(&format!("sensor {id} at {depth_cm} cm, validation split: {e}")))?;
            train.append(&inner.train);
            val.append(&inner.test);
            embargoed += inner.embargoed;
        } else {
            train.append(&split.train);
        }
        test.append(&split.test);
        embargoed += split.embargoed;
    }
    if train.is_empty() || test.is_empty() {
        return Err(data(stage)(&format!("no train/test windows at {depth_cm} cm")));
    }
    let scaler = fit_scaler(scaler_rows.iter().map(|r| &r[..]), N_FEATURES).expect("non-empty rows");
    Ok(SoilDataset {
        depth_cm,
        sensors,
        train,
        val,
        test,
        embargoed,
        scaler,
    })
}

/// Multi-step skill on raw windows; persistence repeats the last observed
/// target value.
pub fn soil_skill(model: &Seq2SeqModel, test: &WindowSet) -> Result<Skill> {
    let stage = Stage::TrainSoil;
    let ch = model.target_channel;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let input = test.input(i);
            let last = input[input.len() - test.n_features + ch];
            model.predict(input).map(|p| (p, vec![last; test.horizon]))
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(lstm_err(stage))?;
    let (pred, persist): (Vec<Vec<f64>>, Vec<Vec<f64>>) = rows.into_iter().unzip();
    Skill::from_pairs(&pred.concat(), &persist.concat(), &test.targets)
        .ok_or_else(|| data(stage)(&"empty test set"))
}

#[derive(Debug, Clone)]
pub struct SoilOutcome {
    pub depth_cm: u32,
    pub sensors: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    pub embargoed: usize,
    pub model: Seq2SeqModel,
    pub history: Vec<EpochStats>,
    pub skill: Skill,
}

fn soil_seed(seed: u64, depth_cm: u32) -> u64 {
    seed.wrapping_add(depth_cm as u64)
}

const INDEX_SEED_OFFSET: u64 = 1 << 20;

pub fn train_soil_depth(records: &[SensorRecord], depth_cm: u32, cfg: &RunConfig) -> Result<SoilOutcome> {
    let stage = Stage::TrainSoil;
    let ds = soil_dataset(records, depth_cm, cfg)?;
    let seed = soil_seed(cfg.seed, depth_cm);
    let ch = Feature::Moisture as usize;
    let model = Seq2SeqModel::init(&cfg.soil_model.shape(), seed)
        .map_err(lstm_err(stage))?
        .with_scaler(ds.scaler.clone(), ch);
    let tc: TrainConfig = cfg.soil_train.to_train_config(seed);
    let (model, history) = train(model, &ds.train.scaled(&ds.scaler, ch), &ds.val.scaled(&ds.scaler, ch), &tc)
        .map_err(lstm_err(stage))?;
    let skill = soil_skill(&model, &ds.test)?;
    Ok(SoilOutcome {
        depth_cm,
        sensors: ds.sensors.len(),
        train_windows: ds.train.len(),
        val_windows: ds.val.len(),
        test_windows: ds.test.len(),
        embargoed: ds.embargoed,
        model,
        history,
        skill,
    })
}

/// One model per depth, trained in parallel.
pub fn train_soil(records: &[SensorRecord], cfg: &RunConfig) -> Result<Vec<SoilOutcome>> {
    depths(records)
        .into_par_iter()
        .map(|d| train_soil_depth(records, d, cfg))
        .collect()
}

pub fn index_stack(grids: &[(NaiveDate, BandGrid)], cfg: &RunConfig) -> Result<ImageStack> {
    let stage = Stage::Ingest;
    let kind: IndexKind = cfg.index_model.kind.into();
    let mapping = cfg.bands.mapping();
    let images = grids
        .iter()
        .map(|(d, g)| compute_index(g, kind, &mapping).map(|img| (*d, img)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(veg_err(stage))?;
    ImageStack::new(images).map_err(veg_err(stage))
}

#[derive(Debug, Clone)]
pub struct IndexOutcome {
    pub model: Seq2SeqModel,
    pub history: Vec<EpochStats>,
    pub train_runs: usize,
    pub test_runs: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub skill: Skill,
}

/// Trains on every six-image run except the last `test_runs`, which are
/// scored against persistence of the most recent image.
pub fn train_index(stack: &ImageStack, cfg: &RunConfig) -> Result<IndexOutcome> {
    train_index_with(stack, cfg, &cfg.index_train)
}

pub fn train_index_with(stack: &ImageStack, cfg: &RunConfig, spec: &TrainSpec) -> Result<IndexOutcome> {
    let stage = Stage::TrainIndex;
    let samples = stack_windows_for_training(stack).map_err(veg_err(stage))?;
    let n_runs = stack.len() - smartcast_core::vegindex::HISTORY_LEN;
    let test_runs = cfg.index_model.test_runs;
    if test_runs >= n_runs {
        return Err(data(stage)(&format!(
            "{} images give {n_runs} run(s); holding out {test_runs} leaves none for training",
            stack.len()
        )));
    }
    let cut = n_runs - test_runs;
    let train_set = samples.to_window_set(|r| r < cut);
    let test_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples.run[i] >= cut).collect();
    if train_set.is_empty() || test_idx.is_empty() {
        return Err(data(stage)(&"no valid pixels in the training or test runs"));
    }
    let scaler = fit_scaler(train_set.inputs.chunks(WINDOW_FEATURES), WINDOW_FEATURES).expect("non-empty training set");
    let seed = cfg.seed.wrapping_add(INDEX_SEED_OFFSET);
    let model = Seq2SeqModel::init(&cfg.index_model.shape(), seed)
        .map_err(lstm_err(stage))?
        .with_scaler(scaler.clone(), 0);
    let empty = WindowSet::empty(WINDOW_FEATURES, train_set.input_len, 1);
    let (model, history) = train(model, &train_set.scaled(&scaler, 0), &empty, &spec.to_train_config(seed))
        .map_err(lstm_err(stage))?;
    let pred = test_idx
        .par_iter()
        .map(|&i| predict_pixel(&model, &samples.windows[i]))
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(veg_err(stage))?;
    let persist: Vec<f64> = test_idx.iter().map(|&i| samples.windows[i].last_value()).collect();
    let truth: Vec<f64> = test_idx.iter().map(|&i| samples.targets[i]).collect();
    let skill = Skill::from_pairs(&pred, &persist, &truth).ok_or_else(|| data(stage)(&"empty test set"))?;
    Ok(IndexOutcome {
        model,
        history,
        train_runs: cut,
        test_runs,
        train_samples: train_set.len(),
        test_samples: test_idx.len(),
        skill,
    })
}

/// Forecasts from the last `input_len` days of every sensor series. All
/// series must end on the same day.
pub fn forecast_soil(
    models: &[(u32, Seq2SeqModel)],
    records: &[SensorRecord],
    locations: &[SensorLocation],
    cfg: &RunConfig,
) -> Result<Vec<ForecastRow>> {
    let stage = Stage::Forecast;
    let mut issued: Option<NaiveDate> = None;
    let mut jobs: Vec<(u32, &Seq2SeqModel, SensorSeries, &SensorLocation)> = Vec::new();
    for (depth, model) in models {
        for id in sensors_at(records, *depth) {
            let loc = locations
                .iter()
                .find(|l| l.sensor_id == id)
                .ok_or_else(|| data(stage)(&format!("sensor {id} has no location")))?;
            let series = build_series(records, &id, *depth, cfg.soil_model.max_gap).map_err(|e| data(stage)(&e))?;
            let last = *series.dates.last().expect("non-empty series");
            match issued {
                None => issued = Some(last),
                Some(d) if d != last => {
                    return Err(data(stage)(&format!(
                        "sensor {id} at {depth} cm ends on {last}, others on {d}; all series must end on the same day"
                    )))
                }
                _ => {}
            }
            let len = cfg.soil_model.input_len;
            if series.len() < len {
                return Err(data(stage)(&format!("sensor {id} at {depth} cm has {} days, need {len}", series.len())));
            }
            jobs.push((*depth, model, series, loc));
        }
    }
    let len = cfg.soil_model.input_len;
    let rows: Vec<Vec<ForecastRow>> = jobs
        .par_iter()
        .map(|(depth, model, series, loc)| {
            let input = series.features[series.len() - len..].as_flattened();
            let out = model.predict(input)?;
            let issued = *series.dates.last().expect("non-empty");
            Ok(out
                .into_iter()
                .enumerate()
                .map(|(k, moisture)| ForecastRow {
                    sensor_id: loc.sensor_id.clone(),
                    depth_cm: *depth,
                    x: loc.x,
                    y: loc.y,
                    issued,
                    lead_day: k + 1,
                    date: issued + Days::new(k as u64 + 1),
                    moisture,
                })
                .collect())
        })
        .collect::<std::result::Result<_, LstmError>>()
        .map_err(lstm_err(stage))?;
    Ok(rows.concat())
}

/// Index image forecast for `target`, one pixel per rayon task.
pub fn forecast_index(model: &Seq2SeqModel, stack: &ImageStack, target: NaiveDate, kind: IndexKind) -> Result<IndexImage> {
    let stage = Stage::Forecast;
    let flat = flatten_stack(stack, target).map_err(veg_err(stage))?;
    let values = flat
        .windows
        .par_iter()
        .zip(flat.mask.par_iter())
        .map(|(w, &valid)| {
            if valid {
                predict_pixel(model, w).map(|v| v as f32)
            } else {
                Ok(INDEX_NODATA)
            }
        })
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(veg_err(stage))?;
    IndexImage::new(flat.width, flat.height, kind, values, INDEX_NODATA).map_err(veg_err(stage))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariogramSource {
    Config,
    Fitted,
    /// Nugget 0, sill = sample variance, range = half the domain diagonal.
    Fallback,
}

impl VariogramSource {
    pub fn name(self) -> &'static str {
        match self {
            VariogramSource::Config => "config",
            VariogramSource::Fitted => "fitted",
            VariogramSource::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DepthKriging {
    pub depth_cm: u32,
    pub sensors: Vec<String>,
    pub samples: Vec<SamplePoint>,
    pub variogram: Variogram,
    pub source: VariogramSource,
    pub jitter: f64,
    pub loo: Option<LooScore>,
    pub extrapolated_cells: usize,
    pub grid: Grid,
}

pub fn grid_geometry(cfg: &RunConfig, width: usize, height: usize) -> GridGeometry {
    GridGeometry {
        width,
        height,
        cell_size: cfg.grid.cell_size,
        origin_x: cfg.grid.origin_x,
        origin_y: cfg.grid.origin_y,
    }
}

fn diagonal(g: &GridGeometry) -> f64 {
    (g.width as f64 * g.cell_size).hypot(g.height as f64 * g.cell_size)
}

/// The configured variogram, else a fit to the empirical one, else the
/// fallback. A fit whose structured part (sill) is negligible next to the
/// sample variance is treated as failed.
pub fn choose_variogram(samples: &[SamplePoint], geometry: &GridGeometry, cfg: &RunConfig) -> Result<(Variogram, VariogramSource)> {
    if let Some(v) = cfg.kriging.variogram {
        return Ok((v.to_variogram().map_err(config_err)?, VariogramSource::Config));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.value).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.value - mean).powi(2)).sum::<f64>() / n;
    let max_lag = cfg.kriging.max_lag.unwrap_or_else(|| diagonal(geometry));
    if let Ok(v) = empirical_variogram(samples, cfg.kriging.n_bins, max_lag).and_then(|b| fit_variogram(&b)) {
        if v.sill > MIN_SILL_SHARE * var {
            return Ok((v, VariogramSource::Fitted));
        }
    }
    let sill = if var > 0.0 { var } else { 1.0 };
    let v = Variogram::new(0.0, sill, 0.5 * diagonal(geometry)).map_err(kriging_err(Stage::Interpolate))?;
    Ok((v, VariogramSource::Fallback))
}

const MIN_SILL_SHARE: f64 = 1e-3;

/// Kriges the `lead_day` forecasts of each depth onto `geometry`.
pub fn interpolate(
    rows: &[ForecastRow],
    lead_day: usize,
    geometry: &GridGeometry,
    mask: Option<&[bool]>,
    cfg: &RunConfig,
) -> Result<(MoistureVolume, Vec<DepthKriging>)> {
    let stage = Stage::Interpolate;
    let depth_set: BTreeSet<u32> = rows.iter().map(|r| r.depth_cm).collect();
    if depth_set.is_empty() {
        return Err(data(stage)(&"no forecasts to interpolate"));
    }
    let results = depth_set
        .into_par_iter()
        .map(|depth| {
            let mut picked: Vec<&ForecastRow> =
                rows.iter().filter(|r| r.depth_cm == depth && r.lead_day == lead_day).collect();
            picked.sort_by(|a, b| a.sensor_id.cmp(&b.sensor_id));
            if picked.is_empty() {
                return Err(data(stage)(&format!("no day-{lead_day} forecasts at {depth} cm")));
            }
            let samples: Vec<SamplePoint> = picked.iter().map(|r| SamplePoint::new(r.x, r.y, r.moisture)).collect();
            let (variogram, source) = choose_variogram(&samples, geometry, cfg)?;
            let model = build_model(&samples, &variogram).map_err(kriging_err(stage))?;
            let grid = interpolate_grid(&model, geometry, mask).map_err(kriging_err(stage))?;
            let extrapolated_cells = (0..geometry.cells())
                .filter(|&i| mask.map_or(true, |m| m[i]))
                .filter(|&i| {
                    let (x, y) = geometry.center(i);
                    model.predict(x, y).extrapolated
                })
                .count();
            let loo = loo_score(&samples, &variogram).ok();
            Ok(DepthKriging {
                depth_cm: depth,
                sensors: picked.iter().map(|r| r.sensor_id.clone()).collect(),
                samples,
                variogram,
                source,
                jitter: model.jitter(),
                loo,
                extrapolated_cells,
                grid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let volume = stack_depths(results.iter().map(|r| (r.depth_cm, r.grid.clone())).collect()).map_err(kriging_err(stage))?;
    Ok((volume, results))
}

/// Output directory with a quarantine area.
#[derive(Debug)]
pub struct Staging {
    out: PathBuf,
    dir: PathBuf,
}

impl Staging {
    /// Clears any previous quarantine under `out`.
    pub fn new(out: &Path) -> Result<Self> {
        let dir = out.join(QUARANTINE);
        let fail = |e: std::io::Error| PipelineError::new(Stage::Export, ErrorKind::Data, format!("{}: {e}", dir.display()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(fail)?;
        }
        std::fs::create_dir_all(&dir).map_err(fail)?;
        Ok(Self {
            out: out.to_path_buf(),
            dir,
        })
    }

    /// Where a file destined for `<out>/<rel>` is written first.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Moves every staged file into the output directory; returns their
    /// relative paths, sorted.
    pub fn promote(self) -> Result<Vec<String>> {
        let fail = |p: &Path, e: std::io::Error| PipelineError::new(Stage::Export, ErrorKind::Data, format!("{}: {e}", p.display()));
        let mut files = Vec::new();
        collect_files(&self.dir, &mut files).map_err(|e| fail(&self.dir, e))?;
        files.sort();
        let mut rels = Vec::with_capacity(files.len());
        for f in files {
            let rel = f.strip_prefix(&self.dir).expect("inside quarantine").to_path_buf();
            let dest = self.out.join(&rel);
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent).map_err(|e| fail(parent, e))?;
            }
            std::fs::rename(&f, &dest).map_err(|e| fail(&dest, e))?;
            rels.push(rel_string(&rel));
        }
        std::fs::remove_dir_all(&self.dir).map_err(|e| fail(&self.dir, e))?;
        Ok(rels)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn soil_checkpoint_name(depth_cm: u32) -> String {
    format!("models/soil_depth_{depth_cm:03}.smlstm")
}

pub const INDEX_CHECKPOINT: &str = "models/index.smlstm";
pub const FORECAST_CSV: &str = "forecast.csv";

fn index_forecast_name(kind: IndexKind) -> String {
    format!("index/{}_forecast.bgrid", kind.name().to_lowercase())
}

fn export_err(e: IoError) -> PipelineError {
    PipelineError::new(Stage::Export, ErrorKind::Data, e)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    raster::write_bytes(path, text.as_bytes()).map_err(export_err)
}

fn history_json(h: &[EpochStats]) -> Value {
    json!({
        "epochs": h.len(),
        "final_train_loss": h.last().map(|e| e.train_loss),
        "train_loss": h.iter().map(|e| e.train_loss).collect::<Vec<_>>(),
        "validation_loss": h.iter().map(|e| e.val_loss).collect::<Vec<_>>(),
        "best_epoch": best_epoch(h),
    })
}

fn best_epoch(h: &[EpochStats]) -> Option<usize> {
    h.iter()
        .filter_map(|e| e.val_loss.map(|v| (e.epoch, v)))
        .fold(None, |best: Option<(usize, f64)>, (e, v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((e, v)),
        })
        .map(|(e, _)| e)
}

fn train_spec_json(t: &TrainSpec, seed: u64) -> Value {
    serde_json::to_value(t).map_or(Value::Null, |mut v| {
        v["seed"] = json!(seed);
        v
    })
}

fn export_soil(staging: &Staging, outcomes: &[SoilOutcome], cfg: &RunConfig) -> Result<Value> {
    let mut entries = Vec::new();
    for o in outcomes {
        let name = soil_checkpoint_name(o.depth_cm);
        let meta = json!({
            "depth_cm": o.depth_cm,
            "input_len": cfg.soil_model.input_len,
            "train": train_spec_json(&cfg.soil_train, soil_seed(cfg.seed, o.depth_cm)),
        });
        checkpoint::save(&staging.path(&name), &o.model, meta).map_err(export_err)?;
        entries.push(json!({
            "depth_cm": o.depth_cm,
            "sensors": o.sensors,
            "train_windows": o.train_windows,
            "validation_windows": o.val_windows,
            "test_windows": o.test_windows,
            "embargoed_windows": o.embargoed,
            "history": history_json(&o.history),
            "test": o.skill.to_json(),
            "checkpoint": name,
        }));
    }
    Ok(Value::Array(entries))
}

fn export_index(staging: &Staging, o: &IndexOutcome, cfg: &RunConfig) -> Result<Value> {
    let meta = json!({
        "kind": cfg.index_model.kind,
        "train": train_spec_json(&cfg.index_train, cfg.seed.wrapping_add(INDEX_SEED_OFFSET)),
    });
    checkpoint::save(&staging.path(INDEX_CHECKPOINT), &o.model, meta).map_err(export_err)?;
    Ok(json!({
        "kind": cfg.index_model.kind,
        "train_runs": o.train_runs,
        "test_runs": o.test_runs,
        "train_samples": o.train_samples,
        "test_samples": o.test_samples,
        "history": history_json(&o.history),
        "test": o.skill.to_json(),
        "checkpoint": INDEX_CHECKPOINT,
    }))
}

fn export_forecast(staging: &Staging, rows: &[ForecastRow], image: &IndexImage, target: NaiveDate, cfg: &RunConfig) -> Result<Value> {
    io::write_forecast_csv(&staging.path(FORECAST_CSV), rows).map_err(export_err)?;
    let name = index_forecast_name(image.kind);
    let grid = BandGrid::new(
        image.width,
        image.height,
        image.nodata,
        vec![image.kind.name().to_lowercase()],
        image.values.clone(),
    )
    .map_err(veg_err(Stage::Export))?;
    raster::write_band_grid(&staging.path(&name), &grid).map_err(export_err)?;
    let pgm = name.replace(".bgrid", ".pgm");
    let values: Vec<f64> = image.values.iter().map(|&v| v as f64).collect();
    raster::write_heatmap(&staging.path(&pgm), &values, image.width, image.height, image.nodata as f64).map_err(export_err)?;
    let issued = rows.first().map(|r| r.issued);
    Ok(json!({
        "issued": issued.map(|d| d.to_string()),
        "lead_day": cfg.forecast_day,
        "target_date": target.to_string(),
        "points": rows.len(),
        "csv": FORECAST_CSV,
        "index_image": name,
        "index_heatmap": pgm,
        "index_valid_pixels": image.valid_mask().iter().filter(|&&v| v).count(),
    }))
}

fn export_volume(staging: &Staging, volume: &MoistureVolume, depths: &[DepthKriging]) -> Result<Value> {
    let g = volume.geometry;
    let mut manifest = Vec::new();
    let mut entries = Vec::new();
    for (layer, k) in volume.layers.iter().zip(depths) {
        let name = format!("volume/depth_{:03}.bgrid", layer.depth_cm);
        let data: Vec<f32> = layer
            .grid
            .values
            .iter()
            .chain(&layer.grid.variance)
            .map(|&v| v as f32)
            .collect();
        let grid = BandGrid::new(g.width, g.height, NODATA as f32, vec!["moisture".into(), "variance".into()], data)
            .map_err(veg_err(Stage::Export))?;
        raster::write_band_grid(&staging.path(&name), &grid).map_err(export_err)?;
        manifest.push((layer.depth_cm, format!("depth_{:03}.bgrid", layer.depth_cm)));
        let heat = format!("heatmaps/depth_{:03}.pgm", layer.depth_cm);
        raster::write_heatmap(&staging.path(&heat), &layer.grid.values, g.width, g.height, NODATA).map_err(export_err)?;
        let bounds = raster::value_bounds(&layer.grid.values, NODATA);
        entries.push(json!({
            "depth_cm": layer.depth_cm,
            "sensors": k.sensors,
            "samples": k.samples.iter().zip(&k.sensors).map(|(s, id)| json!({
                "sensor_id": id, "x": s.x, "y": s.y, "value": s.value,
            })).collect::<Vec<_>>(),
            "variogram": {"nugget": k.variogram.nugget, "sill": k.variogram.sill, "range": k.variogram.range},
            "variogram_source": k.source.name(),
            "jitter": k.jitter,
            "loo_r2": k.loo.as_ref().map(|l| l.clamped()),
            "loo_r2_raw": k.loo.as_ref().map(|l| l.raw),
            "extrapolated_cells": k.extrapolated_cells,
            "valid_cells": layer.grid.values.iter().filter(|&&v| v != NODATA).count(),
            "min": bounds.map(|b| b.0),
            "max": bounds.map(|b| b.1),
            "grid": name,
            "heatmap": heat,
        }));
    }
    io::write_volume_manifest(&staging.path("volume/manifest.csv"), &manifest).map_err(export_err)?;
    io::write_grid_csv(&staging.path("grid.csv"), volume).map_err(export_err)?;
    Ok(json!({
        "geometry": {
            "width": g.width, "height": g.height, "cell_size": g.cell_size,
            "origin_x": g.origin_x, "origin_y": g.origin_y,
        },
        "nodata": NODATA,
        "manifest": "volume/manifest.csv",
        "grid_csv": "grid.csv",
        "depths": entries,
    }))
}

fn report_base(cfg: &RunConfig, command: &str) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command));
    m.insert("seed".into(), json!(cfg.seed));
    m.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    m
}

fn finish(staging: Staging, mut report: serde_json::Map<String, Value>, name: &str) -> Result<Value> {
    let mut outputs: Vec<String> = Vec::new();
    let mut files = Vec::new();
    collect_files(&staging.dir, &mut files).map_err(|e| PipelineError::new(Stage::Export, ErrorKind::Data, e))?;
    for f in files {
        outputs.push(rel_string(f.strip_prefix(&staging.dir).expect("inside quarantine")));
    }
    outputs.push(name.to_string());
    outputs.sort();
    report.insert("outputs".into(), json!(outputs));
    let report = Value::Object(report);
    write_json(&staging.path(name), &report)?;
    staging.promote()?;
    Ok(report)
}

fn mask_for(image: &IndexImage) -> Vec<bool> {
    image.valid_mask()
}

/// All stages in order; writes the models, forecasts, the interpolated
/// volume and `report.json`.
pub fn run(cfg: &RunConfig) -> Result<Value> {
    let inputs = ingest(cfg)?;
    let stack = index_stack(&inputs.stack, cfg)?;
    let soil = train_soil(&inputs.records, cfg)?;
    let index = train_index(&stack, cfg)?;
    let models: Vec<(u32, Seq2SeqModel)> = soil.iter().map(|o| (o.depth_cm, o.model.clone())).collect();
    let rows = forecast_soil(&models, &inputs.records, &inputs.locations, cfg)?;
    let issued = rows.first().expect("at least one forecast").issued;
    let target = issued + Days::new(cfg.forecast_day as u64);
    let image = forecast_index(&index.model, &stack, target, cfg.index_model.kind.into())?;
    let (width, height) = (image.width, image.height);
    let geometry = grid_geometry(cfg, width, height);
    let mask = mask_for(&image);
    let (volume, kriged) = interpolate(&rows, cfg.forecast_day, &geometry, Some(&mask), cfg)?;

    let staging = Staging::new(&cfg.output_dir())?;
    let mut report = report_base(cfg, "run");
    report.insert("soil".into(), export_soil(&staging, &soil, cfg)?);
    report.insert("index".into(), export_index(&staging, &index, cfg)?);
    report.insert("forecast".into(), export_forecast(&staging, &rows, &image, target, cfg)?);
    report.insert("volume".into(), export_volume(&staging, &volume, &kriged)?);
    finish(staging, report, "report.json")
}

pub fn run_train_soil(cfg: &RunConfig) -> Result<Value> {
    let inputs = ingest(cfg)?;
    let soil = train_soil(&inputs.records, cfg)?;
    let staging = Staging::new(&cfg.output_dir())?;
    let mut report = report_base(cfg, "train-soil");
    report.insert("soil".into(), export_soil(&staging, &soil, cfg)?);
    finish(staging, report, "report_train_soil.json")
}

pub fn run_train_index(cfg: &RunConfig) -> Result<Value> {
    let inputs = ingest(cfg)?;
    let stack = index_stack(&inputs.stack, cfg)?;
    let index = train_index(&stack, cfg)?;
    let staging = Staging::new(&cfg.output_dir())?;
    let mut report = report_base(cfg, "train-index");
    report.insert("index".into(), export_index(&staging, &index, cfg)?);
    finish(staging, report, "report_train_index.json")
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Seq2SeqModel> {
    if !path.is_file() {
        return Err(data(Stage::Forecast)(&format!(
            "{} not found; run {what} first",
            path.display()
        )));
    }
    checkpoint::load(path).map(|(m, _)| m).map_err(io_err(Stage::Forecast))
}

/// Forecasts with the checkpoints under `<out>/models`.
pub fn run_forecast(cfg: &RunConfig) -> Result<Value> {
    let inputs = ingest(cfg)?;
    let out = cfg.output_dir();
    let models = inputs
        .depths()
        .into_iter()
        .map(|d| load_checkpoint(&out.join(soil_checkpoint_name(d)), "train-soil").map(|m| (d, m)))
        .collect::<Result<Vec<_>>>()?;
    let index_model = load_checkpoint(&out.join(INDEX_CHECKPOINT), "train-index")?;
    let stack = index_stack(&inputs.stack, cfg)?;
    let rows = forecast_soil(&models, &inputs.records, &inputs.locations, cfg)?;
    let issued = rows.first().expect("at least one forecast").issued;
    let target = issued + Days::new(cfg.forecast_day as u64);
    let image = forecast_index(&index_model, &stack, target, cfg.index_model.kind.into())?;
    let staging = Staging::new(&out)?;
    let mut report = report_base(cfg, "forecast");
    report.insert("forecast".into(), export_forecast(&staging, &rows, &image, target, cfg)?);
    finish(staging, report, "report_forecast.json")
}

/// Kriges `<out>/forecast.csv`, masked by the forecast index image.
pub fn run_interpolate(cfg: &RunConfig) -> Result<Value> {
    let stage = Stage::Interpolate;
    let out = cfg.output_dir();
    let csv = out.join(FORECAST_CSV);
    if !csv.is_file() {
        return Err(data(stage)(&format!("{} not found; run forecast first", csv.display())));
    }
    let rows = io::load_forecast_csv(&csv).map_err(io_err(stage))?;
    let image_path = out.join(index_forecast_name(cfg.index_model.kind.into()));
    let image = raster::read_band_grid(&image_path).map_err(io_err(stage))?;
    let mask: Vec<bool> = image.data.iter().map(|&v| !smartcast_core::vegindex::is_nodata(v, image.nodata)).collect();
    let geometry = grid_geometry(cfg, image.width, image.height);
    let (volume, kriged) = interpolate(&rows, cfg.forecast_day, &geometry, Some(&mask), cfg)?;
    let staging = Staging::new(&out)?;
    let mut report = report_base(cfg, "interpolate");
    report.insert("volume".into(), export_volume(&staging, &volume, &kriged)?);
    finish(staging, report, "report_interpolate.json")
}
