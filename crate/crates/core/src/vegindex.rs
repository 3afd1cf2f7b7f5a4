//! Vegetation-index rasters and per-pixel index time series.
//!
//! Indices are normalized differences: NDVI uses (NIR, Red), NDWI uses
//! (NIR, SWIR). Pixels with a zero denominator or any nodata input become
//! nodata. Every pixel is an independent time series; windows carry the
//! number of days from each input image to the target date as a second
//! feature.

use alloc::format;
use alloc::string::String;

use alloc::vec::Vec;

use chrono::NaiveDate;
use thiserror::Error;

use crate::lstm::{LstmError, Seq2SeqModel};
use crate::timeseries::WindowSet;

pub const MAX_BANDS: usize = 13;

/// Number of prior images in every pixel window.
pub const HISTORY_LEN: usize = 5;

/// Features per window row: (index value, days to target).
pub const WINDOW_FEATURES: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VegError {
    #[error("unknown band {0:?}")]
    UnknownBand(String),
    #[error("pixel data has {got} values, expected {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("{0} bands exceeds the maximum of 13")]
    TooManyBands(usize),
    #[error("band {band} pixel {index}: reflectance {value} outside [0, 1]")]
    Reflectance { band: String, index: usize, value: f32 },
    #[error("index value {value} at pixel {index} outside [-1, 1]")]
    IndexRange { index: usize, value: f32 },
    #[error("need {needed} images before the target date, found {found}")]
    InsufficientHistory { found: usize, needed: usize },
    #[error("stack dates must be strictly increasing ({0})")]
    UnsortedDates(NaiveDate),
    #[error("image dimensions {got:?} differ from {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error(transparent)]
    Lstm(#[from] LstmError),
}

#[inline]
pub fn is_nodata(v: f32, nodata: f32) -> bool {
    v == nodata || !v.is_finite()
}

/// A multiband raster, band-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BandGrid {
    pub width: usize,
    pub height: usize,
    pub nodata: f32,
    pub band_names: Vec<String>,
    pub data: Vec<f32>,
}

impl BandGrid {
    /// Checks sizes only; use [`BandGrid::validate_reflectance`] for imagery.
    pub fn new(
        width: usize,
        height: usize,
        nodata: f32,
        band_names: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self, VegError> {
        if band_names.len() > MAX_BANDS {
            return Err(VegError::TooManyBands(band_names.len()));
        }
        let expected = width * height * band_names.len();
        if data.len() != expected {
            return Err(VegError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            nodata,
            band_names,
            data,
        })
    }

    pub fn bands(&self) -> usize {
        self.band_names.len()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn band_index(&self, name: &str) -> Result<usize, VegError> {
        self.band_names
            .iter()
            .position(|b| b == name)
            .ok_or_else(|| VegError::UnknownBand(name.into()))
    }

    pub fn band(&self, name: &str) -> Result<&[f32], VegError> {
        let b = self.band_index(name)?;
        let p = self.pixels();
        Ok(&self.data[b * p..(b + 1) * p])
    }

    pub fn validate_reflectance(&self) -> Result<(), VegError> {
        let p = self.pixels();
        for (i, &v) in self.data.iter().enumerate() {
            if !is_nodata(v, self.nodata) && !(0.0..=1.0).contains(&v) {
                return Err(VegError::Reflectance {
                    band: self.band_names[i / p.max(1)].clone(),
                    index: i % p.max(1),
                    value: v,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Ndvi,
    Ndwi,
}

impl IndexKind {
    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Ndvi => "NDVI",
            IndexKind::Ndwi => "NDWI",
        }
    }
}

/// Which named bands hold Red, NIR and SWIR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMapping {
    pub red: String,
    pub nir: String,
    pub swir: String,
}

impl Default for BandMapping {
    fn default() -> Self {
        Self {
            red: "B04".into(),
            nir: "B08".into(),
            swir: "B11".into(),
        }
    }
}

/// Single-band index raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexImage {
    pub width: usize,
    pub height: usize,
    pub kind: IndexKind,
    pub values: Vec<f32>,
    pub nodata: f32,
}

impl IndexImage {
    pub fn new(width: usize, height: usize, kind: IndexKind, values: Vec<f32>, nodata: f32) -> Result<Self, VegError> {
        if values.len() != width * height {
            return Err(VegError::DataLength {
                expected: width * height,
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, &v)| !is_nodata(v, nodata) && !(-1.0..=1.0).contains(&v))
        {
            return Err(VegError::IndexRange { index, value });
        }
        Ok(Self {
            width,
            height,
            kind,
            values,
            nodata,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, pixel: usize) -> bool {
        !is_nodata(self.values[pixel], self.nodata)
    }

    /// `true` for every pixel holding a value.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.values.len()).map(|p| self.is_valid(p)).collect()
    }

    /// Row-major pixel values; inverse of [`reshape_to_image`].
    pub fn flatten(&self) -> Vec<f32> {
        self.values.clone()
    }
}

/// `(a − b) / (a + b)`, or `nodata` when undefined.
pub fn normalized_difference(a: f32, b: f32, nodata: f32) -> f32 {
    if is_nodata(a, nodata) || is_nodata(b, nodata) {
        return nodata;
    }
    let (a, b) = (a as f64, b as f64);
    let denom = a + b;
    if denom == 0.0 {
        return nodata;
    }
    ((a - b) / denom).clamp(-1.0, 1.0) as f32
}

pub fn compute_index(grid: &BandGrid, kind: IndexKind, mapping: &BandMapping) -> Result<IndexImage, VegError> {
    let nir = grid.band(&mapping.nir)?;
    let other = match kind {
        IndexKind::Ndvi => grid.band(&mapping.red)?,
        IndexKind::Ndwi => grid.band(&mapping.swir)?,
    };
    let values = nir
        .iter()
        .zip(other)
        .map(|(&a, &b)| normalized_difference(a, b, grid.nodata))
        .collect();
    Ok(IndexImage {
        width: grid.width,
        height: grid.height,
        kind,
        values,
        nodata: grid.nodata,
    })
}

/// Date-sorted index images with shared dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    entries: Vec<(NaiveDate, IndexImage)>,
}

impl ImageStack {
    pub fn new(entries: Vec<(NaiveDate, IndexImage)>) -> Result<Self, VegError> {
        if let Some((_, first)) = entries.first() {
            let dims = (first.width, first.height);
            for (_, img) in &entries {
                if (img.width, img.height) != dims {
                    return Err(VegError::DimensionMismatch {
                        expected: dims,
                        got: (img.width, img.height),
                    });
                }
            }
        }
        for pair in entries.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(VegError::UnsortedDates(pair[1].0));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(NaiveDate, IndexImage)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.entries.first().map(|(_, i)| (i.width, i.height))
    }
}

/// Model input for one pixel: `HISTORY_LEN` rows of (value, days to target),
/// oldest first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelWindow {
    pub rows: [[f64; WINDOW_FEATURES]; HISTORY_LEN],
    /// Days between the newest input image and the target.
    pub target_offset: i64,
}

impl PixelWindow {
    pub fn as_input(&self) -> &[f64] {
        self.rows.as_flattened()
    }

    /// Newest observed value, the persistence forecast.
    pub fn last_value(&self) -> f64 {
        self.rows[HISTORY_LEN - 1][0]
    }
}

fn window_for(images: &[(NaiveDate, IndexImage)], target: NaiveDate, pixel: usize) -> (PixelWindow, bool) {
    let mut rows = [[0.0; WINDOW_FEATURES]; HISTORY_LEN];
    let mut valid = true;
    for (row, (date, img)) in rows.iter_mut().zip(images) {
        valid &= img.is_valid(pixel);
        *row = [img.values[pixel] as f64, (target - *date).num_days() as f64];
    }
    let target_offset = (target - images[HISTORY_LEN - 1].0).num_days();
    (PixelWindow { rows, target_offset }, valid)
}

/// Per-pixel windows for a forecast at `target_date`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedStack {
    pub width: usize,
    pub height: usize,
    pub windows: Vec<PixelWindow>,
    /// `false` where any image in the window is nodata.
    pub mask: Vec<bool>,
}

/// Builds one window per pixel from the five most recent images strictly
/// before `target_date`.
pub fn flatten_stack(stack: &ImageStack, target_date: NaiveDate) -> Result<FlattenedStack, VegError> {
    let prior = stack.entries.partition_point(|(d, _)| *d < target_date);
    if prior < HISTORY_LEN {
        return Err(VegError::InsufficientHistory {
            found: prior,
            needed: HISTORY_LEN,
        });
    }
    let images = &stack.entries[prior - HISTORY_LEN..prior];
    let (width, height) = stack.dims().expect("non-empty stack");
    let (windows, mask) = (0..width * height)
        .map(|p| window_for(images, target_date, p))
        .unzip();
    Ok(FlattenedStack {
        width,
        height,
        windows,
        mask,
    })
}

fn check_index_model(model: &Seq2SeqModel) -> Result<(), VegError> {
    if model.input_dim() != WINDOW_FEATURES || model.horizon != 1 {
        return Err(VegError::ModelMismatch(format!(
            "index model needs 2 inputs and horizon 1, got {} and {}",
            model.input_dim(),
            model.horizon
        )));
    }
    Ok(())
}

/// Forecast for a single pixel window, clamped to [-1, 1].
pub fn predict_pixel(model: &Seq2SeqModel, window: &PixelWindow) -> Result<f64, VegError> {
    check_index_model(model)?;
    Ok(model.predict(window.as_input())?[0].clamp(-1.0, 1.0))
}

/// One prediction per pixel in input order; masked pixels become `nodata`.
pub fn predict_pixels(model: &Seq2SeqModel, windows: &[PixelWindow], mask: &[bool], nodata: f32) -> Result<Vec<f32>, VegError> {
    check_index_model(model)?;
    if windows.len() != mask.len() {
        return Err(VegError::DataLength {
            expected: windows.len(),
            got: mask.len(),
        });
    }
    windows
        .iter()
        .zip(mask)
        .map(|(w, &valid)| {
            if valid {
                predict_pixel(model, w).map(|v| v as f32)
            } else {
                Ok(nodata)
            }
        })
        .collect()
}

/// Row-major placement of `flat` into a `width × height` image.
pub fn reshape_to_image(flat: &[f32], width: usize, height: usize, kind: IndexKind, nodata: f32) -> Result<IndexImage, VegError> {
    IndexImage::new(width, height, kind, flat.to_vec(), nodata)
}

/// Training pairs drawn from every run of six consecutive images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelSamples {
    pub windows: Vec<PixelWindow>,
    pub targets: Vec<f64>,
    /// Index of the run (its first image) each sample came from.
    pub run: Vec<usize>,
    pub pixel: Vec<usize>,
}

impl PixelSamples {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Samples whose run satisfies `keep`, as a horizon-1 [`WindowSet`] in raw units.
    pub fn to_window_set(&self, keep: impl Fn(usize) -> bool) -> WindowSet {
        let mut set = WindowSet::empty(WINDOW_FEATURES, HISTORY_LEN, 1);
        for i in 0..self.len() {
            if keep(self.run[i]) {
                set.push(self.windows[i].as_input(), &[self.targets[i]], self.run[i]);
            }
        }
        set
    }
}

/// For every run of `HISTORY_LEN + 1` consecutive images and every pixel
/// valid in all of them, one (window, target) pair whose offsets are counted
/// to the run's last image.
pub fn stack_windows_for_training(stack: &ImageStack) -> Result<PixelSamples, VegError> {
    let n = stack.len();
    if n < HISTORY_LEN + 1 {
        return Err(VegError::InsufficientHistory {
            found: n,
            needed: HISTORY_LEN + 1,
        });
    }
    let (width, height) = stack.dims().expect("non-empty stack");
    let mut out = PixelSamples::default();
    for run in 0..=n - HISTORY_LEN - 1 {
        let (target_date, target_img) = &stack.entries[run + HISTORY_LEN];
        let images = &stack.entries[run..run + HISTORY_LEN];
        for p in 0..width * height {
            let (w, valid) = window_for(images, *target_date, p);
            if valid && target_img.is_valid(p) {
                out.windows.push(w);
                out.targets.push(target_img.values[p] as f64);
                out.run.push(run);
                out.pixel.push(p);
            }
        }
    }
    Ok(out)
}
