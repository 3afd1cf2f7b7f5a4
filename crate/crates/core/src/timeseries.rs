//! Sensor ingestion: record validation, daily gap filling, feature scaling and
//! supervised window slicing.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use chrono::NaiveDate;
use thiserror::Error;

use crate::SOIL_HORIZON;

/// Number of per-day features carried by a [`SensorSeries`].
pub const N_FEATURES: usize = 4;

/// Default longest run of missing days that linear gap filling will bridge.
pub const DEFAULT_MAX_GAP: usize = 3;

/// Default encoder input length in days.
pub const DEFAULT_INPUT_LEN: usize = 30;

/// Column order of [`SensorSeries::features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Feature {
    Moisture = 0,
    SoilTemp = 1,
    Salinity = 2,
    Rainfall = 3,
}

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::Moisture,
        Feature::SoilTemp,
        Feature::Salinity,
        Feature::Rainfall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Moisture => "moisture",
            Feature::SoilTemp => "soil_temp",
            Feature::Salinity => "salinity",
            Feature::Rainfall => "rainfall",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimeseriesError {
    #[error("record {index}: {field} = {value} is out of range")]
    OutOfRange {
        index: usize,
        field: &'static str,
        value: f64,
    },
    #[error("record {index}: depth {depth_cm} cm is not one of 10, 20, ..., 120")]
    BadDepth { index: usize, depth_cm: u32 },
    #[error("records {first} and {second}: duplicate key ({sensor_id}, {depth_cm} cm, {date})")]
    DuplicateKey {
        first: usize,
        second: usize,
        sensor_id: String,
        depth_cm: u32,
        date: NaiveDate,
    },
    #[error("no records for sensor {sensor_id} at {depth_cm} cm")]
    KeyNotFound { sensor_id: String, depth_cm: u32 },
    #[error("need at least 2 records to build a series, found {found}")]
    InsufficientData { found: usize },
    #[error("{feature}: {days} missing day(s) starting {start} cannot be filled (max gap {max_gap})")]
    UnfillableGap {
        feature: &'static str,
        start: NaiveDate,
        days: usize,
        max_gap: usize,
    },
    #[error("feature {feature} has zero variance over the fitting range")]
    DegenerateScaler { feature: usize },
    #[error("scaler fitting range {start}..{end} is empty or out of bounds")]
    BadRange { start: usize, end: usize },
    #[error("series of {len} days is too short for windows needing {needed}")]
    EmptyWindows { len: usize, needed: usize },
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("chronological split leaves an empty side ({train} train, {test} test)")]
    EmptySplit { train: usize, test: usize },
}

/// One sensor reading for one day. Empty CSV fields become `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecord {
    pub date: NaiveDate,
    pub sensor_id: String,
    pub depth_cm: u32,
    pub moisture: Option<f64>,
    pub soil_temp: Option<f64>,
    pub salinity: Option<f64>,
    pub rainfall: Option<f64>,
}

impl SensorRecord {
    pub fn features(&self) -> [Option<f64>; N_FEATURES] {
        [self.moisture, self.soil_temp, self.salinity, self.rainfall]
    }

    /// Range checks for a single record; `index` is echoed in the error.
    pub fn validate(&self, index: usize) -> Result<(), TimeseriesError> {
        if !is_valid_depth(self.depth_cm) {
            return Err(TimeseriesError::BadDepth {
                index,
                depth_cm: self.depth_cm,
            });
        }
        let out_of_range = |field, value: f64| TimeseriesError::OutOfRange { index, field, value };
        if let Some(m) = self.moisture {
            if !(0.0..=100.0).contains(&m) {
                return Err(out_of_range("moisture", m));
            }
        }
        if let Some(r) = self.rainfall {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(out_of_range("rainfall", r));
            }
        }
        for (f, v) in Feature::ALL.iter().zip(self.features()) {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(out_of_range(f.name(), v));
                }
            }
        }
        Ok(())
    }
}

pub fn is_valid_depth(depth_cm: u32) -> bool {
    (10..=120).contains(&depth_cm) && depth_cm % 10 == 0
}

/// Validates every record and rejects duplicate `(sensor_id, depth_cm, date)` keys.
pub fn validate_records(records: &[SensorRecord]) -> Result<(), TimeseriesError> {
    let mut seen: BTreeMap<(&str, u32, NaiveDate), usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        r.validate(i)?;
        if let Some(&first) = seen.get(&(r.sensor_id.as_str(), r.depth_cm, r.date)) {
            return Err(TimeseriesError::DuplicateKey {
                first,
                second: i,
                sensor_id: r.sensor_id.clone(),
                depth_cm: r.depth_cm,
                date: r.date,
            });
        }
        seen.insert((r.sensor_id.as_str(), r.depth_cm, r.date), i);
    }
    Ok(())
}

/// A gap-free daily feature matrix for one sensor at one depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub sensor_id: String,
    pub depth_cm: u32,
    pub dates: Vec<NaiveDate>,
    /// Rows in [`Feature`] column order.
    pub features: Vec<[f64; N_FEATURES]>,
    /// `true` on days where at least one feature was interpolated.
    pub filled: Vec<bool>,
}

impl SensorSeries {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn column(&self, feature: Feature) -> impl Iterator<Item = f64> + '_ {
        self.features.iter().map(move |row| row[feature as usize])
    }

    /// Copy of the series with every row passed through `scaler`.
    pub fn scaled(&self, scaler: &Scaler) -> SensorSeries {
        let mut out = self.clone();
        for row in &mut out.features {
            scaler.apply_row(row);
        }
        out
    }
}

/// Assembles the daily series for one `(sensor_id, depth_cm)` key, filling
/// runs of at most `max_gap` missing days per feature by linear interpolation.
pub fn build_series(
    records: &[SensorRecord],
    sensor_id: &str,
    depth_cm: u32,
    max_gap: usize,
) -> Result<SensorSeries, TimeseriesError> {
    let mut matching: Vec<(usize, &SensorRecord)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.sensor_id == sensor_id && r.depth_cm == depth_cm)
        .collect();
    match matching.len() {
        0 => {
            return Err(TimeseriesError::KeyNotFound {
                sensor_id: sensor_id.into(),
                depth_cm,
            })
        }
        1 => return Err(TimeseriesError::InsufficientData { found: 1 }),
        _ => {}
    }
    matching.sort_by_key(|(_, r)| r.date);
    for pair in matching.windows(2) {
        if pair[0].1.date == pair[1].1.date {
            return Err(TimeseriesError::DuplicateKey {
                first: pair[0].0.min(pair[1].0),
                second: pair[0].0.max(pair[1].0),
                sensor_id: sensor_id.into(),
                depth_cm,
                date: pair[0].1.date,
            });
        }
    }

    let start = matching[0].1.date;
    let end = matching[matching.len() - 1].1.date;
    let len = (end - start).num_days() as usize + 1;
    let mut raw: Vec<[Option<f64>; N_FEATURES]> = vec![[None; N_FEATURES]; len];
    for (_, r) in &matching {
        raw[(r.date - start).num_days() as usize] = r.features();
    }
    let dates: Vec<NaiveDate> = start.iter_days().take(len).collect();

    let mut features = vec![[0.0; N_FEATURES]; len];
    let mut filled = vec![false; len];
    for feature in Feature::ALL {
        let col = feature as usize;
        let observed: Vec<Option<f64>> = raw.iter().map(|row| row[col]).collect();
        let values = fill_linear(&observed, max_gap).map_err(|(at, days)| {
            TimeseriesError::UnfillableGap {
                feature: feature.name(),
                start: dates[at],
                days,
                max_gap,
            }
        })?;
        for (day, v) in values.into_iter().enumerate() {
            features[day][col] = v;
            filled[day] |= observed[day].is_none();
        }
    }

    Ok(SensorSeries {
        sensor_id: sensor_id.into(),
        depth_cm,
        dates,
        features,
        filled,
    })
}

/// Linear interpolation across interior runs of `None`. Returns the start
/// index and length of the first run that is too long or has no anchor on
/// one side.
fn fill_linear(observed: &[Option<f64>], max_gap: usize) -> Result<Vec<f64>, (usize, usize)> {
    let mut out = Vec::with_capacity(observed.len());
    let mut last: Option<(usize, f64)> = None;
    let mut i = 0;
    while i < observed.len() {
        match observed[i] {
            Some(v) => {
                out.push(v);
                last = Some((i, v));
                i += 1;
            }
            None => {
                let run_start = i;
                while i < observed.len() && observed[i].is_none() {
                    i += 1;
                }
                let run = i - run_start;
                let (Some((i0, a)), Some(b)) = (last, observed.get(i).copied().flatten()) else {
                    return Err((run_start, run));
                };
                if run > max_gap {
                    return Err((run_start, run));
                }
                let span = (i - i0) as f64;
                for k in run_start..i {
                    let t = (k - i0) as f64 / span;
                    out.push(a + (b - a) * t);
                }
            }
        }
    }
    Ok(out)
}

/// Per-feature standardization `(x − mean) / std` with population std.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Fits on an iterator of rows, each of length `n_features`.
    pub fn fit<'a, I>(rows: I, n_features: usize) -> Result<Self, TimeseriesError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut sum = vec![0.0; n_features];
        let mut rows_buf: Vec<&[f64]> = Vec::new();
        for row in rows {
            debug_assert_eq!(row.len(), n_features);
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            count += 1;
            rows_buf.push(row);
        }
        if count == 0 {
            return Err(TimeseriesError::BadRange { start: 0, end: 0 });
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; n_features];
        for row in &rows_buf {
            for ((v, x), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let mut std = Vec::with_capacity(n_features);
        for (feature, v) in var.iter().enumerate() {
            let s = libm::sqrt(v / count as f64);
            if !(s > 0.0 && s.is_finite()) {
                return Err(TimeseriesError::DegenerateScaler { feature });
            }
            std.push(s);
        }
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn apply_value(&self, feature: usize, x: f64) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    #[inline]
    pub fn invert_value(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (f, x) in row.iter_mut().enumerate() {
            *x = self.apply_value(f, *x);
        }
    }

    pub fn invert_row(&self, row: &mut [f64]) {
        for (f, z) in row.iter_mut().enumerate() {
            *z = self.invert_value(f, *z);
        }
    }
}

/// Fits a [`Scaler`] on the rows `train_range` of a series.
pub fn fit_scaler(series: &SensorSeries, train_range: Range<usize>) -> Result<Scaler, TimeseriesError> {
    if train_range.start >= train_range.end || train_range.end > series.len() {
        return Err(TimeseriesError::BadRange {
            start: train_range.start,
            end: train_range.end,
        });
    }
    Scaler::fit(
        series.features[train_range].iter().map(|r| r.as_slice()),
        N_FEATURES,
    )
}

/// Supervised samples: `inputs` is `N × input_len × n_features`, `targets`
/// is `N × horizon`, both flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub n_features: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    /// Index of the first input day of each sample on its source axis.
    pub starts: Vec<usize>,
}

impl WindowSet {
    pub fn empty(n_features: usize, input_len: usize, horizon: usize) -> Self {
        Self {
            n_features,
            input_len,
            horizon,
            inputs: Vec::new(),
            targets: Vec::new(),
            starts: Vec::new(),
        }
    }

    /// Slides a window over a `T × n_features` row-major matrix. The target of
    /// sample `i` is column `target_col` on the `horizon` days after its input.
    pub fn slide(
        rows: &[f64],
        n_features: usize,
        target_col: usize,
        input_len: usize,
        horizon: usize,
    ) -> Result<Self, TimeseriesError> {
        let t = rows.len() / n_features;
        let needed = input_len + horizon;
        if t < needed || input_len == 0 {
            return Err(TimeseriesError::EmptyWindows { len: t, needed });
        }
        let n = t - needed + 1;
        let mut set = Self::empty(n_features, input_len, horizon);
        set.inputs.reserve(n * input_len * n_features);
        set.targets.reserve(n * horizon);
        for i in 0..n {
            set.inputs
                .extend_from_slice(&rows[i * n_features..(i + input_len) * n_features]);
            set.targets.extend(
                (i + input_len..i + needed).map(|day| rows[day * n_features + target_col]),
            );
            set.starts.push(i);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.input_len * self.n_features;
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn push(&mut self, input: &[f64], target: &[f64], start: usize) {
        assert_eq!(input.len(), self.input_len * self.n_features);
        assert_eq!(target.len(), self.horizon);
        self.inputs.extend_from_slice(input);
        self.targets.extend_from_slice(target);
        self.starts.push(start);
    }

    pub fn subset(&self, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut out = Self::empty(self.n_features, self.input_len, self.horizon);
        for i in indices {
            out.push(self.input(i), self.target(i), self.starts[i]);
        }
        out
    }

    /// Inputs standardized per feature, targets with the scaling of
    /// `target_channel`.
    pub fn scaled(&self, scaler: &Scaler, target_channel: usize) -> Self {
        let mut out = self.clone();
        for row in out.inputs.chunks_mut(self.n_features) {
            scaler.apply_row(row);
        }
        for t in &mut out.targets {
            *t = scaler.apply_value(target_channel, *t);
        }
        out
    }

    pub fn append(&mut self, other: &WindowSet) {
        assert_eq!(
            (self.n_features, self.input_len, self.horizon),
            (other.n_features, other.input_len, other.horizon)
        );
        self.inputs.extend_from_slice(&other.inputs);
        self.targets.extend_from_slice(&other.targets);
        self.starts.extend_from_slice(&other.starts);
    }
}

/// 14-day moisture windows over a (typically already scaled) series.
pub fn make_windows(series: &SensorSeries, input_len: usize) -> Result<WindowSet, TimeseriesError> {
    WindowSet::slide(
        series.features.as_flattened(),
        N_FEATURES,
        Feature::Moisture as usize,
        input_len,
        SOIL_HORIZON,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: WindowSet,
    pub test: WindowSet,
    /// Train samples dropped because their target days reach into the
    /// first test sample's input window.
    pub embargoed: usize,
}

/// Chronological split of a window set whose samples come from one series in
/// time order. The first `floor(N·(1 − test_fraction))` samples are allocated
/// to train and the rest to test; allocated train samples whose target days
/// overlap any day of the test samples are then dropped.
pub fn chrono_split(windows: &WindowSet, test_fraction: f64) -> Result<Split, TimeseriesError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(TimeseriesError::InvalidFraction(test_fraction));
    }
    let n = windows.len();
    let n_train = libm::floor(n as f64 * (1.0 - test_fraction) + 1e-9) as usize;
    let n_test = n - n_train.min(n);
    if n_train == 0 || n_test == 0 {
        return Err(TimeseriesError::EmptySplit {
            train: n_train,
            test: n_test,
        });
    }
    let first_test_day = windows.starts[n_train..].iter().copied().min().unwrap_or(0);
    let span = windows.input_len + windows.horizon;
    let kept: Vec<usize> = (0..n_train)
        .filter(|&i| windows.starts[i] + span <= first_test_day)
        .collect();
    if kept.is_empty() {
        return Err(TimeseriesError::EmptySplit {
            train: 0,
            test: n_test,
        });
    }
    Ok(Split {
        embargoed: n_train - kept.len(),
        train: windows.subset(kept),
        test: windows.subset(n_train..n),
    })
}
