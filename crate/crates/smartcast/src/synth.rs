//! Deterministic synthetic scenarios: multi-depth sensor records, sensor
//! locations and a 13-band image stack whose NDVI field is a set of drifting
//! Gaussian bumps on a seasonal baseline.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use smartcast_core::timeseries::SensorRecord;
use smartcast_core::vegindex::BandGrid;

use crate::config::{IndexModelSpec, Paths, RunConfig, SoilModelSpec, TrainSpec};
use crate::io::{self, IoError, SensorLocation};
use crate::raster;

pub const SENTINEL_BANDS: [&str; 13] = [
    "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B10", "B11", "B12",
];

/// Day-to-day persistence of temperature and salinity anomalies.
const WEATHER_AR: f64 = 0.95;

pub const IMAGE_NODATA: f32 = -9999.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub start: NaiveDate,
    pub days: usize,
    pub depths: Vec<u32>,
    pub n_sensors: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub cell_size: f64,
    pub n_images: usize,
    /// Inclusive range of days between consecutive images.
    pub image_interval: (u64, u64),
    pub seasonal_amplitude: f64,
    /// Period (days) shared by the moisture, soil temperature and salinity
    /// cycles.
    pub seasonal_period: f64,
    /// Innovation standard deviation of the AR(1) moisture noise.
    pub noise_std: f64,
    pub ar_coef: f64,
    /// Daily probability of a rain event.
    pub rain_probability: f64,
    pub rain_mean_mm: f64,
    /// Fraction of isolated moisture readings left blank.
    pub missing_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            start: NaiveDate::from_ymd_opt(2022, 1, 1).expect("valid date"),
            days: 400,
            depths: vec![10, 20, 30],
            n_sensors: 4,
            grid_width: 16,
            grid_height: 16,
            cell_size: 10.0,
            n_images: 14,
            image_interval: (8, 12),
            seasonal_amplitude: 10.0,
            seasonal_period: 120.0,
            noise_std: 0.3,
            ar_coef: 0.9,
            rain_probability: 0.03,
            rain_mean_mm: 8.0,
            missing_rate: 0.01,
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl SynthSpec {
    pub fn extent(&self) -> (f64, f64) {
        (self.grid_width as f64 * self.cell_size, self.grid_height as f64 * self.cell_size)
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + Days::new(day as u64)
    }

    /// Noise- and rain-free moisture level of a sensor at `(x, y)`.
    pub fn baseline_moisture(&self, x: f64, y: f64, depth_cm: u32, day: usize) -> f64 {
        let (w, h) = self.extent();
        let spatial = 22.0 + 6.0 * (PI * x / w).sin() * (0.7 * PI * y / h).cos() + 0.05 * depth_cm as f64;
        let d = depth_cm as f64;
        let phase = 2.0 * PI * (day as f64 - d / 4.0) / self.seasonal_period;
        spatial + self.seasonal_amplitude * (-d / 200.0).exp() * phase.sin()
    }

    pub fn sensor_locations(&self) -> Vec<SensorLocation> {
        let mut rng = stream(self.seed, 1);
        let (w, h) = self.extent();
        let min_sep = 0.15 * w.min(h);
        let mut out: Vec<SensorLocation> = Vec::with_capacity(self.n_sensors);
        while out.len() < self.n_sensors {
            let x = rng.random_range(0.1 * w..0.9 * w);
            let y = rng.random_range(0.1 * h..0.9 * h);
            let far = out.iter().all(|l| (l.x - x).hypot(l.y - y) >= min_sep);
            if far || out.len() >= 64 {
                out.push(SensorLocation {
                    sensor_id: format!("S{:02}", out.len() + 1),
                    x,
                    y,
                });
            }
        }
        out
    }

    /// Field-wide daily rainfall (mm): Gamma(2) event sizes capped at four
    /// times the mean.
    pub fn rainfall(&self) -> Vec<f64> {
        let mut rng = stream(self.seed, 2);
        let gamma = Gamma::new(2.0, self.rain_mean_mm.max(1e-9) / 2.0).expect("positive scale");
        (0..self.days)
            .map(|_| {
                let wet = rng.random::<f64>() < self.rain_probability;
                let amount = gamma.sample(&mut rng).min(4.0 * self.rain_mean_mm);
                if wet {
                    amount
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Rise-then-recession response of moisture at `depth_cm` to 1 mm of
    /// rain `lag` days earlier.
    pub fn rain_kernel(depth_cm: u32, lag: usize) -> f64 {
        let d = depth_cm as f64;
        let delay = (d / 10.0).round() as usize;
        if lag < delay {
            return 0.0;
        }
        let u = (lag - delay) as f64;
        let (rise, fall) = (2.0 + d / 10.0, 8.0 + d / 5.0);
        0.45 * (-d / 100.0).exp() * ((-u / fall).exp() - (-(u + 1.0) / rise).exp())
    }

    pub fn sensor_records(&self) -> (Vec<SensorRecord>, Vec<SensorLocation>) {
        let locations = self.sensor_locations();
        let rain = self.rainfall();
        let mut records = Vec::with_capacity(self.days * self.depths.len() * locations.len());
        let normal = StandardNormal;
        for (s, loc) in locations.iter().enumerate() {
            let mut rng = stream(self.seed, 100 + s as u64);
            let rain_gain: f64 = rng.random_range(0.8..1.2);
            let mut local = stream(self.seed, 200 + s as u64);
            let rain: Vec<f64> = rain
                .iter()
                .map(|&r| if r > 0.0 { r * rain_gain * local.random_range(0.4..1.6) } else { 0.0 })
                .collect();
            for &depth in &self.depths {
                let mut rng = stream(self.seed, 1000 + 100 * s as u64 + depth as u64);
                let phi = self.ar_coef;
                let mut noise = if self.noise_std > 0.0 {
                    let z: f64 = normal.sample(&mut rng);
                    z * self.noise_std / (1.0 - phi * phi).max(1e-9).sqrt()
                } else {
                    0.0
                };
                let mut weather = stream(self.seed, 5000 + 100 * s as u64 + depth as u64);
                let (mut temp_anom, mut sal_anom) = (0.0, 0.0);
                let mut blank_prev = true;
                for day in 0..self.days {
                    let response: f64 = (0..=day.min(120))
                        .map(|lag| rain[day - lag] * Self::rain_kernel(depth, lag))
                        .sum();
                    if day > 0 && self.noise_std > 0.0 {
                        let z: f64 = normal.sample(&mut rng);
                        noise = phi * noise + self.noise_std * z;
                    }
                    let moisture = (self.baseline_moisture(loc.x, loc.y, depth, day) + response + noise).clamp(0.0, 100.0);
                    let d = depth as f64;
                    let t = day as f64;
                    let (z1, z2): (f64, f64) = (normal.sample(&mut weather), normal.sample(&mut weather));
                    temp_anom = WEATHER_AR * temp_anom + 2.0 * self.noise_std * z1;
                    sal_anom = WEATHER_AR * sal_anom + 0.1 * self.noise_std * z2;
                    let soil_temp = 14.0
                        + 9.0 * (-d / 150.0).exp() * (2.0 * PI * (t - 50.0 - d / 5.0) / self.seasonal_period).sin()
                        + temp_anom;
                    let salinity =
                        0.8 + 0.004 * d + 0.1 * (2.0 * PI * t / self.seasonal_period + s as f64).sin() + sal_anom;
                    let missing = rng.random::<f64>() < self.missing_rate;
                    let blank = missing && !blank_prev && day + 1 < self.days;
                    blank_prev = blank;
                    records.push(SensorRecord {
                        date: self.date(day),
                        sensor_id: loc.sensor_id.clone(),
                        depth_cm: depth,
                        moisture: (!blank).then_some(moisture),
                        soil_temp: Some(soil_temp),
                        salinity: Some(salinity),
                        rainfall: Some(rain[day]),
                    });
                }
            }
        }
        (records, locations)
    }

    /// Acquisition days (offsets from `start`), ending on the last sensor day.
    pub fn image_days(&self) -> Vec<usize> {
        let mut rng = stream(self.seed, 3);
        let mut days = vec![self.days.saturating_sub(1)];
        while days.len() < self.n_images {
            let step = rng.random_range(self.image_interval.0..=self.image_interval.1) as usize;
            let prev = *days.last().expect("non-empty");
            days.push(prev.saturating_sub(step));
        }
        days.reverse();
        days
    }

    fn bumps(&self) -> Vec<[f64; 6]> {
        let mut rng = stream(self.seed, 4);
        let (w, h) = (self.grid_width as f64, self.grid_height as f64);
        (0..3)
            .map(|_| {
                let speed = rng.random_range(0.08..0.16) * w.max(h) / 32.0;
                let angle = rng.random_range(0.0..2.0 * PI);
                [
                    rng.random_range(0.15..0.3),
                    rng.random_range(0.0..w),
                    rng.random_range(0.0..h),
                    speed * angle.cos(),
                    speed * angle.sin(),
                    rng.random_range(0.15..0.3) * w.min(h),
                ]
            })
            .collect()
    }

    /// NDVI at pixel `(px, py)` on `day`, in [-0.2, 0.8].
    pub fn ndvi(&self, px: usize, py: usize, day: usize) -> f64 {
        self.ndvi_with(&self.bumps(), self.image_days()[0], px, py, day)
    }

    fn ndvi_with(&self, bumps: &[[f64; 6]], day0: usize, px: usize, py: usize, day: usize) -> f64 {
        let t = day as f64 - day0 as f64;
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let seasonal = 0.35 + 0.18 * (2.0 * PI * (day as f64 - 60.0) / 365.0).sin();
        let bump: f64 = bumps
            .iter()
            .map(|&[a, cx, cy, vx, vy, s]| {
                let (dx, dy) = (x - cx - vx * t, y - cy - vy * t);
                a * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
            })
            .sum();
        (seasonal + bump).clamp(-0.2, 0.8)
    }

    /// 13-band reflectance grid whose NDVI (B08 vs B04) is [`Self::ndvi`] and
    /// whose NDWI (B08 vs B11) is `0.7·NDVI − 0.15`.
    pub fn band_grid(&self, day: usize) -> BandGrid {
        self.band_grid_with(&self.bumps(), self.image_days()[0], day)
    }

    fn band_grid_with(&self, bumps: &[[f64; 6]], day0: usize, day: usize) -> BandGrid {
        let (w, h) = (self.grid_width, self.grid_height);
        let p = w * h;
        let mut data = vec![0f32; p * SENTINEL_BANDS.len()];
        for py in 0..h {
            for px in 0..w {
                let v = self.ndvi_with(bumps, day0, px, py, day);
                let red = 0.06 + 0.03 * (0.5 + 0.5 * (px as f64 * 0.7).sin() * (py as f64 * 0.45).cos());
                let nir = red * (1.0 + v) / (1.0 - v);
                let ndwi = 0.7 * v - 0.15;
                let swir = nir * (1.0 - ndwi) / (1.0 + ndwi);
                let bands = [
                    0.5 * red + 0.02,
                    0.8 * red,
                    0.9 * red + 0.02,
                    red,
                    0.7 * red + 0.3 * nir,
                    0.4 * red + 0.6 * nir,
                    0.2 * red + 0.8 * nir,
                    nir,
                    0.97 * nir,
                    0.3 * nir,
                    0.01,
                    swir,
                    0.8 * swir,
                ];
                for (b, value) in bands.iter().enumerate() {
                    data[b * p + py * w + px] = value.clamp(0.0, 1.0) as f32;
                }
            }
        }
        BandGrid::new(w, h, IMAGE_NODATA, SENTINEL_BANDS.iter().map(|s| s.to_string()).collect(), data)
            .expect("consistent sizes")
    }

    pub fn image_stack(&self) -> Vec<(NaiveDate, BandGrid)> {
        let bumps = self.bumps();
        let days = self.image_days();
        days.iter()
            .map(|&d| (self.date(d), self.band_grid_with(&bumps, days[0], d)))
            .collect()
    }
}

/// Small model sizes and epoch counts so the bundled scenario runs in seconds.
pub fn scenario_config(spec: &SynthSpec) -> RunConfig {
    RunConfig {
        seed: spec.seed,
        paths: Paths {
            sensor_csv: "sensors.csv".into(),
            sensor_locations: "locations.csv".into(),
            stack_manifest: "stack/manifest.csv".into(),
            output_dir: "output".into(),
        },
        soil_model: SoilModelSpec {
            encoder_hidden: 16,
            decoder_hidden: 16,
            dense_hidden: 8,
            ..SoilModelSpec::default()
        },
        soil_train: TrainSpec {
            learning_rate: 5e-3,
            epochs: 15,
            ..TrainSpec::default()
        },
        index_model: IndexModelSpec {
            encoder_hidden: 12,
            decoder_hidden: 12,
            dense_hidden: 6,
            ..IndexModelSpec::default()
        },
        index_train: TrainSpec {
            learning_rate: 5e-3,
            epochs: 8,
            ..TrainSpec::default()
        },
        kriging: Default::default(),
        grid: crate::config::GridSpec {
            cell_size: spec.cell_size,
            origin_x: 0.0,
            origin_y: 0.0,
        },
        bands: Default::default(),
        forecast_day: smartcast_core::SOIL_HORIZON,
        base_dir: Default::default(),
    }
}

/// Writes `sensors.csv`, `locations.csv`, `stack/*.bgrid`,
/// `stack/manifest.csv` and `config.json` under `dir`.
pub fn write_scenario(spec: &SynthSpec, dir: &Path) -> Result<RunConfig, IoError> {
    let (records, locations) = spec.sensor_records();
    io::write_sensor_csv(&dir.join("sensors.csv"), &records)?;
    io::write_locations(&dir.join("locations.csv"), &locations)?;
    let mut manifest = Vec::new();
    for (i, (date, grid)) in spec.image_stack().iter().enumerate() {
        let name = format!("img_{i:03}.bgrid");
        raster::write_band_grid(&dir.join("stack").join(&name), grid)?;
        manifest.push((*date, name));
    }
    io::write_manifest(&dir.join("stack/manifest.csv"), &manifest)?;
    let cfg = scenario_config(spec);
    raster::write_bytes(&dir.join("config.json"), format!("{}\n", cfg.to_json()).as_bytes())?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use smartcast_core::vegindex::{compute_index, BandMapping, IndexKind};

    fn small() -> SynthSpec {
        SynthSpec {
            days: 60,
            n_images: 6,
            grid_width: 8,
            grid_height: 6,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_scenario(&small(), a.path()).unwrap();
        write_scenario(&small(), b.path()).unwrap();
        for f in ["sensors.csv", "locations.csv", "stack/manifest.csv", "stack/img_000.bgrid", "stack/img_005.bgrid", "config.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let other = SynthSpec { seed: 8, ..small() };
        assert_ne!(other.sensor_records().0, small().sensor_records().0);
    }

    #[test]
    fn zero_noise_is_sinusoidal() {
        let spec = SynthSpec {
            noise_std: 0.0,
            rain_probability: 0.0,
            missing_rate: 0.0,
            ..small()
        };
        let (records, locs) = spec.sensor_records();
        let loc = &locs[1];
        for day in [0usize, 17, 45] {
            let r = records
                .iter()
                .find(|r| r.sensor_id == loc.sensor_id && r.depth_cm == 20 && r.date == spec.date(day))
                .unwrap();
            let (w, h) = spec.extent();
            let expect = 22.0
                + 6.0 * (PI * loc.x / w).sin() * (0.7 * PI * loc.y / h).cos()
                + 1.0
                + 10.0 * (-0.1f64).exp() * (2.0 * PI * (day as f64 - 5.0) / spec.seasonal_period).sin();
            assert!((r.moisture.unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn records_are_valid() {
        let (records, locs) = small().sensor_records();
        assert_eq!(locs.len(), 4);
        assert_eq!(records.len(), 4 * 3 * 60);
        smartcast_core::timeseries::validate_records(&records).unwrap();
        assert!(records.iter().any(|r| r.rainfall.unwrap() > 0.0));
    }

    #[test]
    fn stack_indices_in_range() {
        let spec = small();
        let stack = spec.image_stack();
        assert_eq!(stack.len(), 6);
        assert!(stack.windows(2).all(|p| p[0].0 < p[1].0));
        assert_eq!(stack.last().unwrap().0, spec.date(59));
        for (_, grid) in &stack {
            grid.validate_reflectance().unwrap();
            assert_eq!(grid.bands(), 13);
            for kind in [IndexKind::Ndvi, IndexKind::Ndwi] {
                let img = compute_index(grid, kind, &BandMapping::default()).unwrap();
                assert!(img.values.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
        let days = spec.image_days();
        let img = compute_index(&stack[2].1, IndexKind::Ndvi, &BandMapping::default()).unwrap();
        assert!((img.get(3, 4) as f64 - spec.ndvi(3, 4, days[2])).abs() < 1e-5);
    }
}
