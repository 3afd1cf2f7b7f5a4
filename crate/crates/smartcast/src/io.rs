//! CSV inputs and outputs: sensor readings, sensor locations, stack
//! manifests, grid exports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use smartcast_core::kriging::{MoistureVolume, NODATA};
use smartcast_core::timeseries::{SensorRecord, TimeseriesError};
use thiserror::Error;

pub const SENSOR_HEADER: [&str; 7] = ["date", "sensor_id", "depth_cm", "moisture", "soil_temp", "salinity", "rainfall"];
pub const LOCATION_HEADER: [&str; 3] = ["sensor_id", "x", "y"];
pub const MANIFEST_HEADER: [&str; 2] = ["date", "path"];
pub const VOLUME_MANIFEST_HEADER: [&str; 2] = ["depth_cm", "path"];
pub const GRID_HEADER: [&str; 5] = ["x", "y", "depth_cm", "value", "variance"];
pub const FORECAST_HEADER: [&str; 8] = ["sensor_id", "depth_cm", "x", "y", "issued", "lead_day", "date", "moisture"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    fn parse(path: &Path, line: u64, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn csv(path: &Path, err: csv::Error) -> Self {
        let line = err.position().map_or(0, |p| p.line());
        match err.into_kind() {
            csv::ErrorKind::Io(source) => Self::io(path, source),
            kind => Self::parse(path, line, format!("{kind:?}")),
        }
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<(), IoError> {
    let header = rdr.headers().map_err(|e| IoError::csv(path, e))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(IoError::parse(
            path,
            1,
            format!("header must be `{}`, found `{}`", expected.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, IoError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    Ok(csv::WriterBuilder::new().from_writer(BufWriter::new(file)))
}

fn finish(path: &Path, w: csv::Writer<BufWriter<File>>) -> Result<(), IoError> {
    w.into_inner()
        .map_err(|e| IoError::io(path, e.into_error()))?
        .flush()
        .map_err(|e| IoError::io(path, e))
}

fn parse_date(path: &Path, line: u64, s: &str) -> Result<NaiveDate, IoError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| IoError::parse(path, line, format!("bad date `{s}`: {e}")))
}

fn parse_f64(path: &Path, line: u64, field: &str, s: &str) -> Result<f64, IoError> {
    s.trim()
        .parse()
        .map_err(|_| IoError::parse(path, line, format!("{field}: `{s}` is not a number")))
}

fn parse_opt(path: &Path, line: u64, field: &str, s: &str) -> Result<Option<f64>, IoError> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(path, line, field, s).map(Some)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reads and validates a sensor CSV. Records are returned in file order;
/// errors carry the 1-based line number.
pub fn load_sensor_csv(path: &Path) -> Result<Vec<SensorRecord>, IoError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &SENSOR_HEADER)?;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| IoError::csv(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let depth_cm = row[2]
            .trim()
            .parse()
            .map_err(|_| IoError::parse(path, line, format!("depth_cm: `{}` is not a whole number", &row[2])))?;
        let rec = SensorRecord {
            date: parse_date(path, line, &row[0])?,
            sensor_id: row[1].to_string(),
            depth_cm,
            moisture: parse_opt(path, line, "moisture", &row[3])?,
            soil_temp: parse_opt(path, line, "soil_temp", &row[4])?,
            salinity: parse_opt(path, line, "salinity", &row[5])?,
            rainfall: parse_opt(path, line, "rainfall", &row[6])?,
        };
        if rec.sensor_id.is_empty() {
            return Err(IoError::parse(path, line, "empty sensor_id"));
        }
        rec.validate(records.len())
            .map_err(|e| IoError::parse(path, line, e.to_string()))?;
        records.push(rec);
        lines.push(line);
    }
    smartcast_core::timeseries::validate_records(&records).map_err(|e| match e {
        TimeseriesError::DuplicateKey { first, second, .. } => IoError::parse(
            path,
            lines[second],
            format!("{e} (lines {} and {})", lines[first], lines[second]),
        ),
        other => IoError::format(path, other.to_string()),
    })?;
    Ok(records)
}

pub fn write_sensor_csv(path: &Path, records: &[SensorRecord]) -> Result<(), IoError> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| IoError::csv(path, e);
    w.write_record(SENSOR_HEADER).map_err(wrap)?;
    for r in records {
        w.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.sensor_id.clone(),
            r.depth_cm.to_string(),
            fmt_opt(r.moisture),
            fmt_opt(r.soil_temp),
            fmt_opt(r.salinity),
            fmt_opt(r.rainfall),
        ])
        .map_err(wrap)?;
    }
    finish(path, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorLocation {
    pub sensor_id: String,
    pub x: f64,
    pub y: f64,
}

pub fn load_locations(path: &Path) -> Result<Vec<SensorLocation>, IoError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &LOCATION_HEADER)?;
    let mut out: Vec<SensorLocation> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| IoError::csv(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let loc = SensorLocation {
            sensor_id: row[0].to_string(),
            x: parse_f64(path, line, "x", &row[1])?,
            y: parse_f64(path, line, "y", &row[2])?,
        };
        if !(loc.x.is_finite() && loc.y.is_finite()) {
            return Err(IoError::parse(path, line, "coordinates must be finite"));
        }
        if out.iter().any(|l| l.sensor_id == loc.sensor_id) {
            return Err(IoError::parse(path, line, format!("sensor `{}` listed twice", loc.sensor_id)));
        }
        out.push(loc);
    }
    Ok(out)
}

pub fn write_locations(path: &Path, locations: &[SensorLocation]) -> Result<(), IoError> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| IoError::csv(path, e);
    w.write_record(LOCATION_HEADER).map_err(wrap)?;
    for l in locations {
        w.write_record([l.sensor_id.clone(), l.x.to_string(), l.y.to_string()])
            .map_err(wrap)?;
    }
    finish(path, w)
}

/// `date,path` rows; relative paths are resolved against the manifest's
/// directory.
pub fn load_manifest(path: &Path) -> Result<Vec<(NaiveDate, PathBuf)>, IoError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &MANIFEST_HEADER)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| IoError::csv(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        out.push((parse_date(path, line, &row[0])?, base.join(&row[1])));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[(NaiveDate, String)]) -> Result<(), IoError> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| IoError::csv(path, e);
    w.write_record(MANIFEST_HEADER).map_err(wrap)?;
    for (d, p) in entries {
        w.write_record([d.format("%Y-%m-%d").to_string(), p.clone()])
            .map_err(wrap)?;
    }
    finish(path, w)
}

pub fn write_volume_manifest(path: &Path, entries: &[(u32, String)]) -> Result<(), IoError> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| IoError::csv(path, e);
    w.write_record(VOLUME_MANIFEST_HEADER).map_err(wrap)?;
    for (d, p) in entries {
        w.write_record([d.to_string(), p.clone()]).map_err(wrap)?;
    }
    finish(path, w)
}

pub fn load_volume_manifest(path: &Path) -> Result<Vec<(u32, PathBuf)>, IoError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &VOLUME_MANIFEST_HEADER)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| IoError::csv(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let depth = row[0]
            .parse()
            .map_err(|_| IoError::parse(path, line, format!("depth_cm: `{}`", &row[0])))?;
        out.push((depth, base.join(&row[1])));
    }
    Ok(out)
}

/// Every evaluated cell of every layer as `x,y,depth_cm,value,variance`
/// (cell centres). Masked cells are skipped.
pub fn write_grid_csv(path: &Path, volume: &MoistureVolume) -> Result<(), IoError> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| IoError::csv(path, e);
    w.write_record(GRID_HEADER).map_err(wrap)?;
    for layer in &volume.layers {
        for (idx, (&v, &s)) in layer.grid.values.iter().zip(&layer.grid.variance).enumerate() {
            if v == NODATA {
                continue;
            }
            let (x, y) = volume.geometry.center(idx);
            w.write_record([x.to_string(), y.to_string(), layer.depth_cm.to_string(), v.to_string(), s.to_string()])
                .map_err(wrap)?;
        }
    }
    finish(path, w)
}

/// One point forecast at a sensor location.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub sensor_id: String,
    pub depth_cm: u32,
    pub x: f64,
    pub y: f64,
    /// Last observed day.
    pub issued: NaiveDate,
    /// 1-based day ahead of `issued`.
    pub lead_day: usize,
    pub date: NaiveDate,
    pub moisture: f64,
}

pub fn write_forecast_csv(path: &Path, rows: &[ForecastRow]) -> Result<(), IoError> {
    let mut w = writer(path)?;
    let wrap = |e: csv::Error| IoError::csv(path, e);
    w.write_record(FORECAST_HEADER).map_err(wrap)?;
    for r in rows {
        w.write_record([
            r.sensor_id.clone(),
            r.depth_cm.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.issued.format("%Y-%m-%d").to_string(),
            r.lead_day.to_string(),
            r.date.format("%Y-%m-%d").to_string(),
            r.moisture.to_string(),
        ])
        .map_err(wrap)?;
    }
    finish(path, w)
}

pub fn load_forecast_csv(path: &Path) -> Result<Vec<ForecastRow>, IoError> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &FORECAST_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| IoError::csv(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let int = |i: usize, field: &str| -> Result<usize, IoError> {
            row[i]
                .parse()
                .map_err(|_| IoError::parse(path, line, format!("{field}: `{}` is not an integer", &row[i])))
        };
        out.push(ForecastRow {
            sensor_id: row[0].to_string(),
            depth_cm: int(1, "depth_cm")? as u32,
            x: parse_f64(path, line, "x", &row[2])?,
            y: parse_f64(path, line, "y", &row[3])?,
            issued: parse_date(path, line, &row[4])?,
            lead_day: int(5, "lead_day")?,
            date: parse_date(path, line, &row[6])?,
            moisture: parse_f64(path, line, "moisture", &row[7])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn sensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "s.csv",
            "date,sensor_id,depth_cm,moisture,soil_temp,salinity,rainfall\n\
             2021-03-01,A,10,30.5,12.25,1.1,0\n\
             2021-03-02,A,10,,12.5,1.1,4.2\n\
             2021-03-01,B,20,28,11,0.9,0.5\n",
        );
        let recs = load_sensor_csv(&p).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].moisture, Some(30.5));
        assert_eq!(recs[1].moisture, None);
        assert_eq!(recs[2].depth_cm, 20);
        let q = dir.path().join("out.csv");
        write_sensor_csv(&q, &recs).unwrap();
        assert_eq!(load_sensor_csv(&q).unwrap(), recs);
    }

    #[test]
    fn sensor_errors_name_lines() {
        let dir = tempfile::tempdir().unwrap();
        let head = "date,sensor_id,depth_cm,moisture,soil_temp,salinity,rainfall\n";
        let p = write(dir.path(), "a.csv", &format!("{head}2021-03-01,A,10,30,1,1,0\n2021-03-02,A,10,101,1,1,0\n"));
        let e = load_sensor_csv(&p).unwrap_err().to_string();
        assert!(e.contains(":3:") && e.contains("moisture"), "{e}");
        let p = write(dir.path(), "b.csv", &format!("{head}2021-03-01,A,10,30,1,1,0\n2021-03-01,A,10,31,1,1,0\n"));
        let e = load_sensor_csv(&p).unwrap_err().to_string();
        assert!(e.contains("duplicate") && e.contains("lines 2 and 3"), "{e}");
        let p = write(dir.path(), "c.csv", "date,sensor,depth_cm,moisture,soil_temp,salinity,rainfall\n");
        assert!(load_sensor_csv(&p).unwrap_err().to_string().contains("header"));
        let p = write(dir.path(), "d.csv", &format!("{head}2021-13-01,A,10,30,1,1,0\n"));
        assert!(load_sensor_csv(&p).unwrap_err().to_string().contains(":2:"));
        let p = write(dir.path(), "e.csv", &format!("{head}2021-03-01,A,10,30,1,1\n"));
        assert!(load_sensor_csv(&p).is_err());
    }

    #[test]
    fn locations_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let locs = vec![
            SensorLocation {
                sensor_id: "A".into(),
                x: 1.5,
                y: 2.0,
            },
            SensorLocation {
                sensor_id: "B".into(),
                x: 10.0,
                y: 0.25,
            },
        ];
        let p = dir.path().join("loc.csv");
        write_locations(&p, &locs).unwrap();
        assert_eq!(load_locations(&p).unwrap(), locs);
        let p = write(dir.path(), "dup.csv", "sensor_id,x,y\nA,1,1\nA,2,2\n");
        assert!(load_locations(&p).is_err());

        let m = dir.path().join("stack/manifest.csv");
        let d = NaiveDate::from_ymd_opt(2021, 5, 1).unwrap();
        write_manifest(&m, &[(d, "img_000.bgrid".into())]).unwrap();
        assert_eq!(load_manifest(&m).unwrap(), vec![(d, dir.path().join("stack/img_000.bgrid"))]);
    }

    #[test]
    fn forecast_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let d = NaiveDate::from_ymd_opt(2023, 2, 1).unwrap();
        let rows = vec![ForecastRow {
            sensor_id: "S01".into(),
            depth_cm: 20,
            x: 12.5,
            y: 0.1 + 0.2,
            issued: d,
            lead_day: 14,
            date: d + chrono::Days::new(14),
            moisture: 31.25,
        }];
        write_forecast_csv(&p, &rows).unwrap();
        assert_eq!(load_forecast_csv(&p).unwrap(), rows);
    }
}
