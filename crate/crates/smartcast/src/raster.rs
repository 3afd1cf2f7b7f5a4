//! BandGrid binary rasters and 8-bit PGM heatmaps.
//!
//! BandGrid layout: four text lines
//!
//! ```text
//! BGRID 1
//! <width> <height> <bands>
//! nodata=<float>
//! <name>,<name>,...
//! ```
//!
//! followed by `width·height·bands` little-endian f32 values, band-major then
//! row-major.

use std::io::Write;
use std::path::{Path, PathBuf};

use smartcast_core::vegindex::BandGrid;

use crate::io::IoError;

pub const MAGIC: &str = "BGRID 1";

pub fn encode_band_grid(grid: &BandGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + grid.data.len() * 4);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("{} {} {}\n", grid.width, grid.height, grid.bands()).as_bytes());
    out.extend_from_slice(format!("nodata={}\n", grid.nodata).as_bytes());
    out.extend_from_slice(grid.band_names.join(",").as_bytes());
    out.push(b'\n');
    for v in &grid.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_band_grid(bytes: &[u8], path: &Path) -> Result<BandGrid, IoError> {
    let bad = |m: String| IoError::format(path, m);
    let mut lines = Vec::with_capacity(4);
    let mut pos = 0;
    while lines.len() < 4 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(format!("truncated header after {} line(s)", lines.len())))?;
        let text = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8".into()))?;
        lines.push(text);
        pos += end + 1;
    }
    if lines[0] != MAGIC {
        return Err(bad(format!("expected `{MAGIC}`, found `{}`", lines[0])));
    }
    let dims: Vec<usize> = lines[1]
        .split(' ')
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| bad(format!("bad dimension line `{}`", lines[1])))?;
    let [width, height, bands] = dims[..] else {
        return Err(bad(format!("bad dimension line `{}`", lines[1])));
    };
    let nodata: f32 = lines[2]
        .strip_prefix("nodata=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("bad nodata line `{}`", lines[2])))?;
    let names: Vec<String> = if lines[3].is_empty() {
        Vec::new()
    } else {
        lines[3].split(',').map(String::from).collect()
    };
    if names.len() != bands {
        return Err(bad(format!("header declares {bands} bands but names {}", names.len())));
    }
    let payload = &bytes[pos..];
    let expected = width * height * bands * 4;
    if payload.len() != expected {
        return Err(bad(format!("expected {expected} data bytes, found {}", payload.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    BandGrid::new(width, height, nodata, names, data).map_err(|e| bad(e.to_string()))
}

pub fn write_band_grid(path: &Path, grid: &BandGrid) -> Result<(), IoError> {
    if grid.band_names.iter().any(|n| n.contains([',', '\n']) || n.is_empty()) {
        return Err(IoError::format(path, "band names must be non-empty without commas or newlines"));
    }
    write_bytes(path, &encode_band_grid(grid))
}

pub fn read_band_grid(path: &Path) -> Result<BandGrid, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_band_grid(&bytes, path)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    f.write_all(bytes).map_err(|e| IoError::io(path, e))
}

/// Min and max over values that are finite and not `nodata`.
pub fn value_bounds(values: &[f64], nodata: f64) -> Option<(f64, f64)> {
    values
        .iter()
        .filter(|v| v.is_finite() && **v != nodata)
        .fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
}

/// Binary PGM: min→0, max→255 (linear), nodata→0.
pub fn encode_pgm(values: &[f64], width: usize, height: usize, nodata: f64) -> (Vec<u8>, Option<(f64, f64)>) {
    assert_eq!(values.len(), width * height);
    let bounds = value_bounds(values, nodata);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| match bounds {
        Some((lo, hi)) if v.is_finite() && v != nodata && hi > lo => (((v - lo) / (hi - lo)) * 255.0).round() as u8,
        _ => 0,
    }));
    (out, bounds)
}

/// Sidecar path holding the scaling bounds of a heatmap.
pub fn bounds_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("bounds.txt")
}

/// Writes the PGM and its `.bounds.txt` sidecar (`min=`, `max=`, `nodata=`).
pub fn write_heatmap(path: &Path, values: &[f64], width: usize, height: usize, nodata: f64) -> Result<(), IoError> {
    let (bytes, bounds) = encode_pgm(values, width, height, nodata);
    write_bytes(path, &bytes)?;
    let (lo, hi) = bounds.map_or(("none".to_string(), "none".to_string()), |(a, b)| (a.to_string(), b.to_string()));
    write_bytes(&bounds_path(path), format!("min={lo}\nmax={hi}\nnodata={nodata}\n").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BandGrid {
        BandGrid::new(
            3,
            2,
            -9999.0,
            vec!["B04".into(), "B08".into()],
            (0..12).map(|i| i as f32 * 0.05).collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_layout() {
        let g = grid();
        let bytes = encode_band_grid(&g);
        let header = b"BGRID 1\n3 2 2\nnodata=-9999\nB04,B08\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 12 * 4);
        assert_eq!(&bytes[header.len() + 4..header.len() + 8], &0.05f32.to_le_bytes());
        assert_eq!(decode_band_grid(&bytes, Path::new("x")).unwrap(), g);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.bgrid");
        let mut g = grid();
        g.nodata = -1.5e-7;
        write_band_grid(&p, &g).unwrap();
        assert_eq!(read_band_grid(&p).unwrap(), g);

        let mut bytes = encode_band_grid(&grid());
        bytes.pop();
        assert!(decode_band_grid(&bytes, &p).unwrap_err().to_string().contains("data bytes"));
        assert!(decode_band_grid(b"BGRID 2\n1 1 1\nnodata=0\nA\n\0\0\0\0", &p).is_err());
        assert!(decode_band_grid(b"BGRID 1\n1 1 2\nnodata=0\nA\n\0\0\0\0", &p).is_err());
        assert!(decode_band_grid(b"BGRID 1\n1 1", &p).is_err());
        let mut bad = grid();
        bad.band_names[0] = "a,b".into();
        assert!(write_band_grid(&p, &bad).is_err());
    }

    #[test]
    fn pgm_scaling() {
        let (bytes, bounds) = encode_pgm(&[1.0, 2.0, 3.0, -9999.0], 2, 2, -9999.0);
        assert_eq!(bounds, Some((1.0, 3.0)));
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 0]);
        let (flat, _) = encode_pgm(&[4.0, 4.0], 2, 1, -1.0);
        assert_eq!(&flat[flat.len() - 2..], &[0, 0]);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        write_heatmap(&p, &[0.5, 1.5], 2, 1, -9999.0).unwrap();
        let side = std::fs::read_to_string(bounds_path(&p)).unwrap();
        assert_eq!(side, "min=0.5\nmax=1.5\nnodata=-9999\n");
    }
}
