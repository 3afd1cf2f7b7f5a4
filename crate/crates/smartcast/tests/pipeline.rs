use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use smartcast::config::RunConfig;
use smartcast::pipeline::{self, ErrorKind, Stage};
use smartcast::raster;
use smartcast::synth::{write_scenario, SynthSpec};

fn tiny() -> SynthSpec {
    SynthSpec {
        days: 120,
        grid_width: 10,
        grid_height: 8,
        n_images: 7,
        ..SynthSpec::default()
    }
}

fn scenario(dir: &Path, spec: &SynthSpec) -> RunConfig {
    write_scenario(spec, dir).unwrap();
    let mut cfg = RunConfig::from_json(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    cfg.base_dir = dir.to_path_buf();
    cfg.soil_train.epochs = 3;
    cfg.index_train.epochs = 3;
    cfg.validate().unwrap();
    cfg
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn run_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario(tmp.path(), &tiny());
    pipeline::run(&cfg).unwrap();
    let first = snapshot(&cfg.output_dir());
    pipeline::run(&cfg).unwrap();
    let second = snapshot(&cfg.output_dir());
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(v == &second[k], "{} differs", k.display());
    }
    assert!(first.keys().any(|k| k.ends_with("depth_020.bgrid")));
}

#[test]
fn report_is_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario(tmp.path(), &tiny());
    let report = pipeline::run(&cfg).unwrap();
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.output_dir().join("report.json")).unwrap()).unwrap();
    assert_eq!(report, on_disk);
    for key in ["command", "config", "forecast", "index", "outputs", "seed", "soil", "volume"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    let depths: Vec<u64> = report["volume"]["depths"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["depth_cm"].as_u64().unwrap())
        .collect();
    assert_eq!(depths, vec![10, 20, 30]);
    assert_eq!(report["forecast"]["points"], 4 * 3 * 14);

    let grid = raster::read_band_grid(&cfg.output_dir().join("volume/depth_010.bgrid")).unwrap();
    assert_eq!((grid.width, grid.height), (10, 8));
    assert_eq!(grid.band_names, vec!["moisture", "variance"]);
    let outputs: Vec<&str> = report["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    let mut sorted = outputs.clone();
    sorted.sort();
    assert_eq!(outputs, sorted);
    for f in outputs {
        assert!(cfg.output_dir().join(f).is_file(), "{f}");
    }
}

#[test]
fn failed_run_leaves_previous_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = scenario(tmp.path(), &tiny());
    let out = cfg.output_dir();
    std::fs::create_dir_all(out.join("quarantine")).unwrap();
    std::fs::write(out.join("quarantine/stale.txt"), b"x").unwrap();
    pipeline::run_train_soil(&cfg).unwrap();
    assert!(!out.join("quarantine").exists());
    let before = snapshot(&out);

    cfg.soil_model.input_len = 100;
    let err = pipeline::run(&cfg).unwrap_err();
    assert_eq!(err.kind, ErrorKind::Data);
    assert_eq!(err.exit_code(), 3);
    assert_eq!(snapshot(&out), before);
}

#[test]
fn mismatched_stack_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario(tmp.path(), &tiny());
    let other = SynthSpec {
        grid_width: 5,
        ..tiny()
    };
    let grid = other.band_grid(0);
    raster::write_band_grid(&tmp.path().join("stack/img_003.bgrid"), &grid).unwrap();
    let err = pipeline::run(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Ingest);
    assert_eq!(err.kind, ErrorKind::Data);
}
