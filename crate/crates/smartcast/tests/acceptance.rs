//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach stdout; exits non-zero on any FAIL.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use smartcast::gradcheck::{check_both, ToyDims};
use smartcast::pipeline::{index_stack, train_index, train_soil_depth};
use smartcast::raster;
use smartcast::synth::{scenario_config, SynthSpec};
use smartcast_core::kriging::{
    build_model, empirical_variogram, fit_variogram, loo_score, predict_point, SamplePoint, Variogram,
};
use smartcast_core::lstm::{seq2seq_forward, GradCheckOptions, ModelShape, Seq2SeqModel};
use smartcast_core::timeseries::N_FEATURES;
use smartcast_core::vegindex::{compute_index, reshape_to_image, BandGrid, BandMapping, IndexKind};

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(30);
const FORWARD_TOL: f64 = 1e-12;
const SOIL_MIN_IMPROVEMENT: f64 = 0.20;
const SOIL_BUDGET_PER_DEPTH: Duration = Duration::from_secs(300);
const INDEX_MIN_IMPROVEMENT: f64 = 0.15;
const KRIGING_TOL: f64 = 1e-8;
const WEIGHT_SUM_TOL: f64 = 1e-10;
const LOO_MIN: f64 = 0.9;
const INDEX_TOL: f64 = 1e-7;
const SMOKE_BUDGET: Duration = Duration::from_secs(600);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_fidelity() -> Outcome {
    let opts = GradCheckOptions::default();
    assert_eq!((opts.epsilon, opts.tolerance), (1e-5, GRADCHECK_TOL));
    let t = Instant::now();
    let results = match check_both(ToyDims::SOIL, ToyDims::INDEX, 0, false) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let elapsed = t.elapsed();
    let all_coords = results.iter().all(|r| r.report.checked > 0);
    let pass = all_coords && elapsed < GRADCHECK_BUDGET && results.iter().all(|r| r.report.max_rel_error < GRADCHECK_TOL);
    let parts: Vec<String> = results
        .iter()
        .map(|r| format!("{} {} coords max rel {:.2e}", r.name, r.report.checked, r.report.max_rel_error))
        .collect();
    outcome(pass, format!("{}; {:.1}s (tol {GRADCHECK_TOL:e}, eps 1e-5, < 30s)", parts.join(", "), elapsed.as_secs_f64()))
}

fn forward_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for (shape, len, seed) in [(ModelShape::soil(N_FEATURES), 30, 7u64), (ModelShape::index(), 5, 11)] {
        let model = Seq2SeqModel::init(&shape, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let input: Vec<f64> = (0..len * shape.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (pred, _) = seq2seq_forward(&model, &input).unwrap();
        let expect = oracle::seq2seq(&model.params, shape.horizon, &input);
        if pred.len() != expect.len() {
            return outcome(false, "horizon mismatch");
        }
        worst = pred.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    outcome(worst < FORWARD_TOL, format!("soil 200/200/100 and index 50/50/20: max |diff| {worst:.2e} (tol {FORWARD_TOL:e})"))
}

/// Scenario for the soil criterion: seed 7, 3 depths, 400 days.
fn soil_scenario() -> (SynthSpec, smartcast::config::RunConfig) {
    let spec = SynthSpec {
        seed: 7,
        days: 400,
        n_sensors: 20,
        ..SynthSpec::default()
    };
    let mut cfg = scenario_config(&spec);
    cfg.soil_model.encoder_hidden = 32;
    cfg.soil_model.decoder_hidden = 32;
    cfg.soil_model.dense_hidden = 16;
    cfg.soil_train.learning_rate = 2e-3;
    cfg.soil_train.epochs = 20;
    (spec, cfg)
}

fn soil_learning() -> Outcome {
    let (spec, cfg) = soil_scenario();
    let (records, _) = spec.sensor_records();
    let mut pass = spec.depths.len() == 3;
    let mut parts = Vec::new();
    for &depth in &spec.depths {
        let t = Instant::now();
        match train_soil_depth(&records, depth, &cfg) {
            Ok(o) => {
                let elapsed = t.elapsed();
                let imp = o.skill.improvement();
                pass &= imp >= SOIL_MIN_IMPROVEMENT && elapsed < SOIL_BUDGET_PER_DEPTH;
                parts.push(format!(
                    "{depth} cm rmse {:.3} vs persistence {:.3} ({:+.1}%, {:.0}s)",
                    o.skill.rmse,
                    o.skill.persistence_rmse,
                    100.0 * imp,
                    elapsed.as_secs_f64()
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{depth} cm error: {e}"));
            }
        }
    }
    outcome(pass, format!("{}; need >= {:.0}% each", parts.join(", "), 100.0 * SOIL_MIN_IMPROVEMENT))
}

fn index_learning() -> Outcome {
    let spec = SynthSpec {
        grid_width: 32,
        grid_height: 32,
        n_images: 14,
        ..SynthSpec::default()
    };
    let cfg = scenario_config(&spec);
    let result = index_stack(&spec.image_stack(), &cfg).and_then(|s| train_index(&s, &cfg));
    match result {
        Ok(o) => {
            let imp = o.skill.improvement();
            outcome(
                imp >= INDEX_MIN_IMPROVEMENT,
                format!(
                    "32x32, 14 images, {} test pixels: rmse {:.4} vs persistence {:.4} ({:+.1}%, need >= {:.0}%)",
                    o.test_samples,
                    o.skill.rmse,
                    o.skill.persistence_rmse,
                    100.0 * imp,
                    100.0 * INDEX_MIN_IMPROVEMENT
                ),
            )
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn kriging_exactness_and_oracle() -> Outcome {
    let mut exact = 0.0f64;
    let mut vs_oracle = 0.0f64;
    let mut weight_sum = 0.0f64;
    let mut queries = 0usize;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=10);
        let samples: Vec<SamplePoint> = (0..n)
            .map(|_| SamplePoint::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(5.0..45.0)))
            .collect();
        let tuples: Vec<(f64, f64, f64)> = samples.iter().map(|s| (s.x, s.y, s.value)).collect();
        let nugget = if seed % 2 == 0 { 0.0 } else { rng.random_range(0.0..0.5) };
        let v = Variogram::new(nugget, rng.random_range(1.0..20.0), rng.random_range(15.0..60.0)).unwrap();
        let m = build_model(&samples, &v).unwrap();
        if nugget == 0.0 {
            for s in &samples {
                exact = exact.max((m.predict(s.x, s.y).value - s.value).abs());
            }
        }
        let mut check = |q: (f64, f64)| {
            let p = predict_point(&m, q.0, q.1);
            let (value, variance, _) = oracle::krige(&tuples, v.nugget, v.sill, v.range, q);
            vs_oracle = vs_oracle.max((p.value - value).abs()).max((p.variance - variance).abs());
            let (w, _) = m.weights(q.0, q.1);
            weight_sum = weight_sum.max((w.iter().sum::<f64>() - 1.0).abs());
            queries += 1;
        };
        for _ in 0..20 {
            check((rng.random_range(-10.0..110.0), rng.random_range(-10.0..110.0)));
        }
        for s in &samples {
            check((s.x, s.y));
        }
    }
    let pass = exact < KRIGING_TOL && vs_oracle < KRIGING_TOL && weight_sum < WEIGHT_SUM_TOL;
    outcome(
        pass,
        format!(
            "100 seeds, {queries} queries: at-sample {exact:.1e}, vs dense solve {vs_oracle:.1e} (tol {KRIGING_TOL:e}), |sum w - 1| {weight_sum:.1e} (tol {WEIGHT_SUM_TOL:e})"
        ),
    )
}

fn smooth_field(x: f64, y: f64) -> f64 {
    25.0 + 8.0 * (x / 30.0).sin() * (y / 40.0).cos() + 0.05 * x
}

fn loo_on_smooth_field() -> Outcome {
    let mut samples = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            let (x, y) = (10.0 + 20.0 * i as f64, 10.0 + 20.0 * j as f64);
            samples.push(SamplePoint::new(x, y, smooth_field(x, y)));
        }
    }
    let fitted = empirical_variogram(&samples, 10, 70.0).and_then(|b| fit_variogram(&b));
    match fitted.and_then(|v| loo_score(&samples, &v).map(|s| (v, s))) {
        Ok((v, score)) => outcome(
            score.raw >= LOO_MIN,
            format!(
                "25 points on 100x100, fitted nugget {:.3} sill {:.2} range {:.1}: LOO {:.4} (need >= {LOO_MIN})",
                v.nugget, v.sill, v.range, score.raw
            ),
        ),
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn index_correctness() -> Outcome {
    const NODATA: f32 = -9999.0;
    let (w, h) = (37, 23);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names: Vec<String> = smartcast::synth::SENTINEL_BANDS.iter().map(|s| s.to_string()).collect();
    let mut data: Vec<f32> = (0..names.len() * w * h).map(|_| rng.random_range(0.0f32..1.0)).collect();
    for _ in 0..40 {
        let i = rng.random_range(0..data.len());
        data[i] = if rng.random_bool(0.5) { NODATA } else { 0.0 };
    }
    let grid = BandGrid::new(w, h, NODATA, names, data).unwrap();
    let mapping = BandMapping::default();
    let mut worst = 0.0f64;
    let mut in_range = true;
    let mut nodata_ok = true;
    let mut round_trip = true;
    for (kind, other) in [(IndexKind::Ndvi, "B04"), (IndexKind::Ndwi, "B11")] {
        let img = compute_index(&grid, kind, &mapping).unwrap();
        let (nir, b) = (grid.band("B08").unwrap(), grid.band(other).unwrap());
        for p in 0..w * h {
            let v = img.values[p];
            let expect = if nir[p] == NODATA || b[p] == NODATA {
                None
            } else {
                oracle::normalized_difference(nir[p], b[p])
            };
            match expect {
                Some(e) => {
                    worst = worst.max((v as f64 - e).abs());
                    in_range &= (-1.0..=1.0).contains(&v);
                }
                None => nodata_ok &= v == NODATA,
            }
        }
        let back = reshape_to_image(&img.flatten(), w, h, kind, NODATA).unwrap();
        round_trip &= back == img;
    }
    let pass = worst < INDEX_TOL && in_range && nodata_ok && round_trip;
    outcome(
        pass,
        format!(
            "NDVI+NDWI on {w}x{h} random bands: max |diff| {worst:.1e} (tol {INDEX_TOL:e}), in [-1,1] {in_range}, nodata {nodata_ok}, round trip {round_trip}"
        ),
    )
}

fn smartcast(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_smartcast"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("smartcast {} exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.extension().is_some_and(|x| x == "bgrid") || p.file_name().is_some_and(|n| n == "report.json") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Synthesizes the bundled scenario and runs it end to end through the CLI.
fn smoke(dir: &Path) -> Result<(Value, Duration), String> {
    let t = Instant::now();
    smartcast(&["synth", "--out", dir.to_str().unwrap()])?;
    let cfg = dir.join("config.json");
    smartcast(&["run", "--config", cfg.to_str().unwrap()])?;
    let text = std::fs::read_to_string(dir.join("output/report.json")).map_err(|e| e.to_string())?;
    let report = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok((report, t.elapsed()))
}

fn end_to_end(dir: &Path) -> Outcome {
    let (report, elapsed) = match smoke(dir) {
        Ok(r) => r,
        Err(e) => return outcome(false, e),
    };
    let out = dir.join("output");
    let complete = ["soil", "index", "forecast", "volume", "outputs", "config"].iter().all(|k| report.get(*k).is_some());
    let soil_depths: Vec<u64> = report["soil"].as_array().into_iter().flatten().filter_map(|s| s["depth_cm"].as_u64()).collect();
    let mut layers = Vec::new();
    for d in report["volume"]["depths"].as_array().into_iter().flatten() {
        let ok = d["grid"]
            .as_str()
            .and_then(|g| raster::read_band_grid(&out.join(g)).ok())
            .is_some_and(|g| g.band_names == ["moisture", "variance"] && g.width == 16 && g.height == 16);
        if ok {
            layers.push(d["depth_cm"].as_u64().unwrap_or(0));
        }
    }
    let pass = complete && soil_depths == [10, 20, 30] && layers == soil_depths && elapsed < SMOKE_BUDGET;
    outcome(
        pass,
        format!(
            "4 sensors x 3 depths, 16x16: layers {layers:?} for depths {soil_depths:?}, report complete {complete}, {:.1}s (< 600s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let out = dir.join("output");
    let first = snapshot(&out);
    let cfg = dir.join("config.json");
    if let Err(e) = smartcast(&["run", "--config", cfg.to_str().unwrap()]) {
        return outcome(false, e);
    }
    let second = snapshot(&out);
    let differing: Vec<String> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let pass = !first.is_empty() && first.len() == second.len() && differing.is_empty();
    outcome(
        pass,
        format!("{} files (report.json + BandGrids) compared, {} differ {:?}", first.len(), differing.len(), differing),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("seq2seq forward oracle", Box::new(forward_oracle)),
        ("soil learning signal", Box::new(soil_learning)),
        ("index learning", Box::new(index_learning)),
        ("kriging exactness and oracle", Box::new(kriging_exactness_and_oracle)),
        ("kriging LOO score", Box::new(loo_on_smooth_field)),
        ("NDVI/NDWI correctness", Box::new(index_correctness)),
        ("end-to-end smoke", Box::new(|| end_to_end(tmp.path()))),
        ("determinism", Box::new(|| determinism(tmp.path()))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
