//! Ordinary kriging with a Gaussian variogram.
//!
//! The semivariogram is `γ(h) = nugget + sill·(1 − exp(−3h²/a²))` for
//! `h > 0` and `γ(0) = 0`, so `γ(a) ≈ nugget + 0.95·sill` (practical range).
//! Weights solve the bordered system
//!
//! ```text
//! [ Γ  1 ] [ w ]   [ γ(q) ]
//! [ 1ᵀ 0 ] [ μ ] = [  1   ]
//! ```
//!
//! and the kriging variance is `Σ wᵢ γ(‖pᵢ − q‖) + μ`.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::linalg::{Lu, Singular};

/// Value written to masked grid cells.
pub const NODATA: f64 = -9999.0;

/// Pivot ratio below which the kriging matrix is treated as ill-conditioned.
const ILL_CONDITIONED: f64 = 1e-13;
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KrigingError {
    #[error("lag distance must be non-negative, got {0}")]
    NegativeLag(f64),
    #[error("invalid variogram: nugget {nugget}, sill {sill}, range {range}")]
    InvalidVariogram { nugget: f64, sill: f64, range: f64 },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("sample {0} has a non-finite coordinate or value")]
    NonFiniteSample(usize),
    #[error("samples {first} and {second} share coordinates ({x}, {y})")]
    DuplicateCoordinates { first: usize, second: usize, x: f64, y: f64 },
    #[error("kriging matrix is singular even with jitter {jitter}")]
    Factorization { jitter: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("no sample pairs within max_lag {0}")]
    NoPairsInRange(f64),
    #[error("need at least 3 non-empty bins, got {0}")]
    InsufficientBins(usize),
    #[error("all semivariances are zero (flat field)")]
    FlatField,
    #[error("sample values have zero variance; score is undefined")]
    UndefinedScore,
    #[error("grid geometry of depth {depth_cm} cm differs from the first layer")]
    GeometryMismatch { depth_cm: u32 },
    #[error("depth {0} cm appears more than once")]
    DuplicateDepth(u32),
    #[error("volume needs at least one layer")]
    EmptyVolume,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

impl SamplePoint {
    pub fn new(x: f64, y: f64, value: f64) -> Self {
        Self { x, y, value }
    }

    fn dist(&self, x: f64, y: f64) -> f64 {
        libm::hypot(self.x - x, self.y - y)
    }
}

/// Gaussian variogram parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variogram {
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl Variogram {
    pub fn new(nugget: f64, sill: f64, range: f64) -> Result<Self, KrigingError> {
        let v = Self { nugget, sill, range };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), KrigingError> {
        let ok = self.nugget >= 0.0
            && self.sill > 0.0
            && self.range > 0.0
            && self.nugget.is_finite()
            && self.sill.is_finite()
            && self.range.is_finite();
        if ok {
            Ok(())
        } else {
            Err(KrigingError::InvalidVariogram {
                nugget: self.nugget,
                sill: self.sill,
                range: self.range,
            })
        }
    }

    /// Shape term `1 − exp(−3h²/a²)`.
    fn shape(&self, h: f64) -> f64 {
        let r = h / self.range;
        -libm::expm1(-3.0 * r * r)
    }

    /// `γ(h)` for `h ≥ 0` without argument checks.
    #[inline]
    pub fn gamma(&self, h: f64) -> f64 {
        if h == 0.0 {
            0.0
        } else {
            self.nugget + self.sill * self.shape(h)
        }
    }
}

pub fn gaussian_variogram(h: f64, v: &Variogram) -> Result<f64, KrigingError> {
    if !(h >= 0.0) {
        return Err(KrigingError::NegativeLag(h));
    }
    Ok(v.gamma(h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagBin {
    pub lag: f64,
    pub semivariance: f64,
    pub pairs: usize,
}

/// Binned semivariances `(1/2N_b)·Σ(vᵢ − vⱼ)²` over pairs with distance in
/// `[0, max_lag]`, `n_bins` equal-width bins reported at their centres.
/// Empty bins are omitted.
pub fn empirical_variogram(samples: &[SamplePoint], n_bins: usize, max_lag: f64) -> Result<Vec<LagBin>, KrigingError> {
    if n_bins == 0 || !(max_lag > 0.0) {
        return Err(KrigingError::InvalidArgument("n_bins and max_lag must be positive"));
    }
    if samples.len() < 2 {
        return Err(KrigingError::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let width = max_lag / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let d = a.dist(b.x, b.y);
            if d > max_lag {
                continue;
            }
            let k = ((d / width) as usize).min(n_bins - 1);
            sums[k] += (a.value - b.value) * (a.value - b.value);
            counts[k] += 1;
        }
    }
    let bins: Vec<LagBin> = (0..n_bins)
        .filter(|&k| counts[k] > 0)
        .map(|k| LagBin {
            lag: (k as f64 + 0.5) * width,
            semivariance: sums[k] / (2.0 * counts[k] as f64),
            pairs: counts[k],
        })
        .collect();
    if bins.is_empty() {
        return Err(KrigingError::NoPairsInRange(max_lag));
    }
    Ok(bins)
}

/// Pair-count weighted squared error of `v` against `bins`.
pub fn fit_residual(bins: &[LagBin], v: &Variogram) -> f64 {
    bins.iter()
        .map(|b| {
            let r = b.semivariance - v.gamma(b.lag);
            b.pairs as f64 * r * r
        })
        .sum()
}

/// Best non-negative `(nugget, sill)` for a fixed range; the model is linear
/// in both.
fn best_linear(bins: &[LagBin], range: f64, sill_floor: f64) -> Variogram {
    let probe = Variogram {
        nugget: 0.0,
        sill: 1.0,
        range,
    };
    let (mut sw, mut sf, mut sff, mut sy, mut sfy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for b in bins {
        let w = b.pairs as f64;
        let f = probe.shape(b.lag);
        sw += w;
        sf += w * f;
        sff += w * f * f;
        sy += w * b.semivariance;
        sfy += w * f * b.semivariance;
    }
    let det = sw * sff - sf * sf;
    let (mut nugget, mut sill) = if det.abs() > 1e-300 {
        ((sff * sy - sf * sfy) / det, (sw * sfy - sf * sy) / det)
    } else {
        (-1.0, -1.0)
    };
    if !(nugget >= 0.0 && sill > 0.0) {
        // try each face of the feasible quadrant
        let on_sill_axis = Variogram {
            nugget: 0.0,
            sill: if sff > 0.0 { (sfy / sff).max(sill_floor) } else { sill_floor },
            range,
        };
        let on_nugget_axis = Variogram {
            nugget: (sy / sw).max(0.0),
            sill: sill_floor,
            range,
        };
        let pick = if fit_residual(bins, &on_sill_axis) <= fit_residual(bins, &on_nugget_axis) {
            on_sill_axis
        } else {
            on_nugget_axis
        };
        nugget = pick.nugget;
        sill = pick.sill;
    }
    Variogram {
        nugget,
        sill: sill.max(sill_floor),
        range,
    }
}

/// Weighted least-squares fit (weights = pair counts). The range is found by a
/// log-spaced grid search refined with golden-section steps; for each
/// candidate range the nugget and sill are solved exactly under
/// non-negativity.
pub fn fit_variogram(bins: &[LagBin]) -> Result<Variogram, KrigingError> {
    let bins: Vec<LagBin> = bins.iter().copied().filter(|b| b.pairs > 0).collect();
    if bins.len() < 3 {
        return Err(KrigingError::InsufficientBins(bins.len()));
    }
    let max_sv = bins.iter().map(|b| b.semivariance).fold(0.0, f64::max);
    if max_sv <= 0.0 {
        return Err(KrigingError::FlatField);
    }
    let sill_floor = max_sv * 1e-12;
    let lag_min = bins.iter().map(|b| b.lag).fold(f64::INFINITY, f64::min).max(1e-12);
    let lag_max = bins.iter().map(|b| b.lag).fold(0.0, f64::max).max(lag_min);

    let cost = |ln_a: f64| {
        let v = best_linear(&bins, libm::exp(ln_a), sill_floor);
        (fit_residual(&bins, &v), v)
    };

    const CANDIDATES: usize = 240;
    let lo = libm::log(lag_min / 10.0);
    let hi = libm::log(lag_max * 10.0);
    let step = (hi - lo) / (CANDIDATES - 1) as f64;
    let grid: Vec<f64> = (0..CANDIDATES).map(|k| lo + step * k as f64).collect();
    let (best_k, _) = grid
        .iter()
        .enumerate()
        .map(|(k, &g)| (k, cost(g).0))
        .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });

    // golden-section refinement inside the neighbouring grid cells
    let mut a = grid[best_k.saturating_sub(1)];
    let mut b = grid[(best_k + 1).min(CANDIDATES - 1)];
    let phi = 0.5 * (libm::sqrt(5.0) - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (cost(c).0, cost(d).0);
    for _ in 0..200 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = cost(c).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = cost(d).0;
        }
    }
    let (refined_cost, refined) = cost(0.5 * (a + b));
    let (grid_cost, grid_best) = cost(grid[best_k]);
    Ok(if refined_cost <= grid_cost { refined } else { grid_best })
}

/// Convex hull used to flag extrapolated queries.
#[derive(Debug, Clone, PartialEq)]
struct Hull {
    points: Vec<(f64, f64)>,
    tol: f64,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

impl Hull {
    fn new(samples: &[SamplePoint]) -> Self {
        let mut pts: Vec<(f64, f64)> = samples.iter().map(|s| (s.x, s.y)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pts.dedup();
        let span = pts
            .iter()
            .flat_map(|p| [p.0.abs(), p.1.abs()])
            .fold(1.0, f64::max);
        let tol = 1e-9 * span * span;
        if pts.len() < 3 {
            return Self { points: pts, tol };
        }
        let mut lower: Vec<(f64, f64)> = Vec::new();
        for &p in &pts {
            while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<(f64, f64)> = Vec::new();
        for &p in pts.iter().rev() {
            while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        Self { points: lower, tol }
    }

    fn contains(&self, q: (f64, f64)) -> bool {
        match self.points.len() {
            0 => false,
            1 => {
                let p = self.points[0];
                (p.0 - q.0).abs() <= libm::sqrt(self.tol) && (p.1 - q.1).abs() <= libm::sqrt(self.tol)
            }
            2 => {
                let (a, b) = (self.points[0], self.points[1]);
                let within = |lo: f64, hi: f64, v: f64| v >= lo.min(hi) - libm::sqrt(self.tol) && v <= lo.max(hi) + libm::sqrt(self.tol);
                cross(a, b, q).abs() <= self.tol && within(a.0, b.0, q.0) && within(a.1, b.1, q.1)
            }
            n => (0..n).all(|i| cross(self.points[i], self.points[(i + 1) % n], q) >= -self.tol),
        }
    }
}

/// A factorized ordinary-kriging system. Samples are stored sorted by
/// coordinates so results do not depend on input order.
#[derive(Debug, Clone)]
pub struct KrigingModel {
    samples: Vec<SamplePoint>,
    variogram: Variogram,
    lu: Lu,
    jitter: f64,
    hull: Hull,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub variance: f64,
    /// Query lies outside the convex hull of the samples.
    pub extrapolated: bool,
}

fn kriging_matrix(samples: &[SamplePoint], v: &Variogram, jitter: f64) -> Vec<f64> {
    let n = samples.len();
    let m = n + 1;
    let mut a = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            a[i * m + j] = if i == j {
                -jitter
            } else {
                v.gamma(samples[i].dist(samples[j].x, samples[j].y))
            };
        }
        a[i * m + n] = 1.0;
        a[n * m + i] = 1.0;
    }
    a
}

/// Assembles and factorizes the `(n+1) × (n+1)` system. When the matrix is
/// singular or its pivot ratio drops below `1e-13`, a nugget-like jitter of
/// `1e-10·sill` (growing ×10 up to `1e-6·sill`) is applied to the diagonal.
pub fn build_model(samples: &[SamplePoint], variogram: &Variogram) -> Result<KrigingModel, KrigingError> {
    variogram.validate()?;
    if samples.is_empty() {
        return Err(KrigingError::InsufficientSamples { needed: 1, got: 0 });
    }
    if let Some(i) = samples
        .iter()
        .position(|s| !(s.x.is_finite() && s.y.is_finite() && s.value.is_finite()))
    {
        return Err(KrigingError::NonFiniteSample(i));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&samples[a], &samples[b]);
        p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)).then(a.cmp(&b))
    });
    for pair in order.windows(2) {
        let (p, q) = (&samples[pair[0]], &samples[pair[1]]);
        if p.x == q.x && p.y == q.y {
            return Err(KrigingError::DuplicateCoordinates {
                first: pair[0].min(pair[1]),
                second: pair[0].max(pair[1]),
                x: p.x,
                y: p.y,
            });
        }
    }
    let sorted: Vec<SamplePoint> = order.iter().map(|&i| samples[i]).collect();
    let m = sorted.len() + 1;

    let mut jitter = 0.0;
    loop {
        let a = kriging_matrix(&sorted, variogram, jitter);
        match Lu::factor(a, m) {
            Ok(lu) if lu.pivot_ratio() >= ILL_CONDITIONED => {
                return Ok(KrigingModel {
                    hull: Hull::new(&sorted),
                    samples: sorted,
                    variogram: *variogram,
                    lu,
                    jitter,
                });
            }
            Ok(_) | Err(Singular { .. }) => {}
        }
        jitter = if jitter == 0.0 {
            JITTER_START * variogram.sill
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_MAX * variogram.sill * (1.0 + 1e-9) {
            return Err(KrigingError::Factorization {
                jitter: jitter / 10.0,
            });
        }
    }
}

impl KrigingModel {
    pub fn samples(&self) -> &[SamplePoint] {
        &self.samples
    }

    pub fn variogram(&self) -> &Variogram {
        &self.variogram
    }

    /// Diagonal regularization that was needed to factorize (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Right-hand side `[γ(‖pᵢ − q‖)…, 1]`.
    fn rhs(&self, x: f64, y: f64) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .samples
            .iter()
            .map(|s| self.variogram.gamma(s.dist(x, y)))
            .collect();
        b.push(1.0);
        b
    }

    /// Kriging weights (in [`Self::samples`] order) and the Lagrange multiplier.
    pub fn weights(&self, x: f64, y: f64) -> (Vec<f64>, f64) {
        let mut sol = self.lu.solve(&self.rhs(x, y));
        let mu = sol.pop().expect("bordered system");
        (sol, mu)
    }

    pub fn predict(&self, x: f64, y: f64) -> Prediction {
        let rhs = self.rhs(x, y);
        let mut sol = self.lu.solve(&rhs);
        let mu = sol.pop().expect("bordered system");
        let value = sol.iter().zip(&self.samples).map(|(w, s)| w * s.value).sum();
        let variance = sol.iter().zip(&rhs).map(|(w, g)| w * g).sum::<f64>() + mu;
        Prediction {
            value,
            variance,
            extrapolated: !self.hull.contains((x, y)),
        }
    }
}

pub fn predict_point(model: &KrigingModel, x: f64, y: f64) -> Prediction {
    model.predict(x, y)
}

/// Regular grid; cell `(i, j)` has centre
/// `(origin_x + (i + ½)·cell_size, origin_y + (j + ½)·cell_size)` and is stored
/// at row-major index `j·width + i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl GridGeometry {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn center(&self, index: usize) -> (f64, f64) {
        let (i, j) = (index % self.width, index / self.width);
        (
            self.origin_x + (i as f64 + 0.5) * self.cell_size,
            self.origin_y + (j as f64 + 0.5) * self.cell_size,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub geometry: GridGeometry,
    pub values: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Kriges every cell centre. Cells where `mask` is `false` get [`NODATA`].
pub fn interpolate_grid(model: &KrigingModel, geometry: &GridGeometry, mask: Option<&[bool]>) -> Result<Grid, KrigingError> {
    if geometry.cells() == 0 || !(geometry.cell_size > 0.0) {
        return Err(KrigingError::InvalidArgument("grid must be non-empty with positive cell size"));
    }
    if mask.is_some_and(|m| m.len() != geometry.cells()) {
        return Err(KrigingError::InvalidArgument("mask length must equal the number of cells"));
    }
    let mut values = Vec::with_capacity(geometry.cells());
    let mut variance = Vec::with_capacity(geometry.cells());
    for idx in 0..geometry.cells() {
        if mask.is_some_and(|m| !m[idx]) {
            values.push(NODATA);
            variance.push(NODATA);
            continue;
        }
        let (x, y) = geometry.center(idx);
        let p = model.predict(x, y);
        values.push(p.value);
        variance.push(p.variance);
    }
    Ok(Grid {
        geometry: *geometry,
        values,
        variance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooScore {
    /// `1 − Σ(yᵢ − ŷᵢ)² / Σ(yᵢ − ȳ)²`, unbounded below.
    pub raw: f64,
    /// Leave-one-out prediction for each sample, in input order.
    pub predictions: Vec<f64>,
}

impl LooScore {
    /// Score clipped to [0, 1] for reporting.
    pub fn clamped(&self) -> f64 {
        self.raw.clamp(0.0, 1.0)
    }
}

/// Leave-one-out coefficient of determination.
pub fn loo_score(samples: &[SamplePoint], variogram: &Variogram) -> Result<LooScore, KrigingError> {
    if samples.len() < 3 {
        return Err(KrigingError::InsufficientSamples {
            needed: 3,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.value).sum::<f64>() / n;
    let sst: f64 = samples.iter().map(|s| (s.value - mean) * (s.value - mean)).sum();
    if !(sst > 0.0) {
        return Err(KrigingError::UndefinedScore);
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut sse = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let others: Vec<SamplePoint> = samples
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, p)| *p)
            .collect();
        let pred = build_model(&others, variogram)?.predict(s.x, s.y).value;
        sse += (s.value - pred) * (s.value - pred);
        predictions.push(pred);
    }
    Ok(LooScore {
        raw: 1.0 - sse / sst,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLayer {
    pub depth_cm: u32,
    pub grid: Grid,
}

/// Per-depth grids on one shared geometry, shallowest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MoistureVolume {
    pub geometry: GridGeometry,
    pub layers: Vec<DepthLayer>,
}

impl MoistureVolume {
    pub fn depths(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.depth_cm).collect()
    }
}

pub fn stack_depths(layers: Vec<(u32, Grid)>) -> Result<MoistureVolume, KrigingError> {
    let mut layers: Vec<DepthLayer> = layers
        .into_iter()
        .map(|(depth_cm, grid)| DepthLayer { depth_cm, grid })
        .collect();
    let geometry = layers.first().ok_or(KrigingError::EmptyVolume)?.grid.geometry;
    for l in &layers {
        if l.grid.geometry != geometry || l.grid.values.len() != geometry.cells() {
            return Err(KrigingError::GeometryMismatch { depth_cm: l.depth_cm });
        }
    }
    layers.sort_by_key(|l| l.depth_cm);
    if let Some(pair) = layers.windows(2).find(|p| p[0].depth_cm == p[1].depth_cm) {
        return Err(KrigingError::DuplicateDepth(pair[0].depth_cm));
    }
    Ok(MoistureVolume { geometry, layers })
}
