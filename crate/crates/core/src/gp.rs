//! Marginal likelihood, chunked hyperparameter fitting, and exact posterior
//! conditioning of the spatiotemporal Gaussian process.
//!
//! Data are modeled zero-mean; per-station offsets are absorbed by the
//! station-mean kernel term rather than an explicit mean function. Fitting
//! maximizes the sum of per-chunk marginal likelihoods (chunks are modeled as
//! independent processes with shared hyperparameters) by L-BFGS in
//! log-parameter space with analytic gradients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom_time::{Location, TimeStamp};
use crate::kernels::{gram, preset, preset_noise_sd, KernelSpec, PresetName};
use crate::linalg::{cholesky_with_jitter, symmetrize};

/// One temperature reading, referencing a station by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub station: usize,
    pub time: TimeStamp,
    pub temp_c: f64,
}

/// A set of stations and their observations. Per-station timestamps are
/// strictly increasing; temperatures are finite.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    stations: Vec<Location>,
    observations: Vec<Observation>,
}

impl Dataset {
    pub fn new(stations: Vec<Location>, observations: Vec<Observation>) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::invalid("dataset needs at least one station"));
        }
        let mut ids: Vec<&str> = stations.iter().map(|s| s.station_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != stations.len() {
            return Err(Error::invalid("station ids must be unique"));
        }
        let mut last_time: Vec<Option<f64>> = vec![None; stations.len()];
        for o in &observations {
            if o.station >= stations.len() {
                return Err(Error::invalid("observation references unknown station"));
            }
            if !o.temp_c.is_finite() || !o.time.0.is_finite() {
                return Err(Error::invalid("observations must be finite"));
            }
            if let Some(prev) = last_time[o.station] {
                if o.time.0 <= prev {
                    return Err(Error::invalid(format!(
                        "timestamps for station {} must be strictly increasing",
                        stations[o.station].station_id
                    )));
                }
            }
            last_time[o.station] = Some(o.time.0);
        }
        Ok(Dataset {
            stations,
            observations,
        })
    }

    /// Build from per-station series (each sorted by time).
    pub fn from_series(series: Vec<(Location, Vec<(TimeStamp, f64)>)>) -> Result<Self> {
        let stations: Vec<Location> = series.iter().map(|(l, _)| l.clone()).collect();
        let mut observations = Vec::new();
        for (si, (_, pts)) in series.into_iter().enumerate() {
            for (t, v) in pts {
                observations.push(Observation {
                    station: si,
                    time: t,
                    temp_c: v,
                });
            }
        }
        Dataset::new(stations, observations)
    }

    pub fn stations(&self) -> &[Location] {
        &self.stations
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.station_id == id)
    }

    pub fn station_series(&self, idx: usize) -> Vec<(TimeStamp, f64)> {
        self.observations
            .iter()
            .filter(|o| o.station == idx)
            .map(|o| (o.time, o.temp_c))
            .collect()
    }

    /// All observations as (location, time) points plus the value vector.
    pub fn points_values(&self) -> (Vec<(Location, TimeStamp)>, DVector<f64>) {
        let pts: Vec<(Location, TimeStamp)> = self
            .observations
            .iter()
            .map(|o| (self.stations[o.station].clone(), o.time))
            .collect();
        let y = DVector::from_iterator(
            self.observations.len(),
            self.observations.iter().map(|o| o.temp_c),
        );
        (pts, y)
    }

    /// Observations with `t0 <= t <= t1`, keeping the full station table.
    pub fn slice_time(&self, t0: f64, t1: f64) -> Dataset {
        Dataset {
            stations: self.stations.clone(),
            observations: self
                .observations
                .iter()
                .filter(|o| o.time.0 >= t0 && o.time.0 <= t1)
                .cloned()
                .collect(),
        }
    }

    /// Drop a station and its observations (hidden-station experiments).
    pub fn without_station(&self, idx: usize) -> Result<Dataset> {
        if idx >= self.stations.len() {
            return Err(Error::invalid("station index out of range"));
        }
        let stations: Vec<Location> = self
            .stations
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, s)| s.clone())
            .collect();
        let observations = self
            .observations
            .iter()
            .filter(|o| o.station != idx)
            .map(|o| Observation {
                station: if o.station > idx {
                    o.station - 1
                } else {
                    o.station
                },
                time: o.time,
                temp_c: o.temp_c,
            })
            .collect();
        Dataset::new(stations, observations)
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for o in &self.observations {
            lo = lo.min(o.time.0);
            hi = hi.max(o.time.0);
        }
        if lo.is_finite() {
            Some((lo, hi))
        } else {
            None
        }
    }
}

/// A fitted model: kernel plus measurement-noise variance and fit metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedGP {
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub chunk_count: usize,
    pub converged: bool,
    /// Accepted objective values per iteration of the winning start.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl FittedGP {
    pub fn new(kernel: KernelSpec, noise_var: f64) -> Result<Self> {
        kernel.validate()?;
        if !(noise_var.is_finite() && noise_var > 0.0) {
            return Err(Error::invalid("noise variance must be positive"));
        }
        Ok(FittedGP {
            kernel,
            noise_var,
            log_likelihood: f64::NAN,
            iterations: 0,
            chunk_count: 0,
            converged: true,
            objective_trace: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<FittedGP> {
        let fit: FittedGP = serde_json::from_str(s)?;
        fit.kernel.validate()?;
        if !(fit.noise_var.is_finite() && fit.noise_var > 0.0) {
            return Err(Error::invalid("noise variance must be positive"));
        }
        Ok(fit)
    }
}

/// Multivariate-normal posterior over query points.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub points: Vec<(Location, TimeStamp)>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Log marginal likelihood `log N(y | 0, K + noise I)` and its gradient with
/// respect to the log of every kernel hyperparameter, followed by the log
/// noise variance as the final entry.
pub fn log_marginal_likelihood(
    kernel: &KernelSpec,
    noise_var: f64,
    data: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    let (pts, y) = data.points_values();
    lml_points(kernel, noise_var, &pts, &y)
}

fn lml_points(
    kernel: &KernelSpec,
    noise_var: f64,
    pts: &[(Location, TimeStamp)],
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::invalid("noise variance must be positive"));
    }
    let n = pts.len();
    if n == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let k = gram(kernel, pts, noise_var, true)?;
    let (chol, _jitter) = cholesky_with_jitter(&k)?;
    let alpha = chol.solve(y);
    let mut logdet = 0.0;
    {
        let l = chol.l_dirty();
        for i in 0..n {
            logdet += l[(i, i)].ln();
        }
    }
    logdet *= 2.0;
    let value =
        -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // A = alpha alpha^T - K^{-1}; gradient_j = 1/2 tr(A dK/dtheta_j).
    // K^{-1} = L^{-T} L^{-1} via a triangular solve against the identity.
    let eye = DMatrix::<f64>::identity(n, n);
    let linv = chol
        .l_dirty()
        .solve_lower_triangular(&eye)
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let kinv = linv.transpose() * &linv;

    let n_kernel = kernel.n_free_params();
    let mut grad = vec![0.0; n_kernel + 1];
    let mut pair_grad = vec![0.0; n_kernel];
    let mut trace_a = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let a_ij = alpha[i] * alpha[j] - kinv[(i, j)];
            let w = if i == j { 0.5 } else { 1.0 };
            kernel.eval_grad(&pts[i].0, &pts[j].0, pts[i].1, pts[j].1, &mut pair_grad);
            for (g, pg) in grad[..n_kernel].iter_mut().zip(&pair_grad) {
                *g += w * a_ij * pg;
            }
            if i == j {
                trace_a += a_ij;
            }
        }
    }
    // dK/d(log noise_var) = noise_var * I.
    grad[n_kernel] = 0.5 * trace_a * noise_var;
    Ok((value, grad))
}

/// Options controlling what enters the query-side covariance.
#[derive(Debug, Clone, Copy)]
pub struct ConditionOptions {
    /// Include the measurement-noise variance on the query diagonal, so
    /// posteriors target measured rather than latent temperatures.
    pub noise_in_query: bool,
    /// Include the station-mean term between query points. Disable when the
    /// offset is modeled explicitly (the constrained sampler does).
    pub station_mean_in_query: bool,
}

impl Default for ConditionOptions {
    fn default() -> Self {
        ConditionOptions {
            noise_in_query: true,
            station_mean_in_query: true,
        }
    }
}

/// Exact multivariate-normal conditioning of the GP on observed data.
///
/// `mean = K_mo (K_oo + noise I)^{-1} y`, `cov = K_mm - K_mo (...)^{-1} K_mo^T`,
/// solved through the Cholesky factor, never an explicit inverse. An empty
/// `nearby` set returns the prior.
pub fn condition(
    fit: &FittedGP,
    nearby: &Dataset,
    query: &[(Location, TimeStamp)],
    opts: ConditionOptions,
) -> Result<GaussianPosterior> {
    fit.kernel.validate()?;
    if query.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    let query_kernel = if opts.station_mean_in_query {
        fit.kernel.clone()
    } else {
        fit.kernel
            .without_station_mean()
            .ok_or_else(|| Error::invalid("kernel is only a station-mean term"))?
    };
    let mut k_mm = gram(&query_kernel, query, fit.noise_var, opts.noise_in_query)?;

    if nearby.n_obs() == 0 {
        symmetrize(&mut k_mm);
        return Ok(GaussianPosterior {
            points: query.to_vec(),
            mean: DVector::zeros(query.len()),
            cov: k_mm,
        });
    }

    let (obs_pts, y) = nearby.points_values();
    let sigma_oo = gram(&fit.kernel, &obs_pts, fit.noise_var, true)?;
    let (chol, _jitter) = cholesky_with_jitter(&sigma_oo)?;

    let m = query.len();
    let n = obs_pts.len();
    let mut k_mo = DMatrix::<f64>::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            k_mo[(i, j)] = fit
                .kernel
                .eval(&query[i].0, &obs_pts[j].0, query[i].1, obs_pts[j].1);
        }
    }

    let alpha = chol.solve(&y);
    let mean = &k_mo * &alpha;
    let v = chol
        .l_dirty()
        .solve_lower_triangular(&k_mo.transpose())
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let mut cov = k_mm - v.transpose() * &v;
    symmetrize(&mut cov);
    Ok(GaussianPosterior {
        points: query.to_vec(),
        mean,
        cov,
    })
}

/// Independent draws from a Gaussian posterior; one row per draw.
/// Reproducible for a given seed. A posterior with zero covariance yields
/// the mean in every row.
pub fn sample_posterior(post: &GaussianPosterior, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    let dim = post.dim();
    let mut out = DMatrix::<f64>::zeros(n, dim);
    let trace = post.cov.trace();
    if trace <= 0.0 {
        for r in 0..n {
            for c in 0..dim {
                out[(r, c)] = post.mean[c];
            }
        }
        return Ok(out);
    }
    let (chol, _jitter) = cholesky_with_jitter(&post.cov)?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DVector::<f64>::zeros(dim);
    for r in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let x = &l * &z + &post.mean;
        for c in 0..dim {
            out[(r, c)] = x[c];
        }
    }
    Ok(out)
}

/// Windowed predictions over a long grid.
///
/// Each grid point is predicted by the window in which it sits farthest from
/// an edge (ties go to the earlier window), so every point has exactly one
/// source window.
#[derive(Debug, Clone)]
pub struct WindowedPrediction {
    pub windows: Vec<GaussianPosterior>,
    /// Conditioning span (start, end) per window, in grid hours.
    pub window_spans: Vec<(f64, f64)>,
    /// grid index -> (window index, index within that window's posterior).
    pub assignment: Vec<(usize, usize)>,
}

impl WindowedPrediction {
    pub fn stitched_mean(&self) -> Vec<f64> {
        self.assignment
            .iter()
            .map(|&(w, i)| self.windows[w].mean[i])
            .collect()
    }

    pub fn stitched_var(&self) -> Vec<f64> {
        self.assignment
            .iter()
            .map(|&(w, i)| self.windows[w].cov[(i, i)])
            .collect()
    }

    /// Grid indices assigned to window `w`, with their local positions.
    pub fn window_members(&self, w: usize) -> Vec<(usize, usize)> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &(wi, _))| wi == w)
            .map(|(g, &(_, l))| (g, l))
            .collect()
    }
}

/// Lay out overlapping spans of `window_days` covering `[t0, t1]`, stepping by
/// `window_days - overlap_days`; the final span is pulled back so it ends at
/// `t1`.
pub(crate) fn window_spans(
    t0: f64,
    t1: f64,
    window_days: f64,
    overlap_days: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(window_days > 0.0 && overlap_days >= 0.0 && overlap_days < window_days) {
        return Err(Error::invalid(
            "need 0 <= overlap_days < window_days and window_days > 0",
        ));
    }
    let w = window_days * 24.0;
    let step = (window_days - overlap_days) * 24.0;
    if t1 - t0 <= w {
        return Ok(vec![(t0, t1)]);
    }
    let mut spans = Vec::new();
    let mut s = t0;
    while s + w < t1 {
        spans.push((s, s + w));
        s += step;
    }
    spans.push((t1 - w, t1));
    Ok(spans)
}

/// Assign each grid time to the span in which it is farthest from an edge.
pub(crate) fn assign_to_spans(grid: &[TimeStamp], spans: &[(f64, f64)]) -> Result<Vec<usize>> {
    grid.iter()
        .map(|t| {
            let mut best: Option<(usize, f64)> = None;
            for (w, &(s, e)) in spans.iter().enumerate() {
                let d = (t.0 - s).min(e - t.0);
                if d >= 0.0 {
                    match best {
                        Some((_, bd)) if bd >= d => {}
                        _ => best = Some((w, d)),
                    }
                }
            }
            best.map(|(w, _)| w).ok_or_else(|| {
                Error::invalid(format!("grid point {} uncovered by any window", t.0))
            })
        })
        .collect()
}

/// Predict the target station over a grid using overlapping conditioning
/// windows (the long-series workhorse behind unconstrained prediction).
pub fn predict_windows(
    fit: &FittedGP,
    nearby: &Dataset,
    target: &Location,
    grid: &[TimeStamp],
    window_days: f64,
    overlap_days: f64,
    opts: ConditionOptions,
) -> Result<WindowedPrediction> {
    if grid.is_empty() {
        return Err(Error::invalid("empty grid"));
    }
    let (lo, hi) = nearby
        .time_range()
        .ok_or_else(|| Error::invalid("nearby dataset has no observations"))?;
    let g0 = grid[0].0;
    let g1 = grid[grid.len() - 1].0;
    if g0 < lo - 24.0 || g1 > hi + 24.0 {
        return Err(Error::invalid(
            "grid extends more than a day beyond the nearby data range",
        ));
    }
    // Span the union of grid and data so a single window sees all data.
    let spans = window_spans(g0.min(lo), g1.max(hi), window_days, overlap_days)?;
    let span_of_grid = assign_to_spans(grid, &spans)?;

    // Local (per-window) query lists in grid order.
    let mut queries: Vec<Vec<usize>> = vec![Vec::new(); spans.len()];
    let mut assignment = vec![(0usize, 0usize); grid.len()];
    for (g, &w) in span_of_grid.iter().enumerate() {
        assignment[g] = (w, queries[w].len());
        queries[w].push(g);
    }

    let windows: Vec<Result<GaussianPosterior>> = spans
        .par_iter()
        .zip(queries.par_iter())
        .map(|(&(s, e), q)| {
            let local = nearby.slice_time(s, e);
            let pts: Vec<(Location, TimeStamp)> =
                q.iter().map(|&g| (target.clone(), grid[g])).collect();
            if pts.is_empty() {
                return Ok(GaussianPosterior {
                    points: Vec::new(),
                    mean: DVector::zeros(0),
                    cov: DMatrix::zeros(0, 0),
                });
            }
            condition(fit, &local, &pts, opts)
        })
        .collect();
    let windows: Result<Vec<GaussianPosterior>> = windows.into_iter().collect();
    Ok(WindowedPrediction {
        windows: windows?,
        window_spans: spans,
        assignment,
    })
}

/// Options for [`fit_hyperparameters`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub chunk_days: f64,
    pub max_iters: usize,
    /// Relative objective-change tolerance for convergence.
    pub tol: f64,
    /// Number of starts; the first uses the heuristic (or provided) init,
    /// the rest perturb it log-uniformly within one decade.
    pub multi_starts: usize,
    pub seed: u64,
    /// Natural-space kernel hyperparameters to start from (hyper_vector order).
    pub init: Option<Vec<f64>>,
    pub init_noise_sd: Option<f64>,
    /// Guard: refuse chunks whose gram would exceed this many points.
    pub max_chunk_points: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            chunk_days: 10.0,
            max_iters: 100,
            tol: 1e-7,
            multi_starts: 5,
            seed: 0,
            init: None,
            init_noise_sd: None,
            max_chunk_points: 3000,
        }
    }
}

struct Chunk {
    pts: Vec<(Location, TimeStamp)>,
    y: DVector<f64>,
}

fn split_chunks(data: &Dataset, chunk_days: f64, cap: usize) -> Result<(Vec<Chunk>, usize)> {
    if !(chunk_days > 0.0) {
        return Err(Error::invalid("chunk_days must be positive"));
    }
    let span = chunk_days * 24.0;
    let mut groups: std::collections::BTreeMap<i64, Vec<&Observation>> = Default::default();
    for o in data.observations() {
        let c = (o.time.0 / span).floor() as i64;
        groups.entry(c).or_default().push(o);
    }
    let mut chunks = Vec::new();
    let mut skipped = 0usize;
    for (_, obs) in groups {
        if obs.len() <= 1 {
            skipped += 1;
            continue;
        }
        if obs.len() > cap {
            return Err(Error::invalid(format!(
                "chunk holds {} observations, above the {cap}-point guard; \
                 raise max_chunk_points or shrink chunk_days",
                obs.len()
            )));
        }
        let pts = obs
            .iter()
            .map(|o| (data.stations()[o.station].clone(), o.time))
            .collect();
        let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.temp_c));
        chunks.push(Chunk { pts, y });
    }
    if chunks.is_empty() {
        return Err(Error::invalid(
            "no usable chunks (all have <= 1 observation)",
        ));
    }
    Ok((chunks, skipped))
}

/// Sum of per-chunk marginal likelihoods and the stacked gradient.
fn chunked_objective(
    kernel: &KernelSpec,
    noise_var: f64,
    chunks: &[Chunk],
) -> Option<(f64, Vec<f64>)> {
    let per: Vec<Option<(f64, Vec<f64>)>> = chunks
        .par_iter()
        .map(|c| lml_points(kernel, noise_var, &c.pts, &c.y).ok())
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; kernel.n_free_params() + 1];
    for item in per {
        let (v, g) = item?;
        total += v;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Some((total, grad))
}

/// Residual standard deviation after removing per-station means; drives the
/// heuristic initialization.
fn residual_sd(data: &Dataset) -> f64 {
    let mut sums: Vec<(f64, usize)> = vec![(0.0, 0); data.stations().len()];
    for o in data.observations() {
        sums[o.station].0 += o.temp_c;
        sums[o.station].1 += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .map(|&(s, n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let mut ss = 0.0;
    let mut n = 0usize;
    for o in data.observations() {
        let r = o.temp_c - means[o.station];
        ss += r * r;
        n += 1;
    }
    if n > 1 {
        (ss / n as f64).sqrt().max(0.5)
    } else {
        1.0
    }
}

fn heuristic_init(kernel: &KernelSpec, data: &Dataset) -> Vec<f64> {
    let sd = residual_sd(data);
    let hv = kernel.hyper_vector();
    // Split the signal variance across the time-variance components.
    let n_var = hv
        .iter()
        .filter(|h| h.name.ends_with(".var"))
        .count()
        .max(1);
    hv.iter()
        .map(|h| {
            let name = h.name.as_str();
            if name.ends_with(".var") {
                sd * sd / n_var as f64
            } else if name.starts_with("se_space") {
                100.0
            } else if name.ends_with(".alpha") {
                1.0
            } else if name.starts_with("periodic24") && name.ends_with(".ell") {
                0.8
            } else {
                // temporal lengthscales
                3.0
            }
        })
        .collect()
}

/// Maximize the chunked marginal likelihood over log hyperparameters.
///
/// Deterministic for a given seed, data, and options. Non-convergence after
/// `max_iters` returns the best iterate flagged `converged: false`.
pub fn fit_hyperparameters(
    preset_name: PresetName,
    data: &Dataset,
    opts: &FitOptions,
) -> Result<FittedGP> {
    fit_kernel(preset(preset_name), preset_noise_sd(preset_name), data, opts)
}

/// Same as [`fit_hyperparameters`] but starting from an explicit kernel tree.
pub fn fit_kernel(
    template: KernelSpec,
    default_noise_sd: f64,
    data: &Dataset,
    opts: &FitOptions,
) -> Result<FittedGP> {
    template.validate()?;
    let (chunks, _skipped) = split_chunks(data, opts.chunk_days, opts.max_chunk_points)?;
    let n_kernel = template.n_free_params();

    let base_init: Vec<f64> = match &opts.init {
        Some(v) => {
            if v.len() != n_kernel {
                return Err(Error::invalid(format!(
                    "init has {} values, kernel has {n_kernel} free parameters",
                    v.len()
                )));
            }
            v.clone()
        }
        None => heuristic_init(&template, data),
    };
    let noise_sd0 = opts.init_noise_sd.unwrap_or(default_noise_sd);
    if !(noise_sd0 > 0.0) {
        return Err(Error::invalid("initial noise sd must be positive"));
    }

    let mut log_init = base_init.iter().map(|v| v.ln()).collect::<Vec<f64>>();
    log_init.push((noise_sd0 * noise_sd0).ln());

    let objective = |logx: &[f64]| -> Option<(f64, Vec<f64>)> {
        if logx.iter().any(|v| !v.is_finite() || v.abs() > 16.0) {
            return None;
        }
        let mut k = template.clone();
        let vals: Vec<f64> = logx[..n_kernel].iter().map(|v| v.exp()).collect();
        k.set_free_params(&vals).ok()?;
        let noise_var = logx[n_kernel].exp();
        chunked_objective(&k, noise_var, &chunks)
    };

    let mut best: Option<LbfgsOutcome> = None;
    for start in 0..opts.multi_starts.max(1) {
        let mut x0 = log_init.clone();
        if start > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(start as u64));
            for xi in x0.iter_mut() {
                // One decade around the heuristic scale.
                let u: f64 = rng.random_range(-1.0..1.0);
                *xi += u * std::f64::consts::LN_10;
            }
        }
        if let Some(out) = lbfgs_maximize(&objective, &x0, opts.max_iters, opts.tol) {
            let better = match &best {
                None => true,
                Some(b) => out.f > b.f,
            };
            if better {
                best = Some(out);
            }
        }
    }
    let best = best.ok_or_else(|| {
        Error::numerical("hyperparameter fit failed: no start produced a finite objective")
    })?;

    let mut kernel = template;
    let vals: Vec<f64> = best.x[..n_kernel].iter().map(|v| v.exp()).collect();
    kernel.set_free_params(&vals)?;
    let noise_var = best.x[n_kernel].exp();
    Ok(FittedGP {
        kernel,
        noise_var,
        log_likelihood: best.f,
        iterations: best.iterations,
        chunk_count: chunks.len(),
        converged: best.converged,
        objective_trace: best.trace,
    })
}

struct LbfgsOutcome {
    x: Vec<f64>,
    f: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Plain L-BFGS with backtracking Armijo line search, maximizing `f`.
/// Returns None if the start point has no finite objective.
fn lbfgs_maximize(
    f: &dyn Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
    x0: &[f64],
    max_iters: usize,
    tol: f64,
) -> Option<LbfgsOutcome> {
    const MEMORY: usize = 8;
    const C1: f64 = 1e-4;
    let mut x = x0.to_vec();
    let (mut fx, mut gx) = f(&x)?;
    let mut trace = vec![fx];
    let mut history: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut converged = false;
    let mut iters = 0usize;

    for it in 0..max_iters {
        iters = it + 1;
        let gnorm = gx.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm < 1e-4 {
            converged = true;
            break;
        }
        // Two-loop recursion on the ascent problem (direction along +g).
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, yv, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(yv) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, yv, _)) = history.back() {
            let sy = dot(s, yv);
            let yy = dot(yv, yv);
            if sy > 0.0 && yy > 0.0 {
                let scale = sy / yy;
                for qi in q.iter_mut() {
                    *qi *= scale;
                }
            }
        }
        for ((s, yv, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(yv, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir = q;
        let mut dg = dot(&dir, &gx);
        if !(dg > 0.0) {
            // Fall back to steepest ascent.
            dir = gx.clone();
            dg = dot(&dir, &gx);
            history.clear();
        }

        // Trust step lengths in log space; cap the infinity norm at 1.
        let dmax = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let mut step = if history.is_empty() {
            (1.0 / dmax).min(1.0)
        } else {
            1.0
        };
        if step * dmax > 1.0 {
            step = 1.0 / dmax;
        }

        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for _ in 0..30 {
            let xt: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            if let Some((ft, gt)) = f(&xt) {
                if ft >= fx + C1 * step * dg {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xt, ft, gt)) = accepted else {
            converged = true; // no ascent possible along this direction
            break;
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        // Curvature pair for the equivalent minimization of -f.
        let yv: Vec<f64> = gx.iter().zip(&gt).map(|(old, new)| old - new).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }
        let rel_change = (ft - fx).abs() / (1.0 + fx.abs());
        x = xt;
        fx = ft;
        gx = gt;
        trace.push(fx);
        if rel_change < tol {
            converged = true;
            break;
        }
    }
    Some(LbfgsOutcome {
        x,
        f: fx,
        iterations: iters,
        converged,
        trace,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
