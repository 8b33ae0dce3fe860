//! Variograms, error metrics with their model-expected counterparts, summary
//! statistics under varying measurement hour, and measurement-hour inference
//! via concordance.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom_time::{build_daysets, extract_extrema, DailyExtrema, TimeStamp};
use crate::gp::{predict_windows, Dataset, FittedGP, GaussianPosterior, WindowedPrediction};
use crate::linalg::cholesky_with_jitter;
use crate::smoothhmc::{impute_station, ImputeOptions};

/// One lag bin of an empirical semi-variogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariogramBin {
    /// Bin center in hours.
    pub lag_hr: f64,
    pub gamma: f64,
    pub pairs: usize,
}

/// Empirical semi-variogram between two stations (or one with itself).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariogramEstimate {
    pub station_a: String,
    pub station_b: String,
    pub distance_km: f64,
    pub bins: Vec<VariogramBin>,
}

/// Semi-variogram estimate: half the average squared difference between
/// observations separated by the stations' distance in space and a binned
/// lag in time. Per-station means are subtracted first, so the estimate is
/// net of station offsets. Bins are centered on multiples of `bin_width_hr`;
/// empty bins are omitted; self-pairs are excluded.
pub fn empirical_variogram(
    data: &Dataset,
    station_a: &str,
    station_b: &str,
    bin_width_hr: f64,
    max_lag_hr: f64,
) -> Result<VariogramEstimate> {
    if !(bin_width_hr > 0.0 && max_lag_hr > 0.0) {
        return Err(Error::invalid("bin width and max lag must be positive"));
    }
    let ia = data
        .station_index(station_a)
        .ok_or_else(|| Error::invalid(format!("unknown station {station_a}")))?;
    let ib = data
        .station_index(station_b)
        .ok_or_else(|| Error::invalid(format!("unknown station {station_b}")))?;
    let sa = data.station_series(ia);
    let sb = data.station_series(ib);
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::invalid("need at least two observations per station"));
    }
    let mean = |s: &[(TimeStamp, f64)]| s.iter().map(|(_, v)| v).sum::<f64>() / s.len() as f64;
    let (ma, mb) = (mean(&sa), mean(&sb));

    let n_bins = (max_lag_hr / bin_width_hr).round() as usize + 1;
    let mut sums = vec![0.0f64; n_bins];
    let mut counts = vec![0usize; n_bins];
    let same = ia == ib;
    for (i, (ta, va)) in sa.iter().enumerate() {
        let start = if same { i + 1 } else { 0 };
        for (tb, vb) in sb.iter().skip(start) {
            let lag = (ta.0 - tb.0).abs();
            let bin = (lag / bin_width_hr).round() as usize;
            if bin >= n_bins || (lag - bin as f64 * bin_width_hr).abs() > bin_width_hr / 2.0 {
                continue;
            }
            let d = (va - ma) - (vb - mb);
            sums[bin] += d * d;
            counts[bin] += 1;
        }
    }
    let bins = (0..n_bins)
        .filter(|&b| counts[b] > 0)
        .map(|b| VariogramBin {
            lag_hr: b as f64 * bin_width_hr,
            gamma: 0.5 * sums[b] / counts[b] as f64,
            pairs: counts[b],
        })
        .collect();
    let distance_km = data.stations()[ia].distance_km(&data.stations()[ib]);
    Ok(VariogramEstimate {
        station_a: station_a.to_string(),
        station_b: station_b.to_string(),
        distance_km,
        bins,
    })
}

/// Realized and model-expected error summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Variance of (truth - posterior mean); insensitive to constant offsets.
    pub var_err: f64,
    /// Mean over draws of the variance of (draw - posterior mean).
    pub var_err_expected: f64,
    /// Mean squared error of the posterior mean.
    pub mse: f64,
    /// Mean over draws of the MSE of (draw - posterior mean).
    pub mse_expected: f64,
    pub n: usize,
}

fn pop_var(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Error metrics of a prediction against withheld truth, with model-expected
/// counterparts computed from posterior draws (`draws`: one row per draw,
/// aligned with `posterior_mean`).
pub fn error_metrics(
    truth: &[f64],
    posterior_mean: &[f64],
    draws: &DMatrix<f64>,
) -> Result<ErrorReport> {
    let n = truth.len();
    if n == 0 || posterior_mean.len() != n || draws.ncols() != n {
        return Err(Error::invalid("dimension mismatch in error_metrics"));
    }
    if draws.nrows() == 0 {
        return Err(Error::invalid("expected variants need at least one draw"));
    }
    let errs: Vec<f64> = truth
        .iter()
        .zip(posterior_mean)
        .map(|(t, m)| t - m)
        .collect();
    let mse = errs.iter().map(|e| e * e).sum::<f64>() / n as f64;
    let var_err = pop_var(errs.iter().cloned());

    let k = draws.nrows();
    let mut mse_expected = 0.0;
    let mut var_err_expected = 0.0;
    for r in 0..k {
        let row_errs = (0..n).map(|c| draws[(r, c)] - posterior_mean[c]);
        mse_expected += row_errs.clone().map(|e| e * e).sum::<f64>() / n as f64;
        var_err_expected += pop_var(row_errs);
    }
    Ok(ErrorReport {
        var_err,
        var_err_expected: var_err_expected / k as f64,
        mse,
        mse_expected: mse_expected / k as f64,
        n,
    })
}

/// The four Fig-3 style statistics for one measurement hour.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SummaryStats {
    pub avg_tx: f64,
    pub avg_tn: f64,
    pub avg_abs_dtx: f64,
    pub avg_abs_dtn: f64,
    pub n_days: usize,
}

fn stats_from_extrema(ext: &[DailyExtrema]) -> Result<SummaryStats> {
    if ext.len() < 2 {
        return Err(Error::invalid("need at least two full measurement windows"));
    }
    let n = ext.len() as f64;
    let avg_tx = ext.iter().map(|e| e.tx).sum::<f64>() / n;
    let avg_tn = ext.iter().map(|e| e.tn).sum::<f64>() / n;
    let mut dtx = 0.0;
    let mut dtn = 0.0;
    for w in ext.windows(2) {
        dtx += (w[1].tx - w[0].tx).abs();
        dtn += (w[1].tn - w[0].tn).abs();
    }
    Ok(SummaryStats {
        avg_tx,
        avg_tn,
        avg_abs_dtx: dtx / (n - 1.0),
        avg_abs_dtn: dtn / (n - 1.0),
        n_days: ext.len(),
    })
}

/// Summary statistics of a series re-windowed at one measurement hour.
pub fn summary_stats_hour(
    series: &[(TimeStamp, f64)],
    meas_hour: u8,
    epoch_offset: f64,
) -> Result<SummaryStats> {
    let grid: Vec<TimeStamp> = series.iter().map(|(t, _)| *t).collect();
    let part = build_daysets(&grid, meas_hour, epoch_offset)?;
    let ext = extract_extrema(series, &part.windows)?;
    stats_from_extrema(&ext)
}

/// Re-window the same series at every measurement hour 0..=23.
pub fn summary_scan(
    series: &[(TimeStamp, f64)],
    epoch_offset: f64,
) -> Result<Vec<(u8, SummaryStats)>> {
    (0..24u8)
        .map(|h| Ok((h, summary_stats_hour(series, h, epoch_offset)?)))
        .collect()
}

/// Mean and standard deviation of each summary statistic across draws.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnvelopeStats {
    pub mean: SummaryStats,
    pub sd: SummaryStats,
}

/// Per-hour summary statistics of imputation draws (rows) on a grid, as a
/// mean and SD envelope across draws.
pub fn summary_envelope(
    draws: &DMatrix<f64>,
    grid: &[TimeStamp],
    epoch_offset: f64,
) -> Result<Vec<(u8, EnvelopeStats)>> {
    if draws.ncols() != grid.len() {
        return Err(Error::invalid("draws and grid dimensions differ"));
    }
    if draws.nrows() == 0 {
        return Err(Error::invalid("no draws"));
    }
    let hours: Vec<u8> = (0..24).collect();
    let per_hour: Vec<Result<(u8, EnvelopeStats)>> = hours
        .par_iter()
        .map(|&h| {
            let part = build_daysets(grid, h, epoch_offset)?;
            let mut acc: Vec<SummaryStats> = Vec::with_capacity(draws.nrows());
            let mut series: Vec<(TimeStamp, f64)> =
                grid.iter().map(|&t| (t, 0.0)).collect();
            for r in 0..draws.nrows() {
                for (c, s) in series.iter_mut().enumerate() {
                    s.1 = draws[(r, c)];
                }
                let ext = extract_extrema(&series, &part.windows)?;
                acc.push(stats_from_extrema(&ext)?);
            }
            let n = acc.len() as f64;
            let mean_of = |f: &dyn Fn(&SummaryStats) -> f64| acc.iter().map(|s| f(s)).sum::<f64>() / n;
            let sd_of = |f: &dyn Fn(&SummaryStats) -> f64, m: f64| {
                (acc.iter().map(|s| (f(s) - m) * (f(s) - m)).sum::<f64>() / n).sqrt()
            };
            let m_tx = mean_of(&|s| s.avg_tx);
            let m_tn = mean_of(&|s| s.avg_tn);
            let m_dtx = mean_of(&|s| s.avg_abs_dtx);
            let m_dtn = mean_of(&|s| s.avg_abs_dtn);
            let env = EnvelopeStats {
                mean: SummaryStats {
                    avg_tx: m_tx,
                    avg_tn: m_tn,
                    avg_abs_dtx: m_dtx,
                    avg_abs_dtn: m_dtn,
                    n_days: acc[0].n_days,
                },
                sd: SummaryStats {
                    avg_tx: sd_of(&|s| s.avg_tx, m_tx),
                    avg_tn: sd_of(&|s| s.avg_tn, m_tn),
                    avg_abs_dtx: sd_of(&|s| s.avg_abs_dtx, m_dtx),
                    avg_abs_dtn: sd_of(&|s| s.avg_abs_dtn, m_dtn),
                    n_days: acc[0].n_days,
                },
            };
            Ok((h, env))
        })
        .collect();
    per_hour.into_iter().collect()
}

/// Log-density of a candidate mean series under an unconstrained Gaussian
/// posterior: the concordance measure.
pub fn concordance(post: &GaussianPosterior, mu: &[f64]) -> Result<f64> {
    if mu.len() != post.dim() {
        return Err(Error::invalid("dimension mismatch in concordance"));
    }
    gaussian_logpdf(&post.mean, &post.cov, mu)
}

fn gaussian_logpdf(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let n = mean.len();
    let (chol, _) = cholesky_with_jitter(cov)?;
    let diff = DVector::from_iterator(n, x.iter().zip(mean.iter()).map(|(a, b)| a - b));
    let sol = chol
        .l_dirty()
        .solve_lower_triangular(&diff)
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    let quad: f64 = sol.iter().map(|v| v * v).sum();
    let mut logdet = 0.0;
    let l = chol.l_dirty();
    for i in 0..n {
        logdet += l[(i, i)].ln();
    }
    Ok(-0.5 * quad - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Concordance for windowed predictions: each window's center-assigned
/// coordinates are treated as an independent Gaussian, and their log-densities
/// are summed. `values` holds the candidate mean for a subset of grid indices.
pub fn concordance_windowed(
    pred: &WindowedPrediction,
    grid_indices: &[usize],
    values: &[f64],
) -> Result<f64> {
    if grid_indices.len() != values.len() {
        return Err(Error::invalid("indices/values length mismatch"));
    }
    let val_of: std::collections::HashMap<usize, f64> = grid_indices
        .iter()
        .cloned()
        .zip(values.iter().cloned())
        .collect();
    let mut total = 0.0;
    for w in 0..pred.windows.len() {
        // Grid indices assigned to this window that carry candidate values.
        let members: Vec<(usize, usize)> = pred
            .window_members(w)
            .into_iter()
            .filter(|(g, _)| val_of.contains_key(g))
            .collect();
        if members.is_empty() {
            continue;
        }
        let post = &pred.windows[w];
        let k = members.len();
        let mean = DVector::from_iterator(k, members.iter().map(|&(_, l)| post.mean[l]));
        let mut cov = DMatrix::<f64>::zeros(k, k);
        for (a, &(_, la)) in members.iter().enumerate() {
            for (b, &(_, lb)) in members.iter().enumerate() {
                cov[(a, b)] = post.cov[(la, lb)];
            }
        }
        let x: Vec<f64> = members.iter().map(|&(g, _)| val_of[&g]).collect();
        total += gaussian_logpdf(&mean, &cov, &x)?;
    }
    Ok(total)
}

/// One candidate measurement hour of a scan.
#[derive(Debug, Clone)]
pub struct HourScanEntry {
    pub hour: u8,
    pub delta: f64,
    pub converged: bool,
    /// Constrained posterior mean over `grid_indices`.
    pub constrained_mean: Vec<f64>,
    pub grid_indices: Vec<usize>,
}

/// Concordance scan over all 24 candidate measurement hours.
#[derive(Debug, Clone)]
pub struct HourScan {
    pub entries: Vec<HourScanEntry>,
}

impl HourScan {
    /// Hour with the highest concordance.
    pub fn best_hour(&self) -> u8 {
        self.entries
            .iter()
            .max_by(|a, b| a.delta.partial_cmp(&b.delta).unwrap())
            .map(|e| e.hour)
            .unwrap_or(0)
    }
}

/// Options for [`infer_measurement_hour`].
#[derive(Debug, Clone)]
pub struct HourScanOptions {
    /// Imputation options; `meas_hour` is overridden per candidate.
    pub impute: ImputeOptions,
    /// Unconstrained prediction window layout.
    pub predict_window_days: f64,
    pub predict_overlap_days: f64,
}

/// Impute under every candidate measurement hour and score each candidate by
/// the log-density of its constrained mean under the unconstrained posterior.
///
/// The extrema values are fixed (they are whatever the observer recorded);
/// only the window boundaries move with the assumed hour.
pub fn infer_measurement_hour(
    fit: &FittedGP,
    nearby: &Dataset,
    target_loc: &crate::geom_time::Location,
    extrema: &[DailyExtrema],
    grid: &[TimeStamp],
    opts: &HourScanOptions,
) -> Result<HourScan> {
    let unconstrained = predict_windows(
        fit,
        nearby,
        target_loc,
        grid,
        opts.predict_window_days,
        opts.predict_overlap_days,
        opts.impute.condition,
    )?;

    let hours: Vec<u8> = (0..24).collect();
    let entries: Vec<Result<HourScanEntry>> = hours
        .par_iter()
        .map(|&hour| {
            let mut io = opts.impute.clone();
            io.meas_hour = hour;
            let result = impute_station(fit, nearby, target_loc, extrema, grid, &io)?;
            let mean = result.draws.mean();
            let delta = concordance_windowed(&unconstrained, &result.grid_indices, &mean)?;
            Ok(HourScanEntry {
                hour,
                delta,
                converged: result.draws.diagnostics.converged,
                constrained_mean: mean,
                grid_indices: result.grid_indices,
            })
        })
        .collect();
    let entries: Result<Vec<HourScanEntry>> = entries.into_iter().collect();
    let entries = entries?;
    if entries.iter().any(|e| !e.delta.is_finite()) {
        return Err(Error::numerical("non-finite concordance in hour scan"));
    }
    Ok(HourScan { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom_time::Location;
    use crate::gp::{sample_posterior, Observation};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loc(id: &str, e: f64, n: f64) -> Location {
        Location::new(id, e, n).unwrap()
    }

    #[test]
    fn variogram_of_white_noise_is_flat_at_sigma2() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sigma = 1.5f64;
        let series: Vec<(TimeStamp, f64)> = (0..20_000)
            .map(|i| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                (TimeStamp(i as f64 * 0.5), sigma * z)
            })
            .collect();
        let data = Dataset::from_series(vec![(loc("a", 0.0, 0.0), series)]).unwrap();
        let est = empirical_variogram(&data, "a", "a", 1.0, 6.0).unwrap();
        assert!(!est.bins.is_empty());
        for b in &est.bins {
            assert!(b.pairs > 1000);
            assert!(
                (b.gamma - sigma * sigma).abs() < 0.15,
                "lag {} gamma {}",
                b.lag_hr,
                b.gamma
            );
            assert!(b.gamma >= 0.0);
        }
    }

    #[test]
    fn variogram_of_duplicated_series_is_zero_at_lag_zero() {
        let series: Vec<(TimeStamp, f64)> = (0..200)
            .map(|i| (TimeStamp(i as f64), (i as f64 * 0.37).sin() * 4.0 + 1.0))
            .collect();
        let data = Dataset::from_series(vec![
            (loc("a", 0.0, 0.0), series.clone()),
            (loc("b", 0.0, 0.0), series),
        ])
        .unwrap();
        let est = empirical_variogram(&data, "a", "b", 1.0, 5.0).unwrap();
        let lag0 = est.bins.iter().find(|b| b.lag_hr == 0.0).unwrap();
        assert!(lag0.gamma < 1e-20, "{}", lag0.gamma);
    }

    #[test]
    fn variogram_symmetric_in_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mk = |seed_off: f64| -> Vec<(TimeStamp, f64)> {
            (0..500)
                .map(|i| {
                    (
                        TimeStamp(i as f64),
                        (i as f64 * 0.21 + seed_off).sin() * 3.0 + rng.random::<f64>(),
                    )
                })
                .collect()
        };
        let data = Dataset::from_series(vec![
            (loc("a", 0.0, 0.0), mk(0.0)),
            (loc("b", 50.0, 10.0), mk(1.0)),
        ])
        .unwrap();
        let ab = empirical_variogram(&data, "a", "b", 1.0, 12.0).unwrap();
        let ba = empirical_variogram(&data, "b", "a", 1.0, 12.0).unwrap();
        assert_eq!(ab.bins.len(), ba.bins.len());
        for (x, y) in ab.bins.iter().zip(&ba.bins) {
            assert_relative_eq!(x.gamma, y.gamma, epsilon = 1e-12);
            assert_eq!(x.pairs, y.pairs);
        }
        assert_relative_eq!(ab.distance_km, ba.distance_km);
    }

    #[test]
    fn variogram_no_pairs_in_range_gives_empty_bins() {
        let s1: Vec<(TimeStamp, f64)> = vec![(TimeStamp(0.0), 1.0), (TimeStamp(1.0), 2.0)];
        let s2: Vec<(TimeStamp, f64)> = vec![(TimeStamp(500.0), 1.0), (TimeStamp(501.0), 2.0)];
        let data = Dataset::from_series(vec![
            (loc("a", 0.0, 0.0), s1),
            (loc("b", 10.0, 0.0), s2),
        ])
        .unwrap();
        let est = empirical_variogram(&data, "a", "b", 1.0, 48.0).unwrap();
        assert!(est.bins.is_empty());
    }

    #[test]
    fn error_metrics_basics() {
        let mean = vec![1.0, 2.0, 3.0, 4.0];
        let draws = DMatrix::from_row_slice(2, 4, &[1.1, 2.1, 2.9, 4.2, 0.9, 1.9, 3.1, 3.8]);
        // truth == mean
        let r = error_metrics(&mean, &mean, &draws).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.var_err, 0.0);
        // truth = mean + c
        let truth: Vec<f64> = mean.iter().map(|m| m + 2.5).collect();
        let r = error_metrics(&truth, &mean, &draws).unwrap();
        assert_relative_eq!(r.mse, 6.25, epsilon = 1e-12);
        assert_relative_eq!(r.var_err, 0.0, epsilon = 1e-12);
        // identity mse = var_err + mean_err^2
        let truth2 = vec![1.3, 1.8, 3.4, 4.4];
        let r = error_metrics(&truth2, &mean, &draws).unwrap();
        let me: f64 = truth2
            .iter()
            .zip(&mean)
            .map(|(t, m)| t - m)
            .sum::<f64>()
            / 4.0;
        assert_relative_eq!(r.mse, r.var_err + me * me, epsilon = 1e-12);
        // errors
        assert!(error_metrics(&truth2, &mean, &DMatrix::zeros(0, 4)).is_err());
        assert!(error_metrics(&truth2[..3], &mean, &draws).is_err());
    }

    #[test]
    fn error_metrics_self_calibration() {
        // Truth drawn from the posterior: realized mse is within the spread
        // of per-draw mses around their mean.
        let dim = 40;
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let d = (i as f64 - j as f64) / 5.0;
                cov[(i, j)] = 2.0 * (-d * d / 2.0).exp();
            }
            cov[(i, i)] += 0.1;
        }
        let mean = DVector::from_fn(dim, |i, _| (i as f64 * 0.3).sin());
        let post = GaussianPosterior {
            points: vec![],
            mean: mean.clone(),
            cov,
        };
        let draws = sample_posterior(&post, 3000, 77).unwrap();
        let truth_row = sample_posterior(&post, 1, 1234).unwrap();
        let truth: Vec<f64> = (0..dim).map(|c| truth_row[(0, c)]).collect();
        let mean_v: Vec<f64> = mean.iter().cloned().collect();
        let r = error_metrics(&truth, &mean_v, &draws).unwrap();
        // Spread of per-draw mse.
        let mut mses = Vec::new();
        for k in 0..draws.nrows() {
            let m = (0..dim)
                .map(|c| (draws[(k, c)] - mean_v[c]).powi(2))
                .sum::<f64>()
                / dim as f64;
            mses.push(m);
        }
        let sd = pop_var(mses.iter().cloned()).sqrt();
        assert!(
            (r.mse - r.mse_expected).abs() < 3.0 * sd,
            "mse {} vs expected {} (sd {sd})",
            r.mse,
            r.mse_expected
        );
    }

    #[test]
    fn summary_stats_constant_series() {
        let series: Vec<(TimeStamp, f64)> =
            (0..24 * 6).map(|h| (TimeStamp(h as f64), 7.25)).collect();
        for (h, s) in summary_scan(&series, 0.0).unwrap() {
            assert_eq!(s.avg_tx, 7.25, "hour {h}");
            assert_eq!(s.avg_tn, 7.25);
            assert_eq!(s.avg_abs_dtx, 0.0);
            assert_eq!(s.avg_abs_dtn, 0.0);
        }
    }

    #[test]
    fn measuring_after_the_peak_inflates_avg_tx() {
        // Amplitude-modulated diurnal cycle (alternating warm/cool days).
        // A measurement window closing just after the peak hour can contain
        // the tail of the previous (warmer) afternoon, inflating avg_tx; a
        // window closing at the trough hour always contains exactly one full
        // afternoon. Verified against a brute-force window scan.
        let peak_hour = 15.0;
        let series: Vec<(TimeStamp, f64)> = (0..24 * 20)
            .map(|h| {
                let t = h as f64;
                let day = (h / 24) as usize;
                let amp = if day % 2 == 0 { 10.0 } else { 4.0 };
                (
                    TimeStamp(t),
                    amp * (std::f64::consts::TAU * (t - peak_hour) / 24.0).cos(),
                )
            })
            .collect();
        let at_peakish = summary_stats_hour(&series, 17, 0.0).unwrap();
        let at_trough = summary_stats_hour(&series, 3, 0.0).unwrap();
        assert!(
            at_peakish.avg_tx > at_trough.avg_tx + 1.0,
            "peak-hour {} vs trough-hour {}",
            at_peakish.avg_tx,
            at_trough.avg_tx
        );
        // Brute-force oracle for the 17:00 windows.
        let mut oracle_tx = Vec::new();
        let mut end = 41.0;
        while end <= 479.0 {
            let vals: Vec<f64> = series
                .iter()
                .filter(|(t, _)| t.0 > end - 24.0 && t.0 <= end)
                .map(|&(_, v)| v)
                .collect();
            oracle_tx.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            end += 24.0;
        }
        let oracle_avg = oracle_tx.iter().sum::<f64>() / oracle_tx.len() as f64;
        assert_relative_eq!(at_peakish.avg_tx, oracle_avg, epsilon = 1e-9);
    }

    #[test]
    fn envelope_sd_collapses_for_identical_draws() {
        let grid: Vec<TimeStamp> = (0..24 * 4).map(|h| (TimeStamp(h as f64))).collect();
        let row: Vec<f64> = grid.iter().map(|t| (t.0 * 0.26).sin() * 5.0).collect();
        let mut draws = DMatrix::<f64>::zeros(10, grid.len());
        for r in 0..10 {
            for c in 0..grid.len() {
                draws[(r, c)] = row[c];
            }
        }
        let env = summary_envelope(&draws, &grid, 0.0).unwrap();
        assert_eq!(env.len(), 24);
        for (_, e) in env {
            assert!(e.sd.avg_tx.abs() < 1e-12);
            assert!(e.sd.avg_tn.abs() < 1e-12);
        }
    }

    #[test]
    fn concordance_is_maximized_at_the_mean() {
        let dim = 6;
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let d = (i as f64 - j as f64) / 2.0;
                cov[(i, j)] = 1.7 * (-d * d / 2.0).exp();
            }
            cov[(i, i)] += 0.05;
        }
        let mean = DVector::from_fn(dim, |i, _| i as f64 * 0.5);
        let post = GaussianPosterior {
            points: vec![],
            mean: mean.clone(),
            cov: cov.clone(),
        };
        let mean_v: Vec<f64> = mean.iter().cloned().collect();
        let at_mean = concordance(&post, &mean_v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let other: Vec<f64> = mean_v
                .iter()
                .map(|m| m + rng.random::<f64>() * 2.0 - 1.0)
                .collect();
            assert!(concordance(&post, &other).unwrap() <= at_mean);
        }
        // Shifting one whitened coordinate by +1 SD lowers delta by 1/2.
        let (chol, _) = cholesky_with_jitter(&cov).unwrap();
        let l = chol.l();
        for col in 0..dim {
            let shifted: Vec<f64> = (0..dim).map(|i| mean_v[i] + l[(i, col)]).collect();
            let d = concordance(&post, &shifted).unwrap();
            assert_relative_eq!(at_mean - d, 0.5, epsilon = 1e-8);
        }
    }

    #[test]
    fn concordance_invariant_under_simultaneous_permutation() {
        let dim = 5;
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] = 0.4f64.powi((i as i32 - j as i32).abs()) * 2.0;
            }
        }
        let mean = DVector::from_fn(dim, |i, _| (i * i) as f64 * 0.1);
        let mu: Vec<f64> = (0..dim).map(|i| 0.3 * i as f64 - 0.2).collect();
        let post = GaussianPosterior {
            points: vec![],
            mean: mean.clone(),
            cov: cov.clone(),
        };
        let d0 = concordance(&post, &mu).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut cov_p = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                cov_p[(i, j)] = cov[(perm[i], perm[j])];
            }
        }
        let mean_p = DVector::from_fn(dim, |i, _| mean[perm[i]]);
        let mu_p: Vec<f64> = (0..dim).map(|i| mu[perm[i]]).collect();
        let post_p = GaussianPosterior {
            points: vec![],
            mean: mean_p,
            cov: cov_p,
        };
        let d1 = concordance(&post_p, &mu_p).unwrap();
        assert_relative_eq!(d0, d1, epsilon = 1e-10);
    }

    #[test]
    fn windowed_concordance_sums_window_terms() {
        // Two stations, short series; windowed prediction with one window
        // equals plain concordance.
        let kernel = crate::kernels::KernelSpec::Product {
            children: vec![
                crate::kernels::KernelSpec::SeTime {
                    lengthscale_hr: 2.0,
                    variance: 4.0,
                },
                crate::kernels::KernelSpec::SeSpace {
                    lengthscale_km: 100.0,
                    variance: 1.0,
                },
            ],
        };
        let fit = FittedGP::new(kernel, 0.25).unwrap();
        let st = vec![loc("a", 0.0, 0.0), loc("b", 60.0, 0.0)];
        let obs = (0..40)
            .flat_map(|i| {
                vec![
                    Observation {
                        station: 0,
                        time: TimeStamp(i as f64),
                        temp_c: (i as f64 * 0.4).sin() * 2.0,
                    },
                    Observation {
                        station: 1,
                        time: TimeStamp(i as f64 + 0.5),
                        temp_c: (i as f64 * 0.4 + 0.2).sin() * 2.0,
                    },
                ]
            })
            .collect();
        let data = Dataset::new(st, obs).unwrap();
        let target = loc("m", 30.0, 10.0);
        let grid: Vec<TimeStamp> = (0..40).map(|h| TimeStamp(h as f64 + 0.25)).collect();
        let pred = predict_windows(
            &fit,
            &data,
            &target,
            &grid,
            30.0,
            5.0,
            crate::gp::ConditionOptions::default(),
        )
        .unwrap();
        assert_eq!(pred.windows.len(), 1);
        let mu: Vec<f64> = grid.iter().map(|t| (t.0 * 0.4).sin()).collect();
        let idx: Vec<usize> = (0..grid.len()).collect();
        let d_windowed = concordance_windowed(&pred, &idx, &mu).unwrap();
        let d_plain = concordance(&pred.windows[0], &mu).unwrap();
        assert_relative_eq!(d_windowed, d_plain, epsilon = 1e-10);
    }
}
