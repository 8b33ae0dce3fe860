//! File formats: station CSV, extrema CSV, run configuration, and the
//! plot-ready CSV emissions.
//!
//! Timestamps are ISO-8601 with an explicit offset at the file boundary and
//! are converted exactly once to fractional hours since the dataset epoch
//! (the local midnight of the earliest observation). All emissions use
//! shortest-roundtrip float formatting and are byte-deterministic given the
//! same inputs.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use chrono::{DateTime, Duration, FixedOffset, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::VariogramEstimate;
use crate::error::{Error, Result};
use crate::geom_time::{project_lonlat, unproject, DailyExtrema, TimeStamp};
use crate::gp::{ConditionOptions, Dataset, FitOptions, Observation};
use crate::kernels::PresetName;
use crate::smoothhmc::{ImputeOptions, SamplerConfig, TargetConfig};

/// Physical sanity gate on parsed temperatures, degrees C.
const TEMP_MIN: f64 = -90.0;
const TEMP_MAX: f64 = 60.0;

/// Station data plus the projection/epoch bookkeeping needed to write
/// timestamps and coordinates back out.
#[derive(Debug, Clone)]
pub struct StationTable {
    pub dataset: Dataset,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Local midnight of the earliest observation; hour 0 of the time axis.
    pub epoch: DateTime<FixedOffset>,
    pub ref_lon: f64,
    pub ref_lat: f64,
}

impl DatasetMeta {
    pub fn hours_of(&self, ts: &DateTime<FixedOffset>) -> f64 {
        let delta = ts.signed_duration_since(self.epoch);
        delta.num_milliseconds() as f64 / 3_600_000.0
    }

    pub fn timestamp_of(&self, hours: f64) -> DateTime<FixedOffset> {
        self.epoch + Duration::milliseconds((hours * 3_600_000.0).round() as i64)
    }

    /// Day index of a calendar date (days since the epoch date).
    pub fn day_index_of(&self, date: NaiveDate) -> i64 {
        date.signed_duration_since(self.epoch.date_naive()).num_days()
    }

    pub fn date_of_day(&self, day_index: i64) -> NaiveDate {
        self.epoch.date_naive() + Duration::days(day_index)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Read a station CSV (`station_id,lon_deg,lat_deg,timestamp,temp_c`) into a
/// validated dataset. Errors carry 1-based line numbers.
pub fn read_station_csv(path: &Path) -> Result<StationTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(1, format!("{e}")))?;
    {
        let headers = rdr.headers().map_err(|e| parse_err(1, format!("{e}")))?;
        let expect = ["station_id", "lon_deg", "lat_deg", "timestamp", "temp_c"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(parse_err(
                1,
                format!("expected header {expect:?}, got {got:?}"),
            ));
        }
    }

    struct Row {
        id: String,
        lon: f64,
        lat: f64,
        ts: DateTime<FixedOffset>,
        temp: f64,
        line: usize,
    }
    let mut rows: Vec<Row> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), format!("{e}")))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 5 {
            return Err(parse_err(line, format!("expected 5 fields, got {}", rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty station_id"));
        }
        let lon: f64 = rec[1]
            .parse()
            .map_err(|e| parse_err(line, format!("lon_deg: {e}")))?;
        let lat: f64 = rec[2]
            .parse()
            .map_err(|e| parse_err(line, format!("lat_deg: {e}")))?;
        let ts = DateTime::parse_from_rfc3339(&rec[3])
            .map_err(|e| parse_err(line, format!("timestamp: {e}")))?;
        let temp: f64 = rec[4]
            .parse()
            .map_err(|e| parse_err(line, format!("temp_c: {e}")))?;
        if !temp.is_finite() || !(TEMP_MIN..=TEMP_MAX).contains(&temp) {
            return Err(parse_err(
                line,
                format!("temp_c {temp} outside physical range [{TEMP_MIN}, {TEMP_MAX}]"),
            ));
        }
        if !lon.is_finite() || !lat.is_finite() {
            return Err(parse_err(line, "non-finite coordinates"));
        }
        rows.push(Row { id, lon, lat, ts, temp, line });
    }
    if rows.is_empty() {
        return Err(parse_err(2, "no observations"));
    }

    // Station table in order of first appearance; coordinates must agree.
    let mut station_order: Vec<String> = Vec::new();
    let mut coords: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for r in &rows {
        match coords.get(&r.id) {
            None => {
                station_order.push(r.id.clone());
                coords.insert(r.id.clone(), (r.lon, r.lat, r.line));
            }
            Some(&(lon, lat, _)) => {
                if (lon - r.lon).abs() > 1e-9 || (lat - r.lat).abs() > 1e-9 {
                    return Err(parse_err(
                        r.line,
                        format!("station {} moved coordinates mid-file", r.id),
                    ));
                }
            }
        }
    }
    let ref_lon = station_order.iter().map(|s| coords[s].0).sum::<f64>() / station_order.len() as f64;
    let ref_lat = station_order.iter().map(|s| coords[s].1).sum::<f64>() / station_order.len() as f64;

    let earliest = rows.iter().map(|r| r.ts).min().unwrap();
    let midnight = earliest
        .date_naive()
        .and_hms_opt(0, 0, 0)
        .unwrap()
        .and_local_timezone(*earliest.offset())
        .single()
        .ok_or_else(|| Error::invalid("ambiguous epoch midnight"))?;
    let meta = DatasetMeta {
        epoch: midnight,
        ref_lon,
        ref_lat,
    };

    let stations: Result<Vec<_>> = station_order
        .iter()
        .map(|id| {
            let (lon, lat, _) = coords[id];
            project_lonlat(id.clone(), lon, lat, ref_lon, ref_lat)
        })
        .collect();
    let stations = stations?;
    let index_of: BTreeMap<&str, usize> = station_order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut last_seen: Vec<Option<(f64, usize)>> = vec![None; stations.len()];
    let mut observations = Vec::with_capacity(rows.len());
    for r in &rows {
        let s = index_of[r.id.as_str()];
        let hours = meta.hours_of(&r.ts);
        if let Some((prev, prev_line)) = last_seen[s] {
            if hours <= prev {
                return Err(parse_err(
                    r.line,
                    format!(
                        "timestamps for station {} must be strictly increasing (previous at line {prev_line})",
                        r.id
                    ),
                ));
            }
        }
        last_seen[s] = Some((hours, r.line));
        observations.push(Observation {
            station: s,
            time: TimeStamp(hours),
            temp_c: r.temp,
        });
    }
    let dataset = Dataset::new(stations, observations)?;
    Ok(StationTable { dataset, meta })
}

/// Write a dataset back to the station CSV format.
pub fn write_station_csv(path: &Path, dataset: &Dataset, meta: &DatasetMeta) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(["station_id", "lon_deg", "lat_deg", "timestamp", "temp_c"])
        .map_err(io_err)?;
    for obs in dataset.observations() {
        let st = &dataset.stations()[obs.station];
        let (lon, lat) = unproject(st.east_km, st.north_km, meta.ref_lon, meta.ref_lat);
        let ts = meta.timestamp_of(obs.time.0);
        w.write_record([
            st.station_id.as_str(),
            &format!("{lon}"),
            &format!("{lat}"),
            &ts.to_rfc3339(),
            &format!("{}", obs.temp_c),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> Error {
    Error::Parse {
        line: 0,
        msg: format!("{e}"),
    }
}

/// One row of an extrema file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremaRecord {
    pub station_id: String,
    pub date: NaiveDate,
    pub tn_c: f64,
    pub tx_c: f64,
    pub meas_hour: Option<u8>,
}

/// Read an extrema CSV (`station_id,date,tn_c,tx_c,meas_hour`). `meas_hour`
/// may be blank (unknown observation hour).
pub fn read_extrema_csv(path: &Path) -> Result<Vec<ExtremaRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(1, format!("{e}")))?;
    {
        let headers = rdr.headers().map_err(|e| parse_err(1, format!("{e}")))?;
        let expect = ["station_id", "date", "tn_c", "tx_c", "meas_hour"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(parse_err(
                1,
                format!("expected header {expect:?}, got {got:?}"),
            ));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line() as usize), format!("{e}")))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let station_id = rec[0].to_string();
        let date = NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d")
            .map_err(|e| parse_err(line, format!("date: {e}")))?;
        let tn_c: f64 = rec[2]
            .parse()
            .map_err(|e| parse_err(line, format!("tn_c: {e}")))?;
        let tx_c: f64 = rec[3]
            .parse()
            .map_err(|e| parse_err(line, format!("tx_c: {e}")))?;
        if tn_c > tx_c {
            return Err(parse_err(line, format!("tn_c {tn_c} exceeds tx_c {tx_c}")));
        }
        for v in [tn_c, tx_c] {
            if !(TEMP_MIN..=TEMP_MAX).contains(&v) {
                return Err(parse_err(line, format!("temperature {v} outside physical range")));
            }
        }
        let meas_hour = if rec[4].is_empty() {
            None
        } else {
            let h: u8 = rec[4]
                .parse()
                .map_err(|e| parse_err(line, format!("meas_hour: {e}")))?;
            if h > 23 {
                return Err(parse_err(line, format!("meas_hour {h} outside 0..=23")));
            }
            Some(h)
        };
        out.push(ExtremaRecord {
            station_id,
            date,
            tn_c,
            tx_c,
            meas_hour,
        });
    }
    Ok(out)
}

pub fn write_extrema_csv(path: &Path, rows: &[ExtremaRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(["station_id", "date", "tn_c", "tx_c", "meas_hour"])
        .map_err(io_err)?;
    for r in rows {
        w.write_record([
            r.station_id.as_str(),
            &r.date.format("%Y-%m-%d").to_string(),
            &format!("{}", r.tn_c),
            &format!("{}", r.tx_c),
            &r.meas_hour.map_or(String::new(), |h| h.to_string()),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Convert extrema records of one station into day-indexed extrema, given the
/// dataset epoch.
pub fn extrema_to_daily(
    rows: &[ExtremaRecord],
    station_id: &str,
    meta: &DatasetMeta,
) -> Result<Vec<DailyExtrema>> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.station_id == station_id) {
        out.push(DailyExtrema::new(
            meta.day_index_of(r.date),
            r.tn_c,
            r.tx_c,
        )?);
    }
    if out.is_empty() {
        return Err(Error::invalid(format!(
            "no extrema rows for station {station_id}"
        )));
    }
    out.sort_by_key(|e| e.day_index);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run configuration.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub chains: usize,
    pub warmup: usize,
    pub iters: usize,
    pub max_leapfrog: usize,
    pub target_accept: f64,
    pub sharpness: f64,
    pub epsilon: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            chains: 4,
            warmup: 10_000,
            iters: 10_000,
            max_leapfrog: 32,
            target_accept: 0.8,
            sharpness: 10.0,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub multi_starts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub chunk_days: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            multi_starts: 5,
            max_iters: 100,
            tol: 1e-7,
            chunk_days: 10.0,
        }
    }
}

/// Run configuration consumed by every subcommand; defaults are the reference
/// settings (10-day fitting chunks, 73/48-day prediction windows, 9/3-day
/// imputation windows, 4 x 10k/10k sampler, k=10, eps=0.1).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    /// Named hyperparameter overrides applied to the preset kernel.
    pub hyper_overrides: BTreeMap<String, f64>,
    pub noise_sd: Option<f64>,
    pub fit: FitSection,
    pub predict_window_days: f64,
    pub predict_overlap_days: f64,
    pub impute_window_days: usize,
    pub impute_overlap_days: usize,
    pub sampler: SamplerSection,
    pub seed: u64,
    /// Include measurement noise in prediction covariances.
    pub noise_in_prediction: bool,
    /// Fallback measurement hour when extrema rows leave it blank.
    pub meas_hour: Option<u8>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "se_x_se".to_string(),
            hyper_overrides: BTreeMap::new(),
            noise_sd: None,
            fit: FitSection::default(),
            predict_window_days: 73.0,
            predict_overlap_days: 48.0,
            impute_window_days: 9,
            impute_overlap_days: 3,
            sampler: SamplerSection::default(),
            seed: 0,
            noise_in_prediction: true,
            meas_hour: None,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.preset.parse::<PresetName>()?;
        if let Some(n) = self.noise_sd {
            if !(n > 0.0) {
                return Err(Error::invalid("noise_sd must be positive"));
            }
        }
        if !(self.predict_window_days > 0.0)
            || !(self.predict_overlap_days >= 0.0)
            || self.predict_overlap_days >= self.predict_window_days
        {
            return Err(Error::invalid(
                "need 0 <= predict_overlap_days < predict_window_days",
            ));
        }
        if self.impute_window_days == 0 || self.impute_overlap_days >= self.impute_window_days {
            return Err(Error::invalid(
                "need 0 <= impute_overlap_days < impute_window_days",
            ));
        }
        if self.sampler.chains == 0 || self.sampler.iters == 0 {
            return Err(Error::invalid("sampler needs chains and iters"));
        }
        if !(self.sampler.epsilon > 0.0) || !(self.sampler.sharpness > 0.0) {
            return Err(Error::invalid("sharpness and epsilon must be positive"));
        }
        if !(self.sampler.target_accept > 0.0 && self.sampler.target_accept < 1.0) {
            return Err(Error::invalid("target_accept must be in (0,1)"));
        }
        if let Some(h) = self.meas_hour {
            if h > 23 {
                return Err(Error::invalid("meas_hour outside 0..=23"));
            }
        }
        if self.fit.multi_starts == 0 || self.fit.max_iters == 0 || !(self.fit.chunk_days > 0.0) {
            return Err(Error::invalid("bad fit section"));
        }
        Ok(())
    }

    pub fn preset_name(&self) -> PresetName {
        self.preset.parse().expect("validated")
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            chunk_days: self.fit.chunk_days,
            max_iters: self.fit.max_iters,
            tol: self.fit.tol,
            multi_starts: self.fit.multi_starts,
            seed: self.seed,
            init: None,
            init_noise_sd: self.noise_sd,
            max_chunk_points: 3000,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            chains: self.sampler.chains,
            warmup: self.sampler.warmup,
            iters: self.sampler.iters,
            max_leapfrog: self.sampler.max_leapfrog,
            target_accept: self.sampler.target_accept,
            seed: self.seed,
            init: crate::smoothhmc::InitMode::PriorMean,
        }
    }

    pub fn condition_options(&self) -> ConditionOptions {
        ConditionOptions {
            noise_in_query: self.noise_in_prediction,
            station_mean_in_query: true,
        }
    }

    pub fn impute_options(&self, meas_hour: u8) -> ImputeOptions {
        ImputeOptions {
            window_days: self.impute_window_days,
            overlap_days: self.impute_overlap_days,
            meas_hour,
            epoch_offset: 0.0,
            target: TargetConfig {
                sharpness: self.sampler.sharpness,
                likelihood_sd: self.sampler.epsilon,
                mu_prior_sd: Some(10.0),
            },
            sampler: self.sampler_config(),
            condition: ConditionOptions {
                noise_in_query: self.noise_in_prediction,
                station_mean_in_query: false,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Plot-ready emissions.

/// Draws CSV: one row per draw, columns are grid timestamps plus the offset.
pub fn write_draws_csv(
    path: &Path,
    grid_hours: &[f64],
    draws: &DMatrix<f64>,
    mu: &DVector<f64>,
) -> Result<()> {
    if draws.ncols() != grid_hours.len() || draws.nrows() != mu.len() {
        return Err(Error::invalid("draws/grid/mu dimension mismatch"));
    }
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write!(w, "draw")?;
    for h in grid_hours {
        write!(w, ",t_{h}")?;
    }
    writeln!(w, ",mu_miss")?;
    for r in 0..draws.nrows() {
        write!(w, "{r}")?;
        for c in 0..draws.ncols() {
            write!(w, ",{}", draws[(r, c)])?;
        }
        writeln!(w, ",{}", mu[r])?;
    }
    w.flush()?;
    Ok(())
}

pub const ENVELOPE_LEVELS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];

/// Per-timestamp quantile envelope of a draw matrix
/// (columns `time_hr,mean,q10,q25,q50,q75,q90`).
pub fn write_envelope_csv(path: &Path, grid_hours: &[f64], draws: &DMatrix<f64>) -> Result<()> {
    if draws.ncols() != grid_hours.len() || draws.nrows() == 0 {
        return Err(Error::invalid("draws/grid dimension mismatch"));
    }
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "time_hr,mean,q10,q25,q50,q75,q90")?;
    let n = draws.nrows();
    let mut col = vec![0.0f64; n];
    for c in 0..draws.ncols() {
        for r in 0..n {
            col[r] = draws[(r, c)];
        }
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = col.iter().sum::<f64>() / n as f64;
        write!(w, "{},{mean}", grid_hours[c])?;
        for q in ENVELOPE_LEVELS {
            // Inclusive linear interpolation between order statistics.
            let pos = q * (n as f64 - 1.0);
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let v = if lo == hi {
                col[lo]
            } else {
                col[lo] + (pos - lo as f64) * (col[hi] - col[lo])
            };
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Gaussian-posterior envelope from mean and variance (no draws needed).
pub fn write_gaussian_envelope_csv(
    path: &Path,
    grid_hours: &[f64],
    mean: &[f64],
    var: &[f64],
) -> Result<()> {
    if mean.len() != grid_hours.len() || var.len() != grid_hours.len() {
        return Err(Error::invalid("dimension mismatch"));
    }
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "time_hr,mean,q10,q25,q50,q75,q90")?;
    // Standard normal quantiles for the envelope levels.
    let zq = [-1.2815515655446004, -0.6744897501960817, 0.0, 0.6744897501960817, 1.2815515655446004];
    for c in 0..grid_hours.len() {
        let sd = var[c].max(0.0).sqrt();
        write!(w, "{},{}", grid_hours[c], mean[c])?;
        for z in zq {
            write!(w, ",{}", mean[c] + z * sd)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Variogram CSV rows (`pair,h_km,r_hr,gamma,n_pairs[,gamma_model]`).
pub fn write_variogram_csv(
    path: &Path,
    estimates: &[(VariogramEstimate, Option<Vec<f64>>)],
) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "pair,h_km,r_hr,gamma,n_pairs,gamma_model")?;
    for (est, model) in estimates {
        if let Some(m) = model {
            if m.len() != est.bins.len() {
                return Err(Error::invalid("model column length mismatch"));
            }
        }
        for (i, b) in est.bins.iter().enumerate() {
            let model_s = model
                .as_ref()
                .map_or(String::new(), |m| format!("{}", m[i]));
            writeln!(
                w,
                "{}-{},{},{},{},{},{model_s}",
                est.station_a, est.station_b, est.distance_km, b.lag_hr, b.gamma, b.pairs
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Serialize any report as pretty JSON (deterministic field order).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn station_csv_roundtrip() {
        let text = "\
station_id,lon_deg,lat_deg,timestamp,temp_c
A,-93.5,42.0,2015-04-01T00:00:00-06:00,3.5
A,-93.5,42.0,2015-04-01T01:00:00-06:00,3.0
B,-92.4,42.5,2015-04-01T00:30:00-06:00,2.0
";
        let f = write_tmp(text);
        let table = read_station_csv(f.path()).unwrap();
        assert_eq!(table.dataset.stations().len(), 2);
        assert_eq!(table.dataset.n_obs(), 3);
        // Epoch is local midnight of the earliest observation.
        assert_eq!(table.meta.epoch.to_rfc3339(), "2015-04-01T00:00:00-06:00");
        let obs = table.dataset.observations();
        assert_relative_eq!(obs[0].time.0, 0.0);
        assert_relative_eq!(obs[1].time.0, 1.0);
        assert_relative_eq!(obs[2].time.0, 0.5);

        let out = tempfile::NamedTempFile::new().unwrap();
        write_station_csv(out.path(), &table.dataset, &table.meta).unwrap();
        let table2 = read_station_csv(out.path()).unwrap();
        assert_eq!(table2.dataset.n_obs(), 3);
        for (a, b) in table
            .dataset
            .observations()
            .iter()
            .zip(table2.dataset.observations())
        {
            assert_relative_eq!(a.time.0, b.time.0, epsilon = 1e-6);
            assert_eq!(a.temp_c, b.temp_c);
        }
    }

    #[test]
    fn station_csv_rejects_bad_rows_with_line_numbers() {
        // Non-monotone timestamps (line 4).
        let text = "\
station_id,lon_deg,lat_deg,timestamp,temp_c
A,-93.5,42.0,2015-04-01T01:00:00-06:00,3.5
A,-93.5,42.0,2015-04-01T01:00:00-06:00,3.0
";
        let f = write_tmp(text);
        match read_station_csv(f.path()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("strictly increasing"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        // Unphysical temperature.
        let text = "\
station_id,lon_deg,lat_deg,timestamp,temp_c
A,-93.5,42.0,2015-04-01T01:00:00-06:00,99.0
";
        let f = write_tmp(text);
        match read_station_csv(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        // Wrong header.
        let f = write_tmp("a,b,c\n1,2,3\n");
        assert!(matches!(read_station_csv(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn extrema_csv_roundtrip_and_validation() {
        let rows = vec![
            ExtremaRecord {
                station_id: "A".into(),
                date: NaiveDate::from_ymd_opt(2015, 4, 2).unwrap(),
                tn_c: -1.5,
                tx_c: 10.25,
                meas_hour: Some(11),
            },
            ExtremaRecord {
                station_id: "A".into(),
                date: NaiveDate::from_ymd_opt(2015, 4, 3).unwrap(),
                tn_c: 0.0,
                tx_c: 8.0,
                meas_hour: None,
            },
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_extrema_csv(f.path(), &rows).unwrap();
        let back = read_extrema_csv(f.path()).unwrap();
        assert_eq!(rows, back);

        let bad = write_tmp("station_id,date,tn_c,tx_c,meas_hour\nA,2015-04-02,5.0,1.0,11\n");
        assert!(matches!(
            read_extrema_csv(bad.path()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn extrema_day_index_uses_epoch_date() {
        let meta = DatasetMeta {
            epoch: DateTime::parse_from_rfc3339("2015-04-01T00:00:00-06:00").unwrap(),
            ref_lon: -93.0,
            ref_lat: 42.0,
        };
        let rows = vec![ExtremaRecord {
            station_id: "H".into(),
            date: NaiveDate::from_ymd_opt(2015, 4, 3).unwrap(),
            tn_c: 1.0,
            tx_c: 2.0,
            meas_hour: Some(17),
        }];
        let daily = extrema_to_daily(&rows, "H", &meta).unwrap();
        assert_eq!(daily[0].day_index, 2);
        assert_eq!(meta.date_of_day(2), NaiveDate::from_ymd_opt(2015, 4, 3).unwrap());
        assert!(extrema_to_daily(&rows, "X", &meta).is_err());
    }

    #[test]
    fn runconfig_defaults_match_reference_settings() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.fit.chunk_days, 10.0);
        assert_eq!(cfg.predict_window_days, 73.0);
        assert_eq!(cfg.predict_overlap_days, 48.0);
        assert_eq!(cfg.impute_window_days, 9);
        assert_eq!(cfg.impute_overlap_days, 3);
        assert_eq!(cfg.sampler.chains, 4);
        assert_eq!(cfg.sampler.warmup, 10_000);
        assert_eq!(cfg.sampler.iters, 10_000);
        assert_eq!(cfg.sampler.sharpness, 10.0);
        assert_eq!(cfg.sampler.epsilon, 0.1);
        assert!(cfg.noise_in_prediction);
    }

    #[test]
    fn runconfig_rejects_unknown_fields_and_bad_values() {
        let f = write_tmp(r#"{"presett": "se_x_se"}"#);
        assert!(RunConfig::load(f.path()).is_err());
        let f = write_tmp(r#"{"preset": "nope"}"#);
        assert!(RunConfig::load(f.path()).is_err());
        let f = write_tmp(r#"{"impute_window_days": 3, "impute_overlap_days": 5}"#);
        assert!(RunConfig::load(f.path()).is_err());
        let f = write_tmp(r#"{"preset": "sumprod", "seed": 9}"#);
        let cfg = RunConfig::load(f.path()).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn envelope_quantiles_are_monotone() {
        let grid = [0.0, 1.0, 2.0];
        let mut draws = DMatrix::<f64>::zeros(50, 3);
        for r in 0..50 {
            for c in 0..3 {
                draws[(r, c)] = (r as f64 * 0.37 + c as f64).sin() * 3.0;
            }
        }
        let f = tempfile::NamedTempFile::new().unwrap();
        write_envelope_csv(f.path(), &grid, &draws).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        for line in text.lines().skip(1) {
            let v: Vec<f64> = line.split(',').skip(2).map(|s| s.parse().unwrap()).collect();
            for w in v.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "{line}");
            }
        }
    }

    #[test]
    fn draws_csv_shape() {
        let grid = [0.0, 1.5];
        let draws = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mu = DVector::from_vec(vec![0.5, -0.5]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_draws_csv(f.path(), &grid, &draws, &mu).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "draw,t_0,t_1.5,mu_miss");
        assert_eq!(lines[1], "0,1,2,0.5");
        assert_eq!(lines[2], "1,3,4,-0.5");
    }
}
