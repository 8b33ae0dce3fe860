//! Station coordinates, timestamps, 24-hour measurement windows, and daily
//! extrema extraction.
//!
//! Times are plain fractional hours since a per-dataset epoch; sampling does
//! not have to be equally spaced. A measurement window ("dayset") is the
//! half-open interval `(end - 24h, end]` where `end` falls on the configured
//! measurement hour. A reading taken exactly at the measurement instant
//! belongs to the window being closed out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kilometres per degree of longitude at the equator.
const KM_PER_DEG_LON: f64 = 111.32;
/// Kilometres per degree of latitude.
const KM_PER_DEG_LAT: f64 = 110.57;

/// A station position on a local tangent plane, in km east/north of the
/// dataset reference point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub station_id: String,
    pub east_km: f64,
    pub north_km: f64,
}

impl Location {
    pub fn new(station_id: impl Into<String>, east_km: f64, north_km: f64) -> Result<Self> {
        let station_id = station_id.into();
        if station_id.is_empty() {
            return Err(Error::invalid("station_id must be non-empty"));
        }
        if !east_km.is_finite() || !north_km.is_finite() {
            return Err(Error::invalid("coordinates must be finite"));
        }
        Ok(Location {
            station_id,
            east_km,
            north_km,
        })
    }

    /// Euclidean distance on the tangent plane.
    pub fn distance_km(&self, other: &Location) -> f64 {
        let de = self.east_km - other.east_km;
        let dn = self.north_km - other.north_km;
        (de * de + dn * dn).sqrt()
    }
}

/// Hours since the dataset epoch; may be fractional and irregularly spaced.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct TimeStamp(pub f64);

impl TimeStamp {
    pub fn hours(self) -> f64 {
        self.0
    }
}

/// Equirectangular projection of (lon, lat) onto a local tangent plane
/// centred on (`ref_lon`, `ref_lat`).
///
/// Good to <1% against great-circle distances for regional extents
/// (a few hundred km), which is all the spatial kernels need.
pub fn project_lonlat(
    station_id: impl Into<String>,
    lon_deg: f64,
    lat_deg: f64,
    ref_lon_deg: f64,
    ref_lat_deg: f64,
) -> Result<Location> {
    for v in [lon_deg, lat_deg, ref_lon_deg, ref_lat_deg] {
        if !v.is_finite() {
            return Err(Error::invalid("projection inputs must be finite"));
        }
    }
    if lat_deg.abs() >= 89.0 || ref_lat_deg.abs() >= 89.0 {
        return Err(Error::invalid(
            "latitudes within 89 degrees of the poles are not supported",
        ));
    }
    let east_km = (lon_deg - ref_lon_deg) * KM_PER_DEG_LON * ref_lat_deg.to_radians().cos();
    let north_km = (lat_deg - ref_lat_deg) * KM_PER_DEG_LAT;
    Location::new(station_id, east_km, north_km)
}

/// Inverse of [`project_lonlat`]; used when writing synthetic station files.
pub fn unproject(east_km: f64, north_km: f64, ref_lon_deg: f64, ref_lat_deg: f64) -> (f64, f64) {
    let lon = ref_lon_deg + east_km / (KM_PER_DEG_LON * ref_lat_deg.to_radians().cos());
    let lat = ref_lat_deg + north_km / KM_PER_DEG_LAT;
    (lon, lat)
}

/// One 24-hour measurement window over a time grid.
///
/// `member_indices` are exactly the grid positions with
/// `window_start < t <= window_end`.
#[derive(Debug, Clone, PartialEq)]
pub struct DaySet {
    pub day_index: i64,
    pub window_start: TimeStamp,
    pub window_end: TimeStamp,
    pub member_indices: Vec<usize>,
}

/// Daily minimum and maximum observed within one measurement window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyExtrema {
    pub day_index: i64,
    pub tn: f64,
    pub tx: f64,
}

impl DailyExtrema {
    pub fn new(day_index: i64, tn: f64, tx: f64) -> Result<Self> {
        if !tn.is_finite() || !tx.is_finite() {
            return Err(Error::invalid("extrema must be finite"));
        }
        if tn > tx {
            return Err(Error::invalid(format!(
                "tn ({tn}) must not exceed tx ({tx}) on day {day_index}"
            )));
        }
        Ok(DailyExtrema { day_index, tn, tx })
    }
}

/// Measurement windows covering a grid, plus a count of partially covered
/// edge windows that were dropped.
#[derive(Debug, Clone)]
pub struct DaySetPartition {
    pub windows: Vec<DaySet>,
    pub dropped_edge_windows: usize,
}

const BOUNDARY_EPS: f64 = 1e-9;

/// Partition a sorted time grid into 24-hour windows ending at successive
/// occurrences of `meas_hour` (wall-clock hour = grid hour + `epoch_offset`).
///
/// Windows that extend beyond either end of the grid are dropped rather than
/// padded; their count is reported. A kept window with fewer than two grid
/// points is an error, since a one-point extremum pair carries no constraint.
///
/// `day_index` of a window is the wall-clock day on which the window ends,
/// so a window ending at hour `meas_hour` of day `d` has `day_index == d`.
pub fn build_daysets(
    grid: &[TimeStamp],
    meas_hour: u8,
    epoch_offset: f64,
) -> Result<DaySetPartition> {
    if grid.is_empty() {
        return Err(Error::invalid("empty time grid"));
    }
    if meas_hour > 23 {
        return Err(Error::invalid("meas_hour must be in 0..=23"));
    }
    if !epoch_offset.is_finite() {
        return Err(Error::invalid("epoch_offset must be finite"));
    }
    for w in grid.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::invalid("grid must be strictly increasing"));
        }
    }
    let t_first = grid[0].0;
    let t_last = grid[grid.len() - 1].0;

    // Window ends at grid times t with (t + epoch_offset) == meas_hour (mod 24).
    // End for wall-clock day k falls at 24k + meas_hour - epoch_offset.
    let end_for_day = |k: i64| 24.0 * k as f64 + f64::from(meas_hour) - epoch_offset;
    let first_day = ((t_first + epoch_offset - f64::from(meas_hour)) / 24.0).floor() as i64;
    let last_day = ((t_last + epoch_offset - f64::from(meas_hour)) / 24.0).ceil() as i64 + 1;

    let mut windows = Vec::new();
    let mut dropped = 0usize;
    let mut cursor = 0usize;
    let mut assigned = 0usize;
    for day in first_day..=last_day {
        let end = end_for_day(day);
        let start = end - 24.0;
        let mut members = Vec::new();
        while cursor < grid.len() && grid[cursor].0 <= end + BOUNDARY_EPS {
            if grid[cursor].0 > start + BOUNDARY_EPS {
                members.push(cursor);
            }
            cursor += 1;
        }
        let fully_covered =
            start >= t_first - BOUNDARY_EPS && end <= t_last + BOUNDARY_EPS;
        if !fully_covered {
            if !members.is_empty() {
                dropped += 1;
            }
            continue;
        }
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "interior window ending at {end} h contains {} grid point(s); need at least 2",
                members.len()
            )));
        }
        assigned += members.len();
        windows.push(DaySet {
            day_index: day,
            window_start: TimeStamp(start),
            window_end: TimeStamp(end),
            member_indices: members,
        });
    }
    debug_assert!(assigned <= grid.len());
    Ok(DaySetPartition {
        windows,
        dropped_edge_windows: dropped,
    })
}

/// Per-window min/max of a series sampled on the grid the daysets were built
/// from. `series` must be index-aligned with that grid.
pub fn extract_extrema(series: &[(TimeStamp, f64)], daysets: &[DaySet]) -> Result<Vec<DailyExtrema>> {
    daysets
        .iter()
        .map(|ds| {
            if ds.member_indices.is_empty() {
                return Err(Error::invalid(format!(
                    "dayset {} has no members",
                    ds.day_index
                )));
            }
            let mut tn = f64::INFINITY;
            let mut tx = f64::NEG_INFINITY;
            for &i in &ds.member_indices {
                let v = series
                    .get(i)
                    .ok_or_else(|| {
                        Error::invalid(format!("dayset index {i} out of range for series"))
                    })?
                    .1;
                tn = tn.min(v);
                tx = tx.max(v);
            }
            DailyExtrema::new(ds.day_index, tn, tx)
        })
        .collect()
}
