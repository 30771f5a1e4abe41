//! Solar position from the NOAA spreadsheet formulation of Meeus' low-order
//! solar theory: geometric mean longitude and anomaly, equation of centre,
//! apparent longitude, declination and equation of time. No refraction.

use std::sync::{Arc, OnceLock};

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};

use crate::raster::Raster;
use crate::GeoError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SunPosition {
    /// Degrees in [0, 180].
    pub zenith: f64,
    /// Degrees in [0, 360), clockwise from north.
    pub azimuth: f64,
}

impl SunPosition {
    pub fn elevation(&self) -> f64 {
        90.0 - self.zenith
    }
}

/// Unit vector toward the sun in (east, north, up).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SunVector(pub [f64; 3]);

impl SunVector {
    pub fn east(&self) -> f64 {
        self.0[0]
    }
    pub fn north(&self) -> f64 {
        self.0[1]
    }
    pub fn up(&self) -> f64 {
        self.0[2]
    }

    /// Inverse of [`sun_vector`]; azimuth is arbitrary (0) at the zenith.
    pub fn to_position(&self) -> SunPosition {
        let [e, n, u] = self.0;
        let zenith = u.clamp(-1.0, 1.0).acos().to_degrees();
        let azimuth = if e.hypot(n) < 1e-15 { 0.0 } else { wrap360(e.atan2(n).to_degrees()) };
        SunPosition { zenith, azimuth }
    }
}

pub fn sun_vector(p: SunPosition) -> SunVector {
    let (z, a) = (p.zenith.to_radians(), p.azimuth.to_radians());
    SunVector([z.sin() * a.sin(), z.sin() * a.cos(), z.cos()])
}

pub(crate) fn wrap360(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

pub fn julian_day(t: &DateTime<Utc>) -> f64 {
    let secs = t.timestamp() as f64 + t.timestamp_subsec_nanos() as f64 * 1e-9;
    secs / 86_400.0 + 2_440_587.5
}

/// Accepts RFC 3339 plus the shorter `YYYY-MM-DDTHH:MMZ` form.
pub fn parse_utc(s: &str) -> Result<DateTime<Utc>, GeoError> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    let trimmed = s.strip_suffix('Z').unwrap_or(s);
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(n) = NaiveDateTime::parse_from_str(trimmed, fmt) {
            return Ok(Utc.from_utc_datetime(&n));
        }
    }
    Err(GeoError::InvalidTimestamp(s.to_string()))
}

/// Years outside this range exceed the validity of the series truncation.
const VALID_YEARS: std::ops::RangeInclusive<i32> = 1901..=2099;

pub fn sun_position(lat: f64, lon: f64, utc: &DateTime<Utc>) -> Result<SunPosition, GeoError> {
    if !lat.is_finite() || lat.abs() > 90.0 {
        return Err(GeoError::InvalidLatitude(lat));
    }
    if !lon.is_finite() {
        return Err(GeoError::InvalidArgument(format!("longitude {lon} is not finite")));
    }
    if !VALID_YEARS.contains(&utc.year()) {
        return Err(GeoError::InvalidTimestamp(utc.to_rfc3339()));
    }
    let ephem = Ephemeris::at(julian_day(utc));
    let minutes = utc.hour() as f64 * 60.0
        + utc.minute() as f64
        + (utc.second() as f64 + utc.nanosecond() as f64 * 1e-9) / 60.0;
    Ok(ephem.position(lat, lon, minutes))
}

/// Declination and equation of time for one instant; site independent.
#[derive(Clone, Copy, Debug)]
struct Ephemeris {
    declination: f64,
    eot_minutes: f64,
}

impl Ephemeris {
    fn at(jd: f64) -> Self {
        let jc = (jd - 2_451_545.0) / 36_525.0;
        let l0 = (280.466_46 + jc * (36_000.769_83 + jc * 0.000_303_2)).rem_euclid(360.0);
        let m = 357.529_11 + jc * (35_999.050_29 - 0.000_153_7 * jc);
        let e = 0.016_708_634 - jc * (0.000_042_037 + 0.000_000_126_7 * jc);
        let mr = m.to_radians();
        let centre = mr.sin() * (1.914_602 - jc * (0.004_817 + 0.000_014 * jc))
            + (2.0 * mr).sin() * (0.019_993 - 0.000_101 * jc)
            + (3.0 * mr).sin() * 0.000_289;
        let true_long = l0 + centre;
        let omega = (125.04 - 1_934.136 * jc).to_radians();
        let app_long = (true_long - 0.005_69 - 0.004_78 * omega.sin()).to_radians();
        let eps0 = 23.0 + (26.0 + (21.448 - jc * (46.815 + jc * (0.000_59 - jc * 0.001_813))) / 60.0) / 60.0;
        let eps = (eps0 + 0.002_56 * omega.cos()).to_radians();
        let declination = (eps.sin() * app_long.sin()).asin();

        let y = (eps / 2.0).tan().powi(2);
        let l0r = l0.to_radians();
        let eot = y * (2.0 * l0r).sin() - 2.0 * e * mr.sin() + 4.0 * e * y * mr.sin() * (2.0 * l0r).cos()
            - 0.5 * y * y * (4.0 * l0r).sin()
            - 1.25 * e * e * (2.0 * mr).sin();
        Ephemeris {
            declination,
            eot_minutes: 4.0 * eot.to_degrees(),
        }
    }

    fn position(&self, lat: f64, lon: f64, utc_minutes: f64) -> SunPosition {
        let tst = (utc_minutes + self.eot_minutes + 4.0 * lon).rem_euclid(1440.0);
        let ha = (tst / 4.0 - 180.0).to_radians();
        let (phi, dec) = (lat.to_radians(), self.declination);
        let cos_z = phi.sin() * dec.sin() + phi.cos() * dec.cos() * ha.cos();
        let zenith = cos_z.clamp(-1.0, 1.0).acos().to_degrees();
        // Azimuth from south, westward positive; shifted to north-clockwise.
        let from_south = ha.sin().atan2(ha.cos() * phi.sin() - dec.tan() * phi.cos());
        SunPosition {
            zenith,
            azimuth: wrap360(from_south.to_degrees() + 180.0),
        }
    }
}

/// Regular lat/lon grid; row 0 is the northernmost row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatLonGrid {
    pub rows: usize,
    pub cols: usize,
    pub lat_north: f64,
    pub lon_west: f64,
    pub dlat: f64,
    pub dlon: f64,
}

impl LatLonGrid {
    pub fn lat(&self, r: usize) -> f64 {
        self.lat_north - r as f64 * self.dlat
    }
    pub fn lon(&self, c: usize) -> f64 {
        self.lon_west + c as f64 * self.dlon
    }
}

pub const HOURS_PER_YEAR: usize = 365 * 24;

/// Hour index in a 365-day year. Feb 29 shares Feb 28's hours and later
/// leap-year days shift back by one.
pub fn hour_of_year(t: &DateTime<Utc>) -> usize {
    let mut doy = t.ordinal0() as usize;
    let leap = NaiveDate::from_ymd_opt(t.year(), 2, 29).is_some();
    if leap && doy >= 59 {
        doy -= 1;
    }
    doy * 24 + t.hour() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct SunFields {
    pub zenith: Raster,
    pub azimuth: Raster,
}

/// Per-hour zenith/azimuth rasters for a reference year, filled lazily.
pub struct HourlySunCache {
    grid: LatLonGrid,
    reference_year: i32,
    slots: Vec<OnceLock<Arc<SunFields>>>,
}

impl HourlySunCache {
    pub fn new(grid: LatLonGrid, reference_year: i32) -> Result<Self, GeoError> {
        if grid.rows == 0 || grid.cols == 0 {
            return Err(GeoError::InvalidArgument("sun cache grid is empty".into()));
        }
        if grid.lat(0).abs() > 90.0 || grid.lat(grid.rows - 1).abs() > 90.0 {
            return Err(GeoError::InvalidLatitude(grid.lat(0)));
        }
        if !VALID_YEARS.contains(&reference_year) {
            return Err(GeoError::InvalidTimestamp(format!("reference year {reference_year}")));
        }
        Ok(HourlySunCache {
            grid,
            reference_year,
            slots: (0..HOURS_PER_YEAR).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn grid(&self) -> &LatLonGrid {
        &self.grid
    }

    pub fn reference_year(&self) -> i32 {
        self.reference_year
    }

    /// Timestamp in the reference year that backs hour slot `h`.
    pub fn reference_time(&self, h: usize) -> DateTime<Utc> {
        let start = Utc.with_ymd_and_hms(self.reference_year, 1, 1, 0, 0, 0).unwrap();
        let mut day = (h / 24) as i64;
        let leap = NaiveDate::from_ymd_opt(self.reference_year, 2, 29).is_some();
        if leap && day >= 59 {
            day += 1;
        }
        start + Duration::days(day) + Duration::hours((h % 24) as i64)
    }

    pub fn fields(&self, t: &DateTime<Utc>) -> Arc<SunFields> {
        self.fields_for_hour(hour_of_year(t))
    }

    pub fn fields_for_hour(&self, h: usize) -> Arc<SunFields> {
        self.slots[h % HOURS_PER_YEAR]
            .get_or_init(|| Arc::new(self.compute(h % HOURS_PER_YEAR)))
            .clone()
    }

    fn compute(&self, h: usize) -> SunFields {
        let t = self.reference_time(h);
        let ephem = Ephemeris::at(julian_day(&t));
        let minutes = t.hour() as f64 * 60.0;
        let g = &self.grid;
        let mut zenith = Raster::filled(g.rows, g.cols, 0.0);
        let mut azimuth = Raster::filled(g.rows, g.cols, 0.0);
        for r in 0..g.rows {
            for c in 0..g.cols {
                let p = ephem.position(g.lat(r), g.lon(c), minutes);
                zenith.set(r, c, p.zenith as f32);
                azimuth.set(r, c, p.azimuth as f32);
            }
        }
        SunFields { zenith, azimuth }
    }
}

pub const DAYLIGHT_ZENITH_DEG: f64 = 80.0;

/// Keep a frame only if the sun is at most `threshold_deg` from the zenith
/// at every pixel.
pub fn daylight_mask(zenith: &Raster, threshold_deg: f64) -> bool {
    zenith.data().iter().all(|&z| (z as f64) <= threshold_deg)
}
