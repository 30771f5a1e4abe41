//! Independent reference implementations used only by tests.
#![allow(dead_code)]

use chrono::{DateTime, Timelike, Utc};
use hemulab_geo::{DemGrid, SunVector};

/// Low-precision solar coordinates from the Astronomical Almanac (as
/// popularised by Michalsky): mean longitude and anomaly in days since
/// J2000, right ascension via sidereal time. Returns (zenith, azimuth) in
/// degrees, azimuth clockwise from north.
pub fn almanac_sun(lat: f64, lon: f64, t: &DateTime<Utc>) -> (f64, f64) {
    let jd = t.timestamp() as f64 / 86_400.0 + 2_440_587.5;
    let n = jd - 2_451_545.0;
    let hour_ut = t.hour() as f64 + t.minute() as f64 / 60.0 + t.second() as f64 / 3600.0;

    let mean_long = (280.460 + 0.985_647_4 * n).rem_euclid(360.0);
    let mean_anom = (357.528 + 0.985_600_3 * n).rem_euclid(360.0).to_radians();
    let ecl_long = (mean_long + 1.915 * mean_anom.sin() + 0.020 * (2.0 * mean_anom).sin()).to_radians();
    let obliq = (23.439 - 0.000_000_4 * n).to_radians();

    let ra = (obliq.cos() * ecl_long.sin()).atan2(ecl_long.cos());
    let dec = (obliq.sin() * ecl_long.sin()).asin();

    let gmst_h = (6.697_375 + 0.065_709_824_2 * n + hour_ut).rem_euclid(24.0);
    let lmst_deg = (gmst_h * 15.0 + lon).rem_euclid(360.0);
    let ha = (lmst_deg - ra.to_degrees()).to_radians();

    let phi = lat.to_radians();
    let el = (dec.sin() * phi.sin() + dec.cos() * phi.cos() * ha.cos()).clamp(-1.0, 1.0).asin();
    let east = -dec.cos() * ha.sin();
    let north = dec.sin() * phi.cos() - dec.cos() * ha.cos() * phi.sin();
    let az = east.atan2(north).to_degrees().rem_euclid(360.0);
    (90.0 - el.to_degrees(), az)
}

/// Smallest absolute difference between two angles in degrees.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

fn interp(dem: &DemGrid, r: f64, c: f64) -> Option<f64> {
    let (rows, cols) = (dem.rows() as f64, dem.cols() as f64);
    if !(0.0..=rows - 1.0).contains(&r) || !(0.0..=cols - 1.0).contains(&c) {
        return None;
    }
    let (i, j) = (r.floor() as usize, c.floor() as usize);
    let (i1, j1) = ((i + 1).min(dem.rows() - 1), (j + 1).min(dem.cols() - 1));
    let (u, v) = (r - i as f64, c - j as f64);
    let z = |a: usize, b: usize| dem.elevation.get(a, b) as f64;
    Some((1.0 - u) * ((1.0 - v) * z(i, j) + v * z(i, j1)) + u * ((1.0 - v) * z(i1, j) + v * z(i1, j1)))
}

/// Brute-force shadow test: walk the sun ray from every cell in half-cell
/// steps and report whether terrain ever rises above the ray.
pub fn ray_march_shadow(dem: &DemGrid, s: SunVector) -> Vec<bool> {
    let (rows, cols) = (dem.rows(), dem.cols());
    if s.up() <= 0.0 {
        return vec![true; rows * cols];
    }
    let horiz = s.east().hypot(s.north());
    if horiz == 0.0 {
        return vec![false; rows * cols];
    }
    let (dr, dc) = (-s.north() / horiz, s.east() / horiz);
    let rise_per_m = s.up() / horiz;
    let zmax = dem.elevation.max() as f64;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let z0 = dem.elevation.get(r, c) as f64;
            let mut shadowed = false;
            for k in 1.. {
                let t = k as f64 * 0.5;
                let ray_z = z0 + t * dem.cell_size * rise_per_m;
                if ray_z > zmax {
                    break;
                }
                match interp(dem, r as f64 + t * dr, c as f64 + t * dc) {
                    None => break,
                    Some(z) if z > ray_z => {
                        shadowed = true;
                        break;
                    }
                    _ => {}
                }
            }
            out.push(shadowed);
        }
    }
    out
}
