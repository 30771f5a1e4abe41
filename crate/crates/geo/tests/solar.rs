mod oracle;

use chrono::{DateTime, Duration, TimeZone, Utc};
use hemulab_geo::{
    daylight_mask, sun_position, sun_vector, HourlySunCache, LatLonGrid, Raster, SunPosition, DAYLIGHT_ZENITH_DEG,
};
use oracle::{almanac_sun, angle_diff};
use proptest::prelude::*;
use rand::Rng;

fn utc(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, mo, d, h, mi, 0).unwrap()
}

/// Minute-resolution minimum zenith over one UTC day.
fn solar_noon(lat: f64, lon: f64, day: DateTime<Utc>) -> (DateTime<Utc>, f64) {
    (0..1440)
        .map(|m| {
            let t = day + Duration::minutes(m);
            (t, sun_position(lat, lon, &t).unwrap().zenith)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

#[test]
fn equator_equinox_noon_is_overhead() {
    let (t, z) = solar_noon(0.0, 0.0, utc(2020, 3, 20, 0, 0));
    assert!(z < 0.6, "zenith {z}");
    let (oz, _) = almanac_sun(0.0, 0.0, &t);
    assert!(oz < 0.6, "oracle zenith {oz}");
}

#[test]
fn solar_midnight_is_below_horizon() {
    for &(lat, lon) in &[(0.0, 0.0), (46.8, 8.2), (-33.9, 151.2), (59.9, -150.0), (-60.0, 60.0)] {
        for month in [1, 4, 7, 10] {
            // Local mean midnight; the equation of time shifts it by at most ~16 min.
            let t = utc(2021, month, 15, 0, 0) - Duration::minutes((lon * 4.0) as i64);
            let z = sun_position(lat, lon, &t).unwrap().zenith;
            assert!(z > 90.0, "lat {lat} lon {lon} month {month}: zenith {z}");
        }
    }
}

#[test]
fn midsummer_noon_zenith_follows_declination() {
    let (_, z) = solar_noon(46.8, 8.2, utc(2019, 6, 21, 0, 0));
    assert!((z - (46.8 - 23.44)).abs() < 0.5, "zenith {z}");
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(sun_position(90.5, 0.0, &utc(2020, 1, 1, 0, 0)).is_err());
    assert!(sun_position(f64::NAN, 0.0, &utc(2020, 1, 1, 0, 0)).is_err());
    assert!(sun_position(0.0, 0.0, &utc(2150, 1, 1, 0, 0)).is_err());
}

#[test]
fn agrees_with_almanac_algorithm() {
    let mut rng = hemulab_tensor::rng::substream(11, "solar-oracle");
    let start = utc(2010, 1, 1, 0, 0).timestamp();
    let end = utc(2031, 1, 1, 0, 0).timestamp();
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let lat = rng.gen_range(-89.0..89.0);
        let lon = rng.gen_range(-180.0..180.0);
        let t = Utc.timestamp_opt(rng.gen_range(start..end), 0).unwrap();
        let p = sun_position(lat, lon, &t).unwrap();
        let (oz, oa) = almanac_sun(lat, lon, &t);
        worst.0 = worst.0.max((p.zenith - oz).abs());
        if p.zenith > 2.0 {
            worst.1 = worst.1.max(angle_diff(p.azimuth, oa));
        }
    }
    assert!(worst.0 < 0.3 && worst.1 < 0.3, "worst zenith/azimuth error {worst:?}");
}

#[test]
fn azimuth_moves_continuously() {
    let day = utc(2019, 5, 3, 0, 0);
    let mut prev = sun_position(46.8, 8.2, &day).unwrap().azimuth;
    for m in 1..1440 {
        let a = sun_position(46.8, 8.2, &(day + Duration::minutes(m))).unwrap().azimuth;
        assert!(angle_diff(a, prev) < 2.0, "jump {prev} -> {a} at minute {m}");
        prev = a;
    }
}

#[test]
fn equinox_zenith_is_symmetric_about_noon() {
    let (noon, _) = solar_noon(46.8, 8.2, utc(2021, 3, 20, 0, 0));
    for h in 1..6 {
        let a = sun_position(46.8, 8.2, &(noon - Duration::hours(h))).unwrap().zenith;
        let b = sun_position(46.8, 8.2, &(noon + Duration::hours(h))).unwrap().zenith;
        assert!((a - b).abs() < 0.5, "±{h}h: {a} vs {b}");
    }
}

#[test]
fn sun_vector_examples() {
    let v = sun_vector(SunPosition { zenith: 0.0, azimuth: 123.0 });
    assert!((v.0[0]).abs() < 1e-15 && (v.0[1]).abs() < 1e-15 && (v.0[2] - 1.0).abs() < 1e-15);
    let v = sun_vector(SunPosition { zenith: 90.0, azimuth: 90.0 });
    assert!((v.0[0] - 1.0).abs() < 1e-12 && v.0[1].abs() < 1e-12 && v.0[2].abs() < 1e-12);
    let v = sun_vector(SunPosition { zenith: 60.0, azimuth: 135.0 });
    let expect = [0.75f64.sqrt() * 0.5f64.sqrt(), -(0.75f64.sqrt()) * 0.5f64.sqrt(), 0.5];
    for i in 0..3 {
        assert!((v.0[i] - expect[i]).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn sun_vector_is_unit_and_round_trips(z in 0.5f64..179.5, a in 0.0f64..360.0) {
        let v = sun_vector(SunPosition { zenith: z, azimuth: a });
        let norm = (v.0[0].powi(2) + v.0[1].powi(2) + v.0[2].powi(2)).sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
        prop_assert!((v.up() - z.to_radians().cos()).abs() < 1e-12);
        let back = v.to_position();
        prop_assert!((back.zenith - z).abs() < 1e-6);
        prop_assert!(angle_diff(back.azimuth, a) < 1e-6);
    }
}

fn alpine_grid() -> LatLonGrid {
    LatLonGrid { rows: 6, cols: 8, lat_north: 47.8, lon_west: 5.9, dlat: 0.4, dlon: 0.6 }
}

#[test]
fn hourly_cache_is_shared_across_years() {
    let cache = HourlySunCache::new(alpine_grid(), 2019).unwrap();
    for (y, m, d, h) in [(2015, 2, 3, 10), (2016, 7, 30, 14), (2020, 12, 31, 9), (2016, 2, 29, 12)] {
        let t = utc(y, m, d, h, 0);
        let f = cache.fields(&t);
        assert_eq!(f.zenith.rows(), 6);
        assert_eq!(f.azimuth.cols(), 8);
        let reference = cache.fields_for_hour(hemulab_geo::hour_of_year(&t));
        assert_eq!(*f, *reference);
        for &(r, c) in &[(0, 0), (3, 5), (5, 7)] {
            let direct = sun_position(cache.grid().lat(r), cache.grid().lon(c), &t).unwrap();
            assert!((direct.zenith - f.zenith.get(r, c) as f64).abs() < 0.5, "{t} zenith drift");
            assert!(angle_diff(direct.azimuth, f.azimuth.get(r, c) as f64) < 0.5, "{t} azimuth drift");
        }
    }
    assert!(HourlySunCache::new(LatLonGrid { rows: 0, ..alpine_grid() }, 2019).is_err());
}

#[test]
fn daylight_mask_uses_the_worst_pixel() {
    assert!(daylight_mask(&Raster::filled(4, 4, 0.0), DAYLIGHT_ZENITH_DEG));
    let mut z = Raster::filled(4, 4, 30.0);
    z.set(2, 3, 80.1);
    assert!(!daylight_mask(&z, DAYLIGHT_ZENITH_DEG));
    z.set(2, 3, 80.0);
    assert!(daylight_mask(&z, DAYLIGHT_ZENITH_DEG));
}

#[test]
fn kept_hours_per_day_follow_the_seasons() {
    let cache = HourlySunCache::new(alpine_grid(), 2019).unwrap();
    let counts: Vec<usize> = (0..365)
        .map(|d| (0..24).filter(|h| daylight_mask(&cache.fields_for_hour(d * 24 + h).zenith, 80.0)).count())
        .collect();
    let (min_day, &min) = counts.iter().enumerate().min_by_key(|(_, &c)| c).unwrap();
    let (max_day, &max) = counts.iter().enumerate().max_by_key(|(_, &c)| c).unwrap();
    assert!((4..=7).contains(&min), "winter minimum {min}");
    assert!((12..=14).contains(&max), "summer maximum {max}");
    assert!(!(60..300).contains(&min_day), "minimum on day {min_day}");
    assert!((120..240).contains(&max_day), "maximum on day {max_day}");
}
