mod oracle;

use hemulab_geo::synthetic::{synthetic_dem, DemKind};
use hemulab_geo::{
    f_corr, read_raster, shadow_mask, slope_aspect, sun_vector, terrain_features, write_raster, DemGrid, HorizonMap,
    Raster, SunPosition, F_CORR_MAX,
};
use oracle::ray_march_shadow;
use proptest::prelude::*;
use rand::Rng;

fn sun(zenith: f64, azimuth: f64) -> hemulab_geo::SunVector {
    sun_vector(SunPosition { zenith, azimuth })
}

fn flat(n: usize) -> DemGrid {
    synthetic_dem(DemKind::Flat { elevation: 750.0 }, n, n, 90.0, 0).unwrap()
}

fn mask_as_bools(r: &Raster) -> Vec<bool> {
    r.data().iter().map(|&v| v != 0.0).collect()
}

#[test]
fn flat_dem_has_zero_slope_and_vertical_normals() {
    let sa = slope_aspect(&flat(8)).unwrap();
    assert!(sa.slope.data().iter().all(|&s| s == 0.0));
    assert!(sa.normals.data.iter().all(|n| *n == [0.0, 0.0, 1.0]));
}

#[test]
fn tiny_dem_is_rejected() {
    let dem = DemGrid::new(Raster::filled(2, 5, 1.0), 30.0, (0.0, 0.0)).unwrap();
    assert!(slope_aspect(&dem).is_err());
    assert!(DemGrid::new(Raster::filled(3, 3, 1.0), 0.0, (0.0, 0.0)).is_err());
}

#[test]
fn eastward_rising_plane_faces_west() {
    let dem = synthetic_dem(DemKind::Plane { slope_deg: 30.0, uphill_azimuth: 90.0 }, 9, 9, 25.0, 0).unwrap();
    let sa = slope_aspect(&dem).unwrap();
    for r in 1..8 {
        for c in 1..8 {
            assert!((sa.slope.get(r, c) as f64 - 30f64.to_radians()).abs() < 1e-4);
            assert!((sa.aspect.get(r, c) - 270.0).abs() < 1e-3, "aspect {}", sa.aspect.get(r, c));
        }
    }
    // Border cells use simple differences, which are exact on a plane too.
    assert!((sa.slope.get(0, 0) as f64 - 30f64.to_radians()).abs() < 1e-4);
}

#[test]
fn aspect_points_downhill_for_each_compass_direction() {
    for (uphill, downhill) in [(0.0, 180.0), (90.0, 270.0), (180.0, 0.0), (270.0, 90.0), (45.0, 225.0)] {
        let dem = synthetic_dem(DemKind::Plane { slope_deg: 20.0, uphill_azimuth: uphill }, 7, 7, 30.0, 0).unwrap();
        let a = slope_aspect(&dem).unwrap().aspect.get(3, 3) as f64;
        let d = (a - downhill).rem_euclid(360.0);
        assert!(d.min(360.0 - d) < 1e-2, "uphill {uphill}: aspect {a}");
    }
}

#[test]
fn flat_terrain_is_never_shadowed() {
    let dem = flat(16);
    for (z, a) in [(0.0, 0.0), (45.0, 10.0), (85.0, 250.0), (89.9, 90.0)] {
        assert!(shadow_mask(&dem, sun(z, a)).data().iter().all(|&v| v == 0.0));
    }
    assert!(shadow_mask(&dem, sun(95.0, 180.0)).data().iter().all(|&v| v == 1.0));
}

#[test]
fn overhead_sun_casts_no_shadow() {
    let dem = synthetic_dem(DemKind::Spikes, 32, 32, 30.0, 4).unwrap();
    assert!(shadow_mask(&dem, sun(0.0, 0.0)).data().iter().all(|&v| v == 0.0));
}

#[test]
fn spike_casts_a_streak_away_from_a_low_sun() {
    let mut dem = flat(33);
    dem.elevation.set(16, 16, 2000.0);
    let s = sun(80.0, 270.0);
    let mask = shadow_mask(&dem, s);
    assert_eq!(mask_as_bools(&mask), ray_march_shadow(&dem, s));
    let shaded: Vec<usize> = (0..33).filter(|&c| mask.get(16, c) != 0.0).collect();
    assert!(!shaded.is_empty());
    assert!(shaded.iter().all(|&c| c > 16), "shadow must fall east of the spike");
    let contiguous = shaded.windows(2).all(|w| w[1] == w[0] + 1);
    assert!(contiguous && shaded[0] == 17, "streak {shaded:?}");
    for r in [0, 5, 28, 32] {
        assert!((0..33).all(|c| mask.get(r, c) == 0.0));
    }
}

#[test]
fn horizon_method_matches_ray_march_on_random_relief() {
    let mut rng = hemulab_tensor::rng::substream(3, "shadow-corpus");
    let kinds = [DemKind::Ridges, DemKind::Valleys, DemKind::Spikes, DemKind::Fractal];
    for i in 0..8 {
        let dem = synthetic_dem(kinds[i % kinds.len()], 40, 40, 90.0, 100 + i as u64).unwrap();
        let s = sun(rng.gen_range(30.0..88.0), rng.gen_range(0.0..360.0));
        assert_eq!(mask_as_bools(&shadow_mask(&dem, s)), ray_march_shadow(&dem, s), "dem {i}");
    }
}

#[test]
fn sector_map_matches_exact_march_on_sector_azimuths() {
    let dem = synthetic_dem(DemKind::Fractal, 24, 24, 90.0, 9).unwrap();
    let map = HorizonMap::with_sectors(&dem, 8).unwrap();
    for &az in map.azimuths() {
        let s = sun(75.0, az);
        assert_eq!(map.shadow(s), shadow_mask(&dem, s));
    }
}

#[test]
fn f_corr_is_one_on_flat_open_terrain() {
    let dem = flat(10);
    let mut rng = hemulab_tensor::rng::substream(5, "flat-fcorr");
    for _ in 0..50 {
        let s = sun(rng.gen_range(0.0..89.0), rng.gen_range(0.0..360.0));
        let tf = terrain_features(&dem, s).unwrap();
        assert!(!tf.f_corr.below_horizon);
        assert!(tf.f_corr.values.data().iter().all(|&v| (v as f64 - 1.0).abs() < 1e-6));
    }
}

#[test]
fn shadowed_and_night_pixels_get_zero() {
    let dem = flat(6);
    let sa = slope_aspect(&dem).unwrap();
    let mut shadow = Raster::filled(6, 6, 0.0);
    shadow.set(2, 2, 1.0);
    let f = f_corr(&sa.normals, &shadow, sun(40.0, 100.0), F_CORR_MAX).unwrap();
    assert_eq!(f.values.get(2, 2), 0.0);
    assert!((f.values.get(0, 0) - 1.0).abs() < 1e-6);
    let night = f_corr(&sa.normals, &shadow, sun(90.0, 100.0), F_CORR_MAX).unwrap();
    assert!(night.below_horizon);
    assert!(night.values.data().iter().all(|&v| v == 0.0));
    assert!(f_corr(&sa.normals, &Raster::filled(5, 6, 0.0), sun(40.0, 0.0), F_CORR_MAX).is_err());
}

fn plane_fcorr(beta: f64, zenith: f64) -> f64 {
    // Plane rising eastward faces west; put the sun in the west.
    let dem = synthetic_dem(DemKind::Plane { slope_deg: beta, uphill_azimuth: 90.0 }, 9, 9, 30.0, 0).unwrap();
    let tf = terrain_features(&dem, sun(zenith, 270.0)).unwrap();
    tf.f_corr.values.get(4, 4) as f64
}

#[test]
fn sun_facing_plane_matches_dot_product() {
    let f = plane_fcorr(30.0, 60.0);
    let (b, t) = (30f64.to_radians(), 60f64.to_radians());
    let expect = (t - b).cos() / (t.cos() * b.cos());
    assert!((expect - 2.0).abs() < 1e-12);
    assert!((f - 2.0).abs() < 1e-4, "f_corr {f}");
}

#[test]
fn f_corr_grows_as_slope_turns_toward_sun() {
    let mut prev = 0.0;
    for beta in [0.0, 10.0, 20.0, 30.0, 40.0, 50.0] {
        let f = plane_fcorr(beta, 60.0);
        assert!(f > prev, "beta {beta}: {f} <= {prev}");
        prev = f;
    }
}

#[test]
fn feature_rasters_round_trip_through_sidecar_format() {
    let dem = synthetic_dem(DemKind::Fractal, 12, 10, 90.0, 2).unwrap();
    let tf = terrain_features(&dem, sun(50.0, 200.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, r) in [("dem", &dem.elevation), ("slope", &tf.slope), ("f_corr", &tf.f_corr.values)] {
        let p = write_raster(dir.path(), name, r, dem.cell_size, [0.0, 0.0]).unwrap();
        assert_eq!(&read_raster(&p).unwrap().1, r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn terrain_invariants_hold_on_fractal_relief(seed in 0u64..10_000, z in 0.0f64..89.0, a in 0.0f64..360.0) {
        let dem = synthetic_dem(DemKind::Fractal, 16, 16, 90.0, seed).unwrap();
        let tf = terrain_features(&dem, sun(z, a)).unwrap();
        for i in 0..dem.elevation.len() {
            let (s, c) = (tf.aspect_sin.data()[i] as f64, tf.aspect_cos.data()[i] as f64);
            prop_assert!((s * s + c * c - 1.0).abs() < 1e-6);
            let n = tf.normals.data[i];
            prop_assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-12);
            let f = tf.f_corr.values.data()[i];
            prop_assert!((0.0..=F_CORR_MAX as f32).contains(&f));
            if tf.shadow.data()[i] != 0.0 {
                prop_assert_eq!(f, 0.0);
            }
        }
    }
}
