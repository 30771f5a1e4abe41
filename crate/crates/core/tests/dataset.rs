use chrono::Duration;
use hemulab::dataset::{build_windows, window_ends, Dataset, Split, Splits, Stat, WindowReader, WindowSpec};
use hemulab::scene::{generate, SceneConfig};
use proptest::prelude::*;
use std::sync::OnceLock;

fn scene() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let cfg = SceneConfig { rows: 8, cols: 10, years: 3, hours_per_year: 24 * 4, horizon_sectors: 16, ..SceneConfig::default() };
        generate(&cfg).unwrap()
    })
}

#[test]
fn stat_examples() {
    let s = Stat::of([1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(s.mean, 2.5);
    assert!((s.std - 1.25f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.normalize(2.5), 0.0);
    let c = Stat::of([7.0; 5]).unwrap();
    assert_eq!(c.std, 1e-6);
    assert!(Stat::of(std::iter::empty()).is_err());
}

proptest! {
    #[test]
    fn normalisation_round_trips(v in -1e3f32..1e3, mean in -100.0f64..100.0, std in 0.1f64..50.0) {
        let s = Stat { mean, std };
        prop_assert!((s.denormalize(s.normalize(v)) - v).abs() <= 1e-3);
    }
}

#[test]
fn channels_follow_manifest_order() {
    let ds = scene();
    let base = ds.input_channels(false);
    assert_eq!(base, ["hrv", "ir_016", "ir_087", "sza", "saz", "dem", "slope", "aspect_sin", "aspect_cos", "f_corr"]);
    let with = ds.input_channels(true);
    assert_eq!(with.len(), base.len() + 1);
    assert_eq!(with.last().unwrap(), "albedo");
    assert_ne!(WindowSpec::new(ds, 1, true).channel_hash(), WindowSpec::new(ds, 1, false).channel_hash());
    assert_eq!(WindowSpec::new(ds, 1, true).without("albedo"), WindowSpec::new(ds, 1, false));
}

#[test]
fn split_is_year_disjoint() {
    let ds = scene();
    let s = ds.split().unwrap();
    let years = &ds.manifest.frame_years;
    assert_eq!(s.train.start, 0);
    assert_eq!(s.train.end, s.val.start);
    assert_eq!(s.val.end, s.test.start);
    assert_eq!(s.test.end, ds.n_frames());
    assert!(s.train.clone().all(|t| years[t] == 0));
    assert!(s.val.clone().all(|t| years[t] == 1));
    assert!(s.test.clone().all(|t| years[t] == 2));
    for t in 0..ds.n_frames() {
        assert!(s.of_frame(t).is_some());
    }
    let short = generate(&SceneConfig { rows: 4, cols: 4, years: 2, hours_per_year: 48, horizon_sectors: 8, ..SceneConfig::default() }).unwrap();
    assert!(short.split().is_err());
}

#[test]
fn window_counts_match_a_counting_oracle() {
    let splits = Splits { train: 0..10, val: 10..14, test: 14..20 };
    for t in 1..=7 {
        for split in [Split::Train, Split::Val, Split::Test] {
            let r = splits.range(split);
            let oracle: Vec<usize> = r.clone().filter(|&e| e >= r.start + t - 1).collect();
            let (ends, skipped) = window_ends(&splits, split, t);
            assert_eq!(ends, oracle);
            assert_eq!(ends.len() + skipped, r.len());
        }
    }
}

#[test]
fn windows_never_straddle_splits() {
    let ds = scene();
    let splits = ds.split().unwrap();
    for t in [1, 5, 16] {
        for split in [Split::Train, Split::Val, Split::Test] {
            let (ends, _) = window_ends(&splits, split, t);
            for e in ends {
                assert!((e + 1 - t..=e).all(|f| splits.of_frame(f) == Some(split)));
            }
        }
    }
}

#[test]
fn window_content_spans_night_gaps() {
    let ds = scene();
    let spec = WindowSpec::new(ds, 5, true);
    let reader = WindowReader::new(ds, &spec).unwrap();
    let splits = ds.split().unwrap();
    let (ends, _) = window_ends(&splits, Split::Train, 5);
    let end = *ends.iter().find(|&&e| (e - 4..e).any(|f| ds.timestamp(f + 1) - ds.timestamp(f) > Duration::hours(1))).unwrap();
    let w = reader.window(end).unwrap();
    let (h, wd, c) = (ds.rows(), ds.cols(), spec.channels.len());
    assert_eq!(w.x.shape(), [5, h, wd, c]);
    assert_eq!(w.y.shape(), [h, wd]);
    assert_eq!(w.timestamp, ds.timestamp(end));
    for (ti, frame) in (end - 4..=end).enumerate() {
        for (ci, name) in spec.channels.iter().enumerate() {
            let stat = ds.stats.get(name).unwrap();
            let raw = ds.get(name, frame).unwrap();
            for p in [0, 13, h * wd - 1] {
                assert_eq!(w.x.data()[(ti * h * wd + p) * c + ci], stat.normalize(raw[p]));
            }
        }
    }
    let target = ds.stats.get("ssr").unwrap();
    let g = ds.get("ssr", end).unwrap();
    assert!(w.y.data().iter().zip(g.iter()).all(|(&y, &v)| y == target.normalize(v)));
}

#[test]
fn build_windows_yields_every_end_in_order() {
    let ds = scene();
    let spec = WindowSpec::new(ds, 3, false);
    let reader = WindowReader::new(ds, &spec).unwrap();
    let splits = ds.split().unwrap();
    let (iter, skipped) = build_windows(&reader, &splits, Split::Val);
    let ends: Vec<usize> = iter.map(|w| w.unwrap().end).collect();
    assert_eq!(skipped, 2);
    assert_eq!(ends, window_ends(&splits, Split::Val, 3).0);
}

#[test]
fn crops_and_patches_read_the_right_pixels() {
    let ds = scene();
    let spec = WindowSpec::new(ds, 1, false);
    let reader = WindowReader::new(ds, &spec).unwrap();
    let crop = reader.input(7, 2, 3, 4, 5).unwrap();
    let full = reader.input(7, 0, 0, ds.rows(), ds.cols()).unwrap();
    let c = spec.channels.len();
    for r in 0..4 {
        for col in 0..5 {
            for ch in 0..c {
                assert_eq!(crop.data()[(r * 5 + col) * c + ch], full.data()[((r + 2) * ds.cols() + col + 3) * c + ch]);
            }
        }
    }
    assert!(reader.input(7, 6, 0, 4, 4).is_err());
    let mut patch = Vec::new();
    reader.patch(7, 0, 0, 3, &mut patch).unwrap();
    assert_eq!(patch.len(), 9 * c);
    let hrv = ds.get("hrv", 7).unwrap();
    let stat = ds.stats.get("hrv").unwrap();
    let cols = ds.cols();
    let expect = [hrv[cols + 1], hrv[cols], hrv[cols + 1], hrv[1], hrv[0], hrv[1], hrv[cols + 1], hrv[cols], hrv[cols + 1]];
    assert!(patch[..9].iter().zip(expect).all(|(&p, v)| p == stat.normalize(v)));
}

#[test]
fn stats_come_from_the_training_years() {
    let ds = scene();
    let splits = ds.split().unwrap();
    assert_eq!(ds.compute_stats(splits.train.clone()).unwrap(), ds.stats);
    let mut vals = Vec::new();
    for t in splits.train.clone() {
        vals.extend_from_slice(&ds.get("hrv", t).unwrap());
    }
    assert_eq!(Stat::of(vals).unwrap(), ds.stats.get("hrv").unwrap());
    assert!(ds.compute_stats(0..0).is_err());
}

#[test]
fn write_read_round_trip_is_bitwise() {
    let ds = scene();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(&back, ds);
    assert!(!dir.path().join("blobs/ssr").exists());
    let dir2 = tempfile::tempdir().unwrap();
    back.write(dir2.path()).unwrap();
    for f in ["manifest.json", "stats.json", "blobs/hrv/3.f32", "blobs/dem/0.f32"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap());
    }
}

#[test]
fn corrupt_datasets_are_rejected() {
    let ds = scene();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    std::fs::write(dir.path().join("blobs/hrv/0.f32"), [0u8; 12]).unwrap();
    assert!(Dataset::read(dir.path()).is_err());
    ds.write(dir.path()).unwrap();
    let m = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    std::fs::write(dir.path().join("manifest.json"), m.replace("hemulab-dataset/1", "other/9")).unwrap();
    assert!(Dataset::read(dir.path()).is_err());
    assert!(Dataset::read(&dir.path().join("missing")).is_err());
}

#[test]
fn readers_reject_unknown_channels_and_zero_context() {
    let ds = scene();
    let spec = WindowSpec { context: 1, channels: vec!["nope".into()] };
    assert!(WindowReader::new(ds, &spec).is_err());
    assert!(WindowReader::new(ds, &WindowSpec::new(ds, 0, false)).is_err());
    let reader = WindowReader::new(ds, &WindowSpec::new(ds, 4, false)).unwrap();
    assert!(reader.window(2).is_err());
    assert!(reader.window(ds.n_frames()).is_err());
}

#[test]
fn dummy_channel_is_zero_and_unique() {
    let ds = scene().clone().with_dummy_channel("dummy").unwrap();
    assert!(ds.get("dummy", 3).unwrap().iter().all(|&v| v == 0.0));
    assert!(ds.input_channels(false).contains(&"dummy".to_string()));
    let reader = WindowReader::new(&ds, &WindowSpec::new(&ds, 1, false)).unwrap();
    let x = reader.window(0).unwrap().x;
    let c = ds.input_channels(false).len();
    let idx = ds.input_channels(false).iter().position(|n| n == "dummy").unwrap();
    assert!(x.data().iter().skip(idx).step_by(c).all(|&v| v == 0.0));
    assert!(ds.with_dummy_channel("dummy").is_err());
}
