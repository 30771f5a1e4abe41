//! Synthetic elevation models used in place of surveyed DEMs.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use hemulab_tensor::rng::substream;

use crate::raster::Raster;
use crate::terrain::DemGrid;
use crate::GeoError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DemKind {
    Flat { elevation: f64 },
    /// Plane rising toward `uphill_azimuth` (degrees from north) at `slope_deg`.
    Plane { slope_deg: f64, uphill_azimuth: f64 },
    Ridges,
    Valleys,
    Spikes,
    Fractal,
    /// Fractal relief on a broad massif, spanning valley floors to high peaks.
    Alpine { base: f64, relief: f64 },
}

/// Smooth lattice noise in [0, 1], wrapping with period `period` cells.
fn value_noise(rows: usize, cols: usize, period: usize, lattice: &[f64], lsize: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    let scale = lsize as f64 / period as f64;
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64 * scale, c as f64 * scale);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let s = |t: f64| t * t * (3.0 - 2.0 * t);
            let (sy, sx) = (s(fy), s(fx));
            let at = |i: usize, j: usize| lattice[(i % lsize) * lsize + (j % lsize)];
            let top = at(y0, x0) * (1.0 - sx) + at(y0, x0 + 1) * sx;
            let bot = at(y0 + 1, x0) * (1.0 - sx) + at(y0 + 1, x0 + 1) * sx;
            out.push(top * (1.0 - sy) + bot * sy);
        }
    }
    out
}

/// Sum of octaves of value noise, normalised to [0, 1].
pub fn fractal_noise(rows: usize, cols: usize, octaves: usize, seed: u64, label: &str) -> Vec<f64> {
    let mut rng = substream(seed, label);
    let mut acc = vec![0.0; rows * cols];
    let mut amp = 1.0;
    let mut lsize = 4usize;
    let span = rows.max(cols).max(1);
    for _ in 0..octaves.max(1) {
        let lattice: Vec<f64> = (0..lsize * lsize).map(|_| rng.gen::<f64>()).collect();
        let layer = value_noise(rows, cols, span, &lattice, lsize);
        for (a, v) in acc.iter_mut().zip(layer) {
            *a += amp * v;
        }
        amp *= 0.5;
        lsize *= 2;
    }
    let (lo, hi) = acc.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = (hi - lo).max(1e-12);
    acc.iter().map(|v| (v - lo) / range).collect()
}

pub fn synthetic_dem(kind: DemKind, rows: usize, cols: usize, cell_size: f64, seed: u64) -> Result<DemGrid, GeoError> {
    let mut rng = substream(seed, "dem");
    let data: Vec<f32> = match kind {
        DemKind::Flat { elevation } => vec![elevation as f32; rows * cols],
        DemKind::Plane { slope_deg, uphill_azimuth } => {
            let g = slope_deg.to_radians().tan();
            let a = uphill_azimuth.to_radians();
            let (ge, gn) = (g * a.sin(), g * a.cos());
            (0..rows * cols)
                .map(|i| {
                    let (r, c) = (i / cols, i % cols);
                    let (x, y) = (c as f64 * cell_size, -(r as f64) * cell_size);
                    (1000.0 + ge * x + gn * y) as f32
                })
                .collect()
        }
        DemKind::Ridges | DemKind::Valleys => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let wavelength = rng.gen_range(8.0..20.0);
            let amp = rng.gen_range(100.0..600.0);
            let sign = if matches!(kind, DemKind::Ridges) { 1.0 } else { -1.0 };
            (0..rows * cols)
                .map(|i| {
                    let (r, c) = ((i / cols) as f64, (i % cols) as f64);
                    let u = c * theta.cos() + r * theta.sin();
                    let crest = (u * std::f64::consts::TAU / wavelength).sin().abs();
                    (1500.0 + sign * amp * crest) as f32
                })
                .collect()
        }
        DemKind::Spikes => {
            let n = rng.gen_range(1..6);
            let spikes: Vec<(f64, f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.0..rows as f64),
                        rng.gen_range(0.0..cols as f64),
                        rng.gen_range(200.0..1500.0),
                        rng.gen_range(0.8..3.0),
                    )
                })
                .collect();
            (0..rows * cols)
                .map(|i| {
                    let (r, c) = ((i / cols) as f64, (i % cols) as f64);
                    let z: f64 = spikes
                        .iter()
                        .map(|&(sr, sc, h, w)| h * (-((r - sr).powi(2) + (c - sc).powi(2)) / (2.0 * w * w)).exp())
                        .sum();
                    (500.0 + z) as f32
                })
                .collect()
        }
        DemKind::Fractal => {
            let relief = rng.gen_range(300.0..2500.0);
            fractal_noise(rows, cols, 5, seed, "dem/fractal")
                .into_iter()
                .map(|v| (200.0 + relief * v) as f32)
                .collect()
        }
        DemKind::Alpine { base, relief } => {
            let noise = fractal_noise(rows, cols, 5, seed, "dem/alpine");
            let (cr, cc) = (rows as f64 / 2.0, cols as f64 / 2.0);
            let radius = rows.max(cols) as f64 / 2.0;
            noise
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    let (r, c) = ((i / cols) as f64, (i % cols) as f64);
                    let d = ((r - cr).powi(2) + (c - cc).powi(2)).sqrt() / radius;
                    let massif = (1.0 - d * d).max(0.0);
                    (base + relief * (0.55 * massif + 0.45 * v)) as f32
                })
                .collect()
        }
    };
    DemGrid::new(Raster::new(rows, cols, data)?, cell_size, (0.0, 0.0))
}
