//! Slope, aspect, cast shadows and the direct-beam illumination correction.
//!
//! Grid convention: row 0 is north, columns increase eastward, `cell_size`
//! is the planimetric spacing in metres along both axes.

use std::collections::VecDeque;

use crate::raster::Raster;
use crate::solar::{SunVector, wrap360};
use crate::GeoError;

#[derive(Clone, Debug, PartialEq)]
pub struct DemGrid {
    pub elevation: Raster,
    pub cell_size: f64,
    pub origin: (f64, f64),
}

impl DemGrid {
    /// Validates the grid and fills non-finite cells from their nearest
    /// valid neighbour.
    pub fn new(mut elevation: Raster, cell_size: f64, origin: (f64, f64)) -> Result<Self, GeoError> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(GeoError::InvalidArgument(format!("cell_size must be positive, got {cell_size}")));
        }
        if elevation.is_empty() {
            return Err(GeoError::DegenerateRaster { rows: elevation.rows(), cols: elevation.cols() });
        }
        fill_holes(&mut elevation)?;
        Ok(DemGrid { elevation, cell_size, origin })
    }

    pub fn rows(&self) -> usize {
        self.elevation.rows()
    }

    pub fn cols(&self) -> usize {
        self.elevation.cols()
    }
}

/// Multi-source breadth-first fill over 4-neighbours.
pub fn fill_holes(r: &mut Raster) -> Result<usize, GeoError> {
    let (rows, cols) = (r.rows(), r.cols());
    let mut queue = VecDeque::new();
    let mut holes = 0;
    for i in 0..rows {
        for j in 0..cols {
            if r.get(i, j).is_finite() {
                queue.push_back((i, j));
            } else {
                holes += 1;
            }
        }
    }
    if holes == 0 {
        return Ok(0);
    }
    if queue.is_empty() {
        return Err(GeoError::InvalidArgument("DEM has no valid cells".into()));
    }
    while let Some((i, j)) = queue.pop_front() {
        let v = r.get(i, j);
        let mut visit = |ni: usize, nj: usize, q: &mut VecDeque<(usize, usize)>| {
            if !r.get(ni, nj).is_finite() {
                r.set(ni, nj, v);
                q.push_back((ni, nj));
            }
        };
        if i > 0 {
            visit(i - 1, j, &mut queue);
        }
        if i + 1 < rows {
            visit(i + 1, j, &mut queue);
        }
        if j > 0 {
            visit(i, j - 1, &mut queue);
        }
        if j + 1 < cols {
            visit(i, j + 1, &mut queue);
        }
    }
    Ok(holes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalField {
    pub rows: usize,
    pub cols: usize,
    /// Unit (east, north, up) normals, row-major.
    pub data: Vec<[f64; 3]>,
}

impl NormalField {
    pub fn get(&self, r: usize, c: usize) -> [f64; 3] {
        self.data[r * self.cols + c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeAspect {
    /// Radians.
    pub slope: Raster,
    /// Downslope direction, degrees clockwise from north.
    pub aspect: Raster,
    pub aspect_sin: Raster,
    pub aspect_cos: Raster,
    pub normals: NormalField,
}

/// Horn 3×3 gradients in the interior, simple differences on the border.
fn gradient(dem: &DemGrid, r: usize, c: usize) -> (f64, f64) {
    let z = |i: usize, j: usize| dem.elevation.get(i, j) as f64;
    let (rows, cols, h) = (dem.rows(), dem.cols(), dem.cell_size);
    if r > 0 && c > 0 && r + 1 < rows && c + 1 < cols {
        let east = z(r - 1, c + 1) + 2.0 * z(r, c + 1) + z(r + 1, c + 1);
        let west = z(r - 1, c - 1) + 2.0 * z(r, c - 1) + z(r + 1, c - 1);
        let north = z(r - 1, c - 1) + 2.0 * z(r - 1, c) + z(r - 1, c + 1);
        let south = z(r + 1, c - 1) + 2.0 * z(r + 1, c) + z(r + 1, c + 1);
        return ((east - west) / (8.0 * h), (north - south) / (8.0 * h));
    }
    let (c0, c1) = (c.saturating_sub(1), (c + 1).min(cols - 1));
    let (r0, r1) = (r.saturating_sub(1), (r + 1).min(rows - 1));
    let p = (z(r, c1) - z(r, c0)) / ((c1 - c0) as f64 * h);
    let q = (z(r0, c) - z(r1, c)) / ((r1 - r0) as f64 * h);
    (p, q)
}

pub fn slope_aspect(dem: &DemGrid) -> Result<SlopeAspect, GeoError> {
    let (rows, cols) = (dem.rows(), dem.cols());
    if rows < 3 || cols < 3 {
        return Err(GeoError::DegenerateRaster { rows, cols });
    }
    let mut slope = Raster::filled(rows, cols, 0.0);
    let mut aspect = Raster::filled(rows, cols, 0.0);
    let mut aspect_sin = Raster::filled(rows, cols, 0.0);
    let mut aspect_cos = Raster::filled(rows, cols, 1.0);
    let mut normals = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (p, q) = gradient(dem, r, c);
            let g = p.hypot(q);
            slope.set(r, c, g.atan() as f32);
            if g > 0.0 {
                let a = (-p).atan2(-q);
                aspect.set(r, c, wrap360(a.to_degrees()) as f32);
                aspect_sin.set(r, c, (-p / g) as f32);
                aspect_cos.set(r, c, (-q / g) as f32);
            }
            let n = (p * p + q * q + 1.0).sqrt();
            normals.push([-p / n, -q / n, 1.0 / n]);
        }
    }
    Ok(SlopeAspect {
        slope,
        aspect,
        aspect_sin,
        aspect_cos,
        normals: NormalField { rows, cols, data: normals },
    })
}

/// Grid-space step toward azimuth `az_deg`: (d_row, d_col) per cell.
pub fn march_direction(az_deg: f64) -> (f64, f64) {
    let a = az_deg.to_radians();
    (-a.cos(), a.sin())
}

/// Fraction of a cell advanced per ray-march sample.
pub const MARCH_STEP: f64 = 0.5;

/// Steepest terrain elevation angle (as a tangent) seen from cell (r, c)
/// looking toward `az_deg`. Zero-distance samples are never taken.
fn horizon_tangent(dem: &DemGrid, zmax: f64, r: usize, c: usize, az_deg: f64) -> f64 {
    let (dr, dc) = march_direction(az_deg);
    let z0 = dem.elevation.get(r, c) as f64;
    let mut best = f64::NEG_INFINITY;
    let mut k = 1usize;
    loop {
        let t = k as f64 * MARCH_STEP;
        let dist = t * dem.cell_size;
        if best.is_finite() && (zmax - z0) / dist <= best {
            break;
        }
        let Some(z) = dem.elevation.bilinear(r as f64 + t * dr, c as f64 + t * dc) else {
            break;
        };
        best = best.max((z - z0) / dist);
        k += 1;
    }
    best
}

/// Per-pixel horizon tangents for a set of azimuth sectors.
#[derive(Clone, Debug)]
pub struct HorizonMap {
    rows: usize,
    cols: usize,
    azimuths: Vec<f64>,
    /// `tangents[s][pixel]`; `-inf` when the ray leaves the grid immediately.
    tangents: Vec<Vec<f64>>,
}

impl HorizonMap {
    pub fn compute(dem: &DemGrid, azimuths: &[f64]) -> Result<Self, GeoError> {
        if azimuths.is_empty() {
            return Err(GeoError::InvalidArgument("horizon map needs at least one azimuth".into()));
        }
        let zmax = dem.elevation.max() as f64;
        let (rows, cols) = (dem.rows(), dem.cols());
        let tangents = azimuths
            .iter()
            .map(|&az| {
                let mut v = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        v.push(horizon_tangent(dem, zmax, r, c, az));
                    }
                }
                v
            })
            .collect();
        Ok(HorizonMap { rows, cols, azimuths: azimuths.iter().map(|&a| wrap360(a)).collect(), tangents })
    }

    /// `n` equally spaced sectors starting at north.
    pub fn with_sectors(dem: &DemGrid, n: usize) -> Result<Self, GeoError> {
        let az: Vec<f64> = (0..n).map(|i| i as f64 * 360.0 / n as f64).collect();
        Self::compute(dem, &az)
    }

    pub fn azimuths(&self) -> &[f64] {
        &self.azimuths
    }

    fn nearest_sector(&self, az: f64) -> usize {
        let az = wrap360(az);
        let mut best = (0, f64::INFINITY);
        for (i, &a) in self.azimuths.iter().enumerate() {
            let d = (a - az).abs();
            let d = d.min(360.0 - d);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// 1 where terrain in the nearest sector rises above the sun, else 0.
    /// Everything is shadowed once the sun is at or below the horizon.
    pub fn shadow(&self, s: SunVector) -> Raster {
        if s.up() <= 0.0 {
            return Raster::filled(self.rows, self.cols, 1.0);
        }
        let pos = s.to_position();
        let tan_elev = s.up() / s.east().hypot(s.north());
        let tangents = &self.tangents[self.nearest_sector(pos.azimuth)];
        let data = tangents.iter().map(|&t| if t > tan_elev { 1.0 } else { 0.0 }).collect();
        Raster::new(self.rows, self.cols, data).expect("shape fixed at construction")
    }
}

/// Cast-shadow mask for one sun direction, marched along its exact azimuth.
pub fn shadow_mask(dem: &DemGrid, s: SunVector) -> Raster {
    if s.up() <= 0.0 {
        return Raster::filled(dem.rows(), dem.cols(), 1.0);
    }
    if s.east().hypot(s.north()) == 0.0 {
        return Raster::filled(dem.rows(), dem.cols(), 0.0);
    }
    HorizonMap::compute(dem, &[s.to_position().azimuth])
        .expect("one azimuth")
        .shadow(s)
}

pub const F_CORR_MAX: f64 = 10.0;
const HORIZON_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FcorrField {
    pub values: Raster,
    /// Sun at or below the horizon; `values` is all zero.
    pub below_horizon: bool,
}

/// `(1/h·s)(1/h·t)·(1 − shadow)·max(t·s, 0)`, clipped to `[0, f_max]`.
pub fn f_corr(normals: &NormalField, shadow: &Raster, s: SunVector, f_max: f64) -> Result<FcorrField, GeoError> {
    if shadow.rows() != normals.rows || shadow.cols() != normals.cols {
        return Err(GeoError::InvalidArgument(format!(
            "shadow {}x{} does not match normals {}x{}",
            shadow.rows(),
            shadow.cols(),
            normals.rows,
            normals.cols
        )));
    }
    let (rows, cols) = (normals.rows, normals.cols);
    if s.up() <= HORIZON_EPS {
        return Ok(FcorrField { values: Raster::filled(rows, cols, 0.0), below_horizon: true });
    }
    let sv = s.0;
    let data = normals
        .data
        .iter()
        .zip(shadow.data())
        .map(|(t, &sh)| {
            if sh != 0.0 {
                return 0.0;
            }
            let ts = (t[0] * sv[0] + t[1] * sv[1] + t[2] * sv[2]).max(0.0);
            (ts / (sv[2] * t[2])).clamp(0.0, f_max) as f32
        })
        .collect();
    Ok(FcorrField { values: Raster::new(rows, cols, data)?, below_horizon: false })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainFeatures {
    pub slope: Raster,
    pub aspect_sin: Raster,
    pub aspect_cos: Raster,
    pub normals: NormalField,
    pub shadow: Raster,
    pub f_corr: FcorrField,
}

pub fn terrain_features(dem: &DemGrid, s: SunVector) -> Result<TerrainFeatures, GeoError> {
    let sa = slope_aspect(dem)?;
    let shadow = shadow_mask(dem, s);
    let f = f_corr(&sa.normals, &shadow, s, F_CORR_MAX)?;
    Ok(TerrainFeatures {
        slope: sa.slope,
        aspect_sin: sa.aspect_sin,
        aspect_cos: sa.aspect_cos,
        normals: sa.normals,
        shadow,
        f_corr: f,
    })
}
