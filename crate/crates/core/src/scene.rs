//! Synthetic satellite scenes with known surface-solar-radiation targets.
//!
//! Surface albedo evolves slowly (snow events above a moving snow line,
//! temperature-driven melt); clouds are two advected noise layers whose
//! coverage drifts over days. The visible channel sees the clear-sky
//! background brightened towards the overcast bound by the cloud optical
//! state, and the target follows the cloud-index / clear-sky-index chain.

use chrono::{DateTime, Datelike, Duration, TimeZone, Utc};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use hemulab_geo::solar::{hour_of_year, sun_vector, HourlySunCache, LatLonGrid, SunPosition, DAYLIGHT_ZENITH_DEG};
use hemulab_geo::synthetic::{fractal_noise, synthetic_dem, DemKind};
use hemulab_geo::terrain::{f_corr, slope_aspect, HorizonMap, F_CORR_MAX};
use hemulab_tensor::rng::substream;

use crate::dataset::{config_hash, Dataset, DatasetManifest, GridMeta, Role, Storage, VarData, Variable, FORMAT, STATS_FILE};
use crate::{Error, Result};

pub use crate::dataset::Dataset as SceneSequence;

pub const CLOUD_INDEX_MIN: f32 = -0.2;
pub const CLOUD_INDEX_MAX: f32 = 1.1;
pub const KT_MAX: f32 = 1.2;
pub const ALBEDO_MIN: f64 = 0.05;
pub const ALBEDO_MAX: f64 = 0.95;
const DENOM_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlbedoConfig {
    /// Snow-free albedo spans this range across the map.
    pub ground_min: f64,
    pub ground_max: f64,
    pub snow: f64,
    /// Daily snowfall probability in mid-winter and mid-summer.
    pub event_prob_winter: f64,
    pub event_prob_summer: f64,
    /// Mean snow line (m) in mid-winter and mid-summer.
    pub snowline_winter: f64,
    pub snowline_summer: f64,
    pub snowline_jitter: f64,
    /// Elevation band (m) over which new snow ramps from none to full.
    pub snow_ramp: f64,
    /// Amplitude (m) of the fixed spatial perturbation of the snow line.
    pub patchiness: f64,
    pub amount_min: f64,
    pub amount_max: f64,
    /// Sea-level air temperature (°C) in mid-winter and mid-summer.
    pub temp_winter: f64,
    pub temp_summer: f64,
    pub lapse_rate: f64,
    /// Melt fraction per day at or below 0 °C and its gain per degree.
    pub melt_base: f64,
    pub melt_per_degree: f64,
}

impl Default for AlbedoConfig {
    fn default() -> Self {
        AlbedoConfig {
            ground_min: 0.10,
            ground_max: 0.25,
            snow: 0.80,
            event_prob_winter: 0.22,
            event_prob_summer: 0.05,
            snowline_winter: 700.0,
            snowline_summer: 2700.0,
            snowline_jitter: 500.0,
            snow_ramp: 400.0,
            patchiness: 300.0,
            amount_min: 0.4,
            amount_max: 1.0,
            temp_winter: 2.0,
            temp_summer: 22.0,
            lapse_rate: 0.0065,
            melt_base: 0.08,
            melt_per_degree: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudMode {
    Random,
    Clear,
    Overcast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudConfig {
    pub mode: CloudMode,
    /// Period (cells) of the tileable noise layers.
    pub period: usize,
    pub octaves: usize,
    /// Advection of the two layers in cells per hour, `[east, south]`.
    pub velocity_a: [f64; 2],
    pub velocity_b: [f64; 2],
    pub layer_weight: f64,
    pub coverage_mean: f64,
    pub coverage_min: f64,
    pub coverage_max: f64,
    /// Correlation time of the coverage regime.
    pub regime_hours: f64,
    /// Width of the soft cloud edge in noise units.
    pub edge: f64,
    pub optical_min: f64,
    pub optical_max: f64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            mode: CloudMode::Random,
            period: 64,
            octaves: 4,
            velocity_a: [2.9, 1.7],
            velocity_b: [-1.3, 3.1],
            layer_weight: 0.6,
            coverage_mean: 0.4,
            coverage_min: 0.05,
            coverage_max: 0.85,
            regime_hours: 36.0,
            edge: 0.06,
            optical_min: 0.3,
            optical_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClearSkyConfig {
    pub solar_constant: f64,
    pub transmittance: f64,
    /// Fractional brightening per metre of elevation.
    pub elevation_gain: f64,
}

impl Default for ClearSkyConfig {
    fn default() -> Self {
        ClearSkyConfig { solar_constant: 1361.0, transmittance: 0.75, elevation_gain: 5e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub visible: f64,
    pub infrared: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { visible: 0.005, infrared: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub rows: usize,
    pub cols: usize,
    pub start: DateTime<Utc>,
    pub years: usize,
    pub hours_per_year: usize,
    pub lat_north: f64,
    pub lon_west: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub dem: DemKind,
    pub cell_size: f64,
    pub n_infrared: usize,
    pub albedo: AlbedoConfig,
    pub clouds: CloudConfig,
    pub clear_sky: ClearSkyConfig,
    pub noise: NoiseConfig,
    pub rho_max: f64,
    pub horizon_sectors: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rows: 64,
            cols: 64,
            start: Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap(),
            years: 4,
            hours_per_year: 8760,
            lat_north: 47.8,
            lon_west: 6.0,
            dlat: 0.05,
            dlon: 0.05,
            dem: DemKind::Alpine { base: 400.0, relief: 3200.0 },
            cell_size: 1500.0,
            n_infrared: 2,
            albedo: AlbedoConfig::default(),
            clouds: CloudConfig::default(),
            clear_sky: ClearSkyConfig::default(),
            noise: NoiseConfig::default(),
            rho_max: 0.9,
            horizon_sectors: 72,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rows < 3 || self.cols < 3 {
            return bad(format!("grid {}x{} is smaller than 3x3", self.rows, self.cols));
        }
        if self.years == 0 || self.hours_per_year == 0 {
            return bad("scene must simulate at least one hour".into());
        }
        let a = &self.albedo;
        if !(ALBEDO_MIN..=ALBEDO_MAX).contains(&a.ground_min)
            || !(ALBEDO_MIN..=ALBEDO_MAX).contains(&a.ground_max)
            || !(ALBEDO_MIN..=ALBEDO_MAX).contains(&a.snow)
            || a.ground_min > a.ground_max
        {
            return bad(format!("albedo values must lie in [{ALBEDO_MIN}, {ALBEDO_MAX}]"));
        }
        if a.ground_max.max(a.snow) >= self.rho_max - DENOM_EPS {
            return bad(format!("rho_max {} must exceed the brightest clear-sky reflectance", self.rho_max));
        }
        if a.amount_min > a.amount_max || a.amount_min < 0.0 || a.snow_ramp <= 0.0 {
            return bad("invalid snow amount or ramp".into());
        }
        let c = &self.clouds;
        if c.period < 4 || c.edge <= 0.0 || !(0.0..=1.0).contains(&c.layer_weight) {
            return bad("invalid cloud layer settings".into());
        }
        if !(0.0 <= c.coverage_min && c.coverage_min <= c.coverage_mean && c.coverage_mean <= c.coverage_max && c.coverage_max <= 1.0) {
            return bad("cloud coverage must satisfy 0 <= min <= mean <= max <= 1".into());
        }
        if !(0.0 <= c.optical_min && c.optical_min <= c.optical_max && c.optical_max <= 1.0) {
            return bad("cloud optical state range must lie in [0, 1]".into());
        }
        if c.regime_hours <= 0.0 {
            return bad("regime_hours must be positive".into());
        }
        if self.noise.visible < 0.0 || self.noise.infrared < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if self.horizon_sectors == 0 {
            return bad("horizon_sectors must be positive".into());
        }
        if self.n_infrared == 0 {
            return bad("at least one infrared channel is required".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> LatLonGrid {
        LatLonGrid {
            rows: self.rows,
            cols: self.cols,
            lat_north: self.lat_north,
            lon_west: self.lon_west,
            dlat: self.dlat,
            dlon: self.dlon,
        }
    }

    pub fn hours(&self) -> usize {
        self.years * self.hours_per_year
    }
}

/// `(ρ − ρ_cs) / (ρ_max − ρ_cs)`, clamped to `[-0.2, 1.1]`.
pub fn cloud_index(rho: &[f32], rho_cs: &[f32], rho_max: f64) -> Result<Vec<f32>> {
    if rho.len() != rho_cs.len() {
        return Err(Error::Shape(format!("rho has {} values, rho_cs {}", rho.len(), rho_cs.len())));
    }
    let cs_max = rho_cs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    if rho_max <= cs_max + DENOM_EPS {
        return Err(Error::Data(format!("rho_max {rho_max} does not exceed clear-sky reflectance {cs_max}")));
    }
    Ok(rho
        .iter()
        .zip(rho_cs)
        .map(|(&r, &cs)| {
            let n = (r as f64 - cs as f64) / (rho_max - cs as f64);
            (n as f32).clamp(CLOUD_INDEX_MIN, CLOUD_INDEX_MAX)
        })
        .collect())
}

/// `k_T* = clamp(1 − n, 0, 1.2)`.
pub fn clearsky_index(n: &[f32]) -> Vec<f32> {
    n.iter().map(|&v| (1.0 - v).clamp(0.0, KT_MAX)).collect()
}

/// Horizontal clear-sky irradiance (W/m²) for per-pixel zenith angles (deg)
/// and elevations (m). Terrain illumination is not applied.
pub fn clearsky_irradiance(zenith_deg: &[f32], elevation: &[f32], cs: &ClearSkyConfig) -> Vec<f32> {
    zenith_deg
        .iter()
        .zip(elevation)
        .map(|(&z, &h)| {
            if z as f64 >= 90.0 {
                return 0.0;
            }
            let mu = (z as f64).to_radians().cos();
            let air_mass = 1.0 / mu.max(0.01);
            (cs.solar_constant * mu * cs.transmittance.powf(air_mass) * (1.0 + cs.elevation_gain * h as f64)).max(0.0) as f32
        })
        .collect()
}

/// Background reflectance `α · (0.7 + 0.3·cos(incidence))`.
pub fn background_reflectance(albedo: f64, incidence_deg: f64) -> f64 {
    albedo * (0.7 + 0.3 * incidence_deg.to_radians().cos().max(0.0))
}

/// Noise-free top-of-atmosphere reflectance: the background blended
/// towards `rho_max` by the cloud optical state.
pub fn reflectance(albedo: f64, cloud: f64, incidence_deg: f64, rho_max: f64) -> f64 {
    let cs = background_reflectance(albedo, incidence_deg);
    cs + cloud * (rho_max - cs)
}

/// Names of the infrared proxies.
pub fn infrared_names(n: usize) -> Vec<String> {
    const KNOWN: [&str; 2] = ["ir_016", "ir_087"];
    (0..n).map(|k| KNOWN.get(k).map(|s| s.to_string()).unwrap_or_else(|| format!("ir_{k}"))).collect()
}

/// `(offset, cloud gain, gain per km of elevation)` of infrared proxy `k`.
fn infrared_response(k: usize) -> (f64, f64, f64) {
    match k {
        0 => (0.15, 0.20, 0.0),
        1 => (0.90, -0.25, -0.04),
        _ => (0.5, if k.is_multiple_of(2) { 0.1 } else { -0.1 }, 0.0),
    }
}

/// Tileable noise sampled with wrap-around bilinear interpolation.
struct PeriodicField {
    period: usize,
    values: Vec<f64>,
}

impl PeriodicField {
    fn new(period: usize, octaves: usize, seed: u64, label: &str) -> Self {
        PeriodicField { period, values: fractal_noise(period, period, octaves, seed, label) }
    }

    fn sample(&self, y: f64, x: f64) -> f64 {
        let p = self.period as f64;
        let (y, x) = (y.rem_euclid(p), x.rem_euclid(p));
        let (y0, x0) = (y.floor() as usize % self.period, x.floor() as usize % self.period);
        let (y1, x1) = ((y0 + 1) % self.period, (x0 + 1) % self.period);
        let (fy, fx) = (y - y.floor(), x - x.floor());
        let at = |r: usize, c: usize| self.values[r * self.period + c];
        (at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx) * (1.0 - fy) + (at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx) * fy
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cloud optical state field generator.
struct CloudProcess {
    cfg: CloudConfig,
    layer_a: PeriodicField,
    layer_b: PeriodicField,
    optical: PeriodicField,
    /// Sorted samples of the combined noise, used as its quantile function.
    quantiles: Vec<f64>,
    regime: f64,
    phi: f64,
    offset: f64,
}

impl CloudProcess {
    fn new(cfg: &CloudConfig, seed: u64) -> Self {
        let layer_a = PeriodicField::new(cfg.period, cfg.octaves, seed, "scene/clouds/a");
        let layer_b = PeriodicField::new(cfg.period, cfg.octaves, seed, "scene/clouds/b");
        let optical = PeriodicField::new(cfg.period, 3, seed, "scene/clouds/optical");
        let mut rng = substream(seed, "scene/clouds/quantiles");
        let p = cfg.period as f64;
        let mut quantiles: Vec<f64> = (0..20_000)
            .map(|_| {
                let a = layer_a.sample(rng.gen::<f64>() * p, rng.gen::<f64>() * p);
                let b = layer_b.sample(rng.gen::<f64>() * p, rng.gen::<f64>() * p);
                cfg.layer_weight * a + (1.0 - cfg.layer_weight) * b
            })
            .collect();
        quantiles.sort_by(|a, b| a.partial_cmp(b).expect("finite noise"));
        let span = (cfg.coverage_max - cfg.coverage_min).max(1e-9);
        let m = ((cfg.coverage_mean - cfg.coverage_min) / span).clamp(1e-3, 1.0 - 1e-3);
        CloudProcess {
            cfg: cfg.clone(),
            layer_a,
            layer_b,
            optical,
            quantiles,
            regime: 0.0,
            phi: (-1.0 / cfg.regime_hours).exp(),
            offset: (m / (1.0 - m)).ln(),
        }
    }

    fn advance<R: Rng>(&mut self, rng: &mut R) {
        let e: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
        self.regime = self.phi * self.regime + (1.0 - self.phi * self.phi).sqrt() * e;
    }

    fn coverage(&self) -> f64 {
        let c = &self.cfg;
        c.coverage_min + (c.coverage_max - c.coverage_min) * logistic(1.7 * self.regime + self.offset)
    }

    fn threshold(&self, coverage: f64) -> f64 {
        let q = (1.0 - coverage).clamp(0.0, 1.0);
        let i = ((self.quantiles.len() - 1) as f64 * q).round() as usize;
        self.quantiles[i]
    }

    fn field(&self, rows: usize, cols: usize, hour: f64) -> Vec<f64> {
        match self.cfg.mode {
            CloudMode::Clear => return vec![0.0; rows * cols],
            CloudMode::Overcast => return vec![1.0; rows * cols],
            CloudMode::Random => {}
        }
        let c = &self.cfg;
        let theta = self.threshold(self.coverage());
        let (va, vb) = (c.velocity_a, c.velocity_b);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for col in 0..cols {
                let (y, x) = (r as f64, col as f64);
                let a = self.layer_a.sample(y - va[1] * hour, x - va[0] * hour);
                let b = self.layer_b.sample(y - vb[1] * hour, x - vb[0] * hour);
                let u = c.layer_weight * a + (1.0 - c.layer_weight) * b;
                let mask = smoothstep((u - theta) / c.edge);
                let depth = c.optical_min + (c.optical_max - c.optical_min) * self.optical.sample(y - va[1] * hour, x - va[0] * hour);
                out.push((mask * depth).clamp(0.0, 1.0));
            }
        }
        out
    }
}

/// Snow cover fraction per pixel with event-driven accumulation and
/// degree-day melt.
struct SnowProcess {
    cfg: AlbedoConfig,
    elevation: Vec<f64>,
    /// Elevation perturbation of the local snow line.
    patch: Vec<f64>,
    cover: Vec<f64>,
    keep_per_hour: Vec<f64>,
}

/// 1 in mid-January, 0 in mid-July.
fn winter_weight(day_of_year: u32) -> f64 {
    0.5 + 0.5 * (2.0 * std::f64::consts::PI * (day_of_year as f64 - 15.0) / 365.0).cos()
}

impl SnowProcess {
    fn new(cfg: &AlbedoConfig, elevation: &[f32], rows: usize, cols: usize, seed: u64) -> Self {
        let patch = fractal_noise(rows, cols, 4, seed, "scene/snow/patch").into_iter().map(|v| (v - 0.5) * 2.0 * cfg.patchiness).collect();
        SnowProcess {
            cfg: cfg.clone(),
            elevation: elevation.iter().map(|&h| h as f64).collect(),
            patch,
            cover: vec![0.0; elevation.len()],
            keep_per_hour: vec![1.0; elevation.len()],
        }
    }

    fn start_day(&mut self, day_of_year: u32) {
        let c = &self.cfg;
        let w = winter_weight(day_of_year);
        let sea = c.temp_summer + (c.temp_winter - c.temp_summer) * w;
        for (k, &h) in self.keep_per_hour.iter_mut().zip(&self.elevation) {
            let temp = sea - c.lapse_rate * h;
            let rate = (c.melt_base + c.melt_per_degree * temp.max(0.0)).clamp(0.0, 0.99);
            *k = (1.0 - rate).powf(1.0 / 24.0);
        }
    }

    fn step<R: Rng>(&mut self, day_of_year: u32, rng: &mut R) {
        for (s, k) in self.cover.iter_mut().zip(&self.keep_per_hour) {
            *s *= k;
        }
        let c = &self.cfg;
        let w = winter_weight(day_of_year);
        let p_hour = (c.event_prob_summer + (c.event_prob_winter - c.event_prob_summer) * w) / 24.0;
        if rng.gen::<f64>() < p_hour {
            let line = c.snowline_summer + (c.snowline_winter - c.snowline_summer) * w + (rng.gen::<f64>() * 2.0 - 1.0) * c.snowline_jitter;
            let amount = c.amount_min + (c.amount_max - c.amount_min) * rng.gen::<f64>();
            for ((s, &h), &p) in self.cover.iter_mut().zip(&self.elevation).zip(&self.patch) {
                let ramp = ((h + p - line) / c.snow_ramp).clamp(0.0, 1.0);
                *s = (*s + amount * ramp).min(1.0);
            }
        }
    }

    fn albedo(&self, ground: &[f64]) -> Vec<f64> {
        self.cover
            .iter()
            .zip(ground)
            .map(|(&s, &g)| (g + s * (self.cfg.snow - g)).clamp(ALBEDO_MIN, ALBEDO_MAX))
            .collect()
    }
}

fn var(name: &str, role: Role, storage: Storage, rows: usize, cols: usize) -> Variable {
    Variable { name: name.into(), role, storage, shape: vec![rows, cols], dtype: "f32le".into() }
}

/// Simulates the configured period hour by hour and keeps the daylight
/// frames (sun within 80° of the zenith at every pixel).
pub fn generate(cfg: &SceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (rows, cols, hw) = (cfg.rows, cfg.cols, cfg.rows * cfg.cols);
    let seed = cfg.seed;
    let grid = cfg.grid();
    let dem = synthetic_dem(cfg.dem, rows, cols, cfg.cell_size, seed)?;
    let elevation: Vec<f32> = dem.elevation.data().to_vec();
    let sa = slope_aspect(&dem)?;
    let horizon = HorizonMap::with_sectors(&dem, cfg.horizon_sectors)?;
    let cache = HourlySunCache::new(grid.clone(), cfg.start.year())?;
    let centre = (rows / 2, cols / 2);

    let a = &cfg.albedo;
    let ground: Vec<f64> = fractal_noise(rows, cols, 4, seed, "scene/ground")
        .into_iter()
        .map(|v| a.ground_min + (a.ground_max - a.ground_min) * v)
        .collect();
    let mut snow = SnowProcess::new(a, &elevation, rows, cols, seed);
    let mut clouds = CloudProcess::new(&cfg.clouds, seed);
    let mut weather = substream(seed, "scene/weather");
    let mut sensor = substream(seed, "scene/sensor");
    let vis_noise = Normal::new(0.0, cfg.noise.visible).map_err(|e| Error::Config(e.to_string()))?;
    let ir_noise = Normal::new(0.0, cfg.noise.infrared).map_err(|e| Error::Config(e.to_string()))?;
    let ir_names = infrared_names(cfg.n_infrared);

    let mut timestamps = Vec::new();
    let mut frame_years = Vec::new();
    let mut frame_slots = Vec::new();
    let mut slot_of_hour: Vec<Option<u32>> = vec![None; hemulab_geo::solar::HOURS_PER_YEAR];
    let mut slot_hours: Vec<u32> = Vec::new();
    let (mut sza, mut saz, mut fcorr, mut gcs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut hrv, mut albedo_frames, mut cloud_frames) = (Vec::new(), Vec::new(), Vec::new());
    let mut ir: Vec<Vec<f32>> = vec![Vec::new(); cfg.n_infrared];

    let mut day = None;
    for h in 0..cfg.hours() {
        let t = cfg.start + Duration::hours(h as i64);
        let doy = t.ordinal();
        if day != Some(doy) {
            snow.start_day(doy);
            day = Some(doy);
        }
        snow.step(doy, &mut weather);
        clouds.advance(&mut weather);

        let hoy = hour_of_year(&t);
        let sun = cache.fields_for_hour(hoy);
        if sun.zenith.data().iter().any(|&z| z as f64 > DAYLIGHT_ZENITH_DEG) {
            continue;
        }
        let slot = match slot_of_hour[hoy] {
            Some(s) => s,
            None => {
                let s = slot_hours.len() as u32;
                slot_of_hour[hoy] = Some(s);
                slot_hours.push(hoy as u32);
                let pos = SunPosition {
                    zenith: sun.zenith.get(centre.0, centre.1) as f64,
                    azimuth: sun.azimuth.get(centre.0, centre.1) as f64,
                };
                let s_vec = sun_vector(pos);
                let shadow = horizon.shadow(s_vec);
                sza.extend_from_slice(sun.zenith.data());
                saz.extend_from_slice(sun.azimuth.data());
                fcorr.extend_from_slice(f_corr(&sa.normals, &shadow, s_vec, F_CORR_MAX)?.values.data());
                gcs.extend(clearsky_irradiance(sun.zenith.data(), &elevation, &cfg.clear_sky));
                s
            }
        };

        let alpha = snow.albedo(&ground);
        let cloud = clouds.field(rows, cols, h as f64);
        let mut rho = Vec::with_capacity(hw);
        let mut rho_cs = Vec::with_capacity(hw);
        for p in 0..hw {
            let z = sun.zenith.data()[p] as f64;
            rho_cs.push(background_reflectance(alpha[p], z) as f32);
            rho.push(reflectance(alpha[p], cloud[p], z, cfg.rho_max) as f32);
        }
        cloud_frames.extend(cloud_index(&rho, &rho_cs, cfg.rho_max)?);
        hrv.extend(rho.iter().map(|&r| r + vis_noise.sample(&mut sensor) as f32));
        for (k, frames) in ir.iter_mut().enumerate() {
            let (off, gain, elev_gain) = infrared_response(k);
            frames.extend((0..hw).map(|p| {
                (off + gain * cloud[p] + elev_gain * elevation[p] as f64 / 1000.0 + ir_noise.sample(&mut sensor)) as f32
            }));
        }
        albedo_frames.extend(alpha.iter().map(|&v| v as f32));
        timestamps.push(t);
        frame_years.push((h / cfg.hours_per_year) as u32);
        frame_slots.push(slot);
    }
    if timestamps.is_empty() {
        return Err(Error::Data("no daylight frames in the simulated period".into()));
    }

    let mut variables = vec![var("hrv", Role::ImageChannel, Storage::Frames, rows, cols)];
    let mut data = vec![VarData::Frames(hrv)];
    for (name, frames) in ir_names.iter().zip(ir) {
        variables.push(var(name, Role::ImageChannel, Storage::Frames, rows, cols));
        data.push(VarData::Frames(frames));
    }
    let mut push = |v: Variable, d: VarData| {
        variables.push(v);
        data.push(d);
    };
    push(var("sza", Role::AuxChannel, Storage::HourSlots, rows, cols), VarData::HourSlots(sza));
    push(var("saz", Role::AuxChannel, Storage::HourSlots, rows, cols), VarData::HourSlots(saz));
    push(var("dem", Role::AuxChannel, Storage::Static, rows, cols), VarData::Static(elevation));
    push(var("slope", Role::AuxChannel, Storage::Static, rows, cols), VarData::Static(sa.slope.into_data()));
    push(var("aspect_sin", Role::AuxChannel, Storage::Static, rows, cols), VarData::Static(sa.aspect_sin.into_data()));
    push(var("aspect_cos", Role::AuxChannel, Storage::Static, rows, cols), VarData::Static(sa.aspect_cos.into_data()));
    push(var("f_corr", Role::AuxChannel, Storage::HourSlots, rows, cols), VarData::HourSlots(fcorr));
    push(var("albedo", Role::Diagnostic, Storage::Frames, rows, cols), VarData::Frames(albedo_frames));
    push(var("cloud_index", Role::Diagnostic, Storage::Frames, rows, cols), VarData::Frames(cloud_frames));
    push(var("kt", Role::Diagnostic, Storage::DerivedClearSkyIndex, rows, cols), VarData::Derived);
    push(var("gcs", Role::Diagnostic, Storage::HourSlots, rows, cols), VarData::HourSlots(gcs));
    push(var("ssr", Role::Target, Storage::DerivedSsr, rows, cols), VarData::Derived);

    let manifest = DatasetManifest {
        format: FORMAT.into(),
        variables,
        timestamps,
        frame_years,
        frame_slots,
        slot_hours,
        grid: GridMeta {
            rows,
            cols,
            lat_north: cfg.lat_north,
            lon_west: cfg.lon_west,
            dlat: cfg.dlat,
            dlon: cfg.dlon,
            cell_size: cfg.cell_size,
        },
        hours_simulated: cfg.hours(),
        stats: STATS_FILE.into(),
        seed,
        generator_config_hash: config_hash(cfg)?,
        generator: cfg.clone(),
    };
    let mut ds = Dataset::from_parts(manifest, data)?;
    let train = match ds.split() {
        Ok(s) => s.train,
        Err(_) => 0..ds.n_frames(),
    };
    ds.stats = ds.compute_stats(train)?;
    Ok(ds)
}
