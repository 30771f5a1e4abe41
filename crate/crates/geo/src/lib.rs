//! Solar geometry, DEM-derived terrain features and the raster file format.

pub mod raster;
pub mod solar;
pub mod synthetic;
pub mod terrain;

pub use raster::{read_raster, write_raster, Raster, RasterHeader};
pub use solar::{
    daylight_mask, hour_of_year, parse_utc, sun_position, sun_vector, HourlySunCache, LatLonGrid, SunFields,
    SunPosition, SunVector, DAYLIGHT_ZENITH_DEG,
};
pub use terrain::{
    f_corr, shadow_mask, slope_aspect, terrain_features, DemGrid, FcorrField, HorizonMap, NormalField, SlopeAspect,
    TerrainFeatures, F_CORR_MAX,
};

#[derive(Debug, thiserror::Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    InvalidLatitude(f64),
    #[error("invalid or unsupported timestamp: {0}")]
    InvalidTimestamp(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("raster {rows}x{cols} is too small (need at least 3x3)")]
    DegenerateRaster { rows: usize, cols: usize },
    #[error("raster format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
