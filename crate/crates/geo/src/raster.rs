use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::GeoError;

/// Row-major single-band raster. Row 0 is the northern edge.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, GeoError> {
        if data.len() != rows * cols {
            return Err(GeoError::Format(format!(
                "raster {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Raster { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Raster {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Raster { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Bilinear sample at fractional (row, col); `None` outside the grid.
    pub fn bilinear(&self, r: f64, c: f64) -> Option<f64> {
        if r < 0.0 || c < 0.0 || r > (self.rows - 1) as f64 || c > (self.cols - 1) as f64 {
            return None;
        }
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(self.rows - 1), (c0 + 1).min(self.cols - 1));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        let z = |rr, cc| self.get(rr, cc) as f64;
        let top = z(r0, c0) * (1.0 - fc) + z(r0, c1) * fc;
        let bot = z(r1, c0) * (1.0 - fc) + z(r1, c1) * fc;
        Some(top * (1.0 - fr) + bot * fr)
    }
}

/// JSON sidecar describing a little-endian f32 raster blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
    pub dtype: String,
    /// Blob file name, relative to the sidecar.
    pub data_file: String,
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Result<Vec<f32>, GeoError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(GeoError::Format(format!("blob length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `<stem>.json` + `<stem>.f32` into `dir`; returns the sidecar path.
pub fn write_raster(dir: &Path, stem: &str, raster: &Raster, cell_size: f64, origin: [f64; 2]) -> Result<PathBuf, GeoError> {
    fs::create_dir_all(dir)?;
    let data_file = format!("{stem}.f32");
    let header = RasterHeader {
        rows: raster.rows,
        cols: raster.cols,
        cell_size,
        origin,
        dtype: "f32le".into(),
        data_file: data_file.clone(),
    };
    fs::write(dir.join(&data_file), f32_to_le_bytes(&raster.data))?;
    let sidecar = dir.join(format!("{stem}.json"));
    fs::write(&sidecar, serde_json::to_string_pretty(&header)?)?;
    Ok(sidecar)
}

pub fn read_raster(sidecar: &Path) -> Result<(RasterHeader, Raster), GeoError> {
    let header: RasterHeader = serde_json::from_str(&fs::read_to_string(sidecar)?)?;
    if header.dtype != "f32le" {
        return Err(GeoError::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let blob = sidecar.parent().unwrap_or(Path::new(".")).join(&header.data_file);
    let data = f32_from_le_bytes(&fs::read(blob)?)?;
    let raster = Raster::new(header.rows, header.cols, data)?;
    Ok((header, raster))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::from_fn(3, 5, |i, j| (i as f32 * 1.1 - j as f32).exp());
        let p = write_raster(dir.path(), "dem", &r, 90.0, [1.0, 2.0]).unwrap();
        let (h, back) = read_raster(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(h.cell_size, 90.0);
    }

    #[test]
    fn bilinear_interpolates_planes_exactly() {
        let r = Raster::from_fn(4, 4, |i, j| (2 * i + 3 * j) as f32);
        assert_eq!(r.bilinear(1.5, 2.25), Some(2.0 * 1.5 + 3.0 * 2.25));
        assert_eq!(r.bilinear(-0.1, 0.0), None);
    }
}
