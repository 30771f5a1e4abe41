//! On-disk and in-memory scene datasets: variables, splits, normalisation
//! statistics and sample windows.
//!
//! Layout: `manifest.json`, `stats.json`, `blobs/<var>/<k>.f32`, where `k`
//! is the frame index for per-frame variables, the hour-slot index for
//! hour-of-year variables and `0` for static ones. Derived variables are
//! recomputed on read.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hemulab_geo::raster::{f32_from_le_bytes, f32_to_le_bytes};
use hemulab_tensor::Tensor;

use crate::scene::{clearsky_index, SceneConfig};
use crate::{Error, Result};

pub const FORMAT: &str = "hemulab-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";
pub const BLOB_DIR: &str = "blobs";
pub const STD_FLOOR: f64 = 1e-6;
pub const TARGET: &str = "ssr";
pub const ALBEDO: &str = "albedo";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    ImageChannel,
    AuxChannel,
    Target,
    Diagnostic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Storage {
    /// One raster for the whole sequence.
    Static,
    /// One raster per frame.
    Frames,
    /// One raster per hour-of-year slot, shared by frames in that slot.
    HourSlots,
    /// Clear-sky index from `cloud_index`.
    DerivedClearSkyIndex,
    /// `kt · gcs`.
    DerivedSsr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variable {
    pub name: String,
    pub role: Role,
    pub storage: Storage,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub rows: usize,
    pub cols: usize,
    pub lat_north: f64,
    pub lon_west: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub cell_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub variables: Vec<Variable>,
    pub timestamps: Vec<DateTime<Utc>>,
    /// Synthetic year of every frame.
    pub frame_years: Vec<u32>,
    /// Hour-slot index of every frame.
    pub frame_slots: Vec<u32>,
    /// Hour of year backing each slot.
    pub slot_hours: Vec<u32>,
    pub grid: GridMeta,
    pub hours_simulated: usize,
    pub stats: String,
    pub seed: u64,
    pub generator_config_hash: String,
    pub generator: SceneConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation, floored at [`STD_FLOOR`].
    pub fn of(values: impl IntoIterator<Item = f32>) -> Result<Stat> {
        let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
        for v in values {
            n += 1;
            let d = v as f64 - mean;
            mean += d / n as f64;
            m2 += d * (v as f64 - mean);
        }
        if n == 0 {
            return Err(Error::Data("statistics over an empty sample".into()));
        }
        Ok(Stat { mean, std: (m2 / n as f64).sqrt().max(STD_FLOOR) })
    }

    pub fn normalize(&self, v: f32) -> f32 {
        ((v as f64 - self.mean) / self.std) as f32
    }

    pub fn denormalize(&self, v: f32) -> f32 {
        (v as f64 * self.std + self.mean) as f32
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub vars: BTreeMap<String, Stat>,
}

impl NormStats {
    pub fn get(&self, name: &str) -> Result<Stat> {
        self.vars.get(name).copied().ok_or_else(|| Error::Data(format!("no statistics for {name}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn range(&self, s: Split) -> Range<usize> {
        match s {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    pub fn of_frame(&self, t: usize) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|&s| self.range(s).contains(&t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum VarData {
    Static(Vec<f32>),
    Frames(Vec<f32>),
    HourSlots(Vec<f32>),
    Derived,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub stats: NormStats,
    data: Vec<VarData>,
}

/// Hex SHA-256 of a value's canonical JSON.
pub fn config_hash<T: Serialize>(v: &T) -> Result<String> {
    let bytes = serde_json::to_vec(v)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Hex SHA-256 of an ordered channel list.
pub fn channel_hash(names: &[String]) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    pub(crate) fn from_parts(manifest: DatasetManifest, data: Vec<VarData>) -> Result<Self> {
        if data.len() != manifest.variables.len() {
            return Err(Error::Data("variable count mismatch".into()));
        }
        let ds = Dataset { manifest, stats: NormStats::default(), data };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let n = m.timestamps.len();
        if m.timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("timestamps must be strictly increasing".into()));
        }
        if m.frame_years.len() != n || m.frame_slots.len() != n {
            return Err(Error::Data("per-frame metadata length mismatch".into()));
        }
        if m.frame_slots.iter().any(|&s| s as usize >= m.slot_hours.len()) {
            return Err(Error::Data("frame refers to a missing hour slot".into()));
        }
        let hw = self.hw();
        for (v, d) in m.variables.iter().zip(&self.data) {
            let expect = match (v.storage, d) {
                (Storage::Static, VarData::Static(x)) => x.len() == hw,
                (Storage::Frames, VarData::Frames(x)) => x.len() == hw * n,
                (Storage::HourSlots, VarData::HourSlots(x)) => x.len() == hw * m.slot_hours.len(),
                (Storage::DerivedClearSkyIndex | Storage::DerivedSsr, VarData::Derived) => true,
                _ => false,
            };
            if !expect {
                return Err(Error::Data(format!("variable {} has inconsistent storage", v.name)));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.manifest.grid.rows
    }

    pub fn cols(&self) -> usize {
        self.manifest.grid.cols
    }

    pub fn hw(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn n_frames(&self) -> usize {
        self.manifest.timestamps.len()
    }

    pub fn timestamp(&self, t: usize) -> DateTime<Utc> {
        self.manifest.timestamps[t]
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.manifest
            .variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::Data(format!("unknown variable {name}")))
    }

    pub fn has_var(&self, name: &str) -> bool {
        self.var_index(name).is_ok()
    }

    /// Raster of `name` at frame `t`, row-major `[H, W]`.
    pub fn get(&self, name: &str, t: usize) -> Result<Cow<'_, [f32]>> {
        let i = self.var_index(name)?;
        self.get_by_index(i, t)
    }

    pub(crate) fn get_by_index(&self, i: usize, t: usize) -> Result<Cow<'_, [f32]>> {
        if t >= self.n_frames() {
            return Err(Error::Data(format!("frame {t} out of range ({} frames)", self.n_frames())));
        }
        let hw = self.hw();
        Ok(match &self.data[i] {
            VarData::Static(x) => Cow::Borrowed(&x[..]),
            VarData::Frames(x) => Cow::Borrowed(&x[t * hw..(t + 1) * hw]),
            VarData::HourSlots(x) => {
                let s = self.manifest.frame_slots[t] as usize;
                Cow::Borrowed(&x[s * hw..(s + 1) * hw])
            }
            VarData::Derived => match self.manifest.variables[i].storage {
                Storage::DerivedClearSkyIndex => Cow::Owned(clearsky_index(&self.get("cloud_index", t)?)),
                _ => {
                    let kt = clearsky_index(&self.get("cloud_index", t)?);
                    let gcs = self.get("gcs", t)?;
                    Cow::Owned(kt.iter().zip(gcs.iter()).map(|(k, g)| k * g).collect())
                }
            },
        })
    }

    /// Year-disjoint split: all but the last two synthetic years train, the
    /// second to last validates, the last tests.
    pub fn split(&self) -> Result<Splits> {
        let years = &self.manifest.frame_years;
        let n_years = years.iter().max().map(|&y| y as usize + 1).unwrap_or(0);
        if n_years < 3 {
            return Err(Error::Data(format!("split needs at least 3 synthetic years, got {n_years}")));
        }
        let first = |y: usize| years.iter().position(|&v| v as usize >= y).unwrap_or(years.len());
        let (val_start, test_start) = (first(n_years - 2), first(n_years - 1));
        let s = Splits { train: 0..val_start, val: val_start..test_start, test: test_start..years.len() };
        if s.train.is_empty() || s.val.is_empty() || s.test.is_empty() {
            return Err(Error::Data("a split contains no daylight frames".into()));
        }
        Ok(s)
    }

    /// Per-variable statistics over the training split.
    pub fn compute_stats(&self, frames: Range<usize>) -> Result<NormStats> {
        if frames.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut vars = BTreeMap::new();
        for (i, v) in self.manifest.variables.iter().enumerate() {
            let stat = match &self.data[i] {
                VarData::Static(x) => Stat::of(x.iter().copied())?,
                _ => {
                    let mut vals = Vec::with_capacity(frames.len() * self.hw());
                    for t in frames.clone() {
                        vals.extend_from_slice(&self.get_by_index(i, t)?);
                    }
                    Stat::of(vals)?
                }
            };
            vars.insert(v.name.clone(), stat);
        }
        Ok(NormStats { vars })
    }

    /// Image and auxiliary channels in manifest order, then albedo if asked.
    pub fn input_channels(&self, albedo_as_input: bool) -> Vec<String> {
        let mut names: Vec<String> = self
            .manifest
            .variables
            .iter()
            .filter(|v| matches!(v.role, Role::ImageChannel | Role::AuxChannel))
            .map(|v| v.name.clone())
            .collect();
        if albedo_as_input {
            names.push(ALBEDO.into());
        }
        names
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(BLOB_DIR))?;
        for (v, d) in self.manifest.variables.iter().zip(&self.data) {
            let vdir = dir.join(BLOB_DIR).join(&v.name);
            let chunks: Vec<&[f32]> = match d {
                VarData::Static(x) => vec![&x[..]],
                VarData::Frames(x) | VarData::HourSlots(x) => x.chunks(self.hw()).collect(),
                VarData::Derived => continue,
            };
            fs::create_dir_all(&vdir)?;
            for (k, chunk) in chunks.iter().enumerate() {
                fs::write(vdir.join(format!("{k}.f32")), f32_to_le_bytes(chunk))?;
            }
        }
        fs::write(dir.join(STATS_FILE), serde_json::to_string_pretty(&self.stats)? + "\n")?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT {
            return Err(Error::Data(format!("unknown dataset format {}", manifest.format)));
        }
        let stats: NormStats = serde_json::from_str(&fs::read_to_string(dir.join(&manifest.stats))?)?;
        let hw = manifest.grid.rows * manifest.grid.cols;
        let read_chunks = |name: &str, count: usize| -> Result<Vec<f32>> {
            let mut out = Vec::with_capacity(count * hw);
            for k in 0..count {
                let chunk = f32_from_le_bytes(&fs::read(dir.join(BLOB_DIR).join(name).join(format!("{k}.f32")))?)?;
                if chunk.len() != hw {
                    return Err(Error::Data(format!("{name}/{k}.f32 has {} values, expected {hw}", chunk.len())));
                }
                out.extend(chunk);
            }
            Ok(out)
        };
        let mut data = Vec::new();
        for v in &manifest.variables {
            data.push(match v.storage {
                Storage::Static => VarData::Static(read_chunks(&v.name, 1)?),
                Storage::Frames => VarData::Frames(read_chunks(&v.name, manifest.timestamps.len())?),
                Storage::HourSlots => VarData::HourSlots(read_chunks(&v.name, manifest.slot_hours.len())?),
                Storage::DerivedClearSkyIndex | Storage::DerivedSsr => VarData::Derived,
            });
        }
        let mut ds = Dataset::from_parts(manifest, data)?;
        ds.stats = stats;
        Ok(ds)
    }

    /// Appends a constant-zero auxiliary channel (ablation control).
    pub fn with_dummy_channel(mut self, name: &str) -> Result<Self> {
        if self.has_var(name) {
            return Err(Error::Data(format!("variable {name} already exists")));
        }
        self.manifest.variables.push(Variable {
            name: name.into(),
            role: Role::AuxChannel,
            storage: Storage::Static,
            shape: vec![self.rows(), self.cols()],
            dtype: "f32le".into(),
        });
        self.data.push(VarData::Static(vec![0.0; self.hw()]));
        self.stats.vars.insert(name.into(), Stat::of(std::iter::repeat_n(0.0, self.hw()))?);
        Ok(self)
    }
}

/// Which channels and how many kept steps a model consumes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub context: usize,
    pub channels: Vec<String>,
}

impl WindowSpec {
    pub fn new(ds: &Dataset, context: usize, albedo_as_input: bool) -> Self {
        WindowSpec { context, channels: ds.input_channels(albedo_as_input) }
    }

    pub fn without(&self, channel: &str) -> Self {
        WindowSpec { context: self.context, channels: self.channels.iter().filter(|c| *c != channel).cloned().collect() }
    }

    pub fn channel_hash(&self) -> String {
        channel_hash(&self.channels)
    }
}

/// Window end frames of a split. A window ends at frame `e` and covers the
/// `context` kept frames `e - context + 1 ..= e`; windows whose history
/// leaves the split are skipped and counted.
pub fn window_ends(splits: &Splits, split: Split, context: usize) -> (Vec<usize>, usize) {
    let r = splits.range(split);
    let mut ends = Vec::new();
    let mut skipped = 0;
    for e in r.clone() {
        if e + 1 >= context && e + 1 - context >= r.start {
            ends.push(e);
        } else {
            skipped += 1;
        }
    }
    (ends, skipped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    /// `[T, H, W, C]`, normalised.
    pub x: Tensor,
    /// `[H, W]`, normalised target.
    pub y: Tensor,
    pub end: usize,
    pub timestamp: DateTime<Utc>,
    pub channel_hash: String,
}

/// Resolved channel sources and statistics for fast window extraction.
pub struct WindowReader<'a> {
    ds: &'a Dataset,
    spec: WindowSpec,
    sources: Vec<(usize, Stat)>,
    target: Stat,
}

impl<'a> WindowReader<'a> {
    pub fn new(ds: &'a Dataset, spec: &WindowSpec) -> Result<Self> {
        if spec.context == 0 {
            return Err(Error::Config("context length must be positive".into()));
        }
        let sources = spec
            .channels
            .iter()
            .map(|c| Ok((ds.var_index(c)?, ds.stats.get(c)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(WindowReader { ds, spec: spec.clone(), sources, target: ds.stats.get(TARGET)? })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn target_stat(&self) -> Stat {
        self.target
    }

    /// Normalised input `[T, h, w, C]` cropped at `(r0, c0)` for the window
    /// ending at frame `end`.
    pub fn input(&self, end: usize, r0: usize, c0: usize, h: usize, w: usize) -> Result<Tensor> {
        let t = self.spec.context;
        if end + 1 < t {
            return Err(Error::Data(format!("window ending at {end} needs {t} frames of history")));
        }
        if r0 + h > self.ds.rows() || c0 + w > self.ds.cols() {
            return Err(Error::Shape(format!("crop {h}x{w} at ({r0},{c0}) leaves the grid")));
        }
        let c = self.sources.len();
        let cols = self.ds.cols();
        let mut out = vec![0.0f32; t * h * w * c];
        for (ti, frame) in (end + 1 - t..=end).enumerate() {
            for (ci, &(vi, stat)) in self.sources.iter().enumerate() {
                let raster = self.ds.get_by_index(vi, frame)?;
                for r in 0..h {
                    let src = &raster[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + w];
                    let base = (ti * h + r) * w;
                    for (j, &v) in src.iter().enumerate() {
                        out[(base + j) * c + ci] = stat.normalize(v);
                    }
                }
            }
        }
        Ok(Tensor::new(&[t, h, w, c], out)?)
    }

    /// Normalised target `[h, w]` at frame `t`.
    pub fn target(&self, t: usize, r0: usize, c0: usize, h: usize, w: usize) -> Result<Tensor> {
        let raster = self.ds.get(TARGET, t)?;
        let cols = self.ds.cols();
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            out.extend(raster[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + w].iter().map(|&v| self.target.normalize(v)));
        }
        Ok(Tensor::new(&[h, w], out)?)
    }

    pub fn window(&self, end: usize) -> Result<SampleWindow> {
        let (h, w) = (self.ds.rows(), self.ds.cols());
        Ok(SampleWindow {
            x: self.input(end, 0, 0, h, w)?,
            y: self.target(end, 0, 0, h, w)?,
            end,
            timestamp: self.ds.timestamp(end),
            channel_hash: self.spec.channel_hash(),
        })
    }

    /// Normalised `[C, size, size]` patch centred on `(r, c)` at frame `t`,
    /// reflect-padded at the borders.
    pub fn patch(&self, t: usize, r: usize, c: usize, size: usize, out: &mut Vec<f32>) -> Result<()> {
        let (rows, cols) = (self.ds.rows(), self.ds.cols());
        let half = (size / 2) as isize;
        for &(vi, stat) in &self.sources {
            let raster = self.ds.get_by_index(vi, t)?;
            for dr in -half..=half {
                let rr = crate::conv::reflect(r as isize + dr, rows);
                for dc in -half..=half {
                    let cc = crate::conv::reflect(c as isize + dc, cols);
                    out.push(stat.normalize(raster[rr * cols + cc]));
                }
            }
        }
        Ok(())
    }
}

/// Full-frame windows of one split, in time order.
pub fn build_windows<'a>(
    reader: &'a WindowReader<'a>,
    splits: &Splits,
    split: Split,
) -> (impl Iterator<Item = Result<SampleWindow>> + 'a, usize) {
    let (ends, skipped) = window_ends(splits, split, reader.spec.context);
    (ends.into_iter().map(move |e| reader.window(e)), skipped)
}
