//! Volumes on disk, foreground masking, grid resampling, intensity
//! normalisation and the 2-D views fed to the models.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Scalar field on a regular grid, X varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Invalid(format!("voxel spacing must be > 0, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::Invalid(format!("{} voxels for dims {dims:?} ({n} expected)", voxels.len())));
        }
        Ok(Volume { dims, spacing, voxels })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume { dims: self.dims, spacing: self.spacing, voxels: self.voxels.iter().map(|&v| f(v)).collect() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<NormalizationSpec>,
}

/// `(<name>.vol.json, <name>.vol.raw)` for a path naming either file or the
/// bare `<name>`.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = s.strip_suffix(".vol.json").or_else(|| s.strip_suffix(".vol.raw")).unwrap_or(&s);
    (PathBuf::from(format!("{base}.vol.json")), PathBuf::from(format!("{base}.vol.raw")))
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    save_volume_with(v, path, None)
}

/// Writes the sidecar and payload, embedding the normalisation applied to
/// `v` if any.
pub fn save_volume_with(v: &Volume, path: &Path, normalization: Option<&NormalizationSpec>) -> Result<()> {
    let (json, raw) = volume_paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let sidecar = Sidecar {
        dims: v.dims,
        spacing: v.spacing,
        dtype: "float32".into(),
        byte_order: "little".into(),
        normalization: normalization.cloned(),
    };
    fs::write(&json, serde_json::to_string_pretty(&sidecar)? + "\n").at(&json)?;
    let mut bytes = Vec::with_capacity(v.voxels.len() * 4);
    for x in &v.voxels {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw, bytes).at(&raw)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    Ok(load_volume_with_spec(path)?.0)
}

pub fn load_volume_with_spec(path: &Path) -> Result<(Volume, Option<NormalizationSpec>)> {
    let (json, raw) = volume_paths(path);
    if !json.exists() {
        return Err(Error::Format(format!("missing sidecar {}", json.display())));
    }
    let text = fs::read_to_string(&json).at(&json)?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    if sidecar.dtype != "float32" || sidecar.byte_order != "little" {
        return Err(Error::Format(format!(
            "{}: unsupported dtype/byte order {}/{}",
            json.display(),
            sidecar.dtype,
            sidecar.byte_order
        )));
    }
    let bytes = fs::read(&raw).at(&raw)?;
    let expected = sidecar.dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Corrupt {
            path: raw,
            detail: format!("payload is {} bytes, dims {:?} need {expected}", bytes.len(), sidecar.dims),
        });
    }
    let voxels = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let v = Volume::new(sidecar.dims, sidecar.spacing, voxels).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    Ok((v, sidecar.normalization))
}

/// Foreground voxels of a volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    bits: Vec<bool>,
}

impl Mask {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

pub const DEFAULT_MASK_TAU: f64 = 0.1;

/// Nearest-rank percentile of `values` (`p` in [0, 100]).
pub fn percentile(values: &[f32], p: f64) -> f32 {
    let mut v = values.to_vec();
    let n = v.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    let k = rank.clamp(1, n) - 1;
    *v.select_nth_unstable_by(k, f32::total_cmp).1
}

/// Mean over the in-bounds 3×3×3 neighbourhood of every voxel.
fn box_smooth(v: &Volume) -> Vec<f32> {
    let [nx, ny, nz] = v.dims;
    let mut cur = v.voxels.clone();
    let mut next = vec![0f32; cur.len()];
    for (n, stride) in [(nx, 1), (ny, nx), (nz, nx * ny)] {
        for (i, out) in next.iter_mut().enumerate() {
            let c = (i / stride) % n;
            let mut s = cur[i];
            let mut cnt = 1f32;
            if c > 0 {
                s += cur[i - stride];
                cnt += 1.0;
            }
            if c + 1 < n {
                s += cur[i + stride];
                cnt += 1.0;
            }
            *out = s / cnt;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Foreground mask. With `lo` the median and `hi` the 99th percentile, the
/// threshold is `lo + tau·(hi − lo)`; a voxel is foreground when both its
/// value and its 3×3×3 neighbourhood mean exceed it. The median tracks the
/// background level, so the mask is unchanged by positive affine intensity
/// maps; the neighbourhood test rejects isolated noise spikes. When more than
/// half the volume sits at the upper level the minimum replaces the median.
pub fn brain_mask(v: &Volume, tau: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Config(format!("mask threshold fraction {tau} outside [0, 1)")));
    }
    let hi = percentile(&v.voxels, 99.0) as f64;
    let mut lo = percentile(&v.voxels, 50.0) as f64;
    if hi <= lo {
        lo = v.voxels.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    }
    if hi <= lo {
        return Err(Error::EmptyMask);
    }
    let thr = lo + tau * (hi - lo);
    let smooth = box_smooth(v);
    let bits: Vec<bool> = v.voxels.iter().zip(&smooth).map(|(&x, &s)| x as f64 > thr && s as f64 > thr).collect();
    if !bits.contains(&true) {
        return Err(Error::EmptyMask);
    }
    Ok(Mask { dims: v.dims, bits })
}

#[inline]
fn nn_index(t: usize, src: usize, tgt: usize) -> usize {
    ((2 * t + 1) * src / (2 * tgt)).min(src - 1)
}

/// Nearest-neighbour resampling: target index `t` reads source index
/// `floor((t + 0.5)·src/tgt)` on each axis.
pub fn resample_nn(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::Invalid(format!("target dims must be >= 1, got {target:?}")));
    }
    if target == v.dims {
        return Ok(v.clone());
    }
    let maps: Vec<Vec<usize>> = (0..3).map(|a| (0..target[a]).map(|t| nn_index(t, v.dims[a], target[a])).collect()).collect();
    let mut out = Vec::with_capacity(target.iter().product());
    for &z in &maps[2] {
        for &y in &maps[1] {
            let row = v.index(0, y, z);
            out.extend(maps[0].iter().map(|&x| v.voxels[row + x]));
        }
    }
    let spacing = std::array::from_fn(|a| v.spacing[a] * v.dims[a] as f64 / target[a] as f64);
    Volume::new(target, spacing, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    ZscorePerImage,
    ZscoreGlobal,
    Minmax,
}

impl NormMode {
    pub const ALL: [NormMode; 3] = [NormMode::ZscorePerImage, NormMode::ZscoreGlobal, NormMode::Minmax];

    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::ZscorePerImage => "zscore_per_image",
            NormMode::ZscoreGlobal => "zscore_global",
            NormMode::Minmax => "minmax",
        }
    }

    /// Row label used in rendered result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            NormMode::ZscorePerImage => "z-score per-image",
            NormMode::ZscoreGlobal => "z-score global",
            NormMode::Minmax => "min-max",
        }
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown normalization `{s}` (expected zscore_per_image, zscore_global or minmax)")))
    }
}

/// Dataset intensity statistics for global z-scoring, with a record of
/// which split produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mean: f64,
    pub std: f64,
    pub provenance: String,
    pub volumes: usize,
    pub voxels: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mode: NormMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<GlobalStats>,
}

impl NormalizationSpec {
    pub fn per_image() -> Self {
        NormalizationSpec { mode: NormMode::ZscorePerImage, global: None }
    }

    pub fn minmax() -> Self {
        NormalizationSpec { mode: NormMode::Minmax, global: None }
    }

    pub fn global(stats: GlobalStats) -> Self {
        NormalizationSpec { mode: NormMode::ZscoreGlobal, global: Some(stats) }
    }
}

/// Masked-voxel moments merged volume by volume in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct GlobalStatsAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
    volumes: usize,
}

impl GlobalStatsAccumulator {
    pub fn add(&mut self, v: &Volume, mask: &Mask) {
        let (n, mean, m2) = masked_moments(v, mask);
        if n == 0 {
            return;
        }
        let total = self.n + n;
        let delta = mean - self.mean;
        self.mean += delta * n as f64 / total as f64;
        self.m2 += m2 + delta * delta * self.n as f64 * n as f64 / total as f64;
        self.n = total;
        self.volumes += 1;
    }

    pub fn finish(self, provenance: impl Into<String>) -> Result<GlobalStats> {
        if self.n == 0 {
            return Err(Error::Invalid("no masked voxels for global statistics".into()));
        }
        Ok(GlobalStats {
            mean: self.mean,
            std: (self.m2 / self.n as f64).sqrt(),
            provenance: provenance.into(),
            volumes: self.volumes,
            voxels: self.n,
        })
    }
}

/// `(count, mean, Σ(x−mean)²)` over the mask.
fn masked_moments(v: &Volume, mask: &Mask) -> (u64, f64, f64) {
    let vals = || v.voxels.iter().zip(&mask.bits).filter(|(_, &m)| m).map(|(&x, _)| x as f64);
    let n = vals().count() as u64;
    if n == 0 {
        return (0, 0.0, 0.0);
    }
    let mean = vals().sum::<f64>() / n as f64;
    let m2 = vals().map(|x| (x - mean) * (x - mean)).sum();
    (n, mean, m2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub volume: Volume,
    /// Set when the image was degenerate and the output zeroed.
    pub warning: Option<String>,
}

pub fn normalize(v: &Volume, spec: &NormalizationSpec) -> Result<Normalized> {
    let mask = brain_mask(v, DEFAULT_MASK_TAU)?;
    normalize_with_mask(v, &mask, spec)
}

pub fn normalize_with_mask(v: &Volume, mask: &Mask, spec: &NormalizationSpec) -> Result<Normalized> {
    if mask.dims != v.dims {
        return Err(Error::Invalid(format!("mask dims {:?} differ from volume dims {:?}", mask.dims, v.dims)));
    }
    let degenerate = |why: &str| {
        let msg = format!("degenerate image ({why}); output set to zero");
        log::warn!("{msg}");
        Ok(Normalized { volume: v.map(|_| 0.0), warning: Some(msg) })
    };
    match spec.mode {
        NormMode::ZscorePerImage => {
            let (n, mean, m2) = masked_moments(v, mask);
            let std = (m2 / n.max(1) as f64).sqrt();
            if n == 0 || std == 0.0 {
                return degenerate("zero variance inside the mask");
            }
            Ok(Normalized { volume: v.map(|x| ((x as f64 - mean) / std) as f32), warning: None })
        }
        NormMode::ZscoreGlobal => {
            let g = spec
                .global
                .as_ref()
                .ok_or_else(|| Error::Config("zscore_global normalization needs training-split statistics".into()))?;
            if g.std == 0.0 {
                return degenerate("zero global standard deviation");
            }
            Ok(Normalized { volume: v.map(|x| ((x as f64 - g.mean) / g.std) as f32), warning: None })
        }
        NormMode::Minmax => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (&x, _) in v.voxels.iter().zip(&mask.bits).filter(|(_, &m)| m) {
                lo = lo.min(x as f64);
                hi = hi.max(x as f64);
            }
            if hi <= lo {
                return degenerate("max equals min inside the mask");
            }
            let voxels = v
                .voxels
                .iter()
                .zip(&mask.bits)
                .map(|(&x, &m)| if m { ((x as f64 - lo) / (hi - lo)) as f32 } else { 0.0 })
                .collect();
            Ok(Normalized { volume: Volume { dims: v.dims, spacing: v.spacing, voxels }, warning: None })
        }
    }
}

/// 2-D slices of equal size plus the source index of each.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSet {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<usize>,
    pub slices: Vec<Vec<f32>>,
}

impl SliceSet {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// `floor((k + 0.5)·z/count)` for `k` in `0..count`.
pub fn centered_indices(z: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || z < count {
        return Err(Error::Invalid(format!("cannot pick {count} slices from depth {z}")));
    }
    Ok((0..count).map(|k| (2 * k + 1) * z / (2 * count)).collect())
}

/// Axial plane `z` as a Y×X image (rows y, columns x).
pub fn axial_slice(v: &Volume, z: usize) -> Vec<f32> {
    let plane = v.dims[0] * v.dims[1];
    v.voxels[z * plane..(z + 1) * plane].to_vec()
}

pub fn select_axial_slices(v: &Volume, count: usize) -> Result<SliceSet> {
    let indices = centered_indices(v.dims[2], count)?;
    let slices = indices.iter().map(|&z| axial_slice(v, z)).collect();
    Ok(SliceSet { height: v.dims[1], width: v.dims[0], indices, slices })
}

/// 4×4 arrangement of 16 slices; slice `k` fills cell `(k / 4, k % 4)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Montage {
    pub cell_height: usize,
    pub cell_width: usize,
    pub pixels: Vec<f32>,
}

pub const MONTAGE_SIDE: usize = 4;

impl Montage {
    pub fn height(&self) -> usize {
        MONTAGE_SIDE * self.cell_height
    }

    pub fn width(&self) -> usize {
        MONTAGE_SIDE * self.cell_width
    }

    pub fn cell(&self, k: usize) -> Vec<f32> {
        let (r, c) = (k / MONTAGE_SIDE, k % MONTAGE_SIDE);
        let w = self.width();
        let mut out = Vec::with_capacity(self.cell_height * self.cell_width);
        for row in 0..self.cell_height {
            let start = (r * self.cell_height + row) * w + c * self.cell_width;
            out.extend_from_slice(&self.pixels[start..start + self.cell_width]);
        }
        out
    }
}

pub fn make_grid_montage(s: &SliceSet) -> Result<Montage> {
    let cells = MONTAGE_SIDE * MONTAGE_SIDE;
    if s.slices.len() != cells {
        return Err(Error::Invalid(format!("montage needs {cells} slices, got {}", s.slices.len())));
    }
    let (h, w) = (s.height, s.width);
    if s.slices.iter().any(|sl| sl.len() != h * w) {
        return Err(Error::Invalid("slices differ in size".into()));
    }
    let width = MONTAGE_SIDE * w;
    let mut pixels = vec![0f32; cells * h * w];
    for (k, sl) in s.slices.iter().enumerate() {
        let (r, c) = (k / MONTAGE_SIDE, k % MONTAGE_SIDE);
        for row in 0..h {
            let start = (r * h + row) * width + c * w;
            pixels[start..start + w].copy_from_slice(&sl[row * w..(row + 1) * w]);
        }
    }
    Ok(Montage { cell_height: h, cell_width: w, pixels })
}

/// Axial, coronal and sagittal slice stacks, all `side × side`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSlices {
    pub axial: SliceSet,
    pub coronal: Option<SliceSet>,
    pub sagittal: Option<SliceSet>,
}

impl PlaneSlices {
    pub fn token_count(&self) -> usize {
        self.axial.len() + self.coronal.as_ref().map_or(0, SliceSet::len) + self.sagittal.as_ref().map_or(0, SliceSet::len)
    }
}

/// Embeds a `depth × side` plane (rows z) centred in a `side × side` image.
fn pad_rows(plane: Vec<f32>, depth: usize, side: usize) -> Vec<f32> {
    let top = (side - depth) / 2;
    let mut out = vec![0f32; side * side];
    out[top * side..(top + depth) * side].copy_from_slice(&plane);
    out
}

/// Every axial, coronal and sagittal slice of a grid with `X == Y >= Z`.
/// Coronal and sagittal planes are zero-padded to `X × X`.
pub fn extract_plane_slices(v: &Volume) -> Result<PlaneSlices> {
    let [nx, ny, nz] = v.dims;
    if nx != ny || nz > nx {
        return Err(Error::Invalid(format!("plane extraction needs a square in-plane grid with depth <= side, got {:?}", v.dims)));
    }
    let side = nx;
    let axial = SliceSet {
        height: side,
        width: side,
        indices: (0..nz).collect(),
        slices: (0..nz).map(|z| axial_slice(v, z)).collect(),
    };
    let coronal_plane = |y: usize| {
        let mut p = Vec::with_capacity(nz * nx);
        for z in 0..nz {
            let row = v.index(0, y, z);
            p.extend_from_slice(&v.voxels[row..row + nx]);
        }
        pad_rows(p, nz, side)
    };
    let sagittal_plane = |x: usize| {
        let mut p = Vec::with_capacity(nz * ny);
        for z in 0..nz {
            p.extend((0..ny).map(|y| v.get(x, y, z)));
        }
        pad_rows(p, nz, side)
    };
    let coronal =
        SliceSet { height: side, width: side, indices: (0..ny).collect(), slices: (0..ny).map(coronal_plane).collect() };
    let sagittal =
        SliceSet { height: side, width: side, indices: (0..nx).collect(), slices: (0..nx).map(sagittal_plane).collect() };
    Ok(PlaneSlices { axial, coronal: Some(coronal), sagittal: Some(sagittal) })
}

/// Plane stacks for a transformer: all three planes in full mode, or
/// `slices` centred axial slices only.
pub fn transformer_planes(v: &Volume, slices: usize) -> Result<PlaneSlices> {
    if slices == v.dims[2] {
        extract_plane_slices(v)
    } else {
        Ok(PlaneSlices { axial: select_axial_slices(v, slices)?, coronal: None, sagittal: None })
    }
}
