//! From raw volumes to model-ready samples: resample, mask, normalise, then
//! keep an axial stack that every model input is derived from.

use std::path::{Path, PathBuf};

use adbench_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::cohort::LabeledScan;
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::volume::{
    brain_mask, extract_plane_slices, load_volume, make_grid_montage, normalize_with_mask, resample_nn,
    select_axial_slices, GlobalStats, GlobalStatsAccumulator, Mask, Montage, NormMode, NormalizationSpec, SliceSet,
    Volume, DEFAULT_MASK_TAU, MONTAGE_SIDE,
};

pub const DEFAULT_GRID: [usize; 3] = [128, 128, 77];

fn default_grid() -> [usize; 3] {
    DEFAULT_GRID
}
fn default_tau() -> f64 {
    DEFAULT_MASK_TAU
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepConfig {
    #[serde(default = "default_grid")]
    pub grid: [usize; 3],
    #[serde(default = "default_tau")]
    pub mask_tau: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { grid: DEFAULT_GRID, mask_tau: DEFAULT_MASK_TAU }
    }
}

/// A volume on the common grid together with its brain mask.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub volume: Volume,
    pub mask: Mask,
}

pub fn prepare(v: &Volume, cfg: &PrepConfig) -> Result<Prepared> {
    let volume = resample_nn(v, cfg.grid)?;
    let mask = brain_mask(&volume, cfg.mask_tau)?;
    Ok(Prepared { volume, mask })
}

/// Training-set statistics for global z-scoring.
pub fn fit_global_stats<'a>(items: impl IntoIterator<Item = &'a Prepared>, provenance: &str) -> Result<GlobalStats> {
    let mut acc = GlobalStatsAccumulator::default();
    for p in items {
        acc.add(&p.volume, &p.mask);
    }
    acc.finish(provenance)
}

pub fn normalization_spec(mode: NormMode, global: Option<&GlobalStats>) -> Result<NormalizationSpec> {
    match mode {
        NormMode::ZscorePerImage => Ok(NormalizationSpec::per_image()),
        NormMode::Minmax => Ok(NormalizationSpec::minmax()),
        NormMode::ZscoreGlobal => global
            .cloned()
            .map(NormalizationSpec::global)
            .ok_or_else(|| Error::Config("z-score global normalisation needs training-set statistics".into())),
    }
}

pub fn normalize_prepared(p: &Prepared, spec: &NormalizationSpec) -> Result<Volume> {
    let n = normalize_with_mask(&p.volume, &p.mask, spec)?;
    if let Some(w) = &n.warning {
        log::warn!("{w}");
    }
    Ok(n.volume)
}

/// `k` axial slices of side `s`, stored slice-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialStack {
    pub k: usize,
    pub side: usize,
    pub data: Vec<f32>,
}

impl AxialStack {
    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn from_slices(s: &SliceSet) -> Result<Self> {
        if s.height != s.width {
            return Err(Error::Invalid(format!("slices must be square, got {}x{}", s.height, s.width)));
        }
        Ok(AxialStack { k: s.len(), side: s.width, data: s.slices.concat() })
    }

    fn slice_set(&self) -> SliceSet {
        SliceSet {
            height: self.side,
            width: self.side,
            indices: (0..self.k).collect(),
            slices: (0..self.k).map(|i| self.slice(i).to_vec()).collect(),
        }
    }

    pub fn montage(&self) -> Result<Montage> {
        make_grid_montage(&self.slice_set())
    }

    pub fn from_montage(m: &Montage) -> Result<Self> {
        if m.cell_height != m.cell_width {
            return Err(Error::Invalid("montage cells must be square".into()));
        }
        let k = MONTAGE_SIDE * MONTAGE_SIDE;
        Ok(AxialStack { k, side: m.cell_width, data: (0..k).flat_map(|i| m.cell(i)).collect() })
    }

    /// The stack read back as an `side × side × k` volume.
    pub fn to_volume(&self) -> Result<Volume> {
        Volume::new([self.side, self.side, self.k], [1.0; 3], self.data.clone())
    }
}

/// The axial stack a model consumes: 16 centred slices, or every slice for
/// the full-plane transformer.
pub fn axial_stack(v: &Volume, cfg: &ModelConfig) -> Result<AxialStack> {
    let [nx, ny, nz] = v.dims();
    if nx != cfg.image_size || ny != cfg.image_size {
        return Err(Error::Config(format!(
            "grid {nx}x{ny} does not match model image_size {}",
            cfg.image_size
        )));
    }
    if full_planes(cfg) {
        if nz > nx {
            return Err(Error::Config(format!("full-plane mode needs depth <= {nx}, got {nz}")));
        }
        AxialStack::from_slices(&SliceSet {
            height: ny,
            width: nx,
            indices: (0..nz).collect(),
            slices: (0..nz).map(|z| crate::volume::axial_slice(v, z)).collect(),
        })
    } else {
        AxialStack::from_slices(&select_axial_slices(v, 16)?)
    }
}

/// True for the transformer in 77-slice mode, which uses every axial slice
/// of the grid plus the coronal and sagittal planes.
pub fn full_planes(cfg: &ModelConfig) -> bool {
    cfg.kind == ModelKind::PlaneTransformer && cfg.slices == 77
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub subject_id: String,
    pub scan_id: String,
    pub label: usize,
    pub stack: AxialStack,
}

/// Input tensors for a batch of stacks, following the model's contract.
pub fn batch_inputs(cfg: &ModelConfig, stacks: &[&AxialStack]) -> Result<Vec<Tensor<f32>>> {
    let n = stacks.len();
    let first = stacks.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (k, s) = (first.k, first.side);
    if stacks.iter().any(|t| t.k != k || t.side != s) {
        return Err(Error::Invalid("stacks in a batch differ in shape".into()));
    }
    match cfg.kind {
        ModelKind::InceptionGrid => {
            let mut data = Vec::with_capacity(n * 16 * s * s);
            for t in stacks {
                data.extend(t.montage()?.pixels);
            }
            Ok(vec![Tensor::new(vec![n, 1, 4 * s, 4 * s], data)?])
        }
        _ if !full_planes(cfg) => {
            if k != 16 {
                return Err(Error::Invalid(format!("model expects 16 slices, stack has {k}")));
            }
            Ok(vec![Tensor::new(vec![n, k, s, s], stacks.iter().flat_map(|t| t.data.iter().copied()).collect())?])
        }
        _ => {
            let mut planes = [Vec::new(), Vec::new(), Vec::new()];
            for t in stacks {
                let p = extract_plane_slices(&t.to_volume()?)?;
                planes[0].extend(t.data.iter().copied());
                for (dst, src) in planes[1..].iter_mut().zip([&p.coronal, &p.sagittal]) {
                    for sl in &src.as_ref().expect("full extraction").slices {
                        dst.extend_from_slice(sl);
                    }
                }
            }
            let [a, c, g] = planes;
            Ok(vec![
                Tensor::new(vec![n, k, s, s], a)?,
                Tensor::new(vec![n, s, s, s], c)?,
                Tensor::new(vec![n, s, s, s], g)?,
            ])
        }
    }
}

/// Resolves a manifest volume path relative to the manifest's directory.
pub fn resolve(manifest_dir: &Path, volume_path: &str) -> PathBuf {
    let p = Path::new(volume_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

/// Loads and prepares every scan in order.
pub fn prepare_scans(manifest_dir: &Path, scans: &[LabeledScan], cfg: &PrepConfig) -> Result<Vec<Prepared>> {
    scans.iter().map(|s| prepare(&load_volume(&resolve(manifest_dir, &s.volume_path))?, cfg)).collect()
}

/// Normalises prepared scans and cuts the model's axial stacks.
pub fn make_samples(
    scans: &[LabeledScan],
    prepared: &[Prepared],
    spec: &NormalizationSpec,
    model: &ModelConfig,
) -> Result<Vec<Sample>> {
    scans
        .iter()
        .zip(prepared)
        .map(|(s, p)| {
            Ok(Sample {
                subject_id: s.subject_id.clone(),
                scan_id: s.scan_id.clone(),
                label: s.label,
                stack: axial_stack(&normalize_prepared(p, spec)?, model)?,
            })
        })
        .collect()
}
