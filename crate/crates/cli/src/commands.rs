use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use adbench::cohort::{apply_labeling, read_manifest, stratified_subject_kfold, subject_labels, write_manifest, Labeling, LabeledScan};
use adbench::data::{axial_stack, normalization_spec, prepare, prepare_scans, resolve, PrepConfig, Prepared};
use adbench::metrics::Metrics;
use adbench::models::{Model, ModelConfig, ModelKind};
use adbench::occlusion::{export_heatmap, occlusion_map, Baseline, ModelClassifier, OcclusionConfig, Target};
use adbench::synth::{generate_cohort, CohortSpec};
use adbench::train::{cross_validate, CohortData, CvSpec, FoldOutcome};
use adbench::volume::{brain_mask, load_volume, load_volume_with_spec, normalize_with_mask, save_volume_with, NormMode, NormalizationSpec};
use adbench_tensor::checkpoint::Checkpoint;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{manifest_in, ExperimentConfig};
use crate::results::{append_records, has_hash, read_records, render_summary, AppendOutcome, ExperimentRecord, IN_DISTRIBUTION, RESULTS_FILE, SUMMARY_FILE};

pub fn synth(cohort: &str, n: usize, seed: u64, coarsen: usize, out: &Path) -> Result<()> {
    let spec = match cohort {
        "adni-like" => CohortSpec::adni_like(n),
        "fleni-like" => CohortSpec::fleni_like(n),
        other => bail!("unknown cohort `{other}` (expected adni-like or fleni-like)"),
    };
    let spec = if coarsen > 1 { spec.coarsened(coarsen) } else { spec };
    let s = generate_cohort(&spec, seed, out)?;
    let [cn, mci, ad] = s.final_counts;
    println!("{}: {} subjects, {} scans, final CN/MCI/AD = {cn}/{mci}/{ad}, grid {:?}", spec.name, s.subjects, s.scans, spec.dims);
    Ok(())
}

/// Resamples (and optionally normalises) every scan of a cohort onto the
/// common grid, writing a new cohort directory.
pub fn preprocess(cohort: &Path, out: &Path, prep: &PrepConfig, norm: Option<NormMode>) -> Result<()> {
    let manifest = manifest_in(cohort);
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let spec = match norm {
        None => None,
        Some(NormMode::ZscoreGlobal) => bail!("zscore_global needs training-split statistics; normalise inside `run` instead"),
        Some(m) => Some(normalization_spec(m, None)?),
    };
    let mut records = read_manifest(&manifest)?;
    for r in &mut records {
        let p = prepare(&load_volume(&resolve(dir, &r.volume_path))?, prep)?;
        let v = match &spec {
            Some(s) => normalize_with_mask(&p.volume, &p.mask, s)?.volume,
            None => p.volume,
        };
        let rel = PathBuf::from("volumes").join(&r.scan_id);
        save_volume_with(&v, &out.join(&rel), spec.as_ref())?;
        r.volume_path = rel.to_string_lossy().into_owned();
    }
    write_manifest(&out.join(adbench::synth::MANIFEST_FILE), &records)?;
    println!("{} scans written to {} on grid {:?}", records.len(), out.display(), prep.grid);
    Ok(())
}

/// Everything `occlusion` needs to rebuild a fold's model and its input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldArtifact {
    pub config_hash: String,
    pub fold: usize,
    pub model: ModelConfig,
    pub labeling: Labeling,
    pub class_names: Vec<String>,
    pub grid: [usize; 3],
    pub mask_tau: f64,
    pub normalization: NormalizationSpec,
}

pub fn artifact_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("model.json")
}

fn load_cohort(manifest: &Path, labeling: Labeling, prep: &PrepConfig) -> Result<(Vec<LabeledScan>, Vec<Prepared>)> {
    let records = read_manifest(manifest)?;
    let scans = apply_labeling(&records, labeling)?.scans;
    if scans.is_empty() {
        bail!("{}: no scans survive {} labeling", manifest.display(), labeling.as_str());
    }
    let prepared = prepare_scans(manifest.parent().unwrap_or(Path::new(".")), &scans, prep)?;
    Ok((scans, prepared))
}

fn record(cfg: &ExperimentConfig, hash: &str, fold: usize, best_epoch: usize, split: String, m: &Metrics, timestamp: &str) -> ExperimentRecord {
    ExperimentRecord {
        model: cfg.model.as_str().to_string(),
        labeling: cfg.labeling.as_str().to_string(),
        classes: cfg.classes,
        slices: cfg.slices,
        normalization: cfg.normalization.as_str().to_string(),
        selection: cfg.selection.as_str().to_string(),
        fold,
        split,
        auc: m.auc,
        accuracy: m.accuracy,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        best_epoch,
        seed: cfg.seed,
        config_hash: hash.to_string(),
        timestamp: timestamp.to_string(),
    }
}

pub struct RunReport {
    pub config_hash: String,
    pub appended: usize,
    pub skipped: bool,
}

/// Preprocess, label, split, cross-validate and evaluate externally; rows go
/// to `<out>/results.csv`, checkpoints to `<out>/checkpoints/<hash>/`.
pub fn run(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<RunReport> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let results = out.join(RESULTS_FILE);
    if !force && has_hash(&results, &hash)? {
        log::info!("config {} already in {}; skipping", &hash[..12], results.display());
        return Ok(RunReport { config_hash: hash, appended: 0, skipped: true });
    }
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config();
    let (scans, prepared) = load_cohort(&cfg.manifest_path(), cfg.labeling, &cfg.prep)?;
    let mut ext_data = Vec::new();
    for e in &cfg.external {
        let (s, p) = load_cohort(&manifest_in(&e.path), cfg.labeling, &cfg.prep).with_context(|| format!("external cohort {}", e.name))?;
        ext_data.push((e.name.clone(), s, p));
    }
    let plan = stratified_subject_kfold(&subject_labels(&scans), cfg.folds, cfg.seed)?;
    let ckpt_dir = out.join("checkpoints").join(&hash[..16]);
    fs::create_dir_all(&ckpt_dir).with_context(|| ckpt_dir.display().to_string())?;
    let spec = CvSpec { model: &model_cfg, train: &train_cfg, selection: cfg.selection, normalization: cfg.normalization };
    let main = CohortData { name: "main".into(), scans: &scans, prepared: &prepared };
    let externals: Vec<CohortData<'_>> = ext_data.iter().map(|(n, s, p)| CohortData { name: n.clone(), scans: s, prepared: p }).collect();
    let mut rows = Vec::new();
    let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    cross_validate(&spec, &main, &plan, &externals, |f: &FoldOutcome| {
        let r = &f.trained.result;
        let path = ckpt_dir.join(format!("fold{}.ckpt", r.fold));
        Checkpoint::new(model_cfg.kind.as_str(), &hash, &f.trained.model.params, &f.trained.model.buffers).save(&path)?;
        let artifact = FoldArtifact {
            config_hash: hash.clone(),
            fold: r.fold,
            model: model_cfg.clone(),
            labeling: cfg.labeling,
            class_names: cfg.labeling.class_names().iter().map(|s| s.to_string()).collect(),
            grid: cfg.prep.grid,
            mask_tau: cfg.prep.mask_tau,
            normalization: normalization_spec(cfg.normalization, f.global_stats.as_ref())?,
        };
        let ap = artifact_path(&path);
        fs::write(&ap, serde_json::to_string_pretty(&artifact)? + "\n").map_err(|e| adbench::Error::Io { path: ap.clone(), source: e })?;
        rows.push(record(cfg, &hash, r.fold, r.best_epoch, IN_DISTRIBUTION.into(), &f.test, &timestamp));
        for (name, m) in &f.external {
            rows.push(record(cfg, &hash, r.fold, r.best_epoch, format!("external_{name}"), m, &timestamp));
        }
        log::info!("fold {}: best epoch {} of {}, test AUC {:.3}", r.fold, r.best_epoch, r.epochs_run, f.test.auc);
        Ok(())
    })?;
    let appended = match append_records(&results, &rows, force)? {
        AppendOutcome::Appended(n) => n,
        AppendOutcome::Skipped => 0,
    };
    Ok(RunReport { config_hash: hash, appended, skipped: appended == 0 })
}

/// Axis value sets of an ablation grid, applied on top of `base`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub base: serde_json::Value,
    #[serde(default)]
    pub model: Option<Vec<String>>,
    #[serde(default)]
    pub labeling: Option<Vec<String>>,
    #[serde(default)]
    pub slices: Option<Vec<usize>>,
    #[serde(default)]
    pub normalization: Option<Vec<String>>,
    #[serde(default)]
    pub selection: Option<Vec<String>>,
}

pub enum GridEntry {
    Valid(Box<ExperimentConfig>),
    Skipped { combo: String, reason: String },
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let p = e.path().to_string();
            anyhow::anyhow!("{}: grid error at `{p}`: {}", path.display(), e.into_inner())
        })
    }

    /// Every combination in axis order; invalid ones carry their reason.
    /// Labeling fixes the class count.
    pub fn expand(&self, base_dir: &Path) -> Result<Vec<GridEntry>> {
        let str_axis = |name: &str, v: &Option<Vec<String>>| -> Result<Option<Vec<serde_json::Value>>> {
            match v {
                Some(v) if v.is_empty() => bail!("grid axis `{name}` is empty"),
                Some(v) => Ok(Some(v.iter().map(|s| serde_json::Value::from(s.as_str())).collect())),
                None => Ok(None),
            }
        };
        let mut axes: Vec<(&str, Vec<serde_json::Value>)> = Vec::new();
        for (name, v) in [("model", &self.model), ("labeling", &self.labeling), ("normalization", &self.normalization), ("selection", &self.selection)] {
            if let Some(vals) = str_axis(name, v)? {
                axes.push((name, vals));
            }
        }
        match &self.slices {
            Some(v) if v.is_empty() => bail!("grid axis `slices` is empty"),
            Some(v) => axes.push(("slices", v.iter().map(|s| serde_json::Value::from(*s)).collect())),
            None => {}
        }
        if axes.is_empty() {
            bail!("ablation grid has no axes");
        }
        if !self.base.is_object() {
            bail!("grid `base` must be an object");
        }
        let mut combos: Vec<Vec<(&str, serde_json::Value)>> = vec![Vec::new()];
        for (name, vals) in &axes {
            combos = combos
                .into_iter()
                .flat_map(|c| vals.iter().map(move |v| c.iter().cloned().chain([(*name, v.clone())]).collect()))
                .collect();
        }
        let mut out = Vec::with_capacity(combos.len());
        for combo in combos {
            let mut v = self.base.clone();
            let obj = v.as_object_mut().expect("checked object");
            for (k, val) in &combo {
                obj.insert(k.to_string(), val.clone());
            }
            if let Some(l) = obj.get("labeling").and_then(|l| l.as_str()).and_then(|l| l.parse::<Labeling>().ok()) {
                obj.insert("classes".into(), l.num_classes().into());
            }
            let label = combo.iter().map(|(k, v)| format!("{k}={}", v.to_string().trim_matches('"'))).collect::<Vec<_>>().join(" ");
            let mut cfg = ExperimentConfig::from_value(v)?;
            cfg.rebase(base_dir);
            match cfg.validate() {
                Ok(()) => out.push(GridEntry::Valid(Box::new(cfg))),
                Err(e) => out.push(GridEntry::Skipped { combo: label, reason: e.to_string() }),
            }
        }
        Ok(out)
    }
}

/// Runs every valid combination, then writes and returns the summary of
/// this grid's rows.
pub fn ablate(grid: &AblationGrid, base_dir: &Path, out: &Path, force: bool) -> Result<String> {
    let entries = grid.expand(base_dir)?;
    let mut hashes = BTreeSet::new();
    for e in &entries {
        match e {
            GridEntry::Skipped { combo, reason } => log::warn!("skipping {combo}: {reason}"),
            GridEntry::Valid(cfg) => {
                let r = run(cfg, out, force)?;
                hashes.insert(r.config_hash);
            }
        }
    }
    if hashes.is_empty() {
        bail!("no valid combination in the grid");
    }
    let rows: Vec<ExperimentRecord> = read_records(&out.join(RESULTS_FILE))?.into_iter().filter(|r| hashes.contains(&r.config_hash)).collect();
    let table = render_summary(&rows);
    let p = out.join(SUMMARY_FILE);
    fs::write(&p, &table).with_context(|| p.display().to_string())?;
    Ok(table)
}

pub fn report(results: &Path) -> Result<String> {
    let rows = read_records(results)?;
    if rows.is_empty() {
        bail!("{} holds no rows", results.display());
    }
    Ok(render_summary(&rows))
}

pub enum ClassChoice {
    Predicted,
    Given(String),
}

pub struct OcclusionArgs<'a> {
    pub checkpoint: &'a Path,
    pub volume: &'a Path,
    pub out: &'a Path,
    pub patch: usize,
    pub stride: usize,
    pub baseline: Baseline,
    pub class: ClassChoice,
}

/// Writes `<out>/<volume name>.csv` and `.pgm`; returns their paths.
pub fn occlusion(a: &OcclusionArgs<'_>) -> Result<(PathBuf, PathBuf)> {
    let ap = artifact_path(a.checkpoint);
    let artifact: FoldArtifact = serde_json::from_str(&fs::read_to_string(&ap).with_context(|| format!("reading {}", ap.display()))?)
        .with_context(|| ap.display().to_string())?;
    let mut model = Model::build(&artifact.model, 0)?;
    let ckpt = Checkpoint::load(a.checkpoint)?;
    ckpt.restore_into(artifact.model.kind.as_str(), &mut model.params, &mut model.buffers)?;
    let (vol, spec) = load_volume_with_spec(a.volume)?;
    if vol.dims() != artifact.grid {
        bail!(
            "volume grid {:?} does not match the model's {:?}; run `adbench preprocess --grid {}` first",
            vol.dims(),
            artifact.grid,
            artifact.grid.map(|d| d.to_string()).join(",")
        );
    }
    let vol = match spec {
        Some(s) if s.mode == artifact.normalization.mode => vol,
        Some(s) => bail!("volume was normalised with {} but the model expects {}", s.mode.as_str(), artifact.normalization.mode.as_str()),
        None => normalize_with_mask(&vol, &brain_mask(&vol, artifact.mask_tau)?, &artifact.normalization)?.volume,
    };
    let target = match &a.class {
        ClassChoice::Predicted => Target::Predicted,
        ClassChoice::Given(label) => Target::Class(
            artifact
                .class_names
                .iter()
                .position(|c| c.eq_ignore_ascii_case(label))
                .with_context(|| format!("unknown label `{label}`; classes are {}", artifact.class_names.join(", ")))?,
        ),
    };
    let clf = ModelClassifier::new(&model);
    let image = clf.image(&axial_stack(&vol, &artifact.model)?)?;
    let cfg = OcclusionConfig { patch: a.patch, stride: a.stride, baseline: a.baseline, target };
    let map = occlusion_map(&clf, &image, &cfg)?;
    let name = a.volume.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    let stem = a.out.join(name);
    export_heatmap(&map, &stem)?;
    println!(
        "{}: target {} (p = {:.4}), {}x{} patches",
        a.volume.display(),
        artifact.class_names[map.target],
        map.base_probability,
        map.grid_rows,
        map.grid_cols
    );
    Ok((stem.with_extension("csv"), stem.with_extension("pgm")))
}

pub fn describe(kind: ModelKind, classes: usize, slices: usize, image_size: usize, depth: usize) -> Result<String> {
    let cfg = ModelConfig::new(kind, classes, slices).with_image_size(image_size);
    let m = Model::build(&cfg, 0)?;
    let mut s = format!("{} ({} classes, {} slices, {}x{} input)\n", kind.display_name(), classes, slices, image_size, image_size);
    for (name, n) in m.parameter_table(depth) {
        s.push_str(&format!("  {name:<32} {n:>12}\n"));
    }
    s.push_str(&format!("  {:<32} {:>12}\n", "total", m.count_parameters()));
    Ok(s)
}
