//! `results.csv` rows, locked appends and the summary table.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use adbench::metrics::aggregate_folds;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.md";
pub const IN_DISTRIBUTION: &str = "adni_test";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub model: String,
    pub labeling: String,
    pub classes: usize,
    pub slices: usize,
    pub normalization: String,
    pub selection: String,
    pub fold: usize,
    pub split: String,
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub best_epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub timestamp: String,
}

impl ExperimentRecord {
    /// Identity of a row within one results file.
    pub fn key(&self) -> (String, String, usize, String, String, usize, String) {
        (
            self.model.clone(),
            self.labeling.clone(),
            self.slices,
            self.normalization.clone(),
            self.selection.clone(),
            self.fold,
            self.split.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("auc", self.auc), ("accuracy", self.accuracy), ("sensitivity", self.sensitivity), ("specificity", self.specificity)] {
            if !(0.0..=1.0).contains(&v) {
                bail!("{name} = {v} outside [0, 1] in fold {} {}", self.fold, self.split);
            }
        }
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().map(|row| row.with_context(|| format!("parsing {}", path.display()))).collect()
}

fn lock_path(results: &Path) -> PathBuf {
    let mut p = results.as_os_str().to_owned();
    p.push(".lock");
    PathBuf::from(p)
}

/// Holds an exclusive lock on `<results>.lock` for the life of the guard.
pub struct ResultsLock {
    file: File,
}

impl ResultsLock {
    pub fn acquire(results: &Path) -> Result<Self> {
        if let Some(dir) = results.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let p = lock_path(results);
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&p).with_context(|| format!("opening {}", p.display()))?;
        file.lock().with_context(|| format!("locking {}", p.display()))?;
        Ok(ResultsLock { file })
    }
}

impl Drop for ResultsLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

pub fn has_hash(path: &Path, hash: &str) -> Result<bool> {
    let _guard = ResultsLock::acquire(path)?;
    Ok(read_records(path)?.iter().any(|r| r.config_hash == hash))
}

#[derive(Debug, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended(usize),
    /// Rows for this config hash were already present.
    Skipped,
}

/// Appends `rows` under the file lock. Without `force`, a file that already
/// holds rows of the same config hash is left alone and rows clashing on the
/// identity key are an error; with `force` the older rows are replaced.
pub fn append_records(path: &Path, rows: &[ExperimentRecord], force: bool) -> Result<AppendOutcome> {
    for r in rows {
        r.validate()?;
    }
    let _guard = ResultsLock::acquire(path)?;
    let existing = read_records(path)?;
    let hashes: BTreeSet<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    let keys: BTreeSet<_> = rows.iter().map(ExperimentRecord::key).collect();
    if keys.len() != rows.len() {
        bail!("duplicate (model, labeling, slices, normalization, selection, fold, split) among new rows");
    }
    let clashes = |r: &ExperimentRecord| hashes.contains(r.config_hash.as_str()) || keys.contains(&r.key());
    if !force {
        if existing.iter().any(|r| hashes.contains(r.config_hash.as_str())) {
            return Ok(AppendOutcome::Skipped);
        }
        if let Some(r) = existing.iter().find(|r| keys.contains(&r.key())) {
            bail!(
                "{} already has {} / {} / fold {} / {} from config {}; rerun with --force to replace it",
                path.display(),
                r.model,
                r.normalization,
                r.fold,
                r.split,
                &r.config_hash[..12.min(r.config_hash.len())]
            );
        }
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    } else {
        let tmp = path.with_extension("csv.tmp");
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in existing.iter().filter(|r| !clashes(r)).chain(rows) {
            w.serialize(r)?;
        }
        w.flush()?;
        drop(w);
        fs::rename(&tmp, path)?;
    }
    Ok(AppendOutcome::Appended(rows.len()))
}

/// Row family of the summary table.
type Family = (String, String, usize, usize, String, String);

fn family(r: &ExperimentRecord) -> Family {
    (r.model.clone(), r.labeling.clone(), r.classes, r.slices, r.normalization.clone(), r.selection.clone())
}

fn model_label(id: &str) -> String {
    id.parse::<adbench::models::ModelKind>().map(|k| k.display_name().to_string()).unwrap_or_else(|_| id.to_string())
}

fn norm_label(id: &str) -> String {
    adbench::volume::NormMode::ALL
        .into_iter()
        .find(|m| m.as_str() == id)
        .map(|m| m.display_name().to_string())
        .unwrap_or_else(|| id.to_string())
}

fn split_label(split: &str) -> String {
    if split == IN_DISTRIBUTION {
        "ADNI Test".into()
    } else {
        split.strip_prefix("external_").unwrap_or(split).to_string()
    }
}

/// Markdown table of mean (std) AUC over folds, one row per experiment
/// family and one column per split. A pure function of the rows.
pub fn render_summary(rows: &[ExperimentRecord]) -> String {
    let mut cells: BTreeMap<Family, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut splits: BTreeSet<String> = BTreeSet::new();
    for r in rows {
        cells.entry(family(r)).or_default().entry(r.split.clone()).or_default().push(r.auc);
        splits.insert(r.split.clone());
    }
    let mut splits: Vec<String> = splits.into_iter().collect();
    splits.sort_by_key(|s| (s != IN_DISTRIBUTION, s.clone()));
    let mut out = String::from("| Model | Labeling | Classes | Slices | Normalization | Selection |");
    for s in &splits {
        out.push_str(&format!(" {} |", split_label(s)));
    }
    out.push_str("\n|---|---|---|---|---|---|");
    out.push_str(&"---|".repeat(splits.len()));
    out.push('\n');
    for ((model, labeling, classes, slices, norm, selection), by_split) in &cells {
        out.push_str(&format!("| {} | {labeling} | {classes} | {slices} | {} | {selection} |", model_label(model), norm_label(norm)));
        for s in &splits {
            match by_split.get(s) {
                Some(v) => out.push_str(&format!(" {} |", aggregate_folds(v).map(|s| s.to_string()).unwrap_or_else(|_| "n/a".into()))),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(fold: usize, split: &str, auc: f64, hash: &str) -> ExperimentRecord {
        ExperimentRecord {
            model: "pruned_resnet".into(),
            labeling: "visit953".into(),
            classes: 2,
            slices: 16,
            normalization: "minmax".into(),
            selection: "first".into(),
            fold,
            split: split.into(),
            auc,
            accuracy: 0.5,
            sensitivity: 0.5,
            specificity: 0.5,
            best_epoch: 3,
            seed: 0,
            config_hash: hash.into(),
            timestamp: "t".into(),
        }
    }

    #[test]
    fn append_is_idempotent_per_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(RESULTS_FILE);
        let rows = vec![row(0, IN_DISTRIBUTION, 0.8, "aa"), row(1, IN_DISTRIBUTION, 0.9, "aa")];
        assert_eq!(append_records(&p, &rows, false).unwrap(), AppendOutcome::Appended(2));
        assert_eq!(append_records(&p, &rows, false).unwrap(), AppendOutcome::Skipped);
        assert_eq!(read_records(&p).unwrap(), rows);
        // Same identity from another config clashes unless forced.
        let other = vec![row(0, IN_DISTRIBUTION, 0.7, "bb")];
        assert!(append_records(&p, &other, false).is_err());
        append_records(&p, &other, true).unwrap();
        let now = read_records(&p).unwrap();
        assert_eq!(now.len(), 2);
        assert_eq!(now[1], other[0]);
        assert!(append_records(&p, &[row(5, "x", 1.5, "cc")], false).is_err());
    }

    #[test]
    fn summary_cells() {
        let rows = vec![
            row(0, IN_DISTRIBUTION, 0.81, "h"),
            row(1, IN_DISTRIBUTION, 0.85, "h"),
            row(0, "external_fleni100", 0.7, "h"),
            row(1, "external_fleni100", 0.7, "h"),
        ];
        let t = render_summary(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].ends_with("| ADNI Test | fleni100 |"), "{}", lines[0]);
        assert_eq!(lines[2], "| P-ResNet | visit953 | 2 | 16 | min-max | first | 0.83 (0.02) | 0.70 (0.00) |");
        assert_eq!(t, render_summary(&rows));
    }
}
