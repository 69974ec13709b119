//! Visit manifests, longitudinal labeling, sample selection, subject-level
//! stratified folds and class weights.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Diagnosis codes as recorded at a visit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RawDiagnosis {
    CN,
    SMC,
    EMCI,
    MCI,
    LMCI,
    AD,
}

impl RawDiagnosis {
    pub const ALL: [RawDiagnosis; 6] =
        [RawDiagnosis::CN, RawDiagnosis::SMC, RawDiagnosis::EMCI, RawDiagnosis::MCI, RawDiagnosis::LMCI, RawDiagnosis::AD];

    pub fn as_str(self) -> &'static str {
        match self {
            RawDiagnosis::CN => "CN",
            RawDiagnosis::SMC => "SMC",
            RawDiagnosis::EMCI => "EMCI",
            RawDiagnosis::MCI => "MCI",
            RawDiagnosis::LMCI => "LMCI",
            RawDiagnosis::AD => "AD",
        }
    }
}

impl FromStr for RawDiagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RawDiagnosis::ALL.into_iter().find(|d| d.as_str() == s).ok_or_else(|| Error::UnknownDiagnosis(s.to_string()))
    }
}

impl fmt::Display for RawDiagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Canonical diagnosis after merging the MCI subtypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    CN,
    MCI,
    AD,
}

impl Diagnosis {
    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::CN => "CN",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        }
    }
}

impl RawDiagnosis {
    /// `None` for SMC, which is dropped.
    pub fn canonical(self) -> Option<Diagnosis> {
        match self {
            RawDiagnosis::CN => Some(Diagnosis::CN),
            RawDiagnosis::SMC => None,
            RawDiagnosis::EMCI | RawDiagnosis::MCI | RawDiagnosis::LMCI => Some(Diagnosis::MCI),
            RawDiagnosis::AD => Some(Diagnosis::AD),
        }
    }
}

pub fn normalize_diagnosis(raw: &str) -> Result<Option<Diagnosis>> {
    Ok(raw.parse::<RawDiagnosis>()?.canonical())
}

/// One row of a cohort manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub subject_id: String,
    pub scan_id: String,
    pub acquisition_date: NaiveDate,
    pub diagnosis: RawDiagnosis,
    pub volume_path: String,
}

pub const MANIFEST_HEADER: [&str; 5] = ["subject_id", "scan_id", "acquisition_date", "diagnosis", "volume_path"];

pub fn write_manifest(path: &Path, records: &[VisitRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().at(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<VisitRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Format(format!("{}: manifest header must be {}", path.display(), MANIFEST_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("").to_string();
        let date = NaiveDate::parse_from_str(&field(2), "%Y-%m-%d")
            .map_err(|e| Error::Format(format!("{} row {}: bad date `{}`: {e}", path.display(), line + 2, field(2))))?;
        out.push(VisitRecord {
            subject_id: field(0),
            scan_id: field(1),
            acquisition_date: date,
            diagnosis: field(3).parse()?,
            volume_path: field(4),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    Visit953,
    Last,
}

impl Labeling {
    pub fn as_str(self) -> &'static str {
        match self {
            Labeling::Visit953 => "visit953",
            Labeling::Last => "last",
        }
    }

    /// Binary (NonAD/AD) for `visit953`, ternary (CN/MCI/AD) for `last`.
    pub fn num_classes(self) -> usize {
        match self {
            Labeling::Visit953 => 2,
            Labeling::Last => 3,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Labeling::Visit953 => &["NonAD", "AD"],
            Labeling::Last => &["CN", "MCI", "AD"],
        }
    }
}

impl FromStr for Labeling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visit953" => Ok(Labeling::Visit953),
            "last" => Ok(Labeling::Last),
            _ => Err(Error::Config(format!("unknown labeling `{s}` (expected visit953 or last)"))),
        }
    }
}

/// Class index of a diagnosis. AD is always the highest index, so it is the
/// positive class of binary metrics.
pub fn class_index(d: Diagnosis, num_classes: usize) -> Result<usize> {
    match (num_classes, d) {
        (2, Diagnosis::AD) => Ok(1),
        (2, Diagnosis::CN) => Ok(0),
        (2, Diagnosis::MCI) => Err(Error::LabelSpace("MCI has no class in a binary AD/NonAD label space".into())),
        (3, d) => Ok(d as usize),
        (c, _) => Err(Error::Config(format!("unsupported class count {c}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visit953 {
    /// Index into the sorted visits of the chosen scan.
    Ad { scan: usize },
    NonAd { scan: usize },
    Excluded,
}

/// Binary label for a subject's date-sorted canonical diagnoses. Any AD
/// visit makes the subject AD (latest AD scan); otherwise a subject whose
/// first visit is CN is NonAD (earliest CN scan); everyone else is excluded.
pub fn label_visit953(diagnoses: &[Diagnosis]) -> Result<Visit953> {
    if diagnoses.is_empty() {
        return Err(Error::Invalid("visit953: empty visit list".into()));
    }
    if let Some(i) = diagnoses.iter().rposition(|&d| d == Diagnosis::AD) {
        return Ok(Visit953::Ad { scan: i });
    }
    if diagnoses[0] == Diagnosis::CN {
        return Ok(Visit953::NonAd { scan: 0 });
    }
    Ok(Visit953::Excluded)
}

/// The final visit's diagnosis, applied to every scan of the subject.
pub fn label_last(diagnoses: &[Diagnosis]) -> Result<Diagnosis> {
    diagnoses.last().copied().ok_or_else(|| Error::Invalid("last: empty visit list".into()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledScan {
    pub subject_id: String,
    pub scan_id: String,
    pub acquisition_date: NaiveDate,
    pub label: usize,
    pub volume_path: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub subject_id: String,
    pub strategy: Labeling,
    pub diagnoses: Vec<String>,
    pub decision: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scan_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct LabelingOutcome {
    pub scans: Vec<LabeledScan>,
    pub audit: Vec<AuditRecord>,
}

impl LabelingOutcome {
    pub fn write_audit(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
        for rec in &self.audit {
            writeln!(f, "{}", serde_json::to_string(rec)?).at(path)?;
        }
        f.flush().at(path)
    }
}

/// Groups visits by subject, orders them by date, drops SMC visits and
/// applies `labeling`. Subjects are processed in id order.
pub fn apply_labeling(records: &[VisitRecord], labeling: Labeling) -> Result<LabelingOutcome> {
    let mut by_subject: BTreeMap<&str, Vec<&VisitRecord>> = BTreeMap::new();
    for r in records {
        by_subject.entry(&r.subject_id).or_default().push(r);
    }
    let mut out = LabelingOutcome::default();
    let classes = labeling.num_classes();
    for (subject, mut visits) in by_subject {
        visits.sort_by(|a, b| (a.acquisition_date, &a.scan_id).cmp(&(b.acquisition_date, &b.scan_id)));
        let kept: Vec<(&VisitRecord, Diagnosis)> =
            visits.iter().filter_map(|v| v.diagnosis.canonical().map(|d| (*v, d))).collect();
        let mut audit = AuditRecord {
            subject_id: subject.to_string(),
            strategy: labeling,
            diagnoses: visits.iter().map(|v| v.diagnosis.to_string()).collect(),
            decision: String::new(),
            scan_id: None,
            note: None,
        };
        if kept.is_empty() {
            audit.decision = "skipped".into();
            audit.note = Some("no visits left after dropping SMC".into());
            out.audit.push(audit);
            continue;
        }
        let diags: Vec<Diagnosis> = kept.iter().map(|(_, d)| *d).collect();
        let scan = |v: &VisitRecord, label: usize| LabeledScan {
            subject_id: v.subject_id.clone(),
            scan_id: v.scan_id.clone(),
            acquisition_date: v.acquisition_date,
            label,
            volume_path: v.volume_path.clone(),
        };
        match labeling {
            Labeling::Visit953 => {
                let decision = label_visit953(&diags)?;
                if let Visit953::Ad { scan: i } = decision {
                    if diags[i + 1..].iter().any(|&d| d != Diagnosis::AD) {
                        audit.note = Some("AD followed by a later non-AD diagnosis".into());
                    }
                }
                match decision {
                    Visit953::Ad { scan: i } | Visit953::NonAd { scan: i } => {
                        let label = if matches!(decision, Visit953::Ad { .. }) { 1 } else { 0 };
                        audit.decision = labeling.class_names()[label].into();
                        audit.scan_id = Some(kept[i].0.scan_id.clone());
                        out.scans.push(scan(kept[i].0, label));
                    }
                    Visit953::Excluded => audit.decision = "excluded".into(),
                }
            }
            Labeling::Last => {
                let label = class_index(label_last(&diags)?, classes)?;
                audit.decision = labeling.class_names()[label].into();
                out.scans.extend(kept.iter().map(|(v, _)| scan(v, label)));
            }
        }
        out.audit.push(audit);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    All,
    First,
    FirstWTrain,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::All => "all",
            Selection::First => "first",
            Selection::FirstWTrain => "first_w_train",
        }
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Selection::All),
            "first" => Ok(Selection::First),
            "first_w_train" => Ok(Selection::FirstWTrain),
            _ => Err(Error::Config(format!("unknown selection `{s}` (expected all, first or first_w_train)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Keeps each subject's earliest scan when the strategy restricts `role`.
pub fn select_samples(scans: &[LabeledScan], strategy: Selection, role: SplitRole) -> Vec<LabeledScan> {
    let restrict = match strategy {
        Selection::All => false,
        Selection::First => role != SplitRole::Train,
        Selection::FirstWTrain => true,
    };
    if !restrict {
        return scans.to_vec();
    }
    let mut first: BTreeMap<&str, &LabeledScan> = BTreeMap::new();
    for s in scans {
        let e = first.entry(&s.subject_id).or_insert(s);
        if (s.acquisition_date, &s.scan_id) < (e.acquisition_date, &e.scan_id) {
            *e = s;
        }
    }
    scans.iter().filter(|s| std::ptr::eq(*s, first[s.subject_id.as_str()])).cloned().collect()
}

/// Subject ids per fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub train: Vec<LabeledScan>,
    pub val: Vec<LabeledScan>,
    pub test: Vec<LabeledScan>,
}

impl SplitPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Fold `f` is the test set, fold `f + 1 (mod k)` validation, the rest
    /// training.
    pub fn split(&self, scans: &[LabeledScan], fold: usize, selection: Selection) -> Result<FoldSplit> {
        let k = self.k();
        if fold >= k {
            return Err(Error::Invalid(format!("fold {fold} out of range for k = {k}")));
        }
        let fold_of: BTreeMap<&str, usize> =
            self.folds.iter().enumerate().flat_map(|(f, ids)| ids.iter().map(move |s| (s.as_str(), f))).collect();
        let val_fold = (fold + 1) % k;
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for s in scans {
            let f = *fold_of
                .get(s.subject_id.as_str())
                .ok_or_else(|| Error::Invalid(format!("subject {} is not in the split plan", s.subject_id)))?;
            if f == fold {
                test.push(s.clone());
            } else if f == val_fold {
                val.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        Ok(FoldSplit {
            train: select_samples(&train, selection, SplitRole::Train),
            val: select_samples(&val, selection, SplitRole::Val),
            test: select_samples(&test, selection, SplitRole::Test),
        })
    }
}

/// Subject-level stratified k-fold. Each class is shuffled with the seed and
/// dealt round-robin, continuing the fold counter across classes, so every
/// fold's class counts are within one subject of the exact proportion.
pub fn stratified_subject_kfold(subjects: &[(String, usize)], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, label) in subjects {
        by_class.entry(*label).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (label, mut ids) in by_class {
        if ids.len() < k {
            return Err(Error::Invalid(format!("class {label} has {} subjects, fewer than k = {k}", ids.len())));
        }
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut rng);
        for id in ids {
            folds[next % k].push(id.to_string());
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(SplitPlan { folds })
}

/// One label per subject, as used for stratification.
pub fn subject_labels(scans: &[LabeledScan]) -> Vec<(String, usize)> {
    let mut m: BTreeMap<&str, usize> = BTreeMap::new();
    for s in scans {
        m.entry(&s.subject_id).or_insert(s.label);
    }
    m.into_iter().map(|(s, l)| (s.to_string(), l)).collect()
}

/// `w_c = N / (C·n_c)`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Invalid(format!("class {c} has no samples")));
    }
    let total: usize = counts.iter().sum();
    let c = counts.len() as f64;
    Ok(counts.iter().map(|&n| total as f64 / (c * n as f64)).collect())
}

pub fn label_counts(scans: &[LabeledScan], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in scans {
        counts[s.label] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use Diagnosis::*;

    fn visit(subject: &str, scan: &str, date: &str, d: RawDiagnosis) -> VisitRecord {
        VisitRecord {
            subject_id: subject.into(),
            scan_id: scan.into(),
            acquisition_date: date.parse().unwrap(),
            diagnosis: d,
            volume_path: format!("{scan}.vol.json"),
        }
    }

    #[test]
    fn diagnosis_normalisation() {
        assert_eq!(normalize_diagnosis("EMCI").unwrap(), Some(MCI));
        assert_eq!(normalize_diagnosis("LMCI").unwrap(), Some(MCI));
        assert_eq!(normalize_diagnosis("SMC").unwrap(), None);
        assert_eq!(normalize_diagnosis("CN").unwrap(), Some(CN));
        let err = normalize_diagnosis("FTD").unwrap_err();
        assert!(err.to_string().contains("FTD"));
    }

    #[test]
    fn visit953_examples() {
        assert_eq!(label_visit953(&[CN, MCI, AD]).unwrap(), Visit953::Ad { scan: 2 });
        assert_eq!(label_visit953(&[CN, MCI]).unwrap(), Visit953::NonAd { scan: 0 });
        assert_eq!(label_visit953(&[MCI, MCI]).unwrap(), Visit953::Excluded);
        assert_eq!(label_visit953(&[AD, AD, MCI]).unwrap(), Visit953::Ad { scan: 1 });
        assert!(label_visit953(&[]).is_err());
    }

    #[test]
    fn last_examples() {
        assert_eq!(label_last(&[CN, MCI]).unwrap(), MCI);
        assert_eq!(label_last(&[AD]).unwrap(), AD);
        let merged: Vec<Diagnosis> =
            ["CN", "EMCI", "LMCI"].iter().filter_map(|r| normalize_diagnosis(r).unwrap()).collect();
        assert_eq!(label_last(&merged).unwrap(), MCI);
        assert!(label_last(&[]).is_err());
    }

    #[test]
    fn labeling_groups_sorts_and_drops_smc() {
        let recs = vec![
            visit("s1", "b", "2008-01-01", RawDiagnosis::AD),
            visit("s1", "a", "2006-01-01", RawDiagnosis::CN),
            visit("s2", "c", "2007-01-01", RawDiagnosis::SMC),
            visit("s3", "d", "2007-01-01", RawDiagnosis::SMC),
            visit("s3", "e", "2009-01-01", RawDiagnosis::CN),
        ];
        let v = apply_labeling(&recs, Labeling::Visit953).unwrap();
        let picked: Vec<(&str, usize)> = v.scans.iter().map(|s| (s.scan_id.as_str(), s.label)).collect();
        assert_eq!(picked, vec![("b", 1), ("e", 0)]);
        assert_eq!(v.audit.len(), 3);
        assert_eq!(v.audit[1].decision, "skipped");
        let l = apply_labeling(&recs, Labeling::Last).unwrap();
        assert_eq!(l.scans.iter().filter(|s| s.subject_id == "s1").map(|s| s.label).collect::<Vec<_>>(), vec![2, 2]);
    }

    #[test]
    fn audit_flags_ad_reversion() {
        let recs = vec![visit("s", "a", "2006-01-01", RawDiagnosis::AD), visit("s", "b", "2007-01-01", RawDiagnosis::MCI)];
        let out = apply_labeling(&recs, Labeling::Visit953).unwrap();
        assert_eq!(out.scans[0].scan_id, "a");
        assert!(out.audit[0].note.is_some());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let recs = vec![visit("s1", "a", "2006-03-04", RawDiagnosis::EMCI), visit("s2", "b", "2010-12-31", RawDiagnosis::AD)];
        write_manifest(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("subject_id,scan_id,acquisition_date,diagnosis,volume_path\n"));
        assert_eq!(read_manifest(&p).unwrap(), recs);
    }

    fn scans(specs: &[(&str, &str, &str)]) -> Vec<LabeledScan> {
        specs
            .iter()
            .map(|(s, id, d)| LabeledScan {
                subject_id: s.to_string(),
                scan_id: id.to_string(),
                acquisition_date: d.parse().unwrap(),
                label: 0,
                volume_path: String::new(),
            })
            .collect()
    }

    #[test]
    fn selection_strategies() {
        let inv = scans(&[("s1", "x", "2008-01-01"), ("s1", "y", "2006-01-01"), ("s2", "z", "2007-01-01")]);
        let test = select_samples(&inv, Selection::First, SplitRole::Test);
        assert_eq!(test.iter().map(|s| s.scan_id.as_str()).collect::<Vec<_>>(), vec!["y", "z"]);
        assert_eq!(select_samples(&inv, Selection::First, SplitRole::Train), inv);
        assert_eq!(select_samples(&inv, Selection::FirstWTrain, SplitRole::Train).len(), 2);
        assert_eq!(select_samples(&inv, Selection::All, SplitRole::Test), inv);
    }

    #[test]
    fn kfold_one_per_class_per_fold() {
        let subjects: Vec<(String, usize)> = (0..20).map(|i| (format!("s{i:02}"), i % 2)).collect();
        let plan = stratified_subject_kfold(&subjects, 10, 3).unwrap();
        let label: BTreeMap<&str, usize> = subjects.iter().map(|(s, l)| (s.as_str(), *l)).collect();
        for f in &plan.folds {
            let mut ls: Vec<usize> = f.iter().map(|s| label[s.as_str()]).collect();
            ls.sort();
            assert_eq!(ls, vec![0, 1]);
        }
        assert_eq!(plan, stratified_subject_kfold(&subjects, 10, 3).unwrap());
        let mut all: Vec<&String> = plan.folds.iter().flatten().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn kfold_rejects_small_class() {
        let subjects: Vec<(String, usize)> = (0..15).map(|i| (format!("s{i}"), usize::from(i >= 12))).collect();
        assert!(stratified_subject_kfold(&subjects, 5, 0).is_err());
    }

    #[test]
    fn fold_roles() {
        let plan = SplitPlan { folds: vec![vec!["a".into()], vec!["b".into()], vec!["c".into()]] };
        let inv = scans(&[("a", "1", "2006-01-01"), ("b", "2", "2006-01-01"), ("c", "3", "2006-01-01")]);
        let s = plan.split(&inv, 2, Selection::All).unwrap();
        assert_eq!((s.test[0].subject_id.as_str(), s.val[0].subject_id.as_str(), s.train[0].subject_id.as_str()), ("c", "a", "b"));
    }

    #[test]
    fn weights() {
        let w = class_weights(&[467, 486]).unwrap();
        assert!((w[0] - 953.0 / 934.0).abs() < 1e-12);
        assert!((w[1] - 953.0 / 972.0).abs() < 1e-12);
        assert!((w[1] - 0.9805).abs() < 1e-4 && (w[0] - 1.0203).abs() < 1e-4);
        assert_eq!(class_weights(&[5, 5, 5]).unwrap(), vec![1.0; 3]);
        assert_eq!(class_weights(&[3, 7]).unwrap(), class_weights(&[6, 14]).unwrap());
        assert!(class_weights(&[3, 0]).is_err());
    }

    #[test]
    fn class_indices() {
        assert_eq!(class_index(AD, 2).unwrap(), 1);
        assert_eq!(class_index(CN, 3).unwrap(), 0);
        assert!(matches!(class_index(MCI, 2), Err(Error::LabelSpace(_))));
    }
}
