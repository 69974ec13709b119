use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann–Whitney AUC via average ranks; tied scores count one half.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Invalid(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("score {i} is NaN")));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives keeps every tie-averaged rank integral.
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank2_sum += rank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Macro one-vs-rest AUC over the classes present in `labels`.
pub fn roc_auc_multiclass(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_rows(probs, labels, num_classes)?;
    let mut aucs = Vec::new();
    for c in 0..num_classes {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if !pos.contains(&true) {
            log::warn!("class {c} absent; skipped in one-vs-rest AUC");
            continue;
        }
        if !pos.contains(&false) {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        aucs.push(roc_auc_binary(&scores, &pos)?);
    }
    if aucs.is_empty() {
        return Err(Error::UndefinedMetric("one-vs-rest AUC needs at least two classes present".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

fn check_rows(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Invalid(format!("{} score rows for {} labels", probs.len(), labels.len())));
    }
    if let Some(r) = probs.iter().position(|r| r.len() != num_classes) {
        return Err(Error::Invalid(format!("score row {r} does not have {num_classes} entries")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Invalid(format!("label {l} outside 0..{num_classes}")));
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DecisionRule {
    Argmax,
    /// Positive iff its probability is at least the threshold.
    Threshold(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn predict(probs: &[Vec<f64>], positive: usize, rule: DecisionRule) -> Vec<usize> {
    probs
        .iter()
        .map(|r| match rule {
            DecisionRule::Argmax => argmax(r),
            DecisionRule::Threshold(t) if r[positive] >= t => positive,
            DecisionRule::Threshold(_) => {
                let mut rest = r.clone();
                rest[positive] = f64::NEG_INFINITY;
                argmax(&rest)
            }
        })
        .collect()
}

/// Accuracy over all samples; sensitivity and specificity of `positive`
/// against every other class.
pub fn confusion_from_predictions(pred: &[usize], labels: &[usize], positive: usize) -> Result<Confusion> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::Invalid(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    let (mut tp, mut fn_, mut tn, mut fp, mut correct) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        correct += usize::from(p == l);
        match (l == positive, p == positive) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::UndefinedMetric("sensitivity undefined without positive samples".into()));
    }
    if tn + fp == 0 {
        return Err(Error::UndefinedMetric("specificity undefined without negative samples".into()));
    }
    Ok(Confusion {
        accuracy: correct as f64 / labels.len() as f64,
        sensitivity: tp as f64 / (tp + fn_) as f64,
        specificity: tn as f64 / (tn + fp) as f64,
    })
}

pub fn confusion_metrics(probs: &[Vec<f64>], labels: &[usize], positive: usize, rule: DecisionRule) -> Result<Confusion> {
    let c = probs.first().map_or(0, Vec::len);
    check_rows(probs, labels, c)?;
    confusion_from_predictions(&predict(probs, positive, rule), labels, positive)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// AUC (binary on the AD column, or macro one-vs-rest) plus argmax confusion
/// metrics with AD, the last class, as positive.
pub fn evaluate(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    check_rows(probs, labels, num_classes)?;
    let positive = num_classes - 1;
    let auc = if num_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|r| r[positive]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == positive).collect();
        roc_auc_binary(&scores, &pos)?
    } else {
        roc_auc_multiclass(probs, labels, num_classes)?
    };
    let c = confusion_metrics(probs, labels, positive, DecisionRule::Argmax)?;
    Ok(Metrics { auc, accuracy: c.accuracy, sensitivity: c.sensitivity, specificity: c.specificity })
}

/// Mean and population standard deviation, shown as `0.85 (0.05)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({:.2})", self.mean, self.std)
    }
}

pub fn aggregate_folds(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Invalid("cannot aggregate zero values".into()));
    }
    let n = values.len() as f64;
    if values.iter().all(|&v| v == values[0]) {
        return Ok(Summary { mean: values[0], std: 0.0 });
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Summary { mean, std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc_binary(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc_binary(&[0.8, 0.35, 0.4, 0.1], &[true, true, false, false]).unwrap(), 0.75);
        assert_eq!(roc_auc_binary(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!(matches!(roc_auc_binary(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn multiclass_examples() {
        let perfect = vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8], vec![0.7, 0.2, 0.1]];
        assert_eq!(roc_auc_multiclass(&perfect, &[0, 1, 2, 0], 3).unwrap(), 1.0);
        let uniform = vec![vec![1.0 / 3.0; 3]; 4];
        assert_eq!(roc_auc_multiclass(&uniform, &[0, 1, 2, 0], 3).unwrap(), 0.5);
        let missing = vec![vec![0.9, 0.05, 0.05], vec![0.1, 0.1, 0.8]];
        assert_eq!(roc_auc_multiclass(&missing, &[0, 2], 3).unwrap(), 1.0);
        assert!(roc_auc_multiclass(&[vec![0.5, 0.5]], &[0], 2).is_err());
    }

    #[test]
    fn confusion_examples() {
        let c = confusion_from_predictions(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap();
        assert_eq!((c.accuracy, c.sensitivity, c.specificity), (0.5, 0.5, 0.5));
        let p = confusion_from_predictions(&[1, 0, 1], &[1, 0, 1], 1).unwrap();
        assert_eq!((p.accuracy, p.sensitivity, p.specificity), (1.0, 1.0, 1.0));
        let pred = [1, 1, 1, 0, 0];
        let lab = [1, 0, 1, 1, 0];
        let a = confusion_from_predictions(&pred, &lab, 1).unwrap();
        let b = confusion_from_predictions(&pred, &lab, 0).unwrap();
        assert_eq!((a.sensitivity, a.specificity), (b.specificity, b.sensitivity));
        assert!(confusion_from_predictions(&[0, 0], &[0, 0], 1).is_err());
    }

    #[test]
    fn threshold_rule() {
        let probs = vec![vec![0.6, 0.4], vec![0.8, 0.2]];
        assert_eq!(predict(&probs, 1, DecisionRule::Threshold(0.3)), vec![1, 0]);
        assert_eq!(predict(&probs, 1, DecisionRule::Argmax), vec![0, 0]);
    }

    #[test]
    fn aggregation() {
        assert_eq!(aggregate_folds(&[0.8, 0.9]).unwrap().to_string(), "0.85 (0.05)");
        assert_eq!(aggregate_folds(&[0.7]).unwrap().to_string(), "0.70 (0.00)");
        assert_eq!(aggregate_folds(&[0.4; 6]).unwrap().std, 0.0);
        assert!(aggregate_folds(&[]).is_err());
    }
}
