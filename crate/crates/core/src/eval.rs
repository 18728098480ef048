//! Confusion counting, per-type F1, macro averaging, seeded k-fold scoring
//! and the IUPAC-vs-SMILES gap metric.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{LabelRecord, ToxicityType};
use crate::response::NormalizedPrediction;
use crate::util::round_half_up;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("per-type map is missing {0:?}")]
    IncompleteMap(Vec<ToxicityType>),
    #[error("prediction for {compound_id} has no answer for {missing:?}")]
    IncompletePrediction {
        compound_id: String,
        missing: Vec<ToxicityType>,
    },
    #[error("{} predicted compound(s) have no label: {}", .0.len(), .0.join(", "))]
    UnlabeledCompound(Vec<String>),
    #[error("k-fold scoring needs k >= 2, got {0}")]
    InvalidK(usize),
    #[error("{found} compound(s) cannot fill {k} folds")]
    TooFewCompounds { found: usize, k: usize },
    #[error("gap is undefined for a SMILES average of {0}")]
    DivisionByZero(f64),
}

/// Counts with Toxic as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `2tp / (2tp + fp + fn)`, and 0.0 when nothing was predicted or labelled
/// positive.
pub fn f1(c: ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

pub fn macro_average(per_type: &BTreeMap<ToxicityType, f64>) -> Result<f64, EvalError> {
    let missing: Vec<ToxicityType> = ToxicityType::ALL
        .iter()
        .copied()
        .filter(|t| !per_type.contains_key(t))
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::IncompleteMap(missing));
    }
    Ok(ToxicityType::ALL.iter().map(|t| per_type[t]).sum::<f64>() / ToxicityType::ALL.len() as f64)
}

fn label_index(labels: &[LabelRecord]) -> HashMap<&str, &LabelRecord> {
    labels.iter().map(|l| (l.compound_id.as_str(), l)).collect()
}

fn check_predictions(preds: &[NormalizedPrediction], index: &HashMap<&str, &LabelRecord>) -> Result<(), EvalError> {
    let unlabeled: Vec<String> = preds
        .iter()
        .filter(|p| !index.contains_key(p.compound_id.as_str()))
        .map(|p| p.compound_id.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(EvalError::UnlabeledCompound(unlabeled));
    }
    for p in preds {
        let missing: Vec<ToxicityType> = ToxicityType::ALL
            .iter()
            .copied()
            .filter(|t| !p.answers.contains_key(t))
            .collect();
        if !missing.is_empty() {
            return Err(EvalError::IncompletePrediction {
                compound_id: p.compound_id.clone(),
                missing,
            });
        }
    }
    Ok(())
}

fn count(preds: &[&NormalizedPrediction], index: &HashMap<&str, &LabelRecord>, t: ToxicityType) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for p in preds {
        let predicted = p.answers[&t].is_toxic();
        let actual = index[p.compound_id.as_str()].get(t).is_toxic();
        match (predicted, actual) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn confusion(
    preds: &[NormalizedPrediction],
    labels: &[LabelRecord],
    t: ToxicityType,
) -> Result<ConfusionCounts, EvalError> {
    let index = label_index(labels);
    check_predictions(preds, &index)?;
    let refs: Vec<&NormalizedPrediction> = preds.iter().collect();
    Ok(count(&refs, &index, t))
}

fn per_type(
    preds: &[&NormalizedPrediction],
    index: &HashMap<&str, &LabelRecord>,
) -> (BTreeMap<ToxicityType, ConfusionCounts>, BTreeMap<ToxicityType, f64>) {
    let counts: BTreeMap<ToxicityType, ConfusionCounts> =
        ToxicityType::ALL.iter().map(|&t| (t, count(preds, index, t))).collect();
    let scores = counts.iter().map(|(t, c)| (*t, f1(*c))).collect();
    (counts, scores)
}

/// Pooled per-type F1 over all predictions.
pub fn per_type_f1(
    preds: &[NormalizedPrediction],
    labels: &[LabelRecord],
) -> Result<BTreeMap<ToxicityType, f64>, EvalError> {
    let index = label_index(labels);
    check_predictions(preds, &index)?;
    let refs: Vec<&NormalizedPrediction> = preds.iter().collect();
    Ok(per_type(&refs, &index).1)
}

fn fold_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Sorts ids by a seeded digest and deals them round-robin into `k` folds,
/// so fold sizes differ by at most one and input order does not matter.
pub fn assign_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    if ids.len() < k {
        return Err(EvalError::TooFewCompounds { found: ids.len(), k });
    }
    let mut keyed: Vec<([u8; 32], &String)> = ids.iter().map(|id| (fold_key(seed, id), id)).collect();
    keyed.sort();
    let mut folds = vec![Vec::new(); k];
    for (i, (_, id)) in keyed.into_iter().enumerate() {
        folds[i % k].push(id.clone());
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub per_type_mean: BTreeMap<ToxicityType, f64>,
    pub per_fold: BTreeMap<usize, BTreeMap<ToxicityType, f64>>,
}

pub fn kfold_f1(
    preds: &[NormalizedPrediction],
    labels: &[LabelRecord],
    k: usize,
    seed: u64,
) -> Result<FoldScores, EvalError> {
    let index = label_index(labels);
    check_predictions(preds, &index)?;
    let ids: Vec<String> = preds.iter().map(|p| p.compound_id.clone()).collect();
    let folds = assign_folds(&ids, k, seed)?;
    let by_id: HashMap<&str, &NormalizedPrediction> = preds.iter().map(|p| (p.compound_id.as_str(), p)).collect();

    let mut per_fold = BTreeMap::new();
    for (i, fold) in folds.iter().enumerate() {
        let members: Vec<&NormalizedPrediction> = fold.iter().map(|id| by_id[id.as_str()]).collect();
        per_fold.insert(i, per_type(&members, &index).1);
    }
    let per_type_mean = ToxicityType::ALL
        .iter()
        .map(|&t| {
            let sum: f64 = per_fold.values().map(|m: &BTreeMap<ToxicityType, f64>| m[&t]).sum();
            (t, sum / k as f64)
        })
        .collect();
    Ok(FoldScores { per_type_mean, per_fold })
}

/// Relative gain of the IUPAC average over the SMILES average in percent,
/// rounded to two decimals.
pub fn gap_percent(avg_iupac: f64, avg_smiles: f64) -> Result<f64, EvalError> {
    if avg_smiles <= 0.0 || !avg_smiles.is_finite() {
        return Err(EvalError::DivisionByZero(avg_smiles));
    }
    Ok(round_half_up(100.0 * (avg_iupac - avg_smiles) / avg_smiles, 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_type_f1: BTreeMap<ToxicityType, f64>,
    pub macro_f1: f64,
    pub n_compounds: usize,
    pub n_parse_failures: usize,
    /// Pooled counts over every scored compound.
    pub confusion: BTreeMap<ToxicityType, ConfusionCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_fold_f1: Option<BTreeMap<usize, BTreeMap<ToxicityType, f64>>>,
}

/// Scores a prediction set. `k <= 1` reports pooled F1; otherwise the
/// per-type score is the mean over `k` seeded folds.
pub fn evaluate(
    preds: &[NormalizedPrediction],
    labels: &[LabelRecord],
    n_parse_failures: usize,
    k: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let index = label_index(labels);
    check_predictions(preds, &index)?;
    let refs: Vec<&NormalizedPrediction> = preds.iter().collect();
    let (confusion, pooled) = per_type(&refs, &index);
    let (per_type_f1, per_fold_f1) = if k <= 1 {
        (pooled, None)
    } else {
        let folds = kfold_f1(preds, labels, k, seed)?;
        (folds.per_type_mean, Some(folds.per_fold))
    };
    let macro_f1 = macro_average(&per_type_f1)?;
    Ok(EvalReport {
        per_type_f1,
        macro_f1,
        n_compounds: preds.len(),
        n_parse_failures,
        confusion,
        per_fold_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BinaryVerdict;

    fn all(v: BinaryVerdict) -> BTreeMap<ToxicityType, BinaryVerdict> {
        ToxicityType::ALL.iter().map(|&t| (t, v)).collect()
    }

    fn pred(id: &str, v: BinaryVerdict) -> NormalizedPrediction {
        NormalizedPrediction {
            compound_id: id.into(),
            answers: all(v),
            warnings: vec![],
        }
    }

    fn label(id: &str, v: BinaryVerdict) -> LabelRecord {
        LabelRecord::new(id, all(v)).unwrap()
    }

    #[test]
    fn f1_definition() {
        let c = ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 };
        assert!((f1(c) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(f1(ConfusionCounts::default()), 0.0);
        assert_eq!(f1(ConfusionCounts { tp: 7, fp: 0, fn_: 0, tn: 3 }), 1.0);
    }

    #[test]
    fn confusion_cases() {
        let preds: Vec<_> = (0..5).map(|i| pred(&format!("c{i}"), BinaryVerdict::Toxic)).collect();
        let labels: Vec<_> = (0..5).map(|i| label(&format!("c{i}"), BinaryVerdict::Toxic)).collect();
        let c = confusion(&preds, &labels, ToxicityType::Liver).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 0 });

        let c = confusion(
            &[pred("x", BinaryVerdict::Toxic)],
            &[label("x", BinaryVerdict::NonToxic)],
            ToxicityType::Renal,
        )
        .unwrap();
        assert_eq!(c.fp, 1);
        assert_eq!(c.total(), 1);

        let err = confusion(&[pred("ghost", BinaryVerdict::Toxic)], &labels, ToxicityType::Renal).unwrap_err();
        assert_eq!(err, EvalError::UnlabeledCompound(vec!["ghost".into()]));
    }

    #[test]
    fn macro_average_rows() {
        let row = |v: [f64; 6]| -> BTreeMap<ToxicityType, f64> { ToxicityType::ALL.iter().copied().zip(v).collect() };
        let m = macro_average(&row([0.673, 0.779, 0.479, 0.648, 0.452, 0.427])).unwrap();
        assert!((m - 0.576).abs() <= 0.0005);
        let m = macro_average(&row([0.711, 0.817, 0.582, 0.768, 0.541, 0.557])).unwrap();
        assert!((m - 0.663).abs() <= 0.0005);
        assert_eq!(macro_average(&row([0.0; 6])).unwrap(), 0.0);
        let mut partial = row([0.5; 6]);
        partial.remove(&ToxicityType::Pulmonary);
        assert_eq!(
            macro_average(&partial),
            Err(EvalError::IncompleteMap(vec![ToxicityType::Pulmonary]))
        );
    }

    #[test]
    fn gap_cases() {
        assert_eq!(gap_percent(0.650, 0.562).unwrap(), 15.66);
        assert_eq!(gap_percent(0.559, 0.486).unwrap(), 15.02);
        assert_eq!(gap_percent(0.4, 0.4).unwrap(), 0.0);
        assert!(gap_percent(0.4, 0.0).is_err());
        assert!(gap_percent(0.3, 0.4).unwrap() < 0.0);
    }

    #[test]
    fn folds_partition_evenly() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let folds = assign_folds(&ids, 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let mut flat: Vec<String> = folds.concat();
        flat.sort();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(flat, sorted);
        let mut reversed = ids.clone();
        reversed.reverse();
        assert_eq!(assign_folds(&reversed, 5, 3).unwrap(), folds);
        assert_eq!(assign_folds(&ids[..3], 5, 3), Err(EvalError::TooFewCompounds { found: 3, k: 5 }));
        assert_eq!(assign_folds(&ids, 1, 3), Err(EvalError::InvalidK(1)));
    }

    #[test]
    fn constant_predictions_fold_mean_equals_pooled() {
        let preds: Vec<_> = (0..10).map(|i| pred(&format!("c{i}"), BinaryVerdict::Toxic)).collect();
        let labels: Vec<_> = (0..10)
            .map(|i| {
                let v = if i % 2 == 0 { BinaryVerdict::Toxic } else { BinaryVerdict::NonToxic };
                label(&format!("c{i}"), v)
            })
            .collect();
        let pooled = per_type_f1(&preds, &labels).unwrap();
        let perfect: Vec<_> = labels
            .iter()
            .map(|l| NormalizedPrediction {
                compound_id: l.compound_id.clone(),
                answers: l.labels.clone(),
                warnings: vec![],
            })
            .collect();
        let folds = kfold_f1(&perfect, &labels, 2, 0).unwrap();
        for t in ToxicityType::ALL {
            assert_eq!(folds.per_type_mean[&t], 1.0);
        }
        assert!((pooled[&ToxicityType::Cardio] - 2.0 / 3.0).abs() < 1e-12);
        let a = kfold_f1(&preds, &labels, 5, 11).unwrap();
        let b = kfold_f1(&preds, &labels, 5, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_pooled_and_folded() {
        let preds: Vec<_> = (0..6).map(|i| pred(&format!("c{i}"), BinaryVerdict::Toxic)).collect();
        let labels: Vec<_> = (0..6).map(|i| label(&format!("c{i}"), BinaryVerdict::Toxic)).collect();
        let r = evaluate(&preds, &labels, 2, 1, 0).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.n_parse_failures, 2);
        assert!(r.per_fold_f1.is_none());
        let r = evaluate(&preds, &labels, 0, 3, 0).unwrap();
        assert_eq!(r.per_fold_f1.unwrap().len(), 3);
    }
}
