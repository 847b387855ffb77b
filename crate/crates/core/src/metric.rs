//! Transect-averaged F1.
//!
//! Each quadrat gets a set-based F1 between predicted and true species. The
//! quadrat scores are averaged within each transect, and the final score is
//! the unweighted mean of the transect averages.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

pub type SpeciesLabel = u64;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("quadrat {0} has more than one prediction")]
    DuplicatePrediction(String),
    #[error("quadrat {0} appears twice in the ground truth")]
    DuplicateTruth(String),
    #[error("quadrat {0} has an empty ground-truth species set")]
    EmptyTruth(String),
    #[error("ground truth is empty")]
    EmptyGroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthEntry {
    pub transect_id: String,
    pub species: BTreeSet<SpeciesLabel>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruthTable {
    quadrats: BTreeMap<String, TruthEntry>,
}

impl GroundTruthTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        quadrat_id: impl Into<String>,
        transect_id: impl Into<String>,
        species: BTreeSet<SpeciesLabel>,
    ) -> Result<(), MetricError> {
        let q = quadrat_id.into();
        if species.is_empty() {
            return Err(MetricError::EmptyTruth(q));
        }
        if self.quadrats.contains_key(&q) {
            return Err(MetricError::DuplicateTruth(q));
        }
        self.quadrats.insert(
            q,
            TruthEntry {
                transect_id: transect_id.into(),
                species,
            },
        );
        Ok(())
    }

    pub fn get(&self, quadrat_id: &str) -> Option<&TruthEntry> {
        self.quadrats.get(quadrat_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TruthEntry)> {
        self.quadrats.iter()
    }

    pub fn len(&self) -> usize {
        self.quadrats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quadrats.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    #[serde(rename = "final")]
    pub final_score: f64,
    pub per_transect: BTreeMap<String, f64>,
    pub per_quadrat: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

pub fn quadrat_f1(pred: &BTreeSet<SpeciesLabel>, truth: &BTreeSet<SpeciesLabel>) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return 0.0;
    }
    let hits = pred.intersection(truth).count();
    2.0 * hits as f64 / (pred.len() + truth.len()) as f64
}

/// Score predictions against the ground truth.
///
/// Ground-truth quadrats without a prediction score 0 and are reported as
/// warnings. Predictions for unknown quadrats are ignored with a warning.
pub fn score<'a, I>(preds: I, gt: &GroundTruthTable) -> Result<ScoreReport, MetricError>
where
    I: IntoIterator<Item = (&'a str, &'a BTreeSet<SpeciesLabel>)>,
{
    if gt.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let mut by_quadrat: BTreeMap<&str, &BTreeSet<SpeciesLabel>> = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    for (q, species) in preds {
        if by_quadrat.insert(q, species).is_some() {
            return Err(MetricError::DuplicatePrediction(q.to_string()));
        }
        if gt.get(q).is_none() {
            unknown.insert(q);
        }
    }

    let mut warnings = Vec::new();
    let empty = BTreeSet::new();
    let mut per_quadrat = BTreeMap::new();
    let mut transects: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (q, truth) in gt.iter() {
        let pred = by_quadrat.get(q.as_str()).copied().unwrap_or_else(|| {
            warnings.push(format!(
                "missing prediction for quadrat {q}; scored as empty"
            ));
            &empty
        });
        let f1 = quadrat_f1(pred, &truth.species);
        per_quadrat.insert(q.clone(), f1);
        transects
            .entry(truth.transect_id.as_str())
            .or_default()
            .push(f1);
    }
    for q in unknown {
        warnings.push(format!("prediction for unknown quadrat {q} ignored"));
    }

    // Quadrats are visited in id order, so every sum below has a fixed order.
    let per_transect: BTreeMap<String, f64> = transects
        .into_iter()
        .map(|(t, f1s)| (t.to_string(), f1s.iter().sum::<f64>() / f1s.len() as f64))
        .collect();
    let final_score = per_transect.values().sum::<f64>() / per_transect.len() as f64;
    Ok(ScoreReport {
        final_score,
        per_transect,
        per_quadrat,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[u64]) -> BTreeSet<u64> {
        v.iter().copied().collect()
    }

    #[test]
    fn f1_examples() {
        assert_eq!(quadrat_f1(&set(&[1, 2, 3]), &set(&[1, 2, 3])), 1.0);
        assert_eq!(quadrat_f1(&set(&[1, 2]), &set(&[3, 4])), 0.0);
        assert_eq!(
            quadrat_f1(&set(&[1, 2]), &set(&[2, 3])),
            2.0 * 1.0 / (2.0 + 2.0)
        );
        assert_eq!(quadrat_f1(&set(&[]), &set(&[2, 3])), 0.0);
    }

    #[test]
    fn single_transect_average() {
        let mut gt = GroundTruthTable::new();
        gt.insert("q1", "t", set(&[2, 3])).unwrap();
        gt.insert("q2", "t", set(&[5])).unwrap();
        let (p1, p2) = (set(&[1, 2]), set(&[5]));
        let r = score([("q1", &p1), ("q2", &p2)], &gt).unwrap();
        assert_eq!(r.per_transect["t"], 0.75);
        assert_eq!(r.final_score, 0.75);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn transects_are_weighted_equally() {
        let mut gt = GroundTruthTable::new();
        gt.insert("a1", "A", set(&[1])).unwrap();
        for i in 0..4 {
            gt.insert(format!("b{i}"), "B", set(&[1])).unwrap();
        }
        let hit = set(&[1]);
        let miss = set(&[9]);
        let mut preds = vec![("a1", &hit)];
        let ids: Vec<String> = (0..4).map(|i| format!("b{i}")).collect();
        preds.extend(ids.iter().map(|q| (q.as_str(), &miss)));
        let r = score(preds, &gt).unwrap();
        assert_eq!(r.final_score, 0.5);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let mut gt = GroundTruthTable::new();
        gt.insert("q1", "t1", set(&[1, 2])).unwrap();
        gt.insert("q2", "t2", set(&[3])).unwrap();
        let r = score(
            gt.iter()
                .map(|(q, e)| (q.as_str(), &e.species))
                .collect::<Vec<_>>(),
            &gt,
        )
        .unwrap();
        assert_eq!(r.final_score, 1.0);
    }

    #[test]
    fn missing_unknown_and_duplicate_predictions() {
        let mut gt = GroundTruthTable::new();
        gt.insert("q1", "t", set(&[1])).unwrap();
        gt.insert("q2", "t", set(&[2])).unwrap();
        let p = set(&[1]);
        let r = score([("q1", &p), ("zz", &p)], &gt).unwrap();
        assert_eq!(r.per_quadrat["q2"], 0.0);
        assert_eq!(r.final_score, 0.5);
        assert_eq!(r.warnings.len(), 2);
        assert_eq!(
            score([("q1", &p), ("q1", &p)], &gt),
            Err(MetricError::DuplicatePrediction("q1".into()))
        );
    }

    #[test]
    fn ground_truth_invariants() {
        let mut gt = GroundTruthTable::new();
        assert_eq!(
            gt.insert("q", "t", set(&[])),
            Err(MetricError::EmptyTruth("q".into()))
        );
        gt.insert("q", "t", set(&[1])).unwrap();
        assert_eq!(
            gt.insert("q", "u", set(&[1])),
            Err(MetricError::DuplicateTruth("q".into()))
        );
        assert_eq!(
            score(Vec::new(), &GroundTruthTable::new()),
            Err(MetricError::EmptyGroundTruth)
        );
    }

    proptest! {
        #[test]
        fn adding_a_quadrat_at_the_transect_mean_keeps_it(truths in proptest::collection::vec(1u64..6, 2..6)) {
            // Quadrat i has truth {0..truths[i]} and predicts {0}; F1 = 2/(1+n).
            let mut gt = GroundTruthTable::new();
            let sets: Vec<BTreeSet<u64>> = truths.iter().map(|&n| (0..n).collect()).collect();
            let pred = set(&[0]);
            for (i, s) in sets.iter().enumerate() {
                gt.insert(format!("q{i}"), "t", s.clone()).unwrap();
            }
            let ids: Vec<String> = (0..sets.len()).map(|i| format!("q{i}")).collect();
            let before = score(ids.iter().map(|q| (q.as_str(), &pred)), &gt).unwrap();
            // duplicate every quadrat: the mean is unchanged
            let mut gt2 = gt.clone();
            for (i, s) in sets.iter().enumerate() {
                gt2.insert(format!("r{i}"), "t", s.clone()).unwrap();
            }
            let ids2: Vec<String> = ids.iter().cloned().chain((0..sets.len()).map(|i| format!("r{i}"))).collect();
            let after = score(ids2.iter().map(|q| (q.as_str(), &pred)), &gt2).unwrap();
            prop_assert!((before.per_transect["t"] - after.per_transect["t"]).abs() < 1e-12);
        }
    }
}
