//! From per-tile top-1 candidates to final per-quadrat species sets.
//!
//! Each tile contributes at most one species (its argmax). A quadrat's
//! candidate score for a species is the best score any tile gave it.
//! Candidates are then cut by a threshold, either fixed or calibrated by
//! bisection so the mean prediction length over the corpus hits a target,
//! and clamped to `[min_len, max_len]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::fusion::{tile_top1, Channel, TileScores};

/// Default number of bisection halvings.
pub const DEFAULT_BISECT_ITERS: u32 = 64;

// Mean lengths are ratios of integers; this absorbs rounding in targets such
// as 4/3 without merging distinct step levels.
const MEAN_LEN_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("no tiles to collect candidates from")]
    EmptyInput,
    #[error("calibration corpus is empty")]
    EmptyCorpus,
    #[error("non-finite candidate score in quadrat {0}")]
    NonFinite(String),
    #[error("target mean length {target} is unattainable: keeping every candidate gives {max_achievable}")]
    Unattainable { target: f64, max_achievable: f64 },
    #[error("target mean length {target} is below min_len {min_len}")]
    TargetBelowMinLen { target: f64, min_len: usize },
    #[error("quadrat {0} has no group")]
    MissingGroup(String),
    #[error("invalid selection config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub channel: Channel,
    /// Static threshold; candidates must score strictly above it.
    pub min_logit: Option<f64>,
    /// Calibrate the threshold so the corpus-wide mean length reaches this.
    pub target_mean_len: Option<f64>,
    /// `None` means unbounded.
    pub max_len: Option<usize>,
    pub min_len: usize,
    pub zscore: bool,
    /// Metadata merging: a species predicted in more than `k` quadrats of a
    /// group is added to the whole group.
    pub merge_k: Option<usize>,
    pub bisect_iters: u32,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            channel: Channel::Fused,
            min_logit: None,
            target_mean_len: None,
            max_len: None,
            min_len: 1,
            zscore: false,
            merge_k: None,
            bisect_iters: DEFAULT_BISECT_ITERS,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectionError> {
        let bad = |m: String| Err(SelectionError::Config(m));
        if self.min_logit.is_some() && self.target_mean_len.is_some() {
            return bad("min_logit and target_mean_len are mutually exclusive".into());
        }
        if self.min_len == 0 {
            return bad("min_len must be at least 1".into());
        }
        if let Some(max) = self.max_len {
            if max < self.min_len {
                return bad(format!("max_len {max} is below min_len {}", self.min_len));
            }
        }
        if let Some(t) = self.target_mean_len {
            if !t.is_finite() || t <= 0.0 {
                return bad(format!(
                    "target_mean_len must be a positive number, got {t}"
                ));
            }
            if t < self.min_len as f64 {
                return Err(SelectionError::TargetBelowMinLen {
                    target: t,
                    min_len: self.min_len,
                });
            }
        }
        if let Some(m) = self.min_logit {
            if m.is_nan() {
                return bad("min_logit is NaN".into());
            }
        }
        if self.merge_k == Some(0) {
            return bad("merge_k must be at least 1".into());
        }
        if self.bisect_iters == 0 {
            return bad("bisect_iters must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub quadrat_id: String,
    pub entries: BTreeMap<usize, f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries by descending score, ties to the lower species id.
    pub fn ranked(&self) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self.entries.iter().map(|(&s, &x)| (s, x)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub quadrat_id: String,
    pub species: BTreeSet<usize>,
}

/// Max-merge the top-1 of every tile.
pub fn collect_candidates(
    quadrat_id: &str,
    tiles: &[TileScores],
) -> Result<CandidateSet, SelectionError> {
    if tiles.is_empty() {
        return Err(SelectionError::EmptyInput);
    }
    let mut entries: BTreeMap<usize, f64> = BTreeMap::new();
    for (species, score) in tiles.iter().filter_map(tile_top1) {
        entries
            .entry(species)
            .and_modify(|x| *x = x.max(score))
            .or_insert(score);
    }
    if entries.is_empty() {
        return Err(SelectionError::EmptyInput);
    }
    Ok(CandidateSet {
        quadrat_id: quadrat_id.to_string(),
        entries,
    })
}

/// Replace scores with `(x - mean) / std` using the population std of the
/// quadrat's own entries.
pub fn zscore_normalize(c: &CandidateSet) -> CandidateSet {
    if c.entries.len() < 2 {
        return c.clone();
    }
    let xs: Vec<f64> = c.entries.values().copied().collect();
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
            (l.min(x), h.max(x))
        });
    let entries = if lo == hi {
        c.entries.keys().map(|&s| (s, 0.0)).collect()
    } else {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        c.entries
            .iter()
            .map(|(&s, &x)| (s, (x - mean) / std))
            .collect()
    };
    CandidateSet {
        quadrat_id: c.quadrat_id.clone(),
        entries,
    }
}

/// Size of the prediction for a quadrat whose ranked scores are `ranked`.
fn selected_len(ranked: &[f64], tau: f64, cfg: &SelectionConfig) -> usize {
    // `ranked` is descending, so the entries above tau form a prefix.
    let above = ranked.partition_point(|&x| x > tau);
    let capped = cfg.max_len.map_or(above, |m| above.min(m));
    capped.max(cfg.min_len).min(ranked.len())
}

pub fn apply_threshold(c: &CandidateSet, tau: f64, cfg: &SelectionConfig) -> PredictionSet {
    let ranked = c.ranked();
    let scores: Vec<f64> = ranked.iter().map(|r| r.1).collect();
    let n = selected_len(&scores, tau, cfg);
    PredictionSet {
        quadrat_id: c.quadrat_id.clone(),
        species: ranked[..n].iter().map(|r| r.0).collect(),
    }
}

/// Descending score lists, one per quadrat, for fast length evaluation.
struct RankedCorpus(Vec<Vec<f64>>);

impl RankedCorpus {
    fn new(corpus: &[CandidateSet]) -> Result<Self, SelectionError> {
        let mut out = Vec::with_capacity(corpus.len());
        for c in corpus {
            if c.entries.values().any(|x| !x.is_finite()) {
                return Err(SelectionError::NonFinite(c.quadrat_id.clone()));
            }
            out.push(c.ranked().into_iter().map(|r| r.1).collect());
        }
        Ok(Self(out))
    }

    fn mean_len(&self, tau: f64, cfg: &SelectionConfig) -> f64 {
        let total: usize = self.0.iter().map(|r| selected_len(r, tau, cfg)).sum();
        total as f64 / self.0.len() as f64
    }
}

/// Mean prediction length over the corpus at threshold `tau`.
pub fn mean_len(corpus: &[CandidateSet], tau: f64, cfg: &SelectionConfig) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let total: usize = corpus
        .iter()
        .map(|c| {
            let r: Vec<f64> = c.ranked().into_iter().map(|r| r.1).collect();
            selected_len(&r, tau, cfg)
        })
        .sum();
    total as f64 / corpus.len() as f64
}

/// Find the largest threshold whose mean prediction length still reaches
/// `target`.
///
/// `mean_len` is a non-increasing step function of the threshold, so the
/// search keeps `lo` on the side that reaches the target and `hi` on the
/// side that falls short, and returns `lo`.
pub fn bisect_threshold(
    corpus: &[CandidateSet],
    target: f64,
    iters: u32,
    cfg: &SelectionConfig,
) -> Result<f64, SelectionError> {
    if corpus.is_empty() {
        return Err(SelectionError::EmptyCorpus);
    }
    if target.is_nan() || target < cfg.min_len as f64 {
        return Err(SelectionError::TargetBelowMinLen {
            target,
            min_len: cfg.min_len,
        });
    }
    let ranked = RankedCorpus::new(corpus)?;
    let all = ranked.0.iter().flatten().copied();
    let (min, max) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
        (l.min(x), h.max(x))
    });
    let reaches = |tau: f64| ranked.mean_len(tau, cfg) >= target - MEAN_LEN_EPS;

    let mut lo = min - 1.0;
    let mut hi = max;
    if !reaches(lo) {
        return Err(SelectionError::Unattainable {
            target,
            max_achievable: ranked.mean_len(lo, cfg),
        });
    }
    if reaches(hi) {
        return Ok(hi);
    }
    for _ in 0..iters {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        if reaches(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Spread frequently predicted species across their group.
pub fn metadata_merge(
    preds: &[PredictionSet],
    groups: &HashMap<String, String>,
    k: usize,
) -> Result<Vec<PredictionSet>, SelectionError> {
    let mut counts: HashMap<&str, BTreeMap<usize, usize>> = HashMap::new();
    for p in preds {
        let g = groups
            .get(&p.quadrat_id)
            .ok_or_else(|| SelectionError::MissingGroup(p.quadrat_id.clone()))?;
        let c = counts.entry(g.as_str()).or_default();
        for &s in &p.species {
            *c.entry(s).or_default() += 1;
        }
    }
    Ok(preds
        .iter()
        .map(|p| {
            let mut species = p.species.clone();
            let c = &counts[groups[&p.quadrat_id].as_str()];
            species.extend(c.iter().filter(|(_, &n)| n > k).map(|(&s, _)| s));
            PredictionSet {
                quadrat_id: p.quadrat_id.clone(),
                species,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TileKey;
    use proptest::prelude::*;

    fn cands(id: &str, entries: &[(usize, f64)]) -> CandidateSet {
        CandidateSet {
            quadrat_id: id.into(),
            entries: entries.iter().copied().collect(),
        }
    }

    fn pred(id: &str, species: &[usize]) -> PredictionSet {
        PredictionSet {
            quadrat_id: id.into(),
            species: species.iter().copied().collect(),
        }
    }

    fn one_hot(n: usize, s: usize, score: f64) -> TileScores {
        let mut v = vec![-100.0; n];
        v[s] = score;
        TileScores {
            tile: TileKey::new(1, 0, 0),
            score: v,
        }
    }

    /// The three-quadrat corpus A:{.9,.5,.1} B:{.8,.4} C:{.7}.
    fn abc() -> Vec<CandidateSet> {
        vec![
            cands("A", &[(0, 0.9), (1, 0.5), (2, 0.1)]),
            cands("B", &[(3, 0.8), (4, 0.4)]),
            cands("C", &[(5, 0.7)]),
        ]
    }

    /// Mean length at every distinct threshold level, by direct counting.
    fn sweep(corpus: &[CandidateSet], cfg: &SelectionConfig) -> Vec<(f64, f64)> {
        let mut taus: Vec<f64> = corpus
            .iter()
            .flat_map(|c| c.entries.values().copied())
            .collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        taus.insert(0, f64::NEG_INFINITY);
        taus.iter()
            .map(|&t| {
                let total: usize = corpus
                    .iter()
                    .map(|c| {
                        let above = c.entries.values().filter(|&&x| x > t).count();
                        let capped = cfg.max_len.map_or(above, |m| above.min(m));
                        capped.max(cfg.min_len).min(c.entries.len())
                    })
                    .sum();
                (t, total as f64 / corpus.len() as f64)
            })
            .collect()
    }

    #[test]
    fn candidates_keep_best_score_per_species() {
        let tiles = [one_hot(5, 1, 2.0), one_hot(5, 1, 3.0), one_hot(5, 4, 1.0)];
        let c = collect_candidates("q", &tiles).unwrap();
        assert_eq!(c.entries, [(1, 3.0), (4, 1.0)].into_iter().collect());
        assert_eq!(collect_candidates("q", &tiles[..1]).unwrap().len(), 1);
        assert_eq!(
            collect_candidates("q", &[]),
            Err(SelectionError::EmptyInput)
        );
    }

    #[test]
    fn candidate_count_is_bounded_by_tile_count() {
        let tiles: Vec<TileScores> = (0..41)
            .map(|i| one_hot(100, (i * 7) % 100, i as f64))
            .collect();
        assert!(collect_candidates("q", &tiles).unwrap().len() <= 41);
    }

    #[test]
    fn zscore_examples() {
        let z = zscore_normalize(&cands("q", &[(0, 1.0), (1, 2.0), (2, 3.0)]));
        for (got, want) in z.entries.values().zip([-1.2247, 0.0, 1.2247]) {
            assert!((got - want).abs() < 1e-3);
        }
        let z = zscore_normalize(&cands("q", &[(0, 0.1), (1, 0.1), (2, 0.1)]));
        assert!(z.entries.values().all(|&x| x == 0.0));
        let single = cands("q", &[(3, 7.5)]);
        assert_eq!(zscore_normalize(&single), single);
    }

    #[test]
    fn threshold_examples() {
        let cfg = SelectionConfig::default();
        let c = cands("q", &[(0, 0.9), (1, 0.5), (2, 0.1)]);
        assert_eq!(apply_threshold(&c, 0.45, &cfg).species, [0, 1].into());
        let c2 = cands("q", &[(0, 0.9), (1, 0.5)]);
        assert_eq!(apply_threshold(&c2, 2.0, &cfg).species, [0].into());

        let ten = cands(
            "q",
            &(0..10)
                .map(|i| (i, 0.9 - i as f64 * 0.05))
                .collect::<Vec<_>>(),
        );
        let cfg9 = SelectionConfig {
            max_len: Some(9),
            ..cfg.clone()
        };
        assert_eq!(
            apply_threshold(&ten, f64::NEG_INFINITY, &cfg9).species,
            (0..9).collect()
        );
    }

    #[test]
    fn threshold_is_strict_and_ties_prefer_low_ids() {
        let cfg = SelectionConfig {
            max_len: Some(1),
            ..Default::default()
        };
        let c = cands("q", &[(4, 0.5), (2, 0.5), (9, 0.1)]);
        assert_eq!(apply_threshold(&c, 0.0, &cfg).species, [2].into());
        let cfg = SelectionConfig::default();
        assert_eq!(
            apply_threshold(&c, 0.5, &cfg).species,
            [2].into(),
            "0.5 is not above 0.5; backfill picks id 2"
        );
    }

    #[test]
    fn bisection_reaches_two() {
        let cfg = SelectionConfig::default();
        let corpus = abc();
        let oracle = sweep(&corpus, &cfg);
        // levels: -inf -> 2, 0.1 -> 5/3, 0.4 -> 4/3, 0.5 -> 1, ...
        assert_eq!(oracle[0].1, 2.0);
        let tau = bisect_threshold(&corpus, 2.0, DEFAULT_BISECT_ITERS, &cfg).unwrap();
        assert!((0.1 - 1.0..0.1).contains(&tau));
        assert_eq!(mean_len(&corpus, tau, &cfg), 2.0);
    }

    #[test]
    fn bisection_reaches_four_thirds() {
        let cfg = SelectionConfig::default();
        let corpus = abc();
        let tau = bisect_threshold(&corpus, 4.0 / 3.0, DEFAULT_BISECT_ITERS, &cfg).unwrap();
        assert!((0.4..0.5).contains(&tau), "tau = {tau}");
        assert_eq!(mean_len(&corpus, tau, &cfg), 4.0 / 3.0);
        let preds: Vec<_> = corpus
            .iter()
            .map(|c| apply_threshold(c, tau, &cfg).species)
            .collect();
        assert_eq!(preds, vec![[0, 1].into(), [3].into(), [5].into()]);
    }

    #[test]
    fn bisection_lands_on_the_next_level_up_for_fractional_targets() {
        let cfg = SelectionConfig::default();
        let corpus = abc();
        // 1.5 sits between the 4/3 and 5/3 levels; the answer is 5/3.
        let tau = bisect_threshold(&corpus, 1.5, DEFAULT_BISECT_ITERS, &cfg).unwrap();
        assert!((0.1..0.4).contains(&tau));
        assert!((mean_len(&corpus, tau, &cfg) - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bisection_errors() {
        let cfg = SelectionConfig::default();
        assert!(matches!(
            bisect_threshold(&abc(), 2.5, 64, &cfg),
            Err(SelectionError::Unattainable { max_achievable, .. }) if max_achievable == 2.0
        ));
        assert_eq!(
            bisect_threshold(&[], 2.0, 64, &cfg),
            Err(SelectionError::EmptyCorpus)
        );
        assert!(matches!(
            bisect_threshold(&abc(), 0.5, 64, &cfg),
            Err(SelectionError::TargetBelowMinLen { .. })
        ));
        let bad = vec![cands("x", &[(0, f64::NAN)])];
        assert_eq!(
            bisect_threshold(&bad, 1.0, 64, &cfg),
            Err(SelectionError::NonFinite("x".into()))
        );
    }

    #[test]
    fn bisection_at_min_len_returns_the_top_score() {
        let cfg = SelectionConfig::default();
        let tau = bisect_threshold(&abc(), 1.0, 64, &cfg).unwrap();
        assert_eq!(tau, 0.9);
        assert_eq!(mean_len(&abc(), tau, &cfg), 1.0);
    }

    #[test]
    fn config_validation() {
        let ok = SelectionConfig {
            target_mean_len: Some(4.2),
            max_len: Some(9),
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
        let both = SelectionConfig {
            min_logit: Some(0.02),
            ..ok.clone()
        };
        assert!(matches!(both.validate(), Err(SelectionError::Config(_))));
        let low = SelectionConfig {
            target_mean_len: Some(0.5),
            ..Default::default()
        };
        assert!(matches!(
            low.validate(),
            Err(SelectionError::TargetBelowMinLen { .. })
        ));
        let inverted = SelectionConfig {
            min_len: 3,
            max_len: Some(2),
            ..Default::default()
        };
        assert!(inverted.validate().is_err());
        assert!(SelectionConfig {
            min_len: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn merge_examples() {
        let groups: HashMap<String, String> = (0..5)
            .map(|i| (format!("q{i}"), "plot".to_string()))
            .collect();
        let preds: Vec<_> = (0..5)
            .map(|i| pred(&format!("q{i}"), &if i < 4 { vec![7, i] } else { vec![i] }))
            .collect();
        let merged = metadata_merge(&preds, &groups, 3).unwrap();
        assert!(merged.iter().all(|p| p.species.contains(&7)));
        assert_eq!(merged[4].species, [4, 7].into());

        let preds3: Vec<_> = (0..5)
            .map(|i| pred(&format!("q{i}"), if i < 3 { &[7] } else { &[1] }))
            .collect();
        assert_eq!(metadata_merge(&preds3, &groups, 3).unwrap(), preds3);

        let singles: HashMap<String, String> =
            (0..5).map(|i| (format!("q{i}"), format!("g{i}"))).collect();
        for k in 1..4 {
            assert_eq!(metadata_merge(&preds, &singles, k).unwrap(), preds);
        }
        assert_eq!(
            metadata_merge(&[pred("zz", &[1])], &groups, 3),
            Err(SelectionError::MissingGroup("zz".into()))
        );
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<CandidateSet>> {
        proptest::collection::vec(
            proptest::collection::btree_map(0usize..30, -5.0f64..5.0, 1..10),
            1..25,
        )
        .prop_map(|sets| {
            sets.into_iter()
                .enumerate()
                .map(|(i, entries)| CandidateSet {
                    quadrat_id: format!("q{i}"),
                    entries,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn mean_len_is_monotone_and_bisection_hits_closest_level(
            corpus in corpus_strategy(),
            target in 1.0f64..6.0,
            max_len in proptest::option::of(1usize..8),
        ) {
            let cfg = SelectionConfig { max_len, ..Default::default() };
            let levels = sweep(&corpus, &cfg);
            for w in levels.windows(2) {
                prop_assert!(w[1].1 <= w[0].1);
                prop_assert!(w[1].1 >= 1.0);
            }
            for &(t, m) in &levels {
                prop_assert_eq!(mean_len(&corpus, t, &cfg), m);
            }
            match bisect_threshold(&corpus, target, DEFAULT_BISECT_ITERS, &cfg) {
                Ok(tau) => {
                    let achieved = mean_len(&corpus, tau, &cfg);
                    let best = levels.iter().map(|l| l.1).filter(|&m| m >= target - 1e-9).fold(f64::INFINITY, f64::min);
                    prop_assert!(achieved >= target - 1e-9);
                    prop_assert_eq!(achieved, best);
                }
                Err(SelectionError::Unattainable { .. }) => prop_assert!(levels[0].1 < target),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn bisection_level_survives_monotone_transforms(corpus in corpus_strategy(), target in 1.0f64..4.0) {
            let cfg = SelectionConfig::default();
            let warped: Vec<CandidateSet> = corpus.iter().map(|c| CandidateSet {
                quadrat_id: c.quadrat_id.clone(),
                entries: c.entries.iter().map(|(&s, &x)| (s, (x * 0.7).exp() * 3.0 + 1.0)).collect(),
            }).collect();
            let a = bisect_threshold(&corpus, target, 64, &cfg).map(|t| mean_len(&corpus, t, &cfg));
            let b = bisect_threshold(&warped, target, 64, &cfg).map(|t| mean_len(&warped, t, &cfg));
            prop_assert_eq!(a.is_ok(), b.is_ok());
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn threshold_output_size_is_clamped(
            entries in proptest::collection::btree_map(0usize..40, -5.0f64..5.0, 3..30),
            tau in -6.0f64..6.0, min_len in 1usize..3, extra in 0usize..6,
        ) {
            let cfg = SelectionConfig { min_len, max_len: Some(min_len + extra), ..Default::default() };
            let p = apply_threshold(&CandidateSet { quadrat_id: "q".into(), entries }, tau, &cfg);
            prop_assert!(p.species.len() >= min_len && p.species.len() <= min_len + extra);
        }

        #[test]
        fn merge_is_idempotent(
            sets in proptest::collection::vec(proptest::collection::btree_set(0usize..8, 1..4), 1..12),
            k in 1usize..4,
        ) {
            let preds: Vec<PredictionSet> = sets.into_iter().enumerate()
                .map(|(i, species)| PredictionSet { quadrat_id: format!("q{i}"), species }).collect();
            let groups: HashMap<String, String> = preds.iter().enumerate()
                .map(|(i, p)| (p.quadrat_id.clone(), format!("g{}", i % 3))).collect();
            let once = metadata_merge(&preds, &groups, k).unwrap();
            prop_assert_eq!(metadata_merge(&once, &groups, k).unwrap(), once);
        }
    }
}
