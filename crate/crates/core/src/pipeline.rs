//! End-to-end inference.
//!
//! Per quadrat and per crop member: crop, tile at every scale, compute tile
//! logits for every model, kernel-smooth each model's tiles (per scale),
//! bag all (crop, model) members, score tiles on the selection channel and
//! collect the per-tile top-1 candidates. Across the corpus: calibrate one
//! global threshold, select per quadrat, optionally merge by group.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::ensemble::{
    bag, compose_hydra, kernel_smooth, HydraModel, HydraSpec, ModelOutput, TileMap,
};
use crate::formats::{crop_pct_key, CacheKey, LogitCache};
use crate::fusion::{channel_scores, Level, TileLogits, TileScores};
use crate::geometry::{central_crop, tile_grid, CropSpec, GridSpec, TileKey};
use crate::selection::{
    apply_threshold, bisect_threshold, collect_candidates, mean_len, metadata_merge,
    zscore_normalize, CandidateSet, PredictionSet, SelectionConfig,
};
use crate::synthworld::World;
use crate::taxonomy::TaxonomyTable;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// One bag member per crop percentage.
    pub crop_pcts: Vec<f64>,
    pub scales: Vec<u32>,
    pub overlap_frac: f64,
    pub models: Vec<HydraSpec>,
    pub kernel_w: Option<f64>,
    pub selection: SelectionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            crop_pcts: vec![0.0],
            scales: vec![4, 5],
            overlap_frac: 0.0,
            models: vec![HydraSpec::best_hydra()],
            kernel_w: None,
            selection: SelectionConfig::default(),
        }
    }
}

impl RunConfig {
    /// Top public-leaderboard configuration: scales 4 and 5, 10 % crop,
    /// mean length 4.2, at most 9 species.
    pub fn reference() -> Self {
        Self {
            crop_pcts: vec![10.0],
            selection: SelectionConfig {
                target_mean_len: Some(4.2),
                max_len: Some(9),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config(
                "at least one tiling scale is required".into(),
            ));
        }
        if self.crop_pcts.is_empty() {
            return Err(Error::Config(
                "at least one crop percentage is required".into(),
            ));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        for &s in &self.scales {
            GridSpec::new(s, self.overlap_frac)?;
        }
        for &c in &self.crop_pcts {
            CropSpec::from_percent(c)?;
        }
        if let Some(w) = self.kernel_w {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "kernel_w must be finite and nonnegative, got {w}"
                )));
            }
        }
        self.selection.validate()?;
        Ok(())
    }
}

/// Produces raw tile logits for one crop member of one quadrat.
pub trait LogitSource: Sync {
    /// One output per entry of `models`, in the same order, each covering
    /// every tile of every scale.
    fn member_outputs(
        &self,
        quadrat_id: &str,
        crop_pct: f64,
        cfg: &RunConfig,
    ) -> Result<Vec<ModelOutput>>;
}

/// Runs the world's toy heads on mean cell features of each tile.
pub struct ToyBackbone<'w> {
    world: &'w World,
    index: HashMap<&'w str, usize>,
    models: BTreeMap<HydraSpec, HydraModel>,
}

impl<'w> ToyBackbone<'w> {
    pub fn new(world: &'w World, specs: &[HydraSpec]) -> Result<Self> {
        let index = world
            .quadrats
            .iter()
            .enumerate()
            .map(|(i, q)| (q.quadrat_id.as_str(), i))
            .collect();
        let mut models = BTreeMap::new();
        for spec in specs {
            models.insert(spec.clone(), compose_hydra(&world.heads, spec)?);
        }
        Ok(Self {
            world,
            index,
            models,
        })
    }
}

impl LogitSource for ToyBackbone<'_> {
    fn member_outputs(
        &self,
        quadrat_id: &str,
        crop_pct: f64,
        cfg: &RunConfig,
    ) -> Result<Vec<ModelOutput>> {
        let q = &self.world.quadrats[*self
            .index
            .get(quadrat_id)
            .ok_or_else(|| Error::UnknownQuadrat(quadrat_id.into()))?];
        let region = central_crop(q.rect(), CropSpec::from_percent(crop_pct)?)?;
        let cells = q.cells(&self.world.prototypes);
        let mut features = Vec::new();
        for &scale in &cfg.scales {
            for tile in tile_grid(region, GridSpec::new(scale, cfg.overlap_frac)?)? {
                features.push((tile.key(), cells.tile_features(tile.rect)?));
            }
        }
        cfg.models
            .iter()
            .map(|spec| {
                let model = match self.models.get(spec) {
                    Some(m) => m,
                    None => return Err(Error::Config(format!("model {spec} was not prepared"))),
                };
                let tiles = features
                    .iter()
                    .map(|(k, f)| Ok((*k, model.tile_logits(*k, f)?)))
                    .collect::<Result<TileMap>>()?;
                Ok(ModelOutput {
                    model_id: model.id(),
                    tiles,
                })
            })
            .collect()
    }
}

/// Serves logits from a cache, falling back to an inner source for members
/// that are not fully cached. Freshly computed logits are rounded to the
/// cache precision before use, so cold and warm runs agree exactly.
pub struct CachedSource<'a> {
    cache: &'a LogitCache,
    inner: Option<&'a dyn LogitSource>,
    fresh: Mutex<LogitCache>,
}

impl<'a> CachedSource<'a> {
    pub fn new(cache: &'a LogitCache, inner: Option<&'a dyn LogitSource>) -> Self {
        Self {
            cache,
            inner,
            fresh: Mutex::new(LogitCache::new()),
        }
    }

    /// Entries computed during this run.
    pub fn into_fresh(self) -> LogitCache {
        self.fresh.into_inner().expect("cache lock poisoned")
    }

    fn lookup(
        &self,
        model_id: &str,
        quadrat_id: &str,
        crop: &str,
        cfg: &RunConfig,
    ) -> Option<TileMap> {
        let key = |tile: TileKey, level: Level| CacheKey {
            model_id: model_id.to_string(),
            quadrat_id: quadrat_id.to_string(),
            crop_pct: crop.to_string(),
            tile,
            level,
        };
        let mut tiles = TileMap::new();
        for &scale in &cfg.scales {
            for tile in TileKey::grid(scale) {
                let species = self.cache.get(&key(tile, Level::Species))?.to_vec();
                let genus = self
                    .cache
                    .get(&key(tile, Level::Genus))
                    .map(<[f64]>::to_vec);
                let family = self
                    .cache
                    .get(&key(tile, Level::Family))
                    .map(<[f64]>::to_vec);
                tiles.insert(
                    tile,
                    TileLogits {
                        tile,
                        species,
                        genus,
                        family,
                    },
                );
            }
        }
        Some(tiles)
    }
}

impl LogitSource for CachedSource<'_> {
    fn member_outputs(
        &self,
        quadrat_id: &str,
        crop_pct: f64,
        cfg: &RunConfig,
    ) -> Result<Vec<ModelOutput>> {
        let crop = crop_pct_key(crop_pct);
        let cached: Vec<Option<TileMap>> = cfg
            .models
            .iter()
            .map(|m| self.lookup(&m.to_string(), quadrat_id, &crop, cfg))
            .collect();
        if cached.iter().all(Option::is_some) {
            return Ok(cfg
                .models
                .iter()
                .zip(cached)
                .map(|(m, tiles)| ModelOutput {
                    model_id: m.to_string(),
                    tiles: tiles.expect("checked"),
                })
                .collect());
        }

        let inner = self.inner.ok_or_else(|| Error::MissingLogits {
            model: cfg.models[cached
                .iter()
                .position(Option::is_none)
                .expect("some member missing")]
            .to_string(),
            quadrat: quadrat_id.to_string(),
            crop_pct: crop.clone(),
        })?;
        let mut fresh = LogitCache::new();
        let mut outputs = inner.member_outputs(quadrat_id, crop_pct, cfg)?;
        for out in &mut outputs {
            for (tile, logits) in &mut out.tiles {
                for level in Level::ALL {
                    if let Some(values) = logits.level_mut(level) {
                        let key = CacheKey {
                            model_id: out.model_id.clone(),
                            quadrat_id: quadrat_id.to_string(),
                            crop_pct: crop.clone(),
                            tile: *tile,
                            level,
                        };
                        fresh.insert(key.clone(), values);
                        values.copy_from_slice(fresh.get(&key).expect("just inserted"));
                    }
                }
            }
        }
        self.fresh
            .lock()
            .expect("cache lock poisoned")
            .extend(fresh);
        Ok(outputs)
    }
}

/// Candidate set of one quadrat.
pub fn infer_quadrat(
    quadrat_id: &str,
    cfg: &RunConfig,
    tax: &TaxonomyTable,
    source: &dyn LogitSource,
) -> Result<CandidateSet> {
    let mut members = Vec::with_capacity(cfg.crop_pcts.len() * cfg.models.len());
    for &crop in &cfg.crop_pcts {
        for out in source.member_outputs(quadrat_id, crop, cfg)? {
            let tiles = match cfg.kernel_w {
                Some(w) => kernel_smooth(&out.tiles, w)?,
                None => out.tiles,
            };
            members.push(ModelOutput {
                model_id: out.model_id,
                tiles,
            });
        }
    }
    let bagged = bag(&members)?;
    let scores = bagged
        .tiles
        .values()
        .map(|t| channel_scores(t, tax, cfg.selection.channel))
        .collect::<Result<Vec<TileScores>, _>>()?;
    let candidates = collect_candidates(quadrat_id, &scores)?;
    Ok(if cfg.selection.zscore {
        zscore_normalize(&candidates)
    } else {
        candidates
    })
}

/// A quadrat to run, with its metadata-merge group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadratMeta {
    pub quadrat_id: String,
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub candidates: Vec<CandidateSet>,
    /// Threshold applied to every quadrat; `-inf` when thresholding is off.
    pub tau: f64,
    pub mean_len: f64,
    pub predictions: Vec<PredictionSet>,
}

/// Threshold for a candidate corpus according to the selection config.
pub fn select_threshold(candidates: &[CandidateSet], sel: &SelectionConfig) -> Result<f64> {
    Ok(match (sel.target_mean_len, sel.min_logit) {
        (Some(target), _) => bisect_threshold(candidates, target, sel.bisect_iters, sel)?,
        (None, Some(t)) => t,
        (None, None) => f64::NEG_INFINITY,
    })
}

/// Threshold, select and optionally merge an already inferred corpus.
pub fn select(
    candidates: Vec<CandidateSet>,
    quadrats: &[QuadratMeta],
    sel: &SelectionConfig,
) -> Result<RunOutput> {
    let tau = select_threshold(&candidates, sel)?;
    let mut predictions: Vec<PredictionSet> = candidates
        .iter()
        .map(|c| apply_threshold(c, tau, sel))
        .collect();
    if let Some(k) = sel.merge_k {
        let groups: HashMap<String, String> = quadrats
            .iter()
            .filter_map(|q| q.group.as_ref().map(|g| (q.quadrat_id.clone(), g.clone())))
            .collect();
        predictions = metadata_merge(&predictions, &groups, k)?;
    }
    let mean_len = mean_len(&candidates, tau, sel);
    Ok(RunOutput {
        candidates,
        tau,
        mean_len,
        predictions,
    })
}

/// Infer every quadrat, calibrate one global threshold and select.
pub fn run(
    quadrats: &[QuadratMeta],
    cfg: &RunConfig,
    tax: &TaxonomyTable,
    source: &dyn LogitSource,
) -> Result<RunOutput> {
    cfg.validate()?;
    let candidates = quadrats
        .par_iter()
        .map(|q| infer_quadrat(&q.quadrat_id, cfg, tax, source))
        .collect::<Result<Vec<_>>>()?;
    select(candidates, quadrats, &cfg.selection)
}

/// Quadrat list of a synthetic world, grouped by transect.
pub fn world_quadrats(world: &World) -> Vec<QuadratMeta> {
    world
        .quadrats
        .iter()
        .map(|q| QuadratMeta {
            quadrat_id: q.quadrat_id.clone(),
            group: Some(q.transect_id.clone()),
        })
        .collect()
}

/// Run the toy backbone over a whole world without a cache.
pub fn run_world(world: &World, cfg: &RunConfig) -> Result<RunOutput> {
    let source = ToyBackbone::new(world, &cfg.models)?;
    run(&world_quadrats(world), cfg, &world.taxonomy, &source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fuse, tile_top1, Channel};
    use crate::synthworld::{gen_world, PrototypeKind, SynthConfig};

    fn world(sigma: f64) -> World {
        gen_world(&SynthConfig {
            n_species: 40,
            n_genera: 10,
            n_families: 3,
            feature_dim: 40,
            prototypes: PrototypeKind::Orthogonal,
            noise_sigma: sigma,
            richness_min: 4,
            richness_max: 4,
            n_quadrats: 10,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn single_scale_single_tile_is_that_tiles_top1() {
        let w = world(0.2);
        let cfg = RunConfig {
            scales: vec![1],
            ..Default::default()
        };
        let src = ToyBackbone::new(&w, &cfg.models).unwrap();
        let q = &w.quadrats[0];
        let c = infer_quadrat(&q.quadrat_id, &cfg, &w.taxonomy, &src).unwrap();
        let model = compose_hydra(&w.heads, &HydraSpec::best_hydra()).unwrap();
        let f = q.tile_features(&w.prototypes, q.rect()).unwrap();
        let fused = fuse(
            &model.tile_logits(TileKey::new(1, 0, 0), &f).unwrap(),
            &w.taxonomy,
        )
        .unwrap();
        let (s, x) = tile_top1(&fused).unwrap();
        assert_eq!(c.entries, [(s, x)].into_iter().collect());
    }

    #[test]
    fn pure_tiles_yield_planted_species() {
        let w = world(0.0);
        let cfg = RunConfig {
            scales: vec![4, 5],
            ..Default::default()
        };
        let src = ToyBackbone::new(&w, &cfg.models).unwrap();
        for q in &w.quadrats {
            // oracle: species that own a pure tile at scale 5
            let mut pure = std::collections::BTreeSet::new();
            for t in tile_grid(q.rect(), GridSpec::disjoint(5).unwrap()).unwrap() {
                let s = q.species_at(t.rect.x0, t.rect.y0);
                let uniform = (t.rect.y0..t.rect.y1)
                    .all(|y| (t.rect.x0..t.rect.x1).all(|x| q.species_at(x, y) == s));
                if uniform {
                    pure.insert(s);
                }
            }
            assert_eq!(pure, q.truth());
            let c = infer_quadrat(&q.quadrat_id, &cfg, &w.taxonomy, &src).unwrap();
            assert!(pure.iter().all(|s| c.entries.contains_key(s)));
        }
    }

    #[test]
    fn keep_everything_predicts_all_candidates() {
        let w = world(0.3);
        let cfg = RunConfig::default();
        let metas = world_quadrats(&w);
        let out = run(
            &metas[..1],
            &cfg,
            &w.taxonomy,
            &ToyBackbone::new(&w, &cfg.models).unwrap(),
        )
        .unwrap();
        let all: std::collections::BTreeSet<usize> =
            out.candidates[0].entries.keys().copied().collect();
        assert_eq!(out.predictions[0].species, all);
        assert_eq!(out.tau, f64::NEG_INFINITY);
    }

    #[test]
    fn calibrated_run_hits_target() {
        let w = world(0.5);
        let cfg = RunConfig {
            selection: SelectionConfig {
                target_mean_len: Some(4.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let out = run_world(&w, &cfg).unwrap();
        assert!(out.mean_len >= 4.0);
        let lens: f64 = out
            .predictions
            .iter()
            .map(|p| p.species.len())
            .sum::<usize>() as f64
            / 10.0;
        assert_eq!(lens, out.mean_len);
    }

    #[test]
    fn duplicate_model_and_extra_scale_invariants() {
        let w = world(0.4);
        let one = RunConfig {
            scales: vec![4],
            ..Default::default()
        };
        let dup = RunConfig {
            models: vec![HydraSpec::best_hydra(); 2],
            ..one.clone()
        };
        let more = RunConfig {
            scales: vec![4, 5],
            ..one.clone()
        };
        let a = run_world(&w, &one).unwrap();
        let b = run_world(&w, &dup).unwrap();
        assert_eq!(a, b);
        let c = run_world(&w, &more).unwrap();
        for (x, y) in a.candidates.iter().zip(&c.candidates) {
            assert!(x.entries.keys().all(|s| y.entries.contains_key(s)));
        }
    }

    #[test]
    fn cache_round_trip_matches_cold_run() {
        let w = world(0.4);
        let mut cfg = RunConfig {
            crop_pcts: vec![0.0, 10.0],
            kernel_w: Some(0.5),
            ..RunConfig::reference()
        };
        cfg.selection.target_mean_len = Some(2.5);
        let toy = ToyBackbone::new(&w, &cfg.models).unwrap();
        let metas = world_quadrats(&w);

        let empty = LogitCache::new();
        let cold = CachedSource::new(&empty, Some(&toy));
        let first = run(&metas, &cfg, &w.taxonomy, &cold).unwrap();
        let cache = cold.into_fresh();
        assert_eq!(cache.len(), 10 * 2 * 41 * 3);

        let reloaded = LogitCache::parse_csv("cache", &cache.to_csv()).unwrap();
        let warm = CachedSource::new(&reloaded, None);
        let second = run(&metas, &cfg, &w.taxonomy, &warm).unwrap();
        assert_eq!(first, second);
        assert!(warm.into_fresh().is_empty());

        let partial = LogitCache::new();
        let offline = CachedSource::new(&partial, None);
        assert!(matches!(
            run(&metas, &cfg, &w.taxonomy, &offline),
            Err(Error::MissingLogits { .. })
        ));
    }

    #[test]
    fn channels_and_zscore_run() {
        let w = world(0.5);
        for channel in [Channel::Fused, Channel::Species, Channel::Raw] {
            let cfg = RunConfig {
                selection: SelectionConfig {
                    channel,
                    zscore: true,
                    target_mean_len: Some(3.0),
                    ..Default::default()
                },
                ..Default::default()
            };
            let out = run_world(&w, &cfg).unwrap();
            assert_eq!(out.predictions.len(), 10);
        }
    }

    #[test]
    fn metadata_merge_uses_transects() {
        let w = world(0.5);
        let cfg = RunConfig {
            selection: SelectionConfig {
                merge_k: Some(1),
                ..Default::default()
            },
            ..Default::default()
        };
        let out = run_world(&w, &cfg).unwrap();
        let plain = run_world(&w, &RunConfig::default()).unwrap();
        for (m, p) in out.predictions.iter().zip(&plain.predictions) {
            assert!(p.species.is_subset(&m.species));
        }
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig {
            scales: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            crop_pcts: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            kernel_w: Some(-0.5),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig::reference().validate().is_ok());
        let w = world(0.0);
        let bad = RunConfig {
            models: vec![HydraSpec::new("linear", "mlp", "nope")],
            ..Default::default()
        };
        assert!(ToyBackbone::new(&w, &bad.models).is_err());
        let src = ToyBackbone::new(&w, &RunConfig::default().models).unwrap();
        assert!(matches!(
            infer_quadrat("nope", &RunConfig::default(), &w.taxonomy, &src),
            Err(Error::UnknownQuadrat(_))
        ));
    }
}
