//! Model combination: logit bagging, Hydra head composition and
//! neighbour-tile kernel smoothing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::fusion::{Level, TileLogits};
use crate::geometry::{neighbors, TileKey};
use crate::heads::{Head, HeadError, HeadRegistry};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("cannot bag zero models")]
    EmptyBag,
    #[error("bag members disagree: {0}")]
    Incongruent(String),
    #[error("kernel weight must be finite and nonnegative, got {0}")]
    Weight(f64),
    #[error("scale {scale} grid is missing tile {missing:?}")]
    IncompleteGrid { scale: u32, missing: TileKey },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("bad hydra spec `{0}` (expected species/genus/family head names)")]
    HydraSpec(String),
}

pub type TileMap = BTreeMap<TileKey, TileLogits>;

/// All tile logits one model produced for one quadrat.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub model_id: String,
    pub tiles: TileMap,
}

/// One head variant per taxonomy level.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HydraSpec {
    pub species: String,
    pub genus: String,
    pub family: String,
}

impl HydraSpec {
    pub fn new(species: &str, genus: &str, family: &str) -> Self {
        Self {
            species: species.into(),
            genus: genus.into(),
            family: family.into(),
        }
    }

    /// One-layer species head with two-layer genus and family heads.
    pub fn best_hydra() -> Self {
        Self::new("linear", "mlp", "mlp")
    }

    /// Single-layer heads at every level.
    pub fn single_layer() -> Self {
        Self::new("linear", "linear", "linear")
    }

    pub fn head_name(&self, level: Level) -> &str {
        match level {
            Level::Species => &self.species,
            Level::Genus => &self.genus,
            Level::Family => &self.family,
        }
    }
}

/// `species/genus/family`, e.g. `linear/mlp/mlp`.
impl fmt::Display for HydraSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.species, self.genus, self.family)
    }
}

impl FromStr for HydraSpec {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split('/').map(str::trim).collect();
        match parts.as_slice() {
            [sp, g, f] if !sp.is_empty() && !g.is_empty() && !f.is_empty() => {
                Ok(Self::new(sp, g, f))
            }
            _ => Err(EnsembleError::HydraSpec(s.to_string())),
        }
    }
}

/// A model assembled from registry heads over the shared tile feature.
#[derive(Debug, Clone)]
pub struct HydraModel {
    spec: HydraSpec,
    species: Arc<Head>,
    genus: Arc<Head>,
    family: Arc<Head>,
}

impl HydraModel {
    pub fn id(&self) -> String {
        self.spec.to_string()
    }

    pub fn spec(&self) -> &HydraSpec {
        &self.spec
    }

    pub fn tile_logits(&self, tile: TileKey, feature: &[f64]) -> Result<TileLogits, HeadError> {
        Ok(TileLogits {
            tile,
            species: self.species.forward(feature)?,
            genus: Some(self.genus.forward(feature)?),
            family: Some(self.family.forward(feature)?),
        })
    }
}

pub fn compose_hydra(
    registry: &HeadRegistry,
    spec: &HydraSpec,
) -> Result<HydraModel, EnsembleError> {
    Ok(HydraModel {
        spec: spec.clone(),
        species: Arc::clone(registry.get(Level::Species, &spec.species)?),
        genus: Arc::clone(registry.get(Level::Genus, &spec.genus)?),
        family: Arc::clone(registry.get(Level::Family, &spec.family)?),
    })
}

/// Element-wise mean, independent of input order and exact when all inputs
/// agree.
fn mean_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    let spread: f64 = values.iter().map(|v| v - base).sum();
    base + spread / values.len() as f64
}

fn bag_level(members: &[&[f64]]) -> Vec<f64> {
    let mut scratch = vec![0.0; members.len()];
    (0..members[0].len())
        .map(|i| {
            for (slot, m) in scratch.iter_mut().zip(members) {
                *slot = m[i];
            }
            mean_of(&mut scratch)
        })
        .collect()
}

/// Average the logits of several models tile by tile and level by level.
pub fn bag(outputs: &[ModelOutput]) -> Result<ModelOutput, EnsembleError> {
    let first = outputs.first().ok_or(EnsembleError::EmptyBag)?;
    if outputs.len() == 1 {
        return Ok(first.clone());
    }
    for other in &outputs[1..] {
        if other.tiles.len() != first.tiles.len() || other.tiles.keys().ne(first.tiles.keys()) {
            return Err(EnsembleError::Incongruent(format!(
                "`{}` and `{}` cover different tiles",
                first.model_id, other.model_id
            )));
        }
    }

    let mut tiles = TileMap::new();
    for (key, proto) in &first.tiles {
        let members: Vec<&TileLogits> = outputs.iter().map(|o| &o.tiles[key]).collect();
        let mut bagged = TileLogits {
            tile: *key,
            species: Vec::new(),
            genus: None,
            family: None,
        };
        for level in Level::ALL {
            let views: Vec<Option<&[f64]>> = members.iter().map(|m| m.level(level)).collect();
            let expected = proto.level(level).map(<[f64]>::len);
            if views.iter().any(|v| v.map(<[f64]>::len) != expected) {
                return Err(EnsembleError::Incongruent(format!(
                    "{level} logits differ in shape at {key:?}"
                )));
            }
            if expected.is_some() {
                let slices: Vec<&[f64]> = views.into_iter().flatten().collect();
                let mean = bag_level(&slices);
                match level {
                    Level::Species => bagged.species = mean,
                    Level::Genus => bagged.genus = Some(mean),
                    Level::Family => bagged.family = Some(mean),
                }
            }
        }
        tiles.insert(*key, bagged);
    }

    let ids: Vec<&str> = outputs.iter().map(|o| o.model_id.as_str()).collect();
    Ok(ModelOutput {
        model_id: format!("bag({})", ids.join("+")),
        tiles,
    })
}

/// Add `w` times the 4-neighbour logits to every tile, per level and per
/// scale. Reads only the unsmoothed input.
pub fn kernel_smooth(tiles: &TileMap, w: f64) -> Result<TileMap, EnsembleError> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(EnsembleError::Weight(w));
    }
    let scales: BTreeSet<u32> = tiles.keys().map(|k| k.scale).collect();
    for &scale in &scales {
        if let Some(missing) = TileKey::grid(scale).find(|k| !tiles.contains_key(k)) {
            return Err(EnsembleError::IncompleteGrid { scale, missing });
        }
    }
    if w == 0.0 {
        return Ok(tiles.clone());
    }

    let mut out = TileMap::new();
    for (key, t) in tiles {
        let mut smoothed = t.clone();
        for nb in neighbors(*key) {
            let u = &tiles[&nb];
            for level in Level::ALL {
                if let (Some(dst), Some(src)) = (smoothed.level_mut(level), u.level(level)) {
                    if dst.len() != src.len() {
                        return Err(EnsembleError::Incongruent(format!(
                            "{level} logits differ in shape at {nb:?}"
                        )));
                    }
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        out.insert(*key, smoothed);
    }
    Ok(out)
}
