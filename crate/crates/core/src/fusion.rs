//! Per-tile score fusion across the species, genus and family heads.
//!
//! Probabilities of the three heads are multiplied along valid taxonomy
//! paths. In log space that is a sum of log-softmax outputs, where each
//! species picks up the genus and family terms of its own ancestors; triples
//! that do not exist in the taxonomy never appear.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::TileKey;
use crate::taxonomy::TaxonomyTable;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("cannot normalise an empty logit vector")]
    Empty,
    #[error("non-finite logit at index {0}")]
    NonFinite(usize),
    #[error("{level} logits have length {got}, taxonomy expects {expected}")]
    LengthMismatch {
        level: Level,
        got: usize,
        expected: usize,
    },
}

/// Taxonomy level of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Species,
    Genus,
    Family,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Species, Level::Genus, Level::Family];

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Species => "species",
            Level::Genus => "genus",
            Level::Family => "family",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "species" => Ok(Level::Species),
            "genus" => Ok(Level::Genus),
            "family" => Ok(Level::Family),
            other => Err(format!("unknown taxonomy level `{other}`")),
        }
    }
}

/// Raw head outputs for one tile. Absent levels are neutral in fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileLogits {
    pub tile: TileKey,
    pub species: Vec<f64>,
    pub genus: Option<Vec<f64>>,
    pub family: Option<Vec<f64>>,
}

impl TileLogits {
    pub fn species_only(tile: TileKey, species: Vec<f64>) -> Self {
        Self {
            tile,
            species,
            genus: None,
            family: None,
        }
    }

    pub fn level(&self, level: Level) -> Option<&[f64]> {
        match level {
            Level::Species => Some(&self.species),
            Level::Genus => self.genus.as_deref(),
            Level::Family => self.family.as_deref(),
        }
    }

    pub fn level_mut(&mut self, level: Level) -> Option<&mut Vec<f64>> {
        match level {
            Level::Species => Some(&mut self.species),
            Level::Genus => self.genus.as_mut(),
            Level::Family => self.family.as_mut(),
        }
    }
}

/// Per-species scores of one tile on some channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TileScores {
    pub tile: TileKey,
    pub score: Vec<f64>,
}

/// Which per-species score drives candidate selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    /// Species, genus and family log-probabilities summed along the taxonomy.
    #[default]
    Fused,
    /// Log-softmax of the species head alone.
    Species,
    /// Raw species logits.
    Raw,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Fused => "fused",
            Channel::Species => "species",
            Channel::Raw => "raw",
        })
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fused" => Ok(Channel::Fused),
            "species" => Ok(Channel::Species),
            "raw" => Ok(Channel::Raw),
            other => Err(format!(
                "unknown channel `{other}` (expected fused, species or raw)"
            )),
        }
    }
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>, FusionError> {
    if v.is_empty() {
        return Err(FusionError::Empty);
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(FusionError::NonFinite(i));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    let ln_sum = sum.ln();
    Ok(v.iter().map(|&x| (x - max) - ln_sum).collect())
}

fn check_len(level: Level, got: usize, expected: usize) -> Result<(), FusionError> {
    if got != expected {
        return Err(FusionError::LengthMismatch {
            level,
            got,
            expected,
        });
    }
    Ok(())
}

/// `score[s] = ls[s] + lg[genus(s)] + lf[family(s)]`.
pub fn fuse(logits: &TileLogits, tax: &TaxonomyTable) -> Result<TileScores, FusionError> {
    check_len(Level::Species, logits.species.len(), tax.n_species())?;
    let mut score = log_softmax(&logits.species)?;

    let s2g = tax.species_to_genus();
    let g2f = tax.genus_to_family();
    if let Some(genus) = &logits.genus {
        check_len(Level::Genus, genus.len(), tax.n_genera())?;
        let lg = log_softmax(genus)?;
        for (s, x) in score.iter_mut().enumerate() {
            *x += lg[s2g[s]];
        }
    }
    if let Some(family) = &logits.family {
        check_len(Level::Family, family.len(), tax.n_families())?;
        let lf = log_softmax(family)?;
        for (s, x) in score.iter_mut().enumerate() {
            *x += lf[g2f[s2g[s]]];
        }
    }
    Ok(TileScores {
        tile: logits.tile,
        score,
    })
}

pub fn channel_scores(
    logits: &TileLogits,
    tax: &TaxonomyTable,
    channel: Channel,
) -> Result<TileScores, FusionError> {
    match channel {
        Channel::Fused => fuse(logits, tax),
        Channel::Species => {
            check_len(Level::Species, logits.species.len(), tax.n_species())?;
            Ok(TileScores {
                tile: logits.tile,
                score: log_softmax(&logits.species)?,
            })
        }
        Channel::Raw => {
            check_len(Level::Species, logits.species.len(), tax.n_species())?;
            Ok(TileScores {
                tile: logits.tile,
                score: logits.species.clone(),
            })
        }
    }
}

/// Argmax species and its score; ties go to the lowest id.
pub fn tile_top1(scores: &TileScores) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (s, &x) in scores.score.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((s, x)),
        }
    }
    best
}
