//! Multi-label species prediction for vegetation quadrats from single-label
//! tile classifiers.
//!
//! The inference path crops each quadrat, tiles it at several grid scales,
//! runs per-level classification heads on every tile, optionally smooths
//! and bags the tile logits, fuses species, genus and family outputs through
//! the taxonomy, keeps each tile's top species, and selects a final species
//! set per quadrat with a threshold calibrated to a target mean prediction
//! length. Predictions are scored with the transect-averaged F1 metric.
//!
//! A deterministic synthetic world ([`synthworld`]) stands in for imagery
//! and a trained backbone so the whole pipeline can be exercised end to end.

pub mod config;
pub mod ensemble;
pub mod formats;
pub mod fusion;
pub mod geometry;
pub mod heads;
pub mod metric;
pub mod pipeline;
pub mod selection;
pub mod store;
pub mod synthworld;
pub mod taxonomy;

use thiserror::Error;

pub use ensemble::{bag, compose_hydra, kernel_smooth, HydraModel, HydraSpec, ModelOutput};
pub use fusion::{fuse, log_softmax, tile_top1, Channel, Level, TileLogits, TileScores};
pub use geometry::{
    central_crop, neighbors, tile_grid, CropSpec, GridSpec, Rect, TileKey, TileRef,
};
pub use metric::{quadrat_f1, score, GroundTruthTable, ScoreReport};
pub use pipeline::{infer_quadrat, run, RunConfig, RunOutput};
pub use selection::{
    apply_threshold, bisect_threshold, collect_candidates, mean_len, metadata_merge,
    zscore_normalize, CandidateSet, PredictionSet, SelectionConfig,
};
pub use synthworld::{gen_world, SynthConfig, World};
pub use taxonomy::{load_taxonomy, TaxonomyTable};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Taxonomy(#[from] taxonomy::TaxonomyError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Synth(#[from] synthworld::SynthError),
    #[error(transparent)]
    Head(#[from] heads::HeadError),
    #[error(transparent)]
    Fusion(#[from] fusion::FusionError),
    #[error(transparent)]
    Ensemble(#[from] ensemble::EnsembleError),
    #[error(transparent)]
    Selection(#[from] selection::SelectionError),
    #[error(transparent)]
    Metric(#[from] metric::MetricError),
    #[error(transparent)]
    Format(#[from] formats::FormatError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no logits for {model} on quadrat {quadrat} (crop {crop_pct}%)")]
    MissingLogits {
        model: String,
        quadrat: String,
        crop_pct: String,
    },
    #[error("unknown quadrat {0}")]
    UnknownQuadrat(String),
}

impl Error {
    /// Short stable category used in command-line error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Taxonomy(_) => "taxonomy",
            Error::Geometry(_) => "geometry",
            Error::Synth(_) => "world",
            Error::Head(_) => "head",
            Error::Fusion(_) => "fusion",
            Error::Ensemble(_) => "ensemble",
            Error::Selection(_) => "selection",
            Error::Metric(_) => "metric",
            Error::Format(formats::FormatError::Io { .. }) => "io",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::MissingLogits { .. } | Error::UnknownQuadrat(_) => "input",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
