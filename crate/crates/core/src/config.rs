//! Flat `key=value` config files for world generation and inference runs.

use std::fmt::Write as _;

use crate::ensemble::HydraSpec;
use crate::formats::KeyValues;
use crate::fusion::Channel;
use crate::pipeline::RunConfig;
use crate::selection::{SelectionConfig, DEFAULT_BISECT_ITERS};
use crate::synthworld::{PrototypeKind, SynthConfig};
use crate::{Error, Result};

fn parse_prototypes(s: &str) -> Result<PrototypeKind> {
    match s {
        "orthogonal" => Ok(PrototypeKind::Orthogonal),
        "sphere" => Ok(PrototypeKind::Sphere),
        other => Err(Error::Config(format!(
            "unknown prototypes `{other}` (expected orthogonal or sphere)"
        ))),
    }
}

fn prototypes_name(p: PrototypeKind) -> &'static str {
    match p {
        PrototypeKind::Orthogonal => "orthogonal",
        PrototypeKind::Sphere => "sphere",
    }
}

/// Parse a world config. Missing keys take [`SynthConfig::default`] values.
///
/// `richness` accepts either a single count or an inclusive range `lo..hi`.
pub fn parse_synth_config(file: &str, text: &str) -> Result<SynthConfig> {
    let mut kv = KeyValues::parse(file, text)?;
    let mut cfg = SynthConfig::default();
    macro_rules! take {
        ($($field:ident),*) => {$(
            if let Some(v) = kv.take(stringify!($field))? {
                cfg.$field = v;
            }
        )*};
    }
    take!(
        n_species,
        n_genera,
        n_families,
        n_quadrats,
        quadrats_per_transect,
        grid_cells,
        patch_align,
        feature_dim,
        noise_sigma,
        richness_min,
        richness_max,
        taxon_spread,
        logit_scale,
        head_jitter,
        seed
    );
    if let Some(r) = kv.take_raw("richness") {
        let (lo, hi) = match r.split_once("..") {
            Some((lo, hi)) => (lo.trim().parse(), hi.trim().parse()),
            None => (r.trim().parse(), r.trim().parse()),
        };
        match (lo, hi) {
            (Ok(lo), Ok(hi)) => {
                cfg.richness_min = lo;
                cfg.richness_max = hi;
            }
            _ => {
                return Err(Error::Config(format!(
                    "bad richness `{r}` (expected N or LO..HI)"
                )))
            }
        }
    }
    if let Some(p) = kv.take_raw("prototypes") {
        cfg.prototypes = parse_prototypes(&p)?;
    }
    kv.finish()?;
    Ok(cfg)
}

pub fn synth_config_to_string(cfg: &SynthConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n_species={}", cfg.n_species);
    let _ = writeln!(s, "n_genera={}", cfg.n_genera);
    let _ = writeln!(s, "n_families={}", cfg.n_families);
    let _ = writeln!(s, "n_quadrats={}", cfg.n_quadrats);
    let _ = writeln!(s, "quadrats_per_transect={}", cfg.quadrats_per_transect);
    let _ = writeln!(s, "grid_cells={}", cfg.grid_cells);
    let _ = writeln!(s, "patch_align={}", cfg.patch_align);
    let _ = writeln!(s, "feature_dim={}", cfg.feature_dim);
    let _ = writeln!(s, "noise_sigma={}", cfg.noise_sigma);
    let _ = writeln!(s, "richness_min={}", cfg.richness_min);
    let _ = writeln!(s, "richness_max={}", cfg.richness_max);
    let _ = writeln!(s, "prototypes={}", prototypes_name(cfg.prototypes));
    let _ = writeln!(s, "taxon_spread={}", cfg.taxon_spread);
    let _ = writeln!(s, "logit_scale={}", cfg.logit_scale);
    let _ = writeln!(s, "head_jitter={}", cfg.head_jitter);
    let _ = writeln!(s, "seed={}", cfg.seed);
    s
}

fn parse_max_len(s: &str) -> Result<Option<usize>> {
    match s {
        "inf" | "none" | "unbounded" => Ok(None),
        n => n
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad max_len `{n}` (expected a count or `inf`)"))),
    }
}

/// Parse an inference run config.
///
/// Recognised keys: `crop_pct`, `scales`, `overlap`, `models`, `kernel_w`,
/// `channel`, `min_logit`, `target_mean_len`, `max_len`, `min_len`,
/// `zscore`, `merge_k`, `bisect_iters`. Lists are comma-separated; models
/// are `species/genus/family` head names.
pub fn parse_run_config(file: &str, text: &str) -> Result<RunConfig> {
    let mut kv = KeyValues::parse(file, text)?;
    let scales = kv
        .take_list::<u32>("scales")?
        .ok_or_else(|| Error::Config("`scales` is required".into()))?;
    let crop_pcts = kv
        .take_list::<f64>("crop_pct")?
        .unwrap_or_else(|| vec![0.0]);
    let overlap_frac = kv.take("overlap")?.unwrap_or(0.0);
    let models = match kv.take_raw("models") {
        None => vec![HydraSpec::best_hydra()],
        Some(list) => list
            .split(',')
            .map(|m| m.parse::<HydraSpec>())
            .collect::<Result<_, _>>()?,
    };
    let kernel_w = kv.take("kernel_w")?;

    let mut selection = SelectionConfig::default();
    if let Some(c) = kv.take_raw("channel") {
        selection.channel = c.parse::<Channel>().map_err(Error::Config)?;
    }
    selection.min_logit = kv.take("min_logit")?;
    selection.target_mean_len = kv.take("target_mean_len")?;
    if let Some(m) = kv.take_raw("max_len") {
        selection.max_len = parse_max_len(&m)?;
    }
    if let Some(m) = kv.take("min_len")? {
        selection.min_len = m;
    }
    if let Some(z) = kv.take("zscore")? {
        selection.zscore = z;
    }
    selection.merge_k = kv.take("merge_k")?;
    selection.bisect_iters = kv.take("bisect_iters")?.unwrap_or(DEFAULT_BISECT_ITERS);
    kv.finish()?;

    let cfg = RunConfig {
        crop_pcts,
        scales,
        overlap_frac,
        models,
        kernel_w,
        selection,
    };
    cfg.validate()?;
    Ok(cfg)
}
