//! Deterministic synthetic quadrats and a toy multi-head backbone.
//!
//! A quadrat is a square grid of cells, each holding a feature vector: the
//! prototype of the species planted there plus Gaussian noise. Species are
//! planted as axis-aligned patches obtained by recursively splitting the
//! quadrat along a coarse unit lattice, so every patch covers at least one
//! whole lattice unit. A tile's feature is the mean of its cells, which
//! stands in for a backbone embedding.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Level;
use crate::geometry::Rect;
use crate::heads::{Head, HeadRegistry, Matrix};
use crate::taxonomy::TaxonomyTable;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("infeasible world config: {0}")]
    Infeasible(String),
    #[error("tile {rect:?} lies outside the {side}x{side} quadrat")]
    OutOfBounds { rect: Rect, side: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeKind {
    /// Species `s` is the basis vector `e_s`. Needs `feature_dim >= n_species`.
    Orthogonal,
    /// Unit vectors clustered by family, then genus, then species.
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_species: usize,
    pub n_genera: usize,
    pub n_families: usize,
    pub n_quadrats: usize,
    pub quadrats_per_transect: usize,
    /// Cells per quadrat side.
    pub grid_cells: u32,
    /// Patch edges fall on multiples of this many cells.
    pub patch_align: u32,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub richness_min: usize,
    pub richness_max: usize,
    pub prototypes: PrototypeKind,
    /// Offset scale from family to genus and genus to species directions
    /// for sphere prototypes.
    pub taxon_spread: f64,
    /// Gain applied by every head; sets how peaked the softmax outputs are.
    pub logit_scale: f64,
    /// Weight error of a single-species head, relative to its prototype.
    /// Genus and family heads pool their member species, so their error
    /// shrinks with `1 / sqrt(members)`.
    pub head_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_species: 60,
            n_genera: 15,
            n_families: 4,
            n_quadrats: 40,
            quadrats_per_transect: 5,
            grid_cells: 20,
            patch_align: 4,
            feature_dim: 32,
            noise_sigma: 0.3,
            richness_min: 3,
            richness_max: 6,
            prototypes: PrototypeKind::Sphere,
            taxon_spread: 1.0,
            logit_scale: 10.0,
            head_jitter: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_families == 0 {
            return invalid("n_families must be at least 1".into());
        }
        if self.n_genera < self.n_families {
            return invalid(format!(
                "n_genera ({}) < n_families ({})",
                self.n_genera, self.n_families
            ));
        }
        if self.n_species < self.n_genera {
            return invalid(format!(
                "n_species ({}) < n_genera ({})",
                self.n_species, self.n_genera
            ));
        }
        if self.feature_dim == 0 {
            return invalid("feature_dim must be at least 1".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return invalid(format!(
                "noise_sigma must be finite and nonnegative, got {}",
                self.noise_sigma
            ));
        }
        if self.n_quadrats == 0 || self.quadrats_per_transect == 0 {
            return invalid("n_quadrats and quadrats_per_transect must be at least 1".into());
        }
        if self.grid_cells == 0
            || self.patch_align == 0
            || !self.grid_cells.is_multiple_of(self.patch_align)
        {
            return invalid(format!(
                "grid_cells ({}) must be a positive multiple of patch_align ({})",
                self.grid_cells, self.patch_align
            ));
        }
        if self.richness_min == 0 || self.richness_min > self.richness_max {
            return invalid(format!(
                "richness range {}..={} is empty or starts at 0",
                self.richness_min, self.richness_max
            ));
        }
        for (name, v) in [
            ("taxon_spread", self.taxon_spread),
            ("logit_scale", self.logit_scale),
            ("head_jitter", self.head_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.richness_max > self.n_species {
            return Err(SynthError::Infeasible(format!(
                "richness up to {} exceeds n_species ({})",
                self.richness_max, self.n_species
            )));
        }
        let units = (self.grid_cells / self.patch_align) as usize;
        if self.richness_max > units * units {
            return Err(SynthError::Infeasible(format!(
                "richness up to {} needs more patches than the {units}x{units} lattice holds",
                self.richness_max
            )));
        }
        if self.prototypes == PrototypeKind::Orthogonal && self.feature_dim < self.n_species {
            return Err(SynthError::Infeasible(format!(
                "orthogonal prototypes need feature_dim >= n_species ({} < {})",
                self.feature_dim, self.n_species
            )));
        }
        Ok(())
    }
}

/// One synthetic quadrat. Cell features are reproduced on demand from the
/// planted layout, the species prototypes and the quadrat's noise seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrat {
    pub quadrat_id: String,
    pub transect_id: String,
    pub grid_cells: u32,
    /// Planted species per cell, row-major.
    pub layout: Vec<usize>,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Quadrat {
    pub fn rect(&self) -> Rect {
        Rect {
            x0: 0,
            y0: 0,
            x1: self.grid_cells,
            y1: self.grid_cells,
        }
    }

    pub fn truth(&self) -> BTreeSet<usize> {
        self.layout.iter().copied().collect()
    }

    pub fn species_at(&self, x: u32, y: u32) -> usize {
        self.layout[(y * self.grid_cells + x) as usize]
    }

    /// Dense feature grid of the quadrat.
    pub fn cells(&self, prototypes: &Matrix) -> CellGrid {
        let dim = prototypes.cols;
        let mut data = Vec::with_capacity(self.layout.len() * dim);
        for &s in &self.layout {
            data.extend_from_slice(prototypes.row(s));
        }
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
            for x in &mut data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += self.noise_sigma * z;
            }
        }
        CellGrid {
            side: self.grid_cells,
            dim,
            data,
        }
    }

    pub fn tile_features(&self, prototypes: &Matrix, rect: Rect) -> Result<Vec<f64>, SynthError> {
        self.cells(prototypes).tile_features(rect)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    pub side: u32,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl CellGrid {
    pub fn cell(&self, x: u32, y: u32) -> &[f64] {
        let i = (y * self.side + x) as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Mean feature vector over the cells of `rect`.
    pub fn tile_features(&self, rect: Rect) -> Result<Vec<f64>, SynthError> {
        if rect.x1 > self.side || rect.y1 > self.side || rect.x0 >= rect.x1 || rect.y0 >= rect.y1 {
            return Err(SynthError::OutOfBounds {
                rect,
                side: self.side,
            });
        }
        let mut acc = vec![0.0; self.dim];
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                for (a, v) in acc.iter_mut().zip(self.cell(x, y)) {
                    *a += v;
                }
            }
        }
        let n = rect.area() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: SynthConfig,
    pub taxonomy: TaxonomyTable,
    /// Species prototypes, one row per species.
    pub prototypes: Matrix,
    pub quadrats: Vec<Quadrat>,
    pub heads: HeadRegistry,
}

impl World {
    pub fn quadrat(&self, id: &str) -> Option<&Quadrat> {
        self.quadrats.iter().find(|q| q.quadrat_id == id)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

/// Random surjection of `n` items onto `k` classes.
fn surjection(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = vec![0; n];
    for (rank, &item) in order.iter().enumerate() {
        out[item] = if rank < k {
            rank
        } else {
            rng.random_range(0..k)
        };
    }
    out
}

fn gen_taxonomy(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> TaxonomyTable {
    let s2g = surjection(rng, cfg.n_species, cfg.n_genera);
    let g2f = surjection(rng, cfg.n_genera, cfg.n_families);
    TaxonomyTable::from_dense(s2g, g2f, cfg.n_families).expect("surjections are total and in range")
}

fn gen_prototypes(cfg: &SynthConfig, tax: &TaxonomyTable, rng: &mut ChaCha8Rng) -> Matrix {
    let d = cfg.feature_dim;
    let mut m = Matrix::zeros(cfg.n_species, d);
    match cfg.prototypes {
        PrototypeKind::Orthogonal => {
            for s in 0..cfg.n_species {
                m.set(s, s, 1.0);
            }
        }
        PrototypeKind::Sphere => {
            let spread = cfg.taxon_spread;
            let families: Vec<Vec<f64>> =
                (0..cfg.n_families).map(|_| unit_vector(rng, d)).collect();
            let genera: Vec<Vec<f64>> = (0..cfg.n_genera)
                .map(|g| {
                    let f = &families[tax.family_of_genus(g).expect("dense genus")];
                    let u = unit_vector(rng, d);
                    normalized(f.iter().zip(&u).map(|(a, b)| a + spread * b).collect())
                })
                .collect();
            for s in 0..cfg.n_species {
                let g = &genera[tax.species_to_genus()[s]];
                let u = unit_vector(rng, d);
                let p = normalized(g.iter().zip(&u).map(|(a, b)| a + spread * b).collect());
                m.row_mut(s).copy_from_slice(&p);
            }
        }
    }
    m
}

/// Normalised mean prototype of each class under `class_of`.
fn centroids(prototypes: &Matrix, class_of: impl Fn(usize) -> usize, n_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(n_classes, prototypes.cols);
    for s in 0..prototypes.rows {
        let row = m.row_mut(class_of(s));
        for (a, b) in row.iter_mut().zip(prototypes.row(s)) {
            *a += b;
        }
    }
    for c in 0..n_classes {
        let v = normalized(m.row(c).to_vec());
        m.row_mut(c).copy_from_slice(&v);
    }
    m
}

/// `gain * (base + noise)`, where row `r` gets isotropic noise of expected
/// norm `jitter / sqrt(members[r])`.
fn jittered(
    base: &Matrix,
    members: &[usize],
    gain: f64,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let per_entry = jitter / (base.cols as f64).sqrt();
    let mut data = Vec::with_capacity(base.data.len());
    for (r, &n) in members.iter().enumerate().take(base.rows) {
        let sd = per_entry / (n.max(1) as f64).sqrt();
        for &w in base.row(r) {
            let z: f64 = StandardNormal.sample(&mut *rng);
            data.push(gain * (w + sd * z));
        }
    }
    Matrix {
        rows: base.rows,
        cols: base.cols,
        data,
    }
}

/// Two-layer head computing `weight · x` through a rectifier:
/// the hidden layer holds `relu(x)` and `relu(-x)`, the output layer
/// recombines them as `weight · relu(x) - weight · relu(-x)`.
fn rectified_pair(weight: Matrix) -> Head {
    let d = weight.cols;
    let mut hidden = Matrix::zeros(2 * d, d);
    for i in 0..d {
        hidden.set(i, i, 1.0);
        hidden.set(d + i, i, -1.0);
    }
    let mut output = Matrix::zeros(weight.rows, 2 * d);
    for r in 0..weight.rows {
        for c in 0..d {
            let w = weight.get(r, c);
            output.set(r, c, w);
            output.set(r, d + c, -w);
        }
    }
    Head::two_layer(hidden, output)
}

/// `linear` and `mlp` variants for every level.
fn gen_heads(
    cfg: &SynthConfig,
    tax: &TaxonomyTable,
    prototypes: &Matrix,
    rng: &mut ChaCha8Rng,
) -> HeadRegistry {
    let genus = centroids(prototypes, |s| tax.species_to_genus()[s], cfg.n_genera);
    let family = centroids(
        prototypes,
        |s| tax.genus_to_family()[tax.species_to_genus()[s]],
        cfg.n_families,
    );
    let mut genus_size = vec![0; cfg.n_genera];
    let mut family_size = vec![0; cfg.n_families];
    for s in 0..cfg.n_species {
        let g = tax.species_to_genus()[s];
        genus_size[g] += 1;
        family_size[tax.genus_to_family()[g]] += 1;
    }
    let species_size = vec![1; cfg.n_species];
    let mut reg = HeadRegistry::new(cfg.feature_dim);
    for (level, base, members) in [
        (Level::Species, prototypes, &species_size),
        (Level::Genus, &genus, &genus_size),
        (Level::Family, &family, &family_size),
    ] {
        let linear = jittered(base, members, cfg.logit_scale, cfg.head_jitter, rng);
        let mlp = jittered(base, members, cfg.logit_scale, cfg.head_jitter, rng);
        reg.insert(level, "linear", Head::linear(linear))
            .expect("dimensions match feature_dim");
        reg.insert(level, "mlp", rectified_pair(mlp))
            .expect("dimensions match feature_dim");
    }
    reg
}

/// Recursively split a `units`x`units` lattice into `k` rectangles.
fn split_patches(rng: &mut ChaCha8Rng, units: u32, k: usize) -> Vec<Rect> {
    let mut patches = vec![Rect {
        x0: 0,
        y0: 0,
        x1: units,
        y1: units,
    }];
    while patches.len() < k {
        let splittable: Vec<usize> = (0..patches.len())
            .filter(|&i| patches[i].area() > 1)
            .collect();
        let total: u64 = splittable.iter().map(|&i| patches[i].area()).sum();
        let mut pick = rng.random_range(0..total);
        let idx = *splittable
            .iter()
            .find(|&&i| {
                let a = patches[i].area();
                if pick < a {
                    true
                } else {
                    pick -= a;
                    false
                }
            })
            .expect("pick < total");
        let p = patches[idx];
        let vertical = match p.width().cmp(&p.height()) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => rng.random_bool(0.5),
        };
        let (a, b) = if vertical {
            let cut = p.x0 + rng.random_range(1..p.width());
            (Rect { x1: cut, ..p }, Rect { x0: cut, ..p })
        } else {
            let cut = p.y0 + rng.random_range(1..p.height());
            (Rect { y1: cut, ..p }, Rect { y0: cut, ..p })
        };
        patches[idx] = a;
        patches.push(b);
    }
    patches
}

fn gen_quadrat(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> Quadrat {
    let richness = rng.random_range(cfg.richness_min..=cfg.richness_max);
    let species = sample(rng, cfg.n_species, richness).into_vec();
    let units = cfg.grid_cells / cfg.patch_align;
    let patches = split_patches(rng, units, richness);
    let side = cfg.grid_cells;
    let mut layout = vec![0; (side * side) as usize];
    for (patch, &s) in patches.iter().zip(&species) {
        for uy in patch.y0..patch.y1 {
            for ux in patch.x0..patch.x1 {
                for y in uy * cfg.patch_align..(uy + 1) * cfg.patch_align {
                    for x in ux * cfg.patch_align..(ux + 1) * cfg.patch_align {
                        layout[(y * side + x) as usize] = s;
                    }
                }
            }
        }
    }
    Quadrat {
        quadrat_id: format!("Q{index:05}"),
        transect_id: format!("T{:04}", index / cfg.quadrats_per_transect),
        grid_cells: side,
        layout,
        noise_sigma: cfg.noise_sigma,
        noise_seed: rng.random(),
    }
}

/// Generate a complete world. A pure function of `cfg`.
///
/// The noise level does not consume randomness, so worlds that differ only
/// in `noise_sigma` share taxonomy, layouts and noise directions.
pub fn gen_world(cfg: &SynthConfig) -> Result<World, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let taxonomy = gen_taxonomy(cfg, &mut rng);
    let prototypes = gen_prototypes(cfg, &taxonomy, &mut rng);
    let heads = gen_heads(cfg, &taxonomy, &prototypes, &mut rng);
    let quadrats = (0..cfg.n_quadrats)
        .map(|i| gen_quadrat(cfg, i, &mut rng))
        .collect();
    Ok(World {
        config: cfg.clone(),
        taxonomy,
        prototypes,
        quadrats,
        heads,
    })
}
