//! Species → genus → family hierarchy.
//!
//! Identifiers in files are arbitrary nonnegative integers. At load time each
//! level is remapped onto a dense index range `0..n` in ascending label order,
//! so logit vectors can be indexed directly by the dense id. The original
//! labels are kept for writing results back out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const TAXONOMY_HEADER: &str = "species_id,genus_id,family_id";

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("species {species} listed with genus {first} and genus {second}")]
    SpeciesContradiction {
        species: u64,
        first: u64,
        second: u64,
    },
    #[error("genus {genus} listed with family {first} and family {second}")]
    GenusContradiction { genus: u64, first: u64, second: u64 },
    #[error("genus index {genus} has no family")]
    DanglingGenus { genus: usize },
    #[error("family index {family} out of range (n_families = {n_families})")]
    DanglingFamily { family: usize, n_families: usize },
    #[error("unknown species {0}")]
    UnknownSpecies(usize),
    #[error("unknown species label {0}")]
    UnknownSpeciesLabel(u64),
    #[error("taxonomy is empty")]
    Empty,
    #[error("reading {path}: {kind}")]
    Io {
        path: String,
        kind: std::io::ErrorKind,
    },
}

/// Validated, immutable taxonomy with dense per-level ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyTable {
    species_to_genus: Vec<usize>,
    genus_to_family: Vec<usize>,
    n_families: usize,
    species_labels: Vec<u64>,
    genus_labels: Vec<u64>,
    family_labels: Vec<u64>,
}

impl TaxonomyTable {
    /// Build from dense maps. Labels are the dense ids themselves.
    pub fn from_dense(
        species_to_genus: Vec<usize>,
        genus_to_family: Vec<usize>,
        n_families: usize,
    ) -> Result<Self, TaxonomyError> {
        if species_to_genus.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        if let Some(&g) = species_to_genus
            .iter()
            .find(|&&g| g >= genus_to_family.len())
        {
            return Err(TaxonomyError::DanglingGenus { genus: g });
        }
        if let Some(&f) = genus_to_family.iter().find(|&&f| f >= n_families) {
            return Err(TaxonomyError::DanglingFamily {
                family: f,
                n_families,
            });
        }
        Ok(Self {
            species_labels: (0..species_to_genus.len() as u64).collect(),
            genus_labels: (0..genus_to_family.len() as u64).collect(),
            family_labels: (0..n_families as u64).collect(),
            species_to_genus,
            genus_to_family,
            n_families,
        })
    }

    /// Build from labelled `(species, genus, family)` rows.
    ///
    /// Identical duplicate rows are accepted; a species with two genera or a
    /// genus with two families is rejected.
    pub fn from_rows<I>(rows: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = (u64, u64, u64)>,
    {
        let mut s2g: BTreeMap<u64, u64> = BTreeMap::new();
        let mut g2f: BTreeMap<u64, u64> = BTreeMap::new();
        for (s, g, f) in rows {
            if let Some(&prev) = s2g.get(&s) {
                if prev != g {
                    return Err(TaxonomyError::SpeciesContradiction {
                        species: s,
                        first: prev,
                        second: g,
                    });
                }
            }
            s2g.insert(s, g);
            if let Some(&prev) = g2f.get(&g) {
                if prev != f {
                    return Err(TaxonomyError::GenusContradiction {
                        genus: g,
                        first: prev,
                        second: f,
                    });
                }
            }
            g2f.insert(g, f);
        }
        if s2g.is_empty() {
            return Err(TaxonomyError::Empty);
        }

        let species_labels: Vec<u64> = s2g.keys().copied().collect();
        let genus_labels: Vec<u64> = g2f.keys().copied().collect();
        let mut family_labels: Vec<u64> = g2f.values().copied().collect();
        family_labels.sort_unstable();
        family_labels.dedup();

        let dense =
            |labels: &[u64], l: u64| labels.binary_search(&l).expect("label collected above");
        let species_to_genus = s2g.values().map(|&g| dense(&genus_labels, g)).collect();
        let genus_to_family = g2f.values().map(|&f| dense(&family_labels, f)).collect();

        Ok(Self {
            species_to_genus,
            genus_to_family,
            n_families: family_labels.len(),
            species_labels,
            genus_labels,
            family_labels,
        })
    }

    /// Parse the taxonomy CSV text (header `species_id,genus_id,family_id`).
    pub fn parse_csv(text: &str) -> Result<Self, TaxonomyError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == TAXONOMY_HEADER => {}
            Some((_, h)) => {
                return Err(TaxonomyError::Parse {
                    line: 1,
                    msg: format!("expected header `{TAXONOMY_HEADER}`, got `{h}`"),
                })
            }
            None => return Err(TaxonomyError::Empty),
        }
        let mut rows = Vec::new();
        for (i, raw) in lines {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(TaxonomyError::Parse {
                    line: i + 1,
                    msg: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let mut ids = [0u64; 3];
            for (slot, f) in ids.iter_mut().zip(&fields) {
                *slot = f.trim().parse().map_err(|_| TaxonomyError::Parse {
                    line: i + 1,
                    msg: format!("`{f}` is not a nonnegative integer"),
                })?;
            }
            rows.push((ids[0], ids[1], ids[2]));
        }
        Self::from_rows(rows)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(16 * self.n_species() + 32);
        out.push_str(TAXONOMY_HEADER);
        out.push('\n');
        for s in 0..self.n_species() {
            let g = self.species_to_genus[s];
            let f = self.genus_to_family[g];
            let _ = writeln!(
                out,
                "{},{},{}",
                self.species_labels[s], self.genus_labels[g], self.family_labels[f]
            );
        }
        out
    }

    pub fn n_species(&self) -> usize {
        self.species_to_genus.len()
    }

    pub fn n_genera(&self) -> usize {
        self.genus_to_family.len()
    }

    pub fn n_families(&self) -> usize {
        self.n_families
    }

    pub fn genus_of(&self, species: usize) -> Result<usize, TaxonomyError> {
        self.species_to_genus
            .get(species)
            .copied()
            .ok_or(TaxonomyError::UnknownSpecies(species))
    }

    pub fn family_of(&self, species: usize) -> Result<usize, TaxonomyError> {
        let g = self.genus_of(species)?;
        Ok(self.genus_to_family[g])
    }

    pub fn family_of_genus(&self, genus: usize) -> Option<usize> {
        self.genus_to_family.get(genus).copied()
    }

    /// Dense species → genus map, indexed by species id.
    pub fn species_to_genus(&self) -> &[usize] {
        &self.species_to_genus
    }

    /// Dense genus → family map, indexed by genus id.
    pub fn genus_to_family(&self) -> &[usize] {
        &self.genus_to_family
    }

    /// External label of a dense species id.
    pub fn species_label(&self, species: usize) -> Option<u64> {
        self.species_labels.get(species).copied()
    }

    /// Dense id of an external species label.
    pub fn species_index(&self, label: u64) -> Result<usize, TaxonomyError> {
        self.species_labels
            .binary_search(&label)
            .map_err(|_| TaxonomyError::UnknownSpeciesLabel(label))
    }
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<TaxonomyTable, TaxonomyError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| TaxonomyError::Io {
        path: path.display().to_string(),
        kind: e.kind(),
    })?;
    TaxonomyTable::parse_csv(&text)
}
