//! Synthetic world directories.
//!
//! ```text
//! world.conf       generation config (key=value)
//! taxonomy.csv     species_id,genus_id,family_id
//! groundtruth.csv  quadrat_id,transect_id,species_ids
//! quadrats.csv     quadrat_id,transect_id,grid_cells,noise_sigma,noise_seed,layout
//! prototypes.csv   species_id,values
//! heads.json       head registry
//! ```
//!
//! `layout` lists the planted species label of every cell, row-major. Cell
//! features are rebuilt from the layout, the prototypes and the noise seed,
//! so a loaded world is identical to the generated one.

use std::path::Path;

use crate::config::{parse_synth_config, synth_config_to_string};
use crate::formats::{
    read_text, write_atomic, write_groundtruth, FormatError, PROTOTYPES_HEADER, QUADRATS_HEADER,
};
use crate::heads::{HeadRegistry, Matrix};
use crate::metric::GroundTruthTable;
use crate::synthworld::{Quadrat, World};
use crate::taxonomy::{load_taxonomy, TaxonomyTable};
use crate::{Error, Result};

pub const WORLD_CONF: &str = "world.conf";
pub const TAXONOMY_CSV: &str = "taxonomy.csv";
pub const GROUNDTRUTH_CSV: &str = "groundtruth.csv";
pub const QUADRATS_CSV: &str = "quadrats.csv";
pub const PROTOTYPES_CSV: &str = "prototypes.csv";
pub const HEADS_JSON: &str = "heads.json";

pub fn ground_truth(world: &World) -> GroundTruthTable {
    let mut gt = GroundTruthTable::new();
    for q in &world.quadrats {
        let labels = q.truth().into_iter().map(|s| {
            world
                .taxonomy
                .species_label(s)
                .expect("planted species exist")
        });
        gt.insert(
            q.quadrat_id.clone(),
            q.transect_id.clone(),
            labels.collect(),
        )
        .expect("generated quadrats are unique and non-empty");
    }
    gt
}

fn quadrats_csv(world: &World) -> String {
    let mut out = format!("{QUADRATS_HEADER}\n");
    for q in &world.quadrats {
        let layout: Vec<String> = q
            .layout
            .iter()
            .map(|&s| {
                world
                    .taxonomy
                    .species_label(s)
                    .expect("planted")
                    .to_string()
            })
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            q.quadrat_id,
            q.transect_id,
            q.grid_cells,
            q.noise_sigma,
            q.noise_seed,
            layout.join(";")
        ));
    }
    out
}

fn prototypes_csv(world: &World) -> String {
    let mut out = format!("{PROTOTYPES_HEADER}\n");
    for s in 0..world.prototypes.rows {
        let values: Vec<String> = world
            .prototypes
            .row(s)
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        out.push_str(&format!(
            "{},{}\n",
            world.taxonomy.species_label(s).expect("dense"),
            values.join(";")
        ));
    }
    out
}

pub fn save_world(world: &World, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    write_atomic(
        &dir.join(WORLD_CONF),
        synth_config_to_string(&world.config).as_bytes(),
    )?;
    write_atomic(&dir.join(TAXONOMY_CSV), world.taxonomy.to_csv().as_bytes())?;
    write_atomic(
        &dir.join(GROUNDTRUTH_CSV),
        write_groundtruth(&ground_truth(world)).as_bytes(),
    )?;
    write_atomic(&dir.join(QUADRATS_CSV), quadrats_csv(world).as_bytes())?;
    write_atomic(&dir.join(PROTOTYPES_CSV), prototypes_csv(world).as_bytes())?;
    let heads = serde_json::to_vec(&world.heads)
        .map_err(|e| Error::Config(format!("serialising heads: {e}")))?;
    write_atomic(&dir.join(HEADS_JSON), &heads)?;
    Ok(())
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    FormatError::Parse {
        file: file.into(),
        line,
        msg: msg.into(),
    }
    .into()
}

fn data_rows<'a>(
    file: &'a str,
    text: &'a str,
    header: &str,
) -> Result<impl Iterator<Item = (usize, &'a str)> + 'a> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == header => {}
        _ => return Err(parse_err(file, 1, format!("expected header `{header}`"))),
    }
    Ok(lines
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.is_empty()))
}

fn field<T: std::str::FromStr>(file: &str, line: usize, what: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(file, line, format!("bad {what} `{s}`")))
}

fn load_prototypes(path: &Path, tax: &TaxonomyTable, dim: usize) -> Result<Matrix> {
    let file = path.display().to_string();
    let text = read_text(path)?;
    let mut m = Matrix::zeros(tax.n_species(), dim);
    let mut seen = vec![false; tax.n_species()];
    for (line, row) in data_rows(&file, &text, PROTOTYPES_HEADER)? {
        let (label, values) = row
            .split_once(',')
            .ok_or_else(|| parse_err(&file, line, "expected 2 fields"))?;
        let s = tax.species_index(field(&file, line, "species id", label)?)?;
        let v: Vec<f64> = values
            .split(';')
            .map(|x| field(&file, line, "value", x))
            .collect::<Result<_>>()?;
        if v.len() != dim {
            return Err(parse_err(
                &file,
                line,
                format!("expected {dim} values, got {}", v.len()),
            ));
        }
        m.row_mut(s).copy_from_slice(&v);
        seen[s] = true;
    }
    if let Some(s) = seen.iter().position(|&b| !b) {
        return Err(parse_err(
            &file,
            0,
            format!(
                "no prototype for species {}",
                tax.species_label(s).unwrap_or_default()
            ),
        ));
    }
    Ok(m)
}

fn load_quadrats(path: &Path, tax: &TaxonomyTable) -> Result<Vec<Quadrat>> {
    let file = path.display().to_string();
    let text = read_text(path)?;
    let mut out: Vec<Quadrat> = Vec::new();
    for (line, row) in data_rows(&file, &text, QUADRATS_HEADER)? {
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(
                &file,
                line,
                format!("expected 6 fields, got {}", f.len()),
            ));
        }
        let grid_cells: u32 = field(&file, line, "grid_cells", f[2])?;
        let layout: Vec<usize> = f[5]
            .split(';')
            .map(|x| Ok(tax.species_index(field(&file, line, "species id", x)?)?))
            .collect::<Result<_>>()?;
        if layout.len() != (grid_cells * grid_cells) as usize {
            return Err(parse_err(
                &file,
                line,
                format!(
                    "layout has {} cells, expected {}",
                    layout.len(),
                    grid_cells * grid_cells
                ),
            ));
        }
        if out.iter().any(|q| q.quadrat_id == f[0]) {
            return Err(FormatError::DuplicateQuadrat {
                file: file.clone(),
                quadrat: f[0].to_string(),
            }
            .into());
        }
        out.push(Quadrat {
            quadrat_id: f[0].to_string(),
            transect_id: f[1].to_string(),
            grid_cells,
            layout,
            noise_sigma: field(&file, line, "noise_sigma", f[3])?,
            noise_seed: field(&file, line, "noise_seed", f[4])?,
        });
    }
    Ok(out)
}

pub fn load_world(dir: &Path) -> Result<World> {
    let conf_path = dir.join(WORLD_CONF);
    let config = parse_synth_config(&conf_path.display().to_string(), &read_text(&conf_path)?)?;
    let taxonomy = load_taxonomy(dir.join(TAXONOMY_CSV))?;
    let heads_path = dir.join(HEADS_JSON);
    let heads: HeadRegistry = serde_json::from_str(&read_text(&heads_path)?)
        .map_err(|e| parse_err(&heads_path.display().to_string(), e.line(), e.to_string()))?;
    heads.validate()?;
    let prototypes = load_prototypes(&dir.join(PROTOTYPES_CSV), &taxonomy, heads.feature_dim)?;
    let quadrats = load_quadrats(&dir.join(QUADRATS_CSV), &taxonomy)?;
    Ok(World {
        config,
        taxonomy,
        prototypes,
        quadrats,
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{gen_world, SynthConfig};

    #[test]
    fn saved_world_loads_identically() {
        let w = gen_world(&SynthConfig {
            n_quadrats: 6,
            noise_sigma: 0.37,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_world(&w, dir.path()).unwrap();
        let back = load_world(dir.path()).unwrap();
        assert_eq!(back, w);
        let q = &w.quadrats[2];
        assert_eq!(
            q.cells(&w.prototypes),
            back.quadrats[2].cells(&back.prototypes)
        );
    }

    #[test]
    fn ground_truth_matches_planted_species() {
        let w = gen_world(&SynthConfig {
            n_quadrats: 6,
            ..Default::default()
        })
        .unwrap();
        let gt = ground_truth(&w);
        assert_eq!(gt.len(), 6);
        let q = &w.quadrats[1];
        let labels: std::collections::BTreeSet<u64> =
            q.truth().into_iter().map(|s| s as u64).collect();
        assert_eq!(gt.get(&q.quadrat_id).unwrap().species, labels);
    }

    #[test]
    fn corrupt_files_are_reported() {
        let w = gen_world(&SynthConfig {
            n_quadrats: 2,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_world(&w, dir.path()).unwrap();
        std::fs::write(
            dir.path().join(QUADRATS_CSV),
            format!("{QUADRATS_HEADER}\nQ1,T1,2,0,0,1;2;3\n"),
        )
        .unwrap();
        assert!(matches!(
            load_world(dir.path()),
            Err(Error::Format(FormatError::Parse { .. }))
        ));
        std::fs::remove_file(dir.path().join(HEADS_JSON)).unwrap();
        assert!(matches!(
            load_world(dir.path()),
            Err(Error::Format(FormatError::Io { .. }))
        ));
    }
}
