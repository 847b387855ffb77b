//! On-disk formats.
//!
//! All CSVs are UTF-8 with LF line endings and a header row, rows sorted by
//! id, and `;` separating list items inside a field. Writes go to a
//! temporary sibling file that is then renamed over the target.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::fusion::Level;
use crate::geometry::TileKey;
use crate::metric::{GroundTruthTable, MetricError, SpeciesLabel};
use crate::selection::PredictionSet;
use crate::taxonomy::{TaxonomyError, TaxonomyTable};

pub const GROUNDTRUTH_HEADER: &str = "quadrat_id,transect_id,species_ids";
pub const SUBMISSION_HEADER: &str = "quadrat_id,species_ids";
pub const CACHE_HEADER: &str = "model_id,quadrat_id,crop_pct,scale,row,col,level,values";
pub const QUADRATS_HEADER: &str = "quadrat_id,transect_id,grid_cells,noise_sigma,noise_seed,layout";
pub const PROTOTYPES_HEADER: &str = "species_id,values";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file}: quadrat {quadrat} appears more than once")]
    DuplicateQuadrat { file: String, quadrat: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

impl FormatError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|e| FormatError::io(path, e))
}

/// Write `contents` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), FormatError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| FormatError::io(path, e))
}

/// Decimal rendering rounded to 9 significant digits.
pub fn fmt_sig9(x: f64) -> String {
    let r = round_sig9(x);
    if r == 0.0 {
        return "0".into();
    }
    format!("{r}")
}

/// Round to 9 significant digits, the precision the logit cache stores.
pub fn round_sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn join_ids<T: ToString>(ids: impl IntoIterator<Item = T>) -> String {
    ids.into_iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

struct Lines<'a> {
    file: &'a str,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    /// Check the header and iterate the non-empty data rows.
    fn new(file: &'a str, text: &'a str, header: &str) -> Result<Self, FormatError> {
        let mut inner = text.lines().enumerate();
        match inner.next() {
            Some((_, h)) if h.trim_end_matches('\r') == header => Ok(Self { file, inner }),
            other => Err(FormatError::Parse {
                file: file.into(),
                line: 1,
                msg: format!(
                    "expected header `{header}`, got `{}`",
                    other.map_or("", |(_, h)| h)
                ),
            }),
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> FormatError {
        FormatError::Parse {
            file: self.file.into(),
            line,
            msg: msg.into(),
        }
    }
}

impl<'a> Iterator for Lines<'a> {
    type Item = (usize, Vec<&'a str>);

    fn next(&mut self) -> Option<Self::Item> {
        for (i, raw) in self.inner.by_ref() {
            let line = raw.trim_end_matches('\r');
            if !line.is_empty() {
                return Some((i + 1, line.split(',').collect()));
            }
        }
        None
    }
}

fn parse_field<T: std::str::FromStr>(
    lines: &Lines<'_>,
    line: usize,
    what: &str,
    s: &str,
) -> Result<T, FormatError> {
    s.trim()
        .parse()
        .map_err(|_| lines.err(line, format!("bad {what} `{s}`")))
}

fn parse_id_list(
    lines: &Lines<'_>,
    line: usize,
    s: &str,
) -> Result<Vec<SpeciesLabel>, FormatError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| parse_field(lines, line, "species id", x))
        .collect()
}

fn expect_fields(
    lines: &Lines<'_>,
    line: usize,
    fields: &[&str],
    n: usize,
) -> Result<(), FormatError> {
    if fields.len() != n {
        return Err(lines.err(line, format!("expected {n} fields, got {}", fields.len())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ground truth and submissions

pub fn write_groundtruth(gt: &GroundTruthTable) -> String {
    let mut out = format!("{GROUNDTRUTH_HEADER}\n");
    for (q, e) in gt.iter() {
        out.push_str(&format!("{q},{},{}\n", e.transect_id, join_ids(&e.species)));
    }
    out
}

pub fn parse_groundtruth(file: &str, text: &str) -> Result<GroundTruthTable, FormatError> {
    let lines = Lines::new(file, text, GROUNDTRUTH_HEADER)?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, f) in Lines::new(file, text, GROUNDTRUTH_HEADER)? {
        expect_fields(&lines, line, &f, 3)?;
        let q = f[0].trim().to_string();
        if !seen.insert(q.clone()) {
            return Err(FormatError::DuplicateQuadrat {
                file: file.into(),
                quadrat: q,
            });
        }
        let species: BTreeSet<SpeciesLabel> =
            parse_id_list(&lines, line, f[2])?.into_iter().collect();
        rows.push((q, f[1].trim().to_string(), species));
    }
    let mut gt = GroundTruthTable::new();
    for (q, t, s) in rows {
        gt.insert(q, t, s)?;
    }
    Ok(gt)
}

/// A parsed submission: quadrat id → species labels.
pub type Submission = BTreeMap<String, BTreeSet<SpeciesLabel>>;

/// Render predictions with external species labels.
pub fn write_submission(preds: &[PredictionSet], tax: &TaxonomyTable) -> String {
    let mut rows: Vec<(&str, BTreeSet<SpeciesLabel>)> = preds
        .iter()
        .map(|p| {
            let labels = p.species.iter().map(|&s| {
                tax.species_label(s)
                    .expect("prediction ids come from the taxonomy")
            });
            (p.quadrat_id.as_str(), labels.collect())
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = format!("{SUBMISSION_HEADER}\n");
    for (q, ids) in rows {
        out.push_str(&format!("{q},{}\n", join_ids(&ids)));
    }
    out
}

pub fn parse_submission(file: &str, text: &str) -> Result<Submission, FormatError> {
    let lines = Lines::new(file, text, SUBMISSION_HEADER)?;
    let mut out = Submission::new();
    for (line, f) in Lines::new(file, text, SUBMISSION_HEADER)? {
        expect_fields(&lines, line, &f, 2)?;
        let q = f[0].trim().to_string();
        let ids = parse_id_list(&lines, line, f[1])?;
        if out.insert(q.clone(), ids.into_iter().collect()).is_some() {
            return Err(FormatError::DuplicateQuadrat {
                file: file.into(),
                quadrat: q,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// logit cache

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub model_id: String,
    pub quadrat_id: String,
    /// Crop percentage as written in the file, e.g. `10` or `7.5`.
    pub crop_pct: String,
    pub tile: TileKey,
    pub level: Level,
}

pub fn crop_pct_key(pct: f64) -> String {
    format!("{pct}")
}

/// Cached per-tile head outputs, values rounded to 9 significant digits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitCache {
    entries: BTreeMap<CacheKey, Vec<f64>>,
}

impl LogitCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &CacheKey) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    /// Insert, rounding values to the stored precision. Later writes win.
    pub fn insert(&mut self, key: CacheKey, values: &[f64]) {
        self.entries
            .insert(key, values.iter().map(|&v| round_sig9(v)).collect());
    }

    pub fn extend(&mut self, other: LogitCache) {
        self.entries.extend(other.entries);
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CACHE_HEADER}\n");
        for (k, v) in &self.entries {
            let values: Vec<String> = v.iter().map(|&x| fmt_sig9(x)).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                k.model_id,
                k.quadrat_id,
                k.crop_pct,
                k.tile.scale,
                k.tile.row,
                k.tile.col,
                k.level,
                values.join(";")
            ));
        }
        out
    }

    pub fn parse_csv(file: &str, text: &str) -> Result<Self, FormatError> {
        let lines = Lines::new(file, text, CACHE_HEADER)?;
        let mut cache = LogitCache::new();
        for (line, f) in Lines::new(file, text, CACHE_HEADER)? {
            expect_fields(&lines, line, &f, 8)?;
            let pct: f64 = parse_field(&lines, line, "crop_pct", f[2])?;
            let key = CacheKey {
                model_id: f[0].to_string(),
                quadrat_id: f[1].to_string(),
                crop_pct: crop_pct_key(pct),
                tile: TileKey {
                    scale: parse_field(&lines, line, "scale", f[3])?,
                    row: parse_field(&lines, line, "row", f[4])?,
                    col: parse_field(&lines, line, "col", f[5])?,
                },
                level: parse_field(&lines, line, "level", f[6])?,
            };
            let values: Vec<f64> = f[7]
                .split(';')
                .map(|x| parse_field(&lines, line, "logit", x))
                .collect::<Result<_, _>>()?;
            cache.insert(key, &values);
        }
        Ok(cache)
    }

    pub fn quadrat_ids(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|k| k.quadrat_id.as_str()).collect()
    }
}

// ---------------------------------------------------------------------------
// flat key=value config files

/// Parsed `key=value` lines. `#` starts a comment; blank lines are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    file: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(file: &str, text: &str) -> Result<Self, FormatError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| FormatError::Parse {
                file: file.into(),
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let key = k.trim().to_string();
            if entries
                .insert(key.clone(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(FormatError::Parse {
                    file: file.into(),
                    line: i + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self {
            file: file.into(),
            entries,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (0, value.into()));
    }

    /// Remove and parse `key`.
    pub fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, FormatError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| FormatError::Parse {
                file: self.file.clone(),
                line,
                msg: format!("bad value `{v}` for `{key}`"),
            }),
        }
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    /// Remove and parse a comma-separated list.
    pub fn take_list<T: std::str::FromStr>(
        &mut self,
        key: &str,
    ) -> Result<Option<Vec<T>>, FormatError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|x| {
                    x.trim().parse().map_err(|_| FormatError::Parse {
                        file: self.file.clone(),
                        line,
                        msg: format!("bad list item `{x}` for `{key}`"),
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    /// Fail if any key was not consumed.
    pub fn finish(self) -> Result<(), FormatError> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(FormatError::Parse {
                file: self.file,
                line,
                msg: format!("unknown key `{k}`"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[u64]) -> BTreeSet<u64> {
        v.iter().copied().collect()
    }

    #[test]
    fn groundtruth_round_trip() {
        let text = "quadrat_id,transect_id,species_ids\nQ1,T1,3;7\nQ2,T1,1\n";
        let gt = parse_groundtruth("gt", text).unwrap();
        assert_eq!(gt.get("Q1").unwrap().species, set(&[3, 7]));
        assert_eq!(write_groundtruth(&gt), text);
    }

    #[test]
    fn groundtruth_errors() {
        let dup = "quadrat_id,transect_id,species_ids\nQ1,T1,3\nQ1,T1,4\n";
        assert!(matches!(
            parse_groundtruth("gt", dup),
            Err(FormatError::DuplicateQuadrat { .. })
        ));
        let empty = "quadrat_id,transect_id,species_ids\nQ1,T1,\n";
        assert!(matches!(
            parse_groundtruth("gt", empty),
            Err(FormatError::Metric(MetricError::EmptyTruth(_)))
        ));
        assert!(matches!(
            parse_groundtruth("gt", "wrong\n"),
            Err(FormatError::Parse { line: 1, .. })
        ));
        let bad = "quadrat_id,transect_id,species_ids\nQ1,T1,x\n";
        assert!(matches!(
            parse_groundtruth("gt", bad),
            Err(FormatError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn submission_is_sorted_with_labels() {
        let tax =
            TaxonomyTable::parse_csv("species_id,genus_id,family_id\n10,1,1\n20,1,1\n30,2,1\n")
                .unwrap();
        let preds = vec![
            PredictionSet {
                quadrat_id: "b".into(),
                species: [2, 0].into(),
            },
            PredictionSet {
                quadrat_id: "a".into(),
                species: [1].into(),
            },
        ];
        let text = write_submission(&preds, &tax);
        assert_eq!(text, "quadrat_id,species_ids\na,20\nb,10;30\n");
        let parsed = parse_submission("s", &text).unwrap();
        assert_eq!(parsed["b"], set(&[10, 30]));
        let dup = "quadrat_id,species_ids\na,1\na,2\n";
        assert!(matches!(
            parse_submission("s", dup),
            Err(FormatError::DuplicateQuadrat { .. })
        ));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(-0.0), "0");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(-12345.678901234), "-12345.6789");
        assert_eq!(fmt_sig9(2.5e-7), "0.00000025");
    }

    #[test]
    fn cache_round_trip() {
        let mut cache = LogitCache::new();
        let key = |level| CacheKey {
            model_id: "linear/mlp/mlp".into(),
            quadrat_id: "Q00001".into(),
            crop_pct: crop_pct_key(10.0),
            tile: TileKey::new(4, 1, 2),
            level,
        };
        cache.insert(key(Level::Species), &[1.0 / 3.0, -2.0, 7.25e3]);
        cache.insert(key(Level::Genus), &[0.1]);
        let text = cache.to_csv();
        assert!(text.starts_with(CACHE_HEADER));
        assert!(text.contains("linear/mlp/mlp,Q00001,10,4,1,2,species,0.333333333;-2;7250\n"));
        let back = LogitCache::parse_csv("cache", &text).unwrap();
        assert_eq!(back, cache);
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn key_values() {
        let mut kv = KeyValues::parse(
            "c",
            "# comment\nscales = 4,5\nchannel=fused # trailing\n\nmax_len=9\n",
        )
        .unwrap();
        assert_eq!(kv.take_list::<u32>("scales").unwrap(), Some(vec![4, 5]));
        assert_eq!(kv.take_raw("channel").as_deref(), Some("fused"));
        assert_eq!(kv.take::<u32>("missing").unwrap(), None);
        assert!(kv.clone().finish().is_err());
        assert_eq!(kv.take::<usize>("max_len").unwrap(), Some(9));
        assert!(kv.finish().is_ok());
        assert!(KeyValues::parse("c", "a=1\na=2\n").is_err());
        assert!(KeyValues::parse("c", "novalue\n").is_err());
        let mut kv = KeyValues::parse("c", "n=abc\n").unwrap();
        assert!(kv.take::<u32>("n").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        write_atomic(&p, b"one\n").unwrap();
        write_atomic(&p, b"two\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two\n");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn sig9_is_stable(x in -1e12f64..1e12) {
            let once = round_sig9(x);
            prop_assert_eq!(round_sig9(once), once);
            let printed: f64 = fmt_sig9(x).parse().unwrap();
            prop_assert_eq!(printed, once);
            if x != 0.0 {
                prop_assert!(((once - x) / x).abs() <= 5e-9);
            }
        }
    }
}
