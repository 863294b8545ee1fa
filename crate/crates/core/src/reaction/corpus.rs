use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use super::ReactionRecord;
use crate::molgraph::{parse_smiles, MolGraph, SmilesError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed CSV in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// A corpus row that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RowError {
    #[error("row {row}: {message}")]
    Format { row: usize, message: String },
    #[error("row {row}: {message}")]
    Mapping { row: usize, message: String },
    #[error("row {row}: {source}")]
    Smiles { row: usize, source: SmilesError },
}

impl RowError {
    pub fn row(&self) -> usize {
        match self {
            RowError::Format { row, .. } | RowError::Mapping { row, .. } | RowError::Smiles { row, .. } => *row,
        }
    }

    fn with_row(self, row: usize) -> Self {
        match self {
            RowError::Format { message, .. } => RowError::Format { row, message },
            RowError::Mapping { message, .. } => RowError::Mapping { row, message },
            RowError::Smiles { source, .. } => RowError::Smiles { row, source },
        }
    }
}

#[derive(Debug, Default)]
pub struct CorpusLoad {
    pub records: Vec<ReactionRecord>,
    pub errors: Vec<RowError>,
}

/// Parses `reactants>>product` (or `reactants>reagents>product`; the middle
/// part is ignored). The largest product component is the main product.
pub fn parse_reaction(id: &str, class: Option<u8>, text: &str) -> Result<ReactionRecord, RowError> {
    let parts: Vec<&str> = text.trim().split('>').collect();
    if parts.len() != 3 {
        return Err(RowError::Format {
            row: 0,
            message: format!("expected 'reactants>>product', got '{text}'"),
        });
    }
    let smiles = |s: &str| parse_smiles(s).map_err(|source| RowError::Smiles { row: 0, source });
    let lhs = smiles(parts[0])?;
    let rhs = smiles(parts[2])?;
    let mut components = rhs.split_components();
    // Largest first; the earliest wins among equal sizes.
    components.sort_by_key(|g| std::cmp::Reverse(g.len()));
    let product = components
        .into_iter()
        .next()
        .ok_or_else(|| RowError::Format {
            row: 0,
            message: "empty product".into(),
        })?;
    if !product.is_fully_mapped() {
        return Err(RowError::Mapping {
            row: 0,
            message: "product atoms lack atom-map numbers".into(),
        });
    }
    let reactants: Vec<MolGraph> = lhs.split_components();
    if reactants.is_empty() {
        return Err(RowError::Format {
            row: 0,
            message: "no reactants".into(),
        });
    }
    Ok(ReactionRecord {
        id: id.to_string(),
        class,
        product,
        reactants,
    })
}

fn manifest_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    path.with_file_name(format!("{stem}.splits.csv"))
}

fn read_manifest(path: &Path) -> Result<Option<HashMap<String, Split>>, CorpusError> {
    let manifest = manifest_path(path);
    if !manifest.exists() {
        return Ok(None);
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(&manifest)
        .map_err(|source| CorpusError::Csv {
            path: manifest.clone(),
            source,
        })?;
    let mut out = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|source| CorpusError::Csv {
            path: manifest.clone(),
            source,
        })?;
        match (row.get(0), row.get(1).map(str::parse::<Split>)) {
            (Some(id), Some(Ok(split))) => {
                out.insert(id.trim().to_string(), split);
            }
            _ => log::warn!("{}: ignoring manifest row {:?}", manifest.display(), row),
        }
    }
    Ok(Some(out))
}

/// Loads the records of one split. Split membership comes from the adjacent
/// `<stem>.splits.csv` manifest; without one, every row is training data.
/// Malformed rows are collected in [`CorpusLoad::errors`] and skipped.
pub fn load_corpus(path: &Path, split: Split) -> Result<CorpusLoad, CorpusError> {
    let manifest = read_manifest(path)?;
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut load = CorpusLoad::default();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                load.errors.push(RowError::Format {
                    row: row_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let (Some(id), Some(class), Some(reaction)) = (row.get(0), row.get(1), row.get(2)) else {
            load.errors.push(RowError::Format {
                row: row_no,
                message: "expected columns id,class,reaction".into(),
            });
            continue;
        };
        let id = id.trim();
        let member = manifest
            .as_ref()
            .map_or(Split::Train, |m| m.get(id).copied().unwrap_or(Split::Train));
        if member != split {
            continue;
        }
        let class = match class.trim() {
            "" => None,
            c => match c.parse::<u8>() {
                Ok(v) if (1..=10).contains(&v) => Some(v),
                _ => {
                    load.errors.push(RowError::Format {
                        row: row_no,
                        message: format!("reaction class '{c}' outside 1..10"),
                    });
                    continue;
                }
            },
        };
        match parse_reaction(id, class, reaction) {
            Ok(r) => load.records.push(r),
            Err(e) => load.errors.push(e.with_row(row_no)),
        }
    }
    for e in &load.errors {
        log::warn!("{}: {e}", path.display());
    }
    Ok(load)
}
