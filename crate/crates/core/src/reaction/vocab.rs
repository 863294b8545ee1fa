use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{extract_labels, ReactionRecord, RetroLabels};
use crate::molgraph::{canonical_form, parse_smiles, BondOrder, MolGraph, SmilesError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GateError {
    #[error("leaving-group fragment {0} has no gate atom")]
    NoGate(usize),
    #[error("gate atom {0} must have exactly one neighbour")]
    BadGate(usize),
}

/// Canonical string for a leaving group plus, for each `*` in the string
/// (in order), the fragment and atom it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalLeavingGroup {
    pub smiles: String,
    pub gates: Vec<(usize, usize)>,
}

/// Serializes leaving-group fragments independently of atom and fragment
/// order. Multi-fragment groups are dot-joined in lexicographic order.
pub fn canonicalize_leaving_group(fragments: &[MolGraph]) -> Result<CanonicalLeavingGroup, GateError> {
    let mut parts = Vec::with_capacity(fragments.len());
    for (i, frag) in fragments.iter().enumerate() {
        if !frag.atoms().iter().any(|a| a.is_wildcard()) {
            return Err(GateError::NoGate(i));
        }
        let mut stripped = frag.clone();
        stripped.clear_atom_maps();
        let form = canonical_form(&stripped);
        let gates: Vec<usize> = form
            .order
            .iter()
            .copied()
            .filter(|&v| frag.atom(v).is_wildcard())
            .collect();
        parts.push((form.smiles, i, gates));
    }
    parts.sort_by(|a, b| a.0.cmp(&b.0));
    let smiles = parts.iter().map(|p| p.0.as_str()).collect::<Vec<_>>().join(".");
    let gates = parts
        .iter()
        .flat_map(|(_, frag, gates)| gates.iter().map(move |&v| (*frag, v)))
        .collect();
    Ok(CanonicalLeavingGroup { smiles, gates })
}

/// One leaving group. Gate `i` is the `i`-th `*` atom of `graph`.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub canonical: String,
    pub frequency: usize,
    pub graph: MolGraph,
    pub gates: Vec<usize>,
    pub gate_orders: Vec<BondOrder>,
}

impl VocabEntry {
    pub fn new(canonical: &str, frequency: usize) -> Result<Self, VocabError> {
        let graph = if canonical.is_empty() {
            MolGraph::new()
        } else {
            parse_smiles(canonical).map_err(|source| VocabError::Smiles {
                canonical: canonical.to_string(),
                source,
            })?
        };
        let gates: Vec<usize> = (0..graph.len()).filter(|&v| graph.atom(v).is_wildcard()).collect();
        let mut gate_orders = Vec::with_capacity(gates.len());
        for &g in &gates {
            match graph.neighbors(g) {
                [(_, b)] => gate_orders.push(graph.bonds()[*b].order),
                _ => return Err(VocabError::Gate(GateError::BadGate(g))),
            }
        }
        if !canonical.is_empty() && gates.is_empty() {
            return Err(VocabError::Gate(GateError::NoGate(0)));
        }
        Ok(VocabEntry {
            canonical: canonical.to_string(),
            frequency,
            graph,
            gates,
            gate_orders,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("leaving group '{canonical}': {source}")]
    Smiles { canonical: String, source: SmilesError },
    #[error(transparent)]
    Gate(#[from] GateError),
}

/// Leaving-group vocabulary; entry 0 is always the empty group.
#[derive(Debug, Clone, PartialEq)]
pub struct LeavingGroupVocab {
    entries: Vec<VocabEntry>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VocabStats {
    pub records: usize,
    pub labelled: usize,
    pub skipped: usize,
    /// Distinct non-empty leaving groups.
    pub distinct: usize,
}

impl VocabStats {
    /// Distinct leaving groups per labelled reaction.
    pub fn lg_ratio(&self) -> f64 {
        if self.labelled == 0 {
            0.0
        } else {
            self.distinct as f64 / self.labelled as f64
        }
    }
}

impl LeavingGroupVocab {
    /// Frequency-ordered vocabulary over the given labels (descending count,
    /// then lexicographic).
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a RetroLabels>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut empty = 0;
        for l in labels {
            if l.leaving_group.is_empty() {
                empty += 1;
            } else {
                *counts.entry(l.leaving_group.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut entries = vec![VocabEntry::new("", empty).expect("empty entry")];
        for (canonical, freq) in ranked {
            entries.push(VocabEntry::new(canonical, freq).expect("extracted leaving groups re-parse"));
        }
        Self::from_entries(entries).expect("unique by construction")
    }

    pub fn from_entries(entries: Vec<VocabEntry>) -> Result<Self, VocabError> {
        if entries.first().map(|e| !e.is_empty()).unwrap_or(true) {
            return Err(VocabError::Format {
                line: 1,
                message: "entry 0 must be the empty leaving group".into(),
            });
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.canonical.clone(), i).is_some() {
                return Err(VocabError::Format {
                    line: i + 1,
                    message: format!("duplicate entry '{}'", e.canonical),
                });
            }
        }
        Ok(LeavingGroupVocab { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> &VocabEntry {
        &self.entries[id]
    }

    pub fn index_of(&self, canonical: &str) -> Option<usize> {
        self.index.get(canonical).copied()
    }

    /// Most gates carried by any entry.
    pub fn max_gates(&self) -> usize {
        self.entries.iter().map(|e| e.gates.len()).max().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{}\t{}", e.frequency, e.canonical);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |message: String| VocabError::Format { line: n + 1, message };
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let idx: usize = fields[0].parse().map_err(|_| bad(format!("bad index '{}'", fields[0])))?;
            if idx != n {
                return Err(bad(format!("index {idx} out of sequence")));
            }
            let freq: usize = fields[1].parse().map_err(|_| bad(format!("bad frequency '{}'", fields[1])))?;
            entries.push(VocabEntry::new(fields[2], freq)?);
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Extracts labels for every record and builds the vocabulary; records whose
/// labels cannot be extracted are counted as skipped.
pub fn build_vocab(corpus: &[ReactionRecord], k: i8) -> (LeavingGroupVocab, VocabStats) {
    let mut labels = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for r in corpus {
        match extract_labels(r, k) {
            Ok(l) => labels.push(l),
            Err(e) => {
                log::debug!("skipping {}: {e}", r.id);
                skipped += 1;
            }
        }
    }
    let vocab = LeavingGroupVocab::from_labels(&labels);
    let stats = VocabStats {
        records: corpus.len(),
        labelled: labels.len(),
        skipped,
        distinct: vocab.len() - 1,
    };
    (vocab, stats)
}
