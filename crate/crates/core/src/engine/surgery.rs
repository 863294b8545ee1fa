use std::collections::HashMap;

use thiserror::Error;

use crate::molgraph::{canonical_smiles, BondOrder, MolGraph};
use crate::reaction::{EditKind, RetroLabels, VocabEntry, VocabError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SurgeryError {
    #[error("gate {0} of the leaving group is not connected to the product")]
    DanglingGate(usize),
    #[error("gate {0} does not exist in the leaving group")]
    UnknownGate(usize),
    #[error("atom map {0} is not in the product")]
    UnknownMap(u32),
    #[error("atoms {0} and {1} are not bonded in the product")]
    MissingBond(usize, usize),
    #[error("atom {0} would get a negative hydrogen count")]
    NegativeHydrogen(usize),
    #[error("hydrogen deltas cover {got} atoms, product has {expected}")]
    HydrogenLength { expected: usize, got: usize },
    #[error("leaving group: {0}")]
    LeavingGroup(String),
}

/// Concrete edits on a product, indexed by product atom.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Edits {
    /// `(gate, product atom, bond order)`.
    pub connections: Vec<(usize, usize, BondOrder)>,
    /// `(atom, atom, reactant-side state)`.
    pub bond_edits: Vec<(usize, usize, EditKind)>,
    pub h_delta: Vec<i8>,
}

impl Edits {
    /// Translates map-keyed labels onto the product's atom indices.
    pub fn from_labels(product: &MolGraph, labels: &RetroLabels) -> Result<Edits, SurgeryError> {
        let index: HashMap<u32, usize> = product
            .atoms()
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.atom_map.map(|m| (m, i)))
            .collect();
        let at = |m: u32| index.get(&m).copied().ok_or(SurgeryError::UnknownMap(m));
        let mut h_delta = vec![0; product.len()];
        for (&m, &d) in &labels.h_delta {
            h_delta[at(m)?] = d;
        }
        let mut bond_edits = Vec::with_capacity(labels.rc_bonds.len());
        for e in &labels.rc_bonds {
            bond_edits.push((at(e.a)?, at(e.b)?, e.kind));
        }
        let mut connections = Vec::with_capacity(labels.gate_connections.len());
        for c in &labels.gate_connections {
            connections.push((c.gate, at(c.product_map)?, c.order));
        }
        Ok(Edits {
            connections,
            bond_edits,
            h_delta,
        })
    }
}

/// Reactant set produced by graph surgery.
#[derive(Debug, Clone, PartialEq)]
pub struct Surgery {
    /// Connected components sorted by canonical SMILES, atom maps removed.
    pub reactants: Vec<MolGraph>,
    pub smiles: Vec<String>,
    /// Every reactant passes the valence check.
    pub legal: bool,
}

impl Surgery {
    /// Dot-joined reactant set, the key used for de-duplication and ranking.
    pub fn key(&self) -> String {
        self.smiles.join(".")
    }
}

/// Attaches the leaving group, applies bond and hydrogen edits, and splits the
/// result into reactant molecules.
pub fn apply_edits(
    product: &MolGraph,
    leaving_group: Option<&VocabEntry>,
    edits: &Edits,
) -> Result<Surgery, SurgeryError> {
    let mut g = edited_graph(product, leaving_group, edits)?;
    g.clear_atom_maps();
    Ok(split_reactants(&g))
}

/// The edited graph before splitting: product atoms keep their indices and
/// leaving-group atoms follow them.
pub fn edited_graph(
    product: &MolGraph,
    leaving_group: Option<&VocabEntry>,
    edits: &Edits,
) -> Result<MolGraph, SurgeryError> {
    let n = product.len();
    if edits.h_delta.len() != n {
        return Err(SurgeryError::HydrogenLength {
            expected: n,
            got: edits.h_delta.len(),
        });
    }
    let mut g = product.clone();
    for v in 0..n {
        let total = g.atom(v).total_h() as i32 + edits.h_delta[v] as i32;
        if total < 0 {
            return Err(SurgeryError::NegativeHydrogen(v));
        }
        g.atom_mut(v).fix_hydrogens(total as u8);
    }

    if let Some(lg) = leaving_group.filter(|e| !e.is_empty()) {
        for &(gate, _, _) in &edits.connections {
            if gate >= lg.gates.len() {
                return Err(SurgeryError::UnknownGate(gate));
            }
        }
        let mut new_index = vec![usize::MAX; lg.graph.len()];
        for v in 0..lg.graph.len() {
            if !lg.graph.atom(v).is_wildcard() {
                let mut atom = lg.graph.atom(v).clone();
                atom.fix_hydrogens(atom.total_h());
                new_index[v] = g.add_atom(atom);
            }
        }
        for bond in lg.graph.bonds() {
            let (a, b) = (new_index[bond.a], new_index[bond.b]);
            if a != usize::MAX && b != usize::MAX {
                g.add_bond(a, b, bond.order);
            }
        }
        for (gate, &star) in lg.gates.iter().enumerate() {
            let Some(&(_, target, order)) = edits.connections.iter().find(|c| c.0 == gate) else {
                return Err(SurgeryError::DanglingGate(gate));
            };
            let [(inner, _)] = lg.graph.neighbors(star) else {
                return Err(SurgeryError::LeavingGroup(format!("gate {gate} is not singly bonded")));
            };
            let inner = new_index[*inner];
            if inner == usize::MAX {
                return Err(SurgeryError::LeavingGroup("gate bonded to gate".into()));
            }
            if g.add_bond(target, inner, order).is_none() {
                return Err(SurgeryError::LeavingGroup(format!("gate {gate} fuses onto an existing bond")));
            }
        }
    } else if let Some(&(gate, _, _)) = edits.connections.first() {
        return Err(SurgeryError::UnknownGate(gate));
    }

    for &(a, b, kind) in &edits.bond_edits {
        let ok = match kind {
            EditKind::Delete => g.remove_bond(a, b).is_some(),
            EditKind::Order(o) => g.set_bond_order(a, b, o),
        };
        if !ok {
            return Err(SurgeryError::MissingBond(a, b));
        }
    }
    g.refresh_aromatic_flags();
    Ok(g)
}

/// Splits an edited graph into reactants sorted by canonical SMILES.
pub fn split_reactants(g: &MolGraph) -> Surgery {
    let legal = g.is_valence_legal();
    let mut parts: Vec<(String, MolGraph)> = g
        .split_components()
        .into_iter()
        .map(|c| (canonical_smiles(&c), c))
        .collect();
    parts.sort_by(|a, b| a.0.cmp(&b.0));
    let (smiles, reactants) = parts.into_iter().unzip();
    Surgery {
        reactants,
        smiles,
        legal,
    }
}

/// Surgery driven by extracted labels; the leaving group is rebuilt from its
/// canonical string.
pub fn apply_labels(product: &MolGraph, labels: &RetroLabels) -> Result<Surgery, SurgeryError> {
    let entry = VocabEntry::new(&labels.leaving_group, 0).map_err(|e: VocabError| SurgeryError::LeavingGroup(e.to_string()))?;
    let edits = Edits::from_labels(product, labels)?;
    apply_edits(product, Some(&entry), &edits)
}

/// Canonical reactant-set key for a list of molecules (maps removed, sorted).
pub fn reactant_set_key(reactants: &[MolGraph]) -> String {
    let mut smiles: Vec<String> = reactants.iter().map(canonical_smiles).collect();
    smiles.sort();
    smiles.join(".")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;
    use crate::reaction::{extract_labels, parse_reaction};

    #[test]
    fn empty_edits_identity() {
        let p = parse_smiles("CC(=O)OC").unwrap();
        let s = apply_edits(&p, None, &Edits { h_delta: vec![0; 5], ..Default::default() }).unwrap();
        assert_eq!(s.smiles, vec![canonical_smiles(&p)]);
        assert!(s.legal);
    }

    #[test]
    fn esterification_inverse() {
        let r = parse_reaction(
            "1",
            Some(2),
            "[CH3:1][OH:2].[CH3:3][C:4](=[O:5])[OH:6]>>[CH3:3][C:4](=[O:5])[O:2][CH3:1]",
        )
        .unwrap();
        let labels = extract_labels(&r, 4).unwrap();
        let s = apply_labels(&r.product, &labels).unwrap();
        assert_eq!(s.key(), reactant_set_key(&r.reactants));
        assert!(s.legal);
    }

    #[test]
    fn delete_splits_chain() {
        let p = parse_smiles("CCCC").unwrap();
        let edits = Edits {
            bond_edits: vec![(1, 2, EditKind::Delete)],
            h_delta: vec![0, 1, 1, 0],
            ..Default::default()
        };
        let s = apply_edits(&p, None, &edits).unwrap();
        assert_eq!(s.smiles, vec!["CC", "CC"]);
        assert!(s.legal);
        let unrepaired = Edits {
            bond_edits: vec![(1, 2, EditKind::Delete)],
            h_delta: vec![0; 4],
            ..Default::default()
        };
        assert!(!apply_edits(&p, None, &unrepaired).unwrap().legal);
    }

    #[test]
    fn surgery_errors() {
        let p = parse_smiles("CO").unwrap();
        let lg = VocabEntry::new("*Cl", 1).unwrap();
        let dangling = Edits { h_delta: vec![0, 0], ..Default::default() };
        assert_eq!(apply_edits(&p, Some(&lg), &dangling), Err(SurgeryError::DanglingGate(0)));
        let negative = Edits { h_delta: vec![0, -2], ..Default::default() };
        assert_eq!(apply_edits(&p, None, &negative), Err(SurgeryError::NegativeHydrogen(1)));
        let missing = Edits {
            bond_edits: vec![(0, 0, EditKind::Delete)],
            h_delta: vec![0, 0],
            ..Default::default()
        };
        assert_eq!(apply_edits(&p, None, &missing), Err(SurgeryError::MissingBond(0, 0)));
    }
}
