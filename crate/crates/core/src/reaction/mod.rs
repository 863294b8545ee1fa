//! Atom-mapped reaction records and the supervision derived from them.
//!
//! Labels are keyed by product atom-map numbers so that they survive atom
//! reordering. Leaving groups are represented by their canonical SMILES with
//! `*` gate atoms; gate indices follow the order in which the gates appear
//! in that string.

mod corpus;
mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::{AtomRecord, BondOrder, MolGraph};

pub use corpus::{load_corpus, parse_reaction, CorpusError, CorpusLoad, RowError, Split};
pub use vocab::{
    build_vocab, canonicalize_leaving_group, CanonicalLeavingGroup, GateError, LeavingGroupVocab,
    VocabEntry, VocabError, VocabStats,
};

/// Default bound on per-atom hydrogen change; gives 2k+1 = 9 classes.
pub const DEFAULT_MAX_H_CHANGE: i8 = 4;

/// Most leaving-group fragments a single record may carry.
pub const MAX_LG_FRAGMENTS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionRecord {
    pub id: String,
    pub class: Option<u8>,
    /// Main product, every atom mapped.
    pub product: MolGraph,
    pub reactants: Vec<MolGraph>,
}

/// What a reaction-center bond looks like on the reactant side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditKind {
    /// The bond does not exist in the reactants.
    Delete,
    /// The bond exists with this order in the reactants.
    Order(BondOrder),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BondEdit {
    /// Product atom-map numbers, `a < b`.
    pub a: u32,
    pub b: u32,
    pub kind: EditKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GateConnection {
    pub product_map: u32,
    /// Index among the `*` atoms of the leaving-group string.
    pub gate: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetroLabels {
    pub rc_bonds: Vec<BondEdit>,
    /// Reactant-side minus product-side hydrogen count for every product atom.
    pub h_delta: BTreeMap<u32, i8>,
    /// Canonical leaving group; empty when no atoms leave.
    pub leaving_group: String,
    pub gate_connections: Vec<GateConnection>,
}

impl RetroLabels {
    /// Vocabulary index of the leaving group, if it is known.
    pub fn lg_id(&self, vocab: &LeavingGroupVocab) -> Option<usize> {
        vocab.index_of(&self.leaving_group)
    }

    pub fn h_delta_of(&self, map: u32) -> i8 {
        self.h_delta.get(&map).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("product atom {0} has no atom-map number")]
    UnmappedProduct(usize),
    #[error("map number {0} appears in {1} reactant atoms")]
    SharedMap(u32, usize),
    #[error("map number {0} is missing from the reactants")]
    MissingMap(u32),
    #[error("hydrogen change {delta} on atom map {map} exceeds bound {bound}")]
    HydrogenRange { map: u32, delta: i32, bound: i8 },
    #[error("reactant bond {0}-{1} is absent from the product")]
    BondFormedOnRetro(u32, u32),
    #[error("formal charge of atom map {0} changes")]
    ChargeChange(u32),
    #[error("element of atom map {0} changes")]
    ElementChange(u32),
    #[error("{0} leaving-group fragments, at most {MAX_LG_FRAGMENTS} supported")]
    TooManyFragments(usize),
    #[error(transparent)]
    Gate(#[from] GateError),
}

/// Derives reaction-center, hydrogen and leaving-group supervision from a
/// mapped record.
pub fn extract_labels(r: &ReactionRecord, k: i8) -> Result<RetroLabels, LabelError> {
    let product = &r.product;
    let mut product_maps = HashMap::new();
    for (i, atom) in product.atoms().iter().enumerate() {
        let map = atom.atom_map.ok_or(LabelError::UnmappedProduct(i))?;
        product_maps.insert(map, i);
    }

    let mut reactants = MolGraph::new();
    for g in &r.reactants {
        reactants.append(g);
    }
    let mut located: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, atom) in reactants.atoms().iter().enumerate() {
        if let Some(map) = atom.atom_map {
            if product_maps.contains_key(&map) {
                located.entry(map).or_default().push(i);
            }
        }
    }
    let mut to_reactant = HashMap::new();
    for &map in product_maps.keys() {
        match located.get(&map).map(Vec::as_slice) {
            Some([single]) => {
                to_reactant.insert(map, *single);
            }
            Some(many) => return Err(LabelError::SharedMap(map, many.len())),
            None => return Err(LabelError::MissingMap(map)),
        }
    }
    let kept: HashSet<usize> = to_reactant.values().copied().collect();

    for (&map, &pv) in &product_maps {
        let ra = reactants.atom(to_reactant[&map]);
        let pa = product.atom(pv);
        if ra.element != pa.element {
            return Err(LabelError::ElementChange(map));
        }
        if ra.formal_charge != pa.formal_charge {
            return Err(LabelError::ChargeChange(map));
        }
    }

    let mut rc_bonds = Vec::new();
    for bond in product.bonds() {
        let (ma, mb) = map_pair(product, bond.a, bond.b);
        let kind = match reactants.bond_order(to_reactant[&ma], to_reactant[&mb]) {
            None => EditKind::Delete,
            Some(o) if o != bond.order => EditKind::Order(o),
            Some(_) => continue,
        };
        rc_bonds.push(BondEdit {
            a: ma,
            b: mb,
            kind,
        });
    }
    rc_bonds.sort_by_key(|e| (e.a, e.b));

    for bond in reactants.bonds() {
        if kept.contains(&bond.a) && kept.contains(&bond.b) {
            let (ma, mb) = map_pair(&reactants, bond.a, bond.b);
            if product.bond_between(product_maps[&ma], product_maps[&mb]).is_none() {
                return Err(LabelError::BondFormedOnRetro(ma, mb));
            }
        }
    }

    let mut h_delta = BTreeMap::new();
    for (&map, &pv) in &product_maps {
        let delta = reactants.atom(to_reactant[&map]).total_h() as i32
            - product.atom(pv).total_h() as i32;
        if delta.abs() > k as i32 {
            return Err(LabelError::HydrogenRange {
                map,
                delta,
                bound: k,
            });
        }
        h_delta.insert(map, delta as i8);
    }

    // Leaving-group atoms: everything outside the product that is bonded,
    // directly or through other leaving atoms, to a product atom. Components
    // without any such bond are reagents and are dropped.
    let (fragments, gate_targets) = leaving_fragments(&reactants, &kept);
    if fragments.len() > MAX_LG_FRAGMENTS {
        return Err(LabelError::TooManyFragments(fragments.len()));
    }
    let (leaving_group, gate_connections) = if fragments.is_empty() {
        (String::new(), Vec::new())
    } else {
        let canon = canonicalize_leaving_group(&fragments)?;
        let connections = canon
            .gates
            .iter()
            .enumerate()
            .map(|(gate, &(frag, atom))| {
                let (target, order) = gate_targets[frag][&atom];
                GateConnection {
                    product_map: reactants.atom(target).atom_map.expect("kept atoms are mapped"),
                    gate,
                    order,
                }
            })
            .collect();
        (canon.smiles, connections)
    };

    Ok(RetroLabels {
        rc_bonds,
        h_delta,
        leaving_group,
        gate_connections,
    })
}

fn map_pair(g: &MolGraph, a: usize, b: usize) -> (u32, u32) {
    let ma = g.atom(a).atom_map.expect("mapped");
    let mb = g.atom(b).atom_map.expect("mapped");
    (ma.min(mb), ma.max(mb))
}

type GateTargets = HashMap<usize, (usize, BondOrder)>;

/// Cuts the reactant graph between kept and leaving atoms. Each cut bond
/// becomes a `*` atom in the fragment; the second return value maps each
/// fragment's `*` atom to the kept reactant atom and cut bond order.
fn leaving_fragments(reactants: &MolGraph, kept: &HashSet<usize>) -> (Vec<MolGraph>, Vec<GateTargets>) {
    let mut fragments = Vec::new();
    let mut targets = Vec::new();
    let mut seen = vec![false; reactants.len()];
    for start in 0..reactants.len() {
        if seen[start] || kept.contains(&start) {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &(w, _) in reactants.neighbors(v) {
                if !seen[w] && !kept.contains(&w) {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        let (mut frag, index) = reactants.subgraph(&comp);
        let mut gates = HashMap::new();
        for &v in &comp {
            for &(w, b) in reactants.neighbors(v) {
                if kept.contains(&w) {
                    let order = reactants.bonds()[b].order;
                    let star = frag.add_atom(AtomRecord::wildcard());
                    frag.add_bond(index[v].expect("in fragment"), star, order);
                    gates.insert(star, (w, order));
                }
            }
        }
        if gates.is_empty() {
            continue;
        }
        for v in 0..frag.len() {
            let total = frag.atom(v).total_h();
            let atom = frag.atom_mut(v);
            atom.fix_hydrogens(total);
            atom.atom_map = None;
        }
        fragments.push(frag);
        targets.push(gates);
    }
    (fragments, targets)
}
