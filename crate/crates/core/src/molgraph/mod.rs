//! Attributed molecular graphs.
//!
//! A [`MolGraph`] is an ordered list of atoms plus an undirected bond list.
//! Hydrogens are carried as counts on heavy atoms. The structural matrices the
//! encoder consumes (bond senses, walk counts, topological distances) are
//! derived on demand in [`structure`].

mod canon;
mod parse;
pub mod structure;

use std::fmt;

pub use canon::{canonical_form, canonical_smiles, write_smiles, CanonicalForm};
pub use parse::{parse_smiles, parse_smiles_with_warnings, ParseWarning};
pub use structure::{
    adjacency_powers, topo_distances, BondSense, DistanceProvider, SenseHopCounts, SquareMatrix,
    TopologicalDistance, BOND_SENSES, D_INF,
};

use thiserror::Error;

/// Errors raised while reading SMILES text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("valence error at offset {offset}: {message}")]
    Valence { offset: usize, message: String },
}

impl SmilesError {
    pub fn offset(&self) -> usize {
        match self {
            SmilesError::Syntax { offset, .. } | SmilesError::Valence { offset, .. } => *offset,
        }
    }
}

const SYMBOLS: [&str; 87] = [
    "*", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S",
    "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge",
    "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd",
    "In", "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd",
    "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn",
];

/// Chemical element identified by atomic number; number 0 is the `*` wildcard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Element(u8);

impl Element {
    pub const WILDCARD: Element = Element(0);
    pub const H: Element = Element(1);
    pub const B: Element = Element(5);
    pub const C: Element = Element(6);
    pub const N: Element = Element(7);
    pub const O: Element = Element(8);
    pub const F: Element = Element(9);
    pub const P: Element = Element(15);
    pub const S: Element = Element(16);
    pub const CL: Element = Element(17);
    pub const BR: Element = Element(35);
    pub const I: Element = Element(53);

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        ((z as usize) < SYMBOLS.len()).then_some(Element(z))
    }

    pub fn from_symbol(symbol: &str) -> Option<Element> {
        SYMBOLS.iter().position(|s| *s == symbol).map(|z| Element(z as u8))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn symbol(self) -> &'static str {
        SYMBOLS[self.0 as usize]
    }

    pub fn is_wildcard(self) -> bool {
        self.0 == 0
    }

    /// Members of the SMILES organic subset, writable without brackets.
    pub fn is_organic_subset(self) -> bool {
        matches!(self.0, 5 | 6 | 7 | 8 | 9 | 15 | 16 | 17 | 35 | 53)
    }

    /// Elements that may be written as lowercase aromatic atoms outside brackets.
    pub fn is_aromatic_organic(self) -> bool {
        matches!(self.0, 5 | 6 | 7 | 8 | 15 | 16)
    }

    fn neutral_valences(z: u8) -> Option<&'static [u8]> {
        Some(match z {
            1 => &[1],
            2 | 10 | 18 | 36 | 54 => &[0],
            5 => &[3],
            6 | 14 | 32 => &[4],
            7 | 15 | 33 | 51 => &[3, 5],
            8 => &[2],
            9 | 17 | 35 | 53 => &[1],
            16 | 34 | 52 => &[2, 4, 6],
            _ => return None,
        })
    }

    /// Allowed valences under a formal charge, or `None` when the element is
    /// unconstrained (metals and anything outside the fixed table).
    ///
    /// A charged atom takes the valences of its isoelectronic neutral
    /// neighbour in the table (N+ behaves like C, O- like F).
    pub fn allowed_valences(self, charge: i8) -> Option<&'static [u8]> {
        let base = Self::neutral_valences(self.0)?;
        if charge == 0 {
            return Some(base);
        }
        if self.0 == 1 {
            return Some(&[0]);
        }
        let shifted = self.0 as i16 - charge as i16;
        if shifted <= 0 {
            return Some(&[0]);
        }
        Self::neutral_valences(shifted as u8).or(Some(base))
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Bond multiplicity. Aromatic bonds count 1.5 in valence arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn value(self) -> f64 {
        match self {
            BondOrder::Single => 1.0,
            BondOrder::Double => 2.0,
            BondOrder::Triple => 3.0,
            BondOrder::Aromatic => 1.5,
        }
    }

    /// Valence units in doubled form so aromatic bonds stay integral.
    pub(crate) fn twice(self) -> u32 {
        match self {
            BondOrder::Single => 2,
            BondOrder::Double => 4,
            BondOrder::Triple => 6,
            BondOrder::Aromatic => 3,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<BondOrder> {
        Some(match code {
            1 => BondOrder::Single,
            2 => BondOrder::Double,
            3 => BondOrder::Triple,
            4 => BondOrder::Aromatic,
            _ => return None,
        })
    }

    pub fn from_value(value: f64) -> Option<BondOrder> {
        [BondOrder::Single, BondOrder::Double, BondOrder::Triple, BondOrder::Aromatic]
            .into_iter()
            .find(|o| (o.value() - value).abs() < 1e-9)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AtomRecord {
    pub element: Element,
    pub formal_charge: i8,
    /// Hydrogens stated explicitly (bracket atoms, or fixed by graph surgery).
    pub explicit_h: u8,
    /// Hydrogens implied by the valence model for organic-subset atoms.
    pub implicit_h: u8,
    pub aromatic: bool,
    pub atom_map: Option<u32>,
    pub isotope: Option<u16>,
}

impl AtomRecord {
    pub fn new(element: Element) -> Self {
        AtomRecord {
            element,
            formal_charge: 0,
            explicit_h: 0,
            implicit_h: 0,
            aromatic: false,
            atom_map: None,
            isotope: None,
        }
    }

    pub fn wildcard() -> Self {
        Self::new(Element::WILDCARD)
    }

    pub fn is_wildcard(&self) -> bool {
        self.element.is_wildcard()
    }

    pub fn total_h(&self) -> u8 {
        self.explicit_h + self.implicit_h
    }

    /// Collapse implicit hydrogens into the explicit count.
    pub fn fix_hydrogens(&mut self, total: u8) {
        self.explicit_h = total;
        self.implicit_h = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, v: usize) -> usize {
        if self.a == v {
            self.b
        } else {
            self.a
        }
    }
}

/// Valence bookkeeping for one atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValenceState {
    /// Sum of bond orders in doubled units.
    pub bond_sum_x2: u32,
    pub hydrogens: u8,
    pub legal: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MolGraph {
    atoms: Vec<AtomRecord>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[AtomRecord] {
        &self.atoms
    }

    pub fn atom(&self, idx: usize) -> &AtomRecord {
        &self.atoms[idx]
    }

    pub fn atom_mut(&mut self, idx: usize) -> &mut AtomRecord {
        &mut self.atoms[idx]
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn add_atom(&mut self, atom: AtomRecord) -> usize {
        self.atoms.push(atom);
        self.adjacency.push(Vec::new());
        self.atoms.len() - 1
    }

    /// Adds a bond; returns `None` for self-loops or duplicates.
    pub fn add_bond(&mut self, a: usize, b: usize, order: BondOrder) -> Option<usize> {
        if a == b || self.bond_between(a, b).is_some() {
            return None;
        }
        let idx = self.bonds.len();
        self.bonds.push(Bond { a, b, order });
        self.adjacency[a].push((b, idx));
        self.adjacency[b].push((a, idx));
        Some(idx)
    }

    pub fn remove_bond(&mut self, a: usize, b: usize) -> Option<Bond> {
        let idx = self.bond_between(a, b)?;
        let removed = self.bonds.remove(idx);
        self.rebuild_adjacency();
        Some(removed)
    }

    pub fn set_bond_order(&mut self, a: usize, b: usize, order: BondOrder) -> bool {
        match self.bond_between(a, b) {
            Some(idx) => {
                self.bonds[idx].order = order;
                true
            }
            None => false,
        }
    }

    fn rebuild_adjacency(&mut self) {
        self.adjacency = vec![Vec::new(); self.atoms.len()];
        for (idx, bond) in self.bonds.iter().enumerate() {
            self.adjacency[bond.a].push((bond.b, idx));
            self.adjacency[bond.b].push((bond.a, idx));
        }
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|(nb, _)| *nb == b)
            .map(|(_, idx)| *idx)
    }

    pub fn bond_order(&self, a: usize, b: usize) -> Option<BondOrder> {
        self.bond_between(a, b).map(|idx| self.bonds[idx].order)
    }

    /// `(neighbor, bond index)` pairs of atom `v`.
    pub fn neighbors(&self, v: usize) -> &[(usize, usize)] {
        &self.adjacency[v]
    }

    pub fn heavy_degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    /// Neighbour count plus all hydrogens.
    pub fn total_degree(&self, v: usize) -> usize {
        self.adjacency[v].len() + self.atoms[v].total_h() as usize
    }

    pub fn bond_order_sum_x2(&self, v: usize) -> u32 {
        self.adjacency[v]
            .iter()
            .map(|(_, b)| self.bonds[*b].order.twice())
            .sum()
    }

    /// Dense `N×N` matrix of bond orders (0 for non-bonded pairs).
    pub fn bond_order_matrix(&self) -> SquareMatrix<f64> {
        let mut m = SquareMatrix::filled(self.len(), 0.0);
        for bond in &self.bonds {
            m.set(bond.a, bond.b, bond.order.value());
            m.set(bond.b, bond.a, bond.order.value());
        }
        m
    }

    /// Implicit hydrogens an organic-subset atom would receive from the
    /// valence model, or `None` when no allowed valence fits.
    pub fn default_implicit_h(&self, v: usize) -> Option<u8> {
        let atom = &self.atoms[v];
        if atom.element.is_wildcard() {
            return Some(0);
        }
        let allowed = atom.element.allowed_valences(atom.formal_charge)?;
        let sum2 = self.bond_order_sum_x2(v);
        if atom.aromatic {
            let used = sum2 / 2;
            let lowest = allowed.iter().copied().min().unwrap_or(0) as u32;
            return Some(lowest.saturating_sub(used) as u8);
        }
        let used = sum2.div_ceil(2);
        allowed
            .iter()
            .map(|v| *v as u32)
            .find(|v| *v >= used)
            .map(|v| (v - used) as u8)
    }

    pub fn valence_state(&self, v: usize) -> ValenceState {
        let atom = &self.atoms[v];
        let sum2 = self.bond_order_sum_x2(v);
        let hydrogens = atom.total_h();
        let legal = match atom.element.allowed_valences(atom.formal_charge) {
            None => true,
            Some(_) if atom.element.is_wildcard() => true,
            Some(allowed) => {
                if atom.aromatic {
                    let total = sum2 / 2 + hydrogens as u32;
                    allowed
                        .iter()
                        .any(|a| *a as u32 == total || *a as u32 + 1 == total)
                } else {
                    let total = sum2.div_ceil(2) + hydrogens as u32;
                    allowed.iter().any(|a| *a as u32 == total)
                }
            }
        };
        ValenceState {
            bond_sum_x2: sum2,
            hydrogens,
            legal,
        }
    }

    pub fn is_valence_legal(&self) -> bool {
        (0..self.len()).all(|v| self.valence_state(v).legal)
    }

    /// Aromatic flags follow incident aromatic bonds after graph edits.
    pub fn refresh_aromatic_flags(&mut self) {
        for v in 0..self.atoms.len() {
            let aromatic = self.adjacency[v]
                .iter()
                .any(|(_, b)| self.bonds[*b].order == BondOrder::Aromatic);
            self.atoms[v].aromatic = aromatic;
        }
    }

    pub fn atom_by_map(&self, map: u32) -> Option<usize> {
        self.atoms.iter().position(|a| a.atom_map == Some(map))
    }

    pub fn clear_atom_maps(&mut self) {
        for atom in &mut self.atoms {
            atom.atom_map = None;
        }
    }

    /// Number atoms 1..=N in order, replacing any existing maps.
    pub fn assign_sequential_maps(&mut self) {
        for (i, atom) in self.atoms.iter_mut().enumerate() {
            atom.atom_map = Some(i as u32 + 1);
        }
    }

    pub fn is_fully_mapped(&self) -> bool {
        self.atoms.iter().all(|a| a.atom_map.is_some())
    }

    /// Connected components as sorted atom-index lists, ordered by first atom.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for start in 0..self.len() {
            if seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut comp = Vec::new();
            while let Some(v) = stack.pop() {
                comp.push(v);
                for (nb, _) in &self.adjacency[v] {
                    if !seen[*nb] {
                        seen[*nb] = true;
                        stack.push(*nb);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Induced subgraph on `atoms`, returned with the old→new index map.
    pub fn subgraph(&self, atoms: &[usize]) -> (MolGraph, Vec<Option<usize>>) {
        let mut index = vec![None; self.len()];
        let mut g = MolGraph::new();
        for &v in atoms {
            index[v] = Some(g.add_atom(self.atoms[v].clone()));
        }
        for bond in &self.bonds {
            if let (Some(a), Some(b)) = (index[bond.a], index[bond.b]) {
                g.add_bond(a, b, bond.order);
            }
        }
        (g, index)
    }

    pub fn split_components(&self) -> Vec<MolGraph> {
        self.components()
            .iter()
            .map(|comp| self.subgraph(comp).0)
            .collect()
    }

    /// Disjoint union; atoms of `other` are appended after ours.
    pub fn append(&mut self, other: &MolGraph) -> usize {
        let offset = self.len();
        for atom in &other.atoms {
            self.add_atom(atom.clone());
        }
        for bond in &other.bonds {
            self.add_bond(bond.a + offset, bond.b + offset, bond.order);
        }
        offset
    }

    /// Same graph with atoms reordered so that new atom `i` is old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.len());
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut g = MolGraph::new();
        for &old in perm {
            g.add_atom(self.atoms[old].clone());
        }
        let mut bonds: Vec<Bond> = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: inverse[b.a],
                b: inverse[b.b],
                order: b.order,
            })
            .collect();
        bonds.sort_by_key(|b| (b.a.min(b.b), b.a.max(b.b)));
        for b in bonds {
            g.add_bond(b.a, b.b, b.order);
        }
        g
    }
}

impl fmt::Display for MolGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&write_smiles(self))
    }
}
