//! Canonical atom ranking and SMILES output.
//!
//! Ranks start from an atom invariant (wildcards first, then element,
//! heavy degree, charge and the rest of the atom record) and are refined by
//! neighbourhood signatures until stable. Remaining ties are broken by
//! branching over every member of the first tied class and keeping the
//! lexicographically smallest output; automorphisms found along the way prune
//! symmetric branches.

use std::collections::HashMap;

use super::{BondOrder, MolGraph};

const LEAF_BUDGET: usize = 20_000;

/// Canonical SMILES plus the atom order it was written in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalForm {
    pub smiles: String,
    /// `order[i]` is the input atom written at position `i`.
    pub order: Vec<usize>,
}

/// Deterministic, permutation-invariant SMILES (atom maps included).
pub fn write_smiles(g: &MolGraph) -> String {
    canonical_form(g).smiles
}

/// Canonical SMILES with atom maps removed.
pub fn canonical_smiles(g: &MolGraph) -> String {
    if g.atoms().iter().all(|a| a.atom_map.is_none()) {
        return write_smiles(g);
    }
    let mut stripped = g.clone();
    stripped.clear_atom_maps();
    write_smiles(&stripped)
}

pub fn canonical_form(g: &MolGraph) -> CanonicalForm {
    if g.is_empty() {
        return CanonicalForm {
            smiles: String::new(),
            order: Vec::new(),
        };
    }
    let ranks = refine(g, initial_ranks(g));
    let mut search = Search {
        g,
        best: None,
        automorphisms: Vec::new(),
        leaves: 0,
    };
    search.explore(ranks, &mut Vec::new());
    let (smiles, order) = search.best.expect("at least one leaf");
    CanonicalForm { smiles, order }
}

fn initial_ranks(g: &MolGraph) -> Vec<usize> {
    let ring = super::structure::atom_ring_flags(g);
    let keys: Vec<_> = (0..g.len())
        .map(|v| {
            let a = g.atom(v);
            (
                !a.is_wildcard(),
                a.element,
                g.heavy_degree(v),
                a.formal_charge,
                a.total_h(),
                a.aromatic,
                ring[v],
                a.isotope,
                a.atom_map,
            )
        })
        .collect();
    dense_ranks(&keys)
}

fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).expect("key present"))
        .collect()
}

fn class_count(ranks: &[usize]) -> usize {
    ranks.iter().max().map_or(0, |m| m + 1)
}

fn refine(g: &MolGraph, mut ranks: Vec<usize>) -> Vec<usize> {
    loop {
        let before = class_count(&ranks);
        let keys: Vec<(usize, Vec<(u8, usize)>)> = (0..g.len())
            .map(|v| {
                let mut nb: Vec<(u8, usize)> = g
                    .neighbors(v)
                    .iter()
                    .map(|(w, b)| (g.bonds()[*b].order.code(), ranks[*w]))
                    .collect();
                nb.sort_unstable();
                (ranks[v], nb)
            })
            .collect();
        ranks = dense_ranks(&keys);
        if class_count(&ranks) == before {
            return ranks;
        }
    }
}

struct Search<'a> {
    g: &'a MolGraph,
    best: Option<(String, Vec<usize>)>,
    automorphisms: Vec<Vec<usize>>,
    leaves: usize,
}

impl Search<'_> {
    fn explore(&mut self, ranks: Vec<usize>, fixed: &mut Vec<usize>) {
        let n = ranks.len();
        if class_count(&ranks) == n {
            self.leaf(&ranks);
            return;
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_count(&ranks)];
        for (v, r) in ranks.iter().enumerate() {
            members[*r].push(v);
        }
        let tied = members
            .iter()
            .find(|m| m.len() > 1)
            .expect("ties exist")
            .clone();

        let mut explored: Vec<usize> = Vec::new();
        for &candidate in &tied {
            if self.leaves >= LEAF_BUDGET && self.best.is_some() {
                return;
            }
            if !explored.is_empty() && self.equivalent(fixed, &explored, candidate) {
                continue;
            }
            let keys: Vec<(usize, bool)> = ranks
                .iter()
                .enumerate()
                .map(|(v, r)| (*r, v != candidate && tied.contains(&v)))
                .collect();
            let split = refine(self.g, dense_ranks(&keys));
            fixed.push(candidate);
            self.explore(split, fixed);
            fixed.pop();
            explored.push(candidate);
        }
    }

    /// Whether `candidate` shares an orbit with an explored member under the
    /// known automorphisms that fix every atom chosen on the current path.
    fn equivalent(&self, fixed: &[usize], explored: &[usize], candidate: usize) -> bool {
        let n = self.g.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut y = x;
            while p[y] != r {
                let next = p[y];
                p[y] = r;
                y = next;
            }
            r
        }
        let mut any = false;
        for perm in &self.automorphisms {
            if fixed.iter().all(|&f| perm[f] == f) {
                any = true;
                for (i, &j) in perm.iter().enumerate() {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a] = b;
                    }
                }
            }
        }
        if !any {
            return false;
        }
        let c = find(&mut parent, candidate);
        explored.iter().any(|&e| find(&mut parent, e) == c)
    }

    fn leaf(&mut self, ranks: &[usize]) {
        self.leaves += 1;
        let (smiles, order) = emit(self.g, ranks);
        match &self.best {
            None => self.best = Some((smiles, order)),
            Some((best, best_order)) => {
                if smiles == *best {
                    let mut perm = vec![0; order.len()];
                    for (i, &v) in best_order.iter().enumerate() {
                        perm[v] = order[i];
                    }
                    if perm.iter().enumerate().any(|(i, p)| i != *p) {
                        self.automorphisms.push(perm);
                    }
                } else if smiles < *best {
                    self.best = Some((smiles, order));
                }
            }
        }
    }
}

fn bond_symbol(g: &MolGraph, a: usize, b: usize, order: BondOrder) -> &'static str {
    let both_aromatic = g.atom(a).aromatic && g.atom(b).aromatic;
    match order {
        BondOrder::Single if both_aromatic => "-",
        BondOrder::Single => "",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic if both_aromatic => "",
        BondOrder::Aromatic => ":",
    }
}

pub(crate) fn atom_text(g: &MolGraph, v: usize) -> String {
    let a = g.atom(v);
    if a.is_wildcard() && a.formal_charge == 0 && a.total_h() == 0 && a.atom_map.is_none() && a.isotope.is_none() {
        return "*".to_string();
    }
    let organic = a.element.is_organic_subset()
        && (!a.aromatic || a.element.is_aromatic_organic())
        && a.formal_charge == 0
        && a.atom_map.is_none()
        && a.isotope.is_none()
        && g.default_implicit_h(v) == Some(a.total_h());
    let symbol = if a.aromatic {
        a.element.symbol().to_ascii_lowercase()
    } else {
        a.element.symbol().to_string()
    };
    if organic {
        return symbol;
    }
    let mut s = String::from("[");
    if let Some(iso) = a.isotope {
        s.push_str(&iso.to_string());
    }
    s.push_str(&symbol);
    match a.total_h() {
        0 => {}
        1 => s.push('H'),
        h => s.push_str(&format!("H{h}")),
    }
    match a.formal_charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => s.push_str(&format!("+{c}")),
        c => s.push_str(&format!("-{}", -c)),
    }
    if let Some(m) = a.atom_map {
        s.push_str(&format!(":{m}"));
    }
    s.push(']');
    s
}

/// Write SMILES for a total ranking. Components are emitted separately and
/// joined in sorted order.
fn emit(g: &MolGraph, ranks: &[usize]) -> (String, Vec<usize>) {
    let n = g.len();
    let mut visited = vec![false; n];
    let mut parts: Vec<(String, Vec<usize>)> = Vec::new();
    let mut roots: Vec<usize> = (0..n).collect();
    roots.sort_by_key(|v| ranks[*v]);
    let sorted_neighbors: Vec<Vec<usize>> = (0..n)
        .map(|v| {
            let mut nb: Vec<usize> = g.neighbors(v).iter().map(|(w, _)| *w).collect();
            nb.sort_by_key(|w| ranks[*w]);
            nb
        })
        .collect();

    for root in roots {
        if visited[root] {
            continue;
        }
        // Pass 1: spanning tree and ring-closure edges.
        let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut ring_edges: Vec<(usize, usize)> = Vec::new();
        let mut preorder = Vec::new();
        let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
        visited[root] = true;
        preorder.push(root);
        while let Some(top) = stack.last_mut() {
            let (v, parent, idx) = *top;
            if idx < sorted_neighbors[v].len() {
                top.2 += 1;
                let w = sorted_neighbors[v][idx];
                if Some(w) == parent {
                    continue;
                }
                if visited[w] {
                    let e = (v.min(w), v.max(w));
                    if !ring_edges.contains(&e) {
                        ring_edges.push(e);
                    }
                } else {
                    visited[w] = true;
                    preorder.push(w);
                    children.entry(v).or_default().push(w);
                    stack.push((w, Some(v), 0));
                }
            } else {
                stack.pop();
            }
        }
        let position: HashMap<usize, usize> =
            preorder.iter().enumerate().map(|(i, v)| (*v, i)).collect();

        // Pass 2: emission.
        let mut ctx = Emitter {
            g,
            ranks,
            ring_edges: &ring_edges,
            position: &position,
            children: &children,
            digits: vec![None; 100],
            open: HashMap::new(),
            out: String::new(),
        };
        ctx.subtree(root);
        let out = ctx.out;
        parts.push((out, preorder));
    }
    parts.sort();
    let smiles = parts
        .iter()
        .map(|(s, _)| s.as_str())
        .collect::<Vec<_>>()
        .join(".");
    let order = parts.into_iter().flat_map(|(_, o)| o).collect();
    (smiles, order)
}

struct Emitter<'a> {
    g: &'a MolGraph,
    ranks: &'a [usize],
    ring_edges: &'a [(usize, usize)],
    position: &'a HashMap<usize, usize>,
    children: &'a HashMap<usize, Vec<usize>>,
    digits: Vec<Option<(usize, usize)>>,
    open: HashMap<(usize, usize), usize>,
    out: String,
}

impl Emitter<'_> {
    fn subtree(&mut self, v: usize) {
        self.atom(v);
        let kids = self.children.get(&v).cloned().unwrap_or_default();
        for (i, &w) in kids.iter().enumerate() {
            let last = i + 1 == kids.len();
            if !last {
                self.out.push('(');
            }
            let order = self.g.bond_order(v, w).expect("tree edge");
            self.out.push_str(bond_symbol(self.g, v, w, order));
            self.subtree(w);
            if !last {
                self.out.push(')');
            }
        }
    }

    fn atom(&mut self, v: usize) {
        self.out.push_str(&atom_text(self.g, v));
        let mut closing = Vec::new();
        let mut opening = Vec::new();
        for &(a, b) in self.ring_edges {
            if a != v && b != v {
                continue;
            }
            let other = if a == v { b } else { a };
            if self.position[&other] < self.position[&v] {
                closing.push((a, b));
            } else {
                opening.push((other, (a, b)));
            }
        }
        closing.sort_by_key(|e| self.open[e]);
        for e in closing {
            let d = self.open.remove(&e).expect("ring opened");
            self.digits[d] = None;
            push_digit(&mut self.out, d);
        }
        opening.sort_by_key(|(other, _)| self.ranks[*other]);
        for (other, e) in opening {
            let d = (1..100)
                .find(|d| self.digits[*d].is_none())
                .expect("ring digits exhausted");
            self.digits[d] = Some(e);
            self.open.insert(e, d);
            let order = self.g.bond_order(v, other).expect("ring edge");
            self.out.push_str(bond_symbol(self.g, v, other, order));
            push_digit(&mut self.out, d);
        }
    }
}

fn push_digit(out: &mut String, d: usize) {
    if d < 10 {
        out.push((b'0' + d as u8) as char);
    } else {
        out.push_str(&format!("%{d:02}"));
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_smiles;
    use super::*;

    fn canon(s: &str) -> String {
        write_smiles(&parse_smiles(s).unwrap())
    }

    #[test]
    fn single_carbon() {
        assert_eq!(canon("C"), "C");
    }

    #[test]
    fn ethanol_orderings_agree() {
        assert_eq!(canon("CCO"), canon("OCC"));
        assert_eq!(canon("C(O)C"), canon("OCC"));
    }

    #[test]
    fn ring_and_branch_output_reparses() {
        for s in [
            "c1ccccc1",
            "CC(=O)Oc1ccccc1C(=O)O",
            "C1CC2CCC1C2",
            "O=C(NC1CC1)c1ccc(-c2ccccc2)cc1",
            "C[N+](C)(C)C.[Cl-]",
            "c1ccc2[nH]ccc2c1",
            "CC(C)(C)OC(=O)N1CCC(CC1)C(=O)O",
        ] {
            let out = canon(s);
            let again = canon(&out);
            assert_eq!(out, again, "{s}");
        }
    }

    #[test]
    fn symmetric_molecules_are_stable() {
        assert_eq!(canon("CC(C)(C)C"), canon("C(C)(C)(C)C"));
        assert_eq!(canon("c1ccc(cc1)C(c1ccccc1)c1ccccc1"), canon("C(c1ccccc1)(c1ccccc1)c1ccccc1"));
    }

    #[test]
    fn wildcard_written_first() {
        let form = canonical_form(&parse_smiles("OC(*)=O").unwrap());
        assert!(form.smiles.starts_with('*'), "{}", form.smiles);
        assert_eq!(form.order[0], 2);
    }
}
