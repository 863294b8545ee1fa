//! Structural matrices: bond senses, walk counts and topological distances.

use std::collections::VecDeque;

use super::{BondOrder, MolGraph};

/// Sentinel distance for atom pairs in different components.
pub const D_INF: u32 = 64;

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Copy> SquareMatrix<T> {
    pub fn filled(n: usize, value: T) -> Self {
        SquareMatrix {
            n,
            data: vec![value; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.n + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.n + c] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

/// The bond properties each carrying their own adjacency matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BondSense {
    Sigma,
    Pi,
    Triple,
    Aromatic,
    Conjugated,
    Ring,
}

pub const BOND_SENSES: [BondSense; 6] = [
    BondSense::Sigma,
    BondSense::Pi,
    BondSense::Triple,
    BondSense::Aromatic,
    BondSense::Conjugated,
    BondSense::Ring,
];

/// Flags per bond index: `true` when the bond lies on a cycle.
pub fn ring_bond_flags(g: &MolGraph) -> Vec<bool> {
    // A bond is on a cycle iff it is not a bridge (Tarjan low-link).
    let n = g.len();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut bridge = vec![false; g.bonds().len()];
    let mut time = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
        disc[root] = time;
        low[root] = time;
        time += 1;
        while let Some(&mut (v, parent_bond, ref mut idx)) = stack.last_mut() {
            if *idx < g.neighbors(v).len() {
                let (w, b) = g.neighbors(v)[*idx];
                *idx += 1;
                if Some(b) == parent_bond {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = time;
                    low[w] = time;
                    time += 1;
                    stack.push((w, Some(b), 0));
                } else {
                    low[v] = low[v].min(disc[w]);
                }
            } else {
                stack.pop();
                if let (Some(b), Some(&(p, _, _))) = (parent_bond, stack.last()) {
                    low[p] = low[p].min(low[v]);
                    if low[v] > disc[p] {
                        bridge[b] = true;
                    }
                }
            }
        }
    }
    bridge.into_iter().map(|b| !b).collect()
}

pub fn atom_ring_flags(g: &MolGraph) -> Vec<bool> {
    let ring = ring_bond_flags(g);
    let mut flags = vec![false; g.len()];
    for (bond, in_ring) in g.bonds().iter().zip(ring) {
        if in_ring {
            flags[bond.a] = true;
            flags[bond.b] = true;
        }
    }
    flags
}

fn unsaturated_elsewhere(g: &MolGraph, v: usize, skip_bond: usize) -> bool {
    g.neighbors(v)
        .iter()
        .any(|(_, b)| *b != skip_bond && g.bonds()[*b].order != BondOrder::Single)
}

fn single_between_unsaturated(g: &MolGraph, bond_idx: usize) -> bool {
    let bond = g.bonds()[bond_idx];
    bond.order == BondOrder::Single
        && unsaturated_elsewhere(g, bond.a, bond_idx)
        && unsaturated_elsewhere(g, bond.b, bond_idx)
}

/// Whether a bond is part of a conjugated system: aromatic, a single bond
/// between two unsaturated atoms, or a multiple bond touching such a single
/// bond.
pub fn is_conjugated(g: &MolGraph, bond_idx: usize) -> bool {
    let bond = g.bonds()[bond_idx];
    match bond.order {
        BondOrder::Aromatic => true,
        BondOrder::Single => single_between_unsaturated(g, bond_idx),
        BondOrder::Double | BondOrder::Triple => [bond.a, bond.b].iter().any(|&v| {
            g.neighbors(v)
                .iter()
                .any(|(_, b)| *b != bond_idx && single_between_unsaturated(g, *b))
        }),
    }
}

/// Per-bond sense flags in [`BOND_SENSES`] order.
pub fn bond_sense_flags(g: &MolGraph) -> Vec<[bool; 6]> {
    let ring = ring_bond_flags(g);
    g.bonds()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            [
                true,
                matches!(b.order, BondOrder::Double | BondOrder::Triple | BondOrder::Aromatic),
                b.order == BondOrder::Triple,
                b.order == BondOrder::Aromatic,
                is_conjugated(g, i),
                ring[i],
            ]
        })
        .collect()
}

impl MolGraph {
    /// One symmetric 0/1 adjacency matrix per bond sense.
    pub fn bond_senses(&self) -> Vec<SquareMatrix<u8>> {
        let flags = bond_sense_flags(self);
        let mut mats = vec![SquareMatrix::filled(self.len(), 0u8); BOND_SENSES.len()];
        for (bond, f) in self.bonds().iter().zip(&flags) {
            for (s, on) in f.iter().enumerate() {
                if *on {
                    mats[s].set(bond.a, bond.b, 1);
                    mats[s].set(bond.b, bond.a, 1);
                }
            }
        }
        mats
    }
}

/// Walk counts `A_s^j` for one sense and hop.
#[derive(Debug, Clone, PartialEq)]
pub struct SenseHopCounts {
    pub sense: usize,
    pub hop: usize,
    pub counts: SquareMatrix<u64>,
}

/// Powers `A_s^1..A_s^max_hop` of each sense matrix with exact walk counts;
/// clipping happens at embedding lookup.
pub fn adjacency_powers(g: &MolGraph, max_hop: usize) -> Vec<SenseHopCounts> {
    assert!(max_hop <= 5, "max_hop must be at most 5");
    let n = g.len();
    let mut out = Vec::with_capacity(BOND_SENSES.len() * max_hop);
    if max_hop == 0 {
        return out;
    }
    for (s, sense) in g.bond_senses().into_iter().enumerate() {
        let base: Vec<u64> = sense.as_slice().iter().map(|x| *x as u64).collect();
        let mut current = base.clone();
        for hop in 1..=max_hop {
            if hop > 1 {
                let mut next = vec![0u64; n * n];
                for i in 0..n {
                    for k in 0..n {
                        let a = current[i * n + k];
                        if a == 0 {
                            continue;
                        }
                        for j in 0..n {
                            let b = base[k * n + j];
                            if b != 0 {
                                next[i * n + j] = next[i * n + j].saturating_add(a * b);
                            }
                        }
                    }
                }
                current = next;
            }
            out.push(SenseHopCounts {
                sense: s,
                hop,
                counts: SquareMatrix {
                    n,
                    data: current.clone(),
                },
            });
        }
    }
    out
}

/// Source of the global atom-pair distance matrix.
pub trait DistanceProvider {
    fn distances(&self, g: &MolGraph) -> SquareMatrix<f64>;
}

/// Shortest-path bond counts, [`D_INF`] between components.
#[derive(Debug, Clone, Copy, Default)]
pub struct TopologicalDistance;

impl DistanceProvider for TopologicalDistance {
    fn distances(&self, g: &MolGraph) -> SquareMatrix<f64> {
        let d = topo_distances(g);
        SquareMatrix {
            n: d.n,
            data: d.data.iter().map(|x| *x as f64).collect(),
        }
    }
}

pub fn topo_distances(g: &MolGraph) -> SquareMatrix<u32> {
    let n = g.len();
    let mut d = SquareMatrix::filled(n, D_INF);
    let mut queue = VecDeque::new();
    for s in 0..n {
        d.set(s, s, 0);
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            let dv = d.get(s, v);
            for (w, _) in g.neighbors(v) {
                if d.get(s, *w) == D_INF && *w != s {
                    d.set(s, *w, dv + 1);
                    queue.push_back(*w);
                }
            }
        }
    }
    d
}
