use crate::molgraph::structure::{adjacency_powers, atom_ring_flags, DistanceProvider, TopologicalDistance};
use crate::molgraph::MolGraph;
use crate::nn::NO_ROW;

/// Walk counts above this value share one embedding row.
pub const COUNT_CLIP: u64 = 8;
/// Total degrees above this value share one embedding row.
pub const DEGREE_CLIP: usize = 8;
pub const MAX_CHARGE: i8 = 3;
pub const MAX_HYDROGENS: u8 = 4;

pub const ELEMENT_ROWS: usize = 87;
pub const CHARGE_ROWS: usize = 2 * MAX_CHARGE as usize + 1;
pub const HYDROGEN_ROWS: usize = MAX_HYDROGENS as usize + 1;
pub const DEGREE_ROWS: usize = DEGREE_CLIP + 1;
pub const COUNT_ROWS: usize = COUNT_CLIP as usize + 1;

/// Lookup indices for one graph. Row and pair layout: atoms `0..n`, then
/// the super node at index `n`; pair `(u, v)` lives at `u·(n+1)+v`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub n: usize,
    pub element: Vec<u32>,
    pub charge: Vec<u32>,
    pub hydrogens: Vec<u32>,
    pub aromatic: Vec<u32>,
    pub ring: Vec<u32>,
    pub degree: Vec<u32>,
    /// One index list per (sense, hop) table, sense-major.
    pub local: Vec<Vec<u32>>,
    /// Row 0 of the virtual-edge table on super-node pairs.
    pub virtual_edge: Vec<u32>,
    pub dists: Vec<Option<f64>>,
}

impl GraphInput {
    pub fn new(g: &MolGraph, senses: usize, max_hop: usize) -> Self {
        Self::with_distances(g, senses, max_hop, &TopologicalDistance)
    }

    pub fn with_distances(g: &MolGraph, senses: usize, max_hop: usize, provider: &dyn DistanceProvider) -> Self {
        let n = g.len();
        let m = n + 1;
        let ring = atom_ring_flags(g);
        let node = |f: &dyn Fn(usize) -> u32| -> Vec<u32> {
            (0..m).map(|v| if v < n { f(v) } else { NO_ROW }).collect()
        };
        let element = node(&|v| g.atom(v).element.atomic_number() as u32);
        let charge = node(&|v| (g.atom(v).formal_charge.clamp(-MAX_CHARGE, MAX_CHARGE) + MAX_CHARGE) as u32);
        let hydrogens = node(&|v| g.atom(v).total_h().min(MAX_HYDROGENS) as u32);
        let aromatic = node(&|v| g.atom(v).aromatic as u32);
        let ring_idx = node(&|v| ring[v] as u32);
        let degree = node(&|v| g.total_degree(v).min(DEGREE_CLIP) as u32);

        let powers = adjacency_powers(g, max_hop);
        let mut local = Vec::with_capacity(senses * max_hop);
        for p in powers.iter().filter(|p| p.sense < senses) {
            let mut idx = vec![NO_ROW; m * m];
            for u in 0..n {
                for v in 0..n {
                    idx[u * m + v] = p.counts.get(u, v).min(COUNT_CLIP) as u32;
                }
            }
            local.push(idx);
        }
        let mut virtual_edge = vec![NO_ROW; m * m];
        let mut dists = vec![None; m * m];
        let d = provider.distances(g);
        for u in 0..m {
            for v in 0..m {
                if u == n || v == n {
                    virtual_edge[u * m + v] = 0;
                } else {
                    dists[u * m + v] = Some(d.get(u, v));
                }
            }
        }
        GraphInput {
            n,
            element,
            charge,
            hydrogens,
            aromatic,
            ring: ring_idx,
            degree,
            local,
            virtual_edge,
            dists,
        }
    }

    /// Same input with atom `v`'s embedding row and every bias entry on its
    /// row and column removed.
    pub fn masked(&self, v: usize) -> GraphInput {
        assert!(v < self.n, "mask index out of range");
        let mut out = self.clone();
        for list in [
            &mut out.element,
            &mut out.charge,
            &mut out.hydrogens,
            &mut out.aromatic,
            &mut out.ring,
            &mut out.degree,
        ] {
            list[v] = NO_ROW;
        }
        let m = self.n + 1;
        for w in 0..m {
            for pair in [v * m + w, w * m + v] {
                for list in out.local.iter_mut() {
                    list[pair] = NO_ROW;
                }
                out.virtual_edge[pair] = NO_ROW;
                out.dists[pair] = None;
            }
        }
        out
    }

    pub fn pairs(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }
}
