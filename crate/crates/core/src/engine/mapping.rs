//! Atom mapping of proposed reactants onto a product, used to score queries.

use crate::molgraph::MolGraph;

/// Search bounds for [`map_reactants`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingLimits {
    /// Most product bonds allowed to be absent from the reactants.
    pub max_broken: usize,
    /// Extra broken bonds explored beyond the least found.
    pub slack: usize,
    pub max_mappings: usize,
    /// Search-tree node budget per broken-bond level.
    pub max_nodes: usize,
    /// Largest hydrogen-count change allowed on a mapped atom.
    pub max_h_change: i8,
}

impl Default for MappingLimits {
    fn default() -> Self {
        MappingLimits {
            max_broken: 4,
            slack: 0,
            max_mappings: 64,
            max_nodes: 200_000,
            max_h_change: crate::reaction::DEFAULT_MAX_H_CHANGE,
        }
    }
}

struct Search<'a> {
    product: &'a MolGraph,
    reactants: &'a MolGraph,
    order: Vec<usize>,
    phi: Vec<usize>,
    used: Vec<bool>,
    budget: usize,
    nodes: usize,
    limits: MappingLimits,
    found: Vec<Vec<usize>>,
}

impl Search<'_> {
    fn compatible(&self, u: usize, r: usize) -> bool {
        let (pa, ra) = (self.product.atom(u), self.reactants.atom(r));
        pa.element == ra.element
            && pa.formal_charge == ra.formal_charge
            && (ra.total_h() as i32 - pa.total_h() as i32).abs() <= self.limits.max_h_change as i32
    }

    /// Extra broken bonds from placing `u` on `r`, or `None` if a reactant
    /// bond would have to form on the retro side.
    fn cost(&self, depth: usize, u: usize, r: usize) -> Option<usize> {
        let mut broken = 0;
        for &w in &self.order[..depth] {
            let rw = self.phi[w];
            let in_product = self.product.bond_between(u, w).is_some();
            let in_reactants = self.reactants.bond_between(r, rw).is_some();
            match (in_product, in_reactants) {
                (true, false) => broken += 1,
                (false, true) => return None,
                _ => {}
            }
        }
        Some(broken)
    }

    fn run(&mut self, depth: usize, broken: usize) {
        if self.found.len() >= self.limits.max_mappings || self.nodes >= self.limits.max_nodes {
            return;
        }
        self.nodes += 1;
        if depth == self.order.len() {
            if broken == self.budget {
                self.found.push(self.phi.clone());
            }
            return;
        }
        let u = self.order[depth];
        // Images adjacent to already-placed neighbours come first.
        let mut near = Vec::new();
        for &(w, _) in self.product.neighbors(u) {
            if self.order[..depth].contains(&w) {
                for &(r, _) in self.reactants.neighbors(self.phi[w]) {
                    if !near.contains(&r) {
                        near.push(r);
                    }
                }
            }
        }
        let rest = (0..self.reactants.len()).filter(|r| !near.contains(r));
        let candidates: Vec<usize> = near.iter().copied().chain(rest).collect();
        for r in candidates {
            if self.used[r] || !self.compatible(u, r) {
                continue;
            }
            let Some(c) = self.cost(depth, u, r) else { continue };
            if broken + c > self.budget {
                continue;
            }
            self.phi[u] = r;
            self.used[r] = true;
            self.run(depth + 1, broken + c);
            self.used[r] = false;
        }
    }
}

fn bfs_order(g: &MolGraph) -> Vec<usize> {
    let mut seen = vec![false; g.len()];
    let mut order = Vec::with_capacity(g.len());
    for start in 0..g.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut head = order.len();
        order.push(start);
        while head < order.len() {
            let v = order[head];
            head += 1;
            for &(w, _) in g.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    order.push(w);
                }
            }
        }
    }
    order
}

/// Injective maps from product atoms into the atoms of `reactants` (the
/// merged reactant graph) that keep elements and charges and never create a
/// bond on the retro side. Only maps breaking the fewest product bonds, plus
/// `limits.slack` more, are returned. `phi[u]` is the reactant atom of `u`.
pub fn map_reactants(product: &MolGraph, reactants: &MolGraph, limits: MappingLimits) -> Vec<Vec<usize>> {
    let mut search = Search {
        product,
        reactants,
        order: bfs_order(product),
        phi: vec![usize::MAX; product.len()],
        used: vec![false; reactants.len()],
        budget: 0,
        nodes: 0,
        limits,
        found: Vec::new(),
    };
    let mut least = None;
    for budget in 0..=limits.max_broken {
        if least.is_some_and(|l: usize| budget > l + limits.slack) {
            break;
        }
        search.budget = budget;
        search.nodes = 0;
        let before = search.found.len();
        search.run(0, 0);
        if search.found.len() > before && least.is_none() {
            least = Some(budget);
        }
        if search.found.len() >= limits.max_mappings {
            break;
        }
    }
    search.found
}
